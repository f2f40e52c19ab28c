"""Point-cloud file I/O: PLY (ascii / binary little-endian) and XYZ text.

Vertex layout understood in both formats:

    x y z [nx ny nz] [f_0 ... f_{D-1}]

PLY files name the columns through header properties; XYZ files are bare
whitespace columns and are interpreted by count (3 = positions, 6 =
positions + normals, anything else = positions + feature columns). Normals
are re-normalized to unit length on load; a deviation beyond 1e-3 warns,
since downstream plane residuals assume unit normals. Non-finite values are
rejected with the offending location rather than propagated.
"""

import warnings
from pathlib import Path

import numpy as np

from .errors import ParseError
from .geometry import PointCloud

# PLY scalar types; lists inside vertex elements are rejected.
_PLY_DTYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}

_NORMAL_NAMES = ("nx", "ny", "nz")
_NORMAL_DEVIATION_WARN = 1e-3


def _infer_format(path, format):
    if format is not None:
        if format not in ("ply", "xyz"):
            raise ValueError(f"unknown format {format!r}")
        return format
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return "ply"
    if suffix in (".xyz", ".txt"):
        return "xyz"
    raise ValueError(f"cannot infer format from {path!r}; pass format=")


def load_cloud(path, format=None):
    """Read a point cloud; raises ParseError with a line number on bad input."""
    if _infer_format(path, format) == "ply":
        return _load_ply(path)
    return _load_xyz(path)


def save_cloud(path, cloud, format=None, binary=True):
    """Write a point cloud; binary PLY round-trips float64 values exactly."""
    if _infer_format(path, format) == "ply":
        _save_ply(path, cloud, binary=binary)
    else:
        _save_xyz(path, cloud)


# ---------------------------------------------------------------------------
# shared column assembly


def _feature_indices(names):
    """Indices baked into f_* column names, validated to be 0..D-1."""
    tagged = sorted((int(n[2:]), n) for n in names)
    want = list(range(len(tagged)))
    got = [i for i, _ in tagged]
    if got != want:
        raise ParseError(f"feature columns must be f_0..f_{len(tagged) - 1}, "
                         f"got {[n for _, n in tagged]}")
    return [n for _, n in tagged]


def _assemble(columns, where):
    """Build a PointCloud from a name -> float64 column mapping."""
    for axis in ("x", "y", "z"):
        if axis not in columns:
            raise ParseError(f"{where}: missing vertex property {axis!r}")
    positions = np.column_stack([columns["x"], columns["y"], columns["z"]])
    if positions.shape[0] == 0:
        raise ParseError(f"{where}: empty point cloud")
    _reject_nonfinite(positions, "position", where)

    normals = None
    have = [n for n in _NORMAL_NAMES if n in columns]
    if have:
        if len(have) != 3:
            raise ParseError(f"{where}: normals need nx, ny, nz; got {have}")
        normals = np.column_stack([columns[n] for n in _NORMAL_NAMES])
        _reject_nonfinite(normals, "normal", where)
        normals = _renormalize(normals, where)

    features = None
    fnames = _feature_indices([n for n in columns if n.startswith("f_")])
    if fnames:
        features = np.column_stack([columns[n] for n in fnames])
        _reject_nonfinite(features, "feature", where)

    return PointCloud(positions, normals=normals, features=features)


def _reject_nonfinite(array, what, where):
    bad = ~np.isfinite(array)
    if bad.any():
        row = int(np.flatnonzero(bad.any(axis=1))[0])
        raise ParseError(f"{where}: non-finite {what} in vertex {row}")


def _renormalize(normals, where):
    lengths = np.linalg.norm(normals, axis=1)
    if np.any(lengths < 1e-12):
        row = int(np.flatnonzero(lengths < 1e-12)[0])
        raise ParseError(f"{where}: zero-length normal in vertex {row}")
    worst = float(np.max(np.abs(lengths - 1.0)))
    if worst <= 1e-12:
        return normals  # already unit; keep round trips bit-exact
    if worst > _NORMAL_DEVIATION_WARN:
        warnings.warn(f"{where}: normals re-normalized "
                      f"(max unit-length deviation {worst:.2e})")
    return normals / lengths[:, None]


# ---------------------------------------------------------------------------
# PLY


def _load_ply(path):
    with open(path, "rb") as fh:
        fmt, n_vertex, props, header_lines = _read_ply_header(fh, path)
        if n_vertex == 0:
            raise ParseError(f"{path}: empty point cloud")
        names = [name for name, _ in props]
        if fmt == "ascii":
            columns = _read_ply_ascii(fh, n_vertex, names, path, header_lines)
        else:
            record = np.dtype([(name, "<" + code) for name, code in props])
            raw = fh.read(record.itemsize * n_vertex)
            if len(raw) < record.itemsize * n_vertex:
                raise ParseError(f"{path}: vertex data truncated "
                                 f"(expected {n_vertex} records)")
            table = np.frombuffer(raw, dtype=record)
            columns = {name: table[name].astype(float) for name in names}
    return _assemble(columns, str(path))


def _read_ply_header(fh, path):
    """Parse the header up to end_header; trailing elements (faces) are
    tolerated because the vertex block always comes first in the body."""

    def next_line(expect_eof_ok=False):
        nonlocal lineno
        raw = fh.readline()
        if not raw:
            if expect_eof_ok:
                return None
            raise ParseError(f"{path}: line {lineno}: unexpected end of header")
        lineno += 1
        return raw.decode("ascii", errors="replace").strip()

    lineno = 0
    if next_line() != "ply":
        raise ParseError(f"{path}: line 1: not a PLY file")
    fmt = None
    n_vertex = None
    props = []
    in_vertex = False
    vertex_seen = False
    while True:
        line = next_line()
        if line == "end_header":
            break
        tokens = line.split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if len(tokens) < 2 or tokens[1] not in ("ascii",
                                                    "binary_little_endian"):
                raise ParseError(f"{path}: line {lineno}: unsupported format "
                                 f"{line!r}")
            fmt = tokens[1]
        elif tokens[0] == "element":
            if len(tokens) != 3:
                raise ParseError(f"{path}: line {lineno}: bad element line")
            if tokens[1] == "vertex":
                if vertex_seen:
                    raise ParseError(f"{path}: line {lineno}: duplicate "
                                     "vertex element")
                try:
                    n_vertex = int(tokens[2])
                except ValueError:
                    raise ParseError(f"{path}: line {lineno}: bad vertex "
                                     f"count {tokens[2]!r}") from None
                in_vertex = True
                vertex_seen = True
            else:
                # Faces etc. follow the vertex block; we never read that far.
                if not vertex_seen:
                    raise ParseError(f"{path}: line {lineno}: element "
                                     f"{tokens[1]!r} precedes vertex data")
                in_vertex = False
        elif tokens[0] == "property":
            if not in_vertex:
                continue
            if tokens[1] == "list":
                raise ParseError(f"{path}: line {lineno}: list property "
                                 "inside vertex element")
            if len(tokens) != 3:
                raise ParseError(f"{path}: line {lineno}: bad property line")
            code = _PLY_DTYPES.get(tokens[1])
            if code is None:
                raise ParseError(f"{path}: line {lineno}: unknown type "
                                 f"{tokens[1]!r}")
            props.append((tokens[2], code))
        else:
            raise ParseError(f"{path}: line {lineno}: unrecognized header "
                             f"line {line!r}")
    if fmt is None:
        raise ParseError(f"{path}: missing format line")
    if n_vertex is None:
        raise ParseError(f"{path}: missing vertex element")
    if not props:
        raise ParseError(f"{path}: vertex element has no properties")
    return fmt, n_vertex, props, lineno


def _read_ply_ascii(fh, n_vertex, names, path, header_lines):
    rows = []
    for i in range(n_vertex):
        raw = fh.readline()
        lineno = header_lines + 1 + i
        if not raw:
            raise ParseError(f"{path}: line {lineno}: expected {n_vertex} "
                             f"vertex lines, found {i}")
        tokens = raw.split()
        if len(tokens) != len(names):
            raise ParseError(f"{path}: line {lineno}: expected {len(names)} "
                             f"columns, got {len(tokens)}")
        try:
            rows.append([float(t) for t in tokens])
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: non-numeric "
                             "value") from None
    table = np.asarray(rows, dtype=float)
    return {name: table[:, j] for j, name in enumerate(names)}


def _ply_columns(cloud):
    names = ["x", "y", "z"]
    blocks = [cloud.positions]
    if cloud.normals is not None:
        names += list(_NORMAL_NAMES)
        blocks.append(cloud.normals)
    if cloud.features is not None:
        names += [f"f_{j}" for j in range(cloud.features.shape[1])]
        blocks.append(cloud.features)
    return names, np.hstack(blocks)


def _save_ply(path, cloud, binary):
    names, table = _ply_columns(cloud)
    header = ["ply",
              "format binary_little_endian 1.0" if binary else
              "format ascii 1.0",
              f"element vertex {len(cloud)}"]
    header += [f"property double {name}" for name in names]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(table, dtype="<f8").tobytes())
        else:
            np.savetxt(fh, table, fmt="%.17g")


# ---------------------------------------------------------------------------
# XYZ


def _load_xyz(path):
    rows = []
    width = None
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if width is None:
                width = len(tokens)
                if width < 3:
                    raise ParseError(f"{path}: line {lineno}: need at least "
                                     f"3 columns, got {width}")
            elif len(tokens) != width:
                raise ParseError(f"{path}: line {lineno}: expected {width} "
                                 f"columns, got {len(tokens)}")
            try:
                rows.append([float(t) for t in tokens])
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: non-numeric "
                                 "value") from None
    if not rows:
        raise ParseError(f"{path}: empty point cloud")
    table = np.asarray(rows, dtype=float)
    names = ["x", "y", "z"]
    if width == 6:
        names += list(_NORMAL_NAMES)
    else:
        names += [f"f_{j}" for j in range(width - 3)]
    return _assemble({n: table[:, j] for j, n in enumerate(names)}, str(path))


def _save_xyz(path, cloud):
    _, table = _ply_columns(cloud)
    with open(path, "wb") as fh:
        np.savetxt(fh, table, fmt="%.17g")
