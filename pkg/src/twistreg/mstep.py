"""Weighted Gauss-Newton step over twist-parameterized kinematics.

Given per-point weights and target positions from the E step, minimize

    E(theta) = 1/2 sum_i || r_i(theta) ||^2

with r_i = sqrt(w_i) * S (x_i(theta) - t_i) for point-to-point residuals
(S = diag(1/sigma)) or r_i = sqrt(w_i) * n_i . (x_i(theta) - t_i) for
point-to-plane. Normal equations follow the usual pattern A = sum J^T J,
b = sum J^T r, update = -A^{-1} b, with Levenberg damping scaled by the
trace. b is the exact gradient of E, which the tests pin by finite
differences.

Assembly comes in three shapes: a dense 6x6 system for one rigid body, the
two-phase articulated accumulation (per-point sums land in per-body 6x6
blocks first, so the point loop never sees the joint count), and a
block-sparse system over deformation nodes with an edge-based rigidity
regularizer. Points with zero weight are excluded up front, bit-identically
to deleting them.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .errors import SolverError
from .geometry import PointCloud, point_twist_jacobian
from .kinematics import ArticulatedTree, NodeGraph, RigidModel, forward_points

RESIDUAL_MODES = ("point_to_point", "point_to_plane")

# above this parameter count, block systems go through a sparse factorization
_DENSE_SOLVE_MAX = 360


@dataclass(frozen=True)
class ResidualSpec:
    """Per-point correspondence residual definition for one M step."""

    weights: np.ndarray            # (m,) in [0, 1]
    targets: np.ndarray            # (m, 3)
    sigma_inv: np.ndarray          # (3,) diagonal inverse kernel width
    mode: str = "point_to_point"
    normals: np.ndarray | None = None       # (m, 3) unit rows where valid
    normal_valid: np.ndarray | None = None  # (m,) False rows fall back to point residuals

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        t = np.asarray(self.targets, dtype=float)
        if t.shape != (len(w), 3):
            raise ValueError(f"targets must be ({len(w)}, 3), got {t.shape}")
        if np.any(w < 0) or np.any(w > 1) or not np.all(np.isfinite(w)):
            raise ValueError("weights must lie in [0, 1]")
        if not np.all(np.isfinite(t)):
            raise ValueError("non-finite targets")
        s = np.atleast_1d(np.asarray(self.sigma_inv, dtype=float))
        if s.size == 1:
            s = np.full(3, s[0])
        if s.shape != (3,) or np.any(s <= 0) or not np.all(np.isfinite(s)):
            raise ValueError("sigma_inv must be a positive scalar or 3-vector")
        if self.mode not in RESIDUAL_MODES:
            raise ValueError(f"unknown residual mode {self.mode!r}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "targets", t)
        object.__setattr__(self, "sigma_inv", s)
        if self.mode == "point_to_plane":
            if self.normals is None:
                raise ValueError("point-to-plane residuals need normals")
            n = np.asarray(self.normals, dtype=float)
            if n.shape != t.shape:
                raise ValueError("normals must match targets")
            valid = (np.ones(len(w), dtype=bool) if self.normal_valid is None
                     else np.asarray(self.normal_valid, dtype=bool).reshape(len(w)))
            lengths = np.linalg.norm(n[valid], axis=1)
            if len(lengths) and np.max(np.abs(lengths - 1.0)) > 1e-6:
                raise ValueError("normals must be unit length where valid")
            object.__setattr__(self, "normals", n)
            object.__setattr__(self, "normal_valid", valid)

    def __len__(self) -> int:
        return len(self.weights)


def residuals_from_moments(moments, sigma, mode: str = "point_to_point") -> ResidualSpec:
    """Package E-step moments for the solver (sigma is the spatial kernel width)."""
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    if sigma.size == 1:
        sigma = np.full(3, sigma[0])
    normals = normal_valid = None
    if mode == "point_to_plane":
        if moments.normal is None:
            raise ValueError("moments were computed without the normal channel")
        normals = moments.normal
        normal_valid = moments.normal_valid
    return ResidualSpec(moments.weight, moments.target, 1.0 / sigma, mode,
                        normals, normal_valid)


def _row_groups(spec: ResidualSpec, x: np.ndarray):
    """Yield (point_indices, projection (k, rows, 3), residual (k, rows)).

    The projection matrix carries sqrt(weight) and either the diagonal
    1/sigma scaling (point-to-point) or the normal row (point-to-plane).
    Zero-weight points are dropped here, preserving input order, which makes
    removal of such points bit-identical to weighting them out.
    """

    live = np.flatnonzero(spec.weights > 0)
    if len(live) == 0:
        return
    sw = np.sqrt(spec.weights[live])
    diff = x[live] - spec.targets[live]
    if spec.mode == "point_to_point":
        proj = sw[:, None, None] * np.diag(spec.sigma_inv)[None]
        yield live, proj, np.einsum("krc,kc->kr", proj, diff)
        return
    valid = spec.normal_valid[live]
    iv = live[valid]
    if len(iv):
        proj = (sw[valid, None] * spec.normals[iv])[:, None, :]
        yield iv, proj, np.einsum("krc,kc->kr", proj, diff[valid])
    ifb = live[~valid]
    if len(ifb):
        # no usable plane: plain point residual in meters
        proj = sw[~valid, None, None] * np.eye(3)[None]
        yield ifb, proj, np.einsum("krc,kc->kr", proj, diff[~valid])


def objective(spec: ResidualSpec, current_positions: np.ndarray) -> float:
    """E = 1/2 sum ||r||^2 for the rows the assemblers build."""
    x = np.asarray(current_positions, dtype=float)
    total = 0.0
    for _, _, r in _row_groups(spec, x):
        total += 0.5 * float(np.sum(r * r))
    return total


def _grouped_sum(values: np.ndarray, group_ids: np.ndarray, n_groups: int) -> np.ndarray:
    """Deterministic per-group sums of values (k, ...) keyed by group_ids."""
    out = np.zeros((n_groups,) + values.shape[1:])
    if len(values) == 0:
        return out
    order = np.argsort(group_ids, kind="stable")
    sv = values[order]
    sg = group_ids[order]
    starts = np.flatnonzero(np.r_[True, sg[1:] != sg[:-1]])
    out[sg[starts]] = np.add.reduceat(sv, starts, axis=0)
    return out


@dataclass
class NormalEquations:
    """A (dense or 6x6-block-sparse) and b for one Gauss-Newton solve."""

    n_params: int
    b: np.ndarray
    A: np.ndarray | None = None
    blocks: dict | None = None     # {(k, l), k <= l: (6, 6)}; (l, k) is the transpose

    def to_dense(self) -> np.ndarray:
        if self.A is not None:
            return self.A
        full = np.zeros((self.n_params, self.n_params))
        for (k, l), block in self.blocks.items():
            full[6 * k:6 * k + 6, 6 * l:6 * l + 6] += block
            if k != l:
                full[6 * l:6 * l + 6, 6 * k:6 * k + 6] += block.T
        return full

    def trace(self) -> float:
        if self.A is not None:
            return float(np.trace(self.A))
        return float(sum(np.trace(blk) for (k, l), blk in self.blocks.items() if k == l))


def _point_system(spec, x, group_ids, n_groups):
    """Phase-1 accumulation: per-group 6x6 Gauss-Newton blocks in twist space.

    Rows are gathered per group and reduced with one matrix product each, so
    a group's result depends only on its own rows in their input order.
    """
    H = np.zeros((n_groups, 6, 6))
    g = np.zeros((n_groups, 6))
    for idx, proj, r in _row_groups(spec, x):
        G = proj @ point_twist_jacobian(x[idx])
        gids = group_ids[idx]
        if n_groups == 1:
            flat = G.reshape(-1, 6)
            H[0] += flat.T @ flat
            g[0] += flat.T @ r.reshape(-1)
            continue
        order = np.argsort(gids, kind="stable")
        Gs, rs, gs = G[order], r[order], gids[order]
        starts = np.flatnonzero(np.r_[True, gs[1:] != gs[:-1]])
        for a, b in zip(starts, np.r_[starts[1:], len(gs)]):
            flat = Gs[a:b].reshape(-1, 6)
            H[gs[a]] += flat.T @ flat
            g[gs[a]] += flat.T @ rs[a:b].reshape(-1)
    return H, g


def assemble_rigid(spec: ResidualSpec, current_positions: np.ndarray) -> NormalEquations:
    x = np.asarray(current_positions, dtype=float)
    if len(x) != len(spec):
        raise ValueError("residual count does not match point count")
    H, g = _point_system(spec, x, np.zeros(len(x), dtype=int), 1)
    return NormalEquations(6, b=g[0], A=H[0])


def assemble_articulated(spec: ResidualSpec, current_positions: np.ndarray,
                         tree: ArticulatedTree) -> NormalEquations:
    """Two-phase assembly: the per-point pass sees only 6x6 body blocks, the
    per-body pass projects them through the spatial velocity Jacobians."""
    x = np.asarray(current_positions, dtype=float)
    if len(x) != len(spec):
        raise ValueError("residual count does not match point count")
    if tree.point_bodies is None:
        raise ValueError("articulated assembly needs the tree's point binding")
    if len(tree.point_bodies) != len(spec):
        raise ValueError("point binding does not match the residual count")
    H, g = _point_system(spec, x, tree.point_bodies, tree.n_bodies)
    live = np.flatnonzero(H.any(axis=(1, 2)) | g.any(axis=1))
    S = tree.spatial_velocity_jacobians()[live]
    A = np.einsum("bip,bij,bjq->pq", S, H[live], S, optimize=True)
    b = np.einsum("bip,bi->p", S, g[live])
    return NormalEquations(tree.n_params, b=b, A=A)


def assemble_nodegraph(spec: ResidualSpec, current_positions: np.ndarray,
                       graph: NodeGraph, lambda_reg: float = 0.0) -> NormalEquations:
    """Block-sparse assembly over deformation nodes.

    Data term: the blend is linearized, so node k receives the point's twist
    Jacobian scaled by its skinning weight, and pair (k, l) accumulates
    w_k w_l J^T J. Regularizer: for each graph edge, both endpoints' node
    positions must move consistently under either node's transform,
    sqrt(lambda_reg)-scaled residuals (T_k p - T_l p).
    """
    x = np.asarray(current_positions, dtype=float)
    if len(x) != len(spec):
        raise ValueError("residual count does not match point count")
    if len(graph.skinning.indices) != len(spec):
        raise ValueError("skinning does not match the residual count")
    if lambda_reg < 0:
        raise ValueError("lambda_reg must be nonnegative")
    n = graph.n_nodes
    diag = np.zeros((n, 6, 6))
    off: dict[tuple[int, int], np.ndarray] = {}
    b = np.zeros((n, 6))

    def add_off(lo_ids, hi_ids, contrib):
        codes = lo_ids.astype(np.int64) * n + hi_ids
        uc, inv = np.unique(codes, return_inverse=True)
        sums = _grouped_sum(contrib, inv, len(uc))
        for code, s in zip(uc, sums):
            key = (int(code // n), int(code % n))
            if key in off:
                off[key] = off[key] + s
            else:
                off[key] = s

    sk = graph.skinning
    for idx, proj, r in _row_groups(spec, x):
        Jp = point_twist_jacobian(x[idx])
        E = np.einsum("krc,kcj->krj", proj, Jp)
        EtE = np.einsum("kri,krj->kij", E, E)
        Etr = np.einsum("kri,kr->ki", E, r)
        W = sk.weights[idx]
        I = sk.indices[idx]
        K = W.shape[1]
        for a in range(K):
            live_a = (I[:, a] >= 0) & (W[:, a] > 0)
            if not live_a.any():
                continue
            b += _grouped_sum(W[live_a, a, None] * Etr[live_a], I[live_a, a], n)
            diag += _grouped_sum((W[live_a, a] ** 2)[:, None, None] * EtE[live_a],
                                 I[live_a, a], n)
            for c in range(a + 1, K):
                m = live_a & (I[:, c] >= 0) & (W[:, c] > 0)
                if not m.any():
                    continue
                contrib = (W[m, a] * W[m, c])[:, None, None] * EtE[m]
                lo = np.minimum(I[m, a], I[m, c])
                hi = np.maximum(I[m, a], I[m, c])
                add_off(lo, hi, contrib)

    if lambda_reg > 0 and len(graph.edges):
        R = np.stack([T.rotation for T in graph.node_transforms])
        t = np.stack([T.translation for T in graph.node_transforms])
        root = np.sqrt(lambda_reg)
        k_ids, l_ids = graph.edges[:, 0], graph.edges[:, 1]
        for p in (graph.node_positions[l_ids], graph.node_positions[k_ids]):
            xk = np.einsum("eij,ej->ei", R[k_ids], p) + t[k_ids]
            xl = np.einsum("eij,ej->ei", R[l_ids], p) + t[l_ids]
            r = root * (xk - xl)
            Jk = root * point_twist_jacobian(xk)
            Jl = -root * point_twist_jacobian(xl)
            diag += _grouped_sum(np.einsum("eri,erj->eij", Jk, Jk), k_ids, n)
            diag += _grouped_sum(np.einsum("eri,erj->eij", Jl, Jl), l_ids, n)
            b += _grouped_sum(np.einsum("eri,er->ei", Jk, r), k_ids, n)
            b += _grouped_sum(np.einsum("eri,er->ei", Jl, r), l_ids, n)
            cross = np.einsum("eri,erj->eij", Jk, Jl)
            lo = np.minimum(k_ids, l_ids)
            hi = np.maximum(k_ids, l_ids)
            swap = k_ids > l_ids
            cross[swap] = np.transpose(cross[swap], (0, 2, 1))
            add_off(lo, hi, cross)

    blocks = {(k, k): diag[k] for k in range(n)}
    blocks.update(off)
    return NormalEquations(6 * n, b=b.reshape(-1), blocks=blocks)


def _factor_solve(eq: NormalEquations, lam: float, method: str) -> np.ndarray:
    use_sparse = method == "sparse" or (method == "auto" and eq.A is None
                                        and eq.n_params > _DENSE_SOLVE_MAX)
    if use_sparse and eq.blocks is not None:
        rows, cols, vals = [], [], []
        grid = np.arange(6)
        for (k, l), block in eq.blocks.items():
            r0, c0 = 6 * k, 6 * l
            rr, cc = np.meshgrid(grid, grid, indexing="ij")
            rows.append((r0 + rr).ravel())
            cols.append((c0 + cc).ravel())
            vals.append(block.ravel())
            if k != l:
                rows.append((c0 + rr).ravel())
                cols.append((r0 + cc).ravel())
                vals.append(block.T.ravel())
        rows.append(np.arange(eq.n_params))
        cols.append(np.arange(eq.n_params))
        vals.append(np.full(eq.n_params, lam))
        A = scipy.sparse.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(eq.n_params, eq.n_params))
        solution = scipy.sparse.linalg.splu(A).solve(eq.b)
        if not np.all(np.isfinite(solution)):
            raise scipy.linalg.LinAlgError("sparse factorization produced non-finite values")
        return solution
    A = eq.to_dense() + lam * np.eye(eq.n_params)
    factor = scipy.linalg.cho_factor(A)
    return scipy.linalg.cho_solve(factor, eq.b)


def gn_solve(eq: NormalEquations, damping: float | None = None,
             method: str = "auto", _stats: dict | None = None) -> np.ndarray:
    """Solve (A + lam I) step = -b; lam escalates tenfold on factorization failure."""
    if method not in ("auto", "dense", "sparse"):
        raise ValueError(f"unknown solve method {method!r}")
    if not np.any(eq.b):
        if _stats is not None:
            _stats.update(damping=0.0, attempts=0)
        return np.zeros(eq.n_params)
    trace = eq.trace()
    lam = damping if damping is not None else 1e-6 * trace / eq.n_params
    for attempt in range(6):
        try:
            solution = _factor_solve(eq, lam, method)
        except (scipy.linalg.LinAlgError, RuntimeError):
            lam = lam * 10.0 if lam > 0 else max(trace / eq.n_params, 1.0) * 1e-10
            continue
        if _stats is not None:
            _stats.update(damping=lam, attempts=attempt + 1)
        return -solution
    raise SolverError(f"normal equations not factorizable after damping escalation "
                      f"(final damping {lam:.3e})")


@dataclass(frozen=True)
class MStepOptions:
    max_gn_iters: int = 1
    damping: float | None = None        # None: 1e-6 * trace(A) / n_params
    max_halvings: int = 10
    step_tolerance: float = 0.0
    lambda_reg: float = 0.0             # node-graph rigidity weight
    solve_method: str = "auto"


@dataclass
class MStepDiagnostics:
    objectives: list = field(default_factory=list)   # initial + per accepted step
    step_norms: list = field(default_factory=list)
    halvings: list = field(default_factory=list)
    dampings: list = field(default_factory=list)


def _regularizer_objective(graph: NodeGraph, lambda_reg: float) -> float:
    if lambda_reg <= 0 or not len(graph.edges):
        return 0.0
    R = np.stack([T.rotation for T in graph.node_transforms])
    t = np.stack([T.translation for T in graph.node_transforms])
    k_ids, l_ids = graph.edges[:, 0], graph.edges[:, 1]
    total = 0.0
    for p in (graph.node_positions[l_ids], graph.node_positions[k_ids]):
        xk = np.einsum("eij,ej->ei", R[k_ids], p) + t[k_ids]
        xl = np.einsum("eij,ej->ei", R[l_ids], p) + t[l_ids]
        total += 0.5 * lambda_reg * float(np.sum((xk - xl) ** 2))
    return total


def _total_objective(spec, reference, model, lambda_reg) -> float:
    value = objective(spec, forward_points(reference, model).positions)
    if isinstance(model, NodeGraph):
        value += _regularizer_objective(model, lambda_reg)
    return value


def _assemble(spec, x, model, lambda_reg) -> NormalEquations:
    if isinstance(model, RigidModel):
        return assemble_rigid(spec, x)
    if isinstance(model, ArticulatedTree):
        return assemble_articulated(spec, x, model)
    if isinstance(model, NodeGraph):
        return assemble_nodegraph(spec, x, model, lambda_reg)
    raise TypeError(f"unsupported kinematic model {type(model).__name__}")


def m_step(spec: ResidualSpec, reference: PointCloud, model,
           options: MStepOptions | None = None):
    """Run damped Gauss-Newton iterations with step halving.

    Returns (updated model, diagnostics). The objective over accepted steps
    never increases; a step that cannot be made non-increasing within
    max_halvings is rejected and iteration stops.
    """
    opts = options if options is not None else MStepOptions()
    current = model
    value = _total_objective(spec, reference, current, opts.lambda_reg)
    diag = MStepDiagnostics(objectives=[value])
    for _ in range(opts.max_gn_iters):
        x = forward_points(reference, current).positions
        eq = _assemble(spec, x, current, opts.lambda_reg)
        if not np.any(eq.b):
            break
        stats: dict = {}
        step = gn_solve(eq, opts.damping, opts.solve_method, _stats=stats)
        diag.dampings.append(stats.get("damping", 0.0))
        scale = 1.0
        accepted = None
        for halving in range(opts.max_halvings + 1):
            candidate = current.updated(scale * step)
            cand_value = _total_objective(spec, reference, candidate, opts.lambda_reg)
            if cand_value <= value * (1.0 + 1e-12) + 1e-300:
                accepted = (candidate, cand_value, halving)
                break
            scale *= 0.5
        if accepted is None:
            break
        current, value, halvings = accepted
        diag.objectives.append(value)
        diag.halvings.append(halvings)
        step_norm = float(np.linalg.norm(scale * step))
        diag.step_norms.append(step_norm)
        if step_norm <= opts.step_tolerance:
            break
    return current, diag
