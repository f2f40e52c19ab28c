"""Rigid-body geometry: point clouds, SE(3) transforms, twists, dual quaternions.

Conventions used throughout the package:
  * rotations are 3x3 orthonormal matrices with det +1,
  * a twist is a 6-vector (omega, t) = (alpha, beta, gamma, a, b, c); the
    instantaneous motion of a world point x is dx = omega x x + t,
  * twist updates act multiplicatively on the left: T_new = exp(twist) T.
"""

from dataclasses import dataclass, field
import numpy as np

from .errors import DegenerateBlendError

_EPS_ANGLE = 1e-9


def skew(v: np.ndarray) -> np.ndarray:
    """3x3 matrix S with S @ u == np.cross(v, u)."""
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def _skew_many(pts: np.ndarray) -> np.ndarray:
    """Stack of skew matrices, one per row of pts: (n, 3, 3)."""
    n = pts.shape[0]
    out = np.zeros((n, 3, 3))
    out[:, 0, 1] = -pts[:, 2]
    out[:, 0, 2] = pts[:, 1]
    out[:, 1, 0] = pts[:, 2]
    out[:, 1, 2] = -pts[:, 0]
    out[:, 2, 0] = -pts[:, 1]
    out[:, 2, 1] = pts[:, 0]
    return out


def _orthonormalize(M: np.ndarray) -> np.ndarray:
    # polar projection: nearest rotation in Frobenius norm
    U, _, Vt = np.linalg.svd(M)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] = -U[:, -1]
        R = U @ Vt
    return R


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element stored as rotation matrix + translation vector."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite rigid transform")
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > 1e-7 or np.linalg.det(R) < 0:
            raise ValueError(f"rotation is not orthonormal (max |R^T R - I| = {err:.2e})")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform()

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.rotation.T

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self @ other).apply(x) == self.apply(other.apply(x))."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -(self.rotation.T @ self.translation))

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    @staticmethod
    def from_matrix(M: np.ndarray) -> "RigidTransform":
        M = np.asarray(M, dtype=float)
        return RigidTransform(M[:3, :3], M[:3, 3])

    def almost_equal(self, other: "RigidTransform", tol: float = 1e-12) -> bool:
        return (np.abs(self.rotation - other.rotation).max() <= tol
                and np.abs(self.translation - other.translation).max() <= tol)


@dataclass(frozen=True)
class PointCloud:
    """Points with optional unit normals and optional per-point feature rows."""

    positions: np.ndarray
    normals: np.ndarray | None = None
    features: np.ndarray | None = None

    def __post_init__(self):
        P = np.asarray(self.positions, dtype=float)
        if P.ndim != 2 or P.shape[1] != 3:
            raise ValueError(f"positions must be (n, 3), got {P.shape}")
        if P.shape[0] == 0:
            raise ValueError("empty point cloud")
        if not np.all(np.isfinite(P)):
            raise ValueError("non-finite positions")
        object.__setattr__(self, "positions", P)
        if self.normals is not None:
            N = np.asarray(self.normals, dtype=float)
            if N.shape != P.shape:
                raise ValueError(f"normals shape {N.shape} != positions shape {P.shape}")
            if not np.all(np.isfinite(N)):
                raise ValueError("non-finite normals")
            object.__setattr__(self, "normals", N)
        if self.features is not None:
            F = np.asarray(self.features, dtype=float)
            if F.ndim != 2 or F.shape[0] != P.shape[0]:
                raise ValueError(f"features must be (n, d), got {F.shape}")
            if not np.all(np.isfinite(F)):
                raise ValueError("non-finite features")
            object.__setattr__(self, "features", F)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def transformed(self, T: RigidTransform) -> "PointCloud":
        normals = T.rotate(self.normals) if self.normals is not None else None
        return PointCloud(T.apply(self.positions), normals, self.features)

    def diameter(self) -> float:
        """Length of the bounding-box diagonal."""
        extent = self.positions.max(axis=0) - self.positions.min(axis=0)
        return float(np.linalg.norm(extent))


def twist_exp(twist: np.ndarray) -> RigidTransform:
    """Exact SE(3) exponential of (omega, t).

    Rodrigues for the rotation; the translation is V(omega) @ t with the usual
    left-Jacobian V. Series forms keep small angles stable.
    """
    twist = np.asarray(twist, dtype=float).reshape(6)
    omega, t = twist[:3], twist[3:]
    theta = np.linalg.norm(omega)
    S = skew(omega)
    S2 = S @ S
    if theta < _EPS_ANGLE:
        A = 1.0 - theta**2 / 6.0
        B = 0.5 - theta**2 / 24.0
        C = 1.0 / 6.0 - theta**2 / 120.0
    else:
        A = np.sin(theta) / theta
        B = (1.0 - np.cos(theta)) / theta**2
        C = (theta - np.sin(theta)) / theta**3
    R = np.eye(3) + A * S + B * S2
    V = np.eye(3) + B * S + C * S2
    return RigidTransform(_orthonormalize(R), V @ t)


def apply_twist(twist: np.ndarray, T: RigidTransform) -> RigidTransform:
    """Left-multiplicative update exp(twist) @ T, re-orthonormalized.

    A zero twist returns T unchanged (bitwise), so chained no-op updates
    cannot drift.
    """
    twist = np.asarray(twist, dtype=float).reshape(6)
    if not np.any(twist):
        return T
    E = twist_exp(twist)
    return RigidTransform(_orthonormalize(E.rotation @ T.rotation),
                          E.rotation @ T.translation + E.translation)


def point_twist_jacobian(points: np.ndarray) -> np.ndarray:
    """d x / d twist for world points under dx = omega x x + t.

    Returns (n, 3, 6): the omega block is -skew(x), the t block is identity.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = points.shape[0]
    J = np.zeros((n, 3, 6))
    J[:, :, :3] = -_skew_many(points)
    J[:, 0, 3] = 1.0
    J[:, 1, 4] = 1.0
    J[:, 2, 5] = 1.0
    return J


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0:
        raise ValueError("zero rotation axis")
    S = skew(axis / n)
    return np.eye(3) + np.sin(angle) * S + (1.0 - np.cos(angle)) * (S @ S)


# --- quaternions (w, x, y, z) and dual quaternions ---

def quat_multiply(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Hamilton product; broadcasts over leading axes."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    w1, x1, y1, z1 = np.moveaxis(p, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(q, -1, 0)
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=-1)


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_from_rotation(R: np.ndarray) -> np.ndarray:
    """Unit quaternion for a rotation matrix (Shepperd's method, w >= 0)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(R[i, i] - R[j, j] - R[k, k] + 1.0) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def rotation_from_quat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from unit quaternions; broadcasts over leading axes."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


@dataclass(frozen=True)
class DualQuaternion:
    """Rigid motion as real + dual quaternion pair (w, x, y, z each)."""

    real: np.ndarray
    dual: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "real", np.asarray(self.real, dtype=float).reshape(4))
        object.__setattr__(self, "dual", np.asarray(self.dual, dtype=float).reshape(4))

    def normalized(self) -> "DualQuaternion":
        """Unit dual quaternion: |real| = 1 and real . dual = 0 afterwards."""
        n = np.linalg.norm(self.real)
        if n < 1e-12:
            raise DegenerateBlendError("dual quaternion with vanishing real part")
        real = self.real / n
        dual = self.dual / n
        dual = dual - real * np.dot(real, dual)
        return DualQuaternion(real, dual)


def rigid_to_dq(T: RigidTransform) -> DualQuaternion:
    qr = quat_from_rotation(T.rotation)
    t = np.concatenate([[0.0], T.translation])
    qd = 0.5 * quat_multiply(t, qr)
    return DualQuaternion(qr, qd)


def dq_to_rigid(dq: DualQuaternion) -> RigidTransform:
    dq = dq.normalized()
    R = rotation_from_quat(dq.real)
    t = 2.0 * quat_multiply(dq.dual, quat_conjugate(dq.real))[1:]
    return RigidTransform(_orthonormalize(R), t)


def dqb_blend(dqs: list[DualQuaternion] | np.ndarray, weights: np.ndarray) -> DualQuaternion:
    """Weighted dual-quaternion blend with sign disambiguation.

    Quaternions double-cover rotations, so each summand is flipped to the
    hemisphere of the first one before averaging. Raises DegenerateBlendError
    when the weighted real parts cancel below 1e-12.
    """
    if isinstance(dqs, np.ndarray):
        arr = np.asarray(dqs, dtype=float)
    else:
        arr = np.stack([np.concatenate([d.real, d.dual]) for d in dqs])
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if arr.shape[0] != weights.shape[0]:
        raise ValueError("one weight per dual quaternion required")
    signs = np.where(arr[:, :4] @ arr[0, :4] < 0.0, -1.0, 1.0)
    blended = (arr * (weights * signs)[:, None]).sum(axis=0)
    real, dual = blended[:4], blended[4:]
    if np.linalg.norm(real) < 1e-12:
        raise DegenerateBlendError("blended real part vanished; weights/rotations cancel")
    return DualQuaternion(real, dual).normalized()


def blend_node_transforms(node_dqs: np.ndarray, indices: np.ndarray,
                          weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized DQB over a skinning table.

    node_dqs: (n_nodes, 8) rows [real | dual]; indices/weights: (n_pts, K),
    index -1 marks padding and must carry weight 0. Returns per-point rotation
    matrices (n_pts, 3, 3) and translations (n_pts, 3).
    """
    node_dqs = np.asarray(node_dqs, dtype=float)
    idx = np.maximum(indices, 0)
    gathered = node_dqs[idx]                      # (n, K, 8)
    w = np.where(indices >= 0, weights, 0.0)
    # hemisphere alignment against each point's first live node
    first = np.argmax(indices >= 0, axis=1)
    ref = gathered[np.arange(len(idx)), first, :4]  # (n, 4)
    dots = np.einsum("nkj,nj->nk", gathered[:, :, :4], ref)
    signs = np.where(dots < 0.0, -1.0, 1.0)
    blended = np.einsum("nk,nkj->nj", w * signs, gathered)
    real, dual = blended[:, :4], blended[:, 4:]
    norms = np.linalg.norm(real, axis=1)
    if np.any(norms < 1e-12):
        raise DegenerateBlendError("blended real part vanished for some points")
    real = real / norms[:, None]
    dual = dual / norms[:, None]
    R = rotation_from_quat(real)
    t = 2.0 * quat_multiply(dual, quat_conjugate(real))[:, 1:]
    return R, t
