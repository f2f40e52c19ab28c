"""Correspondence moments for the EM registration loop.

For model point x_i and observation points y_k the E step needs the kernel
sums

    m0_i = sum_k K(x_i, y_k)
    m1_i = sum_k K(x_i, y_k) y_k          (3-vector)
    m2_i = sum_k K(x_i, y_k) (y_k . y_k)  (only when the kernel width is
                                           re-estimated)

with K the unnormalized Gaussian over the chosen correspondence features
(positions, feature vectors, or both concatenated, each block divided by its
own width). All value channels ride through one filter evaluation, either
brute force or a permutohedral lattice built once on the observations.

Because K is unnormalized, the uniform-outlier constant is folded into the
same scale: weight_i = m0_i / (m0_i + c'), where c' multiplies the mixture
constant w/(1-w) * n_obs/n_model by det(2*pi*Sigma)^(1/2) over the active
kernel dimensions. A normalized-posterior implementation gives identical
weights; tests pin this equivalence.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateCorrespondenceError
from .geometry import PointCloud
from .permutohedral import build_lattice, gaussian_transform_bruteforce

M0_FLOOR = 1e-12
SIGMA_FLOOR = 1e-5
NORMAL_LENGTH_FLOOR = 0.1


@dataclass(frozen=True)
class GmmConfig:
    """Mixture settings for the E step.

    sigma: spatial kernel width, scalar or per-axis 3-vector (meters).
    outlier_ratio: prior mass w of the uniform component, in [0, 1).
    mode: which features drive correspondence: "position", "feature", or
        "concatenated".
    feature_sigma: kernel widths for the feature block (required unless
        mode == "position").
    update_sigma: re-estimate an isotropic sigma after each E step.
    sigma_floor: lower clamp for the re-estimated sigma. Widths below the
        point spacing add no correspondence information, so annealed runs
        usually raise this to the sampling resolution.
    """

    sigma: float | np.ndarray = 0.05
    outlier_ratio: float = 0.1
    mode: str = "position"
    feature_sigma: float | np.ndarray | None = None
    update_sigma: bool = False
    sigma_floor: float = SIGMA_FLOOR

    def __post_init__(self):
        if not 0.0 <= self.outlier_ratio < 1.0:
            raise ValueError(f"outlier_ratio must be in [0, 1), got {self.outlier_ratio}")
        if self.mode not in ("position", "feature", "concatenated"):
            raise ValueError(f"unknown correspondence mode {self.mode!r}")
        if self.mode != "position" and self.feature_sigma is None:
            raise ValueError(f"mode {self.mode!r} requires feature_sigma")
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        if sigma.size == 1:
            sigma = np.full(3, sigma[0])
        if sigma.shape != (3,) or np.any(sigma <= 0) or not np.all(np.isfinite(sigma)):
            raise ValueError("sigma must be a positive scalar or 3-vector")
        object.__setattr__(self, "sigma", sigma)
        if self.update_sigma and self.mode != "position":
            raise ValueError("sigma re-estimation requires position correspondences")
        if self.update_sigma and not np.all(sigma == sigma[0]):
            raise ValueError("sigma re-estimation requires an isotropic kernel")
        if not self.sigma_floor > 0:
            raise ValueError("sigma_floor must be positive")

    def spatial_in_kernel(self) -> bool:
        return self.mode in ("position", "concatenated")

    def kernel_sigma(self, feature_dim: int) -> np.ndarray:
        """Concatenated per-dimension kernel widths for the active blocks."""
        blocks = []
        if self.spatial_in_kernel():
            blocks.append(self.sigma)
        if self.mode != "position":
            fs = np.atleast_1d(np.asarray(self.feature_sigma, dtype=float))
            if fs.size == 1:
                fs = np.full(feature_dim, fs[0])
            if fs.shape != (feature_dim,):
                raise ValueError(f"feature_sigma must be scalar or length {feature_dim}")
            if np.any(fs <= 0) or not np.all(np.isfinite(fs)):
                raise ValueError("feature_sigma must be positive and finite")
            blocks.append(fs)
        return np.concatenate(blocks)


def outlier_constant(outlier_ratio: float, n_obs: int, n_model: int,
                     kernel_sigma: np.ndarray) -> float:
    """Uniform-component constant on the unnormalized-kernel scale.

    The normalized-density constant is w/(1-w) * n_obs/n_model; multiplying
    by det(2*pi*Sigma)^(1/2) moves it next to raw kernel sums.
    """
    if not 0.0 <= outlier_ratio < 1.0:
        raise ValueError(f"outlier_ratio must be in [0, 1), got {outlier_ratio}")
    if n_obs <= 0 or n_model <= 0:
        raise ValueError("cloud sizes must be positive")
    kernel_sigma = np.asarray(kernel_sigma, dtype=float).reshape(-1)
    c = outlier_ratio / (1.0 - outlier_ratio) * (n_obs / n_model)
    return float(c * np.prod(np.sqrt(2.0 * np.pi) * kernel_sigma))


@dataclass(frozen=True)
class MomentField:
    """Per-model-point kernel sums and the quantities the M step consumes."""

    m0: np.ndarray                 # (m,)
    m1: np.ndarray                 # (m, 3)
    weight: np.ndarray             # (m,) inlier responsibility in [0, 1)
    target: np.ndarray             # (m, 3) m1/m0, model position where m0 ~ 0
    m2: np.ndarray | None = None   # (m,) second moment, when sigma is re-estimated
    normal: np.ndarray | None = None       # (m, 3) unit averaged normals
    normal_valid: np.ndarray | None = None  # (m,) False -> fall back to point residual
    c_prime: float = 0.0

    def inlier_mass(self) -> float:
        return float(self.weight.sum())


class MomentEngine:
    """Builds the observation-side filter once and evaluates moments per iteration.

    With a fixed kernel the lattice backend splats and blurs the observations
    a single time; every EM iteration only slices at the moved model points.
    """

    def __init__(self, observation: PointCloud, config: GmmConfig,
                 backend: str = "lattice", include_normals: bool = False):
        if backend not in ("lattice", "bruteforce"):
            raise ValueError(f"unknown backend {backend!r}")
        if config.mode != "position" and observation.features is None:
            raise ValueError("observation cloud has no features")
        if include_normals and observation.normals is None:
            raise ValueError("observation cloud has no normals")
        self.config = config
        self.backend = backend
        self.include_normals = include_normals
        self.observation = observation
        feature_dim = observation.features.shape[1] if observation.features is not None else 0
        self._kernel_sigma = config.kernel_sigma(feature_dim)
        cols = [np.ones((len(observation), 1)), observation.positions]
        self._m2_col = None
        self._normal_cols = None
        col = 4
        if config.update_sigma:
            cols.append(np.einsum("nd,nd->n", observation.positions,
                                  observation.positions)[:, None])
            self._m2_col = col
            col += 1
        if include_normals:
            cols.append(observation.normals)
            self._normal_cols = slice(col, col + 3)
        self._values = np.hstack(cols)
        self._obs_kernel = self._kernel_features(observation.positions, observation.features)
        self._lattice = None
        if backend == "lattice":
            self._lattice = build_lattice(self._obs_kernel, self._values, self._kernel_sigma)

    def _kernel_features(self, positions, features):
        blocks = []
        if self.config.spatial_in_kernel():
            blocks.append(np.asarray(positions, dtype=float))
        if self.config.mode != "position":
            if features is None:
                raise ValueError("correspondence mode needs features on both clouds")
            blocks.append(np.asarray(features, dtype=float))
        return np.hstack(blocks)

    def with_sigma(self, sigma: float) -> "MomentEngine":
        """New engine with an updated spatial kernel width (lattice rebuilt)."""
        return MomentEngine(self.observation, replace(self.config, sigma=sigma),
                            self.backend, self.include_normals)

    def moments(self, model_positions: np.ndarray,
                model_features: np.ndarray | None = None) -> MomentField:
        model_positions = np.asarray(model_positions, dtype=float)
        query = self._kernel_features(model_positions, model_features)
        if self._lattice is not None:
            out = self._lattice.slice(query)
        else:
            out = gaussian_transform_bruteforce(query, self._obs_kernel, self._values,
                                                self._kernel_sigma)
        m0 = np.maximum(out[:, 0], 0.0)
        m1 = out[:, 1:4]
        c_prime = outlier_constant(self.config.outlier_ratio, len(self.observation),
                                   len(model_positions), self._kernel_sigma)
        supported = m0 >= M0_FLOOR
        if c_prime > 0.0:
            weight = np.where(supported, m0 / (m0 + c_prime), 0.0)
        else:
            weight = np.where(supported, 1.0, 0.0)
        safe_m0 = np.where(supported, m0, 1.0)
        target = np.where(supported[:, None], m1 / safe_m0[:, None], model_positions)
        m2 = out[:, self._m2_col] if self._m2_col is not None else None
        normal = None
        normal_valid = None
        if self._normal_cols is not None:
            averaged = out[:, self._normal_cols] / safe_m0[:, None]
            length = np.linalg.norm(averaged, axis=1)
            normal_valid = supported & (length >= NORMAL_LENGTH_FLOOR)
            normal = np.where(normal_valid[:, None],
                              averaged / np.maximum(length, NORMAL_LENGTH_FLOOR)[:, None],
                              0.0)
        return MomentField(m0=m0, m1=m1, weight=weight, target=target, m2=m2,
                           normal=normal, normal_valid=normal_valid, c_prime=c_prime)


def compute_moments(model: PointCloud | np.ndarray, observation: PointCloud,
                    config: GmmConfig, backend: str = "lattice",
                    include_normals: bool = False) -> MomentField:
    """One-shot moment evaluation (engine built and used once)."""
    if isinstance(model, PointCloud):
        positions, features = model.positions, model.features
    else:
        positions, features = np.asarray(model, dtype=float), None
    engine = MomentEngine(observation, config, backend, include_normals)
    return engine.moments(positions, features)


def update_sigma(model_positions: np.ndarray, moments: MomentField,
                 floor: float = SIGMA_FLOOR) -> float:
    """Isotropic kernel width maximizing the fixed-posterior objective.

    With posteriors held at the current sigma the optimum is the weighted mean
    squared correspondence distance over three spatial dimensions:

        sigma^2 = sum_i [m0 |x|^2 - 2 x . m1 + m2]_i / (m0_i + c')
                  / (3 * sum_i m0_i / (m0_i + c'))

    The dimension factor 3 follows from d/d(sigma) of the quadratic-plus-log
    objective; a numeric maximization oracle pins it in the tests.
    """
    if moments.m2 is None:
        raise ValueError("moments were computed without the second-moment channel")
    x = np.asarray(model_positions, dtype=float)
    supported = moments.m0 >= M0_FLOOR
    denom_i = np.where(supported, moments.m0 + moments.c_prime, 1.0)
    num = np.where(supported,
                   (moments.m0 * np.einsum("nd,nd->n", x, x)
                    - 2.0 * np.einsum("nd,nd->n", x, moments.m1) + moments.m2) / denom_i,
                   0.0)
    mass = np.where(supported, moments.m0 / denom_i, 0.0)
    total_mass = mass.sum()
    if total_mass <= 0.0:
        raise DegenerateCorrespondenceError("no correspondence mass left")
    variance = max(float(num.sum() / (3.0 * total_mass)), 0.0)
    return max(float(np.sqrt(variance)), floor)
