"""EM registration driver: alternate moment evaluation (E step) and damped
Gauss-Newton updates (M step) until the per-iteration motion falls under a
tolerance.

With a fixed kernel width the observation-side filter is built exactly once
and only sliced as the model moves; when the width is re-estimated the filter
is rebuilt for the following iteration. Convergence is measured by the
largest per-body (or per-node) motion of one EM update, as rotation angle
plus translation relative to the model diameter; an update below the
tolerance is dropped and the pre-update state is final, so an already-aligned
problem terminates with its initialization untouched.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .estep import GmmConfig, MomentEngine
from .estep import update_sigma as _optimal_sigma
from .geometry import PointCloud, RigidTransform, rotation_angle
from .kinematics import ArticulatedTree, NodeGraph, RigidModel, forward_points
from .mstep import RESIDUAL_MODES, MStepOptions, m_step, residuals_from_moments
from .permutohedral import gaussian_transform_bruteforce

DEGENERATE_MASS_FRACTION = 1e-9


@dataclass(frozen=True)
class RegistrationConfig:
    gmm: GmmConfig = GmmConfig()
    residual_mode: str = "point_to_point"
    backend: str = "lattice"
    max_em_iters: int = 50
    twist_tolerance: float = 1e-4
    mstep: MStepOptions = MStepOptions()
    record_states: bool = False     # keep per-iteration kinematics snapshots

    def __post_init__(self):
        if self.residual_mode not in RESIDUAL_MODES:
            raise ValueError(f"unknown residual mode {self.residual_mode!r}")
        if self.backend not in ("lattice", "bruteforce"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.max_em_iters < 1:
            raise ValueError("max_em_iters must be at least 1")
        if not self.twist_tolerance > 0:
            raise ValueError("twist_tolerance must be positive")


@dataclass
class RegistrationResult:
    kinematics: object
    iterations: int
    objectives: list = field(default_factory=list)
    twist_norms: list = field(default_factory=list)
    inlier_masses: list = field(default_factory=list)
    sigmas: list = field(default_factory=list)
    termination: str = "max_iters"
    states: list | None = None


def default_sigma(observation: PointCloud) -> float:
    """Data-driven kernel width: 5% of the observation bounding-box diagonal."""
    extent = observation.positions.max(axis=0) - observation.positions.min(axis=0)
    return 0.05 * float(np.linalg.norm(extent))


def _pose_list(model) -> list[tuple[np.ndarray, np.ndarray]]:
    if isinstance(model, RigidModel):
        return [(model.pose.rotation, model.pose.translation)]
    if isinstance(model, ArticulatedTree):
        return [(model.body_pose(i).rotation, model.body_pose(i).translation)
                for i in range(model.n_bodies)]
    if isinstance(model, NodeGraph):
        return [(T.rotation, T.translation) for T in model.node_transforms]
    raise TypeError(f"unsupported kinematic model {type(model).__name__}")


def update_magnitude(before, after, diameter: float) -> float:
    """Largest per-body motion of one update: angle + displacement/diameter."""
    worst = 0.0
    for (Rb, tb), (Ra, ta) in zip(_pose_list(before), _pose_list(after)):
        angle = rotation_angle(Ra @ Rb.T)
        shift = float(np.linalg.norm(ta - tb))
        worst = max(worst, angle + shift / diameter)
    return worst


def alignment_error(T: RigidTransform, T_gt: RigidTransform,
                    reference: PointCloud) -> float:
    """Mean displacement between the two poses over the reference points."""
    return float(np.linalg.norm(T.apply(reference.positions)
                                - T_gt.apply(reference.positions), axis=1).mean())


def log_likelihood(model_points: np.ndarray, observation: PointCloud,
                   config: GmmConfig,
                   model_features: np.ndarray | None = None) -> float:
    """Exact mixture log-likelihood with normalized densities (diagnostic).

    Each observation point carries a Gaussian with equal membership 1/n_obs;
    the uniform component contributes w/n_model.
    """
    model_points = np.asarray(model_points, dtype=float)
    feature_dim = observation.features.shape[1] if observation.features is not None else 0
    widths = config.kernel_sigma(feature_dim)
    blocks = []
    obs_blocks = []
    if config.spatial_in_kernel():
        blocks.append(model_points)
        obs_blocks.append(observation.positions)
    if config.mode != "position":
        blocks.append(np.asarray(model_features, dtype=float))
        obs_blocks.append(observation.features)
    query = np.hstack(blocks)
    source = np.hstack(obs_blocks)
    m0 = gaussian_transform_bruteforce(
        query, source, np.ones((len(observation), 1)), widths)[:, 0]
    norm = float(np.prod(1.0 / (np.sqrt(2.0 * np.pi) * widths)))
    w = config.outlier_ratio
    inlier = (1.0 - w) / len(observation) * m0 * norm
    return float(np.sum(np.log(inlier + w / len(model_points))))


def register(reference: PointCloud, observation: PointCloud, initial_model,
             config: RegistrationConfig | None = None,
             timing: dict | None = None) -> RegistrationResult:
    """Run EM until the update magnitude drops under the twist tolerance.

    timing, when given a dict, accumulates wall-clock seconds for the E and
    M phases; results carry no timing so repeated runs compare bit-for-bit.
    """
    config = config if config is not None else RegistrationConfig()
    engine = MomentEngine(observation, config.gmm, config.backend,
                          include_normals=config.residual_mode == "point_to_plane")
    model = initial_model
    diameter = reference.diameter()
    sigma_current = engine.config.sigma
    result = RegistrationResult(kinematics=model, iterations=0,
                                states=[] if config.record_states else None)
    for _ in range(config.max_em_iters):
        result.iterations += 1
        tick = time.perf_counter()
        moved = forward_points(reference, model)
        moments = engine.moments(moved.positions, reference.features)
        if timing is not None:
            timing["e_step_s"] = timing.get("e_step_s", 0.0) + time.perf_counter() - tick
        mass = moments.inlier_mass()
        result.inlier_masses.append(mass)
        if mass < DEGENERATE_MASS_FRACTION * len(reference):
            result.objectives.append(float("nan"))
            result.twist_norms.append(float("nan"))
            result.termination = "degenerate"
            break
        if config.gmm.update_sigma:
            sigma_new = _optimal_sigma(moved.positions, moments,
                                       floor=config.gmm.sigma_floor)
            if sigma_new != sigma_current[0]:     # unchanged width: keep the filter
                engine = engine.with_sigma(sigma_new)
                sigma_current = engine.config.sigma
            result.sigmas.append(sigma_new)
        spec = residuals_from_moments(moments, sigma_current, config.residual_mode)
        tick = time.perf_counter()
        candidate, mdiag = m_step(spec, reference, model, config.mstep)
        if timing is not None:
            timing["m_step_s"] = timing.get("m_step_s", 0.0) + time.perf_counter() - tick
        norm = update_magnitude(model, candidate, diameter)
        result.twist_norms.append(norm)
        if norm < config.twist_tolerance:
            # sub-tolerance motion: drop it and keep the pre-update state
            result.objectives.append(mdiag.objectives[0])
            result.termination = "converged"
            break
        model = candidate
        result.objectives.append(mdiag.objectives[-1])
        if result.states is not None:
            result.states.append(model)
    result.kinematics = model
    if timing is not None:
        timing["iterations"] = result.iterations
    return result
