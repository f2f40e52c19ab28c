"""Trimmed ICP: the robust nearest-neighbor baseline for the bench suite.

Each iteration matches every moved model point to its nearest observation
point with a KD-tree, keeps the best `trim_fraction` of matches by distance,
and refits the full rigid pose in closed form on the kept pairs. Termination
mirrors the EM pipeline's rule (combined twist norm under the same
tolerance) so per-iteration and total times are comparable.
"""

import time
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud, RigidTransform
from .kinematics import RigidModel
from .pipeline import RegistrationResult, update_magnitude


@dataclass(frozen=True)
class TrimmedIcpOptions:
    """trim_fraction is the share of matches KEPT (1.0 keeps everything)."""

    trim_fraction: float = 0.7
    max_iters: int = 100
    twist_tolerance: float = 1e-4

    def __post_init__(self):
        if not 0.0 < self.trim_fraction <= 1.0:
            raise ValueError("trim_fraction must lie in (0, 1]")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not self.twist_tolerance > 0.0:
            raise ValueError("twist_tolerance must be positive")


def fit_rigid(source, target):
    """Least-squares rotation + translation mapping source onto target."""
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    sc, tc = source.mean(axis=0), target.mean(axis=0)
    H = (target - tc).T @ (source - sc)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    return RigidTransform(R, tc - R @ sc)


def trimmed_icp_baseline(model, observation, init=None, options=None,
                         timing=None):
    """Rigid-only baseline with the same result shape as register().

    timing, when given a dict, accumulates wall-clock seconds with the same
    keys as register(): matching under "e_step_s", refitting under
    "m_step_s".
    """
    options = options or TrimmedIcpOptions()
    if init is None:
        init = RigidModel(RigidTransform.identity())
    if not isinstance(init, RigidModel):
        raise ValueError("trimmed ICP is rigid-only")
    tree = cKDTree(observation.positions)
    diameter = model.diameter()
    keep = max(3, int(np.ceil(options.trim_fraction * len(model))))
    keep = min(keep, len(model))

    pose = init.pose
    objectives, twist_norms, inlier_masses = [], [], []
    termination = "max_iters"
    iterations = 0
    for _ in range(options.max_iters):
        iterations += 1
        tick = time.perf_counter()
        moved = pose.apply(model.positions)
        dist, idx = tree.query(moved)
        order = np.argsort(dist)[:keep]
        if timing is not None:
            timing["e_step_s"] = (timing.get("e_step_s", 0.0)
                                  + time.perf_counter() - tick)
        objectives.append(float(np.mean(dist[order] ** 2)))
        inlier_masses.append(float(keep))
        tick = time.perf_counter()
        candidate = fit_rigid(model.positions[order],
                              observation.positions[idx[order]])
        if timing is not None:
            timing["m_step_s"] = (timing.get("m_step_s", 0.0)
                                  + time.perf_counter() - tick)
        norm = update_magnitude(RigidModel(pose), RigidModel(candidate),
                                diameter)
        twist_norms.append(norm)
        if norm < options.twist_tolerance:
            # sub-tolerance refit is dropped, as in the EM loop
            termination = "converged"
            break
        pose = candidate
    if timing is not None:
        timing["iterations"] = iterations
    return RegistrationResult(kinematics=RigidModel(pose),
                              iterations=iterations,
                              objectives=objectives,
                              twist_norms=twist_norms,
                              inlier_masses=inlier_masses,
                              sigmas=[],
                              termination=termination)
