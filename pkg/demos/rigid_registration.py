"""Rigid alignment walk-through on a synthetic pair.

Generates a scattered pebble cloud, rotates a copy 50 degrees about a random
axis, and registers it back with the lattice-backed EM loop. The trace shows
the twist update norm contracting geometrically once the pose enters the
kernel's capture range, and the final error landing well under the kernel
width: the soft assignments average out the sampling noise that pins
nearest-neighbor methods.

Run:  python3 demos/rigid_registration.py [seed]
"""

import sys
import time

import numpy as np

from twistreg import (
    GmmConfig,
    RegistrationConfig,
    RigidModel,
    alignment_error,
    register,
)
from twistreg.geometry import PointCloud
from twistreg.synth import ExperimentSpec, synthesize_pair


def main():
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
    spec = ExperimentSpec(seed=seed)
    model, observation, truth = synthesize_pair(spec)
    reference = PointCloud(model.positions)
    diameter = reference.diameter()
    print(f"pebble cloud: {len(reference)} points, diameter {diameter:.3f} m, "
          f"rotation {spec.rotation_degrees:.0f} degrees")

    config = RegistrationConfig(
        gmm=GmmConfig(sigma=0.05 * diameter, outlier_ratio=0.1),
        backend="lattice", max_em_iters=250, twist_tolerance=2e-4)
    timing: dict = {}
    t0 = time.perf_counter()
    result = register(reference, observation, RigidModel(), config,
                      timing=timing)
    wall = time.perf_counter() - t0

    print(f"\n{'iter':>5} {'objective':>12} {'twist norm':>11} {'inlier mass':>12}")
    marks = sorted({0, 1, 2, 4, 9, 24, 49, 99, result.iterations - 1})
    for i in marks:
        if i >= result.iterations:
            continue
        print(f"{i + 1:5d} {result.objectives[i]:12.4f} "
              f"{result.twist_norms[i]:11.2e} {result.inlier_masses[i]:12.1f}")

    err = alignment_error(result.kinematics.pose, truth, reference)
    print(f"\n{result.termination} after {result.iterations} iterations "
          f"({wall:.2f} s: E {timing['e_step_s']:.2f} s, M {timing['m_step_s']:.2f} s)")
    print(f"alignment error {err * 1e3:.3f} mm "
          f"(kernel width was {config.gmm.sigma[0] * 1e3:.1f} mm)")


if __name__ == "__main__":
    main()
