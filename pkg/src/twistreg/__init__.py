"""Point-set registration with Gaussian-filter E steps and twist-space M steps.

The package solves rigid, articulated, and deformable (node-graph) alignment
of point clouds under a Gaussian mixture observation model with a uniform
outlier component.  The E step evaluates the mixture moments either exactly
(bruteforce) or through a permutohedral-lattice Gaussian filter; the M step
linearizes the kinematic model in twist coordinates and takes damped
Gauss-Newton steps.

Typical use::

    from twistreg import GmmConfig, RegistrationConfig, RigidModel, register

    config = RegistrationConfig(gmm=GmmConfig(sigma=0.01, outlier_ratio=0.1))
    result = register(model, observation, RigidModel(), config)
    pose = result.kinematics.pose
"""

from .baseline import TrimmedIcpOptions, fit_rigid, trimmed_icp_baseline
from .bench import (
    BenchRecord,
    aggregate,
    bench_sweep,
    filter_accuracy,
    read_csv,
    run_trial,
    write_csv,
)
from .errors import (
    BindingError,
    DegenerateBlendError,
    DegenerateCorrespondenceError,
    ParseError,
    SolverError,
)
from .estep import GmmConfig, MomentEngine, MomentField, compute_moments, update_sigma
from .geometry import PointCloud, RigidTransform, rotation_about_axis, twist_exp
from .io import load_cloud, save_cloud
from .kinematics import (
    ArticulatedTree,
    Body,
    Joint,
    NodeGraph,
    RigidModel,
    Skinning,
    articulated_from_dict,
    bind_points_to_nodes,
    build_node_graph,
    forward_points,
    load_articulated_model,
)
from .mstep import MStepOptions
from .pipeline import (
    RegistrationConfig,
    RegistrationResult,
    alignment_error,
    default_sigma,
    log_likelihood,
    register,
)
from .synth import BUILTIN_SHAPES, ExperimentSpec, builtin_shape, synthesize_pair

__version__ = "0.1.0"

__all__ = [
    "ArticulatedTree",
    "BUILTIN_SHAPES",
    "BenchRecord",
    "BindingError",
    "Body",
    "DegenerateBlendError",
    "DegenerateCorrespondenceError",
    "ExperimentSpec",
    "GmmConfig",
    "Joint",
    "MStepOptions",
    "MomentEngine",
    "MomentField",
    "NodeGraph",
    "ParseError",
    "PointCloud",
    "RegistrationConfig",
    "RegistrationResult",
    "RigidModel",
    "RigidTransform",
    "Skinning",
    "SolverError",
    "TrimmedIcpOptions",
    "aggregate",
    "alignment_error",
    "articulated_from_dict",
    "bench_sweep",
    "bind_points_to_nodes",
    "build_node_graph",
    "builtin_shape",
    "compute_moments",
    "default_sigma",
    "filter_accuracy",
    "fit_rigid",
    "forward_points",
    "load_articulated_model",
    "load_cloud",
    "log_likelihood",
    "read_csv",
    "register",
    "rotation_about_axis",
    "run_trial",
    "save_cloud",
    "synthesize_pair",
    "trimmed_icp_baseline",
    "twist_exp",
    "update_sigma",
    "write_csv",
]
