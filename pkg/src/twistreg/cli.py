"""Command-line surface: register, synth, bench, filter-check, version.

Exit codes: 0 success, 2 input error, 3 degenerate registration (the run
produced no usable correspondences), 4 internal error.
"""

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import __version__
from .bench import METHODS, aggregate, bench_sweep, filter_accuracy
from .errors import (
    DegenerateBlendError,
    DegenerateCorrespondenceError,
    ParseError,
    SolverError,
)
from .estep import GmmConfig
from .geometry import PointCloud, RigidTransform
from .io import load_cloud, save_cloud
from .kinematics import (
    NodeGraph,
    RigidModel,
    bind_points_to_nodes,
    build_node_graph,
    load_articulated_model,
)
from .mstep import MStepOptions
from .pipeline import RegistrationConfig, default_sigma, register
from .synth import BUILTIN_SHAPES, ExperimentSpec, synthesize_pair

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DEGENERATE = 3
EXIT_INTERNAL = 4


def _transform_json(T: RigidTransform) -> dict:
    return {"rotation": np.asarray(T.rotation).tolist(),
            "translation": np.asarray(T.translation).tolist()}


def _write_text(path: str | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _gmm_config(args, observation: PointCloud) -> GmmConfig:
    kwargs = {
        "sigma": args.sigma if args.sigma is not None else default_sigma(observation),
        "outlier_ratio": args.w,
        "update_sigma": args.update_sigma,
    }
    if args.features:
        if observation.features is None:
            raise ValueError("--features requires feature columns in the observation cloud")
        if args.feature_sigma is None:
            raise ValueError("--features requires --feature-sigma")
        kwargs["mode"] = "concatenated"
        kwargs["feature_sigma"] = args.feature_sigma
    if args.sigma_floor is not None:
        kwargs["sigma_floor"] = args.sigma_floor
    return GmmConfig(**kwargs)


def _initial_model(args, model_cloud: PointCloud):
    if args.mode == "rigid":
        return RigidModel()
    if args.mode == "articulated":
        if args.kinematics is None:
            raise ValueError("--mode articulated requires --kinematics")
        return load_articulated_model(args.kinematics)
    if args.node_spacing is None:
        raise ValueError("--mode nodegraph requires --node-spacing")
    radius = args.binding_radius
    if radius is None:
        radius = 2.0 * args.node_spacing
    nodes, edges = build_node_graph(model_cloud.positions, args.node_spacing)
    skinning = bind_points_to_nodes(model_cloud.positions, nodes, radius=radius)
    return NodeGraph(nodes, edges, skinning)


def _pose_document(args, result, timing: dict) -> dict:
    doc = {"mode": args.mode}
    model = result.kinematics
    if args.mode == "rigid":
        doc["pose"] = _transform_json(model.pose)
    elif args.mode == "articulated":
        doc["joint_values"] = np.asarray(model.joint_values).tolist()
        doc["base_pose"] = _transform_json(model.base_pose)
    else:
        doc["node_transforms"] = [_transform_json(T) for T in model.node_transforms]
    doc["diagnostics"] = {
        "iterations": result.iterations,
        "termination": result.termination,
        "converged": result.termination == "converged",
        "final_objective": result.objectives[-1] if result.objectives else None,
        "final_twist_norm": result.twist_norms[-1] if result.twist_norms else None,
        "final_inlier_mass": result.inlier_masses[-1] if result.inlier_masses else None,
        "sigmas": list(result.sigmas),
        "e_step_s": timing.get("e_step_s", 0.0),
        "m_step_s": timing.get("m_step_s", 0.0),
    }
    return doc


def cmd_register(args) -> int:
    model_cloud = load_cloud(args.model)
    observation = load_cloud(args.observation)
    if args.point_to_plane and observation.normals is None:
        raise ValueError("--point-to-plane requires normals in the observation cloud")
    gmm = _gmm_config(args, observation)
    mstep = MStepOptions(lambda_reg=args.reg_weight) if args.mode == "nodegraph" \
        else MStepOptions()
    config_kwargs = {
        "gmm": gmm,
        "residual_mode": "point_to_plane" if args.point_to_plane else "point_to_point",
        "backend": args.backend,
        "mstep": mstep,
    }
    if args.max_iters is not None:
        config_kwargs["max_em_iters"] = args.max_iters
    if args.tolerance is not None:
        config_kwargs["twist_tolerance"] = args.tolerance
    config = RegistrationConfig(**config_kwargs)

    initial = _initial_model(args, model_cloud)
    timing: dict = {}
    result = register(model_cloud, observation, initial, config, timing=timing)
    doc = _pose_document(args, result, timing)
    _write_text(args.out, json.dumps(doc, indent=2) + "\n")
    if result.termination == "degenerate":
        print("registration degenerate: correspondence mass vanished", file=sys.stderr)
        return EXIT_DEGENERATE
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = ExperimentSpec(
        source=args.source,
        n_points=args.n_points,
        rotation_degrees=args.rotation_degrees,
        translation_fraction=args.translation_fraction,
        outlier_ratio=args.outlier_ratio,
        noise_stddev=args.noise_stddev,
        outlier_expansion=args.outlier_expansion,
        trials=args.trial + 1,
        seed=args.seed,
    )
    model, observation, gt = synthesize_pair(spec, trial=args.trial)
    save_cloud(args.out_model, model)
    save_cloud(args.out_observation, observation)
    if args.out_gt is not None:
        doc = {"transform": _transform_json(gt),
               "spec": dataclasses.asdict(spec) | {"trial": args.trial}}
        _write_text(args.out_gt, json.dumps(doc, indent=2) + "\n")
    return EXIT_OK


def _load_grid(path: str) -> list[ExperimentSpec]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if isinstance(doc, dict):
        doc = [doc]
    if not isinstance(doc, list) or not doc:
        raise ValueError(f"{path}: grid must be a JSON object or non-empty list of objects")
    known = {f.name for f in dataclasses.fields(ExperimentSpec)}
    specs = []
    for i, entry in enumerate(doc):
        if not isinstance(entry, dict):
            raise ValueError(f"{path}: grid entry {i} is not an object")
        unknown = sorted(set(entry) - known)
        if unknown:
            raise ValueError(f"{path}: grid entry {i} has unknown keys {unknown}")
        specs.append(ExperimentSpec(**entry))
    return specs


def cmd_bench(args) -> int:
    grid = _load_grid(args.grid)
    if args.trials is not None or args.seed is not None:
        overrides = {}
        if args.trials is not None:
            overrides["trials"] = args.trials
        if args.seed is not None:
            overrides["seed"] = args.seed
        grid = [dataclasses.replace(spec, **overrides) for spec in grid]
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    for method in methods:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    records = bench_sweep(grid, methods=methods, out_path=args.out,
                          workers=args.workers, deterministic=args.deterministic)
    for summary in aggregate(records):
        print(f"grid={summary['grid_index']} method={summary['method']} "
              f"trials={summary['trials']} "
              f"mean_error_mm={1e3 * summary['mean_error_m']:.3f} "
              f"converged={summary['converged']}/{summary['trials']} "
              f"median_iters={summary['median_iterations']:.0f} "
              f"median_ms_per_iter={summary['median_time_ms_per_iter']:.2f}")
    if args.out is not None:
        print(f"wrote {len(records)} rows to {args.out}")
    return EXIT_OK


def cmd_filter_check(args) -> int:
    report = filter_accuracy(n_model=args.n_model, n_obs=args.n_obs,
                             sigma_frac=args.sigma_frac, clouds=args.clouds,
                             seed=args.seed)
    print(f"clouds={report['clouds']} n_model={report['n_model']} "
          f"n_obs={report['n_obs']} sigma_frac={report['sigma_frac']}")
    print(f"median mass rel err:        {report['median_mass_rel_err']:.3e}")
    print(f"p95 target err (in sigmas): {report['p95_target_err_sigmas']:.3e}")
    print(f"lattice s/cloud:            {report['lattice_s']:.3f}")
    print(f"bruteforce s/cloud:         {report['bruteforce_s']:.3f}")
    print(f"speedup:                    {report['speedup']:.2f}x")
    return EXIT_OK


def cmd_version(args) -> int:
    print(f"twistreg {__version__}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="twistreg",
        description="Point-set registration with Gaussian-filter E steps "
                    "and twist-space M steps.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="align a model cloud to an observation cloud")
    p.add_argument("--model", required=True, help="model point cloud (.ply/.xyz)")
    p.add_argument("--observation", required=True, help="observation point cloud")
    p.add_argument("--mode", choices=("rigid", "articulated", "nodegraph"),
                   default="rigid")
    p.add_argument("--sigma", type=float, default=None,
                   help="spatial kernel width in meters "
                        "(default: 5%% of the observation extent)")
    p.add_argument("--w", type=float, default=0.1,
                   help="outlier prior mass in [0, 1)")
    p.add_argument("--point-to-plane", action="store_true",
                   help="plane residuals (observation cloud must carry normals)")
    p.add_argument("--features", action="store_true",
                   help="concatenate feature columns into the correspondence kernel")
    p.add_argument("--feature-sigma", type=float, default=None,
                   help="kernel width for feature columns (with --features)")
    p.add_argument("--update-sigma", action="store_true",
                   help="re-estimate the kernel width after each E step")
    p.add_argument("--sigma-floor", type=float, default=None,
                   help="lower clamp for the re-estimated width")
    p.add_argument("--backend", choices=("lattice", "bruteforce"), default="lattice")
    p.add_argument("--max-iters", type=int, default=None, help="EM iteration cap")
    p.add_argument("--tolerance", type=float, default=None,
                   help="twist-update convergence threshold")
    p.add_argument("--kinematics", default=None,
                   help="articulated model JSON (with --mode articulated)")
    p.add_argument("--node-spacing", type=float, default=None,
                   help="deformation node spacing in meters (with --mode nodegraph)")
    p.add_argument("--binding-radius", type=float, default=None,
                   help="point-to-node binding radius (default: 2x node spacing)")
    p.add_argument("--reg-weight", type=float, default=0.1,
                   help="node-graph rigidity weight (with --mode nodegraph)")
    p.add_argument("--out", default=None, help="pose JSON path (default: stdout)")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("synth", help="generate a synthetic registration pair")
    p.add_argument("--source", default="pebble",
                   help=f"builtin shape ({', '.join(BUILTIN_SHAPES)}) or a cloud file")
    p.add_argument("--n-points", type=int, default=3500)
    p.add_argument("--rotation-degrees", type=float, default=50.0)
    p.add_argument("--translation-fraction", type=float, default=0.02)
    p.add_argument("--outlier-ratio", type=float, default=0.0)
    p.add_argument("--noise-stddev", type=float, default=0.0,
                   help="noise stddev as a fraction of the cloud extent")
    p.add_argument("--outlier-expansion", type=float, default=1.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trial", type=int, default=0)
    p.add_argument("--out-model", required=True)
    p.add_argument("--out-observation", required=True)
    p.add_argument("--out-gt", default=None, help="ground-truth transform JSON")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="run a benchmark sweep over a spec grid")
    p.add_argument("--grid", required=True,
                   help="JSON file: one spec object or a list of them")
    p.add_argument("--methods", default=",".join(METHODS),
                   help="comma-separated subset of: " + ", ".join(METHODS))
    p.add_argument("--trials", type=int, default=None,
                   help="override the trial count of every grid entry")
    p.add_argument("--seed", type=int, default=None,
                   help="override the seed of every grid entry")
    p.add_argument("--out", default=None, help="CSV output path")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--deterministic", action="store_true",
                   help="zero timing columns so identical runs emit identical bytes")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("filter-check",
                       help="lattice-vs-bruteforce accuracy and speed report")
    p.add_argument("--n-model", type=int, default=2000)
    p.add_argument("--n-obs", type=int, default=2000)
    p.add_argument("--sigma-frac", type=float, default=0.05)
    p.add_argument("--clouds", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_filter_check)

    p = sub.add_parser("version", help="print the package version")
    p.set_defaults(func=cmd_version)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, ValueError, KeyError, OSError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DegenerateCorrespondenceError, DegenerateBlendError,
            SolverError) as exc:
        print(f"registration failed: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except Exception as exc:  # pragma: no cover - last-resort guard
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
