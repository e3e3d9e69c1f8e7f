"""
Command-line entry point: ``nnqn mesh|simulate|dataset|train|reconstruct|benchmark|plot``.

Settings come from built-in defaults, then an optional JSON config file with
per-command sections, then command-line flags. The effective configuration,
seed included, is written into the header of every output file.

Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import forward, mesh as mesh_mod, mlp, phantoms, priors, sampler, solvers
from .metrics import reconstruction_metrics, singular_value_errors

logger = logging.getLogger("nnqn")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "mesh": {"geometry": "disk", "radius": 14.0, "width": 9.54, "target_elements": 1100,
             "n_electrodes": 16, "coverage": 0.5},
    "forward": {"contact_impedance": forward.DEFAULT_CONTACT_IMPEDANCE, "amplitude": 1.0},
    "simulate": {"noise_level": 0.01},
    # field_std is relative to sigma_exp; amplitude_std, when set, overrides it
    "sampler": {"sigma_exp": 1.0, "kernel_length_scale": 3.0, "field_std": 0.05,
                "amplitude_std": None, "n_train": 5000, "n_val": 1000, "jacobian": "adjoint"},
    "training": {f.name: f.default for f in fields(mlp.TrainingConfig)},
    "prior": {"kind": "tv", "weight": 1e-2, "beta": 1e-4},
    # sigma_exp "fit" uses the best homogeneous estimate of the data
    "solver": {"method": "nnqn", "max_iter": 100, "tol": 1e-2, "sigma_exp": "fit",
               "lower_bound_fraction": 0.05, "jacobian": "perturbation",
               "assumed_noise_level": 0.01, "diagnostics": False},
    "paths": {"mesh": None, "phantom": None, "measurements": None, "dataset": None,
              "weights": None},
}


class UsageError(ValueError):
    pass


# -- configuration ----------------------------------------------------------

def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in out:
            raise UsageError(f"unknown config key {where + key!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key {where + key!r} must be an object")
            out[key] = _merge(out[key], value, where + key + ".")
        else:
            out[key] = value
    return out


def load_config(path=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a JSON object")
    return _merge(cfg, doc)


# (flag dest, config section, config key)
_OVERRIDES = [
    ("geometry", "mesh", "geometry"), ("radius", "mesh", "radius"), ("width", "mesh", "width"),
    ("target_elements", "mesh", "target_elements"), ("electrodes", "mesh", "n_electrodes"),
    ("coverage", "mesh", "coverage"),
    ("contact_impedance", "forward", "contact_impedance"),
    ("noise_level", "simulate", "noise_level"),
    ("n_train", "sampler", "n_train"), ("n_val", "sampler", "n_val"),
    ("length_scale", "sampler", "kernel_length_scale"), ("field_std", "sampler", "field_std"),
    ("epochs", "training", "max_epochs"), ("lr", "training", "initial_lr"),
    ("prior", "prior", "kind"), ("prior_weight", "prior", "weight"),
    ("method", "solver", "method"), ("max_iter", "solver", "max_iter"),
    ("sigma_exp", "solver", "sigma_exp"), ("jacobian", "solver", "jacobian"),
    ("diagnostics", "solver", "diagnostics"),
    ("mesh", "paths", "mesh"), ("phantom", "paths", "phantom"),
    ("measurements", "paths", "measurements"), ("dataset", "paths", "dataset"),
    ("weights", "paths", "weights"),
]


def effective_config(args) -> dict:
    cfg = load_config(args.config)
    for dest, section, key in _OVERRIDES:
        value = getattr(args, dest, None)
        if value is not None:
            cfg[section][key] = value
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    if cfg["threads"] < 1:
        raise UsageError("--threads must be at least 1")
    return cfg


def _require_path(cfg, key) -> Path:
    value = cfg["paths"][key]
    if value is None:
        raise UsageError(f"missing --{key} (or paths.{key} in the config)")
    path = Path(value)
    if not path.exists():
        raise UsageError(f"{key} file {path} does not exist")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- shared builders --------------------------------------------------------

def build_mesh(cfg: dict):
    m = cfg["mesh"]
    if m["geometry"] == "disk":
        return mesh_mod.build_disk_mesh(float(m["radius"]), int(m["target_elements"]),
                                        int(m["n_electrodes"]), float(m["coverage"]))
    if m["geometry"] == "square":
        return mesh_mod.build_square_mesh(float(m["width"]), int(m["target_elements"]),
                                          int(m["n_electrodes"]), float(m["coverage"]))
    raise UsageError(f"unknown geometry {m['geometry']!r}")


def build_problem(mesh, layout, cfg: dict) -> forward.CEMProblem:
    f = cfg["forward"]
    return forward.CEMProblem.adjacent(mesh, layout, float(f["contact_impedance"]),
                                       float(f["amplitude"]))


def _problem_from_paths(cfg):
    mesh, layout = mesh_mod.load_mesh(_require_path(cfg, "mesh"))
    return build_problem(mesh, layout, cfg)


def sampler_config(mesh, cfg: dict) -> sampler.FieldSamplerConfig:
    s = cfg["sampler"]
    sigma_exp = float(s["sigma_exp"])
    ls = float(s["kernel_length_scale"])
    amp = s["amplitude_std"]
    if amp is None:
        amp = sampler.amplitude_for_field_std(mesh, float(s["field_std"]) * sigma_exp, ls)
    return sampler.FieldSamplerConfig(sigma_exp, ls, float(amp), rng_seed=int(cfg["seed"]))


def training_config(cfg: dict) -> mlp.TrainingConfig:
    t = dict(cfg["training"])
    t["rng_seed"] = int(cfg["seed"])
    return mlp.TrainingConfig(**t)


def inverse_problem(problem, frame: forward.MeasurementFrame, cfg: dict) -> solvers.InverseProblem:
    s = cfg["solver"]
    std = frame.noise_std
    if std is None:
        std = forward.noise_model_std(frame.values, float(s["assumed_noise_level"]))
    weighting = priors.build_noise_weighting(std)
    sigma_exp = s["sigma_exp"]
    if sigma_exp == "fit":
        sigma_exp = solvers.homogeneous_estimate(problem, frame.values, weighting)
    return solvers.InverseProblem(problem, frame.values, weighting,
                                  priors.Regularizer.from_config(cfg["prior"]),
                                  float(sigma_exp), int(s["max_iter"]), float(s["tol"]),
                                  float(s["lower_bound_fraction"]), int(cfg["threads"]))


def _load_predictor(cfg, problem):
    model = mlp.load_weights(_require_path(cfg, "weights"))
    m = problem.n_measurements
    if model.n_inputs != m or model.n_outputs != m:
        raise UsageError(f"predictor maps {model.n_inputs} -> {model.n_outputs} values, "
                         f"the protocol has {m} measurements")
    return model


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(type(obj))


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default))


def _write_csv(path, header: dict, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True, default=_json_default) + "\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


# -- commands ---------------------------------------------------------------

def cmd_mesh(args, cfg) -> int:
    mesh, layout = build_mesh(cfg)
    mesh.validate()
    layout.validate(mesh)
    path = _out_dir(args) / "mesh.json"
    mesh_mod.save_mesh(path, mesh, layout, config=cfg)
    print(f"{path}: {mesh.n_elements} elements, {mesh.n_nodes} nodes, "
          f"{layout.n_electrodes} electrodes")
    return EXIT_OK


def cmd_simulate(args, cfg) -> int:
    problem = _problem_from_paths(cfg)
    phantom = phantoms.load_phantom(_require_path(cfg, "phantom"))
    phantom.validate(problem.mesh)
    sigma = phantom.on_mesh(problem.mesh)
    clean = forward.solve_forward(problem, sigma).frame
    level = float(cfg["simulate"]["noise_level"])
    noisy = forward.add_noise(clean, level, int(cfg["seed"]))
    recip = forward.reciprocity_error(problem, clean.values)
    meta = {"config": cfg, "seed": cfg["seed"], "noise_level": level,
            "reciprocity_error": recip, "reciprocity_ok": bool(recip < 1e-8)}
    out = _out_dir(args)
    forward.save_frame_csv(out / "measurements_clean.csv", clean, noisy=False, **meta)
    forward.save_frame_csv(out / "measurements.csv", noisy, noisy=level > 0, **meta)
    print(f"{out / 'measurements.csv'}: {clean.values.size} measurements, noise level {level}, "
          f"reciprocity error {recip:.2e}")
    return EXIT_OK


def cmd_dataset(args, cfg) -> int:
    problem = _problem_from_paths(cfg)
    scfg = sampler_config(problem.mesh, cfg)
    s = cfg["sampler"]
    t0 = time.perf_counter()
    data = sampler.build_dataset(problem, scfg, int(s["n_train"]), int(s["n_val"]),
                                 threads=int(cfg["threads"]), jacobian=s["jacobian"])
    data.meta["config"] = cfg
    data.meta["seconds"] = time.perf_counter() - t0
    out = _out_dir(args)
    sampler.save_dataset(out / "dataset.nnqd", data)
    if args.csv:
        sampler.export_dataset_csv(out / "dataset.csv", data)
    print(f"{out / 'dataset.nnqd'}: {data.n} samples of length {data.m} "
          f"in {data.meta['seconds']:.1f} s")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    data = sampler.load_dataset(_require_path(cfg, "dataset"))
    tcfg = training_config(cfg)
    model = mlp.MLP.for_measurements(data.m, seed=tcfg.rng_seed)
    t0 = time.perf_counter()
    result = mlp.train(model, data, tcfg)
    seconds = time.perf_counter() - t0
    out = _out_dir(args)
    mlp.save_weights(out / "weights.nnqn", result.model, tcfg)
    mlp.write_history_csv(out / "history.csv", result.history)
    Xv, Yv = data.validation()
    pred = result.model.forward(Xv)
    summary = {"config": cfg, "seconds": seconds, "epochs": len(result.history),
               "best_epoch": result.best_epoch, "stopped_early": result.stopped_early,
               "validation": singular_value_errors(pred, Yv)}
    _write_json(out / "training.json", summary)
    v = summary["validation"]
    print(f"{out / 'weights.nnqn'}: {len(result.history)} epochs in {seconds:.1f} s, "
          f"median relative error top-32 {v['median_rel_err_top32']:.4f}, "
          f"all {v['median_rel_err_all']:.4f}")
    return EXIT_OK


def _trace_summary(trace: solvers.SolverTrace) -> dict:
    return {"status": trace.status, "iterations": trace.iterations,
            "time_after_init_s": trace.total_seconds, "init_s": trace.init_seconds,
            "initial_objective": trace.initial_objective,
            "final_objective": trace.records[-1].objective if trace.records else None,
            "forward_evaluations": trace.forward_evaluations,
            "line_search_evaluations": trace.line_search_evaluations,
            "events": trace.events}


def _write_reconstruction(out: Path, cfg, spec, method, sigma, trace, truth=None) -> dict:
    mesh = spec.problem.mesh
    summary = _trace_summary(trace)
    summary["sigma_exp"] = spec.sigma_exp
    if truth is not None:
        summary.update(reconstruction_metrics(mesh, sigma, truth))
    _write_csv(out / f"reconstruction_{method}.csv",
               {"rows": mesh.n_elements, "cols": 2, "method": method, "seed": cfg["seed"],
                "mesh": cfg["paths"]["mesh"]},
               ["element", "sigma"], [(i, float(v)) for i, v in enumerate(sigma)])
    doc = {"method": method, "mesh": str(Path(cfg["paths"]["mesh"]).resolve()),
           "sigma": sigma, "config": cfg, **summary}
    _write_json(out / f"reconstruction_{method}.json", doc)
    trace.write_csv(out / f"trace_{method}.csv")
    return summary


def _truth(cfg, mesh):
    if cfg["paths"]["phantom"] is None:
        return None
    phantom = phantoms.load_phantom(_require_path(cfg, "phantom"))
    phantom.validate(mesh)
    return phantom.on_mesh(mesh)


def cmd_reconstruct(args, cfg) -> int:
    problem = _problem_from_paths(cfg)
    frame, _ = forward.load_frame_csv(_require_path(cfg, "measurements"))
    if frame.values.size != problem.n_measurements:
        raise UsageError(f"measurement file has {frame.values.size} values, "
                         f"the protocol expects {problem.n_measurements}")
    method = cfg["solver"]["method"]
    if method not in solvers.METHODS:
        raise UsageError(f"unknown method {method!r}")
    predictor = _load_predictor(cfg, problem) if method == "nnqn" else None
    spec = inverse_problem(problem, frame, cfg)
    results = solvers.compare_methods(spec, predictor, [method], cfg["solver"]["jacobian"],
                                      bool(cfg["solver"]["diagnostics"]))
    sigma, trace = results[method]
    summary = _write_reconstruction(_out_dir(args), cfg, spec, method, sigma, trace,
                                    _truth(cfg, problem.mesh))
    print(f"{method}: {summary['status']} after {summary['iterations']} iterations, "
          f"{summary['time_after_init_s']:.3f} s after initialization")
    return EXIT_OK


def cmd_benchmark(args, cfg) -> int:
    problem = _problem_from_paths(cfg)
    frame, _ = forward.load_frame_csv(_require_path(cfg, "measurements"))
    if frame.values.size != problem.n_measurements:
        raise UsageError("measurement file does not match the protocol")
    predictor = _load_predictor(cfg, problem)
    spec = inverse_problem(problem, frame, cfg)
    truth = _truth(cfg, problem.mesh)
    results = solvers.compare_methods(spec, predictor, solvers.METHODS,
                                      cfg["solver"]["jacobian"], diagnostics=True)
    out = _out_dir(args)
    rows = []
    for method, (sigma, trace) in results.items():
        s = _write_reconstruction(out, cfg, spec, method, sigma, trace, truth)
        rows.append((method, s["time_after_init_s"], s["iterations"], s["status"], s["init_s"],
                     s["final_objective"], s.get("relative_error"), s.get("background_variance")))
    header = {"config": cfg, "seed": cfg["seed"], "sigma_exp": spec.sigma_exp}
    _write_csv(out / "benchmark.csv", header,
               ["method", "time_after_init_s", "iterations", "status", "init_s",
                "final_objective", "relative_error", "background_variance"], rows)

    n_iter = max(t.iterations for _, t in results.values())
    err_rows = []
    for k in range(n_iter):
        row = [k]
        for method in solvers.METHODS:
            errs = results[method][1].jacobian_errors
            row.append(float(errs[k]) if k < errs.size else float("nan"))
        err_rows.append(row)
    _write_csv(out / "jacobian_error.csv", header, ["iteration", *solvers.METHODS], err_rows)

    sv_rows = []
    for entry in results["nnqn"][1].singular_values:
        for i, (acc, used) in enumerate(zip(entry["accurate"], entry["used"])):
            sv_rows.append((entry["iteration"], i, float(acc), float(used)))
    _write_csv(out / "singular_values.csv", header,
               ["iteration", "index", "accurate", "predicted"], sv_rows)

    width = max(len(m) for m in solvers.METHODS)
    print(f"{'method':<{width}}  time after init (s)  iterations  status")
    for r in rows:
        print(f"{r[0]:<{width}}  {r[1]:>19.3f}  {r[2]:>10d}  {r[3]}")
    return EXIT_OK


def cmd_plot(args, cfg) -> int:
    from . import plotting

    out = _out_dir(args)
    for name in args.inputs:
        path = Path(name)
        if not path.exists():
            raise UsageError(f"{path} does not exist")
        target = out / (path.stem + ".png")
        plotting.plot_file(path, target, mesh_path=cfg["paths"]["mesh"])
        print(target)
    return EXIT_OK


COMMANDS = {"mesh": cmd_mesh, "simulate": cmd_simulate, "dataset": cmd_dataset,
            "train": cmd_train, "reconstruct": cmd_reconstruct, "benchmark": cmd_benchmark,
            "plot": cmd_plot}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file with per-command sections")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--out", default=".", help="output directory (created if missing)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="nnqn", description=__doc__.strip().splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("mesh", parents=[common], help="build a disk or square mesh")
    s.add_argument("--geometry", choices=["disk", "square"])
    s.add_argument("--radius", type=float)
    s.add_argument("--width", type=float)
    s.add_argument("--target-elements", type=int)
    s.add_argument("--electrodes", type=int)
    s.add_argument("--coverage", type=float)

    def with_mesh(s):
        s.add_argument("--mesh")
        s.add_argument("--contact-impedance", type=float)

    s = sub.add_parser("simulate", parents=[common], help="synthetic measurements of a phantom")
    with_mesh(s)
    s.add_argument("--phantom")
    s.add_argument("--noise-level", type=float)

    s = sub.add_parser("dataset", parents=[common], help="training set of singular values")
    with_mesh(s)
    s.add_argument("--n-train", type=int)
    s.add_argument("--n-val", type=int)
    s.add_argument("--length-scale", type=float)
    s.add_argument("--field-std", type=float)
    s.add_argument("--csv", action="store_true", help="also export the dataset as CSV")

    s = sub.add_parser("train", parents=[common], help="train the singular-value predictor")
    s.add_argument("--dataset")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)

    def with_solver(s):
        with_mesh(s)
        s.add_argument("--measurements")
        s.add_argument("--weights")
        s.add_argument("--phantom", help="ground truth for error metrics")
        s.add_argument("--prior", choices=[priors.TV, priors.LAPLACIAN])
        s.add_argument("--prior-weight", type=float)
        s.add_argument("--max-iter", type=int)
        s.add_argument("--sigma-exp", type=_sigma_exp)
        s.add_argument("--jacobian", choices=["perturbation", "adjoint"])

    s = sub.add_parser("reconstruct", parents=[common], help="reconstruct with one method")
    with_solver(s)
    s.add_argument("--method", choices=list(solvers.METHODS))
    s.add_argument("--diagnostics", action="store_true", default=None)

    s = sub.add_parser("benchmark", parents=[common], help="compare GN, Broyden and NN-QN")
    with_solver(s)

    s = sub.add_parser("plot", parents=[common], help="render reconstructions and curves as PNG")
    s.add_argument("inputs", nargs="+")
    s.add_argument("--mesh")
    return p


def _sigma_exp(text):
    if text == "fit":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected a number or 'fit'") from None


_VALIDATION = (UsageError, ValueError, KeyError, TypeError, FileNotFoundError,
               mesh_mod.MeshError, phantoms.PhantomError, mlp.WeightFileError)
_NUMERICAL = (ArithmeticError, np.linalg.LinAlgError, mlp.TrainingError)


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args)
        return COMMANDS[args.command](args, cfg)
    except _NUMERICAL as exc:
        print(f"nnqn {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except _VALIDATION as exc:
        print(f"nnqn {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
