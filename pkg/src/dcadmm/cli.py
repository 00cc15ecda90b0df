"""Command-line interface: ``solve``, ``moons-bench``, ``segment`` and ``baseline``.

Exit codes: 0 converged, 2 iteration budget exhausted, 1 error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .admm import RunReport, run
from .baselines import constrained_kernel_kmeans, coordinate_descent
from .core import (LossKind, MrfSolver, ProblemInstance, SolverConfig, Termination)
from .dataio import (generate_balance_cliques, generate_moons, load_constraints,
                     load_dataset, load_image_problem, load_labels, load_matrix, metrics,
                     read_pnm, save_labels, standardize, write_pnm, ConstraintSpec)
from .kernel import LinearSpec, PrecomputedSpec, RBFSpec, build_kernel, nystrom_factor
from .mrf import EXHAUSTIVE_LIMIT
from .supervised import solve_supervised

logger = logging.getLogger("dcadmm")

EXIT_OK, EXIT_ERROR, EXIT_BUDGET = 0, 1, 2

TRACE_COLUMNS = ["iter", "rho", "lagrangian", "primal_residual", "alpha_step",
                 "labels_changed", "gate", "mrf_energy", "ms"]

DEFAULTS = {
    "solver.rho0": 1e-3,
    "solver.tau": 1.003,
    "solver.rho_max_override": None,
    "solver.delta": 1e-4,
    "solver.gamma": 0.3,
    "solver.max_iter": 20000,
    "solver.primal_tol": 1e-7,
    "solver.step_tol": 1e-7,
    "solver.cg_tol": 1e-10,
    "solver.cg_max_iter": 2000,
    "solver.mrf_solver": "icm",
    "solver.seed": 0,
    "solver.threads": None,
    "model.nu": 0.0025,
    "model.loss": "hinge",
    "model.labels": None,
    "kernel.type": "rbf",
    "kernel.sigma": 0.5477,
    "kernel.landmarks": None,
    "kernel.path": None,
    "data.standardize": True,
    "data.coords": True,
    "bench.n_per_class": 150,
    "bench.n_classes": 4,
    "bench.noise": 0.1,
    "bench.n_cliques": 25,
    "bench.clique_size": 25,
    "bench.slack": 3,
    "segment.potts": 1.0,
    "segment.rho0": 1.0,
}

_TYPES = {
    "solver.rho_max_override": float, "solver.threads": int, "model.labels": int,
    "kernel.landmarks": int, "kernel.path": str,
}


class CliError(Exception):
    pass


# -- configuration -----------------------------------------------------------

def _flatten(tree, prefix=""):
    out = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, name + "."))
        else:
            out[name] = value
    return out


def _coerce(key, value):
    if key not in DEFAULTS:
        raise CliError(f"unknown configuration key {key!r}")
    default = DEFAULTS[key]
    kind = _TYPES.get(key, type(default))
    if value is None or (isinstance(value, str) and value.lower() in ("none", "null")):
        if default is not None:
            raise CliError(f"{key} may not be empty")
        return None
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            text = str(value).lower()
            if text not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return text in ("true", "1", "yes")
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        return kind(value)
    except (TypeError, ValueError):
        raise CliError(f"{key}: cannot interpret {value!r} as {kind.__name__}") from None


def load_config(path=None, overrides=()):
    """Defaults, then a TOML file (sections or dotted keys), then ``key=value`` overrides."""
    cfg = dict(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise CliError(f"config file not found: {path}")
        try:
            tree = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise CliError(f"{path}: {exc}") from None
        for key, value in _flatten(tree).items():
            cfg[key] = _coerce(key, value)
    for item in overrides:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg[key.strip()] = _coerce(key.strip(), value.strip())
    return cfg


def solver_config(cfg) -> SolverConfig:
    fields = {f.name for f in dataclasses.fields(SolverConfig)}
    kwargs = {k.split(".", 1)[1]: v for k, v in cfg.items()
              if k.startswith("solver.") and k.split(".", 1)[1] in fields}
    kwargs["mrf_solver"] = MrfSolver.parse(kwargs["mrf_solver"])
    try:
        return SolverConfig(**kwargs)
    except ValueError as exc:
        raise CliError(f"invalid solver configuration: {exc}") from None


def _apply_flags(args, cfg):
    flag_map = {"seed": "solver.seed", "threads": "solver.threads",
                "mrf_solver": "solver.mrf_solver", "loss": "model.loss",
                "delta": "solver.delta", "potts": "segment.potts"}
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg[key] = _coerce(key, value)
    kernel = getattr(args, "kernel", None)
    if kernel:
        kind, _, rest = kernel.partition(":")
        cfg["kernel.type"] = kind
        if kind == "rbf" and rest:
            cfg["kernel.sigma"] = _coerce("kernel.sigma", rest)
        elif kind == "nystrom" and rest:
            cfg["kernel.landmarks"] = _coerce("kernel.landmarks", rest)
        elif kind == "precomputed":
            cfg["kernel.path"] = rest or cfg["kernel.path"]
    return cfg


def make_kernel(cfg, features):
    kind = cfg["kernel.type"]
    gamma = cfg["solver.gamma"]
    if kind == "rbf":
        return build_kernel(features, RBFSpec(cfg["kernel.sigma"]), gamma)
    if kind == "linear":
        return build_kernel(features, LinearSpec(), gamma)
    if kind == "nystrom":
        if cfg["kernel.landmarks"] is None:
            raise CliError("nystrom kernel needs kernel.landmarks")
        return nystrom_factor(features, RBFSpec(cfg["kernel.sigma"]), cfg["kernel.landmarks"],
                              seed=cfg["solver.seed"], gamma=gamma)
    if kind == "precomputed":
        if not cfg["kernel.path"]:
            raise CliError("precomputed kernel needs a matrix path (--kernel precomputed:PATH)")
        return build_kernel(None, PrecomputedSpec(load_matrix(cfg["kernel.path"])), gamma)
    raise CliError(f"unknown kernel type {kind!r}")


# -- output helpers --------------------------------------------------------------

def format_trace_row(tr):
    return [str(tr.iteration), repr(float(tr.rho)), repr(float(tr.lagrangian_value)),
            repr(float(tr.primal_residual)), repr(float(tr.alpha_step)),
            str(tr.labels_changed), tr.descent_gate.value, repr(float(tr.mrf_energy)),
            repr(round(tr.wall_time * 1000.0, 3))]


class TraceWriter:
    """Streams :class:`IterationTrace` rows to a CSV file."""

    def __init__(self, path):
        self.path = path
        self.fh = None
        self.writer = None
        if path is not None:
            self.fh = open(path, "w", newline="")
            self.writer = csv.writer(self.fh, lineterminator="\n")
            self.writer.writerow(TRACE_COLUMNS)

    def __call__(self, trace):
        if self.writer is not None:
            self.writer.writerow(format_trace_row(trace))

    def close(self):
        if self.fh is not None:
            self.fh.close()


def read_trace_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _exit_for(termination):
    if termination is Termination.PRIMAL_CONVERGED:
        return EXIT_OK
    if termination is Termination.MAX_ITER:
        return EXIT_BUDGET
    return EXIT_ERROR


def _summary(report: RunReport, truth=None, exclude=None):
    out = {"termination": report.termination.value, "iterations": report.iterations}
    if report.residuals is not None:
        out["residuals"] = dataclasses.asdict(report.residuals)
    out["supervised_optimality_gap"] = report.supervised_optimality_gap
    out["lagrangian_monotone_after_freeze"] = report.lagrangian_monotone_after_freeze
    if report.message:
        out["message"] = report.message
    if truth is not None:
        m = metrics(report.final_state.y, truth, exclude)
        out["error_rate"] = m["error_rate"]
        out["mean_iou"] = m["mean_iou"]
    return out


def _infer_labels(cfg, spec, truth):
    if cfg["model.labels"] is not None:
        return cfg["model.labels"]
    k = 0
    for c in spec.balance_cliques:
        k = max(k, len(c.lower))
    for c in spec.clamps:
        k = max(k, c.label + 1)
    if truth is not None and len(truth):
        k = max(k, int(truth.max()) + 1)
    if k < 2:
        raise CliError("cannot infer the number of labels; set model.labels")
    return k


def _check_exhaustive(cfg, n, k):
    if MrfSolver.parse(cfg["solver.mrf_solver"]) is MrfSolver.EXHAUSTIVE and k ** min(n, 64) > EXHAUSTIVE_LIMIT:
        raise CliError(f"exhaustive MRF search needs {k}^{n} labelings, above the limit "
                       f"of {EXHAUSTIVE_LIMIT}; choose icm or alpha_expansion")


def _load_problem(args, cfg):
    for path in (args.features, args.constraints):
        if path is not None and not Path(path).is_file():
            raise CliError(f"input file not found: {path}")
    fmt = "matrix_binary" if str(args.features).endswith((".bin", ".dcmx")) else "csv_features"
    data = load_dataset(args.features, fmt)
    spec = load_constraints(args.constraints) if args.constraints else ConstraintSpec()
    truth = data.true_labels
    if getattr(args, "truth", None):
        truth = load_labels(args.truth)
    feats = standardize(data.features) if cfg["data.standardize"] else data.features
    k = _infer_labels(cfg, spec, truth)
    _check_exhaustive(cfg, data.n, k)
    instance = ProblemInstance(make_kernel(cfg, feats), k, LossKind.parse(cfg["model.loss"]),
                               spec.terms(), nu=cfg["model.nu"])
    exclude = [c.vertex for c in spec.clamps]
    return instance, truth, exclude


# -- commands -----------------------------------------------------------------

def cmd_solve(args, cfg):
    instance, truth, exclude = _load_problem(args, cfg)
    config = solver_config(cfg)
    sink = TraceWriter(args.trace_out)
    try:
        report = run(instance, config, trace_sink=sink)
    finally:
        sink.close()
    if args.labels_out:
        save_labels(args.labels_out, report.final_state.y)
    summary = _summary(report, truth, exclude)
    print(json.dumps(summary, indent=1, default=float))
    if args.summary_out:
        Path(args.summary_out).write_text(json.dumps(summary, indent=1, default=float) + "\n")
    return _exit_for(report.termination)


def cmd_baseline(args, cfg):
    instance, truth, exclude = _load_problem(args, cfg)
    config = solver_config(cfg)
    sink = TraceWriter(args.trace_out)
    try:
        if args.method == "kkmeans":
            res = constrained_kernel_kmeans(instance.kernel, instance.compiled,
                                            instance.n_labels,
                                            np.zeros(instance.n_vertices, dtype=np.int64),
                                            solver=config.mrf_solver, seed=config.seed,
                                            trace_sink=sink)
            labels, code = res.labels, EXIT_OK if res.converged else EXIT_BUDGET
            summary = {"termination": "converged" if res.converged else "max_iter",
                       "iterations": res.rounds}
        else:
            report = coordinate_descent(instance, config, trace_sink=sink)
            labels, code = report.final_state.y, _exit_for(report.termination)
            summary = _summary(report)
    finally:
        sink.close()
    if truth is not None:
        summary["error_rate"] = metrics(labels, truth, exclude)["error_rate"]
    if args.labels_out:
        save_labels(args.labels_out, labels)
    print(json.dumps(summary, indent=1, default=float))
    return code


def moons_instance(cfg, seed):
    data = generate_moons(cfg["bench.n_per_class"], cfg["bench.n_classes"],
                          cfg["bench.noise"], seed=seed)
    spec = generate_balance_cliques(data.true_labels, cfg["bench.n_cliques"],
                                    cfg["bench.clique_size"], cfg["bench.slack"], seed=seed,
                                    n_labels=cfg["bench.n_classes"])
    feats = standardize(data.features) if cfg["data.standardize"] else data.features
    instance = ProblemInstance(make_kernel(cfg, feats), cfg["bench.n_classes"],
                               LossKind.parse(cfg["model.loss"]), spec.terms(),
                               nu=cfg["model.nu"])
    return data, instance


def run_moons_seed(cfg, seed, out_dir=None):
    """dcadmm and both baselines on one generated instance; returns result rows."""
    data, instance = moons_instance(cfg, seed)
    local = dict(cfg)
    local["solver.seed"] = seed
    config = solver_config(local)
    rows = []

    def trace_path(method):
        return None if out_dir is None else Path(out_dir) / f"trace_seed{seed}_{method}.csv"

    sink = TraceWriter(trace_path("dcadmm"))
    start = time.perf_counter()
    try:
        report = run(instance, config, trace_sink=sink)
    finally:
        sink.close()
    rows.append({"seed": seed, "method": "dcadmm",
                 "error": metrics(report.final_state.y, data.true_labels)["error_rate"],
                 "runtime": time.perf_counter() - start, "iterations": report.iterations,
                 "termination": report.termination.value, "labels": report.final_state.y})
    sink = TraceWriter(trace_path("kkmeans"))
    start = time.perf_counter()
    try:
        res = constrained_kernel_kmeans(instance.kernel, instance.compiled, instance.n_labels,
                                        np.zeros(instance.n_vertices, dtype=np.int64),
                                        solver=config.mrf_solver, seed=seed, trace_sink=sink)
    finally:
        sink.close()
    rows.append({"seed": seed, "method": "kkmeans",
                 "error": metrics(res.labels, data.true_labels)["error_rate"],
                 "runtime": time.perf_counter() - start, "iterations": res.rounds,
                 "termination": "converged" if res.converged else "max_iter",
                 "labels": res.labels})
    sink = TraceWriter(trace_path("coordinate_descent"))
    start = time.perf_counter()
    try:
        cd = coordinate_descent(instance, config, trace_sink=sink, diagnostics=False)
    finally:
        sink.close()
    rows.append({"seed": seed, "method": "coordinate_descent",
                 "error": metrics(cd.final_state.y, data.true_labels)["error_rate"],
                 "runtime": time.perf_counter() - start, "iterations": cd.iterations,
                 "termination": cd.termination.value, "labels": cd.final_state.y})
    return rows, report


def _print_table(rows, out=None):
    out = out or sys.stdout
    out.write(f"{'seed':>6}  {'method':<20} {'error%':>8} {'runtime_s':>10} {'iterations':>10}\n")
    for r in rows:
        out.write(f"{r['seed']!s:>6}  {r['method']:<20} {100 * r['error']:8.2f} "
                  f"{r['runtime']:10.2f} {r['iterations']!s:>10}\n")


def cmd_moons_bench(args, cfg):
    n = cfg["bench.n_per_class"] * cfg["bench.n_classes"]
    _check_exhaustive(cfg, n, cfg["bench.n_classes"])
    out_dir = args.out_dir
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    base = cfg["solver.seed"]
    seeds = [base + s for s in range(args.seeds)]
    all_rows = []
    code = EXIT_OK
    for seed in seeds:
        rows, report = run_moons_seed(cfg, seed, out_dir)
        _print_table(rows)
        sys.stdout.flush()
        all_rows.extend(rows)
        if out_dir:
            save_labels(Path(out_dir) / f"labels_seed{seed}_dcadmm.txt", rows[0]["labels"])
        if report.termination is Termination.NUMERIC_FAILURE:
            code = EXIT_ERROR
        elif report.termination is Termination.MAX_ITER and code == EXIT_OK:
            code = EXIT_BUDGET
    if len(seeds) > 1:
        median_rows = []
        for method in ("dcadmm", "kkmeans", "coordinate_descent"):
            sel = [r for r in all_rows if r["method"] == method]
            median_rows.append({"seed": "median", "method": method,
                                "error": float(np.median([r["error"] for r in sel])),
                                "runtime": float(np.median([r["runtime"] for r in sel])),
                                "iterations": int(np.median([r["iterations"] for r in sel]))})
        _print_table(median_rows)
        all_rows.extend(median_rows)
    if out_dir:
        with open(Path(out_dir) / "results.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seed", "method", "error", "runtime", "iterations"])
            for r in all_rows:
                w.writerow([r["seed"], r["method"], repr(float(r["error"])),
                            repr(round(r["runtime"], 3)), r["iterations"]])
    return code


def scribble_warm_start(kernel, fixed_labels, n_labels):
    """Label each pixel by its mean kernel similarity to every scribble class."""
    score = np.full((kernel.n, n_labels), -np.inf)
    by_class = {}
    for v, c in fixed_labels.items():
        by_class.setdefault(int(c), []).append(int(v))
    for c, members in by_class.items():
        e = np.zeros((kernel.n, len(members)))
        e[members, np.arange(len(members))] = 1.0
        score[:, c] = kernel.matvec(e).mean(axis=1)
    return np.argmax(score, axis=1)


def run_segment(cfg, image_path, scribbles_path, trace_sink=None):
    """Segment one image; returns ``(report, dataset, shape)``."""
    for path in (image_path, scribbles_path):
        if not Path(path).is_file():
            raise CliError(f"input file not found: {path}")
    data, spec, shape, k = load_image_problem(image_path, scribbles_path, cfg["segment.potts"],
                                              coords=cfg["data.coords"])
    if cfg["model.labels"] is not None:
        k = cfg["model.labels"]
    cfg = dict(cfg)
    cfg["solver.mrf_solver"] = "alpha_expansion"
    # grid Potts terms swamp unaries scaled by a tiny penalty; start higher
    cfg["solver.rho0"] = cfg["segment.rho0"]
    instance = ProblemInstance(make_kernel(cfg, data.features), k,
                               LossKind.parse(cfg["model.loss"]), spec.terms(),
                               nu=cfg["model.nu"])
    config = solver_config(cfg)
    y0 = scribble_warm_start(instance.kernel, data.fixed_labels, k)
    alpha0 = lam0 = None
    if instance.nu > 0:
        # start from the classifier fitted to the warm labels so the first
        # unaries are informative rather than label-symmetric
        alpha0, lam0, _, _ = solve_supervised(instance, y0)
    report = run(instance, config, y0=y0, alpha0=alpha0, lambda0=lam0, trace_sink=trace_sink)
    return report, data, shape


def cmd_segment(args, cfg):
    sink = TraceWriter(args.trace_out)
    try:
        report, data, shape = run_segment(cfg, args.image, args.scribbles, trace_sink=sink)
    finally:
        sink.close()
    y = report.final_state.y
    if args.labels_out:
        save_labels(args.labels_out, y)
    if args.mask_out:
        write_pnm(args.mask_out, (y + 1).reshape(shape).astype(np.uint8))
    truth = None
    if args.truth_mask:
        gt = read_pnm(args.truth_mask)
        if gt.shape != shape:
            raise CliError("ground-truth mask size differs from the image")
        truth = gt.ravel().astype(np.int64) - 1
    summary = _summary(report, truth, list(data.fixed_labels))
    print(json.dumps(summary, indent=1, default=float))
    return _exit_for(report.termination)


# -- argument parsing ---------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="lookup-table worker threads")
    common.add_argument("--trace-out", help="per-iteration trace CSV")
    common.add_argument("--labels-out", help="write the final labeling here")
    common.add_argument("--mrf-solver", choices=["icm", "alpha_expansion", "exhaustive"])
    common.add_argument("--loss", choices=[l.value for l in LossKind])
    common.add_argument("--kernel", help="rbf[:SIGMA], linear, nystrom:LANDMARKS or "
                                         "precomputed:PATH")
    common.add_argument("--delta", type=float, help="descent-gate margin")

    parser = argparse.ArgumentParser(prog="dcadmm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", parents=[common], help="run dcadmm on a dataset")
    p.add_argument("features", help="features CSV or DCMX matrix")
    p.add_argument("--constraints", help="constraint spec JSON")
    p.add_argument("--truth", help="labels file for metrics")
    p.add_argument("--summary-out", help="write the JSON summary here")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("baseline", parents=[common], help="run a comparison method")
    p.add_argument("method", choices=["kkmeans", "coordinate-descent"])
    p.add_argument("features")
    p.add_argument("--constraints")
    p.add_argument("--truth")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("moons-bench", parents=[common], help="four-moons benchmark")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--out-dir", help="directory for traces, labels and results.csv")
    p.set_defaults(func=cmd_moons_bench)

    p = sub.add_parser("segment", parents=[common], help="scribble-driven segmentation")
    p.add_argument("image", help="binary PPM (P6)")
    p.add_argument("scribbles", help="binary PGM (P5); value v>0 clamps label v-1")
    p.add_argument("--potts", type=float, help="grid Potts weight")
    p.add_argument("--mask-out", help="label map PGM (value = label + 1)")
    p.add_argument("--truth-mask", help="ground-truth label map PGM")
    p.set_defaults(func=cmd_segment)
    return parser


def _setup_logging():
    level = os.environ.get("DCADMM_LOG", "error").strip().upper()
    if level not in ("ERROR", "INFO", "DEBUG", "WARNING"):
        level = "ERROR"
    logging.basicConfig(level=getattr(logging, level), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        cfg = _apply_flags(args, cfg)
        return args.func(args, cfg)
    except Exception as exc:  # every failure becomes a one-line diagnostic
        logger.debug("command failed", exc_info=True)
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"dcadmm: error: {msg}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
