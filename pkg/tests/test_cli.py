import csv
import itertools
import os
import subprocess
import sys

import numpy as np
import pytest
from scipy import ndimage

from dcadmm import run
from dcadmm.cli import (DEFAULTS, TRACE_COLUMNS, CliError, TraceWriter, _apply_flags,
                        _load_problem, build_parser, load_config, main, make_kernel,
                        read_trace_csv, scribble_warm_start, solver_config)
from dcadmm.core import INF, LossKind, ProblemInstance, eval_total_energy, loss_rows
from dcadmm.dataio import (generate_moons, load_image_problem, load_labels, read_pnm,
                           save_features_csv, save_matrix, write_pnm)
from dcadmm.supervised import primal_objective, solve_supervised

NUMERIC = ["rho", "lagrangian", "primal_residual", "alpha_step", "mrf_energy"]
SMALL_BENCH = ["--set", "bench.n_per_class=8", "--set", "bench.n_cliques=3",
               "--set", "bench.clique_size=8", "--set", "solver.max_iter=300"]


@pytest.fixture
def separable(tmp_path):
    save_features_csv(tmp_path / "x.csv", np.arange(12.0).reshape(6, 2), [0, 1, 2, 0, 1, 2])
    save_matrix(tmp_path / "k.bin", np.eye(6))
    return tmp_path


@pytest.fixture
def moons_csv(tmp_path):
    ds = generate_moons(10, 2, 0.1, seed=3)
    save_features_csv(tmp_path / "m.csv", ds.features, ds.true_labels)
    return tmp_path / "m.csv"


def _two_region_image(h=6, w=8):
    img = np.zeros((h, w, 3), dtype=np.uint8)
    img[:, : w // 2] = (200, 30, 30)
    img[:, w // 2:] = (30, 30, 200)
    truth = np.zeros((h, w), dtype=np.int64)
    truth[:, w // 2:] = 1
    return img, truth


# -- configuration ------------------------------------------------------------

def test_config_layers(tmp_path):
    (tmp_path / "c.toml").write_text("[solver]\ndelta = 0.5\nmax_iter = 7\n[model]\nloss = 'softmax'\n")
    cfg = load_config(tmp_path / "c.toml", ["solver.max_iter=9", "model.labels=3"])
    assert cfg["solver.delta"] == 0.5 and cfg["solver.max_iter"] == 9
    assert cfg["model.loss"] == "softmax" and cfg["model.labels"] == 3
    assert cfg["solver.tau"] == DEFAULTS["solver.tau"]


def test_config_rejects_unknown_and_mistyped_keys():
    with pytest.raises(CliError, match="unknown"):
        load_config(None, ["solver.colour=1"])
    with pytest.raises(CliError, match="max_iter"):
        load_config(None, ["solver.max_iter=1.5"])
    with pytest.raises(CliError):
        load_config(None, ["solver.delta"])


def test_overrides_type_check_against_solver_config():
    with pytest.raises(CliError, match="invalid solver"):
        solver_config(load_config(None, ["solver.tau=0.5"]))


def test_kernel_flag_forms():
    parse = build_parser().parse_args
    cfg = _apply_flags(parse(["moons-bench", "--kernel", "rbf:0.25"]), load_config())
    assert cfg["kernel.type"] == "rbf" and cfg["kernel.sigma"] == 0.25
    cfg = _apply_flags(parse(["moons-bench", "--kernel", "nystrom:40"]), load_config())
    assert cfg["kernel.landmarks"] == 40
    cfg = _apply_flags(parse(["moons-bench", "--kernel", "linear", "--delta", "0.01",
                              "--seed", "5", "--loss", "softmax"]), load_config())
    assert (cfg["kernel.type"], cfg["solver.delta"], cfg["solver.seed"],
            cfg["model.loss"]) == ("linear", 0.01, 5, "softmax")
    with pytest.raises(CliError):
        make_kernel(dict(cfg, **{"kernel.type": "nystrom"}), np.zeros((3, 2)))


# -- solve ----------------------------------------------------------------------

def test_separable_solve(separable, capsys):
    code = main(["solve", str(separable / "x.csv"), "--kernel",
                 f"precomputed:{separable / 'k.bin'}", "--set", "model.nu=0",
                 "--labels-out", str(separable / "y.txt")])
    assert code == 0
    assert '"termination": "primal_converged"' in capsys.readouterr().out
    y = load_labels(separable / "y.txt")
    # library run on the same instance: every vertex ends at zero loss
    cfg = _apply_flags(build_parser().parse_args(
        ["solve", str(separable / "x.csv"), "--kernel", f"precomputed:{separable / 'k.bin'}"]),
        load_config(None, ["model.nu=0"]))
    args = build_parser().parse_args(["solve", str(separable / "x.csv")])
    inst, _, _ = _load_problem(args, cfg)
    rep = run(inst, solver_config(cfg))
    assert np.array_equal(y, rep.final_state.y)
    assert np.allclose(loss_rows(inst.loss, y, rep.final_state.beta), 0.0, atol=1e-6)


def test_budget_exit_code(moons_csv):
    assert main(["solve", str(moons_csv), "--set", "solver.max_iter=1"]) == 2


def test_missing_config(moons_csv, capsys):
    code = main(["solve", str(moons_csv), "--config", "/nonexistent/run.toml"])
    err = capsys.readouterr().err
    assert code == 1
    assert "/nonexistent/run.toml" in err and len(err.strip().splitlines()) == 1


def test_missing_input(tmp_path, capsys):
    assert main(["solve", str(tmp_path / "absent.csv")]) == 1
    assert "absent.csv" in capsys.readouterr().err


def test_malformed_input_is_one_line(tmp_path, capsys):
    (tmp_path / "x.csv").write_text("1,2\n3,oops\n")
    assert main(["solve", str(tmp_path / "x.csv"), "--set", "model.labels=2"]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("dcadmm: error:") and ":2:" in err[0]


def test_trace_csv_matches_report(moons_csv, tmp_path):
    trace = tmp_path / "t.csv"
    assert main(["solve", str(moons_csv), "--trace-out", str(trace),
                 "--set", "solver.max_iter=150"]) in (0, 2)
    rows = read_trace_csv(trace)
    assert list(rows[0]) == TRACE_COLUMNS
    cfg = load_config(None, ["solver.max_iter=150"])
    inst, _, _ = _load_problem(build_parser().parse_args(["solve", str(moons_csv)]), cfg)
    rep = run(inst, solver_config(cfg))
    assert len(rows) == len(rep.traces)
    for row, t in zip(rows, rep.traces):
        assert int(row["iter"]) == t.iteration
        assert int(row["labels_changed"]) == t.labels_changed
        assert row["gate"] == t.descent_gate.value
        for col, val in zip(NUMERIC, [t.rho, t.lagrangian_value, t.primal_residual,
                                      t.alpha_step, t.mrf_energy]):
            assert float(row[col]) == pytest.approx(val, rel=1e-12, abs=1e-12)


def test_trace_writer_without_path():
    sink = TraceWriter(None)
    sink(None)
    sink.close()


def _strip_ms(path):
    return [{k: v for k, v in r.items() if k != "ms"} for r in read_trace_csv(path)]


def test_solve_is_deterministic(moons_csv, tmp_path):
    outs = []
    for tag in "ab":
        args = ["solve", str(moons_csv), "--seed", "3", "--set", "solver.max_iter=200",
                "--trace-out", str(tmp_path / f"t{tag}.csv"),
                "--labels-out", str(tmp_path / f"y{tag}.txt")]
        main(args)
        outs.append(((tmp_path / f"y{tag}.txt").read_bytes(), _strip_ms(tmp_path / f"t{tag}.csv")))
    assert outs[0] == outs[1]


# -- baselines ------------------------------------------------------------------

@pytest.mark.parametrize("method", ["kkmeans", "coordinate-descent"])
def test_baseline_command(method, moons_csv, tmp_path, capsys):
    code = main(["baseline", method, str(moons_csv), "--labels-out", str(tmp_path / "y.txt"),
                 "--trace-out", str(tmp_path / "t.csv")])
    assert code == 0
    assert '"error_rate"' in capsys.readouterr().out
    assert len(load_labels(tmp_path / "y.txt")) == 20
    assert len(read_trace_csv(tmp_path / "t.csv")) >= 1


# -- moons benchmark ----------------------------------------------------------------

def test_bench_seed_blocks(tmp_path, capsys):
    code = main(["moons-bench", "--seeds", "5", "--out-dir", str(tmp_path)] + SMALL_BENCH)
    out = capsys.readouterr().out
    assert code in (0, 2)
    assert out.count("seed  method") == 6
    assert out.count("median") == 3
    with open(tmp_path / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 18
    for s in range(5):
        for m in ("dcadmm", "kkmeans", "coordinate_descent"):
            assert (tmp_path / f"trace_seed{s}_{m}.csv").is_file()
        assert len(load_labels(tmp_path / f"labels_seed{s}_dcadmm.txt")) == 32


def test_bench_is_deterministic(tmp_path):
    for tag in "ab":
        main(["moons-bench", "--seed", "4", "--out-dir", str(tmp_path / tag)] + SMALL_BENCH)
    for name in ("labels_seed4_dcadmm.txt",):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    for m in ("dcadmm", "kkmeans", "coordinate_descent"):
        name = f"trace_seed4_{m}.csv"
        assert _strip_ms(tmp_path / "a" / name) == _strip_ms(tmp_path / "b" / name)


def test_bench_rejects_exhaustive(capsys):
    assert main(["moons-bench", "--mrf-solver", "exhaustive"]) == 1
    err = capsys.readouterr().err
    assert "exhaustive" in err and "4^600" in err


# -- segmentation ----------------------------------------------------------------

def _write_segment_inputs(tmp_path, img, marks):
    write_pnm(tmp_path / "img.ppm", img)
    write_pnm(tmp_path / "scr.pgm", marks.astype(np.uint8))
    return [str(tmp_path / "img.ppm"), str(tmp_path / "scr.pgm")]


def test_segment_two_regions(tmp_path, capsys):
    img, truth = _two_region_image()
    marks = np.zeros(truth.shape, dtype=np.uint8)
    marks[2, 1], marks[3, 6] = 1, 2
    write_pnm(tmp_path / "gt.pgm", (truth + 1).astype(np.uint8))
    code = main(["segment", *_write_segment_inputs(tmp_path, img, marks),
                 "--mask-out", str(tmp_path / "mask.pgm"),
                 "--truth-mask", str(tmp_path / "gt.pgm")])
    assert code == 0
    assert '"error_rate": 0.0' in capsys.readouterr().out
    assert np.array_equal(read_pnm(tmp_path / "mask.pgm").astype(np.int64) - 1, truth)


def test_segment_two_regions_downscaled_is_global_optimum(tmp_path):
    # enumerate every labeling of a small copy; the region partition must
    # minimize the supervised optimum plus the Potts energy
    img, truth = _two_region_image(2, 4)
    marks = np.zeros(truth.shape, dtype=np.uint8)
    marks[0, 0], marks[1, 3] = 1, 2
    paths = _write_segment_inputs(tmp_path, img, marks)
    assert main(["segment", *paths, "--labels-out", str(tmp_path / "y.txt")]) == 0
    assert np.array_equal(load_labels(tmp_path / "y.txt"), truth.ravel())
    data, spec, _, k = load_image_problem(*paths, DEFAULTS["segment.potts"])
    cfg = load_config()
    inst = ProblemInstance(make_kernel(cfg, data.features), k, LossKind.HINGE, spec.terms(),
                           nu=cfg["model.nu"])
    best, best_y = np.inf, None
    for bits in itertools.product(range(2), repeat=8):
        y = np.array(bits)
        energy = eval_total_energy(inst.compiled, y)
        if energy == INF:
            continue
        alpha, _, _, _ = solve_supervised(inst, y, tol=1e-12)
        value = primal_objective(inst, y, alpha) + energy
        if value < best - 1e-9:
            best, best_y = value, y
    assert np.array_equal(best_y, truth.ravel())


def test_segment_without_potts_is_classifier_argmax(tmp_path):
    rng = np.random.default_rng(0)
    img, _ = _two_region_image(8, 8)
    img = np.clip(img.astype(int) + rng.integers(-60, 60, img.shape), 0, 255).astype(np.uint8)
    marks = np.zeros((8, 8), dtype=np.uint8)
    marks[1:7, 1], marks[1:7, 6] = 1, 2
    paths = _write_segment_inputs(tmp_path, img, marks)
    assert main(["segment", *paths, "--potts", "0", "--labels-out", str(tmp_path / "y.txt")]) == 0
    y = load_labels(tmp_path / "y.txt")
    # rebuild the run with the library and read off the final classifier
    data, spec, _, k = load_image_problem(*paths, 0.0)
    assert spec.potts_edges == []
    cfg = dict(load_config(), **{"solver.mrf_solver": "alpha_expansion", "solver.rho0": 1.0})
    inst = ProblemInstance(make_kernel(cfg, data.features), k, LossKind.HINGE, spec.terms(),
                           nu=cfg["model.nu"])
    y0 = scribble_warm_start(inst.kernel, data.fixed_labels, k)
    a0, l0, _, _ = solve_supervised(inst, y0)
    rep = run(inst, solver_config(cfg), y0=y0, alpha0=a0, lambda0=l0)
    assert np.array_equal(rep.final_state.y, y)
    free = np.setdiff1d(np.arange(64), list(data.fixed_labels))
    scores = inst.kernel.matvec(rep.final_state.alpha)
    assert np.array_equal(y[free], scores[free].argmax(axis=1))


def test_segment_strong_potts_gives_connected_foreground(tmp_path):
    img = np.full((10, 10, 3), 40, dtype=np.uint8)
    img[3:7, 2:6] = (220, 220, 40)
    img[1, 8] = (220, 220, 40)  # detached speck of foreground colour
    marks = np.zeros((10, 10), dtype=np.uint8)
    marks[0, :] = 1
    marks[4, 3] = 2
    paths = _write_segment_inputs(tmp_path, img, marks)
    code = main(["segment", *paths, "--potts", "1e6", "--mask-out", str(tmp_path / "m.pgm")])
    assert code in (0, 2)
    fg = read_pnm(tmp_path / "m.pgm") == 2
    assert fg[4, 3]
    _, components = ndimage.label(fg)
    assert components == 1


def test_segment_is_deterministic(tmp_path):
    img, truth = _two_region_image()
    marks = np.zeros(truth.shape, dtype=np.uint8)
    marks[2, 1], marks[3, 6] = 1, 2
    paths = _write_segment_inputs(tmp_path, img, marks)
    for tag in "ab":
        main(["segment", *paths, "--trace-out", str(tmp_path / f"t{tag}.csv"),
              "--labels-out", str(tmp_path / f"y{tag}.txt")])
    assert (tmp_path / "ya.txt").read_bytes() == (tmp_path / "yb.txt").read_bytes()
    assert _strip_ms(tmp_path / "ta.csv") == _strip_ms(tmp_path / "tb.csv")


def test_segment_rejects_grayscale_image(tmp_path, capsys):
    write_pnm(tmp_path / "img.pgm", np.zeros((2, 2), dtype=np.uint8))
    write_pnm(tmp_path / "scr.pgm", np.zeros((2, 2), dtype=np.uint8))
    assert main(["segment", str(tmp_path / "img.pgm"), str(tmp_path / "scr.pgm")]) == 1
    assert "P6" in capsys.readouterr().err


# -- process-level behaviour ---------------------------------------------------------

def test_console_entry_and_log_level(moons_csv):
    env = dict(os.environ, DCADMM_LOG="info")
    proc = subprocess.run([sys.executable, "-m", "dcadmm.cli", "solve", str(moons_csv),
                           "--set", "solver.max_iter=20"],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 2
    assert '"termination": "max_iter"' in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "dcadmm.cli", "solve", "/no/such.csv"],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    assert proc.stderr.strip() == "dcadmm: error: input file not found: /no/such.csv"
