from __future__ import annotations

import csv
import json
import statistics
from pathlib import Path

import numpy as np
import pytest

from cbrl.harness import cli, config, metrics, plotdata, table
from cbrl.harness.config import ConfigError, apply_overrides, loads, parse_seeds
from cbrl.harness.metrics import MetricsRow

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL = """\
[experiment]
env = synthetic
algorithms = hpgd, zero-order
seeds = 0..1

[env]
n_states = 3
n_actions = 2
dim = 2

[outer]
iterations = 6
step = 0.05
eval_every = 2
track_grad_norm = true
"""


def write_cfg(tmp_path, text=SMALL, name="small.cfg") -> Path:
    p = tmp_path / name
    p.write_text(text)
    return p


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- config grammar


def test_shipped_configs_parse():
    for p in sorted(CONFIGS.glob("*.cfg")):
        cfg = config.load(p)
        assert cfg.problem().dim >= 1


def test_round_trip():
    cfg = loads(SMALL)
    again = loads(cfg.dumps())
    assert again.dumps() == cfg.dumps() and again.hash() == cfg.hash()


@pytest.mark.parametrize("text, line", [
    ("[experiment]\nenv = synthetic\ncolour = red\n", 3),
    ("[experiment]\nenv = synthetic\nenv = tax\n", 3),
    ("[nonsense]\n", 1),
    ("env = synthetic\n", 1),
    ("[outer]\niterations = many\n", 2),
    ("[outer]\nstep\n", 2),
])
def test_strict_parsing(text, line):
    with pytest.raises(ConfigError) as exc:
        loads(text)
    assert exc.value.line == line


def test_env_keys_must_apply():
    with pytest.raises(ConfigError):
        loads("[experiment]\nenv = synthetic\n[env]\nbeta = 1.0\n")


def test_override_resolution():
    cfg = loads(SMALL)
    cfg = apply_overrides(cfg, ["step=0.5", "outer.iterations=9"])
    assert cfg["step"] == 0.5 and cfg["outer.iterations"] == 9
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["iterations=3"])  # outer or oracle
    with pytest.raises(ConfigError):
        apply_overrides(cfg, ["nonsense=1"])


def test_lambda_override_reaches_problem():
    cfg = config.load(CONFIGS / "fourrooms.cfg", ["lambda=0.003"])
    assert cfg.problem().meta.lam == 0.003


def test_parse_seeds():
    assert parse_seeds("0..3") == (0, 1, 2, 3)
    assert parse_seeds("7") == (7,)
    assert parse_seeds("1,4,7") == (1, 4, 7)
    for bad in ("3..1", "a", ""):
        with pytest.raises(ValueError):
            parse_seeds(bad)


# ---------------------------------------------------------------- metrics


def test_metrics_round_trip(tmp_path):
    rows = [MetricsRow("r", "hpgd", "synthetic", None, None, 0, 0, -1.25, None, 7, "trajectory", 0.5),
            MetricsRow("r", "hpgd", "synthetic", 0.1, 1.0, 0, 2, 0.1 + 0.2, 3e-17, 9, "trajectory", 1.0)]
    p = tmp_path / "r.csv"
    metrics.write_rows(p, rows)
    assert metrics.read_rows(p) == rows
    header = p.read_text().splitlines()[0]
    assert header == ",".join(metrics.COLUMNS)
    assert header.startswith("run_id,algorithm,env,lambda,beta,seed,iteration,upper_return")


# ---------------------------------------------------------------- run / table / plotdata


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("runs")
    cfg_path = write_cfg(base)
    out = base / "a"
    assert cli.main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
    return cfg_path, out


def test_run_writes_one_row_per_evaluation(small_run):
    _, out = small_run
    files = table.metric_files(out)
    assert len(files) == 4  # 2 algorithms x 2 seeds
    for f in files:
        rows = metrics.read_rows(f)
        assert [r.iteration for r in rows] == [0, 2, 4, 6]
        assert all(r.exact_grad_norm_sq is not None for r in rows)
    manifest = json.loads((out / "manifest.json").read_text())
    assert all(v["status"] == "ok" for v in manifest["runs"].values())


def test_run_is_deterministic_modulo_wall_time(small_run, tmp_path):
    cfg_path, out = small_run
    again = tmp_path / "b"
    assert cli.main(["run", "--config", str(cfg_path), "--out", str(again)]) == 0
    for f in table.metric_files(out):
        g = again / f.relative_to(out)
        assert metrics.strip_wall_time(f.read_text()) == metrics.strip_wall_time(g.read_text())
        it = f.with_name(f.name[:-4] + ".iterates.csv")
        assert it.read_bytes() == g.with_name(g.name[:-4] + ".iterates.csv").read_bytes()


def test_single_seed_run(tmp_path):
    cfg_path = write_cfg(tmp_path)
    out = tmp_path / "one"
    assert cli.main(["run", "--config", str(cfg_path), "--algo", "hpgd", "--seed", "7",
                     "--out", str(out)]) == 0
    files = table.metric_files(out)
    assert len(files) == 1 and metrics.read_rows(files[0])[0].seed == 7
    cells = table.aggregate(table.load_runs(out))
    assert len(cells) == 1 and cells[0].single and cells[0].se == 0.0
    text, missing = table.format_table(cells)
    assert "(n=1)" in text and not missing


def test_table_matches_independent_recomputation(small_run):
    _, out = small_run
    finals = {}
    for f in table.metric_files(out):
        rows = read_csv(f)
        last = max(rows, key=lambda r: int(r["iteration"]))
        finals.setdefault(last["algorithm"], []).append(float(last["upper_return"]))
    for c in table.aggregate(table.load_runs(out)):
        vals = finals[c.algorithm]
        assert c.n == len(vals)
        assert c.mean == pytest.approx(statistics.fmean(vals), abs=1e-12)
        assert c.se == pytest.approx(statistics.stdev(vals) / len(vals) ** 0.5, abs=1e-12)


def test_constant_runs_have_zero_error():
    runs = {f"r{s}": [MetricsRow(f"r{s}", "dummy", "e", 0.1, 1.0, s, 5, 0.75, None, 0, "x", 0.0)]
            for s in range(10)}
    (cell,) = table.aggregate(runs)
    assert cell.mean == 0.75 and cell.se == 0.0 and cell.n == 10


def test_table_reports_missing_cells():
    cells = [table.Cell("e", 0.1, 1.0, "hpgd", 1.0, 0.0, 1)]
    text, missing = table.format_table(cells, ["hpgd", "amd"], requested=[(0.3, 1.0)])
    assert "missing" in text
    assert set(missing) == {(0.1, 1.0, "amd"), (0.3, 1.0, "hpgd"), (0.3, 1.0, "amd")}


def test_convergence_plotdata(small_run, tmp_path):
    _, out = small_run
    (path,) = plotdata.emit(out, "convergence", tmp_path)
    rows = read_csv(path)
    assert list(rows[0]) == ["env", "lambda", "beta", "algorithm", "iteration", "mean", "se", "lower",
                             "upper", "n"]
    for alg in ("hpgd", "zero-order"):
        its = [int(r["iteration"]) for r in rows if r["algorithm"] == alg]
        assert its == [0, 2, 4, 6]
    assert all(int(r["n"]) == 2 for r in rows)


def test_unknown_figure(small_run, capsys):
    _, out = small_run
    assert cli.main(["plotdata", str(out), "histogram"]) == 1
    with pytest.raises(ValueError):
        plotdata.emit(out, "histogram")


def test_heatmap_plotdata(tmp_path):
    text = "[experiment]\nenv = four-rooms\nalgorithms = amd\nseeds = 0\n[env]\nlambda = 0.01\n" \
           "[outer]\niterations = 2\nstep = 1.0\neval_every = 2\n"
    out = tmp_path / "fr"
    assert cli.main(["run", "--config", str(write_cfg(tmp_path, text)), "--out", str(out)]) == 0
    (path,) = plotdata.emit(out, "heatmap", tmp_path)
    rows = read_csv(path)
    pen = np.array([float(r["penalty"]) for r in rows])
    assert list(rows[0]) == ["row", "col", "penalty"] and len(rows) == 104
    assert np.all(pen <= 0) and -0.2 - 1e-12 <= pen.sum() <= 0


def test_tax_rates_plotdata(tmp_path):
    text = "[experiment]\nenv = tax\nalgorithms = zero-order\nseeds = 0\n" \
           "[outer]\niterations = 2\nstep = 0.1\neval_every = 1\n"
    out = tmp_path / "tax"
    assert cli.main(["run", "--config", str(write_cfg(tmp_path, text)), "--out", str(out)]) == 0
    (path,) = plotdata.emit(out, "tax-rates", tmp_path)
    rows = read_csv(path)
    assert list(rows[0]) == ["algorithm", "iteration", "x", "y1", "y2", "y3"]
    assert [int(r["iteration"]) for r in rows] == [0, 1, 2]
    assert float(rows[0]["x"]) == 0.3


# ---------------------------------------------------------------- other subcommands


def test_cli_check_json(capsys):
    assert cli.main(["check", "rtq-cost", "--draws", "1000", "--json"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    rec = json.loads(lines[0])
    assert rec["passed"] is True and rec["suite"] == "rtq-cost"


def test_cli_check_rejects_misplaced_flag():
    assert cli.main(["check", "contraction", "--draws", "10"]) == 1


def test_cli_eval_exact(small_run, capsys):
    cfg_path, _ = small_run
    assert cli.main(["eval-exact", "--config", str(cfg_path), "--x", "0.5,-0.5"]) == 0
    out = json.loads(capsys.readouterr().out)
    g = np.array(out["hypergradient"])
    assert out["grad_norm_sq"] == pytest.approx(float(g @ g))


def test_cli_usage_errors(small_run):
    cfg_path, _ = small_run
    assert cli.main(["run", "--config", str(cfg_path), "--override", "colour=red"]) == 1
    assert cli.main(["run", "--config", "does-not-exist.cfg"]) == 1
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["table", "/nonexistent-dir"]) == 1
