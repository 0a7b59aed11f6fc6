import json
from pathlib import Path

import pytest

from revode.cli import _overrides, build_parser, load_config, main
from revode.analysis import BenchConfig, GradcheckConfig
from revode.errors import ConfigurationError
from revode.exports import read_jsonl


@pytest.fixture(autouse=True)
def isolated_env(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("REVODE_OUTPUT_DIR", str(tmp_path / "output"))
    monkeypatch.setenv("REVODE_THREADS", "2")


def write_config(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def manifest(run_dir):
    return json.loads((run_dir / "manifest.json").read_text())


def test_usage_errors_exit_with_two():
    assert main([]) == 2
    assert main(["explode"]) == 2
    assert main(["train", "--engine", "magic"]) == 2


def test_missing_config_file(tmp_path):
    assert main(["convergence", "--config", str(tmp_path / "nope.json")]) == 2
    assert not (tmp_path / "output").exists()


def test_unknown_config_key(tmp_path):
    path = write_config(tmp_path, {"solvers": ["euler"], "colour": "blue"})
    assert main(["convergence", "--config", path]) == 2


def test_load_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_config(str(bad), GradcheckConfig)
    with pytest.raises(ConfigurationError):
        load_config(write_config(tmp_path, [1, 2]), GradcheckConfig)
    cfg = load_config(None, GradcheckConfig, {"seed": 7})
    assert cfg.seed == 7


def test_tableaux_prints_json(tmp_path, capsys):
    assert main(["tableaux", "--out", str(tmp_path / "tabs")]) == 0
    out = capsys.readouterr().out
    names = [t["name"] for t in json.loads(out)]
    assert "rk4" in names and "bosh3" in names
    assert json.loads((tmp_path / "tabs" / "tableaux.json").read_text())[0]["name"] == names[0]


def test_runs_get_numbered_directories(tmp_path):
    path = write_config(tmp_path, {"solvers": ["euler"], "h_list": [0.125, 0.0625]})
    assert main(["convergence", "--config", path]) == 0
    assert main(["convergence", "--config", path]) == 0
    runs = sorted(p.name for p in (tmp_path / "output").iterdir())
    assert runs == ["run_0001", "run_0002"]


def test_convergence_writes_results_and_manifest(tmp_path):
    out = tmp_path / "conv"
    path = write_config(tmp_path, {"solvers": ["midpoint"], "h_list": [0.125, 0.0625, 0.03125]})
    assert main(["convergence", "--config", path, "--out", str(out)]) == 0
    assert (out / "convergence.csv").read_text().splitlines()[0] == "solver,reversible,h,n_steps,error"
    slopes = json.loads((out / "slopes.json").read_text())
    assert slopes["midpoint"]["order"] == 2
    m = manifest(out)
    assert m["status"] == "completed"
    assert m["subcommand"] == "convergence"
    assert m["finished_at"] is not None
    assert len(m["outputs"]) == 2
    assert (out / "revode.log").exists()


def test_stability_writes_region_table(tmp_path):
    out = tmp_path / "stab"
    path = write_config(tmp_path, {"tableaux": ["euler"], "lambdas": [0.9, 0.99], "n_grid": 20})
    assert main(["stability", "--config", path, "--out", str(out)]) == 0
    header = (out / "region.csv").read_text().splitlines()[0]
    assert header == "tableau,lambda,boundary_h_alpha,boundary_root,marginal"
    assert len((out / "verdict_grid.csv").read_text().splitlines()) == 1 + 2 * 20


def test_gradcheck_pass_and_seed_override(tmp_path):
    out = tmp_path / "gc"
    path = write_config(tmp_path, {"n_steps": 10, "n_obs": 2, "n_seeds": 1, "fd_params": 3})
    assert main(["gradcheck", "--config", path, "--out", str(out), "--seed", "5"]) == 0
    report = json.loads((out / "gradcheck.json").read_text())
    assert report["passed"]
    assert report["per_seed"][0]["seed"] == 5
    assert manifest(out)["seed"] == 5


def test_failed_gradcheck_exits_with_one(tmp_path):
    out = tmp_path / "gc"
    path = write_config(
        tmp_path, {"n_steps": 10, "n_obs": 2, "n_seeds": 1, "fd_params": 3, "corrupt_backward_lambda": 0.9}
    )
    assert main(["gradcheck", "--config", path, "--out", str(out)]) == 1
    assert manifest(out)["status"] == "failed"
    assert not json.loads((out / "gradcheck.json").read_text())["passed"]


def test_bench_repeats_write_summary(tmp_path):
    out = tmp_path / "bench"
    cells = [
        {"engine": "simulate", "n_steps": 50, "budget": 2},
        {"engine": "reversible", "n_steps": 20, "timed": True},
        {"engine": "full_tape", "n_steps": 20},
    ]
    path = write_config(tmp_path, {"cells": cells, "repeats": 2})
    assert main(["bench", "--config", path, "--out", str(out)]) == 0
    rows = read_jsonl(out / "bench.jsonl")
    assert len(rows) == 6
    assert [(r["repeat"], r["index"]) for r in rows] == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]
    assert (out / "bench_summary.txt").exists()
    deviations = json.loads((out / "bench_deviations.json").read_text())
    assert set(deviations["per_group"]) == {c["cell"] for c in rows}


def test_bench_engine_override(tmp_path):
    out = tmp_path / "bench"
    path = write_config(tmp_path, {"cells": [{"engine": "reversible", "n_steps": 10}]})
    assert main(["bench", "--config", path, "--out", str(out), "--engine", "full_tape"]) == 0
    assert read_jsonl(out / "bench.jsonl")[0]["engine"] == "full_tape"


def test_bench_engine_override_skips_incompatible_cells(tmp_path):
    out = tmp_path / "bench"
    cells = [
        {"engine": "full_tape", "n_steps": 10},
        {"engine": "checkpointed", "scheme": "plain", "n_steps": 10, "budget": 2},
        {"engine": "simulate", "n_steps": 50, "budget": 2},
    ]
    path = write_config(tmp_path, {"cells": cells})
    assert main(["bench", "--config", path, "--out", str(out), "--engine", "reversible"]) == 0
    assert [r["engine"] for r in read_jsonl(out / "bench.jsonl")] == ["reversible", "checkpointed", "simulate"]


def test_shipped_bench_config_accepts_every_engine_override():
    shipped = Path(__file__).resolve().parent.parent / "configs" / "bench.json"
    raw = json.loads(shipped.read_text())
    for engine in ("reversible", "full_tape", "checkpointed"):
        args = build_parser().parse_args(["bench", "--engine", engine])
        cfg = load_config(str(shipped), BenchConfig, _overrides(args, raw))
        assert len(cfg.cells) == len(raw["cells"])


def test_train_writes_params_and_log(tmp_path):
    out = tmp_path / "train"
    cfg = {
        "iterations": 3,
        "hidden": 4,
        "log_every": 1,
        "dataset": {"kind": "coupled_oscillator", "n_points": 11, "t_range": [0.0, 1.0]},
    }
    assert main(["train", "--config", write_config(tmp_path, cfg), "--out", str(out)]) == 0
    assert len(read_jsonl(out / "training_log.jsonl")) == 3
    assert (out / "params.params.bin").exists()
    descriptor = json.loads((out / "params.params.json").read_text())
    assert descriptor["dtype"] == "float64"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["iterations"] == 3
    assert len(summary["runs"]) == 1

    steps = (out / "steps.csv").read_text().splitlines()
    assert steps[0] == "n,t,h"
    assert len(steps) == 1 + 10
    counters = json.loads((out / "counters.json").read_text())
    assert counters["n_steps"] == 10
    assert counters["step_evals_forward"] == 20
    assert counters["loss"] >= 0.0
    snapshots = (out / "snapshots.csv").read_text().splitlines()
    assert snapshots[0].startswith("t,y0,")
    assert len(snapshots) == 1 + 11
    assert "steps.csv" in " ".join(manifest(out)["outputs"])


def test_train_repeats_use_seed_directories(tmp_path):
    out = tmp_path / "train"
    cfg = {
        "iterations": 1,
        "hidden": 3,
        "repeats": 2,
        "seed": 10,
        "dataset": {"kind": "coupled_oscillator", "n_points": 6, "t_range": [0.0, 0.5]},
    }
    assert main(["train", "--config", write_config(tmp_path, cfg), "--out", str(out)]) == 0
    assert (out / "seed_10" / "training_log.jsonl").exists()
    assert (out / "seed_11" / "params.params.bin").exists()


def test_parser_lists_every_subcommand():
    parser = build_parser()
    for name in ("convergence", "stability", "gradcheck", "bench", "train", "tableaux"):
        assert parser.parse_args([name]).command == name
