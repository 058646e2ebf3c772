import json

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from propunlearn.cli import main
from propunlearn.errors import ConfigError, RejectedInput
from propunlearn.report import DEFAULTS, boxplot_stats, parse_config, run_experiment, validate_config

TINY = {
    "experiment": "attack_baseline",
    "seed": 0,
    "dataset": {"source": "synth_census", "rows": 2000, "test_rows": 300},
    "properties": [
        {"name": "1:1", "kind": "class_ratio", "attribute": "sex", "ratios": {"0": 0.5, "1": 0.5}},
        {"name": "2:1", "kind": "class_ratio", "attribute": "sex", "ratios": {"0": 2 / 3, "1": 1 / 3}},
    ],
    "architecture": {"widths": [4, 2], "activations": ["relu", "softmax"]},
    "training": {"learning_rate": 0.05, "batch_size": 32, "epochs": 1},
    "aux_size": 200,
    "counts": {"shadows": 4, "targets": 2},
    "meta": {"epochs": 2, "batch_size": 4},
}


def write_cfg(tmp_path, data, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data), encoding="utf-8")
    return p


# ---------------------------------------------------------------------------
# box plots (hand-computed fixtures)

def test_boxplot_one_to_nine():
    b = boxplot_stats(range(1, 10))
    assert (b.q1, b.median, b.q3, b.mean) == (3.0, 5.0, 7.0, 5.0)
    assert (b.whisker_low, b.whisker_high, b.outliers) == (1.0, 9.0, [])


def test_boxplot_single_outlier():
    # q1 = 1 + 0.75, q3 = 3 + 0.25 * 97, upper fence 27.25 + 1.5 * 25.5 = 65.5
    b = boxplot_stats([1, 2, 3, 100])
    assert (b.q1, b.median, b.q3) == (1.75, 2.5, 27.25)
    assert (b.whisker_low, b.whisker_high, b.outliers) == (1.0, 3.0, [100.0])
    assert b.mean == 26.5


def test_boxplot_all_equal_and_empty():
    b = boxplot_stats([4.0, 4.0, 4.0])
    assert (b.q1, b.median, b.q3, b.whisker_low, b.whisker_high, b.outliers) == (4.0, 4.0, 4.0, 4.0, 4.0, [])
    with pytest.raises(RejectedInput):
        boxplot_stats([])


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=60))
def test_boxplot_invariants(values):
    b = boxplot_stats(values)
    iqr = b.q3 - b.q1
    assert b.q1 <= b.median <= b.q3
    assert b.whisker_low >= b.q1 - 1.5 * iqr and b.whisker_high <= b.q3 + 1.5 * iqr
    assert all(o < b.whisker_low or o > b.whisker_high for o in b.outliers)
    assert len(b.outliers) + np.sum((np.array(values) >= b.whisker_low) & (np.array(values) <= b.whisker_high)) == len(values)


# ---------------------------------------------------------------------------
# configuration

def test_minimal_config_echoes_defaults():
    cfg = parse_config(TINY)
    assert cfg.experiment == "attack_baseline" and cfg.seed == 0
    assert cfg["meta"]["pooling"] == DEFAULTS["meta"]["pooling"]
    assert cfg["meta"]["epochs"] == 2 and cfg["meta"]["split"] == DEFAULTS["meta"]["split"]
    assert cfg["unlearn"] == DEFAULTS["unlearn"]


def test_missing_path_names_the_field(tmp_path):
    data = {**TINY, "dataset": {"source": "idx", "images": "nope.idx"}}
    with pytest.raises(ConfigError) as err:
        parse_config(data, tmp_path)
    text = "\n".join(err.value.errors)
    assert "dataset.images" in text and "dataset.labels" in text


def test_negative_count_and_unknown_field():
    with pytest.raises(ConfigError) as err:
        parse_config({**TINY, "counts": {"shadows": -1, "targets": 2}, "colour": 1})
    text = "\n".join(err.value.errors)
    assert "counts.shadows" in text and "colour: unknown field" in text


def test_missing_seed_and_bad_experiment():
    data = {k: v for k, v in TINY.items() if k != "seed"}
    with pytest.raises(ConfigError) as err:
        parse_config({**data, "experiment": "bake"})
    assert any(e.startswith("seed") for e in err.value.errors)
    assert any(e.startswith("experiment") for e in err.value.errors)


def test_validate_config_reports_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        validate_config(tmp_path / "absent.yaml")


def test_shipped_configs_validate():
    from pathlib import Path
    paths = sorted((Path(__file__).parent.parent / "configs").glob("*.yaml"))
    assert paths
    for p in paths:
        validate_config(p)


# ---------------------------------------------------------------------------
# runs

def _without_timings(run_dir):
    rep = json.loads((run_dir / "report.json").read_text(encoding="utf-8"))
    rep.pop("timings")
    return rep


def test_report_is_deterministic_except_timings(tmp_path):
    a = run_experiment(parse_config(TINY), tmp_path / "a")
    b = run_experiment(parse_config(TINY), tmp_path / "b")
    assert _without_timings(a.run_dir) == _without_timings(b.run_dir)
    assert len(a.records) == 2 * TINY["counts"]["targets"]
    assert {"meta_heldout_accuracy", "attack_accuracy"} <= set(a.aggregates)
    assert (a.run_dir / "config.yaml").exists() and (a.run_dir / "models").is_dir()
    assert a.run_dir.parent.name == "runs" and a.run_dir.name.endswith(a.config_digest[:12])


def test_unlearn_run_writes_traces_and_series(tmp_path):
    cfg = parse_config({**TINY, "experiment": "unlearn_single", "unlearn": {"loss": "kl", "max_rounds": 5}})
    rep = run_experiment(cfg, tmp_path)
    traces = sorted((rep.run_dir / "traces").iterdir())
    assert len(traces) == 4
    lines = (rep.run_dir / "unlearn_single.csv").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 5 and lines[0].startswith("model_id,")
    assert "rounds" in rep.boxplots


# ---------------------------------------------------------------------------
# CLI

def test_cli_exit_codes(tmp_path, capsys):
    good = write_cfg(tmp_path, TINY)
    assert main(["attack", "--config", str(good), "--out", str(tmp_path / "o")]) == 0
    assert "attack_accuracy" in json.loads(capsys.readouterr().out)

    bad = write_cfg(tmp_path, {**TINY, "seed": -1}, "bad.yaml")
    assert main(["attack", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "config error: seed" in capsys.readouterr().err

    # right experiment, wrong subcommand
    assert main(["tsne", "--config", str(good), "--out", str(tmp_path / "o")]) == 2

    # validates, but the output width does not match the two-class task
    broken = write_cfg(tmp_path, {**TINY, "architecture": {"widths": [4, 3], "activations": ["relu", "softmax"]}}, "b.yaml")
    assert main(["attack", "--config", str(broken), "--out", str(tmp_path / "f")]) == 1
    assert "error:" in capsys.readouterr().err
    assert (tmp_path / "f" / "partial_report.json").exists()


def test_cli_report_summarises_runs(tmp_path, capsys):
    good = write_cfg(tmp_path, TINY)
    assert main(["attack", "--config", str(good), "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    run = next((tmp_path / "runs").iterdir())
    rcfg = write_cfg(tmp_path, {"runs": [str(run)]}, "report.yaml")
    assert main(["report", "--config", str(rcfg), "--out", str(tmp_path / "summary")]) == 0
    rows = json.loads((tmp_path / "summary" / "summary.json").read_text(encoding="utf-8"))
    assert rows[0]["experiment"] == "attack_baseline" and rows[0]["records"] == 4
    missing = write_cfg(tmp_path, {"runs": ["nowhere"]}, "r2.yaml")
    assert main(["report", "--config", str(missing), "--out", str(tmp_path / "s2")]) == 2
