import json
import math

import pytest

from pitpo.report import (
    load_trajectory,
    render_figures,
    render_report,
    write_trajectory_csv,
)


def _write_jsonl(path, records):
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")


def _records():
    return [
        {
            "iter": 1,
            "best_mse": None,
            "best_nmse": None,
            "best_reward": None,
            "gate_open": False,
            "evals": 8,
        },
        {
            "iter": 2,
            "best_mse": 0.5,
            "best_nmse": 0.25,
            "best_reward": 1.5,
            "gate_open": False,
            "evals": 16,
        },
        {
            "iter": 3,
            "best_mse": 1e-6,
            "best_nmse": 5e-7,
            "best_reward": 12.0,
            "gate_open": True,
            "evals": 24,
        },
    ]


def test_load_trajectory_restores_nulls_as_nan(tmp_path):
    path = tmp_path / "trajectory.jsonl"
    _write_jsonl(path, _records())
    records = load_trajectory(path)
    assert len(records) == 3
    assert math.isnan(records[0]["best_mse"])
    assert records[1]["best_reward"] == 1.5
    assert records[2]["gate_open"] is True


def test_load_trajectory_rejects_malformed_lines(tmp_path):
    path = tmp_path / "trajectory.jsonl"
    path.write_text('{"iter": 1}\nnot json\n')
    with pytest.raises(ValueError, match="line 2"):
        load_trajectory(path)


def test_csv_has_header_and_blank_nan_cells(tmp_path):
    path = tmp_path / "trajectory.jsonl"
    _write_jsonl(path, _records())
    records = load_trajectory(path)
    csv_path = write_trajectory_csv(records, tmp_path / "trajectory.csv")
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == "iter,best_mse,best_nmse,best_reward,gate_open,evals"
    assert lines[1] == "1,,,,0,8"
    assert lines[3].startswith("3,1e-06,5e-07,12.0,1,24")


def test_render_figures_survives_all_nan_columns(tmp_path):
    records = [
        {
            "iter": i,
            "best_mse": float("nan"),
            "best_nmse": float("nan"),
            "best_reward": float("nan"),
            "gate_open": False,
            "evals": 4 * i,
        }
        for i in (1, 2)
    ]
    paths = render_figures(records, tmp_path)
    assert len(paths) == 2
    for p in paths:
        assert p.exists()
        assert p.stat().st_size > 0


def test_render_report_writes_next_to_the_run(tmp_path):
    _write_jsonl(tmp_path / "trajectory.jsonl", _records())
    payload = render_report(tmp_path)
    assert payload["iterations"] == 3
    assert (tmp_path / "trajectory.csv").exists()
    assert (tmp_path / "convergence.png").exists()
    assert (tmp_path / "reward.png").exists()


def test_render_report_separate_out_dir(tmp_path):
    run_dir = tmp_path / "run"
    run_dir.mkdir()
    _write_jsonl(run_dir / "trajectory.jsonl", _records())
    out_dir = tmp_path / "figs"
    payload = render_report(run_dir, out_dir)
    assert payload["csv"] == str(out_dir / "trajectory.csv")
    assert (out_dir / "convergence.png").exists()
    assert not (run_dir / "convergence.png").exists()


def test_render_report_requires_trajectory(tmp_path):
    with pytest.raises(FileNotFoundError):
        render_report(tmp_path)
