import csv
import json

import numpy as np
import pytest

from dosgame.cli import EVAL_COLUMNS, main
from dosgame.experiments import BASELINE_COLUMNS, CURVE_COLUMNS

TINY = {
    "trace": {"mean_load": 5.0, "n_intervals": 800, "seed": 1},
    "corpus": {"train_offsets": [0.0], "test_offsets": [200.0], "benign_runs": 1, "run_seconds": 40.0,
               "adados_episodes": 1},
    "env": {"episode_slots": 20},
    "ppo": {"hidden": [16, 16]},
    "seeds": [0], "teacher_episodes": 3, "student_episodes": 2, "matrix_episodes": 2, "eval_episodes": 2,
}


def _header(path):
    with open(path, newline="") as fh:
        return tuple(next(csv.reader(fh)))


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """A tiny config plus a detector and teacher shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    assert _run("train-detector", "--config", cfg, "--seed", 0, "--out-dir", root / "d") == 0
    assert _run("train-teacher", "--config", cfg, "--detector", root / "d" / "detector.json",
                "--out-dir", root / "t") == 0
    return root, cfg


def test_gen_trace_length_and_mean(tmp_path):
    assert _run("gen-trace", "--mean-load", 3.0, "--n-intervals", 200, "--seed", 3, "--out-dir", tmp_path) == 0
    rows = _rows(tmp_path / "trace.csv")
    assert len(rows) == 200
    # volumes are Mbit per 0.5 s interval; the load is a rate
    rate = np.array([float(r["tcp_mbit"]) + float(r["udp_mbit"]) for r in rows]) / 0.5
    assert abs(rate.mean() - 3.0) / 3.0 < 0.10
    assert _header(tmp_path / "trace.csv") == ("t_s", "tcp_mbit", "udp_mbit")


def test_gen_trace_same_seed_same_bytes(tmp_path):
    for d in ("a", "b"):
        assert _run("gen-trace", "--n-intervals", 100, "--seed", 9, "--out-dir", tmp_path / d) == 0
    assert (tmp_path / "a" / "trace.csv").read_bytes() == (tmp_path / "b" / "trace.csv").read_bytes()


def test_gen_trace_zero_load_is_all_zero(tmp_path):
    assert _run("gen-trace", "--mean-load", 0.0, "--n-intervals", 50, "--out-dir", tmp_path) == 0
    rows = _rows(tmp_path / "trace.csv")
    assert all(float(r["tcp_mbit"]) == 0.0 and float(r["udp_mbit"]) == 0.0 for r in rows)


def test_manifest_records_hashes_and_config(work):
    root, _ = work
    doc = json.loads((root / "d" / "manifest.json").read_text())
    assert doc["command"] == "train-detector"
    assert doc["seeds"] == [0]
    assert set(doc["artifacts"]) == {"detector", "corpus", "report"}
    assert len(doc["config_hash"]) == 16
    assert doc["config"]["trace"]["n_intervals"] == 800


def test_train_detector_is_deterministic(work, tmp_path):
    root, cfg = work
    assert _run("train-detector", "--config", cfg, "--seed", 0, "--out-dir", tmp_path) == 0
    assert (tmp_path / "detector_report.json").read_bytes() == (root / "d" / "detector_report.json").read_bytes()
    assert (tmp_path / "detector.json").read_bytes() == (root / "d" / "detector.json").read_bytes()


def test_train_detector_report_fields(work):
    root, _ = work
    rep = json.loads((root / "d" / "detector_report.json").read_text())
    assert rep["source"] == "ldos" and rep["kind"] == "gbdt"
    for key in ("accuracy", "recall", "false_positive_rate"):
        assert 0.0 <= rep[key] <= 1.0


def test_mixed_detector_records_source(work, tmp_path):
    root, cfg = work
    assert _run("train-detector", "--config", cfg, "--source", "mixed", "--kind", "knn",
                "--teacher", root / "t" / "teacher_seed0.npz", "--out-dir", tmp_path) == 0
    rep = json.loads((tmp_path / "detector_report.json").read_text())
    assert rep["source"] == "mixed" and rep["kind"] == "knn"


def test_baseline_table_shape(work, tmp_path):
    root, cfg = work
    assert _run("baseline", "--config", cfg, "--detector", root / "d" / "detector.json", "--out-dir", tmp_path) == 0
    assert _header(tmp_path / "baseline.csv") == BASELINE_COLUMNS
    rows = _rows(tmp_path / "baseline.csv")
    assert len(rows) == 9
    assert all(float(r["trigger_rate"]) == 1.0 for r in rows)
    # the cheapest schedule: 0.15 s at 15 Mbps
    assert float(rows[0]["cost_per_cycle"]) == pytest.approx(2.25)


def test_golden_headers(work, tmp_path):
    root, cfg = work
    assert _header(root / "t" / "teacher_curve_seed0.csv") == CURVE_COLUMNS
    det, agent = root / "d" / "detector.json", root / "t" / "teacher_seed0.npz"
    assert _run("eval", "--config", cfg, "--detector", det, "--agent", agent, "--out-dir", tmp_path / "e") == 0
    assert _header(tmp_path / "e" / "eval.csv") == ("seed", *EVAL_COLUMNS)
    assert _run("noise-sweep", "--config", cfg, "--detector", det, "--agent", agent, "--sigmas", 0, 0.1,
                "--out-dir", tmp_path / "n") == 0
    assert _header(tmp_path / "n" / "noise_sweep.csv") == ("seed", "sigma", *EVAL_COLUMNS)
    assert len(_rows(tmp_path / "n" / "noise_sweep.csv")) == 2 * TINY["eval_episodes"]
    assert _run("train-student", "--config", cfg, "--detector", det, "--teacher", agent,
                "--out-dir", tmp_path / "s") == 0
    assert _header(tmp_path / "s" / "student_curves.csv") == ("agent", *CURVE_COLUMNS)
    rows = _rows(tmp_path / "s" / "student_curves.csv")
    assert sorted({r["agent"] for r in rows}) == ["student", "teacher"]


def test_detector_matrix_lists_three_detectors(work, tmp_path):
    root, cfg = work
    assert _run("detector-matrix", "--config", cfg, "--teacher", root / "t" / "teacher_seed0.npz",
                "--out-dir", tmp_path) == 0
    assert _header(tmp_path / "detector_matrix.csv") == ("detector", *CURVE_COLUMNS)
    assert {r["detector"] for r in _rows(tmp_path / "detector_matrix.csv")} == {"ldos", "adados", "mixed"}


def test_rerun_reproduces_outputs(work, tmp_path):
    root, cfg = work
    det, agent = root / "d" / "detector.json", root / "t" / "teacher_seed0.npz"
    assert _run("eval", "--config", cfg, "--detector", det, "--agent", agent, "--out-dir", tmp_path / "a") == 0
    assert _run("rerun", "--manifest", tmp_path / "a" / "manifest.json", "--out-dir", tmp_path / "b") == 0
    assert (tmp_path / "a" / "eval.csv").read_bytes() == (tmp_path / "b" / "eval.csv").read_bytes()
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma["sha256"] == mb["sha256"]


def _error(capsys):
    err = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(err)


def test_missing_prerequisite_is_named(tmp_path, capsys):
    assert _run("baseline", "--out-dir", tmp_path) == 1
    doc = _error(capsys)
    assert doc["command"] == "baseline"
    assert "detector" in doc["message"]


def test_missing_file_is_reported(tmp_path, capsys):
    assert _run("eval", "--detector", tmp_path / "nope.json", "--agent", tmp_path / "x.npz",
                "--out-dir", tmp_path) == 1
    assert "nope.json" in _error(capsys)["message"]


@pytest.mark.parametrize("cfg, needle", [
    ({"reward": {"b_th": 20}}, "b_th"),
    ({"ldos": {"schedules": [[2.0, 1.0, 10.0]]}}, "period"),
    ({"env": {"n_partial": 12, "n_delay": 10}}, "n_partial"),
    ({"bogus": 1}, "bogus"),
])
def test_invalid_config_rejected(tmp_path, capsys, cfg, needle):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(cfg))
    assert _run("gen-trace", "--config", path, "--out-dir", tmp_path / "o") == 1
    doc = _error(capsys)
    assert needle in doc["message"]
    assert not (tmp_path / "o" / "manifest.json").exists()
