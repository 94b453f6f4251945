import json

import pytest

from brite.cli import main
from brite.harness import read_metrics

TINY = {"grid_size": 48, "n_frames": 4, "tag_periods_mm": [12.0], "fading_presets": ["FA5"],
        "motion_suite": {"nonrigid_seeds": 0, "static": True, "rotation_deg": None},
        "methods": ["sinmod"], "frames_every": 2,
        "method_options": {"brite": {"track": {"iterations": 20}}}}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY))
    return str(p)


def test_simulate_baseline_evaluate_report(tmp_path, config):
    out = tmp_path / "sim"
    assert main(["simulate", "--config", config, "--out", str(out), "--motion", "translation",
                 "--tag-period", "12", "--fraction", "0.2"]) == 0
    seq = out / "sequence.tgsq"
    assert seq.exists()
    assert main(["baseline", "--config", config, "--method", "harp", "--input", str(seq),
                 "--out", str(tmp_path / "harp")]) == 0
    disp = tmp_path / "harp" / "displacements.tgsq"
    assert main(["evaluate", "--input", str(seq), "--displacements", str(disp), "--method", "harp",
                 "--out", str(tmp_path / "ev"), "--frames-every", "1"]) == 0
    recs = read_metrics(tmp_path / "ev" / "metrics.csv")
    assert len(recs) == 4 and recs[0].motion_id == "translation0.2"
    assert main(["report", "--csv", str(tmp_path / "ev" / "metrics.csv"), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "summary.csv").exists()


def test_disentangle_and_track(tmp_path, config):
    out = tmp_path / "sim"
    assert main(["simulate", "--config", config, "--out", str(out), "--motion", "static"]) == 0
    seq = str(out / "sequence.tgsq")
    assert main(["disentangle", "--config", config, "--input", seq, "--out", str(tmp_path / "dis")]) == 0
    assert main(["track", "--config", config, "--input", seq, "--disentangled", str(tmp_path / "dis"),
                 "--out", str(tmp_path / "trk")]) == 0
    assert (tmp_path / "trk" / "displacements.tgsq").exists()


def test_run_twice_is_byte_identical(tmp_path, config):
    for d in ("a", "b"):
        assert main(["run", "--config", config, "--seed", "3", "--out", str(tmp_path / d)]) == 0
    a, b = (tmp_path / d / "metrics.csv" for d in ("a", "b"))
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a" / "report" / "ranking.csv").exists()


def test_bad_config_exits_2(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"methods": []}))
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err
    p.write_text("{broken")
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


def test_missing_input_exits_2(tmp_path):
    assert main(["baseline", "--method", "sinmod", "--input", str(tmp_path / "nope.tgsq"),
                 "--out", str(tmp_path)]) == 2


def test_unknown_subcommand():
    with pytest.raises(SystemExit):
        main(["dance"])
