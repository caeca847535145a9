import json
import subprocess
import sys

import pytest

from fisheye_supcon.cli import run
from fisheye_supcon.dataset import read_pool
from fisheye_supcon.model import load_checkpoint
from helpers import pipeline

@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    return base / "a", pipeline(base / "a"), base / "b", pipeline(base / "b")


def test_every_artifact_is_byte_identical(two_runs):
    a_root, a_files, b_root, b_files = two_runs
    assert [p.relative_to(a_root) for p in a_files] == [p.relative_to(b_root) for p in b_files]
    names = {p.name for p in a_files}
    assert {"pool.fepp", "m.feck", "loss.csv", "probe.csv", "sweep.csv", "curve.csv", "tally.csv",
            "center_edge.csv", "brisque_regions.csv", "report.json"} <= names
    for pa, pb in zip(a_files, b_files):
        assert pa.read_bytes() == pb.read_bytes(), pa.name


def test_pipeline_outputs_are_consistent(two_runs):
    root = two_runs[0]
    gen_pool = read_pool(root / "gen" / "pool.fepp")
    extracted = read_pool(root / "pool.fepp")
    assert len(gen_pool) == len(extracted)
    assert [p.distortion_class for p in gen_pool.patches] == [p.distortion_class for p in extracted.patches]
    model, trailer = load_checkpoint(root / "m.feck")
    assert trailer["meta"]["alpha"] == 0.5 and model.config.representation_dim == 16
    probe = (root / "probe.csv").read_text().splitlines()
    assert probe[0].startswith("model,alpha,accuracy") and len(probe) == 3
    assert [r.split(",")[0] for r in probe[1:]] == ["random-init", "pretrained"]
    assert len((root / "sweep.csv").read_text().splitlines()) == 3
    curve = (root / "curve.csv").read_text().splitlines()
    assert curve[0] == "rho,d" and len(curve) == 12 and curve[1] == "0.0,0.0"
    report = json.loads((root / "stats" / "report.json").read_text())
    tally = (root / "gen" / "tally.csv").read_text().splitlines()[1:]
    assert report["objects"] == sum(int(line.rsplit(",", 1)[1]) for line in tally)


def test_distortion_curve_with_calibration_file(tmp_path, capsys):
    (tmp_path / "cal.txt").write_text("a0 = 0.5\na2 = 0.2\na3 = 0.1\na4 = 0.05\n")
    assert run(["distortion-curve", "--cal", str(tmp_path / "cal.txt"), "--samples", "3"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "rho,d" and len(lines) == 4
    assert lines[1] == "0.0,0.5"


def test_config_file_and_flag_precedence(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"samples": 4}))
    assert run(["distortion-curve", "--config", str(tmp_path / "c.json")]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 5
    assert run(["distortion-curve", "--config", str(tmp_path / "c.json"), "--samples", "6"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 7
    (tmp_path / "bad.json").write_text(json.dumps({"sampels": 4}))
    assert run(["distortion-curve", "--config", str(tmp_path / "bad.json")]) == 1
    assert "sampels" in capsys.readouterr().err


def test_exit_codes(tmp_path, capsys):
    assert run(["frobnicate"]) == 2
    assert run(["distortion-curve", "--bogus"]) == 2
    assert run(["probe", "--pool", str(tmp_path / "missing.fepp")]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("feye probe: error:")
    assert run(["distortion-curve", "--samples", "1"]) == 1
    (tmp_path / "p.fepp").write_bytes(b"junk")
    assert run(["pretrain", "--pool", str(tmp_path / "p.fepp"), "--out", str(tmp_path / "m")]) == 1


def test_probe_needs_a_model(two_runs):
    root = two_runs[0]
    assert run(["probe", "--pool", str(root / "pool.fepp")]) == 2


def test_validation_happens_before_writes(tmp_path):
    out = tmp_path / "gen"
    assert run(["gen", "--out", str(out), "--noise-std", "-1"]) == 1
    assert not out.exists()
    assert run(["gen", "--out", str(out), "--scheme", "nope"]) == 1
    assert not out.exists()
    assert run(["distortion-curve", "--out", str(tmp_path / "no" / "c.csv")]) == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "fisheye_supcon", "distortion-curve", "--samples", "2"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert proc.stdout.splitlines()[0] == "rho,d"
