import csv

import numpy as np
import pytest

from diffreg.cli import main
from diffreg.geometry import RigidTransform
from diffreg.io import read_correspondences, read_kitti_bin
from diffreg.params import ModelParams


@pytest.fixture(scope="module")
def pair_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("pair")
    assert main(["synth", "--seed", "3", "--out", str(out), "--points", "2500", "--ply"]) == 0
    return out


def test_synth_writes_pair(pair_dir):
    names = {p.name for p in pair_dir.iterdir()}
    assert {"source.bin", "target.bin", "gt.txt"} <= names
    assert any(n.endswith(".ply") for n in names)
    assert len(read_kitti_bin(pair_dir / "source.bin")) == 2500
    RigidTransform.from_line((pair_dir / "gt.txt").read_text().strip())


def test_register_prints_transform_and_metrics(pair_dir, tmp_path, capsys):
    rc = main(["register", "--src", str(pair_dir / "source.bin"), "--dst", str(pair_dir / "target.bin"),
               "--gt", str(pair_dir / "gt.txt"), "--out-transform", str(tmp_path / "t.txt"),
               "--out-corr", str(tmp_path / "c.csv"), "--ply", str(tmp_path / "aligned.ply")])
    assert rc == 0
    lines = capsys.readouterr().out.strip().splitlines()
    RigidTransform.from_line(lines[0])
    metrics = dict(kv.split("=") for kv in lines[1].split())
    assert float(metrics["rte_cm"]) <= 5.0 and float(metrics["rre_deg"]) <= 0.5
    assert (tmp_path / "t.txt").read_text().strip() == lines[0]
    corr = read_correspondences(tmp_path / "c.csv")
    assert set(corr) == {"window", "patch", "point"}
    assert (tmp_path / "aligned.ply").read_text().startswith("ply\n")


def test_register_with_params_file_and_overrides(pair_dir, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("method = ransac\nransac_iters = 2000\n")
    assert main(["params", "--out", str(tmp_path / "w.pdnw")]) == 0
    assert "attention.sq" in ModelParams.load(tmp_path / "w.pdnw").tensors
    capsys.readouterr()
    rc = main(["register", "--src", str(pair_dir / "source.bin"), "--dst", str(pair_dir / "target.bin"),
               "--params", str(tmp_path / "w.pdnw"), "--config", str(cfg), "--set", "polish_iters=0",
               "--gt", str(pair_dir / "gt.txt")])
    assert rc == 0
    assert "rte_cm=" in capsys.readouterr().out


def test_register_reports_errors(tmp_path, capsys):
    rc = main(["register", "--src", str(tmp_path / "nope.bin"), "--dst", str(tmp_path / "nope.bin")])
    assert rc == 2
    assert "error" in capsys.readouterr().err.lower()


def test_unknown_config_key_is_rejected(pair_dir, capsys):
    with pytest.raises(SystemExit):
        main(["register", "--src", str(pair_dir / "source.bin"), "--dst", str(pair_dir / "target.bin"),
              "--set", "bogus=1"])


def test_bench_writes_reports(tmp_path, capsys):
    out = tmp_path / "report.csv"
    assert main(["bench", "--scenes", "1", "--seed", "2", "--out", str(out), "--method", "ransac"]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["pair_id", "rte_cm", "rre_deg", "runtime_ms", "status"] and len(rows) == 1
    cdf = tmp_path / "report_cdf.csv"
    assert cdf.read_text().startswith("metric,value,probability")
    summary = dict(line.split("=", 1) for line in capsys.readouterr().out.strip().splitlines())
    assert summary["pairs"] == "1"
    assert 0.0 <= float(summary["rr_percent"]) <= 100.0


def test_selftest_passes(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 8
