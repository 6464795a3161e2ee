from __future__ import annotations

import pytest

from pbench import signing
from pbench.cli import main
from pbench.pipeline import NO_VERIFY_BANNER
from pbench.provenance import ABORT_LINE

SMALL = """\
count.Car = 300
count.Tram = 40
count.Truck = 60
count.Bus = 30
count.Motorcycle = 30
count.Bicycle = 30
hidden = 16
epochs = 2
learning_rate = 0.05
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "small.conf"
    p.write_text(SMALL)
    return str(p)


def pb(*args):
    return main([str(a) for a in args])


def test_step_by_step_workflow(tmp_path, cfg, capsys):
    run, keys = tmp_path / "run", tmp_path / "keys"
    assert pb("--config", cfg, "--out", run, "gen") == 0
    assert pb("--out", keys, "keygen", "--scheme", "Ed25519") == 0
    assert sorted(p.name for p in keys.iterdir())[:2] == ["annotator.key", "annotator.pub"]
    for stage in ("raw", "annotation"):
        assert pb("--out", run, "sign", "--stage", stage, "--keys", keys) == 0
    assert pb("--out", run, "commit") == 0
    for stage in ("features", "splits"):
        assert pb("--out", run, "sign", "--stage", stage, "--keys", keys) == 0
    assert pb("--config", cfg, "--out", run, "train") == 0
    assert pb("--out", run, "sign", "--stage", "model", "--keys", keys) == 0
    capsys.readouterr()
    assert pb("verify-chain", run) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 5 and "chain OK" in out
    assert pb("--config", cfg, "--out", run, "eval", "--triggered") == 0
    assert "accuracy" in capsys.readouterr().out
    assert (run / "metrics.tsv").exists()


def test_cli_attack_after_signing_aborts_training(tmp_path, cfg, capsys):
    run, keys = tmp_path / "run", tmp_path / "keys"
    pb("--config", cfg, "--out", run, "gen")
    pb("--out", keys, "keygen", "--scheme", "Ed25519")
    for stage in ("raw", "annotation"):
        pb("--out", run, "sign", "--stage", stage, "--keys", keys)
    pb("--out", run, "commit")
    for stage in ("features", "splits"):
        pb("--out", run, "sign", "--stage", stage, "--keys", keys)
    assert pb("--config", cfg, "--out", run, "attack", "--kind", "backdoor_patch", "--rate", "0.05") == 0
    capsys.readouterr()
    assert pb("--config", cfg, "--out", run, "train") == 2
    assert capsys.readouterr().err.splitlines()[-1] == ABORT_LINE


def test_run_clean_then_verify(tmp_path, cfg, capsys):
    run = tmp_path / "run"
    assert pb("--config", cfg, "--out", run, "run") == 0
    assert pb("verify-chain", run) == 0


def test_run_label_flip_exits_2_with_exact_line(tmp_path, cfg, capsys):
    code = pb("--config", cfg, "--out", tmp_path / "run", "run", "--kind", "label_flip", "--rate", "0.05")
    assert code == 2
    err = capsys.readouterr().err
    assert err == "✗ SIGNATURE INVALID AT STAGE annotation --- ABORT.\n"


def test_run_backdoor_exits_2_with_merkle_line(tmp_path, cfg, capsys):
    code = pb("--config", cfg, "--out", tmp_path / "run", "run", "--kind", "backdoor_patch", "--rate", "0.05")
    assert code == 2
    assert capsys.readouterr().err == ABORT_LINE + "\n"


def test_no_verify_prints_banner_and_completes(tmp_path, cfg, capsys):
    code = pb("--config", cfg, "--out", tmp_path / "run", "--no-verify", "run", "--kind", "label_flip",
              "--rate", "0.05")
    assert code == 0
    cap = capsys.readouterr()
    assert NO_VERIFY_BANNER in cap.err
    assert "poisoned 24 record(s)" in cap.out  # floor(0.05 * 490)


def test_verify_chain_mutated_manifest(tmp_path, cfg, capsys):
    run = tmp_path / "run"
    pb("--config", cfg, "--out", run, "run")
    p = signing.manifest_path(run, "raw")
    data = bytearray(p.read_bytes())
    data[-3] ^= 1
    p.write_bytes(bytes(data))
    capsys.readouterr()
    assert pb("verify-chain", run) == 2
    assert capsys.readouterr().err == "✗ SIGNATURE INVALID AT STAGE raw --- ABORT.\n"


def test_usage_errors_exit_1(tmp_path, capsys):
    assert pb("gen") == 1  # no --out
    assert pb("--config", tmp_path / "missing.conf", "--out", tmp_path, "gen") == 1
    bad = tmp_path / "bad.conf"
    bad.write_text("rows\n")
    assert pb("--config", bad, "--out", tmp_path, "gen") == 1
    assert pb("nonsense") == 1
    assert pb("--out", tmp_path, "keygen", "--scheme", "none") == 1


def test_help_exits_0(capsys):
    assert pb("--help") == 0
    assert "verify-chain" in capsys.readouterr().out


def test_report_renders_from_sweep(tmp_path, cfg, capsys):
    out = tmp_path / "sweep"
    code = pb("--config", cfg, "--out", out, "sweep", "--rates", "0,0.05", "--seeds", "1,2",
              "--kinds", "label_flip", "--scheme", "Ed25519")
    assert code == 0
    first = capsys.readouterr().out
    assert pb("report", out) == 0
    assert capsys.readouterr().out == first
    assert (out / "cells.tsv").exists() and (out / "report.txt").read_text() == first


def test_detect_matrix_via_cli(tmp_path, cfg, capsys):
    base, cur = tmp_path / "base", tmp_path / "cur"
    pb("--config", cfg, "--out", base, "run")
    pb("--config", cfg, "--out", cur, "--no-verify", "run", "--kind", "backdoor_patch", "--rate", "0.01")
    capsys.readouterr()
    pgm = tmp_path / "flagged.pgm"
    assert pb("--config", cfg, "detect", "--baseline", base, "--current", cur, "--audit-pgm", pgm) == 0
    out = capsys.readouterr().out
    row = out.strip().splitlines()[-1].split("\t")
    assert row[0] == "cur" and row[4] == "yes"
    assert pgm.read_bytes().startswith(b"P5\n")
