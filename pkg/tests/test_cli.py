import csv
import io
import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from c3owd import biwkv, suites
from c3owd.cli import main
from c3owd.numeric import load_tensor


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def payload(text):
    body = json.loads(text)
    man = body.pop("manifest")
    return man, body


def test_oracle_is_reproducible(capsys):
    c1, o1, _ = run(capsys, "oracle", "--op", "biwkv", "--trials", "10", "--seed", "0")
    c2, o2, _ = run(capsys, "oracle", "--op", "biwkv", "--trials", "10", "--seed", "0")
    assert c1 == c2 == 0
    m1, b1 = payload(o1)
    m2, b2 = payload(o2)
    assert json.dumps(b1) == json.dumps(b2)
    assert m1["command"] == "oracle" and m1["seed"] == 0 and m1["flags"]["trials"] == 10
    assert {"started", "finished", "version"} <= set(m1)
    res = b1["results"]["biwkv"]
    assert res["trials"] == 10 and res["passed"] and res["max_rel_err"] <= 1e-10


def test_oracle_size_flags(capsys):
    code, out, _ = run(capsys, "oracle", "--op", "biwkv", "--trials", "5", "--tmax", "3", "--cmax", "1")
    assert code == 0 and payload(out)[0]["flags"]["tmax"] == 3


def test_env_seed_overrides(capsys, monkeypatch):
    monkeypatch.setenv("C3_SEED", "7")
    code, out, _ = run(capsys, "oracle", "--op", "biwkv", "--trials", "2", "--seed", "0")
    assert code == 0 and payload(out)[0]["seed"] == 7
    monkeypatch.setenv("C3_SEED", "seven")
    assert run(capsys, "oracle", "--trials", "2")[0] == 2


def test_unknown_command_is_usage_error(capsys):
    code, _, err = run(capsys, "frobnicate")
    assert code == 2 and "usage" in err


def test_gradcheck_passes_on_small_run(capsys):
    code, out, _ = run(capsys, "gradcheck", "--module", "biwkv,info_nce", "--instances", "2")
    _, body = payload(out)
    assert code == 0 and body["passed"] and set(body["modules"]) == {"biwkv", "info_nce"}


def test_gradcheck_detects_corrupted_gradient(capsys, monkeypatch):
    real = biwkv.biwkv_backward

    def corrupted(*args):
        dk, dv, dw, du = real(*args)
        return dk, dv * 1.01, dw, du
    monkeypatch.setattr(biwkv, "biwkv_backward", corrupted)
    code, out, _ = run(capsys, "gradcheck", "--module", "all", "--instances", "1")
    _, body = payload(out)
    assert code == 1
    assert not body["modules"]["biwkv"]["passed"]
    assert body["modules"]["biwkv"]["worst_param"] == "v"


def test_gradcheck_unknown_module(capsys):
    assert run(capsys, "gradcheck", "--module", "nope")[0] == 2


def test_bench_schema(capsys):
    code, out, _ = run(capsys, "bench", "--op", "biwkv", "--sizes", "32,64,128", "--reps", "1")
    assert code == 0
    lines = [l for l in out.splitlines() if not l.startswith("#")]
    rows = list(csv.DictReader(io.StringIO("\n".join(lines))))
    assert [r["T"] for r in rows] == ["32", "64", "128"]
    assert set(rows[0]) == {"T", "scan_ms", "naive_ms"}
    assert all(float(r["scan_ms"]) > 0 and float(r["naive_ms"]) > 0 for r in rows)


def test_scaling_ratio_rule():
    rows = [{"T": 4096, "scan_ms": 10.0, "naive_ms": 100.0}, {"T": 8192, "scan_ms": 20.0, "naive_ms": 400.0}]
    assert suites.scaling_ratios(rows)["passed"]
    rows[1]["scan_ms"] = 30.0
    assert not suites.scaling_ratios(rows)["passed"]
    assert suites.scaling_ratios(rows[:1]) == {}


def test_dump_roundtrip(capsys, tmp_path):
    path = tmp_path / "x.csv"
    assert run(capsys, "dump", "--shape", "2x3", "--out", str(path))[0] == 0
    lines = path.read_text().splitlines()
    assert lines[0] == "shape=2x3"
    assert sum(len(l.split(",")) for l in lines[1:]) == 6
    x = load_tensor(path)
    from c3owd.numeric import make_rng
    assert_array_equal(x, make_rng(0).normal(size=(2, 3)))
    assert run(capsys, "dump", "--source", "biwkv", "--shape", "5x2", "--out", str(path))[0] == 0
    assert load_tensor(path).shape == (5, 2)


def test_dump_errors(capsys, tmp_path):
    assert run(capsys, "dump", "--shape", "", "--out", str(tmp_path / "a.csv"))[0] == 2
    assert run(capsys, "dump", "--shape", "0x3", "--out", str(tmp_path / "a.csv"))[0] == 2
    assert run(capsys, "dump", "--shape", "2x3")[0] == 2
    assert run(capsys, "dump", "--shape", "2x3", "--out", str(tmp_path / "missing" / "a.csv"))[0] == 3


def test_report_to_file(capsys, tmp_path):
    path = tmp_path / "r.json"
    assert run(capsys, "oracle", "--op", "queue", "--trials", "3", "--out", str(path))[0] == 0
    man, body = payload(path.read_text())
    assert body["results"]["queue"]["passed"] and man["flags"]["out"] == str(path)


def test_contrast_demo(capsys):
    code, out, _ = run(capsys, "contrast-demo", "--steps", "3", "--queue-size", "16")
    _, body = payload(out)
    assert code == 0 and len(body["steps"]) == 3
    assert body["steps"][-1]["queue_fill"] > 0


def test_ema_verify_reports_stated_and_corrected(capsys):
    code, out, _ = run(capsys, "ema-verify", "--trials", "2", "--steps", "50", "--dim", "3",
                       "--loss-runs", "1", "--loss-steps", "5", "--momentum", "0.9")
    _, body = payload(out)
    assert code == 1 and body["lag_violations"] == 2
    assert body["corrected"]["lag_violations"] == 0


def test_train_demo_with_config(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(dict(stage1_steps=3, stage2_steps=2, n_train=2, n_eval=2, n_probe=2,
                                   queue_size=8, stage2_lr=0.0)))
    code, out, _ = run(capsys, "train-demo", "--config", str(cfg))
    _, body = payload(out)
    assert code == 0 and body["pass"] and len(body["stage2"]) == 2
    assert "halved" in body["stage1"]
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run(capsys, "train-demo", "--config", str(cfg))[0] == 2
