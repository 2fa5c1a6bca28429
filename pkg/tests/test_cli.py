import json

import numpy as np
import pytest

from oaq import io
from oaq.cli import int_list, main


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--n", "600", "--features", "16", "--out", str(d / "train.json"),
                 "--test-out", str(d / "test.json"), "--seed", "1"]) == 0
    assert main(["init-model", "--input-shape", "16", "--hidden", "32", "--out", str(d / "m0.json")]) == 0
    assert main(["train", "--model", str(d / "m0.json"), "--data", str(d / "train.json"), "--epochs", "3",
                 "--out", str(d / "float.json")]) == 0
    return d


def p(d, name):
    return str(d / name)


def test_full_pipeline(work, capsys):
    d = work
    assert main(["quantize", "--model", p(d, "float.json"), "--calib-data", p(d, "train.json"),
                 "--out", p(d, "ptq.json"), "--symmetric-weights"]) == 0
    assert main(["calibrate", "--model", p(d, "ptq.json"), "--data", p(d, "train.json"), "--epochs", "2",
                 "--out", p(d, "cal.json"), "--report", p(d, "cal_report.json")]) == 0
    rep = json.loads((d / "cal_report.json").read_text())
    assert rep["kind"] == "calibration" and rep["trajectory"] and "overflow" in rep["final"]
    capsys.readouterr()
    assert main(["infer", "--model", p(d, "cal.json"), "--input", p(d, "test.json"), "--acc-bits", "32",
                 "--report", p(d, "inf.json")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("predictions: ")
    inf = json.loads((d / "inf.json").read_text())
    assert inf["summary"]["events"] == 0 and inf["summary"]["accuracy"] > 0.8
    assert main(["alpha-report", "--model", p(d, "cal.json"), "--data", p(d, "test.json"),
                 "--out", p(d, "alpha.csv"), "--report", p(d, "alpha.json")]) == 0
    assert (d / "alpha.csv").read_text().startswith("layer,")
    assert main(["inject", "--model", p(d, "cal.json"), "--data", p(d, "test.json"), "--out", p(d, "inj.csv")]) == 0
    lines = (d / "inj.csv").read_text().splitlines()
    assert lines[0] == "ratio,metric,events,steps,layers" and len(lines) == 4


def test_reports_are_byte_identical_for_a_seed(work):
    d = work
    outs = []
    for tag, threads in (("a", "1"), ("b", "2")):
        o = d / tag
        o.mkdir()
        assert main(["calibrate", "--model", p(d, "float.json"), "--data", p(d, "train.json"), "--epochs", "1",
                     "--seed", "3", "--out", p(o, "c.json"), "--report", p(o, "r.json"), "--threads", threads]) == 0
        assert main(["inject", "--model", p(o, "c.json"), "--data", p(d, "test.json"), "--seed", "3",
                     "--ratios", "0.01", "--out", p(o, "i.csv"), "--threads", threads]) == 0
        outs.append([(o / f).read_bytes() for f in ("c.json", "c.bin", "r.json", "i.csv")])
    assert outs[0] == outs[1]


def test_strict_overflow_exit(work, tmp_path):
    g = io.load_model(work / "float.json")
    for s in g.slots.values():
        s.alpha = 1.0
    x, y, _ = io.load_data(work / "test.json")
    # large inputs push every accumulation out of int16
    io.save_data(tmp_path / "big.json", x * 50, y)
    from oaq.qoat import observe_only

    observe_only(g, x * 50)
    io.save_model(g, tmp_path / "m.json")
    args = ["infer", "--model", str(tmp_path / "m.json"), "--input", str(tmp_path / "big.json"), "--acc-bits", "16"]
    code = main(args + ["--strict"])
    inf_events = main(args)
    assert inf_events == 0
    assert code == 2


def test_simulate_and_cost(tmp_path, capsys):
    out = tmp_path / "mc.csv"
    assert main(["simulate-overflow", "--bits", "6..8", "--depths", "9,64", "--trials", "2000",
                 "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "bits,depth,trials,non_overflow_ratio,std_error" and len(lines) == 7
    capsys.readouterr()
    assert main(["cost-model", "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["ratio"] == 2.0


@pytest.mark.parametrize("argv", [
    ["infer", "--model", "missing.json", "--input", "x.json"],
    ["simulate-overflow", "--bits", "12", "--out", "x.csv"],
    ["cost-model", "--register-bits", "100"],
    ["no-such-command"],
    ["simulate-overflow", "--bits", "", "--out", "x.csv"],
])
def test_usage_errors_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    try:
        code = main(argv)
    except SystemExit as exc:
        code = exc.code
    assert code == 1


@pytest.mark.parametrize("doc", [{"bogus": 1}, {"momentum": 0.9}, {"calib": {"lr": 1}}, {"lr_i": -1}, [1]])
def test_bad_config_exits_1(work, tmp_path, doc):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(doc))
    assert main(["calibrate", "--model", p(work, "float.json"), "--out", str(tmp_path / "o.json"),
                 "--data", p(work, "train.json"), "--config", str(cfg)]) == 1


def test_unlabelled_data_exits_1(work, tmp_path):
    base = ["calibrate", "--model", p(work, "float.json"), "--out", str(tmp_path / "o.json")]
    x, _, _ = io.load_data(work / "train.json")
    io.save_data(tmp_path / "nolabels.json", x)
    assert main(base + ["--data", str(tmp_path / "nolabels.json")]) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_training_exits_3(work, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"lr": 1e12, "train": {"momentum": 0.0}}))
    assert main(["calibrate", "--model", p(work, "float.json"), "--data", p(work, "train.json"), "--epochs", "3",
                 "--config", str(cfg), "--out", str(tmp_path / "o.json")]) == 3


def test_int_list():
    assert int_list("4..6,9") == [4, 5, 6, 9]
