import math

import numpy as np
import pytest

from oaq import data, lab, qoat
from oaq.graph import mlp, small_cnn
from oaq.lab import InjectionSpec, McConfig, alpha_report, effective_bits, inject_overflow, mc_non_overflow_ratio, select_layers


# --- Monte Carlo -------------------------------------------------------------------


def test_mc_is_deterministic_and_thread_invariant():
    cfg = McConfig(bits=(7, 8), depths=(64, 256), trials=10_000, seed=5)
    a = mc_non_overflow_ratio(cfg)
    assert a == mc_non_overflow_ratio(cfg, threads=4)
    assert a == mc_non_overflow_ratio(cfg)
    assert a != mc_non_overflow_ratio(McConfig(bits=(7, 8), depths=(64, 256), trials=10_000, seed=6))


def test_mc_small_operands_never_overflow():
    # 2-bit products are at most 4, so nine of them cannot leave int16
    assert mc_non_overflow_ratio(McConfig(bits=(2,), depths=(9,), trials=2000)) == {(2, 9): 1.0}


def test_mc_counts_against_brute_force():
    cfg = McConfig(bits=(8,), depths=(64,), trials=5000, seed=1)
    r = mc_non_overflow_ratio(cfg)[(8, 64)]
    over = 0
    for block in range(math.ceil(cfg.trials / lab.MC_BLOCK)):
        n = min(lab.MC_BLOCK, cfg.trials - block * lab.MC_BLOCK)
        rng = lab._substream(cfg.seed, 8, 64, block)
        a = lab.sample_operands(rng, 8, (n, 64))
        b = lab.sample_operands(rng, 8, (n, 64))
        for i in range(n):
            s = 0
            for k in range(64):
                s += int(a[i, k]) * int(b[i, k])
                if not -32768 <= s <= 32767:
                    over += 1
                    break
    assert r == 1.0 - over / cfg.trials


def test_truncnormal_stays_in_range():
    x = lab.sample_operands(np.random.default_rng(0), 4, (10_000,), "truncnormal")
    assert x.min() >= -8 and x.max() <= 7
    assert abs(x.mean()) < 0.1


def test_mc_wide_accumulator_is_clean():
    t = mc_non_overflow_ratio(McConfig(bits=(8,), depths=(1024,), trials=500, accumulator_bits=32))
    assert t[(8, 1024)] == 1.0


@pytest.mark.parametrize("kw", [dict(trials=0), dict(depths=(0,)), dict(bits=(9,)), dict(accumulator_bits=24),
                                dict(distribution="cauchy")])
def test_mc_config_validation(kw):
    with pytest.raises(ValueError):
        McConfig(**kw)


def test_mc_rows_report_standard_error():
    cfg = McConfig(bits=(8,), depths=(64,), trials=1000)
    rows = lab.mc_rows(cfg, {(8, 64): 0.25})
    assert rows[0]["std_error"] == pytest.approx(math.sqrt(0.25 * 0.75 / 1000))


# --- selectors -------------------------------------------------------------------


def test_selectors():
    g = mlp(4, [8, 8, 8], 3)
    assert select_layers(g, "all") == ["fc0", "fc1", "fc2", "fc3"]
    assert select_layers(g, "first,last") == ["fc0", "fc3"]
    assert select_layers(g, "second, penultimate") == ["fc1", "fc2"]
    assert select_layers(g, "L2,fc2,fc0") == ["fc2", "fc0"]
    for bad in ("L9", "conv0", "", "mid"):
        with pytest.raises(ValueError):
            select_layers(g, bad)
    with pytest.raises(ValueError):
        select_layers(mlp(4, [], 3), "second")


def test_injection_spec_validation():
    for kw in (dict(ratio=1.5), dict(mode="clip"), dict(level="weights")):
        with pytest.raises(ValueError):
            InjectionSpec(**kw)


# --- injection sweep ---------------------------------------------------------------


@pytest.fixture(scope="module")
def classifier():
    x, y = data.gaussian_blobs(768, features=16, seed=1)
    g = mlp(16, [64], 10, seed=1)
    qoat.train_toy(g, (x[:512], y[:512]), 5, train=qoat.TrainConfig(batch_size=64))
    return g, (x[512:], y[512:])


def test_injection_sweep_endpoints(classifier):
    g, ev = classifier
    # at ratio 1 an even depth adds 2^15 an even number of times, which wraps back to clean
    rows = inject_overflow(g, InjectionSpec("all", seed=2), ev, ratios=[0.0, 0.5])
    clean = lab.metric(g, lab.IntegerModel(g).run(ev[0], lab.AccumulatorConfig(16)).outputs, ev[1])
    assert rows[0]["metric"] == clean > 0.6
    assert rows[1]["metric"] < 0.35
    assert rows[1]["events"] > 0 and rows[0]["layers"] == ["fc0", "fc1"]


def test_injection_is_reproducible(classifier):
    g, ev = classifier
    spec = InjectionSpec("first", 0.01, seed=4)
    assert inject_overflow(g, spec, ev) == inject_overflow(g, spec, ev, threads=3)


def test_output_level_injection_counts_events(classifier):
    g, ev = classifier
    row = inject_overflow(g, InjectionSpec("last", 0.5, level="output", seed=0), ev)[0]
    assert row["events"] > 0


def test_regression_metric_is_mse():
    from oaq.graph import GraphBuilder

    b = GraphBuilder((2,), seed=0)
    b.fc(b.input, 1)
    g = b.build(task="regression")
    assert lab.metric(g, np.array([[1.0], [3.0]]), np.array([0.0, 1.0])) == 2.5


# --- alpha report ----------------------------------------------------------------------


@pytest.mark.parametrize("alpha,bits", [(1.0, 8.0), (2.0, 7.0), (4.0, 6.0)])
def test_effective_bits(alpha, bits):
    assert effective_bits(8, alpha) == bits


def test_alpha_report_rows(classifier):
    g, ev = classifier
    h = g.copy()
    h.weight_slot(h.layer("fc1")).alpha = 4.0
    rows = alpha_report(h, ev[0], sort_by="weight_effective_bits")
    assert [r.layer for r in rows] == ["fc1", "fc0"]
    assert rows[0].weight_effective_bits == 6.0 and rows[0].weight_bits == 8
    assert all(r.overflow is not None for r in rows)
    assert alpha_report(h)[0].overflow is None
    assert set(rows[0].to_dict()) >= {"layer", "weight_alpha", "activation_alpha"}


def test_alpha_report_covers_conv_layers():
    g = small_cnn()
    qoat.train_toy(g, (np.zeros((4, 8, 8, 1), np.float32), np.zeros(4, np.int64)), 0)
    names = [r.layer for r in alpha_report(g)]
    assert names == [l.name for l in g.compute_layers()]
