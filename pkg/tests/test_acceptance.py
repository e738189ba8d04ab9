"""Acceptance suite: one test per release gate, each printing a single
verdict line with the measured numbers.

Run with -s so the verdict lines show even when every gate passes:

    python3 -m pytest tests/test_acceptance.py -q -s

The trend gates (5 through 8) train small networks on seeded synthetic
data; every seed is pinned, so reruns reproduce the numbers exactly.
"""

import time

import numpy as np
import pytest

import spikequant.convert as conv
import spikequant.finetune as ftmod
from spikequant.data import Dataset, make_synthetic, normalize
from spikequant.model import (
    build,
    evaluate,
    fold_batchnorm,
    folded_threshold,
    forward,
    quantizer_inputs,
    train,
)
from spikequant.numerics import REAL, SgdConfig, rng_for
from spikequant.qat import (
    BaselineThresholdConfig,
    QuantSpec,
    estimate_baseline_threshold,
    quantize_activation,
    quantize_activation_floor,
)
from spikequant.snn_sim import NeuronState, if_step, sif_step, simulate
from tests.conftest import random_dense_net


def _verdict(num: int, ok: bool, detail: str):
    print(f"criterion {num}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {num}: {detail}"


def _dataset(noise, modes, shape, seed=0, classes=10, train_count=2000, test_count=1000):
    tx, ty, sx, sy = make_synthetic(classes=classes, shape=shape,
                                    train_count=train_count, test_count=test_count,
                                    noise=noise, modes_per_class=modes, seed=seed)
    return (Dataset(normalize(tx, 0.5, 0.5), ty, split="train"),
            Dataset(normalize(sx, 0.5, 0.5), sy, split="test"))


def _snn_accuracy(snn, ds, batch_size=500):
    hits = 0
    for start in range(0, len(ds), batch_size):
        readout, _, _ = simulate(snn, ds.images[start : start + batch_size])
        hits += int((readout.argmax(axis=1) == ds.labels[start : start + batch_size]).sum())
    return hits / len(ds)


def _chain(arch, train_ds, test_ds, seed, epochs=15, with_full_wait=False, **build_kw):
    """Train, fold, convert and measure every variant's test accuracy."""
    t0 = time.perf_counter()
    net = build(arch, bits=2, seed=seed,
                input_shape=tuple(train_ds.images.shape[1:]), **build_kw)
    net, _ = train(net, train_ds, SgdConfig(0.04, 0.9, 1e-4, {10: 0.1}),
                   epochs=epochs, batch_size=64)
    folded = fold_batchnorm(net)
    out = {"ann": evaluate(folded, test_ds)}
    pipe = conv.convert(folded, schedule_mode=conv.PIPELINED)
    out["alpha"] = _snn_accuracy(pipe, test_ds)
    beta_net = conv.with_neuron_model(pipe, conv.NEURON_SIGNED_IF)
    out["beta"] = _snn_accuracy(beta_net, test_ds)
    cfg = ftmod.FinetuneConfig(optimizer=SgdConfig(1e-3, 0.9, 0.0), passes=1)
    gamma_net, _ = ftmod.finetune(folded, beta_net, train_ds, cfg)
    out["gamma"] = _snn_accuracy(gamma_net, test_ds)
    if with_full_wait:
        out["full_wait"] = _snn_accuracy(conv.with_schedule(pipe, conv.FULL_WAIT), test_ds)
    out["elapsed_s"] = time.perf_counter() - t0
    return out, folded


@pytest.fixture(scope="module")
def hard16():
    """10-class 16x16 set, noisy enough that pipelined error is visible."""
    return _dataset(noise=1.2, modes=4, shape=(1, 16, 16))


@pytest.fixture(scope="module")
def outlier8():
    """Small noisy images whose activation outliers punish naive thresholds."""
    return _dataset(noise=1.6, modes=4, shape=(1, 8, 8))


@pytest.fixture(scope="module")
def mlp3_chains(hard16):
    train_ds, test_ds = hard16
    return [_chain("mlp3", train_ds, test_ds, seed, with_full_wait=(seed == 0))[0]
            for seed in range(5)]


@pytest.fixture(scope="module")
def res10_chains(hard16):
    train_ds, test_ds = hard16
    return [_chain("res10", train_ds, test_ds, seed)[0] for seed in range(5)]


# ---------------------------------------------------------------------------
# 1. rate/activation equivalence on randomized networks


def test_random_network_rate_equivalence():
    gen = rng_for(7)
    worst = 0.0
    t0 = time.perf_counter()
    nets = 102
    for i in range(nets):
        bits = (1, 2, 3)[i % 3]
        depth = int(gen.integers(2, 7))
        dims = [int(gen.integers(3, 11)) for _ in range(depth + 1)]
        net = random_dense_net(gen, bits, dims)
        snn = conv.convert(net)
        x = gen.normal(size=(10, dims[0])).astype(REAL)
        rep = conv.equivalence_check(net, snn, x, tol=1e-5)
        assert rep.argmax_agreement == 1.0, f"net {i}: argmax disagreement"
        assert rep.ok, f"net {i}: {rep}"
        worst = max(worst, rep.max_dev)
    elapsed = time.perf_counter() - t0
    _verdict(1, worst <= 1e-5 and elapsed <= 120,
             f"{nets} nets, worst |rate - activation/clip| {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. fire-order vignettes


def _trace_neuron(step, charges, *step_args):
    state = NeuronState.fresh((1,), 0.0)
    rows = []
    for z in charges:
        spike = step(state, np.array([z], dtype=REAL), *step_args)
        rows.append((z, float(spike[0]), float(state.potential[0])))
    return rows, float(state.count[0])


def test_fire_order_vignettes():
    t0 = time.perf_counter()
    rows, count = _trace_neuron(if_step, [-1.0, -1.0, 2.0], 1.0)
    late_ok = rows == [(-1.0, 0.0, -1.0), (-1.0, 0.0, -2.0), (2.0, 0.0, 0.0)] and count == 0.0

    rows, count = _trace_neuron(if_step, [2.0, -1.0, -1.0], 1.0)
    early_ok = rows == [(2.0, 1.0, 1.0), (-1.0, 0.0, 0.0), (-1.0, 0.0, -1.0)] and count == 1.0

    rows, count = _trace_neuron(sif_step, [2.0, -1.0, -1.0], 1.0, -1e-3)
    signed_ok = rows == [(2.0, 1.0, 1.0), (-1.0, 0.0, 0.0), (-1.0, -1.0, 0.0)] and count == 0.0

    elapsed = time.perf_counter() - t0
    _verdict(2, late_ok and early_ok and signed_ok and elapsed < 1.0,
             f"late-charge rate 0, early-charge IF 1/3 vs signed 0, {elapsed * 1000:.0f}ms")


# ---------------------------------------------------------------------------
# 3. two-bit grid and the flooring identity


def test_two_bit_grid_and_floor_identity():
    t0 = time.perf_counter()
    spec = QuantSpec(bits=2, clip=1.0)
    sweep = np.linspace(-2.0, 3.0, 10 ** 6).astype(REAL)
    rounded = quantize_activation(sweep, spec)
    floored = quantize_activation_floor(sweep, spec)
    identical = np.array_equal(rounded, floored)
    grid = np.unique(rounded)
    expected = (np.arange(4, dtype=REAL) * (REAL(1.0) / REAL(3.0))).astype(REAL)
    grid_ok = np.array_equal(grid, expected)
    elapsed = time.perf_counter() - t0
    _verdict(3, identical and grid_ok and elapsed <= 10,
             f"grid {{0, 1/3, 2/3, 1}}, floor form bit-identical on 10^6 points, "
             f"{elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 4. batchnorm folding


def test_batchnorm_fold_agreement(hard16):
    t0 = time.perf_counter()
    train_ds, _ = hard16
    gen = rng_for(11)
    worst = 0.0
    # brief training moves every batchnorm off its init statistics
    for arch in ("mlp3", "convnet5"):
        net = build(arch, bits=2, seed=3, input_shape=(1, 16, 16))
        train(net, train_ds, SgdConfig(0.04, 0.9, 1e-4), epochs=3, batch_size=64)
        folded = fold_batchnorm(net)
        x = gen.normal(size=(1000, 1, 16, 16)).astype(REAL)
        ref, _ = forward(net, x)
        got, _ = forward(folded, x)
        worst = max(worst, float(np.abs(got - ref).max()))

    worst_theta = 0.0
    for _ in range(100):
        theta = float(gen.uniform(0.1, 2.0))
        gamma = float(gen.uniform(0.3, 1.5)) * (1 if gen.random() < 0.5 else -1)
        beta = float(gen.normal())
        var = float(gen.uniform(0.05, 2.0))
        mean = float(gen.normal())
        pre = folded_threshold(theta, gamma, beta, var, 1e-5, mean)
        recon = gamma * (pre - mean) / np.sqrt(var + 1e-5) + beta
        worst_theta = max(worst_theta, abs(recon - theta))

    elapsed = time.perf_counter() - t0
    _verdict(4, worst <= 1e-4 and worst_theta <= 1e-6 and elapsed <= 30,
             f"fold max|dev| {worst:.2e} over 1000 inputs x 2 archs, "
             f"threshold identity {worst_theta:.2e} over 100 draws, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 5. trained mlp3: accuracy floor, lossless full wait, pipelined repair


def test_trained_mlp_accuracy_chain(mlp3_chains):
    c = mlp3_chains[0]
    ok = (c["ann"] >= 0.95
          and c["full_wait"] == c["ann"]
          and c["gamma"] >= c["ann"] - 0.015
          and c["elapsed_s"] <= 1200)
    _verdict(5, ok,
             f"ann {c['ann']:.4f}, full-wait {c['full_wait']:.4f} (exact match), "
             f"pipelined repaired {c['gamma']:.4f}, {c['elapsed_s']:.0f}s")


# ---------------------------------------------------------------------------
# 6. depth separates the variants


def test_depth_separation_over_seeds(res10_chains, mlp3_chains):
    r = np.array([[c["alpha"], c["beta"], c["gamma"]] for c in res10_chains])
    m = np.array([[c["alpha"], c["beta"], c["gamma"]] for c in mlp3_chains])
    r_alpha, r_beta, r_gamma = r.mean(axis=0)
    ordered = r_gamma >= r_beta >= r_alpha
    gap_deep = float((r[:, 2] - r[:, 1]).mean())
    gap_shallow = float((m[:, 2] - m[:, 1]).mean())
    _verdict(6, ordered and gap_deep > gap_shallow,
             f"res10 means a {r_alpha:.4f} <= b {r_beta:.4f} <= g {r_gamma:.4f}, "
             f"repair gain {gap_deep:+.4f} vs mlp3 {gap_shallow:+.4f}, 5 seeds")


# ---------------------------------------------------------------------------
# 7. learned thresholds beat calibration baselines


def test_learned_threshold_ranks_highest(outlier8):
    train_ds, test_ds = outlier8
    net = build("mlp3", bits=2, seed=0, input_shape=(1, 8, 8))
    net, _ = train(net, train_ds, SgdConfig(0.04, 0.9, 1e-4, {10: 0.1}),
                   epochs=15, batch_size=64)
    folded = fold_batchnorm(net)

    def both_schedules(overrides):
        snn = conv.convert(folded, clip_overrides=overrides)
        return (_snn_accuracy(snn, test_ds),
                _snn_accuracy(conv.with_schedule(snn, conv.PIPELINED), test_ds))

    calib = quantizer_inputs(folded, train_ds.images[:128])
    baselines = {}
    for name, mode, pct in [("max", "max", 99.0),
                            ("p99", "percentile", 99.0),
                            ("p99.9", "percentile", 99.9)]:
        cfg = BaselineThresholdConfig(mode=mode, percentile=pct)
        overrides = [estimate_baseline_threshold(calib[i], cfg)
                     for i in folded.quant_layers()]
        baselines[name] = both_schedules(overrides)

    learned = both_schedules(None)
    wins = all(learned[0] > fw and learned[1] > pipe
               for fw, pipe in baselines.values())
    table = " ".join(f"{k} {fw:.4f}/{pipe:.4f}" for k, (fw, pipe) in baselines.items())
    _verdict(7, wins,
             f"learned {learned[0]:.4f}/{learned[1]:.4f} beats {table} "
             f"(full-wait/pipelined)")


# ---------------------------------------------------------------------------
# 8. spiking op budget on the conv net


def test_convnet_op_budget(hard16):
    train_ds, test_ds = hard16
    net = build("convnet5", bits=2, seed=0, input_shape=(1, 16, 16), hidden=32)
    net, _ = train(net, train_ds, SgdConfig(0.04, 0.9, 5e-4, {10: 0.1}),
                   epochs=15, batch_size=64)
    folded = fold_batchnorm(net)
    pipe = conv.convert(folded, schedule_mode=conv.PIPELINED)
    beta_net = conv.with_neuron_model(pipe, conv.NEURON_SIGNED_IF)
    cfg = ftmod.FinetuneConfig(optimizer=SgdConfig(1e-3, 0.9, 0.0), passes=1)
    gamma_net, _ = ftmod.finetune(folded, beta_net, train_ds, cfg)

    xb = test_ds.images[:256]
    _, _, first = simulate(gamma_net, xb)
    _, _, second = simulate(gamma_net, xb)
    reproducible = (first.snn_ops == second.snn_ops
                    and first.ann_ops == second.ann_ops
                    and first.ratio == second.ratio)
    cheaper = first.snn_ops < first.ann_ops
    _verdict(8, cheaper and reproducible,
             f"spiking {first.snn_ops} < graph {first.ann_ops} ops "
             f"(ratio {first.ratio:.4f}), counts identical across reruns")
