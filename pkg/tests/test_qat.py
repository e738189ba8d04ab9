"""Quantizer behavior: worked examples, grid/monotonicity properties, the
floor/round identity, straight-through gradients, baseline thresholds."""

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from spikequant.numerics import REAL
from spikequant.qat import (
    BaselineThresholdConfig,
    QuantSpec,
    estimate_baseline_threshold,
    quantize_activation,
    quantize_activation_floor,
    quantize_backward,
    quantize_weights,
    round_half_up,
)


def test_two_bit_unit_clip_levels():
    spec = QuantSpec(bits=2, clip=1.0)
    x = np.array([0.0, 0.4, 0.6, 2.0], dtype=REAL)
    out = quantize_activation(x, spec)
    assert np.allclose(out, [0.0, 1 / 3, 2 / 3, 1.0], atol=1e-7)


def test_zero_maps_to_zero_for_any_spec():
    for bits in (1, 2, 3, 4):
        for clip in (0.5, 1.0, 2.75):
            out = quantize_activation(np.zeros(3, dtype=REAL), QuantSpec(bits, clip))
            assert np.array_equal(out, np.zeros(3, dtype=REAL))


def test_saturation_hits_clip_exactly():
    spec = QuantSpec(bits=3, clip=1.5)
    x = np.array([1.5, 2.0, 100.0], dtype=REAL)
    assert np.array_equal(quantize_activation(x, spec), np.full(3, REAL(1.5)))


def test_level_count_is_two_to_the_bits():
    spec = QuantSpec(bits=2, clip=1.0)
    xs = np.linspace(-1, 2, 3001).astype(REAL)
    levels = np.unique(quantize_activation(xs, spec))
    assert len(levels) == 4
    assert np.allclose(levels, [0, 1 / 3, 2 / 3, 1], atol=1e-7)


def test_round_half_up_breaks_ties_upward():
    u = np.array([-1.5, -0.5, 0.5, 1.5, 2.5], dtype=REAL)
    assert np.array_equal(round_half_up(u), np.array([-1, 0, 1, 2, 3], dtype=REAL))


def test_floor_form_is_bit_identical():
    spec = QuantSpec(bits=2, clip=1.37)
    gen = np.random.default_rng(0)
    x = gen.uniform(-2, 4, size=200000).astype(REAL)
    a = quantize_activation(x, spec)
    b = quantize_activation_floor(x, spec)
    assert np.array_equal(a, b)


@given(st.integers(1, 4), st.floats(0.05, 8.0), st.integers(0, 2 ** 31 - 1))
@settings(max_examples=60, deadline=None)
def test_output_lies_on_grid_and_is_idempotent(bits, clip, seed):
    spec = QuantSpec(bits=bits, clip=clip)
    gen = np.random.default_rng(seed)
    x = gen.uniform(-clip, 2 * clip, size=257).astype(REAL)
    q = quantize_activation(x, spec)
    steps = 2 ** bits - 1
    k = q * (REAL(steps) / REAL(spec.clip))
    assert np.allclose(k, np.round(k), atol=1e-4)
    assert np.array_equal(quantize_activation(q, spec), q)


@given(st.integers(1, 4), st.floats(0.05, 8.0), st.integers(0, 2 ** 31 - 1))
@settings(max_examples=60, deadline=None)
def test_quantizer_is_monotone(bits, clip, seed):
    spec = QuantSpec(bits=bits, clip=clip)
    gen = np.random.default_rng(seed)
    x = np.sort(gen.uniform(-clip, 2 * clip, size=257).astype(REAL))
    q = quantize_activation(x, spec)
    assert np.all(np.diff(q) >= 0)


@given(st.integers(1, 4), st.floats(0.05, 8.0), st.integers(0, 2 ** 31 - 1))
@settings(max_examples=60, deadline=None)
def test_half_step_error_bound(bits, clip, seed):
    # |Q(x) - clip(x,0,s)| <= s/(2*steps), one extra ulp of slack for the
    # float32 scaling round trip
    spec = QuantSpec(bits=bits, clip=clip)
    gen = np.random.default_rng(seed)
    x = gen.uniform(-clip, 2 * clip, size=513).astype(REAL)
    q = quantize_activation(x, spec).astype(np.float64)
    clipped = np.clip(x.astype(np.float64), 0.0, float(spec.clip))
    bound = float(spec.clip) / (2 * (2 ** bits - 1))
    assert np.abs(q - clipped).max() <= bound * (1 + 1e-5) + 1e-6


def test_quant_spec_validation():
    with pytest.raises(ValueError):
        QuantSpec(bits=0, clip=1.0)
    with pytest.raises(ValueError):
        QuantSpec(bits=2, clip=0.0)
    with pytest.raises(ValueError):
        QuantSpec(bits=2, clip=1.0, target="nonsense")


def test_backward_pass_through_region():
    spec = QuantSpec(bits=2, clip=1.0)
    x = np.array([0.1, 0.5, 0.9], dtype=REAL)
    up = np.array([1.0, 2.0, 3.0], dtype=REAL)
    gx, gs = quantize_backward(up, x, spec)
    assert np.array_equal(gx, up)
    assert float(gs) == 0.0


def test_backward_full_saturation():
    spec = QuantSpec(bits=2, clip=1.0)
    x = np.array([1.5, 2.0], dtype=REAL)
    up = np.array([1.0, 2.0], dtype=REAL)
    gx, gs = quantize_backward(up, x, spec)
    assert np.array_equal(gx, np.zeros(2, dtype=REAL))
    assert float(gs) == pytest.approx(3.0)


def test_backward_matches_elementwise_mask_oracle():
    spec = QuantSpec(bits=3, clip=0.8)
    gen = np.random.default_rng(4)
    x = gen.uniform(-1, 2, size=(7, 11)).astype(REAL)
    up = gen.normal(size=(7, 11)).astype(REAL)
    gx, gs = quantize_backward(up, x, spec)
    ref_gx = np.zeros_like(up)
    ref_gs = 0.0
    for i in range(7):
        for j in range(11):
            if 0.0 <= x[i, j] <= spec.clip:
                ref_gx[i, j] = up[i, j]
            if x[i, j] > spec.clip:
                ref_gs += float(up[i, j])
    assert np.array_equal(gx, ref_gx)
    assert float(gs) == pytest.approx(ref_gs, rel=1e-5)


def test_boundary_values_pass_gradient():
    # both ends of the clip window are inside the pass-through region
    spec = QuantSpec(bits=2, clip=1.0)
    x = np.array([0.0, 1.0], dtype=REAL)
    gx, gs = quantize_backward(np.ones(2, dtype=REAL), x, spec)
    assert np.array_equal(gx, np.ones(2, dtype=REAL))
    assert float(gs) == 0.0


def test_weight_quantization_worked_example():
    w = np.array([-1.0, -0.2, 0.4, 1.0], dtype=REAL)
    out = quantize_weights(w, 2)
    assert np.allclose(out, [-1.0, 0.0, 0.0, 1.0], atol=1e-7)


def test_weight_quantization_idempotent_and_sign_preserving():
    gen = np.random.default_rng(2)
    w = gen.normal(size=(6, 6)).astype(REAL)
    q = quantize_weights(w, 3)
    assert np.allclose(quantize_weights(q, 3), q, atol=1e-6)
    half_step = np.abs(w).max() / (2 ** 2 - 1) / 2
    big = np.abs(w) > half_step * 1.01
    assert np.array_equal(np.sign(q[big]), np.sign(w[big]))


def test_weight_quantization_zero_tensor_unchanged():
    w = np.zeros((3, 3), dtype=REAL)
    out = quantize_weights(w, 2)
    assert np.array_equal(out, w)
    assert out is not w


def test_weight_quantization_needs_two_bits():
    with pytest.raises(ValueError):
        quantize_weights(np.ones(3, dtype=REAL), 1)


def test_threshold_max_mode():
    acts = np.array([1.0, 2.0, 3.0, 4.0], dtype=REAL)
    cfg = BaselineThresholdConfig(mode="max")
    assert estimate_baseline_threshold(acts, cfg) == pytest.approx(4.0)


def test_threshold_nearest_rank_percentile():
    acts = np.arange(1, 101, dtype=REAL)
    cfg = BaselineThresholdConfig(mode="percentile", percentile=99.0)
    assert estimate_baseline_threshold(acts, cfg) == pytest.approx(99.0)
    cfg = BaselineThresholdConfig(mode="percentile", percentile=50.0)
    assert estimate_baseline_threshold(acts, cfg) == pytest.approx(50.0)


def test_threshold_constant_batch():
    acts = np.full(64, REAL(1.25))
    for cfg in (BaselineThresholdConfig(mode="max"),
                BaselineThresholdConfig(mode="percentile", percentile=99.0),
                BaselineThresholdConfig(mode="percentile", percentile=99.9)):
        assert estimate_baseline_threshold(acts, cfg) == pytest.approx(1.25)


def test_threshold_rejects_empty_batch():
    with pytest.raises(ValueError):
        estimate_baseline_threshold(np.zeros(0, dtype=REAL), BaselineThresholdConfig(mode="max"))


def test_threshold_config_validation():
    with pytest.raises(ValueError):
        BaselineThresholdConfig(mode="median")
    with pytest.raises(ValueError):
        BaselineThresholdConfig(mode="percentile", percentile=0.0)
    with pytest.raises(ValueError):
        BaselineThresholdConfig(mode="percentile", percentile=100.5)
