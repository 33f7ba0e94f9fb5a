import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxcompress.errors import InvalidArgumentError
from ctxcompress.numerics import Rng, finite_diff_gradient
from ctxcompress.slots import (
    SlotParams,
    aggregate_slots,
    align,
    compress,
    init_compressor_params,
    init_slot_params,
    slots_backward,
    slots_forward,
)
from ctxcompress.states import HiddenStates


def small_compressor(seed=0, L=2, d=6, T=16, r=4, **kw):
    return init_compressor_params(Rng(seed), L, d, gate_dim=5, proj_dim=5, mlp_hidden=7,
                                  segment_len=T, ratio=r, **kw)


class TestAggregate:
    def test_constant_anchors(self):
        params = init_slot_params(Rng(0), 3, 4)
        a = Rng(1).normal(3)
        plan = np.zeros((8, 2))
        plan[:4, 0] = plan[4:, 1] = 0.5 / 4
        z = aggregate_slots(np.tile(a, (8, 1)), plan, params)
        np.testing.assert_allclose(z, np.tile(0.5 * (a @ params.W_g), (2, 1)), atol=1e-15)

    def test_single_entry(self):
        params = init_slot_params(Rng(0), 3, 4)
        x = Rng(1).normal((5, 3))
        plan = np.zeros((5, 2))
        plan[3, 1] = 0.5
        z = aggregate_slots(x, plan, params)
        np.testing.assert_array_equal(z[0], 0.0)
        np.testing.assert_allclose(z[1], 0.5 * (x[3] @ params.W_g), atol=1e-15)

    def test_double_loop_oracle(self):
        params = init_slot_params(Rng(2), 4, 3)
        x = Rng(3).normal((8, 4))
        plan = Rng(4).uniform((8, 2)) / 16
        expected = np.zeros((2, 4))
        for k in range(2):
            for t in range(8):
                for j in range(4):
                    expected[k, j] += plan[t, k] * sum(params.W_g[i, j] * x[t, i] for i in range(4))
        np.testing.assert_allclose(aggregate_slots(x, plan, params), expected, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            aggregate_slots(np.zeros((4, 3)), np.zeros((5, 2)), init_slot_params(Rng(0), 3, 4))

    @given(st.integers(0, 10_000), st.floats(-5, 5))
    @settings(max_examples=30, deadline=None)
    def test_linearity(self, seed, c):
        params = init_slot_params(Rng(seed), 3, 4)
        x = Rng(seed + 1).normal((6, 3))
        plan = Rng(seed + 2).uniform((6, 2))
        np.testing.assert_allclose(aggregate_slots(c * x, plan, params),
                                   c * aggregate_slots(x, plan, params), atol=1e-12)


class TestAlign:
    def test_zero_weights(self):
        params = SlotParams(np.eye(2), np.zeros((2, 3)), np.zeros(3), np.zeros((3, 2)), np.zeros(2))
        np.testing.assert_array_equal(align(Rng(0).normal((4, 2)), params), 0.0)

    def test_bias_only(self):
        params = init_slot_params(Rng(0), 2, 3)
        params.W2 = np.zeros_like(params.W2)
        params.b2 = np.array([0.5, -2.0])
        np.testing.assert_array_equal(align(Rng(1).normal((3, 2)), params), np.tile([0.5, -2.0], (3, 1)))

    def test_hand_set_mlp(self):
        params = SlotParams(
            W_g=np.eye(2),
            W1=np.array([[1.0, -0.5], [0.25, 2.0]]),
            b1=np.array([0.1, -0.2]),
            W2=np.array([[1.5, 0.0], [-1.0, 0.5]]),
            b2=np.array([0.0, 0.3]),
        )
        z = [0.4, -0.7]
        h0 = math.tanh(0.4 * 1.0 + -0.7 * 0.25 + 0.1)
        h1 = math.tanh(0.4 * -0.5 + -0.7 * 2.0 - 0.2)
        expected = [h0 * 1.5 + h1 * -1.0 + 0.0, h0 * 0.0 + h1 * 0.5 + 0.3]
        np.testing.assert_allclose(align(np.array([z]), params)[0], expected, atol=1e-15)


class TestCompress:
    def test_mass_conservation(self):
        params = small_compressor(1)
        h = Rng(2).normal((2, 37, 6))
        out = compress(h, params)
        rows = out.plan.plan.sum(axis=1)
        expected = params.slot.W_g.T @ (rows @ out.anchors.anchors)
        np.testing.assert_allclose(out.slots.raw.sum(axis=0), expected, atol=1e-10)

    @pytest.mark.parametrize("n,T,r,k", [(512, 128, 4, 128), (16, 128, 4, 4), (70, 64, 4, 18)])
    def test_slot_counts(self, n, T, r, k):
        params = small_compressor(0, T=T, r=r)
        out = compress(HiddenStates(Rng(n).normal((2, n, 6))), params)
        assert out.slots.aligned.shape == (k, 6)
        assert out.plan.plan.shape == (n, k)

    def test_four_blocks(self):
        params = small_compressor(0, T=128, r=4)
        out = compress(Rng(0).normal((2, 512, 6)), params)
        assert [(s.num_tokens, s.num_slots) for s in out.plan.segments] == [(128, 32)] * 4

    def test_deterministic(self):
        params = small_compressor(3)
        h = Rng(4).normal((2, 40, 6))
        a, b = compress(h, params), compress(h, params)
        assert a.slots.aligned.tobytes() == b.slots.aligned.tobytes()
        assert a.plan.plan.tobytes() == b.plan.plan.tobytes()

    def test_window_mode(self):
        out = compress(Rng(4).normal((2, 40, 6)), small_compressor(3), mode="window")
        assert np.all(out.plan.plan[~out.plan.block_mask()] == 0.0)

    def test_too_short(self):
        with pytest.raises(InvalidArgumentError):
            compress(Rng(0).normal((2, 3, 6)), small_compressor(0))

    def test_output_dimension(self):
        params = small_compressor(0, out_dim=9)
        assert compress(Rng(0).normal((2, 16, 6)), params).slots.aligned.shape == (4, 9)

    @given(st.integers(4, 90), st.sampled_from([(16, 2), (16, 4), (16, 8), (64, 4)]))
    @settings(max_examples=25, deadline=None)
    def test_shape_property(self, n, tr):
        T, r = tr
        if n < r:
            return
        out = compress(Rng(n).normal((2, n, 6)), small_compressor(0, T=T, r=r))
        k = sum(-(-min(T, n - s) // r) for s in range(0, n, T))
        assert out.slots.aligned.shape == (k, 6)
        assert np.all(out.plan.plan[~out.plan.block_mask()] == 0.0)


def test_slots_backward_matches_finite_differences():
    params = init_slot_params(Rng(0), 3, 4, out_dim=2)
    x = Rng(1).normal((2, 6, 3))
    plan = Rng(2).uniform((2, 6, 2))
    upstream = Rng(3).normal((2, 2, 2))

    def total(x_, plan_):
        return float(np.sum(slots_forward(x_, plan_, params)[1] * upstream))

    _, _, cache = slots_forward(x, plan, params)
    g_x, g_plan, grads = slots_backward(cache, upstream)
    np.testing.assert_allclose(
        g_x, finite_diff_gradient(lambda v: total(v.reshape(x.shape), plan), x, 1e-5).reshape(x.shape),
        atol=1e-8)
    np.testing.assert_allclose(
        g_plan, finite_diff_gradient(lambda v: total(x, v.reshape(plan.shape)), plan, 1e-5).reshape(plan.shape),
        atol=1e-8)
    for name, g in grads.items():
        base = getattr(params, name)

        def f(v, name=name, base=base):
            setattr(params, name, v.reshape(base.shape))
            value = total(x, plan)
            setattr(params, name, base)
            return value

        np.testing.assert_allclose(g, finite_diff_gradient(f, base, 1e-5).reshape(base.shape),
                                   atol=1e-8, err_msg=name)
