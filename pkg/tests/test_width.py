import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxcompress.errors import InvalidArgumentError
from ctxcompress.numerics import Rng, finite_diff_gradient
from ctxcompress.width import (
    WidthParams,
    build_receivers,
    field_bounds,
    init_width_params,
    segment_layout,
    segmented_plan,
    sender_capacities,
    sinkhorn_plan,
    utility_matrix,
    width_backward,
    width_forward,
    window_attention_baseline,
)


def plain_sinkhorn(cost, a, b, eps, iters):
    """Multiplicative-scaling Sinkhorn written with python floats."""
    n, m = len(a), len(b)
    k = [[math.exp(-cost[i][j] / eps) for j in range(m)] for i in range(n)]
    u, v = [1.0] * n, [1.0] * m
    for _ in range(iters):
        u = [a[i] / sum(k[i][j] * v[j] for j in range(m)) for i in range(n)]
        v = [b[j] / sum(k[i][j] * u[i] for i in range(n)) for j in range(m)]
    return np.array([[u[i] * k[i][j] * v[j] for j in range(m)] for i in range(n)])


def bisect_2x2(eps, lo=1e-15, hi=0.5 - 1e-15):
    """Root of the stationarity condition of the symmetric 2x2 entropic problem.

    Objective over plans [[a, .5-a], [.5-a, a]] with cost [[0, 1], [1, 0]]:
    2(.5 - a) + eps * sum P log P. Its derivative in ``a`` is
    -2 + 2 eps (log a - log(.5 - a)), increasing in ``a``.
    """
    def grad(a):
        return -2.0 + 2.0 * eps * (math.log(a) - math.log(0.5 - a))

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if grad(mid) > 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def random_segment(seed, n, k):
    rng = Rng(seed)
    cost = 1.0 - np.clip(rng.uniform((n, k)) * 2 - 1, -1, 1)
    a = rng.uniform(n) + 0.1
    return cost, a / a.sum(), np.full(k, 1.0 / k)


class TestLayout:
    def test_even_split(self):
        segs = segment_layout(512, 128, 4)
        assert len(segs) == 4
        assert all(s.num_tokens == 128 and s.num_slots == 32 for s in segs)
        assert segs[-1].slot_stop == 128

    def test_ragged_tail(self):
        segs = segment_layout(70, 64, 4)
        assert [(s.num_tokens, s.num_slots) for s in segs] == [(64, 16), (6, 2)]

    def test_too_short(self):
        with pytest.raises(InvalidArgumentError):
            segment_layout(3, 16, 4)

    def test_field_tie_breaking(self):
        assert field_bounds(7, 3) == [(0, 3), (3, 5), (5, 7)]


class TestReceiversAndUtility:
    def test_receivers_are_field_means(self):
        x = Rng(0).normal((7, 3))
        r = build_receivers(x, 3)
        np.testing.assert_allclose(r[0], x[0:3].mean(axis=0), atol=1e-15)
        np.testing.assert_allclose(r[2], x[5:7].mean(axis=0), atol=1e-15)

    def test_utility_cosine(self):
        params = WidthParams(W_u=np.eye(2), W_rho=np.zeros(2), segment_len=4, ratio=2)
        u = utility_matrix(np.array([[1.0, 0.0], [1.0, 1.0]]), np.array([[2.0, 0.0], [0.0, 3.0]]), params)
        np.testing.assert_allclose(u, [[1.0, 0.0], [math.sqrt(0.5), math.sqrt(0.5)]], atol=1e-15)

    def test_zero_vector_guard(self):
        params = WidthParams(W_u=np.eye(2), W_rho=np.zeros(2), segment_len=4, ratio=2)
        u = utility_matrix(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([[1.0, 1.0]]), params)
        assert u[0, 0] == 0.0 and np.isfinite(u).all()


class TestCapacities:
    def test_zero_weights_uniform(self):
        params = init_width_params(Rng(0), 3, 4)
        params.W_rho = np.zeros(3)
        np.testing.assert_array_equal(sender_capacities(Rng(1).normal((5, 3)), params), 0.2)

    def test_identical_anchors_uniform(self):
        params = init_width_params(Rng(0), 3, 4)
        x = np.tile(Rng(1).normal(3), (4, 1))
        np.testing.assert_allclose(sender_capacities(x, params), 0.25, atol=1e-15)

    def test_analytic_pair(self):
        params = WidthParams(W_u=np.eye(1), W_rho=np.array([1.0]), segment_len=2, ratio=1)
        rho = sender_capacities(np.array([[0.0], [math.log(3)]]), params)
        np.testing.assert_allclose(rho, [0.25, 0.75], atol=1e-15)

    def test_segment_slice(self):
        params = init_width_params(Rng(0), 3, 4)
        x = Rng(1).normal((10, 3))
        rho = sender_capacities(x, params, range(4, 8))
        assert rho.shape == (4,) and abs(rho.sum() - 1.0) <= 1e-12


class TestSinkhorn:
    def test_one_by_one(self):
        res = sinkhorn_plan([[0.3]], [1.0], [1.0], 0.05, 1)
        np.testing.assert_array_equal(res.plan, [[1.0]])

    def test_constant_cost_is_independent_coupling(self):
        _, a, b = random_segment(0, 9, 4)
        res = sinkhorn_plan(np.full((9, 4), 0.7), a, b, 0.05, 30)
        np.testing.assert_allclose(res.plan, np.outer(a, b), atol=1e-10)

    def test_two_by_two_oracles(self):
        cost = [[0.0, 1.0], [1.0, 0.0]]
        eps = 0.5
        ours = sinkhorn_plan(cost, [0.5, 0.5], [0.5, 0.5], eps, 30).plan
        reference = plain_sinkhorn(cost, [0.5, 0.5], [0.5, 0.5], eps, 10_000)
        a = bisect_2x2(eps)
        kkt = np.array([[a, 0.5 - a], [0.5 - a, a]])
        np.testing.assert_allclose(ours, reference, atol=1e-6)
        np.testing.assert_allclose(ours, kkt, atol=1e-6)
        np.testing.assert_allclose(reference, kkt, atol=1e-9)
        assert a == pytest.approx(0.44039853898894116, abs=1e-12)

    def test_matches_plain_scaling(self):
        cost, a, b = random_segment(3, 6, 3)
        ours = sinkhorn_plan(cost, a, b, 0.3, 30).plan
        np.testing.assert_allclose(ours, plain_sinkhorn(cost.tolist(), a, b, 0.3, 30), atol=1e-13)

    def test_feasibility_at_200_iterations(self):
        for seed in range(20):
            cost, a, b = random_segment(seed, 128, 32)
            res = sinkhorn_plan(cost, a, b, 0.05, 200)
            assert res.residual <= 1e-9
            assert np.max(np.abs(res.plan.sum(axis=0) - b)) <= 1e-12

    def test_large_epsilon_limit(self):
        # Deviation is about (C spread / eps) relative to each entry, so use a
        # production-sized 64x16 segment.
        cost, a, b = random_segment(4, 64, 16)
        res = sinkhorn_plan(cost, a, b, 100.0, 30)
        np.testing.assert_allclose(res.plan, np.outer(a, b), atol=1e-4)

    @pytest.mark.parametrize("k", [2, 3, 4, 5, 6])
    def test_small_epsilon_recovers_assignment(self, k):
        rng = Rng(100 + k)
        checked = 0
        for _ in range(5):
            cost = rng.uniform((k, k)) * 2
            totals = sorted((sum(cost[i, p[i]] for i in range(k)), p)
                            for p in itertools.permutations(range(k)))
            if totals[1][0] - totals[0][0] < 0.05:
                continue
            best = totals[0][1]
            plan = sinkhorn_plan(cost, np.full(k, 1 / k), np.full(k, 1 / k), 1e-3, 2000).plan
            assert sum(plan[i, best[i]] for i in range(k)) >= 0.99
            checked += 1
        assert checked >= 3

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_residual_monotone(self, seed):
        # The L1 row error is what alternating scaling provably never increases.
        cost, a, b = random_segment(seed, 16, 4)
        residuals = [np.abs(sinkhorn_plan(cost, a, b, 0.05, k).plan.sum(axis=1) - a).sum() for k in range(1, 25)]
        for before, after in zip(residuals, residuals[1:]):
            assert after <= before + 1e-15

    @pytest.mark.xfail(strict=True, reason="max-norm row residual is not monotone in general")
    def test_max_residual_monotone_counterexample(self):
        cost, a, b = random_segment(1173, 16, 4)
        residuals = [sinkhorn_plan(cost, a, b, 0.05, k).residual for k in range(1, 25)]
        for before, after in zip(residuals, residuals[1:]):
            assert after <= before + 1e-15

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_column_marginals_exact(self, seed):
        cost, a, b = random_segment(seed, 20, 5)
        plan = sinkhorn_plan(cost, a, b, 0.05, 30).plan
        assert np.all(plan >= 0)
        assert np.max(np.abs(plan.sum(axis=0) - b)) <= 1e-12

    @pytest.mark.parametrize("bad", [
        dict(cost=[[np.nan]]),
        dict(row=[0.0, 1.0]),
        dict(eps=0.0),
        dict(iters=0),
    ])
    def test_invalid_arguments(self, bad):
        cost = bad.get("cost", [[0.0, 1.0], [1.0, 0.0]])
        row = bad.get("row", [0.5, 0.5])
        col = [1.0] if len(np.asarray(cost)[0]) == 1 else [0.5, 0.5]
        if len(np.asarray(cost)) == 1:
            row = [1.0]
        with pytest.raises(InvalidArgumentError):
            sinkhorn_plan(cost, row, col, bad.get("eps", 0.1), bad.get("iters", 5))


def make_params(seed, d_a=6, d_u=5, T=16, r=4, eps=0.05, iters=30):
    return init_width_params(Rng(seed), d_a, d_u, epsilon=eps, segment_len=T,
                             sinkhorn_iters=iters, ratio=r)


class TestSegmentedPlan:
    def test_single_segment_matches_sinkhorn_block(self):
        params = make_params(0)
        x = Rng(1).normal((12, 6))
        plan = segmented_plan(x, params)
        recv = build_receivers(x, 3)
        cost = 1.0 - utility_matrix(x, recv, params)
        block = sinkhorn_plan(cost, sender_capacities(x, params), np.full(3, 1 / 3), 0.05, 30).plan
        np.testing.assert_allclose(plan.plan, block, atol=1e-14)

    def test_identical_segments_identical_blocks(self):
        params = make_params(0)
        seg = Rng(2).normal((16, 6))
        plan = segmented_plan(np.vstack([seg, seg]), params)
        a, b = plan.segments
        np.testing.assert_array_equal(plan.block(a), plan.block(b))

    @pytest.mark.parametrize("n", [16, 37, 64, 70])
    def test_block_diagonal_exact_zeros(self, n):
        plan = segmented_plan(Rng(n).normal((n, 6)), make_params(1))
        assert np.all(plan.plan[~plan.block_mask()] == 0.0)
        assert plan.num_slots == sum(-(-s.num_tokens // 4) for s in plan.segments)

    def test_within_field_swap_equivariance(self):
        params = make_params(3)
        x = Rng(4).normal((16, 6))
        perm = np.arange(16)
        perm[[4, 6]] = perm[[6, 4]]  # tokens 4 and 6 share field 1
        base = segmented_plan(x, params).plan
        swapped = segmented_plan(x[perm], params).plan
        np.testing.assert_allclose(swapped, base[perm], atol=1e-15)

    def test_marginals(self):
        params = make_params(5)
        plan = segmented_plan(Rng(6).normal((40, 6)), params)
        for seg in plan.segments:
            block = plan.block(seg)
            np.testing.assert_allclose(block.sum(axis=0), 1.0 / seg.num_slots, atol=1e-12)
            assert abs(block.sum() - 1.0) <= 1e-12
        assert plan.residual < 1e-2


class TestWindowBaseline:
    def test_column_sums(self):
        plan = window_attention_baseline(Rng(0).normal((40, 6)), make_params(1))
        for seg in plan.segments:
            np.testing.assert_allclose(plan.block(seg).sum(axis=0), 1.0 / seg.num_slots, atol=1e-12)
        assert np.all(plan.plan[~plan.block_mask()] == 0.0)

    def test_field_of_size_one(self):
        params = make_params(1, T=4, r=1)
        plan = window_attention_baseline(Rng(0).normal((4, 6)), params)
        np.testing.assert_allclose(plan.plan, np.eye(4) / 4, atol=0)

    def test_identical_anchors_uniform_over_field(self):
        params = make_params(1)
        x = np.tile(Rng(0).normal(6), (8, 1))
        plan = window_attention_baseline(x, params).plan
        expected = np.zeros((8, 2))
        expected[:4, 0] = expected[4:, 1] = 0.25 / 2
        np.testing.assert_allclose(plan, expected, atol=1e-15)

    def test_local_support(self):
        plan = window_attention_baseline(Rng(0).normal((16, 6)), make_params(1)).plan
        for k, (a, b) in enumerate(field_bounds(16, 4)):
            assert np.all(plan[:a, k] == 0) and np.all(plan[b:, k] == 0)


@pytest.mark.parametrize("mode", ["ot", "window"])
def test_width_backward_matches_finite_differences(mode):
    params = make_params(7, d_a=4, d_u=3, T=8, r=4, eps=0.3, iters=6)
    x = Rng(8).normal((2, 11, 4))
    upstream = Rng(9).normal((2, 11, 3))

    def total(anchors):
        return float(np.sum(width_forward(anchors, params, mode)[0] * upstream))

    _, cache = width_forward(x, params, mode)
    g_x, grads = width_backward(cache, upstream)
    numeric = finite_diff_gradient(lambda v: total(v.reshape(x.shape)), x, 1e-5).reshape(x.shape)
    np.testing.assert_allclose(g_x, numeric, atol=1e-8)
    for name in ("W_u", "W_rho"):
        base = getattr(params, name)

        def f(v, name=name, base=base):
            setattr(params, name, v.reshape(base.shape))
            value = total(x)
            setattr(params, name, base)
            return value

        numeric = finite_diff_gradient(f, base, 1e-5).reshape(base.shape)
        np.testing.assert_allclose(grads[name], numeric, atol=1e-8, err_msg=name)
    if mode == "window":
        assert np.all(grads["W_rho"] == 0)
