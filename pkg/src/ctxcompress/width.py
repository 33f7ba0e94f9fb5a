"""Width-wise transmission: token anchors to compression slots.

Tokens are split into consecutive segments of ``segment_len`` tokens. Each
segment of ``n`` tokens owns ``ceil(n / ratio)`` slots. Within a segment:

* slot receivers are means of anchors over contiguous local fields;
* utility is the cosine between ``W_u``-projected senders and receivers;
* sender capacities are a softmax of ``anchor @ W_rho`` over the segment;
* the plan is the entropic OT coupling between capacities and uniform slot
  mass under cost ``1 - utility``, solved by log-domain Sinkhorn.

Blocks are assembled block-diagonally. ``window_attention_baseline`` replaces
the OT block by per-field softmax attention with the same column mass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .depth import TokenAnchors
from .errors import InvalidArgumentError
from .numerics import Rng, _softmax, log_softmax, logsumexp

NORM_FLOOR = 1e-12


@dataclass
class WidthParams:
    W_u: np.ndarray  # (d_a, d_u)
    W_rho: np.ndarray  # (d_a,)
    epsilon: float = 0.05
    segment_len: int = 128
    sinkhorn_iters: int = 30
    ratio: int = 4

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InvalidArgumentError(f"epsilon must be positive, got {self.epsilon}")
        if self.ratio < 1 or self.segment_len < self.ratio or self.segment_len % self.ratio:
            raise InvalidArgumentError(
                f"segment_len {self.segment_len} must be >= ratio {self.ratio} and divisible by it")
        if self.sinkhorn_iters < 1:
            raise InvalidArgumentError("sinkhorn_iters must be >= 1")


def init_width_params(rng: Rng, anchor_dim: int, proj_dim: int = 256, **hyper) -> WidthParams:
    std = 1.0 / np.sqrt(anchor_dim)
    return WidthParams(
        W_u=rng.child("W_u").normal((anchor_dim, proj_dim), std),
        W_rho=rng.child("W_rho").normal(anchor_dim, std),
        **hyper,
    )


class Segment(NamedTuple):
    token_start: int
    token_stop: int
    slot_start: int
    slot_stop: int

    @property
    def num_tokens(self) -> int:
        return self.token_stop - self.token_start

    @property
    def num_slots(self) -> int:
        return self.slot_stop - self.slot_start


def segment_layout(num_tokens: int, segment_len: int, ratio: int) -> list[Segment]:
    """Consecutive segments; the last may be shorter and gets ``ceil(n/ratio)`` slots."""
    if num_tokens < ratio:
        raise InvalidArgumentError(f"sequence of {num_tokens} tokens is shorter than ratio {ratio}")
    segments, slot = [], 0
    for start in range(0, num_tokens, segment_len):
        stop = min(start + segment_len, num_tokens)
        k = -(-(stop - start) // ratio)
        segments.append(Segment(start, stop, slot, slot + k))
        slot += k
    return segments


def field_bounds(num_tokens: int, num_fields: int) -> list[tuple[int, int]]:
    """Contiguous near-equal partition; earlier fields take the extra tokens."""
    if num_fields < 1 or num_fields > num_tokens:
        raise InvalidArgumentError(f"cannot split {num_tokens} tokens into {num_fields} fields")
    base, extra = divmod(num_tokens, num_fields)
    bounds, start = [], 0
    for k in range(num_fields):
        size = base + (1 if k < extra else 0)
        bounds.append((start, start + size))
        start += size
    return bounds


def field_matrix(num_tokens: int, num_fields: int) -> np.ndarray:
    """``(n, K)`` averaging matrix: entry ``1/|F_k|`` when token ``t`` is in field ``k``."""
    m = np.zeros((num_tokens, num_fields))
    for k, (a, b) in enumerate(field_bounds(num_tokens, num_fields)):
        m[a:b, k] = 1.0 / (b - a)
    return m


def _anchor_array(anchors) -> np.ndarray:
    x = anchors.anchors if isinstance(anchors, TokenAnchors) else anchors
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidArgumentError(f"anchors must be an (N, d_a) matrix, got shape {x.shape}")
    return x


def build_receivers(anchors, num_slots: int) -> np.ndarray:
    x = _anchor_array(anchors)
    if num_slots > x.shape[0]:
        raise InvalidArgumentError(f"num_slots {num_slots} exceeds sequence length {x.shape[0]}")
    return field_matrix(x.shape[0], num_slots).T @ x


def _normalize(x: np.ndarray):
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    ok = norm >= NORM_FLOOR
    return np.where(ok, x / np.where(ok, norm, 1.0), 0.0), norm, ok


def _normalize_backward(unit, norm, ok, g_unit):
    g = (g_unit - unit * np.sum(unit * g_unit, axis=-1, keepdims=True)) / np.where(ok, norm, 1.0)
    return np.where(ok, g, 0.0)


def utility_matrix(anchors, receivers, params: WidthParams) -> np.ndarray:
    x = _anchor_array(anchors)
    r = np.asarray(receivers, dtype=np.float64)
    if x.shape[1] != params.W_u.shape[0] or r.shape[-1] != params.W_u.shape[0]:
        raise InvalidArgumentError("anchor/receiver width does not match W_u")
    pu, _, _ = _normalize(x @ params.W_u)
    qu, _, _ = _normalize(r @ params.W_u)
    return np.clip(pu @ qu.T, -1.0, 1.0)


def sender_capacities(anchors, params: WidthParams, segment: range | slice | None = None) -> np.ndarray:
    x = _anchor_array(anchors)
    if segment is not None:
        x = x[segment if isinstance(segment, slice) else slice(segment.start, segment.stop)]
    if x.shape[0] == 0:
        raise InvalidArgumentError("empty segment")
    if x.shape[1] != params.W_rho.shape[0]:
        raise InvalidArgumentError("anchor width does not match W_rho")
    return _softmax(x @ params.W_rho)


class SinkhornResult(NamedTuple):
    plan: np.ndarray
    residual: float  # max |row_sum - row_marg|


def _sinkhorn_log(log_kernel, log_a, log_b, iters):
    """Unrolled log-domain Sinkhorn on a batch ``(B, n, m)``.

    One iteration is a row update followed by a column update, so column
    marginals hold to rounding after the final step. Returns the plan and the
    potential history needed by :func:`_sinkhorn_log_backward`.
    """
    g = np.zeros(log_kernel.shape[:-2] + log_kernel.shape[-1:])
    fs, gs = [], [g]
    for _ in range(iters):
        f = log_a - logsumexp(log_kernel + g[..., None, :], axis=-1)
        g = log_b - logsumexp(log_kernel + f[..., :, None], axis=-2)
        fs.append(f)
        gs.append(g)
    plan = np.exp(log_kernel + fs[-1][..., :, None] + g[..., None, :])
    return plan, fs, gs


def _sinkhorn_log_backward(log_kernel, log_a, log_b, fs, gs, plan, g_plan):
    """Reverse pass through the unrolled iterations.

    Returns gradients with respect to ``log_kernel`` and ``log_a``; ``log_b``
    is a constant (uniform slot mass).
    """
    g_z = g_plan * plan
    g_logk = g_z.copy()
    g_f = g_z.sum(axis=-1)
    g_g = g_z.sum(axis=-2)
    g_loga = np.zeros_like(log_a)
    for i in range(len(fs), 0, -1):
        f, g_prev, g_cur = fs[i - 1], gs[i - 1], gs[i]
        # column step: g_cur = log_b - LSE_t(log_kernel + f)
        col_soft = np.exp(log_kernel + f[..., :, None] + g_cur[..., None, :] - log_b[..., None, :])
        tmp = col_soft * g_g[..., None, :]
        g_logk -= tmp
        g_f = g_f - tmp.sum(axis=-1)
        # row step: f = log_a - LSE_k(log_kernel + g_prev)
        g_loga += g_f
        row_soft = np.exp(log_kernel + g_prev[..., None, :] + f[..., :, None] - log_a[..., :, None])
        tmp = row_soft * g_f[..., :, None]
        g_logk -= tmp
        g_g = -tmp.sum(axis=-2)
        g_f = np.zeros_like(g_f)
    return g_logk, g_loga


def sinkhorn_plan(cost, row_marg, col_marg, epsilon: float, iters: int) -> SinkhornResult:
    """Entropic OT plan ``diag(u) exp(-C/eps) diag(v)`` after ``iters`` row+column scalings."""
    c = np.asarray(cost, dtype=np.float64)
    a = np.asarray(row_marg, dtype=np.float64)
    b = np.asarray(col_marg, dtype=np.float64)
    if c.ndim != 2 or c.shape != (a.size, b.size):
        raise InvalidArgumentError(f"cost shape {c.shape} does not match marginals ({a.size}, {b.size})")
    if not np.all(np.isfinite(c)):
        raise InvalidArgumentError("cost matrix contains non-finite entries")
    for name, m in (("row_marg", a), ("col_marg", b)):
        if np.any(m <= 0) or abs(m.sum() - 1.0) > 1e-9:
            raise InvalidArgumentError(f"{name} must be strictly positive and sum to 1")
    if not epsilon > 0:
        raise InvalidArgumentError(f"epsilon must be positive, got {epsilon}")
    if iters < 1:
        raise InvalidArgumentError("iters must be >= 1")
    plan, _, _ = _sinkhorn_log(-c / epsilon, np.log(a), np.log(b), iters)
    return SinkhornResult(plan, float(np.max(np.abs(plan.sum(axis=1) - a))))


@dataclass
class TransmissionPlan:
    plan: np.ndarray  # (N, K)
    segments: list[Segment]
    sender_marginals: np.ndarray  # (N,)
    receiver_marginals: np.ndarray  # (K,)
    residual: float = 0.0

    @property
    def num_slots(self) -> int:
        return self.plan.shape[1]

    def block(self, segment: Segment) -> np.ndarray:
        return self.plan[segment.token_start:segment.token_stop, segment.slot_start:segment.slot_stop]

    def block_mask(self) -> np.ndarray:
        mask = np.zeros(self.plan.shape, dtype=bool)
        for s in self.segments:
            mask[s.token_start:s.token_stop, s.slot_start:s.slot_stop] = True
        return mask


def width_forward(anchors: np.ndarray, params: WidthParams, mode: str = "ot"):
    """Batched forward over ``(B, N, d_a)`` anchors; returns ``(B, N, K)`` plans.

    ``mode`` is ``"ot"`` for the Sinkhorn plan or ``"window"`` for the
    per-field attention ablation.
    """
    if mode not in ("ot", "window"):
        raise InvalidArgumentError(f"unknown transmission mode {mode!r}")
    B, N, _ = anchors.shape
    segments = segment_layout(N, params.segment_len, params.ratio)
    K = segments[-1].slot_stop
    plan = np.zeros((B, N, K))
    row_marg = np.zeros((B, N))
    blocks = []
    for seg in segments:
        n, m = seg.num_tokens, seg.num_slots
        x = anchors[:, seg.token_start:seg.token_stop]
        fields = field_matrix(n, m)
        recv = np.einsum("tk,btd->bkd", fields, x, optimize=True)
        proj_x = x @ params.W_u
        proj_r = recv @ params.W_u
        c = dict(seg=seg, x=x, fields=fields, recv=recv, proj_x=proj_x, proj_r=proj_r)
        if mode == "ot":
            unit_x, norm_x, ok_x = _normalize(proj_x)
            unit_r, norm_r, ok_r = _normalize(proj_r)
            utility = unit_x @ np.swapaxes(unit_r, -1, -2)
            logits = x @ params.W_rho
            log_a = log_softmax(logits)
            log_b = np.full(m, -math.log(m))
            log_kernel = (utility - 1.0) / params.epsilon
            block, fs, gs = _sinkhorn_log(log_kernel, log_a, log_b, params.sinkhorn_iters)
            row_marg[:, seg.token_start:seg.token_stop] = np.exp(log_a)
            c.update(unit_x=unit_x, norm_x=norm_x, ok_x=ok_x, unit_r=unit_r, norm_r=norm_r,
                     ok_r=ok_r, log_a=log_a, log_b=log_b, log_kernel=log_kernel, fs=fs, gs=gs,
                     block=block)
        else:
            scores = proj_x @ np.swapaxes(proj_r, -1, -2) / math.sqrt(params.W_u.shape[1])
            member = fields > 0
            weights = _softmax(np.where(member, scores, -np.inf), axis=-2)
            block = weights / m
            row_marg[:, seg.token_start:seg.token_stop] = block.sum(axis=-1)
            c.update(weights=weights, block=block)
        plan[:, seg.token_start:seg.token_stop, seg.slot_start:seg.slot_stop] = block
        blocks.append(c)
    cache = dict(mode=mode, params=params, anchors=anchors, segments=segments, blocks=blocks,
                 row_marg=row_marg)
    return plan, cache


def width_backward(cache, g_plan: np.ndarray):
    """Returns ``(g_anchors, {"W_u": ..., "W_rho": ...})``."""
    params = cache["params"]
    W_u, W_rho = params.W_u, params.W_rho
    g_anchors = np.zeros_like(cache["anchors"])
    g_W_u = np.zeros_like(W_u, dtype=np.float64)
    g_W_rho = np.zeros_like(W_rho, dtype=np.float64)
    for c in cache["blocks"]:
        seg = c["seg"]
        g_block = g_plan[:, seg.token_start:seg.token_stop, seg.slot_start:seg.slot_stop]
        x = c["x"]
        if cache["mode"] == "ot":
            g_logk, g_loga = _sinkhorn_log_backward(
                c["log_kernel"], c["log_a"], c["log_b"], c["fs"], c["gs"], c["block"], g_block)
            g_util = g_logk / params.epsilon
            g_unit_x = g_util @ c["unit_r"]
            g_unit_r = np.swapaxes(g_util, -1, -2) @ c["unit_x"]
            g_proj_x = _normalize_backward(c["unit_x"], c["norm_x"], c["ok_x"], g_unit_x)
            g_proj_r = _normalize_backward(c["unit_r"], c["norm_r"], c["ok_r"], g_unit_r)
            g_logits = g_loga - np.exp(c["log_a"]) * g_loga.sum(axis=-1, keepdims=True)
            g_x = g_logits[..., None] * W_rho
            g_W_rho += np.einsum("btd,bt->d", x, g_logits, optimize=True)
        else:
            w = c["weights"]
            g_w = g_block / seg.num_slots
            g_scores = w * (g_w - np.sum(w * g_w, axis=-2, keepdims=True))
            g_scores /= math.sqrt(W_u.shape[1])
            g_proj_x = g_scores @ c["proj_r"]
            g_proj_r = np.swapaxes(g_scores, -1, -2) @ c["proj_x"]
            g_x = np.zeros_like(x)
        g_x = g_x + g_proj_x @ W_u.T
        g_W_u += np.einsum("btd,btu->du", x, g_proj_x, optimize=True)
        g_W_u += np.einsum("bkd,bku->du", c["recv"], g_proj_r, optimize=True)
        g_x += np.einsum("tk,bkd->btd", c["fields"], g_proj_r @ W_u.T, optimize=True)
        g_anchors[:, seg.token_start:seg.token_stop] += g_x
    return g_anchors, {"W_u": g_W_u, "W_rho": g_W_rho}


def _to_plan(plan, cache) -> TransmissionPlan:
    segments = cache["segments"]
    col = np.concatenate([np.full(s.num_slots, 1.0 / s.num_slots) for s in segments])
    residual = 0.0
    for c in cache["blocks"]:
        seg = c["seg"]
        rows = c["block"][0].sum(axis=-1)
        residual = max(residual, float(np.max(np.abs(rows - cache["row_marg"][0, seg.token_start:seg.token_stop]))))
    return TransmissionPlan(plan[0], segments, cache["row_marg"][0], col, residual)


def segmented_plan(anchors, params: WidthParams) -> TransmissionPlan:
    x = _anchor_array(anchors)
    plan, cache = width_forward(x[None], params, "ot")
    return _to_plan(plan, cache)


def window_attention_baseline(anchors, params: WidthParams) -> TransmissionPlan:
    x = _anchor_array(anchors)
    plan, cache = width_forward(x[None], params, "window")
    return _to_plan(plan, cache)
