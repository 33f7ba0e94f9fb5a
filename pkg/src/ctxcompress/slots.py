"""Slot aggregation, MLP alignment and the end-to-end compressor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .depth import DepthParams, TokenAnchors, depth_forward, init_depth_params
from .errors import InvalidArgumentError
from .numerics import Rng
from .states import HiddenStates
from .width import TransmissionPlan, WidthParams, _to_plan, init_width_params, width_forward


@dataclass
class SlotParams:
    W_g: np.ndarray  # (d_a, d_a)
    W1: np.ndarray  # (d_a, m)
    b1: np.ndarray  # (m,)
    W2: np.ndarray  # (m, d_dec)
    b2: np.ndarray  # (d_dec,)


def init_slot_params(rng: Rng, anchor_dim: int, mlp_hidden: int = 256, out_dim: int | None = None,
                     gain: float = 1.0, out_gain: float = 1.0) -> SlotParams:
    """``W_g`` is orthogonal times ``gain``; pass the slots-per-segment count so
    that slots, which each receive column mass ``1/K_seg``, start at anchor
    scale. ``out_gain`` scales the MLP output layer."""
    d_dec = anchor_dim if out_dim is None else out_dim
    return SlotParams(
        W_g=rng.child("W_g").orthogonal((anchor_dim, anchor_dim), gain),
        W1=rng.child("W1").normal((anchor_dim, mlp_hidden), 1.0 / np.sqrt(anchor_dim)),
        b1=np.zeros(mlp_hidden),
        W2=rng.child("W2").normal((mlp_hidden, d_dec), out_gain / np.sqrt(mlp_hidden)),
        b2=np.zeros(d_dec),
    )


@dataclass
class CompressorParams:
    depth: DepthParams
    width: WidthParams
    slot: SlotParams


@dataclass
class CompressedSlots:
    raw: np.ndarray  # (K, d_a)
    aligned: np.ndarray  # (K, d_dec)


@dataclass
class Compression:
    slots: CompressedSlots
    anchors: TokenAnchors
    plan: TransmissionPlan


def aggregate_slots(anchors, plan, params: SlotParams) -> np.ndarray:
    """``z_k = sum_t plan[t, k] * (anchor_t @ W_g)``."""
    x = anchors.anchors if isinstance(anchors, TokenAnchors) else np.asarray(anchors, dtype=np.float64)
    pi = plan.plan if isinstance(plan, TransmissionPlan) else np.asarray(plan, dtype=np.float64)
    if pi.ndim != 2 or pi.shape[0] != x.shape[0] or x.shape[1] != params.W_g.shape[0]:
        raise InvalidArgumentError(f"plan {pi.shape} does not match anchors {x.shape}")
    return pi.T @ (x @ params.W_g)


def align(raw, params: SlotParams) -> np.ndarray:
    """Row-wise two-layer tanh MLP."""
    z = np.asarray(raw, dtype=np.float64)
    if z.shape[-1] != params.W1.shape[0]:
        raise InvalidArgumentError(f"slot width {z.shape[-1]} does not match W1 {params.W1.shape}")
    return np.tanh(z @ params.W1 + params.b1) @ params.W2 + params.b2


def slots_forward(anchors, plan, params: SlotParams):
    projected = anchors @ params.W_g
    raw = np.swapaxes(plan, -1, -2) @ projected
    hidden = np.tanh(raw @ params.W1 + params.b1)
    aligned = hidden @ params.W2 + params.b2
    cache = dict(anchors=anchors, plan=plan, projected=projected, raw=raw, hidden=hidden, params=params)
    return raw, aligned, cache


def slots_backward(cache, g_aligned):
    """Returns ``(g_anchors, g_plan, grads)``."""
    p = cache["params"]
    g_W2 = np.einsum("bkm,bko->mo", cache["hidden"], g_aligned, optimize=True)
    g_b2 = g_aligned.sum(axis=(0, 1))
    g_pre = (g_aligned @ p.W2.T) * (1.0 - cache["hidden"] ** 2)
    g_W1 = np.einsum("bka,bkm->am", cache["raw"], g_pre, optimize=True)
    g_b1 = g_pre.sum(axis=(0, 1))
    g_raw = g_pre @ p.W1.T
    g_plan = cache["projected"] @ np.swapaxes(g_raw, -1, -2)
    g_projected = cache["plan"] @ g_raw
    g_W_g = np.einsum("bta,btc->ac", cache["anchors"], g_projected, optimize=True)
    g_anchors = g_projected @ p.W_g.T
    return g_anchors, g_plan, {"W_g": g_W_g, "W1": g_W1, "b1": g_b1, "W2": g_W2, "b2": g_b2}


def compress_batch(H: np.ndarray, params: CompressorParams, mode: str = "ot"):
    """Batched pipeline on ``(B, L, N, d)`` states. Returns aligned slots and caches."""
    if H.shape[2] < params.width.ratio:
        raise InvalidArgumentError(f"sequence of {H.shape[2]} tokens is shorter than ratio {params.width.ratio}")
    params.depth.check(H.shape[1], H.shape[3])
    anchors, depth_cache = depth_forward(H, params.depth)
    plan, width_cache = width_forward(anchors, params.width, mode)
    raw, aligned, slot_cache = slots_forward(anchors, plan, params.slot)
    return aligned, dict(depth=depth_cache, width=width_cache, slot=slot_cache, raw=raw, plan=plan,
                         anchors=anchors)


def compress(h, params: CompressorParams, mode: str = "ot") -> Compression:
    """Compress one sequence of hidden states into ``K = sum ceil(N_seg / r)`` slots."""
    values = h.values if isinstance(h, HiddenStates) else np.asarray(h)
    if values.ndim != 3:
        raise InvalidArgumentError(f"expected (L, N, d) hidden states, got shape {values.shape}")
    aligned, cache = compress_batch(values[None].astype(np.float64), params, mode)
    anchors = TokenAnchors(cache["anchors"][0], cache["depth"]["alpha"][0], cache["depth"]["hbar"][0])
    plan = _to_plan(cache["plan"], cache["width"])
    return Compression(CompressedSlots(cache["raw"][0], aligned[0]), anchors, plan)


def init_compressor_params(rng: Rng, num_layers: int, hidden_dim: int, *, gate_dim: int = 256,
                           anchor_dim: int | None = None, proj_dim: int = 256, mlp_hidden: int = 256,
                           out_dim: int | None = None, tau: float = 1.0, shared_layer_proj: bool = False,
                           epsilon: float = 0.05, segment_len: int = 128, sinkhorn_iters: int = 30,
                           ratio: int = 4, out_gain: float = 1.0) -> CompressorParams:
    d_a = hidden_dim if anchor_dim is None else anchor_dim
    return CompressorParams(
        depth=init_depth_params(rng.child("depth"), num_layers, hidden_dim, gate_dim, d_a, tau,
                                shared_layer_proj),
        width=init_width_params(rng.child("width"), d_a, proj_dim, epsilon=epsilon,
                                segment_len=segment_len, sinkhorn_iters=sinkhorn_iters, ratio=ratio),
        slot=init_slot_params(rng.child("slot"), d_a, mlp_hidden, out_dim, gain=segment_len // ratio,
                              out_gain=out_gain),
    )
