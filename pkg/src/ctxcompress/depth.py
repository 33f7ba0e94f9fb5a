"""Depth-wise transmission: per-token gating of hidden states across layers.

For each token ``t`` the layer states are first mixed by a learned prior
``w = softmax(w_logits)`` into a context vector ``hbar_t``. Gating scores
``s[t, l] = <hbar_t W_c, h_t^l W_l + e_l>`` are normalised across layers
with temperature ``tau`` and used to combine the projected states
``h_t^l W_a`` into a token anchor.

Vectors are rows; a "d x p" matrix maps a d-vector to a p-vector by ``x @ W``.
Internal forward/backward functions take a leading batch axis:
``H`` has shape ``(B, L, N, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .numerics import Rng, _softmax
from .states import HiddenStates


@dataclass
class DepthParams:
    w_logits: np.ndarray  # (L,)
    W_c: np.ndarray  # (d, p)
    W_layer: np.ndarray  # (L, d, p), or (1, d, p) when shared across layers
    e_layer: np.ndarray  # (L, p)
    W_a: np.ndarray  # (d, d_a)
    tau: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidArgumentError(f"tau must be positive, got {self.tau}")

    @property
    def num_layers(self) -> int:
        return self.w_logits.shape[0]

    @property
    def shared_layer_proj(self) -> bool:
        return self.W_layer.shape[0] == 1 and self.num_layers > 1

    def check(self, L: int, d: int) -> None:
        p = self.W_c.shape[1]
        expected = {
            "w_logits": (L,), "W_c": (d, p), "e_layer": (L, p), "W_a": (d, self.W_a.shape[1]),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise InvalidArgumentError(
                    f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.W_layer.shape not in ((L, d, p), (1, d, p)):
            raise InvalidArgumentError(f"W_layer has shape {self.W_layer.shape}, expected {(L, d, p)}")


def init_depth_params(rng: Rng, num_layers: int, hidden_dim: int, gate_dim: int = 256,
                      anchor_dim: int | None = None, tau: float = 1.0,
                      shared_layer_proj: bool = False) -> DepthParams:
    """Gaussian projections with zero prior and embeddings.

    ``W_a`` is orthogonal with entry RMS ``1/sqrt(d)``. The two gate projections use
    ``1/sqrt(d) * p**-0.25`` each so that a score, a sum of ``p`` products,
    starts at unit scale and the gate starts soft rather than one-hot.
    """
    L, d, p = num_layers, hidden_dim, gate_dim
    d_a = hidden_dim if anchor_dim is None else anchor_dim
    std = 1.0 / np.sqrt(d)
    gate_std = std * p ** -0.25
    return DepthParams(
        w_logits=np.zeros(L),
        W_c=rng.child("W_c").normal((d, p), gate_std),
        W_layer=rng.child("W_layer").normal((1 if shared_layer_proj else L, d, p), gate_std),
        e_layer=np.zeros((L, p)),
        W_a=rng.child("W_a").orthogonal((d, d_a), np.sqrt(max(d, d_a) / d)),
        tau=tau,
    )


@dataclass
class TokenAnchors:
    anchors: np.ndarray  # (N, d_a)
    gates: np.ndarray  # (N, L)
    context_mix: np.ndarray  # (N, d)


def _as_batch(h) -> np.ndarray:
    values = h.values if isinstance(h, HiddenStates) else np.asarray(h)
    if values.ndim != 3:
        raise InvalidArgumentError(f"expected (L, N, d) hidden states, got shape {values.shape}")
    return values[None].astype(np.float64)


def mix_layers(h, params: DepthParams) -> np.ndarray:
    H = _as_batch(h)
    params.check(H.shape[1], H.shape[3])
    w = _softmax(np.asarray(params.w_logits, dtype=np.float64))
    return np.einsum("l,blnd->bnd", w, H)[0]


def _scores(H, hbar, params):
    query = hbar @ params.W_c  # (B, N, p)
    keys = H @ params.W_layer + params.e_layer[None, :, None, :]  # (B, L, N, p)
    scores = np.sum(keys * query[:, None], axis=-1)  # (B, L, N)
    return np.swapaxes(scores, 1, 2), query, keys


def gate_coefficients(h, mixed, params: DepthParams) -> np.ndarray:
    H = _as_batch(h)
    params.check(H.shape[1], H.shape[3])
    hbar = np.asarray(mixed, dtype=np.float64)
    if hbar.shape != H.shape[2:]:
        raise InvalidArgumentError(f"mixed context has shape {hbar.shape}, expected {H.shape[2:]}")
    s, _, _ = _scores(H, hbar[None], params)
    return _softmax(s / params.tau, axis=-1)[0]


def build_anchors(h, params: DepthParams) -> TokenAnchors:
    H = _as_batch(h)
    params.check(H.shape[1], H.shape[3])
    anchors, cache = depth_forward(H, params)
    return TokenAnchors(anchors[0], cache["alpha"][0], cache["hbar"][0])


def depth_forward(H: np.ndarray, params: DepthParams):
    """Batched forward. Returns anchors ``(B, N, d_a)`` and a backward cache."""
    w = _softmax(np.asarray(params.w_logits, dtype=np.float64))
    hbar = np.tensordot(w, H, axes=(0, 1))
    s, query, keys = _scores(H, hbar, params)
    alpha = _softmax(s / params.tau, axis=-1)  # (B, N, L)
    projected = H @ params.W_a  # (B, L, N, d_a)
    anchors = np.sum(np.swapaxes(alpha, 1, 2)[..., None] * projected, axis=1)
    cache = dict(H=H, w=w, hbar=hbar, query=query, keys=keys, alpha=alpha,
                 projected=projected, params=params)
    return anchors, cache


def _outer_sum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``sum_rows a^T b`` over all leading axes: ``(..., i), (..., j) -> (i, j)``."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def depth_backward(cache, g_anchors: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the depth parameters given ``dLoss/d anchors``."""
    H, w, alpha, params = cache["H"], cache["w"], cache["alpha"], cache["params"]
    L = H.shape[1]
    alpha_t = np.swapaxes(alpha, 1, 2)  # (B, L, N)
    g_alpha_t = np.sum(cache["projected"] * g_anchors[:, None], axis=-1)
    g_projected = alpha_t[..., None] * g_anchors[:, None]
    g_W_a = _outer_sum(H, g_projected)

    g_s_t = alpha_t * (g_alpha_t - np.sum(alpha_t * g_alpha_t, axis=1, keepdims=True)) / params.tau
    g_query = np.sum(g_s_t[..., None] * cache["keys"], axis=1)
    g_keys = g_s_t[..., None] * cache["query"][:, None]  # (B, L, N, p)
    by_layer = lambda x: np.swapaxes(x, 0, 1).reshape(L, -1, x.shape[-1])  # noqa: E731
    g_W_layer = np.swapaxes(by_layer(H), 1, 2) @ by_layer(g_keys)
    if params.W_layer.shape[0] == 1:
        g_W_layer = g_W_layer.sum(axis=0, keepdims=True)
    g_e = g_keys.sum(axis=(0, 2))
    g_W_c = _outer_sum(cache["hbar"], g_query)
    g_hbar = g_query @ params.W_c.T
    g_w = np.sum(H * g_hbar[:, None], axis=(0, 2, 3))
    g_w_logits = w * (g_w - np.dot(w, g_w))
    return {"w_logits": g_w_logits, "W_c": g_W_c, "W_layer": g_W_layer,
            "e_layer": g_e, "W_a": g_W_a}
