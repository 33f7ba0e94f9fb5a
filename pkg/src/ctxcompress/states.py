"""Frozen hidden states, the ``.hst`` file format, a synthetic frozen encoder
and the synthetic key-value retrieval task.

The ``.hst`` layout is::

    b"CXITHST1"
    {"version":1,"L":..,"N":..,"d":..,"dtype":"f32","layout":"layer_token_dim"}\n
    L*N*d little-endian float32, index ((l*N)+t)*d + i
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    FormatError,
    InvalidArgumentError,
    MagicMismatchError,
    ShapeMismatchError,
    TruncatedPayloadError,
    UnsupportedDtypeError,
    VersionMismatchError,
)
from .numerics import Rng

HST_MAGIC = b"CXITHST1"
HST_VERSION = 1
ENCODER_WINDOW = 8
# Deep layers add context on top of the lexical signal instead of replacing it.
ENCODER_RESIDUAL_GAIN = 0.25


@dataclass(frozen=True)
class HiddenStates:
    """Per-layer, per-token representations, shape ``(L, N, d)``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3 or min(v.shape) < 1:
            raise InvalidArgumentError(f"hidden states must be (L, N, d) with all dims >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidArgumentError("hidden states contain non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def num_layers(self) -> int:
        return self.values.shape[0]

    @property
    def seq_len(self) -> int:
        return self.values.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.values.shape[2]

    def layer(self, index: int) -> np.ndarray:
        """The ``N x d`` slice of layer ``index`` (zero-based)."""
        return self.values[index]


def save_states(h: HiddenStates, path: str | os.PathLike) -> None:
    L, N, d = h.values.shape
    header = {"version": HST_VERSION, "L": L, "N": N, "d": d, "dtype": "f32",
              "layout": "layer_token_dim"}
    payload = np.ascontiguousarray(h.values, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(HST_MAGIC)
        fh.write(json.dumps(header, separators=(",", ":")).encode() + b"\n")
        fh.write(payload)


def _read_header(data: bytes, magic: bytes) -> tuple[dict, int]:
    if data[: len(magic)] != magic:
        raise MagicMismatchError(f"expected {magic!r}, got {data[:len(magic)]!r}", "magic")
    end = data.find(b"\n", len(magic))
    if end < 0:
        raise FormatError("header is not newline-terminated", "header")
    try:
        header = json.loads(data[len(magic):end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid JSON ({exc})", "header") from None
    if not isinstance(header, dict):
        raise FormatError("header must be a JSON object", "header")
    return header, end + 1


def load_states(path: str | os.PathLike) -> HiddenStates:
    data = Path(path).read_bytes()
    header, offset = _read_header(data, HST_MAGIC)
    if header.get("version") != HST_VERSION:
        raise VersionMismatchError(f"unsupported version {header.get('version')!r}", "version")
    if header.get("dtype") != "f32":
        raise UnsupportedDtypeError(f"only f32 is defined, got {header.get('dtype')!r}", "dtype")
    if header.get("layout") != "layer_token_dim":
        raise FormatError(f"unknown layout {header.get('layout')!r}", "layout")
    dims = []
    for key in ("L", "N", "d"):
        value = header.get(key)
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            raise ShapeMismatchError(f"dimension must be a positive integer, got {value!r}", key)
        dims.append(value)
    expected = dims[0] * dims[1] * dims[2] * 4
    got = len(data) - offset
    if got < expected:
        raise TruncatedPayloadError(f"payload has {got} bytes, header implies {expected}", "payload")
    if got > expected:
        raise ShapeMismatchError(f"payload has {got} bytes, header implies {expected}", "payload")
    values = np.frombuffer(data, dtype="<f4", count=expected // 4, offset=offset)
    return HiddenStates(values.reshape(dims).astype(np.float32))


def _causal_window_mean(x: np.ndarray, window: int) -> np.ndarray:
    """Mean over positions ``max(0, t-window+1) .. t`` along axis -2."""
    n = x.shape[-2]
    csum = np.cumsum(x, axis=-2)
    lagged = np.zeros_like(csum)
    if n > window:
        lagged[..., window:, :] = csum[..., :-window, :]
    counts = np.minimum(np.arange(1, n + 1), window).astype(x.dtype)
    return (csum - lagged) / counts[:, None]


@dataclass(frozen=True)
class SyntheticEncoder:
    """Deterministic frozen stand-in for an LLM forward pass.

    Layer 1 averages each token embedding with the causal running mean of the
    prefix. Each further layer adds ``g * (tanh(A m_t + b) - tanh(A h_t + b))``
    where ``m_t`` is the mean over the last ``window`` positions and ``g`` is
    ``residual_gain``, so the residual vanishes when the context equals the
    token itself. Deeper layers therefore carry progressively more context.
    """

    vocab_size: int
    num_layers: int
    hidden_dim: int
    seed: int = 0
    window: int = ENCODER_WINDOW
    residual_gain: float = ENCODER_RESIDUAL_GAIN
    embedding: np.ndarray = field(init=False, repr=False)
    mix_weights: np.ndarray = field(init=False, repr=False)
    mix_bias: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if min(self.vocab_size, self.num_layers, self.hidden_dim, self.window) < 1:
            raise InvalidArgumentError("encoder dimensions must be positive")
        rng = Rng(self.seed).child("synthetic-encoder")
        d = self.hidden_dim
        emb = rng.child("embedding").normal((self.vocab_size, d))
        w = rng.child("mix").normal((max(self.num_layers - 1, 0), d, d), std=2.0 / np.sqrt(d))
        b = rng.child("bias").normal((max(self.num_layers - 1, 0), d), std=0.1)
        for name, arr in (("embedding", emb), ("mix_weights", w), ("mix_bias", b)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def num_parameters(self) -> int:
        return self.embedding.size + self.mix_weights.size + self.mix_bias.size

    def encode_array(self, tokens) -> np.ndarray:
        """Encode ``(..., N)`` token ids to float64 states ``(..., L, N, d)``."""
        ids = np.asarray(tokens, dtype=np.int64)
        bad = np.argwhere((ids < 0) | (ids >= self.vocab_size))
        if bad.size:
            pos = tuple(int(i) for i in bad[0])
            raise InvalidArgumentError(
                f"token id {int(ids[pos])} at position {pos} outside vocab of {self.vocab_size}")
        e = self.embedding[ids]
        n = ids.shape[-1]
        running = np.cumsum(e, axis=-2) / np.arange(1, n + 1)[:, None]
        h = 0.5 * e + 0.5 * running
        layers = [h]
        for a, b in zip(self.mix_weights, self.mix_bias):
            ctx = _causal_window_mean(h, self.window)
            h = h + self.residual_gain * (np.tanh(ctx @ a + b) - np.tanh(h @ a + b))
            layers.append(h)
        return np.stack(layers, axis=-3)


def synth_encode(tokens: Sequence[int], enc: SyntheticEncoder) -> HiddenStates:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise InvalidArgumentError("tokens must be a non-empty 1-D sequence")
    return HiddenStates(enc.encode_array(ids))


@dataclass(frozen=True)
class RetrievalConfig:
    seq_len: int
    vocab_size: int
    num_pairs: int

    def validate(self) -> None:
        if self.num_pairs < 1:
            raise InvalidArgumentError("num_pairs must be >= 1")
        if self.vocab_size < 2 * self.num_pairs + 2:
            raise InvalidArgumentError(
                f"vocab_size {self.vocab_size} < 2*num_pairs+2 = {2 * self.num_pairs + 2}")
        if self.seq_len < 2 * self.num_pairs:
            raise InvalidArgumentError(f"seq_len {self.seq_len} < 2*num_pairs = {2 * self.num_pairs}")

    @property
    def pool_size(self) -> int:
        """Number of ids reserved for keys (and, separately, for values)."""
        return max(self.num_pairs, (self.vocab_size - 2) // 4)

    @property
    def key_ids(self) -> range:
        return range(0, self.pool_size)

    @property
    def value_ids(self) -> range:
        return range(self.pool_size, 2 * self.pool_size)

    @property
    def filler_ids(self) -> range:
        return range(2 * self.pool_size, self.vocab_size)


@dataclass(frozen=True)
class RetrievalTask:
    tokens: tuple[int, ...]
    query_key: int
    answer_value: int
    pair_positions: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        object.__setattr__(self, "pair_positions", tuple(int(p) for p in self.pair_positions))
        object.__setattr__(self, "query_key", int(self.query_key))
        object.__setattr__(self, "answer_value", int(self.answer_value))

    def check(self) -> None:
        matches = [p for p in self.pair_positions if self.tokens[p] == self.query_key]
        if len(matches) != 1:
            raise InvalidArgumentError(f"expected exactly one pair keyed by {self.query_key}, got {len(matches)}")
        if self.tokens[matches[0] + 1] != self.answer_value:
            raise InvalidArgumentError("answer_value does not follow the query key")

    def to_json(self) -> str:
        return json.dumps({"tokens": list(self.tokens), "query_key": self.query_key,
                           "answer_value": self.answer_value,
                           "pair_positions": list(self.pair_positions)})

    @classmethod
    def from_json(cls, line: str) -> RetrievalTask:
        obj = json.loads(line)
        return cls(obj["tokens"], obj["query_key"], obj["answer_value"], obj["pair_positions"])


def gen_retrieval_batch(rng: Rng, cfg: RetrievalConfig, count: int = 1) -> list[RetrievalTask]:
    """Generate ``count`` tasks, each with ``num_pairs`` planted adjacent pairs.

    Keys, values and filler come from disjoint id pools, so the answer can only
    be recovered through its planted pair.
    """
    cfg.validate()
    n_fill = cfg.seq_len - 2 * cfg.num_pairs
    keys_pool = np.asarray(cfg.key_ids)
    values_pool = np.asarray(cfg.value_ids)
    filler_pool = np.asarray(cfg.filler_ids)
    tasks = []
    for _ in range(count):
        # Pairs and filler tokens are placed as units; choose which units are pairs.
        units = n_fill + cfg.num_pairs
        is_pair = np.zeros(units, dtype=bool)
        is_pair[np.sort(rng.permutation(units)[: cfg.num_pairs])] = True
        keys = keys_pool[rng.permutation(keys_pool.size)[: cfg.num_pairs]]
        values = values_pool[rng.permutation(values_pool.size)[: cfg.num_pairs]]
        fill = filler_pool[rng.integers(0, filler_pool.size, size=n_fill)] if n_fill else []
        tokens, positions = [], []
        pi = fi = 0
        for unit_is_pair in is_pair:
            if unit_is_pair:
                positions.append(len(tokens))
                tokens.extend((int(keys[pi]), int(values[pi])))
                pi += 1
            else:
                tokens.append(int(fill[fi]))
                fi += 1
        q = rng.integers(0, cfg.num_pairs)
        task = RetrievalTask(tokens, int(keys[q]), int(values[q]), positions)
        task.check()
        tasks.append(task)
    return tasks


def save_tasks(tasks: Iterable[RetrievalTask], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for task in tasks:
            fh.write(task.to_json() + "\n")


def load_tasks(path: str | os.PathLike) -> list[RetrievalTask]:
    with open(path, encoding="utf-8") as fh:
        return [RetrievalTask.from_json(line) for line in fh if line.strip()]
