"""Desk-scale training on the synthetic retrieval task.

The compressor output is consumed by a small retrieval head: the query key's
embedding attends over the aligned slots (scaled dot product), the pooled
vector is projected to vocabulary logits, and the loss is cross-entropy
against the answer value. Gradients are derived by hand for every stage,
including the unrolled Sinkhorn iterations.

Master parameters and Adam moments are kept in float32 (the checkpoint
precision), while every forward and backward pass runs in float64. This makes
checkpoint save/load exact: a resumed run follows the same trajectory.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .depth import depth_backward
from .errors import (
    InvalidArgumentError,
    ShapeMismatchError,
    TrainingDivergenceError,
    TruncatedPayloadError,
    UnsupportedDtypeError,
    VersionMismatchError,
)
from .numerics import Rng, _softmax, finite_diff_gradient, log_softmax
from .slots import CompressedSlots, CompressorParams, compress_batch, init_compressor_params, slots_backward
from .states import RetrievalConfig, RetrievalTask, SyntheticEncoder, _read_header, gen_retrieval_batch
from .width import width_backward

CKPT_MAGIC = b"CXITCKP1"
CKPT_VERSION = 1

# Canonical parameter order: (flat name, owner attribute, field name).
PARAM_ORDER = (
    ("depth.w_logits", "depth", "w_logits"),
    ("depth.W_c", "depth", "W_c"),
    ("depth.W_layer", "depth", "W_layer"),
    ("depth.e_layer", "depth", "e_layer"),
    ("depth.W_a", "depth", "W_a"),
    ("width.W_u", "width", "W_u"),
    ("width.W_rho", "width", "W_rho"),
    ("slot.W_g", "slot", "W_g"),
    ("slot.W1", "slot", "W1"),
    ("slot.b1", "slot", "b1"),
    ("slot.W2", "slot", "W2"),
    ("slot.b2", "slot", "b2"),
    ("head.query_emb", "head", "query_emb"),
    ("head.W_out", "head", "W_out"),
)
PARAM_NAMES = tuple(name for name, _, _ in PARAM_ORDER)


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and hyperparameters of the compressor and retrieval head."""

    vocab_size: int = 64
    num_layers: int = 4
    hidden_dim: int = 32
    gate_dim: int = 256
    anchor_dim: int | None = None
    proj_dim: int = 256
    mlp_hidden: int = 256
    dec_dim: int | None = None
    tau: float = 1.0
    shared_layer_proj: bool = False
    epsilon: float = 0.05
    segment_len: int = 128
    sinkhorn_iters: int = 30
    ratio: int = 4
    mode: str = "ot"
    encoder_seed: int = 0
    # Head weights start at this scale and slot outputs at its inverse. Adam
    # steps are scale-free, so this sets how fast the head moves relative to
    # its inputs without touching the shared learning rate.
    head_init_scale: float = 0.01

    @property
    def d_a(self) -> int:
        return self.hidden_dim if self.anchor_dim is None else self.anchor_dim

    @property
    def d_dec(self) -> int:
        return self.d_a if self.dec_dim is None else self.dec_dim

    def encoder(self) -> SyntheticEncoder:
        return SyntheticEncoder(self.vocab_size, self.num_layers, self.hidden_dim, self.encoder_seed)


@dataclass
class HeadParams:
    query_emb: np.ndarray  # (vocab, d_dec)
    W_out: np.ndarray  # (d_dec, vocab)


@dataclass
class ModuleParams:
    depth: object
    width: object
    slot: object
    head: HeadParams
    config: ModelConfig

    @property
    def compressor(self) -> CompressorParams:
        return CompressorParams(self.depth, self.width, self.slot)

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(getattr(self, owner), attr) for name, owner, attr in PARAM_ORDER}

    def replace(self, tensors: dict[str, np.ndarray]) -> ModuleParams:
        """Copy with the named tensors substituted."""
        parts = {owner: dataclasses.replace(getattr(self, owner)) for owner in ("depth", "width", "slot", "head")}
        for name, owner, attr in PARAM_ORDER:
            if name in tensors:
                setattr(parts[owner], attr, tensors[name])
        return ModuleParams(parts["depth"], parts["width"], parts["slot"], parts["head"], self.config)

    def astype(self, dtype) -> ModuleParams:
        return self.replace({k: np.asarray(v, dtype=dtype) for k, v in self.tensors().items()})

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.asarray(v, dtype=np.float64).ravel() for v in self.tensors().values()])

    def unflatten(self, flat: np.ndarray) -> ModuleParams:
        out, offset = {}, 0
        for name, value in self.tensors().items():
            out[name] = np.asarray(flat[offset:offset + value.size], dtype=np.float64).reshape(value.shape)
            offset += value.size
        if offset != flat.size:
            raise InvalidArgumentError(f"flat vector has {flat.size} entries, expected {offset}")
        return self.replace(out)

    def counts(self) -> dict[str, int]:
        return {name: int(v.size) for name, v in self.tensors().items()}

    @property
    def num_parameters(self) -> int:
        return sum(self.counts().values())


def init_module_params(rng: Rng, cfg: ModelConfig) -> ModuleParams:
    comp = init_compressor_params(
        rng.child("compressor"), cfg.num_layers, cfg.hidden_dim, gate_dim=cfg.gate_dim,
        anchor_dim=cfg.anchor_dim, proj_dim=cfg.proj_dim, mlp_hidden=cfg.mlp_hidden,
        out_dim=cfg.dec_dim, tau=cfg.tau, shared_layer_proj=cfg.shared_layer_proj,
        epsilon=cfg.epsilon, segment_len=cfg.segment_len, sinkhorn_iters=cfg.sinkhorn_iters,
        ratio=cfg.ratio, out_gain=1.0 / cfg.head_init_scale)
    head_rng = rng.child("head")
    head = HeadParams(
        query_emb=head_rng.child("query_emb").normal((cfg.vocab_size, cfg.d_dec), cfg.head_init_scale),
        W_out=head_rng.child("W_out").normal((cfg.d_dec, cfg.vocab_size), cfg.head_init_scale / np.sqrt(cfg.d_dec)),
    )
    return ModuleParams(comp.depth, comp.width, comp.slot, head, cfg)


def _head_forward(aligned, queries, answers, head: HeadParams, weight: float):
    B, K, d = aligned.shape
    qv = head.query_emb[queries]  # (B, d)
    scores = np.einsum("bkd,bd->bk", aligned, qv, optimize=True) / math.sqrt(d)
    attn = _softmax(scores, axis=-1)
    pooled = np.einsum("bk,bkd->bd", attn, aligned, optimize=True)
    logits = pooled @ head.W_out
    logp = log_softmax(logits, axis=-1)
    nll = -logp[np.arange(B), answers]
    cache = dict(aligned=aligned, queries=queries, answers=answers, qv=qv, attn=attn,
                 pooled=pooled, logp=logp, weight=weight)
    return weight * float(np.mean(nll)), nll, cache


def _head_backward(cache, head: HeadParams):
    aligned, attn, qv = cache["aligned"], cache["attn"], cache["qv"]
    B, K, d = aligned.shape
    g_logits = np.exp(cache["logp"])
    g_logits[np.arange(B), cache["answers"]] -= 1.0
    g_logits *= cache["weight"] / B
    g_W_out = cache["pooled"].T @ g_logits
    g_pooled = g_logits @ head.W_out.T
    g_attn = np.einsum("bd,bkd->bk", g_pooled, aligned, optimize=True)
    g_aligned = np.einsum("bk,bd->bkd", attn, g_pooled, optimize=True)
    g_scores = attn * (g_attn - np.sum(attn * g_attn, axis=-1, keepdims=True)) / math.sqrt(d)
    g_aligned += np.einsum("bk,bd->bkd", g_scores, qv, optimize=True)
    g_qv = np.einsum("bk,bkd->bd", g_scores, aligned, optimize=True)
    g_query_emb = np.zeros(head.query_emb.shape)
    np.add.at(g_query_emb, cache["queries"], g_qv)
    return g_aligned, {"query_emb": g_query_emb, "W_out": g_W_out}


@dataclass
class Batch:
    states: np.ndarray  # (B, L, N, d)
    queries: np.ndarray  # (B,)
    answers: np.ndarray  # (B,)


def make_batch(tasks: Sequence[RetrievalTask], encoder: SyntheticEncoder) -> Batch:
    tokens = np.array([t.tokens for t in tasks], dtype=np.int64)
    return Batch(encoder.encode_array(tokens),
                 np.array([t.query_key for t in tasks], dtype=np.int64),
                 np.array([t.answer_value for t in tasks], dtype=np.int64))


def batch_loss(batch: Batch, params: ModuleParams, weight: float = 1.0, mode: str | None = None):
    """Forward only. Returns ``(mean loss, per-sample nll, predicted ids)``."""
    aligned, _ = compress_batch(batch.states, params.compressor, mode or params.config.mode)
    loss, nll, cache = _head_forward(aligned, batch.queries, batch.answers, params.head, weight)
    return loss, nll, np.argmax(cache["logp"], axis=-1)


def loss_and_grad(batch: Batch, params: ModuleParams, weight: float = 1.0,
                  mode: str | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Mean retrieval loss over the batch and its gradient for every group."""
    aligned, cache = compress_batch(batch.states, params.compressor, mode or params.config.mode)
    loss, _, head_cache = _head_forward(aligned, batch.queries, batch.answers, params.head, weight)
    g_aligned, g_head = _head_backward(head_cache, params.head)
    g_anchors, g_plan, g_slot = slots_backward(cache["slot"], g_aligned)
    g_anchors_w, g_width = width_backward(cache["width"], g_plan)
    g_depth = depth_backward(cache["depth"], g_anchors + g_anchors_w)
    grads = {}
    for prefix, group in (("depth", g_depth), ("width", g_width), ("slot", g_slot), ("head", g_head)):
        grads.update({f"{prefix}.{k}": v for k, v in group.items()})
    return loss, {name: grads[name] for name in PARAM_NAMES}


def retrieval_loss(slots: CompressedSlots | np.ndarray, task: RetrievalTask, params: ModuleParams,
                   weight: float = 1.0) -> tuple[float, np.ndarray]:
    """Loss and predicted vocabulary distribution for one task."""
    aligned = slots.aligned if isinstance(slots, CompressedSlots) else np.asarray(slots, dtype=np.float64)
    vocab = params.head.query_emb.shape[0]
    if not 0 <= task.query_key < vocab:
        raise InvalidArgumentError(f"query key {task.query_key} outside vocab of {vocab}")
    loss, _, cache = _head_forward(aligned[None], np.array([task.query_key]), np.array([task.answer_value]),
                                   params.head, weight)
    if not math.isfinite(loss):
        raise TrainingDivergenceError("non-finite retrieval loss")
    return loss, np.exp(cache["logp"][0])


def backward(h, task: RetrievalTask, params: ModuleParams, weight: float = 1.0) -> np.ndarray:
    """Flat gradient of the single-task loss in canonical parameter order."""
    values = h.values if hasattr(h, "values") else np.asarray(h)
    batch = Batch(np.asarray(values, dtype=np.float64)[None], np.array([task.query_key]),
                  np.array([task.answer_value]))
    _, grads = loss_and_grad(batch, params, weight)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient in {name}", group=name)
    return np.concatenate([g.ravel() for g in grads.values()])


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float):
    """Scale gradients so their joint norm is at most ``max_norm``.

    Returns ``(clipped, raw_norm)``.
    """
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    grad_clip_norm: float = 20.0
    steps: int = 2000
    batch_size: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise InvalidArgumentError("learning_rate must be non-negative")
        if not self.grad_clip_norm > 0:
            raise InvalidArgumentError("grad_clip_norm must be positive")
        if self.steps < 0 or self.batch_size < 1:
            raise InvalidArgumentError("steps must be >= 0 and batch_size >= 1")


@dataclass
class TrainState:
    params: ModuleParams  # float32 master copy
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    seed: int = 0

    @classmethod
    def fresh(cls, params: ModuleParams, seed: int = 0) -> TrainState:
        p32 = params.astype(np.float32)
        zeros = {k: np.zeros(v.shape, dtype=np.float32) for k, v in p32.tensors().items()}
        return cls(p32, zeros, {k: z.copy() for k, z in zeros.items()}, 0, seed)


def adam_update(state: TrainState, grads: dict[str, np.ndarray], cfg: TrainConfig) -> TrainState:
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in state.params.tensors().items():
        g = grads[name]
        m = cfg.beta1 * state.m[name].astype(np.float64) + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name].astype(np.float64) + (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        new_p[name] = (p.astype(np.float64) - cfg.learning_rate * update).astype(np.float32)
        new_m[name] = m.astype(np.float32)
        new_v[name] = v.astype(np.float32)
    return TrainState(state.params.replace(new_p), new_m, new_v, t, state.seed)


class TaskStream:
    """Deterministic source of training batches.

    Batch ``s`` depends only on ``(seed, s)``, so a run resumed from a
    checkpoint sees the same data as an uninterrupted one. With ``tasks``
    given, batches cycle through that list in file order instead.
    """

    def __init__(self, cfg: RetrievalConfig, seed: int, tasks: Sequence[RetrievalTask] | None = None):
        self.cfg = cfg
        self.rng = Rng(seed).child("train-batches")
        self.tasks = list(tasks) if tasks is not None else None

    def batch(self, step: int, size: int) -> list[RetrievalTask]:
        if self.tasks:
            start = (step * size) % len(self.tasks)
            return [self.tasks[(start + i) % len(self.tasks)] for i in range(size)]
        return gen_retrieval_batch(self.rng.child(step), self.cfg, size)


@dataclass
class TrainResult:
    state: TrainState
    history: list[tuple[int, float, float]] = field(default_factory=list)  # (step, loss, grad_norm)

    @property
    def params(self) -> ModuleParams:
        return self.state.params


def train(cfg: TrainConfig, stream: TaskStream, params: ModuleParams | TrainState,
          encoder: SyntheticEncoder | None = None, mode: str | None = None,
          on_step: Callable[[int, float, float], None] | None = None) -> TrainResult:
    """Adam with global-norm clipping. Deterministic given seeds and inputs."""
    cfg.validate()
    state = params if isinstance(params, TrainState) else TrainState.fresh(params, cfg.seed)
    encoder = encoder or state.params.config.encoder()
    history = []
    while state.step < cfg.steps:
        step = state.step
        batch = make_batch(stream.batch(step, cfg.batch_size), encoder)
        # Overflow is detected explicitly below.
        with np.errstate(over="ignore", invalid="ignore"):
            loss, grads = loss_and_grad(batch, state.params.astype(np.float64), mode=mode)
            grads, norm = clip_by_global_norm(grads, cfg.grad_clip_norm)
        if not (math.isfinite(loss) and math.isfinite(norm)):
            bad = next((k for k, g in grads.items() if not np.all(np.isfinite(g))), None)
            raise TrainingDivergenceError(f"non-finite loss/gradient at step {step}", step=step,
                                          group=bad, last_good=state)
        history.append((step, loss, norm))
        if on_step is not None:
            on_step(step, loss, norm)
        with np.errstate(over="ignore", invalid="ignore"):
            new_state = adam_update(state, grads, cfg)
        bad = next((k for k, p in new_state.params.tensors().items() if not np.all(np.isfinite(p))), None)
        if bad is not None:
            raise TrainingDivergenceError(f"parameter overflow at step {step}", step=step, group=bad,
                                          last_good=state)
        state = new_state
    return TrainResult(state, history)


def evaluate(params: ModuleParams, tasks: Sequence[RetrievalTask], encoder: SyntheticEncoder | None = None,
             batch_size: int = 100, mode: str | None = None) -> tuple[float, float]:
    """Mean loss and accuracy over ``tasks``."""
    encoder = encoder or params.config.encoder()
    p64 = params.astype(np.float64)
    total, correct = 0.0, 0
    for i in range(0, len(tasks), batch_size):
        batch = make_batch(tasks[i:i + batch_size], encoder)
        _, nll, pred = batch_loss(batch, p64, mode=mode)
        total += float(np.sum(nll))
        correct += int(np.sum(pred == batch.answers))
    return total / len(tasks), correct / len(tasks)


def _config_to_json(cfg) -> dict:
    return dataclasses.asdict(cfg)


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> None:
    """Magic, JSON header line, then float32 little-endian tensors in header order."""
    arrays = [(name, state.params.tensors()[name]) for name in PARAM_NAMES]
    arrays += [(f"adam.m.{name}", state.m[name]) for name in PARAM_NAMES]
    arrays += [(f"adam.v.{name}", state.v[name]) for name in PARAM_NAMES]
    header = {
        "version": CKPT_VERSION, "seed": state.seed, "step": state.step,
        "model": _config_to_json(state.params.config), "dtype": "f32",
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(json.dumps(header, separators=(",", ":"), sort_keys=True).encode() + b"\n")
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path: str | os.PathLike) -> TrainState:
    data = Path(path).read_bytes()
    header, offset = _read_header(data, CKPT_MAGIC)
    if header.get("version") != CKPT_VERSION:
        raise VersionMismatchError(f"unsupported version {header.get('version')!r}", "version")
    if header.get("dtype") != "f32":
        raise UnsupportedDtypeError(f"only f32 is defined, got {header.get('dtype')!r}", "dtype")
    cfg = ModelConfig(**header["model"])
    tensors = {}
    for spec in header["tensors"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        if offset + 4 * count > len(data):
            raise TruncatedPayloadError(f"payload ends inside tensor {spec['name']}", "payload")
        tensors[spec["name"]] = np.frombuffer(data, "<f4", count, offset).reshape(spec["shape"]).astype(np.float32)
        offset += 4 * count
    if offset != len(data):
        raise ShapeMismatchError(f"{len(data) - offset} trailing payload bytes", "payload")
    template = init_module_params(Rng(0), cfg)
    missing = [n for n in PARAM_NAMES if n not in tensors]
    if missing:
        raise ShapeMismatchError(f"missing tensors {missing}", "tensors")
    for name, value in template.tensors().items():
        if tensors[name].shape != value.shape:
            raise ShapeMismatchError(f"{name} has shape {tensors[name].shape}, expected {value.shape}", name)
    params = template.replace({n: tensors[n] for n in PARAM_NAMES})
    m = {n: tensors.get(f"adam.m.{n}", np.zeros_like(tensors[n])) for n in PARAM_NAMES}
    v = {n: tensors.get(f"adam.v.{n}", np.zeros_like(tensors[n])) for n in PARAM_NAMES}
    return TrainState(params, m, v, int(header["step"]), int(header["seed"]))


def write_history(history: Sequence[tuple[int, float, float]], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,loss,grad_norm\n")
        for step, loss, norm in history:
            fh.write(f"{step},{loss!r},{norm!r}\n")


# Small configuration for finite-difference checks.
GRADCHECK_CONFIG = ModelConfig(vocab_size=10, num_layers=3, hidden_dim=8, gate_dim=8, anchor_dim=8,
                               proj_dim=8, mlp_hidden=8, segment_len=16, ratio=4)


def gradient_check(cfg: ModelConfig = GRADCHECK_CONFIG, seed: int = 0, h: float = 1e-4,
                   seq_len: int = 16, num_pairs: int = 2, num_tasks: int = 2) -> dict[str, float]:
    """Per-group relative error of analytic vs central-difference gradients.

    The error for a group is ``max|analytic - numeric| / max|numeric|``. Each
    group is perturbed on its own while the others stay fixed. Parameters that
    initialise to zero (layer prior, layer embeddings, biases) are randomised
    first so every path carries signal.
    """
    rng = Rng(seed).child("gradcheck")
    params = init_module_params(rng.child("params"), cfg).astype(np.float64)
    noise = rng.child("noise")
    params = params.replace({
        "depth.w_logits": noise.normal(params.depth.w_logits.shape),
        "depth.e_layer": noise.normal(params.depth.e_layer.shape, 0.3),
        "slot.b1": noise.normal(params.slot.b1.shape, 0.1),
        "slot.b2": noise.normal(params.slot.b2.shape, 0.1),
    })
    tasks = gen_retrieval_batch(rng.child("tasks"), RetrievalConfig(seq_len, cfg.vocab_size, num_pairs), num_tasks)
    batch = make_batch(tasks, cfg.encoder())
    _, grads = loss_and_grad(batch, params)
    errors = {}
    for name in PARAM_NAMES:
        base = params.tensors()[name]

        def f(x, name=name, base=base):
            return batch_loss(batch, params.replace({name: x.reshape(base.shape)}))[0]

        numeric = finite_diff_gradient(f, base, h).reshape(base.shape)
        scale = float(np.max(np.abs(numeric)))
        diff = float(np.max(np.abs(grads[name] - numeric)))
        errors[name] = diff / scale if scale > 0 else diff
    return errors
