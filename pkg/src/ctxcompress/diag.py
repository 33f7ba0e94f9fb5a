"""Allocation diagnostics: slot correlation, plan spectrum and gate heatmaps."""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DegenerateInputError, InvalidArgumentError
from .numerics import pearson_rows, singular_values, spectrum_entropy_rank
from .slots import compress
from .width import TransmissionPlan


def _plan_array(plan) -> np.ndarray:
    pi = plan.plan if isinstance(plan, TransmissionPlan) else np.asarray(plan, dtype=np.float64)
    if pi.ndim != 2:
        raise InvalidArgumentError(f"plan must be a matrix, got shape {pi.shape}")
    return pi


def plan_correlation(plan, with_flags: bool = False):
    """Pearson correlation between L1-normalized plan columns.

    A zero column yields the sentinel 0 against every other slot and is flagged.
    """
    pi = _plan_array(plan)
    if pi.shape[1] < 2:
        raise InvalidArgumentError(f"need at least 2 slots, got {pi.shape[1]}")
    mass = pi.sum(axis=0)
    cols = np.divide(pi, mass, out=np.zeros_like(pi), where=mass > 0)
    corr, flags = pearson_rows(cols.T)
    return (corr, flags) if with_flags else corr


def within_segment_offdiag(plan: TransmissionPlan, corr: np.ndarray | None = None) -> float:
    """Mean absolute off-diagonal correlation over slot pairs sharing a segment."""
    corr = plan_correlation(plan) if corr is None else corr
    total, count = 0.0, 0
    for seg in plan.segments:
        block = corr[seg.slot_start:seg.slot_stop, seg.slot_start:seg.slot_stop]
        k = block.shape[0]
        if k < 2:
            continue
        total += float(np.abs(block).sum() - np.abs(np.diag(block)).sum())
        count += k * (k - 1)
    if count == 0:
        raise DegenerateInputError("no segment has two or more slots")
    return total / count


@dataclass
class PlanSpectrum:
    values: np.ndarray  # normalized singular values, non-increasing, summing to 1
    erank: float


def plan_spectrum(plan) -> PlanSpectrum:
    pi = _plan_array(plan)
    s = singular_values(pi)
    if s.sum() <= 0:
        raise DegenerateInputError("plan is identically zero")
    return PlanSpectrum(s / s.sum(), spectrum_entropy_rank(s))


@dataclass
class DiagReport:
    correlation: np.ndarray
    spectrum: np.ndarray
    erank: float
    gate_heatmap: np.ndarray  # (N, L)
    meta: dict = field(default_factory=dict)

    def check(self) -> None:
        c = self.correlation
        if not np.allclose(c, c.T, atol=1e-12) or not np.allclose(np.diag(c), 1.0, atol=1e-12):
            raise InvalidArgumentError("correlation must be symmetric with unit diagonal")
        if abs(float(self.spectrum.sum()) - 1.0) > 1e-9:
            raise InvalidArgumentError("spectrum must sum to 1")
        if not np.allclose(self.gate_heatmap.sum(axis=1), 1.0, atol=1e-9):
            raise InvalidArgumentError("gate heatmap rows must sum to 1")


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def build_report(compression, config: dict | None = None, seed: int | None = None) -> DiagReport:
    """Report for one :class:`~ctxcompress.slots.Compression`."""
    spec = plan_spectrum(compression.plan)
    config = dict(config or {})
    meta = {"config": config, "config_hash": config_hash(config), "seed": seed,
            "version": __version__,
            "within_segment_abs_corr": within_segment_offdiag(compression.plan)
            if compression.plan.num_slots > 1 else None}
    report = DiagReport(plan_correlation(compression.plan), spec.values, spec.erank,
                        np.asarray(compression.anchors.gates), meta)
    report.meta["erank"] = spec.erank
    return report


def _write_rows(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in rows:
            writer.writerow([repr(float(v)) for v in np.atleast_1d(row)])


def export_report(report: DiagReport, directory: str | os.PathLike) -> list[Path]:
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "correlation.csv", out / "spectrum.csv", out / "gates.csv", out / "meta.json"]
        _write_rows(paths[0], report.correlation)
        _write_rows(paths[1], report.spectrum)
        _write_rows(paths[2], report.gate_heatmap)
        paths[3].write_text(json.dumps(report.meta, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write report: {exc.strerror}", str(exc.filename or out)) from exc
    return paths


def read_csv_matrix(path: str | os.PathLike) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    return np.array(rows)


def _task_plans(params, tasks, encoder, mode):
    p64 = params.astype(np.float64)
    for task in tasks:
        states = encoder.encode_array(np.asarray(task.tokens))
        yield compress(states, p64.compressor, mode).plan


def mean_plan_erank(params, tasks, encoder, mode: str = "ot") -> float:
    """Mean effective rank of the plans (or window weights) over ``tasks``."""
    values = [plan_spectrum(plan).erank for plan in _task_plans(params, tasks, encoder, mode)]
    return float(np.mean(values))


def mean_within_segment_corr(params, tasks, encoder, mode: str = "ot") -> float:
    values = [within_segment_offdiag(plan) for plan in _task_plans(params, tasks, encoder, mode)]
    return float(np.mean(values))
