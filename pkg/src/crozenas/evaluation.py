"""Rank correlation, robustness metrics and benchmark tables."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import space
from .tensor import forward_trace

DEFAULT_METRICS = ("clean", "fgsm_eps8", "fgsm_eps4", "pgd",
                   "cc_weather", "cc_noise", "cc_blur", "cc_digital")

# (low, high) accuracy range each synthetic metric spans across planted quality
SYNTH_RANGES = {
    "clean": (40.0, 94.0),
    "fgsm_eps8": (8.0, 50.0),
    "fgsm_eps4": (15.0, 62.0),
    "pgd": (3.0, 40.0),
    "cc_weather": (30.0, 80.0),
    "cc_noise": (20.0, 70.0),
    "cc_blur": (25.0, 75.0),
    "cc_digital": (30.0, 78.0),
}


class UndefinedCorrelation(ArithmeticError):
    """Correlation with a constant sequence."""


class BenchmarkError(ValueError):
    pass


def average_ranks(values):
    """1-based ranks with ties sharing the mean of their positions."""
    a = np.asarray(values, dtype=np.float64).ravel()
    order = np.argsort(a, kind="mergesort")
    sorted_a = a[order]
    # boundaries of tie groups in sorted order
    starts = np.flatnonzero(np.r_[True, sorted_a[1:] != sorted_a[:-1]])
    ends = np.r_[starts[1:], a.size]
    ranks = np.empty(a.size)
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + e - 1) + 1.0
    return ranks


def pearson(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("correlation undefined for a constant sequence")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def spearman(xs, ys) -> float:
    xs = np.asarray(xs, dtype=np.float64).ravel()
    ys = np.asarray(ys, dtype=np.float64).ravel()
    if xs.size != ys.size:
        raise ValueError(f"length mismatch: {xs.size} vs {ys.size}")
    if xs.size < 2:
        raise ValueError("need at least 2 pairs")
    return pearson(average_ranks(xs), average_ranks(ys))


def hrs(clean: float, robust: float) -> float:
    """Harmonic mean of clean and robust accuracy; 0 when both are 0."""
    if clean < 0 or robust < 0:
        raise ValueError("accuracies must be non-negative")
    if clean + robust == 0:
        return 0.0
    return 2.0 * clean * robust / (clean + robust)


def accuracy(logits, labels) -> float:
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"logits {logits.shape} do not match {labels.shape[0]} labels")
    # np.argmax returns the first (lowest) index on ties
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def feature_distance_report(plan, params, clean, perturbed):
    """Per-layer feature distances between a clean batch and perturbed copies.

    ``perturbed`` maps a perturbation name to a batch of the same shape and
    labels. Returns ``{"layers": {layer_id: {name: {"mean", "std"}, ...,
    "cross_std": float}}, "perturbations": [...]}``; ``cross_std`` is the
    standard deviation of the per-perturbation mean distances.
    """
    base = forward_trace(plan, params, clean.images).features
    names = list(perturbed)
    stats = {l.layer_id: {} for l in plan.layers}
    for name in names:
        b = perturbed[name]
        if b.images.shape != clean.images.shape:
            raise ValueError(f"batch {name!r} has shape {b.images.shape}, expected {clean.images.shape}")
        if not np.array_equal(b.labels, clean.labels):
            raise ValueError(f"batch {name!r} labels differ from the clean batch")
        feats = forward_trace(plan, params, b.images).features
        for layer, z, zp in zip(plan.layers, base, feats):
            d = np.linalg.norm((z - zp).reshape(len(clean), -1), axis=1)
            stats[layer.layer_id][name] = {"mean": float(d.mean()), "std": float(d.std())}
    for per in stats.values():
        means = [per[n]["mean"] for n in names]
        per["cross_std"] = float(np.std(means)) if means else 0.0
    return {"perturbations": names, "layers": stats}


# -- benchmark tables ------------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkTable:
    metrics: tuple
    rows: dict = field(default_factory=dict)  # encoding -> {metric: value}

    def __post_init__(self):
        for enc, row in self.rows.items():
            missing = [m for m in self.metrics if m not in row]
            if missing:
                raise BenchmarkError(f"{enc}: missing metric(s) {missing}")
            for m in self.metrics:
                if not 0.0 <= row[m] <= 100.0:
                    raise BenchmarkError(f"{enc}: {m}={row[m]} outside [0, 100]")

    def __len__(self):
        return len(self.rows)

    def __contains__(self, encoding):
        return encoding in self.rows

    def get(self, encoding, metric):
        row = self.rows.get(encoding)
        return None if row is None else row[metric]

    def column(self, metric):
        return {e: r[metric] for e, r in self.rows.items()}

    def to_csv(self, fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("encoding",) + tuple(self.metrics))
        for enc, row in self.rows.items():
            w.writerow([enc] + [repr(float(row[m])) for m in self.metrics])


def load_benchmark(path, schema=None) -> BenchmarkTable:
    """Read a benchmark CSV (``encoding,<metric>...``); errors cite line numbers."""
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_benchmark(fh, schema)


def parse_benchmark(fh, schema=None) -> BenchmarkTable:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise BenchmarkError("line 1: empty benchmark file") from None
    if not header or header[0] != "encoding":
        raise BenchmarkError("line 1: first column must be 'encoding'")
    columns = tuple(h.strip() for h in header[1:])
    metrics = tuple(schema) if schema is not None else columns
    for m in metrics:
        if m not in columns:
            raise BenchmarkError(f"line 1: missing metric column {m!r}")
    pos = {m: columns.index(m) + 1 for m in metrics}
    rows = {}
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise BenchmarkError(f"line {lineno}: expected {len(header)} fields, got {len(rec)}")
        enc = rec[0]
        if enc in rows:
            raise BenchmarkError(f"line {lineno}: duplicate encoding {enc}")
        row = {}
        for m in metrics:
            try:
                v = float(rec[pos[m]])
            except ValueError:
                raise BenchmarkError(f"line {lineno}: unparsable {m} value {rec[pos[m]]!r}") from None
            if not 0.0 <= v <= 100.0:
                raise BenchmarkError(f"line {lineno}: {m}={v} outside [0, 100]")
            row[m] = v
        rows[enc] = row
    return BenchmarkTable(metrics, rows)


def additive_quality(kind=space.NB201, seed=0):
    """Planted latent quality: a seeded per-(slot, op) additive landscape in [0, 1]."""
    rng = np.random.default_rng(seed)
    pool = space.POOLS[kind]
    n_slots = 6 if kind == space.NB201 else 8
    weights = rng.uniform(0.0, 1.0, size=(n_slots, len(pool)))
    lo, hi = weights.min(axis=1).sum(), weights.max(axis=1).sum()
    index = {op: i for i, op in enumerate(pool)}

    def quality(cell):
        if isinstance(cell, str):
            cell = space.decode(cell)
        raw = sum(weights[s, index[op]] for s, op in enumerate(cell.ops))
        return float((raw - lo) / (hi - lo))

    return quality


def synth_benchmark(encodings, planted_fn, noise, rng, metrics=DEFAULT_METRICS) -> BenchmarkTable:
    """Metrics as increasing affine maps of planted quality plus U(-noise, noise).

    Quality is min-max normalised over ``encodings`` before mapping into each
    metric's range; values are clipped to [0, 100].
    """
    encodings = list(encodings)
    if isinstance(encodings[0], space.CellSpec):
        encodings = [space.encode(c) for c in encodings]
    q = np.array([planted_fn(e) for e in encodings], dtype=np.float64)
    span = q.max() - q.min()
    q = (q - q.min()) / span if span > 0 else np.zeros_like(q)
    columns = {}
    for m in metrics:
        lo, hi = SYNTH_RANGES.get(m, (20.0, 80.0))
        col = lo + (hi - lo) * q
        if noise > 0:
            col = col + rng.uniform(-noise, noise, size=col.shape)
        columns[m] = np.clip(col, 0.0, 100.0)
    rows = {e: {m: float(columns[m][i]) for m in metrics} for i, e in enumerate(encodings)}
    return BenchmarkTable(tuple(metrics), rows)


# -- correlation reports -----------------------------------------------------------

@dataclass
class CorrelationReport:
    n: int
    rho: dict  # metric -> float, or None when undefined
    errors: dict
    average: float | None

    def to_dict(self):
        return {"n": self.n, "rho": self.rho, "errors": self.errors, "avg": self.average}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def to_text(self):
        names = list(self.rho) + ["Avg."]
        vals = [_fmt(self.rho[m]) for m in self.rho] + [_fmt(self.average)]
        width = [max(len(a), len(b)) for a, b in zip(names, vals)]
        head = "  ".join(n.rjust(w) for n, w in zip(names, width))
        body = "  ".join(v.rjust(w) for v, w in zip(vals, width))
        lines = [f"n = {self.n}", head, body]
        lines += [f"{m}: {e}" for m, e in self.errors.items()]
        return "\n".join(lines) + "\n"


def _fmt(v):
    return "undef" if v is None else f"{v:.4f}"


def correlate(scores, table: BenchmarkTable, metrics=None) -> CorrelationReport:
    """Spearman rho per metric over encodings present in both inputs.

    A metric whose correlation is undefined is reported as an error and left
    out of the average; the other metrics are unaffected.
    """
    metrics = tuple(metrics) if metrics else table.metrics
    for m in metrics:
        if m not in table.metrics:
            raise BenchmarkError(f"metric {m!r} not in benchmark table")
    common = [e for e in scores if e in table]
    if len(common) < 2:
        raise ValueError(f"only {len(common)} encoding(s) shared by scores and table; need >= 2")
    xs = [scores[e] for e in common]
    rho, errors = {}, {}
    for m in metrics:
        try:
            rho[m] = spearman(xs, [table.rows[e][m] for e in common])
        except UndefinedCorrelation as exc:
            rho[m] = None
            errors[m] = str(exc)
    defined = [v for v in rho.values() if v is not None]
    avg = float(np.mean(defined)) if defined else None
    return CorrelationReport(len(common), rho, errors, avg)
