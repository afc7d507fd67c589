"""The CRoZe consistency proxy and baseline zero-cost scorers."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import space
from .perturb import PerturbConfig, fgsm_from_grad, gaussian_perturb, robust_params
from .tensor import (Batch, GradientSet, ParameterSet, backward, forward_trace, init_params,
                     loss_and_grads)

log = logging.getLogger(__name__)

COMPONENTS = ("feature", "parameter", "gradient")
COMPONENT_LETTERS = {"Z": "feature", "P": "parameter", "G": "gradient"}
PROXY_KINDS = ("croze", "plain", "grad_norm", "synflow", "naswot", "num_params", "flops")
DATA_FREE = ("num_params", "flops")
COS_GUARD = 1e-12
NASWOT_JITTER = 1e-6


class DegenerateArchitecture(ArithmeticError):
    pass


@dataclass(frozen=True)
class ProxyConfig:
    gamma: float = 0.1
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    components: frozenset = frozenset(COMPONENTS)
    seed: int = 0
    include_head: bool = True

    def __post_init__(self):
        comps = frozenset(self.components)
        if not comps or not comps <= set(COMPONENTS):
            raise ValueError(f"components must be a non-empty subset of {COMPONENTS}")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        object.__setattr__(self, "components", comps)

    def to_dict(self):
        d = asdict(self)
        d["components"] = sorted(self.components)
        d["perturb"]["clip"] = list(self.perturb.clip) if self.perturb.clip else None
        return d

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def parse_components(text):
    """``"ZPG"`` style letters (or full names, comma separated) to a set."""
    if "," in text or text.lower() in COMPONENTS:
        names = {t.strip().lower() for t in text.split(",") if t.strip()}
    else:
        try:
            names = {COMPONENT_LETTERS[ch] for ch in text.upper()}
        except KeyError as exc:
            raise ValueError(f"unknown component letter {exc.args[0]!r}; use Z, P, G") from None
    if not names or not names <= set(COMPONENTS):
        raise ValueError(f"bad components {text!r}")
    return frozenset(names)


@dataclass
class LayerScore:
    layer_id: str
    Z: float
    P: float
    G: float
    term: float


@dataclass
class ProxyBreakdown:
    layers: list
    total: float
    M: int
    metadata: dict

    def to_dict(self):
        return {
            "encoding": self.metadata.get("encoding"),
            "total": self.total,
            "M": self.M,
            "layers": [{"id": l.layer_id, "Z": l.Z, "P": l.P, "G": l.G, "term": l.term}
                       for l in self.layers],
            "metadata": self.metadata,
        }

    def recombine(self, components):
        """Total under another component mask, from the stored per-layer values."""
        comps = frozenset(components)
        return float(sum(_product(l.Z, l.P, l.G, comps) for l in self.layers))


def cosine(a, b):
    a = np.ravel(a)
    b = np.ravel(b)
    if a.shape != b.shape:
        raise ValueError(f"cosine of mismatched shapes {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < COS_GUARD or nb < COS_GUARD:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def layer_consistency(z, z_r, theta1_m, theta1r_m, g_m, gr_m):
    """Feature, parameter and gradient consistency for one layer."""
    return (1.0 + cosine(z, z_r),
            1.0 + cosine(theta1_m, theta1r_m),
            abs(cosine(g_m, gr_m)))


def _product(Z, P, G, comps):
    term = 1.0
    if "feature" in comps:
        term *= Z
    if "parameter" in comps:
        term *= P
    if "gradient" in comps:
        term *= G
    return term


def croze(plan, params: ParameterSet, batch: Batch, config: ProxyConfig = ProxyConfig(),
          encoding=None) -> ProxyBreakdown:
    if len(batch) == 0:
        raise ValueError("empty batch")
    pc = config.perturb
    # clean network on clean inputs: features z, gradients g
    clean, _, g, _ = loss_and_grads(plan, params, batch)
    theta_r = robust_params(params, g, pc.beta)
    if pc.input_kind == "fgsm":
        probe = forward_trace(plan, theta_r, batch.images)
        _, x_grad = backward(probe, probe.loss(batch.labels))
        x_adv = fgsm_from_grad(batch.images, x_grad, pc.epsilon, pc.clip)
    else:
        x_adv = gaussian_perturb(batch, pc.sigma, np.random.default_rng(config.seed), pc.clip)
    robust, _, g_r, _ = loss_and_grads(plan, theta_r, batch.with_images(x_adv))

    theta1 = params.zip_map(g, lambda t, gg: t - config.gamma * gg)
    theta1_r = theta_r.zip_map(g_r, lambda t, gg: t - config.gamma * gg)

    ids = plan.layers if config.include_head else plan.layers[:-1]
    index = {l.layer_id: i for i, l in enumerate(plan.layers)}
    layers = []
    for layer in ids:
        m = index[layer.layer_id]
        Z, P, G = layer_consistency(
            clean.features[m], robust.features[m],
            theta1.layer_vector(layer.layer_id), theta1_r.layer_vector(layer.layer_id),
            g.layer_vector(layer.layer_id), g_r.layer_vector(layer.layer_id))
        layers.append(LayerScore(layer.layer_id, Z, P, G, _product(Z, P, G, config.components)))
    total = float(sum(l.term for l in layers))
    meta = {"seed": config.seed, "config_hash": config.digest(), "encoding": encoding}
    return ProxyBreakdown(layers, total, len(layers), meta)


# -- baselines -----------------------------------------------------------------

def plain_score(plan, params, batch):
    _, _, g, _ = loss_and_grads(plan, params, batch)
    return float(sum(np.sum(params[k] * g[k]) for k in params))


def grad_norm_score(plan, params, batch):
    _, _, g, _ = loss_and_grads(plan, params, batch)
    return float(sum(np.linalg.norm(g.layer_vector(l)) for l in g.layer_ids))


def synflow_score(plan, params, batch=None):
    """Sum of |theta * dR/dtheta| with |theta| weights on an all-ones input."""
    abs_params = params.map(lambda _, v: np.abs(v))
    ones = np.ones((1,) + tuple(plan.input_shape))
    trace = forward_trace(plan, abs_params, ones)
    tape = trace.tape
    logits = trace.logits_var
    total = tape.push(np.asarray(logits.value.sum()), (logits,),
                      lambda g: (np.full(logits.shape, float(g)),))
    keys = list(trace.param_vars)
    grads = tape.gradients(total, [trace.param_vars[k] for k in keys])
    return float(sum(np.abs(abs_params[k] * gr).sum() for k, gr in zip(keys, grads)))


def naswot_score(plan, params, batch):
    """log|det K| over binary ReLU activation codes of the batch."""
    trace = forward_trace(plan, params, batch.images)
    conv_ids = {l.layer_id for l in plan.layers if l.kind == "conv"}
    codes = [f.reshape(len(batch), -1) > 0
             for l, f in zip(plan.layers, trace.features) if l.layer_id in conv_ids]
    if not codes:
        raise DegenerateArchitecture("no ReLU units to build activation codes from")
    c = np.concatenate(codes, axis=1).astype(np.float64)
    n_units = c.shape[1]
    k = c @ c.T + (1.0 - c) @ (1.0 - c).T  # = N_A - hamming
    sign, logdet = np.linalg.slogdet(k + NASWOT_JITTER * np.eye(len(k)))
    if sign <= 0 or not np.isfinite(logdet):
        raise DegenerateArchitecture(f"singular activation kernel over {n_units} units")
    return float(logdet)


def baseline_score(kind, plan, params=None, batch=None):
    if kind == "num_params":
        return float(space.count_params(plan))
    if kind == "flops":
        return float(space.count_flops(plan))
    fn = {"plain": plain_score, "grad_norm": grad_norm_score,
          "synflow": synflow_score, "naswot": naswot_score}.get(kind)
    if fn is None:
        raise ValueError(f"unknown baseline proxy {kind!r}")
    return fn(plan, params, batch)


# -- batch harness -------------------------------------------------------------

def candidate_seed(global_seed: int, encoding: str) -> int:
    """Per-candidate seed, independent of evaluation order."""
    digest = hashlib.blake2b(f"{global_seed}:{encoding}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


@dataclass
class ScoreRow:
    encoding: str
    proxy: str
    score: float | None
    M: int | None
    seed: int
    status: str
    breakdown: ProxyBreakdown | None = None

    @property
    def ok(self):
        return self.status == "ok"


@dataclass(frozen=True)
class Scorer:
    """Picklable ``encoding -> ScoreRow`` callable shared by ranking and search."""

    proxy: str = "croze"
    config: ProxyConfig = field(default_factory=ProxyConfig)
    stack: space.StackConfig = field(default_factory=space.StackConfig)
    batch: Batch | None = None
    seed: int = 0

    def __post_init__(self):
        if self.proxy not in PROXY_KINDS:
            raise ValueError(f"unknown proxy {self.proxy!r}; choose from {PROXY_KINDS}")
        if self.proxy not in DATA_FREE and self.batch is None:
            raise ValueError(f"proxy {self.proxy!r} needs a batch")

    def row(self, encoding) -> ScoreRow:
        seed = candidate_seed(self.seed, encoding)
        try:
            cell = space.decode(encoding)
            plan = space.build_plan(cell, self.stack)
            if self.proxy in DATA_FREE:
                return ScoreRow(encoding, self.proxy, baseline_score(self.proxy, plan), plan.M, seed, "ok")
            params = init_params(plan, seed)
            if self.proxy == "croze":
                cfg = ProxyConfig(self.config.gamma, self.config.perturb, self.config.components,
                                  seed, self.config.include_head)
                bd = croze(plan, params, self.batch, cfg, encoding=encoding)
                return ScoreRow(encoding, self.proxy, bd.total, bd.M, seed, "ok", bd)
            value = baseline_score(self.proxy, plan, params, self.batch)
            return ScoreRow(encoding, self.proxy, value, plan.M, seed, "ok")
        except Exception as exc:  # per-row capture; the run continues
            log.warning("scoring %s failed: %s", encoding, exc)
            return ScoreRow(encoding, self.proxy, None, None, seed,
                            f"failed: {type(exc).__name__}: {exc}")

    def __call__(self, cell) -> float:
        enc = cell if isinstance(cell, str) else space.encode(cell)
        row = self.row(enc)
        if not row.ok:
            raise RuntimeError(row.status)
        return row.score


def parallel_map(fn, items, jobs=1):
    """Order-preserving map, over a process pool when ``jobs > 1``."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def score_many(encodings, scorer: Scorer, jobs=1, progress=None):
    """Score every encoding; rows come back in input order."""
    encodings = list(encodings)
    if jobs > 1:
        rows = parallel_map(scorer.row, encodings, jobs)
    else:
        rows = []
        for i, enc in enumerate(encodings):
            rows.append(scorer.row(enc))
            if progress:
                progress(i + 1, len(encodings))
    return rows


SCORE_HEADER = ("encoding", "proxy", "score", "M", "seed", "status")


def format_score(value):
    return "" if value is None else repr(float(value))


def score_rows_to_csv(rows, fh):
    import csv
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SCORE_HEADER)
    for r in rows:
        w.writerow([r.encoding, r.proxy, format_score(r.score),
                    "" if r.M is None else r.M, r.seed, r.status])


def read_score_csv(fh):
    """``encoding -> score`` for the ok rows of a score CSV."""
    import csv
    reader = csv.DictReader(fh)
    missing = [c for c in ("encoding", "score") if c not in (reader.fieldnames or [])]
    if missing:
        raise ValueError(f"score CSV lacks column(s) {missing}")
    scores = {}
    for lineno, rec in enumerate(reader, start=2):
        if rec.get("status", "ok") != "ok":
            continue
        try:
            scores[rec["encoding"]] = float(rec["score"])
        except (TypeError, ValueError):
            raise ValueError(f"row {lineno}: unparsable score {rec['score']!r}") from None
    return scores
