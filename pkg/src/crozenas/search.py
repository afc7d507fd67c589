"""Proxy-driven sampling search: random search, aging evolution, warmup and move.

Every strategy goes through one budget-accounting coordinator. Proxy
evaluations of a batch (warmup pool, random chunk, move children) may be
farmed out through ``map_fn``; results are consumed in submission order, so
the log does not depend on how they were computed.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import space

log = logging.getLogger(__name__)

ALGORITHMS = ("rand", "ae")


class SearchConfigError(ValueError):
    pass


@dataclass
class Candidate:
    encoding: str
    proxy_score: float
    age: int
    truth: float | None = None
    cell: space.CellSpec | None = field(default=None, repr=False, compare=False)


def rank_key(c: Candidate):
    """Sort key: higher proxy first, then lexicographic encoding."""
    return (-c.proxy_score, c.encoding)


@dataclass(frozen=True)
class SearchConfig:
    algorithm: str = "ae"
    budget: int = 300
    warmup: tuple | None = None  # (pool_size, top_k)
    move: tuple | None = None  # (radius, fan_out)
    population: int = 20
    sample: int = 5
    seed: int = 0
    space: str = space.NB201
    shortlist: int = 10

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise SearchConfigError(f"algorithm must be one of {ALGORITHMS}")
        if self.budget < 1:
            raise SearchConfigError("budget must be >= 1")
        if self.space not in space.SPACE_KINDS:
            raise SearchConfigError(f"unknown space {self.space!r}")
        initial = 0
        if self.warmup is not None:
            pool, top = self.warmup
            if not 1 <= top <= pool:
                raise SearchConfigError(f"warmup needs 1 <= top_k <= pool_size, got top_k={top}, pool_size={pool}")
            if pool > self.budget:
                raise SearchConfigError(f"warmup pool {pool} exceeds budget {self.budget}")
            initial = pool
        if self.algorithm == "ae":
            if not 1 <= self.sample <= self.population:
                raise SearchConfigError(
                    f"aging evolution needs population >= sample >= 1, got {self.population}, {self.sample}")
            top = self.warmup[1] if self.warmup else 0
            initial += max(0, self.population - top)
            if initial > self.budget:
                raise SearchConfigError(
                    f"budget {self.budget} cannot cover the initial population ({initial} evaluations)")
        if self.move is not None:
            radius, fan_out = self.move
            if radius < 1 or fan_out < 1:
                raise SearchConfigError("move needs radius >= 1 and fan_out >= 1")
        return self

    def to_dict(self):
        return {"algorithm": self.algorithm, "budget": self.budget,
                "warmup": list(self.warmup) if self.warmup else None,
                "move": list(self.move) if self.move else None,
                "population": self.population, "sample": self.sample,
                "seed": self.seed, "space": self.space, "shortlist": self.shortlist}


@dataclass
class SearchLog:
    records: list
    shortlist: list
    notes: list = field(default_factory=list)
    tracks_truth: bool = False

    @property
    def best(self) -> Candidate:
        return self.shortlist[0]

    def encodings(self):
        return [r["encoding"] for r in self.records]

    def write_jsonl(self, fh, header=None):
        if header is not None:
            fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for r in self.records:
            fh.write(json.dumps(r) + "\n")

    def write_shortlist(self, fh):
        w = csv.writer(fh, lineterminator="\n")
        cols = ["rank", "encoding", "proxy"] + (["truth"] if self.tracks_truth else [])
        w.writerow(cols)
        for i, c in enumerate(self.shortlist, start=1):
            row = [i, c.encoding, repr(float(c.proxy_score))]
            if self.tracks_truth:
                row.append("" if c.truth is None else repr(float(c.truth)))
            w.writerow(row)


class _Run:
    """Budget accounting, age counter, incumbent tracking and the log."""

    def __init__(self, proxy_fn, budget, map_fn=None, truth=None):
        self.proxy_fn = proxy_fn
        self.budget = budget
        self.map_fn = map_fn or (lambda fn, items: [fn(x) for x in items])
        self.truth = truth
        self.records = []
        self.notes = []
        self.scored = []
        self.best = None

    @property
    def remaining(self):
        return self.budget - len(self.scored)

    def score(self, cells, phase):
        cells = list(cells)
        if len(cells) > self.remaining:
            self.notes.append(f"{phase}: budget exhausted, scored {self.remaining} of {len(cells)}")
            log.info(self.notes[-1])
            cells = cells[:self.remaining]
        values = list(self.map_fn(self.proxy_fn, cells)) if cells else []
        out = []
        for cell, value in zip(cells, values):
            c = Candidate(space.encode(cell), float(value), len(self.scored), cell=cell)
            if self.truth is not None:
                c.truth = self.truth(c.encoding)
            self.scored.append(c)
            if self.best is None or rank_key(c) < rank_key(self.best):
                self.best = c
            rec = {"step": c.age, "encoding": c.encoding, "proxy": c.proxy_score,
                   "best_proxy": self.best.proxy_score}
            if self.truth is not None:
                rec["best_truth"] = self.best.truth
            self.records.append(rec)
            out.append(c)
        return out

    def finish(self, shortlist_size=10):
        seen, short = set(), []
        for c in sorted(self.scored, key=rank_key):
            if c.encoding not in seen:
                seen.add(c.encoding)
                short.append(c)
            if len(short) == shortlist_size:
                break
        return SearchLog(self.records, short, self.notes, self.truth is not None)


# -- phases --------------------------------------------------------------------

def _uniform(kind, n, rng):
    return [space.sample_uniform(kind, rng) for _ in range(n)]


def _warmup(run, kind, pool_size, top_k, rng):
    pool = run.score(_uniform(kind, pool_size, rng), "warmup")
    return sorted(pool, key=rank_key)[:top_k]


def _neighbors(cell, radius, fan_out, rng):
    children = []
    for _ in range(fan_out):
        child = cell
        for _ in range(radius):
            child = space.mutate(child, rng)
        children.append(child)
    return children


def _ae_step(run, population, sample, rng):
    idx = rng.choice(len(population), size=sample, replace=False)
    parent = min((population[i] for i in idx), key=rank_key)
    children = run.score([space.mutate(parent.cell, rng)], "ae")
    if children:
        population.append(children[0])
        population.popleft()


def _refresh(population, children):
    for c in children:
        population.append(c)
        population.popleft()


def _search(kind, proxy_fn, config, rng, map_fn=None, truth=None):
    config.validate()
    run = _Run(proxy_fn, config.budget, map_fn, truth)
    seeds = []
    if config.warmup is not None:
        seeds = _warmup(run, kind, *config.warmup, rng)
    population = None
    if config.algorithm == "ae":
        fill = max(0, config.population - len(seeds))
        init = seeds + run.score(_uniform(kind, fill, rng), "ae-init")
        population = deque(sorted(init, key=lambda c: c.age))
    chunk = config.move[1] if config.move else run.remaining
    while run.remaining > 0:
        for _ in range(min(chunk, run.remaining)):
            if population is None:
                break
            _ae_step(run, population, config.sample, rng)
        if population is None:
            run.score(_uniform(kind, min(chunk, run.remaining), rng), "rand")
        if config.move is not None and run.remaining > 0:
            radius, fan_out = config.move
            children = run.score(_neighbors(run.best.cell, radius, fan_out, rng), "move")
            if population is not None:
                _refresh(population, children)
    return run.finish(config.shortlist)


def _rng(config, rng):
    return rng if rng is not None else np.random.default_rng(config.seed)


def random_search(kind, proxy_fn, config: SearchConfig, rng=None, map_fn=None) -> SearchLog:
    cfg = SearchConfig("rand", config.budget, None, None, config.population, config.sample,
                       config.seed, kind, config.shortlist)
    return _search(kind, proxy_fn, cfg, _rng(config, rng), map_fn)


def aging_evolution(kind, proxy_fn, config: SearchConfig, rng=None, map_fn=None) -> SearchLog:
    cfg = SearchConfig("ae", config.budget, config.warmup, None, config.population, config.sample,
                       config.seed, kind, config.shortlist)
    if cfg.warmup is None and cfg.budget < cfg.population:
        raise SearchConfigError("aging evolution needs budget >= population")
    return _search(kind, proxy_fn, cfg, _rng(config, rng), map_fn)


def hybrid_search(kind, proxy_fn, config: SearchConfig, benchmark=None, rng=None,
                  map_fn=None, metric="clean") -> SearchLog:
    """Warmup, then rand or AE, with optional move rounds, under one budget.

    With ``benchmark`` the log also carries the ground truth of the proxy
    incumbent; the table is never consulted for search decisions.
    """
    truth = None
    if benchmark is not None:
        if metric not in benchmark.metrics:
            raise SearchConfigError(f"metric {metric!r} not in benchmark")
        truth = lambda enc: benchmark.get(enc, metric)  # noqa: E731
    return _search(kind, proxy_fn, config, _rng(config, rng), map_fn, truth)


def warmup_pool(kind, proxy_fn, pool_size, top_k, rng) -> list:
    """Score ``pool_size`` uniform samples; keep the ``top_k`` best by proxy."""
    if not 1 <= top_k <= pool_size:
        raise SearchConfigError("warmup needs 1 <= top_k <= pool_size")
    return _warmup(_Run(proxy_fn, pool_size), kind, pool_size, top_k, rng)


def move_neighborhood(best, radius, fan_out, proxy_fn, rng) -> list:
    """Score ``fan_out`` children, each ``radius`` successive mutations from ``best``."""
    if radius < 1:
        raise SearchConfigError("radius must be >= 1")
    cell = best.cell if isinstance(best, Candidate) else best
    if cell is None:
        cell = space.decode(best.encoding)
    run = _Run(proxy_fn, fan_out)
    return run.score(_neighbors(cell, radius, fan_out, rng), "move")
