"""Cell-based search spaces, canonical encodings and network plans.

Two spaces are supported:

* ``nb201``: a complete 4-node DAG (6 edges), op pool of 5.
* ``darts-lite``: two input nodes (outputs of the previous two cells) and
  four intermediate nodes, each picking 2 distinct predecessors; op pool of 9.
  Sample-only, the space is far too large to enumerate.

Encodings list every node's incoming edges, highest source first::

    |skip~0|+|skip~1|skip~0|+|skip~2|skip~1|skip~0|
"""

from __future__ import annotations

import enum
import itertools
import re
from dataclasses import dataclass, field

import numpy as np

NB201 = "nb201"
DARTS_LITE = "darts-lite"
SPACE_KINDS = (NB201, DARTS_LITE)


class Op(str, enum.Enum):
    CONV1X1 = "conv1x1"
    CONV3X3 = "conv3x3"
    DILCONV3X3 = "dilconv3x3"
    CONV5X5 = "conv5x5"
    DILCONV5X5 = "dilconv5x5"
    CONV7X7 = "conv7x7"
    MAXPOOL3X3 = "maxpool3x3"
    AVGPOOL3X3 = "avgpool3x3"
    SKIP = "skip"
    ZERO = "zero"

    def __str__(self):
        return self.value


POOLS = {
    NB201: (Op.CONV1X1, Op.CONV3X3, Op.AVGPOOL3X3, Op.SKIP, Op.ZERO),
    DARTS_LITE: (Op.CONV3X3, Op.DILCONV3X3, Op.CONV5X5, Op.DILCONV5X5, Op.CONV7X7,
                 Op.MAXPOOL3X3, Op.AVGPOOL3X3, Op.SKIP, Op.ZERO),
}

# (kernel, dilation) for parameterized ops
CONV_GEOMETRY = {
    Op.CONV1X1: (1, 1),
    Op.CONV3X3: (3, 1),
    Op.DILCONV3X3: (3, 2),
    Op.CONV5X5: (5, 1),
    Op.DILCONV5X5: (5, 2),
    Op.CONV7X7: (7, 1),
}

NB201_NODES = 4
DARTS_INPUTS = 2
DARTS_INTERMEDIATE = 4

NB201_SIZE = len(POOLS[NB201]) ** 6


class EncodingError(ValueError):
    """Malformed or unknown architecture encoding."""


class UnsupportedOperation(ValueError):
    pass


@dataclass(frozen=True)
class CellSpec:
    """A cell DAG. ``edges`` is a tuple of ``((src, dst), Op)`` in canonical order."""

    kind: str
    edges: tuple

    def __post_init__(self):
        _validate_cell(self)

    @property
    def num_nodes(self):
        return NB201_NODES if self.kind == NB201 else DARTS_INPUTS + DARTS_INTERMEDIATE

    @property
    def ops(self):
        return tuple(op for _, op in self.edges)

    def op(self, src, dst):
        for (i, j), op in self.edges:
            if (i, j) == (src, dst):
                return op
        raise KeyError((src, dst))

    def with_op(self, slot, op):
        edges = list(self.edges)
        edges[slot] = (edges[slot][0], Op(op))
        return CellSpec(self.kind, tuple(edges))

    def __str__(self):
        return encode(self)


def _canonical_key(edge):
    (src, dst), _ = edge
    return (dst, -src)


def _validate_cell(cell):
    if cell.kind not in POOLS:
        raise ValueError(f"unknown space kind {cell.kind!r}")
    pool = POOLS[cell.kind]
    seen = set()
    for (src, dst), op in cell.edges:
        if not 0 <= src < dst:
            raise ValueError(f"edge ({src}, {dst}) is not forward")
        if op not in pool:
            raise ValueError(f"op {op} not in the {cell.kind} pool")
        if (src, dst) in seen:
            raise ValueError(f"duplicate edge ({src}, {dst})")
        seen.add((src, dst))
    if tuple(sorted(cell.edges, key=_canonical_key)) != tuple(cell.edges):
        raise ValueError("edges are not in canonical order")
    if cell.kind == NB201:
        expected = {(i, j) for j in range(1, NB201_NODES) for i in range(j)}
        if seen != expected:
            raise ValueError("nb201 cells need all 6 edges of the complete DAG")
    else:
        for j in range(DARTS_INPUTS, DARTS_INPUTS + DARTS_INTERMEDIATE):
            if sum(1 for (_, d) in seen if d == j) != 2:
                raise ValueError(f"darts-lite node {j} needs exactly 2 predecessors")
        if any(d < DARTS_INPUTS or d >= DARTS_INPUTS + DARTS_INTERMEDIATE for _, d in seen):
            raise ValueError("darts-lite edges must end at an intermediate node")


def nb201_edge_slots():
    """Edge slots of an NB201 cell in canonical (encoding) order."""
    return tuple((i, j) for j in range(1, NB201_NODES) for i in reversed(range(j)))


def make_cell(kind, edges):
    """Build a cell from ``{(src, dst): op}`` in any order."""
    items = sorted(((tuple(k), Op(v)) for k, v in dict(edges).items()), key=_canonical_key)
    return CellSpec(kind, tuple(items))


def nb201_cell(ops):
    """NB201 cell from 6 ops given in canonical slot order."""
    ops = [Op(o) for o in ops]
    if len(ops) != 6:
        raise ValueError("nb201 cells have 6 edges")
    return CellSpec(NB201, tuple(zip(nb201_edge_slots(), ops)))


# -- encoding ---------------------------------------------------------------

_TOKEN = re.compile(r"([A-Za-z0-9_]+)~(\d+)")


def encode(cell: CellSpec) -> str:
    groups = []
    last = cell.edges[0][0][1]
    current = []
    for (src, dst), op in cell.edges:
        if dst != last:
            groups.append(current)
            current, last = [], dst
        current.append(f"{op}~{src}")
    groups.append(current)
    return "+".join("|" + "|".join(g) + "|" for g in groups)


def decode(s: str) -> CellSpec:
    """Parse an encoding; the space kind is inferred from the group structure."""
    if not isinstance(s, str) or not s:
        raise EncodingError("empty encoding")
    groups = s.split("+")
    if len(groups) == NB201_NODES - 1:
        kind, first_dst = NB201, 1
    elif len(groups) == DARTS_INTERMEDIATE:
        kind, first_dst = DARTS_LITE, DARTS_INPUTS
    else:
        raise EncodingError(f"expected 3 (nb201) or 4 (darts-lite) node groups, got {len(groups)}")
    names = {o.value for o in POOLS[kind]}
    edges = []
    pos = 0
    for g_idx, group in enumerate(groups):
        dst = first_dst + g_idx
        if len(group) < 3 or group[0] != "|" or group[-1] != "|":
            raise EncodingError(f"malformed group {group!r} at position {pos}")
        tokpos = pos + 1
        for token in group[1:-1].split("|"):
            m = _TOKEN.fullmatch(token)
            if m is None:
                raise EncodingError(f"malformed token {token!r} at position {tokpos}")
            name, src = m.group(1), int(m.group(2))
            if name not in names:
                raise EncodingError(f"unknown op {name!r} at position {tokpos}")
            if src >= dst:
                raise EncodingError(f"source {src} not before node {dst} at position {tokpos}")
            edges.append(((src, dst), Op(name)))
            tokpos += len(token) + 1
        pos += len(group) + 1
    try:
        cell = CellSpec(kind, tuple(edges))
    except ValueError as exc:
        raise EncodingError(str(exc)) from None
    if encode(cell) != s:
        raise EncodingError(f"non-canonical encoding {s!r}")
    return cell


def hamming(a: CellSpec, b: CellSpec) -> int:
    """Number of edge slots that differ (edge endpoints or op)."""
    if a.kind != b.kind or len(a.edges) != len(b.edges):
        raise ValueError("cells from different spaces")
    return sum(x != y for x, y in zip(a.edges, b.edges))


# -- enumeration, sampling, mutation ----------------------------------------

def enumerate_space(kind=NB201):
    """Every NB201 encoding, lexicographic in pool index over canonical slots."""
    if kind != NB201:
        raise UnsupportedOperation(
            f"cannot enumerate {kind}: the DARTS space holds about 10^19 architectures")
    slots = nb201_edge_slots()
    pool = POOLS[NB201]
    return [encode(CellSpec(NB201, tuple(zip(slots, ops))))
            for ops in itertools.product(pool, repeat=len(slots))]


def sample_uniform(kind, rng: np.random.Generator) -> CellSpec:
    pool = POOLS[kind]
    if kind == NB201:
        idx = rng.integers(len(pool), size=6)
        return CellSpec(NB201, tuple(zip(nb201_edge_slots(), (pool[i] for i in idx))))
    edges = {}
    for dst in range(DARTS_INPUTS, DARTS_INPUTS + DARTS_INTERMEDIATE):
        for src in rng.choice(dst, size=2, replace=False):
            edges[(int(src), dst)] = pool[rng.integers(len(pool))]
    return make_cell(kind, edges)


def mutate(cell: CellSpec, rng: np.random.Generator) -> CellSpec:
    """Replace the op on one uniformly chosen edge by a different op."""
    pool = POOLS[cell.kind]
    slot = int(rng.integers(len(cell.edges)))
    current = cell.edges[slot][1]
    others = [op for op in pool if op != current]
    return cell.with_op(slot, others[rng.integers(len(others))])


# -- network plans -----------------------------------------------------------

@dataclass(frozen=True)
class StackConfig:
    in_channels: int = 3
    height: int = 16
    width: int = 16
    channels: int = 8
    stages: int = 3
    cells_per_stage: int = 1
    num_classes: int = 10

    def __post_init__(self):
        for name in ("in_channels", "height", "width", "channels", "stages",
                     "cells_per_stage", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        div = 2 ** (self.stages - 1)
        if self.height % div or self.width % div:
            raise ValueError(f"input {self.height}x{self.width} not divisible by {div}")

    @property
    def input_shape(self):
        return (self.in_channels, self.height, self.width)

    @classmethod
    def parse(cls, text, in_channels=3):
        """Parse ``C,stages,cells,H,W,classes``."""
        try:
            c, stages, cells, h, w, classes = (int(v) for v in text.split(","))
        except ValueError:
            raise ValueError(f"--stack expects C,stages,cells,H,W,classes, got {text!r}") from None
        return cls(in_channels, h, w, c, stages, cells, classes)

    def format(self):
        return (f"{self.channels},{self.stages},{self.cells_per_stage},"
                f"{self.height},{self.width},{self.num_classes}")


@dataclass(frozen=True)
class LayerSpec:
    layer_id: str
    kind: str  # "conv" | "linear"
    in_channels: int
    out_channels: int
    kernel: int = 1
    dilation: int = 1
    height: int = 1
    width: int = 1

    @property
    def shapes(self):
        """Ordered ``(role, shape)`` pairs of this layer's parameter tensors."""
        if self.kind == "conv":
            return (("conv_weight", (self.out_channels, self.in_channels, self.kernel, self.kernel)),
                    ("conv_bias", (self.out_channels,)))
        return (("linear_weight", (self.out_channels, self.in_channels)),
                ("linear_bias", (self.out_channels,)))

    @property
    def fan_in(self):
        return self.in_channels * self.kernel * self.kernel


@dataclass(frozen=True)
class Step:
    """One instruction of a plan program, reading and writing named registers.

    ops: ``conv`` (conv + ReLU, owns ``layer_id``), ``linear`` (owns
    ``layer_id``), ``avgpool3x3``, ``maxpool3x3``, ``avgpool2``, ``gap``,
    ``sum``, ``zeros``. The register ``input`` holds the images.
    """

    op: str
    inputs: tuple
    output: str
    layer_id: str | None = None
    shape: tuple | None = None  # for "zeros": (C, H, W)


@dataclass(frozen=True)
class NetworkPlan:
    input_shape: tuple
    num_classes: int
    layers: tuple
    steps: tuple
    cell: CellSpec | None = None
    stack: StackConfig | None = None
    _index: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {l.layer_id: l for l in self.layers})
        if len(self._index) != len(self.layers):
            raise ValueError("duplicate layer ids")
        owners = [s.layer_id for s in self.steps if s.layer_id is not None]
        if owners != [l.layer_id for l in self.layers]:
            raise ValueError("layer order must follow program order")
        if not self.layers or self.layers[-1].kind != "linear":
            raise ValueError("the final layer must be the linear head")

    @property
    def M(self):
        return len(self.layers)

    @property
    def head_id(self):
        return self.layers[-1].layer_id

    @property
    def encoder_ids(self):
        return tuple(l.layer_id for l in self.layers[:-1])

    def layer(self, layer_id):
        return self._index[layer_id]


def _live_edges(cell: CellSpec, inputs, outputs):
    """Edges that carry signal: non-zero op, non-zero source, reaching an output."""
    active = [(s, d, op) for (s, d), op in cell.edges if op != Op.ZERO]
    nonzero = set(inputs)
    for s, d, _ in active:  # canonical order is sorted by destination
        if s in nonzero:
            nonzero.add(d)
    active = [(s, d, op) for s, d, op in active if s in nonzero]
    useful = set(o for o in outputs if o in nonzero)
    for s, d, _ in sorted(active, key=lambda e: -e[1]):
        if d in useful:
            useful.add(s)
    return [(s, d, op) for s, d, op in active if d in useful], nonzero


def _emit_cell(cell, prefix, in_regs, channels, height, width, steps, layers):
    """Append a cell's program; returns the output register."""
    if cell.kind == NB201:
        inputs, outputs = (0,), (NB201_NODES - 1,)
    else:
        inputs = tuple(range(DARTS_INPUTS))
        outputs = tuple(range(DARTS_INPUTS, DARTS_INPUTS + DARTS_INTERMEDIATE))
    live, nonzero = _live_edges(cell, inputs, outputs)
    reg = {i: r for i, r in zip(inputs, in_regs)}
    incoming = {}

    def node(i):
        if i not in reg:
            reg[i] = _node_sum(steps, f"{prefix}.n{i}", incoming[i])
        return reg[i]

    for s, d, op in live:
        name = f"{prefix}.e{s}-{d}"
        src = node(s)
        if op in CONV_GEOMETRY:
            k, dil = CONV_GEOMETRY[op]
            layers.append(LayerSpec(name, "conv", channels, channels, k, dil, height, width))
            steps.append(Step("conv", (src,), name, layer_id=name))
            incoming.setdefault(d, []).append(name)
        elif op == Op.SKIP:
            incoming.setdefault(d, []).append(src)
        else:
            steps.append(Step(op.value, (src,), name))
            incoming.setdefault(d, []).append(name)
    out_nodes = [o for o in outputs if o in nonzero]
    out = f"{prefix}.out"
    if not out_nodes:
        steps.append(Step("zeros", (), out, shape=(channels, height, width)))
        return out
    return _node_sum(steps, out, [node(o) for o in out_nodes])


def _node_sum(steps, name, regs):
    if len(regs) == 1:
        return regs[0]
    steps.append(Step("sum", tuple(regs), name))
    return name


def build_plan(cell: CellSpec, stack: StackConfig = StackConfig()) -> NetworkPlan:
    """Stem conv, stages of stacked cells joined by reductions, GAP, linear head.

    Edges that can never carry signal (zero ops, edges out of identically
    zero nodes, dead ends) are dropped, so every conv layer in the plan
    influences the logits.
    """
    steps, layers = [], []
    c, h, w = stack.channels, stack.height, stack.width
    layers.append(LayerSpec("stem", "conv", stack.in_channels, c, 3, 1, h, w))
    steps.append(Step("conv", ("input",), "stem", layer_id="stem"))
    prev_prev = prev = "stem"
    for s in range(stack.stages):
        if s > 0:
            steps.append(Step("avgpool2", (prev,), f"pool{s}"))
            h, w = h // 2, w // 2
            name = f"reduce{s}"
            layers.append(LayerSpec(name, "conv", c, 2 * c, 1, 1, h, w))
            steps.append(Step("conv", (f"pool{s}",), name, layer_id=name))
            c *= 2
            prev_prev = prev = name
        for k in range(stack.cells_per_stage):
            regs = (prev,) if cell.kind == NB201 else (prev_prev, prev)
            out = _emit_cell(cell, f"s{s}.c{k}", regs, c, h, w, steps, layers)
            prev_prev, prev = prev, out
    steps.append(Step("gap", (prev,), "gap"))
    layers.append(LayerSpec("head", "linear", c, stack.num_classes))
    steps.append(Step("linear", ("gap",), "head", layer_id="head"))
    return NetworkPlan(stack.input_shape, stack.num_classes, tuple(layers), tuple(steps),
                       cell=cell, stack=stack)


def conv_head_plan(input_shape, channels, num_classes, kernel=3):
    """Minimal plan: one conv + ReLU, global average pool, linear head."""
    c_in, h, w = input_shape
    layers = (LayerSpec("conv", "conv", c_in, channels, kernel, 1, h, w),
              LayerSpec("head", "linear", channels, num_classes))
    steps = (Step("conv", ("input",), "conv", layer_id="conv"),
             Step("gap", ("conv",), "gap"),
             Step("linear", ("gap",), "head", layer_id="head"))
    return NetworkPlan(tuple(input_shape), num_classes, layers, steps)


def linear_plan(input_shape, num_classes):
    """Global average pool followed by a linear layer (no hidden layers)."""
    layers = (LayerSpec("head", "linear", input_shape[0], num_classes),)
    steps = (Step("gap", ("input",), "gap"),
             Step("linear", ("gap",), "head", layer_id="head"))
    return NetworkPlan(tuple(input_shape), num_classes, layers, steps)


def count_params(plan: NetworkPlan) -> int:
    return sum(int(np.prod(shape)) for l in plan.layers for _, shape in l.shapes)


def count_flops(plan: NetworkPlan, input_shape=None) -> int:
    """2 x multiply-accumulates of conv and linear layers, per sample.

    Pools, sums and bias adds are not counted. ``input_shape`` rescales
    conv spatial sizes relative to the plan's own input.
    """
    scale_h = scale_w = 1.0
    if input_shape is not None:
        scale_h = input_shape[1] / plan.input_shape[1]
        scale_w = input_shape[2] / plan.input_shape[2]
    total = 0
    for l in plan.layers:
        if l.kind == "conv":
            hw = round(l.height * scale_h) * round(l.width * scale_w)
            total += 2 * l.out_channels * l.in_channels * l.kernel * l.kernel * hw
        else:
            total += 2 * l.out_channels * l.in_channels
    return total
