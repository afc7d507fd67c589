"""Reverse-mode differentiation over numpy arrays, specialised to network plans.

Tensors are plain float64 ``numpy`` arrays. A :class:`Tape` records every
primitive applied during a forward pass together with a vector-Jacobian
product closure; :func:`backward` replays it once in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .space import CONV_GEOMETRY, NetworkPlan, Op

ROLES = ("conv_weight", "conv_bias", "linear_weight", "linear_bias")


class NumericError(ArithmeticError):
    """A forward intermediate became non-finite."""


class TraceConsumed(RuntimeError):
    """Attempt to sweep a tape a second time."""


# -- parameters --------------------------------------------------------------

class ParameterSet:
    """Ordered ``(layer_id, role) -> array`` mapping in plan layer order."""

    def __init__(self, entries):
        self._entries = dict(entries)

    def __getitem__(self, key):
        return self._entries[key]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def __eq__(self, other):
        if not isinstance(other, ParameterSet) or list(self) != list(other):
            return NotImplemented if not isinstance(other, ParameterSet) else False
        return all(np.array_equal(self[k], other[k]) for k in self)

    def items(self):
        return self._entries.items()

    def keys(self):
        return self._entries.keys()

    @property
    def layer_ids(self):
        return tuple(dict.fromkeys(layer for layer, _ in self._entries))

    def layer_vector(self, layer_id):
        """Flattened concatenation of one layer's tensors (weight, then bias)."""
        return np.concatenate([v.ravel() for (l, _), v in self._entries.items() if l == layer_id])

    def map(self, fn):
        return type(self)((k, fn(k, v)) for k, v in self._entries.items())

    def zip_map(self, other, fn):
        check_matching(self, other)
        return type(self)((k, fn(v, other[k])) for k, v in self._entries.items())

    def copy(self):
        return self.map(lambda _, v: v.copy())

    def size(self):
        return sum(v.size for v in self._entries.values())

    def __repr__(self):
        return f"{type(self).__name__}({len(self)} tensors, {self.size()} values)"


class GradientSet(ParameterSet):
    """Same keyed structure as :class:`ParameterSet`, holding gradients."""


def check_matching(a, b):
    if list(a) != list(b):
        raise ValueError("parameter and gradient sets have different keys")
    for k in a:
        if a[k].shape != b[k].shape:
            raise ValueError(f"shape mismatch for {k}: {a[k].shape} vs {b[k].shape}")


def init_params(plan: NetworkPlan, seed: int) -> ParameterSet:
    """Fan-in scaled uniform weights, bound ``sqrt(6 / fan_in)``; zero biases."""
    rng = np.random.default_rng(seed)
    entries = []
    for layer in plan.layers:
        bound = np.sqrt(6.0 / layer.fan_in)
        (w_role, w_shape), (b_role, b_shape) = layer.shapes
        entries.append(((layer.layer_id, w_role), rng.uniform(-bound, bound, size=w_shape)))
        entries.append(((layer.layer_id, b_role), np.zeros(b_shape)))
    return ParameterSet(entries)


@dataclass(frozen=True)
class Batch:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4 or images.shape[0] < 1:
            raise ValueError(f"images must be (N, C, H, W) with N >= 1, got {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ValueError("need exactly one label per image")
        if labels.min() < 0:
            raise ValueError("labels must be non-negative class indices")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.images.shape[0]

    def with_images(self, images):
        return Batch(images, self.labels)


# -- tape --------------------------------------------------------------------

class Var:
    __slots__ = ("tape", "index")

    def __init__(self, tape, index):
        self.tape = tape
        self.index = index

    @property
    def value(self):
        return self.tape.values[self.index]

    @property
    def shape(self):
        return self.value.shape


class Tape:
    def __init__(self):
        self.values = []
        self._parents = []
        self._vjps = []
        self.swept = False

    def __len__(self):
        return len(self.values)

    def leaf(self, value):
        return self.push(np.asarray(value, dtype=np.float64), (), None)

    def push(self, value, parents, vjp):
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite intermediate at tape node {len(self.values)}")
        self.values.append(value)
        self._parents.append(tuple(p.index for p in parents))
        self._vjps.append(vjp)
        return Var(self, len(self.values) - 1)

    def gradients(self, root: Var, wrt):
        """Reverse sweep from scalar ``root``; returns one gradient per ``wrt`` var."""
        if self.swept:
            raise TraceConsumed("this tape has already been swept")
        self.swept = True
        keep = {v.index for v in wrt}
        grads = [None] * len(self.values)
        grads[root.index] = np.ones_like(self.values[root.index])
        for i in range(root.index, -1, -1):
            g = grads[i]
            if g is None or self._vjps[i] is None:
                continue
            for p, gp in zip(self._parents[i], self._vjps[i](g)):
                if gp is None:
                    continue
                grads[p] = gp if grads[p] is None else grads[p] + gp
            if i not in keep:
                grads[i] = None
        return [grads[v.index] if grads[v.index] is not None else np.zeros_like(v.value)
                for v in wrt]


# -- differentiable primitives ----------------------------------------------

def conv2d(x: Var, w: Var, b: Var, dilation=1) -> Var:
    xv, wv = x.value, w.value
    y = kernels.conv2d_forward(xv, wv, b.value, dilation)
    return x.tape.push(y, (x, w, b), lambda g: kernels.conv2d_backward(g, xv, wv, dilation))


def relu(x: Var) -> Var:
    mask = x.value > 0
    return x.tape.push(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def add(*xs: Var) -> Var:
    out = xs[0].value.copy()
    for x in xs[1:]:
        out += x.value
    return xs[0].tape.push(out, xs, lambda g: (g,) * len(xs))


def avgpool3(x: Var) -> Var:
    return x.tape.push(kernels.avgpool3_forward(x.value), (x,),
                       lambda g: (kernels.avgpool3_backward(g),))


def maxpool3(x: Var) -> Var:
    y, idx = kernels.maxpool3_forward(x.value)
    return x.tape.push(y, (x,), lambda g: (kernels.maxpool3_backward(g, idx),))


def avgpool2(x: Var) -> Var:
    n, c, h, w = x.shape
    y = x.value.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def vjp(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0,)

    return x.tape.push(y, (x,), vjp)


def global_avg_pool(x: Var) -> Var:
    n, c, h, w = x.shape
    y = x.value.mean(axis=(2, 3))
    return x.tape.push(y, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),))


def linear(x: Var, w: Var, b: Var) -> Var:
    xv, wv = x.value, w.value
    return x.tape.push(xv @ wv.T + b.value, (x, w, b),
                       lambda g: (g @ wv, g.T @ xv, g.sum(axis=0)))


def zeros(tape: Tape, shape) -> Var:
    return tape.push(np.zeros(shape), (), None)


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels) -> float:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape)
    return float(-log_softmax(logits)[np.arange(len(labels)), labels].mean())


def _check_labels(labels, logits_shape):
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits_shape
    if labels.shape != (n,):
        raise ValueError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} rows of logits")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    return labels


def cross_entropy_var(logits: Var, labels) -> Var:
    labels = _check_labels(labels, logits.value.shape)
    lsm = log_softmax(logits.value)
    n = len(labels)
    loss = np.asarray(-lsm[np.arange(n), labels].mean())

    def vjp(g):
        d = np.exp(lsm)
        d[np.arange(n), labels] -= 1.0
        return (g * d / n,)

    return logits.tape.push(loss, (logits,), vjp)


# -- plan evaluation -----------------------------------------------------------

def apply_primitive(kind, x, params=None):
    """Forward-only evaluation of a single operation kind on an array.

    ``params`` is ``(weight, bias)`` for parameterized kinds. Parameterized
    edge ops include their ReLU.
    """
    x = np.asarray(x, dtype=np.float64)
    kind = str(kind)
    if kind == "zero":
        return np.zeros_like(x)
    if kind == "skip":
        return x.copy()
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "gap":
        _require_rank(x, 4, kind)
        return x.mean(axis=(2, 3))
    if kind == "linear":
        w, b = params
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != w.shape[1]:
            raise ValueError(f"linear expects {w.shape[1]} features, got {flat.shape[1]}")
        return flat @ w.T + b
    _require_rank(x, 4, kind)
    if kind == "avgpool3x3":
        return kernels.avgpool3_forward(x)
    if kind == "maxpool3x3":
        return kernels.maxpool3_forward(x)[0]
    try:
        k, dil = CONV_GEOMETRY[Op(kind)]
    except (ValueError, KeyError):
        raise ValueError(f"unknown operation kind {kind!r}") from None
    w, b = params
    if w.shape[1] != x.shape[1] or w.shape[2] != k:
        raise ValueError(f"{kind} weight {w.shape} does not fit input {x.shape}")
    return np.maximum(kernels.conv2d_forward(x, w, b, dil), 0.0)


def _require_rank(x, rank, kind):
    if x.ndim != rank:
        raise ValueError(f"{kind} expects a rank-{rank} input, got shape {x.shape}")


class EvaluationTrace:
    """One recorded forward pass: per-layer features, logits, and the tape."""

    def __init__(self, plan, tape, inputs, params, features, logits):
        self.plan = plan
        self.tape = tape
        self.input = inputs
        self.param_vars = params
        self.feature_vars = features
        self.logits_var = logits

    @property
    def features(self):
        """Post-activation output of each parameterized layer, in layer order."""
        return [v.value for v in self.feature_vars]

    @property
    def logits(self):
        return self.logits_var.value

    def loss(self, labels) -> Var:
        return cross_entropy_var(self.logits_var, labels)


def forward_trace(plan: NetworkPlan, params: ParameterSet, images) -> EvaluationTrace:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or tuple(images.shape[1:]) != tuple(plan.input_shape):
        raise ValueError(f"images {images.shape} do not match plan input {plan.input_shape}")
    tape = Tape()
    x = tape.leaf(images)
    pvars = {k: tape.leaf(v) for k, v in params.items()}
    regs = {"input": x}
    features = []
    for step in plan.steps:
        ins = [regs[r] for r in step.inputs]
        if step.op == "conv":
            layer = plan.layer(step.layer_id)
            w = pvars[(layer.layer_id, "conv_weight")]
            b = pvars[(layer.layer_id, "conv_bias")]
            out = relu(conv2d(ins[0], w, b, layer.dilation))
            features.append(out)
        elif step.op == "linear":
            w = pvars[(step.layer_id, "linear_weight")]
            b = pvars[(step.layer_id, "linear_bias")]
            out = linear(ins[0], w, b)
            features.append(out)
        elif step.op == "sum":
            out = add(*ins)
        elif step.op == "avgpool3x3":
            out = avgpool3(ins[0])
        elif step.op == "maxpool3x3":
            out = maxpool3(ins[0])
        elif step.op == "avgpool2":
            out = avgpool2(ins[0])
        elif step.op == "gap":
            out = global_avg_pool(ins[0])
        elif step.op == "zeros":
            out = zeros(tape, (images.shape[0],) + tuple(step.shape))
        else:
            raise ValueError(f"unknown plan step {step.op!r}")
        regs[step.output] = out
    return EvaluationTrace(plan, tape, x, pvars, features, features[-1])


def backward(trace: EvaluationTrace, loss: Var):
    """Gradients of ``loss`` w.r.t. every parameter and the input images."""
    keys = list(trace.param_vars)
    wrt = [trace.param_vars[k] for k in keys] + [trace.input]
    grads = trace.tape.gradients(loss, wrt)
    return GradientSet(zip(keys, grads[:-1])), grads[-1]


def loss_and_grads(plan, params, batch: Batch):
    """Convenience: forward, cross-entropy, backward on one batch."""
    trace = forward_trace(plan, params, batch.images)
    loss = trace.loss(batch.labels)
    grads, input_grad = backward(trace, loss)
    return trace, float(loss.value), grads, input_grad


def finite_diff_check(plan, params: ParameterSet, batch: Batch, num_coords: int,
                      h: float, rng: np.random.Generator) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Coordinates are drawn uniformly over all parameter elements. The
    relative error denominator is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if num_coords == 0:
        return 0.0
    _, _, grads, _ = loss_and_grads(plan, params, batch)
    keys = list(params)
    sizes = np.array([params[k].size for k in keys])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    flat = rng.integers(offsets[-1], size=num_coords)
    worst = 0.0
    for f in flat:
        t = int(np.searchsorted(offsets, f, side="right") - 1)
        key, idx = keys[t], int(f - offsets[t])
        base = params[key]

        def loss_at(delta):
            bumped = base.copy()
            bumped.flat[idx] += delta
            p = ParameterSet((k, bumped if k == key else v) for k, v in params.items())
            return cross_entropy(forward_trace(plan, p, batch.images).logits, batch.labels)

        numeric = (loss_at(h) - loss_at(-h)) / (2 * h)
        analytic = grads[key].flat[idx]
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
