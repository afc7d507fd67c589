"""Robust surrogate parameters and perturbed input batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Batch, ParameterSet, backward, check_matching, forward_trace

NORM_GUARD = 1e-12
INPUT_KINDS = ("fgsm", "gaussian")


@dataclass(frozen=True)
class PerturbConfig:
    beta: float = 0.01
    epsilon: float = 8 / 255
    sigma: float = 8 / 255
    input_kind: str = "fgsm"
    clip: tuple | None = None

    def __post_init__(self):
        for name in ("beta", "epsilon", "sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.input_kind not in INPUT_KINDS:
            raise ValueError(f"input_kind must be one of {INPUT_KINDS}")
        if self.clip is not None and not self.clip[0] < self.clip[1]:
            raise ValueError("clip needs min < max")


def robust_params(params: ParameterSet, grads, beta: float) -> ParameterSet:
    """Step each tensor along its normalised gradient, scaled by beta * its own norm.

    Tensors whose parameter or gradient norm is below 1e-12 are left as-is.
    """
    check_matching(params, grads)
    if beta == 0:
        return params.copy()

    def step(theta, g):
        g_norm = np.linalg.norm(g.ravel())
        t_norm = np.linalg.norm(theta.ravel())
        if g_norm < NORM_GUARD or t_norm < NORM_GUARD:
            return theta.copy()
        return theta + beta * (g / g_norm) * t_norm

    return params.zip_map(grads, step)


def fgsm(plan, params: ParameterSet, batch: Batch, epsilon: float, clip=None):
    """One signed-gradient step on the inputs, taken through ``params``.

    ``sign(0) == 0``, so coordinates with zero input gradient stay put.
    """
    trace = forward_trace(plan, params, batch.images)
    _, input_grad = backward(trace, trace.loss(batch.labels))
    return fgsm_from_grad(batch.images, input_grad, epsilon, clip)


def fgsm_from_grad(images, input_grad, epsilon, clip=None):
    out = images + epsilon * np.sign(input_grad)
    if clip is not None:
        out = np.clip(out, clip[0], clip[1])
    return out


def gaussian_perturb(batch: Batch, sigma: float, rng: np.random.Generator, clip=None):
    out = batch.images + rng.normal(0.0, sigma, size=batch.images.shape)
    if clip is not None:
        out = np.clip(out, clip[0], clip[1])
    return out
