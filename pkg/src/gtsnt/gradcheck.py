"""Central finite-difference check of :func:`model_backward`.

The checked objective is the training loss under the smoothed forward
(logistic firing), with threshold-scaling statistics and node grouping
held at their values from the unperturbed pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import Graph, build_propagation_operator
from .model import ModelConfig, ModelParams, cross_entropy, model_backward, model_forward


@dataclass
class GradCheckResult:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def relative_error(a, b, floor: float = 1e-10) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < floor:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def smoothed_loss_fn(g: Graph, params: ModelParams, cfg: ModelConfig, split: str = "train"):
    """Returns ``(loss_fn, analytic_grads)`` at the current parameters.

    ``loss_fn()`` re-evaluates the loss for whatever values ``params``
    holds at call time, with the discrete structure frozen.
    """
    p = build_propagation_operator(g)
    mask = g.splits[split]
    logits, cache = model_forward(g, params, cfg, p, smooth=True)
    frozen = cache.frozen()
    _, grad_logits = cross_entropy(logits, g.labels, mask, return_grad=True)
    grads = model_backward(cache, grad_logits, params)

    def loss_fn():
        out, _ = model_forward(g, params, cfg, p, smooth=True, frozen=frozen)
        return cross_entropy(out, g.labels, mask)

    return loss_fn, grads


def numeric_gradient(loss_fn, array: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    grad = np.zeros(array.shape)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_fn()
        flat[i] = orig - eps
        down = loss_fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def check_gradients(
    g: Graph, params: ModelParams, cfg: ModelConfig, tolerance: float = 1e-3, eps: float = 1e-6
) -> GradCheckResult:
    loss_fn, grads = smoothed_loss_fn(g, params, cfg)
    errors = {}
    for name, array in params.named().items():
        if array.ndim == 0:
            # 0-d arrays cannot be perturbed through a reshaped view
            holder = array.reshape(1)
            numeric = numeric_gradient(loss_fn, holder, eps).reshape(())
        else:
            numeric = numeric_gradient(loss_fn, array, eps)
        errors[name] = relative_error(grads[name], numeric)
    return GradCheckResult(errors, tolerance)
