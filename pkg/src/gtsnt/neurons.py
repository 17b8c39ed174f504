"""Integrate-and-fire neuron dynamics with surrogate-gradient backward.

Three variants share the hard reset rule. They differ only in how the
membrane integrates its input current:

* ``IF``:   v <- v + I
* ``LIF``:  v <- v + (I - (v - v_reset)) / tau
* ``PLIF``: v <- v + sigmoid(beta) * (I - (v - v_reset)), beta trainable
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy.special import expit

Variant = Literal["IF", "LIF", "PLIF"]


@dataclass(frozen=True)
class NeuronConfig:
    variant: Variant = "PLIF"
    v_th: float = 1.0
    v_reset: float = 0.0
    tau: float = 2.0
    beta: float = 0.0
    surrogate_alpha: float = 4.0

    def __post_init__(self):
        if self.variant not in ("IF", "LIF", "PLIF"):
            raise ValueError(f"unknown neuron variant {self.variant!r}")
        if self.v_th <= 0:
            raise ValueError("v_th must be positive")
        if self.v_th <= self.v_reset:
            raise ValueError("v_th must exceed v_reset")
        if self.variant == "LIF" and self.tau <= 1:
            raise ValueError("LIF needs tau > 1")
        if self.surrogate_alpha <= 0:
            raise ValueError("surrogate_alpha must be positive")

    def decay(self, beta: float | None = None) -> float:
        """Multiplier on the leak term; 1.0 for IF (no leak term used)."""
        if self.variant == "LIF":
            return 1.0 / self.tau
        if self.variant == "PLIF":
            return float(expit(self.beta if beta is None else beta))
        return 1.0


@dataclass
class NeuronState:
    v: np.ndarray

    @classmethod
    def initial(cls, cfg: NeuronConfig, shape) -> "NeuronState":
        return cls(np.full(shape, cfg.v_reset, dtype=np.float64))


@dataclass
class SpikeRecord:
    """Everything the backward pass needs from a forward run.

    ``spikes[t]`` is binary for hard firing; under the smoothed forward
    (``smooth=True``) it holds the logistic relaxation instead.
    """

    spikes: list[np.ndarray] = field(default_factory=list)
    pre_activations: list[np.ndarray] = field(default_factory=list)
    inputs: list[np.ndarray] = field(default_factory=list)
    v_before: list[np.ndarray] = field(default_factory=list)
    smooth: bool = False

    def __len__(self):
        return len(self.spikes)

    def count(self) -> np.ndarray:
        return np.sum(self.spikes, axis=0)


def membrane_update(cfg: NeuronConfig, v_prev, current, beta: float | None = None):
    if cfg.variant == "IF":
        return v_prev + current
    k = cfg.decay(beta)
    return v_prev + k * (current - (v_prev - cfg.v_reset))


def fire(v, v_th: float, smooth_alpha: float | None = None):
    """Heaviside at threshold (equality fires). With ``smooth_alpha`` the
    logistic ``sigmoid(alpha * (v - v_th))`` is returned instead."""
    x = np.asarray(v, dtype=np.float64) - v_th
    if smooth_alpha is not None:
        return expit(smooth_alpha * x)
    return (x >= 0).astype(np.float64)


def reset(v, s, v_reset: float):
    return v * (1.0 - s) + v_reset * s


def surrogate_grad(x, alpha: float):
    """Derivative of ``sigmoid(alpha * x)``: the stand-in for d(fire)/dx."""
    # evaluated on -|x| so the small factor is never formed as 1 - (almost 1)
    sig = expit(-alpha * np.abs(np.asarray(x, dtype=np.float64)))
    return alpha * sig * (1.0 - sig)


def step(cfg: NeuronConfig, state: NeuronState, current, beta=None, smooth=False, record=None):
    """One integrate/fire/reset cycle. Returns ``(spikes, new_state)``."""
    current = np.asarray(current, dtype=np.float64)
    if current.shape != state.v.shape:
        raise ValueError(f"input shape {current.shape} != state shape {state.v.shape}")
    u = membrane_update(cfg, state.v, current, beta)
    s = fire(u, cfg.v_th, cfg.surrogate_alpha if smooth else None)
    if record is not None:
        record.inputs.append(current)
        record.v_before.append(state.v)
        record.pre_activations.append(u - cfg.v_th)
        record.spikes.append(s)
    return s, NeuronState(reset(u, s, cfg.v_reset))


def run_sequence(
    cfg: NeuronConfig, inputs: Sequence[np.ndarray], beta=None, smooth: bool = False
) -> SpikeRecord:
    if len(inputs) == 0:
        raise ValueError("empty input sequence")
    state = NeuronState.initial(cfg, np.shape(inputs[0]))
    record = SpikeRecord(smooth=smooth)
    for t, current in enumerate(inputs):
        if np.shape(current) != state.v.shape:
            raise ValueError(f"step {t}: input shape {np.shape(current)} != {state.v.shape}")
        _, state = step(cfg, state, current, beta, smooth, record)
    return record


def sequence_backward(cfg: NeuronConfig, record: SpikeRecord, grad_spikes, beta=None):
    """Reverse pass through :func:`run_sequence`.

    ``grad_spikes`` is either one array (the same gradient for every step,
    as when spikes are summed into counts) or a list of per-step arrays.
    Returns ``(grad_inputs, grad_beta)``; ``grad_beta`` is 0.0 unless PLIF.
    """
    if not record.spikes:
        raise ValueError("spike record is empty; run the forward pass first")
    steps = len(record)
    if isinstance(grad_spikes, np.ndarray):
        grad_spikes = [grad_spikes] * steps
    k = cfg.decay(beta)
    grad_v = np.zeros_like(record.spikes[0])
    grad_inputs = [None] * steps
    grad_beta = 0.0
    for t in reversed(range(steps)):
        s = record.spikes[t]
        pre = record.pre_activations[t]
        u = pre + cfg.v_th
        grad_s = grad_spikes[t] + grad_v * (cfg.v_reset - u)
        grad_u = grad_v * (1.0 - s) + grad_s * surrogate_grad(pre, cfg.surrogate_alpha)
        if cfg.variant == "IF":
            grad_inputs[t] = grad_u
            grad_v = grad_u
        else:
            grad_inputs[t] = grad_u * k
            grad_v = grad_u * (1.0 - k)
            if cfg.variant == "PLIF":
                leak_term = record.inputs[t] - record.v_before[t] + cfg.v_reset
                grad_beta += float(np.sum(grad_u * leak_term)) * k * (1.0 - k)
    return grad_inputs, grad_beta
