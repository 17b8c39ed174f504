"""Spiking node tokenization.

Learnable random features are diffused over the graph for ``T`` steps.
Each propagated matrix is min-max scaled into the neuron's threshold range
and fed as input current to a spiking neuron layer. Per-node spike counts
are deduplicated into a codebook of integer codewords plus an assignment
of nodes to codewords.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import segment_mean
from .graph import SparseOperator, apply_operator
from .neurons import NeuronConfig, SpikeRecord, run_sequence, sequence_backward

UNASSIGNED = -1
MAX_STEPS = 16
MAX_DIM = 32


@dataclass(frozen=True)
class TokenizerConfig:
    T: int = 3
    D: int = 6
    B_max: int = 4096
    seed: int = 0
    input_gain: float | None = None

    def __post_init__(self):
        if not 1 <= self.T <= MAX_STEPS:
            raise ValueError(f"T must be in [1, {MAX_STEPS}]")
        if not 1 <= self.D <= MAX_DIM:
            raise ValueError(f"D must be in [1, {MAX_DIM}]")
        if self.B_max < 1:
            raise ValueError("B_max must be >= 1")
        if self.input_gain is not None and self.input_gain <= 0:
            raise ValueError("input_gain must be positive")

    def gain(self, neuron: NeuronConfig) -> float:
        """Multiplier from scaled messages to input current.

        Defaults to the reciprocal of the neuron's initial decay so the
        largest message lifts a resting membrane to threshold in one step;
        leaky neurons driven by [0, v_th] alone never reach threshold.
        """
        if self.input_gain is not None:
            return self.input_gain
        return 1.0 / neuron.decay()


@dataclass
class SpikeCounts:
    counts: np.ndarray

    @property
    def shape(self):
        return self.counts.shape


@dataclass
class Codebook:
    """Distinct spike-count rows ``codewords`` with node ``assignment``.

    After truncation some assignment entries are ``UNASSIGNED`` and
    ``populations`` only counts nodes still mapped to each codeword.
    """

    codewords: np.ndarray
    assignment: np.ndarray
    populations: np.ndarray

    @property
    def size(self) -> int:
        return self.codewords.shape[0]

    def one_hot(self) -> np.ndarray:
        u = np.zeros((len(self.assignment), self.size))
        hit = self.assignment >= 0
        u[np.flatnonzero(hit), self.assignment[hit]] = 1.0
        return u


@dataclass
class Normalization:
    """Per-step column offsets and ranges used by the threshold scaling."""

    lows: list[np.ndarray] = field(default_factory=list)
    spans: list[np.ndarray] = field(default_factory=list)


@dataclass
class TokenizerTrace:
    counts: SpikeCounts
    record: SpikeRecord
    norm: Normalization
    v_th: float
    gain: float = 1.0


def init_random_features(n: int, cfg: TokenizerConfig, rng: np.random.Generator | None = None):
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    return rng.random((n, cfg.D))


def column_range(m: np.ndarray):
    low = m.min(axis=0)
    return low, m.max(axis=0) - low


def normalize_to_threshold(m, v_th: float, low=None, span=None):
    """Column-wise min-max map onto ``[0, v_th]``; constant columns go to 0."""
    m = np.asarray(m, dtype=np.float64)
    if low is None:
        low, span = column_range(m)
    scale = np.divide(v_th, span, out=np.zeros_like(span, dtype=np.float64), where=span > 0)
    return (m - low) * scale


def propagate_and_spike(
    p: SparseOperator,
    r: np.ndarray,
    neuron: NeuronConfig,
    cfg: TokenizerConfig,
    beta: float | None = None,
    smooth: bool = False,
    norm: Normalization | None = None,
) -> TokenizerTrace:
    """Run ``T`` propagation steps and one neuron step per propagated matrix.

    ``norm`` freezes the scaling statistics (used by gradient checks).
    Under ``smooth=True`` counts are sums of logistic relaxations.
    """
    if r.shape[0] != p.shape[0]:
        raise ValueError(f"R has {r.shape[0]} rows, operator is {p.shape}")
    frozen = norm is not None
    norm = norm if frozen else Normalization()
    gain = cfg.gain(neuron)
    currents = []
    m = r
    for t in range(cfg.T):
        a = apply_operator(p, m)
        if not frozen:
            low, span = column_range(a)
            norm.lows.append(low)
            norm.spans.append(span)
        m = normalize_to_threshold(a, neuron.v_th, norm.lows[t], norm.spans[t])
        currents.append(gain * m)
    record = run_sequence(neuron, currents, beta=beta, smooth=smooth)
    counts = record.count()
    if not smooth:
        counts = counts.astype(np.int64)
    return TokenizerTrace(SpikeCounts(counts), record, norm, neuron.v_th, gain)


def reconstruct_codebook(s: SpikeCounts | np.ndarray) -> Codebook:
    """Deduplicate rows, keeping codewords in order of first occurrence."""
    counts = s.counts if isinstance(s, SpikeCounts) else np.asarray(s)
    _, first, inverse, pops = np.unique(
        counts, axis=0, return_index=True, return_inverse=True, return_counts=True
    )
    inverse = inverse.reshape(-1)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return Codebook(counts[first[order]], rank[inverse].astype(np.int64), pops[order].astype(np.int64))


def group_codebook(values: np.ndarray, groups: Codebook) -> Codebook:
    """Codebook with the grouping of ``groups`` and codewords equal to the
    member mean of ``values`` (identical to dedup when rows are equal)."""
    means = segment_mean(np.asarray(values, dtype=np.float64), groups.assignment, groups.populations)
    return Codebook(means, groups.assignment, groups.populations)


def truncate_codebook(cb: Codebook, b_max: int):
    """Keep the ``b_max`` most populated codewords (ties: lower index first).

    Returns ``(codebook, retained_mask)``; nodes of dropped codewords are
    marked ``UNASSIGNED``.
    """
    if b_max < 1:
        raise ValueError("b_max must be >= 1")
    keep = np.ones(cb.size, dtype=bool)
    if cb.size <= b_max:
        return cb, keep
    order = np.lexsort((np.arange(cb.size), -cb.populations))
    keep[:] = False
    keep[order[:b_max]] = True
    remap = np.full(cb.size, UNASSIGNED, dtype=np.int64)
    remap[keep] = np.arange(b_max)
    assignment = np.where(cb.assignment >= 0, remap[cb.assignment], UNASSIGNED)
    return Codebook(cb.codewords[keep], assignment, cb.populations[keep]), keep


def latent_space_size(cfg: TokenizerConfig) -> int:
    size = (cfg.T + 1) ** cfg.D
    if size > np.iinfo(np.int64).max:
        raise OverflowError(f"(T+1)^D = {cfg.T + 1}^{cfg.D} overflows int64")
    return size


def codebook_usage(cb: Codebook, capacity: int | None = None) -> float:
    """Fraction of available codewords used by at least one node.

    Without ``capacity`` the codebook itself is the set of available
    codewords; with it, usage is measured against a predefined codebook
    of that size.
    """
    used = int(np.count_nonzero(cb.populations > 0))
    if capacity is None:
        return used / cb.size if cb.size else 0.0
    if capacity < cb.size:
        raise ValueError("capacity smaller than codebook")
    return used / capacity


def tokenizer_backward(
    grad_codewords: np.ndarray,
    cb: Codebook,
    trace: TokenizerTrace,
    p: SparseOperator,
    neuron: NeuronConfig,
    beta: float | None = None,
):
    """Gradient of the codewords with respect to ``R`` (and PLIF ``beta``).

    Each codeword is treated as the mean of its members' counts; the scaling
    statistics are constants.
    """
    if trace is None or not trace.record.spikes:
        raise ValueError("tokenizer forward artifacts missing")
    n, d = trace.counts.shape
    grad_counts = np.zeros((n, d))
    hit = cb.assignment >= 0
    members = cb.assignment[hit]
    grad_counts[hit] = grad_codewords[members] / cb.populations[members, None]

    grad_inputs, grad_beta = sequence_backward(neuron, trace.record, grad_counts, beta)

    grad_m = np.zeros((n, d))
    for t in reversed(range(len(grad_inputs))):
        grad_m = grad_m + trace.gain * grad_inputs[t]
        span = trace.norm.spans[t]
        scale = np.divide(trace.v_th, span, out=np.zeros_like(span), where=span > 0)
        grad_m = apply_operator(p, grad_m * scale)  # P is symmetric, so P^T = P
    return grad_m, grad_beta
