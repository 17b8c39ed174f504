"""Efficiency instrumentation: operation counts, theoretical energy,
inference latency and the attention scaling sweep."""

from __future__ import annotations

import csv
import json
import logging
import statistics
import time
import tracemalloc
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .attention import cgsa_forward, dense_attention_oracle, expand_keys
from .graph import Graph, build_propagation_operator
from .model import ModelConfig, ModelParams, model_forward

log = logging.getLogger(__name__)

# 45 nm figures for 32-bit float operations
E_MAC = 4.6e-12
E_AC = 0.9e-12


def estimate_energy(mac_ops: int, ac_ops: int, e_mac: float = E_MAC, e_ac: float = E_AC) -> float:
    if mac_ops < 0 or ac_ops < 0:
        raise ValueError("operation counts must be nonnegative")
    return e_mac * mac_ops + e_ac * ac_ops


@dataclass
class OpCounts:
    mac: int = 0
    ac: int = 0
    by_module: dict[str, dict[str, int]] = field(default_factory=dict)

    def add(self, module: str, mac: int = 0, ac: int = 0):
        self.mac += int(mac)
        self.ac += int(ac)
        slot = self.by_module.setdefault(module, {"mac": 0, "ac": 0})
        slot["mac"] += int(mac)
        slot["ac"] += int(ac)


def count_ops(params: ModelParams, g: Graph, cfg: ModelConfig, cache=None) -> OpCounts:
    """Analytic MAC/AC tally of one inference pass.

    Real-valued products (dense and sparse) count as MACs. Work gated by
    binary events counts as ACs: accumulating spikes into counts, projecting
    integer codewords (count-many row additions) and the one-hot
    aggregation of values per codeword.
    """
    if cache is None:
        _, cache = model_forward(g, params, cfg)
    p = cache.operator
    n, d_in = g.features.shape
    d = cfg.hidden
    ops = OpCounts()
    ops.add("input_proj", mac=n * d_in * d)
    for lc in cache.layers:
        spikes = sum(int(np.count_nonzero(s)) for s in lc.trace.record.spikes)
        ops.add("snt", mac=cfg.T * p.nnz * cfg.D + cfg.T * n * cfg.D, ac=spikes)
        ops.add("mpnn", mac=p.nnz * d + n * d * d)
        b = lc.codebook.size
        assigned = int(np.count_nonzero(lc.codebook.assignment >= 0))
        ops.add("codebook", mac=b * d, ac=int(np.sum(lc.codebook.codewords)) * d)
        ops.add("cgsa", mac=2 * n * d * d + 2 * n * b * d, ac=assigned * d)
        ops.add("residual", mac=n * d * d)
    ops.add("head", mac=n * d * params.classifier.shape[1])
    return ops


@dataclass
class EfficiencyReport:
    latency_s: float
    energy_j: float
    mac_ops: int
    ac_ops: int
    peak_bytes: int
    breakdown_s: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)


def bench_latency(params: ModelParams, g: Graph, cfg: ModelConfig, repeats: int = 5):
    """Median wall-clock of warm inference passes.

    Returns ``(latency_s, breakdown)`` where ``breakdown`` holds the
    median per-module time.
    """
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    p = build_propagation_operator(g)
    model_forward(g, params, cfg, p)  # warm-up
    totals, parts = [], []
    for _ in range(repeats):
        timings = {}
        start = time.perf_counter()
        model_forward(g, params, cfg, p, timings=timings)
        totals.append(time.perf_counter() - start)
        parts.append(timings)
    breakdown = {k: statistics.median(t[k] for t in parts) for k in parts[0]}
    return statistics.median(totals), breakdown


def peak_forward_bytes(params: ModelParams, g: Graph, cfg: ModelConfig) -> int:
    """High-water mark of traced allocations during one forward pass."""
    p = build_propagation_operator(g)
    tracing = tracemalloc.is_tracing()
    if not tracing:
        tracemalloc.start()
    tracemalloc.reset_peak()
    base, _ = tracemalloc.get_traced_memory()
    model_forward(g, params, cfg, p)
    _, peak = tracemalloc.get_traced_memory()
    if not tracing:
        tracemalloc.stop()
    return max(int(peak - base), 0)


def efficiency_report(params, g, cfg, repeats: int = 5, e_mac=E_MAC, e_ac=E_AC) -> EfficiencyReport:
    latency, breakdown = bench_latency(params, g, cfg, repeats)
    ops = count_ops(params, g, cfg)
    return EfficiencyReport(
        latency_s=latency,
        energy_j=estimate_energy(ops.mac, ops.ac, e_mac, e_ac),
        mac_ops=ops.mac,
        ac_ops=ops.ac,
        peak_bytes=peak_forward_bytes(params, g, cfg),
        breakdown_s=breakdown,
    )


# ---------------------------------------------------------------------------
# scaling sweep


@dataclass(frozen=True)
class ScalingConfig:
    num_codewords: int = 32
    hidden: int = 64
    repeats: int = 9
    min_time: float = 0.5
    dense_cap: int = 2**14
    threads: int = 1
    seed: int = 0


def attention_instance(n: int, cfg: ScalingConfig, rng: np.random.Generator):
    """Random node states and a codebook with every codeword populated."""
    b = min(cfg.num_codewords, n)
    d = cfg.hidden
    h = rng.normal(size=(n, d))
    assignment = np.concatenate([np.arange(b), rng.integers(0, b, size=n - b)])
    rng.shuffle(assignment)
    populations = np.bincount(assignment, minlength=b)
    G = rng.normal(size=(b, d))
    G /= np.linalg.norm(G, axis=1, keepdims=True)
    w_q = rng.normal(size=(d, d)) / np.sqrt(d)
    w_v = rng.normal(size=(d, d)) / np.sqrt(d)
    return h, G, assignment, populations, w_q, w_v


def _median_time(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def _interleaved_medians(fns, rounds: int, min_time: float):
    """Median time per callable, timed round-robin so slow drifts in clock
    speed hit every entry alike. Cheap callables run several times per
    round so each sample lasts about ``min_time / rounds``."""
    inner = []
    for fn in fns:
        fn()
        start = time.perf_counter()
        fn()
        once = max(time.perf_counter() - start, 1e-9)
        inner.append(max(1, int(min_time / rounds / once)))
    samples = [[] for _ in fns]
    for _ in range(rounds):
        for i, fn in enumerate(fns):
            start = time.perf_counter()
            for _ in range(inner[i]):
                fn()
            samples[i].append((time.perf_counter() - start) / inner[i])
    return [statistics.median(s) for s in samples]


def fit_loglog_slope(sizes, times) -> float | None:
    if len(sizes) < 2:
        return None
    slope, _ = np.polyfit(np.log(sizes), np.log(times), 1)
    return float(slope)


def run_scaling_suite(sizes, cfg: ScalingConfig = ScalingConfig(), out_dir=None) -> dict:
    """Time codebook attention and the dense oracle over ``sizes``.

    Returns a summary with fitted log-log slopes; with ``out_dir`` also
    writes ``scaling.csv`` and ``scaling.json``.
    """
    sizes = [int(s) for s in sizes]
    if sizes != sorted(sizes):
        raise ValueError("sizes must be ascending")
    rng = np.random.default_rng(cfg.seed)
    instances = [attention_instance(n, cfg, rng) for n in sizes]
    with threadpool_limits(limits=cfg.threads):
        cgsa_times = _interleaved_medians(
            [lambda a=inst: cgsa_forward(*a) for inst in instances], cfg.repeats, cfg.min_time
        )
        dense_times = []
        for n, (h, G, assignment, _, w_q, w_v) in zip(sizes, instances):
            if n > cfg.dense_cap:
                dense_times.append(None)
                continue
            k_hat, _ = expand_keys(G, assignment)
            q, v = h @ w_q, h @ w_v
            dense_times.append(_median_time(lambda: dense_attention_oracle(q, k_hat, v), 3))
    rows = [{"n": n, "cgsa_s": tc, "dense_s": td} for n, tc, td in zip(sizes, cgsa_times, dense_times)]
    for row in rows:
        log.info("n=%d cgsa=%.4fs dense=%s", row["n"], row["cgsa_s"], row["dense_s"])

    dense_rows = [r for r in rows if r["dense_s"] is not None]
    summary = {
        "sizes": sizes,
        "num_codewords": cfg.num_codewords,
        "hidden": cfg.hidden,
        "cgsa_slope": fit_loglog_slope([r["n"] for r in rows], [r["cgsa_s"] for r in rows]),
        "dense_slope": fit_loglog_slope([r["n"] for r in dense_rows], [r["dense_s"] for r in dense_rows]),
        "rows": rows,
        "warnings": [],
    }
    if len(sizes) < 2:
        summary["warnings"].append("need at least two sizes to fit a slope")
        log.warning("scaling suite with a single size: no slope fitted")

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "scaling.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["n", "cgsa_s", "dense_s"])
            writer.writeheader()
            writer.writerows(rows)
        (out / "scaling.json").write_text(json.dumps(summary, indent=2))
    return summary
