"""Acceptance criteria 1-7. Each test prints one PASS/FAIL line, and the
lines are repeated in the pytest terminal summary."""

import dataclasses
import os
import time
from pathlib import Path

import numpy as np
import pytest

from gtsnt.attention import cgsa_forward, dense_attention_oracle, embed_codebook, expand_keys
from gtsnt.bench import ScalingConfig, run_scaling_suite
from gtsnt.config import load_config
from gtsnt.gradcheck import check_gradients, relative_error
from gtsnt.graph import GraphFormatError, load_planetoid, synthesize_graph
from gtsnt.model import ModelConfig, evaluate, init_params, model_forward, train
from gtsnt.neurons import NeuronConfig, NeuronState, fire, membrane_update, reset, run_sequence, step, surrogate_grad
from gtsnt.tokenizer import TokenizerConfig, codebook_usage, latent_space_size

ROOT = Path(__file__).resolve().parents[1]
PLANETOID_DIR = Path(os.environ.get("GTSNT_PLANETOID_DIR", ROOT / "data" / "planetoid"))


def test_criterion_1_factorization_matches_dense_oracle(verdict):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 257))
        b = int(rng.integers(1, min(n, 32) + 1))
        d = int(rng.integers(1, 33))
        dc = int(rng.integers(1, 9))
        h = rng.normal(size=(n, d))
        assignment = np.concatenate([np.arange(b), rng.integers(0, b, n - b)])
        rng.shuffle(assignment)
        pops = np.bincount(assignment, minlength=b)
        G = embed_codebook(rng.integers(0, 4, (b, dc)), rng.normal(size=(dc, d)), rng.normal(size=d)).G
        w_q, w_v = rng.normal(size=(d, d)), rng.normal(size=(d, d))
        k_hat, hit = expand_keys(G, assignment)
        dense = dense_attention_oracle(h @ w_q, k_hat, (h @ w_v)[hit])
        worst = max(worst, relative_error(cgsa_forward(h, G, assignment, pops, w_q, w_v), dense))
    ok = worst <= 1e-5
    verdict(ok, f"100 instances, max relative error {worst:.2e} (tol 1e-5)")
    assert ok


def test_criterion_2_end_to_end_gradients(verdict):
    start = time.perf_counter()
    worst, names = 0.0, set()
    for seed in range(5):
        cfg = ModelConfig(num_layers=2, hidden=8, T=3, D=3, B_max=8, seed=seed)
        g = synthesize_graph(12, 3.0, 5, 3, seed)
        result = check_gradients(g, init_params(12, 5, 3, cfg), cfg, tolerance=1e-3)
        worst = max(worst, result.max_error)
        names |= set(result.errors)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-3 and elapsed < 60
    verdict(ok, f"5 graphs x {len(names)} tensors, max relative error {worst:.2e} (tol 1e-3), {elapsed:.1f} s")
    assert ok


def test_criterion_3_spike_count_and_codebook_invariants(verdict):
    failures = []
    passes = 0
    for seed in range(12):
        for variant in ("IF", "LIF", "PLIF"):
            n = 20 + 15 * seed
            T, D = 1 + seed % 4, 1 + seed % 6
            cfg = ModelConfig(num_layers=2, hidden=8, T=T, D=D, neuron=NeuronConfig(variant), seed=seed)
            g = synthesize_graph(n, 4.0, 5, 3, seed)
            _, cache = model_forward(g, init_params(n, 5, 3, cfg), cfg)
            for lc in cache.layers:
                passes += 1
                s = lc.trace.counts.counts
                cb = lc.codebook
                if s.min() < 0 or s.max() > T:
                    failures.append(f"counts outside [0,{T}]")
                if not np.array_equal(cb.one_hot() @ cb.codewords, s):
                    failures.append("U C != S")
                if cb.size > min(n, latent_space_size(cfg.tokenizer())):
                    failures.append("B exceeds capacity")
                if cb.populations.min() < 1 or codebook_usage(cb) != 1.0:
                    failures.append("empty codeword")
    ok = not failures
    verdict(ok, f"{passes} tokenizer passes checked" + (f"; {failures[:3]}" if failures else ""))
    assert ok, failures


def test_criterion_4_latent_space_capacity(verdict):
    a = latent_space_size(TokenizerConfig(T=3, D=4))
    b = latent_space_size(TokenizerConfig(T=3, D=7))
    ok = a == 2**8 and b == 2**14
    verdict(ok, f"T=3/D=4 -> {a}, T=3/D=7 -> {b}")
    assert ok


@pytest.mark.slow
def test_criterion_5_linear_scaling(verdict, tmp_path):
    summary = run_scaling_suite([2**k for k in range(13, 18)], ScalingConfig(num_codewords=32, hidden=64), tmp_path)
    cgsa, dense = summary["cgsa_slope"], summary["dense_slope"]
    ok = 0.8 <= cgsa <= 1.3 and 1.7 <= dense <= 2.3
    verdict(ok, f"cgsa slope {cgsa:.3f} (want [0.8,1.3]), dense slope {dense:.3f} (want [1.7,2.3])")
    assert ok


@pytest.mark.slow
@pytest.mark.parametrize("name, floor, nodes, edges", [("cora", 0.75, 2708, 10556), ("citeseer", 0.65, 3327, 9104)])
def test_criterion_6_planetoid_accuracy(verdict, name, floor, nodes, edges):
    try:
        g = load_planetoid(PLANETOID_DIR, name)
    except GraphFormatError as exc:
        verdict(False, f"{name}: dataset missing ({exc}); set GTSNT_PLANETOID_DIR to the ind.{name}.* directory")
        pytest.fail(f"{name} data not available: {exc}")
    exp = load_config(ROOT / "configs" / f"{name}.cfg")
    shape_ok = g.num_nodes == nodes and (edges is None or g.num_edges == edges)
    model, _ = train(g, exp.model, exp.train)
    acc = evaluate(model, g, "test")
    ok = shape_ok and acc >= floor
    verdict(ok, f"{name}: N={g.num_nodes} |E|={g.num_edges}, test accuracy {acc:.4f} (want >= {floor})")
    assert ok


def test_criterion_7_neuron_unit_suite(verdict):
    IF, LIF = NeuronConfig("IF"), NeuronConfig("LIF", tau=2.0)
    checks = {}

    def steps(cfg, value, count):
        state, out = NeuronState.initial(cfg, (1,)), []
        for _ in range(count):
            s, state = step(cfg, state, np.array([value]))
            out.append(int(s[0]))
        return out, state.v[0]

    checks["IF update"] = membrane_update(IF, np.array([0.0]), np.array([0.6]))[0] == 0.6
    checks["LIF update"] = membrane_update(LIF, np.array([0.5]), np.array([1.0]))[0] == 0.75
    checks["fire at threshold"] = fire(np.array([1.0]), 1.0)[0] == 1
    checks["no fire below"] = fire(np.array([0.9]), 1.0)[0] == 0
    checks["reset"] = reset(np.array([1.2, 0.4]), np.array([1.0, 0.0]), 0.0).tolist() == [0.0, 0.4]
    checks["IF 0.6 x3"] = steps(IF, 0.6, 3) == ([0, 1, 0], 0.6)
    checks["LIF input 2"] = steps(LIF, 2.0, 5)[0] == [1] * 5
    checks["LIF asymptote"] = steps(LIF, 1.0, 16)[0] == [0] * 16
    checks["surrogate at 0"] = surrogate_grad(0.0, 4.0) == 1.0
    x = np.random.default_rng(0).uniform(-2, 3, (6, 8, 4))
    a = run_sequence(LIF, list(x))
    b = run_sequence(NeuronConfig("PLIF", beta=0.0), list(x))
    checks["PLIF(0) == LIF(2) bitwise"] = all(
        np.array_equal(p, q) for p, q in zip(a.spikes + a.pre_activations, b.spikes + b.pre_activations)
    )
    failed = [k for k, v in checks.items() if not v]
    ok = not failed
    verdict(ok, f"{len(checks)} exact examples" + (f"; failed {failed}" if failed else ""))
    assert ok
