import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gtsnt.graph import build_propagation_operator, make_graph, synthesize_graph
from gtsnt.neurons import NeuronConfig, surrogate_grad
from gtsnt.tokenizer import (
    UNASSIGNED,
    Codebook,
    TokenizerConfig,
    codebook_usage,
    group_codebook,
    init_random_features,
    latent_space_size,
    normalize_to_threshold,
    propagate_and_spike,
    reconstruct_codebook,
    tokenizer_backward,
    truncate_codebook,
)

IF = NeuronConfig("IF")


def test_init_random_features():
    cfg = TokenizerConfig(D=4, seed=11)
    r = init_random_features(2708, cfg)
    assert r.shape == (2708, 4)
    assert r.min() >= 0 and r.max() < 1
    assert np.array_equal(r, init_random_features(2708, cfg))
    with pytest.raises(ValueError):
        init_random_features(0, cfg)


def test_normalize_examples():
    col = np.array([[0.0], [2.0], [4.0]])
    assert normalize_to_threshold(col, 1.0).ravel().tolist() == [0.0, 0.5, 1.0]
    assert normalize_to_threshold(np.full((3, 1), 3.0), 1.0).ravel().tolist() == [0, 0, 0]
    m = np.array([[0.0, 0.3], [1.0, 1.0], [0.25, 0.0]])
    assert np.array_equal(normalize_to_threshold(m, 1.0), m)


def test_propagate_symmetric_pair_gives_one_codeword():
    g = make_graph(2, [(0, 1)], np.zeros((2, 1)))
    r = np.tile(np.array([[0.2, 0.9, 0.5]]), (2, 1))
    trace = propagate_and_spike(build_propagation_operator(g), r, IF, TokenizerConfig(T=3, D=3))
    s = trace.counts.counts
    assert np.array_equal(s[0], s[1])
    assert reconstruct_codebook(s).size == 1


def test_propagate_zero_features():
    g = synthesize_graph(10, 3.0, 2, 2, seed=0)
    trace = propagate_and_spike(build_propagation_operator(g), np.zeros((10, 4)), NeuronConfig(), TokenizerConfig(D=4))
    assert not trace.counts.counts.any()


def test_propagate_single_node_degenerate_range():
    g = make_graph(1, [], np.zeros((1, 1)))
    trace = propagate_and_spike(build_propagation_operator(g), np.array([[1.0]]), IF, TokenizerConfig(T=3, D=1))
    assert trace.counts.counts.tolist() == [[0]]


def test_reconstruct_examples():
    cb = reconstruct_codebook(np.array([[1, 0], [1, 0], [0, 2]]))
    assert cb.codewords.tolist() == [[1, 0], [0, 2]]
    assert cb.assignment.tolist() == [0, 0, 1]
    assert cb.populations.tolist() == [2, 1]

    distinct = np.array([[2, 1], [0, 0], [1, 3]])
    cb = reconstruct_codebook(distinct)
    assert np.array_equal(cb.codewords, distinct) and cb.assignment.tolist() == [0, 1, 2]

    cb = reconstruct_codebook(np.ones((5, 3), np.int64))
    assert cb.size == 1 and cb.populations.tolist() == [5]


def fake_codebook(populations):
    pops = np.array(populations)
    return Codebook(np.arange(len(pops))[:, None], np.repeat(np.arange(len(pops)), pops), pops)


def test_truncate_examples():
    cb = fake_codebook([5, 3, 3, 1])
    kept, mask = truncate_codebook(cb, 2)
    assert np.flatnonzero(mask).tolist() == [0, 1]
    assert kept.populations.tolist() == [5, 3]
    assert np.count_nonzero(kept.assignment == UNASSIGNED) == 4

    same, mask = truncate_codebook(cb, 4)
    assert same is cb and mask.all()

    one, mask = truncate_codebook(fake_codebook([1, 4, 2]), 1)
    assert np.flatnonzero(mask).tolist() == [1] and one.size == 1


@given(st.lists(st.integers(1, 9), min_size=1, max_size=20), st.integers(1, 25))
def test_truncation_monotone(pops, b_max):
    kept, mask = truncate_codebook(fake_codebook(pops), b_max)
    pops = np.array(pops)
    assert mask.sum() == min(b_max, len(pops))
    if (~mask).any():
        assert pops[mask].min() >= pops[~mask].max()
    for node, b in enumerate(kept.assignment):
        if b >= 0:
            assert kept.codewords[b, 0] == fake_codebook(pops).assignment[node]


def test_latent_space_size():
    assert latent_space_size(TokenizerConfig(T=3, D=4)) == 256 == 2**8
    assert latent_space_size(TokenizerConfig(T=3, D=7)) == 16384 == 2**14
    assert latent_space_size(TokenizerConfig(T=6, D=1)) == 7
    with pytest.raises(OverflowError):
        latent_space_size(TokenizerConfig(T=16, D=32))


def test_codebook_usage():
    cb = reconstruct_codebook(np.arange(20).reshape(10, 2))
    assert codebook_usage(cb) == 1.0
    assert codebook_usage(cb, 256) == 0.0390625
    assert codebook_usage(cb, 10) == 1.0
    with pytest.raises(ValueError):
        codebook_usage(cb, 5)


def test_config_bounds():
    with pytest.raises(ValueError):
        TokenizerConfig(T=17)
    with pytest.raises(ValueError):
        TokenizerConfig(D=33)
    with pytest.raises(ValueError):
        TokenizerConfig(B_max=0)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(2, 60),
    st.integers(0, 10_000),
    st.integers(1, 5),
    st.integers(1, 6),
    st.sampled_from(["IF", "LIF", "PLIF"]),
)
def test_count_and_codebook_invariants(n, seed, T, D, variant):
    g = synthesize_graph(n, 3.0, 2, 2, seed=seed)
    cfg = TokenizerConfig(T=T, D=D, seed=seed)
    neuron = NeuronConfig(variant, beta=0.4)
    p = build_propagation_operator(g)
    r = init_random_features(n, cfg)
    trace = propagate_and_spike(p, r, neuron, cfg)
    s = trace.counts.counts
    assert s.dtype.kind == "i" and s.min() >= 0 and s.max() <= T
    cb = reconstruct_codebook(s)
    assert np.array_equal(cb.one_hot() @ cb.codewords, s)
    assert cb.size <= min(n, latent_space_size(cfg))
    assert cb.populations.min() >= 1 and cb.populations.sum() == n
    assert len(np.unique(cb.codewords, axis=0)) == cb.size
    again = reconstruct_codebook(propagate_and_spike(p, r.copy(), neuron, cfg).counts)
    assert np.array_equal(again.codewords, cb.codewords) and np.array_equal(again.assignment, cb.assignment)


def smooth_setup(g, cfg, neuron, seed=0):
    p = build_propagation_operator(g)
    r = init_random_features(g.num_nodes, cfg, np.random.default_rng(seed))
    trace = propagate_and_spike(p, r, neuron, cfg, smooth=True)
    hard = np.sum([pre >= 0 for pre in trace.record.pre_activations], axis=0)
    groups = reconstruct_codebook(hard)
    return p, r, trace, groups


def test_backward_zero_gradient():
    g = synthesize_graph(12, 3.0, 2, 2, seed=1)
    cfg = TokenizerConfig(T=3, D=3)
    p, r, trace, groups = smooth_setup(g, cfg, IF)
    cb = group_codebook(trace.counts.counts, groups)
    grad_r, grad_beta = tokenizer_backward(np.zeros((cb.size, 3)), cb, trace, p, IF)
    assert not grad_r.any() and grad_beta == 0.0


def test_backward_single_codeword_spreads_mean():
    g = synthesize_graph(9, 3.0, 2, 2, seed=2)
    cfg = TokenizerConfig(T=2, D=2)
    neuron = NeuronConfig("PLIF", beta=0.2)
    p, r, trace, _ = smooth_setup(g, cfg, neuron)
    whole = Codebook(np.zeros((1, 2)), np.zeros(9, np.int64), np.array([9]))
    singles = Codebook(np.zeros((9, 2)), np.arange(9), np.ones(9, np.int64))
    grad = np.array([[0.7, -1.3]])
    a = tokenizer_backward(grad, whole, trace, p, neuron, 0.2)
    b = tokenizer_backward(np.tile(grad / 9, (9, 1)), singles, trace, p, neuron, 0.2)
    np.testing.assert_allclose(a[0], b[0], rtol=1e-14)
    assert a[1] == pytest.approx(b[1], rel=1e-14)


def fd_codeword_loss(p, r, cfg, neuron, trace, groups, weights, beta=None, eps=1e-6):
    def loss(rr, b=beta):
        t = propagate_and_spike(p, rr, neuron, cfg, beta=b, smooth=True, norm=trace.norm)
        return float(np.sum(weights * group_codebook(t.counts.counts, groups).codewords))

    grad = np.zeros_like(r)
    for idx in np.ndindex(*r.shape):
        up, dn = r.copy(), r.copy()
        up[idx] += eps
        dn[idx] -= eps
        grad[idx] = (loss(up) - loss(dn)) / (2 * eps)
    grad_beta = None
    if beta is not None:
        grad_beta = (loss(r, beta + eps) - loss(r, beta - eps)) / (2 * eps)
    return grad, grad_beta


def test_backward_single_node_t1_if():
    g = make_graph(1, [], np.zeros((1, 1)))
    cfg = TokenizerConfig(T=1, D=1)
    p, _, _, _ = smooth_setup(g, cfg, IF)
    r = np.array([[0.8]])
    trace = propagate_and_spike(p, r, IF, cfg, smooth=True)
    cb = reconstruct_codebook(np.zeros((1, 1), np.int64))
    g_c = np.array([[1.5]])
    grad_r, _ = tokenizer_backward(g_c, cb, trace, p, IF)
    # dNorm is 0 for a one-row column, so the chain collapses to zero
    span = trace.norm.spans[0]
    dnorm = 0.0 if span[0] == 0 else 1.0 / span[0]
    expected = g_c * surrogate_grad(trace.record.pre_activations[0], IF.surrogate_alpha) * dnorm * 1.0
    fd, _ = fd_codeword_loss(p, r, cfg, IF, trace, cb, g_c)
    np.testing.assert_allclose(grad_r, expected, atol=1e-15)
    np.testing.assert_allclose(grad_r, fd, atol=1e-12)


def test_backward_path_t1_if_matches_closed_form():
    # 3-node path, T=1: grad_R = P (surrogate * g * v_th/span)
    g = make_graph(3, [(0, 1), (1, 2)], np.zeros((3, 1)))
    cfg = TokenizerConfig(T=1, D=2)
    p = build_propagation_operator(g)
    r = np.array([[0.1, 0.9], [0.5, 0.3], [0.8, 0.6]])
    trace = propagate_and_spike(p, r, IF, cfg, smooth=True)
    cb = Codebook(np.zeros((3, 2)), np.arange(3), np.ones(3, np.int64))
    g_c = np.array([[1.0, -0.5], [0.3, 0.2], [-0.7, 1.1]])
    grad_r, _ = tokenizer_backward(g_c, cb, trace, p, IF)
    pm = p.matrix.toarray()
    expected = pm @ (g_c * surrogate_grad(trace.record.pre_activations[0], 4.0) / trace.norm.spans[0])
    np.testing.assert_allclose(grad_r, expected, rtol=1e-13)
    fd, _ = fd_codeword_loss(p, r, cfg, IF, trace, cb, g_c)
    np.testing.assert_allclose(grad_r, fd, rtol=1e-4)


@pytest.mark.parametrize("variant", ["IF", "LIF", "PLIF"])
def test_backward_matches_finite_differences(variant):
    g = synthesize_graph(10, 3.0, 2, 2, seed=4)
    cfg = TokenizerConfig(T=3, D=3)
    neuron = NeuronConfig(variant, beta=0.1)
    beta = 0.1 if variant == "PLIF" else None
    p = build_propagation_operator(g)
    r = init_random_features(10, cfg, np.random.default_rng(8))
    trace = propagate_and_spike(p, r, neuron, cfg, beta=beta, smooth=True)
    hard = np.sum([pre >= 0 for pre in trace.record.pre_activations], axis=0)
    groups = reconstruct_codebook(hard)
    weights = np.random.default_rng(9).normal(size=(groups.size, 3))
    cb = group_codebook(trace.counts.counts, groups)
    grad_r, grad_beta = tokenizer_backward(weights, cb, trace, p, neuron, beta)
    fd, fd_beta = fd_codeword_loss(p, r, cfg, neuron, trace, groups, weights, beta)
    assert np.abs(fd).max() > 1e-3  # the check is not vacuous
    np.testing.assert_allclose(grad_r, fd, rtol=1e-4, atol=1e-7)
    if beta is not None:
        assert grad_beta == pytest.approx(fd_beta, rel=1e-4)


def test_backward_requires_forward():
    from gtsnt.neurons import SpikeRecord
    from gtsnt.tokenizer import Normalization, SpikeCounts, TokenizerTrace

    empty = TokenizerTrace(SpikeCounts(np.zeros((1, 1))), SpikeRecord(), Normalization(), 1.0)
    g = make_graph(1, [], np.zeros((1, 1)))
    with pytest.raises(ValueError):
        tokenizer_backward(np.zeros((1, 1)), fake_codebook([1]), empty, build_propagation_operator(g), IF)
