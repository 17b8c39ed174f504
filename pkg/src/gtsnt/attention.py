"""Codebook-guided self-attention.

Every node attends to the ``B`` codeword tokens instead of to all ``N``
nodes. Keys of nodes sharing a codeword are identical, so softmax over
nodes collapses to a softmax over codewords weighted by their populations,
and values collapse to per-codeword means. Cost is ``O(N * B * d)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

NORM_EPS = 1e-12


@dataclass
class EmbedCache:
    codewords: np.ndarray
    projected: np.ndarray
    scale: np.ndarray
    mode: str


@dataclass
class CodebookEmbedding:
    G: np.ndarray
    cache: EmbedCache | None = None


@dataclass
class AttentionCache:
    h: np.ndarray
    q: np.ndarray
    G: np.ndarray
    weights: np.ndarray
    value_means: np.ndarray
    assignment: np.ndarray
    populations: np.ndarray


def embed_codebook(codewords, weight, bias, mode: str = "l2") -> CodebookEmbedding:
    """Project codewords and normalize each row.

    ``mode="l2"`` scales rows to unit length (zero rows stay zero);
    ``mode="layernorm"`` centers and scales rows to unit variance.
    """
    c = np.asarray(codewords, dtype=np.float64)
    y = c @ weight + bias
    if mode == "l2":
        norm = np.sqrt(np.sum(y * y, axis=1, keepdims=True))
        scale = 1.0 / np.maximum(norm, NORM_EPS)
        g = y * scale
    elif mode == "layernorm":
        y = y - y.mean(axis=1, keepdims=True)
        scale = 1.0 / np.sqrt(np.mean(y * y, axis=1, keepdims=True) + 1e-5)
        g = y * scale
    else:
        raise ValueError(f"unknown codebook norm {mode!r}")
    return CodebookEmbedding(g, EmbedCache(c, y, scale, mode))


def embed_backward(grad_g, emb: CodebookEmbedding, weight):
    """Returns ``(grad_codewords, grad_weight, grad_bias)``."""
    cache = emb.cache
    if cache is None:
        raise ValueError("embedding cache missing")
    g = emb.G
    if cache.mode == "l2":
        active = cache.scale < 1.0 / NORM_EPS
        radial = np.sum(g * grad_g, axis=1, keepdims=True)
        grad_y = np.where(active, (grad_g - g * radial) * cache.scale, grad_g * cache.scale)
    else:
        radial = np.mean(g * grad_g, axis=1, keepdims=True)
        centered = grad_g - grad_g.mean(axis=1, keepdims=True)
        grad_y = (centered - g * radial) * cache.scale
    return grad_y @ weight.T, cache.codewords.T @ grad_y, grad_y.sum(axis=0)


def segment_sum(v, assignment, num_segments):
    """``U^T v`` through a sparse one-hot matrix; rows with -1 are skipped."""
    hit = np.flatnonzero(assignment >= 0)
    onehot = sp.csr_matrix(
        (np.ones(len(hit)), (assignment[hit], hit)), shape=(num_segments, len(assignment))
    )
    return np.asarray(onehot @ v)


def segment_mean(v, assignment, populations):
    return segment_sum(v, assignment, len(populations)) / populations[:, None]


def cgsa_forward(h, G, assignment, populations, w_q, w_v, return_cache: bool = False, block: int = 512):
    """Node-to-codeword attention output, one row per node.

    Nodes with ``assignment == -1`` still query but contribute no value.
    Queries are processed in row blocks of size ``block``.
    """
    populations = np.asarray(populations)
    if G.shape[0] == 0 or populations.sum() == 0:
        raise ValueError("no codewords retained")
    n = h.shape[0]
    value_means = segment_mean(h, assignment, populations) @ w_v
    q = np.empty((n, w_q.shape[1]))
    weights = np.empty((n, G.shape[0]))
    out = np.empty((n, w_v.shape[1]))
    for start in range(0, n, block):
        rows = slice(start, start + block)
        np.matmul(h[rows], w_q, out=q[rows])
        w = q[rows] @ G.T
        w -= w.max(axis=1, keepdims=True)
        np.exp(w, out=w)
        w *= populations
        w /= w.sum(axis=1, keepdims=True)
        weights[rows] = w
        np.matmul(w, value_means, out=out[rows])
    if not return_cache:
        return out
    return out, AttentionCache(h, q, G, weights, value_means, assignment, populations)


def cgsa_backward(grad_out, cache: AttentionCache, w_q, w_v):
    """Returns ``(grad_h, grad_G, grad_wq, grad_wv)``."""
    if cache is None:
        raise ValueError("attention cache missing")
    w = cache.weights
    grad_w = grad_out @ cache.value_means.T
    grad_means = w.T @ grad_out
    grad_logits = w * (grad_w - np.sum(w * grad_w, axis=1, keepdims=True))

    grad_v = np.zeros_like(grad_out)
    hit = cache.assignment >= 0
    members = cache.assignment[hit]
    grad_v[hit] = grad_means[members] / cache.populations[members, None]

    grad_q = grad_logits @ cache.G
    grad_G = grad_logits.T @ cache.q
    grad_h = grad_q @ w_q.T + grad_v @ w_v.T
    return grad_h, grad_G, cache.h.T @ grad_q, cache.h.T @ grad_v


def expand_keys(G, assignment):
    """Per-node keys ``U @ G`` for assigned nodes, plus the boolean mask."""
    hit = np.asarray(assignment) >= 0
    return G[assignment[hit]], hit


def dense_attention_oracle(q, k_hat, v, block: int = 2048):
    """Explicit ``softmax(q @ k_hat.T) @ v``, row blocks to bound memory."""
    out = np.empty((q.shape[0], v.shape[1]))
    for start in range(0, q.shape[0], block):
        scores = q[start : start + block] @ k_hat.T
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=1, keepdims=True)
        out[start : start + block] = scores @ v
    return out
