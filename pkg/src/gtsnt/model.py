"""GT-SNT network: per-layer tokenizer, GCN encoder, codebook attention and a
residual, followed by a linear classification head. Forward and backward
are written out by hand on numpy arrays."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .attention import (
    AttentionCache,
    CodebookEmbedding,
    cgsa_backward,
    cgsa_forward,
    embed_backward,
    embed_codebook,
)
from .graph import Graph, SparseOperator, apply_operator, build_propagation_operator
from .neurons import NeuronConfig
from .tokenizer import (
    Codebook,
    Normalization,
    TokenizerConfig,
    TokenizerTrace,
    group_codebook,
    init_random_features,
    propagate_and_spike,
    reconstruct_codebook,
    tokenizer_backward,
    truncate_codebook,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    hidden: int = 64
    T: int = 3
    D: int = 6
    B_max: int = 4096
    neuron: NeuronConfig = field(default_factory=NeuronConfig)
    codebook_norm: str = "l2"
    input_gain: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")

    def tokenizer(self, layer: int = 0) -> TokenizerConfig:
        return TokenizerConfig(
            T=self.T, D=self.D, B_max=self.B_max, seed=self.seed + layer, input_gain=self.input_gain
        )


@dataclass
class LayerParams:
    R: np.ndarray
    beta: np.ndarray
    mpnn_weight: np.ndarray
    codebook_weight: np.ndarray
    codebook_bias: np.ndarray
    w_q: np.ndarray
    w_v: np.ndarray
    residual_proj: np.ndarray


@dataclass
class ModelParams:
    input_proj: np.ndarray
    layers: list[LayerParams]
    classifier: np.ndarray
    classifier_bias: np.ndarray

    def named(self) -> dict[str, np.ndarray]:
        """Flat ``name -> array`` view sharing memory with the parameters."""
        out = {"input_proj": self.input_proj}
        for i, layer in enumerate(self.layers):
            for f in fields(layer):
                out[f"layers.{i}.{f.name}"] = getattr(layer, f.name)
        out["classifier"] = self.classifier
        out["classifier_bias"] = self.classifier_bias
        return out

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    @classmethod
    def from_named(cls, arrays: dict[str, np.ndarray]) -> "ModelParams":
        n_layers = 1 + max(int(k.split(".")[1]) for k in arrays if k.startswith("layers."))
        layers = [
            LayerParams(**{f.name: np.array(arrays[f"layers.{i}.{f.name}"]) for f in fields(LayerParams)})
            for i in range(n_layers)
        ]
        return cls(
            np.array(arrays["input_proj"]),
            layers,
            np.array(arrays["classifier"]),
            np.array(arrays["classifier_bias"]),
        )


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(num_nodes: int, num_features: int, num_classes: int, cfg: ModelConfig) -> ModelParams:
    rng = np.random.default_rng(cfg.seed)
    d = cfg.hidden
    layers = []
    for i in range(cfg.num_layers):
        tok = cfg.tokenizer(i)
        layers.append(
            LayerParams(
                R=init_random_features(num_nodes, tok),
                beta=np.array(cfg.neuron.beta, dtype=np.float64),
                mpnn_weight=_glorot(rng, d, d),
                codebook_weight=_glorot(rng, cfg.D, d),
                codebook_bias=np.zeros(d),
                w_q=_glorot(rng, d, d),
                w_v=_glorot(rng, d, d),
                residual_proj=_glorot(rng, d, d),
            )
        )
    return ModelParams(
        input_proj=_glorot(rng, num_features, d),
        layers=layers,
        classifier=_glorot(rng, d, num_classes),
        classifier_bias=np.zeros(num_classes),
    )


# ---------------------------------------------------------------------------
# forward / backward


def mpnn_forward(z_prev, p: SparseOperator, w, return_pre: bool = False):
    """Single GCN layer ``relu(P z W)``."""
    agg = apply_operator(p, z_prev)
    pre = agg @ w
    h = np.maximum(pre, 0.0)
    return (h, agg, pre) if return_pre else h


@dataclass
class Frozen:
    """Discrete forward choices held fixed when checking gradients."""

    norms: list[Normalization]
    groups: list[Codebook]


@dataclass
class LayerCache:
    z_prev: np.ndarray
    agg: np.ndarray
    pre: np.ndarray
    h: np.ndarray
    trace: TokenizerTrace
    codebook: Codebook
    groups: Codebook
    embedding: CodebookEmbedding
    attention: AttentionCache
    attended: np.ndarray
    full_codebook_size: int


@dataclass
class ForwardCache:
    operator: SparseOperator
    features: np.ndarray
    z0: np.ndarray
    layers: list[LayerCache]
    z_last: np.ndarray
    neuron_cfgs: list[NeuronConfig]
    smooth: bool

    def frozen(self) -> Frozen:
        return Frozen([lc.trace.norm for lc in self.layers], [lc.groups for lc in self.layers])

    def codebook_sizes(self) -> list[int]:
        return [lc.codebook.size for lc in self.layers]


def tokenize_layer(p, layer: LayerParams, cfg: ModelConfig, smooth=False, norm=None, groups=None):
    """Tokenizer for one layer. Returns ``(trace, codebook, groups, B)``.

    The node grouping comes from hard spike counts; codeword values are the
    member means of the (possibly smoothed) counts.
    """
    beta = float(layer.beta)
    trace = propagate_and_spike(p, layer.R, cfg.neuron, cfg.tokenizer(), beta, smooth, norm)
    full_size = None
    if groups is None:
        hard = trace.counts.counts
        if smooth:
            hard = np.sum([pre >= 0 for pre in trace.record.pre_activations], axis=0)
        full = reconstruct_codebook(hard)
        full_size = full.size
        groups, _ = truncate_codebook(full, cfg.B_max)
    if smooth:
        codebook = group_codebook(trace.counts.counts, groups)
    else:
        codebook = groups
    return trace, codebook, groups, full_size if full_size is not None else groups.size


def model_forward(
    g: Graph,
    params: ModelParams,
    cfg: ModelConfig,
    operator: SparseOperator | None = None,
    smooth: bool = False,
    frozen: Frozen | None = None,
    timings: dict | None = None,
):
    """Returns ``(logits, cache)``.

    ``smooth`` swaps hard firing for its logistic relaxation so the loss is
    differentiable; ``frozen`` pins normalization statistics and node
    grouping from an earlier pass.
    """
    if g.features.shape[1] != params.input_proj.shape[0]:
        raise ValueError(
            f"graph has {g.features.shape[1]} features, model expects {params.input_proj.shape[0]}"
        )
    if params.layers[0].R.shape[0] != g.num_nodes:
        raise ValueError("random features do not match graph size")
    p = build_propagation_operator(g) if operator is None else operator
    clock = _Clock(timings)

    z = g.features @ params.input_proj
    z0 = z
    caches = []
    for i, layer in enumerate(params.layers):
        with clock("snt"):
            trace, codebook, groups, full_size = tokenize_layer(
                p, layer, cfg, smooth,
                frozen.norms[i] if frozen else None,
                frozen.groups[i] if frozen else None,
            )
        with clock("mpnn"):
            h, agg, pre = mpnn_forward(z, p, layer.mpnn_weight, return_pre=True)
        with clock("cgsa"):
            emb = embed_codebook(codebook.codewords, layer.codebook_weight, layer.codebook_bias, cfg.codebook_norm)
            attended, att_cache = cgsa_forward(
                h, emb.G, codebook.assignment, codebook.populations, layer.w_q, layer.w_v, return_cache=True
            )
            z_next = attended @ layer.residual_proj + h
        caches.append(
            LayerCache(z, agg, pre, h, trace, codebook, groups, emb, att_cache, attended, full_size)
        )
        z = z_next
    with clock("head"):
        logits = z @ params.classifier + params.classifier_bias
    neuron_cfgs = [cfg.neuron] * len(params.layers)
    return logits, ForwardCache(p, g.features, z0, caches, z, neuron_cfgs, smooth)


def model_backward(cache: ForwardCache, grad_logits, params: ModelParams) -> dict[str, np.ndarray]:
    """Gradients for every entry of :meth:`ModelParams.named`."""
    if cache is None or not cache.layers:
        raise ValueError("forward cache missing")
    grads = {}
    grads["classifier"] = cache.z_last.T @ grad_logits
    grads["classifier_bias"] = grad_logits.sum(axis=0)
    grad_z = grad_logits @ params.classifier.T
    p = cache.operator

    for i in reversed(range(len(params.layers))):
        layer, lc, neuron = params.layers[i], cache.layers[i], cache.neuron_cfgs[i]
        prefix = f"layers.{i}."
        grads[prefix + "residual_proj"] = lc.attended.T @ grad_z
        grad_att = grad_z @ layer.residual_proj.T

        grad_h_att, grad_G, grads[prefix + "w_q"], grads[prefix + "w_v"] = cgsa_backward(
            grad_att, lc.attention, layer.w_q, layer.w_v
        )
        grad_cw, grads[prefix + "codebook_weight"], grads[prefix + "codebook_bias"] = embed_backward(
            grad_G, lc.embedding, layer.codebook_weight
        )
        grad_R, grad_beta = tokenizer_backward(grad_cw, lc.codebook, lc.trace, p, neuron, float(layer.beta))
        grads[prefix + "R"] = grad_R
        grads[prefix + "beta"] = np.array(grad_beta)

        grad_h = grad_z + grad_h_att
        grad_pre = grad_h * (lc.pre > 0)
        grads[prefix + "mpnn_weight"] = lc.agg.T @ grad_pre
        grad_z = apply_operator(p, grad_pre @ layer.mpnn_weight.T)

    grads["input_proj"] = cache.features.T @ grad_z
    return grads


def cross_entropy(logits, labels, mask, return_grad: bool = False):
    """Mean negative log-likelihood over ``mask`` (an index array)."""
    mask = np.asarray(mask)
    if mask.size == 0:
        raise ValueError("empty mask")
    sel = logits[mask]
    shifted = sel - sel.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    y = labels[mask]
    loss = float(np.mean(log_z - shifted[np.arange(len(mask)), y]))
    if not return_grad:
        return loss
    probs = np.exp(shifted - log_z[:, None])
    probs[np.arange(len(mask)), y] -= 1.0
    grad = np.zeros_like(logits)
    np.add.at(grad, mask, probs / len(mask))
    return loss, grad


def accuracy(logits, labels, mask) -> float:
    mask = np.asarray(mask)
    if mask.size == 0:
        raise ValueError("empty split")
    return float(np.mean(np.argmax(logits[mask], axis=1) == labels[mask]))


# ---------------------------------------------------------------------------
# optimizer

_NO_DECAY = ("R", "beta", "bias")


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        named = params.named()
        return cls({k: np.zeros_like(a) for k, a in named.items()}, {k: np.zeros_like(a) for k, a in named.items()})


def adam_step(params: ModelParams, grads, state: OptimizerState, hyper: AdamConfig) -> None:
    """In-place AdamW update (decoupled weight decay on weight matrices)."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - hyper.beta1**t
    bc2 = 1.0 - hyper.beta2**t
    for name, value in params.named().items():
        grad = grads[name]
        m, v = state.m[name], state.v[name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * grad
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * grad * grad
        if hyper.weight_decay and not name.endswith(_NO_DECAY):
            value -= hyper.lr * hyper.weight_decay * value
        value -= hyper.lr * (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    patience: int = 50
    adam: AdamConfig = field(default_factory=AdamConfig)
    log_every: int = 0


@dataclass
class TrainedModel:
    params: ModelParams
    config: ModelConfig
    best_epoch: int
    best_val_acc: float


def evaluate(model: TrainedModel | ModelParams, g: Graph, split: str, cfg: ModelConfig | None = None,
             operator: SparseOperator | None = None) -> float:
    if isinstance(model, TrainedModel):
        params, cfg = model.params, model.config
    else:
        params = model
    idx = g.splits.get(split)
    if idx is None or idx.size == 0:
        raise ValueError(f"split {split!r} is empty")
    logits, _ = model_forward(g, params, cfg, operator)
    return accuracy(logits, g.labels, idx)


def train(g: Graph, cfg: ModelConfig, tcfg: TrainConfig, params: ModelParams | None = None):
    """Full-graph training with early stopping on validation accuracy.

    Returns ``(TrainedModel, history)``; ``history`` is a list of per-epoch
    dicts. The returned parameters are those of the best validation epoch.
    """
    for name in ("train", "val"):
        if g.splits.get(name) is None or g.splits[name].size == 0:
            raise ValueError(f"graph has no {name!r} split")
    test_idx = g.splits.get("test")
    params = params or init_params(g.num_nodes, g.num_features, g.num_classes, cfg)
    state = OptimizerState.zeros_like(params)
    p = build_propagation_operator(g)

    best = (-1.0, -1, params.copy())
    history = []
    stale = 0
    for epoch in range(1, tcfg.epochs + 1):
        logits, cache = model_forward(g, params, cfg, p)
        loss, grad = cross_entropy(logits, g.labels, g.splits["train"], return_grad=True)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite training loss at epoch {epoch}")
        val_acc = accuracy(logits, g.labels, g.splits["val"])
        row = {
            "epoch": epoch,
            "train_loss": loss,
            "train_acc": accuracy(logits, g.labels, g.splits["train"]),
            "val_acc": val_acc,
            "test_acc": accuracy(logits, g.labels, test_idx) if test_idx is not None and test_idx.size else float("nan"),
            "codebook_sizes": cache.codebook_sizes(),
        }
        history.append(row)
        if tcfg.log_every and epoch % tcfg.log_every == 0:
            log.info("epoch %d loss %.4f val %.4f test %.4f B=%s", epoch, loss, val_acc, row["test_acc"], row["codebook_sizes"])

        if val_acc > best[0]:
            best = (val_acc, epoch, params.copy())
            stale = 0
        else:
            stale += 1
            if stale >= tcfg.patience:
                break

        grads = model_backward(cache, grad, params)
        adam_step(params, grads, state, tcfg.adam)

    return TrainedModel(best[2], cfg, best[1], best[0]), history


class _Clock:
    def __init__(self, sink):
        self.sink = sink
        self._key = None

    def __call__(self, key):
        self._key = key
        return self

    def __enter__(self):
        self._start = time.perf_counter()

    def __exit__(self, *exc):
        if self.sink is not None:
            self.sink[self._key] = self.sink.get(self._key, 0.0) + time.perf_counter() - self._start
