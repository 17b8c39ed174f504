"""Experiment configuration files (INI sections, flat keys) and checkpoints."""

from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bench import E_AC, E_MAC, ScalingConfig
from .graph import Graph, load_graph, load_planetoid, synthesize_graph
from .model import AdamConfig, ModelConfig, ModelParams, TrainConfig, TrainedModel
from .neurons import NeuronConfig


@dataclass(frozen=True)
class DataConfig:
    path: str | None = None
    format: str = "text"
    name: str | None = None
    nodes: int = 500
    avg_degree: float = 6.0
    features: int = 16
    classes: int = 3
    homophily: float = 0.8
    feature_noise: float = 1.0
    seed: int = 0

    def load(self) -> Graph:
        if self.path is None:
            return synthesize_graph(
                self.nodes, self.avg_degree, self.features, self.classes, self.seed,
                homophily=self.homophily, feature_noise=self.feature_noise,
            )
        if self.format == "planetoid":
            if not self.name:
                raise ValueError("planetoid data needs 'name' (cora, citeseer, pubmed)")
            return load_planetoid(self.path, self.name)
        return load_graph(self.path, self.format)


@dataclass(frozen=True)
class BenchConfig:
    repeats: int = 5
    threads: int = 1
    e_mac: float = E_MAC
    e_ac: float = E_AC
    sizes: tuple[int, ...] = tuple(2**k for k in range(13, 18))
    scaling: ScalingConfig = field(default_factory=ScalingConfig)


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    seed: int = 0
    out: str = "runs/default"

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=seed, model=dataclasses.replace(self.model, seed=seed))


def _get(section, key, conv, default):
    if section is None or key not in section:
        return default
    raw = section[key].strip()
    if conv is bool:
        return section.getboolean(key)
    if raw.lower() in ("none", ""):
        return None
    return conv(raw)


def load_config(path) -> ExperimentConfig:
    """Parse an INI-style config. Unknown keys are rejected.

    Sections: ``[data]``, ``[model]``, ``[neuron]``, ``[train]``,
    ``[bench]``, ``[run]``. See README for the key list.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser.read(path)
    known = {
        "data": {"path", "format", "name", "nodes", "avg_degree", "features", "classes", "homophily", "feature_noise", "seed"},
        "model": {"layers", "hidden", "T", "D", "B_max", "codebook_norm", "input_gain"},
        "neuron": {"variant", "v_th", "v_reset", "tau", "beta", "alpha"},
        "train": {"epochs", "patience", "lr", "weight_decay", "beta1", "beta2", "eps", "log_every"},
        "bench": {"repeats", "threads", "e_mac", "e_ac", "sizes", "codewords", "hidden", "dense_cap", "min_time"},
        "run": {"seed", "out"},
    }
    for name in parser.sections():
        if name not in known:
            raise ValueError(f"{path}: unknown section [{name}]")
        extra = set(parser[name]) - known[name]
        if extra:
            raise ValueError(f"{path}: unknown keys in [{name}]: {sorted(extra)}")

    sec = lambda n: parser[n] if parser.has_section(n) else None  # noqa: E731
    d, m, nn, t, b, r = (sec(n) for n in ("data", "model", "neuron", "train", "bench", "run"))

    base_dir = path.parent
    data_path = _get(d, "path", str, None)
    if data_path is not None and not Path(data_path).is_absolute():
        data_path = str((base_dir / data_path).resolve())
    data = DataConfig(
        path=data_path,
        format=_get(d, "format", str, "text"),
        name=_get(d, "name", str, None),
        nodes=_get(d, "nodes", int, 500),
        avg_degree=_get(d, "avg_degree", float, 6.0),
        features=_get(d, "features", int, 16),
        classes=_get(d, "classes", int, 3),
        homophily=_get(d, "homophily", float, 0.8),
        feature_noise=_get(d, "feature_noise", float, 1.0),
        seed=_get(d, "seed", int, 0),
    )
    seed = _get(r, "seed", int, 0)
    neuron = NeuronConfig(
        variant=_get(nn, "variant", str, "PLIF"),
        v_th=_get(nn, "v_th", float, 1.0),
        v_reset=_get(nn, "v_reset", float, 0.0),
        tau=_get(nn, "tau", float, 2.0),
        beta=_get(nn, "beta", float, 0.0),
        surrogate_alpha=_get(nn, "alpha", float, 4.0),
    )
    model = ModelConfig(
        num_layers=_get(m, "layers", int, 2),
        hidden=_get(m, "hidden", int, 64),
        T=_get(m, "T", int, 3),
        D=_get(m, "D", int, 6),
        B_max=_get(m, "B_max", int, 4096),
        neuron=neuron,
        codebook_norm=_get(m, "codebook_norm", str, "l2"),
        input_gain=_get(m, "input_gain", float, None),
        seed=seed,
    )
    train = TrainConfig(
        epochs=_get(t, "epochs", int, 300),
        patience=_get(t, "patience", int, 50),
        adam=AdamConfig(
            lr=_get(t, "lr", float, 1e-3),
            beta1=_get(t, "beta1", float, 0.9),
            beta2=_get(t, "beta2", float, 0.999),
            eps=_get(t, "eps", float, 1e-8),
            weight_decay=_get(t, "weight_decay", float, 5e-4),
        ),
        log_every=_get(t, "log_every", int, 0),
    )
    threads = _get(b, "threads", int, 1)
    sizes = _get(b, "sizes", str, None)
    bench = BenchConfig(
        repeats=_get(b, "repeats", int, 5),
        threads=threads,
        e_mac=_get(b, "e_mac", float, E_MAC),
        e_ac=_get(b, "e_ac", float, E_AC),
        sizes=tuple(int(x) for x in sizes.split(",")) if sizes else BenchConfig.sizes,
        scaling=ScalingConfig(
            num_codewords=_get(b, "codewords", int, 32),
            hidden=_get(b, "hidden", int, 64),
            dense_cap=_get(b, "dense_cap", int, 2**14),
            min_time=_get(b, "min_time", float, 0.5),
            threads=threads,
            seed=seed,
        ),
    )
    out = _get(r, "out", str, "runs/default")
    return ExperimentConfig(data, model, train, bench, seed, out)


# ---------------------------------------------------------------------------
# checkpoints

_CONFIG_KEY = "__config__"


def model_config_to_dict(cfg: ModelConfig) -> dict:
    return dataclasses.asdict(cfg)


def model_config_from_dict(raw: dict) -> ModelConfig:
    raw = dict(raw)
    raw["neuron"] = NeuronConfig(**raw["neuron"])
    return ModelConfig(**raw)


def save_checkpoint(path, model: TrainedModel) -> Path:
    """``.npz`` archive: one entry per named parameter plus a JSON header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": "gtsnt-checkpoint/1",
        "model": model_config_to_dict(model.config),
        "best_epoch": model.best_epoch,
        "best_val_acc": model.best_val_acc,
    }
    arrays = {name: np.asarray(a) for name, a in model.params.named().items()}
    with path.open("wb") as fh:
        np.savez(fh, **arrays, **{_CONFIG_KEY: np.array(json.dumps(header))})
    return path


def load_checkpoint(path) -> TrainedModel:
    with np.load(path, allow_pickle=False) as blob:
        header = json.loads(str(blob[_CONFIG_KEY]))
        arrays = {k: blob[k] for k in blob.files if k != _CONFIG_KEY}
    if header.get("format") != "gtsnt-checkpoint/1":
        raise ValueError(f"{path}: not a gtsnt checkpoint")
    return TrainedModel(
        ModelParams.from_named(arrays),
        model_config_from_dict(header["model"]),
        header["best_epoch"],
        header["best_val_acc"],
    )
