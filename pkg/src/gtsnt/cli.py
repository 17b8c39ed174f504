"""``gtsnt`` command line: train, eval, tokenize, bench, scale, gradcheck.

Exit codes: 0 ok, 1 runtime error, 2 usage error, 3 gradient check failed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .bench import efficiency_report, run_scaling_suite
from .config import ExperimentConfig, load_checkpoint, load_config, save_checkpoint
from .gradcheck import check_gradients
from .graph import GraphFormatError, synthesize_graph
from .model import ModelConfig, TrainingDiverged, evaluate, init_params, model_forward, train
from .tokenizer import codebook_usage, latent_space_size

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_GATE = 0, 1, 2, 3
GRADCHECK_TOL = 1e-3

log = logging.getLogger("gtsnt")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gtsnt", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config file")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.add_parser("train", parents=[common], help="train and write checkpoint + metrics")
    ev = sub.add_parser("eval", parents=[common], help="accuracy of a checkpoint on each split")
    ev.add_argument("--checkpoint", type=Path, required=True)
    tok = sub.add_parser("tokenize", parents=[common], help="codebook statistics as JSON")
    tok.add_argument("--checkpoint", type=Path)
    bench = sub.add_parser("bench", parents=[common], help="latency, energy and memory report")
    bench.add_argument("--checkpoint", type=Path)
    sc = sub.add_parser("scale", parents=[common], help="attention scaling sweep")
    sc.add_argument("--sizes", type=str, help="comma-separated node counts")
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    gc.add_argument("--instances", type=int, default=5)
    gc.add_argument("--nodes", type=int, default=12)
    return parser


def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out=str(args.out))
    return cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, default=_jsonable))


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _model_for(args, cfg: ExperimentConfig, g):
    if getattr(args, "checkpoint", None):
        model = load_checkpoint(args.checkpoint)
        return model.params, model.config
    return init_params(g.num_nodes, g.num_features, g.num_classes, cfg.model), cfg.model


def cmd_train(args) -> int:
    cfg = _experiment(args)
    g = cfg.data.load()
    model, history = train(g, cfg.model, cfg.train)
    out = _out_dir(cfg)
    save_checkpoint(out / "model.npz", model)
    n_layers = cfg.model.num_layers
    with (out / "metrics.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_acc", "test_acc"] + [f"B_layer{i}" for i in range(n_layers)])
        for row in history:
            writer.writerow([row["epoch"], row["train_loss"], row["val_acc"], row["test_acc"], *row["codebook_sizes"]])
    summary = {
        "best_epoch": model.best_epoch,
        "val_acc": model.best_val_acc,
        "test_acc": evaluate(model, g, "test") if g.splits.get("test") is not None and g.splits["test"].size else None,
        "epochs_run": len(history),
    }
    _write_json(out / "train.json", summary)
    print(f"trained {len(history)} epochs; best epoch {summary['best_epoch']} "
          f"val {summary['val_acc']:.4f} test {summary['test_acc']}")
    print(f"checkpoint: {out / 'model.npz'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _experiment(args)
    g = cfg.data.load()
    model = load_checkpoint(args.checkpoint)
    result = {split: evaluate(model, g, split) for split in ("train", "val", "test") if g.splits.get(split) is not None and g.splits[split].size}
    _write_json(_out_dir(cfg) / "eval.json", result)
    for split, acc in result.items():
        print(f"{split:5s} accuracy {acc:.4f}")
    return EXIT_OK


def tokenize_report(params, model_cfg: ModelConfig, g) -> dict:
    _, cache = model_forward(g, params, model_cfg)
    capacity = latent_space_size(model_cfg.tokenizer())
    layers = []
    for i, lc in enumerate(cache.layers):
        pops = lc.codebook.populations
        hist_edges = [1, 2, 5, 10, 20, 50, 100, 1000, np.inf]
        hist, _ = np.histogram(pops, bins=hist_edges)
        layers.append({
            "layer": i,
            "B": int(lc.codebook.size),
            "B_before_truncation": int(lc.full_codebook_size),
            "usage": codebook_usage(lc.codebook),
            "usage_vs_latent_space": codebook_usage(lc.codebook, capacity),
            "population_histogram": {
                f"[{lo},{hi})": int(c) for lo, hi, c in zip(hist_edges, hist_edges[1:], hist)
            },
            "max_population": int(pops.max()),
            "unassigned_nodes": int(np.count_nonzero(lc.codebook.assignment < 0)),
        })
    return {"num_nodes": g.num_nodes, "T": model_cfg.T, "D": model_cfg.D, "capacity": capacity, "layers": layers}


def cmd_tokenize(args) -> int:
    cfg = _experiment(args)
    g = cfg.data.load()
    params, model_cfg = _model_for(args, cfg, g)
    report = tokenize_report(params, model_cfg, g)
    _write_json(_out_dir(cfg) / "tokenize.json", report)
    print(f"capacity (T+1)^D = {report['capacity']}")
    for layer in report["layers"]:
        print(f"layer {layer['layer']}: B={layer['B']} usage={layer['usage']:.3f} "
              f"(of latent space {layer['usage_vs_latent_space']:.4f})")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _experiment(args)
    g = cfg.data.load()
    params, model_cfg = _model_for(args, cfg, g)
    with threadpool_limits(limits=cfg.bench.threads):
        report = efficiency_report(params, g, model_cfg, cfg.bench.repeats, cfg.bench.e_mac, cfg.bench.e_ac)
    payload = report.to_json()
    payload["peak_bytes_kind"] = "tracemalloc high-water mark of one CPU forward pass"
    _write_json(_out_dir(cfg) / "bench.json", payload)
    print(f"latency {report.latency_s:.4f} s  energy {report.energy_j:.3e} J  "
          f"MAC {report.mac_ops}  AC {report.ac_ops}  peak {report.peak_bytes / 2**20:.1f} MiB")
    return EXIT_OK


def cmd_scale(args) -> int:
    cfg = _experiment(args)
    sizes = [int(s) for s in args.sizes.split(",")] if args.sizes else list(cfg.bench.sizes)
    summary = run_scaling_suite(sizes, cfg.bench.scaling, _out_dir(cfg))
    for row in summary["rows"]:
        dense = f"{row['dense_s']:.4f}" if row["dense_s"] is not None else "-"
        print(f"N={row['n']:>8d}  cgsa {row['cgsa_s']:.5f} s  dense {dense}")
    for w in summary["warnings"]:
        print(f"warning: {w}")
    if summary["cgsa_slope"] is not None:
        print(f"log-log slope: cgsa {summary['cgsa_slope']:.3f}", end="")
        if summary["dense_slope"] is not None:
            print(f"  dense {summary['dense_slope']:.3f}", end="")
        print()
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _experiment(args)
    model_cfg = cfg.model
    small = dataclasses.replace(model_cfg, hidden=min(model_cfg.hidden, 8), D=min(model_cfg.D, 3),
                                B_max=min(model_cfg.B_max, 8))
    worst = 0.0
    rows = []
    for k in range(args.instances):
        seed = cfg.seed + k
        g = synthesize_graph(args.nodes, 3.0, 5, 3, seed)
        inst_cfg = dataclasses.replace(small, seed=seed)
        params = init_params(g.num_nodes, g.num_features, g.num_classes, inst_cfg)
        result = check_gradients(g, params, inst_cfg, GRADCHECK_TOL)
        worst = max(worst, result.max_error)
        rows.append({"seed": seed, "max_rel_error": result.max_error, "errors": result.errors})
        print(f"instance seed={seed}: max relative error {result.max_error:.3e}")
    passed = worst <= GRADCHECK_TOL
    _write_json(_out_dir(cfg) / "gradcheck.json", {"tolerance": GRADCHECK_TOL, "max_rel_error": worst, "passed": passed, "instances": rows})
    print(f"max relative error {worst:.3e} -> {'PASS' if passed else 'FAIL'} (tol {GRADCHECK_TOL:g})")
    return EXIT_OK if passed else EXIT_GATE


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "tokenize": cmd_tokenize,
    "bench": cmd_bench,
    "scale": cmd_scale,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except GraphFormatError as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
    except FileNotFoundError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
    except TrainingDiverged as exc:
        print(f"error[training]: {exc}", file=sys.stderr)
    except ValueError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
    return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
