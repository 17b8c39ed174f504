"""Train on one graph over a grid of (T, D) and log accuracy, B and usage.

    python scripts/latent_space_sweep.py --config configs/synthetic.cfg
"""

import argparse
import csv
import dataclasses
from pathlib import Path

from gtsnt.config import load_config
from gtsnt.model import evaluate, model_forward, train
from gtsnt.tokenizer import codebook_usage, latent_space_size


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True)
    ap.add_argument("--T", default="1,2,3,4,6")
    ap.add_argument("--D", default="2,4,6")
    ap.add_argument("--out", default="runs/latent_sweep.csv")
    args = ap.parse_args()

    exp = load_config(args.config)
    g = exp.data.load()
    rows = []
    for T in (int(x) for x in args.T.split(",")):
        for D in (int(x) for x in args.D.split(",")):
            cfg = dataclasses.replace(exp.model, T=T, D=D)
            model, _ = train(g, cfg, exp.train)
            _, cache = model_forward(g, model.params, cfg)
            row = {
                "T": T,
                "D": D,
                "capacity": latent_space_size(cfg.tokenizer()),
                "B": cache.codebook_sizes()[0],
                "usage": codebook_usage(cache.layers[0].codebook),
                "test_acc": evaluate(model, g, "test"),
            }
            print(row)
            rows.append(row)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


if __name__ == "__main__":
    main()
