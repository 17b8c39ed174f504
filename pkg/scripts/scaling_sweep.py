"""Attention time vs. node count, codebook attention against the dense form.

Writes scaling.csv / scaling.json and, if matplotlib is present, scaling.png.
"""

import argparse
import logging
from pathlib import Path

from gtsnt.bench import ScalingConfig, run_scaling_suite


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--min-exp", type=int, default=13)
    ap.add_argument("--max-exp", type=int, default=17)
    ap.add_argument("--codewords", type=int, default=32)
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--dense-cap", type=int, default=2**14)
    ap.add_argument("--out", default="runs/scaling")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    sizes = [2**k for k in range(args.min_exp, args.max_exp + 1)]
    cfg = ScalingConfig(num_codewords=args.codewords, hidden=args.hidden, dense_cap=args.dense_cap)
    summary = run_scaling_suite(sizes, cfg, args.out)
    dense = summary["dense_slope"]
    print(f"cgsa slope {summary['cgsa_slope']:.3f}  dense slope {'-' if dense is None else f'{dense:.3f}'}")

    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return
    rows = summary["rows"]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog([r["n"] for r in rows], [r["cgsa_s"] for r in rows], "o-", label="codebook attention")
    dense = [r for r in rows if r["dense_s"] is not None]
    ax.loglog([r["n"] for r in dense], [r["dense_s"] for r in dense], "s--", label="dense attention")
    ax.set_xlabel("nodes")
    ax.set_ylabel("seconds")
    ax.legend()
    fig.tight_layout()
    fig.savefig(Path(args.out) / "scaling.png", dpi=120)


if __name__ == "__main__":
    main()
