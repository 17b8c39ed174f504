"""Convert Planetoid pickles (ind.<name>.*) into the text graph layout.

    python scripts/convert_planetoid.py data/planetoid cora data/cora --format binary
"""

import argparse

from gtsnt.graph import load_planetoid, write_graph


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("src", help="directory with ind.<name>.* files")
    ap.add_argument("name", choices=["cora", "citeseer", "pubmed"])
    ap.add_argument("dst")
    ap.add_argument("--format", choices=["text", "binary"], default="text")
    args = ap.parse_args()
    g = load_planetoid(args.src, args.name)
    write_graph(g, args.dst, args.format)
    print(f"{args.name}: N={g.num_nodes} |E|={g.num_edges} d={g.num_features} classes={g.num_classes} "
          f"train/val/test={[len(g.splits[k]) for k in ('train', 'val', 'test')]}")


if __name__ == "__main__":
    main()
