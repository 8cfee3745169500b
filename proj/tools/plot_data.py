#!/usr/bin/env python3
"""Render the CSVs written by `owseg plot-data` to PNG files.

usage: plot_data.py ROOT [--out DIR]

ROOT is an experiment directory; figures go to ROOT/plots/figures unless --out is given.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def plot_losses(root, entries, out):
    if not entries:
        return None
    fig, ax = plt.subplots(figsize=(7, 4))
    for e in entries:
        rows = read_rows(root / e["file"])
        ax.plot([int(r["epoch"]) for r in rows], [float(r["loss"]) for r in rows], label=e["stage"])
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = out / "loss.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_histogram(root, entry, out):
    rows = read_rows(root / entry["file"])
    left = [float(r["bin_left"]) for r in rows]
    width = [float(r["bin_right"]) - float(r["bin_left"]) for r in rows]
    known = [int(r["count_known"]) for r in rows]
    unknown = [int(r["count_unknown"]) for r in rows]
    # Densities, so the much smaller unknown population stays visible.
    nk, nu = max(sum(known), 1), max(sum(unknown), 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(left, [k / nk for k in known], width=width, align="edge", alpha=0.6, label=f"known (n={sum(known)})")
    ax.bar(left, [u / nu for u in unknown], width=width, align="edge", alpha=0.6, label=f"novel (n={sum(unknown)})")
    ax.set_xlabel("unknown score")
    ax.set_ylabel("fraction of points")
    ax.set_title(entry["report"])
    ax.legend()
    fig.tight_layout()
    path = out / f"hist_{entry['report']}.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("root", type=Path)
    parser.add_argument("--out", type=Path)
    args = parser.parse_args(argv)
    index_path = args.root / "plots" / "index.json"
    if not index_path.exists():
        print(f"{index_path} not found; run `owseg plot-data` first", file=sys.stderr)
        return 2
    index = json.loads(index_path.read_text())
    out = args.out or args.root / "plots" / "figures"
    out.mkdir(parents=True, exist_ok=True)
    written = [plot_losses(args.root, index.get("loss", []), out)]
    written += [plot_histogram(args.root, e, out) for e in index.get("histograms", [])]
    for p in written:
        if p:
            print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
