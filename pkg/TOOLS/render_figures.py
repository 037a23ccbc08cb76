#!/usr/bin/env python3
"""
Render density.csv / groups.csv from an evaluation directory as PNGs.

matplotlib is imported lazily; it is not part of requirements.txt.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT))

from BACKEND.storage import read_table  # noqa: E402


def _pyplot():
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise RuntimeError("render_figures needs matplotlib: python -m pip install matplotlib") from exc
    return plt


def render_density(eval_dir: Path, plt) -> Path:
    grid = read_table(eval_dir / "density.csv")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(grid["x"], grid["dhat"], label="with surrogate")
    if "dhat0" in grid:
        ax.plot(grid["x"], grid["dhat0"], linestyle="--", label="surrogate-free")
    ax.set_xlabel("mean absolute prediction error")
    ax.set_ylabel("density")
    ax.legend()
    out = eval_dir / "density.png"
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def render_predictions(eval_dir: Path, truth_path: Path, plt) -> Path:
    groups = read_table(eval_dir / "groups.csv")
    truth = read_table(truth_path)
    merged = groups.merge(truth[["j", "mu"]], on="j")
    fig, ax = plt.subplots(figsize=(5, 5))
    for cluster, part in merged.groupby("cluster"):
        ax.errorbar(part["mu"], part["median_mu"],
                    yerr=[part["median_mu"] - part["lower"], part["upper"] - part["median_mu"]],
                    fmt="o", markersize=3, label=f"cluster {cluster}")
    lims = [merged[["mu", "lower"]].min().min(), merged[["mu", "upper"]].max().max()]
    ax.plot(lims, lims, color="grey", linewidth=0.8)
    ax.set_xlabel("true effect on outcome")
    ax.set_ylabel("predicted effect")
    ax.legend()
    out = eval_dir / "predictions.png"
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def parse_args(argv: list[str]) -> argparse.Namespace:
    p = argparse.ArgumentParser(description="Render figures from an evaluation directory.")
    p.add_argument("eval_dir", type=Path, help="Directory holding density.csv and groups.csv.")
    p.add_argument("--truth", type=Path, help="truth.csv (default: ../truth.csv).")
    return p.parse_args(argv)


def main(argv: list[str]) -> int:
    args = parse_args(argv)
    plt = _pyplot()
    print(render_density(args.eval_dir, plt))
    truth = args.truth or args.eval_dir.parent / "truth.csv"
    if truth.exists():
        print(render_predictions(args.eval_dir, truth, plt))
    return 0


if __name__ == "__main__":
    raise SystemExit(main(sys.argv[1:]))
