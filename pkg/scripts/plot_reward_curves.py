"""Held-out dynamic reward of RSFT vs SFT per seed, from ``run_all.py`` output."""
from __future__ import annotations

import argparse
import json
from pathlib import Path

import matplotlib

matplotlib.use("svg")
import matplotlib.pyplot as plt  # noqa: E402

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("results", nargs="?", default="results/all.json")
    p.add_argument("--out", default="results/reward_curves.svg")
    args = p.parse_args()
    rows = json.loads(Path(args.results).read_text())["rsft_vs_sft"]
    plt.rcParams["svg.hashsalt"] = "visplan"
    fig, axes = plt.subplots(1, len(rows), figsize=(4 * len(rows), 3), sharey=True)
    for ax, r in zip(axes if len(rows) > 1 else [axes], rows):
        for key, label in (("rsft_curve", "RSFT"), ("sft_curve", "SFT")):
            steps, vals = zip(*r[key])
            ax.plot(steps, vals, marker="o", markersize=3, label=label)
        ax.set_title(f"seed {r['seed']}")
        ax.set_xlabel("step after SFT warmup")
    axes[0].set_ylabel("held-out dynamic reward") if len(rows) > 1 else None
    fig.legend(*fig.axes[0].get_legend_handles_labels(), loc="lower right")
    fig.tight_layout()
    fig.savefig(args.out, metadata={"Date": None})
    print(args.out)
