#!/usr/bin/env python3
"""Render the CSV outputs of the ugwgan CLI.

    plot_metrics.py metrics runs/x/metrics.csv -o ppl.png
    plot_metrics.py metrics runs/abl/ablate.csv -o ablate.png
    plot_metrics.py scale runs/scale/scale.csv -o scale.png
    plot_metrics.py emb emb.csv -o emb.png
"""

import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def plot_metrics(path, out):
    df = pd.read_csv(path)
    fig, (ax_p, ax_w) = plt.subplots(1, 2, figsize=(11, 4))
    for (lam, lang), g in df.groupby(["lambda", "lang"]):
        ax_p.plot(g["step"], g["ppl_heldout"], marker="o", ms=3, label=f"λ={lam} {lang}")
    for lam, g in df.groupby("lambda"):
        g = g.drop_duplicates("step")
        ax_w.plot(g["step"], g["w_estimate"], marker="o", ms=3, label=f"λ={lam}")
    ax_p.set(xlabel="step", ylabel="held-out perplexity", yscale="log")
    ax_w.set(xlabel="step", ylabel="mean off-diagonal W estimate")
    ax_p.legend(fontsize=7)
    ax_w.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out, dpi=130)


def plot_scale(path, out):
    df = pd.read_csv(path)
    piv = df.pivot_table(index="languages", columns="lambda", values="final_ppl")
    lams = sorted(piv.columns)
    gap = piv[lams[-1]] - piv[lams[0]]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(gap.index, gap.values, marker="o")
    ax.set(xlabel="languages", ylabel=f"ppl(λ={lams[-1]}) − ppl(λ={lams[0]})")
    ax.set_xticks(list(gap.index))
    fig.tight_layout()
    fig.savefig(out, dpi=130)


def plot_emb(path, out):
    df = pd.read_csv(path)
    fig, ax = plt.subplots(figsize=(5, 5))
    for lang, g in df.groupby("lang"):
        ax.scatter(g["dim0"], g["dim1"], s=6, alpha=0.6, label=lang)
    ax.legend()
    ax.set(xlabel="PC 1", ylabel="PC 2")
    fig.tight_layout()
    fig.savefig(out, dpi=130)


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("kind", choices=["metrics", "scale", "emb"])
    p.add_argument("csv")
    p.add_argument("-o", "--out", required=True)
    a = p.parse_args()
    {"metrics": plot_metrics, "scale": plot_scale, "emb": plot_emb}[a.kind](a.csv, a.out)


if __name__ == "__main__":
    main()
