"""Render a run directory's metrics into delimited output and figures.

Reads `<run_dir>/metrics.jsonl`, writes `metrics.csv` (one row per epoch)
and PNG figures for the loss components, the validation metric, and the
learning-rate trajectory.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def load_metrics(run_dir) -> list[dict]:
    path = Path(run_dir) / "metrics.jsonl"
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def epoch_rows(rows: list[dict]) -> list[dict]:
    return [r for r in rows if r.get("type") == "epoch"]


def write_csv(run_dir) -> Path:
    run_dir = Path(run_dir)
    epochs = epoch_rows(load_metrics(run_dir))
    out = run_dir / "metrics.csv"
    if not epochs:
        out.write_text("")
        return out
    fields = sorted({k for r in epochs for k in r})
    with open(out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for r in epochs:
            w.writerow(r)
    return out


def render_figures(run_dir, out_dir=None) -> list[Path]:
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    epochs = epoch_rows(load_metrics(run_dir))
    if not epochs:
        return []
    xs = [r["epoch"] for r in epochs]
    made: list[Path] = []

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, [r["train_loss"] for r in epochs], marker="o", label="train loss")
    for comp in ("train_ce", "train_lgcsiam", "train_wvc"):
        if comp in epochs[0]:
            ax.plot(xs, [r[comp] for r in epochs], alpha=0.7,
                    label=comp.replace("train_", ""))
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    ax.set_title(f"{epochs[0].get('stage', '')} training loss")
    fig.tight_layout()
    p = out_dir / "loss.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    made.append(p)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, [r["val_metric"] for r in epochs], marker="o", color="tab:green")
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation metric")
    ax.set_title("validation metric")
    fig.tight_layout()
    p = out_dir / "val_metric.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    made.append(p)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.step(xs, [r["lr"] for r in epochs], where="post")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("learning rate")
    ax.set_title("LR trajectory")
    fig.tight_layout()
    p = out_dir / "lr.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    made.append(p)
    return made


def generate(run_dir) -> list[Path]:
    """Delimited output plus figures; returns the created file paths."""
    files = [write_csv(run_dir)]
    files += render_figures(run_dir)
    return files
