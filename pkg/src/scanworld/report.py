"""Report rendering: JSON/CSV tables plus matplotlib figures on disk."""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIG_DPI = 130


def _style(ax, xlabel, ylabel, title=None):
    ax.grid(alpha=0.3, linewidth=0.5)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title, fontsize=10)


def save_json(path: str, obj) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
    return path


def write_csv(path: str, header, rows) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    return path


def plot_loss_curve(metrics_jsonl: str, out_png: str) -> str:
    steps, losses = [], []
    with open(metrics_jsonl) as f:
        for line in f:
            rec = json.loads(line)
            steps.append(rec["step"])
            losses.append(rec["loss"])
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    ax.plot(steps, losses, lw=0.9)
    ax.set_yscale("log")
    _style(ax, "step", "training loss")
    fig.tight_layout()
    fig.savefig(out_png, dpi=FIG_DPI)
    plt.close(fig)
    return out_png


def plot_psnr_vs_distance(curves: dict[str, list], out_png: str,
                          window_k: int | None = None) -> str:
    """curves: label -> [[distance, psnr], ...]"""
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    for label, curve in curves.items():
        arr = np.asarray(curve, np.float64)
        ax.plot(arr[:, 0], arr[:, 1], marker="o", ms=3, lw=1.1, label=label)
    if window_k is not None:
        ax.axvline(window_k, color="gray", ls="--", lw=0.8)
        ax.annotate(f"attention window k={window_k}", (window_k, ax.get_ylim()[0]),
                    fontsize=7, rotation=90, va="bottom", ha="right", color="gray")
    _style(ax, "retrieval distance (frames)", "PSNR (dB)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=FIG_DPI)
    plt.close(fig)
    return out_png


def plot_bench(report: dict, out_png: str) -> str:
    """Latency-per-frame and state-size panels, ours vs baseline."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    ours = report["ours_per_frame_latency"]
    axes[0].plot(np.arange(1, len(ours) + 1), np.asarray(ours) * 1e3,
                 lw=0.8, label="ours")
    if "baseline_per_frame_latency" in report:
        base = report["baseline_per_frame_latency"]
        axes[0].plot(np.arange(1, len(base) + 1), np.asarray(base) * 1e3,
                     lw=0.8, label="causal baseline")
    _style(axes[0], "frame index", "latency (ms)", "per-frame generation latency")
    axes[0].legend(fontsize=8)

    cps = report["checkpoints"]
    ours_bytes = [report["ours"]["state_bytes"][f] for f in cps]
    axes[1].plot(cps, np.asarray(ours_bytes) / 1024, marker="o", label="ours")
    if "baseline" in report:
        base_bytes = [report["baseline"]["state_bytes"][f] for f in cps]
        axes[1].plot(cps, np.asarray(base_bytes) / 1024, marker="s",
                     label="causal baseline")
    _style(axes[1], "frame index", "state size (KiB)", "inference state footprint")
    axes[1].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=FIG_DPI)
    plt.close(fig)
    return out_png


def save_frame_strip(rows: dict[str, np.ndarray], out_png: str,
                     max_cols: int = 16) -> str:
    """rows: label -> [N, H, W, 3] frames in [0, 1]; one row per label."""
    labels = list(rows)
    n = min(max_cols, min(len(v) for v in rows.values()))
    fig, axes = plt.subplots(len(labels), n, figsize=(n * 0.7, len(labels) * 0.8))
    axes = np.atleast_2d(axes)
    for r, label in enumerate(labels):
        frames = rows[label]
        idx = np.linspace(0, len(frames) - 1, n).astype(int)
        for c in range(n):
            ax = axes[r, c]
            ax.imshow(np.clip(frames[idx[c]], 0, 1), interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if c == 0:
                ax.set_ylabel(label, fontsize=7)
            if r == 0:
                ax.set_title(f"{idx[c]}", fontsize=6)
    fig.tight_layout(pad=0.2)
    fig.savefig(out_png, dpi=FIG_DPI)
    plt.close(fig)
    return out_png


def plot_scaling(t_values, ours_times, reference_times, out_png: str) -> str:
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ax.plot(t_values, ours_times, marker="o", label="hybrid model train step")
    ax.plot(t_values, reference_times, marker="s", label="full-attention layer")
    base_t, base_y = t_values[0], ours_times[0]
    lin = [base_y * t / base_t for t in t_values]
    ax.plot(t_values, lin, ls="--", lw=0.8, color="gray", label="linear reference")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    _style(ax, "context length T (frames)", "seconds per step")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=FIG_DPI)
    plt.close(fig)
    return out_png
