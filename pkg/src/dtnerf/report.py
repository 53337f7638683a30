"""Figures and tables written next to the CSV outputs: training curves, ablation charts, render triptychs."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

ABLATION_COLUMNS = ["row", "transformer", "fusion", "finetune", "psnr", "mouth_psnr", "lmd", "lpips", "fid",
                    "wall_clock_s", "steps", "dataset_hash", "config_hash"]


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_png(img: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    Image.fromarray(to_uint8(img)).save(path, optimize=False)
    return path


def triptych(gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """GT | prediction | absolute difference, side by side."""
    if gt.shape != pred.shape:
        raise ValueError(f"image shapes differ: {gt.shape} vs {pred.shape}")
    return np.concatenate([gt, pred, np.abs(pred - gt)], axis=1)


def _read_rows(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _num(v) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        return math.nan


def plot_training_curve(metrics_csv: str | Path, out_png: str | Path, title: str = "") -> Path:
    """Loss on a log axis, holdout PSNR on a second axis."""
    rows = _read_rows(metrics_csv)
    train = [r for r in rows if r["split"] in ("train", "fine")]
    hold = [r for r in rows if r["split"] == "holdout"]
    fig, ax = plt.subplots(figsize=(6, 3.5), dpi=100)
    if train:
        ax.semilogy([_num(r["step"]) for r in train], [_num(r["loss"]) for r in train], color="tab:blue",
                    label="loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if hold:
        ax2 = ax.twinx()
        steps = [_num(r["step"]) for r in hold]
        ax2.plot(steps, [_num(r["psnr"]) for r in hold], "o-", color="tab:red", label="holdout PSNR")
        ax2.plot(steps, [_num(r["mouth_psnr"]) for r in hold], "s--", color="tab:orange", label="mouth PSNR")
        ax2.set_ylabel("PSNR (dB)")
        ax2.legend(loc="lower right", fontsize=8)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_png)
    plt.close(fig)
    return Path(out_png)


def write_ablation_table(rows: Sequence[dict], out_dir: str | Path, stem: str = "ablation") -> tuple[Path, Path]:
    """CSV plus a markdown table with one line per configuration."""
    out_dir = Path(out_dir)
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, ABLATION_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    md_path = out_dir / f"{stem}.md"
    lines = ["| Method | PSNR↑ | Mouth PSNR↑ | LPIPS↓ | FID↓ | LMD↓ | Wall clock (s) |",
             "|---|---|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['row']} | {r['psnr']:.3f} | {r['mouth_psnr']:.3f} | {r['lpips']} | {r['fid']} "
                     f"| {r['lmd']:.3f} | {r['wall_clock_s']:.1f} |")
    hashes = sorted({r["dataset_hash"] for r in rows})
    lines += ["", f"Dataset hash: {', '.join(hashes)}"]
    md_path.write_text("\n".join(lines) + "\n")
    return csv_path, md_path


def plot_ablation(rows: Sequence[dict], out_png: str | Path) -> Path:
    names = [r["row"] for r in rows]
    x = np.arange(len(rows))
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5), dpi=100)
    axes[0].bar(x - 0.2, [r["psnr"] for r in rows], 0.4, label="PSNR")
    axes[0].bar(x + 0.2, [r["mouth_psnr"] for r in rows], 0.4, label="mouth PSNR")
    axes[0].set_ylabel("dB")
    axes[0].legend(fontsize=8)
    axes[1].bar(x, [r["lmd"] for r in rows], 0.6, color="tab:green")
    axes[1].set_ylabel("LMD (px)")
    for ax in axes:
        ax.set_xticks(x, names, rotation=30, ha="right", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png)
    plt.close(fig)
    return Path(out_png)


def plot_triptych_grid(items: Sequence[tuple[int, np.ndarray, np.ndarray]], out_png: str | Path) -> Path:
    """One row per frame: GT, prediction and |difference| with shared color scale."""
    n = len(items)
    fig, axes = plt.subplots(n, 3, figsize=(6, 2 * n), dpi=100, squeeze=False)
    for row, (idx, gt, pred) in zip(axes, items):
        for ax, img, label in zip(row, (gt, pred, np.abs(pred - gt)), ("GT", "pred", "|diff|")):
            ax.imshow(np.clip(img, 0, 1), interpolation="nearest")
            ax.set_title(f"{label} #{idx}", fontsize=8)
            ax.axis("off")
    fig.tight_layout()
    fig.savefig(out_png)
    plt.close(fig)
    return Path(out_png)
