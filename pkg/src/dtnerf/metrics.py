"""PSNR, mouth-region PSNR and landmark distance."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

PSNR_CAP = 99.0


def psnr_with_flag(img_a: np.ndarray, img_b: np.ndarray, mask: Optional[np.ndarray] = None) -> tuple[float, bool]:
    """10 log10(1 / MSE) over the (masked) pixels; returns (dB, capped)."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    diff = (a - b) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise ValueError("empty mask")
        diff = diff[mask]
    mse = float(diff.mean())
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP, True
    return 10.0 * np.log10(1.0 / mse), False


def psnr(img_a: np.ndarray, img_b: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    return psnr_with_flag(img_a, img_b, mask)[0]


def lmd(landmarks_pred: Mapping[str, tuple], landmarks_gt: Mapping[str, tuple]) -> float:
    """Mean Euclidean distance over the ground-truth landmark names."""
    missing = set(landmarks_gt) ^ set(landmarks_pred)
    if missing:
        raise KeyError(f"landmark sets differ in {sorted(missing)}")
    d = [np.hypot(landmarks_pred[k][0] - landmarks_gt[k][0], landmarks_pred[k][1] - landmarks_gt[k][1])
         for k in landmarks_gt]
    return float(np.mean(d))


def locate_landmarks(pred_img: np.ndarray, gt_img: np.ndarray, gt_landmarks: Mapping[str, tuple],
                     window: int = 9, template_radius: int = 2) -> dict[str, tuple[float, float]]:
    """Find each marker in ``pred_img`` by template matching.

    The template is the ground-truth image patch around the true landmark; the
    search covers a ``window`` x ``window`` neighbourhood of integer offsets and
    picks the lowest sum of squared differences, ties going to the smallest
    offset. Returned positions are the ground-truth position plus that offset.
    """
    H, W = gt_img.shape[:2]
    r = template_radius
    half = window // 2
    pad = half + r
    gt_p = np.pad(gt_img, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    pr_p = np.pad(pred_img, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    offs = [(dx, dy) for dy in range(-half, half + 1) for dx in range(-half, half + 1)]
    offs.sort(key=lambda o: (o[0] ** 2 + o[1] ** 2, o[1], o[0]))
    out = {}
    for name, (x, y) in gt_landmarks.items():
        cx = int(np.clip(np.rint(x), 0, W - 1)) + pad
        cy = int(np.clip(np.rint(y), 0, H - 1)) + pad
        tmpl = gt_p[cy - r:cy + r + 1, cx - r:cx + r + 1]
        best, best_off = np.inf, (0, 0)
        for dx, dy in offs:
            patch = pr_p[cy + dy - r:cy + dy + r + 1, cx + dx - r:cx + dx + r + 1]
            ssd = float(((patch - tmpl) ** 2).sum())
            if ssd < best - 1e-12:
                best, best_off = ssd, (dx, dy)
        out[name] = (x + best_off[0], y + best_off[1])
    return out


@dataclass
class FrameMetrics:
    frame: int
    psnr: float
    mouth_psnr: float
    lmd: float
    psnr_capped: bool = False
    mouth_psnr_capped: bool = False


@dataclass
class EvalReport:
    frames: list[FrameMetrics] = field(default_factory=list)
    config_hash: str = ""

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([f.psnr for f in self.frames]))

    @property
    def mean_mouth_psnr(self) -> float:
        return float(np.mean([f.mouth_psnr for f in self.frames]))

    @property
    def mean_lmd(self) -> float:
        return float(np.mean([f.lmd for f in self.frames]))

    def summary(self) -> dict:
        return {
            "frames": self.frame_count,
            "psnr": self.mean_psnr,
            "mouth_psnr": self.mean_mouth_psnr,
            "lmd": self.mean_lmd,
            "lpips": "n/a",
            "fid": "n/a",
            "psnr_capped_frames": sum(f.psnr_capped for f in self.frames),
            "config_hash": self.config_hash,
        }

    def write(self, out_dir: str | Path, stem: str = "eval") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{stem}.csv"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "psnr", "mouth_psnr", "lmd"])
            for f in self.frames:
                w.writerow([f.frame, repr(f.psnr), repr(f.mouth_psnr), repr(f.lmd)])
        json_path = out_dir / f"{stem}.json"
        with open(json_path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)
            fh.write("\n")
        return csv_path, json_path


def frame_metrics(index: int, pred: np.ndarray, gt: np.ndarray, mouth_mask: np.ndarray,
                  gt_landmarks: Mapping[str, tuple], window: int = 9) -> FrameMetrics:
    p, pc = psnr_with_flag(pred, gt)
    mp, mpc = psnr_with_flag(pred, gt, mouth_mask)
    located = locate_landmarks(pred, gt, gt_landmarks, window)
    return FrameMetrics(index, p, mp, lmd(located, gt_landmarks), pc, mpc)


def read_eval_csv(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
