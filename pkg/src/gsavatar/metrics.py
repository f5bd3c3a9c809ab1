"""Evaluation metrics (PSNR, SSIM, temporal consistency) and the CSV report."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .losses import SSIM_WIN, ssim_map
from .nn import NUMERIC

PSNR_CAP = 100.0


def metric_psnr(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """10 log10(1 / MSE) over masked pixels, capped at 100 dB."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("metric_psnr: empty mask")
    diff = (np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))[mask]
    mse = float((diff**2).mean())
    if mse < 1e-10:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def metric_ssim(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """Mean masked SSIM over valid windows, averaged across channels."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("metric_ssim: empty mask")
    H, W = pred.shape[:2]
    pad = (SSIM_WIN - 1) // 2
    crop = mask[pad:H - pad, pad:W - pad]
    if not crop.any():
        return 1.0
    vals = [ssim_map(NUMERIC, pred[:, :, c], target[:, :, c])[crop] for c in range(3)]
    return float(np.concatenate(vals).mean())


def metric_tc(frames: list[np.ndarray], masks: list[np.ndarray]) -> float:
    """Temporal roughness: mean (1 - SSIM) between consecutive rendered frames.

    Each pair is compared over the union of the two foreground masks.
    """
    if len(frames) < 2:
        raise ValueError("metric_tc needs at least two frames")
    vals = []
    for k in range(len(frames) - 1):
        union = np.asarray(masks[k], dtype=bool) | np.asarray(masks[k + 1], dtype=bool)
        vals.append(1.0 - metric_ssim(frames[k], frames[k + 1], union))
    return float(np.mean(vals))


def write_metrics_csv(path, rows: list[dict], summary: dict) -> None:
    """Per-frame rows plus one summary line."""
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame_id", "psnr", "ssim", "tc_ssim"])
        for r in rows:
            w.writerow([r["frame_id"], f"{r['psnr']:.6f}", f"{r['ssim']:.6f}",
                        "" if r.get("tc_ssim") is None else f"{r['tc_ssim']:.6f}"])
        w.writerow(["mean", f"{summary['psnr']:.6f}", f"{summary['ssim']:.6f}",
                    f"{summary['tc_ssim']:.6f}" if summary.get("tc_ssim") is not None else ""])
