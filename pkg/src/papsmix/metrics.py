"""Reconstruction-quality metrics for estimated abundance fields."""

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from ._atomic import atomic_write_text
from .stainlib import DYES

REPORT_COLUMNS = (
    "image", "method", "sre_db", "rmse",
    *[f"sre_{d}" for d in DYES],
    *[f"rmse_{d}" for d in DYES],
)


@dataclass(frozen=True)
class EvalResult:
    sre_db: float
    rmse: float
    per_dye_sre_db: tuple
    per_dye_rmse: tuple


def _as_planes(x) -> np.ndarray:
    arr = x.planes if hasattr(x, "planes") else np.asarray(x, dtype=np.float64)
    return np.asarray(arr, dtype=np.float64)


def sre(gt, est) -> float:
    """Signal-to-reconstruction error in dB; +inf when est matches exactly."""
    gt = _as_planes(gt)
    est = _as_planes(est)
    if gt.shape != est.shape:
        raise ValueError(f"shape mismatch: {gt.shape} vs {est.shape}")
    signal = float(np.sum(gt * gt))
    if signal == 0.0:
        raise ValueError("ground truth is all zero: signal energy undefined")
    err = float(np.sum((gt - est) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(signal / err)


def rmse(gt, est) -> float:
    """Root mean square error over all samples of all planes."""
    gt = _as_planes(gt)
    est = _as_planes(est)
    if gt.shape != est.shape:
        raise ValueError(f"shape mismatch: {gt.shape} vs {est.shape}")
    return float(np.sqrt(np.sum((gt - est) ** 2) / gt.size))


def evaluate(gt, est) -> EvalResult:
    """Overall and per-dye SRE/RMSE; per-dye SRE is NaN for empty gt planes."""
    gt = _as_planes(gt)
    est = _as_planes(est)
    if gt.shape != est.shape:
        raise ValueError(f"shape mismatch: {gt.shape} vs {est.shape}")
    per_sre = []
    per_rmse = []
    for i in range(gt.shape[0]):
        per_rmse.append(rmse(gt[i][None], est[i][None]))
        if float(np.sum(gt[i] ** 2)) == 0.0:
            per_sre.append(math.nan)
        else:
            per_sre.append(sre(gt[i][None], est[i][None]))
    return EvalResult(
        sre_db=sre(gt, est),
        rmse=rmse(gt, est),
        per_dye_sre_db=tuple(per_sre),
        per_dye_rmse=tuple(per_rmse),
    )


def write_report_csv(rows, path) -> None:
    """Write evaluation rows as (image, method, EvalResult) triples."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for image, method, result in rows:
        writer.writerow([
            image,
            method,
            repr(float(result.sre_db)),
            repr(float(result.rmse)),
            *[repr(float(v)) for v in result.per_dye_sre_db],
            *[repr(float(v)) for v in result.per_dye_rmse],
        ])
    atomic_write_text(path, buf.getvalue())
