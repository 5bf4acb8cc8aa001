"""Scale calibration between multispectral and RGB abundance estimates, and
robust-maximum reference values for display normalization."""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._atomic import atomic_write_text
from .solver import AbundanceField

# Reference scale factors measured on the real single-stain material; shipped
# as fixtures so reports and heatmaps have a stable default scale.
DEFAULT_P = (7.51, 13.13, 12.36, 5.79)
DEFAULT_Q = (3.20, 6.87, 5.78, 2.97)


@dataclass(frozen=True)
class CalibrationSet:
    """Per-dye MS/RGB ratios ``p`` and robust-max reference values ``q``."""

    p: tuple = DEFAULT_P
    q: tuple = DEFAULT_Q

    def __post_init__(self):
        p = tuple(float(v) for v in self.p)
        q = tuple(float(v) for v in self.q)
        if len(p) != 4 or len(q) != 4:
            raise ValueError("calibration needs four p and four q values")
        if min(p) <= 0 or min(q) <= 0:
            raise ValueError("calibration values must be positive")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    def to_json(self) -> str:
        return json.dumps({"p": list(self.p), "q": list(self.q)}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationSet":
        data = json.loads(text)
        return cls(p=data["p"], q=data["q"])


def calibration_coefficient(s_rgb, s_ms) -> float:
    """Least-squares scale p minimizing sum (p*s_rgb - s_ms)^2."""
    s_rgb = np.asarray(s_rgb, dtype=np.float64).ravel()
    s_ms = np.asarray(s_ms, dtype=np.float64).ravel()
    if s_rgb.size != s_ms.size:
        raise ValueError("abundance vectors must have equal length")
    denom = float(np.dot(s_rgb, s_rgb))
    if denom == 0.0:
        raise ValueError("RGB abundance vector is all zero")
    return float(np.dot(s_rgb, s_ms)) / denom


def single_stain_abundance(od_planes: np.ndarray, stain_vector) -> np.ndarray:
    """Per-pixel 1-dye least squares: s = (e . y) / (e . e) for each pixel."""
    e = np.asarray(stain_vector, dtype=np.float64)
    planes = np.asarray(od_planes, dtype=np.float64)
    if planes.shape[0] != e.size:
        raise ValueError("stain vector length must match the channel count")
    denom = float(np.dot(e, e))
    if denom == 0.0:
        raise ValueError("stain vector is all zero")
    return np.tensordot(e, planes, axes=([0], [0])) / denom


def robust_max(plane: np.ndarray, percentile: float = 1.0) -> float:
    """Top-``percentile`` abundance value, linearly interpolated."""
    plane = np.asarray(plane, dtype=np.float64)
    if plane.size == 0:
        raise ValueError("plane is empty")
    if not 0.0 < percentile < 100.0:
        raise ValueError("percentile must lie strictly between 0 and 100")
    return float(np.percentile(plane.ravel(), 100.0 - percentile))


def normalize_abundance(field: AbundanceField, q) -> AbundanceField:
    """Divide plane i by q_i; values above 1 are kept (clipping happens only
    when rendering heatmaps)."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ValueError("q must hold four reference values")
    if q.min() <= 0:
        raise ValueError("reference values must be positive")
    return AbundanceField(field.planes / q[:, None, None])


def apply_calibration(field: AbundanceField, p) -> AbundanceField:
    """Scale plane i by the MS/RGB ratio p_i."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (4,):
        raise ValueError("p must hold four coefficients")
    return AbundanceField(field.planes * p[:, None, None])


def save_calibration(cal: CalibrationSet, path) -> None:
    atomic_write_text(path, cal.to_json() + "\n")


def load_calibration(path) -> CalibrationSet:
    return CalibrationSet.from_json(Path(path).read_text())
