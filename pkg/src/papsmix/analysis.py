"""Patch-level statistics and the linear classifier separating normal
endocervical (EC) from LEGH cytoplasm by relative dye abundance."""

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._atomic import atomic_write_text
from .imagery import ROLE_ABUNDANCE, ROLE_INTENSITY, ROLE_OPTICAL_DENSITY, SpectralCube, srgb_to_lab
from .solver import AbundanceField
from .stainlib import DYES

LABELS = ("EC", "LEGH")
POSITIVE_LABEL = "LEGH"
PATCH_SIZE = 5

FEATURE_SETS = ("rgb", "od", "lab", "relative")


@dataclass(frozen=True)
class PatchSample:
    label: str | None
    mean_abundance: tuple
    relative_abundance: tuple

    def __post_init__(self):
        if self.label is not None and self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}")


@dataclass(frozen=True)
class LdaModel:
    weights: tuple
    bias: float
    feature_names: tuple

    def __post_init__(self):
        if len(self.weights) != len(self.feature_names):
            raise ValueError("one weight per feature is required")

    def to_json(self) -> str:
        return json.dumps(
            {
                "features": list(self.feature_names),
                "weights": [float(w) for w in self.weights],
                "bias": float(self.bias),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "LdaModel":
        data = json.loads(text)
        return cls(
            weights=tuple(data["weights"]),
            bias=float(data["bias"]),
            feature_names=tuple(data["features"]),
        )


def _patch_window(planes: np.ndarray, center, size: int) -> np.ndarray:
    cx, cy = int(center[0]), int(center[1])
    half = size // 2
    x0, y0 = cx - half, cy - half
    x1, y1 = x0 + size, y0 + size
    if x0 < 0 or y0 < 0 or x1 > planes.shape[2] or y1 > planes.shape[1]:
        raise ValueError(
            f"patch centered at ({cx}, {cy}) size {size} exceeds image bounds"
        )
    return planes[:, y0:y1, x0:x1]


def extract_patch_features(field: AbundanceField, center, size: int = PATCH_SIZE,
                           label: str | None = None) -> PatchSample:
    """Mean and relative dye abundance over a size x size patch at center."""
    window = _patch_window(field.planes, center, size)
    mean = window.reshape(len(DYES), -1).mean(axis=1)
    total = float(mean.sum())
    if total == 0.0:
        raise ValueError("patch has zero total abundance; relative share undefined")
    return PatchSample(
        label=label,
        mean_abundance=tuple(float(v) for v in mean),
        relative_abundance=tuple(float(v) for v in mean / total),
    )


def patch_feature_vector(cube: SpectralCube, center, feature_set: str,
                         dyes=None, size: int = PATCH_SIZE) -> tuple:
    """Feature vector of one patch under one of the shipped feature sets.

    ``rgb``/``lab`` expect a 3-channel intensity cube, ``od`` a density cube,
    and ``relative`` an abundance cube (``dyes`` picks the reported subset).
    """
    if feature_set == "rgb":
        if cube.role != ROLE_INTENSITY or cube.channels != 3:
            raise ValueError("rgb features need a 3-channel intensity cube")
        window = _patch_window(cube.planes, center, size)
        return tuple(float(v) for v in window.reshape(3, -1).mean(axis=1))
    if feature_set == "od":
        if cube.role != ROLE_OPTICAL_DENSITY or cube.channels != 3:
            raise ValueError("od features need a 3-channel density cube")
        window = _patch_window(cube.planes, center, size)
        return tuple(float(v) for v in window.reshape(3, -1).mean(axis=1))
    if feature_set == "lab":
        if cube.role != ROLE_INTENSITY or cube.channels != 3:
            raise ValueError("lab features need a 3-channel intensity cube")
        window = _patch_window(cube.planes, center, size)
        lab = srgb_to_lab(window)
        return tuple(float(v) for v in lab.reshape(3, -1).mean(axis=1))
    if feature_set == "relative":
        if cube.role != ROLE_ABUNDANCE:
            raise ValueError("relative features need an abundance cube")
        sample = extract_patch_features(AbundanceField.from_cube(cube), center, size)
        chosen = dyes or DYES
        return tuple(sample.relative_abundance[DYES.index(d)] for d in chosen)
    raise ValueError(f"unknown feature set {feature_set!r}; expected {FEATURE_SETS}")


def feature_names(feature_set: str, dyes=None) -> tuple:
    if feature_set in ("rgb", "od"):
        return tuple(f"{feature_set}_{c}" for c in ("R", "G", "B"))
    if feature_set == "lab":
        return ("lab_L", "lab_a", "lab_b")
    if feature_set == "relative":
        return tuple(f"{d}_rel" for d in (dyes or DYES))
    raise ValueError(f"unknown feature set {feature_set!r}")


# ---------------------------------------------------------------------------
# Two-class Fisher discriminant.
# ---------------------------------------------------------------------------


def lda_train(features, labels, feature_names=(), ridge: bool = True) -> LdaModel:
    """Fit w = S_pooled^-1 (mu_LEGH - mu_EC) with a midpoint bias.

    Priors are taken equal; scores >= 0 classify as LEGH.  A small ridge
    proportional to trace(S)/k rescues a near-singular pooled covariance.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray([str(v) for v in labels])
    if x.ndim != 2 or x.shape[0] != y.size:
        raise ValueError("features must be (n_samples, n_features) matching labels")
    groups = {}
    for lab in LABELS:
        grp = x[y == lab]
        if grp.shape[0] < 2:
            raise ValueError(f"need at least two {lab} samples")
        groups[lab] = grp
    n_ec, n_legh = groups["EC"].shape[0], groups["LEGH"].shape[0]
    mu_ec = groups["EC"].mean(axis=0)
    mu_legh = groups["LEGH"].mean(axis=0)
    scatter = sum(
        (grp - grp.mean(axis=0)).T @ (grp - grp.mean(axis=0)) for grp in groups.values()
    )
    pooled = scatter / (n_ec + n_legh - 2)
    k = x.shape[1]
    if ridge:
        cond = np.linalg.cond(pooled)
        if not np.isfinite(cond) or cond > 1e12:
            eps = 1e-8 * np.trace(pooled) / k
            if eps <= 0:
                raise ValueError("pooled covariance is singular and has zero trace")
            pooled = pooled + eps * np.eye(k)
    try:
        w = np.linalg.solve(pooled, mu_legh - mu_ec)
    except np.linalg.LinAlgError as exc:
        raise ValueError("pooled covariance is singular") from exc
    bias = -float(w @ (mu_ec + mu_legh)) / 2.0
    names = tuple(feature_names) if feature_names else tuple(f"f{i}" for i in range(k))
    return LdaModel(weights=tuple(float(v) for v in w), bias=bias, feature_names=names)


def lda_predict(model: LdaModel, features) -> tuple:
    """Score w.x + bias; nonnegative scores (ties included) map to LEGH."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape != (len(model.weights),):
        raise ValueError(
            f"feature length {x.shape} does not match model ({len(model.weights)},)"
        )
    score = float(np.dot(model.weights, x) + model.bias)
    return (POSITIVE_LABEL if score >= 0 else "EC"), score


# ---------------------------------------------------------------------------
# Mann-Whitney U.
# ---------------------------------------------------------------------------


def _rank_with_ties(values: np.ndarray) -> tuple:
    """Midrank assignment; returns ranks and tie group sizes."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    ties = []
    i = 0
    sorted_vals = values[order]
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        ties.append(j - i + 1)
        i = j + 1
    return ranks, ties


def _exact_u_distribution(n_a: int, n_b: int) -> np.ndarray:
    """Counts of rank-sum values over all C(n_a+n_b, n_a) arrangements."""
    total = n_a + n_b
    max_sum = sum(range(total - n_a + 1, total + 1))
    counts = np.zeros((n_a + 1, max_sum + 1), dtype=np.float64)
    counts[0, 0] = 1.0
    for rank in range(1, total + 1):
        for chosen in range(min(rank, n_a), 0, -1):
            counts[chosen, rank:] += counts[chosen - 1, : max_sum - rank + 1]
    return counts[n_a]


def mann_whitney_u(a, b, method: str = "auto") -> tuple:
    """Two-sided Mann-Whitney U test; returns (U of the first sample, p).

    Exact enumeration runs when ``n_a * n_b <= 400`` and no ties straddle the
    samples; otherwise the tie-corrected normal approximation with continuity
    correction is used.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    n_a, n_b = a.size, b.size
    pooled = np.concatenate([a, b])
    ranks, ties = _rank_with_ties(pooled)
    has_ties = any(t > 1 for t in ties)
    u_a = float(ranks[:n_a].sum()) - n_a * (n_a + 1) / 2.0

    if method == "auto":
        method = "exact" if (n_a * n_b <= 400 and not has_ties) else "normal"
    if method == "exact":
        if has_ties:
            raise ValueError("exact enumeration requires tie-free samples")
        dist = _exact_u_distribution(n_a, n_b)
        u_values = np.arange(dist.size, dtype=np.float64) - n_a * (n_a + 1) / 2.0
        total = dist.sum()
        p_le = dist[u_values <= u_a + 1e-9].sum() / total
        p_ge = dist[u_values >= u_a - 1e-9].sum() / total
        return u_a, float(min(1.0, 2.0 * min(p_le, p_ge)))
    if method != "normal":
        raise ValueError("method must be auto, exact, or normal")

    n = n_a + n_b
    mean_u = n_a * n_b / 2.0
    tie_term = sum(t**3 - t for t in ties) / (n * (n - 1)) if n > 1 else 0.0
    var_u = n_a * n_b / 12.0 * ((n + 1) - tie_term)
    if var_u <= 0:
        return u_a, 1.0
    z = max(abs(u_a - mean_u) - 0.5, 0.0) / math.sqrt(var_u)
    return u_a, float(min(1.0, math.erfc(z / math.sqrt(2.0))))


def classification_report(predictions, truths) -> dict:
    """Accuracy/precision/recall/F1 with LEGH as the positive class.

    When no positive predictions exist, precision is reported as 0 and the
    ``degenerate`` flag is set.
    """
    preds = [str(p) for p in predictions]
    trues = [str(t) for t in truths]
    if len(preds) != len(trues):
        raise ValueError("predictions and truths must have equal length")
    if not preds:
        raise ValueError("empty prediction list")
    tp = sum(p == POSITIVE_LABEL and t == POSITIVE_LABEL for p, t in zip(preds, trues))
    fp = sum(p == POSITIVE_LABEL and t != POSITIVE_LABEL for p, t in zip(preds, trues))
    fn = sum(p != POSITIVE_LABEL and t == POSITIVE_LABEL for p, t in zip(preds, trues))
    correct = sum(p == t for p, t in zip(preds, trues))
    degenerate = (tp + fp) == 0
    precision = 0.0 if degenerate else tp / (tp + fp)
    recall = 0.0 if (tp + fn) == 0 else tp / (tp + fn)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return {
        "accuracy": correct / len(preds),
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "degenerate": degenerate,
    }


# ---------------------------------------------------------------------------
# Manifest / model files.
# ---------------------------------------------------------------------------


def load_patch_manifest(path) -> list:
    """Rows of (image, label-or-None, cx, cy) from a patch manifest CSV."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["image", "label", "cx", "cy"]:
        raise ValueError(f"malformed patch manifest {path}: bad header")
    out = []
    for row in rows[1:]:
        if len(row) != 4:
            raise ValueError(f"malformed patch manifest {path}: row {row}")
        label = row[1] or None
        if label is not None and label not in LABELS:
            raise ValueError(f"unknown label {label!r} in {path}")
        out.append((row[0], label, int(row[2]), int(row[3])))
    return out


def save_model(model: LdaModel, path) -> None:
    atomic_write_text(path, model.to_json() + "\n")


def load_model(path) -> LdaModel:
    return LdaModel.from_json(Path(path).read_text())
