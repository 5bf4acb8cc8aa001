"""Stain-matrix estimation from single-stain regions and overdetermined
multispectral unmixing."""

import csv
import io
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._atomic import atomic_write_text
from .imagery import ROLE_OPTICAL_DENSITY, SpectralCube

# Canonical dye order; every abundance field and stain matrix follows it,
# so row 2 (1-based) is always hematoxylin.
DYES = ("EY", "H", "LG", "OG")
H_ROW = 1

# Relative singular-value cutoff for pseudoinverses.
PINV_RCOND = 1e-12


@dataclass(frozen=True)
class StainMatrix:
    """M x r matrix of per-channel absorption coefficients, unit-sum columns."""

    coeffs: np.ndarray
    dyes: tuple = DYES

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if coeffs.ndim != 2:
            raise ValueError("stain matrix must be 2-D")
        if tuple(self.dyes) != DYES:
            raise ValueError(f"dyes must be the canonical order {DYES}")
        if coeffs.shape[1] != len(DYES):
            raise ValueError(f"stain matrix needs {len(DYES)} columns")
        if coeffs.size and coeffs.min() < 0:
            raise ValueError("stain coefficients must be nonnegative")
        sums = coeffs.sum(axis=0)
        if not np.allclose(sums, 1.0, atol=1e-9):
            raise ValueError("stain matrix columns must sum to 1")
        coeffs.setflags(write=False)
        object.__setattr__(self, "coeffs", coeffs)
        object.__setattr__(self, "dyes", DYES)

    @property
    def channels(self) -> int:
        return self.coeffs.shape[0]


@dataclass(frozen=True)
class Region:
    """Axis-aligned rectangle tagged with the dye it contains."""

    dye: str
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.dye not in DYES:
            raise ValueError(f"unknown dye {self.dye!r}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError("region width and height must be positive")


def estimate_stain_vector(od_regions) -> np.ndarray:
    """Mean per-channel density over all pixels of all regions, unit-sum scaled.

    Regions are (M, h, w) density arrays or density cubes from single-stain
    samples; negative means clamp to zero with a warning before normalizing.
    """
    blocks = []
    channels = None
    for region in od_regions:
        arr = region.planes if isinstance(region, SpectralCube) else np.asarray(region, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError("each region must be a (channels, h, w) array")
        if channels is None:
            channels = arr.shape[0]
        elif arr.shape[0] != channels:
            raise ValueError("all regions must share the channel count")
        blocks.append(arr.reshape(arr.shape[0], -1))
    if not blocks:
        raise ValueError("no regions given")
    mean = np.concatenate(blocks, axis=1).mean(axis=1)
    if mean.min() < 0:
        warnings.warn("negative mean absorbance clamped to zero", stacklevel=2)
        mean = np.maximum(mean, 0.0)
    total = mean.sum()
    if total <= 0:
        raise ValueError("regions are unstained: mean absorbance is zero")
    return mean / total


def build_stain_matrix(vectors, labels) -> StainMatrix:
    """Assemble per-dye coefficient vectors into a canonically ordered matrix."""
    labels = [str(s) for s in labels]
    if len(vectors) != len(DYES) or len(labels) != len(DYES):
        raise ValueError(f"need exactly {len(DYES)} stain vectors and labels")
    if sorted(labels) != sorted(DYES):
        raise ValueError(f"labels must be a permutation of {DYES}, got {labels}")
    by_dye = {}
    for label, vec in zip(labels, vectors):
        v = np.asarray(vec, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError("stain vectors must be 1-D")
        total = v.sum()
        if total <= 0:
            raise ValueError(f"stain vector for {label} has nonpositive sum")
        by_dye[label] = v / total
    cols = [by_dye[d] for d in DYES]
    if len({c.size for c in cols}) != 1:
        raise ValueError("stain vectors must share the channel count")
    return StainMatrix(np.column_stack(cols))


def extract_regions(cube: SpectralCube, regions) -> list:
    """Slice rectangular density regions out of a cube, bounds-checked."""
    if cube.role != ROLE_OPTICAL_DENSITY:
        raise ValueError("regions are taken from optical-density cubes")
    out = []
    for reg in regions:
        if reg.x < 0 or reg.y < 0 or reg.x + reg.w > cube.width or reg.y + reg.h > cube.height:
            raise ValueError(f"region {reg} exceeds image bounds {cube.width}x{cube.height}")
        out.append(cube.planes[:, reg.y : reg.y + reg.h, reg.x : reg.x + reg.w])
    return out


def ms_unmix(od: SpectralCube, matrix: StainMatrix):
    """Per-pixel pseudoinverse unmixing of an overdetermined density cube.

    Returns an abundance field without any nonnegativity enforcement.
    """
    from .solver import AbundanceField  # solver imports this module

    if od.role != ROLE_OPTICAL_DENSITY:
        raise ValueError("unmixing expects an optical-density cube")
    coeffs = matrix.coeffs
    if coeffs.shape[0] != od.channels:
        raise ValueError(
            f"channel mismatch: cube has {od.channels}, matrix has {coeffs.shape[0]}"
        )
    if coeffs.shape[0] <= coeffs.shape[1]:
        raise ValueError("multispectral unmixing needs more channels than dyes")
    if np.linalg.matrix_rank(coeffs, tol=None) < coeffs.shape[1]:
        raise ValueError("stain matrix is rank deficient")
    pinv = np.linalg.pinv(coeffs, rcond=PINV_RCOND)
    return AbundanceField(np.tensordot(pinv, od.planes, axes=([1], [0])))


# ---------------------------------------------------------------------------
# On-disk formats.
# ---------------------------------------------------------------------------


def save_matrix_csv(matrix: StainMatrix, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["dye", *DYES])
    for k in range(matrix.channels):
        writer.writerow([f"ch{k + 1}", *[repr(float(v)) for v in matrix.coeffs[k]]])
    atomic_write_text(path, buf.getvalue())


def load_matrix_csv(path) -> StainMatrix:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["dye", *DYES]:
        raise ValueError(f"malformed stain matrix CSV {path}: bad header")
    try:
        coeffs = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
    except ValueError as exc:
        raise ValueError(f"malformed stain matrix CSV {path}: {exc}") from exc
    if coeffs.ndim != 2 or coeffs.shape[1] != len(DYES):
        raise ValueError(f"malformed stain matrix CSV {path}: wrong column count")
    return StainMatrix(coeffs)


def load_regions_json(path) -> list:
    """Read a region list; entries may carry an optional image index."""
    entries = json.loads(Path(path).read_text())
    if not isinstance(entries, list):
        raise ValueError("region file must hold a JSON list")
    out = []
    for entry in entries:
        region = Region(
            dye=entry["dye"],
            x=int(entry["x"]),
            y=int(entry["y"]),
            w=int(entry["w"]),
            h=int(entry["h"]),
        )
        out.append((int(entry.get("image", 0)), region))
    return out
