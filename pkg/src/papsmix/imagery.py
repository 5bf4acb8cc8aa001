"""Image containers, cube file I/O, optical-density conversion, and the
fixed D65/sRGB rendering path used to turn band spectra into color images."""

import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ._atomic import atomic_write_bytes, atomic_write_text

ROLE_INTENSITY = "intensity"
ROLE_OPTICAL_DENSITY = "optical_density"
ROLE_ABUNDANCE = "abundance"
_ROLES = (ROLE_INTENSITY, ROLE_OPTICAL_DENSITY, ROLE_ABUNDANCE)

# Band centers of the 14-band spectral grid: 20 nm wide bins tiling 440-720 nm.
BAND_CENTERS_NM = tuple(float(c) for c in range(450, 711, 20))

# Fraction of the incident value used to floor near-black pixels before the
# log; keeps optical density finite for saturated-dark sensors.
OD_FLOOR_FRACTION = 1.0 / 65535.0


@dataclass(frozen=True)
class IncidentLight:
    """Per-channel incident (glass-pixel) intensity reference."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1:
            raise ValueError("incident light must be a 1-D vector")
        if not np.all(vals > 0):
            raise ValueError("incident light values must be positive")
        object.__setattr__(self, "values", vals)

    @classmethod
    def flat(cls, channels: int, value: float = 1.0) -> "IncidentLight":
        return cls(np.full(channels, float(value)))

    @property
    def channels(self) -> int:
        return self.values.size


@dataclass
class SpectralCube:
    """W x H raster with M float planes; role tells what the samples mean.

    ``planes`` is an (M, H, W) float64 array, row-major within each plane.
    """

    planes: np.ndarray
    role: str
    wavelengths_nm: tuple | None = None
    labels: tuple | None = None

    def __post_init__(self):
        planes = np.asarray(self.planes, dtype=np.float64)
        if planes.ndim != 3:
            raise ValueError("planes must have shape (channels, height, width)")
        self.planes = planes
        if self.role not in _ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.wavelengths_nm is not None:
            wl = tuple(float(w) for w in self.wavelengths_nm)
            if len(wl) != planes.shape[0]:
                raise ValueError("wavelength count must match channel count")
            self.wavelengths_nm = wl
        if self.labels is not None:
            lab = tuple(str(s) for s in self.labels)
            if len(lab) != planes.shape[0]:
                raise ValueError("label count must match channel count")
            self.labels = lab
        if self.role == ROLE_INTENSITY and planes.size and planes.min() < 0:
            raise ValueError("intensity samples must be nonnegative")
        if self.role == ROLE_OPTICAL_DENSITY and not np.isfinite(planes).all():
            raise ValueError("optical density samples must be finite")

    @property
    def channels(self) -> int:
        return self.planes.shape[0]

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def save_cube(cube: SpectralCube, path) -> None:
    """Write a cube as raw little-endian float32 planes plus a JSON sidecar."""
    path = Path(path)
    if path.suffix != ".msc":
        raise ValueError("cube files use the .msc extension")
    meta = {
        "width": cube.width,
        "height": cube.height,
        "channels": cube.channels,
        "wavelengths_nm": list(cube.wavelengths_nm) if cube.wavelengths_nm else None,
        "role": cube.role,
        "labels": list(cube.labels) if cube.labels else None,
    }
    atomic_write_bytes(path, np.ascontiguousarray(cube.planes, dtype="<f4").tobytes())
    atomic_write_text(_sidecar_path(path), json.dumps(meta, sort_keys=True) + "\n")


def _load_msc(path: Path) -> SpectralCube:
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise ValueError(f"malformed cube: missing sidecar {sidecar}")
    try:
        meta = json.loads(sidecar.read_text())
        width = int(meta["width"])
        height = int(meta["height"])
        channels = int(meta["channels"])
        role = meta["role"]
        wavelengths = meta.get("wavelengths_nm")
        labels = meta.get("labels")
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed cube sidecar {sidecar}: {exc}") from exc
    raw = path.read_bytes()
    expected = 4 * width * height * channels
    if len(raw) != expected:
        raise ValueError(
            f"plane byte-count mismatch in {path}: "
            f"expected {expected} bytes for {channels} planes, found {len(raw)}"
        )
    planes = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    planes = planes.reshape(channels, height, width)
    return SpectralCube(
        planes=planes,
        role=role,
        wavelengths_nm=tuple(wavelengths) if wavelengths else None,
        labels=tuple(labels) if labels else None,
    )


def _load_png(path: Path, linearize: bool) -> SpectralCube:
    with Image.open(path) as img:
        if img.mode != "RGB":
            raise ValueError(
                f"unsupported PNG {path}: only 8-bit RGB is accepted, got mode {img.mode!r}"
            )
        arr = np.asarray(img, dtype=np.float64) / 255.0
    planes = np.ascontiguousarray(arr.transpose(2, 0, 1))
    if linearize:
        planes = srgb_gamma_expand(planes)
    return SpectralCube(planes=planes, role=ROLE_INTENSITY)


def load_cube(path, linearize: bool = False) -> SpectralCube:
    """Load a .msc cube (with JSON sidecar) or an 8-bit RGB PNG.

    PNG samples are rescaled to [0, 1]; ``linearize`` additionally undoes the
    sRGB gamma (off by default: absorbance is taken in whatever space the
    image provides).
    """
    path = Path(path)
    if path.suffix == ".msc":
        return _load_msc(path)
    if path.suffix.lower() == ".png":
        return _load_png(path, linearize)
    raise ValueError(f"unsupported cube file {path}: expected .msc or .png")


def to_optical_density(
    img: SpectralCube,
    light: IncidentLight,
    floor_fraction: float = OD_FLOOR_FRACTION,
) -> SpectralCube:
    """Convert transmitted intensities to optical density log10(I_in/I_out).

    Samples are floored at ``floor_fraction`` of the incident value before the
    log, and negative densities (pixels brighter than glass) clamp to zero.
    """
    if img.role != ROLE_INTENSITY:
        raise ValueError("optical-density conversion expects an intensity cube")
    if light.channels != img.channels:
        raise ValueError(
            f"channel-count mismatch: image has {img.channels}, light has {light.channels}"
        )
    ref = light.values[:, None, None]
    floored = np.maximum(img.planes, floor_fraction * ref)
    od = np.maximum(np.log10(ref / floored), 0.0)
    return SpectralCube(
        planes=od,
        role=ROLE_OPTICAL_DENSITY,
        wavelengths_nm=img.wavelengths_nm,
        labels=img.labels,
    )


# ---------------------------------------------------------------------------
# Color tables.
#
# CIE 1931 2-degree color matching functions and the D65 spectral power
# distribution at 5 nm steps over 440-720 nm.  Band values are obtained by
# linear interpolation to 1 nm followed by arithmetic averaging over each
# 20 nm bin, so the 14 bins reproduce the continuous integrals over 440-720.
# ---------------------------------------------------------------------------

_TABLE_NM = np.arange(440.0, 721.0, 5.0)

_CMF_X = np.array([
    0.348280, 0.348060, 0.336200, 0.318700, 0.290800, 0.251100, 0.195360,
    0.142100, 0.095640, 0.057950, 0.032010, 0.014700, 0.004900, 0.002400,
    0.009300, 0.029100, 0.063270, 0.109600, 0.165500, 0.225750, 0.290400,
    0.359700, 0.433450, 0.512050, 0.594500, 0.678400, 0.762100, 0.842500,
    0.916300, 0.978600, 1.026300, 1.056700, 1.062200, 1.045600, 1.002600,
    0.938400, 0.854450, 0.751400, 0.642400, 0.541900, 0.447900, 0.360800,
    0.283500, 0.218700, 0.164900, 0.121200, 0.087400, 0.063600, 0.046770,
    0.032900, 0.022700, 0.015840, 0.011359, 0.008111, 0.005790, 0.004109,
    0.002899,
])

_CMF_Y = np.array([
    0.023000, 0.029800, 0.038000, 0.048000, 0.060000, 0.073900, 0.090980,
    0.112600, 0.139020, 0.169300, 0.208020, 0.258600, 0.323000, 0.407300,
    0.503000, 0.608200, 0.710000, 0.793200, 0.862000, 0.914850, 0.954000,
    0.980300, 0.994950, 1.000000, 0.995000, 0.978600, 0.952000, 0.915400,
    0.870000, 0.816300, 0.757000, 0.694900, 0.631000, 0.566800, 0.503000,
    0.441200, 0.381000, 0.321000, 0.265000, 0.217000, 0.175000, 0.138200,
    0.107000, 0.081600, 0.061000, 0.044580, 0.032000, 0.023200, 0.017000,
    0.011920, 0.008210, 0.005723, 0.004102, 0.002929, 0.002091, 0.001484,
    0.001047,
])

_CMF_Z = np.array([
    1.747060, 1.782600, 1.772110, 1.744100, 1.669200, 1.528100, 1.287640,
    1.041900, 0.812950, 0.616200, 0.465180, 0.353300, 0.272000, 0.212300,
    0.158200, 0.111700, 0.078250, 0.057250, 0.042160, 0.029840, 0.020300,
    0.013400, 0.008750, 0.005750, 0.003900, 0.002750, 0.002100, 0.001800,
    0.001650, 0.001400, 0.001100, 0.001000, 0.000800, 0.000600, 0.000340,
    0.000240, 0.000190, 0.000100, 0.000050, 0.000030, 0.000020, 0.000010,
    0.000000, 0.000000, 0.000000, 0.000000, 0.000000, 0.000000, 0.000000,
    0.000000, 0.000000, 0.000000, 0.000000, 0.000000, 0.000000, 0.000000,
    0.000000,
])

_D65 = np.array([
    104.865, 110.936, 117.008, 117.410, 117.812, 116.336, 114.861, 115.392,
    115.923, 112.367, 108.811, 109.082, 109.354, 108.578, 107.802, 106.296,
    104.790, 106.239, 107.689, 106.047, 104.405, 104.225, 104.046, 102.023,
    100.000, 98.1671, 96.3342, 96.0611, 95.7880, 92.2368, 88.6856, 89.3459,
    90.0062, 89.8026, 89.5991, 88.6489, 87.6987, 85.4936, 83.2886, 83.4939,
    83.6992, 81.8630, 80.0268, 80.1207, 80.2146, 81.2462, 82.2778, 80.2810,
    78.2842, 74.0027, 69.7213, 70.6652, 71.6091, 72.9790, 74.3490, 67.9765,
    61.6040,
])


def _bin_average(table: np.ndarray) -> np.ndarray:
    """Average a 5 nm table over the 14 bins after 1 nm linear interpolation."""
    fine_nm = np.arange(440.0, 720.0 + 0.5, 1.0)
    fine = np.interp(fine_nm, _TABLE_NM, table)
    out = np.empty(len(BAND_CENTERS_NM))
    for i, center in enumerate(BAND_CENTERS_NM):
        sel = (fine_nm >= center - 10.0) & (fine_nm <= center + 10.0)
        out[i] = fine[sel].mean()
    return out


CMF_BANDS = np.vstack([_bin_average(t) for t in (_CMF_X, _CMF_Y, _CMF_Z)])
D65_BANDS = _bin_average(_D65)

# sRGB linear-RGB -> XYZ matrix (D65 reference white); its row sums are the
# white point, so flat transmittance maps exactly to RGB (1, 1, 1).
RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
XYZ_TO_RGB = np.linalg.inv(RGB_TO_XYZ)
D65_WHITE_XYZ = RGB_TO_XYZ.sum(axis=1)


def srgb_gamma_compress(linear: np.ndarray) -> np.ndarray:
    linear = np.asarray(linear, dtype=np.float64)
    return np.where(
        linear <= 0.0031308,
        12.92 * linear,
        1.055 * np.power(np.maximum(linear, 0.0), 1.0 / 2.4) - 0.055,
    )


def srgb_gamma_expand(srgb: np.ndarray) -> np.ndarray:
    srgb = np.asarray(srgb, dtype=np.float64)
    return np.where(
        srgb <= 0.04045,
        srgb / 12.92,
        np.power((srgb + 0.055) / 1.055, 2.4),
    )


def _check_band_grid(wavelengths) -> None:
    if wavelengths is None or len(wavelengths) != len(BAND_CENTERS_NM):
        raise ValueError(
            f"spectral rendering needs the {len(BAND_CENTERS_NM)}-band grid "
            f"{BAND_CENTERS_NM[0]:.0f}-{BAND_CENTERS_NM[-1]:.0f} nm"
        )
    if not np.allclose(wavelengths, BAND_CENTERS_NM, atol=1e-6):
        raise ValueError("wavelength grid mismatch: expected 20 nm bands tiling 440-720 nm")


def render_srgb(spec: SpectralCube, light: IncidentLight) -> SpectralCube:
    """Render a 14-band transmittance spectrum to a 3-channel sRGB cube.

    Per-band transmittance is sample/light; tristimulus sums are normalized
    channelwise against the illuminant-only sums, so unit transmittance lands
    on the sRGB white point.  Output values are gamma-compressed and clipped
    to [0, 1].
    """
    if spec.role != ROLE_INTENSITY:
        raise ValueError("rendering expects an intensity cube")
    _check_band_grid(spec.wavelengths_nm)
    if light.channels != spec.channels:
        raise ValueError("incident light channel count must match the cube")
    trans = spec.planes / light.values[:, None, None]
    weights = CMF_BANDS * D65_BANDS  # (3, 14)
    norms = weights.sum(axis=1)
    xyz = np.tensordot(weights, trans, axes=([1], [0]))
    xyz *= (D65_WHITE_XYZ / norms)[:, None, None]
    rgb_lin = np.tensordot(XYZ_TO_RGB, xyz, axes=([1], [0]))
    rgb = np.clip(srgb_gamma_compress(np.clip(rgb_lin, 0.0, None)), 0.0, 1.0)
    return SpectralCube(planes=rgb, role=ROLE_INTENSITY)


def srgb_to_lab(planes: np.ndarray) -> np.ndarray:
    """Convert (3, H, W) sRGB values in [0, 1] to CIELAB (D65 white)."""
    rgb_lin = srgb_gamma_expand(np.asarray(planes, dtype=np.float64))
    xyz = np.tensordot(RGB_TO_XYZ, rgb_lin, axes=([1], [0]))
    ratio = xyz / D65_WHITE_XYZ[:, None, None]
    eps = (6.0 / 29.0) ** 3
    f = np.where(
        ratio > eps,
        np.cbrt(ratio),
        ratio / (3.0 * (6.0 / 29.0) ** 2) + 4.0 / 29.0,
    )
    lab = np.empty_like(xyz)
    lab[0] = 116.0 * f[1] - 16.0
    lab[1] = 500.0 * (f[0] - f[1])
    lab[2] = 200.0 * (f[1] - f[2])
    return lab


def write_gray_png(values: np.ndarray, path) -> None:
    """Write a [0, 1]-scaled 2-D array as an 8-bit grayscale PNG."""
    arr = np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())
