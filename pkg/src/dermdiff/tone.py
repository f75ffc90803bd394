"""Colorimetric skin-tone estimation.

sRGB (D65) to CIELAB conversion, the Individual Typology Angle, its banding
into Fitzpatrick skin types, the 3-class tone remap (A: FST I-II, B: III-IV,
C: V-VI), and an image-level estimator that takes the median ITA over the
4-pixel border ring.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Linear RGB -> XYZ for sRGB primaries, D65 white, 2 degree observer.  The
# reference white is taken as the exact row sums so the gray axis maps to
# a* = b* = 0 identically.
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_WHITE = _RGB_TO_XYZ.sum(axis=1)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
_DELTA = 6.0 / 29.0

FST_LEVELS = ("I", "II", "III", "IV", "V", "VI")
TONES = ("A", "B", "C")

# FST -> 3-class tone remap: lighter (A), brown (B), darker (C).
FST_TO_TONE = {"I": "A", "II": "A", "III": "B", "IV": "B", "V": "C", "VI": "C"}


@dataclass(frozen=True)
class LabColor:
    L: float
    a: float
    b: float

    def __post_init__(self):
        if not 0.0 <= self.L <= 100.0:
            raise ValueError(f"L must be in [0, 100], got {self.L}")


def _inverse_compand(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)


def _f_inv(ft: np.ndarray) -> np.ndarray:
    return np.where(ft > _DELTA, ft**3, 3 * _DELTA**2 * (ft - 4.0 / 29.0))


def srgb_to_lab_array(rgb: np.ndarray) -> np.ndarray:
    """Vectorized sRGB -> CIELAB over an (..., 3) array of values in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[-1] != 3:
        raise ValueError(f"expected trailing channel axis of 3, got shape {rgb.shape}")
    if rgb.min() < -1e-12 or rgb.max() > 1.0 + 1e-12:
        raise ValueError(
            f"sRGB channels must be in [0, 1], got range [{rgb.min():.6g}, {rgb.max():.6g}]"
        )
    lin = _inverse_compand(np.clip(rgb, 0.0, 1.0))
    xyz = lin @ _RGB_TO_XYZ.T
    fxyz = _f(xyz / _WHITE)
    L = 116.0 * fxyz[..., 1] - 16.0
    a = 500.0 * (fxyz[..., 0] - fxyz[..., 1])
    b = 200.0 * (fxyz[..., 1] - fxyz[..., 2])
    return np.stack([L, a, b], axis=-1)


def lab_to_srgb_array(lab: np.ndarray) -> np.ndarray:
    """Vectorized CIELAB -> sRGB; out-of-gamut colors come back outside [0, 1]."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = _f_inv(np.stack([fx, fy, fz], axis=-1)) * _WHITE
    lin = xyz @ _XYZ_TO_RGB.T
    return np.where(
        lin <= 0.0031308,
        12.92 * lin,
        1.055 * np.power(np.maximum(lin, 1e-300), 1.0 / 2.4) - 0.055,
    )


def srgb_to_lab(r: float, g: float, b: float) -> LabColor:
    """Convert one sRGB color with channels in [0, 1] to CIELAB (D65)."""
    lab = srgb_to_lab_array(np.array([r, g, b]))
    return LabColor(float(lab[0]), float(lab[1]), float(lab[2]))


def ita_degrees_array(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """ITA = atan((L-50)/b) in degrees, b >= 0 convention."""
    return np.degrees(np.arctan2(np.asarray(L) - 50.0, np.maximum(np.asarray(b), 1e-12)))


def ita_degrees(lab: LabColor) -> float:
    """Individual Typology Angle of a CIELAB color, in (-90, 90)."""
    return float(ita_degrees_array(np.float64(lab.L), np.float64(lab.b)))


def ita_to_fst(angle_degrees: float) -> str:
    """Band an ITA angle into an FST level (right-closed bands)."""
    a = float(angle_degrees)
    if a > 55.0:
        return "I"
    if a > 41.0:
        return "II"
    if a > 28.0:
        return "III"
    if a > 10.0:
        return "IV"
    if a > -30.0:
        return "V"
    return "VI"


def fst_to_tone(fst: str) -> str:
    """Map an FST level to the 3-class tone label."""
    try:
        return FST_TO_TONE[fst]
    except KeyError:
        raise ValueError(f"invalid FST level {fst!r}; expected one of {FST_LEVELS}") from None


def border_ring_mask(height: int, width: int, ring: int = 4) -> np.ndarray:
    """Boolean mask selecting the `ring`-pixel border of an image."""
    mask = np.zeros((height, width), dtype=bool)
    mask[:ring, :] = True
    mask[-ring:, :] = True
    mask[:, :ring] = True
    mask[:, -ring:] = True
    return mask


def estimate_tone_ita(image: np.ndarray, ring: int = 4) -> tuple[str, float]:
    """Estimate the tone label of an image from its border ring.

    The ring is assumed lesion-free; per-pixel ITA angles are reduced by the
    median, which is robust to texture speckle.  Returns (tone label, median
    ITA in degrees).
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")
    h, w = image.shape[:2]
    if h < 2 * ring or w < 2 * ring:
        raise ValueError(f"image {h}x{w} smaller than the {ring}-pixel border ring")
    ring_pixels = image[border_ring_mask(h, w, ring)]
    lab = srgb_to_lab_array(ring_pixels)
    angles = ita_degrees_array(lab[:, 0], lab[:, 2])
    median = float(np.median(angles))
    return fst_to_tone(ita_to_fst(median)), median
