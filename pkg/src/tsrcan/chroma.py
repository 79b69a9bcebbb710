"""Conventional chromatic mapping: Catmull-Rom upsampling followed by a
colour matching function, and the per-channel white balance applied
before scoring it.

Colour pipeline shared with the synthetic ground truth:

    XYZ = integral(spectrum * cmf) / integral(ybar)      (flat 1 -> Y = 1)
    RGB = clamp(M_srgb @ XYZ, 0, 1) ** (1 / 2.2)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .mosaic import DEFAULT_LAYOUT, MosaicLayout, demux_compact
from .tensor import DimensionError

log = logging.getLogger(__name__)

GAMMA = 2.2

#: XYZ -> linear sRGB, D65 white.
XYZ_TO_SRGB = np.array([
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
])


class ConfigError(ValueError):
    """Inconsistent spectral configuration."""


@dataclass(frozen=True)
class CmfTable:
    wavelengths_nm: np.ndarray
    xbar: np.ndarray
    ybar: np.ndarray
    zbar: np.ndarray
    rgb_matrix: np.ndarray = XYZ_TO_SRGB

    def __post_init__(self):
        if np.any(np.diff(self.wavelengths_nm) <= 0):
            raise ConfigError("CMF wavelength grid must be strictly increasing")
        if np.any(self.ybar < 0):
            raise ConfigError("ybar must be non-negative")

    @property
    def matrix(self) -> np.ndarray:
        """(L, 3) stack of xbar, ybar, zbar."""
        return np.stack([self.xbar, self.ybar, self.zbar], axis=1)

    @property
    def y_norm(self) -> float:
        return float(np.trapezoid(self.ybar, self.wavelengths_nm))

    def at(self, wavelengths) -> np.ndarray:
        """Linearly interpolated (x, y, z) weights at arbitrary wavelengths, shape (n, 3)."""
        lam = np.asarray(wavelengths, dtype=np.float64)
        lo, hi = self.wavelengths_nm[0], self.wavelengths_nm[-1]
        if np.any(lam < lo) or np.any(lam > hi):
            raise ConfigError(f"wavelengths outside the CMF grid [{lo}, {hi}] nm")
        return np.stack([np.interp(lam, self.wavelengths_nm, v)
                         for v in (self.xbar, self.ybar, self.zbar)], axis=1)

    @classmethod
    def from_file(cls, path) -> "CmfTable":
        rows = np.loadtxt(path, comments="#", dtype=np.float64)
        return cls(rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3])


_CIE1931 = None


def cie1931() -> CmfTable:
    """The bundled CIE 1931 2-degree observer, 400-700 nm at 5 nm."""
    global _CIE1931
    if _CIE1931 is None:
        ref = resources.files("tsrcan") / "data" / "cie1931_2deg_5nm.txt"
        with resources.as_file(ref) as p:
            _CIE1931 = CmfTable.from_file(p)
    return _CIE1931


def xyz_to_rgb(xyz: np.ndarray, cmf: CmfTable, axis: int = 0) -> np.ndarray:
    """Linear XYZ (3 along ``axis``) to gamma-encoded sRGB clamped to [0, 1]."""
    lin = np.moveaxis(np.tensordot(cmf.rgb_matrix, np.moveaxis(xyz, axis, 0), axes=1), 0, axis)
    return np.clip(lin, 0.0, 1.0) ** (1.0 / GAMMA)


def spectra_to_xyz(spectra: np.ndarray, cmf: CmfTable) -> np.ndarray:
    """Integrate (L, ...) spectra sampled on the CMF grid to (3, ...) XYZ."""
    spectra = np.asarray(spectra, dtype=np.float64)
    if spectra.shape[0] != len(cmf.wavelengths_nm):
        raise ConfigError("spectra must be sampled on the CMF wavelength grid")
    lam = cmf.wavelengths_nm
    w = np.empty_like(lam)
    d = np.diff(lam)
    w[0], w[-1] = d[0] / 2, d[-1] / 2
    w[1:-1] = (d[:-1] + d[1:]) / 2
    weights = cmf.matrix * w[:, None] / cmf.y_norm
    return np.tensordot(weights.T, spectra, axes=1)


def band_weights(layout: MosaicLayout, cmf: CmfTable) -> np.ndarray:
    """(bands, 3) XYZ weight of each camera band: trapezoid rule over the
    band centres, normalised like :func:`spectra_to_xyz`."""
    lam = np.asarray(layout.wavelengths_nm, dtype=np.float64)
    d = np.diff(lam)
    dl = np.empty_like(lam)
    dl[0], dl[-1] = d[0] / 2, d[-1] / 2
    dl[1:-1] = (d[:-1] + d[1:]) / 2
    return cmf.at(lam) * dl[:, None] / cmf.y_norm


def cmf_map_linear(ms, layout: MosaicLayout, cmf: CmfTable) -> np.ndarray:
    """(bands, H, W) -> linear RGB (3, H, W) before clamping and gamma."""
    ms = np.asarray(ms, dtype=np.float64)
    if ms.ndim != 3 or ms.shape[0] != layout.bands:
        raise DimensionError(f"expected ({layout.bands}, H, W), got {ms.shape}")
    xyz = np.tensordot(band_weights(layout, cmf).T, ms, axes=1)
    return np.tensordot(cmf.rgb_matrix, xyz, axes=1)


def cmf_map(ms, layout: MosaicLayout = DEFAULT_LAYOUT, cmf: CmfTable | None = None) -> np.ndarray:
    """Colour a multispectral image with the CMF sampled at the camera bands.

    Bands cover only 477-617.5 nm, so most of the blue and the deep red
    response is missing; the result is correspondingly biased.
    """
    cmf = cmf or cie1931()
    lin = cmf_map_linear(ms, layout, cmf)
    return (np.clip(lin, 0.0, 1.0) ** (1.0 / GAMMA)).astype(np.float32)


def _cubic_weight(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    return np.where(
        t <= 1,
        (a + 2) * t**3 - (a + 3) * t**2 + 1,
        np.where(t < 2, a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a, 0.0),
    )


def bicubic_matrix(n_in: int, factor: int) -> np.ndarray:
    """(n_in*factor, n_in) Catmull-Rom resampling matrix, pixel-centre
    aligned, edge samples clamped."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    base = np.floor(src).astype(np.int64)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for off in (-1, 0, 1, 2):
        idx = base + off
        np.add.at(m, (rows, np.clip(idx, 0, n_in - 1)), _cubic_weight(src - idx))
    return m


def bicubic_upsample(x, factor: int) -> np.ndarray:
    """Upsample (C, h, w) by an integer factor with Catmull-Rom (a = -0.5)."""
    if factor < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"expected (C, h, w), got {x.shape}")
    if factor == 1:
        return x.astype(np.float32, copy=True)
    mh = bicubic_matrix(x.shape[1], factor)
    mw = bicubic_matrix(x.shape[2], factor)
    out = np.einsum("ij,cjk,lk->cil", mh, x.astype(np.float64), mw, optimize=True)
    return out.astype(np.float32)


def baseline_pipeline(raw, layout: MosaicLayout = DEFAULT_LAYOUT, cmf: CmfTable | None = None) -> np.ndarray:
    """Bicubic + CMF: compact demux, x4 Catmull-Rom, CMF at the band centres."""
    ms = bicubic_upsample(demux_compact(raw, layout), layout.block)
    return cmf_map(ms, layout, cmf)


def degenerate_channels(img) -> list[int]:
    img = np.asarray(img)
    return [c for c in range(img.shape[0]) if not img[c].max() > img[c].min()]


def white_balance(img) -> np.ndarray:
    """Stretch each channel independently onto [0, 255].

    A constant channel has no range to stretch and maps to zeros.
    """
    img = np.asarray(img, dtype=np.float64)
    out = np.zeros(img.shape, dtype=np.float64)
    for c in range(img.shape[0]):
        lo, hi = img[c].min(), img[c].max()
        if hi > lo:
            out[c] = (img[c] - lo) * (255.0 / (hi - lo))
        else:
            log.warning("white_balance: channel %d is constant, mapped to zeros", c)
    return out
