"""4x4 snapshot-mosaic geometry and the two network input formations.

* zero-padded: one channel per band at full mosaic resolution, each band's
  samples kept at their true sensor position and zeros elsewhere;
* compact: one channel per band at 1/4 resolution, sensor offsets discarded
  (the RCAN* input).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError

#: Centre wavelengths (nm) of the 16 camera bands, ascending.
CAMERA_WAVELENGTHS_NM = (
    477.2, 478.2, 489.5, 500.3, 510.9, 523.2, 537.9, 548.9,
    553.0, 562.5, 577.3, 590.5, 599.9, 612.9, 615.9, 617.5,
)


def _row_major_positions(block: int) -> tuple:
    return tuple((i // block, i % block) for i in range(block * block))


@dataclass(frozen=True)
class MosaicLayout:
    """Filter-array geometry: which in-block cell holds which band.

    The default places bands row-major by ascending wavelength, band 0 at
    (0, 0).  Any bijection onto the block cells is accepted.
    """

    block: int = 4
    wavelengths_nm: tuple = CAMERA_WAVELENGTHS_NM
    position_of_band: tuple = field(default_factory=lambda: _row_major_positions(4))

    def __post_init__(self):
        n = self.block * self.block
        if len(self.wavelengths_nm) != n or len(self.position_of_band) != n:
            raise ValueError(f"a {self.block}x{self.block} layout needs {n} bands")
        if np.any(np.diff(self.wavelengths_nm) <= 0):
            raise ValueError("wavelengths must be strictly increasing")
        cells = {tuple(p) for p in self.position_of_band}
        if cells != {(r, c) for r in range(self.block) for c in range(self.block)}:
            raise ValueError("position_of_band must be a bijection onto the block cells")

    @property
    def bands(self) -> int:
        return self.block * self.block

    def band_at(self) -> np.ndarray:
        """(block, block) array giving the band index at each cell."""
        out = np.empty((self.block, self.block), dtype=np.int64)
        for band, (r, c) in enumerate(self.position_of_band):
            out[r, c] = band
        return out


DEFAULT_LAYOUT = MosaicLayout()


def _check_raw(raw: np.ndarray, block: int) -> np.ndarray:
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise DimensionError(f"raw mosaic must be 2-D, got shape {raw.shape}")
    h, w = raw.shape
    if h % block or w % block:
        raise DimensionError(f"raw mosaic {h}x{w} is not a multiple of the {block}x{block} block")
    return raw


def demux_zero_padded(raw, layout: MosaicLayout = DEFAULT_LAYOUT) -> np.ndarray:
    """Split a mosaic (H, W) into (bands, H, W), zeros off each band's sites."""
    raw = _check_raw(raw, layout.block)
    k = layout.block
    out = np.zeros((layout.bands,) + raw.shape, dtype=np.float32)
    for band, (r, c) in enumerate(layout.position_of_band):
        out[band, r::k, c::k] = raw[r::k, c::k]
    return out


def remux(t, layout: MosaicLayout = DEFAULT_LAYOUT) -> np.ndarray:
    """Inverse of :func:`demux_zero_padded`: read each band at its own sites."""
    t = np.asarray(t)
    if t.ndim != 3 or t.shape[0] != layout.bands:
        raise DimensionError(f"expected ({layout.bands}, H, W), got {t.shape}")
    _check_raw(t[0], layout.block)
    k = layout.block
    raw = np.zeros(t.shape[1:], dtype=np.float32)
    for band, (r, c) in enumerate(layout.position_of_band):
        raw[r::k, c::k] = t[band, r::k, c::k]
    return raw


def demux_compact(raw, layout: MosaicLayout = DEFAULT_LAYOUT) -> np.ndarray:
    """One pixel per mosaic block: (H, W) -> (bands, H/4, W/4)."""
    raw = _check_raw(raw, layout.block)
    k = layout.block
    return np.stack([raw[r::k, c::k] for r, c in layout.position_of_band]).astype(np.float32)


def compact_from_zero_padded(t, block: int = 4) -> np.ndarray:
    """Collapse each block of a zero-padded tensor to its (single) nonzero.

    Works on a leading batch axis too.  Because each band has exactly one
    site per block, summing over the block recovers the sample wherever the
    site sits, so this stays valid after phase-preserving flips/rotations.
    """
    t = np.asarray(t)
    *lead, c, h, w = t.shape
    if h % block or w % block:
        raise DimensionError(f"spatial size {h}x{w} not a multiple of {block}")
    v = t.reshape(*lead, c, h // block, block, w // block, block)
    return v.sum(axis=(-3, -1)).astype(np.float32)
