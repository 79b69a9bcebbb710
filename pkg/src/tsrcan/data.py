"""Synthetic paired mosaic/RGB scenes, dataset splits, augmentation, and
the on-disk dataset layout.

A scene is a radiance cube on the 400-700 nm grid built from a few
patches, each a smooth spatial envelope times a smooth spectrum, with
multiplicative band-limited texture on top.  The RGB ground truth is the
dense CMF integral of that cube; the mosaic samples it through each
band's Gaussian response at that band's sensor sites.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import io as msio
from .chroma import CmfTable, cie1931, spectra_to_xyz, xyz_to_rgb
from .mosaic import DEFAULT_LAYOUT, MosaicLayout
from .tensor import DimensionError

log = logging.getLogger(__name__)

FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))
SPLIT_FRACTIONS = (250 / 296, 25 / 296, 21 / 296)


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    height: int = 32
    width: int = 64
    num_patches: int = 4
    band_fwhm_nm: float = 15.0
    texture_amplitude: float = 0.1
    flat: bool = False
    gain_jitter: float = 0.0
    grid_start_nm: float = 400.0
    grid_stop_nm: float = 700.0
    grid_step_nm: float = 5.0

    def __post_init__(self):
        if self.height % 4 or self.width % 4 or self.height < 4 or self.width < 4:
            raise DimensionError(f"scene size {self.height}x{self.width} must be positive multiples of 4")
        if self.num_patches < 0:
            raise ValueError("num_patches must be >= 0")

    @property
    def grid(self) -> np.ndarray:
        n = int(round((self.grid_stop_nm - self.grid_start_nm) / self.grid_step_nm)) + 1
        return self.grid_start_nm + self.grid_step_nm * np.arange(n)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, kv: dict) -> "SceneSpec":
        out = {}
        for f in fields(cls):
            if f.name in kv:
                v = kv[f.name]
                if f.type in ("bool", bool):
                    out[f.name] = str(v).lower() in ("1", "true", "yes")
                elif f.type in ("int", int):
                    out[f.name] = int(v)
                else:
                    out[f.name] = float(v)
        return cls(**out)


@dataclass
class DatasetSample:
    raw: np.ndarray
    hr_rgb: np.ndarray
    mask: Optional[np.ndarray] = None
    id: str = ""

    def __post_init__(self):
        if self.raw.shape != self.hr_rgb.shape[1:]:
            raise DimensionError(f"raw {self.raw.shape} and RGB {self.hr_rgb.shape} sizes differ")


def _smooth_field(rng: np.random.Generator, h: int, w: int, corr_px: float) -> np.ndarray:
    """Zero-mean, unit-std Gaussian random field with correlation length ~corr_px."""
    noise = rng.standard_normal((h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    lowpass = np.exp(-2.0 * (np.pi * corr_px) ** 2 * (fx**2 + fy**2))
    f = np.fft.irfft2(np.fft.rfft2(noise) * lowpass, s=(h, w))
    sd = f.std()
    return (f - f.mean()) / sd if sd > 0 else np.zeros_like(f)


def _bandpass_field(rng: np.random.Generator, h: int, w: int, lo: float, hi: float) -> np.ndarray:
    noise = rng.standard_normal((h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    r = np.hypot(fx, fy)
    f = np.fft.irfft2(np.fft.rfft2(noise) * ((r >= lo) & (r <= hi)), s=(h, w))
    sd = f.std()
    return f / sd if sd > 0 else np.zeros_like(f)


def random_spectrum(rng: np.random.Generator, grid: np.ndarray) -> np.ndarray:
    """Flat floor plus a mixture of 2-4 Gaussians over the wavelength grid."""
    k = rng.integers(2, 5)
    centres = rng.uniform(grid[0], grid[-1], k)
    widths = rng.uniform(25.0, 80.0, k)
    amps = rng.uniform(0.2, 1.0, k)
    floor = rng.uniform(0.1, 0.5)
    bumps = amps[:, None] * np.exp(-0.5 * ((grid[None, :] - centres[:, None]) / widths[:, None]) ** 2)
    return floor + bumps.sum(axis=0)


def band_responses(layout: MosaicLayout, grid: np.ndarray, fwhm_nm: float) -> np.ndarray:
    """(bands, L) Gaussian filter responses, each summing to one on the grid."""
    sigma = fwhm_nm * FWHM_TO_SIGMA
    lam = np.asarray(layout.wavelengths_nm)[:, None]
    r = np.exp(-0.5 * ((grid[None, :] - lam) / sigma) ** 2)
    return r / r.sum(axis=1, keepdims=True)


def radiance_cube(spec: SceneSpec, cmf: CmfTable) -> np.ndarray:
    """(L, H, W) non-negative radiance for ``spec``."""
    rng = np.random.default_rng(spec.seed)
    grid = spec.grid
    h, w = spec.height, spec.width
    cube = np.zeros((len(grid), h, w))
    ybar = np.interp(grid, cmf.wavelengths_nm, cmf.ybar)
    corr = max(h, w) / 6.0
    for p in range(spec.num_patches):
        s = random_spectrum(rng, grid)
        s *= 1.0 / max(np.trapezoid(s * ybar, grid) / cmf.y_norm, 1e-12)  # unit luminance
        brightness = rng.uniform(0.1, 0.35) / max(spec.num_patches, 1) * (2.0 if p == 0 else 1.0)
        if spec.flat:
            env = np.full((h, w), 1.0 if p == 0 else rng.uniform(0.2, 1.0))
        else:
            field = _smooth_field(rng, h, w, corr)
            env = 1.0 / (1.0 + np.exp(-2.5 * field))
            if p == 0:
                env = 0.5 + 0.5 * env  # backdrop: never fully dark
        cube += (brightness * s)[:, None, None] * env[None]
    if spec.num_patches and not spec.flat and spec.texture_amplitude > 0:
        tex = _bandpass_field(rng, h, w, 0.05, 0.25)
        cube *= np.maximum(1.0 + spec.texture_amplitude * tex, 0.1)[None]
    if spec.gain_jitter > 0:
        cube *= rng.uniform(1.0 - spec.gain_jitter, 1.0 + spec.gain_jitter)
    return cube


def generate_scene(spec: SceneSpec, layout: MosaicLayout = DEFAULT_LAYOUT,
                   cmf: Optional[CmfTable] = None) -> DatasetSample:
    """Render one paired sample; fully determined by ``spec``."""
    cmf = cmf or cie1931()
    grid = spec.grid
    if grid[0] < cmf.wavelengths_nm[0] or grid[-1] > cmf.wavelengths_nm[-1]:
        raise ValueError("scene grid must lie inside the CMF grid")
    cube = radiance_cube(spec, cmf)
    sub = np.interp(grid, cmf.wavelengths_nm, cmf.xbar), np.interp(grid, cmf.wavelengths_nm, cmf.ybar), \
        np.interp(grid, cmf.wavelengths_nm, cmf.zbar)
    table = CmfTable(grid, *sub, rgb_matrix=cmf.rgb_matrix)
    rgb = xyz_to_rgb(spectra_to_xyz(cube, table), table)
    bands = np.tensordot(band_responses(layout, grid, spec.band_fwhm_nm), cube, axes=1)
    k = layout.block
    raw = np.zeros((spec.height, spec.width))
    for band, (r, c) in enumerate(layout.position_of_band):
        raw[r::k, c::k] = bands[band, r::k, c::k]
    return DatasetSample(
        raw=np.clip(raw, 0.0, 1.0).astype(np.float32),
        hr_rgb=np.clip(rgb, 0.0, 1.0).astype(np.float32),
        id=f"seed{spec.seed}",
    )


def split_sizes(n: int) -> tuple:
    """(train, val, test) counts in the 250/25/21 proportions, each >= 1."""
    if n < 3:
        raise ValueError(f"need at least 3 samples to split, got {n}")
    n_val = max(1, int(round(n * SPLIT_FRACTIONS[1])))
    n_test = max(1, int(round(n * SPLIT_FRACTIONS[2])))
    return n - n_val - n_test, n_val, n_test


def make_split(n: int, seed: int = 0) -> tuple:
    """Disjoint, exhaustive (train, val, test) index lists, shuffled by seed."""
    n_train, n_val, _ = split_sizes(n)
    perm = np.random.default_rng(seed).permutation(n)
    train = sorted(int(i) for i in perm[:n_train])
    val = sorted(int(i) for i in perm[n_train:n_train + n_val])
    test = sorted(int(i) for i in perm[n_train + n_val:])
    return train, val, test


def apply_transform(ms: np.ndarray, target: np.ndarray, top: int, left: int, crop: int,
                    rot_k: int = 0, flip: bool = False):
    """Crop both tensors at (top, left), then rotate by ``rot_k`` quarter
    turns and optionally mirror horizontally, identically.

    Band identity is kept per channel; with a block-aligned square crop
    every 4x4 block maps onto a 4x4 block, so each pixel still carries
    exactly one band sample.
    """
    sl = (slice(None), slice(top, top + crop), slice(left, left + crop))
    a, b = ms[sl], target[sl]
    if a.shape[1:] != (crop, crop) or b.shape[1:] != (crop, crop):
        raise DimensionError(f"crop {crop} at ({top}, {left}) exceeds image {ms.shape[1:]}")
    if rot_k:
        a, b = np.rot90(a, rot_k, axes=(1, 2)), np.rot90(b, rot_k, axes=(1, 2))
    if flip:
        a, b = a[:, :, ::-1], b[:, :, ::-1]
    return np.ascontiguousarray(a), np.ascontiguousarray(b)


def augment(ms: np.ndarray, target: np.ndarray, rng: np.random.Generator, crop: int = 120, block: int = 4):
    """Random block-aligned crop, quarter-turn rotation (p = 1/4 each) and
    horizontal flip (p = 1/2)."""
    _, h, w = ms.shape
    if h < crop or w < crop:
        raise DimensionError(f"image {h}x{w} smaller than crop {crop}")
    if crop % block:
        raise DimensionError(f"crop {crop} must be a multiple of the mosaic block {block}")
    top = block * int(rng.integers(0, (h - crop) // block + 1))
    left = block * int(rng.integers(0, (w - crop) // block + 1))
    rot_k = int(rng.integers(0, 4))
    flip = bool(rng.random() < 0.5)
    return apply_transform(ms, target, top, left, crop, rot_k, flip)


# ----------------------------------------------------------------------------
# dataset directories


def sample_dirname(i: int) -> str:
    return f"sample_{i:04d}"


def write_sample(directory, sample: DatasetSample, spec: Optional[SceneSpec] = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    msio.write_msrt(d / "raw.msrt", sample.raw)
    msio.write_msrt(d / "hr_rgb.msrt", sample.hr_rgb)
    if sample.mask is not None:
        msio.write_msrt(d / "mask.msrt", sample.mask.astype(np.float32))
    meta = f"id={sample.id}\n" + (spec.to_text() if spec is not None else "")
    (d / "meta.txt").write_text(meta)


def read_sample(directory) -> DatasetSample:
    d = Path(directory)
    meta = dict(line.split("=", 1) for line in (d / "meta.txt").read_text().splitlines() if "=" in line)
    mask = msio.read_msrt(d / "mask.msrt") > 0.5 if (d / "mask.msrt").exists() else None
    return DatasetSample(msio.read_msrt(d / "raw.msrt"), msio.read_msrt(d / "hr_rgb.msrt"), mask,
                         meta.get("id", d.name))


def write_splits(root, splits) -> None:
    names = ("train", "val", "test")
    text = "".join(f"{name}=" + " ".join(map(str, idx)) + "\n" for name, idx in zip(names, splits))
    Path(root, "splits.txt").write_text(text)


def read_splits(root) -> dict:
    out = {}
    for line in Path(root, "splits.txt").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = [int(t) for t in v.split()]
    return out


def generate_dataset(root, count: int, height: int, width: int, seed: int = 0, **spec_kw) -> dict:
    """Write ``count`` scenes plus a split manifest under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        spec = SceneSpec(seed=seed * 100003 + i, height=height, width=width, **spec_kw)
        write_sample(root / sample_dirname(i), generate_scene(spec), spec)
    splits = make_split(count, seed)
    write_splits(root, splits)
    return dict(zip(("train", "val", "test"), splits))


class Dataset:
    """A dataset directory loaded into memory."""

    def __init__(self, root):
        self.root = Path(root)
        self.splits = read_splits(self.root)
        n = sum(len(v) for v in self.splits.values())
        self.samples = [read_sample(self.root / sample_dirname(i)) for i in range(n)]

    def split(self, name: str) -> list:
        return [self.samples[i] for i in self.splits.get(name, [])]
