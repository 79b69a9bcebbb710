"""Evaluation protocol: PSNR, SSIM, per-channel SID, aggregation, and the
forward/backward optical-flow consistency mask.

Conventions fixed here:

* images are (3, H, W) RGB in [0, 1]; PSNR and SSIM work on the 255 scale;
* PSNR uses a single MSE over all three channels, capped at 100 dB;
* SSIM is computed on luma (0.299 R + 0.587 G + 0.114 B) with the 11x11
  Gaussian window (sigma 1.5) over valid window positions only;
* SID is the symmetric KL divergence between each channel's spatial
  intensity distributions; columns are ordered blue, green, red;
* ``mask`` arguments are keep-masks: True marks pixels that are scored.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError

PSNR_CAP_DB = 100.0
SID_FLOOR = 1e-12
LUMA = np.array([0.299, 0.587, 0.114])
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2, SSIM_L = 0.01, 0.03, 255.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[0] != 3:
        raise DimensionError(f"expected (3, H, W) images, got {a.shape}")
    return a, b


def _keep(mask, shape) -> Optional[np.ndarray]:
    if mask is None:
        return None
    m = np.asarray(mask).astype(bool)
    if m.shape != shape:
        raise DimensionError(f"mask shape {m.shape} does not match image {shape}")
    if not m.any():
        raise ValueError("mask excludes every pixel")
    return m


def psnr(a, b, mask=None) -> float:
    """Peak signal-to-noise ratio in dB of two [0, 1] images on the 255 scale."""
    a, b = _pair(a, b)
    m = _keep(mask, a.shape[1:])
    sq = ((a - b) * 255.0) ** 2
    mse = sq.mean() if m is None else sq[:, m].mean()
    if mse == 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 20.0 * math.log10(255.0 / math.sqrt(mse)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def luma(img) -> np.ndarray:
    return np.tensordot(LUMA, np.asarray(img, dtype=np.float64), axes=1)


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Local SSIM of two single-plane 255-scale images at valid window positions."""
    win = gaussian_window()
    k = win.shape[0]
    if x.shape[0] < k or x.shape[1] < k:
        raise DimensionError(f"image {x.shape} smaller than the {k}x{k} SSIM window")

    def filt(img):
        return np.einsum("ijkl,kl->ij", sliding_window_view(img, (k, k)), win)

    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(a, b, mask=None) -> float:
    """Mean structural similarity on luma.  With a mask, only windows whose
    centre pixel is kept are averaged."""
    a, b = _pair(a, b)
    m = _keep(mask, a.shape[1:])
    smap = ssim_map(luma(a) * 255.0, luma(b) * 255.0)
    if m is None:
        return float(smap.mean())
    r = SSIM_WINDOW // 2
    centres = m[r:r + smap.shape[0], r:r + smap.shape[1]]
    if not centres.any():
        raise ValueError("mask keeps no SSIM window centre")
    return float(smap[centres].mean())


_CHANNEL_NAMES = ("red", "green", "blue")


def _distribution(v: np.ndarray, channel: int, which: str) -> np.ndarray:
    if not np.any(v):
        raise ValueError(f"SID: {which} image has an all-zero {_CHANNEL_NAMES[channel]} channel")
    v = np.maximum(v, SID_FLOOR)
    return v / v.sum()


def sid(p: np.ndarray, q: np.ndarray) -> float:
    """Symmetric KL divergence of two probability vectors."""
    return float(np.sum(p * np.log(p / q)) + np.sum(q * np.log(q / p)))


def sid_per_channel(a, b, mask=None) -> tuple:
    """Per-channel spectral information divergence, returned (blue, green, red)."""
    a, b = _pair(a, b)
    m = _keep(mask, a.shape[1:])
    out = []
    for c in (2, 1, 0):
        va, vb = a[c].ravel(), b[c].ravel()
        if m is not None:
            va, vb = a[c][m], b[c][m]
        out.append(sid(_distribution(va, c, "first"), _distribution(vb, c, "second")))
    return tuple(out)


COLUMNS = ("psnr_db", "ssim", "sid_blue", "sid_green", "sid_red")
CONVENTIONS = ("PSNR from one MSE over R, G and B; SSIM on luma; SID per channel; "
               "std is the population std")


@dataclass
class MetricReport:
    """Per-image rows plus column mean and population standard deviation."""

    per_image: list = field(default_factory=list)
    ids: list = field(default_factory=list)
    mean: tuple = ()
    std: tuple = ()
    notes: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("id",) + COLUMNS)
        for ident, row in zip(self.ids, self.per_image):
            w.writerow((ident,) + tuple(repr(float(v)) for v in row))
        w.writerow(("mean",) + tuple(repr(float(v)) for v in self.mean))
        w.writerow(("std",) + tuple(repr(float(v)) for v in self.std))
        return buf.getvalue()

    def to_table(self, method: str = "") -> str:
        """Two-line summary in the mean / (std) layout of a results table."""
        head = f"{'Method':<16}{'PSNR (dB)':>11}{'SSIM':>9}{'SID Blue':>12}{'SID Green':>12}{'SID Red':>12}"
        mean = f"{method:<16}{self.mean[0]:>11.3f}{self.mean[1]:>9.3f}" + "".join(f"{v:>12.3e}" for v in self.mean[2:])
        std = (f"{'':<16}{'(' + format(self.std[0], '.2f') + ')':>11}{'(' + format(self.std[1], '.3f') + ')':>9}"
               + "".join(f"{'(' + format(v, '.2e') + ')':>12}" for v in self.std[2:]))
        lines = [head, mean, std]
        lines += [f"note: {n}" for n in self.notes]
        lines.append(f"conventions: {CONVENTIONS}")
        return "\n".join(lines) + "\n"


def evaluate_pair(pred, target, mask=None) -> tuple:
    return (psnr(pred, target, mask), ssim(pred, target, mask)) + sid_per_channel(pred, target, mask)


def aggregate(rows: Sequence[Sequence[float]], ids: Optional[Sequence[str]] = None) -> MetricReport:
    if len(rows) == 0:
        raise ValueError("aggregate needs at least one image")
    arr = np.asarray(rows, dtype=np.float64)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(rows))]
    return MetricReport(
        per_image=[tuple(map(float, r)) for r in arr],
        ids=ids,
        mean=tuple(map(float, arr.mean(axis=0))),
        std=tuple(map(float, arr.std(axis=0))),
    )


def bilinear_sample(field: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Sample (C, H, W) at float pixel coordinates; returns values and an
    in-bounds flag (coordinates must lie in [0, W-1] x [0, H-1])."""
    c, h, w = field.shape
    inside = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    x = np.clip(xs, 0, w - 1)
    y = np.clip(ys, 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    out = (field[:, y0, x0] * (1 - fx) * (1 - fy) + field[:, y0, x1] * fx * (1 - fy)
           + field[:, y1, x0] * (1 - fx) * fy + field[:, y1, x1] * fx * fy)
    return out, inside


def flow_consistency_error(flow_fw, flow_bw):
    """Round-trip error |fw(p) + bw(p + fw(p))| and the in-bounds flag.

    Flows are (2, H, W) in pixels, channel 0 horizontal and 1 vertical.
    """
    fw = np.asarray(flow_fw, dtype=np.float64)
    bw = np.asarray(flow_bw, dtype=np.float64)
    if fw.shape != bw.shape or fw.ndim != 3 or fw.shape[0] != 2:
        raise DimensionError(f"flows must both be (2, H, W); got {fw.shape} and {bw.shape}")
    _, h, w = fw.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    back, inside = bilinear_sample(bw, xs + fw[0], ys + fw[1])
    err = np.hypot(fw[0] + back[0], fw[1] + back[1])
    return err, inside


def occlusion_mask(flow_fw, flow_bw, threshold_px: float = 3.0) -> np.ndarray:
    """Keep-mask (H, W): False where the round trip misses by more than
    ``threshold_px`` or the forward flow leaves the frame."""
    err, inside = flow_consistency_error(flow_fw, flow_bw)
    return inside & ~(err > threshold_px)
