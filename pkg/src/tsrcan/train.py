"""Adam, the step learning-rate schedule, and the training loop with
validation-based model selection."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import model as M
from .data import DatasetSample, augment
from .chroma import baseline_pipeline, degenerate_channels, white_balance
from .metrics import MetricReport, aggregate, evaluate_pair, psnr
from .mosaic import DEFAULT_LAYOUT, MosaicLayout, compact_from_zero_padded, demux_zero_padded

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 10
    lr0: float = 1e-4
    halve_every: int = 2500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 5000
    seed: int = 0
    validate_every: int = 1
    crop: int = 120  # 0 trains on whole, untransformed images

    def __post_init__(self):
        for name in ("batch_size", "lr0", "halve_every", "eps", "epochs", "validate_every"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.crop < 0:
            raise ValueError("crop must be >= 0")

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, kv: dict) -> "TrainConfig":
        out = {}
        for k, default in asdict(cls()).items():
            if k in kv:
                out[k] = type(default)(kv[k])
        return cls(**out)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: M.ParamStore, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update of every parameter, then zero the grads."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient; run backward() first")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.grad = np.zeros_like(p.data)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Initial rate halved every ``halve_every`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * 0.5 ** (epoch // cfg.halve_every)


def network_input(raw: np.ndarray, cfg: M.ModelConfig, layout: MosaicLayout = DEFAULT_LAYOUT) -> np.ndarray:
    """(16, H, W) zero-padded, or (16, H/4, W/4) compact, per ``cfg.mode``."""
    ms = demux_zero_padded(raw, layout)
    return compact_from_zero_padded(ms, layout.block) if cfg.mode == "compact" else ms


def make_batch(samples: Sequence[DatasetSample], cfg: M.ModelConfig, tcfg: TrainConfig,
               rng: Optional[np.random.Generator], layout: MosaicLayout = DEFAULT_LAYOUT):
    xs, ys = [], []
    for s in samples:
        ms = demux_zero_padded(s.raw, layout)
        target = s.hr_rgb
        if tcfg.crop and rng is not None:
            ms, target = augment(ms, target, rng, crop=tcfg.crop, block=layout.block)
        if cfg.mode == "compact":
            ms = compact_from_zero_padded(ms, layout.block)
        xs.append(ms)
        ys.append(target)
    return np.stack(xs).astype(np.float32), np.stack(ys).astype(np.float32)


def predict_samples(samples: Sequence[DatasetSample], params: M.ParamStore, cfg: M.ModelConfig,
                    layout: MosaicLayout = DEFAULT_LAYOUT) -> list:
    xs = np.stack([network_input(s.raw, cfg, layout) for s in samples])
    return list(M.predict(xs, params, cfg))


def mean_psnr(samples: Sequence[DatasetSample], params: M.ParamStore, cfg: M.ModelConfig) -> float:
    preds = predict_samples(samples, params, cfg)
    return float(np.mean([psnr(p, s.hr_rgb, s.mask) for p, s in zip(preds, samples)]))


@dataclass
class FitResult:
    params: M.ParamStore
    best_epoch: int
    best_val_psnr: float
    history: list  # rows of (epoch, lr, loss, val_psnr)

    def history_csv(self) -> str:
        lines = ["epoch,lr,loss,val_psnr"]
        lines += [f"{e},{lr!r},{loss!r},{v!r}" for e, lr, loss, v in self.history]
        return "\n".join(lines) + "\n"


def train_step(params, state, cfg, tcfg, x, y, lr) -> float:
    out = M.tsrcan_forward(x, params, cfg, training=True)
    loss = M.model_loss(out, y, cfg)
    value = float(loss.data)
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value} at Adam step {state.t + 1}")
    loss.backward()
    adam_step(params, state, lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    return value


def fit(cfg: M.ModelConfig, tcfg: TrainConfig, train: Sequence[DatasetSample], val: Sequence[DatasetSample],
        out_dir=None, params: Optional[M.ParamStore] = None,
        on_epoch: Optional[Callable[[tuple], None]] = None) -> FitResult:
    """Train from scratch (or from ``params``) and keep the parameters with
    the best validation PSNR.

    With ``out_dir`` the best checkpoint is written to ``best.ckpt`` and the
    history to ``history.csv`` as training proceeds.
    """
    if not train or not val:
        raise ValueError("fit needs non-empty train and validation splits")
    rng = np.random.default_rng(tcfg.seed)
    params = params if params is not None else M.build(cfg, tcfg.seed)
    state = AdamState()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    best, best_epoch, best_psnr = None, -1, -math.inf
    history = []
    for epoch in range(tcfg.epochs):
        lr = lr_at(epoch, tcfg)
        order = rng.permutation(len(train))
        losses = []
        for i in range(0, len(order), tcfg.batch_size):
            batch = [train[j] for j in order[i:i + tcfg.batch_size]]
            x, y = make_batch(batch, cfg, tcfg, rng)
            try:
                losses.append(train_step(params, state, cfg, tcfg, x, y, lr))
            except FloatingPointError as exc:
                raise FloatingPointError(f"epoch {epoch}: {exc}") from None
        val_psnr = math.nan
        last = epoch == tcfg.epochs - 1
        if (epoch + 1) % tcfg.validate_every == 0 or last:
            val_psnr = mean_psnr(val, params, cfg)
            if val_psnr > best_psnr:
                best, best_epoch, best_psnr = params.copy(), epoch, val_psnr
                if out is not None:
                    M.save_checkpoint(out / "best.ckpt", best, cfg, tcfg.seed,
                                      {"epoch": epoch, "val_psnr": repr(val_psnr)})
        row = (epoch, lr, float(np.mean(losses)), val_psnr)
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        log.debug("epoch %d lr %.3g loss %.6f val %.3f", *row)
    result = FitResult(best, best_epoch, best_psnr, history)
    if out is not None:
        (out / "history.csv").write_text(result.history_csv())
    return result


def baseline_predictions(samples: Sequence[DatasetSample], layout: MosaicLayout = DEFAULT_LAYOUT):
    """Bicubic + CMF, white-balanced, back on the [0, 1] scale.  Also returns
    one note per degenerate (constant) channel."""
    preds, notes = [], []
    for s in samples:
        rgb = baseline_pipeline(s.raw, layout)
        for c in degenerate_channels(rgb):
            notes.append(f"{s.id}: channel {'RGB'[c]} constant before white balance, scored as zeros")
        preds.append((white_balance(rgb) / 255.0).astype(np.float32))
    return preds, notes


def evaluate_predictions(preds, samples: Sequence[DatasetSample], masks=None) -> MetricReport:
    """Score each prediction against its sample's ground truth.  ``masks``
    overrides the masks stored with the samples."""
    rows = []
    for i, (pred, s) in enumerate(zip(preds, samples)):
        mask = masks[i] if masks is not None else s.mask
        rows.append(evaluate_pair(pred, s.hr_rgb, mask))
    return aggregate(rows, [s.id for s in samples])


ABLATION_COLUMNS = ("groups", "parameters", "best_epoch", "val_psnr_db", "test_psnr_db", "test_ssim")


def ablate_size(base: M.ModelConfig, tcfg: TrainConfig, train: Sequence[DatasetSample],
                val: Sequence[DatasetSample], test: Sequence[DatasetSample],
                groups: Sequence[int] = (3, 4, 5, 6, 7), out_dir=None, log_fn=None) -> list:
    """Train one RCAN per residual-group count with the same seed and data.

    Returns one row per group count, columns as in ``ABLATION_COLUMNS``.
    """
    rows = []
    for g in groups:
        cfg = base.replace(groups=int(g), arch="rcan")
        run_dir = Path(out_dir) / f"g{g}" if out_dir is not None else None
        res = fit(cfg, tcfg, train, val, out_dir=run_dir)
        report = evaluate_predictions(predict_samples(test, res.params, cfg), test)
        row = (int(g), res.params.num_parameters(), res.best_epoch, res.best_val_psnr,
               report.mean[0], report.mean[1])
        rows.append(row)
        if log_fn is not None:
            log_fn(row)
    return rows


def ablation_csv(rows) -> str:
    lines = [",".join(ABLATION_COLUMNS)]
    lines += [",".join(repr(v) if isinstance(v, int) else repr(float(v)) for v in row) for row in rows]
    return "\n".join(lines) + "\n"
