"""Texture-sensitive residual channel attention network.

Layout of the parameter store (``g`` groups, ``b`` blocks, ``c`` features)::

    head.0, head.1                       3x3 convs, in -> c -> c
    body.{i}.rcab.{j}.conv1/conv2        3x3 convs inside each RCAB
    body.{i}.rcab.{j}.ca.down/ca.up      1x1 convs, c -> c/r -> c
    body.{i}.conv                        3x3 conv closing group i
    up.conv                              compact mode only: 3x3 c -> 16c, then x4 shuffle
    tail                                 3x3 conv c -> 3            (gives SR')
    tn.conv1 / tn.bn1                    7x7 stride-2 conv 3 -> 64, batch norm
    tn.block.conv{1,2} / tn.block.bn{1,2}  basic residual block at 1/4 resolution
    tn.deconv                            8x8 stride-4 transposed conv 64 -> k
    fuse                                 3x3 conv (k + 3) -> 3      (gives SR)

The texture branch sees SR' (after ReLU/pooling at 1/4 scale) and the
fusion conv sees ``concat(texture, SR')``.
"""

from __future__ import annotations

import zipfile
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from . import io as msio
from . import tensor as T
from .tensor import BatchNormState, Tensor

TN_WIDTH = 64
TN_STEM_KERNEL = 7
DECONV_KERNEL, DECONV_STRIDE, DECONV_PAD = 8, 4, 2
MODES = ("zero_padded", "compact")
ARCHS = ("tsrcan", "rcan")
FUSION_INITS = ("passthrough", "he")


@dataclass(frozen=True)
class ModelConfig:
    groups: int = 5
    blocks: int = 3
    channels: int = 64
    reduction: int = 16
    texture_channels: int = 256
    in_channels: int = 16
    out_channels: int = 3
    mode: str = "zero_padded"
    compact_upscale: int = 4
    arch: str = "tsrcan"
    fusion_init: str = "passthrough"

    def __post_init__(self):
        if self.groups < 1 or self.blocks < 1 or self.texture_channels < 1:
            raise ValueError("groups, blocks and texture_channels must be >= 1")
        if self.channels < 1 or self.reduction < 1 or self.channels % self.reduction:
            raise ValueError(f"channels ({self.channels}) must be a multiple of reduction ({self.reduction})")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}")
        if self.fusion_init not in FUSION_INITS:
            raise ValueError(f"fusion_init must be one of {FUSION_INITS}")
        if self.compact_upscale < 1:
            raise ValueError("compact_upscale must be >= 1")

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, kv: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in kv.items():
            if k not in known:
                continue
            out[k] = v if k in ("mode", "arch", "fusion_init") else int(v)
        return cls(**out)


class ParamStore(OrderedDict):
    """Named parameter tensors (insertion-ordered) plus batch-norm buffers."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.buffers: "OrderedDict[str, BatchNormState]" = OrderedDict()

    def zero_grad(self):
        for p in self.values():
            p.zero_grad()

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.values()))

    def copy(self) -> "ParamStore":
        out = ParamStore((k, Tensor(v.data.copy(), requires_grad=True, dtype=v.dtype)) for k, v in self.items())
        for k, st in self.buffers.items():
            ns = BatchNormState(len(st.running_mean), st.momentum, st.eps)
            ns.running_mean = st.running_mean.copy()
            ns.running_var = st.running_var.copy()
            out.buffers[k] = ns
        return out

    def astype(self, dtype) -> "ParamStore":
        """Copy with parameters cast (used for the float64 gradient-check path)."""
        out = self.copy()
        for k, v in out.items():
            out[k] = Tensor(v.data.astype(dtype), requires_grad=True, dtype=dtype)
        return out


def _conv_spec(cfg: ModelConfig):
    """Ordered (name, shape, has_bias) for every weight in the network."""
    c, k = cfg.channels, cfg.texture_channels
    cr = c // cfg.reduction
    spec = [("head.0", (c, cfg.in_channels, 3, 3), True), ("head.1", (c, c, 3, 3), True)]
    for i in range(cfg.groups):
        for j in range(cfg.blocks):
            p = f"body.{i}.rcab.{j}"
            spec += [
                (f"{p}.conv1", (c, c, 3, 3), True),
                (f"{p}.conv2", (c, c, 3, 3), True),
                (f"{p}.ca.down", (cr, c, 1, 1), True),
                (f"{p}.ca.up", (c, cr, 1, 1), True),
            ]
        spec.append((f"body.{i}.conv", (c, c, 3, 3), True))
    if cfg.mode == "compact":
        s = cfg.compact_upscale
        spec.append(("up.conv", (c * s * s, c, 3, 3), True))
    spec.append(("tail", (cfg.out_channels, c, 3, 3), True))
    if cfg.arch == "tsrcan":
        spec += [
            ("tn.conv1", (TN_WIDTH, cfg.out_channels, TN_STEM_KERNEL, TN_STEM_KERNEL), False),
            ("tn.block.conv1", (TN_WIDTH, TN_WIDTH, 3, 3), False),
            ("tn.block.conv2", (TN_WIDTH, TN_WIDTH, 3, 3), False),
            ("tn.deconv", (TN_WIDTH, k, DECONV_KERNEL, DECONV_KERNEL), True),
            ("fuse", (cfg.out_channels, k + cfg.out_channels, 3, 3), True),
        ]
    return spec


_BATCHNORMS = ("tn.bn1", "tn.block.bn1", "tn.block.bn2")


def build(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    """Initialise every parameter: He fan-in normal weights, zero biases,
    unit/zero batch-norm affine terms.

    With ``fusion_init='passthrough'`` the fusion conv starts as the identity
    on SR', so an untrained TSRCAN predicts exactly what its RCAN trunk does
    and the texture branch only enters as it learns something useful.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape, has_bias in _conv_spec(cfg):
        if name == "tn.deconv":
            # Each output of a stride-s transposed conv sees cin * (k/s)^2 inputs.
            fan_in = shape[0] * (shape[2] // DECONV_STRIDE) * (shape[3] // DECONV_STRIDE)
            bias_len = shape[1]
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            bias_len = shape[0]
        w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        store[f"{name}.weight"] = Tensor(w.astype(np.float32), requires_grad=True)
        if has_bias:
            store[f"{name}.bias"] = Tensor(np.zeros(bias_len, np.float32), requires_grad=True)
    if cfg.arch == "tsrcan":
        for bn in _BATCHNORMS:
            store[f"{bn}.gamma"] = Tensor(np.ones(TN_WIDTH, np.float32), requires_grad=True)
            store[f"{bn}.beta"] = Tensor(np.zeros(TN_WIDTH, np.float32), requires_grad=True)
            store.buffers[bn] = BatchNormState(TN_WIDTH)
        if cfg.fusion_init == "passthrough":
            fusion_passthrough(store, cfg)
    return store


def fusion_passthrough(store: ParamStore, cfg: ModelConfig) -> None:
    """Set the fusion conv to copy the SR' channels and ignore the texture maps."""
    k = cfg.texture_channels
    w = np.zeros_like(store["fuse.weight"].data)
    for o in range(cfg.out_channels):
        w[o, k + o, 1, 1] = 1.0
    store["fuse.weight"].data[...] = w
    store["fuse.bias"].data[...] = 0.0


def _conv(x, p, name, pad=1, stride=1):
    return T.conv2d(x, p[f"{name}.weight"], p.get(f"{name}.bias"), stride=stride, pad=pad)


def channel_attention(u: Tensor, p: ParamStore, prefix: str) -> Tensor:
    """Squeeze (global mean), bottleneck, expand, sigmoid gate."""
    s = T.global_avg_pool(u)
    s = T.relu(_conv(s, p, f"{prefix}.down", pad=0))
    s = T.sigmoid(_conv(s, p, f"{prefix}.up", pad=0))
    return T.scale_channels(u, s)


def rcab_forward(x: Tensor, p: ParamStore, prefix: str) -> Tensor:
    """x + CA(conv(relu(conv(x))))"""
    u = _conv(T.relu(_conv(x, p, f"{prefix}.conv1")), p, f"{prefix}.conv2")
    return T.add(x, channel_attention(u, p, f"{prefix}.ca"))


def _as_input(x, cfg: ModelConfig) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise T.DimensionError(f"expected (N, {cfg.in_channels}, H, W) input, got {x.shape}")
    return x


def rcan_forward(x, p: ParamStore, cfg: ModelConfig) -> Tensor:
    """Head, residual groups with long skip, optional x4 sub-pixel stage, tail."""
    x = _as_input(x, cfg)
    head = _conv(_conv(x, p, "head.0"), p, "head.1")
    h = head
    for i in range(cfg.groups):
        g = h
        for j in range(cfg.blocks):
            g = rcab_forward(g, p, f"body.{i}.rcab.{j}")
        h = T.add(h, _conv(g, p, f"body.{i}.conv"))
    h = T.add(h, head)
    if cfg.mode == "compact":
        h = T.depth_to_space(_conv(h, p, "up.conv"), cfg.compact_upscale)
    return _conv(h, p, "tail")


def _bn(x, p, name, training):
    return T.batchnorm2d(x, p[f"{name}.gamma"], p[f"{name}.beta"], p.buffers[name], training)


def texture_forward(sr_prime: Tensor, p: ParamStore, training: bool = False) -> Tensor:
    """ResNet-18 stem + first basic block, then a transposed conv back to full size."""
    h = T.conv2d(sr_prime, p["tn.conv1.weight"], None, stride=2, pad=TN_STEM_KERNEL // 2)
    h = T.relu(_bn(h, p, "tn.bn1", training))
    h = T.maxpool2d(h, 3, 2, pad=1)
    r = T.relu(_bn(T.conv2d(h, p["tn.block.conv1.weight"], None, pad=1), p, "tn.block.bn1", training))
    r = _bn(T.conv2d(r, p["tn.block.conv2.weight"], None, pad=1), p, "tn.block.bn2", training)
    h = T.relu(T.add(r, h))
    return T.conv_transpose2d(h, p["tn.deconv.weight"], p["tn.deconv.bias"],
                              stride=DECONV_STRIDE, pad=DECONV_PAD)


def tsrcan_forward(x, p: ParamStore, cfg: ModelConfig, training: bool = False):
    """Returns ``(sr_prime, sr, texture)``; for ``arch='rcan'`` ``sr`` is
    ``sr_prime`` and ``texture`` is None."""
    sr_prime = rcan_forward(x, p, cfg)
    if cfg.arch == "rcan":
        return sr_prime, sr_prime, None
    texture = texture_forward(sr_prime, p, training)
    if texture.shape[2:] != sr_prime.shape[2:]:
        raise T.DimensionError(
            f"texture branch produced {texture.shape[2:]} for {sr_prime.shape[2:]}; "
            "output dims must be multiples of 4")
    sr = _conv(T.concat_channels(texture, sr_prime), p, "fuse")
    return sr_prime, sr, texture


def loss(sr_prime: Tensor, sr: Tensor, target) -> Tensor:
    """Smooth-L1 of SR' plus smooth-L1 of SR, both against the target."""
    return T.add(T.smooth_l1(sr_prime, target), T.smooth_l1(sr, target))


def model_loss(outputs, target, cfg: ModelConfig) -> Tensor:
    sr_prime, sr, _ = outputs
    if cfg.arch == "rcan":
        return T.smooth_l1(sr_prime, target)
    return loss(sr_prime, sr, target)


def predict(x, p: ParamStore, cfg: ModelConfig, batch: int = 4) -> np.ndarray:
    """Eval-mode SR output for a (N, C, H, W) array, clipped to [0, 1]."""
    x = np.asarray(x, dtype=np.float32)
    outs = []
    with T.no_grad():
        for i in range(0, len(x), batch):
            _, sr, _ = tsrcan_forward(x[i:i + batch], p, cfg, training=False)
            outs.append(sr.data)
    return np.clip(np.concatenate(outs), 0.0, 1.0)


def output_shapes(cfg: ModelConfig, input_shape) -> dict:
    """Shape arithmetic for a forward pass, without computing it."""
    n, cin, h, w = input_shape
    if cin != cfg.in_channels:
        raise T.DimensionError(f"expected {cfg.in_channels} input channels, got {cin}")
    if cfg.mode == "compact":
        h, w = h * cfg.compact_upscale, w * cfg.compact_upscale
    shapes = {"sr_prime": (n, cfg.out_channels, h, w)}
    if cfg.arch == "tsrcan":
        def conv(s, k, st, pd):
            return (s + 2 * pd - k) // st + 1
        th = conv(conv(h, TN_STEM_KERNEL, 2, TN_STEM_KERNEL // 2), 3, 2, 1)
        tw = conv(conv(w, TN_STEM_KERNEL, 2, TN_STEM_KERNEL // 2), 3, 2, 1)
        th = (th - 1) * DECONV_STRIDE - 2 * DECONV_PAD + DECONV_KERNEL
        tw = (tw - 1) * DECONV_STRIDE - 2 * DECONV_PAD + DECONV_KERNEL
        shapes["texture"] = (n, cfg.texture_channels, th, tw)
        shapes["concat"] = (n, cfg.texture_channels + cfg.out_channels, th, tw)
    shapes["sr"] = (n, cfg.out_channels, h, w)
    return shapes


@dataclass
class GradCheckResult:
    """One spot-checked coordinate: analytic (float32) vs numeric (float64)."""

    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return float(T.relative_error(self.analytic, self.numeric, floor=GRADCHECK_FLOOR))


GRADCHECK_FLOOR = 1e-6


def gradient_spot_check(cfg: ModelConfig, coords: int = 20, seed: int = 0, size: int = 16,
                        eps: float = 1e-5) -> list:
    """Compare float32 backprop against float64 central differences at
    ``coords`` random parameter coordinates of the full training loss.

    Coordinates are drawn by first choosing a tensor uniformly, then an entry,
    so small tensors (biases, batch-norm terms) are not drowned out by the
    large conv kernels.
    """
    rng = np.random.default_rng(seed)
    params = build(cfg, seed)
    x = rng.random((1, cfg.in_channels, size, size)).astype(np.float32)
    y = rng.random(output_shapes(cfg, x.shape)["sr"]).astype(np.float32)
    shadow = params.astype(np.float64)
    model_loss(tsrcan_forward(x, params, cfg, training=True), y, cfg).backward()

    def shadow_loss():
        with T.float64_mode():
            out = tsrcan_forward(Tensor(x.astype(np.float64)), shadow, cfg, training=True)
            return model_loss(out, Tensor(y.astype(np.float64)), cfg)

    names = list(params)
    results = []
    for _ in range(coords):
        name = names[int(rng.integers(len(names)))]
        index = tuple(int(rng.integers(n)) for n in params[name].shape)
        numeric = T.numerical_gradient(shadow_loss, shadow[name], index, eps=eps)
        results.append(GradCheckResult(name, index, float(params[name].grad[index]), numeric))
    return results


# ----------------------------------------------------------------------------
# checkpoints: zip of MSRT tensors + key=value manifest


def save_checkpoint(path, p: ParamStore, cfg: ModelConfig, seed: int, extra: Optional[dict] = None) -> None:
    manifest = cfg.to_text() + f"seed={seed}\n"
    for k, v in (extra or {}).items():
        manifest += f"{k}={v}\n"
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.txt", manifest)
        for name, t in p.items():
            zf.writestr(f"params/{name}.msrt", msio.encode_msrt(t.data))
        for name, st in p.buffers.items():
            zf.writestr(f"buffers/{name}.running_mean.msrt", msio.encode_msrt(st.running_mean))
            zf.writestr(f"buffers/{name}.running_var.msrt", msio.encode_msrt(st.running_var))


def parse_manifest(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def load_checkpoint(path):
    """Returns ``(params, config, manifest)``."""
    with zipfile.ZipFile(path) as zf:
        manifest = parse_manifest(zf.read("manifest.txt").decode())
        cfg = ModelConfig.from_mapping(manifest)
        store = build(cfg, seed=0)
        for name in store:
            store[name].data[...] = msio.decode_msrt(zf.read(f"params/{name}.msrt"))
        for name, st in store.buffers.items():
            st.running_mean = msio.decode_msrt(zf.read(f"buffers/{name}.running_mean.msrt"))
            st.running_var = msio.decode_msrt(zf.read(f"buffers/{name}.running_var.msrt"))
    return store, cfg, manifest
