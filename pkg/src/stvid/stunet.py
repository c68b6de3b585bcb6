"""Toy image U-Net and its space-time inflation.

The image model is a small class-conditioned denoising U-Net. :func:`inflate`
turns it into a space-time U-Net: the image weights are copied and frozen and
new temporal modules are interleaved with them:

* a temporal convolution block after every spatial residual block outside the
  coarsest level (factorized space-time convolution),
* ``attn_blocks_coarsest`` temporal self-attention blocks at the coarsest level,
* a temporal down-sampler after each spatial down-sampler entering a level in
  ``temporal_levels``, and a temporal up-sampler after the matching spatial
  up-sampler.

Temporal blocks end in a zero-initialised projection and the resamplers start
out as exact nearest-neighbour resizes, so on clips that are constant in time
the inflated network reproduces the image network frame by frame.

Arrays at the public boundary are channels-last (``[T, H, W, C]`` for clips and
``[N, H, W, C]`` for image batches); activations inside are ``[T, C, H, W]``.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass(frozen=True)
class T2IConfig:
    levels: int = 3
    base_channels: int = 16
    channel_mult: tuple = (1, 2, 2)
    cond_dim: int = 64
    num_classes: int = 4
    in_channels: int = 3
    out_channels: int = 3
    norm_groups: int = 2
    image_size: int = 16

    def __post_init__(self):
        object.__setattr__(self, "channel_mult", tuple(self.channel_mult))
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if len(self.channel_mult) != self.levels:
            raise ValueError(f"channel_mult needs {self.levels} entries, got {self.channel_mult}")
        for ch in self.channels:
            if ch % 2 or ch % self.norm_groups:
                raise ValueError(f"channel count {ch} must be even and divisible by norm_groups")
        if self.image_size % (2 ** (self.levels - 1)):
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2^(levels-1)={2 ** (self.levels - 1)}"
            )

    @property
    def channels(self) -> list:
        return [self.base_channels * m for m in self.channel_mult]


@dataclass(frozen=True)
class STUNetConfig:
    t2i: T2IConfig = field(default_factory=T2IConfig)
    temporal_kernel: int = 3
    temporal_levels: tuple = (1, 2)
    attn_blocks_coarsest: int = 2

    def __post_init__(self):
        if isinstance(self.t2i, dict):
            object.__setattr__(self, "t2i", T2IConfig(**self.t2i))
        object.__setattr__(self, "temporal_levels", tuple(sorted(self.temporal_levels)))
        if self.temporal_kernel < 3 or self.temporal_kernel % 2 == 0:
            raise ValueError(f"temporal_kernel must be odd and >= 3, got {self.temporal_kernel}")
        for lv in self.temporal_levels:
            if not 1 <= lv < self.t2i.levels:
                raise ValueError(f"temporal level {lv} outside 1..{self.t2i.levels - 1}")

    @property
    def time_factor(self) -> int:
        return 2 ** len(self.temporal_levels)


def config_to_dict(cfg) -> dict:
    d = asdict(cfg)
    d["kind"] = "stunet" if isinstance(cfg, STUNetConfig) else "t2i"
    return d


def config_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", "t2i")
    if kind == "stunet":
        d["t2i"] = T2IConfig(**d["t2i"])
        return STUNetConfig(**d)
    return T2IConfig(**d)


@dataclass
class Weights:
    """Named parameter maps.

    ``spatial`` holds the image-model tensors (frozen once inflated);
    ``temporal`` holds everything trained on video, including the extra input
    slices added by :func:`stvid.diffusion.expand_input_conv`.
    """

    config: object
    spatial: dict
    temporal: dict = field(default_factory=dict)
    cond_channels: int = 0

    @property
    def is_video(self) -> bool:
        return isinstance(self.config, STUNetConfig)

    @property
    def t2i(self) -> T2IConfig:
        return self.config.t2i if self.is_video else self.config

    @property
    def in_channels(self) -> int:
        return self.t2i.in_channels + self.cond_channels

    def frozen_flags(self) -> dict:
        flags = {name: self.is_video for name in self.spatial}
        flags.update({name: False for name in self.temporal})
        return flags

    def trainable_names(self) -> list:
        return list(self.temporal) if self.is_video else list(self.spatial)

    def params(self) -> dict:
        out = dict(self.spatial)
        out.update(self.temporal)
        return out

    def copy(self) -> "Weights":
        return Weights(
            self.config,
            {k: v.copy() for k, v in self.spatial.items()},
            {k: v.copy() for k, v in self.temporal.items()},
            self.cond_channels,
        )


def tensor_map_hash(tensors: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# parameter layout


def _res_shapes(prefix, cin, cout, E):
    shapes = {
        f"{prefix}.conv1.weight": (cout, cin, 3, 3),
        f"{prefix}.norm1.gamma": (cout,),
        f"{prefix}.norm1.beta": (cout,),
        f"{prefix}.emb.weight": (E, cout),
        f"{prefix}.emb.bias": (cout,),
        f"{prefix}.conv2.weight": (cout, cout, 3, 3),
        f"{prefix}.norm2.gamma": (cout,),
        f"{prefix}.norm2.beta": (cout,),
    }
    if cin != cout:
        shapes[f"{prefix}.skip.weight"] = (cout, cin, 1, 1)
        shapes[f"{prefix}.skip.bias"] = (cout,)
    return shapes


def t2i_param_shapes(cfg: T2IConfig) -> dict:
    E, b, ch, L = cfg.cond_dim, cfg.base_channels, cfg.channels, cfg.levels
    shapes = {
        "time_embed.w1": (b, E),
        "time_embed.b1": (E,),
        "time_embed.w2": (E, E),
        "time_embed.b2": (E,),
        "class_embed.table": (cfg.num_classes, E),
        "in_conv.weight": (b, cfg.in_channels, 3, 3),
        "in_conv.bias": (b,),
    }
    prev = b
    for i in range(L):
        shapes.update(_res_shapes(f"enc{i}", prev, ch[i], E))
        prev = ch[i]
        if i < L - 1:
            shapes[f"down{i}.weight"] = (ch[i], ch[i], 3, 3)
            shapes[f"down{i}.bias"] = (ch[i],)
    shapes.update(_res_shapes("mid", ch[-1], ch[-1], E))
    prev = ch[-1]
    for i in reversed(range(L)):
        shapes.update(_res_shapes(f"dec{i}", prev + ch[i], ch[i], E))
        prev = ch[i]
        if i > 0:
            shapes[f"up{i}.weight"] = (ch[i], ch[i], 3, 3)
            shapes[f"up{i}.bias"] = (ch[i],)
    shapes["out_norm.gamma"] = (ch[0],)
    shapes["out_norm.beta"] = (ch[0],)
    shapes["out_conv.weight"] = (cfg.out_channels, ch[0], 3, 3)
    shapes["out_conv.bias"] = (cfg.out_channels,)
    return shapes


def t2i_param_count(cfg: T2IConfig) -> int:
    """Closed-form parameter count of the image U-Net.

    With E = cond_dim, b = base_channels, c_i = b * channel_mult[i], K classes:

    * embeddings: b*E + E + E^2 + E + K*E
    * input conv: 9*b*in + b; output: 2*c_0 + 9*out*c_0 + out
    * res(ci, co) = 9*co*ci + 9*co^2 + 5*co + E*co  (+ co*ci + co when ci != co)
    * encoder: res(b, c_0), res(c_{i-1}, c_i); mid: res(c_L-1, c_L-1)
    * decoder: res(2*c_{L-1}, c_{L-1}), res(c_{i+1} + c_i, c_i)
    * each of the L-1 down and L-1 up convs at level i: 9*c_i^2 + c_i
    """
    E, b, c, L = cfg.cond_dim, cfg.base_channels, cfg.channels, cfg.levels

    def res(ci, co):
        n = 9 * co * ci + 9 * co * co + 5 * co + E * co
        return n + (co * ci + co if ci != co else 0)

    total = b * E + E + E * E + E + cfg.num_classes * E
    total += 9 * b * cfg.in_channels + b
    total += 2 * c[0] + 9 * cfg.out_channels * c[0] + cfg.out_channels
    total += res(b, c[0]) + sum(res(c[i - 1], c[i]) for i in range(1, L))
    total += res(c[-1], c[-1])
    total += res(2 * c[-1], c[-1]) + sum(res(c[i + 1] + c[i], c[i]) for i in range(L - 1))
    total += sum(9 * c[i] * c[i] + c[i] for i in range(L - 1))  # down_i
    total += sum(9 * c[i] * c[i] + c[i] for i in range(1, L))  # up_i
    return total


def _init_param(name, shape, rng):
    if name.endswith(("bias", ".beta", ".b1", ".b2")):
        return np.zeros(shape, dtype=np.float32)
    if name.endswith(".gamma"):
        return np.ones(shape, dtype=np.float32)
    if name.endswith("table"):
        return (rng.standard_normal(shape) * 0.5).astype(np.float32)
    fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
    std = math.sqrt(2.0 / fan_in)
    if name.startswith("out_conv"):
        std *= 0.1
    return (rng.standard_normal(shape) * std).astype(np.float32)


def build_t2i(config: T2IConfig, seed: int) -> Weights:
    """Deterministically initialise an image U-Net."""
    rng = np.random.default_rng(seed)
    params = {name: _init_param(name, shp, rng) for name, shp in t2i_param_shapes(config).items()}
    return Weights(config, params)


def temporal_param_shapes(cfg: STUNetConfig) -> dict:
    ch, L, kt = cfg.t2i.channels, cfg.t2i.levels, cfg.temporal_kernel
    shapes = {}

    def tconv(prefix, c):
        shapes[f"{prefix}.conv.weight"] = (c, c, kt)
        shapes[f"{prefix}.conv.bias"] = (c,)
        shapes[f"{prefix}.norm.gamma"] = (c,)
        shapes[f"{prefix}.norm.beta"] = (c,)
        shapes[f"{prefix}.proj.weight"] = (c, c, 1)
        shapes[f"{prefix}.proj.bias"] = (c,)

    for i in range(L - 1):
        tconv(f"tconv_enc{i}", ch[i])
        tconv(f"tconv_dec{i}", ch[i])
    c = ch[-1]
    for j in range(cfg.attn_blocks_coarsest):
        p = f"tattn{j}"
        shapes[f"{p}.norm.gamma"] = (c,)
        shapes[f"{p}.norm.beta"] = (c,)
        for m in ("q", "k", "v"):
            shapes[f"{p}.{m}.weight"] = (c, c)
        shapes[f"{p}.proj.weight"] = (c, c)
    for lv in cfg.temporal_levels:
        # down-sampler entering level lv (channels of level lv-1 after down conv)
        shapes[f"tdown{lv}.weight"] = (ch[lv - 1], ch[lv - 1], 3)
        shapes[f"tdown{lv}.bias"] = (ch[lv - 1],)
        shapes[f"tup{lv}.weight"] = (ch[lv], ch[lv], 3)
        shapes[f"tup{lv}.bias"] = (ch[lv],)
    return shapes


def _nn_resampler_kernel(c):
    k = np.zeros((c, c, 3), dtype=np.float32)
    k[np.arange(c), np.arange(c), 1] = 1.0
    return k


def inflate(t2i_weights: Weights, config: STUNetConfig, seed: int = 0) -> Weights:
    """Insert temporal modules into an image U-Net; spatial weights are copied verbatim."""
    if t2i_weights.is_video:
        raise ValueError("inflate expects image-model weights")
    if t2i_weights.config != config.t2i:
        raise ValueError("STUNet config does not match the image model config")
    expected = t2i_param_shapes(config.t2i)
    for name, shp in expected.items():
        if name not in t2i_weights.spatial or t2i_weights.spatial[name].shape != shp:
            raise ValueError(f"image weights inconsistent with config at {name!r}")
    rng = np.random.default_rng(seed)
    temporal = {}
    for name, shp in temporal_param_shapes(config).items():
        if name.startswith(("tdown", "tup")) and name.endswith("weight"):
            temporal[name] = _nn_resampler_kernel(shp[0])
        elif ".proj." in name or name.endswith("bias") or name.endswith(".beta"):
            temporal[name] = np.zeros(shp, dtype=np.float32)
        elif name.endswith(".gamma"):
            temporal[name] = np.ones(shp, dtype=np.float32)
        else:
            fan_in = shp[1] * (shp[2] if len(shp) == 3 else 1)
            temporal[name] = (rng.standard_normal(shp) * math.sqrt(1.0 / fan_in)).astype(np.float32)
    spatial = {k: v.copy() for k, v in t2i_weights.spatial.items()}
    return Weights(config, spatial, temporal, t2i_weights.cond_channels)


# ---------------------------------------------------------------------------
# forward pass


def timestep_embedding(t, dim: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _frame_positions(T: int, C: int) -> np.ndarray:
    pos = np.arange(T, dtype=np.float64)[:, None]
    i = np.arange(C // 2, dtype=np.float64)[None, :]
    ang = pos / np.power(100.0, 2 * i / C)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def bind(weights: Weights, dtype=np.float32, trainable=()) -> dict:
    """Wrap every parameter in a Tensor; names in ``trainable`` require grad."""
    trainable = set(trainable)
    return {
        name: Tensor(arr.astype(dtype, copy=False), requires_grad=name in trainable)
        for name, arr in weights.params().items()
    }


class _Net:
    def __init__(self, weights: Weights, P: dict):
        self.w = weights
        self.cfg = weights.t2i
        self.vcfg = weights.config if weights.is_video else None
        self.P = P
        self.stats = []

    def conv(self, prefix, x, bias=True):
        k = self.P[f"{prefix}.weight"]
        h = nx.conv2d(x, k, pad=k.shape[2] // 2)
        return nx.add_channel(h, self.P[f"{prefix}.bias"]) if bias else h

    def norm(self, prefix, x):
        return nx.group_norm(x, self.cfg.norm_groups, self.P[f"{prefix}.gamma"], self.P[f"{prefix}.beta"])

    def res(self, prefix, x, emb):
        h = nx.silu(self.norm(f"{prefix}.norm1", self.conv(f"{prefix}.conv1", x, bias=False)))
        proj = nx.add_channel(nx.matmul(emb, self.P[f"{prefix}.emb.weight"]), self.P[f"{prefix}.emb.bias"])
        h = nx.add_channel(h, proj)
        h = nx.silu(self.norm(f"{prefix}.norm2", self.conv(f"{prefix}.conv2", h, bias=False)))
        skip = self.conv(f"{prefix}.skip", x) if f"{prefix}.skip.weight" in self.P else x
        return nx.add(h, skip)

    def embed(self, t, labels, n):
        cfg = self.cfg
        dt = self.P["time_embed.w1"].dtype
        te = Tensor(timestep_embedding(t, cfg.base_channels).astype(dt))
        if te.shape[0] == 1 and n > 1:
            te = Tensor(np.repeat(te.data, n, axis=0))
        h = nx.add_channel(nx.matmul(te, self.P["time_embed.w1"]), self.P["time_embed.b1"])
        h = nx.add_channel(nx.matmul(nx.silu(h), self.P["time_embed.w2"]), self.P["time_embed.b2"])
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        if labels.shape[0] == 1 and n > 1:
            labels = np.repeat(labels, n)
        if labels.min() < 0 or labels.max() >= cfg.num_classes:
            raise ValueError(f"class label outside [0, {cfg.num_classes})")
        onehot = np.zeros((labels.shape[0], cfg.num_classes), dtype=dt)
        onehot[np.arange(labels.shape[0]), labels] = 1.0
        return nx.silu(nx.add(h, nx.matmul(Tensor(onehot), self.P["class_embed.table"])))

    # temporal modules ------------------------------------------------------
    def tconv(self, prefix, x):
        k = self.P[f"{prefix}.conv.weight"]
        h = nx.add_channel(nx.conv1d_time(x, k, pad=k.shape[2] // 2), self.P[f"{prefix}.conv.bias"])
        h = nx.silu(self.norm(f"{prefix}.norm", h))
        h = nx.add_channel(nx.conv1d_time(h, self.P[f"{prefix}.proj.weight"], pad=0), self.P[f"{prefix}.proj.bias"])
        return nx.add(x, h)

    def tattn(self, prefix, x):
        T, C, H, W = x.shape
        h = self.norm(f"{prefix}.norm", x)
        seq = nx.reshape(nx.transpose(h, (2, 3, 0, 1)), (H * W, T, C))
        pos = np.broadcast_to(_frame_positions(T, C).astype(x.dtype), (H * W, T, C))
        seq = nx.add(seq, Tensor(np.ascontiguousarray(pos)))
        q = nx.matmul(seq, self.P[f"{prefix}.q.weight"])
        k = nx.matmul(seq, self.P[f"{prefix}.k.weight"])
        v = nx.matmul(seq, self.P[f"{prefix}.v.weight"])
        a = nx.matmul(nx.attention(q, k, v), self.P[f"{prefix}.proj.weight"])
        a = nx.transpose(nx.reshape(a, (H, W, T, C)), (2, 3, 0, 1))
        return nx.add(x, a)

    def tdown(self, lv, x):
        h = nx.add_channel(nx.conv1d_time(x, self.P[f"tdown{lv}.weight"], pad=1), self.P[f"tdown{lv}.bias"])
        return nx.resize_nearest(h, 0, "down")

    def tup(self, lv, x):
        h = nx.resize_nearest(x, 0, "up")
        return nx.add_channel(nx.conv1d_time(h, self.P[f"tup{lv}.weight"], pad=1), self.P[f"tup{lv}.bias"])

    # ------------------------------------------------------------------------
    def __call__(self, x, t, labels):
        cfg, v = self.cfg, self.vcfg
        L = cfg.levels
        N, C, H, W = x.shape
        if C != self.w.in_channels:
            raise ValueError(f"input has {C} channels, model expects {self.w.in_channels}")
        f = 2 ** (L - 1)
        if H % f or W % f:
            raise ValueError(f"H, W = {H}, {W} not divisible by {f}")
        if v is not None and N % v.time_factor:
            raise ValueError(f"T = {N} not divisible by temporal factor {v.time_factor}")
        emb = self.embed(t, labels, 1 if v is not None else N)

        k_in = self.P["in_conv.weight"]
        if not self.w.cond_channels:
            h = nx.conv2d(x, k_in, pad=1)
        elif x.requires_grad:
            h = nx.conv2d(x, nx.concat([k_in, self.P["in_conv.cond_weight"]], axis=1), pad=1)
        else:
            # separate convs keep the unconditioned sum bit-identical to the
            # original model while cond_weight is zero
            c = k_in.shape[1]
            h = nx.add(nx.conv2d(Tensor(x.data[:, :c]), k_in, pad=1),
                       nx.conv2d(Tensor(x.data[:, c:]), self.P["in_conv.cond_weight"], pad=1))
        h = nx.add_channel(h, self.P["in_conv.bias"])
        skips = []
        for i in range(L):
            h = self.res(f"enc{i}", h, emb)
            if v is not None and i < L - 1:
                h = self.tconv(f"tconv_enc{i}", h)
            skips.append(h)
            self.stats.append((f"enc{i}", h.data.size))
            if i < L - 1:
                h = nx.resize_nearest(nx.resize_nearest(self.conv(f"down{i}", h), 2, "down"), 3, "down")
                if v is not None and (i + 1) in v.temporal_levels:
                    h = self.tdown(i + 1, h)
        h = self.res("mid", h, emb)
        if v is not None:
            for j in range(v.attn_blocks_coarsest):
                h = self.tattn(f"tattn{j}", h)
        self.stats.append(("mid", h.data.size))
        for i in reversed(range(L)):
            h = self.res(f"dec{i}", nx.concat([h, skips[i]], axis=1), emb)
            if v is not None and i < L - 1:
                h = self.tconv(f"tconv_dec{i}", h)
            if i > 0:
                h = self.conv(f"up{i}", nx.resize_nearest(nx.resize_nearest(h, 2, "up"), 3, "up"))
                if v is not None and i in v.temporal_levels:
                    h = self.tup(i, h)
        h = nx.silu(self.norm("out_norm", h))
        return self.conv("out_conv", h)


def apply(weights: Weights, P: dict, x: Tensor, t, labels) -> Tensor:
    """Run the network on channels-first activations ``x`` using bound params ``P``.

    For video weights ``x`` is one clip ``[T, C, H, W]`` with a scalar ``t`` and
    label; for image weights it is a batch ``[N, C, H, W]`` with per-item ``t``.
    """
    return _Net(weights, P)(x, t, labels)


def _run(weights, arr, t, labels, dtype):
    P = bind(weights, dtype)
    x = Tensor(np.ascontiguousarray(np.moveaxis(np.asarray(arr, dtype=dtype), -1, 1)))
    out = apply(weights, P, x, t, labels)
    return np.ascontiguousarray(np.moveaxis(out.data, 1, -1))


def t2i_forward(weights: Weights, images, t, labels, dtype=np.float64) -> np.ndarray:
    """Predicted noise for an image batch ``[N, H, W, C]``."""
    if weights.is_video:
        raise ValueError("t2i_forward expects image-model weights")
    images = np.asarray(images)
    n = images.shape[0]
    t = np.broadcast_to(np.asarray(t), (n,))
    labels = np.broadcast_to(np.asarray(labels), (n,))
    return _run(weights, images, t, labels, dtype)


def forward(weights: Weights, J, t, label, dtype=np.float64) -> np.ndarray:
    """Predicted noise for one clip ``J[T, H, W, C]``; the whole clip is processed at once."""
    if not weights.is_video:
        raise ValueError("forward expects inflated (video) weights")
    J = np.asarray(J)
    if J.ndim != 4:
        raise ValueError(f"expected a clip [T, H, W, C], got shape {J.shape}")
    return _run(weights, J, int(t), int(label), dtype)


def activation_report(weights: Weights, T: int, H: int, W: int) -> dict:
    """Element counts of the input and of the activations at each level for one clip."""
    x = np.zeros((T, H, W, weights.in_channels))
    P = bind(weights, np.float64)
    net = _Net(weights, P)
    net(Tensor(np.moveaxis(x, -1, 1).copy()), 0, 0)
    report = {"input": x.size}
    report.update(dict(net.stats))
    report["coarsest"] = report["mid"]
    return report


def image_view(weights: Weights) -> Weights:
    """The frozen image network inside inflated weights (shares arrays)."""
    return Weights(weights.t2i, weights.spatial, {}, 0)


def build_ssr(config: STUNetConfig, seed: int, image_weights: Weights | None = None) -> Weights:
    """SSR denoiser: an inflated U-Net whose input is the noisy high-res segment
    concatenated with the nearest-upsampled low-res segment.

    ``image_weights`` is a (trained) image-SSR model to inflate; when omitted a
    fresh one is initialised from ``seed``.
    """
    t2i = config.t2i
    if t2i.in_channels != 2 * t2i.out_channels:
        t2i = T2IConfig(**{**asdict(t2i), "in_channels": 2 * t2i.out_channels})
        config = STUNetConfig(**{**asdict(config), "t2i": t2i})
    if image_weights is None:
        image_weights = build_t2i(t2i, seed)
    return inflate(image_weights, config, seed + 1)


def ssr_image_config(base: T2IConfig) -> T2IConfig:
    """Image-SSR config matching ``base`` at twice the spatial size."""
    return T2IConfig(**{**asdict(base), "in_channels": 2 * base.out_channels, "image_size": 2 * base.image_size})
