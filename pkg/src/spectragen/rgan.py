"""Rectangular guided attention network for RGB-guided HSI super-resolution.

Two feature streams (HSI and RGB) pass through a stack of guided attention
layers. Each layer runs windowed self-attention per stream, windowed
cross-attention between streams, a channel gate, and a feed-forward block,
with a residual around every sub-layer. Attention is computed inside
non-overlapping rectangular windows: the first half of the channels uses
wide (horizontal) windows, the second half tall (vertical) windows, and the
halves are concatenated back together.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Parameter, RandomSource, Tensor
from .hsi import HsiCube

# When set to a list, every attention call appends its row-stochastic
# weights; used by tests to inspect softmax normalization.
ATTENTION_PROBE: list | None = None


@dataclass(frozen=True)
class AttentionConfig:
    channels: int
    heads: int = 1
    window_h: tuple[int, int] = (2, 8)  # wide: w >= h
    window_v: tuple[int, int] = (8, 2)  # tall: h >= w
    layers: int = 2
    qkv_kernel: int = 1

    def __post_init__(self):
        if self.channels % 2:
            raise ValueError("channels must be even (spectral split into halves)")
        if self.channels % (2 * self.heads):
            raise ValueError("channels must be divisible by 2*heads")
        if self.window_h[1] < self.window_h[0]:
            raise ValueError(f"horizontal window must be wide, got {self.window_h}")
        if self.window_v[0] < self.window_v[1]:
            raise ValueError(f"vertical window must be tall, got {self.window_v}")
        if self.layers < 1:
            raise ValueError("need at least one layer")

    @property
    def head_dim(self) -> int:
        return self.channels // (2 * self.heads)

    @property
    def row_divisor(self) -> int:
        return math.lcm(self.window_h[0], self.window_v[0])

    @property
    def col_divisor(self) -> int:
        return math.lcm(self.window_h[1], self.window_v[1])


@dataclass(frozen=True)
class RganConfig:
    bands: int
    scale: int = 2
    attention: AttentionConfig = field(default_factory=lambda: AttentionConfig(16))
    embed_kernel: int = 3

    def __post_init__(self):
        if self.scale not in (2, 4):
            raise ValueError("scale must be 2 or 4")

    def to_dict(self) -> dict:
        return asdict(self)


def rgan_config_from_dict(d: dict) -> RganConfig:
    att = dict(d["attention"])
    att["window_h"] = tuple(att["window_h"])
    att["window_v"] = tuple(att["window_v"])
    return RganConfig(
        bands=d["bands"],
        scale=d["scale"],
        attention=AttentionConfig(**att),
        embed_kernel=d["embed_kernel"],
    )


# ---------------------------------------------------------------------------
# window partitioning


@dataclass
class WindowedFeatures:
    """Non-overlapping rectangular windows of a [C,H,W] feature map."""

    windows: Tensor  # [n_windows, h*w, C]
    window: tuple[int, int]
    grid: tuple[int, int]
    channels: int

    def reverse(self) -> Tensor:
        h, w = self.window
        gr, gc = self.grid
        g = ad.reshape(self.windows, (gr, gc, h, w, self.channels))
        g = ad.transpose(g, (4, 0, 2, 1, 3))
        return ad.reshape(g, (self.channels, gr * h, gc * w))


def partition_windows(t: Tensor, window: tuple[int, int]) -> WindowedFeatures:
    """Split [C,H,W] into (H/h)*(W/w) windows of h*w tokens, row-major."""
    c, height, width = t.shape
    h, w = window
    if height % h or width % w:
        raise ValueError(f"extents {height}x{width} not divisible by window {window}")
    g = ad.reshape(t, (c, height // h, h, width // w, w))
    g = ad.transpose(g, (1, 3, 2, 4, 0))  # (H/h, W/w, h, w, C)
    windows = ad.reshape(g, ((height // h) * (width // w), h * w, c))
    return WindowedFeatures(windows, window, (height // h, width // w), c)


def _to_heads(windows: Tensor, heads: int) -> Tensor:
    n, t, c = windows.shape
    g = ad.reshape(windows, (n, t, heads, c // heads))
    return ad.transpose(g, (0, 2, 1, 3))


def _from_heads(t: Tensor) -> Tensor:
    n, heads, tok, d = t.shape
    return ad.reshape(ad.transpose(t, (0, 2, 1, 3)), (n, tok, heads * d))


def window_attention(query: Tensor, key: Tensor, value: Tensor,
                     window: tuple[int, int], pos: Tensor, heads: int) -> Tensor:
    """Windowed multi-head attention on channel-half feature maps.

    query/key/value are [C/2,H,W]; pos is a per-head [heads, h*w, h*w] bias
    shared across windows. Output attends query against key rows and mixes
    value rows, returned as a [C/2,H,W] map.
    """
    qw = partition_windows(query, window)
    kw = partition_windows(key, window)
    vw = partition_windows(value, window)
    d = qw.channels // heads
    q = _to_heads(qw.windows, heads)
    k = _to_heads(kw.windows, heads)
    v = _to_heads(vw.windows, heads)
    logits = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(d))
    logits = ad.add(logits, pos)
    attn = ad.softmax(logits, axis=-1)
    if ATTENTION_PROBE is not None:
        ATTENTION_PROBE.append(attn.data)
    out = _from_heads(ad.matmul(attn, v))
    return WindowedFeatures(out, window, vw.grid, vw.channels).reverse()


# ---------------------------------------------------------------------------
# modules


def project_qkv(z: Tensor, conv: nn.Conv2d) -> tuple[Tensor, Tensor, Tensor]:
    """One convolution to 3C channels, split into query/key/value maps."""
    return tuple(ad.split(conv(z), 3, axis=0))


def spectral_split(t: Tensor) -> tuple[Tensor, Tensor]:
    """Halve the channel axis: first half feeds the horizontal branch."""
    return tuple(ad.split(t, 2, axis=0))


class Rca:
    """Rectangular cross-attention between two same-shape streams.

    Returns (z1_hat, z2_hat): z1_hat attends stream-2 queries against
    stream-1 keys/values (so it carries stream-1 content), and vice versa.
    The projection is shared by both streams, which makes the module
    exactly equivariant to swapping its inputs; with both inputs equal it
    degenerates to windowed self-attention.
    """

    def __init__(self, cfg: AttentionConfig, rng: RandomSource, name: str):
        self.cfg = cfg
        c = cfg.channels
        pad = "same" if cfg.qkv_kernel > 1 else "valid"
        self.qkv = nn.Conv2d(c, 3 * c, cfg.qkv_kernel, rng.child(0), f"{name}.qkv", padding=pad)
        th = cfg.window_h[0] * cfg.window_h[1]
        tv = cfg.window_v[0] * cfg.window_v[1]
        self.pos_h = Parameter(np.zeros((cfg.heads, th, th)), name=f"{name}.pos_h")
        self.pos_v = Parameter(np.zeros((cfg.heads, tv, tv)), name=f"{name}.pos_v")

    def __call__(self, z1: Tensor, z2: Tensor) -> tuple[Tensor, Tensor]:
        if z1.shape != z2.shape:
            raise ValueError(f"stream shapes differ: {z1.shape} vs {z2.shape}")
        cfg = self.cfg
        q1, k1, v1 = project_qkv(z1, self.qkv)
        q2, k2, v2 = project_qkv(z2, self.qkv)
        q1h, q1v = spectral_split(q1)
        k1h, k1v = spectral_split(k1)
        v1h, v1v = spectral_split(v1)
        q2h, q2v = spectral_split(q2)
        k2h, k2v = spectral_split(k2)
        v2h, v2v = spectral_split(v2)
        z1_hat = ad.concat(
            [
                window_attention(q2h, k1h, v1h, cfg.window_h, self.pos_h, cfg.heads),
                window_attention(q2v, k1v, v1v, cfg.window_v, self.pos_v, cfg.heads),
            ],
            axis=0,
        )
        z2_hat = ad.concat(
            [
                window_attention(q1h, k2h, v2h, cfg.window_h, self.pos_h, cfg.heads),
                window_attention(q1v, k2v, v2v, cfg.window_v, self.pos_v, cfg.heads),
            ],
            axis=0,
        )
        return z1_hat, z2_hat

    def parameters(self):
        return self.qkv.parameters() + [self.pos_h, self.pos_v]


class SpectralGate:
    """Channel attention: spatial mean -> two linear layers -> sigmoid gate.

    The gate scales the channels of a 1x1-projected branch, so zeroed
    weights contribute exactly nothing through the surrounding residual.
    """

    def __init__(self, channels: int, rng: RandomSource, name: str, hidden: int | None = None):
        hidden = hidden or max(channels // 2, 1)
        self.channels = channels
        self.fc1 = nn.Linear(channels, hidden, rng.child(0), f"{name}.fc1")
        self.fc2 = nn.Linear(hidden, channels, rng.child(1), f"{name}.fc2")
        self.value = nn.Conv2d(channels, channels, 1, rng.child(2), f"{name}.value", padding="valid")

    def __call__(self, x: Tensor) -> Tensor:
        gate = ad.sigmoid(self.fc2(ad.relu(self.fc1(ad.mean(x, axis=(1, 2))))))
        return ad.mul(self.value(x), ad.reshape(gate, (self.channels, 1, 1)))

    def parameters(self):
        return self.fc1.parameters() + self.fc2.parameters() + self.value.parameters()


class Ffd:
    """Feed-forward block: layer norm then two linears with a ReLU."""

    def __init__(self, channels: int, rng: RandomSource, name: str, expand: int = 2):
        self.norm = nn.LayerNorm(channels, f"{name}.norm")
        self.fc1 = nn.Linear(channels, expand * channels, rng.child(0), f"{name}.fc1")
        self.fc2 = nn.Linear(expand * channels, channels, rng.child(1), f"{name}.fc2")

    def __call__(self, x: Tensor) -> Tensor:
        c, h, w = x.shape
        tokens = ad.reshape(ad.transpose(x, (1, 2, 0)), (h * w, c))
        tokens = self.fc2(ad.relu(self.fc1(self.norm(tokens))))
        return ad.transpose(ad.reshape(tokens, (h, w, c)), (2, 0, 1))

    def parameters(self):
        return self.norm.parameters() + self.fc1.parameters() + self.fc2.parameters()


class Gal:
    """Guided attention layer: SAL, CAL, SpecAL, FFD, residual each."""

    def __init__(self, cfg: AttentionConfig, rng: RandomSource, name: str):
        self.sal_hsi = Rca(cfg, rng.child(0), f"{name}.sal_hsi")
        self.sal_rgb = Rca(cfg, rng.child(1), f"{name}.sal_rgb")
        self.cal = Rca(cfg, rng.child(2), f"{name}.cal")
        self.spec_hsi = SpectralGate(cfg.channels, rng.child(3), f"{name}.spec_hsi")
        self.spec_rgb = SpectralGate(cfg.channels, rng.child(4), f"{name}.spec_rgb")
        self.ffd_hsi = Ffd(cfg.channels, rng.child(5), f"{name}.ffd_hsi")
        self.ffd_rgb = Ffd(cfg.channels, rng.child(6), f"{name}.ffd_rgb")

    def __call__(self, hsi_feat: Tensor, rgb_feat: Tensor) -> tuple[Tensor, Tensor]:
        hsi_feat = ad.add(hsi_feat, self.sal_hsi(hsi_feat, hsi_feat)[0])
        rgb_feat = ad.add(rgb_feat, self.sal_rgb(rgb_feat, rgb_feat)[0])
        d_hsi, d_rgb = self.cal(hsi_feat, rgb_feat)
        hsi_feat = ad.add(hsi_feat, d_hsi)
        rgb_feat = ad.add(rgb_feat, d_rgb)
        hsi_feat = ad.add(hsi_feat, self.spec_hsi(hsi_feat))
        rgb_feat = ad.add(rgb_feat, self.spec_rgb(rgb_feat))
        hsi_feat = ad.add(hsi_feat, self.ffd_hsi(hsi_feat))
        rgb_feat = ad.add(rgb_feat, self.ffd_rgb(rgb_feat))
        return hsi_feat, rgb_feat

    def parameters(self):
        out = []
        for m in (self.sal_hsi, self.sal_rgb, self.cal, self.spec_hsi,
                  self.spec_rgb, self.ffd_hsi, self.ffd_rgb):
            out += m.parameters()
        return out


class RganModel:
    """Guided SR model: shallow embeds, GAL stack, zero-init head, global
    bilinear residual. At initialization the output equals the bilinear
    upsample of the input."""

    def __init__(self, config: RganConfig, seed: int = 0):
        self.config = config
        rng = RandomSource(seed)
        c = config.attention.channels
        self.embed_hsi = nn.Conv2d(config.bands, c, config.embed_kernel, rng.child(0), "embed_hsi")
        self.embed_rgb = nn.Conv2d(3, c, config.embed_kernel, rng.child(1), "embed_rgb")
        self.gals = [Gal(config.attention, rng.child(10 + i), f"gal{i}")
                     for i in range(config.attention.layers)]
        self.head = nn.Conv2d(c, config.bands, 3, rng.child(2), "head", zero_init=True)

    def parameters(self):
        out = self.embed_hsi.parameters() + self.embed_rgb.parameters()
        for gal in self.gals:
            out += gal.parameters()
        return out + self.head.parameters()

    def forward(self, lr: Tensor, rgb: Tensor) -> Tensor:
        bands, h, w = lr.shape
        scale = self.config.scale
        if rgb.shape != (3, h * scale, w * scale):
            raise ValueError(
                f"guide shape {rgb.shape} does not match lr {lr.shape} at scale {scale}"
            )
        att = self.config.attention
        hh, ww = h * scale, w * scale
        if hh % att.row_divisor or ww % att.col_divisor:
            raise ValueError(
                f"output extents {hh}x{ww} not divisible by windows "
                f"({att.row_divisor}x{att.col_divisor}); pad before the model"
            )
        upsampled = ad.bilinear_resize(lr, hh, ww)
        hsi_feat = ad.bilinear_resize(self.embed_hsi(lr), hh, ww)
        rgb_feat = self.embed_rgb(rgb)
        for gal in self.gals:
            hsi_feat, rgb_feat = gal(hsi_feat, rgb_feat)
        return ad.add(self.head(hsi_feat), upsampled)


# ---------------------------------------------------------------------------
# pipeline ops


def _pad_amount(extent: int, divisor: int) -> int:
    return (-extent) % divisor


def rgan_forward(lr_cube: HsiCube, hr_rgb: np.ndarray, model: RganModel,
                 clamp: bool = True) -> HsiCube:
    """Guided super-resolution of a cube with an RGB image as guidance.

    Pads reflectively to window-divisible extents, runs the model, crops
    back, and clamps to [0,1] (inference behaviour).
    """
    scale = model.config.scale
    hr_rgb = np.asarray(hr_rgb, dtype=np.float64)
    if hr_rgb.shape != (3, lr_cube.height * scale, lr_cube.width * scale):
        raise ValueError(
            f"guide shape {hr_rgb.shape} does not match cube "
            f"{lr_cube.height}x{lr_cube.width} at scale {scale}"
        )
    att = model.config.attention
    lr_div = math.lcm(att.row_divisor, scale) // scale
    lc_div = math.lcm(att.col_divisor, scale) // scale
    ph = _pad_amount(lr_cube.height, lr_div)
    pw = _pad_amount(lr_cube.width, lc_div)
    lr_t = Tensor(lr_cube.values)
    rgb_t = Tensor(hr_rgb)
    if ph or pw:
        lr_t = ad.pad_reflect2d(lr_t, (0, ph), (0, pw))
        rgb_t = ad.pad_reflect2d(rgb_t, (0, ph * scale), (0, pw * scale))
    out = model.forward(lr_t, rgb_t)
    if ph or pw:
        out = ad.crop2d(out, 0, lr_cube.height * scale, 0, lr_cube.width * scale)
    values = out.data
    if clamp:
        values = np.clip(values, 0.0, 1.0)
    return HsiCube(values, lr_cube.wavelengths)


def train_rgan(pairs, model: RganModel, steps: int, lr: float = 5e-3,
               seed: int = 0, weight_decay: float = 0.0,
               warmup_frac: float = 0.05, tail_frac: float = 0.35,
               pos_lr_mult: float = 30.0) -> list[float]:
    """Minimize mean absolute error over (lr_cube, hr_rgb, target) pairs.

    Schedule: short warmup, flat plateau, cosine tail to zero. Position
    embeddings get a boosted learning rate: they start at zero and gate all
    spatial detail transfer, so they are the slow path at a 200-step budget.
    Deterministic under a fixed seed; raises NumericalFailure on NaN loss.
    Returns the per-step loss trace.
    """
    if not pairs:
        raise ValueError("empty training pair set")
    rng = RandomSource(seed)
    params = model.parameters()
    mults = [pos_lr_mult if ".pos_" in p.name else 1.0 for p in params]
    opt = nn.Adam(params, lr=lr, betas=(0.9, 0.99), weight_decay=weight_decay,
                  lr_mults=mults)
    warmup = max(int(steps * warmup_frac), 1)
    tail_start = int(steps * (1.0 - tail_frac))
    trace = []
    tensors = [
        (Tensor(p[0].values), Tensor(np.asarray(p[1], dtype=np.float64)), Tensor(p[2].values))
        for p in pairs
    ]
    for step in range(steps):
        opt.lr = lr * nn.warmup_flat_cosine(step, steps, warmup, tail_start)
        lr_t, rgb_t, target = tensors[int(rng.integers(0, len(tensors)))]
        pred = model.forward(lr_t, rgb_t)
        loss = nn.l1_loss(pred, target)
        value = float(loss.data)
        if not np.isfinite(value):
            raise nn.NumericalFailure(f"NaN/inf training loss at step {step}")
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        trace.append(value)
    return trace


def save_rgan(model: RganModel, path) -> None:
    nn.save_checkpoint(path, "rgan", model.config.to_dict(), model.parameters())


def load_rgan(path) -> RganModel:
    kind, config, values = nn.load_checkpoint(path)
    if kind != "rgan":
        raise ValueError(f"{path}: checkpoint kind {kind!r}, expected 'rgan'")
    model = RganModel(rgan_config_from_dict(config))
    nn.assign_parameters(model.parameters(), values)
    return model
