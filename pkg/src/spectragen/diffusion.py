"""Latent-diffusion machinery: noise schedule, DDIM sampling, a toy
conditional denoiser with zero-convolution condition injection, pluggable
latent codecs, and the two-stage super-resolution augmentation pipeline.

The denoiser is a small 3-level convolutional encoder-decoder with skip
connections and a sinusoidal timestep embedding added per level. Spatial
conditions pass through a convolutional feature extractor whose per-scale
outputs go through zero-initialized 1x1 convolutions before being added to
the matching denoiser scale, so conditioning contributes exactly nothing
at initialization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import RandomSource, Tensor
from .hsi import HsiCube, crop_patches, extract_rgb, iter_patches
from .rgan import RganModel, rgan_forward

CONDITION_TAGS = ("hed", "seg", "sketch", "mlsd", "lowres", "custom")


# ---------------------------------------------------------------------------
# noise schedule and the two diffusion primitives


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step retention alpha[t] and its running product alpha_bar[t].

    Arrays are indexed by t-1 for t in 1..T; t = 0 means "no noise" and
    alpha_bar_at(0) == 1 by convention.
    """

    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_start: float
    beta_end: float

    @property
    def timesteps(self) -> int:
        return len(self.alpha)

    def alpha_bar_at(self, t: int) -> float:
        if not 0 <= t <= self.timesteps:
            raise ValueError(f"timestep {t} outside [0, {self.timesteps}]")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])


@dataclass
class LatentState:
    z: np.ndarray
    t: int


def make_schedule(timesteps: int = 1000, beta_start: float = 1e-4,
                  beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear beta schedule; alpha_t = 1 - beta_t, alpha_bar by product."""
    if timesteps < 1:
        raise ValueError("need at least one timestep")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"invalid beta range [{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, timesteps)
    alpha = 1.0 - beta
    return NoiseSchedule(alpha, np.cumprod(alpha), beta_start, beta_end)


def forward_noise(z0: np.ndarray, t: int, eps: np.ndarray,
                  schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form noising: z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps."""
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {eps.shape} != latent shape {z0.shape}")
    ab = schedule.alpha_bar_at(t)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def ddim_step(z_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int,
              schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic reverse update from t to t_prev (no stochastic term)."""
    if not t_prev < t:
        raise ValueError(f"t_prev {t_prev} must be below t {t}")
    ab_t = schedule.alpha_bar_at(t)
    ab_p = schedule.alpha_bar_at(t_prev)
    z0_hat = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    return np.sqrt(ab_p) * z0_hat + np.sqrt(1.0 - ab_p) * eps_hat


def timestep_subsequence(timesteps: int, steps: int) -> np.ndarray:
    """Evenly spaced t values from T down to 0, inclusive (steps+1 points)."""
    if not 1 <= steps <= timesteps:
        raise ValueError(f"steps {steps} outside [1, {timesteps}]")
    ts = np.rint(np.linspace(timesteps, 0, steps + 1)).astype(int)
    if np.any(np.diff(ts) >= 0):
        raise ValueError("subsequence is not strictly decreasing")
    return ts


# ---------------------------------------------------------------------------
# latent codecs


class IdentityCodec:
    kind = "identity"

    def encode(self, image: np.ndarray) -> np.ndarray:
        return image

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return latent

    def latent_shape(self, image_shape):
        return tuple(image_shape)


class SpaceToDepthCodec:
    """Lossless rearrangement: (C,H,W) <-> (C*r*r, H/r, W/r)."""

    kind = "space_to_depth"

    def __init__(self, factor: int = 2):
        if factor < 1:
            raise ValueError("factor must be positive")
        self.factor = factor

    def encode(self, image: np.ndarray) -> np.ndarray:
        c, h, w = image.shape
        r = self.factor
        if h % r or w % r:
            raise ValueError(f"extents {h}x{w} not divisible by factor {r}")
        return (
            image.reshape(c, h // r, r, w // r, r)
            .transpose(0, 2, 4, 1, 3)
            .reshape(c * r * r, h // r, w // r)
        )

    def decode(self, latent: np.ndarray) -> np.ndarray:
        cr, h, w = latent.shape
        r = self.factor
        c = cr // (r * r)
        return (
            latent.reshape(c, r, r, h, w)
            .transpose(0, 3, 1, 4, 2)
            .reshape(c, h * r, w * r)
        )

    def latent_shape(self, image_shape):
        c, h, w = image_shape
        r = self.factor
        return (c * r * r, h // r, w // r)


class TinyAutoencoder:
    """Small trained codec: space-to-depth plus learned 1x1 channel maps."""

    kind = "trained_tiny_ae"

    def __init__(self, image_channels: int, latent_channels: int,
                 factor: int = 2, seed: int = 0):
        self.image_channels = image_channels
        self.latent_channels = latent_channels
        self.factor = factor
        self._s2d = SpaceToDepthCodec(factor)
        rng = RandomSource(seed)
        packed = image_channels * factor * factor
        self.enc = nn.Conv2d(packed, latent_channels, 1, rng.child(0), "codec.enc", padding="valid")
        self.dec = nn.Conv2d(latent_channels, packed, 1, rng.child(1), "codec.dec", padding="valid")

    def parameters(self):
        return self.enc.parameters() + self.dec.parameters()

    def encode(self, image: np.ndarray) -> np.ndarray:
        return self.enc(Tensor(self._s2d.encode(image))).data

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return self._s2d.decode(self.dec(Tensor(latent)).data)

    def latent_shape(self, image_shape):
        c, h, w = image_shape
        r = self.factor
        return (self.latent_channels, h // r, w // r)

    def train(self, images, steps: int = 200, lr: float = 1e-2, seed: int = 0) -> list[float]:
        rng = RandomSource(seed)
        opt = nn.Adam(self.parameters(), lr=lr)
        trace = []
        packed = [Tensor(self._s2d.encode(img)) for img in images]
        for step in range(steps):
            x = packed[int(rng.integers(0, len(packed)))]
            recon = self.dec(self.enc(x))
            loss = nn.mse_loss(recon, x)
            trace.append(float(loss.data))
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
        return trace


def make_codec(kind: str, factor: int = 2, image_channels: int = 3,
               latent_channels: int = 4, seed: int = 0):
    if kind == "identity":
        return IdentityCodec()
    if kind == "space_to_depth":
        return SpaceToDepthCodec(factor)
    if kind == "trained_tiny_ae":
        return TinyAutoencoder(image_channels, latent_channels, factor, seed)
    raise ValueError(f"unknown codec kind {kind!r}")


# ---------------------------------------------------------------------------
# conditions


@dataclass
class ConditionStack:
    """Zero or more spatial condition maps plus an optional global vector."""

    spatial: dict[str, np.ndarray] = field(default_factory=dict)
    global_embedding: np.ndarray | None = None

    def __post_init__(self):
        extents = None
        for tag, cmap in self.spatial.items():
            if tag not in CONDITION_TAGS:
                raise ValueError(f"unknown condition tag {tag!r}")
            if cmap.ndim != 3:
                raise ValueError(f"condition {tag} must be (channels, H, W)")
            if extents is None:
                extents = cmap.shape[1:]
            elif cmap.shape[1:] != extents:
                raise ValueError("all spatial condition maps must share extents")

    def is_empty(self) -> bool:
        return not self.spatial and self.global_embedding is None


def _resize_stack(stack: ConditionStack, h: int, w: int) -> ConditionStack:
    spatial = {}
    for tag, cmap in stack.spatial.items():
        if cmap.shape[1:] != (h, w):
            cmap = ad.bilinear_resize_array(cmap, h, w)
        spatial[tag] = cmap
    return ConditionStack(spatial, stack.global_embedding)


# Built-in proxies so tests need no pretrained extractors.

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def _gradient_magnitude(image: np.ndarray) -> np.ndarray:
    gray = image.mean(axis=0)
    padded = np.pad(gray, 1, mode="edge")
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    for u in range(3):
        for v in range(3):
            shifted = padded[u : u + gray.shape[0], v : v + gray.shape[1]]
            gx += _SOBEL_X[u, v] * shifted
            gy += _SOBEL_X[v, u] * shifted
    return np.sqrt(gx * gx + gy * gy)


def edge_proxy(image: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude, scaled to [0,1]; stands in for HED maps."""
    mag = _gradient_magnitude(image)
    top = mag.max()
    return (mag / top if top > 0 else mag)[None]


def sketch_proxy(image: np.ndarray, threshold: float = 0.25) -> np.ndarray:
    """Binary line map: gradient magnitude thresholded at a fraction of max."""
    mag = _gradient_magnitude(image)
    top = mag.max()
    if top == 0:
        return np.zeros((1,) + mag.shape)
    return (mag / top >= threshold).astype(np.float64)[None]


def segmentation_proxy(image: np.ndarray, levels: int = 4) -> np.ndarray:
    """Label map from intensity quantization + 4-connected components."""
    gray = image.mean(axis=0)
    lo, hi = gray.min(), gray.max()
    quant = np.zeros_like(gray, dtype=int) if hi == lo else \
        np.minimum((levels * (gray - lo) / (hi - lo)).astype(int), levels - 1)
    h, w = quant.shape
    labels = np.full((h, w), -1, dtype=int)
    current = 0
    for si in range(h):
        for sj in range(w):
            if labels[si, sj] >= 0:
                continue
            stack = [(si, sj)]
            labels[si, sj] = current
            while stack:
                i, j = stack.pop()
                for ni, nj in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
                    if 0 <= ni < h and 0 <= nj < w and labels[ni, nj] < 0 \
                            and quant[ni, nj] == quant[i, j]:
                        labels[ni, nj] = current
                        stack.append((ni, nj))
            current += 1
    return (labels / max(current - 1, 1))[None]


# ---------------------------------------------------------------------------
# denoiser


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int
    base_channels: int = 16
    levels: int = 3
    time_dim: int = 32
    cond_slots: tuple[tuple[str, int], ...] = ()
    global_dim: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("need at least one level")
        for tag, ch in self.cond_slots:
            if tag not in CONDITION_TAGS:
                raise ValueError(f"unknown condition tag {tag!r}")
            if ch < 1:
                raise ValueError("condition slot needs at least one channel")
        tags = [t for t, _ in self.cond_slots]
        if len(tags) != len(set(tags)):
            raise ValueError("duplicate condition tags")

    @property
    def level_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2**i for i in range(self.levels))

    def to_dict(self) -> dict:
        return {
            "latent_channels": self.latent_channels,
            "base_channels": self.base_channels,
            "levels": self.levels,
            "time_dim": self.time_dim,
            "cond_slots": [list(s) for s in self.cond_slots],
            "global_dim": self.global_dim,
        }


def denoiser_config_from_dict(d: dict) -> DenoiserConfig:
    return DenoiserConfig(
        latent_channels=d["latent_channels"],
        base_channels=d["base_channels"],
        levels=d["levels"],
        time_dim=d["time_dim"],
        cond_slots=tuple((tag, ch) for tag, ch in d["cond_slots"]),
        global_dim=d["global_dim"],
    )


def sinusoidal_embedding(t: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


class _ConvBlock:
    def __init__(self, c_in, c_out, rng, name):
        self.conv1 = nn.Conv2d(c_in, c_out, 3, rng.child(0), f"{name}.conv1")
        self.conv2 = nn.Conv2d(c_out, c_out, 3, rng.child(1), f"{name}.conv2")

    def __call__(self, x, bias=None, extra=None):
        h = self.conv1(x)
        if bias is not None:
            h = ad.add(h, ad.reshape(bias, (bias.shape[0], 1, 1)))
        if extra is not None:
            h = ad.add(h, extra)
        return ad.relu(self.conv2(ad.relu(h)))

    def parameters(self):
        return self.conv1.parameters() + self.conv2.parameters()


class ConditionalDenoiser:
    """Noise predictor: 3-level UNet plus a zero-convolution condition branch."""

    def __init__(self, config: DenoiserConfig, seed: int = 0):
        self.config = config
        rng = RandomSource(seed)
        chans = config.level_channels
        td = config.time_dim
        self.time_fc1 = nn.Linear(td, td, rng.child(0), "time.fc1")
        self.time_fc2 = nn.Linear(td, td, rng.child(1), "time.fc2")
        self.time_proj = [nn.Linear(td, chans[i], rng.child(2 + i), f"time.level{i}")
                          for i in range(config.levels)]
        if config.global_dim:
            # zero-init keeps conditional == unconditional at initialization
            self.global_proj = nn.Linear(config.global_dim, td, rng.child(9),
                                         "global.proj", zero_init=True)
        else:
            self.global_proj = None

        self.conv_in = nn.Conv2d(config.latent_channels, chans[0], 3, rng.child(10), "conv_in")
        self.enc = [_ConvBlock(chans[max(i - 1, 0)], chans[i], rng.child(20 + i), f"enc{i}")
                    for i in range(config.levels)]
        self.dec = []
        for i in range(config.levels - 2, -1, -1):
            self.dec.append(_ConvBlock(chans[i] + chans[i + 1], chans[i],
                                       rng.child(40 + i), f"dec{i}"))
        self.head = nn.Conv2d(chans[0], config.latent_channels, 3, rng.child(60),
                              "head", zero_init=True)

        self.cond_channels = sum(ch for _, ch in config.cond_slots)
        if self.cond_channels:
            self.cond_in = nn.Conv2d(self.cond_channels, chans[0], 3, rng.child(70), "cond_in")
            self.cond_blocks = [
                _ConvBlock(chans[max(i - 1, 0)], chans[i], rng.child(80 + i), f"cond{i}")
                for i in range(config.levels)
            ]
            # one zero-conv per encoder scale plus one at the pre-head scale,
            # so conditioning has a direct route to the output
            self.zero_convs = [
                nn.Conv2d(chans[i], chans[i], 1, rng.child(90 + i), f"zero{i}",
                          padding="valid", zero_init=True)
                for i in range(config.levels)
            ]
            self.zero_out = nn.Conv2d(chans[0], chans[0], 1, rng.child(99), "zero_out",
                                      padding="valid", zero_init=True)
        else:
            self.cond_in = None
            self.cond_blocks = []
            self.zero_convs = []
            self.zero_out = None

    def parameters(self):
        out = self.time_fc1.parameters() + self.time_fc2.parameters()
        for proj in self.time_proj:
            out += proj.parameters()
        if self.global_proj is not None:
            out += self.global_proj.parameters()
        out += self.conv_in.parameters()
        for block in self.enc + self.dec:
            out += block.parameters()
        out += self.head.parameters()
        if self.cond_in is not None:
            out += self.cond_in.parameters()
            for block in self.cond_blocks:
                out += block.parameters()
            for zc in self.zero_convs:
                out += zc.parameters()
            out += self.zero_out.parameters()
        return out

    def _stack_condition_input(self, stack: ConditionStack | None,
                               h: int, w: int) -> np.ndarray | None:
        """Fixed slot layout; absent tags become zero maps."""
        if not self.cond_channels:
            return None
        if stack is None or not stack.spatial:
            return None
        stack = _resize_stack(stack, h, w)
        parts = []
        seen = False
        for tag, ch in self.config.cond_slots:
            cmap = stack.spatial.get(tag)
            if cmap is None:
                parts.append(np.zeros((ch, h, w)))
            else:
                if cmap.shape[0] != ch:
                    raise ValueError(
                        f"condition {tag} has {cmap.shape[0]} channels, slot expects {ch}"
                    )
                parts.append(cmap)
                seen = True
        return np.concatenate(parts, axis=0) if seen else None

    def condition_features(self, stack: ConditionStack | None, h: int, w: int):
        """Zero-convolved condition features: (per-encoder-scale, pre-head).

        Returns None when the stack carries nothing for the slots; every
        returned map is exactly zero at initialization.
        """
        cond_input = self._stack_condition_input(stack, h, w)
        if cond_input is None:
            return None
        feat = ad.relu(self.cond_in(Tensor(cond_input)))
        outs = []
        top_feat = None
        for i, (block, zc) in enumerate(zip(self.cond_blocks, self.zero_convs)):
            feat = block(feat)
            if i == 0:
                top_feat = feat
            outs.append(zc(feat))
            if i + 1 < len(self.cond_blocks):
                feat = ad.bilinear_resize(feat, max(feat.shape[1] // 2, 1),
                                          max(feat.shape[2] // 2, 1))
        return outs, self.zero_out(top_feat)

    def forward(self, z_t, t: int, conditions: ConditionStack | None = None) -> Tensor:
        z_t = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
        _, h, w = z_t.shape
        div = 2 ** (self.config.levels - 1)
        if h % div or w % div:
            raise ValueError(f"latent extents {h}x{w} must be divisible by {div}")

        emb = Tensor(sinusoidal_embedding(t, self.config.time_dim))
        if self.global_proj is not None and conditions is not None \
                and conditions.global_embedding is not None:
            emb = ad.add(emb, self.global_proj(Tensor(conditions.global_embedding)))
        emb = self.time_fc2(ad.relu(self.time_fc1(emb)))

        cond_feats = self.condition_features(conditions, h, w)
        level_feats, top_feat = cond_feats if cond_feats is not None else (None, None)

        feat = ad.relu(self.conv_in(z_t))
        skips = []
        for i, block in enumerate(self.enc):
            extra = level_feats[i] if level_feats is not None else None
            feat = block(feat, bias=self.time_proj[i](emb), extra=extra)
            if i + 1 < len(self.enc):
                skips.append(feat)
                feat = ad.bilinear_resize(feat, feat.shape[1] // 2, feat.shape[2] // 2)
        for block, skip in zip(self.dec, reversed(skips)):
            feat = ad.bilinear_resize(feat, skip.shape[1], skip.shape[2])
            feat = block(ad.concat([feat, skip], axis=0))
        if top_feat is not None:
            feat = ad.add(feat, top_feat)
        return self.head(feat)

    def predict(self, z_t: np.ndarray, t: int,
                conditions: ConditionStack | None = None) -> np.ndarray:
        return self.forward(z_t, t, conditions).data


# ---------------------------------------------------------------------------
# loss, training, sampling


def diffusion_loss(model: ConditionalDenoiser, schedule: NoiseSchedule,
                   z0: np.ndarray, t: int, eps: np.ndarray,
                   conditions: ConditionStack | None = None) -> Tensor:
    """Squared error between true and predicted noise (differentiable)."""
    z_t = forward_noise(z0, t, eps, schedule)
    eps_hat = model.forward(z_t, t, conditions)
    return nn.mse_loss(eps_hat, Tensor(eps))


def train_diffusion(latents, model: ConditionalDenoiser, schedule: NoiseSchedule,
                    steps: int, batch_size: int = 4, lr: float = 2e-3,
                    seed: int = 0, conditions=None, weight_decay: float = 0.0,
                    tail_frac: float = 0.3) -> list[float]:
    """Train the noise predictor on a fixed set of latents.

    conditions, when given, is one ConditionStack per latent. Deterministic
    under a fixed seed; returns the per-step batch loss trace.
    """
    if len(latents) == 0:
        raise ValueError("empty training set")
    rng = RandomSource(seed)
    opt = nn.Adam(model.parameters(), lr=lr, betas=(0.9, 0.99),
                  weight_decay=weight_decay)
    warmup = max(int(steps * 0.02), 1)
    tail_start = int(steps * (1.0 - tail_frac))
    trace = []
    t_max = schedule.timesteps
    for step in range(steps):
        opt.lr = lr * nn.warmup_flat_cosine(step, steps, warmup, tail_start)
        srng = rng.child(step)
        total = None
        for b in range(batch_size):
            idx = int(srng.integers(0, len(latents)))
            t = int(srng.integers(1, t_max + 1))
            eps = srng.normal(latents[idx].shape)
            cond = conditions[idx] if conditions is not None else None
            loss = diffusion_loss(model, schedule, latents[idx], t, eps, cond)
            total = loss if total is None else ad.add(total, loss)
        total = ad.mul(total, 1.0 / batch_size)
        value = float(total.data)
        if not np.isfinite(value):
            raise nn.NumericalFailure(f"NaN/inf diffusion loss at step {step}")
        opt.zero_grad()
        ad.backward(total)
        opt.step()
        trace.append(value)
    return trace


def sample(model: ConditionalDenoiser, schedule: NoiseSchedule, steps: int,
           conditions: ConditionStack | None, codec, seed: int,
           image_shape) -> np.ndarray:
    """DDIM sampling from seeded Gaussian noise, decoded to an image."""
    latent_shape = codec.latent_shape(image_shape)
    z = RandomSource(seed).normal(latent_shape)
    if conditions is not None:
        conditions = _resize_stack(conditions, latent_shape[1], latent_shape[2])
    ts = timestep_subsequence(schedule.timesteps, steps)
    for t, t_prev in zip(ts[:-1], ts[1:]):
        eps_hat = model.predict(z, int(t), conditions)
        z = ddim_step(z, eps_hat, int(t), int(t_prev), schedule)
    return codec.decode(z)


def dsrnet_super_resolve(lr_rgb: np.ndarray, model: ConditionalDenoiser,
                         schedule: NoiseSchedule, steps: int, seed: int,
                         scale: int, codec=None) -> np.ndarray:
    """RGB super-resolution: bilinear-upsampled input enters as `lowres`
    condition and sampling runs at the high-resolution extents."""
    if scale not in (2, 4):
        raise ValueError("scale must be 2 or 4")
    codec = codec if codec is not None else IdentityCodec()
    _, h, w = lr_rgb.shape
    upsampled = ad.bilinear_resize_array(np.asarray(lr_rgb, dtype=np.float64),
                                         h * scale, w * scale)
    cond = ConditionStack({"lowres": upsampled})
    out = sample(model, schedule, steps, cond, codec, seed,
                 (lr_rgb.shape[0], h * scale, w * scale))
    return np.clip(out, 0.0, 1.0)


def augment_two_stage(cubes, dsrnet: ConditionalDenoiser, schedule: NoiseSchedule,
                      rgan_model: RganModel, scale: int, patch_size: int,
                      stride: int | None = None, steps: int = 8, seed: int = 0,
                      codec=None):
    """Two-stage augmentation: RGB SR first, then guided cube SR, then crop.

    Returns (patches, manifest_rows); each row records provenance: source
    cube index, patch origin in the upscaled cube, and the scale.
    """
    stride = stride if stride is not None else patch_size // 2
    patches: list[HsiCube] = []
    manifest: list[dict] = []
    for ci, cube in enumerate(cubes):
        rgb = extract_rgb(cube)
        hr_rgb = dsrnet_super_resolve(rgb.values, dsrnet, schedule, steps,
                                      seed=RandomSource(seed).child(ci).integers(0, 2**31),
                                      scale=scale, codec=codec)
        hr_cube = rgan_forward(cube, hr_rgb, rgan_model)
        grid = crop_patches(hr_cube, patch_size, stride)
        for pi, (patch, origin) in enumerate(zip(iter_patches(hr_cube, grid), grid.origins)):
            patches.append(patch)
            manifest.append({
                "source": ci,
                "patch": pi,
                "origin": [int(origin[0]), int(origin[1])],
                "scale": scale,
                "patch_size": patch_size,
                "stride": stride,
            })
    return patches, manifest


# ---------------------------------------------------------------------------
# checkpoints


def save_diffusion(path, model: ConditionalDenoiser, schedule: NoiseSchedule,
                   codec) -> None:
    config = {
        "denoiser": model.config.to_dict(),
        "schedule": {
            "timesteps": schedule.timesteps,
            "beta_start": schedule.beta_start,
            "beta_end": schedule.beta_end,
        },
        "codec": {
            "kind": codec.kind,
            "factor": getattr(codec, "factor", 1),
            "image_channels": getattr(codec, "image_channels", 0),
            "latent_channels": getattr(codec, "latent_channels", 0),
        },
    }
    params = list(model.parameters())
    if hasattr(codec, "parameters"):
        params += codec.parameters()
    nn.save_checkpoint(path, "diffusion", config, params)


def load_diffusion(path):
    kind, config, values = nn.load_checkpoint(path)
    if kind != "diffusion":
        raise ValueError(f"{path}: checkpoint kind {kind!r}, expected 'diffusion'")
    model = ConditionalDenoiser(denoiser_config_from_dict(config["denoiser"]))
    sched = make_schedule(config["schedule"]["timesteps"],
                          config["schedule"]["beta_start"],
                          config["schedule"]["beta_end"])
    cc = config["codec"]
    codec = make_codec(cc["kind"], cc["factor"], cc["image_channels"],
                       cc["latent_channels"])
    params = list(model.parameters())
    if hasattr(codec, "parameters"):
        params += codec.parameters()
    nn.assign_parameters(params, values)
    return model, sched, codec
