"""Layers, optimizer and checkpoint I/O shared by the two model families."""

from __future__ import annotations

import json
import struct

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, RandomSource, Tensor

CHECKPOINT_MAGIC = b"SGCKPT\x00\x01"


class NumericalFailure(RuntimeError):
    """Raised when training or sampling produces non-finite values."""


def he_normal(rng: RandomSource, shape, fan_in: int) -> np.ndarray:
    return rng.normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d:
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: RandomSource,
                 name: str, padding: str = "same", zero_init: bool = False):
        self.padding = (kernel - 1) // 2 if padding == "same" else 0
        if zero_init:
            w = np.zeros((c_out, c_in, kernel, kernel))
        else:
            w = he_normal(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel)
        self.weight = Parameter(w, name=f"{name}.weight")
        self.bias = Parameter(np.zeros(c_out), name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.conv2d(x, self.weight, padding=self.padding)
        return ad.add(y, ad.reshape(self.bias, (self.bias.shape[0], 1, 1)))

    def parameters(self):
        return [self.weight, self.bias]


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: RandomSource, name: str,
                 zero_init: bool = False):
        if zero_init:
            w = np.zeros((d_out, d_in))
        else:
            w = he_normal(rng, (d_out, d_in), d_in)
        self.weight = Parameter(w, name=f"{name}.weight")
        self.bias = Parameter(np.zeros(d_out), name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]


class LayerNorm:
    def __init__(self, dim: int, name: str, axis: int = -1):
        self.axis = axis
        self.gamma = Parameter(np.ones(dim), name=f"{name}.gamma")
        self.beta = Parameter(np.zeros(dim), name=f"{name}.beta")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, axis=self.axis)

    def parameters(self):
        return [self.gamma, self.beta]


class Adam:
    """Adam with optional decoupled weight decay (AdamW when decay > 0).

    lr_mults gives a per-parameter learning-rate multiplier (e.g. to train
    zero-initialized position embeddings faster).
    """

    def __init__(self, params: list[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, lr_mults: list[float] | None = None):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.lr_mults = list(lr_mults) if lr_mults is not None else [1.0] * len(self.params)
        if len(self.lr_mults) != len(self.params):
            raise ValueError("lr_mults length must match params")
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.reset_grad()

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, m, v, mult in zip(self.params, self._m, self._v, self.lr_mults):
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NumericalFailure(f"non-finite gradient in {p.name}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            step_lr = self.lr * mult
            if self.weight_decay:
                p.data -= step_lr * self.weight_decay * p.data
            p.data -= step_lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def warmup_flat_cosine(step: int, steps: int, warmup: int, tail_start: int) -> float:
    """LR factor: linear warmup, flat plateau, cosine tail to zero."""
    if step < warmup:
        return (step + 1) / warmup
    if step < tail_start:
        return 1.0
    span = max(steps - tail_start, 1)
    return 0.5 * (1.0 + np.cos(np.pi * (step - tail_start) / span))


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    return ad.mean(ad.absolute(ad.sub(pred, target)))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    diff = ad.sub(pred, target)
    return ad.mean(ad.mul(diff, diff))


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + raw float32 little-endian payloads


def save_checkpoint(path, kind: str, config: dict, params: list[Parameter]) -> None:
    manifest = {
        "format": "spectragen-checkpoint-v1",
        "kind": kind,
        "config": config,
        "parameters": [{"name": p.name, "shape": list(p.shape)} for p in params],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Return (kind, config, {name: float64 array})."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a spectragen checkpoint")
        (n,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(n).decode("utf-8"))
        values = {}
        for entry in manifest["parameters"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 4)
            if len(raw) != count * 4:
                raise ValueError(f"{path}: truncated payload for {entry['name']}")
            values[entry["name"]] = (
                np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
            )
    return manifest["kind"], manifest["config"], values


def assign_parameters(params: list[Parameter], values: dict) -> None:
    for p in params:
        if p.name not in values:
            raise ValueError(f"checkpoint missing parameter {p.name}")
        v = values[p.name]
        if v.shape != p.shape:
            raise ValueError(f"checkpoint shape mismatch for {p.name}: {v.shape} vs {p.shape}")
        p.data = v.copy()
        p.grad = np.zeros_like(p.data)
