"""Reverse-mode autodiff over dense float64 numpy arrays.

Desk-scale engine: tensors carry no batch axis, every op is explicit, and
broadcasting is restricted to bias-style addition (trailing-shape or
size-1 axes). Convolution uses the cross-correlation convention of
mainstream deep-learning frameworks (no kernel flip).
"""

from __future__ import annotations

import numpy as np

Array = np.ndarray

# Block size (in float64 elements) for the im2col buffers used by conv2d.
_CONV_BLOCK_ELEMS = 4_000_000


class RandomSource:
    """Deterministic counter-based random stream (Philox).

    The same seed yields the same sample stream on every run and thread
    count. `child(*key)` derives an independent stream from (seed, key)
    only, so work split across threads stays reproducible.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = tuple(int(k) for k in _key)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self._key)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *key: int) -> "RandomSource":
        return RandomSource(self.seed, self._key + tuple(int(k) for k in key))

    def normal(self, shape=(), loc: float = 0.0, scale: float = 1.0) -> Array:
        return self._gen.normal(loc, scale, size=shape)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> Array:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> Array:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> Array:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> Array:
        return self._gen.choice(n, size=size, replace=replace)


class Tensor:
    """Node of the computation graph holding a float64 array."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp", "_needs")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._needs = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = self.name or ("param" if self.requires_grad else "tensor")
        return f"Tensor({tag}, shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class Parameter(Tensor):
    """Trainable leaf: value plus an accumulating gradient buffer."""

    def __init__(self, value, name: str):
        super().__init__(value, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def reset_grad(self) -> None:
        self.grad.fill(0.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: Array, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    needing = tuple(p for p in parents if p._needs)
    if needing:
        out._parents = needing
        out._vjp = vjp
        out._needs = True
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable requires_grad leaf.

    A second call without resetting gradients adds on top of the first.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    # Iterative post-order topo sort; graphs can be deep.
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and node._vjp is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._vjp is not None:
            for parent, pg in node._vjp(g):
                if not parent._needs:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def vjp(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _node(data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def vjp(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _node(data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def vjp(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        )

    return _node(data, (a, b), vjp)


def reshape(t: Tensor, shape) -> Tensor:
    t = as_tensor(t)
    old = t.shape
    data = t.data.reshape(shape)

    def vjp(g):
        return ((t, g.reshape(old)),)

    return _node(data, (t,), vjp)


def transpose(t: Tensor, axes) -> Tensor:
    t = as_tensor(t)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = t.data.transpose(axes)

    def vjp(g):
        return ((t, g.transpose(inverse)),)

    return _node(data, (t,), vjp)


def concat(tensors, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    extents = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + extents)

    def vjp(g):
        out = []
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            out.append((t, g[tuple(idx)]))
        return out

    return _node(data, tuple(ts), vjp)


def split(t: Tensor, sections: int, axis: int) -> list[Tensor]:
    t = as_tensor(t)
    extent = t.shape[axis]
    if extent % sections != 0:
        raise ValueError(f"axis extent {extent} not divisible into {sections} sections")
    step = extent // sections
    parts = []
    for i in range(sections):
        idx = [slice(None)] * t.ndim
        idx[axis] = slice(i * step, (i + 1) * step)
        idx = tuple(idx)

        def vjp(g, idx=idx):
            full = np.zeros_like(t.data)
            full[idx] = g
            return ((t, full),)

        parts.append(_node(t.data[idx], (t,), vjp))
    return parts


def crop2d(t: Tensor, h0: int, h1: int, w0: int, w1: int) -> Tensor:
    """Spatial crop of a [C,H,W] tensor to rows [h0,h1) and cols [w0,w1)."""
    t = as_tensor(t)
    data = t.data[:, h0:h1, w0:w1]

    def vjp(g):
        full = np.zeros_like(t.data)
        full[:, h0:h1, w0:w1] = g
        return ((t, full),)

    return _node(data, (t,), vjp)


def _reflect_index(n: int, before: int, after: int) -> Array:
    return np.pad(np.arange(n), (before, after), mode="reflect")


def pad_reflect2d(t: Tensor, pad_h: tuple[int, int], pad_w: tuple[int, int]) -> Tensor:
    """Reflect-pad the spatial axes of a [C,H,W] tensor."""
    t = as_tensor(t)
    _, h, w = t.shape
    rows = _reflect_index(h, *pad_h)
    cols = _reflect_index(w, *pad_w)
    data = t.data[:, rows][:, :, cols]

    def vjp(g):
        tmp = np.zeros((t.shape[0], h, g.shape[2]))
        np.add.at(tmp, (slice(None), rows), g)
        gx = np.zeros_like(t.data)
        np.add.at(gx, (slice(None), slice(None), cols), tmp)
        return ((t, gx),)

    return _node(data, (t,), vjp)


# ---------------------------------------------------------------------------
# reductions


def tsum(t: Tensor, axis=None) -> Tensor:
    t = as_tensor(t)
    data = t.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return ((t, np.broadcast_to(g, t.shape).copy()),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        ge = np.expand_dims(g, tuple(a % t.ndim for a in axes))
        return ((t, np.broadcast_to(ge, t.shape).copy()),)

    return _node(data, (t,), vjp)


def mean(t: Tensor, axis=None) -> Tensor:
    t = as_tensor(t)
    if axis is None:
        count = t.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([t.shape[a % t.ndim] for a in axes]))
    return mul(tsum(t, axis=axis), 1.0 / count)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(t: Tensor) -> Tensor:
    t = as_tensor(t)
    mask = t.data > 0
    data = np.where(mask, t.data, 0.0)

    def vjp(g):
        return ((t, g * mask),)

    return _node(data, (t,), vjp)


def sigmoid(t: Tensor) -> Tensor:
    t = as_tensor(t)
    x = t.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def vjp(g):
        return ((t, g * data * (1.0 - data)),)

    return _node(data, (t,), vjp)


def absolute(t: Tensor) -> Tensor:
    t = as_tensor(t)
    data = np.abs(t.data)

    def vjp(g):
        return ((t, g * np.sign(t.data)),)

    return _node(data, (t,), vjp)


def softmax(t: Tensor, axis: int) -> Tensor:
    """Max-stabilized softmax along `axis`; rows sum to 1."""
    t = as_tensor(t)
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return ((t, data * (g - dot)),)

    return _node(data, (t,), vjp)


def layer_norm(t: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize over one axis, then apply learnable scale and shift."""
    t, gamma, beta = as_tensor(t), as_tensor(gamma), as_tensor(beta)
    ax = axis % t.ndim
    n = t.shape[ax]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ValueError("layer_norm scale/shift must match the normalized extent")
    shape = [1] * t.ndim
    shape[ax] = n
    gb = gamma.data.reshape(shape)
    bb = beta.data.reshape(shape)

    mu = t.data.mean(axis=ax, keepdims=True)
    var = t.data.var(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (t.data - mu) * inv
    data = gb * xhat + bb

    reduce_axes = tuple(i for i in range(t.ndim) if i != ax)

    def vjp(g):
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        gg = g * gb
        m1 = gg.mean(axis=ax, keepdims=True)
        m2 = (gg * xhat).mean(axis=ax, keepdims=True)
        dx = inv * (gg - m1 - xhat * m2)
        return ((t, dx), (gamma, dgamma), (beta, dbeta))

    return _node(data, (t, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# linear / matmul


def linear(t: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis: y = x @ W.T + b, W is [D_out, D_in]."""
    t, weight = as_tensor(t), as_tensor(weight)
    d_out, d_in = weight.shape
    if t.shape[-1] != d_in:
        raise ValueError(f"linear: input extent {t.shape[-1]} != weight D_in {d_in}")
    lead = t.shape[:-1]
    x2 = t.data.reshape(-1, d_in)
    y2 = x2 @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (d_out,):
            raise ValueError(f"linear: bias shape {bias.shape} != ({d_out},)")
        y2 = y2 + bias.data
    data = y2.reshape(lead + (d_out,))

    parents = (t, weight) if bias is None else (t, weight, bias)

    def vjp(g):
        g2 = g.reshape(-1, d_out)
        out = [(t, (g2 @ weight.data).reshape(t.shape)), (weight, g2.T @ x2)]
        if bias is not None:
            out.append((bias, g2.sum(axis=0)))
        return out

    return _node(data, parents, vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Stacked matrix product; leading (batch) dims must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: leading dims differ {a.shape} vs {b.shape}")
    data = np.matmul(a.data, b.data)

    def vjp(g):
        return (
            (a, np.matmul(g, np.swapaxes(b.data, -1, -2))),
            (b, np.matmul(np.swapaxes(a.data, -1, -2), g)),
        )

    return _node(data, (a, b), vjp)


# ---------------------------------------------------------------------------
# conv2d


def _corr2d(x: Array, kernel: Array, padding: int) -> Array:
    """Blocked im2col cross-correlation of [C_in,H,W] with [C_out,C_in,k,k]."""
    c_in, h, w = x.shape
    c_out, ck, kh, kw = kernel.shape
    if ck != c_in:
        raise ValueError(f"conv2d: kernel expects {ck} input channels, got {c_in}")
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = x.shape[1] - kh + 1
    wo = x.shape[2] - kw + 1
    if ho <= 0 or wo <= 0:
        raise ValueError("conv2d: kernel larger than padded input")
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    km = kernel.reshape(c_out, -1)
    out = np.empty((c_out, ho, wo))
    block = max(1, _CONV_BLOCK_ELEMS // (c_in * kh * kw * wo))
    for r0 in range(0, ho, block):
        r1 = min(r0 + block, ho)
        cols = windows[:, r0:r1].transpose(1, 2, 0, 3, 4).reshape((r1 - r0) * wo, -1)
        out[:, r0:r1] = (km @ cols.T).reshape(c_out, r1 - r0, wo)
    return out


def _corr2d_kernel_grad(x: Array, g: Array, kh: int, kw: int, padding: int) -> Array:
    c_in = x.shape[0]
    c_out, ho, wo = g.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    dk = np.zeros((c_out, c_in * kh * kw))
    block = max(1, _CONV_BLOCK_ELEMS // (c_in * kh * kw * wo))
    for r0 in range(0, ho, block):
        r1 = min(r0 + block, ho)
        cols = windows[:, r0:r1].transpose(1, 2, 0, 3, 4).reshape((r1 - r0) * wo, -1)
        dk += g[:, r0:r1].reshape(c_out, -1) @ cols
    return dk.reshape(c_out, c_in, kh, kw)


def conv2d(t: Tensor, kernel: Tensor, padding: int = 0) -> Tensor:
    """2-D cross-correlation of [C_in,H,W] with a [C_out,C_in,k,k] kernel.

    k must be odd and padding either 0 or (k-1)//2 (same-padding).
    """
    t, kernel = as_tensor(t), as_tensor(kernel)
    if t.ndim != 3 or kernel.ndim != 4:
        raise ValueError("conv2d expects input [C,H,W] and kernel [C_out,C_in,k,k]")
    kh, kw = kernel.shape[2], kernel.shape[3]
    if kh != kw or kh % 2 == 0:
        raise ValueError("conv2d kernel must be square with odd extent")
    if padding not in (0, (kh - 1) // 2):
        raise ValueError(f"conv2d padding must be 0 or {(kh - 1) // 2}")
    data = _corr2d(t.data, kernel.data, padding)

    def vjp(g):
        out = []
        if t._needs:
            flipped = np.flip(kernel.data, axis=(2, 3)).transpose(1, 0, 2, 3)
            gx = _corr2d(g, flipped, kh - 1 - padding)
            out.append((t, gx))
        if kernel._needs:
            out.append((kernel, _corr2d_kernel_grad(t.data, g, kh, kw, padding)))
        return out

    return _node(data, (t, kernel), vjp)


# ---------------------------------------------------------------------------
# resampling


def _interp_matrix(n_out: int, n_in: int) -> Array:
    """Row-stochastic 1-D linear interpolation matrix (half-pixel centers)."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


def bilinear_resize(t: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resample of a [C,H,W] tensor to [C,out_h,out_w]."""
    t = as_tensor(t)
    if t.ndim != 3:
        raise ValueError("bilinear_resize expects a [C,H,W] tensor")
    _, h, w = t.shape
    rmat = _interp_matrix(out_h, h)
    cmat = _interp_matrix(out_w, w)
    data = np.matmul(np.matmul(rmat, t.data), cmat.T)

    def vjp(g):
        return ((t, np.matmul(np.matmul(rmat.T, g), cmat)),)

    return _node(data, (t,), vjp)


def bilinear_resize_array(x: Array, out_h: int, out_w: int) -> Array:
    """Non-graph variant of bilinear_resize for plain arrays."""
    rmat = _interp_matrix(out_h, x.shape[1])
    cmat = _interp_matrix(out_w, x.shape[2])
    return np.matmul(np.matmul(rmat, x), cmat.T)


def gaussian_sample(source: RandomSource, shape) -> Tensor:
    """Seeded standard-normal constant tensor."""
    return Tensor(source.normal(shape))
