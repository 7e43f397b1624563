"""Minimal tensor/NN substrate: reverse-mode autodiff over numpy arrays.

Tensors are row-major float32 by default (float64 is honored, which the
finite-difference checks use).  The op set is exactly what the adapter and
the toy denoiser need: conv2d, silu, group norm (compositional), pixel
(un)shuffle, nearest upsampling, concat, reductions.  Forward evaluation is
pure and thread-safe under immutable parameters; training is single-writer.
"""
from __future__ import annotations

import json
import struct
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .errors import InvalidLoss, ShapeError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph construction (sampling / pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(value, like_dtype=np.float32):
    arr = np.asarray(value)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(like_dtype)
    return arr


class Tensor:
    """Autodiff node: ndarray payload plus an optional backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents if (requires_grad and _GRAD_ENABLED) else ()
        self._backward = backward if (requires_grad and _GRAD_ENABLED) else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise InvalidLoss(f"loss must be scalar, got shape {self.shape}")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable (or frozen) tensor; frozen parameters never receive grads."""

    __slots__ = ("frozen",)

    def __init__(self, data, frozen=False):
        super().__init__(data, requires_grad=not frozen)
        self.frozen = bool(frozen)
        self.grad = np.zeros_like(self.data)

    def freeze(self):
        self.frozen = True
        self.requires_grad = False
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


def backprop(loss: Tensor) -> None:
    """Reverse-mode gradients for every non-frozen parameter in the graph."""
    loss.backward()


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(data, parents, backward):
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, parents=parents, backward=backward)


# ---------------------------------------------------------------------------
# Elementwise / reduction ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bwd)


def power(a, p: float) -> Tensor:
    a = _wrap(a)
    out_data = a.data ** p

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * p * a.data ** (p - 1))

    return _make(out_data, (a,), bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # overflow-free in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a) -> Tensor:
    a = _wrap(a)
    sig = _sigmoid(a.data)
    out_data = a.data * sig

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * sig * (1.0 + a.data * (1.0 - sig)))

    return _make(out_data, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    orig = a.shape
    out_data = a.data.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape(orig))

    return _make(out_data, (a,), bwd)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.size / out_data.size

    def bwd(g):
        if not a.requires_grad:
            return
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        a._accumulate(np.broadcast_to(gg, a.shape) / count)

    return _make(out_data, (a,), bwd)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not a.requires_grad:
            return
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return _make(out_data, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(out_data, (a, b), bwd)


def mse(a, b) -> Tensor:
    """Mean squared error over every element."""
    d = sub(a, b)
    return mean(mul(d, d))


def concat(tensors, axis=1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(out_data, tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# Spatial ops
# ---------------------------------------------------------------------------

def conv2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation, NCHW; stride in {1, 2}; symmetric zero padding."""
    x, weight = _wrap(x), _wrap(weight)
    if bias is not None:
        bias = _wrap(bias)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and FCKK weight")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if cw != c:
        raise ShapeError(f"weight expects {cw} input channels, input has {c}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError("kernel larger than padded input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    out_flat = np.zeros((n * oh * ow, f), dtype=x.data.dtype)
    cols = {}
    for ki in range(kh):
        for kj in range(kw):
            sl = xp[:, :, ki : ki + stride * (oh - 1) + 1 : stride,
                    kj : kj + stride * (ow - 1) + 1 : stride]
            col = sl.transpose(0, 2, 3, 1).reshape(-1, c)
            cols[(ki, kj)] = col
            out_flat += col @ weight.data[:, :, ki, kj].T
    out_data = out_flat.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
    if bias is not None:
        if bias.shape != (f,):
            raise ShapeError(f"bias must have shape ({f},)")
        out_data = out_data + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        g_flat = g.transpose(0, 2, 3, 1).reshape(-1, f)
        if weight.requires_grad:
            dw = np.empty_like(weight.data)
            for (ki, kj), col in cols.items():
                dw[:, :, ki, kj] = g_flat.T @ col
            weight._accumulate(dw)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding),
                           dtype=x.data.dtype)
            for ki in range(kh):
                for kj in range(kw):
                    dcol = g_flat @ weight.data[:, :, ki, kj]
                    dsl = dcol.reshape(n, oh, ow, c).transpose(0, 3, 1, 2)
                    dxp[:, :, ki : ki + stride * (oh - 1) + 1 : stride,
                        kj : kj + stride * (ow - 1) + 1 : stride] += dsl
            if padding:
                dxp = dxp[:, :, padding : padding + h, padding : padding + w]
            x._accumulate(dxp)

    return _make(out_data, parents, bwd)


def pixel_unshuffle(x, r: int) -> Tensor:
    """Space-to-depth: [N,C,H,W] -> [N, C*r*r, H/r, W/r]; exact and invertible."""
    x = _wrap(x)
    if x.data.ndim != 4:
        raise ShapeError("pixel_unshuffle expects NCHW")
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"spatial dims ({h},{w}) not divisible by r={r}")
    out_data = (x.data.reshape(n, c, h // r, r, w // r, r)
                .transpose(0, 1, 3, 5, 2, 4)
                .reshape(n, c * r * r, h // r, w // r))

    def bwd(g):
        if x.requires_grad:
            gi = (g.reshape(n, c, r, r, h // r, w // r)
                  .transpose(0, 1, 4, 2, 5, 3)
                  .reshape(n, c, h, w))
            x._accumulate(gi)

    return _make(out_data, (x,), bwd)


def pixel_shuffle(x, r: int) -> Tensor:
    """Depth-to-space inverse of pixel_unshuffle."""
    x = _wrap(x)
    n, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"channels {c} not divisible by r^2={r * r}")
    co = c // (r * r)
    out_data = (x.data.reshape(n, co, r, r, h, w)
                .transpose(0, 1, 4, 2, 5, 3)
                .reshape(n, co, h * r, w * r))

    def bwd(g):
        if x.requires_grad:
            gi = (g.reshape(n, co, h, r, w, r)
                  .transpose(0, 1, 3, 5, 2, 4)
                  .reshape(n, c, h, w))
            x._accumulate(gi)

    return _make(out_data, (x,), bwd)


def upsample_to(x, target_hw) -> Tensor:
    """Nearest-neighbour resize to an exact spatial target."""
    x = _wrap(x)
    n, c, h, w = x.shape
    th, tw = target_hw
    rows = (np.arange(th) * h) // th
    colsel = (np.arange(tw) * w) // tw
    out_data = x.data[:, :, rows][:, :, :, colsel]

    def bwd(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            np.add.at(dx, (slice(None), slice(None), rows[:, None], colsel[None, :]), g)
            x._accumulate(dx)

    return _make(out_data, (x,), bwd)


def group_norm(x, gamma, beta, groups: int, eps: float = 1e-5) -> Tensor:
    """Composed from primitive ops so the backward pass is exact by construction."""
    n, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"channels {c} not divisible by {groups} groups")
    xg = reshape(x, (n, groups, (c // groups) * h * w))
    mu = mean(xg, axis=2, keepdims=True)
    centered = sub(xg, mu)
    var = mean(mul(centered, centered), axis=2, keepdims=True)
    inv = power(add(var, eps), -0.5)
    xhat = reshape(mul(centered, inv), (n, c, h, w))
    gamma_b = reshape(gamma, (1, c, 1, 1))
    beta_b = reshape(beta, (1, c, 1, 1))
    return add(mul(xhat, gamma_b), beta_b)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Conv2d:
    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, rng=None,
                 init="kaiming", frozen=False, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        if init == "zeros":
            w = np.zeros((c_out, c_in, kernel, kernel), dtype=dtype)
        else:
            bound = np.sqrt(6.0 / (c_in * kernel * kernel))
            w = rng.uniform(-bound, bound,
                            size=(c_out, c_in, kernel, kernel)).astype(dtype)
        self.weight = Parameter(w, frozen=frozen)
        self.bias = Parameter(np.zeros(c_out, dtype=dtype), frozen=frozen)
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def params(self, prefix):
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class Linear:
    # weight stored [d_in, d_out] so the forward is a plain matmul
    def __init__(self, d_in, d_out, rng=None, init="kaiming", dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        if init == "zeros":
            w = np.zeros((d_in, d_out), dtype=dtype)
        else:
            bound = np.sqrt(6.0 / d_in)
            w = rng.uniform(-bound, bound, size=(d_in, d_out)).astype(dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out, dtype=dtype))

    def __call__(self, x):
        return add(matmul(x, self.weight), self.bias)

    def params(self, prefix):
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class GroupNorm:
    def __init__(self, channels, groups=None, dtype=np.float32):
        self.groups = min(groups or 8, channels)
        while channels % self.groups:
            self.groups -= 1
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))

    def __call__(self, x):
        return group_norm(x, self.gamma, self.beta, self.groups)

    def params(self, prefix):
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}


class Adam:
    """Adam over the non-frozen subset of the given parameters."""

    def __init__(self, params: dict, lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = {k: p for k, p in params.items() if not p.frozen}
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def finite_difference_check(build_loss, params: dict, n_samples=200,
                            h=1e-4, seed=0) -> float:
    """Max relative error between backprop and central finite differences.

    ``build_loss()`` must rebuild the graph from the current parameter data
    and return the scalar loss Tensor.  Coordinates are sampled across all
    non-frozen parameters with a fixed seed.
    """
    rng = np.random.default_rng(seed)
    live = {k: p for k, p in params.items() if not p.frozen}
    for p in live.values():
        p.zero_grad()
    build_loss().backward()
    grads = {k: p.grad.copy() for k, p in live.items()}

    coords = []
    for k, p in live.items():
        for flat in range(p.data.size):
            coords.append((k, flat))
    if len(coords) > n_samples:
        pick = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[i] for i in pick]

    worst = 0.0
    for k, flat in coords:
        p = live[k]
        orig = p.data.flat[flat]
        step = h * max(1.0, abs(orig))
        p.data.flat[flat] = orig + step
        lp = float(build_loss().data)
        p.data.flat[flat] = orig - step
        lm = float(build_loss().data)
        p.data.flat[flat] = orig
        fd = (lp - lm) / (2 * step)
        ad = grads[k].flat[flat]
        rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-6)
        worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# TNSR1 tensor files and checkpoint directories
# ---------------------------------------------------------------------------

TNSR_MAGIC = b"TNSR1"


def save_tensor(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(TNSR_MAGIC)
        fh.write(struct.pack("B", arr.ndim))
        for dim in arr.shape:
            fh.write(struct.pack("<I", dim))
        fh.write(arr.tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != TNSR_MAGIC:
            raise ShapeError(f"{path}: not a TNSR1 file")
        rank = struct.unpack("B", fh.read(1))[0]
        shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(rank))
        payload = fh.read()
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return arr.copy()


def save_checkpoint(ckpt_dir, params: dict, meta: dict | None = None) -> None:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    layers = {}
    for name, p in params.items():
        save_tensor(ckpt_dir / f"{name}.tnsr", p.data)
        layers[name] = {"shape": list(p.data.shape), "frozen": bool(p.frozen)}
    manifest = {"schema": "checkpoint/v1", "layers": layers}
    manifest.update(meta or {})
    with open(ckpt_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(ckpt_dir):
    """Returns (name -> ndarray, manifest dict)."""
    ckpt_dir = Path(ckpt_dir)
    manifest_path = ckpt_dir / "manifest.json"
    if not manifest_path.exists():
        from .errors import NotLoaded
        raise NotLoaded(f"no checkpoint manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    tensors = {name: load_tensor(ckpt_dir / f"{name}.tnsr")
               for name in manifest["layers"]}
    return tensors, manifest


def assign_state(params: dict, tensors: dict) -> None:
    for name, p in params.items():
        if name not in tensors:
            from .errors import NotLoaded
            raise NotLoaded(f"checkpoint missing layer {name}")
        if tuple(tensors[name].shape) != tuple(p.data.shape):
            raise ShapeError(
                f"layer {name}: checkpoint shape {tensors[name].shape} "
                f"!= model shape {p.data.shape}")
        p.data = tensors[name].astype(p.data.dtype)
