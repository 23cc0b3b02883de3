"""Small numpy layer library with hand-derived backward passes.

Every layer caches what it needs during ``forward`` and accumulates parameter
gradients into ``Tensor.grad`` during ``backward``. Everything is float64.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from .errors import NoForwardCache, ParseError, ShapeMismatch

DTYPE = np.float64


class Tensor:
    """A parameter array with a gradient slot of the same shape."""

    def __init__(self, data):
        self.data = np.array(data, dtype=DTYPE)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Base layer. Subclasses set ``_params`` / ``_buffers`` and implement forward/backward."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._children: "OrderedDict[str, Module]" = OrderedDict()
        self._cache = None

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def _need_cache(self):
        if self._cache is None:
            raise NoForwardCache(f"{type(self).__name__}.backward called before forward")
        return self._cache

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.weight = Tensor(glorot_uniform(rng, (n_in, n_out), n_in, n_out))
        self.bias = Tensor(np.zeros(n_out))
        self._params.update(weight=self.weight, bias=self.bias)

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeMismatch(f"Linear expects (N, {self.n_in}), got {x.shape}")
        self._cache = x
        return x @ self.weight.data + self.bias.data

    def backward(self, grad):
        x = self._need_cache()
        self.weight.grad += x.T @ grad
        self.bias.grad += grad.sum(axis=0)
        return grad @ self.weight.data.T


class ReLU(Module):
    def forward(self, x, train=False):
        self._cache = x > 0
        return np.where(self._cache, x, 0.0)

    def backward(self, grad):
        return np.where(self._need_cache(), grad, 0.0)


class Sigmoid(Module):
    def forward(self, x, train=False):
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self._cache = out
        return out

    def backward(self, grad):
        y = self._need_cache()
        return grad * y * (1.0 - y)


class Conv2d(Module):
    """Stride-1 convolution with 'same' padding for odd kernel sizes (1x1 or 3x3)."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.c_in, self.c_out, self.k = c_in, c_out, kernel
        self.pad = kernel // 2
        k2 = kernel * kernel
        self.weight = Tensor(glorot_uniform(rng, (c_out, c_in, kernel, kernel), c_in * k2, c_out * k2))
        self.bias = Tensor(np.zeros(c_out))
        self._params.update(weight=self.weight, bias=self.bias)

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeMismatch(f"Conv2d expects (N, {self.c_in}, H, W), got {x.shape}")
        n, _, h, w = x.shape
        p = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        out = np.zeros((n, self.c_out, h, w))
        wt = self.weight.data
        for i in range(self.k):
            for j in range(self.k):
                out += np.einsum("nchw,oc->nohw", xp[:, :, i:i + h, j:j + w], wt[:, :, i, j],
                                 optimize=True)
        out += self.bias.data[None, :, None, None]
        self._cache = xp
        return out

    def backward(self, grad):
        xp = self._need_cache()
        _, _, h, w = grad.shape
        p = self.pad
        wt = self.weight.data
        gxp = np.zeros_like(xp)
        for i in range(self.k):
            for j in range(self.k):
                win = xp[:, :, i:i + h, j:j + w]
                self.weight.grad[:, :, i, j] += np.einsum("nchw,nohw->oc", win, grad, optimize=True)
                gxp[:, :, i:i + h, j:j + w] += np.einsum("nohw,oc->nchw", grad, wt[:, :, i, j],
                                                         optimize=True)
        self.bias.grad += grad.sum(axis=(0, 2, 3))
        if p:
            return gxp[:, :, p:-p, p:-p]
        return gxp


class BatchNorm2d(Module):
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes with batch statistics and, unless
    ``update_stats`` is off, folds them into the running estimates. Eval
    mode uses the running estimates.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.channels, self.eps, self.momentum = channels, eps, momentum
        self.gamma = Tensor(np.ones(channels))
        self.beta = Tensor(np.zeros(channels))
        self._params.update(gamma=self.gamma, beta=self.beta)
        self._buffers.update(running_mean=np.zeros(channels), running_var=np.ones(channels))
        self.update_stats = True

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeMismatch(f"BatchNorm2d expects (N, {self.channels}, H, W), got {x.shape}")
        g = self.gamma.data[None, :, None, None]
        b = self.beta.data[None, :, None, None]
        if not train:
            mean = self._buffers["running_mean"][None, :, None, None]
            var = self._buffers["running_var"][None, :, None, None]
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean) * inv_std
            self._cache = ("eval", xhat, inv_std)
            return g * xhat + b
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        var = x.var(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        if self.update_stats:
            mom = self.momentum
            unbiased = var.ravel() * m / max(m - 1, 1)
            rm, rv = self._buffers["running_mean"], self._buffers["running_var"]
            rm[...] = (1 - mom) * rm + mom * mean.ravel()
            rv[...] = (1 - mom) * rv + mom * unbiased
        self._cache = ("train", xhat, inv_std)
        return g * xhat + b

    def backward(self, grad):
        mode, xhat, inv_std = self._need_cache()
        self.gamma.grad += (grad * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += grad.sum(axis=(0, 2, 3))
        gxhat = grad * self.gamma.data[None, :, None, None]
        if mode == "eval":
            return gxhat * inv_std
        mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return inv_std * (gxhat - mean_g - xhat * mean_gx)


class UpsampleNearest2x(Module):
    def forward(self, x, train=False):
        if x.ndim != 4:
            raise ShapeMismatch(f"UpsampleNearest2x expects (N, C, H, W), got {x.shape}")
        self._cache = x.shape
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, grad):
        n, c, h, w = self._need_cache()
        return grad.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            self.add_child(str(i), layer)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        self._cache = True
        return x

    def backward(self, grad):
        self._need_cache()
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


def mlp(sizes: list[int], rng: np.random.Generator, final_relu: bool = True) -> Sequential:
    layers: list[Module] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Linear(a, b, rng))
        if i < len(sizes) - 2 or final_relu:
            layers.append(ReLU())
    return Sequential(*layers)


# ---- optimizer ----------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over a fixed list of tensors."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: list[np.ndarray] | None = None):
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ShapeMismatch(f"{len(grads)} gradients for {len(self.params)} parameters")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.data.shape:
                raise ShapeMismatch(f"gradient shape {g.shape} vs parameter {p.data.shape}")
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---- finite-difference check ------------------------------------------------------

@dataclass
class GradCheckReport:
    tolerance: float
    errors: "OrderedDict[str, float]" = field(default_factory=OrderedDict)
    checked: int = 0
    skipped: int = 0  # entries whose every step straddled a kink

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def summary(self) -> str:
        lines = [f"{name:40s} {err:.3e}" for name, err in self.errors.items()]
        lines.append(f"max relative error {self.max_error:.3e} over {self.checked} entries, "
                     f"{self.skipped} skipped at kinks "
                     f"({'PASS' if self.passed else 'FAIL'} at {self.tolerance:g})")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def relu_pattern(module: Module) -> bytes:
    """Packed on/off state of every ReLU in ``module`` from its last forward pass."""
    return b"".join(np.packbits(m._cache).tobytes() for m in module.modules()
                    if isinstance(m, ReLU) and m._cache is not None)


def grad_check(closure: Callable[[], float], tensors: dict[str, Tensor], h: float = 1e-5,
               tolerance: float = 1e-4, max_entries: int | None = None, seed: int = 0,
               pattern: Callable[[], bytes] | None = None, retries: int = 2) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``closure`` must zero gradients, run forward and backward, and return the
    scalar loss; afterwards each tensor's ``grad`` holds the analytic
    gradient. With ``max_entries`` only a random subset of each tensor's
    entries is perturbed.

    A central difference is meaningless across a kink. When ``pattern`` is
    given it is read after every evaluation; if either step changes it, the
    entry is retried with a step ten times smaller, up to ``retries`` times,
    and skipped (and counted) if it still straddles a kink.
    """
    closure()
    base = pattern() if pattern is not None else None
    analytic = {name: t.grad.copy() for name, t in tensors.items()}
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance)
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        keep, numeric = [], []
        for k, i in enumerate(idx):
            orig = flat[i]
            step = h
            for _ in range(retries + 1):
                flat[i] = orig + step
                up = closure()
                smooth = pattern is None or pattern() == base
                flat[i] = orig - step
                down = closure()
                smooth = smooth and (pattern is None or pattern() == base)
                flat[i] = orig
                if smooth:
                    keep.append(k)
                    numeric.append((up - down) / (2 * step))
                    break
                step /= 10
            else:
                report.skipped += 1
        a = analytic[name].reshape(-1)[idx[keep]]
        report.checked += len(keep)
        report.errors[name] = float(relative_error(a, np.array(numeric)).max()) if keep else 0.0
    closure()
    return report


# ---- checkpoint file ----------------------------------------------------------------

MAGIC = b"SGL1"


def save_checkpoint(path, arrays: "OrderedDict[str, np.ndarray]"):
    """Write named float64 arrays in the little-endian SGL1 layout (see README)."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            a = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            f.write(np.ascontiguousarray(a).tobytes())


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise ParseError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise ParseError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (count,) = take("<I")
    out = OrderedDict()
    for _ in range(count):
        (n,) = take("<I")
        if pos + n > len(buf):
            raise ParseError(f"{path}: truncated name at byte {pos}")
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = take("<I")
        shape = take(f"<{rank}I") if rank else ()
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise ParseError(f"{path}: truncated data for {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(DTYPE)
        pos += nbytes
    if pos != len(buf):
        raise ParseError(f"{path}: {len(buf) - pos} trailing bytes")
    return out
