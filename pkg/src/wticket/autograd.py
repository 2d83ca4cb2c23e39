"""Minimal dense-tensor engine with a recording tape and reverse-mode AD.

Operations executed while grad mode is on, with at least one input that
requires a gradient, are appended to the active :class:`Tape`. Recording
order is execution order, so a reverse sweep over the tape is already a
reverse topological order.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels as K

_DTYPE = np.float32


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype new tensors are cast to.

    Gradient checks run in float64; everything else stays float32.
    """
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "_retain", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self._retain = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of an intermediate tensor after backward."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[_Node] = field(default_factory=list)
    enabled: bool = True

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        node = _Node(out, inputs, backward)
        out._node = node
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE = Tape()


def get_tape() -> Tape:
    return _TAPE


@contextlib.contextmanager
def no_grad():
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _TAPE.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE.record(out, inputs, backward)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Leaf gradients accumulate. The tape is cleared afterwards, so a second
    call without a fresh forward pass fails.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise RuntimeError(
            "loss is not on the tape (backward already ran, or the forward pass was not recorded)"
        )
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    try:
        for node in reversed(_TAPE.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            if node.out._retain:
                node.out.grad = g if node.out.grad is None else node.out.grad + g
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t._node is None:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    key = id(t)
                    grads[key] = gi if key not in grads else grads[key] + gi
    finally:
        _TAPE.clear()


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.data.dtype)
        return _make(a.data * c, (a,), lambda g: (_unbroadcast(g * c, a.shape),))
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def apply_mask(w: Tensor, mask: np.ndarray | None) -> Tensor:
    """Effective weight ``w * mask``; masked entries get zero gradient."""
    if mask is None:
        return w
    return mul(w, mask)


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _make(
        np.asarray(a.data.mean(), dtype=a.data.dtype),
        (a,),
        lambda g: (np.full(shape, g / n, dtype=a.data.dtype),),
    )


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"slope must lie in [0, 1), got {slope}")
    pos = x.data > 0
    if slope == 0.0:
        return _make(np.where(pos, x.data, 0), (x,), lambda g: (np.where(pos, g, 0),))
    scale = np.where(pos, 1.0, slope).astype(x.data.dtype)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``w[F,C,kH,kW]`` via im2col."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, ck, kh, kw = w.shape
    if ck != c:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise ValueError(f"conv2d kernel {w.shape} larger than padded input {x.shape}")
    if b is not None and b.shape != (f,):
        raise ValueError(f"conv2d bias shape {b.shape} does not match kernel {w.shape}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    xpad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xpad.shape[2:]
    cols = K.im2col(xpad, kh, kw, stride, oh, ow)
    wmat = w.data.reshape(f, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2))

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, f)
        gx = gw = gb = None
        if x.requires_grad:
            dpad = K.col2im(gmat @ wmat, n, c, hp, wp, kh, kw, stride, oh, ow)
            gx = dpad[:, :, padding : padding + h, padding : padding + wd] if padding else dpad
        if w.requires_grad:
            gw = (gmat.T @ cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = gmat.sum(axis=0)
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out, inputs, bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear dimension mismatch: input {x.shape} vs weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"linear bias shape {b.shape} does not match weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def bw(g):
        return g @ w.data, g.T @ x.data, (g.sum(axis=0) if b is not None else None)

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out, inputs, bw)


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel batch norm. Training mode updates the running stats in place."""
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm2d parameter shapes {gamma.shape}/{beta.shape} vs input {x.shape}")
    dt = x.data.dtype
    if training:
        m = n * h * w
        if m < 2:
            raise ValueError("batchnorm2d in training mode needs at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (m / (m - 1))
    else:
        mean, var = running_mean.astype(dt), running_var.astype(dt)
    inv = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bw(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if training:
                mm = n * h * w
                gx = (inv[None, :, None, None] / mm) * (
                    mm * gxhat
                    - gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                    - xhat * (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                )
            else:
                gx = gxhat * inv[None, :, None, None]
        return gx, gg, gbeta

    return _make(out.astype(dt), (x, gamma, beta), bw)


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ValueError(f"maxpool window {window} larger than input {x.shape}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    out, idx = K.maxpool_fwd(x.data, window, stride, oh, ow)
    return _make(out, (x,), lambda g: (K.maxpool_bwd(np.ascontiguousarray(g), idx, h, w),))


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return _make(
        out,
        (x,),
        lambda g: (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).astype(x.data.dtype),),
    )


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n)).astype(logits.data.dtype),

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(store, state: AdamState) -> None:
    """One Adam update with bias correction over every entry of ``store``.

    Gradients are masked before the moments are updated and the weights are
    re-masked afterwards, so pruned entries stay exactly 0.
    """
    for name, p in store.items():
        if p.tensor.grad is None:
            raise RuntimeError(f"parameter {name!r} has no gradient buffer")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in store.items():
        w = p.tensor.data
        g = p.tensor.grad
        if p.mask is not None:
            g = g * p.mask
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        w -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(w.dtype)
        if p.mask is not None:
            w *= p.mask
