"""A small reverse-mode autodiff engine over float64 numpy arrays.

Only the operations the light estimator needs are provided. Each op builds a
new Tensor that remembers its parents and a closure mapping the output
gradient to parent gradients. ``Tensor.backward`` walks the graph once in
reverse topological order and then releases it.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

COS_CLAMP = 1e-6


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim > 4:
            raise ValueError(f"tensors have at most 4 dims, got shape {self.data.shape}")
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, k):
        return scale(self, k)

    __rmul__ = __mul__

    def backward(self, grad: np.ndarray | None = None) -> None:
        if self._consumed:
            raise GraphError("backward already ran on this graph; run the forward pass again")
        if not self.requires_grad:
            raise GraphError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise GraphError("backward without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad += g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True
        self._consumed = True


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data)
    if needs:
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


# ------------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)
    return _make(a.data * k, (a,), lambda g: (g * k,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def columns(x: Tensor, start: int, stop: int) -> Tensor:
    """x[:, start:stop] for a 2-D tensor."""
    if x.data.ndim != 2:
        raise ValueError("columns expects a 2-D tensor")

    def back(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop].copy(), (x,), back)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for x in xs:
        if x.data.ndim != len(ref) or x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: incompatible shapes {[t.shape for t in xs]}")
    sizes = [x.shape[1] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([x.data for x in xs], axis=1),
        xs,
        lambda g: tuple(np.split(g, cuts, axis=1)),
    )


# --------------------------------------------------------------- convolutions


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of x[B, C, H, W] with weight[K, C, kh, kw]."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    K, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ValueError(f"conv2d: input has {C} channels, weight expects {Cw}")
    if bias is not None and bias.shape != (K,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({K},)")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    Hp, Wp = H + 2 * ph, W + 2 * pw
    if Hp < kh or Wp < kw or (Hp - kh) % sh or (Wp - kw) % sw:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw}, stride {sh}x{sw}, padding {ph}x{pw} do not tile {H}x{W}"
        )
    Ho, Wo = (Hp - kh) // sh + 1, (Wp - kw) // sw + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    # (B, C, Ho, Wo, kh, kw) -> (B, Ho, Wo, C, kh, kw) columns
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(K, C * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Ho, Wo, K).transpose(0, 3, 1, 2)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, K)
        gw = (g2.T @ cols).reshape(K, C, kh, kw) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros((B, C, Hp, Wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw] += gcols[:, :, :, :, i, j].transpose(
                        0, 3, 1, 2
                    )
            gx = gxp[:, :, ph : ph + H, pw : pw + W]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(out), parents, back)


def maxpool2d(x: Tensor, kernel: int = 2, stride: int | None = None, padding: int = 0) -> Tensor:
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2d expects a 4-D tensor, got {x.shape}")
    stride = stride or kernel
    B, C, H, W = x.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if Hp < kernel or Wp < kernel:
        raise ValueError(f"maxpool2d: kernel {kernel} larger than padded input {Hp}x{Wp}")
    Ho, Wo = (Hp - kernel) // stride + 1, (Wp - kernel) // stride + 1
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    flat = win.reshape(B, C, Ho, Wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gxp = np.zeros((B, C, Hp, Wp))
        for i in range(kernel):
            for j in range(kernel):
                sel = arg == i * kernel + j
                gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += g * sel
        return (gxp[:, :, padding : padding + H, padding : padding + W],)

    return _make(out, (x,), back)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""
    return maxpool2d(x, 2, 2, 0)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ValueError(f"global_avg_pool expects a 4-D tensor, got {x.shape}")
    B, C, H, W = x.shape
    n = H * W
    return _make(
        x.data.mean(axis=(2, 3), keepdims=True),
        (x,),
        lambda g: (np.broadcast_to(g / n, x.shape).copy(),),
    )


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x[B, F] @ weight[F, O] + bias[O]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense: cannot multiply {x.shape} by {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"dense: bias shape {bias.shape} != ({weight.shape[1]},)")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def back(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, back)


# ----------------------------------------------------------------------- losses


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over every element."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ValueError(f"mse: shape mismatch {pred.shape} vs {t.shape}")
    diff = pred.data - t
    n = diff.size
    return _make(np.array((diff * diff).sum() / n), (pred,), lambda g: (g * 2.0 * diff / n,))


def summed_residual_mse(pred: Tensor, target) -> Tensor:
    """Mean over rows of (sum of residuals in the row)^2."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape or pred.data.ndim != 2:
        raise ValueError(f"summed_residual_mse: bad shapes {pred.shape} vs {t.shape}")
    s = (pred.data - t).sum(axis=1)
    n = s.shape[0]
    return _make(
        np.array((s * s).sum() / n),
        (pred,),
        lambda g: (np.broadcast_to((g * 2.0 * s / n)[:, None], pred.shape).copy(),),
    )


def cosine_angle_loss(pred: Tensor, target) -> Tensor:
    """Angle in radians between pred and target rows, averaged over the batch.

    Accepts a single 3-vector or a [B, 3] batch. The cosine is clamped to
    [-1 + 1e-6, 1 - 1e-6] before the arccos.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    p = pred.data
    single = p.ndim == 1
    if single:
        p = p[None, :]
        t = t[None, :]
    if p.shape != t.shape:
        raise ValueError(f"cosine_angle_loss: shape mismatch {pred.shape} vs {t.shape}")
    pn = np.sqrt((p * p).sum(axis=1))
    tn = np.sqrt((t * t).sum(axis=1))
    if np.any(pn == 0.0) or np.any(tn == 0.0):
        raise ValueError("cosine_angle_loss is undefined for a zero vector")
    c = (p * t).sum(axis=1) / (pn * tn)
    lo, hi = -1.0 + COS_CLAMP, 1.0 - COS_CLAMP
    cc = np.clip(c, lo, hi)
    n = p.shape[0]
    angle = np.arccos(cc)

    def back(g):
        inside = (c > lo) & (c < hi)
        dc = np.where(inside, -1.0 / np.sqrt(1.0 - cc * cc), 0.0) * g / n
        gp = dc[:, None] * (t / (pn * tn)[:, None] - c[:, None] * p / (pn * pn)[:, None])
        return (gp[0] if single else gp,)

    return _make(np.array(angle.mean()), (pred,), back)


# ------------------------------------------------------------ params and Adam


def he_normal_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, name: str | None = None) -> Tensor:
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    return Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), shape), requires_grad=True, name=name)


class ParamStore:
    """Named parameters with their Adam moments."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t.requires_grad = True
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.name = name
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def count(self) -> int:
        return sum(t.data.size for t in self.params.values())


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update of every parameter; gradients are then zeroed."""
    store.step += 1
    c1 = 1.0 - beta1**store.step
    c2 = 1.0 - beta2**store.step
    for name, t in store.params.items():
        g = t.grad
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        t.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        g.fill(0.0)
