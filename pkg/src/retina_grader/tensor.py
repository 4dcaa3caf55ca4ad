"""Minimal dense tensor engine with reverse-mode gradients.

Storage is float32. Reductions accumulate in float64. A graph is only
recorded for ops whose inputs require gradients, so frozen sub-networks
cost a forward pass and nothing else.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputationRecord",
    "ShapeError",
    "conv2d",
    "dense",
    "relu",
    "global_average_pool",
    "avg_pool3x3",
    "concat_channels",
    "dropout",
    "softmax",
    "categorical_cross_entropy",
    "tensor_sum",
    "mul_const",
    "scale",
    "add",
    "backward",
    "grad_check",
    "kink_monitor",
]

CE_EPSILON = 1e-7


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    # float64 is kept so gradient checks can run the same ops at double precision
    if arr.dtype != np.float64:
        arr = arr.astype(np.float32, copy=False)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


class ComputationRecord:
    """Executed ops reachable from an output, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> ComputationRecord:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def ops(self) -> list[Tensor]:
        return [n for n in self.nodes if n._backward is not None]


def backward(
    loss: Tensor,
    record: Optional[ComputationRecord] = None,
    inputs: Iterable[Tensor] = (),
) -> ComputationRecord:
    """Populate ``.grad`` on every gradient-requiring tensor that ``loss`` depends on.

    Grads are reset, not accumulated across calls. Any tensor in ``inputs``
    that the loss does not reach gets a zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if record is None:
        record = ComputationRecord.from_output(loss)
    for t in inputs:
        t.grad = np.zeros_like(t.data)
    if not loss.requires_grad:
        return record
    for node in record.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(record.nodes):
        if node._backward is None or node.grad is None:
            continue
        parent_grads = node._backward(node.grad)
        for parent, g in zip(node._parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=parent.data.dtype, copy=True)
            else:
                parent.grad += g
        if node._parents:
            # intermediate buffers are not needed once propagated
            node.grad = None
    for node in record.nodes:
        if node.grad is None and not node._parents:
            node.grad = np.zeros_like(node.data)
    return record


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def _bw(g):
        return g, g

    return _result(a.data + b.data, (a, b), "add", _bw)


def tensor_sum(x: Tensor) -> Tensor:
    total = np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype)

    def _bw(g):
        return (np.broadcast_to(g, x.shape),)

    return _result(total, (x,), "sum", _bw)


def scale(x: Tensor, factor: float) -> Tensor:
    def _bw(g):
        return (g * factor,)

    return _result(x.data * x.data.dtype.type(factor), (x,), "scale", _bw)


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Elementwise product with a constant array of the same shape."""
    c = np.asarray(c)
    if c.shape != x.shape:
        raise ShapeError(f"mul_const: constant {c.shape} vs tensor {x.shape}")

    def _bw(g):
        return (g * c,)

    return _result(x.data * c if x.data.dtype == np.float64 else (x.data * c).astype(np.float32), (x,), "mul_const", _bw)


_kink_log: Optional[list[np.ndarray]] = None


class kink_monitor:
    """Collects ReLU activation patterns while active (used by grad_check)."""

    def __enter__(self) -> list[np.ndarray]:
        global _kink_log
        self._prev = _kink_log
        _kink_log = []
        return _kink_log

    def __exit__(self, *exc) -> None:
        global _kink_log
        _kink_log = self._prev


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _kink_log is not None:
        _kink_log.append(mask)

    def _bw(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), "relu", _bw)


# ---------------------------------------------------------------- convolution


def _same_pads(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def _spatial_plan(h: int, w: int, kh: int, kw: int, stride: int, padding: str):
    if padding == "same":
        oh, pt, pb = _same_pads(h, kh, stride)
        ow, pl, pr = _same_pads(w, kw, stride)
    elif padding == "valid":
        if kh > h or kw > w:
            raise ShapeError(f"kernel {kh}x{kw} larger than input {h}x{w} with valid padding")
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    return oh, ow, (pt, pb, pl, pr)


def _im2col(xp_nhwc: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, _, _, c = xp_nhwc.shape
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=xp_nhwc.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp_nhwc[:, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride]
    return cols.reshape(n * oh * ow, kh * kw * c)


def _col2im(dcols: np.ndarray, n, hp, wp, c, kh, kw, stride, oh, ow) -> np.ndarray:
    """Scatter-add patch gradients back into a padded NHWC buffer."""
    dxp = np.zeros((n, hp, wp, c), dtype=dcols.dtype)
    dcols = dcols.reshape(n, oh, ow, kh, kw, c)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride] += dcols[:, :, :, i, j]
    return dxp


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation over NCHW input with an FCkhkw kernel."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {kernel.shape} must both be 4-D")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d: kernel {kernel.shape} expects {kc} channels, input {x.shape} has {c}")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}")
    if stride < 1:
        raise ValueError("stride must be positive")
    oh, ow, (pt, pb, pl, pr) = _spatial_plan(h, w, kh, kw, stride, padding)
    # patches are laid out (kh, kw, C) to match a single NHWC transpose of the input
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(f, kh * kw * c)
    pointwise = kh == 1 and kw == 1 and not (pt or pb or pl or pr)

    if pointwise:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        cols = xs.transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        x_nhwc = x.data.transpose(0, 2, 3, 1)
        if pt or pb or pl or pr:
            x_nhwc = np.pad(x_nhwc, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        cols = _im2col(x_nhwc, kh, kw, stride, oh, ow)
    out = cols @ wmat.T
    out += bias.data
    out = out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)

    def _bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (gmat.T @ cols).reshape(f, kh, kw, c).transpose(0, 3, 1, 2)
        if bias.requires_grad:
            gb = gmat.sum(axis=0, dtype=np.float64)
        if x.requires_grad:
            if pointwise:
                dxs = (gmat @ wmat).reshape(n, oh, ow, c).transpose(0, 3, 1, 2)
                if stride > 1:
                    gx = np.zeros(x.shape, dtype=dxs.dtype)
                    gx[:, :, ::stride, ::stride] = dxs
                else:
                    gx = dxs
            elif stride == 1:
                # input gradient as a correlation of the padded output gradient with the
                # flipped kernel: a gather + matmul instead of a strided scatter-add
                g_nhwc = np.pad(g.transpose(0, 2, 3, 1), ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
                g_nhwc = g_nhwc[:, pt : pt + h + kh - 1, pl : pl + w + kw - 1]
                wflip = kernel.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(kh * kw * f, c)
                gx = (_im2col(g_nhwc, kh, kw, 1, h, w) @ wflip).reshape(n, h, w, c).transpose(0, 3, 1, 2)
            else:
                dcols = gmat @ wmat
                dxp = _col2im(dcols, n, h + pt + pb, w + pl + pr, c, kh, kw, stride, oh, ow)
                gx = dxp[:, pt : pt + h, pl : pl + w].transpose(0, 3, 1, 2)
        return gx, gk, gb

    return _result(np.ascontiguousarray(out), (x, kernel, bias), "conv2d", _bw)


def _box3(a: np.ndarray, axis: int) -> np.ndarray:
    """Sum of 3 consecutive entries along ``axis`` (output shorter by 2)."""
    m = a.shape[axis] - 2

    def shifted(k):
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(k, k + m)
        return a[tuple(idx)]

    out = shifted(0) + shifted(1)
    out += shifted(2)
    return out


def avg_pool3x3(x: Tensor, stride: int = 1) -> Tensor:
    """3x3 mean pooling with same padding; padded cells count as zeros."""
    n, c, h, w = x.shape
    oh, ow, (pt, pb, pl, pr) = _spatial_plan(h, w, 3, 3, stride, "same")
    xp = np.pad(x.data.astype(np.float64), ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    # separable box sum: rows then columns, subsampled afterwards for stride > 1
    full = _box3(_box3(xp, 3), 2)
    out = (full[:, :, ::stride, ::stride] / 9.0).astype(x.data.dtype)

    def _bw(g):
        gf = np.zeros(full.shape, dtype=np.float64)
        gf[:, :, ::stride, ::stride] = g / 9.0
        # adjoint of the 3-tap sum is a 3-tap sum over the zero-extended gradient
        gf = _box3(np.pad(gf, ((0, 0), (0, 0), (2, 2), (0, 0))), 2)
        gf = _box3(np.pad(gf, ((0, 0), (0, 0), (0, 0), (2, 2))), 3)
        return (gf[:, :, pt : pt + h, pl : pl + w].astype(g.dtype),)

    return _result(out, (x,), "avg_pool3x3", _bw)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    spatial = {(p.shape[0],) + p.shape[2:] for p in parts}
    if len(spatial) != 1:
        raise ShapeError(f"concat_channels: incompatible shapes {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def _bw(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=1), tuple(parts), "concat", _bw)


def global_average_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), dtype=np.float64).astype(x.data.dtype)

    def _bw(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).astype(g.dtype),)

    return _result(out, (x,), "global_average_pool", _bw)


# ---------------------------------------------------------------- dense / heads


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data + bias.data

    def _bw(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0, dtype=np.float64) if bias.requires_grad else None
        return gx, gw, gb

    return _result(out, (x, weight, bias), "dense", _bw)


def dropout(x: Tensor, rate: float, mode: str, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) in train mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if mode == "infer" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / x.data.dtype.type(1.0 - rate)

    def _bw(g):
        return (g * keep,)

    return _result(x.data * keep, (x,), "dropout", _bw)


def softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[1] < 2:
        raise ShapeError(f"softmax expects [N, K>=2], got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = (e / e.sum(axis=1, keepdims=True, dtype=np.float64)).astype(x.data.dtype)

    def _bw(g):
        inner = (g * p).sum(axis=1, keepdims=True, dtype=np.float64)
        return ((p * (g - inner)).astype(g.dtype),)

    return _result(p, (x,), "softmax", _bw)


def categorical_cross_entropy(probs: Tensor, target: Sequence[int] | np.ndarray) -> Tensor:
    """Mean negative log-likelihood with probabilities clamped to [1e-7, 1]."""
    target = np.asarray(target, dtype=np.int64)
    if probs.data.ndim != 2 or target.shape != (probs.shape[0],):
        raise ShapeError(f"cross entropy: probs {probs.shape} vs targets {target.shape}")
    n, k = probs.shape
    if target.size and (target.min() < 0 or target.max() >= k):
        raise ValueError(f"targets must lie in [0, {k}), got range [{target.min()}, {target.max()}]")
    rows = np.arange(n)
    picked = probs.data[rows, target].astype(np.float64)
    clamped = np.clip(picked, CE_EPSILON, 1.0)
    loss = np.asarray(-np.log(clamped).mean(), dtype=probs.data.dtype)

    def _bw(g):
        gp = np.zeros_like(probs.data)
        live = (picked >= CE_EPSILON) & (picked <= 1.0)
        gp[rows, target] = np.where(live, -float(g) / (n * clamped), 0.0)
        return (gp,)

    return _result(loss, (probs,), "cross_entropy", _bw)


# ---------------------------------------------------------------- gradient check


def grad_check(
    fn: Callable[[Tensor], Tensor],
    point: Tensor | np.ndarray,
    step: float = 1e-3,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error between backward() and central differences.

    The point is promoted to float64, so every op downstream of it runs in
    double precision. Coordinates whose +/- step evaluations see different
    ReLU activation patterns straddle a non-differentiable point and are
    skipped. ``max_coords`` samples a subset of coordinates.
    """
    base = np.asarray(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    loss = fn(x)
    backward(loss, inputs=[x])
    analytic = x.grad.astype(np.float64).ravel()

    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        rng = rng or np.random.default_rng(0)
        coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))

    def _eval() -> tuple[float, list[np.ndarray]]:
        with kink_monitor() as log:
            value = fn(Tensor(x.data)).item()
        return value, log

    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        f_plus, pattern_plus = _eval()
        flat[i] = orig - step
        f_minus, pattern_minus = _eval()
        flat[i] = orig
        if any(not np.array_equal(a, b) for a, b in zip(pattern_plus, pattern_minus)):
            continue
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if math.isnan(err):
            return math.inf
        worst = max(worst, err)
    return worst
