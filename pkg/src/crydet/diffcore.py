"""Small reverse-mode autodiff engine over numpy arrays.

The operator set is closed: exactly what the BlazeNet backbone, the anomaly
head and the MIL losses use.  Elementwise binary ops take operands of equal
shape or a Python scalar; there is no general broadcasting.

Weights and activations are normally float32.  Matrix products, convolution
inner loops and reductions accumulate in float64 and cast back.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from crydet.errors import ContractError, DimensionError

ACC = np.float64


class Tensor:
    """An array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], tuple] | None = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(self, o)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: add(neg(self), o)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(self, o)
    __neg__ = lambda self: neg(self)

    def __truediv__(self, o):
        if isinstance(o, Tensor):
            raise ContractError("division is only defined by a scalar")
        return mul(self, 1.0 / o)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], fn) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (), _backward=fn if needs else None)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Only scalar operands are ever broadcast.
    if g.shape == shape:
        return g
    return np.asarray(g.sum(dtype=ACC)).reshape(shape)


# ----------------------------------------------------------------------
# graph traversal


@dataclass
class Graph:
    """Topologically ordered view of the nodes feeding a loss."""

    nodes: list[Tensor]
    parameters: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        params = {}
        for i, n in enumerate(order):
            if n.requires_grad and not n._parents:
                params[n.name or f"param{i}"] = n
        return cls(order, params)


def backward(loss: Tensor, params: Iterable[Tensor] | Mapping[str, Tensor] | None = None):
    """Accumulate d(loss)/d(node) into ``.grad`` of every leaf that requires it.

    With ``params`` given, returns their gradients (zeros for parameters the
    loss does not depend on), as a dict if ``params`` is a mapping and a list
    otherwise.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg

    if params is None:
        return None
    if isinstance(params, Mapping):
        return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ----------------------------------------------------------------------
# elementwise


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    if b.data.ndim != 0:
        _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, _sum_to(g, b.shape)))


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    if b.data.ndim != 0:
        _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -_sum_to(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    if b.data.ndim != 0:
        _same_shape(a, b, "mul")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, _sum_to(g * a.data, b.shape)))


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(out, (a,), lambda g: (g * inside,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout; identity at inference."""
    if not training or rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _node(x.data * keep, (x,), lambda g: (g * keep,))


# ----------------------------------------------------------------------
# shape


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)
    return _node(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def concat(xs: list[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise DimensionError("concat of an empty list")
    axis = axis % xs[0].data.ndim
    for t in xs[1:]:
        if t.data.ndim != xs[0].data.ndim or any(
            t.shape[d] != xs[0].shape[d] for d in range(t.data.ndim) if d != axis
        ):
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in xs]}")
    out = np.concatenate([t.data for t in xs], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _node(out, tuple(xs), back)


def take(x: Tensor, index: np.ndarray, axis: int = -1) -> Tensor:
    """Gather along ``axis`` with an integer array shaped like ``x`` except on ``axis``."""
    index = np.asarray(index, dtype=np.intp)
    out = np.take_along_axis(x.data, index, axis=axis)

    def back(g):
        gx = np.zeros_like(x.data)
        # repeated indices must accumulate, so scatter with add.at
        idx = list(np.indices(index.shape, sparse=False))
        idx[axis % x.data.ndim] = index
        np.add.at(gx, tuple(idx), g)
        return (gx,)

    return _node(out, (x,), back)


def pad_channels(x: Tensor, channels: int) -> Tensor:
    """Zero-pad axis 1 of an NCHW tensor up to ``channels``."""
    c = x.shape[1]
    if channels < c:
        raise DimensionError(f"pad_channels: cannot shrink {c} to {channels}")
    if channels == c:
        return x
    pad = [(0, 0)] * x.data.ndim
    pad[1] = (0, channels - c)
    return _node(np.pad(x.data, pad), (x,), lambda g: (g[:, :c],))


# ----------------------------------------------------------------------
# reductions


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    out = np.asarray(x.data.sum(axis=axis, dtype=ACC), dtype=x.dtype)

    def back(g):
        if axis is None:
            return (np.full(x.shape, g.reshape(()), dtype=x.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).astype(x.dtype),)

    return _node(out, (x,), back)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def max(x: Tensor, axis: int = -1) -> Tensor:  # noqa: A001 - mirrors numpy
    """Max along an axis; ties send the gradient to the first maximal entry."""
    idx = np.argmax(x.data, axis=axis)
    return reshape(take(x, np.expand_dims(idx, axis), axis=axis), tuple(np.delete(x.shape, axis % x.data.ndim)))


def l2_norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at the zero vector is taken as zero."""
    sq = (x.data.astype(ACC) ** 2).sum(axis=axis)
    out = np.sqrt(sq)

    def back(g):
        safe = np.where(out > 0, out, 1.0)
        scale = np.where(out > 0, g / safe, 0.0)
        return ((np.expand_dims(scale, axis) * x.data).astype(x.dtype),)

    return _node(out.astype(x.dtype), (x,), back)


# ----------------------------------------------------------------------
# dense layers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape}")
    a64, b64 = a.data.astype(ACC), b.data.astype(ACC)
    out = (a64 @ b64).astype(a.dtype)
    return _node(out, (a, b), lambda g: (g.astype(ACC) @ b64.T, a64.T @ g.astype(ACC)))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for x (N, D), weight (D, M), bias (M,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")
    x64, w64 = x.data.astype(ACC), weight.data.astype(ACC)
    out = x64 @ w64
    if bias is not None:
        out += bias.data
    out = out.astype(x.dtype)

    def back(g):
        g64 = g.astype(ACC)
        gb = g64.sum(axis=0) if bias is not None else None
        return (g64 @ w64.T, x64.T @ g64, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, back)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits.astype(ACC) - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of (N, C) logits against integer class labels."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape}, labels {labels.shape}")
    p = softmax(logits.data)
    n = logits.shape[0]
    rows = np.arange(n)
    loss = -np.log(np.maximum(p[rows, labels], 1e-300)).mean()

    def back(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return (d * (float(g) / n),)

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), back)


# ----------------------------------------------------------------------
# convolution and pooling


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv(x: Tensor, k: int, stride: int, padding: int, op: str) -> tuple[int, int]:
    if x.data.ndim != 4:
        raise DimensionError(f"{op}: input must be NCHW, got {x.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"{op}: stride must be >= 1 and padding >= 0")
    ho = conv_out_size(x.shape[2], k, stride, padding)
    wo = conv_out_size(x.shape[3], k, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"{op}: kernel {k} does not fit input {x.shape[2:]} with padding {padding}")
    return ho, wo


def _pad_hw(a: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _window(a: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> np.ndarray:
    return a[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Dense 2-D convolution (cross-correlation); weight is (O, C, k, k)."""
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"conv2d: weight must be (O, C, k, k), got {weight.shape}")
    o, c, k, _ = weight.shape
    if x.data.ndim != 4 or x.shape[1] != c:
        raise DimensionError(f"conv2d: input {x.shape} does not have {c} channels")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d: bias {bias.shape} vs {o} output channels")
    ho, wo = _check_conv(x, k, stride, padding, "conv2d")
    n = x.shape[0]

    xp = _pad_hw(x.data, padding).astype(ACC)
    # im2col: rows are (n, i, j), columns are (c, ki, kj)
    cols = np.empty((n, ho, wo, c, k, k), dtype=ACC)
    for a in range(k):
        for b in range(k):
            cols[:, :, :, :, a, b] = _window(xp, a, b, stride, ho, wo).transpose(0, 2, 3, 1)
    cols = cols.reshape(n * ho * wo, c * k * k)
    w2 = weight.data.reshape(o, c * k * k).astype(ACC)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2).astype(x.dtype)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o).astype(ACC)
        gw = (g2.T @ cols).reshape(weight.shape)
        gb = g2.sum(axis=0) if bias is not None else None
        gcols = (g2 @ w2).reshape(n, ho, wo, c, k, k)
        gxp = np.zeros(xp.shape, dtype=ACC)
        for a in range(k):
            for b in range(k):
                _window(gxp, a, b, stride, ho, wo)[...] += gcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + x.shape[2], padding : padding + x.shape[3]]
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, back)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel convolution; weight is (C, 1, k, k)."""
    if weight.data.ndim != 4 or weight.shape[1] != 1 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"depthwise_conv2d: weight must be (C, 1, k, k), got {weight.shape}")
    c, _, k, _ = weight.shape
    if x.data.ndim != 4 or x.shape[1] != c:
        raise DimensionError(f"depthwise_conv2d: input {x.shape} does not have {c} channels")
    if bias is not None and bias.shape != (c,):
        raise DimensionError(f"depthwise_conv2d: bias {bias.shape} vs {c} channels")
    ho, wo = _check_conv(x, k, stride, padding, "depthwise_conv2d")

    xp = _pad_hw(x.data, padding).astype(ACC)
    w = weight.data[:, 0].astype(ACC)
    out = np.zeros((x.shape[0], c, ho, wo), dtype=ACC)
    for a in range(k):
        for b in range(k):
            out += _window(xp, a, b, stride, ho, wo) * w[None, :, a, b, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]
    out = out.astype(x.dtype)

    def back(g):
        g64 = g.astype(ACC)
        gxp = np.zeros(xp.shape, dtype=ACC)
        gw = np.empty((c, 1, k, k), dtype=ACC)
        for a in range(k):
            for b in range(k):
                win = _window(xp, a, b, stride, ho, wo)
                gw[:, 0, a, b] = np.einsum("nchw,nchw->c", g64, win)
                _window(gxp, a, b, stride, ho, wo)[...] += g64 * w[None, :, a, b, None, None]
        gb = g64.sum(axis=(0, 2, 3)) if bias is not None else None
        gx = gxp[:, :, padding : padding + x.shape[2], padding : padding + x.shape[3]]
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, back)


def pointwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution; same contract as ``conv2d`` with k=1, stride 1, no padding."""
    if weight.data.ndim != 4 or weight.shape[2:] != (1, 1):
        raise DimensionError(f"pointwise_conv2d: weight must be (O, C, 1, 1), got {weight.shape}")
    o, c = weight.shape[:2]
    if x.data.ndim != 4 or x.shape[1] != c:
        raise DimensionError(f"pointwise_conv2d: input {x.shape} does not have {c} channels")
    n, _, h, w_ = x.shape
    x2 = x.data.transpose(0, 2, 3, 1).reshape(-1, c).astype(ACC)
    w2 = weight.data.reshape(o, c).astype(ACC)
    out = x2 @ w2.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, h, w_, o).transpose(0, 3, 1, 2).astype(x.dtype)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o).astype(ACC)
        gx = (g2 @ w2).reshape(n, h, w_, c).transpose(0, 3, 1, 2)
        gw = (g2.T @ x2).reshape(weight.shape)
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, back)


def max_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Max pooling without padding; ties route the gradient to the first maximum in scan order."""
    stride = kernel if stride is None else stride
    ho, wo = _check_conv(x, kernel, stride, 0, "max_pool2d")
    wins = np.stack(
        [_window(x.data, a, b, stride, ho, wo) for a in range(kernel) for b in range(kernel)], axis=-1
    )
    arg = wins.argmax(axis=-1)
    out = np.take_along_axis(wins, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gx = np.zeros(x.shape, dtype=ACC)
        for t in range(kernel * kernel):
            a, b = divmod(t, kernel)
            _window(gx, a, b, stride, ho, wo)[...] += np.where(arg == t, g, 0.0)
        return (gx,)

    return _node(out, (x,), back)


# ----------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str
    buffers: dict[str, list[np.ndarray]] = field(default_factory=dict)
    step: int = 0


def sgd_momentum_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], lr: float, momentum: float,
                      state: OptimizerState | None = None) -> OptimizerState:
    """In-place SGD with heavy-ball momentum: ``v = mu*v + g; w -= lr*v``."""
    state = state or OptimizerState("sgd_momentum")
    if state.kind != "sgd_momentum":
        raise ContractError(f"optimizer state is {state.kind}, not sgd_momentum")
    for name, p in params.items():
        g = grads[name]
        if name not in state.buffers:
            state.buffers[name] = [np.zeros_like(p.data)]
        v = state.buffers[name][0]
        v *= momentum
        v += g
        p.data -= (lr * v).astype(p.dtype)
    state.step += 1
    return state


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              state: OptimizerState | None = None) -> OptimizerState:
    """In-place Adam update with bias correction."""
    state = state or OptimizerState("adam")
    if state.kind != "adam":
        raise ContractError(f"optimizer state is {state.kind}, not adam")
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name].astype(ACC)
        if name not in state.buffers:
            state.buffers[name] = [np.zeros(p.shape, dtype=ACC), np.zeros(p.shape, dtype=ACC)]
        m, v = state.buffers[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
    return state


# ----------------------------------------------------------------------
# finite-difference checking


def numeric_grad(fn: Callable[[list[np.ndarray]], float], inputs: list[np.ndarray], index: int,
                 rel_step: float = 1e-3) -> np.ndarray:
    """Central differences of ``fn`` with respect to ``inputs[index]``.

    The step for entry ``x`` is ``rel_step * max(|x|, 1e-2)``.
    """
    base = [np.array(a, dtype=ACC) for a in inputs]
    target = base[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = rel_step * np.maximum(abs(orig), 1e-2)
        flat[i] = orig + h
        up = fn(base)
        flat[i] = orig - h
        down = fn(base)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest deviation, relative to the largest gradient entry."""
    a = np.asarray(analytic, dtype=ACC)
    n = np.asarray(numeric, dtype=ACC)
    scale = np.maximum(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def grad_check(op: Callable[..., Tensor], inputs: list[np.ndarray], dtype=np.float64, rel_step: float = 1e-3,
               seed: int = 0) -> float:
    """Compare reverse-mode gradients of ``sum(op(*inputs) * r)`` with central differences.

    ``r`` is a fixed random projection so every output entry contributes.  The
    analytic pass runs at ``dtype``; the finite-difference pass always runs in
    float64.  Returns the worst relative error over all inputs.
    """
    probe = op(*[Tensor(np.asarray(a, dtype=ACC)) for a in inputs])
    r = np.random.default_rng(seed).standard_normal(probe.shape)

    def scalar(arrays):
        out = op(*[Tensor(a) for a in arrays])
        return float((out.data.astype(ACC) * r).sum())

    leaves = [parameter(np.asarray(a, dtype=dtype)) for a in inputs]
    out = op(*leaves)
    loss = sum(mul(out, Tensor(r.astype(dtype))))
    analytic = backward(loss, leaves)
    worst = 0.0
    for i in range(len(inputs)):
        num = numeric_grad(scalar, inputs, i, rel_step)
        worst = np.maximum(worst, relative_error(analytic[i], num))
    return float(worst)
