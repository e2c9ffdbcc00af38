"""Dense float64 tensors with reverse-mode differentiation.

Every operation records its parents and a backward closure on the produced
tensor, so the computation graph doubles as the gradient tape. Shapes are
always explicit: there is no implicit broadcasting, and ops that combine a
matrix with a vector (bias add, per-row scaling, layer norm affine) exist as
dedicated primitives with fixed semantics. All storage is C-contiguous
float64.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not satisfy an op's contract."""


class MaskError(ValueError):
    """Raised when an attention mask leaves a softmax row fully masked."""


NEG_INF = float("-inf")


class Tensor:
    """A dense float64 array plus the graph edge that produced it.

    Tensors are treated as immutable once created; only the optimizer mutates
    parameter data in place between forward passes. ``grad`` is populated by
    :func:`backward` for leaf tensors flagged ``requires_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has shape {self.shape}, expected a single value")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Small amount of operator sugar; the module-level functions are the API.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------------------
# arithmetic primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    _check(a.shape == b.shape, f"mul: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data + c, (a,), lambda g: (g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.data.ndim == 2 and b.data.ndim == 2,
           f"matmul: expects 2-d operands, got {a.shape} and {b.shape}")
    _check(a.shape[1] == b.shape[0], f"matmul: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    _check(a.data.ndim == 2, f"transpose: expects a 2-d tensor, got {a.shape}")
    return _make(np.ascontiguousarray(a.data.T), (a,),
                 lambda g: (np.ascontiguousarray(g.T),))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-m bias vector to every row of an (n, m) matrix."""
    _check(x.data.ndim == 2 and b.data.ndim == 1 and x.shape[1] == b.shape[0],
           f"add_bias: shape mismatch {x.shape} vs {b.shape}")
    return _make(x.data + b.data[None, :], (x, b),
                 lambda g: (g, g.sum(axis=0)))


def mul_colvec(x: Tensor, c: Tensor) -> Tensor:
    """Scale each row of an (n, m) matrix by the matching (n, 1) coefficient."""
    _check(x.data.ndim == 2 and c.shape == (x.shape[0], 1),
           f"mul_colvec: shape mismatch {x.shape} vs {c.shape}")
    return _make(x.data * c.data, (x, c),
                 lambda g: (g * c.data, (g * x.data).sum(axis=1, keepdims=True)))


def tsum(a: Tensor) -> Tensor:
    """Sum all entries into a scalar (shape ()) tensor."""
    return _make(np.asarray(a.data.sum()), (a,),
                 lambda g: (np.full(a.shape, float(g)),))


# ---------------------------------------------------------------------------
# shape primitives
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    _check(int(np.prod(shape, dtype=np.int64)) == a.size,
           f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat_rows(parts: list[Tensor]) -> Tensor:
    """Stack 2-d tensors along axis 0; all parts must share the column count."""
    _check(len(parts) >= 1, "concat_rows: needs at least one tensor")
    cols = parts[0].shape[1]
    for p in parts:
        _check(p.data.ndim == 2 and p.shape[1] == cols,
               f"concat_rows: shape mismatch {p.shape} vs (_, {cols})")
    sizes = [p.shape[0] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=0))

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bw)


def concat_cols(parts: list[Tensor]) -> Tensor:
    """Stack 2-d tensors along axis 1; all parts must share the row count."""
    _check(len(parts) >= 1, "concat_cols: needs at least one tensor")
    rows = parts[0].shape[0]
    for p in parts:
        _check(p.data.ndim == 2 and p.shape[0] == rows,
               f"concat_cols: shape mismatch {p.shape} vs ({rows}, _)")
    sizes = [p.shape[1] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=1))

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bw)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    _check(a.data.ndim == 2, f"slice_rows: expects a 2-d tensor, got {a.shape}")
    _check(0 <= start < stop <= a.shape[0],
           f"slice_rows: range [{start}, {stop}) invalid for {a.shape}")

    def bw(g):
        out = np.zeros(a.shape)
        out[start:stop] = g
        return (out,)

    return _make(np.ascontiguousarray(a.data[start:stop]), (a,), bw)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    _check(a.data.ndim == 2, f"slice_cols: expects a 2-d tensor, got {a.shape}")
    _check(0 <= start < stop <= a.shape[1],
           f"slice_cols: range [{start}, {stop}) invalid for {a.shape}")

    def bw(g):
        out = np.zeros(a.shape)
        out[:, start:stop] = g
        return (out,)

    return _make(np.ascontiguousarray(a.data[:, start:stop]), (a,), bw)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows by index (repeats allowed); backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64)
    _check(a.data.ndim == 2, f"gather_rows: expects a 2-d tensor, got {a.shape}")
    _check(idx.ndim == 1, f"gather_rows: indices must be 1-d, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.shape[0]} rows")

    def bw(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw)


def window_rows(a: Tensor, kernel: int, stride: int, pad: int) -> Tensor:
    """Strided-window gather over rows with symmetric zero padding.

    For an (t, d) input, returns (t' * kernel, d) where
    t' = (t + 2*pad - kernel) // stride + 1; rows [w*kernel, (w+1)*kernel)
    hold window w of the zero-padded sequence.
    """
    _check(a.data.ndim == 2, f"window_rows: expects a 2-d tensor, got {a.shape}")
    t = a.shape[0]
    _check(t + 2 * pad >= kernel,
           f"window_rows: kernel {kernel} exceeds padded length {t + 2 * pad}")
    t_out = (t + 2 * pad - kernel) // stride + 1
    starts = np.arange(t_out) * stride
    idx = (starts[:, None] + np.arange(kernel)[None, :]).reshape(-1)
    padded = np.zeros((t + 2 * pad, a.shape[1]))
    padded[pad:pad + t] = a.data

    def bw(g):
        acc = np.zeros_like(padded)
        np.add.at(acc, idx, g)
        return (acc[pad:pad + t],)

    return _make(padded[idx], (a,), bw)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive; clamp first")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    floor = float(floor)
    return _make(np.maximum(a.data, floor), (a,),
                 lambda g: (g * (a.data > floor),))


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0. Draws from the given rng."""
    if rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate {rate} outside [0, 1)")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# softmax / normalization
# ---------------------------------------------------------------------------

def _softmax_grad(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def softmax_last(a: Tensor) -> Tensor:
    """Softmax over the last axis. Row max is subtracted before exponentiation."""
    x = a.data
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _make(y, (a,), lambda g: (_softmax_grad(y, g),))


def masked_softmax(logits: Tensor, mask) -> Tensor:
    """Softmax over the last axis of ``logits + mask``.

    ``mask`` holds 0 at admissible positions and -inf at forbidden ones;
    forbidden positions get exactly zero weight. The mask is a constant: no
    gradient flows through it. A fully masked row is rejected because every
    attention row must keep at least one admissible position.
    """
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    _check(m.shape == logits.shape,
           f"masked_softmax: shape mismatch {logits.shape} vs {m.shape}")
    z = logits.data + m
    zmax = z.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(zmax)):
        raise MaskError("masked_softmax: a row has every position masked")
    e = np.exp(z - zmax)
    y = e / e.sum(axis=-1, keepdims=True)
    return _make(y, (logits,), lambda g: (_softmax_grad(y, g),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of (n, d) to zero mean / unit variance, then affine."""
    _check(x.data.ndim == 2, f"layer_norm: expects a 2-d tensor, got {x.shape}")
    d = x.shape[1]
    _check(gamma.shape == (d,) and beta.shape == (d,),
           f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match width {d}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data[None, :] + beta.data[None, :]

    def bw(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma.data[None, :]
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return (dx, dgamma, dbeta)

    return _make(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, h_out: int, w_out: int):
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, h_out, w_out))
    for ki in range(kh):
        for kj in range(kw):
            cols[:, ki, kj] = xp[:, ki:ki + (h_out - 1) * stride + 1:stride,
                                 kj:kj + (w_out - 1) * stride + 1:stride]
    return cols.transpose(3, 4, 0, 1, 2).reshape(h_out * w_out, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    """2-d convolution of a (c_in, h, w) map with (c_out, c_in, kh, kw) filters."""
    _check(x.data.ndim == 3 and w.data.ndim == 4,
           f"conv2d: expects (c,h,w) input and (o,c,kh,kw) weights, got {x.shape} and {w.shape}")
    c_in, h, wdt = x.shape
    c_out, c_w, kh, kw = w.shape
    _check(c_in == c_w, f"conv2d: channel mismatch {x.shape} vs {w.shape}")
    _check(b.shape == (c_out,), f"conv2d: bias shape {b.shape} vs {c_out} filters")
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (wdt + 2 * pad - kw) // stride + 1
    _check(h_out >= 1 and w_out >= 1, f"conv2d: kernel does not fit input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    patches = _im2col(xp, kh, kw, stride, h_out, w_out)
    w2d = w.data.reshape(c_out, -1)
    out2d = patches @ w2d.T + b.data[None, :]
    out = np.ascontiguousarray(out2d.T.reshape(c_out, h_out, w_out))

    def bw(g):
        g2d = g.reshape(c_out, -1).T
        db = g2d.sum(axis=0)
        dw = (g2d.T @ patches).reshape(w.shape)
        dpatch = (g2d @ w2d).reshape(h_out, w_out, c_in, kh, kw).transpose(2, 3, 4, 0, 1)
        dxp = np.zeros_like(xp)
        for ki in range(kh):
            for kj in range(kw):
                dxp[:, ki:ki + (h_out - 1) * stride + 1:stride,
                    kj:kj + (w_out - 1) * stride + 1:stride] += dpatch[:, ki, kj]
        dx = dxp[:, pad:pad + h, pad:pad + wdt] if pad else dxp
        return (np.ascontiguousarray(dx), dw, db)

    return _make(out, (x, w, b), bw)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Run reverse-mode differentiation from a scalar loss.

    Returns a map from each reachable leaf tensor with ``requires_grad`` to
    its gradient (same shape as the leaf), and mirrors it on ``leaf.grad``.
    Gradients are recomputed from scratch on every call, never accumulated
    across calls, so repeated invocations give identical results.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g
                result[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    return result
