"""Dense tensors with reverse-mode automatic differentiation.

Ops execute eagerly on numpy arrays and append a backward closure to an
explicit Tape. Passing tape=None (or using tensors that don't require
grad) skips recording, which is the evaluation fast path. A Tape and the
tensors on it belong to a single worker; independent tapes can run
concurrently.

Scalars default to float32; gradient-check tests build float64 graphs by
constructing float64 leaves.
"""

from __future__ import annotations

import numpy as np

from speechdex import backend
from speechdex.errors import ShapeError, VocabularyError

# When True every op validates that its output is finite (debug aid;
# non-finite values are an error state, not a value to propagate).
CHECK_FINITE = False


class Tensor:
    """A numpy array plus autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accum_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)  # copy: g may be shared
        else:
            self.grad += g

    def grad_or_zeros(self) -> np.ndarray:
        """Accumulated gradient, or zeros for leaves backward never reached."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def tensor(data, dtype=None, requires_grad: bool = False) -> Tensor:
    """Create a leaf tensor (copies its input)."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


class Tape:
    """Ordered record of executed ops; replayed in reverse by backward()."""

    def __init__(self):
        self._entries: list[tuple[Tensor, object]] = []

    def __len__(self):
        return len(self._entries)

    def record(self, out: Tensor, backward_fn) -> None:
        self._entries.append((out, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Populate .grad of every requires_grad tensor reachable from loss."""
        if loss.data.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        loss.accum_grad(np.ones_like(loss.data))
        for out, fn in reversed(self._entries):
            if out.grad is None:
                continue
            fn(out.grad)


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def _finite_check(arr: np.ndarray, op: str) -> None:
    if CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {op}")


def _out(tape: Tape | None, data: np.ndarray, requires: bool, op: str, bwd) -> Tensor:
    _finite_check(data, op)
    t = Tensor(data, requires_grad=requires)
    if tape is not None and requires:
        tape.record(t, bwd)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(tape, a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a.accum_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accum_grad(_unbroadcast(g, b.shape))

    return _out(tape, data, a.requires_grad or b.requires_grad, "add", bwd)


def sub(tape, a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a.accum_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accum_grad(-_unbroadcast(g, b.shape))

    return _out(tape, data, a.requires_grad or b.requires_grad, "sub", bwd)


def mul(tape, a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a.accum_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accum_grad(_unbroadcast(g * a.data, b.shape))

    return _out(tape, data, a.requires_grad or b.requires_grad, "mul", bwd)


def scale(tape, a: Tensor, c: float) -> Tensor:
    data = a.data * a.data.dtype.type(c)

    def bwd(g):
        a.accum_grad(g * a.data.dtype.type(c))

    return _out(tape, data, a.requires_grad, "scale", bwd)


def add_scalar(tape, a: Tensor, c: float) -> Tensor:
    data = a.data + a.data.dtype.type(c)

    def bwd(g):
        a.accum_grad(g)

    return _out(tape, data, a.requires_grad, "add_scalar", bwd)


def matmul(tape, a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports 2-D x 2-D, N-D x 2-D (shared weight), and
    stacked N-D x N-D with identical leading dims."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul leading dimensions differ: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a.accum_grad(g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = a.data.swapaxes(-1, -2) @ g
            b.accum_grad(gb)

    return _out(tape, data, a.requires_grad or b.requires_grad, "matmul", bwd)


def transpose(tape, a: Tensor, axes: tuple[int, ...]) -> Tensor:
    data = np.transpose(a.data, axes).copy()
    inv = np.argsort(axes)

    def bwd(g):
        a.accum_grad(np.transpose(g, inv))

    return _out(tape, data, a.requires_grad, "transpose", bwd)


def reshape(tape, a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)

    def bwd(g):
        a.accum_grad(g.reshape(a.shape))

    return _out(tape, data, a.requires_grad, "reshape", bwd)


def concat_rows(tape, parts: list[Tensor]) -> Tensor:
    """Concatenate along axis 0 (used to join micro-batch embeddings)."""
    data = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.shape[0] for p in parts]

    def bwd(g):
        lo = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                p.accum_grad(g[lo:lo + n])
            lo += n

    return _out(tape, data, any(p.requires_grad for p in parts), "concat_rows", bwd)


def sum_all(tape, a: Tensor) -> Tensor:
    data = a.data.sum()

    def bwd(g):
        a.accum_grad(np.full_like(a.data, float(g)))

    return _out(tape, np.asarray(data), a.requires_grad, "sum_all", bwd)


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------

def relu(tape, a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def bwd(g):
        a.accum_grad(g * (a.data > 0))

    return _out(tape, data, a.requires_grad, "relu", bwd)


def gelu(tape, a: Tensor) -> Tensor:
    """tanh-form GELU; the tanh intermediate is saved for backward."""
    y, t = backend.gelu_fwd(a.data)
    flat_t = t.reshape(-1)

    def bwd(g):
        dx = backend.gelu_bwd(a.data.reshape(-1), flat_t,
                              g.reshape(-1).astype(a.data.dtype, copy=False))
        a.accum_grad(dx.reshape(a.shape))

    return _out(tape, y, a.requires_grad, "gelu", bwd)


def softmax_rows(tape, a: Tensor) -> Tensor:
    """Softmax over the last axis, computed with per-row max subtraction."""
    flat = a.data.reshape(-1, a.shape[-1])
    y = backend.softmax_rows(flat).reshape(a.shape)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        a.accum_grad(y * (g - dot))

    return _out(tape, y, a.requires_grad, "softmax_rows", bwd)


def layer_norm(tape, x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise ShapeError(f"layer_norm affine params must have shape ({h},), "
                         f"got gain {gain.shape} bias {bias.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = (x.data - mean) * inv_std
    data = xhat * gain.data + bias.data

    def bwd(g):
        if gain.requires_grad:
            gain.accum_grad((g * xhat).reshape(-1, h).sum(axis=0))
        if bias.requires_grad:
            bias.accum_grad(g.reshape(-1, h).sum(axis=0))
        if x.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            x.accum_grad((gy - m1 - xhat * m2) * inv_std)

    requires = x.requires_grad or gain.requires_grad or bias.requires_grad
    return _out(tape, data, requires, "layer_norm", bwd)


def l2_normalize_rows(tape, x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, x.data.dtype.type(eps))
    zhat = x.data / norm

    def bwd(g):
        dot = (g * zhat).sum(axis=-1, keepdims=True)
        x.accum_grad((g - zhat * dot) / norm)

    return _out(tape, zhat, x.requires_grad, "l2_normalize_rows", bwd)


def dropout(tape, x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with a mask drawn from the caller's seeded stream."""
    if rate <= 0.0:
        return x
    draw_dtype = np.float32 if x.data.dtype == np.float32 else np.float64
    keep = (rng.random(x.shape, dtype=draw_dtype) >= rate).astype(x.data.dtype)
    mask = keep / x.data.dtype.type(1.0 - rate)
    data = x.data * mask

    def bwd(g):
        x.accum_grad(g * mask)

    return _out(tape, data, x.requires_grad, "dropout", bwd)


# ---------------------------------------------------------------------------
# gathering / pooling
# ---------------------------------------------------------------------------

def embedding_gather(tape, table: Tensor, ids) -> Tensor:
    """Rows of `table` at `ids` (1-D or 2-D int array); backward scatter-adds."""
    ids = np.asarray(ids)
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        bad = ids[(ids < 0) | (ids >= v)].flat[0]
        raise VocabularyError(f"id {int(bad)} outside vocabulary of size {v}")
    data = table.data[ids]

    def bwd(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    return _out(tape, data, table.requires_grad, "embedding_gather", bwd)


def mean_pool(tape, x: Tensor) -> Tensor:
    """Mean over positions of a [L, m] tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"mean_pool expects a 2-D tensor, got {x.shape}")
    length = x.shape[0]
    if length == 0:
        raise ShapeError("mean_pool of an empty sequence")
    data = x.data.mean(axis=0)

    def bwd(g):
        x.accum_grad(np.repeat((g / length)[None, :], length, axis=0))

    return _out(tape, data, x.requires_grad, "mean_pool", bwd)


def masked_mean_rows(tape, x: Tensor, mask: np.ndarray) -> Tensor:
    """Per-row mean over valid positions: x [B, L, m], mask [B, L] of {0,1}."""
    lengths = mask.sum(axis=1)
    if np.any(lengths == 0):
        raise ShapeError("masked_mean_rows: a row has no valid positions")
    m = mask.astype(x.data.dtype)[:, :, None]
    inv_len = (1.0 / lengths).astype(x.data.dtype)[:, None]
    data = (x.data * m).sum(axis=1) * inv_len

    def bwd(g):
        x.accum_grad(g[:, None, :] * m * inv_len[:, None, :])

    return _out(tape, data, x.requires_grad, "masked_mean_rows", bwd)


def select_rows(tape, x: Tensor, idx: np.ndarray) -> Tensor:
    """x[b, idx[b], :] for each row b (last-token pooling)."""
    rows = np.arange(x.shape[0])
    data = x.data[rows, idx]

    def bwd(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        np.add.at(x.grad, (rows, idx), g)

    return _out(tape, data, x.requires_grad, "select_rows", bwd)


# ---------------------------------------------------------------------------
# loss building blocks
# ---------------------------------------------------------------------------

def logsumexp_rows(tape, x: Tensor) -> Tensor:
    """Stable log(sum(exp)) over the last axis of a 2-D tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"logsumexp_rows expects a 2-D tensor, got {x.shape}")
    mx = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - mx)
    s = e.sum(axis=1, keepdims=True)
    data = (np.log(s) + mx).reshape(-1)
    soft = e / s

    def bwd(g):
        x.accum_grad(soft * g[:, None])

    return _out(tape, data, x.requires_grad, "logsumexp_rows", bwd)


def take_diag(tape, x: Tensor) -> Tensor:
    n, m = x.shape
    if n != m:
        raise ShapeError(f"take_diag expects a square matrix, got {x.shape}")
    data = np.diagonal(x.data).copy()

    def bwd(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[np.arange(n), np.arange(n)] += g

    return _out(tape, data, x.requires_grad, "take_diag", bwd)
