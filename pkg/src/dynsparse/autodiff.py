"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Everything downstream (gating, block-sparse layers, the models) is composed
from the operations in this module, so every layer is trainable end to end.
Design constraints:

* float64 only on this path; finite-difference checks stay tight.
* no broadcasting beyond scalar-tensor; every other shape mix has an
  explicit op (``add_col``, ``div_cols``, ...).
* any NaN/Inf produced by a forward op raises immediately instead of
  propagating.
"""

from __future__ import annotations

import threading

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf, or non-finite data was supplied."""


_STACK = threading.local()


def _tape_stack():
    if not hasattr(_STACK, "tapes"):
        _STACK.tapes = []
    return _STACK.tapes


def active_tape():
    """The innermost open Tape on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 array plus gradient bookkeeping.

    From the caller's viewpoint tensors are immutable once created; training
    code mutates ``data`` in place only inside optimizer steps, between tapes.
    """

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() on tensor of shape {self.shape}")

    def detach(self):
        """A grad-less view of the same data."""
        return Tensor(self.data, requires_grad=False)

    def copy(self):
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return t

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalar operands must be plain Python numbers
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return shift(self, -float(other))

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)


class Tape:
    """Append-only record of forward ops, replayed in reverse for gradients.

    Creation order is topological by construction (an op can only consume
    tensors that already exist), so the backward pass is a single reversed
    sweep. One ``backward`` call per tape.
    """

    def __init__(self):
        self.nodes = []
        self._done = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss, seed=None):
        """Run reverse accumulation from ``loss`` (a scalar unless seed given)."""
        if self._done:
            raise RuntimeError("tape already consumed by a backward pass")
        self._done = True
        if seed is None:
            if loss.size != 1:
                raise ShapeError("backward() without seed requires a scalar loss")
            seed = np.ones_like(loss.data)
        _accumulate(loss, np.asarray(seed, dtype=np.float64))
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _result(out_data, parents, backward_fn):
    """Wrap an op output, recording it on the active tape when grads are needed."""
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError("forward op produced non-finite values")
    tape = active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs
    out.grad = None
    out._parents = tuple(parents) if needs else ()
    out._backward = backward_fn if needs else None
    if needs:
        tape.nodes.append(out)
    return out


def zero_grads(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# linear algebra

def matvec(w, h):
    """y = W @ h for W (m, n) and h (n,)."""
    if w.ndim != 2 or h.ndim != 1 or w.shape[1] != h.shape[0]:
        raise ShapeError(f"matvec: incompatible shapes {w.shape} and {h.shape}")
    out = w.data @ h.data

    def backward(g):
        _accumulate(w, np.outer(g, h.data))
        _accumulate(h, w.data.T @ g)

    return _result(out, (w, h), backward)


def matmul(w, x):
    """Y = W @ X for W (m, n) and a column-batch X (n, B)."""
    if w.ndim != 2 or x.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {w.shape} and {x.shape}")
    out = w.data @ x.data

    def backward(g):
        _accumulate(w, g @ x.data.T)
        _accumulate(x, w.data.T @ g)

    return _result(out, (w, x), backward)


# ---------------------------------------------------------------------------
# elementwise suite

def _scalar_like(t):
    return t.size == 1


def add(a, b):
    """Elementwise a + b; one side may be a 1-element tensor."""
    if a.shape == b.shape:
        out = a.data + b.data

        def backward(g):
            _accumulate(a, g)
            _accumulate(b, g)

    elif _scalar_like(b):
        out = a.data + b.data.reshape(())

        def backward(g):
            _accumulate(a, g)
            _accumulate(b, np.full(b.shape, g.sum()))

    elif _scalar_like(a):
        return add(b, a)
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    return _result(out, (a, b), backward)


def mul(a, b):
    """Elementwise a * b; one side may be a 1-element tensor."""
    if a.shape == b.shape:
        out = a.data * b.data

        def backward(g):
            _accumulate(a, g * b.data)
            _accumulate(b, g * a.data)

    elif _scalar_like(b):
        out = a.data * b.data.reshape(())

        def backward(g):
            _accumulate(a, g * b.data.reshape(()))
            _accumulate(b, np.full(b.shape, (g * a.data).sum()))

    elif _scalar_like(a):
        return mul(b, a)
    else:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return _result(out, (a, b), backward)


def scale(x, c):
    """x * c for a Python scalar c."""
    c = float(c)
    out = x.data * c

    def backward(g):
        _accumulate(x, g * c)

    return _result(out, (x,), backward)


def shift(x, c):
    """x + c for a Python scalar c."""
    c = float(c)
    out = x.data + c

    def backward(g):
        _accumulate(x, g)

    return _result(out, (x,), backward)


def div_scalar(x, c):
    """x / c for a nonzero Python scalar c."""
    c = float(c)
    if c == 0.0:
        raise ZeroDivisionError("div_scalar by zero")
    return scale(x, 1.0 / c)


def div(x, s):
    """x / s where s is a 1-element tensor; gradients flow into both."""
    if not _scalar_like(s):
        raise ShapeError(f"div: denominator must be scalar, got {s.shape}")
    sval = float(s.data.reshape(()))
    if sval == 0.0:
        raise ZeroDivisionError("div by zero-valued tensor")
    out = x.data / sval

    def backward(g):
        _accumulate(x, g / sval)
        _accumulate(s, np.full(s.shape, -(g * x.data).sum() / (sval * sval)))

    return _result(out, (x, s), backward)


def add_col(m, v):
    """Add vector v (r,) to every column of m (r, B)."""
    if m.ndim != 2 or v.ndim != 1 or m.shape[0] != v.shape[0]:
        raise ShapeError(f"add_col: incompatible shapes {m.shape} and {v.shape}")
    out = m.data + v.data[:, None]

    def backward(g):
        _accumulate(m, g)
        _accumulate(v, g.sum(axis=1))

    return _result(out, (m, v), backward)


def div_cols(m, s):
    """Divide column j of m (r, B) by s[j]; all s entries must be nonzero."""
    if m.ndim != 2 or s.ndim != 1 or m.shape[1] != s.shape[0]:
        raise ShapeError(f"div_cols: incompatible shapes {m.shape} and {s.shape}")
    if np.any(s.data == 0.0):
        raise ZeroDivisionError("div_cols with zero divisor")
    out = m.data / s.data[None, :]

    def backward(g):
        _accumulate(m, g / s.data[None, :])
        _accumulate(s, -(g * m.data).sum(axis=0) / (s.data * s.data))

    return _result(out, (m, s), backward)


def relu(x):
    """max(x, 0); the subgradient at exactly 0 is taken as 0."""
    pos = x.data > 0
    out = np.where(pos, x.data, 0.0)

    def backward(g):
        _accumulate(x, g * pos)

    return _result(out, (x,), backward)


def sigmoid(x):
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accumulate(x, g * out * (1.0 - out))

    return _result(out, (x,), backward)


def tanh(x):
    out = np.tanh(x.data)

    def backward(g):
        _accumulate(x, g * (1.0 - out * out))

    return _result(out, (x,), backward)


def tsum(x):
    """Sum of all entries, as a 0-d tensor."""
    out = np.asarray(x.data.sum())

    def backward(g):
        _accumulate(x, np.full(x.shape, float(g)))

    return _result(out, (x,), backward)


def mean(x):
    """Mean of all entries, as a 0-d tensor."""
    n = x.size
    out = np.asarray(x.data.sum() / n)

    def backward(g):
        _accumulate(x, np.full(x.shape, float(g) / n))

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# shape surgery

def narrow(x, start, length, axis=0):
    """Contiguous slice [start, start+length) along axis (1-D or 2-D input)."""
    if axis >= x.ndim or start < 0 or start + length > x.shape[axis]:
        raise ShapeError(
            f"narrow: slice [{start}:{start + length}) axis {axis} of {x.shape}")
    index = (slice(start, start + length),) if axis == 0 else (slice(None), slice(start, start + length))
    out = x.data[index].copy()

    def backward(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[index] += g

    return _result(out, (x,), backward)


def embedding(table, ids):
    """Column-stacked rows of table (V, E) selected by ids; output (E, B)."""
    ids = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    if ids.ndim != 1:
        raise ShapeError("embedding: ids must be 1-D")
    if np.any(ids < 0) or np.any(ids >= v):
        raise IndexError(f"embedding: id out of range for vocab {v}")
    out = table.data[ids].T.copy()

    def backward(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g.T)

    return _result(out, (table,), backward)


# ---------------------------------------------------------------------------
# softmax family

def softmax(x, temperature=1.0):
    """Stable softmax of x / temperature; 1-D input, or column-wise on 2-D."""
    temperature = float(temperature)
    if temperature <= 0.0:
        raise ValueError(f"softmax temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=0, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=0, keepdims=True)
        _accumulate(x, out * (g - dot) / temperature)

    return _result(out, (x,), backward)


def _log_softmax_data(z):
    m = z.max(axis=0, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=0, keepdims=True))
    return z - lse


def cross_entropy(logits, target):
    """-log softmax(logits)[target] for a 1-D logits vector."""
    if logits.ndim != 1:
        raise ShapeError("cross_entropy expects 1-D logits")
    target = int(target)
    if target < 0 or target >= logits.shape[0]:
        raise IndexError(f"target {target} out of range for {logits.shape[0]} classes")
    logp = _log_softmax_data(logits.data)
    out = np.asarray(-logp[target])

    def backward(g):
        d = np.exp(logp)
        d[target] -= 1.0
        _accumulate(logits, d * float(g))

    return _result(out, (logits,), backward)


def cross_entropy_cols(logits, targets, reduction="mean"):
    """Mean (or sum) of per-column cross entropies for logits (V, B)."""
    if logits.ndim != 2:
        raise ShapeError("cross_entropy_cols expects 2-D logits")
    targets = np.asarray(targets, dtype=np.int64)
    v, b = logits.shape
    if targets.shape != (b,):
        raise ShapeError(f"targets shape {targets.shape} does not match batch {b}")
    if np.any(targets < 0) or np.any(targets >= v):
        raise IndexError(f"target out of range for {v} classes")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    logp = _log_softmax_data(logits.data)
    picked = logp[targets, np.arange(b)]
    denom = b if reduction == "mean" else 1
    out = np.asarray(-picked.sum() / denom)

    def backward(g):
        d = np.exp(logp)
        d[targets, np.arange(b)] -= 1.0
        _accumulate(logits, d * (float(g) / denom))

    return _result(out, (logits,), backward)


# ---------------------------------------------------------------------------
# regularization

def dropout(x, rate, training, rng):
    """Inverted dropout: zero entries with probability ``rate`` and rescale
    survivors by 1/(1-rate) during training; identity at inference."""
    rate = float(rate)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    factor = 1.0 / (1.0 - rate)
    out = np.where(keep, x.data * factor, 0.0)

    def backward(g):
        _accumulate(x, np.where(keep, g * factor, 0.0))

    return _result(out, (x,), backward)


# ---------------------------------------------------------------------------
# top-k selection

def _topk_rows(values, k):
    """Indices of the k largest entries, ties broken by lower index."""
    order = np.argsort(-values, kind="stable")
    return order[:k]


def keep_topk(x, k):
    """Zero all but the k largest entries of a 1-D tensor.

    Ties break toward the lower flat index. The backward rule follows the
    selected set: de-selected positions get exactly zero gradient.
    """
    if x.ndim != 1:
        raise ShapeError("keep_topk expects a 1-D tensor")
    if not 1 <= k <= x.size:
        raise ValueError(f"keep_topk: k={k} out of range for size {x.size}")
    idx = _topk_rows(x.data, k)
    out = np.zeros_like(x.data)
    out[idx] = x.data[idx]

    def backward(g):
        masked = np.zeros_like(g)
        masked[idx] = g[idx]
        _accumulate(x, masked)

    return _result(out, (x,), backward)


def keep_topk_cols(x, k):
    """Column-wise keep_topk for a (n, B) tensor."""
    if x.ndim != 2:
        raise ShapeError("keep_topk_cols expects a 2-D tensor")
    n, b = x.shape
    if not 1 <= k <= n:
        raise ValueError(f"keep_topk_cols: k={k} out of range for {n} rows")
    order = np.argsort(-x.data, axis=0, kind="stable")[:k]
    cols = np.arange(b)[None, :]
    sel = np.zeros_like(x.data, dtype=bool)
    sel[order, cols] = True
    out = np.where(sel, x.data, 0.0)

    def backward(g):
        _accumulate(x, np.where(sel, g, 0.0))

    return _result(out, (x,), backward)


def col_mean(x):
    """Per-column mean of a (n, B) tensor, as a (B,) tensor."""
    if x.ndim != 2:
        raise ShapeError("col_mean expects a 2-D tensor")
    n = x.shape[0]
    out = x.data.sum(axis=0) / n

    def backward(g):
        _accumulate(x, np.repeat(g[None, :] / n, n, axis=0))

    return _result(out, (x,), backward)
