"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a Tensor wraps a numpy array, and every
operation optionally records a backward closure on the active Tape. One tape
lives for one forward/backward step and is discarded afterwards. Without an
active tape, operations run in plain inference mode with no recording.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf was produced (debug-check mode) or fed to the optimizer."""


_ACTIVE_TAPE = None
_DEBUG_CHECKS = False


def set_debug_checks(enabled):
    """Toggle NaN/Inf scanning after every op. Off by default (training speed)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor:
    """A dense float64 array with an optional gradient buffer.

    requires_grad marks leaf parameters whose .grad is accumulated by
    backward passes and consumed by the optimizer. Intermediate tensors are
    tracked internally by the tape that created them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tracked")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tracked = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # small sugar; the module-level functions are the real API
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only record of one forward pass, replayed in reverse.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction and backward() is a single reversed sweep.
    """

    def __init__(self):
        self.nodes = []  # (output tensor, backward closure)

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, loss):
        """Seed d(loss)/d(loss)=1 and accumulate gradients into leaves."""
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, bw in reversed(self.nodes):
            if out.grad is not None:
                bw(out.grad)


def _accum(t, g):
    if t.requires_grad or t._tracked:
        if t.grad is None:
            t.grad = np.zeros(t.data.shape)
        t.grad += g


def _make(op_name, data, parents, backward):
    out = Tensor(data)
    if _DEBUG_CHECKS and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"non-finite values produced by op '{op_name}'")
    tape = _ACTIVE_TAPE
    if tape is not None and any(p.requires_grad or p._tracked for p in parents):
        out._tracked = True
        tape.nodes.append((out, backward))
    return out


def add(a, b):
    """Elementwise sum. Also accepts a 1-D bias added to every row of a 2-D tensor."""
    if a.data.shape == b.data.shape:
        def bw(g):
            _accum(a, g)
            _accum(b, g)
    elif a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]:
        def bw(g):
            _accum(a, g)
            _accum(b, g.sum(axis=0))
    else:
        raise ShapeError(f"add shapes {a.data.shape} vs {b.data.shape}")
    return _make("add", a.data + b.data, (a, b), bw)


def mul(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shapes {a.data.shape} vs {b.data.shape}")

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make("mul", a.data * b.data, (a, b), bw)


def scale(a, c):
    """Multiply by a python constant."""
    c = float(c)

    def bw(g):
        _accum(a, g * c)

    return _make("scale", a.data * c, (a,), bw)


def sigmoid(a):
    y = expit(a.data)

    def bw(g):
        _accum(a, g * y * (1.0 - y))

    return _make("sigmoid", y, (a,), bw)


def tanh(a):
    y = np.tanh(a.data)

    def bw(g):
        _accum(a, g * (1.0 - y * y))

    return _make("tanh", y, (a,), bw)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.data.shape} x {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.data.shape} x {b.data.shape}")

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make("matmul", a.data @ b.data, (a, b), bw)


def _parse_contract_spec(spec):
    try:
        lhs, out = spec.split("->")
        sa, sb = lhs.split(",")
    except ValueError:
        raise ValueError(f"contract spec must look like 'ab,bc->ac', got '{spec}'")
    for s in (sa, sb):
        if len(set(s)) != len(s):
            raise ValueError(f"repeated index within one operand in '{spec}'")
    known = set(sa) | set(sb)
    if not set(out) <= known:
        raise ValueError(f"output indices not drawn from inputs in '{spec}'")
    for s, other in ((sa, sb), (sb, sa)):
        for idx in s:
            if idx not in out and idx not in other:
                raise ValueError(f"index '{idx}' of '{spec}' would need broadcasting in backward")
    return sa, sb, out


def contract(spec, a, b):
    """Two-operand einsum with automatic backward.

    Every input index must appear in the output or in the other operand
    (checked), which makes both gradients plain einsums of the same family.
    Evaluated with optimize=False so results are bitwise reproducible across
    call shapes.
    """
    sa, sb, out = _parse_contract_spec(spec)
    y = np.einsum(spec, a.data, b.data, optimize=False)

    def bw(g):
        _accum(a, np.einsum(f"{out},{sb}->{sa}", g, b.data, optimize=False))
        _accum(b, np.einsum(f"{out},{sa}->{sb}", g, a.data, optimize=False))

    return _make("contract", y, (a, b), bw)


def concat(tensors, axis=-1):
    if not tensors:
        raise ValueError("concat of no tensors")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % data.ndim
    sizes = [t.data.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _make("concat", data, tuple(tensors), bw)


def slice_cols(a, lo, hi):
    """Columns [lo, hi) of a 2-D tensor."""
    if a.data.ndim != 2:
        raise ShapeError(f"slice_cols needs a 2-D tensor, got {a.data.shape}")

    def bw(g):
        full = np.zeros(a.data.shape)
        full[:, lo:hi] = g
        _accum(a, full)

    return _make("slice_cols", a.data[:, lo:hi].copy(), (a,), bw)


def take_step(a, t):
    """Slice x[:, t, :] out of a 3-D tensor (batch, time, feat)."""
    if a.data.ndim != 3:
        raise ShapeError(f"take_step needs a 3-D tensor, got {a.data.shape}")

    def bw(g):
        full = np.zeros(a.data.shape)
        full[:, t, :] = g
        _accum(a, full)

    return _make("take_step", a.data[:, t, :].copy(), (a,), bw)


def reshape(a, shape):
    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    return _make("reshape", a.data.reshape(shape).copy(), (a,), bw)


def embedding(table, ids):
    """Row lookup table[ids]; ids is an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(f"embedding id out of range for table with {table.data.shape[0]} rows")

    def bw(g):
        if table.requires_grad or table._tracked:
            if table.grad is None:
                table.grad = np.zeros(table.data.shape)
            np.add.at(table.grad, ids, g)

    return _make("embedding", table.data[ids], (table,), bw)


def softmax(a, axis=-1):
    """Numerically stabilized softmax along one axis; rows live on the simplex."""
    if a.data.size == 0:
        raise ValueError("softmax of empty input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    return _make("softmax", y, (a,), bw)


def cross_entropy(probs, target_index):
    """-ln(probs[target]) for a 1-D distribution."""
    if probs.data.ndim != 1:
        raise ShapeError(f"cross_entropy needs a 1-D distribution, got {probs.data.shape}")
    k = probs.data.shape[0]
    t = int(target_index)
    if not 0 <= t < k:
        raise IndexError(f"target index {t} out of range for {k} classes")

    def bw(g):
        full = np.zeros(probs.data.shape)
        full[t] = -g / probs.data[t]
        _accum(probs, full)

    return _make("cross_entropy", np.array(-np.log(probs.data[t])), (probs,), bw)


def cross_entropy_rows(probs, targets):
    """Per-row -ln(probs[i, targets[i]]) for a 2-D batch of distributions."""
    if probs.data.ndim != 2:
        raise ShapeError(f"cross_entropy_rows needs 2-D probs, got {probs.data.shape}")
    targets = np.asarray(targets)
    n, k = probs.data.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match batch {n}")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise IndexError(f"target index out of range for {k} classes")
    rows = np.arange(n)
    picked = probs.data[rows, targets]

    def bw(g):
        full = np.zeros(probs.data.shape)
        full[rows, targets] = -g / picked
        _accum(probs, full)

    return _make("cross_entropy_rows", -np.log(picked), (probs,), bw)


def sum_all(a):
    def bw(g):
        _accum(a, np.full(a.data.shape, float(g)))

    return _make("sum_all", np.array(a.data.sum()), (a,), bw)


def zero_grads(params):
    for p in params.values() if isinstance(params, dict) else params:
        p.zero_grad()


class GradCheckReport:
    """Outcome of a finite-difference sweep over a parameter set."""

    def __init__(self, per_param, tol):
        self.per_param = per_param          # name -> max relative error
        self.tol = tol
        self.max_rel_error = max(per_param.values()) if per_param else 0.0
        self.passed = self.max_rel_error <= tol

    def __repr__(self):
        worst = max(self.per_param, key=self.per_param.get) if self.per_param else "-"
        return (f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, "
                f"worst='{worst}', passed={self.passed})")


def check_gradients(f, params, eps=1e-5, tol=1e-4, rel_floor=1e-2):
    """Compare tape gradients of the scalar f() against central differences.

    f must be deterministic and close over params (a dict name -> Tensor).
    The relative error denominator is floored at rel_floor so that FD
    round-off on near-zero gradients does not dominate.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    zero_grads(params)
    with Tape() as tape:
        loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError("loss is not finite")
    tape.backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros(p.data.shape))
        for name, p in params.items()
    }

    per_param = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        an = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = float(f().data)
            flat[i] = orig - eps
            lm = float(f().data)
            flat[i] = orig
            fd = (lp - lm) / (2.0 * eps)
            rel = abs(fd - an[i]) / max(abs(fd), abs(an[i]), rel_floor)
            if rel > worst:
                worst = rel
        per_param[name] = worst
    zero_grads(params)
    return GradCheckReport(per_param, tol)
