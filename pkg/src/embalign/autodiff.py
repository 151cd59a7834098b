"""Dense-tensor arithmetic with reverse-mode automatic differentiation.

The engine is deliberately small. Tensors wrap numpy arrays; differentiable
operations run eagerly and, when a ``Tape`` is active, register a backward
callback on it. ``backward`` replays the callbacks in exact reverse execution
order, accumulating gradients additively whenever a tensor feeds several
operations. Without an active tape every operation is a plain numpy
computation, which is what inference paths use.

Training runs in float32; gradient checking builds float64 graphs because
central differences are unreliable in single precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericsError, ShapeError, StaleGradientError

_DEBUG = False


def set_debug(flag: bool) -> None:
    """Toggle debug checks: finite-value assertions and stale-gradient detection."""
    global _DEBUG
    _DEBUG = bool(flag)


def debug_enabled() -> bool:
    return _DEBUG


class Tensor:
    """A dense row-major array plus its accumulated gradient."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def assert_finite(self, what: str = "tensor") -> None:
        if not np.all(np.isfinite(self.data)):
            raise NumericsError(f"non-finite values in {what}")

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """A named tensor with a trainable flag. Frozen parameters are never stepped."""

    __slots__ = ("trainable", "name")

    def __init__(self, data, trainable=True, name="", dtype=None):
        super().__init__(data, dtype=dtype)
        self.trainable = trainable
        self.name = name

    def __repr__(self):
        return (
            f"Parameter({self.name!r}, shape={tuple(self.data.shape)}, "
            f"trainable={self.trainable})"
        )


def _wrap(arr: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.grad = None
    return t


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed differentiable operations.

    Used as a context manager; operations executed inside the ``with`` block
    are recorded, everything outside runs untracked.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, object]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def __len__(self) -> int:
        return len(self._nodes)


def record(out: Tensor, backward_fn) -> None:
    """Register ``backward_fn`` for ``out`` on the active tape, if any.

    ``backward_fn`` receives the gradient of the loss w.r.t. ``out`` and must
    accumulate into the inputs via :func:`accumulate_grad`. This is the hook
    other modules use to define fused differentiable operations.
    """
    if _TAPE_STACK:
        _TAPE_STACK[-1]._nodes.append((out, backward_fn))


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    # Out-of-place addition: gradient arrays may be aliased across tensors
    # (e.g. `add` passes the upstream gradient through unchanged), so they
    # must never be mutated once stored.
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate gradients of everything on ``tape`` that ``loss`` depends on."""
    if loss.data.shape != ():
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if _DEBUG:
        loss.assert_finite("loss")
    loss.grad = np.asarray(1.0, dtype=loss.data.dtype)
    for out, fn in reversed(tape._nodes):
        if out.grad is not None:
            fn(out.grad)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = _wrap(a.data @ b.data)

    def bwd(g):
        accumulate_grad(a, g @ b.data.T)
        accumulate_grad(b, a.data.T @ g)

    record(out, bwd)
    return out


def _broadcast_data(a: Tensor, b: Tensor, fn) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError as e:
        raise ShapeError(str(e)) from None


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _wrap(_broadcast_data(a, b, np.add))

    def bwd(g):
        accumulate_grad(a, _unbroadcast(g, a.data.shape))
        accumulate_grad(b, _unbroadcast(g, b.data.shape))

    record(out, bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _wrap(_broadcast_data(a, b, np.subtract))

    def bwd(g):
        accumulate_grad(a, _unbroadcast(g, a.data.shape))
        accumulate_grad(b, _unbroadcast(-g, b.data.shape))

    record(out, bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _wrap(_broadcast_data(a, b, np.multiply))

    def bwd(g):
        accumulate_grad(a, _unbroadcast(g * b.data, a.data.shape))
        accumulate_grad(b, _unbroadcast(g * a.data, b.data.shape))

    record(out, bwd)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a non-differentiated constant."""
    out = _wrap(a.data * c)

    def bwd(g):
        accumulate_grad(a, g * c)

    record(out, bwd)
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    out = _wrap(a.data.T)

    def bwd(g):
        accumulate_grad(a, g.T)

    record(out, bwd)
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] on shape {a.shape}")
    out = _wrap(a.data[:, start:stop])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        accumulate_grad(a, full)

    record(out, bwd)
    return out


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols of nothing")
    out = _wrap(np.concatenate([p.data for p in parts], axis=1))
    widths = [p.shape[1] for p in parts]

    def bwd(g):
        off = 0
        for p, w in zip(parts, widths):
            accumulate_grad(p, g[:, off : off + w])
            off += w

    record(out, bwd)
    return out


def tensor_sum(a: Tensor) -> Tensor:
    out = _wrap(np.asarray(a.data.sum(), dtype=a.data.dtype))

    def bwd(g):
        accumulate_grad(a, np.broadcast_to(g, a.data.shape))

    record(out, bwd)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Element-wise GeLU, tanh approximation:
    0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    xd = x.data
    t = np.tanh(_GELU_C * (xd + _GELU_K * xd**3))
    out = _wrap(0.5 * xd * (1.0 + t))

    def bwd(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_K * xd**2)
        local = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * du
        accumulate_grad(x, g * local)

    record(out, bwd)
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a matrix, stabilized by max subtraction."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out = _wrap(s)

    def bwd(g):
        accumulate_grad(x, s * (g - (g * s).sum(axis=1, keepdims=True)))

    record(out, bwd)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    if x.data.ndim != 2 or gain.data.shape != (x.shape[1],) or bias.data.shape != (x.shape[1],):
        raise ShapeError(
            f"layer_norm: x {x.shape}, gain {gain.shape}, bias {bias.shape}"
        )
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    out = _wrap(xhat * gain.data + bias.data)

    def bwd(g):
        dxhat = g * gain.data
        accumulate_grad(gain, (g * xhat).sum(axis=0))
        accumulate_grad(bias, g.sum(axis=0))
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        accumulate_grad(x, dx)

    record(out, bwd)
    return out


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; gradients scatter-add back onto the table."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("embedding_lookup expects a flat id sequence")
    out = _wrap(table.data[idx])

    def bwd(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, idx, g)
        accumulate_grad(table, buf)

    record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean over all elements of the squared difference. Target is constant."""
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.data.shape != tgt.shape:
        raise ShapeError(f"mse_loss: pred {pred.data.shape} vs target {tgt.shape}")
    diff = pred.data - tgt
    out = _wrap(np.asarray((diff * diff).mean(), dtype=pred.data.dtype))
    if _DEBUG:
        out.assert_finite("mse_loss")

    def bwd(g):
        accumulate_grad(pred, g * (2.0 / diff.size) * diff)

    record(out, bwd)
    return out


def cross_entropy(logits: Tensor, labels, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-softmax of the true class over non-ignored positions."""
    from .errors import DataError

    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [m x K] logits, got {logits.shape}")
    lab = np.asarray(labels, dtype=np.int64)
    m, k = logits.data.shape
    if lab.shape != (m,):
        raise ShapeError(f"cross_entropy: {m} rows but {lab.shape} labels")
    keep = np.ones(m, dtype=bool) if ignore_index is None else lab != ignore_index
    bad = keep & ((lab < 0) | (lab >= k))
    if bad.any():
        raise DataError(f"label out of range [0,{k}): {lab[bad][0]}")
    n = int(keep.sum())
    if n == 0:
        raise NumericsError("cross_entropy: all positions ignored, loss undefined")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    lse = np.log(ez.sum(axis=1)) + zmax[:, 0]
    safe = np.where(keep, lab, 0)
    nll = lse - z[np.arange(m), safe]
    out = _wrap(np.asarray(nll[keep].mean(), dtype=z.dtype))
    if _DEBUG:
        out.assert_finite("cross_entropy")

    def bwd(g):
        grad = ez / ez.sum(axis=1, keepdims=True)
        grad[np.arange(m), safe] -= 1.0
        grad[~keep] = 0.0
        accumulate_grad(logits, g * grad / n)

    record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


class SGD:
    """Plain gradient descent: v <- v - lr * g."""

    def __init__(self, params, lr: float):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        self.params = list(params)
        self.lr = float(lr)

    def zero_grad(self):
        zero_grads(self.params)

    def step(self):
        for p in self.params:
            if not p.trainable:
                continue
            if p.grad is None:
                if _DEBUG:
                    raise StaleGradientError(
                        f"step before backward: no gradient for {p.name or 'parameter'}"
                    )
                continue
            p.data = p.data - self.lr * p.grad


class Adam:
    """Adam with bias correction; defaults (0.9, 0.999, 1e-8)."""

    def __init__(self, params, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        zero_grads(self.params)

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if not p.trainable:
                continue
            g = p.grad
            if g is None:
                if _DEBUG:
                    raise StaleGradientError(
                        f"step before backward: no gradient for {p.name or 'parameter'}"
                    )
                continue
            m[...] = self.beta1 * m + (1.0 - self.beta1) * g
            v[...] = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckResult:
    passed: bool
    worst_rel_err: float
    worst_param: str
    tolerance: float

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        return (
            f"{status}: worst rel err {self.worst_rel_err:.3e} "
            f"(tol {self.tolerance:.0e}, at {self.worst_param or '-'})"
        )


def finite_diff_check(
    f,
    params,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    fault_scale: float | None = None,
) -> GradCheckResult:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must be a deterministic closure over ``params`` returning a scalar
    Tensor. Parameters must be float64: single precision makes the difference
    quotient meaningless at usable step sizes. Relative error per element is
    |a - n| / max(|a|, |n|, 1e-8).

    ``fault_scale`` is a testing hook that multiplies the analytic gradients
    before comparison (negative control for the checker itself).
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ConfigError("finite_diff_check requires float64 parameters")
    if not (1e-6 <= step <= 1e-4):
        raise ConfigError(f"finite-difference step {step} outside [1e-6, 1e-4]")

    zero_grads(params)
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    analytic = [
        np.zeros_like(p.data) if p.grad is None else np.array(p.grad) for p in params
    ]
    if fault_scale is not None:
        analytic = [a * fault_scale for a in analytic]
    zero_grads(params)

    worst = 0.0
    worst_name = ""
    for i, (p, a) in enumerate(zip(params, analytic)):
        base = p.data.copy()
        it = np.nditer(base, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            p.data[idx] = base[idx] + step
            plus = f().item()
            p.data[idx] = base[idx] - step
            minus = f().item()
            p.data[idx] = base[idx]
            num = (plus - minus) / (2.0 * step)
            ana = float(a[idx])
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            if rel > worst:
                worst = rel
                worst_name = f"{p.name or f'param{i}'}{list(idx)}"
            it.iternext()
        p.data = base
    return GradCheckResult(worst <= tolerance, worst, worst_name, tolerance)
