"""Dense tensors with reverse-mode automatic differentiation.

Storage is row-major numpy. Gradients are recorded on an explicit Tape:
every operation that touches a grad-requiring input appends its output
node to the active tape, so tape order is topological by construction and
the backward pass is a single reversed sweep that visits each node once.

Shape rules are strict: operations validate shapes at the boundary and
the only implicit broadcast anywhere is a bias vector added over the last
dimension. Two precisions are supported; training runs in float32 and
gradient checking runs end to end in float64, where central differences
are actually meaningful.
"""

from __future__ import annotations

import enum
import math
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, NumericError, UsageError

# Toggle for the per-op finite-value guard. Left on: arrays here are small
# and a NaN that propagates silently costs far more than the scan.
FINITE_CHECKS = True


class Precision(enum.Enum):
    STANDARD = "standard-32-bit"
    CHECK = "check-64-bit"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self is Precision.STANDARD else np.float64)


class Tensor:
    """A dense array plus an optional gradient accumulator."""

    # fallback_rows is set only by combined_attention (training diagnostic).
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op",
                 "fallback_rows")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


def tensor(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def param(data, dtype=None) -> Tensor:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype)
    return Tensor(arr, requires_grad=True)


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of operations for one forward pass.

    Entering the context makes the tape active; ops recorded while active
    are replayed in reverse by backward(). Inputs of every node precede it
    in the list, so the reversed sweep is a valid reverse topological order.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def backward(self, loss: Tensor) -> None:
        if loss.data.shape != ():
            raise UsageError("backward requires a scalar loss tensor")
        if not loss.requires_grad:
            raise UsageError("loss does not depend on any grad-requiring input")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _check_finite(arr: np.ndarray, op: str) -> None:
    # One reduction instead of isfinite().all(): the sum of an array with any
    # NaN/Inf is itself non-finite, and these arrays are far too small for a
    # finite-overflow false positive.
    if FINITE_CHECKS and not math.isfinite(float(arr.sum())):
        raise NumericError(f"{op} produced non-finite values")


def _same_dtype(op: str, *ts: Tensor) -> None:
    dt = ts[0].data.dtype
    for t in ts[1:]:
        if t.data.dtype != dt:
            raise UsageError(f"{op}: mixed dtypes {dt} and {t.data.dtype}")


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    _check_finite(data, op)
    tape = _active_tape()
    out = Tensor(data)
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
        tape.nodes.append(out)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
        if t.grad.shape != t.data.shape:  # scalar seed broadcast
            t.grad = np.broadcast_to(t.grad, t.data.shape).copy()
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 2-D x 2-D, or stacked with identical leading dims."""
    _same_dtype("matmul", a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul leading dims differ: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g @ b.data.swapaxes(-1, -2))
        _accumulate(b, a.data.swapaxes(-1, -2) @ g)

    return _make(out, (a, b), backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; b may be a vector broadcast over the last dim (bias)."""
    _same_dtype("add", a, b)
    bias = b.data.ndim == 1 and a.data.ndim > 1
    if bias:
        if b.shape[0] != a.shape[-1]:
            raise DimensionError(f"bias length {b.shape[0]} != last dim {a.shape[-1]}")
    elif a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g)
        if bias:
            _accumulate(b, g.reshape(-1, g.shape[-1]).sum(axis=0))
        else:
            _accumulate(b, g)

    return _make(out, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    _same_dtype("mul", a, b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} vs {b.shape}")
    out = a.data * b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(out, (a, b), backward, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * s

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * s)

    return _make(out, (a,), backward, "scale")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * (a.data > 0))

    return _make(out, (a,), backward, "relu")


def dropout(a: Tensor, rate: float, rng: np.random.Generator | int | None = None,
            train: bool = True) -> Tensor:
    """Inverted dropout: zero with probability `rate`, scale kept by 1/(1-rate).

    Identity when not training or rate is 0. The mask comes from the caller's
    generator (or an int seed), never from global state.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return a
    if rng is None:
        raise UsageError("dropout in training mode needs an rng or seed")
    if isinstance(rng, int):
        rng = np.random.Generator(np.random.Philox(rng))
    keep = (rng.random(a.shape) >= rate).astype(a.data.dtype)
    factor = 1.0 / (1.0 - rate)
    out = a.data * keep * factor

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * keep * factor)

    return _make(out, (a,), backward, "dropout")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise UsageError(f"ids out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def backward(g: np.ndarray) -> None:
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)

    return _make(out, (table,), backward, "embedding_lookup")


def concat_last_dim(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise UsageError("concat_last_dim of zero tensors")
    _same_dtype("concat_last_dim", *parts)
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise DimensionError("concat_last_dim leading dims differ")
    out = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.shape[-1] for p in parts]

    def backward(g: np.ndarray) -> None:
        offset = 0
        for p, w in zip(parts, widths):
            _accumulate(p, g[..., offset:offset + w])
            offset += w

    return _make(out, tuple(parts), backward, "concat_last_dim")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g.reshape(a.shape))

    return _make(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.transpose(g, inverse))

    return _make(out, (a,), backward, "transpose")


def sum_all(a: Tensor) -> Tensor:
    out = a.data.sum()

    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.full(a.shape, g, dtype=a.data.dtype))

    return _make(np.asarray(out), (a,), backward, "sum_all")


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax over the last dimension, max-subtracted for stability."""
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax_rows received non-finite input")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accumulate(a, out * (g - dot))

    return _make(out, (a,), backward, "softmax_rows")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension to zero mean, unit variance, then affine."""
    _same_dtype("layer_norm", a, gamma, beta)
    d = a.shape[-1]
    if d < 2:
        raise DimensionError("layer_norm needs last dim >= 2")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError("layer_norm gamma/beta must match the last dim")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def backward(g: np.ndarray) -> None:
        dxhat = g * gamma.data
        s1 = dxhat.sum(axis=-1, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
        _accumulate(a, (inv / d) * (d * dxhat - s1 - xhat * s2))
        lead = tuple(range(g.ndim - 1))
        _accumulate(gamma, (g * xhat).sum(axis=lead))
        _accumulate(beta, g.sum(axis=lead))

    return _make(out, (a, gamma, beta), backward, "layer_norm")


def cross_entropy(logits: Tensor, targets, pad_id: int) -> Tensor:
    """Mean negative log-softmax of the target class over non-pad positions."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects [T x V] logits, got {logits.shape}")
    t_len, vocab = logits.shape
    if targets.shape != (t_len,):
        raise DimensionError(f"targets shape {targets.shape} != ({t_len},)")
    if targets.min() < 0 or targets.max() >= vocab:
        raise UsageError(f"targets out of range [0, {vocab})")
    valid = targets != pad_id
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise UsageError("cross_entropy over all-pad targets (empty mean)")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1)) + logits.data.max(axis=-1)
    picked = logits.data[np.arange(t_len), targets]
    loss = ((lse - picked) * valid).sum() / n_valid

    def backward(g: np.ndarray) -> None:
        soft = np.exp(shifted)
        soft /= soft.sum(axis=-1, keepdims=True)
        soft[np.arange(t_len), targets] -= 1.0
        soft *= (valid / n_valid)[:, None] * g
        _accumulate(logits, soft.astype(logits.data.dtype))

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward, "cross_entropy")


def combined_attention(omega_a: Tensor, omega_g: Tensor, eps_denom: float = 1e-12) -> Tensor:
    """Gate-weighted attention rows: w[n] = g[n] exp(a[n]) / sum_l g[l] exp(a[l]).

    The exponential is max-subtracted per row. Rows whose gates are all
    <= eps_denom fall back to a plain softmax of the logits so attention
    stays well-defined when the ReLU gate dies; callers can count such rows
    as a training diagnostic via `fallback_rows`.
    """
    _same_dtype("combined_attention", omega_a, omega_g)
    if omega_a.shape != omega_g.shape:
        raise DimensionError(f"attention shapes differ: {omega_a.shape} vs {omega_g.shape}")
    if np.any(omega_g.data < 0):
        raise UsageError("geometric gates must be nonnegative")
    e = np.exp(omega_a.data - omega_a.data.max(axis=-1, keepdims=True))
    weighted = omega_g.data * e
    denom = weighted.sum(axis=-1, keepdims=True) + eps_denom
    out = weighted / denom

    dead = np.all(omega_g.data <= eps_denom, axis=-1)
    n_dead = int(dead.sum())
    if n_dead:
        soft = e / e.sum(axis=-1, keepdims=True)
        out = np.where(dead[..., None], soft, out)
    e_over_s = e / denom

    def backward(g: np.ndarray) -> None:
        live = ~dead[..., None]
        c = (g * out).sum(axis=-1, keepdims=True)
        if omega_g.requires_grad:
            _accumulate(omega_g, np.where(live, e_over_s * (g - c), 0.0))
        grad_a = out * (g - c)  # same form on live and fallback rows
        _accumulate(omega_a, grad_a)

    result = _make(out, (omega_a, omega_g), backward, "combined_attention")
    result.fallback_rows = n_dead
    return result


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor],
               h: float = 1e-5, tol: float = 1e-4, abs_floor: float = 1e-6) -> dict:
    """Compare tape gradients of scalar f() against central differences.

    Runs twice per parameter coordinate, so keep the model toy-sized. All
    parameters must be float64; at float32 the difference quotient is noise.
    Returns a report with per-parameter max relative error and a pass flag.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise UsageError(f"grad_check requires float64 params ({name} is {p.data.dtype})")

    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        out = f()
    if out.data.shape != ():
        raise UsageError("grad_check target must return a scalar")
    tape.backward(out)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    for p in params.values():
        p.zero_grad()

    per_param: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f().data)
            flat[i] = orig - h
            f_minus = float(f().data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(ana[i]), abs(fd), abs_floor)
            worst = max(worst, abs(ana[i] - fd) / denom)
        per_param[name] = worst

    max_err = max(per_param.values()) if per_param else 0.0
    return {
        "per_param": per_param,
        "max_rel_error": max_err,
        "tol": tol,
        "passed": max_err <= tol,
    }
