"""Minimal dense reverse-mode automatic differentiation.

Design constraints that shaped this module:

* float64 everywhere; values live in numpy arrays, gradients are computed
  by replaying an explicit tape in reverse. Single-threaded, one tape per
  training step, deterministic replay order (insertion order, reversed).
* stop-gradient is first-class (``detach``); policy-ratio and adaptive
  weighting formulas depend on it being exact, not approximate.
* only the broadcasting the models actually need: matrix product, bias add,
  elementwise arithmetic on equal shapes, scalar arithmetic, axis sums,
  row gathers for condition embeddings.

The tape records closures over local values. ``backward`` seeds the scalar
loss with 1.0 and accumulates parent gradients in a dict keyed by tensor
identity.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, DimensionError

_TAPE_STACK: list["Tape | None"] = []


def _active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A dense float64 array plus gradient-tracking metadata.

    Tensors are immutable once recorded on a tape; optimizer updates write
    fresh arrays into parameter tensors between steps instead of mutating
    recorded values.
    """

    __slots__ = ("values", "requires_grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(values, dtype=np.float64)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractViolation(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        """Stop-gradient: same values, no history, no gradient flow."""
        return Tensor(self.values.copy(), requires_grad=False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, grad={self.requires_grad}{tag})"

    # Arithmetic sugar; every overload routes through the module-level ops
    # so that recording stays in one place.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractViolation("tensor/tensor division is not part of the op set")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of primitive operations for one differentiation pass.

    Used as a context manager; ops executed while the tape is active and
    involving gradient-tracked inputs append one record each. ``paused()``
    yields a scope in which nothing is recorded (old-policy and reference
    evaluations use it).
    """

    __slots__ = ("records",)

    def __init__(self):
        # each record: (op name, output tensor, parent tensors, backward fn)
        self.records: list[tuple[str, Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise ContractViolation("tape stack corrupted: mismatched enter/exit")

    def paused(self) -> "_PausedScope":
        return _PausedScope()

    def __len__(self) -> int:
        return len(self.records)


class _PausedScope:
    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()


def no_grad() -> _PausedScope:
    """Scope in which no operations are recorded regardless of inputs."""
    return _PausedScope()


class DetachedPin:
    """Recorder for stop-gradient values used as live coefficients.

    Several losses feed detached quantities (stopped ratios, adaptive
    normalizers) back into the live graph. Their analytic gradient treats
    those as constants at the evaluation point, so a finite-difference
    sweep must hold them fixed too: first run the loss once under
    ``record_detached`` to capture every such value in evaluation order,
    then evaluate perturbed losses under ``replay_detached`` so each site
    reuses its captured value instead of recomputing it.
    """

    __slots__ = ("mode", "values", "cursor")

    def __init__(self):
        self.mode: str | None = None
        self.values: list[np.ndarray] = []
        self.cursor = 0


_ACTIVE_PIN: DetachedPin | None = None


def pinned_value(arr: np.ndarray) -> np.ndarray:
    """Pass a detached value through the active pin, if any.

    Every stop-gradient value that multiplies into a live graph must be
    routed through here so gradient checking can freeze it.
    """
    pin = _ACTIVE_PIN
    if pin is None:
        return arr
    if pin.mode == "record":
        pin.values.append(np.array(arr, dtype=np.float64, copy=True))
        return arr
    if pin.cursor >= len(pin.values):
        raise ContractViolation(
            "detached-value replay ran past the recorded sequence; "
            "the loss structure is not deterministic")
    out = pin.values[pin.cursor]
    pin.cursor += 1
    return out


class _PinScope:
    def __init__(self, pin: DetachedPin, mode: str):
        self.pin = pin
        self.mode = mode

    def __enter__(self):
        global _ACTIVE_PIN
        if _ACTIVE_PIN is not None:
            raise ContractViolation("detached-value pins do not nest")
        self.pin.mode = self.mode
        self.pin.cursor = 0
        if self.mode == "record":
            self.pin.values = []
        _ACTIVE_PIN = self.pin
        return self.pin

    def __exit__(self, *exc):
        global _ACTIVE_PIN
        _ACTIVE_PIN = None
        self.pin.mode = None
        return False


def record_detached(pin: DetachedPin) -> _PinScope:
    return _PinScope(pin, "record")


def replay_detached(pin: DetachedPin) -> _PinScope:
    return _PinScope(pin, "replay")


def as_tensor(x) -> Tensor:
    """Wrap raw values as a constant tensor; passes tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def parameter(values, name: str) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64, copy=True), requires_grad=True, name=name)


def _record(op: str, out: Tensor, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.records.append((op, out, parents, backward_fn))
    return out


# ---------------------------------------------------------------------------
# primitive ops


def add(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        out = Tensor(a.values + float(b))
        return _record("add_scalar", out, (a,), lambda g: (g,))
    b = as_tensor(b)
    if a.shape == b.shape:
        out = Tensor(a.values + b.values)
        return _record("add", out, (a, b), lambda g: (g, g))
    # bias broadcast: [B, n] + [n]
    if a.values.ndim == 2 and b.values.ndim == 1 and a.shape[1] == b.shape[0]:
        out = Tensor(a.values + b.values)
        return _record("add_bias", out, (a, b), lambda g: (g, g.sum(axis=0)))
    raise DimensionError("add", a.shape, b.shape)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return add(a, -float(b))
    return add(a, neg(as_tensor(b)))


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.values)
    return _record("neg", out, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = float(b)
        out = Tensor(a.values * c)
        return _record("mul_scalar", out, (a,), lambda g: (g * c,))
    b = as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError("mul", a.shape, b.shape)
    av, bv = a.values, b.values
    out = Tensor(av * bv)
    return _record("mul", out, (a, b), lambda g: (g * bv, g * av))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)
    av, bv = a.values, b.values
    out = Tensor(av @ bv)

    def backward_fn(g):
        return g @ bv.T, av.T @ g

    return _record("matmul", out, (a, b), backward_fn)


def tanh(a: Tensor) -> Tensor:
    tv = np.tanh(a.values)
    out = Tensor(tv)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - tv * tv),))


def exp(a: Tensor) -> Tensor:
    ev = np.exp(a.values)
    out = Tensor(ev)
    return _record("exp", out, (a,), lambda g: (g * ev,))


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0.0):
        raise ContractViolation("log: arguments must be strictly positive")
    av = a.values
    out = Tensor(np.log(av))
    return _record("log", out, (a,), lambda g: (g / av,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only where unclipped."""
    lo, hi = float(lo), float(hi)
    mask = (a.values >= lo) & (a.values <= hi)
    out = Tensor(np.clip(a.values, lo, hi))
    return _record("clip", out, (a,), lambda g: (g * mask,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise minimum; on ties the gradient goes to the first input."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError("minimum", a.shape, b.shape)
    take_a = a.values <= b.values
    out = Tensor(np.where(take_a, a.values, b.values))
    return _record("minimum", out, (a, b), lambda g: (g * take_a, g * ~take_a))


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.values.sum())
    shape = a.shape
    return _record("sum_all", out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.values.size
    out = Tensor(a.values.mean())
    shape = a.shape
    return _record("mean_all", out, (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def sum_axis(a: Tensor, axis: int) -> Tensor:
    out = Tensor(a.values.sum(axis=axis))
    ax = axis

    def backward_fn(g):
        return (np.broadcast_to(np.expand_dims(g, ax), a.shape).copy(),)

    return _record("sum_axis", out, (a,), backward_fn)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    new_shape = tuple(int(s) for s in shape)
    out = Tensor(a.values.reshape(new_shape))
    old_shape = a.shape
    return _record("reshape", out, (a,), lambda g: (g.reshape(old_shape),))


def take_rows(table: Tensor, indices) -> Tensor:
    """Gather rows of a [C, e] table; backward scatter-adds into the table."""
    idx = np.asarray(indices, dtype=np.intp)
    if table.values.ndim != 2:
        raise DimensionError("take_rows", ("C", "e"), table.shape)
    out = Tensor(table.values[idx])

    def backward_fn(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record("take_rows", out, (table,), backward_fn)


def hstack(parts: Sequence[Tensor | np.ndarray]) -> Tensor:
    """Concatenate 2-d blocks along the feature axis (axis 1)."""
    tensors = [as_tensor(p) for p in parts]
    rows = {t.shape[0] for t in tensors}
    if any(t.values.ndim != 2 for t in tensors) or len(rows) != 1:
        raise DimensionError("hstack", ("B", "*"), tuple(t.shape for t in tensors))
    widths = [t.shape[1] for t in tensors]
    out = Tensor(np.concatenate([t.values for t in tensors], axis=1))
    offsets = np.cumsum([0] + widths)

    def backward_fn(g):
        return tuple(g[:, offsets[i]: offsets[i + 1]] for i in range(len(tensors)))

    return _record("hstack", out, tuple(tensors), backward_fn)


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Replay ``tape`` in reverse from ``loss``; return tensor -> gradient.

    The loss must be a scalar that was recorded on this tape. Tensors that
    never influenced the loss are absent from the result.
    """
    if loss.values.size != 1:
        raise ContractViolation(f"backward: loss must be scalar, got shape {loss.shape}")
    recorded = any(out is loss for _, out, _, _ in tape.records)
    if not recorded:
        raise ContractViolation("backward: loss was not recorded on this tape")

    grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.values)}
    for op, out, parents, backward_fn in reversed(tape.records):
        g_out = grads.get(out)
        if g_out is None:
            continue
        parent_grads = backward_fn(g_out)
        if len(parent_grads) != len(parents):
            raise ContractViolation(f"{op}: backward returned {len(parent_grads)} grads for {len(parents)} parents")
        for parent, g in zip(parents, parent_grads):
            if g is None:
                continue
            if g.shape != parent.shape:
                raise DimensionError(f"{op}.backward", parent.shape, g.shape)
            acc = grads.get(parent)
            if acc is None:
                # own the array: backward closures may alias g_out or views
                grads[parent] = np.array(g, dtype=np.float64)
            else:
                acc += g
    return grads


# ---------------------------------------------------------------------------
# finite differences (the gradient oracle used by tests and cmd_gradcheck)


def finite_difference(f: Callable[[], float], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``f`` with respect to ``param``.

    ``f`` must re-evaluate the full computation from current parameter
    values. The parameter array is perturbed in place and restored.
    """
    base = param.values
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        up = f()
        flat[i] = keep - step
        down = f()
        flat[i] = keep
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, abs_floor: float = 1e-7) -> float:
    """Worst-case relative disagreement, with an absolute floor for tiny values."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), abs_floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
