"""Minimal reverse-mode differentiation over dense real matrices.

Every value is a 2-D float64 array wrapped in a :class:`Tensor` and
recorded on a :class:`Tape` in creation order (eager evaluation).  A
backward pass walks the tape once in reverse and applies each
primitive's exact vector-Jacobian rule, so gradients are deterministic:
the same leaves always produce bitwise-identical forward values and
gradients.

Complex quantities never appear as complex dtypes here.  They are
carried as (real, imaginary) pairs of real tensors (:class:`ComplexPair`)
and complex arithmetic is built as composite graphs over the real
primitives, which keeps every backward rule real-valued.  The principal
argument of a complex number is deliberately *not* differentiable
through this engine: it is only ever used on constant feature inputs,
never on the gradient path.
"""

from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigurationError, UsageError


def _as_matrix(value) -> np.ndarray:
    """Coerce scalars/vectors/matrices to a 2-D float64 array.

    Scalars become 1x1, 1-D vectors become column vectors.
    """
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ConfigurationError(f"tensors are 2-D matrices, got shape {arr.shape}")
    return arr


class Tensor:
    """A matrix value recorded on a tape.

    ``tracked`` marks values that gradients should flow into (trainable
    leaves and anything computed from them).  Arrays handed to the
    engine are treated as immutable; primitives never write into their
    operands.
    """

    __slots__ = ("tape", "data", "tracked", "op", "parents", "vjp", "idx")

    def __init__(self, tape, data, tracked, op, parents, vjp):
        self.tape = tape
        self.data = data
        self.tracked = tracked
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.idx = len(tape._records)
        tape._records.append(self)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise UsageError(f"item() needs a 1x1 tensor, got shape {self.data.shape}")
        return float(self.data[0, 0])

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, tracked={self.tracked})"


class Tape:
    """Ordered record of tensors; inputs always precede their consumers."""

    __slots__ = ("_records",)

    def __init__(self):
        self._records: list[Tensor] = []

    def tensor(self, value, tracked=False) -> Tensor:
        """Record a leaf value.  ``tracked=True`` makes it differentiable."""
        return Tensor(self, _as_matrix(value), tracked, "leaf", (), None)

    def constant(self, value) -> Tensor:
        """Record an untracked leaf (no gradient ever flows into it)."""
        return self.tensor(value, tracked=False)

    def scalar(self, value: float) -> Tensor:
        return self.constant(np.array([[float(value)]]))

    def __len__(self):
        return len(self._records)

    def relu_preactivations(self) -> list[np.ndarray]:
        """Forward values feeding each rectifier on this tape."""
        return [t.parents[0].data for t in self._records if t.op == "relu"]


def _record(name, inputs, out_data, vjp) -> Tensor:
    tape = inputs[0].tape
    for t in inputs[1:]:
        if t.tape is not tape:
            raise ConfigurationError(f"{name}: operands recorded on different tapes")
    tracked = any(t.tracked for t in inputs)
    return Tensor(tape, out_data, tracked, name, tuple(inputs), vjp if tracked else None)


def _check_same_shape(name, a, b):
    if a.data.shape != b.data.shape:
        raise ConfigurationError(f"{name}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# primitive set
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def vjp(g):
        return g, g

    return _record("add", (a, b), a.data + b.data, vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def vjp(g):
        return g, -g

    return _record("sub", (a, b), a.data - b.data, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    _check_same_shape("mul", a, b)

    def vjp(g):
        ga = g * b.data if a.tracked else None
        gb = g * a.data if b.tracked else None
        return ga, gb

    return _record("mul", (a, b), a.data * b.data, vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[1] != b.data.shape[0]:
        raise ConfigurationError(
            f"matmul: inner dimensions differ, {a.data.shape} @ {b.data.shape}"
        )

    def vjp(g):
        ga = g @ b.data.T if a.tracked else None
        gb = a.data.T @ g if b.tracked else None
        return ga, gb

    return _record("matmul", (a, b), a.data @ b.data, vjp)


def transpose(a: Tensor) -> Tensor:
    def vjp(g):
        return (g.T,)

    return _record("transpose", (a,), a.data.T, vjp)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ConfigurationError("concat_rows: no operands")
    cols = parts[0].data.shape[1]
    for p in parts[1:]:
        if p.data.shape[1] != cols:
            raise ConfigurationError(
                f"concat_rows: column counts differ, {parts[0].data.shape} vs {p.data.shape}"
            )
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def vjp(g):
        return tuple(
            g[offsets[i]:offsets[i + 1]] if p.tracked else None
            for i, p in enumerate(parts)
        )

    out = np.concatenate([p.data for p in parts], axis=0)
    return _record("concat_rows", tuple(parts), out, vjp)


def relu(a: Tensor) -> Tensor:
    """Rectifier; the subgradient at exactly zero is taken as zero."""

    def vjp(g):
        return (g * (a.data > 0.0),)

    return _record("relu", (a,), np.maximum(a.data, 0.0), vjp)


def sin(a: Tensor) -> Tensor:
    def vjp(g):
        return (g * np.cos(a.data),)

    return _record("sin", (a,), np.sin(a.data), vjp)


def cos(a: Tensor) -> Tensor:
    def vjp(g):
        return (-g * np.sin(a.data),)

    return _record("cos", (a,), np.cos(a.data), vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _record("exp", (a,), out, vjp)


def log(a: Tensor) -> Tensor:
    """Natural logarithm; the operand must be positive."""

    def vjp(g):
        return (g / a.data,)

    return _record("log", (a,), np.log(a.data), vjp)


def square(a: Tensor) -> Tensor:
    def vjp(g):
        return (g * (2.0 * a.data),)

    return _record("square", (a,), np.square(a.data), vjp)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data

    def vjp(g):
        return (-g * out * out,)

    return _record("reciprocal", (a,), out, vjp)


def add_colvec(a: Tensor, b: Tensor) -> Tensor:
    """Add a column vector to every column of a matrix (bias broadcast)."""
    if b.data.shape != (a.data.shape[0], 1):
        raise ConfigurationError(
            f"add_colvec: expected column vector ({a.data.shape[0]}, 1), got {b.data.shape}"
        )

    def vjp(g):
        gb = g.sum(axis=1, keepdims=True) if b.tracked else None
        return (g if a.tracked else None), gb

    return _record("add_colvec", (a, b), a.data + b.data, vjp)


def mean_cols(a: Tensor) -> Tensor:
    """Per-row mean over all columns; (r, c) -> (r, 1)."""
    c = a.data.shape[1]

    def vjp(g):
        return (np.repeat(g * (1.0 / c), c, axis=1),)

    return _record("mean_cols", (a,), a.data.mean(axis=1, keepdims=True), vjp)


def mean_col_blocks(a: Tensor, block: int) -> Tensor:
    """Per-row mean over consecutive column blocks of width ``block``;
    (r, k*block) -> (r, k)."""
    r, c = a.data.shape
    if block < 1 or c % block:
        raise ConfigurationError(
            f"mean_col_blocks: width {c} is not a multiple of block {block}"
        )
    k = c // block

    def vjp(g):
        return (np.repeat(g * (1.0 / block), block, axis=1),)

    out = a.data.reshape(r, k, block).mean(axis=2)
    return _record("mean_col_blocks", (a,), out, vjp)


def repeat_cols(a: Tensor, times: int) -> Tensor:
    """Repeat every column ``times`` times consecutively; (r, k) -> (r, k*times)."""
    if times < 1:
        raise ConfigurationError(f"repeat_cols: times must be >= 1, got {times}")
    r = a.data.shape[0]

    def vjp(g):
        return (g.reshape(r, -1, times).sum(axis=2),)

    return _record("repeat_cols", (a,), np.repeat(a.data, times, axis=1), vjp)


def sum_all(a: Tensor) -> Tensor:
    """Sum of all entries; (r, c) -> (1, 1)."""
    shape = a.data.shape

    def vjp(g):
        return (np.full(shape, g[0, 0]),)

    return _record("sum_all", (a,), a.data.sum().reshape(1, 1), vjp)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    r = a.data.shape[0]
    if not (0 <= start < stop <= r):
        raise ConfigurationError(
            f"slice_rows: range [{start}, {stop}) invalid for {a.data.shape}"
        )

    def vjp(g):
        z = np.zeros(a.data.shape)
        z[start:stop] = g
        return (z,)

    return _record("slice_rows", (a,), a.data[start:stop], vjp)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(tape: Tape, output: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradient of a scalar output with respect to every tracked leaf.

    Visits tape records exactly once in reverse creation order, so
    accumulation order is fixed.  Untracked leaves are absent from the
    returned map; tracked leaves that do not influence the output get a
    zero gradient.
    """
    if output.tape is not tape:
        raise UsageError("output was not recorded on this tape")
    if output.data.shape != (1, 1):
        raise UsageError(f"backward needs a scalar output, got shape {output.data.shape}")

    cotangents: dict[int, np.ndarray] = {output.idx: np.ones((1, 1))}
    grads: dict[Tensor, np.ndarray] = {}
    for node in reversed(tape._records[: output.idx + 1]):
        g = cotangents.pop(node.idx, None)
        if node.op == "leaf":
            if node.tracked:
                grads[node] = np.zeros(node.data.shape) if g is None else np.ascontiguousarray(g)
            continue
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.tracked:
                continue
            acc = cotangents.get(parent.idx)
            # never accumulate in place: cotangent arrays may be shared
            cotangents[parent.idx] = pg if acc is None else acc + pg
    # tracked leaves recorded after the output cannot influence it
    for node in tape._records[output.idx + 1:]:
        if node.op == "leaf" and node.tracked:
            grads[node] = np.zeros(node.data.shape)
    return grads


# ---------------------------------------------------------------------------
# complex values as (re, im) pairs
# ---------------------------------------------------------------------------

class ComplexPair(NamedTuple):
    """A complex matrix carried as two real tensors."""

    re: Tensor
    im: Tensor


def cpx_constant(tape: Tape, value: np.ndarray) -> ComplexPair:
    arr = np.asarray(value, dtype=np.complex128)
    return ComplexPair(tape.constant(arr.real.copy()), tape.constant(arr.imag.copy()))


def cpx_add(a: ComplexPair, b: ComplexPair) -> ComplexPair:
    return ComplexPair(add(a.re, b.re), add(a.im, b.im))


def cpx_mul(a: ComplexPair, b: ComplexPair) -> ComplexPair:
    """Elementwise complex product."""
    re = sub(mul(a.re, b.re), mul(a.im, b.im))
    im = add(mul(a.re, b.im), mul(a.im, b.re))
    return ComplexPair(re, im)


def cpx_matmul(a: ComplexPair, b: ComplexPair) -> ComplexPair:
    re = sub(matmul(a.re, b.re), matmul(a.im, b.im))
    im = add(matmul(a.re, b.im), matmul(a.im, b.re))
    return ComplexPair(re, im)


def cpx_conj(a: ComplexPair) -> ComplexPair:
    zero = a.re.tape.constant(np.zeros(a.im.data.shape))
    return ComplexPair(a.re, sub(zero, a.im))


def cpx_modulus_sq(a: ComplexPair) -> Tensor:
    """Elementwise squared modulus (a real tensor)."""
    return add(square(a.re), square(a.im))


def unit_phasor(f: Tensor) -> ComplexPair:
    """e^{j f} elementwise: (cos f, sin f)."""
    return ComplexPair(cos(f), sin(f))


def cpx_value(a: ComplexPair) -> np.ndarray:
    return a.re.data + 1j * a.im.data


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_check(
    fn: Callable[..., Tensor],
    leaves: Sequence[np.ndarray],
    step: float,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``fn(tape, *tensors)`` must build a deterministic scalar on the
    given tape.  Returns the maximum over all leaf entries of
    ``|analytic - central| / max(|analytic|, |central|, 1e-12)``.

    Entries whose perturbed evaluations pass near a rectifier kink are
    skipped: if any ReLU pre-activation has magnitude below 10*step at
    either perturbed point, or changes sign between the two points, the
    central difference is invalid there and the entry is excluded.
    """
    if step <= 0.0:
        raise UsageError(f"step must be positive, got {step}")
    leaves = [_as_matrix(v) for v in leaves]

    tape = Tape()
    tensors = [tape.tensor(v, tracked=True) for v in leaves]
    out = fn(tape, *tensors)
    if out.data.shape != (1, 1):
        raise UsageError(f"finite_diff_check needs a scalar function, got {out.data.shape}")
    grads = backward(tape, out)

    def evaluate(values):
        t = Tape()
        ts = [t.tensor(v, tracked=False) for v in values]
        result = fn(t, *ts)
        return result.item(), t.relu_preactivations()

    worst = 0.0
    for li, leaf in enumerate(leaves):
        analytic = grads.get(tensors[li])
        for index in np.ndindex(leaf.shape):
            plus = [v.copy() if i == li else v for i, v in enumerate(leaves)]
            plus[li][index] += step
            minus = [v.copy() if i == li else v for i, v in enumerate(leaves)]
            minus[li][index] -= step
            fp, pre_p = evaluate(plus)
            fm, pre_m = evaluate(minus)
            if _near_relu_kink(pre_p, pre_m, step):
                continue
            central = (fp - fm) / (2.0 * step)
            a = 0.0 if analytic is None else float(analytic[index])
            denom = max(abs(a), abs(central), 1e-12)
            worst = max(worst, abs(a - central) / denom)
    return worst


def _near_relu_kink(pre_plus, pre_minus, step) -> bool:
    for p, m in zip(pre_plus, pre_minus):
        if np.any(np.abs(p) < 10.0 * step) or np.any(np.abs(m) < 10.0 * step):
            return True
        if np.any((p > 0.0) != (m > 0.0)):
            return True
    return False
