"""Reverse-mode automatic differentiation over small dense float64 tensors.

Execution is eager: every op computes its value immediately and, when a
tape is active and some input is trainable, appends a backward closure to
that tape.  A tape lives for exactly one forward/backward pass; trainable
parameters (see :class:`ParameterStore`) outlive tapes and accumulate
gradients across passes.  Creation order on the tape is a valid topological
order, so the backward pass is a single reverse sweep.

No broadcasting: elementwise ops require identical shapes.  Supported ranks
are 0 (scalars), 1 (vectors) and 2 (matrices, used only for parameters).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import DegenerateInputError, DimensionError

COSINE_NORM_FLOOR = 1e-12

_STATE = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_STATE, "tape", None)


class Tensor:
    """Dense float64 value with an optional gradient buffer.

    Values are immutable by convention once created; only ``grad`` is
    written during a backward pass (and by optimizers, for parameters).
    """

    __slots__ = ("values", "requires_grad", "grad", "op")

    def __init__(self, values, requires_grad: bool = False, op: str = "leaf"):
        arr = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op

    @classmethod
    def _wrap(cls, values: np.ndarray, requires_grad: bool, op: str) -> "Tensor":
        # Internal fast path for op outputs; skips the finiteness scan.
        t = cls.__new__(cls)
        t.values = values
        t.requires_grad = requires_grad
        t.grad = None
        t.op = op
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        self.grad += g

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(op={self.op!r}, shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class GraphNode:
    """One recorded operation: kind, inputs, output, backward closure."""

    kind: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    backward: Callable[[np.ndarray], None]


class Tape:
    """Computation graph for a single forward pass.

    Nodes are appended in creation order, which is a valid topological
    order because execution is eager.  ``backward`` replays them exactly
    once in reverse.  Use as a context manager; nesting is not allowed.
    """

    def __init__(self) -> None:
        self.nodes: list[GraphNode] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("another tape is already active in this thread")
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _STATE.tape = None

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(node) to every recorded input, once."""
        if loss.shape != ():
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.accumulate_grad(np.ones(()))
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue  # not on any path to the loss
            node.backward(g)


def record_op(
    kind: str,
    inputs: Sequence[Tensor],
    out_values: np.ndarray,
    backward: Callable[[np.ndarray], None],
) -> Tensor:
    """Wrap ``out_values`` as a Tensor, recording the node if grads are live.

    Extension point for ops defined outside this module (e.g. embedding
    row lookup).  ``backward`` receives the output gradient and must call
    ``accumulate_grad`` on whichever inputs require it.
    """
    tape = _active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor._wrap(out_values, False, kind)
    out = Tensor._wrap(out_values, True, kind)
    tape.nodes.append(GraphNode(kind, tuple(inputs), out, backward))
    return out


# ---------------------------------------------------------------------------
# primitives


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} differ")


def affine(w: Tensor, x: Tensor, b: Tensor | None = None) -> Tensor:
    """w @ x + b for a rank-2 w and rank-1 x (b optional)."""
    if w.values.ndim != 2 or x.values.ndim != 1:
        raise DimensionError(f"affine: need matrix and vector, got {w.shape} and {x.shape}")
    if w.shape[1] != x.shape[0]:
        raise DimensionError(f"affine: {w.shape} does not accept input of shape {x.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"affine: bias shape {b.shape} does not match output ({w.shape[0]},)")
    out = w.values @ x.values
    if b is not None:
        out = out + b.values

    def backward(g: np.ndarray) -> None:
        if w.requires_grad:
            w.accumulate_grad(np.outer(g, x.values))
        if x.requires_grad:
            x.accumulate_grad(w.values.T @ g)
        if b is not None and b.requires_grad:
            b.accumulate_grad(g)

    ins = (w, x) if b is None else (w, x, b)
    return record_op("affine", ins, out, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return record_op("add", (a, b), a.values + b.values, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    return record_op("sub", (a, b), a.values - b.values, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard (elementwise) product."""
    _same_shape("mul", a, b)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * b.values)
        if b.requires_grad:
            b.accumulate_grad(g * a.values)

    return record_op("mul", (a, b), a.values * b.values, backward)


def neg(a: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(-g)

    return record_op("neg", (a,), -a.values, backward)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a plain float constant."""
    c = float(c)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g * c)

    return record_op("scale", (a,), a.values * c, backward)


def addc(a: Tensor, c: float) -> Tensor:
    """Add a plain float constant."""

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(g)

    return record_op("addc", (a,), a.values + float(c), backward)


def sigmoid(x: Tensor) -> Tensor:
    v = x.values
    ez = np.exp(-np.abs(v))  # never overflows
    s = np.where(v >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * s * (1.0 - s))

    return record_op("sigmoid", (x,), s, backward)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.values)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * (1.0 - t * t))

    return record_op("tanh", (x,), t, backward)


def relu(x: Tensor) -> Tensor:
    v = x.values

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(g * (v > 0.0))

    return record_op("relu", (x,), np.maximum(v, 0.0), backward)


def smul(s: Tensor, x: Tensor) -> Tensor:
    """Scalar tensor times tensor."""
    if s.shape != ():
        raise DimensionError(f"smul: first operand must be scalar, got {s.shape}")
    sv = s.values

    def backward(g: np.ndarray) -> None:
        if s.requires_grad:
            s.accumulate_grad(np.asarray((g * x.values).sum()))
        if x.requires_grad:
            x.accumulate_grad(g * sv)

    return record_op("smul", (s, x), sv * x.values, backward)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate rank-1 tensors, preserving order."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat needs at least one part")
    for p in parts:
        if p.values.ndim != 1:
            raise DimensionError(f"concat: all parts must be rank-1, got shape {p.shape}")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate_grad(g[lo:hi])

    return record_op("concat", parts, np.concatenate([p.values for p in parts]), backward)


def split(x: Tensor, sizes: Sequence[int]) -> tuple[Tensor, ...]:
    """Split a rank-1 tensor into consecutive pieces of the given sizes."""
    if x.values.ndim != 1:
        raise DimensionError(f"split: need rank-1 input, got {x.shape}")
    if sum(sizes) != x.shape[0]:
        raise DimensionError(f"split: sizes {list(sizes)} do not cover length {x.shape[0]}")
    outs = []
    lo = 0
    for size in sizes:
        hi = lo + size
        outs.append(_slice1d(x, lo, hi))
        lo = hi
    return tuple(outs)


def _slice1d(x: Tensor, lo: int, hi: int) -> Tensor:
    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.values)
            x.grad[lo:hi] += g

    return record_op("slice", (x,), x.values[lo:hi].copy(), backward)


def stack(scalars: Sequence[Tensor]) -> Tensor:
    """Pack scalar tensors into one rank-1 tensor."""
    scalars = list(scalars)
    if not scalars:
        raise ValueError("stack needs at least one scalar")
    for s in scalars:
        if s.shape != ():
            raise DimensionError(f"stack: all parts must be scalars, got {s.shape}")

    def backward(g: np.ndarray) -> None:
        for j, s in enumerate(scalars):
            if s.requires_grad:
                s.accumulate_grad(np.asarray(g[j]))

    return record_op("stack", scalars, np.array([s.values for s in scalars]), backward)


def index(x: Tensor, i: int) -> Tensor:
    """Extract element ``i`` of a rank-1 tensor as a scalar."""
    if x.values.ndim != 1:
        raise DimensionError(f"index: need rank-1 input, got {x.shape}")
    if not 0 <= i < x.shape[0]:
        raise IndexError(f"index {i} out of range for length {x.shape[0]}")

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.values)
            x.grad[i] += g

    return record_op("index", (x,), np.asarray(x.values[i]), backward)


def vsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar."""

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.values, float(g)))

    return record_op("sum", (x,), np.asarray(x.values.sum()), backward)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 1 or b.values.ndim != 1:
        raise DimensionError(f"dot: need rank-1 inputs, got {a.shape} and {b.shape}")
    _same_shape("dot", a, b)

    def backward(g: np.ndarray) -> None:
        gf = float(g)
        if a.requires_grad:
            a.accumulate_grad(gf * b.values)
        if b.requires_grad:
            b.accumulate_grad(gf * a.values)

    return record_op("dot", (a, b), np.asarray(a.values @ b.values), backward)


def cosine(p: Tensor, q: Tensor) -> Tensor:
    """Cosine similarity p.q / (|p| |q|), in [-1, 1].

    Raises :class:`DegenerateInputError` when either norm falls below
    ``COSINE_NORM_FLOOR``; a silent 0 would corrupt rankings downstream.
    """
    if p.values.ndim != 1 or q.values.ndim != 1:
        raise DimensionError(f"cosine: need rank-1 inputs, got {p.shape} and {q.shape}")
    _same_shape("cosine", p, q)
    pv, qv = p.values, q.values
    pp = float(pv @ pv)
    qq = float(qv @ qv)
    norm_p, norm_q = np.sqrt(pp), np.sqrt(qq)
    if norm_p < COSINE_NORM_FLOOR or norm_q < COSINE_NORM_FLOOR:
        raise DegenerateInputError(
            f"cosine: input norm below {COSINE_NORM_FLOOR:g} "
            f"(|p|={norm_p:.3e}, |q|={norm_q:.3e})"
        )
    denom = norm_p * norm_q
    c = float(pv @ qv) / denom

    def backward(g: np.ndarray) -> None:
        gf = float(g)
        if p.requires_grad:
            p.accumulate_grad(gf * (qv / denom - c * pv / pp))
        if q.requires_grad:
            q.accumulate_grad(gf * (pv / denom - c * qv / qq))

    return record_op("cosine", (p, q), np.asarray(c), backward)


def softmax_with_gumbel(
    logits: Tensor,
    temperature: float,
    noise: Tensor | None = None,
    hard: bool = False,
) -> Tensor:
    """Softmax over (logits + noise) / temperature, optionally hardened.

    Soft mode returns the relaxed distribution.  Hard mode returns an
    exact one-hot argmax in the forward value while the backward pass
    uses the soft softmax Jacobian (straight-through estimator).
    """
    if logits.values.ndim != 1:
        raise DimensionError(f"softmax_with_gumbel: need rank-1 logits, got {logits.shape}")
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = logits.values
    if noise is not None:
        _same_shape("softmax_with_gumbel", logits, noise)
        z = z + noise.values
    z = z / temperature
    z = z - z.max()
    e = np.exp(z)
    soft = e / e.sum()
    if hard:
        out = np.zeros_like(soft)
        out[int(np.argmax(soft))] = 1.0
    else:
        out = soft

    def backward(g: np.ndarray) -> None:
        gl = soft * (g - float(g @ soft)) / temperature
        if logits.requires_grad:
            logits.accumulate_grad(gl)
        if noise is not None and noise.requires_grad:
            noise.accumulate_grad(gl)

    ins = (logits,) if noise is None else (logits, noise)
    return record_op("gumbel_softmax", ins, out, backward)


def gumbel_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    """Sample standard Gumbel noise -log(-log(u)), u ~ uniform(0, 1)."""
    u = np.clip(rng.random(size), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


# ---------------------------------------------------------------------------
# parameters


class ParameterStore:
    """Registry of named trainable tensors that outlive any single tape."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, values) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(values, requires_grad=True, op="param")
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self._params.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Copy values into the existing tensors, preserving identity.

        In-place loading keeps parameter sharing (e.g. a layer used by
        two encoders) intact across checkpoint round-trips.
        """
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ValueError(
                f"parameter set mismatch: missing={sorted(missing)} extra={sorted(extra)}"
            )
        for name, t in self._params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.values.shape:
                raise DimensionError(
                    f"parameter {name!r}: stored shape {arr.shape} != model shape {t.values.shape}"
                )
            np.copyto(t.values, arr)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradientCheckReport:
    """Max relative error of reverse-mode vs central finite differences.

    Relative error uses ``|ad - fd| / max(|ad|, |fd|, abs_floor/rel_tol)``
    so that near-zero gradients are compared on an absolute floor.
    Frozen (requires_grad=False) inputs are excluded.
    """

    per_input: dict[str, float] = field(default_factory=dict)
    fd_eps: float = 1e-5
    rel_tol: float = 1e-4
    abs_floor: float = 1e-8

    @property
    def max_error(self) -> float:
        return max(self.per_input.values(), default=0.0)

    @property
    def ok(self) -> bool:
        return self.max_error <= self.rel_tol


def check_gradients(
    fn: Callable[..., Tensor],
    inputs: Mapping[str, Tensor],
    eps: float = 1e-5,
    rel_tol: float = 1e-4,
    abs_floor: float = 1e-8,
) -> GradientCheckReport:
    """Compare reverse-mode gradients of ``fn`` against finite differences.

    ``fn`` is called as ``fn(*inputs.values())`` and must return a scalar
    Tensor, deterministically (freeze any noise as an explicit input).
    Values of the inputs are perturbed in place and restored.
    """
    tensors = list(inputs.values())
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        out = fn(*tensors)
        if not isinstance(out, Tensor) or out.shape != ():
            raise ValueError("check_gradients requires fn to return a scalar Tensor")
        tape.backward(out)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.values))
        for name, t in inputs.items()
        if t.requires_grad
    }
    for t in tensors:
        t.grad = None

    denom_floor = abs_floor / rel_tol
    per_input: dict[str, float] = {}
    for name, t in inputs.items():
        if not t.requires_grad:
            continue
        flat = t.values.reshape(-1)
        ad_flat = analytic[name].reshape(-1)
        worst = 0.0
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = float(fn(*tensors).values)
            flat[j] = orig - eps
            f_minus = float(fn(*tensors).values)
            flat[j] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            ad = float(ad_flat[j])
            err = abs(ad - fd) / max(abs(ad), abs(fd), denom_floor)
            if err > worst:
                worst = err
        per_input[name] = worst
    return GradientCheckReport(per_input=per_input, fd_eps=eps, rel_tol=rel_tol, abs_floor=abs_floor)
