"""Complex helpers, seeded random streams and a small reverse-mode tape.

The tape works on numpy arrays rather than scalars so that a whole batch of
graphs is differentiated in one sweep. Only the primitives needed by the
policy forward pass and the rate/loss expressions are provided.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

# Stream identifiers for counter-based random streams.
STREAM_SCSI = 1
STREAM_ICSI = 2
STREAM_INIT = 3
STREAM_SHUFFLE = 4
STREAM_MISC = 5


# ---------------------------------------------------------------------------
# complex <-> real
# ---------------------------------------------------------------------------

def realify(x: np.ndarray) -> np.ndarray:
    """Map complex ``(..., p)`` to real ``(..., 2p)`` as ``[Re(x), Im(x)]``."""
    x = np.asarray(x)
    return np.concatenate([x.real, x.imag], axis=-1).astype(np.float64)


def complexify(y: np.ndarray) -> np.ndarray:
    """Inverse of :func:`realify`."""
    y = np.asarray(y, dtype=np.float64)
    p = y.shape[-1]
    if p % 2:
        raise ValueError(f"last axis must have even length, got {p}")
    return y[..., : p // 2] + 1j * y[..., p // 2:]


def cx_inner(a: np.ndarray, b: np.ndarray) -> complex:
    """Hermitian inner product ``sum(conj(a) * b)``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return complex(np.vdot(a, b))


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SeededRng:
    """Counter-based stream keyed by ``(seed, stream, index)``.

    Two objects with equal fields always yield the same draws, whatever
    order or process they are consumed in.
    """

    seed: int
    stream: int = 0

    def generator(self, index: int = 0) -> np.random.Generator:
        ss = np.random.SeedSequence([int(self.seed) & 0xFFFFFFFFFFFFFFFF, int(self.stream), int(index)])
        return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# reverse-mode tape
# ---------------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class UnsupportedPrimitive(TypeError):
    pass


class Var:
    """A value on a :class:`Tape` (or a free value when ``tape`` is None)."""

    __slots__ = ("value", "tape", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, value, tape: "Tape | None" = None, op: str = "leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"

    # operator sugar --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)


class Tape:
    """Ordered record of primitive operations.

    With ``track_kinks`` set, ``kink_margin`` holds the smallest distance to
    a non-differentiable point seen by ReLU, hinge and max nodes;
    finite-difference checks use it to reject draws that sit on a kink.
    """

    def __init__(self, track_kinks: bool = False):
        self.nodes: list[Var] = []
        self.track_kinks = track_kinks
        self.kink_margin = np.inf

    def var(self, value) -> Var:
        v = Var(value, self, "leaf")
        self.nodes.append(v)
        return v

    def clear(self):
        self.nodes.clear()
        self.kink_margin = np.inf

    def _record(self, out: Var, parents: tuple, backward: Callable) -> Var:
        out.tape = self
        out._parents = parents
        out._backward = backward
        self.nodes.append(out)
        return out

    def _note_kink(self, dist: np.ndarray):
        if self.track_kinks and dist.size:
            self.kink_margin = min(self.kink_margin, float(np.min(dist)))

    def backward(self, output: Var) -> None:
        if output.value.size != 1:
            raise ValueError("backward needs a scalar output")
        for node in self.nodes:
            node.grad = None
        output.grad = np.ones_like(output.value)
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if not isinstance(parent, Var) or parent.tape is not self or g is None:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    def gradient(self, output: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        self.backward(output)
        return [np.zeros_like(w.value) if w.grad is None else w.grad for w in wrt]


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var) and x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            tape = x.tape
    return tape


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _make(value, op, parents, backward) -> Var:
    tape = _tape_of(*parents)
    out = Var(value, None, op)
    if tape is None:
        return out
    return tape._record(out, parents, backward)


# primitives ------------------------------------------------------------------

def add(a, b) -> Var:
    av, bv = _val(a), _val(b)
    return _make(av + bv, "add", (a, b),
                 lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def neg(a) -> Var:
    return _make(-_val(a), "neg", (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    """Elementwise product; covers the scalar-scale primitive via broadcasting."""
    av, bv = _val(a), _val(b)
    return _make(av * bv, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def power(a, p: float) -> Var:
    av = _val(a)
    out = av ** p
    return _make(out, "pow", (a,), lambda g: (g * p * av ** (p - 1),))


def log(a) -> Var:
    av = _val(a)
    return _make(np.log(av), "log", (a,), lambda g: (g / av,))


def relu(a) -> Var:
    """ReLU with derivative 0 at 0."""
    av = _val(a)
    mask = av > 0
    tape = _tape_of(a)
    if tape is not None and tape.track_kinks:
        tape._note_kink(np.abs(av))
    return _make(np.where(mask, av, 0.0), "relu", (a,), lambda g: (g * mask,))


def hinge(a) -> Var:
    """Positive part ``(a)_+``; subgradient 0 at the kink."""
    av = _val(a)
    mask = av > 0
    tape = _tape_of(a)
    if tape is not None and tape.track_kinks:
        tape._note_kink(np.abs(av))
    return _make(np.where(mask, av, 0.0), "hinge", (a,), lambda g: (g * mask,))


def vsum(a, axis=None, keepdims=False) -> Var:
    av = _val(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _make(out, "sum", (a,), back)


def concat(xs: Sequence, axis: int = -1) -> Var:
    vals = [_val(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, "concat", tuple(xs), back)


def take(a, idx) -> Var:
    av = _val(a)

    def back(g):
        full = np.zeros_like(av)
        np.add.at(full, idx, g)
        return (full,)

    return _make(av[idx], "take", (a,), back)


def affine(x, W, b) -> Var:
    """``x @ W + b`` over the last axis of ``x``."""
    xv, Wv, bv = _val(x), _val(W), _val(b)
    out = xv @ Wv + bv

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xv.reshape(-1, xv.shape[-1])
        return (g @ Wv.T, x2.T @ g2, g2.sum(axis=0))

    return _make(out, "affine", (x, W, b), back)


def contract(C: np.ndarray, x) -> Var:
    """Per-sample product with a constant: ``out[..., i, j] = sum_k C[..., i, k] x[..., j, k]``."""
    C = np.asarray(C, dtype=np.float64)
    xv = _val(x)
    out = np.einsum("...ik,...jk->...ij", C, xv)
    return _make(out, "contract", (x,), lambda g: (np.einsum("...ij,...ik->...jk", g, C),))


def neighbor_max(x, mask: np.ndarray) -> Var:
    """Max over a neighbour set: ``out[..., i, :] = max_{j: mask[i, j]} x[..., j, :]``.

    ``x`` has shape ``(..., K, D)``. Nodes with an empty neighbourhood get
    zeros. Ties route the gradient to the lowest index.
    """
    xv = _val(x)
    mask = np.asarray(mask, dtype=bool)
    K = xv.shape[-2]
    big = np.where(mask[..., :, :, None], xv[..., None, :, :], -np.inf)  # (..., i, j, D)
    idx = np.argmax(big, axis=-2)  # (..., i, D)
    out = np.take_along_axis(big, idx[..., None, :], axis=-2)[..., 0, :]
    empty = ~mask.any(axis=-1)
    out = np.where(empty[..., :, None], 0.0, out)

    tape = _tape_of(x)
    if tape is not None and tape.track_kinks and K > 2:
        srt = np.sort(big, axis=-2)
        gap = srt[..., -1, :] - srt[..., -2, :]
        # exact ties come from identical candidates (e.g. a shared initial
        # precoder) which move together, so only near-ties count as kinks
        tape._note_kink(gap[np.isfinite(gap) & (gap > 0)])

    def back(g):
        g = np.where(empty[..., :, None], 0.0, g)
        sel = np.arange(K)[:, None] == idx[..., :, None, :]  # (..., i, j, D)
        return (np.einsum("...id,...ijd->...jd", g, sel),)

    return _make(out, "max", (x,), back)


# convenience composites ------------------------------------------------------

def sq_mag(re, im) -> Var:
    """``|re + j im|^2`` for realified complex scalars."""
    return mul(re, re) + mul(im, im)


def tape_grad(f: Callable[[Var], Var], params) -> np.ndarray:
    """Gradient of scalar ``f`` at ``params`` via one forward/backward sweep."""
    tape = Tape(track_kinks=True)
    x = tape.var(np.array(params, dtype=np.float64))
    out = f(x)
    if not isinstance(out, Var) or out.tape is not tape:
        raise UnsupportedPrimitive("f must be built from tape primitives acting on its argument")
    (g,) = tape.gradient(out, [x])
    return g


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = f(x)
        flat[k] = old - h
        fm = f(x)
        flat[k] = old
        gf[k] = (fp - fm) / (2 * h)
    return g
