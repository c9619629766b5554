"""Dense-matrix reverse-mode differentiation on a per-run tape.

Every value is a 2-D float64 numpy array. A Tape records operations
eagerly (define-by-run); ``backward`` walks the record in reverse and
accumulates gradients into the leaves that asked for them. Repeated use
of a node sums the contributions of every consumer.

A Tape and its NodeRefs belong to one thread of execution; distinct
tapes can run in parallel. Recorded values are never mutated. Tapes are
cheap and meant to be rebuilt for every forward pass.
"""

from __future__ import annotations

import numpy as np

_LN2 = float(np.log(2.0))


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class ContractError(ValueError):
    """Operation invoked outside its contract (wrong tape, non-scalar loss, ...)."""


def as_matrix(value) -> np.ndarray:
    """Coerce scalars / 1-D rows / nested lists to a finite 2-D float64 array."""
    m = np.array(value, dtype=np.float64, copy=True)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(1, -1)
    elif m.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {m.shape}")
    if m.size and not np.all(np.isfinite(m)):
        raise ContractError("matrix entries must be finite")
    return m


class NodeRef:
    """Opaque handle to one recorded value; valid only for the issuing tape."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape._values[self.index]

    @property
    def shape(self) -> tuple[int, int]:
        return self.tape._values[self.index].shape

    def __matmul__(self, other: "NodeRef") -> "NodeRef":
        return self.tape.matmul(self, other)

    def __add__(self, other: "NodeRef") -> "NodeRef":
        return self.tape.add(self, other)

    def __sub__(self, other: "NodeRef") -> "NodeRef":
        return self.tape.sub(self, other)

    def __mul__(self, other: "NodeRef") -> "NodeRef":
        return self.tape.mul(self, other)

    def __repr__(self):
        return f"NodeRef(index={self.index}, shape={self.shape})"


class Tape:
    """Ordered record of matrix operations plus their local gradient rules.

    With ``grad_enabled=False`` the tape skips building backward rules
    entirely, which makes it a fast evaluator for finite-difference
    probes and inference.
    """

    def __init__(self, grad_enabled: bool = True):
        self._values: list[np.ndarray] = []
        self._pulls: list[tuple] = []  # per node: ((parent_index, pull_fn), ...)
        self._needs: list[bool] = []
        self._grads: list[np.ndarray | None] | None = None
        self.grad_enabled = grad_enabled

    # -- recording ---------------------------------------------------------

    def _record(self, value: np.ndarray, pulls=(), force_need: bool = False) -> NodeRef:
        self._values.append(value)
        self._pulls.append(pulls)
        self._needs.append(force_need or bool(pulls))
        return NodeRef(self, len(self._values) - 1)

    def _own(self, *refs: NodeRef) -> None:
        for r in refs:
            if r.tape is not self:
                raise ContractError("NodeRef used with a tape that did not issue it")

    def constant(self, value) -> NodeRef:
        """Record a value that never receives a gradient."""
        return self._record(as_matrix(value))

    def param(self, value) -> NodeRef:
        """Record a trainable leaf; backward() accumulates its gradient."""
        return self._record(as_matrix(value), force_need=self.grad_enabled)

    # -- arithmetic --------------------------------------------------------

    def matmul(self, a: NodeRef, b: NodeRef) -> NodeRef:
        self._own(a, b)
        av, bv = a.value, b.value
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: inner dimensions differ, {av.shape} x {bv.shape}")
        out = av @ bv
        pulls = []
        if self._needs[a.index]:
            pulls.append((a.index, lambda g, bv=bv: g @ bv.T))
        if self._needs[b.index]:
            pulls.append((b.index, lambda g, av=av: av.T @ g))
        return self._record(out, tuple(pulls))

    def add(self, a: NodeRef, b: NodeRef) -> NodeRef:
        """Elementwise sum; also accepts a row vector b broadcast over a's rows."""
        self._own(a, b)
        av, bv = a.value, b.value
        if av.shape == bv.shape:
            reduce_b = False
        elif bv.shape == (1, av.shape[1]):
            reduce_b = True
        else:
            raise ShapeError(f"add: shapes {av.shape} and {bv.shape} do not align")
        pulls = []
        if self._needs[a.index]:
            pulls.append((a.index, lambda g: g))
        if self._needs[b.index]:
            if reduce_b:
                pulls.append((b.index, lambda g: g.sum(axis=0, keepdims=True)))
            else:
                pulls.append((b.index, lambda g: g))
        return self._record(av + bv, tuple(pulls))

    def sub(self, a: NodeRef, b: NodeRef) -> NodeRef:
        self._own(a, b)
        av, bv = a.value, b.value
        if av.shape != bv.shape:
            raise ShapeError(f"sub: shapes {av.shape} and {bv.shape} differ")
        pulls = []
        if self._needs[a.index]:
            pulls.append((a.index, lambda g: g))
        if self._needs[b.index]:
            pulls.append((b.index, lambda g: -g))
        return self._record(av - bv, tuple(pulls))

    def mul(self, a: NodeRef, b: NodeRef) -> NodeRef:
        """Elementwise (Hadamard) product of same-shape operands."""
        self._own(a, b)
        av, bv = a.value, b.value
        if av.shape != bv.shape:
            raise ShapeError(f"mul: shapes {av.shape} and {bv.shape} differ")
        pulls = []
        if self._needs[a.index]:
            pulls.append((a.index, lambda g, bv=bv: g * bv))
        if self._needs[b.index]:
            pulls.append((b.index, lambda g, av=av: g * av))
        return self._record(av * bv, tuple(pulls))

    def scale(self, x: NodeRef, c: float) -> NodeRef:
        self._own(x)
        c = float(c)
        pulls = ()
        if self._needs[x.index]:
            pulls = ((x.index, lambda g: c * g),)
        return self._record(c * x.value, pulls)

    def transpose(self, x: NodeRef) -> NodeRef:
        self._own(x)
        pulls = ()
        if self._needs[x.index]:
            pulls = ((x.index, lambda g: g.T),)
        return self._record(x.value.T.copy(), pulls)

    # -- nonlinearities ----------------------------------------------------

    def relu(self, x: NodeRef) -> NodeRef:
        self._own(x)
        xv = x.value
        pulls = ()
        if self._needs[x.index]:
            # subgradient at the kink is the right-hand derivative (1)
            mask = (xv >= 0.0).astype(np.float64)
            pulls = ((x.index, lambda g, mask=mask: g * mask),)
        return self._record(np.maximum(xv, 0.0), pulls)

    def leaky_relu(self, x: NodeRef, slope: float) -> NodeRef:
        self._own(x)
        slope = float(slope)
        if not 0.0 < slope < 1.0:
            raise ContractError(f"leaky_relu slope must lie in (0, 1), got {slope}")
        xv = x.value
        pulls = ()
        if self._needs[x.index]:
            deriv = np.where(xv >= 0.0, 1.0, slope)
            pulls = ((x.index, lambda g, deriv=deriv: g * deriv),)
        return self._record(np.where(xv >= 0.0, xv, slope * xv), pulls)

    def elu(self, x: NodeRef) -> NodeRef:
        self._own(x)
        xv = x.value
        neg = np.expm1(np.minimum(xv, 0.0))
        out = np.where(xv >= 0.0, xv, neg)
        pulls = ()
        if self._needs[x.index]:
            deriv = np.where(xv >= 0.0, 1.0, neg + 1.0)
            pulls = ((x.index, lambda g, deriv=deriv: g * deriv),)
        return self._record(out, pulls)

    def log2(self, x: NodeRef) -> NodeRef:
        self._own(x)
        xv = x.value
        if np.any(xv <= 0.0):
            raise ContractError("log2 requires strictly positive entries")
        pulls = ()
        if self._needs[x.index]:
            pulls = ((x.index, lambda g, xv=xv: g / (xv * _LN2)),)
        return self._record(np.log2(xv), pulls)

    # -- softmax -----------------------------------------------------------

    def row_softmax(self, x: NodeRef) -> NodeRef:
        """Softmax over each row, stabilised by per-row max subtraction."""
        self._own(x)
        xv = x.value
        e = np.exp(xv - xv.max(axis=1, keepdims=True))
        y = e / e.sum(axis=1, keepdims=True)
        pulls = ()
        if self._needs[x.index]:
            pulls = ((x.index, lambda g, y=y: y * (g - (g * y).sum(axis=1, keepdims=True))),)
        return self._record(y, pulls)

    def masked_row_softmax(self, x: NodeRef, mask) -> NodeRef:
        """Softmax over the True entries of each row; masked-out entries get 0.

        Every row of ``mask`` must select at least one entry.
        """
        self._own(x)
        xv = x.value
        m = np.asarray(mask, dtype=bool)
        if m.shape != xv.shape:
            raise ShapeError(f"mask shape {m.shape} does not match input {xv.shape}")
        if not m.any(axis=1).all():
            raise ContractError("masked_row_softmax: some row selects no entries")
        shifted = np.where(m, xv, -np.inf)
        e = np.exp(shifted - shifted.max(axis=1, keepdims=True))
        y = e / e.sum(axis=1, keepdims=True)
        pulls = ()
        if self._needs[x.index]:
            # masked-out entries have y == 0, so the plain softmax rule applies
            pulls = ((x.index, lambda g, y=y: y * (g - (g * y).sum(axis=1, keepdims=True))),)
        return self._record(y, pulls)

    # -- structure ---------------------------------------------------------

    def concat_cols(self, a: NodeRef, b: NodeRef) -> NodeRef:
        self._own(a, b)
        av, bv = a.value, b.value
        if av.shape[0] != bv.shape[0]:
            raise ShapeError(f"concat_cols: row counts differ, {av.shape} vs {bv.shape}")
        ca = av.shape[1]
        pulls = []
        if self._needs[a.index]:
            pulls.append((a.index, lambda g, ca=ca: g[:, :ca]))
        if self._needs[b.index]:
            pulls.append((b.index, lambda g, ca=ca: g[:, ca:]))
        return self._record(np.hstack([av, bv]), tuple(pulls))

    def slice_cols(self, x: NodeRef, start: int, stop: int) -> NodeRef:
        self._own(x)
        xv = x.value
        if not 0 <= start <= stop <= xv.shape[1]:
            raise ShapeError(f"slice_cols: [{start}, {stop}) outside 0..{xv.shape[1]}")
        pulls = ()
        if self._needs[x.index]:
            def pull(g, shape=xv.shape, start=start, stop=stop):
                out = np.zeros(shape)
                out[:, start:stop] = g
                return out
            pulls = ((x.index, pull),)
        return self._record(xv[:, start:stop].copy(), pulls)

    def mean_rows(self, x: NodeRef) -> NodeRef:
        """Column means: n x d -> 1 x d."""
        self._own(x)
        xv = x.value
        if xv.shape[0] == 0:
            raise ContractError("mean_rows of an empty matrix")
        n = xv.shape[0]
        pulls = ()
        if self._needs[x.index]:
            pulls = ((x.index, lambda g, n=n: np.repeat(g / n, n, axis=0)),)
        return self._record(xv.mean(axis=0, keepdims=True), pulls)

    def sum_all(self, x: NodeRef) -> NodeRef:
        """Sum of every entry: n x d -> 1 x 1."""
        self._own(x)
        xv = x.value
        pulls = ()
        if self._needs[x.index]:
            pulls = ((x.index, lambda g, shape=xv.shape: np.full(shape, g[0, 0])),)
        return self._record(np.array([[xv.sum()]]), pulls)

    # -- backward ----------------------------------------------------------

    def backward(self, loss: NodeRef) -> None:
        """Accumulate dloss/dnode for every recorded node that needs it.

        ``loss`` must be scalar (1 x 1). Gradients are reachable through
        :meth:`grad` afterwards; calling backward again resets them.
        """
        self._own(loss)
        if loss.shape != (1, 1):
            raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._values)
        grads[loss.index] = np.ones((1, 1))
        for i in range(loss.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            for parent, pull in self._pulls[i]:
                contribution = pull(g)
                if grads[parent] is None:
                    grads[parent] = contribution
                else:
                    grads[parent] = grads[parent] + contribution
        self._grads = grads

    def grad(self, ref: NodeRef) -> np.ndarray:
        """Gradient accumulated for ``ref`` by the latest backward() call.

        Nodes the loss never touched report a zero gradient of matching shape.
        """
        self._own(ref)
        if self._grads is None:
            raise ContractError("grad() called before backward()")
        g = self._grads[ref.index]
        if g is None:
            return np.zeros_like(self._values[ref.index])
        return g
