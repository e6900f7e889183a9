"""Reverse-mode differentiation over small recorded computation graphs.

A ``Tape`` is an append-only list of primitive operations.  Nodes reference
only earlier nodes, so the graph is acyclic by construction.  ``Tape.grad``
emits the backward pass as *new nodes on the same tape*, which means the
result of a gradient is itself an expression that can be differentiated
again -- this is how second-order parameter gradients (gradients of losses
containing an input gradient) are computed.

All values are float64 numpy arrays.  The engine is batched: model code
conventionally uses shapes (B, d) for per-sample vectors, (B,) for
per-sample scalars and () for reduced scalars, but nothing in the engine
requires a batch axis.  The primitive set is closed: the VJP of every
primitive is expressible with the primitives below, so a recorded backward
pass can always be differentiated once more.

Reductions use numpy's deterministic summation and gradient contributions
are accumulated in fixed node-index order, so two evaluations with
identical inputs are bitwise identical.
"""

from __future__ import annotations

import math
from typing import Any, Sequence

import numpy as np

Array = np.ndarray


class NonFiniteError(ArithmeticError):
    """A value that must be finite contains NaN or Inf."""


def _shape_of(x) -> tuple[int, ...]:
    return tuple(np.shape(x))


class Ref:
    """Handle to one node of a Tape."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tape.shapes[self.idx]

    def __add__(self, other: "Ref") -> "Ref":
        return add(self, other)

    def __sub__(self, other: "Ref") -> "Ref":
        return add(self, scale(other, -1.0))

    def __mul__(self, other: "Ref") -> "Ref":
        return mul(self, other)

    def __neg__(self) -> "Ref":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        return f"Ref({self.idx}: {self.tape.kinds[self.idx]} {self.shape})"


class Tape:
    """Append-only graph of primitive operations.

    Leaves are constants, named input slots and parameter slots (slices of
    one flat parameter vector).  ``run`` evaluates every node in index
    order; ``grad`` records the reverse sweep; ``run_jvp`` performs a
    forward (tangent) sweep over the recorded nodes without emitting any.
    """

    def __init__(self):
        self.kinds: list[str] = []
        self.preds: list[tuple[int, ...]] = []
        self.aux: list[Any] = []
        self.shapes: list[tuple[int, ...]] = []
        self.input_slots: dict[str, int] = {}
        self.param_slots: list[int] = []

    def __len__(self) -> int:
        return len(self.kinds)

    def _emit(self, kind: str, preds: tuple[int, ...], aux, shape) -> Ref:
        self.kinds.append(kind)
        self.preds.append(preds)
        self.aux.append(aux)
        self.shapes.append(tuple(shape))
        return Ref(self, len(self.kinds) - 1)

    # -- leaves ----------------------------------------------------------

    def constant(self, value) -> Ref:
        value = np.asarray(value, dtype=np.float64)
        return self._emit("const", (), value, value.shape)

    def input_slot(self, name: str, shape: Sequence[int]) -> Ref:
        if name in self.input_slots:
            raise ValueError(f"duplicate input slot {name!r}")
        ref = self._emit("input", (), name, shape)
        self.input_slots[name] = ref.idx
        return ref

    def param_slot(self, offset: int, shape: Sequence[int]) -> Ref:
        ref = self._emit("param", (), (int(offset), tuple(shape)), shape)
        self.param_slots.append(ref.idx)
        return ref

    # -- evaluation ------------------------------------------------------

    def run(self, inputs: dict[str, Array] | None = None,
            params: Array | None = None) -> list[Array]:
        """Evaluate every node; returns the list of node values."""
        inputs = inputs or {}
        vals: list[Array] = [None] * len(self.kinds)  # type: ignore[list-item]
        for i, kind in enumerate(self.kinds):
            p = self.preds[i]
            a = self.aux[i]
            if kind == "const":
                v = a
            elif kind == "input":
                try:
                    v = np.asarray(inputs[a], dtype=np.float64)
                except KeyError:
                    raise KeyError(f"missing value for input slot {a!r}")
                if v.shape != self.shapes[i]:
                    raise ValueError(
                        f"input {a!r} has shape {v.shape}, expected {self.shapes[i]}")
            elif kind == "param":
                off, shape = a
                n = math.prod(shape)
                if params is None or off + n > params.size:
                    raise ValueError("parameter vector missing or too short")
                v = params[off:off + n].reshape(shape)
            elif kind == "add":
                v = vals[p[0]] + vals[p[1]]
            elif kind == "mul":
                v = vals[p[0]] * vals[p[1]]
            elif kind == "scale":
                v = vals[p[0]] * a
            elif kind == "sin":
                v = np.sin(vals[p[0]])
            elif kind == "cos":
                v = np.cos(vals[p[0]])
            elif kind == "linear":
                v = vals[p[0]] @ vals[p[1]] if a else vals[p[0]] @ vals[p[1]].T
            elif kind == "bias":
                v = vals[p[0]] + vals[p[1]]
            elif kind == "outersum":
                v = vals[p[0]].T @ vals[p[1]]
            elif kind == "batchsum":
                v = vals[p[0]].sum(axis=0)
            elif kind == "bcast":
                v = np.broadcast_to(vals[p[0]], (a,) + vals[p[0]].shape)
            elif kind == "rowsum":
                v = vals[p[0]].sum(axis=-1)
            elif kind == "rowbcast":
                v = np.broadcast_to(vals[p[0]][..., None], vals[p[0]].shape + (a,))
            elif kind == "rowmul":
                v = vals[p[0]] * vals[p[1]][..., None]
            elif kind == "sqnorm":
                x = vals[p[0]]
                v = (x * x).sum(axis=-1)
            elif kind == "vecsum":
                v = vals[p[0]].sum()
            elif kind == "fill":
                v = np.full(a, float(vals[p[0]]))
            else:  # pragma: no cover
                raise AssertionError(f"unknown node kind {kind}")
            vals[i] = v
        return vals

    def value(self, vals: list[Array], ref: Ref, check_finite: bool = False) -> Array:
        v = vals[ref.idx]
        if check_finite and not np.all(np.isfinite(v)):
            raise NonFiniteError(f"non-finite value at node {ref.idx} ({self.kinds[ref.idx]})")
        return v

    # -- reverse mode ----------------------------------------------------

    def _vjp(self, i: int, g: Ref) -> list[tuple[int, Ref]]:
        kind = self.kinds[i]
        p = self.preds[i]
        a = self.aux[i]
        t = self
        if kind in ("const", "input", "param"):
            return []
        if kind == "add":
            return [(p[0], g), (p[1], g)]
        if kind == "mul":
            return [(p[0], mul(g, Ref(t, p[1]))), (p[1], mul(g, Ref(t, p[0])))]
        if kind == "scale":
            return [(p[0], scale(g, a))]
        if kind == "sin":
            return [(p[0], mul(g, cos(Ref(t, p[0]))))]
        if kind == "cos":
            return [(p[0], scale(mul(g, sin(Ref(t, p[0]))), -1.0))]
        if kind == "linear":
            x, m = Ref(t, p[0]), Ref(t, p[1])
            if a:  # y = x @ M
                return [(p[0], linear(g, m, transpose=False)),
                        (p[1], outersum(x, g))]
            # y = x @ M.T
            return [(p[0], linear(g, m, transpose=True)),
                    (p[1], outersum(g, x))]
        if kind == "bias":
            return [(p[0], g), (p[1], batchsum(g))]
        if kind == "outersum":
            x, y = Ref(t, p[0]), Ref(t, p[1])
            return [(p[0], linear(y, g, transpose=False)),
                    (p[1], linear(x, g, transpose=True))]
        if kind == "batchsum":
            return [(p[0], bcast(g, t.shapes[p[0]][0]))]
        if kind == "bcast":
            return [(p[0], batchsum(g))]
        if kind == "rowsum":
            return [(p[0], rowbcast(g, t.shapes[p[0]][-1]))]
        if kind == "rowbcast":
            return [(p[0], rowsum(g))]
        if kind == "rowmul":
            v, s = Ref(t, p[0]), Ref(t, p[1])
            return [(p[0], rowmul(g, s)), (p[1], rowsum(mul(g, v)))]
        if kind == "sqnorm":
            return [(p[0], scale(rowmul(Ref(t, p[0]), g), 2.0))]
        if kind == "vecsum":
            return [(p[0], fill(g, t.shapes[p[0]][0]))]
        if kind == "fill":
            return [(p[0], vecsum(g))]
        raise AssertionError(f"unknown node kind {kind}")  # pragma: no cover

    def grad(self, out: Ref, wrt: Sequence[Ref], seed: Ref | None = None) -> list[Ref]:
        """Record the reverse sweep from ``out``; returns adjoints of ``wrt``.

        ``seed`` is the output cotangent (defaults to ones of out's shape;
        for a (B,)-shaped output this yields per-sample gradients).  The
        returned refs are ordinary nodes and may be differentiated again.
        """
        if seed is None:
            seed = self.constant(np.ones(self.shapes[out.idx]))
        if seed.shape != out.shape:
            raise ValueError(f"seed shape {seed.shape} != output shape {out.shape}")
        reachable = {out.idx}
        stack = [out.idx]
        while stack:
            for q in self.preds[stack.pop()]:
                if q not in reachable:
                    reachable.add(q)
                    stack.append(q)
        adjoint: dict[int, Ref] = {out.idx: seed}
        for i in range(out.idx, -1, -1):
            g = adjoint.get(i)
            if g is None:
                continue
            for q, contrib in self._vjp(i, g):
                prev = adjoint.get(q)
                adjoint[q] = contrib if prev is None else add(prev, contrib)
        results = []
        for w in wrt:
            r = adjoint.get(w.idx)
            if r is None:
                r = self.constant(np.zeros(self.shapes[w.idx]))
            results.append(r)
        return results

    # -- forward mode ----------------------------------------------------

    def run_jvp(self, inputs: dict[str, Array] | None, params: Array | None,
                tangents: dict[str, Array] | None = None,
                param_tangent: Array | None = None) -> tuple[list[Array], list[Array]]:
        """Forward sweep carrying (value, tangent) per node.

        ``tangents`` maps input-slot names to tangent arrays; slots absent
        from it (and the parameter vector, unless ``param_tangent`` is
        given) are held fixed.  Returns (values, tangents) for all nodes.
        """
        inputs = inputs or {}
        tangents = tangents or {}
        vals = self.run(inputs, params)
        tans: list[Array] = [None] * len(self.kinds)  # type: ignore[list-item]
        for i, kind in enumerate(self.kinds):
            p = self.preds[i]
            a = self.aux[i]
            if kind == "const":
                d = np.zeros(self.shapes[i])
            elif kind == "input":
                d = np.asarray(tangents.get(a, np.zeros(self.shapes[i])), dtype=np.float64)
            elif kind == "param":
                off, shape = a
                if param_tangent is None:
                    d = np.zeros(shape)
                else:
                    n = math.prod(shape)
                    d = param_tangent[off:off + n].reshape(shape)
            elif kind == "add":
                d = tans[p[0]] + tans[p[1]]
            elif kind == "mul":
                d = tans[p[0]] * vals[p[1]] + vals[p[0]] * tans[p[1]]
            elif kind == "scale":
                d = tans[p[0]] * a
            elif kind == "sin":
                d = tans[p[0]] * np.cos(vals[p[0]])
            elif kind == "cos":
                d = -tans[p[0]] * np.sin(vals[p[0]])
            elif kind == "linear":
                if a:
                    d = tans[p[0]] @ vals[p[1]] + vals[p[0]] @ tans[p[1]]
                else:
                    d = tans[p[0]] @ vals[p[1]].T + vals[p[0]] @ tans[p[1]].T
            elif kind == "bias":
                d = tans[p[0]] + tans[p[1]]
            elif kind == "outersum":
                d = tans[p[0]].T @ vals[p[1]] + vals[p[0]].T @ tans[p[1]]
            elif kind == "batchsum":
                d = tans[p[0]].sum(axis=0)
            elif kind == "bcast":
                d = np.broadcast_to(tans[p[0]], (a,) + tans[p[0]].shape)
            elif kind == "rowsum":
                d = tans[p[0]].sum(axis=-1)
            elif kind == "rowbcast":
                d = np.broadcast_to(tans[p[0]][..., None], tans[p[0]].shape + (a,))
            elif kind == "rowmul":
                d = tans[p[0]] * vals[p[1]][..., None] + vals[p[0]] * tans[p[1]][..., None]
            elif kind == "sqnorm":
                d = 2.0 * (vals[p[0]] * tans[p[0]]).sum(axis=-1)
            elif kind == "vecsum":
                d = tans[p[0]].sum()
            elif kind == "fill":
                d = np.full(a, float(tans[p[0]]))
            else:  # pragma: no cover
                raise AssertionError(f"unknown node kind {kind}")
            tans[i] = d
        return vals, tans


# -- primitive constructors ----------------------------------------------

def _same_tape(*refs: Ref) -> Tape:
    t = refs[0].tape
    for r in refs[1:]:
        if r.tape is not t:
            raise ValueError("refs belong to different tapes")
    return t


def add(a: Ref, b: Ref) -> Ref:
    t = _same_tape(a, b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch {a.shape} vs {b.shape}")
    return t._emit("add", (a.idx, b.idx), None, a.shape)


def mul(a: Ref, b: Ref) -> Ref:
    t = _same_tape(a, b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch {a.shape} vs {b.shape}")
    return t._emit("mul", (a.idx, b.idx), None, a.shape)


def scale(a: Ref, c: float) -> Ref:
    return a.tape._emit("scale", (a.idx,), float(c), a.shape)


def sin(a: Ref) -> Ref:
    return a.tape._emit("sin", (a.idx,), None, a.shape)


def cos(a: Ref) -> Ref:
    return a.tape._emit("cos", (a.idx,), None, a.shape)


def linear(x: Ref, m: Ref, transpose: bool = False) -> Ref:
    """x @ m.T (default) or x @ m (transpose=True); m is a 2-D matrix."""
    t = _same_tape(x, m)
    if len(m.shape) != 2 or len(x.shape) != 2:
        raise ValueError("linear expects 2-D operands")
    o, i = m.shape
    if transpose:
        if x.shape[1] != o:
            raise ValueError(f"linear shape mismatch {x.shape} @ {m.shape}")
        out = (x.shape[0], i)
    else:
        if x.shape[1] != i:
            raise ValueError(f"linear shape mismatch {x.shape} @ {m.shape}.T")
        out = (x.shape[0], o)
    return t._emit("linear", (x.idx, m.idx), transpose, out)


def bias(y: Ref, b: Ref) -> Ref:
    """Row-broadcast add: (B, d) + (d,)."""
    t = _same_tape(y, b)
    if y.shape[-1:] != b.shape or len(b.shape) != 1:
        raise ValueError(f"bias shape mismatch {y.shape} + {b.shape}")
    return t._emit("bias", (y.idx, b.idx), None, y.shape)


def outersum(a: Ref, b: Ref) -> Ref:
    """Batch-summed outer product a.T @ b: (B, p), (B, q) -> (p, q)."""
    t = _same_tape(a, b)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"outersum batch mismatch {a.shape} vs {b.shape}")
    return t._emit("outersum", (a.idx, b.idx), None, (a.shape[1], b.shape[1]))


def batchsum(x: Ref) -> Ref:
    return x.tape._emit("batchsum", (x.idx,), None, x.shape[1:])


def bcast(v: Ref, n: int) -> Ref:
    return v.tape._emit("bcast", (v.idx,), int(n), (int(n),) + v.shape)


def rowsum(x: Ref) -> Ref:
    return x.tape._emit("rowsum", (x.idx,), None, x.shape[:-1])


def rowbcast(s: Ref, d: int) -> Ref:
    return s.tape._emit("rowbcast", (s.idx,), int(d), s.shape + (int(d),))


def rowmul(v: Ref, s: Ref) -> Ref:
    """Scale rows of v (B, d) by per-row scalars s (B,)."""
    t = _same_tape(v, s)
    if v.shape[:-1] != s.shape:
        raise ValueError(f"rowmul shape mismatch {v.shape} * {s.shape}")
    return t._emit("rowmul", (v.idx, s.idx), None, v.shape)


def sqnorm(x: Ref) -> Ref:
    """Squared Euclidean norm over the last axis."""
    return x.tape._emit("sqnorm", (x.idx,), None, x.shape[:-1])


def vecsum(s: Ref) -> Ref:
    if len(s.shape) != 1:
        raise ValueError("vecsum expects a 1-D operand")
    return s.tape._emit("vecsum", (s.idx,), None, ())


def fill(c: Ref, n: int) -> Ref:
    if c.shape != ():
        raise ValueError("fill expects a scalar operand")
    return c.tape._emit("fill", (c.idx,), int(n), (int(n),))


def batch_mean(s: Ref) -> Ref:
    """Mean of a (B,) vector as a () scalar."""
    return scale(vecsum(s), 1.0 / s.shape[0])


# -- convenience API over single-output programs --------------------------

class Program:
    """A tape with one designated input slot and one output node.

    Convenience wrapper matching the shape of the engine-level operations:
    evaluation, input gradient (recorded, hence differentiable again),
    parameter gradients of scalar objectives, and Jacobian-vector products
    of vector-valued outputs.
    """

    def __init__(self, tape: Tape, x: Ref, out: Ref, n_params: int = 0):
        self.tape = tape
        self.x = x
        self.out = out
        self.n_params = n_params
        self._grad_ref: Ref | None = None
        self._pgrad_refs: list[Ref] | None = None

    def evaluate(self, x: Array, params: Array | None = None) -> float:
        if self.out.shape != ():
            raise ValueError("evaluate requires a scalar output")
        vals = self.tape.run({"x": np.asarray(x, dtype=np.float64)}, params)
        return float(self.tape.value(vals, self.out, check_finite=True))

    def input_gradient(self, x: Array, params: Array | None = None) -> tuple[float, Array]:
        """Value and gradient of a scalar output w.r.t. the input slot."""
        if self.out.shape != ():
            raise ValueError("input_gradient requires a scalar output")
        if self._grad_ref is None:
            (self._grad_ref,) = self.tape.grad(self.out, [self.x])
        vals = self.tape.run({"x": np.asarray(x, dtype=np.float64)}, params)
        val = float(self.tape.value(vals, self.out, check_finite=True))
        return val, self.tape.value(vals, self._grad_ref, check_finite=True).copy()

    def param_gradient(self, x: Array, params: Array) -> Array:
        """Gradient of a scalar output w.r.t. the flat parameter vector.

        When the output was built on top of a recorded input gradient this
        is a second-order (reverse-over-reverse) quantity.
        """
        if self.out.shape != ():
            raise ValueError("param_gradient requires a scalar output")
        if self._pgrad_refs is None:
            slots = [Ref(self.tape, i) for i in self.tape.param_slots]
            self._pgrad_refs = self.tape.grad(self.out, slots)
        vals = self.tape.run({"x": np.asarray(x, dtype=np.float64)}, params)
        flat = np.zeros(self.n_params if self.n_params else params.size)
        for slot_idx, gref in zip(self.tape.param_slots, self._pgrad_refs):
            off, shape = self.tape.aux[slot_idx]
            g = self.tape.value(vals, gref, check_finite=True)
            n = math.prod(shape)
            flat[off:off + n] += np.asarray(g).ravel()
        return flat

    def jvp(self, x: Array, params: Array | None, direction: Array) -> Array:
        """J @ direction for the (possibly vector-valued) output."""
        direction = np.asarray(direction, dtype=np.float64)
        if direction.shape != self.x.shape:
            raise ValueError(f"direction shape {direction.shape} != input shape {self.x.shape}")
        _, tans = self.tape.run_jvp({"x": np.asarray(x, dtype=np.float64)}, params,
                                    tangents={"x": direction})
        return np.asarray(tans[self.out.idx]).copy()
