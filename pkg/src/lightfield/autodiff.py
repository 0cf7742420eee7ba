"""Minimal reverse-mode automatic differentiation over matrix-level ops.

A :class:`Tape` records an append-only list of nodes, each holding the
operation kind, the ids of its input nodes (always earlier on the tape) and
the cached forward value.  ``backward`` replays the tape in reverse and
accumulates gradients for every node, so both parameter gradients (training)
and input gradients (depth extraction) fall out of one mechanism.

Values are numpy arrays; float32 is the training dtype, while float64 leaves
give a shadow mode tight enough for finite-difference checks.  The op set is
deliberately matrix-level (matmul, add, relu, layernorm, sin/cos, ...) --
there is no scalar graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LAYER_NORM_EPS = 1e-5


class TapeUsageError(RuntimeError):
    """Raised for out-of-order use, e.g. backward before any forward."""


@dataclass
class Node:
    kind: str
    parents: tuple
    value: np.ndarray
    cache: tuple = ()


class Var:
    """Handle to one tape node; carries its gradient after ``backward``."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def grad(self):
        return self.tape.grads.get(self.idx)

    @property
    def shape(self):
        return self.value.shape


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


@dataclass
class Tape:
    nodes: list = field(default_factory=list)
    grads: dict = field(default_factory=dict)

    # -- construction -------------------------------------------------------

    def _push(self, kind, parents, value, cache=()) -> Var:
        self.nodes.append(Node(kind, parents, value, cache))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value) -> Var:
        return self._push("leaf", (), np.asarray(value))

    def _as_var(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise TapeUsageError("variable belongs to a different tape")
            return x
        return self.leaf(x)

    # -- ops ----------------------------------------------------------------

    def matmul(self, a, b) -> Var:
        a, b = self._as_var(a), self._as_var(b)
        return self._push("matmul", (a.idx, b.idx), a.value @ b.value)

    def add(self, a, b) -> Var:
        a, b = self._as_var(a), self._as_var(b)
        return self._push("add", (a.idx, b.idx), a.value + b.value)

    def sub(self, a, b) -> Var:
        a, b = self._as_var(a), self._as_var(b)
        return self._push("sub", (a.idx, b.idx), a.value - b.value)

    def mul(self, a, b) -> Var:
        a, b = self._as_var(a), self._as_var(b)
        return self._push("mul", (a.idx, b.idx), a.value * b.value)

    def div(self, a, b) -> Var:
        a, b = self._as_var(a), self._as_var(b)
        return self._push("div", (a.idx, b.idx), a.value / b.value)

    def scale(self, a, c: float) -> Var:
        a = self._as_var(a)
        return self._push("scale", (a.idx,), a.value * c, (c,))

    def relu(self, a) -> Var:
        a = self._as_var(a)
        return self._push("relu", (a.idx,), np.maximum(a.value, 0))

    def sin(self, a) -> Var:
        a = self._as_var(a)
        return self._push("sin", (a.idx,), np.sin(a.value))

    def cos(self, a) -> Var:
        a = self._as_var(a)
        return self._push("cos", (a.idx,), np.cos(a.value))

    def layer_norm(self, x, gain, bias) -> Var:
        """Normalize over the last axis, then apply elementwise gain and bias."""
        x, gain, bias = self._as_var(x), self._as_var(gain), self._as_var(bias)
        xv = x.value
        xhat = xv - xv.mean(axis=-1, keepdims=True)
        var = np.einsum("...i,...i->...", xhat, xhat) / xv.shape[-1]
        inv_std = 1.0 / np.sqrt(var + np.asarray(LAYER_NORM_EPS, dtype=xv.dtype))
        inv_std = inv_std[..., None]
        xhat *= inv_std
        out = xhat * gain.value
        out += bias.value
        return self._push(
            "layer_norm", (x.idx, gain.idx, bias.idx), out, (xhat, inv_std)
        )

    def concat(self, parts, axis=-1) -> Var:
        parts = [self._as_var(p) for p in parts]
        value = np.concatenate([p.value for p in parts], axis=axis)
        sizes = tuple(p.value.shape[axis] for p in parts)
        return self._push("concat", tuple(p.idx for p in parts), value, (axis, sizes))

    def narrow(self, a, start: int, length: int, shape=None) -> Var:
        """Slice ``a[start:start+length]`` of a flat vector, optionally reshaped.

        The backward pass scatters into the corresponding slice, which is how
        a flat parameter vector is carved into per-layer matrices.
        """
        a = self._as_var(a)
        value = a.value[start : start + length]
        if shape is not None:
            value = value.reshape(shape)
        return self._push("narrow", (a.idx,), value, (start, length))

    def take_row(self, a, row: int) -> Var:
        a = self._as_var(a)
        return self._push("take_row", (a.idx,), a.value[row], (row,))

    def sum(self, a) -> Var:
        a = self._as_var(a)
        return self._push("sum", (a.idx,), np.asarray(a.value.sum()), (a.value.shape,))

    def mean(self, a) -> Var:
        a = self._as_var(a)
        return self._push(
            "mean", (a.idx,), np.asarray(a.value.mean()), (a.value.shape, a.value.size)
        )

    # -- backward ------------------------------------------------------------

    def backward(self, root: Var, seed=None):
        """Accumulate gradients of ``root`` into every reachable node.

        ``seed`` is the output cotangent (defaults to ones for scalar roots).
        Gradients are replaced, not accumulated across calls.
        """
        if not self.nodes:
            raise TapeUsageError("backward called before any forward was recorded")
        if not isinstance(root, Var) or root.tape is not self:
            raise TapeUsageError("backward root must be a variable on this tape")
        if seed is None:
            seed = np.ones_like(root.value)
        seed = np.asarray(seed, dtype=root.value.dtype)
        if seed.shape != root.value.shape:
            raise ValueError(f"seed shape {seed.shape} != root shape {root.value.shape}")

        needed = set()
        stack = [root.idx]
        while stack:
            i = stack.pop()
            if i in needed:
                continue
            needed.add(i)
            stack.extend(self.nodes[i].parents)

        self.grads = {root.idx: seed.copy()}
        grads = self.grads
        for i in sorted(needed, reverse=True):
            g = grads.get(i)
            if g is None:
                continue
            node = self.nodes[i]
            if node.kind == "leaf":
                continue
            self._backprop_node(node, g, grads)

    def _acc(self, grads, idx, g, fresh=False):
        """Accumulate into a node's gradient slot.

        ``fresh`` marks arrays this backward pass just allocated and owns;
        anything else (pass-throughs, views) is copied before it can be
        mutated by later accumulation.
        """
        if idx in grads:
            grads[idx] += g
        elif fresh and g.dtype == self.nodes[idx].value.dtype:
            grads[idx] = g
        else:
            grads[idx] = g.astype(self.nodes[idx].value.dtype, copy=True)

    def _unbroadcast_acc(self, grads, idx, g, fresh=False):
        shape = self.nodes[idx].value.shape
        reduced = _unbroadcast(g, shape)
        self._acc(grads, idx, reduced, fresh=fresh or reduced is not g)

    def _backprop_node(self, node: Node, g, grads):
        kind = node.kind
        nodes = self.nodes
        if kind == "matmul":
            ai, bi = node.parents
            self._acc(grads, ai, g @ nodes[bi].value.T, fresh=True)
            self._acc(grads, bi, nodes[ai].value.T @ g, fresh=True)
        elif kind == "add":
            ai, bi = node.parents
            self._unbroadcast_acc(grads, ai, g)
            self._unbroadcast_acc(grads, bi, g)
        elif kind == "sub":
            ai, bi = node.parents
            self._unbroadcast_acc(grads, ai, g)
            self._unbroadcast_acc(grads, bi, -g, fresh=True)
        elif kind == "mul":
            ai, bi = node.parents
            self._unbroadcast_acc(grads, ai, g * nodes[bi].value, fresh=True)
            self._unbroadcast_acc(grads, bi, g * nodes[ai].value, fresh=True)
        elif kind == "div":
            ai, bi = node.parents
            bv = nodes[bi].value
            self._unbroadcast_acc(grads, ai, g / bv, fresh=True)
            self._unbroadcast_acc(grads, bi, -g * nodes[ai].value / (bv * bv), fresh=True)
        elif kind == "scale":
            (ai,) = node.parents
            (c,) = node.cache
            self._acc(grads, ai, g * c, fresh=True)
        elif kind == "relu":
            (ai,) = node.parents
            self._acc(grads, ai, g * (node.value > 0), fresh=True)
        elif kind == "sin":
            (ai,) = node.parents
            self._acc(grads, ai, g * np.cos(nodes[ai].value), fresh=True)
        elif kind == "cos":
            (ai,) = node.parents
            self._acc(grads, ai, -g * np.sin(nodes[ai].value), fresh=True)
        elif kind == "layer_norm":
            xi, gi, bi = node.parents
            xhat, inv_std = node.cache
            gain = nodes[gi].value
            self._unbroadcast_acc(grads, gi, g * xhat, fresh=True)
            self._unbroadcast_acc(grads, bi, g)
            dxhat = g * gain
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = np.einsum("...i,...i->...", dxhat, xhat)[..., None]
            m2 /= xhat.shape[-1]
            dxhat -= m1
            dxhat -= xhat * m2
            dxhat *= inv_std
            self._acc(grads, xi, dxhat, fresh=True)
        elif kind == "concat":
            axis, sizes = node.cache
            offset = 0
            for pid, size in zip(node.parents, sizes):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + size)
                self._acc(grads, pid, g[tuple(sl)])
                offset += size
        elif kind == "narrow":
            (ai,) = node.parents
            start, length = node.cache
            if ai not in grads:
                grads[ai] = np.zeros_like(nodes[ai].value)
            grads[ai][start : start + length] += g.reshape(-1)
        elif kind == "take_row":
            (ai,) = node.parents
            (row,) = node.cache
            if ai not in grads:
                grads[ai] = np.zeros_like(nodes[ai].value)
            grads[ai][row] += g
        elif kind == "sum":
            (ai,) = node.parents
            (shape,) = node.cache
            self._acc(grads, ai, np.broadcast_to(g, shape).copy(), fresh=True)
        elif kind == "mean":
            (ai,) = node.parents
            shape, size = node.cache
            self._acc(grads, ai, np.broadcast_to(g / size, shape).copy(), fresh=True)
        else:  # pragma: no cover
            raise TapeUsageError(f"unknown op kind {kind!r}")
