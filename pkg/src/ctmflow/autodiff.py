"""Minimal reverse-mode automatic differentiation on matrix-valued nodes.

A Tape records operations in creation order; backward walks the records in
reverse, accumulating adjoints additively. Elementwise operations broadcast
like numpy, and their backward pass sums gradients over broadcast axes. The
op set is deliberately small: just enough for fully connected networks and
transformation-model likelihoods.
"""

from __future__ import annotations

import numpy as np
from scipy import special


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over axes that were broadcast in the forward pass."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Node:
    """Handle to a value recorded on a tape."""

    __slots__ = ("index", "value")

    def __init__(self, index: int, value: np.ndarray):
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Operation recorder; insertion order doubles as topological order."""

    def __init__(self):
        self._records: list[tuple[Node, tuple, object]] = []

    def _push(self, value, parents=(), vjp=None) -> Node:
        node = Node(len(self._records), np.asarray(value, dtype=np.float64))
        self._records.append((node, tuple(parents), vjp))
        return node

    def leaf(self, value) -> Node:
        """Record an input; gradients with respect to leaves are readable."""
        return self._push(value)

    def constant(self, value) -> Node:
        return self._push(value)

    def add(self, a: Node, b: Node) -> Node:
        def vjp(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return self._push(a.value + b.value, (a, b), vjp)

    def sub(self, a: Node, b: Node) -> Node:
        def vjp(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return self._push(a.value - b.value, (a, b), vjp)

    def mul(self, a: Node, b: Node) -> Node:
        def vjp(g):
            return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

        return self._push(a.value * b.value, (a, b), vjp)

    def matmul(self, a: Node, b: Node) -> Node:
        def vjp(g):
            return g @ b.value.T, a.value.T @ g

        return self._push(a.value @ b.value, (a, b), vjp)

    def scale(self, a: Node, c: float) -> Node:
        return self._push(c * a.value, (a,), lambda g: (c * g,))

    def add_scalar(self, a: Node, c: float) -> Node:
        return self._push(a.value + c, (a,), lambda g: (g,))

    def neg(self, a: Node) -> Node:
        return self._push(-a.value, (a,), lambda g: (-g,))

    def relu(self, a: Node) -> Node:
        mask = a.value > 0.0
        return self._push(a.value * mask, (a,), lambda g: (g * mask,))

    def tanh(self, a: Node) -> Node:
        out = np.tanh(a.value)
        return self._push(out, (a,), lambda g: (g * (1.0 - out * out),))

    def softplus(self, a: Node) -> Node:
        out = np.logaddexp(0.0, a.value)
        sig = special.expit(a.value)
        return self._push(out, (a,), lambda g: (g * sig,))

    def exp(self, a: Node) -> Node:
        out = np.exp(a.value)
        return self._push(out, (a,), lambda g: (g * out,))

    def log(self, a: Node) -> Node:
        return self._push(np.log(a.value), (a,), lambda g: (g / a.value,))

    def clamp_min(self, a: Node, floor: float) -> Node:
        # Gradient passes only where the input is strictly above the floor,
        # matching the piecewise-constant forward value below it.
        mask = a.value > floor
        out = np.maximum(a.value, floor)
        return self._push(out, (a,), lambda g: (g * mask,))

    def sum(self, a: Node, axis: int | None = None, keepdims: bool = False) -> Node:
        out = a.value.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return self._push(out, (a,), vjp)

    def mean(self, a: Node) -> Node:
        size = a.value.size
        out = a.value.mean()

        def vjp(g):
            return (np.full(a.shape, float(g) / size),)

        return self._push(out, (a,), vjp)

    def rows(self, a: Node, start: int, stop: int) -> Node:
        def vjp(g):
            full = np.zeros_like(a.value)
            full[start:stop] = g
            return (full,)

        return self._push(a.value[start:stop], (a,), vjp)

    def cols(self, a: Node, start: int, stop: int) -> Node:
        def vjp(g):
            full = np.zeros_like(a.value)
            full[:, start:stop] = g
            return (full,)

        return self._push(a.value[:, start:stop], (a,), vjp)

    def vstack(self, a: Node, b: Node) -> Node:
        split = a.value.shape[0]

        def vjp(g):
            return g[:split], g[split:]

        return self._push(np.concatenate([a.value, b.value], axis=0), (a, b), vjp)

    def backward(self, root: Node) -> "Gradients":
        """Accumulate adjoints from a scalar root back to every node."""
        if root.value.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.shape}")
        adjoints: list = [None] * len(self._records)
        adjoints[root.index] = np.ones_like(root.value)
        for node, parents, vjp in reversed(self._records[: root.index + 1]):
            grad = adjoints[node.index]
            if grad is None or vjp is None:
                continue
            for parent, contribution in zip(parents, vjp(grad)):
                if adjoints[parent.index] is None:
                    adjoints[parent.index] = np.zeros_like(parent.value)
                adjoints[parent.index] = adjoints[parent.index] + contribution
        return Gradients(adjoints)


class Gradients:
    """Read-only view of the adjoints produced by one backward pass."""

    def __init__(self, adjoints: list):
        self._adjoints = adjoints

    def __getitem__(self, node: Node) -> np.ndarray:
        grad = self._adjoints[node.index]
        if grad is None:
            return np.zeros(node.shape)
        return grad


class Mlp:
    """Fully connected network with relu hidden layers and identity output.

    ``layers`` lists every layer width including the output, so
    ``Mlp(4, [16, 8, 1])`` maps 4 inputs through two hidden layers to a
    single output column.
    """

    def __init__(self, in_dim: int, layers: list[int]):
        if in_dim < 1:
            raise ValueError(f"in_dim must be >= 1, got {in_dim}")
        if not layers or any(w < 1 for w in layers):
            raise ValueError(f"layer widths must be positive, got {layers}")
        self.in_dim = int(in_dim)
        self.layers = [int(w) for w in layers]
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []

    def init_params(self, rng: np.random.Generator) -> None:
        """He-scaled normal weights, zero biases."""
        self.weights = []
        self.biases = []
        fan_in = self.in_dim
        for width in self.layers:
            scale = np.sqrt(2.0 / fan_in)
            self.weights.append(rng.normal(0.0, scale, size=(fan_in, width)))
            self.biases.append(np.zeros((1, width)))
            fan_in = width

    @property
    def out_dim(self) -> int:
        return self.layers[-1]

    def forward_np(self, x: np.ndarray) -> np.ndarray:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    def forward_tape(self, tape: Tape, x: Node, param_nodes: list) -> Node:
        """Forward pass using leaf nodes (weight, bias) per layer."""
        h = x
        last = len(param_nodes) - 1
        for i, (w, b) in enumerate(param_nodes):
            h = tape.add(tape.matmul(h, w), b)
            if i < last:
                h = tape.relu(h)
        return h
