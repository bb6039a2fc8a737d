"""Layer primitives with forward and reverse-mode gradients.

Tensors are float64 numpy arrays. Spatial tensors are channels-last and
batched: ``(batch, height, width, channels)``. Every primitive is a pair of
pure functions: ``forward`` returns the output plus whatever it needs to
save, ``backward`` maps the upstream gradient to one gradient per input.

A :class:`GradientTape` strings primitives together. It records each
application in order and replays them in reverse in :meth:`GradientTape.backward`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not agree."""


class TapeUsageError(RuntimeError):
    """Raised when a tape is replayed twice or fed a foreign variable."""


# --------------------------------------------------------------------------
# Primitives
# --------------------------------------------------------------------------


def fc_forward(x, W, b):
    """Affine map ``W @ x + b`` for a vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise ShapeError(
            f"fc: x {x.shape}, W {W.shape}, b {b.shape} do not agree"
        )
    return x @ W.T + b


def fc_backward(gout, x, W):
    """Gradients of ``fc_forward`` w.r.t. (x, W, b)."""
    if x.ndim == 1:
        return gout @ W, np.outer(gout, x), gout.copy()
    return gout @ W, gout.T @ x, gout.sum(axis=0)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(gout, x):
    # derivative at exactly 0 is 0
    return gout * (x > 0)


def _check_conv(x, K, bias):
    if x.ndim != 4:
        raise ShapeError(f"conv2d_same expects (B, H, W, C) input, got {x.shape}")
    if K.ndim != 4 or K.shape[0] != K.shape[1] or K.shape[0] not in (1, 3):
        raise ShapeError(f"conv2d_same expects (k, k, C_in, C_out) with k in {{1, 3}}, got {K.shape}")
    if K.shape[2] != x.shape[3]:
        raise ShapeError(f"conv2d_same: input has {x.shape[3]} channels, kernels expect {K.shape[2]}")
    if bias.shape != (K.shape[3],):
        raise ShapeError(f"conv2d_same: bias {bias.shape} vs {K.shape[3]} output channels")


def _im2col3(x):
    """(B, H, W, C) -> (B, H, W, 9*C) zero-padded 3x3 neighbourhoods."""
    B, H, W, C = x.shape
    padded = np.zeros((B, H + 2, W + 2, C))
    padded[:, 1:-1, 1:-1, :] = x
    cols = np.empty((B, H, W, 9, C))
    for dy in range(3):
        for dx in range(3):
            cols[:, :, :, dy * 3 + dx, :] = padded[:, dy:dy + H, dx:dx + W, :]
    return cols.reshape(B, H, W, 9 * C)


def conv2d_same(x, K, bias):
    """Zero-padded "same" cross-correlation.

    ``x`` is ``(B, H, W, C_in)`` (a single ``(H, W, C_in)`` image is also
    accepted), ``K`` is ``(k, k, C_in, C_out)`` with k in {1, 3}.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    K = np.asarray(K, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    _check_conv(x, K, bias)
    out, _ = _conv_fwd(x, K, bias)
    return out[0] if single else out


def _conv_fwd(x, K, bias):
    k, _, c_in, c_out = K.shape
    if k == 1:
        cols = x
    else:
        cols = _im2col3(x)
    out = cols @ K.reshape(k * k * c_in, c_out) + bias
    return out, cols


def conv2d_same_backward(gout, x, K, cols=None):
    """Gradients of ``conv2d_same`` w.r.t. (x, K, bias)."""
    k, _, c_in, c_out = K.shape
    B, H, W, _ = x.shape
    if cols is None:
        cols = x if k == 1 else _im2col3(x)
    g2 = gout.reshape(-1, c_out)
    gK = (cols.reshape(-1, k * k * c_in).T @ g2).reshape(K.shape)
    gb = g2.sum(axis=0)
    gcols = gout @ K.reshape(k * k * c_in, c_out).T
    if k == 1:
        return gcols, gK, gb
    gcols = gcols.reshape(B, H, W, 3, 3, c_in)
    gpad = np.zeros((B, H + 2, W + 2, c_in))
    for dy in range(3):
        for dx in range(3):
            gpad[:, dy:dy + H, dx:dx + W, :] += gcols[:, :, :, dy, dx, :]
    return gpad[:, 1:-1, 1:-1, :], gK, gb


def avgpool2x2(x):
    """Non-overlapping 2x2 mean pooling over the two spatial axes."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avgpool2x2 needs even spatial size, got {H}x{W}")
    out = x.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))
    return out[0] if single else out


def avgpool2x2_backward(gout):
    g = np.repeat(np.repeat(gout, 2, axis=-3), 2, axis=-2)
    return g * 0.25


def softmax(logits):
    """Softmax over the last axis, max-subtracted."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(gout, probs):
    return probs * (gout - (gout * probs).sum(axis=-1, keepdims=True))


def add(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return a + b


def concat(a, b):
    """Concatenate along the last axis (feature axis)."""
    return np.concatenate([np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)], axis=-1)


def flatten(t, batched=False):
    """Row-major flatten; with ``batched`` the leading axis is kept."""
    t = np.asarray(t, dtype=np.float64)
    if batched:
        return t.reshape(t.shape[0], -1)
    return t.reshape(-1)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Var:
    """Handle to a value recorded on a tape."""

    id: int
    value: np.ndarray = field(repr=False)

    @property
    def shape(self):
        return self.value.shape


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    output: int
    saved: Any
    backward: Callable


def _op_fc(x, W, b):
    out = x @ W.T + b
    return out, (x, W), lambda g, s: fc_backward(g, *s)


def _op_relu(x):
    return relu(x), x, lambda g, s: (relu_backward(g, s),)


def _op_conv(x, K, b):
    out, cols = _conv_fwd(x, K, b)
    return out, (x, K, cols), lambda g, s: conv2d_same_backward(g, s[0], s[1], s[2])


def _op_pool(x):
    return avgpool2x2(x), None, lambda g, s: (avgpool2x2_backward(g),)


def _op_add(a, b):
    return add(a, b), None, lambda g, s: (g, g)


def _op_concat(a, b):
    n = a.shape[-1]
    return concat(a, b), n, lambda g, s: (g[..., :s], g[..., s:])


def _op_flatten(x):
    return flatten(x, batched=True), x.shape, lambda g, s: (g.reshape(s),)


def _op_softmax(x):
    p = softmax(x)
    return p, p, lambda g, s: (softmax_backward(g, s),)


_OPS = {
    "fc": _op_fc,
    "relu": _op_relu,
    "conv2d_same": _op_conv,
    "avgpool2x2": _op_pool,
    "add": _op_add,
    "concat": _op_concat,
    "flatten": _op_flatten,
    "softmax": _op_softmax,
}


class GradientTape:
    """Single-use record of primitive applications.

    Usage::

        tape = GradientTape()
        x = tape.watch("x", x_array)
        W = tape.watch("W", W_array)
        b = tape.watch("b", b_array)
        y = tape.apply("fc", x, W, b)
        grads = tape.backward(y, np.ones_like(y.value))   # {"x": ..., "W": ..., "b": ...}
    """

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._nodes: list[_Node] = []
        self._leaves: dict[str, int] = {}
        self._consumed = False

    @property
    def ops(self) -> list[str]:
        """Operation ids in recording order."""
        return [n.op for n in self._nodes]

    def _new(self, value) -> Var:
        self._values.append(value)
        return Var(len(self._values) - 1, value)

    def watch(self, name: str, value) -> Var:
        if self._consumed:
            raise TapeUsageError("tape already replayed")
        if name in self._leaves:
            raise TapeUsageError(f"leaf {name!r} watched twice")
        var = self._new(np.asarray(value, dtype=np.float64))
        self._leaves[name] = var.id
        return var

    def apply(self, op: str, *inputs: Var) -> Var:
        if self._consumed:
            raise TapeUsageError("tape already replayed")
        for v in inputs:
            if v.id >= len(self._values) or self._values[v.id] is not v.value:
                raise TapeUsageError("variable does not belong to this tape")
        out, saved, bwd = _OPS[op](*(v.value for v in inputs))
        var = self._new(out)
        self._nodes.append(_Node(op, tuple(v.id for v in inputs), var.id, saved, bwd))
        return var

    def backward(self, output: Var, seed, trace: list[str] | None = None) -> dict[str, np.ndarray]:
        """Reverse-mode accumulation from ``output`` seeded with ``seed``.

        Returns a gradient for every watched leaf; leaves off the path get
        zeros. If ``trace`` is a list, visited op ids are appended to it.
        """
        if self._consumed:
            raise TapeUsageError("tape already replayed")
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.value.shape:
            raise ShapeError(f"seed {seed.shape} vs output {output.value.shape}")
        self._consumed = True
        grads: dict[int, np.ndarray] = {output.id: seed}
        for node in reversed(self._nodes):
            if trace is not None:
                trace.append(node.op)
            g = grads.pop(node.output, None)
            if g is None:
                continue
            for i, gi in zip(node.inputs, node.backward(g, node.saved)):
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        out = {}
        for name, i in self._leaves.items():
            g = grads.get(i)
            out[name] = np.zeros_like(self._values[i]) if g is None else g
        # release saved intermediates
        self._nodes.clear()
        self._values.clear()
        return out
