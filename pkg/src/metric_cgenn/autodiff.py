"""Tape-based reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` records one forward pass. Every op appends a node whose
parents sit earlier on the tape, so the backward sweep is a single reverse
walk. Tapes are not reused across steps.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import metric as metric_mod
from .algebra import _structure, blade_grades, metric_products
from .errors import ShapeError


class Parameter:
    """Named learnable array with a gradient buffer of the same shape."""

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Tensor:
    __slots__ = ("tape", "index", "data", "requires_grad")

    def __init__(self, tape: "Tape", index: int, data: np.ndarray, requires_grad: bool):
        self.tape = tape
        self.index = index
        self.data = data
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, node={self.index})"

    def __add__(self, other):
        return self.tape.record("add", self, other)

    def __radd__(self, other):
        return self.tape.record("add", other, self)

    def __sub__(self, other):
        return self.tape.record("sub", self, other)

    def __rsub__(self, other):
        return self.tape.record("sub", other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape.record("scale", self, factor=float(other))
        return self.tape.record("mul", self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return self.tape.record("scale", self, factor=-1.0)

    def __truediv__(self, other):
        if np.isscalar(other):
            return self.tape.record("scale", self, factor=1.0 / float(other))
        return self * self.tape.record("power", other, exponent=-1.0)

    def __pow__(self, exponent):
        return self.tape.record("power", self, exponent=float(exponent))

    def __matmul__(self, other):
        return self.tape.record("matmul", self, other)

    def __rmatmul__(self, other):
        return self.tape.record("matmul", other, self)

    def __getitem__(self, index):
        return self.tape.record("slice", self, index=index)

    @property
    def T(self):
        return self.tape.record("transpose", self, axes=None)

    def sum(self, axis=None, keepdims=False):
        return self.tape.record("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return self.tape.record("mean", self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.tape.record("reshape", self, shape=shape)


@dataclass
class Node:
    kind: str
    parents: tuple
    attrs: dict
    saved: dict
    out: np.ndarray
    requires_grad: bool
    param: Parameter | None = None


@dataclass
class _Op:
    forward: Callable
    backward: Callable


_OPS: dict[str, _Op] = {}


def _register(kind):
    def wrap(cls):
        _OPS[kind] = _Op(cls.forward, cls.backward)
        return cls
    return wrap


def op_kinds() -> tuple:
    return tuple(sorted(_OPS))


@dataclass
class Tape:
    nodes: list = field(default_factory=list)

    def _append(self, node: Node) -> Tensor:
        self.nodes.append(node)
        return Tensor(self, len(self.nodes) - 1, node.out, node.requires_grad)

    def constant(self, data) -> Tensor:
        arr = np.asarray(data, dtype=np.float64)
        return self._append(Node("const", (), {}, {}, arr, False))

    def watch(self, param: Parameter) -> Tensor:
        return self._append(Node("param", (), {}, {}, param.value, True, param))

    def _as_tensor(self, x) -> Tensor:
        if isinstance(x, Tensor):
            if x.tape is not self:
                raise ValueError("tensor belongs to a different tape")
            return x
        return self.constant(x)

    def record(self, kind: str, *inputs, **attrs) -> Tensor:
        op = _OPS.get(kind)
        if op is None:
            raise ValueError(f"unknown op kind {kind!r}")
        tensors = [self._as_tensor(x) for x in inputs]
        out, saved = op.forward([t.data for t in tensors], **attrs)
        req = any(t.requires_grad for t in tensors)
        return self._append(Node(kind, tuple(t.index for t in tensors), attrs, saved, out, req))

    def backward(self, loss: Tensor) -> dict:
        return backward(self, loss)


def backward(tape: Tape, loss: Tensor) -> dict:
    """Accumulate d loss / d p into ``p.grad`` for every watched parameter."""
    if loss.tape is not tape:
        raise ValueError("loss was not produced on this tape")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.data.shape}")
    grads: list = [None] * (loss.index + 1)
    grads[loss.index] = np.ones_like(loss.data)
    out = {}
    for i in range(loss.index, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = tape.nodes[i]
        if not node.requires_grad:
            continue
        if node.param is not None:
            node.param.grad = node.param.grad + g
            out[node.param.name] = node.param.grad
            continue
        if not node.parents:
            continue
        parent_data = [tape.nodes[p].out for p in node.parents]
        pgrads = _OPS[node.kind].backward(g, parent_data, node.out, node.saved, **node.attrs)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not tape.nodes[p].requires_grad:
                continue
            grads[p] = pg if grads[p] is None else grads[p] + pg
        grads[i] = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


@_register("add")
class _Add:
    def forward(xs):
        return xs[0] + xs[1], {}

    def backward(g, xs, out, saved):
        return _unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)


@_register("sub")
class _Sub:
    def forward(xs):
        return xs[0] - xs[1], {}

    def backward(g, xs, out, saved):
        return _unbroadcast(g, xs[0].shape), -_unbroadcast(g, xs[1].shape)


@_register("mul")
class _Mul:
    def forward(xs):
        return xs[0] * xs[1], {}

    def backward(g, xs, out, saved):
        return _unbroadcast(g * xs[1], xs[0].shape), _unbroadcast(g * xs[0], xs[1].shape)


@_register("scale")
class _Scale:
    def forward(xs, factor):
        return xs[0] * factor, {}

    def backward(g, xs, out, saved, factor):
        return (g * factor,)


@_register("matmul")
class _Matmul:
    def forward(xs):
        a, b = xs
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul operands need at least two axes")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
        return a @ b, {}

    def backward(g, xs, out, saved):
        a, b = xs
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


@_register("einsum")
class _Einsum:
    """Two-operand einsum; every index of an operand must survive elsewhere."""

    def forward(xs, spec):
        lhs, rhs = spec.replace(" ", "").split("->")
        sa, sb = lhs.split(",")
        for mine, other in ((sa, sb), (sb, sa)):
            if not set(mine) <= set(other) | set(rhs) or len(set(mine)) != len(mine):
                raise ShapeError(f"einsum spec {spec!r} not supported for differentiation")
        try:
            return np.einsum(spec, *xs), {}
        except ValueError as exc:
            raise ShapeError(str(exc)) from exc

    def backward(g, xs, out, saved, spec):
        lhs, rhs = spec.replace(" ", "").split("->")
        sa, sb = lhs.split(",")
        ga = np.einsum(f"{rhs},{sb}->{sa}", g, xs[1])
        gb = np.einsum(f"{rhs},{sa}->{sb}", g, xs[0])
        return ga, gb


@_register("sum")
class _Sum:
    def forward(xs, axis, keepdims):
        return np.sum(xs[0], axis=axis, keepdims=keepdims), {}

    def backward(g, xs, out, saved, axis, keepdims):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xs[0].shape).copy(),)


@_register("mean")
class _Mean:
    def forward(xs, axis, keepdims):
        return np.mean(xs[0], axis=axis, keepdims=keepdims), {}

    def backward(g, xs, out, saved, axis, keepdims):
        count = xs[0].size // max(np.asarray(out).size, 1)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xs[0].shape) / count,)


@_register("sigmoid")
class _Sigmoid:
    def forward(xs):
        x = xs[0]
        # split by sign to avoid overflow in exp
        e = np.exp(-np.abs(x))
        s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return s, {}

    def backward(g, xs, out, saved):
        return (g * out * (1.0 - out),)


@_register("relu")
class _Relu:
    def forward(xs):
        return np.maximum(xs[0], 0.0), {}

    def backward(g, xs, out, saved):
        return (g * (xs[0] > 0),)


@_register("power")
class _Power:
    def forward(xs, exponent):
        return np.power(xs[0], exponent), {}

    def backward(g, xs, out, saved, exponent):
        return (g * exponent * np.power(xs[0], exponent - 1.0),)


@_register("log")
class _Log:
    def forward(xs):
        return np.log(xs[0]), {}

    def backward(g, xs, out, saved):
        return (g / xs[0],)


@_register("concat")
class _Concat:
    def forward(xs, axis):
        return np.concatenate(xs, axis=axis), {"sizes": [x.shape[axis] for x in xs]}

    def backward(g, xs, out, saved, axis):
        cuts = np.cumsum(saved["sizes"])[:-1]
        return tuple(np.split(g, cuts, axis=axis))


@_register("slice")
class _Slice:
    def forward(xs, index):
        return np.array(xs[0][index], dtype=np.float64), {}

    def backward(g, xs, out, saved, index):
        full = np.zeros_like(xs[0])
        np.add.at(full, index, g)
        return (full,)


@_register("transpose")
class _Transpose:
    def forward(xs, axes):
        return np.transpose(xs[0], axes), {}

    def backward(g, xs, out, saved, axes):
        inv = None if axes is None else np.argsort(axes)
        return (np.transpose(g, inv),)


@_register("reshape")
class _Reshape:
    def forward(xs, shape):
        return xs[0].reshape(shape), {}

    def backward(g, xs, out, saved, shape):
        return (g.reshape(xs[0].shape),)


@_register("clamp_abs")
class _ClampAbs:
    """Push values with ``|x| < floor`` out to ``+-floor`` (sign kept, 0 -> +)."""

    def forward(xs, floor):
        x = xs[0]
        small = np.abs(x) < floor
        out = np.where(small, np.where(x < 0, -floor, floor), x)
        return out, {"small": small}

    def backward(g, xs, out, saved, floor):
        return (np.where(saved["small"], 0.0, g),)


def _metric_product_grads(delta: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """d/d delta_i of prod_{j in mask} delta_j, stacked on a leading axis."""
    n = delta.shape[0]
    out = np.empty((n,) + masks.shape)
    for i in range(n):
        others = delta.copy()
        others[i] = 1.0
        out[i] = np.where((masks >> i) & 1, metric_products(others, masks), 0.0)
    return out


@_register("blade_metric")
class _BladeMetric:
    """Per-blade product of diagonal metric entries, i.e. Q-bar of each basis blade."""

    def forward(xs):
        delta = xs[0]
        masks = np.arange(1 << delta.shape[0])
        return metric_products(delta, masks), {"masks": masks}

    def backward(g, xs, out, saved):
        d = _metric_product_grads(xs[0], saved["masks"])
        return (d @ g,)


@functools.lru_cache(maxsize=None)
def cayley_structure(dim: int):
    """Contraction indices for the fused product op at dimension ``dim``."""
    result, sign, _ = _structure(dim)
    size = 1 << dim
    ng = dim + 1
    gather = result
    sign2 = np.take_along_axis(sign, gather, axis=1)
    a = np.arange(size)[:, None]
    c = np.arange(size)[None, :]
    shared2 = np.broadcast_to(a & ~c, (size, size)) & (size - 1)
    grades = blade_grades(dim)
    flat = grades[a] * ng * ng + grades[gather] * ng + grades[c]
    onehot = np.zeros((size * size, ng ** 3))
    onehot[np.arange(size * size), flat.ravel()] = 1.0
    return gather, sign2, np.ascontiguousarray(shared2), flat, onehot


@_register("cayley")
class _Cayley:
    """Grade-weighted geometric product, channelwise.

    Inputs ``x1, x2 [..., O, 2**n]``, weights ``phi [O or 1, n+1, n+1, n+1]``
    and the diagonal metric ``delta [n]``. Output grade ``k`` of channel ``o``
    is ``sum_ij phi[o, i, j, k] * (x1_o^(i) x2_o^(j))^(k)``.
    """

    def forward(xs):
        x1, x2, phi, delta = xs
        n = delta.shape[0]
        size = 1 << n
        if x1.shape != x2.shape or x1.shape[-1] != size or x1.ndim < 2:
            raise ShapeError(f"cayley operands {x1.shape}, {x2.shape} incompatible with dim {n}")
        if phi.ndim != 4 or phi.shape[1:] != (n + 1,) * 3 or phi.shape[0] not in (1, x1.shape[-2]):
            raise ShapeError(f"cayley weights of shape {phi.shape} do not fit {x1.shape}")
        gather, sign2, shared2, flat, _ = cayley_structure(n)
        s2 = sign2 * metric_products(delta, shared2)
        phi_e = phi.reshape(phi.shape[0], -1)[:, flat]
        coef = phi_e * s2
        yg = x2[..., gather]
        out = np.einsum("...oa,...oac,oac->...oc", x1, yg, coef)
        return out, {"yg": yg, "coef": coef, "phi_e": phi_e, "s2": s2}

    def backward(g, xs, out, saved):
        x1, x2, phi, delta = xs
        n = delta.shape[0]
        gather, sign2, shared2, flat, onehot = cayley_structure(n)
        yg, coef = saved["yg"], saved["coef"]
        g_x1 = np.einsum("...oc,...oac,oac->...oa", g, yg, coef)
        t = np.einsum("...oc,...oa,oac->...oac", g, x1, coef)
        g_x2 = np.take_along_axis(t, np.broadcast_to(gather, t.shape), axis=-1).sum(axis=-2)
        lead = tuple(range(g.ndim - 2))
        g_coef = np.einsum("...oc,...oa,...oac->...oac", g, x1, yg).sum(axis=lead)
        g_phi_e = g_coef * saved["s2"]
        if phi.shape[0] == 1 and g_phi_e.shape[0] != 1:
            g_phi_e = g_phi_e.sum(axis=0, keepdims=True)
        g_phi = (g_phi_e.reshape(g_phi_e.shape[0], -1) @ onehot).reshape(phi.shape)
        g_s2 = (g_coef * saved["phi_e"]).sum(axis=0)
        d = _metric_product_grads(delta, shared2)
        g_delta = np.einsum("ac,iac->i", g_s2 * sign2, d)
        return g_x1, g_x2, g_phi, g_delta


@_register("eig")
class _Eig:
    """Symmetric eigendecomposition packed as ``[n+1, n]``: eigenvalues, then U."""

    def forward(xs):
        decomp = metric_mod.eigendecompose(metric_mod.MetricMatrix(xs[0]))
        packed = np.vstack([decomp.eigenvalues[None, :], decomp.basis])
        return packed, {"decomp": decomp}

    def backward(g, xs, out, saved):
        grad = metric_mod.eigendecompose_backward(saved["decomp"], g[0], g[1:])
        return (grad,)


# Thin helpers so layer code reads like array code.

def sigmoid(x: Tensor) -> Tensor:
    return x.tape.record("sigmoid", x)


def relu(x: Tensor) -> Tensor:
    return x.tape.record("relu", x)


def log(x: Tensor) -> Tensor:
    return x.tape.record("log", x)


def einsum(spec: str, a, b) -> Tensor:
    tape = a.tape if isinstance(a, Tensor) else b.tape
    return tape.record("einsum", a, b, spec=spec)


def concat(tensors, axis=0) -> Tensor:
    return tensors[0].tape.record("concat", *tensors, axis=axis)


def clamp_abs(x: Tensor, floor: float) -> Tensor:
    return x.tape.record("clamp_abs", x, floor=floor)


def cayley(x1: Tensor, x2: Tensor, phi, delta) -> Tensor:
    return x1.tape.record("cayley", x1, x2, phi, delta)


def blade_metric(delta: Tensor) -> Tensor:
    return delta.tape.record("blade_metric", delta)


def eig(m: Tensor) -> tuple[Tensor, Tensor]:
    packed = m.tape.record("eig", m)
    return packed[0], packed[1:]
