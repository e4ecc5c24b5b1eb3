"""Equivariant CGENN building blocks over batched multivector channels.

Every layer consumes and produces tape tensors of shape ``[B, C, 2**n]``.
The diagonal metric enters as a tensor ``delta`` on the same tape so that,
once the metric is learnable, gradients reach it through every product and
norm.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .algebra import blade_grades
from .autodiff import Parameter, Tape, Tensor
from .errors import LayoutError, ShapeError

NORM_FLOOR = 1e-6


@functools.lru_cache(maxsize=None)
def grade_onehot(dim: int) -> np.ndarray:
    """``[2**n, n+1]`` matrix mapping each blade to its grade."""
    g = np.zeros((1 << dim, dim + 1))
    g[np.arange(1 << dim), blade_grades(dim)] = 1.0
    g.setflags(write=False)
    return g


@functools.lru_cache(maxsize=None)
def vector_embedding(dim: int) -> np.ndarray:
    e = np.zeros((dim, 1 << dim))
    e[np.arange(dim), [1 << i for i in range(dim)]] = 1.0
    e.setflags(write=False)
    return e


@dataclass
class AlgebraContext:
    """Per-forward algebra state: the tape and the diagonal metric on it."""

    tape: Tape
    dim: int
    delta: Tensor

    @functools.cached_property
    def blade_q(self) -> Tensor:
        return ad.blade_metric(self.delta)


def embed(ctx: AlgebraContext, points=None, scalars=None, volumes=None) -> Tensor:
    """Stack point, scalar and volume channels (in that order) as multivectors.

    ``points`` is ``[B, P, n]``, ``scalars`` ``[B, S]`` and ``volumes``
    ``[B, V]``; any may be a tape tensor or a plain array.
    """
    tape, n = ctx.tape, ctx.dim
    size = 1 << n
    parts = []
    batch = None
    if points is not None:
        pts = tape._as_tensor(points)
        if pts.ndim != 3 or pts.shape[-1] != n:
            raise LayoutError(f"points must be [B, P, {n}], got {pts.shape}")
        batch = pts.shape[0]
        parts.append(pts @ vector_embedding(n))
    for values, blade in ((scalars, 0), (volumes, size - 1)):
        if values is None:
            continue
        vals = tape._as_tensor(values)
        if vals.ndim != 2:
            raise LayoutError(f"scalar/volume features must be [B, K], got {vals.shape}")
        if batch is not None and vals.shape[0] != batch:
            raise LayoutError("feature groups disagree on batch size")
        batch = vals.shape[0]
        place = np.zeros((1, size))
        place[0, blade] = 1.0
        parts.append(vals.reshape(vals.shape + (1,)) @ place)
    if not parts:
        raise LayoutError("no input features to embed")
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)


def grade_quadratic(x: Tensor, ctx: AlgebraContext) -> Tensor:
    """Q-bar of each grade part, ``[B, C, n+1]``.

    Distinct blades of one grade never contribute to the scalar part of
    ``reversal(x) x``, so the form is diagonal in the blade basis.
    """
    return (x * x * ctx.blade_q) @ grade_onehot(ctx.dim)


def _expand(per_grade: Tensor, dim: int) -> Tensor:
    return per_grade @ grade_onehot(dim).T


class Linear:
    kind = "linear"

    def __init__(self, name: str, in_channels: int, out_channels: int, dim: int, rng=None):
        s = in_channels ** -0.5
        shape = (out_channels, in_channels, dim + 1)
        w = rng.uniform(-s, s, shape) if rng is not None else np.zeros(shape)
        self.weights = Parameter(f"{name}.weights", w)
        self.dim = dim

    def parameters(self):
        return [self.weights]

    def __call__(self, x: Tensor, ctx: AlgebraContext) -> Tensor:
        w = self.weights
        if x.ndim != 3 or x.shape[1] != w.shape[1] or x.shape[2] != 1 << self.dim:
            raise ShapeError(f"linear layer expects [B, {w.shape[1]}, {1 << self.dim}], got {x.shape}")
        wb = ctx.tape.watch(w)[:, :, blade_grades(self.dim)]
        return ad.einsum("oib,Bib->Bob", wb, x)


class GeometricProduct:
    kind = "geometric_product"

    def __init__(self, name: str, channels: int, dim: int, rng=None):
        s = 1.0 / (dim + 1)
        shape = (channels, dim + 1, dim + 1, dim + 1)
        w = rng.uniform(-s, s, shape) if rng is not None else np.ones(shape)
        self.weights = Parameter(f"{name}.weights", w)

    def parameters(self):
        return [self.weights]

    def __call__(self, x1: Tensor, x2: Tensor, ctx: AlgebraContext) -> Tensor:
        return ad.cayley(x1, x2, ctx.tape.watch(self.weights), ctx.delta)


class Norm:
    kind = "norm"

    def __init__(self, name: str, dim: int):
        self.a = Parameter(f"{name}.a", np.zeros(dim + 1))

    def parameters(self):
        return [self.a]

    def __call__(self, x: Tensor, ctx: AlgebraContext) -> Tensor:
        q = grade_quadratic(x, ctx)
        denom = ad.sigmoid(ctx.tape.watch(self.a)) * (q - 1.0) + 1.0
        denom = ad.clamp_abs(denom, NORM_FLOOR)
        return x / _expand(denom, ctx.dim)


class GatedNonlinearity:
    """Scale grade k by ``sigmoid(u_k * Qbar(x^(k)) + b_k)``."""

    kind = "nonlinear"

    def __init__(self, name: str, channels: int, dim: int):
        self.u = Parameter(f"{name}.u", np.zeros((channels, dim + 1)))
        self.b = Parameter(f"{name}.b", np.zeros((channels, dim + 1)))

    def parameters(self):
        return [self.u, self.b]

    def __call__(self, x: Tensor, ctx: AlgebraContext) -> Tensor:
        if x.shape[1] != self.u.shape[0]:
            raise ShapeError(f"gate expects {self.u.shape[0]} channels, got {x.shape[1]}")
        q = grade_quadratic(x, ctx)
        tape = ctx.tape
        gate = ad.sigmoid(q * tape.watch(self.u) + tape.watch(self.b))
        return x * _expand(gate, ctx.dim)


# Functional forms used by tests and the property suite.

def linear_layer(x: Tensor, layer: Linear, ctx: AlgebraContext) -> Tensor:
    return layer(x, ctx)


def geometric_product_layer(x1: Tensor, x2: Tensor, layer: GeometricProduct, ctx: AlgebraContext) -> Tensor:
    return layer(x1, x2, ctx)


def norm_layer(x: Tensor, layer: Norm, ctx: AlgebraContext) -> Tensor:
    return layer(x, ctx)


def nonlinear_layer(x: Tensor, layer: GatedNonlinearity, ctx: AlgebraContext) -> Tensor:
    return layer(x, ctx)
