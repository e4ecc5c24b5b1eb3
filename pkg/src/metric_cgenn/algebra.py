"""Dense Clifford algebra over a diagonal quadratic form.

Multivectors are stored as arrays of ``2**n`` coefficients indexed by blade
bitmask: index ``k`` holds the blade whose set bits name its basis vectors,
so the order is ``1, e1, e2, e1e2, e3, e1e3, ...``. Leading array axes are
treated as batch axes throughout.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    DimensionError,
    GradeError,
    NonInvertibleError,
    NullVectorError,
    ParityError,
)

MAX_DIM = 12
NULL_TOL = 1e-12


def grade_of(mask: int) -> int:
    return bin(mask).count("1")


def blade_name(mask: int) -> str:
    if mask == 0:
        return "1"
    return "".join(f"e{i + 1}" for i in range(mask.bit_length()) if mask >> i & 1)


def parse_blade(name: str) -> int:
    """Inverse of :func:`blade_name` for canonical (ascending) names."""
    name = name.strip()
    if name == "1":
        return 0
    parts = [p for p in name.split("e") if p]
    idx = [int(p) - 1 for p in parts]
    if idx != sorted(set(idx)) or not idx or idx[0] < 0:
        raise ValueError(f"not a canonical blade name: {name!r}")
    return sum(1 << i for i in idx)


def reorder_sign(a: int, b: int) -> int:
    """Sign picked up by sorting the concatenated index list of blades a, b.

    Each basis vector of ``a`` must hop over every lower-indexed vector of
    ``b``; the parity of the total hop count is the sign.
    """
    a >>= 1
    swaps = 0
    while a:
        swaps += grade_of(a & b)
        a >>= 1
    return -1 if swaps & 1 else 1


@functools.lru_cache(maxsize=None)
def blade_grades(dim: int) -> np.ndarray:
    g = np.array([grade_of(m) for m in range(1 << dim)], dtype=np.int64)
    g.setflags(write=False)
    return g


@functools.lru_cache(maxsize=None)
def reversal_signs(dim: int) -> np.ndarray:
    k = blade_grades(dim)
    s = np.where((k * (k - 1) // 2) % 2 == 0, 1.0, -1.0)
    s.setflags(write=False)
    return s


@dataclass(frozen=True)
class DiagonalMetric:
    entries: tuple

    def __post_init__(self):
        entries = tuple(float(e) for e in self.entries)
        if len(entries) < 1:
            raise DimensionError("metric needs at least one diagonal entry")
        object.__setattr__(self, "entries", entries)

    @property
    def dim(self) -> int:
        return len(self.entries)

    @classmethod
    def euclidean(cls, dim: int) -> "DiagonalMetric":
        return cls((1.0,) * dim)

    @classmethod
    def parse(cls, text: str) -> "DiagonalMetric":
        """Parse a comma-separated signature such as ``"1,-1,-1,-1"``."""
        return cls(tuple(float(t) for t in text.split(",") if t.strip()))

    def as_array(self) -> np.ndarray:
        return np.array(self.entries, dtype=np.float64)


@functools.lru_cache(maxsize=None)
def _structure(dim: int):
    """Metric-independent parts of the blade product table for ``dim``."""
    size = 1 << dim
    masks = np.arange(size)
    result = masks[:, None] ^ masks[None, :]
    sign = np.array(
        [[reorder_sign(a, b) for b in range(size)] for a in range(size)], dtype=np.float64
    )
    shared = masks[:, None] & masks[None, :]
    for arr in (result, sign, shared):
        arr.setflags(write=False)
    return result, sign, shared


def metric_products(entries: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Product of ``entries[i]`` over the set bits of each mask (1 for empty)."""
    out = np.ones(masks.shape, dtype=np.float64)
    for i, d in enumerate(entries):
        out = np.where((masks >> i) & 1, out * d, out)
    return out


@dataclass(frozen=True, eq=False)
class CayleyTable:
    """Blade multiplication table ``e_a e_b = scale[a, b] * e_{a ^ b}``.

    ``gather`` and ``contract_scale`` re-index the table for the contraction
    ``out[c] = sum_a x[a] * y[a ^ c] * contract_scale[a, c]`` used by every
    product routine, including the fused autodiff op.
    """

    metric: DiagonalMetric
    result: np.ndarray = field(repr=False)
    sign: np.ndarray = field(repr=False)
    scale: np.ndarray = field(repr=False)
    shared: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return self.metric.dim

    @property
    def size(self) -> int:
        return 1 << self.dim

    @property
    def gather(self) -> np.ndarray:
        # a ^ c; the xor table is its own re-index.
        return self.result

    @functools.cached_property
    def contract_scale(self) -> np.ndarray:
        s = np.take_along_axis(self.scale, self.result, axis=1)
        s.setflags(write=False)
        return s

    def entry(self, a: int, b: int) -> tuple[int, float]:
        return int(self.result[a, b]), float(self.scale[a, b])

    def rows(self):
        """Yield ``(a, b, scale, c)`` for every ordered blade pair."""
        for a in range(self.size):
            for b in range(self.size):
                yield a, b, float(self.scale[a, b]), int(self.result[a, b])


def build_cayley_table(metric: DiagonalMetric) -> CayleyTable:
    if metric.dim > MAX_DIM:
        raise DimensionError(f"dim {metric.dim} exceeds the supported maximum {MAX_DIM}")
    result, sign, shared = _structure(metric.dim)
    scale = sign * metric_products(metric.as_array(), shared)
    scale.setflags(write=False)
    return CayleyTable(metric, result, sign, scale, shared)


@functools.lru_cache(maxsize=None)
def _outer_table(dim: int) -> CayleyTable:
    # The exterior product is the geometric product of the null metric.
    return build_cayley_table(DiagonalMetric((0.0,) * dim))


class Multivector:
    """Coefficient array of shape ``[..., 2**dim]`` tagged with its dimension."""

    __slots__ = ("dim", "coeffs")

    def __init__(self, dim: int, coeffs):
        coeffs = np.asarray(coeffs, dtype=np.float64)
        if coeffs.ndim == 0 or coeffs.shape[-1] != 1 << dim:
            raise DimensionError(
                f"expected last axis of length {1 << dim}, got shape {coeffs.shape}"
            )
        self.dim = dim
        self.coeffs = coeffs

    @classmethod
    def zeros(cls, dim: int, batch: tuple = ()) -> "Multivector":
        return cls(dim, np.zeros(batch + (1 << dim,)))

    @classmethod
    def scalar(cls, value, dim: int) -> "Multivector":
        value = np.asarray(value, dtype=np.float64)
        c = np.zeros(value.shape + (1 << dim,))
        c[..., 0] = value
        return cls(dim, c)

    @classmethod
    def vector(cls, components) -> "Multivector":
        v = np.asarray(components, dtype=np.float64)
        dim = v.shape[-1]
        c = np.zeros(v.shape[:-1] + (1 << dim,))
        for i in range(dim):
            c[..., 1 << i] = v[..., i]
        return cls(dim, c)

    @classmethod
    def blade(cls, mask: int, dim: int, coefficient: float = 1.0) -> "Multivector":
        c = np.zeros(1 << dim)
        c[mask] = coefficient
        return cls(dim, c)

    def vector_part(self) -> np.ndarray:
        return self.coeffs[..., [1 << i for i in range(self.dim)]]

    def grade(self, k: int) -> "Multivector":
        return grade_project(self, k)

    def _check(self, other: "Multivector"):
        if self.dim != other.dim:
            raise DimensionError(f"dimension mismatch: {self.dim} vs {other.dim}")

    def __add__(self, other):
        if isinstance(other, Multivector):
            self._check(other)
            return Multivector(self.dim, self.coeffs + other.coeffs)
        return self + Multivector.scalar(other, self.dim)

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-other)

    def __neg__(self):
        return Multivector(self.dim, -self.coeffs)

    def __mul__(self, scalar):
        if isinstance(scalar, Multivector):
            raise TypeError("use geometric_product(x, y, table) for multivector products")
        return Multivector(self.dim, self.coeffs * np.asarray(scalar)[..., None])

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return Multivector(self.dim, self.coeffs / np.asarray(scalar)[..., None])

    def __repr__(self):
        flat = self.coeffs.reshape(-1, 1 << self.dim)
        if flat.shape[0] != 1:
            return f"Multivector(dim={self.dim}, shape={self.coeffs.shape})"
        terms = [f"{c:+.6g}{'' if m == 0 else '*' + blade_name(m)}"
                 for m, c in enumerate(flat[0]) if c != 0]
        return f"Multivector({' '.join(terms) or '0'})"


def _check_dims(*items):
    dims = {getattr(i, "dim") for i in items}
    if len(dims) != 1:
        raise DimensionError(f"dimension mismatch: {sorted(dims)}")


def contract(x: np.ndarray, y: np.ndarray, table: CayleyTable) -> np.ndarray:
    """Raw-array geometric product over the last axis."""
    yg = y[..., table.gather]  # [..., a, c] = y[..., a ^ c]
    return np.einsum("...a,...ac,ac->...c", x, yg, table.contract_scale)


def geometric_product(x: Multivector, y: Multivector, table: CayleyTable) -> Multivector:
    _check_dims(x, y, table)
    return Multivector(x.dim, contract(x.coeffs, y.coeffs, table))


def wedge(x: Multivector, y: Multivector) -> Multivector:
    _check_dims(x, y)
    return Multivector(x.dim, contract(x.coeffs, y.coeffs, _outer_table(x.dim)))


def grade_project(x: Multivector, k: int) -> Multivector:
    if not 0 <= k <= x.dim:
        raise GradeError(f"grade {k} outside [0, {x.dim}]")
    keep = blade_grades(x.dim) == k
    return Multivector(x.dim, np.where(keep, x.coeffs, 0.0))


def reversal(x: Multivector) -> Multivector:
    return Multivector(x.dim, x.coeffs * reversal_signs(x.dim))


def extended_quadratic_form(x: Multivector, table: CayleyTable):
    """Scalar part of ``reversal(x) * x``; returns an array for batched input."""
    _check_dims(x, table)
    rx = reversal(x).coeffs
    # Only the c = 0 column of the contraction is needed.
    s = np.einsum("...a,...a,a->...", rx, x.coeffs, table.contract_scale[:, 0])
    return float(s) if np.ndim(s) == 0 else s


@dataclass(frozen=True, eq=False)
class Versor:
    value: Multivector
    factors: tuple
    parity: str

    @property
    def is_even(self) -> bool:
        return self.parity == "even"


def make_versor(vectors: Sequence[Multivector], table: CayleyTable) -> Versor:
    if not vectors:
        raise ValueError("a versor needs at least one factor")
    delta = table.metric.as_array()
    value = Multivector.scalar(1.0, table.dim)
    factors = []
    for v in vectors:
        _check_dims(v, table)
        if np.any(grade_project(v, 1).coeffs != v.coeffs):
            raise GradeError("versor factors must be grade-1")
        comps = v.vector_part()
        q = float(comps @ (delta * comps))
        if abs(q) < NULL_TOL:
            raise NullVectorError(f"vector with |v^T D v| = {abs(q):.3g} is not invertible")
        unit = v / math.sqrt(abs(q))
        factors.append(unit)
        value = geometric_product(value, unit, table)
    parity = "even" if len(factors) % 2 == 0 else "odd"
    return Versor(value, tuple(factors), parity)


def versor_inverse(w: Versor, table: CayleyTable) -> Multivector:
    q = extended_quadratic_form(w.value, table)
    if abs(q) < NULL_TOL:
        raise NonInvertibleError(f"versor norm {q:.3g} too close to zero")
    return reversal(w.value) / q


def versor_action(w: Versor, x: Multivector, table: CayleyTable) -> Multivector:
    """Sandwich ``w x w^-1`` for even versors."""
    if not w.is_even:
        raise ParityError("only even versors (rotors) act by plain conjugation here")
    _check_dims(w.value, x, table)
    inv = versor_inverse(w, table)
    left = Multivector(x.dim, contract(np.broadcast_to(w.value.coeffs, x.coeffs.shape), x.coeffs, table))
    return Multivector(x.dim, contract(left.coeffs, np.broadcast_to(inv.coeffs, x.coeffs.shape), table))


def versor_action_matrix(w: Versor, table: CayleyTable) -> np.ndarray:
    """Matrix ``A`` with ``A @ x.coeffs == versor_action(w, x).coeffs``."""
    basis = Multivector(table.dim, np.eye(table.size))
    return versor_action(w, basis, table).coeffs.T


def rotation_matrix(w: Versor, table: CayleyTable) -> np.ndarray:
    """The n x n matrix the rotor induces on grade-1 coordinates."""
    idx = [1 << i for i in range(table.dim)]
    return versor_action_matrix(w, table)[np.ix_(idx, idx)]


def random_rotor(rng: np.random.Generator, table: CayleyTable, pairs: int = 2) -> Versor:
    """Product of ``2 * pairs`` random non-null unit vectors."""
    delta = table.metric.as_array()
    vecs = []
    while len(vecs) < 2 * pairs:
        v = rng.standard_normal(table.dim)
        if abs(v @ (delta * v)) > 1e-3:
            vecs.append(Multivector.vector(v))
    return make_versor(vecs, table)
