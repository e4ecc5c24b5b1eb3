"""Learnable symmetric metric and its diagonalising change of basis.

Convention: ``U`` holds eigenvectors as columns and ``M = U diag(lam) U^T``.
The change of coordinates applied to inputs is ``C = U^T``, which gives
``x^T M y == (C x)^T diag(lam) (C y)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .algebra import DiagonalMetric
from .errors import ConfigError, ConvergenceError, DimensionError, ShapeError

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
GAP_CLAMP = 1e-8
SIGN_TIE_RTOL = 1e-12

# Symmetrise gradients flowing into M. Only ever switched off by mutation tests.
SYMMETRIZE_GRADIENTS = True

OUTPUT_KINDS = ("point", "volume", "scalar", "probability")


class MetricMatrix:
    """Symmetric n x n array; symmetry is imposed on construction."""

    __slots__ = ("values",)

    def __init__(self, values):
        a = np.array(values, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ShapeError(f"metric must be square, got shape {a.shape}")
        upper = np.triu(a)
        a = upper + np.triu(a, 1).T
        a.setflags(write=False)
        self.values = a

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def offdiag_norm(self) -> float:
        return float(np.linalg.norm(self.values - np.diag(np.diag(self.values))))


def init_metric(q: DiagonalMetric, epsilon: float, seed: int) -> MetricMatrix:
    """``Q + eps * (R + R^T)`` with ``R ~ U[0, 1)`` from a seeded generator."""
    if epsilon < 0:
        raise ConfigError(f"epsilon must be non-negative, got {epsilon}")
    rng = np.random.default_rng(seed)
    r = rng.random((q.dim, q.dim))
    m = np.diag(q.as_array()) + epsilon * (r + r.T)
    return MetricMatrix(m)


@dataclass(frozen=True, eq=False)
class EigenDecomposition:
    eigenvalues: np.ndarray
    basis: np.ndarray

    @property
    def dim(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def change_of_coords(self) -> np.ndarray:
        return self.basis.T

    @property
    def det_c(self) -> float:
        # det of an orthogonal matrix; snapped to +-1.
        return 1.0 if np.linalg.det(self.basis) >= 0 else -1.0

    def diagonal_metric(self) -> DiagonalMetric:
        return DiagonalMetric(tuple(self.eigenvalues))


def _jacobi(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi sweeps; returns (diagonal, accumulated rotations)."""
    a = a.copy()
    n = a.shape[0]
    v = np.eye(n)
    scale = np.linalg.norm(a)
    threshold = JACOBI_TOL * scale
    offmask = ~np.eye(n, dtype=bool)
    off = float(np.linalg.norm(a[offmask]))
    for _ in range(JACOBI_MAX_SWEEPS):
        if off <= threshold:
            return np.diag(a).copy(), v
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                diff = a[q, q] - a[p, p]
                if abs(apq) * 1e150 < abs(diff):
                    # theta would overflow; t ~ 1 / (2 theta)
                    t = apq / diff
                else:
                    theta = diff / (2.0 * apq)
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
        off = float(np.linalg.norm(a[offmask]))
    if off <= threshold:
        return np.diag(a).copy(), v
    raise ConvergenceError(
        f"Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps (off-diagonal {off:.3e})"
    )


def _canonical_signs(u: np.ndarray) -> np.ndarray:
    out = u.copy()
    for j in range(u.shape[1]):
        col = np.abs(u[:, j])
        top = col.max()
        k = int(np.flatnonzero(col >= top * (1.0 - SIGN_TIE_RTOL))[0])
        if out[k, j] < 0:
            out[:, j] = -out[:, j]
    return out


def eigendecompose(m: MetricMatrix) -> EigenDecomposition:
    lam, u = _jacobi(m.values)
    order = np.argsort(lam, kind="stable")
    lam = lam[order]
    u = _canonical_signs(u[:, order])
    lam.setflags(write=False)
    u.setflags(write=False)
    return EigenDecomposition(lam, u)


def eigendecompose_backward(
    decomp: EigenDecomposition,
    grad_eigenvalues,
    grad_basis,
    symmetrize: bool | None = None,
) -> np.ndarray:
    """Gradient with respect to the symmetric input matrix.

    ``U (diag(g_lam) + F o (U^T g_U)) U^T`` with ``F_ij = 1 / (lam_j - lam_i)``
    off the diagonal; gaps below ``GAP_CLAMP`` are clamped, keeping ``F``
    antisymmetric.
    """
    lam = decomp.eigenvalues
    u = decomp.basis
    n = lam.shape[0]
    g_lam = np.zeros(n) if grad_eigenvalues is None else np.asarray(grad_eigenvalues, dtype=np.float64)
    g_u = np.zeros((n, n)) if grad_basis is None else np.asarray(grad_basis, dtype=np.float64)
    gap = lam[None, :] - lam[:, None]
    orient = np.sign(np.arange(n)[None, :] - np.arange(n)[:, None])
    gap = np.where(np.abs(gap) < GAP_CLAMP, GAP_CLAMP * orient, gap)
    f = np.zeros((n, n))
    off = ~np.eye(n, dtype=bool)
    f[off] = 1.0 / gap[off]
    inner = np.diag(g_lam) + f * (u.T @ g_u)
    g = u @ inner @ u.T
    if symmetrize is None:
        symmetrize = SYMMETRIZE_GRADIENTS
    if symmetrize:
        g = 0.5 * (g + g.T)
    return g


def transform_input(x, decomp: EigenDecomposition) -> np.ndarray:
    """Express points (last axis) in the eigenbasis: ``C x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != decomp.dim:
        raise DimensionError(f"point dim {x.shape[-1]} != metric dim {decomp.dim}")
    return x @ decomp.basis


def transform_output(y, kind: str, decomp: EigenDecomposition):
    if kind == "point":
        y = np.asarray(y, dtype=np.float64)
        if y.shape[-1] != decomp.dim:
            raise DimensionError(f"point dim {y.shape[-1]} != metric dim {decomp.dim}")
        return y @ decomp.basis.T
    if kind == "volume":
        return y / decomp.det_c
    if kind in ("scalar", "probability"):
        return y
    raise ConfigError(f"unknown output kind {kind!r}; expected one of {OUTPUT_KINDS}")


def transform_volume_input(v, decomp: EigenDecomposition):
    return decomp.det_c * v
