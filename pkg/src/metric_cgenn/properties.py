"""Executable property suite: every stated identity of the algebra, metric,
layers and model modules as a named, seeded, tolerance-checked case.

Cases register themselves against the invariants they cover; ``run_suite``
refuses to start if any listed invariant has no case. Failures are data:
each records its inputs, observed and expected values and tolerance.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import algebra
from . import autodiff as ad
from . import metric as metric_mod
from .algebra import DiagonalMetric, Multivector, blade_grades, contract, parse_blade
from .autodiff import Parameter, Tape
from .layers import AlgebraContext, GatedNonlinearity, GeometricProduct, Linear, Norm

SUITES = ("algebra", "metric", "layers", "model", "all")

EXACT_TOL = 1e-10
LINEAR_TOL = 1e-12
GRAD_TOL = 1e-4
EQUIV_TOL = 1e-5
LAYER_EQUIV_TOL = 1e-6
FD_STEP = 1e-6
MAX_STORED_FAILURES = 10

# Invariants each module promises; every id must be covered by a case.
INVARIANTS = {
    "algebra": (
        "associativity",
        "bilinearity",
        "grade1_identity",
        "reversal_antiautomorphism",
        "quadratic_form_vectors",
        "versor_action",
        "bruteforce_n2",
    ),
    "metric": (
        "init_symmetric_reproducible",
        "reconstruction",
        "quadratic_form_transfer",
        "anticommutation_transfer",
        "volume_identity",
        "inner_product_functoriality",
        "backward_fd",
        "round_trip",
        "functorial_composition",
        "equivariance_violation",
    ),
    "autodiff": ("op_gradcheck", "linearity", "determinism"),
    "layers": ("equivariance", "grade_separation", "gp_all_ones", "gradcheck"),
    "model": ("equivariance_pre", "equivariance_post_eps0", "reproducibility", "loss_decrease", "metric_symmetry"),
}

# Which invariant groups each suite executes, in order.
SUITE_GROUPS = {
    "algebra": ("algebra",),
    "metric": ("metric",),
    "layers": ("autodiff", "layers"),
    "model": ("model",),
}


# ---------------------------------------------------------------- reporting

def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


@dataclass
class CaseResult:
    name: str
    group: str
    covers: tuple
    checks: int = 0
    max_error: float = 0.0
    tolerance: float = 0.0
    failure_count: int = 0
    failures: list = field(default_factory=list)
    measurements: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.failure_count == 0

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "group": self.group,
            "covers": list(self.covers),
            "checks": self.checks,
            "max_error": self.max_error,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "failure_count": self.failure_count,
            "failures": self.failures,
            "measurements": self.measurements,
        }


@dataclass
class PropertyReport:
    suite: str
    seed: int
    trials: int
    cases: list = field(default_factory=list)

    @property
    def failures(self) -> list:
        return [f for c in self.cases for f in c.failures]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cases)

    @property
    def max_errors(self) -> dict:
        return {c.name: c.max_error for c in self.cases}

    @property
    def measurements(self) -> dict:
        return {c.name: c.measurements for c in self.cases if c.measurements}

    def to_dict(self) -> dict:
        return {
            "suite": self.suite,
            "seed": self.seed,
            "trials": self.trials,
            "passed": self.passed,
            "cases_run": len(self.cases),
            "failures": self.failures,
            "max_errors": self.max_errors,
            "measurements": self.measurements,
            "cases": [c.to_dict() for c in self.cases],
        }


class Recorder:
    """Collects checks for one case."""

    def __init__(self, result: CaseResult, rng: np.random.Generator, trials: int):
        self.result = result
        self.rng = rng
        self.trials = trials

    def check(self, error, tol, inputs=None, observed=None, expected=None):
        r = self.result
        error = float(error)
        r.checks += 1
        if not math.isnan(error):
            r.max_error = max(r.max_error, error)
        r.tolerance = max(r.tolerance, tol)
        if not error <= tol:
            r.failure_count += 1
            if len(r.failures) < MAX_STORED_FAILURES:
                r.failures.append({
                    "case": r.name,
                    "inputs": _jsonable(inputs),
                    "observed": _jsonable(observed),
                    "expected": _jsonable(expected),
                    "error": error if math.isfinite(error) else str(error),
                    "tolerance": tol,
                })

    def check_batch(self, errors, tol, inputs: dict, observed=None, expected=None):
        """Per-sample errors ``[T]``; failing samples store their own inputs."""
        errors = np.asarray(errors, dtype=np.float64)
        bad = np.flatnonzero(~(errors <= tol))
        r = self.result
        r.checks += errors.size
        finite = errors[~np.isnan(errors)]
        if finite.size:
            r.max_error = max(r.max_error, float(finite.max()))
        r.tolerance = max(r.tolerance, tol)
        r.failure_count += bad.size
        for i in bad[: MAX_STORED_FAILURES - len(r.failures)]:
            r.failures.append({
                "case": r.name,
                "inputs": {k: _jsonable(v[i]) for k, v in inputs.items()},
                "observed": None if observed is None else _jsonable(observed[i]),
                "expected": None if expected is None else _jsonable(expected[i]),
                "error": float(errors[i]),
                "tolerance": tol,
            })

    def measure(self, key, value):
        self.result.measurements[key] = _jsonable(value)


@dataclass(frozen=True)
class CaseSpec:
    name: str
    group: str
    covers: tuple
    fn: Callable


_CASES: list[CaseSpec] = []


def case(group: str, *covers: str):
    def wrap(fn):
        _CASES.append(CaseSpec(f"{group}.{fn.__name__.lstrip('_')}", group, covers, fn))
        return fn
    return wrap


def registered_cases() -> list:
    return list(_CASES)


def check_coverage():
    """Static registry check: every listed invariant and op kind has a case."""
    covered = {(c.group, inv) for c in _CASES for inv in c.covers}
    missing = [f"{g}.{inv}" for g, invs in INVARIANTS.items() for inv in invs if (g, inv) not in covered]
    built = _op_cases(np.random.default_rng(0))
    missing += [f"autodiff op {k}" for k in ad.op_kinds() if k not in built]
    if missing:
        raise RuntimeError(f"property registry does not cover: {', '.join(missing)}")


def _case_rng(seed: int, name: str) -> np.random.Generator:
    # per-case stream, so a case sees the same inputs in any suite
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def run_suite(name: str, seed: int = 0, trials: int = 100) -> PropertyReport:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; expected one of {SUITES}")
    if trials < 1:
        raise ValueError("trials must be at least 1")
    check_coverage()
    suites = [s for s in SUITES if s != "all"] if name == "all" else [name]
    report = PropertyReport(name, seed, trials)
    for s in suites:
        for group in SUITE_GROUPS[s]:
            for spec in _CASES:
                if spec.group == group:
                    report.cases.append(_run_case(spec, seed, trials))
    return report


def run_cases(names, seed: int = 0, trials: int = 100) -> PropertyReport:
    """Run selected cases by full name, e.g. ``"metric.reconstruction"``."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    by_name = {spec.name: spec for spec in _CASES}
    unknown = [n for n in names if n not in by_name]
    if unknown:
        raise ValueError(f"unknown property cases: {', '.join(unknown)}")
    report = PropertyReport("selected", seed, trials)
    report.cases = [_run_case(by_name[n], seed, trials) for n in names]
    return report


def _run_case(spec: CaseSpec, seed: int, trials: int) -> CaseResult:
    result = CaseResult(spec.name, spec.group, spec.covers)
    spec.fn(Recorder(result, _case_rng(seed, spec.name), trials))
    return result


# ---------------------------------------------------------------- helpers

def _inf(a, axis=-1):
    return np.max(np.abs(a), axis=axis)


def _signatures(n: int):
    return (
        ("euclidean", DiagonalMetric.euclidean(n)),
        ("minkowski", DiagonalMetric((1.0,) + (-1.0,) * (n - 1))),
    )


def _tables():
    for n in (2, 3, 4):
        for label, m in _signatures(n):
            # looked up through the module so a patched builder is honoured
            yield f"n={n},{label}", algebra.build_cayley_table(m)


def _vectors(v: np.ndarray, dim: int) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (1 << dim,))
    out[..., [1 << i for i in range(dim)]] = v
    return out


def _random_symmetric(rng, n):
    a = rng.standard_normal((n, n))
    return 0.5 * (a + a.T)


def _diag_table(decomp) -> algebra.CayleyTable:
    return algebra.build_cayley_table(decomp.diagonal_metric())


def _grad_error(fd, an) -> float:
    fd = np.asarray(fd, dtype=np.float64).ravel()
    an = np.asarray(an, dtype=np.float64).ravel()
    scale = max(np.max(np.abs(fd), initial=0.0), np.max(np.abs(an), initial=0.0), 1e-3)
    return float(np.max(np.abs(fd - an), initial=0.0) / scale)


def _directions(shape, symmetric: bool):
    if symmetric:
        n = shape[0]
        for i in range(n):
            for j in range(i, n):
                d = np.zeros(shape)
                d[i, j] = d[j, i] = 1.0
                yield d
        return
    for k in range(int(np.prod(shape))):
        d = np.zeros(int(np.prod(shape)))
        d[k] = 1.0
        yield d.reshape(shape)


def gradcheck(params, build, symmetric=(), h: float = FD_STEP) -> tuple[float, dict]:
    """Compare tape gradients against fourth-order central differences.

    The higher-order stencil keeps truncation error small where the norm
    denominator of a mixed-signature metric passes close to zero.

    ``build(tape)`` must return a scalar tensor and watch every parameter in
    ``params``. Parameters named in ``symmetric`` are symmetric matrices and
    are probed along symmetric directions only.
    """
    for p in params:
        p.zero_grad()
    tape = Tape()
    ad.backward(tape, build(tape))
    analytic = {p.name: p.grad.copy() for p in params}
    fd, an = [], []
    for p in params:
        base = p.value.copy()
        for d in _directions(base.shape, p.name in symmetric):
            f = []
            for k in (2, 1, -1, -2):
                p.value = base + k * h * d
                f.append(build(Tape()).item())
            fd.append((-f[0] + 8 * f[1] - 8 * f[2] + f[3]) / (12 * h))
            an.append(float(np.sum(analytic[p.name] * d)))
        p.value = base
    return _grad_error(fd, an), analytic


# ---------------------------------------------------------------- algebra

@case("algebra", "associativity")
def _associativity(rec: Recorder):
    for label, t in _tables():
        x, y, z = rec.rng.standard_normal((3, rec.trials, t.size))
        lhs = contract(contract(x, y, t), z, t)
        rhs = contract(x, contract(y, z, t), t)
        err = _inf(lhs - rhs) / (1 + _inf(x) * _inf(y) * _inf(z))
        rec.check_batch(err, EXACT_TOL, {"table": [label] * rec.trials, "x": x, "y": y, "z": z}, lhs, rhs)


@case("algebra", "bilinearity")
def _bilinearity(rec: Recorder):
    for label, t in _tables():
        x, x2, y = rec.rng.standard_normal((3, rec.trials, t.size))
        a, b = rec.rng.standard_normal((2, rec.trials, 1))
        scale = 1 + (np.abs(a[:, 0]) * _inf(x) + np.abs(b[:, 0]) * _inf(x2)) * _inf(y)
        left = contract(a * x + b * x2, y, t)
        left_ref = a * contract(x, y, t) + b * contract(x2, y, t)
        right = contract(y, a * x + b * x2, t)
        right_ref = a * contract(y, x, t) + b * contract(y, x2, t)
        err = np.maximum(_inf(left - left_ref), _inf(right - right_ref)) / scale
        rec.check_batch(err, LINEAR_TOL, {"table": [label] * rec.trials, "x": x, "x2": x2, "y": y})


@case("algebra", "grade1_identity")
def _grade1_identity(rec: Recorder):
    for label, t in _tables():
        n = t.dim
        delta = t.metric.as_array()
        v, w = rec.rng.standard_normal((2, rec.trials, n))
        mv, mw = Multivector(n, _vectors(v, n)), Multivector(n, _vectors(w, n))
        prod = algebra.geometric_product(mv, mw, t).coeffs
        ref = algebra.wedge(mv, mw).coeffs
        ref[..., 0] += np.sum(v * delta * w, axis=-1)
        err = _inf(prod - ref) / (1 + _inf(v) * _inf(w))
        rec.check_batch(err, LINEAR_TOL, {"table": [label] * rec.trials, "v": v, "w": w}, prod, ref)


@case("algebra", "reversal_antiautomorphism")
def _reversal(rec: Recorder):
    for label, t in _tables():
        x, y = rec.rng.standard_normal((2, rec.trials, t.size))
        rs = algebra.reversal_signs(t.dim)
        lhs = contract(x, y, t) * rs
        rhs = contract(y * rs, x * rs, t)
        err = _inf(lhs - rhs) / (1 + _inf(x) * _inf(y))
        rec.check_batch(err, EXACT_TOL, {"table": [label] * rec.trials, "x": x, "y": y}, lhs, rhs)


@case("algebra", "quadratic_form_vectors")
def _quadratic_form(rec: Recorder):
    for label, t in _tables():
        n = t.dim
        v = rec.rng.standard_normal((rec.trials, n))
        got = algebra.extended_quadratic_form(Multivector(n, _vectors(v, n)), t)
        want = np.sum(v * t.metric.as_array() * v, axis=-1)
        err = np.abs(got - want) / (1 + _inf(v) ** 2)
        rec.check_batch(err, LINEAR_TOL, {"table": [label] * rec.trials, "v": v}, got, want)


@case("algebra", "versor_action")
def _versor_action(rec: Recorder):
    rotors = min(rec.trials, 50)
    for label, t in _tables():
        n = t.dim
        grades = blade_grades(n)
        for _ in range(rotors):
            w = algebra.random_rotor(rec.rng, t)
            a = algebra.versor_action_matrix(w, t)
            x, y = rec.rng.standard_normal((2, 8, t.size))
            ax, ay = x @ a.T, y @ a.T
            lhs = contract(x, y, t) @ a.T
            rhs = contract(ax, ay, t)
            err = _inf(lhs - rhs) / (1 + _inf(ax) * _inf(ay))
            rec.check(err.max(), EXACT_TOL, {"table": label, "rotor": w.value.coeffs, "x": x[0], "y": y[0]})
            # grade preservation: the action matrix is block diagonal by grade
            leak = np.abs(a[grades[:, None] != grades[None, :]]).max(initial=0.0)
            rec.check(leak / (1 + np.abs(a).max()), EXACT_TOL, {"table": label, "rotor": w.value.coeffs})


_HAND_TABLES = {
    (1.0, 1.0): (
        ("1", "e1", "e2", "e1e2"),
        ("e1", "1", "e1e2", "e2"),
        ("e2", "-e1e2", "1", "-e1"),
        ("e1e2", "-e2", "e1", "-1"),
    ),
    (-1.0, 1.0): (
        ("1", "e1", "e2", "e1e2"),
        ("e1", "-1", "e1e2", "-e2"),
        ("e2", "-e1e2", "1", "-e1"),
        ("e1e2", "e2", "e1", "1"),
    ),
}


@case("algebra", "bruteforce_n2")
def _bruteforce_n2(rec: Recorder):
    for entries, rows in _HAND_TABLES.items():
        t = algebra.build_cayley_table(DiagonalMetric(entries))
        for a, row in enumerate(rows):
            for b, cell in enumerate(row):
                sign = -1.0 if cell.startswith("-") else 1.0
                want = (parse_blade(cell.lstrip("-")), sign)
                got = t.entry(a, b)
                rec.check(0.0 if got == want else 1.0, 0.0, {"metric": entries, "a": a, "b": b}, got, want)


# ---------------------------------------------------------------- metric

@case("metric", "init_symmetric_reproducible")
def _init_symmetric(rec: Recorder):
    for _ in range(min(rec.trials, 50)):
        n = int(rec.rng.integers(1, 9))
        q = DiagonalMetric(tuple(rec.rng.choice([-1.0, 1.0], n)))
        eps = float(rec.rng.uniform(0, 0.1))
        seed = int(rec.rng.integers(2**31))
        m1 = metric_mod.init_metric(q, eps, seed).values
        m2 = metric_mod.init_metric(q, eps, seed).values
        inputs = {"q": q.entries, "epsilon": eps, "seed": seed}
        rec.check(0.0 if np.array_equal(m1, m1.T) else 1.0, 0.0, inputs)
        rec.check(0.0 if np.array_equal(m1, m2) else 1.0, 0.0, inputs)


@case("metric", "reconstruction")
def _reconstruction(rec: Recorder):
    for n in (2, 3, 4, 8):
        for _ in range(rec.trials):
            m = _random_symmetric(rec.rng, n)
            d = metric_mod.eigendecompose(metric_mod.MetricMatrix(m))
            u, lam = d.basis, d.eigenvalues
            err = np.abs(u @ np.diag(lam) @ u.T - m).max() / (1 + np.abs(m).max())
            orth = np.abs(u.T @ u - np.eye(n)).max()
            rec.check(max(err, orth), EXACT_TOL, {"M": m})
            rec.check(0.0 if np.all(np.diff(lam) >= 0) else 1.0, 0.0, {"M": m}, lam)


def _proof_metrics(rec: Recorder):
    """The default perturbed metric at n = 3 plus random symmetric ones."""
    out = []
    for _ in range(rec.trials):
        seed = int(rec.rng.integers(2**31))
        out.append(("init n=3 eps=1e-3", metric_mod.init_metric(DiagonalMetric.euclidean(3), 1e-3, seed).values))
    for n in (2, 3, 4):
        for _ in range(max(1, rec.trials // 10)):
            out.append((f"random n={n}", _random_symmetric(rec.rng, n)))
    return out


@case("metric", "quadratic_form_transfer")
def _consistency(rec: Recorder):
    extra = [(f"random n={n}", _random_symmetric(rec.rng, n))
             for n in range(5, 9) for _ in range(max(1, rec.trials // 10))]
    for label, m in _proof_metrics(rec) + extra:
        n = m.shape[0]
        d = metric_mod.eigendecompose(metric_mod.MetricMatrix(m))
        x, y = rec.rng.standard_normal((2, 4, n))
        cx, cy = metric_mod.transform_input(x, d), metric_mod.transform_input(y, d)
        lhs = np.einsum("bi,ij,bj->b", x, m, y)
        rhs = np.sum(cx * d.eigenvalues * cy, axis=-1)
        zz = np.einsum("bi,ij,bj->b", x, m, x) - np.sum(cx * d.eigenvalues * cx, axis=-1)
        scale = 1 + np.abs(m).max() * _inf(x) * np.maximum(_inf(x), _inf(y))
        err = np.maximum(np.abs(lhs - rhs), np.abs(zz)) / scale
        rec.check(err.max(), EXACT_TOL, {"metric": label, "M": m, "x": x, "y": y})


def _anticommutator(cv, cw, t):
    return contract(cv, cw, t) + contract(cw, cv, t)


@case("metric", "anticommutation_transfer")
def _anticommutation_forward(rec: Recorder):
    """M-orthogonal pairs anticommute once mapped into Cl(V, Delta)."""
    for label, m in _proof_metrics(rec):
        n = m.shape[0]
        d = metric_mod.eigendecompose(metric_mod.MetricMatrix(m))
        t = _diag_table(d)
        v, w = rec.rng.standard_normal((2, n))
        vmv = v @ m @ v
        if abs(vmv) < 1e-6:
            continue
        w = w - (v @ m @ w) / vmv * v
        cv = _vectors(metric_mod.transform_input(v, d), n)
        cw = _vectors(metric_mod.transform_input(w, d), n)
        ac = _anticommutator(cv, cw, t)
        err = np.abs(ac).max() / (1 + np.abs(cv).max() * np.abs(cw).max())
        rec.check(err, EXACT_TOL, {"metric": label, "M": m, "v": v, "w": w}, ac, np.zeros_like(ac))


@case("metric", "anticommutation_transfer")
def _anticommutation_reverse(rec: Recorder):
    """Contrapositive converse: anticommuting after C iff M-orthogonal.

    Half the pairs are orthogonalised, half are left random; for each pair
    the near-zero status of both sides must agree.
    """
    for k, (label, m) in enumerate(_proof_metrics(rec)):
        n = m.shape[0]
        d = metric_mod.eigendecompose(metric_mod.MetricMatrix(m))
        t = _diag_table(d)
        v, w = rec.rng.standard_normal((2, n))
        vmv = v @ m @ v
        if k % 2 == 0 and abs(vmv) > 1e-6:
            w = w - (v @ m @ w) / vmv * v
        cv = _vectors(metric_mod.transform_input(v, d), n)
        cw = _vectors(metric_mod.transform_input(w, d), n)
        ac = _anticommutator(cv, cw, t)
        scale = 1 + np.abs(cv).max() * np.abs(cw).max()
        ortho = abs(v @ m @ w) <= 1e-9 * scale
        anti = np.abs(ac).max() <= 1e-9 * scale
        inputs = {"metric": label, "M": m, "v": v, "w": w}
        rec.check(0.0 if ortho == anti else 1.0, 0.0, inputs, bool(anti), bool(ortho))
        rec.check(abs(ac[0] - 2 * (v @ m @ w)) / scale, EXACT_TOL, inputs, ac[0], 2 * (v @ m @ w))


@case("metric", "volume_identity")
def _volume_identity(rec: Recorder):
    for label, m in _proof_metrics(rec):
        n = m.shape[0]
        d = metric_mod.eigendecompose(metric_mod.MetricMatrix(m))
        t = _diag_table(d)
        c = d.change_of_coords
        prod = _vectors(c[:, 0], n)
        for i in range(1, n):
            prod = contract(prod, _vectors(c[:, i], n), t)
        top = prod[(1 << n) - 1]
        rec.check(abs(top - d.det_c), EXACT_TOL, {"metric": label, "M": m}, top, d.det_c)


@case("metric", "inner_product_functoriality")
def _inner_product(rec: Recorder):
    for label, m in _proof_metrics(rec):
        n = m.shape[0]
        d = metric_mod.eigendecompose(metric_mod.MetricMatrix(m))
        t = _diag_table(d)
        v, w = rec.rng.standard_normal((2, n))
        cv = _vectors(metric_mod.transform_input(v, d), n)
        cw = _vectors(metric_mod.transform_input(w, d), n)
        got = contract(cv, cw, t)[0]
        want = v @ m @ w
        err = abs(got - want) / (1 + np.abs(m).max() * np.abs(v).max() * np.abs(w).max())
        rec.check(err, EXACT_TOL, {"metric": label, "M": m, "v": v, "w": w}, got, want)


def _well_separated(rng, n):
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = np.cumsum(rng.uniform(0.5, 1.5, n)) - rng.uniform(0, n)
    return (q * lam) @ q.T


@case("metric", "backward_fd")
def _eig_backward(rec: Recorder):
    for _ in range(min(rec.trials, 50)):
        n = int(rec.rng.integers(2, 5))
        m0 = _well_separated(rec.rng, n)
        g_lam, g_u = rec.rng.standard_normal(n), rec.rng.standard_normal((n, n))

        def loss(m):
            d = metric_mod.eigendecompose(metric_mod.MetricMatrix(m))
            return float(g_lam @ d.eigenvalues + np.sum(g_u * d.basis))

        d = metric_mod.eigendecompose(metric_mod.MetricMatrix(m0))
        g = metric_mod.eigendecompose_backward(d, g_lam, g_u)
        fd, an = [], []
        for dirn in _directions((n, n), True):
            fd.append((loss(m0 + FD_STEP * dirn) - loss(m0 - FD_STEP * dirn)) / (2 * FD_STEP))
            an.append(float(np.sum(g * dirn)))
        inputs = {"M": m0, "g_lam": g_lam, "g_U": g_u}
        rec.check(_grad_error(fd, an), GRAD_TOL, inputs, an, fd)
        # gradients of a symmetric argument must themselves be symmetric
        rec.check(np.abs(g - g.T).max(), 0.0, inputs, g, g.T)


@case("metric", "round_trip")
def _round_trip(rec: Recorder):
    for label, m in _proof_metrics(rec):
        n = m.shape[0]
        d = metric_mod.eigendecompose(metric_mod.MetricMatrix(m))
        x = rec.rng.standard_normal((4, n))
        back = metric_mod.transform_output(metric_mod.transform_input(x, d), "point", d)
        rec.check(np.abs(back - x).max() / (1 + np.abs(x).max()), EXACT_TOL, {"metric": label, "M": m, "x": x})


def outermorphism(a: np.ndarray) -> np.ndarray:
    """Extension of a linear map on vectors to all blades (wedge of column images)."""
    n = a.shape[0]
    size = 1 << n
    out = np.zeros((size, size))
    for mask in range(size):
        img = np.zeros(size)
        img[0] = 1.0
        for i in range(n):
            if mask >> i & 1:
                img = algebra.wedge(Multivector(n, img), Multivector(n, _vectors(a[:, i], n))).coeffs
        out[:, mask] = img
    return out


@case("metric", "functorial_composition")
def _functorial(rec: Recorder):
    for label, m in _proof_metrics(rec)[: max(1, min(rec.trials, 50))]:
        n = m.shape[0]
        d = metric_mod.eigendecompose(metric_mod.MetricMatrix(m))
        c = d.change_of_coords
        inputs = {"metric": label, "M": m}
        # F(C) F(C^-1) = id on every grade
        ident = outermorphism(c) @ outermorphism(d.basis)
        rec.check(np.abs(ident - np.eye(1 << n)).max(), EXACT_TOL, inputs)
        # F(AB) = F(A) F(B)
        a, b = rec.rng.standard_normal((2, n, n))
        comp = outermorphism(a) @ outermorphism(b)
        err = np.abs(comp - outermorphism(a @ b)).max() / (1 + np.abs(comp).max())
        rec.check(err, EXACT_TOL, {**inputs, "A": a, "B": b})
        # the implemented I/O grades: scalars, points, volumes
        s, v = rec.rng.standard_normal((2, 4))
        vol = metric_mod.transform_output(metric_mod.transform_volume_input(v, d), "volume", d)
        sca = metric_mod.transform_output(s, "scalar", d)
        rec.check(max(np.abs(vol - v).max(), np.abs(sca - s).max()), EXACT_TOL, {**inputs, "v": v, "s": s})
        rec.check(abs(outermorphism(c)[-1, -1] - d.det_c), EXACT_TOL, inputs)


# model helpers shared by the metric and model groups

def _model_configs():
    from .model import ModelConfig

    return (
        ("point", ModelConfig(output_kind="point", input_points=4, input_scalars=2, out_channels=2,
                              hidden_channels=6, num_blocks=2)),
        ("volume", ModelConfig(output_kind="volume", input_points=4, hidden_channels=6, num_blocks=2)),
        ("scalar", ModelConfig(output_kind="scalar", input_points=4, hidden_channels=6, num_blocks=2)),
    )


def _randomize(model, rng):
    for layer in model.layers:
        if isinstance(layer, (Norm, GatedNonlinearity)):
            for p in layer.parameters():
                p.value = rng.normal(0.0, 0.5, p.shape)


def _raw(cfg, rng, batch=4):
    from .tasks import RawInput

    return RawInput(
        points=rng.standard_normal((batch, cfg.input_points, 3)),
        scalars=rng.standard_normal((batch, cfg.input_scalars)) if cfg.input_scalars else None,
    )


def _equivariance_errors(model, rng, rotors, activated):
    """Per-rotor ``(abs error, output magnitude)`` for the model's output kind."""
    from .model import forward
    from .tasks import RawInput

    table = algebra.build_cayley_table(DiagonalMetric.euclidean(3))
    raw = _raw(model.config, rng)
    base = forward(model, raw, activated).output.data
    out = []
    for _ in range(rotors):
        r = algebra.rotation_matrix(algebra.random_rotor(rng, table), table)
        moved = RawInput(points=raw.points @ r.T, scalars=raw.scalars)
        got = forward(model, moved, activated).output.data
        want = base @ r.T if model.config.output_kind == "point" else base
        out.append((np.abs(got - want).max(), np.abs(base).max(), r))
    return out


@case("metric", "equivariance_violation")
def _equivariance_violation(rec: Recorder):
    from .model import CGENN

    rotors = min(rec.trials, 50)
    for eps in (0.0, 1e-3):
        worst = 0.0
        for kind, cfg in _model_configs()[:2]:
            cfg.epsilon = eps
            model = CGENN(cfg)
            _randomize(model, rec.rng)
            model.metric.value = np.array(metric_mod.init_metric(cfg.q, eps, cfg.seed).values)
            for err, mag, r in _equivariance_errors(model, rec.rng, rotors, activated=True):
                rel = err / max(mag, 1e-12)
                worst = max(worst, rel)
                if eps == 0.0:
                    rec.check(rel, EQUIV_TOL, {"kind": kind, "epsilon": eps, "rotation": r})
        rec.measure(f"max_relative_deviation_eps={eps:g}", worst)


# ---------------------------------------------------------------- autodiff

def _away_from(x, points, margin=1e-2):
    for p in points:
        x = np.where(np.abs(x - p) < margin, p + np.copysign(margin, x - p) * 2, x)
    return x


def _weighted(out, w):
    return (out * w).sum()


def _op_cases(rng):
    """``kind -> (params, build, symmetric)`` with a scalar loss per op."""
    p = lambda name, shape, lo=-1.0, hi=1.0: Parameter(name, rng.uniform(lo, hi, shape))  # noqa: E731
    cases = {}

    a, b = p("a", (2, 3)), p("b", (1, 3))
    w = rng.standard_normal((2, 3))
    cases["add"] = ([a, b], lambda t: _weighted(t.watch(a) + t.watch(b), w), ())
    cases["sub"] = ([a, b], lambda t: _weighted(t.watch(a) - t.watch(b), w), ())
    cases["mul"] = ([a, b], lambda t: _weighted(t.watch(a) * t.watch(b), w), ())
    cases["scale"] = ([a], lambda t: _weighted(t.watch(a) * 2.5, w), ())

    m1, m2 = p("m1", (2, 3, 4)), p("m2", (4, 5))
    w2 = rng.standard_normal((2, 3, 5))
    cases["matmul"] = ([m1, m2], lambda t: _weighted(t.watch(m1) @ t.watch(m2), w2), ())
    e1, e2 = p("e1", (3, 4)), p("e2", (2, 4, 5))
    w3 = rng.standard_normal((2, 3, 5))
    cases["einsum"] = ([e1, e2], lambda t: _weighted(ad.einsum("ij,bjk->bik", t.watch(e1), t.watch(e2)), w3), ())

    s = p("s", (3, 4))
    ws = rng.standard_normal((3, 1))
    cases["sum"] = ([s], lambda t: _weighted(t.watch(s).sum(axis=1, keepdims=True), ws), ())
    cases["mean"] = ([s], lambda t: _weighted(t.watch(s).mean(axis=1, keepdims=True), ws), ())
    w4 = rng.standard_normal((3, 4))
    cases["sigmoid"] = ([s], lambda t: _weighted(ad.sigmoid(t.watch(s) * 3.0), w4), ())
    r = Parameter("r", _away_from(rng.uniform(-1, 1, (3, 4)), [0.0]))
    cases["relu"] = ([r], lambda t: _weighted(ad.relu(t.watch(r)), w4), ())
    pos = p("pos", (3, 4), 0.5, 2.0)
    cases["power"] = ([pos], lambda t: _weighted(t.watch(pos) ** 3 + t.watch(pos) ** -1.0, w4), ())
    cases["log"] = ([pos], lambda t: _weighted(ad.log(t.watch(pos)), w4), ())
    cl = Parameter("cl", _away_from(rng.uniform(-1, 1, (3, 4)), [-0.3, 0.0, 0.3]))
    cases["clamp_abs"] = ([cl], lambda t: _weighted(ad.clamp_abs(t.watch(cl), 0.3), w4), ())

    c1, c2 = p("c1", (2, 3)), p("c2", (2, 2))
    w5 = rng.standard_normal((2, 5))
    cases["concat"] = ([c1, c2], lambda t: _weighted(ad.concat([t.watch(c1), t.watch(c2)], axis=1), w5), ())
    w6 = rng.standard_normal((3, 2))
    cases["slice"] = ([s], lambda t: _weighted(t.watch(s)[:, [0, 2]], w6), ())
    w7 = rng.standard_normal((4, 3))
    cases["transpose"] = ([s], lambda t: _weighted(t.watch(s).T, w7), ())
    w8 = rng.standard_normal((2, 6))
    cases["reshape"] = ([s], lambda t: _weighted(t.watch(s).reshape(2, 6), w8), ())

    dl = Parameter("delta", rng.choice([-1.0, 1.0], 3) * rng.uniform(0.5, 1.5, 3))
    w9 = rng.standard_normal(8)
    cases["blade_metric"] = ([dl], lambda t: _weighted(ad.blade_metric(t.watch(dl)), w9), ())
    x1, x2 = p("x1", (2, 3, 8)), p("x2", (2, 3, 8))
    phi = p("phi", (3, 4, 4, 4))
    w10 = rng.standard_normal((2, 3, 8))
    cases["cayley"] = (
        [x1, x2, phi, dl],
        lambda t: _weighted(ad.cayley(t.watch(x1), t.watch(x2), t.watch(phi), t.watch(dl)), w10),
        (),
    )

    em = Parameter("M", _well_separated(rng, 3))
    wl, wu = rng.standard_normal(3), rng.standard_normal((3, 3))

    def eig_loss(t):
        lam, u = ad.eig(t.watch(em))
        return _weighted(lam, wl) + _weighted(u, wu)

    cases["eig"] = ([em], eig_loss, ("M",))
    return cases


@case("autodiff", "op_gradcheck")
def _op_gradcheck(rec: Recorder):
    for _ in range(min(rec.trials, 50)):
        for kind, (params, build, sym) in _op_cases(rec.rng).items():
            err, _ = gradcheck(params, build, symmetric=sym)
            rec.check(err, GRAD_TOL, {"op": kind, **{q.name: q.value for q in params}})


@case("autodiff", "op_gradcheck")
def _loss_gradcheck(rec: Recorder):
    from .model import loss_fn

    for _ in range(min(rec.trials, 50)):
        pred = Parameter("pred", rec.rng.uniform(0.05, 0.95, (4, 2)))
        target = rec.rng.uniform(0, 1, (4, 2))
        for kind in ("volume", "probability"):
            err, _ = gradcheck([pred], lambda t, k=kind: loss_fn(t.watch(pred), target, k))
            rec.check(err, GRAD_TOL, {"loss": kind, "pred": pred.value, "target": target})


@case("autodiff", "linearity", "determinism")
def _linearity(rec: Recorder):
    for _ in range(min(rec.trials, 50)):
        x = Parameter("x", rec.rng.standard_normal((3, 4)))
        w1, w2 = rec.rng.standard_normal((2, 3, 4))

        def grads(build):
            x.zero_grad()
            t = Tape()
            ad.backward(t, build(t))
            return x.grad.copy()

        f1 = lambda t: _weighted(ad.sigmoid(t.watch(x)), w1)  # noqa: E731
        f2 = lambda t: _weighted(t.watch(x) * t.watch(x), w2)  # noqa: E731
        both = grads(lambda t: f1(t) + f2(t))
        err = np.abs(both - (grads(f1) + grads(f2))).max() / (1 + np.abs(both).max())
        rec.check(err, EXACT_TOL, {"x": x.value})
        again = grads(lambda t: f1(t) + f2(t))
        rec.check(0.0 if np.array_equal(both, again) else 1.0, 0.0, {"x": x.value})


# ---------------------------------------------------------------- layers

def _layer_set(rng, cin, cout, n):
    lin = Linear("lin", cin, cout, n, rng)
    gp = GeometricProduct("gp", cout, n, rng)
    norm = Norm("norm", n)
    norm.a.value = rng.normal(0, 1, norm.a.shape)
    gate = GatedNonlinearity("gate", cout, n)
    gate.u.value = rng.normal(0, 1, gate.u.shape)
    gate.b.value = rng.normal(0, 1, gate.b.shape)
    return lin, gp, norm, gate


@case("layers", "equivariance")
def _layer_equivariance(rec: Recorder):
    n = 3
    for _ in range(min(rec.trials, 50)):
        delta = rec.rng.uniform(0.5, 2.0, n)
        table = algebra.build_cayley_table(DiagonalMetric(tuple(delta)))
        a = algebra.versor_action_matrix(algebra.random_rotor(rec.rng, table), table)
        layers = _layer_set(rec.rng, 3, 3, n)
        x = rec.rng.standard_normal((4, 3, 8))
        t = Tape()
        ctx = AlgebraContext(t, n, t.constant(delta))
        lin, gp, norm, gate = layers
        rx = x @ a.T
        pairs = {
            "linear": (lin(t.constant(rx), ctx), lin(t.constant(x), ctx)),
            "geometric_product": (gp(t.constant(rx), t.constant(rx[:, ::-1]), ctx),
                                  gp(t.constant(x), t.constant(x[:, ::-1]), ctx)),
            "norm": (norm(t.constant(rx), ctx), norm(t.constant(x), ctx)),
            "nonlinear": (gate(t.constant(rx), ctx), gate(t.constant(x), ctx)),
        }
        for kind, (moved, base) in pairs.items():
            want = base.data @ a.T
            err = np.abs(moved.data - want).max() / (1 + np.abs(base.data).max())
            rec.check(err, LAYER_EQUIV_TOL, {"layer": kind, "delta": delta, "x": x[0]})


@case("layers", "grade_separation")
def _grade_separation(rec: Recorder):
    for _ in range(min(rec.trials, 50)):
        n = int(rec.rng.integers(2, 4))
        grades = blade_grades(n)
        delta = rec.rng.choice([-1.0, 1.0], n) * rec.rng.uniform(0.5, 1.5, n)
        lin, _, norm, gate = _layer_set(rec.rng, 3, 3, n)
        x = rec.rng.standard_normal((2, 3, 1 << n))
        for k in range(n + 1):
            x2 = x.copy()
            x2[..., grades == k] = rec.rng.standard_normal(x2[..., grades == k].shape)
            t = Tape()
            ctx = AlgebraContext(t, n, t.constant(delta))
            for kind, layer in (("linear", lin), ("norm", norm), ("nonlinear", gate)):
                y1 = layer(t.constant(x), ctx).data
                y2 = layer(t.constant(x2), ctx).data
                leak = np.abs((y1 - y2)[..., grades != k]).max(initial=0.0)
                rec.check(leak, 0.0, {"layer": kind, "grade": k, "delta": delta})


@case("layers", "gp_all_ones")
def _gp_all_ones(rec: Recorder):
    for _ in range(min(rec.trials, 50)):
        n = int(rec.rng.integers(1, 5))
        delta = rec.rng.choice([-1.0, 1.0], n) * rec.rng.uniform(0.5, 1.5, n)
        table = algebra.build_cayley_table(DiagonalMetric(tuple(delta)))
        gp = GeometricProduct("gp", 2, n)
        x1, x2 = rec.rng.standard_normal((2, 3, 2, 1 << n))
        t = Tape()
        got = gp(t.constant(x1), t.constant(x2), AlgebraContext(t, n, t.constant(delta))).data
        want = contract(x1, x2, table)
        err = np.abs(got - want).max() / (1 + np.abs(x1).max() * np.abs(x2).max())
        rec.check(err, LINEAR_TOL, {"delta": delta, "x1": x1[0], "x2": x2[0]})


@case("layers", "gradcheck")
def _layer_gradcheck(rec: Recorder):
    for _ in range(min(rec.trials, 50)):
        n = int(rec.rng.integers(2, 4))
        size = 1 << n
        lin, gp, norm, gate = _layer_set(rec.rng, 2, 2, n)
        delta = Parameter("delta", rec.rng.choice([-1.0, 1.0], n) * rec.rng.uniform(0.5, 1.5, n))
        x = Parameter("x", rec.rng.standard_normal((2, 2, size)))
        x2 = Parameter("x2", rec.rng.standard_normal((2, 2, size)))
        w = rec.rng.standard_normal((2, 2, size))

        def ctx_of(t):
            return AlgebraContext(t, n, t.watch(delta))

        builds = {
            "linear": ([lin.weights, x, delta], lambda t: _weighted(lin(t.watch(x), ctx_of(t)), w)),
            "geometric_product": (
                [gp.weights, x, x2, delta],
                lambda t: _weighted(gp(t.watch(x), t.watch(x2), ctx_of(t)), w),
            ),
            "norm": ([norm.a, x, delta], lambda t: _weighted(norm(t.watch(x), ctx_of(t)), w)),
            "nonlinear": ([gate.u, gate.b, x, delta], lambda t: _weighted(gate(t.watch(x), ctx_of(t)), w)),
        }
        for kind, (params, build) in builds.items():
            err, _ = gradcheck(params, build)
            rec.check(err, GRAD_TOL, {"layer": kind, "dim": n, "delta": delta.value, "x": x.value})


# ---------------------------------------------------------------- model

def _model_equivariance(rec: Recorder, activated: bool):
    from .model import CGENN

    rotors = min(rec.trials, 50)
    for kind, cfg in _model_configs():
        cfg.epsilon = 0.0
        model = CGENN(cfg)
        _randomize(model, rec.rng)
        if activated:
            model.metric.value = np.array(metric_mod.init_metric(cfg.q, 0.0, cfg.seed).values)
        for err, mag, r in _equivariance_errors(model, rec.rng, rotors, activated):
            rec.check(err / (1 + mag), EQUIV_TOL, {"kind": kind, "activated": activated, "rotation": r})


@case("model", "equivariance_pre")
def _equivariance_pre(rec: Recorder):
    _model_equivariance(rec, activated=False)


@case("model", "equivariance_post_eps0")
def _equivariance_post(rec: Recorder):
    _model_equivariance(rec, activated=True)


def _short_run(steps, fraction, count=64, hidden=4, seed=0, data_seed=5, on_step=None):
    from .model import CGENN, ModelConfig, TrainConfig, new_state
    from .runner import training_steps
    from .tasks import gen_signed_volume

    data = gen_signed_volume(count, data_seed)
    model = CGENN(ModelConfig(hidden_channels=hidden, num_blocks=2, seed=seed))
    tc = TrainConfig(steps=steps, batch_size=16, metric_activation_fraction=fraction, seed=seed)
    state = new_state(tc)
    losses = []
    for _, loss in training_steps(model, state, tc, data):
        losses.append(loss)
        if on_step:
            on_step(model, state)
    return model, losses


@case("model", "reproducibility")
def _reproducibility(rec: Recorder):
    seed = int(rec.rng.integers(1000))
    m1, l1 = _short_run(20, 0.5, seed=seed)
    m2, l2 = _short_run(20, 0.5, seed=seed)
    same = l1 == l2 and all(np.array_equal(a.value, b.value) for a, b in zip(m1.parameters(), m2.parameters()))
    rec.check(0.0 if same else 1.0, 0.0, {"seed": seed}, l1, l2)


@case("model", "metric_symmetry")
def _metric_symmetry(rec: Recorder):
    seed = int(rec.rng.integers(1000))
    worst = []

    def probe(model, state):
        m = model.metric.value
        worst.append(float(np.abs(m - m.T).max()) if state.metric_activated else 0.0)

    _short_run(25, 0.0, seed=seed, on_step=probe)
    rec.check(max(worst), 0.0, {"seed": seed, "steps": 25})


LOSS_DECREASE_STEPS = 800


@case("model", "loss_decrease")
def _loss_decrease(rec: Recorder):
    """Desk signed-volume setup (1000 samples, defaults), shortened run.

    The full 5000-step run is an acceptance test; 800 steps already clear the
    same 1% bound and keep the suite fast.
    """
    from .model import CGENN, ModelConfig, TrainConfig, evaluate, new_state
    from .runner import training_steps
    from .tasks import gen_signed_volume

    data = gen_signed_volume(1000, 42)
    model = CGENN(ModelConfig())
    tc = TrainConfig(steps=LOSS_DECREASE_STEPS)
    state = new_state(tc)
    initial = evaluate(model, state, data)["loss"]
    for _ in training_steps(model, state, tc, data):
        pass
    final = evaluate(model, state, data)["loss"]
    rec.measure("initial_loss", initial)
    rec.measure("final_loss", final)
    rec.check(final / initial, 0.01, {"steps": LOSS_DECREASE_STEPS, "samples": 1000}, final, 0.01 * initial)
