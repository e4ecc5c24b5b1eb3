"""Synthetic signed-volume and charged n-body datasets.

Every sample is a pure function of ``(seed, index)``: each draws from its own
``SeedSequence([seed, index, attempt])`` substream, so generation can be
split or parallelised without changing the output.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, GenerationStallError

TASKS = ("signed-volume", "nbody")

NBODY_PARTICLES = 5
NBODY_SOFTENING = 0.1
NBODY_DT = 1e-3
NBODY_STEPS = 1000
NBODY_BOUND = 50.0
MAX_REGENERATIONS = 1000


def _substream(seed: int, index: int, attempt: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index, attempt]))


def signed_volume(points) -> np.ndarray:
    """``det([p1 - p0, p2 - p0, p3 - p0]) / 6`` over the last two axes."""
    p = np.asarray(points, dtype=np.float64)
    edges = p[..., 1:, :] - p[..., :1, :]
    return np.linalg.det(edges) / 6.0


@dataclass
class RawInput:
    """Model input in the algebra's typing: points, scalars, volumes."""

    points: np.ndarray | None = None
    scalars: np.ndarray | None = None
    volumes: np.ndarray | None = None

    @property
    def batch_size(self) -> int:
        for a in (self.points, self.scalars, self.volumes):
            if a is not None:
                return a.shape[0]
        return 0


@dataclass
class SignedVolumeDataset:
    points: np.ndarray   # [N, 4, 3]
    target: np.ndarray   # [N]

    task = "signed-volume"
    dim = 3
    output_kind = "volume"
    out_channels = 1
    layout = {"points": 4, "scalars": 0, "volumes": 0}

    def __len__(self):
        return self.points.shape[0]

    def subset(self, idx) -> "SignedVolumeDataset":
        return SignedVolumeDataset(self.points[idx], self.target[idx])

    def raw(self) -> RawInput:
        centered = self.points - self.points.mean(axis=1, keepdims=True)
        return RawInput(points=centered)

    def targets(self) -> np.ndarray:
        return self.target[:, None]

    def offset(self) -> np.ndarray:
        return np.zeros((len(self), 1))

    def records(self):
        for p, t in zip(self.points, self.target):
            yield {"points": p.tolist(), "target": float(t)}


@dataclass
class NBodyDataset:
    pos: np.ndarray         # [N, 5, 3]
    vel: np.ndarray         # [N, 5, 3]
    charge: np.ndarray      # [N, 5]
    target_pos: np.ndarray  # [N, 5, 3]

    task = "nbody"
    dim = 3
    output_kind = "point"
    out_channels = NBODY_PARTICLES
    layout = {"points": 2 * NBODY_PARTICLES, "scalars": NBODY_PARTICLES, "volumes": 0}

    def __len__(self):
        return self.pos.shape[0]

    def subset(self, idx) -> "NBodyDataset":
        return NBodyDataset(self.pos[idx], self.vel[idx], self.charge[idx], self.target_pos[idx])

    def raw(self) -> RawInput:
        return nbody_features(self)

    def targets(self) -> np.ndarray:
        return self.target_pos

    def offset(self) -> np.ndarray:
        # the model predicts a displacement from the input position
        return self.pos

    def records(self):
        for p, v, q, t in zip(self.pos, self.vel, self.charge, self.target_pos):
            yield {"pos": p.tolist(), "vel": v.tolist(), "charge": q.tolist(), "target_pos": t.tolist()}


def nbody_features(sample: NBodyDataset) -> RawInput:
    """Centered positions and velocities as points, charges as scalars."""
    centered = sample.pos - sample.pos.mean(axis=-2, keepdims=True)
    points = np.concatenate([centered, sample.vel], axis=-2)
    return RawInput(points=points, scalars=np.array(sample.charge, dtype=np.float64))


def gen_signed_volume(count: int, seed: int) -> SignedVolumeDataset:
    if count < 1:
        raise ConfigError("count must be at least 1")
    pts = np.stack([_substream(seed, i).standard_normal((4, 3)) for i in range(count)])
    return SignedVolumeDataset(pts, signed_volume(pts))


def nbody_accelerations(pos, charge, softening: float = NBODY_SOFTENING) -> np.ndarray:
    """Pairwise Coulomb-like accelerations for unit masses; batched over leading axes.

    ``F_ij = q_i q_j (x_i - x_j) / (|x_i - x_j|^2 + s^2)^(3/2)``.
    """
    diff = pos[..., :, None, :] - pos[..., None, :, :]
    r2 = np.sum(diff * diff, axis=-1) + softening * softening
    n = pos.shape[-2]
    eye = np.eye(n, dtype=bool)
    r2 = np.where(eye, 1.0, r2)
    inv = np.where(eye, 0.0, r2 ** -1.5)
    qq = charge[..., :, None] * charge[..., None, :]
    return np.sum((qq * inv)[..., None] * diff, axis=-2)


def leapfrog(pos, vel, charge, dt: float, steps: int, softening: float = NBODY_SOFTENING):
    """Kick-drift-kick integration; returns final positions and velocities."""
    pos = np.array(pos, dtype=np.float64)
    vel = np.array(vel, dtype=np.float64)
    acc = nbody_accelerations(pos, charge, softening)
    for _ in range(steps):
        vel = vel + 0.5 * dt * acc
        pos = pos + dt * vel
        acc = nbody_accelerations(pos, charge, softening)
        vel = vel + 0.5 * dt * acc
    return pos, vel


def _nbody_initial(seed: int, index: int, attempt: int):
    rng = _substream(seed, index, attempt)
    pos = rng.normal(0.0, 1.0, (NBODY_PARTICLES, 3))
    vel = rng.normal(0.0, 0.5, (NBODY_PARTICLES, 3))
    charge = rng.choice([-1.0, 1.0], NBODY_PARTICLES)
    return pos, vel, charge


def gen_nbody(count: int, seed: int, dt: float = NBODY_DT, steps_sim: int = NBODY_STEPS) -> NBodyDataset:
    if count < 1:
        raise ConfigError("count must be at least 1")
    if dt <= 0 or steps_sim < 1:
        raise ConfigError("dt must be positive and steps_sim at least 1")
    attempts = np.zeros(count, dtype=np.int64)
    pos = np.empty((count, NBODY_PARTICLES, 3))
    vel = np.empty_like(pos)
    charge = np.empty((count, NBODY_PARTICLES))
    final = np.empty_like(pos)
    todo = np.arange(count)
    while todo.size:
        for i in todo:
            pos[i], vel[i], charge[i] = _nbody_initial(seed, int(i), int(attempts[i]))
        end, _ = leapfrog(pos[todo], vel[todo], charge[todo], dt, steps_sim)
        bad = ~np.all(np.isfinite(end) & (np.abs(end) <= NBODY_BOUND), axis=(1, 2))
        final[todo[~bad]] = end[~bad]
        todo = todo[bad]
        attempts[todo] += 1
        if todo.size and attempts[todo].max() > MAX_REGENERATIONS:
            raise GenerationStallError("more than 1000 consecutive regenerations for one sample")
    return NBodyDataset(pos, vel, charge, final)


def generate(task: str, count: int, seed: int):
    if task == "signed-volume":
        return gen_signed_volume(count, seed)
    if task == "nbody":
        return gen_nbody(count, seed)
    raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")


def write_jsonl(dataset, path) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with path.open("w") as fh:
        for rec in dataset.records():
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
            n += 1
    return n


def _matrix(rec, key, rows, cols, lineno):
    try:
        a = np.array(rec[key], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"line {lineno}: bad or missing field {key!r}") from exc
    expected = (rows,) if cols is None else (rows, cols)
    if a.shape != expected:
        raise DataFormatError(f"line {lineno}: field {key!r} has shape {a.shape}, expected {expected}")
    if not np.all(np.isfinite(a)):
        raise DataFormatError(f"line {lineno}: field {key!r} contains non-finite values")
    return a


def read_jsonl(path, task: str | None = None):
    """Load a dataset file; the task is inferred from the record keys if not given."""
    recs = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                recs.append((lineno, json.loads(line)))
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"line {lineno}: invalid JSON") from exc
    if not recs:
        raise DataFormatError(f"{path}: no records")
    if task is None:
        task = "nbody" if "pos" in recs[0][1] else "signed-volume"
    if task == "signed-volume":
        pts = np.stack([_matrix(r, "points", 4, 3, ln) for ln, r in recs])
        tgt = np.array([_matrix({"t": [r.get("target")]}, "t", 1, None, ln)[0] for ln, r in recs])
        return SignedVolumeDataset(pts, tgt)
    if task == "nbody":
        n = NBODY_PARTICLES
        pos = np.stack([_matrix(r, "pos", n, 3, ln) for ln, r in recs])
        vel = np.stack([_matrix(r, "vel", n, 3, ln) for ln, r in recs])
        charge = np.stack([_matrix(r, "charge", n, None, ln) for ln, r in recs])
        tgt = np.stack([_matrix(r, "target_pos", n, 3, ln) for ln, r in recs])
        return NBodyDataset(pos, vel, charge, tgt)
    raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")


def kinetic_energy(vel) -> float:
    return 0.5 * float(np.sum(np.asarray(vel) ** 2))


def potential_energy(pos, charge, softening: float = NBODY_SOFTENING) -> float:
    pos = np.asarray(pos)
    e = 0.0
    n = pos.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            r = math.sqrt(float(np.sum((pos[i] - pos[j]) ** 2)) + softening * softening)
            e += charge[i] * charge[j] / r
    return e
