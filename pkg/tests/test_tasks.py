import json

import numpy as np
import pytest

from metric_cgenn import tasks
from metric_cgenn.errors import ConfigError, DataFormatError, GenerationStallError
from metric_cgenn.tasks import (
    gen_nbody,
    gen_signed_volume,
    kinetic_energy,
    leapfrog,
    nbody_accelerations,
    potential_energy,
    read_jsonl,
    signed_volume,
    write_jsonl,
)

SIMPLEX = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])


def random_rotation(rng, det=1.0):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) * det < 0:
        q[:, 0] = -q[:, 0]
    return q


def test_signed_volume_examples():
    assert signed_volume(SIMPLEX) == pytest.approx(1 / 6, abs=1e-15)
    swapped = SIMPLEX[[0, 2, 1, 3]]
    assert signed_volume(swapped) == pytest.approx(-1 / 6, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_signed_volume_under_orthogonal_maps(seed):
    rng = np.random.default_rng(seed)
    p = rng.standard_normal((4, 3))
    r = random_rotation(rng)
    shift = rng.standard_normal(3)
    assert abs(signed_volume(p @ r.T + shift) - signed_volume(p)) <= 1e-10
    refl = random_rotation(rng, det=-1.0)
    assert abs(signed_volume(p @ refl.T) + signed_volume(p)) <= 1e-10


def test_generation_is_deterministic_and_prefix_stable():
    a = gen_signed_volume(20, 3)
    b = gen_signed_volume(20, 3)
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_array_equal(gen_signed_volume(5, 3).points, a.points[:5])
    assert not np.array_equal(gen_signed_volume(5, 4).points, a.points[:5])
    np.testing.assert_allclose(a.target, signed_volume(a.points), rtol=0, atol=0)
    with pytest.raises(ConfigError):
        gen_signed_volume(0, 1)
    with pytest.raises(ConfigError):
        tasks.generate("qm9", 3, 0)


def _nbody_state(seed):
    rng = np.random.default_rng(seed)
    return rng.normal(0, 1, (5, 3)), rng.normal(0, 0.5, (5, 3)), rng.choice([-1.0, 1.0], 5)


def test_accelerations_sum_to_zero():
    pos, _, q = _nbody_state(0)
    acc = nbody_accelerations(pos, q)
    np.testing.assert_allclose(acc.sum(axis=0), 0.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_momentum_is_conserved(seed):
    pos, vel, q = _nbody_state(seed)
    _, v1 = leapfrog(pos, vel, q, 1e-3, 1000)
    np.testing.assert_allclose(v1.sum(axis=0), vel.sum(axis=0), atol=1e-8)


def test_simulation_commutes_with_mirror_and_translation():
    pos, vel, q = _nbody_state(1)
    p1, v1 = leapfrog(pos, vel, q, 1e-3, 500)
    mirror = np.diag([-1.0, 1.0, 1.0])
    p2, v2 = leapfrog(pos @ mirror, vel @ mirror, q, 1e-3, 500)
    np.testing.assert_allclose(p2, p1 @ mirror, atol=1e-10)
    np.testing.assert_allclose(v2, v1 @ mirror, atol=1e-10)
    shift = np.array([3.0, -2.0, 0.5])
    p3, _ = leapfrog(pos + shift, vel, q, 1e-3, 500)
    np.testing.assert_allclose(p3, p1 + shift, atol=1e-8)


@pytest.mark.parametrize("seed", [0, 2, 4])
def test_energy_drift_unsoftened(seed):
    pos, vel, q = _nbody_state(seed)
    e0 = kinetic_energy(vel) + potential_energy(pos, q, 0.0)
    p1, v1 = leapfrog(pos, vel, q, 1e-4, 1000, softening=0.0)
    e1 = kinetic_energy(v1) + potential_energy(p1, q, 0.0)
    assert abs(e1 - e0) <= 0.01 * abs(e0)


def test_nbody_generation_is_deterministic():
    a = gen_nbody(4, 9, steps_sim=50)
    b = gen_nbody(4, 9, steps_sim=50)
    for f in ("pos", "vel", "charge", "target_pos"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    assert np.all(np.isin(a.charge, [-1.0, 1.0]))
    end, _ = leapfrog(a.pos, a.vel, a.charge, tasks.NBODY_DT, 50)
    np.testing.assert_array_equal(end, a.target_pos)


def test_unbounded_samples_are_regenerated(monkeypatch):
    ref = gen_nbody(6, 1, steps_sim=20)
    monkeypatch.setattr(tasks, "NBODY_BOUND", float(np.abs(ref.target_pos).max(axis=(1, 2))[2]) - 1e-9)
    ds = gen_nbody(6, 1, steps_sim=20)
    assert np.all(np.abs(ds.target_pos) <= tasks.NBODY_BOUND)
    assert not np.array_equal(ds.pos, ref.pos)
    monkeypatch.setattr(tasks, "NBODY_BOUND", 1e-6)
    monkeypatch.setattr(tasks, "MAX_REGENERATIONS", 3)
    with pytest.raises(GenerationStallError):
        gen_nbody(2, 1, steps_sim=5)


@pytest.mark.parametrize("task", tasks.TASKS)
def test_jsonl_round_trip(tmp_path, task):
    ds = gen_signed_volume(7, 2) if task == "signed-volume" else gen_nbody(3, 2, steps_sim=10)
    path = tmp_path / "d.jsonl"
    assert write_jsonl(ds, path) == len(ds)
    back = read_jsonl(path)
    assert back.task == task
    for a, b in zip(ds.records(), back.records()):
        assert a == b


def test_bad_records_raise(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text("{not json}\n")
    with pytest.raises(DataFormatError):
        read_jsonl(path)
    path.write_text(json.dumps({"points": [[0, 0, 0]] * 3, "target": 1.0}) + "\n")
    with pytest.raises(DataFormatError):
        read_jsonl(path)
    path.write_text(json.dumps({"points": [[0, 0, 0]] * 4}) + "\n")
    with pytest.raises(DataFormatError):
        read_jsonl(path)
    path.write_text("\n")
    with pytest.raises(DataFormatError):
        read_jsonl(path)


def test_features():
    ds = gen_nbody(3, 5, steps_sim=10)
    raw = ds.raw()
    np.testing.assert_allclose(raw.points[:, :5].sum(axis=1), 0.0, atol=1e-12)
    np.testing.assert_array_equal(raw.points[:, 5:], ds.vel)
    np.testing.assert_array_equal(raw.scalars, ds.charge)
    np.testing.assert_allclose(gen_signed_volume(4, 0).raw().points.sum(axis=1), 0.0, atol=1e-12)


def test_charge_only_reaches_grade_zero():
    from metric_cgenn.autodiff import Tape
    from metric_cgenn.layers import AlgebraContext, embed

    ds = gen_nbody(2, 5, steps_sim=10)
    t = Tape()
    x = embed(AlgebraContext(t, 3, t.constant(np.ones(3))), **vars(ds.raw())).data
    np.testing.assert_array_equal(x[:, 10:, 1:], 0.0)
    np.testing.assert_array_equal(x[:, 10:, 0], ds.charge)


def test_degenerate_sample_embeds_finitely():
    from metric_cgenn.model import CGENN, ModelConfig, forward
    from metric_cgenn.tasks import SignedVolumeDataset

    pts = np.zeros((1, 4, 3))
    ds = SignedVolumeDataset(pts, signed_volume(pts))
    out = forward(CGENN(ModelConfig(hidden_channels=3)), ds.raw(), True).output.data
    assert np.all(np.isfinite(out))
