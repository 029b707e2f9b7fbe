import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lcom import nn
from lcom.errors import CompositionMismatch, NonFiniteIterate
from lcom.optimize import descend, lcom_optimize, write_trajectory_csv
from lcom.oracle import random_stable_structure
from lcom.surrogate import ComsConfig, SurrogateModel, make_records, train_surrogate
from lcom.vae import VaeConfig, build_model, decode, encode


class Quadratic:
    def value_and_grad(self, z):
        return float(z @ z), 2.0 * z


class Blowup:
    def value_and_grad(self, z):
        return float(z @ z), 1e308 * np.ones_like(z)


def test_quadratic_halves_each_step():
    z0 = np.zeros(5)
    z0[0] = 1.0
    tr = descend(Quadratic(), z0, 10, 0.25)
    assert tr.T == 10 and tr.z.shape == (11, 5)
    for k in range(11):
        assert np.allclose(tr.z[k], 0.5**k * z0, rtol=0, atol=1e-15)


def test_zero_step_stays_put():
    z0 = np.array([0.3, -0.2])
    tr = descend(Quadratic(), z0, 7, 0.0)
    assert np.all(tr.z == z0)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-4, 0.49), st.lists(st.floats(-10, 10), min_size=1, max_size=5))
def test_quadratic_monotone_below_curvature_limit(step, z):
    tr = descend(Quadratic(), np.array(z), 20, step)
    assert np.all(np.diff(tr.energies) <= 1e-12)


def test_invalid_arguments():
    with pytest.raises(ValueError):
        descend(Quadratic(), np.zeros(2), -1, 0.1)
    with pytest.raises(ValueError):
        descend(Quadratic(), np.zeros(2), 3, -0.1)
    with pytest.raises(NonFiniteIterate):
        descend(Quadratic(), np.array([np.nan]), 3, 0.1)
    with pytest.raises(NonFiniteIterate):
        descend(Blowup(), np.ones(2), 3, 10.0)


def _surrogate(dim=4, seed=0):
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((200, dim))
    E = np.sin(Z[:, 0]) + 0.5 * (Z**2).sum(axis=1)
    return train_surrogate(make_records(Z, E, "AB2"), ComsConfig(epochs=60, hidden=32, alpha=0.5, adv_steps=3, adv_lr=0.05))


def test_energies_are_exact_forward_values():
    model = _surrogate()
    tr = descend(model, np.ones(4), 15, 0.05)
    for z, e in zip(tr.z, tr.energies):
        assert e == nn.forward(model.net, z)[0]


def test_descend_reproducible():
    model = _surrogate()
    a, b = descend(model, np.ones(4), 10, 0.1), descend(model, np.ones(4), 10, 0.1)
    assert np.array_equal(a.z, b.z) and np.array_equal(a.energies, b.energies)


def test_descent_lowers_trained_surrogate():
    model = _surrogate()
    rng = np.random.default_rng(1)
    starts = rng.standard_normal((50, 4))
    lowered = [descend(model, z0, 50, 0.05).energies[-1] <= model.predict(z0) for z0 in starts]
    assert np.mean(lowered) >= 0.9


@pytest.fixture(scope="module")
def tiny_pipeline(spec):
    vae = build_model("AB2", VaeConfig(latent_dim=4, hidden=8, langevin_steps=2))
    return vae, _surrogate(), random_stable_structure("AB2", spec, 0)


def test_pipeline_zero_steps_is_round_trip(tiny_pipeline):
    vae, model, init = tiny_pipeline
    res = lcom_optimize(vae, model, init, 0, 0.1, rng=np.random.default_rng(3))
    ref = decode(vae, encode(vae, init)[0], rng=np.random.default_rng(3))
    assert res.crystal.allclose(ref, atol=0) and res.trajectory.T == 0


def test_pipeline_reproducible_and_timed(tiny_pipeline):
    vae, model, init = tiny_pipeline
    a = lcom_optimize(vae, model, init, 5, 0.1, rng=np.random.default_rng(0))
    b = lcom_optimize(vae, model, init, 5, 0.1, rng=np.random.default_rng(0))
    assert a.crystal.allclose(b.crystal, atol=0)
    assert set(a.seconds) == {"encode", "descend", "decode", "total"}
    parts = a.seconds["encode"] + a.seconds["descend"] + a.seconds["decode"]
    assert abs(a.seconds["total"] - parts) <= 0.05 * a.seconds["total"]


def test_pipeline_composition_checks(tiny_pipeline, spec):
    vae, model, _ = tiny_pipeline
    with pytest.raises(CompositionMismatch):
        lcom_optimize(vae, model, random_stable_structure("AB3", spec, 0), 2, 0.1)
    other = SurrogateModel(model.net, 0.0, 1.0, "AB3")
    with pytest.raises(CompositionMismatch):
        lcom_optimize(vae, other, random_stable_structure("AB2", spec, 0), 2, 0.1)


def test_trajectory_csv(tmp_path):
    tr = descend(Quadratic(), np.array([1.0, 0.0]), 3, 0.25)
    tr.oracle_energies[3] = -1.5
    write_trajectory_csv(tmp_path / "t.csv", tr)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "k,surrogate_energy,oracle_energy"
    assert lines[1] == "0,1.0," and lines[4] == "3,0.015625,-1.5"
