import numpy as np
import pytest

from lcom.config import DEFAULT_POTENTIAL
from lcom.crystal import Composition, Crystal, lattice_from_params, wrap_frac
from lcom.oracle import PotentialSpec


@pytest.fixture(scope="session")
def spec():
    return PotentialSpec.from_dict(DEFAULT_POTENTIAL)


@pytest.fixture(scope="session")
def lj1():
    """Single-species LJ with sigma = epsilon = 1."""
    return PotentialSpec(np.ones((1, 1)), np.ones((1, 1)), cutoff=2.5)


def random_crystal(rng, composition="A2B2", len_range=(1.4, 2.2), angle_range=(70.0, 110.0)):
    comp = Composition.parse(composition)
    while True:
        angles = rng.uniform(*angle_range, size=3)
        try:
            L = lattice_from_params(*rng.uniform(*len_range, size=3), *angles)
        except Exception:
            continue
        break
    return Crystal(L, comp.species, wrap_frac(rng.uniform(0, 1, size=(comp.n, 3))), composition)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def spread_crystal(rng, composition="AB3", min_sep=0.85, len_range=(1.4, 2.4)):
    """Random crystal with every atom-image distance at least ``min_sep``."""
    from lcom.crystal import pair_distance_fingerprint

    while True:
        x = random_crystal(rng, composition, len_range)
        fp = pair_distance_fingerprint(x, 3.0)
        if len(fp) and fp.min() >= min_sep:
            return x
