"""Periodic structures: lattices, fractional coordinates and feature vectors.

Lattice matrices store one base vector per row. Cartesian positions are
``frac @ lattice``. Species are small integers; the symbol ``"A"`` is species
0, ``"B"`` is species 1 and so on.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import reduce
from math import gcd

import numpy as np

from .errors import CompositionMismatch, DegenerateCell, NonFinite

#: Divisor applied to lattice lengths in feature vectors.
LEN_REF = 2.0
ANGLE_REF = 180.0

_FORMULA_RE = re.compile(r"([A-Z])(\d*)")


def species_id(symbol: str) -> int:
    if len(symbol) != 1 or not symbol.isupper():
        raise ValueError(f"species symbols are single capital letters, got {symbol!r}")
    return ord(symbol) - ord("A")


def species_symbol(idx: int) -> str:
    return chr(ord("A") + int(idx))


@dataclass(frozen=True)
class Composition:
    """Cell formula such as ``"AB2"``; ``n`` atoms per unit cell.

    ``"A2"`` is the single-element composition with two atoms per cell, so
    the cell multiplicity is part of the id.
    """

    id: str
    counts: tuple[tuple[str, int], ...]

    @classmethod
    def parse(cls, formula: str) -> "Composition":
        pos = 0
        counts: dict[str, int] = {}
        for m in _FORMULA_RE.finditer(formula):
            if m.start() != pos:
                break
            counts[m.group(1)] = counts.get(m.group(1), 0) + int(m.group(2) or 1)
            pos = m.end()
        if pos != len(formula) or not counts:
            raise ValueError(f"cannot parse formula {formula!r}")
        return cls(formula, tuple(sorted(counts.items())))

    @property
    def n(self) -> int:
        return sum(c for _, c in self.counts)

    @property
    def multiplicity(self) -> int:
        return reduce(gcd, (c for _, c in self.counts))

    @property
    def stoichiometry(self) -> tuple[tuple[str, int], ...]:
        k = self.multiplicity
        return tuple((s, c // k) for s, c in self.counts)

    @property
    def species(self) -> np.ndarray:
        """Species ids in canonical cell order (grouped by symbol)."""
        return np.array([species_id(s) for s, c in self.counts for _ in range(c)], dtype=int)

    @property
    def n_features(self) -> int:
        return 6 + 3 * self.n


def lattice_volume_factor(alpha: float, beta: float, gamma: float) -> float:
    ca, cb, cg = np.cos(np.radians([alpha, beta, gamma]))
    return float(1.0 - ca * ca - cb * cb - cg * cg + 2.0 * ca * cb * cg)


def lattice_from_params(a, b, c, alpha, beta, gamma) -> np.ndarray:
    """Lower-triangular lattice (rows are base vectors) from lengths and angles in degrees."""
    if min(a, b, c) <= 0 or not all(0.0 < t < 180.0 for t in (alpha, beta, gamma)):
        raise DegenerateCell(f"invalid cell parameters {(a, b, c, alpha, beta, gamma)}")
    al, be, ga = np.radians([alpha, beta, gamma])
    ca, cb, cg = np.cos([al, be, ga])
    sg = np.sin(ga)
    u = (ca - cb * cg) / sg
    w2 = 1.0 - cb * cb - u * u
    if not w2 > 1e-12:
        raise DegenerateCell(f"angles {(alpha, beta, gamma)} do not span a cell")
    return np.array(
        [
            [a, 0.0, 0.0],
            [b * cg, b * sg, 0.0],
            [c * cb, c * u, c * np.sqrt(w2)],
        ]
    )


def lattice_param_jacobian(params) -> np.ndarray:
    """d(lattice matrix)/d(params) with shape (6, 3, 3); angles in degrees."""
    a, b, c, alpha, beta, gamma = params
    al, be, ga = np.radians([alpha, beta, gamma])
    ca, cb, cg = np.cos([al, be, ga])
    sa, sb, sg = np.sin([al, be, ga])
    u = (ca - cb * cg) / sg
    w = np.sqrt(1.0 - cb * cb - u * u)
    J = np.zeros((6, 3, 3))
    J[0, 0, 0] = 1.0
    J[1, 1] = [cg, sg, 0.0]
    J[2, 2] = [cb, u, w]
    du = -sa / sg
    J[3, 2] = [0.0, c * du, -c * u * du / w]
    du = sb * cg / sg
    J[4, 2] = [-c * sb, c * du, c * (cb * sb - u * du) / w]
    du = cb - u * cg / sg
    J[5, 1] = [-b * sg, b * cg, 0.0]
    J[5, 2] = [0.0, c * du, -c * u * du / w]
    J[3:] *= np.pi / 180.0
    return J


def lattice_params(lattice) -> np.ndarray:
    """(a, b, c, alpha, beta, gamma) with angles in degrees."""
    L = np.asarray(lattice, dtype=float)
    lengths = np.linalg.norm(L, axis=1)

    def angle(i, j):
        cosv = np.dot(L[i], L[j]) / (lengths[i] * lengths[j])
        return np.degrees(np.arccos(np.clip(cosv, -1.0, 1.0)))

    return np.array([*lengths, angle(1, 2), angle(0, 2), angle(0, 1)])


def cell_heights(lattice) -> np.ndarray:
    """Distances between opposite faces of the cell."""
    L = np.asarray(lattice, dtype=float)
    vol = abs(np.linalg.det(L))
    return np.array([vol / np.linalg.norm(np.cross(L[(k + 1) % 3], L[(k + 2) % 3])) for k in range(3)])


def wrap_frac(coords) -> np.ndarray:
    x = np.asarray(coords, dtype=float)
    if not np.all(np.isfinite(x)):
        raise NonFinite("fractional coordinates contain NaN or inf")
    w = x - np.floor(x)
    # x - floor(x) rounds to 1.0 for tiny negative x
    w[w >= 1.0] = 0.0
    return w


def min_image_frac(delta) -> np.ndarray:
    """Wrap fractional displacements into [-0.5, 0.5)."""
    d = np.asarray(delta, dtype=float)
    return d - np.floor(d + 0.5)


@dataclass(frozen=True, eq=False)
class Crystal:
    lattice: np.ndarray
    species: np.ndarray
    frac: np.ndarray
    composition: str

    def __post_init__(self):
        lattice = np.array(self.lattice, dtype=float).reshape(3, 3)
        species = np.array(self.species, dtype=int).reshape(-1)
        frac = np.array(self.frac, dtype=float).reshape(-1, 3)
        if len(species) != len(frac):
            raise ValueError("species and frac lengths differ")
        if not np.all(np.isfinite(lattice)) or not np.all(np.isfinite(frac)):
            raise NonFinite("crystal contains non-finite values")
        if not np.linalg.det(lattice) > 0:
            raise DegenerateCell("lattice determinant must be positive")
        if np.any(frac < 0.0) or np.any(frac >= 1.0):
            raise ValueError("fractional coordinates must lie in [0, 1)")
        comp = Composition.parse(self.composition)
        if sorted(species.tolist()) != sorted(comp.species.tolist()):
            raise CompositionMismatch(f"species {species.tolist()} do not match {self.composition}")
        for arr in (lattice, species, frac):
            arr.flags.writeable = False
        object.__setattr__(self, "lattice", lattice)
        object.__setattr__(self, "species", species)
        object.__setattr__(self, "frac", frac)

    @property
    def n(self) -> int:
        return len(self.species)

    @property
    def cart(self) -> np.ndarray:
        return self.frac @ self.lattice

    def params(self) -> np.ndarray:
        return lattice_params(self.lattice)

    def replace(self, lattice=None, frac=None) -> "Crystal":
        return Crystal(
            self.lattice if lattice is None else lattice,
            self.species,
            self.frac if frac is None else frac,
            self.composition,
        )

    def allclose(self, other: "Crystal", atol: float = 1e-12) -> bool:
        return (
            self.composition == other.composition
            and np.array_equal(self.species, other.species)
            and np.allclose(self.lattice, other.lattice, rtol=0, atol=atol)
            and np.allclose(self.frac, other.frac, rtol=0, atol=atol)
        )


def crystal_from_params(params, frac, composition: str, species=None) -> Crystal:
    if species is None:
        species = Composition.parse(composition).species
    return Crystal(lattice_from_params(*params), species, wrap_frac(frac), composition)


def canonical_translation(crystal: Crystal) -> Crystal:
    """Rigidly translate so that atom 0 sits at the origin."""
    return crystal.replace(frac=wrap_frac(crystal.frac - crystal.frac[0]))


def min_image_displacement(crystal: Crystal, i: int, j: int) -> np.ndarray:
    """Cartesian vector from atom i to the nearest periodic image of atom j.

    Shifts are enumerated over {-1, 0, 1}^3 after wrapping the fractional
    difference into [-0.5, 0.5); exact when the cell is not too skewed.
    """
    d = min_image_frac(crystal.frac[j] - crystal.frac[i])
    cand = (d + _SHIFTS1) @ crystal.lattice
    return cand[np.argmin(np.einsum("ij,ij->i", cand, cand))]


_SHIFTS1 = np.array([[x, y, z] for x in (-1, 0, 1) for y in (-1, 0, 1) for z in (-1, 0, 1)], dtype=float)


def featurize(crystal: Crystal, len_ref: float = LEN_REF) -> np.ndarray:
    p = crystal.params()
    return np.concatenate([p[:3] / len_ref, p[3:] / ANGLE_REF, crystal.frac.reshape(-1)])


def defeaturize(values, composition: str, species=None, len_ref: float = LEN_REF) -> Crystal:
    v = np.asarray(values, dtype=float)
    comp = Composition.parse(composition)
    if v.shape != (comp.n_features,):
        raise CompositionMismatch(f"feature length {v.shape} does not fit {composition}")
    params = np.concatenate([v[:3] * len_ref, v[3:6] * ANGLE_REF])
    return crystal_from_params(params, v[6:].reshape(-1, 3), composition, species)


def pair_distance_fingerprint(crystal: Crystal, cutoff: float) -> np.ndarray:
    """Sorted multiset of all atom-image distances below ``cutoff`` (per cell)."""
    from .oracle import _pair_images

    _, dist, _, _ = _pair_images(crystal.lattice, crystal.frac, cutoff)
    return np.sort(dist)


_COEFFS2 = np.array([c for c in np.ndindex(5, 5, 5) if any(v != 2 for v in c)], dtype=float) - 2.0


def reduce_lattice(lattice) -> np.ndarray:
    """Short, nearly orthogonal basis of the same lattice.

    Picks successive shortest lattice vectors among small integer combinations
    of the current basis (keeping the cell volume), then flips signs so that
    the three angles are all acute or all obtuse, with a positive determinant.
    Returns the integer matrix ``M`` with ``new = M @ lattice``.
    """
    L = np.asarray(lattice, dtype=float)
    vol = abs(np.linalg.det(L))
    M = np.eye(3)
    for _ in range(10):
        cand = _COEFFS2 @ M
        vecs = cand @ L
        order = np.lexsort((np.arange(len(vecs)), np.round(np.einsum("ij,ij->i", vecs, vecs), 12)))
        rows: list[np.ndarray] = []
        for k in order:
            trial = rows + [cand[k]]
            if len(trial) < 3:
                if len(trial) == 2 and np.linalg.norm(np.cross(trial[0] @ L, trial[1] @ L)) < 1e-9 * vol ** (2 / 3):
                    continue
                rows = trial
            elif abs(abs(np.linalg.det(np.array(trial) @ L)) - vol) < 1e-9 * vol:
                rows = trial
                break
        new = np.array(rows)
        if np.array_equal(new, M):
            break
        M = new
    B = M @ L
    d01, d02, d12 = B[0] @ B[1], B[0] @ B[2], B[1] @ B[2]
    s1 = 1.0
    if d01 * d02 * d12 > 0:
        s2 = 1.0 if d01 >= 0 else -1.0
        s3 = 1.0 if d02 >= 0 else -1.0
    else:
        s2 = -1.0 if d01 > 0 else 1.0
        s3 = -1.0 if d02 > 0 else 1.0
    M = np.diag([s1, s2, s3]) @ M
    if np.linalg.det(M @ L) < 0:
        M = -M
    return np.rint(M)


def canonical_form(crystal: Crystal, decimals: int = 6) -> Crystal:
    """Reduced cell in the lower-triangular convention with a canonical origin and atom order.

    The origin is placed on an atom of the first species; among those choices,
    with atoms of each species sorted by coordinates, the lexicographically
    smallest coordinate list wins. Energy is unchanged.
    """
    M = reduce_lattice(crystal.lattice)
    frac = crystal.frac @ np.linalg.inv(M)
    lattice = lattice_from_params(*lattice_params(M @ crystal.lattice))
    species = crystal.species
    best = None
    for origin in np.flatnonzero(species == species.min()):
        f = wrap_frac(frac - frac[origin])
        key_rows = np.round(f, decimals)
        key_rows[key_rows >= 1.0] = 0.0
        order = np.lexsort((key_rows[:, 2], key_rows[:, 1], key_rows[:, 0], species))
        key = tuple(key_rows[order].ravel())
        if best is None or key < best[0]:
            best = (key, f[order], species[order])
    return Crystal(lattice, best[2], best[1], crystal.composition)


def crystal_to_record(crystal: Crystal, energy: float | None = None) -> dict:
    """Line-record form: lattice (9 reals, row-major), species, frac (3n reals), composition, energy."""
    return {
        "lattice": crystal.lattice.reshape(-1),
        "species": [int(s) for s in crystal.species],
        "frac": crystal.frac.reshape(-1),
        "composition": crystal.composition,
        "energy": None if energy is None else float(energy),
    }


def record_to_crystal(record: dict) -> tuple[Crystal, float | None]:
    crystal = Crystal(
        np.array(record["lattice"], dtype=float).reshape(3, 3),
        record["species"],
        np.array(record["frac"], dtype=float).reshape(-1, 3),
        record["composition"],
    )
    e = record.get("energy")
    return crystal, None if e is None else float(e)
