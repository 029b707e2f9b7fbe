"""Synthetic formation-energy oracle.

A species-dependent Lennard-Jones 12-6 pair potential, shifted to zero at the
cutoff and summed over periodic images, stands in for a DFT simulator. The
module also relaxes structures to local minima, draws random stable
structures, builds datasets of them and brute-forces global minima.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numba
import numpy as np

from .crystal import (
    Composition,
    Crystal,
    canonical_form,
    cell_heights,
    lattice_from_params,
    lattice_param_jacobian,
    lattice_params,
    lattice_volume_factor,
    min_image_frac,
    pair_distance_fingerprint,
    reduce_lattice,
    species_id,
    wrap_frac,
)
from .errors import DegenerateCell, InitFailed, OverlapSingularity, RelaxationDiverged

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PotentialSpec:
    """Pairwise LJ parameters indexed by species id.

    ``sigma[s, t]`` and ``epsilon[s, t]`` must be symmetric. The cutoff
    defaults to 2.5 times the largest sigma.
    """

    sigma: np.ndarray
    epsilon: np.ndarray
    cutoff: float = 0.0
    r_min_guard: float = 1e-4

    def __post_init__(self):
        sig = np.array(self.sigma, dtype=float)
        eps = np.array(self.epsilon, dtype=float)
        if sig.shape != eps.shape or sig.ndim != 2 or sig.shape[0] != sig.shape[1]:
            raise ValueError("sigma and epsilon must be matching square matrices")
        if not (np.allclose(sig, sig.T) and np.allclose(eps, eps.T)):
            raise ValueError("pair parameters must be symmetric")
        if np.any(sig <= 0) or np.any(eps <= 0):
            raise ValueError("sigma and epsilon must be positive")
        cutoff = float(self.cutoff) or 2.5 * sig.max()
        if cutoff < 2.0 * sig.max():
            raise ValueError("cutoff must be at least twice the largest sigma")
        sig.flags.writeable = False
        eps.flags.writeable = False
        object.__setattr__(self, "sigma", sig)
        object.__setattr__(self, "epsilon", eps)
        object.__setattr__(self, "cutoff", cutoff)

    @classmethod
    def from_dict(cls, d: dict) -> "PotentialSpec":
        """Build from ``{"species": {"A": [sigma, eps], ...}, "pairs": {"AB": [sigma, eps]}, "cutoff": x}``.

        Unlisted cross pairs use Lorentz-Berthelot mixing.
        """
        singles = {species_id(k): v for k, v in d["species"].items()}
        size = max(singles) + 1
        sig = np.ones((size, size))
        eps = np.ones((size, size))
        for s, (sg, ep) in singles.items():
            for t, (sg2, ep2) in singles.items():
                sig[s, t] = 0.5 * (sg + sg2)
                eps[s, t] = np.sqrt(ep * ep2)
        for pair, (sg, ep) in d.get("pairs", {}).items():
            s, t = species_id(pair[0]), species_id(pair[1])
            sig[s, t] = sig[t, s] = sg
            eps[s, t] = eps[t, s] = ep
        return cls(sig, eps, float(d.get("cutoff", 0.0)), float(d.get("r_min_guard", 1e-4)))

    def to_dict(self) -> dict:
        sym = [chr(ord("A") + i) for i in range(len(self.sigma))]
        return {
            "species": {s: [self.sigma[i, i], self.epsilon[i, i]] for i, s in enumerate(sym)},
            "pairs": {
                sym[i] + sym[j]: [self.sigma[i, j], self.epsilon[i, j]]
                for i in range(len(sym))
                for j in range(i + 1, len(sym))
            },
            "cutoff": self.cutoff,
            "r_min_guard": self.r_min_guard,
        }


@dataclass
class RelaxConfig:
    max_steps: int = 3000
    g_tol: float = 1e-3
    armijo_c: float = 1e-4
    shrink: float = 0.5
    max_move: float = 0.1
    max_fails: int = 20


@dataclass
class InitConfig:
    """Random-cell bounds; lengths are multiplied by cbrt(n)."""

    len_min: float = 0.9
    len_max: float = 1.6
    angle_min: float = 60.0
    angle_max: float = 120.0
    min_volume_factor: float = 0.3
    attempts: int = 50
    relax: RelaxConfig = field(default_factory=RelaxConfig)


def _shift_grid(lattice: np.ndarray, cutoff: float) -> np.ndarray:
    reach = np.ceil(cutoff / cell_heights(lattice) + 0.5).astype(int)
    axes = [np.arange(-r, r + 1) for r in reach]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3).astype(float)


def _pair_images(lattice, frac, cutoff):
    """All ordered (i, j, image) pairs closer than ``cutoff``.

    Returns ``(ij, dist, rvec, dfrac)``, where ``rvec = dfrac @ lattice`` points
    from atom i to the image of atom j.
    """
    L = np.asarray(lattice, dtype=float)
    f = np.asarray(frac, dtype=float)
    n = len(f)
    shifts = _shift_grid(L, cutoff)
    d0 = min_image_frac(f[None, :, :] - f[:, None, :])
    dfrac = d0[:, :, None, :] + shifts[None, None, :, :]
    rvec = dfrac @ L
    d2 = np.einsum("ijsk,ijsk->ijs", rvec, rvec)
    mask = d2 < cutoff * cutoff
    zero = np.all(shifts == 0.0, axis=1)
    mask[np.arange(n), np.arange(n), :] &= ~zero
    ii, jj, ss = np.nonzero(mask)
    return np.stack([ii, jj], axis=1), np.sqrt(d2[ii, jj, ss]), rvec[ii, jj, ss], dfrac[ii, jj, ss]


@numba.njit(cache=True)
def _image_reach(L, cutoff):
    vol = abs(np.linalg.det(L))
    reach = np.empty(3, dtype=np.int64)
    for k in range(3):
        u = L[(k + 1) % 3]
        v = L[(k + 2) % 3]
        cx = u[1] * v[2] - u[2] * v[1]
        cy = u[2] * v[0] - u[0] * v[2]
        cz = u[0] * v[1] - u[1] * v[0]
        h = vol / np.sqrt(cx * cx + cy * cy + cz * cz)
        reach[k] = int(np.ceil(cutoff / h + 0.5))
    return reach


@numba.njit(cache=True)
def _lj_kernel(L, frac, species, sigma, epsilon, cutoff, need_grad):
    n = frac.shape[0]
    rc2 = cutoff * cutoff
    reach = _image_reach(L, cutoff)
    energy = 0.0
    min_ratio = np.inf
    grad_f = np.zeros((n, 3))
    grad_L = np.zeros((3, 3))
    df = np.empty(3)
    rv = np.empty(3)
    for i in range(n):
        for j in range(n):
            si = species[i]
            sj = species[j]
            sig = sigma[si, sj]
            eps = epsilon[si, sj]
            src6 = (sig * sig / rc2) ** 3
            vshift = 4.0 * eps * (src6 * src6 - src6)
            d0x = frac[j, 0] - frac[i, 0]
            d0y = frac[j, 1] - frac[i, 1]
            d0z = frac[j, 2] - frac[i, 2]
            d0x -= np.floor(d0x + 0.5)
            d0y -= np.floor(d0y + 0.5)
            d0z -= np.floor(d0z + 0.5)
            for sx in range(-reach[0], reach[0] + 1):
                for sy in range(-reach[1], reach[1] + 1):
                    for sz in range(-reach[2], reach[2] + 1):
                        if i == j and sx == 0 and sy == 0 and sz == 0:
                            continue
                        df[0] = d0x + sx
                        df[1] = d0y + sy
                        df[2] = d0z + sz
                        for a in range(3):
                            rv[a] = df[0] * L[0, a] + df[1] * L[1, a] + df[2] * L[2, a]
                        r2 = rv[0] * rv[0] + rv[1] * rv[1] + rv[2] * rv[2]
                        if r2 >= rc2:
                            continue
                        r = np.sqrt(r2)
                        if r / sig < min_ratio:
                            min_ratio = r / sig
                        if r == 0.0:
                            continue
                        sr6 = (sig * sig / r2) ** 3
                        energy += 0.5 * (4.0 * eps * (sr6 * sr6 - sr6) - vshift)
                        if need_grad:
                            # 0.5 * (dV/dr) / r
                            c = 12.0 * eps * (sr6 - 2.0 * sr6 * sr6) / r2
                            for k in range(3):
                                gk = L[k, 0] * rv[0] + L[k, 1] * rv[1] + L[k, 2] * rv[2]
                                grad_f[j, k] += c * gk
                                grad_f[i, k] -= c * gk
                                for a in range(3):
                                    grad_L[k, a] += c * df[k] * rv[a]
    return energy, grad_f, grad_L, min_ratio


#: image-shift count above which the energy is evaluated on a reduced basis
_MAX_SHIFTS = 2000


def _lj_terms(lattice, frac, species, spec: PotentialSpec, need_grad: bool):
    lattice = np.ascontiguousarray(lattice, dtype=float)
    frac = np.ascontiguousarray(frac, dtype=float)
    if abs(np.linalg.det(lattice)) < 1e-12:
        raise DegenerateCell("cell volume is zero")
    M = None
    if np.prod(2 * _image_reach(lattice, spec.cutoff) + 1) > _MAX_SHIFTS:
        # same lattice, fewer images: E(L, f) = E(M L, f M^-1)
        M = reduce_lattice(lattice)
        Minv = np.linalg.inv(M)
        lattice = np.ascontiguousarray(M @ lattice)
        frac = np.ascontiguousarray(frac @ Minv)
        if np.prod(2 * _image_reach(lattice, spec.cutoff) + 1) > 50 * _MAX_SHIFTS:
            raise DegenerateCell("cell too thin for the pair cutoff")
    energy, grad_f, grad_L, min_ratio = _lj_kernel(
        lattice,
        frac,
        np.ascontiguousarray(species, dtype=np.int64),
        spec.sigma,
        spec.epsilon,
        spec.cutoff,
        need_grad,
    )
    if min_ratio < spec.r_min_guard:
        raise OverlapSingularity("two atoms (or periodic images) nearly coincide")
    if M is not None:
        grad_f = grad_f @ Minv.T
        grad_L = M.T @ grad_L
    return energy, grad_f, grad_L


def total_energy(crystal: Crystal, spec: PotentialSpec) -> float:
    return _lj_terms(crystal.lattice, crystal.frac, crystal.species, spec, False)[0]


def energy_gradient(crystal: Crystal, spec: PotentialSpec):
    """Gradient w.r.t. fractional coordinates (n, 3) and lattice params (6,).

    Lattice params are (a, b, c, alpha, beta, gamma) with angles in degrees.
    The energy is rotation invariant, so it is a function of the params alone.
    """
    _, grad_f, grad_L = _lj_terms(crystal.lattice, crystal.frac, crystal.species, spec, True)
    params = lattice_params(crystal.lattice)
    # crystal.lattice = L_lower @ R with R orthogonal, so dE/dL_lower = dE/dL @ R^T
    R = np.linalg.solve(lattice_from_params(*params), crystal.lattice)
    return grad_f, np.einsum("pka,ka->p", lattice_param_jacobian(params), grad_L @ R.T)


def _pack(crystal: Crystal) -> np.ndarray:
    p = lattice_params(crystal.lattice)
    return np.concatenate([crystal.frac.reshape(-1), p[:3], np.radians(p[3:])])


def _packed_eval(x: np.ndarray, species: np.ndarray, spec: PotentialSpec):
    """Energy and gradient in relaxer variables (frac, a, b, c, angles in radians)."""
    n3 = len(species) * 3
    params = np.concatenate([x[n3:n3 + 3], np.degrees(x[n3 + 3:])])
    L = lattice_from_params(*params)
    frac = x[:n3].reshape(-1, 3)
    energy, grad_f, grad_L = _lj_terms(L, frac, species, spec, True)
    gp = np.einsum("pka,ka->p", lattice_param_jacobian(params), grad_L)
    gp[3:] *= 180.0 / np.pi
    return energy, np.concatenate([grad_f.reshape(-1), gp])


def residual(crystal: Crystal, spec: PotentialSpec) -> float:
    """Max-abs gradient in the relaxer's variables (angles in radians)."""
    return float(np.max(np.abs(_packed_eval(_pack(crystal), crystal.species, spec)[1])))


def relax(crystal: Crystal, spec: PotentialSpec, max_steps: int = 3000, g_tol: float = 1e-3, cfg: RelaxConfig | None = None) -> Crystal:
    """Local minimization over fractional coordinates and cell parameters.

    Steepest descent; the trial step length comes from the Barzilai-Borwein
    formula and is accepted only under the Armijo condition, halving on
    failure. Energy never increases between accepted iterates.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    cfg = cfg or RelaxConfig()
    species = crystal.species
    x = _pack(crystal)
    energy, g = _packed_eval(x, species, spec)
    gmax = np.max(np.abs(g))
    if gmax <= g_tol:
        return crystal
    t = cfg.max_move / max(gmax, 1e-12)
    for _ in range(max_steps):
        if gmax <= g_tol:
            break
        g2 = float(g @ g)
        fails = 0
        while True:
            x_new = x - t * g
            try:
                e_new, g_new = _packed_eval(x_new, species, spec)
            except (DegenerateCell, OverlapSingularity):
                e_new = np.inf
            if e_new <= energy - cfg.armijo_c * t * g2:
                break
            fails += 1
            if fails >= cfg.max_fails:
                raise RelaxationDiverged(f"line search failed {fails} times at energy {energy:.6g}")
            t *= cfg.shrink
        s = x_new - x
        y = g_new - g
        x, energy, g = x_new, e_new, g_new
        gmax = np.max(np.abs(g))
        sy = float(s @ y)
        t = float(s @ s) / sy if sy > 0 else 2.0 * t
        t = min(t, cfg.max_move / max(gmax, 1e-12))
    n3 = 3 * crystal.n
    params = np.concatenate([x[n3:n3 + 3], np.degrees(x[n3 + 3:])])
    return Crystal(lattice_from_params(*params), species, wrap_frac(x[:n3].reshape(-1, 3)), crystal.composition)


def _random_cell(comp: Composition, rng: np.random.Generator, cfg: InitConfig) -> Crystal:
    scale = np.cbrt(comp.n)
    while True:
        angles = rng.uniform(cfg.angle_min, cfg.angle_max, size=3)
        if lattice_volume_factor(*angles) >= cfg.min_volume_factor:
            break
    lengths = rng.uniform(cfg.len_min, cfg.len_max, size=3) * scale
    frac = rng.uniform(0.0, 1.0, size=(comp.n, 3))
    return Crystal(lattice_from_params(*lengths, *angles), comp.species, wrap_frac(frac), comp.id)


def _as_comp(composition) -> Composition:
    return composition if isinstance(composition, Composition) else Composition.parse(composition)


def random_stable_structure(composition, spec: PotentialSpec, seed: int, cfg: InitConfig | None = None) -> Crystal:
    """Relaxed random cell, re-expressed in its canonical cell and atom order.

    Attempts that hit an overlap, a failed line search or the step limit are
    retried with a fresh sub-seed.
    """
    comp = _as_comp(composition)
    cfg = cfg or InitConfig()
    rc = cfg.relax
    for attempt in range(cfg.attempts):
        rng = np.random.default_rng([int(seed), attempt])
        try:
            x = relax(_random_cell(comp, rng, cfg), spec, rc.max_steps, rc.g_tol, rc)
            # the residual depends on the cell basis, so polish in the canonical one
            x = relax(canonical_form(x), spec, rc.max_steps, rc.g_tol, rc)
        except (OverlapSingularity, RelaxationDiverged, DegenerateCell):
            continue
        if residual(x, spec) <= rc.g_tol:
            return x
    raise InitFailed(f"no stable structure for {comp.id} after {cfg.attempts} attempts (seed {seed})")


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass(frozen=True, eq=False)
class DatasetRecord:
    crystal: Crystal
    energy: float

    @property
    def composition(self) -> str:
        return self.crystal.composition


def _is_duplicate(energy, fp, seen, e_tol=1e-6, d_tol=1e-4):
    for e2, fp2 in seen:
        if abs(energy - e2) <= e_tol and len(fp) == len(fp2) and np.max(np.abs(fp - fp2), initial=0.0) <= d_tol:
            return True
    return False


def generate_dataset(compositions, per_comp: int, spec: PotentialSpec, seed: int, cfg: InitConfig | None = None, retry_factor: int = 4) -> list[DatasetRecord]:
    """Relaxed structures with oracle energies, de-duplicated per composition.

    Up to ``retry_factor * per_comp`` draws are made per composition; fewer
    than ``per_comp`` records come back if the landscape has too few distinct
    minima.
    """
    if per_comp < 1:
        raise ValueError("per_comp must be >= 1")
    out = []
    for ci, composition in enumerate(compositions):
        comp = _as_comp(composition)
        seen: list = []
        draws = 0
        while len(seen) < per_comp and draws < retry_factor * per_comp:
            x = random_stable_structure(comp, spec, derive_seed(seed, ci, draws), cfg)
            draws += 1
            e = total_energy(x, spec)
            fp = pair_distance_fingerprint(x, spec.cutoff)
            if _is_duplicate(e, fp, seen):
                continue
            seen.append((e, fp))
            out.append(DatasetRecord(x, e))
        log.info("dataset %s: %d records from %d draws", comp.id, len(seen), draws)
    return out


class GlobalMinimum(NamedTuple):
    crystal: Crystal
    energy: float
    budget: int
    seed: int


def global_minimum(composition, spec: PotentialSpec, budget: int, seed: int, cfg: InitConfig | None = None) -> GlobalMinimum:
    """Best of ``budget`` random stable structures.

    Run ``i`` uses seed ``derive_seed(seed, i)`` (``seed`` itself for run 0),
    so a larger budget always contains the smaller one.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    best = None
    for i in range(budget):
        s = seed if i == 0 else derive_seed(seed, i)
        x = random_stable_structure(composition, spec, s, cfg)
        e = total_energy(x, spec)
        if best is None or e < best[1]:
            best = (x, e)
    return GlobalMinimum(best[0], best[1], budget, seed)
