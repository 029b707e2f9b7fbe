"""Gradient descent in latent space and the encode, descend, decode pipeline."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .crystal import Crystal
from .errors import CompositionMismatch, NonFiniteIterate
from .vae import CdVaeModel, NoiseSchedule, decode, encode


@dataclass
class OptTrajectory:
    z: np.ndarray
    #: surrogate output at each iterate (standardized units)
    energies: np.ndarray
    step: float
    oracle_energies: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.z) - 1


def descend(model, z0, T: int, step: float) -> OptTrajectory:
    """``T`` plain gradient steps ``z <- z - step * grad E_hat(z)``.

    ``model`` needs ``value_and_grad(z) -> (value, gradient)``.
    """
    if T < 0:
        raise ValueError("T must be >= 0")
    if step < 0:
        raise ValueError("step must be >= 0")
    z = np.array(z0, dtype=float)
    if not np.all(np.isfinite(z)):
        raise NonFiniteIterate("start point is not finite")
    zs = [z]
    values = []
    for k in range(T + 1):
        v, g = model.value_and_grad(z)
        if not np.isfinite(v):
            raise NonFiniteIterate(f"surrogate value not finite at step {k}")
        values.append(v)
        if k == T:
            break
        with np.errstate(over="ignore", invalid="ignore"):
            z = z - step * g
        if not np.all(np.isfinite(z)):
            raise NonFiniteIterate(f"iterate {k + 1} is not finite")
        zs.append(z)
    return OptTrajectory(np.stack(zs), np.array(values), step)


@dataclass
class OptResult:
    crystal: Crystal
    trajectory: OptTrajectory
    seconds: dict


def lcom_optimize(vae: CdVaeModel, model, init: Crystal, T: int, step: float, schedule: NoiseSchedule | None = None, rng: np.random.Generator | None = None) -> OptResult:
    """Encode ``init``, descend the surrogate for ``T`` steps and decode the last iterate.

    ``seconds`` holds wall-clock time for the encode, descend and decode
    phases and their total.
    """
    if init.composition != vae.composition or getattr(model, "composition", vae.composition) != vae.composition:
        raise CompositionMismatch("initial structure, VAE and surrogate must share a composition")
    t0 = time.perf_counter()
    z0, _ = encode(vae, init)
    t1 = time.perf_counter()
    traj = descend(model, z0, T, step)
    t2 = time.perf_counter()
    crystal = decode(vae, traj.z[-1], schedule=schedule, rng=rng)
    t3 = time.perf_counter()
    seconds = {"encode": t1 - t0, "descend": t2 - t1, "decode": t3 - t2}
    seconds["total"] = t3 - t0
    return OptResult(crystal, traj, seconds)


def write_trajectory_csv(path, traj: OptTrajectory) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "surrogate_energy", "oracle_energy"])
        for k, v in enumerate(traj.energies):
            oe = traj.oracle_energies.get(k)
            w.writerow([k, repr(float(v)), "" if oe is None else repr(float(oe))])
