"""Surrogate energy models on latent vectors, with and without conservatism.

The conservative loss is

    MSE(E_hat(z), E) - alpha * (mean E_hat(z_plus) - mean E_hat(z))

where ``z_plus`` comes from a few gradient-descent steps on ``E_hat``
started at each data latent. Mined points are treated as constants when
differentiating with respect to the network parameters. Energies are
standardized by the training mean and standard deviation, so a model's raw
output is in units of the data spread.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .errors import CompositionMismatch, EmptyDataset, NonFinite
from .vae import CdVaeModel, encode_many

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LatentRecord:
    z: np.ndarray
    #: standardized energy
    energy: float
    composition: str
    raw_energy: float


@dataclass
class ComsConfig:
    """Training settings; ``tau`` set to a number switches on the dual update of alpha."""

    alpha: float = 0.1
    tau: float | None = None
    dual_lr: float = 0.01
    alpha_init: float = 1.0
    alpha_max: float = 100.0
    #: mining follows the optimizer: as many steps, at the same step size
    adv_steps: int = 50
    adv_lr: float = 0.2
    epochs: int = 1000
    batch_size: int = 128
    lr: float = 1e-4
    hidden: int = 256
    layers: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.tau is None and self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.tau is not None and not self.tau > 0:
            raise ValueError("tau must be > 0")

    @property
    def dual(self) -> bool:
        return self.tau is not None

    @classmethod
    def from_dict(cls, d: dict) -> "ComsConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class SurrogateModel:
    net: nn.MLP
    e_mean: float
    e_std: float
    composition: str
    log: list = field(default_factory=list)

    def __post_init__(self):
        if not self.e_std > 0:
            raise ValueError("energy std must be positive")

    @property
    def latent_dim(self) -> int:
        return self.net.layer_sizes[0]

    def predict(self, z) -> np.ndarray:
        """Standardized energy; shape ``()`` for one latent, ``(B,)`` for a batch."""
        return nn.forward(self.net, z)[..., 0]

    def energy(self, z) -> np.ndarray:
        return self.e_mean + self.e_std * self.predict(z)

    def value_and_grad(self, z):
        """Standardized energy of one latent and its gradient with respect to ``z``."""
        out, gz = nn.input_grad(self.net, np.asarray(z, dtype=float))
        return float(out[0]), gz

    def grad_batch(self, Z) -> np.ndarray:
        return nn.input_grad(self.net, Z)[1]

    def to_dict(self) -> dict:
        return {
            "format": "lcom-surrogate",
            "version": 1,
            "composition": self.composition,
            "e_mean": self.e_mean,
            "e_std": self.e_std,
            "net": self.net.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SurrogateModel":
        if d.get("format") != "lcom-surrogate":
            raise ValueError("not an lcom-surrogate checkpoint")
        return cls(nn.MLP.from_dict(d["net"]), d["e_mean"], d["e_std"], d["composition"])


def energy_stats(energies) -> tuple[float, float]:
    e = np.asarray(energies, dtype=float)
    std = float(e.std())
    # a constant dataset keeps unit scale so that standardization is defined
    return float(e.mean()), std if std > 1e-12 else 1.0


def make_records(Z, energies, composition: str) -> list[LatentRecord]:
    energies = np.asarray(energies, dtype=float)
    if not np.all(np.isfinite(Z)) or not np.all(np.isfinite(energies)):
        raise NonFinite("latents and energies must be finite")
    mean, std = energy_stats(energies)
    return [LatentRecord(np.array(z, dtype=float), float((e - mean) / std), composition, float(e)) for z, e in zip(Z, energies)]


def encode_dataset(vae: CdVaeModel, dataset) -> list[LatentRecord]:
    """Posterior-mean latents with standardized energies."""
    if not dataset:
        return []
    for r in dataset:
        if r.composition != vae.composition:
            raise CompositionMismatch(f"record for {r.composition}, VAE for {vae.composition}")
    Z = encode_many(vae, [r.crystal for r in dataset])
    return make_records(Z, [r.energy for r in dataset], vae.composition)


def mine_adversarial(model, z0, cfg: ComsConfig):
    """``adv_steps`` descent steps of size ``adv_lr`` on the surrogate.

    ``model`` needs ``grad_batch``; works for one latent or a batch.
    """
    z = np.array(z0, dtype=float)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    for _ in range(cfg.adv_steps):
        z = z - cfg.adv_lr * model.grad_batch(z)
    return z[0] if single else z


@dataclass
class ComsDiagnostics:
    mse: float
    #: mean E_hat(data) - mean E_hat(z_plus); positive means mined points look better
    gap: float
    alpha: float


def coms_loss(model: SurrogateModel, Z, E, alpha: float, cfg: ComsConfig, need_grad: bool = True, z_plus=None):
    """Conservative loss on a batch and its parameter gradients.

    ``z_plus`` may be supplied to hold the mined points fixed.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    E = np.asarray(E, dtype=float).reshape(-1)
    if len(Z) == 0:
        raise EmptyDataset("empty batch")
    B = len(Z)
    if z_plus is None:
        z_plus = mine_adversarial(model, Z, cfg)
    out, cache = nn.forward_cached(model.net, Z)
    pred = out[:, 0]
    resid = pred - E
    mse = float(np.mean(resid**2))
    out_p, cache_p = nn.forward_cached(model.net, z_plus)
    gap = float(np.mean(pred) - np.mean(out_p[:, 0]))
    # - alpha * (mean(plus) - mean(data)) == alpha * gap
    loss = mse + alpha * gap
    diag = ComsDiagnostics(mse, gap, alpha)
    if not need_grad:
        return loss, diag, None
    up = (2.0 * resid + alpha) / B
    grads, _ = nn.backward_cached(model.net, cache, up[:, None])
    if alpha != 0.0:
        grads_p, _ = nn.backward_cached(model.net, cache_p, np.full((B, 1), -alpha / B))
        grads = [g + gp for g, gp in zip(grads, grads_p)]
    return loss, diag, grads


def train_surrogate(latents, cfg: ComsConfig | None = None) -> SurrogateModel:
    """Minibatch Adam on the conservative loss.

    In dual mode alpha starts at ``alpha_init`` and after every batch moves
    by ``dual_lr * (gap - tau)``, clipped to ``[0, alpha_max]``. ``tau`` is in
    standardized energy units. ``model.log`` gets per-epoch mean MSE, gap and
    the final alpha.
    """
    cfg = cfg or ComsConfig()
    if len(latents) < 2:
        raise EmptyDataset("need at least two latent records")
    comps = {r.composition for r in latents}
    if len(comps) != 1:
        raise CompositionMismatch(f"mixed compositions {sorted(comps)}")
    Z = np.stack([r.z for r in latents])
    E = np.array([r.energy for r in latents])
    mean, std = energy_stats([r.raw_energy for r in latents])
    net = nn.init([Z.shape[1]] + [cfg.hidden] * cfg.layers + [1], seed=cfg.seed)
    model = SurrogateModel(net, mean, std, latents[0].composition)
    opt = nn.Adam(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    alpha = cfg.alpha_init if cfg.dual else cfg.alpha
    params = net.params
    N = len(Z)
    for epoch in range(cfg.epochs):
        order = rng.permutation(N)
        mse_sum = gap_sum = 0.0
        for start in range(0, N, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, diag, grads = coms_loss(model, Z[idx], E[idx], alpha, cfg)
            opt.step(params, grads)
            mse_sum += diag.mse * len(idx)
            gap_sum += diag.gap * len(idx)
            if cfg.dual:
                alpha = float(np.clip(alpha + cfg.dual_lr * (diag.gap - cfg.tau), 0.0, cfg.alpha_max))
        model.log.append({"epoch": epoch, "mse": mse_sum / N, "gap": gap_sum / N, "alpha": alpha})
    log.debug("surrogate %s final %s", model.composition, model.log[-1] if model.log else None)
    return model


def train_naive(latents, cfg: ComsConfig | None = None) -> SurrogateModel:
    """Plain regression: the conservative trainer with alpha fixed at zero."""
    cfg = ComsConfig(**{**asdict(cfg or ComsConfig()), "alpha": 0.0, "tau": None})
    return train_surrogate(latents, cfg)


def mined_gap(model: SurrogateModel, Z, cfg: ComsConfig) -> float:
    """``mean E_hat(z_plus) - mean E_hat(z)`` over the given latents (standardized units)."""
    Z = np.atleast_2d(Z)
    return float(np.mean(model.predict(mine_adversarial(model, Z, cfg))) - np.mean(model.predict(Z)))
