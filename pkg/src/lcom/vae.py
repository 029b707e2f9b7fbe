"""Crystal VAE with a denoising-score decoder.

Three networks share one latent space:

* the encoder maps a structure to a Gaussian posterior ``(mu, logvar)``;
* the lattice head maps a latent vector to six normalized cell parameters;
* the score network maps noisy fractional coordinates, a latent vector and a
  noise level to a displacement field pointing back at the clean coordinates.

Decoding reads the cell off the lattice head and recovers coordinates from
uniform noise by annealed Langevin dynamics driven by the score network.
Fractional coordinates enter the networks through ``sin/cos(2 pi x)`` so that
periodic images look identical.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .crystal import (
    ANGLE_REF,
    LEN_REF,
    Composition,
    Crystal,
    featurize,
    lattice_from_params,
    lattice_volume_factor,
    min_image_frac,
    wrap_frac,
)
from .errors import CompositionMismatch, DegenerateCell, EmptyDataset, NonFinite

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseSchedule:
    """Geometric noise levels, largest first: ``sigma_j = sigma_max * r**-(j-1)``."""

    sigma_max: float = 0.5
    sigma_min: float = 0.01
    levels: int = 10

    def __post_init__(self):
        if not (self.sigma_max > self.sigma_min > 0) or self.levels < 2:
            raise ValueError("need sigma_max > sigma_min > 0 and at least two levels")

    @property
    def sigmas(self) -> np.ndarray:
        return np.geomspace(self.sigma_max, self.sigma_min, self.levels)

    @property
    def ratio(self) -> float:
        return (self.sigma_max / self.sigma_min) ** (1.0 / (self.levels - 1))

    def embed(self, j) -> np.ndarray:
        """Scalar level feature in [0, 1] (0 at the largest sigma)."""
        return np.asarray(j, dtype=float) / (self.levels - 1)


@dataclass
class VaeConfig:
    latent_dim: int = 32
    hidden: int = 256
    epochs: int = 3000
    batch_size: int = 64
    lr: float = 1e-3
    #: learning rate at the last epoch, decayed geometrically; None keeps ``lr``
    lr_final: float | None = None
    beta_kl: float = 0.01
    lambda_dec: float = 1.0
    seed: int = 0
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    langevin_steps: int = 30
    eta_base: float = 2e-4
    final_denoise: bool = True
    len_ref: float = LEN_REF

    @classmethod
    def from_dict(cls, d: dict) -> "VaeConfig":
        d = dict(d)
        if "schedule" in d and not isinstance(d["schedule"], NoiseSchedule):
            d["schedule"] = NoiseSchedule(**d["schedule"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def periodic_embed(frac_flat) -> np.ndarray:
    a = 2.0 * np.pi * np.asarray(frac_flat, dtype=float)
    return np.concatenate([np.sin(a), np.cos(a)], axis=-1)


@dataclass(eq=False)
class CdVaeModel:
    composition: str
    encoder: nn.MLP
    lattice_head: nn.MLP
    score_net: nn.MLP
    schedule: NoiseSchedule
    len_ref: float = LEN_REF
    langevin_steps: int = 30
    eta_base: float = 2e-4
    #: finish decoding with one noise-free step ``x + sigma_L**2 * score``
    final_denoise: bool = True
    #: (lo, hi) clamp bounds for decoded a, b, c and for the three angles
    length_bounds: tuple = (0.5, 5.0)
    angle_bounds: tuple = (30.0, 150.0)
    log: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return Composition.parse(self.composition).n

    @property
    def latent_dim(self) -> int:
        return self.lattice_head.layer_sizes[0]

    @property
    def nets(self) -> list[nn.MLP]:
        return [self.encoder, self.lattice_head, self.score_net]

    def params(self) -> list[np.ndarray]:
        return [p for net in self.nets for p in net.params]

    def to_dict(self) -> dict:
        return {
            "format": "lcom-vae",
            "version": 1,
            "composition": self.composition,
            "latent_dim": self.latent_dim,
            "schedule": asdict(self.schedule),
            "len_ref": self.len_ref,
            "langevin_steps": self.langevin_steps,
            "eta_base": self.eta_base,
            "final_denoise": self.final_denoise,
            "length_bounds": list(self.length_bounds),
            "angle_bounds": list(self.angle_bounds),
            "encoder": self.encoder.to_dict(),
            "lattice_head": self.lattice_head.to_dict(),
            "score_net": self.score_net.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CdVaeModel":
        if d.get("format") != "lcom-vae":
            raise ValueError("not an lcom-vae checkpoint")
        return cls(
            composition=d["composition"],
            encoder=nn.MLP.from_dict(d["encoder"]),
            lattice_head=nn.MLP.from_dict(d["lattice_head"]),
            score_net=nn.MLP.from_dict(d["score_net"]),
            schedule=NoiseSchedule(**d["schedule"]),
            len_ref=d["len_ref"],
            langevin_steps=d["langevin_steps"],
            eta_base=d["eta_base"],
            final_denoise=d["final_denoise"],
            length_bounds=tuple(d["length_bounds"]),
            angle_bounds=tuple(d["angle_bounds"]),
        )


def build_model(composition: str, cfg: VaeConfig) -> CdVaeModel:
    n = Composition.parse(composition).n
    h, dz = cfg.hidden, cfg.latent_dim
    seeds = np.random.SeedSequence(cfg.seed).generate_state(3)
    return CdVaeModel(
        composition=composition,
        encoder=nn.init([6 + 6 * n, h, h, 2 * dz], seed=int(seeds[0])),
        lattice_head=nn.init([dz, h, h, 6], seed=int(seeds[1])),
        score_net=nn.init([6 * n + dz + 1, h, h, 3 * n], seed=int(seeds[2])),
        schedule=cfg.schedule,
        len_ref=cfg.len_ref,
        langevin_steps=cfg.langevin_steps,
        eta_base=cfg.eta_base,
        final_denoise=cfg.final_denoise,
    )


def _encoder_input(features: np.ndarray) -> np.ndarray:
    return np.concatenate([features[..., :6], periodic_embed(features[..., 6:])], axis=-1)


def _check_comp(model: CdVaeModel, crystal: Crystal) -> None:
    if crystal.composition != model.composition:
        raise CompositionMismatch(f"model is for {model.composition}, got {crystal.composition}")


def encode(model: CdVaeModel, crystal: Crystal):
    """Posterior mean and log-variance; the mean is the latent code used downstream."""
    _check_comp(model, crystal)
    out = nn.forward(model.encoder, _encoder_input(featurize(crystal, model.len_ref)))
    dz = model.latent_dim
    return out[:dz], out[dz:]


def encode_many(model: CdVaeModel, crystals) -> np.ndarray:
    for c in crystals:
        _check_comp(model, c)
    X = np.stack([featurize(c, model.len_ref) for c in crystals])
    return nn.forward(model.encoder, _encoder_input(X))[:, : model.latent_dim]


def kl_loss(mu, logvar) -> float:
    mu = np.asarray(mu, dtype=float)
    logvar = np.asarray(logvar, dtype=float)
    return float(0.5 * np.sum(mu * mu + np.maximum(np.expm1(logvar) - logvar, 0.0)))


def lattice_target(crystal: Crystal, len_ref: float = LEN_REF) -> np.ndarray:
    return featurize(crystal, len_ref)[:6]


def lattice_loss(model: CdVaeModel, z, crystal: Crystal) -> float:
    pred = nn.forward(model.lattice_head, z)
    return float(np.sum((pred - lattice_target(crystal, model.len_ref)) ** 2))


def score_input(model: CdVaeModel, x_noisy, z, level) -> np.ndarray:
    x_noisy = np.atleast_2d(x_noisy)
    z = np.broadcast_to(np.atleast_2d(z), (len(x_noisy), model.latent_dim))
    emb = np.broadcast_to(model.schedule.embed(level), (len(x_noisy),))[:, None]
    return np.concatenate([periodic_embed(x_noisy), z, emb], axis=1)


def score_output(model: CdVaeModel, x_noisy, z, level) -> np.ndarray:
    """Raw network output, trained towards ``d(x, x_noisy) / sigma_j`` (an O(1) quantity)."""
    return nn.forward(model.score_net, score_input(model, x_noisy, z, level))


def score(model: CdVaeModel, x_noisy, z, level) -> np.ndarray:
    """Score estimate ``grad log p``: the network output divided by the level's sigma."""
    sig = model.schedule.sigmas[np.asarray(level)]
    return score_output(model, x_noisy, z, level) / np.reshape(sig, (-1, 1))


def denoise_target(x_clean, x_noisy, sigma):
    return min_image_frac(np.asarray(x_clean) - np.asarray(x_noisy)) / sigma


def denoise_loss(model: CdVaeModel, crystal: Crystal, z, schedule: NoiseSchedule | None, rng: np.random.Generator, noise=None, score_fn=None) -> float:
    """Squared error between the score network output and ``d(x, x_noisy) / sigma_j``.

    The level is drawn uniformly. ``noise`` overrides the Gaussian draw
    (shape ``(3n,)``); ``score_fn(x_noisy, z, j)`` replaces the network,
    which the tests use to plug in stubs.
    """
    schedule = schedule or model.schedule
    x = crystal.frac.reshape(-1)
    j = int(rng.integers(schedule.levels))
    sig = schedule.sigmas[j]
    eps = rng.standard_normal(x.shape) if noise is None else np.asarray(noise, dtype=float)
    x_noisy = wrap_frac(x + sig * eps)
    target = denoise_target(x, x_noisy, sig)
    s = score_output(model, x_noisy, z, j)[0] if score_fn is None else score_fn(x_noisy, z, j)
    return float(np.sum((s - target) ** 2))


def _batch_loss(model: CdVaeModel, feats, frac, cfg: VaeConfig, rng: np.random.Generator, need_grad: bool = True, draws=None):
    """Mean total loss over a batch plus parameter gradients.

    ``draws`` fixes the random quantities (``eps_z``, ``levels``, ``eps_x``)
    for gradient checking.
    """
    B = len(feats)
    dz = model.latent_dim
    sched = model.schedule
    if draws is None:
        draws = {
            "eps_z": rng.standard_normal((B, dz)),
            "levels": rng.integers(sched.levels, size=B),
            "eps_x": rng.standard_normal(frac.shape),
        }
    enc_out, enc_cache = nn.forward_cached(model.encoder, _encoder_input(feats))
    mu, logvar = enc_out[:, :dz], enc_out[:, dz:]
    std = np.exp(0.5 * logvar)
    z = mu + std * draws["eps_z"]

    pred, head_cache = nn.forward_cached(model.lattice_head, z)
    resid = pred - feats[:, :6]
    l_lat = float(np.sum(resid**2)) / B

    kl_terms = mu * mu + np.maximum(np.expm1(logvar) - logvar, 0.0)
    l_kl = 0.5 * float(np.sum(kl_terms)) / B

    sig = sched.sigmas[draws["levels"]][:, None]
    x_noisy = wrap_frac(frac + sig * draws["eps_x"])
    target = min_image_frac(frac - x_noisy) / sig
    raw, score_cache = nn.forward_cached(model.score_net, score_input(model, x_noisy, z, draws["levels"]))
    s_resid = raw - target
    l_dec = float(np.sum(s_resid**2)) / B

    total = l_lat + cfg.beta_kl * l_kl + cfg.lambda_dec * l_dec
    terms = {"total": total, "lattice": l_lat, "kl": l_kl, "denoise": l_dec}
    if not need_grad:
        return terms, None

    g_head, dz_head = nn.backward_cached(model.lattice_head, head_cache, 2.0 * resid / B)
    g_score, d_in = nn.backward_cached(model.score_net, score_cache, cfg.lambda_dec * 2.0 * s_resid / B)
    n6 = 6 * model.n
    d_z = dz_head + d_in[:, n6:n6 + dz]
    d_mu = d_z + cfg.beta_kl * mu / B
    d_logvar = d_z * draws["eps_z"] * 0.5 * std + cfg.beta_kl * 0.5 * (np.exp(logvar) - 1.0) / B
    g_enc, _ = nn.backward_cached(model.encoder, enc_cache, np.concatenate([d_mu, d_logvar], axis=1))
    return terms, g_enc + g_head + g_score


def _cell_bounds(crystals, n: int):
    p = np.stack([c.params() for c in crystals])
    lengths, angles = p[:, :3], p[:, 3:]
    lo = max(0.8 * lengths.min(), 0.3)
    hi = 1.25 * lengths.max()
    alo = max(angles.min() - 10.0, 20.0)
    ahi = min(angles.max() + 10.0, 160.0)
    return (float(lo), float(hi)), (float(alo), float(ahi))


def train_vae(dataset, cfg: VaeConfig | None = None, composition: str | None = None) -> CdVaeModel:
    """Fit encoder, lattice head and score network jointly with Adam.

    ``dataset`` holds crystals or records with a ``.crystal`` attribute, all
    of a single composition. ``model.log`` gets one dict of mean loss terms
    per epoch.
    """
    cfg = cfg or VaeConfig()
    crystals = [getattr(r, "crystal", r) for r in dataset]
    if not crystals:
        raise EmptyDataset("cannot train a VAE on an empty dataset")
    composition = composition or crystals[0].composition
    if any(c.composition != composition for c in crystals):
        raise CompositionMismatch("train_vae expects a single composition")
    model = build_model(composition, cfg)
    model.length_bounds, model.angle_bounds = _cell_bounds(crystals, model.n)
    feats = np.stack([featurize(c, cfg.len_ref) for c in crystals])
    frac = feats[:, 6:]
    opt = nn.Adam(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    params = model.params()
    N = len(feats)
    decay = ((cfg.lr_final or cfg.lr) / cfg.lr) ** (1.0 / max(cfg.epochs - 1, 1))
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr * decay**epoch
        order = rng.permutation(N)
        sums = {"total": 0.0, "lattice": 0.0, "kl": 0.0, "denoise": 0.0}
        for start in range(0, N, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            terms, grads = _batch_loss(model, feats[idx], frac[idx], cfg, rng)
            opt.step(params, grads)
            for k in sums:
                sums[k] += terms[k] * len(idx)
        model.log.append({"epoch": epoch, **{k: v / N for k, v in sums.items()}})
        if epoch % 50 == 0 or epoch == cfg.epochs - 1:
            log.debug("vae %s epoch %d %s", composition, epoch, model.log[-1])
    return model


def decode_lattice(model: CdVaeModel, z) -> np.ndarray:
    """Lattice matrix from the head output, clamped to the model's cell bounds.

    An angle triple that cannot span a cell is pulled towards 90 degrees
    until it can.
    """
    p = nn.forward(model.lattice_head, np.asarray(z, dtype=float))
    if not np.all(np.isfinite(p)):
        raise DegenerateCell("lattice head output is not finite")
    lengths = np.clip(p[:3] * model.len_ref, *model.length_bounds)
    angles = np.clip(p[3:] * ANGLE_REF, *model.angle_bounds)
    for shrink in np.linspace(1.0, 0.0, 21):
        if lattice_volume_factor(*(90.0 + shrink * (angles - 90.0))) > 0.05:
            return lattice_from_params(*lengths, *(90.0 + shrink * (angles - 90.0)))
    raise DegenerateCell(f"cannot build a cell from angles {angles}")


def langevin(model: CdVaeModel, z, rng: np.random.Generator, x0=None) -> np.ndarray:
    """Annealed Langevin dynamics over flat fractional coordinates."""
    sigmas = model.schedule.sigmas
    n3 = 3 * model.n
    x = rng.uniform(0.0, 1.0, n3) if x0 is None else np.asarray(x0, dtype=float).copy()
    for j, sig in enumerate(sigmas):
        eta = model.eta_base * (sig / sigmas[-1]) ** 2
        for _ in range(model.langevin_steps):
            s = score(model, x, z, j)[0]
            x = wrap_frac(x + 0.5 * eta * s + np.sqrt(eta) * rng.standard_normal(n3))
    if model.final_denoise:
        last = len(sigmas) - 1
        x = wrap_frac(x + sigmas[last] * score_output(model, x, z, last)[0])
    return x


def decode(model: CdVaeModel, z, composition: str | None = None, schedule: NoiseSchedule | None = None, rng: np.random.Generator | None = None) -> Crystal:
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise NonFinite("latent vector is not finite")
    composition = composition or model.composition
    if composition != model.composition:
        raise CompositionMismatch(f"model is for {model.composition}, asked for {composition}")
    if schedule is not None and schedule != model.schedule:
        model = _with_schedule(model, schedule)
    rng = rng if rng is not None else np.random.default_rng(0)
    lattice = decode_lattice(model, z)
    x = langevin(model, z, rng)
    comp = Composition.parse(composition)
    return Crystal(lattice, comp.species, x.reshape(-1, 3), composition)


def _with_schedule(model: CdVaeModel, schedule: NoiseSchedule) -> CdVaeModel:
    if schedule.levels != model.schedule.levels:
        raise ValueError("decode schedule must have as many levels as the trained one")
    clone = CdVaeModel(**{**model.__dict__, "schedule": schedule})
    return clone
