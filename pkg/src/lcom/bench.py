"""Benchmark harness: metrics, the four methods, trajectory probes and timing."""

from __future__ import annotations

import csv
import hashlib
import io as _io
import logging
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io
from .config import RunConfig
from .crystal import Composition, Crystal, crystal_to_record, record_to_crystal
from .errors import LcomError, ZeroReference
from .optimize import descend, lcom_optimize
from .oracle import (
    GlobalMinimum,
    _random_cell,
    derive_seed,
    generate_dataset,
    global_minimum,
    random_stable_structure,
    relax,
    total_energy,
)
from .surrogate import ComsConfig, SurrogateModel, encode_dataset, train_naive, train_surrogate
from .vae import CdVaeModel, decode, encode, train_vae

log = logging.getLogger(__name__)

CSV_HEADER = ["method", "composition", "seed", "E_init", "E_final", "E_global", "success", "improvement", "seconds"]
METHODS = ("LCOM", "SL", "decode-only", "random-search")


def success(E_global: float, E_found: float, threshold: float = 0.2) -> bool:
    """True when ``(E_found - E_global) / |E_global| <= threshold`` (boundary included)."""
    if abs(E_global) < 1e-12:
        raise ZeroReference("global minimum energy is zero")
    return bool((E_found - E_global) / abs(E_global) <= threshold)


def improvement(E_init: float, E_final: float) -> float:
    """Relative energy decrease ``(E_init - E_final) / |E_init|``."""
    if abs(E_init) <= 1e-12:
        raise ZeroReference("initial energy is zero")
    return (E_init - E_final) / abs(E_init)


def _comp_key(composition: str) -> int:
    return zlib.crc32(composition.encode("utf-8"))


@dataclass
class Artifacts:
    """Everything trained or searched for one composition."""

    composition: str
    dataset: list
    vae: CdVaeModel
    coms: SurrogateModel
    naive: SurrogateModel
    global_min: GlobalMinimum
    latents: list
    seconds: dict = field(default_factory=dict)


def _cached_global_minimum(cfg: RunConfig, composition: str, seed: int) -> GlobalMinimum:
    spec = cfg.spec
    if cfg.cache_dir is None:
        return global_minimum(composition, spec, cfg.global_budget, seed, cfg.init)
    key = {"composition": composition, "potential": spec.to_dict(), "budget": cfg.global_budget, "seed": seed, "init": repr(cfg.init)}
    digest = hashlib.sha256(io.dumps(key).encode()).hexdigest()[:20]
    path = Path(cfg.cache_dir) / f"gmin-{composition}-{digest}.json"
    if path.exists():
        d = io.read_json(path)
        crystal, energy = record_to_crystal(d["record"])
        return GlobalMinimum(crystal, energy, d["budget"], d["seed"])
    gm = global_minimum(composition, spec, cfg.global_budget, seed, cfg.init)
    path.parent.mkdir(parents=True, exist_ok=True)
    io.write_json(path, {"record": crystal_to_record(gm.crystal, gm.energy), "budget": gm.budget, "seed": gm.seed})
    return gm


def prepare(cfg: RunConfig, composition: str) -> Artifacts:
    """Dataset, VAE, conservative and naive surrogates and the global-minimum reference."""
    spec = cfg.spec
    key = _comp_key(composition)
    seconds = {}
    t = time.perf_counter()
    dataset = generate_dataset([composition], cfg.dataset.per_comp, spec, derive_seed(cfg.master_seed, key, 1), cfg.init, cfg.dataset.retry_factor)
    seconds["dataset"] = time.perf_counter() - t
    t = time.perf_counter()
    vae = train_vae(dataset, replace(cfg.vae, seed=derive_seed(cfg.master_seed, key, 2, cfg.vae.seed)))
    seconds["vae"] = time.perf_counter() - t
    t = time.perf_counter()
    latents = encode_dataset(vae, dataset)
    scfg = replace(cfg.surrogate, seed=derive_seed(cfg.master_seed, key, 3, cfg.surrogate.seed))
    coms = train_surrogate(latents, scfg)
    naive = train_naive(latents, scfg)
    seconds["surrogate"] = time.perf_counter() - t
    t = time.perf_counter()
    gm = _cached_global_minimum(cfg, composition, derive_seed(cfg.master_seed, key, 4))
    seconds["global_min"] = time.perf_counter() - t
    log.info("prepared %s: %d records, E_global %.4f, %s", composition, len(dataset), gm.energy, {k: round(v, 1) for k, v in seconds.items()})
    return Artifacts(composition, dataset, vae, coms, naive, gm, latents, seconds)


def initial_structure(cfg: RunConfig, composition: str, seed: int) -> Crystal:
    return random_stable_structure(composition, cfg.spec, derive_seed(cfg.master_seed, _comp_key(composition), 10, seed), cfg.init)


def _decode_rng(cfg: RunConfig, composition: str, seed: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(cfg.master_seed, _comp_key(composition), 11, seed))


def score(cfg: RunConfig, crystal: Crystal, relax_first: bool | None = None) -> float:
    """Oracle energy of a proposed structure, after one local relaxation when configured.

    Structures the oracle cannot evaluate (overlapping atoms, a relaxation
    that diverges) score ``+inf``.
    """
    relax_first = cfg.final_relax if relax_first is None else relax_first
    spec = cfg.spec
    try:
        if relax_first:
            r = cfg.init.relax
            crystal = relax(crystal, spec, r.max_steps, r.g_tol, r)
        return total_energy(crystal, spec)
    except (LcomError, ValueError, ArithmeticError, RuntimeError):
        return float("inf")


@dataclass
class Row:
    method: str
    composition: str
    seed: int
    E_init: float
    E_final: float
    E_global: float
    success: bool
    improvement: float
    seconds: float


def _row(method, composition, seed, E_init, E_final, E_global, threshold, seconds) -> Row:
    imp = improvement(E_init, E_final) if np.isfinite(E_final) else float("-inf")
    return Row(method, composition, seed, E_init, E_final, E_global, success(E_global, E_final, threshold), imp, seconds)


def run_methods(cfg: RunConfig, art: Artifacts, seed: int, models: dict | None = None, baselines: bool = True) -> list[Row]:
    """Evaluate every method from the same initial structure.

    ``models`` maps method names to surrogates that are descended; the
    default is LCOM (conservative) and SL (naive). Decode-only and random
    search are added unless ``baselines`` is false.
    """
    comp = art.composition
    x0 = initial_structure(cfg, comp, seed)
    E_init = total_energy(x0, cfg.spec)
    E_glob = art.global_min.energy
    T, step = cfg.optimizer.steps, cfg.optimizer.step_size
    models = models if models is not None else {"LCOM": art.coms, "SL": art.naive}
    rows = []
    runs = list(models.items()) + ([("decode-only", art.coms)] if baselines else [])
    for method, model in runs:
        t = time.perf_counter()
        try:
            res = lcom_optimize(art.vae, model, x0, 0 if method == "decode-only" else T, step, rng=_decode_rng(cfg, comp, seed))
            secs = time.perf_counter() - t
            E_final = score(cfg, res.crystal)
        except LcomError as exc:
            log.warning("%s %s seed %d failed: %s", method, comp, seed, exc)
            secs, E_final = time.perf_counter() - t, float("inf")
        rows.append(_row(method, comp, seed, E_init, E_final, E_glob, cfg.threshold, secs))
    if not baselines:
        return rows
    t = time.perf_counter()
    x_rs = random_stable_structure(comp, cfg.spec, derive_seed(cfg.master_seed, _comp_key(comp), 12, seed), cfg.init)
    secs = time.perf_counter() - t
    rows.append(_row("random-search", comp, seed, E_init, total_energy(x_rs, cfg.spec), E_glob, cfg.threshold, secs))
    return rows


@dataclass
class BenchmarkResult:
    rows: list
    failures: dict
    artifacts: dict
    seconds: float = 0.0

    def summary(self, threshold: float = 0.2) -> dict:
        return summarize(self.rows, threshold)


def summarize(rows, threshold: float = 0.2) -> dict:
    """Per method: per-composition mean energies and success, success count, mean improvement.

    A composition counts as solved when the seed-averaged final energy is
    within the threshold of its global minimum.
    """
    out = {}
    for method in dict.fromkeys(r.method for r in rows):
        mrows = [r for r in rows if r.method == method]
        comps = {}
        for comp in dict.fromkeys(r.composition for r in mrows):
            crow = [r for r in mrows if r.composition == comp]
            e_mean = float(np.mean([r.E_final for r in crow]))
            comps[comp] = {
                "E_final_mean": e_mean,
                "E_global": crow[0].E_global,
                "success": success(crow[0].E_global, e_mean, threshold),
                "improvement_mean": float(np.mean([r.improvement for r in crow])),
                "seed_successes": sum(r.success for r in crow),
            }
        out[method] = {
            "compositions": comps,
            "successes": sum(c["success"] for c in comps.values()),
            "total": len(comps),
            "mean_improvement": float(np.mean([r.improvement for r in mrows])),
        }
    return out


def _prepare_safe(cfg, comp):
    try:
        return comp, prepare(cfg, comp), None
    except Exception as exc:  # recorded per composition, the run goes on
        log.exception("composition %s failed", comp)
        return comp, None, f"{type(exc).__name__}: {exc}"


def run_benchmark(cfg: RunConfig, workers: int | None = None) -> BenchmarkResult:
    t0 = time.perf_counter()
    workers = cfg.workers if workers is None else workers
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            prepared = list(pool.map(lambda c: _prepare_safe(cfg, c), cfg.compositions))
    else:
        prepared = [_prepare_safe(cfg, c) for c in cfg.compositions]
    rows, failures, artifacts = [], {}, {}
    for comp, art, err in prepared:
        if err is not None:
            failures[comp] = err
            continue
        artifacts[comp] = art
        try:
            for seed in cfg.seeds:
                rows.extend(run_methods(cfg, art, seed))
        except Exception as exc:
            log.exception("evaluation of %s failed", comp)
            failures[comp] = f"{type(exc).__name__}: {exc}"
            rows = [r for r in rows if r.composition != comp]
    order = {m: i for i, m in enumerate(METHODS)}
    rows.sort(key=lambda r: (cfg.compositions.index(r.composition), cfg.seeds.index(r.seed), order.get(r.method, len(order))))
    return BenchmarkResult(rows, failures, artifacts, time.perf_counter() - t0)


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def rows_to_csv(rows, with_seconds: bool = True) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r.method, r.composition, r.seed] + [_fmt(v) for v in (r.E_init, r.E_final, r.E_global, r.success, r.improvement)] + [_fmt(r.seconds) if with_seconds else ""])
    return buf.getvalue()


def read_csv_rows(path) -> list[Row]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for d in csv.DictReader(fh):
            rows.append(
                Row(
                    d["method"],
                    d["composition"],
                    int(d["seed"]),
                    float(d["E_init"]),
                    float(d["E_final"]),
                    float(d["E_global"]),
                    d["success"] == "true",
                    float(d["improvement"]),
                    float(d["seconds"]) if d["seconds"] else float("nan"),
                )
            )
    return rows


def audit(rows, threshold: float = 0.2) -> list[str]:
    """Rows whose stored success flag disagrees with the stored energies."""
    return [f"{r.method}/{r.composition}/{r.seed}" for r in rows if success(r.E_global, r.E_final, threshold) != r.success]


def format_summary(summary: dict, cfg: RunConfig, failures: dict | None = None) -> str:
    lines = [f"threshold {cfg.threshold}  global-minimum budget {cfg.global_budget}  seeds {cfg.seeds}", ""]
    comps = list(dict.fromkeys(c for m in summary.values() for c in m["compositions"]))
    methods = list(summary)
    lines.append("composition  " + "  ".join(f"{m:>14s}" for m in methods) + "      E_global")
    for comp in comps:
        cells = []
        for m in methods:
            c = summary[m]["compositions"].get(comp)
            cells.append(f"{'ok' if c and c['success'] else '--':>3s} {c['E_final_mean'] if c else float('nan'):10.4f}")
        eg = next(summary[m]["compositions"][comp]["E_global"] for m in methods if comp in summary[m]["compositions"])
        lines.append(f"{comp:11s}  " + "  ".join(f"{c:>14s}" for c in cells) + f"  {eg:12.4f}")
    lines.append("")
    lines.append("accuracy     " + "  ".join(f"{summary[m]['successes']:>8d}/{summary[m]['total']:<5d}" for m in methods))
    lines.append("improvement  " + "  ".join(f"{summary[m]['mean_improvement']:>14.4f}" for m in methods))
    for comp, err in (failures or {}).items():
        lines.append(f"FAILED {comp}: {err}")
    return "\n".join(lines) + "\n"


def write_reports(result: BenchmarkResult, cfg: RunConfig, out_dir, deterministic: bool = False) -> dict:
    """Write metrics.csv, summary.txt and per-composition structure files.

    With ``deterministic`` the wall-clock seconds go to timings.json only,
    leaving the ``seconds`` column of metrics.csv empty so that reruns are
    byte-identical.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": out / "metrics.csv", "summary": out / "summary.txt"}
    paths["metrics"].write_text(rows_to_csv(result.rows, with_seconds=not deterministic), encoding="utf-8")
    paths["summary"].write_text(format_summary(result.summary(cfg.threshold), cfg, result.failures), encoding="utf-8")
    timings = {
        "rows": [{"method": r.method, "composition": r.composition, "seed": r.seed, "seconds": r.seconds} for r in result.rows],
        "prepare": {c: a.seconds for c, a in result.artifacts.items()},
        "total": result.seconds,
    }
    paths["timings"] = out / "timings.json"
    io.write_json(paths["timings"], timings)
    for comp, art in result.artifacts.items():
        io.write_lines(out / f"dataset-{comp}.jsonl", [crystal_to_record(r.crystal, r.energy) for r in art.dataset])
        io.write_json(out / f"global-min-{comp}.json", {"record": crystal_to_record(art.global_min.crystal, art.global_min.energy), "budget": art.global_min.budget, "seed": art.global_min.seed})
    return paths


@dataclass
class ProbePoint:
    method: str
    composition: str
    seed: int
    step: int
    surrogate_energy: float
    oracle_energy: float
    raw_energy: float


def trajectory_probe(cfg: RunConfig, art: Artifacts, seeds=None, stride: int | None = None, models: dict | None = None) -> list[ProbePoint]:
    """Oracle energies of decoded iterates along each method's descent.

    Every ``stride``-th iterate and the last one are decoded with the same
    decoding noise as the benchmark. ``oracle_energy`` is the configured
    score; ``raw_energy`` is the decoded structure as is. Structures the
    oracle cannot evaluate show up as ``inf``.
    """
    seeds = cfg.seeds if seeds is None else seeds
    stride = cfg.trajectory_stride if stride is None else stride
    T, step = cfg.optimizer.steps, cfg.optimizer.step_size
    models = models if models is not None else {"LCOM": art.coms, "SL": art.naive}
    points = []
    for seed in seeds:
        x0 = initial_structure(cfg, art.composition, seed)
        z0, _ = encode(art.vae, x0)
        for method, model in models.items():
            traj = descend(model, z0, T, step)
            ks = sorted(set(range(0, T + 1, max(stride, 1))) | {T})
            for k in ks:
                try:
                    x = decode(art.vae, traj.z[k], rng=_decode_rng(cfg, art.composition, seed))
                    raw, e = score(cfg, x, False), score(cfg, x)
                except LcomError:
                    raw = e = float("inf")
                surr = float(model.e_mean + model.e_std * traj.energies[k])
                points.append(ProbePoint(method, art.composition, seed, k, surr, e, raw))
    return points


def probe_to_csv(points) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "composition", "seed", "step", "surrogate_energy", "oracle_energy", "raw_energy"])
    for p in points:
        w.writerow([p.method, p.composition, p.seed, p.step, _fmt(p.surrogate_energy), _fmt(p.oracle_energy), _fmt(p.raw_energy)])
    return buf.getvalue()


def probe_endpoints(points) -> dict:
    """``(method, composition, seed) -> (oracle energy at step 0, at the last step)``."""
    ends: dict = {}
    for p in points:
        key = (p.method, p.composition, p.seed)
        first, last = ends.get(key, (None, None))
        if p.step == 0:
            first = p.oracle_energy
        if last is None or p.step >= last[0]:
            last = (p.step, p.oracle_energy)
        ends[key] = (first, last)
    return {k: (v[0], v[1][1]) for k, v in ends.items()}


def timing_report(cfg: RunConfig, art: Artifacts, seeds=None, repeats: int = 3) -> dict:
    """Per-structure wall-clock seconds of the optimization phases and of one oracle relaxation.

    Phases are timed separately and the total is their sum. ``descend_2T``
    times a descent twice as long, for the scaling check.
    """
    seeds = cfg.seeds if seeds is None else seeds
    T, step = cfg.optimizer.steps, cfg.optimizer.step_size
    spec = cfg.spec
    comp = Composition.parse(art.composition)
    acc = {"encode": [], "descend": [], "decode": [], "descend_2T": [], "relax": []}
    for seed in seeds:
        x0 = initial_structure(cfg, art.composition, seed)
        for _ in range(repeats):
            t = time.perf_counter()
            z0, _ = encode(art.vae, x0)
            acc["encode"].append(time.perf_counter() - t)
            t = time.perf_counter()
            traj = descend(art.coms, z0, T, step)
            acc["descend"].append(time.perf_counter() - t)
            t = time.perf_counter()
            descend(art.coms, z0, 2 * T, step)
            acc["descend_2T"].append(time.perf_counter() - t)
            t = time.perf_counter()
            decode(art.vae, traj.z[-1], rng=_decode_rng(cfg, art.composition, seed))
            acc["decode"].append(time.perf_counter() - t)
        rng = np.random.default_rng(derive_seed(cfg.master_seed, _comp_key(art.composition), 13, seed))
        r = cfg.init.relax
        for _ in range(repeats):
            x = _random_cell(comp, rng, cfg.init)
            t = time.perf_counter()
            try:
                relax(x, spec, r.max_steps, r.g_tol, r)
            except LcomError:
                continue
            acc["relax"].append(time.perf_counter() - t)
    rep = {k: float(np.median(v)) if v else float("nan") for k, v in acc.items()}
    rep["total"] = rep["encode"] + rep["descend"] + rep["decode"]
    rep["relax_over_descend"] = rep["relax"] / rep["descend"]
    rep["composition"] = art.composition
    return rep


def tau_ablation(cfg: RunConfig, art: Artifacts, taus=(0.5, 1.0, 5.0), seeds=None) -> dict:
    """Mean improvement of the pipeline with a dual-mode surrogate for each ``tau``."""
    seeds = cfg.seeds if seeds is None else seeds
    out = {}
    for tau in taus:
        scfg = replace(cfg.surrogate, tau=float(tau), seed=derive_seed(cfg.master_seed, _comp_key(art.composition), 3, cfg.surrogate.seed))
        model = train_surrogate(art.latents, scfg)
        imps = []
        for seed in seeds:
            rows = run_methods(cfg, art, seed, models={f"tau={tau}": model}, baselines=False)
            imps.append(rows[0].improvement)
        out[float(tau)] = float(np.mean(imps))
    return out


__all__ = [
    "success",
    "improvement",
    "prepare",
    "run_benchmark",
    "run_methods",
    "trajectory_probe",
    "timing_report",
    "tau_ablation",
    "summarize",
    "audit",
    "write_reports",
    "ComsConfig",
]
