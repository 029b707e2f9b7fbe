"""Command-line entry point (``lcom``)."""

from __future__ import annotations

import os
import sys

if "--single-thread" in sys.argv:
    # must be set before numpy loads its BLAS
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = "1"

import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench, io
from .config import RunConfig, load_config
from .crystal import crystal_to_record, record_to_crystal
from .oracle import DatasetRecord, generate_dataset, random_stable_structure, total_energy
from .optimize import lcom_optimize, write_trajectory_csv
from .surrogate import ComsConfig, SurrogateModel, make_records, train_naive, train_surrogate
from .vae import CdVaeModel, encode_many, train_vae

log = logging.getLogger("lcom")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg


def _read_dataset(path) -> list[DatasetRecord]:
    out = []
    for rec in io.read_lines(path):
        crystal, energy = record_to_crystal(rec)
        out.append(DatasetRecord(crystal, energy))
    return out


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    comps = args.compositions or cfg.compositions
    per_comp = args.per_comp or cfg.dataset.per_comp
    records = generate_dataset(comps, per_comp, cfg.spec, args.seed, cfg.init, cfg.dataset.retry_factor)
    io.write_lines(args.out, [crystal_to_record(r.crystal, r.energy) for r in records])
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def cmd_train_vae(args) -> int:
    cfg = _config(args)
    data = [r for r in _read_dataset(args.dataset) if r.composition == args.composition]
    model = train_vae(data, replace(cfg.vae, seed=args.seed if args.seed is not None else cfg.vae.seed))
    io.write_json(args.out, model.to_dict())
    last = model.log[-1] if model.log else {}
    print(f"trained VAE for {args.composition} on {len(data)} records; final losses {json.dumps(last)}")
    return 0


def cmd_encode(args) -> int:
    vae = CdVaeModel.from_dict(io.read_json(args.vae))
    data = [r for r in _read_dataset(args.dataset) if r.composition == vae.composition]
    Z = encode_many(vae, [r.crystal for r in data])
    io.write_lines(args.out, [{"z": z, "energy": r.energy, "composition": r.composition} for z, r in zip(Z, data)])
    print(f"wrote {len(data)} latent records to {args.out}")
    return 0


def cmd_train_surrogate(args) -> int:
    cfg = _config(args)
    recs = io.read_lines(args.latents)
    latents = make_records(np.array([r["z"] for r in recs]), [r["energy"] for r in recs], recs[0]["composition"])
    scfg = cfg.surrogate
    if args.mode == "naive":
        model = train_naive(latents, scfg)
    elif args.tau is not None:
        model = train_surrogate(latents, replace(scfg, tau=args.tau))
    else:
        model = train_surrogate(latents, replace(scfg, tau=None, alpha=args.alpha if args.alpha is not None else scfg.alpha))
    io.write_json(args.out, model.to_dict())
    print(f"trained {args.mode} surrogate on {len(latents)} latents; final {json.dumps(model.log[-1])}")
    return 0


def cmd_optimize(args) -> int:
    cfg = _config(args)
    vae = CdVaeModel.from_dict(io.read_json(args.vae))
    model = SurrogateModel.from_dict(io.read_json(args.surrogate))
    if args.init == "random":
        init = random_stable_structure(vae.composition, cfg.spec, args.seed, cfg.init)
    else:
        init, _ = record_to_crystal(io.read_lines(args.init_file)[0])
    res = lcom_optimize(vae, model, init, args.steps, args.step_size, rng=np.random.default_rng(args.seed))
    E0 = total_energy(init, cfg.spec)
    E1 = bench.score(cfg, res.crystal)
    io.write_lines(args.out, [crystal_to_record(init, E0), crystal_to_record(res.crystal, E1 if np.isfinite(E1) else None)])
    if args.trajectory:
        write_trajectory_csv(args.trajectory, res.trajectory)
    print(f"E_init {E0:.6f}  E_final {E1:.6f}  seconds {json.dumps(res.seconds)}")
    return 0


def cmd_benchmark(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.master_seed = args.seed
    out_dir = args.out_dir or cfg.output_dir
    result = bench.run_benchmark(cfg, workers=1 if args.single_thread else None)
    paths = bench.write_reports(result, cfg, out_dir, deterministic=args.single_thread)
    sys.stdout.write(Path(paths["summary"]).read_text(encoding="utf-8"))
    return 0 if not result.failures else 1


def _artifacts(cfg, composition):
    return bench.prepare(cfg, composition)


def cmd_trajectory(args) -> int:
    cfg = _config(args)
    comps = [args.composition] if args.composition else cfg.compositions
    points = []
    for comp in comps:
        points += bench.trajectory_probe(cfg, _artifacts(cfg, comp), stride=args.stride)
    Path(args.out).write_text(bench.probe_to_csv(points), encoding="utf-8")
    print(f"wrote {len(points)} probe points to {args.out}")
    return 0


def cmd_timing(args) -> int:
    cfg = _config(args)
    comps = [args.composition] if args.composition else cfg.compositions[:1]
    reports = [bench.timing_report(cfg, _artifacts(cfg, c)) for c in comps]
    keys = ["composition", "encode", "descend", "decode", "total", "relax", "relax_over_descend", "descend_2T"]
    lines = [",".join(keys)] + [",".join(str(r[k]) for k in keys) for r in reports]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lcom", description="Latent conservative objective models on a synthetic crystal oracle.")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--single-thread", action="store_true", help="one thread everywhere; reports become byte-reproducible")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="relaxed random structures with oracle energies")
    s.add_argument("--config")
    s.add_argument("--compositions", nargs="*")
    s.add_argument("--per-comp", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train-vae")
    s.add_argument("--dataset", required=True)
    s.add_argument("--composition", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_vae)

    s = sub.add_parser("encode", help="posterior-mean latents of a dataset")
    s.add_argument("--vae", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("train-surrogate")
    s.add_argument("--latents", required=True)
    s.add_argument("--mode", choices=["coms", "naive"], default="coms")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--alpha", type=float)
    g.add_argument("--tau", type=float)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_surrogate)

    s = sub.add_parser("optimize")
    s.add_argument("--vae", required=True)
    s.add_argument("--surrogate", required=True)
    s.add_argument("--init", choices=["random", "file"], default="random")
    s.add_argument("--init-file")
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--step-size", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--trajectory", help="CSV file for the latent trajectory")
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("benchmark")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, help="master seed (overrides the config)")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_benchmark)

    s = sub.add_parser("trajectory")
    s.add_argument("--config")
    s.add_argument("--composition")
    s.add_argument("--stride", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_trajectory)

    s = sub.add_parser("timing")
    s.add_argument("--config")
    s.add_argument("--composition")
    s.add_argument("--out")
    s.set_defaults(func=cmd_timing)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    # accept the global flag after the subcommand too
    single = "--single-thread" in argv
    argv = [a for a in argv if a != "--single-thread"]
    args = build_parser().parse_args(argv)
    args.single_thread = single
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "optimize" and args.init == "file" and not args.init_file:
        raise SystemExit("--init file needs --init-file")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
