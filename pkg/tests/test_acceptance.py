"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The benchmark-backed criteria (5 to 9) share one full default-suite run,
which takes about an hour on one core. Reports land in ``acceptance-out/``
next to this directory. Run with ``pytest -s tests/test_acceptance.py`` or
``python3 tests/test_acceptance.py``.
"""

import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import spread_crystal
from lcom import bench, io, nn
from lcom.cli import main as cli_main
from lcom.config import DatasetConfig, OptimizerConfig, RunConfig, dump_config
from lcom.crystal import Crystal, featurize, min_image_displacement
from lcom.oracle import PotentialSpec, relax, total_energy
from lcom.surrogate import ComsConfig, SurrogateModel, coms_loss, make_records, mine_adversarial, mined_gap, train_naive, train_surrogate
from lcom.vae import VaeConfig, _batch_loss, build_model
from test_oracle import brute_energy
from test_vae import random_crystal

OUT = Path(__file__).resolve().parent.parent / "acceptance-out"
SEEDS = (17, 43, 101)
ABLATION_COMPS = ("A2B2", "AB2", "AB3")


def report(n, ok, detail):
    line = f"CRITERION {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line, flush=True)
    OUT.mkdir(exist_ok=True)
    with open(OUT / "acceptance.txt", "a", encoding="utf-8") as fh:
        fh.write(line + "\n")
    assert ok, line


@pytest.fixture(autouse=True)
def _show_output(capsys):
    with capsys.disabled():
        yield


def rel_err(fd, g):
    return float(np.max(np.abs(fd - g)) / max(np.max(np.abs(fd)), 1e-8))


# -- 1. gradient fidelity ---------------------------------------------------

def _nn_instances(n):
    rng = np.random.default_rng(1)
    worst, done = 0.0, 0
    while done < n:
        depth, width = int(rng.integers(1, 4)), int(rng.integers(2, 12))
        net = nn.init([4] + [width] * depth + [2], seed=int(rng.integers(2**31)))
        for b in net.biases:
            b[:] = 0.1 * rng.standard_normal(b.shape)
        x, up = rng.standard_normal(4), rng.standard_normal(2)
        _, (_, pre) = nn.forward_cached(net, x)
        if any(np.any(np.abs(a) < 1e-4) for a in pre[:-1]):
            continue  # a kink within the difference stencil
        gp, gx = nn.backward(net, x, up)
        theta, h = net.flat(), 1e-6
        fp = np.zeros_like(theta)
        for k in range(len(theta)):
            for sgn in (1, -1):
                t = theta.copy()
                t[k] += sgn * h
                m = net.copy()
                m.set_flat(t)
                fp[k] += sgn * np.sum(up * nn.forward(m, x))
        fp /= 2 * h
        fx = np.array([(np.sum(up * nn.forward(net, x + h * e)) - np.sum(up * nn.forward(net, x - h * e))) / (2 * h) for e in np.eye(4)])
        worst = max(worst, rel_err(fp, np.concatenate([g.ravel() for g in gp])), rel_err(fx, gx))
        done += 1
    return worst


def _vae_instances(term, n, coords=40):
    """Gradient of one loss term isolated by differencing two weightings of the objective."""
    rng = np.random.default_rng({"lattice": 2, "kl": 3, "denoise": 4}[term])
    worst = 0.0
    base = dict(latent_dim=3, hidden=6)
    on = {"lattice": (0.0, 0.0), "kl": (1.0, 0.0), "denoise": (0.0, 1.0)}[term]
    for _ in range(n):
        comp = ["AB", "AB2", "A2B2"][int(rng.integers(3))]
        model = build_model(comp, VaeConfig(**base, seed=int(rng.integers(2**31))))
        crystals = [random_crystal(rng, comp) for _ in range(3)]
        feats = np.stack([featurize(c) for c in crystals])
        frac = feats[:, 6:]
        draws = {"eps_z": rng.standard_normal((3, 3)), "levels": rng.integers(10, size=3), "eps_x": 0.3 * rng.standard_normal(frac.shape)}
        cfg_on = VaeConfig(**base, beta_kl=on[0], lambda_dec=on[1])
        cfg_off = VaeConfig(**base, beta_kl=0.0, lambda_dec=0.0)
        g_on = _batch_loss(model, feats, frac, cfg_on, None, True, draws)[1]
        g_off = _batch_loss(model, feats, frac, cfg_off, None, True, draws)[1]
        grads = g_on if term == "lattice" else [a - b for a, b in zip(g_on, g_off)]
        params = model.params()
        sizes = np.array([p.size for p in params])
        picks = rng.choice(sizes.sum(), size=coords, replace=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        fd, an, h = [], [], 1e-6
        for flat in picks:
            i = int(np.searchsorted(offsets, flat, side="right") - 1)
            idx = np.unravel_index(flat - offsets[i], params[i].shape)
            old = params[i][idx]
            params[i][idx] = old + h
            up = _batch_loss(model, feats, frac, cfg_off, None, False, draws)[0][term]
            params[i][idx] = old - h
            dn = _batch_loss(model, feats, frac, cfg_off, None, False, draws)[0][term]
            params[i][idx] = old
            fd.append((up - dn) / (2 * h))
            an.append(grads[i][idx])
        worst = max(worst, rel_err(np.array(fd), np.array(an)))
    return worst


def _coms_instances(n):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(n):
        m = SurrogateModel(nn.init([4, 8, 8, 1], seed=int(rng.integers(2**31))), 0.0, 1.0, "AB")
        Z, E = rng.standard_normal((6, 4)), rng.standard_normal(6)
        alpha = float(rng.uniform(0, 3))
        cfg = ComsConfig(adv_steps=2, adv_lr=0.1)
        zp = mine_adversarial(m, Z, cfg)
        g = np.concatenate([x.ravel() for x in coms_loss(m, Z, E, alpha, cfg, z_plus=zp)[2]])
        theta, h = m.net.flat(), 1e-6
        fd = np.zeros_like(theta)
        for k in range(len(theta)):
            for sgn in (1, -1):
                t = theta.copy()
                t[k] += sgn * h
                m.net.set_flat(t)
                fd[k] += sgn * coms_loss(m, Z, E, alpha, cfg, need_grad=False, z_plus=zp)[0]
        m.net.set_flat(theta)
        worst = max(worst, rel_err(fd / (2 * h), g))
    return worst


def test_criterion_01_gradient_fidelity():
    t = time.perf_counter()
    errs = {"nn": _nn_instances(50), "lattice": _vae_instances("lattice", 50), "kl": _vae_instances("kl", 50), "denoise": _vae_instances("denoise", 50), "coms": _coms_instances(50)}
    secs = time.perf_counter() - t
    ok = all(e < 1e-4 for e in errs.values()) and secs < 60
    report(1, ok, f"max rel err {', '.join(f'{k} {v:.1e}' for k, v in errs.items())}; 50 instances each; {secs:.1f}s")


# -- 2. oracle correctness --------------------------------------------------

def test_criterion_02_oracle():
    t = time.perf_counter()
    from lcom.config import DEFAULT_POTENTIAL

    spec = PotentialSpec.from_dict(DEFAULT_POTENTIAL)
    rng = np.random.default_rng(2024)
    worst = 0.0
    for k in range(100):
        x = spread_crystal(rng, ["AB", "AB2", "AB3", "A2B2", "ABCD", "C2D2"][k % 6])
        worst = max(worst, abs(total_energy(x, spec) - brute_energy(x, spec)))
    lj = PotentialSpec(np.ones((1, 1)), np.ones((1, 1)), cutoff=2.5)
    y = relax(Crystal(10 * np.eye(3), [0, 0], [[0, 0, 0], [0.13, 0, 0]], "A2"), lj, 5000, 1e-10)
    sep_err = abs(np.linalg.norm(min_image_displacement(y, 0, 1)) - 2 ** (1 / 6))
    secs = time.perf_counter() - t
    report(2, worst < 1e-9 and sep_err < 1e-4 and secs < 60, f"brute-force max |dE| {worst:.1e} on 100 crystals; dimer separation error {sep_err:.1e}; {secs:.1f}s")


# -- 3 and 4. surrogate properties ------------------------------------------

def synthetic_latents(n, dim, seed):
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n, dim))
    E = np.sin(1.5 * Z[:, 0]) + 0.5 * Z[:, 1] ** 2 - 0.3 * Z[:, 2] * Z[:, 3] + 0.1 * Z.sum(axis=1)
    return make_records(Z, -10.0 + E, "AB")


def test_criterion_03_reduction_identity(tmp_path):
    recs = synthetic_latents(300, 8, 0)
    cfg = replace(ComsConfig(), epochs=50, seed=7)
    io.write_json(tmp_path / "coms.json", train_surrogate(recs, replace(cfg, alpha=0.0)).to_dict())
    io.write_json(tmp_path / "naive.json", train_naive(recs, cfg).to_dict())
    same = (tmp_path / "coms.json").read_bytes() == (tmp_path / "naive.json").read_bytes()
    report(3, same, "alpha=0 checkpoint " + ("byte-identical to" if same else "differs from") + " the naive checkpoint")


def test_criterion_04_conservatism():
    t = time.perf_counter()
    cfg = replace(ComsConfig(), epochs=200)
    gaps = []
    for seed in SEEDS:
        recs = synthetic_latents(600, 32, seed)
        train, held = recs[:500], recs[500:]
        c = replace(cfg, seed=seed)
        Zh = np.stack([r.z for r in held])
        gaps.append((mined_gap(train_surrogate(train, c), Zh, c), mined_gap(train_naive(train, c), Zh, c)))
    secs = time.perf_counter() - t
    ok = all(a > b for a, b in gaps) and secs < 600
    report(4, ok, "mined gap conservative vs naive " + ", ".join(f"{a:.2f} > {b:.2f}" for a, b in gaps) + f"; {secs:.0f}s")


# -- 5 to 9. the default-suite benchmark ------------------------------------

@pytest.fixture(scope="module")
def suite():
    cfg = RunConfig()
    result = bench.run_benchmark(cfg, workers=1)
    bench.write_reports(result, cfg, OUT / "benchmark", deterministic=True)
    return cfg, result


@pytest.fixture(scope="module")
def probe(suite):
    cfg, result = suite
    points = []
    for comp, art in result.artifacts.items():
        points += bench.trajectory_probe(cfg, art)
    (OUT / "trajectory.csv").write_text(bench.probe_to_csv(points), encoding="utf-8")
    return points


def test_criterion_05_trajectory(suite, probe):
    cfg, result = suite
    ends = bench.probe_endpoints(probe)
    sl = [e1 > e0 for (m, _, _), (e0, e1) in ends.items() if m == "SL"]
    lc = [e1 <= e0 for (m, _, _), (e0, e1) in ends.items() if m == "LCOM"]
    comps = len(result.artifacts)
    ok = comps >= 10 and np.mean(sl) >= 0.5 and np.mean(lc) >= 0.7
    report(5, ok, f"{comps} compositions; SL final above step 0 in {sum(sl)}/{len(sl)} runs; LCOM at or below step 0 in {sum(lc)}/{len(lc)} runs")


def test_criterion_06_mean_improvement(suite):
    cfg, result = suite
    s = result.summary(cfg.threshold)
    lc, sl = s["LCOM"]["mean_improvement"], s["SL"]["mean_improvement"]
    report(6, lc > 0 and lc > sl, f"mean improvement LCOM {lc:.4f}, SL {sl:.4f}, decode-only {s['decode-only']['mean_improvement']:.4f}, random-search {s['random-search']['mean_improvement']:.4f}")


def test_criterion_07_accuracy(suite):
    cfg, result = suite
    s = result.summary(cfg.threshold)
    counts = {m: s[m]["successes"] for m in bench.METHODS}
    ok = not result.failures and all(counts["LCOM"] >= counts[m] for m in bench.METHODS) and result.seconds < 7200
    detail = ", ".join(f"{m} {c}/{s[m]['total']}" for m, c in counts.items())
    report(7, ok, f"successes {detail}; global-minimum budget {cfg.global_budget}; benchmark {result.seconds / 60:.1f} min; failures {result.failures or 'none'}")


def test_criterion_08_tau_ablation(suite):
    cfg, result = suite
    wins, parts = 0, []
    for comp in ABLATION_COMPS:
        imp = bench.tau_ablation(cfg, result.artifacts[comp])
        win = imp[1.0] >= imp[0.5] and imp[1.0] >= imp[5.0]
        wins += win
        parts.append(f"{comp} " + "/".join(f"{imp[t]:.3f}" for t in (0.5, 1.0, 5.0)))
    report(8, wins >= 2, f"tau=1 best on {wins}/3; improvement at tau 0.5/1/5: " + "; ".join(parts))


def test_criterion_09_timing(suite):
    cfg, result = suite
    reps = [bench.timing_report(cfg, art) for art in result.artifacts.values()]
    io.write_json(OUT / "timing.json", reps)
    ratios = [r["relax_over_descend"] for r in reps]
    ok = all(r >= 10 for r in ratios)
    report(9, ok, f"relax/descend ratio min {min(ratios):.1f}, median {float(np.median(ratios)):.1f}, "
        f"pooled {sum(r['relax'] for r in reps) / sum(r['descend'] for r in reps):.1f}; descend median {np.median([r['descend'] for r in reps]) * 1e3:.2f} ms")


# -- 10. determinism --------------------------------------------------------

def test_criterion_10_determinism(tmp_path):
    cfg = RunConfig(
        compositions=["AB2", "AB"],
        dataset=DatasetConfig(per_comp=20),
        vae=VaeConfig(latent_dim=8, hidden=32, epochs=30, langevin_steps=5),
        surrogate=ComsConfig(epochs=20, hidden=32),
        optimizer=OptimizerConfig(steps=50, step_size=0.2),
        global_budget=20,
    )
    dump_config(cfg, tmp_path / "cfg.yaml")
    codes = [cli_main(["benchmark", "--single-thread", "--config", str(tmp_path / "cfg.yaml"), "--seed", "5", "--out-dir", str(tmp_path / d)]) for d in ("a", "b")]
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in ("metrics.csv", "summary.txt"))
    report(10, codes == [0, 0] and same, "two single-thread benchmark runs: metrics.csv and summary.txt " + ("byte-identical" if same else "differ"))


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v", "-s"]))
