"""Acceptance criteria AC1-AC10.

Each test prints one ``ACn PASS|FAIL`` line (also repeated in the terminal
summary).  The method-ordering, ablation and pseudo-label checks use the
shortened profile in ``configs/acceptance.json`` and share session-cached
models; the lambda1 sweep and the wall-clock check run at default size.
"""

import csv
import functools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from gsclab import autodiff as ad
from gsclab import losses as L
from gsclab.cli import main
from gsclab.gradcheck import COMPONENTS, run_suite
from gsclab.relabel import IGNORED, PrototypeTable, coarse_labels, entropy_thresholds, relabel
from gsclab.scenario import build_step_dataset, preset_scenario
from gsclab.trainer import TrainConfig, audit_pseudo_labels, run_scenario, train_step0

import oracles

pytestmark = pytest.mark.slow

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "acceptance.json"
SEEDS = (0, 1, 2)
ABLATIONS = ("gsc-no-sg", "gsc-no-srsc", "gsc-no-pr")


def profile(name, setting, seed):
    cfg = json.loads(CONFIG.read_text())
    spec = preset_scenario(name, setting, seed=seed, **cfg["scenario"])
    return spec, TrainConfig.from_dict({**cfg["train"], "seed": seed})


@functools.lru_cache(maxsize=None)
def scenario(name, setting, seed):
    """Step-0 snapshot and report; 3-1x3 disjoint also runs the ablations."""
    spec, config = profile(name, setting, seed)
    methods = ("gsc", "ft", "joint")
    if (name, setting) == ("3-1x3", "disjoint"):
        methods += ABLATIONS
    d0 = build_step_dataset(spec, 0, dtype=config.np_dtype)
    net, _ = train_step0(config, d0.images, spec.to_channels(d0.gt_visible), len(spec.groups[0]))
    snap = net.snapshot()
    report = run_scenario(spec, config, methods, step0=snap)
    for m in methods:
        g = report.final(m).grouped
        print(f"{name} {setting} seed={seed} {m:12s} initial={g['initial']:.3f} all={g['all']:.3f}")
    return snap, report


def test_ac1_gradient_correctness(verdict):
    start = time.perf_counter()
    worst = run_suite(trials=50, seed=0)
    elapsed = time.perf_counter() - start
    name = max(worst, key=worst.get)
    checked = {"L_ce", "L_sg", "L_sr", "L_sc", "L_pd", "L_total"} <= set(worst) and set(worst) == set(COMPONENTS)
    ok = checked and worst[name] < 1e-3 and elapsed < 120
    verdict("AC1", ok, f"{len(worst)} components x 50 trials, worst {name}={worst[name]:.2e} (< 1e-3), "
                       f"{elapsed:.0f}s (< 120s)")


def test_ac2_gradient_measurement_closed_form(verdict):
    rng = np.random.default_rng(11)
    n, k, h = 1000, 5, 1e-5
    z = rng.normal(0, 3, size=(1, k, 1, n))
    labels = rng.integers(0, k, size=(1, 1, n))
    got = L.gradient_measurement(ad._sigmoid(z), labels).reshape(-1)
    true = z[0, labels[0, 0], 0, np.arange(n)]

    def bce(v):
        return np.logaddexp(0.0, -v)  # -log sigmoid(v)

    numeric = (bce(true + h) - bce(true - h)) / (2 * h)
    err = float(np.abs(got - numeric).max())
    verdict("AC2", err < 1e-6, f"max |G - d(-log sigmoid)/dz| over {n} pixels = {err:.2e} (< 1e-6)")


def test_ac3_psi_normalization_and_monotonicity(verdict):
    rng = np.random.default_rng(12)
    bounds = (3, 5, 7)  # two old steps, then the current one
    stats = L.GradientStats(2, mode="exact_epoch")
    batches = []
    for _ in range(6):
        labels = rng.choice([0, 1, 2, 3, 4, 5, 6, IGNORED], size=(4, 8, 8))
        probs = ad._sigmoid(rng.normal(0, 2, size=(4, 7, 8, 8)))
        g = L.gradient_measurement(probs, labels)
        L.update_gradient_stats(stats, g, labels, bounds)
        batches.append((g, labels))
    stats.finalize()
    worst_dev, pairs, bad_pairs = 0.0, 0, 0
    for step in (0, 1):
        psi_all, mag_all = [], []
        for g, labels in batches:
            psi = L.step_aware_weights(g, labels, stats, bounds, psi_max=np.inf)
            sel = L._groups(labels, bounds) == step
            psi_all.append(psi[sel])
            mag_all.append(np.abs(g[sel]))
        psi_all, mag_all = np.concatenate(psi_all), np.concatenate(mag_all)
        worst_dev = max(worst_dev, abs(psi_all.mean() - 1.0))
        i, j = np.nonzero(mag_all[:, None] < mag_all[None, :])
        pairs += i.size
        bad_pairs += int(np.sum(psi_all[i] >= psi_all[j]))
    ok = worst_dev < 1e-9 and pairs > 0 and bad_pairs == 0
    verdict("AC3", ok, f"max |mean psi - 1| = {worst_dev:.1e} (< 1e-9); monotonicity violated on "
                       f"{bad_pairs}/{pairs} ordered pairs")


def _relabel_fixture(rng, k=4, size=8):
    """One image whose pixels hit the rule's boundaries often."""
    n_pix = size * size
    gt = rng.choice([0, 0, 0, 0, 5], size=n_pix)
    probs = rng.dirichlet(np.full(k, 0.7), size=n_pix) * 0.99 + 0.01 / k  # clear of the log clamp
    close = rng.random(n_pix) < 0.3  # near-tied top two: zeta can flip them
    top = rng.integers(0, k, size=n_pix)
    second = (top + rng.integers(1, k, size=n_pix)) % k
    base = rng.dirichlet(np.ones(k), size=n_pix) * 0.2
    base[np.arange(n_pix), top] += 0.41
    base[np.arange(n_pix), second] += 0.39
    probs[close] = (base / base.sum(axis=1, keepdims=True))[close]
    tied = rng.random(n_pix) < 0.05  # exact argmax ties
    probs[tied] = np.tile([0.4, 0.4, 0.15, 0.05][:k], (int(tied.sum()), 1))
    dup = rng.random(n_pix) < 0.4  # shared distributions make mu == tau exactly
    probs[dup] = probs[rng.integers(0, 4, size=int(dup.sum()))]
    feats = rng.normal(size=(n_pix, 2))
    present = [c for c in range(k) if rng.random() < 0.75]
    protos = PrototypeTable({c: rng.normal(size=2) for c in present})
    temperature = float(rng.choice([0.25, 1.0]))
    return gt, probs, feats, protos, temperature


def test_ac4_relabel_matches_brute_force(verdict):
    rng = np.random.default_rng(13)
    size, n_pixels, mismatches = 8, 0, 0
    hits = {"ties": 0, "flips": 0, "missing": 0, "labelled": 0, "case1": 0}
    for _ in range(200):
        gt, probs, feats, protos, temp = _relabel_fixture(rng, size=size)
        grid = lambda a: a.T.reshape(1, -1, size, size)
        got = relabel(gt.reshape(1, size, size), grid(probs), grid(feats), protos,
                      entropy_thresholds(grid(probs), coarse_labels(grid(probs))), temp).reshape(-1)
        pix = [list(p) for p in probs]
        tau = oracles.thresholds(pix)
        for i in range(len(gt)):
            want = oracles.relabel_pixel(int(gt[i]), pix[i], list(feats[i]), protos.vectors, tau, True, temp)
            mismatches += int(got[i] != want)
            n_pixels += 1
            if gt[i] != 0:
                hits["case1"] += 1
                continue
            raw = oracles.first_argmax(pix[i])
            mu = oracles.entropy(pix[i])
            hits["ties"] += int(mu == tau[raw])
            if mu < tau[raw]:
                if raw not in protos:
                    hits["missing"] += 1
                else:
                    z = oracles.zeta(list(feats[i]), protos.vectors, len(pix[i]), temp)
                    hits["flips"] += int(oracles.first_argmax([a * b for a, b in zip(z, pix[i])]) != raw)
            hits["labelled"] += int(want != IGNORED)
    covered = all(v > 0 for v in hits.values())
    ok = n_pixels >= 10_000 and mismatches == 0 and covered
    verdict("AC4", ok, f"{mismatches} mismatches over {n_pixels} pixels; boundary hits {hits}")


def test_ac5_pseudo_label_precision(verdict):
    rows = []
    for seed in SEEDS:
        spec, config = profile("4-1", "overlapped", seed)
        snap, _ = scenario("4-1", "overlapped", seed)
        _, _, audit_rows = audit_pseudo_labels(spec, snap, 1, config.temperature)
        prec = {r["method"]: r["precision_vs_oracle"] for r in audit_rows}
        rows.append((seed, prec["relabel"], prec["plain"]))
    ok = all(ours >= plain for _, ours, plain in rows)
    detail = ", ".join(f"seed {s}: relabel {a:.4f} vs plain {b:.4f}" for s, a, b in rows)
    verdict("AC5", ok, f"4-1 overlapped old-class precision: {detail}")


def test_ac6_method_ordering(verdict):
    failures, gaps = [], []
    for name in ("4-1", "3-1x3"):
        for setting in ("disjoint", "overlapped"):
            for seed in SEEDS:
                _, rep = scenario(name, setting, seed)
                gsc, ft, joint = (rep.final(m).grouped for m in ("gsc", "ft", "joint"))
                gap = gsc["initial"] - ft["initial"]
                gaps.append(gap)
                if not (joint["all"] >= gsc["all"] > ft["all"]) or gap < 0.15:
                    failures.append(f"{name}/{setting}/{seed}: joint {joint['all']:.3f} gsc {gsc['all']:.3f} "
                                    f"ft {ft['all']:.3f} old-gap {gap:.3f}")
    # wall-clock bar on the largest preset at full default size (one core here, four allowed)
    start = time.perf_counter()
    run_scenario(preset_scenario("3-1x3"), TrainConfig(), ["gsc"])
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 15 * 60
    verdict("AC6", ok, f"12 runs, Joint >= GSC > FT and old-class gap >= 0.15 "
                       f"(smallest gap {min(gaps):.3f}); default-size 3-1x3 GSC run {elapsed:.0f}s (< 900s)"
                       f"{'; ' + '; '.join(failures) if failures else ''}")


def test_ac7_ablation_direction(verdict):
    finals = {m: np.mean([scenario("3-1x3", "disjoint", s)[1].final(m).grouped["all"] for s in SEEDS])
              for m in ("gsc",) + ABLATIONS}
    deltas = {m: finals["gsc"] - finals[m] for m in ABLATIONS}
    ok = all(d >= 0 for d in deltas.values())
    detail = ", ".join(f"{m}: {d:+.4f}" for m, d in deltas.items())
    verdict("AC7", ok, f"3-1x3 disjoint, GSC {finals['gsc']:.3f}; mean drop when removed {detail}")


def test_ac8_lambda1_insensitivity(verdict, tmp_path):
    # default size and schedule: the shortened profile's larger incremental
    # learning rate makes the soft term matter more than it does here
    per_seed, codes = [], []
    for seed in SEEDS:
        out = tmp_path / f"seed{seed}"
        codes.append(main(["sweep", f"--seed={seed}", "--param=lambda1", "--values=0.1,0.3,1.0",
                           f"--out_dir={out}"]))
        with open(out / "sweep.csv", newline="") as fh:
            per_seed.append({r["value"]: float(r["miou_all"]) for r in csv.DictReader(fh)})
    mean = {v: float(np.mean([row[v] for row in per_seed])) for v in per_seed[0]}
    spread = max(mean.values()) - min(mean.values())
    ok = codes == [0] * len(SEEDS) and len(mean) == 3 and spread < 0.05
    seeds = "; ".join(f"seed {s}: " + "/".join(f"{x:.3f}" for x in row.values()) for s, row in zip(SEEDS, per_seed))
    verdict("AC8", ok, f"4-1 disjoint at defaults, 3-seed mean by lambda1 "
                       f"{ {k: round(v, 4) for k, v in mean.items()} }, spread {spread:.3f} (< 0.05) [{seeds}]")


def test_ac9_loss_bounds_and_reductions(verdict):
    rng = np.random.default_rng(14)
    k = 6
    p = rng.dirichlet(np.full(k, 0.3), size=1000).T.reshape(1, k, 1, 1000)
    per_pixel = [oracles.entropy(list(p[0, :, 0, i])) for i in range(1000)]
    sc = L.sc_loss(ad.Tensor(p)).item()
    bounded = min(per_pixel) >= 0 and max(per_pixel) <= math.log(k) and 0 <= sc <= math.log(k)

    logits = rng.normal(size=(2, k, 4, 4))
    labels = rng.choice(list(range(k)) + [IGNORED], size=(2, 4, 4))
    probs = ad.softmax(ad.Tensor(logits))
    sg = L.sg_loss(probs, labels, np.ones(labels.shape))
    sg_is_ce = sg.item() == L.ce_loss(probs, labels).item()

    comps = L.LossComponents(sg, L.sr_loss(probs, rng.uniform(size=logits.shape)), L.sc_loss(probs),
                             L.pd_loss([ad.Tensor(logits)], [logits + 0.1]))
    total_is_sg = L.total_loss(comps, L.LossWeights(0, 0, 0)).item() == sg.item()
    ok = bounded and sg_is_ce and total_is_sg
    verdict("AC9", ok, f"sc in [0, ln {k}] on 1000 draws: {bounded}; sg == ce at psi 1: {sg_is_ce}; "
                       f"total == sg at zero weights: {total_is_sg}")


def test_ac10_determinism(verdict, tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [main(["run", str(CONFIG), "--setting=overlapped", "--method=gsc,ft", "--seed=3",
                   f"--out_dir={o}"]) for o in outs]
    same = [name for name in ("summary.csv", "per_class.csv", "forgetting.csv")
            if (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()]
    ok = codes == [0, 0] and len(same) == 3
    verdict("AC10", ok, f"two identical runs, byte-identical: {same}")
