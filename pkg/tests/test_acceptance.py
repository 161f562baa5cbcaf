"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The verdict lines are collected and repeated in the terminal summary under
"acceptance criteria", so they survive output capture.

Run alone with ``pytest tests/test_acceptance.py -v`` or as a script with
``python3 tests/test_acceptance.py``.  The experiment-backed criteria use
the desk-scale regime in ``REGIME`` and take a few minutes in total.
"""

import json
import math
import sys
import time

import numpy as np
import pytest

from cfunlearn.cli import cmd_experiment
from cfunlearn.counterfactual import CfSearchConfig, allowed_targets, find_counterfactuals, validate_counterfactual
from cfunlearn.datagen import ScmSpec, Uniform, generate_scm_dataset, make_deletion, split_train_test
from cfunlearn.evaluation import ExperimentConfig, ablation_grid, read_reports, run_experiment
from cfunlearn.intervention import InterventionContext, MaskedInstance, compute_masks, mask_from_gradient
from cfunlearn.model import (
    ModelParams,
    TrainConfig,
    ce_loss_and_grads,
    cross_entropy,
    forward,
    init_model,
    input_gradient,
    predict,
    train_baseline,
)
from cfunlearn.unlearn import ForgetBatch, RetainBatch, UnlearnConfig, contrastive_from_embeddings, total_loss

sys.path.insert(0, __file__.rsplit("/", 1)[0])
from conftest import fd_grad  # noqa: E402

pytestmark = pytest.mark.slow

SEEDS = 5
# teacher and unlearning schedule shared by every experiment-backed criterion
REGIME = {
    "dataset": {"scm": {"samples": 3000, "noise_std": 1.0, "class_separation": 2.0}},
    "train": {"learning_rate": 1e-3, "epochs": 60},
    "unlearn": {"learning_rate": 3e-3, "epochs": 20},
    "repetitions": SEEDS,
    "seed": 0,
}

RESULTS = {}


def verdict(n, title, ok, detail):
    line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def experiment(scenarios, methods, **over):
    cfg = json.loads(json.dumps(REGIME))
    cfg.update(scenarios=scenarios, methods=methods)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(cfg.get(k), dict):
            cfg[k] = {**cfg[k], **v}
        else:
            cfg[k] = v
    return run_experiment(cfg)


def by(reports, metric):
    """``{(scenario, method): [value per repetition]}`` over successful rows."""
    out = {}
    for r in sorted(reports, key=lambda r: r.repetition):
        assert r.status == "ok", r.status
        out.setdefault((r.scenario, r.method), []).append(getattr(r, metric))
    return out


def mean(xs):
    return float(np.mean(xs))


# -- 1. gradient oracles ----------------------------------------------------------------


def test_criterion_01_gradient_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in range(100):
        tau = (0.1, 0.5, 2.0)[i % 3]
        b, k, d = rng.integers(1, 4), rng.integers(1, 6), rng.integers(2, 6)
        xi, xi_cf, xi_neg = rng.normal(size=(b, d)), rng.normal(size=(b, d)), rng.normal(size=(b, k, d))
        _, _, _, got = contrastive_from_embeddings(xi, xi_cf, xi_neg, tau)
        fd = fd_grad(lambda v: contrastive_from_embeddings(xi, xi_cf, v, tau)[0], xi_neg.copy())
        logits = np.concatenate([np.einsum("bd,bd->b", xi, xi_cf)[:, None], np.einsum("bkd,bd->bk", xi_neg, xi)], 1)
        M = np.exp(logits / tau).sum(axis=1)
        closed = np.exp(np.einsum("bkd,bd->bk", xi_neg, xi) / tau)[:, :, None] / M[:, None, None] * xi[:, None] / tau / k
        worst = max(worst, grad_err(got, fd), grad_err(got, closed))

    m = init_model(6, [10, 8], 4, seed=1)
    for _ in range(5):
        x, y = rng.normal(size=6), int(rng.integers(4))
        f = lambda v: float(cross_entropy(forward(m, v)[0], np.array([y]))[0])
        worst = max(worst, grad_err(input_gradient(m, x, y), fd_grad(f, x)))

    X, y = rng.normal(size=(6, 6)), rng.integers(0, 4, size=6)
    _, g = ce_loss_and_grads(m, X, y)
    for p, gp in zip(m.params(), g):
        worst = max(worst, grad_err(gp, _param_fd(p, lambda: ce_loss_and_grads(m, X, y)[0])))

    teacher, student = init_model(4, [6, 5], 3, seed=2), init_model(4, [6, 5], 3, seed=3)
    masks = np.array([mask_from_gradient(rng.normal(size=4)) for _ in range(4)])
    Xb, yb = rng.normal(size=(4, 4)), rng.integers(0, 3, size=4)
    ctx = InterventionContext(rng.normal(size=4), {c: rng.normal(size=4) for c in range(3)}, 4, gamma_mix=0.2)
    rb = RetainBatch(Xb, yb, masks)
    fb = ForgetBatch(Xb, yb, masks, Xb + np.where(masks == 0, 0.5, 0.0), rng.normal(size=(4, 3, 4)))
    for w in (dict(alpha=0, beta=0, gamma_loss=0), dict(alpha=1, beta=0, gamma_loss=0),
              dict(alpha=0, beta=1, gamma_loss=0), dict(alpha=0, beta=0, gamma_loss=1)):
        cfg = UnlearnConfig(**w)
        _, g = total_loss(teacher, student, rb, fb, ctx, cfg, need_grad=True)
        for p, gp in zip(student.params(), g):
            worst = max(worst, grad_err(gp, _param_fd(p, lambda: total_loss(teacher, student, rb, fb, ctx, cfg).total)))
    elapsed = time.perf_counter() - t0
    n_params = sum(p.size for p in m.params())
    verdict(1, "gradient oracles", worst <= 1e-4 and elapsed < 10 and n_params <= 1000,
            f"max rel err {worst:.2e} (<= 1e-4), {elapsed:.1f}s (< 10s)")


def grad_err(a, b):
    # relative error with a 1e-6 floor: central differences at eps=1e-5 cannot
    # resolve gradients below ~1e-10, which saturated draws (tau=0.1) produce
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-6))


def _param_fd(p, f):
    def g(v):
        old = p.copy()
        p[...] = v
        out = f()
        p[...] = old
        return out
    return fd_grad(g, p.copy())


# -- 2. loss degeneracies --------------------------------------------------------------------


def test_criterion_02_loss_degeneracies():
    rng = np.random.default_rng(1)
    teacher = init_model(4, [6, 5], 3, seed=4)
    masks = np.array([mask_from_gradient(rng.normal(size=4)) for _ in range(6)])
    X, y = rng.normal(size=(6, 4)), rng.integers(0, 3, size=6)
    ctx = InterventionContext(rng.normal(size=4), {c: rng.normal(size=4) for c in range(3)}, 4, gamma_mix=0.2)
    rb = RetainBatch(X, y, masks)
    fb = ForgetBatch(X, y, masks, X.copy(), rng.normal(size=(6, 2, 4)))
    t = total_loss(teacher, teacher.copy(), rb, fb, ctx, UnlearnConfig())
    flat = ModelParams([np.zeros((4, 5))], [np.zeros(5)])
    ce = float(np.mean(cross_entropy(forward(flat, X)[0], np.arange(6) % 5)))
    errs = [abs(t.remember), abs(t.forget), abs(ce - math.log(5))]
    verdict(2, "loss degeneracies", max(errs) <= 1e-9,
            f"L_r={t.remember:.1e}, L_f={t.forget:.1e}, |CE-lnK|={errs[2]:.1e} (all <= 1e-9)")


# -- 3. mask contract ---------------------------------------------------------------------------


def test_criterion_03_mask_contract():
    rng = np.random.default_rng(2)
    bad = 0
    for _ in range(1000):
        n = int(rng.integers(1, 16))
        x, g = rng.normal(scale=5, size=n), rng.normal(size=n)
        sens = np.zeros(n, bool)
        sens[rng.choice(n, size=int(rng.integers(0, math.ceil(n / 2) + 1)), replace=False)] = True
        mi = MaskedInstance.from_mask(x, 0, mask_from_gradient(g, sens))
        ok = np.array_equal(mi.v + mi.z, x) and mi.mask.sum() == math.ceil(n / 2) and np.all(mi.mask[sens] == 1)
        bad += not ok
    verdict(3, "mask contract", bad == 0, f"{bad}/1000 instances violate v+z=x, |background|=ceil(n/2) or sensitive")


# -- 4. retrain-oracle proximity under uniform deletion ----------------------------------------------


def test_criterion_04_uniform_retrain_proximity():
    t0 = time.perf_counter()
    reps = experiment([{"kind": "uniform", "p": 0.2}], ["ours", "retrain"])
    elapsed = time.perf_counter() - t0
    ra, mia = by(reps, "ra"), by(reps, "mia")
    s = "uniform(p=0.2)"
    d_ra = abs(mean(ra[s, "ours"]) - mean(ra[s, "retrain"]))
    d_mia = abs(mean(mia[s, "ours"]) - mean(mia[s, "retrain"]))
    verdict(4, "uniform retrain proximity", d_ra <= 0.05 and d_mia <= 0.05 and elapsed < 300,
            f"RA {mean(ra[s, 'ours']):.3f} vs {mean(ra[s, 'retrain']):.3f} (|d|={d_ra:.3f}), "
            f"MIA {mean(mia[s, 'ours']):.3f} vs {mean(mia[s, 'retrain']):.3f} (|d|={d_mia:.3f}), "
            f"suite {elapsed:.0f}s (< 300s)")


# -- 5. full class deletion ----------------------------------------------------------------------------


def test_criterion_05_full_class_deletion():
    reps = experiment([{"kind": "full_class", "classes": [0]}], ["ours", "retrain"])
    s = "full_class(classes=[0])"
    fa, ra, red = by(reps, "fa"), by(reps, "ra"), by(reps, "redistribution")
    f, r_gap, rd = mean(fa[s, "ours"]), abs(mean(ra[s, "ours"]) - mean(ra[s, "retrain"])), mean(red[s, "ours"])
    verdict(5, "full class deletion", f <= 0.05 and r_gap <= 0.05 and rd >= 0.70,
            f"FA(ours)={f:.3f} (<= 0.05), |RA gap|={r_gap:.3f} (<= 0.05), redistribution={rd:.3f} (>= 0.70)")


# -- 6. bias mitigation ordering ---------------------------------------------------------------------


def test_criterion_06_bias_mitigation():
    # binary surrogate with a sensitive coordinate standing in for the Adult census data
    scm = {"num_concepts": 2, "classes_per_concept": [1, 1], "privileged_rate": 0.6, "sensitive_shortcut": 0.2,
           "class_priors": [0.3, 0.7], "noise_std": 2.0}
    reps = experiment([{"kind": "selective_group", "value": 0, "p": 0.3}], ["ours", "retrain", "random-relabel"],
                      dataset={"scm": {**REGIME["dataset"]["scm"], **scm}})
    s = "selective_group(value=0,p=0.3)"
    di, eod = by(reps, "di"), by(reps, "eod")
    d = {m: mean(di[s, m]) for m in ("ours", "retrain", "random-relabel")}
    e = {m: mean(np.abs(eod[s, m])) for m in ("ours", "retrain", "random-relabel")}
    ok = d["ours"] > d["random-relabel"] and abs(d["ours"] - d["retrain"]) <= 0.10
    ok = ok and e["ours"] < e["random-relabel"] and abs(e["ours"] - e["retrain"]) <= 0.10
    verdict(6, "bias mitigation ordering", ok,
            f"DI ours {d['ours']:.3f} vs relabel {d['random-relabel']:.3f} (need >), retrain {d['retrain']:.3f} (need within 0.10); "
            f"|EOD| ours {e['ours']:.3f} vs relabel {e['random-relabel']:.3f} (need <), retrain {e['retrain']:.3f} (need within 0.10)")


# -- 7. selective class deletion --------------------------------------------------------------------------


def test_criterion_07_selective_class():
    ps = (0.2, 0.4, 0.6)
    reps = experiment([{"kind": "selective_class", "class": 0, "p": p} for p in ps], ["ours", "naive-finetune"])
    ra = by(reps, "ra")
    tags = [f"selective_class(class=0,p={p})" for p in ps]
    means_ok = all(mean(ra[t, "ours"]) >= mean(ra[t, "naive-finetune"]) for t in tags)
    gaps = np.array([[a - b for a, b in zip(ra[t, "ours"], ra[t, "naive-finetune"])] for t in tags])  # (p, seed)
    widening = int(np.sum(np.all(np.diff(gaps, axis=0) >= 0, axis=0)))
    shown = ", ".join(f"p={p}: {mean(ra[t, 'ours']):.3f} vs {mean(ra[t, 'naive-finetune']):.3f}" for p, t in zip(ps, tags))
    verdict(7, "selective class robustness", means_ok and widening >= 4,
            f"RA ours vs naive-finetune {shown}; gap widens on {widening}/{SEEDS} seeds (>= 4)")


# -- 8. counterfactual validity -------------------------------------------------------------------------------


def test_criterion_08_counterfactual_validity():
    ds = generate_scm_dataset(ScmSpec(**REGIME["dataset"]["scm"]), seed=0)
    train, _ = split_train_test(ds, 0.2, seed=0)
    teacher = train_baseline(init_model(8, [64, 64], 6, 0), train, TrainConfig(**REGIME["train"], seed=0))
    part = make_deletion(train, Uniform(0.2), seed=0)
    rows = part.forget_indices
    X, y = train.features, train.labels
    masks = compute_masks(teacher, X[rows], y[rows], train.feature_roles)
    mis = [MaskedInstance.from_mask(X[r], y[r], m) for r, m in zip(rows, masks)]
    cfs, missing = find_counterfactuals(teacher, mis, train.concept_of_class, CfSearchConfig(), rows)
    invalid, costs, dists = 0, [], []
    for mi, cf, m in zip(mis, cfs, masks):
        if cf is None or cf.degenerate:
            continue
        invalid += not validate_counterfactual(teacher, cf, mi, train.concept_of_class)[0]
        sib = np.flatnonzero(np.isin(y, allowed_targets(mi.y, train.concept_of_class)))
        dists.append(np.sqrt((((X[sib] - mi.x)[:, m == 0]) ** 2).sum(axis=1)).min())
        costs.append(cf.l2_cost)
    med_c, med_d = float(np.median(costs)), float(np.median(dists))
    verdict(8, "counterfactual validity", invalid == 0 and med_c <= med_d,
            f"{invalid}/{len(costs)} invalid, median cost {med_c:.3f} vs median sibling distance {med_d:.3f} (need <=)"
            f" ({len(missing)} not found)")


# -- 9. ablation coherence --------------------------------------------------------------------------------------


def test_criterion_09_ablation_coherence():
    grid = {k: v for k, v in ablation_grid().items() if k != "full"}
    single = [k for k in grid if "," not in k]
    reps = experiment([{"kind": "uniform", "p": 0.4}], ["ours", *grid], variants=grid)
    s = "uniform(p=0.4)"
    ra, mia = by(reps, "ra"), by(reps, "mia")
    full_ra, full_mia = mean(ra[s, "ours"]), mean(mia[s, "ours"])
    losses = [k for k in single if mean(ra[s, k]) > full_ra or mean(mia[s, k]) < full_mia]
    shown = ", ".join(f"{k}: {mean(ra[s, k]):.3f}/{mean(mia[s, k]):.3f}" for k in single)
    verdict(9, "ablation coherence", not losses,
            f"full RA/MIA {full_ra:.3f}/{full_mia:.3f}; {shown}; dominated by: {losses or 'none'}")


# -- 10. determinism ---------------------------------------------------------------------------------------------------


def test_criterion_10_determinism(tmp_path):
    cfg = {
        "dataset": {"scm": {"samples": 600}},
        "scenarios": [{"kind": "uniform", "p": 0.2}, {"kind": "full_class", "classes": [1]}],
        "methods": ["ours", "retrain", "naive-finetune", "random-relabel"],
        "hidden": [32],
        "train": {"learning_rate": 3e-3, "epochs": 10},
        "unlearn": {"epochs": 2},
        "cf_search": {"samples_per_radius": 64},
        "repetitions": 2,
        "seed": 4,
    }
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        out.mkdir()
        cmd_experiment(ExperimentConfig.from_dict(cfg), out)
        runs.append([r.comparable() for r in read_reports(out / "reports.json")])
    same = runs[0] == runs[1]
    verdict(10, "determinism", same and len(runs[0]) == 16,
            f"{len(runs[0])} rows, identical except rte_seconds: {same}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
