import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cfunlearn.datagen import Dataset, ScmSpec, generate_scm_dataset
from cfunlearn.intervention import (
    InterventionContext,
    MaskedInstance,
    build_intervention_context,
    compute_mask,
    compute_masks,
    interventional_distribution,
    interventional_input,
    interventional_inputs,
    mask_from_gradient,
)
from cfunlearn.model import TrainConfig, forward, init_model, predict, train_baseline


def test_mask_worked_example():
    m = MaskedInstance.from_mask([10, 20, 30, 40], 0, mask_from_gradient([3, 1, 4, 2]))
    assert m.mask.tolist() == [0, 1, 0, 1]
    assert m.v.tolist() == [0, 20, 0, 40]
    assert m.z.tolist() == [10, 0, 30, 0]


def test_mask_ties_take_lowest_indices():
    assert mask_from_gradient(np.ones(5)).tolist() == [1, 1, 1, 0, 0]


def test_mask_uses_magnitude():
    assert mask_from_gradient([-5.0, 0.1, 2.0, -0.2]).tolist() == [0, 1, 0, 1]


def test_sensitive_forces_background_and_displaces_largest():
    # without the override the background would be {1, 3}
    mask = mask_from_gradient([3, 1, 4, 2], sensitive=[False, False, True, False])
    assert mask.tolist() == [0, 1, 1, 0]


def test_too_many_sensitive_rejected():
    with pytest.raises(ValueError):
        mask_from_gradient(np.ones(4), sensitive=[True, True, True, False])


@given(
    st.integers(1, 12).flatmap(
        lambda n: st.tuples(
            arrays(np.float64, (n,), elements=st.floats(-1e3, 1e3)),
            arrays(np.float64, (n,), elements=st.floats(-50, 50)),
            st.lists(st.booleans(), min_size=n, max_size=n),
        )
    )
)
def test_mask_contract(args):
    delta, x, sens = args
    n = len(x)
    sens = np.array(sens)
    if sens.sum() > math.ceil(n / 2):
        sens[np.flatnonzero(sens)[math.ceil(n / 2):]] = False
    m = MaskedInstance.from_mask(x, 0, mask_from_gradient(delta, sens))
    assert np.array_equal(m.v + m.z, x)
    assert m.mask.sum() == math.ceil(n / 2)
    assert np.all(m.mask[sens] == 1)


def test_compute_mask_matches_batch(teacher, scm_train):
    X, y = scm_train.features[:20], scm_train.labels[:20]
    batch = compute_masks(teacher, X, y, scm_train.feature_roles)
    for i in range(20):
        assert np.array_equal(compute_mask(teacher, X[i], y[i], scm_train.feature_roles).mask, batch[i])
    with pytest.raises(ValueError):
        compute_mask(teacher, X[0][:3], y[0])


def test_sensitive_role_respected_by_compute_mask():
    ds = generate_scm_dataset(ScmSpec(samples=300, privileged_rate=0.5, sensitive_shortcut=1.0), seed=0)
    m = train_baseline(init_model(8, [16], 6, 0), ds, TrainConfig(1e-2, 10))
    masks = compute_masks(m, ds.features, ds.labels, ds.feature_roles)
    assert np.all(masks[:, -1] == 1)
    assert np.all(masks.sum(axis=1) == 4)


def test_pool_of_one_reproduces_instance(teacher, scm_train):
    retain = np.arange(len(scm_train))
    ctx = build_intervention_context(teacher, scm_train, retain, pool_size=1, seed=3)
    row = ctx.pool_indices["v"][0]
    mi = compute_mask(teacher, scm_train.features[row], scm_train.labels[row], scm_train.feature_roles)
    assert np.array_equal(ctx.v_bar, mi.v)


def test_constant_background_recovered():
    spec = ScmSpec(samples=2000, num_backgrounds=1)
    ds = generate_scm_dataset(spec, seed=6)
    m = train_baseline(init_model(8, [32, 32], 6, 6), ds, TrainConfig(3e-3, 20, seed=6))
    # a teacher blind to the background block, so every mask isolates it
    m.weights[0][4:] = 0.0
    pool = 256
    ctx = build_intervention_context(m, ds, np.arange(len(ds)), pool_size=pool, seed=6)
    rows = np.array(ctx.pool_indices["v"])
    assert np.all(compute_masks(m, ds.features[rows], ds.labels[rows])[:, 4:] == 1)
    shared = ds.features[:, 4:].mean(axis=0)
    # read as a standard-error bound, checked at three standard errors
    assert np.all(np.abs(ctx.v_bar[4:] - shared) <= 3 * spec.noise_std / np.sqrt(pool))
    assert np.all(ctx.v_bar[:4] == 0)


def test_singleton_concepts_give_zero_zbar():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(80, 4))
    y = (X[:, 0] > 0).astype(int)
    ds = Dataset(X, y, {0: 0, 1: 1})
    m = train_baseline(init_model(4, [8], 2, 0), ds, TrainConfig(1e-2, 5))
    ctx = build_intervention_context(m, ds, np.arange(80), pool_size=8, seed=0)
    assert all(np.all(v == 0) for v in ctx.z_bar_by_class.values())
    mi = compute_mask(m, X[0], y[0])
    assert np.array_equal(interventional_input(mi, ctx), mi.z + ctx.v_bar)


def test_zbar_uses_siblings_only(teacher, scm_train):
    ctx = build_intervention_context(teacher, scm_train, np.arange(len(scm_train)), pool_size=16, seed=1)
    for c in range(6):
        drawn = scm_train.labels[ctx.pool_indices[f"z{c}"]]
        assert set(drawn.tolist()) <= set(scm_train.siblings(c))


def test_identity_and_zero_configurations():
    x = np.array([1.0, -2.0, 3.0, 0.5])
    mi = MaskedInstance.from_mask(x, 1, [0, 1, 1, 0])
    zbar = {0: np.ones(4), 1: np.full(4, 7.0)}
    ident = InterventionContext(mi.v.copy(), zbar, 1, gamma_mix=0.0)
    assert np.array_equal(interventional_input(mi, ident), x)
    zero = InterventionContext(np.zeros(4), {0: np.zeros(4), 1: np.zeros(4)}, 1, gamma_mix=0.2)
    assert np.array_equal(interventional_input(mi, zero), mi.z)
    vb = np.array([0.0, 4.0, 5.0, 0.0])
    plain = InterventionContext(vb, {1: np.zeros(4)}, 1, gamma_mix=0.2)
    assert np.array_equal(interventional_input(mi, plain), mi.z + vb)


def test_literal_sum_with_overlap():
    mi = MaskedInstance.from_mask([1.0, 2.0], 0, [0, 1])
    ctx = InterventionContext(np.array([0.5, 0.5]), {0: np.array([10.0, 10.0])}, 1, gamma_mix=0.2)
    assert np.allclose(interventional_input(mi, ctx), [1.0 + 0.5 + 2.0, 0.5 + 2.0])


@given(st.floats(-10, 10), st.integers(0, 1000))
def test_linearity(c, seed):
    rng = np.random.default_rng(seed)
    x, vb, zb = rng.normal(size=(3, 6))
    mask = mask_from_gradient(rng.normal(size=6))
    mi = MaskedInstance.from_mask(x, 0, mask)
    base = interventional_input(mi, InterventionContext(vb, {0: zb}, 1))
    scaled = interventional_input(MaskedInstance.from_mask(c * x, 0, mask), InterventionContext(c * vb, {0: c * zb}, 1))
    assert np.allclose(scaled, c * base, rtol=1e-9, atol=1e-9)


def test_batch_matches_single(teacher, scm_train):
    ctx = build_intervention_context(teacher, scm_train, np.arange(len(scm_train)), seed=2)
    X, y = scm_train.features[:10], scm_train.labels[:10]
    masks = compute_masks(teacher, X, y)
    Z = np.where(masks == 0, X, 0.0)
    batch = interventional_inputs(Z, y, ctx, 6)
    for i in range(10):
        assert np.array_equal(batch[i], interventional_input(MaskedInstance.from_mask(X[i], y[i], masks[i]), ctx))


def test_identity_distribution_equals_forward(teacher, scm_train):
    x, y = scm_train.features[0], scm_train.labels[0]
    mi = compute_mask(teacher, x, y)
    ctx = InterventionContext(mi.v.copy(), {}, 1, gamma_mix=0.0)
    assert np.array_equal(interventional_distribution(teacher, mi, ctx), forward(teacher, x)[1])


def test_distributions_valid(teacher, scm_train):
    rng = np.random.default_rng(0)
    ctx = build_intervention_context(teacher, scm_train, np.arange(len(scm_train)), seed=0)
    X = rng.normal(scale=3, size=(1000, 8))
    y = rng.integers(0, 6, size=1000)
    for x, c in zip(X, y):
        p = interventional_distribution(teacher, compute_mask(teacher, x, c), ctx)
        assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-9


def test_context_deterministic_and_serializable(teacher, scm_train, tmp_path):
    r = np.arange(len(scm_train))
    a = build_intervention_context(teacher, scm_train, r, seed=9)
    b = build_intervention_context(teacher, scm_train, r, seed=9)
    assert a.v_bar.tobytes() == b.v_bar.tobytes()
    assert all(a.z_bar_by_class[c].tobytes() == b.z_bar_by_class[c].tobytes() for c in a.z_bar_by_class)
    back = InterventionContext.from_json(json.loads(a.dump(tmp_path / "ctx.json").read_text()))
    assert np.array_equal(back.v_bar, a.v_bar) and back.pool_indices == a.pool_indices


def test_dimension_mismatch():
    mi = MaskedInstance.from_mask(np.ones(3), 0, [1, 0, 0])
    with pytest.raises(ValueError):
        interventional_input(mi, InterventionContext(np.zeros(4), {}, 1))


def test_background_swap_hurts_background_probe_more():
    ds = generate_scm_dataset(ScmSpec(samples=3000, shortcut_strength=1.0, num_backgrounds=6), seed=4)
    rng = np.random.default_rng(4)
    cfg = TrainConfig(3e-3, 30, seed=4)

    def scrambled(cols):
        X = ds.features.copy()
        X[:, cols] = X[rng.permutation(len(X))][:, cols]
        return Dataset(X, ds.labels, ds.concept_of_class)

    causal_probe = train_baseline(init_model(8, [32], 6, 1), scrambled([4, 5, 6, 7]), cfg)
    background_probe = train_baseline(init_model(8, [32], 6, 2), scrambled([0, 1, 2, 3]), cfg)

    # swap exactly the true background block
    masks = np.tile(np.array([r != "causal" for r in ds.feature_roles], dtype=np.int8), (len(ds), 1))

    def drop(model):
        other = np.flatnonzero(ds.background_id == 0)  # one fixed background for everyone
        v_bar = np.where(masks[other] == 1, ds.features[other], 0.0).mean(axis=0)
        ctx = InterventionContext(v_bar, {}, len(other), gamma_mix=0.0)
        Z = np.where(masks == 0, ds.features, 0.0)
        swapped = predict(model, interventional_inputs(Z, ds.labels, ctx, 6))
        before = np.mean(predict(model, ds.features) == ds.labels)
        return before - np.mean(swapped == ds.labels)

    assert drop(causal_probe) < drop(background_probe)
