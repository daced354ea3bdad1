import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curvebench.attacks import (AttackConfig, PerturbationRecord, deepfool, deepfool_batch, deepfool_confined,
                                deepfool_targeted, deepfool_targeted_batch, fgsm, fgsm_batch, fgsm_min_epsilon,
                                fooling_rate, load_perturbations, random_perturbation, saliency, saliency_batch,
                                save_perturbations, uap_iterative, uap_subspace)
from curvebench.curvature import DirectionSet
from curvebench.data import Dataset
from curvebench.models import linear_model, logits, predict
from curvebench.subspace import Subspace


def affine(seed, classes=2, shape=(1, 3, 3)):
    rng = np.random.default_rng(seed)
    dim = int(np.prod(shape))
    return linear_model(rng.standard_normal((classes, dim)), rng.standard_normal(classes), shape), rng


# --------------------------------------------------------------------------
# FGSM


def test_fgsm_positive_gradient_gives_epsilon_ones():
    # class 1 score grows with every pixel; with label 0 the loss gradient is positive everywhere
    m = linear_model(np.array([[0.0] * 4, [1.0] * 4]), np.zeros(2), (1, 2, 2))
    rec = fgsm(m, np.zeros((1, 2, 2)), 0, 0.3)
    np.testing.assert_array_equal(rec.delta, np.full((1, 2, 2), 0.3))


def test_fgsm_zero_epsilon():
    m, rng = affine(0)
    x = rng.standard_normal((1, 3, 3))
    rec = fgsm(m, x, int(predict(m, x[None])[0]), 0.0)
    assert not np.any(rec.delta)
    assert rec.end_label == rec.source_label and not rec.converged


def test_fgsm_sign_of_zero_is_zero():
    m = linear_model(np.array([[1.0, 0.0], [0.0, 0.0]]), np.zeros(2), (1, 1, 2))
    rec = fgsm(m, np.zeros((1, 1, 2)), 0, 0.5)
    assert rec.delta.reshape(-1)[1] == 0.0


def test_fgsm_min_epsilon_matches_linear_margin():
    m, rng = affine(1)
    w = m.params[0]
    x = rng.standard_normal((20, 1, 3, 3))
    recs = fgsm_min_epsilon(m, x)
    for xi, r in zip(x, recs):
        z = logits(m, xi)
        src = int(np.argmax(z))
        other = 1 - src
        eps_star = (z[src] - z[other]) / np.abs(w[other] - w[src]).sum()
        eps = np.max(np.abs(r.delta))
        assert r.converged
        assert eps == pytest.approx(eps_star, rel=0.05)


# --------------------------------------------------------------------------
# DeepFool


@pytest.mark.parametrize("seed", range(5))
def test_deepfool_affine_closed_form(seed):
    m, rng = affine(seed)
    x = rng.standard_normal((1, 3, 3))
    w, b = m.params
    src = int(predict(m, x[None])[0])
    dw, db = w[1 - src] - w[src], b[1 - src] - b[src]
    f = dw @ x.reshape(-1) + db
    expected = -(f / (dw @ dw)) * dw * 1.02
    rec = deepfool(m, x)
    assert rec.converged and rec.iterations == 1 and rec.end_label != src
    np.testing.assert_allclose(rec.delta.reshape(-1), expected, atol=1e-9)
    assert rec.l2_norm == pytest.approx(np.linalg.norm(rec.delta), abs=1e-12)


def test_deepfool_multiclass_picks_nearest_hyperplane():
    m, rng = affine(3, classes=4)
    w, b = m.params
    for x in rng.standard_normal((10, 1, 3, 3)):
        z = logits(m, x)
        src = int(np.argmax(z))
        dists = [abs(z[k] - z[src]) / np.linalg.norm(w[k] - w[src]) if k != src else np.inf for k in range(4)]
        rec = deepfool(m, x)
        assert rec.converged
        assert rec.l2_norm == pytest.approx(1.02 * min(dists), rel=1e-9) or rec.iterations > 1


def test_deepfool_invariant_to_orthogonal_translation():
    m, rng = affine(4)
    w = m.params[0]
    x = rng.standard_normal((1, 3, 3))
    dw = w[1] - w[0]
    t = rng.standard_normal(9)
    t -= (t @ dw) / (dw @ dw) * dw
    a = deepfool(m, x).delta
    b = deepfool(m, x + t.reshape(x.shape)).delta
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_deepfool_confined_full_space_bit_exact(small_net):
    model, _, te = small_net
    x = te.images[:20]
    plain = deepfool_batch(model, x)
    full = deepfool_batch(model, x, subspace=Subspace.full(te.image_shape))
    for p, q in zip(plain, full):
        np.testing.assert_array_equal(p.delta, q.delta)
        assert (p.end_label, p.iterations, p.converged) == (q.end_label, q.iterations, q.converged)


def test_deepfool_confined_stays_in_subspace(small_net):
    model, _, te = small_net
    rng = np.random.default_rng(0)
    sub = Subspace.from_vectors(rng.standard_normal((6, 64)), te.image_shape)
    for x in te.images[:10]:
        rec = deepfool_confined(model, x, sub)
        resid = rec.delta.reshape(-1) - sub.apply(rec.delta).reshape(-1)
        assert np.linalg.norm(resid) <= 1e-9 * max(rec.l2_norm, 1e-300)


def test_deepfool_confined_null_direction_not_converged():
    m, rng = affine(5, classes=3, shape=(1, 2, 2))
    w = m.params[0]
    # a direction orthogonal to every class gradient (4 dims, 3 rows)
    _, _, vt = np.linalg.svd(w)
    null = vt[-1]
    sub = Subspace(null[None], (1, 2, 2))
    rec = deepfool_confined(m, rng.standard_normal((1, 2, 2)), sub)
    assert not rec.converged


def test_deepfool_beats_min_fgsm(small_net):
    model, tr, te = small_net
    x = np.concatenate([tr.images, te.images])[:200]
    df = deepfool_batch(model, x)
    fg = fgsm_min_epsilon(model, x)
    assert np.mean([r.converged for r in df]) >= 0.95
    assert np.mean([r.l2_norm for r in df]) < np.mean([r.l2_norm for r in fg])


def test_converged_attacks_change_label(small_net):
    model, _, te = small_net
    x = te.images[:40]
    src = predict(model, x)
    for recs in (deepfool_batch(model, x), fgsm_batch(model, x, src, 0.5)):
        for xi, s, r in zip(x, src, recs):
            if r.converged:
                assert predict(model, (xi + r.delta)[None])[0] != s
                assert r.end_label != r.source_label


# --------------------------------------------------------------------------
# targeted DeepFool


def test_targeted_affine_projection():
    m, rng = affine(6, classes=3)
    w, b = m.params
    x = rng.standard_normal((1, 3, 3))
    src = int(predict(m, x[None])[0])
    c = (src + 1) % 3
    dw, db = w[c] - w[src], b[c] - b[src]
    g = dw @ x.reshape(-1) + db
    expected = x.reshape(-1) - g / (dw @ dw) * dw
    point, ok, it = deepfool_targeted(m, x, c)
    assert ok and it == 1
    np.testing.assert_allclose(point.reshape(-1), expected, atol=1e-9)


def test_targeted_on_boundary_unchanged():
    m = linear_model(np.array([[1.0, 0.0], [0.0, 1.0]]), np.zeros(2), (1, 1, 2))
    x = np.array([[[0.5, 0.5 - 1e-9]]])
    point, ok, it = deepfool_targeted(m, x, 1)
    assert ok and it == 0
    np.testing.assert_array_equal(point, x)


def test_targeted_rejects_target_class_samples():
    m, rng = affine(7)
    x = rng.standard_normal((1, 3, 3))
    with pytest.raises(ValueError):
        deepfool_targeted(m, x, int(predict(m, x[None])[0]))


def test_targeted_postcondition_trained_net(small_net):
    model, tr, _ = small_net
    c = 0
    x = tr.images[predict(model, tr.images) != c][:100]
    cfg = AttackConfig()
    res = deepfool_targeted_batch(model, x, c, cfg)
    z0 = np.array([logits(model, xi) for xi in x])
    g0 = z0[np.arange(len(x)), c] - z0[np.arange(len(x)), res.sources]
    z = np.array([logits(model, p) for p in res.points])
    g = z[np.arange(len(x)), c] - z[np.arange(len(x)), res.sources]
    ok = res.converged
    assert ok.mean() >= 0.95
    assert np.all(np.abs(g[ok]) <= cfg.tolerance * (np.abs(g0[ok]) + cfg.tolerance))


# --------------------------------------------------------------------------
# universal perturbations and saliency


def test_uap_tiny_xi_fools_nothing(small_net):
    model, _, te = small_net
    v = uap_iterative(model, te.subset(np.arange(30)), 1e-9, AttackConfig(uap_passes=1))
    assert fooling_rate(model, te.images[:30], v) == 0.0


def test_uap_beats_random_direction(small_net):
    model, _, te = small_net
    sub = te.subset(np.arange(90))
    xi = 1.0
    v = uap_iterative(model, sub, xi, AttackConfig(uap_passes=3))
    assert np.linalg.norm(v) <= xi + 1e-12
    rand = np.median([fooling_rate(model, sub.images, random_perturbation(v.shape, xi, s)) for s in range(5)])
    assert fooling_rate(model, sub.images, v) >= rand


def test_uap_dominant_label_linear():
    rng = np.random.default_rng(8)
    c, dim = 4, 16
    w = np.linalg.qr(rng.standard_normal((dim, c)))[0].T * 4.0
    m = linear_model(w, np.zeros(c), (1, 4, 4))
    labels = np.tile(np.arange(c), 25)
    x = (w[labels] / 4.0 + 0.1 * rng.standard_normal((len(labels), dim))).reshape(-1, 1, 4, 4)
    ds = Dataset(x, predict(m, x), c)
    v = uap_iterative(m, ds, 0.8, AttackConfig(uap_passes=1))
    fooled = predict(m, x + v) != predict(m, x)
    assert fooled.any()
    share = np.bincount(predict(m, x + v)[fooled], minlength=c) / fooled.sum()
    assert share.max() > 1.0 / c


def test_uap_subspace_norm_and_single_direction():
    rng = np.random.default_rng(9)
    basis = np.linalg.qr(rng.standard_normal((9, 4)))[0].T.reshape(4, 1, 3, 3)
    ds = DirectionSet(basis, np.array([3.0, -5.0, 0.1, 1.0]))
    v = uap_subspace(ds, 3, 2.5, seed=1)
    assert np.linalg.norm(v) == pytest.approx(2.5, abs=1e-12)
    v1 = uap_subspace(ds, 1, 2.0, seed=4)
    top = ds.select(1, "top")[0]  # largest |score| is -5
    assert np.allclose(v1, 2.0 * top) or np.allclose(v1, -2.0 * top)
    flat = uap_subspace(ds, 1, 1.0, which="flat")
    assert abs(abs(np.sum(flat * ds.basis[list(ds.scores).index(0.1)])) - 1.0) <= 1e-12


def test_saliency_linear_is_weight_row():
    m, rng = affine(10, classes=3)
    x = rng.standard_normal((1, 3, 3))
    c = int(predict(m, x[None])[0])
    np.testing.assert_allclose(saliency(m, x).reshape(-1), m.params[0][c], atol=1e-14)
    np.testing.assert_array_equal(saliency(m, x), saliency(m, x))


def test_saliency_batch_matches_single(small_net):
    model, _, te = small_net
    batch = saliency_batch(model, te.images[:5])
    for k in range(5):
        np.testing.assert_allclose(batch[k], saliency(model, te.images[k]), atol=1e-13)


# --------------------------------------------------------------------------
# serialization and records


def test_perturbation_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    recs = [PerturbationRecord.make(rng.standard_normal((1, 3, 3)), 1, 2, 4, "deepfool", True),
            PerturbationRecord.make(np.zeros((1, 3, 3)), 0, 0, 50, "fgsm-min", False)]
    p = tmp_path / "p.cbprt"
    save_perturbations(recs, p)
    assert p.read_bytes()[:6] == b"CBPRT1"
    back = load_perturbations(p)
    for a, b in zip(recs, back):
        np.testing.assert_array_equal(a.delta, b.delta)
        assert (a.source_label, a.end_label, a.iterations, a.l2_norm, a.method, a.converged) == \
               (b.source_label, b.end_label, b.iterations, b.l2_norm, b.method, b.converged)


def test_perturbation_truncated(tmp_path):
    p = tmp_path / "p.cbprt"
    save_perturbations([PerturbationRecord.make(np.ones(4), 0, 1, 1, "x", True)], p)
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(ValueError):
        load_perturbations(p)


def test_attack_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(overshoot=-0.1)
    with pytest.raises(ValueError):
        AttackConfig(tolerance=0.0)
    with pytest.raises(ValueError):
        AttackConfig(max_iterations=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 5))
def test_deepfool_linear_one_step_flip(seed, classes):
    m, rng = affine(seed, classes=classes)
    x = rng.standard_normal((1, 3, 3))
    rec = deepfool(m, x)
    assert rec.converged and rec.iterations == 1
    assert int(predict(m, (x + rec.delta)[None])[0]) != int(predict(m, x[None])[0])
