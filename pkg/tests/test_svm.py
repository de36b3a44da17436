import numpy as np
import pytest

from canehsi.patches import Patch, PatchSet
from canehsi.segmentation import hinge_sgd
from canehsi.svm import (
    MulticlassSvmModel,
    SvrModel,
    evaluate,
    evaluate_model,
    load_model,
    predict_svc,
    save_model,
    train_svc,
    train_svr,
)
from canehsi.synthgen import RATING_CLASSES


def make_set(per_class, classes=RATING_CLASSES, n=2, bands=3, seed=0, spread=0.05, labels=None):
    """Gaussian blobs in flattened-patch space, one centre per class."""
    rng = np.random.default_rng(seed)
    d = n * n * bands
    centres = {k: rng.random(d) for k in classes}
    out = []
    for k in classes:
        for i in range(per_class):
            x = centres[k] + spread * rng.standard_normal(d)
            out.append(Patch(x.reshape(n, n, bands), k, (0, i, k)))
    if labels is not None:
        for p, lab in zip(out, labels):
            p.label = int(lab)
    return PatchSet(out, n, bands)


def test_constant_patches_separable():
    out = []
    for j, k in enumerate(RATING_CLASSES):
        v = np.zeros(7)
        v[j] = 1.0  # one-hot constant patches
        out += [Patch(np.broadcast_to(v, (2, 2, 7)), k, (0, i, 0)) for i in range(5)]
    ps = PatchSet(out, 2, 7)
    m = train_svc(ps, lam=1e-2, epochs=20)
    assert evaluate_model(m, ps).accuracy == 1.0


def test_separable_blobs_reproduce_labels():
    ps = make_set(20, spread=0.02)
    m = train_svc(ps, lam=1e-3, epochs=20)
    assert evaluate_model(m, ps).accuracy == 1.0
    assert predict_svc(m, ps.patches[25]) == ps.patches[25].label


def test_shuffled_labels_near_chance():
    accs = []
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        train = make_set(30, seed=seed, spread=0.3, labels=rng.choice(RATING_CLASSES, 210))
        test = make_set(30, seed=seed + 50, spread=0.3, labels=rng.choice(RATING_CLASSES, 210))
        accs.append(evaluate_model(train_svc(train, seed=seed), test).accuracy)
    assert 0.05 <= np.mean(accs) <= 0.25
    assert all(0.0 <= a <= 0.35 for a in accs)


def test_constant_bias_model_predicts_class_one():
    m = MulticlassSvmModel(np.zeros((7, 12)), np.array([1.0, 0, 0, 0, 0, 0, 0]))
    assert set(m.predict(np.random.default_rng(0).random((20, 12)))) == {1}


def test_ties_go_to_lowest_class():
    m = MulticlassSvmModel(np.zeros((7, 4)), np.array([0, 0, 2.0, 2.0, 0, 0, 2.0]))
    assert m.predict(np.ones((1, 4)))[0] == 5


@pytest.mark.parametrize("s", [1e-3, 0.7, 3.0, 1e5])
def test_argmax_scale_invariance(s):
    ps = make_set(10)
    m = train_svc(ps)
    scaled = MulticlassSvmModel(m.weights * s, m.biases * s, m.lam, m.epochs, m.seed)
    X = make_set(10, seed=4).features()
    np.testing.assert_array_equal(scaled.predict(X), m.predict(X))


def test_feature_length_mismatch():
    m = train_svc(make_set(5))
    with pytest.raises(ValueError):
        m.predict(np.zeros((1, 5)))


def test_single_class_rejected():
    with pytest.raises(ValueError):
        train_svc(make_set(5, classes=(2,)))


def test_two_class_one_vs_rest_consistency():
    ps = make_set(25, classes=(2, 8), spread=0.4, seed=3)
    m = train_svc(ps, lam=0.01, epochs=5, seed=7)
    X = ps.features().astype(np.float64)
    y = np.where(ps.labels() == 2, 1.0, -1.0)
    w, b, _ = hinge_sgd(X, y, 0.01, 5, 7)
    binary = np.where(X @ w + b > 0, 2, 8)
    np.testing.assert_allclose(m.weights[5], -m.weights[1])
    # absent classes are trained against all-negative labels and never win
    np.testing.assert_array_equal(m.predict(X), binary)


def test_svc_deterministic(tmp_path):
    ps = make_set(10)
    save_model(train_svc(ps, seed=3), tmp_path / "a.json")
    save_model(train_svc(ps, seed=3), tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    back = load_model(tmp_path / "a.json")
    np.testing.assert_array_equal(back.weights, train_svc(ps, seed=3).weights)


def test_svr_constant_target():
    ps = make_set(10, classes=(5,), seed=2)
    m = train_svr(ps, lam=0.01, epsilon_tube=0.5, epochs=20)
    v = m.predict_value(ps.features())
    assert np.all((v >= 4.5) & (v <= 5.5))
    assert set(m.predict(ps.features())) == {5}


def test_svr_rounds_to_vocabulary():
    m = SvrModel(np.zeros(3), 3.4, 0.5)
    assert m.predict(np.zeros((1, 3)))[0] == 2
    m = SvrModel(np.zeros(3), 3.6, 0.5)
    assert m.predict(np.zeros((1, 3)))[0] == 5
    m = SvrModel(np.zeros(3), 42.0, 0.5)
    assert m.predict(np.zeros((1, 3)))[0] == 9


def test_svr_round_trip(tmp_path):
    m = train_svr(make_set(5), epochs=2)
    save_model(m, tmp_path / "r.json")
    back = load_model(tmp_path / "r.json")
    assert isinstance(back, SvrModel)
    np.testing.assert_array_equal(back.weights, m.weights)


def test_svr_empty():
    with pytest.raises(ValueError):
        train_svr(PatchSet([], 2, 3))


def test_evaluate_all_correct():
    pairs = [(k, k) for k in RATING_CLASSES for _ in range(3)]
    r = evaluate(pairs)
    assert r.accuracy == 1.0 and r.n == 21
    np.testing.assert_array_equal(r.confusion, 3 * np.eye(7, dtype=int))


def test_evaluate_constant_prediction():
    r = evaluate([(k, 1) for k in RATING_CLASSES])
    assert r.accuracy == pytest.approx(1 / 7)
    assert r.per_class_recall[1] == 1.0 and r.per_class_recall[9] == 0.0


def test_evaluate_invariants():
    rng = np.random.default_rng(5)
    t = rng.choice(RATING_CLASSES, 200)
    p = rng.choice(RATING_CLASSES, 200)
    r = evaluate(zip(t, p))
    assert r.confusion.sum() == 200
    assert r.accuracy == np.trace(r.confusion) / 200
    for i, k in enumerate(RATING_CLASSES):
        assert r.confusion[i].sum() == np.sum(t == k)


def test_evaluate_empty():
    with pytest.raises(ValueError):
        evaluate([])


def test_report_exports(tmp_path):
    r = evaluate([(1, 1), (2, 5), (9, 9)])
    r.save_confusion_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert len(lines) == 8 and lines[0].endswith(",1,2,5,6,7,8,9")
    assert r.to_json()["n"] == 3
