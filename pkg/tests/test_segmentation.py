import numpy as np
import pytest

from canehsi.calibration import calibrate
from canehsi.hypercube import HyperCube, Mask, SpectralCurve, even_wavelengths
from canehsi.segmentation import (
    PixelSvmModel,
    decision_values,
    iou,
    mask_clean,
    sample_pixels,
    segment,
    train_pixel_svm,
)
from canehsi.synthgen import SceneSpec, generate_scene


def point_masses(n=20, b=11):
    return [(np.ones(b), "fg")] * n + [(np.zeros(b), "bg")] * n


@pytest.fixture(scope="module")
def calibrated_scenes():
    out = []
    for k, seed in ((1, 100), (7, 101), (9, 102), (5, 103)):
        raw, dark, truth = generate_scene(SceneSpec(rating_class=k, noise_sigma=0.01, seed=seed))
        out.append((calibrate(raw, dark)[0], truth.mask))
    return out


@pytest.fixture(scope="module")
def pixel_model(calibrated_scenes):
    samples = []
    for i, (cube, mask) in enumerate(calibrated_scenes[:2]):
        samples += sample_pixels(cube, mask, 2500, seed=i)
    return train_pixel_svm(samples, lam=1e-3, epochs=5, seed=0)


def test_point_masses_separable():
    data = point_masses()
    m = train_pixel_svm(data, lam=0.01, epochs=5, seed=0)
    X = np.stack([x for x, _ in data])
    pred = X @ m.weights + m.bias > 0
    np.testing.assert_array_equal(pred, [True] * 20 + [False] * 20)


def test_training_deterministic():
    data = [(np.random.default_rng(i).random(11), i % 2 == 0) for i in range(100)]
    a = train_pixel_svm(data, seed=4)
    b = train_pixel_svm(data, seed=4)
    np.testing.assert_array_equal(a.weights, b.weights)
    assert a.bias == b.bias
    c = train_pixel_svm(data, seed=5)
    assert not np.array_equal(a.weights, c.weights)


def test_accepts_spectral_curves():
    wl = even_wavelengths(11)
    data = [(SpectralCurve(wl, x), lab) for x, lab in point_masses(5)]
    assert train_pixel_svm(data).trained_on == 10


def test_training_errors():
    with pytest.raises(ValueError):
        train_pixel_svm([])
    with pytest.raises(ValueError):
        train_pixel_svm([(np.ones(11), "fg")] * 5)


def test_objective_decreases():
    m = train_pixel_svm(point_masses(), lam=0.01, epochs=10, seed=1)
    assert len(m.objectives) == 11
    assert m.objectives[-1] < m.objectives[0]


def test_held_out_pixel_accuracy(pixel_model, calibrated_scenes):
    # 5000 sampled pixels per class over the two training scenes, evaluated on unseen scenes
    assert pixel_model.trained_on == 10000
    correct = total = 0
    for cube, mask in calibrated_scenes[2:]:
        pred = segment(cube, pixel_model).bits
        correct += int((pred == mask.bits).sum())
        total += mask.bits.size
    assert correct / total >= 0.99


def test_fresh_scene_iou(pixel_model):
    raw, dark, truth = generate_scene(SceneSpec(rating_class=2, noise_sigma=0.01, seed=555))
    cube, _ = calibrate(raw, dark)
    assert iou(segment(cube, pixel_model), truth.mask) >= 0.98


@pytest.mark.parametrize("b, expected", [(1.0, True), (-1.0, False)])
def test_constant_classifier(b, expected):
    cube = HyperCube(np.random.default_rng(0).random((4, 6, 11)), even_wavelengths(11))
    mask = segment(cube, PixelSvmModel(np.zeros(11), b, 1))
    assert np.all(mask.bits == expected)


def test_band_mismatch():
    cube = HyperCube(np.ones((2, 2, 5)), even_wavelengths(5))
    with pytest.raises(ValueError):
        segment(cube, PixelSvmModel(np.zeros(11), 0.0, 1))


@pytest.mark.parametrize("s", [1e-3, 0.5, 7.0, 1e4])
def test_scale_invariance(pixel_model, calibrated_scenes, s):
    cube = calibrated_scenes[0][0]
    scaled = PixelSvmModel(pixel_model.weights * s, pixel_model.bias * s, 1)
    assert segment(cube, scaled) == segment(cube, pixel_model)


def test_decision_values_shape(pixel_model, calibrated_scenes):
    cube = calibrated_scenes[0][0]
    assert decision_values(cube, pixel_model).shape == (cube.height, cube.width)


def test_model_json_round_trip(tmp_path, pixel_model):
    pixel_model.save(tmp_path / "m.json")
    back = PixelSvmModel.load(tmp_path / "m.json")
    np.testing.assert_array_equal(back.weights, pixel_model.weights)
    assert back.bias == pixel_model.bias and back.trained_on == pixel_model.trained_on


def test_sample_pixels_counts(calibrated_scenes):
    cube, mask = calibrated_scenes[0]
    s = sample_pixels(cube, mask, 100, seed=0)
    assert sum(lab for _, lab in s) == 100 and len(s) == 200
    assert [x.tolist() for x, _ in s] == [x.tolist() for x, _ in sample_pixels(cube, mask, 100, seed=0)]


# --- mask cleaning --------------------------------------------------------------------


def test_clean_identity():
    bits = np.random.default_rng(1).random((20, 20)) > 0.5
    assert mask_clean(Mask(bits), 1) == Mask(bits)


def test_clean_small_blob():
    bits = np.zeros((6, 6), dtype=bool)
    bits[2, 1:4] = True
    assert mask_clean(Mask(bits), 4).count == 0
    assert mask_clean(Mask(bits), 3).count == 3


def test_clean_uses_four_connectivity():
    bits = np.zeros((5, 5), dtype=bool)
    bits[1, 1] = bits[2, 2] = bits[3, 3] = True  # diagonal chain: three 1-px components
    assert mask_clean(Mask(bits), 2).count == 0


def test_clean_salt_noise_improves_iou():
    truth = np.zeros((60, 80), dtype=bool)
    truth[10:50, 15:65] = True
    rng = np.random.default_rng(2)
    noisy = truth ^ (rng.random(truth.shape) < 0.01)
    raw_iou = iou(Mask(noisy), Mask(truth))
    cleaned_iou = iou(mask_clean(Mask(noisy), 10), Mask(truth))
    assert cleaned_iou >= raw_iou
