import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canehsi.hypercube import CubeKind, HyperCube, Mask, even_wavelengths
from canehsi.spectral import (
    NEIGHBOR_OFFSETS,
    laplacian_map,
    local_laplacian,
    mean_spectral_curve,
    sam_angle,
    sam_angles,
)
from canehsi.synthgen import SceneSpec, generate_scene

spectra = st.lists(st.floats(0.0, 10.0, allow_nan=False), min_size=11, max_size=11).filter(lambda v: sum(v) > 1e-3)


def cube_from(data):
    data = np.asarray(data, dtype=np.float32)
    return HyperCube(data, even_wavelengths(data.shape[2]), CubeKind.REFLECTANCE)


def full_mask(h, w):
    return Mask(np.ones((h, w), dtype=bool))


def brute_angle(x, y):
    # direct transcription of the arccos definition, used as an independent oracle
    x = [float(v) for v in x]
    y = [float(v) for v in y]
    dot = sum(a * b for a, b in zip(x, y))
    nx = math.sqrt(sum(a * a for a in x))
    ny = math.sqrt(sum(b * b for b in y))
    return math.acos(max(-1.0, min(1.0, dot / (nx * ny))))


# --- mean curve -------------------------------------------------------------


def test_mean_curve_constant():
    c = cube_from(np.full((5, 6, 11), 0.3))
    m = Mask(np.random.default_rng(0).random((5, 6)) > 0.4)
    np.testing.assert_allclose(mean_spectral_curve(c, m).values, 0.3, rtol=1e-6)


def test_mean_curve_single_pixel():
    data = np.random.default_rng(1).random((4, 4, 11))
    c = cube_from(data)
    bits = np.zeros((4, 4), dtype=bool)
    bits[2, 1] = True
    np.testing.assert_array_equal(mean_spectral_curve(c, Mask(bits)).values, c.data[2, 1])


def test_mean_curve_empty_mask():
    c = cube_from(np.ones((3, 3, 11)))
    with pytest.raises(ValueError):
        mean_spectral_curve(c, Mask(np.zeros((3, 3), dtype=bool)))


def test_mean_curves_differ_between_classes():
    curves = []
    for k in (2, 9):
        _, _, truth = generate_scene(SceneSpec(rating_class=k, noise_sigma=0.0, seed=4))
        curves.append(mean_spectral_curve(truth.reflectance, truth.mask).values)
    assert np.max(np.abs(curves[0] - curves[1])) > 0


# --- SAM ------------------------------------------------------------------------


def test_sam_analytic_values():
    assert sam_angle([1, 0], [1, 1]) == pytest.approx(math.pi / 4, abs=1e-9)
    e1 = np.zeros(11)
    e2 = np.zeros(11)
    e1[0] = 1
    e2[1] = 1
    assert sam_angle(e1, e2) == pytest.approx(math.pi / 2, abs=1e-12)
    assert sam_angle([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0


def test_sam_zero_vector():
    with pytest.raises(ValueError):
        sam_angle([0, 0, 0], [1, 2, 3])


def test_sam_length_mismatch():
    with pytest.raises(ValueError):
        sam_angle([1, 2], [1, 2, 3])


@settings(max_examples=200)
@given(spectra, spectra, st.floats(1e-3, 1e3))
def test_sam_properties(x, y, a):
    t = sam_angle(x, y)
    assert 0.0 <= t <= math.pi
    assert sam_angle(x, x) == 0.0
    assert sam_angle(y, x) == t
    assert abs(sam_angle(np.multiply(a, x), y) - t) < 1e-9
    assert abs(t - brute_angle(x, y)) < 1e-7


def test_vectorised_angles_match_scalar():
    rng = np.random.default_rng(2)
    X = rng.random((50, 11))
    Y = rng.random((50, 11))
    got = sam_angles(X, Y)
    for i in range(50):
        assert got[i] == pytest.approx(sam_angle(X[i], Y[i]), abs=1e-12)


# --- local Laplacian --------------------------------------------------------------


def test_local_laplacian_constant_cube():
    g = local_laplacian(cube_from(np.full((5, 5, 11), 0.4)), full_mask(5, 5), 2, 2)
    assert g.m == 9
    off = ~np.eye(9, dtype=bool)
    np.testing.assert_allclose(g.W[off], 1.0)
    assert g.D[0, 0] == pytest.approx(8.0)
    np.testing.assert_allclose(g.L.sum(axis=1), 0.0, atol=1e-12)


def test_local_laplacian_corner():
    g = local_laplacian(cube_from(np.full((5, 5, 11), 0.4)), full_mask(5, 5), 0, 0)
    assert g.m == 4
    assert g.pixel_ids[0] == (0, 0)


def test_local_laplacian_respects_mask():
    bits = np.ones((5, 5), dtype=bool)
    bits[1, 1] = False
    g = local_laplacian(cube_from(np.full((5, 5, 11), 0.4)), Mask(bits), 2, 2)
    assert g.m == 8 and (1, 1) not in g.pixel_ids


def test_local_laplacian_background_pixel():
    bits = np.ones((3, 3), dtype=bool)
    bits[1, 1] = False
    with pytest.raises(ValueError):
        local_laplacian(cube_from(np.ones((3, 3, 11))), Mask(bits), 1, 1)


def test_local_laplacian_psd_eigen_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        c = cube_from(rng.random((3, 3, 11)))
        g = local_laplacian(c, full_mask(3, 3), 1, 1)
        assert np.allclose(g.W, g.W.T) and np.all(np.diag(g.W) == 0)
        assert g.W.min() >= 0 and g.W.max() <= 1
        assert np.linalg.eigvalsh(g.L).min() >= -1e-6
        v = rng.standard_normal(g.m)
        quad = 0.5 * sum(g.W[i, j] * (v[i] - v[j]) ** 2 for i in range(g.m) for j in range(g.m))
        assert v @ g.L @ v == pytest.approx(quad, abs=1e-6)
        np.testing.assert_allclose(g.L @ np.ones(g.m), 0.0, atol=1e-6)


# --- Laplacian maps ---------------------------------------------------------------


def neighbour_counts(bits):
    h, w = bits.shape
    out = np.zeros((h, w), dtype=int)
    for r in range(h):
        for c in range(w):
            if not bits[r, c]:
                continue
            for dr, dc in NEIGHBOR_OFFSETS:
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and bits[rr, cc]:
                    out[r, c] += 1
    return out


def test_map_constant_cube():
    bits = np.random.default_rng(4).random((8, 9)) > 0.3
    c = cube_from(np.full((8, 9, 11), 0.5))
    ma = laplacian_map(c, Mask(bits), "mean_angle")
    deg = laplacian_map(c, Mask(bits), "degree")
    counts = neighbour_counts(bits)
    np.testing.assert_array_equal(ma.valid.bits, bits & (counts > 0))
    assert np.all(ma.values[ma.valid.bits] == 0)
    np.testing.assert_allclose(deg.values[deg.valid.bits], counts[deg.valid.bits])


def test_map_boundary_argmax():
    data = np.zeros((10, 12, 11))
    data[:, :6, :] = np.linspace(0.1, 0.6, 11)
    data[:, 6:, :] = np.linspace(0.6, 0.1, 11)
    ma = laplacian_map(cube_from(data), full_mask(10, 12))
    col_mean = ma.values.mean(axis=0)
    assert set(np.flatnonzero(col_mean == col_mean.max())) == {5, 6}


def test_map_matches_local_graph():
    rng = np.random.default_rng(5)
    c = cube_from(rng.random((12, 12, 11)))
    bits = rng.random((12, 12)) > 0.2
    m = Mask(bits)
    ma = laplacian_map(c, m, "mean_angle")
    deg = laplacian_map(c, m, "degree")
    pix = np.argwhere(ma.valid.bits)
    for r, col in pix[rng.choice(len(pix), 100)]:
        g = local_laplacian(c, m, r, col)
        assert deg.values[r, col] == pytest.approx(g.W[0].sum(), abs=1e-9)
        # degree = (m - 1) - sum(1 - affinity)
        assert deg.values[r, col] == pytest.approx((g.m - 1) - np.sum(1 - g.W[0, 1:]), abs=1e-9)
        angles = [sam_angle(c.data[r, col], c.data[i, j]) for i, j in g.pixel_ids[1:]]
        assert ma.values[r, col] == pytest.approx(np.mean(angles), abs=1e-9)


def test_map_isolated_pixel_invalid():
    bits = np.zeros((5, 5), dtype=bool)
    bits[2, 2] = True
    ma = laplacian_map(cube_from(np.ones((5, 5, 11))), Mask(bits))
    assert not ma.valid.bits.any()


def test_map_class_gap():
    # stand-in for the visual difference between varieties: mean-angle distributions differ
    means = []
    for k in (1, 7):
        _, _, truth = generate_scene(SceneSpec(rating_class=k, noise_sigma=0.0, seed=11))
        ma = laplacian_map(truth.reflectance, truth.mask)
        means.append(ma.values[ma.valid.bits].mean())
    assert abs(means[0] - means[1]) > 0.005


def test_scalar_map_exports(tmp_path):
    from canehsi.hypercube import load_pgm

    c = cube_from(np.random.default_rng(6).random((6, 7, 11)))
    ma = laplacian_map(c, full_mask(6, 7))
    meta = ma.save_pgm(tmp_path / "m.pgm", tmp_path / "m.json")
    img = load_pgm(tmp_path / "m.pgm")
    assert img.dtype.itemsize == 2 and img.max() == 65535 and img.min() == 0
    assert meta["max"] > meta["min"]
    ma.save_csv(tmp_path / "m.csv")
    assert len((tmp_path / "m.csv").read_text().splitlines()) == 43
