import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crowdspeak.errors import GeometryError, ValidationError
from crowdspeak.geometry import Homography, estimate_homography, load_calibration, save_calibration, scale_factor

SQUARE = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)


def test_identity_and_scale():
    h = estimate_homography(SQUARE, SQUARE)
    np.testing.assert_allclose(h.matrix, np.eye(3), atol=1e-9)
    h = estimate_homography(SQUARE, 2 * SQUARE)
    np.testing.assert_allclose(h.matrix, np.diag([2, 2, 1.0]), atol=1e-9)
    np.testing.assert_allclose(h.matrix @ h.inverse, np.eye(3), atol=1e-9)


def _random_h(r):
    return np.array([[80 + r.uniform(-10, 10), r.uniform(-20, 20), 900],
                     [r.uniform(-5, 5), 30 + r.uniform(-5, 5), 300],
                     [r.uniform(-0.02, 0.02), 0.08 + r.uniform(-0.01, 0.01), 1.0]])


def test_recover_random_homography(rng):
    for _ in range(10):
        H = _random_h(rng)
        g = rng.uniform(-3, 3, (8, 2)) + [0, 5]
        im = Homography(H, [0, 0]).to_image(g)
        est = estimate_homography(g, im)
        a = est.matrix / np.linalg.norm(est.matrix)
        b = H / np.linalg.norm(H)
        assert np.abs(a - b * np.sign(a[2, 2] * b[2, 2])).max() < 1e-6
        assert est.rms_error < 1e-6


def test_degenerate_inputs():
    with pytest.raises(ValidationError):
        estimate_homography(SQUARE[:3], SQUARE[:3])
    with pytest.raises(GeometryError):
        estimate_homography([[0, 0], [1, 0], [2, 0], [0, 1]], SQUARE)


def _perspective():
    H = np.array([[100.0, 0, 960], [0, 40, 200], [0, 0.1, 1.0]])
    return Homography(H, Homography(H, [0, 0]).to_image([0.5, 5.0]))


def test_scale_factor_reference_and_identity():
    h = _perspective()
    assert scale_factor(h, h.ref_point) == 1.0
    ident = Homography(np.eye(3), [3, 4])
    for p in ([0, 0], [10, -3], [100, 50]):
        assert abs(scale_factor(ident, p) - 1.0) < 1e-12


def _jacobian_scale(H, g):
    x, y = g
    w = H[2, 0] * x + H[2, 1] * y + H[2, 2]
    u = (H[0, 0] * x + H[0, 1] * y + H[0, 2]) / w
    v = (H[1, 0] * x + H[1, 1] * y + H[1, 2]) / w
    J = np.array([[(H[0, 0] - u * H[2, 0]) / w, (H[0, 1] - u * H[2, 1]) / w],
                  [(H[1, 0] - v * H[2, 0]) / w, (H[1, 1] - v * H[2, 1]) / w]])
    return (np.linalg.norm(J[:, 0]) + np.linalg.norm(J[:, 1])) / 2


def test_scale_factor_matches_jacobian():
    h = _perspective()
    gr = h.to_ground(h.ref_point)
    for g in ([0.0, 3.0], [1.0, 8.0], [-2.0, 12.0]):
        p = h.to_image(g)
        want = _jacobian_scale(h.matrix, g) / _jacobian_scale(h.matrix, gr)
        assert abs(scale_factor(h, p, 1e-3) - want) < 1e-4


@given(st.floats(0.1, 100), st.floats(-5, 5), st.floats(1, 20))
def test_scale_invariant_to_matrix_rescale(c, gx, gy):
    h = _perspective()
    h2 = Homography(h.matrix * c, h.ref_point)
    p = h.to_image([gx, gy])
    assert abs(h.scale_factor(p) - h2.scale_factor(p)) < 1e-9 * max(1, h.scale_factor(p))


def test_affine_scale_constant(rng):
    A = np.array([[50.0, 10, 100], [-5, 30, 40], [0, 0, 1]])
    h = Homography(A, [0, 0])
    s = h.scale_factor(rng.uniform(-1000, 1000, (20, 2)))
    assert np.ptp(s) < 1e-9


def test_delta_stability():
    h = _perspective()
    p = h.to_image([1.0, 9.0])
    a, b = h.scale_factor(p, 0.01), h.scale_factor(p, 0.001)
    assert abs(a - b) / b < 1e-3


def test_beyond_horizon():
    h = _perspective()
    with pytest.raises(GeometryError):
        h.scale_factor([960.0, 400.0 + 1e6])


def test_calibration_roundtrip(tmp_path, rng):
    H = _random_h(rng)
    g = rng.uniform(-3, 3, (6, 2)) + [0, 5]
    im = Homography(H, [0, 0]).to_image(g)
    save_calibration(tmp_path / "c.json", g, im, [900, 500])
    h = load_calibration(tmp_path / "c.json")
    np.testing.assert_allclose(h.to_image(g), im, atol=1e-6)
    assert np.array_equal(h.ref_point, [900, 500])
