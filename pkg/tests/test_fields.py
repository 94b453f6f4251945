import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brite.fields import (Diffeo, ScalarField2D, VectorField2D, compose, emps, epe, exp_map, interior_mask,
                          jacobian_determinant, max_principal_strain, pixel_grid, sample_array, summary_stats,
                          warp)


def random_field(seed, shape=(16, 16), scale=1.0):
    rng = np.random.default_rng(seed)
    return VectorField2D(scale * rng.normal(size=shape), scale * rng.normal(size=shape))


def loop_epe(gt, est):
    h, w = gt.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            ex = est.dx[i, j] - gt.dx[i, j]
            ey = est.dy[i, j] - gt.dy[i, j]
            out[i, j] = math.sqrt(ex * ex + ey * ey)
    return out


def loop_derivative(a, i, j, axis):
    """Central difference, one-sided at the border (unit spacing)."""
    n = a.shape[axis]
    k = i if axis == 0 else j

    def at(m):
        return a[m, j] if axis == 0 else a[i, m]

    if k == 0:
        return at(1) - at(0)
    if k == n - 1:
        return at(n - 1) - at(n - 2)
    return (at(k + 1) - at(k - 1)) / 2.0


def loop_mps(d):
    h, w = d.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            F = np.eye(2) + np.array([[loop_derivative(d.dx, i, j, 1), loop_derivative(d.dx, i, j, 0)],
                                      [loop_derivative(d.dy, i, j, 1), loop_derivative(d.dy, i, j, 0)]])
            E = 0.5 * (F.T @ F - np.eye(2))
            out[i, j] = np.linalg.eigvalsh(E)[-1]
    return out


@pytest.mark.parametrize("seed", range(5))
def test_epe_matches_loop_oracle_exactly(seed):
    gt, est = random_field(seed), random_field(seed + 100)
    np.testing.assert_array_equal(epe(gt, est).data, loop_epe(gt, est))


@pytest.mark.parametrize("seed", range(5))
def test_mps_and_emps_match_loop_oracle(seed):
    gt, est = random_field(seed, scale=0.3), random_field(seed + 100, scale=0.3)
    np.testing.assert_allclose(max_principal_strain(est).data, loop_mps(est), atol=1e-10, rtol=0)
    np.testing.assert_allclose(emps(gt, est).data, np.abs(loop_mps(gt) - loop_mps(est)), atol=1e-10, rtol=0)


def test_strain_of_rigid_rotation_is_zero_and_of_stretch_is_analytic():
    x, y = pixel_grid((20, 20))
    th = 0.4
    rot = VectorField2D(np.cos(th) * x - np.sin(th) * y - x, np.sin(th) * x + np.cos(th) * y - y)
    np.testing.assert_allclose(max_principal_strain(rot).data, 0.0, atol=1e-12)
    stretch = VectorField2D(0.1 * x, np.zeros_like(x))
    np.testing.assert_allclose(max_principal_strain(stretch).data, 0.5 * (1.1 ** 2 - 1), atol=1e-12)


def test_field_validation():
    with pytest.raises(ValueError):
        ScalarField2D(np.zeros(4))
    with pytest.raises(ValueError):
        ScalarField2D(np.zeros((3, 3)), spacing_mm=(0.0, 1.0))
    with pytest.raises(ValueError):
        VectorField2D(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        VectorField2D(np.full((3, 3), np.nan), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        epe(VectorField2D.zeros((4, 4)), VectorField2D.zeros((5, 5)))


def test_vector_field_helpers():
    v = random_field(0, (5, 6))
    np.testing.assert_array_equal(VectorField2D.from_array(v.as_array()).dx, v.dx)
    np.testing.assert_array_equal((-v).dy, -v.dy)
    np.testing.assert_allclose(v.scaled(2.0).magnitude(), 2 * v.magnitude())
    mx, my = VectorField2D(v.dx, v.dy, (2.0, 3.0)).to_mm()
    np.testing.assert_allclose(my, 3 * v.dy)


def test_sample_array_exact_on_grid_and_linear():
    rng = np.random.default_rng(0)
    arr = rng.normal(size=(6, 7))
    x, y = pixel_grid(arr.shape)
    np.testing.assert_allclose(sample_array(arr, x.astype(float), y.astype(float)), arr, atol=1e-15, rtol=0)
    lin = 3 * x - 2 * y
    px, py = rng.uniform(0, 6, 30), rng.uniform(0, 5, 30)
    np.testing.assert_allclose(sample_array(lin.astype(float), px, py), 3 * px - 2 * py, atol=1e-12)
    chans = np.stack([arr, 2 * arr], axis=-1)
    np.testing.assert_allclose(sample_array(chans, px, py)[..., 1], 2 * sample_array(arr, px, py))


def test_warp_by_integer_translation():
    arr = np.random.default_rng(1).normal(size=(10, 10))
    out = warp(ScalarField2D(arr), VectorField2D(np.full((10, 10), 2.0), np.zeros((10, 10))))
    np.testing.assert_allclose(out.data[:, :8], arr[:, 2:], atol=1e-15, rtol=0)


def test_compose_with_identity_and_translations():
    v = random_field(3, (12, 12), 0.2)
    z = VectorField2D.zeros((12, 12))
    np.testing.assert_allclose(compose(v, z).dx, v.dx)
    np.testing.assert_allclose(compose(z, v).dy, v.dy)
    a = VectorField2D(np.full((8, 8), 0.5), np.full((8, 8), -0.25))
    np.testing.assert_allclose(compose(a, a).dx[2:-2, 2:-2], 1.0)


def test_exp_map_zero_and_constant_velocity():
    z = exp_map(VectorField2D.zeros((16, 16)))
    assert np.all(z.forward.dx == 0) and np.all(z.inverse.dy == 0)
    c = exp_map(VectorField2D(np.full((16, 16), 1.25), np.full((16, 16), -0.5)))
    np.testing.assert_allclose(c.forward.dx[4:-4, 4:-4], 1.25, atol=1e-12)
    np.testing.assert_allclose(c.inverse.dy[4:-4, 4:-4], 0.5, atol=1e-12)


def test_exp_map_rotation_is_close_to_analytic():
    n = 48
    x, y = pixel_grid((n, n))
    c = (n - 1) / 2
    th = 0.26
    vel = VectorField2D(-th * (y - c), th * (x - c))
    d = exp_map(vel)
    ex = c + np.cos(th) * (x - c) - np.sin(th) * (y - c) - x
    ey = c + np.sin(th) * (x - c) + np.cos(th) * (y - c) - y
    m = interior_mask((n, n), 10)
    assert np.max(np.hypot(d.forward.dx - ex, d.forward.dy - ey)[m]) < 0.05


def test_exp_map_validation():
    with pytest.raises(ValueError):
        exp_map(VectorField2D.zeros((8, 8)), n_steps=0)


def test_diffeo_identity_residual():
    d = Diffeo.identity((6, 6))
    assert np.all(d.inverse_residual() == 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.5, 5.0))
def test_exp_map_inverse_consistency_property(seed, amp):
    from scipy.ndimage import gaussian_filter
    rng = np.random.default_rng(seed)
    raw = [gaussian_filter(rng.normal(size=(48, 48)), 6, mode="nearest") for _ in range(2)]
    peak = max(np.abs(r).max() for r in raw)
    vel = VectorField2D(*(amp * r / peak for r in raw))
    d = exp_map(vel, 7)
    m = interior_mask((48, 48), 8)
    assert compose(d.forward, d.inverse).magnitude()[m].max() < 0.1
    assert jacobian_determinant(d.forward).data[m].min() > 0


def test_summary_stats():
    vals = np.arange(10.0).reshape(2, 5)
    s = summary_stats(vals)
    assert s["median"] == 4.5 and s["n"] == 10 and s["q1"] == 2.25
    mask = np.zeros_like(vals, bool)
    assert math.isnan(summary_stats(vals, mask)["mean"])
    assert summary_stats(ScalarField2D(vals), vals > 6)["mean"] == 8.0
