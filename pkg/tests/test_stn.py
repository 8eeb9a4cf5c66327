import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stnadapt import gradcheck
from stnadapt.autodiff import NumericsError, ShapeError, Tensor
from stnadapt.stn import (
    IDENTITY_THETA,
    bilinear_sample,
    compose_theta,
    invert_theta,
    make_affine_grid,
    mean_theta,
    theta_statistics,
    warp_image,
)


def grid_for(theta, h, w):
    return make_affine_grid(Tensor(np.asarray(theta, dtype=np.float64)), h, w)


def test_identity_grid_is_target_lattice():
    g = grid_for(IDENTITY_THETA, 3, 5).data
    assert np.allclose(g[0, 0], [-1, -1])
    assert np.allclose(g[-1, -1], [1, 1])
    assert np.allclose(g[1, 2], [0, 0])


def test_translation_grid():
    g = grid_for([1, 0, 0.5, 0, 1, 0], 3, 3).data
    # target center (0,0) maps to source (0.5, 0)
    assert np.allclose(g[1, 1], [0.5, 0.0])


def test_scaling_grid():
    g = grid_for([2, 0, 0, 0, 2, 0], 5, 5).data
    # target (0.5, 0.5) maps to source (1, 1)
    assert np.allclose(g[3, 3], [1.0, 1.0])


def test_theta_must_have_six_components():
    with pytest.raises(ShapeError):
        make_affine_grid(Tensor(np.zeros(5)), 4, 4)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_grid_linear_in_theta(seed):
    rng = np.random.default_rng(seed)
    t1, t2 = rng.standard_normal((2, 6))
    a, b = rng.standard_normal(2)
    lhs = grid_for(a * t1 + b * t2, 4, 6).data
    rhs = a * grid_for(t1, 4, 6).data + b * grid_for(t2, 4, 6).data
    assert np.allclose(lhs, rhs, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_coordinate_composition_matches_matrix_product(seed):
    rng = np.random.default_rng(seed)
    t1 = IDENTITY_THETA + 0.3 * rng.standard_normal(6)
    t2 = IDENTITY_THETA + 0.3 * rng.standard_normal(6)
    g1 = grid_for(t1, 4, 5).data  # [H,W,2]
    # apply t2's affine map to the coordinates produced by t1
    m2 = np.vstack([t2.reshape(2, 3), [0, 0, 1]])
    hom = np.concatenate([g1, np.ones(g1.shape[:2] + (1,))], axis=-1)
    chained = hom @ m2[:2].T
    direct = grid_for(compose_theta(t2, t1), 4, 5).data
    assert np.allclose(chained, direct, atol=1e-12)


def test_bilinear_center_of_2x2():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])[None]
    grid = Tensor(np.zeros((1, 1, 2)))
    out = bilinear_sample(Tensor(img), grid)
    assert out.data.reshape(()) == pytest.approx(1.5)


def test_bilinear_corner_is_exact_pixel():
    img = np.array([[5.0, 1.0], [2.0, 3.0]])[None]
    grid = Tensor(np.full((1, 1, 2), -1.0))
    out = bilinear_sample(Tensor(img), grid)
    assert out.data.reshape(()) == 5.0


def test_identity_warp_is_bitwise_identity():
    rng = np.random.default_rng(2)
    img = rng.standard_normal((3, 6, 9)).astype(np.float32)
    assert np.array_equal(warp_image(img, IDENTITY_THETA), img)


def test_out_of_range_reads_zero():
    img = np.ones((1, 4, 4))
    out = warp_image(img, [1, 0, 5.0, 0, 1, 5.0])
    assert np.allclose(out, 0.0)


def test_nan_grid_rejected():
    grid = np.zeros((2, 2, 2))
    grid[0, 0, 0] = np.nan
    with pytest.raises(NumericsError):
        bilinear_sample(Tensor(np.ones((1, 4, 4))), Tensor(grid))


def test_sampler_gradients_match_finite_differences():
    assert max(gradcheck.run_primitive("bilinear_image", trials=5)) < 1e-4
    assert max(gradcheck.run_primitive("bilinear_theta", trials=5)) < 1e-4
    assert max(gradcheck.run_primitive("affine_grid", trials=5)) < 1e-4


def test_warp_roundtrip_recovers_image_away_from_borders():
    rng = np.random.default_rng(0)
    z = rng.standard_normal(8)
    from stnadapt.synthdata import make_profile, render_frame

    img = render_frame(z, make_profile(3, 1), 5).astype(np.float64)
    theta = np.array([1.05, 0.02, 0.08, -0.01, 0.95, -0.05])
    back = warp_image(warp_image(img, theta), invert_theta(theta))
    inner = (slice(None), slice(8, -8), slice(16, -16))
    assert np.mean((back[inner] - img[inner]) ** 2) < 5e-3


def test_mean_theta():
    thetas = np.array([[1, 0, 0, 0, 1, 0], [1, 0, 0.2, 0, 1, 0]], dtype=float)
    assert np.allclose(mean_theta(thetas), [1, 0, 0.1, 0, 1, 0])
    single = np.array([[1.0, 0.1, 0.2, 0.3, 0.9, -0.2]])
    assert np.array_equal(mean_theta(single), single[0])


def test_mean_theta_rejects_empty():
    with pytest.raises(ShapeError):
        mean_theta(np.zeros((0, 6)))


def test_theta_statistics():
    thetas = np.array([[1, 0, 0, 0, 1, 0], [1, 0, 0.2, 0, 1, 0]], dtype=float)
    stats = theta_statistics(thetas)
    assert np.allclose(stats["mean"], [1, 0, 0.1, 0, 1, 0])
    assert np.allclose(stats["var"], [0, 0, 0.01, 0, 0, 0])
