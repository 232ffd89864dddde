import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from partflow.camera import PinholeCamera
from partflow.motionfield import MotionGrid
from partflow.scene import (
    BlobKernel,
    ParticleSet,
    backprop_pixels,
    merge_close,
    prune_zero,
    render,
    render_pixels,
    render_warped,
    residual,
    validate_images,
)


def brute_render(pix, c, sigma, shape):
    """Per-pixel sum of the kernel profile over all particles."""
    kernel = BlobKernel(sigma)
    rows, cols = np.mgrid[0:shape[0], 0:shape[1]]
    out = np.zeros(shape)
    for (u, v), ci in zip(pix, c):
        out += ci * kernel.profile(np.hypot(cols - u, rows - v))
    return out


def test_peak_equals_intensity():
    img = render_pixels(np.array([[5.0, 7.0]]), np.array([0.7]), 1.0, (12, 12))
    assert img[7, 5] == pytest.approx(0.7)
    assert img.max() == pytest.approx(0.7)


def test_profile_is_gaussian_inside_taper():
    k = BlobKernel(1.3)
    d = np.linspace(0, 2.5 * 1.3, 20)
    np.testing.assert_allclose(k.profile(d), np.exp(-d ** 2 / (2 * 1.3 ** 2)), rtol=1e-14)
    assert k.profile(3 * 1.3) == 0.0
    assert k.profile(10.0) == 0.0


def test_render_matches_brute_force(rng):
    pix = rng.uniform(-2, 22, size=(15, 2))
    c = rng.uniform(0.1, 1, size=15)
    for sigma in (0.8, 1.0, 1.7):
        np.testing.assert_allclose(render_pixels(pix, c, sigma, (18, 20)),
                                   brute_render(pix, c, sigma, (18, 20)), atol=1e-13)


def test_zero_beyond_cutoff():
    img = render_pixels(np.array([[10.0, 10.0]]), np.array([1.0]), 1.0, (21, 21))
    rows, cols = np.mgrid[0:21, 0:21]
    far = np.hypot(cols - 10.0, rows - 10.0) > 3.0
    assert np.all(img[far] == 0)


def test_omitted_mass():
    """Mass lost by the tapered cut-off relative to the untruncated Gaussian.

    The plain 3 sigma disc already misses exp(-4.5) (about 1.1%) in two
    dimensions; the smooth taper adds a little on top.
    """
    k = BlobKernel(1.0)
    kept, _ = integrate.quad(lambda r: 2 * np.pi * r * k.profile(r), 0, 3.0, limit=200)
    full = 2 * np.pi
    omitted = 1 - kept / full
    assert np.exp(-4.5) < omitted < 0.03


def test_profile_is_c1():
    k = BlobKernel(1.0)
    h = 1e-6
    for d in (2.5, 3.0):
        left = (k.profile(d) - k.profile(d - h)) / h
        right = (k.profile(d + h) - k.profile(d)) / h
        assert left == pytest.approx(right, abs=1e-4)


def test_backprop_matches_finite_differences(rng):
    pix = rng.uniform(3, 17, size=(5, 2))
    c = rng.uniform(0.2, 1, size=5)
    G = rng.normal(size=(20, 20))
    gc, gpix = backprop_pixels(pix, c, 1.1, G)

    def f(p, cc):
        return np.sum(G * render_pixels(p, cc, 1.1, (20, 20)))

    h = 1e-6
    for i in range(5):
        e = np.zeros(5)
        e[i] = h
        assert gc[i] == pytest.approx((f(pix, c + e) - f(pix, c - e)) / (2 * h), rel=1e-6, abs=1e-9)
        for a in range(2):
            d = np.zeros_like(pix)
            d[i, a] = h
            fd = (f(pix + d, c) - f(pix - d, c)) / (2 * h)
            assert gpix[i, a] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_render_uses_camera_projection():
    cam = PinholeCamera(np.array([[2.0, 0, 0, 1.0], [0, 2.0, 0, 2.0], [0, 0, 0, 1.0]]))
    p = ParticleSet([[3.0, 4.0, 0.0]], [0.5])
    img = render(p, cam, BlobKernel(1.0), (16, 12))
    assert img.shape == (12, 16)
    assert img[10, 7] == pytest.approx(0.5)


def test_render_empty():
    cam = PinholeCamera()
    assert not render(ParticleSet.empty(), cam, BlobKernel(1.0), (8, 6)).any()


def test_render_warped_moves_particles(rng):
    cam = PinholeCamera(np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0], [0, 0, 0, 1.0]]))
    grid = MotionGrid(np.broadcast_to([1.5, -0.5, 0.0], (3, 3, 3, 3)).copy(), 10.0)
    p = ParticleSet(rng.uniform(4, 12, size=(4, 3)), rng.uniform(0.5, 1, size=4))
    moved = ParticleSet(p.positions + [1.5, -0.5, 0.0], p.intensities)
    np.testing.assert_allclose(render_warped(p, grid, cam, BlobKernel(1.0), (20, 20)),
                               render(moved, cam, BlobKernel(1.0), (20, 20)), atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 8))
def test_render_permutation_invariant_and_linear(seed, n):
    rng = np.random.default_rng(seed)
    pix = rng.uniform(0, 15, size=(n, 2))
    c = rng.uniform(0, 1, size=n)
    perm = rng.permutation(n)
    a = render_pixels(pix, c, 1.0, (16, 16))
    np.testing.assert_allclose(render_pixels(pix[perm], c[perm], 1.0, (16, 16)), a, atol=1e-13)
    np.testing.assert_allclose(render_pixels(pix, 2.5 * c, 1.0, (16, 16)), 2.5 * a, atol=1e-13)
    assert np.all(a >= 0)


def test_particle_set_validation():
    with pytest.raises(ValueError):
        ParticleSet(np.zeros((3, 3)), np.zeros(2))
    p = ParticleSet(np.zeros((3, 3)), [1.0, 0.0, 2.0])
    assert len(prune_zero(p)) == 2
    assert len(p.concat(p)) == 6


def test_merge_close_conserves_intensity():
    p = ParticleSet([[0, 0, 0], [0.4, 0, 0], [5, 5, 5], [5.3, 5, 5], [5.6, 5, 5]],
                    [1.0, 3.0, 1.0, 1.0, 1.0])
    m = merge_close(p, 0.5)
    assert len(m) == 2
    np.testing.assert_allclose(m.intensities, [4.0, 3.0])
    np.testing.assert_allclose(m.positions, [[0.3, 0, 0], [5.3, 5, 5]])
    assert len(merge_close(p, 0.0)) == 5


def test_residual_and_validation():
    a = np.ones((2, 3))
    np.testing.assert_allclose(residual(a, a), 0)
    with pytest.raises(ValueError):
        residual(a, np.ones((3, 2)))
    with pytest.raises(ValueError):
        validate_images(np.zeros((1, 4, 5, 5)))
    with pytest.raises(ValueError):
        validate_images(np.zeros((2, 3, 5, 5)), n_cameras=4)
    bad = np.zeros((2, 2, 3, 3))
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        validate_images(bad)


def test_kernel_rejects_bad_sigma():
    with pytest.raises(ValueError):
        BlobKernel(0.0)
