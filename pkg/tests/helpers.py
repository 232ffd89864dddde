"""Shared scene builders for the test-suite."""
import numpy as np

from partflow.camera import Box, PinholeCamera, PolynomialCamera
from partflow.energy import EnergyParams, JointEnergy
from partflow.motionfield import MotionGrid
from partflow.scene import BlobKernel, ParticleSet, render
from partflow.synth import default_rig

SMALL_BOX = Box.from_extent((8.0, 8.0, 8.0))
SMALL_SIZE = (32, 32)
SMALL_RIG = default_rig(SMALL_SIZE, SMALL_BOX)


def random_small_scene(rng, n_max=10, sigma=1.0, params=None):
    """Random particles, flow on a 5^3 lattice and unrelated random images."""
    n = int(rng.integers(1, n_max + 1))
    p = rng.uniform(1.0, 7.0, size=(n, 3))
    c = rng.uniform(0.3, 1.0, size=n)
    grid = MotionGrid(rng.normal(scale=0.4, size=(5, 5, 5, 3)), 2.0)
    # observed images: a perturbed copy of the model plus noise, so residuals are generic
    kernel = BlobKernel(sigma)
    q = ParticleSet(p + rng.normal(scale=0.5, size=p.shape), c)
    img = np.stack([np.stack([render(q, cam, kernel, SMALL_SIZE) for cam in SMALL_RIG])] * 2)
    img = img + 0.05 * rng.normal(size=img.shape)
    params = params or EnergyParams(lam=0.04, mu=1e-4, sigma=sigma)
    return JointEnergy(img, SMALL_RIG, params), p, c, grid


def block_fd(energy, p, c, grid, block, h=1e-5):
    """Central differences of H with respect to one block."""
    def H(pp, cc, uu):
        return energy.smooth(pp, cc, MotionGrid(uu, grid.spacing), need=())[0]

    x = {"p": p, "c": c, "u": grid.coeffs}[block]
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        args = {"p": p.copy(), "c": c.copy(), "u": grid.coeffs.copy()}
        args[block][i] += h
        up = H(args["p"], args["c"], args["u"])
        args[block][i] -= 2 * h
        dn = H(args["p"], args["c"], args["u"])
        g[i] = (up - dn) / (2 * h)
    return g


def relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


# -- cameras ----------------------------------------------------------------
def look_at_camera(position, target=(10.0, 8.0, 6.0), f=400.0, c=(24.0, 20.0)):
    position = np.asarray(position, float)
    z = np.asarray(target, float) - position
    z /= np.linalg.norm(z)
    x = np.cross([0.0, 1.0, 0.0], z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    K = np.array([[f, 0, c[0]], [0, f, c[1]], [0, 0, 1.0]])
    return PinholeCamera(K @ np.hstack([R, -(R @ position)[:, None]]))


def random_poly_camera(rng):
    a = np.zeros((19, 2))
    a[0] = (20.0, 15.0)
    a[1, 0], a[2, 1] = 2.0, 2.0
    a[3] = (0.3, -0.2)
    a[4:] = rng.normal(scale=1e-3, size=(15, 2))
    return PolynomialCamera(a)


# -- intensity prox oracle -----------------------------------------------------
GRID_STEP = 1e-4


def brute_prox(c_bar, t, mu, norm):
    """Minimise mu|c| + indicator(c >= 0) + t/2 (c - c_bar)^2 over a grid of step 1e-4."""
    hi = max(c_bar, 0.0) + 0.01
    c = np.arange(0.0, hi + GRID_STEP, GRID_STEP)
    penalty = (c != 0).astype(float) if norm == "l0" else c
    f = mu * penalty + 0.5 * t * (c - c_bar) ** 2
    return c[np.argmin(f)], f.min()


def objective(c, c_bar, t, mu, norm):
    if c < 0:
        return np.inf
    return mu * ((c != 0) if norm == "l0" else c) + 0.5 * t * (c - c_bar) ** 2
