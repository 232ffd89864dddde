"""Particle state and forward rendering of particles as Gaussian blobs.

Images are ``(height, width)`` float arrays; pixel ``(u, v)`` = ``(column, row)``
is a point sample at integer coordinates. A particle of intensity ``c`` whose
projection lands exactly on a pixel centre gives that pixel the value ``c``.

The blob is ``exp(-d^2 / (2 sigma^2))`` inside ``2.5 sigma`` and fades to zero at
``3 sigma`` with a cubic smoothstep, so the rendered image is continuously
differentiable in the particle positions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

TAPER_START = 2.5
CUTOFF = 3.0


@dataclass(frozen=True)
class BlobKernel:
    sigma: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def radius(self):
        return CUTOFF * self.sigma

    def profile(self, d):
        """Blob value at distance ``d`` from the centre (peak 1)."""
        d = np.asarray(d, dtype=float)
        s = self.sigma
        g = np.exp(-d * d / (2 * s * s))
        rho = np.clip((d - TAPER_START * s) / ((CUTOFF - TAPER_START) * s), 0.0, 1.0)
        return g * (1 - rho * rho * (3 - 2 * rho))


@dataclass
class ParticleSet:
    positions: np.ndarray
    intensities: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.intensities = np.asarray(self.intensities, dtype=float).reshape(-1)
        if len(self.positions) != len(self.intensities):
            raise ValueError("positions and intensities differ in length")

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros(0))

    def __len__(self):
        return len(self.intensities)

    def copy(self):
        return ParticleSet(self.positions.copy(), self.intensities.copy())

    def concat(self, other):
        return ParticleSet(np.vstack([self.positions, other.positions]),
                           np.concatenate([self.intensities, other.intensities]))

    def subset(self, mask):
        return ParticleSet(self.positions[mask], self.intensities[mask])


def prune_zero(particles: ParticleSet) -> ParticleSet:
    """Drop particles whose intensity is exactly zero (they render nothing)."""
    return particles.subset(particles.intensities != 0)


def merge_close(particles: ParticleSet, radius) -> ParticleSet:
    """Fuse clusters of particles closer than ``radius``.

    A cluster becomes one particle at the intensity-weighted mean position
    carrying the summed intensity, so the rendered images barely change.
    """
    if len(particles) < 2 or radius <= 0:
        return particles
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components
    from scipy.spatial import cKDTree

    pairs = cKDTree(particles.positions).query_pairs(radius, output_type="ndarray")
    if len(pairs) == 0:
        return particles
    n = len(particles)
    adj = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    k, label = connected_components(adj, directed=False)
    c = particles.intensities
    total = np.bincount(label, weights=c, minlength=k)
    w = np.where(total[label] > 0, c, 1.0)
    norm = np.bincount(label, weights=w, minlength=k)
    pos = np.stack([np.bincount(label, weights=w * particles.positions[:, a], minlength=k)
                    for a in range(3)], axis=1) / norm[:, None]
    # keep first-occurrence order for determinism
    _, first = np.unique(label, return_index=True)
    order = np.argsort(first)
    return ParticleSet(pos[order], total[order])


@njit(cache=True)
def _blob(dx, dy, sigma):
    """Return (w, dw/dpx, dw/dpy) for a pixel offset (dx, dy) = pixel - centre."""
    d2 = dx * dx + dy * dy
    r1 = 3.0 * sigma
    if d2 >= r1 * r1:
        return 0.0, 0.0, 0.0
    s2 = sigma * sigma
    g = np.exp(-d2 / (2.0 * s2))
    r0 = 2.5 * sigma
    if d2 <= r0 * r0:
        return g, dx * g / s2, dy * g / s2
    d = np.sqrt(d2)
    rho = (d - r0) / (r1 - r0)
    S = 1.0 - rho * rho * (3.0 - 2.0 * rho)
    dS = -6.0 * rho * (1.0 - rho) / (r1 - r0)
    k = g * S / s2 - g * dS / d
    return g * S, dx * k, dy * k


@njit(cache=True)
def _render_kernel(px, py, c, sigma, out):
    H, W = out.shape
    r = 3.0 * sigma
    for q in range(px.shape[0]):
        x, y = px[q], py[q]
        if not (np.isfinite(x) and np.isfinite(y)) or c[q] == 0.0:
            continue
        j0 = max(int(np.ceil(x - r)), 0)
        j1 = min(int(np.floor(x + r)), W - 1)
        i0 = max(int(np.ceil(y - r)), 0)
        i1 = min(int(np.floor(y + r)), H - 1)
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                w, _, _ = _blob(j - x, i - y, sigma)
                out[i, j] += c[q] * w


@njit(cache=True)
def _backprop_kernel(px, py, c, sigma, G, gc, gpx, gpy):
    H, W = G.shape
    r = 3.0 * sigma
    for q in range(px.shape[0]):
        x, y = px[q], py[q]
        if not (np.isfinite(x) and np.isfinite(y)):
            continue
        j0 = max(int(np.ceil(x - r)), 0)
        j1 = min(int(np.floor(x + r)), W - 1)
        i0 = max(int(np.ceil(y - r)), 0)
        i1 = min(int(np.floor(y + r)), H - 1)
        sc = 0.0
        sx = 0.0
        sy = 0.0
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                w, wx, wy = _blob(j - x, i - y, sigma)
                g = G[i, j]
                sc += w * g
                sx += wx * g
                sy += wy * g
        gc[q] += sc
        gpx[q] += c[q] * sx
        gpy[q] += c[q] * sy


def render_pixels(pix, intensities, sigma, shape):
    """Additive blob image from projected centres ``pix`` (Q, 2)."""
    out = np.zeros(shape)
    pix = np.ascontiguousarray(pix, dtype=float).reshape(-1, 2)
    _render_kernel(np.ascontiguousarray(pix[:, 0]), np.ascontiguousarray(pix[:, 1]),
                   np.ascontiguousarray(intensities, dtype=float), float(sigma), out)
    return out


def backprop_pixels(pix, intensities, sigma, grad_image):
    """Pull an image-space gradient back to intensities and projected centres.

    Given ``G = dE/d(rendered image)``, returns ``(dE/dc, dE/dpix)``.
    """
    pix = np.ascontiguousarray(pix, dtype=float).reshape(-1, 2)
    Q = len(pix)
    gc = np.zeros(Q)
    gx = np.zeros(Q)
    gy = np.zeros(Q)
    _backprop_kernel(np.ascontiguousarray(pix[:, 0]), np.ascontiguousarray(pix[:, 1]),
                     np.ascontiguousarray(intensities, dtype=float), float(sigma),
                     np.ascontiguousarray(grad_image, dtype=float), gc, gx, gy)
    return gc, np.stack([gx, gy], axis=1)


def render(particles: ParticleSet, camera, kernel: BlobKernel, size):
    """Render particles into an image of ``size = (width, height)``."""
    width, height = size
    if len(particles) == 0:
        return np.zeros((height, width))
    return render_pixels(camera.project(particles.positions), particles.intensities,
                         kernel.sigma, (height, width))


def render_warped(particles: ParticleSet, grid, camera, kernel: BlobKernel, size):
    """Render particles displaced by the motion field (intensities unchanged)."""
    if len(particles) == 0:
        return render(particles, camera, kernel, size)
    moved = particles.positions + grid.eval(particles.positions)
    return render(ParticleSet(moved, particles.intensities), camera, kernel, size)


def residual(observed, predicted):
    observed = np.asarray(observed, dtype=float)
    predicted = np.asarray(predicted, dtype=float)
    if observed.shape != predicted.shape:
        raise ValueError(f"image shapes differ: {observed.shape} vs {predicted.shape}")
    return observed - predicted


def validate_images(images, n_cameras=None):
    """Check an image stack of shape (2, K, H, W) and return it as float array."""
    images = np.asarray(images, dtype=float)
    if images.ndim != 4 or images.shape[0] != 2:
        raise ValueError("images must have shape (2, K, height, width): two time steps")
    if n_cameras is not None and images.shape[1] != n_cameras:
        raise ValueError(f"expected {n_cameras} cameras, got {images.shape[1]}")
    if not np.all(np.isfinite(images)):
        raise ValueError("images contain non-finite values")
    return images
