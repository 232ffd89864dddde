"""Particle proposals: 2D peak detection, epipolar search and triangulation."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .camera import Box, CameraError, PinholeCamera
from .scene import ParticleSet

log = logging.getLogger(__name__)

MAX_COMBINATIONS = 64
DUPLICATE_RADIUS = 0.5

_RING = np.ones((3, 3), dtype=bool)
_RING[1, 1] = False


@dataclass(frozen=True)
class Peak:
    position: tuple
    intensity: float


def _log_parabola(l, c, r):
    """Vertex offset and log-height gain of a parabola through log values."""
    if l > 0 and c > 0 and r > 0:
        ll, lc, lr = np.log(l), np.log(c), np.log(r)
    else:
        ll, lc, lr = l, c, r
    a = 0.5 * (ll + lr) - lc
    b = 0.5 * (lr - ll)
    if a >= 0:
        return 0.0, 0.0
    off = -b / (2 * a)
    if abs(off) > 0.5:
        off = float(np.clip(off, -0.5, 0.5))
    gain = -b * b / (4 * a) if (l > 0 and c > 0 and r > 0) else 0.0
    return off, gain


def detect_peaks_array(image, i_min):
    """Peaks as ``(positions (P, 2), intensities (P,))`` in raster order."""
    image = np.asarray(image, dtype=float)
    H, W = image.shape
    nb = ndimage.maximum_filter(image, footprint=_RING, mode="constant", cval=-np.inf)
    rows, cols = np.nonzero((image > nb) & (image >= i_min))
    pos = np.empty((len(rows), 2))
    val = np.empty(len(rows))
    for n, (i, j) in enumerate(zip(rows, cols)):
        c = image[i, j]
        dx = gx = dy = gy = 0.0
        if 0 < j < W - 1:
            dx, gx = _log_parabola(image[i, j - 1], c, image[i, j + 1])
        if 0 < i < H - 1:
            dy, gy = _log_parabola(image[i - 1, j], c, image[i + 1, j])
        pos[n] = (j + dx, i + dy)
        val[n] = c * np.exp(gx + gy)
    return pos, val


def detect_peaks(image, i_min):
    """Local maxima (strictly above all 8 neighbours, at least ``i_min``) with
    sub-pixel refinement by a per-axis 3-point Gaussian fit."""
    pos, val = detect_peaks_array(image, i_min)
    return [Peak((float(p[0]), float(p[1])), float(v)) for p, v in zip(pos, val)]


# -- triangulation ---------------------------------------------------------
def _dlt_seed(pixels, cameras):
    rows = []
    for k, cam in enumerate(cameras):
        P = cam.P
        u, v = pixels[:, k, 0:1], pixels[:, k, 1:2]
        rows.append(u * P[2] - P[0])
        rows.append(v * P[2] - P[1])
    A = np.stack(rows, axis=1)                      # (B, 2K, 4)
    _, _, vt = np.linalg.svd(A)
    X = vt[:, -1, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        return X[:, :3] / X[:, 3:4]


def _linearised_seed(pixels, cameras, center):
    A, b = [], []
    for k, cam in enumerate(cameras):
        J = cam.project_jacobian(center)
        A.append(J)
        b.append(pixels[:, k] - cam.project(center))
    A = np.concatenate(A, axis=0)                   # (2K, 3)
    b = np.concatenate(b, axis=1)                   # (B, 2K)
    sol, *_ = np.linalg.lstsq(A, b.T, rcond=None)
    return center + sol.T


def triangulate_batch(pixels, cameras, center=None, iterations=5):
    """Least-squares triangulation of ``B`` point tracks seen in ``K`` views.

    ``pixels`` has shape (B, K, 2). Returns points (B, 3) and the maximum
    reprojection error over views (B,); failed solves give NaN.
    """
    pixels = np.asarray(pixels, dtype=float)
    B, K, _ = pixels.shape
    if K < 2:
        raise ValueError("triangulation needs at least two views")
    if B == 0:
        return np.zeros((0, 3)), np.zeros(0)
    if all(isinstance(c, PinholeCamera) for c in cameras):
        X = _dlt_seed(pixels, cameras)
    else:
        X = _linearised_seed(pixels, cameras, np.zeros(3) if center is None else center)
    with np.errstate(all="ignore"):
        for _ in range(iterations):
            r = np.concatenate([cam.project(X) - pixels[:, k] for k, cam in enumerate(cameras)], axis=1)
            J = np.concatenate([cam.project_jacobian(X) for cam in cameras], axis=1)  # (B, 2K, 3)
            JtJ = np.einsum("bki,bkj->bij", J, J)
            Jtr = np.einsum("bki,bk->bi", J, r)
            ok = np.isfinite(JtJ).all(axis=(1, 2)) & (np.abs(np.linalg.det(JtJ)) > 1e-300)
            step = np.zeros_like(X)
            step[ok] = np.linalg.solve(JtJ[ok], Jtr[ok][..., None])[..., 0]
            X = X - step
        err = np.stack([np.linalg.norm(cam.project(X) - pixels[:, k], axis=1)
                        for k, cam in enumerate(cameras)], axis=1).max(axis=1)
    bad = ~np.isfinite(err) | ~np.isfinite(X).all(axis=1)
    X[bad] = np.nan
    err[bad] = np.nan
    return X, err


def triangulate_point(pixels, cameras, center=None):
    """Single-track version of ``triangulate_batch``: returns ``(point, error)``."""
    X, err = triangulate_batch(np.asarray(pixels, dtype=float)[None], cameras, center)
    return X[0], float(err[0])


# -- proposal generation -----------------------------------------------------
def _segment_distance(points, a, b):
    d = b - a
    len2 = float(d @ d)
    if len2 == 0:
        return np.linalg.norm(points - a, axis=1)
    s = np.clip((points - a) @ d / len2, 0, 1)
    return np.linalg.norm(points - (a + s[:, None] * d), axis=1)


def propose(residuals, cameras, box: Box, eps, i_min, existing=None,
            max_combinations=MAX_COMBINATIONS, duplicate_radius=DUPLICATE_RADIUS):
    """Triangulate candidate particles from (residual) images at the first time step.

    Camera 0 is the reference. For every reference peak the entry/exit segment
    of its viewing ray is reprojected into the other views; peaks within ``eps``
    pixels of those segments are combined into tracks over all views, and
    tracks whose triangulation error is at most ``eps`` become candidates.
    The ``m`` candidates spawned by one reference peak of intensity ``I`` each
    start with intensity ``I * K / (K - 1 + m)``.
    """
    residuals = np.asarray(residuals, dtype=float)
    K = len(cameras)
    if residuals.shape[0] != K:
        raise ValueError("one residual image per camera required")
    peaks = [detect_peaks_array(img, i_min) for img in residuals]
    ref_pos, ref_val = peaks[0]
    empty = ParticleSet.empty(), np.zeros(0)
    if len(ref_pos) == 0 or any(len(p[0]) == 0 for p in peaks[1:]):
        return empty
    trees = [None] + [cKDTree(p[0]) for p in peaks[1:]]

    # reference rays and their reprojected segments
    entries, exits, valid = [], [], []
    for pix in ref_pos:
        try:
            ray = cameras[0].ray_through(pix, box)
            entries.append(ray.entry)
            exits.append(ray.exit)
            valid.append(True)
        except CameraError:
            entries.append(np.full(3, np.nan))
            exits.append(np.full(3, np.nan))
            valid.append(False)
    entries, exits = np.array(entries), np.array(exits)
    seg = [None] + [(cam.project(np.nan_to_num(entries)), cam.project(np.nan_to_num(exits)))
                    for cam in cameras[1:]]

    # pair view: the one with the longest segments has the best depth resolution
    lengths = [0.0] + [np.nanmedian(np.linalg.norm(s[1] - s[0], axis=1)) for s in seg[1:]]
    pv = int(np.argmax(lengths))
    others = [k for k in range(1, K) if k != pv]

    pairs = []
    for r in np.nonzero(valid)[0]:
        a, b = seg[pv][0][r], seg[pv][1][r]
        mid, half = 0.5 * (a + b), 0.5 * np.linalg.norm(b - a)
        near = trees[pv].query_ball_point(mid, half + eps)
        if not near:
            continue
        near = np.sort(near)
        near = near[_segment_distance(peaks[pv][0][near], a, b) <= eps]
        pairs.extend((r, n) for n in near)
    if not pairs:
        return empty
    pairs = np.array(pairs)
    pix2 = np.stack([ref_pos[pairs[:, 0]], peaks[pv][0][pairs[:, 1]]], axis=1)
    X2, _ = triangulate_batch(pix2, [cameras[0], cameras[pv]], center=box.center)

    tracks, owner = [], []
    count = {}
    for (r, n), X in zip(pairs, X2):
        if not np.all(np.isfinite(X)) or count.get(r, 0) >= max_combinations:
            continue
        lists = []
        for k in others:
            proj = cameras[k].project(X)
            near = trees[k].query_ball_point(proj, 2 * eps)
            if not near:
                break
            near = np.sort(near)
            a, b = seg[k][0][r], seg[k][1][r]
            near = near[_segment_distance(peaks[k][0][near], a, b) <= eps]
            if len(near) == 0:
                break
            lists.append(near)
        else:
            for combo in itertools.product(*lists):
                if count.get(r, 0) >= max_combinations:
                    break
                idx = [0] * K
                idx[0], idx[pv] = r, n
                for k, m in zip(others, combo):
                    idx[k] = m
                tracks.append(idx)
                owner.append(r)
                count[r] = count.get(r, 0) + 1
    if not tracks:
        return empty
    tracks = np.array(tracks)
    owner = np.array(owner)
    pix = np.stack([peaks[k][0][tracks[:, k]] for k in range(K)], axis=1)
    X, err = triangulate_batch(pix, cameras, center=box.center)
    keep = np.isfinite(err) & (err <= eps) & box.contains(X, tol=1e-9)
    if existing is not None and len(existing) and keep.any():
        d, _ = cKDTree(existing).query(X[keep])
        sub = np.nonzero(keep)[0]
        keep[sub[d < duplicate_radius]] = False
    X, err, owner = X[keep], err[keep], owner[keep]
    m = np.bincount(owner, minlength=len(ref_pos))[owner]
    c = ref_val[owner] * K / (K - 1 + m)
    log.debug("propose: %d reference peaks, %d pairs, %d tracks, %d candidates",
              len(ref_pos), len(pairs), len(tracks), len(X))
    return ParticleSet(box.clip(X), c), err
