"""Camera models: pinhole and 19-term polynomial (Soloff) projection.

Both models share one contract: ``project`` maps points of shape ``(..., 3)``
in volume (voxel) coordinates to pixel coordinates of shape ``(..., 2)``,
where pixel ``(u, v)`` is ``(column, row)`` and pixel centres sit on integers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular


class CameraError(ValueError):
    pass


class DegenerateProjectionError(CameraError):
    pass


class BackProjectionError(CameraError):
    pass


class EmptyRayError(CameraError):
    pass


class UnderdeterminedFitError(CameraError):
    pass


# exponents (x, y, z) of the 19 monomials, in coefficient order a_0 .. a_18
MONOMIAL_EXPONENTS = np.array([
    (0, 0, 0), (1, 0, 0), (0, 1, 0), (0, 0, 1),
    (2, 0, 0), (1, 1, 0), (0, 2, 0), (1, 0, 1), (0, 1, 1), (0, 0, 2),
    (3, 0, 0), (2, 1, 0), (1, 2, 0), (0, 3, 0), (2, 0, 1),
    (1, 1, 1), (0, 2, 1), (1, 0, 2), (0, 1, 2),
])


def monomials(p):
    """Evaluate the 19 polynomial-camera monomials at ``p`` (shape ``(..., 3)``)."""
    p = np.asarray(p, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    one = np.ones_like(x)
    return np.stack([
        one, x, y, z,
        x * x, x * y, y * y, x * z, y * z, z * z,
        x ** 3, x * x * y, x * y * y, y ** 3, x * x * z,
        x * y * z, y * y * z, x * z * z, y * z * z,
    ], axis=-1)


def monomial_jacobian(p):
    """Derivatives of the monomials, shape ``(..., 19, 3)``."""
    p = np.asarray(p, dtype=float)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    zero = np.zeros_like(x)
    one = np.ones_like(x)
    dx = [zero, one, zero, zero,
          2 * x, y, zero, z, zero, zero,
          3 * x * x, 2 * x * y, y * y, zero, 2 * x * z,
          y * z, zero, z * z, zero]
    dy = [zero, zero, one, zero,
          zero, x, 2 * y, zero, z, zero,
          zero, x * x, 2 * x * y, 3 * y * y, zero,
          x * z, 2 * y * z, zero, z * z]
    dz = [zero, zero, zero, one,
          zero, zero, zero, x, y, 2 * z,
          zero, zero, zero, zero, x * x,
          x * y, y * y, 2 * x * z, 2 * y * z]
    return np.stack([np.stack(dx, -1), np.stack(dy, -1), np.stack(dz, -1)], axis=-1)


@dataclass(frozen=True)
class Box:
    """Axis-aligned volume ``[lo, hi]`` in voxel coordinates."""

    lo: tuple = (0.0, 0.0, 0.0)
    hi: tuple = (1.0, 1.0, 1.0)

    @classmethod
    def from_extent(cls, extent):
        return cls((0.0, 0.0, 0.0), tuple(float(e) for e in extent))

    @property
    def center(self):
        return 0.5 * (np.asarray(self.lo) + np.asarray(self.hi))

    @property
    def extent(self):
        return np.asarray(self.hi) - np.asarray(self.lo)

    def corners(self):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        return np.array([[(lo, hi)[i][0], (lo, hi)[j][1], (lo, hi)[k][2]]
                         for i in (0, 1) for j in (0, 1) for k in (0, 1)])

    def contains(self, p, tol=0.0):
        p = np.asarray(p)
        return np.all((p >= np.asarray(self.lo) - tol) & (p <= np.asarray(self.hi) + tol), axis=-1)

    def clip(self, p):
        return np.clip(p, self.lo, self.hi)


@dataclass(frozen=True)
class Ray:
    entry: np.ndarray
    exit: np.ndarray

    def point(self, s):
        return self.entry + np.multiply.outer(s, self.exit - self.entry)


class Camera:
    """Common behaviour shared by both projection models."""

    model = None

    def project(self, p):
        raise NotImplementedError

    def project_jacobian(self, p):
        raise NotImplementedError

    def coefficients(self):
        raise NotImplementedError

    def back_project(self, pixel, z, x0=None, max_iter=50, tol=1e-9):
        """Find ``(x, y)`` with ``project((x, y, z)) == pixel`` by 2D Newton."""
        pixel = np.asarray(pixel, dtype=float)
        xy = np.zeros(2) if x0 is None else np.array(x0, dtype=float)[:2]
        for _ in range(max_iter):
            p = np.array([xy[0], xy[1], z])
            r = self.project(p) - pixel
            if np.max(np.abs(r)) < tol:
                return xy
            J = self.project_jacobian(p)[:, :2]
            try:
                xy = xy - np.linalg.solve(J, r)
            except np.linalg.LinAlgError as exc:
                raise BackProjectionError("singular Jacobian during back-projection") from exc
            if not np.all(np.isfinite(xy)):
                break
        p = np.array([xy[0], xy[1], z])
        if np.all(np.isfinite(xy)) and np.max(np.abs(self.project(p) - pixel)) < 1e-6:
            return xy
        raise BackProjectionError(f"back-projection of {pixel} at z={z} did not converge")

    def ray_through(self, pixel, box: Box) -> Ray:
        """Segment of the viewing ray of ``pixel`` inside ``box``.

        The ray is taken as the straight segment between the back-projections
        on the two bounding z-planes, then clipped to the box.
        """
        lo, hi = np.asarray(box.lo, float), np.asarray(box.hi, float)
        x0 = box.center[:2]
        a = np.append(self.back_project(pixel, lo[2], x0=x0), lo[2])
        b = np.append(self.back_project(pixel, hi[2], x0=x0), hi[2])
        d = b - a
        t0, t1 = 0.0, 1.0
        for ax in range(3):
            if abs(d[ax]) < 1e-15:
                if a[ax] < lo[ax] - 1e-12 or a[ax] > hi[ax] + 1e-12:
                    raise EmptyRayError("ray misses the volume")
                continue
            s0, s1 = (lo[ax] - a[ax]) / d[ax], (hi[ax] - a[ax]) / d[ax]
            if s0 > s1:
                s0, s1 = s1, s0
            t0, t1 = max(t0, s0), min(t1, s1)
        if t0 > t1:
            raise EmptyRayError("ray misses the volume")
        entry = np.clip(a + t0 * d, lo, hi)
        exit_ = np.clip(a + t1 * d, lo, hi)
        return Ray(entry, exit_)

    def to_dict(self):
        return {"model": self.model, "coefficients": [float(v) for v in self.coefficients()]}


@dataclass(frozen=True, eq=False)
class PinholeCamera(Camera):
    """Projective camera given by a 3x4 matrix acting on homogeneous voxel coordinates."""

    P: np.ndarray = field(default_factory=lambda: np.hstack([np.eye(3), np.zeros((3, 1))]))
    model = "pinhole"

    def __post_init__(self):
        P = np.array(self.P, dtype=float).reshape(3, 4)
        if not np.any(P[2]):
            raise CameraError("bottom row of the projection matrix is zero")
        P.setflags(write=False)
        object.__setattr__(self, "P", P)

    def _homogeneous(self, p):
        p = np.asarray(p, dtype=float)
        h = p @ self.P[:, :3].T + self.P[:, 3]
        w = h[..., 2]
        if np.any(w == 0):
            raise DegenerateProjectionError("point lies on the principal plane")
        return h, w

    def project(self, p):
        h, w = self._homogeneous(p)
        return h[..., :2] / w[..., None]

    def project_jacobian(self, p):
        h, w = self._homogeneous(p)
        uv = h[..., :2] / w[..., None]
        # d(h_i / w)/dp = (P_i - uv_i * P_3) / w
        J = self.P[None, :2, :3] - uv.reshape(-1, 2)[:, :, None] * self.P[None, 2:3, :3]
        J = J.reshape(uv.shape[:-1] + (2, 3))
        return J / w[..., None, None]

    def back_project(self, pixel, z, x0=None, max_iter=50, tol=1e-9):
        u, v = np.asarray(pixel, dtype=float)
        A = np.array([self.P[0] - u * self.P[2], self.P[1] - v * self.P[2]])
        M = A[:, :2]
        rhs = -(A[:, 2] * z + A[:, 3])
        if abs(np.linalg.det(M)) < 1e-14 * max(1.0, np.abs(M).max() ** 2):
            raise BackProjectionError("viewing ray is parallel to the z-plane")
        return np.linalg.solve(M, rhs)

    def center(self):
        """Optical centre (right null vector of P)."""
        _, _, vt = np.linalg.svd(self.P)
        c = vt[-1]
        return c[:3] / c[3]

    def coefficients(self):
        return self.P.ravel()


@dataclass(frozen=True, eq=False)
class PolynomialCamera(Camera):
    """Soloff polynomial camera: cubic in x and y, quadratic in z, no perspective division.

    ``a`` holds 19 coefficient pairs, row ``i`` being ``a_i = (a_i^u, a_i^v)``.
    """

    a: np.ndarray = None
    model = "polynomial"

    def __post_init__(self):
        a = np.array(self.a, dtype=float).reshape(19, 2)
        a.setflags(write=False)
        object.__setattr__(self, "a", a)

    def project(self, p):
        return monomials(p) @ self.a

    def project_jacobian(self, p):
        # (..., 19, 3) contracted with (19, 2) -> (..., 2, 3)
        return np.einsum("...mk,mc->...ck", monomial_jacobian(p), self.a)

    def coefficients(self):
        return self.a.ravel()


def camera_from_dict(d):
    model = d.get("model")
    coeffs = np.asarray(d["coefficients"], dtype=float)
    if model == "pinhole":
        if coeffs.size != 12:
            raise CameraError("pinhole camera needs 12 coefficients")
        return PinholeCamera(coeffs.reshape(3, 4))
    if model == "polynomial":
        if coeffs.size != 38:
            raise CameraError("polynomial camera needs 38 coefficients")
        return PolynomialCamera(coeffs.reshape(19, 2))
    raise CameraError(f"unknown camera model {model!r}")


def fit_polynomial(points, pixels):
    """Least-squares fit of a polynomial camera to 3D-2D correspondences.

    The model is linear in its 38 coefficients, so a single QR solve on the
    column-equilibrated monomial matrix gives the exact least-squares answer.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    if len(points) != len(pixels):
        raise ValueError("points and pixels differ in length")
    if len(points) < 19:
        raise UnderdeterminedFitError(f"need at least 19 correspondences, got {len(points)}")
    A = monomials(points)
    scale = np.linalg.norm(A, axis=0)
    scale[scale == 0] = 1.0
    Q, R = np.linalg.qr(A / scale)
    diag = np.abs(np.diag(R))
    if diag.min() <= 1e-12 * diag.max():
        raise UnderdeterminedFitError("monomial matrix is rank deficient")
    coef = solve_triangular(R, Q.T @ pixels) / scale[:, None]
    return PolynomialCamera(coef)


def triangulate_rays(origins, directions):
    """Least-squares point closest to a bundle of lines (batched).

    origins, directions: ``(..., K, 3)``; returns ``(..., 3)``.
    """
    d = directions / np.linalg.norm(directions, axis=-1, keepdims=True)
    proj = np.eye(3) - d[..., :, None] * d[..., None, :]
    A = proj.sum(axis=-3)
    b = np.einsum("...kij,...kj->...i", proj, origins)
    return np.linalg.solve(A, b[..., None])[..., 0]
