"""Synthetic ground truth: analytic incompressible flows, seeding and rendering."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import Box, PinholeCamera
from .motionfield import MotionGrid
from .scene import BlobKernel, ParticleSet, render


@dataclass(frozen=True)
class AnalyticFlow:
    """Divergence-free displacement field in voxels per frame interval.

    kinds and their parameters:

    - ``uniform``: ``d`` (3,)
    - ``rotation``: ``axis`` (3,), ``omega`` (rad/frame), ``center`` (3,)
    - ``taylor_green``: ``amplitude`` (A, B, C), ``wavenumbers`` (kx, ky, kz);
      requires ``A kx + B ky + C kz = 0``
    - ``shear``: ``rate``, ``direction`` axis index, ``gradient`` axis index
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("uniform", "rotation", "taylor_green", "shear"):
            raise ValueError(f"unknown flow kind {self.kind!r}")
        if self.kind == "taylor_green":
            A = np.asarray(self.params["amplitude"], float)
            k = np.asarray(self.params["wavenumbers"], float)
            if abs(A @ k) > 1e-12 * max(1.0, np.abs(A).max() * np.abs(k).max()):
                raise ValueError("Taylor-Green amplitudes must satisfy A.k = 0")
        if self.kind == "shear" and self.params.get("direction", 0) == self.params.get("gradient", 1):
            raise ValueError("shear direction and gradient axis must differ")

    @classmethod
    def uniform(cls, d):
        return cls("uniform", {"d": tuple(float(v) for v in d)})

    @classmethod
    def rotation(cls, axis, omega, center):
        return cls("rotation", {"axis": tuple(axis), "omega": float(omega), "center": tuple(center)})

    @classmethod
    def taylor_green(cls, amplitude, wavenumbers):
        return cls("taylor_green", {"amplitude": tuple(amplitude), "wavenumbers": tuple(wavenumbers)})

    @classmethod
    def shear(cls, rate, direction=0, gradient=1, origin=0.0):
        return cls("shear", {"rate": float(rate), "direction": direction,
                             "gradient": gradient, "origin": float(origin)})

    @classmethod
    def taylor_green_for(cls, extent, max_speed):
        """Taylor-Green cell spanning the box: one period in x, a half period in y and z."""
        k = np.pi / np.asarray(extent, float) * np.array([2.0, 1.0, 1.0])
        A = np.array([1.0, 1.0, -(k[0] + k[1]) / k[2]])
        axes = [np.linspace(0, e, 41) for e in extent]
        x = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        speed = np.linalg.norm(cls.taylor_green(A, k)(x), axis=-1).max()
        return cls.taylor_green(A * max_speed / speed, k)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.kind == "uniform":
            return np.broadcast_to(np.asarray(p["d"], float), x.shape).copy()
        if self.kind == "rotation":
            axis = np.asarray(p["axis"], float)
            axis = axis / np.linalg.norm(axis)
            return p["omega"] * np.cross(axis, x - np.asarray(p["center"], float))
        if self.kind == "taylor_green":
            A, B, C = p["amplitude"]
            kx, ky, kz = p["wavenumbers"]
            X, Y, Z = kx * x[..., 0], ky * x[..., 1], kz * x[..., 2]
            return np.stack([
                A * np.cos(X) * np.sin(Y) * np.sin(Z),
                B * np.sin(X) * np.cos(Y) * np.sin(Z),
                C * np.sin(X) * np.sin(Y) * np.cos(Z),
            ], axis=-1)
        out = np.zeros_like(x)
        out[..., p["direction"]] = p["rate"] * (x[..., p["gradient"]] - p["origin"])
        return out

    def divergence(self, x):
        """Analytic divergence (identically zero for every kind)."""
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.kind == "taylor_green":
            A, B, C = p["amplitude"]
            kx, ky, kz = p["wavenumbers"]
            X, Y, Z = kx * x[..., 0], ky * x[..., 1], kz * x[..., 2]
            return -(A * kx + B * ky + C * kz) * np.sin(X) * np.sin(Y) * np.sin(Z)
        return np.zeros(x.shape[:-1])

    def to_dict(self):
        return {"kind": self.kind, "params": {k: (list(v) if isinstance(v, tuple) else v)
                                              for k, v in self.params.items()}}

    @classmethod
    def parse(cls, text, extent=None):
        """Parse ``uniform:1,0,0``, ``rotation:OMEGA``, ``shear:RATE`` or ``taylor_green:MAXSPEED``."""
        kind, _, args = text.partition(":")
        vals = [float(v) for v in args.split(",")] if args else []
        if kind == "uniform":
            return cls.uniform(vals)
        if kind == "rotation":
            center = np.asarray(extent, float) / 2 if extent is not None else np.zeros(3)
            return cls.rotation((0, 0, 1), vals[0], center)
        if kind == "shear":
            origin = extent[1] / 2 if extent is not None else 0.0
            return cls.shear(vals[0], origin=origin)
        if kind in ("taylor_green", "tg"):
            if extent is None:
                raise ValueError("taylor_green needs the volume extent")
            return cls.taylor_green_for(extent, vals[0] if vals else 1.0)
        raise ValueError(f"cannot parse flow {text!r}")


def _look_at(position, target, focal, principal):
    zc = target - position
    zc /= np.linalg.norm(zc)
    xc = np.array([1.0, 0.0, 0.0]) - zc[0] * zc
    xc /= np.linalg.norm(xc)
    yc = np.cross(zc, xc)
    R = np.stack([xc, yc, zc])
    Kmat = np.array([[focal, 0, principal[0]], [0, focal, principal[1]], [0, 0, 1.0]])
    return Kmat @ np.hstack([R, -(R @ position)[:, None]])


def default_rig(size, box: Box, yaw_deg=35.0, pitch_deg=18.0, distance_factor=8.0, fill=0.9):
    """Four symmetric pinhole cameras looking at the volume centre.

    Viewing directions make ``+-yaw`` with the yz-plane and ``+-pitch`` with the
    xz-plane. The focal length is chosen so the projected volume fills
    ``fill`` of the tighter image dimension in the widest view.
    """
    width, height = size
    center = box.center
    distance = distance_factor * float(np.linalg.norm(box.extent))
    principal = ((width - 1) / 2.0, (height - 1) / 2.0)
    sy, sp = np.sin(np.radians(yaw_deg)), np.sin(np.radians(pitch_deg))
    dirs = [np.array([a * sy, b * sp, 0.0]) for b in (-1, 1) for a in (-1, 1)]
    for d in dirs:
        d[2] = np.sqrt(1 - d[0] ** 2 - d[1] ** 2)
    positions = [center + distance * d for d in dirs]
    corners = box.corners()
    scale = np.inf
    for pos in positions:
        P = _look_at(pos, center, 1.0, (0.0, 0.0))
        uv = PinholeCamera(P).project(corners)
        scale = min(scale, fill * (width / 2.0) / np.abs(uv[:, 0]).max(),
                    fill * (height / 2.0) / np.abs(uv[:, 1]).max())
    return [PinholeCamera(_look_at(pos, center, scale, principal)) for pos in positions]


@dataclass
class SyntheticScene:
    particles_t0: ParticleSet
    particles_t1: ParticleSet
    images: np.ndarray            # (2, K, H, W)
    cameras: list
    box: Box
    flow: AnalyticFlow
    sigma: float
    ppp: float
    seed: int

    @property
    def size(self):
        return self.images.shape[3], self.images.shape[2]

    def truth_grid(self, spacing):
        grid = MotionGrid.covering(self.box.extent, spacing)
        return sample_truth(self.flow, grid.dims, spacing)


def sample_truth(flow: AnalyticFlow, dims, spacing=1.0) -> MotionGrid:
    """Flow evaluated at the lattice vertices."""
    grid = MotionGrid.zeros(dims, spacing)
    return MotionGrid(flow(grid.vertex_positions()), spacing)


def generate(flow: AnalyticFlow, ppp, size, box: Box, sigma=1.0, noise=0.0, seed=0,
             cameras=None, intensity_range=(0.5, 1.0)) -> SyntheticScene:
    """Seed particles uniformly in the box, advect them one Euler step and render.

    The particle count is ``ppp`` times the pixel count of one camera image.
    """
    if ppp <= 0:
        raise ValueError("ppp must be positive")
    width, height = size
    rng = np.random.default_rng(seed)
    n = int(round(ppp * width * height))
    lo, hi = np.asarray(box.lo, float), np.asarray(box.hi, float)
    pos = lo + rng.random((n, 3)) * (hi - lo)
    c = rng.uniform(*intensity_range, size=n)
    p0 = ParticleSet(pos, c)
    p1 = ParticleSet(pos + flow(pos), c.copy())
    cameras = default_rig(size, box) if cameras is None else cameras
    kernel = BlobKernel(sigma)
    images = np.stack([np.stack([render(p, cam, kernel, size) for cam in cameras])
                       for p in (p0, p1)])
    if noise > 0:
        images = images + rng.normal(0.0, noise, images.shape)
    return SyntheticScene(p0, p1, images, cameras, box, flow, sigma, ppp, seed)
