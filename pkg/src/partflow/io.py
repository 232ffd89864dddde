"""File formats: cameras, flow volumes, PFM/PGM images, particle CSV and manifests."""
from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Box, camera_from_dict
from .motionfield import MotionGrid
from .scene import ParticleSet


# cameras ---------------------------------------------------------------------
def save_camera(path, camera):
    Path(path).write_text(json.dumps(camera.to_dict(), indent=1) + "\n")


def load_camera(path):
    return camera_from_dict(json.loads(Path(path).read_text()))


# flow volumes ----------------------------------------------------------------
def save_flow(path, grid: MotionGrid):
    """JSON header line, newline, then float32 little-endian coefficients.

    Vertices are ordered x-fastest with the three components interleaved.
    """
    header = {"dims": [int(d) for d in grid.dims], "spacing": float(grid.spacing),
              "ordering": "x-fastest", "dtype": "<f4", "components": 3}
    # (N, M, L, 3) -> (L, M, N, 3) so that x varies fastest in memory
    block = np.ascontiguousarray(grid.coeffs.transpose(2, 1, 0, 3), dtype="<f4")
    with open(path, "wb") as f:
        f.write((json.dumps(header) + "\n").encode())
        f.write(block.tobytes())


def load_flow(path) -> MotionGrid:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        raw = f.read()
    if header.get("ordering") != "x-fastest":
        raise ValueError(f"{path}: unsupported ordering {header.get('ordering')!r}")
    n, m, l = header["dims"]
    data = np.frombuffer(raw, dtype="<f4")
    if data.size != n * m * l * 3:
        raise ValueError(f"{path}: expected {n * m * l * 3} values, found {data.size}")
    coeffs = data.reshape(l, m, n, 3).transpose(2, 1, 0, 3).astype(float)
    return MotionGrid(coeffs, header["spacing"])


# images ----------------------------------------------------------------------
def save_pfm(path, image):
    """Greyscale PFM; the negative scale marks little-endian data, rows stored bottom-up."""
    image = np.asarray(image, dtype="<f4")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode())
        f.write(np.ascontiguousarray(image[::-1]).tobytes())


def _pfm_tokens(f, count):
    tokens = []
    while len(tokens) < count:
        line = f.readline()
        if not line:
            raise ValueError("truncated PFM header")
        tokens += line.split()
    return tokens


def load_pfm(path):
    with open(path, "rb") as f:
        magic, w, h, scale = _pfm_tokens(f, 4)
        if magic != b"Pf":
            raise ValueError(f"{path}: only greyscale PFM is supported")
        w, h, scale = int(w), int(h), float(scale)
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, found {data.size}")
    return data.reshape(h, w)[::-1].astype(float)


def save_pgm16(path, image, scale=None):
    """16-bit PGM, linearly scaled; ``scale`` (value per count) goes to ``path + '.json'``."""
    image = np.asarray(image, dtype=float)
    lo = float(min(image.min(), 0.0))
    if scale is None:
        span = float(image.max()) - lo
        scale = span / 65535 if span > 0 else 1.0
    counts = np.clip(np.round((image - lo) / scale), 0, 65535).astype(">u2")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode())
        f.write(counts.tobytes())
    Path(str(path) + ".json").write_text(json.dumps({"scale": scale, "offset": lo}) + "\n")
    return scale


def load_pgm16(path):
    with open(path, "rb") as f:
        magic, w, h, maxval = _pfm_tokens(f, 4)
        if magic != b"P5" or int(maxval) != 65535:
            raise ValueError(f"{path}: not a 16-bit binary PGM")
        w, h = int(w), int(h)
        counts = np.frombuffer(f.read(), dtype=">u2").reshape(h, w)
    side = Path(str(path) + ".json")
    meta = json.loads(side.read_text()) if side.exists() else {"scale": 1.0, "offset": 0.0}
    return counts * meta["scale"] + meta["offset"]


# particles -------------------------------------------------------------------
def save_particles(path, particles: ParticleSet, errors=None):
    cols = [particles.positions, particles.intensities[:, None]]
    header = "x,y,z,c"
    if errors is not None:
        cols.append(np.asarray(errors, float)[:, None])
        header += ",err"
    data = np.hstack(cols) if len(particles) else np.zeros((0, len(header.split(","))))
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")


def load_particles(path) -> ParticleSet:
    with open(path) as f:
        header = f.readline().strip().split(",")
    if header[:4] != ["x", "y", "z", "c"]:
        raise ValueError(f"{path}: expected header x,y,z,c")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # header-only file
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        return ParticleSet.empty()
    return ParticleSet(data[:, :3], data[:, 3])


# manifests -------------------------------------------------------------------
@dataclass
class Manifest:
    """Dataset description. ``images[t][k]`` is the image of camera ``k`` at step ``t``;
    paths are stored relative to the manifest's directory."""

    images: list
    cameras: list
    volume: list
    sigma: float = 1.0
    truth: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    root: Path = None

    def resolve(self, p):
        return Path(p) if self.root is None else self.root / p

    def validate(self):
        if len(self.images) != 2 or any(len(row) != len(self.cameras) for row in self.images):
            raise ValueError("manifest needs two time steps with one image per camera")
        if len(self.volume) != 3 or min(self.volume) <= 0:
            raise ValueError("manifest volume must be three positive extents")
        paths = [p for row in self.images for p in row] + list(self.cameras) + list(self.truth.values())
        missing = [p for p in paths if not self.resolve(p).exists()]
        if missing:
            raise FileNotFoundError(f"missing files: {', '.join(map(str, missing))}")
        self.load_cameras()
        self.load_images()
        return self

    @property
    def box(self):
        return Box.from_extent(self.volume)

    def load_cameras(self):
        return [load_camera(self.resolve(p)) for p in self.cameras]

    def load_images(self):
        stack = np.array([[read_image(self.resolve(p)) for p in row] for row in self.images])
        if len({img.shape for row in stack for img in row}) > 1:
            raise ValueError("images differ in size")
        return stack

    def to_dict(self):
        return {"images": self.images, "cameras": self.cameras, "volume": list(self.volume),
                "sigma": self.sigma, "truth": self.truth, "meta": self.meta}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        d = json.loads(path.read_text())
        try:
            return cls(d["images"], d["cameras"], d["volume"], d.get("sigma", 1.0),
                       d.get("truth", {}), d.get("meta", {}), path.parent)
        except KeyError as e:
            raise ValueError(f"{path}: manifest lacks {e}") from None


def read_image(path):
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".pfm":
        return load_pfm(path)
    if ext == ".pgm":
        return load_pgm16(path)
    raise ValueError(f"{path}: unsupported image format")
