"""Flow and particle quality metrics against generator truth."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .motionfield import MotionGrid, voxel_divergence

ANGLE_FLOOR = 1e-9


@dataclass(frozen=True)
class FlowMetrics:
    aee: float
    aae: float
    aad: float

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ParticleMetrics:
    precision: float
    recall: float
    matched: int
    threshold: float

    def to_dict(self):
        return asdict(self)


def angular_errors(a, b):
    """Per-vector 3D angle in degrees; NaN where either vector is (near) zero."""
    a = np.asarray(a, float).reshape(-1, 3)
    b = np.asarray(b, float).reshape(-1, 3)
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    ok = (na >= ANGLE_FLOOR) & (nb >= ANGLE_FLOOR)
    out = np.full(len(a), np.nan)
    cos = np.einsum("ij,ij->i", a[ok], b[ok]) / (na[ok] * nb[ok])
    out[ok] = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    return out


def flow_metrics(estimate: MotionGrid, truth: MotionGrid) -> FlowMetrics:
    if tuple(estimate.dims) != tuple(truth.dims):
        raise ValueError(f"grid dims differ: {tuple(estimate.dims)} vs {tuple(truth.dims)}")
    diff = estimate.coeffs - truth.coeffs
    aee = float(np.linalg.norm(diff, axis=-1).mean())
    ang = angular_errors(estimate.coeffs, truth.coeffs)
    aae = float(np.nanmean(ang)) if np.isfinite(ang).any() else 0.0
    aad = float(np.abs(voxel_divergence(estimate)).mean())
    return FlowMetrics(aee, aae, aad)


def match_particles(estimate, truth, threshold=1.0):
    """Greedy one-to-one matching by ascending distance. Returns index pairs (M, 2)."""
    a = np.asarray(estimate, float).reshape(-1, 3)
    b = np.asarray(truth, float).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((0, 2), dtype=int)
    sdm = cKDTree(a).sparse_distance_matrix(cKDTree(b), threshold, output_type="ndarray")
    # strict "closer than threshold"; ties broken by index for determinism
    sdm = sdm[sdm["v"] < threshold]
    order = np.lexsort((sdm["j"], sdm["i"], sdm["v"]))
    used_a = np.zeros(len(a), bool)
    used_b = np.zeros(len(b), bool)
    pairs = []
    for n in order:
        i, j = sdm["i"][n], sdm["j"][n]
        if not used_a[i] and not used_b[j]:
            used_a[i] = used_b[j] = True
            pairs.append((i, j))
    return np.array(pairs, dtype=int).reshape(-1, 2)


def particle_metrics(estimate, truth, threshold=1.0) -> ParticleMetrics:
    """Precision and recall under greedy matching; accepts ParticleSets or (N, 3) arrays."""
    a = getattr(estimate, "positions", estimate)
    b = getattr(truth, "positions", truth)
    na, nb = len(np.asarray(a).reshape(-1, 3)), len(np.asarray(b).reshape(-1, 3))
    m = len(match_particles(a, b, threshold))
    precision = m / na if na else (1.0 if nb == 0 else 0.0)
    recall = m / nb if nb else 1.0
    return ParticleMetrics(precision, recall, m, float(threshold))
