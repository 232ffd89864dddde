"""scikit-learn style wrapper around the reconstruction pipeline."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .camera import Box
from .pipeline import SolverConfig, reconstruct, reconstruct_sequential


class FlowReconstructor(BaseEstimator):
    """Estimate particles and a dense displacement field from a two-frame image set.

    ``fit(images, cameras, volume)`` takes images of shape (2, K, H, W), a list
    of K cameras and the volume extent (or a ``Box``). After fitting,
    ``particles_``, ``flow_`` and ``report_`` hold the result and
    ``predict(points)`` evaluates the flow at arbitrary positions.
    """

    def __init__(self, lam=0.04, mu=1e-4, sparsity="l0", divergence="hard", alpha=0.0,
                 sigma=1.0, levels=10, factor=0.94, grid_subsample=10.0, eps_start=0.8,
                 eps_end=2.0, i_min=0.1, max_iters=40, sequential=False):
        self.lam = lam
        self.mu = mu
        self.sparsity = sparsity
        self.divergence = divergence
        self.alpha = alpha
        self.sigma = sigma
        self.levels = levels
        self.factor = factor
        self.grid_subsample = grid_subsample
        self.eps_start = eps_start
        self.eps_end = eps_end
        self.i_min = i_min
        self.max_iters = max_iters
        self.sequential = sequential

    def config(self):
        params = self.get_params()
        params.pop("sequential")
        return SolverConfig(**params)

    def fit(self, images, cameras, volume):
        images = np.asarray(images, dtype=float)
        if images.ndim != 4 or images.shape[0] != 2:
            raise ValueError(f"images must have shape (2, K, H, W), got {images.shape}")
        if not np.isfinite(images).all():
            raise ValueError("images contain NaN or infinite values")
        box = volume if isinstance(volume, Box) else Box.from_extent(volume)
        run = reconstruct_sequential if self.sequential else reconstruct
        self.particles_, self.flow_, self.report_ = run(images, list(cameras), box, self.config())
        self.box_ = box
        self.n_cameras_ = len(cameras)
        return self

    def predict(self, points):
        check_is_fitted(self, "flow_")
        points = check_array(points, dtype=float, ensure_min_samples=0)
        if points.shape[1] != 3:
            raise ValueError("points must have three columns")
        return self.flow_.eval(points)
