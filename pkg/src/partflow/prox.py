"""Proximal maps for the intensity block and the divergence-free flow block."""
from __future__ import annotations

import logging

import numpy as np

from .motionfield import DivergenceOperator, MotionGrid

log = logging.getLogger(__name__)


def prox_intensity(c_bar, t, mu, norm="l0"):
    """argmin_c  mu |c|_norm + indicator(c >= 0) + t/2 (c - c_bar)^2, elementwise.

    ``t`` is the inverse step (the block's Lipschitz estimate).
    """
    c_bar = np.asarray(c_bar, dtype=float)
    if norm == "l0":
        keep = (t * c_bar * c_bar >= 2.0 * mu) & (c_bar >= 0)
        return np.where(keep, c_bar, 0.0)
    if norm == "l1":
        return np.maximum(0.0, c_bar - mu / t)
    raise ValueError(f"unknown sparsity norm {norm!r}")


class PoissonSolver:
    """Warm-started Jacobi-PCG for ``D D^T phi = D u`` (voxel pressure).

    The solver keeps the last pressure field so repeated projections of
    slowly changing flows start close to the answer. One instance must not be
    shared between concurrently running optimisations.
    """

    def __init__(self, dims, tol=1e-3, max_iter=20):
        self.op = DivergenceOperator(dims)
        self.tol = tol
        self.max_iter = max_iter
        self.phi = np.zeros(self.op.shape[0])
        # every row of D holds 24 entries of magnitude 1/4
        self.diag = np.full(self.op.shape[0], 24 / 16)
        self.last_iterations = 0
        self.last_residual = 0.0

    @property
    def dims(self):
        return self.op.dims

    def solve(self, rhs, tol=None, max_iter=None, atol=0.0):
        tol = self.tol if tol is None else tol
        max_iter = self.max_iter if max_iter is None else max_iter
        A = self.op.normal
        phi = self.phi.copy()
        r = rhs - A(phi)
        bnorm = np.linalg.norm(rhs)
        stop = max(tol * bnorm, atol)
        z = r / self.diag
        d = z.copy()
        rz = r @ z
        it = 0
        while np.linalg.norm(r) > stop and it < max_iter:
            Ad = A(d)
            dAd = d @ Ad
            if dAd <= 0:
                break
            step = rz / dAd
            phi += step * d
            r -= step * Ad
            z = r / self.diag
            rz_new = r @ z
            d = z + (rz_new / rz) * d
            rz = rz_new
            it += 1
        self.phi = phi
        self.last_iterations = it
        self.last_residual = float(np.linalg.norm(r))
        if self.last_residual > stop and max_iter > 0:
            log.debug("PCG stopped after %d iterations, residual %.3e (target %.3e)",
                      it, self.last_residual, stop)
        return phi

    def reset(self):
        self.phi[:] = 0.0


def project_divfree(u_bar: MotionGrid, solver: PoissonSolver = None, tol=None,
                    max_iter=None, atol=0.0) -> MotionGrid:
    """Euclidean projection of the coefficients onto ``{u : D u = 0}``.

    Returns ``u_bar - D^T phi`` where ``D D^T phi = D u_bar``. Without a
    solver a fresh one runs to full tolerance.
    """
    if solver is None:
        solver = PoissonSolver(u_bar.dims, tol=1e-12, max_iter=20000)
    if tuple(solver.dims) != tuple(u_bar.dims):
        raise ValueError("solver dimensions do not match the grid")
    rhs = solver.op.matvec(u_bar.coeffs)
    phi = solver.solve(rhs, tol=tol, max_iter=max_iter, atol=atol)
    out = u_bar.coeffs - solver.op.rmatvec(phi).reshape(u_bar.coeffs.shape)
    return MotionGrid(out, u_bar.spacing)


def project_divfree_exact(u_bar: MotionGrid, solver: PoissonSolver = None):
    """Full-tolerance projection; the residual check is on the divergence itself."""
    if solver is None:
        solver = PoissonSolver(u_bar.dims)
    scale = max(1.0, float(np.abs(u_bar.coeffs).max()))
    n = solver.op.shape[0]
    return project_divfree(u_bar, solver, tol=0.0, max_iter=max(2000, 20 * n ** (1 / 3) * 10),
                           atol=1e-11 * scale)
