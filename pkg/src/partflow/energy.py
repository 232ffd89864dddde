"""Joint particle/flow energy and its analytic partial gradients.

    E = 1/2 E_D + lam/2 E_S + mu E_Sp

The smooth part ``H`` holds the data term and the flow-gradient regulariser
(plus the soft divergence penalty in soft mode). The nonsmooth parts are the
intensity sparsity term and, in hard mode, the divergence-free constraint.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .motionfield import MotionGrid, gradient_energy, soft_divergence_energy
from .scene import backprop_pixels, render_pixels


@dataclass(frozen=True)
class EnergyParams:
    lam: float = 0.04
    mu: float = 1e-4
    sparsity: str = "l0"
    divergence: str = "hard"
    alpha: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.lam < 0 or self.mu < 0 or self.alpha < 0:
            raise ValueError("lam, mu and alpha must be nonnegative")
        if self.sparsity not in ("l0", "l1"):
            raise ValueError(f"unknown sparsity norm {self.sparsity!r}")
        if self.divergence not in ("hard", "soft"):
            raise ValueError(f"unknown divergence mode {self.divergence!r}")


@dataclass
class EnergyState:
    value: float
    grad_p: np.ndarray = None
    grad_c: np.ndarray = None
    grad_u: np.ndarray = None
    parts: dict = field(default_factory=dict)


def sparsity_term(intensities, norm="l0"):
    c = np.asarray(intensities, dtype=float)
    if np.any(c < 0):
        return np.inf
    if norm == "l0":
        return float(np.count_nonzero(c))
    if norm == "l1":
        return float(np.sum(c))
    raise ValueError(f"unknown sparsity norm {norm!r}")


def smoothness_term(grid: MotionGrid, params: EnergyParams):
    """``(value, gradient)`` of the smooth part of E_S.

    Hard mode returns only the gradient energy; its divergence constraint is
    handled by projection. Soft mode adds ``alpha`` times the squared divergence.
    """
    value, grad = gradient_energy(grid)
    if params.divergence == "soft" and params.alpha > 0:
        v, g = soft_divergence_energy(grid)
        value += params.alpha * v
        grad = grad + params.alpha * g
    return value, grad


class DataTerm:
    """Image discrepancy for K cameras at two time steps.

    ``images`` has shape (2, K, H, W). ``steps`` restricts the sum to a subset
    of the time steps (the sequential baseline uses only the first).
    """

    def __init__(self, images, cameras, steps=(0, 1)):
        images = np.asarray(images, dtype=float)
        if images.ndim != 4 or images.shape[0] != 2:
            raise ValueError("images must have shape (2, K, H, W)")
        if images.shape[1] != len(cameras):
            raise ValueError("number of cameras does not match the image stack")
        self.images = images
        self.cameras = list(cameras)
        self.steps = tuple(steps)
        self.K = len(cameras)

    @property
    def shape(self):
        return self.images.shape[2:]

    def positions(self, p, grid, t):
        if t == 0:
            return p
        return p + grid.eval(p)

    def predict(self, p, c, grid, t, k, sigma):
        pos = self.positions(p, grid, t)
        if len(pos) == 0:
            return np.zeros(self.shape)
        return render_pixels(self.cameras[k].project(pos), c, sigma, self.shape)

    def residuals(self, p, c, grid, t, sigma):
        return np.stack([self.images[t, k] - self.predict(p, c, grid, t, k, sigma)
                         for k in range(self.K)])

    def __call__(self, p, c, grid, sigma, need=("p", "c", "u"), steps=None):
        """Return ``(E_D, grads)`` with ``grads`` keyed by the names in ``need``."""
        steps = self.steps if steps is None else steps
        Q = len(c)
        value = 0.0
        gp = np.zeros((Q, 3))
        gc = np.zeros(Q)
        gu = np.zeros(grid.coeffs.shape) if "u" in need else None
        want_geom = "p" in need or "u" in need
        for t in steps:
            if Q == 0:
                value += np.sum(self.images[t] ** 2) / self.K
                continue
            if t == 0:
                pos = p
            else:
                idx, w, dw = grid.interp_weights(p)
                flow = np.einsum("qn,qnl->ql", w, grid.coeffs.reshape(-1, 3)[idx])
                pos = p + flow
            gX = np.zeros((Q, 3))
            for k, cam in enumerate(self.cameras):
                pix = cam.project(pos)
                r = self.images[t, k] - render_pixels(pix, c, sigma, self.shape)
                value += np.sum(r * r) / self.K
                if not need:
                    continue
                g_c, g_pix = backprop_pixels(pix, c, sigma, (-2.0 / self.K) * r)
                gc += g_c
                if want_geom:
                    J = cam.project_jacobian(pos)
                    gX += np.einsum("qcm,qc->qm", J, g_pix)
            if t == 0:
                gp += gX
            elif want_geom:
                # d(p + u(p))/dp = I + du/dp
                Ju = np.einsum("qnm,qnl->qlm", dw, grid.coeffs.reshape(-1, 3)[idx])
                gp += gX + np.einsum("qlm,ql->qm", Ju, gX)
                if "u" in need:
                    gu += grid.scatter(idx, w, gX)
        grads = {"p": gp, "c": gc, "u": gu}
        return value, {k: grads[k] for k in need}


def data_term(particles, grid, cameras, images, kernel, need=("p", "c", "u")):
    """Convenience wrapper: E_D and its gradients for a particle set."""
    return DataTerm(images, cameras)(particles.positions, particles.intensities, grid,
                                     kernel.sigma, need=need)


class JointEnergy:
    """Smooth part ``H`` and full energy ``E`` of the joint model."""

    def __init__(self, images, cameras, params: EnergyParams, steps=(0, 1)):
        self.data = DataTerm(images, cameras, steps)
        self.params = params

    def smooth(self, p, c, grid, need=("p", "c", "u"), steps=None):
        """``H = 1/2 E_D + lam/2 * regulariser`` and requested gradients."""
        ed, g = self.data(p, c, grid, self.params.sigma, need=need, steps=steps)
        es, ges = smoothness_term(grid, self.params)
        value = 0.5 * ed + 0.5 * self.params.lam * es
        grads = {k: 0.5 * v for k, v in g.items()}
        if "u" in grads:
            grads["u"] = grads["u"] + 0.5 * self.params.lam * ges
        return value, grads, {"data": ed, "smooth": es}

    def nonsmooth(self, c):
        return self.params.mu * sparsity_term(c, self.params.sparsity)

    def total(self, p, c, grid, need=("p", "c", "u")) -> EnergyState:
        h, g, parts = self.smooth(p, c, grid, need=need)
        sp = sparsity_term(c, self.params.sparsity)
        parts["sparsity"] = sp
        return EnergyState(h + self.params.mu * sp, g.get("p"), g.get("c"), g.get("u"), parts)


def total_energy(particles, grid, cameras, images, params: EnergyParams) -> EnergyState:
    """E = 1/2 E_D + lam/2 E_S + mu E_Sp with gradients of the smooth part."""
    return JointEnergy(images, cameras, params).total(particles.positions,
                                                      particles.intensities, grid)
