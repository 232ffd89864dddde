"""Coarse-to-fine driver alternating particle proposals and iPALM minimisation."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from . import ipalm
from .camera import Box
from .energy import EnergyParams, JointEnergy
from .motionfield import MotionGrid, prolongate
from .prox import PoissonSolver, project_divfree, project_divfree_exact, prox_intensity
from .scene import ParticleSet, merge_close, prune_zero, render_pixels, validate_images
from .triangulate import propose

log = logging.getLogger(__name__)


@dataclass
class SolverConfig:
    lam: float = 0.04
    mu: float = 1e-4
    sparsity: str = "l0"
    divergence: str = "hard"
    alpha: float = 0.0
    sigma: float = 1.0                 # blob size in the input images (final level)
    levels: int = 10
    factor: float = 0.94
    grid_subsample: float = 10.0       # lattice pitch (voxels) at the finest level
    min_vertices: int = 4
    eps_start: float = 0.8
    eps_end: float = 2.0
    i_min: float = 0.1
    merge_radius: float = 1.0          # fuse particles that converge onto each other
    max_iters: int = 40
    tol: float = 1e-6
    pcg_tol: float = 1e-3
    pcg_iters: int = 20
    output_spacing: float = None       # None: deliver the finest working lattice
    check: bool = False                # assert the descent test at every accepted step

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError("pyramid factor must lie in (0, 1)")
        if self.levels < 1:
            raise ValueError("need at least one pyramid level")
        if self.eps_start > self.eps_end:
            raise ValueError("eps_start must not exceed eps_end")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        self.energy_params()  # validates the remaining fields

    def energy_params(self, sigma=None):
        return EnergyParams(self.lam, self.mu, self.sparsity, self.divergence, self.alpha,
                            self.sigma if sigma is None else sigma)

    # level schedules, index 0 is the coarsest
    def sigma_at(self, level):
        return max(self.sigma, self.sigma * self.factor ** -(self.levels - 1 - level))

    def spacing_at(self, level):
        return self.grid_subsample * self.factor ** -(self.levels - 1 - level)

    def eps_at(self, level):
        if self.levels == 1:
            return self.eps_start
        return self.eps_start + (self.eps_end - self.eps_start) * level / (self.levels - 1)


@dataclass
class LevelRecord:
    level: int
    sigma: float
    spacing: float
    dims: tuple
    eps: float
    proposed: int
    particles: int
    iterations: int
    converged: bool
    energies: list
    L: dict
    seconds: float


@dataclass
class RunReport:
    config: dict
    levels: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    seconds: float = 0.0

    def to_dict(self):
        return {"config": self.config, "levels": [asdict(r) for r in self.levels],
                "warnings": self.warnings, "seconds": self.seconds}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, default=float)

    def energies_csv(self):
        lines = ["level,iteration,energy"]
        for r in self.levels:
            lines += [f"{r.level},{n + 1},{e!r}" for n, e in enumerate(r.energies)]
        return "\n".join(lines) + "\n"


class JointProblem:
    """Adapter exposing the joint energy to the iPALM optimiser.

    Variables: ``p`` positions (Q, 3), ``c`` intensities (Q,), ``u`` lattice
    coefficients (N, M, L, 3).
    """

    def __init__(self, energy: JointEnergy, spacing, blocks=("p", "c", "u"), solver=None):
        self.energy = energy
        self.spacing = spacing
        self.blocks = tuple(blocks)
        self.solver = solver
        self._t0 = (None, None)

    def _grid(self, z):
        return MotionGrid(z["u"], self.spacing)

    def _first_step_value(self, p, c):
        # the first time step does not depend on u; cache it across u-block calls
        key = hash((p.tobytes(), c.tobytes()))
        if self._t0[0] != key:
            v, _ = self.energy.data(p, c, None, self.energy.params.sigma, need=(), steps=(0,))
            self._t0 = (key, v)
        return self._t0[1]

    def _evaluate(self, z, block, need):
        p, c, grid = z["p"], z["c"], self._grid(z)
        steps = self.energy.data.steps
        if block == "u" and 0 in steps:
            h, g, _ = self.energy.smooth(p, c, grid, need=need,
                                         steps=tuple(s for s in steps if s != 0))
            return h + 0.5 * self._first_step_value(p, c), g
        h, g, _ = self.energy.smooth(p, c, grid, need=need)
        return h, g

    def smooth(self, z, block):
        h, g = self._evaluate(z, block, (block,))
        return h, g[block]

    def smooth_value(self, z, block):
        return self._evaluate(z, block, ())[0]

    def prox(self, block, v, L):
        prm = self.energy.params
        if block == "c":
            return prox_intensity(v, L, prm.mu, prm.sparsity)
        if block == "u" and prm.divergence == "hard" and self.solver is not None:
            return project_divfree(MotionGrid(v, self.spacing), self.solver).coeffs
        return v

    def nonsmooth(self, z):
        return self.energy.nonsmooth(z["c"])


def _residuals_t0(images, cameras, particles, sigma):
    out = images[0].copy()
    if len(particles):
        for k, cam in enumerate(cameras):
            out[k] -= render_pixels(cam.project(particles.positions), particles.intensities,
                                    sigma, out.shape[1:])
    return out


def _lattice(box, spacing, config):
    return MotionGrid.covering(box.extent, spacing, config.min_vertices)


def level_images(images, sigma_image, sigma):
    """Blur ``images`` so their blobs have width ``sigma``, keeping peak heights."""
    if sigma <= sigma_image:
        return images
    s = np.sqrt(sigma ** 2 - sigma_image ** 2)
    gain = (sigma / sigma_image) ** 2
    return gain * ndimage.gaussian_filter(images, (0, 0, s, s), mode="constant", truncate=4.0)


def _optimise(images, cameras, particles, grid, config, level, blocks, steps, report_level):
    sigma = config.sigma_at(level)
    images = level_images(images, config.sigma, sigma)
    energy = JointEnergy(images, cameras, config.energy_params(sigma), steps=steps)
    solver = None
    if config.divergence == "hard" and "u" in blocks:
        solver = PoissonSolver(grid.dims, tol=config.pcg_tol, max_iter=config.pcg_iters)
    problem = JointProblem(energy, grid.spacing, blocks, solver)
    z = {"p": particles.positions.copy(), "c": particles.intensities.copy(),
         "u": grid.coeffs.copy()}
    state = ipalm.BlockState(z, L=report_level.get("L"))
    state, rep = ipalm.run(state, problem, config.max_iters, config.tol, check=config.check)
    out = ParticleSet(state.z["p"], state.z["c"])
    return out, MotionGrid(state.z["u"], grid.spacing), rep, dict(state.L)


def _finish(grid, box, config):
    if config.output_spacing is not None and config.output_spacing != grid.spacing:
        target = _lattice(box, config.output_spacing, config)
        grid = prolongate(grid, target.dims, target.spacing)
    if config.divergence == "hard":
        grid = project_divfree_exact(grid)
    return grid


def _check_inputs(images, cameras):
    if len(cameras) < 2:
        raise ValueError("at least two calibrated cameras are required")
    return validate_images(images, len(cameras))


def reconstruct(images, cameras, box: Box, config: SolverConfig = None, initial=None):
    """Joint reconstruction of particles and a dense flow field.

    ``images`` has shape (2, K, H, W). Returns ``(particles, flow, report)``.
    """
    config = SolverConfig() if config is None else config
    images = _check_inputs(images, cameras)
    t_start = time.perf_counter()
    report = RunReport(asdict(config))
    particles = ParticleSet.empty() if initial is None else initial.copy()
    grid = None
    L = None
    for level in range(config.levels):
        t0 = time.perf_counter()
        spacing = config.spacing_at(level)
        target = _lattice(box, spacing, config)
        grid = target if grid is None else prolongate(grid, target.dims, target.spacing)
        sigma, eps = config.sigma_at(level), config.eps_at(level)
        res = _residuals_t0(images, cameras, particles, config.sigma)
        cand, _ = propose(res, cameras, box, eps, config.i_min,
                          existing=particles.positions if len(particles) else None)
        particles = particles.concat(cand)
        n_iter, conv, energies = 0, True, []
        if len(particles):
            particles, grid, rep, L = _optimise(images, cameras, particles, grid, config, level,
                                                ("p", "c", "u"), (0, 1), {"L": L})
            particles = merge_close(prune_zero(particles), config.merge_radius)
            n_iter, conv, energies = rep.iterations, rep.converged, rep.energies
        report.levels.append(LevelRecord(level, sigma, spacing, tuple(grid.dims), eps, len(cand),
                                         len(particles), n_iter, conv, energies,
                                         dict(L or {}), time.perf_counter() - t0))
        log.info("level %d: sigma %.3f spacing %.2f eps %.2f, +%d candidates, %d particles, %d its",
                 level, sigma, spacing, eps, len(cand), len(particles), n_iter)
    if len(particles) == 0:
        report.warnings.append("no particles were reconstructed")
        grid = MotionGrid.zeros(grid.dims, grid.spacing)
    grid = _finish(grid, box, config)
    report.seconds = time.perf_counter() - t_start
    return particles, grid, report


def reconstruct_flow(images, cameras, box: Box, particles: ParticleSet, config: SolverConfig = None,
                     report=None):
    """Estimate the flow for a fixed particle set (positions and intensities frozen)."""
    config = SolverConfig() if config is None else config
    images = _check_inputs(images, cameras)
    t_start = time.perf_counter()
    report = RunReport(asdict(config)) if report is None else report
    grid, L = None, None
    for level in range(config.levels):
        t0 = time.perf_counter()
        spacing = config.spacing_at(level)
        target = _lattice(box, spacing, config)
        grid = target if grid is None else prolongate(grid, target.dims, target.spacing)
        n_iter, conv, energies = 0, True, []
        if len(particles):
            _, grid, rep, L = _optimise(images, cameras, particles, grid, config, level,
                                        ("u",), (0, 1), {"L": L})
            n_iter, conv, energies = rep.iterations, rep.converged, rep.energies
        report.levels.append(LevelRecord(level, config.sigma_at(level), spacing, tuple(grid.dims),
                                         config.eps_at(level), 0, len(particles), n_iter, conv,
                                         energies, dict(L or {}), time.perf_counter() - t0))
    grid = _finish(grid, box, config)
    report.seconds += time.perf_counter() - t_start
    return grid, report


def reconstruct_sequential(images, cameras, box: Box, config: SolverConfig = None):
    """Two-stage baseline: particles from the first time step only, then flow.

    Stage one runs the proposal/minimisation loop on the first-frame data term
    plus sparsity; stage two freezes the particles and fits the flow.
    """
    config = SolverConfig() if config is None else config
    images = _check_inputs(images, cameras)
    t_start = time.perf_counter()
    report = RunReport(asdict(config))
    particles = ParticleSet.empty()
    L = None
    dummy = _lattice(box, config.spacing_at(config.levels - 1), config)
    for level in range(config.levels):
        t0 = time.perf_counter()
        eps = config.eps_at(level)
        res = _residuals_t0(images, cameras, particles, config.sigma)
        cand, _ = propose(res, cameras, box, eps, config.i_min,
                          existing=particles.positions if len(particles) else None)
        particles = particles.concat(cand)
        n_iter, conv, energies = 0, True, []
        if len(particles):
            particles, _, rep, L = _optimise(images, cameras, particles, dummy, config, level,
                                             ("p", "c"), (0,), {"L": L})
            particles = merge_close(prune_zero(particles), config.merge_radius)
            n_iter, conv, energies = rep.iterations, rep.converged, rep.energies
        report.levels.append(LevelRecord(level, config.sigma_at(level), 0.0, (), eps, len(cand),
                                         len(particles), n_iter, conv, energies, dict(L or {}),
                                         time.perf_counter() - t0))
    if len(particles) == 0:
        report.warnings.append("no particles were reconstructed")
        grid = _finish(dummy, box, config)
        report.seconds = time.perf_counter() - t_start
        return particles, grid, report
    grid, report = reconstruct_flow(images, cameras, box, particles, config, report)
    report.seconds = time.perf_counter() - t_start
    return particles, grid, report
