"""Inertial proximal alternating linearised minimisation (iPALM).

The optimiser works on any problem exposing named variable blocks, a smooth
part ``H`` with per-block gradients and a proximal map per block::

    problem.blocks                      # update order, e.g. ("p", "c", "u")
    problem.smooth(z, block)            # -> (H(z), grad_block H(z))
    problem.smooth_value(z, block)      # -> H(z); only ``block`` changed since smooth()
    problem.prox(block, v, L)           # -> argmin_y F_b(y) + L/2 |y - v|^2
    problem.nonsmooth(z)                # -> sum_b F_b(z_b)

Every accepted block update satisfies the descent-lemma test

    H(z+) <= H(z_hat) + <grad H(z_hat), z+ - z_hat> + L/2 |z+ - z_hat|^2

where ``z_hat`` is the (extrapolated) point the gradient was taken at.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

INERTIA = 1 / math.sqrt(2)
MAX_BACKTRACKS = 40
# relative slack for floating-point roundoff in the descent test
ROUNDOFF = 1e-12


class StepFailure(RuntimeError):
    """Backtracking could not satisfy the descent lemma; usually a gradient bug."""


@dataclass
class BlockState:
    z: dict
    z_prev: dict = None
    L: dict = None
    tau: float = INERTIA
    L_min: float = 1e-8

    def __post_init__(self):
        self.z = {k: np.asarray(v, dtype=float) for k, v in self.z.items()}
        if self.z_prev is None:
            self.z_prev = {k: v.copy() for k, v in self.z.items()}
        if self.L is None:
            self.L = {k: 1.0 for k in self.z}


@dataclass
class AuditRecord:
    iteration: int
    block: str
    lhs: float
    rhs: float
    L: float
    backtracks: int


@dataclass
class ConvergenceReport:
    energies: list = field(default_factory=list)
    L_history: list = field(default_factory=list)
    backtracks: list = field(default_factory=list)
    audit: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0

    def to_csv(self):
        buf = io.StringIO()
        blocks = sorted({b for row in self.L_history for b in row})
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "energy"] + [f"L_{b}" for b in blocks] + ["backtracks"])
        for n, (e, L, bt) in enumerate(zip(self.energies, self.L_history, self.backtracks)):
            w.writerow([n + 1, repr(e)] + [repr(L.get(b, float("nan"))) for b in blocks] + [bt])
        return buf.getvalue()


def _vdot(a, b):
    return float(np.vdot(a.ravel(), b.ravel()))


def ipalm_step(state: BlockState, problem, iteration=0, audit=None, check=False):
    """One sweep over all blocks in ``problem.blocks``.

    Returns ``(H(z^{n+1}), total backtracks)``. With ``check`` set the descent
    test is re-evaluated independently at each accepted point and asserted.
    """
    total_bt = 0
    H1 = None
    for b in problem.blocks:
        z_hat = state.z[b] + state.tau * (state.z[b] - state.z_prev[b])
        trial = dict(state.z)
        trial[b] = z_hat
        H0, grad = problem.smooth(trial, b)
        bt = 0
        while True:
            L = state.L[b]
            cand = problem.prox(b, z_hat - grad / L, L)
            trial[b] = cand
            H1 = problem.smooth_value(trial, b)
            d = cand - z_hat
            lin = _vdot(grad, d)
            quad = 0.5 * L * _vdot(d, d)
            rhs = H0 + lin + quad
            slack = ROUNDOFF * (abs(H0) + abs(lin) + quad)
            if np.isfinite(H1) and H1 <= rhs + slack:
                break
            state.L[b] = 2.0 * L
            bt += 1
            if bt > MAX_BACKTRACKS:
                raise StepFailure(f"block {b!r}: descent test failed after {bt} doublings")
        if check:
            lhs = problem.smooth(trial, b)[0]
            assert lhs <= rhs + slack, (b, lhs, rhs)
        if audit is not None:
            audit.append(AuditRecord(iteration, b, H1, rhs + slack, L, bt))
        state.z_prev[b] = state.z[b]
        state.z[b] = cand
        if bt == 0 and H1 <= rhs - slack:
            # try a longer step next time; the same test re-verifies it.
            # A pass that only holds within roundoff is not evidence L is too large.
            state.L[b] = max(0.5 * L, state.L_min)
        total_bt += bt
    return H1, total_bt


def run(state: BlockState, problem, max_iters=40, tol=1e-6, check=False, callback=None):
    """Iterate ``ipalm_step`` until ``max_iters`` or relative step norm below ``tol``."""
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    report = ConvergenceReport()
    for n in range(max_iters):
        before = {b: state.z[b].copy() for b in problem.blocks}
        H, bt = ipalm_step(state, problem, iteration=n, audit=report.audit, check=check)
        energy = H + problem.nonsmooth(state.z)
        report.energies.append(float(energy))
        report.L_history.append(dict(state.L))
        report.backtracks.append(bt)
        report.iterations = n + 1
        step = math.sqrt(sum(_vdot(state.z[b] - before[b], state.z[b] - before[b])
                             for b in problem.blocks))
        size = math.sqrt(sum(_vdot(before[b], before[b]) for b in problem.blocks))
        if callback is not None:
            callback(n, state, energy)
        if step <= tol * max(size, 1e-300) or step == 0.0:
            report.converged = True
            break
    log.debug("ipalm: %d iterations, energy %.6g, converged=%s",
              report.iterations, report.energies[-1], report.converged)
    return state, report
