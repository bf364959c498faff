"""Levenberg-Marquardt over pose-state blocks plus 3-dof landmark blocks.

The normal equations are reduced onto the state blocks with a Schur
complement (landmark blocks are independent 3x3s), solved densely, and the
landmark steps recovered by back-substitution.  Robust losses enter as
iteratively reweighted least squares; the trust-region test always uses the
true robust cost, so accepted steps never increase it.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import scipy.linalg

log = logging.getLogger(__name__)


class SolverDiverged(RuntimeError):
    pass


@dataclass
class Linearization:
    cost: float
    Hss: np.ndarray  # (ns, ns)
    gs: np.ndarray  # (ns,)
    Hsl: np.ndarray  # (ns, 3L)
    Hll: np.ndarray  # (L, 3, 3)
    gl: np.ndarray  # (3L,)


class LeastSquaresProblem(Protocol):
    free: np.ndarray  # boolean mask over state dims; False = held constant

    def linearize(self, x) -> Linearization: ...

    def cost(self, x) -> float: ...

    def retract(self, x, ds: np.ndarray, dl: np.ndarray): ...


@dataclass(frozen=True)
class SolverOptions:
    max_iterations: int = 50
    gradient_tolerance: float = 1e-8
    step_tolerance: float = 1e-10
    function_tolerance: float = 1e-6
    initial_lambda: float = 1e-8
    max_lambda: float = 1e16


@dataclass
class SolverReport:
    iterations: int = 0
    initial_cost: float = float("nan")
    final_cost: float = float("nan")
    termination: str = ""
    diverged: bool = False
    cost_history: list[float] = field(default_factory=list)


def _solve_damped(lin: Linearization, free: np.ndarray, lam: float):
    ns = len(lin.gs)
    L = lin.Hll.shape[0]
    ds = np.zeros(ns)
    dl = np.zeros(3 * L)
    d_s = np.clip(np.diag(lin.Hss), 1e-6, 1e32)
    Hss = lin.Hss + np.diag(lam * d_s)
    rhs = -lin.gs
    if L:
        d_l = np.clip(np.einsum("lii->li", lin.Hll), 1e-6, 1e32)
        Hll = lin.Hll + lam * d_l[:, :, None] * np.eye(3)[None]
        Hll_inv = np.linalg.inv(Hll)
        Hsl3 = lin.Hsl.reshape(ns, L, 3)
        T = (Hsl3.transpose(1, 0, 2) @ Hll_inv).transpose(1, 0, 2).reshape(ns, 3 * L)
        Hss = Hss - T @ lin.Hsl.T
        rhs = rhs + T @ lin.gl
    idx = np.nonzero(free)[0]
    A = Hss[np.ix_(idx, idx)]
    A = 0.5 * (A + A.T)
    try:
        c = scipy.linalg.cho_factor(A, check_finite=False)
        ds[idx] = scipy.linalg.cho_solve(c, rhs[idx], check_finite=False)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        ds[idx] = np.linalg.lstsq(A, rhs[idx], rcond=None)[0]
    if L:
        r = -lin.gl - lin.Hsl.T @ ds
        dl = (Hll_inv @ r.reshape(L, 3, 1)).ravel()
    return ds, dl


def levenberg_marquardt(problem: LeastSquaresProblem, x0, options: SolverOptions | None = None):
    """Minimize ``problem`` from ``x0``; returns ``(x, SolverReport)``."""
    opt = options or SolverOptions()
    x = x0
    lin = problem.linearize(x)
    report = SolverReport(initial_cost=lin.cost, final_cost=lin.cost, cost_history=[lin.cost])
    free = problem.free
    lam = opt.initial_lambda
    nu = 2.0
    while True:
        g = np.concatenate([lin.gs[free], lin.gl])
        if g.size == 0 or np.max(np.abs(g)) < opt.gradient_tolerance:
            report.termination = "gradient"
            break
        if report.iterations >= opt.max_iterations:
            report.termination = "max_iterations"
            break
        ds, dl = _solve_damped(lin, free, lam)
        step = np.concatenate([ds, dl])
        if not np.all(np.isfinite(step)):
            lam *= nu
            nu *= 2
            if lam > opt.max_lambda:
                report.termination = "diverged"
                report.diverged = True
                break
            continue
        if np.linalg.norm(step) < opt.step_tolerance:
            report.termination = "step"
            break
        x_new = problem.retract(x, ds, dl)
        cost_new = problem.cost(x_new)
        H_step = lin.Hss @ ds + lin.Hsl @ dl
        Hl_step = lin.Hsl.T @ ds + (lin.Hll @ dl.reshape(-1, 3, 1)).ravel()
        predicted = -2.0 * (lin.gs @ ds + lin.gl @ dl) - (ds @ H_step + dl @ Hl_step)
        actual = lin.cost - cost_new
        report.iterations += 1
        if np.isfinite(cost_new) and actual > 0:
            rho = actual / predicted if predicted > 0 else 0.0
            lam *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
            lam = max(lam, 1e-12)
            nu = 2.0
            x = x_new
            prev = lin.cost
            lin = problem.linearize(x)
            report.cost_history.append(lin.cost)
            if actual <= opt.function_tolerance * prev:
                report.termination = "function"
                break
        else:
            lam *= nu
            nu *= 2.0
            if lam > opt.max_lambda:
                report.termination = "diverged"
                report.diverged = True
                log.warning("solver could not reduce cost %.6g; keeping last accepted iterate", lin.cost)
                break
    report.final_cost = lin.cost
    return x, report
