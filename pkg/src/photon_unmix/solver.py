"""Proximal-gradient minimization of smooth + anisotropic-TV objectives.

The TV proximal map with box constraints is computed by the fast dual
projected-gradient method of Beck and Teboulle, warm-started across outer
iterations. The outer loop is a monotone FISTA with backtracking, so the
composite objective never increases between accepted iterates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class SolverError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


def tv(x: np.ndarray) -> float:
    """Anisotropic total variation: sum of absolute forward differences."""
    return float(np.abs(np.diff(x, axis=0)).sum() + np.abs(np.diff(x, axis=1)).sum())


def _div(p, q, shape):
    # L(p, q) = p_ij + q_ij - p_{i-1,j} - q_{i,j-1}
    out = np.zeros(shape)
    out[:-1, :] += p
    out[1:, :] -= p
    out[:, :-1] += q
    out[:, 1:] -= q
    return out


def _grad(x):
    return x[:-1, :] - x[1:, :], x[:, :-1] - x[:, 1:]


def prox_tv(b, lam, lo=-np.inf, hi=np.inf, dual=None, max_iters=100, tol=1e-7):
    """argmin_x 0.5*||x - b||^2 + lam*TV(x) subject to lo <= x <= hi.

    Returns ``(x, dual)``; pass ``dual`` back in to warm-start the next call.
    """
    b = np.asarray(b, dtype=float)
    if lam <= 0:
        return np.clip(b, lo, hi), dual
    shape = b.shape
    if dual is None:
        p = np.zeros((shape[0] - 1, shape[1]))
        q = np.zeros((shape[0], shape[1] - 1))
    else:
        p, q = dual
    r, s = p, q
    t = 1.0
    x = np.clip(b - lam * _div(p, q, shape), lo, hi)
    scale = 1.0 / (8.0 * lam)
    for _ in range(max_iters):
        xr = np.clip(b - lam * _div(r, s, shape), lo, hi)
        gp, gq = _grad(xr)
        p_new = np.clip(r + scale * gp, -1.0, 1.0)
        q_new = np.clip(s + scale * gq, -1.0, 1.0)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        w = (t - 1.0) / t_new
        r = p_new + w * (p_new - p)
        s = q_new + w * (q_new - q)
        p, q, t = p_new, q_new, t_new
        x_new = np.clip(b - lam * _div(p, q, shape), lo, hi)
        delta = np.linalg.norm(x_new - x)
        x = x_new
        if delta <= tol * max(np.linalg.norm(x), 1e-12):
            break
    return x, (p, q)


@dataclass
class SolveResult:
    x: np.ndarray
    objective: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)


def minimize_tv(x0, value: Callable, gradient: Callable, beta: float, lo=-np.inf, hi=np.inf,
                max_iters: int = 500, rel_tol: float = 1e-8, step: float = 1.0,
                prox_iters: int = 100) -> SolveResult:
    """Minimize value(x) + beta*TV(x) over the box [lo, hi].

    ``value`` must return ``np.inf`` outside its domain; backtracking then
    shrinks the step until the trial point is admissible.
    """
    x = np.clip(np.asarray(x0, dtype=float), lo, hi)
    F = value(x) + beta * tv(x)
    trace = [(0, float(F), float(step))]
    if not np.isfinite(F):
        raise SolverError("objective is not finite at the initial point", trace)
    y, t, dual = x.copy(), 1.0, None
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        fy = value(y)
        gy = gradient(y)
        if not (np.isfinite(fy) and np.all(np.isfinite(gy))):
            raise SolverError(f"non-finite objective or gradient at iteration {it}", trace)
        while True:
            z, dual_z = prox_tv(y - step * gy, step * beta, lo, hi, dual, max_iters=prox_iters)
            fz = value(z)
            d = z - y
            bound = fy + float(np.vdot(gy, d)) + float(np.vdot(d, d)) / (2.0 * step)
            if np.isfinite(fz) and fz <= bound + 1e-12 * abs(bound):
                break
            step *= 0.5
            if step < 1e-300:
                raise SolverError(f"step size underflow at iteration {it}", trace)
        dual = dual_z
        Fz = fz + beta * tv(z)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        accepted = Fz <= F
        x_new = z if accepted else x
        y = np.clip(x_new + (t / t_new) * (z - x_new) + ((t - 1.0) / t_new) * (x_new - x), lo, hi)
        if accepted:
            gain = F - Fz
            x, F = z, Fz
        t = t_new
        trace.append((it, float(F), float(step)))
        if accepted and gain <= rel_tol * max(abs(F), 1e-12):
            converged = True
            break
    return SolveResult(x, float(F), it, converged, trace)
