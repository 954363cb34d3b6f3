"""Projected quasi-Newton trust-region minimizer over box constraints.

The tree programs are reduced to smooth objectives of the stacked ego
controls (states and beliefs are eliminated by forward rollout), so the
solver only needs box handling: limited-memory BFGS directions, a trust
radius cap, Armijo backtracking along the projected path, and rejection
of any non-decreasing step.  The first-order (KKT) residual for a box
problem is the infinity norm of the projected gradient step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np

from .errors import NumericalFailureError


@dataclass
class BoxSolveResult:
    x: np.ndarray
    fun: float
    status: str  # "converged" | "max-iter"
    kkt_residual: float
    n_iter: int
    n_fev: int


def _kkt_residual(x, g, lo, hi):
    return float(np.max(np.abs(x - np.clip(x - g, lo, hi)), initial=0.0))


def minimize_box(
    value_and_grad: Callable[[np.ndarray], Tuple[float, np.ndarray]],
    x0: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    kkt_tol: float = 1e-5,
    max_iter: int = 100,
    memory: int = 10,
    trust_init: float = 1.0,
) -> BoxSolveResult:
    """Minimize f over {lo <= x <= hi}. f never increases across accepted steps."""
    x = np.clip(np.asarray(x0, dtype=float), lo, hi)
    f, g = value_and_grad(x)
    f = float(f)
    g = np.asarray(g, dtype=float)
    n_fev = 1
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise NumericalFailureError("objective or gradient is not finite at the initial point")

    s_hist: list = []
    y_hist: list = []
    rho_hist: list = []
    delta = float(trust_init)
    status = "max-iter"
    it = 0

    def lbfgs_dir(grad):
        q = grad.copy()
        alphas = []
        for s, y, r in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = r * (s @ q)
            alphas.append(a)
            q -= a * y
        if y_hist:
            y = y_hist[-1]
            gamma = (s_hist[-1] @ y) / max(y @ y, 1e-300)
            q *= gamma
        for (s, y, r), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = r * (y @ q)
            q += (a - b) * s
        return -q

    kkt = _kkt_residual(x, g, lo, hi)
    alpha0 = 1.0
    for it in range(1, max_iter + 1):
        if kkt <= kkt_tol:
            status = "converged"
            it -= 1
            break

        accepted = False
        for d in (lbfgs_dir(g), -g):
            dmax = float(np.max(np.abs(d), initial=0.0))
            if dmax > delta:
                d = d * (delta / dmax)
            alpha = alpha0
            alpha_floor = alpha0 * 2.0**-12
            while alpha >= alpha_floor:
                x_new = np.clip(x + alpha * d, lo, hi)
                step = x_new - x
                pred = float(g @ step)
                if np.max(np.abs(step), initial=0.0) == 0.0:
                    break
                f_new, g_new = value_and_grad(x_new)
                f_new = float(f_new)
                g_new = np.asarray(g_new, dtype=float)
                n_fev += 1
                if not np.isfinite(f_new) or not np.all(np.isfinite(g_new)):
                    raise NumericalFailureError("NaN or Inf in objective derivatives")
                if f_new <= f + 1e-4 * min(pred, 0.0) and f_new < f:
                    s = step
                    y = g_new - g
                    sy = float(s @ y)
                    if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y) + 1e-300):
                        s_hist.append(s)
                        y_hist.append(y)
                        rho_hist.append(1.0 / sy)
                        if len(s_hist) > memory:
                            s_hist.pop(0)
                            y_hist.pop(0)
                            rho_hist.pop(0)
                    if alpha >= alpha0 and dmax >= 0.99 * delta:
                        delta = min(delta * 2.0, 1e3)
                    x, f, g = x_new, f_new, g_new
                    accepted = True
                    # Next iteration starts near the step size that worked.
                    alpha0 = min(1.0, 4.0 * alpha)
                    break
                alpha *= 0.5
            if accepted:
                break
            delta = max(delta * 0.25, 1e-8)
        if not accepted:
            # No descent along quasi-Newton or steepest directions.
            break
        kkt = _kkt_residual(x, g, lo, hi)
    else:
        it = max_iter

    if kkt <= kkt_tol:
        status = "converged"
    return BoxSolveResult(x=x, fun=f, status=status, kkt_residual=kkt, n_iter=it, n_fev=n_fev)
