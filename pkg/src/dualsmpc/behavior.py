"""Opponent behavior models.

The other agent's action is a linear combination of stochastic basis
policies, one Q-value function per (mode, basis index).  Each basis is
approximated by a Gaussian centered at the Q maximizer (its perfectly
rational action) with covariance equal to the negated inverse Hessian at
the maximizer.  The per-basis means, stacked column-wise, form the mean
matrix that makes the joint dynamics affine in the hidden weight vector.

Q evaluators must be jax-traceable: gradients and Hessians are taken by
automatic differentiation, and the planner differentiates through the
whole pipeline.  Built-in models (see :mod:`dualsmpc.models`) also carry
closed-form maximizers, which both the belief engine and the planner use
on their hot paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Tuple

import jax
import jax.numpy as jnp
import numpy as np

from .errors import (
    DegenerateModelError,
    InvalidArgumentError,
    OptimizationFailureError,
    UnknownModeError,
)

COV_FLOOR = 1e-9


@dataclass(frozen=True)
class QValueFunction:
    """A basis state-action value for the other agent.

    ``evaluator(u_o, x, u_e)`` returns a scalar utility, smooth and
    strictly concave in ``u_o`` near its maximizer.  ``analytic_argmax``
    and ``analytic_hessian`` (both ``(x, u_e) -> ...``) short-circuit the
    numeric paths when closed forms exist.
    """

    evaluator: Callable
    control_dim: int
    analytic_argmax: Optional[Callable] = None
    analytic_hessian: Optional[Callable] = None


@dataclass(frozen=True)
class PolicyGaussian:
    """Gaussian action distribution (mu, sigma)."""

    mu: np.ndarray
    sigma: np.ndarray


@dataclass(frozen=True)
class BehaviorModel:
    """Finite mode set with ``n_theta`` basis Q functions per mode."""

    modes: Tuple[str, ...]
    n_theta: int
    basis_q: Mapping[Tuple[str, int], QValueFunction]
    theta_bar: Mapping[str, np.ndarray]

    def __post_init__(self):
        if self.n_theta < 1:
            raise InvalidArgumentError("n_theta must be >= 1")
        if not self.modes:
            raise InvalidArgumentError("mode set must be nonempty")
        dims = set()
        for m in self.modes:
            for i in range(self.n_theta):
                if (m, i) not in self.basis_q:
                    raise InvalidArgumentError(f"missing basis Q for mode {m!r}, index {i}")
                dims.add(self.basis_q[(m, i)].control_dim)
        if len(dims) != 1:
            raise InvalidArgumentError("all basis Q functions must share a control dim")
        tb = {}
        for m in self.modes:
            if m not in self.theta_bar:
                raise InvalidArgumentError(f"theta_bar missing mode {m!r}")
            v = np.asarray(self.theta_bar[m], dtype=float)
            if v.shape != (self.n_theta,) or not np.all(np.isfinite(v)):
                raise InvalidArgumentError("theta_bar entries must be finite length-n_theta")
            tb[m] = v
        object.__setattr__(self, "theta_bar", tb)
        object.__setattr__(self, "modes", tuple(self.modes))

    @property
    def control_dim(self) -> int:
        return self.basis_q[(self.modes[0], 0)].control_dim

    def check_mode(self, mode):
        if mode not in self.modes:
            raise UnknownModeError(mode)

    # -- traceable per-mode closures, used inside jitted planner rollouts --

    def mean_matrix_fn(self, mode) -> Callable:
        """(x, u_e) -> [control_dim, n_theta] basis-mean matrix, traceable."""
        self.check_mode(mode)
        fns = [_argmax_fn(self.basis_q[(mode, i)]) for i in range(self.n_theta)]

        def matrix(x, u_e):
            return jnp.stack([f(x, u_e) for f in fns], axis=1)

        return matrix

    def basis_covs_fn(self, mode) -> Callable:
        """(x, u_e) -> [n_theta, m, m] stacked basis covariances, traceable."""
        self.check_mode(mode)
        qs = [self.basis_q[(mode, i)] for i in range(self.n_theta)]
        arg = [_argmax_fn(q) for q in qs]

        def covs(x, u_e):
            out = []
            for q, a in zip(qs, arg):
                if q.analytic_hessian is not None:
                    H = q.analytic_hessian(x, u_e)
                else:
                    H = jax.hessian(q.evaluator, argnums=0)(a(x, u_e), x, u_e)
                S = -_sym_inv(H)
                out.append(0.5 * (S + S.T))
            return jnp.stack(out)

        return covs


def _sym_inv(H):
    return jnp.linalg.inv(H)


def _argmax_fn(q: QValueFunction) -> Callable:
    if q.analytic_argmax is not None:
        return q.analytic_argmax

    def numeric(x, u_e):
        return _newton_argmax_fixed(q.evaluator, x, u_e, q.control_dim)

    return numeric


def _newton_argmax_fixed(evaluator, x, u_e, m, iters: int = 12):
    """Fixed-iteration regularized Newton ascent; traceable, no checks."""
    g_fn = jax.grad(evaluator, argnums=0)
    h_fn = jax.hessian(evaluator, argnums=0)

    def body(u, _):
        g = g_fn(u, x, u_e)
        H = h_fn(u, x, u_e)
        # Shift so that -(H) + lam*I is PD even away from the maximizer.
        lam = jnp.maximum(0.0, jnp.max(jnp.linalg.eigvalsh(H))) + 1e-9
        p = jnp.linalg.solve(-H + lam * jnp.eye(m), g)
        return u + p, None

    u0 = jnp.zeros(m)
    u, _ = jax.lax.scan(body, u0, None, length=iters)
    return u


def basis_mean(q: QValueFunction, x, u_e) -> np.ndarray:
    """Rational action of one basis: argmax over u_o of its Q value.

    Uses the closed form when available, otherwise damped Newton ascent
    from the zero control (50 iterations, gradient tolerance 1e-8).
    """
    x = jnp.asarray(np.asarray(x, dtype=float))
    u_e = jnp.asarray(np.asarray(u_e, dtype=float))
    if q.analytic_argmax is not None:
        return np.asarray(q.analytic_argmax(x, u_e))

    g_fn = jax.grad(q.evaluator, argnums=0)
    h_fn = jax.hessian(q.evaluator, argnums=0)
    u = jnp.zeros(q.control_dim)
    val = float(q.evaluator(u, x, u_e))
    for _ in range(50):
        g = np.asarray(g_fn(u, x, u_e))
        if np.linalg.norm(g) <= 1e-8:
            return np.asarray(u)
        H = np.asarray(h_fn(u, x, u_e))
        lam = max(0.0, float(np.max(np.linalg.eigvalsh(H)))) + 1e-10
        p = np.linalg.solve(-H + lam * np.eye(q.control_dim), g)
        alpha = 1.0
        while alpha > 1e-8:
            cand = u + alpha * jnp.asarray(p)
            cand_val = float(q.evaluator(cand, x, u_e))
            if cand_val > val + 1e-4 * alpha * float(g @ p):
                u, val = cand, cand_val
                break
            alpha *= 0.5
        else:
            break
    g = np.asarray(g_fn(u, x, u_e))
    if np.linalg.norm(g) <= 1e-8:
        return np.asarray(u)
    raise OptimizationFailureError(
        f"basis mean Newton ascent stalled at |grad| = {np.linalg.norm(g):.3e}",
        last_iterate=np.asarray(u),
    )


def laplace_approx(q: QValueFunction, x, u_e) -> PolicyGaussian:
    """Gaussian fit at the Q maximizer; covariance = -(Hessian)^-1."""
    mu = basis_mean(q, x, u_e)
    xj = jnp.asarray(np.asarray(x, dtype=float))
    uj = jnp.asarray(np.asarray(u_e, dtype=float))
    if q.analytic_hessian is not None:
        H = np.asarray(q.analytic_hessian(xj, uj))
    else:
        H = np.asarray(jax.hessian(q.evaluator, argnums=0)(jnp.asarray(mu), xj, uj))
    eigs = np.linalg.eigvalsh(0.5 * (H + H.T))
    if np.max(eigs) > -1e-12:
        raise DegenerateModelError(
            f"Hessian at the maximizer is not negative definite (max eig {np.max(eigs):.3e})"
        )
    sigma = -np.linalg.inv(H)
    return PolicyGaussian(mu=mu, sigma=0.5 * (sigma + sigma.T))


def policy_distribution(beh: BehaviorModel, mode, theta, x, u_e) -> PolicyGaussian:
    """Mixture action distribution: mu = sum theta_i mu_i, sigma = sum theta_i^2 sigma_i."""
    beh.check_mode(mode)
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (beh.n_theta,):
        raise InvalidArgumentError(f"theta must have length {beh.n_theta}")
    m = beh.control_dim
    mu = np.zeros(m)
    sigma = np.zeros((m, m))
    for i in range(beh.n_theta):
        g = laplace_approx(beh.basis_q[(mode, i)], x, u_e)
        mu += theta[i] * g.mu
        sigma += theta[i] ** 2 * g.sigma
    return PolicyGaussian(mu=mu, sigma=sigma)


def mean_matrix(beh: BehaviorModel, mode, x, u_e) -> np.ndarray:
    """Basis means stacked column-wise, shape [control_dim, n_theta]."""
    beh.check_mode(mode)
    cols = [basis_mean(beh.basis_q[(mode, i)], x, u_e) for i in range(beh.n_theta)]
    return np.stack(cols, axis=1)


def policy_covariance(beh: BehaviorModel, mode, theta, x, u_e) -> np.ndarray:
    """Covariance of the mixed action at weights ``theta``."""
    return policy_distribution(beh, mode, theta, x, u_e).sigma


def combined_covariance(sys, beh: BehaviorModel, mode, x, u_e, theta_bar) -> np.ndarray:
    """Disturbance plus policy uncertainty: Sigma_d + B_o Sigma_uo B_o^T.

    The diagonal is floored at ``COV_FLOOR`` so the result stays invertible
    for the belief updates.
    """
    beh.check_mode(mode)
    theta_bar = np.asarray(theta_bar, dtype=float)
    S_uo = policy_covariance(beh, mode, theta_bar, x, u_e)
    B_o = np.asarray(sys.input_matrix_others(jnp.asarray(np.asarray(x, dtype=float))))
    S = sys.disturbance_covariance + B_o @ S_uo @ B_o.T
    S = 0.5 * (S + S.T)
    bump = np.maximum(0.0, COV_FLOOR - np.diag(S))
    return S + np.diag(bump)
