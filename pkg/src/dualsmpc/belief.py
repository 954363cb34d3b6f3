"""Belief states over hidden intent and their Bayesian updates.

A belief is a categorical distribution over behavior modes together with
one Gaussian over the continuous weight vector per mode.  Because the
joint dynamics are affine in the weights given a mode (see
:func:`dualsmpc.dynamics.to_parameter_affine`), the per-mode measurement
update is conjugate and closed-form; the mode update marginalizes the
weights out of the likelihood.  A simple stickiness/process-noise
transition keeps the belief able to track mode switches.

The small jnp kernels at the bottom are shared with the planner, which
differentiates through them inside its tree rollouts.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

import jax.numpy as jnp
import numpy as np

from .behavior import BehaviorModel, combined_covariance
from .dynamics import JointSystem, to_parameter_affine, wrap_angle
from .errors import DegenerateCovarianceError, DegenerateLikelihoodError, InvalidArgumentError

EIG_FLOOR = 1e-9
_UNDERFLOW = 1e-300


def _floor_cov(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    w = np.min(np.linalg.eigvalsh(cov))
    if w < -1e-8:
        raise DegenerateCovarianceError(f"covariance has eigenvalue {w:.3e}")
    if w < EIG_FLOOR:
        cov = cov + (EIG_FLOOR - w) * np.eye(cov.shape[0])
    return cov


@dataclass(frozen=True)
class BeliefState:
    """Joint posterior over (theta, mode): categorical x per-mode Gaussian."""

    modes: Tuple[str, ...]
    mode_probs: np.ndarray
    means: np.ndarray  # [n_modes, n_theta]
    covs: np.ndarray   # [n_modes, n_theta, n_theta]

    def __post_init__(self):
        probs = np.asarray(self.mode_probs, dtype=float)
        means = np.asarray(self.means, dtype=float)
        covs = np.asarray(self.covs, dtype=float)
        m = len(self.modes)
        if probs.shape != (m,):
            raise InvalidArgumentError("mode_probs must have one entry per mode")
        if np.any(probs < -1e-12) or abs(float(np.sum(probs)) - 1.0) > 1e-9:
            raise InvalidArgumentError("mode_probs must be a simplex point")
        probs = np.maximum(probs, 0.0)
        probs = probs / np.sum(probs)
        if means.ndim != 2 or means.shape[0] != m:
            raise InvalidArgumentError("means must be [n_modes, n_theta]")
        nt = means.shape[1]
        if covs.shape != (m, nt, nt):
            raise InvalidArgumentError("covs must be [n_modes, n_theta, n_theta]")
        covs = np.stack([_floor_cov(c) for c in covs])
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(self, "mode_probs", probs)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)

    @property
    def n_theta(self) -> int:
        return self.means.shape[1]

    @property
    def theta_gaussians(self) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
        return {m: (self.means[i], self.covs[i]) for i, m in enumerate(self.modes)}

    def mode_index(self, mode) -> int:
        try:
            return self.modes.index(mode)
        except ValueError:
            raise InvalidArgumentError(f"mode {mode!r} not in belief") from None

    def map_mode(self) -> str:
        return self.modes[int(np.argmax(self.mode_probs))]

    def entropy(self) -> float:
        """Mixed entropy: categorical plus probability-weighted Gaussian parts."""
        p = np.clip(self.mode_probs, 1e-300, 1.0)
        cat = -float(np.sum(p * np.log(p)))
        k = self.n_theta
        diff = [
            0.5 * (k * np.log(2.0 * np.pi * np.e) + float(np.linalg.slogdet(c)[1]))
            for c in self.covs
        ]
        return cat + float(np.sum(self.mode_probs * np.asarray(diff)))

    @staticmethod
    def uniform_prior(modes, mean, cov) -> "BeliefState":
        """Same Gaussian for every mode, uniform mode probabilities."""
        modes = tuple(modes)
        mean = np.asarray(mean, dtype=float)
        cov = np.asarray(cov, dtype=float)
        m = len(modes)
        return BeliefState(
            modes=modes,
            mode_probs=np.full(m, 1.0 / m),
            means=np.tile(mean, (m, 1)),
            covs=np.tile(cov, (m, 1, 1)),
        )


@dataclass(frozen=True)
class TransitionModel:
    """Belief transition between steps: mode stickiness and weight diffusion."""

    mode_stickiness: float = 0.05
    theta_process_noise: np.ndarray = None  # [n_theta, n_theta] or scalar

    def __post_init__(self):
        eps = float(self.mode_stickiness)
        if not 0.0 <= eps <= 1.0:
            raise InvalidArgumentError("mode_stickiness must lie in [0, 1]")
        q = self.theta_process_noise
        q = 1e-4 if q is None else q
        object.__setattr__(self, "theta_process_noise", q)

    def noise_matrix(self, n_theta: int) -> np.ndarray:
        q = self.theta_process_noise
        if np.isscalar(q):
            return float(q) * np.eye(n_theta)
        q = np.asarray(q, dtype=float)
        if q.shape != (n_theta, n_theta):
            raise InvalidArgumentError("theta_process_noise must be scalar or [n_theta, n_theta]")
        return q


def _wrapped_residual(x_next, f_bar, heading_indices):
    r = np.asarray(x_next, dtype=float) - np.asarray(f_bar, dtype=float)
    if heading_indices:
        h = list(heading_indices)
        r[h] = np.asarray(wrap_angle(jnp.asarray(r[h])))
    return r


def measurement_update_theta(
    b: BeliefState, mode, F, f_bar, sigma_x, x_next, heading_indices: Sequence[int] = ()
) -> Tuple[np.ndarray, np.ndarray]:
    """Conjugate Gaussian update of one mode's weight posterior.

    Returns the posterior (mean, covariance); the covariance is
    symmetrized after the final inversion.
    """
    i = b.mode_index(mode)
    mu, cov = b.means[i], b.covs[i]
    F = np.asarray(F, dtype=float)
    sigma_x = np.asarray(sigma_x, dtype=float)
    try:
        np.linalg.cholesky(0.5 * (sigma_x + sigma_x.T) )
    except np.linalg.LinAlgError:
        raise DegenerateLikelihoodError("sigma_x must be symmetric positive definite")
    resid = _wrapped_residual(x_next, f_bar, heading_indices)
    mu_p, cov_p = (
        np.asarray(a)
        for a in theta_posterior_kernel(
            jnp.asarray(mu), jnp.asarray(cov), jnp.asarray(F), jnp.asarray(resid), jnp.asarray(sigma_x)
        )
    )
    return mu_p, cov_p


def mode_likelihood(
    b: BeliefState, mode, F, f_bar, sigma_x, x_next, heading_indices: Sequence[int] = ()
) -> float:
    """Marginal density of the observed next state under one mode."""
    i = b.mode_index(mode)
    mu, cov = b.means[i], b.covs[i]
    F = np.asarray(F, dtype=float)
    sigma_x = np.asarray(sigma_x, dtype=float)
    try:
        np.linalg.cholesky(0.5 * (sigma_x + sigma_x.T))
    except np.linalg.LinAlgError:
        raise DegenerateLikelihoodError("sigma_x must be symmetric positive definite")
    resid = _wrapped_residual(x_next, f_bar, heading_indices)
    ll = marginal_loglik_kernel(
        jnp.asarray(mu), jnp.asarray(cov), jnp.asarray(F), jnp.asarray(resid), jnp.asarray(sigma_x)
    )
    return float(np.exp(np.asarray(ll)))


def measurement_update_mode(b: BeliefState, likelihoods: Mapping[str, float]) -> np.ndarray:
    """Bayes update of the categorical mode distribution."""
    liks = np.array([float(likelihoods[m]) for m in b.modes])
    if np.any(liks < 0):
        raise InvalidArgumentError("likelihoods must be nonnegative")
    if np.all(liks < _UNDERFLOW):
        warnings.warn("all mode likelihoods underflowed; keeping the prior", RuntimeWarning)
        return b.mode_probs.copy()
    post = liks * b.mode_probs
    return post / np.sum(post)


def transition_update(b: BeliefState, tm: TransitionModel) -> BeliefState:
    """Stickiness mix toward uniform plus weight-covariance diffusion."""
    eps = tm.mode_stickiness
    m = len(b.modes)
    probs = (1.0 - eps) * b.mode_probs + eps / m
    noise = tm.noise_matrix(b.n_theta)
    covs = np.stack([c + noise for c in b.covs])
    return BeliefState(modes=b.modes, mode_probs=probs, means=b.means.copy(), covs=covs)


def update(
    b: BeliefState,
    sys: JointSystem,
    beh: BehaviorModel,
    x,
    u_e,
    x_next,
    tm: TransitionModel,
    theta_bar: Optional[Mapping[str, np.ndarray]] = None,
) -> BeliefState:
    """Full one-step belief update: per-mode conjugate posterior, mode
    Bayes update, then the transition model, in that order.

    ``theta_bar`` fixes the weight estimate inside the combined state
    covariance; defaults to the model's stored point estimates.  Closed-
    loop callers usually pass the current belief means.
    """
    if tuple(b.modes) != tuple(beh.modes):
        raise InvalidArgumentError("belief and behavior model mode sets differ")
    tb = theta_bar if theta_bar is not None else beh.theta_bar
    h = sys.heading_indices
    post_means = np.empty_like(b.means)
    post_covs = np.empty_like(b.covs)
    liks: Dict[str, float] = {}
    for i, mode in enumerate(b.modes):
        F, f_bar = to_parameter_affine(sys, beh, x, u_e, mode)
        sig_x = combined_covariance(sys, beh, mode, x, u_e, tb[mode])
        post_means[i], post_covs[i] = measurement_update_theta(
            b, mode, F, f_bar, sig_x, x_next, heading_indices=h
        )
        liks[mode] = mode_likelihood(b, mode, F, f_bar, sig_x, x_next, heading_indices=h)
    probs = measurement_update_mode(b, liks)
    b_minus = BeliefState(modes=b.modes, mode_probs=probs, means=post_means, covs=post_covs)
    return transition_update(b_minus, tm)


_UPDATE_FN_CACHE: Dict[int, object] = {}


def make_update_fn(sys: JointSystem, beh: BehaviorModel):
    """Compiled one-step belief update for a fixed (system, model) pair.

    Returns f(probs, means, covs, x, u_e, x_next, eps, q_proc) -> updated
    (probs, means, covs); identical math to :func:`update` with
    ``theta_bar`` taken from the per-mode prior means.  The closed-loop
    harness uses this; the uncompiled op stays the reference path.
    """
    import jax

    key = (id(sys), id(beh))
    hit = _UPDATE_FN_CACHE.get(key)
    if hit is not None:
        return hit[0]

    mm_fns = [beh.mean_matrix_fn(m) for m in beh.modes]
    cov_fns = [beh.basis_covs_fn(m) for m in beh.modes]
    h_idx = np.array(sys.heading_indices)
    sigma_d = jnp.asarray(sys.disturbance_covariance)
    n_modes = len(beh.modes)

    def step(probs, means, covs, x, u_e, x_next, eps, q_proc):
        fbar = sys.drift(x) + sys.input_matrix_ego(x) @ u_e
        B_o = sys.input_matrix_others(x)
        resid = x_next - fbar
        resid = resid.at[h_idx].set(wrap_angle(resid[h_idx]))
        post_m, post_c, lls = [], [], []
        for i in range(n_modes):
            U = mm_fns[i](x, u_e)
            Scv = cov_fns[i](x, u_e)
            Suo = jnp.einsum("i,iab->ab", means[i] ** 2, Scv)
            Sx = sigma_d + B_o @ Suo @ B_o.T
            Sx = Sx + jnp.diag(jnp.maximum(0.0, EIG_FLOOR - jnp.diagonal(Sx)))
            F = B_o @ U
            m_p, c_p = theta_posterior_kernel(means[i], covs[i], F, resid, Sx)
            post_m.append(m_p)
            post_c.append(c_p)
            lls.append(marginal_loglik_kernel(means[i], covs[i], F, resid, Sx))
        ll = jnp.stack(lls)
        logp = ll + jnp.log(jnp.clip(probs, 1e-300, 1.0))
        import jax.scipy.special as jss

        logp = logp - jss.logsumexp(logp)
        probs_new = jnp.exp(logp)
        probs_new = (1.0 - eps) * probs_new + eps / n_modes
        covs_new = jnp.stack(post_c) + q_proc[None]
        return probs_new, jnp.stack(post_m), covs_new

    fn = jax.jit(step)
    _UPDATE_FN_CACHE[key] = (fn, sys, beh)
    return fn


def update_fast(b: BeliefState, sys, beh, x, u_e, x_next, tm: TransitionModel) -> BeliefState:
    """Compiled variant of :func:`update` with theta_bar = current means."""
    fn = make_update_fn(sys, beh)
    probs, means, covs = fn(
        jnp.asarray(b.mode_probs),
        jnp.asarray(b.means),
        jnp.asarray(b.covs),
        jnp.asarray(np.asarray(x, dtype=float)),
        jnp.asarray(np.asarray(u_e, dtype=float)),
        jnp.asarray(np.asarray(x_next, dtype=float)),
        jnp.asarray(float(tm.mode_stickiness)),
        jnp.asarray(tm.noise_matrix(b.n_theta)),
    )
    return BeliefState(
        modes=b.modes, mode_probs=np.asarray(probs), means=np.asarray(means), covs=np.asarray(covs)
    )


# -- traceable kernels (shared with the planner) ---------------------------


def theta_posterior_kernel(mu, cov, F, resid, sig_x):
    """Lemma-style conjugate posterior for affine-Gaussian observations.

    ``resid`` is the observed state minus the parameter-free part of the
    step (heading components pre-wrapped by the caller).
    """
    nt = mu.shape[0]
    prec_prior = jnp.linalg.inv(cov)
    FtSi = jnp.linalg.solve(sig_x, F).T  # F^T sig_x^{-1}
    prec_post = prec_prior + FtSi @ F
    cov_post = jnp.linalg.inv(prec_post)
    cov_post = 0.5 * (cov_post + cov_post.T)
    mu_post = cov_post @ (FtSi @ resid + prec_prior @ mu)
    return mu_post, cov_post


def marginal_loglik_kernel(mu, cov, F, resid, sig_x):
    """log N(resid; F mu, F cov F^T + sig_x)."""
    S = F @ cov @ F.T + sig_x
    S = 0.5 * (S + S.T)
    L = jnp.linalg.cholesky(S)
    z = jax_solve_tri(L, resid - F @ mu)
    k = resid.shape[0]
    return -0.5 * (z @ z) - jnp.sum(jnp.log(jnp.diagonal(L))) - 0.5 * k * jnp.log(2.0 * jnp.pi)


def jax_solve_tri(L, y):
    import jax.scipy.linalg as jsl

    return jsl.solve_triangular(L, y, lower=True)


def mixed_entropy_kernel(probs, covs):
    """Categorical entropy plus probability-weighted Gaussian entropies."""
    p = jnp.clip(probs, 1e-300, 1.0)
    cat = -jnp.sum(p * jnp.log(p))
    k = covs.shape[-1]
    _, logdets = jnp.linalg.slogdet(covs)
    diff = 0.5 * (k * jnp.log(2.0 * jnp.pi * jnp.e) + logdets)
    return cat + jnp.sum(probs * diff)
