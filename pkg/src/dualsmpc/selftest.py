"""Built-in oracle checks, runnable via ``dualsmpc selftest``.

Each check recomputes a quantity with an independent method (dense-grid
Bayes, finite differences, exhaustive enumeration) and compares it to the
library's analytic path.  The pytest suite runs the same functions with
more cases and tighter budgets.
"""

from __future__ import annotations

from typing import Callable, List, Tuple

import numpy as np

from . import belief as B
from . import planner as P
from . import shielding as S
from .behavior import QValueFunction, laplace_approx
from .belief import BeliefState


def grid_bayes_posterior(mu, cov, F, fbar, sig_x, x_next, half_width=6.0, n_grid=401):
    """Dense-grid Bayes oracle for the conjugate weight update (1D/2D)."""
    mu = np.asarray(mu, dtype=float)
    cov = np.asarray(cov, dtype=float)
    F = np.asarray(F, dtype=float)
    resid = np.asarray(x_next, dtype=float) - np.asarray(fbar, dtype=float)
    k = mu.shape[0]
    stds = np.sqrt(np.diag(cov))
    axes = [np.linspace(mu[i] - half_width * stds[i], mu[i] + half_width * stds[i], n_grid) for i in range(k)]
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)  # [G, k]

    ci = np.linalg.inv(cov)
    dm = pts - mu
    log_prior = -0.5 * np.einsum("gi,ij,gj->g", dm, ci, dm)
    si = np.linalg.inv(sig_x)
    r = resid[None, :] - pts @ F.T
    log_lik = -0.5 * np.einsum("gi,ij,gj->g", r, si, r)
    logp = log_prior + log_lik
    logp -= logp.max()
    w = np.exp(logp)
    w /= w.sum()
    mean = w @ pts
    d = pts - mean
    cov_post = np.einsum("g,gi,gj->ij", w, d, d)
    return mean, cov_post, pts, w


def gaussian_kl(mu0, cov0, mu1, cov1) -> float:
    """KL(N0 || N1)."""
    k = len(mu0)
    ci1 = np.linalg.inv(cov1)
    d = np.asarray(mu1) - np.asarray(mu0)
    return 0.5 * (
        np.trace(ci1 @ cov0)
        + d @ ci1 @ d
        - k
        + np.linalg.slogdet(cov1)[1]
        - np.linalg.slogdet(cov0)[1]
    )


def check_belief_grid_oracle(n_cases=3, seed=0, tol=1e-3) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        k = int(rng.integers(1, 3))
        n = 2
        mu = rng.normal(size=k)
        A = rng.normal(size=(k, k))
        cov = A @ A.T + 0.5 * np.eye(k)
        F = rng.normal(size=(n, k))
        fbar = rng.normal(size=n)
        sx = np.diag(rng.uniform(0.2, 1.0, size=n))
        x_next = fbar + F @ (mu + rng.normal(size=k) * 0.3) + rng.normal(size=n) * 0.2
        b = BeliefState(("m",), np.array([1.0]), mu[None], cov[None])
        m_an, c_an = B.measurement_update_theta(b, "m", F, fbar, sx, x_next)
        m_gr, c_gr, _, _ = grid_bayes_posterior(mu, cov, F, fbar, sx, x_next)
        worst = max(worst, gaussian_kl(m_gr, c_gr, m_an, c_an))
    return worst < tol, f"max KL(grid || analytic) = {worst:.2e} (tol {tol})"


def check_laplace_fd(seed=0, tol=1e-4) -> Tuple[bool, str]:
    rng = np.random.default_rng(seed)
    import jax.numpy as jnp

    a = rng.normal(size=2)
    W = np.diag(rng.uniform(1.0, 3.0, size=2))
    c4 = rng.uniform(0.05, 0.2, size=2)

    def ev(u, x, u_e):
        d = u - jnp.asarray(a)
        return -0.5 * d @ (jnp.asarray(W) @ d) - jnp.sum(jnp.asarray(c4) * d**4)

    q = QValueFunction(evaluator=ev, control_dim=2)
    g = laplace_approx(q, np.zeros(2), np.zeros(2))
    h = 1e-4
    H = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            ei, ej = np.eye(2)[i] * h, np.eye(2)[j] * h
            H[i, j] = (
                float(ev(jnp.asarray(g.mu + ei + ej), 0, 0))
                - float(ev(jnp.asarray(g.mu + ei - ej), 0, 0))
                - float(ev(jnp.asarray(g.mu - ei + ej), 0, 0))
                + float(ev(jnp.asarray(g.mu - ei - ej), 0, 0))
            ) / (4 * h * h)
    sig_fd = -np.linalg.inv(H)
    rel = np.max(np.abs(sig_fd - g.sigma)) / np.max(np.abs(sig_fd))
    return rel < tol, f"Laplace covariance vs FD Hessian rel err = {rel:.2e} (tol {tol})"


def check_tree_counts() -> Tuple[bool, str]:
    from .tree import build_tree, path_probability

    b = BeliefState(("a", "b"), np.array([0.5, 0.5]), np.zeros((2, 2)), np.stack([np.eye(2)] * 2))
    tree = build_tree(np.zeros(8), b, 6, 2, 2, ("a", "b"), rng_seed=0)
    ok = tree.n_nodes == 85 and len(tree.leaf_ids) == 16
    tot = sum(path_probability(tree, nid, b) for nid in tree.depth_ids(2))
    ok = ok and abs(tot - 1.0) < 1e-12
    return ok, f"nodes={tree.n_nodes} leaves={len(tree.leaf_ids)} depth-2 mass={tot:.12f}"


def check_worst_case_disturbance(seed=0) -> Tuple[bool, str]:
    import itertools

    rng = np.random.default_rng(seed)
    for _ in range(20):
        n = int(rng.integers(1, 6))
        H = rng.normal(size=n)
        lo = -rng.uniform(0.1, 1.0, size=n)
        hi = rng.uniform(0.1, 1.0, size=n)
        d = S.worst_case_disturbance(H, (lo, hi))
        best = min(
            (H @ np.array(c) for c in itertools.product(*[(l, h) for l, h in zip(lo, hi)])),
        )
        if abs(H @ d - best) > 1e-12:
            return False, f"vertex rule missed the corner minimum by {abs(H @ d - best):.2e}"
    return True, "vertex rule matches exhaustive corner enumeration (20 boxes)"


def check_linearize_fd(seed=0, tol=1e-5) -> Tuple[bool, str]:
    from .dynamics import AgentModel, JointSystem, linearize, step_joint

    rng = np.random.default_rng(seed)
    ego = AgentModel()
    other = AgentModel(kind="unicycle-4D", control_bounds=(np.array([-1.5, -1.5]), np.array([1.5, 1.5])))
    sys = JointSystem(ego, (other,), (-0.3 * np.ones(8), 0.3 * np.ones(8)), 0.01 * np.eye(8))
    worst = 0.0
    for _ in range(5):
        x = rng.normal(size=8)
        x[2] = rng.uniform(-1.0, 1.0)
        x[6] = rng.uniform(-1.0, 1.0)
        A, _, _ = linearize(sys, x)
        h = 1e-6
        A_fd = np.zeros((8, 8))
        for j in range(8):
            e = np.eye(8)[j] * h
            A_fd[:, j] = (
                step_joint(sys, x + e, np.zeros(2), np.zeros(2), np.zeros(8))
                - step_joint(sys, x - e, np.zeros(2), np.zeros(2), np.zeros(8))
            ) / (2 * h)
        worst = max(worst, float(np.max(np.abs(A - A_fd))))
    return worst < tol, f"max |A - A_fd| = {worst:.2e} (tol {tol})"


def check_solver_gradient(seed=0, tol=1e-5) -> Tuple[bool, str]:
    import jax
    import jax.numpy as jnp

    rng = np.random.default_rng(seed)
    n = 6
    A = rng.normal(size=(n, n))
    Q = A @ A.T + np.eye(n)
    b = rng.normal(size=n)

    def f(u):
        return 0.5 * u @ (jnp.asarray(Q) @ u) + jnp.asarray(b) @ u + jnp.sum(jnp.sin(u) ** 2)

    vg = jax.value_and_grad(f)
    u0 = rng.normal(size=n)
    _, g = vg(jnp.asarray(u0))
    g = np.asarray(g)
    h = 1e-6
    g_fd = np.array(
        [(float(f(jnp.asarray(u0 + np.eye(n)[i] * h))) - float(f(jnp.asarray(u0 - np.eye(n)[i] * h)))) / (2 * h) for i in range(n)]
    )
    rel = np.max(np.abs(g - g_fd)) / max(np.max(np.abs(g_fd)), 1e-12)
    return rel < tol, f"autodiff vs central FD rel err = {rel:.2e} (tol {tol})"


CHECKS: List[Tuple[str, Callable[[], Tuple[bool, str]]]] = [
    ("belief grid-Bayes oracle", check_belief_grid_oracle),
    ("Laplace vs FD Hessian", check_laplace_fd),
    ("tree combinatorics", check_tree_counts),
    ("worst-case disturbance vertex rule", check_worst_case_disturbance),
    ("linearization vs FD", check_linearize_fd),
    ("gradient vs FD", check_solver_gradient),
]


def run_selftest(verbose: bool = True) -> bool:
    all_ok = True
    for name, fn in CHECKS:
        try:
            ok, msg = fn()
        except Exception as exc:  # a crashed check is a failed check
            ok, msg = False, f"raised {type(exc).__name__}: {exc}"
        all_ok &= ok
        if verbose:
            print(f"[{'PASS' if ok else 'FAIL'}] {name}: {msg}")
    return all_ok
