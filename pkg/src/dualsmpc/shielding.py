"""Safe-set machinery: fallback policy, safety filter, RCBF constraints.

The safe set is implicit, in model-predictive-shielding style: a state is
considered safe when rolling out the braking-plus-lane-hold fallback for a
fixed horizon keeps the (margin-inflated) failure set avoided against
vertex opponent actions and adversarial vertex disturbances.  The filter
overrides a nominal control only when its one-step successor could leave
that region.

For planning, predicted shielding events are turned into local affine
constraints: a halfspace safe-set approximation from consecutive nominal
states, with the worst-case disturbance vertex folded in.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from .dynamics import FailureSet, JointSystem
from .errors import DegenerateNormalError, InvalidArgumentError


@dataclass(frozen=True)
class HalfspaceSafeSet:
    """Local halfspace {dx : H' dx >= 0} anchored at a nominal state."""

    H: np.ndarray
    anchor: np.ndarray


@dataclass(frozen=True)
class ShieldConstraintData:
    """Everything the planner needs to impose one RCBF constraint."""

    node_id: int
    H: np.ndarray
    A: np.ndarray
    B_e: np.ndarray
    B_o: np.ndarray
    d_star: np.ndarray
    x_bar: np.ndarray


@dataclass(frozen=True)
class ShieldingMechanism:
    """Fallback policy plus the data needed to certify safe-set membership."""

    fallback: Callable[[np.ndarray], np.ndarray]
    fallback_batch: Callable[[np.ndarray], np.ndarray]
    failure: FailureSet
    disturbance_bounds: Tuple[np.ndarray, np.ndarray]
    rollout_horizon: int = 20
    margin: float = 1.0

    def __post_init__(self):
        if self.rollout_horizon < 1:
            raise InvalidArgumentError("rollout_horizon must be >= 1")

    @property
    def disturbance_vertices(self) -> np.ndarray:
        lo, hi = self.disturbance_bounds
        cols = [(l, h) for l, h in zip(lo, hi)]
        return np.array(list(itertools.product(*cols)))


def braking_shield(
    sys: JointSystem,
    failure: FailureSet,
    lane_centers=(0.0,),
    rollout_horizon: int = 20,
    margin: float = 1.0,
    k_y: float = 0.12,
    k_psi: float = 1.6,
) -> ShieldingMechanism:
    """Max-braking, lane-holding fallback for a 4D ego vehicle."""
    lo, hi = sys.ego.control_bounds
    a_min = lo[0]
    dt = sys.dt
    lanes = np.asarray(lane_centers, dtype=float)

    def batch(X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        py, psi, v = X[:, 1], X[:, 2], X[:, 3]
        # Brake hard but never command reverse motion.
        a = np.maximum(a_min, -v / dt)
        a = np.where(v <= 1e-9, 0.0, a)
        nearest = lanes[np.argmin(np.abs(py[:, None] - lanes[None, :]), axis=1)]
        steer = k_y * (nearest - py) / np.maximum(v, 1.0) - k_psi * psi
        U = np.stack([a, steer], axis=1)
        return np.clip(U, lo, hi)

    def single(x: np.ndarray) -> np.ndarray:
        return batch(np.asarray(x, dtype=float)[None, :])[0]

    return ShieldingMechanism(
        fallback=single,
        fallback_batch=batch,
        failure=failure,
        disturbance_bounds=sys.disturbance_bounds,
        rollout_horizon=rollout_horizon,
        margin=margin,
    )


def fallback_policy(sh: ShieldingMechanism, x) -> np.ndarray:
    """Evaluate the fallback control at a joint state."""
    return sh.fallback(np.asarray(x, dtype=float))


# -- vectorized joint-system stepping (numpy fast path) ---------------------


def _np_batch_step(sys: JointSystem, X, Ue, Uo, D):
    """Euler step of [B, n] joint states; built-in 4D agent kinds only."""
    B = X.shape[0]
    out = np.empty_like(X)
    dt = sys.dt
    col = 0
    for i, agent in enumerate(sys.agents):
        sl = sys.agent_slice(i)
        xa = X[:, sl]
        if i == 0:
            U = Ue
        else:
            U = Uo[:, col : col + agent.control_dim]
            col += agent.control_dim
        px, py, psi, v = xa[:, 0], xa[:, 1], xa[:, 2], xa[:, 3]
        if agent.kind == "kinematic-bicycle-4D":
            dpsi = dt * v / agent.wheelbase * U[:, 1]
        elif agent.kind == "unicycle-4D":
            dpsi = dt * U[:, 1]
        else:
            raise InvalidArgumentError("batch stepping supports built-in agent kinds only")
        nxt = np.stack(
            [px + dt * v * np.cos(psi), py + dt * v * np.sin(psi), psi + dpsi, v + dt * U[:, 0]],
            axis=1,
        )
        out[:, sl] = nxt
    out += D
    h = list(sys.heading_indices)
    out[:, h] = out[:, h] - 2.0 * np.pi * np.ceil((out[:, h] - np.pi) / (2.0 * np.pi))
    return out


def _np_batch_linearize(sys: JointSystem, X):
    """Analytic (A, B_e, B_o) for a batch of states; built-in kinds only."""
    B = X.shape[0]
    n, m_e, m_o = sys.n, sys.m_e, sys.m_o
    A = np.zeros((B, n, n))
    Be = np.zeros((B, n, m_e))
    Bo = np.zeros((B, n, m_o))
    dt = sys.dt
    col = 0
    for i, agent in enumerate(sys.agents):
        sl = sys.agent_slice(i)
        o = sl.start
        psi, v = X[:, o + 2], X[:, o + 3]
        A[:, o + 0, o + 0] = 1.0
        A[:, o + 1, o + 1] = 1.0
        A[:, o + 2, o + 2] = 1.0
        A[:, o + 3, o + 3] = 1.0
        A[:, o + 0, o + 2] = -dt * v * np.sin(psi)
        A[:, o + 0, o + 3] = dt * np.cos(psi)
        A[:, o + 1, o + 2] = dt * v * np.cos(psi)
        A[:, o + 1, o + 3] = dt * np.sin(psi)
        steer_row = dt * v / agent.wheelbase if agent.kind == "kinematic-bicycle-4D" else dt
        if i == 0:
            Be[:, o + 3, 0] = dt
            Be[:, o + 2, 1] = steer_row
        else:
            Bo[:, o + 3, col + 0] = dt
            Bo[:, o + 2, col + 1] = steer_row
            col += agent.control_dim
    return A, Be, Bo


def _separation(sys: JointSystem, X) -> np.ndarray:
    """Min ego-to-other distance per row of [B, n]."""
    pe = X[:, list(sys.ego_position_indices)]
    d = np.full(X.shape[0], np.inf)
    for idx in sys.other_position_indices:
        d = np.minimum(d, np.hypot(*(pe - X[:, list(idx)]).T))
    return d


def _greedy_disturbance(sys: JointSystem, X) -> np.ndarray:
    """Per-coordinate disturbance vertex that shrinks future separation.

    Scores each state coordinate by its effect on the ego-to-nearest-other
    distance one drift step ahead and picks the corner of the disturbance
    box that minimizes it.
    """
    lo, hi = sys.disturbance_bounds
    B = X.shape[0]
    dt = sys.dt
    grad = np.zeros_like(X)

    def ahead(block):
        px, py, psi, v = block.T
        return np.stack([px + dt * v * np.cos(psi), py + dt * v * np.sin(psi)], axis=1), psi, v

    pe1, psi_e, v_e = ahead(X[:, 0:4])
    slices = [sys.agent_slice(i) for i in range(1, len(sys.agents))]
    po1_all = np.stack([ahead(X[:, sl])[0] for sl in slices])  # [n_others, B, 2]
    dists = np.linalg.norm(pe1[None] - po1_all, axis=2)  # [n_others, B]
    k = np.argmin(dists, axis=0)  # nearest other per row
    rows = np.arange(B)
    nearest = po1_all[k, rows]
    best = dists[k, rows]
    u = (pe1 - nearest) / np.maximum(best, 1e-9)[:, None]  # d(sep)/d(ego pos ahead)
    # Chain rule back to current coordinates; ego block first.
    grad[:, 0] += u[:, 0]
    grad[:, 1] += u[:, 1]
    grad[:, 2] += dt * v_e * (-np.sin(psi_e) * u[:, 0] + np.cos(psi_e) * u[:, 1])
    grad[:, 3] += dt * (np.cos(psi_e) * u[:, 0] + np.sin(psi_e) * u[:, 1])
    for j, sl in enumerate(slices):
        m = k == j
        if not np.any(m):
            continue
        psi_o, v_o = X[:, sl.start + 2], X[:, sl.start + 3]
        grad[m, sl.start + 0] -= u[m, 0]
        grad[m, sl.start + 1] -= u[m, 1]
        grad[m, sl.start + 2] -= dt * v_o[m] * (-np.sin(psi_o[m]) * u[m, 0] + np.cos(psi_o[m]) * u[m, 1])
        grad[m, sl.start + 3] -= dt * (np.cos(psi_o[m]) * u[m, 0] + np.sin(psi_o[m]) * u[m, 1])
    # The adversary minimizes separation: descend its gradient to a vertex.
    return np.where(grad > 0.0, lo[None, :], hi[None, :])


def _opponent_corners(sys: JointSystem) -> np.ndarray:
    lo, hi = sys.other_control_bounds
    cols = [(l, h) for l, h in zip(lo, hi)]
    return np.array(list(itertools.product(*cols)))


def _rollout_unsafe(sh: ShieldingMechanism, sys: JointSystem, X, Uo) -> np.ndarray:
    """Roll the fallback from each row of X against its paired opponent
    corner; True where the inflated failure set is hit."""
    thresh = sh.failure.collision_radius + sh.margin
    unsafe = _separation(sys, X) < thresh
    Xk = X.copy()
    for _ in range(sh.rollout_horizon):
        Ue = sh.fallback_batch(Xk)
        D = _greedy_disturbance(sys, Xk)
        Xk = _np_batch_step(sys, Xk, Ue, Uo, D)
        unsafe |= _separation(sys, Xk) < thresh
    return unsafe


def _states_safe(sh: ShieldingMechanism, sys: JointSystem, X) -> np.ndarray:
    """Membership of the implicit safe set for a batch of states."""
    corners = _opponent_corners(sys)
    C = corners.shape[0]
    B = X.shape[0]
    Xr = np.repeat(X, C, axis=0)
    Uo = np.tile(corners, (B, 1))
    unsafe = _rollout_unsafe(sh, sys, Xr, Uo).reshape(B, C)
    return ~np.any(unsafe, axis=1)


def in_shielding_set(sh: ShieldingMechanism, sys: JointSystem, x, u_e) -> bool:
    """True when applying u_e at x could leave the implicit safe set.

    Checks every opponent control vertex: one step with the candidate
    control (adversarial disturbance vertex), then a fallback rollout
    holding that vertex.
    """
    x = np.asarray(x, dtype=float)
    u_e = np.asarray(u_e, dtype=float)
    corners = _opponent_corners(sys)
    C = corners.shape[0]
    X = np.tile(x, (C, 1))
    D = _greedy_disturbance(sys, X)
    X1 = _np_batch_step(sys, X, np.tile(u_e, (C, 1)), corners, D)
    return bool(np.any(_rollout_unsafe(sh, sys, X1, corners)))


def safety_filter(
    sh: ShieldingMechanism, sys: JointSystem, x, u_nominal
) -> Tuple[np.ndarray, bool]:
    """Least-restrictive supervisor: pass the nominal through unless its
    successor could leave the safe set, then brake."""
    u_nominal = np.asarray(u_nominal, dtype=float)
    if in_shielding_set(sh, sys, x, u_nominal):
        return sh.fallback(np.asarray(x, dtype=float)), True
    return u_nominal, False


def local_halfspace(x_bar_next, x_bar) -> HalfspaceSafeSet:
    """Halfspace normal from consecutive nominal states: H = x+ - x."""
    x_bar_next = np.asarray(x_bar_next, dtype=float)
    x_bar = np.asarray(x_bar, dtype=float)
    H = x_bar_next - x_bar
    if np.linalg.norm(H) < 1e-9:
        raise DegenerateNormalError("nominal trajectory is stationary; no normal direction")
    return HalfspaceSafeSet(H=H, anchor=x_bar.copy())


def worst_case_disturbance(H, bounds) -> np.ndarray:
    """Vertex of the disturbance box minimizing H' d (ties take the min side)."""
    H = np.asarray(H, dtype=float)
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    return np.where(H >= 0.0, lo, hi)


def rcbf_value(hs: HalfspaceSafeSet, A, B_e, B_o, gamma, delta_x, u_e, u_o, d_star) -> float:
    """Exponential RCBF one-step margin; the constraint is value >= 0."""
    if not (0.0 < gamma <= 1.0):
        raise InvalidArgumentError("gamma must lie in (0, 1]")
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    inner = (
        (A + (gamma - 1.0) * np.eye(n)) @ np.asarray(delta_x, dtype=float)
        + np.asarray(B_e, dtype=float) @ np.asarray(u_e, dtype=float)
        + np.asarray(B_o, dtype=float) @ np.asarray(u_o, dtype=float)
        + np.asarray(d_star, dtype=float)
    )
    return float(np.asarray(hs.H) @ inner)


def identify_shielding_nodes(
    prev_tree_solution, tree, sh: ShieldingMechanism, sys: JointSystem
) -> Dict[int, ShieldConstraintData]:
    """One-step screen of the previous plan for future shielding events.

    Pairs the previous solution's nodes with the new tree's nodes (same
    deterministic layout), forward-simulates each non-leaf node one step
    with its own optimized quantities, and returns RCBF constraint data
    for every node whose successor leaves the implicit safe set.  Returns
    the empty set (with a warning) on the first cycle or on any shape
    mismatch.
    """
    if prev_tree_solution is None:
        return {}
    if prev_tree_solution.shape_signature != tree.shape_signature():
        warnings.warn("previous solution shape differs from the new tree; skipping", RuntimeWarning)
        return {}

    states = prev_tree_solution.states
    u_e = prev_tree_solution.u_e_by_node
    u_o_in = prev_tree_solution.u_o_in
    dbar_in = prev_tree_solution.dbar_in
    nonleaf = [n for n in tree.nodes if n.child_ids]
    ids = [n.id for n in nonleaf]
    X = states[ids]
    Ue = u_e[ids]
    # Each node reuses its incoming opponent action/disturbance sample;
    # the root has none, so it borrows its first child's.
    Uo = np.stack([u_o_in[i] if tree.nodes[i].parent_id is not None else u_o_in[tree.nodes[i].child_ids[0]] for i in ids])
    Db = np.stack([dbar_in[i] if tree.nodes[i].parent_id is not None else dbar_in[tree.nodes[i].child_ids[0]] for i in ids])
    X_next = _np_batch_step(sys, X, Ue, Uo, Db)
    safe = _states_safe(sh, sys, X_next)
    flagged = [node for row, node in enumerate(nonleaf) if not safe[row]]
    if not flagged:
        return {}
    A_all, Be_all, Bo_all = _np_batch_linearize(sys, states[[n.id for n in flagged]])

    out: Dict[int, ShieldConstraintData] = {}
    for row, node in enumerate(flagged):
        x_bar = states[node.id]
        x_bar_next = states[node.child_ids[0]]
        try:
            hs = local_halfspace(x_bar_next, x_bar)
        except DegenerateNormalError:
            warnings.warn(f"stationary nominal at node {node.id}; skipping", RuntimeWarning)
            continue
        d_star = worst_case_disturbance(hs.H, sys.disturbance_bounds)
        tree.nodes[node.id].is_shielding = True
        out[node.id] = ShieldConstraintData(
            node_id=node.id,
            H=hs.H,
            A=A_all[row],
            B_e=Be_all[row],
            B_o=Bo_all[row],
            d_star=d_star,
            x_bar=x_bar,
        )
    return out
