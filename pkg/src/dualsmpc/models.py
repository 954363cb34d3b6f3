"""Built-in behavior models, declared in configs by name.

Every basis Q value is a sum of diagonal quadratics in the other agent's
control, so maximizers and Hessians are closed-form: the quadratic centers
blend a lane/goal tracking action with an avoidance action through a
smooth proximity gate.  The gate looks at positions a short time ahead,
which is where the ego's control enters and what gives the inference its
dual-control hook.

All reference actions are squashed into the interior of the control box
(tanh), so predicted mean actions never need projection in the planner.

Weight tables (``params``) are plain dicts so configs can override any
entry; see ``DEFAULT_CAR_PARAMS`` / ``DEFAULT_PED_PARAMS``.
"""

from __future__ import annotations

from typing import Dict, Mapping, Optional, Sequence, Tuple

import jax.numpy as jnp
import numpy as np

from .behavior import BehaviorModel, QValueFunction
from .dynamics import JointSystem, wrap_angle
from .errors import InvalidArgumentError

DEFAULT_CAR_PARAMS: Dict[str, float] = {
    "k_v": 1.2,          # speed tracking gain
    "k_y": 0.12,         # lateral lane gain
    "k_psi": 1.6,        # heading alignment gain
    "v_eps": 1.0,        # lateral gain regularizer at low speed
    "w_accel": 2.0,      # tracking quadratic weight, accel
    "w_steer": 60.0,     # tracking quadratic weight, steering
    "w_avoid": 6.0,      # avoidance quadratic scale at gate = 1
    "w2_accel": 3.0,
    "w2_steer": 80.0,
    "sigma_avoid": 5.0,  # proximity gate length scale [m]
    "lookahead": 1.0,    # prediction horizon for the gate [s]
    "brake": -3.0,       # avoidance longitudinal action
    "swerve": 0.35,      # avoidance steering saturation [rad]
    "swerve_gain": 0.8,
    "clip_margin": 0.95,
}

DEFAULT_PED_PARAMS: Dict[str, float] = {
    "k_v": 1.5,
    "k_psi": 2.0,
    "w_accel": 4.0,
    "w_turn": 4.0,
    "w_avoid": 8.0,
    "w2_accel": 6.0,
    "w2_turn": 2.0,
    "sigma_avoid": 3.0,
    "lookahead": 1.0,
    "brake": -1.2,
    "v_walk_coop": 1.0,
    "v_walk_solo": 1.4,
    "clip_margin": 0.95,
}


def _soft_clip(u, lo, hi, margin):
    """Squash into the interior of [lo, hi], smooth everywhere."""
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo) * margin
    return center + half * jnp.tanh((u - center) / half)


def _blend_q(u_ref_fn, u_av_fn, gate_fn, W, W2, m):
    """Q(u) = -1/2 (u-ref)' W (u-ref) - g/2 (u-av)' W2 (u-av), closed forms."""
    W = jnp.asarray(W)
    W2 = jnp.asarray(W2)

    def evaluator(u, x, u_e):
        r = u - u_ref_fn(x, u_e)
        a = u - u_av_fn(x, u_e)
        g = gate_fn(x, u_e)
        return -0.5 * r @ (W * r) - 0.5 * g * (a @ (W2 * a))

    def argmax(x, u_e):
        g = gate_fn(x, u_e)
        denom = W + g * W2
        return (W * u_ref_fn(x, u_e) + g * W2 * u_av_fn(x, u_e)) / denom

    def hessian(x, u_e):
        g = gate_fn(x, u_e)
        return -jnp.diag(W + g * W2)

    return QValueFunction(
        evaluator=evaluator, control_dim=m, analytic_argmax=argmax, analytic_hessian=hessian
    )


def _pure_tracking_q(u_ref_fn, W, m):
    W = jnp.asarray(W)

    def evaluator(u, x, u_e):
        r = u - u_ref_fn(x, u_e)
        return -0.5 * r @ (W * r)

    def argmax(x, u_e):
        return u_ref_fn(x, u_e)

    def hessian(x, u_e):
        return -jnp.diag(W)

    return QValueFunction(
        evaluator=evaluator, control_dim=m, analytic_argmax=argmax, analytic_hessian=hessian
    )


def _car_lane_model(
    sys: JointSystem,
    other_index: int,
    mode_lanes: Mapping[str, float],
    v_ref: float,
    params: Optional[Mapping[str, float]],
    ego_aware: bool,
    theta_bar: Optional[Mapping[str, Sequence[float]]],
) -> BehaviorModel:
    """Two-basis lane model: basis 0 tracks a lane, basis 1 also avoids the ego."""
    p = dict(DEFAULT_CAR_PARAMS)
    if params:
        p.update(params)
    agent = sys.others[other_index]
    sl = sys.agent_slice(other_index + 1)
    o0 = sl.start
    lo, hi = (jnp.asarray(b) for b in agent.control_bounds)
    elo, ehi = (jnp.asarray(b) for b in sys.ego.control_bounds)
    dt = sys.dt
    L_e = sys.ego.wheelbase

    def u_ref_fn(lane_y):
        def fn(x, u_e):
            py, psi, v = x[o0 + 1], x[o0 + 2], x[o0 + 3]
            a = p["k_v"] * (v_ref - v)
            s = p["k_y"] * (lane_y - py) / jnp.maximum(v, p["v_eps"]) - p["k_psi"] * psi
            return _soft_clip(jnp.stack([a, s]), lo, hi, p["clip_margin"])

        return fn

    tau = p["lookahead"]

    def ego_pred(x, u_e):
        # Ego position a short time ahead; the control enters through the
        # post-step speed and heading, which is the dual-control hook.
        pe = x[0:2]
        psi, v = x[2], x[3]
        if ego_aware:
            v1 = v + dt * u_e[0]
            psi1 = psi + dt * (v / L_e) * u_e[1]
        else:
            v1, psi1 = v, psi
        return pe + tau * v1 * jnp.stack([jnp.cos(psi1), jnp.sin(psi1)])

    def gate_fn(x, u_e):
        po = x[o0 : o0 + 2] + tau * x[o0 + 3] * jnp.stack(
            [jnp.cos(x[o0 + 2]), jnp.sin(x[o0 + 2])]
        )
        rho2 = jnp.sum((po - ego_pred(x, u_e)) ** 2)
        return p["w_avoid"] * jnp.exp(-rho2 / (2.0 * p["sigma_avoid"] ** 2))

    def u_av_fn(x, u_e):
        away = p["swerve"] * jnp.tanh(
            p["swerve_gain"] * (x[o0 + 1] - ego_pred(x, u_e)[1])
        )
        return _soft_clip(jnp.stack([p["brake"] + 0.0, away]), lo, hi, p["clip_margin"])

    W = np.array([p["w_accel"], p["w_steer"]])
    W2 = np.array([p["w2_accel"], p["w2_steer"]])
    basis_q = {}
    for mode, lane_y in mode_lanes.items():
        ref = u_ref_fn(lane_y)
        basis_q[(mode, 0)] = _pure_tracking_q(ref, W, agent.control_dim)
        basis_q[(mode, 1)] = _blend_q(ref, u_av_fn, gate_fn, W, W2, agent.control_dim)
    tb = {m: np.array([0.5, 0.5]) for m in mode_lanes}
    if theta_bar:
        tb.update({m: np.asarray(v, dtype=float) for m, v in theta_bar.items()})
    return BehaviorModel(modes=tuple(mode_lanes), n_theta=2, basis_q=basis_q, theta_bar=tb)


def highway_distraction_model(
    sys: JointSystem,
    other_index: int = 0,
    lane_centers: Tuple[float, float] = (0.0, 3.7),
    v_ref: float = 8.0,
    params: Optional[Mapping[str, float]] = None,
    ego_aware: bool = True,
    theta_bar: Optional[Mapping[str, Sequence[float]]] = None,
) -> BehaviorModel:
    """Highway driver with lane-preference modes {l, r}.

    theta = (distraction, focus): the distracted basis only tracks the
    preferred lane; the focused basis additionally avoids the ego.
    ``ego_aware=False`` removes the ego control from the proximity gate,
    which removes the direct dual-control channel (used by ablations).
    """
    right, left = lane_centers
    return _car_lane_model(
        sys, other_index, {"l": left, "r": right}, v_ref, params, ego_aware, theta_bar
    )


def overtake_yield_model(
    sys: JointSystem,
    other_index: int = 0,
    own_lane: float = 0.0,
    yield_lane: float = 3.7,
    v_ref: float = 6.0,
    params: Optional[Mapping[str, float]] = None,
    ego_aware: bool = True,
    theta_bar: Optional[Mapping[str, Sequence[float]]] = None,
) -> BehaviorModel:
    """Peer vehicle that may yield (Y: move to yield_lane) or not (NY).

    theta = (tracking, safety) mirrors the highway model's basis split.
    """
    return _car_lane_model(
        sys, other_index, {"Y": yield_lane, "NY": own_lane}, v_ref, params, ego_aware, theta_bar
    )


def intersection_cooperation_model(
    sys: JointSystem,
    other_index: int = 0,
    goal: Tuple[float, float] = (0.0, 6.0),
    params: Optional[Mapping[str, float]] = None,
    theta_bar: Optional[Mapping[str, Sequence[float]]] = None,
) -> BehaviorModel:
    """Crossing pedestrian with game-theoretic interaction modes.

    Modes select what the pedestrian assumes about the ego's action when
    weighing its yielding behavior: "N" uses the ego action that the
    caller supplies (in closed loop that is the ego's previously planned
    action), "p" assumes the most threatening ego action from a coarse
    3 x 3 control grid, "w" the least threatening one, and "o" ignores
    the ego.  theta = (cooperative, non-cooperative) blends a yielding
    goal-tracker with a faster non-yielding one.
    """
    p = dict(DEFAULT_PED_PARAMS)
    if params:
        p.update(params)
    agent = sys.others[other_index]
    sl = sys.agent_slice(other_index + 1)
    o0 = sl.start
    lo, hi = (jnp.asarray(b) for b in agent.control_bounds)
    dt = sys.dt
    L_e = sys.ego.wheelbase
    gx, gy = goal
    tau = p["lookahead"]

    elo, ehi = sys.ego.control_bounds
    grid = np.stack(
        [
            np.array([a, s])
            for a in np.linspace(elo[0], ehi[0], 3)
            for s in np.linspace(elo[1], ehi[1], 3)
        ]
    )

    def u_ref_fn(v_walk):
        def fn(x, u_e):
            px, py, psi, v = x[o0], x[o0 + 1], x[o0 + 2], x[o0 + 3]
            psi_d = jnp.arctan2(gy - py, gx - px)
            a = p["k_v"] * (v_walk - v)
            w = p["k_psi"] * wrap_angle(psi_d - psi)
            return _soft_clip(jnp.stack([a, w]), lo, hi, p["clip_margin"])

        return fn

    def ego_pred(x, u_e):
        pe = x[0:2]
        psi, v = x[2], x[3]
        v1 = v + dt * u_e[0]
        psi1 = psi + dt * (v / L_e) * u_e[1]
        return pe + tau * v1 * jnp.stack([jnp.cos(psi1), jnp.sin(psi1)])

    def raw_gate(x, u_e):
        po = x[o0 : o0 + 2] + tau * x[o0 + 3] * jnp.stack(
            [jnp.cos(x[o0 + 2]), jnp.sin(x[o0 + 2])]
        )
        rho2 = jnp.sum((po - ego_pred(x, u_e)) ** 2)
        return p["w_avoid"] * jnp.exp(-rho2 / (2.0 * p["sigma_avoid"] ** 2))

    def gate_for(mode):
        if mode == "N":
            return raw_gate
        if mode == "p":
            return lambda x, u_e: jnp.max(
                jnp.stack([raw_gate(x, jnp.asarray(c)) for c in grid])
            )
        if mode == "w":
            return lambda x, u_e: jnp.min(
                jnp.stack([raw_gate(x, jnp.asarray(c)) for c in grid])
            )
        return lambda x, u_e: jnp.zeros(())  # oblivious

    def u_av_fn(x, u_e):
        return _soft_clip(jnp.stack([p["brake"] + 0.0, 0.0 + 0.0]), lo, hi, p["clip_margin"])

    W = np.array([p["w_accel"], p["w_turn"]])
    W2 = np.array([p["w2_accel"], p["w2_turn"]])
    ref_coop = u_ref_fn(p["v_walk_coop"])
    ref_solo = u_ref_fn(p["v_walk_solo"])
    basis_q = {}
    for mode in ("N", "p", "w", "o"):
        basis_q[(mode, 0)] = _blend_q(ref_coop, u_av_fn, gate_for(mode), W, W2, agent.control_dim)
        basis_q[(mode, 1)] = _pure_tracking_q(ref_solo, W, agent.control_dim)
    tb = {m: np.array([0.5, 0.5]) for m in ("N", "p", "w", "o")}
    if theta_bar:
        tb.update({m: np.asarray(v, dtype=float) for m, v in theta_bar.items()})
    return BehaviorModel(modes=("N", "p", "w", "o"), n_theta=2, basis_q=basis_q, theta_bar=tb)


_FOREIGN_CURVATURE = 1e6  # foreign-block stiffness in composite bases


def composite_model(models: Sequence[BehaviorModel], control_dims: Sequence[int]) -> BehaviorModel:
    """Join per-agent models into one model over the concatenated control.

    Joint modes are tuples of per-agent modes; the joint weight vector is
    the concatenation of the per-agent ones.  A joint basis acts on its
    agent's control block and pins the foreign blocks with a stiff
    quadratic, so its rational action is the block-extended per-agent one
    and its covariance is near-degenerate off-block.
    """
    if len(models) != len(control_dims):
        raise InvalidArgumentError("one control dim per model required")
    m_total = int(sum(control_dims))
    offsets = np.concatenate([[0], np.cumsum(control_dims)]).astype(int)

    import itertools

    joint_modes = tuple(itertools.product(*[m.modes for m in models]))
    n_theta = sum(m.n_theta for m in models)

    def lift(q: QValueFunction, a: int) -> QValueFunction:
        s, e = int(offsets[a]), int(offsets[a + 1])

        def evaluator(u, x, u_e):
            blk = u[s:e]
            foreign = jnp.sum(u**2) - jnp.sum(blk**2)
            return q.evaluator(blk, x, u_e) - 0.5 * _FOREIGN_CURVATURE * foreign

        def argmax(x, u_e):
            base = (
                q.analytic_argmax(x, u_e)
                if q.analytic_argmax is not None
                else None
            )
            if base is None:
                from .behavior import _newton_argmax_fixed

                base = _newton_argmax_fixed(q.evaluator, x, u_e, q.control_dim)
            return jnp.zeros(m_total).at[s:e].set(base)

        def hessian(x, u_e):
            if q.analytic_hessian is not None:
                Hb = q.analytic_hessian(x, u_e)
            else:
                import jax

                Hb = jax.hessian(q.evaluator, argnums=0)(argmax(x, u_e)[s:e], x, u_e)
            H = -_FOREIGN_CURVATURE * jnp.eye(m_total)
            return H.at[s:e, s:e].set(Hb)

        return QValueFunction(
            evaluator=evaluator,
            control_dim=m_total,
            analytic_argmax=argmax,
            analytic_hessian=hessian,
        )

    basis_q = {}
    theta_bar = {}
    for jm in joint_modes:
        i_glob = 0
        tb_parts = []
        for a, (model, mode_a) in enumerate(zip(models, jm)):
            for i in range(model.n_theta):
                basis_q[(jm, i_glob)] = lift(model.basis_q[(mode_a, i)], a)
                i_glob += 1
            tb_parts.append(model.theta_bar[mode_a])
        theta_bar[jm] = np.concatenate(tb_parts)
    return BehaviorModel(modes=joint_modes, n_theta=n_theta, basis_q=basis_q, theta_bar=theta_bar)


MODEL_BUILDERS = {
    "highway-distraction": highway_distraction_model,
    "overtake-yield": overtake_yield_model,
    "intersection-cooperation": intersection_cooperation_model,
}
