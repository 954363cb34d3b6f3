"""Closed-loop harness: plan, filter, step, infer, log.

Each episode loops the full stack: build a scenario tree and plan, pass
the nominal control through the safety filter (when shielded), step the
true joint system with the ground-truth opponent's action and a bounded
disturbance sample, then update the belief from the observed transition.
Everything is deterministic given the scenario seed.

Ground-truth opponents are optimization-based and deliberately do not
share anything with the prediction model the planner uses: cars run a
short-horizon tracking MPC with a collision-avoidance cost against the
ego's constant-velocity extrapolation, and yield to a nearby ego with a
randomized probability after a randomized reaction delay.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import jax
import jax.numpy as jnp
import numpy as np

from .behavior import BehaviorModel
from .belief import BeliefState, TransitionModel, update, update_fast
from .dynamics import AgentModel, FailureSet, JointSystem, step_joint, wrap_angle
from .errors import InvalidArgumentError
from .models import (
    composite_model,
    highway_distraction_model,
    intersection_cooperation_model,
)
from .planner import (
    CostSpec,
    PlannerConfig,
    PlannerVariant,
    ReferenceSpec,
    plan,
)
from .shielding import ShieldingMechanism, braking_shield, safety_filter

SCENARIOS = ("highway-overtake", "intersection", "multi-agent-intersection", "replay")


@dataclass
class ScenarioConfig:
    """Ground-truth scenario description plus planner tuning."""

    scenario: str = "highway-overtake"
    T_sim: int = 40
    seed: int = 0
    shielded: Optional[bool] = None  # None: shields exactly the SHARP variants

    # Initial conditions (ego first); jitter is uniform on +-value, applied
    # to the longitudinal position and speed of every agent.
    ego_x0: Sequence[float] = (0.0, 0.0, 0.0, 10.0)
    others_x0: Sequence[Sequence[float]] = ((16.0, 0.0, 0.0, 6.0),)
    x0_jitter: float = 1.0

    # Geometry / safety.
    lane_centers: Sequence[float] = (0.0, 3.7)
    corridor_halfwidth: float = 3.7
    collision_radius: float = 1.8
    shield_margin: float = 0.4
    shield_rollout_horizon: int = 10

    # Agent actuation limits.
    ego_accel_bounds: Tuple[float, float] = (-5.0, 3.0)
    ego_steer_bound: float = 0.5
    other_accel_bounds: Tuple[float, float] = (-3.0, 2.0)
    other_steer_bound: float = 0.05

    # Ego task.
    v_ref_ego: float = 10.0
    ego_lane: float = 0.0

    # Ground-truth opponent policy.
    v_ref_other: float = 6.0
    detect_radius: float = 18.0
    reaction_delay: Tuple[float, float] = (0.4, 1.6)  # seconds, uniform
    yield_probability: float = 0.5
    avoid_weight_range: Tuple[float, float] = (20.0, 60.0)
    lane_switch_window: Optional[Tuple[float, float]] = None  # scripted flip [s]
    initial_other_lane: Optional[float] = None  # defaults to first lane center

    # Pedestrian (intersection scenarios).
    ped_goal: Tuple[float, float] = (24.0, 8.0)
    ped_walk_speed: float = 1.2

    # Beliefs.
    mode_prior: Optional[Sequence[float]] = None  # None: uniform
    theta_prior_mean: Sequence[float] = (0.5, 0.5)
    theta_prior_cov: float = 1.0
    stickiness: float = 0.05
    theta_process_noise: float = 1e-4

    # Disturbances: per-agent diagonal [pos, pos, heading, speed] variances.
    sigma_d_diag: Sequence[float] = (2.5e-5, 2.5e-5, 1e-5, 4e-4)
    disturbance_sigma_mult: float = 3.0  # box = +- mult * sigma

    # Replay.
    replay_trace: Optional[str] = None

    # Planner overrides (merged into PlannerConfig).
    planner: Mapping = field(default_factory=dict)
    progress_axis: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise InvalidArgumentError(f"unknown scenario {self.scenario!r}")
        if self.T_sim < 1:
            raise InvalidArgumentError("T_sim must be >= 1")
        for p in (self.yield_probability,):
            if not 0.0 <= p <= 1.0:
                raise InvalidArgumentError("probabilities must lie in [0, 1]")


# --------------------------------------------------------------------------
# Scenario construction


def _car(dt=0.2, accel=(-4.0, 3.0), steer=0.5, wheelbase=2.9) -> AgentModel:
    return AgentModel(
        kind="kinematic-bicycle-4D",
        control_bounds=(np.array([accel[0], -steer]), np.array([accel[1], steer])),
        dt=dt,
        wheelbase=wheelbase,
    )


def _pedestrian(dt=0.2) -> AgentModel:
    return AgentModel(
        kind="unicycle-4D",
        control_bounds=(np.array([-1.5, -1.5]), np.array([1.5, 1.5])),
        dt=dt,
    )


_SCENARIO_CACHE: Dict[Tuple, Tuple] = {}


def _physical_key(cfg: ScenarioConfig) -> Tuple:
    """Fields that determine the physical system and behavior model.

    Episodes differing only in seed, horizon, shielding flag, priors, or
    planner tuning share the same (sys, beh, failure, shield) objects, so
    compiled rollouts are reused across a whole batch.
    """
    return (
        cfg.scenario,
        tuple(cfg.lane_centers),
        float(cfg.corridor_halfwidth),
        float(cfg.collision_radius),
        float(cfg.shield_margin),
        int(cfg.shield_rollout_horizon),
        tuple(cfg.ego_accel_bounds),
        float(cfg.ego_steer_bound),
        tuple(cfg.other_accel_bounds),
        float(cfg.other_steer_bound),
        float(cfg.v_ref_other),
        tuple(cfg.ped_goal),
        tuple(cfg.sigma_d_diag),
        float(cfg.disturbance_sigma_mult),
    )


def build_scenario(cfg: ScenarioConfig):
    """Construct (sys, beh, failure, shield, prior, planner_cfg) for a config."""
    key = _physical_key(cfg)
    if key in _SCENARIO_CACHE:
        sys, beh, failure, shield = _SCENARIO_CACHE[key]
        return (sys, beh, failure, shield) + _episode_parts(cfg, sys, beh, failure, shield)
    sys, beh, failure, shield = _build_physical(cfg)
    _SCENARIO_CACHE[key] = (sys, beh, failure, shield)
    return (sys, beh, failure, shield) + _episode_parts(cfg, sys, beh, failure, shield)


def _build_physical(cfg: ScenarioConfig):
    other_car = _car(accel=tuple(cfg.other_accel_bounds), steer=cfg.other_steer_bound)
    others: List[AgentModel]
    if cfg.scenario in ("highway-overtake", "replay"):
        others = [other_car]
    elif cfg.scenario == "intersection":
        others = [_pedestrian()]
    else:  # multi-agent-intersection
        others = [other_car, _pedestrian()]
    ego = _car(accel=tuple(cfg.ego_accel_bounds), steer=cfg.ego_steer_bound)
    n_agents = 1 + len(others)
    diag = np.tile(np.asarray(cfg.sigma_d_diag, dtype=float), n_agents)
    sigma_d = np.diag(diag)
    half = cfg.disturbance_sigma_mult * np.sqrt(diag)
    sys = JointSystem(
        ego=ego,
        others=tuple(others),
        disturbance_bounds=(-half, half),
        disturbance_covariance=sigma_d,
    )

    lanes = tuple(float(v) for v in cfg.lane_centers)
    mid = 0.5 * (min(lanes) + max(lanes))
    centerline = np.array([[-1e4, mid], [1e4, mid]])
    failure = FailureSet(
        collision_radius=cfg.collision_radius,
        track_bounds=(centerline, cfg.corridor_halfwidth),
    )
    shield = braking_shield(
        sys,
        failure,
        lane_centers=lanes,
        rollout_horizon=cfg.shield_rollout_horizon,
        margin=cfg.shield_margin,
    )

    if cfg.scenario in ("highway-overtake", "replay"):
        beh = highway_distraction_model(
            sys, other_index=0, lane_centers=(lanes[0], lanes[-1]), v_ref=cfg.v_ref_other
        )
        alignment = {"l": lanes[0], "r": lanes[-1]}
    elif cfg.scenario == "intersection":
        beh = intersection_cooperation_model(sys, other_index=0, goal=tuple(cfg.ped_goal))
        alignment = None
    else:
        car_m = highway_distraction_model(
            sys, other_index=0, lane_centers=(lanes[0], lanes[-1]), v_ref=cfg.v_ref_other
        )
        ped_m = intersection_cooperation_model(sys, other_index=1, goal=tuple(cfg.ped_goal))
        beh = composite_model([car_m, ped_m], [2, 2])
        alignment = None

    return sys, beh, failure, shield


def _episode_parts(cfg: ScenarioConfig, sys, beh, failure, shield):
    lanes = tuple(float(v) for v in cfg.lane_centers)
    alignment = (
        {"l": lanes[0], "r": lanes[-1]}
        if cfg.scenario in ("highway-overtake", "replay")
        else None
    )
    pri_modes = beh.modes
    if cfg.mode_prior is None:
        probs = np.full(len(pri_modes), 1.0 / len(pri_modes))
    else:
        probs = np.asarray(cfg.mode_prior, dtype=float)
    mean = np.asarray(cfg.theta_prior_mean, dtype=float)
    if mean.shape != (beh.n_theta,):
        mean = np.full(beh.n_theta, float(np.atleast_1d(cfg.theta_prior_mean)[0]))
    prior = BeliefState(
        modes=pri_modes,
        mode_probs=probs,
        means=np.tile(mean, (len(pri_modes), 1)),
        covs=np.tile(cfg.theta_prior_cov * np.eye(beh.n_theta), (len(pri_modes), 1, 1)),
    )

    pk = dict(cfg.planner)
    pk.setdefault("max_iter", 24)
    pk.setdefault("pre_max_iter", 8)
    pk.setdefault("proj_penalty", 1e3)
    pk.setdefault("kkt_tol", 2e-2)
    pk.setdefault("soft_safety_weight", 25.0)
    pk.setdefault("soft_safety_radius", cfg.collision_radius + 2.0)
    pk.setdefault("corridor_center", 0.5 * (min(cfg.lane_centers) + max(cfg.lane_centers)))
    pk.setdefault("corridor_halfwidth", cfg.corridor_halfwidth)
    cost = CostSpec(
        Q=np.asarray(pk.pop("Q", np.diag([1.0, 2.0, 1.0, 1.0]))),
        Q_F=np.asarray(pk.pop("Q_F", np.diag([2.0, 4.0, 2.0, 2.0]))),
        R=np.asarray(pk.pop("R", np.diag([0.1, 1.0]))),
    )
    reference = ReferenceSpec(lane_y=float(cfg.ego_lane), v_ref=float(cfg.v_ref_ego))
    pcfg = PlannerConfig(
        sys=sys,
        beh=beh,
        cost=cost,
        reference=reference,
        transition=TransitionModel(cfg.stickiness, cfg.theta_process_noise),
        shield=shield,
        alignment_map=alignment,
        seed=cfg.seed,
        **pk,
    )
    return prior, pcfg


# --------------------------------------------------------------------------
# Ground-truth opponents


_OPP_VG_CACHE: Dict[Tuple, object] = {}


def _opponent_vg(kind: str, wheelbase: float, dt: float, H: int, goal_based: bool):
    key = (kind, wheelbase, dt, H, goal_based)
    if key in _OPP_VG_CACHE:
        return _OPP_VG_CACHE[key]

    def objective(U, inp):
        x = inp["x0"]
        U2 = U.reshape(H, 2)
        J = 0.0
        for k in range(H):
            px, py, psi, v = x[0], x[1], x[2], x[3]
            dpsi = dt * v / wheelbase * U2[k, 1] if kind == "kinematic-bicycle-4D" else dt * U2[k, 1]
            x = jnp.stack(
                [px + dt * v * jnp.cos(psi), py + dt * v * jnp.sin(psi), psi + dpsi, v + dt * U2[k, 0]]
            )
            if goal_based:
                psi_ref = jnp.arctan2(inp["goal"][1] - x[1], inp["goal"][0] - x[0])
                J = J + 2.0 * wrap_angle(x[2] - psi_ref) ** 2 + 2.0 * (x[3] - inp["v_ref"]) ** 2
            else:
                J = (
                    J
                    + 1.2 * (x[1] - inp["lane_y"]) ** 2
                    + 10.0 * x[2] ** 2
                    + 1.0 * (x[3] - inp["v_ref"]) ** 2
                )
            J = J + 0.3 * U2[k, 0] ** 2 + 4.0 * U2[k, 1] ** 2
            gap2 = jnp.sum((x[0:2] - inp["ego_pred"][k]) ** 2)
            J = J + inp["w_av"] * jnp.exp(-gap2 / (2.0 * 4.0**2))
        return J

    vg = jax.jit(jax.value_and_grad(objective))
    _OPP_VG_CACHE[key] = vg
    return vg


class GroundTruthOpponent:
    """Stateful simulated agent: tracking MPC + randomized yield behavior.

    The reaction-delay countdown and the yield latch are episode state;
    everything random is drawn from the supplied generator, so episodes
    are reproducible from their seed.
    """

    H = 6

    def __init__(self, cfg: ScenarioConfig, sys: JointSystem, other_index: int, rng):
        self.sys = sys
        self.index = other_index
        self.agent = sys.others[other_index]
        self.slice = sys.agent_slice(other_index + 1)
        self.goal_based = self.agent.kind == "unicycle-4D"
        self.dt = sys.dt
        self.detect_radius = cfg.detect_radius
        lanes = [float(v) for v in cfg.lane_centers]
        self.lanes = lanes
        self.v_ref = cfg.ped_walk_speed if self.goal_based else cfg.v_ref_other
        self.goal = np.asarray(cfg.ped_goal, dtype=float)
        self.w_av = float(rng.uniform(*cfg.avoid_weight_range))
        self.delay_steps = int(round(float(rng.uniform(*cfg.reaction_delay)) / self.dt))
        self.will_yield = bool(rng.uniform() < cfg.yield_probability)
        if cfg.lane_switch_window is not None:
            lo, hi = cfg.lane_switch_window
            self.switch_step = int(round(float(rng.uniform(lo, hi)) / self.dt))
        else:
            self.switch_step = None
        self.lane_ref = (
            float(cfg.initial_other_lane) if cfg.initial_other_lane is not None else lanes[0]
        )
        self._countdown: Optional[int] = None
        self._yielded = False
        self._halted = False
        self._vg = _opponent_vg(self.agent.kind, self.agent.wheelbase, self.dt, self.H, self.goal_based)
        self._warm = np.zeros(self.H * 2)

    def _other_lane(self) -> float:
        cands = [l for l in self.lanes if abs(l - self.lane_ref) > 1e-6]
        return cands[0] if cands else self.lane_ref

    def _maybe_react(self, x_joint, t: int):
        # Idempotent per step: Oracle planning may query the plan before the
        # action is taken at the same t.
        if getattr(self, "_last_react_t", None) == t:
            return
        self._last_react_t = t
        if self.switch_step is not None and t == self.switch_step:
            self.lane_ref = self._other_lane()
        if self._yielded or self._halted:
            return
        pe = x_joint[list(self.sys.ego_position_indices)]
        po = x_joint[self.slice][0:2]
        if np.hypot(*(pe - po)) < self.detect_radius:
            if self._countdown is None:
                self._countdown = self.delay_steps
            elif self._countdown > 0:
                self._countdown -= 1
            if self._countdown == 0 and self.will_yield:
                if self.goal_based:
                    self._halted = True  # pedestrian yields by stopping
                else:
                    self.lane_ref = self._other_lane()
                    self._yielded = True

    def planned_controls(self, x_joint, t: int) -> np.ndarray:
        """Current MPC plan over the horizon (also the communicated plan)."""
        self._maybe_react(x_joint, t)
        x0 = np.asarray(x_joint, dtype=float)[self.slice]
        xe = np.asarray(x_joint, dtype=float)[0:4]
        steps = np.arange(1, self.H + 1)[:, None] * self.dt
        ego_pred = xe[0:2][None, :] + steps * xe[3] * np.array([np.cos(xe[2]), np.sin(xe[2])])[None, :]
        v_ref = 0.0 if self._halted else self.v_ref
        inp = {
            "x0": jnp.asarray(x0),
            "ego_pred": jnp.asarray(ego_pred),
            "lane_y": jnp.asarray(self.lane_ref),
            "v_ref": jnp.asarray(v_ref),
            "goal": jnp.asarray(self.goal),
            "w_av": jnp.asarray(self.w_av),
        }
        lo, hi = self.agent.control_bounds
        from .solver import minimize_box

        res = minimize_box(
            lambda U: (lambda out: (float(out[0]), np.asarray(out[1])))(self._vg(jnp.asarray(U), inp)),
            self._warm,
            np.tile(lo, self.H),
            np.tile(hi, self.H),
            kkt_tol=3e-3,
            max_iter=10,
        )
        self._warm = np.concatenate([res.x[2:], res.x[-2:]])
        return res.x.reshape(self.H, 2)

    def act(self, x_joint, t: int) -> np.ndarray:
        return self.planned_controls(x_joint, t)[0]


def ground_truth_opponent(opponent: GroundTruthOpponent, x, t: int) -> np.ndarray:
    """First action of the opponent's current MPC plan at (x, t)."""
    return opponent.act(np.asarray(x, dtype=float), t)


# --------------------------------------------------------------------------
# Trajectory replay


@dataclass
class ReplayTrace:
    """A recorded (t, x, y, heading, speed) trajectory for one agent."""

    agent: AgentModel
    states: np.ndarray  # [T, 4]

    @staticmethod
    def from_csv(path_or_buf, agent: AgentModel, agent_id: Optional[int] = None) -> "ReplayTrace":
        if hasattr(path_or_buf, "read"):
            rows = list(csv.DictReader(path_or_buf))
        else:
            with open(path_or_buf, newline="") as fh:
                rows = list(csv.DictReader(fh))
        if agent_id is not None:
            rows = [r for r in rows if int(r["agent_id"]) == int(agent_id)]
        rows.sort(key=lambda r: float(r["t"]))
        states = np.array(
            [[float(r["x"]), float(r["y"]), float(r["heading"]), float(r["speed"])] for r in rows]
        )
        if states.shape[0] < 2:
            raise InvalidArgumentError("replay trace needs at least two states")
        return ReplayTrace(agent=agent, states=states)

    def to_csv(self, path, agent_id: int = 1, dt: Optional[float] = None):
        dt = dt if dt is not None else self.agent.dt
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "agent_id", "x", "y", "heading", "speed"])
            for k, s in enumerate(self.states):
                w.writerow([repr(k * dt), agent_id, repr(s[0]), repr(s[1]), repr(s[2]), repr(s[3])])


def replay_opponent(trace: ReplayTrace, t: int) -> np.ndarray:
    """Control at step t reconstructed by inverse dynamics from the trace.

    Past the end of the trace the final control is held.
    """
    T = trace.states.shape[0]
    t = min(int(t), T - 2)
    s0, s1 = trace.states[t], trace.states[t + 1]
    dt = trace.agent.dt
    a = (s1[3] - s0[3]) / dt
    dpsi = float(np.asarray(wrap_angle(jnp.asarray(s1[2] - s0[2]))))
    if trace.agent.kind == "kinematic-bicycle-4D":
        v = s0[3]
        steer = dpsi * trace.agent.wheelbase / (dt * v) if abs(v) > 1e-9 else 0.0
        return np.array([a, steer])
    return np.array([a, dpsi / dt])


# --------------------------------------------------------------------------
# Episode logs and metrics


@dataclass
class StepRecord:
    t: int
    x: List[float]
    u_e_nominal: List[float]
    u_e_applied: List[float]
    u_o: List[float]
    shield_applied: bool
    mode_probs: List[float]
    theta_means: List[List[float]]
    theta_covs: List[List[List[float]]]
    stage_cost: float
    solver_status: str
    solver_iters: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "t": self.t,
                "x": self.x,
                "u_e_nominal": self.u_e_nominal,
                "u_e_applied": self.u_e_applied,
                "u_o": self.u_o,
                "shield_applied": self.shield_applied,
                "mode_probs": self.mode_probs,
                "theta_means": self.theta_means,
                "theta_covs": self.theta_covs,
                "stage_cost": self.stage_cost,
                "solver_status": self.solver_status,
                "solver_iters": self.solver_iters,
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(line: str) -> "StepRecord":
        d = json.loads(line)
        return StepRecord(**d)


@dataclass
class EpisodeLog:
    meta: Dict
    records: List[StepRecord]
    summary: Dict = field(default_factory=dict)

    def to_jsonl(self) -> str:
        out = io.StringIO()
        out.write(json.dumps({"meta": self.meta}, sort_keys=True) + "\n")
        for r in self.records:
            out.write(r.to_json() + "\n")
        out.write(json.dumps({"summary": self.summary}, sort_keys=True) + "\n")
        return out.getvalue()

    @staticmethod
    def from_jsonl(text: str) -> "EpisodeLog":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        meta = json.loads(lines[0])["meta"]
        summary = json.loads(lines[-1])["summary"]
        records = [StepRecord.from_json(ln) for ln in lines[1:-1]]
        return EpisodeLog(meta=meta, records=records, summary=summary)

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @staticmethod
    def read(path) -> "EpisodeLog":
        with open(path) as fh:
            return EpisodeLog.from_jsonl(fh.read())


def _stage_cost(meta: Dict, x: np.ndarray, u: np.ndarray, t: int) -> float:
    Q = np.asarray(meta["Q"])
    R = np.asarray(meta["R"])
    ref = np.asarray(meta["x_ref0"]) + t * np.asarray(meta["x_ref_step"])
    e = x[0:4] - ref
    e[2] -= 2 * np.pi * np.ceil((e[2] - np.pi) / (2 * np.pi))
    return float(e @ Q @ e + u @ R @ u)


def closed_loop_cost(log: EpisodeLog) -> float:
    """Sum of executed stage costs (equals recomputation from the log)."""
    return float(sum(r.stage_cost for r in log.records))


def collision_rate(logs: Sequence[EpisodeLog]) -> float:
    """Percentage of episodes with at least one failure-set entry."""
    if not logs:
        raise InvalidArgumentError("collision rate of an empty batch is undefined")
    n_coll = sum(1 for log in logs if log.summary["collided"])
    return 100.0 * n_coll / len(logs)


def _lhj(meta: Dict, x: np.ndarray) -> float:
    """Signed distance to the safety-regulation boundary (positive = violating)."""
    r = float(meta["collision_radius"])
    n_agents = int(meta["n_agents"])
    pe = x[0:2]
    sep = np.inf
    for i in range(1, n_agents):
        po = x[4 * i : 4 * i + 2]
        sep = min(sep, float(np.hypot(*(pe - po))))
    worst = r - sep
    cw = meta.get("corridor_halfwidth")
    if cw is not None:
        worst = max(worst, abs(pe[1] - float(meta["corridor_center_y"])) - float(cw))
    return worst


def safety_index(log: EpisodeLog) -> float:
    """Accumulated severity of safety-regulation violations."""
    si = 0.0
    for r in log.records:
        v = _lhj(log.meta, np.asarray(r.x))
        if v >= 0.0:
            si += v
    return float(si)


def efficiency_index(log: EpisodeLog) -> float:
    """Time-averaged tracking + control cost plus the overtaking progress term."""
    meta = log.meta
    axis = int(meta.get("progress_axis", 0))
    total = 0.0
    for r in log.records:
        x = np.asarray(r.x)
        total += _stage_cost(meta, x, np.asarray(r.u_e_applied), r.t)
        total += float(x[4 + axis] - x[axis])  # nearest other minus ego progress
    return float(total / len(log.records))


# --------------------------------------------------------------------------
# Episode runner


def run_episode(cfg: ScenarioConfig, variant) -> EpisodeLog:
    """Run one closed-loop episode of a scenario under one planner variant."""
    variant = PlannerVariant.parse(variant)
    sys, beh, failure, shield, prior, pcfg = build_scenario(cfg)
    ss = np.random.SeedSequence(cfg.seed)
    rng_init, rng_opp, rng_dist = (np.random.default_rng(s) for s in ss.spawn(3))

    x = np.concatenate([np.asarray(cfg.ego_x0, dtype=float)] + [np.asarray(o, dtype=float) for o in cfg.others_x0])
    for i in range(len(sys.agents)):
        off = sys.agent_offsets[i]
        x[off + 0] += float(rng_init.uniform(-cfg.x0_jitter, cfg.x0_jitter))
        x[off + 3] += float(rng_init.uniform(-cfg.x0_jitter, cfg.x0_jitter)) * 0.3
    b = prior
    tm = pcfg.transition

    shielded = cfg.shielded if cfg.shielded is not None else variant.sharp

    trace = None
    opponents: List[GroundTruthOpponent] = []
    if cfg.scenario == "replay":
        if cfg.replay_trace is None:
            raise InvalidArgumentError("replay scenario needs replay_trace")
        trace = ReplayTrace.from_csv(cfg.replay_trace, sys.others[0], agent_id=1)
        x[sys.agent_slice(1)] = trace.states[0]
    else:
        opponents = [GroundTruthOpponent(cfg, sys, i, rng_opp) for i in range(len(sys.others))]

    lo_d, hi_d = sys.disturbance_bounds
    # Pin the reference progress to the episode start so that recovery
    # after braking stays reflected in the tracking cost.
    pcfg.reference = replace(pcfg.reference, origin_x=float(x[0]))
    ref0 = pcfg.reference.trajectory(x[0:4], 1, sys.dt)
    meta = {
        "scenario": cfg.scenario,
        "variant": variant.value,
        "seed": cfg.seed,
        "T_sim": cfg.T_sim,
        "shielded": bool(shielded),
        "collision_radius": float(failure.collision_radius),
        "corridor_halfwidth": float(cfg.corridor_halfwidth),
        "corridor_center_y": 0.5 * (min(cfg.lane_centers) + max(cfg.lane_centers)),
        "n_agents": len(sys.agents),
        "Q": np.asarray(pcfg.cost.Q).tolist(),
        "R": np.asarray(pcfg.cost.R).tolist(),
        "x_ref0": ref0[0].tolist(),
        "x_ref_step": (ref0[1] - ref0[0]).tolist(),
        "progress_axis": cfg.progress_axis,
        "modes": [str(m) for m in beh.modes],
    }

    records: List[StepRecord] = []
    prev_sol = None
    collided = False
    shield_count = 0

    for t in range(cfg.T_sim):
        if variant is PlannerVariant.ORACLE:
            plans = [opp.planned_controls(x, t) for opp in opponents]
            if plans:
                pcfg.oracle_plan = np.hstack([p[: pcfg.N] for p in plans])
            else:
                pcfg.oracle_plan = np.zeros((pcfg.N, sys.m_o))

        status = "ok"
        iters = 0
        try:
            u_nom, sol = plan(variant, x, b, prev_sol, pcfg, cycle=t)
            prev_sol = sol
            status = sol.status
            iters = sol.n_iter
        except Exception as exc:  # planner hard failure: brake and continue
            warnings.warn(f"planner failed at t={t}: {exc}", RuntimeWarning)
            u_nom = shield.fallback(x)
            status = "planner-error"
            prev_sol = None

        if shielded:
            u_e, flag = safety_filter(shield, sys, x, u_nom)
        else:
            u_e, flag = np.asarray(u_nom, dtype=float), False
        shield_count += int(flag)

        if trace is not None:
            u_o = replay_opponent(trace, t)
        else:
            u_o = np.concatenate([opp.act(x, t) for opp in opponents])
        lo_o, hi_o = sys.other_control_bounds
        u_o = np.clip(u_o, lo_o, hi_o)

        d = rng_dist.multivariate_normal(np.zeros(sys.n), sys.disturbance_covariance)
        d = np.clip(d, lo_d, hi_d)

        x_next = step_joint(sys, x, u_e, u_o, d)
        b_next = update_fast(b, sys, beh, x, u_e, x_next, tm)

        stage = _stage_cost(meta, x, np.asarray(u_e), t)
        records.append(
            StepRecord(
                t=t,
                x=[float(v) for v in x],
                u_e_nominal=[float(v) for v in np.asarray(u_nom)],
                u_e_applied=[float(v) for v in np.asarray(u_e)],
                u_o=[float(v) for v in u_o],
                shield_applied=bool(flag),
                mode_probs=[float(v) for v in b.mode_probs],
                theta_means=[[float(v) for v in row] for row in b.means],
                theta_covs=[[[float(v) for v in row] for row in c] for c in b.covs],
                stage_cost=stage,
                solver_status=status,
                solver_iters=int(iters),
            )
        )
        collided = collided or failure.contains(sys, x)
        x, b = x_next, b_next

    collided = collided or failure.contains(sys, x)
    records.append(
        StepRecord(
            t=cfg.T_sim,
            x=[float(v) for v in x],
            u_e_nominal=[0.0] * sys.m_e,
            u_e_applied=[0.0] * sys.m_e,
            u_o=[0.0] * sys.m_o,
            shield_applied=False,
            mode_probs=[float(v) for v in b.mode_probs],
            theta_means=[[float(v) for v in row] for row in b.means],
            theta_covs=[[[float(v) for v in row] for row in c] for c in b.covs],
            stage_cost=_stage_cost(meta, x, np.zeros(sys.m_e), cfg.T_sim),
            solver_status="terminal",
            solver_iters=0,
        )
    )

    log = EpisodeLog(meta=meta, records=records)
    iter_list = [r.solver_iters for r in records[:-1]]
    log.summary = {
        "J_cl": closed_loop_cost(log),
        "collided": bool(collided),
        "SI": safety_index(log),
        "EI": efficiency_index(log),
        "shield_count": int(shield_count),
        "mean_solve_iters": float(np.mean(iter_list)) if iter_list else 0.0,
        "variant": variant.value,
        "seed": cfg.seed,
    }
    return log
