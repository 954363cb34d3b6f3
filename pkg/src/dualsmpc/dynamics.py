"""Agent models and coupled input-affine dynamics.

The joint system stacks one ego agent and one or more other agents.  Every
built-in agent uses the 4D state layout

    [`px`, `py`, `psi`, `v`]

where (`px`, `py`) is the planar position [m], `psi` the heading [rad],
and `v` the forward speed [m/s].  Controls are

    kinematic-bicycle-4D : [`accel`, `steer`]    (steer = front wheel angle)
    unicycle-4D          : [`accel`, `yaw_rate`]

One discrete step of the joint system is

    x+ = f(x) + B_e(x) u_e + B_o(x) u_o + d,

with forward-Euler discretization by default, which keeps the step exactly
affine in both control inputs.  RK4 is available per system for simulation
studies; the parameter-affine reformulation always refers to the Euler form.
Headings are wrapped to (-pi, pi] after every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import jax
import jax.numpy as jnp
import numpy as np

from .errors import InvalidArgumentError

_TWO_PI = 2.0 * np.pi


def wrap_angle(a):
    """Wrap angles into (-pi, pi]."""
    return a - _TWO_PI * jnp.ceil((a - jnp.pi) / _TWO_PI)


@dataclass(frozen=True)
class AgentModel:
    """A single agent's kinematics and control limits.

    ``control_bounds`` is a pair (lo, hi) of per-dimension limits in SI
    units.  For ``kind="custom"`` the caller supplies ``drift_fn`` (one
    Euler step of the autonomous part), ``input_matrix_fn`` (the discrete
    input matrix), and the state-layout index hooks.
    """

    kind: str = "kinematic-bicycle-4D"
    state_dim: int = 4
    control_dim: int = 2
    control_bounds: Tuple[np.ndarray, np.ndarray] = (
        np.array([-4.0, -0.5]),
        np.array([3.0, 0.5]),
    )
    dt: float = 0.2
    wheelbase: float = 2.9
    drift_fn: Optional[Callable] = None
    input_matrix_fn: Optional[Callable] = None
    heading_indices: Tuple[int, ...] = (2,)
    position_indices: Tuple[int, int] = (0, 1)

    def __post_init__(self):
        if self.state_dim < 1 or self.control_dim < 1:
            raise InvalidArgumentError("state_dim and control_dim must be >= 1")
        if self.dt <= 0:
            raise InvalidArgumentError("dt must be positive")
        lo, hi = self.control_bounds
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if lo.shape != (self.control_dim,) or hi.shape != (self.control_dim,):
            raise InvalidArgumentError("control bounds must match control_dim")
        if np.any(lo > hi):
            raise InvalidArgumentError("control bounds must satisfy lo <= hi")
        object.__setattr__(self, "control_bounds", (lo, hi))
        if self.kind not in ("kinematic-bicycle-4D", "unicycle-4D", "custom"):
            raise InvalidArgumentError(f"unknown agent kind {self.kind!r}")
        if self.kind == "custom" and (self.drift_fn is None or self.input_matrix_fn is None):
            raise InvalidArgumentError("custom agents need drift_fn and input_matrix_fn")

    # One Euler step of the autonomous part, x_a -> x_a+ with zero input.
    def drift(self, x_a):
        if self.kind == "custom":
            return self.drift_fn(x_a)
        px, py, psi, v = x_a[0], x_a[1], x_a[2], x_a[3]
        return jnp.stack([px + self.dt * v * jnp.cos(psi), py + self.dt * v * jnp.sin(psi), psi, v])

    # Discrete input matrix B(x_a), shape [state_dim, control_dim].
    def input_matrix(self, x_a):
        if self.kind == "custom":
            return self.input_matrix_fn(x_a)
        v = x_a[3]
        z = jnp.zeros(())
        if self.kind == "kinematic-bicycle-4D":
            rows = [[z, z], [z, z], [z, self.dt * v / self.wheelbase], [self.dt + z, z]]
        else:  # unicycle-4D
            rows = [[z, z], [z, z], [z, self.dt + z], [self.dt + z, z]]
        return jnp.stack([jnp.stack(r) for r in rows])

    def drift_jacobian(self, x_a):
        """d drift / d x, closed form for the built-in kinds."""
        if self.kind == "custom":
            return jax.jacfwd(self.drift_fn)(x_a)
        psi, v = x_a[2], x_a[3]
        dt = self.dt
        o = jnp.ones(())
        z = jnp.zeros(())
        return jnp.stack(
            [
                jnp.stack([o, z, -dt * v * jnp.sin(psi), dt * jnp.cos(psi)]),
                jnp.stack([z, o, dt * v * jnp.cos(psi), dt * jnp.sin(psi)]),
                jnp.stack([z, z, o, z]),
                jnp.stack([z, z, z, o]),
            ]
        )

    # Continuous-time vector field pieces, used by the RK4 integrator.
    def drift_rate(self, x_a):
        if self.kind == "custom":
            return (self.drift_fn(x_a) - x_a) / self.dt
        psi, v = x_a[2], x_a[3]
        return jnp.stack([v * jnp.cos(psi), v * jnp.sin(psi), jnp.zeros(()), jnp.zeros(())])

    def input_matrix_rate(self, x_a):
        return self.input_matrix(x_a) / self.dt


@dataclass(frozen=True)
class FailureSet:
    """States considered catastrophic: inter-agent collision.

    ``collision_radius`` is the disc-disc contact distance between the ego
    and any other agent.  ``track_bounds``, when given, is a lateral
    corridor (centerline polyline [k, 2] plus half width); leaving it is a
    safety-regulation violation that feeds the safety index but does not
    count as a collision.
    """

    collision_radius: float = 2.5
    track_bounds: Optional[Tuple[np.ndarray, float]] = None

    def __post_init__(self):
        if self.collision_radius <= 0:
            raise InvalidArgumentError("collision_radius must be positive")
        if self.track_bounds is not None:
            pts, half_width = self.track_bounds
            pts = np.asarray(pts, dtype=float)
            if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
                raise InvalidArgumentError("track centerline must be [k>=2, 2]")
            object.__setattr__(self, "track_bounds", (pts, float(half_width)))

    def min_separation(self, sys: "JointSystem", x) -> float:
        """Smallest ego-to-other center distance."""
        x = np.asarray(x, dtype=float)
        pe = x[list(sys.ego_position_indices)]
        dists = [
            np.hypot(*(pe - x[list(idx)])) for idx in sys.other_position_indices
        ]
        return float(min(dists)) if dists else np.inf

    def contains(self, sys: "JointSystem", x) -> bool:
        """True when the joint state is a collision."""
        return self.min_separation(sys, x) < self.collision_radius

    def corridor_violation(self, sys: "JointSystem", x) -> float:
        """Depth [m] by which the ego is outside the corridor (0 inside)."""
        if self.track_bounds is None:
            return 0.0
        pts, half_width = self.track_bounds
        pe = np.asarray(x, dtype=float)[list(sys.ego_position_indices)]
        # Distance from the ego to the centerline polyline.
        best = np.inf
        for a, b in zip(pts[:-1], pts[1:]):
            ab = b - a
            t = np.clip(np.dot(pe - a, ab) / max(np.dot(ab, ab), 1e-12), 0.0, 1.0)
            best = min(best, float(np.hypot(*(pe - (a + t * ab)))))
        return max(0.0, best - half_width)

    def signed_violation(self, sys: "JointSystem", x) -> float:
        """Signed distance to the regulation boundary; positive = violating."""
        sep = self.min_separation(sys, x)
        worst = self.collision_radius - sep
        if self.track_bounds is not None:
            pts, half_width = self.track_bounds
            pe = np.asarray(x, dtype=float)[list(sys.ego_position_indices)]
            best = np.inf
            for a, b in zip(pts[:-1], pts[1:]):
                ab = b - a
                t = np.clip(np.dot(pe - a, ab) / max(np.dot(ab, ab), 1e-12), 0.0, 1.0)
                best = min(best, float(np.hypot(*(pe - (a + t * ab)))))
            worst = max(worst, best - half_width)
        return worst


@dataclass(frozen=True)
class JointSystem:
    """The coupled ego + others system of the interaction planning task."""

    ego: AgentModel
    others: Tuple[AgentModel, ...]
    disturbance_bounds: Tuple[np.ndarray, np.ndarray]
    disturbance_covariance: np.ndarray
    integrator: str = "euler"
    agent_offsets: Tuple[int, ...] = field(init=False)

    def __post_init__(self):
        others = tuple(self.others)
        object.__setattr__(self, "others", others)
        n = self.ego.state_dim + sum(a.state_dim for a in others)
        lo, hi = self.disturbance_bounds
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if lo.shape != (n,) or hi.shape != (n,):
            raise InvalidArgumentError("disturbance bounds must have joint state dim")
        if np.any(lo > 0) or np.any(hi < 0):
            raise InvalidArgumentError("disturbance set must contain the origin")
        object.__setattr__(self, "disturbance_bounds", (lo, hi))
        cov = np.asarray(self.disturbance_covariance, dtype=float)
        if cov.shape != (n, n):
            raise InvalidArgumentError("disturbance covariance must be [n, n]")
        if not np.allclose(cov, cov.T, atol=1e-10):
            raise InvalidArgumentError("disturbance covariance must be symmetric")
        if np.min(np.linalg.eigvalsh(0.5 * (cov + cov.T))) < -1e-10:
            raise InvalidArgumentError("disturbance covariance must be PSD")
        object.__setattr__(self, "disturbance_covariance", cov)
        if self.integrator not in ("euler", "rk4"):
            raise InvalidArgumentError("integrator must be 'euler' or 'rk4'")
        offsets = [0]
        for a in (self.ego,) + others:
            offsets.append(offsets[-1] + a.state_dim)
        object.__setattr__(self, "agent_offsets", tuple(offsets))

    # -- dimensions and index helpers -------------------------------------

    @property
    def n(self) -> int:
        return self.agent_offsets[-1]

    @property
    def m_e(self) -> int:
        return self.ego.control_dim

    @property
    def m_o(self) -> int:
        return sum(a.control_dim for a in self.others)

    @property
    def dt(self) -> float:
        return self.ego.dt

    @property
    def agents(self) -> Tuple[AgentModel, ...]:
        return (self.ego,) + self.others

    def agent_slice(self, i: int) -> slice:
        return slice(self.agent_offsets[i], self.agent_offsets[i + 1])

    @property
    def heading_indices(self) -> Tuple[int, ...]:
        idx = []
        for i, a in enumerate(self.agents):
            off = self.agent_offsets[i]
            idx.extend(off + h for h in a.heading_indices)
        return tuple(idx)

    @property
    def ego_position_indices(self) -> Tuple[int, int]:
        return self.ego.position_indices

    @property
    def other_position_indices(self) -> Tuple[Tuple[int, int], ...]:
        out = []
        for i, a in enumerate(self.others, start=1):
            off = self.agent_offsets[i]
            out.append((off + a.position_indices[0], off + a.position_indices[1]))
        return tuple(out)

    @property
    def ego_control_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.ego.control_bounds

    @property
    def other_control_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        lo = np.concatenate([a.control_bounds[0] for a in self.others])
        hi = np.concatenate([a.control_bounds[1] for a in self.others])
        return lo, hi

    # -- traceable dynamics pieces ----------------------------------------

    def wrap(self, x):
        """Wrap all heading entries of a joint state into (-pi, pi]."""
        h = np.array(self.heading_indices)
        return x.at[h].set(wrap_angle(x[h])) if hasattr(x, "at") else _np_wrap(x, h)

    def drift(self, x):
        """Euler step of the autonomous part, f(x)."""
        parts = [a.drift(x[self.agent_slice(i)]) for i, a in enumerate(self.agents)]
        return jnp.concatenate(parts)

    def drift_jacobian(self, x):
        """Block-diagonal d f / d x (closed form for built-in agents)."""
        blocks = [a.drift_jacobian(x[self.agent_slice(i)]) for i, a in enumerate(self.agents)]
        return jax.scipy.linalg.block_diag(*blocks)

    def input_matrix_ego(self, x):
        blocks = [self.ego.input_matrix(x[self.agent_slice(0)])]
        blocks += [jnp.zeros((a.state_dim, self.m_e)) for a in self.others]
        return jnp.concatenate(blocks, axis=0)

    def input_matrix_others(self, x):
        rows = []
        col_off = 0
        for i, a in enumerate(self.agents):
            if i == 0:
                rows.append(jnp.zeros((a.state_dim, self.m_o)))
                continue
            blk = a.input_matrix(x[self.agent_slice(i)])
            left = jnp.zeros((a.state_dim, col_off))
            right = jnp.zeros((a.state_dim, self.m_o - col_off - a.control_dim))
            rows.append(jnp.concatenate([left, blk, right], axis=1))
            col_off += a.control_dim
        return jnp.concatenate(rows, axis=0)

    def step(self, x, u_e, u_o, d):
        """One discrete step of the joint system, headings wrapped."""
        if self.integrator == "euler":
            nxt = self.drift(x) + self.input_matrix_ego(x) @ u_e + self.input_matrix_others(x) @ u_o + d
        else:
            nxt = self._rk4(x, u_e, u_o) + d
        h = jnp.array(self.heading_indices)
        return nxt.at[h].set(wrap_angle(nxt[h]))

    def _rate(self, x, u_e, u_o):
        parts = []
        col_e = 0
        col_o = 0
        for i, a in enumerate(self.agents):
            xa = x[self.agent_slice(i)]
            r = a.drift_rate(xa)
            if i == 0:
                r = r + a.input_matrix_rate(xa) @ u_e
            else:
                r = r + a.input_matrix_rate(xa) @ u_o[col_o : col_o + a.control_dim]
                col_o += a.control_dim
            parts.append(r)
        return jnp.concatenate(parts)

    def _rk4(self, x, u_e, u_o):
        dt = self.dt
        k1 = self._rate(x, u_e, u_o)
        k2 = self._rate(x + 0.5 * dt * k1, u_e, u_o)
        k3 = self._rate(x + 0.5 * dt * k2, u_e, u_o)
        k4 = self._rate(x + dt * k3, u_e, u_o)
        return x + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0


def _np_wrap(x, h):
    x = np.array(x, dtype=float)
    x[h] = x[h] - _TWO_PI * np.ceil((x[h] - np.pi) / _TWO_PI)
    return x


def _check_vec(name, v, dim):
    v = np.asarray(v, dtype=float)
    if v.shape != (dim,):
        raise InvalidArgumentError(f"{name} must have shape ({dim},), got {v.shape}")
    return v


def step_joint(sys: JointSystem, x, u_e, u_o, d) -> np.ndarray:
    """Advance the joint system one step: f(x) + B_e u_e + B_o u_o + d."""
    x = _check_vec("x", x, sys.n)
    u_e = _check_vec("u_e", u_e, sys.m_e)
    u_o = _check_vec("u_o", u_o, sys.m_o)
    d = _check_vec("d", d, sys.n)
    if not np.all(np.isfinite(np.concatenate([x, u_e, u_o, d]))):
        raise InvalidArgumentError("step_joint inputs must be finite")
    return np.asarray(sys.step(jnp.asarray(x), jnp.asarray(u_e), jnp.asarray(u_o), jnp.asarray(d)))


def linearize(sys: JointSystem, x_bar) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Linearize at a nominal state: A = d f / d x, plus B_e(x), B_o(x)."""
    x_bar = _check_vec("x_bar", x_bar, sys.n)
    if not np.all(np.isfinite(x_bar)):
        raise InvalidArgumentError("x_bar must be finite")
    xj = jnp.asarray(x_bar)
    A = np.asarray(sys.drift_jacobian(xj))
    B_e = np.asarray(sys.input_matrix_ego(xj))
    B_o = np.asarray(sys.input_matrix_others(xj))
    return A, B_e, B_o


def to_parameter_affine(sys: JointSystem, beh, x, u_e, mode) -> Tuple[np.ndarray, np.ndarray]:
    """Rewrite the step as F(x, u_e) theta + f_bar(x, u_e).

    F = B_o(x) @ U_o(x, u_e) with U_o the basis-mean matrix of ``mode``;
    f_bar = f(x) + B_e(x) u_e.  For any weight vector theta, F theta +
    f_bar reproduces ``step_joint`` with the theta-mixed mean action and
    zero disturbance (up to heading wrap, which is applied by step_joint
    only).
    """
    from .behavior import mean_matrix  # local import to avoid a cycle

    x = _check_vec("x", x, sys.n)
    u_e = _check_vec("u_e", u_e, sys.m_e)
    U_o = mean_matrix(beh, mode, x, u_e)
    xj = jnp.asarray(x)
    B_o = np.asarray(sys.input_matrix_others(xj))
    F = B_o @ U_o
    f_bar = np.asarray(sys.drift(xj)) + np.asarray(sys.input_matrix_ego(xj)) @ u_e
    return F, f_bar
