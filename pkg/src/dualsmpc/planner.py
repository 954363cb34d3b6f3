"""Scenario-tree program assembly, initialization pipeline, and solving.

A tree program is reduced to a smooth objective of the stacked per-node
ego controls: states, opponent actions, and beliefs are eliminated by a
forward rollout over the tree, so the dynamics and belief relations hold
exactly at every iterate.  The rollout is written in jax and compiled
once per (system, model, tree shape, variant flags); frozen tree samples,
references, and shielding constraint data enter as runtime inputs, so
receding-horizon replanning does not retrigger compilation.

Variant map (all share one rollout core):

    IDSMPC        dual branching + in-tree measurement updates
    IDSMPC-SHARP  ... plus RCBF soft constraints at predicted shield nodes
    EDSMPC        IDSMPC plus an explicit entropy-reduction reward
    NDSMPC(-SHARP) measurement update replaced by the transition model
    CEMPC(-SHARP) single chain at the MAP mode/weights, realigned reference
    Oracle        single chain driven by the opponent's communicated plan
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import jax
import jax.numpy as jnp
import numpy as np

from .behavior import BehaviorModel
from .belief import BeliefState, TransitionModel
from .dynamics import JointSystem, wrap_angle
from .errors import InvalidArgumentError, NumericalFailureError
from .shielding import ShieldingMechanism, identify_shielding_nodes
from .solver import minimize_box
from .tree import ScenarioTree, build_tree


class PlannerVariant(str, Enum):
    IDSMPC_SHARP = "IDSMPC-SHARP"
    IDSMPC = "IDSMPC"
    NDSMPC = "NDSMPC"
    NDSMPC_SHARP = "NDSMPC-SHARP"
    EDSMPC = "EDSMPC"
    CEMPC = "CEMPC"
    CEMPC_SHARP = "CEMPC-SHARP"
    ORACLE = "Oracle"

    @staticmethod
    def parse(name) -> "PlannerVariant":
        if isinstance(name, PlannerVariant):
            return name
        for v in PlannerVariant:
            if v.value.lower() == str(name).lower():
                return v
        raise InvalidArgumentError(f"unknown planner variant {name!r}")

    @property
    def sharp(self) -> bool:
        return self.value.endswith("SHARP")

    @property
    def chain(self) -> bool:
        return self in (PlannerVariant.CEMPC, PlannerVariant.CEMPC_SHARP, PlannerVariant.ORACLE)

    @property
    def measurement_in_tree(self) -> bool:
        return self in (PlannerVariant.IDSMPC, PlannerVariant.IDSMPC_SHARP, PlannerVariant.EDSMPC)


@dataclass(frozen=True)
class CostSpec:
    """Quadratic tracking costs on the ego block and controls."""

    Q: np.ndarray
    Q_F: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        for name in ("Q", "Q_F", "R"):
            M = np.asarray(getattr(self, name), dtype=float)
            if M.ndim == 1:
                M = np.diag(M)
            object.__setattr__(self, name, 0.5 * (M + M.T))


@dataclass(frozen=True)
class ReferenceSpec:
    """Ego reference: hold a lane at a cruise speed, progressing along +x.

    With ``origin_x`` unset, progress re-anchors at the current ego
    position each cycle; the closed-loop harness pins the origin at the
    episode start so that lost progress (braking, shields) stays
    penalized until recovered.
    """

    lane_y: float
    v_ref: float
    heading: float = 0.0
    origin_x: Optional[float] = None

    def trajectory(self, x0_ego, N: int, dt: float, t0: int = 0) -> np.ndarray:
        x0_ego = np.asarray(x0_ego, dtype=float)
        start = x0_ego[0] if self.origin_x is None else self.origin_x + self.v_ref * dt * t0
        t = np.arange(N + 1)
        ref = np.zeros((N + 1, 4))
        ref[:, 0] = start + self.v_ref * dt * t
        ref[:, 1] = self.lane_y
        ref[:, 2] = self.heading
        ref[:, 3] = self.v_ref
        return ref


@dataclass
class PlannerConfig:
    """Everything a planning cycle needs besides (x, b, previous solution)."""

    sys: JointSystem
    beh: BehaviorModel
    cost: CostSpec
    reference: ReferenceSpec
    transition: TransitionModel = field(default_factory=TransitionModel)
    shield: Optional[ShieldingMechanism] = None
    N: int = 6
    N_d: int = 2
    K: int = 2
    gamma: float = 0.5
    lambda_info: float = 1.0
    rcbf_penalty: float = 1e4
    proj_penalty: float = 1e8
    soft_safety_weight: float = 0.0
    soft_safety_radius: float = 4.0
    corridor_center: float = 0.0
    corridor_halfwidth: float = 1e6  # effectively off unless configured
    objective_form: str = "trace"  # "trace" | "sampled"
    kkt_tol: float = 1e-5
    max_iter: int = 100
    pre_max_iter: Optional[int] = None  # sub-solves of the init pipeline
    trust_init: float = 1.0
    seed: int = 0
    alignment_map: Optional[Mapping[str, float]] = None
    oracle_plan: Optional[np.ndarray] = None
    use_cempc_init: bool = True

    def __post_init__(self):
        if self.objective_form not in ("trace", "sampled"):
            raise InvalidArgumentError("objective_form must be 'trace' or 'sampled'")
        if not (0.0 < self.gamma <= 1.0):
            raise InvalidArgumentError("gamma must lie in (0, 1]")


# --------------------------------------------------------------------------
# Static tree structure and the compiled rollout


@dataclass(frozen=True)
class _TreeStruct:
    depth_counts: Tuple[int, ...]
    parent_idx: Tuple[Tuple[int, ...], ...]  # per depth >= 1, local indices
    mode_idx: Tuple[Tuple[int, ...], ...]
    dual_depth: Tuple[bool, ...]  # per depth >= 1
    node_ids: Tuple[Tuple[int, ...], ...]  # per depth, global node ids
    modes: Tuple
    K: int

    @property
    def N(self) -> int:
        return len(self.depth_counts) - 1

    def ctrl_sizes(self, m_e: int) -> Tuple[int, ...]:
        return tuple(c * m_e for c in self.depth_counts[:-1])

    def static_key(self) -> Tuple:
        return (self.depth_counts, self.parent_idx, self.mode_idx, self.dual_depth, self.modes, self.K)


def _tree_struct(tree: ScenarioTree) -> _TreeStruct:
    by_depth: List[List[int]] = [[] for _ in range(tree.horizon + 1)]
    for n in tree.nodes:
        by_depth[n.depth].append(n.id)
    local = {}
    for ids in by_depth:
        for i, nid in enumerate(ids):
            local[nid] = i
    mode_pos = {m: i for i, m in enumerate(tree.modes)}
    parent_idx, mode_idx, dual = [], [], []
    for t in range(1, tree.horizon + 1):
        ids = by_depth[t]
        parent_idx.append(tuple(local[tree.nodes[i].parent_id] for i in ids))
        mode_idx.append(tuple(mode_pos[tree.nodes[i].mode] for i in ids))
        dual.append(all(tree.nodes[i].kind == "dual" for i in ids))
    return _TreeStruct(
        depth_counts=tuple(len(ids) for ids in by_depth),
        parent_idx=tuple(parent_idx),
        mode_idx=tuple(mode_idx),
        dual_depth=tuple(dual),
        node_ids=tuple(tuple(ids) for ids in by_depth),
        modes=tree.modes,
        K=tree.branch_count,
    )


def _inv_det_small(A, k: int):
    """Batched inverse + determinant; closed forms for k <= 2."""
    if k == 1:
        det = A[..., 0, 0]
        return (1.0 / det)[..., None, None], det
    if k == 2:
        a, b = A[..., 0, 0], A[..., 0, 1]
        c, d = A[..., 1, 0], A[..., 1, 1]
        det = a * d - b * c
        inv = jnp.stack(
            [jnp.stack([d, -b], axis=-1), jnp.stack([-c, a], axis=-1)], axis=-2
        ) / det[..., None, None]
        return inv, det
    sign, logdet = jnp.linalg.slogdet(A)
    return jnp.linalg.inv(A), sign * jnp.exp(logdet)


def _chol_small(A, k: int):
    """Batched lower Cholesky; closed forms for k <= 2."""
    if k == 1:
        return jnp.sqrt(A)
    if k == 2:
        a, b, c = A[..., 0, 0], A[..., 1, 0], A[..., 1, 1]
        l11 = jnp.sqrt(a)
        l21 = b / l11
        l22 = jnp.sqrt(jnp.maximum(c - l21**2, 1e-300))
        z = jnp.zeros_like(a)
        return jnp.stack(
            [jnp.stack([l11, z], axis=-1), jnp.stack([l21, l22], axis=-1)], axis=-2
        )
    return jnp.linalg.cholesky(A)


_ROLLOUT_CACHE: Dict[Tuple, Tuple] = {}


def _get_rollout(sys: JointSystem, beh: Optional[BehaviorModel], struct: _TreeStruct, flags: Tuple):
    key = (id(sys), id(beh), struct.static_key(), flags)
    hit = _ROLLOUT_CACHE.get(key)
    if hit is not None:
        return hit[0], hit[1]
    fn = _build_rollout(sys, beh, struct, flags)
    vg = jax.jit(jax.value_and_grad(fn, has_aux=True))
    vg_fast = jax.jit(jax.value_and_grad(lambda U, inp: fn(U, inp)[0]))
    _ROLLOUT_CACHE[key] = (vg, vg_fast, sys, beh)
    return vg, vg_fast


def _build_rollout(sys: JointSystem, beh: Optional[BehaviorModel], struct: _TreeStruct, flags: Tuple):
    measurement_on, oracle_mode, trace_on, sampled_on, info_on, soft_on = flags
    n = sys.n
    m_e = sys.m_e
    m_o = sys.m_o
    n_modes = len(struct.modes)
    N = struct.N
    K = struct.K
    h_idx = np.array(sys.heading_indices)
    ego_sl = sys.agent_slice(0)
    pe_idx = np.array(sys.ego_position_indices)
    po_idx = [np.array(p) for p in sys.other_position_indices]
    olo_j, ohi_j = (jnp.asarray(b) for b in sys.other_control_bounds)
    sizes = struct.ctrl_sizes(m_e)
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)

    if beh is not None:
        mm_fns = [beh.mean_matrix_fn(m) for m in struct.modes]
        cov_fns = [beh.basis_covs_fn(m) for m in struct.modes]

    drift = sys.drift
    A_fn = sys.drift_jacobian
    need_cov = (not oracle_mode) and (trace_on or sampled_on or measurement_on)
    log2pi = float(np.log(2.0 * np.pi))

    def wrap_heads(X):
        return X.at[:, h_idx].set(wrap_angle(X[:, h_idx]))

    def separation(X):
        pe = X[:, pe_idx]
        d = jnp.full(X.shape[0], jnp.inf)
        for idx in po_idx:
            d = jnp.minimum(d, jnp.sqrt(jnp.sum((pe - X[:, idx]) ** 2, axis=1) + 1e-12))
        return d

    def entropy_batch(probs, covs, nt):
        p = jnp.clip(probs, 1e-300, 1.0)
        cat = -jnp.sum(p * jnp.log(p), axis=-1)
        _, det = _inv_det_small(covs, nt)
        diff = 0.5 * (nt * jnp.log(2.0 * jnp.pi * jnp.e) + jnp.log(det))
        return cat + jnp.sum(probs * diff, axis=-1)

    def rcbf_term(inp, t, x_t, u_t, uo_in_t):
        dx = x_t - inp["sh_xbar"][t]
        inner = (
            jnp.einsum("cij,cj->ci", inp["sh_A"][t], dx)
            + (inp["gamma"] - 1.0) * dx
            + jnp.einsum("cij,cj->ci", inp["sh_Be"][t], u_t)
            + jnp.einsum("cij,cj->ci", inp["sh_Bo"][t], uo_in_t)
            + inp["sh_dstar"][t]
        )
        Kval = jnp.einsum("ci,ci->c", inp["sh_H"][t], inner)
        mask = inp["sh_mask"][t]
        viol = jnp.maximum(0.0, -Kval) * mask
        return jnp.sum(viol**2), jnp.minimum(Kval, 0.0) * mask

    def rollout(U_flat, inp):
        U = [
            U_flat[offsets[t] : offsets[t + 1]].reshape(struct.depth_counts[t], m_e)
            for t in range(N)
        ]
        Qd, QF, Rm = inp["Q"], inp["Q_F"], inp["R"]
        x_ref = inp["x_ref"]
        sigma_d = inp["sigma_d"]
        eps_stick = inp["eps_stick"]
        q_proc = inp["q_proc"]

        def ego_err(X, t):
            e = X[:, ego_sl.start : ego_sl.stop] - x_ref[t][None, :]
            return e.at[:, 2].set(wrap_angle(e[:, 2]))

        x = inp["x0"][None, :]
        probs = inp["probs0"][None, :]
        mu = inp["mu0"][None, :, :]
        cov = inp["cov0"][None, :, :, :]
        P = jnp.ones(1)
        Sx_state = jnp.zeros((1, n, n))
        Q_joint = jnp.zeros((n, n)).at[ego_sl, ego_sl].set(Qd)

        e0 = ego_err(x, 0)
        J = jnp.sum(
            P * (jnp.einsum("bi,ij,bj->b", e0, Qd, e0) + jnp.einsum("bi,ij,bj->b", U[0], Rm, U[0]))
        )
        proj_pen = jnp.zeros(())
        rcbf_pen = jnp.zeros(())
        info_term = jnp.zeros(())
        soft_pen = jnp.zeros(())
        xs = [x]
        bel_probs = [probs]
        bel_mu = [mu]
        bel_cov = [cov]
        path_ps = [P]
        edges = []
        slack_list = []
        root_uo = None

        for t in range(1, N + 1):
            pidx = jnp.asarray(np.array(struct.parent_idx[t - 1], dtype=int))
            midx = jnp.asarray(np.array(struct.mode_idx[t - 1], dtype=int))
            up = U[t - 1]
            cc = struct.depth_counts[t]
            dual = struct.dual_depth[t - 1]

            f_p = jax.vmap(drift)(x)
            Be_p = jax.vmap(sys.input_matrix_ego)(x)
            Bo_p = jax.vmap(sys.input_matrix_others)(x)
            fbar = f_p + jnp.einsum("bij,bj->bi", Be_p, up)

            if not oracle_mode:
                Umat = jnp.stack([jax.vmap(f)(x, up) for f in mm_fns], axis=1)  # [cp,m,mo,nt]
            if need_cov:
                Scv = jnp.stack([jax.vmap(f)(x, up) for f in cov_fns], axis=1)  # [cp,m,nt,mo,mo]
                Suo = jnp.einsum("pmi,pmiab->pmab", mu**2, Scv)
            if dual and measurement_on:
                Dinv = inp["sigma_d_inv"]
                G_p = jnp.einsum("pna,nk,pkb->pab", Bo_p, Dinv, Bo_p)
                BtDi_p = jnp.einsum("pna,nk->pak", Bo_p, Dinv)

            # -- children: samples, opponent action, state ---------------------
            th0 = inp["theta0"][t - 1]
            mu_pj = mu[pidx, midx]
            cov_pj = cov[pidx, midx]
            Lc = _chol_small(cov_pj, cov_pj.shape[-1])
            theta_c = mu_pj + jnp.einsum("cij,cj->ci", Lc, th0)

            if oracle_mode:
                uo_tilde = jnp.tile(inp["oracle_uo"][t - 1][None, :], (cc, 1))
            else:
                uo_tilde = jnp.einsum("cak,ck->ca", Umat[pidx, midx], theta_c)
            # The projected action is the exact minimizer of the projection
            # penalty under the box constraint; the squared residual keeps
            # the remaining objective term smooth.
            uo = jnp.clip(uo_tilde, olo_j, ohi_j)
            proj_pen = proj_pen + jnp.sum((uo_tilde - uo) ** 2)

            if need_cov:
                Suo_c = Suo[pidx, midx]
                Bo_c = Bo_p[pidx]
                Sx_c = sigma_d[None] + jnp.einsum("cna,cab,ckb->cnk", Bo_c, Suo_c, Bo_c)
            else:
                Sx_c = jnp.tile(sigma_d[None], (cc, 1, 1))
            if sampled_on:
                db0 = inp["dbar0"][t - 1]
                Ld = jnp.linalg.cholesky(Sx_c)
                dbar = jnp.einsum("cij,cj->ci", Ld, db0)
            else:
                dbar = jnp.zeros((cc, n))

            x_c = fbar[pidx] + jnp.einsum("cia,ca->ci", Bo_p[pidx], uo) + dbar
            x_c = wrap_heads(x_c)
            resid = x_c - fbar[pidx]
            resid = resid.at[:, h_idx].set(wrap_angle(resid[:, h_idx]))

            # -- belief update --------------------------------------------------
            # The state covariance is diagonal-plus-low-rank (sigma_d +
            # B_o M B_o'), so the conjugate update and the marginal
            # likelihood reduce to m_o-sized linear algebra (Woodbury and
            # the matrix determinant lemma); everything fuses.
            if dual and measurement_on:
                nt = mu.shape[-1]
                U_cm = Umat[pidx]          # [cc,m,mo,nt]
                Suo_cm = Suo[pidx]         # [cc,m,mo,mo]
                G_c = G_p[pidx]            # [cc,mo,mo]
                BtDi_c = BtDi_p[pidx]      # [cc,mo,n]
                covp = cov[pidx]
                mup = mu[pidx]
                Imo = jnp.eye(m_o)
                # posterior: F' Sx^-1 F and F' Sx^-1 r with F = B_o U
                IMG = Imo + jnp.einsum("cmab,cbd->cmad", Suo_cm, G_c)
                invIMG, _ = _inv_det_small(IMG, m_o)
                W = jnp.einsum("cmab,cmbd->cmad", invIMG, Suo_cm)  # (I+MG)^-1 M
                GW = jnp.einsum("cab,cmbd->cmad", G_c, W)
                T = G_c[:, None] - jnp.einsum("cmab,cbd->cmad", GW, G_c)
                FSF = jnp.einsum("cmak,cmab,cmbl->cmkl", U_cm, T, U_cm)
                FSF = 0.5 * (FSF + jnp.swapaxes(FSF, -1, -2))
                z = jnp.einsum("can,cn->ca", BtDi_c, resid)
                v = z[:, None, :] - jnp.einsum("cmab,cb->cma", GW, z)
                Fr = jnp.einsum("cmak,cma->cmk", U_cm, v)
                prec_prior, _ = _inv_det_small(covp, nt)
                prec_post = prec_prior + FSF
                cov_post, _ = _inv_det_small(prec_post, nt)
                cov_post = 0.5 * (cov_post + jnp.swapaxes(cov_post, -1, -2))
                rhs = Fr + jnp.einsum("cmkl,cml->cmk", prec_prior, mup)
                mu_post = jnp.einsum("cmkl,cml->cmk", cov_post, rhs)
                # marginal likelihood per mode: S = sigma_d + B_o Ms B_o'
                mu_u = jnp.einsum("cmak,cmk->cma", U_cm, mup)
                rm = resid[:, None, :] - jnp.einsum("cna,cma->cmn", Bo_p[pidx], mu_u)
                z_m = jnp.einsum("can,cmn->cma", BtDi_c, rm)
                rDr = jnp.einsum("cmn,nk,cmk->cm", rm, inp["sigma_d_inv"], rm)
                Ms = Suo_cm + jnp.einsum("cmak,cmkl,cmbl->cmab", U_cm, covp, U_cm)
                IMG2 = Imo + jnp.einsum("cmab,cbd->cmad", Ms, G_c)
                invIMG2, det2 = _inv_det_small(IMG2, m_o)
                tt = jnp.einsum("cmab,cmb->cma", Ms, z_m)
                ss = jnp.einsum("cmab,cmb->cma", invIMG2, tt)
                maha = rDr - jnp.einsum("cma,cma->cm", z_m, ss)
                ll = -0.5 * maha - 0.5 * (inp["logdet_sigma_d"] + jnp.log(det2)) - 0.5 * n * log2pi
                logp = ll + jnp.log(jnp.clip(probs[pidx], 1e-300, 1.0))
                logp = logp - jax.scipy.special.logsumexp(logp, axis=1, keepdims=True)
                probs_c = jnp.exp(logp)
            else:
                mu_post, cov_post = mu[pidx], cov[pidx]
                probs_c = probs[pidx]
            probs_c = (1.0 - eps_stick) * probs_c + eps_stick / n_modes
            cov_post = cov_post + q_proc[None, None]
            if info_on and dual and measurement_on:
                ntq = mu.shape[-1]
                h_parent = entropy_batch(probs[pidx], cov[pidx], ntq)
                h_child = entropy_batch(probs_c, cov_post, ntq)
                info_term = info_term + jnp.sum(h_child - h_parent)

            P_c = P[pidx] * (1.0 / K) * probs[pidx, midx] if dual else P[pidx]

            if trace_on:
                A_p = jax.vmap(A_fn)(x)
                Sx_state_c = Sx_c + jnp.einsum(
                    "cij,cjk,clk->cil", A_p[pidx], Sx_state[pidx], A_p[pidx]
                )
                J = J + jnp.sum(jnp.einsum("ij,cji->c", Q_joint, Sx_state_c))
            else:
                Sx_state_c = Sx_state[pidx]

            e = ego_err(x_c, t)
            if t < N:
                u_c = U[t]
                J = J + jnp.sum(
                    P_c
                    * (jnp.einsum("bi,ij,bj->b", e, Qd, e) + jnp.einsum("bi,ij,bj->b", u_c, Rm, u_c))
                )
            else:
                J = J + jnp.sum(P_c * jnp.einsum("bi,ij,bj->b", e, QF, e))
            if soft_on:
                gap = jnp.maximum(0.0, inp["soft_r"] - separation(x_c))
                off = jnp.maximum(
                    0.0,
                    jnp.abs(x_c[:, ego_sl.start + 1] - inp["corridor_y"]) - inp["corridor_half"],
                )
                soft_pen = soft_pen + jnp.sum(P_c * (gap**2 + off**2))

            if t <= N - 1:
                pen, slack = rcbf_term(inp, t, x_c, U[t], uo)
                rcbf_pen = rcbf_pen + pen
                slack_list.append(slack)
            if t == 1:
                root_uo = uo[0:1]

            x, probs, mu, cov, P, Sx_state = x_c, probs_c, mu_post, cov_post, P_c, Sx_state_c
            xs.append(x)
            bel_probs.append(probs)
            bel_mu.append(mu)
            bel_cov.append(cov)
            path_ps.append(P)
            edges.append((uo_tilde, uo, dbar, theta_c))

        # Root-node RCBF constraint (depth 0): its incoming opponent action
        # borrows the first child's, matching the shield-screen convention.
        pen0, slack0 = rcbf_term(inp, 0, inp["x0"][None, :], U_flat[0:m_e][None, :], root_uo)
        rcbf_pen = rcbf_pen + pen0
        slack_list.insert(0, slack0)

        J_total = (
            J
            + inp["proj_penalty"] * proj_pen
            + inp["rcbf_penalty"] * rcbf_pen
            + (inp["lambda_info"] * info_term if info_on else 0.0)
            + (inp["soft_w"] * soft_pen if soft_on else 0.0)
        )
        aux = {
            "states": tuple(xs),
            "bel_probs": tuple(bel_probs),
            "bel_mu": tuple(bel_mu),
            "bel_cov": tuple(bel_cov),
            "path_ps": tuple(path_ps),
            "edges": tuple(edges),
            "slacks": tuple(slack_list),
            "tracking_cost": J,
            "proj_pen": proj_pen,
            "rcbf_pen": rcbf_pen,
            "info_term": info_term,
            "soft_pen": soft_pen,
        }
        return J_total, aux

    return rollout


# --------------------------------------------------------------------------
# Programs and solutions


@dataclass
class TreeProgram:
    variant: PlannerVariant
    tree: ScenarioTree
    config: PlannerConfig
    struct: _TreeStruct
    inputs: Dict[str, object]
    lo: np.ndarray
    hi: np.ndarray
    vg: object
    constraint_kinds: Tuple[str, ...]
    slack_node_ids: Tuple[int, ...]
    vg_fast: object
    x_hat: np.ndarray
    b_hat: BeliefState
    b_sub: BeliefState  # the belief actually rolled (restricted for chains)
    x_ref: np.ndarray

    @property
    def n_state_nodes(self) -> int:
        return self.tree.n_nodes

    @property
    def uses_measurement_update(self) -> bool:
        return "belief-measurement" in self.constraint_kinds

    @property
    def n_controls(self) -> int:
        return int(self.lo.shape[0])

    def evaluate(self, U_flat):
        """Objective, aux rollout records, and gradient at a control vector."""
        (J, aux), g = self.vg(jnp.asarray(U_flat), self.inputs)
        return float(J), aux, np.asarray(g)

    def objective(self, U_flat) -> float:
        return self.evaluate(U_flat)[0]


@dataclass
class TreeSolution:
    variant: PlannerVariant
    shape_signature: Tuple
    states: np.ndarray          # [n_nodes, n]
    u_e_by_node: np.ndarray     # [n_nodes, m_e]; zero rows at leaves
    u_o_in: np.ndarray          # [n_nodes, m_o]; row 0 = first child's
    u_o_tilde_in: np.ndarray
    dbar_in: np.ndarray
    theta_in: np.ndarray
    mode_probs: np.ndarray      # [n_nodes, n_modes]
    means: np.ndarray
    covs: np.ndarray
    path_probs: np.ndarray
    slacks: Dict[int, float]
    objective: float
    tracking_cost: float
    status: str
    kkt_residual: float
    n_iter: int
    U_flat: np.ndarray

    @property
    def u_root(self) -> np.ndarray:
        return self.u_e_by_node[0].copy()


def _chain_tree(x_hat, b_sub: BeliefState, N: int, mode) -> ScenarioTree:
    tree = build_tree(x_hat, b_sub, N, 1, 1, (mode,), rng_seed=0)
    for node in tree.nodes:
        if node.parent_id is not None:
            node.theta0 = np.zeros_like(node.theta0)
            node.dbar0 = np.zeros_like(node.dbar0)
            node.freeze_samples()
    return tree


def _restrict_belief(b: BeliefState, mode) -> BeliefState:
    i = b.mode_index(mode)
    return BeliefState(
        modes=(b.modes[i],),
        mode_probs=np.array([1.0]),
        means=b.means[i : i + 1].copy(),
        covs=b.covs[i : i + 1].copy(),
    )


def assemble(
    variant,
    x_hat,
    b_hat: BeliefState,
    tree: ScenarioTree,
    shield_nodes: Mapping[int, object],
    config: PlannerConfig,
    t0: int = 0,
) -> TreeProgram:
    """Build the solvable program for one planning cycle."""
    variant = PlannerVariant.parse(variant)
    sys = config.sys
    x_hat = np.asarray(x_hat, dtype=float)
    if x_hat.shape != (sys.n,):
        raise InvalidArgumentError("x_hat has the wrong dimension")
    if shield_nodes and not variant.sharp:
        raise InvalidArgumentError(f"{variant.value} does not accept shielding constraints")
    if variant is PlannerVariant.ORACLE and config.oracle_plan is None:
        raise InvalidArgumentError("Oracle planning needs config.oracle_plan")

    reference = config.reference
    if variant in (PlannerVariant.CEMPC, PlannerVariant.CEMPC_SHARP) and config.alignment_map:
        lane = config.alignment_map.get(b_hat.map_mode())
        if lane is not None:
            reference = replace(reference, lane_y=float(lane))

    if variant.chain:
        if tree.branch_count != 1 or len(tree.modes) != 1:
            raise InvalidArgumentError(f"{variant.value} requires a chain tree")
        b_sub = _restrict_belief(b_hat, tree.modes[0]) if tree.modes[0] in b_hat.modes else b_hat
        eps_stick, q_scale = 0.0, 0.0
        measurement_on = False
    else:
        if tuple(tree.modes) != tuple(b_hat.modes):
            raise InvalidArgumentError("tree and belief mode sets differ")
        b_sub = b_hat
        eps_stick = config.transition.mode_stickiness
        q_scale = 1.0
        measurement_on = variant.measurement_in_tree

    struct = _tree_struct(tree)
    n, m_e, m_o, nt = sys.n, sys.m_e, sys.m_o, b_sub.n_theta
    N = struct.N

    trace_on = (config.objective_form == "trace") and not variant.chain
    sampled_on = (config.objective_form == "sampled") and not variant.chain
    oracle_mode = variant is PlannerVariant.ORACLE
    info_on = variant is PlannerVariant.EDSMPC
    soft_on = config.soft_safety_weight != 0.0
    beh = None if oracle_mode else config.beh
    flags = (measurement_on, oracle_mode, trace_on, sampled_on, info_on, soft_on)
    vg, vg_fast = _get_rollout(sys, beh, struct, flags)

    x_ref = reference.trajectory(x_hat[sys.agent_slice(0)], N, sys.dt, t0=t0)
    q_proc = config.transition.noise_matrix(nt) * q_scale

    theta0 = tuple(
        jnp.asarray(np.stack([tree.nodes[i].theta0 for i in struct.node_ids[t]]))
        for t in range(1, N + 1)
    )
    dbar0 = tuple(
        jnp.asarray(np.stack([tree.nodes[i].dbar0 for i in struct.node_ids[t]]))
        for t in range(1, N + 1)
    )

    # Fixed-size shielding constraint slots (zeros where inactive), so the
    # compiled rollout is reused no matter which nodes are flagged.
    sh = {k: [] for k in ("mask", "H", "A", "Be", "Bo", "dstar", "xbar")}
    local_of = {nid: i for t in range(N + 1) for i, nid in enumerate(struct.node_ids[t])}
    depth_of = {nid: t for t in range(N + 1) for nid in struct.node_ids[t]}
    for t in range(N):
        c = struct.depth_counts[t]
        sh["mask"].append(np.zeros(c))
        sh["H"].append(np.zeros((c, n)))
        sh["A"].append(np.zeros((c, n, n)))
        sh["Be"].append(np.zeros((c, n, m_e)))
        sh["Bo"].append(np.zeros((c, n, m_o)))
        sh["dstar"].append(np.zeros((c, n)))
        sh["xbar"].append(np.zeros((c, n)))
    slack_ids = []
    for nid in sorted(shield_nodes):
        data = shield_nodes[nid]
        t = depth_of[nid]
        if t >= N:
            continue  # leaves carry no control; nothing to constrain
        i = local_of[nid]
        sh["mask"][t][i] = 1.0
        sh["H"][t][i] = data.H
        sh["A"][t][i] = data.A
        sh["Be"][t][i] = data.B_e
        sh["Bo"][t][i] = data.B_o
        sh["dstar"][t][i] = data.d_star
        sh["xbar"][t][i] = data.x_bar
        slack_ids.append(nid)

    sd = np.asarray(sys.disturbance_covariance)
    try:
        np.linalg.cholesky(sd)
    except np.linalg.LinAlgError:
        raise InvalidArgumentError(
            "the planner needs a positive-definite disturbance covariance"
        )
    olo, ohi = sys.other_control_bounds
    inputs = {
        "x0": jnp.asarray(x_hat),
        "sigma_d_inv": jnp.asarray(np.linalg.inv(sd)),
        "logdet_sigma_d": jnp.asarray(float(np.linalg.slogdet(sd)[1])),
        "probs0": jnp.asarray(b_sub.mode_probs),
        "mu0": jnp.asarray(b_sub.means),
        "cov0": jnp.asarray(b_sub.covs),
        "theta0": theta0,
        "dbar0": dbar0,
        "Q": jnp.asarray(config.cost.Q),
        "Q_F": jnp.asarray(config.cost.Q_F),
        "R": jnp.asarray(config.cost.R),
        "x_ref": jnp.asarray(x_ref),
        "sigma_d": jnp.asarray(sys.disturbance_covariance),
        "eps_stick": jnp.asarray(float(eps_stick)),
        "q_proc": jnp.asarray(q_proc),
        "lambda_info": jnp.asarray(float(config.lambda_info)),
        "soft_w": jnp.asarray(float(config.soft_safety_weight)),
        "soft_r": jnp.asarray(float(config.soft_safety_radius)),
        "corridor_y": jnp.asarray(float(config.corridor_center)),
        "corridor_half": jnp.asarray(float(config.corridor_halfwidth)),
        "gamma": jnp.asarray(float(config.gamma)),
        "rcbf_penalty": jnp.asarray(float(config.rcbf_penalty)),
        "proj_penalty": jnp.asarray(float(config.proj_penalty)),
        "oracle_uo": jnp.asarray(
            np.clip(np.asarray(config.oracle_plan, dtype=float)[:N], olo, ohi)
            if oracle_mode
            else np.zeros((N, m_o))
        ),
        "sh_mask": tuple(jnp.asarray(a) for a in sh["mask"]),
        "sh_H": tuple(jnp.asarray(a) for a in sh["H"]),
        "sh_A": tuple(jnp.asarray(a) for a in sh["A"]),
        "sh_Be": tuple(jnp.asarray(a) for a in sh["Be"]),
        "sh_Bo": tuple(jnp.asarray(a) for a in sh["Bo"]),
        "sh_dstar": tuple(jnp.asarray(a) for a in sh["dstar"]),
        "sh_xbar": tuple(jnp.asarray(a) for a in sh["xbar"]),
    }

    lo_e, hi_e = sys.ego.control_bounds
    n_ctrl = sum(struct.depth_counts[:-1])
    lo = np.tile(lo_e, n_ctrl)
    hi = np.tile(hi_e, n_ctrl)

    kinds = ["dynamics", "bounds", "action-projection"]
    if not variant.chain:
        kinds.append("belief-transition")
        if measurement_on:
            kinds.append("belief-measurement")
    if slack_ids:
        kinds.append("rcbf")

    return TreeProgram(
        variant=variant,
        tree=tree,
        config=config,
        struct=struct,
        inputs=inputs,
        lo=lo,
        hi=hi,
        vg=vg,
        vg_fast=vg_fast,
        constraint_kinds=tuple(kinds),
        slack_node_ids=tuple(slack_ids),
        x_hat=x_hat,
        b_hat=b_hat,
        b_sub=b_sub,
        x_ref=x_ref,
    )


def _solution_from(program: TreeProgram, U_flat, aux, status, kkt, n_iter) -> TreeSolution:
    struct = program.struct
    tree = program.tree
    sys = program.config.sys
    n, m_e, m_o, nt = sys.n, sys.m_e, sys.m_o, program.b_sub.n_theta
    n_nodes = tree.n_nodes
    N = struct.N
    n_modes = len(struct.modes)

    states = np.zeros((n_nodes, n))
    u_e = np.zeros((n_nodes, m_e))
    u_o_in = np.zeros((n_nodes, m_o))
    u_o_tilde = np.zeros((n_nodes, m_o))
    dbar_in = np.zeros((n_nodes, n))
    theta_in = np.zeros((n_nodes, nt))
    probs = np.zeros((n_nodes, n_modes))
    means = np.zeros((n_nodes, n_modes, nt))
    covs = np.zeros((n_nodes, n_modes, nt, nt))
    path_p = np.zeros(n_nodes)

    sizes = struct.ctrl_sizes(m_e)
    offs = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    U_np = np.asarray(U_flat, dtype=float)
    for t in range(N):
        ids = list(struct.node_ids[t])
        u_e[ids] = U_np[offs[t] : offs[t + 1]].reshape(len(ids), m_e)

    for t in range(N + 1):
        ids = list(struct.node_ids[t])
        states[ids] = np.asarray(aux["states"][t])
        probs[ids] = np.asarray(aux["bel_probs"][t])
        means[ids] = np.asarray(aux["bel_mu"][t])
        covs[ids] = np.asarray(aux["bel_cov"][t])
        path_p[ids] = np.asarray(aux["path_ps"][t])
        if t >= 1:
            uo_tilde_t, uo_t, dbar_t, theta_t = (np.asarray(a) for a in aux["edges"][t - 1])
            u_o_in[ids] = uo_t
            u_o_tilde[ids] = uo_tilde_t
            dbar_in[ids] = dbar_t
            theta_in[ids] = theta_t

    first = tree.nodes[0].child_ids[0]
    u_o_in[0] = u_o_in[first]
    u_o_tilde[0] = u_o_tilde[first]
    dbar_in[0] = dbar_in[first]

    slacks: Dict[int, float] = {}
    for t in range(N):  # slack arrays are per control depth, 0..N-1
        arr = np.asarray(aux["slacks"][t])
        mask = np.asarray(program.inputs["sh_mask"][t])
        for i, nid in enumerate(struct.node_ids[t]):
            if mask[i] > 0:
                slacks[nid] = float(arr[i])

    obj = float(np.asarray(aux["tracking_cost"]))  # replaced below by full J
    (J, _), _ = program.vg(jnp.asarray(U_np), program.inputs)
    if status == "converged" and any(s < -1e-8 for s in slacks.values()):
        status = "infeasible-relaxed"
    return TreeSolution(
        variant=program.variant,
        shape_signature=tree.shape_signature(),
        states=states,
        u_e_by_node=u_e,
        u_o_in=u_o_in,
        u_o_tilde_in=u_o_tilde,
        dbar_in=dbar_in,
        theta_in=theta_in,
        mode_probs=probs,
        means=means,
        covs=covs,
        path_probs=path_p,
        slacks=slacks,
        objective=float(J),
        tracking_cost=float(np.asarray(aux["tracking_cost"])),
        status=status,
        kkt_residual=float(kkt),
        n_iter=int(n_iter),
        U_flat=U_np.copy(),
    )


class _ShieldRepack:
    """Re-packs a program's stored shielding arrays as constraint data."""

    def __init__(self, program: TreeProgram, nid: int):
        struct = program.struct
        depth_of = {m: t for t in range(struct.N + 1) for m in struct.node_ids[t]}
        local_of = {m: i for t in range(struct.N + 1) for i, m in enumerate(struct.node_ids[t])}
        t, i = depth_of[nid], local_of[nid]
        self.node_id = nid
        self.H = np.asarray(program.inputs["sh_H"][t])[i]
        self.A = np.asarray(program.inputs["sh_A"][t])[i]
        self.B_e = np.asarray(program.inputs["sh_Be"][t])[i]
        self.B_o = np.asarray(program.inputs["sh_Bo"][t])[i]
        self.d_star = np.asarray(program.inputs["sh_dstar"][t])[i]
        self.x_bar = np.asarray(program.inputs["sh_xbar"][t])[i]


def _vg_np(program: TreeProgram, U):
    J, g = program.vg_fast(jnp.asarray(U), program.inputs)
    return float(J), np.asarray(g)


def _shifted_guess(program: TreeProgram, sol: TreeSolution) -> np.ndarray:
    """Previous controls shifted one stage (depth means), last duplicated."""
    struct = program.struct
    N = struct.N
    per_depth = []
    same_shape = sol.shape_signature == program.tree.shape_signature()
    for t in range(N):
        src_t = min(t + 1, N - 1)
        if same_shape:
            ids = list(struct.node_ids[src_t])
            mean_u = np.mean(sol.u_e_by_node[ids], axis=0)
        else:
            mean_u = sol.u_e_by_node[0]
        per_depth.append(np.tile(mean_u, struct.depth_counts[t]))
    return np.concatenate(per_depth)


def _cempc_guess(program: TreeProgram, x_hat, b_hat, t0: int = 0) -> np.ndarray:
    """Step 1 of the pipeline: a certainty-equivalent chain solve."""
    cfg = program.config
    mode = b_hat.map_mode()
    ctree = _chain_tree(x_hat, _restrict_belief(b_hat, mode), cfg.N, mode)
    cprog = assemble(PlannerVariant.CEMPC, x_hat, b_hat, ctree, {}, cfg, t0=t0)
    res = minimize_box(
        lambda U: _vg_np(cprog, U),
        np.zeros(cprog.n_controls),
        cprog.lo,
        cprog.hi,
        kkt_tol=cfg.kkt_tol,
        max_iter=cfg.pre_max_iter or cfg.max_iter,
        trust_init=cfg.trust_init,
    )
    U_chain = res.x.reshape(cfg.N, cfg.sys.m_e)
    parts = [np.tile(U_chain[t], program.struct.depth_counts[t]) for t in range(program.struct.N)]
    return np.concatenate(parts)


def initialize(
    program: TreeProgram, prev_solution: Optional[TreeSolution], x_hat, b_hat, t0: int = 0
) -> np.ndarray:
    """Initial-guess pipeline.

    Chain programs and non-dual trees warm-start from the shifted previous
    solution (certainty-equivalent chain solve on a cold start).  Dual
    trees additionally run a non-dual pre-solve of the same tree (same
    frozen samples, measurement update replaced by the transition model);
    its controls are the guess, and forward-propagating beliefs along
    them is exactly what the main rollout performs at that guess.
    """
    cfg = program.config

    def warm_start() -> np.ndarray:
        if prev_solution is not None:
            return np.clip(_shifted_guess(program, prev_solution), program.lo, program.hi)
        if cfg.use_cempc_init:
            try:
                return np.clip(_cempc_guess(program, x_hat, b_hat, t0=t0), program.lo, program.hi)
            except Exception as exc:
                warnings.warn(
                    f"certainty-equivalent init failed ({exc}); zero rollout guess",
                    RuntimeWarning,
                )
        return np.zeros(program.n_controls)

    warm = warm_start()
    if program.variant.chain or not program.uses_measurement_update:
        return warm

    nd_variant = PlannerVariant.NDSMPC_SHARP if program.variant.sharp else PlannerVariant.NDSMPC
    try:
        shield_map = {nid: _ShieldRepack(program, nid) for nid in program.slack_node_ids}
        nd_prog = assemble(nd_variant, x_hat, b_hat, program.tree, shield_map, cfg, t0=t0)
        res = minimize_box(
            lambda U: _vg_np(nd_prog, U),
            warm,
            nd_prog.lo,
            nd_prog.hi,
            kkt_tol=cfg.kkt_tol,
            max_iter=cfg.pre_max_iter or cfg.max_iter,
            trust_init=cfg.trust_init,
        )
        return res.x
    except Exception as exc:
        warnings.warn(f"non-dual pre-solve failed ({exc}); zero rollout guess", RuntimeWarning)
        return warm


def solve(program: TreeProgram, guess) -> TreeSolution:
    """Minimize the tree program from a guess; never returns a worse point."""
    guess = np.asarray(guess, dtype=float)
    if guess.shape != program.lo.shape:
        raise InvalidArgumentError("guess has the wrong number of controls")
    res = minimize_box(
        lambda U: _vg_np(program, U),
        guess,
        program.lo,
        program.hi,
        kkt_tol=program.config.kkt_tol,
        max_iter=program.config.max_iter,
        trust_init=program.config.trust_init,
    )
    (_, aux), _ = program.vg(jnp.asarray(res.x), program.inputs)
    return _solution_from(program, res.x, aux, res.status, res.kkt_residual, res.n_iter)


def tree_objective(
    tree: ScenarioTree,
    controls,
    states,
    beliefs,
    form: str,
    cost: CostSpec,
    x_ref,
    ego_slice: slice = slice(0, 4),
    heading_offset: int = 2,
    sigma_x_nodes=None,
    lambda_info: float = 0.0,
) -> float:
    """Score a tree trajectory independently of the compiled rollout.

    ``controls``/``states`` are node-indexed arrays; ``beliefs`` is either
    a [n_nodes, n_modes] array of mode probabilities or a list of
    BeliefState (required when ``lambda_info`` is nonzero).  The trace
    form adds tr(Q Sigma_x) over the supplied per-node state covariances.
    """
    if form not in ("sampled", "trace"):
        raise InvalidArgumentError("form must be 'sampled' or 'trace'")
    states = np.asarray(states, dtype=float)
    controls = np.asarray(controls, dtype=float)
    x_ref = np.asarray(x_ref, dtype=float)
    if isinstance(beliefs, (list, tuple)):
        probs = np.stack([b.mode_probs for b in beliefs])
    else:
        probs = np.asarray(beliefs, dtype=float)
    mode_pos = {m: i for i, m in enumerate(tree.modes)}

    P = np.zeros(tree.n_nodes)
    P[0] = 1.0
    for node in sorted(tree.nodes, key=lambda nd: nd.depth):
        if node.parent_id is None:
            continue
        if node.kind == "dual":
            P[node.id] = (
                P[node.parent_id]
                * (1.0 / tree.branch_count)
                * probs[node.parent_id, mode_pos[node.mode]]
            )
        else:
            P[node.id] = P[node.parent_id]

    leaf = set(tree.leaf_ids)
    J = 0.0
    for node in tree.nodes:
        e = states[node.id, ego_slice] - x_ref[node.depth]
        e[heading_offset] -= 2 * np.pi * np.ceil((e[heading_offset] - np.pi) / (2 * np.pi))
        if node.id in leaf:
            J += P[node.id] * float(e @ cost.Q_F @ e)
        else:
            u = controls[node.id]
            J += P[node.id] * float(e @ cost.Q @ e + u @ cost.R @ u)
    if form == "trace":
        if sigma_x_nodes is None:
            raise InvalidArgumentError("trace form needs per-node state covariances")
        Qj = np.zeros((states.shape[1], states.shape[1]))
        Qj[ego_slice, ego_slice] = cost.Q
        for node in tree.nodes:
            J += float(np.trace(Qj @ np.asarray(sigma_x_nodes)[node.id]))
    if lambda_info:
        if not isinstance(beliefs, (list, tuple)):
            raise InvalidArgumentError("the entropy term needs full BeliefState objects")
        for node in tree.nodes:
            if node.kind == "dual":
                J += lambda_info * (
                    beliefs[node.id].entropy() - beliefs[node.parent_id].entropy()
                )
    return float(J)


def plan(
    variant,
    x_hat,
    b_hat: BeliefState,
    prev_solution: Optional[TreeSolution],
    config: PlannerConfig,
    cycle: int = 0,
) -> Tuple[np.ndarray, TreeSolution]:
    """One receding-horizon cycle: tree, shield screen, assemble, init, solve."""
    variant = PlannerVariant.parse(variant)
    sys = config.sys
    x_hat = np.asarray(x_hat, dtype=float)

    if variant.chain:
        mode = b_hat.map_mode()
        tree = _chain_tree(x_hat, _restrict_belief(b_hat, mode), config.N, mode)
    else:
        tree = build_tree(
            x_hat,
            b_hat,
            config.N,
            config.N_d,
            config.K,
            config.beh.modes,
            rng_seed=np.random.SeedSequence([int(config.seed), int(cycle)]),
        )

    shield_nodes = {}
    if variant.sharp:
        if config.shield is None:
            raise InvalidArgumentError(f"{variant.value} requires a shielding mechanism")
        shield_nodes = identify_shielding_nodes(prev_solution, tree, config.shield, sys)

    program = assemble(variant, x_hat, b_hat, tree, shield_nodes, config, t0=cycle)
    guess = initialize(program, prev_solution, x_hat, b_hat, t0=cycle)
    try:
        solution = solve(program, guess)
    except NumericalFailureError:
        u0 = config.shield.fallback(x_hat) if config.shield is not None else np.zeros(sys.m_e)
        zeros = np.zeros(program.n_controls)
        (_, aux), _ = program.vg(jnp.asarray(zeros), program.inputs)
        solution = _solution_from(program, zeros, aux, "numerical-failure", np.inf, 0)
        solution.u_e_by_node[0] = u0
        return u0, solution
    return solution.u_root, solution
