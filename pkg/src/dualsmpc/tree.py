"""Dynamic scenario trees with frozen standard-normal samples.

The tree branches over (mode, weight-sample) pairs for the first
``dual_horizon`` stages and extends each scenario as a chain afterwards.
Samples are drawn once at construction from the standard normal and
frozen; during optimization they are transformed online with the
state- and input-dependent belief mean and covariance, which is what
makes the tree "dynamic".
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .behavior import BehaviorModel, combined_covariance
from .belief import BeliefState
from .dynamics import JointSystem
from .errors import DegenerateCovarianceError, InvalidArgumentError


@dataclass
class ScenarioNode:
    """One node: a (time, mode, frozen sample) triple plus tree wiring."""

    id: int
    parent_id: Optional[int]
    depth: int
    mode: Optional[str]
    theta0: np.ndarray
    dbar0: np.ndarray
    kind: str  # "root" | "dual" | "exploitation"
    child_ids: Tuple[int, ...] = ()
    is_shielding: bool = False

    def freeze_samples(self):
        self.theta0 = np.asarray(self.theta0, dtype=float)
        self.dbar0 = np.asarray(self.dbar0, dtype=float)
        self.theta0.flags.writeable = False
        self.dbar0.flags.writeable = False


@dataclass
class ScenarioTree:
    nodes: List[ScenarioNode]
    horizon: int
    dual_horizon: int
    branch_count: int
    modes: Tuple[str, ...]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def leaf_ids(self) -> Tuple[int, ...]:
        return tuple(n.id for n in self.nodes if not n.child_ids)

    @property
    def dual_ids(self) -> Tuple[int, ...]:
        return tuple(n.id for n in self.nodes if n.kind == "dual")

    @property
    def exploitation_ids(self) -> Tuple[int, ...]:
        return tuple(n.id for n in self.nodes if n.kind == "exploitation")

    def depth_ids(self, t: int) -> Tuple[int, ...]:
        return tuple(n.id for n in self.nodes if n.depth == t)

    def shape_signature(self) -> Tuple:
        """Static shape key: trees with equal signatures can be zipped."""
        return (self.horizon, self.dual_horizon, self.branch_count, self.modes, self.n_nodes)


def build_tree(x_hat, b_hat: BeliefState, N: int, N_d: int, K: int, modes, rng_seed) -> ScenarioTree:
    """Construct the scenario tree.

    Depths 0 .. N_d-1 branch into |modes| * K children each (one frozen
    weight/disturbance sample pair per child); depths N_d .. N-1 extend
    each scenario with a single zero-sample child that inherits its
    parent's mode.  Sampling is deterministic given ``rng_seed``.
    """
    modes = tuple(modes)
    if not (1 <= N_d <= N):
        raise InvalidArgumentError(f"need 1 <= N_d <= N, got N_d={N_d}, N={N}")
    if K < 1:
        raise InvalidArgumentError("branch count K must be >= 1")
    if len(modes) < 1:
        raise InvalidArgumentError("mode set must be nonempty")
    x_hat = np.asarray(x_hat, dtype=float)
    n = x_hat.shape[0]
    nt = b_hat.n_theta
    rng = np.random.default_rng(rng_seed)

    nodes: List[ScenarioNode] = [
        ScenarioNode(0, None, 0, None, np.zeros(nt), np.zeros(n), "root")
    ]
    frontier = [0]
    for t in range(N):
        nxt = []
        for pid in frontier:
            parent = nodes[pid]
            kids = []
            if t < N_d:
                for mode in modes:
                    th = rng.standard_normal((K, nt))
                    db = rng.standard_normal((K, n))
                    for k in range(K):
                        nid = len(nodes)
                        nodes.append(
                            ScenarioNode(nid, pid, t + 1, mode, th[k], db[k], "dual")
                        )
                        kids.append(nid)
            else:
                nid = len(nodes)
                nodes.append(
                    ScenarioNode(
                        nid, pid, t + 1, parent.mode, np.zeros(nt), np.zeros(n), "exploitation"
                    )
                )
                kids.append(nid)
            parent.child_ids = tuple(kids)
            nxt.extend(kids)
        frontier = nxt

    for node in nodes:
        node.freeze_samples()

    b = len(modes) * K
    expect = sum(b**t for t in range(N_d + 1)) + (N - N_d) * b**N_d
    assert len(nodes) == expect, "node count does not match the branching schedule"
    return ScenarioTree(nodes=nodes, horizon=N, dual_horizon=N_d, branch_count=K, modes=modes)


def transform_samples(
    node: ScenarioNode,
    b_parent: BeliefState,
    x_parent,
    u_e_parent,
    sys: JointSystem,
    beh: BehaviorModel,
) -> Tuple[np.ndarray, np.ndarray]:
    """Turn a node's frozen z-scores into (theta, dbar) samples.

    theta = mu + cov^(1/2) z via Cholesky of the parent belief's per-mode
    covariance; dbar uses the combined disturbance covariance at the
    parent belief's conditional weight mean.
    """
    if node.kind == "root":
        raise InvalidArgumentError("the root node carries no samples")
    i = b_parent.mode_index(node.mode)
    mu, cov = b_parent.means[i], b_parent.covs[i]
    try:
        L = np.linalg.cholesky(0.5 * (cov + cov.T))
    except np.linalg.LinAlgError:
        raise DegenerateCovarianceError("belief covariance is not positive definite")
    theta = mu + L @ node.theta0
    S = combined_covariance(sys, beh, node.mode, x_parent, u_e_parent, mu)
    try:
        Ld = np.linalg.cholesky(0.5 * (S + S.T))
    except np.linalg.LinAlgError:
        raise DegenerateCovarianceError("combined covariance is not positive definite")
    dbar = Ld @ node.dbar0
    return theta, dbar


def path_probability(tree: ScenarioTree, node_id: int, b: BeliefState) -> float:
    """Product of edge weights from the root to ``node_id``.

    Dual edges weigh 1/K for the weight sample times the supplied
    belief's probability of the edge's mode; exploitation edges weigh 1.
    The planner propagates mode probabilities along each branch
    internally; this standalone form evaluates all branching levels at
    the caller's belief.
    """
    node = tree.nodes[node_id]
    p = 1.0
    while node.parent_id is not None:
        if node.kind == "dual":
            p *= (1.0 / tree.branch_count) * float(b.mode_probs[b.mode_index(node.mode)])
        node = tree.nodes[node.parent_id]
    return p
