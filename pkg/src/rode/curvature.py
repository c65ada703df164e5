"""Message-to-user curvature scoring on the growing message graph.

The next-infected ranking treats a user as "close" to the message when the
lazy-walk neighborhoods of the two nodes are cheap to transport into each
other relative to their coordinate distance. Transport cost is scored by a
differentiable lower bound: one affine potential with weight norm kept <= 1,
averaged by the same lazy-walk matrix that defines the mass distributions
(so the bound is a true dual feasible value; the exact LP lives here too,
as a verification oracle).
"""

from __future__ import annotations

import dataclasses
import logging

import numpy as np
from scipy import optimize

from . import data
from . import numerics as nm
from .config import RunConfig
from .errors import ContractViolation

log = logging.getLogger("rode.curvature")

# distance floor in the curvature ratio
EPS_DIST = 1e-8


@dataclasses.dataclass
class MassDistribution:
    """Lazy-walk mass around one node: alpha stays, the rest spreads evenly."""

    center: int
    support: tuple  # center first, then neighbors in index order
    probabilities: np.ndarray
    alpha: float


def mass_distribution(g_m: data.TemporalUMGraph, node: int, alpha: float) -> MassDistribution:
    if not (0 <= node <= g_m.num_users):
        raise ContractViolation(f"node {node} outside the message-graph index range")
    neighbors = g_m.neighbors(node)
    if neighbors.size == 0:
        return MassDistribution(node, (node,), np.array([1.0]), alpha)
    probs = np.empty(neighbors.size + 1)
    probs[0] = alpha
    probs[1:] = (1.0 - alpha) / neighbors.size
    return MassDistribution(node, (node, *neighbors.tolist()), probs, alpha)


def wasserstein_lp(p: MassDistribution, q: MassDistribution, coords: np.ndarray) -> float:
    """Exact transport cost between two mass distributions (test oracle).

    coords rows are node positions; ground cost is Euclidean. Solved as the
    standard transportation LP, which is always feasible (balanced masses).
    """
    a = np.asarray(coords)[list(p.support)]
    b = np.asarray(coords)[list(q.support)]
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    m, n = cost.shape
    # flow conservation: rows ship exactly p, columns receive exactly q
    a_eq = np.zeros((m + n, m * n))
    for i in range(m):
        a_eq[i, i * n : (i + 1) * n] = 1.0
    for j in range(n):
        a_eq[m + j, j::n] = 1.0
    b_eq = np.concatenate([p.probabilities, q.probabilities])
    res = optimize.linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise ContractViolation(f"transport LP failed: {res.message}")
    return float(res.fun)


@dataclasses.dataclass
class LipschitzHead:
    """Affine potential applied row-wise; weight norm <= 1 keeps it a valid
    lower-bound witness for transport cost under the Euclidean metric."""

    weight: nm.Tensor  # (d,)
    bias: nm.Tensor  # (1,)

    def apply(self, coords: nm.Tensor) -> nm.Tensor:
        return coords @ self.weight + self.bias

    @staticmethod
    def from_params(params: nm.ParamStore) -> "LipschitzHead":
        return LipschitzHead(params["curv.head.w"], params["curv.head.b"])


def register_params(ps: nm.ParamStore, rng: np.random.Generator, cfg: RunConfig) -> None:
    w = nm.glorot(rng, cfg.d, 1, shape=(cfg.d,))
    w = w / max(1.0, float(np.linalg.norm(w)))
    ps.add("curv.head.w", w)
    ps.add("curv.head.b", np.zeros(1))


def project_lipschitz(params: nm.ParamStore) -> None:
    """Rescale the head weight back into the unit ball (no-op inside it)."""
    w = params["curv.head.w"]
    norm = float(np.linalg.norm(w.data))
    if norm > 1.0:
        w.data = w.data / norm


def walk_matrix(g_m: data.TemporalUMGraph, alpha: float) -> np.ndarray:
    """Lazy-walk averaging matrix: rows are exactly each node's mass
    distribution, so matrix-vector products compute expectations of a
    potential. Links count equally regardless of attention weight; nodes
    with no links keep all mass at themselves."""
    ind = g_m.indicator()
    deg = ind.sum(axis=1)
    n = ind.shape[0]
    out = np.zeros((n, n))
    linked = deg > 0
    if linked.any():
        out[linked] = (1.0 - alpha) * ind[linked] / deg[linked, None]
    idx = np.arange(n)
    out[idx, idx] = np.where(linked, alpha, 1.0)
    return out


def surrogate_wasserstein(
    g_m: data.TemporalUMGraph,
    coords: nm.Tensor,
    node_a: int,
    node_b: int,
    head: LipschitzHead,
    alpha: float,
) -> nm.Tensor:
    """Signed dual lower bound [L f]_a - [L f]_b; exactly antisymmetric."""
    lf = nm.Tensor(walk_matrix(g_m, alpha)) @ head.apply(coords)
    return lf[node_a] - lf[node_b]


def ricci_score_vector(
    g_m: data.TemporalUMGraph,
    coords: nm.Tensor,
    head: LipschitzHead,
    alpha: float,
    clamp_negative: bool = True,
) -> nm.Tensor:
    """Curvature of (message, user) for every user at once; shape (N,)."""
    msg = g_m.message_node
    lf = nm.Tensor(walk_matrix(g_m, alpha)) @ head.apply(coords)
    w_hat = lf[msg] - lf[:msg]
    if clamp_negative:
        w_hat = w_hat.relu()
    diff = coords[msg] - coords[:msg]
    d2 = (diff * diff).sum(axis=1)
    if (d2.data < EPS_DIST * EPS_DIST).any():
        log.debug("distance floor engaged for %d user(s)", int((d2.data < EPS_DIST**2).sum()))
    dist = d2.clamp_min(EPS_DIST * EPS_DIST).sqrt()
    return 1.0 - w_hat / dist


def ricci_curvature(
    g_m: data.TemporalUMGraph,
    coords: nm.Tensor,
    message_node: int,
    user: int,
    head: LipschitzHead,
    alpha: float,
    clamp_negative: bool = True,
) -> nm.Tensor:
    if user == message_node:
        raise ContractViolation("curvature is defined between the message and a user")
    if message_node != g_m.message_node:
        raise ContractViolation(f"message node of this graph is {g_m.message_node}")
    return ricci_score_vector(g_m, coords, head, alpha, clamp_negative)[user]


def infection_distribution(
    g_m: data.TemporalUMGraph,
    coords: nm.Tensor,
    candidates,
    infected,
    head: LipschitzHead,
    alpha: float,
    clamp_negative: bool = True,
) -> nm.Tensor:
    """Next-infection probabilities over all users; already-infected users
    get exactly zero and the rest sums to one."""
    n = g_m.num_users
    if set(candidates) != set(range(n)):
        raise ContractViolation("candidates must be the full user set")
    infected = set(infected)
    if not infected <= set(range(n)):
        raise ContractViolation("infected users must be a subset of the candidates")
    keep = np.ones(n, dtype=bool)
    keep[list(infected)] = False
    if not keep.any():
        raise ContractViolation("no uninfected candidate remains")
    scores = ricci_score_vector(g_m, coords, head, alpha, clamp_negative)
    return nm.masked_softmax(scores, keep)


def ricci_loss(runs, params: nm.ParamStore, cfg: RunConfig, denom: int | None = None) -> nm.Tensor:
    """Mean negative log-likelihood of each true next infection under the
    curvature softmax, using the previous step's snapshot; normalized by the
    total number of transitions (or by `denom`, for accumulation in chunks)."""
    head = LipschitzHead.from_params(params)
    terms = []
    for run in runs:
        n = run.graphs[0].num_users
        keep = np.ones(n, dtype=bool)
        for k in range(1, run.length + 1):
            target = run.cascade.events[k - 1][0]
            scores = ricci_score_vector(
                run.graphs[k - 1], run.states[k - 1].coords, head, cfg.alpha, cfg.clamp_negative_w
            )
            terms.append(nm.masked_nll(scores, keep, target))
            keep = keep.copy()
            keep[target] = False
    if not terms:
        raise ContractViolation("ricci_loss needs at least one transition")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / float(denom if denom is not None else len(terms))
