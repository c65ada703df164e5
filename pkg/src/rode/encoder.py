"""Snapshot encoder for cascade state.

A one-layer graph convolution places every user in representation space;
each infection event then updates the infected users and the message
coordinate through attention-weighted aggregation over the growing message
graph. Coordinates live in a single (N+1, d) tensor with the message row
last, so downstream curvature code can treat message and users uniformly.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import data
from . import numerics as nm
from .config import RunConfig
from .errors import ContractViolation

# structural-graph copies of attention weights must stay strictly inside (0,1)
_W_LO = np.nextafter(0.0, 1.0)
_W_HI = np.nextafter(1.0, 0.0)


def gcn_norm(adjacency: np.ndarray) -> np.ndarray:
    """Symmetrically normalized adjacency with self-loops."""
    a = adjacency + np.eye(adjacency.shape[0])
    dinv = 1.0 / np.sqrt(a.sum(axis=1))
    return a * dinv[:, None] * dinv[None, :]


def register_params(ps: nm.ParamStore, rng: np.random.Generator, feature_dim: int, cfg: RunConfig) -> None:
    d, T = cfg.d, cfg.time_dim
    ps.add("enc.gcn.W", nm.glorot(rng, feature_dim, d))
    # geometric frequency ladder covers several time scales at init
    ps.add("enc.time.omega", 10.0 ** (-4.0 * np.arange(T) / max(T - 1, 1)))
    ps.add("enc.time.theta", np.zeros(T))
    ps.add("enc.attn.W1", nm.glorot(rng, d + T, d))
    ps.add("enc.attn.b1", np.zeros(d))
    ps.add("enc.attn.W2", nm.glorot(rng, d, d))
    ps.add("enc.attn.b2", np.zeros(d))
    ps.add("enc.attn.w3", nm.glorot(rng, d, 1, shape=(d,)))
    ps.add("enc.attn.b3", np.zeros(1))


def encode_time(omega: nm.Tensor, theta: nm.Tensor, t: float) -> nm.Tensor:
    """Cosine features sqrt(1/T) * cos(omega * t + theta); magnitude-bounded."""
    T = omega.size
    return float(np.sqrt(1.0 / T)) * (float(t) * omega + theta).cos()


@dataclasses.dataclass
class EmbeddingState:
    """Coordinates of all users plus the message at one cascade step.

    `adjacency` mirrors the message graph's weighted links but stays on the
    gradient tape (the structural TemporalUMGraph keeps a detached copy).
    `time` is the snapshot timestamp; the step-0 state carries t^1 so the
    first update sees t_prev = t_now.
    """

    step: int
    coords: nm.Tensor  # (N+1, d), message row last
    time: float
    adjacency: nm.Tensor  # (N+1, N+1)

    @property
    def num_users(self) -> int:
        return self.coords.shape[0] - 1

    def user_embeddings(self) -> nm.Tensor:
        return self.coords[: self.num_users]

    def message_embedding(self) -> nm.Tensor:
        return self.coords[self.num_users]


def user_matrix(
    graph: data.SocialGraph,
    params: nm.ParamStore,
    cfg: RunConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> nm.Tensor:
    """Step-0 user embeddings: ReLU of one normalized graph convolution."""
    ax = nm.Tensor(gcn_norm(graph.adjacency) @ graph.features)
    h0 = (ax @ params["enc.gcn.W"]).relu()
    if training:
        h0 = nm.dropout(h0, cfg.dropout, rng, True)
    return h0


def start_state(h0: nm.Tensor, cascade: data.Cascade | None, cfg: RunConfig) -> EmbeddingState:
    n = h0.shape[0]
    if cfg.m0 == "root" and cascade is not None:
        m0 = h0[cascade.users[0]]
    else:
        m0 = h0.mean(axis=0)
    coords = nm.concat([h0, nm.stack([m0])], axis=0)
    t1 = cascade.events[0][1] if cascade is not None else 0.0
    return EmbeddingState(0, coords, t1, nm.Tensor(np.zeros((n + 1, n + 1))))


def initial_embeddings(
    graph: data.SocialGraph,
    params: nm.ParamStore,
    cfg: RunConfig,
    cascade: data.Cascade | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> EmbeddingState:
    """Step-0 snapshot; message starts at the first infected user's
    coordinate (or the mean coordinate when no cascade is given)."""
    return start_state(user_matrix(graph, params, cfg, training, rng), cascade, cfg)


def _attention_batch(
    params: nm.ParamStore,
    pair_rows: nm.Tensor,
    time_feat: nm.Tensor,
    cfg: RunConfig,
    training: bool,
    rng: np.random.Generator | None,
) -> nm.Tensor:
    """Shared MLP over (h_i + h_j || t-feature) rows; sigmoid outputs in (0,1)."""
    d = cfg.d
    w1, b1 = params["enc.attn.W1"], params["enc.attn.b1"]
    # split the first layer so the shared time feature is added once per row
    z = (pair_rows @ w1[:d] + (time_feat @ w1[d:] + b1)).tanh()
    if training:
        z = nm.dropout(z, cfg.dropout, rng, True)
    z = (z @ params["enc.attn.W2"] + params["enc.attn.b2"]).tanh()
    if training:
        z = nm.dropout(z, cfg.dropout, rng, True)
    return (z @ params["enc.attn.w3"] + params["enc.attn.b3"]).sigmoid()


def attention_weight(
    h_i: nm.Tensor,
    h_j: nm.Tensor,
    t_now: nm.Tensor,
    t_prev: nm.Tensor,
    params: nm.ParamStore,
    cfg: RunConfig,
) -> nm.Tensor:
    """Pairwise link weight; symmetric in (i, j) because inputs are summed."""
    rows = nm.stack([h_i + h_j])
    return _attention_batch(params, rows, t_now + t_prev, cfg, False, None)[0]


def step_update(
    state: EmbeddingState,
    g_m: data.TemporalUMGraph,
    event: tuple[int, float],
    prev_time: float,
    params: nm.ParamStore,
    cfg: RunConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[EmbeddingState, data.TemporalUMGraph]:
    """Process one infection: grow the message graph with fresh attention
    weights, re-aggregate every infected user, then recenter the message."""
    if state.step != g_m.step:
        raise ContractViolation(f"state step {state.step} != graph step {g_m.step}")
    user, t_now = int(event[0]), float(event[1])
    n1 = g_m.num_users + 1

    omega, theta = params["enc.time.omega"], params["enc.time.theta"]
    tf = encode_time(omega, theta, t_now) + encode_time(omega, theta, prev_time)

    others = [g_m.message_node] + list(g_m.infected)
    pair_rows = state.coords[user] + state.coords[np.asarray(others, dtype=np.intp)]
    w = _attention_batch(params, pair_rows, tf, cfg, training, rng)

    adj = state.adjacency + nm.scatter_symmetric(w, [(user, o) for o in others], n1)
    detached = np.clip(w.data, _W_LO, _W_HI)
    weights = {data.MESSAGE: detached[0]}
    weights.update({o: detached[i + 1] for i, o in enumerate(g_m.infected)})
    g2 = data.grow_um_graph(g_m, (user, t_now), weights)

    # every infected user's neighborhood changed (each gains a link to `user`)
    touched = np.asarray(g2.infected, dtype=np.intp)
    agg = adj[touched] @ state.coords
    new_rows = (state.coords[touched] + agg).sigmoid()
    coords = nm.merge_rows(state.coords, new_rows, touched)

    m_idx = g2.message_node
    w_m = adj[m_idx][touched]
    m_new = (state.coords[m_idx] + w_m @ coords[touched]).sigmoid()
    coords = nm.merge_rows(coords, nm.stack([m_new]), np.asarray([m_idx], dtype=np.intp))

    return EmbeddingState(state.step + 1, coords, t_now, adj), g2


@dataclasses.dataclass
class CascadeRun:
    """Full unrolled cascade: states[k] and graphs[k] are the step-k snapshot."""

    cascade: data.Cascade
    states: list
    graphs: list

    @property
    def length(self) -> int:
        return len(self.states) - 1


def unroll(
    graph: data.SocialGraph,
    cascade: data.Cascade,
    params: nm.ParamStore,
    cfg: RunConfig,
    h0: nm.Tensor | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
    steps: int | None = None,
) -> CascadeRun:
    """Run the recursion over the first `steps` events (default: all)."""
    limit = cascade.length if steps is None else steps
    if not (1 <= limit <= cascade.length):
        raise ContractViolation(f"steps {limit} outside [1, {cascade.length}]")
    if h0 is None:
        h0 = user_matrix(graph, params, cfg, training, rng)
    state = start_state(h0, cascade, cfg)
    g_m = data.TemporalUMGraph.empty(graph.num_users)
    states, graphs = [state], [g_m]
    prev_t = state.time
    for k in range(limit):
        state, g_m = step_update(state, g_m, cascade.events[k], prev_t, params, cfg, training, rng)
        prev_t = state.time
        states.append(state)
        graphs.append(g_m)
    return CascadeRun(cascade, states, graphs)
