"""Continuous movement of users in representation space.

A per-user velocity field (static-graph GNN features plus a cosine encoding
of system time) is integrated from each user's step-1 coordinate. Training
pins the trajectory to the encoder snapshots; prediction reads off when a
target user's trajectory passes closest to the message coordinate.

The field does not depend on the current position, so a trajectory is an
explicit integral of the field; batched solves exploit that by rescaling
every row's clock into [0, 1].
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import data, encoder
from . import numerics as nm
from .config import RunConfig
from .errors import ContractViolation, ValidationError


def register_params(ps: nm.ParamStore, rng: np.random.Generator, feature_dim: int, cfg: RunConfig) -> None:
    d, T = cfg.d, cfg.time_dim
    ps.add("vel.gcn.W", nm.glorot(rng, feature_dim, d))
    ps.add("vel.time.omega", 10.0 ** (-2.0 * np.arange(T) / max(T - 1, 1)))
    ps.add("vel.time.theta", np.zeros(T))
    ps.add("vel.mlp.W1", nm.glorot(rng, d + T, d))
    ps.add("vel.mlp.b1", np.zeros(d))
    ps.add("vel.mlp.W2", nm.glorot(rng, d, d))
    ps.add("vel.mlp.b2", np.zeros(d))
    ps.add("vel.mlp.W3", nm.glorot(rng, d, d))
    ps.add("vel.mlp.b3", np.zeros(d))


@dataclasses.dataclass
class VelocityNet:
    """Frozen per-user features plus the field parameters."""

    params: nm.ParamStore
    g_matrix: nm.Tensor  # (N, d), one static-graph feature row per user
    cfg: RunConfig


def velocity_net(
    graph: data.SocialGraph,
    params: nm.ParamStore,
    cfg: RunConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> VelocityNet:
    ax = nm.Tensor(encoder.gcn_norm(graph.adjacency) @ graph.features)
    g = (ax @ params["vel.gcn.W"]).tanh()
    if training:
        g = nm.dropout(g, cfg.dropout, rng, True)
    return VelocityNet(params, g, cfg)


def _mlp(net: VelocityNet, rows: nm.Tensor) -> nm.Tensor:
    p = net.params
    z = (rows @ p["vel.mlp.W1"] + p["vel.mlp.b1"]).tanh()
    z = (z @ p["vel.mlp.W2"] + p["vel.mlp.b2"]).tanh()
    return z @ p["vel.mlp.W3"] + p["vel.mlp.b3"]


def velocity(net: VelocityNet, user: int, position, t_sys: float) -> nm.Tensor:
    """Field value for one user; `position` is accepted for solver-interface
    uniformity and ignored (the field is position-free)."""
    if not (-1e-9 <= t_sys <= 1.0 + 1e-9):
        raise ContractViolation(f"t_sys {t_sys} outside [0, 1]")
    p = net.params
    tf = encoder.encode_time(p["vel.time.omega"], p["vel.time.theta"], t_sys)
    rows = nm.stack([nm.concat([net.g_matrix[user], tf])])
    return _mlp(net, rows)[0]


def _batched_field(net: VelocityNet, user_ids: np.ndarray, t_ends: np.ndarray):
    """Field over many (user, wall-time) rows, driven by a shared clock
    s in [0, 1]: row b integrates d/ds phi = t_end_b * v(u_b, t_end_b * s)."""
    p = net.params
    g_rows = net.g_matrix[np.asarray(user_ids, dtype=np.intp)]
    t_col = nm.Tensor(np.asarray(t_ends, dtype=np.float64)[:, None])
    scale = float(np.sqrt(1.0 / net.cfg.time_dim))

    def field(y, s):
        tf = scale * (((float(s) * t_col) * p["vel.time.omega"]) + p["vel.time.theta"]).cos()
        rows = nm.concat([g_rows, tf], axis=1)
        return t_col * _mlp(net, rows)

    return field


def solve_batched(net: VelocityNet, user_ids, t_ends, initial: nm.Tensor, steps: int) -> nm.Tensor:
    """Final positions phi(u_b, t_end_b) for every row of `initial`."""
    t_ends = np.asarray(t_ends, dtype=np.float64)
    if (t_ends < 0.0).any() or (t_ends > 1.0 + 1e-9).any():
        raise ContractViolation("batched solve needs every t_end in [0, 1]")
    field = _batched_field(net, user_ids, t_ends)
    return nm.ode_solve(initial, (0.0, 1.0), field, steps)[-1][1]


@dataclasses.dataclass
class Trajectory:
    user: int
    samples: list  # (t_sys, position Tensor) pairs, t strictly increasing from 0
    solver_steps: int

    def final_position(self) -> nm.Tensor:
        return self.samples[-1][1]


def solve_trajectory(net: VelocityNet, user: int, initial: nm.Tensor, t_end: float, steps: int) -> Trajectory:
    if not (0.0 < t_end <= 1.0 + 1e-9):
        raise ContractViolation(f"t_end {t_end} outside (0, 1]")
    field = lambda y, t: velocity(net, user, y, t)
    samples = nm.ode_solve(initial, (0.0, float(t_end)), field, steps)
    return Trajectory(user, samples, steps)


def rescale_time(cascade: data.Cascade, t: float, variant: str = "max") -> float:
    """Cascade seconds -> system time. "max" divides by the last timestamp;
    "offset" maps [t^1, t^last] onto [0, 1]."""
    t_last = cascade.max_time
    if variant == "max":
        if t_last <= 0.0:
            raise ValidationError(f"cascade {cascade.message_id}: zero time scale")
        return float(t) / t_last
    if variant == "offset":
        t1 = cascade.events[0][1]
        if t_last <= t1:
            raise ValidationError(f"cascade {cascade.message_id}: zero time span")
        return (float(t) - t1) / (t_last - t1)
    raise ContractViolation(f"unknown rescale variant {variant!r}")


def ode_loss(
    runs,
    graph: data.SocialGraph,
    params: nm.ParamStore,
    cfg: RunConfig,
    training: bool = False,
    rng: np.random.Generator | None = None,
    steps: int | None = None,
    denom: int | None = None,
) -> nm.Tensor:
    """Mean squared gap between each infected user's trajectory position and
    its snapshot coordinate, over every (cascade, step) pair. `denom` overrides
    the normalizer so chunked accumulation matches the full-batch mean."""
    net = velocity_net(graph, params, cfg, training, rng)
    initial_blocks, targets, user_ids, t_ends = [], [], [], []
    for run in runs:
        users = [int(u) for u, _ in run.cascade.events[: run.length]]
        initial_blocks.append(run.states[1].coords[np.asarray(users, dtype=np.intp)])
        for k in range(1, run.length + 1):
            u, t = run.cascade.events[k - 1]
            user_ids.append(int(u))
            t_ends.append(rescale_time(run.cascade, t, cfg.rescale))
            targets.append(run.states[k].coords[int(u)])
    if not user_ids:
        raise ContractViolation("ode_loss needs at least one (cascade, step) pair")
    initial = nm.concat(initial_blocks, axis=0)
    final = solve_batched(net, np.asarray(user_ids), np.asarray(t_ends), initial, steps or cfg.solver_steps)
    diff = final - nm.stack(targets)
    return (diff * diff).sum() / float(denom if denom is not None else len(user_ids))


@dataclasses.dataclass
class PredictionResult:
    target: int
    t_sys: float
    wallclock: float
    min_distance: float


def _grid_points(current: float, grid: int) -> np.ndarray:
    """grid+1 points from the current clock to 1; doubling `grid` nests."""
    return current + (1.0 - current) * np.arange(grid + 1) / grid


def predict_infection_times(
    graph: data.SocialGraph,
    params: nm.ParamStore,
    cfg: RunConfig,
    prefix: data.Cascade,
    targets,
    scale_seconds: float,
    grid: int | None = None,
) -> list[PredictionResult]:
    """Closest-approach times of several targets to the message coordinate
    frozen at the end of the prefix. Each grid value integrates from system
    time 0, so refining the grid only adds candidate times."""
    if scale_seconds <= 0.0:
        raise ContractViolation("time scale must be positive")
    targets = [int(t) for t in targets]
    infected = set(prefix.users)
    for t in targets:
        if t in infected:
            raise ContractViolation(f"target user {t} is already infected in the prefix")
        if not (0 <= t < graph.num_users):
            raise ValidationError(f"target user {t} outside [0, {graph.num_users})")
    grid = cfg.grid if grid is None else int(grid)
    if grid < 1:
        raise ContractViolation("grid must be >= 1")

    with nm.no_grad():
        run = encoder.unroll(graph, prefix, params, cfg)
        message = run.states[-1].message_embedding().data
        current = min(prefix.events[-1][1] / scale_seconds, 1.0)
        ts = _grid_points(current, grid)
        net = velocity_net(graph, params, cfg)

        n_pts = ts.size
        user_ids = np.repeat(targets, n_pts)
        t_ends = np.tile(ts, len(targets))
        initial = run.states[1].coords[user_ids]
        final = solve_batched(net, user_ids, t_ends, initial, cfg.solver_steps)
        dists = np.sqrt(((final.data - message) ** 2).sum(axis=1)).reshape(len(targets), n_pts)

    radius = cfg.encounter_radius()
    results = []
    for row, target in enumerate(targets):
        if radius is not None:
            crossing = np.nonzero(dists[row] <= radius)[0]
            j = int(crossing[0]) if crossing.size else int(np.argmin(dists[row]))
        else:
            j = int(np.argmin(dists[row]))  # argmin takes the earliest tie
        t_star = float(ts[j])
        results.append(PredictionResult(target, t_star, t_star * scale_seconds, float(dists[row, j])))
    return results


def predict_infection_time(
    graph: data.SocialGraph,
    params: nm.ParamStore,
    cfg: RunConfig,
    prefix: data.Cascade,
    target_user: int,
    scale_seconds: float,
    grid: int | None = None,
) -> PredictionResult:
    return predict_infection_times(graph, params, cfg, prefix, [target_user], scale_seconds, grid)[0]
