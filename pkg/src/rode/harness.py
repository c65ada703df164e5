"""Training loop, evaluation metrics, model checkpoints, synthetic data.

The joint objective is the curvature likelihood plus the trajectory-fit
term (unit weights by default, `lambda_ode` reweights). One epoch forwards
every training cascade, accumulates gradients, then takes a single Adam
step followed by the Lipschitz projection of the potential head.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from collections import deque

import numpy as np

from . import curvature, data, dynamics, encoder
from . import numerics as nm
from .config import RunConfig
from .errors import ContractViolation, NumericalDivergence, ValidationError

logger = logging.getLogger("rode.harness")

# cascades per backward slice; bounds tape memory without changing the math
# (chunk losses are normalized by the epoch-wide pair count)
_CHUNK = 24

_CFG_PREFIX = "cfg."


def init_params(graph: data.SocialGraph, cfg: RunConfig) -> nm.ParamStore:
    """Fresh parameter store for all three model blocks, seeded by cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    ps = nm.ParamStore()
    encoder.register_params(ps, rng, graph.feature_dim, cfg)
    curvature.register_params(ps, rng, cfg)
    dynamics.register_params(ps, rng, graph.feature_dim, cfg)
    return ps


# -- checkpoints with embedded configuration ---------------------------------

_M0_CODES = {"root": 0.0, "mean": 1.0}
_RESCALE_CODES = {"max": 0.0, "offset": 1.0}


def _encode_config(cfg: RunConfig) -> dict[str, np.ndarray]:
    radius = cfg.encounter_radius()
    scalars = {
        "d": float(cfg.d),
        "time_dim": float(cfg.time_dim),
        "alpha": cfg.alpha,
        "dropout": cfg.dropout,
        "lr": cfg.lr,
        "epochs": float(cfg.epochs),
        "solver_steps": float(cfg.solver_steps),
        "grid": float(cfg.grid),
        "seed": float(cfg.seed),
        "lambda_ode": cfg.lambda_ode,
        "clamp_negative_w": 1.0 if cfg.clamp_negative_w else 0.0,
        "m0": _M0_CODES[cfg.m0],
        "rescale": _RESCALE_CODES[cfg.rescale],
        "encounter": -1.0 if radius is None else radius,
    }
    out = {_CFG_PREFIX + k: np.array([v]) for k, v in scalars.items()}
    out[_CFG_PREFIX + "split"] = np.asarray(cfg.split, dtype=float)
    return out


def _decode_config(values: dict[str, np.ndarray]) -> RunConfig:
    def scalar(key: str) -> float:
        if key not in values:
            raise ValidationError(f"checkpoint is missing config record {_CFG_PREFIX}{key}")
        return float(np.asarray(values[key]).reshape(-1)[0])

    def coded(key: str, codes: dict[str, float]) -> str:
        v = scalar(key)
        for name, code in codes.items():
            if v == code:
                return name
        raise ValidationError(f"unknown {key} code {v} in checkpoint")

    if "split" not in values:
        raise ValidationError(f"checkpoint is missing config record {_CFG_PREFIX}split")
    radius = scalar("encounter")
    return RunConfig(
        d=int(round(scalar("d"))),
        time_dim=int(round(scalar("time_dim"))),
        alpha=scalar("alpha"),
        dropout=scalar("dropout"),
        lr=scalar("lr"),
        epochs=int(round(scalar("epochs"))),
        solver_steps=int(round(scalar("solver_steps"))),
        grid=int(round(scalar("grid"))),
        seed=int(round(scalar("seed"))),
        split=tuple(float(v) for v in np.asarray(values["split"]).reshape(-1)),
        m0=coded("m0", _M0_CODES),
        rescale=coded("rescale", _RESCALE_CODES),
        encounter="argmin" if radius == -1.0 else f"threshold:{radius!r}",
        clamp_negative_w=scalar("clamp_negative_w") != 0.0,
        lambda_ode=scalar("lambda_ode"),
    )


def save_model(params: nm.ParamStore, cfg: RunConfig, path: str) -> None:
    """Checkpoint the parameters together with cfg.* records so the file is
    self-describing; loading restores both."""
    store = nm.ParamStore()
    for name, p in params.items():
        store.add(name, p.data.copy(), requires_grad=False)
    for name, arr in _encode_config(cfg).items():
        store.add(name, arr, requires_grad=False)
    nm.save_checkpoint(store, path)


def load_model(path: str, graph: data.SocialGraph | None = None) -> tuple[nm.ParamStore, RunConfig]:
    """Inverse of save_model. With a graph, the parameter names and shapes are
    checked against a template initialization for the stored config."""
    values = nm.load_checkpoint(path)
    cfg_values = {k[len(_CFG_PREFIX):]: v for k, v in values.items() if k.startswith(_CFG_PREFIX)}
    cfg = _decode_config(cfg_values)
    params = nm.ParamStore()
    for name in sorted(values):
        if not name.startswith(_CFG_PREFIX):
            params.add(name, values[name])
    head_key = "curv.head.w"
    if head_key not in values or values[head_key].shape != (cfg.d,):
        raise ValidationError(f"{path}: parameters inconsistent with stored config (d={cfg.d})")
    if graph is not None:
        template = init_params(graph, cfg)
        if set(template.names()) != set(params.names()):
            raise ValidationError(f"{path}: parameter names do not match the model for this graph")
        for name, p in template.items():
            if params[name].shape != p.shape:
                raise ValidationError(
                    f"{path}: shape mismatch for {name}: {params[name].shape} vs {p.shape}"
                )
    return params, cfg


# -- training -----------------------------------------------------------------


@dataclasses.dataclass
class TrainResult:
    params: nm.ParamStore
    log: list[dict]
    best_epoch: int | None
    best_val: float


def _first_nonfinite(runs) -> tuple[str, int] | None:
    for run in runs:
        for k, st in enumerate(run.states):
            if not np.isfinite(st.coords.data).all():
                return run.cascade.message_id, k
    return None


def _joint_loss_value(graph, params, cfg, cascades) -> float:
    with nm.no_grad():
        runs = [encoder.unroll(graph, c, params, cfg) for c in cascades]
        l_r = curvature.ricci_loss(runs, params, cfg)
        l_o = dynamics.ode_loss(runs, graph, params, cfg)
        return float(l_r.item() + cfg.lambda_ode * l_o.item())


def train(
    cfg: RunConfig,
    graph: data.SocialGraph,
    cascades,
    val_cascades=None,
) -> TrainResult:
    """Fit the model to `cascades`. When a validation set is given, the
    parameters with the lowest validation loss are returned; otherwise the
    final-epoch parameters. Raises NumericalDivergence on non-finite losses,
    naming the first offending cascade and step."""
    cascades = list(cascades)
    if not cascades:
        raise ValidationError("training needs at least one cascade")
    val_cascades = list(val_cascades) if val_cascades else []

    params = init_params(graph, cfg)
    if cfg.epochs == 0:
        return TrainResult(params, [], None, math.inf)

    total_pairs = sum(c.length for c in cascades)
    best = params.copy()
    best_epoch: int | None = None
    best_val = math.inf
    log: list[dict] = []

    for epoch in range(cfg.epochs):
        # one dropout stream per epoch, consumed in fixed cascade order
        rng = np.random.default_rng([cfg.seed, 7919, epoch])
        params.zero_grad()
        ricci_val = 0.0
        ode_val = 0.0
        for lo in range(0, len(cascades), _CHUNK):
            chunk = cascades[lo : lo + _CHUNK]
            try:
                runs = [encoder.unroll(graph, c, params, cfg, training=True, rng=rng) for c in chunk]
                l_r = curvature.ricci_loss(runs, params, cfg, denom=total_pairs)
                l_o = dynamics.ode_loss(
                    runs, graph, params, cfg, training=True, rng=rng, denom=total_pairs
                )
            except NumericalDivergence as e:
                ids = ", ".join(c.message_id for c in chunk)
                raise NumericalDivergence(f"epoch {epoch} (cascades {ids}): {e}", step=e.step) from e
            loss = l_r + l_o * cfg.lambda_ode
            value = float(loss.item())
            if not math.isfinite(value):
                hit = _first_nonfinite(runs)
                where = f"cascade {hit[0]} at step {hit[1]}" if hit else "the loss reduction"
                raise NumericalDivergence(
                    f"epoch {epoch}: non-finite loss ({value}) from {where}",
                    step=None if hit is None else hit[1],
                )
            nm.backward(loss)
            ricci_val += float(l_r.item())
            ode_val += float(l_o.item())

        nm.optimizer_step(params, params.gradients(), cfg.lr)
        curvature.project_lipschitz(params)
        for name, p in params.items():
            if not np.isfinite(p.data).all():
                raise NumericalDivergence(f"epoch {epoch}: non-finite parameter {name} after update")

        entry = {"epoch": epoch, "ricci": ricci_val, "ode": ode_val,
                 "total": ricci_val + cfg.lambda_ode * ode_val}
        if val_cascades:
            vloss = _joint_loss_value(graph, params, cfg, val_cascades)
            entry["val"] = vloss
            if vloss < best_val:
                best_val, best_epoch, best = vloss, epoch, params.copy()
        log.append(entry)
        logger.info(
            "epoch %d: ricci %.6f ode %.6f total %.6f%s",
            epoch, ricci_val, ode_val, entry["total"],
            f" val {entry['val']:.6f}" if val_cascades else "",
        )

    if val_cascades:
        return TrainResult(best, log, best_epoch, best_val)
    return TrainResult(params, log, cfg.epochs - 1, log[-1]["total"])


# -- next-user ranking ---------------------------------------------------------


def rank_of_scores(scores: np.ndarray, keep: np.ndarray, target: int) -> int:
    """1-based rank of `target` among kept candidates, scores descending.
    Ties break toward the smaller user id, so ranking is deterministic."""
    if not keep[target]:
        raise ContractViolation(f"target {target} is not a candidate")
    ids = np.nonzero(keep)[0]
    s = scores[ids]
    st = scores[target]
    ahead = (s > st) | ((s == st) & (ids < target))
    return int(ahead.sum()) + 1


def ranked_candidates(scores: np.ndarray, keep: np.ndarray) -> list[tuple[int, float]]:
    ids = np.nonzero(keep)[0]
    order = np.lexsort((ids, -scores[ids]))
    return [(int(i), float(scores[i])) for i in ids[order]]


def _check_ks(ks) -> list[int]:
    ks = sorted({int(k) for k in ks})
    if not ks or ks[0] < 1:
        raise ValidationError(f"Ks must be positive integers, got {ks}")
    return ks


@dataclasses.dataclass
class RankingEval:
    hits_at: dict[int, float]
    map_at: dict[int, float]
    steps: int


def evaluate_next_user(
    graph: data.SocialGraph,
    params: nm.ParamStore,
    cfg: RunConfig,
    cascades,
    ks,
) -> RankingEval:
    """Score every transition of every cascade: rank uninfected users by
    curvature at the previous snapshot, record top-K hits and truncated
    reciprocal ranks (both reported as mean x 100)."""
    ks = _check_ks(ks)
    cascades = list(cascades)
    if not cascades:
        raise ValidationError("evaluation needs at least one cascade")
    hits = {k: 0 for k in ks}
    rr = {k: 0.0 for k in ks}
    total = 0
    head = curvature.LipschitzHead.from_params(params)
    with nm.no_grad():
        for c in cascades:
            if c.length < 2:
                raise ValidationError(f"cascade {c.message_id} too short to evaluate")
            run = encoder.unroll(graph, c, params, cfg, steps=c.length - 1)
            keep = np.ones(graph.num_users, dtype=bool)
            for k in range(1, c.length + 1):
                target = int(c.events[k - 1][0])
                scores = curvature.ricci_score_vector(
                    run.graphs[k - 1], run.states[k - 1].coords, head,
                    cfg.alpha, cfg.clamp_negative_w,
                ).data
                rank = rank_of_scores(scores, keep, target)
                total += 1
                for kk in ks:
                    if rank <= kk:
                        hits[kk] += 1
                        rr[kk] += 1.0 / rank
                keep[target] = False
    hits_at = {k: 100.0 * hits[k] / total for k in ks}
    map_at = {k: 100.0 * rr[k] / total for k in ks}
    return RankingEval(hits_at, map_at, total)


def rank_next_users(
    graph: data.SocialGraph,
    params: nm.ParamStore,
    cfg: RunConfig,
    cascade: data.Cascade,
) -> list[tuple[int, list[tuple[int, float]]]]:
    """Per-step ranked candidate lists for one cascade. Steps 1..L rank the
    candidates seen before each observed infection; one extra trailing entry
    (step L+1) forecasts the still-unobserved next user when any remain."""
    head = curvature.LipschitzHead.from_params(params)
    out = []
    with nm.no_grad():
        run = encoder.unroll(graph, cascade, params, cfg)
        keep = np.ones(graph.num_users, dtype=bool)
        for k in range(1, cascade.length + 1):
            scores = curvature.ricci_score_vector(
                run.graphs[k - 1], run.states[k - 1].coords, head,
                cfg.alpha, cfg.clamp_negative_w,
            ).data
            out.append((k, ranked_candidates(scores, keep)))
            keep[int(cascade.events[k - 1][0])] = False
        if keep.any():
            scores = curvature.ricci_score_vector(
                run.graphs[-1], run.states[-1].coords, head,
                cfg.alpha, cfg.clamp_negative_w,
            ).data
            out.append((cascade.length + 1, ranked_candidates(scores, keep)))
    return out


# -- infection-time evaluation -------------------------------------------------


def reveal_length(cascade_length: int) -> int:
    """Number of events revealed before time prediction: first half, rounded up."""
    return (cascade_length + 1) // 2


def _prediction_frame(cascade: data.Cascade, kp: int, variant: str):
    """Prefix to feed the predictor plus the matching scale and the map from
    raw timestamps to system time. The offset variant shifts times so the
    predictor's division by scale reproduces (t - t1) / span."""
    prefix = cascade.prefix(kp)
    if variant == "max":
        scale = cascade.max_time
        return prefix, scale, lambda t: t / scale
    if variant == "offset":
        t1 = cascade.events[0][1]
        span = cascade.max_time - t1
        if span <= 0.0:
            raise ValidationError(f"cascade {cascade.message_id} has zero time span")
        shifted = data.Cascade(
            cascade.message_id, tuple((u, t - t1) for u, t in cascade.events[:kp])
        )
        return shifted, span, lambda t: (t - t1) / span
    raise ContractViolation(f"unknown rescale variant {variant!r}")


@dataclasses.dataclass
class TimeEval:
    rmse: float
    rmse_by_offset: dict[int, float]
    pairs: int


def evaluate_infection_time(
    graph: data.SocialGraph,
    params: nm.ParamStore,
    cfg: RunConfig,
    cascades,
    wallclock: bool = False,
) -> TimeEval:
    """Reveal the first half of each cascade, predict every held-out user's
    system time, and report RMSE overall and per future position (offset 1 is
    the first hidden event). `wallclock` converts errors with the true scale."""
    cascades = list(cascades)
    if not cascades:
        raise ValidationError("evaluation needs at least one cascade")
    sq: list[float] = []
    by_off: dict[int, list[float]] = {}
    with nm.no_grad():
        for c in cascades:
            if c.length < 2:
                raise ValidationError(f"cascade {c.message_id} too short to evaluate")
            kp = reveal_length(c.length)
            prefix, scale, to_sys = _prediction_frame(c, kp, cfg.rescale)
            held_out = c.events[kp:]
            results = dynamics.predict_infection_times(
                graph, params, cfg, prefix, [u for u, _ in held_out], scale
            )
            for off, (res, (_, t)) in enumerate(zip(results, held_out), start=1):
                err = res.t_sys - to_sys(t)
                if wallclock:
                    err *= scale
                sq.append(err * err)
                by_off.setdefault(off, []).append(err * err)
    rmse = math.sqrt(sum(sq) / len(sq))
    by_offset = {off: math.sqrt(sum(v) / len(v)) for off, v in sorted(by_off.items())}
    return TimeEval(rmse, by_offset, len(sq))


def constant_time_rmse(cascades, value: float, variant: str = "max") -> float:
    """RMSE of always answering `value` on the same held-out pairs the model
    is scored on; the reference the trained predictor must beat."""
    sq = []
    for c in cascades:
        kp = reveal_length(c.length)
        _, _, to_sys = _prediction_frame(c, kp, variant)
        for _, t in c.events[kp:]:
            err = value - to_sys(t)
            sq.append(err * err)
    if not sq:
        raise ValidationError("no held-out pairs")
    return math.sqrt(sum(sq) / len(sq))


# -- report --------------------------------------------------------------------


@dataclasses.dataclass
class EvalReport:
    hits_at: dict[int, float]
    map_at: dict[int, float]
    rmse: float | None
    rmse_by_offset: dict[int, float]
    counts: dict[str, int]
    config: dict
    seed: int

    def validate(self) -> None:
        ks = sorted(self.hits_at)
        if ks != sorted(self.map_at):
            raise ContractViolation("hits_at and map_at must cover the same Ks")
        prev = 0.0
        for k in ks:
            h, m = self.hits_at[k], self.map_at[k]
            if not (0.0 <= h <= 100.0 and 0.0 <= m <= 100.0):
                raise ContractViolation(f"metric out of [0, 100] at K={k}")
            if m > h + 1e-9:
                raise ContractViolation(f"M@{k} exceeds H@{k}")
            if h < prev - 1e-9:
                raise ContractViolation(f"H@K decreased at K={k}")
            prev = h
        if self.rmse is not None and self.rmse < 0:
            raise ContractViolation("negative RMSE")

    def to_dict(self) -> dict:
        return {
            "hits_at": {str(k): v for k, v in sorted(self.hits_at.items())},
            "map_at": {str(k): v for k, v in sorted(self.map_at.items())},
            "rmse": self.rmse,
            "rmse_by_offset": {str(k): v for k, v in sorted(self.rmse_by_offset.items())},
            "counts": dict(sorted(self.counts.items())),
            "config": self.config,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_table(self) -> str:
        lines = ["metric        value"]
        for k in sorted(self.hits_at):
            lines.append(f"H@{k:<10}  {self.hits_at[k]:8.4f}")
        for k in sorted(self.map_at):
            lines.append(f"M@{k:<10}  {self.map_at[k]:8.4f}")
        if self.rmse is not None:
            lines.append(f"RMSE          {self.rmse:8.4f}")
            for off, v in sorted(self.rmse_by_offset.items()):
                lines.append(f"RMSE[+{off:<3}]    {v:8.4f}")
        lines.append(f"steps         {self.counts.get('rank_steps', 0):8d}")
        lines.append(f"time pairs    {self.counts.get('time_pairs', 0):8d}")
        return "\n".join(lines)


def evaluate(
    graph: data.SocialGraph,
    params: nm.ParamStore,
    cfg: RunConfig,
    cascades,
    ks=(10, 50, 100),
    with_time: bool = True,
    wallclock: bool = False,
) -> EvalReport:
    ranking = evaluate_next_user(graph, params, cfg, cascades, ks)
    counts = {"rank_steps": ranking.steps, "time_pairs": 0}
    rmse = None
    by_offset: dict[int, float] = {}
    if with_time:
        time_part = evaluate_infection_time(graph, params, cfg, cascades, wallclock=wallclock)
        rmse = time_part.rmse
        by_offset = time_part.rmse_by_offset
        counts["time_pairs"] = time_part.pairs
    report = EvalReport(
        hits_at=ranking.hits_at,
        map_at=ranking.map_at,
        rmse=rmse,
        rmse_by_offset=by_offset,
        counts=counts,
        config=cfg.to_dict(),
        seed=cfg.seed,
    )
    report.validate()
    return report


# -- synthetic data -------------------------------------------------------------


@dataclasses.dataclass
class SynthResult:
    graph: data.SocialGraph
    cascades: list[data.Cascade]
    teacher_params: nm.ParamStore
    teacher_cfg: RunConfig


def _components(graph: data.SocialGraph) -> np.ndarray:
    """Connected-component label per node (BFS over the adjacency)."""
    n = graph.num_users
    labels = np.full(n, -1, dtype=np.intp)
    nbrs = [np.nonzero(graph.adjacency[i])[0] for i in range(n)]
    label = 0
    for start in range(n):
        if labels[start] >= 0:
            continue
        queue = deque([start])
        labels[start] = label
        while queue:
            u = queue.popleft()
            for v in nbrs[u]:
                if labels[v] < 0:
                    labels[v] = label
                    queue.append(v)
        label += 1
    return labels


def generate_synthetic(
    num_users: int,
    num_cascades: int,
    seed: int,
    mean_length: float = 8.0,
    beta: float = 200.0,
    pace: float = 0.35,
    jitter: float = 0.03,
    latency_sigma: float = 0.8,
    dist_power: float = 0.25,
    scale_sigma: float = 0.9,
    feature_dim: int = 16,
    teacher_d: int = 16,
    teacher_time_dim: int = 8,
    out_dir: str | None = None,
) -> SynthResult:
    """Erdos-Renyi graph (p = 2 ln N / N) plus cascades simulated by a random
    teacher model: the next infected user is drawn within the root's component
    proportional to exp(beta * Ric), and inter-arrival times grow with the
    teacher's message-to-user distance times a planted per-user latency
    (lognormal jitter on top). Writes graph.tsv, features.tsv, cascades.tsv,
    and teacher.ckpt when out_dir is given."""
    if num_users < 5:
        raise ValidationError(f"need at least 5 users, got {num_users}")
    if num_cascades < 0:
        raise ValidationError("num_cascades must be non-negative")
    if (
        mean_length < 2 or beta < 0 or pace <= 0 or jitter < 0
        or latency_sigma < 0 or dist_power < 0 or scale_sigma < 0
    ):
        raise ValidationError("bad planted parameters")

    rng = np.random.default_rng([seed, 104729])
    n = num_users
    p = 2.0 * math.log(n) / n
    iu, ju = np.triu_indices(n, k=1)
    mask = rng.random(iu.size) < p
    edges = [(int(a), int(b)) for a, b in zip(iu[mask], ju[mask])]
    # one latent draw per user sets both the feature scale and the infection
    # latency below, so slow users are recognizable from their feature norms
    # and the planted timing signal is recoverable by a trained model
    z = rng.standard_normal(n)
    scales = np.exp(scale_sigma * z)
    latency = np.exp(latency_sigma * z)
    features = rng.uniform(-0.5, 0.5, size=(n, feature_dim)) * scales[:, None]
    graph = data.SocialGraph.build(n, edges, features)
    comp = _components(graph)
    comp_sizes = np.bincount(comp)

    # a random head drives most surrogate transports negative; clamping would
    # collapse every candidate to Ric = 1, so the teacher scores unclamped
    teacher_cfg = RunConfig(
        d=teacher_d, time_dim=teacher_time_dim, dropout=0.0, seed=seed,
        clamp_negative_w=False,
    )
    teacher = init_params(graph, teacher_cfg)
    head = curvature.LipschitzHead.from_params(teacher)

    max_comp = int(comp_sizes.max())
    if num_cascades > 0 and max_comp < 2:
        raise ValidationError("graph has no connected pair; cannot place a cascade")

    cascades: list[data.Cascade] = []
    with nm.no_grad():
        for m in range(num_cascades):
            length = 2 + int(rng.poisson(mean_length - 2.0))
            length = min(length, max_comp)
            root = -1
            for _ in range(100):
                cand = int(rng.integers(n))
                if comp_sizes[comp[cand]] >= length:
                    root = cand
                    break
            if root < 0:
                raise ValidationError(
                    f"no component of size >= {length} found after 100 root draws"
                )
            t = float(rng.uniform(1.0, 2.0))
            events = [(root, t)]
            mid = f"c{m:04d}"
            state = encoder.initial_embeddings(
                graph, teacher, teacher_cfg, cascade=data.Cascade(mid, ((root, t),))
            )
            g_m = data.TemporalUMGraph.empty(n)
            prev_t = state.time
            state, g_m = encoder.step_update(
                state, g_m, (root, t), prev_t, teacher, teacher_cfg
            )
            prev_t = t
            infected = np.zeros(n, dtype=bool)
            infected[root] = True
            in_comp = comp == comp[root]
            for _ in range(length - 1):
                scores = curvature.ricci_score_vector(
                    g_m, state.coords, head, teacher_cfg.alpha, teacher_cfg.clamp_negative_w
                ).data
                cand_ids = np.nonzero(in_comp & ~infected)[0]
                logits = beta * scores[cand_ids]
                probs = np.exp(logits - logits.max())
                probs /= probs.sum()
                nxt = int(rng.choice(cand_ids, p=probs))
                dist = float(np.linalg.norm(state.coords.data[n] - state.coords.data[nxt]))
                gap = (
                    pace * dist ** dist_power * latency[nxt]
                    * math.exp(jitter * rng.standard_normal())
                )
                t = t + max(gap, 1e-4)
                events.append((nxt, t))
                state, g_m = encoder.step_update(
                    state, g_m, (nxt, t), prev_t, teacher, teacher_cfg
                )
                prev_t = t
                infected[nxt] = True
            cascades.append(data.Cascade(mid, tuple(events)))

    if out_dir is not None:
        import os

        os.makedirs(out_dir, exist_ok=True)
        data.write_graph(graph, os.path.join(out_dir, "graph.tsv"))
        data.write_features(graph, os.path.join(out_dir, "features.tsv"))
        data.write_cascades(cascades, os.path.join(out_dir, "cascades.tsv"))
        save_model(teacher, teacher_cfg, os.path.join(out_dir, "teacher.ckpt"))
    return SynthResult(graph, cascades, teacher, teacher_cfg)
