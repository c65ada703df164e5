"""Social graph, cascades, and the per-message temporal graph.

File formats (UTF-8 text):
  edges:    one `src<TAB>dst` pair per line, `#` comments allowed
  cascades: `message_id<TAB>user:timestamp;user:timestamp;...`
  features: `node_id<TAB>f1,f2,...,fF`

User ids are non-negative integers below num_users. The message node of a
cascade graph sits at matrix index num_users (one extra row/column).
"""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractViolation, ValidationError

log = logging.getLogger("rode.data")

# key for the message-node edge in grow_um_graph weight maps
MESSAGE = "m"

# seed for the fallback random feature matrix; fixed so datasets without a
# feature file load identically everywhere
_FEATURE_SEED = 1729
_ONE_HOT_LIMIT = 4096


@dataclasses.dataclass(frozen=True)
class SocialGraph:
    """Static follower graph with node features; immutable after load."""

    num_users: int
    edges: frozenset  # of (lo, hi) user-id tuples
    adjacency: np.ndarray  # (N, N) binary, symmetric, zero diagonal
    features: np.ndarray  # (N, F)

    @staticmethod
    def build(num_users: int, edges: Iterable[tuple[int, int]], features: np.ndarray | None = None) -> "SocialGraph":
        if num_users < 1:
            raise ValidationError("graph needs at least one user")
        canon = set()
        for a, b in edges:
            if not (0 <= a < num_users and 0 <= b < num_users):
                raise ValidationError(f"edge ({a}, {b}) references an id outside [0, {num_users})")
            if a == b:
                continue  # self-loops are added later by the GCN normalization, not stored
            canon.add((min(a, b), max(a, b)))
        adj = np.zeros((num_users, num_users))
        for a, b in canon:
            adj[a, b] = adj[b, a] = 1.0
        if features is None:
            features = default_features(num_users)
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != num_users:
            raise ValidationError(f"feature matrix must have {num_users} rows, got shape {features.shape}")
        return SocialGraph(num_users, frozenset(canon), adj, features)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def degree(self, user: int) -> int:
        return int(self.adjacency[user].sum())


def default_features(num_users: int) -> np.ndarray:
    """One-hot rows for small graphs, small seeded uniform noise otherwise."""
    if num_users <= _ONE_HOT_LIMIT:
        return np.eye(num_users)
    rng = np.random.default_rng(_FEATURE_SEED)
    return rng.uniform(-0.05, 0.05, size=(num_users, 128))


@dataclasses.dataclass(frozen=True)
class Cascade:
    """Time-ordered infection events of one message."""

    message_id: str
    events: tuple  # of (user_id, timestamp) pairs

    def __post_init__(self):
        if len(self.events) < 1:
            raise ValidationError(f"cascade {self.message_id}: needs at least one event")
        seen = set()
        prev_t = -math.inf
        for u, t in self.events:
            if u in seen:
                raise ValidationError(f"cascade {self.message_id}: user {u} appears twice")
            seen.add(u)
            if not (math.isfinite(t) and t >= 0.0):
                raise ValidationError(f"cascade {self.message_id}: bad timestamp {t!r}")
            if t <= prev_t:
                raise ValidationError(f"cascade {self.message_id}: timestamps not strictly increasing at t={t}")
            prev_t = t

    @property
    def length(self) -> int:
        return len(self.events)

    @property
    def users(self) -> tuple:
        return tuple(u for u, _ in self.events)

    @property
    def times(self) -> tuple:
        return tuple(t for _, t in self.events)

    @property
    def max_time(self) -> float:
        return self.events[-1][1]

    def prefix(self, k: int) -> "Cascade":
        if not (1 <= k <= self.length):
            raise ContractViolation(f"prefix length {k} outside [1, {self.length}]")
        return Cascade(self.message_id, self.events[:k])


@dataclasses.dataclass(frozen=True)
class TemporalUMGraph:
    """Growing message graph: infected users form a clique, all tied to the
    message node. Weighted adjacency is (N+1)x(N+1), message at index N."""

    num_users: int
    infected: tuple  # user ids in infection order
    weighted_adjacency: np.ndarray  # (N+1, N+1), symmetric, entries in (0,1)

    @staticmethod
    def empty(num_users: int) -> "TemporalUMGraph":
        n = num_users + 1
        return TemporalUMGraph(num_users, (), np.zeros((n, n)))

    @property
    def step(self) -> int:
        return len(self.infected)

    @property
    def message_node(self) -> int:
        return self.num_users

    @property
    def node_set(self) -> frozenset:
        return frozenset(self.infected) | {self.message_node}

    def indicator(self) -> np.ndarray:
        """Binary link structure (weights ignored)."""
        return (self.weighted_adjacency > 0.0).astype(np.float64)

    def degrees(self) -> np.ndarray:
        """Link counts per node, weights ignored."""
        return (self.weighted_adjacency > 0.0).sum(axis=1).astype(np.float64)

    def neighbors(self, node: int) -> np.ndarray:
        return np.nonzero(self.weighted_adjacency[node])[0]


def grow_um_graph(g: TemporalUMGraph, event: tuple[int, float], weights: Mapping) -> TemporalUMGraph:
    """Add one infection to the message graph; returns a new graph.

    `weights` must carry exactly one entry per new link: key MESSAGE for the
    message-user link and one int key per previously infected user. All
    weights must lie in (0, 1). Existing entries are copied untouched.
    """
    user = int(event[0])
    if not (0 <= user < g.num_users):
        raise ValidationError(f"user {user} outside [0, {g.num_users})")
    if user in g.infected:
        raise ContractViolation(f"user {user} already infected")
    expected = {MESSAGE} | set(g.infected)
    if set(weights) != expected:
        raise ContractViolation(f"weight keys {sorted(map(str, weights))} do not match required links {sorted(map(str, expected))}")

    adj = g.weighted_adjacency.copy()
    for key, w in weights.items():
        w = float(w)
        if not (0.0 < w < 1.0):
            raise ContractViolation(f"link weight {w} outside (0, 1)")
        other = g.message_node if key == MESSAGE else int(key)
        adj[user, other] = adj[other, user] = w
    return TemporalUMGraph(g.num_users, g.infected + (user,), adj)


# -- file ingestion ----------------------------------------------------------


def _data_lines(path: str):
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None
    with fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield ln, line


def load_graph(path: str, num_users: int, feature_path: str | None = None) -> SocialGraph:
    edges = []
    for ln, line in _data_lines(path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValidationError(f"{path}:{ln}: expected `src<TAB>dst`, got {line!r}")
        try:
            a, b = int(parts[0]), int(parts[1])
        except ValueError:
            raise ValidationError(f"{path}:{ln}: non-integer node id in {line!r}") from None
        if a < 0 or b < 0:
            raise ValidationError(f"{path}:{ln}: negative node id")
        edges.append((a, b))
    features = load_features(feature_path, num_users) if feature_path else None
    return SocialGraph.build(num_users, edges, features)


def load_features(path: str, num_users: int) -> np.ndarray:
    rows: dict[int, np.ndarray] = {}
    dim = None
    for ln, line in _data_lines(path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValidationError(f"{path}:{ln}: expected `node_id<TAB>f1,f2,...`")
        try:
            node = int(parts[0])
            vals = np.array([float(v) for v in parts[1].split(",")])
        except ValueError:
            raise ValidationError(f"{path}:{ln}: malformed feature row") from None
        if node in rows:
            raise ValidationError(f"{path}:{ln}: duplicate feature row for node {node}")
        if dim is None:
            dim = vals.size
        elif vals.size != dim:
            raise ValidationError(f"{path}:{ln}: feature dim {vals.size} != {dim}")
        rows[node] = vals
    missing = [u for u in range(num_users) if u not in rows]
    if missing:
        raise ValidationError(f"{path}: missing feature rows for {len(missing)} nodes (first: {missing[0]})")
    extra = [u for u in rows if not (0 <= u < num_users)]
    if extra:
        raise ValidationError(f"{path}: feature row for unknown node {extra[0]}")
    return np.stack([rows[u] for u in range(num_users)])


def _parse_cascade_line(line: str, path: str, ln: int) -> Cascade:
    parts = line.split("\t")
    if len(parts) != 2:
        raise ValidationError(f"{path}:{ln}: expected `message_id<TAB>events`")
    message_id, events_s = parts
    events = []
    for item in events_s.split(";"):
        if ":" not in item:
            raise ValidationError(f"{path}:{ln}: malformed event {item!r} (want user:timestamp)")
        user_s, _, time_s = item.partition(":")
        try:
            events.append((int(user_s), float(time_s)))
        except ValueError:
            raise ValidationError(f"{path}:{ln}: malformed event {item!r}") from None
    try:
        return Cascade(message_id, tuple(events))
    except ValidationError as exc:
        raise ValidationError(f"{path}:{ln}: {exc}") from None


def load_cascades(path: str) -> list[Cascade]:
    """Parse a cascade file; length-1 cascades are dropped with a warning."""
    cascades = []
    dropped = 0
    for ln, line in _data_lines(path):
        cascade = _parse_cascade_line(line, path, ln)
        if cascade.length < 2:
            dropped += 1
            continue
        cascades.append(cascade)
    if dropped:
        log.warning("%s: dropped %d cascade(s) shorter than 2 events", path, dropped)
    return cascades


def load_cascade_prefix(path: str) -> Cascade:
    """Single-line cascade file for prediction; length 1 is allowed here."""
    lines = list(_data_lines(path))
    if len(lines) != 1:
        raise ValidationError(f"{path}: prefix file must contain exactly one cascade line, found {len(lines)}")
    ln, line = lines[0]
    return _parse_cascade_line(line, path, ln)


def format_timestamp(t: float) -> str:
    return repr(float(t))


def write_cascades(cascades: Sequence[Cascade], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in cascades:
            events = ";".join(f"{u}:{format_timestamp(t)}" for u, t in c.events)
            fh.write(f"{c.message_id}\t{events}\n")


def write_graph(graph: SocialGraph, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a, b in sorted(graph.edges):
            fh.write(f"{a}\t{b}\n")


def write_features(graph: SocialGraph, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u in range(graph.num_users):
            vals = ",".join(repr(float(v)) for v in graph.features[u])
            fh.write(f"{u}\t{vals}\n")


def split_cascades(cascades: Sequence[Cascade], ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)):
    """Chronological train/val/test split by each cascade's first timestamp."""
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise ValidationError(f"split ratios must be non-negative and sum to 1, got {ratios}")
    ordered = sorted(cascades, key=lambda c: (c.events[0][1], c.message_id))
    n = len(ordered)
    n_train = int(n * ratios[0])
    n_val = int(n * ratios[1])
    return ordered[:n_train], ordered[n_train : n_train + n_val], ordered[n_train + n_val :]
