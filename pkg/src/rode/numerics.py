"""Dense-tensor engine with reverse-mode gradients, Adam, and an RK4 solver.

Everything is float64 numpy under the hood. Tensors are immutable values;
each op records a vector-Jacobian closure so `backward` can sweep the tape.
Training-scale here is tiny (a few thousand parameters), so clarity and
determinism win over throughput tricks.
"""

from __future__ import annotations

import base64
import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation, NumericalDivergence, ValidationError

CHECKPOINT_HEADER = "R-ODE-CKPT v1"

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], list[tuple[Tensor, np.ndarray]]] | None = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = _wrap(other)
        out = _make(self.data + other.data, (self, other))
        if out._parents:
            out._vjp = lambda g: [
                (self, _unbroadcast(g, self.shape)),
                (other, _unbroadcast(g, other.shape)),
            ]
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = _wrap(other)
        out = _make(self.data - other.data, (self, other))
        if out._parents:
            out._vjp = lambda g: [
                (self, _unbroadcast(g, self.shape)),
                (other, _unbroadcast(-g, other.shape)),
            ]
        return out

    def __rsub__(self, other):
        return _wrap(other).__sub__(self)

    def __neg__(self):
        out = _make(-self.data, (self,))
        if out._parents:
            out._vjp = lambda g: [(self, -g)]
        return out

    def __mul__(self, other):
        other = _wrap(other)
        out = _make(self.data * other.data, (self, other))
        if out._parents:
            out._vjp = lambda g: [
                (self, _unbroadcast(g * other.data, self.shape)),
                (other, _unbroadcast(g * self.data, other.shape)),
            ]
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        out = _make(self.data / other.data, (self, other))
        if out._parents:
            out._vjp = lambda g: [
                (self, _unbroadcast(g / other.data, self.shape)),
                (other, _unbroadcast(-g * self.data / (other.data * other.data), other.shape)),
            ]
        return out

    def __rtruediv__(self, other):
        return _wrap(other).__truediv__(self)

    def __matmul__(self, other):
        other = _wrap(other)
        a, b = self.data, other.data
        if a.ndim > 2 or b.ndim > 2:
            raise ContractViolation("matmul supports 1-D and 2-D operands only")
        out = _make(a @ b, (self, other))
        if out._parents:

            def vjp(g):
                if a.ndim == 1 and b.ndim == 1:  # dot product, g scalar
                    return [(self, g * b), (other, g * a)]
                if a.ndim == 1:  # (k,) @ (k,n) -> (n,)
                    return [(self, g @ b.T), (other, np.outer(a, g))]
                if b.ndim == 1:  # (m,k) @ (k,) -> (m,)
                    return [(self, np.outer(g, b)), (other, a.T @ g)]
                return [(self, g @ b.T), (other, a.T @ g)]

            out._vjp = vjp
        return out

    def __getitem__(self, idx):
        if isinstance(idx, (list, np.ndarray)):
            idx = np.asarray(idx, dtype=np.intp)
        out = _make(self.data[idx], (self,))
        if out._parents:

            def vjp(g):
                full = np.zeros_like(self.data)
                np.add.at(full, idx, g)
                return [(self, full)]

            out._vjp = vjp
        return out

    # -- elementwise nonlinearities ------------------------------------------

    def relu(self):
        out = _make(np.maximum(self.data, 0.0), (self,))
        if out._parents:
            out._vjp = lambda g: [(self, g * (self.data > 0.0))]
        return out

    def sigmoid(self):
        x = self.data
        val = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        out = _make(val, (self,))
        if out._parents:
            out._vjp = lambda g: [(self, g * val * (1.0 - val))]
        return out

    def tanh(self):
        val = np.tanh(self.data)
        out = _make(val, (self,))
        if out._parents:
            out._vjp = lambda g: [(self, g * (1.0 - val * val))]
        return out

    def cos(self):
        out = _make(np.cos(self.data), (self,))
        if out._parents:
            out._vjp = lambda g: [(self, -g * np.sin(self.data))]
        return out

    def exp(self):
        val = np.exp(self.data)
        out = _make(val, (self,))
        if out._parents:
            out._vjp = lambda g: [(self, g * val)]
        return out

    def log(self):
        out = _make(np.log(self.data), (self,))
        if out._parents:
            out._vjp = lambda g: [(self, g / self.data)]
        return out

    def sqrt(self):
        val = np.sqrt(self.data)
        out = _make(val, (self,))
        if out._parents:
            out._vjp = lambda g: [(self, g / (2.0 * val))]
        return out

    def clamp_min(self, floor: float):
        out = _make(np.maximum(self.data, floor), (self,))
        if out._parents:
            out._vjp = lambda g: [(self, g * (self.data > floor))]
        return out

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None):
        out = _make(self.data.sum(axis=axis), (self,))
        if out._parents:

            def vjp(g):
                if axis is None:
                    return [(self, np.broadcast_to(g, self.shape).copy())]
                return [(self, np.broadcast_to(np.expand_dims(g, axis), self.shape).copy())]

            out._vjp = vjp
        return out

    def mean(self, axis=None):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis) / float(n)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape of a broadcast operand."""
    grad = np.asarray(grad, dtype=np.float64)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- composite / structural ops ------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if out._parents:
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def vjp(g):
            return list(zip(tensors, np.split(g, splits, axis=axis)))

        out._vjp = vjp
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors))
    if out._parents:

        def vjp(g):
            return [(t, np.take(g, i, axis=axis)) for i, t in enumerate(tensors)]

        out._vjp = vjp
    return out


def merge_rows(base: Tensor, rows: Tensor, index) -> Tensor:
    """Copy of `base` with `rows` written at the given row indices."""
    index = np.asarray(index, dtype=np.intp)
    data = base.data.copy()
    data[index] = rows.data
    out = _make(data, (base, rows))
    if out._parents:

        def vjp(g):
            g_base = g.copy()
            g_base[index] = 0.0
            return [(base, g_base), (rows, g[index])]

        out._vjp = vjp
    return out


def scatter_symmetric(values: Tensor, pairs: Sequence[tuple[int, int]], size: int) -> Tensor:
    """Square matrix with values[e] placed at (a_e, b_e) and (b_e, a_e)."""
    if values.ndim != 1 or len(pairs) != values.size:
        raise ContractViolation("scatter_symmetric needs one (a, b) pair per value")
    rows = np.asarray([p[0] for p in pairs], dtype=np.intp)
    cols = np.asarray([p[1] for p in pairs], dtype=np.intp)
    mat = np.zeros((size, size))
    np.add.at(mat, (rows, cols), values.data)
    np.add.at(mat, (cols, rows), values.data)
    out = _make(mat, (values,))
    if out._parents:
        out._vjp = lambda g: [(values, g[rows, cols] + g[cols, rows])]
    return out


def masked_softmax(scores: Tensor, keep: np.ndarray) -> Tensor:
    """Softmax over entries where `keep` is True; masked entries get exactly 0."""
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != scores.shape:
        raise ContractViolation("mask shape must match scores")
    if not keep.any():
        raise ContractViolation("masked_softmax needs at least one unmasked entry")
    x = scores.data[keep]
    x = x - x.max()
    e = np.exp(x)
    probs_keep = e / e.sum()
    probs = np.zeros_like(scores.data)
    probs[keep] = probs_keep
    out = _make(probs, (scores,))
    if out._parents:

        def vjp(g):
            gk = g[keep]
            inner = (gk * probs_keep).sum()
            full = np.zeros_like(scores.data)
            full[keep] = probs_keep * (gk - inner)
            return [(scores, full)]

        out._vjp = vjp
    return out


def masked_nll(scores: Tensor, keep: np.ndarray, target: int) -> Tensor:
    """-log softmax(scores over kept entries)[target], numerically stable."""
    keep = np.asarray(keep, dtype=bool)
    if not keep[target]:
        raise ContractViolation(f"target {target} is masked out")
    x = scores.data[keep]
    m = x.max()
    lse = m + np.log(np.exp(x - m).sum())
    out = _make(np.asarray(lse - scores.data[target]), (scores,))
    if out._parents:
        probs = np.zeros_like(scores.data)
        probs[keep] = np.exp(x - lse)

        def vjp(g):
            full = g * probs
            full[target] -= g
            return [(scores, full)]

        out._vjp = vjp
    return out


def sq_norm(x: Tensor) -> Tensor:
    """Sum of squared entries."""
    return (x * x).sum()


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted-scaling Bernoulli dropout; identity when not training."""
    if not training or rate <= 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(mask)


# -- backward sweep -------------------------------------------------------------


def backward(loss: Tensor, params: "ParamStore | None" = None) -> dict[str, np.ndarray] | None:
    """Reverse sweep from a scalar loss.

    Accumulates into `.grad` of every reachable leaf that requires grad (so
    repeated calls add up, as needed for gradient accumulation). When `params`
    is given, also returns {name: gradient} for every parameter, with zeros
    for parameters the loss does not touch.
    """
    if loss.size != 1:
        raise ContractViolation("backward expects a scalar loss")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack_ = [loss]
    # iterative DFS: tapes from long ODE unrolls overflow the recursion limit
    while stack_:
        node = stack_[-1]
        if id(node) in visited:
            stack_.pop()
            continue
        pending = [p for p in node._parents if id(p) not in visited and p.requires_grad]
        if pending:
            stack_.extend(pending)
            continue
        visited.add(id(node))
        topo.append(node)
        stack_.pop()

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, contrib in node._vjp(g):
            if not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + contrib
            else:
                grads[pid] = np.asarray(contrib, dtype=np.float64)

    if params is not None:
        return {
            name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for name, p in params.items()
        }
    return None


# -- parameter store and optimizer ----------------------------------------------


class ParamStore:
    """Named learnable tensors with deterministic (sorted) iteration order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.step = 0
        self._adam_m: dict[str, np.ndarray] = {}
        self._adam_v: dict[str, np.ndarray] = {}

    def add(self, name: str, value, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise ContractViolation(f"duplicate parameter name: {name}")
        t = Tensor(value, requires_grad=requires_grad)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._params[n]) for n in self.names()]

    def zero_grad(self) -> None:
        for _, p in self.items():
            p.grad = None

    def gradients(self) -> dict[str, np.ndarray]:
        return {
            n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
            for n, p in self.items()
        }

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for n, p in self.items():
            other.add(n, p.data.copy(), requires_grad=p.requires_grad)
        other.step = self.step
        return other

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for n, p in self.items():
            if n not in values:
                raise ValidationError(f"missing parameter in state: {n}")
            v = _as_array(values[n])
            if v.shape != p.shape:
                raise ValidationError(f"shape mismatch for {n}: {v.shape} vs {p.shape}")
            p.data = v.copy()


def optimizer_step(
    params: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """One Adam update over all parameters; mutates and returns the store."""
    t = params.step + 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ContractViolation(f"missing gradient for parameter {name}")
        g = _as_array(g)
        if g.shape != p.shape:
            raise ContractViolation(f"gradient shape mismatch for {name}: {g.shape} vs {p.shape}")
        m = params._adam_m.get(name)
        v = params._adam_v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        params._adam_m[name] = m
        params._adam_v[name] = v
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    params.step = t
    return params


# -- ODE solver -------------------------------------------------------------------


def ode_solve(
    initial: Tensor,
    t_span: tuple[float, float],
    field: Callable[[Tensor, float], Tensor],
    steps: int,
) -> list[tuple[float, Tensor]]:
    """Classical fixed-step RK4 over a uniform grid; returns every state.

    The returned list has steps + 1 entries including both endpoints; the
    first state is the `initial` tensor itself. Gradients flow through the
    unrolled steps.
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    if t1 < t0:
        raise ContractViolation("ode_solve needs t0 <= t1")
    if steps < 1:
        raise ContractViolation("ode_solve needs steps >= 1")
    h = (t1 - t0) / steps
    states = [(t0, initial)]
    y = initial
    for s in range(steps):
        t = t0 + s * h
        k1 = field(y, t)
        k2 = field(y + (h / 2.0) * k1, t + h / 2.0)
        k3 = field(y + (h / 2.0) * k2, t + h / 2.0)
        k4 = field(y + h * k3, t + h)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.isfinite(y.data).all():
            raise NumericalDivergence(f"non-finite state at step {s + 1} of {steps}", step=s + 1)
        states.append((t0 + (s + 1) * h, y))
    return states


# -- init helpers -------------------------------------------------------------------


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape)


# -- checkpoint format ---------------------------------------------------------------


def save_checkpoint(params: ParamStore, path: str) -> None:
    """Write `name<TAB>shape<TAB>base64(float64 little-endian)` records."""
    lines = [CHECKPOINT_HEADER]
    for name, p in params.items():
        shape = ",".join(str(d) for d in p.shape)
        payload = base64.b64encode(p.data.astype("<f8").tobytes()).decode("ascii")
        lines.append(f"{name}\t{shape}\t{payload}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ValidationError(f"cannot read checkpoint {path}: {exc}") from None
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ValidationError(f"not a checkpoint file (bad header): {path}")
    values: dict[str, np.ndarray] = {}
    for ln, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValidationError(f"{path}:{ln}: malformed checkpoint record")
        name, shape_s, payload = parts
        shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
        try:
            raw = base64.b64decode(payload.encode("ascii"), validate=True)
        except Exception as exc:
            raise ValidationError(f"{path}:{ln}: bad base64 payload") from exc
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        expected = int(np.prod(shape)) if shape else 1
        if arr.size != expected:
            raise ValidationError(f"{path}:{ln}: payload size does not match shape {shape}")
        values[name] = arr.reshape(shape)
    return values
