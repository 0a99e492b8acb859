"""Discrete factor graphs and synchronous loopy belief propagation.

Messages and beliefs are plain 1-D float arrays that are kept normalized
(nonnegative, summing to one).  Factor-to-variable messages are produced by
handlers registered per :class:`FactorKind`, so new factor types can be plugged
in without touching the propagation loop.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# products with more terms than this are accumulated in log space
LOG_SPACE_THRESHOLD = 8
DEFAULT_TABLE_CAP = 10**6
BRUTE_FORCE_CAP = 10**7


class FactorGraphError(ValueError):
    """Base class for malformed graphs and invalid message requests."""


class AdjacencyError(FactorGraphError):
    pass


class CapacityError(FactorGraphError):
    pass


class DegenerateMessageError(ArithmeticError):
    """A message product vanished everywhere and cannot be normalized."""


class NumericalError(ArithmeticError):
    pass


class VariableKind(enum.Enum):
    ATOM = "atom"
    EDGE = "edge"
    MASS_PEAK = "mass_peak"


class FactorKind(enum.Enum):
    TYPE_A = "type_a"
    TYPE_B = "type_b"
    TYPE_C = "type_c"
    DENSE_TABLE = "dense_table"


class CombinationMode(enum.Enum):
    """How a variable merges the messages arriving from its factors.

    ``MULTIPLY`` is the sum-product rule.  ``SUM_MLP`` adds the messages; in the
    neural path the sum is fed through an MLP, in plain LBP it is normalized.
    """

    MULTIPLY = "multiply"
    SUM_MLP = "sum_mlp"


def normalize(values, *, strict: bool = True) -> np.ndarray:
    """Scale a nonnegative vector to sum to one.

    Raises :class:`DegenerateMessageError` for an all-zero vector when
    ``strict``; otherwise returns the uniform distribution.
    """
    arr = np.asarray(values, dtype=float)
    total = arr.sum()
    if not np.isfinite(total):
        raise NumericalError("cannot normalize a vector with non-finite entries")
    if total <= 0.0:
        if strict:
            raise DegenerateMessageError("all-zero message")
        return np.full(arr.shape, 1.0 / arr.size)
    return arr / total


def uniform(size: int) -> np.ndarray:
    return np.full(size, 1.0 / size)


def is_distribution(values, atol: float = 1e-12) -> bool:
    arr = np.asarray(values, dtype=float)
    return bool(
        arr.ndim == 1
        and np.all(np.isfinite(arr))
        and np.all(arr >= 0)
        and abs(arr.sum() - 1.0) <= atol
    )


def product_of(messages: Sequence[np.ndarray], size: int) -> np.ndarray:
    """Normalized componentwise product; log-space for long products."""
    if not messages:
        return uniform(size)
    if len(messages) <= LOG_SPACE_THRESHOLD:
        out = np.ones(size)
        for msg in messages:
            out = out * msg
            s = out.sum()
            if s > 0:
                out = out / s
        return normalize(out)
    with np.errstate(divide="ignore"):
        logs = np.sum([np.log(m) for m in messages], axis=0)
    top = logs.max()
    if not np.isfinite(top):
        raise DegenerateMessageError("all-zero message")
    return normalize(np.exp(logs - top))


@dataclass(frozen=True)
class VariableNode:
    id: int
    domain_size: int
    kind: VariableKind = VariableKind.EDGE
    unary: np.ndarray | None = None

    def __post_init__(self):
        if self.domain_size < 1:
            raise FactorGraphError(f"variable {self.id}: domain_size must be >= 1")
        if self.unary is None:
            object.__setattr__(self, "unary", np.ones(self.domain_size))
        else:
            unary = np.asarray(self.unary, dtype=float)
            if unary.shape != (self.domain_size,):
                raise FactorGraphError(
                    f"variable {self.id}: unary potential has shape {unary.shape}, "
                    f"expected ({self.domain_size},)"
                )
            if not np.all(np.isfinite(unary)) or np.any(unary < 0) or unary.sum() <= 0:
                raise FactorGraphError(f"variable {self.id}: invalid unary potential")
            object.__setattr__(self, "unary", unary)


@dataclass(frozen=True)
class FactorNode:
    id: int
    neighbors: tuple[int, ...]
    kind: FactorKind = FactorKind.DENSE_TABLE
    payload: object = None

    def __post_init__(self):
        neighbors = tuple(int(n) for n in self.neighbors)
        if not neighbors:
            raise FactorGraphError(f"factor {self.id} has no neighbors")
        if len(set(neighbors)) != len(neighbors):
            raise FactorGraphError(f"factor {self.id} lists a variable twice")
        object.__setattr__(self, "neighbors", neighbors)
        if self.kind is FactorKind.DENSE_TABLE:
            table = np.asarray(self.payload, dtype=float)
            object.__setattr__(self, "payload", table)


class FactorGraph:
    """Immutable bipartite graph of variables and factors.

    Variable and factor ids must be ``0..n-1`` in list order.
    """

    def __init__(self, variables: Sequence[VariableNode], factors: Sequence[FactorNode]):
        self.variables = tuple(variables)
        self.factors = tuple(factors)
        for idx, var in enumerate(self.variables):
            if var.id != idx:
                raise FactorGraphError(f"variable at position {idx} has id {var.id}")
        for idx, fac in enumerate(self.factors):
            if fac.id != idx:
                raise FactorGraphError(f"factor at position {idx} has id {fac.id}")
        adjacency: list[list[int]] = [[] for _ in self.variables]
        for fac in self.factors:
            for v in fac.neighbors:
                if not 0 <= v < len(self.variables):
                    raise AdjacencyError(f"factor {fac.id} references unknown variable {v}")
                adjacency[v].append(fac.id)
            if fac.kind is FactorKind.DENSE_TABLE:
                shape = tuple(self.variables[v].domain_size for v in fac.neighbors)
                if fac.payload.shape != shape:
                    raise FactorGraphError(
                        f"factor {fac.id}: table shape {fac.payload.shape} != {shape}"
                    )
        self.var_to_factors: tuple[tuple[int, ...], ...] = tuple(tuple(a) for a in adjacency)
        self.factor_to_vars: tuple[tuple[int, ...], ...] = tuple(f.neighbors for f in self.factors)

    @property
    def num_variables(self) -> int:
        return len(self.variables)

    @property
    def num_factors(self) -> int:
        return len(self.factors)

    def domain_size(self, i: int) -> int:
        return self.variables[i].domain_size

    def check_adjacent(self, i: int, a: int) -> None:
        if not (0 <= a < len(self.factors)) or i not in self.factor_to_vars[a]:
            raise AdjacencyError(f"variable {i} is not adjacent to factor {a}")

    def is_acyclic(self) -> bool:
        """True when the bipartite graph is a forest."""
        parent = list(range(self.num_variables + self.num_factors))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for fac in self.factors:
            fnode = self.num_variables + fac.id
            for v in fac.neighbors:
                rv, rf = find(v), find(fnode)
                if rv == rf:
                    return False
                parent[rv] = rf
        return True


@dataclass
class MessageStore:
    """Messages of one inference run, keyed by (source, target)."""

    var_to_factor: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    factor_to_var: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    @classmethod
    def uniform(cls, graph: FactorGraph) -> "MessageStore":
        store = cls()
        for fac in graph.factors:
            for i in fac.neighbors:
                d = graph.domain_size(i)
                store.var_to_factor[(i, fac.id)] = uniform(d)
                store.factor_to_var[(fac.id, i)] = uniform(d)
        return store


@dataclass(frozen=True)
class BPSchedule:
    max_iterations: int = 10
    damping: float = 0.0
    convergence_tol: float = 1e-10
    combination_mode: Mapping[VariableKind, CombinationMode] = field(default_factory=dict)

    def __post_init__(self):
        if self.max_iterations < 1:
            raise FactorGraphError("max_iterations must be >= 1")
        if not 0.0 <= self.damping < 1.0:
            raise FactorGraphError("damping must lie in [0, 1)")
        if self.convergence_tol <= 0:
            raise FactorGraphError("convergence_tol must be positive")

    def mode_for(self, kind: VariableKind) -> CombinationMode:
        return self.combination_mode.get(kind, CombinationMode.MULTIPLY)


@dataclass
class BeliefSet:
    beliefs: list[np.ndarray]
    iterations: int
    converged: bool
    messages: MessageStore

    def __getitem__(self, i: int) -> np.ndarray:
        return self.beliefs[i]

    def __len__(self) -> int:
        return len(self.beliefs)


def variable_to_factor_message(
    graph: FactorGraph,
    state: MessageStore,
    i: int,
    a: int,
    mode: CombinationMode = CombinationMode.MULTIPLY,
) -> np.ndarray:
    """Message from variable ``i`` to factor ``a``: unary times all other inbound messages."""
    graph.check_adjacent(i, a)
    var = graph.variables[i]
    incoming = [state.factor_to_var[(c, i)] for c in graph.var_to_factors[i] if c != a]
    if mode is CombinationMode.SUM_MLP:
        if not incoming:
            return normalize(var.unary)
        return normalize(var.unary * np.sum(incoming, axis=0))
    return product_of([normalize(var.unary)] + incoming, var.domain_size)


def _dense_messages(graph: FactorGraph, fac: FactorNode, incoming: Sequence[np.ndarray],
                    cap: int = DEFAULT_TABLE_CAP) -> list[np.ndarray]:
    table = fac.payload
    if table.size > cap:
        raise CapacityError(f"factor {fac.id}: {table.size} joint configurations exceed cap {cap}")
    out = []
    for pos in range(len(fac.neighbors)):
        t = table
        # contract every other axis with its incoming message; axes shift as we go
        axis = 0
        for k, msg in enumerate(incoming):
            if k == pos:
                axis += 1
                continue
            t = np.tensordot(t, msg, axes=([axis], [0]))
        out.append(t)
    return out


def dense_factor_to_variable_message(
    graph: FactorGraph,
    state: MessageStore,
    a: int,
    i: int,
    cap: int = DEFAULT_TABLE_CAP,
) -> np.ndarray:
    """Exact sum-product message from a dense-table factor to one neighbor."""
    graph.check_adjacent(i, a)
    fac = graph.factors[a]
    if fac.kind is not FactorKind.DENSE_TABLE:
        raise FactorGraphError(f"factor {a} is {fac.kind.value}, not a dense table")
    table = fac.payload
    if table.size > cap:
        raise CapacityError(f"factor {a}: {table.size} joint configurations exceed cap {cap}")
    t = table
    axis = 0
    for j in fac.neighbors:
        if j == i:
            axis += 1
            continue
        t = np.tensordot(t, state.var_to_factor[(j, a)], axes=([axis], [0]))
    return normalize(t)


# A handler maps (graph, factor, incoming messages in neighbor order) to the
# outgoing messages in neighbor order.  Outputs need not be normalized.
FactorHandler = Callable[[FactorGraph, FactorNode, Sequence[np.ndarray]], Sequence[np.ndarray]]

_HANDLERS: dict[FactorKind, FactorHandler] = {FactorKind.DENSE_TABLE: _dense_messages}


def register_factor_handler(kind: FactorKind, handler: FactorHandler) -> None:
    _HANDLERS[kind] = handler


def factor_handlers() -> dict[FactorKind, FactorHandler]:
    return dict(_HANDLERS)


def _safe_normalize(msg: np.ndarray, fac: FactorNode) -> np.ndarray:
    msg = np.asarray(msg, dtype=float)
    if not np.all(np.isfinite(msg)):
        raise NumericalError(f"non-finite message from factor {fac.id} ({fac.kind.value})")
    if np.any(msg < 0):
        raise NumericalError(f"negative message from factor {fac.id} ({fac.kind.value})")
    try:
        return normalize(msg)
    except DegenerateMessageError:
        logger.warning("factor %d produced an all-zero message; using uniform", fac.id)
        return uniform(msg.size)


def run_lbp(
    graph: FactorGraph,
    schedule: BPSchedule = BPSchedule(),
    handlers: Mapping[FactorKind, FactorHandler] | None = None,
) -> BeliefSet:
    """Synchronous (flooding) sum-product belief propagation.

    Each round recomputes every factor-to-variable message from the previous
    round's variable-to-factor messages, damps it, then refreshes all
    variable-to-factor messages.  Stops when the largest factor-message change
    drops below ``schedule.convergence_tol``.
    """
    table = dict(_HANDLERS)
    if handlers:
        table.update(handlers)
    for fac in graph.factors:
        if fac.kind not in table:
            raise FactorGraphError(f"no message handler registered for {fac.kind.value}")

    state = MessageStore.uniform(graph)
    for fac in graph.factors:
        for i in fac.neighbors:
            var = graph.variables[i]
            mode = schedule.mode_for(var.kind)
            state.var_to_factor[(i, fac.id)] = variable_to_factor_message(graph, state, i, fac.id, mode)

    d = schedule.damping
    converged = False
    iterations = 0
    for iterations in range(1, schedule.max_iterations + 1):
        new_f2v: dict[tuple[int, int], np.ndarray] = {}
        delta = 0.0
        for fac in graph.factors:
            incoming = [state.var_to_factor[(i, fac.id)] for i in fac.neighbors]
            outgoing = table[fac.kind](graph, fac, incoming)
            for i, msg in zip(fac.neighbors, outgoing):
                msg = _safe_normalize(msg, fac)
                old = state.factor_to_var[(fac.id, i)]
                if d > 0:
                    msg = (1.0 - d) * msg + d * old
                delta = max(delta, float(np.max(np.abs(msg - old))))
                new_f2v[(fac.id, i)] = msg
        state.factor_to_var = new_f2v
        for fac in graph.factors:
            for i in fac.neighbors:
                mode = schedule.mode_for(graph.variables[i].kind)
                state.var_to_factor[(i, fac.id)] = variable_to_factor_message(graph, state, i, fac.id, mode)
        if delta < schedule.convergence_tol:
            converged = True
            break

    beliefs = [compute_belief(graph, state, i, schedule.mode_for(v.kind))
               for i, v in enumerate(graph.variables)]
    return BeliefSet(beliefs=beliefs, iterations=iterations, converged=converged, messages=state)


def compute_belief(graph: FactorGraph, state: MessageStore, i: int,
                   mode: CombinationMode = CombinationMode.MULTIPLY) -> np.ndarray:
    var = graph.variables[i]
    incoming = [state.factor_to_var[(a, i)] for a in graph.var_to_factors[i]]
    if mode is CombinationMode.SUM_MLP and incoming:
        return normalize(var.unary * np.sum(incoming, axis=0), strict=False)
    try:
        return product_of([normalize(var.unary)] + incoming, var.domain_size)
    except DegenerateMessageError:
        logger.warning("belief of variable %d vanished; using uniform", i)
        return uniform(var.domain_size)


def brute_force_marginals(graph: FactorGraph, cap: int = BRUTE_FORCE_CAP) -> list[np.ndarray]:
    """Exact marginals by enumerating the joint distribution (dense factors only)."""
    sizes = [v.domain_size for v in graph.variables]
    total = int(np.prod(sizes)) if sizes else 1
    if total > cap:
        raise CapacityError(f"joint space of {total} states exceeds cap {cap}")
    for fac in graph.factors:
        if fac.kind is not FactorKind.DENSE_TABLE:
            raise FactorGraphError("brute-force marginals need dense-table factors")
    n = len(sizes)
    joint = np.ones(sizes)
    for i, var in enumerate(graph.variables):
        shape = [1] * n
        shape[i] = sizes[i]
        joint = joint * var.unary.reshape(shape)
    for fac in graph.factors:
        # move the table axes to their variables' positions, then broadcast
        table = np.asarray(fac.payload, dtype=float)
        order = np.argsort(fac.neighbors)
        shape = [1] * n
        for v in fac.neighbors:
            shape[v] = sizes[v]
        joint = joint * np.transpose(table, order).reshape(shape)
    marg = [joint.sum(axis=tuple(k for k in range(n) if k != i)) for i in range(n)]
    return [normalize(m) for m in marg]
