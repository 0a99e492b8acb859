"""Random instances checked against exhaustive enumeration.

Each ``check_*`` function draws ``cases`` seeded instances, runs the fast
algorithm and its brute-force counterpart, and returns an :class:`OracleResult`
holding the worst L-infinity disagreement.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .factorgraph import (
    BPSchedule,
    FactorGraph,
    FactorKind,
    FactorNode,
    VariableKind,
    VariableNode,
    brute_force_marginals,
    normalize,
    run_lbp,
)
from .lowrank import LowRankFactorParams, lowrank_message
from .valence import ValenceFactorSpec, brute_force_valence_messages, valence_messages


@dataclass
class OracleResult:
    name: str
    cases: int
    max_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}\t{self.name}\tcases={self.cases}\tmax_err={self.max_error:.3e}"
                f"\ttol={self.tolerance:.0e}\t{self.seconds:.2f}s")


def random_valence_case(rng: np.random.Generator, max_t: int = 5, max_bond: int = 4, max_v: int = 8):
    t = int(rng.integers(1, max_t + 1))
    d = int(rng.integers(1, max_bond + 1)) + 1
    v = int(rng.integers(0, max_v + 1))
    msgs = [normalize(rng.random(d) + 1e-3) for _ in range(t)]
    return ValenceFactorSpec(v, d, t), msgs


def check_valence(cases: int = 1000, seed: int = 0, tol: float = 1e-9) -> OracleResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    start = time.perf_counter()
    for _ in range(cases):
        spec, msgs = random_valence_case(rng)
        fast = valence_messages(spec, msgs)
        slow = brute_force_valence_messages(spec, msgs)
        worst = max(worst, float(np.max(np.abs(np.asarray(fast) - np.asarray(slow)))))
    return OracleResult("valence-dp", cases, worst, tol, time.perf_counter() - start)


def random_tree_graph(rng: np.random.Generator, max_vars: int = 10, max_domain: int = 5,
                      max_arity: int = 3) -> FactorGraph:
    """Random factor tree: each new factor joins one existing variable to fresh ones."""
    n = int(rng.integers(1, max_vars + 1))
    sizes = rng.integers(2, max_domain + 1, size=n)
    variables = [VariableNode(i, int(sizes[i]), VariableKind.ATOM, rng.random(int(sizes[i])) + 0.05)
                 for i in range(n)]
    factors = []
    placed = 1
    while placed < n:
        k = int(rng.integers(1, min(max_arity - 1, n - placed) + 1))
        anchor = int(rng.integers(0, placed))
        scope = [anchor] + list(range(placed, placed + k))
        rng.shuffle(scope)
        table = rng.random([int(sizes[v]) for v in scope]) + 0.01
        factors.append(FactorNode(len(factors), tuple(int(v) for v in scope), FactorKind.DENSE_TABLE, table))
        placed += k
    # a few single-variable factors hanging off the tree keep it acyclic
    for v in rng.choice(n, size=int(rng.integers(0, 3)), replace=True):
        factors.append(FactorNode(len(factors), (int(v),), FactorKind.DENSE_TABLE,
                                  rng.random(int(sizes[v])) + 0.01))
    return FactorGraph(variables, factors)


def check_lbp_trees(cases: int = 100, seed: int = 0, tol: float = 1e-9) -> OracleResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    start = time.perf_counter()
    for _ in range(cases):
        graph = random_tree_graph(rng)
        exact = brute_force_marginals(graph)
        beliefs = run_lbp(graph, BPSchedule(max_iterations=2 * len(graph.variables) + 2)).beliefs
        worst = max(worst, max(float(np.max(np.abs(b - e))) for b, e in zip(beliefs, exact)))
    return OracleResult("lbp-trees", cases, worst, tol, time.perf_counter() - start)


def dense_message(table: np.ndarray, incoming: list[np.ndarray], target: int) -> np.ndarray:
    """Exact sum-product message by contracting the full potential table."""
    t = np.moveaxis(table, target, 0)
    for msg in [m for k, m in enumerate(incoming) if k != target][::-1]:
        t = t @ msg
    return t


def check_lowrank(cases: int = 200, seed: int = 0, tol: float = 1e-8) -> OracleResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    start = time.perf_counter()
    for _ in range(cases):
        arity = int(rng.integers(1, 4))
        rank = int(rng.integers(1, 5))
        sizes = rng.integers(1, 6, size=arity)
        params = LowRankFactorParams([rng.random((int(s), rank)) for s in sizes])
        table = params.dense_table()
        incoming = [normalize(rng.random(int(s)) + 1e-3) for s in sizes]
        for target in range(arity):
            fast = normalize(lowrank_message(params, dict(enumerate(incoming)), target))
            slow = normalize(dense_message(table, incoming, target))
            worst = max(worst, float(np.max(np.abs(fast - slow))))
    return OracleResult("lowrank-cp", cases, worst, tol, time.perf_counter() - start)


def run_all(seed: int = 0, valence_cases: int = 1000, tree_cases: int = 100,
            lowrank_cases: int = 200) -> list[OracleResult]:
    return [check_valence(valence_cases, seed), check_lbp_trees(tree_cases, seed),
            check_lowrank(lowrank_cases, seed)]
