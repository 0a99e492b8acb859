"""Molecule factor graphs and factor-weight sharing.

Variables: one per atom, one per unordered atom pair (bond multiplicity
0..4) and one per spectrum peak.  Factors:

* type A: valence constraint of atom ``i`` over its ``n - 1`` incident edges;
* type B: (edge, atom_i, atom_j) for every pair;
* type C: (peak, every atom).

Type B/C factors carry a sharing key; factors with equal keys share weights.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .chem import FAKE_H, MAX_BOND, MoleculeInstance
from .factorgraph import FactorGraph, FactorKind, FactorNode, VariableKind, VariableNode
from .valence import ValenceFactorSpec

EDGE_STATES = MAX_BOND + 1


class ConfigurationError(ValueError):
    pass


class SharingLevel(enum.Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"


@dataclass(frozen=True)
class SharingPolicy:
    level_b: SharingLevel = SharingLevel.MEDIUM
    level_c: SharingLevel = SharingLevel.MEDIUM
    k_clusters: int = 16
    cluster_centers: tuple[float, ...] = ()

    def __post_init__(self):
        if self.k_clusters < 1:
            raise ConfigurationError("k_clusters must be >= 1")
        centers = tuple(float(c) for c in self.cluster_centers)
        if list(centers) != sorted(set(centers)):
            raise ConfigurationError("cluster centers must be sorted and distinct")
        object.__setattr__(self, "cluster_centers", centers)

    @classmethod
    def uniform(cls, level: str | SharingLevel, **kwargs) -> "SharingPolicy":
        level = SharingLevel(level)
        return cls(level, level, **kwargs)


def atom_label(index: int, element: str) -> str:
    """Position label used by index-conditioned keys; the fake hydrogen is always ``H``."""
    return FAKE_H if element == FAKE_H else str(index)


def sharing_key_b(policy: SharingPolicy, slot: tuple[int, int], elements: Sequence[str]) -> str:
    i, j = slot
    if policy.level_b is SharingLevel.LOW:
        return "B"
    if policy.level_b is SharingLevel.MEDIUM:
        order = {"C": 0, "O": 1, FAKE_H: 2}
        a, b = sorted((elements[i], elements[j]), key=order.__getitem__)
        return f"B:{a}-{b}"
    return f"B:{atom_label(i, elements[i])}-{atom_label(j, elements[j])}"


def nearest_center(centers: Sequence[float], mz: float) -> int:
    c = np.asarray(centers, dtype=float)
    # argmin returns the first minimum, so ties go to the lower index
    return int(np.argmin(np.abs(c - mz)))


def sharing_key_c(policy: SharingPolicy, mz: float) -> str:
    if policy.level_c is SharingLevel.LOW:
        return "C"
    if policy.level_c is SharingLevel.MEDIUM:
        if not policy.cluster_centers:
            raise ConfigurationError("medium type-C sharing needs fitted cluster centers")
        return f"C:k{nearest_center(policy.cluster_centers, mz)}"
    return f"C:mz{int(round(mz))}"


def fit_peak_clusters(mz_values: Sequence[float], k: int, seed: int = 0,
                      max_rounds: int = 100) -> list[float]:
    """1-D K-means with seeded k-means++ initialization; returns sorted centers."""
    x = np.sort(np.asarray(mz_values, dtype=float))
    distinct = np.unique(x)
    if k < 1 or distinct.size < k:
        raise ConfigurationError(f"need at least {k} distinct m/z values, have {distinct.size}")
    rng = np.random.default_rng(seed)
    centers = [x[rng.integers(x.size)]]
    while len(centers) < k:
        d2 = np.min((x[:, None] - np.asarray(centers)[None, :]) ** 2, axis=1)
        centers.append(x[rng.choice(x.size, p=d2 / d2.sum())])
    centers = np.sort(np.asarray(centers))
    assign = None
    for _ in range(max_rounds):
        new_assign = np.argmin(np.abs(x[:, None] - centers[None, :]), axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            members = x[assign == c]
            if members.size:
                centers[c] = members.mean()
        centers = np.sort(centers)
    return [float(c) for c in centers]


@dataclass
class BuiltGraph:
    graph: FactorGraph
    instance: MoleculeInstance
    atom_vars: list[int]
    edge_vars: dict[tuple[int, int], int]
    peak_vars: list[int]
    type_a: list[int]
    type_b: list[int]
    type_c: list[int]
    param_keys: dict[int, str] = field(default_factory=dict)

    @property
    def edge_slots(self) -> list[tuple[int, int]]:
        return list(self.edge_vars)


def build_graph(instance: MoleculeInstance, policy: SharingPolicy,
                include_type_a: bool = True) -> BuiltGraph:
    n = instance.n_atoms
    if not instance.peaks:
        raise ConfigurationError("molecule has no spectrum peaks")
    elements = instance.elements
    variables: list[VariableNode] = []
    atom_vars = []
    for atom in instance.atoms:
        if atom.valence > MAX_BOND * (n - 1):
            raise ConfigurationError(
                f"atom {atom.index} valence {atom.valence} cannot be met by {n - 1} edges"
            )
        atom_vars.append(len(variables))
        variables.append(VariableNode(len(variables), 1, VariableKind.ATOM))
    edge_vars = {}
    for i in range(n):
        for j in range(i + 1, n):
            edge_vars[(i, j)] = len(variables)
            variables.append(VariableNode(len(variables), EDGE_STATES, VariableKind.EDGE))
    peak_vars = []
    for _ in instance.peaks:
        peak_vars.append(len(variables))
        variables.append(VariableNode(len(variables), 1, VariableKind.MASS_PEAK))

    factors: list[FactorNode] = []
    type_a, type_b, type_c = [], [], []
    keys: dict[int, str] = {}
    if include_type_a:
        for atom in instance.atoms:
            i = atom.index
            nbrs = tuple(edge_vars[(min(i, j), max(i, j))] for j in range(n) if j != i)
            spec = ValenceFactorSpec(atom.valence, EDGE_STATES, n - 1)
            type_a.append(len(factors))
            factors.append(FactorNode(len(factors), nbrs, FactorKind.TYPE_A, spec))
    for (i, j), e in edge_vars.items():
        key = sharing_key_b(policy, (i, j), elements)
        keys[len(factors)] = key
        type_b.append(len(factors))
        factors.append(FactorNode(len(factors), (e, atom_vars[i], atom_vars[j]), FactorKind.TYPE_B, key))
    for (mz, _), p in zip(instance.peaks, peak_vars):
        key = sharing_key_c(policy, mz)
        keys[len(factors)] = key
        type_c.append(len(factors))
        factors.append(FactorNode(len(factors), (p, *atom_vars), FactorKind.TYPE_C, key))

    return BuiltGraph(FactorGraph(variables, factors), instance, atom_vars, edge_vars,
                      peak_vars, type_a, type_b, type_c, keys)
