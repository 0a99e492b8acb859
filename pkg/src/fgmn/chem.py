"""Molecule data model for C/H/O structures.

Hydrogens are never explicit: each molecule gets one fake hydrogen atom
(element ``"H"``) bonded to every heavy atom with multiplicity equal to that
atom's hydrogen count.  Supported SMILES: ``C``, ``O``, branches, ``-``/``=``/``#``
bonds and ring-closure digits ``1``-``9``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

NOMINAL_MASS = {"C": 12, "O": 16, "H": 1}
VALENCE = {"C": 4, "O": 2, "H": 1}
HEAVY_ELEMENTS = ("C", "O")
FAKE_H = "H"
ELEMENTS = ("C", "O", "H")
MAX_BOND = 4  # largest edge state; only fake-hydrogen edges reach it
BOND_SYMBOLS = {"-": 1, "=": 2, "#": 3}


class ChemError(ValueError):
    pass


class SmilesError(ChemError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class ValenceError(ChemError):
    pass


class UnsupportedStructureError(ChemError):
    pass


@dataclass
class HeavyGraph:
    """Heavy atoms in SMILES order with explicit bonds and implicit H counts."""

    elements: list[str]
    bonds: list[tuple[int, int, int]]
    hydrogens: list[int]
    smiles: str = ""

    @property
    def num_atoms(self) -> int:
        return len(self.elements)

    def formula(self) -> dict[str, int]:
        counts = Counter(self.elements)
        return {"C": counts.get("C", 0), "H": int(sum(self.hydrogens)), "O": counts.get("O", 0)}


@dataclass(frozen=True)
class Atom:
    element: str
    index: int
    valence: int

    @property
    def nominal_mass(self) -> int:
        return NOMINAL_MASS[self.element]

    @property
    def is_fake_hydrogen(self) -> bool:
        return self.element == FAKE_H


@dataclass
class MoleculeInstance:
    formula: dict[str, int]
    atoms: list[Atom]
    bond_matrix: np.ndarray
    peaks: list[tuple[int, float]] = field(default_factory=list)
    smiles: str = ""

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def elements(self) -> list[str]:
        return [a.element for a in self.atoms]

    @property
    def valences(self) -> np.ndarray:
        return np.array([a.valence for a in self.atoms], dtype=int)


def parse_smiles(text: str) -> HeavyGraph:
    """Parse the supported SMILES subset into a heavy-atom graph."""
    if not text:
        raise SmilesError("empty SMILES", 0)
    elements: list[str] = []
    bonds: dict[tuple[int, int], int] = {}
    branch_stack: list[int] = []
    rings: dict[str, tuple[int, int | None, int]] = {}
    prev: int | None = None
    pending: int | None = None
    pending_pos = 0

    def add_bond(i, j, order, pos):
        key = (min(i, j), max(i, j))
        if i == j:
            raise SmilesError("ring closure onto the same atom", pos)
        if key in bonds:
            raise SmilesError("duplicate bond", pos)
        bonds[key] = order

    for pos, ch in enumerate(text):
        if ch in ("C", "O"):
            idx = len(elements)
            elements.append(ch)
            if prev is not None:
                add_bond(prev, idx, pending or 1, pos)
            elif pending is not None:
                raise SmilesError("bond without a preceding atom", pending_pos)
            prev, pending = idx, None
        elif ch in BOND_SYMBOLS:
            if pending is not None:
                raise SmilesError("two consecutive bond symbols", pos)
            if prev is None:
                raise SmilesError("bond without a preceding atom", pos)
            pending, pending_pos = BOND_SYMBOLS[ch], pos
        elif ch == "(":
            if prev is None or pending is not None:
                raise SmilesError("branch must follow an atom", pos)
            branch_stack.append(prev)
        elif ch == ")":
            if not branch_stack:
                raise SmilesError("unbalanced ')'", pos)
            if pending is not None:
                raise SmilesError("branch ends with a bond symbol", pos)
            if prev == branch_stack[-1]:
                raise SmilesError("empty branch", pos)
            prev = branch_stack.pop()
        elif ch in "123456789":
            if prev is None:
                raise SmilesError("ring closure without an atom", pos)
            if ch in rings:
                other, order, _ = rings.pop(ch)
                if order is not None and pending is not None and order != pending:
                    raise SmilesError("conflicting ring-closure bond orders", pos)
                add_bond(other, prev, pending or order or 1, pos)
            else:
                rings[ch] = (prev, pending, pos)
            pending = None
        elif ch in "cobnsp":
            raise SmilesError(f"aromatic atom '{ch}' is not supported", pos)
        elif ch.isalpha() or ch == "[":
            raise SmilesError(f"unsupported element or token '{ch}'", pos)
        else:
            raise SmilesError(f"unexpected character '{ch}'", pos)

    if pending is not None:
        raise SmilesError("SMILES ends with a bond symbol", pending_pos)
    if branch_stack:
        raise SmilesError("unclosed branch", len(text))
    if rings:
        digit, (_, _, pos) = next(iter(rings.items()))
        raise SmilesError(f"ring closure {digit} never closed", pos)

    used = [0] * len(elements)
    for (i, j), order in bonds.items():
        used[i] += order
        used[j] += order
    hydrogens = []
    for idx, (el, u) in enumerate(zip(elements, used)):
        h = VALENCE[el] - u
        if h < 0:
            raise ValenceError(f"atom {idx} ({el}) carries bond order {u} > valence {VALENCE[el]}")
        hydrogens.append(h)
    bond_list = sorted((i, j, o) for (i, j), o in bonds.items())
    return HeavyGraph(elements, bond_list, hydrogens, text)


def formula_mass(formula: Mapping[str, int]) -> int:
    total = 0
    for el, count in formula.items():
        if el not in NOMINAL_MASS:
            raise ChemError(f"unknown element {el!r}")
        if count < 0:
            raise ChemError(f"negative count for {el}")
        total += count * NOMINAL_MASS[el]
    return total


def collapse_hydrogens(graph: HeavyGraph) -> MoleculeInstance:
    """Append the fake hydrogen atom and build the full bond matrix (SMILES order)."""
    n = graph.num_atoms + 1
    fake = n - 1
    mat = np.zeros((n, n), dtype=int)
    for i, j, order in graph.bonds:
        mat[i, j] = mat[j, i] = order
    for i, h in enumerate(graph.hydrogens):
        if h > MAX_BOND:
            raise UnsupportedStructureError(f"atom {i} has {h} hydrogens (max {MAX_BOND})")
        mat[i, fake] = mat[fake, i] = h
    total_h = int(sum(graph.hydrogens))
    atoms = [Atom(el, i, VALENCE[el]) for i, el in enumerate(graph.elements)]
    atoms.append(Atom(FAKE_H, fake, total_h))
    return MoleculeInstance(graph.formula(), atoms, mat, [], graph.smiles)


def find_ester_anchor(elements: Sequence[str], bond_matrix: np.ndarray) -> tuple[int, int, int] | None:
    """First ``C(=O)O`` match as (carbon, carbonyl O, single-bonded O), preferring esters."""
    heavy = [i for i, el in enumerate(elements) if el != FAKE_H]
    best = None
    for c in heavy:
        if elements[c] != "C":
            continue
        dbl = [o for o in heavy if elements[o] == "O" and bond_matrix[c, o] == 2]
        sgl = [o for o in heavy if elements[o] == "O" and bond_matrix[c, o] == 1]
        if not dbl or not sgl:
            continue
        for o2 in sgl:
            ester = any(elements[k] == "C" and k != c and bond_matrix[o2, k] == 1 for k in heavy)
            if ester:
                return (c, dbl[0], o2)
        if best is None:
            best = (c, dbl[0], sgl[0])
    return best


def canonical_order(elements: Sequence[str], bond_matrix: np.ndarray | None = None,
                    anchor_ester: bool = False) -> list[int]:
    """Permutation ``perm`` with ``perm[new] = old`` in SMILES (input) order.

    Carbons first, then oxygens, then the fake hydrogen, each group keeping
    its input order.  With ``anchor_ester`` the ``C(=O)O`` atoms are moved to
    the first three positions.
    """
    front: list[int] = []
    if anchor_ester and bond_matrix is not None:
        match = find_ester_anchor(elements, bond_matrix)
        if match is not None:
            front = list(match)
    rest = [i for i in range(len(elements)) if i not in front]
    rank = {"C": 0, "O": 1, FAKE_H: 2}
    rest.sort(key=lambda i: rank[elements[i]])
    return front + rest


def permute_instance(inst: MoleculeInstance, perm: Sequence[int]) -> MoleculeInstance:
    perm = list(perm)
    mat = inst.bond_matrix[np.ix_(perm, perm)]
    atoms = [Atom(inst.atoms[old].element, new, inst.atoms[old].valence) for new, old in enumerate(perm)]
    return MoleculeInstance(dict(inst.formula), atoms, mat, list(inst.peaks), inst.smiles)


def canonicalize(inst: MoleculeInstance, anchor_ester: bool = False) -> MoleculeInstance:
    return permute_instance(inst, canonical_order(inst.elements, inst.bond_matrix, anchor_ester))


def molecule_from_smiles(smiles: str, peaks: Sequence[tuple[int, float]] = (),
                         anchor_ester: bool = True) -> MoleculeInstance:
    inst = canonicalize(collapse_hydrogens(parse_smiles(smiles)), anchor_ester)
    inst.peaks = [(int(mz), float(it)) for mz, it in peaks]
    return inst


def label_matrix(inst_or_matrix) -> np.ndarray:
    """Upper-triangle entries of the bond matrix in row-major order."""
    mat = inst_or_matrix.bond_matrix if isinstance(inst_or_matrix, MoleculeInstance) else np.asarray(inst_or_matrix)
    iu, ju = np.triu_indices(mat.shape[0], k=1)
    return mat[iu, ju].astype(int)


def matrix_from_labels(labels: Sequence[int], n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    if labels.size != n * (n - 1) // 2:
        raise ChemError(f"{labels.size} labels do not fill a {n}x{n} upper triangle")
    mat = np.zeros((n, n), dtype=int)
    iu, ju = np.triu_indices(n, k=1)
    mat[iu, ju] = labels
    mat[ju, iu] = labels
    return mat


def check_valences(inst: MoleculeInstance) -> bool:
    mat = inst.bond_matrix
    if not np.array_equal(mat, mat.T) or np.any(np.diag(mat) != 0):
        return False
    return bool(np.all(mat.sum(axis=1) == inst.valences))


def to_smiles(elements: Sequence[str], bonds: Sequence[tuple[int, int, int]], start: int = 0) -> str:
    """Write a connected heavy-atom graph as SMILES (depth-first, rings as digits)."""
    n = len(elements)
    adj: dict[int, list[int]] = {i: [] for i in range(n)}
    order = {}
    for i, j, o in bonds:
        adj[i].append(j)
        adj[j].append(i)
        order[(min(i, j), max(i, j))] = o
    for i in adj:
        adj[i].sort()

    parent = {start: None}
    children: dict[int, list[int]] = {i: [] for i in range(n)}
    ring_edges: list[tuple[int, int]] = []
    seen = {start}
    stack = [(start, iter(adj[start]))]
    while stack:
        u, it = stack[-1]
        for w in it:
            if w == parent[u]:
                continue
            if w in seen:
                edge = (min(u, w), max(u, w))
                if edge not in ring_edges and parent.get(w) != u:
                    ring_edges.append(edge)
                continue
            seen.add(w)
            parent[w] = u
            children[u].append(w)
            stack.append((w, iter(adj[w])))
            break
        else:
            stack.pop()
    if len(seen) != n:
        raise ChemError("graph is not connected")
    if len(ring_edges) > 9:
        raise ChemError("too many rings for single-digit closures")

    sym = {1: "", 2: "=", 3: "#"}
    digits: dict[tuple[int, int], int] = {e: k + 1 for k, e in enumerate(ring_edges)}
    visit_rank: dict[int, int] = {}

    def emit(u: int) -> str:
        visit_rank[u] = len(visit_rank)
        out = [elements[u]]
        for e in ring_edges:
            if u in e:
                other = e[0] if e[1] == u else e[1]
                opening = other not in visit_rank
                out.append((sym[order[e]] if opening else "") + str(digits[e]))
        kids = children[u]
        for k, w in enumerate(kids):
            b = sym[order[(min(u, w), max(u, w))]]
            part = b + emit(w)
            out.append(part if k == len(kids) - 1 else f"({part})")
        return "".join(out)

    return emit(start)
