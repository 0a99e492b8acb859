"""Synthetic ester datasets, the valence noise-decoding experiment and ablations."""

from __future__ import annotations

import enum
import hashlib
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .chem import (
    NOMINAL_MASS,
    VALENCE,
    HeavyGraph,
    MoleculeInstance,
    label_matrix,
    molecule_from_smiles,
    parse_smiles,
    to_smiles,
)
from .learn.metrics import MetricsRecord, edge_metrics
from .learn.model import ModelConfig
from .learn.train import TrainConfig, evaluate, new_model, train
from .valence import valence_forward

logger = logging.getLogger(__name__)

N_STATES = 5


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# synthetic molecules and spectra


@dataclass(frozen=True)
class DatasetSpec:
    count: int = 200
    min_heavy: int = 5
    max_heavy: int = 13
    ester_anchored: bool = True
    oxygen_prob: float = 0.15
    multiple_bond_prob: float = 0.08
    ring_prob: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.count < 0:
            raise DatasetError("count must be >= 0")
        if not 1 <= self.min_heavy <= self.max_heavy:
            raise DatasetError("need 1 <= min_heavy <= max_heavy")
        if self.ester_anchored and self.min_heavy < 4:
            raise DatasetError("an ester needs at least 4 heavy atoms (C(=O)OC)")


def _free(elements, bonds, i):
    return VALENCE[elements[i]] - sum(o for a, b, o in bonds if i in (a, b))


def _distance(bonds, n, src, dst):
    adj = {i: set() for i in range(n)}
    for a, b, _ in bonds:
        adj[a].add(b)
        adj[b].add(a)
    frontier, seen, dist = [src], {src}, 0
    while frontier:
        if dst in frontier:
            return dist
        nxt = []
        for u in frontier:
            for w in adj[u]:
                if w not in seen:
                    seen.add(w)
                    nxt.append(w)
        frontier, dist = nxt, dist + 1
    return None


def random_skeleton(rng: np.random.Generator, n_heavy: int, spec: DatasetSpec):
    """Random connected C/O skeleton with at most one ring."""
    if spec.ester_anchored:
        elements = ["C", "O", "O", "C"]
        bonds = [(0, 1, 2), (0, 2, 1), (2, 3, 1)]
        frozen = {1, 2}
    else:
        elements, bonds, frozen = ["C"], [], set()
    while len(elements) < n_heavy:
        el = "O" if rng.random() < spec.oxygen_prob else "C"
        hosts = [i for i in range(len(elements))
                 if i not in frozen and _free(elements, bonds, i) > 0
                 and not (el == "O" and elements[i] == "O")]
        if not hosts:
            el = "C"
            hosts = [i for i in range(len(elements)) if i not in frozen and _free(elements, bonds, i) > 0]
        host = hosts[rng.integers(len(hosts))]
        order = 1
        cap = min(_free(elements, bonds, host), VALENCE[el] - 1 if el == "C" else VALENCE[el])
        if cap >= 2 and rng.random() < spec.multiple_bond_prob:
            order = 3 if cap >= 3 and el == "C" and elements[host] == "C" and rng.random() < 0.3 else 2
        idx = len(elements)
        elements.append(el)
        bonds.append((host, idx, order))
    if rng.random() < spec.ring_prob:
        carbons = [i for i, e in enumerate(elements)
                   if e == "C" and i not in frozen and i != 0 and _free(elements, bonds, i) > 0]
        pairs = [(a, b) for k, a in enumerate(carbons) for b in carbons[k + 1:]
                 if 2 <= (_distance(bonds, len(elements), a, b) or 0) <= 5]
        if pairs:
            a, b = pairs[rng.integers(len(pairs))]
            bonds.append((a, b, 1))
    return elements, bonds


def fragment_masses(graph: HeavyGraph) -> list[tuple[int, int]]:
    """Nominal masses of the two pieces for every single, non-ring heavy bond."""
    n = graph.num_atoms
    atom_mass = [NOMINAL_MASS[e] + h * NOMINAL_MASS["H"] for e, h in zip(graph.elements, graph.hydrogens)]
    out = []
    for cut in graph.bonds:
        i, j, order = cut
        if order != 1:
            continue
        adj = {k: [] for k in range(n)}
        for a, b, _ in graph.bonds:
            if (a, b, _) != cut:
                adj[a].append(b)
                adj[b].append(a)
        side, stack = {i}, [i]
        while stack:
            u = stack.pop()
            for w in adj[u]:
                if w not in side:
                    side.add(w)
                    stack.append(w)
        if j in side:
            continue  # ring bond: cutting it leaves one piece
        left = sum(atom_mass[k] for k in side)
        out.append((left, sum(atom_mass) - left))
    return out


def simulate_spectrum(graph: HeavyGraph) -> list[tuple[int, float]]:
    """Molecular ion plus single-bond fragments; intensity proportional to frequency."""
    total = sum(NOMINAL_MASS[e] + h for e, h in zip(graph.elements, graph.hydrogens))
    counts = Counter({total: 1})
    for a, b in fragment_masses(graph):
        counts[a] += 1
        counts[b] += 1
    top = max(counts.values())
    return [(int(mz), counts[mz] / top) for mz in sorted(counts)]


def generate_dataset(spec: DatasetSpec) -> list[MoleculeInstance]:
    """Deterministic list of valence-valid molecules with simulated spectra."""
    out = []
    for idx in range(spec.count):
        rng = np.random.default_rng([spec.seed, idx])
        n_heavy = int(rng.integers(spec.min_heavy, spec.max_heavy + 1))
        elements, bonds = random_skeleton(rng, n_heavy, spec)
        terminals = [i for i in range(len(elements)) if sum(i in (a, b) for a, b, _ in bonds) <= 1]
        start = terminals[rng.integers(len(terminals))] if terminals else 0
        smiles = to_smiles(elements, bonds, start)
        graph = parse_smiles(smiles)
        out.append(molecule_from_smiles(smiles, simulate_spectrum(graph), spec.ester_anchored))
    return out


# ---------------------------------------------------------------------------
# dataset files


def instance_record(inst: MoleculeInstance, anchored: bool = True) -> dict:
    return {
        "smiles": inst.smiles,
        "formula": dict(inst.formula),
        "peaks": [[int(mz), float(it)] for mz, it in inst.peaks],
        "matrix": label_matrix(inst).tolist(),
        "n_atoms": inst.n_atoms,
        "anchored": anchored,
    }


def dumps_dataset(instances: Iterable[MoleculeInstance], anchored: bool = True) -> str:
    return "".join(json.dumps(instance_record(i, anchored)) + "\n" for i in instances)


def write_dataset(path: str | Path, instances: Sequence[MoleculeInstance], anchored: bool = True) -> str:
    text = dumps_dataset(instances, anchored)
    Path(path).write_text(text)
    return content_hash(text)


def read_dataset(path: str | Path) -> list[MoleculeInstance]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            inst = molecule_from_smiles(rec["smiles"], [tuple(p) for p in rec["peaks"]],
                                        rec.get("anchored", True))
            consistent = inst.n_atoms == rec["n_atoms"] and label_matrix(inst).tolist() == rec["matrix"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from exc
        if not consistent:
            raise DatasetError(f"{path}:{lineno}: matrix does not match the SMILES")
        out.append(inst)
    return out


def read_spectrum(path: str | Path) -> list[tuple[int, float]]:
    """Plain ``mz intensity`` pairs, one per line; ``#`` starts a comment."""
    peaks = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DatasetError(f"{path}:{lineno}: expected 'mz intensity'")
        try:
            peaks.append((int(round(float(parts[0]))), float(parts[1])))
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from exc
    return peaks


def content_hash(text: str | bytes) -> str:
    """Git blob hash of the content."""
    data = text.encode() if isinstance(text, str) else text
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


# ---------------------------------------------------------------------------
# valence noise decoding


class Combination(enum.Enum):
    INITIAL = "initial"
    SUM = "sum"
    MULTIPLY = "multiply"


@dataclass(frozen=True)
class NoiseConfig:
    beta: float = 1.0
    trials: int = 5
    decode_rounds: int = 1
    combination: Combination = Combination.MULTIPLY
    seed: int = 0
    damping: float = 0.5

    def __post_init__(self):
        if not self.beta > 0:
            raise DatasetError("beta must be positive")
        if self.trials < 1 or self.decode_rounds < 1:
            raise DatasetError("trials and decode_rounds must be >= 1")
        if not 0.0 <= self.damping < 1.0:
            raise DatasetError("damping must lie in [0, 1)")
        object.__setattr__(self, "combination", Combination(self.combination))


def perturb_onehot(label: int, beta: float, rng: np.random.Generator, domain: int = N_STATES) -> np.ndarray:
    """One-hot vector plus i.i.d. exponential noise of scale ``beta``, normalized."""
    v = np.zeros(domain)
    v[label] = 1.0
    v += rng.exponential(beta, size=domain)
    return v / v.sum()


def perturb_labels(labels: np.ndarray, beta: float, rng: np.random.Generator) -> np.ndarray:
    noisy = np.zeros((labels.size, N_STATES))
    noisy[np.arange(labels.size), labels] = 1.0
    noisy += rng.exponential(beta, size=noisy.shape)
    return noisy / noisy.sum(axis=1, keepdims=True)


def _combine(mode: Combination, prior: np.ndarray, *msgs: np.ndarray) -> np.ndarray:
    if mode is Combination.MULTIPLY:
        out = prior.copy()
        for m in msgs:
            out = out * m
    else:
        out = prior + sum(msgs)
    tot = out.sum(axis=1, keepdims=True)
    return np.where(tot > 0, out / np.where(tot > 0, tot, 1.0), 1.0 / out.shape[1])


def decode_molecule(inst: MoleculeInstance, prior: np.ndarray, mode: Combination, rounds: int = 1,
                    damping: float = 0.5) -> np.ndarray:
    """Edge beliefs after ``rounds`` of type-A messages combined with ``prior``.

    Each edge sends each of its two valence factors the prior combined with
    the other factor's message.  From the second round on, new factor messages
    are mixed with the previous ones by ``damping``; undamped flooding on these
    graphs oscillates with period two.
    """
    mode = Combination(mode)
    if mode is Combination.INITIAL:
        return prior
    n = inst.n_atoms
    iu, ju = np.triu_indices(n, k=1)
    # position of edge (i, j) in the incident-edge list of i and of j
    pos_i, pos_j = ju - 1, iu
    to_i = prior.copy()  # message edge -> factor of atom iu[e]
    to_j = prior.copy()
    mu_i = mu_j = None
    for _ in range(rounds):
        g = np.zeros((n, n - 1, N_STATES))
        g[iu, pos_i] = to_i
        g[ju, pos_j] = to_j
        out, _ = valence_forward(g, inst.valences)
        new_i, new_j = out[iu, pos_i], out[ju, pos_j]
        if mu_i is not None and damping > 0:
            new_i = (1.0 - damping) * new_i + damping * mu_i
            new_j = (1.0 - damping) * new_j + damping * mu_j
        mu_i, mu_j = new_i, new_j
        to_i = _combine(mode, prior, mu_j)
        to_j = _combine(mode, prior, mu_i)
    return _combine(mode, prior, mu_i, mu_j)


@dataclass
class ExperimentReport:
    config: dict
    rows: list[dict] = field(default_factory=list)
    dataset_hash: str = ""

    def to_json(self) -> str:
        return json.dumps({"config": self.config, "dataset_hash": self.dataset_hash, "rows": self.rows},
                          indent=2, sort_keys=True)

    def table(self, columns: Sequence[str]) -> list[list]:
        return [[row.get(c) for c in columns] for row in self.rows]


def noise_trial(dataset: Sequence[MoleculeInstance], beta: float, trial: int, seed: int,
                modes: Sequence[Combination], rounds: int = 1,
                damping: float = 0.5) -> dict[Combination, MetricsRecord]:
    """One noise realization shared by every combination mode."""
    preds = {m: [] for m in modes}
    for idx, inst in enumerate(dataset):
        rng = np.random.default_rng([seed, trial, idx])
        labels = label_matrix(inst)
        prior = perturb_labels(labels, beta, rng)
        for mode in modes:
            belief = decode_molecule(inst, prior, mode, rounds, damping)
            preds[mode].append(np.argmax(belief, axis=1))
    return {m: edge_metrics(dataset, preds[m]) for m in modes}


def noise_decode(dataset: Sequence[MoleculeInstance], config: NoiseConfig) -> ExperimentReport:
    """Decode noisy one-hot edge labels with valence messages; one row per trial."""
    report = ExperimentReport(config=_jsonable(asdict(config)))
    for trial in range(config.trials):
        res = noise_trial(dataset, config.beta, trial, config.seed, [config.combination],
                          config.decode_rounds, config.damping)
        rec = res[config.combination]
        report.rows.append({"beta": config.beta, "trial": trial, "combination": config.combination.value,
                            "accuracy": rec.accuracy, "valence_rate": rec.valence_rate})
    return report


def noise_table(dataset: Sequence[MoleculeInstance], betas: Sequence[float] = (0.1, 0.2, 0.5, 1.0, 2.0),
                trials: int = 5, rounds: int = 1, seed: int = 0,
                modes: Sequence[Combination] = tuple(Combination), damping: float = 0.5) -> ExperimentReport:
    """Combination modes at every noise level; modes share each noise realization."""
    modes = [Combination(m) for m in modes]
    report = ExperimentReport(config={"betas": list(betas), "trials": trials, "decode_rounds": rounds,
                                      "damping": damping, "seed": seed, "combinations": [m.value for m in modes]})
    for beta in betas:
        for trial in range(trials):
            res = noise_trial(dataset, beta, trial, seed, modes, rounds, damping)
            for mode in modes:
                report.rows.append({"beta": float(beta), "trial": trial, "combination": mode.value,
                                    "accuracy": res[mode].accuracy, "valence_rate": res[mode].valence_rate})
    return report


def summarize_noise(report: ExperimentReport) -> list[dict]:
    """Mean accuracy / valence rate per (beta, combination)."""
    groups: dict[tuple, list[dict]] = {}
    for row in report.rows:
        groups.setdefault((row["beta"], row["combination"]), []).append(row)
    out = []
    for (beta, comb), rows in sorted(groups.items(), key=lambda kv: (kv[0][0], [c.value for c in Combination].index(kv[0][1]))):
        out.append({"beta": beta, "combination": comb,
                    "accuracy": float(np.mean([r["accuracy"] for r in rows])),
                    "valence_rate": float(np.mean([r["valence_rate"] for r in rows])),
                    "trials": len(rows)})
    return out


# ---------------------------------------------------------------------------
# ablations

ABLATION_VARIANTS = ("low", "medium", "high", "no_type_a", "no_bc")


@dataclass(frozen=True)
class AblationConfig:
    """Which variants to run, over which seeds, with which model and training settings."""

    seeds: tuple[int, ...] = (0,)
    variants: tuple[str, ...] = ABLATION_VARIANTS
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        unknown = set(self.variants) - set(ABLATION_VARIANTS)
        if unknown:
            raise DatasetError(f"unknown ablation variants {sorted(unknown)}")
        if not self.seeds:
            raise DatasetError("at least one seed is required")


def _variant_model(base: ModelConfig, variant: str) -> ModelConfig:
    """Config used to train ``variant``; ``no_type_a`` reuses the medium model."""
    cfg = asdict(base)
    if variant in ("low", "medium", "high"):
        cfg.update(sharing_b=variant, sharing_c=variant)
    else:
        cfg.update(sharing_b="medium", sharing_c="medium")
    if variant == "no_bc":
        cfg.update(use_type_bc=False)
    return ModelConfig(**cfg)


def check_splits(train_set: Sequence[MoleculeInstance], test_set: Sequence[MoleculeInstance],
                 max_atoms: int | None = None) -> None:
    if not train_set or not test_set:
        raise DatasetError("train and test splits must both be non-empty")
    if max_atoms is not None:
        big = max(inst.n_atoms for inst in list(train_set) + list(test_set))
        if big > max_atoms:
            raise DatasetError(f"split holds a molecule with {big} atoms; models support {max_atoms}")


def run_ablations(train_set: Sequence[MoleculeInstance], test_set: Sequence[MoleculeInstance],
                  config: AblationConfig = AblationConfig(),
                  progress: Callable[[str, int, dict], None] | None = None) -> ExperimentReport:
    """Train and evaluate the sharing levels and factor ablations on one split.

    Every row carries test accuracy and valence rate plus their deltas against
    FGMN-Medium of the same seed.  ``no_type_a`` is the trained medium model
    evaluated without valence factors; ``no_bc`` is trained without type-B/C
    factors.
    """
    check_splits(train_set, test_set, config.model.max_atoms)
    report = ExperimentReport(config={"seeds": list(config.seeds), "variants": list(config.variants),
                                      "model": config.model.to_dict(),
                                      "training": _jsonable(asdict(config.training))},
                              dataset_hash=content_hash(dumps_dataset(list(train_set) + list(test_set))))
    needed = set(config.variants) | {"medium"}
    for seed in config.seeds:
        tc = TrainConfig(**{**asdict(config.training), "seed": seed})
        records: dict[str, MetricsRecord] = {}
        medium = None
        for variant in ("low", "medium", "high", "no_bc"):
            if variant not in needed:
                continue
            params = new_model(_variant_model(config.model, variant), train_set, seed)
            train(params, train_set, tc)
            records[variant] = evaluate(params, test_set, tc.policy)
            if variant == "medium":
                medium = params
            if progress is not None:
                progress(variant, seed, records[variant].to_dict())
        if "no_type_a" in needed:
            records["no_type_a"] = evaluate(medium, test_set, tc.policy, use_type_a=False)
        ref = records["medium"]
        for variant in config.variants:
            rec = records[variant]
            report.rows.append({"seed": seed, "variant": variant, "accuracy": rec.accuracy,
                                "valence_rate": rec.valence_rate, "accuracy_heavy": rec.accuracy_heavy,
                                "loss": rec.loss,
                                "delta_accuracy": rec.accuracy - ref.accuracy,
                                "delta_valence_rate": rec.valence_rate - ref.valence_rate})
    return report


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
