"""Edge accuracy and valence satisfaction."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from ..chem import FAKE_H, MoleculeInstance, label_matrix, matrix_from_labels


@dataclass
class MetricsRecord:
    loss: float = float("nan")
    accuracy: float = 0.0
    valence_rate: float = 0.0
    accuracy_heavy: float = 0.0
    molecules: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def edge_metrics(dataset: Sequence[MoleculeInstance], predictions: Sequence[np.ndarray],
                 targets: Sequence[np.ndarray] | None = None, loss: float = float("nan")) -> MetricsRecord:
    """Per-molecule upper-triangle accuracy averaged over molecules, plus the
    pooled fraction of atoms whose predicted bond sum equals their valence.

    ``accuracy_heavy`` ignores entries in the fake-hydrogen row/column.
    """
    if not dataset:
        raise ValueError("empty dataset")
    accs, heavy_accs = [], []
    ok_atoms = total_atoms = 0
    for k, (inst, pred) in enumerate(zip(dataset, predictions)):
        pred = np.asarray(pred, dtype=int)
        target = label_matrix(inst) if targets is None else np.asarray(targets[k], dtype=int)
        correct = pred == target
        accs.append(correct.mean())
        n = inst.n_atoms
        iu, ju = np.triu_indices(n, k=1)
        heavy = np.array([inst.atoms[i].element != FAKE_H and inst.atoms[j].element != FAKE_H
                          for i, j in zip(iu, ju)], dtype=bool)
        heavy_accs.append(correct[heavy].mean() if heavy.any() else 1.0)
        sums = matrix_from_labels(pred, n).sum(axis=1)
        ok_atoms += int(np.sum(sums == inst.valences))
        total_atoms += n
    return MetricsRecord(loss=float(loss), accuracy=float(np.mean(accs)),
                         valence_rate=ok_atoms / total_atoms,
                         accuracy_heavy=float(np.mean(heavy_accs)), molecules=len(accs))
