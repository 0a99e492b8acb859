"""Training loop, evaluation and JSON checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..builder import fit_peak_clusters
from ..chem import MoleculeInstance
from .loss import PermutationPolicy, aligned_labels, cross_entropy, permutation_min_loss
from .metrics import MetricsRecord, edge_metrics
from .model import GraphBatch, ModelConfig, ModelParams, MoleculeTensors, backward, forward, tensors_for

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "fgmn-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    grad_clip: float = 5.0
    seed: int = 0
    exhaustive_cap: int = 10_000
    permute: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and learning_rate >= 0 required")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")

    @property
    def policy(self) -> PermutationPolicy:
        return PermutationPolicy(self.exhaustive_cap, self.permute)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name in sorted(grads):
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            arrays[name] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, arrays, grads):
        for name in sorted(grads):
            arrays[name] -= self.lr * grads[name]


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    diverged: bool = False


def new_model(config: ModelConfig, train_set: Sequence[MoleculeInstance], seed: int = 0) -> ModelParams:
    """Fresh parameters; fits peak clusters on the training spectra when needed."""
    centers: list[float] = []
    if config.sharing_c == "medium":
        mz = [p[0] for inst in train_set for p in inst.peaks]
        k = min(config.k_clusters, len(set(mz)))
        centers = fit_peak_clusters(mz, k, seed=seed) if k else []
    return ModelParams.initialize(config, seed, centers)


def batch_step(gb: GraphBatch, params: ModelParams, policy: PermutationPolicy,
               need_grad: bool = True, **flags):
    """Per-molecule losses, mean-loss gradients, predictions and aligned targets."""
    logits, cache = forward(gb, params, keep_cache=need_grad, **flags)
    dlogits = np.zeros_like(logits)
    losses, preds, targets = [], [], []
    for k, mt in enumerate(gb.molecules):
        sl = gb.molecule_slice(k)
        _, perm = permutation_min_loss(logits[sl], mt.labels, mt.elements, policy)
        target = aligned_labels(mt.labels, perm)
        loss, dl = cross_entropy(logits[sl], target)
        dlogits[sl] = dl / len(gb.molecules)
        losses.append(loss)
        preds.append(np.argmax(logits[sl], axis=1))
        targets.append(target)
    grads = backward(gb, params, cache, dlogits) if need_grad else {}
    return np.array(losses), grads, preds, targets


def molecule_step(mt: MoleculeTensors, params: ModelParams, policy: PermutationPolicy,
                  need_grad: bool = True, **flags):
    """Loss, gradients, argmax prediction and aligned target for one molecule."""
    losses, grads, preds, targets = batch_step(GraphBatch([mt], params.config.max_atoms),
                                               params, policy, need_grad, **flags)
    return float(losses[0]), grads, preds[0], targets[0]


def predict(params: ModelParams, dataset: Sequence[MoleculeInstance], batch_size: int = 32,
            use_type_a: bool | None = None, use_type_bc: bool | None = None) -> list[np.ndarray]:
    """Edge-class probabilities ``(m, 5)`` per molecule, upper-triangle order."""
    out = []
    for start in range(0, len(dataset), batch_size):
        mts = [tensors_for(inst, params) for inst in dataset[start:start + batch_size]]
        gb = GraphBatch(mts, params.config.max_atoms)
        logits, _ = forward(gb, params, keep_cache=False, use_type_a=use_type_a, use_type_bc=use_type_bc)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs = z / z.sum(axis=1, keepdims=True)
        out.extend(probs[gb.molecule_slice(k)] for k in range(len(mts)))
    return out


def evaluate(params: ModelParams, dataset: Sequence[MoleculeInstance],
             policy: PermutationPolicy = PermutationPolicy(),
             use_type_a: bool | None = None, use_type_bc: bool | None = None,
             batch_size: int = 32, tensors: Sequence[MoleculeTensors] | None = None) -> MetricsRecord:
    """Loss and edge metrics; ``tensors`` may carry precomputed graphs for ``dataset``."""
    if not dataset:
        raise ValueError("empty dataset")
    if tensors is None:
        tensors = [tensors_for(inst, params) for inst in dataset]
    losses, preds, targets = [], [], []
    for start in range(0, len(dataset), batch_size):
        mts = list(tensors[start:start + batch_size])
        l, _, p, t = batch_step(GraphBatch(mts, params.config.max_atoms), params, policy,
                                need_grad=False, use_type_a=use_type_a, use_type_bc=use_type_bc)
        losses.extend(l)
        preds.extend(p)
        targets.extend(t)
    return edge_metrics(dataset, preds, targets, float(np.mean(losses)))


def _clip(grads: dict[str, np.ndarray], limit: float) -> None:
    if limit <= 0:
        return
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > limit:
        for g in grads.values():
            g *= limit / norm


def train(params: ModelParams, dataset: Sequence[MoleculeInstance], config: TrainConfig,
          validation: Sequence[MoleculeInstance] | None = None,
          callback: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Mini-batch training on the permutation-minimal cross-entropy.

    ``params`` is updated in place.  With a validation set the returned
    parameters are those of the epoch with the lowest validation loss.
    ``callback(epoch, entry)`` runs after every epoch; a true return value
    stops training.
    """
    if not dataset:
        raise ValueError("empty training set")
    tensors = [tensors_for(inst, params) for inst in dataset]
    val_tensors = [tensors_for(inst, params) for inst in validation] if validation else None
    opt = Adam(config.learning_rate) if config.optimizer == "adam" else SGD(config.learning_rate)
    policy = config.policy
    result = TrainResult(params)
    best_loss = np.inf
    best = params.copy()
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(dataset))
        losses, preds, targets = np.zeros(len(dataset)), [None] * len(dataset), [None] * len(dataset)
        diverged = False
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            gb = GraphBatch([tensors[i] for i in batch], params.config.max_atoms)
            loss, grads, pred, target = batch_step(gb, params, policy)
            if not np.all(np.isfinite(loss)):
                diverged = True
                break
            for k, idx in enumerate(batch):
                losses[idx], preds[idx], targets[idx] = loss[k], pred[k], target[k]
            _clip(grads, config.grad_clip)
            opt.step(params.arrays, grads)
        if diverged or not all(np.all(np.isfinite(v)) for v in params.arrays.values()):
            logger.warning("training diverged in epoch %d; restoring last good parameters", epoch)
            params.arrays = best.arrays
            result.params = params
            result.diverged = True
            return result
        rec = edge_metrics(dataset, preds, targets, float(losses.mean()))
        entry = {"epoch": epoch, "train": rec.to_dict()}
        if validation:
            val = evaluate(params, validation, policy, tensors=val_tensors)
            entry["validation"] = val.to_dict()
            if val.loss < best_loss:
                best_loss, best, result.best_epoch = val.loss, params.copy(), epoch
        else:
            best, result.best_epoch = params.copy(), epoch
        result.history.append(entry)
        if callback is not None and callback(epoch, entry):
            break
    if validation:
        params.arrays = best.arrays
    return result


def checkpoint_dict(params: ModelParams, extra: dict | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "seed": params.seed,
        "cluster_centers": list(params.cluster_centers),
        "extra": extra or {},
        "arrays": {name: params.arrays[name].tolist() for name in sorted(params.arrays)},
    }


def save_checkpoint(path: str | Path, params: ModelParams, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(params, extra)))


def load_checkpoint(path: str | Path) -> ModelParams:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not a JSON document") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not an fgmn checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {doc.get('version')} != {CHECKPOINT_VERSION}")
    known = {f.name for f in fields(ModelConfig)}
    config = ModelConfig(**{k: v for k, v in doc["config"].items() if k in known})
    arrays = {name: np.array(value, dtype=float) for name, value in doc["arrays"].items()}
    return ModelParams(config, int(doc["seed"]), arrays, tuple(doc["cluster_centers"]))
