"""Cross-entropy minimized over relabelings of same-element atoms."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class PermutationPolicy:
    """Exhaustive search while the candidate count stays under ``exhaustive_cap``,
    otherwise greedy pairwise swaps from the identity."""

    exhaustive_cap: int = 10_000
    enabled: bool = True


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def element_blocks(elements: Sequence[str]) -> list[list[int]]:
    groups: dict[str, list[int]] = {}
    for i, el in enumerate(elements):
        groups.setdefault(el, []).append(i)
    return [g for g in groups.values() if len(g) > 1]


def _as_matrix(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    if labels.ndim == 2:
        return labels
    mat = np.zeros((n, n), dtype=int)
    iu, ju = np.triu_indices(n, k=1)
    mat[iu, ju] = labels
    mat[ju, iu] = labels
    return mat


def aligned_labels(labels, perm: Sequence[int]) -> np.ndarray:
    """Upper-triangle labels after relabeling atom ``a`` as ``perm[a]``."""
    perm = np.asarray(perm)
    n = perm.size
    mat = _as_matrix(labels, n)
    iu, ju = np.triu_indices(n, k=1)
    return mat[perm[iu], perm[ju]]


@lru_cache(maxsize=256)
def _block_permutations(n: int, blocks: tuple[tuple[int, ...], ...]) -> np.ndarray:
    """Every relabeling that permutes atoms within blocks, identity first."""
    per_block = [np.array(list(itertools.permutations(b)), dtype=int) for b in blocks]
    grid = np.indices([len(p) for p in per_block]).reshape(len(blocks), -1)
    perms = np.tile(np.arange(n), (grid.shape[1], 1))
    for b, p, g in zip(blocks, per_block, grid):
        perms[:, list(b)] = p[g]
    perms.flags.writeable = False
    return perms


def _losses(nll: np.ndarray, mat: np.ndarray, perms: np.ndarray) -> np.ndarray:
    n = mat.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    lab = mat[perms[:, iu], perms[:, ju]]  # (N, m)
    return nll[np.arange(iu.size)[None, :], lab].mean(axis=1)


def permutation_min_loss(logits: np.ndarray, labels, elements: Sequence[str],
                         policy: PermutationPolicy = PermutationPolicy(),
                         blocks: Sequence[Sequence[int]] | None = None):
    """Returns ``(loss, perm)``: mean cross-entropy under the best relabeling found.

    ``labels`` is the upper-triangle sequence or the full matrix; ``blocks``
    overrides the default same-element groups.
    """
    logits = np.asarray(logits, dtype=float)
    n = len(elements)
    mat = _as_matrix(labels, n)
    nll = -log_softmax(logits)
    identity = np.arange(n)
    if blocks is None:
        blocks = element_blocks(elements)
    blocks = [list(b) for b in blocks if len(b) > 1]
    if not policy.enabled or not blocks:
        return float(_losses(nll, mat, identity[None])[0]), identity

    count = math.prod(math.factorial(len(b)) for b in blocks)
    if count <= policy.exhaustive_cap:
        perms = _block_permutations(n, tuple(tuple(b) for b in blocks))
        losses = _losses(nll, mat, perms)
        best = int(np.argmin(losses))
        return float(losses[best]), perms[best].copy()

    pairs = [(a, b) for blk in blocks for a, b in itertools.combinations(blk, 2)]
    perm = identity.copy()
    current = float(_losses(nll, mat, perm[None])[0])
    while True:
        cands = np.tile(perm, (len(pairs), 1))
        for row, (a, b) in enumerate(pairs):
            cands[row, a], cands[row, b] = perm[b], perm[a]
        losses = _losses(nll, mat, cands)
        best = int(np.argmin(losses))
        if losses[best] >= current - 1e-15:
            break
        perm, current = cands[best], float(losses[best])
    return current, perm


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. ``logits``."""
    logp = log_softmax(logits)
    m = labels.size
    loss = -logp[np.arange(m), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(m), labels] -= 1.0
    return float(loss), grad / m
