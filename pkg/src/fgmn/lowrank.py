"""Low-rank factor messages, the neuralized node update, and a small MLP.

A factor whose potential is the rank-``r`` CP tensor

    f(x_1..x_L) = sum_k prod_j W_j[x_j, k]

sends ``W_i @ prod_{j != i} (W_j.T @ m_j)`` to neighbor ``i``.  The neural
update replaces messages by node hidden states and the product over factors
by a sum followed by an MLP, with a residual connection.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .factorgraph import (
    CombinationMode,
    FactorGraph,
    FactorKind,
    FactorNode,
    register_factor_handler,
)

LOWRANK_KINDS = (FactorKind.TYPE_B, FactorKind.TYPE_C)


@dataclass
class LowRankFactorParams:
    """Per-slot weight matrices ``W_j`` of shape ``(size_j, rank)``."""

    weights: list[np.ndarray]

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        ranks = {w.shape[1] for w in self.weights}
        if len(ranks) != 1:
            raise ValueError(f"slot matrices disagree on rank: {sorted(ranks)}")
        if not all(np.all(np.isfinite(w)) for w in self.weights):
            raise ValueError("weights must be finite")

    @property
    def rank(self) -> int:
        return self.weights[0].shape[1]

    def dense_table(self) -> np.ndarray:
        """The full potential tensor this decomposition represents."""
        letters = "abcdefghijklmnopqrstuvwxy"
        spec = ",".join(f"{letters[j]}z" for j in range(len(self.weights)))
        return np.einsum(f"{spec}->{letters[:len(self.weights)]}", *self.weights)


def lowrank_message(params: LowRankFactorParams, incoming: Mapping[int, np.ndarray],
                    target_slot: int) -> np.ndarray:
    """Raw (unnormalized) message to ``target_slot``; ``incoming`` is keyed by slot."""
    r = params.rank
    acc = np.ones(r)
    for slot, w in enumerate(params.weights):
        if slot == target_slot:
            continue
        if slot not in incoming:
            raise ValueError(f"missing incoming vector for slot {slot}")
        m = np.asarray(incoming[slot], dtype=float)
        if m.shape != (w.shape[0],):
            raise ValueError(f"slot {slot}: expected vector of length {w.shape[0]}, got {m.shape}")
        acc = acc * (w.T @ m)
    return params.weights[target_slot] @ acc


def _lowrank_handler(graph: FactorGraph, fac: FactorNode, incoming):
    params = fac.payload
    if not isinstance(params, LowRankFactorParams):
        raise TypeError(f"factor {fac.id}: payload is not LowRankFactorParams")
    slots = dict(enumerate(incoming))
    return [lowrank_message(params, slots, s) for s in range(len(fac.neighbors))]


for _kind in LOWRANK_KINDS:
    register_factor_handler(_kind, _lowrank_handler)


# ---------------------------------------------------------------------------
# MLP with hand-written backward pass


ACTIVATIONS = ("relu", "tanh")


@dataclass
class MLPParams:
    """Weights are stored ``(out, in)``; the activation is skipped on the last layer."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise ValueError(f"layer {k}: bias shape {b.shape} vs weight {w.shape}")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"layer {k} input {w.shape[1]} != previous output")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, activation: str = "tanh",
             zero_last: bool = False) -> MLPParams:
    weights, biases = [], []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        s = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-s, s, size=(fan_out, fan_in))
        if zero_last and k == len(sizes) - 2:
            w = np.zeros_like(w)
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MLPParams(weights, biases, activation)


def _act(name, z):
    return np.maximum(z, 0.0) if name == "relu" else np.tanh(z)


def _act_grad(name, z, a):
    return (z > 0).astype(float) if name == "relu" else 1.0 - a * a


def mlp_forward(mlp: MLPParams, x: np.ndarray):
    """Apply the MLP to ``x`` of shape ``(in,)`` or ``(N, in)``; returns ``(y, cache)``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != mlp.sizes[0]:
        raise ValueError(f"input has {x.shape[-1]} features, MLP expects {mlp.sizes[0]}")
    acts, pre = [x], []
    a = x
    last = len(mlp.weights) - 1
    for k, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = a @ w.T + b
        pre.append(z)
        a = z if k == last else _act(mlp.activation, z)
        acts.append(a)
    return a, (acts, pre)


def mlp_backward(mlp: MLPParams, cache, dy: np.ndarray):
    """Returns ``(dweights, dbiases, dx)`` for upstream gradient ``dy``."""
    acts, pre = cache
    dws = [None] * len(mlp.weights)
    dbs = [None] * len(mlp.weights)
    delta = np.asarray(dy, dtype=float)
    last = len(mlp.weights) - 1
    for k in range(last, -1, -1):
        if k != last:
            delta = delta * _act_grad(mlp.activation, pre[k], acts[k + 1])
        a_in = acts[k]
        if a_in.ndim == 1:
            dws[k] = np.outer(delta, a_in)
            dbs[k] = delta.copy()
        else:
            dws[k] = delta.T @ a_in
            dbs[k] = delta.sum(axis=0)
        delta = delta @ mlp.weights[k]
    return dws, dbs, delta


# ---------------------------------------------------------------------------
# neuralized update on a generic factor graph


def _factor_term(params: LowRankFactorParams, fac: FactorNode, states, i: int) -> np.ndarray:
    pos = fac.neighbors.index(i)
    return lowrank_message(params, {s: states[v] for s, v in enumerate(fac.neighbors) if v != i}, pos)


def neuralized_update(states: Mapping[int, np.ndarray], graph: FactorGraph,
                      params: Mapping[int, LowRankFactorParams], mlp: MLPParams, i: int,
                      mode: CombinationMode = CombinationMode.SUM_MLP) -> np.ndarray:
    """One residual update of the hidden state of variable ``i``.

    Low-rank terms from every neighboring factor that has parameters are
    accumulated in ascending factor-id order (sum, or componentwise product
    for ``MULTIPLY``), passed through ``mlp`` and added to the old state.
    """
    h = np.asarray(states[i], dtype=float)
    terms = []
    for a in sorted(graph.var_to_factors[i]):
        if a not in params:
            continue
        term = _factor_term(params[a], graph.factors[a], states, i)
        if term.shape != h.shape:
            raise ValueError(f"factor {a} term has shape {term.shape}, state has {h.shape}")
        terms.append(term)
    if mode is CombinationMode.MULTIPLY and terms:
        agg = np.ones_like(h)
        for term in terms:
            agg = agg * term
    else:
        agg = np.zeros_like(h)
        for term in terms:
            agg = agg + term
    out, _ = mlp_forward(mlp, agg)
    return h + out


# ---------------------------------------------------------------------------
# batched low-rank factors for the learning path


def leave_one_out_product(u: np.ndarray) -> np.ndarray:
    """``out[..., s, :] = prod_{j != s} u[..., j, :]`` along axis -2, without division."""
    L = u.shape[-2]
    ones = np.ones_like(u[..., :1, :])
    before = np.cumprod(np.concatenate([ones, u[..., :-1, :]], axis=-2), axis=-2)
    after = np.flip(np.cumprod(np.flip(np.concatenate([u[..., 1:, :], ones], axis=-2), axis=-2), axis=-2), axis=-2)
    assert before.shape[-2] == L
    return before * after


def leave_one_out_backward(u: np.ndarray, dout: np.ndarray) -> np.ndarray:
    """Gradient of ``leave_one_out_product`` w.r.t. ``u``."""
    L = u.shape[-2]
    # u2[..., s, j, :] = u[..., j, :] with slot s replaced by 1
    u2 = np.broadcast_to(u[..., None, :, :], u.shape[:-2] + (L, L, u.shape[-1])).copy()
    eye = np.eye(L, dtype=bool)
    u2[..., eye, :] = 1.0
    excl2 = leave_one_out_product(u2)  # [..., s, j, :] = prod over l not in {s, j}
    contrib = dout[..., :, None, :] * excl2
    contrib[..., eye, :] = 0.0
    return contrib.sum(axis=-3)


def factor_block_forward(W: np.ndarray, H: np.ndarray, mask: np.ndarray | None = None):
    """Messages of ``F`` low-rank factors with ``L`` slots each.

    ``W``: ``(F, L, d, r)`` slot weights, ``H``: ``(F, L, d)`` neighbor states.
    Returns ``M`` of shape ``(F, L, d)`` where ``M[f, s]`` goes to slot ``s``.
    Slots where the boolean ``mask`` ``(F, L)`` is false are treated as absent:
    they contribute a unit factor and receive a zero message.
    """
    U = (H[..., None, :] @ W)[..., 0, :]
    if mask is not None:
        U = np.where(mask[..., None], U, 1.0)
    Z = leave_one_out_product(U)
    M = (W @ Z[..., None])[..., 0]
    if mask is not None:
        M = M * mask[..., None]
    return M, (W, H, U, Z, mask)


def factor_block_input_grads(cache, dM: np.ndarray):
    """``(dH, dU, dM)`` of a factor block; ``dM`` is returned masked."""
    W, H, U, Z, mask = cache
    if mask is not None:
        dM = dM * mask[..., None]
    dZ = (dM[..., None, :] @ W)[..., 0, :]
    dU = leave_one_out_backward(U, dZ)
    if mask is not None:
        dU = dU * mask[..., None]
    dH = (W @ dU[..., None])[..., 0]
    return dH, dU, dM


def factor_block_backward(cache, dM: np.ndarray):
    """Per-factor weight gradients ``dW`` and input gradients ``dH``."""
    W, H, U, Z, mask = cache
    dH, dU, dM = factor_block_input_grads(cache, dM)
    dW = dM[..., :, None] * Z[..., None, :] + H[..., :, None] * dU[..., None, :]
    return dW, dH


def grouped_weight_grads(terms, groups: np.ndarray, num_groups: int) -> np.ndarray:
    """Weight gradients summed over factors that share weights.

    ``terms`` is a sequence of ``(H, Z, dM, dU)`` tuples (one per use of the
    block, e.g. per iteration) and ``groups[f]`` the weight index of factor
    ``f``.  Returns ``(num_groups, L, d, r)`` without forming per-factor
    outer products.
    """
    H0, Z0 = terms[0][0], terms[0][1]
    L, d, r = H0.shape[1], H0.shape[2], Z0.shape[2]
    out = np.zeros((num_groups, L, d, r))
    if groups.size == 0:
        return out
    # left operand [dM; H] against right operand [Z; dU], stacked over uses
    left = np.concatenate([np.concatenate([dM, H], axis=0) for H, Z, dM, dU in terms], axis=0)
    right = np.concatenate([np.concatenate([Z, dU], axis=0) for H, Z, dM, dU in terms], axis=0)
    g = np.tile(groups, 2 * len(terms))
    order = np.argsort(g, kind="stable")
    bounds = np.searchsorted(g[order], np.arange(num_groups + 1))
    left, right = left[order], right[order]
    for k in range(num_groups):
        lo, hi = bounds[k], bounds[k + 1]
        if hi > lo:
            out[k] = left[lo:hi].transpose(1, 2, 0) @ right[lo:hi].transpose(1, 0, 2)
    return out
