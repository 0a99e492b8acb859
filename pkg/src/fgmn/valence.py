"""Hard sum-constraint (valence) factor.

The factor over ``t`` bond-multiplicity variables ``x_1..x_t`` (each in
``0..b``) is one when ``sum(x) == v`` and zero otherwise.  Outgoing messages
are computed with a forward/backward convolution DP:

    prefix[k](w)  ∝  sum over x_1..x_k with sum w of prod g_j(x_j)
    suffix[k](w)  ∝  same over x_k..x_t
    out_i(x)      ∝  sum_u prefix[i](u) * suffix[i+1](v - x - u)

Each DP row is renormalized to sum one before the next step, which only
rescales the outputs.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .factorgraph import CapacityError, FactorGraph, FactorKind, FactorNode, register_factor_handler


@dataclass(frozen=True)
class ValenceFactorSpec:
    valence_target: int
    neighbor_domain_size: int
    neighbor_count: int

    def __post_init__(self):
        if self.valence_target < 0:
            raise ValueError("valence_target must be >= 0")
        if self.neighbor_domain_size < 2:
            raise ValueError("neighbor_domain_size must be >= 2")
        if self.neighbor_count < 1:
            raise ValueError("neighbor_count must be >= 1")

    @property
    def max_state(self) -> int:
        return self.neighbor_domain_size - 1


@dataclass
class DPTable:
    """Prefix/suffix rows for one factor.

    ``prefix[k]`` covers the first ``k`` neighbors, ``suffix[k]`` covers
    neighbors ``k..t-1``.  ``*_log_scale[k]`` is the log of the factor removed
    by renormalization, so ``row * exp(log_scale)`` is the exact partial sum.
    """

    prefix: np.ndarray
    suffix: np.ndarray
    prefix_log_scale: np.ndarray
    suffix_log_scale: np.ndarray


def _convolve_step(row: np.ndarray, g: np.ndarray, limit: int) -> np.ndarray:
    out = np.zeros(limit + 1)
    for x, gx in enumerate(g):
        if x > limit:
            break
        out[x:] += gx * row[: limit + 1 - x]
    return out


def dp_tables(messages: Sequence[np.ndarray], v: int, renormalize: bool = True) -> DPTable:
    t = len(messages)
    prefix = np.zeros((t + 1, v + 1))
    suffix = np.zeros((t + 1, v + 1))
    plog = np.zeros(t + 1)
    slog = np.zeros(t + 1)
    prefix[0, 0] = 1.0
    suffix[t, 0] = 1.0
    for k in range(1, t + 1):
        row = _convolve_step(prefix[k - 1], messages[k - 1], v)
        s = row.sum()
        plog[k] = plog[k - 1]
        if renormalize and s > 0:
            row /= s
            plog[k] += np.log(s)
        prefix[k] = row
    for k in range(t - 1, -1, -1):
        row = _convolve_step(suffix[k + 1], messages[k], v)
        s = row.sum()
        slog[k] = slog[k + 1]
        if renormalize and s > 0:
            row /= s
            slog[k] += np.log(s)
        suffix[k] = row
    return DPTable(prefix, suffix, plog, slog)


def dp_partial(messages: Sequence[np.ndarray], v: int) -> float:
    """Total weight of assignments to ``messages`` whose states sum to ``v``.

    Uses the renormalized recurrence and restores the scale at the end, so the
    value is the exact (unnormalized) partial sum.
    """
    if messages is None:
        raise ValueError("messages must be a sequence")
    if v < 0:
        return 0.0
    msgs = [np.asarray(g, dtype=float) for g in messages]
    if not msgs:
        return 1.0 if v == 0 else 0.0
    table = dp_tables(msgs, v)
    return float(table.prefix[-1, v] * np.exp(table.prefix_log_scale[-1]))


def _check(spec: ValenceFactorSpec, incoming) -> np.ndarray:
    g = np.asarray(incoming, dtype=float)
    if g.ndim != 2 or g.shape[0] != spec.neighbor_count:
        raise ValueError(
            f"expected {spec.neighbor_count} incoming messages, got array of shape {g.shape}"
        )
    if g.shape[1] != spec.neighbor_domain_size:
        raise ValueError(
            f"messages have {g.shape[1]} states, spec says {spec.neighbor_domain_size}"
        )
    return g


def valence_messages(spec: ValenceFactorSpec, incoming: Sequence[np.ndarray],
                     renormalize: bool = True, return_flags: bool = False):
    """All outgoing messages of one valence factor in a single DP pass.

    Neighbors whose extrinsic sum cannot reach the target receive the uniform
    distribution.  ``return_flags=True`` also returns a boolean array marking
    neighbors where the constraint is unsatisfiable: either the extrinsic sum
    cannot reach the target, or the neighbor's own evidence has no overlap with
    the outgoing message (zero joint weight).
    """
    g = _check(spec, incoming)
    out, cache = valence_forward(g[None], np.array([spec.valence_target]), renormalize)
    msgs = [row for row in out[0]]
    if return_flags:
        conflict = np.sum(g * out[0], axis=1) <= 0
        return msgs, cache["unsat"][0] | conflict
    return msgs


def brute_force_valence_messages(spec: ValenceFactorSpec, incoming: Sequence[np.ndarray],
                                 cap: int = 10**6) -> list[np.ndarray]:
    """Reference messages by enumerating every joint assignment."""
    g = _check(spec, incoming)
    t, size = g.shape
    if size**t > cap:
        raise CapacityError(f"{size}^{t} assignments exceed cap {cap}")
    configs = np.array(list(itertools.product(range(size), repeat=t)), dtype=int).reshape(-1, t)
    configs = configs[configs.sum(axis=1) == spec.valence_target]
    factors = g[np.arange(t)[None, :], configs]  # (N, t)
    msgs = []
    for i in range(t):
        w = np.prod(np.delete(factors, i, axis=1), axis=1)
        row = np.bincount(configs[:, i], weights=w, minlength=size).astype(float)
        s = row.sum()
        msgs.append(row / s if s > 0 else np.full(size, 1.0 / size))
    return msgs


# ---------------------------------------------------------------------------
# batched forward/backward over many factors of equal arity


def _shifted(row: np.ndarray, D: int) -> np.ndarray:
    """``out[a, x, w] = row[a, w - x]`` (zero for ``w < x``)."""
    padded = np.concatenate([np.zeros(row.shape[:-1] + (D - 1,)), row], axis=-1)
    win = np.lib.stride_tricks.sliding_window_view(padded, row.shape[-1], axis=-1)
    return win[..., ::-1, :]


def _ahead(row: np.ndarray, D: int) -> np.ndarray:
    """``out[a, x, u] = row[a, u + x]`` (zero past the end)."""
    padded = np.concatenate([row, np.zeros(row.shape[:-1] + (D - 1,))], axis=-1)
    return np.lib.stride_tricks.sliding_window_view(padded, row.shape[-1], axis=-1)


def _normalize_rows(q: np.ndarray):
    s = q.sum(axis=-1, keepdims=True)
    safe = np.where(s > 0, s, 1.0)
    return q / safe, s


def _normalize_rows_backward(y: np.ndarray, s: np.ndarray, dy: np.ndarray) -> np.ndarray:
    safe = np.where(s > 0, s, 1.0)
    dq = (dy - np.sum(dy * y, axis=-1, keepdims=True)) / safe
    return np.where(s > 0, dq, 0.0)


def valence_forward(g: np.ndarray, v: np.ndarray, renormalize: bool = True):
    """Outgoing messages for ``A`` valence factors at once.

    ``g`` has shape ``(A, t, D)`` (incoming messages), ``v`` shape ``(A,)``.
    Returns ``(out, cache)`` with ``out`` of shape ``(A, t, D)``.
    """
    g = np.asarray(g, dtype=float)
    v = np.asarray(v, dtype=int)
    A, t, D = g.shape
    V = int(v.max()) if A else 0
    span = np.arange(V + 1)
    keep = (span[None, :] <= v[:, None]).astype(float)  # (A, V+1)

    def step(row, gk):
        return np.einsum("ax,axw->aw", gk, _shifted(row, D)) * keep

    prefix = np.zeros((t + 1, A, V + 1))
    prefix_s = np.ones((t + 1, A, 1))
    prefix[0, :, 0] = 1.0
    for k in range(1, t + 1):
        q = step(prefix[k - 1], g[:, k - 1])
        if renormalize:
            prefix[k], prefix_s[k] = _normalize_rows(q)
        else:
            prefix[k] = q
    suffix = np.zeros((t + 1, A, V + 1))
    suffix_s = np.ones((t + 1, A, 1))
    suffix[t, :, 0] = 1.0
    for k in range(t - 1, -1, -1):
        q = step(suffix[k + 1], g[:, k])
        if renormalize:
            suffix[k], suffix_s[k] = _normalize_rows(q)
        else:
            suffix[k] = q

    # idx[a, x, u] = v_a - x - u, valid where >= 0
    x = np.arange(D)
    idx = v[:, None, None] - x[None, :, None] - span[None, None, :]
    valid = idx >= 0
    idx_c = np.where(valid, idx, 0)
    P = prefix[:t].transpose(1, 0, 2)  # (A, t, V+1): prefix before slot i
    S = suffix[1:].transpose(1, 0, 2)  # (A, t, V+1): suffix after slot i
    S_g = np.take_along_axis(S[:, :, None, :], idx_c[:, None, :, :], axis=3)  # (A,t,D,V+1)
    S_g = S_g * valid[:, None, :, :]
    raw = np.einsum("atu,atxu->atx", P, S_g)
    out, raw_s = _normalize_rows(raw)
    unsat = raw_s[..., 0] <= 0
    out = np.where(unsat[..., None], 1.0 / D, out)
    cache = dict(g=g, v=v, keep=keep, prefix=prefix, prefix_s=prefix_s, suffix=suffix,
                 suffix_s=suffix_s, idx_c=idx_c, valid=valid, S_g=S_g, out=out,
                 raw_s=raw_s, unsat=unsat, renormalize=renormalize)
    return out, cache


def valence_backward(cache: dict, dout: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the incoming messages ``g``."""
    g = cache["g"]
    A, t, D = g.shape
    prefix, suffix = cache["prefix"], cache["suffix"]
    keep = cache["keep"]
    renorm = cache["renormalize"]

    dout = np.where(cache["unsat"][..., None], 0.0, dout)
    draw = _normalize_rows_backward(cache["out"], cache["raw_s"], dout)  # (A,t,D)

    P = prefix[:t].transpose(1, 0, 2)
    dP = np.einsum("atx,atxu->atu", draw, cache["S_g"])
    dS_g = draw[..., None] * P[:, :, None, :] * cache["valid"][:, None, :, :]  # (A,t,D,V+1)
    # u -> v_a - x - u is its own inverse, so the scatter back to S is a gather
    dS = (np.take_along_axis(dS_g, cache["idx_c"][:, None, :, :], axis=3)
          * cache["valid"][:, None, :, :]).sum(axis=2)

    dprefix = np.zeros_like(prefix)
    dprefix[:t] = dP.transpose(1, 0, 2)
    dsuffix = np.zeros_like(suffix)
    dsuffix[1:] = dS.transpose(1, 0, 2)

    dg = np.zeros_like(g)

    def step_backward(row, gk, dq):
        dq = dq * keep
        dgk = np.einsum("aw,axw->ax", dq, _shifted(row, D))
        drow = np.einsum("ax,axu->au", gk, _ahead(dq, D))
        return drow, dgk

    for k in range(t, 0, -1):
        dq = dprefix[k]
        if renorm:
            dq = _normalize_rows_backward(prefix[k], cache["prefix_s"][k], dq)
        drow, dgk = step_backward(prefix[k - 1], g[:, k - 1], dq)
        dprefix[k - 1] += drow
        dg[:, k - 1] += dgk
    for k in range(0, t):
        dq = dsuffix[k]
        if renorm:
            dq = _normalize_rows_backward(suffix[k], cache["suffix_s"][k], dq)
        drow, dgk = step_backward(suffix[k + 1], g[:, k], dq)
        dsuffix[k + 1] += drow
        dg[:, k] += dgk
    return dg


def _type_a_handler(graph: FactorGraph, fac: FactorNode, incoming):
    payload = fac.payload
    target = payload.valence_target if isinstance(payload, ValenceFactorSpec) else int(payload)
    sizes = {graph.domain_size(i) for i in fac.neighbors}
    if len(sizes) != 1:
        raise ValueError(f"valence factor {fac.id} mixes neighbor domain sizes {sorted(sizes)}")
    spec = ValenceFactorSpec(target, sizes.pop(), len(fac.neighbors))
    return valence_messages(spec, np.stack(incoming))


register_factor_handler(FactorKind.TYPE_A, _type_a_handler)
