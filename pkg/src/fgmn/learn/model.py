"""Molecule factor graph network: forward pass and hand-written gradients.

State update per iteration (all nodes updated synchronously)::

    atom  h <- h + MLP_atom(sum of type-B and type-C low-rank terms)
    peak  h <- h + MLP_peak(type-C term)
    edge  h <- h + MLP_edge(type-B term) + bridge(valence messages)

The valence bridge reads edge states as distributions through the readout
softmax, runs the type-A DP for every atom, multiplies the two messages each
edge receives and maps the normalized product back into state space.

Several molecules are processed together as one disjoint graph.  Valence
factors of smaller molecules are padded with neighbors that are certainly
zero, and type-C factors always span ``max_atoms`` slots with absent atoms
contributing a unit factor, so padding never changes a message.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ..builder import BuiltGraph, SharingLevel, SharingPolicy, build_graph
from ..chem import ELEMENTS, FAKE_H, MAX_BOND, MoleculeInstance, label_matrix
from ..lowrank import (
    MLPParams, factor_block_forward, factor_block_input_grads, grouped_weight_grads, mlp_backward,
    mlp_forward,
)
from ..valence import valence_backward, valence_forward

N_CLASSES = MAX_BOND + 1
PEAK_FEATURES = 3
NODE_KINDS = ("atom", "edge", "peak")
_PAIRS = {("C", "C"): 0, ("C", "O"): 1, ("C", "H"): 2, ("O", "O"): 3, ("O", "H"): 4, ("H", "H"): 5}
_ORDER = {"C": 0, "O": 1, "H": 2}


@dataclass
class ModelConfig:
    hidden: int = 32
    rank: int = 8
    mlp_hidden: int = 32
    iterations: int = 4
    init_rounds: int = 2
    max_atoms: int = 14
    sharing_b: str = "medium"
    sharing_c: str = "medium"
    k_clusters: int = 16
    activation: str = "tanh"
    use_type_a: bool = True
    use_type_bc: bool = True

    def __post_init__(self):
        for name in ("hidden", "rank", "mlp_hidden", "k_clusters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.iterations < 0 or self.init_rounds < 0:
            raise ValueError("iterations and init_rounds must be >= 0")
        if self.max_atoms < 2:
            raise ValueError("max_atoms must be >= 2")
        for name in ("sharing_b", "sharing_c"):
            if getattr(self, name) not in ("low", "medium", "high"):
                raise ValueError(f"{name} must be low, medium or high")
        if self.activation not in ("tanh", "relu"):
            raise ValueError("activation must be tanh or relu")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MoleculeTensors:
    """Index arrays for one molecule, derived from its built factor graph."""

    n: int
    elements: list[str]
    el_idx: np.ndarray
    slot: np.ndarray
    pair_idx: np.ndarray
    keys_b: list[str]
    keys_c: list[str]
    peak_feat: np.ndarray
    valences: np.ndarray
    labels: np.ndarray

    @property
    def m(self) -> int:
        return self.n * (self.n - 1) // 2

    @property
    def k(self) -> int:
        return len(self.keys_c)


def prepare(built: BuiltGraph, max_atoms: int) -> MoleculeTensors:
    inst = built.instance
    n = inst.n_atoms
    if n > max_atoms:
        raise ValueError(f"molecule has {n} atoms, model supports {max_atoms}")
    els = inst.elements
    el_idx = np.array([ELEMENTS.index(e) for e in els])
    slot = np.array([max_atoms - 1 if e == FAKE_H else i for i, e in enumerate(els)])
    iu, ju = np.triu_indices(n, k=1)
    pair_idx = np.array([_PAIRS[tuple(sorted((els[i], els[j]), key=_ORDER.__getitem__))]
                         for i, j in zip(iu, ju)], dtype=int)
    keys_b = [built.param_keys[f] for f in built.type_b]
    keys_c = [built.param_keys[f] for f in built.type_c]
    mass = max(float(sum(a.nominal_mass * (a.valence if a.element == FAKE_H else 1)
                         for a in inst.atoms)), 1.0)
    peaks = np.array(inst.peaks, dtype=float).reshape(-1, 2)
    top = peaks[:, 1].max() if peaks.size and peaks[:, 1].max() > 0 else 1.0
    feat = np.stack([peaks[:, 0] / 100.0, peaks[:, 1] / top, peaks[:, 0] / mass], axis=1)
    return MoleculeTensors(n=n, elements=els, el_idx=el_idx, slot=slot, pair_idx=pair_idx,
                           keys_b=keys_b, keys_c=keys_c, peak_feat=feat,
                           valences=inst.valences, labels=label_matrix(inst))


@dataclass
class GraphBatch:
    """Disjoint union of several molecules with global index arrays."""

    molecules: list[MoleculeTensors]
    max_atoms: int
    el_idx: np.ndarray = None
    slot: np.ndarray = None
    iu: np.ndarray = None
    ju: np.ndarray = None
    pair_idx: np.ndarray = None
    inc: np.ndarray = None        # (NA, tmax) edge ids, padded with NE
    deg: np.ndarray = None
    pos_i: np.ndarray = None
    pos_j: np.ndarray = None
    valences: np.ndarray = None
    keys_b: list[str] = None
    keys_c: list[str] = None
    peak_feat: np.ndarray = None
    c_atoms: np.ndarray = None    # (NP, S) atom ids per slot, padded with NA
    c_mask: np.ndarray = None     # (NP, 1 + S)
    edge_offsets: np.ndarray = None
    _scatter: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        mols, S = self.molecules, self.max_atoms
        na = [mt.n for mt in mols]
        atom_off = np.concatenate([[0], np.cumsum(na)]).astype(int)
        ne = [mt.m for mt in mols]
        edge_off = np.concatenate([[0], np.cumsum(ne)]).astype(int)
        NA, NE = int(atom_off[-1]), int(edge_off[-1])
        tmax = max(na) - 1
        self.el_idx = np.concatenate([mt.el_idx for mt in mols])
        self.slot = np.concatenate([mt.slot for mt in mols])
        self.pair_idx = np.concatenate([mt.pair_idx for mt in mols])
        self.valences = np.concatenate([mt.valences for mt in mols])
        iu, ju, pos_i, pos_j = [], [], [], []
        inc = np.full((NA, tmax), NE, dtype=int)
        deg = np.zeros(NA)
        c_atoms, c_mask = [], []
        for mt, a0, e0 in zip(mols, atom_off, edge_off):
            n = mt.n
            li, lj = np.triu_indices(n, k=1)
            iu.append(li + a0)
            ju.append(lj + a0)
            pos_i.append(lj - 1)
            pos_j.append(li.copy())
            eid = np.zeros((n, n), dtype=int)
            eid[li, lj] = np.arange(li.size) + e0
            eid[lj, li] = eid[li, lj]
            for a in range(n):
                inc[a0 + a, : n - 1] = np.delete(eid[a], a)
            deg[a0:a0 + n] = n - 1
            row = np.full(S, NA, dtype=int)
            row[mt.slot] = np.arange(n) + a0
            mask = np.concatenate([[True], row < NA])
            c_atoms.extend([row] * mt.k)
            c_mask.extend([mask] * mt.k)
        self.iu, self.ju = np.concatenate(iu), np.concatenate(ju)
        self.pos_i, self.pos_j = np.concatenate(pos_i), np.concatenate(pos_j)
        self.inc, self.deg = inc, deg
        self.keys_b = [key for mt in mols for key in mt.keys_b]
        self.keys_c = [key for mt in mols for key in mt.keys_c]
        self.peak_feat = np.concatenate([mt.peak_feat for mt in mols]).reshape(-1, PEAK_FEATURES)
        self.c_atoms = np.array(c_atoms, dtype=int).reshape(-1, S)
        self.c_mask = np.array(c_mask, dtype=bool).reshape(-1, 1 + S)
        self.edge_offsets = edge_off

    def scatter(self, name: str) -> np.ndarray:
        """Cached one-hot matrix ``(targets, sources)`` for summing rows into atoms."""
        if name not in self._scatter:
            NA = self.num_atoms
            idx = {"iu": self.iu, "ju": self.ju, "c": self.c_atoms.ravel()}[name]
            mat = np.zeros((NA + 1, idx.size))
            mat[idx, np.arange(idx.size)] = 1.0
            self._scatter[name] = mat[:NA]
        return self._scatter[name]

    @property
    def num_atoms(self) -> int:
        return self.el_idx.size

    @property
    def num_edges(self) -> int:
        return self.iu.size

    @property
    def num_peaks(self) -> int:
        return len(self.keys_c)

    def molecule_slice(self, k: int) -> slice:
        return slice(self.edge_offsets[k], self.edge_offsets[k + 1])


def _seed_for(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


@dataclass
class ModelParams:
    config: ModelConfig
    seed: int = 0
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    cluster_centers: tuple[float, ...] = ()

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0,
                   cluster_centers: Sequence[float] = ()) -> "ModelParams":
        p = cls(config, seed, {}, tuple(cluster_centers))
        d, S, hid = config.hidden, config.max_atoms, config.mlp_hidden
        shapes = {
            "atom_elem": (len(ELEMENTS), d), "atom_pos": (S, d),
            "edge_pair": (len(_PAIRS), d), "edge_pos_lo": (S, d), "edge_pos_hi": (S, d),
            "peak_w": (d, PEAK_FEATURES), "peak_b": (d,),
            "init_ea": (d, d), "init_ae": (d, d),
            "bridge": (N_CLASSES, d), "readout_w": (N_CLASSES, d), "readout_b": (N_CLASSES,),
        }
        for kind in NODE_KINDS:
            shapes[f"mlp.{kind}.w0"] = (hid, d)
            shapes[f"mlp.{kind}.b0"] = (hid,)
            shapes[f"mlp.{kind}.w1"] = (d, hid)
            shapes[f"mlp.{kind}.b1"] = (d,)
        embeddings = ("atom_elem", "atom_pos", "edge_pair", "edge_pos_lo", "edge_pos_hi")
        for name, shape in shapes.items():
            rng = _seed_for(seed, name)
            if len(shape) == 1:
                p.arrays[name] = np.zeros(shape)
            elif name in embeddings:
                p.arrays[name] = rng.uniform(-0.5, 0.5, size=shape)
            else:
                s = 1.0 / np.sqrt(shape[-1])
                p.arrays[name] = rng.uniform(-s, s, size=shape)
        return p

    def policy(self) -> SharingPolicy:
        return SharingPolicy(SharingLevel(self.config.sharing_b), SharingLevel(self.config.sharing_c),
                             self.config.k_clusters, tuple(self.cluster_centers))

    def lowrank(self, key: str) -> np.ndarray:
        """Slot weights for a sharing key, created deterministically on first use."""
        name = "lr:" + key
        if name not in self.arrays:
            c = self.config
            slots = 3 if key.startswith("B") else 1 + c.max_atoms
            s = 1.0 / np.sqrt(c.hidden)
            self.arrays[name] = _seed_for(self.seed, name).uniform(-s, s, size=(slots, c.hidden, c.rank))
        return self.arrays[name]

    def mlp(self, kind: str) -> MLPParams:
        a = self.arrays
        return MLPParams([a[f"mlp.{kind}.w0"], a[f"mlp.{kind}.w1"]],
                         [a[f"mlp.{kind}.b0"], a[f"mlp.{kind}.b1"]], self.config.activation)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.seed, {k: v.copy() for k, v in self.arrays.items()},
                           tuple(self.cluster_centers))

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))


def tensors_for(instance: MoleculeInstance, params: ModelParams) -> MoleculeTensors:
    built = build_graph(instance, params.policy(), include_type_a=params.config.use_type_a)
    return prepare(built, params.config.max_atoms)


def make_batch(items: Sequence[MoleculeTensors | MoleculeInstance], params: ModelParams) -> GraphBatch:
    mts = [it if isinstance(it, MoleculeTensors) else tensors_for(it, params) for it in items]
    return GraphBatch(mts, params.config.max_atoms)


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _acc(grads: dict, name: str, value: np.ndarray):
    if name in grads:
        grads[name] += value
    else:
        grads[name] = np.array(value, dtype=float, copy=True)


def _pad_row(x: np.ndarray) -> np.ndarray:
    return np.concatenate([x, np.zeros((1,) + x.shape[1:])])


def init_states(gb: GraphBatch, params: ModelParams, cache: dict | None = None):
    """Initial hidden states: embeddings, then atom/edge message passing rounds.

    Peaks take no part in the rounds, so their states depend only on their
    own (m/z, intensity) features.
    """
    a = params.arrays
    Ha = a["atom_elem"][gb.el_idx] + a["atom_pos"][gb.slot]
    He = a["edge_pair"][gb.pair_idx] + a["edge_pos_lo"][gb.slot[gb.iu]] + a["edge_pos_hi"][gb.slot[gb.ju]]
    Hp = gb.peak_feat @ a["peak_w"].T + a["peak_b"]
    rounds = []
    for _ in range(params.config.init_rounds):
        agg_a = (gb.scatter("iu") @ He + gb.scatter("ju") @ He) / gb.deg[:, None]
        ta = np.tanh(agg_a @ a["init_ea"])
        Ha = Ha + ta
        agg_e = Ha[gb.iu] + Ha[gb.ju]
        te = np.tanh(agg_e @ a["init_ae"])
        He = He + te
        rounds.append((agg_a, ta, agg_e, te))
    if cache is not None:
        cache["init_rounds"] = rounds
    return Ha, He, Hp


def _init_backward(gb: GraphBatch, params: ModelParams, cache: dict, dHa, dHe, dHp, grads):
    a = params.arrays
    for agg_a, ta, agg_e, te in reversed(cache["init_rounds"]):
        dz = dHe * (1.0 - te * te)
        _acc(grads, "init_ae", agg_e.T @ dz)
        dagg_e = dz @ a["init_ae"].T
        dHa = dHa + gb.scatter("iu") @ dagg_e + gb.scatter("ju") @ dagg_e
        dz = dHa * (1.0 - ta * ta)
        _acc(grads, "init_ea", agg_a.T @ dz)
        dagg_a = dz @ a["init_ea"].T / gb.deg[:, None]
        dHe = dHe + dagg_a[gb.iu] + dagg_a[gb.ju]
    _acc(grads, "peak_w", dHp.T @ gb.peak_feat)
    _acc(grads, "peak_b", dHp.sum(axis=0))
    for name, idx, dh in (("atom_elem", gb.el_idx, dHa), ("atom_pos", gb.slot, dHa),
                          ("edge_pair", gb.pair_idx, dHe), ("edge_pos_lo", gb.slot[gb.iu], dHe),
                          ("edge_pos_hi", gb.slot[gb.ju], dHe)):
        _acc(grads, name, np.eye(a[name].shape[0])[idx].T @ dh)


def _group(keys: list[str]):
    uniq = sorted(set(keys))
    index = {k: i for i, k in enumerate(uniq)}
    return uniq, np.array([index[k] for k in keys], dtype=int)


_ZERO_BOND = np.eye(N_CLASSES)[0]


def valence_bridge(gb: GraphBatch, q: np.ndarray):
    """Normalized product of the two type-A messages reaching every edge."""
    padded = np.concatenate([q, _ZERO_BOND[None]])
    out, vcache = valence_forward(padded[gb.inc], gb.valences)
    mu_i = out[gb.iu, gb.pos_i]
    mu_j = out[gb.ju, gb.pos_j]
    prod = mu_i * mu_j
    tot = prod.sum(axis=1, keepdims=True)
    zero = tot <= 0
    s = np.where(zero, 1.0 / N_CLASSES, prod / np.where(zero, 1.0, tot))
    return s, (vcache, mu_i, mu_j, tot, zero, s)


def _bridge_backward(gb: GraphBatch, bcache, ds):
    vcache, mu_i, mu_j, tot, zero, s = bcache
    dprod = np.where(zero, 0.0, (ds - np.sum(ds * s, axis=1, keepdims=True)) / np.where(zero, 1.0, tot))
    # every (atom, position) cell belongs to exactly one edge endpoint
    dout = np.zeros(vcache["out"].shape)
    dout[gb.iu, gb.pos_i] = dprod * mu_j
    dout[gb.ju, gb.pos_j] = dprod * mu_i
    dG = valence_backward(vcache, dout)
    return dG[gb.iu, gb.pos_i] + dG[gb.ju, gb.pos_j]


def forward(gb: GraphBatch, params: ModelParams, keep_cache: bool = True,
            use_type_a: bool | None = None, use_type_bc: bool | None = None):
    """Edge-class logits ``(num_edges, 5)`` and a cache for :func:`backward`."""
    cfg = params.config
    use_a = cfg.use_type_a if use_type_a is None else use_type_a
    use_bc = cfg.use_type_bc if use_type_bc is None else use_type_bc
    a = params.arrays
    cache: dict = {"use_a": use_a, "use_bc": use_bc}
    Ha, He, Hp = init_states(gb, params, cache)
    NA, NE, NP, d, S = gb.num_atoms, gb.num_edges, gb.num_peaks, cfg.hidden, cfg.max_atoms

    if use_bc:
        keys_b, grp_b = _group(gb.keys_b)
        keys_c, grp_c = _group(gb.keys_c)
        WB = np.stack([params.lowrank(key) for key in keys_b])[grp_b]
        if NP:
            WC = np.stack([params.lowrank(key) for key in keys_c])[grp_c]
        else:
            WC = np.zeros((0, 1 + S, d, cfg.rank))
        cache.update(keys_b=keys_b, grp_b=grp_b, keys_c=keys_c, grp_c=grp_c)
    mlps = {kind: params.mlp(kind) for kind in NODE_KINDS}
    iters = []
    for _ in range(cfg.iterations):
        it: dict = {"Ha": Ha, "He": He, "Hp": Hp}
        if use_bc:
            MB, it["cB"] = factor_block_forward(WB, np.stack([He, Ha[gb.iu], Ha[gb.ju]], axis=1))
            HC = np.concatenate([Hp[:, None, :], _pad_row(Ha)[gb.c_atoms]], axis=1)
            MC, it["cC"] = factor_block_forward(WC, HC, gb.c_mask)
            agg_atom = (gb.scatter("iu") @ MB[:, 1] + gb.scatter("ju") @ MB[:, 2]
                        + gb.scatter("c") @ MC[:, 1:].reshape(-1, d))
            agg_edge = MB[:, 0]
            agg_peak = MC[:, 0]
        else:
            agg_atom, agg_edge, agg_peak = np.zeros((NA, d)), np.zeros((NE, d)), np.zeros((NP, d))
        ya, it["mlp_atom"] = mlp_forward(mlps["atom"], agg_atom)
        ye, it["mlp_edge"] = mlp_forward(mlps["edge"], agg_edge)
        yp, it["mlp_peak"] = mlp_forward(mlps["peak"], agg_peak)
        He_new = He + ye
        if use_a:
            q = _softmax(He @ a["readout_w"].T + a["readout_b"])
            s, it["bridge"] = valence_bridge(gb, q)
            it["q"], it["s"] = q, s
            He_new = He_new + s @ a["bridge"]
        Ha, He, Hp = Ha + ya, He_new, Hp + yp
        iters.append(it)
    logits = He @ a["readout_w"].T + a["readout_b"]
    cache.update(iters=iters, He_final=He, mlps=mlps)
    if not keep_cache:
        cache = {}
    return logits, cache


def backward(gb: GraphBatch, params: ModelParams, cache: dict, dlogits: np.ndarray) -> dict:
    """Gradients of a scalar loss (given ``dlogits``) for every parameter used."""
    cfg = params.config
    a = params.arrays
    NA, NP, d, S = gb.num_atoms, gb.num_peaks, cfg.hidden, cfg.max_atoms
    grads: dict[str, np.ndarray] = {}
    use_a, use_bc = cache["use_a"], cache["use_bc"]
    mlps = cache["mlps"]

    _acc(grads, "readout_w", dlogits.T @ cache["He_final"])
    _acc(grads, "readout_b", dlogits.sum(axis=0))
    dHe = dlogits @ a["readout_w"]
    dHa = np.zeros((NA, d))
    dHp = np.zeros((NP, d))
    terms_b, terms_c = [], []

    for it in reversed(cache["iters"]):
        dHa_new, dHe_new, dHp_new = dHa, dHe, dHp
        dHa, dHe, dHp = dHa_new.copy(), dHe_new.copy(), dHp_new.copy()
        if use_a:
            q, s = it["q"], it["s"]
            _acc(grads, "bridge", s.T @ dHe_new)
            dq = _bridge_backward(gb, it["bridge"], dHe_new @ a["bridge"].T)
            dz = q * (dq - np.sum(dq * q, axis=1, keepdims=True))
            _acc(grads, "readout_w", dz.T @ it["He"])
            _acc(grads, "readout_b", dz.sum(axis=0))
            dHe += dz @ a["readout_w"]
        dagg = {}
        for kind, dy in (("atom", dHa_new), ("edge", dHe_new), ("peak", dHp_new)):
            dws, dbs, dx = mlp_backward(mlps[kind], it[f"mlp_{kind}"], dy)
            for k, (dw, db) in enumerate(zip(dws, dbs)):
                _acc(grads, f"mlp.{kind}.w{k}", dw)
                _acc(grads, f"mlp.{kind}.b{k}", db)
            dagg[kind] = dx
        if use_bc:
            d_atom = _pad_row(dagg["atom"])
            dMB = np.stack([dagg["edge"], d_atom[gb.iu], d_atom[gb.ju]], axis=1)
            dMC = np.concatenate([dagg["peak"][:, None, :], d_atom[gb.c_atoms]], axis=1)
            gH, dU, dMB = factor_block_input_grads(it["cB"], dMB)
            terms_b.append((it["cB"][1], it["cB"][3], dMB, dU))
            dHe += gH[:, 0]
            dHa += gb.scatter("iu") @ gH[:, 1] + gb.scatter("ju") @ gH[:, 2]
            gH, dU, dMC = factor_block_input_grads(it["cC"], dMC)
            terms_c.append((it["cC"][1], it["cC"][3], dMC, dU))
            dHp += gH[:, 0]
            dHa += gb.scatter("c") @ gH[:, 1:].reshape(-1, d)

    if use_bc:
        for keys, grp, terms in ((cache["keys_b"], cache["grp_b"], terms_b),
                                 (cache["keys_c"], cache["grp_c"], terms_c)):
            summed = grouped_weight_grads(terms, grp, len(keys))
            for key, g in zip(keys, summed):
                _acc(grads, "lr:" + key, g)

    _init_backward(gb, params, cache, dHa, dHe, dHp, grads)
    return grads
