import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fgmn.builder import (
    EDGE_STATES,
    ConfigurationError,
    SharingLevel,
    SharingPolicy,
    build_graph,
    fit_peak_clusters,
    nearest_center,
    sharing_key_b,
    sharing_key_c,
)
from fgmn.chem import Atom, molecule_from_smiles
from fgmn.factorgraph import FactorKind

PEAKS = [(15, 0.2), (43, 1.0), (74, 0.5), (186, 0.1)]


def two_cluster_oracle(values):
    """Best contiguous split of sorted 1-D data into two groups by total SSE."""
    x = np.sort(np.asarray(values, dtype=float))
    best, centers = np.inf, None
    for cut in range(1, x.size):
        a, b = x[:cut], x[cut:]
        sse = ((a - a.mean()) ** 2).sum() + ((b - b.mean()) ** 2).sum()
        if sse < best:
            best, centers = sse, [a.mean(), b.mean()]
    return centers


# --- sharing keys


def test_policy_validation():
    with pytest.raises(ConfigurationError):
        SharingPolicy(k_clusters=0)
    with pytest.raises(ConfigurationError):
        SharingPolicy(cluster_centers=(5.0, 1.0))
    with pytest.raises(ConfigurationError):
        SharingPolicy(cluster_centers=(1.0, 1.0))
    assert SharingPolicy.uniform("high").level_c is SharingLevel.HIGH


def test_key_b_levels():
    elements = ["C", "C", "C", "C", "C", "C", "O", "O", "H"]
    low = SharingPolicy.uniform("low")
    assert sharing_key_b(low, (0, 1), elements) == sharing_key_b(low, (3, 7), elements)
    med = SharingPolicy.uniform("medium", cluster_centers=(1.0,))
    assert sharing_key_b(med, (0, 6), elements) == sharing_key_b(med, (4, 7), elements)
    assert sharing_key_b(med, (0, 6), elements) != sharing_key_b(med, (0, 1), elements)
    assert sharing_key_b(med, (0, 8), elements) != sharing_key_b(med, (6, 8), elements)
    high = SharingPolicy.uniform("high")
    assert sharing_key_b(high, (0, 1), elements) != sharing_key_b(high, (0, 2), elements)


def test_medium_b_key_cardinality():
    elements = ["C"] * 5 + ["O"] * 3 + ["H"]
    med = SharingPolicy.uniform("medium", cluster_centers=(1.0,))
    keys = {sharing_key_b(med, (i, j), elements) for i in range(9) for j in range(i + 1, 9)}
    assert len(keys) == 5  # C-C, C-O, O-O, C-H, O-H; no H-H pair exists
    assert len(keys) <= 3**2


def test_key_c_levels():
    low = SharingPolicy.uniform("low")
    assert sharing_key_c(low, 15) == sharing_key_c(low, 186)
    med = SharingPolicy.uniform("medium", cluster_centers=(50.0, 150.0))
    assert sharing_key_c(med, 60) == "C:k0"
    assert sharing_key_c(med, 100) == "C:k0"  # equidistant: lower index
    assert sharing_key_c(med, 101) == "C:k1"
    high = SharingPolicy.uniform("high")
    assert sharing_key_c(high, 186) != sharing_key_c(high, 187)
    with pytest.raises(ConfigurationError):
        sharing_key_c(SharingPolicy.uniform("medium"), 60)


@given(st.lists(st.floats(0, 500), min_size=1, max_size=12, unique=True), st.floats(0, 500))
def test_nearest_center_is_linear_scan(centers, mz):
    centers = sorted(centers)
    k = nearest_center(centers, mz)
    dists = [abs(c - mz) for c in centers]
    assert dists[k] == min(dists)
    assert k == dists.index(min(dists))


# --- k-means


def test_kmeans_two_clusters():
    centers = fit_peak_clusters([10, 11, 12, 200, 201, 202], 2)
    assert np.allclose(centers, two_cluster_oracle([10, 11, 12, 200, 201, 202]))
    assert np.allclose(centers, [11, 201])


def test_kmeans_single_center_is_mean(rng):
    x = rng.integers(10, 300, size=40)
    assert fit_peak_clusters(x, 1) == [pytest.approx(x.mean())]


def test_kmeans_k_equals_distinct():
    x = [15, 15, 43, 43, 43, 74, 186]
    assert fit_peak_clusters(x, 4) == [15.0, 43.0, 74.0, 186.0]


def test_kmeans_too_few_values():
    with pytest.raises(ConfigurationError):
        fit_peak_clusters([1, 1, 2], 3)


def test_kmeans_deterministic(rng):
    x = rng.integers(10, 300, size=200)
    assert fit_peak_clusters(x, 6, seed=3) == fit_peak_clusters(x, 6, seed=3)
    centers = fit_peak_clusters(x, 6, seed=3)
    assert centers == sorted(centers)


@given(st.lists(st.integers(0, 300), min_size=2, max_size=30), st.integers(0, 50))
def test_kmeans_two_cluster_well_separated(left, gap):
    left = np.asarray(left)
    right = left + 1000 + gap
    x = np.concatenate([left, right])
    centers = fit_peak_clusters(x, 2)
    assert np.allclose(centers, [left.mean(), right.mean()])


# --- graph construction


def test_methane_graph():
    inst = molecule_from_smiles("C", PEAKS)
    built = build_graph(inst, SharingPolicy.uniform("low"))
    assert len(built.atom_vars) == 2 and len(built.edge_vars) == 1 and len(built.peak_vars) == 4
    fac = built.graph.factors[built.type_a[0]]
    assert fac.payload.valence_target == 4 and len(fac.neighbors) == 1


def test_ester_counts_and_arities():
    inst = molecule_from_smiles("CCCCCCCCCC(=O)OC", PEAKS)
    heavy_only = len([a for a in inst.atoms if a.element != "H"])
    assert heavy_only == 13
    n = inst.n_atoms
    built = build_graph(inst, SharingPolicy.uniform("medium", cluster_centers=(20.0, 100.0)))
    assert len(built.type_a) == n
    assert len(built.type_b) == n * (n - 1) // 2
    assert len(built.type_c) == len(PEAKS)
    g = built.graph
    for a in built.type_a:
        assert len(g.factors[a].neighbors) == n - 1
    for b in built.type_b:
        assert len(g.factors[b].neighbors) == 3
    for c in built.type_c:
        assert len(g.factors[c].neighbors) == n + 1
    for e in built.edge_vars.values():
        assert g.variables[e].domain_size == EDGE_STATES
    # adjacency consistency and bipartiteness
    for a, nbrs in enumerate(g.factor_to_vars):
        for i in nbrs:
            assert a in g.var_to_factors[i]
    assert {f.kind for f in g.factors} == {FactorKind.TYPE_A, FactorKind.TYPE_B, FactorKind.TYPE_C}


def test_unsatisfiable_valence_rejected():
    inst = molecule_from_smiles("C", PEAKS)
    inst.atoms[1] = Atom("H", 1, 5)  # five hydrogens cannot sit on one edge
    with pytest.raises(ConfigurationError):
        build_graph(inst, SharingPolicy.uniform("low"))


def test_type_a_valence_targets():
    inst = molecule_from_smiles("CC(=O)OC", PEAKS)
    built = build_graph(inst, SharingPolicy.uniform("low"))
    targets = [built.graph.factors[a].payload.valence_target for a in built.type_a]
    assert targets == list(inst.valences)


def test_deterministic_construction():
    policy = SharingPolicy.uniform("medium", cluster_centers=(20.0, 100.0))
    a = build_graph(molecule_from_smiles("CCC(=O)OC", PEAKS), policy)
    b = build_graph(molecule_from_smiles("CCC(=O)OC", PEAKS), policy)
    assert a.param_keys == b.param_keys
    assert [f.neighbors for f in a.graph.factors] == [f.neighbors for f in b.graph.factors]


def test_low_sharing_has_one_group_per_type():
    built = build_graph(molecule_from_smiles("CCC(=O)OC", PEAKS), SharingPolicy.uniform("low"))
    assert set(built.param_keys.values()) == {"B", "C"}


def test_requires_peaks():
    with pytest.raises(ConfigurationError):
        build_graph(molecule_from_smiles("CCO"), SharingPolicy.uniform("low"))


def test_without_type_a():
    built = build_graph(molecule_from_smiles("CCO", PEAKS), SharingPolicy.uniform("low"), include_type_a=False)
    assert built.type_a == []
