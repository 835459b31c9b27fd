import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npdag.graph import (
    CycleError,
    Dag,
    LayerDecomposition,
    Ordering,
    dag_from_csv_text,
    dag_to_csv_text,
    is_consistent_layering,
    is_consistent_ordering,
    layer_decomposition,
    orderings_of_layers,
    read_dag,
    shd,
    write_dag,
)

from conftest import dags, random_dag


def brute_layers(dag: Dag):
    """Independent O(d^3) reference: scan the adjacency matrix for columns with
    no remaining incoming edges."""
    A = dag.adjacency().astype(bool)
    alive = np.ones(dag.d, dtype=bool)
    out = []
    while alive.any():
        layer = set()
        for j in range(dag.d):
            if alive[j] and not any(A[i, j] and alive[i] for i in range(dag.d)):
                layer.add(j)
        out.append(layer)
        for j in layer:
            alive[j] = False
    return out


def test_chain_layers(chain3):
    ld = layer_decomposition(chain3)
    assert ld.as_lists() == [[0], [1], [2]]
    assert ld.r == 3


def test_edgeless_single_layer():
    ld = layer_decomposition(Dag(4))
    assert ld.r == 1 and ld.as_lists() == [[0, 1, 2, 3]]


def test_er_layers_match_reference():
    rng = np.random.default_rng(8)
    for _ in range(50):
        dag = random_dag(rng, 8, 0.35)
        assert [set(x) for x in layer_decomposition(dag).layers] == brute_layers(dag)


def test_cycle_and_self_loop_rejected():
    with pytest.raises(CycleError):
        Dag(3, frozenset({(0, 1), (1, 2), (2, 0)}))
    with pytest.raises(CycleError):
        Dag(2, frozenset({(1, 1)}))
    with pytest.raises(ValueError):
        Dag(2, frozenset({(0, 5)}))
    with pytest.raises(ValueError):
        Dag(0)


def test_consistent_ordering_examples(chain3):
    assert is_consistent_ordering(chain3, Ordering((0, 1, 2)))
    assert not is_consistent_ordering(chain3, Ordering((1, 0, 2)))
    vee = Dag(3, frozenset({(0, 2), (1, 2)}))
    assert is_consistent_ordering(vee, Ordering((1, 0, 2)))
    with pytest.raises(ValueError):
        is_consistent_ordering(chain3, Ordering((0, 1)))


def test_orderings_of_layers_examples():
    assert orderings_of_layers(LayerDecomposition(({1}, {0, 2}))).perm == (1, 0, 2)
    assert orderings_of_layers(LayerDecomposition(({0}, {1}, {2}))).perm == (0, 1, 2)
    assert orderings_of_layers(LayerDecomposition(({2, 0}, {1}))).perm == (0, 2, 1)


def test_strict_layering_rejects_within_layer_edges(chain3):
    merged = LayerDecomposition(({0}, {1, 2}))
    assert is_consistent_ordering(chain3, orderings_of_layers(merged))
    assert not is_consistent_layering(chain3, merged)
    assert is_consistent_layering(chain3, layer_decomposition(chain3))


def test_shd_examples(chain3):
    assert shd(chain3, chain3) == 0
    assert shd(Dag(3, frozenset({(0, 1), (2, 1)})), chain3) == 1
    rng = np.random.default_rng(1)
    dag = random_dag(rng, 7, 0.5)
    assert shd(Dag(7), dag) == len(dag.edges)
    with pytest.raises(ValueError):
        shd(Dag(2), chain3)


def test_layer_decomposition_validation():
    with pytest.raises(ValueError):
        LayerDecomposition(())
    with pytest.raises(ValueError):
        LayerDecomposition(({0}, set()))
    with pytest.raises(ValueError):
        LayerDecomposition(({0, 1}, {1}))
    with pytest.raises(ValueError):
        Ordering((0, 0))


@given(dags())
def test_layer_properties(dag):
    ld = layer_decomposition(dag)
    where = ld.layer_of()
    assert ld.nodes == frozenset(range(dag.d))
    for j in range(dag.d):
        if where[j] > 0:
            assert any(where[p] == where[j] - 1 for p in dag.parents(j))
    assert all(where[i] < where[j] for i, j in dag.edges)
    for A in ld.ancestral_sets():
        assert dag.is_ancestral(A)
    assert is_consistent_ordering(dag, orderings_of_layers(ld))
    assert is_consistent_ordering(dag, Ordering(dag.topological_order()))


@given(dags(), st.randoms(use_true_random=False))
def test_relabel_permutes_layers(dag, rnd):
    perm = list(range(dag.d))
    rnd.shuffle(perm)
    moved = layer_decomposition(dag.relabel(perm))
    expect = [frozenset(perm[v] for v in layer) for layer in layer_decomposition(dag).layers]
    assert list(moved.layers) == expect


@settings(max_examples=60)
@given(st.integers(2, 6), st.integers(0, 10**6))
def test_shd_is_metric(d, seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_dag(rng, d, 0.4) for _ in range(3))
    assert shd(a, b) == shd(b, a)
    assert (shd(a, b) == 0) == (a.edges == b.edges)
    assert shd(a, c) <= shd(a, b) + shd(b, c)


@given(dags())
def test_csv_round_trip(dag):
    assert dag_from_csv_text(dag_to_csv_text(dag)) == dag


def test_csv_format_is_one_based(tmp_path, chain3):
    p = tmp_path / "g.csv"
    write_dag(chain3, p)
    assert p.read_text() == "# d=3\nparent,child\n1,2\n2,3\n"
    assert read_dag(p) == chain3
    with pytest.raises(ValueError):
        dag_from_csv_text("src,dst\n1,2\n")


def test_ancestors_and_ancestral():
    dag = Dag(4, frozenset({(0, 1), (1, 2), (3, 2)}))
    assert dag.ancestors(2) == {0, 1, 3}
    assert dag.is_ancestral({0, 1})
    assert not dag.is_ancestral({1})
    assert Dag.from_adjacency(dag.adjacency()) == dag


def test_layering_brute_force_all_small_graphs():
    # every DAG on 3 labelled nodes
    pairs = [(i, j) for i in range(3) for j in range(3) if i != j]
    count = 0
    for mask in itertools.product([0, 1], repeat=len(pairs)):
        edges = frozenset(p for p, m in zip(pairs, mask) if m)
        try:
            dag = Dag(3, edges)
        except CycleError:
            continue
        count += 1
        assert [set(x) for x in layer_decomposition(dag).layers] == brute_layers(dag)
    assert count == 25
