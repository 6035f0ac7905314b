import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgcdr.dataset import InteractionSet
from fedgcdr.graph import GraphError, build_bipartite_graph, ego_graph, expand_graph, write_edge_list
from fedgcdr.transfer import KnowledgeMatrix


def graph_of(pairs, nu, ni):
    return build_bipartite_graph(InteractionSet.from_triples(0, [(u, i, 0) for u, i in pairs], nu, ni))


def test_empty_graph():
    g = graph_of([], 3, 2)
    assert g.n_edges == 0 and all(len(g.items_of(u)) == 0 for u in range(3))


def test_small_transcription():
    g = graph_of([(0, 0), (0, 1), (1, 1)], 2, 2)
    assert g.items_of(0).tolist() == [0, 1]
    assert g.items_of(1).tolist() == [1]
    assert g.users_of(1).tolist() == [0, 1]
    assert g.users_of(0).tolist() == [0]


@settings(max_examples=40, deadline=None)
@given(st.sets(st.tuples(st.integers(0, 19), st.integers(0, 29)), max_size=120))
def test_symmetry_and_roundtrip(pairs):
    g = graph_of(sorted(pairs), 20, 30)
    for u in range(20):
        row = g.items_of(u)
        assert np.all(np.diff(row) > 0)
        for i in row:
            assert u in g.users_of(int(i))
    for i in range(30):
        col = g.users_of(i)
        assert np.all(np.diff(col) > 0)
        for u in col:
            assert i in g.items_of(int(u))
    rebuilt = {(u, int(i)) for u in range(20) for i in ego_graph(g, u)}
    assert rebuilt == set(pairs)


def test_ego_graph_contract():
    g = graph_of([(0, 3), (0, 1), (2, 0)], 3, 4)
    assert ego_graph(g, 1).tolist() == []
    assert ego_graph(g, 0).tolist() == [1, 3]
    with pytest.raises(GraphError, match="out of range"):
        ego_graph(g, 3)


def km(domain, shape=(2, 4), noise=False):
    return KnowledgeMatrix(domain, np.zeros(shape), noise)


def test_expand_two_virtual_users_in_domain_order():
    items = np.array([1, 5])
    e = expand_graph(0, items, [km(3), km(1)], 2, 2, 4)
    assert e.n_virtual == 2 and e.virtual_domains() == [1, 3]
    assert e.items.tolist() == [1, 5]


def test_expand_no_sources_is_identity():
    e = expand_graph(4, np.array([2]), [], 0, 2, 4)
    assert e.n_virtual == 0 and e.items.tolist() == [2]


def test_expand_validation():
    with pytest.raises(GraphError, match="source domain 2"):
        expand_graph(0, np.array([1]), [km(1), km(2, (3, 4)), km(3)], 3, 2, 4)
    with pytest.raises(GraphError, match="expected 3"):
        expand_graph(0, np.array([1]), [km(1)], 3, 2, 4)


def test_expand_does_not_touch_items():
    g = graph_of([(0, 1), (0, 2), (1, 2)], 2, 3)
    before = g.user_items.copy()
    ego = ego_graph(g, 0)
    expand_graph(0, ego, [km(1, noise=True), km(2)], 2, 2, 4)
    assert np.array_equal(g.user_items, before)


def test_edge_list_dump(tmp_path):
    g = graph_of([(0, 1), (1, 0)], 2, 2)
    p = tmp_path / "edges.csv"
    write_edge_list(g, p)
    assert p.read_text().splitlines() == ["user_idx,item_idx", "0,1", "1,0"]
