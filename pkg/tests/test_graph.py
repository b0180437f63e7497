from collections import deque

import numpy as np
import pytest

from netdr.graph import (GraphError, NeighborSets, NodeData, load_graph, neighborhood_treatment_sum,
                         second_order_neighbors)

from conftest import random_graph


def bfs_components(n, edges):
    adj = [[] for _ in range(n)]
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    label = [-1] * n
    c = 0
    for s in range(n):
        if label[s] >= 0:
            continue
        label[s] = c
        q = deque([s])
        while q:
            u = q.popleft()
            for v in adj[u]:
                if label[v] < 0:
                    label[v] = c
                    q.append(v)
        c += 1
    return label, adj


def bfs_distance(adj, src):
    dist = {src: 0}
    q = deque([src])
    while q:
        u = q.popleft()
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                q.append(v)
    return dist


def test_two_triangles():
    g = load_graph([(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)], 6)
    assert g.n_components == 2
    assert list(g.component_sizes) == [3, 3]
    assert list(g.degree) == [2] * 6
    assert g.neighbors(4) == [3, 5]


def test_isolate_is_its_own_component():
    g = load_graph([(0, 1)], 3)
    assert g.n_components == 2
    assert g.degree[2] == 0
    assert g.neighbors(2) == []


def test_duplicates_and_reversed_edges_collapse():
    g = load_graph([(0, 1), (1, 0), (0, 1)], 2)
    assert g.edge_set == {(0, 1)}
    assert list(g.degree) == [1, 1]


@pytest.mark.parametrize("edges", [[(0, 0)], [(0, 5)], [(-1, 0)]])
def test_bad_edges_rejected(edges):
    with pytest.raises(GraphError):
        load_graph(edges, 3)


def test_second_order_examples():
    path3 = load_graph([(0, 1), (1, 2)], 3)
    assert second_order_neighbors(path3, 0) == [2]
    tri = load_graph([(0, 1), (1, 2), (0, 2)], 3)
    assert second_order_neighbors(tri, 0) == []
    path5 = load_graph([(0, 1), (1, 2), (2, 3), (3, 4)], 5)
    assert second_order_neighbors(path5, 2) == [0, 4]


def test_neighborhood_treatment_sum():
    g = load_graph([(0, 1), (0, 2), (0, 3)], 4)
    assert neighborhood_treatment_sum(g, [1, 1, 0, 1], 0) == 2
    assert neighborhood_treatment_sum(g, [1, 1, 0, 1], 2) == 1


@pytest.mark.parametrize("seed", range(8))
def test_random_graph_invariants(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 40))
    g = random_graph(rng, n, float(rng.uniform(0.02, 0.3)))
    A = g.adjacency()
    assert (A != A.T).nnz == 0
    assert g.degree.sum() == 2 * len(g.edge_set)
    label, adj = bfs_components(n, g.edges)
    # same partition as an independent BFS
    for a in range(n):
        for b in range(n):
            assert (label[a] == label[b]) == (g.component_of[a] == g.component_of[b])
    for i in range(n):
        dist = bfs_distance(adj, i)
        want = sorted(v for v, d in dist.items() if d == 2)
        got = second_order_neighbors(g, i)
        assert got == want
        assert not set(got) & ({i} | set(g.neighbors(i)))
        order2 = sorted(g.neighbor_sets(2).members(i).tolist())
        assert order2 == sorted(v for v, d in dist.items() if d in (1, 2))


def test_components_ordered_by_smallest_member():
    g = load_graph([(4, 5), (0, 3)], 6)
    assert [int(g.component_of[i]) for i in (0, 1, 2, 4)] == [0, 1, 2, 3]


def test_groups_keep_disconnected_members_together():
    g = load_graph([(0, 1)], 4, groups=[0, 0, 0, 1])
    assert g.n_components == 2
    assert list(g.component_sizes) == [3, 1]
    with pytest.raises(GraphError):
        load_graph([(0, 3)], 4, groups=[0, 0, 0, 1])


def test_neighbor_set_count_with_trailing_empty_sets():
    sets = NeighborSets.from_lists([[1, 2], [0], [], []])
    assert list(sets.count(np.array([1, 1, 1, 0]))) == [2, 1, 0, 0]


def test_subgraph_drops_isolates():
    g = load_graph([(0, 1), (2, 3)], 5)
    sub, old = g.subgraph_nodes(g.degree > 0)
    assert list(old) == [0, 1, 2, 3]
    assert sub.n_components == 2


def test_node_data_validation():
    X = np.zeros((3, 1))
    with pytest.raises(GraphError):
        NodeData(X, [0, 1, 2], [0.0, 0.0, 0.0], ("x",))
    with pytest.raises(GraphError):
        NodeData(X, [0, 1, 1], [0.0, np.nan, 0.0], ("x",))
    with pytest.raises(GraphError):
        NodeData(X, [0, 1], [0.0, 0.0], ("x",))
