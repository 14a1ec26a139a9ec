import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relbridge.errors import ConfigurationError, DimensionError, InvalidArgumentError
from relbridge.graph import (
    AddSelfLoops,
    FKLink,
    ForeignKeySpec,
    SparseMatrix,
    SymNormalize,
    add_self_loops,
    build_fk_graph,
    compose_transforms,
    gcn_normalize,
    read_coo,
    sym_normalize,
    to_homogeneous,
    write_coo,
)
from relbridge.table import Column, ColumnKind, Table


def dense_gcn(a):
    """Independent dense oracle for D~^{-1/2} (A + I) D~^{-1/2}."""
    at = a + np.eye(a.shape[0])
    d = at.sum(axis=1)
    s = 1.0 / np.sqrt(d)
    return at * s[:, None] * s[None, :]


def user_item_tables(pairs, users=("u1", "u2"), items=("i1", "i2")):
    u = Table("user", [Column("uid", ColumnKind.IDENTIFIER, list(users))], "uid")
    i = Table("item", [Column("iid", ColumnKind.IDENTIFIER, list(items))], "iid")
    r = Table("buys", [
        Column("uid", ColumnKind.IDENTIFIER, [p[0] for p in pairs]),
        Column("iid", ColumnKind.IDENTIFIER, [p[1] for p in pairs]),
    ])
    spec = ForeignKeySpec("buys", (FKLink("uid", "user", "uid"), FKLink("iid", "item", "iid")))
    return {"user": u, "item": i, "buys": r}, [spec]


def test_sparse_canonical_form():
    s = SparseMatrix(3, 3, [2, 0, 2, 0], [1, 2, 1, 0], [1.0, 2.0, 3.0, 4.0])
    assert s.rows.tolist() == [0, 0, 2] and s.cols.tolist() == [0, 2, 1]
    assert s.values.tolist() == [4.0, 2.0, 4.0]
    m = SparseMatrix(3, 3, [2, 2], [1, 1], [1.0, 3.0], merge="max")
    assert m.values.tolist() == [3.0]
    with pytest.raises(InvalidArgumentError):
        SparseMatrix(2, 2, [2], [0])


def test_coo_round_trip(tmp_path):
    s = SparseMatrix(3, 4, [0, 2, 1], [3, 0, 1], [0.1, 1 / 3, 2.5])
    write_coo(s, tmp_path / "a.coo")
    assert (tmp_path / "a.coo").read_text().splitlines()[0] == "3,4,3"
    assert read_coo(tmp_path / "a.coo") == s
    empty = SparseMatrix(2, 2)
    write_coo(empty, tmp_path / "e.coo")
    assert read_coo(tmp_path / "e.coo") == empty


def test_toy_fk_graph_edges_and_degrees():
    tables, specs = user_item_tables([("u1", "i1"), ("u1", "i2"), ("u2", "i2")])
    g = build_fk_graph(tables, specs)
    assert g.node_types == {"user": 2, "item": 2}
    assert g.num_edges == 3
    assert g.degrees("user").tolist() == [2, 1]
    assert g.degrees("item").tolist() == [1, 2]


def test_toy_homogeneous_adjacency():
    tables, specs = user_item_tables([("u1", "i1"), ("u1", "i2"), ("u2", "i2")])
    adj, offsets = to_homogeneous(build_fk_graph(tables, specs), ["user", "item"])
    assert adj.shape == (4, 4) and adj.nnz == 6
    assert adj.is_symmetric()
    assert offsets == {"user": 0, "item": 2}
    expected = np.zeros((4, 4))
    for u, i in [(0, 2), (0, 3), (1, 3)]:
        expected[u, i] = expected[i, u] = 1.0
    np.testing.assert_array_equal(adj.to_dense(), expected)


def test_dangling_and_duplicate_rows_are_counted():
    tables, specs = user_item_tables([("u1", "i1"), ("u1", "i1"), ("u3", "i2"), (None, "i1"), ("u2", "i2")])
    g = build_fk_graph(tables, specs)
    st = g.stats["buys"]
    assert st == {"rows": 5, "dangling": 2, "duplicates": 1, "edges": 2}
    assert st["edges"] + st["duplicates"] == st["rows"] - st["dangling"]


def test_empty_relation_and_no_edges():
    tables, specs = user_item_tables([])
    g = build_fk_graph(tables, specs)
    assert g.num_edges == 0 and len(g.edge_types[0].src_index) == 0
    adj, _ = to_homogeneous(g, ["item", "user"])
    assert adj.shape == (4, 4) and adj.nnz == 0


def test_bad_fk_spec_is_configuration_error():
    tables, _ = user_item_tables([("u1", "i1")])
    with pytest.raises(ConfigurationError):
        build_fk_graph(tables, [ForeignKeySpec("buys", (FKLink("uid", "user", "uid"), FKLink("iid", "shop", "iid")))])
    with pytest.raises(ConfigurationError):
        build_fk_graph(tables, [ForeignKeySpec("buys", (FKLink("nope", "user", "uid"), FKLink("iid", "item", "iid")))])
    with pytest.raises(ConfigurationError):
        ForeignKeySpec("buys", (FKLink("uid", "user", "uid"),))


def test_self_relation_lands_in_diagonal_block():
    users = Table("user", [Column("uid", ColumnKind.IDENTIFIER, ["a", "b", "c"])], "uid")
    friends = Table("friends", [
        Column("u", ColumnKind.IDENTIFIER, ["a", "b"]),
        Column("v", ColumnKind.IDENTIFIER, ["b", "a"]),
    ])
    items = Table("item", [Column("iid", ColumnKind.IDENTIFIER, ["x"])], "iid")
    spec = ForeignKeySpec("friends", (FKLink("u", "user", "uid"), FKLink("v", "user", "uid")))
    g = build_fk_graph({"user": users, "friends": friends, "item": items}, [spec])
    adj, offsets = to_homogeneous(g, ["item", "user"])
    d = adj.to_dense()
    assert offsets["user"] == 1
    assert d[1, 2] == d[2, 1] == 1.0 and adj.nnz == 2


def test_weights_kept_only_on_request():
    users = Table("user", [Column("uid", ColumnKind.IDENTIFIER, ["a"])], "uid")
    items = Table("item", [Column("iid", ColumnKind.IDENTIFIER, ["x", "y"])], "iid")
    plays = Table("plays", [
        Column("uid", ColumnKind.IDENTIFIER, ["a", "a"]),
        Column("iid", ColumnKind.IDENTIFIER, ["x", "y"]),
        Column("n", ColumnKind.NUMERICAL, [7.0, 2.0]),
    ])
    spec = ForeignKeySpec("plays", (FKLink("uid", "user", "uid"), FKLink("iid", "item", "iid")), "n")
    g = build_fk_graph({"user": users, "item": items, "plays": plays}, [spec])
    binary, _ = to_homogeneous(g, ["user", "item"])
    weighted, _ = to_homogeneous(g, ["user", "item"], use_weights=True)
    assert set(binary.values) == {1.0}
    assert sorted(weighted.values) == [2.0, 2.0, 7.0, 7.0]


def test_gcn_normalize_small_examples():
    np.testing.assert_array_equal(gcn_normalize(SparseMatrix(1, 1)).to_dense(), [[1.0]])
    edge = SparseMatrix.from_dense([[0, 1], [1, 0]])
    np.testing.assert_allclose(gcn_normalize(edge).to_dense(), [[0.5, 0.5], [0.5, 0.5]], rtol=1e-15)
    k3 = SparseMatrix.from_dense(np.ones((3, 3)) - np.eye(3))
    np.testing.assert_allclose(gcn_normalize(k3).to_dense(), np.full((3, 3), 1 / 3), rtol=1e-15)


def test_gcn_normalize_matches_dense_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(1, 12))
        a = np.triu((rng.random((n, n)) < 0.3).astype(float), 1)
        a = a + a.T
        np.testing.assert_allclose(gcn_normalize(SparseMatrix.from_dense(a)).to_dense(), dense_gcn(a), rtol=1e-13)


@st.composite
def edge_lists(draw):
    n = draw(st.integers(1, 9))
    pair = st.tuples(st.integers(0, n - 1), st.integers(0, n - 1))
    edges = draw(st.lists(pair, max_size=3 * n))
    weights = draw(st.lists(st.floats(0.1, 5.0), min_size=len(edges), max_size=len(edges)))
    return n, edges, weights


@settings(max_examples=150, deadline=None)
@given(edge_lists())
def test_normalize_properties_on_arbitrary_edge_lists(case):
    n, edges, weights = case
    rows = [i for i, j in edges if i != j] + [j for i, j in edges if i != j]
    cols = [j for i, j in edges if i != j] + [i for i, j in edges if i != j]
    vals = [w for (i, j), w in zip(edges, weights) if i != j] * 2
    adj = SparseMatrix(n, n, rows, cols, vals)
    a_hat = gcn_normalize(adj).to_dense()
    assert np.array_equal(a_hat, a_hat.T)
    assert np.all(np.abs(np.linalg.eigvalsh(a_hat)) <= 1 + 1e-9)
    root = np.sqrt(adj.to_dense().sum(1) + 1.0)
    np.testing.assert_allclose(a_hat @ root, root, rtol=0, atol=1e-10 * root.max())
    np.testing.assert_allclose(a_hat, dense_gcn(adj.to_dense()), rtol=1e-13, atol=1e-15)


def test_gcn_normalize_errors():
    with pytest.raises(DimensionError):
        gcn_normalize(SparseMatrix(2, 3))
    with pytest.raises(InvalidArgumentError):
        gcn_normalize(SparseMatrix.from_dense([[0, -1], [-1, 0]]))


def test_isolated_node_keeps_degree_one():
    a = SparseMatrix.from_dense([[0, 1, 0], [1, 0, 0], [0, 0, 0]])
    np.testing.assert_allclose(gcn_normalize(a).to_dense()[2], [0, 0, 1.0])
    np.testing.assert_allclose(sym_normalize(a).to_dense()[2], [0, 0, 0])


def test_permutation_maps_a_hat_exactly():
    rng = np.random.default_rng(3)
    for _ in range(10):
        n = int(rng.integers(2, 10))
        a = np.triu((rng.random((n, n)) < 0.4) * rng.integers(1, 4, (n, n)).astype(float), 1)
        adj = SparseMatrix.from_dense(a + a.T)
        perm = rng.permutation(n)
        assert gcn_normalize(adj.permute(perm)) == gcn_normalize(adj).permute(perm)


def test_compose_transforms():
    k3 = SparseMatrix.from_dense(np.ones((3, 3)) - np.eye(3))
    assert compose_transforms([])(k3) == k3
    assert compose_transforms([AddSelfLoops(), SymNormalize()])(k3) == gcn_normalize(k3)
    twice = compose_transforms([SymNormalize(), SymNormalize()])
    np.testing.assert_allclose(twice(k3).to_dense(), sym_normalize(k3).to_dense(), rtol=1e-15)
    # degrees 1, 2, 2, 1: the first pass leaves unequal row sums, so the second pass changes values
    path = SparseMatrix.from_dense([[0, 1, 0, 0], [1, 0, 1, 0], [0, 1, 0, 1], [0, 0, 1, 0]])
    once = sym_normalize(path)
    assert not np.allclose(twice(path).to_dense(), once.to_dense())
    np.testing.assert_allclose(twice(path).to_dense(), dense_sym(dense_sym(path.to_dense())), rtol=1e-14)


def dense_sym(a):
    d = a.sum(axis=1)
    d[d == 0] = 1.0
    s = 1.0 / np.sqrt(d)
    return a * s[:, None] * s[None, :]


def test_add_self_loops_weight():
    out = add_self_loops(SparseMatrix.from_dense([[0, 1], [1, 0]]), 2.0).to_dense()
    np.testing.assert_array_equal(out, [[2, 1], [1, 2]])


def all_graphs(n):
    pairs = list(itertools.combinations(range(n), 2))
    for mask in range(1 << len(pairs)):
        a = np.zeros((n, n))
        for b, (i, j) in enumerate(pairs):
            if mask >> b & 1:
                a[i, j] = a[j, i] = 1.0
        yield a


def test_spectrum_on_all_four_node_graphs():
    for a in all_graphs(4):
        h = gcn_normalize(SparseMatrix.from_dense(a))
        assert h.is_symmetric()
        ev = np.linalg.eigvalsh(h.to_dense())
        assert ev.min() >= -1 - 1e-9 and ev.max() <= 1 + 1e-9
