"""Heterogeneous graphs from foreign keys, sparse adjacency and graph transforms."""
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DimensionError, IntegrityError, InvalidArgumentError
from .table import ColumnKind

log = logging.getLogger(__name__)


class SparseMatrix:
    """Coordinate-list matrix kept sorted by (row, col) with duplicates merged."""

    def __init__(self, n_rows, n_cols, rows=(), cols=(), values=None, merge="sum"):
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        values = np.ones(rows.shape[0]) if values is None else np.asarray(values, dtype=np.float64).ravel()
        if not (rows.shape == cols.shape == values.shape):
            raise DimensionError(f"coordinate arrays differ in length: {rows.shape}, {cols.shape}, {values.shape}")
        if rows.size and (rows.min() < 0 or rows.max() >= n_rows or cols.min() < 0 or cols.max() >= n_cols):
            raise InvalidArgumentError(f"coordinate out of range for a {n_rows}x{n_cols} matrix")
        self.n_rows, self.n_cols = int(n_rows), int(n_cols)
        self.rows, self.cols, self.values = _canonical(rows, cols, values, self.n_cols, merge)
        self._csr = None
        self._csr_t = None

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self):
        return self.rows.shape[0]

    @classmethod
    def identity(cls, n):
        idx = np.arange(n)
        return cls(n, n, idx, idx)

    @classmethod
    def from_dense(cls, dense):
        dense = np.asarray(dense, dtype=np.float64)
        r, c = np.nonzero(dense)
        return cls(dense.shape[0], dense.shape[1], r, c, dense[r, c])

    def to_dense(self):
        out = np.zeros(self.shape)
        out[self.rows, self.cols] = self.values
        return out

    def transpose(self):
        return SparseMatrix(self.n_cols, self.n_rows, self.cols, self.rows, self.values)

    def is_symmetric(self):
        if self.n_rows != self.n_cols:
            return False
        t = self.transpose()
        return (
            np.array_equal(self.rows, t.rows)
            and np.array_equal(self.cols, t.cols)
            and np.array_equal(self.values, t.values)
        )

    def permute(self, perm):
        """Relabel node ``i`` as ``perm[i]`` on both axes (square matrices)."""
        perm = np.asarray(perm, dtype=np.int64)
        return SparseMatrix(self.n_rows, self.n_cols, perm[self.rows], perm[self.cols], self.values)

    def csr(self):
        """``(indptr, indices, values)`` of the compressed-row form."""
        if self._csr is None:
            indptr = np.zeros(self.n_rows + 1, dtype=np.int64)
            np.cumsum(np.bincount(self.rows, minlength=self.n_rows), out=indptr[1:])
            self._csr = (indptr, self.cols, self.values)
        return self._csr

    def csr_transpose(self):
        if self._csr_t is None:
            self._csr_t = self.transpose().csr()
        return self._csr_t

    def row_sums(self):
        """Row sums accumulated in ascending value order (independent of column labels)."""
        out = np.zeros(self.n_rows)
        if self.nnz == 0:
            return out
        indptr = self.csr()[0]
        order = np.lexsort((self.values, self.rows))
        pos = np.arange(self.nnz) - indptr[self.rows]
        by_pos = np.argsort(pos, kind="stable")
        max_deg = int(np.diff(indptr).max())
        bounds = np.searchsorted(pos[by_pos], np.arange(max_deg + 1))
        for t in range(max_deg):
            sel = order[by_pos[bounds[t] : bounds[t + 1]]]
            out[self.rows[sel]] += self.values[sel]
        return out

    def __eq__(self, other):
        return (
            isinstance(other, SparseMatrix)
            and self.shape == other.shape
            and np.array_equal(self.rows, other.rows)
            and np.array_equal(self.cols, other.cols)
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self):
        return f"SparseMatrix({self.n_rows}x{self.n_cols}, nnz={self.nnz})"


def _canonical(rows, cols, values, n_cols, merge):
    if rows.size == 0:
        return rows, cols, values
    key = rows * max(n_cols, 1) + cols
    order = np.lexsort((values, key))
    key, rows, cols, values = key[order], rows[order], cols[order], values[order]
    starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
    if starts.size == key.size:
        return rows, cols, values
    if merge == "sum":
        merged = np.add.reduceat(values, starts)
    elif merge == "max":
        merged = np.maximum.reduceat(values, starts)
    else:
        raise InvalidArgumentError(f"unknown merge rule {merge!r}")
    return rows[starts], cols[starts], merged


def write_coo(matrix, path):
    """Text export: header ``n_rows,n_cols,nnz`` then one ``row,col,value`` line per entry."""
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(f"{matrix.n_rows},{matrix.n_cols},{matrix.nnz}\n")
        for r, c, v in zip(matrix.rows, matrix.cols, matrix.values):
            fh.write(f"{r},{c},{float(v)!r}\n")


def read_coo(path):
    with Path(path).open(encoding="utf-8") as fh:
        n_rows, n_cols, nnz = (int(x) for x in fh.readline().split(","))
        body = np.loadtxt(fh, delimiter=",", ndmin=2) if nnz else np.zeros((0, 3))
    if body.shape[0] != nnz:
        raise IntegrityError(f"{path}: header announces {nnz} entries, found {body.shape[0]}")
    return SparseMatrix(n_rows, n_cols, body[:, 0].astype(np.int64), body[:, 1].astype(np.int64), body[:, 2])


# ---------------------------------------------------------------- FK graphs


@dataclass(frozen=True)
class FKLink:
    column: str
    table: str
    key: str


@dataclass
class ForeignKeySpec:
    """A binary relation table whose two columns reference entity tables."""

    relation_table: str
    links: tuple
    weight_column: str = None

    def __post_init__(self):
        self.links = tuple(l if isinstance(l, FKLink) else FKLink(*l) for l in self.links)
        if len(self.links) != 2:
            raise ConfigurationError(
                f"relation {self.relation_table!r}: expected 2 links, got {len(self.links)}"
            )

    def validate(self, tables):
        if self.relation_table not in tables:
            raise ConfigurationError(f"relation table {self.relation_table!r} not found")
        rel = tables[self.relation_table]
        for link in self.links:
            if link.table not in tables:
                raise ConfigurationError(f"relation {self.relation_table!r} references missing table {link.table!r}")
            if not rel.has_column(link.column):
                raise ConfigurationError(f"relation {self.relation_table!r} has no column {link.column!r}")
            target = tables[link.table]
            if not target.has_column(link.key):
                raise ConfigurationError(f"table {link.table!r} has no key column {link.key!r}")
            if target.column(link.key).kind is not ColumnKind.IDENTIFIER:
                raise ConfigurationError(f"{link.table}.{link.key} is not an identifier column")
            if rel.column(link.column).kind not in (ColumnKind.IDENTIFIER, ColumnKind.CATEGORICAL):
                raise ConfigurationError(
                    f"{self.relation_table}.{link.column} cannot reference an identifier"
                )
        if self.weight_column is not None:
            if not rel.has_column(self.weight_column):
                raise ConfigurationError(f"relation {self.relation_table!r} has no column {self.weight_column!r}")
            if rel.column(self.weight_column).kind is not ColumnKind.NUMERICAL:
                raise ConfigurationError(f"weight column {self.weight_column!r} is not numerical")

    def to_dict(self):
        return {
            "relation_table": self.relation_table,
            "links": [[l.column, l.table, l.key] for l in self.links],
            "weight_column": self.weight_column,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["relation_table"], tuple(FKLink(*l) for l in d["links"]), d.get("weight_column"))


@dataclass
class EdgeType:
    src: str
    relation: str
    dst: str
    src_index: np.ndarray
    dst_index: np.ndarray
    weight: np.ndarray = None

    @property
    def key(self):
        return (self.src, self.relation, self.dst)

    def __len__(self):
        return self.src_index.shape[0]


@dataclass
class HeteroGraph:
    node_types: dict
    edge_types: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        for et in self.edge_types:
            if et.src_index.shape != et.dst_index.shape:
                raise IntegrityError(f"edge type {et.key}: endpoint arrays differ in length")
            if et.weight is not None and et.weight.shape != et.src_index.shape:
                raise IntegrityError(f"edge type {et.key}: weight array length differs")
            for idx, ntype in ((et.src_index, et.src), (et.dst_index, et.dst)):
                if ntype not in self.node_types:
                    raise IntegrityError(f"edge type {et.key}: unknown node type {ntype!r}")
                if idx.size and (idx.min() < 0 or idx.max() >= self.node_types[ntype]):
                    raise IntegrityError(f"edge type {et.key}: index out of range for {ntype!r}")

    @property
    def num_edges(self):
        return int(np.sum([len(et) for et in self.edge_types]))

    def edge_type(self, relation):
        for et in self.edge_types:
            if et.relation == relation:
                return et
        raise KeyError(relation)

    def degrees(self, ntype):
        """Number of incident edges per node of ``ntype`` (a self-relation counts both ends)."""
        deg = np.zeros(self.node_types[ntype], dtype=np.int64)
        for et in self.edge_types:
            if et.src == ntype:
                deg += np.bincount(et.src_index, minlength=deg.size)
            if et.dst == ntype:
                deg += np.bincount(et.dst_index, minlength=deg.size)
        return deg


def build_fk_graph(tables, fk_specs):
    """One node type per entity table, one edge per distinct relation row.

    Rows whose foreign keys are missing or absent from the referenced table
    are dropped and counted in ``stats[relation]["dangling"]``; repeated rows
    merge into one edge (weights merged by maximum) and are counted as
    ``duplicates``.
    """
    for spec in fk_specs:
        spec.validate(tables)
    relation_names = {s.relation_table for s in fk_specs}
    node_types = {name: t.row_count for name, t in tables.items() if name not in relation_names}
    for spec in fk_specs:
        for link in spec.links:
            if link.table in relation_names:
                raise ConfigurationError(f"{link.table!r} is used both as a relation and as an entity table")
    key_maps = {}
    edge_types, stats = [], {}
    for spec in fk_specs:
        rel = tables[spec.relation_table]
        idx = []
        ok = np.ones(rel.row_count, dtype=bool)
        for link in spec.links:
            if (link.table, link.key) not in key_maps:
                key_maps[(link.table, link.key)] = {
                    v: i for i, v in enumerate(tables[link.table].column(link.key).values)
                }
            lookup = key_maps[(link.table, link.key)]
            pos = np.array([lookup.get(v, -1) for v in rel.column(link.column).values], dtype=np.int64)
            ok &= pos >= 0
            idx.append(pos)
        src, dst = idx[0][ok], idx[1][ok]
        weight = None
        if spec.weight_column is not None:
            w = np.array([np.nan if v is None else v for v in rel.column(spec.weight_column).values])
            weight = np.nan_to_num(w[ok], nan=1.0)
        n_dst = tables[spec.links[1].table].row_count
        merged = SparseMatrix(
            tables[spec.links[0].table].row_count, max(n_dst, 1), src, dst,
            weight if weight is not None else np.ones(src.shape[0]), merge="max",
        )
        dangling = int(rel.row_count - ok.sum())
        duplicates = int(src.shape[0] - merged.nnz)
        if dangling:
            log.warning("relation %s: dropped %d dangling rows", spec.relation_table, dangling)
        stats[spec.relation_table] = {
            "rows": rel.row_count,
            "dangling": dangling,
            "duplicates": duplicates,
            "edges": merged.nnz,
        }
        edge_types.append(
            EdgeType(
                spec.links[0].table, spec.relation_table, spec.links[1].table,
                merged.rows, merged.cols, merged.values if weight is not None else None,
            )
        )
    return HeteroGraph(node_types, edge_types, stats)


def to_homogeneous(graph, type_order, use_weights=False):
    """Symmetric adjacency over the disjoint union of node sets.

    Returns the matrix and a map node type -> first row of its block.  Each
    hetero edge contributes (u, v) and (v, u); coinciding entries (for example
    a friendship listed in both directions) merge by maximum.
    """
    type_order = list(type_order)
    if sorted(type_order) != sorted(graph.node_types) or len(set(type_order)) != len(type_order):
        raise ConfigurationError(f"type order {type_order} must list each of {sorted(graph.node_types)} once")
    offsets, total = {}, 0
    for t in type_order:
        offsets[t] = total
        total += graph.node_types[t]
    rows, cols, vals = [], [], []
    for et in graph.edge_types:
        u = et.src_index + offsets[et.src]
        v = et.dst_index + offsets[et.dst]
        w = et.weight if (use_weights and et.weight is not None) else np.ones(u.shape[0])
        rows += [u, v]
        cols += [v, u]
        vals += [w, w]
    if rows:
        rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    return SparseMatrix(total, total, rows, cols, vals, merge="max"), offsets


# ---------------------------------------------------------------- transforms


def _check_square_nonneg(adj):
    if adj.n_rows != adj.n_cols:
        raise DimensionError(f"adjacency must be square, got {adj.shape}")
    if adj.nnz and adj.values.min() < 0:
        raise InvalidArgumentError("adjacency has negative weights")


def add_self_loops(adj, weight=1.0):
    """``A + weight * I``."""
    return _with_self_loops(adj, weight)


def _with_self_loops(adj, weight=1.0):
    _check_square_nonneg(adj)
    n = adj.n_rows
    diag = np.arange(n)
    return SparseMatrix(
        n, n,
        np.r_[adj.rows, diag], np.r_[adj.cols, diag], np.r_[adj.values, np.full(n, float(weight))],
    )


def sym_normalize(adj):
    """``D^{-1/2} A D^{-1/2}``; rows with zero degree are treated as degree 1."""
    _check_square_nonneg(adj)
    deg = adj.row_sums()
    deg[deg == 0] = 1.0
    values = adj.values / np.sqrt(deg[adj.rows] * deg[adj.cols])
    return SparseMatrix(adj.n_rows, adj.n_cols, adj.rows, adj.cols, values)


def gcn_normalize(adj, add_self_loops=True):
    """GCN propagation matrix ``D~^{-1/2} (A + I) D~^{-1/2}``."""
    _check_square_nonneg(adj)
    if add_self_loops:
        adj = _with_self_loops(adj)
    return sym_normalize(adj)


class AddSelfLoops:
    def __init__(self, weight=1.0):
        self.weight = weight

    def __call__(self, adj):
        return add_self_loops(adj, self.weight)

    def __repr__(self):
        return f"AddSelfLoops(weight={self.weight})"


class SymNormalize:
    def __call__(self, adj):
        return sym_normalize(adj)

    def __repr__(self):
        return "SymNormalize()"


class Compose:
    """Apply transforms left to right; an empty list is the identity."""

    def __init__(self, transforms=()):
        self.transforms = list(transforms)

    def __call__(self, adj):
        for t in self.transforms:
            adj = t(adj)
        return adj

    def __repr__(self):
        return f"Compose({self.transforms!r})"


def compose_transforms(transforms):
    return Compose(transforms)
