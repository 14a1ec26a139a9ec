"""Relational datasets: SJTUTables loaders, fixed splits and a planted-signal generator.

A dataset directory holds one CSV per table, a ``schema.json`` and optionally
a ``split.json`` (``{"seed": s, "train": [...], "val": [...], "test": [...]}``)
with row positions into the target table.
"""
import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, IntegrityError, InvalidArgumentError, SchemaDriftError
from .graph import FKLink, ForeignKeySpec
from .table import Column, ColumnKind, Table, load_table, write_table

log = logging.getLogger(__name__)


def natural_key(value):
    """Sort numbers numerically and everything else as text, numbers first."""
    try:
        return (0, float(value), "")
    except (TypeError, ValueError):
        return (1, 0.0, str(value))


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int = None

    def __post_init__(self):
        self.train = np.asarray(self.train, dtype=np.int64)
        self.val = np.asarray(self.val, dtype=np.int64)
        self.test = np.asarray(self.test, dtype=np.int64)

    def part(self, name):
        if name not in ("train", "val", "test"):
            raise InvalidArgumentError(f"unknown split part {name!r}")
        return getattr(self, name)

    def validate(self, labels):
        """Check disjointness, index range and that every carried label is present."""
        n = len(labels)
        parts = [self.train, self.val, self.test]
        allidx = np.concatenate(parts)
        if allidx.size and (allidx.min() < 0 or allidx.max() >= n):
            raise IntegrityError(f"split index out of range for {n} rows")
        if np.unique(allidx).size != allidx.size:
            raise IntegrityError("split parts overlap")
        if any(labels[i] is None or labels[i] == -1 for i in allidx):
            raise IntegrityError("split contains rows without a label")

    def to_dict(self):
        return {"seed": self.seed, "train": self.train.tolist(), "val": self.val.tolist(), "test": self.test.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["train"], d["val"], d["test"], d.get("seed"))


def fixed_split(labels, keys=None, per_class=20, n_val=500, n_test=1000, seed=0):
    """Balanced train set of ``per_class`` rows per class, then val and test.

    Rows are first ordered by ``keys`` (primary-key values; row positions by
    default), so the split depends only on the (key, label) pairs and the
    seed, not on the order of rows in the file.  Unlabeled rows (``None``) are
    never selected.
    """
    labels = list(labels)
    n = len(labels)
    keys = list(range(n)) if keys is None else list(keys)
    if len(keys) != n:
        raise InvalidArgumentError("keys and labels differ in length")
    eligible = sorted((i for i in range(n) if labels[i] is not None), key=lambda i: natural_key(keys[i]))
    classes = sorted({labels[i] for i in eligible}, key=natural_key)
    counts = {c: 0 for c in classes}
    for i in eligible:
        counts[labels[i]] += 1
    for c in classes:
        if counts[c] < per_class:
            raise InvalidArgumentError(
                f"class {c!r} has {counts[c]} labeled rows, fewer than the {per_class} required"
            )
    rng = np.random.default_rng(seed)
    shuffled = [eligible[p] for p in rng.permutation(len(eligible))]
    taken = {c: 0 for c in classes}
    train, rest = [], []
    for i in shuffled:
        if taken[labels[i]] < per_class:
            taken[labels[i]] += 1
            train.append(i)
        else:
            rest.append(i)
    if len(rest) < n_val + n_test:
        raise InvalidArgumentError(
            f"{len(rest)} rows remain after the train set, need {n_val} + {n_test}"
        )
    val, test = rest[:n_val], rest[n_val : n_val + n_test]
    return Split(sorted(train), sorted(val), sorted(test), seed)


@dataclass
class RelationalDataset:
    name: str
    tables: dict
    fk_specs: list
    target_table: str
    target_column: str
    classes: list = None
    split: Split = None
    exclude: list = field(default_factory=list)
    prefix_chars: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.target_table not in self.tables:
            raise ConfigurationError(f"target table {self.target_table!r} not found")
        target = self.tables[self.target_table].column(self.target_column)
        present = {v for v in target.values if v is not None}
        if self.classes is None:
            self.classes = sorted(present, key=natural_key)
        extra = present - set(self.classes)
        if extra:
            raise IntegrityError(f"target values {sorted(extra)[:5]} are not among the classes")
        for spec in self.fk_specs:
            spec.validate(self.tables)
        if self.split is not None:
            self.split.validate(self.labels().tolist())

    @property
    def target(self):
        return self.tables[self.target_table]

    @property
    def n_classes(self):
        return len(self.classes)

    def labels(self):
        """Class index per target row; -1 where the label is missing."""
        lookup = {c: i for i, c in enumerate(self.classes)}
        values = self.target.column(self.target_column).values
        return np.array([-1 if v is None else lookup[v] for v in values], dtype=np.int64)

    def feature_exclusions(self, table_name):
        excl = [c for c in self.exclude if self.tables[table_name].has_column(c)]
        if table_name == self.target_table:
            excl.append(self.target_column)
        return excl

    def make_split(self, seed=0, per_class=20, n_val=500, n_test=1000):
        target = self.target
        keys = target.column(target.primary_key).values if target.primary_key else None
        values = target.column(self.target_column).values
        return fixed_split(values, keys, per_class, n_val, n_test, seed)

    def schema(self):
        return {
            "name": self.name,
            "tables": [dict(t.schema(), file=f"{name}.csv") for name, t in self.tables.items()],
            "relations": [s.to_dict() for s in self.fk_specs],
            "target": {"table": self.target_table, "column": self.target_column},
            "classes": list(self.classes),
            "exclude": list(self.exclude),
            "prefix_chars": dict(self.prefix_chars),
        }


def save_dataset(dataset, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, table in dataset.tables.items():
        write_table(table, directory / f"{name}.csv")
    (directory / "schema.json").write_text(json.dumps(dataset.schema(), indent=2), encoding="utf-8")
    if dataset.split is not None:
        write_split(dataset.split, directory / "split.json")


def write_split(split, path):
    Path(path).write_text(json.dumps(split.to_dict()), encoding="utf-8")


def read_split(path):
    return Split.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def load_dataset_dir(directory):
    """Load any dataset directory described by its ``schema.json``."""
    directory = Path(directory)
    schema_path = directory / "schema.json"
    if not schema_path.exists():
        raise ConfigurationError(f"{directory}: no schema.json")
    schema = json.loads(schema_path.read_text(encoding="utf-8"))
    tables = {}
    for ts in schema["tables"]:
        path = directory / ts.get("file", f"{ts['table']}.csv")
        if not path.exists():
            raise ConfigurationError(f"{directory}: missing table file {path.name}")
        tables[ts["table"]] = load_table(path, ts)
    split_path = directory / "split.json"
    return RelationalDataset(
        name=schema.get("name", directory.name),
        tables=tables,
        fk_specs=[ForeignKeySpec.from_dict(r) for r in schema.get("relations", [])],
        target_table=schema["target"]["table"],
        target_column=schema["target"]["column"],
        classes=schema.get("classes"),
        split=read_split(split_path) if split_path.exists() else None,
        exclude=schema.get("exclude", []),
        prefix_chars=schema.get("prefix_chars", {}),
    )


# ---------------------------------------------------------------- SJTUTables


@dataclass(frozen=True)
class TableLayout:
    file: str
    primary_key: str
    columns: tuple
    rows: int
    allowed_widths: tuple = ()

    @property
    def widths(self):
        return self.allowed_widths or (len(self.columns),)


_ID, _CAT, _NUM, _TEXT, _TS = (k.value for k in ColumnKind)

SJTU = {
    "TML1M": {
        "tables": {
            "users": TableLayout("users.csv", "UserID", (
                ("UserID", _ID), ("Gender", _CAT), ("Age", _CAT), ("Occupation", _CAT), ("Zip-code", _CAT)), 6040),
            "movies": TableLayout("movies.csv", "MovieID", (
                ("MovieID", _ID), ("Title", _TEXT), ("Year", _NUM), ("Genre", _CAT), ("Director", _CAT), ("Cast", _TEXT),
                ("Runtime", _CAT), ("Languages", _CAT), ("Certificate", _CAT), ("Plot", _TEXT), ("Url", _TEXT)), 3883),
            "ratings": TableLayout("ratings.csv", None, (
                ("UserID", _ID), ("MovieID", _ID), ("Rating", _NUM), ("Timestamp", _TS)), 1000209),
        },
        "relations": [ForeignKeySpec("ratings", (FKLink("UserID", "users", "UserID"), FKLink("MovieID", "movies", "MovieID")))],
        "target": ("users", "Age"),
        "n_classes": 7,
        "exclude": [],
        "prefix_chars": {"Zip-code": 2},
    },
    "TLF2K": {
        "tables": {
            "artists": TableLayout("artists.csv", "artistID", (
                ("artistID", _ID), ("type", _CAT), ("name", _TEXT), ("born", _TEXT), ("yearsActive", _TEXT), ("location", _CAT),
                ("genre", _CAT), ("tag_list", _TEXT), ("biography", _TEXT), ("url", _TEXT)), 9047),
            "user_artists": TableLayout("user_artists.csv", None, (
                ("userID", _ID), ("artistID", _ID), ("weight", _NUM)), 80009),
            "user_friends": TableLayout("user_friends.csv", None, (
                ("userID", _ID), ("friendID", _ID)), 12717, allowed_widths=(2, 3)),
        },
        "relations": [
            ForeignKeySpec("user_artists", (FKLink("userID", "users", "userID"), FKLink("artistID", "artists", "artistID")), "weight"),
            ForeignKeySpec("user_friends", (FKLink("userID", "users", "userID"), FKLink("friendID", "users", "userID"))),
        ],
        "target": ("artists", "genre"),
        "n_classes": 11,
        # tags were the labeling input for genres; using them would leak the label
        "exclude": ["tag_list"],
        "prefix_chars": {},
        "implicit_entities": {"users": ("userID", [("user_artists", "userID"), ("user_friends", "userID"), ("user_friends", "friendID")])},
    },
    "TACM12K": {
        "tables": {
            "papers": TableLayout("papers.csv", "paper_id", (
                ("paper_id", _ID), ("year", _NUM), ("conference", _CAT), ("title", _TEXT), ("abstract", _TEXT)), 12499),
            "authors": TableLayout("authors.csv", "author_id", (("author_id", _ID), ("name", _TEXT), ("firm", _CAT)), 17431),
            "citations": TableLayout("citations.csv", None, (("paper_id", _ID), ("paper_id_cited", _ID)), 30789),
            "writings": TableLayout("writings.csv", None, (("paper_id", _ID), ("author_id", _ID)), 37055),
        },
        "relations": [
            ForeignKeySpec("citations", (FKLink("paper_id", "papers", "paper_id"), FKLink("paper_id_cited", "papers", "paper_id"))),
            ForeignKeySpec("writings", (FKLink("paper_id", "papers", "paper_id"), FKLink("author_id", "authors", "author_id"))),
        ],
        "target": ("papers", "conference"),
        "n_classes": 14,
        "exclude": [],
        "prefix_chars": {},
    },
}


def sjtu_files_present(name, directory):
    if name not in SJTU or directory is None:
        return False
    directory = Path(directory)
    return all((directory / layout.file).exists() for layout in SJTU[name]["tables"].values())


def _read_header(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return next(csv.reader(fh), [])


def load_sjtu(name, directory, check_counts=True):
    """Load TML1M, TLF2K or TACM12K and assert the published table shapes.

    Does not write to ``directory``.  Without ``split.json`` a split is drawn
    in memory with seed 0 (``relbridge split`` persists one).
    """
    if name not in SJTU:
        raise ConfigurationError(f"unknown dataset {name!r}; choose from {sorted(SJTU)}")
    meta = SJTU[name]
    directory = Path(directory)
    tables, problems, notes = {}, [], {}
    for tname, layout in meta["tables"].items():
        path = directory / layout.file
        if not path.exists():
            raise ConfigurationError(f"{name}: missing file {path}")
        header = _read_header(path)
        kinds = dict(layout.columns)
        # extra columns in a variant release are kept as text
        columns = {h: kinds.get(h, _TEXT) for h in header}
        if len(header) != len(columns) or not set(kinds) <= set(header):
            raise SchemaDriftError(f"{name}/{layout.file}: header {header} lacks columns {sorted(set(kinds) - set(header))}")
        if len(layout.widths) > 1:
            notes[f"{tname}_columns"] = len(header)
        table = load_table(path, {"table": tname, "primary_key": layout.primary_key, "columns": columns})
        if check_counts:
            if table.row_count != layout.rows:
                problems.append(f"{tname}: expected {layout.rows} rows, found {table.row_count}")
            if len(header) not in layout.widths:
                problems.append(f"{tname}: expected {'/'.join(map(str, layout.widths))} columns, found {len(header)}")
        tables[tname] = table
    if problems:
        raise SchemaDriftError(f"{name}: " + "; ".join(problems))
    for ename, (key, sources) in meta.get("implicit_entities", {}).items():
        ids = {v for rel, col in sources for v in tables[rel].column(col).values if v is not None}
        tables[ename] = Table(ename, [Column(key, ColumnKind.IDENTIFIER, sorted(ids, key=natural_key))], key)
    target_table, target_column = meta["target"]
    split_path = directory / "split.json"
    ds = RelationalDataset(
        name=name,
        tables=tables,
        fk_specs=list(meta["relations"]),
        target_table=target_table,
        target_column=target_column,
        exclude=list(meta["exclude"]),
        prefix_chars=dict(meta["prefix_chars"]),
        notes=notes,
    )
    if check_counts and ds.n_classes != meta["n_classes"]:
        raise SchemaDriftError(f"{name}: expected {meta['n_classes']} classes, found {ds.n_classes}")
    ds.split = read_split(split_path) if split_path.exists() else ds.make_split(seed=0)
    ds.split.validate(ds.labels().tolist())
    return ds


# ---------------------------------------------------------------- synthetic


@dataclass
class SynthSpec:
    n_target: int = 1000
    n_aux: int = 200
    n_classes: int = 4
    edges_per_node: int = 5
    signal: str = "graph"
    n_categorical: int = 3
    vocab: int = 6
    per_class: int = 20
    n_val: int = 300
    n_test: int = 500

    def __post_init__(self):
        if self.signal not in ("table", "graph", "both"):
            raise ConfigurationError(f"signal must be table, graph or both, not {self.signal!r}")
        for name in ("n_target", "n_aux", "n_classes", "edges_per_node", "n_categorical", "vocab"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        majority = self.edges_per_node // 2 + 1
        if self.n_aux // self.n_classes < majority:
            raise ConfigurationError(
                f"each class needs >= {majority} aux rows; n_aux={self.n_aux} gives {self.n_aux // self.n_classes}"
            )
        if self.n_aux - self.n_aux // self.n_classes - 1 < self.edges_per_node - majority:
            raise ConfigurationError("too few aux rows of other classes for the minority links")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return dict(vars(self))


def synth_relational(spec, seed=0):
    """Two entity tables (``target``, ``aux``) joined by the relation ``links``.

    ``graph``: each aux row has a latent class exposed by its ``kind`` column;
    a target row's label is the strict majority class of its linked aux rows,
    and the target's own columns are drawn independently of the label.
    ``table``: the label is ``f0``'s code modulo the class count; links are
    random.  ``both``: both signals at once.
    """
    if isinstance(spec, dict):
        spec = SynthSpec.from_dict(spec)
    rng = np.random.default_rng(seed)
    n, m, k, nc = spec.n_target, spec.n_aux, spec.edges_per_node, spec.n_classes
    y = rng.permutation(np.arange(n) % nc)
    z = rng.permutation(np.arange(m) % nc)

    aux_cols = [
        Column("aux_id", ColumnKind.IDENTIFIER, [f"a{i}" for i in range(m)]),
        Column("kind", ColumnKind.CATEGORICAL, [f"c{c}" for c in z]),
        Column("noise", ColumnKind.CATEGORICAL, [f"n{v}" for v in rng.integers(0, spec.vocab, m)]),
        Column("score", ColumnKind.NUMERICAL, rng.normal(size=m).tolist()),
    ]

    cat = rng.integers(0, spec.vocab, size=(n, spec.n_categorical))
    if spec.signal in ("table", "both"):
        cat[:, 0] = y + nc * rng.integers(0, max(1, spec.vocab // nc), size=n)
    target_cols = [Column("target_id", ColumnKind.IDENTIFIER, [f"t{i}" for i in range(n)])]
    for j in range(spec.n_categorical):
        target_cols.append(Column(f"f{j}", ColumnKind.CATEGORICAL, [f"v{v}" for v in cat[:, j]]))
    target_cols.append(Column("x0", ColumnKind.NUMERICAL, rng.normal(size=n).tolist()))
    target_cols.append(Column("label", ColumnKind.CATEGORICAL, [f"c{c}" for c in y]))

    pools = [np.flatnonzero(z == c) for c in range(nc)]
    src, dst = [], []
    majority = k // 2 + 1
    for i in range(n):
        if spec.signal == "table":
            chosen = rng.choice(m, size=min(k, m), replace=False)
        else:
            own = rng.choice(pools[y[i]], size=majority, replace=False)
            others = np.flatnonzero(z != y[i])
            chosen = np.r_[own, rng.choice(others, size=k - majority, replace=False)]
        src += [f"t{i}"] * len(chosen)
        dst += [f"a{j}" for j in chosen]
    links = Table("links", [
        Column("target_id", ColumnKind.IDENTIFIER, src),
        Column("aux_id", ColumnKind.IDENTIFIER, dst),
    ])
    tables = {
        "target": Table("target", target_cols, "target_id"),
        "aux": Table("aux", aux_cols, "aux_id"),
        "links": links,
    }
    fk = ForeignKeySpec("links", (FKLink("target_id", "target", "target_id"), FKLink("aux_id", "aux", "aux_id")))
    ds = RelationalDataset(
        name=f"synth-{spec.signal}",
        tables=tables,
        fk_specs=[fk],
        target_table="target",
        target_column="label",
        classes=[f"c{c}" for c in range(nc)],
        notes={"synth": spec.to_dict(), "seed": seed},
    )
    ds.split = ds.make_split(seed=seed, per_class=spec.per_class, n_val=spec.n_val, n_test=spec.n_test)
    ds.split.validate(ds.labels().tolist())
    return ds


def neighbor_majority_predict(dataset, latent_column="kind"):
    """Predict each target row as the majority latent class of its linked rows.

    ``latent_column`` holds values from the dataset's class vocabulary.  Ties
    go to the lowest class index.  On ``signal="graph"`` data this is the
    exact labeling rule.
    """
    spec = dataset.fk_specs[0]
    src_link, dst_link = spec.links
    target = dataset.target
    other = dataset.tables[dst_link.table]
    kinds = other.column(latent_column).values
    class_of = {c: i for i, c in enumerate(dataset.classes)}
    t_index = target.key_index()
    o_index = other.key_index()
    rel = dataset.tables[spec.relation_table]
    votes = np.zeros((target.row_count, dataset.n_classes), dtype=np.int64)
    for s, d in zip(rel.column(src_link.column).values, rel.column(dst_link.column).values):
        if s in t_index and d in o_index and kinds[o_index[d]] in class_of:
            votes[t_index[s], class_of[kinds[o_index[d]]]] += 1
    return votes.argmax(axis=1)
