"""Typed tables: loading, validation, writing and feature encoding.

A table file is UTF-8 CSV with one header row.  Its schema lives in a JSON
sidecar::

    {"table": "users", "primary_key": "UserID",
     "columns": {"UserID": "identifier", "Gender": "categorical", ...}}

Empty fields are missing cells.
"""
import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, IntegrityError, ParseError


class ColumnKind(str, Enum):
    IDENTIFIER = "identifier"
    CATEGORICAL = "categorical"
    NUMERICAL = "numerical"
    TEXT = "text"
    TIMESTAMP = "timestamp"


@dataclass
class Column:
    name: str
    kind: ColumnKind
    values: list
    vocab: list = field(default_factory=list)

    def __post_init__(self):
        self.kind = ColumnKind(self.kind)
        if self.kind is ColumnKind.CATEGORICAL and not self.vocab:
            self.vocab = _first_occurrence(self.values)

    def __len__(self):
        return len(self.values)

    @property
    def missing(self):
        return np.array([v is None for v in self.values], dtype=bool)


@dataclass
class Table:
    name: str
    columns: list
    primary_key: str = None

    def __post_init__(self):
        names = [c.name for c in self.columns]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise IntegrityError(f"table {self.name!r}: duplicate column names {dupes}")
        lengths = {len(c) for c in self.columns}
        if len(lengths) > 1:
            raise IntegrityError(f"table {self.name!r}: columns have different lengths {sorted(lengths)}")
        if self.primary_key is not None:
            pk = self.column(self.primary_key)
            if pk.kind is not ColumnKind.IDENTIFIER:
                raise IntegrityError(f"table {self.name!r}: primary key {pk.name!r} is {pk.kind.value}")
            seen = set()
            for i, v in enumerate(pk.values):
                if v is None:
                    raise IntegrityError(f"table {self.name!r}: missing primary key at row {i + 1}")
                if v in seen:
                    raise IntegrityError(f"table {self.name!r}: duplicate primary key {v!r} at row {i + 1}")
                seen.add(v)

    @property
    def row_count(self):
        return len(self.columns[0]) if self.columns else 0

    @property
    def column_names(self):
        return [c.name for c in self.columns]

    def column(self, name):
        for c in self.columns:
            if c.name == name:
                return c
        raise ConfigurationError(f"table {self.name!r} has no column {name!r}")

    def has_column(self, name):
        return any(c.name == name for c in self.columns)

    def key_index(self):
        """Map primary-key value -> row position."""
        if self.primary_key is None:
            raise ConfigurationError(f"table {self.name!r} has no primary key")
        return {v: i for i, v in enumerate(self.column(self.primary_key).values)}

    def schema(self):
        return {
            "table": self.name,
            "primary_key": self.primary_key,
            "columns": {c.name: c.kind.value for c in self.columns},
        }

    def take(self, rows):
        """New table with the given row positions, vocabularies preserved."""
        rows = list(rows)
        cols = [Column(c.name, c.kind, [c.values[i] for i in rows], list(c.vocab)) for c in self.columns]
        return Table(self.name, cols, self.primary_key)


def _first_occurrence(values):
    seen = {}
    for v in values:
        if v is not None and v not in seen:
            seen[v] = None
    return list(seen)


def parse_cell(raw, kind):
    if raw == "":
        return None
    if kind in (ColumnKind.IDENTIFIER, ColumnKind.CATEGORICAL, ColumnKind.TEXT):
        return raw
    if kind is ColumnKind.NUMERICAL:
        value = float(raw)
        if math.isnan(value):
            return None
        return value
    try:
        return float(raw)
    except ValueError:
        return datetime.fromisoformat(raw).timestamp()


def load_table(path, schema):
    """Read a CSV file under ``schema`` (a dict or a path to the JSON sidecar)."""
    if not isinstance(schema, dict):
        schema = json.loads(Path(schema).read_text(encoding="utf-8"))
    kinds = {name: ColumnKind(kind) for name, kind in schema["columns"].items()}
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: file has no header row") from None
        if sorted(header) != sorted(kinds) or len(header) != len(kinds):
            raise ConfigurationError(
                f"{path}: header {header} does not match schema columns {list(kinds)}"
            )
        raw_columns = [[] for _ in header]
        for lineno, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(header):
                raise ParseError(
                    f"{path}:{lineno}: expected {len(header)} fields, found {len(record)}", row=lineno
                )
            for j, raw in enumerate(record):
                try:
                    raw_columns[j].append(parse_cell(raw, kinds[header[j]]))
                except ValueError:
                    raise ParseError(
                        f"{path}:{lineno}: column {header[j]!r}: cannot parse {raw!r} as {kinds[header[j]].value}",
                        row=lineno,
                        column=header[j],
                    ) from None
    columns = [Column(name, kinds[name], vals) for name, vals in zip(header, raw_columns)]
    return Table(schema.get("table", path.stem), columns, schema.get("primary_key"))


def format_cell(value, kind):
    if value is None:
        return ""
    if kind in (ColumnKind.NUMERICAL, ColumnKind.TIMESTAMP):
        return repr(float(value))
    return str(value)


def write_table(table, path, schema_path=None):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(table.column_names)
        for i in range(table.row_count):
            writer.writerow([format_cell(c.values[i], c.kind) for c in table.columns])
    if schema_path is not None:
        Path(schema_path).write_text(json.dumps(table.schema(), indent=2), encoding="utf-8")


# ---------------------------------------------------------------- encoding


@dataclass
class EncodingReport:
    categorical: list = field(default_factory=list)
    numerical: list = field(default_factory=list)
    excluded: dict = field(default_factory=dict)
    transforms: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "categorical": list(self.categorical),
            "numerical": list(self.numerical),
            "excluded": dict(self.excluded),
            "transforms": dict(self.transforms),
        }


@dataclass
class TableFeatures:
    """Model-ready view of one table.

    ``categorical`` holds integer codes (0 = missing/unseen, vocabulary entry
    ``v`` has code ``v + 1``); ``numerical`` holds z-scored floats.
    """

    categorical: np.ndarray
    numerical: np.ndarray
    cardinalities: list
    report: EncodingReport

    @property
    def n_rows(self):
        return self.categorical.shape[0]

    @property
    def n_categorical(self):
        return self.categorical.shape[1]

    @property
    def n_numerical(self):
        return self.numerical.shape[1]

    def take(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return TableFeatures(self.categorical[rows], self.numerical[rows], list(self.cardinalities), self.report)


def zscore(values):
    """Standardize a column with missing entries marked NaN; missing -> 0.

    A zero-variance column is divided by 1 instead of 0.
    """
    values = np.asarray(values, dtype=np.float64)
    present = ~np.isnan(values)
    if not present.any():
        return np.zeros_like(values)
    mu = values[present].mean()
    sd = values[present].std()
    out = (values - mu) / (sd if sd > 0 else 1.0)
    out[~present] = 0.0
    return out


def encode_features(table, exclude=(), prefix_chars=None, allow_empty=False):
    """Turn a table into categorical codes and z-scored numerical features.

    Text, identifier and timestamp columns are left out and listed in the
    report, as is every column named in ``exclude``.  ``prefix_chars`` maps a
    categorical column to the number of leading characters to keep (for
    near-unique codes such as zip codes).
    """
    prefix_chars = prefix_chars or {}
    exclude = set(exclude)
    report = EncodingReport()
    codes, cards, nums = [], [], []
    for col in table.columns:
        if col.name in exclude:
            report.excluded[col.name] = "excluded by task"
            continue
        if col.kind is ColumnKind.CATEGORICAL:
            values, vocab = col.values, col.vocab
            if col.name in prefix_chars:
                k = prefix_chars[col.name]
                values = [None if v is None else v[:k] for v in values]
                vocab = _first_occurrence(values)
                report.transforms[col.name] = f"first {k} characters"
            lookup = {v: i + 1 for i, v in enumerate(vocab)}
            codes.append([lookup.get(v, 0) for v in values])
            cards.append(len(vocab) + 1)
            report.categorical.append(col.name)
        elif col.kind is ColumnKind.NUMERICAL:
            raw = [np.nan if v is None else v for v in col.values]
            nums.append(zscore(raw))
            report.numerical.append(col.name)
        else:
            report.excluded[col.name] = f"{col.kind.value} column"
    if not codes and not nums and not allow_empty:
        raise ConfigurationError(f"table {table.name!r} has no usable feature columns")
    n = table.row_count
    cat = np.array(codes, dtype=np.int64).T.reshape(n, len(codes))
    num = np.array(nums, dtype=np.float64).T.reshape(n, len(nums))
    return TableFeatures(cat, num, cards, report)
