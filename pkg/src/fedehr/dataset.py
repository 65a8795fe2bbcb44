"""Patient-record ingestion, preprocessing and client partitioning.

The tabular layout follows the medical-cost insurance data: four numeric
columns (age, bmi, children, charges), three categoricals (sex, smoker,
region) and a synthetic SSN used only as an identifier.
"""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DegenerateColumn,
    EmptyShard,
    ExhaustedSpace,
    LengthMismatch,
    MalformedRow,
    MissingColumn,
    NonNumericColumn,
    TooManyClients,
    UnknownCategory,
    UnknownColumn,
)

SSN_PATTERN = re.compile(r"^\d{3}-\d{2}-\d{4}$")
SSN_PREFIX = "999"
SSN_SPACE = 10**6

RECORD_COLUMNS = ("age", "sex", "bmi", "children", "smoker", "region", "charges", "SSN")
NUMERIC_FEATURES = ("age", "bmi", "children")
CATEGORICAL_FEATURES = ("sex", "smoker", "region")
TARGET = "charges"
IDENTIFIER = "SSN"

CATEGORIES = {
    "sex": ("female", "male"),
    "smoker": ("no", "yes"),
    "region": ("northeast", "northwest", "southeast", "southwest"),
}


@dataclass(frozen=True)
class PatientRecord:
    age: int
    sex: str
    bmi: float
    children: int
    smoker: str
    region: str
    charges: float
    ssn: str | None = None

    def __post_init__(self):
        problem = _record_problem(self)
        if problem:
            raise ValueError(problem)


def _record_problem(rec: PatientRecord) -> str | None:
    if not 0 <= rec.age <= 130:
        return f"age {rec.age} outside [0, 130]"
    if not (math.isfinite(rec.bmi) and rec.bmi > 0):
        return f"bmi must be positive, got {rec.bmi}"
    if rec.children < 0:
        return f"children must be >= 0, got {rec.children}"
    for name in CATEGORICAL_FEATURES:
        value = getattr(rec, name)
        if value not in CATEGORIES[name]:
            return f"unknown {name} category {value!r}"
    if not math.isfinite(rec.charges):
        return "charges must be finite"
    if rec.charges < 0:
        return "charges must be non-negative on ingest"
    if rec.ssn is not None and not SSN_PATTERN.match(rec.ssn):
        return f"bad SSN {rec.ssn!r}"
    return None


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def parse_csv(source: IO[bytes] | bytes, *, require_ssn: bool = True) -> list[PatientRecord]:
    """Parse a UTF-8 CSV of patient rows.

    Header names are matched case-insensitively and may appear in any order.
    With ``require_ssn=False`` a file without an SSN column (the public
    Kaggle layout) is accepted and every record gets ``ssn=None``.

    Row numbers in :class:`MalformedRow` count data rows from 1.
    """
    raw = source if isinstance(source, bytes) else source.read()
    reader = csv.reader(io.StringIO(raw.decode("utf-8")))
    try:
        header = next(reader)
    except StopIteration:
        raise MissingColumn("empty input, no header row") from None

    index = {name.strip().lower(): i for i, name in enumerate(header)}
    wanted = [c.lower() for c in RECORD_COLUMNS]
    if not require_ssn:
        wanted.remove("ssn")
    missing = [c for c in wanted if c not in index]
    if missing:
        raise MissingColumn(f"missing column(s): {', '.join(missing)}")
    has_ssn = "ssn" in index

    records = []
    for rownum, row in enumerate(reader, start=1):
        if not row:
            continue
        if len(row) != len(header):
            raise MalformedRow(rownum, f"expected {len(header)} fields, got {len(row)}")
        get = lambda name: row[index[name]].strip()  # noqa: E731
        try:
            rec = PatientRecord(
                age=int(get("age")),
                sex=get("sex"),
                bmi=float(get("bmi")),
                children=int(get("children")),
                smoker=get("smoker"),
                region=get("region"),
                charges=float(get("charges")),
                ssn=get("ssn") if has_ssn else None,
            )
        except ValueError as exc:
            raise MalformedRow(rownum, str(exc)) from None
        records.append(rec)
    return records


def load_insurance() -> list[PatientRecord]:
    """The bundled 1338-row public medical-cost dataset (no SSN column)."""
    raw = resources.files("fedehr").joinpath("data/insurance.csv").read_bytes()
    return parse_csv(raw, require_ssn=False)


def synthesize_ssns(seed: int, n: int) -> list[str]:
    """Draw ``n`` distinct ``999-DD-DDDD`` strings, deterministic in ``seed``."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if n > SSN_SPACE:
        raise ExhaustedSpace(f"only {SSN_SPACE} distinct SSN suffixes exist, asked for {n}")
    if n == 0:
        return []
    rng = np.random.default_rng(seed)
    suffixes = rng.choice(SSN_SPACE, size=n, replace=False)
    return [f"{SSN_PREFIX}-{s // 10000:02d}-{s % 10000:04d}" for s in suffixes.tolist()]


def merge_ssn(records: Sequence[PatientRecord], ssns: Sequence[str]) -> list[PatientRecord]:
    if len(records) != len(ssns):
        raise LengthMismatch(f"{len(records)} records vs {len(ssns)} SSNs")
    return [replace(rec, ssn=ssn) for rec, ssn in zip(records, ssns)]


# ---------------------------------------------------------------------------
# tabular dataset
# ---------------------------------------------------------------------------

class Kind(str, Enum):
    NUMERIC = "numeric"
    CATEGORICAL = "categorical"
    TARGET = "target"
    IDENTIFIER = "identifier"


@dataclass(frozen=True)
class Column:
    name: str
    kind: Kind


@dataclass(frozen=True)
class PreprocessStats:
    """Fitted preprocessing state.

    Standard deviations are population values (divisor N). Category lists
    are sorted and define the one-hot column order.
    """

    means: Mapping[str, float] = field(default_factory=dict)
    stds: Mapping[str, float] = field(default_factory=dict)
    categories: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def merged(self, other: PreprocessStats | None) -> PreprocessStats:
        if other is None:
            return self
        return PreprocessStats(
            means={**self.means, **other.means},
            stds={**self.stds, **other.stds},
            categories={**self.categories, **other.categories},
        )

    def inverse(self, name: str, values) -> np.ndarray:
        """Undo standardization of column ``name``."""
        if name not in self.means:
            raise UnknownColumn(f"no standardization stats for {name!r}")
        return np.asarray(values, dtype=float) * self.stds[name] + self.means[name]

    def to_dict(self) -> dict:
        return {
            "means": dict(self.means),
            "stds": dict(self.stds),
            "categories": {k: list(v) for k, v in self.categories.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> PreprocessStats:
        return cls(
            means={k: float(v) for k, v in d.get("means", {}).items()},
            stds={k: float(v) for k, v in d.get("stds", {}).items()},
            categories={k: tuple(v) for k, v in d.get("categories", {}).items()},
        )


def _frozen(values) -> np.ndarray:
    arr = np.array(values)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-ordered table; every transformation returns a new instance."""

    columns: tuple[Column, ...]
    data: Mapping[str, np.ndarray]
    stats: PreprocessStats | None = None

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate column names in {names}")
        if set(names) != set(self.data):
            raise ValueError("columns and data keys disagree")
        lengths = {len(self.data[n]) for n in names}
        if len(lengths) > 1:
            raise ValueError(f"ragged columns: lengths {sorted(lengths)}")
        if sum(c.kind is Kind.TARGET for c in self.columns) != 1:
            raise ValueError("exactly one target column is required")

    @classmethod
    def build(cls, cols: Iterable[tuple[str, Kind, object]], stats=None) -> Dataset:
        cols = list(cols)
        return cls(
            columns=tuple(Column(n, Kind(k)) for n, k, _ in cols),
            data={n: _frozen(v) for n, _, v in cols},
            stats=stats,
        )

    @classmethod
    def from_records(cls, records: Sequence[PatientRecord]) -> Dataset:
        cols = [
            ("age", Kind.NUMERIC, np.array([r.age for r in records], dtype=np.int64)),
            ("sex", Kind.CATEGORICAL, np.array([r.sex for r in records], dtype=object)),
            ("bmi", Kind.NUMERIC, np.array([r.bmi for r in records], dtype=float)),
            ("children", Kind.NUMERIC, np.array([r.children for r in records], dtype=np.int64)),
            ("smoker", Kind.CATEGORICAL, np.array([r.smoker for r in records], dtype=object)),
            ("region", Kind.CATEGORICAL, np.array([r.region for r in records], dtype=object)),
            ("charges", Kind.TARGET, np.array([r.charges for r in records], dtype=float)),
        ]
        if records and all(r.ssn is not None for r in records):
            cols.append(("SSN", Kind.IDENTIFIER, np.array([r.ssn for r in records], dtype=object)))
        return cls.build(cols)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def n_rows(self) -> int:
        return len(self.data[self.columns[0].name]) if self.columns else 0

    def __len__(self) -> int:
        return self.n_rows

    @property
    def target_name(self) -> str:
        return next(c.name for c in self.columns if c.kind is Kind.TARGET)

    def kind(self, name: str) -> Kind:
        for c in self.columns:
            if c.name == name:
                return c.kind
        raise UnknownColumn(name)

    def column(self, name: str) -> np.ndarray:
        if name not in self.data:
            raise UnknownColumn(name)
        return self.data[name]

    def row(self, i: int) -> dict:
        return {n: _py(self.data[n][i]) for n in self.names}

    def take(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset.build(
            ((c.name, c.kind, self.data[c.name][idx]) for c in self.columns), self.stats
        )

    def with_column(self, name: str, values) -> Dataset:
        """Replace the values of an existing column, keeping its kind."""
        self.kind(name)
        return Dataset.build(
            ((c.name, c.kind, values if c.name == name else self.data[c.name]) for c in self.columns),
            self.stats,
        )

    def xy(self) -> tuple[np.ndarray, np.ndarray, list[str]]:
        """Feature matrix, target vector and feature names.

        Identifier columns are skipped; categorical columns must already be
        encoded.
        """
        raw = [c.name for c in self.columns if c.kind is Kind.CATEGORICAL]
        if raw:
            raise NonNumericColumn(f"categorical columns not encoded: {raw}")
        feats = [c.name for c in self.columns if c.kind is Kind.NUMERIC]
        X = np.column_stack([self.data[n].astype(float) for n in feats]) if feats else np.empty((self.n_rows, 0))
        y = self.data[self.target_name].astype(float)
        return X, y, feats


def _py(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


# ---------------------------------------------------------------------------
# CSV snapshot I/O
# ---------------------------------------------------------------------------

def _format(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(ds: Dataset, stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(ds.names)
    cols = [ds.data[n] for n in ds.names]
    for i in range(ds.n_rows):
        writer.writerow([_format(c[i]) for c in cols])


def dataset_to_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    write_csv(ds, buf)
    return buf.getvalue()


def _infer_kind(name: str) -> Kind:
    if name == TARGET:
        return Kind.TARGET
    if name == IDENTIFIER:
        return Kind.IDENTIFIER
    if name in CATEGORICAL_FEATURES:
        return Kind.CATEGORICAL
    return Kind.NUMERIC


def _parse_numeric(name: str, raw: list[str]) -> np.ndarray:
    try:
        return np.array([int(v) for v in raw], dtype=np.int64)
    except ValueError:
        pass
    try:
        return np.array([float(v) for v in raw], dtype=float)
    except ValueError as exc:
        raise NonNumericColumn(f"column {name!r}: {exc}") from None


def read_csv(source: IO[bytes] | bytes) -> Dataset:
    """Read a dataset snapshot without record-level validation.

    Unlike :func:`parse_csv` this accepts perturbed (negative) charges and
    pseudonymized identifiers, so every pipeline stage can read back what
    an earlier stage wrote.
    """
    raw = source if isinstance(source, bytes) else source.read()
    rows = list(csv.reader(io.StringIO(raw.decode("utf-8"))))
    if not rows:
        raise MissingColumn("empty input, no header row")
    header, body = rows[0], [r for r in rows[1:] if r]
    for i, r in enumerate(body, start=1):
        if len(r) != len(header):
            raise MalformedRow(i, f"expected {len(header)} fields, got {len(r)}")
    canon = {n.lower(): n for n in RECORD_COLUMNS}
    names = [canon.get(h.strip().lower(), h.strip()) for h in header]
    if TARGET not in names:
        raise MissingColumn(f"missing target column {TARGET!r}")
    cols = []
    for j, name in enumerate(names):
        kind = _infer_kind(name)
        raw_col = [r[j].strip() for r in body]
        if kind in (Kind.CATEGORICAL, Kind.IDENTIFIER):
            values = np.array(raw_col, dtype=object)
        else:
            values = _parse_numeric(name, raw_col)
            if kind is Kind.TARGET:
                values = values.astype(float)
        cols.append((name, kind, values))
    return Dataset.build(cols)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def standardize(ds: Dataset, columns: Sequence[str]) -> tuple[Dataset, PreprocessStats]:
    """Rescale ``columns`` to mean 0 and population standard deviation 1."""
    means, stds, new = {}, {}, {}
    for name in columns:
        kind = ds.kind(name)
        if kind not in (Kind.NUMERIC, Kind.TARGET):
            raise NonNumericColumn(f"cannot standardize {kind.value} column {name!r}")
        x = ds.column(name).astype(float)
        mean = float(np.mean(x))
        std = float(np.std(x))
        if std == 0.0:
            raise DegenerateColumn(f"column {name!r} is constant")
        means[name], stds[name] = mean, std
        new[name] = (x - mean) / std
    stats = PreprocessStats(means=means, stds=stds)
    merged = stats.merged(None) if ds.stats is None else ds.stats.merged(stats)
    out = Dataset.build(
        ((c.name, c.kind, new.get(c.name, ds.data[c.name])) for c in ds.columns), merged
    )
    return out, stats


def one_hot(
    ds: Dataset,
    columns: Sequence[str],
    stats: PreprocessStats | None = None,
    *,
    drop_first: bool = False,
) -> Dataset:
    """Expand categorical columns into ``<col>=<category>`` indicator columns.

    Categories come from ``stats`` when it carries them (values outside the
    stored list raise :class:`UnknownCategory`), otherwise from the sorted
    distinct values. ``drop_first`` omits the first category's indicator,
    giving reference coding for models fitted with an intercept.
    """
    for name in columns:
        if ds.kind(name) is not Kind.CATEGORICAL:
            raise NonNumericColumn(f"column {name!r} is not categorical")
    fitted = {}
    cols = []
    for c in ds.columns:
        if c.name not in columns:
            cols.append((c.name, c.kind, ds.data[c.name]))
            continue
        values = ds.data[c.name]
        if stats is not None and c.name in stats.categories:
            cats = tuple(stats.categories[c.name])
            unseen = sorted(set(values.tolist()) - set(cats))
            if unseen:
                raise UnknownCategory(f"{c.name}: {unseen} not in {list(cats)}")
        else:
            cats = tuple(sorted(set(values.tolist())))
        fitted[c.name] = cats
        for cat in cats[1:] if drop_first else cats:
            cols.append((f"{c.name}={cat}", Kind.NUMERIC, (values == cat).astype(np.int64)))
    new_stats = PreprocessStats(categories=fitted)
    merged = new_stats if ds.stats is None else ds.stats.merged(new_stats)
    return Dataset.build(cols, merged)


def drop_column(ds: Dataset, name: str) -> Dataset:
    ds.kind(name)
    return Dataset.build(
        ((c.name, c.kind, ds.data[c.name]) for c in ds.columns if c.name != name), ds.stats
    )


@dataclass(frozen=True, eq=False)
class ClientShard:
    client_id: str
    features: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        if len(self.target) == 0:
            raise EmptyShard(f"client {self.client_id} has no rows")
        if self.features.shape[0] != len(self.target):
            raise ValueError("features and target row counts differ")

    @property
    def sample_count(self) -> int:
        return len(self.target)


def partition(
    ds: Dataset, n_clients: int, seed: int, labels: Sequence[str] | None = None
) -> list[ClientShard]:
    """Shuffle rows with ``seed`` and cut them into near-equal contiguous shards.

    Earlier shards receive the remainder rows, so sizes differ by at most one.
    """
    if labels is None:
        labels = [f"client-{i}" for i in range(n_clients)]
    if len(labels) != n_clients:
        raise ValueError(f"{len(labels)} labels for {n_clients} clients")
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if n_clients > ds.n_rows:
        raise TooManyClients(f"{n_clients} clients for {ds.n_rows} rows")
    X, y, _ = ds.xy()
    order = np.random.default_rng(seed).permutation(ds.n_rows)
    return [
        ClientShard(label, X[idx], y[idx])
        for label, idx in zip(labels, np.array_split(order, n_clients))
    ]


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    n = ds.n_rows
    n_test = int(math.floor(n * test_fraction + 0.5))
    order = np.random.default_rng(seed).permutation(n)
    return ds.take(order[n_test:]), ds.take(order[:n_test])


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------

def prepare_federated(ds: Dataset) -> Dataset:
    """Standardize the numeric columns and the target, one-hot encode the
    categoricals (full k-column coding) and drop the SSN if present."""
    if IDENTIFIER in ds.data:
        ds = drop_column(ds, IDENTIFIER)
    ds, _ = standardize(ds, [*NUMERIC_FEATURES, TARGET])
    return one_hot(ds, list(CATEGORICAL_FEATURES))


def prepare_regression(ds: Dataset, features: Sequence[str] | None = None) -> Dataset:
    """Reference-coded design for least squares on raw charges.

    ``features`` restricts the predictors (e.g. ``("sex", "smoker",
    "region")``); by default every feature column is used.
    """
    if IDENTIFIER in ds.data:
        ds = drop_column(ds, IDENTIFIER)
    if features is not None:
        unknown = set(features) - set(NUMERIC_FEATURES + CATEGORICAL_FEATURES)
        if unknown:
            raise UnknownColumn(f"unknown feature(s): {sorted(unknown)}")
        for name in NUMERIC_FEATURES + CATEGORICAL_FEATURES:
            if name not in features:
                ds = drop_column(ds, name)
    cats = [c.name for c in ds.columns if c.kind is Kind.CATEGORICAL]
    return one_hot(ds, cats, drop_first=True)
