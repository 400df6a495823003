"""Dataset manifests, CSV ingestion, preprocessing and stratified splitting."""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

DATA_DIR_ENV = "FAIRX_DATA_DIR"


class DataError(ValueError):
    """Bad manifest, unreadable CSV or unusable split."""


@dataclass
class DatasetManifest:
    """How to turn one CSV into (X, y, a).

    ``group1_value`` (one value or a list) marks protected group 1;
    alternatively ``group1_min`` marks rows whose numeric protected value is
    at least that threshold.  ``columns`` names the fields of a headerless
    file.  ``features``, when given, is an explicit feature whitelist
    (``drop`` is then ignored).  ``filters`` keep rows matching every rule,
    where a rule is ``{"column": c, "op": "eq"|"ne"|"in"|"between", "value": v}``.
    """

    name: str
    csv: str
    target: str
    positive_label: str | list
    protected: str
    group1_value: str | list | None = None
    group1_min: float | None = None
    drop: list[str] = field(default_factory=list)
    categorical: list[str] = field(default_factory=list)
    columns: list[str] | None = None
    features: list[str] | None = None
    delimiter: str = ","
    na_values: list[str] = field(default_factory=lambda: ["", "NA", "?"])
    filters: list[dict] = field(default_factory=list)
    keep_protected: bool = False
    notes: str = ""
    download: str = ""
    base_dir: str | None = None

    def __post_init__(self):
        if (self.group1_value is None) == (self.group1_min is None):
            raise DataError(f"manifest {self.name!r}: set exactly one of group1_value, group1_min")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read manifest {path}: {e}") from e
        d.setdefault("base_dir", str(path.resolve().parent))
        try:
            return cls(**d)
        except TypeError as e:
            raise DataError(f"manifest {path}: {e}") from e

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def csv_path(self) -> Path:
        p = Path(os.path.expanduser(self.csv))
        if p.is_absolute():
            return p
        root = os.environ.get(DATA_DIR_ENV) or self.base_dir or "."
        return Path(root) / p

    def feature_columns(self, available: Sequence[str]) -> list[str]:
        if self.features is not None:
            missing = [c for c in self.features if c not in available]
            if missing:
                raise DataError(f"feature column(s) missing from data: {missing}")
            return [c for c in self.features if c != self.target
                    and (self.keep_protected or c != self.protected)]
        skip = {self.target, *self.drop}
        if not self.keep_protected:
            skip.add(self.protected)
        return [c for c in available if c not in skip]


@dataclass
class LoadReport:
    rows_read: int = 0
    rows_filtered: int = 0
    rows_missing_label: int = 0

    @property
    def rows_kept(self) -> int:
        return self.rows_read - self.rows_filtered - self.rows_missing_label


@dataclass
class RawTable:
    """Column name -> per-row values (str or None, or floats)."""

    columns: dict[str, np.ndarray]
    report: LoadReport = field(default_factory=LoadReport)

    @property
    def n_rows(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0

    def take(self, idx) -> "RawTable":
        idx = np.asarray(idx)
        return RawTable({k: v[idx] for k, v in self.columns.items()}, self.report)


def _passes(value, rule) -> bool:
    op, target = rule.get("op", "eq"), rule["value"]
    if value is None:
        return False
    if op == "eq":
        return value == str(target)
    if op == "ne":
        return value != str(target)
    if op == "in":
        return value in {str(t) for t in target}
    if op == "between":
        try:
            v = float(value)
        except ValueError:
            return False
        return float(target[0]) <= v <= float(target[1])
    raise DataError(f"unknown filter op {op!r}")


def load_csv(manifest: DatasetManifest) -> RawTable:
    """Read the manifest's CSV; drop filtered rows and rows lacking target/protected."""
    path = manifest.csv_path()
    if not path.exists():
        raise DataError(f"data file not found: {path} (see the manifest's download notes)")
    na = set(manifest.na_values)
    rows: list[list] = []
    bad: list[int] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=manifest.delimiter, skipinitialspace=True)
        header = manifest.columns
        if header is None:
            header = [h.strip() for h in next(reader, [])]
            if not header:
                raise DataError(f"{path}: missing header row")
        width = len(header)
        for rec in reader:
            if not rec or all(not f.strip() for f in rec):
                continue
            if manifest.delimiter == " ":
                while rec and rec[-1] == "":
                    rec.pop()
            if len(rec) != width:
                bad.append(reader.line_num)
                continue
            rows.append([None if f.strip() in na else f.strip() for f in rec])
    if bad:
        shown = ", ".join(map(str, bad[:10])) + (" ..." if len(bad) > 10 else "")
        raise DataError(f"{path}: {len(bad)} unparseable row(s) at line(s) {shown}")
    needed = [manifest.target, manifest.protected, *manifest.categorical,
              *(r["column"] for r in manifest.filters)]
    missing = [c for c in needed if c not in header]
    if missing:
        raise DataError(f"{path}: manifest names missing column(s) {missing}")

    report = LoadReport(rows_read=len(rows))
    pos = {c: i for i, c in enumerate(header)}
    kept = []
    for r in rows:
        if not all(_passes(r[pos[rule["column"]]], rule) for rule in manifest.filters):
            report.rows_filtered += 1
        elif r[pos[manifest.target]] is None or r[pos[manifest.protected]] is None:
            report.rows_missing_label += 1
        else:
            kept.append(r)
    if report.rows_missing_label:
        log.info("%s: dropped %d row(s) with missing target/protected value",
                 manifest.name, report.rows_missing_label)
    cols = {}
    for c, i in pos.items():
        col = np.empty(len(kept), dtype=object)
        col[:] = [r[i] for r in kept]
        cols[c] = col
    return RawTable(cols, report)


def _matches(values, spec) -> np.ndarray:
    allowed = {str(v) for v in spec} if isinstance(spec, list) else {str(spec)}
    return np.array([str(v) in allowed for v in values], dtype=bool)


def _as_float(values) -> np.ndarray:
    if np.asarray(values).dtype.kind == "f":
        return np.asarray(values, dtype=np.float64)
    return np.array([np.nan if v is None else float(v) for v in values], dtype=np.float64)


def labels(raw: RawTable, manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray]:
    """Binary target and protected vectors."""
    for c in (manifest.target, manifest.protected):
        if c not in raw.columns:
            raise DataError(f"column {c!r} not in data")
    y = _matches(raw.columns[manifest.target], manifest.positive_label).astype(np.int64)
    if manifest.group1_min is not None:
        try:
            a = (_as_float(raw.columns[manifest.protected]) >= manifest.group1_min)
        except ValueError as e:
            raise DataError(f"protected column {manifest.protected!r} is not numeric") from e
    else:
        a = _matches(raw.columns[manifest.protected], manifest.group1_value)
    return y, a.astype(np.int64)


@dataclass
class PreprocessStats:
    """Fitted transform: z-scores for continuous columns, one-hot for categorical."""

    continuous: list[dict]   # {"name", "mean", "std", "median"}
    categorical: list[dict]  # {"name", "categories"}
    dropped: list[str] = field(default_factory=list)

    @property
    def feature_names(self) -> list[str]:
        names = [c["name"] for c in self.continuous]
        for c in self.categorical:
            names += [f"{c['name']}={v}" for v in c["categories"]]
        return names

    @property
    def source_columns(self) -> list[str]:
        return [c["name"] for c in self.continuous] + [c["name"] for c in self.categorical]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessStats":
        return cls(d["continuous"], d["categorical"], d.get("dropped", []))


MISSING_CATEGORY = "<missing>"


def fit_stats(raw: RawTable, manifest: DatasetManifest, fit_indices) -> PreprocessStats:
    fit = np.asarray(fit_indices)
    if fit.size == 0:
        raise DataError("fitting indices are empty")
    cat = set(manifest.categorical)
    continuous, categorical, dropped = [], [], []
    for name in manifest.feature_columns(list(raw.columns)):
        col = raw.columns[name][fit]
        if name in cat:
            cats = sorted({MISSING_CATEGORY if v is None else str(v) for v in col})
            categorical.append({"name": name, "categories": cats})
            continue
        try:
            v = _as_float(col)
        except ValueError as e:
            raise DataError(f"column {name!r} is not numeric; list it as categorical") from e
        if np.isnan(v).all():
            raise DataError(f"column {name!r} has no values in the fitting rows")
        median = float(np.nanmedian(v))
        v = np.where(np.isnan(v), median, v)
        std = float(v.std())
        if std < 1e-12:
            log.warning("dropping zero-variance column %r", name)
            dropped.append(name)
            continue
        continuous.append({"name": name, "mean": float(v.mean()), "std": std, "median": median})
    return PreprocessStats(continuous, categorical, dropped)


def apply_stats(raw: RawTable, stats: PreprocessStats) -> np.ndarray:
    missing = [c for c in stats.source_columns if c not in raw.columns]
    if missing:
        raise DataError(f"column(s) missing from data: {missing}")
    blocks = []
    for c in stats.continuous:
        v = _as_float(raw.columns[c["name"]])
        v = np.where(np.isnan(v), c["median"], v)
        blocks.append(((v - c["mean"]) / c["std"])[:, None])
    for c in stats.categorical:
        col = raw.columns[c["name"]]
        pos = {v: i for i, v in enumerate(c["categories"])}
        block = np.zeros((len(col), len(pos)))
        for r, v in enumerate(col):
            j = pos.get(MISSING_CATEGORY if v is None else str(v))
            if j is not None:  # unseen categories stay all-zero
                block[r, j] = 1.0
        blocks.append(block)
    if not blocks:
        raise DataError("no feature columns left after preprocessing")
    return np.hstack(blocks)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    a: np.ndarray
    feature_names: list[str]
    stats: PreprocessStats | None = None
    raw: RawTable | None = None
    manifest: DatasetManifest | None = None

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def cell_counts(self, indices=None) -> dict[str, int]:
        y, a = (self.y, self.a) if indices is None else (self.y[indices], self.a[indices])
        return {f"y{yy}_a{g}": int(np.sum((y == yy) & (a == g))) for yy in (0, 1) for g in (0, 1)}

    def refit(self, fit_indices) -> "Dataset":
        """Re-run preprocessing with statistics from ``fit_indices`` only."""
        if self.raw is None or self.manifest is None:
            raise DataError("dataset has no raw table to refit")
        return preprocess(self.raw, self.manifest, fit_indices)


def preprocess(raw: RawTable, manifest: DatasetManifest, fit_indices=None) -> Dataset:
    """Fit statistics on ``fit_indices`` (all rows if None) and transform every row."""
    if fit_indices is None:
        fit_indices = np.arange(raw.n_rows)
    stats = fit_stats(raw, manifest, fit_indices)
    X = apply_stats(raw, stats)
    y, a = labels(raw, manifest)
    return Dataset(X, y, a, stats.feature_names, stats, raw, manifest)


@dataclass
class SplitIndices:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    seed: int

    def __getitem__(self, name: str) -> np.ndarray:
        return {"train": self.train, "validation": self.validation, "test": self.test}[name]


@dataclass
class Fold:
    index: int
    train: np.ndarray
    test: np.ndarray


def _cells(y, a) -> dict[tuple[int, int], np.ndarray]:
    y, a = np.asarray(y), np.asarray(a)
    return {(yy, g): np.flatnonzero((y == yy) & (a == g)) for yy in (0, 1) for g in (0, 1)}


def largest_remainder(n: int, ratios: Sequence, rng: np.random.Generator) -> list[int]:
    """Integer allocation of n by ratios; equal remainders are ordered by ``rng``."""
    fr = [Fraction(str(r)) for r in ratios]
    total = sum(fr)
    quotas = [n * r / total for r in fr]
    alloc = [int(q) for q in quotas]
    tiebreak = rng.permutation(len(fr))
    order = sorted(range(len(fr)), key=lambda i: (-(quotas[i] - alloc[i]), tiebreak[i]))
    for i in order[: n - sum(alloc)]:
        alloc[i] += 1
    return alloc


def stratified_split(y, a, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> SplitIndices:
    """Train/validation/test split stratified by (label, protected) cell."""
    if len(ratios) != 3:
        raise DataError("need three ratios")
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    for cell, idx in _cells(y, a).items():
        if len(idx) < 3:
            raise DataError(f"cell (y={cell[0]}, a={cell[1]}) has {len(idx)} rows; need >= 3")
        alloc = largest_remainder(len(idx), ratios, rng)
        idx = rng.permutation(idx)
        start = 0
        for k, m in enumerate(alloc):
            parts[k].append(idx[start:start + m])
            start += m
    train, val, test = (np.sort(np.concatenate(p)) for p in parts)
    return SplitIndices(train, val, test, seed)


def kfold(y, a, k: int = 5, seed: int = 0) -> list[Fold]:
    """k stratified folds; every non-empty (y, a) cell needs at least k rows."""
    if k < 2:
        raise DataError("k must be >= 2")
    rng = np.random.default_rng(seed)
    n = len(y)
    assign = np.empty(n, dtype=np.int64)
    offset = 0
    for cell, idx in _cells(y, a).items():
        if len(idx) == 0:
            continue
        if len(idx) < k:
            raise DataError(f"cell (y={cell[0]}, a={cell[1]}) has {len(idx)} rows; need >= {k}")
        idx = rng.permutation(idx)
        assign[idx] = (np.arange(len(idx)) + offset) % k
        offset = (offset + len(idx)) % k
    everything = np.arange(n)
    return [Fold(f, everything[assign != f], everything[assign == f]) for f in range(k)]


def minibatches(indices, batch_size: int, seed) -> list[np.ndarray]:
    """Shuffle once and cut into batches; the last short batch is kept."""
    if batch_size < 2:
        raise ValueError("batch size must be >= 2")
    perm = np.random.default_rng(seed).permutation(np.asarray(indices))
    return [perm[s:s + batch_size] for s in range(0, len(perm), batch_size)]


# -- synthetic data with a known group-dependent mechanism -----------------

SYNTH_TARGET = "label"
SYNTH_PROTECTED = "group"


def synth_table(n: int, p: int = 8, beta: float = 2.0, noise: float = 1.0, seed: int = 0,
                shift: float = 1.0) -> tuple[RawTable, DatasetManifest]:
    """Raw synthetic table and its manifest (see :func:`synth_biased`)."""
    if p < 4:
        raise ValueError("p must be >= 4")
    if beta < 0 or noise < 0:
        raise ValueError("beta and noise must be non-negative")
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 2, size=n)
    X = rng.normal(size=(n, p))
    # the last feature is a group proxy; it has no direct effect on the label
    X[:, p - 1] += shift * (a - 0.5)
    shared = np.zeros(p)
    k = np.arange(p - 3)
    shared[2:p - 1] = np.where(k % 2 == 0, 1.0, -1.0) * 1.5 / (1.0 + 0.5 * k)
    sign = np.where(a == 0, 1.0, -1.0)
    z = X @ shared + beta * sign * (X[:, 0] - X[:, 1])
    if noise > 0:
        z = z + noise * rng.logistic(size=n)
    y = (z > 0).astype(np.int64)
    cols = {f"x{j}": X[:, j].copy() for j in range(p)}
    cols[SYNTH_TARGET] = np.array([str(v) for v in y], dtype=object)
    cols[SYNTH_PROTECTED] = np.array([str(v) for v in a], dtype=object)
    table = RawTable(cols, LoadReport(rows_read=n))
    manifest = DatasetManifest(
        name=f"synth_n{n}_p{p}_beta{beta:g}_seed{seed}", csv="synth.csv",
        target=SYNTH_TARGET, positive_label="1", protected=SYNTH_PROTECTED, group1_value="1",
        notes="synthetic: features x0/x1 act with opposite signs per group",
    )
    return table, manifest


def synth_biased(n: int, p: int = 8, beta: float = 2.0, noise: float = 1.0, seed: int = 0,
                 shift: float = 1.0) -> Dataset:
    """Synthetic data whose label mechanism differs by group.

    a ~ Bernoulli(0.5); x ~ N(mu_a, I) where only the last feature carries a
    group mean shift; the label logit uses shared coefficients on features
    2..p-2 plus (+beta, -beta) on (x0, x1) for group 0 and (-beta, +beta)
    for group 1, with logistic noise of scale ``noise``.  beta = 0 gives a
    group-invariant mechanism.
    """
    table, manifest = synth_table(n, p, beta, noise, seed, shift)
    return preprocess(table, manifest)


def write_table(raw: RawTable, path, columns: Sequence[str] | None = None) -> None:
    columns = list(columns or raw.columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in range(raw.n_rows):
            row = []
            for c in columns:
                v = raw.columns[c][r]
                row.append("" if v is None else (repr(float(v)) if isinstance(v, float) else v))
            w.writerow(row)
