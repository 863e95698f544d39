"""Mixed-type data ingestion and preprocessing.

Variables are always held in canonical order: continuous first, then
binary, then nominal. That order is the order of the latent vector the
sampler works on, so every index into a dataset's schema is also an index
into its :class:`LatentLayout`.
"""

from __future__ import annotations

import csv
import enum
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

MISSING_TOKENS = frozenset({"", "na", "nan", "n/a", "null", "none", "?", "."})


def format_number(x) -> str:
    """Shortest round-tripping text for a float, numpy scalars included."""
    return repr(float(x))


class DataError(ValueError):
    """Base class for ingestion errors."""


class UnknownLevel(DataError):
    def __init__(self, variable: str, value: str):
        super().__init__(f"variable {variable!r}: unknown level {value!r}")
        self.variable = variable
        self.value = value


class SchemaMismatch(DataError):
    pass


class EmptyDataset(DataError):
    pass


class ZeroVariance(DataError):
    def __init__(self, variable: str):
        super().__init__(f"variable {variable!r} has zero variance")
        self.variable = variable


class Kind(str, enum.Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"
    NOMINAL = "nominal"


_KIND_RANK = {Kind.CONTINUOUS: 0, Kind.BINARY: 1, Kind.NOMINAL: 2}


@dataclass(frozen=True)
class VariableSpec:
    """One observed variable.

    ``role="snp"`` marks a genotype coded as (dominant homozygous,
    recessive homozygous, heterozygous), in that level order; only such
    variables are eligible for :func:`merge_rare_levels`.
    """

    name: str
    kind: Kind
    levels: tuple[str, ...] = ()
    role: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "levels", tuple(str(lv) for lv in self.levels))
        if len(set(self.levels)) != len(self.levels):
            raise SchemaMismatch(f"variable {self.name!r}: duplicate level labels")
        n = len(self.levels)
        if self.kind is Kind.CONTINUOUS and n:
            raise SchemaMismatch(f"variable {self.name!r}: continuous variables take no levels")
        if self.kind is Kind.BINARY and n != 2:
            raise SchemaMismatch(f"variable {self.name!r}: binary needs exactly 2 levels, got {n}")
        if self.kind is Kind.NOMINAL and n < 3:
            raise SchemaMismatch(f"variable {self.name!r}: nominal needs at least 3 levels, got {n}")

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def width(self) -> int:
        """Number of latent dimensions this variable occupies."""
        if self.kind is Kind.NOMINAL:
            return self.n_levels - 1
        return 1


def canonical_order(schema: Sequence[VariableSpec]) -> list[int]:
    """Stable permutation putting continuous, binary, nominal in that order."""
    return sorted(range(len(schema)), key=lambda j: _KIND_RANK[schema[j].kind])


@dataclass(frozen=True)
class LatentLayout:
    offsets: np.ndarray
    widths: np.ndarray
    D: int

    @classmethod
    def from_schema(cls, schema: Sequence[VariableSpec]) -> "LatentLayout":
        widths = np.array([v.width for v in schema], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(widths)[:-1]]).astype(np.int64)
        return cls(offsets=offsets, widths=widths, D=int(widths.sum()))

    def dims(self, variables: Iterable[int]) -> np.ndarray:
        """Latent column indices for the given variable indices, ascending."""
        cols = [np.arange(self.offsets[j], self.offsets[j] + self.widths[j]) for j in variables]
        if not cols:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate(cols))

    def owner(self) -> np.ndarray:
        """Variable index owning each latent dimension."""
        return np.repeat(np.arange(len(self.widths)), self.widths)


@dataclass(frozen=True)
class MixedDataset:
    """Complete-case mixed data in canonical variable order.

    ``codes`` has one column per categorical variable (binary block, then
    nominal block); each entry indexes into that variable's ``levels``.
    """

    schema: tuple[VariableSpec, ...]
    continuous: np.ndarray
    codes: np.ndarray
    ids: tuple[str, ...] | None = None
    n_dropped: int = 0
    dropped_variables: tuple[str, ...] = field(default=())

    def __post_init__(self):
        schema = tuple(self.schema)
        object.__setattr__(self, "schema", schema)
        kinds = [v.kind for v in schema]
        if [_KIND_RANK[k] for k in kinds] != sorted(_KIND_RANK[k] for k in kinds):
            raise SchemaMismatch("schema is not in canonical order (continuous, binary, nominal)")
        cont = np.asarray(self.continuous, dtype=float)
        codes = np.asarray(self.codes, dtype=np.int64)
        n = cont.shape[0] if cont.ndim == 2 else codes.shape[0]
        cont = cont.reshape(n, -1)
        codes = codes.reshape(n, -1)
        a = kinds.count(Kind.CONTINUOUS)
        if cont.shape[1] != a or codes.shape[1] != len(schema) - a:
            raise SchemaMismatch("value matrices do not match schema")
        for c, v in enumerate(schema[a:]):
            col = codes[:, c]
            if col.size and (col.min() < 0 or col.max() >= v.n_levels):
                raise SchemaMismatch(f"variable {v.name!r}: code out of range")
        if self.ids is not None and len(self.ids) != n:
            raise SchemaMismatch("ids length does not match rows")
        cont.setflags(write=False)
        codes.setflags(write=False)
        object.__setattr__(self, "continuous", cont)
        object.__setattr__(self, "codes", codes)

    @property
    def N(self) -> int:
        return self.codes.shape[0]

    @property
    def A(self) -> int:
        return self.continuous.shape[1]

    @property
    def B(self) -> int:
        return sum(v.kind is Kind.BINARY for v in self.schema)

    @property
    def C(self) -> int:
        return sum(v.kind is Kind.NOMINAL for v in self.schema)

    @property
    def J(self) -> int:
        return len(self.schema)

    @property
    def layout(self) -> LatentLayout:
        return LatentLayout.from_schema(self.schema)

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.schema]

    def row_ids(self) -> list[str]:
        if self.ids is not None:
            return list(self.ids)
        return [str(i) for i in range(self.N)]

    def codes_of(self, j: int) -> np.ndarray:
        """Codes of categorical variable ``j`` (index into ``schema``)."""
        return self.codes[:, j - self.A]

    def labels(self) -> list[list[str]]:
        """Decode the table back to level labels, row major."""
        rows = []
        for i in range(self.N):
            row = [format_number(x) for x in self.continuous[i]]
            row += [v.levels[c] for v, c in zip(self.schema[self.A:], self.codes[i])]
            rows.append(row)
        return rows

    def subset(self, variables: Sequence[int]) -> "MixedDataset":
        """Dataset restricted to the given variable indices (kept in canonical order)."""
        variables = sorted(variables)
        cont = [j for j in variables if j < self.A]
        cat = [j - self.A for j in variables if j >= self.A]
        return replace(
            self,
            schema=tuple(self.schema[j] for j in variables),
            continuous=self.continuous[:, cont],
            codes=self.codes[:, cat],
        )


def read_schema(path) -> tuple[list[VariableSpec], str | None]:
    """Read a YAML (or JSON) schema sidecar.

    Expected layout::

        id_column: id            # optional
        variables:
          - {name: bmi, kind: continuous}
          - {name: rs123, kind: nominal, levels: [GG, CC, CG], role: snp}
    """
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict) or "variables" not in doc:
        raise SchemaMismatch(f"{path}: schema must be a mapping with a 'variables' list")
    specs = []
    for entry in doc["variables"]:
        try:
            specs.append(
                VariableSpec(
                    name=str(entry["name"]),
                    kind=Kind(entry["kind"]),
                    levels=tuple(entry.get("levels", ())),
                    role=entry.get("role"),
                )
            )
        except (KeyError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise SchemaMismatch(f"{path}: bad variable entry {entry!r}: {exc}") from exc
    return specs, doc.get("id_column")


def write_schema(path, schema: Sequence[VariableSpec], id_column: str | None = None) -> None:
    entries = []
    for v in schema:
        entry = {"name": v.name, "kind": v.kind.value}
        if v.levels:
            entry["levels"] = list(v.levels)
        if v.role:
            entry["role"] = v.role
        entries.append(entry)
    doc = {"variables": entries}
    if id_column:
        doc = {"id_column": id_column, **doc}
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


def _is_missing(cell: str) -> bool:
    return cell.strip().lower() in MISSING_TOKENS


def load_csv(
    path,
    schema: Sequence[VariableSpec],
    id_column: str | None = None,
    max_missing: int | None = None,
    drop_unobserved_levels: bool = True,
) -> MixedDataset:
    """Read a headed CSV into a complete-case :class:`MixedDataset`.

    Variable-level filters run before row filtering: a categorical
    variable with more than ``max_missing`` missing cells is dropped, and
    (when ``drop_unobserved_levels``) so is any categorical variable with a
    level that never occurs. Rows with any remaining missing or
    unparseable cell are then dropped and counted in ``n_dropped``.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyDataset(f"{path}: no header row") from None
        rows = [r for r in reader if r]

    wanted = [v.name for v in schema] + ([id_column] if id_column else [])
    missing_cols = [c for c in wanted if c not in header]
    if missing_cols:
        raise SchemaMismatch(f"{path}: columns {missing_cols} not in header")
    extra = [c for c in header if c not in wanted]
    if extra:
        raise SchemaMismatch(f"{path}: header has columns not in schema: {extra}")
    if len(set(header)) != len(header):
        raise SchemaMismatch(f"{path}: duplicate header names")
    col = {name: k for k, name in enumerate(header)}
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise SchemaMismatch(f"{path}: row {r + 2} has {len(row)} cells, expected {len(header)}")

    keep_vars = []
    dropped_vars = []
    for v in schema:
        cells = [row[col[v.name]] for row in rows]
        if v.kind is not Kind.CONTINUOUS:
            n_miss = sum(_is_missing(c) for c in cells)
            if max_missing is not None and n_miss > max_missing:
                dropped_vars.append(v.name)
                warnings.warn(f"dropping {v.name!r}: {n_miss} missing values > {max_missing}")
                continue
            seen = set()
            for c in cells:
                if not _is_missing(c):
                    c = c.strip()
                    if c not in v.levels:
                        raise UnknownLevel(v.name, c)
                    seen.add(c)
            if drop_unobserved_levels and len(seen) < v.n_levels:
                dropped_vars.append(v.name)
                absent = [lv for lv in v.levels if lv not in seen]
                warnings.warn(f"dropping {v.name!r}: levels {absent} never observed")
                continue
        keep_vars.append(v)

    order = canonical_order(keep_vars)
    keep_vars = [keep_vars[k] for k in order]
    cont_vars = [v for v in keep_vars if v.kind is Kind.CONTINUOUS]
    cat_vars = [v for v in keep_vars if v.kind is not Kind.CONTINUOUS]
    level_index = [{lv: k for k, lv in enumerate(v.levels)} for v in cat_vars]

    cont_rows, code_rows, ids = [], [], []
    n_dropped = 0
    for row in rows:
        try:
            xs = []
            for v in cont_vars:
                cell = row[col[v.name]]
                if _is_missing(cell):
                    raise ValueError
                x = float(cell)
                if not np.isfinite(x):
                    raise ValueError
                xs.append(x)
            cs = []
            for v, idx in zip(cat_vars, level_index):
                cell = row[col[v.name]]
                if _is_missing(cell):
                    raise ValueError
                cs.append(idx[cell.strip()])
        except ValueError:
            n_dropped += 1
            continue
        cont_rows.append(xs)
        code_rows.append(cs)
        if id_column:
            ids.append(row[col[id_column]].strip())

    if not cont_rows:
        raise EmptyDataset(f"{path}: no complete rows ({n_dropped} dropped)")
    return MixedDataset(
        schema=tuple(keep_vars),
        continuous=np.array(cont_rows, dtype=float).reshape(len(cont_rows), len(cont_vars)),
        codes=np.array(code_rows, dtype=np.int64).reshape(len(code_rows), len(cat_vars)),
        ids=tuple(ids) if id_column else None,
        n_dropped=n_dropped,
        dropped_variables=tuple(dropped_vars),
    )


def write_csv(path, ds: MixedDataset, id_column: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ([id_column] if id_column else []) + ds.names
        w.writerow(header)
        ids = ds.row_ids()
        for i, row in enumerate(ds.labels()):
            w.writerow(([ids[i]] if id_column else []) + row)


def standardize(ds: MixedDataset) -> tuple[MixedDataset, np.ndarray, np.ndarray]:
    """Centre and scale each continuous column to mean 0, sample sd 1.

    Returns the new dataset together with the column means and sds used,
    so that ``x = z * sd + mean`` inverts the transform.
    """
    if ds.A < 1:
        raise DataError("standardize needs at least one continuous variable")
    x = ds.continuous
    means = x.mean(axis=0)
    sds = x.std(axis=0, ddof=1) if ds.N > 1 else np.zeros(ds.A)
    for j in range(ds.A):
        if not sds[j] > 0 or np.ptp(x[:, j]) == 0:
            raise ZeroVariance(ds.schema[j].name)
    return replace(ds, continuous=(x - means) / sds), means, sds


@dataclass(frozen=True)
class MergeRecord:
    variable: str
    counts: tuple[int, ...]
    action: str


def merge_rare_levels(ds: MixedDataset, threshold: float = 0.10) -> tuple[MixedDataset, list[MergeRecord]]:
    """Collapse sparse recessive-homozygous genotypes into the heterozygous level.

    A 3-level variable with ``role == "snp"`` whose level-1 count is below
    ``threshold * N`` becomes binary with levels
    ``(level0, "level1/level2")``. Other variables pass through untouched.
    """
    schema = list(ds.schema)
    codes = ds.codes.copy()
    log = []
    for j in range(ds.A, ds.J):
        v = schema[j]
        if v.kind is not Kind.NOMINAL or v.n_levels != 3 or v.role != "snp":
            continue
        c = codes[:, j - ds.A]
        counts = tuple(int(n) for n in np.bincount(c, minlength=3))
        if counts[1] < threshold * ds.N:
            schema[j] = VariableSpec(
                name=v.name,
                kind=Kind.BINARY,
                levels=(v.levels[0], f"{v.levels[1]}/{v.levels[2]}"),
                role=v.role,
            )
            codes[:, j - ds.A] = (c > 0).astype(np.int64)
            log.append(MergeRecord(v.name, counts, "merged"))

    order = canonical_order(schema)
    cat_order = [j - ds.A for j in order[ds.A:]]
    merged = replace(
        ds,
        schema=tuple(schema[j] for j in order),
        codes=codes[:, cat_order],
    )
    return merged, log


def write_merge_log(path, log: Sequence[MergeRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variable", "count_0", "count_1", "count_2", "action"])
        for rec in log:
            w.writerow([rec.variable, *rec.counts, rec.action])
