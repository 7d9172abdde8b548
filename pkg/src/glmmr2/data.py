"""Long-format clustered data grouped into independent sampling units."""
from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, DimensionError, DomainError, EmptyInputError, ParseError, SchemaError

INTERCEPT = "(Intercept)"

#: Cells treated as missing; any of them is a hard error.
MISSING = {"", "na", "nan", "null", "none", "."}


@dataclass(frozen=True)
class ObservationRow:
    subject_id: object
    y: float
    x: tuple
    z: tuple
    weight: float = 1.0

    def __post_init__(self):
        if not self.x or self.x[0] != 1.0:
            raise DimensionError("first fixed-effect covariate must be the intercept 1")
        if not self.weight > 0:
            raise DomainError("weight must be positive")


def _frozen(a, ndim):
    a = np.array(a, dtype=float, ndmin=ndim)
    a.setflags(write=False)
    return a


class SubjectBlock:
    """Rows of one sampling unit, stored column-wise.

    ``X`` includes the leading intercept column; ``Z`` is the random-effect
    design of the unit.
    """

    __slots__ = ("subject_id", "y", "X", "Z", "w")

    def __init__(self, subject_id, y, X, Z, w=None):
        y = _frozen(y, 1)
        X = _frozen(X, 2)
        Z = _frozen(Z, 2)
        w = _frozen(np.ones(y.size) if w is None else w, 1)
        p = y.size
        if p < 1:
            raise DimensionError("a subject block needs at least one row")
        if X.shape[0] != p or Z.shape[0] != p or w.size != p:
            raise DimensionError("row counts of y, X, Z and weights disagree")
        if not np.all(X[:, 0] == 1.0):
            raise DimensionError("first fixed-effect column must be the intercept")
        if not np.all(w > 0):
            raise DomainError("weights must be positive")
        self.subject_id = subject_id
        self.y, self.X, self.Z, self.w = y, X, Z, w

    @classmethod
    def from_rows(cls, rows: Sequence[ObservationRow]):
        rows = list(rows)
        if not rows:
            raise DimensionError("a subject block needs at least one row")
        sid = rows[0].subject_id
        if any(r.subject_id != sid for r in rows):
            raise DataError("all rows of a block must share the subject id")
        return cls(
            sid,
            [r.y for r in rows],
            [r.x for r in rows],
            [r.z for r in rows],
            [r.weight for r in rows],
        )

    @property
    def p(self) -> int:
        return self.y.size

    @property
    def rows(self) -> list[ObservationRow]:
        return [
            ObservationRow(self.subject_id, float(y), tuple(x), tuple(z), float(w))
            for y, x, z, w in zip(self.y, self.X, self.Z, self.w)
        ]

    def __len__(self):
        return self.p

    def __eq__(self, other):
        if not isinstance(other, SubjectBlock):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.Z, other.Z)
            and np.array_equal(self.w, other.w)
        )

    def __repr__(self):
        return f"SubjectBlock({self.subject_id!r}, p={self.p})"


@dataclass(frozen=True, eq=False)
class Dataset:
    """``N`` subject blocks with consistent fixed (``q``) and random (``m``) dimensions."""

    blocks: tuple
    x_names: tuple
    z_names: tuple
    _packed: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        blocks = tuple(self.blocks)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "x_names", tuple(self.x_names))
        object.__setattr__(self, "z_names", tuple(self.z_names))
        if not blocks:
            raise EmptyInputError("dataset has no subjects")
        if self.x_names[0] != INTERCEPT:
            raise DimensionError(f"first fixed column must be {INTERCEPT}")
        if len(set(self.x_names)) != len(self.x_names):
            raise DimensionError("duplicate fixed-effect column names")
        q, m = len(self.x_names), len(self.z_names)
        if m < 1:
            raise DimensionError("at least one random effect is required")
        for b in blocks:
            if b.X.shape[1] != q or b.Z.shape[1] != m:
                raise DimensionError(
                    f"subject {b.subject_id!r} has inconsistent covariate dimensions"
                )

    @property
    def N(self) -> int:
        return len(self.blocks)

    @property
    def q(self) -> int:
        return len(self.x_names)

    @property
    def m(self) -> int:
        return len(self.z_names)

    def total_observations(self) -> int:
        return sum(b.p for b in self.blocks)

    @property
    def n(self) -> int:
        return self.total_observations()

    def packed(self):
        """Concatenated ``(y, X, Z, w, starts)`` arrays in block order."""
        if "arrays" not in self._packed:
            y = np.concatenate([b.y for b in self.blocks])
            X = np.ascontiguousarray(np.vstack([b.X for b in self.blocks]))
            Z = np.ascontiguousarray(np.vstack([b.Z for b in self.blocks]))
            w = np.concatenate([b.w for b in self.blocks])
            starts = np.zeros(self.N + 1, dtype=np.intp)
            starts[1:] = np.cumsum([b.p for b in self.blocks])
            for a in (y, X, Z, w, starts):
                a.setflags(write=False)
            self._packed["arrays"] = (y, X, Z, w, starts)
        return self._packed["arrays"]

    def fingerprint(self) -> str:
        """SHA-256 over outcomes, designs, weights, grouping and column names."""
        if "fingerprint" not in self._packed:
            h = hashlib.sha256()
            for a in self.packed():
                h.update(np.ascontiguousarray(a).tobytes())
            h.update(repr((self.x_names, self.z_names)).encode())
            self._packed["fingerprint"] = h.hexdigest()
        return self._packed["fingerprint"]

    def column_index(self, names) -> list[int]:
        idx = []
        for name in names:
            if name not in self.x_names:
                raise SchemaError(name)
            idx.append(self.x_names.index(name))
        return idx

    def with_fixed_column(self, name: str, values) -> "Dataset":
        """Copy with one extra fixed covariate appended (values in block order)."""
        values = np.asarray(values, dtype=float).reshape(-1)
        if values.size != self.n:
            raise DimensionError("new column must have one value per observation")
        if name in self.x_names:
            raise DimensionError(f"column {name!r} already present")
        blocks, k = [], 0
        for b in self.blocks:
            col = values[k:k + b.p, None]
            k += b.p
            blocks.append(SubjectBlock(b.subject_id, b.y, np.hstack([b.X, col]), b.Z, b.w))
        return Dataset(tuple(blocks), self.x_names + (name,), self.z_names)

    def subset(self, indices) -> "Dataset":
        return Dataset(tuple(self.blocks[i] for i in indices), self.x_names, self.z_names)

    def to_csv(self, stream, subject="subject", outcome="y"):
        """Write long format: subject, outcome, fixed covariates, extra random covariates, weight."""
        xcols = list(self.x_names[1:])
        zcols = [c for c in self.z_names if c != INTERCEPT and c not in xcols]
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow([subject, outcome, *xcols, *zcols, "weight"])
        zidx = [self.z_names.index(c) for c in zcols]
        for b in self.blocks:
            for j in range(b.p):
                writer.writerow(
                    [b.subject_id, _fmt(b.y[j])]
                    + [_fmt(v) for v in b.X[j, 1:]]
                    + [_fmt(b.Z[j, k]) for k in zidx]
                    + [_fmt(b.w[j])]
                )


def _fmt(v):
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 1e15 else repr(v)


@dataclass(frozen=True)
class CsvSchema:
    subject: str
    outcome: str
    fixed: tuple = ()
    random_slopes: tuple = ()
    random_intercept: bool = True
    weight: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "fixed", tuple(self.fixed))
        object.__setattr__(self, "random_slopes", tuple(self.random_slopes))


def _parse_float(cell, row, column):
    if cell.strip().lower() in MISSING:
        raise ParseError(row, column, cell, "missing")
    try:
        v = float(cell)
    except ValueError:
        raise ParseError(row, column, cell) from None
    if not math.isfinite(v):
        raise ParseError(row, column, cell)
    return v


def load_long_csv(source, schema: CsvSchema) -> Dataset:
    """Read a header-bearing comma-delimited table into a :class:`Dataset`.

    ``source`` is a binary or text stream (or raw bytes). Blocks keep the
    order in which subject ids first appear and rows keep file order within
    each subject. The intercept column is prepended to ``x`` and, when
    ``schema.random_intercept`` is set, to ``z``.

    Raises
    ------
    SchemaError
        A mapped column is absent from the header.
    ParseError
        A covariate, outcome or weight cell is missing or not a finite number;
        ``row`` is the 1-based data row (header excluded).
    EmptyInputError
        No header or no data rows.
    """
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    if isinstance(source, io.TextIOBase):
        text = source
    else:
        text = io.TextIOWrapper(source, encoding="utf-8-sig", newline="")
    reader = csv.reader(text)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise EmptyInputError("empty table") from None

    if not schema.random_intercept and not schema.random_slopes:
        raise DimensionError("model needs a random intercept or at least one random slope")
    wanted = [schema.subject, schema.outcome, *schema.fixed, *schema.random_slopes]
    if schema.weight:
        wanted.append(schema.weight)
    for col in wanted:
        if col not in header:
            raise SchemaError(col)
    pos = {c: header.index(c) for c in wanted}

    order, grouped = [], {}
    nrows = 0
    for i, cells in enumerate(reader, start=1):
        if not cells or all(not c.strip() for c in cells):
            continue
        if len(cells) < len(header):
            raise ParseError(i, header[len(cells)], "", "missing")
        sid = cells[pos[schema.subject]].strip()
        if sid.lower() in MISSING:
            raise ParseError(i, schema.subject, sid, "missing")
        y = _parse_float(cells[pos[schema.outcome]], i, schema.outcome)
        x = [1.0] + [_parse_float(cells[pos[c]], i, c) for c in schema.fixed]
        z = ([1.0] if schema.random_intercept else []) + [
            _parse_float(cells[pos[c]], i, c) for c in schema.random_slopes
        ]
        w = 1.0
        if schema.weight:
            w = _parse_float(cells[pos[schema.weight]], i, schema.weight)
            if w <= 0:
                raise ParseError(i, schema.weight, cells[pos[schema.weight]], "not positive")
        if sid not in grouped:
            grouped[sid] = []
            order.append(sid)
        grouped[sid].append((y, x, z, w))
        nrows += 1
    if nrows == 0:
        raise EmptyInputError("table has a header but no data rows")

    blocks = []
    for sid in order:
        rows = grouped[sid]
        blocks.append(
            SubjectBlock(
                sid,
                [r[0] for r in rows],
                [r[1] for r in rows],
                [r[2] for r in rows],
                [r[3] for r in rows],
            )
        )
    z_names = ((INTERCEPT,) if schema.random_intercept else ()) + schema.random_slopes
    return Dataset(tuple(blocks), (INTERCEPT,) + schema.fixed, z_names)


def dichotomize_bp(systolic: float, diastolic: float) -> int:
    """Blood-pressure control indicator: 0 if controlled, 1 if uncontrolled.

    Controlled means systolic < 140 mmHg and diastolic < 90 mmHg, both strict.
    """
    for v in (systolic, diastolic):
        if not (math.isfinite(v) and v > 0):
            raise DomainError(f"blood pressure must be finite and positive, got {v!r}")
    return 0 if (systolic < 140.0 and diastolic < 90.0) else 1
