"""Matched-dataset model, CSV ingestion, validation, and balance diagnostics.

A matched dataset is a flat table of units plus a partition of the rows into
matched sets. Each set is expected to contain either exactly one treated or
exactly one control unit; datasets violating that can still be loaded and
inspected (``validate_design`` reports the offenders) but the inference
routines refuse them.

CSV schema (header required)::

    set_id, z, y [, d] [, e_hat] [, p_hat], x1..xK

``set_id`` is an arbitrary string; optional columns are simply absent. Row
numbers in error messages count data rows, excluding the header.
"""
import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DesignError

_RESERVED = ("set_id", "z", "y", "d", "e_hat", "p_hat")


@dataclass(frozen=True)
class MatchedSet:
    """One matched set: unit row indices in input order."""

    label: str
    units: np.ndarray

    @property
    def n(self):
        return len(self.units)

    @property
    def m(self):
        return int(self._m)

    def __post_init__(self):
        self.units.setflags(write=False)
        object.__setattr__(self, "_m", -1)  # filled by the dataset


@dataclass(frozen=True)
class MatchedDataset:
    """Immutable matched dataset: unit columns plus the set partition."""

    z: np.ndarray
    y: np.ndarray
    x: np.ndarray
    sets: tuple
    d: np.ndarray = None
    e_hat: np.ndarray = None
    p_hat: np.ndarray = None
    covariate_names: tuple = None

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.int8)
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(len(z), -1)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        for name in ("d", "e_hat", "p_hat"):
            col = getattr(self, name)
            if col is not None:
                object.__setattr__(self, name, np.asarray(col, dtype=float))
        if self.covariate_names is None:
            object.__setattr__(
                self, "covariate_names",
                tuple(f"x{k + 1}" for k in range(x.shape[1])))

        n_total = len(z)
        seen = np.zeros(n_total, dtype=bool)
        set_index = np.full(n_total, -1, dtype=np.int64)
        for s_pos, s in enumerate(self.sets):
            units = np.asarray(s.units, dtype=np.int64)
            if len(units) < 2:
                raise DesignError(
                    f"set '{s.label}' below minimum size (n={len(units)})")
            if seen[units].any():
                raise DesignError(f"set '{s.label}' overlaps another set")
            seen[units] = True
            set_index[units] = s_pos
            object.__setattr__(s, "_m", int(z[units].sum()))
        if not seen.all():
            missing = int((~seen).sum())
            raise DesignError(f"{missing} unit(s) belong to no matched set")
        object.__setattr__(self, "set_index", set_index)
        object.__setattr__(self, "n_i", np.array([s.n for s in self.sets]))
        object.__setattr__(self, "m_i", np.array([s.m for s in self.sets]))
        for arr in (z, y, x, set_index, self.n_i, self.m_i):
            arr.setflags(write=False)
        for name in ("d", "e_hat", "p_hat"):
            col = getattr(self, name)
            if col is not None:
                col.setflags(write=False)

    @property
    def N(self):
        return len(self.z)

    @property
    def I(self):
        return len(self.sets)


@dataclass(frozen=True)
class BalanceRow:
    """Standardized mean difference of one covariate, pre and post matching."""

    covariate: str
    smd_pre: float
    smd_post: float
    degenerate: bool


def from_arrays(z, y, x, set_labels, d=None, e_hat=None, p_hat=None,
                covariate_names=None):
    """Build a MatchedDataset from columns plus a per-unit set label array.

    Sets are ordered by first appearance; unit order within a set is the
    input row order.
    """
    set_labels = [str(s) for s in set_labels]
    order = {}
    for i, lab in enumerate(set_labels):
        order.setdefault(lab, []).append(i)
    sets = tuple(MatchedSet(lab, np.array(idx, dtype=np.int64))
                 for lab, idx in order.items())
    return MatchedDataset(z=z, y=y, x=x, sets=sets, d=d, e_hat=e_hat,
                          p_hat=p_hat, covariate_names=covariate_names)


def _parse_float(value, row, column):
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise DataError(f"non-numeric value {value!r} in column '{column}'",
                        row=row) from None
    if not math.isfinite(out):
        raise DataError(f"non-finite value {value!r} in column '{column}'",
                        row=row)
    return out


def _covariate_columns(header, schema):
    if schema and "covariates" in schema:
        return list(schema["covariates"])
    named = []
    for col in header:
        if col.startswith("x") and col[1:].isdigit():
            named.append((int(col[1:]), col))
    return [col for _, col in sorted(named)]


def read_table(path, schema=None, require_set_id=True):
    """Parse the CSV schema into plain columns.

    Returns a dict with keys ``set_id`` (list of strings or None), ``z``,
    ``y``, ``x``, ``covariate_names``, and any of ``d``/``e_hat``/``p_hat``
    present in the file.
    """
    schema = schema or {}
    col = {key: schema.get(key, key) for key in _RESERVED}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"empty file: {path}")
        header = [h.strip() for h in reader.fieldnames]
        required = ("set_id", "z", "y") if require_set_id else ("z", "y")
        for key in required:
            if col[key] not in header:
                raise DataError(f"missing column '{col[key]}'")
        has_set = col["set_id"] in header
        xcols = _covariate_columns(header, schema)
        for c in xcols:
            if c not in header:
                raise DataError(f"missing covariate column '{c}'")
        optional = [k for k in ("d", "e_hat", "p_hat") if col[k] in header]

        labels, z, y, x = [], [], [], []
        extra = {k: [] for k in optional}
        for row_no, record in enumerate(reader, start=1):
            if has_set:
                labels.append(record[col["set_id"]])
            zv = _parse_float(record[col["z"]], row_no, col["z"])
            if zv not in (0.0, 1.0):
                raise DataError(f"non-binary z value {record[col['z']]!r}",
                                row=row_no)
            z.append(int(zv))
            y.append(_parse_float(record[col["y"]], row_no, col["y"]))
            x.append([_parse_float(record[c], row_no, c) for c in xcols])
            for k in optional:
                v = _parse_float(record[col[k]], row_no, col[k])
                if k in ("e_hat", "p_hat") and not 0.0 < v < 1.0:
                    raise DataError(
                        f"column '{col[k]}' value {v} outside (0, 1)",
                        row=row_no)
                extra[k].append(v)
    if not z:
        raise DataError(f"empty file: {path} has a header but no data rows")
    table = {
        "set_id": labels if has_set else None,
        "z": np.array(z, dtype=np.int8),
        "y": np.array(y, dtype=float),
        "x": np.array(x, dtype=float) if xcols else np.empty((len(z), 0)),
        "covariate_names": tuple(xcols) or None,
    }
    for k in optional:
        table[k] = np.array(extra[k], dtype=float)
    return table


def load_dataset(path, schema=None):
    """Read a matched dataset from CSV.

    ``schema`` optionally remaps column names, e.g.
    ``{"set_id": "stratum", "z": "treated", "covariates": ["age", "bmi"]}``.
    """
    table = read_table(path, schema, require_set_id=True)
    try:
        return from_arrays(
            table["z"], table["y"], table["x"], table["set_id"],
            d=table.get("d"), e_hat=table.get("e_hat"),
            p_hat=table.get("p_hat"),
            covariate_names=table["covariate_names"])
    except DesignError as exc:
        raise DataError(str(exc)) from None


def save_dataset(ds, path, p_hat=None):
    """Write a matched dataset back to CSV (full float precision).

    Units are emitted set by set, preserving in-set input order, so a
    load/save round trip reproduces the grouping exactly.
    """
    p = ds.p_hat if p_hat is None else np.asarray(p_hat, dtype=float)
    header = ["set_id", "z", "y"]
    for name in ("d", "e_hat"):
        if getattr(ds, name) is not None:
            header.append(name)
    if p is not None:
        header.append("p_hat")
    header.extend(ds.covariate_names)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for s in ds.sets:
            for u in s.units:
                row = [s.label, int(ds.z[u]), repr(float(ds.y[u]))]
                if ds.d is not None:
                    row.append(repr(float(ds.d[u])))
                if ds.e_hat is not None:
                    row.append(repr(float(ds.e_hat[u])))
                if p is not None:
                    row.append(repr(float(p[u])))
                row.extend(repr(float(v)) for v in ds.x[u])
                writer.writerow(row)


def validate_design(ds):
    """Return human-readable violations of the min(m, n-m) = 1 requirement.

    Empty list means every set has exactly one treated or exactly one
    control unit. This is a diagnostic: it never raises.
    """
    violations = []
    for s in ds.sets:
        n, m = s.n, s.m
        if m == 0:
            violations.append(f"set '{s.label}': 0 treated units")
        elif m == n:
            violations.append(f"set '{s.label}': 0 control units")
        elif min(m, n - m) != 1:
            violations.append(
                f"set '{s.label}': min(m, n-m) = {min(m, n - m)}, must be 1")
    return violations


def require_valid_design(ds):
    """Raise DesignError unless every set passes ``validate_design``."""
    violations = validate_design(ds)
    if violations:
        raise DesignError("invalid matched design: " + "; ".join(violations))


def set_weights(ds):
    """Sampling weights w_i = I * n_i / N; they sum to I exactly."""
    require_valid_design(ds)
    return ds.I * ds.n_i / ds.N


def balance_table(ds, pre_matching=None):
    """Standardized mean differences per covariate, before and after matching.

    The denominator for both columns is the pooled standard deviation
    sqrt((s2_T + s2_C) / 2) computed on the pre-matching sample (the full
    matched sample when none is supplied), so the two columns are directly
    comparable. The post-matching numerator is the set-size-weighted mean of
    within-set treated-minus-control covariate means, with weights n_i / N;
    weighting sets equally instead is a defensible alternative the package
    does not implement. A zero pooled SD flags the row as degenerate rather
    than raising.

    ``pre_matching`` is an optional ``(z, x)`` pair of arrays for the
    unmatched sample.
    """
    if ds.x.shape[1] == 0:
        raise DataError("balance table requires at least one covariate")
    if pre_matching is not None:
        pre_z, pre_x = pre_matching
        pre_z = np.asarray(pre_z)
        pre_x = np.asarray(pre_x, dtype=float)
    else:
        pre_z, pre_x = ds.z, ds.x

    xt, xc = pre_x[pre_z == 1], pre_x[pre_z == 0]
    with np.errstate(invalid="ignore"):
        s2t = xt.var(axis=0, ddof=1) if len(xt) > 1 else np.full(pre_x.shape[1], np.nan)
        s2c = xc.var(axis=0, ddof=1) if len(xc) > 1 else np.full(pre_x.shape[1], np.nan)
        pooled = np.sqrt(0.5 * (s2t + s2c))
    diff_pre = xt.mean(axis=0) - xc.mean(axis=0) if len(xt) and len(xc) \
        else np.full(pre_x.shape[1], np.nan)

    # Post-matching: weighted within-set treated/control mean contrasts.
    # Sets lacking one of the arms carry no defined contrast and are skipped;
    # validate_design reports them separately.
    diff_post = np.zeros(ds.x.shape[1])
    for s in ds.sets:
        if s.m == 0 or s.m == s.n:
            continue
        units = s.units
        zt = ds.z[units] == 1
        contrast = ds.x[units][zt].mean(axis=0) - ds.x[units][~zt].mean(axis=0)
        diff_post += (s.n / ds.N) * contrast

    rows = []
    for k, name in enumerate(ds.covariate_names):
        degenerate = not np.isfinite(pooled[k]) or pooled[k] == 0.0
        if degenerate:
            rows.append(BalanceRow(name, float("nan"), float("nan"), True))
        else:
            rows.append(BalanceRow(name, float(diff_pre[k] / pooled[k]),
                                   float(diff_post[k] / pooled[k]), False))
    return rows


def write_balance_csv(rows, path):
    """Emit the balance table as `covariate, smd_pre, smd_post, degenerate`."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["covariate", "smd_pre", "smd_post", "degenerate"])
        for r in rows:
            writer.writerow([r.covariate, f"{r.smd_pre:.6g}",
                             f"{r.smd_post:.6g}", str(r.degenerate).lower()])
