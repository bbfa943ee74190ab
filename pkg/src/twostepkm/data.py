"""Domain types shared by every estimator, plus CSV ingestion.

A :class:`CensoredSample` is stored column-wise: observed durations ``q``,
event indicators ``delta`` (True when the outcome is observed, i.e. not
censored), a covariate matrix ``x`` of shape ``(n, k)`` and the optional
binary columns ``t`` (treatment), ``z`` (instrument), ``g`` (DID group) and
``period`` (DID time index).
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .exceptions import ValidationError

#: Absolute slack for floating-point mass identities.
EPS_NUM = 1e-10

BINARY_COLUMNS = ("t", "z", "g", "period")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class Estimand(str, Enum):
    ATE = "ATE"
    DTE = "DTE"
    QTE = "QTE"
    LATE = "LATE"
    LDTE = "LDTE"
    LQTE = "LQTE"
    ATT = "ATT"
    DTT = "DTT"
    QTT = "QTT"

    @property
    def family(self) -> str:
        if self in (Estimand.ATE, Estimand.DTE, Estimand.QTE):
            return "unconfounded"
        if self in (Estimand.LATE, Estimand.LDTE, Estimand.LQTE):
            return "late"
        return "cic"

    @property
    def is_scalar(self) -> bool:
        return self in (Estimand.ATE, Estimand.LATE, Estimand.ATT)

    @property
    def over_quantiles(self) -> bool:
        return self in (Estimand.QTE, Estimand.LQTE, Estimand.QTT)


@dataclass(frozen=True)
class Observation:
    q: float
    delta: bool
    x: tuple[float, ...] = ()
    t: int | None = None
    z: int | None = None
    g: int | None = None
    period: int | None = None


@dataclass(frozen=True, eq=False)
class CensoredSample:
    """Immutable column-oriented sample of right-censored observations.

    ``schema`` lists which optional binary columns are present, in the
    canonical order ``t, z, g, period``.
    """

    q: np.ndarray
    delta: np.ndarray
    x: np.ndarray | None = None
    t: np.ndarray | None = None
    z: np.ndarray | None = None
    g: np.ndarray | None = None
    period: np.ndarray | None = None

    def __post_init__(self):
        q = np.array(self.q, dtype=float).ravel()
        n = q.size
        if n == 0:
            raise ValidationError("sample is empty")
        if not np.all(np.isfinite(q)):
            raise ValidationError("q must be finite")
        object.__setattr__(self, "q", _frozen(q))
        object.__setattr__(self, "delta", _frozen(_as_binary(self.delta, "delta", n).astype(bool)))

        x = np.zeros((n, 0)) if self.x is None else np.array(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(n, -1) if x.size else np.zeros((n, 0))
        if x.ndim != 2 or x.shape[0] != n:
            raise ValidationError(f"covariate matrix must have {n} rows, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValidationError("covariates must be finite")
        object.__setattr__(self, "x", _frozen(x))

        for name in BINARY_COLUMNS:
            col = getattr(self, name)
            if col is not None:
                object.__setattr__(self, name, _frozen(_as_binary(col, name, n).astype(np.int8)))

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def k(self) -> int:
        return self.x.shape[1]

    @property
    def schema(self) -> tuple[str, ...]:
        return tuple(c for c in BINARY_COLUMNS if getattr(self, c) is not None)

    @property
    def censoring_fraction(self) -> float:
        return float(1.0 - self.delta.mean())

    def take(self, index) -> CensoredSample:
        """Rows selected by an integer index array or boolean mask."""
        index = np.asarray(index)
        kwargs = {c: (None if getattr(self, c) is None else getattr(self, c)[index]) for c in BINARY_COLUMNS}
        return CensoredSample(q=self.q[index], delta=self.delta[index], x=self.x[index], **kwargs)

    def replace(self, **columns) -> CensoredSample:
        current = {"q": self.q, "delta": self.delta, "x": self.x}
        current.update({c: getattr(self, c) for c in BINARY_COLUMNS})
        current.update(columns)
        return CensoredSample(**current)

    def observations(self) -> Iterator[Observation]:
        for i in range(self.n):
            yield Observation(
                q=float(self.q[i]),
                delta=bool(self.delta[i]),
                x=tuple(float(v) for v in self.x[i]),
                **{c: (None if getattr(self, c) is None else int(getattr(self, c)[i])) for c in BINARY_COLUMNS},
            )

    @classmethod
    def from_observations(cls, observations: Sequence[Observation]) -> CensoredSample:
        observations = list(observations)
        if not observations:
            raise ValidationError("sample is empty")
        dims = {len(o.x) for o in observations}
        if len(dims) != 1:
            raise ValidationError("observations disagree on covariate dimension")
        cols = {}
        for c in BINARY_COLUMNS:
            present = [getattr(o, c) is not None for o in observations]
            if any(present) and not all(present):
                raise ValidationError(f"column {c!r} present on some observations only")
            cols[c] = [getattr(o, c) for o in observations] if all(present) else None
        return cls(
            q=[o.q for o in observations],
            delta=[int(o.delta) for o in observations],
            x=np.array([o.x for o in observations], dtype=float).reshape(len(observations), dims.pop()),
            **cols,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, CensoredSample):
            return NotImplemented
        if self.schema != other.schema or self.x.shape != other.x.shape:
            return False
        pairs = [("q", self.q, other.q), ("delta", self.delta, other.delta), ("x", self.x, other.x)]
        pairs += [(c, getattr(self, c), getattr(other, c)) for c in self.schema]
        return all(np.array_equal(a, b) for _, a, b in pairs)

    __hash__ = None


def _as_binary(values, name: str, n: int) -> np.ndarray:
    arr = np.asarray(values)
    if arr.shape != (n,):
        raise ValidationError(f"column {name!r} must have length {n}")
    if arr.dtype == bool:
        return arr.astype(np.int8)
    try:
        f = arr.astype(float)
    except (TypeError, ValueError):
        raise ValidationError(f"non-binary indicator in column {name!r}") from None
    if not np.all((f == 0) | (f == 1)):
        raise ValidationError(f"non-binary indicator in column {name!r}")
    return f.astype(np.int8)


@dataclass(frozen=True, eq=False)
class StepDistribution:
    """Right-continuous step CDF given by atoms ``jump_points`` and ``masses``.

    Total mass may differ from one: it falls short when the largest
    observation of a group is censored, and inverse-probability-weighted
    estimates may overshoot slightly in finite samples.
    """

    jump_points: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        pts = np.array(self.jump_points, dtype=float).ravel()
        m = np.array(self.masses, dtype=float).ravel()
        if pts.shape != m.shape:
            raise ValidationError("jump_points and masses differ in length")
        if pts.size == 0:
            raise ValidationError("a step distribution needs at least one atom")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(m))):
            raise ValidationError("non-finite atom or mass")
        if np.any(np.diff(pts) <= 0):
            raise ValidationError("jump points must be strictly ascending")
        if np.any(m <= 0):
            raise ValidationError("masses must be positive")
        object.__setattr__(self, "jump_points", _frozen(pts))
        object.__setattr__(self, "masses", _frozen(m))

    @cached_property
    def cumulative(self) -> np.ndarray:
        return _frozen(np.cumsum(self.masses))

    @property
    def total_mass(self) -> float:
        return float(self.cumulative[-1])

    def is_defective(self, eps: float = EPS_NUM) -> bool:
        return self.total_mass < 1.0 - eps

    def __len__(self) -> int:
        return self.jump_points.size


@dataclass(frozen=True, eq=False)
class EffectCurve:
    """Estimates of one estimand on a grid of outcome levels or quantile levels.

    Scalar estimands (ATE, LATE, ATT) use a length-one grid holding ``nan``.
    """

    grid: np.ndarray
    estimates: np.ndarray
    estimand_kind: Estimand
    band_halfwidth: float | None = None
    alpha: float | None = None
    diagnostics: Mapping = field(default_factory=dict)

    def __post_init__(self):
        grid = np.array(self.grid, dtype=float).ravel()
        est = np.array(self.estimates, dtype=float).ravel()
        if grid.shape != est.shape:
            raise ValidationError("grid and estimates differ in length")
        if grid.size > 1 and np.any(np.diff(grid) < 0):
            raise ValidationError("grid must be ascending")
        if self.band_halfwidth is not None and not self.band_halfwidth >= 0:
            raise ValidationError("band half-width must be nonnegative")
        if self.alpha is not None and not 0 < self.alpha < 1:
            raise ValidationError("alpha must lie in (0, 1)")
        object.__setattr__(self, "grid", _frozen(grid))
        object.__setattr__(self, "estimates", _frozen(est))
        object.__setattr__(self, "estimand_kind", Estimand(self.estimand_kind))

    @classmethod
    def scalar(cls, value: float, kind: Estimand, **kwargs) -> EffectCurve:
        return cls(grid=[math.nan], estimates=[value], estimand_kind=kind, **kwargs)

    @property
    def value(self) -> float:
        """The single estimate of a scalar estimand."""
        if self.estimates.size != 1:
            raise ValueError(f"{self.estimand_kind.value} curve has {self.estimates.size} points")
        return float(self.estimates[0])

    def with_band(self, halfwidth: float, alpha: float) -> EffectCurve:
        return EffectCurve(self.grid, self.estimates, self.estimand_kind, float(halfwidth), alpha, self.diagnostics)

    @property
    def lower(self) -> np.ndarray | None:
        return None if self.band_halfwidth is None else self.estimates - self.band_halfwidth

    @property
    def upper(self) -> np.ndarray | None:
        return None if self.band_halfwidth is None else self.estimates + self.band_halfwidth

    def __len__(self) -> int:
        return self.grid.size


# ---------------------------------------------------------------------------
# CSV input/output
# ---------------------------------------------------------------------------

def _is_covariate_column(name: str) -> bool:
    return name.startswith("x") and name[1:].isdigit() and int(name[1:]) >= 1


def load_csv(path, schema_hint: Mapping[str, str] | None = None) -> CensoredSample:
    """Read a comma-separated file with a header row.

    Columns are ``q``, ``delta`` (required), ``t``, ``z``, ``g``, ``period``
    (optional) and covariates ``x1 ... xk``. ``schema_hint`` maps canonical
    names to the names used in the file, e.g. ``{"q": "duration"}``; any
    canonical name listed there must be present. Unknown columns are
    ignored with a warning.
    """
    hint = dict(schema_hint or {})
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"{path}: file not found")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        rows = [r for r in reader if r and any(cell.strip() for cell in r)]
    if not rows:
        raise ValidationError(f"{path}: no data rows")

    rename = {v: k for k, v in hint.items()}
    canonical = [rename.get(h, h) for h in header]
    if len(set(canonical)) != len(canonical):
        raise ValidationError(f"{path}: duplicate column names")
    for required in ("q", "delta", *hint):
        if required not in canonical:
            raise ValidationError(f"{path}: missing column {hint.get(required, required)!r}")

    known = {"q", "delta", *BINARY_COLUMNS}
    xcols = sorted((c for c in canonical if _is_covariate_column(c)), key=lambda c: int(c[1:]))
    if xcols and [int(c[1:]) for c in xcols] != list(range(1, len(xcols) + 1)):
        raise ValidationError(f"{path}: covariate columns must be x1..xk without gaps")
    extra = [h for h, c in zip(header, canonical) if c not in known and c not in xcols]
    if extra:
        warnings.warn(f"{path}: ignoring unrecognised columns {extra}", stacklevel=2)

    pos = {c: i for i, c in enumerate(canonical)}
    for lineno, r in enumerate(rows, start=2):
        if len(r) != len(header):
            raise ValidationError(f"{path}:{lineno}: expected {len(header)} fields, got {len(r)}")

    def column(name: str, numeric_kind: str) -> np.ndarray:
        out = np.empty(len(rows))
        for lineno, r in enumerate(rows, start=2):
            cell = r[pos[name]].strip()
            if cell == "":
                raise ValidationError(f"{path}:{lineno}: missing value in column {name!r}")
            try:
                out[lineno - 2] = float(cell)
            except ValueError:
                if numeric_kind == "binary":
                    raise ValidationError(f"{path}:{lineno}: non-binary indicator in column {name!r}") from None
                raise ValidationError(f"{path}:{lineno}: non-numeric value {cell!r} in column {name!r}") from None
        return out

    x = np.column_stack([column(c, "real") for c in xcols]) if xcols else None
    optional = {c: column(c, "binary") for c in BINARY_COLUMNS if c in pos}
    return CensoredSample(q=column("q", "real"), delta=column("delta", "binary"), x=x, **optional)


def write_csv(sample: CensoredSample, path) -> None:
    """Write ``sample`` so that :func:`load_csv` reads back an equal sample.

    ``path`` may also be an open text stream.
    """
    if hasattr(path, "write"):
        _write_rows(sample, path)
        return
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        _write_rows(sample, fh)


def _write_rows(sample: CensoredSample, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["q", "delta", *sample.schema, *(f"x{j + 1}" for j in range(sample.k))])
    for i in range(sample.n):
        row = [format(sample.q[i], ".17g"), int(sample.delta[i])]
        row += [int(getattr(sample, c)[i]) for c in sample.schema]
        row += [format(v, ".17g") for v in sample.x[i]]
        w.writerow(row)


# ---------------------------------------------------------------------------
# Estimand-specific requirements
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Check:
    requirement: str
    passed: bool
    message: str = ""


@dataclass(frozen=True)
class SampleDiagnostics:
    estimand: Estimand
    counts: dict
    censoring: dict
    checks: tuple[Check, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    def raise_for_failure(self) -> None:
        if not self.passed:
            raise ValidationError("; ".join(c.message for c in self.failures))

    def to_dict(self) -> dict:
        return {
            "estimand": self.estimand.value,
            "counts": self.counts,
            "censoring": self.censoring,
            "checks": [{"requirement": c.requirement, "passed": c.passed, "message": c.message} for c in self.checks],
        }


def _cells(sample: CensoredSample, a: str, b: str | None = None) -> dict:
    """Boolean masks keyed by cell label, e.g. ``"t=1"`` or ``"g=0,period=1"``."""
    cols_a = getattr(sample, a)
    if b is None:
        return {f"{a}={v}": cols_a == v for v in (1, 0)}
    cols_b = getattr(sample, b)
    return {f"{a}={u},{b}={v}": (cols_a == u) & (cols_b == v) for u in (0, 1) for v in (0, 1)}


def validate_for_estimand(sample: CensoredSample, estimand) -> SampleDiagnostics:
    """Check that ``sample`` carries what the estimator for ``estimand`` needs.

    Never raises for data problems; inspect ``passed`` or call
    ``raise_for_failure``.
    """
    kind = Estimand(str(estimand).upper() if not isinstance(estimand, Estimand) else estimand)
    checks: list[Check] = []
    counts: dict = {"n": sample.n}
    censoring: dict = {"overall": sample.censoring_fraction}

    def need_column(col: str, message: str) -> bool:
        ok = getattr(sample, col) is not None
        checks.append(Check(f"column {col}", ok, "" if ok else message))
        return ok

    def record(cells: dict, required: bool, label: str) -> None:
        for name, mask in cells.items():
            m = int(mask.sum())
            counts[name] = m
            censoring[name] = float(1 - sample.delta[mask].mean()) if m else None
            if required:
                ok = m > 0 and bool(sample.delta[mask].any())
                msg = "" if ok else (f"{label} cell {name} is empty" if m == 0 else f"{label} cell {name} has no uncensored observations")
                checks.append(Check(f"cell {name}", ok, msg))

    family = kind.family
    if family == "unconfounded":
        if need_column("t", "treatment column required"):
            record(_cells(sample, "t"), True, "treatment")
    elif family == "late":
        has_t = need_column("t", "treatment column required")
        has_z = need_column("z", "instrument column required")
        if has_t and has_z:
            record(_cells(sample, "t"), True, "treatment")
            record(_cells(sample, "z"), False, "instrument")
            for v in (0, 1):
                ok = counts[f"z={v}"] > 0
                checks.append(Check(f"cell z={v}", ok, "" if ok else f"instrument cell z={v} is empty"))
            record(_cells(sample, "t", "z"), False, "treatment-instrument")
    else:
        has_g = need_column("g", "group column g required")
        has_p = need_column("period", "period column required")
        if has_g and has_p:
            # every (group, period) cell must have positive probability
            record(_cells(sample, "g", "period"), True, "group-period")
    return SampleDiagnostics(kind, counts, censoring, tuple(checks))
