"""Unbalanced multivariate repeated measures datasets.

Each subject is observed on a complete ``t_i x s_i`` product of times and
locations drawn from a common maximal grid. Responses are stored time-major
(time outer, location inner) so that observation ``(j, l)`` sits at position
``j * s_i + l``, matching the block layout of ``Gamma_i (x) Omega_i``.
"""

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DataError,
    DegenerateFactor,
    DimensionMismatch,
    DuplicateObservation,
    EmptyDataset,
    MissingColumn,
    NonNumericCell,
    RaggedSubject,
)

TEMPORAL = "temporal"
SPATIAL = "spatial"


@dataclass(frozen=True)
class SubjectData:
    id: str
    y: np.ndarray
    x: np.ndarray
    times: np.ndarray
    time_grid_idx: np.ndarray
    locs: np.ndarray
    loc_grid_idx: np.ndarray

    def __post_init__(self):
        t, s = len(self.times), len(self.loc_grid_idx)
        if t < 1 or s < 1:
            raise DataError(f"subject {self.id!r} has no observations")
        if self.y.shape != (t * s,) or self.x.shape[0] != t * s:
            raise DimensionMismatch(
                f"subject {self.id!r}: y/x rows must equal t*s = {t * s}"
            )
        if len(self.time_grid_idx) != t or self.locs.shape[0] != s:
            raise DimensionMismatch(f"subject {self.id!r}: grid index lengths disagree")
        if t > 1 and not np.all(np.diff(self.times) > 0):
            raise DataError(f"subject {self.id!r}: times must be strictly increasing")
        for idx in (self.time_grid_idx, self.loc_grid_idx):
            if len(idx) > 1 and not np.all(np.diff(idx) > 0):
                raise DataError(f"subject {self.id!r}: grid indices must be strictly increasing")

    @property
    def t(self) -> int:
        return len(self.times)

    @property
    def s(self) -> int:
        return len(self.loc_grid_idx)

    @property
    def n_obs(self) -> int:
        return self.t * self.s


@dataclass(frozen=True)
class DistanceScale:
    d_min: float
    d_max: float

    def __post_init__(self):
        if not (math.isfinite(self.d_min) and math.isfinite(self.d_max)):
            raise DataError("distance scale must be finite")
        if not 0 < self.d_min <= self.d_max:
            raise DataError(f"invalid distance scale ({self.d_min}, {self.d_max})")

    @property
    def span(self) -> float:
        return self.d_max - self.d_min


@dataclass(frozen=True)
class PatternGroup:
    """Subjects sharing one set of grid cells, stacked for vectorised likelihoods."""

    time_idx: tuple
    loc_idx: tuple
    times: np.ndarray
    locs: np.ndarray
    members: np.ndarray  # subject positions in the dataset
    y: np.ndarray  # (m, t*s)
    x: np.ndarray  # (m, t*s, p)

    @property
    def t(self) -> int:
        return len(self.time_idx)

    @property
    def s(self) -> int:
        return len(self.loc_idx)

    @property
    def size(self) -> int:
        return len(self.members)

    def cells(self, s_max: int) -> np.ndarray:
        """Positions of this pattern's observations in the maximal time-major grid."""
        return (np.asarray(self.time_idx)[:, None] * s_max + np.asarray(self.loc_idx)[None, :]).ravel()

    def time_dists(self) -> np.ndarray:
        return np.abs(self.times[:, None] - self.times[None, :])

    def loc_dists(self) -> np.ndarray:
        diff = self.locs[:, None, :] - self.locs[None, :, :]
        return np.sqrt(np.sum(diff**2, axis=-1))


@dataclass(eq=False)
class Dataset:
    """An immutable collection of subjects on a shared maximal grid.

    ``grid_times`` and ``grid_locs`` describe the maximal grid; a subject's
    ``time_grid_idx``/``loc_grid_idx`` index into them.
    """

    subjects: Sequence[SubjectData]
    grid_times: np.ndarray
    grid_locs: np.ndarray
    loc_ids: Optional[Sequence[str]] = None
    covariate_names: Sequence[str] = ()
    intercept: bool = True
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        self.subjects = tuple(self.subjects)
        if not self.subjects:
            raise EmptyDataset("dataset has no subjects")
        self.grid_times = np.asarray(self.grid_times, dtype=float)
        self.grid_locs = np.asarray(self.grid_locs, dtype=float)
        if self.grid_locs.ndim == 1:
            self.grid_locs = self.grid_locs[:, None]
        if self.loc_ids is None:
            self.loc_ids = [str(k) for k in range(self.grid_locs.shape[0])]
        self.loc_ids = list(self.loc_ids)
        ps = {sub.x.shape[1] for sub in self.subjects}
        if len(ps) != 1:
            raise DimensionMismatch("all subjects need the same number of design columns")
        self.p = ps.pop()
        for sub in self.subjects:
            if sub.time_grid_idx.max() >= self.t_max or sub.loc_grid_idx.max() >= self.s_max:
                raise DataError(f"subject {sub.id!r} indexes outside the maximal grid")
            if not np.allclose(self.grid_times[sub.time_grid_idx], sub.times):
                raise DataError(f"subject {sub.id!r}: times disagree with the grid")
            if not np.allclose(self.grid_locs[sub.loc_grid_idx], sub.locs):
                raise DataError(f"subject {sub.id!r}: coordinates disagree with the grid")
        self.warnings = list(self.warnings)
        if self.N <= self.max_ts:
            self.warnings.append(
                f"N = {self.N} subjects does not exceed max(t_i s_i) = {self.max_ts}; "
                "the test assumes N > max(t_i s_i)"
            )
        self._patterns = None
        self._scales = {}

    @property
    def N(self) -> int:
        return len(self.subjects)

    @property
    def n(self) -> int:
        return sum(sub.n_obs for sub in self.subjects)

    @property
    def t_max(self) -> int:
        return len(self.grid_times)

    @property
    def s_max(self) -> int:
        return self.grid_locs.shape[0]

    @property
    def max_ts(self) -> int:
        return max(sub.n_obs for sub in self.subjects)

    @property
    def patterns(self) -> list:
        if self._patterns is None:
            self._patterns = _group_patterns(self.subjects)
        return self._patterns

    def digest(self) -> dict:
        return {
            "rows": self.n,
            "N": self.N,
            "n": self.n,
            "p": self.p,
            "t_max": self.t_max,
            "s_max": self.s_max,
            "max_ts": self.max_ts,
        }


def _group_patterns(subjects) -> list:
    groups = {}
    for pos, sub in enumerate(subjects):
        key = (tuple(int(k) for k in sub.time_grid_idx), tuple(int(k) for k in sub.loc_grid_idx))
        groups.setdefault(key, []).append(pos)
    out = []
    for key in sorted(groups):
        members = groups[key]
        first = subjects[members[0]]
        out.append(
            PatternGroup(
                time_idx=key[0],
                loc_idx=key[1],
                times=np.asarray(first.times, dtype=float),
                locs=np.asarray(first.locs, dtype=float),
                members=np.asarray(members),
                y=np.stack([subjects[m].y for m in members]),
                x=np.stack([subjects[m].x for m in members]),
            )
        )
    return out


def residuals(subject: SubjectData, beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (subject.x.shape[1],):
        raise DimensionMismatch(
            f"beta has length {beta.size}, design has {subject.x.shape[1]} columns"
        )
    return subject.y - subject.x @ beta


def distance_scale(dataset: Dataset, factor: str) -> DistanceScale:
    """Smallest and largest within-subject pairwise distance on one factor."""
    if factor not in (TEMPORAL, SPATIAL):
        raise ValueError(f"factor must be {TEMPORAL!r} or {SPATIAL!r}")
    if factor in dataset._scales:
        return dataset._scales[factor]
    lo, hi = math.inf, -math.inf
    for pat in dataset.patterns:
        d = pat.time_dists() if factor == TEMPORAL else pat.loc_dists()
        if d.shape[0] < 2:
            continue
        off = d[np.triu_indices(d.shape[0], 1)]
        lo = min(lo, float(off.min()))
        hi = max(hi, float(off.max()))
    if not math.isfinite(lo):
        raise DegenerateFactor(
            f"no subject has two distinct {factor} points; the {factor} correlation is not estimable"
        )
    if lo <= 0:
        raise DataError(f"two {factor} points of one subject coincide (distance 0)")
    scale = DistanceScale(lo, hi)
    dataset._scales[factor] = scale
    return scale


# -- CSV --------------------------------------------------------------------

@dataclass(frozen=True)
class CsvOptions:
    subject: str = "subject"
    y: str = "y"
    time: str = "time"
    loc: str = "loc"
    coords: Optional[Sequence[str]] = None  # default: every column starting with "loc_"
    covariates: Optional[Sequence[str]] = None  # default: every remaining column
    intercept: bool = True


def _sort_key_factory(values):
    try:
        [float(v) for v in values]
    except ValueError:
        return lambda v: (v,)
    return lambda v: (float(v), v)


def _number(text, row, col):
    try:
        val = float(text)
    except (TypeError, ValueError):
        raise NonNumericCell(row, col, text) from None
    if not math.isfinite(val):
        raise NonNumericCell(row, col, text)
    return val


def load_csv(path, options: CsvOptions = CsvOptions()) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        rows = list(reader)
    header = [h.strip() for h in header]
    for col in (options.subject, options.y, options.time, options.loc):
        if col not in header:
            raise MissingColumn(col)
    coords = list(options.coords) if options.coords is not None else [
        h for h in header if h.startswith(options.loc + "_")
    ]
    if not coords:
        raise MissingColumn(options.loc + "_x")
    for col in coords:
        if col not in header:
            raise MissingColumn(col)
    used = {options.subject, options.y, options.time, options.loc, *coords}
    covariates = list(options.covariates) if options.covariates is not None else [
        h for h in header if h not in used
    ]
    for col in covariates:
        if col not in header:
            raise MissingColumn(col)
    if not rows:
        raise EmptyDataset(f"{path} has a header but no data rows")

    records = []
    loc_coords = {}
    for i, raw in enumerate(rows, start=2):  # header is line 1
        row = {k.strip(): (v.strip() if isinstance(v, str) else v) for k, v in raw.items() if k}
        sid = row[options.subject]
        loc = row[options.loc]
        if sid in (None, "") or loc in (None, ""):
            raise NonNumericCell(i, options.subject if not sid else options.loc, sid if not sid else loc)
        yv = _number(row[options.y], i, options.y)
        tv = _number(row[options.time], i, options.time)
        cv = tuple(_number(row[c], i, c) for c in coords)
        xv = [_number(row[c], i, c) for c in covariates]
        if loc in loc_coords and loc_coords[loc] != cv:
            raise DataError(f"row {i}: location {loc!r} has coordinates {cv}, previously {loc_coords[loc]}")
        loc_coords[loc] = cv
        records.append((sid, tv, loc, yv, xv))

    grid_times = sorted({r[1] for r in records})
    time_rank = {t: k for k, t in enumerate(grid_times)}
    loc_key = _sort_key_factory(list(loc_coords))
    loc_ids = sorted(loc_coords, key=loc_key)
    loc_rank = {l: k for k, l in enumerate(loc_ids)}
    grid_locs = np.array([loc_coords[l] for l in loc_ids], dtype=float)

    by_subject = {}
    for sid, tv, loc, yv, xv in records:
        cells = by_subject.setdefault(sid, {})
        key = (time_rank[tv], loc_rank[loc])
        if key in cells:
            raise DuplicateObservation(sid, tv, loc)
        cells[key] = (yv, xv)

    subjects = []
    for sid in sorted(by_subject, key=_sort_key_factory(list(by_subject))):
        cells = by_subject[sid]
        t_idx = sorted({k[0] for k in cells})
        l_idx = sorted({k[1] for k in cells})
        if len(cells) != len(t_idx) * len(l_idx):
            raise RaggedSubject(sid, len(cells), len(t_idx), len(l_idx))
        y, x = [], []
        for j in t_idx:
            for l in l_idx:
                yv, xv = cells[(j, l)]
                y.append(yv)
                x.append(([1.0] if options.intercept else []) + xv)
        x = np.array(x, dtype=float).reshape(len(y), -1)
        if x.shape[1] == 0:
            raise DataError("design matrix has no columns (no intercept and no covariates)")
        subjects.append(
            SubjectData(
                id=sid,
                y=np.array(y),
                x=x,
                times=np.array([grid_times[j] for j in t_idx]),
                time_grid_idx=np.array(t_idx),
                locs=grid_locs[l_idx],
                loc_grid_idx=np.array(l_idx),
            )
        )
    return Dataset(
        subjects,
        grid_times=np.array(grid_times),
        grid_locs=grid_locs,
        loc_ids=loc_ids,
        covariate_names=covariates,
        intercept=options.intercept,
    )


def write_csv(dataset: Dataset, path) -> None:
    """Write ``dataset`` in the canonical column layout read by :func:`load_csv`."""
    q = dataset.grid_locs.shape[1]
    coord_names = ["loc_" + c for c in ("x", "y", "z")[:q]] + [f"loc_{k}" for k in range(3, q)]
    first = 1 if dataset.intercept else 0
    covs = list(dataset.covariate_names) or [f"x{k}" for k in range(1, dataset.p - first + 1)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "y", "time", "loc", *coord_names, *covs])
        for sub in dataset.subjects:
            for j in range(sub.t):
                for l in range(sub.s):
                    pos = j * sub.s + l
                    w.writerow(
                        [sub.id, repr(float(sub.y[pos])), repr(float(sub.times[j])),
                         dataset.loc_ids[sub.loc_grid_idx[l]],
                         *(repr(float(c)) for c in sub.locs[l]),
                         *(repr(float(v)) for v in sub.x[pos, first:])]
                    )
