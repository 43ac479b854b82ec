"""Observation hierarchy, CSV ingestion and the presence/severity response views.

Observations are indexed by cluster (child), time (visit), tooth and zone.
A :class:`Dataset` stores them column-wise and is immutable after
construction; the two views it produces are what the estimating equations
consume:

* :class:`PresenceView` -- the binary indicator ``W_P = I[fri > 0]`` for every
  observation at one time point.
* :class:`SeverityView` -- the nonzero scores only, kept as levels ``1..L``
  and exposed as one-trial multinomial indicator rows.

Within each cluster the rows of a view are ordered tooth-major (7, 8, 9, 10)
and zone-minor (C, M, I, O).  Clusters are ordered by their identifier
(numerically when every identifier is an integer).
"""
from __future__ import annotations

import csv
import dataclasses
import io
import math
import os
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import BadCategory, BadValue, DuplicateCell, EmptyTime, MissingColumn

TOOTH_LEVELS: tuple[int, ...] = (7, 8, 9, 10)
ZONE_LEVELS: tuple[str, ...] = ("C", "M", "I", "O")
FRI_MAX = 3
N_TIMES = 4
AGES: dict[int, int] = {1: 9, 2: 13, 3: 17, 4: 23}
N_POSITIONS = len(TOOTH_LEVELS) * len(ZONE_LEVELS)

DEFAULT_COVARIATES: tuple[str, ...] = (
    "dental_age",
    "Total_mgF",
    "SugarAddedBeverageOzPerDay",
    "BrushingFrequencyPerDay",
    "Avg_homeppm",
    "Prop_DentAppt",
    "Prop_FluorideTreatment",
)
LOCATION_COLUMNS: tuple[str, ...] = ("Tooth8", "Tooth9", "Tooth10", "ZoneM", "ZoneI", "ZoneO")

_TOOTH_CODE = {t: i for i, t in enumerate(TOOTH_LEVELS)}
_ZONE_CODE = {z: i for i, z in enumerate(ZONE_LEVELS)}


@dataclass(frozen=True)
class Observation:
    cluster_id: str
    time: int
    tooth: int
    zone: str
    fri: int
    covariates: tuple[float, ...]


@dataclass(frozen=True)
class CsvSchema:
    """Maps logical fields to CSV column names.

    ``covariates`` maps covariate name -> column name; a plain sequence of
    names means the column carries the covariate's name.
    """

    cluster_id: str = "cluster_id"
    time: str = "time"
    tooth: str = "tooth"
    zone: str = "zone"
    fri: str = "fri"
    covariates: Mapping[str, str] | Sequence[str] = DEFAULT_COVARIATES

    def covariate_columns(self) -> dict[str, str]:
        if isinstance(self.covariates, Mapping):
            return dict(self.covariates)
        return {name: name for name in self.covariates}


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _cluster_rank(ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique ids in canonical order and the rank of every entry of ``ids``."""
    uniq, inverse = np.unique(ids, return_inverse=True)
    try:
        keys = np.array([int(u) for u in uniq])
        order = np.argsort(keys, kind="stable")
    except ValueError:
        order = np.arange(len(uniq))
    rank_of_uniq = np.empty(len(uniq), dtype=np.int64)
    rank_of_uniq[order] = np.arange(len(uniq))
    return uniq[order], rank_of_uniq[inverse]


class Dataset:
    """Long-format clustered observations.

    Parameters
    ----------
    cluster_id, time, tooth, zone, fri : array_like
        One entry per observation.  ``zone`` holds the letters C/M/I/O.
    covariates : array_like, shape (n, p)
        Continuous covariates, in the order of ``covariate_names``.
    covariate_names : sequence of str
    dropped_rows : int
        Rows discarded by a lenient ingest (informational).
    """

    def __init__(
        self,
        cluster_id,
        time,
        tooth,
        zone,
        fri,
        covariates,
        covariate_names: Sequence[str] = DEFAULT_COVARIATES,
        dropped_rows: int = 0,
    ):
        cluster_id = np.asarray([str(c) for c in cluster_id], dtype=object)
        n = len(cluster_id)
        time = np.asarray(time, dtype=np.int64).reshape(n)
        tooth = np.asarray(tooth, dtype=np.int64).reshape(n)
        zone = np.asarray(zone, dtype=object).reshape(n)
        fri = np.asarray(fri, dtype=np.int64).reshape(n)
        covariate_names = tuple(covariate_names)
        covariates = np.asarray(covariates, dtype=float).reshape(n, len(covariate_names))

        if np.any((time < 1) | (time > N_TIMES)):
            raise BadCategory(f"time index outside 1..{N_TIMES}")
        if not np.all(np.isin(tooth, TOOTH_LEVELS)):
            raise BadCategory(f"tooth outside {TOOTH_LEVELS}")
        try:
            zone_code = np.array([_ZONE_CODE[z] for z in zone], dtype=np.int64)
        except KeyError as exc:
            raise BadCategory(f"zone {exc.args[0]!r} outside {ZONE_LEVELS}") from None
        if np.any((fri < 0) | (fri > FRI_MAX)):
            raise BadCategory(f"fri outside 0..{FRI_MAX}")
        if not np.all(np.isfinite(covariates)):
            raise BadValue("missing or non-finite covariate values")

        order_ids, rank = _cluster_rank(cluster_id) if n else (np.array([], dtype=object), np.zeros(0, np.int64))
        tooth_code = np.array([_TOOTH_CODE[t] for t in tooth], dtype=np.int64)
        cell = ((rank * (N_TIMES + 1) + time) * N_POSITIONS) + tooth_code * len(ZONE_LEVELS) + zone_code
        uniq_cells, counts = np.unique(cell, return_counts=True)
        if np.any(counts > 1):
            k = int(np.flatnonzero(cell == uniq_cells[np.argmax(counts > 1)])[0])
            raise DuplicateCell(
                f"duplicate cell (cluster={cluster_id[k]}, time={time[k]}, tooth={tooth[k]}, zone={zone[k]})"
            )

        self.cluster_id = _frozen(cluster_id)
        self.time = _frozen(time)
        self.tooth = _frozen(tooth)
        self.zone = _frozen(zone)
        self.zone_code = _frozen(zone_code)
        self.fri = _frozen(fri)
        self.covariates = _frozen(covariates)
        self.covariate_names = covariate_names
        self.dropped_rows = int(dropped_rows)
        self._cluster_order = order_ids
        self._cluster_rank = _frozen(rank)

    def __len__(self) -> int:
        return len(self.cluster_id)

    def __repr__(self) -> str:
        return f"Dataset(n_obs={len(self)}, n_clusters={self.n_clusters}, covariates={len(self.covariate_names)})"

    @property
    def n_obs(self) -> int:
        return len(self)

    @property
    def clusters(self) -> np.ndarray:
        """Distinct cluster ids in canonical order."""
        return self._cluster_order

    @property
    def n_clusters(self) -> int:
        return len(self._cluster_order)

    @property
    def design_names(self) -> tuple[str, ...]:
        return self.covariate_names + LOCATION_COLUMNS

    def design(self) -> np.ndarray:
        """Covariates followed by tooth (ref. 7) and zone (ref. C) dummies."""
        dummies = np.zeros((len(self), len(LOCATION_COLUMNS)))
        tooth_code = np.searchsorted(TOOTH_LEVELS, self.tooth)
        for j in (1, 2, 3):
            dummies[:, j - 1] = tooth_code == j
            dummies[:, 2 + j] = self.zone_code == j
        return np.hstack([self.covariates, dummies])

    def observations(self) -> Iterator[Observation]:
        for k in range(len(self)):
            yield Observation(
                str(self.cluster_id[k]),
                int(self.time[k]),
                int(self.tooth[k]),
                str(self.zone[k]),
                int(self.fri[k]),
                tuple(float(v) for v in self.covariates[k]),
            )

    @classmethod
    def from_observations(cls, observations: Iterable[Observation], covariate_names: Sequence[str] = DEFAULT_COVARIATES) -> "Dataset":
        obs = list(observations)
        p = len(tuple(covariate_names))
        return cls(
            [o.cluster_id for o in obs],
            [o.time for o in obs],
            [o.tooth for o in obs],
            [o.zone for o in obs],
            [o.fri for o in obs],
            np.array([o.covariates for o in obs], dtype=float).reshape(len(obs), p),
            covariate_names,
        )

    def subset(self, mask: np.ndarray) -> "Dataset":
        mask = np.asarray(mask)
        return Dataset(
            self.cluster_id[mask],
            self.time[mask],
            self.tooth[mask],
            self.zone[mask],
            self.fri[mask],
            self.covariates[mask],
            self.covariate_names,
        )

    def view_order(self, t: int) -> np.ndarray:
        """Row indices at time ``t`` sorted by (cluster, tooth, zone)."""
        rows = np.flatnonzero(self.time == t)
        keys = (self.zone_code[rows], self.tooth[rows], self._cluster_rank[rows])
        return rows[np.lexsort(keys)]

    def to_csv(self) -> str:
        """The canonical CSV text; floats use their shortest round-trip repr."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cluster_id", "time", "tooth", "zone", "fri", *self.covariate_names])
        for k in range(len(self)):
            w.writerow(
                [
                    self.cluster_id[k],
                    int(self.time[k]),
                    int(self.tooth[k]),
                    self.zone[k],
                    int(self.fri[k]),
                    *(repr(float(v)) for v in self.covariates[k]),
                ]
            )
        return buf.getvalue()

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(self.to_csv())


def _parse_int(text: str, field: str) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise BadValue(f"{field}: cannot parse {text!r} as integer") from None


def _parse_float(text: str, field: str) -> float:
    try:
        v = float(text.strip())
    except ValueError:
        raise BadValue(f"{field}: cannot parse {text!r} as number") from None
    if not math.isfinite(v):
        raise BadValue(f"{field}: missing or non-finite value {text!r}")
    return v


def ingest_csv(path: str | os.PathLike, schema: CsvSchema | None = None, strict: bool = True) -> Dataset:
    """Read a long-format CSV into a validated :class:`Dataset`.

    In strict mode the first invalid row raises; in lenient mode invalid rows
    are dropped and counted in ``Dataset.dropped_rows``.  Duplicate
    (cluster, time, tooth, zone) cells raise in both modes.
    """
    schema = schema or CsvSchema()
    cov_cols = schema.covariate_columns()
    required = [schema.cluster_id, schema.time, schema.tooth, schema.zone, schema.fri, *cov_cols.values()]

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise MissingColumn(f"missing columns: {', '.join(missing)}")

        cols: dict[str, list] = {k: [] for k in ("cluster_id", "time", "tooth", "zone", "fri", "cov")}
        dropped = 0
        for lineno, row in enumerate(reader, start=2):
            try:
                cid = (row[schema.cluster_id] or "").strip()
                if not cid:
                    raise BadValue("empty cluster id")
                t = _parse_int(row[schema.time] or "", "time")
                if not 1 <= t <= N_TIMES:
                    raise BadCategory(f"time {t} outside 1..{N_TIMES}")
                tooth = _parse_int(row[schema.tooth] or "", "tooth")
                if tooth not in _TOOTH_CODE:
                    raise BadCategory(f"tooth {tooth} outside {TOOTH_LEVELS}")
                zone = (row[schema.zone] or "").strip()
                if zone not in _ZONE_CODE:
                    raise BadCategory(f"zone {zone!r} outside {ZONE_LEVELS}")
                fri = _parse_int(row[schema.fri] or "", "fri")
                if not 0 <= fri <= FRI_MAX:
                    raise BadCategory(f"fri {fri} outside 0..{FRI_MAX}")
                cov = [_parse_float(row[c] or "", name) for name, c in cov_cols.items()]
            except (BadValue, BadCategory) as exc:
                if strict:
                    raise type(exc)(f"line {lineno}: {exc}") from None
                dropped += 1
                continue
            cols["cluster_id"].append(cid)
            cols["time"].append(t)
            cols["tooth"].append(tooth)
            cols["zone"].append(zone)
            cols["fri"].append(fri)
            cols["cov"].append(cov)

    return Dataset(
        cols["cluster_id"],
        cols["time"],
        cols["tooth"],
        cols["zone"],
        cols["fri"],
        np.array(cols["cov"], dtype=float).reshape(len(cols["cov"]), len(cov_cols)),
        tuple(cov_cols),
        dropped_rows=dropped,
    )


@dataclass(frozen=True, eq=False)
class ClusteredView:
    """Rows of one time point grouped into clusters.

    ``offsets[i]:offsets[i+1]`` delimits cluster ``i`` in every per-row array.
    """

    time: int
    cluster_ids: np.ndarray
    offsets: np.ndarray
    X: np.ndarray
    tooth: np.ndarray
    zone: np.ndarray
    design_names: tuple[str, ...]

    _row_fields = ("X", "tooth", "zone")

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_ids)

    @property
    def n_obs(self) -> int:
        return int(self.offsets[-1])

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def positions(self) -> np.ndarray:
        """Flat (tooth, zone) position index in 0..15."""
        return np.searchsorted(TOOTH_LEVELS, self.tooth) * len(ZONE_LEVELS) + self.zone

    def cluster_of_row(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_clusters), self.sizes)

    def cluster_slices(self) -> Iterator[slice]:
        for a, b in zip(self.offsets[:-1], self.offsets[1:]):
            yield slice(int(a), int(b))

    def select_columns(self, names: Sequence[str]) -> "ClusteredView":
        idx = [self.design_names.index(n) for n in names]
        return dataclasses.replace(self, X=self.X[:, idx], design_names=tuple(names))

    def take(self, clusters: Sequence[int], labels: Sequence[str] | None = None) -> "ClusteredView":
        """New view made of the given clusters (repeats allowed), in that order."""
        clusters = np.asarray(clusters, dtype=np.int64)
        sizes = self.sizes[clusters]
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        if len(clusters):
            rows = np.concatenate([np.arange(self.offsets[c], self.offsets[c + 1]) for c in clusters])
        else:
            rows = np.zeros(0, dtype=np.int64)
        ids = self.cluster_ids[clusters] if labels is None else np.asarray(labels, dtype=object)
        changes = {f: getattr(self, f)[rows] for f in self._row_fields}
        return dataclasses.replace(self, cluster_ids=ids, offsets=offsets, **changes)

    def drop_cluster(self, index: int) -> "ClusteredView":
        keep = np.delete(np.arange(self.n_clusters), index)
        return self.take(keep)

    def index_of(self, cluster_id) -> int | None:
        hits = np.flatnonzero(self.cluster_ids == cluster_id)
        return int(hits[0]) if len(hits) else None


@dataclass(frozen=True, eq=False)
class PresenceView(ClusteredView):
    """Binary presence responses ``W_P = I[fri > 0]``."""

    w: np.ndarray = None  # type: ignore[assignment]

    _row_fields = ("X", "tooth", "zone", "w")

    @property
    def y_zero(self) -> np.ndarray:
        """Indicator of a zero score, the event the presence mean describes."""
        return 1.0 - self.w


@dataclass(frozen=True, eq=False)
class SeverityView(ClusteredView):
    """Nonzero scores ``W_S`` in 1..L."""

    level: np.ndarray = None  # type: ignore[assignment]
    n_levels: int = FRI_MAX

    _row_fields = ("X", "tooth", "zone", "level")

    @property
    def Z(self) -> np.ndarray:
        """One-trial multinomial indicators, shape (n, L)."""
        return (self.level[:, None] == np.arange(1, self.n_levels + 1)[None, :]).astype(float)


def _view_parts(d: Dataset, t: int, columns: Sequence[str] | None, rows_filter=None):
    if not 1 <= t <= N_TIMES:
        raise BadCategory(f"time index {t} outside 1..{N_TIMES}")
    rows = d.view_order(t)
    if rows_filter is not None:
        rows = rows[rows_filter(rows)]
    if len(rows) == 0:
        raise EmptyTime(f"no observations at time {t}")
    X = d.design()[rows]
    names = d.design_names
    if columns is not None:
        idx = [names.index(c) for c in columns]
        X, names = X[:, idx], tuple(columns)
    ranks = d._cluster_rank[rows]
    starts = np.flatnonzero(np.r_[True, ranks[1:] != ranks[:-1]])
    offsets = np.r_[starts, len(rows)].astype(np.int64)
    ids = d.cluster_id[rows[starts]]
    return rows, dict(
        time=t,
        cluster_ids=ids,
        offsets=offsets,
        X=X,
        tooth=d.tooth[rows].copy(),
        zone=d.zone_code[rows].copy(),
        design_names=names,
    )


def presence_view(d: Dataset, t: int, columns: Sequence[str] | None = None) -> PresenceView:
    """Presence responses at time ``t``, optionally restricted to some design columns."""
    rows, parts = _view_parts(d, t, columns)
    return PresenceView(**parts, w=(d.fri[rows] > 0).astype(float))


def severity_view(d: Dataset, t: int, columns: Sequence[str] | None = None) -> SeverityView:
    """Nonzero scores at time ``t``; clusters without any are absent."""
    if not 1 <= t <= N_TIMES:
        raise BadCategory(f"time index {t} outside 1..{N_TIMES}")
    if not np.any((d.time == t) & (d.fri > 0)):
        raise EmptyTime(f"no nonzero scores at time {t}")
    rows, parts = _view_parts(d, t, columns, rows_filter=lambda r: d.fri[r] > 0)
    return SeverityView(**parts, level=d.fri[rows].copy())


def fri_distribution(d: Dataset) -> list[tuple[int, str, int, int]]:
    """Counts by (time, zone, fri) including empty cells."""
    out = []
    for t in range(1, N_TIMES + 1):
        for zc, z in enumerate(ZONE_LEVELS):
            sel = (d.time == t) & (d.zone_code == zc)
            counts = np.bincount(d.fri[sel], minlength=FRI_MAX + 1)
            out.extend((t, z, level, int(counts[level])) for level in range(FRI_MAX + 1))
    return out
