"""
Line lists, reporting triangles, county graphs and weekday designs.

Day indices are 0-based internally: day ``t = T - 1`` is the as-of date and
delay ``d`` runs over ``0..D``. Cell ``(i, t, d)`` is observed iff
``t + d <= T - 1``.
"""
from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

N_WEEKDAY_EFFECTS = 6


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass(frozen=True)
class LineListRecord:
    county_id: str
    onset_date: dt.date
    report_date: dt.date

    @property
    def delay(self) -> int:
        return (self.report_date - self.onset_date).days


@dataclass(frozen=True)
class AnalysisWindow:
    as_of_date: dt.date
    window_length: int = 90
    max_delay: int = 30

    def __post_init__(self):
        if self.window_length < 28:
            raise DataError(f"window_length must be >= 28, got {self.window_length}")
        if self.max_delay < 1:
            raise DataError(f"max_delay must be >= 1, got {self.max_delay}")
        if self.max_delay >= self.window_length:
            raise DataError("max_delay must be smaller than window_length")

    @property
    def start_date(self) -> dt.date:
        return self.as_of_date - dt.timedelta(days=self.window_length - 1)

    @property
    def onset_dates(self) -> list[dt.date]:
        start = self.start_date
        return [start + dt.timedelta(days=k) for k in range(self.window_length)]

    def day_index(self, day: dt.date) -> int | None:
        k = (day - self.start_date).days
        return k if 0 <= k < self.window_length else None


def observed_mask(T: int, D: int) -> np.ndarray:
    """Boolean ``T x (D+1)`` mask, True where onset day + delay <= as-of day."""
    t = np.arange(T)[:, None]
    d = np.arange(D + 1)[None, :]
    return t + d <= T - 1


@dataclass(frozen=True)
class ReportingTriangle:
    """Counts ``Z[county, onset day, delay]`` as known on the as-of date.

    ``dropped_late`` counts in-window records whose delay exceeds ``D``;
    ``not_yet_reported`` counts in-window records reported after the as-of
    date (those cells are censored, so they never enter ``counts``).
    """

    counts: np.ndarray
    county_ids: tuple[str, ...]
    window: AnalysisWindow
    dropped_late: int = 0
    not_yet_reported: int = 0

    def __post_init__(self):
        N, T, D1 = self.counts.shape
        if T != self.window.window_length or D1 != self.window.max_delay + 1:
            raise DataError("counts shape does not match the analysis window")
        if N != len(self.county_ids):
            raise DataError("counts shape does not match county list")
        if (self.counts < 0).any():
            raise DataError("counts must be non-negative")
        if self.counts[:, ~self.observed_mask].any():
            raise DataError("unobserved cells must be zero")
        self.counts.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.counts.shape

    @property
    def observed_mask(self) -> np.ndarray:
        return observed_mask(self.window.window_length, self.window.max_delay)

    @property
    def onset_dates(self) -> list[dt.date]:
        return self.window.onset_dates


def _parse_date(value: str, row: int) -> dt.date:
    try:
        return dt.date.fromisoformat(value.strip())
    except ValueError as exc:
        raise DataError(f"row {row}: bad date {value!r}") from exc


def read_line_list(path: str | Path) -> list[LineListRecord]:
    """Read a ``county_id,onset_date,report_date`` CSV."""
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"county_id", "onset_date", "report_date"} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        for row_no, row in enumerate(reader, start=2):
            records.append(
                LineListRecord(
                    row["county_id"].strip(),
                    _parse_date(row["onset_date"], row_no),
                    _parse_date(row["report_date"], row_no),
                )
            )
    return records


def write_line_list(path: str | Path, records: Iterable[LineListRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["county_id", "onset_date", "report_date"])
        for r in records:
            writer.writerow([r.county_id, r.onset_date.isoformat(), r.report_date.isoformat()])


def build_triangle(
    records: Sequence[LineListRecord],
    window: AnalysisWindow,
    counties: CountyGraph | Sequence[str],
) -> ReportingTriangle:
    """Aggregate a line list into a reporting triangle for ``window``.

    Records with onset outside the window are ignored. In-window records with
    delay above ``max_delay`` are dropped and counted in ``dropped_late``;
    those reported after the as-of date are counted in ``not_yet_reported``.
    """
    ids = tuple(counties.county_ids if isinstance(counties, CountyGraph) else counties)
    index = {c: k for k, c in enumerate(ids)}
    T, D = window.window_length, window.max_delay
    counts = np.zeros((len(ids), T, D + 1), dtype=np.int64)
    dropped = 0
    pending = 0
    for row, rec in enumerate(records):
        if rec.county_id not in index:
            raise DataError(f"record {row}: unknown county {rec.county_id!r}")
        delay = rec.delay
        if delay < 0:
            raise DataError(
                f"record {row}: report_date {rec.report_date} precedes onset_date {rec.onset_date}"
            )
        t = window.day_index(rec.onset_date)
        if t is None:
            continue
        if delay > D:
            dropped += 1
        elif t + delay > T - 1:
            pending += 1
        else:
            counts[index[rec.county_id], t, delay] += 1
    return ReportingTriangle(counts, ids, window, dropped, pending)


def read_aggregate_triangle(
    path: str | Path, window: AnalysisWindow, counties: CountyGraph | Sequence[str]
) -> ReportingTriangle:
    """Read a ``county_id,onset_date,delay,count`` CSV into a triangle."""
    ids = tuple(counties.county_ids if isinstance(counties, CountyGraph) else counties)
    index = {c: k for k, c in enumerate(ids)}
    T, D = window.window_length, window.max_delay
    counts = np.zeros((len(ids), T, D + 1), dtype=np.int64)
    dropped = pending = 0
    with open(path, newline="", encoding="utf-8") as fh:
        for row_no, row in enumerate(csv.DictReader(fh), start=2):
            cid = row["county_id"].strip()
            if cid not in index:
                raise DataError(f"row {row_no}: unknown county {cid!r}")
            delay, n = int(row["delay"]), int(row["count"])
            if delay < 0 or n < 0:
                raise DataError(f"row {row_no}: negative delay or count")
            t = window.day_index(_parse_date(row["onset_date"], row_no))
            if t is None:
                continue
            if delay > D:
                dropped += n
            elif t + delay > T - 1:
                pending += n
            else:
                counts[index[cid], t, delay] += n
    return ReportingTriangle(counts, ids, window, dropped, pending)


def partial_totals(tri: ReportingTriangle) -> np.ndarray:
    """Cases reported so far for each (county, onset day), shape ``N x T``."""
    return np.where(tri.observed_mask[None], tri.counts, 0).sum(axis=2)


def onset_series(records: Iterable[LineListRecord], county_ids: Sequence[str],
                 window: AnalysisWindow, as_of: dt.date | None = None) -> np.ndarray:
    """Daily onset counts ``N x T`` of records reported by ``as_of`` (no delay cap)."""
    index = {c: k for k, c in enumerate(county_ids)}
    out = np.zeros((len(county_ids), window.window_length), dtype=np.int64)
    for rec in records:
        if as_of is not None and rec.report_date > as_of:
            continue
        t = window.day_index(rec.onset_date)
        if t is not None and rec.county_id in index:
            out[index[rec.county_id], t] += 1
    return out


@dataclass(frozen=True)
class CountyGraph:
    county_ids: tuple[str, ...]
    population: np.ndarray
    adjacency: np.ndarray
    degrees: np.ndarray = field(init=False)
    offsets: np.ndarray = field(init=False)

    def __post_init__(self):
        W = self.adjacency
        n = len(self.county_ids)
        if W.shape != (n, n) or self.population.shape != (n,):
            raise DataError("adjacency/population shape mismatch")
        if not np.array_equal(W, W.T):
            raise DataError("adjacency must be symmetric")
        if np.diag(W).any():
            raise DataError("adjacency must have a zero diagonal")
        if (self.population <= 0).any():
            bad = [c for c, p in zip(self.county_ids, self.population) if p <= 0]
            raise DataError(f"non-positive population for {bad}")
        deg = W.sum(axis=1)
        if n > 1 and (deg == 0).any():
            isolated = [c for c, k in zip(self.county_ids, deg) if k == 0]
            raise DataError(f"isolated counties are not supported: {isolated}")
        object.__setattr__(self, "degrees", deg)
        object.__setattr__(self, "offsets", np.log(self.population.astype(float)))
        for a in (self.population, self.adjacency, self.degrees, self.offsets):
            a.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.county_ids)

    @property
    def laplacian(self) -> np.ndarray:
        return np.diag(self.degrees).astype(float) - self.adjacency

    def edges(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.adjacency))
        return list(zip(i.tolist(), j.tolist()))

    def permuted(self, order: Sequence[int]) -> CountyGraph:
        order = np.asarray(order)
        return CountyGraph(
            tuple(self.county_ids[k] for k in order),
            self.population[order].copy(),
            self.adjacency[np.ix_(order, order)].copy(),
        )


def load_graph(
    population_table: Mapping[str, int] | Iterable[tuple[str, int]],
    edge_list: Iterable[tuple[str, str]],
) -> CountyGraph:
    """Build a :class:`CountyGraph` from populations and undirected edges.

    Repeated edges (in either orientation) are merged. Self-loops, unknown
    counties, non-positive populations and isolated counties are errors.
    """
    items = list(population_table.items() if isinstance(population_table, Mapping)
                 else population_table)
    ids = tuple(str(c) for c, _ in items)
    if len(set(ids)) != len(ids):
        raise DataError("duplicate county in population table")
    pop = np.array([int(p) for _, p in items], dtype=np.int64)
    index = {c: k for k, c in enumerate(ids)}
    W = np.zeros((len(ids), len(ids)), dtype=np.int64)
    for a, b in edge_list:
        if a not in index or b not in index:
            raise DataError(f"edge ({a}, {b}) references an unknown county")
        if a == b:
            raise DataError(f"self-loop on county {a}")
        W[index[a], index[b]] = W[index[b], index[a]] = 1
    return CountyGraph(ids, pop, W)


def read_population_csv(path: str | Path) -> list[tuple[str, int]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [(r["county_id"].strip(), int(r["population"])) for r in csv.DictReader(fh)]


def read_edges_csv(path: str | Path) -> list[tuple[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [(r["county_a"].strip(), r["county_b"].strip()) for r in csv.DictReader(fh)]


def write_graph_csv(graph: CountyGraph, population_path: str | Path, edge_path: str | Path) -> None:
    with open(population_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["county_id", "population"])
        w.writerows(zip(graph.county_ids, graph.population.tolist()))
    with open(edge_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["county_a", "county_b"])
        for i, j in graph.edges():
            w.writerow([graph.county_ids[i], graph.county_ids[j]])


def rook_grid(rows: int, cols: int, population: int | Sequence[int] = 1000,
              prefix: str = "c") -> CountyGraph:
    """Rook-adjacency grid of ``rows x cols`` counties, row-major ids."""
    n = rows * cols
    ids = [f"{prefix}{k:02d}" for k in range(n)]
    pops = [population] * n if np.isscalar(population) else list(population)
    edges = []
    for r in range(rows):
        for c in range(cols):
            k = r * cols + c
            if c + 1 < cols:
                edges.append((ids[k], ids[k + 1]))
            if r + 1 < rows:
                edges.append((ids[k], ids[k + cols]))
    return load_graph(list(zip(ids, pops)), edges)


def weekday_code(day: dt.date) -> np.ndarray:
    """Sum-to-zero effect coding of the weekday, Monday first, Sunday as reference."""
    row = np.zeros(N_WEEKDAY_EFFECTS)
    wd = day.weekday()
    if wd == 6:
        row[:] = -1.0
    else:
        row[wd] = 1.0
    return row


def day_of_week_design(window: AnalysisWindow | Sequence[dt.date]) -> np.ndarray:
    """``T x 6`` effect-coded weekday design for the onset days."""
    days = window.onset_dates if isinstance(window, AnalysisWindow) else list(window)
    return np.array([weekday_code(day) for day in days]).reshape(len(days), N_WEEKDAY_EFFECTS)


def report_day_design(window: AnalysisWindow | dt.date, T: int | None = None,
                      D: int | None = None) -> np.ndarray:
    """``T x D x 6`` weekday design of the report day ``t + d`` for delays ``0..D-1``.

    Accepts an :class:`AnalysisWindow` or a first onset date with explicit sizes.
    """
    if isinstance(window, AnalysisWindow):
        start, T, D = window.start_date, window.window_length, window.max_delay
    else:
        start = window
    out = np.empty((T, D, N_WEEKDAY_EFFECTS))
    for t in range(T):
        for d in range(D):
            out[t, d] = weekday_code(start + dt.timedelta(days=t + d))
    return out

