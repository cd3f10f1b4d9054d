"""Window assignment, counting and partitioned CH analysis of compiled events.

Every detection is shifted by its side's time-of-flight delay and then
assigned to the Pockels cell opening whose window ``[open, open + W)``
contains it: first the opening recorded with it, otherwise the one a period
earlier. Detections in neither window are dropped as noise.

Partitions are contiguous runs of ``partition_size`` detection events (the
last one may be shorter). A partition's trial count for each setting is the
number of openings between its boundaries, taken from the cumulative counts
stored on each event; the last partition runs to the end of the file.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Literal, Optional, Sequence

import numpy as np

from bellch.ingest import CompiledFile
from bellch.metrics import ChResult, CountTable, InsufficientTableError, PositivityReport, ch_linear, positivity

CountingMode = Literal["full", "legacy"]
US = 1e6  # ps per microsecond


@dataclass(frozen=True)
class DelaySet:
    """Time-of-flight delays (microseconds) subtracted from each side's detections."""

    delay_1: float = 0.0
    delay_2: float = 0.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.delay_1) and math.isfinite(self.delay_2)):
            raise ValueError("delays must be finite")


@dataclass(frozen=True)
class AnalysisParams:
    window: float = 2.5  # microseconds
    delays: DelaySet = field(default_factory=DelaySet)
    partition_size: Optional[int] = 10_000  # detection events; None = whole file
    averaging: bool = False
    counting_mode: CountingMode = "full"
    period: float = 40.0  # microseconds between consecutive openings

    def __post_init__(self) -> None:
        if not self.window > 0:
            raise ValueError("window must be positive")
        if not self.period > 0:
            raise ValueError("period must be positive")
        if self.window > self.period / 2:
            raise ValueError(f"window {self.window} us exceeds half the opening period ({self.period / 2} us)")
        if self.partition_size is not None and self.partition_size < 1:
            raise ValueError("partition_size must be >= 1")
        if self.counting_mode not in ("full", "legacy"):
            raise ValueError(f"unknown counting mode {self.counting_mode!r}")

    def with_(self, **changes) -> AnalysisParams:
        return replace(self, **changes)


@dataclass(frozen=True)
class TrialBucket:
    ordinal: int
    setting: int
    n1: int
    n2: int
    first_event: int


@dataclass
class Buckets:
    """Column-wise trial buckets: one row per opening with in-window detections.

    ``ordinal`` is the global 1-based index of the opening, ``first_event`` the
    index of the earliest detection assigned to it; ``dropped`` counts
    detections that fell outside every window.
    """

    ordinal: np.ndarray
    setting: np.ndarray
    n1: np.ndarray
    n2: np.ndarray
    first_event: np.ndarray
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.ordinal)

    def subset(self, mask: np.ndarray) -> Buckets:
        return Buckets(self.ordinal[mask], self.setting[mask], self.n1[mask], self.n2[mask], self.first_event[mask], 0)

    def rows(self) -> list[TrialBucket]:
        return [
            TrialBucket(int(o), int(s), int(a), int(b), int(f))
            for o, s, a, b, f in zip(self.ordinal, self.setting, self.n1, self.n2, self.first_event)
        ]


def event_assignment(compiled: CompiledFile, params: AnalysisParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-event window test.

    Returns ``(keep, ordinal, corrected_time)``: whether each detection lies in
    a window, the ordinal of that opening, and the delay-corrected time in ps.
    """
    ev = compiled.events
    channel = ev["channel"]
    delay_ps = np.where(channel == 1, params.delays.delay_1, params.delays.delay_2) * US
    corrected = ev["raw_time"] - delay_ps
    with np.errstate(invalid="ignore"):
        rel = corrected - ev["pockels_time"]
    width = params.window * US
    own = ev["trials"].astype(np.int64).sum(axis=1)
    in_own = (rel >= 0) & (rel < width)
    rel_prev = rel + params.period * US
    in_prev = (rel < 0) & (rel_prev >= 0) & (rel_prev < width) & (own >= 2)
    keep = in_own | in_prev
    return keep, own - in_prev.astype(np.int64), corrected


def assign_windows(compiled: CompiledFile, params: AnalysisParams) -> Buckets:
    """Group in-window detections into per-opening buckets, ascending by opening."""
    keep, key, _ = event_assignment(compiled, params)
    idx = np.flatnonzero(keep)
    dropped = compiled.num_detection_events - idx.size
    if idx.size == 0:
        e = np.zeros(0, dtype=np.int64)
        return Buckets(e, e.astype(np.uint8), e, e, e, dropped)
    # keys are sorted except for one-cycle step-backs, so timsort runs near-linear
    order = np.argsort(key[idx], kind="stable")
    members = idx[order]
    ks = key[members]
    starts = np.flatnonzero(np.r_[True, ks[1:] != ks[:-1]])
    chan = compiled.events["channel"][members]
    n1 = np.add.reduceat((chan == 1).astype(np.int64), starts)
    n2 = np.add.reduceat((chan == 2).astype(np.int64), starts)
    first = np.minimum.reduceat(members, starts)
    return Buckets(
        ordinal=ks[starts],
        setting=compiled.events["setting"][first],
        n1=n1,
        n2=n2,
        first_event=first,
        dropped=int(dropped),
    )


class TouchCounter:
    def __init__(self) -> None:
        self.touches = 0


def iter_buckets(
    compiled: CompiledFile, params: AnalysisParams, counter: TouchCounter | None = None
) -> Iterator[TrialBucket]:
    """Single forward pass yielding buckets in ascending opening order.

    A plain-Python reference for ``assign_windows``. At most the current and
    previous openings are open at any time; ``counter`` tallies per-event work.
    """
    width = params.window * US
    period = params.period * US
    d = {1: params.delays.delay_1 * US, 2: params.delays.delay_2 * US}
    open_buckets: dict[int, list] = {}
    for i, rec in enumerate(compiled.events):
        if counter is not None:
            counter.touches += 1
        own = int(rec["trials"].sum())
        for o in sorted(k for k in open_buckets if k <= own - 2):
            b = open_buckets.pop(o)
            yield TrialBucket(o, *b)
            if counter is not None:
                counter.touches += 1
        chan = int(rec["channel"])
        rel = rec["raw_time"] - d[chan] - rec["pockels_time"]
        if 0 <= rel < width:
            target = own
        elif rel < 0 and own >= 2 and 0 <= rel + period < width:
            target = own - 1
        else:
            continue
        b = open_buckets.setdefault(target, [int(rec["setting"]), 0, 0, i])
        b[chan] += 1
    for o in sorted(open_buckets):
        yield TrialBucket(o, *open_buckets[o])


def _tally(buckets: Buckets, legacy: bool, part: np.ndarray, num_parts: int):
    n1 = buckets.n1
    n2 = buckets.n2
    if legacy:
        n1 = np.minimum(n1, 1)
        n2 = np.minimum(n2, 1)
    coinc = np.minimum(n1, n2)
    out = np.zeros((3, num_parts, 4), dtype=np.int64)
    s = buckets.setting.astype(np.int64)
    for row, values in enumerate((n1, coinc, n2)):
        np.add.at(out[row], (part, s), values)
    return out


def count_full(buckets: Buckets, trials) -> CountTable:
    """Count every in-window detection; a trial adds min(n1, n2) coincidences."""
    sa, c, sb = _tally(buckets, False, np.zeros(len(buckets), dtype=np.int64), 1)[:, 0]
    return CountTable(sa, c, sb, trials)


def count_legacy(buckets: Buckets, trials) -> CountTable:
    """Count at most one detection per side per trial, hence one coincidence."""
    sa, c, sb = _tally(buckets, True, np.zeros(len(buckets), dtype=np.int64), 1)[:, 0]
    return CountTable(sa, c, sb, trials)


def partition_bounds(compiled: CompiledFile, partition_size: Optional[int]) -> tuple[int, np.ndarray]:
    """Number of partitions and their per-setting trial counts, shape (k, 4)."""
    n = compiled.num_detection_events
    total = compiled.total_trials.astype(np.int64)
    if partition_size is None or n == 0:
        return 1, total.reshape(1, 4)
    k = -(-n // partition_size)
    last_idx = np.minimum(np.arange(1, k) * partition_size, n) - 1
    ends = np.vstack([compiled.events["trials"][last_idx].astype(np.int64), total])
    starts = np.vstack([np.zeros((1, 4), dtype=np.int64), ends[:-1]])
    return k, ends - starts


def partition_tables(compiled: CompiledFile, params: AnalysisParams, buckets: Buckets | None = None) -> list[CountTable]:
    if buckets is None:
        buckets = assign_windows(compiled, params)
    k, trials = partition_bounds(compiled, params.partition_size)
    size = params.partition_size or max(compiled.num_detection_events, 1)
    part = np.minimum(buckets.first_event // size, k - 1)
    counts = _tally(buckets, params.counting_mode == "legacy", part, k)
    return [CountTable(counts[0, i], counts[1, i], counts[2, i], trials[i]) for i in range(k)]


def whole_table(compiled: CompiledFile, params: AnalysisParams) -> CountTable:
    return partition_tables(compiled, params.with_(partition_size=None))[0]


@dataclass
class PartitionAnalysis:
    tables: list[CountTable]
    results: list[Optional[ChResult]]
    report: PositivityReport
    dropped: int


def partition_analysis(compiled: CompiledFile, params: AnalysisParams) -> PartitionAnalysis:
    buckets = assign_windows(compiled, params)
    tables = partition_tables(compiled, params, buckets)
    results: list[Optional[ChResult]] = []
    for t in tables:
        try:
            results.append(ch_linear(t, params.averaging))
        except InsufficientTableError:
            results.append(None)
    return PartitionAnalysis(tables, results, positivity(results), buckets.dropped)


def histogram_per_trial(
    compiled: CompiledFile, params: AnalysisParams, side: int, include_empty: bool = False
) -> dict[int, int]:
    """Map detection count -> number of trials with that many detections at ``side``.

    Only openings with at least one in-window detection (either side) are
    counted; ``include_empty`` adds every remaining opening under count 0.
    """
    if side not in (1, 2):
        raise ValueError("side must be 1 or 2")
    buckets = assign_windows(compiled, params)
    n = buckets.n1 if side == 1 else buckets.n2
    hist = np.bincount(n, minlength=1) if len(n) else np.zeros(1, dtype=np.int64)
    if include_empty:
        hist[0] += int(compiled.total_trials.astype(np.int64).sum()) - len(buckets)
    return {i: int(v) for i, v in enumerate(hist)}


@dataclass
class DelayScan:
    delays_1: np.ndarray
    delays_2: np.ndarray
    surface: np.ndarray  # shape (len(delays_1), len(delays_2))
    best: DelaySet
    objective: str

    def triples(self) -> list[tuple[float, float, float]]:
        return [
            (float(d1), float(d2), float(self.surface[i, j]))
            for i, d1 in enumerate(self.delays_1)
            for j, d2 in enumerate(self.delays_2)
        ]


def _objective(compiled: CompiledFile, params: AnalysisParams, objective: str) -> float:
    table = whole_table(compiled, params)
    if objective == "coincidences":
        return float(table.coincidences.sum())
    if objective == "ch":
        try:
            return ch_linear(table, params.averaging).ch_linear
        except InsufficientTableError:
            return math.nan
    raise ValueError(f"unknown objective {objective!r}")


def scan_delays(
    compiled: CompiledFile,
    params: AnalysisParams,
    delays_1: Sequence[float],
    delays_2: Sequence[float],
    objective: str = "ch",
) -> DelayScan:
    """Evaluate the whole-file objective over a delay grid and return its argmax."""
    d1 = np.asarray(delays_1, dtype=float)
    d2 = np.asarray(delays_2, dtype=float)
    surface = np.full((d1.size, d2.size), np.nan)
    for i, a in enumerate(d1):
        for j, b in enumerate(d2):
            surface[i, j] = _objective(compiled, params.with_(delays=DelaySet(float(a), float(b))), objective)
    if np.isnan(surface).all():
        raise ValueError("objective undefined at every grid point")
    i, j = np.unravel_index(np.nanargmax(surface), surface.shape)
    return DelayScan(d1, d2, surface, DelaySet(float(d1[i]), float(d2[j])), objective)


def scan_windows(
    compiled: CompiledFile, params: AnalysisParams, windows: Sequence[float]
) -> list[tuple[float, PartitionAnalysis]]:
    cfgs = [params.with_(window=float(w)) for w in windows]  # validates all before running any
    return [(c.window, partition_analysis(compiled, c)) for c in cfgs]


def scan_partitions(
    compiled: CompiledFile, params: AnalysisParams, sizes: Sequence[Optional[int]]
) -> list[tuple[Optional[int], PartitionAnalysis]]:
    cfgs = [params.with_(partition_size=None if s is None else int(s)) for s in sizes]
    return [(c.partition_size, partition_analysis(compiled, c)) for c in cfgs]
