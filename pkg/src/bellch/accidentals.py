"""Variable-window greedy coincidence counting and the dC/dW accidentals check."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numba
import numpy as np

from bellch.analysis import AnalysisParams, DelaySet, event_assignment
from bellch.ingest import CompiledFile
from bellch.metrics import CountTable, InsufficientTableError, ch_linear

PS_PER_NS = 1e3


def prepare_event_lists(
    compiled: CompiledFile,
    delays: DelaySet,
    opening: float = 2.0,
    period: float = 40.0,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-setting ascending lists of delay-corrected detection times (ns).

    Detections outside the opening (``opening`` microseconds long) are noise
    and are removed. Index the result by setting: a1b1, a1b2, a2b1, a2b2.
    """
    params = AnalysisParams(window=opening, delays=delays, partition_size=None, period=period)
    keep, _, corrected = event_assignment(compiled, params)
    ev = compiled.events
    out = []
    for s in range(4):
        sel = keep & (ev["setting"] == s)
        a = np.sort(corrected[sel & (ev["channel"] == 1)]) / PS_PER_NS
        b = np.sort(corrected[sel & (ev["channel"] == 2)]) / PS_PER_NS
        out.append((a, b))
    return out


def greedy_coincidences(list_a, list_b, window: float) -> int:
    """Earliest-first matching of two sorted time lists, |ta - tb| <= window.

    Each event is used at most once; O(len(a) + len(b)).
    """
    return int(_greedy(np.asarray(list_a, dtype=np.float64), np.asarray(list_b, dtype=np.float64), float(window)))


@numba.njit(cache=True)
def _greedy(list_a, list_b, window):
    i = 0
    j = 0
    count = 0
    na = len(list_a)
    nb = len(list_b)
    while i < na and j < nb:
        d = list_a[i] - list_b[j]
        if abs(d) <= window:
            count += 1
            i += 1
            j += 1
        elif d < 0:
            i += 1
        else:
            j += 1
    return count


@dataclass
class CoincidenceCurve:
    windows: np.ndarray  # ns, ascending
    counts: np.ndarray  # (len(windows), 4) coincidences per setting
    slopes: np.ndarray  # (len(windows), 4) dC/dW, counts per ns
    ch: np.ndarray  # (len(windows),)
    singles_a: np.ndarray
    singles_b: np.ndarray
    trials: np.ndarray
    knee: float
    fraction: float
    accidentals_negligible: Optional[bool]


def negligible_beyond_knee(
    windows: np.ndarray, counts: np.ndarray, slopes: np.ndarray, knee: float, fraction: float
) -> Optional[bool]:
    """True when every slope past ``knee`` is at most ``fraction * C / W``.

    ``None`` if no grid point lies beyond the knee.
    """
    past = windows > knee
    if not past.any():
        return None
    ref = fraction * counts[past] / windows[past, None]
    return bool((slopes[past] <= ref).all())


def scan_curve(
    compiled: CompiledFile,
    delays: DelaySet,
    windows: Sequence[float],
    *,
    knee: float = 500.0,
    fraction: float = 0.05,
    averaging: bool = False,
    opening: float = 2.0,
    period: float = 40.0,
) -> CoincidenceCurve:
    w = np.asarray(windows, dtype=float)
    if w.size and (np.diff(w) <= 0).any():
        raise ValueError("window grid must be strictly ascending")
    lists = prepare_event_lists(compiled, delays, opening, period)
    counts = np.array(
        [[_greedy(a, b, float(x)) for a, b in lists] for x in w], dtype=np.int64
    ).reshape(w.size, 4)
    slopes = np.gradient(counts.astype(float), w, axis=0) if w.size > 1 else np.zeros(counts.shape)
    singles_a = np.array([len(a) for a, _ in lists], dtype=np.int64)
    singles_b = np.array([len(b) for _, b in lists], dtype=np.int64)
    trials = compiled.total_trials.astype(np.int64)
    ch = np.full(w.size, math.nan)
    for k in range(w.size):
        try:
            ch[k] = ch_linear(CountTable(singles_a, counts[k], singles_b, trials), averaging).ch_linear
        except InsufficientTableError:
            pass
    return CoincidenceCurve(
        windows=w,
        counts=counts,
        slopes=slopes,
        ch=ch,
        singles_a=singles_a,
        singles_b=singles_b,
        trials=trials,
        knee=knee,
        fraction=fraction,
        accidentals_negligible=negligible_beyond_knee(w, counts, slopes, knee, fraction),
    )
