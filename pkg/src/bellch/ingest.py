"""Event-file ingestion: text parsing, opening reinsertion, binary compilation.

Text event files hold one event per line, ``timetag setting kind``, with the
timetag in 156.25 ps ticks, setting one of 11/12/21/22 and kind 15 for a
Pockels cell opening, 1 or 2 for a detection at that side.

Compiled files drop the opening records, keeping per-setting cumulative
opening counts on every detection instead. Layout (little-endian)::

    char     magic[4]            "BKC1"
    uint32   num_detection_events
    uint32   total_trials[4]
    struct {
        float64 raw_time;        ps
        float64 pockels_time;    ps, -inf when no opening precedes
        uint8   setting;         0..3 for a1b1, a1b2, a2b1, a2b2
        uint8   channel;         1 or 2
        uint8   pad[2];
        uint32  trials[4];
    } events[num_detection_events];
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Iterator, NamedTuple, Union

import numpy as np

from bellch.metrics import SETTING_CODES

TICK_PS = 156.25
KIND_OPENING = 15
KIND_SIDE1 = 1
KIND_SIDE2 = 2
KINDS = (KIND_OPENING, KIND_SIDE1, KIND_SIDE2)

# below this, timetag * 625 fits the float64 mantissa so tick -> ps is exact
EXACT_TIMETAG_LIMIT = 2**53 // 625

MAGIC = b"BKC1"
HEADER = struct.Struct("<4sI4I")

RAW_DTYPE = np.dtype([("timetag", "<i8"), ("setting", "u1"), ("kind", "u1")])
EVENT_DTYPE = np.dtype(
    [
        ("raw_time", "<f8"),
        ("pockels_time", "<f8"),
        ("setting", "u1"),
        ("channel", "u1"),
        ("pad", "V2"),
        ("trials", "<u4", (4,)),
    ]
)

PathOrText = Union[str, os.PathLike, IO[str]]


class EventFormatError(ValueError):
    def __init__(self, line: int, text: str, reason: str):
        super().__init__(f"line {line}: {reason}: {text!r}")
        self.line = line


class CompiledFormatError(ValueError):
    pass


class RawEvent(NamedTuple):
    timetag: int
    setting: int
    kind: int


def setting_index(code: int) -> int:
    return SETTING_CODES.index(code)


def raw_events(records: Iterable[tuple[int, int, int]] = ()) -> np.ndarray:
    """Build a raw-event array from ``(timetag, setting_code, kind)`` tuples."""
    arr = np.array([tuple(r) for r in records], dtype=RAW_DTYPE)
    _validate_codes(arr)
    return arr


def _validate_codes(arr: np.ndarray) -> None:
    bad_setting = ~np.isin(arr["setting"], SETTING_CODES)
    bad_kind = ~np.isin(arr["kind"], KINDS)
    bad = np.flatnonzero(bad_setting | bad_kind)
    if bad.size:
        i = int(bad[0])
        rec = arr[i]
        reason = "unknown setting code" if bad_setting[i] else "unknown event kind"
        raise EventFormatError(i + 1, f"{rec['timetag']} {rec['setting']} {rec['kind']}", reason)
    if (arr["timetag"] < 0).any():
        i = int(np.flatnonzero(arr["timetag"] < 0)[0])
        raise EventFormatError(i + 1, str(arr["timetag"][i]), "negative timetag")


def _read_text(source: PathOrText) -> str:
    if hasattr(source, "read"):
        return source.read()
    return Path(source).read_text()


def parse_events(source: PathOrText) -> np.ndarray:
    """Parse an event text stream into a ``RAW_DTYPE`` array, preserving order.

    ``source`` may be a path or an open text stream. Blank lines are skipped;
    any other line must hold exactly three integers with known codes.
    """
    return parse_text(_read_text(source))


def parse_text(text: str) -> np.ndarray:
    lines = text.splitlines()
    tokens = text.split()
    nonblank = sum(1 for ln in lines if ln.strip())
    if len(tokens) == 3 * nonblank:
        try:
            flat = np.array(tokens, dtype=np.int64).reshape(-1, 3)
        except (ValueError, OverflowError):
            flat = None
        if flat is not None:
            if ((flat[:, 1] < 0) | (flat[:, 1] > 255) | (flat[:, 2] < 0) | (flat[:, 2] > 255)).any():
                return _parse_slow(lines)
            arr = np.empty(len(flat), dtype=RAW_DTYPE)
            arr["timetag"] = flat[:, 0]
            arr["setting"] = flat[:, 1]
            arr["kind"] = flat[:, 2]
            try:
                _validate_codes(arr)
            except EventFormatError:
                return _parse_slow(lines)
            return arr
    return _parse_slow(lines)


def _parse_slow(lines: list[str]) -> np.ndarray:
    """Line-by-line parse; reports the first bad line by its 1-based number."""
    out = []
    for lineno, line in enumerate(lines, start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 3:
            raise EventFormatError(lineno, line, "expected 3 fields")
        try:
            t, s, k = (int(f) for f in fields)
        except ValueError:
            raise EventFormatError(lineno, line, "non-integer field") from None
        if t < 0:
            raise EventFormatError(lineno, line, "negative timetag")
        if s not in SETTING_CODES:
            raise EventFormatError(lineno, line, "unknown setting code")
        if k not in KINDS:
            raise EventFormatError(lineno, line, "unknown event kind")
        out.append((t, s, k))
    return np.array(out, dtype=RAW_DTYPE)


def iter_events(events: np.ndarray) -> Iterator[RawEvent]:
    for rec in events:
        yield RawEvent(int(rec["timetag"]), int(rec["setting"]), int(rec["kind"]))


def format_events(events: np.ndarray) -> str:
    if len(events) == 0:
        return ""
    cols = np.column_stack([events["timetag"], events["setting"].astype(np.int64), events["kind"].astype(np.int64)])
    buf = io.StringIO()
    np.savetxt(buf, cols, fmt="%d")
    return buf.getvalue()


def write_events(path: str | os.PathLike, events: np.ndarray) -> None:
    Path(path).write_text(format_events(events))


def sort_events(events: np.ndarray) -> np.ndarray:
    """Stable ascending sort by timetag (ties keep their input order)."""
    return events[np.argsort(events["timetag"], kind="stable")]


def opening_offset_ticks(period_us: float) -> int:
    return int(round(period_us * 1e6 / 2 / TICK_PS))


def insert_missing_openings(events: np.ndarray, period_us: float = 40.0) -> np.ndarray:
    """Add an opening with the same setting half a period after each recorded one.

    The result is sorted ascending by timetag.
    """
    openings = events[events["kind"] == KIND_OPENING].copy()
    openings["timetag"] += opening_offset_ticks(period_us)
    return sort_events(np.concatenate([events, openings]))


@dataclass(eq=False)
class CompiledFile:
    total_trials: np.ndarray
    events: np.ndarray

    def __post_init__(self) -> None:
        self.total_trials = np.asarray(self.total_trials, dtype=np.uint32).reshape(4)
        if self.events.dtype != EVENT_DTYPE:
            raise TypeError("events must use EVENT_DTYPE")

    @classmethod
    def empty(cls) -> CompiledFile:
        return cls(np.zeros(4, dtype=np.uint32), np.zeros(0, dtype=EVENT_DTYPE))

    @property
    def num_detection_events(self) -> int:
        return len(self.events)

    @property
    def orphans(self) -> np.ndarray:
        """Mask of detections with no preceding opening."""
        return np.isneginf(self.events["pockels_time"])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CompiledFile):
            return NotImplemented
        return to_bytes(self) == to_bytes(other)


def compile_events(events: np.ndarray) -> CompiledFile:
    """Compile time-ordered raw events into a ``CompiledFile``.

    Openings are counted, not stored. Every detection carries the time of the
    latest opening at or before it in stream order and the per-setting opening
    counts so far. Detections preceding every opening get ``-inf`` as their
    opening time.
    """
    tt = events["timetag"]
    if len(tt) and (np.diff(tt) < 0).any():
        i = int(np.flatnonzero(np.diff(tt) < 0)[0]) + 1
        raise ValueError(f"events not in ascending time order at record {i}")
    if len(tt) and tt.max() >= EXACT_TIMETAG_LIMIT:
        raise ValueError(f"timetag {int(tt.max())} exceeds exact ps conversion range")
    _validate_codes(events)

    is_open = events["kind"] == KIND_OPENING
    setting_idx = np.searchsorted(np.array(SETTING_CODES), events["setting"])
    onehot = np.zeros((len(events), 4), dtype=np.int64)
    onehot[np.flatnonzero(is_open), setting_idx[is_open]] = 1
    cumulative = np.cumsum(onehot, axis=0)

    idx = np.arange(len(events))
    last_open = np.maximum.accumulate(np.where(is_open, idx, -1)) if len(events) else idx
    times_ps = tt.astype(np.float64) * TICK_PS

    det = ~is_open
    out = np.zeros(int(det.sum()), dtype=EVENT_DTYPE)
    out["raw_time"] = times_ps[det]
    prev = last_open[det]
    out["pockels_time"] = np.where(prev >= 0, times_ps[np.maximum(prev, 0)], -np.inf)
    out["setting"] = setting_idx[det]
    out["channel"] = events["kind"][det]
    out["trials"] = cumulative[det]
    total = cumulative[-1] if len(events) else np.zeros(4, dtype=np.int64)
    return CompiledFile(total_trials=total, events=out)


def compile_files(paths: Iterable[str | os.PathLike]) -> CompiledFile:
    """Parse each file, concatenate in the given order, then compile."""
    parts = [parse_events(p) for p in paths]
    merged = np.concatenate(parts) if parts else np.zeros(0, dtype=RAW_DTYPE)
    return compile_events(merged)


def to_bytes(compiled: CompiledFile) -> bytes:
    header = HEADER.pack(MAGIC, compiled.num_detection_events, *(int(v) for v in compiled.total_trials))
    return header + compiled.events.tobytes()


def from_bytes(data: bytes) -> CompiledFile:
    if len(data) < HEADER.size:
        raise CompiledFormatError(f"truncated header: {len(data)} of {HEADER.size} bytes")
    magic, n, *totals = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CompiledFormatError(f"bad magic {magic!r}")
    body = len(data) - HEADER.size
    expected = n * EVENT_DTYPE.itemsize
    if body < expected:
        raise CompiledFormatError(f"truncated: header declares {n} events, file holds {body // EVENT_DTYPE.itemsize}")
    if body > expected:
        raise CompiledFormatError(f"count mismatch: {body - expected} trailing bytes after {n} events")
    events = np.frombuffer(data, dtype=EVENT_DTYPE, count=n, offset=HEADER.size).copy()
    return CompiledFile(np.array(totals, dtype=np.uint32), events)


def store(compiled: CompiledFile, path: str | os.PathLike) -> None:
    Path(path).write_bytes(to_bytes(compiled))


def load(path: str | os.PathLike) -> CompiledFile:
    return from_bytes(Path(path).read_bytes())
