import time

import numpy as np
import pytest

from bellch.ingest import KIND_OPENING, KIND_SIDE1, KIND_SIDE2, compile_events, raw_events

# counts published for the original analysis: rows a1b1, a1b2, a2b1, a2b2;
# columns singles A, coincidences, singles B, trials
UNFIXED_COU = [
    [46068, 29173, 46039, 27153020],
    [48076, 34145, 146205, 28352350],
    [150840, 34473, 47447, 27827318],
    [150505, 1862, 144070, 27926994],
]
FIXED_COU = [
    [46960, 29221, 46971, 27153020],
    [49048, 34203, 148026, 28352350],
    [153728, 34513, 48100, 27827318],
    [153531, 1868, 146103, 27926994],
]

US_TICKS = 6400  # 1 us in 156.25 ps ticks
PERIOD_TICKS = 40 * US_TICKS


def build_stream(trials, start=10 * PERIOD_TICKS):
    """Raw events from ``[(setting_code, [side1 offsets us], [side2 offsets us]), ...]``.

    One opening per trial, 40 us apart; offsets are relative to the opening.
    """
    recs = []
    for k, (code, s1, s2) in enumerate(trials):
        t0 = start + k * PERIOD_TICKS
        recs.append((t0, code, KIND_OPENING))
        for off in s1:
            recs.append((t0 + int(round(off * US_TICKS)), code, KIND_SIDE1))
        for off in s2:
            recs.append((t0 + int(round(off * US_TICKS)), code, KIND_SIDE2))
    recs.sort(key=lambda r: r[0])
    return raw_events(recs)


@pytest.fixture
def stream_builder():
    return build_stream


@pytest.fixture
def compile_trials():
    def _make(trials, **kw):
        return compile_events(build_stream(trials, **kw))

    return _make


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def interleaved_min_times(func, inputs, rounds=9):
    """Best wall time of ``func(x)`` per input, timing the inputs round-robin.

    Interleaving spreads machine-speed drift evenly across sizes.
    """
    for x in inputs:
        func(x)
    best = [float("inf")] * len(inputs)
    for _ in range(rounds):
        for i, x in enumerate(inputs):
            t0 = time.perf_counter()
            func(x)
            best[i] = min(best[i], time.perf_counter() - t0)
    return best


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, status: str, detail: str) -> None:
    line = f"{status} criterion {number}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
