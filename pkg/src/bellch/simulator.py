"""Monte Carlo quantum joint prediction and Powell search over analyzer angles.

A simulated run draws ``partition_size`` trials for each of the four setting
combinations and reduces them to a ``CountTable``. Because a table only needs
the per-setting totals, each setting's trials are drawn as one multinomial
over the exact 3x3 per-trial outcome distribution. That has the same law as
calling ``sample_trial`` ``partition_size`` times.

Random streams are derived from ``(seed, *task path)`` with
``numpy.random.SeedSequence`` so restarts and replicates can run in any order
or in parallel and still give bit-identical results.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Literal, Optional, Sequence

import numpy as np

from bellch.ingest import KIND_OPENING, KIND_SIDE1, KIND_SIDE2, RAW_DTYPE, TICK_PS, format_events, sort_events
from bellch.metrics import SETTING_CODES, CountTable, ch_terms_batch
from bellch.powell import powell_minimize
from bellch.quantum import AngleSet, EntangledState, joint_detection_probabilities, outcome_distribution, sample_trials

# Angle held fixed during search. With the |HH> + r|VV> convention the CH
# optimum lies near an analyzer crossed with the dominant polarization.
REFERENCE_A1 = math.pi / 2

_NA = np.repeat(np.arange(3), 3)
_NB = np.tile(np.arange(3), 3)
_COINC = np.minimum(_NA, _NB)


def stream(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(path)))


@dataclass(frozen=True)
class SimConfig:
    state: EntangledState
    angles: AngleSet
    efficiency: float = 0.75
    noise: float = 0.0
    partition_size: int = 10_000
    runs: int = 100
    seed: int = 0
    averaging: bool = False

    def __post_init__(self) -> None:
        if self.partition_size < 1:
            raise ValueError("partition_size must be >= 1")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        for name in ("efficiency", "noise"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class PredictionResult:
    mean_ch: float
    mean_ratio: float
    positivity: float
    angles: AngleSet
    replicates: int
    runs: int = 0
    ch_std: float = math.nan
    search_value: Optional[float] = None


def setting_distributions(config: SimConfig) -> np.ndarray:
    """Flattened 3x3 outcome distributions for a1b1, a1b2, a2b1, a2b2, shape (4, 9)."""
    rows = []
    for alpha, beta in config.angles.setting_pairs():
        probs = joint_detection_probabilities(config.state, alpha, beta)
        dist = outcome_distribution(probs, config.efficiency, config.noise).ravel()
        rows.append(np.clip(dist, 0.0, None) / dist.sum())
    return np.array(rows)


def simulate_counts(config: SimConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-run counts, shape (runs, 3, 4): singles_a, coincidences, singles_b by setting."""
    dists = setting_distributions(config)
    out = np.empty((config.runs, 3, 4), dtype=np.int64)
    for s in range(4):
        cells = rng.multinomial(config.partition_size, dists[s], size=config.runs)
        out[:, 0, s] = cells @ _NA
        out[:, 1, s] = cells @ _COINC
        out[:, 2, s] = cells @ _NB
    return out


def simulate_tables(config: SimConfig, rng: np.random.Generator) -> list[CountTable]:
    counts = simulate_counts(config, rng)
    n = np.full(4, config.partition_size)
    return [CountTable(c[0], c[1], c[2], n) for c in counts]


def simulate_tables_by_trial(config: SimConfig, rng: np.random.Generator) -> list[CountTable]:
    """Same law as ``simulate_tables`` but sampling every trial individually."""
    tables = []
    pairs = config.angles.setting_pairs()
    for _ in range(config.runs):
        sa, c, sb = np.zeros(4, np.int64), np.zeros(4, np.int64), np.zeros(4, np.int64)
        for s, (alpha, beta) in enumerate(pairs):
            probs = joint_detection_probabilities(config.state, alpha, beta)
            da, db = sample_trials(probs, config.efficiency, config.noise, rng, config.partition_size)
            sa[s], c[s], sb[s] = da.sum(), np.minimum(da, db).sum(), db.sum()
        tables.append(CountTable(sa, c, sb, np.full(4, config.partition_size)))
    return tables


def _run_metrics(config: SimConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    counts = simulate_counts(config, rng)
    n = np.full(4, config.partition_size)
    pos, neg = ch_terms_batch(counts[:, 0], counts[:, 1], counts[:, 2], n, config.averaging)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(neg > 0, pos / neg, np.nan)
    return pos - neg, ratio


def evaluate(config: SimConfig, replicates: int = 1, path: Sequence[int] = (0,)) -> PredictionResult:
    """Average CH metrics over ``replicates`` independent sets of ``runs`` runs."""
    chs, ratios = [], []
    for k in range(replicates):
        ch, ratio = _run_metrics(config, stream(config.seed, *path, k))
        chs.append(ch)
        ratios.append(ratio)
    ch = np.concatenate(chs)
    ratio = np.concatenate(ratios)
    return PredictionResult(
        mean_ch=float(ch.mean()),
        mean_ratio=float(np.nanmean(ratio)) if np.isfinite(ratio).any() else math.nan,
        positivity=float((ch > 0).mean()),
        angles=config.angles,
        replicates=replicates,
        runs=config.runs,
        ch_std=float(ch.std()),
    )


def run_experiment(config: SimConfig) -> PredictionResult:
    return evaluate(config, replicates=1)


def expected_rates(config: SimConfig) -> np.ndarray:
    """Expected per-trial singles_a, coincidences, singles_b by setting, shape (3, 4)."""
    dists = setting_distributions(config)
    return np.vstack([dists @ _NA, dists @ _COINC, dists @ _NB])


def expected_ch(config: SimConfig) -> tuple[float, float]:
    """Large-partition limit of (CH, CH ratio): the metrics of the expected rates."""
    sa, c, sb = expected_rates(config)
    pos, neg = ch_terms_batch(sa, c, sb, np.ones(4), config.averaging)
    return float(pos - neg), float(pos / neg) if neg > 0 else math.nan


def optimal_angles(
    state: EntangledState,
    efficiency: float,
    noise: float = 0.0,
    averaging: bool = False,
    *,
    starts: int = 16,
    seed: int = 0,
    fixed_a1: float = REFERENCE_A1,
) -> AngleSet:
    """Angles maximizing the expected CH, by deterministic Powell multistart."""
    template = SimConfig(state, AngleSet(fixed_a1, 0, 0, 0), efficiency, noise, averaging=averaging)

    def f(x: np.ndarray) -> float:
        return -expected_ch(replace(template, angles=AngleSet(fixed_a1, *map(float, x))))[0]

    rng = stream(seed, 3)
    best = min((powell_minimize(f, rng.uniform(0, math.pi, 3), ftol=1e-12) for _ in range(starts)), key=lambda r: r.fun)
    return AngleSet(fixed_a1, *map(float, best.x)).canonical()


@dataclass(frozen=True)
class SearchSettings:
    state: EntangledState
    efficiency: float
    noise: float = 0.0
    partition_size: int = 10_000
    averaging: bool = False
    runs: int = 100
    seed: int = 0
    fixed_a1: float = REFERENCE_A1

    def config(self, x) -> SimConfig:
        return SimConfig(
            state=self.state,
            angles=AngleSet(self.fixed_a1, float(x[0]), float(x[1]), float(x[2])),
            efficiency=self.efficiency,
            noise=self.noise,
            partition_size=self.partition_size,
            runs=self.runs,
            seed=self.seed,
            averaging=self.averaging,
        )

    def objective(self, restart: int) -> Callable[[np.ndarray], float]:
        # common random numbers within a restart keep line searches coherent
        def f(x: np.ndarray) -> float:
            ch, _ = _run_metrics(self.config(x), stream(self.seed, 0, restart, 1))
            return -float(ch.mean())

        return f

    def start(self, restart: int) -> np.ndarray:
        return stream(self.seed, 0, restart, 0).uniform(0.0, math.pi, 3)


@dataclass(frozen=True)
class RestartOutcome:
    restart: int
    start: np.ndarray = field(compare=False)
    start_value: float
    x: np.ndarray = field(compare=False)
    value: float
    evaluations: int


def run_restart(settings: SearchSettings, restart: int) -> RestartOutcome:
    f = settings.objective(restart)
    x0 = settings.start(restart)
    res = powell_minimize(f, x0)
    return RestartOutcome(restart, x0, -f(x0), res.x, -res.fun, res.evaluations)


def powell_search(
    state: EntangledState,
    efficiency: float,
    noise: float = 0.0,
    partition_size: int = 10_000,
    averaging: bool = False,
    restarts: int = 10,
    seed: int = 0,
    *,
    runs: int = 100,
    replicates: int = 10,
    fixed_a1: float = REFERENCE_A1,
    workers: int = 1,
    on_incumbent: Optional[Callable[[PredictionResult], None]] = None,
) -> PredictionResult:
    """Search (a2, b1, b2) for the largest mean CH with a1 held fixed.

    Each restart runs Powell from a uniform random start in [0, pi)^3. The best
    point over all restarts is re-evaluated as the mean of ``replicates``
    independent simulations, and those metrics are returned.
    ``on_incumbent`` is called with that re-evaluation each time a restart
    improves on the best so far.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    settings = SearchSettings(state, efficiency, noise, partition_size, averaging, runs, seed, fixed_a1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_restart, [settings] * restarts, range(restarts)))
    else:
        outcomes = [run_restart(settings, r) for r in range(restarts)]

    best: Optional[RestartOutcome] = None
    for out in outcomes:
        if best is None or out.value > best.value:
            best = out
            if on_incumbent is not None:
                on_incumbent(_reevaluate(settings, best, replicates))
    assert best is not None
    return _reevaluate(settings, best, replicates)


def _reevaluate(settings: SearchSettings, best: RestartOutcome, replicates: int) -> PredictionResult:
    cfg = settings.config(best.x)
    cfg = replace(cfg, angles=cfg.angles.canonical())
    res = evaluate(cfg, replicates=replicates, path=(1,))
    return replace(res, search_value=best.value)


# --- synthetic event streams -------------------------------------------------


@dataclass(frozen=True)
class SynthTiming:
    period: float = 40.0  # us between openings
    window: float = 2.0  # us the cell stays open
    delay_1: float = 0.0  # us time of flight added at side 1
    delay_2: float = 0.0
    jitter: float = 0.0  # ns, gaussian sd per detection
    start_tick: int = 1_000_000
    order: Literal["cycle", "block", "random"] = "cycle"
    drop_alternate_openings: bool = False


def trial_settings(trials_per_setting: int, order: str, rng: np.random.Generator) -> np.ndarray:
    if order == "cycle":
        return np.tile(np.arange(4), trials_per_setting)
    if order == "block":
        return np.repeat(np.arange(4), trials_per_setting)
    if order == "random":
        return rng.permutation(np.tile(np.arange(4), trials_per_setting))
    raise ValueError(f"unknown setting order {order!r}")


def _ticks(ps: np.ndarray) -> np.ndarray:
    return np.floor(ps / TICK_PS).astype(np.int64)


def events_from_outcomes(
    settings: np.ndarray,
    detect_a: np.ndarray,
    detect_b: np.ndarray,
    timing: SynthTiming,
    rng: np.random.Generator,
) -> np.ndarray:
    """Raw events for trials with given settings and per-side detection counts.

    The first detection at each side shares the trial's emission time (a pair);
    further detections get independent uniform times within the opening.
    """
    n = len(settings)
    period_ps = timing.period * 1e6
    window_ps = timing.window * 1e6
    openings_ps = timing.start_tick * TICK_PS + np.arange(n) * period_ps
    emission = rng.uniform(0.0, window_ps, n)
    parts = []
    keep_open = np.ones(n, dtype=bool)
    if timing.drop_alternate_openings:
        keep_open[1::2] = False
    op = np.zeros(int(keep_open.sum()), dtype=RAW_DTYPE)
    op["timetag"] = _ticks(openings_ps[keep_open])
    op["setting"] = np.array(SETTING_CODES)[settings[keep_open]]
    op["kind"] = KIND_OPENING
    parts.append(op)
    for counts, delay, kind in ((detect_a, timing.delay_1, KIND_SIDE1), (detect_b, timing.delay_2, KIND_SIDE2)):
        counts = np.asarray(counts, dtype=np.int64)
        trial = np.repeat(np.arange(n), counts)
        first = np.r_[True, trial[1:] != trial[:-1]] if trial.size else np.zeros(0, bool)
        offset = np.where(first, emission[trial], rng.uniform(0.0, window_ps, trial.size))
        if timing.jitter > 0:
            offset = offset + rng.normal(0.0, timing.jitter * 1e3, trial.size)
        det = np.zeros(trial.size, dtype=RAW_DTYPE)
        det["timetag"] = _ticks(openings_ps[trial] + offset + delay * 1e6)
        det["setting"] = np.array(SETTING_CODES)[settings[trial]]
        det["kind"] = kind
        parts.append(det)
    return sort_events(np.concatenate(parts))


def synthesize(config: SimConfig, timing: SynthTiming = SynthTiming(), trials_per_setting: Optional[int] = None) -> np.ndarray:
    """Raw events for a simulated experiment.

    Defaults to ``runs * partition_size`` trials per setting.
    """
    rng = stream(config.seed, 2)
    n_per = config.runs * config.partition_size if trials_per_setting is None else trials_per_setting
    settings = trial_settings(n_per, timing.order, rng)
    det_a = np.zeros(settings.size, dtype=np.int64)
    det_b = np.zeros(settings.size, dtype=np.int64)
    for s, (alpha, beta) in enumerate(config.angles.setting_pairs()):
        idx = np.flatnonzero(settings == s)
        probs = joint_detection_probabilities(config.state, alpha, beta)
        det_a[idx], det_b[idx] = sample_trials(probs, config.efficiency, config.noise, rng, idx.size)
    return events_from_outcomes(settings, det_a, det_b, timing, rng)


def emit_synthetic_events(
    config: SimConfig, timing: SynthTiming = SynthTiming(), trials_per_setting: Optional[int] = None
) -> str:
    """Synthetic experiment as event text, one ``timetag setting kind`` per line."""
    return format_events(synthesize(config, timing, trials_per_setting))


def poisson_pair_events(
    pairs_per_trial: float,
    efficiency: float,
    trials_per_setting: int,
    timing: SynthTiming,
    rng: np.random.Generator,
) -> np.ndarray:
    """Events from a source emitting Poisson(``pairs_per_trial``) pairs per opening.

    Every pair has its own emission time, and each photon is detected
    independently with probability ``efficiency``. Used to exercise
    accidental coincidences.
    """
    settings = trial_settings(trials_per_setting, timing.order, rng)
    n = settings.size
    pairs = rng.poisson(pairs_per_trial, n)
    trial = np.repeat(np.arange(n), pairs)
    window_ps = timing.window * 1e6
    emission = rng.uniform(0.0, window_ps, trial.size)
    openings_ps = timing.start_tick * TICK_PS + np.arange(n) * timing.period * 1e6
    parts = []
    op = np.zeros(n, dtype=RAW_DTYPE)
    op["timetag"] = _ticks(openings_ps)
    op["setting"] = np.array(SETTING_CODES)[settings]
    op["kind"] = KIND_OPENING
    parts.append(op)
    for delay, kind in ((timing.delay_1, KIND_SIDE1), (timing.delay_2, KIND_SIDE2)):
        hit = rng.random(trial.size) < efficiency
        t = openings_ps[trial[hit]] + emission[hit] + delay * 1e6
        if timing.jitter > 0:
            t = t + rng.normal(0.0, timing.jitter * 1e3, t.size)
        det = np.zeros(t.size, dtype=RAW_DTYPE)
        det["timetag"] = _ticks(t)
        det["setting"] = np.array(SETTING_CODES)[settings[trial[hit]]]
        det["kind"] = kind
        parts.append(det)
    return sort_events(np.concatenate(parts))
