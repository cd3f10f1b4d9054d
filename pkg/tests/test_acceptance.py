"""Acceptance criteria, each run at its stated tolerance.

Every criterion records one PASS / FAIL / NOT-RUN line, echoed in the pytest
terminal summary.
"""

import itertools
import json
import math
import os
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from bellch.accidentals import greedy_coincidences
from bellch.analysis import (
    AnalysisParams,
    DelaySet,
    TouchCounter,
    histogram_per_trial,
    iter_buckets,
    partition_analysis,
    partition_tables,
    scan_windows,
    whole_table,
)
from bellch.cli import main as cli_main
from bellch.ingest import compile_events, from_bytes, insert_missing_openings, parse_events, to_bytes
from bellch.metrics import CountTable, ch_linear
from bellch.quantum import AngleSet, EntangledState, joint_detection_probabilities
from bellch.simulator import SimConfig, SynthTiming, evaluate, events_from_outcomes, powell_search
from conftest import FIXED_COU, UNFIXED_COU, build_stream, interleaved_min_times, record_criterion
from test_accidentals import naive_earliest_first
from test_quantum import density_matrix_oracle

STATE = EntangledState(0.26)
SEARCH = dict(restarts=10, seed=0, runs=100)


def _finish(number, checks):
    """``checks`` maps a label to (passed, observed)."""
    ok = all(passed for passed, _ in checks.values())
    detail = "; ".join(f"{k}={v} [{'ok' if p else 'FAIL'}]" for k, (p, v) in checks.items())
    record_criterion(number, "PASS" if ok else "FAIL", detail)
    failed = [k for k, (p, _) in checks.items() if not p]
    assert not failed, f"criterion {number} failed: {', '.join(failed)}"


def test_criterion_1_golden_ch():
    unfixed = ch_linear(CountTable.from_matrix(UNFIXED_COU)).ch_linear
    fixed = ch_linear(CountTable.from_matrix(FIXED_COU)).ch_linear
    _finish(
        1,
        {
            "unfixed": (abs(unfixed - 5.8701e-05) <= 1e-9, f"{unfixed:.6e}"),
            "fixed": (abs(fixed - -3.4379e-06) <= 1e-9, f"{fixed:.6e}"),
        },
    )


def test_criterion_2_quantum_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        r, a, b = rng.uniform(0, 1), rng.uniform(-np.pi, np.pi), rng.uniform(-np.pi, np.pi)
        ours = joint_detection_probabilities(EntangledState(r), a, b).as_array()
        worst = max(worst, float(np.abs(ours - density_matrix_oracle(r, a, b)).max()))
    _finish(2, {"max_abs_error": (worst <= 1e-12, f"{worst:.2e}")})


def test_criterion_3_table1():
    plain = powell_search(STATE, 0.75, partition_size=10_000, **SEARCH)
    averaged = powell_search(STATE, 0.75, partition_size=10_000, averaging=True, **SEARCH)
    full = powell_search(STATE, 1.0, partition_size=10_000, **SEARCH)
    hundred = evaluate(SimConfig(STATE, full.angles, efficiency=1.0, runs=100, seed=5), replicates=1)
    _finish(
        3,
        {
            "ch@0.75": (abs(plain.mean_ch - 0.003794) <= 0.0015, f"{plain.mean_ch:.6f}"),
            "positivity@0.75": (abs(plain.positivity - 0.848) <= 0.06, f"{plain.positivity:.3f}"),
            "averaged_ch@0.75<0": (averaged.mean_ch < 0, f"{averaged.mean_ch:.6f}"),
            "averaged_positivity@0.75<=0.40": (averaged.positivity <= 0.40, f"{averaged.positivity:.3f}"),
            "positivity@1.0 (100 runs)": (hundred.positivity == 1.0, f"{hundred.positivity:.3f}"),
        },
    )


TABLE2 = {100: 0.471, 1000: 0.604, 10_000: 0.847, 50_000: 0.986}


def test_criterion_4_table2():
    pos = {p: powell_search(STATE, 0.75, partition_size=p, **SEARCH).positivity for p in TABLE2}
    values = list(pos.values())
    checks = {f"P={p}": (abs(pos[p] - ref) <= 0.04, f"{pos[p]:.3f}") for p, ref in TABLE2.items()}
    checks["increasing"] = (all(b > a for a, b in zip(values, values[1:])), "yes" if values == sorted(set(values)) else "no")
    checks["P=100<0.5"] = (pos[100] < 0.5, f"{pos[100]:.3f}")
    checks["P=50000>0.95"] = (pos[50_000] > 0.95, f"{pos[50_000]:.3f}")
    _finish(4, checks)


def test_criterion_5_table3():
    noise = (0.0, 0.001, 0.003, 0.005)
    pos = [powell_search(STATE, 0.75, noise=n, partition_size=10_000, **SEARCH).positivity for n in noise]
    _finish(
        5,
        {
            "positivity": (all(b < a for a, b in zip(pos, pos[1:])), ",".join(f"{p:.3f}" for p in pos)),
            "noise=0.005<0.10": (pos[-1] < 0.10, f"{pos[-1]:.3f}"),
        },
    )


def _random_stream(rng, n_trials):
    trials = []
    for k in range(n_trials):
        code = (11, 12, 21, 22)[k % 4]
        n1, n2 = rng.integers(0, 3, 2)
        trials.append((code, list(rng.uniform(-0.5, 3.5, n1)), list(rng.uniform(-0.5, 3.5, n2))))
    return build_stream(trials)


def test_criterion_6_pipeline_properties():
    rng = np.random.default_rng(6)
    checks = {}

    ok = True
    for _ in range(50):
        cf = compile_events(_random_stream(rng, 40))
        ok &= from_bytes(to_bytes(cf)) == cf and to_bytes(from_bytes(to_bytes(cf))) == to_bytes(cf)
    checks["round_trip"] = (ok, "bit-exact" if ok else "mismatch")

    ok = True
    for _ in range(50):
        raw = _random_stream(rng, 40)
        cf = compile_events(raw)
        det = raw[raw["kind"] != 15]
        ok &= np.array_equal(cf.events["raw_time"], det["timetag"] * 156.25)
        ok &= cf.total_trials.tolist() == [int(((raw["kind"] == 15) & (raw["setting"] == c)).sum()) for c in (11, 12, 21, 22)]
    checks["losslessness"] = (ok, "exact" if ok else "mismatch")

    dom = eq = concat = True
    for _ in range(50):
        cf = compile_events(_random_stream(rng, 60))
        params = AnalysisParams(partition_size=int(rng.integers(1, 30)), delays=DelaySet(*rng.uniform(-0.3, 0.3, 2)))
        full = partition_tables(cf, params)
        legacy = partition_tables(cf, params.with_(counting_mode="legacy"))
        dom &= all((g.as_matrix() <= f.as_matrix()).all() for f, g in zip(full, legacy))
        concat &= sum(full, CountTable.zeros()) == whole_table(cf, params)
        clean = build_stream([((11, 12, 21, 22)[k % 4], [1.0] * int(rng.integers(0, 2)), [1.5] * int(rng.integers(0, 2))) for k in range(60)])
        ccf = compile_events(clean)
        eq &= partition_tables(ccf, params) == partition_tables(ccf, params.with_(counting_mode="legacy"))
    checks["dominance"] = (dom, "holds" if dom else "violated")
    checks["clean_equivalence"] = (eq, "holds" if eq else "violated")
    checks["concatenation"] = (concat, "holds" if concat else "violated")

    ok = True
    grid_lists = [c for n in range(4) for c in itertools.combinations_with_replacement(range(5), n)]
    for a, b in itertools.product(grid_lists, grid_lists):
        for w in (0, 1, 2):
            ok &= greedy_coincidences(a, b, w) == naive_earliest_first(a, b, w)
    for _ in range(3000):
        a = np.sort(rng.integers(0, 40, rng.integers(0, 9)))
        b = np.sort(rng.integers(0, 40, rng.integers(0, 9)))
        w = int(rng.integers(0, 6))
        ok &= greedy_coincidences(a, b, w) == naive_earliest_first(list(a), list(b), w)
    checks["greedy_oracle"] = (ok, "agrees" if ok else "differs")

    sizes = [50_000, 100_000, 200_000, 400_000, 800_000]
    params = AnalysisParams(partition_size=1000)
    files, touches = [], []
    for n in sizes:
        r2 = np.random.default_rng(n)
        s = np.tile(np.arange(4), n // 4)
        cf = compile_events(events_from_outcomes(s, r2.poisson(0.6, n), r2.poisson(0.6, n), SynthTiming(), r2))
        c = TouchCounter()
        for _ in iter_buckets(cf, params, c):
            pass
        files.append(cf)
        touches.append(c.touches)
    xs = [cf.num_detection_events for cf in files]
    ts = interleaved_min_times(lambda cf: partition_analysis(cf, params), files)
    r2_time = stats.linregress(xs, ts).rvalue ** 2
    r2_touch = stats.linregress(xs, touches).rvalue ** 2
    checks["linear_time_R2"] = (r2_time > 0.99, f"{r2_time:.4f}")
    checks["linear_touches_R2"] = (r2_touch > 0.99, f"{r2_touch:.6f}")
    _finish(6, checks)


def test_criterion_7_end_to_end(tmp_path, capsys):
    state = EntangledState(1.0)
    angles = AngleSet(0.0, 0.4, 0.0, 1.1)
    n = 20_000
    txt, binary, report = tmp_path / "synth.txt", tmp_path / "synth.bin", tmp_path / "analyze.tsv"
    codes = [
        cli_main(["synth", "--r", "1", "--efficiency", "1", "--noise", "0", "--angles", *map(str, angles.as_tuple()),
                  "--trials-per-setting", str(n), "--seed", "7", "-o", str(txt)]),
        cli_main(["compile", str(txt), "-o", str(binary)]),
        cli_main(["analyze", str(binary), "--partition", "all", "--window", "2.0", "--out", str(report)]),
    ]
    capsys.readouterr()
    counts = np.array(json.loads(Path(str(report) + ".json").read_text())["data"]["counts"])
    checks = {"exit_codes": (codes == [0, 0, 0], str(codes))}
    for s, (alpha, beta) in enumerate(angles.setting_pairs()):
        p = joint_detection_probabilities(state, alpha, beta).p_cc
        rate = counts[s, 1] / counts[s, 3]
        sigma = math.sqrt(p * (1 - p) / counts[s, 3])
        z = (rate - p) / sigma if sigma > 0 else (0.0 if rate == p else math.inf)
        checks[f"setting{s}"] = (abs(z) <= 3, f"C/N={rate:.4f} p={p:.4f} z={z:+.2f}")
    _finish(7, checks)


def _dataset_files():
    root = os.environ.get("BELLCH_DATA_DIR")
    if not root:
        return None
    files = [Path(root) / f"data{i}.txt" for i in range(1, 21)]
    return files if all(f.exists() for f in files) else None


def test_criterion_8_original_dataset(tmp_path):
    files = _dataset_files()
    if files is None:
        record_criterion(8, "NOT-RUN", "raw dataset (data1.txt..data20.txt under BELLCH_DATA_DIR) not available")
        pytest.skip("criterion 8 NOT-RUN: raw dataset unavailable")
    raw = np.concatenate([insert_missing_openings(parse_events(f)) for f in files])
    cf = compile_events(raw)
    params = AnalysisParams(window=2.5, delays=DelaySet(1.292, 1.195), partition_size=10_000)
    pa = partition_analysis(cf, params)
    whole = ch_linear(whole_table(cf, params)).ch_linear
    windows = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0]
    table6 = [a.report.positivity for _, a in scan_windows(cf, params, windows)]
    hist = histogram_per_trial(cf, params, 1)
    fixed = whole_table(cf, params)
    _finish(
        8,
        {
            "fixed_counts": (np.array_equal(fixed.as_matrix(), np.array(FIXED_COU)), "match" if np.array_equal(fixed.as_matrix(), np.array(FIXED_COU)) else "differ"),
            "table5_P=1e4": (
                abs(pa.report.positivity - 0.494737) < 5e-7 and pa.report.total - pa.report.sufficient == 3 and pa.report.total == 98,
                f"{pa.report.positivity:.6f} ({pa.report.total - pa.report.sufficient} of {pa.report.total} insufficient)",
            ),
            "whole_ch": (abs(whole - -0.000032) < 5e-7, f"{whole:.6f}"),
            "table6_peak@2.5": (windows[int(np.nanargmax(table6))] == 2.5, str(windows[int(np.nanargmax(table6))])),
            "histogram_head": ([hist.get(k) for k in range(3)] == [390174, 388931, 5766], str([hist.get(k) for k in range(4)])),
        },
    )
