import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from bellch.metrics import ChResult, CountTable, InsufficientTableError, ch_linear, positivity
from conftest import FIXED_COU, UNFIXED_COU


def test_golden_unfixed_counts():
    assert ch_linear(CountTable.from_matrix(UNFIXED_COU)).ch_linear == pytest.approx(5.8701e-05, abs=1e-9)


def test_golden_fixed_counts():
    assert ch_linear(CountTable.from_matrix(FIXED_COU)).ch_linear == pytest.approx(-3.4379e-06, abs=1e-9)


def test_post_selection_sign_flip():
    assert ch_linear(CountTable.from_matrix(UNFIXED_COU)).violated
    assert not ch_linear(CountTable.from_matrix(FIXED_COU)).violated


def test_zero_counts():
    res = ch_linear(CountTable([0] * 4, [0] * 4, [0] * 4, [1] * 4))
    assert res.ch_linear == 0 and not res.violated


def test_insufficient_table_rejected():
    with pytest.raises(InsufficientTableError, match="a2b1"):
        ch_linear(CountTable([1] * 4, [1] * 4, [1] * 4, [5, 5, 0, 5]))


def test_averaging_definition():
    t = CountTable([10, 30, 0, 0], [4, 5, 6, 1], [20, 0, 40, 0], [100, 200, 300, 400])
    pos = 4 / 100 + 5 / 200 + 6 / 300
    plain = pos - (1 / 400 + 10 / 100 + 20 / 100)
    pooled = pos - (1 / 400 + 40 / 300 + 60 / 400)
    assert ch_linear(t).ch_linear == pytest.approx(plain, abs=1e-15)
    assert ch_linear(t, averaging=True).ch_linear == pytest.approx(pooled, abs=1e-15)


def test_ratio_form_matches_linear():
    t = CountTable.from_matrix(FIXED_COU)
    res = ch_linear(t)
    c = t.coincidences / t.trials
    neg = c[3] + t.singles_a[0] / t.trials[0] + t.singles_b[0] / t.trials[0]
    assert res.ch_ratio == pytest.approx((c[0] + c[1] + c[2]) / neg, rel=1e-14)
    assert res.ch_ratio < 1


tables = st.builds(
    lambda sa, c, sb, n: CountTable(sa, c, sb, n),
    st.lists(st.integers(0, 10_000), min_size=4, max_size=4),
    st.lists(st.integers(0, 10_000), min_size=4, max_size=4),
    st.lists(st.integers(0, 10_000), min_size=4, max_size=4),
    st.lists(st.integers(1, 100_000), min_size=4, max_size=4),
)


@given(tables, st.integers(1, 1000), st.booleans())
def test_scaling_invariance(t, k, avg):
    scaled = CountTable(t.singles_a * k, t.coincidences * k, t.singles_b * k, t.trials * k)
    a, b = ch_linear(t, avg), ch_linear(scaled, avg)
    assert abs(a.ch_linear - b.ch_linear) < 1e-12
    if not math.isnan(a.ch_ratio):
        assert abs(a.ch_ratio - b.ch_ratio) < 1e-12 * max(1.0, abs(a.ch_ratio))


@given(tables, st.booleans())
def test_linear_and_ratio_forms_agree(t, avg):
    res = ch_linear(t, avg)
    if not math.isnan(res.ch_ratio):
        # exact ties are representable in floating point only up to rounding
        if abs(res.ch_linear) > 1e-12:
            assert res.violated == (res.ch_ratio > 1)


def test_table_addition_and_matrix_roundtrip():
    t = CountTable.from_matrix(UNFIXED_COU)
    assert CountTable.from_matrix(t.as_matrix()) == t
    assert (t + CountTable.zeros()) == t


def _results(n_pos, n_neg, n_none=0):
    return [ChResult(1.0, 2.0, True)] * n_pos + [ChResult(-1.0, 0.5, False)] * n_neg + [None] * n_none


def test_positivity_eleven_of_twenty():
    rep = positivity(_results(11, 9))
    assert rep.positivity == pytest.approx(0.55)
    assert rep.sigma == pytest.approx(1 / 2.236, abs=1e-3)


def test_positivity_394_of_650():
    rep = positivity(_results(394, 256))
    assert rep.sigma == pytest.approx(5.41, abs=0.01)
    assert rep.sigma > 5


def test_positivity_undefined_without_sufficient():
    rep = positivity([None, None])
    assert not rep.defined and math.isnan(rep.positivity)
    assert rep.total == 2


def test_insufficient_excluded_from_denominator():
    rep = positivity(_results(172, 208, 272))
    assert (rep.positive, rep.sufficient, rep.total) == (172, 380, 652)
    assert rep.positivity == pytest.approx(0.452632, abs=1e-6)


@given(st.lists(st.sampled_from([None, True, False]), max_size=60))
def test_positivity_bounds(flags):
    res = [None if f is None else ChResult(1.0 if f else -1.0, 1.0, f) for f in flags]
    rep = positivity(res)
    assert 0 <= rep.positive <= rep.sufficient <= rep.total
    if rep.defined:
        assert rep.sigma == pytest.approx((rep.positive - rep.sufficient / 2) / (math.sqrt(rep.sufficient) / 2))
