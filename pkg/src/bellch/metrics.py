"""Clauser-Horne metrics over per-setting count tables."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

SETTINGS = ("a1b1", "a1b2", "a2b1", "a2b2")
SETTING_CODES = (11, 12, 21, 22)
A1B1, A1B2, A2B1, A2B2 = range(4)


class InsufficientTableError(ValueError):
    """A setting combination has no trials, so its rates are undefined."""


def _vec(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.int64).reshape(4)
    if (arr < 0).any():
        raise ValueError("counts must be nonnegative")
    return arr


@dataclass(frozen=True, eq=False)
class CountTable:
    """Singles, coincidences and trials for the four setting combinations.

    Arrays are indexed a1b1, a1b2, a2b1, a2b2.
    """

    singles_a: np.ndarray
    coincidences: np.ndarray
    singles_b: np.ndarray
    trials: np.ndarray

    def __post_init__(self) -> None:
        for name in ("singles_a", "coincidences", "singles_b", "trials"):
            object.__setattr__(self, name, _vec(getattr(self, name)))

    @classmethod
    def zeros(cls) -> CountTable:
        z = np.zeros(4, dtype=np.int64)
        return cls(z, z, z, z)

    @classmethod
    def from_matrix(cls, matrix) -> CountTable:
        """Build from a 4x4 matrix: rows are settings, columns SA, C, SB, N."""
        m = np.asarray(matrix, dtype=np.int64)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 count matrix, got shape {m.shape}")
        return cls(m[:, 0], m[:, 1], m[:, 2], m[:, 3])

    def as_matrix(self) -> np.ndarray:
        return np.column_stack([self.singles_a, self.coincidences, self.singles_b, self.trials])

    @property
    def sufficient(self) -> bool:
        return bool((self.trials > 0).all())

    def __add__(self, other: CountTable) -> CountTable:
        return CountTable(
            self.singles_a + other.singles_a,
            self.coincidences + other.coincidences,
            self.singles_b + other.singles_b,
            self.trials + other.trials,
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CountTable):
            return NotImplemented
        return bool((self.as_matrix() == other.as_matrix()).all())

    def __repr__(self) -> str:
        return f"CountTable({self.as_matrix().tolist()})"


@dataclass(frozen=True)
class ChResult:
    ch_linear: float
    ch_ratio: float
    violated: bool


@dataclass(frozen=True)
class PositivityReport:
    positive: int
    sufficient: int
    total: int
    positivity: float = field(default=math.nan)
    sigma: float = field(default=math.nan)

    @property
    def defined(self) -> bool:
        return self.sufficient > 0


def ch_terms_batch(singles_a, coincidences, singles_b, trials, averaging: bool = False):
    """Positive and negative CH term sums over arrays whose last axis is the setting.

    The positive part holds the a1b1, a1b2 and a2b1 coincidence rates; the
    negative part holds the a2b2 coincidence rate and one singles rate per
    side. Singles come from the a1b1 run, or with ``averaging`` are pooled
    over the two runs sharing that side's first setting. Trials must be
    positive.
    """
    sa_, c_, sb_, n = (np.asarray(v, dtype=np.float64) for v in (singles_a, coincidences, singles_b, trials))
    c = c_ / n
    if averaging:
        sa = (sa_[..., A1B1] + sa_[..., A1B2]) / (n[..., A1B1] + n[..., A1B2])
        sb = (sb_[..., A1B1] + sb_[..., A2B1]) / (n[..., A1B1] + n[..., A2B1])
    else:
        sa = sa_[..., A1B1] / n[..., A1B1]
        sb = sb_[..., A1B1] / n[..., A1B1]
    pos = c[..., A1B1] + c[..., A1B2] + c[..., A2B1]
    neg = c[..., A2B2] + sa + sb
    return pos, neg


def ch_terms(table: CountTable, averaging: bool = False) -> tuple[float, float]:
    """Return (positive-term sum, negative-term sum) of the CH combination."""
    if not table.sufficient:
        missing = [SETTINGS[i] for i in np.flatnonzero(table.trials == 0)]
        raise InsufficientTableError(f"no trials for setting(s) {', '.join(missing)}")
    pos, neg = ch_terms_batch(table.singles_a, table.coincidences, table.singles_b, table.trials, averaging)
    return float(pos), float(neg)


def ch_linear(table: CountTable, averaging: bool = False) -> ChResult:
    pos, neg = ch_terms(table, averaging)
    ch = pos - neg
    ratio = pos / neg if neg > 0 else math.nan
    return ChResult(ch_linear=ch, ch_ratio=ratio, violated=ch > 0)


def positivity(partition_results: Iterable[Optional[ChResult]]) -> PositivityReport:
    """Fraction of sufficient partitions that violate CH, with its binomial z-score.

    ``None`` entries mark insufficient partitions; they count toward the total
    but not the denominator. The score is measured against the null
    Binomial(sufficient, 1/2).
    """
    results: Sequence[Optional[ChResult]] = list(partition_results)
    usable = [res for res in results if res is not None]
    positive = sum(1 for res in usable if res.violated)
    n = len(usable)
    if n == 0:
        return PositivityReport(positive=0, sufficient=0, total=len(results))
    return PositivityReport(
        positive=positive,
        sufficient=n,
        total=len(results),
        positivity=positive / n,
        sigma=(positive - n / 2) / (math.sqrt(n) / 2),
    )
