"""Detection probabilities for a nonmaximal polarization-entangled pair.

The source state is ``(|HH> + r|VV>) / sqrt(1 + r^2)`` and each side has a
single-channel linear analyzer transmitting ``cos(t)|H> + sin(t)|V>``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EntangledState:
    r: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.r <= 1.0):
            raise ValueError(f"maximality r must lie in [0, 1], got {self.r}")


@dataclass(frozen=True)
class AngleSet:
    """Analyzer angles in radians for the two settings at each side."""

    a1: float
    a2: float
    b1: float
    b2: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in self.as_tuple()):
            raise ValueError("analyzer angles must be finite")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.a1, self.a2, self.b1, self.b2)

    def canonical(self) -> AngleSet:
        """Fold every angle into [0, pi); analyzers are pi-periodic."""
        return AngleSet(*(float(np.mod(v, math.pi)) for v in self.as_tuple()))

    def setting_pairs(self) -> list[tuple[float, float]]:
        """(alpha, beta) for a1b1, a1b2, a2b1, a2b2 in that order."""
        return [(self.a1, self.b1), (self.a1, self.b2), (self.a2, self.b1), (self.a2, self.b2)]


@dataclass(frozen=True)
class JointProbabilities:
    p_cc: float
    p_cn: float
    p_nc: float
    p_nn: float

    def as_array(self) -> np.ndarray:
        return np.array([self.p_cc, self.p_cn, self.p_nc, self.p_nn])


@dataclass(frozen=True)
class TrialOutcome:
    detect_a: int
    detect_b: int


def single_transmission(state: EntangledState, theta: float) -> float:
    """Probability that one analyzer at ``theta`` transmits its photon."""
    r = state.r
    return (math.cos(theta) ** 2 + r * r * math.sin(theta) ** 2) / (1.0 + r * r)


def joint_detection_probabilities(state: EntangledState, alpha: float, beta: float) -> JointProbabilities:
    r = state.r
    norm = 1.0 + r * r
    amp = math.cos(alpha) * math.cos(beta) + r * math.sin(alpha) * math.sin(beta)
    p_cc = amp * amp / norm
    p_a = single_transmission(state, alpha)
    p_b = single_transmission(state, beta)
    # clip guards the last-ulp drift of p_a - p_cc when the two nearly cancel
    p_cn = max(p_a - p_cc, 0.0)
    p_nc = max(p_b - p_cc, 0.0)
    p_nn = max(1.0 - p_cc - p_cn - p_nc, 0.0)
    return JointProbabilities(p_cc, p_cn, p_nc, p_nn)


def outcome_distribution(probs: JointProbabilities, efficiency: float, noise: float) -> np.ndarray:
    """Exact per-trial distribution of detection counts.

    Returns a 3x3 array ``m`` with ``m[na, nb]`` the probability that side A
    records ``na`` and side B records ``nb`` detections in one trial, after
    independent per-photon losses and one optional noise click per side.
    """
    _check_probability("efficiency", efficiency)
    _check_probability("noise", noise)
    eta = efficiency
    ideal = np.zeros((2, 2))
    ideal[1, 1] = probs.p_cc * eta * eta
    ideal[1, 0] = probs.p_cc * eta * (1 - eta) + probs.p_cn * eta
    ideal[0, 1] = probs.p_cc * (1 - eta) * eta + probs.p_nc * eta
    ideal[0, 0] = 1.0 - ideal[1, 1] - ideal[1, 0] - ideal[0, 1]
    click = np.array([1.0 - noise, noise])
    out = np.zeros((3, 3))
    for a in range(2):
        for b in range(2):
            out[a : a + 2, b : b + 2] += ideal[a, b] * np.outer(click, click)
    return out


def sample_trial(
    probs: JointProbabilities, efficiency: float, noise: float, rng: np.random.Generator
) -> TrialOutcome:
    _check_probability("efficiency", efficiency)
    _check_probability("noise", noise)
    cat = rng.choice(4, p=_normalized(probs.as_array()))
    ideal_a = cat in (0, 1)
    ideal_b = cat in (0, 2)
    det_a = int(ideal_a and rng.random() < efficiency)
    det_b = int(ideal_b and rng.random() < efficiency)
    det_a += int(rng.random() < noise)
    det_b += int(rng.random() < noise)
    return TrialOutcome(det_a, det_b)


def sample_trials(
    probs: JointProbabilities,
    efficiency: float,
    noise: float,
    rng: np.random.Generator,
    size: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``sample_trial``: per-trial detection counts for both sides."""
    _check_probability("efficiency", efficiency)
    _check_probability("noise", noise)
    cat = rng.choice(4, size=size, p=_normalized(probs.as_array()))
    ideal_a = (cat == 0) | (cat == 1)
    ideal_b = (cat == 0) | (cat == 2)
    det_a = (ideal_a & (rng.random(size) < efficiency)).astype(np.int64)
    det_b = (ideal_b & (rng.random(size) < efficiency)).astype(np.int64)
    det_a += rng.random(size) < noise
    det_b += rng.random(size) < noise
    return det_a, det_b


def _normalized(p: np.ndarray) -> np.ndarray:
    return p / p.sum()


def _check_probability(name: str, value: float) -> None:
    if not (0.0 <= value <= 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
