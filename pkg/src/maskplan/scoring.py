"""Scalar objectives: per-token entropy, certainty scores, state uncertainty,
immediate cost, and the information-gain objective.

Everything here is a pure function of its inputs and reports nats. The
convention 0 * ln 0 = 0 is realized by treating probabilities below 1e-15 as
exact zeros inside entropy sums.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import Action
from .denoiser import MarginalSet

ZERO_PROB = 1e-15
SUM_TOL = 1e-9

CERTAINTY_NAMES = ("confidence", "neg_entropy", "margin", "klass", "pc")


def token_entropy(dist) -> float:
    """Shannon entropy -sum(p ln p) of one categorical distribution."""
    p = np.asarray(dist, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("negative probability")
    if abs(float(p.sum()) - 1.0) > SUM_TOL:
        raise ValueError(f"distribution sums to {p.sum()!r}, not 1")
    live = p[p >= ZERO_PROB]
    # the trailing + 0.0 folds -0.0 into +0.0 for stable serialization
    return float(-(live * np.log(live)).sum()) + 0.0


@dataclass(frozen=True)
class CertaintyKind:
    """Which per-position certainty score to use, plus its parameters.

    klass compares the current distribution against prev (the previous
    step's marginals) and adds +1 when the KL divergence falls below eps;
    on the first step there is no prev and the score is just the top
    probability. pc multiplies a pluggable calibration term (top probability
    by default) with the positional decay exp(-lam * position).
    """

    name: str
    eps: float = 5e-4
    lam: float = 0.01
    calibration: Optional[Callable[[int, MarginalSet], float]] = None
    prev: Optional[MarginalSet] = None

    def __post_init__(self) -> None:
        if self.name not in CERTAINTY_NAMES:
            raise ValueError(f"unknown certainty kind {self.name!r}")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")


def _kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    live = p >= ZERO_PROB
    if np.any(q[live] < ZERO_PROB):
        return math.inf
    pl = p[live]
    return float(np.sum(pl * (np.log(pl) - np.log(q[live]))))


def certainty(kind: CertaintyKind, position: int, marginals: MarginalSet) -> float:
    """Certainty score of one masked position under the given kind."""
    if position not in marginals:
        raise ValueError(f"position {position} has no distribution")
    dist = marginals[position]
    if dist.size == 0:
        raise ValueError("empty distribution")

    if kind.name == "confidence":
        return float(dist.max())
    if kind.name == "neg_entropy":
        return -token_entropy(dist)
    if kind.name == "margin":
        top2 = np.sort(dist)[-2:]
        return float(top2[1] - top2[0])
    if kind.name == "klass":
        score = float(dist.max())
        if kind.prev is not None and position in kind.prev:
            if _kl_divergence(dist, kind.prev[position]) < kind.eps:
                score += 1.0
        return score
    # pc: calibration weighted by positional decay
    if kind.calibration is not None:
        base = float(kind.calibration(position, marginals))
    else:
        base = float(dist.max())
    return base * math.exp(-kind.lam * position)


def state_uncertainty(marginals: MarginalSet) -> float:
    """Mean marginal entropy over the masked positions; 0 when none remain."""
    if marginals.is_empty():
        return 0.0
    total = 0.0
    for pos in marginals.positions():
        total += token_entropy(marginals[pos])
    return total / len(marginals)


def immediate_cost(action: Action, marginals: MarginalSet) -> float:
    """Sum of marginal entropies at the positions the action commits."""
    total = 0.0
    for pos, _ in action.pairs:
        if pos not in marginals:
            raise ValueError(f"action position {pos} has no distribution")
        total += token_entropy(marginals[pos])
    return total


@dataclass(frozen=True)
class StepScore:
    """All scalar outcomes of one decoding step, in nats.

    info_gain is exactly state_uncertainty_before - state_uncertainty_after
    and objective is exactly info_gain - immediate_cost; use build() so the
    identities hold by construction. Selection is argmax(objective)
    everywhere; equivalently argmin of its negation
    immediate_cost - info_gain, which is nonnegative in expectation under an
    exact oracle.
    """

    immediate_cost: float
    state_uncertainty_before: float
    state_uncertainty_after: float
    info_gain: float
    objective: float

    @classmethod
    def build(cls, cost: float, before: float, after: float) -> "StepScore":
        gain = before - after
        return cls(
            immediate_cost=cost,
            state_uncertainty_before=before,
            state_uncertainty_after=after,
            info_gain=gain,
            objective=gain - cost,
        )


def info_gain_objective(before: MarginalSet, after: MarginalSet,
                        action: Action) -> StepScore:
    """Score an action from the marginals before it and the marginals of the
    successor state it produces."""
    cost = immediate_cost(action, before)
    return StepScore.build(cost, state_uncertainty(before),
                           state_uncertainty(after))
