"""Trajectory records and aggregate statistics.

A TrajectoryRecord is the complete account of one decoding run; RunSummary
aggregates many records of the same sampler configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Optional

import numpy as np

from .core import Action
from .scoring import StepScore

if TYPE_CHECKING:
    from .tasks import TaskSpec


@dataclass(frozen=True)
class StepRecord:
    """One decoding step: the committed action plus its bookkeeping."""

    action: Action
    score: StepScore
    bypass_used: bool
    off_manifold: bool
    n_candidates: int
    denoiser_calls: int


@dataclass(frozen=True)
class TrajectoryRecord:
    """Everything produced by one full decoding run."""

    steps: tuple[StepRecord, ...]
    final_tokens: tuple[int, ...]
    h_tilde: float
    seed: int
    config: dict = field(compare=False)

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def total_calls(self) -> int:
        return sum(rec.denoiser_calls for rec in self.steps)

    def any_off_manifold(self) -> bool:
        return any(rec.off_manifold for rec in self.steps)

    def first_position(self) -> int:
        """Lowest position of the first step's action."""
        return self.steps[0].action.pairs[0][0]

    def canonical_bytes(self) -> bytes:
        """Serialization of the decoding content, used for equivalence
        checks between policies.

        Covers the actions, the per-step scores (exact float64 hex), the
        off-manifold flags, the final sequence, and the cumulative entropy.
        Deliberately excludes policy metadata (config snapshot, seed, bypass
        flags, candidate and call counts) so that two configurations that
        produce the same decoding serialize identically.
        """
        parts = []
        for rec in self.steps:
            pairs = ",".join(f"{p}:{t}" for p, t in rec.action.pairs)
            s = rec.score
            nums = ",".join(
                v.hex() for v in (
                    s.immediate_cost, s.state_uncertainty_before,
                    s.state_uncertainty_after, s.info_gain, s.objective,
                )
            )
            flag = "1" if rec.off_manifold else "0"
            parts.append(f"{pairs}|{nums}|{flag}")
        parts.append("final=" + ",".join(map(str, self.final_tokens)))
        parts.append("H=" + float(self.h_tilde).hex())
        return "\n".join(parts).encode("utf-8")

    def to_json_dict(self) -> dict:
        """Full-detail mapping for JSON traces."""
        return {
            "seed": self.seed,
            "config": self.config,
            "final_tokens": list(self.final_tokens),
            "cumulative_entropy_nats": self.h_tilde,
            "steps": [
                {
                    "action": [[p, t] for p, t in rec.action.pairs],
                    "immediate_cost_nats": rec.score.immediate_cost,
                    "state_uncertainty_before_nats": rec.score.state_uncertainty_before,
                    "state_uncertainty_after_nats": rec.score.state_uncertainty_after,
                    "info_gain_nats": rec.score.info_gain,
                    "objective_nats": rec.score.objective,
                    "bypass_used": rec.bypass_used,
                    "off_manifold": rec.off_manifold,
                    "n_candidates": rec.n_candidates,
                    "denoiser_calls": rec.denoiser_calls,
                }
                for rec in self.steps
            ],
        }


def cumulative_entropy(traj: TrajectoryRecord) -> float:
    """Sum of per-step immediate costs, in step order."""
    total = 0.0
    for rec in traj.steps:
        total += rec.score.immediate_cost
    return total


@dataclass(frozen=True)
class RunSummary:
    """Aggregates over all records sharing one sampler configuration."""

    label: str
    n_runs: int
    mean_h_tilde: float
    std_h_tilde: float
    accuracy: float
    path_frequencies: dict[str, float]
    mean_calls_per_step: float
    off_manifold_rate: float
    # filled by the harness, which owns the clocks; None in pure aggregation
    mean_wall_ms: Optional[float] = None


def summarize(records: Iterable[TrajectoryRecord],
              spec: "TaskSpec") -> list[RunSummary]:
    """One RunSummary per distinct config label, in first-seen order."""
    from .tasks import classify_path

    groups: dict[str, list[TrajectoryRecord]] = {}
    for rec in records:
        groups.setdefault(rec.config.get("label", ""), []).append(rec)
    if not groups:
        raise ValueError("summarize requires at least one record")

    out = []
    for label, recs in groups.items():
        h = np.array([r.h_tilde for r in recs])
        correct = np.array([spec.correct(r.final_tokens) for r in recs])
        freqs: dict[str, float] = {g: 0.0 for g in spec.groups}
        for r in recs:
            freqs[classify_path(r, spec)] += 1.0
        for g in freqs:
            freqs[g] /= len(recs)
        calls = [r.total_calls() / r.n_steps for r in recs]
        out.append(RunSummary(
            label=label,
            n_runs=len(recs),
            mean_h_tilde=float(h.mean()),
            std_h_tilde=float(h.std()),
            accuracy=float(correct.mean()),
            path_frequencies=freqs,
            mean_calls_per_step=float(np.mean(calls)),
            off_manifold_rate=float(np.mean([r.any_off_manifold() for r in recs])),
        ))
    return out


def pearson_entropy_accuracy(summaries: list[RunSummary]) -> Optional[float]:
    """Pearson correlation between per-config mean cumulative entropy and
    accuracy. Needs at least two configs with nonzero variance on both axes;
    returns None otherwise."""
    if len(summaries) < 2:
        return None
    x = np.array([s.mean_h_tilde for s in summaries])
    y = np.array([s.accuracy for s in summaries])
    if x.std() == 0.0 or y.std() == 0.0:
        return None
    return float(np.corrcoef(x, y)[0, 1])


def call_accounting(records: Iterable[TrajectoryRecord]) -> dict[str, float]:
    """Mean single-state denoiser evaluations per decoding step, keyed by
    config label. Defined from per-step record counts, so it describes
    single-trajectory policies; search policies account all hypotheses
    through the denoiser's own call counter instead."""
    groups: dict[str, list[float]] = {}
    for rec in records:
        groups.setdefault(rec.config.get("label", ""), []).append(
            rec.total_calls() / rec.n_steps
        )
    return {label: float(np.mean(vals)) for label, vals in groups.items()}
