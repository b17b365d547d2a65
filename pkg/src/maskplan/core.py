"""Core value types for masked-sequence decoding.

Conventions used across the whole package:

* token 0 is the mask symbol; real tokens are the integers 1..V
* every entropy-like quantity is measured in nats (natural log)
* all types here are immutable values and safe to share between threads
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MASK_TOKEN = 0

SCHEDULE_KINDS = ("constant", "linear", "cosine")


@dataclass(frozen=True)
class SeqState:
    """A partially masked token sequence of fixed length."""

    tokens: tuple[int, ...]
    vocab_size: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if len(self.tokens) < 1:
            raise ValueError("sequence must have length >= 1")
        for pos, tok in enumerate(self.tokens):
            if not MASK_TOKEN <= tok <= self.vocab_size:
                raise ValueError(
                    f"token {tok} at position {pos} outside [0, {self.vocab_size}]"
                )

    @classmethod
    def all_masked(cls, length: int, vocab_size: int) -> "SeqState":
        return cls(tokens=(MASK_TOKEN,) * length, vocab_size=vocab_size)

    @property
    def length(self) -> int:
        return len(self.tokens)

    def masked_positions(self) -> tuple[int, ...]:
        return tuple(i for i, t in enumerate(self.tokens) if t == MASK_TOKEN)

    def masked_count(self) -> int:
        return sum(1 for t in self.tokens if t == MASK_TOKEN)

    def is_complete(self) -> bool:
        """True when no mask symbols remain."""
        return all(t != MASK_TOKEN for t in self.tokens)


@dataclass(frozen=True)
class Action:
    """A set of (position, token) writes committed in one decoding step.

    Pairs are stored sorted by position so that two actions over the same
    set of writes compare equal regardless of construction order.
    """

    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        pairs = tuple(sorted((int(p), int(t)) for p, t in self.pairs))
        object.__setattr__(self, "pairs", pairs)
        positions = [p for p, _ in pairs]
        if len(set(positions)) != len(positions):
            raise ValueError(f"duplicate positions in action: {positions}")
        for _, tok in pairs:
            if tok == MASK_TOKEN:
                raise ValueError("an action may not write the mask symbol")

    def positions(self) -> tuple[int, ...]:
        return tuple(p for p, _ in self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)


def apply(state: SeqState, action: Action) -> SeqState:
    """Write the action's tokens into the state, reducing the mask count by
    exactly len(action).

    Raises ValueError if any position is out of range or not currently
    masked, or if a token lies outside 1..V. Re-applying an action to the
    resulting state therefore always fails: the positions are no longer
    masked.
    """
    new_tokens = list(state.tokens)
    for pos, tok in action.pairs:
        if not 0 <= pos < state.length:
            raise ValueError(f"position {pos} out of range for length {state.length}")
        if state.tokens[pos] != MASK_TOKEN:
            raise ValueError(f"position {pos} is not masked")
        if not 1 <= tok <= state.vocab_size:
            raise ValueError(f"token {tok} outside 1..{state.vocab_size}")
        new_tokens[pos] = tok
    return SeqState(tuple(new_tokens), state.vocab_size)


@dataclass(frozen=True)
class StepSchedule:
    """How many positions to unmask at each decoding step.

    kind "constant" emits k per step (last step clamped); "linear" and
    "cosine" spread the sequence length over total_steps following the named
    decoded-fraction curve.
    """

    kind: str
    length: int
    k: int | None = None
    total_steps: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.length < 1:
            raise ValueError("schedule length must be >= 1")
        if self.kind == "constant":
            if self.k is None or self.k < 1:
                raise ValueError("constant schedule requires k >= 1")
        else:
            if self.total_steps is None or self.total_steps < 1:
                raise ValueError(f"{self.kind} schedule requires total_steps >= 1")


def _decoded_fraction(kind: str, step: int, total: int) -> float:
    if kind == "linear":
        return step / total
    # cosine: slow start, fast finish
    return 1.0 - math.cos(math.pi * step / (2.0 * total))


def budgets(schedule: StepSchedule) -> list[int]:
    """Per-step unmask counts; the list always sums exactly to the length.

    Curved kinds use cumulative-target rounding: the running total after
    step s is round(L * fraction(s)), which avoids drift at small L. Steps
    whose rounded increment is zero are dropped, so every emitted budget is
    >= 1.
    """
    length = schedule.length
    if schedule.kind == "constant":
        out = []
        remaining = length
        while remaining > 0:
            take = min(schedule.k, remaining)
            out.append(take)
            remaining -= take
        return out

    total = schedule.total_steps
    out = []
    prev_cum = 0
    for step in range(1, total + 1):
        if step == total:
            cum = length
        else:
            cum = round(length * _decoded_fraction(schedule.kind, step, total))
        if cum > prev_cum:
            out.append(cum - prev_cum)
            prev_cum = cum
    return out


@dataclass(frozen=True)
class BlockSchedule:
    """Left-to-right block restriction; block_size equal to the sequence
    length disables blocking entirely."""

    block_size: int

    def __post_init__(self) -> None:
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")


def active_block(state: SeqState, blocks: BlockSchedule) -> tuple[int, int]:
    """Return the half-open [start, stop) range of the lowest-indexed block
    that still contains a mask."""
    masked = state.masked_positions()
    if not masked:
        raise ValueError("no masks remaining")
    size = min(blocks.block_size, state.length)
    start = (masked[0] // size) * size
    return start, min(start + size, state.length)


@dataclass(frozen=True)
class RngHandle:
    """Seeded, splittable source of randomness.

    Identical (seed, stream, path) always reproduces identical draws.
    Children created through child() get distinct spawn keys, which makes
    their streams independent by construction.
    """

    seed: int
    stream: int = 0
    path: tuple[int, ...] = ()

    def generator(self) -> np.random.Generator:
        key = (self.stream,) + self.path
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=key))

    def child(self, index: int) -> "RngHandle":
        return RngHandle(self.seed, self.stream, self.path + (int(index),))
