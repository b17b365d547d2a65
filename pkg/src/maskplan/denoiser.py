"""Denoiser abstraction plus exact and smoothed enumeration oracles.

The oracles answer the question a trained masked-sequence model is supposed
to answer: for every masked position, what is the distribution of the
original token given the currently visible context? Here the "model" is a
small explicit joint distribution, so the answer can be computed exactly by
filtering the support and renormalizing.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .core import MASK_TOKEN, RngHandle, SeqState

BACKENDS = ("exact_oracle", "smoothed_oracle")

PROB_SUM_TOL = 1e-9


@dataclass(frozen=True)
class MarginalSet:
    """Per-position categorical distributions over the real tokens 1..V.

    entries maps a masked position to a probability vector of length V where
    index i holds the probability of token i + 1. The arrays are read-only;
    cached sets are shared between callers.
    """

    entries: dict[int, np.ndarray]

    def positions(self) -> tuple[int, ...]:
        return tuple(sorted(self.entries))

    def is_empty(self) -> bool:
        return not self.entries

    def restricted(self, start: int, stop: int) -> "MarginalSet":
        """The subset of entries whose position lies in [start, stop)."""
        return MarginalSet(
            {p: d for p, d in self.entries.items() if start <= p < stop}
        )

    def __contains__(self, position: int) -> bool:
        return position in self.entries

    def __getitem__(self, position: int) -> np.ndarray:
        return self.entries[position]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True, eq=False)
class TabularJoint:
    """Explicit joint distribution over full sequences of length L.

    sequences is an (S, L) integer array over tokens 1..V (never the mask
    symbol); probs is the matching (S,) probability vector summing to 1.
    """

    sequences: np.ndarray
    probs: np.ndarray
    vocab_size: int

    def __post_init__(self) -> None:
        seqs = np.ascontiguousarray(np.asarray(self.sequences, dtype=np.int64))
        probs = np.ascontiguousarray(np.asarray(self.probs, dtype=np.float64))
        object.__setattr__(self, "sequences", seqs)
        object.__setattr__(self, "probs", probs)
        if seqs.ndim != 2 or seqs.shape[0] < 1:
            raise ValueError("sequences must be a nonempty (S, L) array")
        if probs.shape != (seqs.shape[0],):
            raise ValueError("probs must align with sequences")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if seqs.min() < 1 or seqs.max() > self.vocab_size:
            raise ValueError("support sequences must use tokens 1..V only")
        if np.any(probs < 0):
            raise ValueError("negative probability in support")
        if abs(float(probs.sum()) - 1.0) > PROB_SUM_TOL:
            raise ValueError(f"support probabilities sum to {probs.sum()!r}, not 1")
        if len({tuple(row) for row in seqs.tolist()}) != seqs.shape[0]:
            raise ValueError("support sequences must be pairwise distinct")
        seqs.flags.writeable = False
        probs.flags.writeable = False

    @classmethod
    def from_pairs(cls, pairs, vocab_size: int) -> "TabularJoint":
        """Build from an iterable of (sequence, probability) pairs."""
        pairs = list(pairs)
        seqs = np.array([list(s) for s, _ in pairs], dtype=np.int64)
        probs = np.array([p for _, p in pairs], dtype=np.float64)
        return cls(seqs, probs, vocab_size)

    @property
    def length(self) -> int:
        return int(self.sequences.shape[1])

    @property
    def support_size(self) -> int:
        return int(self.sequences.shape[0])

    def support(self) -> list[tuple[tuple[int, ...], float]]:
        return [
            (tuple(map(int, row)), float(p))
            for row, p in zip(self.sequences, self.probs)
        ]

    def entropy(self) -> float:
        """Shannon entropy of the whole joint, in nats."""
        p = self.probs[self.probs >= 1e-15]
        return float(-(p * np.log(p)).sum()) + 0.0

    def marginal(self, position: int) -> np.ndarray:
        """Unconditional marginal of one position over tokens 1..V."""
        counts = np.bincount(
            self.sequences[:, position], weights=self.probs,
            minlength=self.vocab_size + 1,
        )
        return counts[1:]

    def prob_of(self, tokens) -> float:
        """Probability of one full sequence (0 if outside the support)."""
        row = np.asarray(tokens, dtype=np.int64)
        hits = np.all(self.sequences == row, axis=1)
        return float(self.probs[hits].sum())


class DenoiserHandle:
    """Oracle denoiser over a TabularJoint.

    backend "exact_oracle" returns the true conditionals; "smoothed_oracle"
    blends them with the uniform distribution, (1 - eta) * exact + eta *
    uniform, and is the designated miscalibrated model for robustness
    studies. call_count tracks logical single-state evaluations: a batch of
    n states increments it by n even when results come from the internal
    memo, so accounting reflects what a real model would have computed.
    """

    def __init__(self, joint: TabularJoint, backend: str = "exact_oracle",
                 eta: float = 0.1):
        if backend not in BACKENDS:
            raise ValueError(f"unknown backend {backend!r}")
        if not 0.0 <= eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        self.joint = joint
        self.backend = backend
        self.eta = float(eta)
        self._count = 0
        self._lock = threading.Lock()
        self._cache: dict[tuple[int, ...], tuple[MarginalSet, bool]] = {}

    @property
    def call_count(self) -> int:
        return self._count

    def evaluate(self, state: SeqState) -> tuple[MarginalSet, bool]:
        """Conditionals at every masked position, plus an off-manifold flag.

        A fully unmasked state yields an empty MarginalSet. When no support
        sequence is consistent with the visible tokens, every masked
        position falls back to the uniform distribution over 1..V and the
        flag is True.
        """
        with self._lock:
            self._count += 1
        return self._lookup(state)

    def batch_evaluate(self, states) -> list[tuple[MarginalSet, bool]]:
        """Elementwise evaluate; increments call_count by len(states)."""
        states = list(states)
        if not states:
            raise ValueError("batch_evaluate requires a nonempty list")
        with self._lock:
            self._count += len(states)
        return [self._lookup(s) for s in states]

    def _lookup(self, state: SeqState) -> tuple[MarginalSet, bool]:
        key = state.tokens
        hit = self._cache.get(key)
        if hit is None:
            hit = self._conditional(state)
            self._cache[key] = hit
        return hit

    def _conditional(self, state: SeqState) -> tuple[MarginalSet, bool]:
        joint = self.joint
        if state.length != joint.length or state.vocab_size != joint.vocab_size:
            raise ValueError(
                f"state shape ({state.length}, V={state.vocab_size}) does not "
                f"match joint ({joint.length}, V={joint.vocab_size})"
            )
        tokens = np.asarray(state.tokens, dtype=np.int64)
        visible = tokens != MASK_TOKEN
        rows = np.all(joint.sequences[:, visible] == tokens[visible], axis=1)
        weights = joint.probs[rows]
        total = float(weights.sum())
        off_manifold = total <= 0.0
        masked = np.flatnonzero(~visible)
        vocab = joint.vocab_size

        entries: dict[int, np.ndarray] = {}
        if masked.size:
            if off_manifold:
                uniform = np.full(vocab, 1.0 / vocab)
                uniform.flags.writeable = False
                for pos in masked:
                    entries[int(pos)] = uniform
            else:
                sub = joint.sequences[rows]
                for pos in masked:
                    counts = np.bincount(sub[:, pos], weights=weights,
                                         minlength=vocab + 1)
                    dist = counts[1:] / total
                    if self.backend == "smoothed_oracle" and self.eta > 0.0:
                        dist = (1.0 - self.eta) * dist + self.eta / vocab
                    dist.flags.writeable = False
                    entries[int(pos)] = dist
        return MarginalSet(entries), off_manifold


def random_joint(rng: RngHandle, length: int, vocab_size: int,
                 support_size: int) -> TabularJoint:
    """Random joint with support_size distinct sequences and strictly
    positive probabilities; fully determined by the rng handle."""
    total = vocab_size ** length
    if not 1 <= support_size <= total:
        raise ValueError(
            f"support_size {support_size} outside [1, {total}] for "
            f"V={vocab_size}, L={length}"
        )
    gen = rng.generator()
    if total <= 1 << 22:
        indices = np.sort(gen.choice(total, size=support_size, replace=False))
    else:
        chosen: set[int] = set()
        while len(chosen) < support_size:
            chosen.add(int(gen.integers(total)))
        indices = np.sort(np.fromiter(chosen, dtype=np.int64))
    seqs = np.empty((support_size, length), dtype=np.int64)
    rem = indices.copy()
    for pos in range(length - 1, -1, -1):
        seqs[:, pos] = rem % vocab_size + 1
        rem //= vocab_size
    probs = gen.dirichlet(np.ones(support_size))
    while probs.min() <= 0.0:  # essentially impossible, but keep the invariant hard
        probs = gen.dirichlet(np.ones(support_size))
    return TabularJoint(seqs, probs, vocab_size)


def save_joint(joint: TabularJoint, path) -> None:
    """Write the text format: header "L V", then one support line per row
    holding the tokens followed by the probability."""
    lines = [f"{joint.length} {joint.vocab_size}"]
    for row, p in zip(joint.sequences, joint.probs):
        lines.append(" ".join(str(int(t)) for t in row) + " " + repr(float(p)))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_joint(path) -> TabularJoint:
    """Read the text format written by save_joint, validating all joint
    invariants."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = [ln.strip() for ln in fh if ln.strip()]
    if not raw:
        raise ValueError(f"{path}: empty joint file")
    head = raw[0].split()
    if len(head) != 2:
        raise ValueError(f"{path}: header must be 'L V'")
    length, vocab = int(head[0]), int(head[1])
    seqs, probs = [], []
    for ln in raw[1:]:
        parts = ln.split()
        if len(parts) != length + 1:
            raise ValueError(f"{path}: expected {length} tokens + probability: {ln!r}")
        seqs.append([int(x) for x in parts[:length]])
        probs.append(float(parts[length]))
    if not seqs:
        raise ValueError(f"{path}: no support lines")
    return TabularJoint(np.array(seqs), np.array(probs), vocab)
