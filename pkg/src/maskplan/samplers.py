"""Decoding policies.

All policies share the same primitives: temperature sampling of tokens,
softmax sampling of position sets, and (for the lookahead family) candidate
actions scored through the denoiser. Policies:

* uniform            random positions, sampled tokens
* greedy             top-K positions by a certainty score
* lookum             candidate actions ranked by successor uncertainty
* info_gain          candidate actions ranked by information gain minus cost
* beam               breadth-limited search over info-gain candidates
* best_of_n          independent sampled trajectories, keep the cheapest

Determinism contract: every draw comes from the generator owned by the run,
and a configuration plus a seed fully determines the trajectory.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .core import (Action, BlockSchedule, RngHandle, SeqState, StepSchedule,
                   active_block, apply, budgets)
from .denoiser import DenoiserHandle, MarginalSet
from .metrics import StepRecord, TrajectoryRecord
from .scoring import (CERTAINTY_NAMES, CertaintyKind, StepScore, certainty,
                      immediate_cost, state_uncertainty, token_entropy)

POLICIES = ("uniform", "greedy", "lookum", "info_gain", "beam", "best_of_n")


class DecodingInvariantError(RuntimeError):
    """An internal decoding invariant was violated (bug guard)."""


@dataclass(frozen=True)
class SamplerConfig:
    """Full description of one decoding policy.

    gamma is the high-confidence bypass threshold; None disables the bypass.
    kind selects the certainty score for the greedy policy ("uniform" picks
    random scores). beam_width and n_traj only matter for the beam and
    best_of_n policies.
    """

    policy: str
    schedule: StepSchedule
    blocks: BlockSchedule
    seed: int
    kind: str = "neg_entropy"
    tau_token: float = 0.7
    tau_pos: float = 0.1
    n_candidates: int = 8
    gamma: Optional[float] = 0.8
    beam_width: int = 2
    n_traj: int = 4
    kl_eps: float = 5e-4
    pc_lam: float = 0.01
    label: str = ""

    def __post_init__(self) -> None:
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")
        if self.kind not in CERTAINTY_NAMES + ("uniform",):
            raise ValueError(f"unknown certainty kind {self.kind!r}")
        if self.tau_token < 0 or self.tau_pos < 0:
            raise ValueError("temperatures must be >= 0")
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be >= 1")
        if self.gamma is not None and not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1] or be None")
        if self.beam_width < 1 or self.n_traj < 1:
            raise ValueError("beam_width and n_traj must be >= 1")

    def effective_label(self) -> str:
        if self.label:
            return self.label
        if self.policy == "greedy":
            return f"greedy:{self.kind}"
        return self.policy

    def snapshot(self) -> dict:
        snap = {
            "label": self.effective_label(),
            "policy": self.policy,
            "tau_token": self.tau_token,
            "tau_pos": self.tau_pos,
            "n_candidates": self.n_candidates,
            "gamma": self.gamma,
            "seed": self.seed,
            "schedule": {
                "kind": self.schedule.kind,
                "length": self.schedule.length,
                "k": self.schedule.k,
                "total_steps": self.schedule.total_steps,
            },
            "block_size": self.blocks.block_size,
        }
        if self.policy in ("greedy", "uniform"):
            snap["kind"] = "uniform" if self.policy == "uniform" else self.kind
        if self.policy == "beam":
            snap["beam_width"] = self.beam_width
        if self.policy == "best_of_n":
            snap["n_traj"] = self.n_traj
        return snap


@dataclass(frozen=True)
class BeamEntry:
    """A live search hypothesis: its state and the immediate cost
    accumulated along its history."""

    state: SeqState
    g: float


def tilted_distribution(dist, tau: float) -> np.ndarray:
    """The normalized distribution proportional to p ** (1 / tau).

    Computed as (p / max(p)) ** (1 / tau) for numerical stability at small
    temperatures.
    """
    p = np.asarray(dist, dtype=np.float64)
    if tau <= 0:
        raise ValueError("tau must be > 0 for tilting")
    top = p.max()
    if top <= 0:
        raise ValueError("all-zero distribution")
    w = (p / top) ** (1.0 / tau)
    return w / w.sum()


def token_sample(dist, tau_token: float, gen: np.random.Generator) -> int:
    """Draw a token (1-based) from the distribution at the given
    temperature. tau_token = 0 is the argmax limit and consumes no
    randomness; ties go to the lowest token id."""
    p = np.asarray(dist, dtype=np.float64)
    if p.max() <= 0:
        raise ValueError("all-zero distribution")
    if tau_token == 0:
        return int(np.argmax(p)) + 1
    w = tilted_distribution(p, tau_token)
    return int(gen.choice(p.size, p=w)) + 1


def select_positions(scores: dict[int, float], k: int, tau_pos: float,
                     gen: np.random.Generator) -> list[int]:
    """Choose k positions from a score map.

    tau_pos = 0 takes the top-k by score with ties broken by the lowest
    position index and consumes no randomness. tau_pos > 0 draws k positions
    without replacement, each round sampling from softmax(scores / tau_pos)
    over the remaining positions. Adding a constant to every score changes
    nothing in either mode.
    """
    if not scores:
        raise ValueError("empty score map")
    if not 1 <= k <= len(scores):
        raise ValueError(f"k={k} outside [1, {len(scores)}]")
    if tau_pos == 0:
        ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
        return [pos for pos, _ in ranked[:k]]
    remaining = sorted(scores)
    chosen = []
    for _ in range(k):
        logits = np.array([scores[p] for p in remaining]) / tau_pos
        logits -= logits.max()
        w = np.exp(logits)
        w /= w.sum()
        idx = int(gen.choice(len(remaining), p=w))
        chosen.append(remaining.pop(idx))
    return chosen


def propose_candidates(state: SeqState, marginals: MarginalSet, k: int,
                       config: SamplerConfig, gen: np.random.Generator,
                       block: Optional[tuple[int, int]] = None,
                       exclude: frozenset[int] = frozenset()) -> list[Action]:
    """Two-stage action sampler: up to n_candidates actions, each built by
    drawing a token at every masked in-block position and then sampling k
    positions from the softmax over negative-entropy scores.

    Candidates are deduplicated by their (position, token) set, preserving
    proposal order, so fewer than n_candidates actions may come back.
    exclude removes positions already committed by the caller (the bypass).
    """
    if block is None:
        block = (0, state.length)
    inblock = marginals.restricted(*block)
    positions = [p for p in inblock.positions() if p not in exclude]
    if not positions:
        raise ValueError("no masked positions available in the active block")
    if k > len(positions):
        raise ValueError(f"budget {k} exceeds {len(positions)} open positions")
    scores = {p: -token_entropy(inblock[p]) for p in positions}
    out: list[Action] = []
    seen: set[tuple] = set()
    for _ in range(config.n_candidates):
        tokens = {p: token_sample(inblock[p], config.tau_token, gen)
                  for p in positions}
        chosen = select_positions(scores, k, config.tau_pos, gen)
        action = Action(tuple((p, tokens[p]) for p in chosen))
        if action.pairs not in seen:
            seen.add(action.pairs)
            out.append(action)
    return out


def greedy_certainty_step(state: SeqState, marginals: MarginalSet, kind,
                          k: int, tau_token: float, tau_pos: float,
                          gen: np.random.Generator,
                          block: Optional[tuple[int, int]] = None) -> Action:
    """One greedy step: draw a token at every masked in-block position, then
    pick k positions by the kind's certainty scores. kind is a CertaintyKind
    or the string "uniform" for random scores."""
    if block is None:
        block = (0, state.length)
    inblock = marginals.restricted(*block)
    positions = list(inblock.positions())
    if not positions:
        raise ValueError("no masked positions in the active block")
    if k > len(positions):
        raise ValueError(f"budget {k} exceeds {len(positions)} masked positions")
    tokens = {p: token_sample(inblock[p], tau_token, gen) for p in positions}
    if kind == "uniform":
        scores = {p: float(gen.random()) for p in positions}
    else:
        scores = {p: certainty(kind, p, inblock) for p in positions}
    chosen = select_positions(scores, k, tau_pos, gen)
    return Action(tuple((p, tokens[p]) for p in chosen))


@dataclass(frozen=True)
class PolicyStep:
    """Outcome of one policy step.

    uncertainty_after is None when the step committed without evaluating its
    successor (greedy steps, bypassed steps, forced single candidates); the
    caller fills it in from the next evaluation, which looks at the very
    same state, so the completed score is identical to what an immediate
    evaluation would have produced.
    """

    action: Action
    immediate_cost: float
    uncertainty_before: float
    uncertainty_after: Optional[float]
    bypass_used: bool
    n_candidates: int
    extra_denoiser_calls: int

    def score(self) -> Optional[StepScore]:
        if self.uncertainty_after is None:
            return None
        return StepScore.build(self.immediate_cost, self.uncertainty_before,
                               self.uncertainty_after)


@dataclass(frozen=True)
class _CandidatePlan:
    actions: tuple[Action, ...]
    bypass_used: bool


def _plan_candidates(state: SeqState, marginals: MarginalSet, k: int,
                     config: SamplerConfig, gen: np.random.Generator,
                     block: tuple[int, int]) -> _CandidatePlan:
    """Candidate actions for one info-gain style step, bypass included.

    Positions whose top probability strictly exceeds gamma are fixed with
    their argmax tokens. If at least k positions qualify, the step commits
    the top-k of them by confidence outright (full bypass, one action, no
    randomness consumed). Otherwise the fixed pairs are shared by every
    candidate and the sampler fills the remaining budget.
    """
    inblock = marginals.restricted(*block)
    fixed: list[tuple[int, int, float]] = []
    if config.gamma is not None:
        for pos in inblock.positions():
            dist = inblock[pos]
            top = float(dist.max())
            if top > config.gamma:
                fixed.append((pos, int(np.argmax(dist)) + 1, top))
        if len(fixed) >= k:
            ordered = sorted(fixed, key=lambda item: (-item[2], item[0]))[:k]
            action = Action(tuple((p, t) for p, t, _ in ordered))
            return _CandidatePlan(actions=(action,), bypass_used=True)
    fixed_pairs = tuple((p, t) for p, t, _ in fixed)
    exclude = frozenset(p for p, _, _ in fixed)
    partials = propose_candidates(state, marginals, k - len(fixed), config,
                                  gen, block=block, exclude=exclude)
    actions = tuple(Action(fixed_pairs + a.pairs) for a in partials)
    return _CandidatePlan(actions=actions, bypass_used=False)


def info_gain_step(state: SeqState, marginals: MarginalSet, k: int,
                   config: SamplerConfig, gen: np.random.Generator,
                   denoiser: DenoiserHandle,
                   block: Optional[tuple[int, int]] = None) -> PolicyStep:
    """One info-gain step: propose candidates (respecting the bypass),
    evaluate all successor states in one batch, and keep the candidate with
    the highest information gain minus immediate cost; ties go to the first
    candidate in proposal order.

    When only one action is on the table (full bypass, n_candidates = 1, or
    dedup collapse) the choice is forced and the successor evaluation is
    skipped; its uncertainty is deferred.
    """
    if block is None:
        block = (0, state.length)
    inblock = marginals.restricted(*block)
    before = state_uncertainty(inblock)
    plan = _plan_candidates(state, marginals, k, config, gen, block)
    n_proposed = 0 if plan.bypass_used else len(plan.actions)
    if len(plan.actions) == 1:
        action = plan.actions[0]
        return PolicyStep(action, immediate_cost(action, inblock), before,
                          None, plan.bypass_used, n_proposed, 0)
    successors = [apply(state, a) for a in plan.actions]
    results = denoiser.batch_evaluate(successors)
    best_idx = None
    best_obj = None
    afters = []
    costs = []
    for i, (a, (margs, _off)) in enumerate(zip(plan.actions, results)):
        after = state_uncertainty(margs.restricted(*block))
        cost = immediate_cost(a, inblock)
        objective = (before - after) - cost
        afters.append(after)
        costs.append(cost)
        if best_obj is None or objective > best_obj:
            best_obj = objective
            best_idx = i
    return PolicyStep(plan.actions[best_idx], costs[best_idx], before,
                      afters[best_idx], False, n_proposed, len(plan.actions))


def lookum_step(state: SeqState, marginals: MarginalSet, k: int,
                config: SamplerConfig, gen: np.random.Generator,
                denoiser: DenoiserHandle,
                block: Optional[tuple[int, int]] = None) -> PolicyStep:
    """One lookahead-uncertainty step: propose candidates and keep the one
    whose successor has the highest mean negative entropy over the active
    block, i.e. the lowest successor state uncertainty; ties go to the first
    candidate."""
    if block is None:
        block = (0, state.length)
    inblock = marginals.restricted(*block)
    before = state_uncertainty(inblock)
    candidates = propose_candidates(state, marginals, k, config, gen,
                                    block=block)
    if len(candidates) == 1:
        action = candidates[0]
        return PolicyStep(action, immediate_cost(action, inblock), before,
                          None, False, 1, 0)
    successors = [apply(state, a) for a in candidates]
    results = denoiser.batch_evaluate(successors)
    afters = [state_uncertainty(m.restricted(*block)) for m, _ in results]
    best_idx = min(range(len(candidates)), key=lambda i: (afters[i], i))
    action = candidates[best_idx]
    return PolicyStep(action, immediate_cost(action, inblock), before,
                      afters[best_idx], False, len(candidates),
                      len(candidates))


@dataclass
class _Pending:
    """A step committed without knowing its successor uncertainty yet."""

    action: Action
    cost: float
    before: float
    bypass_used: bool
    off_manifold: bool
    n_candidates: int
    calls: int
    block: tuple[int, int]

    def finalize(self, after: float) -> StepRecord:
        return StepRecord(self.action,
                          StepScore.build(self.cost, self.before, after),
                          self.bypass_used, self.off_manifold,
                          self.n_candidates, self.calls)


def _policy_step(config: SamplerConfig, state: SeqState,
                 marginals: MarginalSet, k: int, gen: np.random.Generator,
                 denoiser: DenoiserHandle, block: tuple[int, int],
                 prev_marginals: Optional[MarginalSet]) -> PolicyStep:
    if config.policy in ("uniform", "greedy"):
        if config.policy == "uniform":
            kind = "uniform"
        else:
            kind = CertaintyKind(name=config.kind, eps=config.kl_eps,
                                 lam=config.pc_lam)
            if config.kind == "klass":
                kind = replace(kind, prev=prev_marginals)
        action = greedy_certainty_step(state, marginals, kind, k,
                                       config.tau_token, config.tau_pos,
                                       gen, block=block)
        inblock = marginals.restricted(*block)
        return PolicyStep(action, immediate_cost(action, inblock),
                          state_uncertainty(inblock), None, False, 0, 0)
    if config.policy == "lookum":
        return lookum_step(state, marginals, k, config, gen, denoiser,
                           block=block)
    if config.policy == "info_gain":
        return info_gain_step(state, marginals, k, config, gen, denoiser,
                              block=block)
    raise ValueError(f"policy {config.policy!r} is not a per-step policy")


def run_trajectory(config: SamplerConfig, denoiser: DenoiserHandle,
                   length: int, rng: Optional[RngHandle] = None
                   ) -> TrajectoryRecord:
    """Decode one full trajectory: start all-masked, then alternate
    denoiser evaluation and a policy step until no masks remain.

    Step budgets follow the schedule; when blocking is active a budget is
    clamped to the masks left in the active block and the shortfall is
    pushed back onto the front of the budget queue.
    """
    if config.schedule.length != length:
        raise ValueError("schedule length does not match the task length")
    handle = rng if rng is not None else RngHandle(config.seed)
    gen = handle.generator()
    state = SeqState.all_masked(length, denoiser.joint.vocab_size)
    queue = deque(budgets(config.schedule))
    records: list[StepRecord] = []
    pending: Optional[_Pending] = None
    prev_marginals: Optional[MarginalSet] = None

    while not state.is_complete():
        if not queue:
            raise DecodingInvariantError("schedule exhausted with masks remaining")
        marginals, off = denoiser.evaluate(state)
        if pending is not None:
            after = state_uncertainty(marginals.restricted(*pending.block))
            records.append(pending.finalize(after))
            pending = None
        block = active_block(state, config.blocks)
        in_block_masks = len(marginals.restricted(*block))
        budget = queue.popleft()
        k = min(budget, in_block_masks)
        if budget > k:
            queue.appendleft(budget - k)
        out = _policy_step(config, state, marginals, k, gen, denoiser, block,
                           prev_marginals)
        if out.uncertainty_after is None:
            pending = _Pending(out.action, out.immediate_cost,
                               out.uncertainty_before, out.bypass_used, off,
                               out.n_candidates, 1 + out.extra_denoiser_calls,
                               block)
        else:
            records.append(StepRecord(out.action, out.score(),
                                      out.bypass_used, off, out.n_candidates,
                                      1 + out.extra_denoiser_calls))
        state = apply(state, out.action)
        prev_marginals = marginals

    if pending is not None:
        records.append(pending.finalize(0.0))

    h_tilde = 0.0
    for rec in records:
        h_tilde += rec.score.immediate_cost
    return TrajectoryRecord(steps=tuple(records), final_tokens=state.tokens,
                            h_tilde=h_tilde, seed=config.seed,
                            config=config.snapshot())


class _Hypothesis:
    __slots__ = ("state", "g", "records", "pending", "queue", "done")

    def __init__(self, state, g, records, pending, queue, done):
        self.state = state
        self.g = g
        self.records = records
        self.pending = pending
        self.queue = queue
        self.done = done


@dataclass
class _Child:
    hyp: _Hypothesis
    action: Optional[Action]  # None = carried-over finished hypothesis
    cost: float = 0.0
    before: float = 0.0
    bypass_used: bool = False
    off_manifold: bool = False
    n_candidates: int = 0
    block: tuple[int, int] = (0, 0)
    queue: Optional[deque] = None
    succ: Optional[SeqState] = None
    after: Optional[float] = None
    ranked: int = 0  # successor evaluations charged to this child's step


def beam_search(config: SamplerConfig, denoiser: DenoiserHandle, length: int,
                rng: Optional[RngHandle] = None) -> TrajectoryRecord:
    """Breadth-limited search over info-gain candidates.

    Every live hypothesis expands through the same candidate machinery as
    the plain info-gain step (bypass included). Children are ranked by
    f = g + immediate_cost + successor uncertainty and the lowest beam_width
    survive; ranking (and its successor evaluations) is skipped when the
    children already fit in the beam, which keeps beam_width = 1 identical
    to a plain info-gain run on the same seed. Finished hypotheses carry
    forward with f = g until every hypothesis is complete; the one with the
    lowest accumulated cost wins.
    """
    if config.schedule.length != length:
        raise ValueError("schedule length does not match the task length")
    handle = rng if rng is not None else RngHandle(config.seed)
    gen = handle.generator()
    start = SeqState.all_masked(length, denoiser.joint.vocab_size)
    hyps = [_Hypothesis(start, 0.0, [], None, deque(budgets(config.schedule)),
                        False)]

    while not all(h.done for h in hyps):
        children: list[_Child] = []
        for hyp in hyps:
            if hyp.done:
                children.append(_Child(hyp=hyp, action=None))
                continue
            marginals, off = denoiser.evaluate(hyp.state)
            if hyp.pending is not None:
                after = state_uncertainty(
                    marginals.restricted(*hyp.pending.block))
                hyp.records.append(hyp.pending.finalize(after))
                hyp.pending = None
            block = active_block(hyp.state, config.blocks)
            inblock = marginals.restricted(*block)
            before = state_uncertainty(inblock)
            queue = deque(hyp.queue)
            if not queue:
                raise DecodingInvariantError(
                    "schedule exhausted with masks remaining")
            budget = queue.popleft()
            k = min(budget, len(inblock))
            if budget > k:
                queue.appendleft(budget - k)
            plan = _plan_candidates(hyp.state, marginals, k, config, gen,
                                    block)
            n_proposed = 0 if plan.bypass_used else len(plan.actions)
            for action in plan.actions:
                children.append(_Child(
                    hyp=hyp, action=action,
                    cost=immediate_cost(action, inblock), before=before,
                    bypass_used=plan.bypass_used, off_manifold=off,
                    n_candidates=n_proposed, block=block,
                    queue=queue, succ=apply(hyp.state, action),
                ))

        if len(children) > config.beam_width:
            live = [c for c in children if c.action is not None]
            if live:
                results = denoiser.batch_evaluate([c.succ for c in live])
                per_hyp = {}
                for c in live:
                    per_hyp[id(c.hyp)] = per_hyp.get(id(c.hyp), 0) + 1
                for child, (margs, _off) in zip(live, results):
                    child.after = state_uncertainty(
                        margs.restricted(*child.block))
                    child.ranked = per_hyp[id(child.hyp)]
            children.sort(key=_child_f)  # stable: ties stay in child order
            children = children[:config.beam_width]

        next_hyps: list[_Hypothesis] = []
        for child in children:
            if child.action is None:
                next_hyps.append(child.hyp)
                continue
            records = list(child.hyp.records)
            calls = 1 + child.ranked
            if child.after is None:
                pend = _Pending(child.action, child.cost, child.before,
                                child.bypass_used, child.off_manifold,
                                child.n_candidates, calls, child.block)
            else:
                pend = None
                records.append(StepRecord(
                    child.action,
                    StepScore.build(child.cost, child.before, child.after),
                    child.bypass_used, child.off_manifold,
                    child.n_candidates, calls))
            hyp = _Hypothesis(child.succ, child.hyp.g + child.cost, records,
                              pend, deque(child.queue), child.succ.is_complete())
            if hyp.done and hyp.pending is not None:
                hyp.records.append(hyp.pending.finalize(0.0))
                hyp.pending = None
            next_hyps.append(hyp)
        hyps = next_hyps

    winner = min(range(len(hyps)), key=lambda i: (hyps[i].g, i))
    best = hyps[winner]
    h_tilde = 0.0
    for rec in best.records:
        h_tilde += rec.score.immediate_cost
    return TrajectoryRecord(steps=tuple(best.records),
                            final_tokens=best.state.tokens, h_tilde=h_tilde,
                            seed=config.seed, config=config.snapshot())


def _child_f(child: _Child) -> float:
    if child.action is None:
        return child.hyp.g
    return child.hyp.g + child.cost + child.after


def best_of_n(config: SamplerConfig, denoiser: DenoiserHandle, length: int,
              rng: Optional[RngHandle] = None) -> TrajectoryRecord:
    """Run n_traj independent single-candidate info-gain trajectories on
    split rng streams and return the one with the lowest cumulative entropy
    (ties go to the lowest stream index)."""
    root = rng if rng is not None else RngHandle(config.seed)
    sub = replace(config, policy="info_gain", n_candidates=1)
    runs = [run_trajectory(sub, denoiser, length, rng=root.child(i))
            for i in range(config.n_traj)]
    winner = min(range(len(runs)), key=lambda i: (runs[i].h_tilde, i))
    return replace(runs[winner], config=config.snapshot())


def decode(config: SamplerConfig, denoiser: DenoiserHandle, length: int,
           rng: Optional[RngHandle] = None) -> TrajectoryRecord:
    """Dispatch to the right driver for the configured policy."""
    if config.policy == "beam":
        return beam_search(config, denoiser, length, rng=rng)
    if config.policy == "best_of_n":
        return best_of_n(config, denoiser, length, rng=rng)
    return run_trajectory(config, denoiser, length, rng=rng)
