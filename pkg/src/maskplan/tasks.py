"""Built-in toy tasks over a shared vocabulary.

Token layout (vocab_size 14, mask = 0 everywhere):

    1..10   decimal digits 0..9
    11, 12  binary digits 0, 1
    13, 14  verdict tokens YES, NO

Both tasks are exact tabular joints, so the oracle denoiser can answer any
conditional by enumeration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable

import numpy as np

from .denoiser import TabularJoint, load_joint, save_joint

if TYPE_CHECKING:
    from .metrics import TrajectoryRecord

DIGIT_BASE = 1       # digit d maps to token d + 1
BIT_ZERO = 11
BIT_ONE = 12
YES = 13
NO = 14
VOCAB_SIZE = 14


def digit_token(d: int) -> int:
    if not 0 <= d <= 9:
        raise ValueError(f"digit {d} outside [0, 9]")
    return DIGIT_BASE + d


def token_digit(token: int) -> int | None:
    """Inverse of digit_token; None when the token is not a digit."""
    if DIGIT_BASE <= token <= DIGIT_BASE + 9:
        return token - DIGIT_BASE
    return None


def bit_token(b: int) -> int:
    return BIT_ONE if b else BIT_ZERO


def token_bit(token: int) -> int | None:
    if token == BIT_ZERO:
        return 0
    if token == BIT_ONE:
        return 1
    return None


@dataclass(frozen=True)
class TaskSpec:
    """A joint distribution plus everything needed to grade and classify
    decodings of it: named position groups and a total correctness
    predicate over fully unmasked token sequences."""

    name: str
    joint: TabularJoint
    groups: dict[str, frozenset[int]]
    correct: Callable[[tuple[int, ...]], bool] = field(compare=False)
    predicate_name: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        covered: set[int] = set()
        for name, positions in self.groups.items():
            if covered & positions:
                raise ValueError(f"group {name!r} overlaps another group")
            covered |= positions
        if covered != set(range(self.joint.length)):
            raise ValueError("groups must partition the sequence positions")

    def group_of(self, position: int) -> str:
        for name, positions in self.groups.items():
            if position in positions:
                return name
        raise ValueError(f"position {position} not in any group")


def _product_bits_needed(factor_hi: int) -> int:
    return int(factor_hi * factor_hi).bit_length()


def _encode_product(c: int, width: int) -> list[int]:
    # MSB first
    return [bit_token((c >> (width - 1 - i)) & 1) for i in range(width)]


def _multiplication_correct(tokens: tuple[int, ...], product_bits: int) -> bool:
    a = token_digit(tokens[0])
    b = token_digit(tokens[1])
    if a is None or b is None:
        return False
    c = 0
    for tok in tokens[2:2 + product_bits]:
        bit = token_bit(tok)
        if bit is None:
            return False
        c = (c << 1) | bit
    return a * b == c


def multiplication_task(factor_lo: int = 2, factor_hi: int = 9,
                        product_bits: int = 7) -> TaskSpec:
    """a times b equals c: positions 0 and 1 hold the decimal factors,
    positions 2 onward hold the product in binary, most significant bit
    first. The joint is uniform over all factor pairs in the range; the
    product is a deterministic function of the factors, so the support
    contains only true equations.
    """
    if not 0 <= factor_lo <= factor_hi <= 9:
        raise ValueError("factor range must satisfy 0 <= lo <= hi <= 9")
    needed = _product_bits_needed(factor_hi)
    if product_bits < needed:
        raise ValueError(
            f"product_bits={product_bits} cannot hold {factor_hi}*{factor_hi} "
            f"(needs {needed})")
    rows = []
    for a in range(factor_lo, factor_hi + 1):
        for b in range(factor_lo, factor_hi + 1):
            rows.append([digit_token(a), digit_token(b)]
                        + _encode_product(a * b, product_bits))
    n = len(rows)
    joint = TabularJoint(np.array(rows, dtype=np.int64),
                         np.full(n, 1.0 / n), VOCAB_SIZE)
    length = 2 + product_bits
    return TaskSpec(
        name="multiplication",
        joint=joint,
        groups={"factors": frozenset({0, 1}),
                "product": frozenset(range(2, length))},
        correct=lambda tokens: _multiplication_correct(tokens, product_bits),
        predicate_name="multiplication",
        params={"factor_lo": factor_lo, "factor_hi": factor_hi,
                "product_bits": product_bits},
    )


def _verdict_correct(tokens: tuple[int, ...], prompt_digit: int) -> bool:
    r = token_digit(tokens[0])
    if r is None or tokens[1] not in (YES, NO):
        return False
    return (tokens[1] == YES) == ((prompt_digit + r) % 2 == 0)


def reasoning_verdict_task(prompt_digit: int) -> TaskSpec:
    """A one-token reasoning slot followed by a Yes/No verdict.

    Position 0 holds a digit r uniform over 0..9; position 1 holds YES
    exactly when prompt_digit + r is even. The reasoning token carries ln 10
    nats of marginal uncertainty against the verdict's ln 2, which is the
    whole point of the task.
    """
    if not 0 <= prompt_digit <= 9:
        raise ValueError("prompt_digit must lie in [0, 9]")
    rows = [[digit_token(r), YES if (prompt_digit + r) % 2 == 0 else NO]
            for r in range(10)]
    joint = TabularJoint(np.array(rows, dtype=np.int64),
                         np.full(10, 0.1), VOCAB_SIZE)
    return TaskSpec(
        name="reasoning_verdict",
        joint=joint,
        groups={"reasoning": frozenset({0}), "verdict": frozenset({1})},
        correct=lambda tokens: _verdict_correct(tokens, prompt_digit),
        predicate_name="reasoning_verdict",
        params={"prompt_digit": prompt_digit},
    )


def support_task(name: str, joint: TabularJoint) -> TaskSpec:
    """Wrap a bare joint: one group spanning every position, correctness
    defined as membership in the support."""
    support = {tuple(int(t) for t in row) for row in joint.sequences}
    return TaskSpec(
        name=name,
        joint=joint,
        groups={"all": frozenset(range(joint.length))},
        correct=lambda tokens: tuple(tokens) in support,
        predicate_name="on_support",
        params={},
    )


def classify_path(traj: "TrajectoryRecord", spec: TaskSpec) -> str:
    """Group label of the first decoded position: earliest step, and within
    that action the lowest position index."""
    return spec.group_of(traj.first_position())


def export_task(spec: TaskSpec, path) -> None:
    """Write the joint in the text format next to a .meta.json sidecar
    carrying the groups and the predicate registry key."""
    path = Path(path)
    save_joint(spec.joint, path)
    meta = {
        "name": spec.name,
        "groups": {g: sorted(ps) for g, ps in spec.groups.items()},
        "predicate": spec.predicate_name,
        "params": spec.params,
    }
    sidecar = path.with_suffix(path.suffix + ".meta.json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                       encoding="utf-8")


def _predicate_from_registry(name: str, params: dict, joint: TabularJoint):
    if name == "multiplication":
        bits = int(params["product_bits"])
        return lambda tokens: _multiplication_correct(tokens, bits)
    if name == "reasoning_verdict":
        p = int(params["prompt_digit"])
        return lambda tokens: _verdict_correct(tokens, p)
    if name == "on_support" or name == "":
        support = {tuple(int(t) for t in row) for row in joint.sequences}
        return lambda tokens: tuple(tokens) in support
    raise ValueError(f"unknown predicate {name!r}")


def load_task(path) -> TaskSpec:
    """Inverse of export_task. A joint file without a sidecar loads as a
    support-membership task with a single position group."""
    path = Path(path)
    joint = load_joint(path)
    sidecar = path.with_suffix(path.suffix + ".meta.json")
    if not sidecar.exists():
        return support_task(path.stem, joint)
    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    groups = {g: frozenset(int(p) for p in ps)
              for g, ps in meta["groups"].items()}
    predicate = _predicate_from_registry(meta.get("predicate", ""),
                                         meta.get("params", {}), joint)
    return TaskSpec(name=meta.get("name", path.stem), joint=joint,
                    groups=groups, correct=predicate,
                    predicate_name=meta.get("predicate", ""),
                    params=dict(meta.get("params", {})))


BUILTIN_TASKS = ("multiplication", "reasoning_verdict")


def build_task(name: str, **params) -> TaskSpec:
    """Build a built-in task by name (CLI entry point)."""
    if name == "multiplication":
        return multiplication_task(**params)
    if name == "reasoning_verdict":
        return reasoning_verdict_task(**params)
    raise ValueError(f"unknown task {name!r}; built-ins: {BUILTIN_TASKS}")
