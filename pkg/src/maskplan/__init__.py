"""maskplan: decoding-order planning for masked sequence models.

The library decodes sequences from an all-masked start by repeatedly asking
a denoiser for per-position marginals and committing (position, token)
pairs. It ships greedy certainty policies, a lookahead-uncertainty policy,
an information-gain policy with a high-confidence bypass, beam search, and
best-of-N, all verified against exact tabular joint distributions.
"""

from .core import (MASK_TOKEN, SCHEDULE_KINDS, Action, BlockSchedule,
                   RngHandle, SeqState, StepSchedule, active_block, apply,
                   budgets)
from .denoiser import (BACKENDS, DenoiserHandle, MarginalSet, TabularJoint,
                       load_joint, random_joint, save_joint)
from .metrics import (RunSummary, StepRecord, TrajectoryRecord,
                      call_accounting, cumulative_entropy,
                      pearson_entropy_accuracy, summarize)
from .samplers import (POLICIES, BeamEntry, SamplerConfig, beam_search,
                       best_of_n, decode, greedy_certainty_step,
                       info_gain_step, lookum_step, propose_candidates,
                       run_trajectory, select_positions, tilted_distribution,
                       token_sample)
from .scoring import (CERTAINTY_NAMES, CertaintyKind, StepScore, certainty,
                      immediate_cost, info_gain_objective, state_uncertainty,
                      token_entropy)
from .tasks import (TaskSpec, build_task, classify_path, export_task,
                    load_task, multiplication_task, reasoning_verdict_task,
                    support_task)

__version__ = "0.1.0"

__all__ = [
    "MASK_TOKEN", "SCHEDULE_KINDS", "Action", "BlockSchedule", "RngHandle",
    "SeqState", "StepSchedule", "active_block", "apply", "budgets",
    "BACKENDS", "DenoiserHandle", "MarginalSet", "TabularJoint",
    "load_joint", "random_joint", "save_joint",
    "RunSummary", "StepRecord", "TrajectoryRecord", "call_accounting",
    "cumulative_entropy", "pearson_entropy_accuracy", "summarize",
    "POLICIES", "BeamEntry", "SamplerConfig", "beam_search", "best_of_n",
    "decode", "greedy_certainty_step", "info_gain_step", "lookum_step",
    "propose_candidates", "run_trajectory", "select_positions",
    "tilted_distribution", "token_sample",
    "CERTAINTY_NAMES", "CertaintyKind", "StepScore", "certainty",
    "immediate_cost", "info_gain_objective", "state_uncertainty",
    "token_entropy",
    "TaskSpec", "build_task", "classify_path", "export_task", "load_task",
    "multiplication_task", "reasoning_verdict_task", "support_task",
    "__version__",
]
