"""Sufficiency-aware evaluation: global accuracy, F1 and the per-context breakdown."""

from __future__ import annotations

import enum
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from concurrent.futures import Executor
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from rsgrpo.env import Episode
from rsgrpo.grammar import TaggedTrajectory, Vocabulary
from rsgrpo.rewards import AnswerRecord, effective_gold, token_bag_f1


class ContextClass(str, enum.Enum):
    SUFFICIENT = "sufficient"
    INSUFFICIENT = "insufficient"


class Outcome(str, enum.Enum):
    CORRECT = "correct"
    INCORRECT = "incorrect"
    ABSTENTION = "abstention"


def classify_context(episode: Episode) -> ContextClass:
    return ContextClass.SUFFICIENT if episode.sufficient else ContextClass.INSUFFICIENT


class GreedyPolicy(Protocol):
    def greedy(self, episode: Episode): ...


@dataclass
class EpisodeAudit:
    episode_id: int
    context: str
    prediction: list[int] | None
    gold: list[int]
    outcome: str
    correct: bool
    f1: float


@dataclass
class EvalResult:
    accuracy: float
    f1: float
    n_sufficient: int
    n_insufficient: int
    # per context class: fractions of correct / incorrect / abstention (mutually exclusive, correct first)
    breakdown: dict[str, dict[str, float]]
    # per context class: fraction of predictions equal to the insufficiency token, right or wrong
    abstain_rate: dict[str, float]
    metadata: dict = field(default_factory=lambda: {"f1_averaging": "mean-over-queries", "accuracy": "exact token-bag match"})

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def judge(prediction: Sequence[int] | None, episode: Episode, vocab: Vocabulary) -> EpisodeAudit:
    """Score one prediction; ``None`` means the output had no answer span."""
    gold = effective_gold(AnswerRecord((), episode.answer, episode.sufficient), vocab.insufficient)
    context = classify_context(episode).value
    if prediction is None:
        return EpisodeAudit(episode.id, context, None, list(gold), Outcome.INCORRECT.value, False, 0.0)
    prediction = tuple(prediction)
    correct = Counter(prediction) == Counter(gold)
    f1 = token_bag_f1(prediction, gold)
    if correct:
        outcome = Outcome.CORRECT
    elif prediction == (vocab.insufficient,):
        outcome = Outcome.ABSTENTION
    else:
        outcome = Outcome.INCORRECT
    return EpisodeAudit(episode.id, context, list(prediction), list(gold), outcome.value, correct, f1)


def summarize(audits: Sequence[EpisodeAudit], vocab: Vocabulary) -> EvalResult:
    if not audits:
        raise ValueError("cannot summarise an empty evaluation")
    n = len(audits)
    breakdown = {}
    abstain = {}
    counts = {}
    for cls in ContextClass:
        rows = [a for a in audits if a.context == cls.value]
        counts[cls] = len(rows)
        if rows:
            tally = Counter(a.outcome for a in rows)
            breakdown[cls.value] = {o.value: tally[o.value] / len(rows) for o in Outcome}
            abstain[cls.value] = sum(a.prediction == [vocab.insufficient] for a in rows) / len(rows)
        else:
            breakdown[cls.value] = {o.value: 0.0 for o in Outcome}
            abstain[cls.value] = 0.0
    return EvalResult(
        accuracy=sum(a.correct for a in audits) / n,
        f1=sum(a.f1 for a in audits) / n,
        n_sufficient=counts[ContextClass.SUFFICIENT],
        n_insufficient=counts[ContextClass.INSUFFICIENT],
        breakdown=breakdown,
        abstain_rate=abstain,
    )


def answer_of(trajectory: TaggedTrajectory) -> tuple[int, ...] | None:
    return trajectory.answer if trajectory.well_formed else None


def _judge_chunk(policy: GreedyPolicy, episodes: Sequence[Episode], vocab: Vocabulary) -> list[EpisodeAudit]:
    return [judge(answer_of(policy.greedy(ep).trajectory), ep, vocab) for ep in episodes]


def evaluate_with_audit(
    policy: GreedyPolicy,
    episodes: Sequence[Episode],
    vocab: Vocabulary,
    executor: Executor | None = None,
    chunks: int = 1,
) -> tuple[EvalResult, list[EpisodeAudit]]:
    """Greedy-decode every episode and score its answer span against the effective gold.

    With an executor the episodes are split into ``chunks`` contiguous pieces;
    greedy decoding is deterministic so the result does not depend on the split.
    """
    if not episodes:
        raise ValueError("evaluation dataset is empty")
    if executor is None or chunks <= 1:
        audits = _judge_chunk(policy, episodes, vocab)
    else:
        bounds = np.linspace(0, len(episodes), chunks + 1).astype(int)
        parts = [list(episodes[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
        futures = [executor.submit(_judge_chunk, policy, part, vocab) for part in parts]
        audits = [a for f in futures for a in f.result()]
    return summarize(audits, vocab), audits


def evaluate(policy: GreedyPolicy, episodes: Sequence[Episode], vocab: Vocabulary,
             executor: Executor | None = None, chunks: int = 1) -> EvalResult:
    return evaluate_with_audit(policy, episodes, vocab, executor, chunks)[0]


def write_audit(path: str | Path, audits: Sequence[EpisodeAudit]) -> None:
    with open(path, "w") as f:
        for a in audits:
            f.write(json.dumps(asdict(a), sort_keys=True) + "\n")
