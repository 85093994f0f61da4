"""Sequence-level reward channels: perception, derivation and format."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

from rsgrpo.grammar import Layout, TaggedTrajectory, Vocabulary

if TYPE_CHECKING:
    from rsgrpo.env import Episode

DEFAULT_K_POS = 2.0


@dataclass(frozen=True)
class EvidenceRecord:
    predicted: tuple[tuple[int, ...], ...]
    gold: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        if len(self.predicted) != len(self.gold):
            raise ValueError("predicted and gold evidence must cover the same documents")

    @property
    def relevance(self) -> tuple[int, ...]:
        return tuple(int(len(g) > 0) for g in self.gold)


@dataclass(frozen=True)
class AnswerRecord:
    predicted: tuple[int, ...]
    gold: tuple[int, ...]
    sufficient: bool


@dataclass(frozen=True)
class ChannelScores:
    perception: float
    derivation: float
    format: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.perception, self.derivation, self.format)


def token_bag_f1(pred: Iterable[int], gold: Iterable[int]) -> float:
    pred_bag, gold_bag = Counter(pred), Counter(gold)
    if not pred_bag and not gold_bag:
        return 1.0
    if not pred_bag or not gold_bag:
        return 0.0
    overlap = sum((pred_bag & gold_bag).values())
    if overlap == 0:
        return 0.0
    precision = overlap / sum(pred_bag.values())
    recall = overlap / sum(gold_bag.values())
    return 2 * precision * recall / (precision + recall)


def perception_reward(record: EvidenceRecord, no_info: int, k_pos: float = DEFAULT_K_POS) -> float:
    """Weighted evidence score over documents, normalised to [0, 1].

    A relevant document earns ``k_pos * f1`` out of ``k_pos``; an irrelevant one
    earns 1 out of 1 only for the exact abstention ``[no_info]``.
    """
    if not record.gold:
        raise ValueError("perception reward needs at least one document")
    if k_pos <= 0:
        raise ValueError("k_pos must be positive")
    earned = 0.0
    possible = 0.0
    for pred, gold in zip(record.predicted, record.gold):
        if gold:
            earned += k_pos * token_bag_f1(pred, gold)
            possible += k_pos
        else:
            earned += 1.0 if tuple(pred) == (no_info,) else 0.0
            possible += 1.0
    return earned / possible


def effective_gold(record: AnswerRecord, insufficient: int) -> tuple[int, ...]:
    return tuple(record.gold) if record.sufficient else (insufficient,)


def derivation_reward(record: AnswerRecord, insufficient: int) -> float:
    return token_bag_f1(record.predicted, effective_gold(record, insufficient))


def format_reward(trajectory: TaggedTrajectory) -> float:
    return 1.0 if trajectory.well_formed else 0.0


def score_rollout(
    trajectory: TaggedTrajectory,
    episode: "Episode",
    vocab: Vocabulary,
    k_pos: float = DEFAULT_K_POS,
) -> ChannelScores:
    if trajectory.k != episode.k and trajectory.layout is Layout.EVIDENCE:
        raise ValueError(f"trajectory has k={trajectory.k}, episode has k={episode.k}")
    if not trajectory.well_formed:
        return ChannelScores(0.0, 0.0, 0.0)

    answer = AnswerRecord(trajectory.answer or (), episode.answer, episode.sufficient)
    derivation = derivation_reward(answer, vocab.insufficient)
    if trajectory.layout is Layout.THINK_ANSWER or episode.k == 0:
        # no evidence scopes to grade
        perception = 0.0
    else:
        evidence = EvidenceRecord(tuple(trajectory.evidence_contents()), episode.gold_evidence)
        perception = perception_reward(evidence, vocab.no_info, k_pos)
    return ChannelScores(perception, derivation, 1.0)


def mean_scores(scores: Sequence[ChannelScores]) -> ChannelScores:
    n = len(scores)
    if n == 0:
        return ChannelScores(float("nan"), float("nan"), float("nan"))
    return ChannelScores(
        sum(s.perception for s in scores) / n,
        sum(s.derivation for s in scores) / n,
        sum(s.format for s in scores) / n,
    )
