"""Scripted policies used as references by the curriculum filter and the evaluator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rsgrpo.env import Episode, gold_trajectory
from rsgrpo.grammar import Layout, TaggedTrajectory, Vocabulary, build
from rsgrpo.policy import PolicyConfig, ToyPolicy


@dataclass
class ScriptedRollout:
    trajectory: TaggedTrajectory


class ReplayPolicy:
    """Emits the gold trajectory whether sampling or decoding greedily."""

    def __init__(self, vocab: Vocabulary, layout: Layout = Layout.EVIDENCE):
        self.vocab = vocab
        self.layout = layout

    def greedy(self, episode: Episode) -> ScriptedRollout:
        return ScriptedRollout(gold_trajectory(episode, self.vocab, self.layout))

    def sample(self, episode: Episode, rng: np.random.Generator, temperature: float = 1.0) -> ScriptedRollout:
        return self.greedy(episode)


class AlwaysAbstainPolicy:
    """Well-formed output whose answer is always the insufficiency token."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab

    def greedy(self, episode: Episode) -> ScriptedRollout:
        v = self.vocab
        contents = [(episode.key,), *[(v.no_info,)] * episode.k, (episode.key,), (v.insufficient,)]
        return ScriptedRollout(build(contents, v, Layout.EVIDENCE))

    def sample(self, episode: Episode, rng: np.random.Generator, temperature: float = 1.0) -> ScriptedRollout:
        return self.greedy(episode)


def uniform_policy(vocab: Vocabulary, layout: Layout = Layout.EVIDENCE) -> ToyPolicy:
    """All-zero parameters: every next token is equally likely."""
    return ToyPolicy(PolicyConfig(vocab, layout))
