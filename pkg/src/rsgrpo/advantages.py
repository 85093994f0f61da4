"""Reward-scope mapping, per-token scope rewards and group-relative advantages.

Two routes produce advantages for a group of rollouts:

* the scoped route (``scoped_advantages``) gives every token the mean of the
  channels its scope is bound to, then standardises each channel class across
  the group separately;
* the sequence route (``sequence_advantages``) is plain GRPO: one scalar reward
  per rollout, standardised across the group and broadcast to every token.

With a scope map that sends every token to the same channel set, the scoped
route computes exactly what the sequence route computes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from rsgrpo.grammar import ScopeId, ScopeKind, TaggedTrajectory, scope_kinds
from rsgrpo.rewards import ChannelScores

STD_FLOOR = 1e-8


class Channel(enum.Enum):
    PERCEPTION = "perception"
    DERIVATION = "derivation"
    FORMAT = "format"


# fixed summation order keeps the per-class means bit-reproducible
CHANNEL_ORDER = (Channel.PERCEPTION, Channel.DERIVATION, Channel.FORMAT)

ChannelSet = frozenset

PERCEPTION_FORMAT = frozenset({Channel.PERCEPTION, Channel.FORMAT})
DERIVATION_FORMAT = frozenset({Channel.DERIVATION, Channel.FORMAT})
FORMAT_ONLY = frozenset({Channel.FORMAT})
ALL_CHANNELS = frozenset(CHANNEL_ORDER)

ScopeMap = Mapping["ScopeKind | None", frozenset]

REWARD_SCOPES: dict = {
    ScopeKind.OBSERVE: PERCEPTION_FORMAT,
    ScopeKind.EVIDENCE: PERCEPTION_FORMAT,
    ScopeKind.THINK: DERIVATION_FORMAT,
    ScopeKind.ANSWER: DERIVATION_FORMAT,
    None: FORMAT_ONLY,
}


def uniform_scope_map(channels: frozenset) -> dict:
    """A scope map that binds every token, tags included, to ``channels``."""
    return {kind: frozenset(channels) for kind in (*ScopeKind, None)}


def channel_set(scope: ScopeId | ScopeKind | None, scope_map: ScopeMap = REWARD_SCOPES) -> frozenset:
    kind = scope.kind if isinstance(scope, ScopeId) else scope
    return scope_map[kind]


def channel_value(scores: ChannelScores, channel: Channel) -> float:
    if channel is Channel.PERCEPTION:
        return scores.perception
    if channel is Channel.DERIVATION:
        return scores.derivation
    return scores.format


def class_reward(scores: ChannelScores, channels: frozenset) -> float:
    """Mean of the in-scope channel scores."""
    if not channels:
        raise ValueError("empty channel set")
    total = 0.0
    for channel in CHANNEL_ORDER:
        if channel in channels:
            total += channel_value(scores, channel)
    return total / len(channels)


@dataclass(frozen=True)
class TokenRewardRow:
    rewards: np.ndarray
    channels: tuple[frozenset, ...]
    scores: ChannelScores

    def __len__(self) -> int:
        return len(self.channels)


def aggregate_token_rewards(
    trajectory: TaggedTrajectory,
    scores: ChannelScores,
    scope_map: ScopeMap = REWARD_SCOPES,
) -> TokenRewardRow:
    channels = tuple(scope_map[kind] for kind in scope_kinds(trajectory))
    cache: dict[frozenset, float] = {}
    rewards = np.empty(len(channels))
    for t, cs in enumerate(channels):
        if cs not in cache:
            cache[cs] = class_reward(scores, cs)
        rewards[t] = cache[cs]
    return TokenRewardRow(rewards, channels, scores)


def normalize(values: np.ndarray) -> np.ndarray:
    """Standardise with population statistics; zero spread gives zeros."""
    values = np.asarray(values, dtype=float)
    std = values.std()
    if not np.isfinite(std) or std < STD_FLOOR:
        return np.zeros_like(values)
    return (values - values.mean()) / std


def scoped_advantages(rows: Sequence[TokenRewardRow], positional: bool = False) -> list[np.ndarray]:
    """Token advantages for one group.

    By default tokens are pooled by channel class: the class reward of each
    rollout is standardised across all G rollouts of the group. With
    ``positional=True`` the standardisation runs over the rollouts that reach
    position t, one position at a time.
    """
    if len(rows) < 2:
        raise ValueError("group advantages need at least two rollouts")
    if positional:
        return _positional_advantages(rows)

    classes: list[frozenset] = []
    for row in rows:
        for cs in row.channels:
            if cs not in classes:
                classes.append(cs)
    per_class = {
        cs: normalize(np.array([class_reward(row.scores, cs) for row in rows]))
        for cs in classes
    }
    out = []
    for i, row in enumerate(rows):
        adv = np.empty(len(row))
        for t, cs in enumerate(row.channels):
            adv[t] = per_class[cs][i]
        out.append(adv)
    return out


def _positional_advantages(rows: Sequence[TokenRewardRow]) -> list[np.ndarray]:
    out = [np.zeros(len(row)) for row in rows]
    longest = max(len(row) for row in rows)
    for t in range(longest):
        present = [i for i, row in enumerate(rows) if len(row) > t]
        if len(present) < 2:
            continue
        adv = normalize(np.array([rows[i].rewards[t] for i in present]))
        for i, a in zip(present, adv):
            out[i][t] = a
    return out


def sequence_advantages(
    scores: Sequence[ChannelScores],
    lengths: Sequence[int],
    channels: frozenset = ALL_CHANNELS,
) -> list[np.ndarray]:
    """Standard GRPO: one reward per rollout (mean of ``channels``), broadcast to all tokens."""
    if len(scores) < 2:
        raise ValueError("group advantages need at least two rollouts")
    adv = normalize(np.array([class_reward(s, channels) for s in scores]))
    return [np.full(n, a) for a, n in zip(adv, lengths)]
