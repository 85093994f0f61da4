from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rsgrpo import advantages as adv
from rsgrpo.grammar import Vocabulary, build, parse
from rsgrpo.rewards import ChannelScores

V = Vocabulary()


def traj(k: int = 2):
    return build([(20,), *[(V.no_info,)] * k, (20, 21), (21,)], V)


def test_mapping_of_scopes_to_channels():
    t = traj(1)
    row = adv.aggregate_token_rewards(t, ChannelScores(0.2, 0.6, 1.0))
    kinds = ["tag", "obs", "tag", "tag", "ev", "tag", "tag", "th", "th", "tag", "tag", "ans", "tag"]
    expected = {"tag": adv.FORMAT_ONLY, "obs": adv.PERCEPTION_FORMAT, "ev": adv.PERCEPTION_FORMAT,
                "th": adv.DERIVATION_FORMAT, "ans": adv.DERIVATION_FORMAT}
    assert [expected[k] for k in kinds] == list(row.channels)
    value = {"tag": 1.0, "obs": 0.6, "ev": 0.6, "th": 0.8, "ans": 0.8}
    assert np.allclose(row.rewards, [value[k] for k in kinds], atol=1e-15)


def test_malformed_trajectory_is_format_only():
    bad = parse(traj().tokens[:-1], V, 2)
    row = adv.aggregate_token_rewards(bad, ChannelScores(0, 0, 0))
    assert set(row.channels) == {adv.FORMAT_ONLY}


def test_normalize_zero_spread_gives_zeros():
    assert np.array_equal(adv.normalize(np.full(5, 0.3)), np.zeros(5))


def test_group_needs_two_rollouts():
    row = adv.aggregate_token_rewards(traj(), ChannelScores(1, 1, 1))
    with pytest.raises(ValueError):
        adv.scoped_advantages([row])
    with pytest.raises(ValueError):
        adv.sequence_advantages([ChannelScores(1, 1, 1)], [3])


scores = st.builds(ChannelScores, st.floats(0, 1), st.floats(0, 1), st.sampled_from([0.0, 1.0]))


@settings(max_examples=300, deadline=None)
@given(st.lists(scores, min_size=2, max_size=8))
def test_class_representatives_are_standardised(group):
    t = traj()
    rows = [adv.aggregate_token_rewards(t, s) for s in group]
    out = np.array(adv.scoped_advantages(rows))
    for cs in {adv.FORMAT_ONLY, adv.PERCEPTION_FORMAT, adv.DERIVATION_FORMAT}:
        col = out[:, rows[0].channels.index(cs)]
        raw = np.array([adv.class_reward(s, cs) for s in group])
        if raw.std() < adv.STD_FLOOR:
            assert np.all(col == 0)
        else:
            assert abs(col.mean()) < 1e-9 and abs(col.std() - 1) < 1e-9


def test_sequence_route_broadcasts_one_value():
    group = [ChannelScores(0, 0, 1), ChannelScores(1, 1, 1)]
    out = adv.sequence_advantages(group, [3, 5])
    assert np.allclose(out[0], -1) and np.allclose(out[1], 1)
    assert [len(a) for a in out] == [3, 5]


def test_uniform_scope_map_matches_sequence_route_bitwise():
    rng = np.random.default_rng(0)
    uniform = adv.uniform_scope_map(adv.ALL_CHANNELS)
    for _ in range(200):
        group = [ChannelScores(*rng.random(3)) for _ in range(6)]
        trajs = [traj(int(rng.integers(0, 3))) for _ in group]
        rows = [adv.aggregate_token_rewards(t, s, uniform) for t, s in zip(trajs, group)]
        scoped = adv.scoped_advantages(rows)
        seq = adv.sequence_advantages(group, [len(t) for t in trajs])
        assert all(a.tobytes() == b.tobytes() for a, b in zip(scoped, seq))


def test_positional_mode_normalises_per_position():
    short, long_ = traj(1), traj(2)
    rows = [adv.aggregate_token_rewards(t, s) for t, s in
            [(short, ChannelScores(0, 0, 1)), (long_, ChannelScores(1, 1, 1)), (long_, ChannelScores(0.5, 0.5, 1))]]
    out = adv.scoped_advantages(rows, positional=True)
    # past the short rollout only two rollouts remain
    t = len(short)
    pair = np.array([out[1][t], out[2][t]])
    assert np.allclose(pair, adv.normalize(np.array([rows[1].rewards[t], rows[2].rewards[t]])))


def test_class_reward_rejects_empty_set():
    with pytest.raises(ValueError):
        adv.class_reward(ChannelScores(1, 1, 1), frozenset())


def test_documented_group_examples():
    assert np.allclose(adv.normalize(np.array([1.0, 0.0])), [1.0, -1.0])
    assert np.allclose(adv.normalize(np.array([1.0, 1.0, 0.0, 0.0])), [1, 1, -1, -1])
    row = adv.aggregate_token_rewards(traj(0), ChannelScores(0.6, 1.0, 1.0))
    assert row.rewards[1] == pytest.approx(0.8)
    tag = adv.aggregate_token_rewards(traj(0), ChannelScores(1.0, 1.0, 0.0))
    assert tag.rewards[0] == 0.0
