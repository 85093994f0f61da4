from __future__ import annotations

import numpy as np
import pytest

from rsgrpo.config import RunConfig
from rsgrpo.env import DatasetSpec, generate_dataset, gold_trajectory
from rsgrpo.experiments import make_datasets
from rsgrpo.grammar import Layout, Vocabulary
from rsgrpo.policy import PolicyConfig, ToyPolicy, max_length, oracle_params, step_logits
from rsgrpo.trainer import run_sft, teacher_filter

V = Vocabulary()


@pytest.fixture(scope="module")
def episodes():
    return generate_dataset(DatasetSpec(episodes=200, two_hop_rate=0.5), np.random.default_rng(0))


def random_policy(seed=0, scale=1.0, layout=Layout.EVIDENCE):
    config = PolicyConfig(V, layout)
    return ToyPolicy(config, np.random.default_rng(seed).normal(0, scale, config.dim))


def test_parameter_count_is_small():
    assert PolicyConfig(V).dim <= 100_000


def test_sampled_log_probs_match_scoring(episodes):
    policy = random_policy()
    rng = np.random.default_rng(1)
    for ep in episodes[:30]:
        r = policy.sample(ep, rng, 1.0)
        assert np.allclose(r.log_probs, policy.log_prob(r.trajectory, ep), atol=1e-12)


def test_distributions_are_normalised(episodes):
    policy = random_policy(scale=3.0)
    ep = episodes[0]
    ctx = policy.context(ep)
    for tok in gold_trajectory(ep, V).tokens:
        logits = policy.logits(ctx)
        p = np.exp(logits - logits.max())
        assert np.isclose((p / p.sum()).sum(), 1.0)
        ctx.step(tok)


def test_perturbing_one_entry_keeps_normalisation(episodes):
    policy = random_policy()
    traj = gold_trajectory(episodes[0], V)
    theta = policy.theta.copy()
    theta[5] += 0.7
    lp = ToyPolicy(policy.config, theta).log_prob(traj, episodes[0])
    assert np.all(lp <= 0)


def test_same_seed_same_sample(episodes):
    policy = random_policy()
    a = policy.sample(episodes[3], np.random.default_rng(5), 1.2)
    b = policy.sample(episodes[3], np.random.default_rng(5), 1.2)
    assert a.trajectory == b.trajectory and np.array_equal(a.log_probs, b.log_probs)


def test_cold_temperature_equals_greedy(episodes):
    policy = random_policy(scale=2.0)
    for ep in episodes[:20]:
        cold = policy.sample(ep, np.random.default_rng(0), 1e-4)
        assert cold.trajectory == policy.greedy(ep).trajectory


def test_temperature_must_be_positive(episodes):
    with pytest.raises(ValueError):
        random_policy().sample(episodes[0], np.random.default_rng(0), 0.0)


@pytest.mark.parametrize("layout", list(Layout))
def test_oracle_parameters_decode_gold(episodes, layout):
    config = PolicyConfig(V, layout)
    policy = ToyPolicy(config, oracle_params(config))
    for ep in episodes:
        assert policy.greedy(ep).trajectory == gold_trajectory(ep, V, layout)


def test_uniform_policy_respects_length_cap(episodes):
    policy = ToyPolicy(PolicyConfig(V))
    rng = np.random.default_rng(0)
    for ep in episodes[:50]:
        assert len(policy.sample(ep, rng).trajectory) <= max_length(ep.k)


def test_checkpoint_round_trip_is_exact(tmp_path):
    policy = random_policy(seed=3)
    policy.save(tmp_path / "p.json", {"stage": "test"})
    back = ToyPolicy.load(tmp_path / "p.json")
    assert np.array_equal(back.theta, policy.theta) and back.config == policy.config


def test_theta_validation():
    config = PolicyConfig(V)
    with pytest.raises(ValueError):
        ToyPolicy(config, np.zeros(3))
    bad = np.zeros(config.dim)
    bad[0] = np.nan
    with pytest.raises(ValueError):
        ToyPolicy(config, bad)


def test_step_logits_shape():
    policy = random_policy()
    assert step_logits(policy.theta, policy.config, (0, 18), []).shape == (V.size,)


def test_sft_policy_emits_well_formed_trajectories():
    config = RunConfig()
    sft, _, _ = make_datasets(config)
    policy = run_sft(config.optim, sft, config.data.vocab)
    train_eps = teacher_filter(sft, config.optim.sft_max_hops)
    rng = np.random.default_rng(0)
    rate = np.mean([policy.sample(e, rng, 1.0).trajectory.well_formed for e in train_eps])
    assert rate >= 0.95
