from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from rsgrpo import advantages as adv
from rsgrpo.config import RunConfig
from rsgrpo.env import DatasetSpec, generate_dataset
from rsgrpo.experiments import make_datasets
from rsgrpo.grammar import Layout, Vocabulary
from rsgrpo.policy import PolicyConfig, ToyPolicy, encoded_grad, oracle_params
from rsgrpo.rewards import ChannelScores
from rsgrpo.trainer import (
    GroupRollouts, Mode, OptimizerConfig, batch_loss, clip_grad_norm, compute_advantages, make_group,
    rs_grpo_loss, run_sft, teacher_filter, train,
)

V = Vocabulary()


@pytest.fixture(scope="module")
def episodes():
    return generate_dataset(DatasetSpec(episodes=40, two_hop_rate=0.5), np.random.default_rng(0))


def noisy_policy(seed=0, scale=2.0):
    config = PolicyConfig(V)
    theta = oracle_params(config, 3.0) + np.random.default_rng(seed).normal(0, scale, config.dim)
    return ToyPolicy(config, theta)


def sampled_group(policy, ep, seed=0, g=6, mode=Mode.RS_GRPO):
    rng = np.random.default_rng(seed)
    return make_group(policy, ep, [policy.sample(ep, rng, 1.2) for _ in range(g)], mode)


def test_mode_routes():
    assert Mode.RS_GRPO.sequence_channels is None
    assert Mode.MIXED_GRPO.sequence_channels == adv.ALL_CHANNELS
    assert Mode.ANSWER_ONLY.sequence_channels == adv.DERIVATION_FORMAT
    assert Mode.THINK_THEN_ANSWER.layout is Layout.THINK_ANSWER


def test_ratio_one_loss_is_mean_advantage(episodes):
    policy = noisy_policy()
    group = sampled_group(policy, episodes[0])
    result = rs_grpo_loss(group, policy.theta, policy.config)
    total = sum(a.sum() for a in group.advantages)
    assert result.loss == pytest.approx(-total / group.n_tokens, abs=1e-12)
    assert result.clip_fraction == 0.0
    expected = -sum(encoded_grad(policy.theta, policy.config, r.encoded, a)
                    for r, a in zip(group.rollouts, group.advantages)) / group.n_tokens
    assert np.allclose(result.grad, expected, atol=1e-12)


def test_zero_advantages_give_zero_loss(episodes):
    policy = noisy_policy()
    group = sampled_group(policy, episodes[1])
    zero = dataclasses.replace(group, advantages=[np.zeros_like(a) for a in group.advantages])
    theta = policy.theta + 0.3
    result = rs_grpo_loss(zero, theta, policy.config)
    assert result.loss == 0.0 and not np.any(result.grad)


def test_clipped_tokens_carry_no_gradient(episodes):
    policy = noisy_policy()
    group = sampled_group(policy, episodes[2])
    group = dataclasses.replace(group, advantages=[np.ones(len(a)) for a in group.advantages])
    # push every sampled token's probability up enough to exceed the upper clip
    w = [np.ones(len(r.encoded)) for r in group.rollouts]
    step = sum(encoded_grad(policy.theta, policy.config, r.encoded, x) for r, x in zip(group.rollouts, w))
    theta = policy.theta + 50.0 * step / np.linalg.norm(step)
    result = rs_grpo_loss(group, theta, policy.config)
    assert result.clip_fraction > 0
    new = [policy.with_theta(theta).log_prob(r.trajectory, group.episode) for r in group.rollouts]
    ratios = np.concatenate([np.exp(n - r.log_probs) for n, r in zip(new, group.rollouts)])
    expected = -np.minimum(ratios, 1.28).sum() / group.n_tokens
    assert result.loss == pytest.approx(expected, rel=1e-12)


def test_inactive_clipping_equals_unclipped_surrogate(episodes):
    policy = noisy_policy()
    group = sampled_group(policy, episodes[3])
    theta = policy.theta + np.random.default_rng(1).normal(0, 1e-4, policy.config.dim)
    result = rs_grpo_loss(group, theta, policy.config)
    new = [policy.with_theta(theta).log_prob(r.trajectory, group.episode) for r in group.rollouts]
    surrogate = sum((np.exp(n - r.log_probs) * a).sum() for n, r, a in zip(new, group.rollouts, group.advantages))
    assert result.clip_fraction == 0.0
    assert result.loss == pytest.approx(-surrogate / group.n_tokens, rel=1e-12)


def test_loss_is_normalised_by_total_tokens(episodes):
    policy = noisy_policy()
    ep = episodes[4]
    base = sampled_group(policy, ep)
    unit = [np.ones(len(a)) for a in base.advantages]
    g1 = dataclasses.replace(base, advantages=unit)
    # duplicating every rollout doubles the tokens and the summed surrogate: the loss is unchanged
    g2 = GroupRollouts(ep, base.rollouts * 2, base.scores * 2, unit * 2)
    l1 = rs_grpo_loss(g1, policy.theta, policy.config).loss
    l2 = rs_grpo_loss(g2, policy.theta, policy.config).loss
    assert l1 == pytest.approx(l2, rel=1e-12) and l1 == pytest.approx(-1.0)
    # a per-sequence mean would weight a short and a long rollout equally; token normalisation does not
    lengths = [len(r.encoded) for r in base.rollouts]
    i, j = int(np.argmin(lengths)), int(np.argmax(lengths))
    if lengths[i] != lengths[j]:
        adv_ij = [np.ones(lengths[i]), -np.ones(lengths[j])]
        g3 = GroupRollouts(ep, [base.rollouts[i], base.rollouts[j]], [base.scores[i], base.scores[j]], adv_ij)
        got = rs_grpo_loss(g3, policy.theta, policy.config).loss
        assert got == pytest.approx(-(lengths[i] - lengths[j]) / (lengths[i] + lengths[j]))


def test_non_finite_ratio_aborts(episodes):
    policy = noisy_policy()
    group = sampled_group(policy, episodes[5])
    bad = dataclasses.replace(group.rollouts[0], log_probs=group.rollouts[0].log_probs - 1e6)
    group = dataclasses.replace(group, rollouts=[bad] + group.rollouts[1:])
    with pytest.raises(FloatingPointError):
        rs_grpo_loss(group, policy.theta, policy.config)


def test_batch_loss_weights_groups_by_tokens(episodes):
    policy = noisy_policy()
    groups = [sampled_group(policy, ep, i) for i, ep in enumerate(episodes[:3])]
    result = batch_loss(groups, policy.theta, policy.config)
    parts = [rs_grpo_loss(g, policy.theta, policy.config) for g in groups]
    assert result.n_tokens == sum(p.n_tokens for p in parts)
    assert result.loss == pytest.approx(sum(p.loss * p.n_tokens for p in parts) / result.n_tokens)


def test_gradient_norm_cap():
    rng = np.random.default_rng(0)
    for _ in range(100):
        g = rng.normal(0, rng.uniform(0.01, 10), 50)
        assert np.linalg.norm(clip_grad_norm(g, 1.0)) <= 1.0 + 1e-9


def test_single_class_routes_coincide_on_zero_document_episodes():
    spec = DatasetSpec(min_docs=0, max_docs=0, episodes=10)
    eps = generate_dataset(spec, np.random.default_rng(1))
    policy = noisy_policy(scale=1.0)
    uniform = adv.uniform_scope_map(adv.ALL_CHANNELS)
    rng = np.random.default_rng(2)
    for ep in eps:
        rollouts = [policy.sample(ep, rng, 1.2) for _ in range(6)]
        scores = [ChannelScores(*rng.random(3)) for _ in rollouts]
        a_rs = compute_advantages(rollouts, scores, Mode.RS_GRPO, scope_map=uniform)
        a_mixed = compute_advantages(rollouts, scores, Mode.MIXED_GRPO)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a_rs, a_mixed))


def test_teacher_filter():
    eps = generate_dataset(DatasetSpec(episodes=100, two_hop_rate=0.5), np.random.default_rng(3))
    kept = teacher_filter(eps, 1)
    assert kept and all(e.hops == 1 for e in kept)
    assert teacher_filter(eps, 2) == eps


@pytest.mark.parametrize("kwargs", [
    {"group_size": 1}, {"temperature": 0.0}, {"workers": 0}, {"lr": -1.0}, {"max_grad_norm": 0.0},
    {"inner_updates": 0}, {"sft_max_hops": 0},
])
def test_optimizer_validation(kwargs):
    with pytest.raises(ValueError):
        OptimizerConfig(**kwargs).validate()


@pytest.fixture(scope="module")
def small_run():
    config = RunConfig().with_overrides({"episodes": "250", "eval_episodes": "80", "epochs": "1"})
    return config, make_datasets(config)


def test_zero_learning_rate_leaves_sft_weights(small_run):
    config, (sft, rl, ev) = small_run
    optim = dataclasses.replace(config.optim, lr=0.0)
    result = train(optim, sft, rl, ev, config.data.vocab)
    assert np.array_equal(result.policy.theta, result.sft_policy.theta)
    assert result.final_eval == result.post_sft_eval


def test_train_rejects_vocabulary_mismatch(small_run):
    config, (sft, rl, ev) = small_run
    with pytest.raises(ValueError):
        train(config.optim, sft, rl, ev, Vocabulary(size=20))
    think = run_sft(config.optim, sft[:10], config.data.vocab, Layout.THINK_ANSWER)
    with pytest.raises(ValueError):
        train(config.optim, sft, rl, ev, config.data.vocab, sft_policy=think)


def test_training_is_deterministic(small_run):
    config, (sft, rl, ev) = small_run
    a = train(config.optim, sft, rl, ev, config.data.vocab)
    b = train(config.optim, sft, rl, ev, config.data.vocab)
    assert a.metrics == b.metrics and np.array_equal(a.policy.theta, b.policy.theta)


def test_every_mode_runs(small_run):
    config, (sft, rl, ev) = small_run
    for mode in Mode:
        optim = dataclasses.replace(config.optim, mode=mode, dynamic_sampling=True, debug_gradcheck=True)
        result = train(optim, sft, rl, ev, config.data.vocab)
        assert result.final_eval is not None and result.policy.layout is mode.layout


def test_derivation_reward_trends_upward():
    """Seed-averaged per-epoch mean derivation reward, smoothed by a trailing window of up to 5 epochs."""
    config = RunConfig()
    sft, rl, ev = make_datasets(config)
    per_seed = []
    for seed in range(5):
        optim = dataclasses.replace(config.optim, seed=seed)
        sft_policy = run_sft(optim, sft, config.data.vocab)
        result = train(optim, sft, rl, ev, config.data.vocab, sft_policy=sft_policy)
        rows = result.metrics[1:]
        steps_per_epoch = len(rows) // optim.epochs
        per_seed.append([np.mean([r["mean_derivation"] for r in rows[e * steps_per_epoch:(e + 1) * steps_per_epoch]])
                         for e in range(optim.epochs)])
    epochs = np.mean(per_seed, axis=0)
    smoothed = [epochs[max(0, e - 4):e + 1].mean() for e in range(len(epochs))]
    assert np.all(np.diff(smoothed) >= 0), smoothed
