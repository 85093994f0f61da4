"""SFT cold start and reward-scoped GRPO training of the toy policy."""

from __future__ import annotations

import enum
import logging
from concurrent.futures import Executor, ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from rsgrpo import advantages as adv
from rsgrpo.env import Episode, curriculum_filter, CurriculumReport, gold_trajectory
from rsgrpo.evaluation import EvalResult, evaluate
from rsgrpo.grammar import Layout, TaggedTrajectory, Vocabulary
from rsgrpo.policy import Encoded, PolicyConfig, Rollout, ToyPolicy, encoded_grad, encoded_log_probs
from rsgrpo.rewards import ChannelScores, mean_scores, score_rollout

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "step", "mode", "mean_perception", "mean_derivation", "mean_format",
    "loss", "clip_fraction", "eval_acc", "eval_f1",
)


class Mode(str, enum.Enum):
    RS_GRPO = "rs-grpo"
    MIXED_GRPO = "mixed-grpo"
    ANSWER_ONLY = "answer-only"
    THINK_THEN_ANSWER = "think-then-answer"

    @property
    def layout(self) -> Layout:
        return Layout.THINK_ANSWER if self is Mode.THINK_THEN_ANSWER else Layout.EVIDENCE

    @property
    def sequence_channels(self) -> frozenset | None:
        """Channel set of the plain-GRPO route, or None for the scoped route."""
        if self is Mode.RS_GRPO:
            return None
        if self is Mode.MIXED_GRPO:
            return adv.ALL_CHANNELS
        return adv.DERIVATION_FORMAT


@dataclass
class OptimizerConfig:
    mode: Mode = Mode.RS_GRPO
    group_size: int = 8
    # reference run used 1e-6 on a 7B model; retuned for the toy policy
    lr: float = 35.0
    clip_low: float = 0.2
    clip_high: float = 0.28
    temperature: float = 1.2
    rollout_batch: int = 32
    epochs: int = 4
    max_grad_norm: float = 1.0
    # reference value 1e-2 shrank weights by lr*wd ~ 1e-8 per step; at this lr the same
    # coefficient would erase the SFT solution in a few steps, so the shrink is kept tiny
    weight_decay: float = 1e-5
    # reference SFT used 5e-7 for one epoch; retuned so sampled rollouts are mostly well-formed
    sft_lr: float = 20.0
    sft_epochs: int = 16
    sft_batch: int = 32
    # SFT keeps only episodes a limited teacher answers correctly: at most this many hops
    sft_max_hops: int = 1
    k_pos: float = 2.0
    curriculum: bool = True
    curriculum_group: int = 8
    dynamic_sampling: bool = False
    positional_advantages: bool = False
    inner_updates: int = 1
    shared_groups: bool = True
    debug_gradcheck: bool = False
    workers: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        self.mode = Mode(self.mode)

    def validate(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.clip_low <= 0 or self.clip_high <= 0:
            raise ValueError("clip bounds must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.rollout_batch < 1 or self.sft_batch < 1:
            raise ValueError("batch sizes must be positive")
        if self.epochs < 0 or self.sft_epochs < 0 or self.inner_updates < 1:
            raise ValueError("epoch counts must be non-negative and inner_updates >= 1")
        if self.workers < 1 or self.sft_max_hops < 1:
            raise ValueError("workers and sft_max_hops must be >= 1")
        if self.lr < 0 or self.sft_lr < 0 or self.max_grad_norm <= 0:
            raise ValueError("learning rates must be >= 0 and max_grad_norm > 0")


# ---------------------------------------------------------------------------
# SFT
# ---------------------------------------------------------------------------

def sft_objective(theta: np.ndarray, config: PolicyConfig, batch: Sequence[Encoded]) -> tuple[float, np.ndarray]:
    """Mean per-token negative log-likelihood and its gradient."""
    n_tokens = sum(len(e) for e in batch)
    if n_tokens == 0:
        return 0.0, np.zeros(config.dim)
    nll = 0.0
    grad = np.zeros(config.dim)
    for enc in batch:
        nll -= encoded_log_probs(theta, config, enc).sum()
        grad -= encoded_grad(theta, config, enc)
    return nll / n_tokens, grad / n_tokens


def sft_step(
    policy: ToyPolicy,
    trajectories: Sequence[TaggedTrajectory],
    episodes: Sequence[Episode],
    lr: float,
    max_grad_norm: float | None = None,
) -> tuple[ToyPolicy, float]:
    """One gradient step on token-level cross-entropy over gold trajectories.

    Returns the updated policy and the batch NLL measured before the step.
    """
    if any(not t.well_formed for t in trajectories):
        raise ValueError("SFT batch contains a malformed trajectory")
    batch = [policy.encode(t.tokens, e) for t, e in zip(trajectories, episodes)]
    return _sft_update(policy, batch, lr, max_grad_norm)


def _sft_update(policy: ToyPolicy, batch: Sequence[Encoded], lr: float, max_grad_norm: float | None):
    nll, grad = sft_objective(policy.theta, policy.config, batch)
    if max_grad_norm is not None:
        grad = clip_grad_norm(grad, max_grad_norm)
    return policy.with_theta(policy.theta - lr * grad), nll


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


# ---------------------------------------------------------------------------
# RL
# ---------------------------------------------------------------------------

@dataclass
class GroupRollouts:
    episode: Episode
    rollouts: list[Rollout]
    scores: list[ChannelScores]
    advantages: list[np.ndarray]

    @property
    def n_tokens(self) -> int:
        return sum(len(r.encoded) for r in self.rollouts)

    @property
    def old_log_probs(self) -> list[np.ndarray]:
        return [r.log_probs for r in self.rollouts]

    def all_zero(self) -> bool:
        return all(not np.any(a) for a in self.advantages)


def compute_advantages(
    rollouts: Sequence[Rollout],
    scores: Sequence[ChannelScores],
    mode: Mode,
    positional: bool = False,
    scope_map: adv.ScopeMap | None = None,
) -> list[np.ndarray]:
    channels = mode.sequence_channels
    if channels is not None:
        return adv.sequence_advantages(scores, [len(r.trajectory) for r in rollouts], channels)
    scope_map = adv.REWARD_SCOPES if scope_map is None else scope_map
    rows = [adv.aggregate_token_rewards(r.trajectory, s, scope_map) for r, s in zip(rollouts, scores)]
    return adv.scoped_advantages(rows, positional=positional)


def make_group(
    policy: ToyPolicy,
    episode: Episode,
    rollouts: list[Rollout],
    mode: Mode,
    k_pos: float = 2.0,
    positional: bool = False,
) -> GroupRollouts:
    scores = [score_rollout(r.trajectory, episode, policy.vocab, k_pos) for r in rollouts]
    advantages = compute_advantages(rollouts, scores, mode, positional)
    return GroupRollouts(episode, rollouts, scores, advantages)


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray
    clip_fraction: float
    n_tokens: int


def rs_grpo_loss(
    group: GroupRollouts,
    theta: np.ndarray,
    config: PolicyConfig,
    clip_low: float = 0.2,
    clip_high: float = 0.28,
    with_grad: bool = True,
) -> LossResult:
    """Clipped token-level surrogate, normalised by the group's total token count."""
    n_tokens = group.n_tokens
    grad = np.zeros(config.dim)
    if n_tokens == 0:
        return LossResult(0.0, grad, 0.0, 0)
    total = 0.0
    n_clipped = 0
    for rollout, old, a in zip(group.rollouts, group.old_log_probs, group.advantages):
        new = encoded_log_probs(theta, config, rollout.encoded)
        with np.errstate(over="ignore"):
            ratio = np.exp(new - old)
        if not np.all(np.isfinite(ratio)):
            raise FloatingPointError("non-finite importance ratio")
        unclipped = ratio * a
        clipped = np.clip(ratio, 1.0 - clip_low, 1.0 + clip_high) * a
        live = unclipped <= clipped
        total += float(np.where(live, unclipped, clipped).sum())
        n_clipped += int((~live).sum())
        if with_grad:
            grad += encoded_grad(theta, config, rollout.encoded, np.where(live, a * ratio, 0.0))
    return LossResult(-total / n_tokens, -grad / n_tokens, n_clipped / n_tokens, n_tokens)


def batch_loss(
    groups: Sequence[GroupRollouts],
    theta: np.ndarray,
    config: PolicyConfig,
    clip_low: float = 0.2,
    clip_high: float = 0.28,
) -> LossResult:
    """Token-weighted combination of per-group losses (one normaliser for the whole batch)."""
    parts = [rs_grpo_loss(g, theta, config, clip_low, clip_high) for g in groups]
    n = sum(p.n_tokens for p in parts)
    if n == 0:
        return LossResult(0.0, np.zeros(config.dim), 0.0, 0)
    loss = sum(p.loss * p.n_tokens for p in parts) / n
    grad = sum(p.grad * p.n_tokens for p in parts) / n
    clip_fraction = sum(p.clip_fraction * p.n_tokens for p in parts) / n
    return LossResult(loss, grad, clip_fraction, n)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def rollout_rng(seed: int, step: int, slot: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, step, slot])


@dataclass
class TrainResult:
    policy: ToyPolicy
    sft_policy: ToyPolicy
    metrics: list[dict] = field(default_factory=list)
    curriculum: CurriculumReport | None = None
    post_sft_eval: EvalResult | None = None
    final_eval: EvalResult | None = None


def teacher_filter(episodes: Sequence[Episode], max_hops: int) -> list[Episode]:
    """Episodes whose gold trajectory a teacher limited to ``max_hops`` would produce."""
    return [e for e in episodes if e.hops <= max_hops]


def run_sft(
    config: OptimizerConfig,
    episodes: Sequence[Episode],
    vocab: Vocabulary,
    layout: Layout = Layout.EVIDENCE,
) -> ToyPolicy:
    policy = ToyPolicy(PolicyConfig(vocab, layout, config.shared_groups))
    episodes = teacher_filter(episodes, config.sft_max_hops)
    if not episodes:
        return policy
    encoded = [policy.encode(gold_trajectory(e, vocab, layout).tokens, e) for e in episodes]
    for epoch in range(config.sft_epochs):
        order = np.random.default_rng([config.seed, 3, epoch]).permutation(len(encoded))
        nlls = []
        for start in range(0, len(order), config.sft_batch):
            batch = [encoded[i] for i in order[start:start + config.sft_batch]]
            policy, nll = _sft_update(policy, batch, config.sft_lr, None)
            nlls.append(nll)
        log.info("sft epoch %d mean nll %.4f", epoch, float(np.mean(nlls)))
    return policy


def _sample_group(policy: ToyPolicy, episode: Episode, config: "OptimizerConfig", step: int, slot: int) -> GroupRollouts:
    rng = rollout_rng(config.seed, step, slot)
    rollouts = [policy.sample(episode, rng, config.temperature) for _ in range(config.group_size)]
    return make_group(policy, episode, rollouts, config.mode, config.k_pos, config.positional_advantages)


def collect_groups(
    policy: ToyPolicy,
    episodes: Sequence[Episode],
    config: OptimizerConfig,
    step: int,
    executor: Executor | None = None,
) -> list[GroupRollouts]:
    """One group per episode; every slot has its own rng stream, so the result
    is the same whether or not an executor fans the work out."""
    if executor is None:
        return [_sample_group(policy, ep, config, step, slot) for slot, ep in enumerate(episodes)]
    futures = [executor.submit(_sample_group, policy, ep, config, step, slot) for slot, ep in enumerate(episodes)]
    return [f.result() for f in futures]


def rl_step(
    policy: ToyPolicy,
    groups: Sequence[GroupRollouts],
    config: OptimizerConfig,
) -> tuple[ToyPolicy, LossResult]:
    """Parameter update(s) on one batch of groups; old log-probs stay frozen."""
    if config.dynamic_sampling:
        groups = [g for g in groups if not g.all_zero()]
    result = LossResult(0.0, np.zeros(policy.config.dim), 0.0, 0)
    theta = policy.theta
    for _ in range(config.inner_updates):
        result = batch_loss(groups, theta, policy.config, config.clip_low, config.clip_high)
        grad = result.grad + config.weight_decay * theta
        grad = clip_grad_norm(grad, config.max_grad_norm)
        theta = theta - config.lr * grad
    return policy.with_theta(theta), result


def train(
    config: OptimizerConfig,
    sft_set: Sequence[Episode],
    rl_set: Sequence[Episode],
    eval_set: Sequence[Episode],
    vocab: Vocabulary,
    sft_policy: ToyPolicy | None = None,
    on_epoch: Callable[[int, ToyPolicy], None] | None = None,
) -> TrainResult:
    """SFT cold start followed by RL in the configured mode."""
    config.validate()
    mode = config.mode
    for ep in list(sft_set) + list(rl_set) + list(eval_set):
        if any(t >= vocab.size for doc in ep.docs for t in doc):
            raise ValueError(f"episode {ep.id} uses ids outside the vocabulary")
    if sft_policy is None:
        sft_policy = run_sft(config, sft_set, vocab, mode.layout)
    elif sft_policy.layout is not mode.layout or sft_policy.vocab != vocab:
        raise ValueError("SFT policy does not match the mode's layout or the dataset vocabulary")

    executor = ProcessPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        return _train_rl(config, sft_policy, rl_set, eval_set, vocab, on_epoch, executor)
    finally:
        if executor is not None:
            executor.shutdown()


def _train_rl(config, sft_policy, rl_set, eval_set, vocab, on_epoch, executor) -> TrainResult:
    mode = config.mode

    def run_eval(policy: ToyPolicy) -> EvalResult | None:
        if not eval_set:
            return None
        return evaluate(policy, eval_set, vocab, executor, config.workers)

    policy = sft_policy
    post_sft = run_eval(policy)
    metrics = [_row(0, mode, None, None, post_sft)]

    report = None
    episodes = list(rl_set)
    if config.curriculum and episodes:
        episodes, report = curriculum_filter(
            policy, episodes, vocab, config.curriculum_group,
            rng=np.random.default_rng([config.seed, 2]), temperature=1.0,
        )
        log.info("curriculum kept %d of %d episodes", len(episodes), len(rl_set))

    step = 0
    final = post_sft
    for epoch in range(config.epochs):
        for start in range(0, len(episodes), config.rollout_batch):
            batch = episodes[start:start + config.rollout_batch]
            step += 1
            groups = collect_groups(policy, batch, config, step, executor)
            if config.debug_gradcheck and step % 10 == 0:
                _debug_check(policy, groups)
            policy, result = rl_step(policy, groups, config)
            means = mean_scores([s for g in groups for s in g.scores])
            metrics.append(_row(step, mode, means, result, None))
        final = run_eval(policy)
        if final is not None:
            # the epoch's eval lands on its last step row
            metrics[-1]["eval_acc"] = final.accuracy
            metrics[-1]["eval_f1"] = final.f1
        if on_epoch is not None:
            on_epoch(epoch, policy)
        log.info("epoch %d step %d eval_acc %s", epoch, step, None if final is None else round(final.accuracy, 4))
    return TrainResult(policy, sft_policy, metrics, report, post_sft, final)


def _row(step: int, mode: Mode, means: ChannelScores | None, result: LossResult | None, ev: EvalResult | None) -> dict:
    return {
        "step": step,
        "mode": mode.value,
        "mean_perception": None if means is None else means.perception,
        "mean_derivation": None if means is None else means.derivation,
        "mean_format": None if means is None else means.format,
        "loss": None if result is None else result.loss,
        "clip_fraction": None if result is None else result.clip_fraction,
        "eval_acc": None if ev is None else ev.accuracy,
        "eval_f1": None if ev is None else ev.f1,
    }


def _debug_check(policy: ToyPolicy, groups: Sequence[GroupRollouts]) -> None:
    from rsgrpo.gradcheck import check_log_prob_grad

    for g in groups[:2]:
        err = check_log_prob_grad(policy, g.rollouts[0].trajectory, g.episode)
        if err > 1e-4:
            raise FloatingPointError(f"log-prob gradient check failed: relative error {err:.3e}")
