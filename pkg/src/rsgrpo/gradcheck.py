"""Central finite-difference checks of the policy and surrogate-loss gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from rsgrpo import advantages as adv
from rsgrpo.env import DatasetSpec, Episode, generate_episode
from rsgrpo.grammar import Layout, TaggedTrajectory
from rsgrpo.policy import PolicyConfig, ToyPolicy, encoded_grad, encoded_log_probs
from rsgrpo.rewards import ChannelScores
from rsgrpo.trainer import GroupRollouts, rs_grpo_loss

# a deliberately small task so every coordinate of theta can be perturbed
SMALL_SPEC = DatasetSpec(min_docs=1, max_docs=2, vocab_size=19, doc_length=4, episodes=1)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute discrepancy relative to the largest gradient entry."""
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def central_difference(f: Callable[[np.ndarray], float], theta: np.ndarray, h: float = 1e-6) -> np.ndarray:
    grad = np.empty_like(theta)
    probe = theta.copy()
    for i in range(theta.size):
        probe[i] = theta[i] + h
        up = f(probe)
        probe[i] = theta[i] - h
        down = f(probe)
        probe[i] = theta[i]
        grad[i] = (up - down) / (2 * h)
    return grad


def check_log_prob_grad(
    policy: ToyPolicy,
    trajectory: TaggedTrajectory | list[int],
    episode: Episode,
    h: float = 1e-6,
    corrupt: float = 0.0,
) -> float:
    """Relative error of the summed trajectory log-prob gradient.

    ``corrupt`` scales the analytic gradient by ``1 + corrupt`` (a test hook).
    """
    tokens = trajectory.tokens if isinstance(trajectory, TaggedTrajectory) else list(trajectory)
    enc = policy.encode(tokens, episode)
    analytic = encoded_grad(policy.theta, policy.config, enc) * (1.0 + corrupt)
    numeric = central_difference(lambda th: float(encoded_log_probs(th, policy.config, enc).sum()), policy.theta, h)
    return relative_error(analytic, numeric)


def check_loss_grad(
    group: GroupRollouts,
    theta: np.ndarray,
    config: PolicyConfig,
    clip_low: float = 0.2,
    clip_high: float = 0.28,
    h: float = 1e-6,
    grad_fn: Callable | None = None,
) -> tuple[float, float]:
    """(relative error, clipped-token fraction) for the clipped surrogate loss.

    ``grad_fn`` replaces the analytic gradient; tests use it to confirm a wrong
    gradient is caught.
    """
    result = rs_grpo_loss(group, theta, config, clip_low, clip_high)
    analytic = result.grad if grad_fn is None else grad_fn(group, theta, config)
    numeric = central_difference(
        lambda th: rs_grpo_loss(group, th, config, clip_low, clip_high, with_grad=False).loss, theta, h)
    return relative_error(analytic, numeric), result.clip_fraction


@dataclass
class GradcheckCase:
    index: int
    layout: str
    log_prob_error: float
    loss_error: float
    clip_fraction: float


@dataclass
class GradcheckReport:
    cases: list[GradcheckCase] = field(default_factory=list)
    tolerance: float = 1e-4
    dim: int = 0

    @property
    def max_log_prob_error(self) -> float:
        return max((c.log_prob_error for c in self.cases), default=0.0)

    @property
    def max_loss_error(self) -> float:
        return max((c.loss_error for c in self.cases), default=0.0)

    @property
    def clipped_group_fraction(self) -> float:
        return sum(c.clip_fraction > 0 for c in self.cases) / max(len(self.cases), 1)

    @property
    def passed(self) -> bool:
        return (
            bool(self.cases)
            and self.max_log_prob_error < self.tolerance
            and self.max_loss_error < self.tolerance
            and self.clipped_group_fraction >= 0.2
        )

    def summary(self) -> dict:
        return {
            "configs": len(self.cases),
            "parameters": self.dim,
            "max_log_prob_rel_error": self.max_log_prob_error,
            "max_loss_rel_error": self.max_loss_error,
            "clipped_group_fraction": self.clipped_group_fraction,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def random_group(rng: np.random.Generator, config: PolicyConfig, group_size: int, drift: float) -> tuple[GroupRollouts, np.ndarray]:
    """Rollouts from a random old policy, scoped advantages from random channel scores,
    and a current theta displaced from the old one by ``drift``."""
    old = ToyPolicy(config, rng.normal(0.0, 1.0, config.dim))
    episode = generate_episode(SMALL_SPEC, rng)
    rollouts = [old.sample(episode, rng, 1.0) for _ in range(group_size)]
    scores = [ChannelScores(*rng.choice([0.0, 0.5, 1.0], size=3)) for _ in rollouts]
    rows = [adv.aggregate_token_rewards(r.trajectory, s) for r, s in zip(rollouts, scores)]
    advantages = adv.scoped_advantages(rows)
    if all(not np.any(a) for a in advantages):
        advantages = [rng.normal(size=len(r.trajectory)) for r in rollouts]
    theta = old.theta + rng.normal(0.0, drift, config.dim)
    return GroupRollouts(episode, rollouts, scores, advantages), theta


def run_gradcheck(
    n_configs: int = 50,
    seed: int = 0,
    tolerance: float = 1e-4,
    group_size: int = 4,
    h: float = 1e-6,
    corrupt: float = 0.0,
) -> GradcheckReport:
    """Check both gradients on ``n_configs`` random (theta, trajectory, group) draws.

    Odd-numbered cases use a large parameter drift so that clipping is active.
    A non-zero ``corrupt`` deliberately scales both analytic gradients.
    """
    def corrupted(group, theta, config):
        return rs_grpo_loss(group, theta, config).grad * (1.0 + corrupt)

    rng = np.random.default_rng([seed, 5])
    report = GradcheckReport(tolerance=tolerance)
    for i in range(n_configs):
        layout = Layout.EVIDENCE if i % 4 != 3 else Layout.THINK_ANSWER
        config = PolicyConfig(SMALL_SPEC.vocab, layout)
        report.dim = config.dim
        group, theta = random_group(rng, config, group_size, drift=0.5 if i % 2 else 0.02)
        policy = ToyPolicy(config, theta)
        lp_err = check_log_prob_grad(policy, group.rollouts[0].trajectory, group.episode, h, corrupt)
        loss_err, clip = check_loss_grad(group, theta, config, h=h, grad_fn=corrupted if corrupt else None)
        report.cases.append(GradcheckCase(i, layout.value, lp_err, loss_err, clip))
    return report
