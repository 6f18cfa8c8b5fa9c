"""Classification as an episodic MDP, and the REINFORCE training loop.

An episode presents ``eta`` utterances drawn without replacement. The agent
labels each one; the environment answers +1 for a correct label and -1
otherwise, then moves to the next utterance whatever the action was.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .features import FeatureMatrix
from .metrics import MetricsLog
from .neuralnet import ForwardTrace, sgd_step, softmax
from .policy import (NonFiniteLoss, PolicyNetwork, PretrainConfig, PretrainReport, pretrain,
                     states_to_input)

log = logging.getLogger(__name__)

R_MIN = -1
R_MAX = 1
GREEDY = "greedy"
SAMPLE = "sample"


class EnvError(RuntimeError):
    pass


class DatasetTooSmall(EnvError):
    pass


class EpisodeFinished(EnvError):
    pass


class PolicyMismatch(ValueError):
    pass


def reward(action: int, ground_truth: int) -> int:
    return R_MAX if action == ground_truth else R_MIN


@dataclass
class EnvConfig:
    dataset: list[FeatureMatrix]
    action_count: int
    eta: int = 50
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.eta < 1:
            raise ValueError(f"eta must be >= 1, got {self.eta}")


TERMINAL = None


class ClassificationEnv:
    """Presents ``eta`` dataset items per episode, in a seeded random order.

    The draw for episode ``k`` depends only on ``(shuffle_seed, k)``, so any
    episode can be replayed.
    """

    def __init__(self, config: EnvConfig):
        self.config = config
        self.labels = np.array([m.label_id for m in config.dataset], dtype=int)
        self.episode_index = -1
        self.items: np.ndarray | None = None
        self.cursor = 0
        self.done = True

    @property
    def eta(self) -> int:
        return self.config.eta

    def draw(self, episode_index: int) -> np.ndarray:
        n = len(self.config.dataset)
        if n < self.eta:
            raise DatasetTooSmall(f"dataset has {n} items, episodes need {self.eta}")
        rng = np.random.default_rng([self.config.shuffle_seed, episode_index])
        return rng.choice(n, size=self.eta, replace=False)

    def reset(self, episode_index: int | None = None) -> FeatureMatrix:
        """Start the next episode (or episode ``episode_index``) and return its first state."""
        self.episode_index = self.episode_index + 1 if episode_index is None else episode_index
        self.items = self.draw(self.episode_index)
        self.cursor = 0
        self.done = False
        return self.config.dataset[self.items[0]]

    def states(self) -> list[FeatureMatrix]:
        """All states of the current episode, in presentation order."""
        return [self.config.dataset[i] for i in self.items]

    def execute(self, action: int) -> tuple[FeatureMatrix | None, int, bool]:
        if self.done:
            raise EpisodeFinished("execute called after the episode ended; call reset()")
        if not 0 <= action < self.config.action_count:
            raise ValueError(f"action {action} outside [0, {self.config.action_count})")
        r = reward(action, self.labels[self.items[self.cursor]])
        self.cursor += 1
        self.done = self.cursor == self.eta
        nxt = TERMINAL if self.done else self.config.dataset[self.items[self.cursor]]
        return nxt, r, self.done


@dataclass
class Episode:
    states: list[FeatureMatrix] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    rewards: list[int] = field(default_factory=list)
    # eval-mode forward pass over ``states``, reusable by the update when the
    # policy parameters are unchanged
    trace: ForwardTrace | None = field(default=None, repr=False)

    @property
    def score(self) -> int:
        return int(sum(self.rewards))

    def __len__(self):
        return len(self.actions)


def select_action(probs: np.ndarray, mode: str, rng: np.random.Generator | None) -> int:
    if mode == GREEDY:
        return int(np.argmax(probs))  # first index on ties
    if mode == SAMPLE:
        return int(rng.choice(len(probs), p=probs))
    raise ValueError(f"unknown action mode {mode!r}")


def run_episode(policy: PolicyNetwork, env: ClassificationEnv, mode: str = GREEDY,
                rng: np.random.Generator | None = None,
                episode_index: int | None = None) -> Episode:
    """Reset ``env`` and roll out one episode with dropout disabled.

    The transition does not depend on the action, so the probabilities for
    all ``eta`` states are computed in one batched eval-mode pass before the
    step loop; the per-step results are identical to evaluating each state
    when it is presented.
    """
    if policy.arch.n_classes != env.config.action_count:
        raise PolicyMismatch(f"policy has {policy.arch.n_classes} actions, "
                             f"environment expects {env.config.action_count}")
    if mode == SAMPLE and rng is None:
        raise ValueError("sample mode needs a random generator")
    state = env.reset(episode_index)
    x = states_to_input(policy.arch, env.states())
    logits, trace = policy.net.forward(policy.params, x, train=False, keep_trace=True)
    probs = softmax(logits)
    ep = Episode(trace=trace)
    done = False
    i = 0
    while not done:
        a = select_action(probs[i], mode, rng)
        nxt, r, done = env.execute(a)
        ep.states.append(state)
        ep.actions.append(a)
        ep.rewards.append(r)
        state = nxt
        i += 1
    return ep


def reinforce_loss_grad(logits: np.ndarray, actions, rewards) -> tuple[float, np.ndarray]:
    """``L = -(1/eta) * sum_i r_i log pi(a_i | s_i)`` and ``dL/dlogits``."""
    actions = np.asarray(actions, dtype=int)
    r = np.asarray(rewards, dtype=np.float64)
    eta = len(actions)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(eta)
    loss = -float(np.sum(r * logp[rows, actions])) / eta
    grad = np.exp(logp) * r[:, None]
    grad[rows, actions] -= r
    return loss, grad / eta


def reinforce_update(policy: PolicyNetwork, episode: Episode, learning_rate: float,
                     rng: np.random.Generator) -> tuple[PolicyNetwork, float]:
    """One SGD step on the REINFORCE loss of a finished episode, dropout active.

    Returns the new policy and the loss value before the step.
    """
    if not episode.actions:
        raise ValueError("episode is empty")
    net = policy.net
    trace = episode.trace
    if trace is not None and trace.params is policy.params:
        logits, trace = net.resume(trace, train=True, rng=rng)
    else:
        x = states_to_input(policy.arch, episode.states)
        logits, trace = net.forward(policy.params, x, train=True, rng=rng)
    loss, dlogits = reinforce_loss_grad(logits, episode.actions, episode.rewards)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"REINFORCE loss became {loss}; max |logit| {np.max(np.abs(logits)):.3g}")
    grads, _ = net.backward(trace, dlogits, input_grad=False)
    return policy.replace(sgd_step(policy.params, grads, learning_rate)), loss


@dataclass(frozen=True)
class TrainRunConfig:
    n_episodes: int = 10000
    eta: int = 50
    mode: str = GREEDY
    pretrain: bool = True
    pretrain_config: PretrainConfig = PretrainConfig()
    learning_rate: float = 1e-4
    shuffle_seed: int = 0
    dropout_seed: int = 0
    sampling_seed: int = 0
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.n_episodes < 0 or self.eta < 1:
            raise ValueError("n_episodes must be >= 0 and eta >= 1")
        if self.mode not in (GREEDY, SAMPLE):
            raise ValueError(f"unknown action mode {self.mode!r}")


@dataclass
class ExperimentResult:
    log: MetricsLog
    policy: PolicyNetwork
    pretrain_report: PretrainReport | None = None


def run_experiment(config: TrainRunConfig, policy: PolicyNetwork, rl_data: list[FeatureMatrix],
                   pretrain_data: list[FeatureMatrix] | None = None,
                   eval_data: list[FeatureMatrix] | None = None,
                   metadata: dict | None = None,
                   checkpoint_dir: str | Path | None = None,
                   on_episode: Callable[[int, Episode], None] | None = None) -> ExperimentResult:
    """Optional pre-training, then ``n_episodes`` of rollout and REINFORCE update.

    On an exception the partial log is attached to it as ``exc.partial_result``.
    """
    report = None
    if config.pretrain:
        if not pretrain_data:
            raise ValueError("pre-training requested without pre-training data")
        policy, report = pretrain(policy, pretrain_data, config.pretrain_config, eval_data)
    meta = {"eta": config.eta, "n_episodes": config.n_episodes, "mode": config.mode,
            "pretrain": config.pretrain, "r_min": R_MIN, "r_max": R_MAX, **(metadata or {})}
    mlog = MetricsLog(eta=config.eta, r_min=R_MIN, r_max=R_MAX, metadata=meta)
    env = ClassificationEnv(EnvConfig(rl_data, policy.arch.n_classes, config.eta, config.shuffle_seed))
    dropout_rng = np.random.default_rng(config.dropout_seed)
    sample_rng = np.random.default_rng(config.sampling_seed)
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)
    try:
        for j in range(config.n_episodes):
            ep = run_episode(policy, env, config.mode, sample_rng, episode_index=j)
            policy, _ = reinforce_update(policy, ep, config.learning_rate, dropout_rng)
            mlog.append(ep.score)
            if on_episode is not None:
                on_episode(j, ep)
            if ckpt is not None and config.checkpoint_every and (j + 1) % config.checkpoint_every == 0:
                policy.save(ckpt / f"episode_{j + 1:06d}.poln")
    except Exception as exc:
        exc.partial_result = ExperimentResult(mlog, policy, report)
        raise
    return ExperimentResult(mlog, policy, report)
