"""The convolutional-recurrent policy network and its supervised pre-training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import FeatureMatrix
from .neuralnet import (LSTM, Dense, Dropout, Params, Sequential, ShapeMismatch, TimeConv1D,
                        TimeFlatten, TimeMaxPool, load_checkpoint, log_softmax, save_checkpoint,
                        sgd_step, softmax)

log = logging.getLogger(__name__)

ACTION_LAYER = "action"


class InvalidArch(ValueError):
    pass


class EmptyClass(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    n_classes: int
    n_mfcc: int = 40
    n_frames: int = 32
    conv_filters: tuple[int, ...] = (16, 8)
    kernel_size: int = 3
    pool_size: int = 2
    lstm_units: int = 50
    dropout: float = 0.3
    dense_units: tuple[int, ...] = (512, 256, 64)

    def __post_init__(self):
        counts = (self.n_classes, self.n_mfcc, self.n_frames, self.kernel_size, self.pool_size,
                  self.lstm_units, *self.conv_filters, *self.dense_units)
        if any(int(c) != c or c < 1 for c in counts):
            raise InvalidArch(f"all layer sizes must be positive integers: {self}")
        if self.n_classes < 2:
            raise InvalidArch("need at least two classes")
        if self.n_mfcc // self.pool_size < 1:
            raise InvalidArch("pooling leaves no features")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidArch(f"dropout must be in [0, 1), got {self.dropout}")

    def build(self) -> Sequential:
        shape = (self.n_frames, self.n_mfcc, 1)
        layers = []
        for i, filters in enumerate(self.conv_filters, start=1):
            layers.append(TimeConv1D(f"conv{i}", shape, filters, self.kernel_size))
            shape = layers[-1].out_shape
        layers.append(TimeMaxPool("pool", shape, self.pool_size))
        layers.append(TimeFlatten("flatten", layers[-1].out_shape))
        layers.append(LSTM("lstm", layers[-1].out_shape, self.lstm_units))
        layers.append(Dropout("dropout", layers[-1].out_shape, self.dropout))
        for i, units in enumerate(self.dense_units, start=1):
            layers.append(Dense(f"dense{i}", layers[-1].out_shape, units))
        layers.append(Dense(ACTION_LAYER, layers[-1].out_shape, self.n_classes, relu=False))
        return Sequential(layers)


_NETS: dict[ArchitectureSpec, Sequential] = {}


def network_for(arch: ArchitectureSpec) -> Sequential:
    if arch not in _NETS:
        _NETS[arch] = arch.build()
    return _NETS[arch]


@dataclass(frozen=True)
class PolicyNetwork:
    """Architecture plus an immutable parameter snapshot.

    The action layer (``action.W``, ``action.b``) holds the action-selection
    parameters; every other tensor belongs to the state encoder.
    """

    arch: ArchitectureSpec
    params: Params = field(repr=False)
    seed: int | None = None

    @property
    def net(self) -> Sequential:
        return network_for(self.arch)

    @property
    def action_params(self) -> Params:
        return {k: v for k, v in self.params.items() if k.startswith(ACTION_LAYER + ".")}

    @property
    def encoder_params(self) -> Params:
        return {k: v for k, v in self.params.items() if not k.startswith(ACTION_LAYER + ".")}

    def replace(self, params: Params) -> "PolicyNetwork":
        return PolicyNetwork(self.arch, params, self.seed)

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.net, self.params)

    @classmethod
    def load(cls, path: str | Path, arch: ArchitectureSpec) -> "PolicyNetwork":
        return cls(arch, load_checkpoint(path, network_for(arch)))


def init_policy(arch: ArchitectureSpec, seed: int) -> PolicyNetwork:
    params = network_for(arch).init(np.random.default_rng(seed))
    return PolicyNetwork(arch, params, seed)


def states_to_input(arch: ArchitectureSpec, states) -> np.ndarray:
    """Stack ``(n_mfcc, frames)`` matrices into the network layout ``(B, frames, n_mfcc, 1)``."""
    mats = [s.values if isinstance(s, FeatureMatrix) else np.asarray(s) for s in states]
    expected = (arch.n_mfcc, arch.n_frames)
    for m in mats:
        if m.shape != expected:
            raise ShapeMismatch("state", expected, m.shape)
    if not mats:
        return np.zeros((0, arch.n_frames, arch.n_mfcc, 1))
    return np.stack(mats).astype(np.float64).transpose(0, 2, 1)[..., None]


def logits_batch(policy: PolicyNetwork, states, train: bool = False,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    x = states_to_input(policy.arch, states)
    out, _ = policy.net.forward(policy.params, x, train=train, rng=rng)
    return out


def action_probs(policy: PolicyNetwork, state, mode: str = "eval",
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Probability vector over the ``n_classes`` actions for one state."""
    if mode not in ("eval", "train"):
        raise ValueError(f"mode must be 'eval' or 'train', got {mode!r}")
    return softmax(logits_batch(policy, [state], mode == "train", rng))[0]


def action_probs_batch(policy: PolicyNetwork, states, mode: str = "eval",
                       rng: np.random.Generator | None = None) -> np.ndarray:
    return softmax(logits_batch(policy, states, mode == "train", rng))


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0


@dataclass
class PretrainReport:
    losses: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    epochs_run: int = 0
    eval_accuracy: float | None = None
    # eval-mode loss and accuracy on the training set before the first step
    initial_loss: float | None = None
    initial_accuracy: float | None = None

    def rows(self):
        rows = [(0, self.initial_loss, self.initial_accuracy)] if self.initial_loss is not None else []
        return rows + [(i + 1, loss, acc) for i, (loss, acc) in enumerate(zip(self.losses, self.train_accuracy))]

    def write_csv(self, path: str | Path) -> None:
        lines = ["epoch,loss,train_acc"]
        lines += [f"{e},{loss!r},{acc!r}" for e, loss, acc in self.rows()]
        Path(path).write_text("\n".join(lines) + "\n")


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean ``-log p[label]`` over the batch and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    lp = log_softmax(logits)
    b = len(labels)
    loss = -lp[np.arange(b), labels].mean()
    grad = np.exp(lp)
    grad[np.arange(b), labels] -= 1.0
    return float(loss), grad / b


def dataset_loss(policy: PolicyNetwork, x: np.ndarray, labels: np.ndarray,
                 batch_size: int = 256) -> tuple[float, float]:
    """Eval-mode mean cross-entropy and accuracy over prepared inputs."""
    total, hits = 0.0, 0
    for i in range(0, len(labels), batch_size):
        logits, _ = policy.net.forward(policy.params, x[i:i + batch_size])
        loss, _ = cross_entropy(logits, labels[i:i + batch_size])
        total += loss * len(logits)
        hits += int(np.sum(np.argmax(logits, axis=1) == labels[i:i + batch_size]))
    return total / len(labels), hits / len(labels)


def accuracy_on(policy: PolicyNetwork, data: list[FeatureMatrix], batch_size: int = 256) -> float:
    if not data:
        return float("nan")
    hits = 0
    for i in range(0, len(data), batch_size):
        chunk = data[i:i + batch_size]
        pred = np.argmax(logits_batch(policy, chunk), axis=1)
        hits += int(np.sum(pred == np.array([m.label_id for m in chunk])))
    return hits / len(data)


def pretrain(policy: PolicyNetwork, data: list[FeatureMatrix], config: PretrainConfig = PretrainConfig(),
             eval_data: list[FeatureMatrix] | None = None) -> tuple[PolicyNetwork, PretrainReport]:
    """Supervised cross-entropy training with plain SGD; returns a new policy.

    Each epoch visits the examples in a permutation drawn from ``config.seed``.
    The recorded loss and accuracy per epoch are those of the training
    mini-batches, measured with dropout active.
    """
    n_classes = policy.arch.n_classes
    labels = np.array([m.label_id for m in data], dtype=int)
    missing = sorted(set(range(n_classes)) - set(labels.tolist()))
    if missing:
        raise EmptyClass(f"no pre-training examples for classes {missing}")
    x_all = states_to_input(policy.arch, data)
    rng = np.random.default_rng(config.seed)
    net = policy.net
    params = policy.params
    report = PretrainReport()
    report.initial_loss, report.initial_accuracy = dataset_loss(policy, x_all, labels)
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        total, hits = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            logits, trace = net.forward(params, x_all[idx], train=True, rng=rng)
            loss, dlogits = cross_entropy(logits, labels[idx])
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"loss became {loss} at epoch {epoch + 1}, batch starting {start}; "
                                    f"max |logit| {np.max(np.abs(logits)):.3g}")
            grads, _ = net.backward(trace, dlogits, input_grad=False)
            params = sgd_step(params, grads, config.lr)
            total += loss * len(idx)
            hits += int(np.sum(np.argmax(logits, axis=1) == labels[idx]))
        report.losses.append(total / len(data))
        report.train_accuracy.append(hits / len(data))
        report.epochs_run += 1
        log.info("pretrain epoch %d: loss %.4f acc %.3f", epoch + 1, report.losses[-1],
                 report.train_accuracy[-1])
    trained = policy.replace(params)
    if eval_data:
        report.eval_accuracy = accuracy_on(trained, eval_data)
    return trained, report
