"""
Mini-batch SGD over the learnable branch and head of a DuDnnSpec.

The backbone, stem and projections never change. With a BfpConfig the model
runs on BFP-rounded activations and gradients, and the optimizer keeps an
exact master copy of every weight; the model's working copy is the master
re-quantized after each update.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from app.services.bfp import BfpConfig, fake_quantize
from app.services.datasets import Dataset
from app.services.duplex import (
    DuDnnSpec,
    TensorReader,
    classify,
    dudnn_backward,
    dudnn_forward,
    learnable_params,
    softmax_cross_entropy,
)
from app.services.memory import FaultModel, read_with_faults

logger = logging.getLogger(__name__)


class TrainingDivergedError(Exception):
    """The training loss stopped being finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    bfp: Optional[BfpConfig] = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch size >= 1")
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("invalid optimizer hyperparameters")


@dataclass
class TrainResult:
    """Per-epoch trajectories; index 0 is the untrained model."""
    val_accuracy: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    steps_per_epoch: int = 0

    @property
    def steps(self) -> int:
        return self.steps_per_epoch * (len(self.val_accuracy) - 1)

    @property
    def final_accuracy(self) -> float:
        return self.val_accuracy[-1] if self.val_accuracy else 0.0

    def steps_to_reach(self, target: float) -> Optional[int]:
        """Training steps until validation accuracy first reaches target, None if never."""
        for epoch, acc in enumerate(self.val_accuracy):
            if acc >= target:
                return epoch * self.steps_per_epoch
        return None

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(spec: DuDnnSpec, x: np.ndarray, y: np.ndarray, bfp: Optional[BfpConfig] = None,
             batch_size: int = 256) -> float:
    if len(y) == 0:
        return 0.0
    correct = 0
    for start in range(0, len(y), batch_size):
        pred = classify(spec, x[start:start + batch_size], bfp)
        correct += int(np.sum(pred == y[start:start + batch_size]))
    return correct / len(y)


def _quantize_weight(w: np.ndarray, bfp: BfpConfig) -> np.ndarray:
    return fake_quantize(w, axis=1 if w.ndim > 1 else 0, cfg=bfp)


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray, lr: float,
             momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """In place: v = momentum * v + (g + wd * w); w -= lr * v."""
    if grad.shape != param.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameter {param.shape}")
    velocity *= momentum
    velocity += grad + weight_decay * param
    param -= lr * velocity


class SgdOptimizer:
    """Momentum SGD bound to a spec's learnable arrays."""

    def __init__(self, spec: DuDnnSpec, config: TrainConfig):
        self.config = config
        self.params = learnable_params(spec)
        self.master = {name: p.copy() for name, p in self.params.items()}
        self.velocity = {name: np.zeros_like(p) for name, p in self.params.items()}
        if config.bfp is not None:
            self._sync()

    def _sync(self):
        for name, working in self.params.items():
            master = self.master[name]
            working[...] = master if self.config.bfp is None else _quantize_weight(master, self.config.bfp)

    def step(self, grads: dict):
        missing = set(self.params) - set(grads)
        if missing:
            raise KeyError(f"no gradient for {sorted(missing)}")
        for name, master in self.master.items():
            sgd_step(master, grads[name], self.velocity[name], self.config.lr,
                     self.config.momentum, self.config.weight_decay)
        self._sync()


class FaultInjector:
    """
    TensorReader that reads back through unreliable storage.

    lifetimes maps a residency ("transient", "stored") to how long such data
    sits in memory before it is read; data older than the retention time is
    noise unless refreshed.
    """

    def __init__(self, model: FaultModel, lifetimes: Optional[dict] = None,
                 retention_us: float = float("inf"), refreshed: bool = True):
        self.model = model
        self.lifetimes = dict(lifetimes or {})
        self.retention_us = retention_us
        self.refreshed = refreshed
        self.rng = np.random.default_rng(model.seed)
        self.reads = 0

    def __call__(self, tensor: np.ndarray, residency: str) -> np.ndarray:
        self.reads += 1
        return read_with_faults(tensor, self.model, self.lifetimes.get(residency, 0.0),
                                self.retention_us, self.refreshed, self.rng)


def train(spec: DuDnnSpec, dataset: Dataset, config: TrainConfig = TrainConfig(),
          reader: Optional[TensorReader] = None) -> TrainResult:
    """Train spec in place and return the accuracy and loss trajectories."""
    n = len(dataset.y_train)
    steps = n // config.batch_size
    if steps == 0:
        raise ValueError(f"batch size {config.batch_size} exceeds the {n} training samples")
    rng = np.random.default_rng(config.seed)
    optimizer = SgdOptimizer(spec, config)
    bfp = config.bfp

    result = TrainResult(steps_per_epoch=steps)
    result.val_accuracy.append(evaluate(spec, dataset.x_val, dataset.y_val, bfp))
    result.train_accuracy.append(evaluate(spec, dataset.x_train, dataset.y_train, bfp))

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for step in range(steps):
            idx = order[step * config.batch_size:(step + 1) * config.batch_size]
            logits, state = dudnn_forward(spec, dataset.x_train[idx], bfp)
            loss, dlogits = softmax_cross_entropy(logits, dataset.y_train[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss became non-finite at epoch {epoch}, step {step}")
            grads = dudnn_backward(spec, state, dlogits, bfp, reader)
            optimizer.step(grads)
            epoch_loss += loss
        result.losses.append(epoch_loss / steps)
        result.val_accuracy.append(evaluate(spec, dataset.x_val, dataset.y_val, bfp))
        result.train_accuracy.append(evaluate(spec, dataset.x_train, dataset.y_train, bfp))
        logger.info("Epoch %d/%d: loss=%.4f val_acc=%.3f",
                    epoch, config.epochs, result.losses[-1], result.val_accuracy[-1])
    return result
