"""Deterministic Adam training and argmax accuracy."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import ANSWER_POS, Dataset
from .model import loss

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    epochs: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    early_stop_accuracy: float | None = 0.99
    preset: str = "scratch"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


PRESETS = {
    "scratch": TrainConfig(),
    # Finetuning settings: batch 2, lr 0.01 with Adam, a single epoch.
    "finetune": TrainConfig(
        batch_size=2, learning_rate=0.01, epochs=1, early_stop_accuracy=None, preset="finetune"
    ),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


@dataclass
class TrainResult:
    model: torch.nn.Module
    losses: list[float] = field(default_factory=list)
    train_accuracy: float = float("nan")
    epochs_run: int = 0

    def write_trace(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss"])
            for i, v in enumerate(self.losses):
                w.writerow([i, repr(v)])


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, foreach=False
    )


def predict(model, tokens) -> np.ndarray:
    """Argmax token at the answer position; ties go to the lowest id."""
    with torch.no_grad():
        logits = model(tokens)
    if logits.dim() == 2:
        logits = logits[None]
    return np.argmax(logits[:, ANSWER_POS].numpy(), axis=-1)


def accuracy(model, dataset: Dataset) -> float:
    """Fraction of exact next-token hits over the full vocabulary."""
    if len(dataset) == 0:
        return 0.0
    return float(np.mean(predict(model, dataset.tokens()) == dataset.targets()))


def train(model: torch.nn.Module, train_set: Dataset, cfg: TrainConfig) -> TrainResult:
    """Train a copy of ``model``; the batch loss is the mean over its examples."""
    if len(train_set) == 0:
        raise ValueError("empty training set")
    vocab = getattr(model, "config").vocab_size
    if vocab != len(train_set.vocab):
        raise ValueError(f"model vocab {vocab} != dataset vocab {len(train_set.vocab)}")
    model = copy.deepcopy(model)
    model.train()
    opt = make_optimizer(model.parameters(), cfg)
    tokens = torch.as_tensor(train_set.tokens())
    targets = torch.as_tensor(train_set.targets())
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(model=model)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.as_tensor(order[start : start + cfg.batch_size])
            opt.zero_grad()
            batch_loss = loss(model(tokens[idx]), targets[idx]) / len(idx)
            value = float(batch_loss.detach())
            if not math.isfinite(value):
                raise DivergenceError(f"loss is {value} at step {step}")
            batch_loss.backward()
            opt.step()
            result.losses.append(value)
            step += 1
        result.epochs_run = epoch + 1
        if cfg.early_stop_accuracy is not None:
            result.train_accuracy = accuracy(model, train_set)
            log.debug("epoch %d loss %.4f train acc %.4f", epoch, value, result.train_accuracy)
            if result.train_accuracy >= cfg.early_stop_accuracy:
                break
    if cfg.early_stop_accuracy is None:
        result.train_accuracy = accuracy(model, train_set)
    model.eval()
    return result
