"""Quantization-aware training with one-shot ILMPQ assignment."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .assignment import (POWER_ITERS, POWER_TOL, FilterSensitivity, RowAssignment,
                         SchemeRatio, assign_model, rank_filters)
from .data import Dataset, augment_images
from .errors import ConfigError, DomainError, TrainingDivergedError
from .model import Model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    lr_milestones: tuple[float, ...] = (0.5, 0.75)
    lr_gamma: float = 0.1
    weight_decay: float = 0.0
    seed: int = 0
    act_bits: int = 4
    act_clip: float = 6.0
    augment: bool = False
    calib_size: int = 256
    hessian_iters: int = POWER_ITERS
    hessian_tol: float = POWER_TOL
    bypass_quant: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.act_clip > 0:
            raise ConfigError("act_clip must be > 0")
        if self.act_bits not in (4, 8):
            raise ConfigError("act_bits must be 4 or 8")
        object.__setattr__(self, "lr_milestones", tuple(self.lr_milestones))

    def lr_at(self, epoch: int) -> float:
        """Step schedule: multiply by ``lr_gamma`` at each milestone fraction of the run."""
        passed = sum(epoch >= math.ceil(m * self.epochs) for m in self.lr_milestones)
        return self.lr * self.lr_gamma ** passed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d


@dataclass
class TrainResult:
    model: Model
    assignments: dict[int, RowAssignment]
    sensitivities: list[FilterSensitivity] = field(default_factory=list)
    history: list[float] = field(default_factory=list)


def calibration_batch(dataset: Dataset, size: int, seed: int) -> Dataset:
    rng = np.random.default_rng([seed, 1])
    idx = rng.permutation(len(dataset))[:size]
    return dataset.subset(np.sort(idx))


def assign(model: Model, dataset: Dataset, ratio: SchemeRatio, config: TrainConfig):
    """Rank filters on a calibration batch and attach the resulting assignments to ``model``."""
    calib = calibration_batch(dataset, config.calib_size, config.seed)
    sens = rank_filters(model, calib.x, calib.y, iters=config.hessian_iters,
                        tol=config.hessian_tol, seed=config.seed, workers=config.workers)
    assignments = assign_model(sens, ratio)
    model.set_assignments(assignments)
    return assignments, sens


def qat_train(model: Model, dataset: Dataset, ratio: SchemeRatio, config: TrainConfig) -> TrainResult:
    """Assign rows once, then train latent float weights with SGD through STE quantizers.

    With ``config.bypass_quant`` no assignment is made and the loop runs in
    float mode, which is plain float training.
    """
    if len(dataset) == 0:
        raise DomainError("training set is empty")
    m = model.copy()
    m.act_bits, m.act_clip = config.act_bits, config.act_clip
    if config.bypass_quant:
        mode, assignments, sens = "float", {}, []
        for li in m.weight_layer_indices():
            m.layers[li].assignment = None
    else:
        mode = "qat"
        assignments, sens = assign(m, dataset, ratio, config)

    rng = np.random.default_rng(config.seed)
    velocity = {li: (np.zeros_like(m.layers[li].weight), np.zeros_like(m.layers[li].bias))
                for li in m.weight_layer_indices()}
    images = dataset.x.ndim == 4
    history = []
    n = len(dataset)
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            xb = dataset.x[idx]
            if config.augment and images:
                xb = augment_images(xb, rng)
            loss, grads = m.loss_and_grads(xb, dataset.y[idx], mode)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            for li, (gw, gb) in grads.items():
                layer = m.layers[li]
                vw, vb = velocity[li]
                if config.weight_decay:
                    gw = gw + config.weight_decay * layer.weight
                vw *= config.momentum
                vw += gw
                vb *= config.momentum
                vb += gb
                layer.weight -= lr * vw
                layer.bias -= lr * vb
            total += loss * len(idx)
        history.append(total / n)
        log.info("epoch %d lr %.4g loss %.5f", epoch, lr, history[-1])
    return TrainResult(m, assignments, sens, history)


def predict(model: Model, x, mode: str = "float", batch_size: int = 1024) -> np.ndarray:
    chunks = [model.predict(x[i:i + batch_size], mode) for i in range(0, len(x), batch_size)]
    return np.concatenate(chunks)


def topk_correct(logits: np.ndarray, y: np.ndarray, k: int = 1) -> np.ndarray:
    """Per-sample hit mask; equal logits rank the lower class index first."""
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return (order == np.asarray(y)[:, None]).any(axis=1)


def evaluate(model: Model, dataset: Dataset, mode: str = "float", top_k: int = 1) -> float:
    """Top-``k`` accuracy as a fraction in [0, 1]."""
    if len(dataset) == 0:
        raise DomainError("evaluation set is empty")
    logits = predict(model, dataset.x, mode)
    return float(topk_correct(logits, dataset.y, top_k).mean())
