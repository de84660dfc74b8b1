"""Adapter training loop, optimizers and evaluation."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import engine
from .adapters import TARGETS
from .data import Dataset
from .engine import Matrix
from .errors import ConfigError, DataError, NumericError, UsageError
from .model import AdapterConfig, ToyTransformer, expected_trainable


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    batch_size: int = 32
    epochs: int = 5
    d: int = 2
    s: int = 2
    k: int = 1
    lambda_orth: float = 0.1
    targets: tuple[str, ...] = TARGETS
    optimizer: str = "adamw"
    seed: int = 0
    adapter: str = "dcft"
    lora_rank: int = 1
    init_std: float = 0.02
    zero_b: bool = False
    dropout: float = 0.0
    weight_decay: float = 0.0
    warmup_steps: int = 0
    max_steps: Optional[int] = None

    def validate(self) -> None:
        if self.adapter == "dcft" and not 1 <= self.s <= self.d:
            raise ConfigError(f"stride must satisfy 1 <= s <= d, got s={self.s}, d={self.d}")
        if not self.targets:
            raise ConfigError("targets must not be empty")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {sorted(OPTIMIZERS)}, got {self.optimizer!r}")
        if self.learning_rate < 0 or self.lambda_orth < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate, lambda_orth and weight_decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be positive when set")
        self.adapter_config().validate()

    def adapter_config(self) -> AdapterConfig:
        return AdapterConfig(
            family=self.adapter,
            targets=tuple(self.targets),
            d=self.d,
            s=self.s,
            k=self.k,
            lora_rank=self.lora_rank,
            init_std=self.init_std,
            zero_b=self.zero_b,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["targets"] = list(self.targets)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown train keys: {sorted(extra)}")
        raw = dict(raw)
        if "targets" in raw:
            raw["targets"] = tuple(raw["targets"])
        return cls(**raw)


# -- optimizers ------------------------------------------------------------


class SGD:
    def __init__(self, params: list[Matrix], lr: float, weight_decay: float = 0.0):
        self.params, self.lr, self.weight_decay = params, lr, weight_decay

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is None:
                continue
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * p.grad
            p.version += 1


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(
        self,
        params: list[Matrix],
        lr: float,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params, self.lr, self.betas, self.eps, self.weight_decay = params, lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad**2
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.version += 1


OPTIMIZERS = {"adamw": AdamW, "sgd": SGD}


# -- loop ------------------------------------------------------------------


@dataclass
class TrainReport:
    epoch_loss: list[float] = field(default_factory=list)
    eval_accuracy: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    epoch_steps: list[int] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)
    orth_initial: float = 0.0
    orth_final: float = 0.0
    trainable_params: int = 0
    steps: int = 0
    config: dict = field(default_factory=dict)

    def epoch_records(self) -> list[dict]:
        """Per-epoch log lines without wall-clock fields (reproducible byte-for-byte)."""
        return [
            {
                "epoch": i + 1,
                "steps": self.epoch_steps[i],
                "train_loss": self.epoch_loss[i],
                "eval_accuracy": self.eval_accuracy[i],
            }
            for i in range(len(self.epoch_loss))
        ]

    def steps_to(self, threshold: float) -> int | None:
        for acc, steps in zip(self.eval_accuracy, self.epoch_steps):
            if acc >= threshold:
                return steps
        return None


def _loss(model: ToyTransformer, batch: Dataset, cfg: TrainConfig, rng) -> Matrix:
    logits = model.forward(batch.sequences, dropout=cfg.dropout, rng=rng)
    loss = engine.cross_entropy(logits, batch.labels)
    if cfg.lambda_orth and cfg.adapter == "dcft":
        loss = engine.add(loss, engine.scale(model.orth_penalty_total(), cfg.lambda_orth))
    return loss


def training_loss(model: ToyTransformer, batch: Dataset, cfg: TrainConfig) -> Matrix:
    """Cross-entropy plus weighted orthogonality penalty, dropout off."""
    return _loss(model, batch, cfg, None)


def _check_data(model: ToyTransformer, ds: Dataset) -> None:
    if len(ds) == 0:
        raise DataError("dataset is empty")
    spec = model.spec
    ds.validate(spec.vocab_size, spec.max_seq_len, spec.num_classes)


def train(
    model: ToyTransformer,
    dataset: Dataset,
    cfg: TrainConfig,
    eval_dataset: Dataset | None = None,
) -> TrainReport:
    """Fit the attached adapters; the backbone stays untouched."""
    cfg.validate()
    if not model.adapters:
        raise UsageError("attach adapters before training")
    _check_data(model, dataset)
    eval_dataset = dataset if eval_dataset is None else eval_dataset
    _check_data(model, eval_dataset)

    params = list(model.adapter_parameters().values())
    opt_cls = OPTIMIZERS[cfg.optimizer]
    opt = opt_cls(params, cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)

    report = TrainReport(config=cfg.to_dict(), trainable_params=model.num_trainable())
    expected = expected_trainable(model.spec, model.adapter_config)
    if report.trainable_params != expected:
        raise UsageError(f"trainable count {report.trainable_params} disagrees with budget {expected}")
    with engine.no_grad():
        report.orth_initial = model.orth_penalty_total().item()

    step = 0
    for _ in range(cfg.epochs):
        start = time.perf_counter()
        losses = []
        for batch in dataset.batches(cfg.batch_size, rng):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            lr = cfg.learning_rate
            if cfg.warmup_steps and step < cfg.warmup_steps:
                lr *= (step + 1) / cfg.warmup_steps
            for p in params:
                p.zero_grad()
            loss = _loss(model, batch, cfg, rng)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at step {step} (lr={lr:g})")
            engine.backward(loss)
            opt.step(lr)
            step += 1
            losses.append(value)
            report.step_loss.append(value)
        if not losses:
            break
        report.epoch_loss.append(float(np.mean(losses)))
        report.eval_accuracy.append(evaluate(model, eval_dataset))
        report.epoch_steps.append(step)
        report.epoch_seconds.append(time.perf_counter() - start)
    report.steps = step
    with engine.no_grad():
        report.orth_final = model.orth_penalty_total().item()
    return report


def evaluate(model: ToyTransformer, dataset: Dataset, batch_size: int = 32) -> float:
    """Argmax accuracy in [0, 1]."""
    _check_data(model, dataset)
    correct = 0
    for batch in dataset.batches(batch_size):
        correct += int(np.sum(model.predict(batch.sequences) == batch.labels))
    return correct / len(dataset)


def pretrain_backbone(
    model: ToyTransformer, dataset: Dataset, steps: int = 200, lr: float = 1e-2, batch_size: int = 32, seed: int = 0
) -> list[float]:
    """Briefly train every backbone weight on ``dataset``, then freeze it again."""
    if model.adapters:
        raise UsageError("pretrain the backbone before attaching adapters")
    _check_data(model, dataset)
    params = list(model.weights.values())
    for p in params:
        p.requires_grad = True
    opt = AdamW(params, lr)
    rng = np.random.default_rng(seed)
    losses: list[float] = []
    try:
        while len(losses) < steps:
            for batch in dataset.batches(batch_size, rng):
                if len(losses) >= steps:
                    break
                for p in params:
                    p.zero_grad()
                loss = engine.cross_entropy(model.forward(batch.sequences), batch.labels)
                engine.backward(loss)
                opt.step()
                losses.append(loss.item())
    finally:
        for p in params:
            p.requires_grad = False
            p.grad = None
    model.backbone_modified = True
    return losses
