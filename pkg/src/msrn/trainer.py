"""SGD with momentum, step learning-rate schedule and the training loop."""

from __future__ import annotations

import json
import logging
import math
from decimal import Decimal
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .metrics import evaluate
from .model import MSRN
from .tensor import NonFiniteError

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 90
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_factor: float = 0.1
    decay_every: int = 30
    seed: int = 0
    eval_every: int = 1  # 0 disables per-epoch evaluation

    def validate(self) -> None:
        for name in ("epochs", "batch_size", "decay_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("lr, momentum and weight_decay must be non-negative")
        if not 0 < self.decay_factor < 1:
            raise ValueError(f"decay_factor must lie in (0, 1), got {self.decay_factor}")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def lr_at_epoch(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    # decimal arithmetic so 0.01 decays to exactly 0.001, 0.0001, ...
    steps = epoch // config.decay_every
    return float(Decimal(repr(config.lr)) * Decimal(repr(config.decay_factor)) ** steps)


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState,
             decay: set[str] | None = None) -> None:
    """In-place heavy-ball update: ``g += wd*p; v = mu*v + g; p -= lr*v``.

    Weight decay applies only to names in ``decay`` (all names when None).
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"sgd_step: gradient {g.shape} vs parameter {name!r} {p.shape}")
        if state.weight_decay and (decay is None or name in decay):
            g = g + state.weight_decay * p
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ValueError(f"sgd_step: velocity {v.shape} vs parameter {name!r} {p.shape}")
        v = state.momentum * v + g
        state.velocity[name] = v
        p -= state.lr * v


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _batch_inputs(inputs, index):
    if isinstance(inputs, list):
        return [f[index] for f in inputs]
    return inputs[index]


def fit(model: MSRN, train: Dataset, config: TrainConfig, eval_set: Dataset | None = None,
        out_dir=None) -> list[dict]:
    """Train in place; returns the per-epoch history.

    With ``out_dir`` the history is streamed to ``history.jsonl`` and the
    parameters of every new best-mAP epoch are written to ``checkpoint/``.
    """
    config.validate()
    if len(train) == 0:
        raise ValueError("fit: empty training set")
    out_dir = None if out_dir is None else Path(out_dir)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "history.jsonl").write_text("")
    target = eval_set if eval_set is not None else train
    decay = {k for k, role in model.roles.items() if role != "bias"}
    state = OptimizerState(config.lr, config.momentum, config.weight_decay)
    params = {k: t.data for k, t in model.params.items()}
    history = []
    best = -math.inf
    for epoch in range(config.epochs):
        state.lr = lr_at_epoch(epoch, config)
        order = epoch_order(len(train), config.seed, epoch)
        sums = np.zeros(3)
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            model.zero_grad()
            try:
                loss, l1, l2 = model.loss(_batch_inputs(train.inputs, idx), train.Y[idx])
            except NonFiniteError as exc:
                raise TrainingError(f"epoch {epoch} batch {b}: {exc}") from exc
            if not np.isfinite(loss.data):
                raise TrainingError(f"epoch {epoch} batch {b}: non-finite loss")
            loss.backward()
            grads = {k: t.grad for k, t in model.params.items() if t.grad is not None}
            sgd_step(params, grads, state, decay)
            sums += len(idx) * np.array([loss.item(), l1.item(), 0.0 if l2 is None else l2.item()])
        record = {
            "epoch": epoch,
            "lr": state.lr,
            "loss": sums[0] / len(train),
            "l1": sums[1] / len(train),
            "l2": sums[2] / len(train),
        }
        final = epoch == config.epochs - 1
        if config.eval_every and ((epoch + 1) % config.eval_every == 0 or final):
            scores = model.predict_proba(target.inputs)
            record["metrics"] = evaluate(scores, target.Y)
        history.append(record)
        log.info("epoch %d lr %.2e loss %.5f", epoch, state.lr, record["loss"])
        if out_dir is not None:
            with open(out_dir / "history.jsonl", "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            m = record.get("metrics", {}).get("mAP")
            if m is not None and m > best:
                best = m
                model.save(out_dir / "checkpoint")
    if out_dir is not None and best == -math.inf:
        model.save(out_dir / "checkpoint")
    return history


def train_config_dict(config: TrainConfig) -> dict:
    return asdict(config)
