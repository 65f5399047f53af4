"""Mini-batch training loop shared by base and incremental training."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .optim import DEFAULT_LR, OptimizerState, plateau_update, sgd_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = DEFAULT_LR
    momentum: float = 0.0
    patience: int = 2
    factor: float = 0.1
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def new_state(self) -> OptimizerState:
        return OptimizerState(lr=self.lr, momentum=self.momentum, factor=self.factor, patience=self.patience)


@dataclass
class TrainResult:
    state: OptimizerState
    rng: np.random.Generator
    history: list = field(default_factory=list)


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list:
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def mu_mse(pred: np.ndarray, targets: np.ndarray) -> float:
    err = np.asarray(pred, dtype=np.float64) - np.asarray(targets, dtype=np.float64)
    return float(np.mean(np.mean(err * err, axis=0)))


def run_epoch(net, state: OptimizerState, n: int, batch_size: int, rng, loss_fn) -> dict:
    """One pass over ``n`` samples. ``loss_fn(idx)`` returns ``(loss, terms)``
    where ``terms`` maps term names to float values for logging."""
    total, count = 0.0, 0
    term_sums: dict = {}
    for idx in epoch_batches(n, batch_size, rng):
        net.zero_grad()
        loss, terms = loss_fn(idx)
        loss.backward()
        sgd_step(net, state)
        total += loss.item() * len(idx)
        count += len(idx)
        for k, v in terms.items():
            term_sums[k] = term_sums.get(k, 0.0) + v * len(idx)
    out = {"train_loss": total / count}
    if term_sums:
        out["loss_terms"] = {k: v / count for k, v in term_sums.items()}
    return out


def train_base(net, train, val, cfg: TrainConfig, state=None, rng=None) -> TrainResult:
    """Minimize smooth-L1 on ``train``; the lr follows the plateau rule on
    validation muMSE."""
    state = state or cfg.new_state()
    rng = rng or np.random.default_rng(cfg.seed)
    result = TrainResult(state, rng)

    def loss_fn(idx):
        loss = T.smooth_l1(net(train.images[idx]).outputs, train.targets[idx])
        return loss, {}

    for epoch in range(1, cfg.epochs + 1):
        lr = state.lr
        rec = run_epoch(net, state, len(train), cfg.batch_size, rng, loss_fn)
        val_metric = mu_mse(net.predict(val.images), val.targets)
        plateau_update(state, val_metric)
        rec = {"epoch": epoch, "lr": lr, **rec, "val_muMSE": val_metric, "next_lr": state.lr}
        result.history.append(rec)
        log.info("epoch %d lr=%.2g loss=%.5f val_muMSE=%.5f", epoch, lr, rec["train_loss"], val_metric)
    return result
