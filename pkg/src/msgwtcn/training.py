"""RMSprop training loop with early stopping and metric logging."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Normalizer, PreparedData, SampleSet
from .errors import ConfigError, EmptyDataset, NonFinite
from .model import Model, save_checkpoint
from .seeding import derive_rng

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "train_loss", "val_mae", "val_rmse_norm", "val_rmse_denorm", "seconds")


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    rmsprop_alpha: float = 0.99
    rmsprop_eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 100
    early_stop_patience: int = 10
    seed: int = 0
    gradient_clip_norm: float | None = None
    # wall-clock seconds go into the history CSV only when enabled, so that
    # reruns produce byte-identical artifacts by default
    log_wall_clock: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.early_stop_patience < 1:
            raise ConfigError(f"early_stop_patience must be >= 1, got {self.early_stop_patience}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if not 0.0 <= self.rmsprop_alpha < 1.0:
            raise ConfigError(f"rmsprop_alpha must be in [0, 1), got {self.rmsprop_alpha}")
        if not self.rmsprop_eps > 0:
            raise ConfigError(f"rmsprop_eps must be > 0, got {self.rmsprop_eps}")
        if self.gradient_clip_norm is not None and not self.gradient_clip_norm > 0:
            raise ConfigError(f"gradient_clip_norm must be > 0 or null, got {self.gradient_clip_norm}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float  # NaN for epoch 0, the untrained model
    val_mae: float
    val_rmse_norm: float
    val_rmse_denorm: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    config: dict = field(default_factory=dict)

    @property
    def best_val_mae(self) -> float:
        return self.records[self.best_epoch].val_mae

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def write_csv(self, path: str | Path, wall_clock: bool = False) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for r in self.records:
                w.writerow(_history_row(r, wall_clock))


def _history_row(r: EpochRecord, wall_clock: bool) -> list:
    return [
        r.epoch, f"{r.train_loss:.17g}", f"{r.val_mae:.17g}", f"{r.val_rmse_norm:.17g}",
        f"{r.val_rmse_denorm:.17g}", f"{r.seconds if wall_clock else 0.0:.6f}",
    ]


# optimizer


def rmsprop_step(params: dict, grads: dict, state: dict, cfg: TrainConfig):
    """One RMSprop update, in place on ``params`` and ``state`` (name -> array).

    ``v <- a v + (1 - a) g^2``, ``theta <- theta - lr g / (sqrt(v) + eps)``.
    Nothing is modified if any gradient is non-finite.
    """
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.isfinite(g).all():
            raise NonFinite(f"non-finite gradient for parameter {name}; step aborted")
    a, lr, eps = cfg.rmsprop_alpha, cfg.learning_rate, cfg.rmsprop_eps
    for name, g in grads.items():
        v = state.get(name)
        if v is None:
            v = state[name] = np.zeros_like(g)
        v *= a
        v += (1.0 - a) * g * g
        params[name] -= lr * g / (np.sqrt(v) + eps)
    return params, state


def _clip(grads: dict, max_norm: float | None) -> None:
    if max_norm is None:
        return
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale


# metrics


def evaluate(model: Model, split: SampleSet, normalizer: Normalizer, batch_size: int = 256) -> dict:
    """MAE in original units plus RMSE on both the normalized and original scale."""
    if len(split) == 0:
        raise EmptyDataset(f"split {split.split!r} has no samples")
    pred = model.predict(split.inputs, batch_size)[..., 0]
    obs = split.observed[..., 0]
    pred_denorm = normalizer.invert(pred)
    err = pred_denorm - obs
    err_norm = pred - normalizer.apply(obs)
    return {
        "mae": float(np.mean(np.abs(err))),
        "rmse_norm": float(np.sqrt(np.mean(err_norm ** 2))),
        "rmse_denorm": float(np.sqrt(np.mean(err ** 2))),
    }


# loop


def train(
    model: Model,
    data: PreparedData,
    cfg: TrainConfig,
    history_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
) -> TrainHistory:
    """Fit ``model`` on ``data.train``; early-stop on validation MAE.

    Epoch 0 records the untrained model. On exit the parameters of the best
    epoch are restored (and written to ``checkpoint_path`` if given).
    """
    if len(data.train) == 0 or len(data.val) == 0:
        raise EmptyDataset("training and validation splits must be non-empty")
    shuffle_rng = derive_rng(cfg.seed, "train", "shuffle")
    dropout_rng = derive_rng(cfg.seed, "train", "dropout")
    named = model.named_parameters()
    params = {name: p.data for name, p in named}
    state: dict[str, np.ndarray] = {}
    hist = TrainHistory(config=cfg.to_dict())
    if history_path is not None:
        TrainHistory().write_csv(history_path)  # header only; rows are appended per epoch

    def record(epoch: int, loss: float, seconds: float):
        m = evaluate(model, data.val, data.normalizer)
        rec = EpochRecord(epoch, loss, m["mae"], m["rmse_norm"], m["rmse_denorm"], seconds)
        hist.records.append(rec)
        log.info("epoch %d loss %.6g val_mae %.4f", epoch, loss, m["mae"])
        if history_path is not None:
            with open(history_path, "a", newline="", encoding="utf-8") as fh:
                csv.writer(fh, lineterminator="\n").writerow(_history_row(rec, cfg.log_wall_clock))

    record(0, float("nan"), 0.0)
    best_state, best_mae, stale = model.state(), hist.records[0].val_mae, 0
    x_all, y_all = data.train.inputs, data.train.targets
    n = len(data.train)
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = np.sort(order[start:start + cfg.batch_size])
            try:
                with ad.Tape() as tape:
                    out = model.forward(x_all[idx], training=True, rng=dropout_rng)
                    loss = ad.mse_loss(out, y_all[idx])
                ad.backward(loss, tape)
                # the final layer's residual map feeds nothing and gets no gradient
                grads = {name: p.grad if p.grad is not None else np.zeros_like(p.data) for name, p in named}
                _clip(grads, cfg.gradient_clip_norm)
                rmsprop_step(params, grads, state, cfg)
            except NonFinite as e:
                raise NonFinite(f"epoch {epoch}, batch {b}: {e}") from None
            finally:
                for _, p in named:
                    p.grad = None
            total += loss.item() * len(idx)
            count += len(idx)
        record(epoch, total / count, time.perf_counter() - t0)
        mae = hist.records[-1].val_mae
        if mae < best_mae:
            best_mae, best_state, stale = mae, model.state(), 0
            hist.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                log.info("early stop at epoch %d (best %d)", epoch, hist.best_epoch)
                break
    model.load_state(best_state)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, extra={
            "normalizer": data.normalizer.to_dict(),
            "best_epoch": hist.best_epoch,
            "best_val_mae": best_mae,
            "train_config": cfg.to_dict(),
        })
    return hist
