"""Training loop: MSE + Adam, plateau LR reduction, early stopping, best-checkpoint selection."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from nowcast.models import forward_batch
from nowcast.storage import dump_json

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "nowcast-checkpoint/1"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    max_epochs: int = 200
    batch_size: int = 16
    es_patience: int = 12
    lr_patience: int = 8
    lr_factor: float = 0.1
    seed: int = 0
    device: str = "cpu"
    deterministic: bool = True

    def __post_init__(self):
        if self.es_patience <= 0 or self.lr_patience <= 0:
            raise ValueError("patience values must be positive")
        if self.lr_patience >= self.es_patience:
            raise ValueError("lr_patience must be smaller than es_patience")
        if self.batch_size <= 0 or self.max_epochs <= 0 or self.lr <= 0:
            raise ValueError("batch_size, max_epochs and lr must be positive")
        if not 0 < self.lr_factor < 1:
            raise ValueError("lr_factor must be in (0, 1)")

    def to_dict(self):
        return asdict(self)


class ArrayData:
    """In-memory samples: precip (N,12,64,64), target (N,1,64,64), optional station / krige inputs."""

    def __init__(self, inputs, target, stations=None, krige=None, ids=None):
        self.inputs = torch.as_tensor(np.asarray(inputs, dtype=np.float32))
        self.target = torch.as_tensor(np.asarray(target, dtype=np.float32))
        self.stations = None if stations is None else torch.as_tensor(np.asarray(stations, dtype=np.float32))
        self.krige = None if krige is None else torch.as_tensor(np.asarray(krige, dtype=np.float32))
        self.ids = list(ids) if ids is not None else [str(i) for i in range(len(self.inputs))]
        n = len(self.inputs)
        for name in ("target", "stations", "krige"):
            t = getattr(self, name)
            if t is not None and len(t) != n:
                raise ValueError(f"{name} has {len(t)} samples, inputs have {n}")

    def __len__(self):
        return len(self.inputs)

    def batch(self, idx):
        pick = lambda t: None if t is None else t[idx]  # noqa: E731
        return pick(self.inputs), pick(self.stations), pick(self.krige), pick(self.target)

    def subset(self, idx):
        idx = list(idx)
        pick = lambda t: None if t is None else t[idx]  # noqa: E731
        return ArrayData(self.inputs[idx], self.target[idx], pick(self.stations), pick(self.krige),
                         [self.ids[i] for i in idx])


class EarlyStopping:
    """Signals a stop after ``patience`` consecutive epochs without a strictly lower loss."""

    def __init__(self, patience):
        self.patience = patience
        self.best = math.inf
        self.counter = 0

    def step(self, val_loss):
        if val_loss < self.best:
            self.best = val_loss
            self.counter = 0
        else:
            self.counter += 1
        return self.counter >= self.patience

    def state_dict(self):
        return {"best": self.best, "counter": self.counter}

    def load_state_dict(self, d):
        self.best, self.counter = d["best"], d["counter"]


class PlateauScheduler:
    """Multiplies the learning rate by ``factor`` after ``patience`` stagnant epochs.

    The stagnation counter restarts after each reduction and on every
    strict improvement.
    """

    def __init__(self, lr, patience, factor=0.1):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.best = math.inf
        self.counter = 0

    def step(self, val_loss):
        if val_loss < self.best:
            self.best = val_loss
            self.counter = 0
        else:
            self.counter += 1
            if self.counter >= self.patience:
                self.lr *= self.factor
                self.counter = 0
        return self.lr

    def state_dict(self):
        return {"lr": self.lr, "best": self.best, "counter": self.counter}

    def load_state_dict(self, d):
        self.lr, self.best, self.counter = d["lr"], d["best"], d["counter"]


@dataclass
class TrainState:
    epoch: int = 0
    best_val_loss: float = math.inf
    best_epoch: int = 0
    lr: float = 1e-3
    history: list = field(default_factory=list)
    stopped_early: bool = False

    @property
    def epochs_since_improvement(self):
        return self.epoch - self.best_epoch


def reduce_lr_on_plateau(scheduler: PlateauScheduler, val_loss):
    return scheduler.step(val_loss)


def early_stop(stopper: EarlyStopping, val_loss):
    return stopper.step(val_loss)


def set_determinism(seed, deterministic=True):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(deterministic, warn_only=False)


def save_checkpoint(path, payload):
    """Atomic write: temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path):
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise TrainingError(f"{path} is not a nowcast checkpoint")
    return ckpt


def mse_loss(model, data, batch_size):
    model.eval()
    total, n = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(data), batch_size):
            precip, station, krige, target = data.batch(slice(i, i + batch_size))
            pred = forward_batch(model, precip, station, krige)
            total += float(nn.functional.mse_loss(pred, target, reduction="sum"))
            n += target.numel()
    return total / n


def _epoch_order(n, seed, epoch):
    g = torch.Generator().manual_seed(seed * 1_000_003 + epoch)
    return torch.randperm(n, generator=g)


def train(model, train_data: ArrayData, val_data: ArrayData, config: TrainConfig, out_dir=None,
          resume=None, meta=None, log=None):
    """Train ``model`` and return ``(best_checkpoint, TrainState)``.

    The model is left holding the best-validation weights. With ``out_dir``
    the best and last checkpoints plus ``history.json`` are written there;
    ``resume`` is a checkpoint path (usually ``last.pt``) to continue from.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("train and validation splits must be non-empty")
    if not any(p.requires_grad for p in model.parameters()):
        raise ValueError("model has no trainable parameters")
    log = log or logger.info
    meta = dict(meta or {})
    out = Path(out_dir) if out_dir else None

    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    stopper = EarlyStopping(config.es_patience)
    scheduler = PlateauScheduler(config.lr, config.lr_patience, config.lr_factor)
    state = TrainState(lr=config.lr)
    best_ckpt = None

    if resume is not None:
        ckpt = load_checkpoint(resume)
        model.load_state_dict(ckpt["model_state"])
        optimizer.load_state_dict(ckpt["optimizer_state"])
        stopper.load_state_dict(ckpt["trackers"]["early_stopping"])
        scheduler.load_state_dict(ckpt["trackers"]["scheduler"])
        state = TrainState(**ckpt["train_state"])
        state.history = [dict(h) for h in state.history]
        if out is not None and (out / "best.pt").exists():
            best_ckpt = load_checkpoint(out / "best.pt")

    def payload():
        return {
            "format": CHECKPOINT_FORMAT,
            "meta": meta,
            "train_config": config.to_dict(),
            "model_state": {k: v.detach().clone() for k, v in model.state_dict().items()},
            "optimizer_state": optimizer.state_dict(),
            "trackers": {"early_stopping": stopper.state_dict(), "scheduler": scheduler.state_dict()},
            "train_state": asdict(state),
            "epoch": state.epoch,
            "best_val_loss": state.best_val_loss,
        }

    while state.epoch < config.max_epochs and not state.stopped_early:
        epoch = state.epoch + 1
        t0 = time.perf_counter()
        model.train()
        order = _epoch_order(len(train_data), config.seed, epoch)
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, len(train_data), config.batch_size)):
            idx = order[start : start + config.batch_size]
            precip, station, krige, target = train_data.batch(idx)
            pred = forward_batch(model, precip, station, krige)
            loss = nn.functional.mse_loss(pred, target)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {b} (samples {[train_data.ids[i] for i in idx.tolist()]})"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        train_loss = total / seen
        val_loss = mse_loss(model, val_data, config.batch_size)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")

        used_lr = optimizer.param_groups[0]["lr"]
        state.epoch = epoch
        state.history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": used_lr})
        improved = val_loss < state.best_val_loss
        if improved:
            state.best_val_loss = val_loss
            state.best_epoch = epoch
        state.stopped_early = early_stop(stopper, val_loss)
        state.lr = reduce_lr_on_plateau(scheduler, val_loss)
        for group in optimizer.param_groups:
            group["lr"] = state.lr

        log(json.dumps({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": used_lr,
                        "seconds": round(time.perf_counter() - t0, 2)}))
        ckpt = payload()
        if improved:
            best_ckpt = ckpt
            if out is not None:
                save_checkpoint(out / "best.pt", ckpt)
        if out is not None:
            save_checkpoint(out / "last.pt", ckpt)
            dump_json(out / "history.json", {"history": state.history, "best_epoch": state.best_epoch,
                                             "best_val_loss": state.best_val_loss,
                                             "stopped_early": state.stopped_early})

    if best_ckpt is not None:
        model.load_state_dict(best_ckpt["model_state"])
    return best_ckpt, state
