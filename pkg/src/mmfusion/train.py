"""Training loop: batching, BCE, Adam, plateau schedule, checkpoints.

Determinism contract: every stochastic choice (shuffle order, dropout
masks) is drawn from a stream derived only from the config seed plus the
epoch/step indices, so an interrupted run resumed from a checkpoint
replays the exact byte-for-byte trajectory of the uninterrupted one.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Manifest, iter_batches, load_batch, load_checkpoint, \
    restore_model, save_checkpoint, split
from .engine import BCE_EPS, AdamState, EngineError, PlateauSchedule, RngStream, \
    Tape, Tensor, adam_step, bce_loss, plateau_step
from .model import ModelParams, forward

MODALITIES = ("fused", "radar", "depth")


class TrainError(Exception):
    """Configuration problem or aborted run (non-finite loss)."""


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 100
    batch_size: int = 64
    initial_lr: float = 1e-3
    min_lr: float = 1e-6
    seed: int = 0
    checkpoint_every: int = 0  # epochs between checkpoints; 0 disables
    checkpoint_dir: str | None = None
    val_fraction: float = 0.1
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    plateau_min_delta: float = 1e-4
    early_stop_window: int = 20
    modality: str = "fused"

    def __post_init__(self):
        if self.batch_size < 1:
            raise TrainError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.min_lr > self.initial_lr:
            raise TrainError(
                f"min_lr {self.min_lr} must not exceed initial_lr {self.initial_lr}"
            )
        if self.max_epochs < 1:
            raise TrainError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise TrainError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.modality not in MODALITIES:
            raise TrainError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.checkpoint_every > 0 and self.checkpoint_dir is None:
            raise TrainError("checkpoint_every needs a checkpoint_dir")


@dataclass
class TrainLog:
    step_losses: list = field(default_factory=list)  # (epoch, step, loss)
    epochs: list = field(default_factory=list)
    epoch_train_loss: list = field(default_factory=list)
    epoch_val_loss: list = field(default_factory=list)
    lr_trace: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    stopped_early: bool = False

    def lines(self):
        """Deterministic records; wall-clock stays out (see timing_lines)."""
        for epoch, step, loss in self.step_losses:
            yield f"step epoch={epoch} step={step} loss={loss:.8f}"
        for i, epoch in enumerate(self.epochs):
            yield (f"epoch epoch={epoch} train={self.epoch_train_loss[i]:.8f} "
                   f"val={self.epoch_val_loss[i]:.8f} lr={self.lr_trace[i]:.3e}")

    def timing_lines(self):
        for epoch, seconds in zip(self.epochs, self.epoch_seconds):
            yield f"epoch={epoch} seconds={seconds:.3f}"


def save_log(log: TrainLog, path) -> None:
    with open(path, "w") as fh:
        for line in log.lines():
            fh.write(line + "\n")


def _apply_modality(batch, modality):
    if modality == "radar":
        batch.depth = np.zeros_like(batch.depth)
    elif modality == "depth":
        batch.radar = np.zeros_like(batch.radar)
    return batch


def _ensure_splits(manifest: Manifest, config: TrainConfig) -> Manifest:
    if manifest.splits:
        return manifest
    return split(manifest, (1.0 - config.val_fraction, config.val_fraction, 0.0),
                 seed=config.seed)


def evaluate_epoch(model: ModelParams, manifest: Manifest, root, split_name="val",
                   batch_size=64, modality="fused") -> float:
    """Mean per-sample BCE over a split; dropout off, running stats used."""
    ids = manifest.by_split(split_name)
    if not ids:
        raise TrainError(f"split {split_name!r} is empty")
    total, n = 0.0, 0
    for start in range(0, len(ids), batch_size):
        batch = _apply_modality(load_batch(manifest, root, ids[start : start + batch_size]),
                                modality)
        pred = forward(model, batch.radar, batch.depth, mode="infer")
        p = np.clip(pred.data.astype(np.float64), BCE_EPS, 1.0 - BCE_EPS)
        y = batch.mask.astype(np.float64)
        per_pixel = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
        per_sample = per_pixel.reshape(len(batch.ids), -1).mean(axis=1)
        total += float(per_sample.sum())
        n += len(batch.ids)
    return total / n


def train_step(model: ModelParams, adam: AdamState, batch, drop_rng) -> float:
    """One forward/backward/Adam update; returns the batch loss."""
    with Tape() as tape:
        pred = forward(model, batch.radar, batch.depth, mode="train", rng=drop_rng)
        loss = bce_loss(pred, Tensor(batch.mask))
        tape.backward(loss)
    value = float(loss.data)
    adam_step(model.params, adam)
    model.zero_grads()
    return value


def train(model: ModelParams, manifest: Manifest, root, config: TrainConfig,
          resume=None):
    """Run the full recipe; returns (model, TrainLog).

    ``resume`` names a checkpoint written by this function: model,
    optimizer, schedule, and epoch counter are restored from it and the
    loop continues at the next epoch, reproducing the uninterrupted
    trajectory bitwise.
    """
    manifest = _ensure_splits(manifest, config)
    if not manifest.by_split("train"):
        raise TrainError("train split is empty")
    has_val = bool(manifest.splits.get("val"))

    adam = AdamState(lr=config.initial_lr)
    plateau = PlateauSchedule(lr=config.initial_lr, factor=config.plateau_factor,
                              patience=config.plateau_patience,
                              min_delta=config.plateau_min_delta, min_lr=config.min_lr)
    start_epoch = 1
    since_improve = 0
    best_monitor = float("inf")
    if resume is not None:
        ckpt = load_checkpoint(resume)
        model = restore_model(ckpt, expected_config=model.config)
        if ckpt.adam is None or ckpt.plateau is None:
            raise TrainError(f"{resume}: checkpoint lacks optimizer/schedule state")
        adam, plateau = ckpt.adam, ckpt.plateau
        start_epoch = int(ckpt.meta["epoch"]) + 1
        since_improve = int(ckpt.meta.get("since_improve", 0))
        best_monitor = float(ckpt.meta.get("best_monitor", float("inf")))

    log = TrainLog()
    root_rng = RngStream(config.seed)
    last_epoch = start_epoch - 1
    for epoch in range(start_epoch, config.max_epochs + 1):
        last_epoch = epoch
        t0 = time.monotonic()
        adam.lr = plateau.lr
        epoch_losses = []
        shuffle_rng = root_rng.split(f"shuffle/{epoch}")
        batches = iter_batches(manifest, root, "train", config.batch_size,
                               shuffle_rng=shuffle_rng)
        for step, batch in enumerate(batches):
            batch = _apply_modality(batch, config.modality)
            drop_rng = root_rng.split(f"dropout/{epoch}/{step}")
            try:
                value = train_step(model, adam, batch, drop_rng)
            except EngineError as e:
                raise TrainError(
                    f"non-finite loss at epoch {epoch} step {step}: {e}"
                ) from e
            if not np.isfinite(value):
                raise TrainError(f"non-finite loss at epoch {epoch} step {step}")
            log.step_losses.append((epoch, step, value))
            epoch_losses.append(value)

        train_loss = float(np.mean(epoch_losses))
        if has_val:
            monitor = evaluate_epoch(model, manifest, root, "val",
                                     config.batch_size, config.modality)
        else:
            monitor = train_loss
        plateau_step(plateau, monitor)
        log.epochs.append(epoch)
        log.epoch_train_loss.append(train_loss)
        log.epoch_val_loss.append(monitor)
        log.lr_trace.append(plateau.lr)
        log.epoch_seconds.append(time.monotonic() - t0)

        if monitor < best_monitor - config.plateau_min_delta:
            best_monitor = monitor
            since_improve = 0
        else:
            since_improve += 1

        if config.checkpoint_every > 0 and epoch % config.checkpoint_every == 0:
            os.makedirs(config.checkpoint_dir, exist_ok=True)
            path = os.path.join(config.checkpoint_dir, f"epoch-{epoch:04d}.mmaf")
            save_checkpoint(path, model, adam, plateau,
                            meta={"epoch": epoch, "seed": config.seed,
                                  "since_improve": since_improve,
                                  "best_monitor": best_monitor})
            log.checkpoints.append(path)

        if plateau.lr <= config.min_lr and since_improve >= config.early_stop_window:
            log.stopped_early = True
            break

    if config.checkpoint_dir is not None:
        os.makedirs(config.checkpoint_dir, exist_ok=True)
        path = os.path.join(config.checkpoint_dir, "final.mmaf")
        save_checkpoint(path, model, adam, plateau,
                        meta={"epoch": last_epoch, "seed": config.seed,
                              "since_improve": since_improve,
                              "best_monitor": best_monitor})
        log.checkpoints.append(path)
    return model, log
