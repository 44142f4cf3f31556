"""Episodic training loop for the ViT prototypical network."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import protonet
from .data import AugmentConfig, Dataset, preprocess_batch
from .evaluator import evaluate
from .optim import OptimState, clip_gradients, optimizer_step
from .sampler import EpisodeError, EpisodeSpec, build_class_index, sample_episode, substream
from .tensor import NonFiniteInputError, backward
from .vit import ViTModel

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


class TooManySkippedEpisodes(RuntimeError):
    pass


@dataclass
class TrainConfig:
    episodes: int = 1000
    spec: EpisodeSpec = field(default_factory=EpisodeSpec)
    eval_freq: int = 10
    val_episodes: int = 50
    clip_max_norm: float = 1.0
    seed: int = 42
    lr: float = 1e-4
    weight_decay: float = 1e-4
    decoupled: bool = True
    distance: str = "squared"
    # episodes whose gradients are averaged per optimizer step
    meta_batch: int = 1
    max_skip_fraction: float = 0.05
    augment: Optional[AugmentConfig] = None

    def __post_init__(self):
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")
        if self.eval_freq < 1 or self.val_episodes < 1 or self.meta_batch < 1:
            raise ValueError("eval_freq, val_episodes and meta_batch must be positive")
        if self.clip_max_norm <= 0 or self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("clip_max_norm and lr must be positive, weight_decay >= 0")
        if self.distance not in protonet.DISTANCE_MODES:
            raise ValueError(f"distance must be one of {protonet.DISTANCE_MODES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer_mode"] = "decoupled" if self.decoupled else "coupled"
        return d


@dataclass
class TrainResult:
    model: ViTModel
    history: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    optim: Optional[OptimState] = None


def run_episode(model: ViTModel, dataset: Dataset, index: dict, cfg: TrainConfig, episode: int,
                augment: AugmentConfig):
    """Forward one training episode; returns ``(loss, train_acc, batch, logits)``."""
    batch = sample_episode(index, cfg.spec, substream(cfg.seed, "train", episode))
    idx = batch.support_indices + batch.query_indices
    images = preprocess_batch([dataset.images[i] for i in idx], augment, training=True,
                              rng=substream(cfg.seed, "augment", episode), dtype=model.dtype)
    feats = model.forward_features(images, training=True, rng=substream(cfg.seed, "dropout", episode))
    n_support = len(batch.support_indices)
    protos = protonet.compute_prototypes(feats[:n_support], batch.support_labels)
    logit = protonet.logits(feats[n_support:], protos, cfg.distance)
    local = protonet.remap_labels(batch.query_labels, protos.labels)
    loss = protonet.episodic_loss(logit, local)
    acc = protonet.accuracy(protonet.predict(logit), local)
    return loss, acc, batch, logit


def train(model: ViTModel, train_dataset: Dataset, val_dataset: Optional[Dataset], cfg: TrainConfig,
          callback: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Run ``cfg.episodes`` episodes of sample, embed, prototype, loss, clip, step.

    Every ``eval_freq`` episodes the model is scored on ``val_dataset`` (eval mode,
    its own rng stream). Episodes that cannot be sampled are logged and skipped;
    more than ``max_skip_fraction`` of them aborts the run.
    """
    augment = cfg.augment or AugmentConfig(target_size=model.config.image_size)
    index = build_class_index(train_dataset.labels)
    params = model.params
    named = list(params.named_parameters())
    tensors = [t for _, t in named]
    names = [n for n, _ in named]
    state = OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay, decoupled=cfg.decoupled)
    result = TrainResult(model=model, optim=state)
    params.zero_grad()
    pending = 0

    for episode in range(1, cfg.episodes + 1):
        try:
            loss, acc, batch, logit = run_episode(model, train_dataset, index, cfg, episode, augment)
        except EpisodeError as exc:
            log.warning("episode %d skipped: %s", episode, exc)
            result.skipped.append(episode)
            if len(result.skipped) > cfg.max_skip_fraction * cfg.episodes:
                raise TooManySkippedEpisodes(
                    f"{len(result.skipped)} of {cfg.episodes} episodes skipped; last error: {exc}") from exc
            continue
        except NonFiniteInputError as exc:
            raise NonFiniteLossError(f"Loss is NaN or Inf at episode {episode}: {exc}") from exc
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteLossError(
                f"Loss is NaN or Inf at episode {episode}: loss={value}, classes={batch.episode_classes}, "
                f"logits range=[{np.nanmin(logit.data):.4g}, {np.nanmax(logit.data):.4g}]")
        if cfg.meta_batch > 1:
            loss = loss * (1.0 / cfg.meta_batch)
        backward(loss)
        pending += 1
        if pending == cfg.meta_batch or episode == cfg.episodes:
            clip_gradients(tensors, cfg.clip_max_norm)
            optimizer_step(tensors, state, names=names)
            params.zero_grad()
            pending = 0

        record = {"episode": episode, "loss": value, "train_acc": acc, "val_acc": None}
        if val_dataset is not None and episode % cfg.eval_freq == 0:
            report = evaluate(model, val_dataset, cfg.spec, cfg.val_episodes, seed=cfg.seed,
                              augment=augment, stream="val", distance=cfg.distance)
            record["val_acc"] = report.mean_acc
            log.info("[validation] episode %d accuracy %.2f%%", episode, report.mean_acc * 100)
        if episode % 50 == 1:
            log.info("episode %d/%d loss %.6f accuracy %.2f%%", episode, cfg.episodes, value, acc * 100)
        result.history.append(record)
        if callback is not None:
            callback(record)
    if pending:
        params.zero_grad()
    return result


def write_history(path, history: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "loss", "train_acc", "val_acc"])
        for rec in history:
            val = "" if rec["val_acc"] is None else repr(rec["val_acc"])
            writer.writerow([rec["episode"], repr(rec["loss"]), repr(rec["train_acc"]), val])


def write_run_dir(run_dir, result: TrainResult, metadata: dict) -> Path:
    """Write ``checkpoint.pvt``, ``history.csv`` and ``run.json`` into ``run_dir``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    result.model.save(run_dir / "checkpoint.pvt")
    write_history(run_dir / "history.csv", result.history)
    meta = dict(metadata)
    meta["skipped_episodes"] = list(result.skipped)
    meta["completed_episodes"] = len(result.history)
    (run_dir / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return run_dir
