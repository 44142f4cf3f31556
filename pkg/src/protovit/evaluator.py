"""Episodic evaluation with per-episode accuracy and a 95% confidence interval."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import protonet
from .data import AugmentConfig, Dataset, preprocess_batch
from .sampler import EpisodeError, EpisodeSpec, build_class_index, sample_episode, substream
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

Z95 = 1.96


class NoEpisodesEvaluated(RuntimeError):
    pass


@dataclass
class EvalReport:
    per_episode_acc: list
    mean_acc: float
    std_dev: float
    ci95_halfwidth: float
    episodes_attempted: int
    episodes_completed: int
    config: dict = field(default_factory=dict)

    def text(self) -> str:
        return (f"Average Accuracy: {self.mean_acc * 100:.2f}%\n"
                f"95% CI: ±{self.ci95_halfwidth * 100:.2f}%")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def summarize(accuracies: Sequence[float]) -> tuple[float, float, float]:
    """Mean, sample standard deviation (divisor E-1) and 1.96 * std / sqrt(E)."""
    acc = [float(a) for a in accuracies]
    e = len(acc)
    if e == 0:
        raise NoEpisodesEvaluated("no episodes evaluated")
    # correctly rounded sums keep identical accuracies at exactly zero spread
    mean = math.fsum(acc) / e
    std = math.sqrt(math.fsum((a - mean) ** 2 for a in acc) / (e - 1)) if e > 1 else 0.0
    return mean, std, Z95 * std / math.sqrt(e)


def make_report(accuracies: Sequence[float], attempted: Optional[int] = None, config: Optional[dict] = None) -> EvalReport:
    mean, std, ci = summarize(accuracies)
    accs = [float(a) for a in accuracies]
    return EvalReport(accs, mean, std, ci, attempted if attempted is not None else len(accs),
                      len(accs), dict(config or {}))


def episode_accuracy(model, dataset: Dataset, index: dict, spec: EpisodeSpec, rng: np.random.Generator,
                     augment: AugmentConfig) -> float:
    """Accuracy of one eval-mode episode."""
    batch = sample_episode(index, spec, rng)
    idx = batch.support_indices + batch.query_indices
    images = preprocess_batch([dataset.images[i] for i in idx], augment, training=False, dtype=model.dtype)
    with no_grad():
        feats = model.forward_features(images, training=False)
    n_support = len(batch.support_indices)
    protos = protonet.compute_prototypes(feats[:n_support], batch.support_labels)
    logit = protonet.logits(feats[n_support:], protos, "squared")
    local = protonet.remap_labels(batch.query_labels, protos.labels)
    return protonet.accuracy(protonet.predict(logit), local)


def evaluate(model, dataset: Dataset, spec: EpisodeSpec = EpisodeSpec(), episodes: int = 100,
             seed: int = 42, augment: Optional[AugmentConfig] = None, workers: int = 1,
             stream: str = "eval", distance: str = "squared") -> EvalReport:
    """Run ``episodes`` eval-mode episodes; failed episodes are skipped and counted.

    Episode ``n`` always draws from the substream ``(seed, stream, n)``, so the
    result does not depend on ``workers`` or evaluation order.
    """
    if augment is None:
        augment = AugmentConfig(target_size=model.config.image_size)
    index = build_class_index(dataset.labels)

    def run(n: int):
        try:
            return episode_accuracy(model, dataset, index, spec, substream(seed, stream, n), augment)
        except EpisodeError as exc:
            log.warning("eval episode %d skipped: %s", n, exc)
            return None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(episodes)))
    else:
        results = [run(n) for n in range(episodes)]
    accs = [a for a in results if a is not None]
    if not accs:
        raise NoEpisodesEvaluated("no episodes evaluated")
    cfg = {"ways": spec.ways, "shots": spec.shots, "queries": spec.queries,
           "episodes": episodes, "seed": seed, "distance": distance}
    return make_report(accs, attempted=episodes, config=cfg)


def aggregate(reports: Sequence[EvalReport]) -> dict:
    """Across repeats: plain mean of means, mean of per-repeat CIs, and pooled-episode stats."""
    pooled = [a for r in reports for a in r.per_episode_acc]
    mean, std, ci = summarize(pooled)
    return {
        "repeats": len(reports),
        "mean_of_means": float(np.mean([r.mean_acc for r in reports])),
        "mean_of_ci95": float(np.mean([r.ci95_halfwidth for r in reports])),
        "per_repeat_ci95": [r.ci95_halfwidth for r in reports],
        "pooled_mean": mean,
        "pooled_std_dev": std,
        "pooled_ci95": ci,
        "pooled_episodes": len(pooled),
    }


def export_embeddings(model, dataset: Dataset, out_path, augment: Optional[AugmentConfig] = None,
                      batch_size: int = 128) -> None:
    """Write ``sample_index,label,emb_0..emb_{d-1}`` for every sample (header row first)."""
    if augment is None:
        augment = AugmentConfig(target_size=model.config.image_size)
    out_path = Path(out_path)
    try:
        with open(out_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_index", "label"] + [f"emb_{j}" for j in range(model.config.embed_dim)])
            for start in range(0, len(dataset), batch_size):
                stop = min(start + batch_size, len(dataset))
                images = preprocess_batch(dataset.images[start:stop], augment, training=False, dtype=model.dtype)
                emb = model.embed(images, batch_size=batch_size)
                for offset, row in enumerate(emb):
                    i = start + offset
                    writer.writerow([i, dataset.labels[i]] + [repr(float(v)) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write embeddings to {out_path}: {exc.strerror or exc}") from exc
