"""Prototype construction, distance logits and the episodic loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

DISTANCE_MODES = ("squared", "unsquared")


@dataclass
class Prototypes:
    """Per-class mean embeddings; row ``i`` belongs to ``labels[i]``."""

    matrix: Tensor
    labels: list

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("prototype labels must be distinct")
        if self.matrix.shape[0] != len(self.labels):
            raise ValueError("one prototype row per label required")


def compute_prototypes(support_embeddings: Tensor, support_labels: Sequence) -> Prototypes:
    """Class means of the support embeddings, rows ordered by ascending label."""
    labels = list(support_labels)
    if len(labels) == 0:
        raise ValueError("compute_prototypes needs at least one support embedding")
    if support_embeddings.shape[0] != len(labels):
        raise ValueError(f"{support_embeddings.shape[0]} embeddings but {len(labels)} labels")
    classes = sorted(set(labels))
    rows = []
    for c in classes:
        members = [i for i, lbl in enumerate(labels) if lbl == c]
        rows.append(T.gather_rows(support_embeddings, members).mean(axis=0, keepdims=True))
    return Prototypes(T.concat(rows, axis=0), classes)


def sq_euclidean(queries: Tensor, protos: Tensor) -> Tensor:
    """Pairwise squared distances ``[B, N]``."""
    if queries.ndim != 2 or protos.ndim != 2 or queries.shape[1] != protos.shape[1]:
        raise ValueError(f"dimension mismatch: queries {queries.shape} vs prototypes {protos.shape}")
    b, d = queries.shape
    n = protos.shape[0]
    diff = queries.reshape(b, 1, d) - protos.reshape(1, n, d)
    return (diff * diff).sum(axis=-1)


def logits(queries: Tensor, protos, distance: str = "squared") -> Tensor:
    """Negative distances to each prototype.

    ``distance="unsquared"`` takes the square root first; the argmax is the same
    either way, but loss values and gradients are not.
    """
    matrix = protos.matrix if isinstance(protos, Prototypes) else protos
    d2 = sq_euclidean(queries, matrix)
    if distance == "squared":
        return -d2
    if distance == "unsquared":
        return -T.sqrt(d2)
    raise ValueError(f"distance must be one of {DISTANCE_MODES}, got {distance!r}")


def remap_labels(query_labels: Sequence, proto_labels: Sequence) -> list[int]:
    lookup = {lbl: i for i, lbl in enumerate(proto_labels)}
    out = []
    for lbl in query_labels:
        try:
            out.append(lookup[lbl])
        except KeyError:
            raise KeyError(f"query label {lbl!r} has no prototype") from None
    return out


def episodic_loss(logit: Tensor, local_labels: Sequence[int]) -> Tensor:
    """Mean cross-entropy of the correct local class."""
    b, n = logit.shape
    y = np.asarray(local_labels, dtype=np.intp)
    if y.shape != (b,):
        raise ValueError(f"expected {b} labels, got {y.shape[0] if y.ndim else 0}")
    if b and (y.min() < 0 or y.max() >= n):
        bad = int(y[(y < 0) | (y >= n)][0])
        raise ValueError(f"label {bad} out of range for {n} classes")
    logp = T.log_softmax(logit, axis=1)
    return -T.index(logp, (np.arange(b), y)).mean()


def predict(logit) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest index."""
    arr = logit.data if isinstance(logit, Tensor) else np.asarray(logit)
    return np.argmax(arr, axis=1)


def accuracy(pred: Sequence[int], local_labels: Sequence[int]) -> float:
    pred, y = np.asarray(pred), np.asarray(local_labels)
    return float(np.mean(pred == y)) if len(y) else 0.0
