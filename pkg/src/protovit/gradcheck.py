"""Finite-difference verification of every backward rule.

Each case builds a scalar ``sum(w * op(inputs))`` with a fixed random ``w`` in
float64, runs autodiff, and compares against central differences
``(f(x+h) - f(x-h)) / 2h`` with ``h = 1e-5``.

The error for one case is ``max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-5)`` over the
checked coordinates. Large inputs (model weights) are checked on a random sample
of coordinates per tensor rather than exhaustively.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import protonet
from . import tensor as T
from . import vit
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4
ABS_FLOOR = 1e-5


@dataclass
class GradCase:
    name: str
    # (rng) -> (forward(list[Tensor]) -> Tensor, list of float64 arrays)
    build: Callable
    trials: int = 5
    max_coords: Optional[int] = None


def check(fn: Callable[[list], Tensor], inputs: Sequence[np.ndarray], rng: np.random.Generator,
          max_coords: Optional[int] = None, h: float = STEP) -> float:
    """Worst relative error between autodiff and central differences for ``fn``."""
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    probe = fn([Tensor(x, dtype=np.float64) for x in inputs])
    weight = rng.standard_normal(probe.shape)

    def scalar(arrays, track=False):
        ts = [Tensor(a, requires_grad=track, dtype=np.float64) for a in arrays]
        out = fn(ts)
        return (out * Tensor(weight, dtype=np.float64)).sum(), ts

    loss, leaves = scalar(inputs, track=True)
    T.backward(loss)
    worst = 0.0
    for k, x in enumerate(inputs):
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(x)
        coords = np.arange(x.size)
        if max_coords is not None and x.size > max_coords:
            coords = np.sort(rng.choice(x.size, size=max_coords, replace=False))
        flat = x.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = scalar(inputs)[0].item()
            flat[c] = orig - h
            fm = scalar(inputs)[0].item()
            flat[c] = orig
            numeric = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[c]
            err = abs(a - numeric) / max(abs(a), abs(numeric), ABS_FLOOR)
            worst = max(worst, err)
    return worst


# -- cases --------------------------------------------------------------------


def _unary(op, low=-2.0, high=2.0, shape=(3, 4)):
    def build(rng):
        return (lambda ts: op(ts[0])), [rng.uniform(low, high, size=shape)]
    return build


def _binary(op, sa=(3, 4), sb=(4,), positive_b=False):
    def build(rng):
        b = rng.uniform(0.5, 2.0, size=sb) if positive_b else rng.standard_normal(sb)
        return (lambda ts: op(ts[0], ts[1])), [rng.standard_normal(sa), b]
    return build


def _dropout(rng):
    seed = int(rng.integers(1 << 31))
    return (lambda ts: T.dropout(ts[0], 0.3, True, np.random.default_rng(seed))), [rng.standard_normal((4, 5))]


def _layernorm(rng):
    return (lambda ts: T.layernorm(ts[0], ts[1], ts[2], 1e-6)), [
        rng.standard_normal((2, 3, 6)), rng.uniform(0.5, 1.5, 6), rng.standard_normal(6)]


def _index(rng):
    rows = rng.integers(0, 5, size=7)
    return (lambda ts: T.gather_rows(ts[0], rows)), [rng.standard_normal((5, 3))]


def _prototypes(rng):
    labels = list(rng.permutation([0, 0, 1, 1, 1, 2, 2, 3]))
    return (lambda ts: protonet.compute_prototypes(ts[0], labels).matrix), [rng.standard_normal((8, 4))]


def _sq_euclidean(rng):
    return (lambda ts: protonet.sq_euclidean(ts[0], ts[1])), [
        rng.standard_normal((6, 4)), rng.standard_normal((3, 4))]


def _unsquared_logits(rng):
    return (lambda ts: protonet.logits(ts[0], ts[1], "unsquared")), [
        rng.standard_normal((6, 4)), rng.standard_normal((3, 4))]


def _episodic_loss(rng):
    y = rng.integers(0, 4, size=6)
    return (lambda ts: protonet.episodic_loss(ts[0], y)), [rng.standard_normal((6, 4))]


def _distance_loss(rng):
    """Query embeddings -> prototypes -> distances -> loss, end to end."""
    labels = [0, 0, 1, 1, 2, 2]
    y = rng.integers(0, 3, size=5)

    def fn(ts):
        protos = protonet.compute_prototypes(ts[0], labels)
        return protonet.episodic_loss(protonet.logits(ts[1], protos), y)
    return fn, [rng.standard_normal((6, 4)), rng.standard_normal((5, 4))]


_MICRO_BLOCK = vit.ViTConfig(image_size=8, patch_size=4, in_channels=3, embed_dim=8, depth=1,
                             num_heads=2, drop_rate=0.0)


def _randomized_params(cfg: vit.ViTConfig, rng: np.random.Generator) -> vit.ViTParams:
    params = vit.init_params(cfg, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    for _, t in params.named_parameters():
        t.data = t.data + 0.3 * rng.standard_normal(t.shape)
    return params


def _block_inputs(cfg, rng):
    params = _randomized_params(cfg, rng)
    blk = params.blocks[0]
    names = list(vit.BlockParams._NAMES)
    tensors = [getattr(blk, n) for n in names]
    return blk, names, tensors


def _attention(rng):
    blk, names, tensors = _block_inputs(_MICRO_BLOCK, rng)

    def fn(ts):
        b = vit.BlockParams(**dict(zip(names, ts[1:])))
        return vit.attention(ts[0], b, _MICRO_BLOCK)
    return fn, [rng.standard_normal((2, 3, 8))] + [t.data for t in tensors]


def _block(rng):
    blk, names, tensors = _block_inputs(_MICRO_BLOCK, rng)

    def fn(ts):
        b = vit.BlockParams(**dict(zip(names, ts[1:])))
        return vit.transformer_block(ts[0], b, _MICRO_BLOCK)
    return fn, [rng.standard_normal((2, 3, 8))] + [t.data for t in tensors]


def _backbone(rng):
    cfg = vit.PRESETS["micro"]
    params = _randomized_params(cfg, rng)
    named = list(params.named_parameters())
    images = rng.uniform(-1, 1, size=(2, cfg.in_channels, cfg.image_size, cfg.image_size))

    def fn(ts):
        return vit.forward_features(images, _rebind(params, ts), cfg, training=False)
    return fn, [t.data for _, t in named]


def _rebind(params: vit.ViTParams, ts: list) -> vit.ViTParams:
    it = iter(ts)
    out = vit.ViTParams(patch_w=next(it), patch_b=next(it), pos_embed=next(it), cls=next(it))
    for blk in params.blocks:
        fields = {}
        for attr in vit.BlockParams._NAMES:
            fields[attr] = next(it) if getattr(blk, attr) is not None else None
        out.blocks.append(vit.BlockParams(**fields))
    out.norm_g, out.norm_b = next(it), next(it)
    return out


CASES = [
    GradCase("add", _binary(T.add)),
    GradCase("sub", _binary(T.sub, sa=(4,), sb=(3, 4))),
    GradCase("mul", _binary(T.mul, sa=(2, 3, 4), sb=(3, 1))),
    GradCase("div", _binary(T.div, positive_b=True)),
    GradCase("neg", _unary(T.neg)),
    GradCase("scale", _unary(lambda x: T.scale(x, -1.7))),
    GradCase("matmul", _binary(T.matmul, sa=(2, 3, 4), sb=(4, 5))),
    GradCase("transpose", _unary(lambda x: T.transpose(x, (2, 0, 1)), shape=(2, 3, 4))),
    GradCase("reshape", _unary(lambda x: T.reshape(x, (4, 6)), shape=(2, 3, 4))),
    GradCase("concat", _binary(lambda a, b: T.concat([a, b, a], axis=0), sa=(2, 3), sb=(4, 3))),
    GradCase("sum", _unary(lambda x: T.sum(x, axis=1), shape=(2, 3, 4))),
    GradCase("mean", _unary(lambda x: T.mean(x, axis=-1, keepdims=True), shape=(2, 3, 4))),
    GradCase("exp", _unary(T.exp)),
    GradCase("log", _unary(T.log, low=0.2, high=3.0)),
    GradCase("sqrt", _unary(T.sqrt, low=0.2, high=3.0)),
    GradCase("softmax", _unary(lambda x: T.softmax(x, axis=-1), shape=(3, 5))),
    GradCase("log_softmax", _unary(lambda x: T.log_softmax(x, axis=1), shape=(3, 5))),
    GradCase("layernorm", _layernorm),
    GradCase("gelu", _unary(T.gelu, low=-3.0, high=3.0)),
    GradCase("dropout", _dropout),
    GradCase("gather_rows", _index),
    GradCase("compute_prototypes", _prototypes),
    GradCase("sq_euclidean", _sq_euclidean),
    GradCase("logits_unsquared", _unsquared_logits),
    GradCase("episodic_loss", _episodic_loss),
    GradCase("prototype_loss", _distance_loss),
    GradCase("attention", _attention, max_coords=40),
    GradCase("transformer_block", _block, max_coords=40),
    GradCase("backbone", _backbone, trials=1, max_coords=20),
]

CASE_NAMES = [c.name for c in CASES]


def run(ops: Optional[Sequence[str]] = None, seed: int = 0) -> dict[str, float]:
    """Worst error per case (over its trials), in registry order."""
    wanted = CASES if not ops else [c for c in CASES if c.name in set(ops)]
    if ops:
        unknown = sorted(set(ops) - set(CASE_NAMES))
        if unknown:
            raise KeyError(f"unknown gradcheck ops: {unknown}")
    results = {}
    for case in wanted:
        rng = np.random.default_rng([seed, CASE_NAMES.index(case.name)])
        worst = 0.0
        for _ in range(case.trials):
            fn, inputs = case.build(rng)
            worst = max(worst, check(fn, inputs, rng, case.max_coords))
        results[case.name] = worst
    return results
