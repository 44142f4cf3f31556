"""Vision Transformer feature extractor returning the CLS-token embedding.

Blocks use the pre-norm residual layout::

    x = x + Drop(Proj(MHSA(LN(x))))
    x = x + Drop(FC2(Drop(GELU(FC1(LN(x))))))

Patches are flattened channel-major (channel, then row, then column), patches
are ordered row-major over the image, and the CLS token is row 0 of the sequence.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator, Optional

import numpy as np
from scipy.stats import truncnorm

from . import tensor as T
from .tensor import Tensor

LN_EPS = 1e-6
INIT_STD = 0.02
FINAL_NORM_SCALE = 0.02


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 224
    patch_size: int = 16
    in_channels: int = 3
    embed_dim: int = 384
    depth: int = 12
    num_heads: int = 6
    mlp_ratio: float = 4.0
    drop_rate: float = 0.1
    qkv_bias: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if min(self.image_size, self.patch_size, self.in_channels, self.embed_dim, self.depth, self.num_heads) < 1:
            raise ValueError("ViTConfig sizes must be positive")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError(f"drop_rate must be in [0, 1), got {self.drop_rate}")
        if int(self.mlp_ratio * self.embed_dim) < 1:
            raise ValueError("mlp_ratio * embed_dim must be >= 1")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return 1 + self.num_patches

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def hidden_dim(self) -> int:
        return int(self.mlp_ratio * self.embed_dim)

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    @classmethod
    def preset(cls, name: str) -> "ViTConfig":
        try:
            return PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


PRESETS = {
    "small": ViTConfig(224, 16, 3, 384, 12, 6, 4.0, 0.1, True),
    "tiny": ViTConfig(224, 16, 3, 192, 12, 3, 4.0, 0.1, True),
    # test-only, keeps the numpy backbone laptop-sized
    "micro": ViTConfig(32, 8, 3, 64, 4, 4, 4.0, 0.1, True),
}


def parameter_count(cfg: ViTConfig) -> int:
    """Closed-form number of learnable scalars for ``cfg``."""
    d, m = cfg.embed_dim, cfg.hidden_dim
    per_block = (
        2 * d                                   # norm1
        + 3 * d * d + (3 * d if cfg.qkv_bias else 0)
        + d * d + d                             # attention output projection
        + 2 * d                                 # norm2
        + m * d + m + d * m + d                 # MLP
    )
    return d * cfg.patch_dim + d + cfg.seq_len * d + d + cfg.depth * per_block + 2 * d


@dataclass
class BlockParams:
    norm1_g: Tensor
    norm1_b: Tensor
    qkv_w: Tensor
    qkv_b: Optional[Tensor]
    proj_w: Tensor
    proj_b: Tensor
    norm2_g: Tensor
    norm2_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor

    _NAMES = {
        "norm1_g": "norm1.g", "norm1_b": "norm1.b",
        "qkv_w": "attn.qkv.w", "qkv_b": "attn.qkv.b",
        "proj_w": "attn.proj.w", "proj_b": "attn.proj.b",
        "norm2_g": "norm2.g", "norm2_b": "norm2.b",
        "fc1_w": "mlp.fc1.w", "fc1_b": "mlp.fc1.b",
        "fc2_w": "mlp.fc2.w", "fc2_b": "mlp.fc2.b",
    }


@dataclass
class ViTParams:
    patch_w: Tensor
    patch_b: Tensor
    pos_embed: Tensor
    cls: Tensor
    blocks: list = field(default_factory=list)
    norm_g: Optional[Tensor] = None
    norm_b: Optional[Tensor] = None

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        """Yield ``(canonical_name, tensor)`` in a fixed order."""
        yield "patch_proj.w", self.patch_w
        yield "patch_proj.b", self.patch_b
        yield "pos_embed", self.pos_embed
        yield "cls", self.cls
        for i, blk in enumerate(self.blocks):
            for attr, suffix in BlockParams._NAMES.items():
                t = getattr(blk, attr)
                if t is not None:
                    yield f"blk{i}.{suffix}", t
        yield "norm.g", self.norm_g
        yield "norm.b", self.norm_b

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        mine = dict(self.named_parameters())
        missing = sorted(set(mine) - set(state))
        unexpected = sorted(set(state) - set(mine))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, t in mine.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise ValueError(f"{name}: expected shape {t.shape}, got {arr.shape}")
            t.data = arr.astype(t.dtype)
            t.grad = None

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


def _trunc_normal(rng: np.random.Generator, shape, dtype, std: float = INIT_STD) -> np.ndarray:
    vals = truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)
    return np.asarray(vals, dtype=dtype)


def init_params(cfg: ViTConfig, seed: int = 42, dtype=np.float32,
                final_norm_scale: float = FINAL_NORM_SCALE) -> ViTParams:
    """Truncated-normal weights (std 0.02, cut at 2 std), zero biases, unit LN scales.

    The final LayerNorm scale starts at ``final_norm_scale`` instead of 1 so the
    first episodes see near-uniform logits; it must be nonzero, because identical
    embeddings are a stationary point of the prototypical loss.
    """
    rng = np.random.default_rng(seed)
    d, m = cfg.embed_dim, cfg.hidden_dim

    def w(*shape, std=INIT_STD):
        return Tensor(_trunc_normal(rng, shape, dtype, std), requires_grad=True, dtype=dtype)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True, dtype=dtype)

    params = ViTParams(
        patch_w=w(d, cfg.patch_dim),
        patch_b=zeros(d),
        pos_embed=w(cfg.seq_len, d),
        cls=w(1, d),
    )
    for _ in range(cfg.depth):
        params.blocks.append(BlockParams(
            norm1_g=ones(d), norm1_b=zeros(d),
            qkv_w=w(3 * d, d), qkv_b=zeros(3 * d) if cfg.qkv_bias else None,
            proj_w=w(d, d), proj_b=zeros(d),
            norm2_g=ones(d), norm2_b=zeros(d),
            fc1_w=w(m, d), fc1_b=zeros(m),
            fc2_w=w(d, m), fc2_b=zeros(d),
        ))
    params.norm_g = Tensor(np.full(d, final_norm_scale), requires_grad=True, dtype=dtype)
    params.norm_b = zeros(d)
    return params


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    y = x @ weight.T
    return y if bias is None else y + bias


def patch_embed(images, params: ViTParams, cfg: ViTConfig) -> Tensor:
    """Project non-overlapping patches: ``[C,H,W] -> [T,d]`` or ``[B,C,H,W] -> [B,T,d]``."""
    x = images if isinstance(images, Tensor) else Tensor(images, dtype=params.patch_w.dtype)
    single = x.ndim == 3
    if single:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4:
        raise ValueError(f"expected [B,C,H,W] images, got shape {x.shape}")
    b, c, h, wd = x.shape
    s, p = cfg.image_size, cfg.patch_size
    if (c, h, wd) != (cfg.in_channels, s, s):
        raise ValueError(f"image shape {(c, h, wd)} does not match config {(cfg.in_channels, s, s)}")
    g = s // p
    x = x.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5).reshape(b, g * g, c * p * p)
    out = linear(x, params.patch_w, params.patch_b)
    return out.reshape(out.shape[1:]) if single else out


def attention(x: Tensor, blk: BlockParams, cfg: ViTConfig, training: bool = False,
              rng: Optional[np.random.Generator] = None, return_weights: bool = False):
    """Multi-head self-attention on ``[..., S, d]`` with scaled dot-product scores."""
    *lead, s, d = x.shape
    h, dk = cfg.num_heads, cfg.head_dim
    nl = len(lead)
    qkv = linear(x, blk.qkv_w, blk.qkv_b).reshape(*lead, s, 3, h, dk)
    # -> [3, ..., h, S, dk]
    qkv = qkv.transpose(nl + 1, *range(nl), nl + 2, nl, nl + 3)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.scale(q @ k.T, 1.0 / math.sqrt(dk))
    weights = T.softmax(scores, axis=-1)
    ctx = weights @ v
    # [..., h, S, dk] -> [..., S, h*dk]
    ctx = ctx.transpose(*range(nl), nl + 1, nl, nl + 2).reshape(*lead, s, d)
    out = linear(ctx, blk.proj_w, blk.proj_b)
    out = T.dropout(out, cfg.drop_rate, training, rng)
    return (out, weights) if return_weights else out


def mlp(x: Tensor, blk: BlockParams, cfg: ViTConfig, training: bool = False,
        rng: Optional[np.random.Generator] = None) -> Tensor:
    hid = T.gelu(linear(x, blk.fc1_w, blk.fc1_b))
    hid = T.dropout(hid, cfg.drop_rate, training, rng)
    return T.dropout(linear(hid, blk.fc2_w, blk.fc2_b), cfg.drop_rate, training, rng)


def transformer_block(x: Tensor, blk: BlockParams, cfg: ViTConfig, training: bool = False,
                      rng: Optional[np.random.Generator] = None) -> Tensor:
    x = x + attention(T.layernorm(x, blk.norm1_g, blk.norm1_b, LN_EPS), blk, cfg, training, rng)
    return x + mlp(T.layernorm(x, blk.norm2_g, blk.norm2_b, LN_EPS), blk, cfg, training, rng)


def embed_tokens(images, params: ViTParams, cfg: ViTConfig) -> Tensor:
    """Patch tokens with the CLS token prepended and positions added: ``[B, 1+T, d]``."""
    tokens = patch_embed(images, params, cfg)
    if tokens.ndim == 2:
        tokens = tokens.reshape(1, *tokens.shape)
    b = tokens.shape[0]
    ones = Tensor(np.ones((b, 1, 1)), dtype=tokens.dtype)
    cls = ones * params.cls.reshape(1, 1, cfg.embed_dim)
    return T.concat([cls, tokens], axis=1) + params.pos_embed


def forward_features(images, params: ViTParams, cfg: ViTConfig, training: bool = False,
                     rng: Optional[np.random.Generator] = None) -> Tensor:
    """CLS embeddings ``[B, d]`` for a batch ``[B, C, H, W]``."""
    x = embed_tokens(images, params, cfg)
    x = T.dropout(x, cfg.drop_rate, training, rng)
    for blk in params.blocks:
        x = transformer_block(x, blk, cfg, training, rng)
    x = T.layernorm(x, params.norm_g, params.norm_b, LN_EPS)
    return x[:, 0]


class ViTModel:
    """A config paired with its parameters."""

    def __init__(self, config: ViTConfig, params: Optional[ViTParams] = None, seed: int = 42,
                 dtype=np.float32, final_norm_scale: float = FINAL_NORM_SCALE):
        self.config = config
        if params is None:
            params = init_params(config, seed=seed, dtype=dtype, final_norm_scale=final_norm_scale)
        self.params = params

    @property
    def dtype(self):
        return self.params.patch_w.dtype

    def forward_features(self, images, training: bool = False,
                         rng: Optional[np.random.Generator] = None) -> Tensor:
        return forward_features(images, self.params, self.config, training, rng)

    def embed(self, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
        """Eval-mode CLS embeddings without recording a graph."""
        images = np.asarray(images, dtype=self.dtype)
        chunks = []
        with T.no_grad():
            for start in range(0, len(images), batch_size):
                chunks.append(self.forward_features(images[start:start + batch_size]).data)
        if not chunks:
            return np.zeros((0, self.config.embed_dim), dtype=self.dtype)
        return np.concatenate(chunks, axis=0)

    def state_dict(self) -> dict:
        return self.params.state_dict()

    def save(self, path) -> None:
        from .serialization import save

        header = {"vit_config": self.config.to_dict()}
        save(path, self.params.state_dict(), header=header)

    @classmethod
    def load(cls, path, dtype=np.float32) -> "ViTModel":
        from .serialization import CheckpointFormatError, load

        header, state = load(path)
        if not header or "vit_config" not in header:
            raise CheckpointFormatError(f"{path}: checkpoint has no ViT config header")
        cfg = ViTConfig.from_dict(header["vit_config"])
        model = cls(cfg, dtype=dtype)
        model.params.load_state_dict(state)
        return model
