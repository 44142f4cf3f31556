import math

import numpy as np
import pytest

from protovit import tensor as T
from protovit import vit
from protovit.tensor import Tensor
from protovit.vit import PRESETS, ViTConfig, ViTModel, init_params, parameter_count

from conftest import NANO


def _random_params(cfg, seed=0, scale=0.3):
    """Init params with extra noise so every branch carries signal."""
    params = init_params(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1)
    for _, t in params.named_parameters():
        t.data = t.data + scale * rng.standard_normal(t.shape)
    return params


def test_presets():
    assert PRESETS["small"] == ViTConfig(224, 16, 3, 384, 12, 6, 4.0, 0.1, True)
    assert PRESETS["tiny"] == ViTConfig(224, 16, 3, 192, 12, 3, 4.0, 0.1, True)
    assert PRESETS["micro"] == ViTConfig(32, 8, 3, 64, 4, 4, 4.0, 0.1, True)


@pytest.mark.parametrize("name,tokens", [("small", 196), ("tiny", 196), ("micro", 16)])
def test_token_counts(name, tokens):
    cfg = PRESETS[name]
    assert cfg.num_patches == tokens
    assert cfg.seq_len == 1 + (cfg.image_size // cfg.patch_size) ** 2


def test_small_sequence_length_is_197():
    assert PRESETS["small"].seq_len == 197


@pytest.mark.parametrize("kwargs", [dict(image_size=30), dict(embed_dim=63), dict(drop_rate=1.0)])
def test_config_validation(kwargs):
    base = PRESETS["micro"].to_dict()
    base.update(kwargs)
    with pytest.raises(ValueError):
        ViTConfig(**base)


def test_config_dict_round_trip():
    cfg = PRESETS["tiny"]
    assert ViTConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("name", ["small", "tiny", "micro"])
def test_parameter_count_closed_form(name):
    cfg = PRESETS[name]
    params = init_params(cfg, seed=0)
    assert sum(t.size for t in params.parameters()) == parameter_count(cfg)


def test_parameter_count_known_value():
    # ViT-Small without a classification head
    assert parameter_count(PRESETS["small"]) == 21_665_664


def test_canonical_names():
    names = [n for n, _ in init_params(NANO).named_parameters()]
    assert names[:4] == ["patch_proj.w", "patch_proj.b", "pos_embed", "cls"]
    assert "blk0.attn.qkv.w" in names and "blk0.mlp.fc2.b" in names
    assert names[-2:] == ["norm.g", "norm.b"]


def test_init_statistics():
    params = init_params(PRESETS["micro"], seed=0, dtype=np.float64)
    w = params.blocks[0].fc1_w.data
    assert np.abs(w).max() <= 0.04 + 1e-12
    assert w.std() == pytest.approx(0.02 * 0.88, rel=0.05)  # truncation shrinks the std
    assert np.all(params.blocks[0].qkv_b.data == 0)
    assert np.all(params.blocks[0].norm1_g.data == 1)
    assert all(np.all(np.isfinite(t.data)) for t in params.parameters())


def test_patch_embed_constant_image_gives_identical_tokens():
    params = init_params(NANO, seed=0)
    tokens = vit.patch_embed(np.full((3, 8, 8), 0.7, dtype=np.float32), params, NANO).data
    assert tokens.shape == (4, 16)
    assert np.all(tokens == tokens[0])


def test_patch_flattening_order():
    cfg = ViTConfig(4, 2, 2, 8, 1, 1, 1.0, 0.0, True)
    params = init_params(cfg, seed=0, dtype=np.float64)
    params.patch_w.data = np.eye(8)
    params.patch_b.data = np.zeros(8)
    img = np.arange(32, dtype=np.float64).reshape(2, 4, 4)
    tokens = vit.patch_embed(img, params, cfg).data
    # patch (row 0, col 1): channel 0 rows 0-1 cols 2-3, then channel 1
    np.testing.assert_array_equal(tokens[1], [2, 3, 6, 7, 18, 19, 22, 23])
    np.testing.assert_array_equal(tokens[2], img[:, 2:4, 0:2].reshape(-1))


def test_patch_embed_rejects_wrong_size():
    with pytest.raises(ValueError):
        vit.patch_embed(np.zeros((3, 12, 12)), init_params(NANO), NANO)


def test_attention_rows_sum_to_one(rng):
    params = _random_params(NANO)
    x = Tensor(rng.standard_normal((5, 16)))
    out, weights = vit.attention(x, params.blocks[0], NANO, return_weights=True)
    assert out.shape == (5, 16) and weights.shape == (2, 5, 5)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-6)


def test_attention_single_token(rng):
    params = _random_params(NANO)
    blk = params.blocks[0]
    x = rng.standard_normal((1, 16))
    out = vit.attention(Tensor(x), blk, NANO).data
    v = (x @ blk.qkv_w.data.T + blk.qkv_b.data)[:, 32:]
    np.testing.assert_allclose(out, v @ blk.proj_w.data.T + blk.proj_b.data, atol=1e-12)


def test_attention_hand_example():
    cfg = ViTConfig(2, 1, 1, 2, 1, 1, 1.0, 0.0, True)
    params = init_params(cfg, seed=0, dtype=np.float64)
    blk = params.blocks[0]
    wq = np.array([[1.0, 0.0], [0.0, 1.0]])
    wk = np.array([[2.0, 0.0], [0.0, 1.0]])
    wv = np.array([[1.0, 1.0], [0.0, 3.0]])
    blk.qkv_w.data = np.vstack([wq, wk, wv])
    blk.qkv_b.data = np.zeros(6)
    blk.proj_w.data = np.eye(2)
    blk.proj_b.data = np.zeros(2)
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    # q = x, k = [[2,0],[0,1]], v = [[1,0],[1,3]]; scores = q k^T / sqrt(2)
    s = math.sqrt(2.0)
    row0 = np.array([2 / s, 0.0])
    row1 = np.array([0.0, 1 / s])
    w0 = np.exp(row0) / np.exp(row0).sum()
    w1 = np.exp(row1) / np.exp(row1).sum()
    expected = np.array([w0[0] * np.array([1, 0]) + w0[1] * np.array([1, 3]),
                         w1[0] * np.array([1, 0]) + w1[1] * np.array([1, 3])])
    out = vit.attention(Tensor(x), blk, cfg).data
    np.testing.assert_allclose(out, expected, atol=1e-6)


def test_zero_branches_make_block_identity(rng):
    params = _random_params(NANO)
    blk = params.blocks[0]
    for t in (blk.proj_w, blk.proj_b, blk.fc2_w, blk.fc2_b):
        t.data = np.zeros_like(t.data)
    x = rng.standard_normal((5, 16))
    np.testing.assert_array_equal(vit.transformer_block(Tensor(x), blk, NANO).data, x)


@pytest.mark.parametrize("s", [1, 2, 7])
def test_block_preserves_shape(s, rng):
    params = _random_params(NANO)
    assert vit.transformer_block(Tensor(rng.standard_normal((s, 16))), params.blocks[0], NANO).shape == (s, 16)


def test_forward_shape_micro(rng):
    model = ViTModel(PRESETS["micro"], seed=0)
    assert model.forward_features(rng.uniform(-1, 1, (3, 3, 32, 32)).astype(np.float32)).shape == (3, 64)


def test_eval_forward_is_bitwise_repeatable(rng):
    model = ViTModel(NANO, seed=0)
    x = rng.uniform(-1, 1, (2, 3, 8, 8)).astype(np.float32)
    a = model.forward_features(x).data
    b = model.forward_features(x).data
    assert a.tobytes() == b.tobytes()


def test_training_forward_depends_on_dropout_stream(rng):
    model = ViTModel(NANO, params=_random_params(NANO))
    x = rng.uniform(-1, 1, (2, 3, 8, 8))
    a = model.forward_features(x, training=True, rng=np.random.default_rng(1)).data
    b = model.forward_features(x, training=True, rng=np.random.default_rng(1)).data
    c = model.forward_features(x, training=True, rng=np.random.default_rng(2)).data
    assert a.tobytes() == b.tobytes()
    assert not np.allclose(a, c)


def test_permuting_patches_changes_cls(rng):
    cfg = NANO
    params = _random_params(cfg)
    img = rng.uniform(-1, 1, (3, 8, 8))
    tokens = vit.patch_embed(img, params, cfg).data
    perm = np.array([2, 0, 3, 1])
    # re-assemble the image with its patches permuted
    patches = img.reshape(3, 2, 4, 2, 4).transpose(1, 3, 0, 2, 4).reshape(4, 3, 4, 4)
    shuffled = patches[perm].reshape(2, 2, 3, 4, 4).transpose(2, 0, 3, 1, 4).reshape(3, 8, 8)
    np.testing.assert_allclose(vit.patch_embed(shuffled, params, cfg).data, tokens[perm])
    a = vit.forward_features(img[None], params, cfg).data
    b = vit.forward_features(shuffled[None], params, cfg).data
    assert not np.allclose(a, b)


def test_single_image_matches_batch(rng):
    model = ViTModel(NANO, seed=0, dtype=np.float64)
    x = rng.uniform(-1, 1, (3, 3, 8, 8))
    batch = model.forward_features(x).data
    single = model.forward_features(x[1:2]).data
    np.testing.assert_allclose(batch[1:2], single, atol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    model = ViTModel(NANO, seed=3)
    model.save(tmp_path / "m.pvt")
    back = ViTModel.load(tmp_path / "m.pvt")
    assert back.config == NANO
    for (n1, a), (n2, b) in zip(model.params.named_parameters(), back.params.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(a.data, b.data)


def test_load_state_dict_rejects_mismatch():
    params = init_params(NANO)
    state = params.state_dict()
    del state["cls"]
    with pytest.raises(KeyError):
        params.load_state_dict(state)


def test_backbone_gradient_reaches_every_parameter(rng):
    params = _random_params(NANO)
    out = vit.forward_features(rng.uniform(-1, 1, (2, 3, 8, 8)), params, NANO, training=False)
    T.backward(out.sum() * 1.0 + (out * out).sum())
    for name, t in params.named_parameters():
        assert t.grad is not None and t.grad.shape == t.shape, name
        assert np.all(np.isfinite(t.grad)), name
