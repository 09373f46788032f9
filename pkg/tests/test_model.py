import numpy as np
import pytest

from voxinit import initzoo, nn, ops
from voxinit.autodiff import Tensor
from voxinit.gradcheck import check_gradients
from voxinit.model import (SEG_HEADS, SSL_HEADS, HybridSegModel, ModelConfig, ModelConfigError,
                           init_weights)
from voxinit.transform import PermutationRecord, shuffle_subvolumes


@pytest.fixture(scope="module")
def ssl_model():
    return HybridSegModel(ModelConfig(), SSL_HEADS, seed=0)


def rand_input(cfg, seed=0, dtype=np.float32):
    x = np.random.default_rng(seed).normal(size=(1, cfg.in_channels) + cfg.dims)
    return Tensor(x.astype(dtype), dtype=dtype)


def test_encoder_level_shapes(ssl_model):
    enc = ssl_model.encode(rand_input(ssl_model.cfg))
    assert enc.shapes() == [(4, 4, 4, 64)] * 4


def test_order_logits_shape(ssl_model):
    logits = ssl_model.order_heads(ssl_model.encode(rand_input(ssl_model.cfg)))
    assert [t.shape for t in logits] == [(1, 4, 4)] * 4


@pytest.mark.parametrize("dims,patch", [((30, 32, 32), 8), ((32, 32, 32), 4)])
def test_invalid_configs(dims, patch):
    with pytest.raises(ModelConfigError):
        ModelConfig(dims=dims, patch=patch)


def test_heads_must_divide_embedding():
    with pytest.raises(ModelConfigError, match="divisible"):
        ModelConfig(embed_dim=30, heads=4)


def test_golden_parameter_counts():
    # hand count for E=64, depth 4, mlp x2, 64 tokens, C=1, f=4, J=4
    assert HybridSegModel(ModelConfig(), SEG_HEADS).n_parameters() == 211104
    assert HybridSegModel(ModelConfig(), SSL_HEADS).n_parameters() == 212129


def test_trunks_differ_only_in_heads():
    seg, ssl = HybridSegModel(ModelConfig(), SEG_HEADS), HybridSegModel(ModelConfig(), SSL_HEADS)
    assert seg.trunk_names() == ssl.trunk_names()
    only_seg = set(seg.params) - set(ssl.params)
    only_ssl = set(ssl.params) - set(seg.params)
    assert only_seg == {"heads.seg.weight", "heads.seg.bias"}
    assert all(n.startswith(("heads.rec.", "heads.order.")) for n in only_ssl)


def test_reconstruction_and_segmentation_shapes(ssl_model):
    x = rand_input(ssl_model.cfg)
    _, rec = ssl_model.forward_ssl(x)
    assert rec.shape == x.shape
    seg = HybridSegModel(ModelConfig(num_classes=3), SEG_HEADS)
    logits = seg.forward_seg(x)
    assert logits.shape == (1, 3, 32, 32, 32)
    probs = nn.softmax(logits, axis=1).data.sum(axis=1)
    np.testing.assert_allclose(probs, 1.0, atol=1e-6)


def zero_all(model):
    for t in model.params.values():
        t.data[...] = 0.0


def test_zero_weights_except_beta_give_constant_features():
    m = HybridSegModel(ModelConfig(), SSL_HEADS)
    zero_all(m)
    for n, t in m.params.items():
        if n.endswith(".beta"):
            t.data[...] = np.linspace(-1, 1, t.size)
    enc = m.encode(rand_input(m.cfg))
    for z in enc.levels:
        assert np.ptp(z.data, axis=(2, 3, 4)).max() == 0.0


def test_constant_levels_give_identical_slot_logits(ssl_model):
    enc = ssl_model.encode(rand_input(ssl_model.cfg))
    for z in enc.levels:
        z.data[...] = 0.3
    for t in ssl_model.order_heads(enc):
        assert np.ptp(t.data, axis=1).max() == 0.0


def test_zero_classifier_weights_give_bias():
    m = HybridSegModel(ModelConfig(), SSL_HEADS)
    bias = np.array([0.1, -0.2, 0.3, 0.4], dtype=np.float32)
    for i in range(4):
        m.params[f"heads.order.{i}.weight"].data[...] = 0.0
        m.params[f"heads.order.{i}.bias"].data[...] = bias
    for t in m.order_heads(m.encode(rand_input(m.cfg))):
        np.testing.assert_array_equal(t.data[0], np.tile(bias, (4, 1)))


def test_zero_weights_give_constant_reconstruction():
    m = HybridSegModel(ModelConfig(), SSL_HEADS)
    zero_all(m)
    m.params["heads.rec.bias"].data[...] = 0.7
    _, rec = m.forward_ssl(rand_input(m.cfg))
    np.testing.assert_allclose(rec.data, 0.7, rtol=1e-6)


def test_patch_embedding_is_permutation_covariant(ssl_model):
    """Shuffling depth slabs permutes the depth axis of pre-attention tokens."""
    cfg = ssl_model.cfg
    x = rand_input(cfg, seed=3).data[0]
    perm = PermutationRecord(4, (2, 0, 3, 1))
    w, b = ssl_model.params["encoder.patch_embed.weight"], ssl_model.params["encoder.patch_embed.bias"]

    def embed(v):
        return nn.conv3d(Tensor(v[None]), w, b, stride=8).data[0]

    plain, shuffled = embed(x), embed(shuffle_subvolumes(x, perm))
    np.testing.assert_allclose(shuffled, plain[..., list(perm.order)], rtol=1e-5, atol=1e-6)


def test_duplicated_class_channels_give_half_probabilities():
    m = HybridSegModel(ModelConfig(num_classes=2), SEG_HEADS, seed=1)
    w, b = m.params["heads.seg.weight"], m.params["heads.seg.bias"]
    w.data[1] = w.data[0]
    b.data[1] = b.data[0]
    probs = nn.softmax(m.forward_seg(rand_input(m.cfg)), axis=1).data
    np.testing.assert_allclose(probs, 0.5, atol=1e-7)


def test_reconstruction_gradient_wrt_first_conv():
    cfg = ModelConfig(dims=(16, 16, 16), embed_dim=16, heads=2, feature_size=2)
    m = HybridSegModel(cfg, SSL_HEADS, seed=2, dtype=np.float64)
    x = rand_input(cfg, seed=4, dtype=np.float64)
    target = np.random.default_rng(5).normal(size=x.shape)

    def loss():
        _, rec = m.forward_ssl(x)
        return ops.mean(ops.power(ops.sub(rec, target), 2))

    for name in ("decoder.stem.weight", "encoder.patch_embed.weight"):
        assert check_gradients(loss, [m.params[name]], n_coords=30) < 1e-4


def test_init_determinism_and_scheme_changes_only_values():
    a = HybridSegModel(ModelConfig(), SEG_HEADS, seed=9)
    b = HybridSegModel(ModelConfig(), SEG_HEADS, seed=9)
    for n in a.params:
        np.testing.assert_array_equal(a.params[n].data, b.params[n].data)
    shapes = {n: t.shape for n, t in a.params.items()}
    before = a.params["decoder.fuse8.weight"].data.std()
    init_weights(a, initzoo.InitSpec("kaiming_normal"), 9)
    assert {n: t.shape for n, t in a.params.items()} == shapes
    assert a.params["decoder.fuse8.weight"].data.std() != before


def test_unetr_stem_bounds():
    m = HybridSegModel(ModelConfig(), SEG_HEADS, initzoo.InitSpec("unetr-default"), seed=0)
    w = m.params["decoder.stem.weight"].data
    assert np.abs(w).max() < 1 / np.sqrt(27)
    np.testing.assert_array_equal(m.params["decoder.stem.bias"].data, 0.0)


def test_state_dict_round_trip():
    a = HybridSegModel(ModelConfig(), SEG_HEADS, seed=1)
    b = HybridSegModel(ModelConfig(), SEG_HEADS, seed=2)
    b.load_state_dict(a.state_dict())
    for n in a.params:
        np.testing.assert_array_equal(a.params[n].data, b.params[n].data)
    with pytest.raises(KeyError):
        b.load_state_dict({"nope": np.zeros(1)})


def test_input_shape_checked(ssl_model):
    with pytest.raises(ModelConfigError):
        ssl_model.encode(Tensor(np.zeros((1, 1, 16, 16, 16), dtype=np.float32)))
