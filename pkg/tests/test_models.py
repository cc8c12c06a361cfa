import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from numbisect import tensornet as tn
from numbisect.models import (InvalidConfig, Network, NetworkConfig, build_microcnn, build_mlp,
                              build_network, param_specs, parameter_count, patchify, residual_block,
                              vit_tokens)


def test_mlp_parameter_counts():
    assert build_mlp(input_resolution=16).parameter_count == 132_098
    assert parameter_count(NetworkConfig.default("MLP", input_resolution=224, channels=3)) == 38_601_730


def test_mlp_default_architecture():
    cfg = NetworkConfig.default("MLP")
    assert cfg.hidden == (256, 256) and cfg.embedding_dim == 256 and cfg.head_dim == 2
    assert [s.shape for s in param_specs(cfg)] == [(4096, 256), (256,), (256, 256), (256,), (256, 2), (2,)]


def test_mlp_zero_image_gives_bias_path():
    net = build_mlp(input_resolution=16, seed=3)
    p = net.params
    for name in ("fc0.b", "fc1.b", "head.b"):
        p[name].data = np.random.default_rng(0).standard_normal(p[name].shape)
    h = np.maximum(p["fc0.b"].data, 0)
    h = np.maximum(h @ p["fc1.W"].data + p["fc1.b"].data, 0)
    expected = h @ p["head.W"].data + p["head.b"].data
    np.testing.assert_allclose(net.logits(np.zeros((2, 16, 16)))[0], expected, atol=1e-12)


@pytest.mark.parametrize("family", ["MLP", "MicroCNN", "MicroViT"])
def test_closed_form_count_matches_param_specs(family):
    for overrides in ({}, {"input_resolution": 32}, {"channels": 3}):
        cfg = NetworkConfig.default(family, **overrides)
        assert build_network(cfg).parameter_count == parameter_count(cfg)


def test_microcnn_counts_and_resolution_invariance():
    cfg = NetworkConfig.default("MicroCNN")
    assert 100_000 <= parameter_count(cfg) <= 300_000
    assert parameter_count(cfg) == 124_690
    assert parameter_count(NetworkConfig.default("MicroCNN", input_resolution=128)) == parameter_count(cfg)
    assert parameter_count(NetworkConfig.default("MicroCNN", blocks_per_stage=2)) > parameter_count(cfg)


def test_residual_block_with_zero_weights_is_identity():
    net = build_microcnn(seed=1)
    for name in ("stage1.block0.conv1.K", "stage1.block0.conv2.K",
                 "stage1.block0.conv1.b", "stage1.block0.conv2.b"):
        net.params[name].data = np.zeros(net.params[name].shape)
    x = tn.Tensor(np.random.default_rng(0).standard_normal((2, 32, 8, 8)))
    out = residual_block(x, net.params, "stage1.block0", 3)
    np.testing.assert_array_equal(out.data, x.data)


def test_vit_token_counts():
    flat = NetworkConfig.default("MicroViT", hierarchical=False)
    net = build_network(flat)
    x = np.random.default_rng(0).random((2, 1, 64, 64))
    assert [t.shape[1] for t in vit_tokens(flat, net.params, x)] == [64]
    hier = NetworkConfig.default("MicroViT")
    net = build_network(hier)
    stages = vit_tokens(hier, net.params, x)
    assert [t.shape[1] for t in stages] == [64, 16, 4]
    assert [t.shape[2] for t in stages] == [32, 64, 128]


def test_flat_vit_is_permutation_equivariant_in_patches():
    cfg = NetworkConfig.default("MicroViT", hierarchical=False)
    net = build_network(cfg, seed=2)
    rng = np.random.default_rng(0)
    images = rng.random((3, 64, 64))
    perm = rng.permutation(64)
    # move each 8x8 patch to its permuted slot and carry its position embedding along
    patches = patchify(images[:, None], 8)[:, perm]
    permuted = patches.reshape(3, 8, 8, 8, 8).transpose(0, 1, 3, 2, 4).reshape(3, 64, 64)
    moved = net.params.copy()
    moved["pos"].data = net.params["pos"].data[perm]
    np.testing.assert_allclose(Network(cfg, moved).logits(permuted), net.logits(images), atol=1e-10)


@pytest.mark.parametrize("family", ["MLP", "MicroCNN", "MicroViT"])
def test_logits_and_embeddings_shapes_and_determinism(family):
    net = build_network(NetworkConfig.default(family, input_resolution=32), seed=0)
    images = (np.random.default_rng(1).random((5, 32, 32)) > 0.7).astype(np.uint8)
    logits, emb = net.embed(images, batch_size=2)
    assert logits.shape == (5, 2) and emb.shape == (5, net.config.embedding_dim)
    logits2, emb2 = net.embed(images, batch_size=2)
    np.testing.assert_array_equal(logits, logits2)
    np.testing.assert_array_equal(emb, emb2)
    # other batchings agree up to BLAS blocking order
    np.testing.assert_allclose(net.logits(images), logits, rtol=1e-12, atol=1e-12)
    # embedding feeds the head directly
    np.testing.assert_allclose(emb @ net.params["head.W"].data + net.params["head.b"].data, logits,
                               atol=1e-12)


@given(st.sampled_from(["MLP", "MicroCNN", "MicroViT"]), st.integers(0, 1000))
def test_same_seed_same_network(family, seed):
    cfg = NetworkConfig.default(family, input_resolution=16, patch_size=4)
    a, b = build_network(cfg, seed), build_network(cfg, seed)
    assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)


def test_invalid_configs():
    with pytest.raises(InvalidConfig):
        NetworkConfig.default("ResNet")
    with pytest.raises(InvalidConfig):
        NetworkConfig.default("MicroViT", patch_size=7)
    with pytest.raises(InvalidConfig):
        NetworkConfig.default("MicroViT", input_resolution=32, patch_size=8, depths=(1, 1, 1, 1))
    with pytest.raises(InvalidConfig):
        NetworkConfig.default("MLP", head_dim=3)
    with pytest.raises(InvalidConfig):
        NetworkConfig.default("MicroCNN", kernel_size=4)
    with pytest.raises(InvalidConfig):
        build_mlp(NetworkConfig.default("MicroCNN"))
    with pytest.raises(tn.ShapeMismatch):
        build_mlp().logits(np.zeros((1, 32, 32)))


def test_config_round_trip():
    for fam in ("MLP", "MicroCNN", "MicroViT"):
        cfg = NetworkConfig.default(fam, layer_norm=True) if fam == "MicroViT" else NetworkConfig.default(fam)
        assert NetworkConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(InvalidConfig):
        NetworkConfig.from_dict({"family": "MLP", "depth": 3})


def test_network_rejects_foreign_parameters():
    with pytest.raises(InvalidConfig):
        Network(NetworkConfig.default("MLP"), build_microcnn().params)
