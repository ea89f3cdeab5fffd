import time

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from aneurysm3d.engine import functional as F
from aneurysm3d.engine import grad_check
from aneurysm3d.errors import ConfigInvalid, ShapeMismatch
from aneurysm3d.model import (
    ContextModule,
    LocalizationModule,
    NetworkConfig,
    build_network,
    count_parameters,
    deep_supervision_sum,
    forward,
    parameter_dict,
)

TOY = NetworkConfig(levels=2, base_channels=2, se_ratio=2, input_dims=8)


def toy_input(side, seed=0, channels=1):
    return np.random.default_rng(seed).random((1, channels, side, side, side)).astype(np.float32)


def encoder_outputs(model, x):
    """Context-module outputs per level, run by hand through the children."""
    h = model.children["stem"].forward(x)
    outs = []
    for l in range(model.config.levels + 1):
        if l:
            h = model.children[f"down{l}"].forward(h)
        h = model.children[f"enc{l}"].forward(h)
        outs.append(h)
    return outs


# ----------------------------------------------------------------- config


@pytest.mark.parametrize(
    "kw",
    [
        dict(levels=0),
        dict(input_dims=20, levels=3),
        dict(attention_position="sideways"),
        dict(base_channels=4, levels=2, se_ratio=3, attention_position="middle"),
        dict(p_drop=1.0),
    ],
)
def test_invalid_configs(kw):
    with pytest.raises(ConfigInvalid):
        build_network(NetworkConfig(**{**dict(levels=2, base_channels=4, input_dims=16, se_ratio=2), **kw}))


def test_config_round_trip():
    c = NetworkConfig(levels=3, base_channels=8, attention_position="upsample", se_ratio=8, input_dims=32)
    assert NetworkConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ConfigInvalid):
        NetworkConfig.from_dict({"depth": 3})


def test_se_sites_per_position():
    c = NetworkConfig(levels=4, base_channels=16)
    assert c.se_sites() == {"enc4.se": 256, "dec3.se": 256}
    assert set(NetworkConfig(levels=2, attention_position="downsample").se_sites()) == {"enc0.se", "enc1.se"}
    assert set(NetworkConfig(levels=2, attention_position="upsample").se_sites()) == {"loc0.se", "loc1.se"}
    assert NetworkConfig(attention_position="none").se_sites() == {}


# ----------------------------------------------------------------- shapes


def test_full_depth_shape_contract():
    # four halvings of a 128 cube; a one-channel base keeps memory modest
    cfg = NetworkConfig(levels=4, base_channels=1, attention_position="none", input_dims=128)
    m = build_network(cfg).eval()
    out = m.forward(np.zeros((1, 1, 128, 128, 128), np.float32))
    assert out.shape == (1, 3, 128, 128, 128)
    assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


def test_toy_deepest_features():
    m = build_network(NetworkConfig(levels=2, base_channels=4, se_ratio=2, input_dims=16)).eval()
    deepest = encoder_outputs(m, toy_input(16))[-1]
    assert deepest.shape == (1, 16, 4, 4, 4)


def test_forward_probabilities_32():
    m = build_network(NetworkConfig(levels=2, base_channels=4, se_ratio=2, input_dims=32)).eval()
    out = forward(m, toy_input(32))
    assert out.shape == (1, 3, 32, 32, 32)
    assert np.all((out >= 0) & (out <= 1))
    assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


def test_forward_rejects_wrong_side():
    m = build_network(TOY)
    with pytest.raises(ShapeMismatch):
        m.forward(toy_input(16))


def test_toy_forward_under_one_second():
    m = build_network(TOY).eval()
    x = toy_input(8)
    m.forward(x)
    t0 = time.perf_counter()
    m.forward(x)
    assert time.perf_counter() - t0 < 1.0


# ------------------------------------------------------------ determinism


def test_same_seed_same_parameters():
    a = parameter_dict(build_network(TOY, seed=3))
    b = parameter_dict(build_network(TOY, seed=3))
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
    c = parameter_dict(build_network(TOY, seed=4))
    assert any(a[k].tobytes() != c[k].tobytes() for k in a if "conv" in k)


def test_inference_is_repeatable_and_train_mode_reseeds():
    m = build_network(TOY, seed=1)
    x = toy_input(8)
    m.eval()
    assert_array_equal(m.forward(x), m.forward(x))
    m.train()
    m.reseed_dropout(9)
    a = m.forward(x)
    b = m.forward(x)
    m.reseed_dropout(9)
    assert_array_equal(m.forward(x), a)
    assert not np.array_equal(a, b)


def test_attention_none_shares_baseline_parameters():
    base = parameter_dict(build_network(NetworkConfig(levels=2, base_channels=4, se_ratio=2, attention_position="none", input_dims=16), seed=5))
    se = parameter_dict(build_network(NetworkConfig(levels=2, base_channels=4, se_ratio=2, attention_position="middle", input_dims=16), seed=5))
    extra = set(se) - set(base)
    assert extra and all(".se." in k for k in extra)
    for k in base:
        assert base[k].tobytes() == se[k].tobytes()


# -------------------------------------------------------------- modules


def test_context_module_zero_branch_is_identity():
    m = ContextModule(8, 0.0, 0.01, seed=0, name="ctx")
    for name, p in m.named_parameters():
        if name.endswith("conv.weight"):
            p.value[...] = 0
    x = np.random.default_rng(0).standard_normal((1, 8, 8, 8, 8)).astype(np.float32)
    out = m.forward(x)
    assert out.shape == x.shape
    assert_array_equal(out, x)


def test_context_module_gradcheck():
    m = ContextModule(2, 0.0, 0.01, seed=0, name="ctx").astype(np.float64)
    err, _ = grad_check(m, np.random.default_rng(1).standard_normal((1, 2, 3, 3, 3)))
    assert err < 1e-5


def test_localization_module_shapes_and_gradcheck():
    m = LocalizationModule(16, 8, 0.01, seed=0, name="loc")
    assert m.forward(np.random.default_rng(0).standard_normal((1, 16, 8, 8, 8)).astype(np.float32)).shape == (1, 8, 8, 8, 8)
    small = LocalizationModule(4, 2, 0.01, seed=0, name="loc").astype(np.float64)
    err, _ = grad_check(small, np.random.default_rng(2).standard_normal((1, 4, 3, 3, 3)))
    assert err < 1e-5


def test_localization_identity_pointwise_conv():
    # with an identity 1x1x1 conv the second stage only renormalizes and
    # activates the first stage's output; both are idempotent on it
    m = LocalizationModule(4, 2, 0.01, seed=0, name="loc").astype(np.float64)
    m.children["conv1"].children["conv"].params["weight"].value[...] = np.eye(2).reshape(2, 2, 1, 1, 1)
    x = np.random.default_rng(3).standard_normal((1, 4, 4, 4, 4))
    first = m.children["conv3"].forward(x)
    out = m.forward(x)
    expect, _ = F.instance_norm_forward(first, np.ones(2), np.zeros(2))
    expect, _ = F.leaky_relu_forward(expect, 0.01)
    assert_allclose(out, expect, atol=1e-12)


def test_deep_supervision_examples():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((1, 3, 8, 8, 8))
    zeros = [np.zeros((1, 3, 2, 2, 2)), np.zeros((1, 3, 4, 4, 4))]
    probs, _ = deep_supervision_sum(zeros + [m])
    assert_allclose(probs, F.softmax_channels_forward(m)[0], atol=1e-12)
    same = [np.ones((1, 3, 2, 2, 2)), np.ones((1, 3, 4, 4, 4)), np.ones((1, 3, 8, 8, 8))]
    assert_allclose(deep_supervision_sum(same)[0], 1 / 3)
    a, b, c = (rng.standard_normal((1, 3, 8, 8, 8)) for _ in range(3))
    assert_allclose(deep_supervision_sum([a, b, c])[1], deep_supervision_sum([c, a, b])[1], atol=1e-12)
    with pytest.raises(ShapeMismatch):
        deep_supervision_sum([np.zeros((1, 2, 4, 4, 4)), np.zeros((1, 3, 8, 8, 8))])


# ------------------------------------------------------- counts and grads


def hand_count(levels, b, ratio, position, classes=3):
    w = [b * 2 ** l for l in range(levels + 1)]
    conv = lambda ci, co, k=3: k ** 3 * ci * co + 2 * co  # bias-free conv + norm gamma/beta
    se = lambda c: (c * (c // ratio) + c // ratio) + ((c // ratio) * c + c)
    n = conv(1, w[0])
    for l in range(levels + 1):
        if l:
            n += conv(w[l - 1], w[l])
        n += 2 * conv(w[l], w[l])
    for l in range(levels):
        n += conv(w[l + 1], w[l]) + conv(2 * w[l], w[l]) + conv(w[l], w[l], 1)
    n += sum(w[l] * classes + classes for l in range(min(3, levels)))
    if position == "middle":
        n += se(w[levels]) + se(2 * w[levels - 1])
    elif position == "downsample":
        n += sum(se(w[l]) for l in range(levels))
    elif position == "upsample":
        n += sum(se(w[l]) for l in range(levels))
    return n


@pytest.mark.parametrize("position", ["none", "middle", "downsample", "upsample"])
@pytest.mark.parametrize("levels,base", [(2, 2), (2, 4), (4, 16)])
def test_count_parameters_matches_hand_ledger(position, levels, base):
    ratio = 2 if base < 16 else 16
    cfg = NetworkConfig(levels=levels, base_channels=base, se_ratio=ratio, attention_position=position, input_dims=2 ** levels)
    assert count_parameters(build_network(cfg)) == hand_count(levels, base, ratio, position)


def test_full_network_gradcheck_sampled():
    # every tensor is covered; the exhaustive version runs in the acceptance suite
    m = build_network(TOY, seed=0, dtype=np.float64).eval()
    x = np.random.default_rng(0).random((1, 1, 8, 8, 8))
    err, per = grad_check(m, x, seed=1, max_entries=12)
    assert err < 1e-4, sorted(per.items(), key=lambda kv: -kv[1])[:3]
