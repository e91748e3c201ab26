import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csasn import tensor as T
from csasn.attention import CascadedAttention, SEChannel, SpatialAttention, cascade, cbam_spatial, se_channel
from csasn.backbone import (ConfigError, ConvBranch, ScalingConfig, ViTBranch, compound_scale, fuse, mhsa,
                            patch_embed, patchify)
from csasn.head import ResidualHead, pool_refined
from csasn.model import CSASN, VARIANTS, ModelConfig, model_forward
from csasn.tensor import Tensor, grad_check


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


# backbone ---------------------------------------------------------------------------

def test_compound_scale_examples():
    assert compound_scale(ScalingConfig(phi=0)) == (1.0, 1.0, 1.0)
    d, w, r = compound_scale(ScalingConfig(phi=1, alpha=1.2, beta=1.1, gamma=1.15))
    assert (d, w, r) == pytest.approx((1.2, 1.1, 1.15))
    with pytest.raises(ConfigError):
        compound_scale(ScalingConfig(phi=1, alpha=2, beta=2, gamma=2))
    with pytest.raises(ConfigError):
        compound_scale(ScalingConfig(alpha=0.9, beta=1.2, gamma=1.3))


def test_conv_branch_stride_32(rng):
    branch = ConvBranch(rng)
    assert branch(Tensor(rng.random((2, 1, 64, 64)))).shape == (2, 96, 2, 2)
    assert branch(Tensor(rng.random((2, 1, 224, 224)))).shape == (2, 96, 7, 7)
    zero = branch(Tensor(np.zeros((2, 1, 64, 64)))).data
    assert np.all(np.isfinite(zero))
    with pytest.raises(ValueError):
        branch(Tensor(np.zeros((2, 1, 48, 64))))


def test_conv_branch_scaling_deepens_and_widens(rng):
    base = ConvBranch(np.random.default_rng(0))
    scaled = ConvBranch(np.random.default_rng(0), scaling=ScalingConfig(phi=2))
    assert scaled.n_parameters() > base.n_parameters()
    assert len(scaled.blocks) > len(base.blocks)


def test_patch_embed_token_counts(rng):
    for size, p in [(64, 8), (224, 16)]:
        embed = Tensor(rng.normal(size=(p * p, 8)))
        n = (size // p) ** 2
        tokens = patch_embed(Tensor(rng.random((1, 1, size, size))), embed, Tensor(np.zeros((n + 1, 8))),
                             Tensor(np.zeros(8)), p)
        assert tokens.shape == (1, n + 1, 8)
    zero = patch_embed(Tensor(rng.random((2, 1, 16, 16))), Tensor(np.zeros((16, 4))), Tensor(np.zeros((17, 4))),
                       Tensor(np.zeros(4)), 4)
    np.testing.assert_array_equal(zero.data, 0.0)
    with pytest.raises(ValueError):
        patchify(Tensor(np.zeros((1, 1, 10, 10))), 4)


def naive_mhsa(x, wq, wk, wv, wo, heads):
    n, d = x.shape
    dk = d // heads
    q, k, v = x @ wq, x @ wk, x @ wv
    out = np.zeros((n, d))
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        for i in range(n):
            scores = np.array([q[i, sl] @ k[j, sl] / math.sqrt(dk) for j in range(n)])
            w = np.exp(scores - scores.max())
            w /= w.sum()
            out[i, sl] = sum(w[j] * v[j, sl] for j in range(n))
    return out @ wo


def test_mhsa_matches_loop_oracle(rng):
    x = rng.normal(size=(2, 5, 8))
    ws = [rng.normal(size=(8, 8)) for _ in range(4)]
    out, weights = mhsa(Tensor(x), *map(Tensor, ws), heads=4, return_weights=True)
    for b in range(2):
        np.testing.assert_allclose(out.data[b], naive_mhsa(x[b], *ws, 4), atol=1e-8)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(weights.data >= 0)


def test_mhsa_degenerate_sequences(rng):
    ws = [Tensor(rng.normal(size=(8, 8))) for _ in range(4)]
    single = rng.normal(size=(1, 1, 8))
    out, weights = mhsa(Tensor(single), *ws, heads=2, return_weights=True)
    np.testing.assert_array_equal(weights.data, 1.0)
    np.testing.assert_allclose(out.data, single @ ws[2].data @ ws[3].data, atol=1e-12)
    twin = np.repeat(single, 2, axis=1)
    _, weights = mhsa(Tensor(twin), *ws, heads=2, return_weights=True)
    np.testing.assert_allclose(weights.data, 0.5, atol=1e-12)
    with pytest.raises(ValueError):
        mhsa(Tensor(single), *ws, heads=3)


def test_vit_zeroed_layers_return_class_token(rng):
    vit = ViTBranch(rng, image_size=32, patch_size=8, dim=16, heads=4, layers=2)
    for layer in vit.layers:
        layer.attn.wo.data[:] = 0.0
        layer.fc2.weight.data[:] = 0.0
        layer.fc2.bias.data[:] = 0.0
    out = vit(Tensor(rng.random((3, 1, 32, 32)))).data
    np.testing.assert_allclose(out, np.broadcast_to(vit.cls.data + vit.pos.data[0], (3, 16)), atol=1e-12)


def test_vit_patch_permutation_equivariance(rng):
    vit = ViTBranch(rng, image_size=32, patch_size=8, dim=16, heads=4, layers=2)
    x = rng.random((2, 1, 32, 32))
    before = vit(Tensor(x)).data
    perm = rng.permutation(16)
    blocks = x.reshape(2, 1, 4, 8, 4, 8).transpose(0, 1, 2, 4, 3, 5).reshape(2, 1, 16, 8, 8)
    shuffled = blocks[:, :, perm].reshape(2, 1, 4, 4, 8, 8).transpose(0, 1, 2, 4, 3, 5).reshape(2, 1, 32, 32)
    vit.pos.data[1:] = vit.pos.data[1:][perm]
    np.testing.assert_allclose(vit(Tensor(shuffled)).data, before, atol=1e-10)


def test_fuse_channels_and_slicing(rng):
    f_vit, f_eff = rng.normal(size=(2, 32)), rng.normal(size=(2, 96, 2, 2))
    fused = fuse(Tensor(f_vit), Tensor(f_eff)).data
    assert fused.shape == (2, 128, 2, 2)
    np.testing.assert_array_equal(fused[:, 32:], f_eff)
    np.testing.assert_array_equal(fused[:, :32], np.broadcast_to(f_vit[:, :, None, None], (2, 32, 2, 2)))
    zero = fuse(Tensor(np.zeros((2, 32))), Tensor(f_eff)).data
    np.testing.assert_array_equal(zero[:, :32], 0.0)
    assert fuse(Tensor(np.zeros((1, 768))), Tensor(np.zeros((1, 1408, 7, 7)))).shape[1] == 2176
    with pytest.raises(ValueError):
        fuse(Tensor(np.zeros((3, 32))), Tensor(f_eff))


def test_backbone_gradients_two_sample_batch(rng):
    branch = ConvBranch(rng, stem_channels=4, stage_channels=(4, 4, 8, 8), out_channels=8)
    vit = ViTBranch(rng, image_size=32, patch_size=8, dim=8, heads=2, layers=1)
    x = Tensor(rng.random((2, 1, 32, 32)))
    r = rng.normal(size=(2, 16, 1, 1))
    f = lambda: (fuse(vit(x), branch(x)) * r).sum()
    params = branch.parameters() + vit.parameters()
    # composite tolerance; gradients below 1e-6 sit near the central-difference
    # roundoff floor (eps |f| / h ~ 1e-11), so they are compared at that scale
    assert grad_check(f, params, max_coords=6, rng=np.random.default_rng(0), floor=1e-6) < 1e-4

    # a correct VJP leaves only O(h^2) truncation: shrinking h 10x cuts the error ~100x
    vit.cls.grad = None
    f().backward()
    flat, exact = vit.cls.data.reshape(-1), vit.cls.grad.reshape(-1)[0]
    errors = []
    for h in (1e-3, 1e-4):
        original = flat[0]
        with T.no_grad():
            flat[0] = original + h
            up = f().item()
            flat[0] = original - h
            down = f().item()
        flat[0] = original
        errors.append(abs((up - down) / (2 * h) - exact))
    assert errors[1] < errors[0] / 50


# attention ------------------------------------------------------------------------------

def test_se_mask_half_when_second_layer_zero(rng):
    f = rng.normal(size=(2, 8, 3, 3))
    w1, b1 = Tensor(rng.normal(size=(2, 8))), Tensor(rng.normal(size=2))
    out, mask = se_channel(Tensor(f), w1, b1, Tensor(np.zeros((8, 2))), Tensor(np.zeros(8)))
    np.testing.assert_array_equal(mask.data, 0.5)
    np.testing.assert_allclose(out.data, f / 2)
    _, mask = se_channel(Tensor(np.zeros((1, 8, 3, 3))), w1, Tensor(np.zeros(2)), Tensor(rng.normal(size=(8, 2))),
                         Tensor(np.zeros(8)))
    np.testing.assert_array_equal(mask.data, 0.5)


def test_se_hand_case_c4_r2():
    f = np.arange(16.0).reshape(1, 4, 2, 2) / 10.0
    w1 = np.array([[1.0, -1.0, 0.5, 0.0], [0.2, 0.3, -0.4, 1.0]])
    w2 = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 2.0], [0.5, 0.5]])
    gap = [f[0, c].mean() for c in range(4)]
    hidden = [max(0.0, sum(w1[h, c] * gap[c] for c in range(4))) for h in range(2)]
    expected = [sig(sum(w2[c, h] * hidden[h] for h in range(2))) for c in range(4)]
    out, mask = se_channel(Tensor(f), Tensor(w1), Tensor(np.zeros(2)), Tensor(w2), Tensor(np.zeros(4)))
    np.testing.assert_allclose(mask.data[0], expected, atol=1e-10)
    np.testing.assert_allclose(out.data[0], f[0] * np.array(expected)[:, None, None], atol=1e-10)
    with pytest.raises(ValueError):
        SEChannel(6, np.random.default_rng(0), reduction=4)


def test_spatial_zero_kernel_and_symmetric_constant_case(rng):
    f = Tensor(rng.normal(size=(2, 5, 2, 2)))
    _, mask = cbam_spatial(f, Tensor(np.zeros((1, 2, 7, 7))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(mask.data, 0.5)
    # zero padding breaks translation symmetry at the borders, so a constant input
    # gives a constant mask only for kernels sharing the grid's flip symmetry
    k = rng.normal(size=(1, 2, 7, 7))
    k = k + k[..., ::-1, :] + k[..., :, ::-1] + k[..., ::-1, ::-1]
    _, mask = cbam_spatial(Tensor(np.full((1, 3, 2, 2), 0.7)), Tensor(k), Tensor(np.zeros(1)))
    np.testing.assert_allclose(mask.data, mask.data[0, 0, 0], atol=1e-12)


def test_spatial_hand_case_2x2():
    f = np.array([[[[1.0, 2.0], [3.0, 4.0]], [[0.0, -2.0], [1.0, 0.5]]]])           # [1, 2, 2, 2]
    k = np.zeros((1, 2, 7, 7))
    k[0, 0, 3, 3], k[0, 0, 3, 4], k[0, 1, 4, 3], k[0, 1, 2, 2] = 0.5, -0.25, 0.3, 0.1
    bias = 0.05
    mx, mean = f[0].max(axis=0), f[0].mean(axis=0)
    planes = [mx, mean]
    expected = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            s = bias
            for c in range(2):
                for u in range(7):
                    for v in range(7):
                        y, x = i + u - 3, j + v - 3
                        if 0 <= y < 2 and 0 <= x < 2:
                            s += k[0, c, u, v] * planes[c][y, x]
            expected[i, j] = sig(s)
    out, mask = cbam_spatial(Tensor(f), Tensor(k), Tensor(np.array([bias])))
    np.testing.assert_allclose(mask.data[0], expected, atol=1e-10)
    np.testing.assert_allclose(out.data, f * expected, atol=1e-10)


def test_cascade_multiplicative_form_and_order(rng):
    att = CascadedAttention(32, rng, reduction=16)
    f = rng.normal(size=(3, 32, 2, 2))
    refined, mc, ms = att(Tensor(f))
    recomposed = f * mc.data[:, :, None, None] * ms.data[:, None, :, :]
    assert np.abs(refined.data - recomposed).max() < 1e-9
    assert np.all((mc.data > 0) & (mc.data < 1)) and np.all((ms.data > 0) & (ms.data < 1))
    # the spatial gate sees the SE-gated map, not the raw one
    _, ms_raw = att.spatial(Tensor(f))
    assert not np.allclose(ms_raw.data, ms.data)


def test_cascade_saturated_masks_pass_input_through(rng):
    att = CascadedAttention(16, rng, reduction=4)
    att.se.b2.data[:] = 30.0
    att.spatial.bias.data[:] = 30.0
    att.spatial.weight.data[:] = 0.0
    f = rng.normal(size=(2, 16, 2, 2))
    np.testing.assert_allclose(att(Tensor(f))[0].data, f, atol=1e-3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 5.0))
def test_cascade_masks_open_interval_and_contraction(seed, scale):
    rng = np.random.default_rng(seed)
    att = CascadedAttention(16, rng, reduction=4)
    f = rng.normal(size=(2, 16, 2, 3)) * scale
    refined, mc, ms = att(Tensor(f))
    assert np.all((mc.data > 0) & (mc.data < 1)) and np.all((ms.data > 0) & (ms.data < 1))
    assert np.all(np.abs(refined.data) <= np.abs(f))


def test_attention_gradients(rng):
    att = CascadedAttention(16, rng, reduction=4)
    f = Tensor(rng.normal(size=(2, 16, 2, 2)), requires_grad=True)
    r = rng.normal(size=(2, 16, 2, 2))
    assert grad_check(lambda: (att(f)[0] * r).sum(), [f] + att.parameters(), max_coords=12,
                      rng=np.random.default_rng(0)) < 1e-5


# head -------------------------------------------------------------------------------------

def test_pool_refined(rng):
    np.testing.assert_array_equal(pool_refined(Tensor(np.full((2, 3, 4, 4), 1.5))).data, 1.5)
    x = rng.normal(size=(2, 3, 1, 1))
    np.testing.assert_array_equal(pool_refined(Tensor(x)).data, x[:, :, 0, 0])
    x = rng.normal(size=(2, 3, 2, 2))
    np.testing.assert_allclose(pool_refined(Tensor(x)).data, x.mean(axis=(2, 3)), rtol=1e-15)


def test_head_mhsa_batch_as_sequence(rng):
    head = ResidualHead(8, rng, heads=4, hidden=(16, 8))
    one = rng.normal(size=(1, 8))
    a = head.attn
    np.testing.assert_allclose(head.head_mhsa(Tensor(one)).data, one @ a.wv.data @ a.wo.data, atol=1e-12)
    twin = np.repeat(one, 2, axis=0)
    out = head.head_mhsa(Tensor(twin)).data
    np.testing.assert_allclose(out[0], out[1], atol=1e-14)
    three = rng.normal(size=(3, 8))
    np.testing.assert_allclose(head.head_mhsa(Tensor(three)).data,
                               naive_mhsa(three, a.wq.data, a.wk.data, a.wv.data, a.wo.data, 4), atol=1e-8)


def test_residual_norm(rng):
    head = ResidualHead(8, rng, heads=4, hidden=(16, 8))
    head.norm.bias.data[:] = rng.normal(size=8)
    f = rng.normal(size=(3, 8))
    np.testing.assert_allclose(head.residual_norm(Tensor(f), Tensor(-f)).data,
                               np.broadcast_to(head.norm.bias.data, (3, 8)), atol=1e-12)
    g = rng.normal(size=(3, 8))
    np.testing.assert_array_equal(head.residual_norm(Tensor(f), Tensor(g)).data,
                                  T.layer_norm(Tensor(f + g), head.norm.gain, head.norm.bias).data)
    fa, ga = Tensor(f, requires_grad=True), Tensor(g, requires_grad=True)
    r = rng.normal(size=(3, 8))
    assert grad_check(lambda: (head.residual_norm(fa, ga) * r).sum(), [fa, ga]) < 1e-5
    head.residual_norm(fa, ga).sum().backward()
    assert fa.grad is not None and ga.grad is not None
    with pytest.raises(ValueError):
        head.residual_norm(Tensor(f), Tensor(g[:2]))


def test_multiscale_projection_modes(rng):
    head = ResidualHead(8, rng, heads=4, hidden=(16, 8))
    f = Tensor(rng.normal(size=(4, 8)))
    head.eval()
    a, b = head.multiscale_project(f).data, head.multiscale_project(f).data
    np.testing.assert_array_equal(a, b)
    assert ResidualHead(2176, rng, hidden=(256, 128)).w1.shape == (2176, 256)
    head.train()
    with pytest.raises(ValueError):
        head.multiscale_project(Tensor(rng.normal(size=(1, 8))), rng)


def test_dropout_monte_carlo_expectation(rng):
    x = Tensor(np.abs(rng.normal(size=(1, 64))) + 0.5)
    draws = np.stack([T.dropout(x, 0.5, rng, True).data for _ in range(10_000)])
    rel = np.abs(draws.mean(axis=0) - x.data) / x.data
    assert rel.mean() < 0.02


def test_task_logits(rng):
    head = ResidualHead(8, rng, heads=4, hidden=(16, 8))
    h2 = Tensor(rng.normal(size=(3, 8)))
    for t in (1, 2, 3):
        head.wc[t - 1].data[:] = 0.0
        head.bc[t - 1].data[:] = 0.0
        np.testing.assert_array_equal(head.task_logits(h2, t).data, 0.5)
    head.bc[0].data[:] = [2.0, 0.0]
    np.testing.assert_allclose(head.task_logits(h2, 1).data[0], [0.8808, 0.1192], atol=5e-5)
    with pytest.raises(ValueError):
        head.task_logits(h2, 4)


def test_three_heads_share_h2_but_differ(rng):
    head = ResidualHead(8, rng, heads=4, hidden=(16, 8)).eval()
    probs = head(Tensor(rng.normal(size=(4, 8))))
    assert len(probs) == 3
    assert not np.allclose(probs[0].data, probs[1].data)


# full model ----------------------------------------------------------------------------------

def test_model_forward_rows_and_determinism(rng):
    model = CSASN(ModelConfig(), seed=3)
    x = rng.random((2, 1, 64, 64))
    probs = model_forward(model, x, training=False)
    assert [p.shape for p in probs] == [(2, 2)] * 3
    for p in probs:
        np.testing.assert_allclose(p.data.sum(axis=1), 1.0, atol=1e-6)
    again = model_forward(model, x, training=False)
    for p, q in zip(probs, again):
        np.testing.assert_array_equal(p.data, q.data)
    twin = CSASN(ModelConfig(), seed=3)
    np.testing.assert_array_equal(model_forward(twin, x)[0].data, probs[0].data)


@pytest.mark.parametrize("variant,dim", [("full", 128), ("no_attention", 128), ("no_conv", 32), ("no_vit", 96)])
def test_variant_feature_dims(rng, variant, dim):
    model = CSASN(ModelConfig(variant=variant), seed=0).eval()
    out = model(rng.random((2, 64, 64)))
    assert out.features.shape == (2, dim)
    assert (out.channel_mask is None) == (variant == "no_attention")
    assert (model.conv is None) == (variant == "no_conv")
    assert (model.vit is None) == (variant == "no_vit")


def test_parameter_names_unique_and_stable():
    names = [n for n, _ in CSASN(ModelConfig(), seed=0).named_parameters()]
    assert len(names) == len(set(names))
    assert names == [n for n, _ in CSASN(ModelConfig(), seed=1).named_parameters()]
    assert set(VARIANTS) == {"full", "no_attention", "no_conv", "no_vit"}
    with pytest.raises(ValueError):
        ModelConfig(variant="bogus")


def test_model_config_round_trip():
    cfg = ModelConfig(variant="no_vit", dropout=0.3, scaling=ScalingConfig(phi=1.0))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
