import math

import numpy as np
import pytest

from anyd import autodiff as ad
from anyd.autodiff import grad_check, zero_gradients
from anyd.geoattn import (build_tokens, cross_attention_heads,
                          geo_forward, head_reduce, init_embedding_table,
                          init_geoattn_params, lookup_rows,
                          region_embed_lookup, reweight_channels)


def make_params(channels=4, dim=6, heads=2, seed=0):
    return init_geoattn_params(channels, dim, heads,
                               np.random.default_rng(seed))


def make_table(regions=3, channels=4, seed=1):
    names = [f"city{i}" for i in range(regions)]
    return init_embedding_table(channels, names, np.random.default_rng(seed))


def zero_params(params):
    for p in params.parameters():
        p.value[...] = 0.0
    return params


def test_lookup_selects_row():
    table = make_table(regions=3)
    out = region_embed_lookup([0.0, 1.0, 0.0], table)
    assert np.array_equal(out.value, table.embedding.value[1])


def test_lookup_single_region():
    table = make_table(regions=1)
    out = region_embed_lookup([1.0], table)
    assert np.array_equal(out.value, table.embedding.value[0])


def test_lookup_rejects_non_one_hot():
    table = make_table(regions=3)
    for bad in ([0.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.5, 0.5, 0.0]):
        with pytest.raises(ValueError):
            region_embed_lookup(bad, table)


def test_lookup_gradient_touches_only_selected_row():
    table = make_table(regions=4)
    zero_gradients([table.embedding])
    out = region_embed_lookup([0.0, 0.0, 1.0, 0.0], table)
    ad.sum_over(ad.mul(out, out)).backward()
    grads = table.embedding.grad
    assert np.any(grads[2] != 0.0)
    assert np.all(grads[[0, 1, 3]] == 0.0)


def test_build_tokens_shapes():
    params = make_params(channels=4, dim=6)
    f = np.random.default_rng(2).uniform(0, 1, (3, 5, 4))
    e = np.random.default_rng(3).standard_normal(4)
    z_img, z_reg = build_tokens(f, e, params)
    assert z_img.shape == (5, 6)
    assert z_reg.shape == (5, 6)


def test_build_tokens_zero_feature_rows_equal_positions():
    params = make_params(channels=4, dim=6)
    params.lift_img_b.value[...] = 0.0
    f = np.zeros((2, 2, 4))
    e = np.zeros(4)
    z_img, _ = build_tokens(f, e, params)
    assert np.array_equal(z_img.value[0], params.region_token.value)
    assert np.array_equal(z_img.value[1:], params.pos_img.value)


def test_build_tokens_spatial_permutation_invariance():
    params = make_params(channels=3, dim=4)
    rng = np.random.default_rng(4)
    f = rng.uniform(0, 1, (2, 3, 3))
    e = rng.standard_normal(3)
    z1, _ = build_tokens(f, e, params)
    shuffled = f.reshape(-1, 3)[rng.permutation(6)].reshape(2, 3, 3)
    z2, _ = build_tokens(shuffled, e, params)
    assert np.abs(z1.value - z2.value).max() <= 1e-12


def test_single_token_attention_passes_value_through():
    params = make_params(channels=4, dim=6, heads=2)
    rng = np.random.default_rng(5)
    z_img = rng.standard_normal((1, 6))
    z_reg = rng.standard_normal((1, 6))
    out = cross_attention_heads(z_img, z_reg, params)
    ln = _ref_layer_norm(z_img, params.ln1_img_gain.value,
                         params.ln1_img_bias.value)
    v = ln @ params.w_v.value
    expected = (v + z_img).reshape(1, 2, 3).transpose(1, 0, 2)
    assert np.abs(out.value - expected).max() <= 1e-12


def test_uniform_attention_averages_values():
    params = make_params(channels=4, dim=6, heads=2)
    params.w_q.value[...] = 0.0
    rng = np.random.default_rng(6)
    z_img = rng.standard_normal((5, 6))
    z_reg = rng.standard_normal((5, 6))
    out = cross_attention_heads(z_img, z_reg, params)
    ln = _ref_layer_norm(z_img, params.ln1_img_gain.value,
                         params.ln1_img_bias.value)
    v = (ln @ params.w_v.value).reshape(5, 2, 3).transpose(1, 0, 2)
    residual = z_img.reshape(5, 2, 3).transpose(1, 0, 2)
    expected = v.mean(axis=1, keepdims=True) + residual
    assert np.abs(out.value - expected).max() <= 1e-12


def _ref_layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def test_two_token_hand_case_matches_reference_attention():
    params = make_params(channels=1, dim=2, heads=1, seed=7)
    rng = np.random.default_rng(8)
    z_img = rng.standard_normal((2, 2))
    z_reg = rng.standard_normal((2, 2))
    out = cross_attention_heads(z_img, z_reg, params)

    ln_i = _ref_layer_norm(z_img, params.ln1_img_gain.value,
                           params.ln1_img_bias.value)
    ln_g = _ref_layer_norm(z_reg, params.ln1_reg_gain.value,
                           params.ln1_reg_bias.value)
    q = ln_g @ params.w_q.value
    k = ln_i @ params.w_k.value
    v = ln_i @ params.w_v.value
    scores = q @ k.T / math.sqrt(2.0)
    exp = np.exp(scores - scores.max(axis=-1, keepdims=True))
    attn = exp / exp.sum(axis=-1, keepdims=True)
    expected = (attn @ v + z_img)[None, :, :]
    assert np.abs(out.value - expected).max() <= 1e-12
    assert np.abs(attn.sum(axis=-1) - 1.0).max() <= 1e-12


def test_head_reduce_zero_mlp_returns_token_means():
    params = make_params(channels=4, dim=6, heads=1, seed=9)
    params.head_w1.value[...] = 0.0
    params.head_b1.value[...] = 0.0
    params.head_w2.value[...] = 0.0
    params.head_b2.value[...] = 0.0
    rng = np.random.default_rng(10)
    z = rng.standard_normal((1, 5, 6))
    z_hat, alpha = head_reduce(z, params)
    assert np.abs(z_hat.value[0] - z[0].mean(axis=-1)).max() <= 1e-12
    assert alpha.value[0] == pytest.approx(z[0, 0].mean(), abs=1e-12)


def test_head_reduce_shape_contract():
    params = make_params(channels=32, dim=6, heads=3, seed=11)
    z = np.random.default_rng(12).standard_normal((3, 33, 2))
    z_hat, alpha = head_reduce(z, params)
    assert z_hat.shape == (3, 33)
    assert alpha.shape == (3,)


def test_head_weight_isolation_in_degenerate_limit():
    # zero attention maps and zero MLP: the head weight is the mean of the
    # region token's slice, untouched by feature tokens
    params = make_params(channels=4, dim=6, heads=2, seed=13)
    params.w_q.value[...] = 0.0
    params.w_k.value[...] = 0.0
    params.w_v.value[...] = 0.0
    params.head_w1.value[...] = 0.0
    params.head_b1.value[...] = 0.0
    params.head_w2.value[...] = 0.0
    params.head_b2.value[...] = 0.0
    table = make_table(regions=2, channels=4)
    rng = np.random.default_rng(14)
    f1 = rng.uniform(0, 1, (3, 3, 4))
    f2 = rng.uniform(0, 1, (3, 3, 4))
    g = [1.0, 0.0]
    first = geo_forward(f1, g, table, params).head_weights.value
    second = geo_forward(f2, g, table, params).head_weights.value
    assert np.array_equal(first, second)


def test_reweight_identity():
    rng = np.random.default_rng(15)
    f = rng.standard_normal((3, 4, 2))
    z_hat = np.ones((1, 3))
    alpha = np.ones(1)
    out = reweight_channels(f, z_hat, alpha)
    assert np.array_equal(out.value, f)


def test_reweight_zero_weights():
    rng = np.random.default_rng(16)
    f = rng.standard_normal((3, 4, 2))
    z_hat = rng.standard_normal((2, 3))
    out = reweight_channels(f, z_hat, np.zeros(2))
    assert np.array_equal(out.value, np.zeros_like(f))


def test_reweight_two_head_hand_case():
    f = np.ones((1, 1, 2))
    z_hat = np.array([[9.0, 1.0, 0.0], [7.0, 0.0, 1.0]])
    alpha = np.array([2.0, -1.0])
    out = reweight_channels(f, z_hat, alpha)
    assert np.array_equal(out.value[0, 0], [2.0, -1.0])


def test_reweight_linear_in_features():
    rng = np.random.default_rng(17)
    f = rng.standard_normal((2, 3, 4))
    z_hat = rng.standard_normal((2, 5))
    alpha = rng.standard_normal(2)
    once = reweight_channels(f, z_hat, alpha).value
    twice = reweight_channels(2.0 * f, z_hat, alpha).value
    assert np.array_equal(twice, 2.0 * once)


def test_geo_forward_conditions_on_region():
    params = make_params(channels=4, dim=6, heads=2, seed=18)
    table = make_table(regions=2, channels=4)
    f = np.random.default_rng(19).uniform(0, 1, (3, 3, 4))
    out_a = geo_forward(f, [1.0, 0.0], table, params)
    out_b = geo_forward(f, [0.0, 1.0], table, params)
    assert not np.array_equal(out_a.adapted.value, out_b.adapted.value)


def test_geo_forward_deterministic():
    params = make_params(channels=3, dim=4, heads=2, seed=20)
    table = make_table(regions=2, channels=3)
    f = np.random.default_rng(21).uniform(0, 1, (2, 2, 3))
    a = geo_forward(f, [0.0, 1.0], table, params)
    b = geo_forward(f, [0.0, 1.0], table, params)
    assert np.array_equal(a.adapted.value, b.adapted.value)
    assert np.array_equal(a.head_weights.value, b.head_weights.value)


def test_geo_forward_full_path_gradient():
    params = make_params(channels=3, dim=4, heads=2, seed=22)
    table = make_table(regions=2, channels=3)
    rng = np.random.default_rng(23)
    f = rng.uniform(0, 1, (2, 2, 3))
    weights = rng.standard_normal((2, 2, 3))
    wa = rng.standard_normal(2)

    def run():
        out = geo_forward(f, [0.0, 1.0], table, params)
        return ad.add(ad.sum_over(ad.mul(out.adapted, weights)),
                      ad.sum_over(ad.mul(out.head_weights, wa)))

    checked = params.parameters() + [table.embedding]
    assert grad_check(run, checked) <= 1e-4


def test_geo_forward_batch_gradient_sparsity():
    params = make_params(channels=3, dim=4, heads=2, seed=24)
    table = make_table(regions=4, channels=3)
    rng = np.random.default_rng(25)
    f = rng.uniform(0, 1, (2, 2, 2, 3))
    regions = np.array([1, 3])
    zero_gradients([table.embedding])
    out = geo_forward(f, regions, table, params)
    ad.sum_over(ad.mul(out.adapted, out.adapted)).backward()
    grads = table.embedding.grad
    assert np.any(grads[1] != 0.0) and np.any(grads[3] != 0.0)
    assert np.all(grads[[0, 2]] == 0.0)


def test_geo_forward_identity_configuration():
    # drive the weight path to z_hat = 1 and head weight = 1: tokens zeroed,
    # value map zeroed, MLP output pinned at 1 by its bias
    params = make_params(channels=4, dim=6, heads=1, seed=26)
    zero_params(params)
    params.head_b2.value[...] = 1.0
    table = make_table(regions=1, channels=4)
    f = np.random.default_rng(27).uniform(0, 1, (3, 3, 4))
    out = geo_forward(f, [1.0], table, params)
    assert np.array_equal(out.head_weights.value, [1.0])
    assert np.array_equal(out.adapted.value, f)

    params.head_b2.value[...] = 0.0
    out = geo_forward(f, [1.0], table, params)
    assert np.array_equal(out.head_weights.value, [0.0])
    assert np.array_equal(out.adapted.value, np.zeros_like(f))


def test_channel_weights_shape():
    params = make_params(channels=4, dim=6, heads=2, seed=28)
    table = make_table(regions=2, channels=4)
    f = np.random.default_rng(29).uniform(0, 1, (3, 3, 4))
    out = geo_forward(f, [1.0, 0.0], table, params)
    assert out.channel_weights.shape == (2, 4)
    batched = geo_forward(f[None], np.array([0]), table, params)
    assert batched.channel_weights.shape == (1, 2, 4)


def test_lookup_rows_batched():
    table = make_table(regions=3, channels=4)
    rows = lookup_rows(table, np.array([2, 0, 2]))
    assert np.array_equal(rows.value, table.embedding.value[[2, 0, 2]])
    with pytest.raises(ValueError):
        lookup_rows(table, np.array([3]))
