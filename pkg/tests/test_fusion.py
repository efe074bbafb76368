import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gemfuse.fusion import (
    ExchangeConfig,
    GeminiOptions,
    RelationParams,
    attention_trace,
    cross_attention,
    geminifusion_forward,
    init_exchange_config,
    init_fusion_params,
    init_relation_params,
    pixelwise_cross_attention,
    relation_score,
    score_predict,
    token_exchange,
)
from gemfuse.tensor import ConfigError, DomainError, NumericError, Rng

from oracles import (
    loop_cross_attention_direction,
    loop_geminifusion_direction,
    loop_relation_mlp_softmax,
    loop_score_predict,
)

ALL_OFF = GeminiOptions(noise=False, relation=False, self_entry=False)


def make_params(seed=0, dim=4, heads=2, variant="mlp2_softmax"):
    return init_fusion_params(Rng(seed), dim, heads, relation_variant=variant)


# ---------------------------------------------------------------------------
# score predictor


def test_score_predict_zero_map():
    cfg = ExchangeConfig(0.02, np.zeros((3, 3)), np.zeros(3), np.zeros((3, 1)), np.zeros(1))
    s = score_predict(np.random.default_rng(0).normal(size=(5, 3)), cfg)
    assert np.array_equal(s, np.full(5, 0.5))


def test_score_predict_saturation():
    cfg = ExchangeConfig(0.02, np.zeros((3, 3)), np.zeros(3), np.zeros((3, 1)),
                         np.array([20.0]))
    s = score_predict(np.ones((4, 3)), cfg)
    assert np.all(s > 0.999)


def test_score_predict_matches_loop_oracle():
    rng = Rng(11)
    cfg = init_exchange_config(rng, 3)
    x = rng.normal((2, 3), 0.0, 1.0)
    expected = loop_score_predict(x.tolist(), cfg.w1.tolist(), cfg.b1.tolist(),
                                  cfg.w2.tolist(), cfg.b2.tolist())
    assert np.allclose(score_predict(x, cfg), expected, atol=1e-14)


def test_score_predict_bounds():
    rng = Rng(3)
    cfg = init_exchange_config(rng, 4)
    s = score_predict(rng.normal((20, 4), 0.0, 3.0), cfg)
    assert np.all((s > 0) & (s < 1))


# ---------------------------------------------------------------------------
# token exchange


def test_exchange_theta_zero_is_identity():
    rng = Rng(5)
    x1 = rng.normal((6, 3), 0.0, 1.0)
    x2 = rng.normal((6, 3), 0.0, 1.0)
    s = rng.uniform((6,), 0.01, 0.99)
    y1, y2, masks = token_exchange(x1, x2, s, s, 0.0)
    assert np.array_equal(y1, x1) and np.array_equal(y2, x2)
    assert masks.rates() == (0.0, 0.0)


def test_exchange_theta_one_is_full_swap():
    rng = Rng(6)
    x1 = rng.normal((6, 3), 0.0, 1.0)
    x2 = rng.normal((6, 3), 0.0, 1.0)
    s = rng.uniform((6,), 0.01, 0.99)
    y1, y2, masks = token_exchange(x1, x2, s, s, 1.0)
    assert np.array_equal(y1, x2) and np.array_equal(y2, x1)
    assert masks.rates() == (1.0, 1.0)


def test_exchange_indicator_example():
    x1 = np.array([[1.0, 2.0], [3.0, 4.0]])
    x2 = np.array([[5.0, 6.0], [7.0, 8.0]])
    y1, y2, _ = token_exchange(x1, x2, np.array([0.5, 0.01]), np.array([0.9, 0.9]), 0.02)
    assert np.array_equal(y1, [[1.0, 2.0], [7.0, 8.0]])
    assert np.array_equal(y2, [[5.0, 6.0], [7.0, 8.0]])


def test_exchange_theta_domain_error():
    x = np.ones((2, 2))
    s = np.full(2, 0.5)
    for theta in (-0.1, 1.5):
        with pytest.raises(DomainError):
            token_exchange(x, x, s, s, theta)


# ---------------------------------------------------------------------------
# full cross-attention


def test_cross_attention_residual_identity():
    p = make_params(dim=4, heads=2)
    p.w_value[:] = 0.0
    rng = Rng(2)
    x1 = rng.normal((5, 4), 0.0, 1.0)
    x2 = rng.normal((5, 4), 0.0, 1.0)
    y1, y2, _ = cross_attention(x1, x2, p)
    assert np.array_equal(y1, x1) and np.array_equal(y2, x2)


def test_cross_attention_single_token_equals_pixelwise():
    p = make_params(seed=4, dim=6, heads=3)
    rng = Rng(9)
    x1 = rng.normal((1, 6), 0.0, 1.0)
    x2 = rng.normal((1, 6), 0.0, 1.0)
    yc1, yc2, _ = cross_attention(x1, x2, p)
    yp1, yp2, _ = pixelwise_cross_attention(x1, x2, p)
    assert np.max(np.abs(yc1 - yp1)) < 1e-12
    assert np.max(np.abs(yc2 - yp2)) < 1e-12


def test_cross_attention_matches_loop_oracle():
    rng = Rng(13)
    p = make_params(seed=13, dim=2, heads=1)
    x1 = rng.normal((2, 2), 0.0, 1.0)
    x2 = rng.normal((2, 2), 0.0, 1.0)
    y1, y2, _ = cross_attention(x1, x2, p)
    e1 = loop_cross_attention_direction(x1.tolist(), x2.tolist(), p.w_query.tolist(),
                                        p.w_key.tolist(), p.w_value.tolist(), 1)
    e2 = loop_cross_attention_direction(x2.tolist(), x1.tolist(), p.w_query.tolist(),
                                        p.w_key.tolist(), p.w_value.tolist(), 1)
    assert np.allclose(y1, e1, atol=1e-13)
    assert np.allclose(y2, e2, atol=1e-13)


def test_cross_attention_multihead_matches_loop_oracle():
    rng = Rng(14)
    p = make_params(seed=14, dim=4, heads=2)
    x1 = rng.normal((3, 4), 0.0, 1.0)
    x2 = rng.normal((3, 4), 0.0, 1.0)
    y1, _, _ = cross_attention(x1, x2, p)
    e1 = loop_cross_attention_direction(x1.tolist(), x2.tolist(), p.w_query.tolist(),
                                        p.w_key.tolist(), p.w_value.tolist(), 2)
    assert np.allclose(y1, e1, atol=1e-13)


def test_cross_attention_permutation_equivariance():
    rng = Rng(15)
    p = make_params(seed=15, dim=4, heads=2)
    x1 = rng.normal((7, 4), 0.0, 1.0)
    x2 = rng.normal((7, 4), 0.0, 1.0)
    perm = Rng(16).permutation(7)
    y1, y2, _ = cross_attention(x1, x2, p)
    z1, z2, _ = cross_attention(x1[perm], x2[perm], p)
    assert np.max(np.abs(z1 - y1[perm])) < 1e-12
    assert np.max(np.abs(z2 - y2[perm])) < 1e-12


# ---------------------------------------------------------------------------
# pixel-wise cross-attention


def test_pixelwise_scalar_example():
    p = make_params(dim=1, heads=1)
    p.w_query[:] = 1.0
    p.w_key[:] = 1.0
    p.w_value[:] = 1.0
    y1, _, _ = pixelwise_cross_attention(np.array([[0.3]]), np.array([[0.5]]), p)
    assert abs(y1[0, 0] - 0.8) < 1e-15


def test_pixelwise_residual_identity():
    p = make_params(seed=21, dim=4, heads=2)
    p.w_value[:] = 0.0
    rng = Rng(22)
    x1 = rng.normal((5, 4), 0.0, 1.0)
    x2 = rng.normal((5, 4), 0.0, 1.0)
    y1, y2, _ = pixelwise_cross_attention(x1, x2, p)
    assert np.array_equal(y1, x1) and np.array_equal(y2, x2)


def test_pixelwise_closed_form():
    rng = Rng(23)
    p = make_params(seed=23, dim=4, heads=2)
    x1 = rng.normal((5, 4), 0.0, 1.0)
    x2 = rng.normal((5, 4), 0.0, 1.0)
    y1, y2, _ = pixelwise_cross_attention(x1, x2, p)
    assert np.max(np.abs(y1 - (x2 @ p.w_value + x1))) < 1e-12
    assert np.max(np.abs(y2 - (x1 @ p.w_value + x2))) < 1e-12


def test_pixelwise_permutation_equivariance_bit_exact():
    rng = Rng(24)
    p = make_params(seed=24, dim=4, heads=2)
    x1 = rng.normal((6, 4), 0.0, 1.0)
    x2 = rng.normal((6, 4), 0.0, 1.0)
    perm = Rng(25).permutation(6)
    y1, y2, _ = pixelwise_cross_attention(x1, x2, p)
    z1, z2, _ = pixelwise_cross_attention(x1[perm], x2[perm], p)
    assert np.array_equal(z1, y1[perm]) and np.array_equal(z2, y2[perm])


# ---------------------------------------------------------------------------
# relation discriminator


def test_relation_zero_weights_gives_half():
    d = 3
    params = RelationParams("mlp2_softmax", np.zeros((2 * d, d)), np.zeros(d),
                            np.zeros((d, 2)), np.zeros(2))
    rng = Rng(31)
    s = relation_score(rng.normal((5, d), 0.0, 1.0), rng.normal((5, d), 0.0, 1.0), params)
    assert np.array_equal(s, np.full(5, 0.5))


def test_relation_tied_logits_give_half():
    # both output columns identical -> logits (L, L) -> softmax symmetry
    d = 3
    rng = Rng(32)
    w1 = rng.normal((2 * d, d), 0.0, 0.5)
    w2col = rng.normal((d, 1), 0.0, 0.5)
    params = RelationParams("mlp2_softmax", w1, rng.normal((d,), 0.0, 0.1),
                            np.hstack([w2col, w2col]), np.zeros(2))
    s = relation_score(rng.normal((4, d), 0.0, 1.0), rng.normal((4, d), 0.0, 1.0), params)
    assert np.max(np.abs(s - 0.5)) < 1e-15


def test_relation_matches_loop_oracle():
    rng = Rng(33)
    params = init_relation_params(rng, 2, "mlp2_softmax")
    x1 = rng.normal((1, 2), 0.0, 1.0)
    x2 = rng.normal((1, 2), 0.0, 1.0)
    expected = loop_relation_mlp_softmax(x1.tolist(), x2.tolist(), params.w1.tolist(),
                                         params.b1.tolist(), params.w2.tolist(),
                                         params.b2.tolist())
    assert np.allclose(relation_score(x1, x2, params), expected, atol=1e-14)


@pytest.mark.parametrize("variant", ["mlp2_softmax", "mlp2_sigmoid", "conv1x1_softmax"])
def test_relation_score_in_open_unit_interval(variant):
    rng = Rng(34)
    params = init_relation_params(rng, 4, variant)
    s = relation_score(rng.normal((10, 4), 0.0, 2.0), rng.normal((10, 4), 0.0, 2.0), params)
    assert np.all((s > 0) & (s < 1))


def test_relation_unknown_variant_rejected():
    with pytest.raises(ConfigError):
        RelationParams("mlp3_softmax", np.zeros((4, 2)), np.zeros(2))


# ---------------------------------------------------------------------------
# geminifusion


def test_gemini_all_off_equals_pixelwise():
    rng = Rng(41)
    p = make_params(seed=41, dim=4, heads=2)
    x1 = rng.normal((5, 4), 0.0, 1.0)
    x2 = rng.normal((5, 4), 0.0, 1.0)
    g1, g2, _ = geminifusion_forward(x1, x2, p, ALL_OFF)
    p1, p2, _ = pixelwise_cross_attention(x1, x2, p)
    assert np.max(np.abs(g1 - p1)) < 1e-12
    assert np.max(np.abs(g2 - p2)) < 1e-12


def test_gemini_residual_identity():
    p = make_params(seed=42, dim=4, heads=2)
    p.w_value[:] = 0.0
    p.noise_value[:] = 0.0
    rng = Rng(43)
    x1 = rng.normal((5, 4), 0.0, 1.0)
    x2 = rng.normal((5, 4), 0.0, 1.0)
    y1, y2, _ = geminifusion_forward(x1, x2, p)
    assert np.array_equal(y1, x1) and np.array_equal(y2, x2)


def test_gemini_modality_swap_symmetry_bit_exact():
    rng = Rng(44)
    p = make_params(seed=44, dim=6, heads=3)
    x1 = rng.normal((4, 6), 0.0, 1.0)
    x2 = rng.normal((4, 6), 0.0, 1.0)
    y1, y2, _ = geminifusion_forward(x1, x2, p)
    z1, z2, _ = geminifusion_forward(x2, x1, p)
    assert np.array_equal(z1, y2) and np.array_equal(z2, y1)


def test_gemini_matches_loop_oracle():
    rng = Rng(45)
    p = make_params(seed=45, dim=4, heads=2)
    x1 = rng.normal((3, 4), 0.0, 1.0)
    x2 = rng.normal((3, 4), 0.0, 1.0)
    y1, y2, _ = geminifusion_forward(x1, x2, p)
    phi1 = relation_score(x1, x2, p.relation)
    phi2 = relation_score(x2, x1, p.relation)
    e1 = loop_geminifusion_direction(x1.tolist(), x2.tolist(), p.w_query.tolist(),
                                     p.w_key.tolist(), p.w_value.tolist(), phi1.tolist(),
                                     p.noise_key.tolist(), p.noise_value.tolist(), 2)
    e2 = loop_geminifusion_direction(x2.tolist(), x1.tolist(), p.w_query.tolist(),
                                     p.w_key.tolist(), p.w_value.tolist(), phi2.tolist(),
                                     p.noise_key.tolist(), p.noise_value.tolist(), 2)
    assert np.allclose(y1, e1, atol=1e-12)
    assert np.allclose(y2, e2, atol=1e-12)


def test_gemini_attention_weights_are_distributions():
    rng = Rng(46)
    p = make_params(seed=46, dim=4, heads=2)
    x1 = rng.normal((5, 4), 0.0, 1.0)
    x2 = rng.normal((5, 4), 0.0, 1.0)
    _, _, cache = geminifusion_forward(x1, x2, p)
    for w in (cache.dir1.weights, cache.dir2.weights):
        assert np.all(w >= 0)
        assert np.max(np.abs(w.sum(axis=-1) - 1.0)) < 1e-12


def test_gemini_permutation_equivariance_bit_exact():
    rng = Rng(47)
    p = make_params(seed=47, dim=4, heads=2)
    x1 = rng.normal((6, 4), 0.0, 1.0)
    x2 = rng.normal((6, 4), 0.0, 1.0)
    perm = Rng(48).permutation(6)
    y1, y2, _ = geminifusion_forward(x1, x2, p)
    z1, z2, _ = geminifusion_forward(x1[perm], x2[perm], p)
    assert np.array_equal(z1, y1[perm]) and np.array_equal(z2, y2[perm])


def test_gemini_nan_input_names_stage():
    p = make_params(seed=49, dim=4, heads=2)
    x1 = np.ones((3, 4))
    x1[1, 2] = np.nan
    with pytest.raises((NumericError, DomainError)):
        geminifusion_forward(x1, np.ones((3, 4)), p)


def test_degeneracy_chain():
    # Eq-6-with-everything-off == pixel-wise == closed form, within 1e-12
    rng = Rng(50)
    p = make_params(seed=50, dim=6, heads=2)
    x1 = rng.normal((4, 6), 0.0, 1.0)
    x2 = rng.normal((4, 6), 0.0, 1.0)
    g1, g2, _ = geminifusion_forward(x1, x2, p, ALL_OFF)
    p1, p2, _ = pixelwise_cross_attention(x1, x2, p)
    closed1 = x2 @ p.w_value + x1
    closed2 = x1 @ p.w_value + x2
    for a, b in ((g1, p1), (g2, p2), (g1, closed1), (g2, closed2), (p1, closed1), (p2, closed2)):
        assert np.max(np.abs(a - b)) < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gemini_weights_distribution_property(seed):
    rng = Rng(seed)
    p = init_fusion_params(rng, 4, 2)
    x1 = rng.normal((3, 4), 0.0, 2.0)
    x2 = rng.normal((3, 4), 0.0, 2.0)
    _, _, cache = geminifusion_forward(x1, x2, p)
    w = cache.dir1.weights
    assert np.all(w >= 0) and np.max(np.abs(w.sum(axis=-1) - 1.0)) < 1e-12


# ---------------------------------------------------------------------------
# attention trace


def test_trace_symmetric_inputs_give_half():
    rng = Rng(61)
    layers = [init_fusion_params(rng, 4, 2) for _ in range(3)]
    x = rng.normal((5, 4), 0.0, 1.0)
    opts = GeminiOptions(noise=False, relation=False, self_entry=True)
    stats = attention_trace(x, x.copy(), layers, opts)
    for s in stats:
        assert s.self_weight == pytest.approx(0.5, abs=1e-12)
        assert s.cross_weight == pytest.approx(0.5, abs=1e-12)


def test_trace_no_self_entry_gives_cross_one():
    rng = Rng(62)
    layers = [init_fusion_params(rng, 4, 2) for _ in range(2)]
    x1 = rng.normal((5, 4), 0.0, 1.0)
    x2 = rng.normal((5, 4), 0.0, 1.0)
    opts = GeminiOptions(noise=False, relation=True, self_entry=False)
    stats = attention_trace(x1, x2, layers, opts)
    for s in stats:
        assert s.cross_weight == 1.0
        assert s.self_weight == 0.0


def test_trace_matches_recomputation():
    rng = Rng(63)
    layers = [init_fusion_params(rng, 4, 2) for _ in range(4)]
    x1 = rng.normal((5, 4), 0.0, 1.0)
    x2 = rng.normal((5, 4), 0.0, 1.0)
    stats = attention_trace(x1, x2, layers)
    a, b = x1, x2
    for idx, p in enumerate(layers):
        y1, y2, cache = geminifusion_forward(a, b, p)
        w = np.concatenate([cache.dir1.weights, cache.dir2.weights], axis=0)
        assert stats[idx].self_weight == pytest.approx(float(w[..., 0].mean()), abs=0)
        assert stats[idx].cross_weight == pytest.approx(float(w[..., 1].mean()), abs=0)
        a, b = y1, y2


def test_trace_empty_layers_rejected():
    with pytest.raises(ConfigError):
        attention_trace(np.ones((2, 4)), np.ones((2, 4)), [])


def test_trace_weights_sum_to_one():
    rng = Rng(64)
    layers = [init_fusion_params(rng, 4, 2) for _ in range(4)]
    stats = attention_trace(rng.normal((5, 4), 0.0, 1.0), rng.normal((5, 4), 0.0, 1.0), layers)
    for s in stats:
        assert 0.0 <= s.self_weight <= 1.0
        assert 0.0 <= s.cross_weight <= 1.0
        assert abs(s.self_weight + s.cross_weight - 1.0) < 1e-12
