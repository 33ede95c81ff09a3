import numpy as np
import pytest

from malconv import tensor as T
from malconv.exceptions import InputError, NumericalError
from malconv.model import (
    DESK_CONFIG, FULL_CONFIG, ModelConfig, backward, check_params, forward, init_params,
    pad_or_truncate, param_count, param_shapes, predict_proba, zero_params,
)

from _gradchecks import check_full_model


def test_full_preset_shape_arithmetic():
    assert FULL_CONFIG.n_windows == (2_097_152 - 500) // 500 + 1 == 4194
    assert FULL_CONFIG.conv_spec.effective_width == 500


def test_param_count_full_scale():
    expected = 257 * 8 + 2 * (8 * 500 * 128 + 128) + (128 * 128 + 128) + (128 * 2 + 2)
    assert param_count(FULL_CONFIG) == expected == 1_043_082


def test_param_count_desk_regression():
    assert param_count(DESK_CONFIG) == 5462
    assert DESK_CONFIG.n_windows == 512


def test_param_count_sums_shapes_with_batchnorm():
    config = ModelConfig(use_batchnorm=True)
    assert param_count(config) == 5462 + 4 * config.filters
    assert param_count(config) == sum(int(np.prod(s)) for s in param_shapes(config).values())


@pytest.mark.parametrize("kwargs", [
    dict(max_len=16), dict(fc_hidden=0), dict(decov_lambda=-1.0), dict(vocab=256), dict(classes=3),
    dict(stride=0),
])
def test_model_config_validation(kwargs):
    with pytest.raises(InputError):
        ModelConfig(**kwargs)


def test_config_dict_round_trip():
    assert ModelConfig.from_dict(FULL_CONFIG.to_dict()) == FULL_CONFIG
    with pytest.raises(InputError):
        ModelConfig.from_dict({"bogus": 1})


def test_pad_or_truncate():
    tokens, n = pad_or_truncate(b"\x00\xff\x10", 6)
    np.testing.assert_array_equal(tokens, [0, 255, 16, 256, 256, 256])
    assert n == 3
    tokens, n = pad_or_truncate(bytes(range(10)), 4)
    np.testing.assert_array_equal(tokens, [0, 1, 2, 3])
    assert n == 10
    with pytest.raises(InputError):
        pad_or_truncate(b"", 4)


def test_init_is_deterministic_and_shaped(tiny_config):
    a, b = init_params(tiny_config, 3), init_params(tiny_config, 3)
    check_params(a, tiny_config)
    for k in a.weights:
        np.testing.assert_array_equal(a.weights[k], b.weights[k])
    assert not np.array_equal(a.weights["embedding"], init_params(tiny_config, 4).weights["embedding"])


def test_check_params_rejects_wrong_shapes(tiny_config):
    params = init_params(tiny_config)
    params.weights["fc_bias"] = np.zeros(99, np.float32)
    with pytest.raises(InputError):
        check_params(params, tiny_config)
    del params.weights["fc_bias"]
    with pytest.raises(InputError):
        check_params(params, tiny_config)


def test_zero_params_predict_half(tiny_config):
    p = predict_proba(zero_params(tiny_config), tiny_config, np.zeros((3, 32), np.int16))
    np.testing.assert_array_equal(p, 0.5)


def test_predict_proba_is_forward_then_softmax(tiny_config):
    rng = np.random.default_rng(0)
    params = init_params(tiny_config, 1, np.float64)
    tokens = rng.integers(0, 257, (4, 32))
    logits = forward(params, tiny_config, tokens).logits
    expected = np.exp(logits[:, 1]) / np.exp(logits).sum(1)
    np.testing.assert_allclose(predict_proba(params, tiny_config, tokens), expected, rtol=1e-12)


def test_forward_trace_invariants(tiny_config):
    rng = np.random.default_rng(1)
    params = init_params(tiny_config, 2)
    trace = forward(params, tiny_config, rng.integers(0, 257, (3, 32)))
    t_out = tiny_config.n_windows
    assert trace.gated.shape == (3, t_out, tiny_config.filters)
    assert ((trace.argmax >= 0) & (trace.argmax < t_out)).all()
    picked = np.take_along_axis(trace.gated, trace.argmax[:, None, :], axis=1)[:, 0]
    np.testing.assert_array_equal(trace.pooled, picked)


def test_forward_batch_matches_single(tiny_config):
    rng = np.random.default_rng(2)
    params = init_params(tiny_config, 0, np.float64)
    tokens = rng.integers(0, 257, (4, 32))
    batched = forward(params, tiny_config, tokens).logits
    for i in range(4):
        np.testing.assert_allclose(forward(params, tiny_config, tokens[i]).logits[0], batched[i], rtol=1e-12)


def test_forward_rejects_wrong_length(tiny_config):
    with pytest.raises(InputError):
        forward(init_params(tiny_config), tiny_config, np.zeros((1, 31), np.int16))


def test_forward_flags_nonfinite(tiny_config):
    params = init_params(tiny_config)
    params.weights["conv_gate_bias"][0] = np.inf
    with pytest.raises(NumericalError, match="conv_gate"):
        forward(params, tiny_config, np.zeros(32, np.int16))


def test_backward_zero_upstream_gives_zero_grads(tiny_config):
    params = init_params(tiny_config, 0, np.float64)
    trace = forward(params, tiny_config, np.arange(32) % 257)
    grads = backward(params, tiny_config, trace, np.zeros((1, 2)))
    assert set(grads) == set(params.weights)
    for name, g in grads.items():
        assert g.shape == params.weights[name].shape
        assert not g.any()


def test_padding_row_gradient_only_when_padding_present(tiny_config):
    params = init_params(tiny_config, 0, np.float64)
    full = np.arange(32) % 256
    grads = backward(params, tiny_config, forward(params, tiny_config, full), np.array([[1.0, -1.0]]))
    assert not grads["embedding"][T.PAD_TOKEN].any()
    padded = full.copy()
    padded[8:] = T.PAD_TOKEN
    trace = forward(params, tiny_config, padded)
    grads = backward(params, tiny_config, trace, np.array([[1.0, -1.0]]))
    # gradient reaches the padding row only through windows the max-pool picked
    assert grads["embedding"][T.PAD_TOKEN].any() == bool((trace.argmax >= 2).any())


def test_batchnorm_backward_needs_training_trace(tiny_config):
    config = ModelConfig(**{**tiny_config.to_dict(), "use_batchnorm": True})
    params = init_params(config)
    trace = forward(params, config, np.zeros(32, np.int16))
    with pytest.raises(InputError):
        backward(params, config, trace, np.zeros((1, 2)))


def test_batchnorm_training_updates_running_stats(tiny_config):
    config = ModelConfig(**{**tiny_config.to_dict(), "use_batchnorm": True})
    params = init_params(config, 0, np.float64)
    before = params.running["bn_linear_mean"].copy()
    forward(params, config, np.random.default_rng(0).integers(0, 256, (2, 32)), training=True)
    assert not np.array_equal(before, params.running["bn_linear_mean"])


@pytest.mark.parametrize("use_batchnorm", [False, True])
def test_full_model_gradient_tiny(tiny_config, use_batchnorm):
    config = ModelConfig(**{**tiny_config.to_dict(), "use_batchnorm": use_batchnorm})
    assert max(check_full_model(config, seed, n_probe=10) for seed in range(4)) < 1e-3


def test_float32_forward_stays_float32(tiny_config):
    trace = forward(init_params(tiny_config), tiny_config, np.zeros(32, np.int16))
    assert trace.logits.dtype == np.float32
