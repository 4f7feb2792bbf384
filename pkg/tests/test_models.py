import numpy as np
import pytest

from vamod.errors import ConfigError, ModelFileError, ShapeError
from vamod.models import (
    MlpConfig,
    WaveNetConfig,
    count_parameters,
    flatten_params,
    init_mlp_params,
    init_wavenet_params,
    load_model,
    mlp_backward_signal,
    mlp_config,
    mlp_forward,
    mlp_forward_signal,
    mlp_params_from_flat,
    receptive_field,
    save_model,
    wavenet1_config,
    wavenet2_config,
    wavenet_backward,
    wavenet_forward,
    wavenet_params_from_flat,
    wavenet_process_signal,
)
from vamod.nncore import finite_difference_check

TINY = WaveNetConfig(num_layers=2, channels=2, filter_width=3, dilations=(1, 2))


def tiny_case(seed=0, length=24, config=TINY):
    rng = np.random.default_rng(seed)
    params = init_wavenet_params(config, seed)
    x = rng.uniform(-1, 1, (1, length))
    c = rng.uniform(0, 1, (config.conditioning_dim, length))
    return params, config, x, c


class TestReceptiveField:
    def test_default_is_2046(self):
        assert receptive_field(WaveNetConfig()) == 2046
        assert receptive_field(wavenet1_config()) == 2046
        assert receptive_field(wavenet2_config()) == 2046

    def test_width_one_no_memory(self):
        cfg = WaveNetConfig(num_layers=3, filter_width=1, dilations=(1, 5, 9))
        assert receptive_field(cfg) == 0

    def test_small_pattern(self):
        assert receptive_field(WaveNetConfig(num_layers=2, dilations=(1, 2))) == 6


class TestConfigValidation:
    def test_dilation_count_mismatch(self):
        with pytest.raises(ConfigError):
            WaveNetConfig(num_layers=3, dilations=(1, 2))

    def test_bad_dilation(self):
        with pytest.raises(ConfigError):
            WaveNetConfig(num_layers=2, dilations=(1, 0))

    def test_bad_skip_mode(self):
        with pytest.raises(ConfigError):
            WaveNetConfig(skip_mode="mean")

    def test_mlp_dims(self):
        with pytest.raises(ConfigError):
            MlpConfig(hidden_layers=0)


class TestWaveNetForward:
    def test_zero_params_give_output_bias(self):
        params, config, x, c = tiny_case(1)
        zero = wavenet_params_from_flat(config, np.zeros(count_parameters(params)))
        zero.output.bias[:] = 0.25
        y, _ = wavenet_forward(zero, config, x, c)
        np.testing.assert_allclose(y, 0.25, atol=1e-15)

    def test_residual_identity_when_res_kernels_zero(self):
        params, config, x, c = tiny_case(2)
        for layer in params.layers:
            layer.residual.taps[:] = 0.0
            layer.residual.bias[:] = 0.0
        from vamod.models import _check_xc, _wavenet_cache

        x3, c3, _ = _check_xc(x, c, config)
        cache = _wavenet_cache(params, config, x3, c3)
        # input to layer 0 must equal input to every later layer
        np.testing.assert_array_equal(cache["xs"][0], cache["xs"][-1])

    def test_causality_probes(self):
        params, config, x, c = tiny_case(3, length=64)
        y, _ = wavenet_forward(params, config, x, c)
        rng = np.random.default_rng(99)
        for _ in range(20):
            n = int(rng.integers(0, 63))
            m = int(rng.integers(n + 1, 65))  # strictly future sample (or none)
            if m >= 64:
                continue
            x2 = x.copy()
            x2[0, m] += rng.uniform(0.5, 1.5)
            y2, _ = wavenet_forward(params, config, x2, c)
            np.testing.assert_array_equal(y[0, : m], y2[0, : m])

    def test_conditioning_invariance_when_v_zero(self):
        params, config, x, _ = tiny_case(4)
        for layer in params.layers:
            layer.cond_filter.taps[:] = 0.0
            layer.cond_gate.taps[:] = 0.0
        y1, _ = wavenet_forward(params, config, x, np.zeros((1, x.shape[1])))
        y2, _ = wavenet_forward(params, config, x, np.full((1, x.shape[1]), 0.9))
        np.testing.assert_array_equal(y1, y2)

    def test_conditioning_changes_output(self):
        params, config, x, _ = tiny_case(5)
        y1, _ = wavenet_forward(params, config, x, np.zeros((1, x.shape[1])))
        y2, _ = wavenet_forward(params, config, x, np.ones((1, x.shape[1])))
        assert np.abs(y1 - y2).max() > 1e-6

    def test_deterministic(self):
        params, config, x, c = tiny_case(6)
        y1, _ = wavenet_forward(params, config, x, c)
        y2, _ = wavenet_forward(params, config, x, c)
        np.testing.assert_array_equal(y1, y2)

    def test_receptive_field_boundary(self):
        config = WaveNetConfig(num_layers=3, channels=2, dilations=(1, 2, 4), sample_rate_hz=44100)
        n_past = receptive_field(config)  # 14
        length = n_past + 10
        params = init_wavenet_params(config, 7)
        rng = np.random.default_rng(8)
        x = rng.uniform(-1, 1, (1, length))
        c = np.full((1, length), 0.5)
        y, _ = wavenet_forward(params, config, x, c)
        n = n_past + 5
        # one sample beyond the receptive field: no effect
        x_far = x.copy()
        x_far[0, n - n_past - 1] += 1.0
        y_far, _ = wavenet_forward(params, config, x_far, c)
        assert y_far[0, n] == y[0, n]
        # the oldest sample inside the receptive field: effect
        x_near = x.copy()
        x_near[0, n - n_past] += 1.0
        y_near, _ = wavenet_forward(params, config, x_near, c)
        assert y_near[0, n] != y[0, n]

    def test_layer_outputs_returned(self):
        params, config, x, c = tiny_case(9)
        _, zs = wavenet_forward(params, config, x, c)
        assert len(zs) == config.num_layers
        assert all(z.shape == (config.channels, x.shape[1]) for z in zs)

    def test_length_mismatch(self):
        params, config, x, c = tiny_case(10)
        with pytest.raises(ShapeError):
            wavenet_forward(params, config, x, c[:, :-1])

    def test_process_signal_matches_forward(self):
        params, config, x, c = tiny_case(11, length=50)
        y, _ = wavenet_forward(params, config, x, np.full_like(c, 0.3))
        fast = wavenet_process_signal(params, config, x[0], 0.3)
        np.testing.assert_allclose(fast, y[0], atol=1e-12)

    def test_sum_skip_mode(self):
        config = WaveNetConfig(num_layers=2, channels=3, dilations=(1, 2), skip_mode="sum")
        params = init_wavenet_params(config, 12)
        rng = np.random.default_rng(13)
        x = rng.uniform(-1, 1, (1, 30))
        c = np.full((1, 30), 0.5)
        y, _ = wavenet_forward(params, config, x, c)
        fast = wavenet_process_signal(params, config, x[0], 0.5)
        np.testing.assert_allclose(fast, y[0], atol=1e-12)


class TestWaveNetBackward:
    def test_finite_difference_small(self):
        params, config, x, c = tiny_case(20, length=64)
        template = params
        n_params = count_parameters(params)
        rng = np.random.default_rng(21)
        weights = rng.standard_normal((1, 64))

        def loss_and_grad(flat):
            p = wavenet_params_from_flat(config, flat)
            y, _ = wavenet_forward(p, config, x, c)
            grads = wavenet_backward(p, config, x, c, weights)
            return float((y * weights).sum()), flatten_params(grads)

        err = finite_difference_check(loss_and_grad, flatten_params(template), 1e-5)
        assert err <= 1e-4

    def test_zero_upstream(self):
        params, config, x, c = tiny_case(22)
        grads = wavenet_backward(params, config, x, c, np.zeros((1, x.shape[1])))
        assert not flatten_params(grads).any()

    def test_saturated_gate_kills_cond_gradient(self):
        params, config, x, c = tiny_case(23)
        params.layers[0].gate.bias[:] = -40.0  # gate sigmoid ~ 0 everywhere
        grads = wavenet_backward(params, config, x, c, np.ones((1, x.shape[1])))
        assert np.abs(grads.layers[0].cond_filter.taps).max() <= 1e-12

    def test_grad_accumulates_over_batch(self):
        params, config, x, c = tiny_case(24)
        xb = np.stack([x, 2 * x])
        cb = np.stack([c, c])
        up = np.ones((2, 1, x.shape[1]))
        gb = flatten_params(wavenet_backward(params, config, xb, cb, up))
        g1 = flatten_params(wavenet_backward(params, config, x, c, up[0]))
        g2 = flatten_params(wavenet_backward(params, config, 2 * x, c, up[1]))
        np.testing.assert_allclose(gb, g1 + g2, rtol=1e-10, atol=1e-12)


class TestMlp:
    def test_zero_params_output_bias(self):
        config = MlpConfig(input_size=4, hidden_layers=2, hidden_units=3)
        params = init_mlp_params(config, 0)
        zero = mlp_params_from_flat(config, np.zeros(count_parameters(params)))
        zero.output_bias[:] = -0.5
        assert mlp_forward(zero, config, np.ones(4), 0.7) == -0.5

    def test_scalar_toy(self):
        config = MlpConfig(input_size=1, hidden_layers=1, hidden_units=1)
        params = init_mlp_params(config, 0)
        params.layers[0].weights[:] = 1.0
        params.layers[0].cond[:] = 1.0
        params.layers[0].bias[:] = 0.0
        params.output_weights[:] = 1.0
        params.output_bias[:] = 0.0
        out = mlp_forward(params, config, np.array([0.5]), 0.5)
        assert out == pytest.approx(np.tanh(1.0), abs=1e-12)
        assert out == pytest.approx(0.761594, abs=1e-6)

    def test_zero_control_drops_conditioning(self):
        config = MlpConfig(input_size=3, hidden_layers=2, hidden_units=4)
        params = init_mlp_params(config, 3)
        window = np.array([0.1, -0.2, 0.3])
        base = mlp_forward(params, config, window, 0.0)
        params.layers[0].cond[:] *= 10.0
        assert mlp_forward(params, config, window, 0.0) == base

    def test_signal_matches_per_window(self):
        config = MlpConfig(input_size=5, hidden_layers=2, hidden_units=4)
        params = init_mlp_params(config, 4)
        rng = np.random.default_rng(5)
        x = rng.uniform(-1, 1, 12)
        ys = mlp_forward_signal(params, config, x, 0.4)
        padded = np.concatenate([np.zeros(4), x])
        for n in range(12):
            assert ys[n] == pytest.approx(
                mlp_forward(params, config, padded[n : n + 5], 0.4), abs=1e-12
            )

    def test_wrong_window_length(self):
        config = MlpConfig(input_size=5, hidden_layers=1, hidden_units=2)
        params = init_mlp_params(config, 6)
        with pytest.raises(ShapeError):
            mlp_forward(params, config, np.zeros(4), 0.0)

    def test_finite_difference(self):
        config = MlpConfig(input_size=8, hidden_layers=2, hidden_units=4)
        params = init_mlp_params(config, 7)
        rng = np.random.default_rng(8)
        x = rng.uniform(-1, 1, 64)
        weights = rng.standard_normal(64)

        def loss_and_grad(flat):
            p = mlp_params_from_flat(config, flat)
            y = mlp_forward_signal(p, config, x, 0.6)
            g = mlp_backward_signal(p, config, x, 0.6, weights)
            return float((y * weights).sum()), flatten_params(g)

        err = finite_difference_check(loss_and_grad, flatten_params(params), 1e-5)
        assert err <= 1e-4

    def test_chunked_signal_identical(self):
        config = MlpConfig(input_size=6, hidden_layers=2, hidden_units=4)
        params = init_mlp_params(config, 9)
        x = np.random.default_rng(10).uniform(-1, 1, 100)
        a = mlp_forward_signal(params, config, x, 0.2, chunk=7)
        b = mlp_forward_signal(params, config, x, 0.2, chunk=100)
        np.testing.assert_allclose(a, b, atol=1e-15)


class TestParameterCounts:
    def test_wavenet1_band(self):
        n = count_parameters(init_wavenet_params(wavenet1_config(), 0))
        assert 400 <= n <= 800

    def test_wavenet2_band(self):
        n = count_parameters(init_wavenet_params(wavenet2_config(), 0))
        assert 20_000 <= n <= 40_000

    def test_mlp_band(self):
        n = count_parameters(init_mlp_params(mlp_config(), 0))
        assert 30_000 <= n <= 44_000

    def test_flatten_round_trip(self):
        config = TINY
        params = init_wavenet_params(config, 1)
        flat = flatten_params(params)
        back = flatten_params(wavenet_params_from_flat(config, flat))
        np.testing.assert_array_equal(flat, back)


class TestModelFiles:
    def test_wavenet_round_trip_bit_exact(self, tmp_path):
        config = wavenet2_config()
        params = init_wavenet_params(config, 42)
        p = tmp_path / "m.vamf"
        save_model(params, config, p)
        loaded, loaded_config = load_model(p)
        assert loaded_config == config
        np.testing.assert_array_equal(flatten_params(loaded), flatten_params(params))

    def test_byte_exact_re_save(self, tmp_path):
        config = TINY
        params = init_wavenet_params(config, 1)
        p1, p2 = tmp_path / "a.vamf", tmp_path / "b.vamf"
        save_model(params, config, p1)
        loaded, cfg = load_model(p1)
        save_model(loaded, cfg, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_mlp_round_trip(self, tmp_path):
        config = MlpConfig(input_size=16, hidden_layers=2, hidden_units=4)
        params = init_mlp_params(config, 3)
        p = tmp_path / "m.vamf"
        save_model(params, config, p)
        loaded, loaded_config = load_model(p)
        assert loaded_config == config
        np.testing.assert_array_equal(flatten_params(loaded), flatten_params(params))

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "m.vamf"
        p.write_bytes(b"XXXX" + b"\x00" * 64)
        with pytest.raises(ModelFileError):
            load_model(p)

    def test_bad_version(self, tmp_path):
        config = TINY
        params = init_wavenet_params(config, 1)
        p = tmp_path / "m.vamf"
        save_model(params, config, p)
        raw = bytearray(p.read_bytes())
        raw[4] = 9
        p.write_bytes(bytes(raw))
        with pytest.raises(ModelFileError):
            load_model(p)

    def test_truncated_blob(self, tmp_path):
        config = TINY
        params = init_wavenet_params(config, 1)
        p = tmp_path / "m.vamf"
        save_model(params, config, p)
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(ModelFileError):
            load_model(p)

    def test_oversized_blob(self, tmp_path):
        config = TINY
        params = init_wavenet_params(config, 1)
        p = tmp_path / "m.vamf"
        save_model(params, config, p)
        p.write_bytes(p.read_bytes() + b"\x00" * 4)
        with pytest.raises(ModelFileError):
            load_model(p)
