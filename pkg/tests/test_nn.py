import numpy as np
import pytest

from lightfield.autodiff import Tape
from lightfield.nn import (
    AdamState,
    MlpSpec,
    TrainingError,
    adam_step,
    init_params,
    layer_norm,
    mlp_forward,
    positional_encode,
    unpack_params,
)


def reference_forward(spec, params, inputs):
    """Naive per-element forward: explicit loops, no vectorized ops."""
    layers = unpack_params(spec, np.asarray(params, dtype=np.float64))
    batch = []
    for row in np.asarray(inputs, dtype=np.float64):
        x = list(row)
        if spec.positional_encoding_frequencies:
            enc = list(x)
            for k in range(spec.positional_encoding_frequencies):
                for fn in (np.sin, np.cos):
                    enc.extend(fn(2.0**k * np.pi * v) for v in x)
            x = enc
        for i, (W, b, gain, ln_bias) in enumerate(layers):
            z = [sum(x[r] * W[r, c] for r in range(W.shape[0])) + b[c]
                 for c in range(W.shape[1])]
            if i < spec.num_layers - 1:
                if spec.layer_norm:
                    mean = sum(z) / len(z)
                    var = sum((v - mean) ** 2 for v in z) / len(z)
                    inv = 1.0 / np.sqrt(var + 1e-5)
                    z = [(v - mean) * inv * gain[c] + ln_bias[c]
                         for c, v in enumerate(z)]
                x = [max(0.0, v) for v in z]
            else:
                x = z
        batch.append(x)
    return np.array(batch)


class TestSpec:
    def test_param_count_is_exact(self):
        for spec in [
            MlpSpec(6, 256, 3, 6),
            MlpSpec(6, 32, 3, 2, layer_norm=False),
            MlpSpec(4, 16, 2, 3, positional_encoding_frequencies=2),
        ]:
            params = init_params(spec, np.random.default_rng(0))
            assert params.shape == (spec.param_count(),)
            unpack_params(spec, params)  # raises if slices do not cover exactly

    def test_rejects_too_few_layers(self):
        with pytest.raises(ValueError):
            MlpSpec(6, 16, 3, 1)

    def test_rejects_wrong_length_params(self):
        spec = MlpSpec(6, 8, 3, 2)
        with pytest.raises(ValueError):
            unpack_params(spec, np.zeros(spec.param_count() + 1, dtype=np.float32))

    def test_encoded_input_dim(self):
        spec = MlpSpec(6, 8, 3, 2, positional_encoding_frequencies=4)
        assert spec.encoded_input_dim == 6 * (1 + 2 * 4)


class TestForward:
    def test_zero_params_give_zero_output(self):
        spec = MlpSpec(6, 16, 3, 3)
        x = np.random.default_rng(0).normal(size=(4, 6)).astype(np.float32)
        out = mlp_forward(spec, np.zeros(spec.param_count(), dtype=np.float32), x)
        np.testing.assert_array_equal(out, np.zeros((4, 3), dtype=np.float32))

    def test_identical_rows_identical_outputs(self):
        spec = MlpSpec(6, 16, 3, 3)
        params = init_params(spec, np.random.default_rng(1))
        row = np.random.default_rng(2).normal(size=6).astype(np.float32)
        out = mlp_forward(spec, params, np.stack([row, row]))
        np.testing.assert_array_equal(out[0], out[1])

    def test_matches_naive_reference(self):
        rng = np.random.default_rng(3)
        for spec in [
            MlpSpec(3, 7, 2, 3),
            MlpSpec(2, 5, 3, 2, layer_norm=False),
            MlpSpec(3, 6, 2, 4, positional_encoding_frequencies=2),
        ]:
            params = init_params(spec, rng)
            x = rng.normal(size=(5, spec.input_dim)).astype(np.float32)
            fast = mlp_forward(spec, params, x)
            ref = reference_forward(spec, params, x)
            assert np.abs(fast - ref).max() < 1e-5

    def test_shape_mismatch_raises(self):
        spec = MlpSpec(6, 8, 3, 2)
        params = init_params(spec, np.random.default_rng(0))
        with pytest.raises(ValueError):
            mlp_forward(spec, params, np.zeros((4, 5), dtype=np.float32))

    def test_tape_forward_matches_plain(self):
        rng = np.random.default_rng(4)
        spec = MlpSpec(6, 12, 3, 3, positional_encoding_frequencies=1)
        params = init_params(spec, rng)
        x = rng.normal(size=(9, 6)).astype(np.float32)
        plain = mlp_forward(spec, params, x)
        recorded = mlp_forward(spec, params, x, Tape())
        assert np.abs(plain - recorded.value).max() < 2e-6


class TestGradients:
    def loss_and_grads(self, spec, params, x):
        tape = Tape()
        pv, xv = tape.leaf(params), tape.leaf(x)
        out = mlp_forward(spec, pv, xv, tape)
        loss = tape.mean(tape.mul(out, out))
        tape.backward(loss)
        return float(loss.value), pv.grad, xv.grad

    def test_param_and_input_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(5)
        for trial in range(8):
            spec = MlpSpec(
                input_dim=int(rng.integers(2, 5)),
                hidden_dim=int(rng.integers(4, 10)),
                output_dim=int(rng.integers(1, 4)),
                num_layers=int(rng.integers(2, 5)),
                layer_norm=bool(rng.integers(0, 2)),
                positional_encoding_frequencies=int(rng.integers(0, 3)),
            )
            params = init_params(spec, rng, dtype=np.float64)
            x = rng.normal(size=(3, spec.input_dim))
            _, gp, gx = self.loss_and_grads(spec, params, x)

            def f(pp, xx):
                return float(np.mean(mlp_forward(spec, pp, xx) ** 2))

            h = 1e-5
            idx = rng.choice(params.size, size=min(25, params.size), replace=False)
            for i in idx:
                pp = params.copy()
                pp[i] += h
                fp = f(pp, x)
                pp[i] -= 2 * h
                fm = f(pp, x)
                num = (fp - fm) / (2 * h)
                if abs(num) > 1e-6:
                    assert abs(num - gp[i]) / abs(num) < 1e-4, (trial, i)
            for i in range(x.size):
                xx = x.copy()
                xx.flat[i] += h
                fp = f(params, xx)
                xx.flat[i] -= 2 * h
                fm = f(params, xx)
                num = (fp - fm) / (2 * h)
                if abs(num) > 1e-6:
                    assert abs(num - gx.flat[i]) / abs(num) < 1e-4, (trial, i)


class TestLayerNormAndEncoding:
    def test_constant_input_returns_bias(self):
        gain = np.full(8, 2.0)
        bias = np.linspace(0, 1, 8)
        out = layer_norm(np.full(8, 3.3), gain, bias)
        np.testing.assert_allclose(out, bias, atol=1e-12)

    def test_standardized_input_passthrough(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=32)
        x = (x - x.mean()) / x.std()
        out = layer_norm(x, np.ones(32), np.zeros(32))
        np.testing.assert_allclose(out, x, atol=1e-4)

    def test_encode_identity_when_zero_freqs(self):
        x = np.arange(5.0)
        assert positional_encode(x, 0) is x

    def test_encode_zero_input(self):
        out = positional_encode(np.zeros(3), 2)
        np.testing.assert_allclose(out[:3], 0)
        np.testing.assert_allclose(out[3:6], 0)  # sin
        np.testing.assert_allclose(out[6:9], 1)  # cos
        np.testing.assert_allclose(out[9:12], 0)
        np.testing.assert_allclose(out[12:15], 1)

    def test_encode_length(self):
        for f in range(4):
            assert positional_encode(np.ones(6), f).shape == (6 * (1 + 2 * f),)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        params = np.ones(5, dtype=np.float32)
        state = AdamState.like(params)
        adam_step(params, np.zeros(5), state, lr=1e-2)
        np.testing.assert_array_equal(params, np.ones(5, dtype=np.float32))

    def test_first_step_magnitude_is_lr(self):
        params = np.zeros(4)
        state = AdamState.like(params)
        adam_step(params, np.array([1.0, -2.0, 0.5, 10.0]), state, lr=1e-3)
        np.testing.assert_allclose(np.abs(params), 1e-3, rtol=1e-6)

    def test_quadratic_bowl_converges_to_argmin(self):
        rng = np.random.default_rng(7)
        target = rng.uniform(-1, 1, size=8)
        params = np.zeros(8)
        state = AdamState.like(params)
        for _ in range(5000):
            adam_step(params, 2 * (params - target), state, lr=1e-2)
        assert np.abs(params - target).max() < 1e-3

    def test_nonfinite_gradient_raises_with_diagnostic(self):
        params = np.zeros(3)
        state = AdamState.like(params)
        with pytest.raises(TrainingError, match="index 1"):
            adam_step(params, np.array([0.0, np.nan, 1.0]), state)
