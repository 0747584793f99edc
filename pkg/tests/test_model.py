import numpy as np
import pytest

from ppc import autodiff as ad
from ppc import model as m
from ppc.errors import ConfigError, DataError


@pytest.fixture(scope="module")
def prop_model():
    return m.build_pipeline(m.preset("prop", seed=1))


class TestPresets:
    def test_prop_preset_architecture(self):
        cfg = m.preset("prop")
        assert cfg.latent_size == 4 and cfg.gru_units == 8
        assert cfg.n_past == 1 and cfg.n_forecast == 1
        assert cfg.encoder == [{"kind": "dense", "units": 4, "activation": "linear"}]
        assert cfg.forecaster_hidden == [16, 16, 32, 32, 64, 64]
        assert cfg.lambda_recon == 100.0
        assert cfg.schedule["batch_size"] == 64

    def test_sine_preset_architecture(self):
        cfg = m.preset("sine")
        filters = [l["filters"] for l in cfg.encoder if l["kind"] == "conv_block"]
        assert filters == [32, 64]
        assert cfg.latent_size == 16 and cfg.gru_units == 32
        assert cfg.n_past == 5 and cfg.n_forecast == 3
        assert cfg.forecaster_hidden == [64, 128, 256]
        assert cfg.lambda_recon == 1e4

    def test_mrsi_preset_expressible(self):
        model = m.build_pipeline(m.preset("mrsi"))
        assert model.config.segment_shape == (32,)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ConfigError, match="lambda"):
            m.preset("prop").with_overrides(lambda_recon=-1.0)

    def test_inconsistent_encoder_output_rejected(self):
        cfg = m.preset("prop")
        cfg.encoder = [{"kind": "dense", "units": 5, "activation": "linear"}]
        with pytest.raises(ConfigError, match="latent_size"):
            m.build_pipeline(cfg)

    def test_parameter_counts(self):
        # documented exact counts; sine matches the published order (5.8e5
        # at full scale, same order of magnitude here)
        assert m.build_pipeline(m.preset("prop")).count_parameters() == 9133
        sine_count = m.build_pipeline(m.preset("sine")).count_parameters()
        assert sine_count == 251729
        assert 1e5 < sine_count < 1e6

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            m.preset("video")


class TestConfigRoundTrip:
    def test_text_round_trip(self):
        cfg = m.preset("sine", seed=9)
        again = m.PipelineConfig.from_text(cfg.to_text())
        assert again == cfg

    def test_unknown_keys_rejected(self):
        text = m.preset("prop").to_text() + "discount_factor = 0.9\n"
        with pytest.raises(ConfigError, match="unknown"):
            m.PipelineConfig.from_text(text)

    def test_missing_keys_rejected(self):
        with pytest.raises(ConfigError, match="missing"):
            m.PipelineConfig.from_tree({"n_past": 1})


class TestEncode:
    def test_deterministic(self, prop_model):
        x = [np.array([3.0]), np.array([3.0])]
        z = prop_model.encode(x)
        np.testing.assert_array_equal(z[0], z[1])

    def test_empty_input(self, prop_model):
        assert prop_model.encode([]) == []

    def test_dense_oracle(self, prop_model):
        layer = prop_model.encoder.items[0][1]
        x = np.array([2.5], dtype=np.float32)
        z = prop_model.encode([x])[0]
        np.testing.assert_allclose(z, x @ layer.weights.data + layer.bias.data, rtol=1e-6)

    def test_shape_mismatch(self, prop_model):
        with pytest.raises(ad.ShapeError):
            prop_model.encode([np.zeros(3)])


class TestPredict:
    def test_fresh_model_sigma_positive_finite(self, prop_model):
        z = [np.random.default_rng(0).normal(size=4).astype(np.float32)]
        forecasts = prop_model.predict(z)
        assert len(forecasts) == 1
        assert np.all(forecasts[0].sigma > 0)
        assert np.all(np.isfinite(forecasts[0].sigma))

    def test_deterministic(self, prop_model):
        z = [np.random.default_rng(1).normal(size=4).astype(np.float32)]
        a = prop_model.predict(z)
        b = prop_model.predict(z)
        np.testing.assert_array_equal(a[0].z_hat, b[0].z_hat)
        np.testing.assert_array_equal(a[0].sigma, b[0].sigma)

    def test_composed_layer_oracle(self, prop_model):
        # N_p = 1: GRU single step from zeros, then the forecaster stack
        z = np.random.default_rng(2).normal(size=4).astype(np.float32)
        h = prop_model.gru.step(
            ad.Tensor(z[None, :]), prop_model.gru.initial_state(1)
        )
        fc = prop_model.forecasters[0]
        ht = h
        for layer in fc.hidden_layers:
            ht = layer.forward(ht)
        z_hat_ref = fc.head.mean_layer.forward(ht).data[0]
        sigma_ref = np.exp(fc.head.std_layer.preactivation(ht).data[0].astype(np.float64))
        out = prop_model.predict([z])[0]
        np.testing.assert_allclose(out.z_hat, z_hat_ref, rtol=1e-6)
        np.testing.assert_allclose(out.sigma, sigma_ref, rtol=1e-6)

    def test_wrong_count(self, prop_model):
        with pytest.raises(ad.ShapeError):
            prop_model.predict([np.zeros(4), np.zeros(4)])

    def test_wrong_latent_length(self, prop_model):
        with pytest.raises(ad.ShapeError):
            prop_model.predict([np.zeros(5)])

    def test_predict_batch_matches_predict(self, prop_model):
        rng = np.random.default_rng(3)
        zs = rng.normal(size=(4, 1, 4)).astype(np.float32)
        batched = prop_model.predict_batch(zs)
        for b in range(4):
            single = prop_model.predict([zs[b, 0]])[0]
            np.testing.assert_allclose(batched[0][0][b], single.z_hat, rtol=1e-5, atol=1e-7)
            np.testing.assert_allclose(batched[0][1][b], single.sigma, rtol=1e-5)


class TestReconstruct:
    def test_zero_weights_give_bias(self, prop_model):
        model = m.build_pipeline(m.preset("prop", seed=3))
        layer = model.decoder.items[0][1]
        layer.weights.data[...] = 0.0
        layer.bias.data[...] = 0.75
        out = model.reconstruct(np.ones(4, dtype=np.float32))
        np.testing.assert_allclose(out, [0.75])

    def test_shape_round_trip(self, prop_model):
        x = np.array([1.5], dtype=np.float32)
        z = prop_model.encode([x])[0]
        assert prop_model.reconstruct(z).shape == x.shape

    def test_dense_chain_oracle(self, prop_model):
        layer = prop_model.decoder.items[0][1]
        z = np.random.default_rng(4).normal(size=4).astype(np.float32)
        np.testing.assert_allclose(
            prop_model.reconstruct(z), z @ layer.weights.data + layer.bias.data, rtol=1e-6
        )

    def test_sine_decoder_output_shape(self):
        model = m.build_pipeline(m.preset("sine", seed=0))
        out = model.reconstruct(np.zeros(16, dtype=np.float32))
        assert out.shape == (256,)


class TestCheckpoint:
    def test_round_trip_bit_equality(self, tmp_path):
        model = m.build_pipeline(m.preset("prop", seed=5))
        model.train_iterations = 42
        path = tmp_path / "model.ppck"
        m.save_checkpoint(model, str(path))
        loaded = m.load_checkpoint(str(path))
        assert loaded.train_iterations == 42
        assert loaded.config == model.config
        for (n1, t1), (n2, t2) in zip(model.parameters(), loaded.parameters()):
            assert n1 == n2
            assert t1.data.tobytes() == t2.data.tobytes()

    def test_truncated_file_rejected(self, tmp_path):
        model = m.build_pipeline(m.preset("prop", seed=5))
        path = tmp_path / "model.ppck"
        m.save_checkpoint(model, str(path))
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 7])
        with pytest.raises(DataError, match="truncated|missing"):
            m.load_checkpoint(str(path))

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "model.ppck"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(DataError, match="magic"):
            m.load_checkpoint(str(path))

    def test_version_mismatch_rejected(self, tmp_path):
        model = m.build_pipeline(m.preset("prop", seed=5))
        path = tmp_path / "model.ppck"
        m.save_checkpoint(model, str(path))
        blob = bytearray(path.read_bytes())
        blob[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(DataError, match="version"):
            m.load_checkpoint(str(path))

    def test_reload_identical_predictions(self, tmp_path):
        model = m.build_pipeline(m.preset("prop", seed=6))
        path = tmp_path / "model.ppck"
        m.save_checkpoint(model, str(path))
        loaded = m.load_checkpoint(str(path))
        z = [np.random.default_rng(7).normal(size=4).astype(np.float32)]
        a, b = model.predict(z)[0], loaded.predict(z)[0]
        np.testing.assert_array_equal(a.z_hat, b.z_hat)
        np.testing.assert_array_equal(a.sigma, b.sigma)

    def test_sine_checkpoint_keeps_batchnorm_state(self, tmp_path):
        model = m.build_pipeline(m.preset("sine", seed=1))
        block = model.encoder.items[0][1]
        block.running_mean[...] = 0.5
        path = tmp_path / "model.ppck"
        m.save_checkpoint(model, str(path))
        loaded = m.load_checkpoint(str(path))
        np.testing.assert_array_equal(loaded.encoder.items[0][1].running_mean, block.running_mean)
