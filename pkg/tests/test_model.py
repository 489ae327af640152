import numpy as np
import pytest

from mmfusion.engine import EngineError, RngStream, ShapeError
from helpers import full_model_fd_check
from mmfusion.model import (
    ModelConfig,
    decoder,
    dfm_block,
    forward,
    init_params,
    radar_encoder,
    tof_encoder,
)


@pytest.fixture(scope="module")
def spad_model():
    return init_params(ModelConfig.spad(), RngStream(11))


@pytest.fixture(scope="module")
def tiny_model():
    return init_params(ModelConfig.tiny(), RngStream(11))


def batch(rng, n, cfg):
    h, w = cfg.depth_resolution
    radar = rng.standard_normal((n, 1, 256, 4)).astype(np.float32)
    depth = rng.standard_normal((n, h, w, 1)).astype(np.float32)
    return radar, depth


class TestModelConfig:
    def test_presets(self):
        assert ModelConfig.spad().depth_resolution == (32, 64)
        assert ModelConfig.wide().depth_resolution == (48, 64)
        tiny = ModelConfig.tiny()
        assert tiny.depth_resolution == (8, 16)
        assert tiny.width_divisor == 8

    def test_unsupported_resolution_rejected(self):
        with pytest.raises(ShapeError):
            ModelConfig(depth_resolution=(30, 60))

    def test_bad_divisor_rejected(self):
        with pytest.raises(ShapeError):
            ModelConfig(width_divisor=3)

    def test_channel_schedules(self):
        cfg = ModelConfig.spad()
        assert cfg.radar_channels == (16, 32, 64, 64, 128)
        assert cfg.tof_channels == (32, 64, 64, 128)
        assert cfg.decoder_channels == (128, 64, 32)
        assert cfg.fused_channels == 256
        quarter = ModelConfig.spad(width_divisor=4)
        assert quarter.radar_channels == (4, 8, 16, 16, 32)
        assert quarter.fused_channels == 64

    def test_registry_spot_checks(self):
        shapes = ModelConfig.spad().param_shapes()
        assert shapes["radar.lstm1.kx"] == (7, 4, 64)
        assert shapes["radar.lstm2.kh"] == (7, 32, 128)
        assert shapes["radar.conv3.k"] == (7, 64, 128)
        assert shapes["tof.conv1.k"] == (7, 7, 1, 32)
        assert shapes["tof.conv4.k"] == (7, 7, 64, 128)
        assert shapes["dfm.dw.k"] == (3, 3, 256)
        assert shapes["dfm.dil.k"] == (4, 4, 256, 256)
        assert shapes["dec1.conv.k"] == (3, 3, 256, 128)
        assert shapes["dec3.fee.c2.k"] == (4, 4, 32, 32)
        assert shapes["head.k"] == (1, 1, 32, 1)

    def test_parameter_count_closed_form(self, spad_model):
        radar = (
            (7 * 4 * 64 + 7 * 16 * 64 + 64)
            + (7 * 16 * 128 + 7 * 32 * 128 + 128)
            + (7 * 32 * 64 + 64)
            + (7 * 64 * 64 + 64)
            + (7 * 64 * 128 + 128)
        )
        tof = (
            (7 * 7 * 1 * 32 + 32)
            + (7 * 7 * 32 * 64 + 64)
            + (7 * 7 * 64 * 64 + 64)
            + (7 * 7 * 64 * 128 + 128)
        )
        c = 256
        dfm = (3 * 3 * c + c + 2 * c)  # depthwise
        for k in (1, 3, 1, 4, 4):  # pointwise + chain + dilated
            dfm += k * k * c * c + c + 2 * c
        dfm += 1 * 1 * c * c + c + 2 * c  # the pointwise that follows depthwise
        dec = 0
        cin = 256
        for ch in (128, 64, 32):
            dec += 3 * 3 * cin * ch + ch + 2 * ch
            dec += 1 * 1 * ch * ch + ch + 2 * ch
            dec += 4 * 4 * ch * ch + ch + 2 * ch
            cin = ch
        head = 1 * 1 * 32 * 1 + 1
        assert spad_model.n_params() == radar + tof + dfm + dec + head == 4_503_041


class TestInitParams:
    def test_same_seed_identical(self):
        cfg = ModelConfig.tiny()
        a = init_params(cfg, RngStream(5))
        b = init_params(cfg, RngStream(5))
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_different_seed_differs(self):
        cfg = ModelConfig.tiny()
        a = init_params(cfg, RngStream(5))
        b = init_params(cfg, RngStream(6))
        assert np.abs(a.params["tof.conv1.k"].data - b.params["tof.conv1.k"].data).max() > 1e-4

    @pytest.mark.parametrize("name,fan_in,gain", [
        ("dfm.c4.k", 4 * 4 * 256, 2.0),       # ReLU conv, ~1e6 draws
        ("tof.conv1.k", 7 * 7 * 1, 2.0),
        ("radar.conv1.k", 7 * 32, 2.0),
        ("radar.lstm1.kx", 7 * 4, 1.0),       # gate kernel, no ReLU gain
        ("head.k", 32, 1.0),                  # sigmoid head
    ])
    def test_weight_stddev_tracks_fan_in(self, spad_model, name, fan_in, gain):
        w = spad_model.params[name].data
        want = (gain / fan_in) ** 0.5
        tol = 4.0 * want / w.size ** 0.5 + 0.002
        assert abs(float(w.std()) - want) < tol, (name, float(w.std()), want)
        assert abs(float(w.mean())) < tol

    def test_biases_zero_gammas_one(self, spad_model):
        for name, t in spad_model.params.items():
            if name.endswith(".b") or name.endswith(".bn.beta"):
                assert not t.data.any(), name
            elif name.endswith(".bn.gamma"):
                np.testing.assert_array_equal(t.data, 1.0)

    def test_all_registered_shapes_match_config(self, spad_model):
        shapes = spad_model.config.param_shapes()
        assert set(shapes) == set(spad_model.params)
        for name, t in spad_model.params.items():
            assert t.shape == shapes[name], name
            assert t.requires_grad

    def test_bn_states_cover_bn_layers(self, spad_model):
        layers = spad_model.config.bn_layers()
        assert set(spad_model.bn) == set(layers)
        for name, ch in layers.items():
            assert spad_model.bn[name].mean.shape == (ch,)


class TestShapes:
    @pytest.mark.parametrize("preset,res", [("spad", (32, 64)), ("wide", (48, 64))])
    def test_full_resolution_contract(self, preset, res):
        cfg = getattr(ModelConfig, preset)()
        model = init_params(cfg, RngStream(1))
        rng = np.random.default_rng(2)
        radar, depth = batch(rng, 2, cfg)
        rec = {}
        out = forward(model, radar, depth, mode="infer", record=rec)
        assert out.shape == (2, *res, 1)
        assert rec["radar.latent"] == (2, 4, 4, 128)
        assert rec["tof.latent"] == (2, 4, 4, 128)
        assert rec["fused"] == (2, 4, 4, 256)
        assert rec["dfm.dil"] == (2, 4, 4, 256)
        assert rec["head"] == (2, *res, 1)

    def test_spad_intermediate_registry(self):
        cfg = ModelConfig.spad()
        model = init_params(cfg, RngStream(1))
        rng = np.random.default_rng(2)
        radar, depth = batch(rng, 2, cfg)
        rec = {}
        forward(model, radar, depth, mode="infer", record=rec)
        assert rec == {
            "radar.lstm1": (2, 1, 128, 16),
            "radar.lstm2": (2, 64, 32),
            "radar.conv1": (2, 32, 64),
            "radar.conv2": (2, 16, 64),
            "radar.conv3": (2, 16, 128),
            "radar.latent": (2, 4, 4, 128),
            "tof.conv1": (2, 16, 32, 32),
            "tof.conv2": (2, 8, 16, 64),
            "tof.conv3": (2, 4, 8, 64),
            "tof.conv4": (2, 4, 4, 128),
            "tof.latent": (2, 4, 4, 128),
            "fused": (2, 4, 4, 256),
            "dfm.dw": (2, 4, 4, 256),
            "dfm.pw": (2, 4, 4, 256),
            "dfm.c1": (2, 4, 4, 256),
            "dfm.c2": (2, 4, 4, 256),
            "dfm.c3": (2, 4, 4, 256),
            "dfm.c4": (2, 4, 4, 256),
            "dfm.dil": (2, 4, 4, 256),
            "dec1.up": (2, 8, 8, 256),
            "dec1.fee": (2, 8, 8, 128),
            "dec2.up": (2, 16, 16, 128),
            "dec2.fee": (2, 16, 16, 64),
            "dec3.up": (2, 32, 64, 64),
            "dec3.fee": (2, 32, 64, 32),
            "head": (2, 32, 64, 1),
        }

    def test_wide_encoder_path(self):
        cfg = ModelConfig.wide()
        model = init_params(cfg, RngStream(1))
        rng = np.random.default_rng(2)
        radar, depth = batch(rng, 1, cfg)
        rec = {}
        forward(model, radar, depth, mode="infer", record=rec)
        assert rec["tof.conv1"] == (1, 24, 32, 32)
        assert rec["tof.conv2"] == (1, 12, 16, 64)
        assert rec["tof.conv3"] == (1, 4, 8, 64)
        assert rec["tof.conv4"] == (1, 4, 4, 128)
        assert rec["dec3.up"] == (1, 48, 64, 64)

    def test_wrong_radar_shape_rejected(self, tiny_model):
        with pytest.raises(ShapeError):
            radar_encoder(tiny_model, np.zeros((1, 1, 128, 4), dtype=np.float32))

    def test_wrong_depth_shape_rejected(self, tiny_model):
        with pytest.raises(ShapeError):
            tof_encoder(tiny_model, np.zeros((1, 32, 64, 1), dtype=np.float32))

    def test_dfm_channel_check(self, tiny_model):
        with pytest.raises(ShapeError):
            dfm_block(tiny_model, np.zeros((1, 4, 4, 64), dtype=np.float32))

    def test_decoder_latent_check(self, tiny_model):
        with pytest.raises(ShapeError):
            decoder(tiny_model, np.zeros((1, 8, 8, 32), dtype=np.float32))

    def test_bad_mode_rejected(self, tiny_model):
        rng = np.random.default_rng(0)
        radar, depth = batch(rng, 1, tiny_model.config)
        with pytest.raises(EngineError):
            forward(tiny_model, radar, depth, mode="test")


class TestForwardBehaviour:
    def test_zero_inputs_give_zero_latents_and_half_output(self, tiny_model):
        # zero biases at init make every pre-activation vanish on zero input
        radar = np.zeros((2, 1, 256, 4), dtype=np.float32)
        depth = np.zeros((2, 8, 16, 1), dtype=np.float32)
        assert not radar_encoder(tiny_model, radar).data.any()
        assert not tof_encoder(tiny_model, depth).data.any()
        out = forward(tiny_model, radar, depth, mode="infer")
        np.testing.assert_allclose(out.data, 0.5, atol=1e-6)

    def test_output_strictly_inside_unit_interval(self, tiny_model):
        rng = np.random.default_rng(3)
        radar, depth = batch(rng, 4, tiny_model.config)
        out = forward(tiny_model, radar, depth, mode="infer")
        assert out.data.min() > 0.0
        assert out.data.max() < 1.0

    def test_infer_deterministic(self, tiny_model):
        rng = np.random.default_rng(4)
        radar, depth = batch(rng, 2, tiny_model.config)
        a = forward(tiny_model, radar, depth, mode="infer")
        b = forward(tiny_model, radar, depth, mode="infer")
        np.testing.assert_array_equal(a.data, b.data)

    def test_batch_permutation_equivariance(self, tiny_model):
        rng = np.random.default_rng(5)
        radar, depth = batch(rng, 5, tiny_model.config)
        out = forward(tiny_model, radar, depth, mode="infer").data
        perm = np.array([3, 0, 4, 1, 2])
        out_p = forward(tiny_model, radar[perm], depth[perm], mode="infer").data
        np.testing.assert_allclose(out_p, out[perm], atol=2e-6)

    def test_zeroed_radar_branch_ignores_radar_input(self):
        # train mode so batch norm rescales per layer; at init the signal
        # of an untrained net dies out in infer mode (virgin running stats)
        model = init_params(ModelConfig.tiny(), RngStream(8))
        for name, t in model.params.items():
            if name.startswith("radar."):
                t.data[:] = 0.0
        rng = np.random.default_rng(6)
        radar_a, depth = batch(rng, 2, model.config)
        radar_b = rng.standard_normal(radar_a.shape).astype(np.float32)

        def run(radar, depth):
            return forward(model, radar, depth, mode="train", rng=RngStream(77),
                           update_stats=False).data

        a = run(radar_a, depth)
        b = run(radar_b, depth)
        np.testing.assert_array_equal(a, b)
        # depth perturbations still matter
        c = run(radar_a, depth + 0.5)
        assert np.abs(c - a).max() > 0.0

    def test_train_mode_requires_rng_for_dropout(self, tiny_model):
        rng = np.random.default_rng(7)
        radar, depth = batch(rng, 2, tiny_model.config)
        with pytest.raises(EngineError):
            forward(tiny_model, radar, depth, mode="train")

    def test_train_mode_dropout_is_seeded(self, tiny_model):
        rng = np.random.default_rng(7)
        radar, depth = batch(rng, 2, tiny_model.config)
        a = forward(tiny_model, radar, depth, mode="train", rng=RngStream(1),
                    update_stats=False)
        b = forward(tiny_model, radar, depth, mode="train", rng=RngStream(1),
                    update_stats=False)
        c = forward(tiny_model, radar, depth, mode="train", rng=RngStream(2),
                    update_stats=False)
        np.testing.assert_array_equal(a.data, b.data)
        assert np.abs(a.data - c.data).max() > 0.0


class TestFullModelGradients:
    def test_reduced_width_finite_differences(self):
        worst, n_probes, n_kinks = full_model_fd_check()
        assert worst < 1e-4
        assert n_probes >= 250
        # the refinement path should be the exception, not the rule
        assert n_kinks <= n_probes * 0.15
