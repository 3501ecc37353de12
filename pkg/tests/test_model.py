import numpy as np
import pytest

import config
from autodiff import Tape, Tensor4, backward
from errors import ConfigurationError, ValidationError
from madf_layers import BnState, PnParams, madf_conv
from model import (
    ModelConfig,
    RecoveryBlockParams,
    RefineBlockParams,
    build_model,
    dump_first_layer_kernels,
    encode,
    forward_full,
    parameter_shapes,
    recovery_block,
    refine_block,
)


def micro_inputs(rng, n=2, hw=8, mask=None):
    gt = rng.random((n, 3, hw, hw))
    if mask is None:
        mask = (rng.random((n, 1, hw, hw)) > 0.3).astype(np.float64)
    return Tensor4(gt * mask), Tensor4(mask)


class TestModelConfig:
    def test_desk_preset(self):
        cfg = ModelConfig.preset("desk")
        assert cfg.levels == 4
        assert cfg.kernel_sizes == [7, 5, 3, 3]
        assert cfg.image_size == (64, 64)
        assert cfg.decoder_widths == [32, 64, 128, 256, 512]

    def test_full_preset_channel_ladder(self):
        cfg = ModelConfig.preset("full")
        assert cfg.levels == 7
        assert cfg.image_channels == [32, 64, 128, 128, 128, 128, 128]
        assert cfg.decoder_widths[-1] == 512

    def test_preset_overrides(self):
        cfg = ModelConfig.preset("micro", refinements=0, pn_enabled=False)
        assert cfg.refinements == 0
        assert not cfg.pn_enabled

    def test_unknown_preset(self):
        with pytest.raises(ConfigurationError, match="Unknown preset"):
            ModelConfig.preset("huge")

    def test_input_must_divide_by_two_to_the_levels(self, micro_config):
        micro_config.check_input(16, 8)
        with pytest.raises(ConfigurationError, match="divisible"):
            micro_config.check_input(6, 8)

    def test_kernel_larger_than_feature_map(self):
        cfg = ModelConfig(levels=2, kernel_sizes=[9, 3], strides=[2, 2], mask_channels=[2, 2],
                          image_channels=[2, 2], decoder_widths=[2, 2, 2], image_size=(8, 8))
        with pytest.raises(ConfigurationError, match="exceeds"):
            cfg.validate()

    def test_validate_lists_every_problem(self):
        cfg = ModelConfig(levels=2, kernel_sizes=[3], strides=[2, 1], mask_channels=[2, 2],
                          image_channels=[2, 2], decoder_widths=[2, 2, 2], image_size=(8, 8))
        with pytest.raises(ConfigurationError) as excinfo:
            cfg.validate()
        assert "kernel_sizes" in str(excinfo.value)
        assert "stride" in str(excinfo.value)

    def test_dict_round_trip(self):
        cfg = ModelConfig.preset("desk", refinements=3, pn_enabled=False)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestBuildModel:
    def test_same_seed_same_parameters(self, micro_config):
        a = build_model(micro_config, seed=7)
        b = build_model(micro_config, seed=7)
        for name, tensor in a.params.items():
            np.testing.assert_array_equal(tensor.data, b.params[name].data)

    def test_different_seed_differs(self, micro_config):
        a = build_model(micro_config, seed=7)
        b = build_model(micro_config, seed=8)
        assert not np.array_equal(a.params["enc.1.gen_w"].data, b.params["enc.1.gen_w"].data)

    def test_initial_values(self, micro_model):
        p = micro_model.params
        assert not p["enc.1.mask_b"].data.any()
        np.testing.assert_array_equal(p["ref1.1.pn_scale_b"].data, 1.0)
        assert abs(p["enc.2.gen_w"].data.std() - 0.01) < 0.003

    def test_parameter_count_matches_layout(self, micro_config, micro_model):
        expected = sum(int(np.prod(s)) for s in parameter_shapes(micro_config).values())
        assert micro_model.num_parameters() == expected

    def test_plain_bn_variant_has_affine(self):
        cfg = ModelConfig.preset("micro", pn_enabled=False)
        model = build_model(cfg, seed=0)
        assert "ref1.1.bn_gamma" in model.params
        assert not any("pn_" in name for name in model.params)
        np.testing.assert_array_equal(model.params["ref2.2.bn_gamma"].data, 1.0)

    def test_bn_state_per_refinement_level(self, micro_config, micro_model):
        assert set(micro_model.bn_states) == {f"ref{k}.{l}.bn" for k in (1, 2) for l in (1, 2)}
        assert micro_model.bn_states["ref1.2.bn"].channels == micro_config.decoder_widths[1]


class TestEncoder:
    def test_level_dims(self, rng, micro_config, micro_model):
        image_in, mask = micro_inputs(rng)
        state = encode(micro_model, image_in, mask)
        assert state.e(1).shape == (2, 4, 4, 4)
        assert state.e(2).shape == (2, 8, 2, 2)
        assert state.u(0).shape == (2, 4, 8, 8)
        assert state.u(2).shape == (2, micro_config.decoder_widths[2], 2, 2)
        assert state.kernels[0].dims == (4, 4, 3 * 9 * 4)

    def test_desk_deepest_level(self, rng):
        model = build_model(ModelConfig.preset("desk", refinements=0), seed=0)
        mask = np.ones((1, 1, 64, 64))
        state = encode(model, Tensor4(rng.random((1, 3, 64, 64)), dtype=np.float32),
                       Tensor4(mask, dtype=np.float32))
        assert state.e(4).shape == (1, 128, 4, 4)
        assert state.u(4).shape == (1, 512, 4, 4)

    def test_all_valid_mask_gives_uniform_kernels(self, rng, micro_model):
        image_in, mask = micro_inputs(rng, n=1, mask=np.ones((1, 1, 8, 8)))
        for field_ in encode(micro_model, image_in, mask).kernels:
            data = field_.tensor.data
            np.testing.assert_allclose(data, np.broadcast_to(data[:, :, :1, :1], data.shape), atol=1e-12)

    def test_all_hole_mask_silences_image_branch(self, rng, micro_model):
        image_in, mask = micro_inputs(rng, n=1, mask=np.zeros((1, 1, 8, 8)))
        state = encode(micro_model, image_in, mask)
        for e in state.images:
            assert not e.data.any()

    def test_all_hole_silence_needs_zero_mask_biases(self, rng, micro_model):
        # unzeroed image so only the kernels can silence the branch
        image_in = Tensor4(rng.random((1, 3, 8, 8)))
        mask = Tensor4(np.zeros((1, 1, 8, 8)))
        state = encode(micro_model, image_in, mask)
        assert not any(e.data.any() for e in state.images)
        assert not any(m.data.any() for m in state.masks)

        micro_model.params["enc.1.mask_b"].data[:] = 0.5
        state = encode(micro_model, image_in, mask)
        assert state.masks[0].data.min() == pytest.approx(0.5)
        assert state.kernels[0].tensor.data.any()
        assert madf_conv(image_in, state.kernels[0], micro_model.config.encoder_spec(1)).data.any()

    def test_rejects_non_binary_mask(self, rng, micro_model):
        image_in, _ = micro_inputs(rng)
        with pytest.raises(ValidationError):
            encode(micro_model, image_in, Tensor4(np.full((2, 1, 8, 8), 0.5)))

    def test_rejects_indivisible_dims(self, rng, micro_model):
        with pytest.raises(ConfigurationError):
            encode(micro_model, Tensor4(np.zeros((1, 3, 6, 8))), Tensor4(np.ones((1, 1, 6, 8))))


class TestRecoveryBlock:
    def test_desk_deepest_block_dims(self, rng):
        params = RecoveryBlockParams(
            up_w=Tensor4(rng.normal(0, 0.01, size=(512, 256, 4, 4))),
            up_b=Tensor4(np.zeros((1, 256, 1, 1))),
            conv_w=Tensor4(rng.normal(0, 0.01, size=(256, 512, 3, 3))),
            conv_b=Tensor4(np.zeros((1, 256, 1, 1))),
        )
        out = recovery_block(Tensor4(rng.random((1, 512, 4, 4))), Tensor4(rng.random((1, 256, 8, 8))), params)
        assert out.shape == (1, 256, 8, 8)

    def test_zero_inputs_zero_output(self, rng):
        params = RecoveryBlockParams(
            up_w=Tensor4(rng.normal(size=(4, 2, 4, 4))), up_b=Tensor4(np.zeros((1, 2, 1, 1))),
            conv_w=Tensor4(rng.normal(size=(2, 5, 3, 3))), conv_b=Tensor4(np.zeros((1, 2, 1, 1))),
        )
        out = recovery_block(Tensor4(np.zeros((1, 4, 2, 2))), Tensor4(np.zeros((1, 3, 4, 4))), params)
        assert not out.data.any()

    def test_skip_must_double_resolution(self, rng):
        params = RecoveryBlockParams(
            up_w=Tensor4(np.zeros((4, 2, 4, 4))), up_b=Tensor4(np.zeros((1, 2, 1, 1))),
            conv_w=Tensor4(np.zeros((2, 5, 3, 3))), conv_b=Tensor4(np.zeros((1, 2, 1, 1))),
        )
        with pytest.raises(ConfigurationError):
            recovery_block(Tensor4(np.zeros((1, 4, 2, 2))), Tensor4(np.zeros((1, 3, 2, 2))), params)


def conv3x3_oracle(x, w, b):
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    return np.einsum("nchwij,ocij->nohw", windows, w) + b


def refine_oracle(f_lk, guide, weights, bn_mean=None, bn_var=None):
    """upsample -> concat -> conv3x3 -> BN -> alpha, beta -> leaky relu, all in numpy."""
    x = np.concatenate([f_lk.repeat(2, axis=2).repeat(2, axis=3), guide], axis=1)
    x = conv3x3_oracle(x, weights["conv_w"], weights["conv_b"])
    if bn_mean is None:
        bn_mean = x.mean(axis=(0, 2, 3), keepdims=True)
        bn_var = x.var(axis=(0, 2, 3), keepdims=True)
    xhat = (x - bn_mean) / np.sqrt(bn_var + config.NORM_EPS)
    if "proj_w" in weights:
        latent = np.maximum(conv3x3_oracle(guide, weights["proj_w"], weights["proj_b"]), 0.0)
        alpha = conv3x3_oracle(latent, weights["scale_w"], weights["scale_b"])
        beta = conv3x3_oracle(latent, weights["bias_w"], weights["bias_b"])
    else:
        alpha, beta = weights["gamma"], weights["beta"]
    y = xhat * alpha + beta
    return np.where(y > 0, y, config.LEAKY_SLOPE * y)


def refine_weights(rng, pn, c_hi=4, c_lo=3, latent=2):
    shapes = {"conv_w": (c_lo, c_hi + c_lo, 3, 3), "conv_b": (1, c_lo, 1, 1)}
    if pn:
        shapes.update(proj_w=(latent, c_lo, 3, 3), proj_b=(1, latent, 1, 1),
                      scale_w=(c_lo, latent, 3, 3), scale_b=(1, c_lo, 1, 1),
                      bias_w=(c_lo, latent, 3, 3), bias_b=(1, c_lo, 1, 1))
    else:
        shapes.update(gamma=(1, c_lo, 1, 1), beta=(1, c_lo, 1, 1))
    return {name: rng.normal(0.0, 0.5, size=shape) for name, shape in shapes.items()}


def refine_params(weights):
    t = {name: Tensor4(value) for name, value in weights.items()}
    params = RefineBlockParams(conv_w=t["conv_w"], conv_b=t["conv_b"])
    if "proj_w" in t:
        params.pn = PnParams(proj_w=t["proj_w"], proj_b=t["proj_b"], scale_w=t["scale_w"],
                             scale_b=t["scale_b"], bias_w=t["bias_w"], bias_b=t["bias_b"])
    else:
        params.gamma, params.beta = t["gamma"], t["beta"]
    return params


class TestRefineBlock:
    @pytest.mark.parametrize("pn", [True, False], ids=["pn", "bn"])
    def test_matches_numpy_training_mode(self, rng, pn):
        weights = refine_weights(rng, pn)
        f_lk, guide = rng.normal(size=(2, 4, 2, 2)), rng.normal(size=(2, 3, 4, 4))
        bn = BnState.create(3)
        out = refine_block(Tensor4(f_lk), Tensor4(guide), refine_params(weights), bn, training=True)
        np.testing.assert_allclose(out.data, refine_oracle(f_lk, guide, weights), rtol=1e-9, atol=1e-12)
        assert bn.running_mean.any()

    @pytest.mark.parametrize("pn", [True, False], ids=["pn", "bn"])
    def test_matches_numpy_eval_mode(self, rng, pn):
        weights = refine_weights(rng, pn)
        f_lk, guide = rng.normal(size=(1, 4, 2, 2)), rng.normal(size=(1, 3, 4, 4))
        bn = BnState.create(3)
        bn.running_mean[:] = rng.normal(size=3)
        bn.running_var[:] = rng.uniform(0.5, 2.0, size=3)
        out = refine_block(Tensor4(f_lk), Tensor4(guide), refine_params(weights), bn, training=False)
        expected = refine_oracle(f_lk, guide, weights, bn.running_mean.reshape(1, -1, 1, 1),
                                 bn.running_var.reshape(1, -1, 1, 1))
        np.testing.assert_allclose(out.data, expected, rtol=1e-9, atol=1e-12)

    def test_identity_heads_match_plain_bn(self, rng):
        pn_weights = refine_weights(rng, pn=True)
        pn_weights["scale_w"][:] = 0.0
        pn_weights["scale_b"][:] = 1.0
        pn_weights["bias_w"][:] = 0.0
        pn_weights["bias_b"][:] = 0.0
        bn_weights = {"conv_w": pn_weights["conv_w"], "conv_b": pn_weights["conv_b"],
                      "gamma": np.ones((1, 3, 1, 1)), "beta": np.zeros((1, 3, 1, 1))}
        f_lk, guide = Tensor4(rng.normal(size=(2, 4, 2, 2))), Tensor4(rng.normal(size=(2, 3, 4, 4)))
        with_pn = refine_block(f_lk, guide, refine_params(pn_weights), BnState.create(3), training=True)
        with_bn = refine_block(f_lk, guide, refine_params(bn_weights), BnState.create(3), training=True)
        np.testing.assert_allclose(with_pn.data, with_bn.data, rtol=1e-12, atol=1e-14)

    def test_guide_must_double_resolution(self, rng):
        params = refine_params(refine_weights(rng, pn=False))
        with pytest.raises(ConfigurationError):
            refine_block(Tensor4(np.zeros((1, 4, 2, 2))), Tensor4(np.zeros((1, 3, 2, 2))), params,
                         BnState.create(3), training=True)


class TestForwardFull:
    def test_one_output_per_decoder(self, rng, micro_model):
        outputs = forward_full(micro_model, *micro_inputs(rng))
        assert len(outputs) == 3
        for image in outputs.images:
            assert image.shape == (2, 3, 8, 8)
        assert set(outputs.features[1]) == {0, 1, 2}

    def test_recovery_only(self, rng):
        model = build_model(ModelConfig.preset("micro", refinements=0), seed=1, dtype=np.float64)
        outputs = forward_full(model, *micro_inputs(rng))
        assert len(outputs) == 1
        assert outputs.refinements == []

    def test_eval_mode_leaves_bn_state(self, rng, micro_model):
        micro_model.eval()
        before = micro_model.bn_states["ref1.1.bn"].running_mean.copy()
        forward_full(micro_model, *micro_inputs(rng))
        np.testing.assert_array_equal(micro_model.bn_states["ref1.1.bn"].running_mean, before)

    def test_predict_is_clamped(self, rng, micro_model):
        image_in, mask = micro_inputs(rng)
        out = micro_model.eval().predict(image_in.data, mask.data)
        assert out.shape == (2, 3, 8, 8)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_gradient_reaches_mask_branch(self, rng, micro_model):
        image_in, mask = micro_inputs(rng)
        with Tape() as tape:
            outputs = forward_full(micro_model, image_in, mask)
            loss = outputs.images[0].mean()
            for img in outputs.images[1:]:
                loss = loss + (img * img).mean()
        backward(tape, loss)
        assert np.abs(micro_model.params["enc.1.gen_w"].grad).sum() > 0
        assert np.abs(micro_model.params["enc.1.mask_w"].grad).sum() > 0


class TestKernelDump:
    def left_half_hole(self):
        mask = np.ones((8, 8))
        mask[:, :4] = 0
        return mask

    def test_rows_span_valid_to_masked(self, micro_model):
        dump = dump_first_layer_kernels(micro_model, self.left_half_hole(), rows=2)
        np.testing.assert_allclose(dump.valid_fractions, [1.0, 0.0])
        assert dump.grid.shape == (60, 150)
        assert dump.grid.dtype == np.uint8
        assert dump.kernel_energies.shape == (2, 4)

    def test_deterministic(self, micro_model):
        a = dump_first_layer_kernels(micro_model, self.left_half_hole())
        b = dump_first_layer_kernels(micro_model, self.left_half_hole())
        np.testing.assert_array_equal(a.grid, b.grid)
        assert a.windows == b.windows
