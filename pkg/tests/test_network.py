"""Model builder, forward wiring, prediction, and BDAD serialization."""

import numpy as np
import pytest

from bitseg.errors import ConfigError, DimensionError, FormatError
from bitseg.network import (
    KIND_CHECKPOINT,
    Model,
    ModelConfig,
    build_model,
    header_bytes,
    load_model,
    predict_mask,
    save_model,
    unit_record_bytes,
)
from bitseg.nn import no_grad


def tiny_cfg(**kw):
    # small widths keep the forward cheap while covering every layer kind
    base = dict(input_size=(16, 16), channels=(4, 6, 8), seed=3)
    base.update(kw)
    return ModelConfig(**base)


def rand_images(n, size, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((n, 3) + size, dtype=np.float32)


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.stage_widths() == (16, 32, 64)
        assert cfg.binarize_encoder and cfg.binarize_last_layer

    def test_width_multiplier(self):
        assert ModelConfig(width_multiplier=0.5).stage_widths() == (8, 16, 32)
        assert ModelConfig(width_multiplier=0.01).stage_widths() == (2, 2, 2)

    def test_validation(self):
        with pytest.raises(ConfigError):
            ModelConfig(input_size=(60, 64))
        with pytest.raises(ConfigError):
            ModelConfig(channels=(16, 32))
        with pytest.raises(ConfigError):
            ModelConfig(rates=(1, 2, 8))
        with pytest.raises(ConfigError):
            ModelConfig(rates=(2, 2))
        with pytest.raises(ConfigError):
            ModelConfig(rates=())
        with pytest.raises(ConfigError):
            ModelConfig(multi_base=0)
        with pytest.raises(ConfigError):
            ModelConfig(width_multiplier=0.0)


class TestBuild:
    def test_layer_lineup(self):
        m = build_model(tiny_cfg())
        names = [u.name for u in m.units]
        assert names == [
            "stem",
            "enc1_conv1",
            "enc1_conv2",
            "enc1_down",
            "enc2_conv1",
            "enc2_conv2",
            "enc2_down",
            "enc3_conv1",
            "enc3_conv2",
            "enc3_down",
            "bott_r1",
            "bott_r2",
            "bott_r4",
            "bott_fuse",
            "dec_conv",
            "head",
        ]
        assert not m.unit("head").has_bn and not m.unit("head").has_act
        assert all(u.has_bn and u.has_act for u in m.units[:-1])

    def test_binarize_flags(self):
        allb = build_model(tiny_cfg())
        assert all(u.spec.binary for u in allb.units)
        none = build_model(
            tiny_cfg(
                binarize_encoder=False, binarize_bottleneck=False, binarize_decoder=False
            )
        )
        assert not any(u.spec.binary for u in none.units)
        keep_ends = build_model(tiny_cfg(binarize_first_layer=False, binarize_last_layer=False))
        assert not keep_ends.unit("stem").spec.binary
        assert not keep_ends.unit("head").spec.binary
        assert keep_ends.unit("enc1_conv1").spec.binary
        assert keep_ends.unit("dec_conv").spec.binary

    def test_same_seed_same_weights(self):
        a = build_model(tiny_cfg(seed=11))
        b = build_model(tiny_cfg(seed=11))
        for ua, ub in zip(a.units, b.units):
            np.testing.assert_array_equal(ua.weight.data, ub.weight.data)
        c = build_model(tiny_cfg(seed=12))
        assert any(
            np.any(ua.weight.data != uc.weight.data) for ua, uc in zip(a.units, c.units)
        )

    def test_topology_shared_across_flag_choices(self):
        binary = build_model(tiny_cfg())
        floaty = build_model(
            tiny_cfg(
                binarize_encoder=False, binarize_bottleneck=False, binarize_decoder=False
            )
        )
        assert [u.name for u in binary.units] == [u.name for u in floaty.units]

    def test_encoder_output_stride_eight(self):
        m = build_model(tiny_cfg())
        h, w = m.config.input_size
        for u in m.units[:10]:  # stem through enc3_down
            h, w = u.spec.out_size(h, w)
        assert (h, w) == (m.config.input_size[0] // 8, m.config.input_size[1] // 8)

    def test_parameter_groups(self):
        m = build_model(tiny_cfg())
        groups = {g for _, _, g in m.parameters()}
        assert groups == {"latent", "bn", "act"}
        floaty = build_model(
            tiny_cfg(
                binarize_encoder=False, binarize_bottleneck=False, binarize_decoder=False
            )
        )
        assert {g for _, _, g in floaty.parameters()} == {"conv_float", "bn", "act"}
        assert len(m.parameters()) == 16 + 15 * 2 + 15


class TestForward:
    def test_output_shape_default_size(self):
        m = build_model(ModelConfig(seed=1))
        with no_grad():
            y = m.forward(rand_images(1, (64, 64)))
        assert y.data.shape == (1, 2, 64, 64)

    def test_zero_image_finite(self):
        m = build_model(tiny_cfg())
        with no_grad():
            y = m.forward(np.zeros((1, 3, 16, 16), dtype=np.float32))
        assert np.all(np.isfinite(y.data))

    def test_deterministic(self):
        m = build_model(tiny_cfg())
        x = rand_images(2, (16, 16))
        with no_grad():
            a = m.forward(x)
            b = m.forward(x)
        np.testing.assert_array_equal(a.data, b.data)

    def test_engines_agree_bitwise(self):
        for mb in (1, 2):
            m = build_model(tiny_cfg(multi_base=mb))
            x = rand_images(2, (16, 16), seed=5)
            with no_grad():
                g = m.forward(x, engine="gemm")
                p = m.forward(x, engine="packed")
            np.testing.assert_array_equal(g.data, p.data)

    def test_inference_leaves_running_stats(self):
        m = build_model(tiny_cfg())
        before = m.unit("stem").run_mean.copy()
        with no_grad():
            m.forward(rand_images(1, (16, 16)), training=False)
        np.testing.assert_array_equal(m.unit("stem").run_mean, before)
        with no_grad():
            m.forward(rand_images(1, (16, 16)), training=True)
        assert np.any(m.unit("stem").run_mean != before)

    def test_input_validation(self):
        m = build_model(tiny_cfg())
        with pytest.raises(DimensionError):
            m.forward(np.zeros((1, 3, 16, 24), dtype=np.float32))
        with pytest.raises(DimensionError):
            m.forward(np.zeros((1, 1, 16, 16), dtype=np.float32))

    def test_filter_cache_semantics(self):
        m = build_model(tiny_cfg())
        x = rand_images(1, (16, 16))
        with no_grad():
            base = m.forward(x).data
        stem = m.unit("stem")
        stem.weight.data = -stem.weight.data  # stale cache keeps old signs
        with no_grad():
            stale = m.forward(x).data
        np.testing.assert_array_equal(stale, base)
        m.invalidate_filters()
        with no_grad():
            fresh = m.forward(x).data
        assert np.any(fresh != base)


class TestPredictMask:
    def test_argmax_and_tiebreak(self):
        logits = np.zeros((1, 2, 2, 2), dtype=np.float32)
        logits[0, 1, 0, 0] = 2.0
        logits[0, 0, 0, 0] = 1.0  # road wins
        logits[0, :, 0, 1] = 3.0  # tie -> background
        mask = predict_mask(logits)
        assert mask[0, 0, 0] == 1
        assert mask[0, 0, 1] == 0

    def test_shift_invariance(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(2, 2, 5, 5)).astype(np.float32)
        np.testing.assert_array_equal(predict_mask(logits), predict_mask(logits + 7.5))

    def test_bad_shape(self):
        with pytest.raises(DimensionError):
            predict_mask(np.zeros((1, 3, 4, 4), dtype=np.float32))

    def test_model_predict(self):
        m = build_model(tiny_cfg())
        mask = m.predict(rand_images(2, (16, 16)))
        assert mask.shape == (2, 16, 16)
        assert set(np.unique(mask)) <= {0, 1}


def warmed_model(cfg):
    """Build and push a couple of training batches through to move BN stats."""
    m = build_model(cfg)
    with no_grad():
        for seed in (21, 22):
            m.forward(rand_images(2, cfg.input_size, seed=seed), training=True)
    return m


class TestSerialization:
    def test_inference_roundtrip_bit_exact(self, tmp_path):
        for mb in (1, 2):
            m = warmed_model(tiny_cfg(multi_base=mb))
            f = tmp_path / f"m{mb}.bdad"
            save_model(m, f)
            loaded = load_model(f)
            assert loaded.config == m.config
            for i in range(10):
                x = rand_images(1, (16, 16), seed=100 + i)
                with no_grad():
                    np.testing.assert_array_equal(
                        loaded.forward(x).data, m.forward(x).data
                    )

    def test_checkpoint_keeps_latents(self, tmp_path):
        m = warmed_model(tiny_cfg())
        f = tmp_path / "ck.bdad"
        save_model(m, f, kind=KIND_CHECKPOINT)
        loaded = load_model(f)
        for ua, ub in zip(m.units, loaded.units):
            np.testing.assert_array_equal(ua.weight.data, ub.weight.data)
        x = rand_images(1, (16, 16), seed=9)
        with no_grad():
            np.testing.assert_array_equal(loaded.forward(x).data, m.forward(x).data)

    def test_checkpoint_larger_than_inference(self, tmp_path):
        m = warmed_model(tiny_cfg())
        a, b = tmp_path / "i.bdad", tmp_path / "c.bdad"
        save_model(m, a)
        save_model(m, b, kind=KIND_CHECKPOINT)
        assert b.stat().st_size > a.stat().st_size

    def test_binary_file_much_smaller_than_float(self, tmp_path):
        binary = build_model(ModelConfig(seed=0))
        floaty = build_model(
            ModelConfig(
                seed=0,
                binarize_encoder=False,
                binarize_bottleneck=False,
                binarize_decoder=False,
            )
        )
        fb, ff = tmp_path / "b.bdad", tmp_path / "f.bdad"
        save_model(binary, fb)
        save_model(floaty, ff)
        assert fb.stat().st_size < ff.stat().st_size / 10

    def test_size_strictly_decreases_as_flags_turn_on(self, tmp_path):
        stages = [
            dict(binarize_encoder=False, binarize_bottleneck=False, binarize_decoder=False),
            dict(binarize_encoder=True, binarize_bottleneck=False, binarize_decoder=False),
            dict(binarize_encoder=True, binarize_bottleneck=True, binarize_decoder=False),
            dict(),
        ]
        sizes = []
        for i, flags in enumerate(stages):
            f = tmp_path / f"s{i}.bdad"
            save_model(build_model(tiny_cfg(**flags)), f)
            sizes.append(f.stat().st_size)
        assert sizes == sorted(sizes, reverse=True)
        assert len(set(sizes)) == len(sizes)

    def test_record_bytes_reconcile_with_file(self, tmp_path):
        m = warmed_model(tiny_cfg(multi_base=2))
        f = tmp_path / "r.bdad"
        save_model(m, f)
        total = header_bytes(m.config) + sum(unit_record_bytes(u) for u in m.units)
        assert f.stat().st_size == total

    def test_corrupted_magic(self, tmp_path):
        f = tmp_path / "bad.bdad"
        save_model(build_model(tiny_cfg()), f)
        raw = bytearray(f.read_bytes())
        raw[:4] = b"NOPE"
        f.write_bytes(bytes(raw))
        with pytest.raises(FormatError) as err:
            load_model(f)
        assert err.value.offset == 0

    def test_bad_version_byte(self, tmp_path):
        f = tmp_path / "v.bdad"
        save_model(build_model(tiny_cfg()), f)
        raw = bytearray(f.read_bytes())
        raw[4] = 9
        f.write_bytes(bytes(raw))
        with pytest.raises(FormatError) as err:
            load_model(f)
        assert err.value.offset == 4

    def test_truncation_reports_offset(self, tmp_path):
        f = tmp_path / "t.bdad"
        save_model(build_model(tiny_cfg()), f)
        raw = f.read_bytes()
        f.write_bytes(raw[: len(raw) - 37])
        with pytest.raises(FormatError) as err:
            load_model(f)
        assert err.value.offset <= len(raw) - 37

    def test_trailing_garbage_rejected(self, tmp_path):
        f = tmp_path / "g.bdad"
        save_model(build_model(tiny_cfg()), f)
        f.write_bytes(f.read_bytes() + b"\x00\x01")
        with pytest.raises(FormatError):
            load_model(f)
