"""Cost accounting: hand oracles, ratio invariants, byte reconciliation."""

import numpy as np
import pytest

from bitseg.complexity import (
    CSV_HEADER,
    CostModel,
    ComplexityReport,
    cost_model_apply,
    count_layer,
    count_model,
    count_units,
    csv_lines,
    header_bytes_of,
    text_table,
    unit_output_sizes,
)
from bitseg.errors import ConfigError
from bitseg.network import ConvUnit, ModelConfig, build_model, header_bytes, save_model
from bitseg.nn import ConvSpec, Tensor


def flags_off(**extra):
    base = dict(
        binarize_encoder=False, binarize_bottleneck=False, binarize_decoder=False
    )
    base.update(extra)
    return base


class TestCountLayer:
    def test_float_reference_layer(self):
        c = count_layer(ConvSpec(16, 32, (3, 3), padding=1), (8, 8))
        assert c.float_macs == 294_912
        assert c.binary_ops == 0
        assert c.param_bits == 32 * 16 * 9 * 32  # 18432 bytes

    def test_binary_reference_layer(self):
        spec = ConvSpec(16, 32, (3, 3), padding=1, binary=True)
        c = count_layer(spec, (8, 8))
        assert c.binary_ops == 294_912
        assert c.float_macs == 0
        assert c.param_bits == 4608 + 32 * 32  # one bit per weight + alphas
        assert c.param_bits // 8 == 704
        f = count_layer(ConvSpec(16, 32, (3, 3), padding=1), (8, 8))
        ratio = f.param_bits / c.param_bits
        assert 26.1 < ratio < 26.3

    def test_single_mac(self):
        c = count_layer(ConvSpec(1, 1, (1, 1)), (1, 1))
        assert c.float_macs == 1

    def test_multi_base_scales_ops_and_bits(self):
        spec = ConvSpec(4, 8, (3, 3), binary=True)
        one = count_layer(spec, (5, 5), bases=1)
        two = count_layer(spec, (5, 5), bases=2)
        assert two.binary_ops == 2 * one.binary_ops
        assert two.param_bits == 2 * one.param_bits + 64  # plus two shifts

    def test_bn_and_act_ownership(self):
        spec = ConvSpec(4, 8, (3, 3), binary=True)
        bare = count_layer(spec, (5, 5))
        with_bn = count_layer(spec, (5, 5), has_bn=True)
        with_all = count_layer(spec, (5, 5), has_bn=True, has_act=True)
        assert with_bn.param_bits == bare.param_bits + 32 * 4 * 8
        assert with_all.param_bits == with_bn.param_bits + 32 * 8


class TestCountUnits:
    def test_two_layer_toy_matches_hand_totals(self):
        s1 = ConvSpec(3, 4, (3, 3), padding=1, binary=True)
        s2 = ConvSpec(4, 2, (1, 1))
        u1 = ConvUnit("a", s1, 1, Tensor(np.zeros((4, 3, 3, 3), dtype=np.float32)))
        u2 = ConvUnit("b", s2, 1, Tensor(np.zeros((2, 4, 1, 1), dtype=np.float32)))
        costs = count_units([(u1, (6, 6)), (u2, (6, 6))])
        assert costs[0].binary_ops == 4 * 36 * 27
        assert costs[0].param_bits == 27 * 4 + 32 * 4
        assert costs[1].float_macs == 2 * 36 * 4
        assert costs[1].param_bits == 32 * 4 * 2
        assert sum(c.size_bytes for c in costs) > 0


class TestCostModel:
    def test_validation(self):
        CostModel(1.0)
        CostModel(1 / 64)
        for bad in (0.0, -0.5, 1.5):
            with pytest.raises(ConfigError):
                CostModel(bad)


class TestCountModel:
    def test_all_float_identity(self):
        m = build_model(ModelConfig(input_size=(16, 16), channels=(4, 6, 8), **flags_off()))
        r = count_model(m)
        assert r.compression == 1.0
        assert r.speedup == 1.0
        assert r.total_binary_ops == 0
        assert r.effective_macs == r.total_float_macs == r.float_baseline_macs

    def test_totals_are_layer_sums(self):
        r = count_model(build_model(ModelConfig(seed=2)))
        assert r.total_float_macs == sum(c.float_macs for c in r.layers)
        assert r.total_binary_ops == sum(c.binary_ops for c in r.layers)
        assert r.total_param_bits == sum(c.param_bits for c in r.layers)

    def test_default_model_ratios(self):
        r = count_model(build_model(ModelConfig(seed=0)))
        assert r.total_float_macs == 0  # fully binarized
        assert 15.0 <= r.compression <= 32.0
        assert r.speedup == pytest.approx(64.0, rel=1e-12)
        assert cost_model_apply(r, CostModel(1 / 8)) == pytest.approx(8.0, rel=1e-12)

    def test_mixed_model_hand_formula(self):
        m = build_model(
            ModelConfig(seed=1, binarize_first_layer=False, binarize_last_layer=False)
        )
        r = count_model(m)
        assert r.total_float_macs > 0 and r.total_binary_ops > 0
        want_eff = r.total_float_macs + r.total_binary_ops / 64
        assert r.effective_macs == pytest.approx(want_eff, rel=1e-12)
        assert r.speedup == pytest.approx(r.float_baseline_macs / want_eff, rel=1e-12)

    def test_compression_cap_across_configs(self):
        for cfg in (
            ModelConfig(),
            ModelConfig(width_multiplier=0.5),
            ModelConfig(multi_base=2),
            ModelConfig(binarize_decoder=False),
        ):
            assert count_model(build_model(cfg)).compression <= 32.0

    def test_monotone_under_binarization(self):
        chains = [
            flags_off(),
            flags_off(binarize_encoder=True),
            flags_off(binarize_encoder=True, binarize_bottleneck=True),
            {},
        ]
        sizes, effs = [], []
        for flags in chains:
            r = count_model(build_model(ModelConfig(seed=3, **flags)))
            sizes.append(r.total_size_bytes)
            effs.append(r.effective_macs)
        assert sizes == sorted(sizes, reverse=True) and len(set(sizes)) == len(sizes)
        assert effs == sorted(effs, reverse=True) and len(set(effs)) == len(effs)

    def test_byte_reconciliation_with_saved_file(self, tmp_path):
        for cfg in (ModelConfig(seed=4), ModelConfig(seed=4, multi_base=2, **flags_off(binarize_encoder=True))):
            m = build_model(cfg)
            r = count_model(m)
            f = tmp_path / "m.bdad"
            save_model(m, f)
            assert f.stat().st_size == r.total_size_bytes
            assert header_bytes_of(r) == header_bytes(cfg)

    def test_output_size_walk(self):
        m = build_model(ModelConfig(seed=0))
        sizes = dict(unit_output_sizes(m))
        assert sizes["stem"] == (64, 64)
        assert sizes["enc1_down"] == (32, 32)
        assert sizes["enc3_down"] == (8, 8)
        assert sizes["bott_r4"] == (8, 8)
        assert sizes["bott_fuse"] == (8, 8)
        assert sizes["dec_conv"] == (32, 32)
        assert sizes["head"] == (64, 64)


class TestRendering:
    def test_csv_layout(self):
        r = count_model(build_model(ModelConfig(seed=5)))
        lines = csv_lines(r)
        assert lines[0] == CSV_HEADER
        assert len(lines) == 1 + len(r.layers)
        cells = lines[1].split(",")
        assert cells[0] == "stem" and cells[1] == "binary"
        int(cells[2]), int(cells[3]), int(cells[4]), int(cells[5])

    def test_text_table_mentions_ratios(self):
        r = count_model(build_model(ModelConfig(seed=5)))
        table = text_table(r)
        assert "compression" in table and "speedup" in table
        assert "head" in table and "total" in table
