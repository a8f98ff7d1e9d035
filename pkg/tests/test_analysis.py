import numpy as np
import pytest

from cladelab.analysis import (
    CSV_HEADER, analyze, count_clade, count_conv, count_spade,
    dump_modulation_maps, report_csv, report_table,
)
from cladelab.generator import LayerSpec, build_generator, graph_preset
from cladelab.norms import SegmentationMask


def _layer(**kw):
    base = dict(index=0, kind="conv", cin=1, cout=1, k=3, h=1, w=1, nc=0, cm=0)
    base.update(kw)
    return LayerSpec(**base)


class TestCountConv:
    def test_big_square_conv(self):
        p, _ = count_conv(_layer(cin=1024, cout=1024, k=3))
        assert p == 9_437_184

    def test_one_by_one(self):
        p, _ = count_conv(_layer(cin=1, cout=1, k=1))
        assert p == 1

    def test_flops_scale_with_resolution(self):
        layer = _layer(cin=1024, cout=1024, k=3, h=4, w=4)
        p, f = count_conv(layer)
        assert f == p * 16


class TestCountSpade:
    def test_paper_wide_site(self):
        layer = _layer(kind="norm_spade", cout=1024, k=3, nc=151, cm=128)
        p, _ = count_spade(layer)
        assert p == 9 * (151 * 128 + 2 * 128 * 1024) == 2_533_248
        conv_p, _ = count_conv(_layer(cin=1024, cout=1024, k=3))
        assert p / conv_p == pytest.approx(0.2684, abs=1e-4)

    def test_deep_layer_blowup(self):
        layer = _layer(kind="norm_spade", cout=64, k=3, nc=151, cm=128)
        p, _ = count_spade(layer)
        conv_p, _ = count_conv(_layer(cin=128, cout=64, k=3))
        # (19328 + 16384) / 8192
        assert p / conv_p == pytest.approx(35712 / 8192, rel=1e-6)
        assert p / conv_p > 4.35

    def test_zero_width_degenerate(self):
        p, f = count_spade(_layer(kind="norm_spade", cout=8, k=3, nc=5, cm=0))
        assert p == 0 and f == 0


class TestCountClade:
    def test_paper_wide_site(self):
        p, _ = count_clade(_layer(kind="norm_clade", cout=1024, nc=151))
        assert p == 309_248
        conv_p, _ = count_conv(_layer(cin=1024, cout=1024, k=3))
        assert p / conv_p == pytest.approx(302 / 9216, rel=1e-6)

    def test_single_class_is_plain_bn(self):
        p, _ = count_clade(_layer(kind="norm_clade", cout=48, nc=1))
        assert p == 2 * 48

    def test_assignment_flops(self):
        _, f = count_clade(_layer(kind="norm_clade", cout=64, nc=151, h=256, w=256))
        assert f == 4_194_304


class TestFormulaProperties:
    def test_hundred_randomized_configs_exact(self):
        # analyzer counts must equal direct formula evaluation, and the
        # spatially-adaptive flops ratio must equal the parameter ratio at
        # equal resolution
        rng = np.random.default_rng(0)
        for _ in range(100):
            k = int(rng.choice([1, 3, 5]))
            cin = int(rng.integers(1, 512))
            cout = int(rng.integers(1, 512))
            nc = int(rng.integers(1, 200))
            cm = int(rng.integers(1, 160))
            h = int(2 ** rng.integers(2, 8))
            w = h
            conv = _layer(cin=cin, cout=cout, k=k, h=h, w=w)
            p_conv, f_conv = count_conv(conv)
            assert p_conv == k * k * cin * cout
            assert f_conv == k * k * cin * cout * h * w
            spade = _layer(kind="norm_spade", cout=cout, k=3, nc=nc, cm=cm, h=h, w=w)
            p_s, f_s = count_spade(spade)
            assert p_s == 9 * (nc * cm + 2 * cm * cout)
            assert f_s == p_s * h * w
            clade = _layer(kind="norm_clade", cout=cout, nc=nc, h=h, w=w)
            p_c, f_c = count_clade(clade)
            assert p_c == 2 * nc * cout
            assert f_c == cout * h * w
            conv3 = _layer(cin=cin, cout=cout, k=3, h=h, w=w)
            p3, f3 = count_conv(conv3)
            # identical ratios at equal resolution (k_c = k_m = 3)
            assert p_s / p3 == f_s / f3
            assert p_s / p3 == pytest.approx((nc * cm + 2 * cm * cout) / (cin * cout), rel=1e-12)
            assert p_c / p3 == pytest.approx(2 * nc / (9 * cin), rel=1e-12)


class TestAnalyzeAggregates:
    def test_paper256_spade_ratios(self):
        report = analyze(graph_preset("paper-256", norm_mode="spade"))
        assert abs(100 * report.avg_param_ratio - 39.21) <= 5.0
        assert 234.73 * 0.75 <= 100 * report.avg_flops_ratio <= 234.73 * 1.25
        assert report.convention == "totals"

    def test_paper256_clade_ratios(self):
        report = analyze(graph_preset("paper-256", norm_mode="clade"))
        assert abs(100 * report.avg_param_ratio - 4.57) <= 2.0
        assert 0.02 <= 100 * report.avg_flops_ratio <= 0.12

    def test_param_ratio_reproduces_published_value_closely(self):
        report = analyze(graph_preset("paper-256", norm_mode="spade"))
        assert 100 * report.avg_param_ratio == pytest.approx(39.21, abs=0.01)
        clade = analyze(graph_preset("paper-256", norm_mode="clade"))
        assert 100 * clade.avg_param_ratio == pytest.approx(4.57, abs=0.01)

    def test_table3_vicinity(self):
        spade = analyze(graph_preset("paper-256", norm_mode="spade"))
        clade = analyze(graph_preset("paper-256", norm_mode="clade"))
        assert abs(spade.total_params - 96.5e6) / 96.5e6 <= 0.15
        assert abs(spade.total_flops - 181.3e9) / 181.3e9 <= 0.15
        assert abs(clade.total_params - 71.4e6) / 71.4e6 <= 0.15
        assert abs(clade.total_flops - 42.2e9) / 42.2e9 <= 0.15

    @pytest.mark.parametrize("mode", ["spade", "clade", "bn"])
    def test_totals_equal_row_sums(self, mode):
        report = analyze(graph_preset("paper-256", norm_mode=mode))
        assert report.total_params == sum(r.params for r in report.rows)
        assert report.total_flops == sum(r.flops for r in report.rows)

    def test_mean_convention_also_reported(self):
        report = analyze(graph_preset("paper-256", norm_mode="spade"))
        assert report.mean_param_ratio > 0
        assert report.mean_flops_ratio > report.mean_param_ratio  # upsample pairs

    def test_mac_flag_doubles_mac_counts_only(self):
        r1 = analyze(graph_preset("paper-256", norm_mode="clade"))
        r2 = analyze(graph_preset("paper-256", norm_mode="clade"), mac_as_2flops=True)
        assert r2.total_params == r1.total_params
        # assignments are unchanged, so the clade flops ratio halves
        assert r2.avg_flops_ratio == pytest.approx(r1.avg_flops_ratio / 2, rel=1e-9)


class TestLiveModelAgreement:
    @pytest.mark.parametrize("mode", ["spade", "clade", "bn"])
    @pytest.mark.parametrize("preset", ["toy-64", "paper-256"])
    def test_totals_match_parameter_enumeration(self, preset, mode):
        spec = graph_preset(preset, norm_mode=mode)
        report = analyze(spec)
        model = build_generator(spec, seed=0)
        assert report.total_params == model.num_params()

    @pytest.mark.parametrize("mode", ["spade", "clade", "bn"])
    def test_totals_match_enumeration_with_edges(self, mode):
        spec = graph_preset("toy-64", norm_mode=mode, use_edge=True)
        report = analyze(spec)
        model = build_generator(spec, seed=1)
        assert report.total_params == model.num_params()

    def test_clade_norm_param_identity(self):
        # total class-conditional state is exactly sum of 2 * N_c * C_out
        spec = graph_preset("toy-64", norm_mode="clade")
        report = analyze(spec)
        model = build_generator(spec, seed=2)
        want = sum(2 * spec.num_classes * s.channels for s in model.norm_sites())
        got = sum(r.norm_params for r in report.rows if r.kind == "norm_clade")
        assert got == want


class TestReportOutput:
    def test_csv_header_exact(self):
        text = report_csv(analyze(graph_preset("toy-64")))
        assert text.splitlines()[0] == CSV_HEADER

    def test_csv_row_count(self):
        spec = graph_preset("toy-64")
        text = report_csv(analyze(spec))
        assert len(text.strip().splitlines()) == 1 + len(spec.expand())

    def test_table_mentions_convention(self):
        table = report_table(analyze(graph_preset("toy-64")))
        assert "totals convention" in table
        assert "per-site mean convention" in table


class TestModulationMaps:
    def _mask(self, seed=0, size=64, nc=5):
        rng = np.random.default_rng(seed)
        return SegmentationMask(
            rng.integers(0, nc, size=(size, size)).astype(np.int32), nc)

    def test_clade_spread_exactly_zero(self):
        model = build_generator(graph_preset("toy-64", norm_mode="clade"), seed=3)
        for site in dump_modulation_maps(model, self._mask()):
            for st in site["per_class"].values():
                assert st["spread"] == 0.0

    def test_bn_maps_constant(self):
        model = build_generator(graph_preset("toy-64", norm_mode="bn"), seed=3)
        for site in dump_modulation_maps(model, self._mask()):
            assert np.ptp(site["gamma"]) == 0.0

    def test_spade_interior_spread_within_and_across_masks(self):
        model = build_generator(graph_preset("toy-64", norm_mode="spade"), seed=3)
        # two different layouts sharing the same classes: vertical versus
        # horizontal half-splits, so every class has a large interior
        va = np.zeros((64, 64), np.int32)
        va[:, 32:] = 1
        vb = np.zeros((64, 64), np.int32)
        vb[32:, :] = 1
        a = dump_modulation_maps(model, SegmentationMask(va, 5))
        b = dump_modulation_maps(model, SegmentationMask(vb, 5))
        checked = 0
        for sa, sb in zip(a, b):
            for cls in set(sa["per_class"]) & set(sb["per_class"]):
                lo = min(sa["per_class"][cls]["min"], sb["per_class"][cls]["min"])
                hi = max(sa["per_class"][cls]["max"], sb["per_class"][cls]["max"])
                assert hi - lo < 1e-6
                checked += 1
        assert checked > 0
