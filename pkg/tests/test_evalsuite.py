import pytest
import torch
import torch.nn as nn

from videojscc.channel import ChannelConfig
from videojscc.evalsuite import (
    AblationFlags,
    EvalError,
    SweepSpec,
    conv_macs,
    count_module,
    evaluate_sequences,
    flops_report,
    frame_trace,
    run_ablation,
    run_sweep,
)
from videojscc.layers import GDN, DepthConv
from videojscc.models import ArchConfig, build_models
from videojscc.videodata import synth_moving_squares

SMALL = ArchConfig(latent_channels=16, mv_latent_channels=16, feature_channels=12, offset_groups=2)


@pytest.fixture(scope="module")
def small_models():
    return build_models(SMALL, seed=0)


@pytest.fixture(scope="module")
def clip():
    return synth_moving_squares(2, 4, (64, 64), (0, 1), seed=5)


class TestFlopsCounting:
    def test_canonical_conv_hand_count(self):
        # 3x3 conv, 3 -> 64, 256x256, stride 1:
        # MACs = 64 * 3 * 9 * 256^2 = 113,246,208; params = 3*64*9 + 64 = 1792
        conv = nn.Conv2d(3, 64, 3, padding=1)
        recs = count_module(conv, (torch.zeros(1, 3, 256, 256),))
        assert len(recs) == 1
        assert recs[0].macs == 113_246_208
        assert recs[0].params == 1792
        assert conv_macs(3, 64, 3, 256, 256) == 113_246_208

    def test_canonical_stride2_conv_hand_count(self):
        # 3x3 conv 16 -> 32 stride 2 on 64x64 -> out 32x32:
        # MACs = 16 * 32 * 9 * 32 * 32 = 4,718,592
        conv = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        recs = count_module(conv, (torch.zeros(1, 16, 64, 64),))
        assert recs[0].macs == 16 * 32 * 9 * 32 * 32 == 4_718_592

    def test_canonical_depth_separable_hand_count(self):
        # depthwise 16ch 3x3 @32x32: 16 * 9 * 1024 = 147,456 MACs
        # pointwise 16 -> 24 @32x32:  16 * 24 * 1024 = 393,216 MACs
        m = DepthConv(16, 24, kernel=3)
        recs = count_module(m, (torch.zeros(1, 16, 32, 32),))
        macs = {r.name: r.macs for r in recs}
        assert macs["depthwise"] == 147_456
        assert macs["pointwise"] == 393_216

    def test_gdn_counted_as_channel_mixing(self):
        m = GDN(8)
        recs = count_module(m, (torch.zeros(1, 8, 4, 4),))
        assert recs[0].macs == 8 * 8 * 16

    def test_full_report_deterministic(self, small_models):
        a = flops_report(small_models, (1, 3, 64, 64))
        b = flops_report(small_models, (1, 3, 64, 64))
        assert a == b
        total = a[-1]
        assert total["module"] == "total"
        assert total["flops"] == 2 * total["macs"]
        assert total["params"] == sum(p.numel() for p in small_models.parameters())

    def test_report_covers_every_network(self, small_models):
        rows = flops_report(small_models, (1, 3, 64, 64))
        names = {r["module"] for r in rows}
        for expected in ("iframe_enc", "pframe_dec", "cond", "mem_p.entropy", "flow"):
            assert expected in names


class TestSweep:
    def test_single_point_single_seed(self, small_models, clip):
        spec = SweepSpec(axis="csnr", values=[10.0], repeats=1)
        rows = run_sweep(
            spec, [clip], ChannelConfig("awgn", 10.0), 4,
            models_for_point=lambda v: small_models, seed=0,
        )
        assert len(rows) == 1
        assert rows[0]["skipped"] == 0
        assert rows[0]["psnr_db_std"] == 0.0

    def test_repeats_populate_std(self, small_models, clip):
        spec = SweepSpec(axis="csnr", values=[5.0], repeats=3)
        rows = run_sweep(
            spec, [clip], ChannelConfig("awgn", 10.0), 4,
            models_for_point=lambda v: small_models, seed=0,
        )
        assert rows[0]["repeats"] == 3
        assert rows[0]["psnr_db_std"] > 0.0

    def test_missing_checkpoint_listed_as_skipped(self, small_models, clip):
        spec = SweepSpec(axis="csnr", values=[0.0, 10.0], repeats=1)
        rows = run_sweep(
            spec, [clip], ChannelConfig("awgn", 10.0), 4,
            models_for_point=lambda v: small_models if v > 5 else None, seed=0,
        )
        assert rows[0]["skipped"] == 1
        assert rows[1]["skipped"] == 0

    def test_outputs_reproducible(self, small_models, clip, tmp_path):
        spec = SweepSpec(axis="gop", values=[2, 4], repeats=1)
        kw = dict(models_for_point=lambda v: small_models, seed=3)
        a = run_sweep(spec, [clip], ChannelConfig("awgn", 10.0), 4, **kw)
        b = run_sweep(spec, [clip], ChannelConfig("awgn", 10.0), 4, **kw)
        assert a == b

    def test_bad_axis_rejected(self):
        with pytest.raises(EvalError):
            SweepSpec(axis="power", values=[1.0])

    def test_emits_csv_and_plots(self, small_models, clip, tmp_path):
        spec = SweepSpec(axis="csnr", values=[10.0], repeats=1)
        run_sweep(
            spec, [clip], ChannelConfig("awgn", 10.0), 4,
            models_for_point=lambda v: small_models, seed=0, out_dir=tmp_path,
        )
        assert (tmp_path / "sweep_csnr.csv").exists()
        assert (tmp_path / "sweep_csnr_psnr_db.png").exists()


class TestFrameTrace:
    def test_lengths_and_markers(self, small_models, clip, tmp_path):
        trace = frame_trace(clip, small_models, ChannelConfig("awgn", 10.0), 2, out_dir=tmp_path)
        assert len(trace["cbr"]) == len(clip.frames)
        assert len(trace["psnr_db"]) == len(clip.frames)
        assert trace["iframe_positions"] == [0, 2]
        assert (tmp_path / "frame_trace.csv").exists()
        assert (tmp_path / "frame_trace.png").exists()


class TestAblation:
    def test_full_vs_itself_zero_delta(self, small_models, clip):
        variants = {
            "full": (small_models, AblationFlags()),
            "again": (small_models, AblationFlags()),
        }
        rows = run_ablation(variants, [clip], ChannelConfig("awgn", 10.0), 4, seed=0)
        by_name = {r["variant"]: r for r in rows}
        assert by_name["full"]["psnr_delta_pct"] == pytest.approx(0.0, abs=1e-9)
        assert by_name["again"]["psnr_delta_pct"] == pytest.approx(0.0, abs=1e-9)

    def test_no_mem_variant_fixed_bandwidth(self, small_models, clip):
        # disabling the entropy module pins the keep-set: constant CBR per frame
        res = evaluate_sequences(
            [clip], small_models, ChannelConfig("awgn", 10.0), 4, 0,
            mask_mode="first_k", fixed_channels=8,
        )
        assert res["cbr"] > 0
        from videojscc.pipeline import transmit_sequence

        out = transmit_sequence(
            clip, small_models, ChannelConfig("awgn", 10.0), 4, seed=0,
            mask_mode="first_k", fixed_channels=8,
        )
        p_cbrs = {st.cbr for st in out.stats[1:]}
        assert len(p_cbrs) == 1

    def test_rate_matching_enforced(self, small_models, clip):
        # a variant at wildly different bandwidth gets no delta, only a flag
        variants = {
            "full": (small_models, AblationFlags()),
            "no_mem": (small_models, AblationFlags(mem_enabled=False, fixed_channels=1)),
        }
        rows = run_ablation(variants, [clip], ChannelConfig("awgn", 10.0), 4, seed=0)
        by_name = {r["variant"]: r for r in rows}
        assert by_name["no_mem"]["rate_matched"] == 0
        assert by_name["no_mem"]["psnr_delta_pct"] is None

    def test_missing_full_reference(self, small_models):
        with pytest.raises(EvalError):
            run_ablation({"a": (small_models, AblationFlags())}, [], ChannelConfig("awgn", 10.0), 4)
