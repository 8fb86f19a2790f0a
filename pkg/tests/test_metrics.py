import pytest
import torch

from videojscc.metrics import (
    FrameStats,
    MetricsError,
    frame_cbr,
    gop_cbr,
    ms_ssim,
    psnr,
    read_stats_csv,
    write_stats_csv,
)
from videojscc.videodata import Frame


class TestPsnr:
    def test_identical_capped_at_100(self):
        x = Frame(torch.rand(3, 32, 32))
        assert psnr(x, x) == 100.0

    def test_zeros_vs_ones_is_zero_db(self):
        assert psnr(torch.zeros(3, 16, 16), torch.ones(3, 16, 16)) == pytest.approx(0.0, abs=1e-9)

    def test_constant_half_difference(self):
        # MSE = 0.25 -> 10*log10(4) = 6.020599913279624 dB
        a = torch.zeros(3, 8, 8)
        b = torch.full((3, 8, 8), 0.5)
        assert psnr(a, b) == pytest.approx(6.020599913279624, abs=1e-9)

    def test_symmetry(self):
        g = torch.Generator().manual_seed(0)
        a, b = torch.rand(3, 16, 16, generator=g), torch.rand(3, 16, 16, generator=g)
        assert psnr(a, b) == pytest.approx(psnr(b, a), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(MetricsError):
            psnr(torch.zeros(3, 8, 8), torch.zeros(3, 4, 4))


class TestMsSsim:
    def test_identical_is_one(self):
        x = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(1))
        assert ms_ssim(x, x) == pytest.approx(1.0, abs=1e-9)

    def test_inverted_scores_below_one(self):
        x = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(2))
        assert ms_ssim(x, 1.0 - x) < 1.0

    def test_luminance_shift_stability(self):
        g = torch.Generator().manual_seed(3)
        x = torch.rand(3, 64, 64, generator=g) * 0.9
        y = (x + 0.05 * torch.rand(3, 64, 64, generator=g)).clamp(0, 1) * 0.98
        base = ms_ssim(x, y)
        shifted = ms_ssim((x + 0.01).clamp(0, 1), (y + 0.01).clamp(0, 1))
        assert abs(base - shifted) < 1e-3

    def test_too_small_image_errors(self):
        with pytest.raises(MetricsError):
            ms_ssim(torch.rand(3, 8, 8), torch.rand(3, 8, 8))

    def test_scale_auto_reduction_small_image(self):
        # 64px supports 3 scales of the 11x11 window; must not raise
        x = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(4))
        y = x.clone()
        y[:, ::2] = (y[:, ::2] + 0.1).clamp(0, 1)
        s = ms_ssim(x, y)
        assert 0.0 <= s <= 1.0

    def test_symmetry(self):
        g = torch.Generator().manual_seed(5)
        a, b = torch.rand(3, 64, 64, generator=g), torch.rand(3, 64, 64, generator=g)
        assert ms_ssim(a, b) == pytest.approx(ms_ssim(b, a), abs=1e-9)


class TestCbr:
    def test_sixteen_of_sixtyfour_at_256(self):
        # 16 * 16 * 16 / (3 * 256 * 256) = 4096 / 196608 = 0.0208333...
        bits = torch.zeros(64)
        bits[:16] = 1
        assert frame_cbr(bits, 256, 256) == pytest.approx(4096 / 196608, abs=1e-12)

    def test_empty_mask(self):
        assert frame_cbr(torch.zeros(64), 256, 256) == 0.0

    def test_full_mask_at_256(self):
        # 64 * 256 / 196608 = 0.08333...
        assert frame_cbr(torch.ones(64), 256, 256) == pytest.approx(64 * 256 / 196608, abs=1e-12)

    def test_non_multiple_of_16_errors(self):
        with pytest.raises(MetricsError):
            frame_cbr(torch.ones(64), 100, 256)

    def test_gop_cbr_mean(self):
        stats = [
            FrameStats(i, c, 30.0, 0.9, 0) for i, c in enumerate((0.04, 0.02, 0.02, 0.02))
        ]
        assert gop_cbr(stats) == pytest.approx(0.025, abs=1e-12)

    def test_gop_cbr_single_frame(self):
        stats = [FrameStats(0, 0.0123, 30.0, 0.9, 0)]
        assert gop_cbr(stats) == pytest.approx(0.0123)

    def test_gop_cbr_zeros(self):
        stats = [FrameStats(i, 0.0, 30.0, 0.9, 0) for i in range(3)]
        assert gop_cbr(stats) == 0.0


def test_stats_csv_round_trip(tmp_path):
    stats = [
        FrameStats(0, 0.0833333333, 31.25, 0.971, 20),
        FrameStats(1, 0.020833333, 33.5, 0.985, 40),
    ]
    p = tmp_path / "stats.csv"
    write_stats_csv(stats, p)
    header = p.read_text().splitlines()[0]
    assert header == "frame_index,cbr,psnr_db,ms_ssim,side_channel_bytes"
    back = read_stats_csv(p)
    assert len(back) == 2
    assert back[0].cbr == pytest.approx(stats[0].cbr, rel=1e-9)
    assert back[1].side_channel_bytes == 40
