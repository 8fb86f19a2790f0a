"""Acceptance gate: every criterion as one test, one pass line per criterion.

Run with `pytest tests/test_acceptance.py -v -s`. The trained fixtures run the
full staged training on synthetic desk-scale clips (CPU); set
VIDEOJSCC_TEST_CACHE=<dir> to reuse checkpoints across local iterations.
"""

import math

import pytest
import torch
import torch.nn.functional as F

from videojscc.channel import ChannelConfig, awgn, power_normalize, sigma_from_csnr
from videojscc.evalsuite import conv_macs, count_module, flops_report, frame_trace
from videojscc.layers import GDN, warp
from videojscc.mem import (
    MEM,
    Mask,
    channel_entropy_summary,
    deserialize_mask,
    gaussian_nll,
    policy_mask,
    serialize_mask,
)
from videojscc.metrics import frame_cbr
from videojscc.models import ArchConfig, VideoCodec, build_models
from videojscc.pipeline import encoder_outputs_noise_invariant, transmit_gop, transmit_sequence
from videojscc.videodata import Gop, synth_moving_squares

def _mean_eval_popcount(models: VideoCodec, data) -> float:
    models.eval()
    counts = []
    with torch.no_grad():
        for seq in data:
            for f in seq.frames:
                y = models.iframe_enc(f.pixels.unsqueeze(0))
                decision, _ = models.mem_i.decide_mask(y, None, mode="eval")
                counts.append(float(decision.hard.sum()))
    return sum(counts) / len(counts)


def test_criterion_1_channel_statistics():
    n = 1_000_000
    base = power_normalize(torch.randn(n, generator=torch.Generator().manual_seed(0)), 1.0)
    for csnr in (0.0, 10.0, 25.0):
        out = awgn(base, sigma_from_csnr(csnr), seed=17)
        noise_power = float(torch.mean((out.values - base.values) ** 2))
        measured = 10.0 * math.log10(1.0 / noise_power)
        assert abs(measured - csnr) <= 0.3, f"CSNR {csnr}: measured {measured:.3f} dB"
    print("[ACCEPTANCE 1] PASS - AWGN empirical SNR within 0.3 dB at 0/10/25 dB over 1e6 symbols")


def test_criterion_2_power_constraint():
    g = torch.Generator().manual_seed(1)
    for k in range(1000):
        length = int(torch.randint(8, 4096, (1,), generator=g))
        s = torch.randn(length, generator=g) * float(1.0 + 9.0 * torch.rand(1, generator=g))
        out = power_normalize(s, 1.0)
        ms = float(torch.mean(out.values**2))
        assert abs(ms - 1.0) <= 1e-6, f"payload {k}: mean square {ms}"
    print("[ACCEPTANCE 2] PASS - mean squared symbol 1.0 +- 1e-6 on 1000 random payloads")


def test_criterion_3_bandwidth_arithmetic():
    bits = torch.zeros(64)
    bits[:16] = 1
    assert frame_cbr(bits, 256, 256) == pytest.approx(0.020833333333, abs=1e-9)
    torch.manual_seed(2)
    mem = MEM(64)
    g = torch.Generator().manual_seed(2)
    h = w = 64
    with torch.no_grad():
        tilde = torch.randn(1, 64, h // 16, w // 16, generator=g)
        for k in range(1000):
            mask_bits = (torch.rand(64, generator=g) < torch.rand(1, generator=g)).float()
            payload = mem.encoder.pack(tilde, Mask(mask_bits, k))
            by_formula = frame_cbr(mask_bits, h, w)
            by_payload = payload.symbols.numel() / (3.0 * h * w)
            assert by_formula == by_payload, f"mask {k}: {by_formula} != {by_payload}"
    print("[ACCEPTANCE 3] PASS - R_t formula equals payload-length counting on 1000 random masks")


def test_criterion_4_mask_wire_format():
    blob = serialize_mask(Mask(torch.ones(64), 0))
    assert len(blob) == 16
    g = torch.Generator().manual_seed(3)
    total = 0
    for c in (1, 32, 64, 500):
        for k in range(2500):
            bits = (torch.rand(c, generator=g) < 0.5).float()
            m = Mask(bits, frame_index=k)
            back = deserialize_mask(serialize_mask(m))
            assert back.frame_index == k and torch.equal(back.bits, m.bits)
            total += 1
    assert total == 10_000
    print("[ACCEPTANCE 4] PASS - bit-exact mask round trip for 1e4 masks, C in {1,32,64,500}; C=64 blob is 16 bytes")


def test_criterion_5_asymmetric_context_contract():
    models = build_models(ArchConfig(), seed=0)  # default pinned architecture
    clip = synth_moving_squares(2, 5, (64, 64), (0, 1), seed=9)
    gop = Gop(clip.frames)
    cfg = ChannelConfig("awgn", 10.0)
    assert encoder_outputs_noise_invariant(gop, models, cfg, seeds=(101, 202))
    a = transmit_gop(gop, models, cfg, seed=101)
    b = transmit_gop(gop, models, cfg, seed=202)
    diff = max(
        float(torch.max(torch.abs(x.pixels - y.pixels)))
        for x, y in zip(a.reconstructions, b.reconstructions)
    )
    assert diff > 0.0
    print("[ACCEPTANCE 5] PASS - encoder artifacts bitwise identical across channel seeds; decoder outputs differ under noise")


def test_criterion_6_straight_through_gating():
    torch.manual_seed(4)
    mem = MEM(16)
    y = torch.randn(1, 16, 4, 4)
    params = mem.entropy(y, None, mode="parallel")
    logits = mem.policy(channel_entropy_summary(params))
    assert logits.shape == (1, 16, 2)
    # non-saturated logits around zero guarantee a keep/drop mix in the draw
    gen = torch.Generator().manual_seed(12)
    logits_leaf = torch.randn(1, 16, 2, generator=gen).requires_grad_(True)
    decision = policy_mask(logits_leaf, temperature=1.0, mode="train", seed=11)
    assert set(decision.hard.detach().unique().tolist()) <= {0.0, 1.0}

    tilde = mem.encoder(y).detach().requires_grad_(True)
    z = tilde * decision.hard.view(1, 16, 1, 1)
    recon = mem.decoder(z)
    distortion = F.mse_loss(recon, torch.zeros_like(recon))
    distortion.backward()
    assert logits_leaf.grad is not None and float(logits_leaf.grad.abs().sum()) > 0.0
    dropped = decision.hard.detach()[0] == 0
    assert dropped.any(), "seeded draw must drop at least one channel"
    assert torch.all(tilde.grad[0, dropped] == 0.0)
    kept = ~dropped
    assert float(tilde.grad[0, kept].abs().sum()) > 0.0
    print("[ACCEPTANCE 6] PASS - binary forward mask, nonzero policy-logit grads, exact-zero grads on dropped channels")


def _fd_check(fn, x0: torch.Tensor, eps: float = 1e-3) -> float:
    x = x0.clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.clone()
    fd = torch.zeros_like(x0)
    flat, fdf = x0.reshape(-1), fd.reshape(-1)
    probe = x0.clone()
    pf = probe.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        pf[i] = orig + eps
        hi = float(fn(probe))
        pf[i] = orig - eps
        lo = float(fn(probe))
        pf[i] = orig
        fdf[i] = (hi - lo) / (2 * eps)
    denom = max(float(analytic.norm()), float(fd.norm()), 1e-12)
    return float((analytic - fd).norm()) / denom


def test_criterion_7_gradient_checks():
    torch.manual_seed(5)
    # warp w.r.t. flow on a random 4x8x8 feature
    feat = torch.randn(1, 4, 8, 8)
    w_flow = torch.randn(1, 4, 8, 8)
    flow0 = (torch.rand(1, 2, 8, 8) - 0.5) * 2.0
    err_warp = _fd_check(lambda fl: (warp(feat, fl) * w_flow).sum(), flow0)
    assert err_warp < 1e-2, f"warp rel err {err_warp}"

    gdn = GDN(4)
    x0 = torch.randn(1, 4, 8, 8)
    w_gdn = torch.randn(1, 4, 8, 8)
    err_gdn = _fd_check(lambda z: (gdn(z) * w_gdn).sum(), x0)
    assert err_gdn < 1e-2, f"GDN rel err {err_gdn}"

    mem = MEM(4)
    w_enc = torch.randn(1, 4, 8, 8)
    err_enc = _fd_check(lambda z: (mem.encoder(z) * w_enc).sum(), torch.randn(1, 4, 8, 8))
    assert err_enc < 1e-2, f"MEM encoder stack rel err {err_enc}"
    err_dec = _fd_check(lambda z: (mem.decoder(z) * w_enc).sum(), torch.randn(1, 4, 8, 8))
    assert err_dec < 1e-2, f"MEM decoder stack rel err {err_dec}"
    print(
        f"[ACCEPTANCE 7] PASS - FD gradient checks at float32: warp {err_warp:.1e}, "
        f"GDN {err_gdn:.1e}, MEM stacks {max(err_enc, err_dec):.1e} (< 1e-2)"
    )


def test_criterion_8_entropy_model_causality_and_quality(smoke):
    torch.manual_seed(6)
    probe = MEM(4).entropy
    y = torch.randn(1, 4, 4, 4)
    base = probe.autoregressive_features(y)
    for pi in range(4):
        for pj in range(4):
            y2 = y.clone()
            y2[:, :, pi, pj] += 0.7
            out = probe.autoregressive_features(y2)
            for qi in range(4):
                for qj in range(4):
                    if (qi, qj) <= (pi, pj):
                        assert torch.allclose(out[:, :, qi, qj], base[:, :, qi, qj], atol=1e-6)

    models = smoke["models"]
    frame = smoke["data"][0].frames[0]
    models.eval()
    with torch.no_grad():
        latent = models.iframe_enc(frame.pixels.unsqueeze(0))
        params = models.mem_i.entropy(latent, None, mode="autoregressive")
        nll_model = float(gaussian_nll(latent, params))
        mu_c = latent.mean()
        var_c = latent.var(unbiased=False).clamp(min=1e-9)
        nll_const = float(0.5 * torch.log(2 * math.pi * var_c) + 0.5)
    assert nll_model < nll_const, f"model NLL {nll_model:.4f} vs constant fit {nll_const:.4f}"
    print(
        f"[ACCEPTANCE 8] PASS - AR branch raster-causal on 4x4; trained NLL {nll_model:.3f} "
        f"beats constant-Gaussian fit {nll_const:.3f}"
    )


def test_criterion_9_temporal_exploitation_smoke(smoke):
    models = smoke["models"]
    data = smoke["data"][0]
    chan = ChannelConfig("awgn", 300.0, 1.0, 0)  # noiseless at float32
    res = transmit_sequence(data, models, chan, gop_n=4, seed=1)
    psnrs = [st.psnr_db for st in res.stats]
    cbrs = [st.cbr for st in res.stats]
    i_idx = [0, 4]
    p_idx = [1, 2, 3]
    for i, p in enumerate(psnrs):
        assert p >= 30.0, f"frame {i} PSNR {p:.2f} < 30 dB"
    i_cbr = sum(cbrs[i] for i in i_idx) / len(i_idx)
    p_cbr = sum(cbrs[i] for i in p_idx) / len(p_idx)
    assert p_cbr < i_cbr, f"P CBR {p_cbr:.5f} !< I CBR {i_cbr:.5f}"
    print(
        f"[ACCEPTANCE 9] PASS - overfit static clip: PSNR {['%.1f' % p for p in psnrs]} dB (all >= 30), "
        f"P-frame CBR {p_cbr:.5f} < I-frame CBR {i_cbr:.5f}"
    )


def test_criterion_10_rate_control_monotonicity(rate_runs):
    pop_low = _mean_eval_popcount(rate_runs[1e-3]["models"], rate_runs[1e-3]["data"])
    pop_high = _mean_eval_popcount(rate_runs[1e-2]["models"], rate_runs[1e-2]["data"])
    assert pop_high < pop_low, f"popcount at lambda=1e-2 ({pop_high}) !< lambda=1e-3 ({pop_low})"
    print(
        f"[ACCEPTANCE 10] PASS - mean eval-mask popcount {pop_high:.2f} @ lambda=1e-2 "
        f"< {pop_low:.2f} @ lambda=1e-3"
    )


def test_criterion_11_error_accumulation_report(smoke):
    models = smoke["models"]
    clip = synth_moving_squares(2, 32, (64, 64), (0, 1), seed=21)
    trace = frame_trace(clip, models, ChannelConfig("awgn", 10.0, 1.0, 0), gop_n=32, seed=3)
    idx = trace["frame_index"]
    assert idx == sorted(idx) and len(idx) == 32
    assert trace["iframe_positions"] == [0]
    assert all(math.isfinite(v) for v in trace["psnr_db"])
    assert all(math.isfinite(v) for v in trace["ms_ssim"])
    assert all(math.isfinite(v) and v >= 0 for v in trace["cbr"])
    drop = trace["psnr_db"][1] - trace["psnr_db"][-1]
    print(
        f"[ACCEPTANCE 11] PASS - 32-frame GOP-32 trace at 10 dB finite everywhere; "
        f"PSNR drop first->last P-frame: {drop:+.2f} dB "
        f"(first P {trace['psnr_db'][1]:.2f}, last P {trace['psnr_db'][-1]:.2f})"
    )


def test_criterion_12_flops_counter():
    import torch.nn as nn

    conv = nn.Conv2d(3, 64, 3, padding=1)
    recs = count_module(conv, (torch.zeros(1, 3, 256, 256),))
    assert recs[0].macs == 113_246_208 == conv_macs(3, 64, 3, 256, 256)
    assert recs[0].params == 1792

    from videojscc.layers import DepthConv

    dsc = DepthConv(16, 24, kernel=3)
    recs = count_module(dsc, (torch.zeros(1, 16, 32, 32),))
    macs = {r.name: r.macs for r in recs}
    assert macs["depthwise"] == 16 * 9 * 32 * 32 == 147_456
    assert macs["pointwise"] == 16 * 24 * 32 * 32 == 393_216

    s2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
    recs = count_module(s2, (torch.zeros(1, 16, 64, 64),))
    assert recs[0].macs == 16 * 32 * 9 * 32 * 32 == 4_718_592

    models = build_models(ArchConfig(16, 16, 12, 2), seed=0)
    a = flops_report(models, (1, 3, 64, 64))
    b = flops_report(models, (1, 3, 64, 64))
    assert a == b
    print("[ACCEPTANCE 12] PASS - hand-derived MAC counts match exactly; report regenerates deterministically")
