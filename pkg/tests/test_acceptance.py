"""Acceptance suite: every release criterion, one test each, with its stated
tolerance and runtime budget. Each test prints one PASS/FAIL line (visible
with `pytest -s tests/test_acceptance.py`); the overfit-training fixture is
shared by the criteria that need trained desk networks."""

import math
import time

import numpy as np
import pytest
import torch

from onestep_vton import evalmetrics as em
from onestep_vton import postproc as pc
from onestep_vton import synthdata as sd
from onestep_vton import warploss as wl
from onestep_vton import warpnet as wn
from onestep_vton.cli import main as cli_main
from onestep_vton.config import TryOnLossWeights, WarpLossWeights, load_preset
from onestep_vton.pipeline import InferenceOptions, infer
from onestep_vton.tryonnet import NoiseConfig, TryOnUNet, add_noise, ddim_sample, make_global_encoder
from onestep_vton.training import TryOnTrainer, WarpTrainer

SIZE = (64, 48)


def _report(num: int, name: str, ok: bool, t0: float, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    extra = f" [{detail}]" if detail else ""
    print(f"[acceptance {num:02d}] {name}: {status} ({time.perf_counter() - t0:.1f}s){extra}")
    assert ok, f"criterion {num} ({name}) failed{extra}"


# ---------------------------------------------------------------------------
# 1. overlap-ratio oracle
# ---------------------------------------------------------------------------

def test_criterion_01_overlap_ratio_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    ok = True
    for _ in range(1000):
        density = rng.uniform(0.0, 1.0, size=2)
        pred = rng.random((32, 32)) < density[0]
        ref = rng.random((32, 32)) < density[1]
        expected = None if pred.sum() == 0 else float((pred & ref).sum() / pred.sum())
        got = pc.overlap_ratio(torch.from_numpy(pred), torch.from_numpy(ref))
        if expected is None:
            ok &= got is None
        else:
            ok &= got == expected
    elapsed_ok = time.perf_counter() - t0 < 5.0
    _report(1, "overlap-ratio matches pixel-count oracle", ok and elapsed_ok, t0)


# ---------------------------------------------------------------------------
# 2. post-processing exactness and idempotence
# ---------------------------------------------------------------------------

def test_criterion_02_postproc_exact_and_idempotent():
    t0 = time.perf_counter()
    ok = True
    for case in range(100):
        gen = torch.Generator().manual_seed(case)
        person = torch.rand(3, 24, 18, generator=gen) * 2 - 1
        output = torch.rand(3, 24, 18, generator=gen) * 2 - 1
        ref = torch.randint(0, 9, (24, 18), generator=gen)
        pred_labels = torch.where(
            torch.rand(24, 18, generator=gen) < 0.8, ref,
            torch.randint(0, 9, (24, 18), generator=gen),
        )
        logits = pc.labels_to_parsing_logits(pred_labels)
        once, report = pc.conditional_post(output, person, logits, ref, 0.8)
        twice, _ = pc.conditional_post(once, person, logits, ref, 0.8)
        ok &= torch.equal(once, twice)
        pred_masks = pc.predicted_part_masks(logits)
        ref_masks = pc.reference_part_masks(ref)
        for name, part in report.parts.items():
            overlap = pred_masks[name] & ref_masks[name]
            if part.applied:
                ok &= torch.equal(once[:, overlap], person[:, overlap])
            else:
                ok &= torch.equal(once[:, overlap], output[:, overlap])
    elapsed_ok = time.perf_counter() - t0 < 10.0
    _report(2, "conditional post copies bit-exactly and is idempotent",
            ok and elapsed_ok, t0)


# ---------------------------------------------------------------------------
# 3. threshold sweep monotonicity
# ---------------------------------------------------------------------------

def test_criterion_03_threshold_sweep_monotone():
    from onestep_vton.ablations import noisy_pred_parsing
    from onestep_vton.tryonnet import derive_seed

    t0 = time.perf_counter()
    samples = [sd.gen_sample(1000 + i, SIZE, "upper") for i in range(200)]
    preds = [
        pc.labels_to_parsing_logits(noisy_pred_parsing(s, derive_seed(0, "acc3", i)))
        for i, s in enumerate(samples)
    ]
    rates = []
    dummy = torch.zeros(3, *SIZE)
    for threshold in (0.75, 0.80, 0.85, 0.90, 0.95, 1.0):
        equality = threshold >= 1.0
        reports = []
        for s, logits in zip(samples, preds):
            _, report = pc.conditional_post(
                dummy, s.person, logits, s.parsing,
                threshold=threshold, equality_mode=equality,
            )
            reports.append(report)
        rates.append(pc.applying_rate(reports))
    monotone = all(a >= b for a, b in zip(rates, rates[1:]))
    spread = rates[0] > rates[-1]
    elapsed_ok = time.perf_counter() - t0 < 60.0
    _report(3, "applying rate monotone over threshold sweep",
            monotone and spread and elapsed_ok, t0,
            detail=" ".join(f"{r:.1f}" for r in rates))


# ---------------------------------------------------------------------------
# 4. warp identity and integer shifts
# ---------------------------------------------------------------------------

def test_criterion_04_warp_identity_and_shift():
    t0 = time.perf_counter()
    ok = True
    gen = torch.Generator().manual_seed(4)
    for case in range(50):
        x = torch.randn(2, 3, 20, 16, generator=gen)
        ok &= torch.equal(wn.warp(x, torch.zeros(2, 2, 20, 16)), x)
        dx = int(torch.randint(-4, 5, (1,), generator=gen))
        dy = int(torch.randint(-4, 5, (1,), generator=gen))
        flow = torch.zeros(2, 2, 20, 16)
        flow[:, 0] = dx
        flow[:, 1] = dy
        out = wn.warp(x, flow)
        ys = slice(max(dy, 0), 20 + min(dy, 0))
        xs = slice(max(dx, 0), 16 + min(dx, 0))
        src_ys = slice(max(-dy, 0), 20 - max(dy, 0))
        src_xs = slice(max(-dx, 0), 16 - max(dx, 0))
        ok &= torch.equal(out[:, :, ys, xs], x[:, :, src_ys, src_xs])
    elapsed_ok = time.perf_counter() - t0 < 5.0
    _report(4, "warp identity bit-exact, integer flows are shifts",
            ok and elapsed_ok, t0)


# ---------------------------------------------------------------------------
# 5. oracle warping over 100 seeds
# ---------------------------------------------------------------------------

def test_criterion_05_oracle_warp_reconstruction():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        s = sd.gen_sample(seed, SIZE, ("upper", "lower", "dress")[seed % 3])
        warped = wn.warp(s.garment, sd.oracle_flow(s))
        mask = sd.cloth_mask(s)
        worst = max(worst, float((warped - s.gt_tryon).abs().mean(0)[mask].mean()))
    ok = worst < 1.0 / 255.0
    elapsed_ok = time.perf_counter() - t0 < 30.0
    _report(5, "oracle flow reproduces gt garment region",
            ok and elapsed_ok, t0, detail=f"worst L1 {worst:.2e}")


# ---------------------------------------------------------------------------
# 6. attention correctness
# ---------------------------------------------------------------------------

def test_criterion_06_attention_matches_brute_force():
    t0 = time.perf_counter()
    q = torch.tensor([[[0.3, -1.2, 0.7, 0.1], [1.0, 0.4, -0.5, 0.9]]])
    k = torch.tensor([[[0.8, 0.1, -0.4, 0.3], [-0.2, 0.5, 1.1, -0.6]]])
    v = torch.tensor([[[1.0, 2.0, 3.0, 4.0], [-1.0, 0.5, 0.25, -2.0]]])
    out = wn.scaled_dot_attention(q, k, v, heads=1)
    weights = torch.softmax(q[0] @ k[0].T / math.sqrt(4.0), dim=-1)
    expected = (weights @ v[0]).unsqueeze(0)
    ok = bool(torch.allclose(out, expected, atol=1e-6))

    gen = torch.Generator().manual_seed(6)
    qq = torch.randn(3, 10, 8, generator=gen)
    kk = torch.randn(3, 7, 8, generator=gen)
    vv = torch.randn(3, 7, 8, generator=gen)
    _, w = wn.scaled_dot_attention(qq, kk, vv, heads=4, return_weights=True)
    sums = w.sum(dim=-1)
    ok &= bool(torch.allclose(sums, torch.ones_like(sums), atol=1e-6))
    elapsed_ok = time.perf_counter() - t0 < 5.0
    _report(6, "cross-attention matches softmax(QK^T/sqrt(d))V",
            ok and elapsed_ok, t0)


# ---------------------------------------------------------------------------
# 7. finite-difference gradient check
# ---------------------------------------------------------------------------

def test_criterion_07_fusion_block_gradcheck():
    t0 = time.perf_counter()
    torch.manual_seed(7)
    block = wn.FusionBlock(8, use_attention=True, heads=2, max_disp=2,
                           hidden=(16, 8)).double()
    with torch.no_grad():
        for p in block.parameters():
            p.add_(torch.randn_like(p) * 0.05)
    g = torch.randn(1, 8, 8, 6, dtype=torch.float64)
    p_feat = torch.randn(1, 8, 8, 6, dtype=torch.float64)
    flow_in = 0.5 + 0.2 * torch.rand(1, 2, 8, 6, dtype=torch.float64)
    proj_f = torch.randn(1, 2, 8, 6, dtype=torch.float64)
    proj_s = torch.randn(1, 7, 8, 6, dtype=torch.float64)

    def loss_fn():
        flow, logits = block(g, p_feat, flow_in)
        return (flow * proj_f).sum() + (logits * proj_s).sum()

    loss = loss_fn()
    params = [p for p in block.parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, params)

    rng = np.random.default_rng(7)
    eps = 1e-4
    max_rel = 0.0
    probes = 0
    flat_index = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    for i, j in [flat_index[k] for k in rng.choice(len(flat_index), 64, replace=False)]:
        p = params[i]
        with torch.no_grad():
            orig = p.view(-1)[j].item()
            p.view(-1)[j] = orig + eps
            up = loss_fn().item()
            p.view(-1)[j] = orig - eps
            down = loss_fn().item()
            p.view(-1)[j] = orig
        fd = (up - down) / (2 * eps)
        ad = grads[i].view(-1)[j].item()
        rel = abs(fd - ad) / max(abs(fd) + abs(ad), 1e-8)
        max_rel = max(max_rel, rel)
        probes += 1
    ok = probes == 64 and max_rel < 1e-4
    elapsed_ok = time.perf_counter() - t0 < 60.0
    _report(7, "finite differences agree with autodiff", ok and elapsed_ok, t0,
            detail=f"max rel err {max_rel:.2e}")


# ---------------------------------------------------------------------------
# 8. loss zero cases and weighted sums
# ---------------------------------------------------------------------------

def test_criterion_08_loss_zero_cases_and_sums():
    t0 = time.perf_counter()
    ok = True
    x = torch.rand(3, 8, 8, dtype=torch.float64)
    ok &= float(wl.l1_warp(x, x, torch.ones(8, 8))) < 1e-6
    ok &= float(wl.perceptual(x, x, wl.IdentityFeatureNet())) < 1e-6
    labels = torch.randint(0, 7, (1, 8, 8))
    hot = torch.nn.functional.one_hot(labels, 7).permute(0, 3, 1, 2).double()
    ok &= float(wl.parsing_ce(hot * 40.0, labels)) < 1e-6
    ok &= float(wl.parsing_l1(hot, hot.clone())) < 1e-6
    const = torch.full((6,), 1.3, dtype=torch.float64)
    ok &= abs(float(wl.adversarial_relativistic(const, const.clone(), "generator")) - 1.0) < 1e-6
    ok &= float(wl.tv_loss(torch.full((1, 2, 6, 6), 2.0, dtype=torch.float64))) < 1e-6
    yy, xx = torch.meshgrid(torch.arange(6.0), torch.arange(6.0), indexing="ij")
    affine = torch.stack([xx * 2 + yy, yy * 0.5]).unsqueeze(0).double()
    ok &= float(wl.second_order_smooth(affine)) < wl.CHARBONNIER_EPS + 1e-6

    uniform = torch.zeros(1, 7, 5, 5, dtype=torch.float64)
    ok &= abs(float(wl.parsing_ce(uniform, labels[..., :5, :5])) - math.log(7)) < 1e-6

    gen = torch.Generator().manual_seed(8)
    parts = {k: torch.rand((), dtype=torch.float64, generator=gen)
             for k in ("l1", "perceptual", "ce", "parsing_l1", "adversarial",
                       "tv", "second_order")}
    w = WarpLossWeights()
    total, _ = wl.total_warp_loss(parts, w)
    manual = (parts["l1"] + w.alpha_per * parts["perceptual"] + w.alpha_ce * parts["ce"]
              + w.alpha_m * parts["parsing_l1"] + w.alpha_adv * parts["adversarial"]
              + w.alpha_tv * parts["tv"] + w.alpha_sec * parts["second_order"])
    ok &= abs(float(total) - float(manual)) < 1e-6

    tparts = {k: torch.rand((), dtype=torch.float64, generator=gen)
              for k in ("l1", "perceptual", "adversarial")}
    tw = TryOnLossWeights()
    ttotal, _ = wl.total_tryon_loss(tparts, tw)
    tmanual = tparts["l1"] + tw.alpha_per * tparts["perceptual"] + tw.alpha_adv * tparts["adversarial"]
    ok &= abs(float(ttotal) - float(tmanual)) < 1e-6
    elapsed_ok = time.perf_counter() - t0 < 10.0
    _report(8, "loss zero cases and weighted-sum consistency", ok and elapsed_ok, t0)


# ---------------------------------------------------------------------------
# 9. noise statistics
# ---------------------------------------------------------------------------

def test_criterion_09_noise_statistics():
    t0 = time.perf_counter()
    z0 = torch.zeros(1, 1, 1000, 1000)
    z = add_noise(z0, NoiseConfig(alpha_n=5.0, rng_seed=9))
    diff = z - z0
    std = float(diff.std())
    mean = float(diff.mean())
    ok = 4.95 <= std <= 5.05 and -0.05 <= mean <= 0.05
    elapsed_ok = time.perf_counter() - t0 < 5.0
    _report(9, "fixed-ratio noise statistics", ok and elapsed_ok, t0,
            detail=f"std {std:.4f} mean {mean:.5f}")


# ---------------------------------------------------------------------------
# 10-12, 14: trained desk networks
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_overfit():
    cfg = load_preset("desk-64")
    samples = [sd.gen_sample(i, SIZE, "upper", pyramid_depth=cfg.warp.num_scales)
               for i in range(8)]
    t0 = time.perf_counter()
    warp_trainer = WarpTrainer(cfg, samples)
    warp_l1_before = warp_trainer.warped_garment_l1()
    warp_trainer.train(300)
    warp_l1_after = warp_trainer.warped_garment_l1()

    tryon_trainer = TryOnTrainer(cfg, samples)
    tryon_trainer.train(2000)
    tryon_masked_l1 = tryon_trainer.training_masked_l1()
    return {
        "cfg": cfg,
        "samples": samples,
        "warp_trainer": warp_trainer,
        "tryon_trainer": tryon_trainer,
        "warp_l1_before": warp_l1_before,
        "warp_l1_after": warp_l1_after,
        "tryon_masked_l1": tryon_masked_l1,
        "train_seconds": time.perf_counter() - t0,
    }


def test_criterion_10_overfit_smoke(desk_overfit):
    t0 = time.perf_counter()
    d = desk_overfit
    reduction = 1.0 - d["warp_l1_after"] / d["warp_l1_before"]
    ok = reduction >= 0.5 and d["tryon_masked_l1"] < 0.05
    budget_ok = d["train_seconds"] < 20 * 60
    _report(10, "desk overfit smoke", ok and budget_ok, t0,
            detail=(f"warp L1 {d['warp_l1_before']:.3f}->{d['warp_l1_after']:.3f} "
                    f"({100 * reduction:.0f}%), tryon masked L1 "
                    f"{d['tryon_masked_l1']:.4f}, train {d['train_seconds'] / 60:.1f} min"))


def test_criterion_11_single_step_speed_ratio(desk_overfit):
    t0 = time.perf_counter()
    d = desk_overfit
    cfg = d["cfg"]
    resolution = (128, 96)
    single = d["tryon_trainer"].net.eval()
    multi = TryOnUNet(cfg.tryon, resolution, time_conditioned=True).eval()
    b = 4
    batch = {
        "noise": torch.randn(b, 3, *resolution),
        "cond": torch.randn(b, 3, *resolution),
        "dense": torch.randn(b, 3, *resolution),
        "emb": torch.randn(b, cfg.tryon.embedding_dim),
    }

    def one_step(data):
        with torch.no_grad():
            return single(data["noise"], data["cond"], data["dense"], data["emb"])

    def hundred_steps(data):
        with torch.no_grad():
            return ddim_sample(multi, data["cond"], data["dense"], data["emb"],
                               steps=100, seed=0)

    fast = em.timing_bench(one_step, [batch], repeats=10)
    slow = em.timing_bench(hundred_steps, [batch], repeats=10)
    ratio = slow.mean_seconds_per_batch / fast.mean_seconds_per_batch
    ok = ratio >= 20.0
    elapsed_ok = time.perf_counter() - t0 < 300.0
    _report(11, "single-step at least 20x faster than 100-step sampling",
            ok and elapsed_ok, t0,
            detail=f"ratio {ratio:.1f}x ({fast.mean_seconds_per_batch:.3f}s vs "
                   f"{slow.mean_seconds_per_batch:.1f}s)")


def test_criterion_12_identity_preservation_end_to_end(desk_overfit):
    t0 = time.perf_counter()
    d = desk_overfit
    cfg = d["cfg"]
    net = d["tryon_trainer"].net.eval()
    encoder = make_global_encoder(cfg.tryon.encoder_id, cfg.tryon.embedding_dim)
    ok = True
    checked = 0
    for s in d["samples"][:4]:
        marks = sd.identity_mark_mask(s)
        if not bool(marks.any()):
            continue
        checked += 1
        exact = infer(
            s, None, net, encoder, cfg,
            options=InferenceOptions(oracle_warp=True, parsing_override=s.parsing),
        )
        ok &= torch.equal(exact.image[:, marks], s.person[:, marks])
        off = infer(
            s, None, net, encoder, cfg,
            options=InferenceOptions(oracle_warp=True, use_conditional_post=False),
        )
        ok &= float((off.image[:, marks] - s.person[:, marks]).abs().mean()) > 0
    ok &= checked > 0
    elapsed_ok = time.perf_counter() - t0 < 120.0
    _report(12, "skin marks restored bit-exactly by conditional post",
            ok and elapsed_ok, t0, detail=f"{checked} marked samples")


def test_criterion_13_config_fidelity():
    t0 = time.perf_counter()
    import json

    from onestep_vton.config import config_from_dict

    ok = True
    for name in ("viton-hd-256", "viton-hd-512", "dresscode-512"):
        cfg = load_preset(name)
        ok &= config_from_dict(json.loads(cfg.to_json())) == cfg
        ok &= cfg.warp.cross_attention_resolutions == [64, 32, 16, 8]
        ok &= cfg.warp.cross_attention_dropout == 0.2
        ok &= cfg.warp_optim.lr_g == 5e-6 and cfg.warp_optim.lr_d == 5e-6
        ok &= (cfg.warp_optim.beta1, cfg.warp_optim.beta2) == (0.5, 0.999)
        ok &= cfg.warp_optim.ema_decay is None
        ok &= cfg.tryon_optim.lr_g == 5e-5 and cfg.tryon_optim.lr_d == 5e-5
        ok &= (cfg.tryon_optim.beta1, cfg.tryon_optim.beta2) == (0.9, 0.999)
        ok &= cfg.tryon_optim.batch_size == 3 and cfg.tryon_optim.epochs == 500
        ok &= cfg.tryon_optim.ema_decay == 0.9999
        ok &= cfg.warp_loss.alpha_per == 0.2 and cfg.warp_loss.alpha_ce == 3.0
        ok &= cfg.warp_loss.alpha_m == 0.3 and cfg.warp_loss.alpha_adv == 0.1
        ok &= cfg.warp_loss.alpha_tv == 0.1 and cfg.warp_loss.alpha_sec == 6.0
        ok &= cfg.tryon_loss.alpha_per == 1.0 and cfg.tryon_loss.alpha_adv == 0.1
        ok &= cfg.tryon.noise_alpha == 5.0
        ok &= cfg.tryon.attention_dropout == 0.1
        ok &= cfg.tryon.res_blocks_per_scale == 2
        ok &= cfg.tryon.encoder_id == "clip:ViT-B/32"
        ok &= cfg.postproc.overlap_threshold == 0.8

    c256 = load_preset("viton-hd-256")
    ok &= c256.resolution == [256, 192]
    ok &= c256.warp.num_scales == 5
    ok &= c256.tryon.base_channels == 256
    ok &= c256.tryon.channel_multipliers == [1, 2, 2, 2, 4]
    ok &= c256.tryon.attention_resolutions == [64, 32]
    ok &= c256.warp_optim.batch_size == 8 and c256.warp_optim.epochs == 500

    for name in ("viton-hd-512", "dresscode-512"):
        c512 = load_preset(name)
        ok &= c512.resolution == [512, 384]
        ok &= c512.warp.num_scales == 6
        ok &= c512.tryon.base_channels == 128
        ok &= c512.tryon.channel_multipliers == [1, 1, 2, 2, 4]
        ok &= c512.tryon.attention_resolutions == [64, 32, 16]
        ok &= c512.warp_optim.batch_size == 4 and c512.warp_optim.epochs == 250
    elapsed_ok = time.perf_counter() - t0 < 5.0
    _report(13, "presets carry the reference recipe values verbatim", ok and elapsed_ok, t0)


def test_criterion_14_infer_determinism(desk_overfit, tmp_path):
    t0 = time.perf_counter()
    d = desk_overfit
    ckpt = tmp_path / "tryon.ckpt"
    d["tryon_trainer"].save(ckpt)
    warp_ckpt = tmp_path / "warp.ckpt"
    d["warp_trainer"].save(warp_ckpt)

    def run(out):
        rc = cli_main([
            "--preset", "desk-64", "--seed", "3", "--out", str(out),
            "infer", "--tryon-checkpoint", str(ckpt),
            "--warp-checkpoint", str(warp_ckpt), "--samples", "2",
        ])
        assert rc == 0
        return {
            p.name: p.read_bytes()
            for p in sorted(out.iterdir())
            if p.suffix in (".png", ".json")
        }

    first = run(tmp_path / "run1")
    second = run(tmp_path / "run2")
    ok = first.keys() == second.keys() and all(
        first[k] == second[k] for k in first
    )
    elapsed_ok = time.perf_counter() - t0 < 120.0
    _report(14, "repeated inference is byte-identical", ok and elapsed_ok, t0,
            detail=f"{len(first)} files compared")
