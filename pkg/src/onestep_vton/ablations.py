"""Ablation sweeps: cross-attention, noise level, overlap threshold,
plug-and-play post-processing, multi-step trade-off and condition drops.

Every sweep shares seeds across its arms so rows differ only in the ablated
component; tables come back in the same row format the run logs use.
"""

from __future__ import annotations

import copy
import json

import torch

from . import evalmetrics
from .config import PipelineConfig
from .pipeline import InferenceOptions, infer
from .postproc import applying_rate, conditional_post, labels_to_parsing_logits, plugin_post
from .preprocess import mutable_mask
from .synthdata import Sample, garment_cloth_label, gen_sample
from .tryonnet import TryOnUNet, derive_seed, make_global_encoder
from .warpnet import WarpModule

BODY_LABELS = (4, 5, 6, 7, 8)


def _synthetic_set(cfg: PipelineConfig, count: int, garment_type: str) -> list[Sample]:
    return [
        gen_sample(cfg.seed + i, tuple(cfg.resolution), garment_type,
                   pyramid_depth=cfg.warp.num_scales)
        for i in range(count)
    ]


def noisy_pred_parsing(sample: Sample, seed: int) -> torch.Tensor:
    """Simulates an imperfect predicted parsing: shifted and eroded body parts.

    Severity varies per seed so the per-part overlap ratios spread across
    the threshold sweep range instead of clustering at 1.0.
    """
    gen = torch.Generator().manual_seed(seed)
    labels = sample.parsing.clone()
    dx = int(torch.randint(-2, 3, (1,), generator=gen))
    dy = int(torch.randint(-2, 3, (1,), generator=gen))
    shifted = torch.roll(labels, shifts=(dy, dx), dims=(0, 1))
    drop_p = float(torch.rand(1, generator=gen)) * 0.3
    keep = torch.rand(labels.shape, generator=gen) >= drop_p
    is_body = torch.isin(shifted, torch.tensor(BODY_LABELS))
    out = torch.where(is_body & ~keep, torch.zeros_like(shifted), shifted)
    return out


def corrupted_output(sample: Sample, seed: int) -> torch.Tensor:
    """Stand-in for an external try-on result: gt with noise in the mutable
    region (body parts damaged, preserved content intact)."""
    gen = torch.Generator().manual_seed(seed)
    noise = torch.randn(sample.gt_tryon.shape, generator=gen) * 0.4
    damaged = (sample.gt_tryon + noise).clamp(-1, 1)
    region = mutable_mask(sample.parsing, sample.garment_type)
    return torch.where(region, damaged, sample.gt_tryon)


def ablate_threshold(cfg: PipelineConfig, count: int = 200,
                     thresholds=(0.75, 0.80, 0.85, 0.90, 0.95, 1.0)) -> list[dict]:
    """Overlap-threshold sweep over one fixed synthetic evaluation set."""
    samples = _synthetic_set(cfg, count, "upper")
    preds = [
        labels_to_parsing_logits(
            noisy_pred_parsing(s, derive_seed(cfg.seed, "thresh-pred", i)),
            garment_cloth=garment_cloth_label(s.garment_type),
        )
        for i, s in enumerate(samples)
    ]
    corrupted = [
        corrupted_output(s, derive_seed(cfg.seed, "thresh-corrupt", i))
        for i, s in enumerate(samples)
    ]
    rows = []
    for t in thresholds:
        equality = t >= 1.0
        reports = []
        ssims = []
        for s, pred, bad in zip(samples, preds, corrupted):
            restored, report = conditional_post(
                bad, s.person, pred, s.parsing, threshold=t, equality_mode=equality
            )
            reports.append(report)
            ssims.append(evalmetrics.ssim(restored, s.gt_tryon))
        rows.append({
            "Method": f"R_overlap {'=' if equality else '>'} {t:.2f}",
            "threshold": t,
            "SSIM↑": sum(ssims) / len(ssims),
            "AR(%)": applying_rate(reports),
        })
    return rows


def ablate_attention(cfg: PipelineConfig, args) -> list[dict]:
    from .training import WarpTrainer

    samples = _synthetic_set(cfg, args.samples, args.garment_type)
    rows = []
    for use_attention in (False, True):
        name = "Attn" if use_attention else "No_Attn"
        trainer = WarpTrainer(cfg, samples, use_attention=use_attention)
        nparam = sum(p.numel() for p in trainer.net.parameters())
        l1_before = trainer.warped_garment_l1()
        if args.steps > 0:
            trainer.train(args.steps)
        rows.append({
            "Method": name,
            "nParam(M)": nparam / 1e6,
            "warped-L1 step0": l1_before,
            f"warped-L1 step{args.steps}": trainer.warped_garment_l1(),
        })
    return rows


def ablate_noise(cfg: PipelineConfig, args) -> list[dict]:
    from .training import TryOnTrainer

    samples = _synthetic_set(cfg, args.samples, args.garment_type)
    encoder = make_global_encoder(cfg.tryon.encoder_id, cfg.tryon.embedding_dim)
    rows = []
    for alpha in (2.0, 5.0, 7.0):
        run_cfg = copy.deepcopy(cfg)
        run_cfg.tryon.noise_alpha = alpha
        trainer = TryOnTrainer(run_cfg, samples)
        if args.steps > 0:
            trainer.train(args.steps)
        trainer.net.eval()
        for use_post in (False, True):
            options = InferenceOptions(oracle_warp=True, use_conditional_post=use_post)
            ssims, l1s = [], []
            for s in samples:
                res = infer(s, None, trainer.net, encoder, run_cfg,
                            options=options, seed=run_cfg.seed)
                ssims.append(evalmetrics.ssim(res.image, s.gt_tryon))
                l1s.append(evalmetrics.paired_masked_l1(
                    res.image, s.gt_tryon, s.parsing, s.garment_type))
            rows.append({
                "Method": f"alpha_n = {alpha:g} "
                          f"({'post-processing' if use_post else 'w/o post-processing'})",
                "LPIPS↓": sum(l1s) / len(l1s),
                "SSIM↑": sum(ssims) / len(ssims),
            })
    return rows


def ablate_conditions(cfg: PipelineConfig, args, tryon_net: TryOnUNet | None) -> list[dict]:
    samples = _synthetic_set(cfg, args.samples, args.garment_type)
    encoder = make_global_encoder(cfg.tryon.encoder_id, cfg.tryon.embedding_dim)
    if tryon_net is None:
        tryon_net = TryOnUNet(cfg.tryon, tuple(cfg.resolution))
    tryon_net.eval()
    variants = [
        ("Ours", InferenceOptions(oracle_warp=True)),
        ("w/o Unconditional Postprocessing",
         InferenceOptions(oracle_warp=True, use_unconditional_post=False)),
        ("w/o Noise Condition Image",
         InferenceOptions(oracle_warp=True, noise_source="pure")),
        ("w/o Global Condition",
         InferenceOptions(oracle_warp=True, zero_global_embedding=True)),
        ("w/o Densepose Condition",
         InferenceOptions(oracle_warp=True, zero_densepose=True)),
    ]
    rows = []
    for name, options in variants:
        ssims, l1s = [], []
        for s in samples:
            res = infer(s, None, tryon_net, encoder, cfg, options=options,
                        seed=cfg.seed)
            ssims.append(evalmetrics.ssim(res.image, s.gt_tryon))
            l1s.append(evalmetrics.paired_masked_l1(
                res.image, s.gt_tryon, s.parsing, s.garment_type))
        rows.append({
            "Method": name,
            "LPIPS↓": sum(l1s) / len(l1s),
            "SSIM↑": sum(ssims) / len(ssims),
        })
    return rows


def ablate_postproc(cfg: PipelineConfig, args) -> list[dict]:
    """Plug-and-play restoration of an external method's damaged output."""
    samples = _synthetic_set(cfg, args.samples, args.garment_type)
    rows = []
    before_ssim, after_ssim, reports = [], [], []
    for i, s in enumerate(samples):
        bad = corrupted_output(s, derive_seed(cfg.seed, "pp-corrupt", i))
        restored, report = plugin_post(
            bad, s.person, s.parsing, s.parsing,
            threshold=cfg.postproc.overlap_threshold,
            equality_mode=cfg.postproc.equality_mode,
        )
        before_ssim.append(evalmetrics.ssim(bad, s.gt_tryon))
        after_ssim.append(evalmetrics.ssim(restored, s.gt_tryon))
        reports.append(report)
    rows.append({"Method": "external + w/o postprocessing",
                 "SSIM↑": sum(before_ssim) / len(before_ssim)})
    rows.append({"Method": "external + postprocessing",
                 "SSIM↑": sum(after_ssim) / len(after_ssim),
                 "AR(%)": applying_rate(reports)})
    return rows


def ablate_ddim(cfg: PipelineConfig, args) -> list[dict]:
    from .tryonnet import ddim_sample

    resolution = tuple(cfg.resolution)
    single = TryOnUNet(cfg.tryon, resolution).eval()
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

    rows = []
    stats = evalmetrics.timing_bench(one_step, [batch], repeats=3)
    rows.append({"Method": "Ours (single step)", "T(s)↓": stats.mean_seconds_per_batch})
    for steps in (10, 100):
        def pipeline(data, steps=steps):
            with torch.no_grad():
                return ddim_sample(multi, data["cond"], data["dense"], data["emb"],
                                   steps=steps, seed=cfg.seed)

        stats = evalmetrics.timing_bench(pipeline, [batch], repeats=3)
        rows.append({"Method": f"DDIM* ({steps} steps)",
                     "T(s)↓": stats.mean_seconds_per_batch})
    return rows


def run_ablation(which: str, cfg: PipelineConfig, args, out) -> str:
    tryon_net = None
    if getattr(args, "tryon_checkpoint", None):
        from .cli import _load_tryon

        tryon_net = _load_tryon(args.tryon_checkpoint, cfg)
    if which == "threshold":
        rows = ablate_threshold(cfg, count=args.samples)
        columns = ["Method", "SSIM↑", "AR(%)"]
    elif which == "attention":
        rows = ablate_attention(cfg, args)
        columns = list(rows[0].keys())
    elif which == "noise":
        rows = ablate_noise(cfg, args)
        columns = ["Method", "LPIPS↓", "SSIM↑"]
    elif which == "conditions":
        rows = ablate_conditions(cfg, args, tryon_net)
        columns = ["Method", "LPIPS↓", "SSIM↑"]
    elif which == "postproc":
        rows = ablate_postproc(cfg, args)
        columns = ["Method", "SSIM↑", "AR(%)"]
    elif which == "ddim":
        rows = ablate_ddim(cfg, args)
        columns = ["Method", "T(s)↓"]
    else:
        raise ValueError(f"unknown ablation '{which}'")
    (out / f"ablation_{which}.json").write_text(
        json.dumps(rows, indent=2, sort_keys=True)
    )
    return evalmetrics.render_markdown_table(rows, columns=columns)
