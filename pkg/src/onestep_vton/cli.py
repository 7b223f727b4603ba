"""Command-line entry point.

Subcommands: train-warp, train-tryon, infer, eval, ablate, bench,
plugin-post. Global flags may also come from environment variables with the
VTON_ prefix (VTON_CONFIG, VTON_PRESET, VTON_SEED, VTON_OUT, VTON_DEVICE).
Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import torch

from . import evalmetrics, postproc
from .config import ConfigError, PipelineConfig, load_config, load_preset, PRESET_NAMES
from .errors import DataError, NumericalError
from .io_utils import append_jsonl, contact_sheet, load_parse_png, load_png, save_png
from .pipeline import InferenceOptions, infer
from .synthdata import Sample, gen_sample, load_dataset
from .tryonnet import TryOnUNet, ddim_sample, make_global_encoder
from .warpnet import WarpModule

ENV_PREFIX = "VTON_"


def _env_default(name: str, fallback=None):
    return os.environ.get(ENV_PREFIX + name, fallback)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="onestep-vton",
        description="Two-stage virtual try-on: flow warping + single-pass "
                    "fixed-noise diffusion with mask-aware post-processing.",
    )
    parser.add_argument("--config", default=_env_default("CONFIG"),
                        help="JSON config file (overrides --preset)")
    parser.add_argument("--preset", default=_env_default("PRESET", "desk-64"),
                        help=f"named preset: {', '.join(PRESET_NAMES)}")
    parser.add_argument("--seed", type=int,
                        default=int(_env_default("SEED", "0")))
    parser.add_argument("--out", default=_env_default("OUT", "runs/out"),
                        help="output directory")
    parser.add_argument("--device", choices=("cpu", "gpu"),
                        default=_env_default("DEVICE", "cpu"))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-warp", help="train the warping module")
    _add_data_args(p)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--no-attention", action="store_true")

    p = sub.add_parser("train-tryon", help="train the try-on module")
    _add_data_args(p)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", default=None)
    p.add_argument("--warp-checkpoint", default=None,
                   help="use a trained warp module for conditions instead of "
                        "the exact synthetic transforms")

    p = sub.add_parser("infer", help="run full inference and write images")
    _add_data_args(p)
    p.add_argument("--warp-checkpoint", default=None)
    p.add_argument("--tryon-checkpoint", required=True)
    p.add_argument("--pairing", choices=("paired", "unpaired"), default="paired")
    p.add_argument("--exact-masks", action="store_true",
                   help="use the reference parsing instead of the predicted one")
    p.add_argument("--oracle-warp", action="store_true",
                   help="bypass the warp module with recorded transforms "
                        "(synthetic data only)")

    p = sub.add_parser("eval", help="paired/unpaired evaluation tables")
    _add_data_args(p)
    p.add_argument("--warp-checkpoint", default=None)
    p.add_argument("--tryon-checkpoint", required=True)
    p.add_argument("--oracle-warp", action="store_true")

    p = sub.add_parser("ablate", help="run an ablation sweep")
    _add_data_args(p)
    p.add_argument("--which", required=True,
                   choices=("attention", "noise", "threshold", "postproc",
                            "ddim", "conditions"))
    p.add_argument("--steps", type=int, default=60,
                   help="training steps per sweep arm (attention/noise)")
    p.add_argument("--tryon-checkpoint", default=None)

    p = sub.add_parser("bench", help="single-step vs multi-step timing")
    _add_data_args(p)
    p.add_argument("--steps-list", default="1,10,100",
                   help="comma-separated DDIM step counts")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--bench-resolution", default=None,
                   help="HxW override for the benchmark, e.g. 128x96")
    p.add_argument("--tryon-checkpoint", default=None,
                   help="time a trained generator instead of a fresh one")

    p = sub.add_parser("plugin-post", help="mask-aware post-processing of an "
                                           "external method's output")
    p.add_argument("--image", required=True)
    p.add_argument("--person", required=True)
    p.add_argument("--pred-parse", required=True,
                   help="predicted parsing PNG (label values)")
    p.add_argument("--ref-parse", required=True,
                   help="reference parsing PNG (internal 9-label values)")
    p.add_argument("--threshold", type=float, default=None)
    return parser


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", default="synthetic",
                   help="'synthetic' or a dataset root in VITON-HD layout")
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--samples", type=int, default=8,
                   help="number of synthetic samples to generate")
    p.add_argument("--garment-type", choices=("upper", "lower", "dress"),
                   default="upper")


def resolve_config(args) -> PipelineConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = load_preset(args.preset)
    cfg.seed = args.seed
    cfg.device = "cpu" if args.device == "cpu" else "cuda"
    return cfg


def resolve_samples(args, cfg: PipelineConfig, split: str | None = None,
                    pairing: str = "paired") -> list[Sample]:
    split = split or args.split
    if args.data == "synthetic":
        return [
            gen_sample(
                cfg.seed + i, tuple(cfg.resolution), args.garment_type,
                pyramid_depth=cfg.warp.num_scales,
            )
            for i in range(args.samples)
        ]
    return load_dataset(
        args.data, split, pairing,
        parse_label_map=cfg.data.parse_label_map or None,
        size=tuple(cfg.resolution),
        garment_type=args.garment_type,
        unpaired_list=cfg.data.unpaired_list or None,
    )


def _load_tryon(path: str, cfg: PipelineConfig, time_conditioned=False) -> TryOnUNet:
    from .checkpoint import load_checkpoint, load_into_module

    net = TryOnUNet(cfg.tryon, tuple(cfg.resolution), time_conditioned=time_conditioned)
    ckpt = load_checkpoint(path)
    load_into_module(net, ckpt.named_subset("tryon."))
    net.eval()
    return net


def _load_warp(path: str | None, cfg: PipelineConfig) -> WarpModule | None:
    from .checkpoint import load_checkpoint, load_into_module

    if path is None:
        return None
    net = WarpModule(cfg.warp, tuple(cfg.resolution))
    ckpt = load_checkpoint(path)
    load_into_module(net, ckpt.named_subset("warp."))
    net.eval()
    return net


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------

def cmd_train_warp(args, cfg: PipelineConfig, out: Path) -> int:
    from .training import WarpTrainer

    samples = resolve_samples(args, cfg)
    trainer = WarpTrainer(cfg, samples, use_attention=not args.no_attention)
    if args.resume:
        trainer.load(args.resume)
    log_path = out / "warp_train.jsonl"
    l1_before = trainer.warped_garment_l1()
    records = trainer.train(args.steps)
    for rec in records:
        append_jsonl(log_path, rec)
        if args.checkpoint_every and (rec["step"] + 1) % args.checkpoint_every == 0:
            trainer.save(out / f"warp_step{rec['step'] + 1}.ckpt")
    trainer.save(out / "warp.ckpt")
    l1_after = trainer.warped_garment_l1()
    summary = {"l1_before": l1_before, "l1_after": l1_after, "steps": args.steps}
    (out / "warp_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(f"warped-garment L1: {l1_before:.4f} -> {l1_after:.4f}")
    print(f"checkpoint: {out / 'warp.ckpt'}")
    return 0


def cmd_train_tryon(args, cfg: PipelineConfig, out: Path) -> int:
    from .training import TryOnTrainer

    samples = resolve_samples(args, cfg)
    warp_module = _load_warp(args.warp_checkpoint, cfg)
    trainer = TryOnTrainer(cfg, samples, warp_module=warp_module)
    if args.resume:
        trainer.load(args.resume)
    log_path = out / "tryon_train.jsonl"
    records = trainer.train(args.steps)
    for rec in records:
        append_jsonl(log_path, rec)
        if args.checkpoint_every and (rec["step"] + 1) % args.checkpoint_every == 0:
            trainer.save(out / f"tryon_step{rec['step'] + 1}.ckpt")
    trainer.save(out / "tryon.ckpt")
    masked = trainer.training_masked_l1()
    (out / "tryon_summary.json").write_text(
        json.dumps({"masked_l1": masked, "steps": args.steps}, indent=2, sort_keys=True)
    )
    print(f"paired masked L1 on training pairs: {masked:.4f}")
    print(f"checkpoint: {out / 'tryon.ckpt'}")
    return 0


def cmd_infer(args, cfg: PipelineConfig, out: Path) -> int:
    if not args.warp_checkpoint and not args.oracle_warp:
        raise ConfigError("infer needs --warp-checkpoint or --oracle-warp")
    samples = resolve_samples(args, cfg, pairing=args.pairing)
    tryon_net = _load_tryon(args.tryon_checkpoint, cfg)
    warp_module = _load_warp(args.warp_checkpoint, cfg)
    encoder = make_global_encoder(cfg.tryon.encoder_id, cfg.tryon.embedding_dim)
    options = InferenceOptions(oracle_warp=args.oracle_warp)
    rows = []
    for sample in samples:
        if args.exact_masks:
            options.parsing_override = sample.parsing
        result = infer(sample, warp_module, tryon_net, encoder, cfg,
                       options=options, seed=cfg.seed)
        save_png(result.image, out / f"{sample.name}.png")
        (out / f"{sample.name}.report.json").write_text(
            json.dumps(result.report.to_dict(), indent=2, sort_keys=True)
        )
        row = [sample.person, sample.garment,
               result.intermediates["local_cond"], result.image]
        if sample.gt_tryon is not None:
            row.append(sample.gt_tryon)
        rows.append(row)
    contact_sheet(rows, out / "contact_sheet.png")
    print(f"wrote {len(samples)} images to {out}")
    return 0


def cmd_eval(args, cfg: PipelineConfig, out: Path) -> int:
    if not args.warp_checkpoint and not args.oracle_warp:
        raise ConfigError("eval needs --warp-checkpoint or --oracle-warp")
    samples = resolve_samples(args, cfg, split="test")
    tryon_net = _load_tryon(args.tryon_checkpoint, cfg)
    warp_module = _load_warp(args.warp_checkpoint, cfg)
    encoder = make_global_encoder(cfg.tryon.encoder_id, cfg.tryon.embedding_dim)
    extractor = evalmetrics.make_feature_extractor(cfg.eval.feature_extractor)
    options = InferenceOptions(oracle_warp=args.oracle_warp)

    outputs, ssims, l1s = [], [], []
    for sample in samples:
        result = infer(sample, warp_module, tryon_net, encoder, cfg,
                       options=options, seed=cfg.seed)
        outputs.append(result.image)
        if sample.gt_tryon is not None:
            ssims.append(evalmetrics.ssim(result.image, sample.gt_tryon))
            l1s.append(evalmetrics.paired_masked_l1(
                result.image, sample.gt_tryon, sample.parsing, sample.garment_type
            ))
    paired = bool(ssims)
    fd = evalmetrics.feature_distance(
        torch.stack(outputs),
        torch.stack([s.gt_tryon if paired else s.person for s in samples]),
        extractor,
    )
    report = evalmetrics.EvalReport(
        pairing="paired" if paired else "unpaired",
        ssim=sum(ssims) / len(ssims) if paired else None,
        l1=sum(l1s) / len(l1s) if paired else None,
        feature_distance=fd,
        extractor_id=getattr(extractor, "extractor_id", "custom"),
    )
    (out / "eval_report.json").write_text(report.to_json())
    rows = [evalmetrics.report_row("this-model", report)]
    (out / "eval_table.md").write_text(evalmetrics.render_markdown_table(rows) + "\n")
    (out / "eval_table.csv").write_text(evalmetrics.render_csv_table(rows))
    print(report.to_json())
    return 0


def cmd_ablate(args, cfg: PipelineConfig, out: Path) -> int:
    from .ablations import run_ablation

    table = run_ablation(args.which, cfg, args, out)
    (out / f"ablation_{args.which}.md").write_text(table + "\n")
    print(table)
    return 0


def cmd_bench(args, cfg: PipelineConfig, out: Path) -> int:
    if args.bench_resolution:
        h, w = (int(v) for v in args.bench_resolution.lower().split("x"))
        resolution = (h, w)
    else:
        resolution = tuple(cfg.resolution)
    steps_list = [int(s) for s in args.steps_list.split(",")]

    single = TryOnUNet(cfg.tryon, resolution).eval()
    multi = TryOnUNet(cfg.tryon, resolution, time_conditioned=True).eval()
    if getattr(args, "tryon_checkpoint", None):
        single = _load_tryon(args.tryon_checkpoint, cfg)

    b = args.batch
    batch = {
        "noise": torch.randn(b, 3, *resolution),
        "cond": torch.randn(b, 3, *resolution),
        "dense": torch.randn(b, 3, *resolution),
        "emb": torch.randn(b, cfg.tryon.embedding_dim),
    }

    def single_step_pipeline(data):
        with torch.no_grad():
            return single(data["noise"], data["cond"], data["dense"], data["emb"])

    rows = []
    stats_single = evalmetrics.timing_bench(single_step_pipeline, [batch],
                                            repeats=args.repeats)
    rows.append({"Method": "single-step (ours)", "steps": 1,
                 "T(s)↓": stats_single.mean_seconds_per_batch,
                 "std": stats_single.std_seconds_per_batch})

    for steps in steps_list:
        def ddim_pipeline(data, steps=steps):
            with torch.no_grad():
                return ddim_sample(multi, data["cond"], data["dense"], data["emb"],
                                   steps=steps, seed=cfg.seed)

        stats = evalmetrics.timing_bench(ddim_pipeline, [batch], repeats=args.repeats)
        rows.append({"Method": f"DDIM* {steps} steps", "steps": steps,
                     "T(s)↓": stats.mean_seconds_per_batch,
                     "std": stats.std_seconds_per_batch})

    meta = {"batch_size": b, "repeats": args.repeats,
            "resolution": list(resolution)}
    table = evalmetrics.render_markdown_table(
        rows, columns=["Method", "steps", "T(s)↓", "std"]
    )
    (out / "bench.json").write_text(json.dumps(
        {"meta": meta, "rows": rows}, indent=2, sort_keys=True))
    (out / "bench.md").write_text(table + "\n")
    print(table)
    ratio = rows[-1]["T(s)↓"] / rows[0]["T(s)↓"]
    print(f"speedup of single-step vs {rows[-1]['Method']}: {ratio:.1f}x")
    return 0


def cmd_plugin_post(args, cfg: PipelineConfig, out: Path) -> int:
    image = load_png(args.image)
    person = load_png(args.person)
    pred = load_parse_png(args.pred_parse)
    ref = load_parse_png(args.ref_parse)
    threshold = args.threshold
    if threshold is None:
        threshold = cfg.postproc.overlap_threshold
    restored, report = postproc.plugin_post(
        image, person, pred, ref, threshold=threshold,
        equality_mode=cfg.postproc.equality_mode,
    )
    save_png(restored, out / "plugin_post.png")
    (out / "plugin_post.report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True)
    )
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


_COMMANDS = {
    "train-warp": cmd_train_warp,
    "train-tryon": cmd_train_tryon,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
    "plugin-post": cmd_plugin_post,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        torch.manual_seed(cfg.seed)
        return _COMMANDS[args.command](args, cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
