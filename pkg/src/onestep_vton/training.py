"""Training loops for the two stages.

Both trainers are deterministic under (config, seed): batches are sliced
round-robin from the sample list, noise seeds derive from the step index,
and the torch RNG is reseeded from (seed, stage, start step) at the top of
every run, so resuming from a checkpoint replays an identical loss curve.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from . import warploss
from .checkpoint import load_checkpoint, load_into_module, module_tensors, save_checkpoint
from .config import PipelineConfig
from .errors import NumericalError
from .postproc import labels_to_parsing_logits
from .preprocess import assemble_condition, build_preserved_mask, rasterize_keypoints
from .synthdata import Sample, cloth_mask, garment_cloth_label, oracle_flow
from .tryonnet import (
    EmaShadow,
    NoiseConfig,
    PatchDiscriminator,
    TryOnUNet,
    add_noise,
    derive_seed,
    encode_global,
    make_global_encoder,
    static_mask,
)
from .warpnet import GP_CLOTH, NUM_GLOBAL_PARSE_CHANNELS, WarpModule, warp

# 9-label -> 7-channel targets for the body-part channels; cloth depends on
# the garment type and head folds into background.
_BODY_TO_GP = {0: 0, 1: 0, 4: 2, 5: 3, 6: 5, 7: 6, 8: 4}


def gp_target_labels(parsing: torch.Tensor, garment_type: str) -> torch.Tensor:
    """Ground-truth labels for the predicted global parsing."""
    cloth = garment_cloth_label(garment_type)
    out = torch.zeros_like(parsing)
    for src, dst in _BODY_TO_GP.items():
        out[parsing == src] = dst
    out[parsing == cloth] = GP_CLOTH
    if garment_type == "dress":
        out[parsing == 3] = GP_CLOTH
    return out


def _resize_image(img: torch.Tensor, size) -> torch.Tensor:
    if img.shape[-2:] == tuple(size):
        return img
    return F.interpolate(img, size=size, mode="area")


def _resize_mask(mask: torch.Tensor, size) -> torch.Tensor:
    if mask.shape[-2:] == tuple(size):
        return mask
    return (
        F.interpolate(mask.float().unsqueeze(1), size=size, mode="nearest")
        .squeeze(1)
        .bool()
    )


def _resize_labels(labels: torch.Tensor, size) -> torch.Tensor:
    if labels.shape[-2:] == tuple(size):
        return labels
    return (
        F.interpolate(labels.float().unsqueeze(1), size=size, mode="nearest")
        .squeeze(1)
        .long()
    )


def round_robin_indices(step: int, batch_size: int, count: int) -> list[int]:
    return [(step * batch_size + j) % count for j in range(batch_size)]


class WarpTrainer:
    """Trains the warping cascade with the seven-term objective.

    Supervision runs at every scale with level weight 1/2^k (finest k = 0);
    the adversarial pair sees the finest warped garment alongside its
    predicted parsing.
    """

    def __init__(self, cfg: PipelineConfig, samples: list[Sample],
                 use_attention: bool = True):
        self.cfg = cfg
        self.samples = samples
        self.net = WarpModule(cfg.warp, tuple(cfg.resolution), use_attention=use_attention)
        self.disc = PatchDiscriminator(3 + NUM_GLOBAL_PARSE_CHANNELS)
        opt = cfg.warp_optim
        self.opt_g = torch.optim.Adam(
            self.net.parameters(), lr=opt.lr_g, betas=(opt.beta1, opt.beta2)
        )
        self.opt_d = torch.optim.Adam(
            self.disc.parameters(), lr=opt.lr_d, betas=(opt.beta1, opt.beta2)
        )
        self.perceptual_net = warploss.make_perceptual_net("seeded:4:0")
        self.history: list[dict] = []
        self._batch = self._prepare(samples)

    def _prepare(self, samples: list[Sample]) -> dict:
        size = tuple(self.cfg.resolution)
        heat, dense, masked, garment, gt, mask, labels = [], [], [], [], [], [], []
        for s in samples:
            preserved = build_preserved_mask(s.parsing, s.garment_type)
            heat.append(rasterize_keypoints(s.keypoints, size))
            dense.append(s.densepose)
            masked.append(preserved.apply(s.person))
            garment.append(s.garment)
            gt.append(s.gt_tryon)
            mask.append(cloth_mask(s))
            labels.append(gp_target_labels(s.parsing, s.garment_type))
        return {
            "heatmaps": torch.stack(heat),
            "densepose": torch.stack(dense),
            "masked_person": torch.stack(masked),
            "garment": torch.stack(garment),
            "gt": torch.stack(gt),
            "cloth_mask": torch.stack(mask),
            "labels": torch.stack(labels),
        }

    def _slice(self, step: int) -> dict:
        idx = round_robin_indices(step, self.cfg.warp_optim.batch_size, len(self.samples))
        sel = torch.as_tensor(idx)
        return {k: v[sel] for k, v in self._batch.items()}

    def warped_garment_l1(self) -> float:
        """Masked L1 of the finest warped garment over the whole sample set."""
        self.net.eval()
        with torch.no_grad():
            out = self.net(
                self._batch["heatmaps"], self._batch["densepose"],
                self._batch["masked_person"], self._batch["garment"],
            )
            warped = warp(self._batch["garment"], out.finest_flow)
            mask = self._batch["cloth_mask"].to(warped.dtype)
            diff = (warped - self._batch["gt"]).abs().mean(dim=1)
            value = float((diff * mask).sum() / mask.sum())
        self.net.train()
        return value

    def train_step(self, step: int) -> dict:
        batch = self._slice(step)
        out = self.net(
            batch["heatmaps"], batch["densepose"], batch["masked_person"],
            batch["garment"],
        )
        scales = list(zip(reversed(out.flows), reversed(out.parsings)))  # finest first

        terms = {k: None for k in ("l1", "perceptual", "ce", "parsing_l1", "tv", "second_order")}

        def acc(name, value, weight):
            terms[name] = value * weight if terms[name] is None else terms[name] + value * weight

        finest_warped = None
        finest_probs = None
        for k, (flow, logits) in enumerate(scales):
            weight = self.cfg.warp_loss.level_decay**k
            size = flow.shape[-2:]
            garment_k = _resize_image(batch["garment"], size)
            gt_k = _resize_image(batch["gt"], size)
            mask_k = _resize_mask(batch["cloth_mask"], size)
            labels_k = _resize_labels(batch["labels"], size)
            warped = warp(garment_k, flow)
            mask_f = mask_k.unsqueeze(1).to(warped.dtype)
            acc("l1", warploss.l1_warp(warped, gt_k, mask_k), weight)
            acc("perceptual",
                warploss.perceptual(warped * mask_f, gt_k * mask_f, self.perceptual_net),
                weight)
            acc("ce", warploss.parsing_ce(logits, labels_k), weight)
            probs = torch.softmax(logits, dim=1)
            one_hot = F.one_hot(labels_k, NUM_GLOBAL_PARSE_CHANNELS).permute(0, 3, 1, 2)
            acc("parsing_l1", warploss.parsing_l1(probs, one_hot.to(probs.dtype)), weight)
            acc("tv", warploss.tv_loss(flow), weight)
            acc("second_order", warploss.second_order_smooth(flow), weight)
            if k == 0:
                finest_warped = warped * mask_f
                finest_probs = probs

        one_hot_f = F.one_hot(batch["labels"], NUM_GLOBAL_PARSE_CHANNELS).permute(0, 3, 1, 2).float()
        mask_f = batch["cloth_mask"].unsqueeze(1).float()
        real_in = torch.cat([batch["gt"] * mask_f, one_hot_f], dim=1)
        fake_in = torch.cat([finest_warped, finest_probs], dim=1)

        d_real = self.disc(real_in)
        d_fake_g = self.disc(fake_in)
        terms["adversarial"] = warploss.adversarial_relativistic(d_real, d_fake_g, "generator")

        total, breakdown = warploss.total_warp_loss(terms, self.cfg.warp_loss)
        if not torch.isfinite(total):
            raise NumericalError(f"warp loss non-finite at step {step}: {breakdown}")
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        if self.cfg.warp_optim.grad_clip:
            torch.nn.utils.clip_grad_norm_(
                self.net.parameters(), self.cfg.warp_optim.grad_clip
            )
        self.opt_g.step()

        d_real = self.disc(real_in.detach())
        d_fake = self.disc(fake_in.detach())
        d_loss = warploss.adversarial_relativistic(d_real, d_fake, "discriminator")
        self.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        self.opt_d.step()

        breakdown["disc"] = float(d_loss.detach())
        breakdown["step"] = step
        self.history.append(breakdown)
        return breakdown

    def train(self, num_steps: int, start_step: int = 0) -> list[dict]:
        torch.manual_seed(derive_seed(self.cfg.seed, "warp-train", start_step))
        self.net.train()
        records = []
        for step in range(start_step, start_step + num_steps):
            records.append(self.train_step(step))
        return records

    def save(self, path) -> None:
        tensors = module_tensors(self.net, "warp.")
        tensors.update(module_tensors(self.disc, "disc."))
        save_checkpoint(path, tensors, config=self.cfg.to_dict(),
                        extra={"stage": "warp", "steps": len(self.history)})

    def load(self, path) -> None:
        ckpt = load_checkpoint(path)
        load_into_module(self.net, ckpt.named_subset("warp."))
        load_into_module(self.disc, ckpt.named_subset("disc."))


def oracle_warp_outputs(sample: Sample) -> dict:
    """Warp-stage outputs as an ideal warper would produce them.

    Used to train and test the try-on stage in isolation from warp quality:
    the warped garment comes from the generator-recorded transform and the
    predicted parsing is the ground-truth parsing converted to hard logits.
    """
    flow = oracle_flow(sample)
    logits = labels_to_parsing_logits(
        sample.parsing, garment_cloth=garment_cloth_label(sample.garment_type)
    )
    return {
        "warped_garment": warp(sample.garment, flow),
        "cloth_mask": cloth_mask(sample),
        "parsing_logits": logits,
    }


def module_warp_outputs(sample: Sample, warp_module: WarpModule, cfg: PipelineConfig) -> dict:
    size = tuple(cfg.resolution)
    preserved = build_preserved_mask(sample.parsing, sample.garment_type)
    warp_module.eval()
    with torch.no_grad():
        out = warp_module(
            rasterize_keypoints(sample.keypoints, size).unsqueeze(0),
            sample.densepose.unsqueeze(0),
            preserved.apply(sample.person).unsqueeze(0),
            sample.garment.unsqueeze(0),
        )
        flow = out.finest_flow[0]
        logits = out.finest_parsing[0]
    return {
        "warped_garment": warp(sample.garment, flow),
        "cloth_mask": logits.argmax(dim=0) == GP_CLOTH,
        "parsing_logits": logits,
    }


class TryOnTrainer:
    """Trains the single-pass generator against noised ground truth.

    Local conditions are assembled once up front (from oracle warp outputs by
    default, or a trained warp module), so each step costs one generator
    pass, one merge and the GAN pair.
    """

    def __init__(self, cfg: PipelineConfig, samples: list[Sample],
                 warp_module: WarpModule | None = None):
        self.cfg = cfg
        self.samples = samples
        self.net = TryOnUNet(cfg.tryon, tuple(cfg.resolution))
        self.disc = PatchDiscriminator(6)
        opt = cfg.tryon_optim
        self.opt_g = torch.optim.Adam(
            self.net.parameters(), lr=opt.lr_g, betas=(opt.beta1, opt.beta2)
        )
        self.opt_d = torch.optim.Adam(
            self.disc.parameters(), lr=opt.lr_d, betas=(opt.beta1, opt.beta2)
        )
        self.ema = EmaShadow(self.net, decay=opt.ema_decay or 0.9999)
        self.encoder = make_global_encoder(cfg.tryon.encoder_id, cfg.tryon.embedding_dim)
        self.perceptual_net = warploss.make_perceptual_net("seeded:4:0")
        self.history: list[dict] = []
        self._batch = self._prepare(samples, warp_module)

    def _prepare(self, samples: list[Sample], warp_module: WarpModule | None) -> dict:
        person, gt, dense, cond, static, emb = [], [], [], [], [], []
        for s in samples:
            preserved = build_preserved_mask(s.parsing, s.garment_type)
            wo = (
                oracle_warp_outputs(s)
                if warp_module is None
                else module_warp_outputs(s, warp_module, self.cfg)
            )
            condition = assemble_condition(
                s.person, wo["warped_garment"], wo["cloth_mask"], preserved
            )
            person.append(s.person)
            gt.append(s.gt_tryon)
            dense.append(s.densepose)
            cond.append(condition.image)
            static.append(static_mask(preserved, wo["parsing_logits"], s.parsing))
            emb.append(encode_global(s.garment, self.encoder))
        return {
            "person": torch.stack(person),
            "gt": torch.stack(gt),
            "densepose": torch.stack(dense),
            "condition": torch.stack(cond),
            "static": torch.stack(static),
            "embedding": torch.stack(emb),
        }

    def _slice(self, step: int) -> dict:
        idx = round_robin_indices(step, self.cfg.tryon_optim.batch_size, len(self.samples))
        sel = torch.as_tensor(idx)
        return {k: v[sel] for k, v in self._batch.items()}

    def train_step(self, step: int) -> dict:
        batch = self._slice(step)
        noise_cfg = NoiseConfig(
            alpha_n=self.cfg.tryon.noise_alpha,
            rng_seed=derive_seed(self.cfg.seed, "tryon-noise", step),
        )
        noised = add_noise(batch["gt"], noise_cfg)
        raw = self.net(noised, batch["condition"], batch["densepose"], batch["embedding"])
        static = batch["static"].unsqueeze(1)
        merged = torch.where(static, batch["person"], raw)

        l1 = (merged - batch["gt"]).abs().mean()
        per = warploss.perceptual(merged, batch["gt"], self.perceptual_net)
        real_in = torch.cat([batch["gt"], batch["condition"]], dim=1)
        fake_in = torch.cat([merged, batch["condition"]], dim=1)
        adv = warploss.adversarial_relativistic(
            self.disc(real_in), self.disc(fake_in), "generator"
        )
        total, breakdown = warploss.total_tryon_loss(
            {"l1": l1, "perceptual": per, "adversarial": adv}, self.cfg.tryon_loss
        )
        if not torch.isfinite(total):
            raise NumericalError(f"try-on loss non-finite at step {step}: {breakdown}")
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()
        self.ema.update(self.net)

        d_loss = warploss.adversarial_relativistic(
            self.disc(real_in.detach()), self.disc(fake_in.detach()), "discriminator"
        )
        self.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        self.opt_d.step()

        breakdown["disc"] = float(d_loss.detach())
        breakdown["step"] = step
        self.history.append(breakdown)
        return breakdown

    def train(self, num_steps: int, start_step: int = 0) -> list[dict]:
        torch.manual_seed(derive_seed(self.cfg.seed, "tryon-train", start_step))
        self.net.train()
        records = []
        for step in range(start_step, start_step + num_steps):
            records.append(self.train_step(step))
        return records

    def training_masked_l1(self) -> float:
        """Mean mutable-region L1 against gt over the training pairs."""
        from .evalmetrics import paired_masked_l1

        self.net.eval()
        values = []
        with torch.no_grad():
            noise_cfg = NoiseConfig(
                alpha_n=self.cfg.tryon.noise_alpha,
                rng_seed=derive_seed(self.cfg.seed, "tryon-eval"),
            )
            noised = add_noise(self._batch["gt"], noise_cfg)
            raw = self.net(
                noised, self._batch["condition"], self._batch["densepose"],
                self._batch["embedding"],
            )
            merged = torch.where(
                self._batch["static"].unsqueeze(1), self._batch["person"], raw
            )
            for i, s in enumerate(self.samples):
                values.append(
                    paired_masked_l1(merged[i], s.gt_tryon, s.parsing, s.garment_type)
                )
        self.net.train()
        return float(sum(values) / len(values))

    def save(self, path) -> None:
        tensors = module_tensors(self.net, "tryon.")
        tensors.update({f"ema.{k}": v for k, v in self.ema.shadow.items()})
        tensors.update(module_tensors(self.disc, "disc."))
        save_checkpoint(path, tensors, config=self.cfg.to_dict(),
                        extra={"stage": "tryon", "steps": len(self.history)})

    def load(self, path) -> None:
        ckpt = load_checkpoint(path)
        load_into_module(self.net, ckpt.named_subset("tryon."))
        load_into_module(self.disc, ckpt.named_subset("disc."))
        ema_tensors = ckpt.named_subset("ema.")
        for k, v in ema_tensors.items():
            if k in self.ema.shadow:
                self.ema.shadow[k] = v.clone()
