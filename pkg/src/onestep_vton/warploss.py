"""Warping objective: seven weighted terms over warped garments, predicted
parsings and flow fields, plus the relativistic-average adversarial pair
shared with the try-on stage."""

from __future__ import annotations

import warnings

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import TryOnLossWeights, WarpLossWeights

CHARBONNIER_EPS = 1e-3


def l1_warp(warped: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over masked pixels; channels share the mask."""
    if warped.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(warped.shape)} vs {tuple(gt.shape)}")
    mask = mask.to(dtype=warped.dtype)
    count = mask.sum()
    if count.item() == 0:
        warnings.warn("l1_warp called with an empty mask; returning 0", stacklevel=2)
        return warped.sum() * 0.0
    diff = (warped - gt).abs().mean(dim=-3)
    return (diff * mask).sum() / count


def perceptual(warped: torch.Tensor, gt: torch.Tensor, feature_net) -> torch.Tensor:
    """Sum over extractor stages of the mean L1 feature distance."""
    feats_a = feature_net(warped)
    feats_b = feature_net(gt)
    total = warped.new_zeros(())
    for fa, fb in zip(feats_a, feats_b):
        total = total + (fa - fb).abs().mean()
    return total


def parsing_ce(logits: torch.Tensor, target_labels: torch.Tensor) -> torch.Tensor:
    """Mean pixel-wise categorical cross-entropy of parsing logits."""
    if logits.dim() == 3:
        logits = logits.unsqueeze(0)
        target_labels = target_labels.unsqueeze(0)
    return F.cross_entropy(logits, target_labels)


def parsing_l1(probs: torch.Tensor, one_hot_target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between parsing probabilities and a one-hot map."""
    if probs.shape != one_hot_target.shape:
        raise ValueError(
            f"shape mismatch: {tuple(probs.shape)} vs {tuple(one_hot_target.shape)}"
        )
    return (probs - one_hot_target).abs().mean()


def adversarial_relativistic(d_real: torch.Tensor, d_fake: torch.Tensor,
                             side: str) -> torch.Tensor:
    """Relativistic average hinge objective.

    Scores are compared against the mean score of the opposite population;
    both sides average their two hinge terms, so equal real/fake scores give
    exactly 1. On the generator side the real scores are detached: gradient
    reaches the generator only through the fake scores.
    """
    if side == "generator":
        real = d_real.detach()
        rel_real = real - d_fake.mean()
        rel_fake = d_fake - real.mean()
        loss = F.relu(1.0 + rel_real).mean() + F.relu(1.0 - rel_fake).mean()
    elif side == "discriminator":
        rel_real = d_real - d_fake.mean()
        rel_fake = d_fake - d_real.mean()
        loss = F.relu(1.0 - rel_real).mean() + F.relu(1.0 + rel_fake).mean()
    else:
        raise ValueError(f"side must be 'generator' or 'discriminator', got '{side}'")
    return 0.5 * loss


def tv_loss(flow: torch.Tensor) -> torch.Tensor:
    """Mean L1 of first-order spatial differences, one mean per axis."""
    dx = (flow[..., :, 1:] - flow[..., :, :-1]).abs().mean()
    dy = (flow[..., 1:, :] - flow[..., :-1, :]).abs().mean()
    return dx + dy


def _charbonnier(x: torch.Tensor) -> torch.Tensor:
    return torch.sqrt(x * x + CHARBONNIER_EPS**2)


def second_order_smooth(flow: torch.Tensor) -> torch.Tensor:
    """Charbonnier penalty on second differences along h, v and both diagonals.

    Affine flows have vanishing second differences in every direction, so
    they cost only the Charbonnier floor (= the epsilon).
    """
    pieces = []
    if flow.shape[-1] >= 3:
        pieces.append(flow[..., :, 2:] - 2 * flow[..., :, 1:-1] + flow[..., :, :-2])
    if flow.shape[-2] >= 3:
        pieces.append(flow[..., 2:, :] - 2 * flow[..., 1:-1, :] + flow[..., :-2, :])
    if flow.shape[-1] >= 3 and flow.shape[-2] >= 3:
        pieces.append(flow[..., 2:, 2:] - 2 * flow[..., 1:-1, 1:-1] + flow[..., :-2, :-2])
        pieces.append(flow[..., 2:, :-2] - 2 * flow[..., 1:-1, 1:-1] + flow[..., :-2, 2:])
    if not pieces:
        return flow.sum() * 0.0
    values = torch.cat([_charbonnier(p).reshape(-1) for p in pieces])
    return values.mean()


def total_warp_loss(parts: dict[str, torch.Tensor],
                    weights: WarpLossWeights) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of the seven warping terms plus a float breakdown.

    `parts` keys: l1, perceptual, ce, parsing_l1, adversarial, tv,
    second_order. Missing keys count as zero.
    """
    zero = None
    for v in parts.values():
        zero = v * 0.0
        break
    if zero is None:
        raise ValueError("total_warp_loss needs at least one term")

    def get(name):
        return parts.get(name, zero)

    weighted = {
        "l1": (1.0, get("l1")),
        "perceptual": (weights.alpha_per, get("perceptual")),
        "ce": (weights.alpha_ce, get("ce")),
        "parsing_l1": (weights.alpha_m, get("parsing_l1")),
        "adversarial": (weights.alpha_adv, get("adversarial")),
        "tv": (weights.alpha_tv, get("tv")),
        "second_order": (weights.alpha_sec, get("second_order")),
    }
    total = zero
    breakdown = {}
    for name, (w, term) in weighted.items():
        total = total + w * term
        breakdown[name] = float(term.detach())
    breakdown["total"] = float(total.detach())
    return total, breakdown


def total_tryon_loss(parts: dict[str, torch.Tensor],
                     weights: TryOnLossWeights) -> tuple[torch.Tensor, dict[str, float]]:
    """Try-on objective: reconstruction L1 + weighted perceptual + adversarial."""
    l1 = parts["l1"]
    per = parts.get("perceptual", l1 * 0.0)
    adv = parts.get("adversarial", l1 * 0.0)
    total = l1 + weights.alpha_per * per + weights.alpha_adv * adv
    breakdown = {
        "l1": float(l1.detach()),
        "perceptual": float(per.detach()),
        "adversarial": float(adv.detach()),
        "total": float(total.detach()),
    }
    return total, breakdown


class RandomPerceptualNet(nn.Module):
    """Frozen, seed-pinned conv stack standing in for a pretrained
    perceptual feature extractor; emits one feature map per stage."""

    def __init__(self, stages: int = 4, base_channels: int = 16, seed: int = 0,
                 in_channels: int = 3):
        super().__init__()
        layers = []
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            prev = in_channels
            for i in range(stages):
                ch = base_channels * min(2**i, 4)
                layers.append(
                    nn.Sequential(
                        nn.Conv2d(prev, ch, 3, stride=2, padding=1),
                        nn.SiLU(),
                    )
                )
                prev = ch
        self.stages = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        unbatched = x.dim() == 3
        if unbatched:
            x = x.unsqueeze(0)
        feats = []
        cur = x
        for stage in self.stages:
            cur = stage(cur)
            feats.append(cur.squeeze(0) if unbatched else cur)
        return feats


class IdentityFeatureNet(nn.Module):
    """Single-stage pass-through extractor, handy for closed-form loss tests."""

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        return [x]


def make_perceptual_net(spec: str = "seeded:4:0") -> nn.Module:
    """Builds a perceptual extractor from a spec string.

    "seeded:<stages>:<seed>" gives the pinned random stack; "identity" the
    pass-through; "file:<path>" loads a frozen torch module saved with
    torch.save (e.g. a real pretrained feature net).
    """
    if spec == "identity":
        return IdentityFeatureNet()
    if spec.startswith("seeded:"):
        _, stages, seed = spec.split(":")
        return RandomPerceptualNet(stages=int(stages), seed=int(seed))
    if spec.startswith("file:"):
        net = torch.load(spec[len("file:"):], map_location="cpu", weights_only=False)
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        return net
    raise ValueError(f"unknown perceptual net spec '{spec}'")
