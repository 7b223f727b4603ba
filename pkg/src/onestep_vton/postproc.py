"""Mask-aware post-processing.

Two blocks share one mechanism: copy person pixels back where the predicted
and reference body-part masks agree. The unconditional block always applies
(it upgrades the condition image before generation); the conditional block
runs per part after generation and only when the overlap ratio
|pred ∩ ref| / |pred| clears a threshold, which protects against bad
segmentations re-pasting misaligned content. Copies are bit-exact and the
operation is idempotent for fixed masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .config import (
    PARSE_CENTER_BODY,
    PARSE_LEFT_ARM,
    PARSE_LEFT_LEG,
    PARSE_RIGHT_ARM,
    PARSE_RIGHT_LEG,
)
from . import warpnet

# Post-processed parts: the five body-part channels of the predicted parsing.
PART_NAMES = ("left_arm", "right_arm", "left_leg", "right_leg", "center_body")

# Internal 9-label ids for the same parts (reference parsing side).
PART_PARSE_LABELS = {
    "left_arm": PARSE_LEFT_ARM,
    "right_arm": PARSE_RIGHT_ARM,
    "left_leg": PARSE_LEFT_LEG,
    "right_leg": PARSE_RIGHT_LEG,
    "center_body": PARSE_CENTER_BODY,
}


@dataclass
class PartOverlap:
    ratio: float | None          # None when the predicted part is empty
    applied: bool
    pred_pixels: int
    ref_pixels: int
    overlap_pixels: int


@dataclass
class PartOverlapReport:
    parts: dict[str, PartOverlap] = field(default_factory=dict)

    @property
    def any_applied(self) -> bool:
        return any(p.applied for p in self.parts.values())

    def to_dict(self) -> dict:
        return {
            name: {
                "ratio": p.ratio,
                "applied": p.applied,
                "pred_pixels": p.pred_pixels,
                "ref_pixels": p.ref_pixels,
                "overlap_pixels": p.overlap_pixels,
            }
            for name, p in self.parts.items()
        }


def overlap_ratio(pred_part_mask: torch.Tensor,
                  ref_part_mask: torch.Tensor) -> float | None:
    """|pred ∩ ref| / |pred|, or None when the predicted mask is empty."""
    if pred_part_mask.shape != ref_part_mask.shape:
        raise ValueError(
            f"mask shapes differ: {tuple(pred_part_mask.shape)} vs "
            f"{tuple(ref_part_mask.shape)}"
        )
    pred = pred_part_mask.bool()
    ref = ref_part_mask.bool()
    denom = int(pred.sum())
    if denom == 0:
        return None
    return int((pred & ref).sum()) / denom


def predicted_part_masks(pred_parsing_logits: torch.Tensor) -> dict[str, torch.Tensor]:
    """Argmax body-part masks from 7-channel parsing logits."""
    labels = pred_parsing_logits.argmax(dim=-3)
    return {
        name: labels == channel
        for name, channel in warpnet.GP_BODY_PART_CHANNELS.items()
    }


def reference_part_masks(ref_parsing: torch.Tensor) -> dict[str, torch.Tensor]:
    """Body-part masks from a 9-label reference parsing map."""
    return {name: ref_parsing == label for name, label in PART_PARSE_LABELS.items()}


def unconditional_post(condition_image: torch.Tensor, person: torch.Tensor,
                       pred_parsing_finest: torch.Tensor,
                       ref_parsing: torch.Tensor) -> torch.Tensor:
    """Adds agreed body-part content from the person into the condition image.

    The union over parts of (predicted ∩ reference) masks is copied from the
    person; applied unconditionally, no threshold.
    """
    pred = predicted_part_masks(pred_parsing_finest)
    ref = reference_part_masks(ref_parsing)
    overlap = torch.zeros_like(ref_parsing, dtype=torch.bool)
    for name in PART_NAMES:
        overlap |= pred[name] & ref[name]
    return torch.where(overlap, person, condition_image)


def conditional_post(output_image: torch.Tensor, person: torch.Tensor,
                     pred_parsing_finest: torch.Tensor,
                     ref_parsing: torch.Tensor,
                     threshold: float = 0.8,
                     equality_mode: bool = False,
                     ) -> tuple[torch.Tensor, PartOverlapReport]:
    """Per-part identity restoration gated by the overlap ratio.

    A part is applied when ratio > threshold (or ratio >= threshold in
    equality mode, which keeps the threshold-1.0 sweep point meaningful);
    applied parts copy the overlap pixels from the person verbatim.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    pred = predicted_part_masks(pred_parsing_finest)
    ref = reference_part_masks(ref_parsing)
    result = output_image
    report = PartOverlapReport()
    for name in PART_NAMES:
        pred_mask = pred[name]
        ref_mask = ref[name]
        overlap = pred_mask & ref_mask
        ratio = overlap_ratio(pred_mask, ref_mask)
        if ratio is None:
            applied = False
        elif equality_mode:
            applied = ratio >= threshold
        else:
            applied = ratio > threshold
        if applied:
            result = torch.where(overlap, person, result)
        report.parts[name] = PartOverlap(
            ratio=ratio,
            applied=applied,
            pred_pixels=int(pred_mask.sum()),
            ref_pixels=int(ref_mask.sum()),
            overlap_pixels=int(overlap.sum()),
        )
    return result, report


def applying_rate(reports) -> float:
    """Percentage of images where at least one part was applied."""
    reports = list(reports)
    if not reports:
        return 0.0
    applied = sum(1 for r in reports if r.any_applied)
    return 100.0 * applied / len(reports)


def plugin_post(external_image: torch.Tensor, person: torch.Tensor,
                pred_parsing_source: torch.Tensor, ref_parsing: torch.Tensor,
                threshold: float = 0.8, equality_mode: bool = False,
                ) -> tuple[torch.Tensor, PartOverlapReport]:
    """Conditional restoration applied to any external method's output.

    `pred_parsing_source` may be 7-channel logits or a 9-label map (the
    latter is converted), so outputs of third-party pipelines can be
    post-processed given only their segmentations.
    """
    if pred_parsing_source.dim() == 2 or (
        pred_parsing_source.dim() == 3
        and pred_parsing_source.shape[0] not in (warpnet.NUM_GLOBAL_PARSE_CHANNELS,)
    ):
        pred_logits = labels_to_parsing_logits(pred_parsing_source.squeeze())
    else:
        pred_logits = pred_parsing_source
    return conditional_post(
        external_image, person, pred_logits, ref_parsing,
        threshold=threshold, equality_mode=equality_mode,
    )


def labels_to_parsing_logits(labels: torch.Tensor,
                             garment_cloth: int | None = None) -> torch.Tensor:
    """Converts a 9-label parsing map to hard 7-channel logits.

    Cloth labels (2 and 3) both collapse onto the cloth channel; pass
    `garment_cloth` to send only that label to cloth and the other to
    background (e.g. when only one garment layer counts as the try-on cloth).
    """
    mapping = {
        0: warpnet.GP_BACKGROUND,
        1: warpnet.GP_BACKGROUND,
        2: warpnet.GP_CLOTH,
        3: warpnet.GP_CLOTH,
        4: warpnet.GP_LEFT_ARM,
        5: warpnet.GP_RIGHT_ARM,
        6: warpnet.GP_LEFT_LEG,
        7: warpnet.GP_RIGHT_LEG,
        8: warpnet.GP_CENTER_BODY,
    }
    if garment_cloth is not None:
        for cloth_label in (2, 3):
            if cloth_label != garment_cloth:
                mapping[cloth_label] = warpnet.GP_BACKGROUND
    h, w = labels.shape[-2:]
    logits = torch.full(
        (warpnet.NUM_GLOBAL_PARSE_CHANNELS, h, w), -10.0, dtype=torch.float32
    )
    for src, dst in mapping.items():
        logits[dst][labels == src] = 10.0
    return logits
