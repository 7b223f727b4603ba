"""Condition building: preserved masks, keypoint heatmaps and the local
condition image fed to the try-on stage.

Every op is a pure tensor transform over single samples; batching is the
caller's job.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .config import (
    GARMENT_TYPES,
    PARSE_BACKGROUND,
    ConfigError,
)

# Labels preserved per garment type; everything else is mutable.
PRESERVED_LABELS = {
    "upper": (0, 1, 3, 6, 7),
    "lower": (0, 1, 2, 4, 5),
    "dress": (0, 1),
}

HOLE_FILL_VALUE = 0.0  # mid-gray in [-1, 1]

PROV_WARPED_GARMENT = 0
PROV_PRESERVED = 1
PROV_BACKGROUND = 2
PROV_HOLE = 3


@dataclass
class PreservedMask:
    """Pixels guaranteed to survive the try-on untouched.

    `mask` covers all preserved labels (background included); `background`
    singles out label-0 pixels for provenance tracking.
    """

    mask: torch.Tensor        # [H, W] bool
    garment_type: str
    background: torch.Tensor  # [H, W] bool

    def apply(self, image: torch.Tensor) -> torch.Tensor:
        """Zeroes the mutable region of an image (masking is idempotent)."""
        return torch.where(self.mask, image, torch.zeros_like(image))


def build_preserved_mask(parsing: torch.Tensor, garment_type: str) -> PreservedMask:
    if garment_type not in GARMENT_TYPES:
        raise ConfigError(f"unknown garment_type '{garment_type}'")
    labels = torch.as_tensor(
        PRESERVED_LABELS[garment_type], device=parsing.device
    )
    mask = torch.isin(parsing, labels)
    return PreservedMask(
        mask=mask,
        garment_type=garment_type,
        background=parsing == PARSE_BACKGROUND,
    )


def mutable_mask(parsing: torch.Tensor, garment_type: str) -> torch.Tensor:
    """Complement of the preserved mask: the region the try-on may rewrite."""
    return ~build_preserved_mask(parsing, garment_type).mask


def rasterize_keypoints(joints, size: tuple[int, int],
                        sigma: float | None = None) -> torch.Tensor:
    """One Gaussian heatmap per joint, peak normalized to exactly 1.

    `joints` is a list of (x, y, visible); invisible joints yield an all-zero
    channel. The default sigma scales with resolution: 3 px at height 64.
    """
    h, w = size
    if sigma is None:
        sigma = 3.0 * h / 64.0
    yy, xx = torch.meshgrid(
        torch.arange(h, dtype=torch.float32),
        torch.arange(w, dtype=torch.float32),
        indexing="ij",
    )
    maps = torch.zeros((len(joints), h, w), dtype=torch.float32)
    for i, (x, y, visible) in enumerate(joints):
        if not visible:
            continue
        heat = torch.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2.0 * sigma**2))
        peak = heat.max()
        if peak > 0:
            heat = heat / peak
        maps[i] = heat
    return maps


@dataclass
class ConditionImage:
    """Local condition for the try-on net plus per-pixel provenance.

    Provenance values: 0 warped garment, 1 preserved person content,
    2 background, 3 hole (filled with HOLE_FILL_VALUE). Precedence when
    sources overlap: garment > preserved > background > hole. Every pixel is
    copied verbatim from exactly one source; nothing is blended.
    """

    image: torch.Tensor       # [3, H, W]
    provenance: torch.Tensor  # [H, W] uint8

    def source_mask(self, provenance_value: int) -> torch.Tensor:
        return self.provenance == provenance_value


def assemble_condition(person: torch.Tensor, warped_garment: torch.Tensor,
                       warped_cloth_mask: torch.Tensor,
                       preserved: PreservedMask) -> ConditionImage:
    if person.shape != warped_garment.shape:
        raise ValueError(
            f"person {tuple(person.shape)} vs warped garment "
            f"{tuple(warped_garment.shape)} shape mismatch"
        )
    if warped_cloth_mask.shape != person.shape[-2:]:
        raise ValueError(
            f"cloth mask {tuple(warped_cloth_mask.shape)} does not match image "
            f"{tuple(person.shape[-2:])}"
        )
    cloth = warped_cloth_mask.bool()
    preserved_only = preserved.mask & ~preserved.background & ~cloth
    background_only = preserved.background & ~cloth

    provenance = torch.full(person.shape[-2:], PROV_HOLE, dtype=torch.uint8)
    provenance[background_only] = PROV_BACKGROUND
    provenance[preserved_only] = PROV_PRESERVED
    provenance[cloth] = PROV_WARPED_GARMENT

    image = torch.full_like(person, HOLE_FILL_VALUE)
    person_src = preserved_only | background_only
    image = torch.where(person_src, person, image)
    image = torch.where(cloth, warped_garment, image)
    return ConditionImage(image=image, provenance=provenance)
