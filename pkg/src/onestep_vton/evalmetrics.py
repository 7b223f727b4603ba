"""Evaluation: SSIM, masked L1, Fréchet feature distance and the timing
protocol (mean over full passes, warm-up excluded).

Feature extractors are pluggable so a real pretrained net can stand in for
the default seed-pinned random one; the report and table layout stay
identical either way.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .preprocess import mutable_mask

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_DYNAMIC_RANGE = 2.0  # images live in [-1, 1]


def _gaussian_window(size: int, sigma: float, dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def _luma(img: torch.Tensor) -> torch.Tensor:
    w = torch.tensor(LUMA_WEIGHTS, dtype=img.dtype, device=img.device)
    return torch.einsum("c,...chw->...hw", w, img)


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Structural similarity on luma with an 11x11 Gaussian window.

    Uses C1 = (0.01 L)^2, C2 = (0.03 L)^2 with L = 2 (the [-1, 1] range);
    statistics come from valid (fully inside) windows only.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    x = _luma(a)[..., None, :, :].double()
    y = _luma(b)[..., None, :, :].double()
    if x.dim() == 3:
        x = x[None]
        y = y[None]
    kernel = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA, x.dtype, x.device)[None, None]
    c1 = (0.01 * SSIM_DYNAMIC_RANGE) ** 2
    c2 = (0.03 * SSIM_DYNAMIC_RANGE) ** 2

    mu_x = F.conv2d(x, kernel)
    mu_y = F.conv2d(y, kernel)
    xx = F.conv2d(x * x, kernel) - mu_x**2
    yy = F.conv2d(y * y, kernel) - mu_y**2
    xy = F.conv2d(x * y, kernel) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    return float((num / den).mean())


def masked_l1(output: torch.Tensor, gt: torch.Tensor,
              mask: torch.Tensor) -> float:
    mask = mask.bool()
    if int(mask.sum()) == 0:
        return 0.0
    diff = (output - gt).abs().mean(dim=-3)
    return float(diff[mask].mean())


def paired_masked_l1(output: torch.Tensor, gt: torch.Tensor,
                     parsing: torch.Tensor, garment_type: str) -> float:
    """L1 over the mutable region only: what the generator actually produced."""
    return masked_l1(output, gt, mutable_mask(parsing, garment_type))


# ---------------------------------------------------------------------------
# feature distance
# ---------------------------------------------------------------------------

class SeededFeatureExtractor(nn.Module):
    """Frozen random conv features pooled to a fixed-size vector."""

    def __init__(self, dim: int = 64, seed: int = 0):
        super().__init__()
        self.extractor_id = f"seeded-conv:{dim}:{seed}"
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.net = nn.Sequential(
                nn.Conv2d(3, 32, 3, stride=2, padding=1), nn.SiLU(),
                nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.SiLU(),
                nn.Conv2d(64, dim, 3, stride=2, padding=1),
                nn.AdaptiveAvgPool2d(1),
            )
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        with torch.no_grad():
            return self.net(images).flatten(1)


class FlattenExtractor(nn.Module):
    """Raw pixels as features; keeps closed-form checks trivial."""

    extractor_id = "flatten"

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        return images.flatten(1)


def make_feature_extractor(spec: str) -> nn.Module:
    if spec == "flatten":
        return FlattenExtractor()
    if spec.startswith("seeded-conv:"):
        _, dim, seed = spec.split(":")
        return SeededFeatureExtractor(dim=int(dim), seed=int(seed))
    if spec.startswith("file:"):
        net = torch.load(spec[len("file:"):], map_location="cpu", weights_only=False)
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        return net
    raise ValueError(f"unknown feature extractor spec '{spec}'")


def feature_distance(set_a: torch.Tensor, set_b: torch.Tensor, extractor) -> float:
    """Fréchet distance between Gaussian fits of extracted features.

    ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}); order of images
    within each set is irrelevant.
    """
    from scipy import linalg

    fa = extractor(set_a).detach().cpu().numpy().astype(np.float64)
    fb = extractor(set_b).detach().cpu().numpy().astype(np.float64)
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    cov_a = np.cov(fa, rowvar=False)
    cov_b = np.cov(fb, rowvar=False)
    cov_a = np.atleast_2d(cov_a)
    cov_b = np.atleast_2d(cov_b)
    covmean = linalg.sqrtm(cov_a @ cov_b)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a + cov_b - 2.0 * covmean))


# ---------------------------------------------------------------------------
# timing protocol
# ---------------------------------------------------------------------------

@dataclass
class TimingStats:
    mean_seconds_per_batch: float
    std_seconds_per_batch: float
    mean_seconds_per_image: float
    batch_size: int
    num_batches: int
    repeats: int

    def to_dict(self) -> dict:
        return {
            "mean_seconds_per_batch": self.mean_seconds_per_batch,
            "std_seconds_per_batch": self.std_seconds_per_batch,
            "mean_seconds_per_image": self.mean_seconds_per_image,
            "batch_size": self.batch_size,
            "num_batches": self.num_batches,
            "repeats": self.repeats,
        }


def timing_bench(pipeline, batches: list, repeats: int = 10) -> TimingStats:
    """Times full passes of `pipeline` over pre-staged batches.

    One un-timed warm-up pass runs first; each repeat then times the whole
    pass. Data staging happens before the clock starts, so only compute is
    measured.
    """
    if not batches:
        raise ValueError("timing_bench needs at least one batch")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    pipeline(batches[0])  # warm-up, excluded
    per_pass = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for batch in batches:
            pipeline(batch)
        per_pass.append(time.perf_counter() - t0)
    arr = np.asarray(per_pass)
    per_batch = arr / len(batches)
    batch_size = _batch_size_of(batches[0])
    return TimingStats(
        mean_seconds_per_batch=float(per_batch.mean()),
        std_seconds_per_batch=float(per_batch.std(ddof=1)) if repeats > 1 else 0.0,
        mean_seconds_per_image=float(per_batch.mean() / batch_size),
        batch_size=batch_size,
        num_batches=len(batches),
        repeats=repeats,
    )


def _batch_size_of(batch) -> int:
    if torch.is_tensor(batch):
        return batch.shape[0]
    if isinstance(batch, dict):
        return next(iter(batch.values())).shape[0]
    return len(batch)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    pairing: str
    ssim: float | None = None
    l1: float | None = None
    feature_distance: float | None = None
    extractor_id: str = ""
    timing: TimingStats | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "pairing": self.pairing,
            "ssim": self.ssim,
            "l1": self.l1,
            "feature_distance": self.feature_distance,
            "extractor_id": self.extractor_id,
            "timing": self.timing.to_dict() if self.timing else None,
            "extra": self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


TABLE_COLUMNS = ("LPIPS↓", "SSIM↑", "FID↓", "KID↓", "T(s)↓")


def report_row(name: str, report: EvalReport) -> dict:
    """Maps a report onto the benchmark table layout.

    Desk-scale stand-ins: the paired column (LPIPS↓) carries the masked L1
    and FID↓ the pluggable feature distance; KID↓ stays empty unless a
    dedicated extractor supplies it via `extra`.
    """
    t = report.timing.mean_seconds_per_batch if report.timing else None
    return {
        "Method": name,
        "LPIPS↓": report.l1,
        "SSIM↑": report.ssim,
        "FID↓": report.feature_distance,
        "KID↓": report.extra.get("kid"),
        "T(s)↓": t,
    }


def render_markdown_table(rows: list[dict], columns=None) -> str:
    columns = list(columns or ["Method", *TABLE_COLUMNS])
    lines = ["| " + " | ".join(columns) + " |",
             "|" + "|".join(["---"] * len(columns)) + "|"]
    for row in rows:
        cells = []
        for col in columns:
            v = row.get(col)
            if v is None:
                cells.append("-")
            elif isinstance(v, float):
                cells.append(f"{v:.4f}")
            else:
                cells.append(str(v))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def render_csv_table(rows: list[dict], columns=None) -> str:
    import csv
    import io

    columns = list(columns or ["Method", *TABLE_COLUMNS])
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in columns})
    return buf.getvalue()
