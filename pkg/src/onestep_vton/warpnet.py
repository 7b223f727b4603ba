"""Cascaded appearance-flow warping network.

Two feature pyramids (person stream and garment stream) feed a stack of
per-scale fusion blocks, coarsest scale first. Each fusion block refines the
incoming flow twice (a coarse step driven by a correlation cost volume, then
a fine step driven by multi-head cross-attention, or channel concatenation
at resolutions where attention is disabled) and predicts a 7-channel global
parsing of the dressed person. Flows are expressed in pixels and upsampled
x2 (values doubled) between scales.

Predicted parsing channels: 0 background, 1 cloth, 2 left arm, 3 right arm,
4 center body, 5 left leg, 6 right leg.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import WarpNetConfig

NUM_GLOBAL_PARSE_CHANNELS = 7
GP_BACKGROUND = 0
GP_CLOTH = 1
GP_LEFT_ARM = 2
GP_RIGHT_ARM = 3
GP_CENTER_BODY = 4
GP_LEFT_LEG = 5
GP_RIGHT_LEG = 6

GP_BODY_PART_CHANNELS = {
    "left_arm": GP_LEFT_ARM,
    "right_arm": GP_RIGHT_ARM,
    "center_body": GP_CENTER_BODY,
    "left_leg": GP_LEFT_LEG,
    "right_leg": GP_RIGHT_LEG,
}

PERSON_INPUT_CHANNELS = 16  # 10 keypoint heatmaps + 3 dense pose + 3 masked person


class AttentionGateError(RuntimeError):
    """Cross-attention requested at a resolution outside the configured gate."""


def warp(x: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warps ``x`` by a pixel-unit flow field.

    Output pixel (y, x) bilinearly samples the input at (x - u, y - v) with
    border clamping. Integer flows therefore reduce to exact index shifts and
    a zero flow returns the input bit-exactly.
    """
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
        flow = flow.unsqueeze(0)
    if flow.dim() != 4 or flow.shape[1] != 2:
        raise ValueError(f"flow must be [B, 2, H, W], got {tuple(flow.shape)}")
    if flow.shape[-2:] != x.shape[-2:]:
        raise ValueError(
            f"flow size {tuple(flow.shape[-2:])} does not match input "
            f"{tuple(x.shape[-2:])}"
        )
    b, c, h, w = x.shape
    gy, gx = torch.meshgrid(
        torch.arange(h, dtype=x.dtype, device=x.device),
        torch.arange(w, dtype=x.dtype, device=x.device),
        indexing="ij",
    )
    src_x = (gx.unsqueeze(0) - flow[:, 0]).clamp(0, w - 1)
    src_y = (gy.unsqueeze(0) - flow[:, 1]).clamp(0, h - 1)
    x0f = src_x.floor()
    y0f = src_y.floor()
    wx = (src_x - x0f).unsqueeze(1)
    wy = (src_y - y0f).unsqueeze(1)
    x0 = x0f.long()
    y0 = y0f.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = x.reshape(b, c, h * w)

    def gather(iy, ix):
        idx = (iy * w + ix).reshape(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).reshape(b, c, h, w)

    v00 = gather(y0, x0)
    v01 = gather(y0, x1)
    v10 = gather(y1, x0)
    v11 = gather(y1, x1)
    out = (
        v00 * (1 - wy) * (1 - wx)
        + v01 * (1 - wy) * wx
        + v10 * wy * (1 - wx)
        + v11 * wy * wx
    )
    return out.squeeze(0) if unbatched else out


def correlate(a: torch.Tensor, b: torch.Tensor, max_disp: int = 4) -> torch.Tensor:
    """Cost volume over a (2*max_disp+1)^2 displacement window.

    Channel (dy, dx) at pixel p holds <a(p), b(p + (dx, dy))> / C with zero
    padding outside the image; channels are ordered dy-major.
    """
    if a.shape != b.shape:
        raise ValueError(f"feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    unbatched = a.dim() == 3
    if unbatched:
        a = a.unsqueeze(0)
        b = b.unsqueeze(0)
    bsz, c, h, w = a.shape
    k = 2 * max_disp + 1
    windows = F.unfold(b, k, padding=max_disp).reshape(bsz, c, k * k, h, w)
    out = torch.einsum("bchw,bckhw->bkhw", a, windows) / c
    return out.squeeze(0) if unbatched else out


def scaled_dot_attention(q, k, v, heads: int = 1, dropout_p: float = 0.0,
                         training: bool = False, return_weights: bool = False):
    """Multi-head scaled dot-product attention over stacked vectors.

    q: [B, M, D]; k, v: [B, N, D]; D must be divisible by `heads`. Per head,
    softmax(QK^T / sqrt(D/heads)) V.
    """
    bsz, m, d = q.shape
    n = k.shape[1]
    if d % heads:
        raise ValueError(f"dim {d} not divisible by heads={heads}")
    dh = d // heads
    qh = q.reshape(bsz, m, heads, dh).transpose(1, 2)
    kh = k.reshape(bsz, n, heads, dh).transpose(1, 2)
    vh = v.reshape(bsz, n, heads, dh).transpose(1, 2)
    # Scaling q first is algebraically the same as dividing the score matrix.
    weights = torch.softmax((qh / math.sqrt(dh)) @ kh.transpose(-1, -2), dim=-1)
    attn = F.dropout(weights, dropout_p) if (dropout_p > 0 and training) else weights
    out = (attn @ vh).transpose(1, 2).reshape(bsz, m, d)
    if return_weights:
        return out, weights
    return out


class CrossAttentionFuse(nn.Module):
    """Fuses warped-garment queries with person keys/values plus a residual.

    Queries come from the warped garment feature, keys and values from the
    person feature; the attended output is projected back and added to the
    query stream. When `allowed_heights` is given, calling at any other
    feature height raises AttentionGateError.
    """

    def __init__(self, channels: int, heads: int = 4, dropout: float = 0.0,
                 allowed_heights: tuple[int, ...] | None = None):
        super().__init__()
        self.heads = heads
        self.dropout = dropout
        self.allowed_heights = tuple(allowed_heights) if allowed_heights else None
        self.to_q = nn.Conv2d(channels, channels, 1)
        self.to_k = nn.Conv2d(channels, channels, 1)
        self.to_v = nn.Conv2d(channels, channels, 1)
        self.to_out = nn.Conv2d(channels, channels, 1)

    def forward(self, garment_feat: torch.Tensor, person_feat: torch.Tensor,
                return_weights: bool = False):
        b, c, h, w = garment_feat.shape
        if self.allowed_heights is not None and h not in self.allowed_heights:
            raise AttentionGateError(
                f"cross-attention called at height {h}, outside gate "
                f"{list(self.allowed_heights)}; use concatenation at this scale"
            )
        q = self.to_q(garment_feat).flatten(2).transpose(1, 2)
        k = self.to_k(person_feat).flatten(2).transpose(1, 2)
        v = self.to_v(person_feat).flatten(2).transpose(1, 2)
        attended, weights = scaled_dot_attention(
            q, k, v, heads=self.heads, dropout_p=self.dropout,
            training=self.training, return_weights=True,
        )
        attended = attended.transpose(1, 2).reshape(b, c, h, w)
        out = garment_feat + self.to_out(attended)
        if return_weights:
            return out, weights
        return out


def clamp_flow(flow: torch.Tensor, bound: float) -> torch.Tensor:
    """Rescales flow vectors whose norm exceeds `bound` back onto the bound."""
    norm = torch.sqrt((flow**2).sum(dim=-3, keepdim=True) + 1e-12)
    factor = torch.where(norm > bound, bound / norm, torch.ones_like(norm))
    return flow * factor


def _zeroed(conv: nn.Conv2d) -> nn.Conv2d:
    nn.init.zeros_(conv.weight)
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)
    return conv


def _soft_cap(residual: torch.Tensor, cap: float) -> torch.Tensor:
    """Smoothly bounds a flow residual to ±cap; exact zero stays zero."""
    return cap * torch.tanh(residual / cap)


class CoarseFlowBlock(nn.Module):
    """Correlation-driven flow residual; identity until trained.

    The residual is soft-capped at the correlation window radius: one block
    refines within what its cost volume can see, which keeps fast training
    from blowing the cascade up.
    """

    def __init__(self, max_disp: int = 4, flow_bound: float = 1e4,
                 hidden: tuple[int, int] = (96, 64)):
        super().__init__()
        self.max_disp = max_disp
        self.flow_bound = flow_bound
        corr_ch = (2 * max_disp + 1) ** 2
        self.net = nn.Sequential(
            nn.Conv2d(corr_ch, hidden[0], 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden[0], hidden[1], 3, padding=1),
            nn.SiLU(),
            _zeroed(nn.Conv2d(hidden[1], 2, 3, padding=1)),
        )

    def forward(self, garment_feat, person_feat, flow_in):
        warped = warp(garment_feat, flow_in)
        cost = correlate(warped, person_feat, self.max_disp)
        residual = _soft_cap(self.net(cost), float(self.max_disp))
        return clamp_flow(flow_in + residual, self.flow_bound)


class FineFlowBlock(nn.Module):
    """Attention- or concat-fused flow refinement.

    Both fusion modes produce a `channels`-wide feature (attention keeps the
    width, concatenation is projected back with a 1x1 conv) feeding a shared
    grouped-convolution stack, so enabling attention strictly adds
    parameters.
    """

    def __init__(self, channels: int, use_attention: bool, heads: int = 4,
                 dropout: float = 0.0, flow_bound: float = 1e4, groups: int = 4,
                 hidden: tuple[int, int] = (96, 64), max_residual: float = 4.0):
        super().__init__()
        self.use_attention = use_attention
        self.flow_bound = flow_bound
        self.max_residual = max_residual
        if use_attention:
            self.fuse = CrossAttentionFuse(channels, heads=heads, dropout=dropout)
        else:
            self.fuse = nn.Conv2d(2 * channels, channels, 1)
        self.net = nn.Sequential(
            nn.Conv2d(channels, hidden[0], 3, padding=1, groups=groups),
            nn.SiLU(),
            nn.Conv2d(hidden[0], hidden[1], 3, padding=1, groups=groups),
            nn.SiLU(),
            _zeroed(nn.Conv2d(hidden[1], 2, 3, padding=1)),
        )

    def forward(self, garment_feat, person_feat, flow_in):
        warped = warp(garment_feat, flow_in)
        if self.use_attention:
            fused = self.fuse(warped, person_feat)
        else:
            fused = self.fuse(torch.cat([warped, person_feat], dim=1))
        residual = _soft_cap(self.net(fused), self.max_residual)
        return clamp_flow(flow_in + residual, self.flow_bound)


class GlobalParsingBlock(nn.Module):
    def __init__(self, channels: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(2 * channels, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, NUM_GLOBAL_PARSE_CHANNELS, 3, padding=1),
        )

    def forward(self, garment_feat, person_feat, flow_in):
        warped = warp(garment_feat, flow_in)
        return self.net(torch.cat([warped, person_feat], dim=1))


class FusionBlock(nn.Module):
    """One scale of the cascade: CF-B -> FF-B -> GP-B."""

    def __init__(self, channels: int, use_attention: bool, heads: int = 4,
                 dropout: float = 0.0, max_disp: int = 4, flow_bound: float = 1e4,
                 hidden: tuple[int, int] = (96, 64)):
        super().__init__()
        self.coarse = CoarseFlowBlock(max_disp=max_disp, flow_bound=flow_bound,
                                      hidden=hidden)
        self.fine = FineFlowBlock(
            channels, use_attention, heads=heads, dropout=dropout,
            flow_bound=flow_bound, hidden=hidden, max_residual=float(max_disp),
        )
        self.parsing = GlobalParsingBlock(channels, hidden=hidden[1])

    def forward(self, garment_feat, person_feat, flow_in):
        flow_coarse = self.coarse(garment_feat, person_feat, flow_in)
        flow_out = self.fine(garment_feat, person_feat, flow_coarse)
        logits = self.parsing(garment_feat, person_feat, flow_out)
        return flow_out, logits


class FeaturePyramidExtractor(nn.Module):
    """Encoder plus top-down refinement producing one feature map per scale.

    Returned list is ordered coarsest first; level k (counting from the
    finest) has spatial size (H / 2^k, W / 2^k) and `channels[k]` channels.
    """

    def __init__(self, in_channels: int, channels: list[int]):
        super().__init__()
        self.channels = list(channels)
        blocks = []
        prev = in_channels
        for i, ch in enumerate(self.channels):
            stride = 1 if i == 0 else 2
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(prev, ch, 3, stride=stride, padding=1),
                    nn.SiLU(),
                    nn.Conv2d(ch, ch, 3, padding=1),
                    nn.SiLU(),
                )
            )
            prev = ch
        self.encoder = nn.ModuleList(blocks)
        self.lateral = nn.ModuleList(nn.Conv2d(ch, ch, 1) for ch in self.channels)
        self.merge = nn.ModuleList(
            nn.Conv2d(self.channels[i + 1], self.channels[i], 1)
            for i in range(len(self.channels) - 1)
        )
        self.smooth = nn.ModuleList(
            nn.Conv2d(ch, ch, 3, padding=1) for ch in self.channels
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        n = len(self.channels)
        h, w = x.shape[-2:]
        step = 2 ** (n - 1)
        if h % step or w % step:
            raise ValueError(
                f"input {h}x{w} not divisible by 2^{n - 1} for a {n}-level pyramid"
            )
        feats = []
        cur = x
        for block in self.encoder:
            cur = block(cur)
            feats.append(cur)
        out: list[torch.Tensor | None] = [None] * n
        td = self.lateral[n - 1](feats[n - 1])
        out[n - 1] = self.smooth[n - 1](td)
        for i in range(n - 2, -1, -1):
            up = F.interpolate(td, size=feats[i].shape[-2:], mode="bilinear",
                               align_corners=False)
            td = self.lateral[i](feats[i]) + self.merge[i](up)
            out[i] = self.smooth[i](td)
        return list(reversed(out))  # coarsest first


def upsample_flow(flow: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear flow upsampling with displacement values scaled by the ratio."""
    scale = size[0] / flow.shape[-2]
    up = F.interpolate(flow, size=size, mode="bilinear", align_corners=False)
    return up * scale


@dataclass
class WarpOutputs:
    """Cascade outputs, coarsest first; the last entry is full resolution."""

    flows: list[torch.Tensor]
    parsings: list[torch.Tensor]

    @property
    def finest_flow(self) -> torch.Tensor:
        return self.flows[-1]

    @property
    def finest_parsing(self) -> torch.Tensor:
        return self.parsings[-1]


class WarpModule(nn.Module):
    """Full warping stage: both pyramids plus the fusion cascade.

    `resolution` fixes which scales fall inside the cross-attention gate;
    heights are compared against cfg.cross_attention_resolutions.
    """

    def __init__(self, cfg: WarpNetConfig, resolution: tuple[int, int],
                 use_attention: bool = True):
        super().__init__()
        self.cfg = cfg
        self.resolution = tuple(resolution)
        h, w = resolution
        n = cfg.num_scales
        step = 2 ** (n - 1)
        if h % step or w % step:
            raise ValueError(
                f"resolution {h}x{w} not divisible by 2^{n - 1} for a {n}-scale pyramid"
            )
        self.person_fpn = FeaturePyramidExtractor(PERSON_INPUT_CHANNELS, cfg.fpn_channels)
        self.garment_fpn = FeaturePyramidExtractor(3, cfg.fpn_channels)
        gate = set(cfg.cross_attention_resolutions)
        blocks = []
        self.attention_levels = []
        for k in range(n):  # k counts from the finest level
            level_h = h // (2**k)
            attn = use_attention and level_h in gate
            self.attention_levels.append(attn)
            bound = cfg.flow_clamp_factor * max(h // (2**k), w // (2**k))
            blocks.append(
                FusionBlock(
                    cfg.fpn_channels[k],
                    use_attention=attn,
                    heads=cfg.attention_heads,
                    dropout=cfg.cross_attention_dropout,
                    max_disp=cfg.correlation_max_disp,
                    flow_bound=bound,
                    hidden=tuple(cfg.flow_hidden_channels),
                )
            )
        # Stored coarsest first to match the order of use.
        self.fusion_blocks = nn.ModuleList(reversed(blocks))

    def extract_person_pyramid(self, keypoint_heatmaps, densepose, masked_person):
        shapes = {keypoint_heatmaps.shape[-2:], densepose.shape[-2:], masked_person.shape[-2:]}
        if len(shapes) != 1:
            raise ValueError(f"person inputs disagree on spatial size: {shapes}")
        stacked = torch.cat([keypoint_heatmaps, densepose, masked_person], dim=-3)
        return self.person_fpn(stacked)

    def extract_garment_pyramid(self, garment):
        return self.garment_fpn(garment)

    def forward_cascade(self, person_pyramid, garment_pyramid) -> WarpOutputs:
        if len(person_pyramid) != len(garment_pyramid):
            raise ValueError(
                f"pyramid depth mismatch: person {len(person_pyramid)} vs "
                f"garment {len(garment_pyramid)}"
            )
        if len(person_pyramid) != len(self.fusion_blocks):
            raise ValueError(
                f"expected {len(self.fusion_blocks)} levels, got {len(person_pyramid)}"
            )
        flows = []
        parsings = []
        flow = None
        for block, p_feat, g_feat in zip(self.fusion_blocks, person_pyramid, garment_pyramid):
            b = p_feat.shape[0]
            size = p_feat.shape[-2:]
            if flow is None:
                flow = p_feat.new_zeros((b, 2, *size))
            else:
                flow = upsample_flow(flow, size)
            flow, logits = block(g_feat, p_feat, flow)
            flows.append(flow)
            parsings.append(logits)
        return WarpOutputs(flows=flows, parsings=parsings)

    def forward(self, keypoint_heatmaps, densepose, masked_person, garment) -> WarpOutputs:
        person_pyr = self.extract_person_pyramid(keypoint_heatmaps, densepose, masked_person)
        garment_pyr = self.extract_garment_pyramid(garment)
        return self.forward_cascade(person_pyr, garment_pyr)
