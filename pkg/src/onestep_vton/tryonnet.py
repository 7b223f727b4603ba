"""Single-step fixed-noise try-on generator.

A conditional U-Net consumes the concatenation of a noise-conditioned image,
the local condition image and the dense-pose map (9 channels total) and emits
the dressed person directly, squashed to [-1, 1]. Where a diffusion U-Net
would inject a timestep embedding, this net injects a frozen global embedding
of the in-shop garment; noising uses one fixed ratio (z = z0 + alpha * eps),
so inference is a single forward pass. A time-conditioned variant of the same
backbone supports a classic multi-step DDIM baseline for benchmarking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import PARSE_BACKGROUND, TryOnNetConfig
from .warpnet import GP_BACKGROUND, scaled_dot_attention
from .preprocess import PreservedMask


@dataclass
class NoiseConfig:
    alpha_n: float = 5.0
    rng_seed: int = 0


def add_noise(z0: torch.Tensor, cfg: NoiseConfig) -> torch.Tensor:
    """z = z0 + alpha_n * eps with eps ~ N(0, I) from a dedicated seeded stream."""
    gen = torch.Generator(device=z0.device.type).manual_seed(cfg.rng_seed)
    eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype, device=z0.device)
    return z0 + cfg.alpha_n * eps


def derive_seed(base_seed: int, *parts) -> int:
    """Stable per-worker / per-step seed derivation (hash-based, not RNG)."""
    import hashlib

    h = hashlib.sha256(repr((base_seed,) + tuple(parts)).encode())
    return int.from_bytes(h.digest()[:8], "little") % (2**63)


# ---------------------------------------------------------------------------
# global condition encoders
# ---------------------------------------------------------------------------

class SeededConvEncoder(nn.Module):
    """Frozen, seed-pinned conv encoder producing a global garment embedding.

    Stands in for a pretrained image encoder at desk scale; the adaptive pool
    makes it resolution independent.
    """

    def __init__(self, embedding_dim: int = 512, seed: int = 0):
        super().__init__()
        self.encoder_id = f"seeded-conv:{embedding_dim}:{seed}"
        self.embedding_dim = embedding_dim
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.net = nn.Sequential(
                nn.Conv2d(3, 32, 3, stride=2, padding=1), nn.SiLU(),
                nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.SiLU(),
                nn.Conv2d(64, 128, 3, stride=2, padding=1), nn.SiLU(),
                nn.AdaptiveAvgPool2d(1),
            )
            self.head = nn.Linear(128, embedding_dim)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, garment: torch.Tensor) -> torch.Tensor:
        unbatched = garment.dim() == 3
        if unbatched:
            garment = garment.unsqueeze(0)
        emb = self.head(self.net(garment).flatten(1))
        return emb.squeeze(0) if unbatched else emb


class FileEmbeddingEncoder(nn.Module):
    """Serves precomputed garment embeddings (e.g. real CLIP features) from
    an .npz archive keyed by sample name."""

    def __init__(self, path: str, embedding_dim: int = 512):
        super().__init__()
        import numpy as np

        self.encoder_id = f"clip-file:{path}"
        self.embedding_dim = embedding_dim
        archive = np.load(path)
        self._table = {k: torch.from_numpy(archive[k]).float() for k in archive.files}

    def forward(self, garment: torch.Tensor, names=None) -> torch.Tensor:
        if names is None:
            raise ValueError(f"encoder '{self.encoder_id}' needs sample names to look up")
        if isinstance(names, str):
            return self._table[names]
        return torch.stack([self._table[n] for n in names])


def make_global_encoder(spec: str, embedding_dim: int = 512) -> nn.Module:
    if spec.startswith("seeded-conv:"):
        _, dim, seed = spec.split(":")
        return SeededConvEncoder(embedding_dim=int(dim), seed=int(seed))
    if spec.startswith("clip-file:"):
        return FileEmbeddingEncoder(spec[len("clip-file:"):], embedding_dim)
    if spec.startswith("clip:"):
        raise FileNotFoundError(
            f"encoder '{spec}' needs precomputed embeddings; point encoder_id at "
            "'clip-file:<path.npz>' or use a 'seeded-conv:<dim>:<seed>' encoder"
        )
    raise ValueError(f"unknown global encoder spec '{spec}'")


def encode_global(garment: torch.Tensor, encoder: nn.Module, names=None) -> torch.Tensor:
    """Embeds the in-shop garment with a frozen encoder; no gradient flows in."""
    with torch.no_grad():
        if isinstance(encoder, FileEmbeddingEncoder):
            emb = encoder(garment, names=names)
        else:
            emb = encoder(garment)
    return emb.detach()


def parameter_fingerprint(module: nn.Module) -> str:
    """Order-stable hash of all parameters; used to assert frozen encoders."""
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# U-Net backbone
# ---------------------------------------------------------------------------

def _norm(channels: int) -> nn.GroupNorm:
    groups = next(g for g in (8, 4, 2, 1) if channels % g == 0)
    return nn.GroupNorm(groups, channels)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, dropout: float = 0.0):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.dropout = nn.Dropout(dropout)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(self.dropout(F.silu(self.norm2(h))))
        return h + self.skip(x)


class SelfAttention2d(nn.Module):
    def __init__(self, channels: int, heads: int = 4, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.dropout = dropout
        self.norm = _norm(channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=1)
        q = q.flatten(2).transpose(1, 2)
        k = k.flatten(2).transpose(1, 2)
        v = v.flatten(2).transpose(1, 2)
        out = scaled_dot_attention(
            q, k, v, heads=self.heads, dropout_p=self.dropout, training=self.training
        )
        out = out.transpose(1, 2).reshape(b, c, h, w)
        return x + self.proj(out)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Classic transformer-style timestep embedding."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half
    )
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TryOnUNet(nn.Module):
    """Image-conditioned U-Net with the timestep slot repurposed.

    Input channels: 3 noise image + 3 local condition + 3 dense pose. The
    garment embedding is injected in every residual block; with
    `time_conditioned=True` a sinusoidal timestep embedding is added to it
    (the multi-step DDIM baseline) and the head turns linear for noise
    prediction.
    """

    IN_CHANNELS = 9

    def __init__(self, cfg: TryOnNetConfig, resolution: tuple[int, int],
                 time_conditioned: bool = False):
        super().__init__()
        self.cfg = cfg
        self.resolution = tuple(resolution)
        self.time_conditioned = time_conditioned
        self.forward_calls = 0

        base = cfg.base_channels
        emb_dim = base * 4
        self.embed_in = nn.Sequential(
            nn.Linear(cfg.embedding_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        if time_conditioned:
            self.time_in = nn.Sequential(
                nn.Linear(base, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
            )

        attn_heights = set(cfg.attention_resolutions)
        # Optional lossless space-to-depth stem: runs the body at reduced
        # resolution on small CPUs without discarding pixels.
        sd = cfg.stem_downsample
        h0 = resolution[0] // sd
        widths = [base * m for m in cfg.channel_multipliers]
        if sd > 1:
            self.stem = nn.Sequential(
                nn.PixelUnshuffle(sd),
                nn.Conv2d(self.IN_CHANNELS * sd * sd, widths[0], 3, padding=1),
            )
        else:
            self.stem = nn.Conv2d(self.IN_CHANNELS, widths[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        skip_widths = [widths[0]]
        ch = widths[0]
        for s, width in enumerate(widths):
            level = nn.ModuleList()
            for _ in range(cfg.res_blocks_per_scale):
                level.append(ResBlock(ch, width, emb_dim, cfg.attention_dropout))
                ch = width
                if (h0 >> s) in attn_heights:
                    level.append(SelfAttention2d(ch, dropout=cfg.attention_dropout))
                skip_widths.append(ch)
            self.down_blocks.append(level)
            if s != len(widths) - 1:
                self.downsamples.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                skip_widths.append(ch)
            else:
                self.downsamples.append(nn.Identity())

        self.mid_block1 = ResBlock(ch, ch, emb_dim, cfg.attention_dropout)
        self.mid_attn = SelfAttention2d(ch, dropout=cfg.attention_dropout)
        self.mid_block2 = ResBlock(ch, ch, emb_dim, cfg.attention_dropout)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for s in reversed(range(len(widths))):
            width = widths[s]
            level = nn.ModuleList()
            for _ in range(cfg.res_blocks_per_scale + 1):
                level.append(ResBlock(ch + skip_widths.pop(), width, emb_dim,
                                      cfg.attention_dropout))
                ch = width
                if (h0 >> s) in attn_heights:
                    level.append(SelfAttention2d(ch, dropout=cfg.attention_dropout))
            self.up_blocks.append(level)
            if s != 0:
                self.upsamples.append(nn.Conv2d(ch, ch, 3, padding=1))
            else:
                self.upsamples.append(nn.Identity())

        self.out_norm = _norm(ch)
        if sd > 1:
            self.out_conv = nn.Sequential(
                nn.Conv2d(ch, 3 * sd * sd, 3, padding=1), nn.PixelShuffle(sd)
            )
        else:
            self.out_conv = nn.Conv2d(ch, 3, 3, padding=1)

    def reset_forward_count(self) -> None:
        self.forward_calls = 0

    def forward(self, noise_img, local_cond, densepose, embedding, t=None):
        self.forward_calls += 1
        shapes = {noise_img.shape[-2:], local_cond.shape[-2:], densepose.shape[-2:]}
        if len(shapes) != 1:
            raise ValueError(f"conditioning inputs disagree on spatial size: {shapes}")
        unbatched = noise_img.dim() == 3
        if unbatched:
            noise_img = noise_img.unsqueeze(0)
            local_cond = local_cond.unsqueeze(0)
            densepose = densepose.unsqueeze(0)
            embedding = embedding.unsqueeze(0)

        emb = self.embed_in(embedding)
        if self.time_conditioned:
            if t is None:
                raise ValueError("time-conditioned net needs a timestep tensor")
            if t.dim() == 0:
                t = t.expand(noise_img.shape[0])
            emb = emb + self.time_in(sinusoidal_embedding(t, self.cfg.base_channels))

        x = self.stem(torch.cat([noise_img, local_cond, densepose], dim=1))
        skips = [x]
        for level, down in zip(self.down_blocks, self.downsamples):
            for block in level:
                x = block(x, emb) if isinstance(block, ResBlock) else block(x)
                if isinstance(block, ResBlock):
                    skips.append(x)
            if not isinstance(down, nn.Identity):
                x = down(x)
                skips.append(x)

        x = self.mid_block1(x, emb)
        x = self.mid_attn(x)
        x = self.mid_block2(x, emb)

        for level, up in zip(self.up_blocks, self.upsamples):
            for block in level:
                if isinstance(block, ResBlock):
                    x = block(torch.cat([x, skips.pop()], dim=1), emb)
                else:
                    x = block(x)
            if not isinstance(up, nn.Identity):
                x = F.interpolate(x, scale_factor=2, mode="nearest")
                x = up(x)

        x = self.out_conv(F.silu(self.out_norm(x)))
        out = x if self.time_conditioned else torch.tanh(x)
        return out.squeeze(0) if unbatched else out


def denoise_forward(net: TryOnUNet, noise_img, local_cond, densepose, embedding):
    """One generator pass: the whole inference-time sampling of this model."""
    return net(noise_img, local_cond, densepose, embedding)


def static_mask(preserved: PreservedMask, pred_parsing: torch.Tensor,
                actual_parsing: torch.Tensor) -> torch.Tensor:
    """(predicted background ∩ actual background) ∪ preserved mask."""
    pred_bg = pred_parsing.argmax(dim=-3) == GP_BACKGROUND
    actual_bg = actual_parsing == PARSE_BACKGROUND
    return (pred_bg & actual_bg) | preserved.mask


def merge_static(raw_output: torch.Tensor, person: torch.Tensor,
                 preserved: PreservedMask, pred_parsing: torch.Tensor,
                 actual_parsing: torch.Tensor) -> torch.Tensor:
    """Copies static pixels from the person into the generated image.

    Static = (predicted background ∩ actual background) ∪ preserved mask;
    everything is a verbatim copy, no blending.
    """
    static = static_mask(preserved, pred_parsing, actual_parsing)
    return torch.where(static, person, raw_output)


class EmaShadow:
    """Exponential moving average of a module's floating-point state."""

    def __init__(self, module: nn.Module, decay: float = 0.9999):
        self.decay = decay
        self.shadow = {
            k: v.detach().clone()
            for k, v in module.state_dict().items()
            if v.dtype.is_floating_point
        }

    @torch.no_grad()
    def update(self, module: nn.Module) -> None:
        for k, v in module.state_dict().items():
            if k in self.shadow:
                self.shadow[k].mul_(self.decay).add_(v.detach(), alpha=1.0 - self.decay)

    @torch.no_grad()
    def copy_to(self, module: nn.Module) -> None:
        state = module.state_dict()
        for k, v in self.shadow.items():
            state[k].copy_(v)

    def max_divergence(self, module: nn.Module) -> float:
        worst = 0.0
        for k, v in module.state_dict().items():
            if k in self.shadow:
                worst = max(worst, float((self.shadow[k] - v).abs().max()))
        return worst


# ---------------------------------------------------------------------------
# multi-step DDIM baseline
# ---------------------------------------------------------------------------

@dataclass
class DDIMSchedule:
    alphas_cumprod: torch.Tensor  # [T]

    @property
    def num_train_steps(self) -> int:
        return len(self.alphas_cumprod)


def make_ddim_schedule(num_train_steps: int = 1000, beta_start: float = 1e-4,
                       beta_end: float = 0.02) -> DDIMSchedule:
    betas = torch.linspace(beta_start, beta_end, num_train_steps)
    return DDIMSchedule(alphas_cumprod=torch.cumprod(1.0 - betas, dim=0))


def ddim_sample(net: TryOnUNet, local_cond, densepose, embedding, steps: int,
                schedule: DDIMSchedule | None = None, x_init=None,
                seed: int = 0) -> torch.Tensor:
    """Deterministic DDIM iteration with a noise-predicting variant net."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if not net.time_conditioned:
        raise ValueError("ddim_sample needs a time-conditioned net")
    if schedule is None:
        schedule = make_ddim_schedule()
    acp = schedule.alphas_cumprod.to(local_cond.device)
    t_total = schedule.num_train_steps
    timesteps = torch.linspace(t_total - 1, 0, steps).round().long()

    unbatched = local_cond.dim() == 3
    if unbatched:
        local_cond = local_cond.unsqueeze(0)
        densepose = densepose.unsqueeze(0)
        embedding = embedding.unsqueeze(0)
    if x_init is None:
        gen = torch.Generator(device=local_cond.device.type).manual_seed(seed)
        x = torch.randn(
            (local_cond.shape[0], 3, *local_cond.shape[-2:]),
            generator=gen, dtype=local_cond.dtype, device=local_cond.device,
        )
    else:
        x = x_init if x_init.dim() == 4 else x_init.unsqueeze(0)

    for i, t in enumerate(timesteps):
        a_t = acp[t]
        a_prev = acp[timesteps[i + 1]] if i + 1 < len(timesteps) else acp.new_tensor(1.0)
        eps = net(x, local_cond, densepose, embedding, t=t.to(local_cond.device))
        x0 = (x - torch.sqrt(1.0 - a_t) * eps) / torch.sqrt(a_t)
        x = torch.sqrt(a_prev) * x0 + torch.sqrt(1.0 - a_prev) * eps
    return x.squeeze(0) if unbatched else x


class PatchDiscriminator(nn.Module):
    """4-layer strided patch discriminator used by both training stages."""

    def __init__(self, in_channels: int, base: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, base, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(base, base * 2, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(base * 2, base * 4, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(base * 4, 1, 3, padding=1),
        )

    def forward(self, x):
        return self.net(x)
