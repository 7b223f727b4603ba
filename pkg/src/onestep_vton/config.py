"""Run configuration: dataclass schema, named presets, strict (de)serialization.

Every hyper-parameter of the pipeline lives here; nothing is hard-coded in the
network or training modules. Named presets cover the two public-dataset
resolutions plus a CPU-sized ``desk-64`` preset used by the test suite and
the smoke-training scripts.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Raised for schema violations: unknown keys, bad types, bad values."""


# Internal 9-label parsing scheme used everywhere in the pipeline.
PARSE_BACKGROUND = 0
PARSE_HEAD = 1
PARSE_UPPER_CLOTH = 2
PARSE_LOWER_CLOTH = 3
PARSE_LEFT_ARM = 4
PARSE_RIGHT_ARM = 5
PARSE_LEFT_LEG = 6
PARSE_RIGHT_LEG = 7
PARSE_CENTER_BODY = 8
NUM_PARSE_LABELS = 9

GARMENT_TYPES = ("upper", "lower", "dress")


@dataclass
class WarpNetConfig:
    num_scales: int = 6
    # Feature channels per pyramid level, finest level first.
    fpn_channels: list[int] = field(
        default_factory=lambda: [32, 64, 128, 256, 256, 256]
    )
    cross_attention_resolutions: list[int] = field(
        default_factory=lambda: [64, 32, 16, 8]
    )
    cross_attention_dropout: float = 0.2
    attention_heads: int = 4
    correlation_max_disp: int = 4
    # Hidden widths of the flow/parsing prediction heads in every fusion block.
    flow_hidden_channels: list[int] = field(default_factory=lambda: [96, 64])
    # Flow vectors are clamped to flow_clamp_factor * max(H_i, W_i) per level.
    flow_clamp_factor: float = 2.0


@dataclass
class WarpLossWeights:
    alpha_per: float = 0.2
    alpha_ce: float = 3.0
    alpha_m: float = 0.3
    alpha_adv: float = 0.1
    alpha_tv: float = 0.1
    alpha_sec: float = 6.0
    # Per-scale supervision weight: level k (0 = finest) gets level_decay^k.
    level_decay: float = 0.5


@dataclass
class TryOnNetConfig:
    base_channels: int = 128
    channel_multipliers: list[int] = field(default_factory=lambda: [1, 1, 2, 2, 4])
    attention_resolutions: list[int] = field(default_factory=lambda: [64, 32, 16])
    attention_dropout: float = 0.1
    res_blocks_per_scale: int = 2
    embedding_dim: int = 512
    encoder_id: str = "clip:ViT-B/32"
    noise_alpha: float = 5.0
    # Lossless space-to-depth stem factor; 1 keeps the classic full-res stem.
    stem_downsample: int = 1


@dataclass
class TryOnLossWeights:
    alpha_per: float = 1.0
    alpha_adv: float = 0.1


@dataclass
class OptimizerConfig:
    lr_g: float
    lr_d: float
    beta1: float
    beta2: float
    batch_size: int
    epochs: int
    ema_decay: float | None = None
    grad_clip: float | None = None


@dataclass
class PostprocConfig:
    overlap_threshold: float = 0.8
    # When true, a part is applied on ratio == threshold instead of strict '>'
    # (used for the threshold-1.0 sweep point, where strict '>' is vacuous).
    equality_mode: bool = False


@dataclass
class DataConfig:
    root: str = ""
    unpaired_list: str = ""
    # Maps raw parse-palette values (as string keys, JSON-friendly) to the
    # internal 9-label scheme. Required when loading real datasets.
    parse_label_map: dict[str, int] = field(default_factory=dict)


@dataclass
class EvalConfig:
    feature_extractor: str = "seeded-conv:64:0"
    batch_size: int = 4
    timing_repeats: int = 10


@dataclass
class PipelineConfig:
    resolution: list[int] = field(default_factory=lambda: [512, 384])  # [H, W]
    seed: int = 0
    device: str = "cpu"
    warp: WarpNetConfig = field(default_factory=WarpNetConfig)
    warp_loss: WarpLossWeights = field(default_factory=WarpLossWeights)
    warp_optim: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(
            lr_g=5e-6, lr_d=5e-6, beta1=0.5, beta2=0.999, batch_size=4, epochs=250
        )
    )
    tryon: TryOnNetConfig = field(default_factory=TryOnNetConfig)
    tryon_loss: TryOnLossWeights = field(default_factory=TryOnLossWeights)
    tryon_optim: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(
            lr_g=5e-5, lr_d=5e-5, beta1=0.9, beta2=0.999, batch_size=3, epochs=500,
            ema_decay=0.9999,
        )
    )
    postproc: PostprocConfig = field(default_factory=PostprocConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        h, w = self.resolution
        step = 2 ** (self.warp.num_scales - 1)
        if h % step or w % step:
            raise ConfigError(
                f"resolution {h}x{w} not divisible by 2^{self.warp.num_scales - 1} "
                f"required by a {self.warp.num_scales}-scale pyramid"
            )
        if len(self.warp.fpn_channels) != self.warp.num_scales:
            raise ConfigError(
                f"fpn_channels has {len(self.warp.fpn_channels)} entries, "
                f"expected num_scales={self.warp.num_scales}"
            )
        for ch in self.warp.fpn_channels:
            if ch % self.warp.attention_heads:
                raise ConfigError(
                    f"fpn channel width {ch} not divisible by "
                    f"attention_heads={self.warp.attention_heads}"
                )
        if len(self.warp.flow_hidden_channels) != 2 or any(
            ch % 4 for ch in self.warp.flow_hidden_channels
        ):
            raise ConfigError(
                "warp.flow_hidden_channels must be two widths divisible by 4, "
                f"got {self.warp.flow_hidden_channels}"
            )
        for name, weights in (("warp_loss", self.warp_loss), ("tryon_loss", self.tryon_loss)):
            for f in dataclasses.fields(weights):
                v = getattr(weights, f.name)
                if not (v >= 0.0):
                    raise ConfigError(f"{name}.{f.name} must be nonnegative, got {v}")
        if not 0.0 <= self.postproc.overlap_threshold <= 1.0:
            raise ConfigError(
                f"postproc.overlap_threshold must be in [0,1], "
                f"got {self.postproc.overlap_threshold}"
            )
        if self.tryon.noise_alpha < 0 or not self.tryon.noise_alpha == self.tryon.noise_alpha:
            raise ConfigError(f"tryon.noise_alpha must be finite nonnegative")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def _build_dataclass(cls: type, data: dict[str, Any], prefix: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for '{prefix or cls.__name__}'")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        dotted = f"{prefix}.{key}" if prefix else key
        if key not in known:
            raise ConfigError(f"unknown config key: {dotted}")
        ftype = known[key].type
        if dataclasses.is_dataclass(_resolve_type(ftype)):
            kwargs[key] = _build_dataclass(_resolve_type(ftype), value, dotted)
        else:
            kwargs[key] = copy.deepcopy(value)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad value under '{prefix or cls.__name__}': {exc}") from exc


_TYPE_MAP = {
    "WarpNetConfig": WarpNetConfig,
    "WarpLossWeights": WarpLossWeights,
    "TryOnNetConfig": TryOnNetConfig,
    "TryOnLossWeights": TryOnLossWeights,
    "OptimizerConfig": OptimizerConfig,
    "PostprocConfig": PostprocConfig,
    "DataConfig": DataConfig,
    "EvalConfig": EvalConfig,
}


def _resolve_type(ftype: Any) -> Any:
    # Field annotations are strings under `from __future__ import annotations`.
    if isinstance(ftype, str):
        return _TYPE_MAP.get(ftype, str)
    return ftype


def config_from_dict(data: dict[str, Any]) -> PipelineConfig:
    """Strictly builds a PipelineConfig; rejects any key not in the schema."""
    return _build_dataclass(PipelineConfig, data, "")


def load_config(path: str | Path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def _viton_hd_256() -> PipelineConfig:
    return PipelineConfig(
        resolution=[256, 192],
        warp=WarpNetConfig(
            num_scales=5,
            fpn_channels=[32, 64, 128, 256, 256],
            cross_attention_resolutions=[64, 32, 16, 8],
            cross_attention_dropout=0.2,
        ),
        warp_loss=WarpLossWeights(),
        warp_optim=OptimizerConfig(
            lr_g=5e-6, lr_d=5e-6, beta1=0.5, beta2=0.999, batch_size=8, epochs=500
        ),
        tryon=TryOnNetConfig(
            base_channels=256,
            channel_multipliers=[1, 2, 2, 2, 4],
            attention_resolutions=[64, 32],
            attention_dropout=0.1,
            res_blocks_per_scale=2,
            encoder_id="clip:ViT-B/32",
            noise_alpha=5.0,
        ),
        tryon_loss=TryOnLossWeights(alpha_per=1.0, alpha_adv=0.1),
        tryon_optim=OptimizerConfig(
            lr_g=5e-5, lr_d=5e-5, beta1=0.9, beta2=0.999, batch_size=3, epochs=500,
            ema_decay=0.9999,
        ),
        postproc=PostprocConfig(overlap_threshold=0.8),
    )


def _viton_hd_512() -> PipelineConfig:
    cfg = _viton_hd_256()
    cfg.resolution = [512, 384]
    cfg.warp = WarpNetConfig(
        num_scales=6,
        fpn_channels=[32, 64, 128, 256, 256, 256],
        cross_attention_resolutions=[64, 32, 16, 8],
        cross_attention_dropout=0.2,
    )
    cfg.warp_optim = OptimizerConfig(
        lr_g=5e-6, lr_d=5e-6, beta1=0.5, beta2=0.999, batch_size=4, epochs=250
    )
    cfg.tryon = TryOnNetConfig(
        base_channels=128,
        channel_multipliers=[1, 1, 2, 2, 4],
        attention_resolutions=[64, 32, 16],
        attention_dropout=0.1,
        res_blocks_per_scale=2,
        encoder_id="clip:ViT-B/32",
        noise_alpha=5.0,
    )
    cfg.validate()
    return cfg


def _dresscode_512() -> PipelineConfig:
    return _viton_hd_512()


def _desk_64() -> PipelineConfig:
    """CPU-sized preset: same pipeline, shrunk widths, faster optimizers."""
    return PipelineConfig(
        resolution=[64, 48],
        warp=WarpNetConfig(
            num_scales=5,
            fpn_channels=[16, 24, 32, 48, 48],
            cross_attention_resolutions=[16, 8],
            cross_attention_dropout=0.0,
            correlation_max_disp=3,
            flow_hidden_channels=[48, 32],
        ),
        warp_loss=WarpLossWeights(
            alpha_per=0.2, alpha_ce=3.0, alpha_m=0.3, alpha_adv=0.05,
            alpha_tv=0.1, alpha_sec=6.0, level_decay=1.0,
        ),
        warp_optim=OptimizerConfig(
            lr_g=2e-3, lr_d=2e-4, beta1=0.5, beta2=0.999, batch_size=4, epochs=20,
            grad_clip=1.0,
        ),
        tryon=TryOnNetConfig(
            base_channels=24,
            channel_multipliers=[1, 2, 2],
            attention_resolutions=[8],
            attention_dropout=0.1,
            res_blocks_per_scale=1,
            embedding_dim=128,
            encoder_id="seeded-conv:128:0",
            noise_alpha=5.0,
            stem_downsample=2,
        ),
        tryon_loss=TryOnLossWeights(alpha_per=1.0, alpha_adv=0.05),
        tryon_optim=OptimizerConfig(
            lr_g=1e-3, lr_d=2e-4, beta1=0.9, beta2=0.999, batch_size=4, epochs=50,
            ema_decay=0.9999,
        ),
        postproc=PostprocConfig(overlap_threshold=0.8),
        eval=EvalConfig(feature_extractor="seeded-conv:64:0", batch_size=4,
                        timing_repeats=10),
    )


_PRESETS = {
    "viton-hd-256": _viton_hd_256,
    "viton-hd-512": _viton_hd_512,
    "dresscode-512": _dresscode_512,
    "desk-64": _desk_64,
}

PRESET_NAMES = tuple(sorted(_PRESETS))


def load_preset(name: str) -> PipelineConfig:
    try:
        factory = _PRESETS[name]
    except KeyError:
        raise ConfigError(
            f"unknown preset '{name}'; available: {', '.join(PRESET_NAMES)}"
        ) from None
    return factory()
