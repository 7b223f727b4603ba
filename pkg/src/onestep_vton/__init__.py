"""Two-stage virtual try-on: flow-based warping plus a single-pass
fixed-noise diffusion generator with mask-aware post-processing."""

__version__ = "0.1.0"

from .config import PipelineConfig, load_config, load_preset  # noqa: F401
