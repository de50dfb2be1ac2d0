"""Training-free occluded text rendering over a pluggable flow-matching transformer."""
from .backbone import BackboneAdapter, ToyBackbone, ToyBackboneScript, build_toy_backbone, flow_step, load_backbone
from .core import (
    DenoiseSchedule,
    HardMask,
    LatentTokens,
    Rect,
    Scenario,
    SpatialMap,
    TokenGrid,
    build_schedule,
    progress,
    seeded_noise,
)
from .dualstream import PipelineConfig, PipelineResult, run_pipeline
from .kv import KVSlice, replace_image_kv
from .localization import MaskParams

__version__ = "0.1.0"
