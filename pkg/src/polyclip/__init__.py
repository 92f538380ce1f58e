"""polyclip: polygon clip-path primitives, layout planning, and a guided toy
diffusion sampler with masked cross-attention grounding."""

from .pathclip import (
    AppearanceDescription,
    LayoutScene,
    PathClipError,
    PathClipPrimitive,
    PathParams,
    PolygonMask,
    parse_css,
    polygon_iou,
    rasterize,
    scene_from_json,
    scene_to_json,
    serialize_css,
)
from .polyfit import EmptyMask, PsoConfig, fit_polygon, fit_scene, fitness
from .planner import (
    MockBackend,
    PromptTemplate,
    RemoteBackend,
    build_prompt,
    parse_response,
    validate_scene,
)
from .encoder import (
    AttentionInputs,
    FusionNetwork,
    HashedTextEncoder,
    compose_scene_attention,
    cross_attention,
    fourier_encode,
    fuse_embeddings,
    masked_cross_attention,
)
from .diffusion import (
    AnalyticGaussianDenoiser,
    NoiseSchedule,
    ToyDenoiser,
    Trajectory,
    cosine_schedule,
    ddim_invert,
    ddim_sample,
    ddim_step,
    make_synthetic_dataset,
    train_toy_denoiser,
)
from .guidance import (
    GuidanceConfig,
    appearance_energy,
    appearance_stats,
    cfg_combine,
    compute_semantic_basis,
    energy_gradient,
    guided_sample,
    guided_score,
    project_features,
    structure_energy_bg,
    structure_energy_fg,
)
from .evaluate import LayoutAdherenceReport, evaluate_layout_adherence
from .config import PipelineConfig, load_config, parse_config, serialize_config

__version__ = "0.1.0"
