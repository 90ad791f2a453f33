"""SynHAT: coarse-to-fine diffusion synthesis of human activity traces."""

from .types import (
    Event,
    HAT,
    LatentSTStates,
    LatentSTTrace,
    POIIndex,
    DatasetSplit,
    validate_hat,
    read_jsonl,
    write_jsonl,
)
from .traces import (
    CoordNormalizer,
    FineSegment,
    build_coarse_trace,
    build_fine_segment,
    compress_to_states,
    most_frequent_poi_coord,
    segments_to_states,
    states_to_hat_skeleton,
)
from .diffusion import (
    DiffusionSchedule,
    SamplerConfig,
    EventEmphasis,
    EMA,
    ema_update,
    eps_loss,
    forward_noise,
    predict_x0,
    ddpm_step,
    ddpm_sample,
    ddim_sample,
)
from .unet import LSTUNet, UNetConfig, timestep_embedding, motion_features
from .bpem import BehaviorPatternEncoder
from .align import VisitHistory, align, radius_query, sample_activity, temporal_density
from .evaluate import (
    PrivacyConfig,
    fidelity_report,
    jsd,
    privacy_report,
    similarity,
    trace_statistics,
)
from .pipeline import (
    PerturbConfig,
    StageTrainConfig,
    generate_fine,
    generate_stage1,
    synthesize,
    train_stage1,
    train_stage2,
)

__version__ = "0.1.0"
