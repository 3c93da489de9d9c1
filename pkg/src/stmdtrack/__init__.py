"""Point-cloud single-object tracking with a spatio-temporal graph backbone,
bi-directional cross-frame memory and Gaussian-mask distractor filtering."""

from .config import RunConfig, TrackerConfig, TrainConfig, BenchmarkConfig, load_run_config
from .data import (
    Box3D, PointFrame, ScenarioConfig, SequenceSample, ConfigError, SequenceFormatError,
    generate_synthetic_sequence, read_sequence_dir, write_sequence_dir, read_kitti_frame,
    crop_search_region, resample_points,
)
from .evaluation import (
    TrackResult, iou3d, center_distance, success_auc, precision_auc, run_ope,
    OracleTracker, StaticTracker,
)
from .tracker import STMDNet, NeuralTracker

__version__ = "0.1.0"
