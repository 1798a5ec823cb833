"""Energy-based visual anomaly detection and localization toolkit.

Train a convolutional energy model on defect-free images with contrastive
divergence and SGLD negatives, then score test images by back-propagating the
energy to the input pixels: gradient maps localize anomalies, and their
(standardized) norms give image-level anomaly scores.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .data import (
    DatasetManifest,
    HeatmapRender,
    SyntheticSpec,
    bilinear_resize,
    emit_heatmap,
    generate_synthetic,
    load_mvtec,
    preprocess,
)
from .errors import EbadError, NonFiniteError, ShapeMismatchError
from .evaluation import (
    EvalReport,
    LabeledScores,
    RocCurve,
    auroc,
    compare_raw_std,
    histogram_report,
    image_level_eval,
    pixel_level_eval,
    roc_curve,
)
from .network import (
    ConvLayerSpec,
    ModelParams,
    NetworkTopology,
    canonical_topology,
    elu,
    elu_grad,
    forward_energy,
    init_params,
    input_gradient,
    param_gradient,
    topology_for_input,
)
from .sampler import (
    QuadraticEnergy,
    ReplayBuffer,
    SamplerConfig,
    energy_trace,
    export_energy_trace_csv,
    init_chain,
    sample_negatives,
    sgld_step,
)
from .scoring import (
    GradientMap,
    ImageScore,
    PixelStats,
    ScoreMap,
    energy_score,
    fit_pixel_stats,
    gradient_map,
    image_score,
    pixel_scores,
    standardize,
)
from .training import TrainConfig, TrainHistory, cd_gradient, fit, optimizer_step

__version__ = "0.1.0"
