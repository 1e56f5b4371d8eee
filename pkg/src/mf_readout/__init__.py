"""Matched-filter state readout for arrays of fluorescing emitters.

The package simulates camera frames of a site array, localizes the sites
from the mean image, trains linear classifiers per site (plain box sum,
fixed Gaussian weights, and least-squares matched filters with or without
neighbor features), and evaluates readout fidelity, cross-site error
correlations, and model complexity, with a CLI that drives exposure-time
sweeps into CSV/SVG reports.
"""

from .errors import ConfigError, DataError, MFReadoutError, NumericalError
from .filters import (
    BIAS_C,
    GAUSSIAN_CUTOFF,
    KINDS,
    FilterModel,
    classify_stack,
    extract_array_features,
    extract_site_features,
    gaussian_score,
    gaussian_weight_map,
    neighbor_sites,
    square_score,
    unsupervised_threshold,
)
from .locate import (
    GaussianFit,
    PreprocessStats,
    SiteGeometry,
    apply_stats,
    crop,
    find_peaks,
    fit_gaussian_2d,
    fit_stats,
    locate_sites,
    mean_image,
)
from .metrics import (
    ConfusionCounts,
    MetricsReport,
    center_site,
    cnn_pairs,
    confusion,
    cross_fidelity,
    edge_pairs,
    evaluate,
    fidelity,
    infidelity_reduction,
    shuffle_statistics,
    standard_error,
)
from .pipeline import RunConfig, dataset_cache_key, load_or_generate, run_pipeline
from .qimg import read_stack, write_stack
from .report import SweepReport, SweepRow, emit_svg, read_sweep_csv, write_sweep_csv
from .sim import (
    ArrayGeometry,
    LabeledImageStack,
    SimConfig,
    crosstalk_config,
    default_config,
    generate_dataset,
    generate_label_path,
    render_image,
    sample_states,
)
from .train import (
    DatasetSplit,
    ModelSet,
    TrainingData,
    TuneResult,
    count_complexity,
    fit_ridge,
    fit_rls,
    load_models,
    split_dataset,
    square_boundary_default,
    theta_grid_default,
    train_all_sites,
    tune,
)

__version__ = "0.1.0"

__all__ = [
    "ArrayGeometry",
    "BIAS_C",
    "ConfigError",
    "ConfusionCounts",
    "DataError",
    "DatasetSplit",
    "FilterModel",
    "GAUSSIAN_CUTOFF",
    "GaussianFit",
    "KINDS",
    "LabeledImageStack",
    "MFReadoutError",
    "MetricsReport",
    "ModelSet",
    "NumericalError",
    "PreprocessStats",
    "RunConfig",
    "SimConfig",
    "SiteGeometry",
    "SweepReport",
    "SweepRow",
    "TrainingData",
    "TuneResult",
    "apply_stats",
    "center_site",
    "classify_stack",
    "cnn_pairs",
    "confusion",
    "count_complexity",
    "crop",
    "cross_fidelity",
    "crosstalk_config",
    "dataset_cache_key",
    "default_config",
    "edge_pairs",
    "emit_svg",
    "evaluate",
    "extract_array_features",
    "extract_site_features",
    "fidelity",
    "find_peaks",
    "fit_gaussian_2d",
    "fit_ridge",
    "fit_rls",
    "fit_stats",
    "gaussian_score",
    "gaussian_weight_map",
    "generate_dataset",
    "generate_label_path",
    "infidelity_reduction",
    "load_models",
    "load_or_generate",
    "locate_sites",
    "mean_image",
    "neighbor_sites",
    "read_stack",
    "read_sweep_csv",
    "render_image",
    "run_pipeline",
    "sample_states",
    "shuffle_statistics",
    "split_dataset",
    "square_boundary_default",
    "square_score",
    "standard_error",
    "theta_grid_default",
    "train_all_sites",
    "tune",
    "unsupervised_threshold",
    "write_stack",
    "write_sweep_csv",
]
