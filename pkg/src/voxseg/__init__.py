"""voxseg: non-neural machinery for iterative semi-supervised 3D CT
segmentation — volume I/O, preprocessing, pseudo-label fusion, flip TTA,
post-processing, DSC/NSD metrics, efficiency monitoring, and a resumable
orchestrator driving an external segmenter over a subprocess contract.
"""

from .errors import (
    ConfigError,
    ManifestError,
    NiftiError,
    PipelineError,
    SegmenterError,
    VoxsegError,
)
from .volume import (
    CLASS_NAMES,
    NUM_CLASSES,
    ORGAN_CLASSES,
    TUMOR_CLASS,
    ProbMap,
    Spacing,
    Volume,
)
from .nifti import load_nifti, peek_nifti, save_nifti
from .preprocess import (
    NormalizationParams,
    ResampleSpec,
    clip_normalize,
    median_spacing,
    resample_image,
    resample_labels,
)
from .fusion import FusionPolicy, PartialLabel, majority_vote, merge_organ_tumor, merge_partial
from .tta import FlipSpec, aggregate, apply_flip, argmax_labels, enumerate_flips
from .postprocess import connected_components, keep_largest
from .metrics import (
    MetricReport,
    NsdParams,
    aggregate_cohort,
    dsc,
    edt,
    evaluate_case,
    nsd,
    surface_voxels,
)
from .monitor import EfficiencyReport, ResourceTrace, auc_above_floor, efficiency_report, sample_run
from .manifest import CaseRecord, Manifest, load_manifest, manifest_median_spacing
from .config import PipelineConfig, SegmenterContract, load_config, save_config
from .pipeline import PipelineState, run_merge, run_phase, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "CaseRecord",
    "ConfigError",
    "EfficiencyReport",
    "FlipSpec",
    "FusionPolicy",
    "Manifest",
    "ManifestError",
    "MetricReport",
    "NiftiError",
    "NormalizationParams",
    "NsdParams",
    "NUM_CLASSES",
    "ORGAN_CLASSES",
    "PartialLabel",
    "PipelineConfig",
    "PipelineError",
    "PipelineState",
    "ProbMap",
    "ResampleSpec",
    "ResourceTrace",
    "SegmenterContract",
    "SegmenterError",
    "Spacing",
    "TUMOR_CLASS",
    "Volume",
    "VoxsegError",
    "aggregate",
    "aggregate_cohort",
    "apply_flip",
    "argmax_labels",
    "auc_above_floor",
    "clip_normalize",
    "connected_components",
    "dsc",
    "edt",
    "efficiency_report",
    "enumerate_flips",
    "evaluate_case",
    "keep_largest",
    "load_config",
    "load_manifest",
    "load_nifti",
    "majority_vote",
    "manifest_median_spacing",
    "median_spacing",
    "merge_organ_tumor",
    "merge_partial",
    "nsd",
    "peek_nifti",
    "resample_image",
    "resample_labels",
    "run_merge",
    "run_phase",
    "run_pipeline",
    "sample_run",
    "save_config",
    "save_nifti",
    "surface_voxels",
]
