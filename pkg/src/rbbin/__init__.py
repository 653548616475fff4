"""Robust background-subtraction binarization.

Estimates a smooth background surface with boosted, Huber-weighted,
curvature-penalized rank-one regression, subtracts it, and picks a single
global threshold for the flattened image with the gMDL criterion.
"""

from .errors import (
    BinarizationError,
    DegenerateFitError,
    DimensionError,
    ImageLoadError,
    SingularSystemError,
    StageError,
    UndefinedMetricError,
)
from .image import (
    BinaryImage,
    GrayImage,
    SceneSpec,
    invert,
    load_image,
    load_mask,
    normalize,
    save_image,
    save_mask,
    synth_image,
)
from .penalty import PenaltyPair, build_penalties, conditional_penalty, solve_banded_spd
from .background import (
    BackgroundModel,
    HuberConfig,
    RankOneTerm,
    estimate_background,
    fit_rank_one,
    huber_weights,
    objective_f,
    select_lambda,
)
from .threshold import (
    BinarizationResult,
    GmdlEvaluation,
    SubtractedImage,
    binarize,
    gmdl_score,
    niblack,
    otsu,
    sauvola,
    select_threshold,
    subtract_background,
)
from .metrics import MetricsReport, drd, evaluate, f_measure, mpm, pseudo_f_measure, psnr

__version__ = "0.1.0"

__all__ = [
    "BinarizationError",
    "DegenerateFitError",
    "DimensionError",
    "ImageLoadError",
    "SingularSystemError",
    "StageError",
    "UndefinedMetricError",
    "BinaryImage",
    "GrayImage",
    "SceneSpec",
    "invert",
    "load_image",
    "load_mask",
    "normalize",
    "save_image",
    "save_mask",
    "synth_image",
    "BackgroundModel",
    "HuberConfig",
    "RankOneTerm",
    "estimate_background",
    "fit_rank_one",
    "huber_weights",
    "objective_f",
    "select_lambda",
    "BinarizationResult",
    "GmdlEvaluation",
    "SubtractedImage",
    "binarize",
    "gmdl_score",
    "niblack",
    "otsu",
    "sauvola",
    "select_threshold",
    "subtract_background",
    "PenaltyPair",
    "build_penalties",
    "conditional_penalty",
    "solve_banded_spd",
    "MetricsReport",
    "drd",
    "evaluate",
    "f_measure",
    "mpm",
    "pseudo_f_measure",
    "psnr",
]
