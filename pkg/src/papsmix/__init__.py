"""papsmix: four-dye Papanicolaou stain unmixing from RGB cytology images."""

__version__ = "0.1.0"

from .imagery import (
    BAND_CENTERS_NM,
    IncidentLight,
    SpectralCube,
    load_cube,
    render_srgb,
    save_cube,
    to_optical_density,
)
from .stainlib import (
    DYES,
    StainMatrix,
    build_stain_matrix,
    estimate_stain_vector,
    ms_unmix,
)
from .solver import (
    AbundanceField,
    SolverConfig,
    SolverReport,
    admm_unmix,
    cd_unmix,
    diff_apply,
    soft_threshold,
    sunsal_tv_unmix,
    tv_solve,
    update_weights,
)
from .calib import CalibrationSet, calibration_coefficient, normalize_abundance, robust_max
from .metrics import EvalResult, evaluate, rmse, sre
from .analysis import (
    LdaModel,
    PatchSample,
    classification_report,
    extract_patch_features,
    lda_predict,
    lda_train,
    mann_whitney_u,
)
from .phantom import PhantomSpec, PhantomTruth, benchmark, generate

__all__ = [
    "BAND_CENTERS_NM", "IncidentLight", "SpectralCube", "load_cube", "save_cube",
    "to_optical_density", "render_srgb",
    "DYES", "StainMatrix", "build_stain_matrix", "estimate_stain_vector", "ms_unmix",
    "AbundanceField", "SolverConfig", "SolverReport", "admm_unmix", "cd_unmix",
    "diff_apply", "soft_threshold", "sunsal_tv_unmix", "tv_solve", "update_weights",
    "CalibrationSet", "calibration_coefficient", "normalize_abundance", "robust_max",
    "EvalResult", "evaluate", "rmse", "sre",
    "LdaModel", "PatchSample", "classification_report", "extract_patch_features",
    "lda_predict", "lda_train", "mann_whitney_u",
    "PhantomSpec", "PhantomTruth", "benchmark", "generate",
]
