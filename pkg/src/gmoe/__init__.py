"""Gaussian-gated mixture of experts: model, sampling, EM, losses, benchmarks."""

from .em import (
    DegenerateComponentError,
    EmSettings,
    FitResult,
    e_step,
    fit,
    init_favourable,
    m_step,
)
from .experiments import (
    ExperimentConfig,
    RateFit,
    SweepResult,
    fit_loglog,
    fit_rate,
    model_presets,
    run_sweep,
    summarize,
    tv_distance,
)
from .model import (
    Component,
    GmoeError,
    InvalidParameterError,
    JointGaussian,
    MixingMeasure,
    NuClippedWarning,
    from_joint_gaussian,
    gaussian_log_pdf,
    log_joint_density,
    measure_from_json,
    measure_to_json,
    to_joint_gaussian,
)
from .polysys import (
    Candidate,
    PolySystemSpec,
    builtin_candidate,
    enumerate_J,
    residuals,
    search_nontrivial,
    verify_candidate,
)
from .sampling import Dataset, derive_seed, sample, sample_labels
from .voronoi import (
    KappaTuple,
    SettingClass,
    UnsupportedCellOrderError,
    VoronoiAssignment,
    assign_cells,
    classify_setting,
    kappa_K,
    loss_dbar,
    loss_dtilde,
    rbar,
    rtilde,
)

__version__ = "0.1.0"
