"""Random-features least squares trained by averaged SGD.

Builds random feature maps, runs one-pass averaged SGD against the
minimum-norm baseline, computes exact spectra of the expected feature
covariance, estimates the six-term bias/variance decomposition by Monte
Carlo, and drives double-descent sweeps from config files.
"""

from .data import (
    Dataset,
    DiagonalPowerLaw,
    ExplicitCov,
    IdentityCov,
    binary_digit_split,
    gen_inputs,
    gen_target_laplace,
    load_idx_images,
    load_idx_labels,
    make_binary_digit_dataset,
    plant_rf_target,
    write_idx_images,
    write_idx_labels,
)
from .decomposition import (
    DecompositionReport,
    PathAverages,
    estimate_terms,
    rate_probe_bias,
    run_paths,
    shape_probe_variance,
    trend_violation,
)
from .features import Activation, FeatureMap, apply, apply_batch, build_feature_map
from .optimizer import (
    ConstantInit,
    DivergenceError,
    NearMinNormInit,
    SgdOutcome,
    StepSchedule,
    ZeroInit,
    excess_risk,
    min_norm_fit,
    sgd_average,
    step_size,
    test_mse,
)
from .spectral import (
    CovarianceSummary,
    GaussBlocks,
    SingleOutput,
    analytic_summary,
    assemble_expected_cov,
    expected_cov_gauss,
    expected_cov_quadrature,
    expected_cov_relu,
    fourth_moment_diagnostic,
    sample_cov,
    trace_concentration,
)
from .sweep import (
    SweepRow,
    SweepSpec,
    parse_config,
    read_csv,
    render_svg,
    run_cell,
    run_sweep,
    write_csv,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
