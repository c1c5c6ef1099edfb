"""Dithered, companded and orthogonality-constrained scalar quantizers."""

from randquant.source import (
    BivariateGaussianSpec,
    ScalarGrid,
    SourceModel,
    differential_entropy,
    load_density_csv,
    make_truncated_gaussian,
    make_uniform,
    sample,
    sample_bivariate,
)
from randquant.dither import (
    UniformQuantizerSpec,
    conventional_distortion,
    conventional_variable_rate,
    dithered_reconstruct,
    draw_dither,
    fixed_rate_of,
    step_for_rate,
    uniform_quantize,
)
from randquant.maps import MonotoneMap
from randquant.compander import (
    FixedRate,
    VariableRate,
    compressor_gradient,
    granular_distortion,
    optimal_expander,
    output_density,
    overload_distortion,
    reconstruct,
    total_cost,
    variable_rate,
)
from randquant.design import (
    DesignConfig,
    RandomizedDesign,
    constrain_direct,
    constrain_randomized,
    descend,
    design_at_rate,
    design_penalized,
    design_unconstrained,
    load_design,
    save_design,
    staircase_compressor,
)
from randquant.lloyd import (
    CellQuantizer,
    ConstraintReport,
    constrain_deterministic,
    ecsq,
    load_quantizer,
    lloyd_max,
    orthogonality_residual,
    save_quantizer,
    verify_distortion_identity,
)
from randquant.harness import (
    FAMILIES,
    DesignedQuantizer,
    ResultRow,
    SweepSpec,
    correlation_experiment,
    design_family,
    snr_sweep,
    whiteness_report,
)

__version__ = "0.1.0"
