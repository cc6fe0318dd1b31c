"""boilflow: boiling-flow phase screen synthesis, parameter estimation, and
quality metrics for aero-optic turbulence time series."""

from .core import (
    ApertureSquare,
    DegenerateInputError,
    ScreenSequence,
    TtpBasis,
    crop,
    largest_inscribed_square,
    normalize_frame,
    normalize_frames,
    ttp_basis,
    ttp_remove,
    ttp_remove_frames,
)
from .estimator import (
    EstimationError,
    EstimationReport,
    Gamma0Result,
    VelocityEstimate,
    cross_correlation,
    estimate_all,
    estimate_alpha,
    estimate_gamma0,
    estimate_L0,
    estimate_r0,
    estimate_r0_map,
    estimate_velocity,
    model_structure_function,
    snr_bound,
)
from .generator import (
    BoilingFlowParams,
    GeneratorState,
    boiling_flow_step,
    boiling_step,
    flow_step,
    generate_sequence,
    initial_state,
)
from .io import read_phs1, write_phs1
from .metrics import (
    StructureFunction2D,
    TemporalSpectrum,
    convective_velocity,
    flow_tps,
    kolmogorov_slope_check,
    nrmse,
    phase_tps,
    strouhal_premultiplied,
    structure_function_2d,
    temporal_psd,
)
from .prefilter import (
    FirFilter,
    apply_fir,
    design_bandstop,
    design_notch,
    filters_from_json,
    frequency_response,
)
from .spectrum import (
    SpectralGrid,
    VonKarmanModel,
    estimate_spatial_psd,
    model_psd,
    q_phi,
    v_phi,
    valid_index_set,
)

__version__ = "0.1.0"
