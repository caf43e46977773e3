"""Wiener chaos martingale models: calibration and option pricing."""

from .bases import BrownianDriver, LegendreBasis, PiecewiseConstantBasis
from .calibrate import (
    CalibrationConfig,
    HistoryRow,
    OptimizerState,
    adamw_step,
    calibrate,
    initial_coefficients,
    loss,
    loss_gradient,
    vega_weights,
)
from .errors import (
    ChaoscalError,
    ConfigError,
    ExplosionError,
    IntegrationError,
    InversionError,
    NumericError,
    OptimizerError,
    ValidationError,
    WeightingError,
)
from .indices import MultiIndex, enumerate_indices, index_space_dim
from .model import (
    ChaosModel,
    FeatureBlock,
    path_grid,
    sample_features,
    second_moment,
    terminal_values,
)
from .modelio import load_config, load_model, load_schedule, serialize_model, write_history
from .pricing import (
    CvState,
    PricingMethod,
    PricingSchedule,
    estimate_cv,
    mc_call_price,
    price_surface,
    quad_call_price,
)
from .quotes import (
    ParityFit,
    Quote,
    QuoteSurface,
    extract_forward_discount,
    parse_quotes,
    write_quotes,
)
from .reference import (
    HestonParams,
    RoughHestonParams,
    exotic_mc_price,
    heston_cf,
    heston_lewis_price,
    heston_second_moment_finite,
    heston_simulate,
    lewis_call_price,
    rough_heston_cf,
)
from .vol import (
    DownAndOutCall,
    ForwardStartCall,
    LookbackCall,
    bs_call,
    bs_put,
    bs_vega,
    exotic_bs_price,
    exotic_implied_vol,
    implied_vol,
)

__version__ = "0.1.0"
