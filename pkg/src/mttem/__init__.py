"""Maximum-likelihood parameter estimation for linear-Gaussian multiple target tracking."""
from .em import SAEM, OnlineEM, OracleEM, StepSizeSchedule, online_em, saem_batch, select_k
from .exceptions import (
    DataError,
    FilterCollapseError,
    InvalidParameterError,
    MTTError,
    NumericalError,
    StructuralError,
)
from .model import (
    CostModelConstants,
    CvParams,
    GlssmParams,
    ModelParams,
    cv_assemble,
    cv_assemble_stationary,
    expected_smc_cost,
    lambda_mstep,
)
from .simulator import simulate, simulate_fixed_k
from .smc import SMCConfig, run_filter

__version__ = "0.1.0"
