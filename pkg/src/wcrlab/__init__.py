"""Numerical laboratory for sensitivity-efficient estimation.

Modules
-------
families     parametric models with transport structure
estimators   statistics with per-sample Jacobians
sensitivity  Monte Carlo sensitivity / cosensitivity
ot1d         quantile-based transport on the line
sdot2d       semi-discrete transport in the plane
wpe          Wasserstein projection estimation
harness      experiment runner and CSV emission
"""

__version__ = "0.1.0"

from . import errors  # noqa: F401
from .families import (  # noqa: F401
    FamilyModel,
    TransportFamilyStructure,
    flow_map_family,
    register_builtin_families,
    resolve_family,
    transport_family_check,
    wasserstein_information,
    wasserstein_information_mc,
)
from .estimators import (  # noqa: F401
    EstimatorModel,
    finite_difference_jacobians,
    register_builtin_estimators,
    resolve_estimator,
)
from .sensitivity import (  # noqa: F401
    SensitivityReport,
    cosensitivity_mc,
    eps_sensitivity_mc,
    sensitivity_mc,
)
from .ot1d import EmpiricalQuantile, ot_map_1d, quantile_inner, w2sq_1d  # noqa: F401
from .sdot2d import (  # noqa: F401
    DualSolveResult,
    PowerDiagram,
    build_power_diagram,
    cell_integral,
    dtheta_w2sq,
    grad_xi_w2sq,
    mixed_derivative_xi_theta,
    solve_dual,
)
from .wpe import (  # noqa: F401
    WpeFit,
    wpe_1d,
    wpe_2d,
    wpe_asymptotic_covariance,
    wpe_gradients_1d,
    wpe_scale_closed_form,
)
from .rng import stream  # noqa: F401
