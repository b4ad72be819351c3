"""dhlab: a numerical laboratory for degenerate elliptic regularity theory
and stochastic homogenization correctors."""

from .exponents import (
    INF,
    EllipticityProfile,
    ExponentSet,
    NotEllipticError,
    ParameterError,
    check_condition,
    derive_exponents,
    lambda_mu_of_matrix,
    lambda_of_region,
    moment_norms,
    profile_of_field,
)
from .fields import (
    ErgodicAverages,
    FieldSpec,
    MatrixField,
    ergodic_average,
    exact_moment,
    make_checkerboard,
    make_constant,
    make_radial_power,
    mc_moment,
    periodize,
    read_field,
    sample_random,
    write_field,
)
from .solver import (
    ConvergenceError,
    Mesh,
    NotCoerciveError,
    ScalarField,
    assemble,
    element_stiffness,
    energy,
    gradient,
    read_solution,
    restrict,
    solve_corrector,
    solve_dirichlet,
    write_solution,
)
from .cutoff import (
    DirectCutoff,
    RadialCutoff,
    ShellProfile,
    direct_cutoff_optimum,
    holder_shell_bound,
    optimal_radial_cutoff,
    radial_competitor_energy,
    shell_energy,
    shell_integrals,
    verify_cutoff_bound,
)
from .regularity import (
    ExperimentReport,
    bound_2d_check,
    caccioppoli_check,
    harnack_quotient,
    local_boundedness_ratio,
    max_principle_check,
    oscillation_decay,
    radial_ramp,
    sharpness_sweep,
    weak_harnack_ratio,
    weighted_poincare_ratio,
)
from .homogenize import (
    SublinearityCurve,
    corrector_campaign,
    corrector_stats,
    covering_points,
    effective_coefficient,
    energy_bound_check,
    flux_average,
    two_scale_audit,
    window_centers,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
