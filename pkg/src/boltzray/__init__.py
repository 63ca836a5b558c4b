"""Linear transport forward modeling and light-ray-transform source recovery.

Subpackages
-----------
core        lattices, sphere quadrature, field containers, inner products
transport   characteristic solver, scattering, Boltzmann solve, measurement
lightray    (weighted) light ray transform, adjoint, normal operator
spectral    padded DFT, cone projector phi(D), normal multiplier N and its
            inverse Q
reconstruct backprojection Q phi(D) L* and iterative space-like recovery
waves       hyperbolic Cauchy solver, source construction, Cauchy-data
            recovery by matrix-free least squares
fieldio     raw float64 + JSON-sidecar field files
cli         batch driver (``boltzray`` entry point)
"""

from boltzray.core import (
    Lattice,
    DirectionQuadrature,
    build_direction_quadrature,
    ScalarField,
    KineticField,
    RayData,
    CauchyData,
    l2_inner,
    l2_norm,
    sobolev_norm,
)
from boltzray.lightray import (
    WeightFunction,
    unit_weight,
    sampled_weight,
    measurement_weight,
    lray,
    lray_weighted,
    lray_adjoint,
    normal_compose,
)
from boltzray.transport import (
    AbsorptionField,
    ScatteringKernelField,
    SolveReport,
    TransportDivergenceError,
    factorized_scattering,
    dense_scattering,
    conservative_absorption,
    integrating_factor,
    t1_inverse,
    t1_inverse_adjoint,
    scattering_apply,
    scattering_adjoint,
    boltzmann_solve,
    boltzmann_solve_adjoint,
    measure_uT,
    measure_uT_adjoint,
    forward_measurement,
    pde_residual,
)
from boltzray.spectral import (
    C_CONV,
    SpectralField,
    ConeClassifier,
    dft,
    idft,
    spectral_norm,
    phi_apply,
    n_multiplier_apply,
    q_apply,
    general_n_multiplier,
    calibrate_c_conv,
    reference_calibration_source,
    sobolev_norm_mixed,
)
from boltzray.reconstruct import (
    ReconstructionConfig,
    ReconstructionResult,
    ReconstructionDivergenceError,
    measurement_attenuation,
    windowed_normal_response,
    backproject,
    recover_spacelike,
    stability_report,
)
from boltzray.waves import (
    HyperbolicOperatorSpec,
    BardeenCoefficients,
    PseudoDiffSpec,
    CauchyRecoveryConfig,
    CauchyRecoveryStagnationError,
    cfl_limit,
    wave_solve,
    wave_adjoint_solve,
    wave_energy,
    bardeen_solve,
    cmb_source,
    aD_apply,
    aD_adjoint,
    default_time_cutoff,
    cauchy_recover,
)

__version__ = "0.1.0"
