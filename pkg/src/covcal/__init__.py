"""covcal: consistency testing and post-hoc covariance calibration for
Kalman filters.

The package quantifies how miscalibrated a filter's covariance estimates are
(sigma-interval counts, aggregated chi-square NEES tests, L2 divergence of
the NEES density against chi-square) and fits post-hoc maps -- scalar,
matrix, and feedforward-network -- that transform estimated covariances into
calibrated ones.
"""

from .calmaps import (
    AdamParams,
    LossWeights,
    MatrixMap,
    MlpMap,
    ScalarMap,
    TrainingSet,
    ekf2d_weights,
    fit_matrix,
    fit_scalar,
    mlp_forward,
    mlp_loss,
    percent_decrease,
    train_mlp,
    uniform_weights,
    vio_weights,
)
from .filters import (
    EstimateTrace,
    FilterState,
    SimConfig,
    SystemModel,
    ekf_predict,
    ekf_update,
    innovation_autocorrelation,
    monte_carlo,
    simulate,
)
from .groundtruth import (
    AlignmentTransform,
    ErrorSeries,
    GroundTruthCovSeries,
    backdifference_velocity,
    ergodic_ground_truth,
    horn_align,
    mc_ground_truth,
    window_search,
    zero_mean_report,
)
from .statmath import (
    CovMatrix,
    EigenDecomposition,
    EmpiricalDensity,
    NeesSeries,
    SigmaIntervalCounts,
    build_density,
    chi2_cdf,
    chi2_pdf,
    chi2_quantile,
    count_sigma_intervals,
    eig_symmetric,
    l2_divergence,
    mc_nees_test,
    nees,
    nees_series,
    sigma_coordinates,
)
from .systems import (
    InputSequenceSpec,
    dubins_model,
    generate_sequences,
    spring_mass_input,
    spring_mass_model,
)

__version__ = "0.1.0"
