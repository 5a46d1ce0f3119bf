"""Physics-based state-space models with additive neural augmentation.

The package identifies discrete-time models of the form
    x+ = f(x, u; theta) + net(x, u; eta)
from measured data, co-estimating the physical parameters theta and the
network parameters eta with a truncated prediction cost, and optionally
penalizing the network for producing output inside the response subspace of
the physics family so the two parts stay complementary.
"""

from .ann import MlpArchitecture, MlpParams, flatten, init_mlp, mlp_forward, unflatten
from .augmented import (
    AugmentedModel,
    NormalizationMaps,
    compute_normalization,
    fp_only,
    init_augmented,
)
from .data import Dataset, NrmsReport, add_noise_snr, load_csv, nrms, save_csv, split_train_val, with_noise
from .dynamics import (
    ScalarLinearModel,
    SingleTrackModel,
    SingleTrackParams,
    TruthConfig,
    VehicleState,
    design_excitation,
    simulate_truth,
)
from .linalg import finite_diff_gradient, finite_diff_jacobian, make_rng, reduced_svd
from .projection import (
    ProjectionBasis,
    basis_from_regressor,
    linear_regressor,
    refresh_basis,
    stacked_net_output,
    subspace_penalty,
    taylor_regressor,
)
from .training import (
    AdamState,
    TrainConfig,
    TrainHistory,
    adam_step,
    cost_and_gradient,
    prediction_cost,
    regularized_cost,
    sample_subsections,
    train,
)

__version__ = "0.1.0"
