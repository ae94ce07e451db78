//! Free-energy matching for coarse-grained potentials.
//!
//! The crate covers the whole loop used to judge a learned coarse-grained
//! potential against ground truth:
//!
//! * [`trajectory`]: feature trajectories, force/energy records and their file formats.
//! * [`tica`]: lagged covariances and the generalized eigenproblem giving the slow coordinates.
//! * [`freeenergy`]: marginal densities over TICA components and Boltzmann inversion.
//! * [`potential`]: a small RBF + tanh network with closed-form forces and parameter gradients.
//! * [`training`]: the mixed force/energy matching loss and its optimizer.
//! * [`sampler`]: overdamped Langevin dynamics with counter-based noise.
//! * [`evaluation`]: binned KL divergence on the first two TICA components.
//! * [`msm`]: Markov state models built in TICA space.
//!
//! Energies are in kcal/mol throughout and temperatures in kelvin.

pub mod error;
pub mod evaluation;
pub mod freeenergy;
pub mod msm;
pub mod potential;
pub mod sampler;
pub mod tica;
pub mod training;
pub mod trajectory;
pub mod units;

pub use error::{Error, Result};
pub use evaluation::{
    check_explained_variance, kl_divergence_2d, landscape_compare, ExplainedVarianceReport,
    KlReport,
};
pub use freeenergy::{
    boltzmann_invert, energy_correction, fit_marginals, mean_energy_grid, DensityKind,
    DensityParams, FreeEnergyTargets, LandscapeGrid, MarginalDensity,
};
pub use msm::{cluster, estimate_transition_matrix, msm_free_energies, stationary_distribution, MsmModel};
pub use potential::{PotentialModel, PriorTerm, ReferenceLandscape};
pub use sampler::{simulate, ForceField, LangevinConfig};
pub use tica::{estimate_covariances, fit_tica, CovariancePair, TicaModel};
pub use training::{train, LossConfig, TrainReport, TrainingSet};
pub use trajectory::{EnergyRecord, FeatureTrajectory, FileFormat, ForceRecord};
pub use units::{kt, BOLTZMANN_KCAL};
