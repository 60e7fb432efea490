//! Synthetic datasets, distribution distances, Gaussian oracles and
//! bound checks used to evaluate trained models.

mod bounds;
mod datasets;
mod distance;
mod oracle;
mod report;

pub use bounds::{talagrand_grid, verify_cd_bound, verify_talagrand, BoundCheck};
pub use datasets::{Affine, Dataset, DatasetKind};
pub use distance::{gaussian_kl, gaussian_w1, sliced_wasserstein, sliced_wasserstein_along, w1_1d};
pub use oracle::{optimal_eps_oracle, optimal_loss, optimal_loss_average, GaussianOracle};
pub use report::{MetricEntry, MetricsReport, Provenance};
