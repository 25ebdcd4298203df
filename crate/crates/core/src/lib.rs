//! Clustering of functional data with a mixture of nonparametric
//! mixed-effect smoothing-spline models.

pub mod bayes;
pub mod dataspec;
pub mod error;
pub mod mixture;
pub mod gcv;
pub(crate) mod linalg;
pub mod pls;
pub mod rkhs;
pub mod simbench;

pub use dataspec::{
    dataset_from_records, load_csv, save_csv, DomainSpec, FunctionalDataset, LoadOptions, Point, RandomEffectKind, Record, Structure,
};
pub use error::{Error, ErrorClass, Result};
pub use pls::{PenalizedSystem, PlsSolution};
