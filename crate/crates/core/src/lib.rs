//! Missing-value imputation for categorical tables.
//!
//! The model is a fully-connected pairwise MRF over the columns, trained by
//! piecewise large-margin objectives on the observed cells, with missing
//! cells filled by per-row MAP inference — optionally subject to label and
//! pairwise count constraints solved by Lagrangian dual decomposition. The
//! whole procedure alternates training and imputation until neither the
//! objective nor the imputed cells move.

pub mod error;
pub mod infer;
pub mod joint;
pub mod learn;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod table;

pub use error::{Error, Result};
pub use model::{EdgeSet, MrfLayout, MrfParams};
pub use table::{CategoricalTable, ColumnDomain, Mask, MissingSpec};
