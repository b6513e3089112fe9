//! Quantitative coronary calcification analysis for non-contrast CT calcium
//! scoring scans.
//!
//! The crate covers the whole path from voxel data to evaluated models:
//!
//! - [`volgrid`]: voxel grids, artery label maps, file I/O and lesion extraction
//! - [`calscore`]: Agatston, volume and mass scores at lesion, artery and heart level
//! - [`calciomics`]: the calcium-omics feature registry and per-patient extractor
//! - [`boost`]: regularized gradient-boosted trees with a logistic objective
//! - [`treeshap`]: exact path-dependent Shapley attributions and feature ranking
//! - [`statlab`]: logistic regression, ROC/PR analysis and hypothesis tests
//! - [`cohort`]: synthetic phantoms and cohorts with known ground truth
//! - [`pipeline`]: leakage-free cross-validation of the three model scopes
//! - [`cli`]: the `calciomics` command-line front end

pub mod boost;
pub mod calciomics;
pub mod calscore;
pub mod cli;
pub mod cohort;
pub mod pipeline;
pub mod statlab;
pub mod treeshap;
pub mod volgrid;

pub(crate) mod util;
