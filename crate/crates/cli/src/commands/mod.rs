pub mod attend;
pub mod contour;
pub mod filter;
pub mod macs;
pub mod masks;
pub mod miou;

use std::path::Path;

use maskcond_core::{load_manifest, DatasetRecord};

use crate::CliResult;

pub(crate) fn manifest(path: &Path) -> CliResult<Vec<DatasetRecord>> {
    Ok(load_manifest(path)?)
}
