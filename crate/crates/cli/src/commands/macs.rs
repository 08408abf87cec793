use std::io::Write;

use maskcond_core::{
    citf_report, encode_contour, filter_tokens, merge_contours, to_rgb, CostProfile,
};
use rayon::prelude::*;

use super::manifest;
use crate::{emit, to_json, write_file, CliError, CliResult, MacsArgs};

/// Condition tokens left after dropping blank patches, per record.
fn retained_counts(args: &MacsArgs) -> CliResult<Vec<u64>> {
    let Some(path) = &args.manifest else {
        return Ok(args.retained.clone());
    };
    let f = args.downsample;
    manifest(path)?
        .par_iter()
        .map(|rec| {
            let img = to_rgb(&merge_contours(&rec.instruction));
            // one coordinate per pixel is enough to tell blank patches apart
            let cond = encode_contour(&img, f, f * f)?;
            Ok(filter_tokens(&cond).len() as u64)
        })
        .collect()
}

pub fn run(args: &MacsArgs, out: &mut dyn Write) -> CliResult<()> {
    let profile = CostProfile {
        l_text: args.l_text,
        l_img: args.l_img,
        l_cond: 0,
        heads: args.heads,
        head_dim: args.head_dim,
        layers: args.layers,
    };
    profile
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let pre_filter = args.l_cond.unwrap_or(args.l_img);
    let retained = retained_counts(args)?;
    let report = citf_report(&profile, pre_filter, &retained)?;
    if let Some(path) = &args.json {
        write_file(path, to_json(&report).as_bytes())?;
    }
    emit(out, &report.to_text())
}
