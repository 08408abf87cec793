use std::io::Write;

use maskcond_core::{pair_records, score_pairs};

use super::manifest;
use crate::{emit, to_json, write_file, CliResult, MiouArgs};

pub fn run(args: &MiouArgs, out: &mut dyn Write) -> CliResult<()> {
    let pred = manifest(&args.pred)?;
    let reference = manifest(&args.reference)?;
    let report = score_pairs(&pair_records(&pred, &reference)?)?;
    if let Some(path) = &args.json {
        write_file(path, to_json(&report).as_bytes())?;
    }
    emit(out, &report.to_text())
}
