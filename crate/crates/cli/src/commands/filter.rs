use std::io::Write;

use maskcond_core::{manifest_to_json, run_pipeline, FilterConfig, PipelineSummary, RecordReport};
use serde::Serialize;

use super::manifest;
use crate::{emit, to_json, write_file, CliResult, FilterArgs};

#[derive(Serialize)]
struct Report<'a> {
    config: &'a FilterConfig,
    summary: &'a PipelineSummary,
    records: &'a [RecordReport],
}

pub fn run(args: &FilterArgs, out: &mut dyn Write) -> CliResult<()> {
    let records = manifest(&args.manifest)?;
    let cfg = FilterConfig {
        reject_missing_score: args.reject_missing_score,
        ..FilterConfig::default()
    };
    let result = run_pipeline(&records, &cfg, args.contours.as_deref())?;
    write_file(&args.out, manifest_to_json(&result.records).as_bytes())?;
    if let Some(path) = &args.report {
        let report = Report {
            config: &cfg,
            summary: &result.summary,
            records: &result.reports,
        };
        write_file(path, to_json(&report).as_bytes())?;
    }
    emit(out, &result.summary.to_text())
}
