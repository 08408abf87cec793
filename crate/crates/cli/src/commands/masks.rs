use std::io::Write;

use maskcond_core::{
    build_mask, check_reachability, render, tokenize_instruction, DatasetRecord, MaskKind,
    DEFAULT_MAX_CAPTION_TOKENS,
};
use serde::Serialize;

use super::manifest;
use crate::{emit, to_json, write_file, CliError, CliResult, Grid, MasksArgs};

#[derive(Serialize)]
struct IndexSets<'a> {
    image_id: &'a str,
    kind: &'static str,
    downsample: usize,
    grid: [usize; 2],
    sequence_length: usize,
    allowed_pairs: usize,
    text_sets: Vec<Vec<usize>>,
    image_sets: Vec<Vec<usize>>,
}

/// Smallest `f` with `ceil(h / f) == rows` and `ceil(w / f) == cols`.
pub fn factor_for_grid(width: usize, height: usize, grid: Grid) -> Option<usize> {
    (1..=width.max(height))
        .find(|&f| height.div_ceil(f) == grid.rows && width.div_ceil(f) == grid.cols)
}

fn pick<'a>(records: &'a [DatasetRecord], id: Option<&str>) -> CliResult<&'a DatasetRecord> {
    match id {
        Some(id) => records
            .iter()
            .find(|r| r.image_id == id)
            .ok_or_else(|| CliError::Data(format!("no record `{id}` in manifest"))),
        None => records
            .first()
            .ok_or_else(|| CliError::Data("manifest has no records".into())),
    }
}

pub fn run(args: &MasksArgs, out: &mut dyn Write) -> CliResult<()> {
    let records = manifest(&args.manifest)?;
    let rec = pick(&records, args.record.as_deref())?;
    let f = match args.grid {
        Some(grid) => factor_for_grid(rec.width(), rec.height(), grid).ok_or_else(|| {
            CliError::Data(format!(
                "no downsampling factor maps {}x{} px onto a {}x{} grid",
                rec.width(),
                rec.height(),
                grid.rows,
                grid.cols
            ))
        })?,
        None => args.downsample,
    };
    let kind = MaskKind::from(args.kind);
    let toks = tokenize_instruction(&rec.instruction, f, DEFAULT_MAX_CAPTION_TOKENS)?;
    let mask = build_mask(&toks.layout, kind);
    check_reachability(&mask).into_result()?;

    render::write_attention_mask(&mask, &args.out)?;
    let layout = &toks.layout;
    let dump = IndexSets {
        image_id: &rec.image_id,
        kind: kind.short_name(),
        downsample: f,
        grid: [layout.grid().0, layout.grid().1],
        sequence_length: layout.len(),
        allowed_pairs: mask.count_allowed(),
        text_sets: layout
            .text_sets()
            .iter()
            .map(|r| r.clone().collect())
            .collect(),
        image_sets: layout.image_sets().to_vec(),
    };
    let json_path = args.out.with_extension("json");
    write_file(&json_path, to_json(&dump).as_bytes())?;
    emit(
        out,
        &format!(
            "{} mask for {}: {}x{} tokens, {} allowed pairs\n",
            kind.short_name(),
            rec.image_id,
            layout.len(),
            layout.len(),
            mask.count_allowed()
        ),
    )
}
