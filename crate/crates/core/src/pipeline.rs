//! Image- and mask-level dataset filters.
//!
//! Records pass through two stages. The image stage gates on side length,
//! aspect ratio and (when present) aesthetic score. The mask stage drops
//! entities strictly contained in another entity, then entities below the
//! minimum area fraction, and finally rejects the record unless the number
//! of survivors lies in the allowed range. Every bound is inclusive on the
//! accept side.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::layout::{area_fraction, contains, merge_contours, to_rgb};
use crate::manifest::DatasetRecord;
use crate::render;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterConfig {
    pub min_side: usize,
    pub max_side: usize,
    pub min_aspect: f64,
    pub max_aspect: f64,
    pub min_aesthetic: f64,
    /// Reject records without an aesthetic score instead of passing them.
    pub reject_missing_score: bool,
    pub min_area_fraction: f64,
    pub min_entities: usize,
    pub max_entities: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_side: 1000,
            max_side: 3000,
            min_aspect: 0.6,
            max_aspect: 1.8,
            min_aesthetic: 5.0,
            reject_missing_score: false,
            min_area_fraction: 0.01,
            min_entities: 1,
            max_entities: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStage {
    Size,
    Aspect,
    Aesthetic,
    MaskCount,
}

impl FilterStage {
    pub const ALL: [FilterStage; 4] = [
        FilterStage::Size,
        FilterStage::Aspect,
        FilterStage::Aesthetic,
        FilterStage::MaskCount,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FilterStage::Size => "size",
            FilterStage::Aspect => "aspect",
            FilterStage::Aesthetic => "aesthetic",
            FilterStage::MaskCount => "mask_count",
        }
    }
}

impl fmt::Display for FilterStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterReport {
    pub accepted: bool,
    /// `None` exactly when accepted.
    pub stage: Option<FilterStage>,
    pub reason: String,
    pub retained_entity_ids: Vec<u32>,
}

impl FilterReport {
    fn accept(reason: impl Into<String>, retained_entity_ids: Vec<u32>) -> Self {
        Self {
            accepted: true,
            stage: None,
            reason: reason.into(),
            retained_entity_ids,
        }
    }

    fn reject(
        stage: FilterStage,
        reason: impl Into<String>,
        retained_entity_ids: Vec<u32>,
    ) -> Self {
        Self {
            accepted: false,
            stage: Some(stage),
            reason: reason.into(),
            retained_entity_ids,
        }
    }
}

pub fn filter_image(rec: &DatasetRecord, cfg: &FilterConfig) -> FilterReport {
    let (w, h) = (rec.width(), rec.height());
    let ids = rec.entities().iter().map(|e| e.id).collect();
    let side_ok = |s: usize| (cfg.min_side..=cfg.max_side).contains(&s);
    if !side_ok(w) || !side_ok(h) {
        return FilterReport::reject(
            FilterStage::Size,
            format!("{w}x{h} outside [{}, {}] px", cfg.min_side, cfg.max_side),
            vec![],
        );
    }
    let ratio = w as f64 / h as f64;
    if !(ratio >= cfg.min_aspect && ratio <= cfg.max_aspect) {
        return FilterReport::reject(
            FilterStage::Aspect,
            format!(
                "aspect ratio {ratio} outside [{}, {}]",
                cfg.min_aspect, cfg.max_aspect
            ),
            vec![],
        );
    }
    match rec.aesthetic_score {
        Some(score) if score.is_nan() || score < cfg.min_aesthetic => FilterReport::reject(
            FilterStage::Aesthetic,
            format!("aesthetic score {score} below {}", cfg.min_aesthetic),
            vec![],
        ),
        None if cfg.reject_missing_score => {
            FilterReport::reject(FilterStage::Aesthetic, "aesthetic score missing", vec![])
        }
        _ => FilterReport::accept("image filters passed", ids),
    }
}

/// Containment pruning runs against the original entity set, so the result
/// does not depend on entity order.
pub fn filter_masks(rec: &DatasetRecord, cfg: &FilterConfig) -> FilterReport {
    let entities = rec.entities();
    let nested: Vec<bool> = entities
        .iter()
        .enumerate()
        .map(|(i, inner)| {
            entities.iter().enumerate().any(|(j, outer)| {
                i != j && contains(&outer.mask, &inner.mask, true).expect("masks share dims")
            })
        })
        .collect();
    let mut dropped_nested = 0;
    let mut dropped_small = 0;
    let mut retained = Vec::new();
    for (e, &is_nested) in entities.iter().zip(&nested) {
        if is_nested {
            dropped_nested += 1;
        } else if area_fraction(&e.mask) < cfg.min_area_fraction {
            dropped_small += 1;
        } else {
            retained.push(e.id);
        }
    }
    let summary = format!(
        "{} of {} entities kept ({dropped_nested} nested, {dropped_small} below {} area)",
        retained.len(),
        entities.len(),
        cfg.min_area_fraction
    );
    if (cfg.min_entities..=cfg.max_entities).contains(&retained.len()) {
        FilterReport::accept(summary, retained)
    } else {
        FilterReport::reject(
            FilterStage::MaskCount,
            format!(
                "{summary}; need between {} and {}",
                cfg.min_entities, cfg.max_entities
            ),
            retained,
        )
    }
}

/// Image filters, then mask filters.
pub fn filter_record(rec: &DatasetRecord, cfg: &FilterConfig) -> FilterReport {
    let image = filter_image(rec, cfg);
    if !image.accepted {
        return image;
    }
    filter_masks(rec, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineSummary {
    pub total: usize,
    pub accepted: usize,
    pub rejected: BTreeMap<&'static str, usize>,
    pub retained_entities: usize,
}

impl PipelineSummary {
    pub fn rejected_at(&self, stage: FilterStage) -> usize {
        self.rejected.get(stage.name()).copied().unwrap_or(0)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "records: {}\naccepted: {}\nretained entities: {}\n",
            self.total, self.accepted, self.retained_entities
        );
        for stage in FilterStage::ALL {
            out.push_str(&format!(
                "rejected at {:<10} {}\n",
                format!("{stage}:"),
                self.rejected_at(stage)
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RecordReport {
    pub image_id: String,
    #[serde(flatten)]
    pub report: FilterReport,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Accepted records restricted to their retained entities, input order.
    pub records: Vec<DatasetRecord>,
    pub reports: Vec<RecordReport>,
    pub summary: PipelineSummary,
}

/// Filters every record (in parallel; output follows input order) and,
/// when `contour_dir` is given, writes `<image_id>.png` (gray) and
/// `<image_id>_rgb.png` contour maps for each accepted record.
pub fn run_pipeline(
    manifest: &[DatasetRecord],
    cfg: &FilterConfig,
    contour_dir: Option<&Path>,
) -> Result<PipelineOutput> {
    let reports: Vec<FilterReport> = manifest.par_iter().map(|r| filter_record(r, cfg)).collect();

    let records: Vec<DatasetRecord> = manifest
        .iter()
        .zip(&reports)
        .filter(|(_, rep)| rep.accepted)
        .map(|(rec, rep)| rec.retain_entities(&rep.retained_entity_ids))
        .collect();

    if let Some(dir) = contour_dir {
        std::fs::create_dir_all(dir)?;
        records.par_iter().try_for_each(|rec| -> Result<()> {
            let gray = merge_contours(&rec.instruction);
            render::write_gray_contour(&gray, &dir.join(format!("{}.png", rec.image_id)))?;
            render::write_contour_rgb(
                &to_rgb(&gray),
                &dir.join(format!("{}_rgb.png", rec.image_id)),
            )
        })?;
    }

    let mut rejected: BTreeMap<&'static str, usize> =
        FilterStage::ALL.iter().map(|s| (s.name(), 0)).collect();
    for stage in reports.iter().filter_map(|r| r.stage) {
        *rejected.get_mut(stage.name()).expect("all stages present") += 1;
    }
    let summary = PipelineSummary {
        total: manifest.len(),
        accepted: records.len(),
        rejected,
        retained_entities: records.iter().map(|r| r.entities().len()).sum(),
    };
    let reports = manifest
        .iter()
        .zip(reports)
        .map(|(rec, report)| RecordReport {
            image_id: rec.image_id.clone(),
            report,
        })
        .collect();
    Ok(PipelineOutput {
        records,
        reports,
        summary,
    })
}
