use std::io::Write;

use maskcond_core::diagnostics::{
    condition_mass, max_abs_diff, max_masked_weight, max_row_sum_deviation, mean,
};
use maskcond_core::{
    block_forward, build_bias, build_mask, encode_contour, extend_with_condition, filter_tokens,
    make_schedule, merge_contours, to_rgb, tokenize_instruction, AttentionMask, BranchParams,
    ConditionTokens, DatasetRecord, LayerSchedule, LoraInit, MaskKind, SeededNormal, TokenLayout,
    TokenMatrix, DEFAULT_MAX_CAPTION_TOKENS,
};
use rayon::prelude::*;
use serde::Serialize;

use super::manifest;
use crate::{emit, to_json, write_file, AttendArgs, CliError, CliResult};

/// Row-sum tolerance; masked weights must be exactly zero.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Gammas at which the first-layer condition mass is always reported.
pub const GAMMA_SWEEP: [f64; 4] = [0.01, 0.2, 0.5, 1.0];

const LORA_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttendConfig {
    pub seed: u64,
    pub gamma: f64,
    pub citf: bool,
    pub downsample: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub aia_start: usize,
    pub aia_end: usize,
    pub rank: usize,
}

impl Default for AttendConfig {
    fn default() -> Self {
        let schedule = LayerSchedule::scaled(4);
        Self {
            seed: 0,
            gamma: 1.0,
            citf: true,
            downsample: 8,
            dim: 64,
            heads: 4,
            layers: 4,
            aia_start: schedule.aia_range().start,
            aia_end: schedule.aia_range().end,
            rank: 4,
        }
    }
}

impl AttendConfig {
    pub fn from_args(args: &AttendArgs) -> CliResult<Self> {
        let schedule = LayerSchedule::scaled(args.layers);
        let cfg = Self {
            seed: args.seed,
            gamma: args.gamma,
            citf: !args.no_citf,
            downsample: args.downsample,
            dim: args.dim,
            heads: args.heads,
            layers: args.layers,
            aia_start: args.aia_start.unwrap_or(schedule.aia_range().start),
            aia_end: args.aia_end.unwrap_or(schedule.aia_range().end),
            rank: args.rank,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let usage = |msg: String| Err(CliError::Usage(msg));
        let f = self.downsample;
        if self.dim < f * f {
            return usage(format!(
                "--dim {} cannot hold a {f}x{f} contour patch; use --dim >= {} or a smaller --downsample",
                self.dim,
                f * f
            ));
        }
        if !self.dim.is_multiple_of(self.heads) || !(self.dim / self.heads).is_multiple_of(4) {
            return usage(format!(
                "--dim {} must split into {} heads of a width divisible by 4",
                self.dim, self.heads
            ));
        }
        if self.rank > self.dim {
            return usage(format!("--rank {} exceeds --dim {}", self.rank, self.dim));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return usage(format!("--gamma {} outside (0, 1]", self.gamma));
        }
        make_schedule(self.layers, self.aia_start, self.aia_end)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(())
    }

    fn schedule(&self) -> LayerSchedule {
        make_schedule(self.layers, self.aia_start, self.aia_end).expect("validated")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaMass {
    pub gamma: f64,
    pub condition_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordStats {
    pub image_id: String,
    pub l_text: usize,
    pub l_img: usize,
    pub condition_tokens: usize,
    pub condition_tokens_kept: usize,
    pub max_row_sum_deviation: f64,
    pub max_masked_weight: f64,
    /// Mean first-layer attention of image queries on condition keys.
    pub condition_mass: f64,
    pub condition_mass_per_layer: Vec<f64>,
    pub gamma_sweep: Vec<GammaMass>,
    /// Output difference between a `gamma = 1` bias and no bias at all.
    pub unbiased_delta: f64,
    /// Text/image output difference between dropping blank condition tokens
    /// and keeping them with their keys masked.
    pub citf_delta: f64,
    /// Text/image output difference made by letting blank tokens be attended.
    pub blank_token_delta: f64,
    pub breaches: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttendReport {
    pub config: AttendConfig,
    pub schedule: Vec<&'static str>,
    pub records: Vec<RecordStats>,
    pub ok: bool,
}

fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Stack<'a> {
    layout: &'a TokenLayout,
    text: TokenMatrix,
    image: TokenMatrix,
    params: Vec<BranchParams>,
    masks: Vec<AttentionMask>,
}

#[derive(Default)]
struct Trace {
    max_row_dev: f64,
    max_masked: f64,
    cond_mass: Vec<f64>,
}

struct Outputs {
    text: TokenMatrix,
    image: TokenMatrix,
    cond: TokenMatrix,
    trace: Trace,
}

impl Stack<'_> {
    /// Residual stack over `layers` blocks. `blocked` lists condition
    /// indices whose keys are disallowed; `gamma = None` runs without bias.
    fn run(
        &self,
        cond: &ConditionTokens,
        blocked: &[usize],
        gamma: Option<f64>,
    ) -> CliResult<Outputs> {
        let (lt, li, lc) = (self.layout.l_text(), self.layout.l_img(), cond.len());
        let bias = gamma.map(|g| build_bias(lt, li, lc, g)).transpose()?;
        let (mut text, mut image, mut c) =
            (self.text.clone(), self.image.clone(), cond.tokens.clone());
        let mut trace = Trace::default();
        for (params, base) in self.params.iter().zip(&self.masks) {
            let mut mask = extend_with_condition(base, lc);
            mask.disallow_keys(blocked.iter().map(|&k| lt + li + k));
            let out = block_forward(
                &text,
                &image,
                &c,
                self.layout,
                &cond.source_positions,
                params,
                &mask,
                bias.as_ref(),
            )?;
            trace.max_row_dev = trace.max_row_dev.max(max_row_sum_deviation(&out.weights));
            trace.max_masked = trace.max_masked.max(max_masked_weight(&out.weights, &mask));
            trace
                .cond_mass
                .push(mean(&condition_mass(&out.weights, lt, li)));
            text += out.text;
            image += out.image;
            c += out.cond;
        }
        Ok(Outputs {
            text,
            image,
            cond: c,
            trace,
        })
    }
}

fn joint_delta(a: &Outputs, b: &Outputs) -> f64 {
    max_abs_diff(&a.text, &b.text).max(max_abs_diff(&a.image, &b.image))
}

fn record_stats(rec: &DatasetRecord, index: usize, cfg: &AttendConfig) -> CliResult<RecordStats> {
    let toks = tokenize_instruction(&rec.instruction, cfg.downsample, DEFAULT_MAX_CAPTION_TOKENS)?;
    let layout = &toks.layout;
    let (lt, li) = (layout.l_text(), layout.l_img());

    let full = encode_contour(
        &to_rgb(&merge_contours(&rec.instruction)),
        cfg.downsample,
        cfg.dim,
    )?;
    let kept = filter_tokens(&full);
    let blank: Vec<usize> = (0..full.len())
        .filter(|i| kept.kept_indices.binary_search(i).is_err())
        .collect();

    let schedule = cfg.schedule();
    let saa = build_mask(layout, MaskKind::SemanticAlignment);
    let aia = build_mask(layout, MaskKind::AttributeIsolation);
    let params = (0..cfg.layers)
        .map(|l| {
            BranchParams::seeded(
                cfg.dim,
                cfg.heads,
                cfg.rank,
                mix(cfg.seed, l as u64),
                LoraInit::Perturbed(LORA_STD),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let masks = schedule
        .kinds()
        .map(|k| match k {
            MaskKind::SemanticAlignment => saa.clone(),
            MaskKind::AttributeIsolation => aia.clone(),
        })
        .collect();
    let mut rng = SeededNormal::new(mix(cfg.seed, 1 << 32 | index as u64));
    let stack = Stack {
        layout,
        text: rng.matrix(lt, cfg.dim, 1.0),
        image: rng.matrix(li, cfg.dim, 1.0),
        params,
        masks,
    };

    let filtered = stack.run(&kept, &[], Some(cfg.gamma))?;
    let masked_full = stack.run(&full, &blank, Some(cfg.gamma))?;
    let open_full = stack.run(&full, &[], Some(cfg.gamma))?;
    let (primary_cond, primary_blocked): (&ConditionTokens, &[usize]) = if cfg.citf {
        (&kept, &[])
    } else {
        (&full, &blank)
    };
    let primary = if cfg.citf { &filtered } else { &masked_full };
    let unit = stack.run(primary_cond, primary_blocked, Some(1.0))?;
    let unbiased = stack.run(primary_cond, primary_blocked, None)?;

    let mut sweep = Vec::with_capacity(GAMMA_SWEEP.len());
    let first = Stack {
        params: stack.params[..1].to_vec(),
        masks: stack.masks[..1].to_vec(),
        layout,
        text: stack.text.clone(),
        image: stack.image.clone(),
    };
    for g in GAMMA_SWEEP {
        let out = first.run(primary_cond, primary_blocked, Some(g))?;
        sweep.push(GammaMass {
            gamma: g,
            condition_mass: out.trace.cond_mass[0],
        });
    }

    let runs = [&filtered, &masked_full, &open_full, &unit, &unbiased];
    let max_row_dev = runs.iter().map(|r| r.trace.max_row_dev).fold(0.0, f64::max);
    let max_masked = runs.iter().map(|r| r.trace.max_masked).fold(0.0, f64::max);
    let mut breaches = Vec::new();
    if max_row_dev > ROW_SUM_TOLERANCE {
        breaches.push(format!("row sum deviates from 1 by {max_row_dev:e}"));
    }
    if max_masked != 0.0 {
        breaches.push(format!("masked pair carries weight {max_masked:e}"));
    }
    let unbiased_delta =
        joint_delta(&unit, &unbiased).max(max_abs_diff(&unit.cond, &unbiased.cond));

    Ok(RecordStats {
        image_id: rec.image_id.clone(),
        l_text: lt,
        l_img: li,
        condition_tokens: full.len(),
        condition_tokens_kept: kept.len(),
        max_row_sum_deviation: max_row_dev,
        max_masked_weight: max_masked,
        condition_mass: primary.trace.cond_mass[0],
        condition_mass_per_layer: primary.trace.cond_mass.clone(),
        gamma_sweep: sweep,
        unbiased_delta,
        citf_delta: joint_delta(&filtered, &masked_full),
        blank_token_delta: joint_delta(&masked_full, &open_full),
        breaches,
    })
}

/// Runs every record (in parallel, reported in input order).
pub fn attend_report(records: &[DatasetRecord], cfg: &AttendConfig) -> CliResult<AttendReport> {
    cfg.validate()?;
    let stats = records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            record_stats(rec, i, cfg)
                .map_err(|e| CliError::Data(format!("record `{}`: {e}", rec.image_id)))
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(AttendReport {
        config: cfg.clone(),
        schedule: cfg.schedule().kinds().map(MaskKind::short_name).collect(),
        ok: stats.iter().all(|s| s.breaches.is_empty()),
        records: stats,
    })
}

pub fn run(args: &AttendArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = AttendConfig::from_args(args)?;
    let records = manifest(&args.manifest)?;
    let report = attend_report(&records, &cfg)?;
    let json = to_json(&report);
    match &args.out {
        Some(path) => write_file(path, json.as_bytes())?,
        None => emit(out, &json)?,
    }
    if report.ok {
        Ok(())
    } else {
        let bad: Vec<_> = report
            .records
            .iter()
            .filter(|r| !r.breaches.is_empty())
            .map(|r| format!("{}: {}", r.image_id, r.breaches.join("; ")))
            .collect();
        Err(CliError::Data(format!(
            "invariant breach in {}",
            bad.join(" | ")
        )))
    }
}
