//! Class-agnostic mask IoU and an analytic attention cost model.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layout::BinaryMask;
use crate::manifest::DatasetRecord;

/// IoU of two masks; 1.0 when both are empty.
pub fn entity_iou(pred: &BinaryMask, reference: &BinaryMask) -> Result<f64> {
    let inter = pred.intersection_area(reference)?;
    let union = pred.union_area(reference)?;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub image_id: String,
    pub entity_id: u32,
    pub pred: BinaryMask,
    pub reference: BinaryMask,
}

/// Predicted/reference pairs keyed by `(image_id, entity_id)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskPairSet {
    entries: Vec<MaskPair>,
}

impl MaskPairSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, pair: MaskPair) -> Result<()> {
        if pair.pred.dims() != pair.reference.dims() {
            return Err(Error::DimensionMismatch {
                left: pair.pred.dims(),
                right: pair.reference.dims(),
            });
        }
        if self
            .entries
            .iter()
            .any(|p| p.image_id == pair.image_id && p.entity_id == pair.entity_id)
        {
            return Err(Error::InvalidInstruction(format!(
                "duplicate entity {} in image `{}`",
                pair.entity_id, pair.image_id
            )));
        }
        self.entries.push(pair);
        Ok(())
    }

    pub fn entries(&self) -> &[MaskPair] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntityScore {
    pub image_id: String,
    pub entity_id: u32,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiouReport {
    pub entities: Vec<EntityScore>,
    pub miou: f64,
}

impl MiouReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("{:<24} {:>8} {:>10}\n", "image", "entity", "iou");
        for e in &self.entities {
            out.push_str(&format!(
                "{:<24} {:>8} {:>10.6}\n",
                e.image_id, e.entity_id, e.iou
            ));
        }
        out.push_str(&format!(
            "mean IoU over {} entities: {:.6}\n",
            self.entities.len(),
            self.miou
        ));
        out
    }
}

/// Per-entity IoU table plus the unweighted mean.
pub fn score_pairs(pairs: &MaskPairSet) -> Result<MiouReport> {
    if pairs.is_empty() {
        return Err(Error::EmptySet);
    }
    let entities = pairs
        .entries()
        .iter()
        .map(|p| {
            Ok(EntityScore {
                image_id: p.image_id.clone(),
                entity_id: p.entity_id,
                iou: entity_iou(&p.pred, &p.reference)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let miou = entities.iter().map(|e| e.iou).sum::<f64>() / entities.len() as f64;
    Ok(MiouReport { entities, miou })
}

pub fn class_agnostic_miou(pairs: &MaskPairSet) -> Result<f64> {
    score_pairs(pairs).map(|r| r.miou)
}

/// Pairs entities by `(image_id, entity_id)`, driven by the reference: a
/// reference entity without a prediction is scored against an empty mask,
/// predictions without a reference are ignored.
pub fn pair_records(pred: &[DatasetRecord], reference: &[DatasetRecord]) -> Result<MaskPairSet> {
    let mut pairs = MaskPairSet::new();
    for r in reference {
        let p = pred.iter().find(|p| p.image_id == r.image_id);
        if let Some(p) = p {
            if (p.width(), p.height()) != (r.width(), r.height()) {
                return Err(Error::DimensionMismatch {
                    left: (p.width(), p.height()),
                    right: (r.width(), r.height()),
                });
            }
        }
        for e in r.entities() {
            let mask = match p.and_then(|p| p.entities().iter().find(|x| x.id == e.id)) {
                Some(x) => x.mask.clone(),
                None => BinaryMask::new(r.width(), r.height())?,
            };
            pairs.push(MaskPair {
                image_id: r.image_id.clone(),
                entity_id: e.id,
                pred: mask,
                reference: e.mask.clone(),
            })?;
        }
    }
    Ok(pairs)
}

/// Attention sequence dimensions for the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostProfile {
    pub l_text: u64,
    pub l_img: u64,
    pub l_cond: u64,
    pub heads: u64,
    pub head_dim: u64,
    pub layers: u64,
}

impl CostProfile {
    pub fn validate(&self) -> Result<()> {
        if [
            self.l_text,
            self.l_img,
            self.heads,
            self.head_dim,
            self.layers,
        ]
        .contains(&0)
        {
            return Err(Error::DimensionError(format!(
                "cost profile fields other than l_cond must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn with_cond(self, l_cond: u64) -> Self {
        Self { l_cond, ..self }
    }

    pub fn model_dim(&self) -> u64 {
        self.heads * self.head_dim
    }

    pub fn seq_len(&self) -> u64 {
        self.l_text + self.l_img + self.l_cond
    }
}

/// Multiply-accumulates of the attention sublayers: per layer
/// `4 S d^2` for the Q/K/V/O projections plus `2 S^2 d` for scores and
/// value aggregation.
pub fn attention_macs(profile: &CostProfile) -> u128 {
    let s = u128::from(profile.seq_len());
    let d = u128::from(profile.model_dim());
    u128::from(profile.layers) * (4 * s * d * d + 2 * s * s * d)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostSetting {
    pub setting: &'static str,
    pub l_cond: u64,
    pub macs: u128,
    /// Saving relative to running without token filtering.
    pub savings_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CitfReport {
    pub profile: CostProfile,
    pub pre_filter: u64,
    pub settings: Vec<CostSetting>,
}

impl CitfReport {
    pub fn setting(&self, name: &str) -> Option<&CostSetting> {
        self.settings.iter().find(|s| s.setting == name)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<14} {:>8} {:>22} {:>10}\n",
            "setting", "l_cond", "MACs", "saving %"
        );
        for s in &self.settings {
            out.push_str(&format!(
                "{:<14} {:>8} {:>22} {:>10.3}\n",
                s.setting, s.l_cond, s.macs, s.savings_percent
            ));
        }
        out
    }
}

/// Cost with no condition tokens, with the min/avg/max retained count after
/// filtering (when any are given), and with every condition token kept.
/// `profile.l_cond` is ignored; the average is rounded to the nearest token.
pub fn citf_report(profile: &CostProfile, pre_filter: u64, retained: &[u64]) -> Result<CitfReport> {
    profile.validate()?;
    if let Some(&bad) = retained.iter().find(|&&n| n > pre_filter) {
        return Err(Error::DimensionError(format!(
            "retained count {bad} exceeds pre-filter count {pre_filter}"
        )));
    }
    let full = attention_macs(&profile.with_cond(pre_filter));
    let setting = |name: &'static str, l_cond: u64| {
        let macs = attention_macs(&profile.with_cond(l_cond));
        CostSetting {
            setting: name,
            l_cond,
            macs,
            savings_percent: 100.0 * (full - macs) as f64 / full as f64,
        }
    };
    let mut settings = vec![setting("no_condition", 0)];
    if !retained.is_empty() {
        let min = *retained.iter().min().expect("nonempty");
        let max = *retained.iter().max().expect("nonempty");
        let sum: u128 = retained.iter().map(|&n| u128::from(n)).sum();
        let n = retained.len() as u128;
        let avg = ((2 * sum + n) / (2 * n)) as u64;
        settings.push(setting("citf_min", min));
        settings.push(setting("citf_avg", avg));
        settings.push(setting("citf_max", max));
    }
    settings.push(setting("no_citf", pre_filter));
    Ok(CitfReport {
        profile: profile.with_cond(pre_filter),
        pre_filter,
        settings,
    })
}
