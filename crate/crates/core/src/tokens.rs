//! Pixel masks to latent-token index sets.
//!
//! Pixels are labelled by entity (smallest claiming mask wins), patches of
//! `f x f` pixels take the plurality label, and the joint sequence is laid
//! out as `[T_0, T_1, .., T_N, image tokens in raster order]`.

use std::collections::BTreeMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::layout::LayoutInstruction;

/// Default cap on tokens per caption.
pub const DEFAULT_MAX_CAPTION_TOKENS: usize = 77;

/// Per-pixel entity ids, 0 = background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }
}

/// One label per latent token.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenEntityMap {
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<u32>,
}

impl TokenEntityMap {
    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.cols + col]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Replaces entity ids with their 1-based ordinal in `instruction`.
    pub fn to_ordinals(&self, instruction: &LayoutInstruction) -> Result<Self> {
        let labels = self
            .labels
            .iter()
            .map(|&id| match id {
                0 => Ok(0),
                id => instruction
                    .ordinal_of(id)
                    .map(|o| o as u32)
                    .ok_or(Error::UnknownEntityId {
                        id,
                        captions: instruction.entities().len() + 1,
                    }),
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            labels,
        })
    }
}

/// Which caption group a token in the joint sequence belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenRole {
    Text(usize),
    Image(usize),
}

/// Partition of the text and image segments into per-entity index sets.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenLayout {
    text_sets: Vec<Range<usize>>,
    image_sets: Vec<Vec<usize>>,
    positions: Vec<(u32, u32)>,
    roles: Vec<TokenRole>,
    l_text: usize,
    l_img: usize,
    grid: (usize, usize),
}

impl TokenLayout {
    /// `T_0 .. T_N` as contiguous ranges over `[0, L_text)`.
    pub fn text_sets(&self) -> &[Range<usize>] {
        &self.text_sets
    }

    /// `I_0 .. I_N` as absolute sequence indices in `[L_text, L_text + L_img)`.
    pub fn image_sets(&self) -> &[Vec<usize>] {
        &self.image_sets
    }

    /// `(row, col)` per token; text tokens sit at the origin.
    pub fn positions(&self) -> &[(u32, u32)] {
        &self.positions
    }

    pub fn image_positions(&self) -> &[(u32, u32)] {
        &self.positions[self.l_text..]
    }

    pub fn roles(&self) -> &[TokenRole] {
        &self.roles
    }

    pub fn role(&self, index: usize) -> TokenRole {
        self.roles[index]
    }

    pub fn l_text(&self) -> usize {
        self.l_text
    }

    pub fn l_img(&self) -> usize {
        self.l_img
    }

    pub fn len(&self) -> usize {
        self.l_text + self.l_img
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `N`, the number of entities.
    pub fn entity_count(&self) -> usize {
        self.text_sets.len() - 1
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }
}

/// Whitespace word count, clamped to `[1, max_tokens]`.
pub fn caption_token_count(caption: &str, max_tokens: usize) -> usize {
    caption
        .split_whitespace()
        .count()
        .clamp(1, max_tokens.max(1))
}

pub fn assign_labels(instruction: &LayoutInstruction) -> LabelMap {
    let (w, h) = (instruction.image_width(), instruction.image_height());
    let mut order: Vec<_> = instruction
        .entities()
        .iter()
        .map(|e| (e.mask.area(), e.id, &e.mask))
        .collect();
    order.sort_by_key(|&(area, id, _)| (area, id));

    let mut labels = vec![0u32; w * h];
    for (_, id, mask) in order {
        for i in mask.ones() {
            if labels[i] == 0 {
                labels[i] = id;
            }
        }
    }
    LabelMap {
        width: w,
        height: h,
        labels,
    }
}

/// Plurality label per `f x f` patch, background included, lower label on ties.
pub fn patchify_labels(labels: &LabelMap, f: usize) -> Result<TokenEntityMap> {
    if f == 0 {
        return Err(Error::DimensionError(
            "downsampling factor must be >= 1".into(),
        ));
    }
    let rows = labels.height.div_ceil(f);
    let cols = labels.width.div_ceil(f);
    let mut out = Vec::with_capacity(rows * cols);
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for r in 0..rows {
        for c in 0..cols {
            counts.clear();
            for y in r * f..((r + 1) * f).min(labels.height) {
                for x in c * f..((c + 1) * f).min(labels.width) {
                    *counts.entry(labels.get(x, y)).or_default() += 1;
                }
            }
            let mut best = (0u32, 0usize);
            for (&label, &n) in &counts {
                if n > best.1 {
                    best = (label, n);
                }
            }
            out.push(best.0);
        }
    }
    Ok(TokenEntityMap {
        rows,
        cols,
        labels: out,
    })
}

/// Lays out `[T_0 .. T_N | image tokens]`. `tokens` must carry ordinals
/// (`0..=N`), not raw entity ids.
pub fn build_token_layout(
    tokens: &TokenEntityMap,
    caption_lengths: &[usize],
) -> Result<TokenLayout> {
    if caption_lengths.is_empty() {
        return Err(Error::InvalidInstruction(
            "at least the global caption length is required".into(),
        ));
    }
    if let Some(i) = caption_lengths.iter().position(|&n| n == 0) {
        return Err(Error::InvalidInstruction(format!(
            "caption {i} has zero tokens"
        )));
    }
    if tokens.rows * tokens.cols == 0 || tokens.labels.len() != tokens.rows * tokens.cols {
        return Err(Error::DimensionError(format!(
            "token grid {}x{} with {} labels",
            tokens.rows,
            tokens.cols,
            tokens.labels.len()
        )));
    }
    let groups = caption_lengths.len();
    if let Some(&id) = tokens.labels.iter().find(|&&l| l as usize >= groups) {
        return Err(Error::UnknownEntityId {
            id,
            captions: groups,
        });
    }

    let mut text_sets = Vec::with_capacity(groups);
    let mut roles = Vec::new();
    let mut start = 0;
    for (i, &n) in caption_lengths.iter().enumerate() {
        text_sets.push(start..start + n);
        roles.extend(std::iter::repeat_n(TokenRole::Text(i), n));
        start += n;
    }
    let l_text = start;
    let l_img = tokens.labels.len();

    let mut image_sets = vec![Vec::new(); groups];
    let mut positions = vec![(0u32, 0u32); l_text];
    for (cell, &label) in tokens.labels.iter().enumerate() {
        image_sets[label as usize].push(l_text + cell);
        roles.push(TokenRole::Image(label as usize));
        positions.push(((cell / tokens.cols) as u32, (cell % tokens.cols) as u32));
    }

    Ok(TokenLayout {
        text_sets,
        image_sets,
        positions,
        roles,
        l_text,
        l_img,
        grid: (tokens.rows, tokens.cols),
    })
}

/// Token-scale view of an instruction: ordinal entity map plus layout.
#[derive(Debug, Clone)]
pub struct InstructionTokens {
    pub entity_map: TokenEntityMap,
    pub caption_lengths: Vec<usize>,
    pub layout: TokenLayout,
}

pub fn tokenize_instruction(
    instruction: &LayoutInstruction,
    f: usize,
    max_caption_tokens: usize,
) -> Result<InstructionTokens> {
    let labels = assign_labels(instruction);
    let entity_map = patchify_labels(&labels, f)?.to_ordinals(instruction)?;
    let caption_lengths: Vec<usize> = std::iter::once(instruction.global_caption())
        .chain(instruction.entities().iter().map(|e| e.caption.as_str()))
        .map(|c| caption_token_count(c, max_caption_tokens))
        .collect();
    let layout = build_token_layout(&entity_map, &caption_lengths)?;
    Ok(InstructionTokens {
        entity_map,
        caption_lengths,
        layout,
    })
}
