//! Masked, biased multi-head attention over the joint sequence, axial 2D
//! rotary embeddings, LoRA merging, and a single-stream three-branch block.

use nalgebra::{DMatrix, DMatrixView};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;

use crate::error::{Error, Result};
use crate::masks::{check_reachability, AttentionMask};
use crate::shape::BiasMatrix;
use crate::tokens::TokenLayout;

/// Rows are tokens, columns are features.
pub type TokenMatrix = DMatrix<f64>;

/// Pre-softmax logit for disallowed pairs; `exp` of it underflows to 0.
pub const MASK_SENTINEL: f64 = -1e9;

const ROPE_BASE: f64 = 10_000.0;

/// Axial rotary embedding: the first half of each row is rotated by angles
/// derived from the row coordinate, the second half from the column
/// coordinate, pairing consecutive features.
pub fn rope_2d(tokens: &TokenMatrix, positions: &[(u32, u32)]) -> Result<TokenMatrix> {
    let mut out = tokens.clone();
    rope_2d_in_place(&mut out, positions, 0, tokens.ncols())?;
    Ok(out)
}

/// Applies [`rope_2d`] independently to each head slice of width `d / heads`.
pub fn rope_2d_heads(
    tokens: &TokenMatrix,
    positions: &[(u32, u32)],
    heads: usize,
) -> Result<TokenMatrix> {
    let head_dim = head_dim(tokens.ncols(), heads)?;
    let mut out = tokens.clone();
    for h in 0..heads {
        rope_2d_in_place(&mut out, positions, h * head_dim, head_dim)?;
    }
    Ok(out)
}

fn rope_2d_in_place(
    m: &mut TokenMatrix,
    positions: &[(u32, u32)],
    offset: usize,
    width: usize,
) -> Result<()> {
    if !width.is_multiple_of(4) {
        return Err(Error::DimensionError(format!(
            "rotary width {width} is not divisible by 4"
        )));
    }
    if positions.len() != m.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} positions for {} tokens",
            positions.len(),
            m.nrows()
        )));
    }
    let half = width / 2;
    let freqs: Vec<f64> = (0..half / 2)
        .map(|j| ROPE_BASE.powf(-((2 * j) as f64) / half as f64))
        .collect();
    for (t, &(row, col)) in positions.iter().enumerate() {
        for (axis, pos) in [(0usize, row), (1, col)] {
            if pos == 0 {
                continue;
            }
            for (j, &freq) in freqs.iter().enumerate() {
                let (sin, cos) = (f64::from(pos) * freq).sin_cos();
                let a = offset + axis * half + 2 * j;
                let (x0, x1) = (m[(t, a)], m[(t, a + 1)]);
                m[(t, a)] = x0 * cos - x1 * sin;
                m[(t, a + 1)] = x0 * sin + x1 * cos;
            }
        }
    }
    Ok(())
}

fn head_dim(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::DimensionError(format!(
            "model dim {d} is not divisible into {heads} heads"
        )));
    }
    Ok(d / heads)
}

/// Row-stochastic attention weights for one head.
fn head_weights(
    q: DMatrixView<'_, f64>,
    k: DMatrixView<'_, f64>,
    mask: &AttentionMask,
    bias: Option<&BiasMatrix>,
) -> DMatrix<f64> {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut logits = q * k.transpose();
    for r in 0..logits.nrows() {
        let mut max = f64::NEG_INFINITY;
        for c in 0..logits.ncols() {
            let v = if mask.get(r, c) {
                logits[(r, c)] * scale + bias.map_or(0.0, |b| b.value(r, c))
            } else {
                MASK_SENTINEL
            };
            logits[(r, c)] = v;
            max = max.max(v);
        }
        let mut sum = 0.0;
        for c in 0..logits.ncols() {
            let e = (logits[(r, c)] - max).exp();
            logits[(r, c)] = e;
            sum += e;
        }
        for c in 0..logits.ncols() {
            logits[(r, c)] /= sum;
        }
    }
    logits
}

/// Attention output together with the per-head weight matrices.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: TokenMatrix,
    pub weights: Vec<DMatrix<f64>>,
}

/// `softmax(Q K^T / sqrt(d_h) + bias + mask) V` per head, heads
/// concatenated along features. `bias = None` means no bias term.
pub fn masked_attention_with_weights(
    q: &TokenMatrix,
    k: &TokenMatrix,
    v: &TokenMatrix,
    mask: &AttentionMask,
    bias: Option<&BiasMatrix>,
    heads: usize,
) -> Result<AttentionOutput> {
    let s = q.nrows();
    if k.nrows() != s || v.nrows() != s || mask.size() != s {
        return Err(Error::ShapeMismatch(format!(
            "Q/K/V rows {}/{}/{} with mask size {}",
            q.nrows(),
            k.nrows(),
            v.nrows(),
            mask.size()
        )));
    }
    if k.ncols() != q.ncols() || v.ncols() != q.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "Q/K/V widths {}/{}/{}",
            q.ncols(),
            k.ncols(),
            v.ncols()
        )));
    }
    if let Some(b) = bias {
        if b.size() != s {
            return Err(Error::ShapeMismatch(format!(
                "bias size {} for sequence of {s}",
                b.size()
            )));
        }
    }
    check_reachability(mask).into_result()?;
    let dh = head_dim(q.ncols(), heads)?;

    let mut output = DMatrix::zeros(s, q.ncols());
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh;
        let w = head_weights(q.columns(cols, dh), k.columns(cols, dh), mask, bias);
        output
            .columns_mut(cols, dh)
            .copy_from(&(&w * v.columns(cols, dh)));
        weights.push(w);
    }
    Ok(AttentionOutput { output, weights })
}

pub fn masked_attention(
    q: &TokenMatrix,
    k: &TokenMatrix,
    v: &TokenMatrix,
    mask: &AttentionMask,
    bias: Option<&BiasMatrix>,
    heads: usize,
) -> Result<TokenMatrix> {
    masked_attention_with_weights(q, k, v, mask, bias, heads).map(|o| o.output)
}

/// Low-rank update `scale * B A` with `A: r x d`, `B: d x r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    scale: f64,
}

impl LoraAdapter {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, scale: f64) -> Result<Self> {
        let (r, d) = a.shape();
        if r == 0 || r > d {
            return Err(Error::ShapeMismatch(format!("rank {r} for dim {d}")));
        }
        if b.shape() != (d, r) {
            return Err(Error::ShapeMismatch(format!(
                "A is {r}x{d} but B is {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        Ok(Self { a, b, scale })
    }

    /// `B = 0`, the untrained state.
    pub fn zero(d: usize, r: usize) -> Result<Self> {
        Self::new(DMatrix::zeros(r, d), DMatrix::zeros(d, r), 1.0)
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn delta(&self) -> DMatrix<f64> {
        &self.b * &self.a * self.scale
    }
}

/// `W + scale * B A`.
pub fn merge_lora(w: &DMatrix<f64>, adapter: &LoraAdapter) -> Result<DMatrix<f64>> {
    let d = adapter.dim();
    if w.shape() != (d, d) {
        return Err(Error::ShapeMismatch(format!(
            "weight is {}x{}, adapter dim is {d}",
            w.nrows(),
            w.ncols()
        )));
    }
    Ok(w + adapter.delta())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Text,
    Image,
    Condition,
}

/// Query/key/value/output weights, each `d x d`, applied as `X W^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub query: DMatrix<f64>,
    pub key: DMatrix<f64>,
    pub value: DMatrix<f64>,
    pub output: DMatrix<f64>,
}

impl ProjectionSet {
    fn merged(&self, lora: &BranchLora) -> Result<Self> {
        Ok(Self {
            query: merge_lora(&self.query, &lora.query)?,
            key: merge_lora(&self.key, &lora.key)?,
            value: merge_lora(&self.value, &lora.value)?,
            output: merge_lora(&self.output, &lora.output)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchLora {
    pub query: LoraAdapter,
    pub key: LoraAdapter,
    pub value: LoraAdapter,
    pub output: LoraAdapter,
}

impl BranchLora {
    pub fn zero(d: usize, r: usize) -> Result<Self> {
        let z = LoraAdapter::zero(d, r)?;
        Ok(Self {
            query: z.clone(),
            key: z.clone(),
            value: z.clone(),
            output: z,
        })
    }
}

/// How LoRA adapters are initialised by [`BranchParams::seeded`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LoraInit {
    /// Gaussian `A`, zero `B`.
    Untrained,
    /// Gaussian `A` and `B`, with `B` scaled by the given standard deviation.
    Perturbed(f64),
}

/// Branch weights. The condition branch has no base weights of its own: it
/// reuses the image base and differs only through its adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    dim: usize,
    heads: usize,
    text: ProjectionSet,
    image: ProjectionSet,
    text_lora: BranchLora,
    image_lora: BranchLora,
    cond_lora: BranchLora,
}

impl BranchParams {
    pub fn new(
        heads: usize,
        text: ProjectionSet,
        image: ProjectionSet,
        text_lora: BranchLora,
        image_lora: BranchLora,
        cond_lora: BranchLora,
    ) -> Result<Self> {
        let dim = text.query.nrows();
        let dh = head_dim(dim, heads)?;
        if dh % 4 != 0 {
            return Err(Error::DimensionError(format!(
                "head dim {dh} is not divisible by 4"
            )));
        }
        let params = Self {
            dim,
            heads,
            text,
            image,
            text_lora,
            image_lora,
            cond_lora,
        };
        // merging validates every shape
        for b in [Branch::Text, Branch::Image, Branch::Condition] {
            params.merged(b)?;
        }
        Ok(params)
    }

    /// Seeded Gaussian initialisation; base weights have std `1/sqrt(d)`.
    pub fn seeded(
        dim: usize,
        heads: usize,
        rank: usize,
        seed: u64,
        init: LoraInit,
    ) -> Result<Self> {
        let mut rng = SeededNormal::new(seed);
        let std = 1.0 / (dim as f64).sqrt();
        let mut projections = || ProjectionSet {
            query: rng.matrix(dim, dim, std),
            key: rng.matrix(dim, dim, std),
            value: rng.matrix(dim, dim, std),
            output: rng.matrix(dim, dim, std),
        };
        let text = projections();
        let image = projections();
        let mut adapter = || -> Result<LoraAdapter> {
            let a = rng.matrix(rank, dim, std);
            let b = match init {
                LoraInit::Untrained => DMatrix::zeros(dim, rank),
                LoraInit::Perturbed(s) => rng.matrix(dim, rank, s),
            };
            LoraAdapter::new(a, b, 1.0)
        };
        let mut branch = || -> Result<BranchLora> {
            Ok(BranchLora {
                query: adapter()?,
                key: adapter()?,
                value: adapter()?,
                output: adapter()?,
            })
        };
        let text_lora = branch()?;
        let image_lora = branch()?;
        let cond_lora = branch()?;
        Self::new(heads, text, image, text_lora, image_lora, cond_lora)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn base(&self, branch: Branch) -> &ProjectionSet {
        match branch {
            Branch::Text => &self.text,
            Branch::Image | Branch::Condition => &self.image,
        }
    }

    pub fn lora(&self, branch: Branch) -> &BranchLora {
        match branch {
            Branch::Text => &self.text_lora,
            Branch::Image => &self.image_lora,
            Branch::Condition => &self.cond_lora,
        }
    }

    pub fn lora_mut(&mut self, branch: Branch) -> &mut BranchLora {
        match branch {
            Branch::Text => &mut self.text_lora,
            Branch::Image => &mut self.image_lora,
            Branch::Condition => &mut self.cond_lora,
        }
    }

    /// Base weights plus this branch's adapter.
    pub fn merged(&self, branch: Branch) -> Result<ProjectionSet> {
        self.base(branch).merged(self.lora(branch))
    }
}

/// Splitmix64 stream feeding a standard normal transform.
#[derive(Debug, Clone)]
pub struct SeededNormal {
    rng: SplitMix64,
}

impl SeededNormal {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: SplitMix64::seed_from_u64(seed),
        }
    }

    pub fn sample(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
        // row-major draw order, independent of nalgebra's storage order
        let mut m = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m[(r, c)] = self.sample() * std;
            }
        }
        m
    }
}

/// Per-segment block outputs and the attention weights that produced them.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub text: TokenMatrix,
    pub image: TokenMatrix,
    pub cond: TokenMatrix,
    pub weights: Vec<DMatrix<f64>>,
}

struct Projected {
    q: TokenMatrix,
    k: TokenMatrix,
    v: TokenMatrix,
}

fn project(x: &TokenMatrix, w: &ProjectionSet) -> Projected {
    Projected {
        q: x * w.query.transpose(),
        k: x * w.key.transpose(),
        v: x * w.value.transpose(),
    }
}

fn stack(parts: [&TokenMatrix; 3], d: usize) -> TokenMatrix {
    let n: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = DMatrix::zeros(n, d);
    let mut row = 0;
    for p in parts {
        out.rows_mut(row, p.nrows()).copy_from(p);
        row += p.nrows();
    }
    out
}

/// One single-stream attention block over `[text | image | condition]`.
///
/// Image and condition queries/keys are rotated with the image grid
/// positions from `layout` and `cond_positions` respectively; text stays at
/// the origin.
#[allow(clippy::too_many_arguments)]
pub fn block_forward(
    text: &TokenMatrix,
    image: &TokenMatrix,
    cond: &TokenMatrix,
    layout: &TokenLayout,
    cond_positions: &[(u32, u32)],
    params: &BranchParams,
    mask: &AttentionMask,
    bias: Option<&BiasMatrix>,
) -> Result<BlockOutput> {
    let d = params.dim();
    let (lt, li, lc) = (text.nrows(), image.nrows(), cond.nrows());
    if lt != layout.l_text() || li != layout.l_img() {
        return Err(Error::ShapeMismatch(format!(
            "segments {lt}/{li} do not match layout {}/{}",
            layout.l_text(),
            layout.l_img()
        )));
    }
    if cond_positions.len() != lc {
        return Err(Error::ShapeMismatch(format!(
            "{} condition positions for {lc} condition tokens",
            cond_positions.len()
        )));
    }
    for (name, m) in [("text", text), ("image", image), ("condition", cond)] {
        if m.ncols() != d {
            return Err(Error::ShapeMismatch(format!(
                "{name} tokens have width {}, model dim is {d}",
                m.ncols()
            )));
        }
    }
    if let Some(b) = bias {
        if b.segments() != (lt, li, lc) {
            return Err(Error::ShapeMismatch(format!(
                "bias segments {:?} vs inputs {:?}",
                b.segments(),
                (lt, li, lc)
            )));
        }
    }

    let w_text = params.merged(Branch::Text)?;
    let w_image = params.merged(Branch::Image)?;
    let w_cond = params.merged(Branch::Condition)?;

    let heads = params.heads();
    let pt = project(text, &w_text);
    let mut pi = project(image, &w_image);
    let mut pc = project(cond, &w_cond);
    let img_pos = layout.image_positions();
    pi.q = rope_2d_heads(&pi.q, img_pos, heads)?;
    pi.k = rope_2d_heads(&pi.k, img_pos, heads)?;
    pc.q = rope_2d_heads(&pc.q, cond_positions, heads)?;
    pc.k = rope_2d_heads(&pc.k, cond_positions, heads)?;

    let q = stack([&pt.q, &pi.q, &pc.q], d);
    let k = stack([&pt.k, &pi.k, &pc.k], d);
    let v = stack([&pt.v, &pi.v, &pc.v], d);
    let attn = masked_attention_with_weights(&q, &k, &v, mask, bias, heads)?;

    let seg = |start: usize, len: usize, w: &ProjectionSet| -> TokenMatrix {
        attn.output.rows(start, len) * w.output.transpose()
    };
    Ok(BlockOutput {
        text: seg(0, lt, &w_text),
        image: seg(lt, li, &w_image),
        cond: seg(lt + li, lc, &w_cond),
        weights: attn.weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::{build_token_layout, TokenEntityMap};

    fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        assert_eq!(a.shape(), b.shape());
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn rope_origin_is_identity() {
        let mut rng = SeededNormal::new(1);
        let t = rng.matrix(3, 8, 1.0);
        assert_eq!(rope_2d(&t, &[(0, 0); 3]).unwrap(), t);
    }

    #[test]
    fn rope_worked_example() {
        let t = DMatrix::from_row_slice(1, 4, &[1.0, 0.0, 1.0, 0.0]);
        let r = rope_2d(&t, &[(1, 0)]).unwrap();
        let expected = [1f64.cos(), 1f64.sin(), 1.0, 0.0];
        for (a, b) in r.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        // column axis drives the second half
        let r = rope_2d(&t, &[(0, 1)]).unwrap();
        let expected = [1.0, 0.0, 1f64.cos(), 1f64.sin()];
        for (a, b) in r.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rope_second_frequency() {
        // d = 8: half = 4, theta_1 = pos / 10000^(2/4) = pos / 100
        let t = DMatrix::from_row_slice(1, 8, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let r = rope_2d(&t, &[(3, 0)]).unwrap();
        assert!((r[(0, 2)] - 0.03f64.cos()).abs() < 1e-15);
        assert!((r[(0, 3)] - 0.03f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn rope_rejects_bad_dims() {
        let t = DMatrix::zeros(1, 6);
        assert!(matches!(
            rope_2d(&t, &[(0, 0)]),
            Err(Error::DimensionError(_))
        ));
        let t = DMatrix::zeros(2, 8);
        assert!(matches!(
            rope_2d(&t, &[(0, 0)]),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(rope_2d_heads(&DMatrix::zeros(1, 8), &[(0, 0)], 4).is_err());
    }

    #[test]
    fn plain_attention_reduction() {
        let mut rng = SeededNormal::new(2);
        let (q, k, v) = (
            rng.matrix(4, 8, 1.0),
            rng.matrix(4, 8, 1.0),
            rng.matrix(4, 8, 1.0),
        );
        let mask = AttentionMask::full(4);
        let bias = crate::shape::build_bias(1, 2, 1, 1.0).unwrap();
        let out = masked_attention(&q, &k, &v, &mask, Some(&bias), 1).unwrap();

        // direct softmax(QK^T/sqrt(d))V
        let logits = &q * k.transpose() / 8f64.sqrt();
        let mut expected = DMatrix::zeros(4, 8);
        for r in 0..4 {
            let row: Vec<f64> = (0..4).map(|c| logits[(r, c)].exp()).collect();
            let z: f64 = row.iter().sum();
            for (c, w) in row.iter().enumerate() {
                let scaled = v.row(c) * (w / z);
                expected.set_row(r, &(expected.row(r) + scaled));
            }
        }
        assert!(max_abs_diff(&out, &expected) < 1e-12);
    }

    #[test]
    fn diagonal_mask_returns_values() {
        let mut rng = SeededNormal::new(3);
        let (q, k, v) = (
            rng.matrix(5, 8, 3.0),
            rng.matrix(5, 8, 3.0),
            rng.matrix(5, 8, 1.0),
        );
        let mut mask = AttentionMask::empty(5);
        for i in 0..5 {
            mask.set(i, i, true);
        }
        let out = masked_attention(&q, &k, &v, &mask, None, 2).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn equal_logits_average_values() {
        let q = DMatrix::zeros(3, 4);
        let k = DMatrix::from_fn(3, 4, |r, c| (r + c) as f64);
        let v = DMatrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64);
        let mask = AttentionMask::from_rows(&[vec![1, 1, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        let out = masked_attention(&q, &k, &v, &mask, None, 1).unwrap();
        for c in 0..4 {
            assert_eq!(out[(0, c)], (v[(0, c)] + v[(1, c)]) / 2.0);
        }
    }

    #[test]
    fn unreachable_query_rejected() {
        let m = DMatrix::zeros(2, 4);
        let mask = AttentionMask::from_rows(&[vec![1, 1], vec![0, 0]]);
        assert!(matches!(
            masked_attention(&m, &m, &m, &mask, None, 1),
            Err(Error::UnreachableQuery { rows }) if rows == vec![1]
        ));
    }

    #[test]
    fn lora_examples() {
        let w = DMatrix::<f64>::identity(2, 2);
        let zero = LoraAdapter::zero(2, 1).unwrap();
        assert_eq!(merge_lora(&w, &zero).unwrap(), w);

        let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let muted = LoraAdapter::new(a.clone(), b.clone(), 0.0).unwrap();
        assert_eq!(merge_lora(&w, &muted).unwrap(), w);

        let adapter = LoraAdapter::new(a, b, 1.0).unwrap();
        let merged = merge_lora(&w, &adapter).unwrap();
        assert_eq!(merged, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 1.0]));
    }

    #[test]
    fn lora_shape_errors() {
        assert!(LoraAdapter::new(DMatrix::zeros(1, 2), DMatrix::zeros(2, 2), 1.0).is_err());
        assert!(LoraAdapter::new(DMatrix::zeros(3, 2), DMatrix::zeros(2, 3), 1.0).is_err());
        assert!(LoraAdapter::new(DMatrix::zeros(0, 2), DMatrix::zeros(2, 0), 1.0).is_err());
        let adapter = LoraAdapter::zero(3, 1).unwrap();
        assert!(matches!(
            merge_lora(&DMatrix::zeros(2, 2), &adapter),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn condition_branch_shares_image_base() {
        let p = BranchParams::seeded(16, 2, 2, 9, LoraInit::Untrained).unwrap();
        assert_eq!(p.base(Branch::Condition), p.base(Branch::Image));
        assert_eq!(
            p.merged(Branch::Condition).unwrap(),
            p.merged(Branch::Image).unwrap()
        );
        assert_ne!(
            p.merged(Branch::Text).unwrap(),
            p.merged(Branch::Image).unwrap()
        );

        let p = BranchParams::seeded(16, 2, 2, 9, LoraInit::Perturbed(0.1)).unwrap();
        assert_ne!(
            p.merged(Branch::Condition).unwrap(),
            p.merged(Branch::Image).unwrap()
        );
    }

    #[test]
    fn seeded_params_are_reproducible() {
        let a = BranchParams::seeded(8, 2, 1, 42, LoraInit::Perturbed(0.01)).unwrap();
        let b = BranchParams::seeded(8, 2, 1, 42, LoraInit::Perturbed(0.01)).unwrap();
        let c = BranchParams::seeded(8, 2, 1, 43, LoraInit::Perturbed(0.01)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn params_reject_bad_head_split() {
        assert!(BranchParams::seeded(12, 2, 1, 0, LoraInit::Untrained).is_err());
        assert!(BranchParams::seeded(16, 3, 1, 0, LoraInit::Untrained).is_err());
    }

    fn two_token_layout() -> TokenLayout {
        let tokens = TokenEntityMap {
            rows: 1,
            cols: 2,
            labels: vec![0, 1],
        };
        build_token_layout(&tokens, &[2, 1]).unwrap()
    }

    #[test]
    fn empty_condition_segment_matches_two_segment_forward() {
        let layout = two_token_layout();
        let params = BranchParams::seeded(16, 2, 2, 5, LoraInit::Perturbed(0.05)).unwrap();
        let mut rng = SeededNormal::new(6);
        let text = rng.matrix(3, 16, 1.0);
        let image = rng.matrix(2, 16, 1.0);
        let mask = crate::masks::build_saa(&layout);
        let out = block_forward(
            &text,
            &image,
            &DMatrix::zeros(0, 16),
            &layout,
            &[],
            &params,
            &mask,
            None,
        )
        .unwrap();
        assert_eq!(out.cond.nrows(), 0);

        // hand-assembled two-segment forward
        let wt = params.merged(Branch::Text).unwrap();
        let wi = params.merged(Branch::Image).unwrap();
        let q = stack(
            [
                &(&text * wt.query.transpose()),
                &rope_2d_heads(
                    &(&image * wi.query.transpose()),
                    layout.image_positions(),
                    2,
                )
                .unwrap(),
                &DMatrix::zeros(0, 16),
            ],
            16,
        );
        let k = stack(
            [
                &(&text * wt.key.transpose()),
                &rope_2d_heads(&(&image * wi.key.transpose()), layout.image_positions(), 2)
                    .unwrap(),
                &DMatrix::zeros(0, 16),
            ],
            16,
        );
        let v = stack(
            [
                &(&text * wt.value.transpose()),
                &(&image * wi.value.transpose()),
                &DMatrix::zeros(0, 16),
            ],
            16,
        );
        let a = masked_attention(&q, &k, &v, &mask, None, 2).unwrap();
        let text_out = a.rows(0, 3) * wt.output.transpose();
        let image_out = a.rows(3, 2) * wi.output.transpose();
        assert!(max_abs_diff(&out.text, &text_out) < 1e-12);
        assert!(max_abs_diff(&out.image, &image_out) < 1e-12);
    }

    #[test]
    fn block_shape_errors() {
        let layout = two_token_layout();
        let params = BranchParams::seeded(8, 2, 1, 5, LoraInit::Untrained).unwrap();
        let text = DMatrix::zeros(3, 8);
        let image = DMatrix::zeros(2, 8);
        let cond = DMatrix::zeros(1, 8);
        let mask = crate::masks::extend_with_condition(&crate::masks::build_saa(&layout), 1);
        assert!(block_forward(&text, &image, &cond, &layout, &[], &params, &mask, None).is_err());
        let bad_text = DMatrix::zeros(2, 8);
        assert!(block_forward(
            &bad_text,
            &image,
            &cond,
            &layout,
            &[(0, 0)],
            &params,
            &mask,
            None
        )
        .is_err());
        let bias = crate::shape::build_bias(3, 2, 2, 0.5).unwrap();
        assert!(block_forward(
            &text,
            &image,
            &cond,
            &layout,
            &[(0, 0)],
            &params,
            &mask,
            Some(&bias)
        )
        .is_err());
        assert!(block_forward(
            &text,
            &image,
            &cond,
            &layout,
            &[(0, 0)],
            &params,
            &mask,
            None
        )
        .is_ok());
    }
}
