//! Condition tokens from the entity contour map, zero-token filtering, and
//! the `log(gamma)` shape-strength bias.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::layout::ContourImage;

/// Strict shape adherence.
pub const DEFAULT_GAMMA: f64 = 1.0;
/// Loose, scribble-style control.
pub const SCRIBBLE_GAMMA: f64 = 0.2;

/// Encoded condition tokens, one row per retained patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTokens {
    pub tokens: DMatrix<f64>,
    /// `(row, col)` of each token on the image-token grid.
    pub source_positions: Vec<(u32, u32)>,
    /// Index of each token in the unfiltered raster sequence.
    pub kept_indices: Vec<usize>,
}

impl ConditionTokens {
    pub fn len(&self) -> usize {
        self.kept_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept_indices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Deterministic stand-in for the frozen image encoder: each `f x f` patch
/// of the first channel, scaled to `[0, 1]`, is flattened row-major into the
/// leading `f * f` coordinates of a `d`-dimensional token. Patches hanging
/// over the image edge are zero-padded.
pub fn encode_contour(img: &ContourImage, f: usize, d: usize) -> Result<ConditionTokens> {
    if f == 0 {
        return Err(Error::DimensionError(
            "downsampling factor must be >= 1".into(),
        ));
    }
    if d < f * f {
        return Err(Error::DimensionError(format!(
            "embedding dim {d} cannot hold a {f}x{f} patch"
        )));
    }
    let rows = img.height.div_ceil(f);
    let cols = img.width.div_ceil(f);
    let n = rows * cols;
    let mut tokens = DMatrix::zeros(n, d);
    let mut source_positions = Vec::with_capacity(n);
    for r in 0..rows {
        for c in 0..cols {
            let t = r * cols + c;
            for dy in 0..f {
                let y = r * f + dy;
                if y >= img.height {
                    break;
                }
                for dx in 0..f {
                    let x = c * f + dx;
                    if x >= img.width {
                        break;
                    }
                    let v = img.rgb[3 * (y * img.width + x)];
                    if v != 0 {
                        tokens[(t, dy * f + dx)] = f64::from(v) / 255.0;
                    }
                }
            }
            source_positions.push((r as u32, c as u32));
        }
    }
    Ok(ConditionTokens {
        tokens,
        source_positions,
        kept_indices: (0..n).collect(),
    })
}

/// Drops every token whose coordinates are all exactly zero.
pub fn filter_tokens(cond: &ConditionTokens) -> ConditionTokens {
    filter_tokens_with_threshold(cond, 0.0)
}

/// Keeps tokens with at least one coordinate of magnitude above `threshold`.
pub fn filter_tokens_with_threshold(cond: &ConditionTokens, threshold: f64) -> ConditionTokens {
    let keep: Vec<usize> = (0..cond.len())
        .filter(|&i| cond.tokens.row(i).iter().any(|v| v.abs() > threshold))
        .collect();
    let tokens = cond.tokens.select_rows(keep.iter());
    ConditionTokens {
        tokens,
        source_positions: keep.iter().map(|&i| cond.source_positions[i]).collect(),
        kept_indices: keep.iter().map(|&i| cond.kept_indices[i]).collect(),
    }
}

/// Additive attention bias over `[text | image | condition]`: `log(gamma)`
/// on the image/condition blocks, zero elsewhere. Stored by block rather
/// than densely.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasMatrix {
    l_text: usize,
    l_img: usize,
    l_cond: usize,
    gamma: f64,
    log_gamma: f64,
}

impl BiasMatrix {
    pub fn size(&self) -> usize {
        self.l_text + self.l_img + self.l_cond
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn log_gamma(&self) -> f64 {
        self.log_gamma
    }

    pub fn segments(&self) -> (usize, usize, usize) {
        (self.l_text, self.l_img, self.l_cond)
    }

    fn is_image(&self, i: usize) -> bool {
        (self.l_text..self.l_text + self.l_img).contains(&i)
    }

    fn is_cond(&self, i: usize) -> bool {
        i >= self.l_text + self.l_img && i < self.size()
    }

    #[inline]
    pub fn value(&self, q: usize, k: usize) -> f64 {
        if (self.is_image(q) && self.is_cond(k)) || (self.is_cond(q) && self.is_image(k)) {
            self.log_gamma
        } else {
            0.0
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.size();
        DMatrix::from_fn(n, n, |q, k| self.value(q, k))
    }
}

pub fn build_bias(l_text: usize, l_img: usize, l_cond: usize, gamma: f64) -> Result<BiasMatrix> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::GammaOutOfRange(gamma));
    }
    Ok(BiasMatrix {
        l_text,
        l_img,
        l_cond,
        gamma,
        log_gamma: gamma.ln(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{to_rgb, GrayContourMap};

    fn image(width: usize, height: usize, on: &[(usize, usize)]) -> ContourImage {
        let mut values = vec![0u8; width * height];
        for &(x, y) in on {
            values[y * width + x] = 1;
        }
        to_rgb(&GrayContourMap {
            width,
            height,
            values,
        })
    }

    #[test]
    fn black_image_encodes_to_zero_tokens() {
        let cond = encode_contour(&image(4, 4, &[]), 2, 4).unwrap();
        assert_eq!(cond.len(), 4);
        assert!(cond.tokens.iter().all(|&v| v == 0.0));
        assert_eq!(cond.kept_indices, vec![0, 1, 2, 3]);
        assert_eq!(cond.source_positions, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn single_pixel_lands_in_first_coordinate() {
        let cond = encode_contour(&image(4, 4, &[(0, 0)]), 2, 5).unwrap();
        assert_eq!(cond.tokens[(0, 0)], 1.0);
        assert_eq!(cond.tokens.iter().filter(|&&v| v != 0.0).count(), 1);

        let cond = encode_contour(&image(4, 4, &[(3, 2)]), 2, 4).unwrap();
        // patch (1, 1), local offset (dy=0, dx=1)
        assert_eq!(cond.tokens[(3, 1)], 1.0);
    }

    #[test]
    fn unit_patch_is_identity() {
        let img = image(3, 2, &[(1, 0), (2, 1)]);
        let cond = encode_contour(&img, 1, 1).unwrap();
        let values: Vec<f64> = cond.tokens.iter().copied().collect();
        assert_eq!(values, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn edge_patches_zero_padded() {
        let cond = encode_contour(&image(3, 3, &[(2, 2)]), 2, 4).unwrap();
        assert_eq!(cond.len(), 4);
        assert_eq!(cond.tokens[(3, 0)], 1.0);
        assert_eq!(cond.tokens.row(3).iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn encoder_preconditions() {
        let img = image(4, 4, &[]);
        assert!(encode_contour(&img, 0, 4).is_err());
        assert!(encode_contour(&img, 4, 15).is_err());
        assert!(encode_contour(&img, 4, 16).is_ok());
    }

    #[test]
    fn filtering() {
        let blank = encode_contour(&image(4, 4, &[]), 2, 4).unwrap();
        let f = filter_tokens(&blank);
        assert!(f.is_empty());
        assert_eq!(f.tokens.nrows(), 0);
        assert_eq!(f.dim(), 4);

        let mut cond = blank.clone();
        cond.tokens[(1, 2)] = 0.5;
        cond.tokens[(3, 0)] = -1.0;
        let f = filter_tokens(&cond);
        assert_eq!(f.kept_indices, vec![1, 3]);
        assert_eq!(f.source_positions, vec![(0, 1), (1, 1)]);
        assert_eq!(f.tokens.row(0), cond.tokens.row(1));
        assert_eq!(f.tokens.row(1), cond.tokens.row(3));

        let dense = encode_contour(&image(2, 2, &[(0, 0), (1, 0), (0, 1), (1, 1)]), 1, 1).unwrap();
        assert_eq!(filter_tokens(&dense), dense);
    }

    #[test]
    fn threshold_filtering() {
        let mut cond = encode_contour(&image(2, 1, &[]), 1, 1).unwrap();
        cond.tokens[(0, 0)] = 1e-4;
        cond.tokens[(1, 0)] = 0.5;
        assert_eq!(filter_tokens(&cond).len(), 2);
        assert_eq!(
            filter_tokens_with_threshold(&cond, 1e-3).kept_indices,
            vec![1]
        );
    }

    #[test]
    fn bias_examples() {
        let b = build_bias(2, 3, 4, 1.0).unwrap();
        assert_eq!(b.size(), 9);
        assert!(b.to_dense().iter().all(|&v| v == 0.0));

        let b = build_bias(2, 2, 2, 0.5).unwrap();
        let dense = b.to_dense();
        let log_half = -std::f64::consts::LN_2;
        for q in 0..6 {
            for k in 0..6 {
                let expected = if (matches!(q, 2 | 3) && matches!(k, 4 | 5))
                    || (matches!(q, 4 | 5) && matches!(k, 2 | 3))
                {
                    log_half
                } else {
                    0.0
                };
                assert_eq!(dense[(q, k)], expected, "({q},{k})");
            }
        }
        assert!((log_half + std::f64::consts::LN_2).abs() < 1e-12);

        let b = build_bias(3, 2, 0, 0.1).unwrap();
        assert_eq!(b.size(), 5);
        assert!(b.to_dense().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gamma_range() {
        for g in [0.0, -0.1, 1.0000001, f64::NAN, f64::INFINITY] {
            assert!(matches!(
                build_bias(1, 1, 1, g),
                Err(Error::GammaOutOfRange(_))
            ));
        }
        assert!(build_bias(1, 1, 1, f64::MIN_POSITIVE).is_ok());
        assert_eq!(build_bias(1, 1, 1, SCRIBBLE_GAMMA).unwrap().gamma(), 0.2);
    }
}
