//! Measurements over attention weights.

use nalgebra::DMatrix;

use crate::masks::AttentionMask;

/// Largest `|sum(row) - 1|` over every head and row.
pub fn max_row_sum_deviation(weights: &[DMatrix<f64>]) -> f64 {
    weights
        .iter()
        .flat_map(|w| {
            w.row_iter()
                .map(|r| (r.sum() - 1.0).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

/// Largest weight placed on a disallowed `(q, k)` pair.
pub fn max_masked_weight(weights: &[DMatrix<f64>], mask: &AttentionMask) -> f64 {
    let mut max = 0.0f64;
    for w in weights {
        for q in 0..w.nrows() {
            for k in 0..w.ncols() {
                if !mask.get(q, k) {
                    max = max.max(w[(q, k)]);
                }
            }
        }
    }
    max
}

/// Per image query, the head-averaged attention mass on condition keys.
pub fn condition_mass(weights: &[DMatrix<f64>], l_text: usize, l_img: usize) -> Vec<f64> {
    if weights.is_empty() {
        return vec![0.0; l_img];
    }
    let cond_start = l_text + l_img;
    (l_text..l_text + l_img)
        .map(|q| {
            weights
                .iter()
                .map(|w| w.row(q).columns(cond_start, w.ncols() - cond_start).sum())
                .sum::<f64>()
                / weights.len() as f64
        })
        .collect()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "compared matrices differ in shape");
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
