//! PNG output for contour maps, attention masks and token grids.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, RgbImage};

use crate::error::Result;
use crate::layout::{ContourImage, GrayContourMap};
use crate::masks::AttentionMask;
use crate::tokens::TokenEntityMap;

/// 8-bit grayscale, 0 or 255.
pub fn gray_contour_image(gray: &GrayContourMap) -> GrayImage {
    GrayImage::from_raw(
        gray.width as u32,
        gray.height as u32,
        gray.values.iter().map(|&v| v.saturating_mul(255)).collect(),
    )
    .expect("buffer length matches dimensions")
}

pub fn contour_rgb_image(img: &ContourImage) -> RgbImage {
    RgbImage::from_raw(img.width as u32, img.height as u32, img.rgb.clone())
        .expect("buffer length matches dimensions")
}

/// White = allowed, black = masked; row = query.
pub fn attention_mask_image(mask: &AttentionMask) -> GrayImage {
    let n = mask.size() as u32;
    GrayImage::from_fn(n, n, |k, q| {
        Luma([if mask.get(q as usize, k as usize) {
            255
        } else {
            0
        }])
    })
}

/// 16-bit grayscale with the raw label per token.
pub fn token_map_image(tokens: &TokenEntityMap) -> ImageBuffer<Luma<u16>, Vec<u16>> {
    ImageBuffer::from_fn(tokens.cols as u32, tokens.rows as u32, |c, r| {
        Luma([tokens.get(r as usize, c as usize).min(u16::MAX as u32) as u16])
    })
}

pub fn write_gray_contour(gray: &GrayContourMap, path: &Path) -> Result<()> {
    gray_contour_image(gray).save(path)?;
    Ok(())
}

pub fn write_contour_rgb(img: &ContourImage, path: &Path) -> Result<()> {
    contour_rgb_image(img).save(path)?;
    Ok(())
}

pub fn write_attention_mask(mask: &AttentionMask, path: &Path) -> Result<()> {
    attention_mask_image(mask).save(path)?;
    Ok(())
}

pub fn write_token_map(tokens: &TokenEntityMap, path: &Path) -> Result<()> {
    token_map_image(tokens).save(path)?;
    Ok(())
}
