//! Layout instructions and binary-mask geometry.
//!
//! A [`LayoutInstruction`] pairs a global caption with any number of entity
//! captions, each carrying a [`BinaryMask`] at full image resolution. The
//! entity contour map is the pixelwise maximum of the per-entity inner
//! boundaries (4-connectivity, image border counted as background).

use fixedbitset::FixedBitSet;

use crate::error::{Error, Result};

/// Row-major bit grid, one bit per pixel.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: FixedBitSet,
}

impl std::fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "BinaryMask {}x{}", self.width, self.height)?;
        for y in 0..self.height {
            let row: String = (0..self.width)
                .map(|x| if self.get(x, y) { '#' } else { '.' })
                .collect();
            writeln!(f, "  {row}")?;
        }
        Ok(())
    }
}

impl BinaryMask {
    /// All-zero mask.
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::DimensionError(format!(
                "mask dimensions must be positive, got {width}x{height}"
            )));
        }
        Ok(Self {
            width,
            height,
            bits: FixedBitSet::with_capacity(width * height),
        })
    }

    pub fn full(width: usize, height: usize) -> Result<Self> {
        let mut mask = Self::new(width, height)?;
        mask.bits.insert_range(..);
        Ok(mask)
    }

    /// Builds a mask from row-major booleans.
    pub fn from_bools(width: usize, height: usize, values: &[bool]) -> Result<Self> {
        let mut mask = Self::new(width, height)?;
        if values.len() != width * height {
            return Err(Error::LengthMismatch {
                actual: values.len(),
                expected: width * height,
                width,
                height,
            });
        }
        for (i, _) in values.iter().enumerate().filter(|(_, v)| **v) {
            mask.bits.insert(i);
        }
        Ok(mask)
    }

    /// Builds a mask with the given linear indices set.
    pub fn from_indices(
        width: usize,
        height: usize,
        indices: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        let mut mask = Self::new(width, height)?;
        for i in indices {
            if i >= width * height {
                return Err(Error::DimensionError(format!(
                    "index {i} outside {width}x{height} mask"
                )));
            }
            mask.bits.insert(i);
        }
        Ok(mask)
    }

    /// Axis-aligned filled rectangle, clipped to the mask.
    pub fn rect(
        width: usize,
        height: usize,
        x0: usize,
        y0: usize,
        rect_w: usize,
        rect_h: usize,
    ) -> Result<Self> {
        let mut mask = Self::new(width, height)?;
        for y in y0..(y0 + rect_h).min(height) {
            let start = y * width + x0.min(width);
            let end = y * width + (x0 + rect_w).min(width);
            mask.bits.insert_range(start..end);
        }
        Ok(mask)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_clear()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits.contains(y * self.width + x)
    }

    #[inline]
    pub fn get_linear(&self, i: usize) -> bool {
        self.bits.contains(i)
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits.set(y * self.width + x, value);
    }

    /// Number of set pixels.
    pub fn area(&self) -> usize {
        self.bits.count_ones(..)
    }

    pub fn bits(&self) -> &FixedBitSet {
        &self.bits
    }

    /// Linear indices of set pixels in ascending order.
    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.ones()
    }

    pub fn intersection_area(&self, other: &Self) -> Result<usize> {
        self.check_dims(other)?;
        Ok(self.bits.intersection_count(&other.bits))
    }

    pub fn union_area(&self, other: &Self) -> Result<usize> {
        self.check_dims(other)?;
        Ok(self.bits.union_count(&other.bits))
    }

    fn check_dims(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                left: self.dims(),
                right: other.dims(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EntitySpec {
    pub id: u32,
    pub caption: String,
    pub mask: BinaryMask,
}

/// One global caption plus `N >= 0` entity captions with masks.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayoutInstruction {
    image_width: usize,
    image_height: usize,
    global_caption: String,
    entities: Vec<EntitySpec>,
}

impl LayoutInstruction {
    pub fn new(
        image_width: usize,
        image_height: usize,
        global_caption: impl Into<String>,
        entities: Vec<EntitySpec>,
    ) -> Result<Self> {
        if image_width == 0 || image_height == 0 {
            return Err(Error::InvalidInstruction(format!(
                "image dimensions must be positive, got {image_width}x{image_height}"
            )));
        }
        let mut prev = 0u32;
        for e in &entities {
            if e.id == 0 || e.id <= prev {
                return Err(Error::InvalidInstruction(format!(
                    "entity ids must be positive and strictly increasing (got {} after {prev})",
                    e.id
                )));
            }
            prev = e.id;
            if e.caption.trim().is_empty() {
                return Err(Error::InvalidInstruction(format!(
                    "entity {} has an empty caption",
                    e.id
                )));
            }
            if e.mask.dims() != (image_width, image_height) {
                return Err(Error::InvalidInstruction(format!(
                    "entity {} mask is {:?}, image is {image_width}x{image_height}",
                    e.id,
                    e.mask.dims()
                )));
            }
        }
        Ok(Self {
            image_width,
            image_height,
            global_caption: global_caption.into(),
            entities,
        })
    }

    pub fn image_width(&self) -> usize {
        self.image_width
    }

    pub fn image_height(&self) -> usize {
        self.image_height
    }

    pub fn global_caption(&self) -> &str {
        &self.global_caption
    }

    pub fn entities(&self) -> &[EntitySpec] {
        &self.entities
    }

    /// 1-based position of an entity id in the entity list.
    pub fn ordinal_of(&self, id: u32) -> Option<usize> {
        self.entities
            .binary_search_by_key(&id, |e| e.id)
            .ok()
            .map(|i| i + 1)
    }
}

/// Merged single-channel contour map with values in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayContourMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u8>,
}

impl GrayContourMap {
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.values[y * self.width + x]
    }
}

/// Three identical channels, interleaved RGB, values in {0, 255}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContourImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl ContourImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn channel(&self, c: usize) -> Vec<u8> {
        self.rgb.iter().skip(c).step_by(3).copied().collect()
    }
}

/// Decodes an uncompressed row-major run-length list (zero-run first).
pub fn decode_rle(runs: &[u64], width: usize, height: usize) -> Result<BinaryMask> {
    let mut mask = BinaryMask::new(width, height)?;
    let total = width * height;
    let sum = runs
        .iter()
        .try_fold(0usize, |acc, &r| acc.checked_add(usize::try_from(r).ok()?));
    if sum != Some(total) {
        return Err(Error::LengthMismatch {
            actual: sum.unwrap_or(usize::MAX),
            expected: total,
            width,
            height,
        });
    }
    let mut pos = 0usize;
    for (i, &run) in runs.iter().enumerate() {
        let run = run as usize;
        if i % 2 == 1 {
            mask.bits.insert_range(pos..pos + run);
        }
        pos += run;
    }
    Ok(mask)
}

/// Inverse of [`decode_rle`]. The first run counts zeros and may be 0.
pub fn encode_rle(mask: &BinaryMask) -> Vec<u64> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut count = 0u64;
    for i in 0..mask.len() {
        let bit = mask.get_linear(i);
        if bit != current {
            runs.push(count);
            count = 0;
            current = bit;
        }
        count += 1;
    }
    runs.push(count);
    runs
}

/// Inner boundary: set pixels with at least one 4-neighbour that is unset
/// or outside the image.
pub fn contour(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = mask.dims();
    let mut out = BinaryMask::new(w, h).expect("source mask has positive dims");
    for i in mask.ones() {
        let (x, y) = (i % w, i / w);
        let edge = x == 0
            || y == 0
            || x + 1 == w
            || y + 1 == h
            || !mask.get(x - 1, y)
            || !mask.get(x + 1, y)
            || !mask.get(x, y - 1)
            || !mask.get(x, y + 1);
        if edge {
            out.bits.insert(i);
        }
    }
    out
}

pub fn merge_contours(instruction: &LayoutInstruction) -> GrayContourMap {
    let (w, h) = (instruction.image_width(), instruction.image_height());
    let mut merged = FixedBitSet::with_capacity(w * h);
    for entity in instruction.entities() {
        merged.union_with(contour(&entity.mask).bits());
    }
    let values = (0..w * h).map(|i| merged.contains(i) as u8).collect();
    GrayContourMap {
        width: w,
        height: h,
        values,
    }
}

pub fn to_rgb(gray: &GrayContourMap) -> ContourImage {
    let rgb = gray
        .values
        .iter()
        .flat_map(|&v| {
            let p = v.saturating_mul(255);
            [p, p, p]
        })
        .collect();
    ContourImage {
        width: gray.width,
        height: gray.height,
        rgb,
    }
}

/// `inner ⊆ outer`; with `strict`, additionally `area(inner) < area(outer)`.
pub fn contains(outer: &BinaryMask, inner: &BinaryMask, strict: bool) -> Result<bool> {
    outer.check_dims(inner)?;
    let subset = inner.bits.is_subset(&outer.bits);
    Ok(subset && (!strict || inner.area() < outer.area()))
}

pub fn area_fraction(mask: &BinaryMask) -> f64 {
    mask.area() as f64 / mask.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block() -> BinaryMask {
        BinaryMask::from_indices(4, 4, [5, 6, 9, 10]).unwrap()
    }

    #[test]
    fn rle_examples() {
        assert!(decode_rle(&[16], 4, 4).unwrap().is_empty());
        assert_eq!(decode_rle(&[0, 16], 4, 4).unwrap().area(), 16);
        let m = decode_rle(&[5, 2, 2, 2, 5], 4, 4).unwrap();
        assert_eq!(m.ones().collect::<Vec<_>>(), vec![5, 6, 9, 10]);
        assert_eq!(m, block());
    }

    #[test]
    fn rle_length_mismatch() {
        assert!(matches!(
            decode_rle(&[5, 2], 4, 4),
            Err(Error::LengthMismatch {
                actual: 7,
                expected: 16,
                ..
            })
        ));
        assert!(decode_rle(&[17], 4, 4).is_err());
    }

    #[test]
    fn rle_encode_keeps_leading_zero_run() {
        assert_eq!(encode_rle(&BinaryMask::full(4, 4).unwrap()), vec![0, 16]);
        assert_eq!(encode_rle(&block()), vec![5, 2, 2, 2, 5]);
    }

    #[test]
    fn contour_examples() {
        assert!(contour(&BinaryMask::new(4, 4).unwrap()).is_empty());

        let ring = contour(&BinaryMask::full(4, 4).unwrap());
        assert_eq!(ring.area(), 12);
        for (x, y) in [(1, 1), (2, 1), (1, 2), (2, 2)] {
            assert!(!ring.get(x, y));
        }

        assert_eq!(contour(&block()), block());
    }

    #[test]
    fn merge_examples() {
        let empty = LayoutInstruction::new(4, 4, "a scene", vec![]).unwrap();
        assert!(merge_contours(&empty).values.iter().all(|&v| v == 0));

        let full = LayoutInstruction::new(
            4,
            4,
            "g",
            vec![EntitySpec {
                id: 1,
                caption: "e".into(),
                mask: BinaryMask::full(4, 4).unwrap(),
            }],
        )
        .unwrap();
        let gray = merge_contours(&full);
        assert_eq!(gray.values.iter().filter(|&&v| v == 1).count(), 12);

        let singles = LayoutInstruction::new(
            4,
            4,
            "g",
            vec![
                EntitySpec {
                    id: 1,
                    caption: "a".into(),
                    mask: BinaryMask::from_indices(4, 4, [0]).unwrap(),
                },
                EntitySpec {
                    id: 2,
                    caption: "b".into(),
                    mask: BinaryMask::from_indices(4, 4, [15]).unwrap(),
                },
            ],
        )
        .unwrap();
        let gray = merge_contours(&singles);
        assert_eq!(gray.get(0, 0), 1);
        assert_eq!(gray.get(3, 3), 1);
        assert_eq!(gray.values.iter().map(|&v| v as usize).sum::<usize>(), 2);
    }

    #[test]
    fn rgb_examples() {
        let gray = GrayContourMap {
            width: 2,
            height: 2,
            values: vec![0, 1, 0, 0],
        };
        let rgb = to_rgb(&gray);
        assert_eq!(rgb.pixel(1, 0), [255, 255, 255]);
        assert_eq!(rgb.pixel(0, 0), [0, 0, 0]);
        assert_eq!(rgb.channel(0), rgb.channel(2));
    }

    #[test]
    fn containment() {
        let full = BinaryMask::full(4, 4).unwrap();
        let b = block();
        assert!(contains(&b, &b, false).unwrap());
        assert!(!contains(&b, &b, true).unwrap());
        assert!(contains(&full, &b, true).unwrap());
        assert!(!contains(&b, &full, false).unwrap());
        assert!(matches!(
            contains(&full, &BinaryMask::new(3, 4).unwrap(), false),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn area_fractions() {
        assert_eq!(area_fraction(&BinaryMask::new(4, 4).unwrap()), 0.0);
        assert_eq!(area_fraction(&BinaryMask::full(4, 4).unwrap()), 1.0);
        assert_eq!(area_fraction(&block()), 0.25);
    }

    #[test]
    fn instruction_validation() {
        let m = BinaryMask::full(2, 2).unwrap();
        let e = |id, caption: &str| EntitySpec {
            id,
            caption: caption.into(),
            mask: m.clone(),
        };
        assert!(LayoutInstruction::new(2, 2, "g", vec![e(2, "a"), e(1, "b")]).is_err());
        assert!(LayoutInstruction::new(2, 2, "g", vec![e(1, " ")]).is_err());
        assert!(LayoutInstruction::new(3, 2, "g", vec![e(1, "a")]).is_err());
        assert!(LayoutInstruction::new(2, 2, "g", vec![e(0, "a")]).is_err());
        let ok = LayoutInstruction::new(2, 2, "g", vec![e(3, "a"), e(7, "b")]).unwrap();
        assert_eq!(ok.ordinal_of(7), Some(2));
        assert_eq!(ok.ordinal_of(4), None);
    }

    #[test]
    fn zero_sized_masks_rejected() {
        assert!(BinaryMask::new(0, 3).is_err());
        assert!(BinaryMask::full(3, 0).is_err());
    }
}
