//! Deterministic inputs shared by the benchmarks.

use maskcond_core::{BinaryMask, EntitySpec, LayoutInstruction};

/// `n` overlapping rectangles laid out on a diagonal band of a `w x h` image.
pub fn scene(w: usize, h: usize, n: usize) -> LayoutInstruction {
    let entities = (0..n)
        .map(|i| {
            let x0 = i * w / (n + 1);
            let y0 = (n - i) * h / (n + 2);
            EntitySpec {
                id: i as u32 + 1,
                caption: format!("object {i} with a short description"),
                mask: BinaryMask::rect(w, h, x0, y0, w / 3, h / 4).expect("positive dims"),
            }
        })
        .collect();
    LayoutInstruction::new(w, h, "a busy street seen from above", entities).expect("valid scene")
}
