#![allow(dead_code)]

use maskcond_core::{BinaryMask, EntitySpec, LayoutInstruction, TokenEntityMap};
use proptest::prelude::*;

/// Ordinal token grid plus caption lengths, the raw input of a token layout.
#[derive(Debug, Clone)]
pub struct RawLayout {
    pub tokens: TokenEntityMap,
    pub caption_lengths: Vec<usize>,
}

impl RawLayout {
    pub fn entities(&self) -> usize {
        self.caption_lengths.len() - 1
    }
}

/// N <= 5 entities, grid up to 8x8, captions of 1..=6 tokens.
pub fn raw_layout() -> impl Strategy<Value = RawLayout> {
    (0usize..=5, 1usize..=8, 1usize..=8).prop_flat_map(|(n, rows, cols)| {
        (
            prop::collection::vec(0..=n as u32, rows * cols),
            prop::collection::vec(1usize..=6, n + 1),
        )
            .prop_map(move |(labels, caption_lengths)| RawLayout {
                tokens: TokenEntityMap { rows, cols, labels },
                caption_lengths,
            })
    })
}

pub fn mask(max_w: usize, max_h: usize) -> impl Strategy<Value = BinaryMask> {
    (1..=max_w, 1..=max_h).prop_flat_map(|(w, h)| {
        prop::collection::vec(any::<bool>(), w * h)
            .prop_map(move |bits| BinaryMask::from_bools(w, h, &bits).unwrap())
    })
}

pub fn mask_pair(max_w: usize, max_h: usize) -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1..=max_w, 1..=max_h).prop_flat_map(|(w, h)| {
        (
            prop::collection::vec(any::<bool>(), w * h),
            prop::collection::vec(any::<bool>(), w * h),
        )
            .prop_map(move |(a, b)| {
                (
                    BinaryMask::from_bools(w, h, &a).unwrap(),
                    BinaryMask::from_bools(w, h, &b).unwrap(),
                )
            })
    })
}

/// Instruction with up to `max_n` random (possibly overlapping) entities.
pub fn instruction(max_n: usize, max_side: usize) -> impl Strategy<Value = LayoutInstruction> {
    (1..=max_side, 1..=max_side, 0..=max_n).prop_flat_map(|(w, h, n)| {
        prop::collection::vec(prop::collection::vec(any::<bool>(), w * h), n).prop_map(
            move |masks| {
                let entities = masks
                    .iter()
                    .enumerate()
                    .map(|(i, bits)| EntitySpec {
                        id: i as u32 + 1,
                        caption: format!("thing {i}"),
                        mask: BinaryMask::from_bools(w, h, bits).unwrap(),
                    })
                    .collect();
                LayoutInstruction::new(w, h, "a scene", entities).unwrap()
            },
        )
    })
}
