mod common;

use maskcond_core::{
    assign_labels, build_token_layout, patchify_labels, tokenize_instruction, BinaryMask,
    EntitySpec, LabelMap, LayoutInstruction, TokenRole,
};
use proptest::prelude::*;

fn label_map(max_side: usize, max_label: u32) -> impl Strategy<Value = LabelMap> {
    (1..=max_side, 1..=max_side).prop_flat_map(move |(width, height)| {
        prop::collection::vec(0..=max_label, width * height).prop_map(move |labels| LabelMap {
            width,
            height,
            labels,
        })
    })
}

/// Disjoint entities: each pixel gets at most one owner.
fn disjoint_instruction() -> impl Strategy<Value = (LayoutInstruction, Vec<u32>)> {
    (2usize..=24, 2usize..=24, 1usize..=4).prop_flat_map(|(w, h, n)| {
        prop::collection::vec(0..=n as u32, w * h).prop_map(move |owner| {
            let entities = (1..=n as u32)
                .map(|id| EntitySpec {
                    id,
                    caption: format!("entity {id}"),
                    mask: BinaryMask::from_indices(
                        w,
                        h,
                        owner
                            .iter()
                            .enumerate()
                            .filter(|(_, &o)| o == id)
                            .map(|(i, _)| i),
                    )
                    .unwrap(),
                })
                .collect();
            (
                LayoutInstruction::new(w, h, "scene", entities).unwrap(),
                owner,
            )
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn image_sets_partition_the_grid(instr in common::instruction(5, 20), f in 1usize..6) {
        let toks = tokenize_instruction(&instr, f, 77).unwrap();
        let layout = &toks.layout;
        let lt = layout.l_text();
        let mut seen = vec![0usize; layout.l_img()];
        for set in layout.image_sets() {
            for &k in set {
                prop_assert!(k >= lt && k < lt + layout.l_img());
                seen[k - lt] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        // text ranges tile [0, L_text) in order
        let mut next = 0;
        for r in layout.text_sets() {
            prop_assert_eq!(r.start, next);
            next = r.end;
        }
        prop_assert_eq!(next, lt);
    }

    #[test]
    fn unit_patch_is_identity(labels in label_map(16, 6)) {
        let t = patchify_labels(&labels, 1).unwrap();
        prop_assert_eq!((t.rows, t.cols), (labels.height, labels.width));
        prop_assert_eq!(t.labels, labels.labels);
    }

    #[test]
    fn patch_labels_match_plurality_oracle(labels in label_map(20, 4), f in 1usize..7) {
        let t = patchify_labels(&labels, f).unwrap();
        for r in 0..t.rows {
            for c in 0..t.cols {
                let mut counts = [0usize; 5];
                for y in r * f..((r + 1) * f).min(labels.height) {
                    for x in c * f..((c + 1) * f).min(labels.width) {
                        counts[labels.get(x, y) as usize] += 1;
                    }
                }
                let best = *counts.iter().max().unwrap();
                let expected = counts.iter().position(|&n| n == best).unwrap() as u32;
                prop_assert_eq!(t.get(r, c), expected);
            }
        }
    }

    /// Moving pixels away from a label never lets it win a new patch.
    #[test]
    fn removing_pixels_never_grows_a_label(
        labels in label_map(20, 4),
        target in 0u32..=4,
        f in 1usize..6,
        seed in prop::collection::vec((any::<bool>(), 0u32..=4), 400),
    ) {
        let mut shrunk = labels.clone();
        for (i, l) in shrunk.labels.iter_mut().enumerate() {
            let (drop, to) = seed[i];
            if *l == target && drop && to != target {
                *l = to;
            }
        }
        let before = patchify_labels(&labels, f).unwrap();
        let after = patchify_labels(&shrunk, f).unwrap();
        for (b, a) in before.labels.iter().zip(&after.labels) {
            if *a == target {
                prop_assert_eq!(*b, target);
            }
        }
    }

    #[test]
    fn shrinking_an_entity_never_grows_its_tokens(
        (instr, owner) in disjoint_instruction(),
        keep in prop::collection::vec(any::<bool>(), 576),
        f in 1usize..6,
    ) {
        let w = instr.image_width();
        let h = instr.image_height();
        let target = 1u32;
        let shrunk_mask = BinaryMask::from_indices(
            w,
            h,
            owner.iter().enumerate().filter(|(i, &o)| o == target && keep[*i]).map(|(i, _)| i),
        )
        .unwrap();
        let mut entities = instr.entities().to_vec();
        entities[0].mask = shrunk_mask;
        let shrunk = LayoutInstruction::new(w, h, "scene", entities).unwrap();

        let before = tokenize_instruction(&instr, f, 77).unwrap();
        let after = tokenize_instruction(&shrunk, f, 77).unwrap();
        let set = |t: &maskcond_core::InstructionTokens| -> Vec<usize> {
            let lt = t.layout.l_text();
            t.layout.image_sets()[1].iter().map(|k| k - lt).collect()
        };
        let (b, a) = (set(&before), set(&after));
        prop_assert!(a.iter().all(|k| b.contains(k)), "{:?} not within {:?}", a, b);
    }

    #[test]
    fn smallest_entity_owns_overlaps(instr in common::instruction(5, 12)) {
        let labels = assign_labels(&instr);
        for y in 0..instr.image_height() {
            for x in 0..instr.image_width() {
                let owner = instr
                    .entities()
                    .iter()
                    .filter(|e| e.mask.get(x, y))
                    .min_by_key(|e| (e.mask.area(), e.id))
                    .map_or(0, |e| e.id);
                prop_assert_eq!(labels.get(x, y), owner);
            }
        }
    }

    #[test]
    fn roles_agree_with_sets(raw in common::raw_layout()) {
        let layout = build_token_layout(&raw.tokens, &raw.caption_lengths).unwrap();
        for (i, r) in layout.text_sets().iter().enumerate() {
            for t in r.clone() {
                prop_assert_eq!(layout.role(t), TokenRole::Text(i));
            }
        }
        for (i, s) in layout.image_sets().iter().enumerate() {
            for &t in s {
                prop_assert_eq!(layout.role(t), TokenRole::Image(i));
            }
        }
        prop_assert_eq!(layout.entity_count(), raw.entities());
    }
}
