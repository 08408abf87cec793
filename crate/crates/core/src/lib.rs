//! Layout conditioning for multimodal diffusion transformers.
//!
//! Segmentation masks become two conditioning signals: boolean attention
//! masks that bind each entity's caption to its latent image tokens, and a
//! sparse entity contour map that is encoded into condition tokens, filtered
//! of all-zero tokens, and weighted in attention through a `log(gamma)`
//! bias. The crate also carries the dataset filters and the evaluation
//! helpers (class-agnostic mIoU and an attention MAC model).

pub mod attention;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod layout;
pub mod manifest;
pub mod masks;
pub mod pipeline;
pub mod render;
pub mod shape;
pub mod tokens;

pub use attention::{
    block_forward, masked_attention, masked_attention_with_weights, merge_lora, rope_2d,
    rope_2d_heads, AttentionOutput, BlockOutput, Branch, BranchLora, BranchParams, LoraAdapter,
    LoraInit, ProjectionSet, SeededNormal, TokenMatrix, MASK_SENTINEL,
};
pub use error::{Error, Result};
pub use eval::{
    attention_macs, citf_report, class_agnostic_miou, entity_iou, pair_records, score_pairs,
    CitfReport, CostProfile, CostSetting, EntityScore, MaskPair, MaskPairSet, MiouReport,
};
pub use layout::{
    area_fraction, contains, contour, decode_rle, encode_rle, merge_contours, to_rgb, BinaryMask,
    ContourImage, EntitySpec, GrayContourMap, LayoutInstruction,
};
pub use manifest::{
    load_manifest, manifest_to_json, parse_manifest, write_manifest, DatasetRecord,
};
pub use masks::{
    build_aia, build_mask, build_saa, check_reachability, extend_with_condition, make_schedule,
    AttentionMask, LayerSchedule, MaskCache, MaskKind, ValidationReport,
};
pub use pipeline::{
    filter_image, filter_masks, filter_record, run_pipeline, FilterConfig, FilterReport,
    FilterStage, PipelineOutput, PipelineSummary, RecordReport,
};
pub use shape::{
    build_bias, encode_contour, filter_tokens, filter_tokens_with_threshold, BiasMatrix,
    ConditionTokens, DEFAULT_GAMMA, SCRIBBLE_GAMMA,
};
pub use tokens::{
    assign_labels, build_token_layout, caption_token_count, patchify_labels, tokenize_instruction,
    InstructionTokens, LabelMap, TokenEntityMap, TokenLayout, TokenRole,
    DEFAULT_MAX_CAPTION_TOKENS,
};
