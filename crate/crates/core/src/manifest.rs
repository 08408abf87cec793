//! JSON manifests.
//!
//! A manifest is either a single record object or an array of them:
//!
//! ```json
//! {
//!   "image_id": "sa_1",
//!   "width": 4, "height": 4,
//!   "aesthetic_score": 5.4,
//!   "global_caption": "a street at dusk",
//!   "entities": [
//!     { "id": 1, "caption": "a red car", "mask": { "rle": [5, 2, 2, 2, 5] } },
//!     { "id": 2, "caption": "a lamp",    "mask": { "label_png": "labels/sa_1.png" } }
//!   ]
//! }
//! ```
//!
//! `rle` is an uncompressed row-major run list starting with a zero-run.
//! `label_png` points (relative to the manifest) at a 16-bit grayscale PNG
//! whose pixel values are entity ids, 0 for background. Masks are always
//! written back as `rle`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{decode_rle, encode_rle, BinaryMask, EntitySpec, LayoutInstruction};

/// One image's manifest entry.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub image_id: String,
    pub aesthetic_score: Option<f64>,
    pub instruction: LayoutInstruction,
}

impl DatasetRecord {
    pub fn width(&self) -> usize {
        self.instruction.image_width()
    }

    pub fn height(&self) -> usize {
        self.instruction.image_height()
    }

    pub fn entities(&self) -> &[EntitySpec] {
        self.instruction.entities()
    }

    /// Copy of this record keeping only the listed entity ids.
    pub fn retain_entities(&self, ids: &[u32]) -> Self {
        let entities = self
            .entities()
            .iter()
            .filter(|e| ids.contains(&e.id))
            .cloned()
            .collect();
        let instruction = LayoutInstruction::new(
            self.width(),
            self.height(),
            self.instruction.global_caption(),
            entities,
        )
        .expect("a subset of a valid instruction is valid");
        Self {
            image_id: self.image_id.clone(),
            aesthetic_score: self.aesthetic_score,
            instruction,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    image_id: String,
    width: usize,
    height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aesthetic_score: Option<f64>,
    global_caption: String,
    #[serde(default)]
    entities: Vec<RawEntity>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntity {
    id: u32,
    caption: String,
    mask: RawMask,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum RawMask {
    Rle { rle: Vec<u64> },
    LabelPng { label_png: String },
}

/// Loads label PNGs on first use, keyed by resolved path.
#[derive(Default)]
struct LabelCache {
    maps: HashMap<PathBuf, (usize, usize, Vec<u16>)>,
}

impl LabelCache {
    fn get(&mut self, path: PathBuf) -> Result<&(usize, usize, Vec<u16>), String> {
        if !self.maps.contains_key(&path) {
            let loaded = read_label_png(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            self.maps.insert(path.clone(), loaded);
        }
        Ok(&self.maps[&path])
    }
}

/// Reads a single-channel PNG as raw entity ids (8-bit values are widened,
/// not rescaled).
pub fn read_label_png(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = match img {
        image::DynamicImage::ImageLuma16(buf) => buf.into_raw(),
        image::DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(u16::from).collect(),
        other => {
            return Err(Error::DimensionError(format!(
                "label map must be single-channel grayscale, got {:?}",
                other.color()
            )))
        }
    };
    Ok((w, h, values))
}

fn resolve_record(
    raw: RawRecord,
    base_dir: Option<&Path>,
    labels: &mut LabelCache,
) -> Result<DatasetRecord, String> {
    let (w, h) = (raw.width, raw.height);
    let mut entities = Vec::with_capacity(raw.entities.len());
    for e in raw.entities {
        let mask = match e.mask {
            RawMask::Rle { rle } => {
                decode_rle(&rle, w, h).map_err(|err| format!("entity {}: {err}", e.id))?
            }
            RawMask::LabelPng { label_png } => {
                let path = match base_dir {
                    Some(dir) => dir.join(&label_png),
                    None => PathBuf::from(&label_png),
                };
                let (lw, lh, values) = labels.get(path)?;
                if (*lw, *lh) != (w, h) {
                    return Err(format!(
                        "entity {}: label map is {lw}x{lh}, record is {w}x{h}",
                        e.id
                    ));
                }
                let id = u16::try_from(e.id)
                    .map_err(|_| format!("entity id {} does not fit a 16-bit label map", e.id))?;
                BinaryMask::from_indices(
                    w,
                    h,
                    values
                        .iter()
                        .enumerate()
                        .filter(|(_, &v)| v == id)
                        .map(|(i, _)| i),
                )
                .map_err(|err| err.to_string())?
            }
        };
        entities.push(EntitySpec {
            id: e.id,
            caption: e.caption,
            mask,
        });
    }
    let instruction =
        LayoutInstruction::new(w, h, raw.global_caption, entities).map_err(|e| e.to_string())?;
    Ok(DatasetRecord {
        image_id: raw.image_id,
        aesthetic_score: raw.aesthetic_score,
        instruction,
    })
}

/// Parses manifest JSON. Relative `label_png` paths resolve against `base_dir`.
pub fn parse_manifest(json: &str, base_dir: Option<&Path>) -> Result<Vec<DatasetRecord>> {
    parse_inner(json, base_dir).map_err(|reason| Error::ManifestParse { path: None, reason })
}

fn parse_inner(json: &str, base_dir: Option<&Path>) -> Result<Vec<DatasetRecord>, String> {
    let value: serde_json::Value = serde_json::from_str(json).map_err(|e| e.to_string())?;
    let raws: Vec<RawRecord> = match value {
        serde_json::Value::Array(items) => items
            .into_iter()
            .enumerate()
            .map(|(i, v)| serde_json::from_value(v).map_err(|e| format!("record {i}: {e}")))
            .collect::<Result<_, _>>()?,
        other => vec![serde_json::from_value(other).map_err(|e| format!("record 0: {e}"))?],
    };
    let mut labels = LabelCache::default();
    raws.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let id = r.image_id.clone();
            resolve_record(r, base_dir, &mut labels)
                .map_err(|e| format!("record {i} (`{id}`): {e}"))
        })
        .collect()
}

pub fn load_manifest(path: &Path) -> Result<Vec<DatasetRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::ManifestParse {
        path: Some(path.to_path_buf()),
        reason: e.to_string(),
    })?;
    parse_inner(&text, path.parent()).map_err(|reason| Error::ManifestParse {
        path: Some(path.to_path_buf()),
        reason,
    })
}

fn to_raw(rec: &DatasetRecord) -> RawRecord {
    RawRecord {
        image_id: rec.image_id.clone(),
        width: rec.width(),
        height: rec.height(),
        aesthetic_score: rec.aesthetic_score,
        global_caption: rec.instruction.global_caption().to_owned(),
        entities: rec
            .entities()
            .iter()
            .map(|e| RawEntity {
                id: e.id,
                caption: e.caption.clone(),
                mask: RawMask::Rle {
                    rle: encode_rle(&e.mask),
                },
            })
            .collect(),
    }
}

/// Serializes records as a pretty-printed JSON array with RLE masks.
pub fn manifest_to_json(records: &[DatasetRecord]) -> String {
    let raws: Vec<RawRecord> = records.iter().map(to_raw).collect();
    serde_json::to_string_pretty(&raws).expect("manifest records always serialize")
}

pub fn write_manifest(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut json = manifest_to_json(records);
    json.push('\n');
    std::fs::write(path, json)?;
    Ok(())
}
