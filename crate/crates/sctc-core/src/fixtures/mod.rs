//! Scene fixtures: the on-disk format standing in for detector and text-encoder
//! outputs, plus deterministic synthetic dataset generation.
//!
//! A scene file is one JSON metadata document (boxes, categories, ground-truth
//! triplets, tensor manifest) immediately followed by the referenced tensor
//! blobs (see [`blob`]). The vocabulary file is JSON plus one embedding blob.

pub mod blob;
pub mod synth;

use crate::error::{Error, Result};
use crate::tape::Tensor;
use blob::{BlobReader, Dtype};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub use synth::{generate_dataset, DatasetConfig};

/// Object category index reserved for people.
pub const PERSON_CATEGORY: usize = 0;

// ─── Geometry ────────────────────────────────────────────────────────────

/// Axis-aligned box in pixels, corners (x1, y1) top-left, (x2, y2) bottom-right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        w.max(0.0) * h.max(0.0)
    }

    /// Smallest box containing both.
    pub fn union_box(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    fn inside(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

// ─── Detections and scenes ───────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    /// Object-class index in [0, C_o); 0 is "person".
    pub category: usize,
    /// Detector confidence in [0, 1].
    pub score: f64,
    pub appearance: Vec<f64>,
}

impl Detection {
    pub fn is_human(&self) -> bool {
        self.category == PERSON_CATEGORY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtTriplet {
    pub human_box: BoundingBox,
    pub object_box: BoundingBox,
    pub object_category: usize,
    /// Non-empty set of action indices in [0, C_a).
    pub actions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub width: f64,
    pub height: f64,
    pub detections: Vec<Detection>,
    /// Backbone stand-in, shape [Hf, Wf, d_map].
    pub feature_map: Tensor,
    pub gt_triplets: Vec<GtTriplet>,
}

impl Scene {
    /// Structural invariants that hold independent of any vocabulary.
    pub fn validate_structure(&self) -> Result<()> {
        for (i, d) in self.detections.iter().enumerate() {
            if !d.bbox.is_valid() {
                return Err(Error::Validation(format!(
                    "scene {}: detection {i} has degenerate box {:?}",
                    self.id, d.bbox
                )));
            }
            if !d.bbox.inside(self.width, self.height) {
                return Err(Error::Validation(format!(
                    "scene {}: detection {i} outside the image",
                    self.id
                )));
            }
            if !(0.0..=1.0).contains(&d.score) {
                return Err(Error::Validation(format!(
                    "scene {}: detection {i} score {} outside [0,1]",
                    self.id, d.score
                )));
            }
        }
        let d_app = self.detections.first().map(|d| d.appearance.len());
        if let Some(d_app) = d_app {
            if self.detections.iter().any(|d| d.appearance.len() != d_app) {
                return Err(Error::Validation(format!(
                    "scene {}: inconsistent appearance widths",
                    self.id
                )));
            }
        }
        for (i, t) in self.gt_triplets.iter().enumerate() {
            for (name, b) in [("human", &t.human_box), ("object", &t.object_box)] {
                if !b.is_valid() || !b.inside(self.width, self.height) {
                    return Err(Error::Validation(format!(
                        "scene {}: gt triplet {i} {name} box invalid",
                        self.id
                    )));
                }
            }
            if t.actions.is_empty() {
                return Err(Error::Validation(format!(
                    "scene {}: gt triplet {i} has an empty action set",
                    self.id
                )));
            }
        }
        if self.feature_map.rank() != 3 {
            return Err(Error::Validation(format!(
                "scene {}: feature map rank {} (want 3)",
                self.id,
                self.feature_map.rank()
            )));
        }
        Ok(())
    }

    /// Category/action ranges against a vocabulary.
    pub fn validate_against(&self, vocab: &HoiVocabulary) -> Result<()> {
        self.validate_structure()?;
        for d in &self.detections {
            if d.category >= vocab.num_objects {
                return Err(Error::Validation(format!(
                    "scene {}: category {} out of range",
                    self.id, d.category
                )));
            }
        }
        for t in &self.gt_triplets {
            if t.object_category >= vocab.num_objects {
                return Err(Error::Validation(format!(
                    "scene {}: gt object category {} out of range",
                    self.id, t.object_category
                )));
            }
            for &a in &t.actions {
                if vocab.hoi_index(a, t.object_category).is_none() {
                    return Err(Error::Vocab(format!(
                        "scene {}: gt action {a} on category {} has no HOI row",
                        self.id, t.object_category
                    )));
                }
            }
        }
        Ok(())
    }
}

// ─── Vocabulary ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoiCategory {
    pub action: usize,
    pub object: usize,
    pub rare: bool,
}

/// HOI label space plus a fixed text-embedding table: one row per HOI
/// category followed by one "no interaction with [object]" row per object.
#[derive(Debug, Clone, PartialEq)]
pub struct HoiVocabulary {
    pub num_objects: usize,
    pub num_actions: usize,
    pub categories: Vec<HoiCategory>,
    /// [num_hoi + num_objects, d_f], rows unit-norm.
    pub text_embeddings: Tensor,
}

impl HoiVocabulary {
    pub fn num_hoi(&self) -> usize {
        self.categories.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.text_embeddings.shape[1]
    }

    /// Row index of the (action, object) HOI category, if valid.
    pub fn hoi_index(&self, action: usize, object: usize) -> Option<usize> {
        self.categories
            .iter()
            .position(|c| c.action == action && c.object == object)
    }

    pub fn embedding_row(&self, row: usize) -> &[f64] {
        let d = self.embedding_dim();
        &self.text_embeddings.data[row * d..(row + 1) * d]
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::Validation("vocabulary has no HOI categories".into()));
        }
        let rows = self.num_hoi() + self.num_objects;
        if self.text_embeddings.shape.len() != 2 || self.text_embeddings.shape[0] != rows {
            return Err(Error::Validation(format!(
                "embedding table shape {:?}, expected [{rows}, d]",
                self.text_embeddings.shape
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.categories {
            if c.action >= self.num_actions || c.object >= self.num_objects {
                return Err(Error::Validation(format!(
                    "HOI category ({}, {}) out of range",
                    c.action, c.object
                )));
            }
            if !seen.insert((c.action, c.object)) {
                return Err(Error::Validation(format!(
                    "duplicate HOI category ({}, {})",
                    c.action, c.object
                )));
            }
        }
        for r in 0..rows {
            let norm: f64 = self.embedding_row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-3 {
                return Err(Error::Validation(format!(
                    "embedding row {r} has norm {norm:.6}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

// ─── File formats ────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct TensorManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct DetectionMeta {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    category: usize,
    score: f64,
}

#[derive(Serialize, Deserialize)]
struct SceneMeta {
    id: String,
    width: f64,
    height: f64,
    detections: Vec<DetectionMeta>,
    gt_triplets: Vec<GtTriplet>,
    tensors: Vec<TensorManifestEntry>,
}

fn encode_json_head<T: Serialize>(meta: &T) -> Vec<u8> {
    serde_json::to_vec(meta).expect("metadata serializes")
}

/// Parse one JSON document from the front of `buf`, returning it plus the
/// byte offset where the binary section begins.
fn decode_json_head<'de, T: Deserialize<'de>>(buf: &'de [u8]) -> Result<(T, usize)> {
    let mut iter = serde_json::Deserializer::from_slice(buf).into_iter::<T>();
    match iter.next() {
        Some(Ok(v)) => Ok((v, iter.byte_offset())),
        Some(Err(e)) => Err(Error::Parse {
            offset: e.column().saturating_sub(1),
            msg: format!("bad JSON header: {e}"),
        }),
        None => Err(Error::Parse { offset: 0, msg: "empty file".into() }),
    }
}

pub fn scene_to_bytes(scene: &Scene) -> Vec<u8> {
    let d_app = scene.detections.first().map_or(0, |d| d.appearance.len());
    let mut appearance = Tensor::zeros(&[scene.detections.len(), d_app]);
    for (i, d) in scene.detections.iter().enumerate() {
        appearance.data[i * d_app..(i + 1) * d_app].copy_from_slice(&d.appearance);
    }
    let meta = SceneMeta {
        id: scene.id.clone(),
        width: scene.width,
        height: scene.height,
        detections: scene
            .detections
            .iter()
            .map(|d| DetectionMeta {
                bbox: [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2],
                category: d.category,
                score: d.score,
            })
            .collect(),
        gt_triplets: scene.gt_triplets.clone(),
        tensors: vec![
            TensorManifestEntry { name: "appearance".into(), shape: appearance.shape.clone() },
            TensorManifestEntry {
                name: "feature_map".into(),
                shape: scene.feature_map.shape.clone(),
            },
        ],
    };
    let mut out = encode_json_head(&meta);
    blob::write_blob(&mut out, &appearance, Dtype::F32);
    blob::write_blob(&mut out, &scene.feature_map, Dtype::F32);
    out
}

pub fn scene_from_bytes(buf: &[u8]) -> Result<Scene> {
    let (meta, offset) = decode_json_head::<SceneMeta>(buf)?;
    let mut reader = BlobReader::new(buf, offset);
    let mut tensors = Vec::new();
    for entry in &meta.tensors {
        let t = reader.read_blob(&entry.name, Some(Dtype::F32))?;
        if t.shape != entry.shape {
            return Err(Error::Parse {
                offset: reader.pos(),
                msg: format!(
                    "tensor '{}' shape {:?} disagrees with manifest {:?}",
                    entry.name, t.shape, entry.shape
                ),
            });
        }
        tensors.push((entry.name.clone(), t));
    }
    let appearance = tensors
        .iter()
        .find(|(n, _)| n == "appearance")
        .ok_or_else(|| Error::Parse { offset, msg: "missing 'appearance' tensor".into() })?
        .1
        .clone();
    let feature_map = tensors
        .iter()
        .find(|(n, _)| n == "feature_map")
        .ok_or_else(|| Error::Parse { offset, msg: "missing 'feature_map' tensor".into() })?
        .1
        .clone();
    let d_app = if appearance.shape.len() == 2 { appearance.shape[1] } else { 0 };
    if appearance.shape.len() != 2 || appearance.shape[0] != meta.detections.len() {
        return Err(Error::Parse {
            offset,
            msg: format!(
                "appearance tensor shape {:?} for {} detections",
                appearance.shape,
                meta.detections.len()
            ),
        });
    }
    let detections = meta
        .detections
        .iter()
        .enumerate()
        .map(|(i, d)| Detection {
            bbox: BoundingBox::new(d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3]),
            category: d.category,
            score: d.score,
            appearance: appearance.data[i * d_app..(i + 1) * d_app].to_vec(),
        })
        .collect();
    let scene = Scene {
        id: meta.id,
        width: meta.width,
        height: meta.height,
        detections,
        feature_map,
        gt_triplets: meta.gt_triplets,
    };
    scene.validate_structure()?;
    Ok(scene)
}

pub fn save_scene(path: &Path, scene: &Scene) -> Result<()> {
    std::fs::write(path, scene_to_bytes(scene))?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let buf = std::fs::read(path)?;
    scene_from_bytes(&buf)
}

#[derive(Serialize, Deserialize)]
struct VocabMeta {
    num_objects: usize,
    num_actions: usize,
    categories: Vec<HoiCategory>,
    tensors: Vec<TensorManifestEntry>,
}

pub fn vocab_to_bytes(vocab: &HoiVocabulary) -> Vec<u8> {
    let meta = VocabMeta {
        num_objects: vocab.num_objects,
        num_actions: vocab.num_actions,
        categories: vocab.categories.clone(),
        tensors: vec![TensorManifestEntry {
            name: "text_embeddings".into(),
            shape: vocab.text_embeddings.shape.clone(),
        }],
    };
    let mut out = encode_json_head(&meta);
    blob::write_blob(&mut out, &vocab.text_embeddings, Dtype::F32);
    out
}

pub fn vocab_from_bytes(buf: &[u8]) -> Result<HoiVocabulary> {
    let (meta, offset) = decode_json_head::<VocabMeta>(buf)?;
    let mut reader = BlobReader::new(buf, offset);
    let text_embeddings = reader.read_blob("text_embeddings", Some(Dtype::F32))?;
    let vocab = HoiVocabulary {
        num_objects: meta.num_objects,
        num_actions: meta.num_actions,
        categories: meta.categories,
        text_embeddings,
    };
    vocab.validate()?;
    Ok(vocab)
}

pub fn save_vocab(path: &Path, vocab: &HoiVocabulary) -> Result<()> {
    std::fs::write(path, vocab_to_bytes(vocab))?;
    Ok(())
}

pub fn load_vocab(path: &Path) -> Result<HoiVocabulary> {
    let buf = std::fs::read(path)?;
    vocab_from_bytes(&buf)
}

// ─── Dataset on disk ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: HoiVocabulary,
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub num_hoi: usize,
    pub gt_triplet_count: usize,
    pub config: synth::DatasetConfig,
}

pub fn save_dataset(dir: &Path, dataset: &Dataset, config: &synth::DatasetConfig) -> Result<()> {
    std::fs::create_dir_all(dir.join("train"))?;
    std::fs::create_dir_all(dir.join("test"))?;
    save_vocab(&dir.join("vocab.sctc"), &dataset.vocab)?;
    for (split, scenes) in [("train", &dataset.train), ("test", &dataset.test)] {
        for (i, scene) in scenes.iter().enumerate() {
            save_scene(&dir.join(split).join(format!("scene_{i:05}.sctc")), scene)?;
        }
    }
    let manifest = DatasetManifest {
        train_scenes: dataset.train.len(),
        test_scenes: dataset.test.len(),
        num_hoi: dataset.vocab.num_hoi(),
        gt_triplet_count: dataset
            .train
            .iter()
            .chain(&dataset.test)
            .map(|s| s.gt_triplets.len())
            .sum(),
        config: config.clone(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let buf = std::fs::read(dir.join("manifest.json"))?;
    serde_json::from_slice(&buf).map_err(|e| Error::Parse {
        offset: 0,
        msg: format!("bad dataset manifest: {e}"),
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let vocab = load_vocab(&dir.join("vocab.sctc"))?;
    let mut splits = Vec::new();
    for (split, count) in [("train", manifest.train_scenes), ("test", manifest.test_scenes)] {
        let mut scenes = Vec::with_capacity(count);
        for i in 0..count {
            let scene = load_scene(&dir.join(split).join(format!("scene_{i:05}.sctc")))?;
            scene.validate_against(&vocab)?;
            scenes.push(scene);
        }
        splits.push(scenes);
    }
    let test = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(Dataset { vocab, train, test })
}
