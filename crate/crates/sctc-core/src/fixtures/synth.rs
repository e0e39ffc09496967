//! Deterministic synthetic datasets with exactly known ground truth.
//!
//! Appearance vectors are class-and-action-conditioned Gaussian clusters,
//! the feature map carries coarse action cues at interacting locations, and
//! interacting boxes are spatially correlated. A configurable fraction of
//! scenes contains a second triplet sharing the primary human or object, and
//! some scenes add a "degraded" triplet whose action cues are dropped from
//! every input tensor — its action is only recoverable from a clean triplet
//! elsewhere in the scene that shares its object category and action.

use super::{
    BoundingBox, Dataset, Detection, GtTriplet, HoiCategory, HoiVocabulary, Scene,
    PERSON_CATEGORY,
};
use crate::error::{Error, Result};
use crate::fixtures::blob::quantize_f32;
use crate::tape::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train_scenes: usize,
    pub test_scenes: usize,
    /// Object categories including "person" at index 0. Must be >= 2.
    pub num_objects: usize,
    pub num_actions: usize,
    /// Valid actions drawn per non-person object category.
    pub actions_per_object: usize,
    /// Square image side in pixels.
    pub image_size: f64,
    pub d_app: usize,
    pub d_map: usize,
    /// Feature map is map_hw x map_hw cells.
    pub map_hw: usize,
    /// Text-embedding width (also the interaction-feature width downstream).
    pub d_f: usize,
    pub appearance_noise: f64,
    pub map_noise: f64,
    /// Minimum IoU between a detection and its ground-truth box.
    pub jitter_iou: f64,
    /// Fraction of scenes containing a triplet pair that shares an instance.
    pub shared_frac: f64,
    /// Probability of adding a cue-degraded triplet (correlated by category
    /// and action with the primary triplet).
    pub degrade_prob: f64,
    /// Probability of an unrelated second triplet in non-shared scenes.
    pub independent_frac: f64,
    /// Expected number of non-interacting distractor detections per scene.
    pub distractor_rate: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            train_scenes: 200,
            test_scenes: 50,
            num_objects: 6,
            num_actions: 6,
            actions_per_object: 3,
            image_size: 128.0,
            d_app: 32,
            d_map: 64,
            map_hw: 8,
            d_f: 64,
            appearance_noise: 0.35,
            map_noise: 0.35,
            jitter_iou: 0.7,
            shared_frac: 0.5,
            degrade_prob: 0.3,
            independent_frac: 0.35,
            distractor_rate: 1.0,
        }
    }
}

impl DatasetConfig {
    fn validate(&self) -> Result<()> {
        if self.train_scenes == 0 || self.test_scenes == 0 {
            return Err(Error::Config(format!(
                "degenerate split: {} train / {} test scenes",
                self.train_scenes, self.test_scenes
            )));
        }
        if self.num_objects < 2 {
            return Err(Error::Config("need person plus at least one object".into()));
        }
        if self.num_actions < 2 {
            return Err(Error::Config("need at least two actions".into()));
        }
        if self.actions_per_object == 0 {
            return Err(Error::Config("empty HOI table".into()));
        }
        if !(0.0..=1.0).contains(&self.shared_frac)
            || !(0.0..=1.0).contains(&self.degrade_prob)
        {
            return Err(Error::Config("fractions must be in [0,1]".into()));
        }
        Ok(())
    }
}

// ─── Seed derivation ─────────────────────────────────────────────────────

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(seed ^ tag) ^ index))
}

const TAG_VOCAB: u64 = 0x56_4F_43;
const TAG_CLUSTER: u64 = 0x43_4C_55;
const TAG_SCENE: u64 = 0x53_43_4E;

fn normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn normal_vec(rng: &mut impl Rng, n: usize, sigma: f64) -> Vec<f64> {
    (0..n).map(|_| sigma * normal(rng)).collect()
}

fn unit_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut v = normal_vec(rng, n, 1.0);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

// ─── Cluster model ───────────────────────────────────────────────────────

/// The deterministic part of the generative model: per-category appearance
/// centers and per-action cue directions. Exposed so tests can recompute
/// centroids independently of scene generation.
#[derive(Debug, Clone)]
pub struct ClusterModel {
    pub category_centers: Vec<Vec<f64>>,
    pub action_cues_app: Vec<Vec<f64>>,
    pub action_cues_map: Vec<Vec<f64>>,
    pub cue_strength: f64,
}

impl ClusterModel {
    pub fn from_config(cfg: &DatasetConfig) -> Self {
        let mut rng = stream(cfg.seed, TAG_CLUSTER, 0);
        let category_centers = (0..cfg.num_objects)
            .map(|_| normal_vec(&mut rng, cfg.d_app, 1.0))
            .collect();
        let action_cues_app = (0..cfg.num_actions)
            .map(|_| normal_vec(&mut rng, cfg.d_app, 1.0))
            .collect();
        let action_cues_map = (0..cfg.num_actions)
            .map(|_| normal_vec(&mut rng, cfg.d_map, 1.0))
            .collect();
        Self { category_centers, action_cues_app, action_cues_map, cue_strength: 1.0 }
    }

    /// Noise-free appearance of an instance with the given action cues.
    pub fn appearance_centroid(&self, category: usize, cue_actions: &[usize]) -> Vec<f64> {
        let mut v = self.category_centers[category].clone();
        for &a in cue_actions {
            for (vi, ci) in v.iter_mut().zip(&self.action_cues_app[a]) {
                *vi += self.cue_strength * ci;
            }
        }
        v
    }
}

// ─── Vocabulary construction ─────────────────────────────────────────────

fn build_hoi_table(cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let per_object = cfg.actions_per_object.min(cfg.num_actions);
    let mut table = Vec::new();
    for object in 1..cfg.num_objects {
        let mut actions: Vec<usize> = (0..cfg.num_actions).collect();
        // partial Fisher-Yates draw
        for i in 0..per_object {
            let j = rng.gen_range(i..actions.len());
            actions.swap(i, j);
        }
        for &a in &actions[..per_object] {
            table.push((a, object));
        }
    }
    // every action should exist somewhere
    for a in 0..cfg.num_actions {
        if !table.iter().any(|&(ta, _)| ta == a) {
            let object = rng.gen_range(1..cfg.num_objects);
            table.push((a, object));
        }
    }
    table.sort_unstable_by_key(|&(a, o)| (o, a));
    table.dedup();
    table
}

// ─── Scene generation ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
struct PlannedTriplet {
    human: usize,
    object: usize,
    actions: Vec<usize>,
    degraded: bool,
}

#[derive(Debug, Clone)]
struct PlannedInstance {
    bbox: BoundingBox,
    category: usize,
}

struct ScenePlan {
    humans: Vec<PlannedInstance>,
    objects: Vec<PlannedInstance>,
    distractors: Vec<PlannedInstance>,
    triplets: Vec<PlannedTriplet>,
}

fn random_box(rng: &mut impl Rng, img: f64, min_side: f64, max_side: f64) -> BoundingBox {
    let w = rng.gen_range(min_side..max_side);
    let h = rng.gen_range(min_side..max_side);
    let x1 = rng.gen_range(0.0..(img - w));
    let y1 = rng.gen_range(0.0..(img - h));
    BoundingBox::new(x1, y1, x1 + w, y1 + h)
}

fn box_near(rng: &mut impl Rng, anchor: &BoundingBox, img: f64) -> BoundingBox {
    let (cx, cy) = anchor.center();
    let w = rng.gen_range(12.0..34.0);
    let h = rng.gen_range(12.0..34.0);
    let nx = (cx + rng.gen_range(-36.0..36.0)).clamp(w / 2.0, img - w / 2.0);
    let ny = (cy + rng.gen_range(-36.0..36.0)).clamp(h / 2.0, img - h / 2.0);
    BoundingBox::new(nx - w / 2.0, ny - h / 2.0, nx + w / 2.0, ny + h / 2.0)
}

/// Shift/scale a box while keeping IoU with the original above `min_iou`.
fn jitter_box(rng: &mut impl Rng, b: &BoundingBox, img: f64, min_iou: f64) -> BoundingBox {
    let w = b.x2 - b.x1;
    let h = b.y2 - b.y1;
    for attempt in 0..24 {
        let amp = 0.08 / (1.0 + attempt as f64 * 0.25);
        let j = BoundingBox::new(
            (b.x1 + rng.gen_range(-amp..amp) * w).max(0.0),
            (b.y1 + rng.gen_range(-amp..amp) * h).max(0.0),
            (b.x2 + rng.gen_range(-amp..amp) * w).min(img),
            (b.y2 + rng.gen_range(-amp..amp) * h).min(img),
        );
        if j.is_valid() {
            let inter = j.intersection_area(b);
            let iou = inter / (j.area() + b.area() - inter);
            if iou >= min_iou {
                return j;
            }
        }
    }
    *b
}

fn weighted_pick(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

fn plan_scene(
    cfg: &DatasetConfig,
    table: &[(usize, usize)],
    rng: &mut ChaCha8Rng,
) -> ScenePlan {
    let img = cfg.image_size;
    // long-tailed HOI frequency so the rare/non-rare split is meaningful
    let weights: Vec<f64> = (0..table.len()).map(|i| 1.0 / (1.0 + i as f64)).collect();
    let actions_of = |object: usize| -> Vec<usize> {
        table.iter().filter(|&&(_, o)| o == object).map(|&(a, _)| a).collect()
    };

    let mut humans = vec![PlannedInstance {
        bbox: random_box(rng, img, 22.0, 46.0),
        category: PERSON_CATEGORY,
    }];
    let primary = table[weighted_pick(rng, &weights)];
    let (a0, cat0) = primary;
    let mut actions0 = vec![a0];
    let cat0_actions = actions_of(cat0);
    if cat0_actions.len() > 1 && rng.gen_bool(0.25) {
        let extra = cat0_actions[rng.gen_range(0..cat0_actions.len())];
        if extra != a0 {
            actions0.push(extra);
        }
    }
    actions0.sort_unstable();
    let mut objects = vec![PlannedInstance {
        bbox: box_near(rng, &humans[0].bbox, img),
        category: cat0,
    }];
    let mut triplets = vec![PlannedTriplet {
        human: 0,
        object: 0,
        actions: actions0,
        degraded: false,
    }];

    if rng.gen_bool(cfg.shared_frac) {
        // second triplet sharing the primary human or object
        let style = rng.gen_range(0..3);
        match style {
            0 => {
                // same human, same action, new object of a compatible category
                let cats: Vec<usize> = (1..cfg.num_objects)
                    .filter(|&o| table.contains(&(a0, o)))
                    .collect();
                let cat1 = cats[rng.gen_range(0..cats.len())];
                objects.push(PlannedInstance {
                    bbox: box_near(rng, &humans[0].bbox, img),
                    category: cat1,
                });
                triplets.push(PlannedTriplet {
                    human: 0,
                    object: objects.len() - 1,
                    actions: vec![a0],
                    degraded: false,
                });
            }
            1 => {
                // same human, different action on a new object
                let (a1, cat1) = table[weighted_pick(rng, &weights)];
                objects.push(PlannedInstance {
                    bbox: box_near(rng, &humans[0].bbox, img),
                    category: cat1,
                });
                triplets.push(PlannedTriplet {
                    human: 0,
                    object: objects.len() - 1,
                    actions: vec![a1],
                    degraded: false,
                });
            }
            _ => {
                // a second human interacting with the same object instance
                humans.push(PlannedInstance {
                    bbox: box_near(rng, &objects[0].bbox, img),
                    category: PERSON_CATEGORY,
                });
                triplets.push(PlannedTriplet {
                    human: humans.len() - 1,
                    object: 0,
                    actions: vec![a0],
                    degraded: false,
                });
            }
        }
    } else if rng.gen_bool(cfg.independent_frac) {
        // unrelated triplet on fresh instances
        let (a1, cat1) = table[weighted_pick(rng, &weights)];
        humans.push(PlannedInstance {
            bbox: random_box(rng, img, 22.0, 46.0),
            category: PERSON_CATEGORY,
        });
        objects.push(PlannedInstance {
            bbox: box_near(rng, &humans.last().unwrap().bbox, img),
            category: cat1,
        });
        triplets.push(PlannedTriplet {
            human: humans.len() - 1,
            object: objects.len() - 1,
            actions: vec![a1],
            degraded: false,
        });
    }

    if rng.gen_bool(cfg.degrade_prob) {
        // cue-degraded triplet, correlated with the primary one by category
        // and action; recoverable only through cross-triplet context
        humans.push(PlannedInstance {
            bbox: random_box(rng, img, 22.0, 46.0),
            category: PERSON_CATEGORY,
        });
        objects.push(PlannedInstance {
            bbox: box_near(rng, &humans.last().unwrap().bbox, img),
            category: cat0,
        });
        triplets.push(PlannedTriplet {
            human: humans.len() - 1,
            object: objects.len() - 1,
            actions: vec![a0],
            degraded: true,
        });
    }

    let mut distractors = Vec::new();
    let n_distract = if cfg.distractor_rate <= 0.0 {
        0
    } else {
        // cheap Poisson-ish draw
        let mut n = 0;
        while n < 3 && rng.gen_bool((cfg.distractor_rate / (1.0 + n as f64)).min(1.0) * 0.5) {
            n += 1;
        }
        n
    };
    for _ in 0..n_distract {
        distractors.push(PlannedInstance {
            bbox: random_box(rng, img, 14.0, 40.0),
            category: rng.gen_range(0..cfg.num_objects),
        });
    }

    ScenePlan { humans, objects, distractors, triplets }
}

fn realize_scene(
    cfg: &DatasetConfig,
    clusters: &ClusterModel,
    plan: &ScenePlan,
    id: String,
    rng: &mut ChaCha8Rng,
) -> Scene {
    let img = cfg.image_size;
    let n_humans = plan.humans.len();

    // cue sets: union over the instance's non-degraded triplets
    let mut human_cues: Vec<Vec<usize>> = vec![Vec::new(); n_humans];
    let mut object_cues: Vec<Vec<usize>> = vec![Vec::new(); plan.objects.len()];
    for t in &plan.triplets {
        if t.degraded {
            continue;
        }
        for &a in &t.actions {
            if !human_cues[t.human].contains(&a) {
                human_cues[t.human].push(a);
            }
            if !object_cues[t.object].contains(&a) {
                object_cues[t.object].push(a);
            }
        }
    }

    let mut detections = Vec::new();
    let mut emit = |inst: &PlannedInstance, cues: &[usize], rng: &mut ChaCha8Rng| {
        let mut appearance = clusters.appearance_centroid(inst.category, cues);
        for v in appearance.iter_mut() {
            *v += cfg.appearance_noise * normal(rng);
        }
        quantize_f32(&mut appearance);
        detections.push(Detection {
            bbox: jitter_box(rng, &inst.bbox, img, cfg.jitter_iou),
            category: inst.category,
            score: rng.gen_range(0.75..1.0),
            appearance,
        });
    };
    for (i, h) in plan.humans.iter().enumerate() {
        emit(h, &human_cues[i], rng);
    }
    for (i, o) in plan.objects.iter().enumerate() {
        emit(o, &object_cues[i], rng);
    }
    for d in &plan.distractors {
        emit(d, &[], rng);
    }

    // feature map: noise plus action cues at each clean triplet's union-box center
    let hw = cfg.map_hw;
    let mut fmap = Tensor::zeros(&[hw, hw, cfg.d_map]);
    for v in fmap.data.iter_mut() {
        *v = cfg.map_noise * normal(rng);
    }
    for t in &plan.triplets {
        if t.degraded {
            continue;
        }
        let union = plan.humans[t.human].bbox.union_box(&plan.objects[t.object].bbox);
        let (cx, cy) = union.center();
        let col = ((cx / img) * hw as f64).floor().clamp(0.0, hw as f64 - 1.0) as usize;
        let row = ((cy / img) * hw as f64).floor().clamp(0.0, hw as f64 - 1.0) as usize;
        let cell = &mut fmap.data[(row * hw + col) * cfg.d_map..(row * hw + col + 1) * cfg.d_map];
        for &a in &t.actions {
            for (c, cue) in cell.iter_mut().zip(&clusters.action_cues_map[a]) {
                *c += clusters.cue_strength * cue;
            }
        }
    }
    quantize_f32(&mut fmap.data);

    let gt_triplets = plan
        .triplets
        .iter()
        .map(|t| GtTriplet {
            human_box: plan.humans[t.human].bbox,
            object_box: plan.objects[t.object].bbox,
            object_category: plan.objects[t.object].category,
            actions: t.actions.clone(),
        })
        .collect();

    Scene {
        id,
        width: img,
        height: img,
        detections,
        feature_map: fmap,
        gt_triplets,
    }
}

/// Generate a deterministic train/test dataset plus its vocabulary.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut vocab_rng = stream(cfg.seed, TAG_VOCAB, 0);
    let table = build_hoi_table(cfg, &mut vocab_rng);
    if table.is_empty() {
        return Err(Error::Config("empty HOI table".into()));
    }
    let num_rows = table.len() + cfg.num_objects;
    let mut embeddings = Tensor::zeros(&[num_rows, cfg.d_f]);
    for r in 0..num_rows {
        let row = unit_vec(&mut vocab_rng, cfg.d_f);
        embeddings.data[r * cfg.d_f..(r + 1) * cfg.d_f].copy_from_slice(&row);
    }
    quantize_f32(&mut embeddings.data);

    let clusters = ClusterModel::from_config(cfg);

    let total = cfg.train_scenes + cfg.test_scenes;
    let mut scenes = Vec::with_capacity(total);
    for i in 0..total {
        let mut rng = stream(cfg.seed, TAG_SCENE, i as u64);
        let plan = plan_scene(cfg, &table, &mut rng);
        scenes.push(realize_scene(cfg, &clusters, &plan, format!("scene_{i:05}"), &mut rng));
    }
    let test = scenes.split_off(cfg.train_scenes);
    let train = scenes;

    // rarity from train-split instance counts: bottom quartile is rare
    let mut counts = vec![0usize; table.len()];
    for scene in &train {
        for t in &scene.gt_triplets {
            for &a in &t.actions {
                if let Some(idx) = table.iter().position(|&(ta, to)| ta == a && to == t.object_category)
                {
                    counts[idx] += 1;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..table.len()).collect();
    order.sort_by_key(|&i| (counts[i], i));
    let n_rare = table.len().div_ceil(4);
    let mut rare = vec![false; table.len()];
    for &i in order.iter().take(n_rare) {
        rare[i] = true;
    }

    let categories = table
        .iter()
        .zip(&rare)
        .map(|(&(action, object), &rare)| HoiCategory { action, object, rare })
        .collect();
    let vocab = HoiVocabulary {
        num_objects: cfg.num_objects,
        num_actions: cfg.num_actions,
        categories,
        text_embeddings: embeddings,
    };
    vocab.validate()?;

    let dataset = Dataset { vocab, train, test };
    for scene in dataset.train.iter().chain(&dataset.test) {
        scene.validate_against(&dataset.vocab)?;
    }
    Ok(dataset)
}
