//! Candidate human-object pairs and their spatial features.
//!
//! Every detected human is paired with every other detection. Each pair
//! carries an 8-dim spatial feature and its ground-truth interactivity,
//! derived by IoU-matching the pair's boxes against the scene's triplets.

use crate::evaluation::iou;
use crate::fixtures::{BoundingBox, Scene};
use rand::seq::SliceRandom;
use rand::Rng;

/// Detection-to-ground-truth IoU threshold for positive pair labels.
pub const PAIR_IOU_THRESHOLD: f64 = 0.5;
/// Negatives kept in a scene without any positive pair.
pub const RATIO_FLOOR: usize = 4;

// ─── Spatial feature ─────────────────────────────────────────────────────

/// [dx, dy, ds, angle, area_h, area_o, area_i, area_u]
///
/// Center offsets are normalized by image width/height, areas by image area,
/// and the angle is atan2(dy, dx) so coincident centers map to 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialFeature {
    pub dx: f64,
    pub dy: f64,
    pub ds: f64,
    pub angle: f64,
    pub area_h: f64,
    pub area_o: f64,
    pub area_i: f64,
    pub area_u: f64,
}

impl SpatialFeature {
    pub fn compute(human: &BoundingBox, object: &BoundingBox, width: f64, height: f64) -> Self {
        let (hx, hy) = human.center();
        let (ox, oy) = object.center();
        let dx = (ox - hx) / width;
        let dy = (oy - hy) / height;
        let ds = (dx * dx + dy * dy).sqrt();
        let angle = if dx == 0.0 && dy == 0.0 { 0.0 } else { dy.atan2(dx) };
        let img_area = width * height;
        let area_h = human.area() / img_area;
        let area_o = object.area() / img_area;
        let area_i = human.intersection_area(object) / img_area;
        let area_u = area_h + area_o - area_i;
        Self { dx, dy, ds, angle, area_h, area_o, area_i, area_u }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.dx, self.dy, self.ds, self.angle, self.area_h, self.area_o, self.area_i,
            self.area_u,
        ]
    }
}

pub const SPATIAL_DIM: usize = 8;

// ─── Pair candidates ─────────────────────────────────────────────────────

/// One candidate (human, object) pair before any feature projection.
#[derive(Debug, Clone)]
pub struct PairCandidate {
    pub human_idx: usize,
    pub object_idx: usize,
    pub spatial: SpatialFeature,
    /// 1 iff both boxes IoU-match a ground-truth triplet with agreeing category.
    pub gt_interactive: bool,
    /// Union of the actions of every matched triplet; empty for negatives.
    pub gt_actions: Vec<usize>,
}

/// All ordered (human, other-detection) pairs of a scene. Scenes without a
/// human yield an empty list.
pub fn enumerate_pairs(scene: &Scene) -> Vec<PairCandidate> {
    let mut out = Vec::new();
    for (h, hd) in scene.detections.iter().enumerate() {
        if !hd.is_human() {
            continue;
        }
        for (o, od) in scene.detections.iter().enumerate() {
            if o == h {
                continue;
            }
            let spatial = SpatialFeature::compute(&hd.bbox, &od.bbox, scene.width, scene.height);
            let mut actions = Vec::new();
            for t in &scene.gt_triplets {
                if t.object_category == od.category
                    && iou(&hd.bbox, &t.human_box) >= PAIR_IOU_THRESHOLD
                    && iou(&od.bbox, &t.object_box) >= PAIR_IOU_THRESHOLD
                {
                    for &a in &t.actions {
                        if !actions.contains(&a) {
                            actions.push(a);
                        }
                    }
                }
            }
            actions.sort_unstable();
            out.push(PairCandidate {
                human_idx: h,
                object_idx: o,
                spatial,
                gt_interactive: !actions.is_empty(),
                gt_actions: actions,
            });
        }
    }
    out
}

/// Hard-negative sampling: keep all positives plus the `ratio * positives`
/// highest-scoring negatives. Without scores (before the first forward pass)
/// negatives are drawn at random. Zero-positive scenes keep
/// min(RATIO_FLOOR, negatives) random negatives so the pair loss stays
/// defined. Returns indices into `pairs`, ascending.
pub fn sample_training_pairs(
    pairs: &[PairCandidate],
    ratio: f64,
    scores: Option<&[f64]>,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let positives: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].gt_interactive).collect();
    let mut negatives: Vec<usize> =
        (0..pairs.len()).filter(|&i| !pairs[i].gt_interactive).collect();

    let keep_negatives = if positives.is_empty() {
        RATIO_FLOOR.min(negatives.len())
    } else {
        ((ratio * positives.len() as f64).round() as usize).min(negatives.len())
    };

    let kept: Vec<usize> = match scores {
        Some(s) if !positives.is_empty() => {
            debug_assert_eq!(s.len(), pairs.len());
            // hardest first: highest current score, ties by index
            negatives.sort_by(|&a, &b| {
                s[b].partial_cmp(&s[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
            });
            negatives.into_iter().take(keep_negatives).collect()
        }
        _ => {
            negatives.shuffle(rng);
            negatives.into_iter().take(keep_negatives).collect()
        }
    };

    let mut selected = positives;
    selected.extend(kept);
    selected.sort_unstable();
    selected
}

/// Assemble the raw pair-level feature vector [F_h ; F_o ; spatial] given the
/// per-detection instance features. Plain data version used by tests; the
/// model builds the same thing on the tape.
pub fn pair_input(human: &[f64], object: &[f64], spatial: &SpatialFeature) -> Vec<f64> {
    let mut v = Vec::with_capacity(human.len() + object.len() + SPATIAL_DIM);
    v.extend_from_slice(human);
    v.extend_from_slice(object);
    v.extend(spatial.to_vec());
    v
}

pub fn _dims_consistent(d_app: usize, d_sem: usize) -> usize {
    2 * (d_app + d_sem) + SPATIAL_DIM
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{Detection, GtTriplet};
    use crate::tape::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bbox(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2)
    }

    #[test]
    fn coincident_boxes_zero_out_offsets() {
        let b = bbox(1.0, 2.0, 5.0, 6.0);
        let s = SpatialFeature::compute(&b, &b, 10.0, 10.0);
        assert_eq!((s.dx, s.dy, s.ds, s.angle), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(s.area_h, s.area_o);
        assert_eq!(s.area_i, s.area_u);
    }

    #[test]
    fn disjoint_boxes_have_zero_intersection() {
        let h = bbox(0.0, 0.0, 2.0, 2.0);
        let o = bbox(5.0, 5.0, 7.0, 7.0);
        let s = SpatialFeature::compute(&h, &o, 10.0, 10.0);
        assert_eq!(s.area_i, 0.0);
        assert!((s.area_u - (s.area_h + s.area_o)).abs() < 1e-15);
    }

    #[test]
    fn hand_geometry_case() {
        // human (0,0,4,4), object (2,2,6,6) on a 10x10 image
        let h = bbox(0.0, 0.0, 4.0, 4.0);
        let o = bbox(2.0, 2.0, 6.0, 6.0);
        let s = SpatialFeature::compute(&h, &o, 10.0, 10.0);
        assert!((s.area_i - 0.04).abs() < 1e-15);
        assert!((s.area_u - 0.28).abs() < 1e-15);
        assert!((s.dx - 0.2).abs() < 1e-15);
        assert!((s.dy - 0.2).abs() < 1e-15);
        assert!((s.ds - 0.08f64.sqrt()).abs() < 1e-15);
        assert!((s.angle - std::f64::consts::FRAC_PI_4).abs() < 1e-15);
    }

    fn random_b(rng: &mut ChaCha8Rng) -> BoundingBox {
        let x1 = rng.gen_range(0.0..60.0);
        let y1 = rng.gen_range(0.0..60.0);
        bbox(x1, y1, x1 + rng.gen_range(2.0..30.0), y1 + rng.gen_range(2.0..30.0))
    }

    #[test]
    fn swapping_boxes_negates_offsets_and_rotates_angle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let a = random_b(&mut rng);
            let b = random_b(&mut rng);
            let s1 = SpatialFeature::compute(&a, &b, 100.0, 100.0);
            let s2 = SpatialFeature::compute(&b, &a, 100.0, 100.0);
            assert!((s1.dx + s2.dx).abs() < 1e-12);
            assert!((s1.dy + s2.dy).abs() < 1e-12);
            assert!((s1.ds - s2.ds).abs() < 1e-12);
            assert!((s1.area_i - s2.area_i).abs() < 1e-12);
            assert!((s1.area_u - s2.area_u).abs() < 1e-12);
            if s1.dx != 0.0 || s1.dy != 0.0 {
                let diff = (s1.angle - s2.angle).rem_euclid(2.0 * std::f64::consts::PI);
                assert!((diff - std::f64::consts::PI).abs() < 1e-9, "diff {diff}");
            }
        }
    }

    #[test]
    fn translation_leaves_scalars_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let a = random_b(&mut rng);
            let b = random_b(&mut rng);
            let tx = rng.gen_range(-5.0..5.0);
            let ty = rng.gen_range(-5.0..5.0);
            let shift = |r: &BoundingBox| bbox(r.x1 + tx, r.y1 + ty, r.x2 + tx, r.y2 + ty);
            let s1 = SpatialFeature::compute(&a, &b, 100.0, 100.0);
            let s2 = SpatialFeature::compute(&shift(&a), &shift(&b), 100.0, 100.0);
            for (u, v) in [
                (s1.ds, s2.ds),
                (s1.area_h, s2.area_h),
                (s1.area_o, s2.area_o),
                (s1.area_i, s2.area_i),
                (s1.area_u, s2.area_u),
            ] {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    fn detection(b: BoundingBox, category: usize, d_app: usize) -> Detection {
        Detection { bbox: b, category, score: 0.9, appearance: vec![0.0; d_app] }
    }

    fn scene_with(detections: Vec<Detection>, gt: Vec<GtTriplet>) -> Scene {
        Scene {
            id: "t".into(),
            width: 100.0,
            height: 100.0,
            detections,
            feature_map: Tensor::zeros(&[2, 2, 4]),
            gt_triplets: gt,
        }
    }

    #[test]
    fn pair_count_is_humans_times_rest() {
        let scene = scene_with(
            vec![
                detection(bbox(0.0, 0.0, 10.0, 10.0), 0, 4),
                detection(bbox(20.0, 0.0, 30.0, 10.0), 1, 4),
                detection(bbox(40.0, 0.0, 50.0, 10.0), 2, 4),
            ],
            vec![],
        );
        assert_eq!(enumerate_pairs(&scene).len(), 2);

        // two humans pair with each other too
        let scene2 = scene_with(
            vec![
                detection(bbox(0.0, 0.0, 10.0, 10.0), 0, 4),
                detection(bbox(20.0, 0.0, 30.0, 10.0), 0, 4),
                detection(bbox(40.0, 0.0, 50.0, 10.0), 2, 4),
            ],
            vec![],
        );
        assert_eq!(enumerate_pairs(&scene2).len(), 2 * 2);

        let empty = scene_with(vec![detection(bbox(0.0, 0.0, 10.0, 10.0), 1, 4)], vec![]);
        assert!(enumerate_pairs(&empty).is_empty());
    }

    #[test]
    fn exact_gt_boxes_label_positive() {
        let hb = bbox(0.0, 0.0, 10.0, 10.0);
        let ob = bbox(12.0, 0.0, 22.0, 10.0);
        let scene = scene_with(
            vec![detection(hb, 0, 4), detection(ob, 2, 4)],
            vec![GtTriplet {
                human_box: hb,
                object_box: ob,
                object_category: 2,
                actions: vec![1, 3],
            }],
        );
        let pairs = enumerate_pairs(&scene);
        assert_eq!(pairs.len(), 1);
        assert!(pairs[0].gt_interactive);
        assert_eq!(pairs[0].gt_actions, vec![1, 3]);
    }

    #[test]
    fn iou_below_half_labels_negative() {
        let hb = bbox(0.0, 0.0, 10.0, 10.0);
        let gt_ob = bbox(20.0, 0.0, 30.0, 10.0);
        // shifted so IoU = (10-x)*10 / ((100*2) - (10-x)*10); x chosen for IoU ~ 0.49:
        // overlap w = 10 - x; iou = w/(20 - w); want 0.49 -> w = 9.8*20/...  solve: w = 0.49*(20-w)
        // w(1.49)=9.8 -> w = 6.5772; x = 3.4228
        let det_ob = bbox(20.0 + 3.4228, 0.0, 30.0 + 3.4228, 10.0);
        let scene = scene_with(
            vec![detection(hb, 0, 4), detection(det_ob, 2, 4)],
            vec![GtTriplet {
                human_box: hb,
                object_box: gt_ob,
                object_category: 2,
                actions: vec![0],
            }],
        );
        let pairs = enumerate_pairs(&scene);
        assert!(iou(&det_ob, &gt_ob) < 0.5);
        assert!(iou(&det_ob, &gt_ob) > 0.45);
        assert!(!pairs[0].gt_interactive);
    }

    fn fake_pairs(n_pos: usize, n_neg: usize) -> Vec<PairCandidate> {
        let mut out = Vec::new();
        for i in 0..n_pos + n_neg {
            out.push(PairCandidate {
                human_idx: 0,
                object_idx: i + 1,
                spatial: SpatialFeature::compute(
                    &bbox(0.0, 0.0, 1.0, 1.0),
                    &bbox(2.0, 2.0, 3.0, 3.0),
                    10.0,
                    10.0,
                ),
                gt_interactive: i < n_pos,
                gt_actions: if i < n_pos { vec![0] } else { vec![] },
            });
        }
        out
    }

    #[test]
    fn sampling_keeps_positives_plus_ratio_negatives() {
        let pairs = fake_pairs(2, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sel = sample_training_pairs(&pairs, 3.0, None, &mut rng);
        assert_eq!(sel.len(), 2 + 6);
        assert!(sel.contains(&0) && sel.contains(&1));
    }

    #[test]
    fn zero_positive_scene_keeps_floor_negatives() {
        let pairs = fake_pairs(0, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sel = sample_training_pairs(&pairs, 3.0, None, &mut rng);
        assert_eq!(sel.len(), RATIO_FLOOR);

        let few = fake_pairs(0, 2);
        let sel = sample_training_pairs(&few, 3.0, None, &mut rng);
        assert_eq!(sel.len(), 2);
    }

    #[test]
    fn hard_mining_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let n_pos = rng.gen_range(1..4usize);
            let n_neg = rng.gen_range(0..12usize);
            let pairs = fake_pairs(n_pos, n_neg);
            let scores: Vec<f64> = (0..pairs.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let sel = sample_training_pairs(&pairs, 2.0, Some(&scores), &mut rng);

            // oracle: brute-force sort of negative indices by score
            let mut neg: Vec<usize> = (n_pos..n_pos + n_neg).collect();
            neg.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            let want = (2.0 * n_pos as f64).round() as usize;
            let mut expect: Vec<usize> = (0..n_pos).collect();
            expect.extend(neg.into_iter().take(want.min(n_neg)));
            expect.sort_unstable();
            assert_eq!(sel, expect);
        }
    }
}
