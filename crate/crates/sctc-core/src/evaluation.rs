//! HOI-detection mAP: greedy triplet matching at IoU > 0.5 on both boxes,
//! per-category average precision, Full/Rare/Non-Rare aggregation.

use crate::fixtures::{BoundingBox, GtTriplet, HoiVocabulary};
use serde::Serialize;

/// Matching threshold on min(IoU_human, IoU_object).
pub const MATCH_IOU: f64 = 0.5;

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// One scored triplet prediction carrying its HOI category row.
#[derive(Debug, Clone)]
pub struct HoiPrediction {
    pub human_box: BoundingBox,
    pub object_box: BoundingBox,
    pub hoi_category: usize,
    pub score: f64,
}

/// Per-scene matching outcome: predictions in descending-score order with
/// their TP/FP flag, plus per-category ground-truth counts.
#[derive(Debug, Clone)]
pub struct MatchResult {
    /// (hoi_category, score, is_tp), sorted by score desc (ties by index).
    pub flags: Vec<(usize, f64, bool)>,
    pub gt_counts: Vec<usize>,
}

/// Greedy matching: predictions in score order each consume the best
/// still-unmatched ground truth of their category with
/// min(IoU_h, IoU_o) > threshold.
pub fn match_scene(
    predictions: &[HoiPrediction],
    gt_triplets: &[GtTriplet],
    vocab: &HoiVocabulary,
    threshold: f64,
) -> MatchResult {
    let num_hoi = vocab.num_hoi();
    // expand action sets: one gt instance per (category, box pair)
    let mut gt: Vec<(usize, &GtTriplet, bool)> = Vec::new();
    let mut gt_counts = vec![0usize; num_hoi];
    for t in gt_triplets {
        for &a in &t.actions {
            if let Some(cat) = vocab.hoi_index(a, t.object_category) {
                gt.push((cat, t, false));
                gt_counts[cat] += 1;
            }
        }
    }

    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        predictions[b]
            .score
            .partial_cmp(&predictions[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut flags = Vec::with_capacity(predictions.len());
    for &pi in &order {
        let p = &predictions[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, &(cat, t, matched)) in gt.iter().enumerate() {
            if matched || cat != p.hoi_category {
                continue;
            }
            let overlap = iou(&p.human_box, &t.human_box).min(iou(&p.object_box, &t.object_box));
            if overlap > threshold && best.map_or(true, |(_, b)| overlap > b) {
                best = Some((gi, overlap));
            }
        }
        let is_tp = match best {
            Some((gi, _)) => {
                gt[gi].2 = true;
                true
            }
            None => false,
        };
        flags.push((p.hoi_category, p.score, is_tp));
    }
    MatchResult { flags, gt_counts }
}

/// Area under the precision-recall curve with all-point interpolation
/// (precision envelope). `None` when the category has no ground truth.
pub fn average_precision(tp_flags: &[bool], gt_count: usize) -> Option<f64> {
    if gt_count == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &f) in tp_flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / gt_count as f64);
    }
    // envelope: max precision at recall >= r
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..precision.len() {
        if recall[i] > prev_recall {
            ap += (recall[i] - prev_recall) * precision[i];
            prev_recall = recall[i];
        }
    }
    Some(ap)
}

/// mAP over Full / Rare / Non-Rare category subsets; empty subsets are
/// reported as absent.
#[derive(Debug, Clone, Serialize)]
pub struct MapReport {
    pub full: Option<f64>,
    pub rare: Option<f64>,
    pub non_rare: Option<f64>,
    pub per_category: Vec<Option<f64>>,
}

pub fn map_report(per_category: &[Option<f64>], rare_flags: &[bool]) -> MapReport {
    let mean_over = |pick: &dyn Fn(usize) -> bool| -> Option<f64> {
        let vals: Vec<f64> = per_category
            .iter()
            .enumerate()
            .filter(|&(i, ap)| ap.is_some() && pick(i))
            .map(|(_, ap)| ap.unwrap())
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    MapReport {
        full: mean_over(&|_| true),
        rare: mean_over(&|i| rare_flags[i]),
        non_rare: mean_over(&|i| !rare_flags[i]),
        per_category: per_category.to_vec(),
    }
}

/// Pool per-scene match results into per-category AP and the report.
/// Scores tie-break by pooling order (scene order, then prediction index).
pub fn aggregate(results: &[MatchResult], vocab: &HoiVocabulary) -> MapReport {
    let num_hoi = vocab.num_hoi();
    let mut pooled: Vec<Vec<(f64, bool)>> = vec![Vec::new(); num_hoi];
    let mut gt_counts = vec![0usize; num_hoi];
    for r in results {
        for &(cat, score, tp) in &r.flags {
            pooled[cat].push((score, tp));
        }
        for (c, &n) in r.gt_counts.iter().enumerate() {
            gt_counts[c] += n;
        }
    }
    let mut per_category = Vec::with_capacity(num_hoi);
    for c in 0..num_hoi {
        // stable sort keeps pooling order on ties
        pooled[c].sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        let flags: Vec<bool> = pooled[c].iter().map(|&(_, tp)| tp).collect();
        per_category.push(average_precision(&flags, gt_counts[c]));
    }
    let rare_flags: Vec<bool> = vocab.categories.iter().map(|c| c.rare).collect();
    map_report(&per_category, &rare_flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{HoiCategory, PERSON_CATEGORY};
    use crate::tape::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bbox(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2)
    }

    #[test]
    fn iou_reference_cases() {
        let a = bbox(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bbox(5.0, 5.0, 6.0, 6.0)), 0.0);
        let b = bbox(1.0, 0.0, 3.0, 2.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    fn tiny_vocab(num_hoi: usize) -> HoiVocabulary {
        let d = 4;
        let categories: Vec<HoiCategory> = (0..num_hoi)
            .map(|i| HoiCategory { action: i, object: 1, rare: i == 0 })
            .collect();
        let rows = num_hoi + 2;
        let mut data = vec![0.0; rows * d];
        for r in 0..rows {
            data[r * d] = 1.0;
        }
        HoiVocabulary {
            num_objects: 2,
            num_actions: num_hoi,
            categories,
            text_embeddings: Tensor::new(vec![rows, d], data).unwrap(),
        }
    }

    fn gt(hb: BoundingBox, ob: BoundingBox, actions: Vec<usize>) -> GtTriplet {
        GtTriplet { human_box: hb, object_box: ob, object_category: 1, actions }
    }

    #[test]
    fn perfect_prediction_is_tp() {
        let vocab = tiny_vocab(2);
        let hb = bbox(0.0, 0.0, 10.0, 10.0);
        let ob = bbox(12.0, 0.0, 22.0, 10.0);
        let preds = vec![HoiPrediction {
            human_box: hb,
            object_box: ob,
            hoi_category: 0,
            score: 0.9,
        }];
        let r = match_scene(&preds, &[gt(hb, ob, vec![0])], &vocab, MATCH_IOU);
        assert_eq!(r.flags, vec![(0, 0.9, true)]);
        assert_eq!(r.gt_counts, vec![1, 0]);
    }

    #[test]
    fn duplicate_predictions_consume_one_gt() {
        let vocab = tiny_vocab(2);
        let hb = bbox(0.0, 0.0, 10.0, 10.0);
        let ob = bbox(12.0, 0.0, 22.0, 10.0);
        let mk = |score| HoiPrediction {
            human_box: hb,
            object_box: ob,
            hoi_category: 0,
            score,
        };
        let r = match_scene(&[mk(0.5), mk(0.9)], &[gt(hb, ob, vec![0])], &vocab, MATCH_IOU);
        // higher score first: TP then FP
        assert_eq!(r.flags, vec![(0, 0.9, true), (0, 0.5, false)]);
    }

    /// Brute-force oracle for greedy-by-score matching: replays the same
    /// greedy policy with an independent exhaustive max search.
    fn greedy_oracle(
        preds: &[HoiPrediction],
        gts: &[(usize, BoundingBox, BoundingBox)],
        thr: f64,
    ) -> Vec<bool> {
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap().then(a.cmp(&b)));
        let mut used = vec![false; gts.len()];
        let mut flags = Vec::new();
        for &pi in &order {
            let p = &preds[pi];
            let mut best_iou = thr;
            let mut best = None;
            for (gi, &(cat, hb, ob)) in gts.iter().enumerate() {
                if used[gi] || cat != p.hoi_category {
                    continue;
                }
                let ov = iou(&p.human_box, &hb).min(iou(&p.object_box, &ob));
                if ov > best_iou {
                    best_iou = ov;
                    best = Some(gi);
                }
            }
            if let Some(gi) = best {
                used[gi] = true;
                flags.push(true);
            } else {
                flags.push(false);
            }
        }
        flags
    }

    #[test]
    fn randomized_matching_agrees_with_oracle() {
        let vocab = tiny_vocab(3);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..150 {
            let rand_box = |rng: &mut ChaCha8Rng| {
                let x1 = rng.gen_range(0.0..50.0);
                let y1 = rng.gen_range(0.0..50.0);
                bbox(x1, y1, x1 + rng.gen_range(5.0..30.0), y1 + rng.gen_range(5.0..30.0))
            };
            let gts: Vec<GtTriplet> = (0..3)
                .map(|_| gt(rand_box(&mut rng), rand_box(&mut rng), vec![rng.gen_range(0..3)]))
                .collect();
            let preds: Vec<HoiPrediction> = (0..5)
                .map(|_| {
                    // half the predictions jitter a gt, half are random
                    let (hb, ob) = if rng.gen_bool(0.5) {
                        let g = &gts[rng.gen_range(0..3)];
                        let j = |b: &BoundingBox, rng: &mut ChaCha8Rng| {
                            let d = rng.gen_range(-2.0..2.0);
                            bbox(b.x1 + d, b.y1 + d, b.x2 + d, b.y2 + d)
                        };
                        (j(&g.human_box, &mut rng), j(&g.object_box, &mut rng))
                    } else {
                        (rand_box(&mut rng), rand_box(&mut rng))
                    };
                    HoiPrediction {
                        human_box: hb,
                        object_box: ob,
                        hoi_category: rng.gen_range(0..3),
                        score: rng.gen_range(0.0..1.0),
                    }
                })
                .collect();
            let got = match_scene(&preds, &gts, &vocab, MATCH_IOU);
            let gt_expanded: Vec<(usize, BoundingBox, BoundingBox)> = gts
                .iter()
                .flat_map(|t| {
                    t.actions
                        .iter()
                        .map(|&a| (vocab.hoi_index(a, 1).unwrap(), t.human_box, t.object_box))
                        .collect::<Vec<_>>()
                })
                .collect();
            let expect = greedy_oracle(&preds, &gt_expanded, MATCH_IOU);
            let got_flags: Vec<bool> = got.flags.iter().map(|&(_, _, tp)| tp).collect();
            assert_eq!(got_flags, expect);
        }
    }

    #[test]
    fn ap_reference_cases() {
        assert_eq!(average_precision(&[true, true], 2), Some(1.0));
        assert_eq!(average_precision(&[false, false], 2), Some(0.0));
        // [TP, FP, TP] with 2 gt: 1.0 * 0.5 + (2/3) * 0.5
        let ap = average_precision(&[true, false, true], 2).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(average_precision(&[], 0), None);
    }

    #[test]
    fn ap_is_invariant_under_monotone_score_rescaling() {
        // scores only enter through ordering, so pooling twice with rescaled
        // scores must give identical per-category APs
        let vocab = tiny_vocab(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mk = |score: f64, cat: usize, tp: bool| (cat, score, tp);
        let results: Vec<MatchResult> = (0..4)
            .map(|_| MatchResult {
                flags: (0..6)
                    .map(|_| mk(rng.gen_range(0.0..1.0), rng.gen_range(0..2), rng.gen_bool(0.4)))
                    .collect(),
                gt_counts: vec![3, 2],
            })
            .collect();
        let base = aggregate(&results, &vocab);
        let rescaled: Vec<MatchResult> = results
            .iter()
            .map(|r| MatchResult {
                flags: r.flags.iter().map(|&(c, s, t)| (c, s * s * 3.0 + 1.0, t)).collect(),
                gt_counts: r.gt_counts.clone(),
            })
            .collect();
        let again = aggregate(&rescaled, &vocab);
        assert_eq!(base.per_category, again.per_category);
    }

    #[test]
    fn trailing_fp_never_increases_ap() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let n = rng.gen_range(1..10usize);
            let flags: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            let gt = flags.iter().filter(|&&f| f).count().max(1);
            let base = average_precision(&flags, gt).unwrap();
            let mut with_fp = flags.clone();
            with_fp.push(false);
            let worse = average_precision(&with_fp, gt).unwrap();
            assert!(worse <= base + 1e-12);
        }
    }

    #[test]
    fn report_means_by_subset() {
        let aps = vec![Some(0.2), Some(0.6), Some(0.8)];
        let rare = vec![true, false, false];
        let r = map_report(&aps, &rare);
        assert!((r.full.unwrap() - (0.2 + 0.6 + 0.8) / 3.0).abs() < 1e-12);
        assert!((r.rare.unwrap() - 0.2).abs() < 1e-12);
        assert!((r.non_rare.unwrap() - 0.7).abs() < 1e-12);

        // zero-gt category is excluded, not counted as zero
        let aps2 = vec![Some(0.2), None, Some(0.6), Some(0.8)];
        let rare2 = vec![true, true, false, false];
        let r2 = map_report(&aps2, &rare2);
        assert_eq!(r2.full, r.full);
        assert_eq!(r2.rare, r.rare);
        assert_eq!(r2.non_rare, r.non_rare);

        let all_equal = map_report(&[Some(0.4), Some(0.4)], &[true, false]);
        assert_eq!(all_equal.full, Some(0.4));
        assert_eq!(all_equal.rare, Some(0.4));
        assert_eq!(all_equal.non_rare, Some(0.4));
    }

    #[test]
    fn human_category_constant_exists() {
        assert_eq!(PERSON_CATEGORY, 0);
    }
}
