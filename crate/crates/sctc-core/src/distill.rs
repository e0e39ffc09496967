//! Knowledge-distillation targets and loss.
//!
//! Each candidate pair is regressed onto a fixed text embedding: positive
//! single-action pairs take their HOI row, positive multi-action pairs the
//! mean of their rows, and negative pairs the mean of the whole table, which
//! pushes their interaction features toward a common non-interactive cluster.

use crate::error::{Error, Result};
use crate::fixtures::{HoiVocabulary, Scene};
use crate::interaction::PairCandidate;
use crate::tape::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdProvenance {
    SingleHoi,
    MultiHoiAverage,
    NegativeAverage,
}

#[derive(Debug, Clone)]
pub struct KdTarget {
    pub embedding: Vec<f64>,
    pub provenance: KdProvenance,
}

/// Mean of all table rows, or of the HOI rows only when
/// `hoi_rows_only` is set (the non-interaction rows are then excluded).
pub fn negative_centroid(vocab: &HoiVocabulary, hoi_rows_only: bool) -> Vec<f64> {
    let d = vocab.embedding_dim();
    let rows = if hoi_rows_only {
        vocab.num_hoi()
    } else {
        vocab.text_embeddings.shape[0]
    };
    let mut mean = vec![0.0; d];
    for r in 0..rows {
        for (m, &v) in mean.iter_mut().zip(vocab.embedding_row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    mean
}

/// One distillation target per candidate pair.
pub fn build_targets(
    scene: &Scene,
    pairs: &[PairCandidate],
    vocab: &HoiVocabulary,
    negative_hoi_rows_only: bool,
) -> Result<Vec<KdTarget>> {
    let d = vocab.embedding_dim();
    let negative = negative_centroid(vocab, negative_hoi_rows_only);
    let mut out = Vec::with_capacity(pairs.len());
    for pair in pairs {
        if !pair.gt_interactive {
            out.push(KdTarget {
                embedding: negative.clone(),
                provenance: KdProvenance::NegativeAverage,
            });
            continue;
        }
        let object_category = scene.detections[pair.object_idx].category;
        let mut rows = Vec::with_capacity(pair.gt_actions.len());
        for &a in &pair.gt_actions {
            let row = vocab.hoi_index(a, object_category).ok_or_else(|| {
                Error::Vocab(format!(
                    "no HOI row for action {a} on object category {object_category}"
                ))
            })?;
            rows.push(row);
        }
        let mut mean = vec![0.0; d];
        for &r in &rows {
            for (m, &v) in mean.iter_mut().zip(vocab.embedding_row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
        out.push(KdTarget {
            embedding: mean,
            provenance: if rows.len() == 1 {
                KdProvenance::SingleHoi
            } else {
                KdProvenance::MultiHoiAverage
            },
        });
    }
    Ok(out)
}

/// Stack targets into a constant [N, d] tensor on the tape.
pub fn targets_to_var(tape: &mut Tape, targets: &[KdTarget]) -> Var {
    let d = targets.first().map_or(0, |t| t.embedding.len());
    let mut data = Vec::with_capacity(targets.len() * d);
    for t in targets {
        data.extend_from_slice(&t.embedding);
    }
    tape.constant(Tensor { shape: vec![targets.len(), d], data })
}

/// L_kd = (1/N) * sum |E - F|, the per-pair L1 distance summed over feature
/// dimensions and averaged over pairs. `features` and `targets` are [N, d].
pub fn kd_loss(tape: &mut Tape, features: Var, targets: Var) -> Result<Var> {
    let shape_f = tape.value(features).shape.clone();
    let shape_e = tape.value(targets).shape.clone();
    if shape_f != shape_e || shape_f.len() != 2 {
        return Err(Error::Dim(format!(
            "kd_loss: features {shape_f:?} vs targets {shape_e:?}"
        )));
    }
    let n = shape_f[0].max(1);
    let diff = tape.sub(targets, features)?;
    let l1 = tape.abs(diff);
    let total = tape.sum(l1);
    Ok(tape.scale(total, 1.0 / n as f64))
}
