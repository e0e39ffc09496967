//! Training loop, checkpoint container, and test-set evaluation.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{aggregate, match_scene, MapReport, MatchResult, MATCH_IOU};
use crate::fixtures::blob::{write_blob, BlobReader, Dtype};
use crate::fixtures::{Dataset, HoiVocabulary, Scene};
use crate::interaction::{enumerate_pairs, sample_training_pairs, PairCandidate};
use crate::model::{Model, ModelConfig};
use crate::optim::AdamW;
use crate::tape::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Mean loss components over one epoch.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub kd: f64,
    pub pair: f64,
    pub action: f64,
    pub total: f64,
}

fn mix(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut x = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(x ^ (x >> 29))
}

const TAG_ORDER: u64 = 1;
const TAG_SAMPLE: u64 = 2;

/// Train a fresh model on the dataset's train split. Deterministic given the
/// run seed. `on_epoch` observes each epoch's mean losses.
pub fn train_model(
    dataset: &Dataset,
    run: &RunConfig,
    mut on_epoch: Option<&mut dyn FnMut(&EpochLog)>,
) -> Result<(Model, Vec<EpochLog>)> {
    run.validate()?;
    let cfg = ModelConfig::for_dataset(run.clone(), dataset)?;
    let mut model = Model::new(cfg)?;
    let mut opt = AdamW::new(&model.store, run.base_lr, run.weight_decay, run.epochs);

    // pair candidates are a pure function of the scene; build them once
    let candidates: Vec<Vec<PairCandidate>> =
        dataset.train.iter().map(enumerate_pairs).collect();

    let mut logs = Vec::with_capacity(run.epochs);
    for epoch in 0..run.epochs {
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        let mut order_rng = mix(run.seed, TAG_ORDER, epoch as u64);
        for i in (1..order.len()).rev() {
            let j = order_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut sums = [0.0f64; 4];
        let mut counted = 0usize;
        for batch in order.chunks(run.batch_size) {
            model.store.zero_grads();
            let mut contributed = 0usize;
            for &scene_idx in batch {
                let scene = &dataset.train[scene_idx];
                let all = &candidates[scene_idx];
                if all.is_empty() {
                    continue;
                }
                // hard negatives need model scores; the first epoch has none
                // and falls back to random negatives
                let scores = if epoch == 0 {
                    None
                } else {
                    Some(model.score_candidates(scene, all)?)
                };
                let mut sample_rng = mix(
                    run.seed,
                    TAG_SAMPLE,
                    (epoch * dataset.train.len() + scene_idx) as u64,
                );
                let picked = sample_training_pairs(
                    all,
                    run.hard_ratio,
                    scores.as_deref(),
                    &mut sample_rng,
                );
                let subset: Vec<PairCandidate> =
                    picked.iter().map(|&i| all[i].clone()).collect();

                let mut tape = Tape::new();
                let out = model.forward(&mut tape, scene, &dataset.vocab, &subset, true)?;
                let Some(losses) = out.losses else { continue };
                let values = [
                    tape.value(losses.kd).data[0],
                    tape.value(losses.pair).data[0],
                    tape.value(losses.action).data[0],
                    tape.value(losses.total).data[0],
                ];
                for (name, v) in ["L_kd", "L_pair", "L_a", "total"].iter().zip(values) {
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            component: name.to_string(),
                            detail: format!("scene {} epoch {epoch}", scene.id),
                        });
                    }
                }
                tape.backward(losses.total)?;
                model.store.harvest(&tape, 1.0 / batch.len() as f64);
                for (s, v) in sums.iter_mut().zip(values) {
                    *s += v;
                }
                counted += 1;
                contributed += 1;
            }
            if contributed > 0 {
                opt.step(&mut model.store, epoch)?;
            }
        }
        let n = counted.max(1) as f64;
        let log = EpochLog {
            epoch,
            kd: sums[0] / n,
            pair: sums[1] / n,
            action: sums[2] / n,
            total: sums[3] / n,
        };
        if let Some(cb) = on_epoch.as_deref_mut() {
            cb(&log);
        }
        logs.push(log);
    }
    Ok((model, logs))
}

/// Forward every scene and pool the per-scene matching into Full/Rare/
/// Non-Rare mAP. Pure per scene; parallelizes across scenes when
/// `threads > 1` with results folded in scene order.
pub fn evaluate_model(
    model: &Model,
    scenes: &[Scene],
    vocab: &HoiVocabulary,
    threads: usize,
) -> Result<MapReport> {
    let eval_one = |scene: &Scene| -> Result<MatchResult> {
        let pairs = enumerate_pairs(scene);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, scene, vocab, &pairs, false)?;
        Ok(match_scene(&out.predictions, &scene.gt_triplets, vocab, MATCH_IOU))
    };
    let results: Vec<MatchResult> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            scenes.par_iter().map(eval_one).collect::<Result<Vec<_>>>()
        })?
    } else {
        scenes.iter().map(eval_one).collect::<Result<Vec<_>>>()?
    };
    Ok(aggregate(&results, vocab))
}

pub fn loss_log_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,L_kd,L_pair,L_a,total\n");
    for l in logs {
        out.push_str(&format!(
            "{},{:.12},{:.12},{:.12},{:.12}\n",
            l.epoch, l.kd, l.pair, l.action, l.total
        ));
    }
    out
}

// ─── Checkpoints ─────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

/// Checkpoint = JSON header (config + parameter manifest) followed by one
/// f64 blob per parameter, in manifest order.
pub fn checkpoint_to_bytes(model: &Model) -> Vec<u8> {
    let meta = CheckpointMeta {
        config: model.cfg.clone(),
        params: model
            .store
            .iter()
            .map(|(_, p)| ParamEntry { name: p.name.clone(), shape: p.value.shape.clone() })
            .collect(),
    };
    let mut out = serde_json::to_vec(&meta).expect("checkpoint header serializes");
    for (_, p) in model.store.iter() {
        write_blob(&mut out, &p.value, Dtype::F64);
    }
    out
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<Model> {
    let mut iter = serde_json::Deserializer::from_slice(buf).into_iter::<CheckpointMeta>();
    let meta = match iter.next() {
        Some(Ok(m)) => m,
        Some(Err(e)) => {
            return Err(Error::Parse { offset: 0, msg: format!("bad checkpoint header: {e}") })
        }
        None => return Err(Error::Parse { offset: 0, msg: "empty checkpoint".into() }),
    };
    let offset = iter.byte_offset();
    let mut model = Model::new(meta.config)?;
    if meta.params.len() != model.store.len() {
        return Err(Error::Load(format!(
            "checkpoint lists {} parameters, model has {}",
            meta.params.len(),
            model.store.len()
        )));
    }
    let mut reader = BlobReader::new(buf, offset);
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    for (entry, id) in meta.params.iter().zip(ids) {
        let expect_name = model.store.get(id).name.clone();
        if entry.name != expect_name {
            return Err(Error::Load(format!(
                "checkpoint parameter '{}' does not match model parameter '{expect_name}'",
                entry.name
            )));
        }
        let tensor = reader.read_blob(&entry.name, Some(Dtype::F64))?;
        if tensor.shape != model.store.value(id).shape {
            return Err(Error::Load(format!(
                "parameter '{}' has shape {:?} in the checkpoint, model expects {:?}",
                entry.name,
                tensor.shape,
                model.store.value(id).shape
            )));
        }
        *model.store.value_mut(id) = tensor;
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let buf = std::fs::read(path)?;
    checkpoint_from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{generate_dataset, DatasetConfig};

    fn micro_dataset() -> Dataset {
        generate_dataset(&DatasetConfig {
            train_scenes: 6,
            test_scenes: 3,
            ..DatasetConfig::default()
        })
        .unwrap()
    }

    fn micro_run() -> RunConfig {
        RunConfig {
            seed: 11,
            epochs: 2,
            batch_size: 3,
            decoder_layers: 2,
            k: 8,
            ..RunConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_logged() {
        let ds = micro_dataset();
        let run = micro_run();
        let (m1, logs1) = train_model(&ds, &run, None).unwrap();
        let (m2, logs2) = train_model(&ds, &run, None).unwrap();
        assert_eq!(checkpoint_to_bytes(&m1), checkpoint_to_bytes(&m2));
        assert_eq!(logs1.len(), run.epochs);
        for (a, b) in logs1.iter().zip(&logs2) {
            assert_eq!(a.total, b.total);
        }
        // total column recomposes from the weighted parts
        for l in &logs1 {
            assert!((l.total - (l.kd + l.pair + l.action)).abs() < 1e-9);
        }
    }

    #[test]
    fn kd_column_zeroes_without_kd() {
        let ds = micro_dataset();
        let mut run = micro_run();
        run.use_kd = false;
        let (_, logs) = train_model(&ds, &run, None).unwrap();
        assert!(logs.iter().all(|l| l.kd == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let ds = micro_dataset();
        let (model, _) = train_model(&ds, &micro_run(), None).unwrap();
        let bytes = checkpoint_to_bytes(&model);
        let restored = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(bytes, checkpoint_to_bytes(&restored));

        // restored model evaluates identically
        let a = evaluate_model(&model, &ds.test, &ds.vocab, 1).unwrap();
        let b = evaluate_model(&restored, &ds.test, &ds.vocab, 1).unwrap();
        assert_eq!(a.full, b.full);
        assert_eq!(a.per_category, b.per_category);
    }

    #[test]
    fn corrupt_checkpoint_is_a_load_or_parse_error() {
        let ds = micro_dataset();
        let (model, _) = train_model(&ds, &micro_run(), None).unwrap();
        let bytes = checkpoint_to_bytes(&model);
        // truncate into the blob section
        let cut = &bytes[..bytes.len() - 9];
        assert!(matches!(
            checkpoint_from_bytes(cut),
            Err(Error::Parse { .. }) | Err(Error::Load(_))
        ));
    }

    #[test]
    fn evaluation_is_thread_count_invariant() {
        let ds = micro_dataset();
        let (model, _) = train_model(&ds, &micro_run(), None).unwrap();
        let one = evaluate_model(&model, &ds.test, &ds.vocab, 1).unwrap();
        let four = evaluate_model(&model, &ds.test, &ds.vocab, 4).unwrap();
        assert_eq!(one.full, four.full);
        assert_eq!(one.per_category, four.per_category);
    }

    #[test]
    fn csv_has_one_row_per_epoch() {
        let logs = vec![
            EpochLog { epoch: 0, kd: 1.0, pair: 2.0, action: 3.0, total: 6.0 },
            EpochLog { epoch: 1, kd: 0.5, pair: 1.0, action: 1.5, total: 3.0 },
        ];
        let csv = loss_log_csv(&logs);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("epoch,L_kd,L_pair,L_a,total"));
    }
}
