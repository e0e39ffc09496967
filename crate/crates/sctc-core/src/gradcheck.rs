//! Whole-model gradient verification: central finite differences over the
//! composed forward pass, reported per parameter group.
//!
//! The finite-difference side only ever calls the forward pass, so it stays
//! independent of the reverse-mode implementation it checks.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fixtures::{generate_dataset, Dataset, DatasetConfig};
use crate::interaction::{enumerate_pairs, sample_training_pairs, PairCandidate};
use crate::model::{Model, ModelConfig};
use crate::tape::{ParamId, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub samples_per_group: usize,
    pub tolerance: f64,
    pub step: f64,
    pub seed: u64,
    /// Test hook: corrupt the analytic gradients of one group so the check
    /// must flag it.
    pub corrupt_group: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            samples_per_group: 24,
            tolerance: 1e-4,
            step: 1e-5,
            seed: 7,
            corrupt_group: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub group: String,
    pub parameters: usize,
    pub samples: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Two scenes are enough to exercise every loss term.
pub fn micro_dataset(seed: u64) -> Dataset {
    generate_dataset(&DatasetConfig {
        seed,
        train_scenes: 2,
        test_scenes: 1,
        shared_frac: 1.0,
        degrade_prob: 1.0,
        ..DatasetConfig::default()
    })
    .expect("micro dataset config is valid")
}

fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Verify every trainable parameter group of a model built from `run`
/// against central finite differences of the summed scene losses.
pub fn check_model(
    dataset: &Dataset,
    run: &RunConfig,
    opts: &GradCheckOptions,
) -> Result<Vec<GroupReport>> {
    let cfg = ModelConfig::for_dataset(run.clone(), dataset)?;
    let mut model = Model::new(cfg)?;

    // freeze the training subsets once; every probe sees the same pairs
    let mut sample_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let subsets: Vec<(usize, Vec<PairCandidate>)> = dataset
        .train
        .iter()
        .enumerate()
        .map(|(i, scene)| {
            let all = enumerate_pairs(scene);
            let picked = sample_training_pairs(&all, run.hard_ratio, None, &mut sample_rng);
            (i, picked.into_iter().map(|p| all[p].clone()).collect())
        })
        .collect();

    let loss_of = |model: &Model| -> Result<f64> {
        let mut total = 0.0;
        for (scene_idx, subset) in &subsets {
            let scene = &dataset.train[*scene_idx];
            if subset.is_empty() {
                continue;
            }
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, scene, &dataset.vocab, subset, true)?;
            if let Some(losses) = out.losses {
                total += tape.value(losses.total).data[0];
            }
        }
        Ok(total)
    };

    // analytic gradients of the same summed loss
    model.store.zero_grads();
    for (scene_idx, subset) in &subsets {
        let scene = &dataset.train[*scene_idx];
        if subset.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, scene, &dataset.vocab, subset, true)?;
        if let Some(losses) = out.losses {
            tape.backward(losses.total)?;
            model.store.harvest(&tape, 1.0);
        }
    }

    let mut analytic: Vec<Vec<f64>> = Vec::with_capacity(model.store.len());
    let trainables: Vec<(ParamId, String)> = model
        .store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.name.clone()))
        .collect();
    for (id, name) in &trainables {
        let mut g = model
            .store
            .grad(*id)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?
            .to_vec();
        if let Some(corrupt) = &opts.corrupt_group {
            if group_of(name) == corrupt {
                for v in &mut g {
                    *v = *v * 1.5 + 0.05;
                }
            }
        }
        analytic.push(g);
    }

    // gather groups preserving first-seen order
    let mut groups: Vec<String> = Vec::new();
    for (_, name) in &trainables {
        let g = group_of(name).to_string();
        if !groups.contains(&g) {
            groups.push(g);
        }
    }

    let mut probe_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5AD0);
    let mut reports = Vec::with_capacity(groups.len());
    for group in groups {
        // flat index space over the group's parameters
        let members: Vec<(usize, ParamId, usize)> = trainables
            .iter()
            .enumerate()
            .filter(|(_, (_, name))| group_of(name) == group)
            .flat_map(|(ti, (id, _))| {
                let n = model.store.value(*id).numel();
                (0..n).map(move |j| (ti, *id, j))
            })
            .collect();
        let total_entries = members.len();
        let samples = opts.samples_per_group.min(total_entries);
        let mut max_rel = 0.0f64;
        for _ in 0..samples {
            let (ti, id, j) = members[probe_rng.gen_range(0..total_entries)];
            let original = model.store.value(id).data[j];
            model.store.value_mut(id).data[j] = original + opts.step;
            let up = loss_of(&model)?;
            model.store.value_mut(id).data[j] = original - opts.step;
            let down = loss_of(&model)?;
            model.store.value_mut(id).data[j] = original;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[ti][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            max_rel = max_rel.max(rel);
        }
        let parameters = trainables
            .iter()
            .filter(|(_, name)| group_of(name) == group)
            .count();
        reports.push(GroupReport {
            group,
            parameters,
            samples,
            max_rel_err: max_rel,
            pass: max_rel <= opts.tolerance,
        });
    }
    Ok(reports)
}

pub fn all_pass(reports: &[GroupReport]) -> bool {
    reports.iter().all(|r| r.pass)
}

pub fn format_report(reports: &[GroupReport]) -> String {
    let mut out = String::from("group        params  samples  max_rel_err  status\n");
    for r in reports {
        out.push_str(&format!(
            "{:<12} {:>6}  {:>7}  {:>11.3e}  {}\n",
            r.group,
            r.parameters,
            r.samples,
            r.max_rel_err,
            if r.pass { "pass" } else { "FAIL" }
        ));
    }
    out
}
