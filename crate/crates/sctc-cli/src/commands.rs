//! Subcommand implementations.

use crate::TrainFlags;
use sctc_core::config::{AblationArm, RunConfig};
use sctc_core::ctd::{AdjacencyNorm, RelationToggles};
use sctc_core::error::{Error, Result};
use sctc_core::fixtures::{generate_dataset, load_dataset, save_dataset, DatasetConfig};
use sctc_core::gradcheck::{all_pass, check_model, format_report, micro_dataset, GradCheckOptions};
use sctc_core::sta::EdgeMode;
use sctc_core::train::{
    evaluate_model, load_checkpoint, loss_log_csv, save_checkpoint, train_model,
};
use std::path::{Path, PathBuf};

pub fn resolve_threads(flag: Option<usize>) -> usize {
    flag.or_else(|| {
        std::env::var("SCTC_THREADS").ok().and_then(|v| v.parse().ok())
    })
    .unwrap_or(1)
    .max(1)
}

pub struct GenArgs {
    pub out: PathBuf,
    pub seed: u64,
    pub scenes: usize,
    pub test_scenes: usize,
    pub objects: usize,
    pub actions: usize,
    pub actions_per_object: usize,
    pub appearance_noise: f64,
    pub map_noise: f64,
    pub shared_frac: f64,
    pub degrade_prob: f64,
    pub jitter_iou: f64,
}

pub fn gen(args: GenArgs) -> Result<()> {
    let cfg = DatasetConfig {
        seed: args.seed,
        train_scenes: args.scenes,
        test_scenes: args.test_scenes,
        num_objects: args.objects,
        num_actions: args.actions,
        actions_per_object: args.actions_per_object,
        appearance_noise: args.appearance_noise,
        map_noise: args.map_noise,
        shared_frac: args.shared_frac,
        degrade_prob: args.degrade_prob,
        jitter_iou: args.jitter_iou,
        ..DatasetConfig::default()
    };
    let dataset = generate_dataset(&cfg)?;
    save_dataset(&args.out, &dataset, &cfg)?;
    let triplets: usize = dataset
        .train
        .iter()
        .chain(&dataset.test)
        .map(|s| s.gt_triplets.len())
        .sum();
    println!(
        "wrote {} train / {} test scenes, {} HOI categories, {} gt triplets -> {}",
        dataset.train.len(),
        dataset.test.len(),
        dataset.vocab.num_hoi(),
        triplets,
        args.out.display()
    );
    Ok(())
}

pub fn run_config_from_flags(flags: &TrainFlags, threads: usize) -> Result<RunConfig> {
    let edge_mode = match flags.edge.as_str() {
        "if+sf" => EdgeMode::InteractionAndSpatial,
        "if" => EdgeMode::InteractionOnly,
        "sf" => EdgeMode::SpatialOnly,
        "le" => EdgeMode::Learnable,
        other => {
            return Err(Error::Config(format!(
                "unknown edge content '{other}' (expected if+sf, if, sf, le)"
            )))
        }
    };
    let relations = if flags.relations == "le" {
        RelationToggles { instance: false, semantic: false, layout: false, learnable: true }
    } else {
        let mut toggles =
            RelationToggles { instance: false, semantic: false, layout: false, learnable: false };
        for part in flags.relations.split(',').filter(|p| !p.is_empty()) {
            match part {
                "ir" => toggles.instance = true,
                "sr" => toggles.semantic = true,
                "lr" => toggles.layout = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown relation '{other}' (expected ir, sr, lr, or le alone)"
                    )))
                }
            }
        }
        toggles
    };
    let adjacency_norm = match flags.adj_norm.as_str() {
        "softmax" => AdjacencyNorm::Softmax,
        "sigmoid" => AdjacencyNorm::Sigmoid,
        "raw" => AdjacencyNorm::Raw,
        other => {
            return Err(Error::Config(format!(
                "unknown adjacency normalization '{other}'"
            )))
        }
    };
    let cfg = RunConfig {
        seed: flags.seed,
        k: flags.k,
        decoder_layers: flags.layers,
        alpha: flags.alpha,
        beta: flags.beta,
        gamma: flags.gamma,
        epochs: flags.epochs,
        batch_size: flags.batch,
        base_lr: flags.lr,
        weight_decay: flags.weight_decay,
        use_kd: !flags.no_kd && !flags.mlp_baseline,
        use_sta: !flags.no_sta && !flags.mlp_baseline,
        use_ctd: !flags.no_ctd && !flags.mlp_baseline,
        mlp_baseline: flags.mlp_baseline,
        edge_mode,
        relations,
        adjacency_norm,
        hard_ratio: flags.hard_ratio,
        pair_loss_over_all: flags.pair_loss_all,
        compose_without_interactiveness: flags.no_score_interactiveness,
        threads,
        ..RunConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(data: &Path, out: &Path, flags: &TrainFlags, threads: usize) -> Result<()> {
    let run = run_config_from_flags(flags, threads)?;
    let dataset = load_dataset(data)?;
    std::fs::create_dir_all(out)?;
    let mut print_epoch = |log: &sctc_core::train::EpochLog| {
        println!(
            "epoch {:>3}  L_kd {:.4}  L_pair {:.4}  L_a {:.4}  total {:.4}",
            log.epoch, log.kd, log.pair, log.action, log.total
        );
    };
    let (model, logs) = train_model(&dataset, &run, Some(&mut print_epoch))?;
    save_checkpoint(&out.join("checkpoint.sctc"), &model)?;
    std::fs::write(out.join("loss_log.csv"), loss_log_csv(&logs))?;
    println!("checkpoint -> {}", out.join("checkpoint.sctc").display());
    Ok(())
}

pub fn eval(
    data: &Path,
    checkpoint: &Path,
    out: &Path,
    split: &str,
    threads: usize,
) -> Result<()> {
    let dataset = load_dataset(data)?;
    let model = load_checkpoint(checkpoint)?;
    if model.cfg.num_objects != dataset.vocab.num_objects
        || model.cfg.num_actions != dataset.vocab.num_actions
        || model.cfg.d_f != dataset.vocab.embedding_dim()
    {
        return Err(Error::Load(
            "checkpoint dimensions do not match the dataset vocabulary".into(),
        ));
    }
    let scenes = match split {
        "test" => &dataset.test,
        "train" => &dataset.train,
        other => return Err(Error::Config(format!("unknown split '{other}'"))),
    };
    let report = evaluate_model(&model, scenes, &dataset.vocab, threads)?;
    std::fs::create_dir_all(out)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(out.join("metrics.json"), &json)?;
    let show = |v: Option<f64>| v.map_or("absent".to_string(), |x| format!("{x:.4}"));
    println!(
        "mAP full {}  rare {}  non-rare {}  ({} scenes)",
        show(report.full),
        show(report.rare),
        show(report.non_rare),
        scenes.len()
    );
    Ok(())
}

pub fn gradcheck(
    seed: u64,
    samples: usize,
    tolerance: f64,
    layers: usize,
    include_learnable: bool,
) -> Result<()> {
    let dataset = micro_dataset(seed);
    let opts = GradCheckOptions {
        samples_per_group: samples,
        tolerance,
        seed,
        ..Default::default()
    };
    let mut run = RunConfig { seed, decoder_layers: layers, ..RunConfig::default() };
    let mut failed = false;

    println!("default configuration:");
    let reports = check_model(&dataset, &run, &opts)?;
    print!("{}", format_report(&reports));
    failed |= !all_pass(&reports);

    if include_learnable {
        run.edge_mode = EdgeMode::Learnable;
        run.relations =
            RelationToggles { instance: false, semantic: false, layout: false, learnable: true };
        println!("learnable edge / learnable adjacency:");
        let reports = check_model(&dataset, &run, &opts)?;
        print!("{}", format_report(&reports));
        failed |= !all_pass(&reports);
    }

    if failed {
        return Err(Error::NonFinite {
            component: "gradcheck".into(),
            detail: format!("a parameter group exceeded {tolerance:.0e} relative error"),
        });
    }
    Ok(())
}

pub fn ablate(data: &Path, out: &Path, arms: &str, flags: &TrainFlags, threads: usize) -> Result<()> {
    let base = run_config_from_flags(flags, threads)?;
    let arms: Vec<AblationArm> = arms
        .split(',')
        .filter(|a| !a.is_empty())
        .map(AblationArm::parse)
        .collect::<Result<_>>()?;
    if arms.is_empty() {
        return Err(Error::Config("no ablation arms given".into()));
    }
    let dataset = load_dataset(data)?;
    std::fs::create_dir_all(out)?;
    let mut csv = String::from("arm,full,rare,non_rare\n");
    for arm in &arms {
        let run = arm.apply(&base);
        let (model, _) = train_model(&dataset, &run, None)?;
        let report = evaluate_model(&model, &dataset.test, &dataset.vocab, threads)?;
        let cell = |v: Option<f64>| v.map_or(String::from(""), |x| format!("{x:.6}"));
        csv.push_str(&format!(
            "{},{},{},{}\n",
            arm.name(),
            cell(report.full),
            cell(report.rare),
            cell(report.non_rare)
        ));
        println!(
            "{:<12} full {}  rare {}  non-rare {}",
            arm.name(),
            cell(report.full),
            cell(report.rare),
            cell(report.non_rare)
        );
    }
    std::fs::write(out.join("ablation.csv"), csv)?;
    Ok(())
}
