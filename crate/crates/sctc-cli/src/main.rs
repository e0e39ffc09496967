//! Command-line driver for the interaction head: dataset generation,
//! training, evaluation, gradient verification, and ablation sweeps.
//!
//! Exit codes: 0 success, 1 configuration error, 2 IO/parse error,
//! 3 numerical failure.

mod commands;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "sctc", version, about = "Two-stage human-object interaction head on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    /// Run seed: initialization, shuffling, negative sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Base step size (cosine-annealed to 0 over the epochs).
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    /// Proposals kept by top-K selection.
    #[arg(long, default_value_t = 32)]
    k: usize,
    /// Action decoder layers.
    #[arg(long, default_value_t = 6)]
    layers: usize,
    /// Distillation loss weight.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Pairing loss weight.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Action loss weight.
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 3.0)]
    hard_ratio: f64,
    /// Disable the distillation loss.
    #[arg(long)]
    no_kd: bool,
    /// Disable self-triplet message passing.
    #[arg(long)]
    no_sta: bool,
    /// Disable the cross-triplet update.
    #[arg(long)]
    no_ctd: bool,
    /// Plain feature-fusion baseline (implies --no-kd --no-sta --no-ctd).
    #[arg(long)]
    mlp_baseline: bool,
    /// Edge content: if+sf, if, sf, or le.
    #[arg(long, default_value = "if+sf")]
    edge: String,
    /// Adjacency relations: comma list of ir,sr,lr or just le.
    #[arg(long, default_value = "ir,sr,lr")]
    relations: String,
    /// Adjacency normalization: softmax, sigmoid, or raw.
    #[arg(long, default_value = "softmax")]
    adj_norm: String,
    /// Pairing loss over all candidates instead of the selected top-K.
    #[arg(long)]
    pair_loss_all: bool,
    /// Drop the interactiveness factor from composite scores.
    #[arg(long)]
    no_score_interactiveness: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Training scenes.
        #[arg(long, default_value_t = 200)]
        scenes: usize,
        #[arg(long, default_value_t = 50)]
        test_scenes: usize,
        /// Object categories including "person".
        #[arg(long, default_value_t = 6)]
        objects: usize,
        #[arg(long, default_value_t = 6)]
        actions: usize,
        #[arg(long, default_value_t = 3)]
        actions_per_object: usize,
        #[arg(long, default_value_t = 0.35)]
        appearance_noise: f64,
        #[arg(long, default_value_t = 0.35)]
        map_noise: f64,
        /// Fraction of scenes with a triplet pair sharing an instance.
        #[arg(long, default_value_t = 0.5)]
        shared_frac: f64,
        /// Probability of a cue-degraded correlated triplet per scene.
        #[arg(long, default_value_t = 0.3)]
        degrade_prob: f64,
        #[arg(long, default_value_t = 0.7)]
        jitter_iou: f64,
    },
    /// Train a model and write checkpoint.sctc plus loss_log.csv.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
        /// Evaluation threads (env SCTC_THREADS as fallback).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Evaluate a checkpoint and write metrics.json.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which split to evaluate: test or train.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Finite-difference verification of every parameter group.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 24)]
        samples: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 6)]
        layers: usize,
        /// Also check the learnable-edge / learnable-adjacency variants.
        #[arg(long)]
        include_learnable: bool,
    },
    /// Train and evaluate a list of ablation arms with a shared seed.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma list: mlp,kd,kd+sta,kd+ctd,kd+sta+ctd.
        #[arg(long, default_value = "mlp,kd,kd+sta,kd+ctd,kd+sta+ctd")]
        arms: String,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen {
            out,
            seed,
            scenes,
            test_scenes,
            objects,
            actions,
            actions_per_object,
            appearance_noise,
            map_noise,
            shared_frac,
            degrade_prob,
            jitter_iou,
        } => commands::gen(commands::GenArgs {
            out,
            seed,
            scenes,
            test_scenes,
            objects,
            actions,
            actions_per_object,
            appearance_noise,
            map_noise,
            shared_frac,
            degrade_prob,
            jitter_iou,
        }),
        Command::Train { data, out, flags, threads } => {
            commands::train(&data, &out, &flags, commands::resolve_threads(threads))
        }
        Command::Eval { data, checkpoint, out, split, threads } => {
            commands::eval(&data, &checkpoint, &out, &split, commands::resolve_threads(threads))
        }
        Command::Gradcheck { seed, samples, tolerance, layers, include_learnable } => {
            commands::gradcheck(seed, samples, tolerance, layers, include_learnable)
        }
        Command::Ablate { data, out, arms, flags, threads } => {
            commands::ablate(&data, &out, &arms, &flags, commands::resolve_threads(threads))
        }
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
