//! The full interaction head: instance features, pair features, distillation,
//! self-triplet aggregation, top-K selection, cross-triplet dependency, and
//! the action decoder, assembled over one tape per scene.

use crate::config::RunConfig;
use crate::ctd::{ctd_update, CtdParams, ProposalMeta};
use crate::decoder::{
    action_loss, compose_predictions, position_encoding_2d, DecoderParams,
};
use crate::distill::{build_targets, kd_loss, targets_to_var};
use crate::error::{Error, Result};
use crate::evaluation::HoiPrediction;
use crate::fixtures::{Dataset, HoiVocabulary, Scene};
use crate::interaction::{PairCandidate, SPATIAL_DIM};
use crate::sta::{pair_loss, select_topk, StaParams, TripletState};
use crate::tape::{name_seeded_rng, Binder, ParamId, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Run configuration plus the widths read from a concrete dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub run: RunConfig,
    pub d_app: usize,
    /// Learned object-category embedding width.
    pub d_sem: usize,
    /// Interaction-feature width; equals the text-embedding width so the
    /// distillation loss needs no extra projection.
    pub d_f: usize,
    /// Node width in the pair graph; kept equal to d_f so the edge gate
    /// types out.
    pub d_node: usize,
    pub d_map: usize,
    pub map_hw: (usize, usize),
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub num_objects: usize,
    pub num_actions: usize,
}

impl ModelConfig {
    pub fn for_dataset(run: RunConfig, dataset: &Dataset) -> Result<Self> {
        run.validate()?;
        let scene = dataset
            .train
            .first()
            .or(dataset.test.first())
            .ok_or_else(|| Error::Config("dataset has no scenes".into()))?;
        let d_app = scene
            .detections
            .first()
            .map(|d| d.appearance.len())
            .ok_or_else(|| Error::Config("first scene has no detections".into()))?;
        let fm = &scene.feature_map.shape;
        let d_f = dataset.vocab.embedding_dim();
        Ok(Self {
            run,
            d_app,
            d_sem: 16,
            d_f,
            d_node: d_f,
            d_map: fm[2],
            map_hw: (fm[0], fm[1]),
            d_model: 64,
            heads: 4,
            d_ff: 128,
            num_objects: dataset.vocab.num_objects,
            num_actions: dataset.vocab.num_actions,
        })
    }
}

/// Differentiable loss terms of one scene, all on the same tape.
#[derive(Debug, Clone, Copy)]
pub struct LossBundle {
    pub total: Var,
    pub kd: Var,
    pub pair: Var,
    pub action: Var,
}

#[derive(Debug)]
pub struct ForwardOutput {
    pub losses: Option<LossBundle>,
    pub predictions: Vec<HoiPrediction>,
    /// Interactiveness score per input candidate.
    pub candidate_scores: Vec<f64>,
    /// Indices of the selected proposals into the candidate list.
    pub selected: Vec<usize>,
    pub proposal_meta: Vec<ProposalMeta>,
    pub adjacency: Option<Var>,
    /// Proposal features entering the decoder, [K', 2 * d_node].
    pub nu_stack: Option<Var>,
    pub action_probs: Option<Var>,
    /// Softmax attention nodes, per layer and head.
    pub attention: Vec<Var>,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub embed_obj: ParamId,
    pub pair_hidden: (ParamId, ParamId),
    pub pair_out: (ParamId, ParamId),
    /// Fusion head for the graph-free arms: projects the interaction feature
    /// to the proposal width, standing in for the STA node pathway.
    pub pair_fuse: (ParamId, ParamId),
    pub sta: StaParams,
    pub ctd: CtdParams,
    pub decoder: DecoderParams,
    position_encoding: Tensor,
}

struct PairStage {
    interaction_features: Vec<Var>,
    nu_hoi: Vec<Var>,
    score_vars: Vec<Var>,
    scores: Vec<f64>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.run.validate()?;
        let seed = cfg.run.seed;
        let mut store = ParamStore::new();

        let limit = (6.0 / (cfg.num_objects + cfg.d_sem) as f64).sqrt();
        let mut rng = name_seeded_rng(seed, "embed.obj");
        let embed_obj = store.register_constant(
            "embed.obj",
            Tensor::uniform(&[cfg.num_objects, cfg.d_sem], limit, &mut rng),
        );

        let d_instance = cfg.d_app + cfg.d_sem;
        let d_pair_in = 2 * d_instance + SPATIAL_DIM;
        let pair_hidden = store.register_linear(seed, "pair.l1", d_pair_in, cfg.d_f);
        let pair_out = store.register_linear(seed, "pair.l2", cfg.d_f, cfg.d_f);
        let pair_fuse = store.register_linear(seed, "fuse.pair", cfg.d_f, 2 * cfg.d_node);

        let sta = StaParams::register(
            &mut store,
            seed,
            d_instance,
            cfg.d_f,
            SPATIAL_DIM,
            cfg.d_node,
            cfg.run.edge_mode,
        );
        let ctd = CtdParams::register(
            &mut store,
            seed,
            cfg.num_objects,
            cfg.run.k,
            cfg.run.relations,
            cfg.run.adjacency_norm,
        );
        let decoder = DecoderParams::register(
            &mut store,
            seed,
            2 * cfg.d_node,
            cfg.d_map,
            cfg.d_model,
            cfg.heads,
            cfg.d_ff,
            cfg.run.decoder_layers,
            cfg.num_actions,
        );
        let position_encoding = position_encoding_2d(cfg.map_hw.0, cfg.map_hw.1, cfg.d_model);

        let mut model = Self {
            cfg,
            store,
            embed_obj,
            pair_hidden,
            pair_out,
            pair_fuse,
            sta,
            ctd,
            decoder,
            position_encoding,
        };
        model.apply_trainability();
        Ok(model)
    }

    /// Disabled modules keep their (name-seeded, arm-independent) parameters
    /// but stay out of the optimizer.
    fn apply_trainability(&mut self) {
        let run = &self.cfg.run;
        let mut frozen: Vec<ParamId> = Vec::new();
        let mut freeze_pair = |frozen: &mut Vec<ParamId>, (w, b): (ParamId, ParamId)| {
            frozen.push(w);
            frozen.push(b);
        };
        if run.use_sta {
            // graph pathway active; the fusion stand-in is unused
            freeze_pair(&mut frozen, self.pair_fuse);
        } else {
            for p in [
                self.sta.node_human,
                self.sta.node_object,
                self.sta.msg_edge,
                self.sta.msg_human,
                self.sta.msg_object,
            ] {
                freeze_pair(&mut frozen, p);
            }
            if let Some(p) = self.sta.edge_proj {
                freeze_pair(&mut frozen, p);
            }
            if let Some(e) = self.sta.edge_learnable {
                frozen.push(e);
            }
        }
        // the interaction feature feeds the fusion head or the edge gate;
        // with a feature-free edge and no distillation it is unused
        let edge_uses_f = matches!(
            run.edge_mode,
            crate::sta::EdgeMode::InteractionAndSpatial | crate::sta::EdgeMode::InteractionOnly
        );
        if run.use_sta && !edge_uses_f && !run.use_kd {
            freeze_pair(&mut frozen, self.pair_hidden);
            freeze_pair(&mut frozen, self.pair_out);
        }
        if !self.cfg.run.use_ctd {
            let pairs = [
                self.ctd.ins_embed,
                self.ctd.sem_embed,
                self.ctd.lay_embed,
                self.ctd.fuse_hidden,
                self.ctd.fuse_out,
            ];
            for (w, b) in pairs.into_iter().flatten() {
                self.store.set_trainable(w, false);
                self.store.set_trainable(b, false);
            }
            if let Some(a) = self.ctd.learnable_adj {
                self.store.set_trainable(a, false);
            }
        }
    }

    /// Instance feature: appearance concatenated with the learned category
    /// embedding. Detections are shared across pairs, so each is built once.
    fn instance_feature(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        scene: &Scene,
        det_idx: usize,
        cache: &mut [Option<Var>],
    ) -> Result<Var> {
        if let Some(v) = cache[det_idx] {
            return Ok(v);
        }
        let det = &scene.detections[det_idx];
        let appearance = tape.constant(Tensor::from_vec(det.appearance.clone()));
        let table = binder.var(tape, self.embed_obj);
        let semantic = tape.select_row(table, det.category)?;
        let combined = tape.concat(&[appearance, semantic])?;
        cache[det_idx] = Some(combined);
        Ok(combined)
    }

    /// Pair features, STA states, and interactiveness scores for a set of
    /// candidates.
    fn pair_stage(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        scene: &Scene,
        candidates: &[PairCandidate],
    ) -> Result<PairStage> {
        let mut cache = vec![None; scene.detections.len()];
        let mut interaction_features = Vec::with_capacity(candidates.len());
        let mut states = Vec::with_capacity(candidates.len());
        let mut scores = Vec::with_capacity(candidates.len());
        let (w1, b1) = self.pair_hidden;
        let (w2, b2) = self.pair_out;
        for cand in candidates {
            let feat_h = self.instance_feature(tape, binder, scene, cand.human_idx, &mut cache)?;
            let feat_o = self.instance_feature(tape, binder, scene, cand.object_idx, &mut cache)?;
            let spatial = tape.constant(Tensor::from_vec(cand.spatial.to_vec()));
            let pair_in = tape.concat(&[feat_h, feat_o, spatial])?;
            let w1v = binder.var(tape, w1);
            let b1v = binder.var(tape, b1);
            let w2v = binder.var(tape, w2);
            let b2v = binder.var(tape, b2);
            let f = tape.mlp(pair_in, &[(w1v, b1v), (w2v, b2v)])?;
            let state = self.sta.forward(
                tape,
                binder,
                feat_h,
                feat_o,
                f,
                spatial,
                self.cfg.run.use_sta,
            )?;
            scores.push(tape.value(state.score).data[0]);
            interaction_features.push(f);
            states.push(state);
        }
        Ok(PairStage { interaction_features, states, scores })
    }

    /// Interactiveness scores only; used for hard-negative mining.
    pub fn score_candidates(
        &self,
        scene: &Scene,
        candidates: &[PairCandidate],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store);
        Ok(self.pair_stage(&mut tape, &mut binder, scene, candidates)?.scores)
    }

    /// Full pipeline over the given candidates. With `training` the three
    /// losses come back on the tape; predictions are composed either way.
    pub fn forward(
        &self,
        tape: &mut Tape,
        scene: &Scene,
        vocab: &HoiVocabulary,
        candidates: &[PairCandidate],
        training: bool,
    ) -> Result<ForwardOutput> {
        if candidates.is_empty() {
            return Ok(ForwardOutput {
                losses: None,
                predictions: Vec::new(),
                candidate_scores: Vec::new(),
                selected: Vec::new(),
                proposal_meta: Vec::new(),
                adjacency: None,
                nu_stack: None,
                action_probs: None,
                attention: Vec::new(),
            });
        }
        let run = &self.cfg.run;
        let mut binder = Binder::new(&self.store);
        let stage = self.pair_stage(tape, &mut binder, scene, candidates)?;

        // distillation over the candidate set
        let kd = if training && run.use_kd {
            let stacked = tape.stack_rows(&stage.interaction_features)?;
            let targets = build_targets(scene, candidates, vocab, run.kd_negative_hoi_rows_only)?;
            let target_var = targets_to_var(tape, &targets);
            kd_loss(tape, stacked, target_var)?
        } else {
            tape.scalar(0.0)
        };

        // top-K selection by interactiveness
        let selected = select_topk(&stage.scores, run.k);
        let proposal_meta: Vec<ProposalMeta> = selected
            .iter()
            .map(|&i| {
                let c = &candidates[i];
                let h = &scene.detections[c.human_idx];
                let o = &scene.detections[c.object_idx];
                ProposalMeta {
                    human_idx: c.human_idx,
                    object_idx: c.object_idx,
                    human_box: h.bbox,
                    object_box: o.bbox,
                    object_category: o.category,
                    human_score: h.score,
                    object_score: o.score,
                }
            })
            .collect();

        // pairing loss over the selected proposals (or every candidate)
        let pair = if training {
            let (vars, labels): (Vec<Var>, Vec<f64>) = if run.pair_loss_over_all {
                (0..candidates.len())
                    .map(|i| (stage.states[i].score, candidates[i].gt_interactive as u8 as f64))
                    .unzip()
            } else {
                selected
                    .iter()
                    .map(|&i| (stage.states[i].score, candidates[i].gt_interactive as u8 as f64))
                    .unzip()
            };
            pair_loss(tape, &vars, &labels, run.focal_gamma, run.focal_alpha)?
        } else {
            tape.scalar(0.0)
        };

        // cross-triplet dependency over the selected proposals
        let nu_rows: Vec<Var> = selected.iter().map(|&i| stage.states[i].nu_hoi).collect();
        let nu_stack = tape.stack_rows(&nu_rows)?;
        let (nu_final, adjacency) = if run.use_ctd {
            let adj =
                self.ctd
                    .fuse_adjacency(tape, &mut binder, &proposal_meta, scene.width, scene.height)?;
            (ctd_update(tape, adj, nu_stack)?, Some(adj))
        } else {
            (nu_stack, None)
        };

        // action decoding against the scene feature map
        let hw = self.cfg.map_hw.0 * self.cfg.map_hw.1;
        let fmap = tape.constant(Tensor {
            shape: vec![hw, self.cfg.d_map],
            data: scene.feature_map.data.clone(),
        });
        let mut attention = Vec::new();
        let decoded = self.decoder.decode(
            tape,
            &mut binder,
            nu_final,
            fmap,
            &self.position_encoding,
            &mut attention,
        )?;
        let probs = self.decoder.action_probs(tape, &mut binder, decoded)?;

        let action = if training {
            let mut labels = vec![0.0; selected.len() * self.cfg.num_actions];
            for (row, &i) in selected.iter().enumerate() {
                for &a in &candidates[i].gt_actions {
                    labels[row * self.cfg.num_actions + a] = 1.0;
                }
            }
            action_loss(tape, probs, &labels, run.focal_gamma, run.focal_alpha)?
        } else {
            tape.scalar(0.0)
        };

        let losses = if training {
            let kd_w = tape.scale(kd, run.alpha);
            let pair_w = tape.scale(pair, run.beta);
            let act_w = tape.scale(action, run.gamma);
            let partial = tape.add(kd_w, pair_w)?;
            let total = tape.add(partial, act_w)?;
            Some(LossBundle { total, kd, pair, action })
        } else {
            None
        };

        let selected_scores: Vec<f64> = selected.iter().map(|&i| stage.scores[i]).collect();
        let prob_values = tape.value(probs).data.clone();
        let predictions = compose_predictions(
            &proposal_meta,
            &selected_scores,
            &prob_values,
            self.cfg.num_actions,
            vocab,
            !run.compose_without_interactiveness,
        );

        Ok(ForwardOutput {
            losses,
            predictions,
            candidate_scores: stage.scores,
            selected,
            proposal_meta,
            adjacency,
            nu_stack: Some(nu_final),
            action_probs: Some(probs),
            attention,
        })
    }
}
