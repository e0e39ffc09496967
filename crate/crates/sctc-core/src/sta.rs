//! Self-triplet aggregation: a per-pair graph with human and object nodes and
//! the interaction feature as the edge gating their message exchange, an
//! interactiveness head, top-K proposal selection, and the pairing loss.

use crate::error::{Error, Result};
use crate::tape::{Binder, ParamId, ParamStore, Tape, Var};
use serde::{Deserialize, Serialize};

/// What initializes the edge before projection to the node width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    /// Interaction feature concatenated with the spatial feature (default).
    InteractionAndSpatial,
    InteractionOnly,
    SpatialOnly,
    /// Free parameters shared across pairs, no priors.
    Learnable,
}

/// Node/edge projections, message functions, and the interactiveness head.
/// All parameters are shared across pairs.
#[derive(Debug, Clone)]
pub struct StaParams {
    pub node_human: (ParamId, ParamId),
    pub node_object: (ParamId, ParamId),
    pub edge_proj: Option<(ParamId, ParamId)>,
    pub edge_learnable: Option<ParamId>,
    pub msg_edge: (ParamId, ParamId),
    pub msg_human: (ParamId, ParamId),
    pub msg_object: (ParamId, ParamId),
    pub inter_hidden: (ParamId, ParamId),
    pub inter_out: (ParamId, ParamId),
    pub edge_mode: EdgeMode,
    pub d_node: usize,
}

/// Per-pair graph state after one round of message passing.
#[derive(Debug, Clone, Copy)]
pub struct TripletState {
    pub node_human: Var,
    pub node_object: Var,
    pub node_human_updated: Var,
    pub node_object_updated: Var,
    /// concat(updated human, updated object), width 2 * d_node.
    pub nu_hoi: Var,
    /// Interactiveness score in (0,1), shape [1].
    pub score: Var,
}

impl StaParams {
    pub fn register(
        store: &mut ParamStore,
        seed: u64,
        d_instance: usize,
        d_interaction: usize,
        spatial_dim: usize,
        d_node: usize,
        edge_mode: EdgeMode,
    ) -> Self {
        let edge_in = match edge_mode {
            EdgeMode::InteractionAndSpatial => Some(d_interaction + spatial_dim),
            EdgeMode::InteractionOnly => Some(d_interaction),
            EdgeMode::SpatialOnly => Some(spatial_dim),
            EdgeMode::Learnable => None,
        };
        Self {
            node_human: store.register_linear(seed, "sta.node_h", d_instance, d_node),
            node_object: store.register_linear(seed, "sta.node_o", d_instance, d_node),
            edge_proj: edge_in.map(|n| store.register_linear(seed, "sta.edge", n, d_node)),
            edge_learnable: match edge_mode {
                EdgeMode::Learnable => {
                    Some(store.register_uniform(seed, "sta.edge_learnable", &[d_node], 0.5))
                }
                _ => None,
            },
            // small gate init: messages start near zero and the skip path
            // dominates early training
            msg_edge: {
                let w = store.register_uniform(seed, "sta.f_i.w", &[d_node, d_node], 0.05);
                let b = store.register_constant("sta.f_i.b", crate::tape::Tensor::zeros(&[d_node]));
                (w, b)
            },
            msg_human: store.register_linear(seed, "sta.f_h", d_node, d_node),
            msg_object: store.register_linear(seed, "sta.f_o", d_node, d_node),
            inter_hidden: store.register_linear(seed, "sta.inter_hidden", 2 * d_node, d_node),
            inter_out: store.register_linear(seed, "sta.inter_out", d_node, 1),
            edge_mode,
            d_node,
        }
    }

    /// One pair: project nodes and edge, exchange gated messages with skip
    /// connections, score interactiveness. With `use_messages` off the nodes
    /// pass through untouched (the plain feature-fusion configuration).
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        feat_human: Var,
        feat_object: Var,
        interaction: Var,
        spatial: Var,
        use_messages: bool,
    ) -> Result<TripletState> {
        let (nhw, nhb) = self.node_human;
        let (now, nob) = self.node_object;
        let nhw = binder.var(tape, nhw);
        let nhb = binder.var(tape, nhb);
        let now = binder.var(tape, now);
        let nob = binder.var(tape, nob);
        let node_h = tape.linear(feat_human, nhw, nhb)?;
        let node_o = tape.linear(feat_object, now, nob)?;

        let (node_h_hat, node_o_hat) = if use_messages {
            let edge = self.edge(tape, binder, interaction, spatial)?;
            let gate = self.projected(tape, binder, self.msg_edge, edge)?;
            let msg_h = self.projected(tape, binder, self.msg_human, node_h)?;
            let msg_o = self.projected(tape, binder, self.msg_object, node_o)?;
            let h_to_o = tape.hadamard(gate, msg_h)?;
            let o_to_h = tape.hadamard(gate, msg_o)?;
            (tape.add(o_to_h, node_h)?, tape.add(h_to_o, node_o)?)
        } else {
            (node_h, node_o)
        };

        let nu_hoi = tape.concat(&[node_h_hat, node_o_hat])?;
        let score = self.interactiveness(tape, binder, nu_hoi)?;
        Ok(TripletState {
            node_human: node_h,
            node_object: node_o,
            node_human_updated: node_h_hat,
            node_object_updated: node_o_hat,
            nu_hoi,
            score,
        })
    }

    fn edge(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        interaction: Var,
        spatial: Var,
    ) -> Result<Var> {
        let input = match self.edge_mode {
            EdgeMode::InteractionAndSpatial => tape.concat(&[interaction, spatial])?,
            EdgeMode::InteractionOnly => interaction,
            EdgeMode::SpatialOnly => spatial,
            EdgeMode::Learnable => {
                let id = self.edge_learnable.expect("learnable edge parameter");
                return Ok(binder.var(tape, id));
            }
        };
        let (w, b) = self.edge_proj.expect("edge projection parameters");
        let w = binder.var(tape, w);
        let b = binder.var(tape, b);
        tape.linear(input, w, b)
    }

    /// linear + relu, the message projection shape shared by f_i, f_h, f_o.
    fn projected(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        (w, b): (ParamId, ParamId),
        x: Var,
    ) -> Result<Var> {
        let w = binder.var(tape, w);
        let b = binder.var(tape, b);
        let y = tape.linear(x, w, b)?;
        Ok(tape.relu(y))
    }

    /// sigmoid(linear(relu(linear(nu_hoi)))) -> [1]
    pub fn interactiveness(&self, tape: &mut Tape, binder: &mut Binder, nu_hoi: Var) -> Result<Var> {
        let (w1, b1) = self.inter_hidden;
        let (w2, b2) = self.inter_out;
        let w1 = binder.var(tape, w1);
        let b1 = binder.var(tape, b1);
        let w2 = binder.var(tape, w2);
        let b2 = binder.var(tape, b2);
        let h = tape.linear(nu_hoi, w1, b1)?;
        let h = tape.relu(h);
        let logit = tape.linear(h, w2, b2)?;
        Ok(tape.sigmoid(logit))
    }
}

/// Indices of the top-`k` scores, descending, ties broken by index. Returns
/// all indices (still sorted) when fewer than `k` are available — no padding.
pub fn select_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// L_pair = sum_k FL(p_hat_k, p_k) / max(sum_k p_k, 1).
pub fn pair_loss(
    tape: &mut Tape,
    scores: &[Var],
    labels: &[f64],
    focal_gamma: f64,
    focal_alpha: f64,
) -> Result<Var> {
    if scores.len() != labels.len() {
        return Err(Error::Dim(format!(
            "pair_loss: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Dim("pair_loss: no selected pairs".into()));
    }
    let stacked = tape.concat(scores)?;
    let fl = tape.focal_loss(stacked, labels, focal_gamma, focal_alpha)?;
    let total = tape.sum(fl);
    let denom = labels.iter().sum::<f64>().max(1.0);
    Ok(tape.scale(total, 1.0 / denom))
}
