//! Action decoder: proposal queries cross-attend to the scene feature map
//! through pre-norm transformer layers, then a sigmoid head emits per-action
//! probabilities. Also hosts the action loss and final score composition.

use crate::ctd::ProposalMeta;
use crate::error::{Error, Result};
use crate::evaluation::HoiPrediction;
use crate::fixtures::HoiVocabulary;
use crate::tape::{Binder, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub query: (ParamId, ParamId),
    pub key: (ParamId, ParamId),
    pub value: (ParamId, ParamId),
    pub output: (ParamId, ParamId),
}

impl AttentionParams {
    fn register(store: &mut ParamStore, seed: u64, name: &str, d_model: usize) -> Self {
        Self {
            query: store.register_linear(seed, &format!("{name}.q"), d_model, d_model),
            key: store.register_linear(seed, &format!("{name}.k"), d_model, d_model),
            value: store.register_linear(seed, &format!("{name}.v"), d_model, d_model),
            output: store.register_linear(seed, &format!("{name}.o"), d_model, d_model),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayerParams {
    pub norm_self: (ParamId, ParamId),
    pub self_attn: AttentionParams,
    pub norm_cross: (ParamId, ParamId),
    pub cross_attn: AttentionParams,
    pub norm_ff: (ParamId, ParamId),
    pub ff_hidden: (ParamId, ParamId),
    pub ff_out: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub query_hidden: (ParamId, ParamId),
    pub query_out: (ParamId, ParamId),
    pub memory_proj: (ParamId, ParamId),
    pub layers: Vec<DecoderLayerParams>,
    pub action_head: (ParamId, ParamId),
    pub d_model: usize,
    pub heads: usize,
}

fn register_norm(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    let gain = store.register_constant(&format!("{name}.g"), Tensor {
        shape: vec![d],
        data: vec![1.0; d],
    });
    let bias = store.register_constant(&format!("{name}.b"), Tensor::zeros(&[d]));
    (gain, bias)
}

impl DecoderParams {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        seed: u64,
        d_query_in: usize,
        d_map: usize,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        num_layers: usize,
        num_actions: usize,
    ) -> Self {
        assert!(d_model % heads == 0, "model width must divide into heads");
        let layers = (0..num_layers)
            .map(|l| {
                let p = format!("dec.l{l}");
                DecoderLayerParams {
                    norm_self: register_norm(store, &format!("{p}.ln1"), d_model),
                    self_attn: AttentionParams::register(store, seed, &format!("{p}.sa"), d_model),
                    norm_cross: register_norm(store, &format!("{p}.ln2"), d_model),
                    cross_attn: AttentionParams::register(store, seed, &format!("{p}.ca"), d_model),
                    norm_ff: register_norm(store, &format!("{p}.ln3"), d_model),
                    ff_hidden: store.register_linear(seed, &format!("{p}.ff1"), d_model, d_ff),
                    ff_out: store.register_linear(seed, &format!("{p}.ff2"), d_ff, d_model),
                }
            })
            .collect();
        Self {
            query_hidden: store.register_linear(seed, "dec.query1", d_query_in, d_model),
            query_out: store.register_linear(seed, "dec.query2", d_model, d_model),
            memory_proj: store.register_linear(seed, "dec.mem", d_map, d_model),
            layers,
            action_head: store.register_linear(seed, "dec.action", d_model, num_actions),
            d_model,
            heads,
        }
    }

    /// Project proposal features to queries, run the layer stack against the
    /// position-encoded feature map. Softmax attention nodes are appended to
    /// `attention_trace`.
    pub fn decode(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        proposals: Var,
        feature_map_flat: Var,
        position_encoding: &Tensor,
        attention_trace: &mut Vec<Var>,
    ) -> Result<Var> {
        let q1 = self.linear(tape, binder, self.query_hidden, proposals)?;
        let q1 = tape.relu(q1);
        let mut x = self.linear(tape, binder, self.query_out, q1)?;

        let mem0 = self.linear(tape, binder, self.memory_proj, feature_map_flat)?;
        let pe = tape.constant(position_encoding.clone());
        let memory = tape.add(mem0, pe)?;

        for layer in &self.layers {
            let n1 = self.norm(tape, binder, layer.norm_self, x)?;
            let sa = self.attention(tape, binder, &layer.self_attn, n1, n1, attention_trace)?;
            x = tape.add(x, sa)?;

            let n2 = self.norm(tape, binder, layer.norm_cross, x)?;
            let ca = self.attention(tape, binder, &layer.cross_attn, n2, memory, attention_trace)?;
            x = tape.add(x, ca)?;

            let n3 = self.norm(tape, binder, layer.norm_ff, x)?;
            let h = self.linear(tape, binder, layer.ff_hidden, n3)?;
            let h = tape.relu(h);
            let ff = self.linear(tape, binder, layer.ff_out, h)?;
            x = tape.add(x, ff)?;
        }
        Ok(x)
    }

    /// Per-class probabilities: sigmoid(linear(decoder output)).
    pub fn action_probs(&self, tape: &mut Tape, binder: &mut Binder, decoded: Var) -> Result<Var> {
        let logits = self.linear(tape, binder, self.action_head, decoded)?;
        Ok(tape.sigmoid(logits))
    }

    fn linear(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        (w, b): (ParamId, ParamId),
        x: Var,
    ) -> Result<Var> {
        let w = binder.var(tape, w);
        let b = binder.var(tape, b);
        tape.linear(x, w, b)
    }

    fn norm(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        (g, b): (ParamId, ParamId),
        x: Var,
    ) -> Result<Var> {
        let normalized = tape.layer_norm(x);
        let g = binder.var(tape, g);
        let b = binder.var(tape, b);
        let scaled = tape.mul_row(normalized, g)?;
        tape.add_row(scaled, b)
    }

    fn attention(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        params: &AttentionParams,
        queries: Var,
        keys_values: Var,
        trace: &mut Vec<Var>,
    ) -> Result<Var> {
        let d_head = self.d_model / self.heads;
        let q = self.linear(tape, binder, params.query, queries)?;
        let k = self.linear(tape, binder, params.key, keys_values)?;
        let v = self.linear(tape, binder, params.value, keys_values)?;
        let mut heads_out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * d_head, d_head)?;
            let kh = tape.slice_cols(k, h * d_head, d_head)?;
            let vh = tape.slice_cols(v, h * d_head, d_head)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scaled = tape.scale(scores, 1.0 / (d_head as f64).sqrt());
            let attn = tape.softmax(scaled);
            trace.push(attn);
            heads_out.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat(&heads_out)?;
        self.linear(tape, binder, params.output, merged)
    }
}

/// Fixed 2-D sinusoidal encodings: the first half of the channels encodes the
/// row coordinate, the second half the column, each with interleaved sin/cos.
pub fn position_encoding_2d(hf: usize, wf: usize, d_model: usize) -> Tensor {
    assert!(d_model % 4 == 0, "position encoding needs d_model divisible by 4");
    let half = d_model / 2;
    let enc = |pos: f64, out: &mut [f64]| {
        let m = out.len();
        for i in 0..m / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / m as f64);
            out[2 * i] = (pos * freq).sin();
            out[2 * i + 1] = (pos * freq).cos();
        }
    };
    let mut t = Tensor::zeros(&[hf * wf, d_model]);
    for row in 0..hf {
        for col in 0..wf {
            let cell = &mut t.data[(row * wf + col) * d_model..(row * wf + col + 1) * d_model];
            enc(row as f64, &mut cell[..half]);
            enc(col as f64, &mut cell[half..]);
        }
    }
    t
}

/// L_a = sum_{k,c} FL(y_hat, y) / max(sum y, 1) over the [K, C_a] grid.
pub fn action_loss(
    tape: &mut Tape,
    probs: Var,
    labels: &[f64],
    focal_gamma: f64,
    focal_alpha: f64,
) -> Result<Var> {
    if tape.value(probs).numel() != labels.len() {
        return Err(Error::Dim(format!(
            "action_loss: {} probabilities vs {} labels",
            tape.value(probs).numel(),
            labels.len()
        )));
    }
    let fl = tape.focal_loss(probs, labels, focal_gamma, focal_alpha)?;
    let total = tape.sum(fl);
    let denom = labels.iter().sum::<f64>().max(1.0);
    Ok(tape.scale(total, 1.0 / denom))
}

/// Composite triplet scores: s_h * s_o * p_hat * y_hat per action, emitted
/// only for (action, object-category) combinations present in the vocabulary.
/// `with_interactiveness` off drops the p_hat factor.
pub fn compose_predictions(
    proposals: &[ProposalMeta],
    interactiveness: &[f64],
    action_probs: &[f64],
    num_actions: usize,
    vocab: &HoiVocabulary,
    with_interactiveness: bool,
) -> Vec<HoiPrediction> {
    let mut out = Vec::new();
    for (k, p) in proposals.iter().enumerate() {
        let base = p.human_score
            * p.object_score
            * if with_interactiveness { interactiveness[k] } else { 1.0 };
        for a in 0..num_actions {
            if let Some(cat) = vocab.hoi_index(a, p.object_category) {
                out.push(HoiPrediction {
                    human_box: p.human_box,
                    object_box: p.object_box,
                    hoi_category: cat,
                    score: base * action_probs[k * num_actions + a],
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{BoundingBox, HoiCategory};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const D_IN: usize = 6;
    const D_MAP: usize = 5;
    const D_MODEL: usize = 8;
    const HEADS: usize = 2;
    const D_FF: usize = 12;
    const C_A: usize = 3;

    fn setup(layers: usize) -> (ParamStore, DecoderParams) {
        let mut store = ParamStore::new();
        let params = DecoderParams::register(
            &mut store, 7, D_IN, D_MAP, D_MODEL, HEADS, D_FF, layers, C_A,
        );
        (store, params)
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor {
            shape: vec![r, c],
            data: (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    fn run(
        store: &ParamStore,
        params: &DecoderParams,
        queries: &Tensor,
        fmap: &Tensor,
    ) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
        let mut tape = Tape::new();
        let mut binder = Binder::new(store);
        let q = tape.constant(queries.clone());
        let m = tape.constant(fmap.clone());
        let pe = position_encoding_2d(2, 2, D_MODEL);
        let mut trace = Vec::new();
        let out = params.decode(&mut tape, &mut binder, q, m, &pe, &mut trace).unwrap();
        let probs = params.action_probs(&mut tape, &mut binder, out).unwrap();
        let attn = trace.iter().map(|&a| tape.value(a).data.clone()).collect();
        (
            tape.value(out).data.clone(),
            attn,
            tape.value(probs).data.clone(),
        )
    }

    #[test]
    fn zero_layers_equal_query_projection() {
        let (store, params) = setup(0);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let queries = rand_mat(&mut rng, 3, D_IN);
        let fmap = rand_mat(&mut rng, 4, D_MAP);
        let (out, attn, _) = run(&store, &params, &queries, &fmap);
        assert!(attn.is_empty());

        // independent projection: relu(linear) then linear on plain data
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let q = tape.constant(queries);
        let h = params.linear(&mut tape, &mut binder, params.query_hidden, q).unwrap();
        let h = tape.relu(h);
        let expect = params.linear(&mut tape, &mut binder, params.query_out, h).unwrap();
        assert_eq!(out, tape.value(expect).data);
    }

    #[test]
    fn attention_rows_sum_to_one_at_every_layer() {
        let (store, params) = setup(3);
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let queries = rand_mat(&mut rng, 4, D_IN);
        let fmap = rand_mat(&mut rng, 4, D_MAP);
        let (_, attn, _) = run(&store, &params, &queries, &fmap);
        // 3 layers x (self + cross) x 2 heads
        assert_eq!(attn.len(), 12);
        for a in &attn {
            for row in a.chunks(a.len() / 4) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "row sum {s}");
            }
        }
    }

    #[test]
    fn probabilities_stay_in_unit_interval() {
        let (store, params) = setup(2);
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let queries = rand_mat(&mut rng, 2, D_IN);
        let fmap = rand_mat(&mut rng, 4, D_MAP);
        let (_, _, probs) = run(&store, &params, &queries, &fmap);
        assert_eq!(probs.len(), 2 * C_A);
        assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn decode_gradients_match_finite_differences() {
        // K'=2 queries, 2 layers: perturb a few parameters of every kind
        let (mut store, params) = setup(2);
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let queries = rand_mat(&mut rng, 2, D_IN);
        let fmap = rand_mat(&mut rng, 4, D_MAP);
        let labels: Vec<f64> = (0..2 * C_A).map(|i| (i % 2) as f64).collect();

        let loss_of = |store: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let mut binder = Binder::new(store);
            let q = tape.constant(queries.clone());
            let m = tape.constant(fmap.clone());
            let pe = position_encoding_2d(2, 2, D_MODEL);
            let mut trace = Vec::new();
            let out = params.decode(&mut tape, &mut binder, q, m, &pe, &mut trace).unwrap();
            let probs = params.action_probs(&mut tape, &mut binder, out).unwrap();
            let loss = action_loss(&mut tape, probs, &labels, 2.0, 0.25).unwrap();
            tape.value(loss).data[0]
        };

        // analytic gradients
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let q = tape.constant(queries.clone());
        let m = tape.constant(fmap.clone());
        let pe = position_encoding_2d(2, 2, D_MODEL);
        let mut trace = Vec::new();
        let out = params.decode(&mut tape, &mut binder, q, m, &pe, &mut trace).unwrap();
        let probs = params.action_probs(&mut tape, &mut binder, out).unwrap();
        let loss = action_loss(&mut tape, probs, &labels, 2.0, 0.25).unwrap();
        tape.backward(loss).unwrap();
        store.harvest(&tape, 1.0);

        let h = 1e-5;
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        for (id, name) in ids {
            let n = store.value(id).numel();
            let analytic = store.grad(id).unwrap().to_vec();
            for _ in 0..2.min(n) {
                let idx = rng.gen_range(0..n);
                let orig = store.value(id).data[idx];
                store.value_mut(id).data[idx] = orig + h;
                let up = loss_of(&store);
                store.value_mut(id).data[idx] = orig - h;
                let down = loss_of(&store);
                store.value_mut(id).data[idx] = orig;
                let numeric = (up - down) / (2.0 * h);
                let err = (analytic[idx] - numeric).abs()
                    / analytic[idx].abs().max(numeric.abs()).max(1.0);
                assert!(err < 1e-6, "{name}[{idx}]: analytic {} vs fd {numeric}", analytic[idx]);
            }
        }
    }

    #[test]
    fn action_loss_reference_cases() {
        let mut tape = Tape::new();
        // perfect confident predictions: ~0
        let p = tape.constant(Tensor::new(vec![1, 2], vec![0.999999, 0.000001]).unwrap());
        let l = action_loss(&mut tape, p, &[1.0, 0.0], 2.0, 0.25).unwrap();
        assert!(tape.value(l).data[0] < 1e-6);

        // no positive labels: clamped denominator keeps it finite
        let p = tape.constant(Tensor::new(vec![1, 2], vec![0.3, 0.6]).unwrap());
        let l = action_loss(&mut tape, p, &[0.0, 0.0], 2.0, 0.25).unwrap();
        assert!(tape.value(l).data[0].is_finite());
    }

    #[test]
    fn action_loss_matches_loop_oracle() {
        let focal = |p: f64, y: f64| -> f64 {
            let pc: f64 = p.clamp(1e-7, 1.0 - 1e-7);
            if y > 0.5 {
                -0.25 * (1.0 - pc).powi(2) * pc.ln()
            } else {
                -0.75 * pc.powi(2) * (1.0 - pc).ln()
            }
        };
        // 2 x 3 grid
        let probs = [0.9, 0.2, 0.4, 0.7, 0.55, 0.1];
        let labels = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![2, 3], probs.to_vec()).unwrap());
        let l = action_loss(&mut tape, p, &labels, 2.0, 0.25).unwrap();
        let expect: f64 =
            probs.iter().zip(&labels).map(|(&p, &y)| focal(p, y)).sum::<f64>() / 3.0;
        assert!((tape.value(l).data[0] - expect).abs() < 1e-12);
    }

    fn tiny_vocab() -> HoiVocabulary {
        let d = 2;
        let rows = 3 + 2;
        let mut data = vec![0.0; rows * d];
        for r in 0..rows {
            data[r * d] = 1.0;
        }
        HoiVocabulary {
            num_objects: 2,
            num_actions: 3,
            categories: vec![
                HoiCategory { action: 0, object: 1, rare: false },
                HoiCategory { action: 2, object: 1, rare: false },
                HoiCategory { action: 1, object: 0, rare: false },
            ],
            text_embeddings: Tensor::new(vec![rows, d], data).unwrap(),
        }
    }

    #[test]
    fn composition_multiplies_factors_and_filters_by_vocabulary() {
        let vocab = tiny_vocab();
        let p = ProposalMeta {
            human_idx: 0,
            object_idx: 1,
            human_box: BoundingBox::new(0.0, 0.0, 4.0, 4.0),
            object_box: BoundingBox::new(4.0, 4.0, 8.0, 8.0),
            object_category: 1,
            human_score: 0.5,
            object_score: 0.8,
        };
        let probs = vec![0.9, 0.9, 0.25];
        let preds = compose_predictions(&[p.clone()], &[0.5], &probs, 3, &vocab, true);
        // actions 0 and 2 are valid on category 1; action 1 is not
        assert_eq!(preds.len(), 2);
        assert_eq!(preds[0].hoi_category, 0);
        assert!((preds[0].score - 0.5 * 0.8 * 0.5 * 0.9).abs() < 1e-12);
        assert_eq!(preds[1].hoi_category, 1);
        assert!((preds[1].score - 0.5 * 0.8 * 0.5 * 0.25).abs() < 1e-12);

        // any factor zero -> composite zero; all factors one -> one
        let zero = compose_predictions(&[p.clone()], &[0.0], &probs, 3, &vocab, true);
        assert!(zero.iter().all(|h| h.score == 0.0));
        let mut ideal = p.clone();
        ideal.human_score = 1.0;
        ideal.object_score = 1.0;
        let one = compose_predictions(&[ideal], &[1.0], &[1.0, 1.0, 1.0], 3, &vocab, true);
        assert!(one.iter().all(|h| h.score == 1.0));

        // p-hat-free variant drops the interactiveness factor
        let free = compose_predictions(&[p], &[0.5], &probs, 3, &vocab, false);
        assert!((free[0].score - 0.5 * 0.8 * 0.9).abs() < 1e-12);
    }

    #[test]
    fn composite_is_monotone_in_each_factor() {
        let vocab = tiny_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..50 {
            let mut p = ProposalMeta {
                human_idx: 0,
                object_idx: 1,
                human_box: BoundingBox::new(0.0, 0.0, 4.0, 4.0),
                object_box: BoundingBox::new(4.0, 4.0, 8.0, 8.0),
                object_category: 1,
                human_score: rng.gen_range(0.1..0.9),
                object_score: rng.gen_range(0.1..0.9),
            };
            let inter = rng.gen_range(0.1..0.9);
            let probs = vec![rng.gen_range(0.1..0.9); 3];
            let base = compose_predictions(&[p.clone()], &[inter], &probs, 3, &vocab, true);
            p.human_score += 0.05;
            let bumped = compose_predictions(&[p], &[inter], &probs, 3, &vocab, true);
            for (b, a) in base.iter().zip(&bumped) {
                assert!(a.score > b.score);
            }
        }
    }

    #[test]
    fn position_encoding_is_bounded_and_distinct() {
        let pe = position_encoding_2d(8, 8, 64);
        assert_eq!(pe.shape, vec![64, 64]);
        assert!(pe.data.iter().all(|v| v.abs() <= 1.0));
        // distinct cells get distinct encodings
        for a in 0..64 {
            for b in a + 1..64 {
                let ra = &pe.data[a * 64..(a + 1) * 64];
                let rb = &pe.data[b * 64..(b + 1) * 64];
                assert!(ra != rb, "cells {a} and {b} collide");
            }
        }
    }
}
