//! Cross-triplet dependency: a graph over the selected proposals whose
//! adjacency fuses instance, semantic, and layout relations, followed by one
//! round of message passing with a skip connection.

use crate::error::{Error, Result};
use crate::fixtures::BoundingBox;
use crate::interaction::SpatialFeature;
use crate::tape::{Binder, ParamId, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

pub const D_INS_EMBED: usize = 64;
pub const D_SEM_EMBED: usize = 256;
pub const D_LAY_EMBED: usize = 64;
pub const FUSE_HIDDEN: usize = 128;

/// Everything the relation builders need to know about a selected proposal.
#[derive(Debug, Clone)]
pub struct ProposalMeta {
    pub human_idx: usize,
    pub object_idx: usize,
    pub human_box: BoundingBox,
    pub object_box: BoundingBox,
    pub object_category: usize,
    pub human_score: f64,
    pub object_score: f64,
}

impl ProposalMeta {
    pub fn union_box(&self) -> BoundingBox {
        self.human_box.union_box(&self.object_box)
    }
}

/// Which relations feed the adjacency matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationToggles {
    pub instance: bool,
    pub semantic: bool,
    pub layout: bool,
    /// Learned constant adjacency, no priors (excludes the other three).
    pub learnable: bool,
}

impl Default for RelationToggles {
    fn default() -> Self {
        Self { instance: true, semantic: true, layout: true, learnable: false }
    }
}

impl RelationToggles {
    pub fn validate(&self) -> Result<()> {
        if self.learnable && (self.instance || self.semantic || self.layout) {
            return Err(Error::Config(
                "learnable adjacency excludes instance/semantic/layout relations".into(),
            ));
        }
        if !self.learnable && !self.instance && !self.semantic && !self.layout {
            return Err(Error::Config("no relation enabled for the adjacency".into()));
        }
        Ok(())
    }
}

/// Normalization applied to the fused adjacency logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyNorm {
    Softmax,
    Sigmoid,
    Raw,
}

// ─── Relation tensors (pure data) ────────────────────────────────────────

/// [K, K, 2]: channel 0 flags a shared human detection, channel 1 a shared
/// object detection. Diagonals are all-ones.
pub fn instance_relation(proposals: &[ProposalMeta]) -> Tensor {
    let k = proposals.len();
    let mut t = Tensor::zeros(&[k, k, 2]);
    for j in 0..k {
        for i in 0..k {
            let base = (j * k + i) * 2;
            if proposals[j].human_idx == proposals[i].human_idx {
                t.data[base] = 1.0;
            }
            if proposals[j].object_idx == proposals[i].object_idx {
                t.data[base + 1] = 1.0;
            }
        }
    }
    t
}

/// [K, K, C_o]: one-hot at channel c when both proposals' objects have
/// category c; the zero fiber otherwise.
pub fn semantic_relation(proposals: &[ProposalMeta], num_objects: usize) -> Tensor {
    let k = proposals.len();
    let mut t = Tensor::zeros(&[k, k, num_objects]);
    for j in 0..k {
        for i in 0..k {
            if proposals[j].object_category == proposals[i].object_category {
                t.data[(j * k + i) * num_objects + proposals[j].object_category] = 1.0;
            }
        }
    }
    t
}

/// [K, K, 8]: the spatial feature between the two proposals' union boxes.
pub fn layout_relation(proposals: &[ProposalMeta], width: f64, height: f64) -> Tensor {
    let k = proposals.len();
    let unions: Vec<BoundingBox> = proposals.iter().map(|p| p.union_box()).collect();
    let mut t = Tensor::zeros(&[k, k, 8]);
    for j in 0..k {
        for i in 0..k {
            let s = SpatialFeature::compute(&unions[j], &unions[i], width, height);
            t.data[(j * k + i) * 8..(j * k + i + 1) * 8].copy_from_slice(&s.to_vec());
        }
    }
    t
}

// ─── Fusion parameters ───────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct CtdParams {
    pub ins_embed: Option<(ParamId, ParamId)>,
    pub sem_embed: Option<(ParamId, ParamId)>,
    pub lay_embed: Option<(ParamId, ParamId)>,
    pub fuse_hidden: Option<(ParamId, ParamId)>,
    pub fuse_out: Option<(ParamId, ParamId)>,
    pub learnable_adj: Option<ParamId>,
    pub toggles: RelationToggles,
    pub norm: AdjacencyNorm,
    pub num_objects: usize,
    pub k_max: usize,
}

impl CtdParams {
    pub fn register(
        store: &mut ParamStore,
        seed: u64,
        num_objects: usize,
        k_max: usize,
        toggles: RelationToggles,
        norm: AdjacencyNorm,
    ) -> Self {
        let mut fuse_in = 0;
        let ins_embed = toggles.instance.then(|| {
            fuse_in += D_INS_EMBED;
            store.register_linear(seed, "ctd.ins_embed", 2, D_INS_EMBED)
        });
        let sem_embed = toggles.semantic.then(|| {
            fuse_in += D_SEM_EMBED;
            store.register_linear(seed, "ctd.sem_embed", num_objects, D_SEM_EMBED)
        });
        let lay_embed = toggles.layout.then(|| {
            fuse_in += D_LAY_EMBED;
            store.register_linear(seed, "ctd.lay_embed", 8, D_LAY_EMBED)
        });
        let (fuse_hidden, fuse_out) = if toggles.learnable {
            (None, None)
        } else {
            (
                Some(store.register_linear(seed, "ctd.fuse_hidden", fuse_in, FUSE_HIDDEN)),
                Some(store.register_linear(seed, "ctd.fuse_out", FUSE_HIDDEN, 1)),
            )
        };
        let learnable_adj = toggles
            .learnable
            .then(|| store.register_uniform(seed, "ctd.learnable_adj", &[k_max, k_max], 0.5));
        Self {
            ins_embed,
            sem_embed,
            lay_embed,
            fuse_hidden,
            fuse_out,
            learnable_adj,
            toggles,
            norm,
            num_objects,
            k_max,
        }
    }

    /// Embed each enabled relation along its channel axis, fuse per (j, k)
    /// with the MLP, and normalize into the adjacency matrix [K, K].
    pub fn fuse_adjacency(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        proposals: &[ProposalMeta],
        width: f64,
        height: f64,
    ) -> Result<Var> {
        let k = proposals.len();
        if k == 0 {
            return Err(Error::Dim("fuse_adjacency: no proposals".into()));
        }
        let logits = if self.toggles.learnable {
            if k > self.k_max {
                return Err(Error::Dim(format!(
                    "fuse_adjacency: {k} proposals exceed learned adjacency size {}",
                    self.k_max
                )));
            }
            let adj = binder.var(tape, self.learnable_adj.expect("learnable adjacency"));
            tape.slice_block(adj, k, k)?
        } else {
            let mut parts = Vec::new();
            let embed = |tape: &mut Tape,
                             binder: &mut Binder,
                             relation: Tensor,
                             channels: usize,
                             params: (ParamId, ParamId)|
             -> Result<Var> {
                let flat = Tensor::new(vec![k * k, channels], relation.data)?;
                let flat = tape.constant(flat);
                let w = binder.var(tape, params.0);
                let b = binder.var(tape, params.1);
                tape.linear(flat, w, b)
            };
            if let Some(p) = self.ins_embed {
                parts.push(embed(tape, binder, instance_relation(proposals), 2, p)?);
            }
            if let Some(p) = self.sem_embed {
                parts.push(embed(
                    tape,
                    binder,
                    semantic_relation(proposals, self.num_objects),
                    self.num_objects,
                    p,
                )?);
            }
            if let Some(p) = self.lay_embed {
                parts.push(embed(tape, binder, layout_relation(proposals, width, height), 8, p)?);
            }
            let fused_in = tape.concat(&parts)?;
            let (w1, b1) = self.fuse_hidden.expect("fusion hidden layer");
            let (w2, b2) = self.fuse_out.expect("fusion output layer");
            let w1 = binder.var(tape, w1);
            let b1 = binder.var(tape, b1);
            let w2 = binder.var(tape, w2);
            let b2 = binder.var(tape, b2);
            let h = tape.linear(fused_in, w1, b1)?;
            let h = tape.relu(h);
            let s = tape.linear(h, w2, b2)?;
            tape.reshape(s, &[k, k])?
        };
        Ok(match self.norm {
            AdjacencyNorm::Softmax => tape.softmax(logits),
            AdjacencyNorm::Sigmoid => tape.sigmoid(logits),
            AdjacencyNorm::Raw => logits,
        })
    }
}

/// nu_hat = M_adj . nu + nu (matrix product over the proposal axis plus the
/// elementwise skip connection).
pub fn ctd_update(tape: &mut Tape, adjacency: Var, nu_hoi: Var) -> Result<Var> {
    let mixed = tape.matmul(adjacency, nu_hoi)?;
    tape.add(mixed, nu_hoi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prop(h: usize, o: usize, cat: usize, hb: BoundingBox, ob: BoundingBox) -> ProposalMeta {
        ProposalMeta {
            human_idx: h,
            object_idx: o,
            human_box: hb,
            object_box: ob,
            object_category: cat,
            human_score: 0.9,
            object_score: 0.9,
        }
    }

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2)
    }

    fn random_props(rng: &mut ChaCha8Rng, k: usize, c_o: usize) -> Vec<ProposalMeta> {
        (0..k)
            .map(|_| {
                let x1 = rng.gen_range(0.0..40.0);
                let y1 = rng.gen_range(0.0..40.0);
                prop(
                    rng.gen_range(0..3),
                    rng.gen_range(3..7),
                    rng.gen_range(1..c_o),
                    bb(x1, y1, x1 + 10.0, y1 + 10.0),
                    bb(x1 + 5.0, y1, x1 + 20.0, y1 + 12.0),
                )
            })
            .collect()
    }

    #[test]
    fn single_proposal_shares_itself() {
        let p = vec![prop(0, 1, 2, bb(0.0, 0.0, 4.0, 4.0), bb(4.0, 4.0, 8.0, 8.0))];
        let m = instance_relation(&p);
        assert_eq!(m.shape, vec![1, 1, 2]);
        assert_eq!(m.data, vec![1.0, 1.0]);
    }

    #[test]
    fn shared_human_different_objects() {
        let props = vec![
            prop(0, 1, 2, bb(0.0, 0.0, 4.0, 4.0), bb(4.0, 4.0, 8.0, 8.0)),
            prop(0, 2, 3, bb(0.0, 0.0, 4.0, 4.0), bb(8.0, 8.0, 12.0, 12.0)),
        ];
        let m = instance_relation(&props);
        // off-diagonal: human channel on, object channel off
        assert_eq!(&m.data[2..4], &[1.0, 0.0]);
        assert_eq!(&m.data[4..6], &[1.0, 0.0]);
    }

    #[test]
    fn instance_relation_matches_loop_oracle_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..100 {
            let k = rng.gen_range(1..8usize);
            let props = random_props(&mut rng, k, 5);
            let m = instance_relation(&props);
            for j in 0..k {
                for i in 0..k {
                    let same_h = (props[j].human_idx == props[i].human_idx) as u8 as f64;
                    let same_o = (props[j].object_idx == props[i].object_idx) as u8 as f64;
                    assert_eq!(m.data[(j * k + i) * 2], same_h);
                    assert_eq!(m.data[(j * k + i) * 2 + 1], same_o);
                    // symmetry in the first two axes
                    assert_eq!(m.data[(j * k + i) * 2], m.data[(i * k + j) * 2]);
                    assert_eq!(m.data[(j * k + i) * 2 + 1], m.data[(i * k + j) * 2 + 1]);
                }
                assert_eq!(&m.data[(j * k + j) * 2..(j * k + j) * 2 + 2], &[1.0, 1.0]);
            }
        }
    }

    #[test]
    fn semantic_relation_reference_and_oracle() {
        let props = vec![
            prop(0, 1, 2, bb(0.0, 0.0, 4.0, 4.0), bb(4.0, 4.0, 8.0, 8.0)),
            prop(1, 2, 2, bb(10.0, 0.0, 14.0, 4.0), bb(14.0, 4.0, 18.0, 8.0)),
            prop(1, 3, 4, bb(10.0, 0.0, 14.0, 4.0), bb(0.0, 10.0, 4.0, 14.0)),
        ];
        let m = semantic_relation(&props, 5);
        // (0,1): same category 2 -> one-hot at channel 2
        let fiber = &m.data[(0 * 3 + 1) * 5..(0 * 3 + 1 + 1) * 5];
        assert_eq!(fiber, &[0.0, 0.0, 1.0, 0.0, 0.0]);
        // (0,2): different categories -> all-zero fiber
        let fiber = &m.data[(0 * 3 + 2) * 5..(0 * 3 + 2 + 1) * 5];
        assert_eq!(fiber, &[0.0; 5]);

        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..100 {
            let k = rng.gen_range(1..8usize);
            let c_o = 6;
            let props = random_props(&mut rng, k, c_o);
            let m = semantic_relation(&props, c_o);
            for j in 0..k {
                for i in 0..k {
                    for c in 0..c_o {
                        let expect = (props[j].object_category == c
                            && props[i].object_category == c) as u8 as f64;
                        assert_eq!(m.data[(j * k + i) * c_o + c], expect);
                        assert_eq!(
                            m.data[(j * k + i) * c_o + c],
                            m.data[(i * k + j) * c_o + c]
                        );
                    }
                    // at most one active channel per fiber
                    let ones: f64 = m.data[(j * k + i) * c_o..(j * k + i + 1) * c_o].iter().sum();
                    assert!(ones <= 1.0);
                }
            }
        }
    }

    #[test]
    fn layout_relation_diagonal_and_swap() {
        let props = vec![
            prop(0, 1, 2, bb(0.0, 0.0, 4.0, 4.0), bb(2.0, 2.0, 6.0, 6.0)),
            prop(1, 2, 3, bb(10.0, 10.0, 14.0, 14.0), bb(12.0, 12.0, 18.0, 16.0)),
        ];
        let m = layout_relation(&props, 20.0, 20.0);
        // diagonal: coincident union boxes
        let d = &m.data[0..8];
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[2], 0.0);
        assert_eq!(d[3], 0.0);
        assert_eq!(d[6], d[7]); // intersection == union
        // swap: dx, dy negate; angle shifts by pi
        let a = &m.data[8..16]; // (0,1)
        let b = &m.data[16..24]; // (1,0)
        assert!((a[0] + b[0]).abs() < 1e-12);
        assert!((a[1] + b[1]).abs() < 1e-12);
        assert!((a[2] - b[2]).abs() < 1e-12);
        let diff = (a[3] - b[3]).rem_euclid(2.0 * std::f64::consts::PI);
        assert!((diff - std::f64::consts::PI).abs() < 1e-9);
    }

    #[test]
    fn layout_relation_hand_case() {
        // union_0 = (0,0,6,6), union_1 = (10,10,18,16) on a 20x20 image
        let props = vec![
            prop(0, 1, 2, bb(0.0, 0.0, 4.0, 4.0), bb(2.0, 2.0, 6.0, 6.0)),
            prop(1, 2, 3, bb(10.0, 10.0, 14.0, 14.0), bb(12.0, 12.0, 18.0, 16.0)),
        ];
        let m = layout_relation(&props, 20.0, 20.0);
        let f = &m.data[8..16];
        // centers: (3,3) and (14,13): dx = 11/20, dy = 10/20
        assert!((f[0] - 0.55).abs() < 1e-12);
        assert!((f[1] - 0.5).abs() < 1e-12);
        assert!((f[2] - (0.55f64 * 0.55 + 0.25).sqrt()).abs() < 1e-12);
        // areas: 36/400 and 48/400, disjoint
        assert!((f[4] - 0.09).abs() < 1e-12);
        assert!((f[5] - 0.12).abs() < 1e-12);
        assert_eq!(f[6], 0.0);
        assert!((f[7] - 0.21).abs() < 1e-12);
    }

    fn fuse(
        toggles: RelationToggles,
        norm: AdjacencyNorm,
        props: &[ProposalMeta],
    ) -> (Vec<f64>, usize) {
        let mut store = ParamStore::new();
        let params = CtdParams::register(&mut store, 7, 6, 32, toggles, norm);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let adj = params
            .fuse_adjacency(&mut tape, &mut binder, props, 100.0, 100.0)
            .unwrap();
        (tape.value(adj).data.clone(), props.len())
    }

    #[test]
    fn single_proposal_softmax_is_one() {
        let props = vec![prop(0, 1, 2, bb(0.0, 0.0, 4.0, 4.0), bb(4.0, 4.0, 8.0, 8.0))];
        let (adj, _) = fuse(RelationToggles::default(), AdjacencyNorm::Softmax, &props);
        assert_eq!(adj, vec![1.0]);
    }

    #[test]
    fn identical_fibers_give_uniform_rows() {
        // same human, same object, same category, same boxes for all proposals:
        // every relation fiber is identical, so softmax rows are uniform
        let p = prop(0, 1, 2, bb(0.0, 0.0, 4.0, 4.0), bb(4.0, 4.0, 8.0, 8.0));
        let props = vec![p.clone(), p.clone(), p];
        let (adj, k) = fuse(RelationToggles::default(), AdjacencyNorm::Softmax, &props);
        for v in adj {
            assert!((v - 1.0 / k as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let k = rng.gen_range(1..7usize);
            let props = random_props(&mut rng, k, 6);
            let (adj, _) = fuse(RelationToggles::default(), AdjacencyNorm::Softmax, &props);
            for j in 0..k {
                let row: f64 = adj[j * k..(j + 1) * k].iter().sum();
                assert!((row - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn learnable_adjacency_slices_topleft_block() {
        let toggles = RelationToggles {
            instance: false,
            semantic: false,
            layout: false,
            learnable: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let props = random_props(&mut rng, 3, 6);

        let mut store = ParamStore::new();
        let params = CtdParams::register(&mut store, 7, 6, 32, toggles, AdjacencyNorm::Raw);
        let learned = store.value(params.learnable_adj.unwrap()).clone();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let adj = params
            .fuse_adjacency(&mut tape, &mut binder, &props, 100.0, 100.0)
            .unwrap();
        let got = tape.value(adj);
        assert_eq!(got.shape, vec![3, 3]);
        for j in 0..3 {
            for i in 0..3 {
                assert_eq!(got.data[j * 3 + i], learned.data[j * 32 + i]);
            }
        }
    }

    #[test]
    fn zero_adjacency_update_is_identity() {
        let mut tape = Tape::new();
        let adj = tape.constant(Tensor::zeros(&[2, 2]));
        let nu = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let out = ctd_update(&mut tape, adj, nu).unwrap();
        assert_eq!(tape.value(out).data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn uniform_adjacency_hand_case() {
        // K = 2 with uniform rows: each output row = own + mean of both
        let mut tape = Tape::new();
        let adj = tape.constant(Tensor::new(vec![2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap());
        let nu = tape.constant(Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 4.0]).unwrap());
        let out = ctd_update(&mut tape, adj, nu).unwrap();
        assert_eq!(tape.value(out).data, vec![3.0, 2.0, 1.0, 6.0]);
    }

    #[test]
    fn update_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let k = 4;
        let d = 3;
        let adj_data: Vec<f64> = (0..k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let nu_data: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let perm = [2usize, 0, 3, 1];

        let run = |adj_data: &[f64], nu_data: &[f64]| -> Vec<f64> {
            let mut tape = Tape::new();
            let adj = tape.constant(Tensor::new(vec![k, k], adj_data.to_vec()).unwrap());
            let nu = tape.constant(Tensor::new(vec![k, d], nu_data.to_vec()).unwrap());
            let out = ctd_update(&mut tape, adj, nu).unwrap();
            tape.value(out).data.clone()
        };
        let base = run(&adj_data, &nu_data);

        let mut adj_p = vec![0.0; k * k];
        let mut nu_p = vec![0.0; k * d];
        for new_j in 0..k {
            for new_i in 0..k {
                adj_p[new_j * k + new_i] = adj_data[perm[new_j] * k + perm[new_i]];
            }
            nu_p[new_j * d..(new_j + 1) * d]
                .copy_from_slice(&nu_data[perm[new_j] * d..(perm[new_j] + 1) * d]);
        }
        let permuted = run(&adj_p, &nu_p);
        for new_j in 0..k {
            for c in 0..d {
                assert!((permuted[new_j * d + c] - base[perm[new_j] * d + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relation_toggle_validation() {
        assert!(RelationToggles::default().validate().is_ok());
        let bad = RelationToggles { instance: true, semantic: false, layout: false, learnable: true };
        assert!(bad.validate().is_err());
        let none = RelationToggles { instance: false, semantic: false, layout: false, learnable: false };
        assert!(none.validate().is_err());
    }
}
