//! Relation camouflage refiner: learnable encodings, a shared transformer
//! encoder, per-relation experts plus one global expert, a structure
//! perceptron prior, a manager that weights experts, and regularized expert
//! masking.
//!
//! Experts consume the full encoded sequence; their relation focus is
//! realized in which target tokens they aggregate (and in the structure
//! prior), not by slicing the input.

use std::rc::Rc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::MultiRelationGraph;
use crate::lga::{self, TokenMeta, TokenSequence};
use crate::nn::{Dropout, EncoderStack, Linear, Mlp, ParamStore};

/// Epsilon used to clamp probabilities before logs in the KL losses.
pub const KL_EPS: f64 = 1e-12;

/// Architecture and regularization settings of the refiner head.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RcrConfig {
    /// Number of experts; 0 resolves to `num_relations + 1`.
    pub n_e: usize,
    /// Encoder width.
    pub d_h: usize,
    pub n_heads: usize,
    pub public_depth: usize,
    /// Depth of each expert encoder and of the manager encoder.
    pub expert_depth: usize,
    /// Feed-forward width multiplier inside encoder layers.
    pub ff_mult: usize,
    pub dropout: f64,
    /// Raw-vs-filtered mix in the structure perceptron.
    pub beta: f64,
    /// Expected fraction of experts masked per draw.
    pub masking_ratio: f64,
    /// Feed each relation expert only its own relation's token segment
    /// instead of the full encoded sequence (sensitivity mode).
    pub slice_expert_input: bool,
}

impl Default for RcrConfig {
    fn default() -> Self {
        Self {
            n_e: 0,
            d_h: 32,
            n_heads: 4,
            public_depth: 2,
            expert_depth: 1,
            ff_mult: 4,
            dropout: 0.1,
            beta: 0.5,
            masking_ratio: 0.15,
            slice_expert_input: false,
        }
    }
}

impl RcrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 || self.n_heads == 0 || self.d_h % self.n_heads != 0 {
            return Err(Error::Config("d_h must be a positive multiple of n_heads".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config("beta must be in [0,1]".into()));
        }
        if !(0.0..=0.5).contains(&self.masking_ratio) {
            return Err(Error::Config("masking_ratio must be in [0,0.5]".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0,1)".into()));
        }
        if self.ff_mult == 0 {
            return Err(Error::Config("ff_mult must be >= 1".into()));
        }
        Ok(())
    }
}

/// The three learnable token encodings plus the input projection.
#[derive(Debug, Clone)]
pub struct Encodings {
    pub relation_table: crate::nn::ParamId,
    pub hop_table: crate::nn::ParamId,
    pub group_table: crate::nn::ParamId,
    pub input_proj: Linear,
}

/// One expert: an encoder stack and a classifier over concatenated target
/// tokens (input width `2 * d_h`).
#[derive(Debug, Clone)]
pub struct Expert {
    pub encoder: EncoderStack,
    pub classifier: Mlp,
}

/// The full refiner head.
#[derive(Debug)]
pub struct MoeHead {
    pub store: ParamStore,
    pub encodings: Encodings,
    pub public_encoder: EncoderStack,
    pub experts: Vec<Expert>,
    /// Absent in the degenerate single-expert configuration.
    pub manager: Option<Expert>,
    /// Relation ids each expert focuses on; the global expert lists all.
    pub relation_sets: Vec<Vec<usize>>,
    pub config: RcrConfig,
    pub num_relations: usize,
    pub hops: usize,
    pub feature_dim: usize,
    layout: Vec<TokenMeta>,
}

impl MoeHead {
    pub fn new(
        feature_dim: usize,
        num_relations: usize,
        hops: usize,
        config: &RcrConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let n_e = if config.n_e == 0 { num_relations + 1 } else { config.n_e };
        if n_e != num_relations + 1 && n_e != 1 {
            return Err(Error::Config(format!(
                "n_e must be 1 or num_relations + 1 = {}, got {n_e}",
                num_relations + 1
            )));
        }
        let relation_sets: Vec<Vec<usize>> = if n_e == 1 {
            vec![(0..num_relations).collect()]
        } else {
            let mut sets: Vec<Vec<usize>> = (0..num_relations).map(|r| vec![r]).collect();
            sets.push((0..num_relations).collect());
            sets
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d_h = config.d_h;
        let ff = config.ff_mult * d_h;
        let encodings = Encodings {
            relation_table: store
                .alloc("enc.relation", crate::nn::xavier(&mut rng, num_relations, d_h)),
            hop_table: store.alloc("enc.hop", crate::nn::xavier(&mut rng, hops + 1, d_h)),
            group_table: store.alloc("enc.group", crate::nn::xavier(&mut rng, lga::NUM_GROUPS, d_h)),
            input_proj: Linear::new(&mut store, "enc.proj", feature_dim, d_h, true, &mut rng),
        };
        let public_encoder = EncoderStack::new(
            &mut store,
            "public",
            config.public_depth,
            d_h,
            ff,
            config.n_heads,
            &mut rng,
        );
        let experts = (0..n_e)
            .map(|i| Expert {
                encoder: EncoderStack::new(
                    &mut store,
                    &format!("expert{i}.enc"),
                    config.expert_depth,
                    d_h,
                    ff,
                    config.n_heads,
                    &mut rng,
                ),
                classifier: Mlp::new(
                    &mut store,
                    &format!("expert{i}.cls"),
                    &[2 * d_h, d_h, 2],
                    true,
                    &mut rng,
                ),
            })
            .collect();
        let manager = (n_e > 1).then(|| Expert {
            encoder: EncoderStack::new(
                &mut store,
                "manager.enc",
                config.expert_depth,
                d_h,
                ff,
                config.n_heads,
                &mut rng,
            ),
            classifier: Mlp::new(&mut store, "manager.cls", &[2 * d_h, d_h, n_e], true, &mut rng),
        });

        let mut resolved = config.clone();
        resolved.n_e = n_e;
        Ok(Self {
            store,
            encodings,
            public_encoder,
            experts,
            manager,
            relation_sets,
            config: resolved,
            num_relations,
            hops,
            feature_dim,
            layout: lga::token_layout(num_relations, hops),
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn seq_len(&self) -> usize {
        self.layout.len()
    }

    /// Token encodings for a batch: projected tokens plus the relation, hop,
    /// and group table rows selected by each position's metadata.
    pub fn encode_input_t(&self, tape: &mut Tape, tokens: Var, batch: usize) -> Var {
        let s = self.seq_len();
        assert_eq!(tape.value(tokens).nrows(), batch * s, "token rows");
        self.encode_with_meta(tape, tokens, &self.layout.repeat(batch))
    }

    fn encode_with_meta(&self, tape: &mut Tape, tokens: Var, meta: &[TokenMeta]) -> Var {
        assert_eq!(tape.value(tokens).nrows(), meta.len(), "one meta entry per token row");
        let mut rel_ids = Vec::with_capacity(meta.len());
        let mut hop_ids = Vec::with_capacity(meta.len());
        let mut grp_ids = Vec::with_capacity(meta.len());
        for m in meta {
            rel_ids.push(m.relation as usize);
            hop_ids.push(m.hop as usize);
            grp_ids.push(m.group as usize);
        }
        let proj = self.encodings.input_proj.forward(tape, &self.store, tokens);
        let rel_t = self.store.read(tape, self.encodings.relation_table);
        let hop_t = self.store.read(tape, self.encodings.hop_table);
        let grp_t = self.store.read(tape, self.encodings.group_table);
        let rel = tape.gather_rows(rel_t, Rc::new(rel_ids));
        let hop = tape.gather_rows(hop_t, Rc::new(hop_ids));
        let grp = tape.gather_rows(grp_t, Rc::new(grp_ids));
        let a = tape.add(proj, rel);
        let b = tape.add(a, hop);
        tape.add(b, grp)
    }

    /// Single-sequence convenience wrapper; validates metadata bounds.
    pub fn encode_input(&self, seq: &TokenSequence) -> Result<Array2<f64>> {
        if seq.tokens.ncols() != self.feature_dim {
            return Err(Error::Shape(format!(
                "token width {} != feature dim {}",
                seq.tokens.ncols(),
                self.feature_dim
            )));
        }
        for m in &seq.meta {
            if m.relation as usize >= self.num_relations
                || m.hop as usize > self.hops
                || m.group as usize >= lga::NUM_GROUPS
            {
                return Err(Error::InvalidArgument(format!(
                    "token metadata out of bounds: ({}, {}, {})",
                    m.relation, m.hop, m.group
                )));
            }
        }
        let mut tape = Tape::new();
        let tokens = tape.constant(seq.tokens.mapv(f64::from));
        let out = self.encode_with_meta(&mut tape, tokens, &seq.meta);
        Ok(tape.value(out).clone())
    }

    pub fn public_encode_t(
        &self,
        tape: &mut Tape,
        x_in: Var,
        dropout: Option<&mut Dropout>,
    ) -> Var {
        self.public_encoder.forward(tape, &self.store, x_in, self.seq_len(), dropout)
    }

    /// Single-sequence public encoding (no dropout).
    pub fn public_encode(&self, x_in: &Array2<f64>) -> Array2<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(x_in.clone());
        let h = self.public_encode_t(&mut tape, x, None);
        tape.value(h).clone()
    }

    /// Concatenate the encoded raw/filtered target tokens the expert focuses
    /// on: the focal relation's pair, or across-relation means for a
    /// multi-relation set.
    fn aggregate_targets(
        &self,
        tape: &mut Tape,
        encoded: Var,
        batch: usize,
        relation_set: &[usize],
    ) -> Var {
        let s = self.seq_len();
        let seg = lga::segment_len(self.hops);
        let gather_part = |tape: &mut Tape, offset: usize| -> Var {
            if relation_set.len() == 1 {
                let r = relation_set[0];
                let idx: Vec<usize> = (0..batch).map(|n| n * s + r * seg + offset).collect();
                tape.gather_rows(encoded, Rc::new(idx))
            } else {
                let mut idx = Vec::with_capacity(batch * relation_set.len());
                for n in 0..batch {
                    for &r in relation_set {
                        idx.push(n * s + r * seg + offset);
                    }
                }
                let rows = tape.gather_rows(encoded, Rc::new(idx));
                tape.group_mean_rows(rows, relation_set.len())
            }
        };
        let raw = gather_part(tape, 0);
        let filt = gather_part(tape, 1);
        tape.concat_cols(raw, filt)
    }

    /// Expert i on the public representation: returns (logits, probs), each
    /// one row per node in the batch.
    pub fn expert_forward_t(
        &self,
        tape: &mut Tape,
        i: usize,
        h: Var,
        batch: usize,
        dropout: Option<&mut Dropout>,
    ) -> (Var, Var) {
        let expert = &self.experts[i];
        let set = &self.relation_sets[i];
        let seg = lga::segment_len(self.hops);
        let agg = if self.config.slice_expert_input && set.len() == 1 {
            // Sensitivity mode: the expert encoder sees only its focal
            // relation's token segment.
            let s = self.seq_len();
            let r = set[0];
            let mut idx = Vec::with_capacity(batch * seg);
            for n in 0..batch {
                for t in 0..seg {
                    idx.push(n * s + r * seg + t);
                }
            }
            let sliced = tape.gather_rows(h, Rc::new(idx));
            let encoded = expert.encoder.forward(tape, &self.store, sliced, seg, dropout);
            let raw_idx: Vec<usize> = (0..batch).map(|n| n * seg).collect();
            let filt_idx: Vec<usize> = (0..batch).map(|n| n * seg + 1).collect();
            let raw = tape.gather_rows(encoded, Rc::new(raw_idx));
            let filt = tape.gather_rows(encoded, Rc::new(filt_idx));
            tape.concat_cols(raw, filt)
        } else {
            let encoded = expert.encoder.forward(tape, &self.store, h, self.seq_len(), dropout);
            self.aggregate_targets(tape, encoded, batch, set)
        };
        let logits = expert.classifier.forward(tape, &self.store, agg);
        let probs = tape.softmax_rows(logits);
        (logits, probs)
    }

    /// Single-sequence expert probabilities.
    pub fn expert_forward(&self, i: usize, h: &Array2<f64>) -> Result<Vec<f64>> {
        if i >= self.n_experts() {
            return Err(Error::InvalidArgument(format!(
                "expert {i} out of range (n_e = {})",
                self.n_experts()
            )));
        }
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let (_, probs) = self.expert_forward_t(&mut tape, i, hv, 1, None);
        Ok(tape.value(probs).row(0).to_vec())
    }

    /// Manager on the public representation: returns (logits, a_M).
    pub fn manager_forward_t(
        &self,
        tape: &mut Tape,
        h: Var,
        batch: usize,
        dropout: Option<&mut Dropout>,
    ) -> (Var, Var) {
        let manager = self.manager.as_ref().expect("manager_forward on single-expert head");
        let encoded = manager.encoder.forward(tape, &self.store, h, self.seq_len(), dropout);
        let all: Vec<usize> = (0..self.num_relations).collect();
        let agg = self.aggregate_targets(tape, encoded, batch, &all);
        let logits = manager.classifier.forward(tape, &self.store, agg);
        let a_m = tape.softmax_rows(logits);
        (logits, a_m)
    }

    /// Single-sequence manager scores.
    pub fn manager_forward(&self, h: &Array2<f64>) -> Result<Vec<f64>> {
        if self.manager.is_none() {
            return Err(Error::InvalidArgument("head has no manager".into()));
        }
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let (_, a_m) = self.manager_forward_t(&mut tape, hv, 1, None);
        Ok(tape.value(a_m).row(0).to_vec())
    }

    /// Inference over a batch of flattened sequences (no dropout, no masking).
    pub fn infer_batch(&self, tokens: &Array2<f64>, batch: usize) -> BatchInference {
        let mut tape = Tape::new();
        let t = tape.constant(tokens.clone());
        let x_in = self.encode_input_t(&mut tape, t, batch);
        let h = self.public_encode_t(&mut tape, x_in, None);
        let expert_probs: Vec<Array2<f64>> = (0..self.n_experts())
            .map(|i| {
                let (_, p) = self.expert_forward_t(&mut tape, i, h, batch, None);
                tape.value(p).clone()
            })
            .collect();
        let a_m = match &self.manager {
            Some(_) => {
                let (_, a) = self.manager_forward_t(&mut tape, h, batch, None);
                tape.value(a).clone()
            }
            None => Array2::ones((batch, 1)),
        };
        let mut combined = Array2::zeros((batch, 2));
        for (i, probs) in expert_probs.iter().enumerate() {
            for n in 0..batch {
                for c in 0..2 {
                    combined[[n, c]] += a_m[[n, i]] * probs[[n, c]];
                }
            }
        }
        BatchInference { expert_probs, a_m, combined }
    }
}

/// Per-batch inference outputs.
#[derive(Debug, Clone)]
pub struct BatchInference {
    /// One (batch x 2) matrix per expert.
    pub expert_probs: Vec<Array2<f64>>,
    /// (batch x n_e) manager scores (all-ones column when no manager).
    pub a_m: Array2<f64>,
    /// (batch x 2) weighted prediction.
    pub combined: Array2<f64>,
}

fn softmax_slice(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Raw per-expert structure scores of node `v`: a beta-blend of mean raw and
/// mean filtered cosine similarity to neighbors under each expert's relation
/// set (0 for empty neighbor sets, and zero-norm rows contribute 0).
pub fn structure_scores(
    graph: &MultiRelationGraph,
    v: usize,
    x: &Array2<f64>,
    xprime: &Array2<f64>,
    relation_sets: &[Vec<usize>],
    beta: f64,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument("beta must be in [0,1]".into()));
    }
    let xv: Vec<f64> = x.row(v).to_vec();
    let xpv: Vec<f64> = xprime.row(v).to_vec();
    let mut scores = Vec::with_capacity(relation_sets.len());
    for set in relation_sets {
        let mut neigh: Vec<u32> = Vec::new();
        for &r in set {
            neigh.extend_from_slice(graph.neighbors(r, v));
        }
        neigh.sort_unstable();
        neigh.dedup();
        if neigh.is_empty() {
            scores.push(0.0);
            continue;
        }
        let inv = 1.0 / neigh.len() as f64;
        let mut raw = 0.0;
        let mut filt = 0.0;
        for &u in &neigh {
            raw += cosine(&x.row(u as usize).to_vec(), &xv);
            filt += cosine(&xprime.row(u as usize).to_vec(), &xpv);
        }
        scores.push(beta * raw * inv + (1.0 - beta) * filt * inv);
    }
    Ok(scores)
}

/// Softmax-normalized structure prior `a_G` for node `v`.
pub fn structure_prior(
    graph: &MultiRelationGraph,
    v: usize,
    x: &Array2<f64>,
    xprime: &Array2<f64>,
    relation_sets: &[Vec<usize>],
    beta: f64,
) -> Result<Vec<f64>> {
    Ok(softmax_slice(&structure_scores(graph, v, x, xprime, relation_sets, beta)?))
}

/// `a_G` rows for every node.
pub fn structure_prior_matrix(
    graph: &MultiRelationGraph,
    x: &Array2<f64>,
    xprime: &Array2<f64>,
    relation_sets: &[Vec<usize>],
    beta: f64,
) -> Result<Array2<f64>> {
    let n_e = relation_sets.len();
    let mut out = Array2::zeros((graph.num_nodes(), n_e));
    for v in 0..graph.num_nodes() {
        let prior = structure_prior(graph, v, x, xprime, relation_sets, beta)?;
        for (i, p) in prior.into_iter().enumerate() {
            out[[v, i]] = p;
        }
    }
    Ok(out)
}

/// KL divergence D(a_G || a_M) with 0 ln 0 = 0 and an epsilon clamp on a_M.
pub fn loss_guidance(a_g: &[f64], a_m: &[f64]) -> Result<f64> {
    if a_g.len() != a_m.len() {
        return Err(Error::Shape("a_G and a_M must have equal length".into()));
    }
    let mut kl = 0.0;
    for (&g, &m) in a_g.iter().zip(a_m) {
        if g > 0.0 {
            kl += g * (g.ln() - m.max(KL_EPS).ln());
        }
    }
    Ok(kl)
}

/// Tape version of the guidance loss, batch-averaged: the gradient flows into
/// the manager logits through their row-wise log-softmax.
pub fn guidance_loss_t(tape: &mut Tape, manager_logits: Var, a_g: &Array2<f64>) -> Var {
    let (b, n_e) = a_g.dim();
    assert_eq!(tape.value(manager_logits).dim(), (b, n_e), "guidance shapes");
    let entropy_term: f64 = a_g.iter().filter(|&&g| g > 0.0).map(|&g| g * g.ln()).sum();
    let logsm = tape.log_softmax_rows(manager_logits);
    let cross = tape.mul_const(logsm, a_g.clone());
    let cross_sum = tape.sum_all(cross);
    let neg = tape.scale(cross_sum, -1.0 / b as f64);
    tape.add_scalar(neg, entropy_term / b as f64)
}

/// A redistribution draw: masked experts and the rescaled score vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskDraw {
    pub masked: Vec<usize>,
    pub a_masked: Vec<f64>,
}

/// Draw a mask set: each expert masked independently with probability
/// `ratio`, redrawn whenever every expert would be masked.
pub fn draw_mask_set(n_e: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if ratio <= 0.0 {
        return Vec::new();
    }
    loop {
        let masked: Vec<usize> = (0..n_e).filter(|_| rng.random::<f64>() < ratio).collect();
        if masked.len() < n_e {
            return masked;
        }
    }
}

/// Redistribute the masked mass of `a_m` evenly over unmasked experts.
pub fn redistribute(a_m: &[f64], masked: &[usize]) -> Vec<f64> {
    let n_e = a_m.len();
    let is_masked: Vec<bool> = {
        let mut v = vec![false; n_e];
        for &i in masked {
            v[i] = true;
        }
        v
    };
    let masked_mass: f64 = masked.iter().map(|&i| a_m[i]).sum();
    let unmasked = n_e - masked.len();
    let share = if unmasked > 0 { masked_mass / unmasked as f64 } else { 0.0 };
    (0..n_e).map(|i| if is_masked[i] { 0.0 } else { a_m[i] + share }).collect()
}

/// Linear map sending a_M rows to their redistributed versions.
pub fn redistribution_matrix(masked: &[usize], n_e: usize) -> Array2<f64> {
    let mut is_masked = vec![false; n_e];
    for &i in masked {
        is_masked[i] = true;
    }
    let unmasked = n_e - masked.len();
    let share = if unmasked > 0 { 1.0 / unmasked as f64 } else { 0.0 };
    Array2::from_shape_fn((n_e, n_e), |(j, i)| {
        if is_masked[i] {
            0.0
        } else if is_masked[j] {
            share
        } else {
            f64::from(i == j)
        }
    })
}

/// Mask `a_m` with per-expert Bernoulli(ratio) draws (all-masked redrawn).
pub fn apply_mask(a_m: &[f64], ratio: f64, rng: &mut ChaCha8Rng) -> Result<MaskDraw> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument("masking ratio must be in [0,1)".into()));
    }
    let masked = draw_mask_set(a_m.len(), ratio, rng);
    let a_masked = redistribute(a_m, &masked);
    Ok(MaskDraw { masked, a_masked })
}

/// KL between the expert mixtures before and after masking, for one node.
pub fn loss_regularized_mask(
    a_m: &[f64],
    mask: &MaskDraw,
    expert_probs: &Array2<f64>,
) -> Result<f64> {
    let n_e = a_m.len();
    if expert_probs.nrows() != n_e || mask.a_masked.len() != n_e {
        return Err(Error::Shape("expert_probs rows must match n_e".into()));
    }
    let mut q = [0.0f64; 2];
    let mut q_masked = [0.0f64; 2];
    for i in 0..n_e {
        for c in 0..2 {
            q[c] += a_m[i] * expert_probs[[i, c]];
            q_masked[c] += mask.a_masked[i] * expert_probs[[i, c]];
        }
    }
    let mut kl = 0.0;
    for c in 0..2 {
        if q[c] > 0.0 {
            kl += q[c] * (q[c].ln() - q_masked[c].max(KL_EPS).ln());
        }
    }
    Ok(kl)
}

/// Tape version of the masking loss, batch-averaged. `a_m` is (B x n_e),
/// each expert prob matrix is (B x 2), and the mask set is shared across the
/// batch; the redistributed scores stay differentiable in a_M.
pub fn regularized_mask_loss_t(
    tape: &mut Tape,
    a_m: Var,
    expert_probs: &[Var],
    masked: &[usize],
) -> Var {
    let (b, n_e) = tape.value(a_m).dim();
    assert_eq!(expert_probs.len(), n_e, "one prob matrix per expert");
    let t = tape.constant(redistribution_matrix(masked, n_e));
    let a_masked = tape.matmul(a_m, t);

    let mixture = |tape: &mut Tape, weights: Var| -> Var {
        let mut acc: Option<Var> = None;
        for (i, &p) in expert_probs.iter().enumerate() {
            let col = tape.gather_cols(weights, Rc::new(vec![i]));
            let term = tape.mul_col(p, col);
            acc = Some(match acc {
                Some(a) => tape.add(a, term),
                None => term,
            });
        }
        acc.expect("at least one expert")
    };
    let q = mixture(tape, a_m);
    let q_masked = mixture(tape, a_masked);
    let qc = tape.clamp_min(q, KL_EPS);
    let qmc = tape.clamp_min(q_masked, KL_EPS);
    let lq = tape.ln(qc);
    let lqm = tape.ln(qmc);
    let diff = tape.sub(lq, lqm);
    let terms = tape.mul(q, diff);
    let total = tape.sum_all(terms);
    tape.scale(total, 1.0 / b as f64)
}

/// Manager-weighted detection loss for one node: sum_i a_M[i] * CE(p_i, y).
pub fn loss_detection(a_m: &[f64], expert_probs: &Array2<f64>, y: u8) -> Result<f64> {
    if expert_probs.nrows() != a_m.len() {
        return Err(Error::Shape("expert_probs rows must match n_e".into()));
    }
    if y > 1 {
        return Err(Error::InvalidArgument("label must be 0 or 1".into()));
    }
    Ok(a_m
        .iter()
        .enumerate()
        .map(|(i, &w)| w * -expert_probs[[i, y as usize]].max(KL_EPS).ln())
        .sum())
}

/// Tape version of the detection loss, batch-averaged. Cross-entropies come
/// from the expert logits for stability.
pub fn detection_loss_t(
    tape: &mut Tape,
    a_m: Var,
    expert_logits: &[Var],
    targets: &[u8],
) -> Var {
    let (b, n_e) = tape.value(a_m).dim();
    assert_eq!(expert_logits.len(), n_e, "one logit matrix per expert");
    let mut onehot = Array2::zeros((b, 2));
    for (i, &t) in targets.iter().enumerate() {
        onehot[[i, t as usize]] = 1.0;
    }
    let mut ce_cols: Option<Var> = None;
    for &logits in expert_logits {
        let ls = tape.log_softmax_rows(logits);
        let picked = tape.mul_const(ls, onehot.clone());
        let rs = tape.row_sum(picked);
        let ce = tape.scale(rs, -1.0);
        ce_cols = Some(match ce_cols {
            Some(prev) => tape.concat_cols(prev, ce),
            None => ce,
        });
    }
    let ce = ce_cols.expect("at least one expert");
    let weighted = tape.mul(a_m, ce);
    let total = tape.sum_all(weighted);
    tape.scale(total, 1.0 / b as f64)
}

/// Weighted final prediction for one node: sum_i a_M[i] * p_i.
pub fn predict(a_m: &[f64], expert_probs: &Array2<f64>) -> [f64; 2] {
    let mut out = [0.0f64; 2];
    for (i, &w) in a_m.iter().enumerate() {
        for c in 0..2 {
            out[c] += w * expert_probs[[i, c]];
        }
    }
    out
}
