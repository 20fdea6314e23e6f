//! Feature camouflage filter: an MLP that rewrites node features, supervised
//! by pseudo-labels through a mean-aggregating GNN head and shaped by
//! instance- and prototype-wise contrastive terms.
//!
//! The combined stage-1 objective is
//! `L1 = L_GNN + lambda1 * L_IC + lambda2 * L_PC`, minimized by mini-batch
//! Adam over all nodes with the hard pseudo-labels as supervision.

use std::rc::Rc;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{MeanAggGraph, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::MultiRelationGraph;
use crate::label_prop::PseudoLabels;
use crate::nn::{Adam, Linear, Mlp, ParamStore};

const COSINE_EPS: f64 = 1e-12;

/// Stage-1 hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FcfConfig {
    /// Contrastive temperature; must be positive.
    pub tau: f64,
    /// Weight of the instance-wise contrastive loss.
    pub lambda1: f64,
    /// Weight of the prototype-wise contrastive loss.
    pub lambda2: f64,
    pub gnn_layers: usize,
    /// Filter MLP hidden widths; an entry of 0 stands for the feature dim.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Exclude k = i from the instance-contrastive denominator (off keeps
    /// the literal formula).
    pub exclude_self_similarity: bool,
    pub seed: u64,
}

impl Default for FcfConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            lambda1: 0.1,
            lambda2: 0.1,
            gnn_layers: 2,
            hidden: vec![0],
            epochs: 50,
            batch_size: 256,
            learning_rate: 3e-3,
            weight_decay: 1e-4,
            exclude_self_similarity: false,
            seed: 0,
        }
    }
}

impl FcfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("lambda1 and lambda2 must be nonnegative".into()));
        }
        if self.gnn_layers == 0 {
            return Err(Error::Config("gnn_layers must be >= 1".into()));
        }
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::Config("epochs >= 1 and batch_size >= 2 required".into()));
        }
        Ok(())
    }

    fn filter_dims(&self, d: usize) -> Vec<usize> {
        let mut dims = vec![d];
        for &h in &self.hidden {
            dims.push(if h == 0 { d } else { h });
        }
        dims.push(d);
        dims
    }
}

/// Trained filter: MLP rewriter, GNN layers, and the 2-way pseudo-label head.
/// The filter output width always equals the input width so cosine terms
/// against original-feature prototypes stay well-typed.
#[derive(Debug, Clone)]
pub struct FilterModel {
    pub store: ParamStore,
    pub mlp: Mlp,
    pub gnn: Vec<Linear>,
    pub head: Linear,
    pub feature_dim: usize,
}

impl FilterModel {
    pub fn new(feature_dim: usize, config: &FcfConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "filter", &config.filter_dims(feature_dim), true, rng);
        let gnn = (0..config.gnn_layers)
            .map(|l| {
                Linear::new(&mut store, &format!("gnn.{l}"), feature_dim, feature_dim, false, rng)
            })
            .collect();
        let head = Linear::new(&mut store, "head", feature_dim, 2, true, rng);
        Self { store, mlp, gnn, head, feature_dim }
    }

    /// Identity filter / identity GNN / zero head; a fixture for tests and
    /// the raw-equals-filtered export path.
    pub fn identity(feature_dim: usize, gnn_layers: usize) -> Self {
        let mut store = ParamStore::new();
        let mlp = Mlp { layers: vec![Linear::identity(&mut store, "filter.0", feature_dim)] };
        let gnn = (0..gnn_layers)
            .map(|l| {
                let w = store.alloc(format!("gnn.{l}.w"), Array2::eye(feature_dim));
                Linear { w, b: None, din: feature_dim, dout: feature_dim }
            })
            .collect();
        let head = Linear {
            w: store.alloc("head.w", Array2::zeros((feature_dim, 2))),
            b: Some(store.alloc("head.b", Array2::zeros((1, 2)))),
            din: feature_dim,
            dout: 2,
        };
        Self { store, mlp, gnn, head, feature_dim }
    }

    pub fn filter_forward_t(&self, tape: &mut Tape, x: Var) -> Var {
        self.mlp.forward(tape, &self.store, x)
    }

    /// Rewrite features; deterministic given parameters.
    pub fn filter_features(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.feature_dim {
            return Err(Error::Shape(format!(
                "expected {} feature columns, got {}",
                self.feature_dim,
                x.ncols()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("features must be finite".into()));
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.filter_forward_t(&mut tape, xv);
        Ok(tape.value(out).clone())
    }

    pub fn gnn_forward_t(&self, tape: &mut Tape, union: Rc<MeanAggGraph>, xprime: Var) -> Var {
        let mut h = xprime;
        for layer in &self.gnn {
            let agg = tape.neighbor_mean(h, union.clone());
            let summed = tape.add(h, agg);
            let lin = layer.forward(tape, &self.store, summed);
            h = tape.relu(lin);
        }
        h
    }

    /// Embed filtered features through the mean-aggregating GNN over the
    /// union graph of all relations.
    pub fn gnn_forward(
        &self,
        graph: &MultiRelationGraph,
        xprime: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        if xprime.nrows() != graph.num_nodes() || xprime.ncols() != self.feature_dim {
            return Err(Error::Shape(format!(
                "X' must be {} x {}, got {} x {}",
                graph.num_nodes(),
                self.feature_dim,
                xprime.nrows(),
                xprime.ncols()
            )));
        }
        let union = Rc::new(MeanAggGraph { neighbors: graph.union_adjacency() });
        let mut tape = Tape::new();
        let xv = tape.constant(xprime.clone());
        let z = self.gnn_forward_t(&mut tape, union, xv);
        Ok(tape.value(z).clone())
    }

    /// Mean softmax cross-entropy of the head on `node_set` against hard
    /// pseudo-labels.
    pub fn loss_gnn(
        &self,
        z: &Array2<f64>,
        targets: &PseudoLabels,
        node_set: &[u32],
    ) -> Result<f64> {
        if node_set.is_empty() {
            return Err(Error::InvalidArgument("node_set is empty".into()));
        }
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let idx = Rc::new(node_set.iter().map(|&v| v as usize).collect::<Vec<_>>());
        let zb = tape.gather_rows(zv, idx);
        let logits = self.head.forward(&mut tape, &self.store, zb);
        let labels: Vec<u8> = node_set.iter().map(|&v| targets.hard[v as usize]).collect();
        let loss = cross_entropy_t(&mut tape, logits, &labels);
        Ok(tape.scalar(loss))
    }
}

/// Mean 2-way softmax cross-entropy of `logits` rows against `targets`.
pub fn cross_entropy_t(tape: &mut Tape, logits: Var, targets: &[u8]) -> Var {
    let n = targets.len();
    assert_eq!(tape.value(logits).nrows(), n, "one logit row per target");
    let ncols = tape.value(logits).ncols();
    let mut onehot = Array2::zeros((n, ncols));
    for (i, &t) in targets.iter().enumerate() {
        onehot[[i, t as usize]] = 1.0;
    }
    let ls = tape.log_softmax_rows(logits);
    let picked = tape.mul_const(ls, onehot);
    let total = tape.sum_all(picked);
    tape.scale(total, -1.0 / n as f64)
}

/// Instance-wise contrastive loss over a batch of filtered rows.
///
/// For each anchor i, every same-label j != i is a positive; the denominator
/// ranges over the whole batch (including k = i unless `exclude_self`).
/// Anchors with no positive contribute 0.
pub fn instance_contrastive_t(
    tape: &mut Tape,
    xprime: Var,
    labels: &[u8],
    tau: f64,
    exclude_self: bool,
) -> Var {
    let b = labels.len();
    assert_eq!(tape.value(xprime).nrows(), b, "one row per label");
    let xn = tape.row_l2_normalize(xprime, COSINE_EPS);
    let sims = tape.matmul_nt(xn, xn);
    let scaled = tape.scale(sims, 1.0 / tau);

    let mut pos_mask = Array2::zeros((b, b));
    let mut pos_counts = Array2::zeros((b, 1));
    for i in 0..b {
        for j in 0..b {
            if i != j && labels[i] == labels[j] {
                pos_mask[[i, j]] = 1.0;
                pos_counts[[i, 0]] += 1.0;
            }
        }
    }

    let denom_input = if exclude_self {
        // Push the self column out of the log-sum-exp.
        let mut self_mask = Array2::zeros((b, b));
        for i in 0..b {
            self_mask[[i, i]] = -1e30;
        }
        let mask_c = tape.constant(self_mask);
        tape.add(scaled, mask_c)
    } else {
        scaled
    };
    let lse = tape.logsumexp_rows(denom_input);
    let lse_weighted = tape.mul_const(lse, pos_counts);
    let t1 = tape.sum_all(lse_weighted);
    let pos_sims = tape.mul_const(scaled, pos_mask);
    let t2 = tape.sum_all(pos_sims);
    let diff = tape.sub(t1, t2);
    tape.scale(diff, 1.0 / b as f64)
}

/// Value-level wrapper over [`instance_contrastive_t`].
pub fn loss_instance_contrastive(
    xprime_batch: &Array2<f64>,
    labels: &[u8],
    tau: f64,
) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::InvalidArgument("tau must be positive".into()));
    }
    if labels.len() < 2 {
        return Err(Error::InvalidArgument("contrastive batch needs >= 2 rows".into()));
    }
    if xprime_batch.nrows() != labels.len() {
        return Err(Error::Shape("rows and labels must align".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(xprime_batch.clone());
    let loss = instance_contrastive_t(&mut tape, x, labels, tau, false);
    Ok(tape.scalar(loss))
}

/// Per-class means of the original feature rows; `None` if a class is absent.
pub fn class_prototypes(x_batch: &Array2<f64>, labels: &[u8]) -> Option<Array2<f64>> {
    let mut proto = Array2::zeros((2, x_batch.ncols()));
    let mut counts = [0.0f64; 2];
    for (i, &l) in labels.iter().enumerate() {
        counts[l as usize] += 1.0;
        let row = x_batch.row(i);
        for j in 0..x_batch.ncols() {
            proto[[l as usize, j]] += row[j];
        }
    }
    if counts[0] == 0.0 || counts[1] == 0.0 {
        return None;
    }
    for c in 0..2 {
        let inv = 1.0 / counts[c];
        proto.row_mut(c).mapv_inplace(|v| v * inv);
    }
    Some(proto)
}

/// Prototype-wise contrastive loss against the two class prototypes.
pub fn prototype_contrastive_t(
    tape: &mut Tape,
    xprime: Var,
    prototypes: &Array2<f64>,
    labels: &[u8],
    tau: f64,
) -> Var {
    let b = labels.len();
    assert_eq!(tape.value(xprime).nrows(), b, "one row per label");
    // Prototypes are constants (original-feature means): normalize directly.
    let mut proto_n = prototypes.clone();
    for mut row in proto_n.axis_iter_mut(Axis(0)) {
        let norm = (row.iter().map(|x| x * x).sum::<f64>() + COSINE_EPS * COSINE_EPS).sqrt();
        row.mapv_inplace(|x| x / norm);
    }
    let xn = tape.row_l2_normalize(xprime, COSINE_EPS);
    let protos = tape.constant(proto_n);
    let sims = tape.matmul_nt(xn, protos);
    let scaled = tape.scale(sims, 1.0 / tau);

    let mut onehot = Array2::zeros((b, 2));
    for (i, &l) in labels.iter().enumerate() {
        onehot[[i, l as usize]] = 1.0;
    }
    let lse = tape.logsumexp_rows(scaled);
    let t1 = tape.sum_all(lse);
    let own = tape.mul_const(scaled, onehot);
    let t2 = tape.sum_all(own);
    let diff = tape.sub(t1, t2);
    tape.scale(diff, 1.0 / b as f64)
}

/// Value-level wrapper over [`prototype_contrastive_t`]. Returns `None` when a
/// class is absent from the batch (the batch is skipped, contributing 0).
pub fn loss_prototype_contrastive(
    xprime_batch: &Array2<f64>,
    x_batch: &Array2<f64>,
    labels: &[u8],
    tau: f64,
) -> Result<Option<f64>> {
    if tau <= 0.0 {
        return Err(Error::InvalidArgument("tau must be positive".into()));
    }
    if xprime_batch.nrows() != labels.len() || x_batch.nrows() != labels.len() {
        return Err(Error::Shape("rows and labels must align".into()));
    }
    let Some(prototypes) = class_prototypes(x_batch, labels) else {
        return Ok(None);
    };
    let mut tape = Tape::new();
    let x = tape.constant(xprime_batch.clone());
    let loss = prototype_contrastive_t(&mut tape, x, &prototypes, labels, tau);
    Ok(Some(tape.scalar(loss)))
}

/// Per-epoch mean stage-1 loss components.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FcfEpochLog {
    pub l1: f64,
    pub l_gnn: f64,
    pub l_ic: f64,
    pub l_pc: f64,
}

#[derive(Debug)]
pub struct FcfTrainOutput {
    pub model: FilterModel,
    pub x_prime: Array2<f64>,
    pub trace: Vec<FcfEpochLog>,
    /// Batches skipped for L_PC because a class was absent.
    pub lpc_skipped_batches: u64,
}

/// Train the filter on `L1 = L_GNN + lambda1 L_IC + lambda2 L_PC` with
/// mini-batch Adam; deterministic given `config.seed`.
pub fn train_fcf(
    graph: &MultiRelationGraph,
    pseudo: &PseudoLabels,
    config: &FcfConfig,
) -> Result<FcfTrainOutput> {
    config.validate()?;
    let n = graph.num_nodes();
    let d = graph.feature_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = FilterModel::new(d, config, &mut rng);
    let mut adam = Adam::new(&model.store, config.learning_rate, config.weight_decay);
    let union = Rc::new(MeanAggGraph { neighbors: graph.union_adjacency() });
    let x = graph.features().clone();

    let mut trace = Vec::with_capacity(config.epochs);
    let mut lpc_skipped = 0u64;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut batches: Vec<Vec<usize>> =
            order.chunks(config.batch_size).map(<[usize]>::to_vec).collect();
        // A singleton tail cannot form contrastive pairs; merge it backward.
        if batches.len() > 1 && batches.last().unwrap().len() < 2 {
            let tail = batches.pop().unwrap();
            batches.last_mut().unwrap().extend(tail);
        }

        let mut sums = (0.0, 0.0, 0.0, 0.0);
        for batch in &batches {
            let mut tape = Tape::new();
            let xc = tape.constant(x.clone());
            let xprime = model.filter_forward_t(&mut tape, xc);
            let z = model.gnn_forward_t(&mut tape, union.clone(), xprime);
            let idx = Rc::new(batch.clone());
            let zb = tape.gather_rows(z, idx.clone());
            let logits = model.head.forward(&mut tape, &model.store, zb);
            let batch_labels: Vec<u8> = batch.iter().map(|&v| pseudo.hard[v]).collect();
            let l_gnn = cross_entropy_t(&mut tape, logits, &batch_labels);

            let mut total = l_gnn;
            let mut l_ic_val = 0.0;
            let mut l_pc_val = 0.0;
            if config.lambda1 > 0.0 {
                let xb = tape.gather_rows(xprime, idx.clone());
                let l_ic = instance_contrastive_t(
                    &mut tape,
                    xb,
                    &batch_labels,
                    config.tau,
                    config.exclude_self_similarity,
                );
                l_ic_val = tape.scalar(l_ic);
                let weighted = tape.scale(l_ic, config.lambda1);
                total = tape.add(total, weighted);
            }
            if config.lambda2 > 0.0 {
                let mut x_batch = Array2::zeros((batch.len(), d));
                for (i, &v) in batch.iter().enumerate() {
                    x_batch.row_mut(i).assign(&x.row(v));
                }
                match class_prototypes(&x_batch, &batch_labels) {
                    Some(prototypes) => {
                        let xb = tape.gather_rows(xprime, idx.clone());
                        let l_pc = prototype_contrastive_t(
                            &mut tape,
                            xb,
                            &prototypes,
                            &batch_labels,
                            config.tau,
                        );
                        l_pc_val = tape.scalar(l_pc);
                        let weighted = tape.scale(l_pc, config.lambda2);
                        total = tape.add(total, weighted);
                    }
                    None => lpc_skipped += 1,
                }
            }

            let total_val = tape.scalar(total);
            if !total_val.is_finite() {
                return Err(Error::TrainAbort(format!(
                    "filter loss became non-finite at epoch {epoch} (L_IC={l_ic_val}, L_PC={l_pc_val})"
                )));
            }
            let grads = tape.backward(total);
            let pg = tape.param_grads(&grads, model.store.len());
            adam.step(&mut model.store, &pg);

            sums.0 += total_val;
            sums.1 += tape.scalar(l_gnn);
            sums.2 += l_ic_val;
            sums.3 += l_pc_val;
        }
        let nb = batches.len() as f64;
        trace.push(FcfEpochLog {
            l1: sums.0 / nb,
            l_gnn: sums.1 / nb,
            l_ic: sums.2 / nb,
            l_pc: sums.3 / nb,
        });
    }

    let x_prime = model.filter_features(&x)?;
    Ok(FcfTrainOutput { model, x_prime, trace, lpc_skipped_batches: lpc_skipped })
}

/// Ratio of mean inter-class to mean intra-class cosine distance over rows of
/// `x`, grouped by observed labels (unlabeled rows are ignored).
pub fn cosine_separability_ratio(x: &Array2<f64>, labels: &[i8]) -> f64 {
    let d = x.ncols();
    let mut sums = [vec![0.0; d], vec![0.0; d]];
    let mut sq = [0.0f64; 2];
    let mut counts = [0.0f64; 2];
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 && l != 1 {
            continue;
        }
        let c = l as usize;
        let row = x.row(i);
        let norm = (row.iter().map(|v| v * v).sum::<f64>()).sqrt();
        counts[c] += 1.0;
        if norm == 0.0 {
            continue;
        }
        for j in 0..d {
            sums[c][j] += row[j] / norm;
        }
        sq[c] += 1.0;
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let inter_sim = dot(&sums[0], &sums[1]) / (counts[0] * counts[1]);
    let intra_pairs = counts[0] * (counts[0] - 1.0) + counts[1] * (counts[1] - 1.0);
    let intra_sim =
        (dot(&sums[0], &sums[0]) - sq[0] + dot(&sums[1], &sums[1]) - sq[1]) / intra_pairs;
    (1.0 - inter_sim) / (1.0 - intra_sim)
}
