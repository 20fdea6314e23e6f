//! End-to-end orchestration: stage-1 filter training, sequence precomputation,
//! stage-2 training of the expert head with the delta-gated masking loss,
//! checkpoint selection on validation AUC, evaluation, and ablation rewiring.

use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fcf::{train_fcf, FcfConfig, FcfEpochLog, FilterModel};
use crate::graph::{split_nodes, MultiRelationGraph, SplitMasks};
use crate::label_prop::{propagate_labels, LabelPropConfig, PseudoLabels};
use crate::lga::{precompute_sequences, LabelVisibility, SequenceCache};
use crate::metrics::{auc, average_precision, f1_macro, ScoredLabels};
use crate::nn::{Adam, Dropout, ParamStore};
use crate::rcr_moe::{
    detection_loss_t, draw_mask_set, guidance_loss_t, regularized_mask_loss_t,
    structure_prior_matrix, MoeHead, RcrConfig,
};

/// Ablation switches; each rewires exactly one component.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct AblationFlags {
    /// Skip filter training; filtered features become the raw features.
    pub no_fcf: bool,
    /// Single global expert, no manager, plain cross-entropy objective.
    pub no_rcr: bool,
    /// Drop the instance-wise contrastive term (lambda1 = 0).
    pub no_ic: bool,
    /// Drop the prototype-wise contrastive term (lambda2 = 0).
    pub no_pc: bool,
    /// Drop the manager guidance loss (lambda3 = 0).
    pub no_lg: bool,
    /// Replace the structure perceptron with this fixed prior.
    pub fixed_ag: Option<Vec<f64>>,
    /// Drop the regularized masking loss.
    pub no_lrm: bool,
}

impl AblationFlags {
    /// Parse a Table-style ablation name.
    pub fn from_name(name: &str) -> Result<Self> {
        let mut flags = Self::default();
        match name {
            "none" | "full" => {}
            "no_fcf" => flags.no_fcf = true,
            "no_rcr" => flags.no_rcr = true,
            "no_ic" => flags.no_ic = true,
            "no_pc" => flags.no_pc = true,
            "no_lg" => flags.no_lg = true,
            "no_lrm" => flags.no_lrm = true,
            "fixed_ag" => flags.fixed_ag = Some(vec![0.2, 0.2, 0.2, 0.4]),
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation {other:?} (expected no_fcf, no_rcr, no_ic, no_pc, no_lg, fixed_ag, no_lrm)"
                )))
            }
        }
        Ok(flags)
    }
}

/// Full two-stage training configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub fcf: FcfConfig,
    pub lp: LabelPropConfig,
    pub rcr: RcrConfig,
    /// Guidance loss weight.
    pub lambda3: f64,
    /// Masking loss weight.
    pub lambda4: f64,
    /// Epoch-progress threshold that switches the masking loss on.
    pub delta: f64,
    /// Stage-2 epochs.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Neighborhood hop count K.
    pub hops: usize,
    pub split_ratios: (f64, f64, f64),
    /// Sequence-precompute worker threads (result-invariant).
    pub workers: usize,
    pub seed: u64,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::synthetic_profile()
    }
}

impl TrainConfig {
    /// Desk-scale defaults used by the synthetic experiments.
    pub fn synthetic_profile() -> Self {
        Self {
            fcf: FcfConfig::default(),
            lp: LabelPropConfig::default(),
            rcr: RcrConfig {
                d_h: 16,
                n_heads: 4,
                public_depth: 1,
                expert_depth: 1,
                masking_ratio: 0.15,
                ..RcrConfig::default()
            },
            lambda3: 0.1,
            lambda4: 0.3,
            delta: 0.4,
            epochs: 30,
            batch_size: 256,
            learning_rate: 3e-3,
            weight_decay: 1e-4,
            hops: 2,
            split_ratios: (0.4, 0.1, 0.5),
            workers: 1,
            seed: 0,
            ablation: AblationFlags::default(),
        }
    }

    /// Settings for the YelpChi-style layout: width 32, two public layers,
    /// batch 512, masking ratio 0.15.
    pub fn yelpchi_profile() -> Self {
        Self {
            fcf: FcfConfig { batch_size: 512, ..FcfConfig::default() },
            rcr: RcrConfig { d_h: 32, public_depth: 2, masking_ratio: 0.15, ..RcrConfig::default() },
            epochs: 100,
            batch_size: 512,
            ..Self::synthetic_profile()
        }
    }

    /// Settings for the Amazon-style layout: width 16, one public layer,
    /// batch 256, masking ratio 0.1.
    pub fn amazon_profile() -> Self {
        Self {
            fcf: FcfConfig { batch_size: 256, ..FcfConfig::default() },
            rcr: RcrConfig { d_h: 16, public_depth: 1, masking_ratio: 0.1, ..RcrConfig::default() },
            epochs: 100,
            batch_size: 256,
            ..Self::synthetic_profile()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "synthetic" => Ok(Self::synthetic_profile()),
            "yelpchi" => Ok(Self::yelpchi_profile()),
            "amazon" => Ok(Self::amazon_profile()),
            other => Err(Error::Config(format!(
                "unknown profile {other:?} (expected synthetic, yelpchi, amazon)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fcf.validate()?;
        self.rcr.validate()?;
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Config("delta must be in [0,1]".into()));
        }
        if self.lambda3 < 0.0 || self.lambda4 < 0.0 {
            return Err(Error::Config("lambda3 and lambda4 must be nonnegative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.hops == 0 || self.hops > 4 {
            return Err(Error::Config("hops must be in 1..=4".into()));
        }
        Ok(())
    }
}

/// AUC / AP / F1-macro triple.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MetricRecord {
    pub auc: f64,
    pub ap: f64,
    pub f1_macro: f64,
}

/// Per-epoch stage-2 loss components and validation metrics.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Stage2EpochLog {
    pub l2: f64,
    pub l_d: f64,
    pub l_g: f64,
    pub l_rm: f64,
    pub val: MetricRecord,
    /// Mean manager weight per expert over the validation forward.
    pub expert_weights: Vec<f64>,
    pub val_per_expert_auc: Vec<f64>,
}

/// Complete record of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config: TrainConfig,
    pub stage1: Vec<FcfEpochLog>,
    pub stage2: Vec<Stage2EpochLog>,
    pub best_epoch: usize,
    pub test: MetricRecord,
    pub per_expert_test: Vec<MetricRecord>,
    pub lpc_skipped_batches: u64,
    pub aborted: Option<String>,
    pub wall_clock_secs: f64,
}

/// Trained models plus the run report.
pub struct TrainOutput {
    pub filter: FilterModel,
    pub head: MoeHead,
    pub report: RunReport,
    pub splits: SplitMasks,
}

fn gather_batch_tokens(cache: &SequenceCache, ids: &[u32]) -> Array2<f64> {
    let (s, d) = (cache.s, cache.d);
    let mut out = Array2::zeros((ids.len() * s, d));
    for (n, &v) in ids.iter().enumerate() {
        let rows = cache.tokens_of(v);
        for t in 0..s {
            for j in 0..d {
                out[[n * s + t, j]] = f64::from(rows[t * d + j]);
            }
        }
    }
    out
}

fn metric_record(scores: &[f64], labels: &[u8]) -> Result<MetricRecord> {
    let sl = ScoredLabels::new(scores.to_vec(), labels.to_vec())?;
    let predictions: Vec<u8> = scores.iter().map(|&s| u8::from(s > 0.5)).collect();
    Ok(MetricRecord {
        auc: auc(&sl)?,
        ap: average_precision(&sl)?,
        f1_macro: f1_macro(&predictions, labels)?,
    })
}

/// Combined and per-expert metrics over one node split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub metrics: MetricRecord,
    pub per_expert: Vec<MetricRecord>,
    /// Mean manager weight per expert across the split.
    pub mean_expert_weights: Vec<f64>,
}

/// Score `ids` through the head and compute combined plus per-expert
/// metrics. Errors if the split does not contain both classes.
pub fn evaluate_on_cache(
    head: &MoeHead,
    cache: &SequenceCache,
    graph: &MultiRelationGraph,
    ids: &[u32],
    batch_size: usize,
) -> Result<EvalRecord> {
    if ids.is_empty() {
        return Err(Error::Eval("empty evaluation split".into()));
    }
    let labels: Vec<u8> = ids
        .iter()
        .map(|&v| {
            let l = graph.labels()[v as usize];
            if l < 0 {
                return Err(Error::Eval(format!("node {v} has no observed label")));
            }
            Ok(l as u8)
        })
        .collect::<Result<_>>()?;
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(Error::Eval("evaluation split must contain both classes".into()));
    }

    let n_e = head.n_experts();
    let mut combined = Vec::with_capacity(ids.len());
    let mut per_expert: Vec<Vec<f64>> = vec![Vec::with_capacity(ids.len()); n_e];
    let mut weight_sums = vec![0.0f64; n_e];
    for chunk in ids.chunks(batch_size.max(1)) {
        let tokens = gather_batch_tokens(cache, chunk);
        let out = head.infer_batch(&tokens, chunk.len());
        for n in 0..chunk.len() {
            combined.push(out.combined[[n, 1]]);
            for (i, probs) in out.expert_probs.iter().enumerate() {
                per_expert[i].push(probs[[n, 1]]);
                weight_sums[i] += out.a_m[[n, i]] / ids.len() as f64;
            }
        }
    }

    Ok(EvalRecord {
        metrics: metric_record(&combined, &labels)?,
        per_expert: per_expert
            .iter()
            .map(|scores| metric_record(scores, &labels))
            .collect::<Result<_>>()?,
        mean_expert_weights: weight_sums,
    })
}

/// Everything eval needs that is derived from the graph and a trained filter.
pub struct EvalArtifacts {
    pub splits: SplitMasks,
    pub pseudo: PseudoLabels,
    pub x_prime: Array2<f64>,
    pub cache: SequenceCache,
}

/// Recompute pseudo-labels, filtered features, and the sequence cache for a
/// trained filter, using training-label visibility throughout.
pub fn prepare_artifacts(
    filter: &FilterModel,
    graph: &MultiRelationGraph,
    config: &TrainConfig,
) -> Result<EvalArtifacts> {
    let splits = split_nodes(graph, config.split_ratios, config.seed)?;
    let pseudo = propagate_labels(
        graph,
        &splits.train,
        config.lp.alpha,
        config.lp.max_iters,
        config.lp.tol,
    )?;
    let x_prime = if config.ablation.no_fcf {
        graph.features().clone()
    } else {
        filter.filter_features(graph.features())?
    };
    let visibility = LabelVisibility::from_ids(graph, &splits.train);
    let all_ids: Vec<u32> = (0..graph.num_nodes() as u32).collect();
    let cache = precompute_sequences(
        graph,
        graph.features(),
        &x_prime,
        &visibility,
        &pseudo,
        config.hops,
        &all_ids,
        config.workers,
    )?;
    Ok(EvalArtifacts { splits, pseudo, x_prime, cache })
}

/// Evaluate a trained model on the named split (`train`, `val`, or `test`).
pub fn evaluate_split(
    filter: &FilterModel,
    head: &MoeHead,
    graph: &MultiRelationGraph,
    config: &TrainConfig,
    split: &str,
) -> Result<EvalRecord> {
    let artifacts = prepare_artifacts(filter, graph, config)?;
    let ids = match split {
        "train" => &artifacts.splits.train,
        "val" => &artifacts.splits.val,
        "test" => &artifacts.splits.test,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown split {other:?} (expected train, val, test)"
            )))
        }
    };
    evaluate_on_cache(head, &artifacts.cache, graph, ids, config.batch_size)
}

/// Build the filter architecture this config trains (identity when the stage
/// is ablated); checkpoint loading relies on matching this construction.
pub fn build_filter_for_config(feature_dim: usize, config: &TrainConfig) -> FilterModel {
    if config.ablation.no_fcf {
        FilterModel::identity(feature_dim, config.fcf.gnn_layers)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        FilterModel::new(feature_dim, &config.fcf, &mut rng)
    }
}

/// Build the head architecture this config trains.
pub fn build_head_for_config(
    feature_dim: usize,
    num_relations: usize,
    config: &TrainConfig,
) -> Result<MoeHead> {
    let mut rcr_cfg = config.rcr.clone();
    if config.ablation.no_rcr {
        rcr_cfg.n_e = 1;
    }
    MoeHead::new(feature_dim, num_relations, config.hops, &rcr_cfg, config.seed ^ 0x5eed_2222)
}

/// Run the full two-stage training. Deterministic given `config.seed`.
pub fn train(graph: &MultiRelationGraph, config: &TrainConfig) -> Result<TrainOutput> {
    let started = Instant::now();
    config.validate()?;
    let flags = &config.ablation;
    let d = graph.feature_dim();
    let r_count = graph.num_relations();

    let splits = split_nodes(graph, config.split_ratios, config.seed)?;
    let pseudo = propagate_labels(
        graph,
        &splits.train,
        config.lp.alpha,
        config.lp.max_iters,
        config.lp.tol,
    )?;

    // Stage 1: train the filter (or bypass it).
    let mut fcf_cfg = config.fcf.clone();
    fcf_cfg.seed = config.seed;
    if flags.no_ic {
        fcf_cfg.lambda1 = 0.0;
    }
    if flags.no_pc {
        fcf_cfg.lambda2 = 0.0;
    }
    let (filter, x_prime, stage1, lpc_skipped) = if flags.no_fcf {
        (FilterModel::identity(d, fcf_cfg.gnn_layers), graph.features().clone(), Vec::new(), 0)
    } else {
        let out = train_fcf(graph, &pseudo, &fcf_cfg)?;
        (out.model, out.x_prime, out.trace, out.lpc_skipped_batches)
    };

    // Sequences once, training-label visibility everywhere.
    let visibility = LabelVisibility::from_ids(graph, &splits.train);
    let all_ids: Vec<u32> = (0..graph.num_nodes() as u32).collect();
    let cache = precompute_sequences(
        graph,
        graph.features(),
        &x_prime,
        &visibility,
        &pseudo,
        config.hops,
        &all_ids,
        config.workers,
    )?;

    // Stage 2: the expert head.
    let head_seed = config.seed ^ 0x5eed_2222_u64;
    let mut head = build_head_for_config(d, r_count, config)?;
    let n_e = head.n_experts();

    let a_g_matrix: Option<Array2<f64>> = if flags.no_rcr {
        None
    } else if let Some(fixed) = &flags.fixed_ag {
        if fixed.len() != n_e {
            return Err(Error::Config(format!(
                "fixed_ag has {} entries, head has {n_e} experts",
                fixed.len()
            )));
        }
        if fixed.iter().any(|&p| p < 0.0) || (fixed.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("fixed_ag must be a probability vector".into()));
        }
        Some(Array2::from_shape_fn((graph.num_nodes(), n_e), |(_, i)| fixed[i]))
    } else {
        Some(structure_prior_matrix(
            graph,
            graph.features(),
            &x_prime,
            &head.relation_sets,
            config.rcr.beta,
        )?)
    };

    let mut adam = Adam::new(&head.store, config.learning_rate, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(head_seed ^ 0x33);
    let mut stage2: Vec<Stage2EpochLog> = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut aborted = None;

    let train_ids: Vec<u32> = splits.train.clone();
    'epochs: for epoch in 0..config.epochs {
        let progress = epoch as f64 / config.epochs as f64;
        let rm_active = !flags.no_rcr
            && !flags.no_lrm
            && config.lambda4 > 0.0
            && config.rcr.masking_ratio > 0.0
            && progress >= config.delta;

        let mut order = train_ids.clone();
        order.shuffle(&mut rng);
        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut n_batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let b = chunk.len();
            let targets: Vec<u8> = chunk.iter().map(|&v| graph.labels()[v as usize] as u8).collect();
            let tokens = gather_batch_tokens(&cache, chunk);

            let mut tape = Tape::new();
            let tok = tape.constant(tokens);
            let x_in = head.encode_input_t(&mut tape, tok, b);
            let h = {
                let mut dctx = Dropout { p: config.rcr.dropout, rng: &mut rng };
                head.public_encode_t(&mut tape, x_in, Some(&mut dctx))
            };
            let mut expert_logits: Vec<Var> = Vec::with_capacity(n_e);
            let mut expert_probs: Vec<Var> = Vec::with_capacity(n_e);
            for i in 0..n_e {
                let mut dctx = Dropout { p: config.rcr.dropout, rng: &mut rng };
                let (logits, probs) = head.expert_forward_t(&mut tape, i, h, b, Some(&mut dctx));
                expert_logits.push(logits);
                expert_probs.push(probs);
            }

            let (l_d, l_g, l_rm, total) = if flags.no_rcr {
                let ones = tape.constant(Array2::ones((b, 1)));
                let l_d = detection_loss_t(&mut tape, ones, &expert_logits, &targets);
                (l_d, None, None, l_d)
            } else {
                let (m_logits, a_m) = {
                    let mut dctx = Dropout { p: config.rcr.dropout, rng: &mut rng };
                    head.manager_forward_t(&mut tape, h, b, Some(&mut dctx))
                };
                let l_d = detection_loss_t(&mut tape, a_m, &expert_logits, &targets);
                let mut total = l_d;
                let l_g = if !flags.no_lg && config.lambda3 > 0.0 {
                    let a_g = a_g_matrix.as_ref().unwrap();
                    let mut rows = Array2::zeros((b, n_e));
                    for (n, &v) in chunk.iter().enumerate() {
                        for i in 0..n_e {
                            rows[[n, i]] = a_g[[v as usize, i]];
                        }
                    }
                    let l = guidance_loss_t(&mut tape, m_logits, &rows);
                    let w = tape.scale(l, config.lambda3);
                    total = tape.add(total, w);
                    Some(l)
                } else {
                    None
                };
                let l_rm = if rm_active {
                    let mask_set = draw_mask_set(n_e, config.rcr.masking_ratio, &mut rng);
                    let l = regularized_mask_loss_t(&mut tape, a_m, &expert_probs, &mask_set);
                    let w = tape.scale(l, config.lambda4);
                    total = tape.add(total, w);
                    Some(l)
                } else {
                    None
                };
                (l_d, l_g, l_rm, total)
            };

            let total_val = tape.scalar(total);
            if !total_val.is_finite() {
                aborted = Some(format!("stage-2 loss became non-finite at epoch {epoch}"));
                break 'epochs;
            }
            let grads = tape.backward(total);
            let pg = tape.param_grads(&grads, head.store.len());
            adam.step(&mut head.store, &pg);

            sums.0 += total_val;
            sums.1 += tape.scalar(l_d);
            sums.2 += l_g.map_or(0.0, |v| tape.scalar(v));
            sums.3 += l_rm.map_or(0.0, |v| tape.scalar(v));
            n_batches += 1;
        }

        let nb = n_batches as f64;
        let val = evaluate_on_cache(&head, &cache, graph, &splits.val, config.batch_size)?;
        let log = Stage2EpochLog {
            l2: sums.0 / nb,
            l_d: sums.1 / nb,
            l_g: sums.2 / nb,
            l_rm: sums.3 / nb,
            val: val.metrics,
            expert_weights: val.mean_expert_weights.clone(),
            val_per_expert_auc: val.per_expert.iter().map(|m| m.auc).collect(),
        };
        let is_better = best.as_ref().is_none_or(|(b_auc, _, _)| val.metrics.auc > *b_auc);
        if is_better {
            best = Some((val.metrics.auc, epoch, head.store.clone()));
        }
        stage2.push(log);
    }

    let best_epoch = match best {
        Some((_, epoch, store)) => {
            head.store = store;
            epoch
        }
        None => 0,
    };

    let test = evaluate_on_cache(&head, &cache, graph, &splits.test, config.batch_size)?;
    let report = RunReport {
        seed: config.seed,
        config: config.clone(),
        stage1,
        stage2,
        best_epoch,
        test: test.metrics,
        per_expert_test: test.per_expert,
        lpc_skipped_batches: lpc_skipped,
        aborted,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutput { filter, head, report, splits })
}
