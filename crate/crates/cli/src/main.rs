//! Command-line surface for the fraud-detection pipeline: dataset prep,
//! synthetic generation, training, evaluation, and embedding export.
//!
//! Exit codes: 0 success, 2 input error, 3 runtime abort (non-finite loss).

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scfcrc_core::checkpoint::{
    load_into_store, read_checkpoint, write_checkpoint, CheckpointKind,
};
use scfcrc_core::fcf::FilterModel;
use scfcrc_core::graph::{generate_synthetic, load_dataset, write_dataset, SyntheticConfig};
use scfcrc_core::label_prop::{propagate_labels, write_pseudo_csv};
use scfcrc_core::lga::{precompute_sequences, LabelVisibility};
use scfcrc_core::pipeline::{
    build_filter_for_config, build_head_for_config, evaluate_split, train, AblationFlags,
    EvalRecord,
};
use scfcrc_core::rcr_moe::MoeHead;
use scfcrc_core::{Error as CoreError, TrainConfig};

#[derive(Parser)]
#[command(
    name = "scfcrc",
    about = "Camouflage-robust fraud detection on multi-relation graphs",
    long_about = "Train and evaluate the two-stage detector: a pseudo-label-supervised \
feature filter followed by a manager-guided mixture-of-experts head over \
label-guided group-aggregated token sequences.\n\nProfiles bake in per-dataset \
defaults: yelpchi (d_h 32, public depth 2, batch 512, masking 0.15), amazon \
(d_h 16, public depth 1, batch 256, masking 0.10), synthetic (desk-scale: d_h 16, \
public depth 1, batch 256, masking 0.15, 30 epochs).",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the pseudo-label and token-sequence caches for a dataset.
    Prep(PrepArgs),
    /// Train the detector and write checkpoints plus a run report.
    Train(TrainArgs),
    /// Evaluate trained checkpoints on a data split.
    Eval(EvalArgs),
    /// Generate a synthetic camouflage dataset directory.
    Synth(SynthArgs),
    /// Export raw or filtered node features as CSV.
    ExportEmbed(ExportArgs),
}

#[derive(Args)]
struct PrepArgs {
    /// Dataset directory (meta.json, nodes.csv, rel_<k>.edges).
    #[arg(long)]
    data: PathBuf,
    /// Neighborhood hop count K.
    #[arg(long, default_value_t = 2)]
    hops: usize,
    /// Output directory for pseudo.csv and sequences.scfcrcsq.
    #[arg(long)]
    out: PathBuf,
    /// Label-propagation damping factor.
    #[arg(long, default_value_t = 0.9)]
    alpha: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file with [data], [fcf], [rcr], [train] sections.
    #[arg(long)]
    config: PathBuf,
    /// Seed overriding the config file (controls splits, init, batching).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for fcf.ckpt, rcr.ckpt, report.json.
    #[arg(long)]
    out: PathBuf,
    /// Ablation to apply: no_fcf, no_rcr, no_ic, no_pc, no_lg, fixed_ag, no_lrm.
    #[arg(long)]
    ablation: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory holding fcf.ckpt and rcr.ckpt.
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Split to evaluate: train, val, or test.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of nodes.
    #[arg(long, default_value_t = 2000)]
    nodes: usize,
    /// Number of relations.
    #[arg(long, default_value_t = 3)]
    relations: usize,
    /// Benign-to-fraud imbalance ratio (IR); fraud share is 1/(1+IR).
    #[arg(long, default_value_t = 6.0)]
    ir: f64,
    /// Comma-separated per-relation same-class edge probabilities.
    #[arg(long, default_value = "0.9,0.3,0.6")]
    homophily: String,
    /// Fraud-mean mixing toward the benign mean, in [0,1].
    #[arg(long, default_value_t = 0.8)]
    camouflage: f64,
    /// Expected edge draws per node per relation.
    #[arg(long, default_value_t = 5.0)]
    mean_degree: f64,
    /// Feature dimension.
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    /// Directory holding fcf.ckpt (needed for --which filtered).
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Which features to export: raw or filtered.
    #[arg(long)]
    which: String,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

/// Errors carrying their process exit code.
enum CliError {
    Input(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::TrainAbort(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

fn env_workers() -> usize {
    std::env::var("SCFCRC_NUM_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&w| w >= 1)
        .unwrap_or(1)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| {
                CliError::Input(format!("cannot create {}: {e}", parent.display()))
            })?;
        }
    }
    std::fs::write(path, bytes)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

fn cmd_prep(args: &PrepArgs) -> Result<(), CliError> {
    let graph = load_dataset(&args.data)?;
    if args.hops == 0 || args.hops > 4 {
        return Err(CliError::Input("--hops must be in 1..=4".into()));
    }
    // Prep has no trained filter yet: sequences use raw features on the
    // filtered slots, and the default stratified split (seed 0) fixes which
    // labels are visible. Training rebuilds both caches from its own config.
    let splits = scfcrc_core::graph::split_nodes(&graph, (0.4, 0.1, 0.5), 0)?;
    let lp = scfcrc_core::label_prop::LabelPropConfig::default();
    let pseudo = propagate_labels(&graph, &splits.train, args.alpha, lp.max_iters, lp.tol)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Input(format!("cannot create {}: {e}", args.out.display())))?;
    write_pseudo_csv(&pseudo, &args.out.join("pseudo.csv"))?;

    let visibility = LabelVisibility::from_ids(&graph, &splits.train);
    let all_ids: Vec<u32> = (0..graph.num_nodes() as u32).collect();
    let cache = precompute_sequences(
        &graph,
        graph.features(),
        graph.features(),
        &visibility,
        &pseudo,
        args.hops,
        &all_ids,
        env_workers(),
    )?;
    cache.write(&args.out.join("sequences.scfcrcsq"))?;
    println!(
        "prep: {} nodes, {} relations, hops {} -> {} tokens/node",
        graph.num_nodes(),
        graph.num_relations(),
        args.hops,
        cache.s
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let file = config::parse_config_file(&args.config).map_err(CliError::Input)?;
    let mut cfg = file.train;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(name) = &args.ablation {
        cfg.ablation = AblationFlags::from_name(name)?;
    }
    if std::env::var("SCFCRC_NUM_WORKERS").is_ok() {
        cfg.workers = env_workers();
    }
    let data_dir = file
        .data_dir
        .ok_or_else(|| CliError::Input("config is missing data_dir under [data]".into()))?;
    let graph = load_dataset(&data_dir)?;

    let out = train(&graph, &cfg)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Input(format!("cannot create {}: {e}", args.out.display())))?;
    let config_echo = serde_json::to_string(&cfg).expect("config serializes");
    write_checkpoint(
        &args.out.join("fcf.ckpt"),
        CheckpointKind::Filter,
        &config_echo,
        &out.filter.store,
    )?;
    write_checkpoint(
        &args.out.join("rcr.ckpt"),
        CheckpointKind::Head,
        &config_echo,
        &out.head.store,
    )?;
    let report_json = serde_json::to_vec_pretty(&out.report).expect("report serializes");
    write_file(&args.out.join("report.json"), &report_json)?;

    println!(
        "AUC={:.4} AP={:.4} F1={:.4}",
        out.report.test.auc, out.report.test.ap, out.report.test.f1_macro
    );
    if let Some(reason) = &out.report.aborted {
        return Err(CliError::Runtime(format!(
            "training aborted ({reason}); best checkpoint retained"
        )));
    }
    Ok(())
}

fn load_models(
    model_dir: &Path,
    graph_dims: (usize, usize),
) -> Result<(FilterModel, MoeHead, TrainConfig), CliError> {
    let (d, r) = graph_dims;
    let fcf_ckpt = read_checkpoint(&model_dir.join("fcf.ckpt"))?;
    let rcr_ckpt = read_checkpoint(&model_dir.join("rcr.ckpt"))?;
    let cfg: TrainConfig = serde_json::from_str(&rcr_ckpt.config_json)
        .map_err(|e| CliError::Input(format!("bad config echo in rcr.ckpt: {e}")))?;
    let mut filter = build_filter_for_config(d, &cfg);
    load_into_store(&fcf_ckpt, &mut filter.store)?;
    let mut head = build_head_for_config(d, r, &cfg)?;
    load_into_store(&rcr_ckpt, &mut head.store)?;
    Ok((filter, head, cfg))
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let graph = load_dataset(&args.data)?;
    let (filter, head, cfg) =
        load_models(&args.model, (graph.feature_dim(), graph.num_relations()))?;
    let record: EvalRecord = evaluate_split(&filter, &head, &graph, &cfg, &args.split)?;

    #[derive(serde::Serialize)]
    struct MetricsFile<'a> {
        split: &'a str,
        auc: f64,
        ap: f64,
        f1_macro: f64,
        per_expert: &'a [scfcrc_core::pipeline::MetricRecord],
    }
    let payload = MetricsFile {
        split: &args.split,
        auc: record.metrics.auc,
        ap: record.metrics.ap,
        f1_macro: record.metrics.f1_macro,
        per_expert: &record.per_expert,
    };
    let json = serde_json::to_vec_pretty(&payload).expect("metrics serialize");
    write_file(&args.model.join("metrics.json"), &json)?;
    println!(
        "AUC={:.4} AP={:.4} F1={:.4}",
        record.metrics.auc, record.metrics.ap, record.metrics.f1_macro
    );
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let homophily: Result<Vec<f64>, _> =
        args.homophily.split(',').map(|v| v.trim().parse::<f64>()).collect();
    let homophily =
        homophily.map_err(|_| CliError::Input(format!("bad --homophily {:?}", args.homophily)))?;
    if args.ir <= 0.0 {
        return Err(CliError::Input("--ir must be positive".into()));
    }
    let config = SyntheticConfig {
        n_nodes: args.nodes,
        n_relations: args.relations,
        fraud_ratio: 1.0 / (1.0 + args.ir),
        homophily,
        camouflage_strength: args.camouflage,
        mean_degree: args.mean_degree,
        feature_dim: args.feature_dim,
        seed: args.seed,
    };
    let graph = generate_synthetic(&config)?;
    write_dataset(&graph, &args.out)?;
    let (benign, fraud) = graph.class_counts();
    println!(
        "synth: {} nodes ({benign} benign / {fraud} fraud), {} relations -> {}",
        graph.num_nodes(),
        graph.num_relations(),
        args.out.display()
    );
    Ok(())
}

fn cmd_export_embed(args: &ExportArgs) -> Result<(), CliError> {
    let graph = load_dataset(&args.data)?;
    let features = match args.which.as_str() {
        "raw" => graph.features().clone(),
        "filtered" => {
            let (filter, _, cfg) =
                load_models(&args.model, (graph.feature_dim(), graph.num_relations()))?;
            if cfg.ablation.no_fcf {
                graph.features().clone()
            } else {
                filter.filter_features(graph.features())?
            }
        }
        other => {
            return Err(CliError::Input(format!(
                "--which must be raw or filtered, got {other:?}"
            )))
        }
    };
    let mut out = String::from("id");
    for j in 0..features.ncols() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for v in 0..features.nrows() {
        out.push_str(&v.to_string());
        for j in 0..features.ncols() {
            out.push_str(&format!(",{}", features[[v, j]]));
        }
        out.push('\n');
    }
    write_file(&args.out, out.as_bytes())?;
    println!("exported {} rows to {}", features.nrows(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Prep(args) => cmd_prep(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Synth(args) => cmd_synth(args),
        Command::ExportEmbed(args) => cmd_export_embed(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
