//! `key = value` config files with `[data]`, `[fcf]`, `[rcr]`, and `[train]`
//! sections mirroring the training configuration. Unknown sections or keys
//! are errors. A `profile` key under `[train]` selects the base defaults
//! (synthetic, yelpchi, amazon) before the remaining keys are applied.

use std::path::{Path, PathBuf};

use scfcrc_core::pipeline::AblationFlags;
use scfcrc_core::TrainConfig;

#[derive(Debug)]
pub struct FileConfig {
    pub data_dir: Option<PathBuf>,
    pub train: TrainConfig,
}

pub fn parse_config_file(path: &Path) -> Result<FileConfig, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    parse_config_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn strip_comment(line: &str) -> &str {
    match line.find(['#', ';']) {
        Some(idx) => &line[..idx],
        None => line,
    }
}

fn entries(text: &str) -> Result<Vec<(String, String, String, usize)>, String> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('[') {
            if !line.ends_with(']') {
                return Err(format!("line {}: unterminated section header", lineno + 1));
            }
            section = line[1..line.len() - 1].trim().to_string();
            if !matches!(section.as_str(), "data" | "fcf" | "rcr" | "train") {
                return Err(format!("line {}: unknown section [{section}]", lineno + 1));
            }
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("line {}: expected key = value", lineno + 1));
        };
        if section.is_empty() {
            return Err(format!("line {}: key outside any section", lineno + 1));
        }
        out.push((section.clone(), key.trim().to_string(), value.trim().to_string(), lineno + 1));
    }
    Ok(out)
}

fn parse_as<T: std::str::FromStr>(value: &str, key: &str, line: usize) -> Result<T, String> {
    value.parse::<T>().map_err(|_| format!("line {line}: bad value for {key}: {value:?}"))
}

fn parse_list(value: &str, key: &str, line: usize) -> Result<Vec<f64>, String> {
    value
        .split(',')
        .map(|v| parse_as::<f64>(v.trim(), key, line))
        .collect()
}

pub fn parse_config_str(text: &str) -> Result<FileConfig, String> {
    let entries = entries(text)?;

    // The profile (if any) picks the base defaults.
    let mut train = TrainConfig::synthetic_profile();
    for (section, key, value, line) in &entries {
        if section == "train" && key == "profile" {
            train = TrainConfig::profile(value)
                .map_err(|e| format!("line {line}: {e}"))?;
        }
    }

    let mut data_dir = None;
    for (section, key, value, line) in entries {
        let line = line;
        match (section.as_str(), key.as_str()) {
            ("data", "data_dir") => data_dir = Some(PathBuf::from(value)),
            ("fcf", "tau") => train.fcf.tau = parse_as(&value, &key, line)?,
            ("fcf", "lambda1") => train.fcf.lambda1 = parse_as(&value, &key, line)?,
            ("fcf", "lambda2") => train.fcf.lambda2 = parse_as(&value, &key, line)?,
            ("fcf", "gnn_layers") => train.fcf.gnn_layers = parse_as(&value, &key, line)?,
            ("fcf", "hidden") => {
                train.fcf.hidden = value
                    .split(',')
                    .map(|v| parse_as::<usize>(v.trim(), &key, line))
                    .collect::<Result<_, _>>()?;
            }
            ("fcf", "epochs") => train.fcf.epochs = parse_as(&value, &key, line)?,
            ("fcf", "batch_size") => train.fcf.batch_size = parse_as(&value, &key, line)?,
            ("fcf", "learning_rate") => train.fcf.learning_rate = parse_as(&value, &key, line)?,
            ("fcf", "weight_decay") => train.fcf.weight_decay = parse_as(&value, &key, line)?,
            ("fcf", "exclude_self_similarity") => {
                train.fcf.exclude_self_similarity = parse_as(&value, &key, line)?;
            }
            ("fcf", "seed") => train.fcf.seed = parse_as(&value, &key, line)?,
            ("rcr", "n_e") => train.rcr.n_e = parse_as(&value, &key, line)?,
            ("rcr", "d_h") => train.rcr.d_h = parse_as(&value, &key, line)?,
            ("rcr", "n_heads") => train.rcr.n_heads = parse_as(&value, &key, line)?,
            ("rcr", "public_depth") => train.rcr.public_depth = parse_as(&value, &key, line)?,
            ("rcr", "expert_depth") => train.rcr.expert_depth = parse_as(&value, &key, line)?,
            ("rcr", "ff_mult") => train.rcr.ff_mult = parse_as(&value, &key, line)?,
            ("rcr", "dropout") => train.rcr.dropout = parse_as(&value, &key, line)?,
            ("rcr", "beta") => train.rcr.beta = parse_as(&value, &key, line)?,
            ("rcr", "masking_ratio") => train.rcr.masking_ratio = parse_as(&value, &key, line)?,
            ("train", "profile") => {} // applied above
            ("train", "lambda3") => train.lambda3 = parse_as(&value, &key, line)?,
            ("train", "lambda4") => train.lambda4 = parse_as(&value, &key, line)?,
            ("train", "delta") => train.delta = parse_as(&value, &key, line)?,
            ("train", "epochs") => train.epochs = parse_as(&value, &key, line)?,
            ("train", "batch_size") => train.batch_size = parse_as(&value, &key, line)?,
            ("train", "learning_rate") => train.learning_rate = parse_as(&value, &key, line)?,
            ("train", "weight_decay") => train.weight_decay = parse_as(&value, &key, line)?,
            ("train", "hops") => train.hops = parse_as(&value, &key, line)?,
            ("train", "split_ratios") => {
                let list = parse_list(&value, &key, line)?;
                if list.len() != 3 {
                    return Err(format!("line {line}: split_ratios needs 3 values"));
                }
                train.split_ratios = (list[0], list[1], list[2]);
            }
            ("train", "workers") => train.workers = parse_as(&value, &key, line)?,
            ("train", "seed") => train.seed = parse_as(&value, &key, line)?,
            ("train", "alpha") => train.lp.alpha = parse_as(&value, &key, line)?,
            ("train", "lp_tol") => train.lp.tol = parse_as(&value, &key, line)?,
            ("train", "lp_max_iters") => train.lp.max_iters = parse_as(&value, &key, line)?,
            ("train", "ablation") => {
                train.ablation = AblationFlags::from_name(&value)
                    .map_err(|e| format!("line {line}: {e}"))?;
            }
            ("train", "fixed_ag") => {
                train.ablation.fixed_ag = Some(parse_list(&value, &key, line)?);
            }
            (section, key) => {
                return Err(format!("line {line}: unknown key {key:?} in section [{section}]"));
            }
        }
    }
    Ok(FileConfig { data_dir, train })
}
