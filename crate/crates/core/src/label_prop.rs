//! Structure-only pseudo-labeling by iterative label propagation.
//!
//! Features are ignored entirely: labels spread over the union graph of all
//! relations through the symmetrically degree-normalized adjacency. Train
//! rows are clamped to their observed labels after convergence, and nodes
//! that never receive mass fall back to the empirical train class
//! frequencies.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graph::{MultiRelationGraph, NUM_CLASSES, SplitMasks};

/// Per-node class distribution and hard label from propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    /// N x 2 class scores, each row summing to 1.
    pub dist: Array2<f64>,
    /// Argmax of `dist`; ties resolve to class 0 (benign).
    pub hard: Vec<u8>,
    /// Whether the node received any propagated mass.
    pub reached: Vec<bool>,
}

/// Convergence diagnostics for a propagation run.
#[derive(Debug, Clone, Copy)]
pub struct PropagationStats {
    pub iterations: usize,
    pub final_delta: f64,
    /// Max-norm fixed-point residual over reached, non-clamped rows.
    pub residual: f64,
}

/// Propagation hyperparameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct LabelPropConfig {
    pub alpha: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for LabelPropConfig {
    fn default() -> Self {
        Self { alpha: 0.9, tol: 1e-6, max_iters: 200 }
    }
}

pub fn propagate_labels(
    graph: &MultiRelationGraph,
    train_mask: &[u32],
    alpha: f64,
    max_iters: usize,
    tol: f64,
) -> Result<PseudoLabels> {
    propagate_labels_detailed(graph, train_mask, alpha, max_iters, tol).map(|(p, _)| p)
}

/// As [`propagate_labels`] but also returns convergence diagnostics.
pub fn propagate_labels_detailed(
    graph: &MultiRelationGraph,
    train_mask: &[u32],
    alpha: f64,
    max_iters: usize,
    tol: f64,
) -> Result<(PseudoLabels, PropagationStats)> {
    if train_mask.is_empty() {
        return Err(Error::InvalidArgument("train_mask is empty".into()));
    }
    if !(0.0..1.0).contains(&alpha) || alpha == 0.0 {
        return Err(Error::InvalidArgument(format!("alpha must be in (0,1), got {alpha}")));
    }
    let n = graph.num_nodes();
    let labels = graph.labels();
    let mut class_count = [0usize; NUM_CLASSES];
    for &v in train_mask {
        let l = labels[v as usize];
        if !(0..=1).contains(&l) {
            return Err(Error::InvalidArgument(format!(
                "train node {v} has no observed label"
            )));
        }
        class_count[l as usize] += 1;
    }
    if class_count.iter().any(|&c| c == 0) {
        return Err(Error::InvalidArgument(
            "train_mask must contain both classes".into(),
        ));
    }

    let union = graph.union_adjacency();
    let inv_sqrt_deg: Vec<f64> = union
        .iter()
        .map(|l| if l.is_empty() { 0.0 } else { 1.0 / (l.len() as f64).sqrt() })
        .collect();

    // Y0: one-hot train labels, zero rows elsewhere.
    let mut y0 = Array2::<f64>::zeros((n, NUM_CLASSES));
    let train_member = SplitMasks::membership(train_mask, n);
    for &v in train_mask {
        y0[[v as usize, labels[v as usize] as usize]] = 1.0;
    }

    // Synchronous iteration F <- alpha * S F + (1 - alpha) * Y0, from F = Y0.
    let propagate_once = |f: &Array2<f64>, out: &mut Array2<f64>| {
        for v in 0..n {
            let mut acc = [0.0; NUM_CLASSES];
            for &u in &union[v] {
                let w = inv_sqrt_deg[v] * inv_sqrt_deg[u as usize];
                for (a, c) in acc.iter_mut().zip(0..NUM_CLASSES) {
                    *a += w * f[[u as usize, c]];
                }
            }
            for c in 0..NUM_CLASSES {
                out[[v, c]] = alpha * acc[c] + (1.0 - alpha) * y0[[v, c]];
            }
        }
    };

    let mut f = y0.clone();
    let mut next = Array2::<f64>::zeros((n, NUM_CLASSES));
    let mut iterations = 0;
    let mut final_delta = f64::INFINITY;
    for _ in 0..max_iters {
        propagate_once(&f, &mut next);
        final_delta = f
            .iter()
            .zip(next.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut f, &mut next);
        iterations += 1;
        if final_delta < tol {
            break;
        }
    }

    // Fixed-point residual on reached, non-clamped rows.
    propagate_once(&f, &mut next);
    let mut residual = 0.0f64;
    for v in 0..n {
        let mass: f64 = (0..NUM_CLASSES).map(|c| f[[v, c]]).sum();
        if train_member[v] || mass <= 0.0 {
            continue;
        }
        for c in 0..NUM_CLASSES {
            residual = residual.max((f[[v, c]] - next[[v, c]]).abs());
        }
    }

    // Finalize: clamp train rows, normalize reached rows, default the rest.
    let train_freq = [
        class_count[0] as f64 / train_mask.len() as f64,
        class_count[1] as f64 / train_mask.len() as f64,
    ];
    let mut dist = Array2::<f64>::zeros((n, NUM_CLASSES));
    let mut reached = vec![false; n];
    for v in 0..n {
        if train_member[v] {
            dist[[v, labels[v] as usize]] = 1.0;
            reached[v] = true;
            continue;
        }
        let mass: f64 = (0..NUM_CLASSES).map(|c| f[[v, c]]).sum();
        if mass > 0.0 {
            for c in 0..NUM_CLASSES {
                dist[[v, c]] = f[[v, c]] / mass;
            }
            reached[v] = true;
        } else {
            dist[[v, 0]] = train_freq[0];
            dist[[v, 1]] = train_freq[1];
        }
    }
    let hard: Vec<u8> = (0..n).map(|v| u8::from(dist[[v, 1]] > dist[[v, 0]])).collect();

    Ok((
        PseudoLabels { dist, hard, reached },
        PropagationStats { iterations, final_delta, residual },
    ))
}

/// Write the `pseudo.csv` cache (`id,p0,p1,hard,reached`).
pub fn write_pseudo_csv(pseudo: &PseudoLabels, path: &Path) -> Result<()> {
    let mut out = String::from("id,p0,p1,hard,reached\n");
    for v in 0..pseudo.hard.len() {
        out.push_str(&format!(
            "{v},{},{},{},{}\n",
            pseudo.dist[[v, 0]],
            pseudo.dist[[v, 1]],
            pseudo.hard[v],
            u8::from(pseudo.reached[v]),
        ));
    }
    fs::write(path, out).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Read a `pseudo.csv` cache written by [`write_pseudo_csv`].
pub fn read_pseudo_csv(path: &Path) -> Result<PseudoLabels> {
    let file = fs::File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let mut rows: Vec<(f64, f64, u8, bool)> = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        let line = line.trim();
        if lineno == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            row: lineno,
            message,
        };
        if fields.len() != 5 {
            return Err(parse_err(format!("expected 5 fields, found {}", fields.len())));
        }
        let id: usize = fields[0].parse().map_err(|_| parse_err("bad id".into()))?;
        if id != rows.len() {
            return Err(parse_err(format!("ids must be consecutive, got {id}")));
        }
        let p0: f64 = fields[1].parse().map_err(|_| parse_err("bad p0".into()))?;
        let p1: f64 = fields[2].parse().map_err(|_| parse_err("bad p1".into()))?;
        let hard: u8 = fields[3].parse().map_err(|_| parse_err("bad hard".into()))?;
        let reached: u8 = fields[4].parse().map_err(|_| parse_err("bad reached".into()))?;
        rows.push((p0, p1, hard, reached != 0));
    }
    let n = rows.len();
    let mut dist = Array2::<f64>::zeros((n, NUM_CLASSES));
    let mut hard = vec![0u8; n];
    let mut reached = vec![false; n];
    for (v, (p0, p1, h, r)) in rows.into_iter().enumerate() {
        dist[[v, 0]] = p0;
        dist[[v, 1]] = p1;
        hard[v] = h;
        reached[v] = r;
    }
    Ok(PseudoLabels { dist, hard, reached })
}
