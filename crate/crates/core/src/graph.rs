//! Multi-relation graph data model, dataset directory I/O, stratified
//! splitting, and a synthetic camouflage-graph generator.
//!
//! Graphs are undirected, unweighted, and binary-labeled. Edge lists are
//! symmetrized, deduplicated, and stripped of self-loops at construction so
//! every downstream consumer can rely on those invariants.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value used in files for nodes without an observed class.
pub const UNKNOWN_LABEL: i8 = -1;

/// Number of classes; fixed at two (benign = 0, fraud = 1) everywhere.
pub const NUM_CLASSES: usize = 2;

/// An undirected multi-relation graph with node features and partial labels.
#[derive(Debug, Clone)]
pub struct MultiRelationGraph {
    num_nodes: usize,
    /// Per-relation sorted neighbor lists; symmetric, deduplicated, no self-loops.
    adjacency: Vec<Vec<Vec<u32>>>,
    features: Array2<f64>,
    /// Per-node label: 0 benign, 1 fraud, -1 unknown.
    labels: Vec<i8>,
    relation_names: Vec<String>,
}

impl MultiRelationGraph {
    /// Build a graph from raw (possibly directed, duplicated) edge lists.
    pub fn new(
        num_nodes: usize,
        edges_per_relation: Vec<Vec<(u32, u32)>>,
        features: Array2<f64>,
        labels: Vec<i8>,
        relation_names: Vec<String>,
    ) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::Structural("graph must have at least one node".into()));
        }
        if edges_per_relation.is_empty() {
            return Err(Error::Structural("graph must have at least one relation".into()));
        }
        if features.nrows() != num_nodes {
            return Err(Error::Shape(format!(
                "features has {} rows, expected {num_nodes}",
                features.nrows()
            )));
        }
        if let Some((idx, _)) = features.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let row = idx / features.ncols().max(1);
            return Err(Error::Structural(format!(
                "non-finite feature value in row {row}"
            )));
        }
        if labels.len() != num_nodes {
            return Err(Error::Shape(format!(
                "labels has {} entries, expected {num_nodes}",
                labels.len()
            )));
        }
        if labels.iter().any(|&l| !(-1..=1).contains(&l)) {
            return Err(Error::Structural("labels must be in {0, 1, -1}".into()));
        }
        let relation_names = if relation_names.is_empty() {
            (0..edges_per_relation.len()).map(|k| format!("rel_{k}")).collect()
        } else if relation_names.len() == edges_per_relation.len() {
            relation_names
        } else {
            return Err(Error::Shape(format!(
                "{} relation names for {} relations",
                relation_names.len(),
                edges_per_relation.len()
            )));
        };

        let mut adjacency = Vec::with_capacity(edges_per_relation.len());
        for edges in &edges_per_relation {
            let mut neigh = vec![Vec::new(); num_nodes];
            for &(u, v) in edges {
                if u as usize >= num_nodes || v as usize >= num_nodes {
                    return Err(Error::Structural(format!(
                        "edge ({u}, {v}) has endpoint >= {num_nodes}"
                    )));
                }
                if u == v {
                    continue; // self-loops stripped
                }
                neigh[u as usize].push(v);
                neigh[v as usize].push(u);
            }
            for list in &mut neigh {
                list.sort_unstable();
                list.dedup();
            }
            adjacency.push(neigh);
        }

        Ok(Self { num_nodes, adjacency, features, labels, relation_names })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_relations(&self) -> usize {
        self.adjacency.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[i8] {
        &self.labels
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relation_names
    }

    /// Sorted neighbor list of `v` under relation `r`.
    pub fn neighbors(&self, r: usize, v: usize) -> &[u32] {
        &self.adjacency[r][v]
    }

    pub fn degree(&self, r: usize, v: usize) -> usize {
        self.adjacency[r][v].len()
    }

    /// Node ids with an observed label.
    pub fn labeled_ids(&self) -> Vec<u32> {
        (0..self.num_nodes as u32)
            .filter(|&v| self.labels[v as usize] != UNKNOWN_LABEL)
            .collect()
    }

    /// (benign, fraud) counts over labeled nodes.
    pub fn class_counts(&self) -> (usize, usize) {
        let benign = self.labels.iter().filter(|&&l| l == 0).count();
        let fraud = self.labels.iter().filter(|&&l| l == 1).count();
        (benign, fraud)
    }

    /// Neighbor lists of the union graph over all relations (deduplicated).
    pub fn union_adjacency(&self) -> Vec<Vec<u32>> {
        let mut union = vec![Vec::new(); self.num_nodes];
        for rel in &self.adjacency {
            for (v, list) in rel.iter().enumerate() {
                union[v].extend_from_slice(list);
            }
        }
        for list in &mut union {
            list.sort_unstable();
            list.dedup();
        }
        union
    }

    /// Total undirected edge count under relation `r`.
    pub fn edge_count(&self, r: usize) -> usize {
        self.adjacency[r].iter().map(|l| l.len()).sum::<usize>() / 2
    }

    /// Fraction of edges under relation `r` joining same-class nodes.
    /// Edges with an unlabeled endpoint are skipped.
    pub fn measured_homophily(&self, r: usize) -> f64 {
        let mut same = 0usize;
        let mut total = 0usize;
        for (v, list) in self.adjacency[r].iter().enumerate() {
            for &u in list {
                if (u as usize) < v {
                    continue; // count each undirected edge once
                }
                let (lu, lv) = (self.labels[u as usize], self.labels[v]);
                if lu == UNKNOWN_LABEL || lv == UNKNOWN_LABEL {
                    continue;
                }
                total += 1;
                if lu == lv {
                    same += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            same as f64 / total as f64
        }
    }
}

/// Disjoint train/val/test node-id sets over the labeled nodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitMasks {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

impl SplitMasks {
    /// Membership vector over all `n` nodes: 1 where the id is in `ids`.
    pub fn membership(ids: &[u32], n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        for &v in ids {
            m[v as usize] = true;
        }
        m
    }
}

/// Stratified split of the labeled nodes into train/val/test.
///
/// Per class, ids are shuffled by `seed` and allocated by largest-remainder
/// rounding so each split count is within one node of its exact share; every
/// split receives at least one node of each class.
pub fn split_nodes(
    graph: &MultiRelationGraph,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitMasks> {
    let (a, b, c) = ratios;
    if a <= 0.0 || b <= 0.0 || c <= 0.0 {
        return Err(Error::Split("split ratios must be positive".into()));
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!("split ratios must sum to 1, got {}", a + b + c)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits: [Vec<u32>; 3] = [Vec::new(), Vec::new(), Vec::new()];

    for class in 0..2i8 {
        let mut ids: Vec<u32> = (0..graph.num_nodes as u32)
            .filter(|&v| graph.labels[v as usize] == class)
            .collect();
        if ids.len() < 3 {
            return Err(Error::Split(format!(
                "class {class} has {} labeled nodes, fewer than the 3 splits",
                ids.len()
            )));
        }
        ids.shuffle(&mut rng);

        let n = ids.len() as f64;
        let exact = [n * a, n * b, n * c];
        let mut counts: [usize; 3] = [0; 3];
        let mut rema: Vec<(usize, f64)> = Vec::with_capacity(3);
        for s in 0..3 {
            counts[s] = exact[s].floor() as usize;
            rema.push((s, exact[s] - exact[s].floor()));
        }
        let mut left = ids.len() - counts.iter().sum::<usize>();
        rema.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
        for &(s, _) in rema.iter() {
            if left == 0 {
                break;
            }
            counts[s] += 1;
            left -= 1;
        }
        // Every split must see both classes.
        while let Some(zero) = (0..3).find(|&s| counts[s] == 0) {
            let donor = (0..3).max_by_key(|&s| counts[s]).unwrap();
            counts[zero] += 1;
            counts[donor] -= 1;
        }

        let mut offset = 0;
        for s in 0..3 {
            splits[s].extend_from_slice(&ids[offset..offset + counts[s]]);
            offset += counts[s];
        }
    }

    let [mut train, mut val, mut test] = splits;
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitMasks { train, val, test })
}

/// Parameters of the synthetic camouflage-graph generator.
///
/// Each relation plants edges with a controlled same-class probability
/// (homophily) and fraud feature means are mixed toward the benign mean by
/// `camouflage_strength`, exposing the two camouflage axes independently.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_nodes: usize,
    pub n_relations: usize,
    /// Fraction of nodes labeled fraud.
    pub fraud_ratio: f64,
    /// Per-relation probability that a drawn edge joins same-class nodes.
    pub homophily: Vec<f64>,
    /// 0 keeps the fraud mean; 1 moves it onto the benign mean.
    pub camouflage_strength: f64,
    /// Expected number of edge draws per node per relation.
    pub mean_degree: f64,
    pub feature_dim: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes < 4 {
            return Err(Error::Config("n_nodes must be >= 4".into()));
        }
        if self.n_relations == 0 {
            return Err(Error::Config("n_relations must be >= 1".into()));
        }
        if self.homophily.len() != self.n_relations {
            return Err(Error::Config(format!(
                "{} homophily values for {} relations",
                self.homophily.len(),
                self.n_relations
            )));
        }
        if self.homophily.iter().any(|h| !(0.0..=1.0).contains(h)) {
            return Err(Error::Config("homophily values must be in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.camouflage_strength) {
            return Err(Error::Config("camouflage_strength must be in [0,1]".into()));
        }
        if self.fraud_ratio <= 0.0 || self.fraud_ratio >= 1.0 {
            return Err(Error::Config("fraud_ratio must be in (0,1)".into()));
        }
        if self.mean_degree < 1.0 {
            return Err(Error::Config("mean_degree must be >= 1".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be >= 1".into()));
        }
        let n_fraud = (self.n_nodes as f64 * self.fraud_ratio).round() as usize;
        if n_fraud < 2 || self.n_nodes - n_fraud < 2 {
            return Err(Error::Config("each class needs at least 2 nodes".into()));
        }
        Ok(())
    }

    /// Class feature means (benign, fraud) before camouflage mixing.
    ///
    /// Derived from a fixed internal seed so the class geometry depends only
    /// on `feature_dim`; `seed` then controls labels, edges, and noise. The
    /// means are placed at distance 3 from each other.
    pub fn class_means(&self) -> (Array1<f64>, Array1<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5cfc_0001);
        let d = self.feature_dim;
        let mu_b = Array1::from_iter((0..d).map(|_| StandardNormal.sample(&mut rng)));
        let mut diff = Array1::from_iter((0..d).map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        }));
        let norm = diff.mapv(|x| x * x).sum().sqrt();
        diff.mapv_inplace(|x| x / norm * 3.0);
        let mu_f = &mu_b + &diff;
        (mu_b, mu_f)
    }
}

/// Generate a labeled graph per the planted-partition scheme in
/// [`SyntheticConfig`]. Deterministic given the seed.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<MultiRelationGraph> {
    config.validate()?;
    let n = config.n_nodes;
    let d = config.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    // Class assignment: a seeded shuffle so ids carry no class information.
    let n_fraud = (n as f64 * config.fraud_ratio).round() as usize;
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(&mut rng);
    let mut labels = vec![0i8; n];
    for &v in order.iter().take(n_fraud) {
        labels[v as usize] = 1;
    }
    let benign_ids: Vec<u32> = (0..n as u32).filter(|&v| labels[v as usize] == 0).collect();
    let fraud_ids: Vec<u32> = (0..n as u32).filter(|&v| labels[v as usize] == 1).collect();

    // Features: isotropic Gaussians around the (possibly mixed) class means.
    let (mu_b, mu_f_raw) = config.class_means();
    let c = config.camouflage_strength;
    let mu_f = &mu_f_raw * (1.0 - c) + &mu_b * c;
    let mut features = Array2::<f64>::zeros((n, d));
    for v in 0..n {
        let mean = if labels[v] == 1 { &mu_f } else { &mu_b };
        for j in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            features[[v, j]] = mean[j] + z;
        }
    }

    // Edges: every node draws ~Poisson(mean_degree) partners per relation,
    // same-class with the relation's homophily probability.
    let mut edges_per_relation = Vec::with_capacity(config.n_relations);
    let poisson = Poisson::new(config.mean_degree)
        .map_err(|e| Error::Config(format!("invalid mean_degree: {e}")))?;
    for r in 0..config.n_relations {
        let h = config.homophily[r];
        let mut edges = Vec::new();
        for v in 0..n as u32 {
            let count: f64 = poisson.sample(&mut rng);
            for _ in 0..count as usize {
                let same_class = rng.random::<f64>() < h;
                let pool = match (labels[v as usize] == 1) == same_class {
                    true => &fraud_ids,
                    false => &benign_ids,
                };
                if pool.len() < 2 && pool.contains(&v) {
                    continue;
                }
                let mut u = pool[rng.random_range(0..pool.len())];
                while u == v {
                    u = pool[rng.random_range(0..pool.len())];
                }
                edges.push((v, u));
            }
        }
        edges_per_relation.push(edges);
    }

    MultiRelationGraph::new(n, edges_per_relation, features, labels, Vec::new())
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    num_nodes: usize,
    num_relations: usize,
    feature_dim: usize,
    relation_names: Vec<String>,
}

fn open_named(path: &Path) -> Result<fs::File> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::File::open(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Load a graph from the dataset directory layout: `meta.json`, `nodes.csv`
/// (header `id,label,f0..f{d-1}`), and one `rel_<k>.edges` file per relation.
/// Edge lists are deduplicated and symmetrized; self-loops are stripped.
pub fn load_dataset(data_dir: &Path) -> Result<MultiRelationGraph> {
    let meta_path = data_dir.join("meta.json");
    let meta_file = open_named(&meta_path)?;
    let meta: Meta = serde_json::from_reader(BufReader::new(meta_file)).map_err(|e| Error::Parse {
        path: meta_path.clone(),
        row: 0,
        message: e.to_string(),
    })?;
    if meta.num_nodes == 0 || meta.num_relations == 0 || meta.feature_dim == 0 {
        return Err(Error::Parse {
            path: meta_path,
            row: 0,
            message: "num_nodes, num_relations, feature_dim must be positive".into(),
        });
    }

    let nodes_path = data_dir.join("nodes.csv");
    let nodes_file = open_named(&nodes_path)?;
    let mut features = Array2::<f64>::zeros((meta.num_nodes, meta.feature_dim));
    let mut labels = vec![UNKNOWN_LABEL; meta.num_nodes];
    let mut seen = vec![false; meta.num_nodes];
    let parse_err = |row: usize, message: String| Error::Parse {
        path: nodes_path.clone(),
        row,
        message,
    };
    for (lineno, line) in BufReader::new(nodes_file).lines().enumerate() {
        let line = line.map_err(|source| Error::Io { path: nodes_path.clone(), source })?;
        let line = line.trim_end_matches(['\r', '\n']);
        if lineno == 0 {
            if !line.starts_with("id,label") {
                return Err(parse_err(0, "expected header starting with id,label".into()));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 + meta.feature_dim {
            return Err(parse_err(
                lineno,
                format!("expected {} fields, found {}", 2 + meta.feature_dim, fields.len()),
            ));
        }
        let id: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad node id {:?}", fields[0])))?;
        if id >= meta.num_nodes {
            return Err(parse_err(lineno, format!("node id {id} >= num_nodes")));
        }
        if seen[id] {
            return Err(parse_err(lineno, format!("duplicate node id {id}")));
        }
        seen[id] = true;
        let label: i8 = fields[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(lineno, format!("bad label {:?}", fields[1])))?;
        if !(-1..=1).contains(&label) {
            return Err(parse_err(lineno, format!("label {label} not in {{0,1,-1}}")));
        }
        labels[id] = label;
        for (j, raw) in fields[2..].iter().enumerate() {
            let v: f64 = raw
                .trim()
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad feature f{j}: {raw:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(lineno, format!("non-finite feature f{j}")));
            }
            features[[id, j]] = v;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(parse_err(0, format!("node id {missing} missing from nodes.csv")));
    }

    let mut edges_per_relation = Vec::with_capacity(meta.num_relations);
    for k in 0..meta.num_relations {
        let path = data_dir.join(format!("rel_{k}.edges"));
        let file = open_named(&path)?;
        let mut edges = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| Error::Io { path: path.clone(), source })?;
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let mut it = content.split_ascii_whitespace();
            let (u, v) = match (it.next(), it.next()) {
                (Some(u), Some(v)) => (u, v),
                _ => {
                    return Err(Error::Parse {
                        path,
                        row: lineno,
                        message: "expected two integers per edge line".into(),
                    })
                }
            };
            let parse_endpoint = |tok: &str| -> Result<u32> {
                tok.parse().map_err(|_| Error::Parse {
                    path: path.clone(),
                    row: lineno,
                    message: format!("bad endpoint {tok:?}"),
                })
            };
            edges.push((parse_endpoint(u)?, parse_endpoint(v)?));
        }
        edges_per_relation.push(edges);
    }

    MultiRelationGraph::new(
        meta.num_nodes,
        edges_per_relation,
        features,
        labels,
        meta.relation_names,
    )
}

/// Write a graph in the dataset directory layout read by [`load_dataset`].
/// Feature values use the shortest decimal form that parses back bit-exactly.
pub fn write_dataset(graph: &MultiRelationGraph, data_dir: &Path) -> Result<()> {
    fs::create_dir_all(data_dir)
        .map_err(|source| Error::Io { path: data_dir.to_path_buf(), source })?;
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source: std::io::Error| Error::Io { path, source }
    };

    let meta = Meta {
        num_nodes: graph.num_nodes(),
        num_relations: graph.num_relations(),
        feature_dim: graph.feature_dim(),
        relation_names: graph.relation_names().to_vec(),
    };
    let meta_path = data_dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta).unwrap())
        .map_err(io_err(&meta_path))?;

    let nodes_path = data_dir.join("nodes.csv");
    let mut out = String::new();
    out.push_str("id,label");
    for j in 0..graph.feature_dim() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for v in 0..graph.num_nodes() {
        out.push_str(&format!("{v},{}", graph.labels()[v]));
        for j in 0..graph.feature_dim() {
            out.push_str(&format!(",{}", graph.features()[[v, j]]));
        }
        out.push('\n');
    }
    fs::write(&nodes_path, out).map_err(io_err(&nodes_path))?;

    for r in 0..graph.num_relations() {
        let path = data_dir.join(format!("rel_{r}.edges"));
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        let mut w = std::io::BufWriter::new(file);
        for v in 0..graph.num_nodes() {
            for &u in graph.neighbors(r, v) {
                if (v as u32) < u {
                    writeln!(w, "{v} {u}").map_err(io_err(&path))?;
                }
            }
        }
        w.flush().map_err(io_err(&path))?;
    }
    Ok(())
}
