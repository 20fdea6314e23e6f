//! Label-guided group aggregation: each node's K-hop, R-relation neighborhood
//! plus its raw and filtered self-features become a fixed-length token
//! sequence.
//!
//! Hop-k neighborhoods are walk multisets (endpoints of k-step walks, the
//! center excluded), so a node reachable twice counts twice, matching
//! mean-of-messages semantics. Raw-feature groups split by observed labels,
//! filtered-feature groups by hard pseudo-labels, and the masked group holds
//! raw features of label-free members. Empty groups are zero vectors.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graph::MultiRelationGraph;
use crate::label_prop::PseudoLabels;

/// Group ids carried in token metadata.
pub mod group {
    pub const TGT_RAW: u8 = 0;
    pub const TGT_FILT: u8 = 1;
    pub const NEG: u8 = 2;
    pub const POS: u8 = 3;
    pub const PSEUDO_NEG: u8 = 4;
    pub const PSEUDO_POS: u8 = 5;
    pub const MASKED: u8 = 6;
}

/// Number of distinct group ids.
pub const NUM_GROUPS: usize = 7;

/// Tokens per relation segment for hop count `k` (two target tokens plus
/// five group tokens per hop).
pub fn segment_len(k: usize) -> usize {
    5 * k + 2
}

/// Total sequence length for `r` relations and `k` hops.
pub fn seq_len(r: usize, k: usize) -> usize {
    r * segment_len(k)
}

/// (relation, hop, group) of one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenMeta {
    pub relation: u8,
    pub hop: u8,
    pub group: u8,
}

/// The fixed token layout shared by every node for a given (R, K).
pub fn token_layout(num_relations: usize, hops: usize) -> Vec<TokenMeta> {
    let mut layout = Vec::with_capacity(seq_len(num_relations, hops));
    for r in 0..num_relations as u8 {
        layout.push(TokenMeta { relation: r, hop: 0, group: group::TGT_RAW });
        layout.push(TokenMeta { relation: r, hop: 0, group: group::TGT_FILT });
        for k in 1..=hops as u8 {
            for g in [group::NEG, group::POS, group::PSEUDO_NEG, group::PSEUDO_POS, group::MASKED]
            {
                layout.push(TokenMeta { relation: r, hop: k, group: g });
            }
        }
    }
    layout
}

/// An ordered per-node token sequence. Token values are stored in f32, the
/// cache file's precision, so cache lookups equal fresh builds bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f32>,
    pub meta: Vec<TokenMeta>,
}

/// Which nodes' observed labels may be used for the raw-feature groups.
/// Pseudo-label groups always see every node.
#[derive(Debug, Clone)]
pub struct LabelVisibility {
    visible: Vec<i8>,
}

impl LabelVisibility {
    /// Only nodes in `visible_ids` expose their observed labels; everything
    /// else lands in the masked group. This is the training-label-only view
    /// used everywhere by default, which keeps val/test labels out of every
    /// neighborhood.
    pub fn from_ids(graph: &MultiRelationGraph, visible_ids: &[u32]) -> Self {
        let mut visible = vec![-1i8; graph.num_nodes()];
        for &v in visible_ids {
            visible[v as usize] = graph.labels()[v as usize];
        }
        Self { visible }
    }

    /// Every observed label is exposed (no hygiene), for sensitivity tests.
    pub fn all_observed(graph: &MultiRelationGraph) -> Self {
        Self { visible: graph.labels().to_vec() }
    }

    pub fn label_of(&self, v: usize) -> i8 {
        self.visible[v]
    }
}

/// Multiset of k-step walk endpoints from `v` under relation `r`, as sorted
/// (node, walk count) pairs with `v` itself removed.
fn walk_counts(graph: &MultiRelationGraph, r: usize, v: usize, k: usize) -> Vec<(u32, f64)> {
    let n = graph.num_nodes();
    let mut scratch = vec![0.0f64; n];
    let mut frontier: Vec<(u32, f64)> = vec![(v as u32, 1.0)];
    for _ in 0..k {
        let mut touched: Vec<u32> = Vec::new();
        for &(u, c) in &frontier {
            for &w in graph.neighbors(r, u as usize) {
                if scratch[w as usize] == 0.0 {
                    touched.push(w);
                }
                scratch[w as usize] += c;
            }
        }
        touched.sort_unstable();
        frontier = touched.iter().map(|&w| (w, scratch[w as usize])).collect();
        for &w in &touched {
            scratch[w as usize] = 0.0;
        }
    }
    frontier.retain(|&(u, _)| u as usize != v);
    frontier
}

/// The five group vectors `[h-, h+, h'-, h'+, h*]` for hop `k` of node `v`
/// under relation `r`. Empty groups yield zero vectors.
pub fn group_aggregate_hop(
    graph: &MultiRelationGraph,
    v: usize,
    r: usize,
    k: usize,
    x: &Array2<f64>,
    xprime: &Array2<f64>,
    visibility: &LabelVisibility,
    pseudo: &PseudoLabels,
) -> [Vec<f64>; 5] {
    let d = x.ncols();
    let mut sums = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let mut weights = [0.0f64; 5];
    for (u, c) in walk_counts(graph, r, v, k) {
        let u = u as usize;
        // Raw-feature groups keyed by observed (visible) labels.
        let raw_slot = match visibility.label_of(u) {
            0 => 0,
            1 => 1,
            _ => 4,
        };
        weights[raw_slot] += c;
        for j in 0..d {
            sums[raw_slot][j] += c * x[[u, j]];
        }
        // Filtered-feature groups keyed by hard pseudo-labels.
        let ps_slot = 2 + pseudo.hard[u] as usize;
        weights[ps_slot] += c;
        for j in 0..d {
            sums[ps_slot][j] += c * xprime[[u, j]];
        }
    }
    for slot in 0..5 {
        if weights[slot] > 0.0 {
            let inv = 1.0 / weights[slot];
            for x in &mut sums[slot] {
                *x *= inv;
            }
        }
    }
    sums
}

/// Build the full token sequence of node `v`.
pub fn build_sequence(
    graph: &MultiRelationGraph,
    v: usize,
    x: &Array2<f64>,
    xprime: &Array2<f64>,
    visibility: &LabelVisibility,
    pseudo: &PseudoLabels,
    hops: usize,
) -> TokenSequence {
    assert!(hops >= 1, "hops must be >= 1");
    let d = x.ncols();
    let r_count = graph.num_relations();
    let s = seq_len(r_count, hops);
    let mut tokens = Array2::<f32>::zeros((s, d));
    let meta = token_layout(r_count, hops);

    let mut t = 0;
    for r in 0..r_count {
        for j in 0..d {
            tokens[[t, j]] = x[[v, j]] as f32;
            tokens[[t + 1, j]] = xprime[[v, j]] as f32;
        }
        t += 2;
        for k in 1..=hops {
            let groups = group_aggregate_hop(graph, v, r, k, x, xprime, visibility, pseudo);
            for vec in [&groups[0], &groups[1], &groups[2], &groups[3], &groups[4]] {
                for j in 0..d {
                    tokens[[t, j]] = vec[j] as f32;
                }
                t += 1;
            }
        }
    }
    TokenSequence { tokens, meta }
}

const CACHE_MAGIC: &[u8; 8] = b"SCFCRCSQ";
const CACHE_VERSION: u32 = 1;

/// Precomputed sequences for a node set, in the `SCFCRCSQ` container layout.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceCache {
    pub ids: Vec<u32>,
    pub s: usize,
    pub d: usize,
    pub flags: u32,
    /// Row-major, `ids.len() * s * d` values.
    pub tokens: Vec<f32>,
    /// `ids.len() * s * 3` bytes of (relation, hop, group) triples.
    pub meta: Vec<u8>,
    row_of: Vec<u32>,
}

impl SequenceCache {
    fn build_index(ids: &[u32]) -> Vec<u32> {
        let max = ids.iter().copied().max().map_or(0, |m| m as usize + 1);
        let mut row_of = vec![u32::MAX; max];
        for (row, &id) in ids.iter().enumerate() {
            row_of[id as usize] = row as u32;
        }
        row_of
    }

    pub fn tokens_of(&self, v: u32) -> &[f32] {
        let row = self.row_of[v as usize] as usize;
        &self.tokens[row * self.s * self.d..(row + 1) * self.s * self.d]
    }

    pub fn contains(&self, v: u32) -> bool {
        (v as usize) < self.row_of.len() && self.row_of[v as usize] != u32::MAX
    }

    /// Reassemble the token sequence of node `v`.
    pub fn sequence(&self, v: u32, layout: &[TokenMeta]) -> TokenSequence {
        let flat = self.tokens_of(v);
        let tokens = Array2::from_shape_vec((self.s, self.d), flat.to_vec()).unwrap();
        TokenSequence { tokens, meta: layout.to_vec() }
    }

    /// Serialize: 32-byte header (magic, version, N, S, d, flags, pad), then
    /// N rows of S x d little-endian f32, then the N x S x 3 meta block.
    pub fn write(&self, path: &Path) -> Result<()> {
        let io_err = |source| Error::Io { path: path.to_path_buf(), source };
        if self.ids.iter().enumerate().any(|(i, &id)| id as usize != i) {
            return Err(Error::InvalidArgument(
                "cache files require a contiguous node set starting at 0".into(),
            ));
        }
        let mut out = Vec::with_capacity(32 + self.tokens.len() * 4 + self.meta.len());
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.s as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.extend_from_slice(&self.flags.to_le_bytes());
        out.extend_from_slice(&[0u8; 4]);
        for v in &self.tokens {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.meta);
        let mut file = fs::File::create(path).map_err(io_err)?;
        file.write_all(&out).map_err(io_err)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let io_err = |source| Error::Io { path: path.to_path_buf(), source };
        let mut file = fs::File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io_err)?;
        let parse_err = |message: &str| Error::Parse {
            path: path.to_path_buf(),
            row: 0,
            message: message.into(),
        };
        if bytes.len() < 32 || &bytes[..8] != CACHE_MAGIC {
            return Err(parse_err("bad magic"));
        }
        let u32_at = |off: usize| {
            u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
        };
        if u32_at(8) != CACHE_VERSION {
            return Err(parse_err("unsupported version"));
        }
        let n = u32_at(12) as usize;
        let s = u32_at(16) as usize;
        let d = u32_at(20) as usize;
        let flags = u32_at(24);
        let tok_bytes = n * s * d * 4;
        let meta_bytes = n * s * 3;
        if bytes.len() != 32 + tok_bytes + meta_bytes {
            return Err(parse_err("truncated cache"));
        }
        let tokens: Vec<f32> = bytes[32..32 + tok_bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let meta = bytes[32 + tok_bytes..].to_vec();
        let ids: Vec<u32> = (0..n as u32).collect();
        let row_of = Self::build_index(&ids);
        Ok(Self { ids, s, d, flags, tokens, meta, row_of })
    }
}

/// Build sequences for every node in `node_set`. With `workers > 1` the node
/// set is chunked across threads; assembly order is fixed by `node_set`, so
/// the result is identical for any worker count.
pub fn precompute_sequences(
    graph: &MultiRelationGraph,
    x: &Array2<f64>,
    xprime: &Array2<f64>,
    visibility: &LabelVisibility,
    pseudo: &PseudoLabels,
    hops: usize,
    node_set: &[u32],
    workers: usize,
) -> Result<SequenceCache> {
    if hops == 0 {
        return Err(Error::InvalidArgument("hops must be >= 1".into()));
    }
    let s = seq_len(graph.num_relations(), hops);
    let d = x.ncols();
    let layout = token_layout(graph.num_relations(), hops);
    let meta_row: Vec<u8> = layout
        .iter()
        .flat_map(|m| [m.relation, m.hop, m.group])
        .collect();

    let build_rows = |chunk: &[u32]| -> Vec<f32> {
        let mut rows = Vec::with_capacity(chunk.len() * s * d);
        for &v in chunk {
            let seq = build_sequence(graph, v as usize, x, xprime, visibility, pseudo, hops);
            rows.extend(seq.tokens.iter().copied());
        }
        rows
    };

    let workers = workers.max(1).min(node_set.len().max(1));
    let tokens: Vec<f32> = if workers == 1 {
        build_rows(node_set)
    } else {
        let chunk_size = node_set.len().div_ceil(workers);
        let chunks: Vec<&[u32]> = node_set.chunks(chunk_size).collect();
        let mut parts: Vec<Vec<f32>> = Vec::with_capacity(chunks.len());
        std::thread::scope(|scope| {
            let handles: Vec<_> =
                chunks.iter().map(|chunk| scope.spawn(move || build_rows(chunk))).collect();
            for h in handles {
                parts.push(h.join().expect("sequence worker panicked"));
            }
        });
        parts.concat()
    };

    let mut meta = Vec::with_capacity(node_set.len() * s * 3);
    for _ in node_set {
        meta.extend_from_slice(&meta_row);
    }
    let row_of = SequenceCache::build_index(node_set);
    Ok(SequenceCache { ids: node_set.to_vec(), s, d, flags: 0, tokens, meta, row_of })
}
