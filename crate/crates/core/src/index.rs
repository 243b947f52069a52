//! Nearest-neighbor index over rated reference embeddings.
//!
//! Distances are cosine distances `1 - dot(a, b)` between unit vectors.
//! Results are always ordered by `(distance, row)`. Up to
//! [`EXACT_LIMIT`] rows the index is a brute-force scan; above it a
//! hierarchical navigable small-world graph is built and gated on recall
//! against the exact scan.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{check_embedding, InstructionSample, ModelError, QualityLabel};

pub const EXACT_LIMIT: usize = 50_000;
pub const RECALL_GATE: f64 = 0.95;
const MAGIC: &[u8; 8] = b"MXREFIDX";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("reference set is empty")]
    Empty,
    #[error("sample {0} has no embedding")]
    MissingEmbedding(String),
    #[error("sample {0} has no quality label")]
    MissingLabel(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{labels} labels for {rows} embeddings")]
    LengthMismatch { labels: usize, rows: usize },
    #[error("query has dimension {got}, index has {expected}")]
    QueryDimension { expected: usize, got: usize },
    #[error("k = {k} exceeds the {n} indexed rows")]
    KTooLarge { k: usize, n: usize },
    #[error("approximate index recall {recall:.4} below the {RECALL_GATE} gate")]
    RecallBelowGate { recall: f64 },
    #[error("index file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("index file is corrupt: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexMode {
    Exact,
    Approximate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphParams {
    /// Links per node above layer 0; layer 0 keeps twice as many.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams {
            m: 16,
            ef_construction: 128,
            ef_search: 96,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexConfig {
    /// `None` picks exact up to [`EXACT_LIMIT`] rows.
    pub mode: Option<IndexMode>,
    pub graph: GraphParams,
    pub recall_probes: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            mode: None,
            graph: GraphParams::default(),
            recall_probes: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub row: usize,
    pub distance: f64,
}

fn order(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance.total_cmp(&b.distance).then(a.row.cmp(&b.row))
}

#[derive(Debug, Clone, PartialEq)]
struct Graph {
    params: GraphParams,
    entry: u32,
    /// `links[node][layer]`.
    links: Vec<Vec<Vec<u32>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceIndex {
    dim: usize,
    embeddings: Vec<f64>,
    labels: Vec<QualityLabel>,
    mode: IndexMode,
    graph: Option<Graph>,
    content_hash: String,
}

/// Builds an index from rated, embedded samples.
pub fn build_index(samples: &[InstructionSample]) -> Result<ReferenceIndex, IndexError> {
    build_index_with(samples, &IndexConfig::default())
}

pub fn build_index_with(
    samples: &[InstructionSample],
    cfg: &IndexConfig,
) -> Result<ReferenceIndex, IndexError> {
    let mut vectors = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        let e = s
            .embedding
            .as_ref()
            .ok_or_else(|| IndexError::MissingEmbedding(s.id.clone()))?;
        let l = s
            .rating
            .ok_or_else(|| IndexError::MissingLabel(s.id.clone()))?;
        check_embedding(&s.id, e, samples[0].embedding.as_ref().map_or(0, Vec::len))?;
        vectors.push(e.clone());
        labels.push(l);
    }
    ReferenceIndex::from_vectors(vectors, labels, cfg)
}

impl ReferenceIndex {
    pub fn from_vectors(
        vectors: Vec<Vec<f64>>,
        labels: Vec<QualityLabel>,
        cfg: &IndexConfig,
    ) -> Result<Self, IndexError> {
        if vectors.is_empty() {
            return Err(IndexError::Empty);
        }
        if vectors.len() != labels.len() {
            return Err(IndexError::LengthMismatch {
                labels: labels.len(),
                rows: vectors.len(),
            });
        }
        let dim = vectors[0].len();
        let mut embeddings = Vec::with_capacity(dim * vectors.len());
        for (row, v) in vectors.iter().enumerate() {
            check_embedding(&format!("row {row}"), v, dim)?;
            embeddings.extend_from_slice(v);
        }
        let n = vectors.len();
        let mode = cfg.mode.unwrap_or(if n <= EXACT_LIMIT {
            IndexMode::Exact
        } else {
            IndexMode::Approximate
        });
        let mut index = ReferenceIndex {
            dim,
            embeddings,
            labels,
            mode,
            graph: None,
            content_hash: String::new(),
        };
        if mode == IndexMode::Approximate {
            index.graph = Some(build_graph(&index, cfg.graph));
            index.tune_recall(cfg.recall_probes)?;
        }
        index.content_hash = crate::sha256_hex(&index.payload());
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mode(&self) -> IndexMode {
        self.mode
    }

    pub fn labels(&self) -> &[QualityLabel] {
        &self.labels
    }

    pub fn label(&self, row: usize) -> QualityLabel {
        self.labels[row]
    }

    pub fn embedding(&self, row: usize) -> &[f64] {
        &self.embeddings[row * self.dim..(row + 1) * self.dim]
    }

    pub fn content_hash(&self) -> &str {
        &self.content_hash
    }

    pub fn graph_params(&self) -> Option<GraphParams> {
        self.graph.as_ref().map(|g| g.params)
    }

    fn distance(&self, q: &[f64], row: usize) -> f64 {
        1.0 - crate::dot(q, self.embedding(row))
    }

    fn check_query(&self, q: &[f64], k: usize) -> Result<(), IndexError> {
        if q.len() != self.dim {
            return Err(IndexError::QueryDimension {
                expected: self.dim,
                got: q.len(),
            });
        }
        if k > self.len() {
            return Err(IndexError::KTooLarge { k, n: self.len() });
        }
        Ok(())
    }

    /// The `k` nearest rows to `q`.
    pub fn search(&self, q: &[f64], k: usize) -> Result<Vec<Neighbor>, IndexError> {
        self.check_query(q, k)?;
        Ok(match &self.graph {
            Some(g) => self.search_graph(g, q, k, g.params.ef_search.max(k)),
            None => self.search_exact_unchecked(q, k, None),
        })
    }

    /// Brute-force search regardless of mode.
    pub fn search_exact(&self, q: &[f64], k: usize) -> Result<Vec<Neighbor>, IndexError> {
        self.check_query(q, k)?;
        Ok(self.search_exact_unchecked(q, k, None))
    }

    /// Bounded max-heap scan; memory stays `O(k)` per query.
    fn search_exact_unchecked(&self, q: &[f64], k: usize, skip: Option<usize>) -> Vec<Neighbor> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Cand> = BinaryHeap::with_capacity(k + 1);
        for row in (0..self.len()).filter(|r| Some(*r) != skip) {
            let n = Cand(Neighbor {
                row,
                distance: self.distance(q, row),
            });
            if heap.len() < k {
                heap.push(n);
            } else if heap.peek().is_some_and(|worst| n < *worst) {
                heap.pop();
                heap.push(n);
            }
        }
        heap.into_sorted_vec().into_iter().map(|c| c.0).collect()
    }

    /// For every row, its `k` nearest other rows (self excluded by row).
    pub fn self_knn(&self, k: usize) -> Result<Vec<Vec<usize>>, IndexError> {
        if k + 1 > self.len() {
            return Err(IndexError::KTooLarge {
                k: k + 1,
                n: self.len(),
            });
        }
        Ok((0..self.len())
            .into_par_iter()
            .map(|row| {
                let q = self.embedding(row);
                match &self.graph {
                    Some(g) => self
                        .search_graph(g, q, k + 1, g.params.ef_search.max(k + 1))
                        .into_iter()
                        .filter(|n| n.row != row)
                        .take(k)
                        .map(|n| n.row)
                        .collect(),
                    None => self
                        .search_exact_unchecked(q, k, Some(row))
                        .into_iter()
                        .map(|n| n.row)
                        .collect(),
                }
            })
            .collect())
    }

    /// Mean fraction of the exact top-`k` recovered by [`search`](Self::search).
    pub fn recall_at_k(&self, probes: &[Vec<f64>], k: usize) -> Result<f64, IndexError> {
        if probes.is_empty() {
            return Ok(1.0);
        }
        let hits: Result<Vec<f64>, IndexError> = probes
            .par_iter()
            .map(|q| {
                let exact: HashSet<usize> = self
                    .search_exact(q, k)?
                    .into_iter()
                    .map(|n| n.row)
                    .collect();
                let got = self.search(q, k)?;
                Ok(got.iter().filter(|n| exact.contains(&n.row)).count() as f64 / k as f64)
            })
            .collect();
        Ok(hits?.iter().sum::<f64>() / probes.len() as f64)
    }

    /// Probes are normalized midpoints of random row pairs, so they lie
    /// near but not on indexed points.
    pub fn probe_set(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let a = rng.random_range(0..self.len());
                let b = rng.random_range(0..self.len());
                let mut v: Vec<f64> = self
                    .embedding(a)
                    .iter()
                    .zip(self.embedding(b))
                    .map(|(x, y)| 0.7 * x + 0.3 * y)
                    .collect();
                if !crate::normalize_in_place(&mut v) {
                    v = self.embedding(a).to_vec();
                }
                v
            })
            .collect()
    }

    fn tune_recall(&mut self, probes: usize) -> Result<(), IndexError> {
        let k = 10.min(self.len());
        let set = self.probe_set(probes, 0xacc);
        for _ in 0..5 {
            let recall = self.recall_at_k(&set, k)?;
            if recall >= RECALL_GATE {
                return Ok(());
            }
            let g = self.graph.as_mut().expect("approximate mode has a graph");
            g.params.ef_search *= 2;
        }
        let recall = self.recall_at_k(&set, k)?;
        if recall >= RECALL_GATE {
            Ok(())
        } else {
            Err(IndexError::RecallBelowGate { recall })
        }
    }

    fn search_graph(&self, g: &Graph, q: &[f64], k: usize, ef: usize) -> Vec<Neighbor> {
        let mut ep = g.entry as usize;
        let top = g.links[ep].len() - 1;
        for layer in (1..=top).rev() {
            ep = greedy(self, g, q, ep, layer);
        }
        let mut found = search_layer(self, g, q, &[ep], ef, 0);
        found.truncate(k);
        found
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.embeddings.len() * 8 + self.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.push(match self.mode {
            IndexMode::Exact => 0,
            IndexMode::Approximate => 1,
        });
        for x in &self.embeddings {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend(self.labels.iter().map(|l| l.value()));
        if let Some(g) = &self.graph {
            for v in [g.params.m, g.params.ef_construction, g.params.ef_search] {
                out.extend_from_slice(&(v as u64).to_le_bytes());
            }
            out.extend_from_slice(&g.params.seed.to_le_bytes());
            out.extend_from_slice(&g.entry.to_le_bytes());
            for node in &g.links {
                out.extend_from_slice(&(node.len() as u32).to_le_bytes());
                for layer in node {
                    out.extend_from_slice(&(layer.len() as u32).to_le_bytes());
                    for id in layer {
                        out.extend_from_slice(&id.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    /// Writes the payload followed by its raw SHA-256 digest.
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        use sha2::{Digest, Sha256};
        let io = |source| IndexError::Io {
            path: path.display().to_string(),
            source,
        };
        let payload = self.payload();
        let digest = Sha256::digest(&payload);
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        f.write_all(&payload).map_err(io)?;
        f.write_all(&digest).map_err(io)?;
        f.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        use sha2::{Digest, Sha256};
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| IndexError::Io {
                path: path.display().to_string(),
                source,
            })?;
        if bytes.len() < 32 + MAGIC.len() {
            return Err(IndexError::Corrupt("truncated".into()));
        }
        let (payload, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(payload).as_slice() != digest {
            return Err(IndexError::Corrupt("content hash mismatch".into()));
        }
        let index = decode(payload)?;
        Ok(index)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], IndexError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| IndexError::Corrupt("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, IndexError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, IndexError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize, IndexError> {
        usize::try_from(self.u64()?).map_err(|_| IndexError::Corrupt("size overflow".into()))
    }
}

fn decode(payload: &[u8]) -> Result<ReferenceIndex, IndexError> {
    let bad = |m: &str| IndexError::Corrupt(m.to_string());
    let mut c = Cursor {
        buf: payload,
        pos: 0,
    };
    if c.take(8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    if c.u32()? != FORMAT_VERSION {
        return Err(bad("unsupported version"));
    }
    let dim = c.usize()?;
    let n = c.usize()?;
    let mode = match c.take(1)?[0] {
        0 => IndexMode::Exact,
        1 => IndexMode::Approximate,
        _ => return Err(bad("unknown mode")),
    };
    let count = dim.checked_mul(n).ok_or_else(|| bad("size overflow"))?;
    let raw = c.take(count.checked_mul(8).ok_or_else(|| bad("size overflow"))?)?;
    let embeddings: Vec<f64> = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let labels = c
        .take(n)?
        .iter()
        .map(|b| QualityLabel::new(*b as i64).map_err(|e| IndexError::Corrupt(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let graph = match mode {
        IndexMode::Exact => None,
        IndexMode::Approximate => {
            let params = GraphParams {
                m: c.usize()?,
                ef_construction: c.usize()?,
                ef_search: c.usize()?,
                seed: c.u64()?,
            };
            let entry = c.u32()?;
            let mut links = Vec::with_capacity(n);
            for _ in 0..n {
                let layers = c.u32()? as usize;
                let mut node = Vec::with_capacity(layers);
                for _ in 0..layers {
                    let len = c.u32()? as usize;
                    let ids = c.take(len.checked_mul(4).ok_or_else(|| bad("size overflow"))?)?;
                    let ids: Vec<u32> = ids
                        .chunks_exact(4)
                        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                        .collect();
                    if ids.iter().any(|i| *i as usize >= n) {
                        return Err(bad("link out of range"));
                    }
                    node.push(ids);
                }
                if node.is_empty() {
                    return Err(bad("node without layers"));
                }
                links.push(node);
            }
            if entry as usize >= n {
                return Err(bad("entry point out of range"));
            }
            Some(Graph {
                params,
                entry,
                links,
            })
        }
    };
    if c.pos != payload.len() {
        return Err(bad("trailing bytes"));
    }
    let mut index = ReferenceIndex {
        dim,
        embeddings,
        labels,
        mode,
        graph,
        content_hash: String::new(),
    };
    index.content_hash = crate::sha256_hex(payload);
    Ok(index)
}

/// Max-heap entry ordered by `(distance, row)`.
#[derive(Clone, Copy, PartialEq)]
struct Cand(Neighbor);

impl Eq for Cand {}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        order(&self.0, &other.0)
    }
}

fn greedy(idx: &ReferenceIndex, g: &Graph, q: &[f64], mut ep: usize, layer: usize) -> usize {
    let mut best = Neighbor {
        row: ep,
        distance: idx.distance(q, ep),
    };
    loop {
        let mut moved = false;
        for &nb in &g.links[ep][layer] {
            let cand = Neighbor {
                row: nb as usize,
                distance: idx.distance(q, nb as usize),
            };
            if order(&cand, &best) == Ordering::Less {
                best = cand;
                moved = true;
            }
        }
        if !moved {
            return ep;
        }
        ep = best.row;
    }
}

/// Beam search on one layer; result sorted by `(distance, row)`.
fn search_layer(
    idx: &ReferenceIndex,
    g: &Graph,
    q: &[f64],
    entries: &[usize],
    ef: usize,
    layer: usize,
) -> Vec<Neighbor> {
    let mut visited: HashSet<usize> = HashSet::with_capacity(ef * 8);
    let mut frontier: BinaryHeap<Reverse<Cand>> = BinaryHeap::new();
    let mut best: BinaryHeap<Cand> = BinaryHeap::new();
    for &e in entries {
        if visited.insert(e) {
            let n = Neighbor {
                row: e,
                distance: idx.distance(q, e),
            };
            frontier.push(Reverse(Cand(n)));
            best.push(Cand(n));
        }
    }
    while let Some(Reverse(Cand(cur))) = frontier.pop() {
        let worst = best.peek().expect("nonempty").0;
        if best.len() >= ef && order(&cur, &worst) == Ordering::Greater {
            break;
        }
        let Some(adj) = g.links[cur.row].get(layer) else {
            continue;
        };
        for &nb in adj {
            let nb = nb as usize;
            if !visited.insert(nb) {
                continue;
            }
            let n = Neighbor {
                row: nb,
                distance: idx.distance(q, nb),
            };
            let worst = best.peek().expect("nonempty").0;
            if best.len() < ef || order(&n, &worst) == Ordering::Less {
                frontier.push(Reverse(Cand(n)));
                best.push(Cand(n));
                if best.len() > ef {
                    best.pop();
                }
            }
        }
    }
    let mut out: Vec<Neighbor> = best.into_iter().map(|c| c.0).collect();
    out.sort_by(order);
    out
}

/// Diversity-preserving neighbor selection: keep a candidate only if it is
/// closer to the base than to every already-kept neighbor, then top up with
/// the nearest pruned candidates.
fn select_neighbors(idx: &ReferenceIndex, cands: &[Neighbor], m: usize) -> Vec<u32> {
    let mut kept: Vec<Neighbor> = Vec::with_capacity(m);
    let mut pruned = Vec::new();
    for c in cands {
        if kept.len() >= m {
            break;
        }
        let diverse = kept
            .iter()
            .all(|k| 1.0 - crate::dot(idx.embedding(c.row), idx.embedding(k.row)) > c.distance);
        if diverse {
            kept.push(*c);
        } else {
            pruned.push(*c);
        }
    }
    for p in pruned {
        if kept.len() >= m {
            break;
        }
        kept.push(p);
    }
    kept.iter().map(|n| n.row as u32).collect()
}

fn build_graph(idx: &ReferenceIndex, params: GraphParams) -> Graph {
    let n = idx.len();
    let ml = 1.0 / (params.m.max(2) as f64).ln();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let levels: Vec<usize> = (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            ((-u.ln() * ml).floor() as usize).min(16)
        })
        .collect();
    let mut g = Graph {
        params,
        entry: 0,
        links: levels.iter().map(|l| vec![Vec::new(); l + 1]).collect(),
    };
    let cap = |layer: usize| if layer == 0 { 2 * params.m } else { params.m };

    for node in 1..n {
        let q = idx.embedding(node).to_vec();
        let level = levels[node];
        let top = g.links[g.entry as usize].len() - 1;
        let mut ep = g.entry as usize;
        for layer in (level + 1..=top).rev() {
            ep = greedy(idx, &g, &q, ep, layer);
        }
        let mut entries = vec![ep];
        for layer in (0..=level.min(top)).rev() {
            let found = search_layer(idx, &g, &q, &entries, params.ef_construction, layer);
            let chosen = select_neighbors(idx, &found, params.m);
            for &nb in &chosen {
                let nbu = nb as usize;
                g.links[nbu][layer].push(node as u32);
                if g.links[nbu][layer].len() > cap(layer) {
                    let base = idx.embedding(nbu);
                    let mut cands: Vec<Neighbor> = g.links[nbu][layer]
                        .iter()
                        .map(|&r| Neighbor {
                            row: r as usize,
                            distance: 1.0 - crate::dot(base, idx.embedding(r as usize)),
                        })
                        .collect();
                    cands.sort_by(order);
                    g.links[nbu][layer] = select_neighbors(idx, &cands, cap(layer));
                }
            }
            g.links[node][layer] = chosen;
            entries = found.iter().map(|n| n.row).collect();
        }
        if level > top {
            g.entry = node as u32;
        }
    }
    g
}

/// Deterministic k-NN graph over the index itself, for consensus statistics.
pub fn knn_graph(index: &ReferenceIndex, k: usize) -> Result<Vec<Vec<usize>>, IndexError> {
    index.self_knn(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(v: i64) -> QualityLabel {
        QualityLabel::new(v).unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        crate::normalize_in_place(&mut v);
        v
    }

    fn orthogonal() -> ReferenceIndex {
        let rows = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        ReferenceIndex::from_vectors(
            rows,
            vec![label(1), label(2), label(3)],
            &IndexConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn self_retrieval() {
        let idx = orthogonal();
        let got = idx.search(&[1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(got[0].row, 0);
        assert_eq!(got[0].distance, 0.0);
    }

    #[test]
    fn ties_break_by_row() {
        let idx = orthogonal();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let got = idx.search(&[0.0, h, h], 3).unwrap();
        assert_eq!(got.iter().map(|n| n.row).collect::<Vec<_>>(), vec![1, 2, 0]);
        assert_eq!(got[0].distance, got[1].distance);
    }

    #[test]
    fn build_errors() {
        let mut s = InstructionSample::new("a", "i", "o", crate::TaskType::Qa);
        s.embedding = Some(vec![1.0, 0.0]);
        assert!(
            matches!(build_index(&[s.clone()]), Err(IndexError::MissingLabel(id)) if id == "a")
        );
        s.rating = Some(label(3));
        let mut t = s.clone();
        t.id = "b".into();
        t.embedding = Some(vec![1.0, 0.0, 0.0]);
        assert!(matches!(
            build_index(&[s.clone(), t]),
            Err(IndexError::Model(ModelError::DimensionMismatch { .. }))
        ));
        assert!(matches!(build_index(&[]), Err(IndexError::Empty)));
        let idx = build_index(&[s]).unwrap();
        assert!(matches!(
            idx.search(&[1.0, 0.0], 2),
            Err(IndexError::KTooLarge { .. })
        ));
    }

    #[test]
    fn self_knn_excludes_self_even_with_duplicates() {
        let rows = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let idx =
            ReferenceIndex::from_vectors(rows, vec![label(0); 3], &IndexConfig::default()).unwrap();
        let g = idx.self_knn(2).unwrap();
        assert_eq!(g, vec![vec![1, 2], vec![0, 2], vec![0, 1]]);
    }

    #[test]
    fn exact_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..300).map(|_| random_unit(&mut rng, 8)).collect();
        let idx = ReferenceIndex::from_vectors(
            rows.clone(),
            vec![label(2); 300],
            &IndexConfig::default(),
        )
        .unwrap();
        for _ in 0..20 {
            let q = random_unit(&mut rng, 8);
            let mut oracle: Vec<(f64, usize)> = rows
                .iter()
                .enumerate()
                .map(|(i, r)| (1.0 - r.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>(), i))
                .collect();
            oracle.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let got = idx.search(&q, 7).unwrap();
            let want: Vec<usize> = oracle.iter().take(7).map(|x| x.1).collect();
            assert_eq!(got.iter().map(|n| n.row).collect::<Vec<_>>(), want);
        }
    }

    #[test]
    fn approximate_mode_meets_recall_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..4000).map(|_| random_unit(&mut rng, 16)).collect();
        let cfg = IndexConfig {
            mode: Some(IndexMode::Approximate),
            ..IndexConfig::default()
        };
        let idx = ReferenceIndex::from_vectors(rows, vec![label(4); 4000], &cfg).unwrap();
        let probes: Vec<Vec<f64>> = (0..200).map(|_| random_unit(&mut rng, 16)).collect();
        let recall = idx.recall_at_k(&probes, 10).unwrap();
        assert!(recall >= RECALL_GATE, "recall {recall}");
    }

    #[test]
    fn save_load_round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..400).map(|_| random_unit(&mut rng, 6)).collect();
        let labels: Vec<QualityLabel> = (0..400).map(|i| label(i % 6)).collect();
        for mode in [IndexMode::Exact, IndexMode::Approximate] {
            let cfg = IndexConfig {
                mode: Some(mode),
                ..IndexConfig::default()
            };
            let idx = ReferenceIndex::from_vectors(rows.clone(), labels.clone(), &cfg).unwrap();
            let path = dir.path().join("idx.bin");
            idx.save(&path).unwrap();
            let back = ReferenceIndex::load(&path).unwrap();
            assert_eq!(back, idx);
            let mut bytes = std::fs::read(&path).unwrap();
            bytes[40] ^= 1;
            std::fs::write(&path, &bytes).unwrap();
            assert!(matches!(
                ReferenceIndex::load(&path),
                Err(IndexError::Corrupt(_))
            ));
        }
    }
}
