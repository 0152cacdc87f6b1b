//! Retrieval back-ends: exact scans over stored embeddings, an NN-descent
//! k-NN graph with best-first search, and full scans that score every item
//! against the query (pairwise model, Euclidean, DTW).
//!
//! Items are addressed by their position in the indexed collection. Every
//! ranking sorts by score descending, ties broken by ascending position.

use std::cmp::Ordering;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{check_header, read_file, write_file, Reader, Writer};
use crate::distance::{dtw_distance, euclidean_distance};
use crate::error::{Error, Result};
use crate::models::{squared_distance, Embedding, Model, ModelKind, EMBED_DIM};
use crate::ts_core::LabeledCollection;

pub const INDEX_MAGIC: &[u8; 4] = b"CTSX";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub position: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub hits: Vec<Hit>,
    pub elapsed_s: f64,
}

impl QueryResult {
    pub fn positions(&self) -> Vec<usize> {
        self.hits.iter().map(|h| h.position).collect()
    }
}

fn rank_order(a: &Hit, b: &Hit) -> Ordering {
    b.score.total_cmp(&a.score).then(a.position.cmp(&b.position))
}

/// Top `k` of `scores` (index = position), best first.
pub fn rank_scores(scores: &[f64], k: usize) -> Vec<Hit> {
    let mut hits: Vec<Hit> = scores
        .iter()
        .enumerate()
        .map(|(position, &score)| Hit { position, score })
        .collect();
    let k = k.min(hits.len());
    if k == 0 {
        return Vec::new();
    }
    if k < hits.len() {
        hits.select_nth_unstable_by(k - 1, rank_order);
        hits.truncate(k);
    }
    hits.sort_unstable_by(rank_order);
    hits
}

fn check_k(k: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::param("k must be >= 1"));
    }
    Ok(())
}

/// Stored embeddings with ids, labels and the hash of the producing checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureIndex {
    ids: Vec<String>,
    labels: Vec<String>,
    embeddings: Vec<f32>,
    checkpoint_hash: String,
    graph: Option<KnnGraph>,
}

impl FeatureIndex {
    pub fn from_parts(ids: Vec<String>, labels: Vec<String>, embeddings: Vec<f32>, checkpoint_hash: impl Into<String>) -> Result<Self> {
        let n = ids.len();
        if labels.len() != n || embeddings.len() != n * EMBED_DIM {
            return Err(Error::dim(format!(
                "{n} ids, {} labels and {} embedding values (expected {})",
                labels.len(),
                embeddings.len(),
                n * EMBED_DIM
            )));
        }
        if let Some(i) = embeddings.iter().position(|v| !v.is_finite()) {
            return Err(Error::param(format!("non-finite embedding value in row {}", i / EMBED_DIM)));
        }
        let mut seen = std::collections::HashSet::with_capacity(n);
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::param(format!("duplicate item id {id:?}")));
            }
        }
        Ok(Self {
            ids,
            labels,
            embeddings,
            checkpoint_hash: checkpoint_hash.into(),
            graph: None,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn embeddings(&self) -> &[f32] {
        &self.embeddings
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * EMBED_DIM..(i + 1) * EMBED_DIM]
    }

    pub fn checkpoint_hash(&self) -> &str {
        &self.checkpoint_hash
    }

    pub fn graph(&self) -> Option<&KnnGraph> {
        self.graph.as_ref()
    }

    pub fn set_graph(&mut self, graph: KnnGraph) -> Result<()> {
        if graph.len() != self.len() {
            return Err(Error::dim(format!(
                "graph has {} nodes, index has {} items",
                graph.len(),
                self.len()
            )));
        }
        self.graph = Some(graph);
        Ok(())
    }

    /// Exact top-`k` for an already computed query embedding.
    pub fn search_exact(&self, q: &Embedding, k: usize) -> Result<Vec<Hit>> {
        check_k(k)?;
        if self.is_empty() {
            return Err(Error::State("index is empty".into()));
        }
        let scores: Vec<f64> = self
            .embeddings
            .chunks_exact(EMBED_DIM)
            .map(|row| -(squared_distance(&q.0, row).sqrt()) as f64)
            .collect();
        Ok(rank_scores(&scores, k))
    }

    /// Embeds `q` once and ranks every item. The elapsed time covers both.
    pub fn query_exact(&self, model: &Model, q: &[f64], k: usize) -> Result<QueryResult> {
        check_k(k)?;
        if self.is_empty() {
            return Err(Error::State("index is empty".into()));
        }
        let t = Instant::now();
        let e = model.embed(q)?;
        let hits = self.search_exact(&e, k)?;
        Ok(QueryResult {
            hits,
            elapsed_s: t.elapsed().as_secs_f64(),
        })
    }

    /// Graph-guided top-`k` for a query embedding; needs an attached graph.
    pub fn query_ann(&self, q: &Embedding, k: usize, n_candidates: usize, seed: u64) -> Result<QueryResult> {
        let graph = self
            .graph
            .as_ref()
            .ok_or_else(|| Error::State("index has no k-NN graph".into()))?;
        nn_descent_query(graph, self, q, k, n_candidates, seed)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(INDEX_MAGIC);
        w.u32(INDEX_VERSION);
        w.u64(self.len() as u64);
        for id in &self.ids {
            w.str(id)?;
        }
        for l in &self.labels {
            w.str(l)?;
        }
        for &v in &self.embeddings {
            w.f32(v);
        }
        match &self.graph {
            None => w.u8(0),
            Some(g) => {
                w.u8(1);
                w.len_u32(g.k)?;
                w.len_u32(g.iterations)?;
                w.f64(g.sample_rate);
                w.f64(g.delta);
                for (&id, &d) in g.ids.iter().zip(&g.dists) {
                    w.u32(id);
                    w.f32(d);
                }
            }
        }
        w.str(&self.checkpoint_hash)?;
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        check_header(&mut r, INDEX_MAGIC, INDEX_VERSION)?;
        let n = usize::try_from(r.u64("item count")?).map_err(|_| Error::format("item count too large"))?;
        // every id takes at least four bytes, so this bounds the allocation
        if n > r.remaining() / 4 {
            return Err(Error::format(format!("truncated file: item count {n} exceeds payload")));
        }
        let ids = (0..n).map(|_| r.str("item id")).collect::<Result<Vec<_>>>()?;
        let labels = (0..n).map(|_| r.str("item label")).collect::<Result<Vec<_>>>()?;
        let embeddings = r.f32s(n * EMBED_DIM, "embedding payload")?;
        let graph = match r.u8("graph flag")? {
            0 => None,
            1 => {
                let k = r.u32("k_graph")? as usize;
                let iterations = r.u32("graph iterations")? as usize;
                let sample_rate = r.f64("sample rate")?;
                let delta = r.f64("delta")?;
                let total = n
                    .checked_mul(k)
                    .filter(|&t| t.saturating_mul(8) <= r.remaining())
                    .ok_or_else(|| Error::format("truncated file: graph section shorter than n * k_graph"))?;
                let mut gids = Vec::with_capacity(total);
                let mut dists = Vec::with_capacity(total);
                for _ in 0..total {
                    gids.push(r.u32("neighbor id")?);
                    dists.push(r.f32("neighbor distance")?);
                }
                let g = KnnGraph {
                    n,
                    k,
                    ids: gids,
                    dists,
                    iterations,
                    sample_rate,
                    delta,
                };
                g.check_invariants().map_err(|e| Error::format(format!("invalid graph section: {e}")))?;
                Some(g)
            }
            f => return Err(Error::format(format!("bad graph flag {f}"))),
        };
        let hash = r.str("checkpoint hash")?;
        r.expect_end()?;
        let mut idx = Self::from_parts(ids, labels, embeddings, hash).map_err(|e| Error::format(e.to_string()))?;
        idx.graph = graph;
        Ok(idx)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

/// Embeds every item once with an embedding model.
pub fn build_exact_index(collection: &LabeledCollection, model: &Model, checkpoint_hash: &str) -> Result<FeatureIndex> {
    if !model.kind().is_embedding() {
        return Err(Error::ModelKind(format!(
            "{} scores pairs and cannot build a feature index",
            model.kind()
        )));
    }
    let series: Vec<&[f64]> = collection.items().iter().map(|s| s.values()).collect();
    let emb = model.embed_batch(&series)?;
    let ids = collection.items().iter().map(|s| s.id().to_string()).collect();
    let labels = (0..collection.len()).map(|i| collection.label(i).to_string()).collect();
    let data = emb.iter().flat_map(|e| e.0).collect();
    FeatureIndex::from_parts(ids, labels, data, checkpoint_hash)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NnDescentParams {
    pub k_graph: usize,
    pub sample_rate: f64,
    pub delta: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for NnDescentParams {
    fn default() -> Self {
        Self {
            k_graph: 20,
            sample_rate: 0.5,
            delta: 0.001,
            max_iters: 10,
            seed: 0,
        }
    }
}

pub const DEFAULT_CANDIDATES: usize = 100;

/// Directed k-NN graph: for every item, `k` (id, Euclidean distance) pairs
/// sorted ascending by distance, then id.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    n: usize,
    k: usize,
    ids: Vec<u32>,
    dists: Vec<f32>,
    iterations: usize,
    sample_rate: f64,
    delta: f64,
}

impl KnnGraph {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn neighbor_ids(&self, i: usize) -> &[u32] {
        &self.ids[i * self.k..(i + 1) * self.k]
    }

    pub fn neighbor_dists(&self, i: usize) -> &[f32] {
        &self.dists[i * self.k..(i + 1) * self.k]
    }

    /// No self-loops or repeats, ids in range, distances finite, nonnegative and sorted.
    pub fn check_invariants(&self) -> Result<()> {
        if self.ids.len() != self.n * self.k || self.dists.len() != self.n * self.k {
            return Err(Error::State("neighbor table size is not n * k".into()));
        }
        for i in 0..self.n {
            let ids = self.neighbor_ids(i);
            let ds = self.neighbor_dists(i);
            for (j, (&id, &d)) in ids.iter().zip(ds).enumerate() {
                if id as usize >= self.n {
                    return Err(Error::State(format!("node {i}: neighbor {id} out of range")));
                }
                if id as usize == i {
                    return Err(Error::State(format!("node {i}: self-loop")));
                }
                if !(d.is_finite() && d >= 0.0) {
                    return Err(Error::State(format!("node {i}: bad distance {d}")));
                }
                if j > 0 && (ds[j - 1], ids[j - 1]) >= (d, id) {
                    return Err(Error::State(format!("node {i}: list not strictly sorted")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Entry {
    id: u32,
    d2: f32,
    is_new: bool,
    born: usize,
}

/// Inserts `(u, d2)` into the sorted list if it improves it. Returns whether
/// the list changed.
fn try_insert(list: &mut Vec<Entry>, k: usize, u: u32, d2: f32, iter: usize) -> bool {
    if list.len() == k {
        let w = list[k - 1];
        if (d2, u) >= (w.d2, w.id) {
            return false;
        }
    }
    if list.iter().any(|e| e.id == u) {
        return false;
    }
    let at = list.partition_point(|e| (e.d2, e.id) < (d2, u));
    list.insert(at, Entry { id: u, d2, is_new: true, born: iter });
    list.truncate(k);
    true
}

fn sample_into(rng: &mut ChaCha8Rng, from: &[u32], cap: usize, out: &mut Vec<u32>) {
    if from.len() <= cap {
        out.extend_from_slice(from);
    } else {
        out.extend(sample(rng, from.len(), cap).iter().map(|i| from[i]));
    }
}

/// NN-descent: random initial lists refined by local joins over sampled
/// neighbors and reverse neighbors. Stops once the fraction of list entries
/// inserted during an iteration is at most `delta`, or after `max_iters`.
pub fn nn_descent_build(index: &FeatureIndex, params: &NnDescentParams) -> Result<KnnGraph> {
    let n = index.len();
    let k = params.k_graph;
    if k == 0 || k >= n {
        return Err(Error::param(format!("k_graph must be in [1, n) with n = {n}, got {k}")));
    }
    if !(params.sample_rate > 0.0 && params.sample_rate <= 1.0) {
        return Err(Error::param(format!("sample_rate must be in (0, 1], got {}", params.sample_rate)));
    }
    if !(params.delta >= 0.0) {
        return Err(Error::param(format!("delta must be >= 0, got {}", params.delta)));
    }
    if n > u32::MAX as usize {
        return Err(Error::param("too many items for a k-NN graph"));
    }
    let dist = |a: usize, b: usize| squared_distance(index.row(a), index.row(b));
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut lists: Vec<Vec<Entry>> = Vec::with_capacity(n);
    for v in 0..n {
        let mut l: Vec<Entry> = sample(&mut rng, n - 1, k)
            .iter()
            .map(|j| {
                let u = if j >= v { j + 1 } else { j };
                Entry {
                    id: u as u32,
                    d2: dist(v, u),
                    is_new: true,
                    born: 0,
                }
            })
            .collect();
        l.sort_by(|a, b| (a.d2, a.id).partial_cmp(&(b.d2, b.id)).expect("finite"));
        lists.push(l);
    }
    let cap = ((params.sample_rate * k as f64).round() as usize).max(1);
    let mut iterations = 0;
    let mut new_c: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut old_c: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut new_r: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut old_r: Vec<Vec<u32>> = vec![Vec::new(); n];
    let mut scratch = Vec::new();
    for it in 1..=params.max_iters {
        for v in 0..n {
            new_c[v].clear();
            old_c[v].clear();
            new_r[v].clear();
            old_r[v].clear();
        }
        for v in 0..n {
            scratch.clear();
            for e in &lists[v] {
                if e.is_new {
                    scratch.push(e.id);
                } else {
                    old_c[v].push(e.id);
                }
            }
            sample_into(&mut rng, &scratch, cap, &mut new_c[v]);
            for e in lists[v].iter_mut() {
                if e.is_new && new_c[v].contains(&e.id) {
                    e.is_new = false;
                }
            }
        }
        for v in 0..n {
            for &u in &old_c[v] {
                old_r[u as usize].push(v as u32);
            }
            for &u in &new_c[v] {
                new_r[u as usize].push(v as u32);
            }
        }
        for v in 0..n {
            scratch.clear();
            sample_into(&mut rng, &new_r[v], cap, &mut scratch);
            for &u in &scratch {
                if !new_c[v].contains(&u) {
                    new_c[v].push(u);
                }
            }
            scratch.clear();
            sample_into(&mut rng, &old_r[v], cap, &mut scratch);
            for &u in &scratch {
                if !old_c[v].contains(&u) && !new_c[v].contains(&u) {
                    old_c[v].push(u);
                }
            }
        }
        for v in 0..n {
            let nc = &new_c[v];
            let oc = &old_c[v];
            for (a, &u1) in nc.iter().enumerate() {
                for &u2 in nc[a + 1..].iter().chain(oc.iter()) {
                    if u1 == u2 {
                        continue;
                    }
                    let d = dist(u1 as usize, u2 as usize);
                    try_insert(&mut lists[u1 as usize], k, u2, d, it);
                    try_insert(&mut lists[u2 as usize], k, u1, d, it);
                }
            }
        }
        iterations = it;
        let inserted = lists.iter().flatten().filter(|e| e.born == it).count();
        if inserted as f64 <= params.delta * (n * k) as f64 {
            break;
        }
    }
    let mut ids = Vec::with_capacity(n * k);
    let mut dists = Vec::with_capacity(n * k);
    let mut row: Vec<(f32, u32)> = Vec::with_capacity(k);
    for l in &lists {
        // distinct squared distances can share a square root
        row.clear();
        row.extend(l.iter().map(|e| (e.d2.sqrt(), e.id)));
        row.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        for &(d, id) in &row {
            ids.push(id);
            dists.push(d);
        }
    }
    let g = KnnGraph {
        n,
        k,
        ids,
        dists,
        iterations,
        sample_rate: params.sample_rate,
        delta: params.delta,
    };
    debug_assert!(g.check_invariants().is_ok());
    Ok(g)
}

/// Best-first search over `graph`. The pool holds the `n_candidates` best
/// items seen so far, seeded with as many random distinct entry points;
/// the best unexpanded pool member is expanded until none remains.
pub fn nn_descent_query(
    graph: &KnnGraph,
    index: &FeatureIndex,
    q: &Embedding,
    k: usize,
    n_candidates: usize,
    seed: u64,
) -> Result<QueryResult> {
    check_k(k)?;
    let n = graph.len();
    if n == 0 || index.is_empty() {
        return Err(Error::State("k-NN graph is empty".into()));
    }
    if n != index.len() {
        return Err(Error::dim(format!("graph has {n} nodes, index has {} items", index.len())));
    }
    if n_candidates < k || n_candidates > n {
        return Err(Error::param(format!(
            "n_candidates must be in [k, n] = [{k}, {n}], got {n_candidates}"
        )));
    }
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut visited = vec![false; n];
    // (d2, id, expanded), sorted ascending by (d2, id)
    let mut pool: Vec<(f32, u32, bool)> = Vec::with_capacity(n_candidates + 1);
    for i in sample(&mut rng, n, n_candidates).iter() {
        visited[i] = true;
        pool.push((squared_distance(&q.0, index.row(i)), i as u32, false));
    }
    pool.sort_by(|a, b| (a.0, a.1).partial_cmp(&(b.0, b.1)).expect("finite"));
    while let Some(p) = pool.iter().position(|e| !e.2) {
        pool[p].2 = true;
        let node = pool[p].1 as usize;
        for &u in graph.neighbor_ids(node) {
            let ui = u as usize;
            if visited[ui] {
                continue;
            }
            visited[ui] = true;
            let d = squared_distance(&q.0, index.row(ui));
            let worst = pool[pool.len() - 1];
            if pool.len() == n_candidates && (d, u) >= (worst.0, worst.1) {
                continue;
            }
            let at = pool.partition_point(|e| (e.0, e.1) < (d, u));
            pool.insert(at, (d, u, false));
            pool.truncate(n_candidates);
        }
    }
    let scores: Vec<Hit> = pool
        .iter()
        .map(|&(d2, id, _)| Hit {
            position: id as usize,
            score: -(d2.sqrt()) as f64,
        })
        .collect();
    let mut hits = scores;
    hits.sort_by(rank_order);
    hits.truncate(k);
    Ok(QueryResult {
        hits,
        elapsed_s: t.elapsed().as_secs_f64(),
    })
}

/// Scores every item as `score(item, q)` with the pairwise model, one trunk
/// evaluation per item.
pub fn query_pairwise_scan(collection: &LabeledCollection, q: &[f64], k: usize, model: &Model) -> Result<QueryResult> {
    check_k(k)?;
    if model.kind() != ModelKind::Rn2d {
        return Err(Error::ModelKind(format!(
            "pairwise scan needs an rn2d model, got {}",
            model.kind()
        )));
    }
    let t = Instant::now();
    let items: Vec<&[f64]> = collection.items().iter().map(|s| s.values()).collect();
    let qs = vec![q; items.len()];
    let scores: Vec<f64> = model.score_pairs(&items, &qs)?.into_iter().map(f64::from).collect();
    Ok(QueryResult {
        hits: rank_scores(&scores, k),
        elapsed_s: t.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Euclidean,
    Dtw,
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ed" => Ok(Baseline::Euclidean),
            "dtw" => Ok(Baseline::Dtw),
            other => Err(Error::param(format!("unknown baseline {other:?}, expected ed or dtw"))),
        }
    }
}

impl Baseline {
    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::Euclidean => "ed",
            Baseline::Dtw => "dtw",
        }
    }
}

/// Ranks every item by the negated distance to `q`.
pub fn query_distance_scan(collection: &LabeledCollection, q: &[f64], k: usize, baseline: Baseline) -> Result<QueryResult> {
    check_k(k)?;
    let t = Instant::now();
    let scores = collection
        .items()
        .iter()
        .map(|s| {
            let d = match baseline {
                Baseline::Euclidean => euclidean_distance(s.values(), q)?,
                Baseline::Dtw => dtw_distance(s.values(), q)?,
            };
            Ok(-d)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(QueryResult {
        hits: rank_scores(&scores, k),
        elapsed_s: t.elapsed().as_secs_f64(),
    })
}

/// Mean wall-clock seconds per call of `f` over `queries` x `repetitions`.
pub fn measure_query_time<Q, F>(queries: &[Q], repetitions: usize, mut f: F) -> Result<f64>
where
    F: FnMut(&Q) -> Result<()>,
{
    if queries.is_empty() || repetitions == 0 {
        return Err(Error::param("need at least one query and one repetition"));
    }
    let t = Instant::now();
    for _ in 0..repetitions {
        for q in queries {
            f(q)?;
        }
    }
    Ok(t.elapsed().as_secs_f64() / (queries.len() * repetitions) as f64)
}
