//! Inner-product vector index: exact scan plus an HNSW graph, with a binary
//! file format.

use std::cell::RefCell;
use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap, VecDeque};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Result, UaeError};
use crate::jsonl;

const MAGIC: &[u8; 7] = b"UAEIDX1";
pub const INDEX_VERSION: u16 = 1;
const METRIC_INNER_PRODUCT: u8 = 0;
const UNIT_TOLERANCE: f64 = 1e-6;

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HnswParams {
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams {
            m: 16,
            ef_construction: 200,
            ef_search: 64,
            seed: 0,
        }
    }
}

impl HnswParams {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 || self.ef_construction == 0 || self.ef_search == 0 {
            return Err(UaeError::Config(
                "HNSW needs m >= 2 and positive ef_construction / ef_search".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hnsw {
    params: HnswParams,
    levels: Vec<u8>,
    /// `layers[l][node]`; empty for nodes whose level is below `l`.
    layers: Vec<Vec<Vec<u32>>>,
    entry: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    dim: usize,
    doc_ids: Vec<String>,
    data: Vec<f32>,
    hnsw: Option<Hnsw>,
}

/// Similarity paired with a node id; ordered by similarity, then by lower id.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Scored(f32, u32);

impl Eq for Scored {}
impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0).then(other.1.cmp(&self.1))
    }
}

thread_local! {
    static VISITED: RefCell<(Vec<u32>, u32)> = const { RefCell::new((Vec::new(), 0)) };
}

/// Runs `f` with a visited-set closure backed by a generation-stamped array.
fn with_visited<R>(n: usize, f: impl FnOnce(&mut dyn FnMut(u32) -> bool) -> R) -> R {
    VISITED.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (marks, gen) = &mut *guard;
        if marks.len() < n {
            marks.resize(n, 0);
        }
        *gen = gen.wrapping_add(1);
        if *gen == 0 {
            marks.iter_mut().for_each(|m| *m = 0);
            *gen = 1;
        }
        let g = *gen;
        let mut visit = |v: u32| {
            let m = &mut marks[v as usize];
            if *m == g {
                false
            } else {
                *m = g;
                true
            }
        };
        f(&mut visit)
    })
}

impl VectorIndex {
    /// Exact index over `(doc_id, unit vector)` pairs, in input order.
    pub fn build_exact(items: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let Some(first) = items.first() else {
            return Err(UaeError::Index("no vectors to index".into()));
        };
        let dim = first.1.len();
        if dim == 0 {
            return Err(UaeError::Index("zero-dimensional vectors".into()));
        }
        let mut seen = BTreeSet::new();
        let mut doc_ids = Vec::with_capacity(items.len());
        let mut data = Vec::with_capacity(items.len() * dim);
        for (id, v) in items {
            if v.len() != dim {
                return Err(UaeError::Index(format!("{id:?} has dim {}, expected {dim}", v.len())));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !((norm - 1.0).abs() <= UNIT_TOLERANCE) {
                return Err(UaeError::Index(format!("{id:?} is not unit-norm (norm {norm})")));
            }
            if !seen.insert(id.clone()) {
                return Err(UaeError::DuplicateId(id));
            }
            data.extend(v.iter().map(|&x| x as f32));
            doc_ids.push(id);
        }
        Ok(VectorIndex {
            dim,
            doc_ids,
            data,
            hnsw: None,
        })
    }

    /// Exact index plus an HNSW graph over the same rows.
    pub fn build_hnsw(items: Vec<(String, Vec<f64>)>, params: HnswParams) -> Result<Self> {
        params.validate()?;
        let mut idx = Self::build_exact(items)?;
        idx.hnsw = Some(Hnsw::build(&idx, params));
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }
    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }
    pub fn hnsw(&self) -> Option<&Hnsw> {
        self.hnsw.as_ref()
    }

    pub fn set_ef_search(&mut self, ef: usize) {
        if let Some(h) = &mut self.hnsw {
            h.params.ef_search = ef.max(1);
        }
    }

    #[inline]
    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn check_query(&self, q: &[f64], k: usize) -> Result<Vec<f32>> {
        if self.doc_ids.is_empty() {
            return Err(UaeError::Index("search on an empty index".into()));
        }
        if k == 0 {
            return Err(UaeError::Config("k must be at least 1".into()));
        }
        if q.len() != self.dim {
            return Err(UaeError::Index(format!("query dim {} != index dim {}", q.len(), self.dim)));
        }
        Ok(q.iter().map(|&x| x as f32).collect())
    }

    fn finish(&self, mut hits: Vec<Scored>, k: usize) -> Vec<(String, f64)> {
        hits.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| self.doc_ids[a.1 as usize].cmp(&self.doc_ids[b.1 as usize]))
        });
        hits.truncate(k);
        hits.into_iter()
            .map(|s| (self.doc_ids[s.1 as usize].clone(), s.0 as f64))
            .collect()
    }

    /// True top-k by inner product, ties by ascending doc_id. Scores are
    /// accumulated in 64-bit against the stored rows.
    pub fn search_exact(&self, q: &[f64], k: usize) -> Result<Vec<(String, f64)>> {
        self.check_query(q, k)?;
        let mut hits: Vec<(f64, usize)> = (0..self.len())
            .map(|i| (self.row(i).iter().zip(q).map(|(&r, &x)| f64::from(r) * x).sum(), i))
            .collect();
        hits.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| self.doc_ids[a.1].cmp(&self.doc_ids[b.1])));
        hits.truncate(k);
        Ok(hits.into_iter().map(|(s, i)| (self.doc_ids[i].clone(), s)).collect())
    }

    /// HNSW search when a graph is present, exact search otherwise.
    pub fn search(&self, q: &[f64], k: usize) -> Result<Vec<(String, f64)>> {
        let Some(h) = &self.hnsw else {
            return self.search_exact(q, k);
        };
        let qf = self.check_query(q, k)?;
        let hits = h.search(self, &qf, k);
        Ok(self.finish(hits, k))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u16(INDEX_VERSION);
        w.u32(self.dim as u32);
        w.u64(self.doc_ids.len() as u64);
        w.u8(METRIC_INNER_PRODUCT);
        for id in &self.doc_ids {
            w.str(id);
        }
        for &x in &self.data {
            w.f32(x);
        }
        match &self.hnsw {
            None => w.u8(0),
            Some(h) => {
                w.u8(1);
                w.u32(h.params.m as u32);
                w.u32(h.params.ef_construction as u32);
                w.u32(h.params.ef_search as u32);
                w.u64(h.params.seed);
                w.u32(h.entry);
                w.u8((h.layers.len() - 1) as u8);
                w.bytes(&h.levels);
                for (l, layer) in h.layers.iter().enumerate() {
                    for (node, adj) in layer.iter().enumerate() {
                        if h.levels[node] as usize >= l {
                            w.u32(adj.len() as u32);
                            for &n in adj {
                                w.u32(n);
                            }
                        }
                    }
                }
            }
        }
        w.buf
    }

    /// Parses a whole index file; nothing is returned unless every section
    /// is present and consistent.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, UaeError::Index);
        if r.take(MAGIC.len())? != MAGIC {
            return Err(UaeError::Index("not an index file (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != INDEX_VERSION {
            return Err(UaeError::VersionMismatch {
                expected: INDEX_VERSION,
                found: version,
            });
        }
        let dim = r.u32()? as usize;
        let count = r.u64()? as usize;
        let metric = r.u8()?;
        if metric != METRIC_INNER_PRODUCT {
            return Err(UaeError::Index(format!("unknown metric tag {metric}")));
        }
        // Every row needs at least its id length prefix and its floats.
        if count.saturating_mul(4 + 4 * dim) > bytes.len() {
            return Err(UaeError::Index("truncated: count exceeds file size".into()));
        }
        let mut doc_ids = Vec::with_capacity(count);
        for _ in 0..count {
            doc_ids.push(r.str()?);
        }
        let raw = r.take(count * dim * 4)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let hnsw = match r.u8()? {
            0 => None,
            1 => {
                let params = HnswParams {
                    m: r.u32()? as usize,
                    ef_construction: r.u32()? as usize,
                    ef_search: r.u32()? as usize,
                    seed: r.u64()?,
                };
                let entry = r.u32()?;
                let max_level = r.u8()? as usize;
                let levels = r.take(count)?.to_vec();
                if entry as usize >= count || levels.iter().any(|&l| l as usize > max_level) {
                    return Err(UaeError::Index("corrupt HNSW header".into()));
                }
                let mut layers = vec![vec![Vec::new(); count]; max_level + 1];
                for (l, layer) in layers.iter_mut().enumerate() {
                    for (node, adj) in layer.iter_mut().enumerate() {
                        if levels[node] as usize >= l {
                            let deg = r.u32()? as usize;
                            for _ in 0..deg {
                                let n = r.u32()?;
                                if n as usize >= count {
                                    return Err(UaeError::Index("corrupt HNSW adjacency".into()));
                                }
                                adj.push(n);
                            }
                        }
                    }
                }
                Some(Hnsw {
                    params,
                    levels,
                    layers,
                    entry,
                })
            }
            f => return Err(UaeError::Index(format!("unknown graph flag {f}"))),
        };
        r.finish()?;
        Ok(VectorIndex {
            dim,
            doc_ids,
            data,
            hnsw,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(UaeError::MissingInput(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| UaeError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl Hnsw {
    pub fn params(&self) -> HnswParams {
        self.params
    }

    fn max_degree(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.params.m
        } else {
            self.params.m
        }
    }

    fn build(index: &VectorIndex, params: HnswParams) -> Self {
        let n = index.len();
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let ml = 1.0 / (params.m as f64).ln();
        let levels: Vec<u8> = (0..n)
            .map(|_| {
                let u: f64 = rng.random::<f64>();
                let l = (-(1.0 - u).ln() * ml).floor();
                l.min(32.0) as u8
            })
            .collect();
        let max_level = *levels.iter().max().unwrap_or(&0) as usize;
        let mut h = Hnsw {
            params,
            levels,
            layers: vec![vec![Vec::new(); n]; max_level + 1],
            entry: 0,
        };
        let mut top = h.levels[0] as usize;
        for i in 1..n {
            let q = index.row(i);
            let level = h.levels[i] as usize;
            let mut ep = vec![Scored(dot_f32(q, index.row(h.entry as usize)), h.entry)];
            for l in (level + 1..=top).rev() {
                ep = h.search_layer(index, q, &ep, 1, l);
            }
            for l in (0..=level.min(top)).rev() {
                let found = h.search_layer(index, q, &ep, params.ef_construction, l);
                let neighbors = h.select(index, &found, h.max_degree(l));
                for &nb in &neighbors {
                    h.layers[l][nb as usize].push(i as u32);
                    if h.layers[l][nb as usize].len() > h.max_degree(l) {
                        h.shrink(index, nb, l);
                    }
                }
                h.layers[l][i] = neighbors;
                ep = found;
            }
            if level > top {
                top = level;
                h.entry = i as u32;
            }
        }
        h.layers.truncate(top + 1);
        h.repair(index);
        h
    }

    /// Neighbor-selection heuristic: walk candidates best-first and keep one
    /// only if it is closer to the base than to every kept neighbor; then
    /// top up with the best pruned candidates.
    fn select(&self, index: &VectorIndex, candidates: &[Scored], max: usize) -> Vec<u32> {
        let mut sorted = candidates.to_vec();
        sorted.sort_by(|a, b| b.cmp(a));
        let mut kept: Vec<u32> = Vec::with_capacity(max);
        let mut pruned = Vec::new();
        for c in sorted {
            if kept.len() == max {
                break;
            }
            let row = index.row(c.1 as usize);
            let dominated = kept.iter().any(|&k| dot_f32(row, index.row(k as usize)) > c.0);
            if dominated {
                pruned.push(c.1);
            } else {
                kept.push(c.1);
            }
        }
        for p in pruned {
            if kept.len() == max {
                break;
            }
            kept.push(p);
        }
        kept
    }

    fn shrink(&mut self, index: &VectorIndex, node: u32, layer: usize) {
        let base = index.row(node as usize);
        let cands: Vec<Scored> = self.layers[layer][node as usize]
            .iter()
            .map(|&n| Scored(dot_f32(base, index.row(n as usize)), n))
            .collect();
        self.layers[layer][node as usize] = self.select(index, &cands, self.max_degree(layer));
    }

    fn search_layer(&self, index: &VectorIndex, q: &[f32], entry: &[Scored], ef: usize, layer: usize) -> Vec<Scored> {
        with_visited(index.len(), |visit| {
            let mut candidates: BinaryHeap<Scored> = BinaryHeap::new();
            let mut results: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
            for &e in entry {
                if visit(e.1) {
                    candidates.push(e);
                    results.push(Reverse(e));
                }
            }
            while results.len() > ef {
                results.pop();
            }
            while let Some(c) = candidates.pop() {
                let worst = results.peek().map(|r| r.0).expect("non-empty results");
                if c < worst && results.len() >= ef {
                    break;
                }
                for &nb in &self.layers[layer][c.1 as usize] {
                    if !visit(nb) {
                        continue;
                    }
                    let s = Scored(dot_f32(q, index.row(nb as usize)), nb);
                    let worst = results.peek().map(|r| r.0).expect("non-empty results");
                    if results.len() < ef || s > worst {
                        candidates.push(s);
                        results.push(Reverse(s));
                        if results.len() > ef {
                            results.pop();
                        }
                    }
                }
            }
            results.into_iter().map(|r| r.0).collect()
        })
    }

    fn search(&self, index: &VectorIndex, q: &[f32], k: usize) -> Vec<Scored> {
        let mut ep = vec![Scored(dot_f32(q, index.row(self.entry as usize)), self.entry)];
        for l in (1..self.layers.len()).rev() {
            ep = self.search_layer(index, q, &ep, 1, l);
        }
        self.search_layer(index, q, &ep, self.params.ef_search.max(k), 0)
    }

    fn has_edge(&self, layer: usize, a: u32, b: u32) -> bool {
        self.layers[layer][a as usize].contains(&b)
    }

    fn remove_edge(&mut self, layer: usize, a: u32, b: u32) {
        self.layers[layer][a as usize].retain(|&x| x != b);
        self.layers[layer][b as usize].retain(|&x| x != a);
    }

    /// Makes layer 0 symmetric (add the reverse edge when there is room,
    /// otherwise drop the forward edge), then links every component that the
    /// entry point cannot reach.
    fn repair(&mut self, index: &VectorIndex) {
        let n = index.len();
        let cap = self.max_degree(0);
        for u in 0..n as u32 {
            let adj = self.layers[0][u as usize].clone();
            for v in adj {
                if self.has_edge(0, v, u) {
                    continue;
                }
                if self.layers[0][v as usize].len() < cap {
                    self.layers[0][v as usize].push(u);
                } else {
                    self.layers[0][u as usize].retain(|&x| x != v);
                }
            }
        }
        let mut reached = vec![false; n];
        self.mark_reachable(self.entry, &mut reached);
        for x in 0..n as u32 {
            if reached[x as usize] {
                continue;
            }
            let q = index.row(x as usize).to_vec();
            let ep = vec![Scored(dot_f32(&q, index.row(self.entry as usize)), self.entry)];
            let mut near = self.search_layer(index, &q, &ep, self.params.ef_construction, 0);
            near.sort_by(|a, b| b.cmp(a));
            let target = near
                .iter()
                .map(|s| s.1)
                .find(|&r| reached[r as usize] && self.layers[0][r as usize].len() < cap)
                .or_else(|| (0..n as u32).find(|&r| reached[r as usize] && self.layers[0][r as usize].len() < cap))
                .unwrap_or_else(|| {
                    let r = near.first().map(|s| s.1).unwrap_or(self.entry);
                    let last = *self.layers[0][r as usize].last().expect("full node has neighbors");
                    self.remove_edge(0, r, last);
                    r
                });
            if self.layers[0][x as usize].len() >= cap {
                let last = *self.layers[0][x as usize].last().expect("full node has neighbors");
                self.remove_edge(0, x, last);
            }
            self.layers[0][x as usize].push(target);
            self.layers[0][target as usize].push(x);
            // The edge removals above can only detach nodes now reachable via
            // x, so recompute from scratch.
            reached.iter_mut().for_each(|r| *r = false);
            self.mark_reachable(self.entry, &mut reached);
        }
    }

    fn mark_reachable(&self, start: u32, reached: &mut [bool]) {
        let mut queue = VecDeque::from([start]);
        reached[start as usize] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &self.layers[0][u as usize] {
                if !reached[v as usize] {
                    reached[v as usize] = true;
                    queue.push_back(v);
                }
            }
        }
    }

    /// Checks symmetry and degree bounds at layer 0, degree bounds above,
    /// and reachability of every node from the entry point.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let n = self.levels.len();
        for (l, layer) in self.layers.iter().enumerate() {
            for (u, adj) in layer.iter().enumerate() {
                if adj.len() > self.max_degree(l) {
                    return Err(format!("node {u} has degree {} at layer {l}", adj.len()));
                }
                if l == 0 {
                    for &v in adj {
                        if !self.has_edge(0, v, u as u32) {
                            return Err(format!("edge {u}->{v} has no reverse"));
                        }
                    }
                }
            }
        }
        let mut reached = vec![false; n];
        self.mark_reachable(self.entry, &mut reached);
        match reached.iter().position(|r| !r) {
            Some(u) => Err(format!("node {u} unreachable from entry")),
            None => Ok(()),
        }
    }
}
