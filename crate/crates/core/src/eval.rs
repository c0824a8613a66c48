//! Query-gallery retrieval metrics and k-reciprocal re-ranking.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EmbeddingMatrix;
use crate::error::{ReidError, Result};
use crate::par;

/// Embeddings together with the player id of every row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub embeddings: EmbeddingMatrix,
    pub pids: Vec<String>,
}

impl EmbeddingSet {
    pub fn new(embeddings: EmbeddingMatrix, pids: Vec<String>) -> Result<Self> {
        if pids.len() != embeddings.len() {
            return Err(ReidError::Shape(format!(
                "{} player ids for {} embeddings",
                pids.len(),
                embeddings.len()
            )));
        }
        Ok(Self { embeddings, pids })
    }

    pub fn len(&self) -> usize {
        self.pids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            embeddings: self.embeddings.select(rows),
            pids: rows.iter().map(|&i| self.pids[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub values: Array2<f64>,
    pub query_ids: Vec<String>,
    pub gallery_ids: Vec<String>,
    pub query_pids: Vec<String>,
    pub gallery_pids: Vec<String>,
}

impl DistanceMatrix {
    pub fn new(
        values: Array2<f64>,
        query_ids: Vec<String>,
        gallery_ids: Vec<String>,
        query_pids: Vec<String>,
        gallery_pids: Vec<String>,
    ) -> Result<Self> {
        let (q, g) = values.dim();
        if query_ids.len() != q || query_pids.len() != q || gallery_ids.len() != g || gallery_pids.len() != g {
            return Err(ReidError::Shape(format!(
                "distance matrix {q}x{g} does not match its id/pid lists"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ReidError::Numerical("non-finite distance".into()));
        }
        Ok(Self {
            values,
            query_ids,
            gallery_ids,
            query_pids,
            gallery_pids,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_gallery(&self) -> usize {
        self.values.ncols()
    }

    fn with_values(&self, values: Array2<f64>) -> Self {
        Self {
            values,
            ..self.clone()
        }
    }
}

fn check_dims(q: &EmbeddingSet, g: &EmbeddingSet) -> Result<()> {
    if q.dim() != g.dim() {
        return Err(ReidError::Shape(format!(
            "query embeddings have D={} but gallery embeddings have D={}",
            q.dim(),
            g.dim()
        )));
    }
    Ok(())
}

/// `values[i][j] = 1 − ⟨q_i, g_j⟩`, clamped to `[0, 2]` against rounding.
pub fn cosine_distance_matrix(q: &EmbeddingSet, g: &EmbeddingSet) -> Result<DistanceMatrix> {
    check_dims(q, g)?;
    let sim = q.embeddings.vectors.dot(&g.embeddings.vectors.t());
    let values = sim.mapv(|s| (1.0 - s).clamp(0.0, 2.0));
    DistanceMatrix::new(
        values,
        q.embeddings.ids.clone(),
        g.embeddings.ids.clone(),
        q.pids.clone(),
        g.pids.clone(),
    )
}

/// Gallery indices by ascending distance, ties by ascending index.
pub fn rank_gallery(row: ArrayView1<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    idx
}

/// Average precision of one query; `None` when no gallery item is relevant.
///
/// The sum of precisions is kept as an exact fraction while it fits in
/// `u128`, so the result is the correctly rounded value of the true AP.
pub fn average_precision(row: ArrayView1<f64>, gallery_pids: &[String], query_pid: &str) -> Option<f64> {
    let mut hits = 0u64;
    let mut exact = Some(Fraction::ZERO);
    let mut approx = 0.0;
    for (rank, j) in rank_gallery(row).into_iter().enumerate() {
        if gallery_pids[j] == query_pid {
            hits += 1;
            let r = rank as u64 + 1;
            approx += hits as f64 / r as f64;
            exact = exact.and_then(|f| f.add(hits as u128, r as u128));
        }
    }
    if hits == 0 {
        return None;
    }
    Some(match exact.and_then(|f| f.div_int(hits as u128)) {
        Some(f) => f.to_f64(),
        None => approx / hits as f64,
    })
}

#[derive(Debug, Clone, Copy)]
struct Fraction {
    num: u128,
    den: u128,
}

impl Fraction {
    const ZERO: Self = Self { num: 0, den: 1 };

    fn reduced(num: u128, den: u128) -> Self {
        let g = gcd(num, den).max(1);
        Self { num: num / g, den: den / g }
    }

    fn add(self, n: u128, d: u128) -> Option<Self> {
        let g = gcd(self.den, d);
        let l = (self.den / g).checked_mul(d)?;
        let num = self.num.checked_mul(l / self.den)?.checked_add(n.checked_mul(l / d)?)?;
        Some(Self::reduced(num, l))
    }

    fn div_int(self, k: u128) -> Option<Self> {
        let g = gcd(self.num, k).max(1);
        Some(Self::reduced(self.num / g, self.den.checked_mul(k / g)?))
    }

    /// Correctly rounded when both parts are below 2^53; otherwise within an ulp or two.
    fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Per-query AP in query order; `None` marks queries without a relevant item.
pub fn per_query_ap(d: &DistanceMatrix) -> Vec<Option<f64>> {
    par::map_range(d.num_queries(), |i| {
        average_precision(d.values.row(i), &d.gallery_pids, &d.query_pids[i])
    })
}

fn mean_of_usable(aps: &[Option<f64>]) -> Result<f64> {
    let usable: Vec<f64> = aps.iter().flatten().copied().collect();
    if usable.is_empty() {
        return Err(ReidError::Invalid("no query has a relevant gallery item".into()));
    }
    Ok(usable.iter().sum::<f64>() / usable.len() as f64)
}

/// Unweighted mean AP over queries that have at least one relevant item.
pub fn mean_average_precision(d: &DistanceMatrix) -> Result<f64> {
    mean_of_usable(&per_query_ap(d))
}

/// Fraction of usable queries with a correct match among the top `k`.
pub fn cmc_rank_k(d: &DistanceMatrix, k: usize) -> Result<f64> {
    if k == 0 || k > d.num_gallery() {
        return Err(ReidError::Invalid(format!(
            "rank k={k} outside 1..={}",
            d.num_gallery()
        )));
    }
    let per_query: Vec<Option<bool>> = par::map_range(d.num_queries(), |i| {
        let pid = &d.query_pids[i];
        if !d.gallery_pids.iter().any(|g| g == pid) {
            return None;
        }
        Some(rank_gallery(d.values.row(i))[..k].iter().any(|&j| &d.gallery_pids[j] == pid))
    });
    let usable: Vec<bool> = per_query.into_iter().flatten().collect();
    if usable.is_empty() {
        return Err(ReidError::Invalid("no query has a relevant gallery item".into()));
    }
    Ok(usable.iter().filter(|&&h| h).count() as f64 / usable.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankParams {
    pub k1: usize,
    pub k2: usize,
    pub lambda: f64,
}

impl Default for RerankParams {
    fn default() -> Self {
        Self {
            k1: 20,
            k2: 6,
            lambda: 0.3,
        }
    }
}

impl RerankParams {
    pub fn validate(&self, total: usize) -> Result<()> {
        if !(self.k2 >= 1 && self.k1 > self.k2) {
            return Err(ReidError::Invalid(format!(
                "re-ranking needs k1 > k2 ≥ 1, got k1={} k2={}",
                self.k1, self.k2
            )));
        }
        if self.k1 >= total {
            return Err(ReidError::Invalid(format!(
                "k1={} must be smaller than the {total} query+gallery images",
                self.k1
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(ReidError::Invalid(format!("lambda={} outside [0,1]", self.lambda)));
        }
        Ok(())
    }

    /// Shrinks `k1`/`k2` so they fit a collection of `total` images.
    pub fn clamped(&self, total: usize) -> Self {
        let k1 = self.k1.min(total.saturating_sub(1)).max(2);
        let k2 = self.k2.min(k1 - 1).max(1);
        Self { k1, k2, ..*self }
    }
}

fn k_reciprocal(rank: &Array2<usize>, i: usize, k: usize) -> Vec<usize> {
    rank.row(i)
        .iter()
        .take(k + 1)
        .copied()
        .filter(|&c| rank.row(c).iter().take(k + 1).any(|&b| b == i))
        .collect()
}

/// k-reciprocal re-ranking with local query expansion.
///
/// Neighbour sets are built on the squared Euclidean distance between all
/// query and gallery embeddings, normalised by each row's maximum. The output
/// is `λ·d_cos + (1−λ)·d_jaccard`, so `λ = 1` returns the cosine distances
/// unchanged.
pub fn k_reciprocal_rerank(q: &EmbeddingSet, g: &EmbeddingSet, params: RerankParams) -> Result<DistanceMatrix> {
    check_dims(q, g)?;
    let nq = q.len();
    let total = nq + g.len();
    params.validate(total)?;
    let original = cosine_distance_matrix(q, g)?;

    let all = ndarray::concatenate(
        ndarray::Axis(0),
        &[q.embeddings.vectors.view(), g.embeddings.vectors.view()],
    )
    .expect("same width");
    let sq: Vec<f64> = all.rows().into_iter().map(|r| r.dot(&r)).collect();
    let gram = all.dot(&all.t());
    let mut dist = Array2::from_shape_fn((total, total), |(i, j)| {
        (sq[i] + sq[j] - 2.0 * gram[[i, j]]).max(0.0)
    });
    for mut row in dist.rows_mut() {
        let m = row.fold(0.0f64, |a, &b| a.max(b));
        if m > 0.0 {
            row.mapv_inplace(|v| v / m);
        }
    }

    let ranks = par::map_range(total, |i| rank_gallery(dist.row(i)));
    let rank = Array2::from_shape_vec((total, total), ranks.into_iter().flatten().collect()).expect("square");
    let half = (params.k1 as f64 / 2.0).round_ties_even() as usize;

    let rows: Vec<Vec<f64>> = par::map_range(total, |i| {
        let base = k_reciprocal(&rank, i, params.k1);
        let mut expanded = base.clone();
        for &c in &base {
            let cand = k_reciprocal(&rank, c, half);
            let overlap = cand.iter().filter(|x| base.contains(x)).count();
            if overlap as f64 > 2.0 / 3.0 * cand.len() as f64 {
                expanded.extend(cand);
            }
        }
        expanded.sort_unstable();
        expanded.dedup();
        let mut v = vec![0.0; total];
        let w: Vec<f64> = expanded.iter().map(|&j| (-dist[[i, j]]).exp()).collect();
        let s: f64 = w.iter().sum();
        for (&j, wj) in expanded.iter().zip(w) {
            v[j] = wj / s;
        }
        v
    });
    let mut v = Array2::from_shape_vec((total, total), rows.into_iter().flatten().collect()).expect("square");

    if params.k2 > 1 {
        let qe = par::map_range(total, |i| {
            let mut acc = vec![0.0; total];
            for &n in rank.row(i).iter().take(params.k2) {
                for (a, b) in acc.iter_mut().zip(v.row(n)) {
                    *a += b;
                }
            }
            acc.into_iter().map(|x| x / params.k2 as f64).collect::<Vec<_>>()
        });
        v = Array2::from_shape_vec((total, total), qe.into_iter().flatten().collect()).expect("square");
    }

    let lambda = params.lambda;
    let out = par::map_range(nq, |i| {
        let vi = v.row(i);
        (0..g.len())
            .map(|gj| {
                let j = nq + gj;
                let min_sum: f64 = vi.iter().zip(v.row(j)).map(|(a, b)| a.min(*b)).sum();
                let jac = 1.0 - min_sum / (2.0 - min_sum);
                lambda * original.values[[i, gj]] + (1.0 - lambda) * jac
            })
            .collect::<Vec<_>>()
    });
    let values = Array2::from_shape_vec((nq, g.len()), out.into_iter().flatten().collect()).expect("shape");
    if values.iter().any(|x| !x.is_finite()) {
        return Err(ReidError::Numerical("re-ranking produced a non-finite distance".into()));
    }
    Ok(original.with_values(values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub rerank: bool,
    pub rerank_params: RerankParams,
    pub cmc_ranks: Vec<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            rerank: true,
            rerank_params: RerankParams::default(),
            cmc_ranks: vec![1, 5, 10],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAp {
    pub query_id: String,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub map: f64,
    /// Rank k → CMC value, for the requested ranks that fit the gallery.
    pub cmc: BTreeMap<usize, f64>,
    pub per_query_ap: Vec<QueryAp>,
}

impl RetrievalMetrics {
    pub fn from_distances(d: &DistanceMatrix, ranks: &[usize]) -> Result<Self> {
        let aps = per_query_ap(d);
        let map = mean_of_usable(&aps)?;
        let mut cmc = BTreeMap::new();
        for &k in ranks.iter().filter(|&&k| k >= 1 && k <= d.num_gallery()) {
            cmc.insert(k, cmc_rank_k(d, k)?);
        }
        Ok(Self {
            map,
            cmc,
            per_query_ap: d
                .query_ids
                .iter()
                .zip(aps)
                .map(|(id, ap)| QueryAp {
                    query_id: id.clone(),
                    ap,
                })
                .collect(),
        })
    }

    pub fn rank(&self, k: usize) -> Option<f64> {
        self.cmc.get(&k).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_queries: usize,
    pub num_gallery: usize,
    /// Queries left out of every metric because no gallery item shares their player.
    pub excluded_queries: usize,
    pub raw: RetrievalMetrics,
    pub reranked: Option<RetrievalMetrics>,
    /// Parameters actually used, after clamping to the collection size.
    pub rerank_params: Option<RerankParams>,
    pub zero_shot: bool,
    #[serde(default)]
    pub encoder_name: Option<String>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

impl EvalReport {
    pub fn map_no_rerank(&self) -> f64 {
        self.raw.map
    }

    pub fn map_rerank(&self) -> Option<f64> {
        self.reranked.as_ref().map(|r| r.map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| ReidError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ReidError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// JSON schema every serialized [`EvalReport`] satisfies.
pub const EVAL_REPORT_SCHEMA: &str = include_str!("../schemas/eval_report.schema.json");

pub fn evaluate(q: &EmbeddingSet, g: &EmbeddingSet, opts: &EvalOptions) -> Result<EvalReport> {
    let d = cosine_distance_matrix(q, g)?;
    let raw = RetrievalMetrics::from_distances(&d, &opts.cmc_ranks)?;
    let excluded = raw.per_query_ap.iter().filter(|a| a.ap.is_none()).count();
    if excluded > 0 {
        log::warn!("{excluded} queries have no relevant gallery item and are excluded");
    }
    let (reranked, rerank_params) = if opts.rerank {
        let params = opts.rerank_params.clamped(q.len() + g.len());
        if params != opts.rerank_params {
            log::info!(
                "re-ranking parameters clamped to k1={} k2={} for {} images",
                params.k1,
                params.k2,
                q.len() + g.len()
            );
        }
        let rd = k_reciprocal_rerank(q, g, params)?;
        (Some(RetrievalMetrics::from_distances(&rd, &opts.cmc_ranks)?), Some(params))
    } else {
        (None, None)
    };
    Ok(EvalReport {
        num_queries: q.len(),
        num_gallery: g.len(),
        excluded_queries: excluded,
        raw,
        reranked,
        rerank_params,
        zero_shot: false,
        encoder_name: None,
        config_hash: None,
    })
}

/// Sidecar describing an embedding cache payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheSidecar {
    pub ids: Vec<String>,
    pub pids: Vec<String>,
    pub shape: [usize; 2],
    pub encoder_name: String,
    pub checkpoint: Option<String>,
    pub fine_tuned: bool,
    pub config_hash: Option<String>,
    /// SHA-256 over the payload and every other sidecar field.
    pub checksum: String,
}

impl CacheSidecar {
    fn digest(&self, payload: &[u8]) -> String {
        let mut h = Sha256::new();
        h.update(payload);
        for s in self.ids.iter().chain(&self.pids) {
            h.update((s.len() as u64).to_le_bytes());
            h.update(s.as_bytes());
        }
        h.update((self.shape[0] as u64).to_le_bytes());
        h.update((self.shape[1] as u64).to_le_bytes());
        h.update(self.encoder_name.as_bytes());
        h.update([0]);
        h.update(self.checkpoint.as_deref().unwrap_or("").as_bytes());
        h.update([0, self.fine_tuned as u8]);
        h.update(self.config_hash.as_deref().unwrap_or("").as_bytes());
        format!("{:x}", h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    pub set: EmbeddingSet,
    pub encoder_name: String,
    pub checkpoint: Option<String>,
    pub fine_tuned: bool,
    pub config_hash: Option<String>,
}

pub fn sidecar_path(payload: &Path) -> PathBuf {
    let mut s = payload.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl EmbeddingCache {
    /// Writes `path` (little-endian f32, row-major) and `path.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let v = &self.set.embeddings.vectors;
        let payload: Vec<u8> = v.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
        let mut side = CacheSidecar {
            ids: self.set.embeddings.ids.clone(),
            pids: self.set.pids.clone(),
            shape: [v.nrows(), v.ncols()],
            encoder_name: self.encoder_name.clone(),
            checkpoint: self.checkpoint.clone(),
            fine_tuned: self.fine_tuned,
            config_hash: self.config_hash.clone(),
            checksum: String::new(),
        };
        side.checksum = side.digest(&payload);
        std::fs::write(path, &payload).map_err(|e| ReidError::io(path, e))?;
        let sp = sidecar_path(path);
        std::fs::write(&sp, serde_json::to_string_pretty(&side)?).map_err(|e| ReidError::io(&sp, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sp = sidecar_path(path);
        let text = std::fs::read_to_string(&sp).map_err(|e| ReidError::io(&sp, e))?;
        let side: CacheSidecar = serde_json::from_str(&text)?;
        let payload = std::fs::read(path).map_err(|e| ReidError::io(path, e))?;
        let actual = side.digest(&payload);
        if actual != side.checksum {
            return Err(ReidError::Checksum {
                what: path.display().to_string(),
                expected: side.checksum,
                actual,
            });
        }
        let [n, d] = side.shape;
        if payload.len() != n * d * 4 || side.ids.len() != n || side.pids.len() != n {
            return Err(ReidError::Shape(format!(
                "cache {} does not hold {n}x{d} float32 values with matching ids",
                path.display()
            )));
        }
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let vectors = Array2::from_shape_vec((n, d), data).expect("checked length");
        Ok(Self {
            set: EmbeddingSet::new(EmbeddingMatrix::new(side.ids, vectors)?, side.pids)?,
            encoder_name: side.encoder_name,
            checkpoint: side.checkpoint,
            fine_tuned: side.fine_tuned,
            config_hash: side.config_hash,
        })
    }
}
