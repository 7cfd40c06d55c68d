//! Similarity scoring, gallery ranking, and k-reciprocal re-ranking.
//!
//! Re-ranking follows the k-reciprocal encoding method: reciprocal neighbor
//! sets with the half-k1 expansion rule, Gaussian-weighted encoding vectors,
//! local query expansion over the k2 nearest neighbors, and a Jaccard
//! distance blended with the original distance. The blend uses the raw input
//! distances, so `lambda = 1` reproduces them exactly.

use crate::error::{Error, Result};
use crate::orientation::OrientationLikelihood;
use rayon::prelude::*;

/// One image's retrieval data: identifier, identity label, camera id, the
/// feature vector, and optionally the 8-way orientation likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub image_id: String,
    pub identity: i64,
    pub camera: i64,
    pub feature: Vec<f64>,
    pub orientation_likelihood: Option<OrientationLikelihood>,
}

/// `<a, b> / (||a|| ||b||)`, clamped to `[-1, 1]` against rounding.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine operands", a.len(), b.len()));
    }
    let norm_a = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let norm_b = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm_a < 1e-12 || norm_b < 1e-12 {
        return Err(Error::DegenerateInput(format!(
            "cosine similarity of near-zero vector (norms {norm_a:.3e}, {norm_b:.3e})"
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (norm_a * norm_b)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceMetric {
    Cosine,
    Reranked,
}

/// A query-by-gallery (or joint square) distance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    metric: DistanceMetric,
}

impl DistanceMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>, metric: DistanceMetric) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("distance matrix data", rows * cols, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("distance matrix".into()));
        }
        Ok(DistanceMatrix {
            rows,
            cols,
            data,
            metric,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn metric(&self) -> DistanceMetric {
        self.metric
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        assert!(row < self.rows && col < self.cols, "distance index out of bounds");
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        assert!(row < self.rows, "distance row out of bounds");
        &self.data[row * self.cols..(row + 1) * self.cols]
    }
}

/// Pairwise cosine distances `1 - cos` over one feature set. The diagonal is
/// exactly zero.
pub fn cosine_distance_matrix(features: &[Vec<f64>]) -> Result<DistanceMatrix> {
    if features.len() < 2 {
        return Err(Error::DegenerateInput(
            "need at least 2 feature vectors".into(),
        ));
    }
    let dim = features[0].len();
    for (i, f) in features.iter().enumerate() {
        if f.len() != dim {
            return Err(Error::dim(format!("feature {i}"), dim, f.len()));
        }
    }
    let n = features.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let mut row = vec![0.0; n];
            for (j, item) in row.iter_mut().enumerate() {
                *item = if i == j {
                    0.0
                } else {
                    1.0 - cosine_similarity(&features[i], &features[j])?
                };
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    DistanceMatrix::new(n, n, rows.concat(), DistanceMetric::Cosine)
}

/// A gallery entry's position in a ranking, with its similarity score.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedMatch {
    pub index: usize,
    pub score: f64,
}

/// Ranks the unmasked gallery entries by descending cosine similarity to the
/// query; ties break by ascending image id. `mask[i] = true` keeps entry `i`.
pub fn rank_gallery(
    query: &EmbeddingRecord,
    gallery: &[EmbeddingRecord],
    mask: &[bool],
) -> Result<Vec<RankedMatch>> {
    if mask.len() != gallery.len() {
        return Err(Error::dim("gallery mask", gallery.len(), mask.len()));
    }
    let mut ranked = Vec::new();
    for (i, record) in gallery.iter().enumerate() {
        if mask[i] {
            ranked.push(RankedMatch {
                index: i,
                score: cosine_similarity(&query.feature, &record.feature)?,
            });
        }
    }
    if ranked.is_empty() {
        return Err(Error::DegenerateInput(
            "gallery is fully masked for this query".into(),
        ));
    }
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite similarity scores")
            .then_with(|| gallery[a.index].image_id.cmp(&gallery[b.index].image_id))
    });
    Ok(ranked)
}

/// k-reciprocal re-ranking parameters. Defaults are the published ones for
/// the method: `k1 = 20`, `k2 = 6`, `lambda = 0.3`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RerankParams {
    pub k1: usize,
    pub k2: usize,
    pub lambda: f64,
}

impl Default for RerankParams {
    fn default() -> Self {
        RerankParams {
            k1: 20,
            k2: 6,
            lambda: 0.3,
        }
    }
}

impl RerankParams {
    pub fn validate(&self, num_samples: usize) -> Result<()> {
        if self.k2 < 1 || self.k1 <= self.k2 {
            return Err(Error::InvalidArgument(format!(
                "need k1 > k2 >= 1, got k1={} k2={}",
                self.k1, self.k2
            )));
        }
        if self.k1 >= num_samples {
            return Err(Error::InvalidArgument(format!(
                "k1={} must be below the joint sample count {num_samples}",
                self.k1
            )));
        }
        if !self.lambda.is_finite() || !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Joins per-block distances into the square joint matrix
/// `[[qq, qg], [qg^T, gg]]` used by re-ranking.
pub fn assemble_joint_distances(
    query_query: &DistanceMatrix,
    query_gallery: &DistanceMatrix,
    gallery_gallery: &DistanceMatrix,
) -> Result<DistanceMatrix> {
    let q = query_gallery.rows();
    let g = query_gallery.cols();
    if query_query.rows() != q || query_query.cols() != q {
        return Err(Error::dim(
            "query-query block",
            format!("{q}x{q}"),
            format!("{}x{}", query_query.rows(), query_query.cols()),
        ));
    }
    if gallery_gallery.rows() != g || gallery_gallery.cols() != g {
        return Err(Error::dim(
            "gallery-gallery block",
            format!("{g}x{g}"),
            format!("{}x{}", gallery_gallery.rows(), gallery_gallery.cols()),
        ));
    }
    let n = q + g;
    let mut data = vec![0.0; n * n];
    for i in 0..q {
        data[i * n..i * n + q].copy_from_slice(query_query.row(i));
        data[i * n + q..(i + 1) * n].copy_from_slice(query_gallery.row(i));
    }
    for i in 0..g {
        let row = (q + i) * n;
        for j in 0..q {
            data[row + j] = query_gallery.get(j, i);
        }
        data[row + q..row + n].copy_from_slice(gallery_gallery.row(i));
    }
    DistanceMatrix::new(n, n, data, DistanceMetric::Cosine)
}

// Half-k1 neighborhood size, matching round-half-to-even of k1/2.
fn half_k1(k1: usize) -> usize {
    let m = k1 / 2;
    if k1.is_multiple_of(2) || m.is_multiple_of(2) {
        m
    } else {
        m + 1
    }
}

fn argsort_row(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| {
        row[a]
            .partial_cmp(&row[b])
            .expect("finite distances")
            .then(a.cmp(&b))
    });
    order
}

/// Re-ranks using features directly: cosine distances over the joint
/// query+gallery set feed [`rerank_distances`].
pub fn rerank(
    features: &[Vec<f64>],
    num_query: usize,
    params: &RerankParams,
) -> Result<DistanceMatrix> {
    let joint = cosine_distance_matrix(features)?;
    rerank_distances(&joint, num_query, params)
}

/// Re-ranks a square joint distance matrix whose first `num_query` rows and
/// columns are the probes. Returns the query-by-gallery final distances
/// `lambda * original + (1 - lambda) * jaccard`.
pub fn rerank_distances(
    original: &DistanceMatrix,
    num_query: usize,
    params: &RerankParams,
) -> Result<DistanceMatrix> {
    let n = original.rows();
    if original.cols() != n {
        return Err(Error::dim(
            "joint distance matrix",
            format!("{n}x{n}"),
            format!("{}x{}", original.rows(), original.cols()),
        ));
    }
    if num_query == 0 || num_query >= n {
        return Err(Error::InvalidArgument(format!(
            "num_query={num_query} must lie in 1..{n}"
        )));
    }
    params.validate(n)?;
    let num_gallery = n - num_query;

    // Local distance transformation: squared distances, normalized per row
    // by the column maximum of the squared matrix (transposed layout, as in
    // the reference formulation).
    let mut colmax = vec![0.0f64; n];
    for i in 0..n {
        for (j, cm) in colmax.iter_mut().enumerate() {
            let d2 = original.get(i, j) * original.get(i, j);
            if d2 > *cm {
                *cm = d2;
            }
        }
    }
    let mut local = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            let d2 = original.get(j, i) * original.get(j, i);
            local[i * n + j] = if colmax[i] > 0.0 { d2 / colmax[i] } else { 0.0 };
        }
    }

    let initial_rank: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| argsort_row(&local[i * n..(i + 1) * n]))
        .collect();
    // rank_pos[i][j] = position of j in row i's ranking.
    let mut rank_pos = vec![0u32; n * n];
    for i in 0..n {
        for (pos, &j) in initial_rank[i].iter().enumerate() {
            rank_pos[i * n + j] = pos as u32;
        }
    }
    let within = |i: usize, j: usize, k: usize| rank_pos[i * n + j] as usize <= k;

    let reciprocal = |i: usize, k: usize| -> Vec<usize> {
        initial_rank[i][..=k]
            .iter()
            .copied()
            .filter(|&j| within(j, i, k))
            .collect()
    };

    // Gaussian-weighted k-reciprocal encoding with the half-k1 expansion.
    let half = half_k1(params.k1);
    let encoded: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let base = reciprocal(i, params.k1);
            let mut expansion = base.clone();
            for &candidate in &base {
                let candidate_set = reciprocal(candidate, half);
                let overlap = candidate_set
                    .iter()
                    .filter(|j| base.contains(j))
                    .count();
                // Strictly more than two-thirds overlap admits the
                // candidate set, exclusive at exact multiples.
                if 3 * overlap > 2 * candidate_set.len() {
                    expansion.extend_from_slice(&candidate_set);
                }
            }
            expansion.sort_unstable();
            expansion.dedup();

            let mut row = vec![0.0; n];
            let weights: Vec<f64> = expansion
                .iter()
                .map(|&j| (-local[i * n + j]).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            for (&j, w) in expansion.iter().zip(&weights) {
                row[j] = w / total;
            }
            row
        })
        .collect();

    // Local query expansion: average the encodings of the k2 nearest.
    let encoded: Vec<Vec<f64>> = if params.k2 > 1 {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut row = vec![0.0; n];
                for &j in &initial_rank[i][..params.k2] {
                    for (acc, v) in row.iter_mut().zip(&encoded[j]) {
                        *acc += v;
                    }
                }
                let scale = 1.0 / params.k2 as f64;
                for v in &mut row {
                    *v *= scale;
                }
                row
            })
            .collect()
    } else {
        encoded
    };

    // Inverted index over non-zero encoding entries.
    let mut inverted: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, row) in encoded.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v != 0.0 {
                inverted[j].push(i);
            }
        }
    }

    let final_rows: Vec<Vec<f64>> = (0..num_query)
        .into_par_iter()
        .map(|qi| {
            let mut min_sum = vec![0.0f64; n];
            for (l, &v_ql) in encoded[qi].iter().enumerate() {
                if v_ql == 0.0 {
                    continue;
                }
                for &j in &inverted[l] {
                    min_sum[j] += v_ql.min(encoded[j][l]);
                }
            }
            (0..num_gallery)
                .map(|gj| {
                    let ms = min_sum[num_query + gj];
                    let jaccard = 1.0 - ms / (2.0 - ms);
                    params.lambda * original.get(qi, num_query + gj)
                        + (1.0 - params.lambda) * jaccard
                })
                .collect()
        })
        .collect();

    DistanceMatrix::new(
        num_query,
        num_gallery,
        final_rows.concat(),
        DistanceMetric::Reranked,
    )
}
