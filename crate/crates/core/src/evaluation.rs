//! Dataset evaluation protocols and metrics: probe masking, average
//! precision, CMC curves, the trial-averaged single-match protocol, and
//! key-point localization error and precision.
//!
//! Queries left with zero relevant gallery items after masking are excluded
//! from the mAP and CMC denominators. Gallery sampling for the trial-based
//! protocol draws all trial seeds up front from the master seed, so trials
//! are reproducible independently of execution order.

use crate::error::{Error, Result};
use crate::retrieval::{
    cosine_distance_matrix, cosine_similarity, rank_gallery, rerank_distances, EmbeddingRecord,
    RerankParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

/// Native key-point map extent (the grid predictions live on).
pub const NATIVE_MAP_EXTENT: f64 = 56.0;
/// Grid extent the precision threshold r0 is expressed in.
pub const THRESHOLD_MAP_EXTENT: f64 = 48.0;
/// Trials used by the single-match protocol unless overridden.
pub const DEFAULT_TRIALS: u32 = 10;

/// Longest CMC curve retained in a report.
const MAX_CMC_LEN: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Veri,
    VehicleId,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Veri => f.write_str("veri"),
            Protocol::VehicleId => f.write_str("vehicleid"),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "veri" => Ok(Protocol::Veri),
            "vehicleid" => Ok(Protocol::VehicleId),
            other => Err(Error::InvalidArgument(format!(
                "unknown protocol `{other}` (expected veri or vehicleid)"
            ))),
        }
    }
}

/// Gallery eligibility for one probe: an entry is kept unless it shares both
/// identity and camera with the probe, or is the probe image itself.
pub fn veri_gallery_mask(query: &EmbeddingRecord, gallery: &[EmbeddingRecord]) -> Vec<bool> {
    gallery
        .iter()
        .map(|g| {
            let junk = (g.identity == query.identity && g.camera == query.camera)
                || g.image_id == query.image_id;
            !junk
        })
        .collect()
}

/// Average precision over a ranked relevance list:
/// `(1/R) * sum over relevant ranks r of (relevant in top r) / r`.
/// Returns `None` when nothing is relevant, signalling exclusion.
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let total_relevant = relevance.iter().filter(|&&r| r).count();
    if total_relevant == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / total_relevant as f64)
}

/// Fraction of queries with at least one relevant item in the top `k`.
/// Queries with no relevant item anywhere are excluded from the denominator.
pub fn cmc_at(relevance_lists: &[Vec<bool>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("cmc rank k must be >= 1".into()));
    }
    let mut counted = 0usize;
    let mut hits = 0usize;
    for list in relevance_lists {
        if !list.iter().any(|&r| r) {
            continue;
        }
        counted += 1;
        if list.iter().take(k).any(|&r| r) {
            hits += 1;
        }
    }
    if counted == 0 {
        return Err(Error::DegenerateInput(
            "no query has a relevant gallery item".into(),
        ));
    }
    Ok(hits as f64 / counted as f64)
}

/// A bundled protocol run: records, protocol tag, and sampling parameters.
/// The cross-camera protocol reads `queries` against `gallery`; the
/// single-match protocol samples galleries out of `gallery` alone.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySpec {
    pub protocol: Protocol,
    pub queries: Vec<EmbeddingRecord>,
    pub gallery: Vec<EmbeddingRecord>,
    pub trials: u32,
    pub seed: u64,
}

impl QuerySpec {
    pub fn evaluate(&self, rerank: Option<&RerankParams>) -> Result<EvalReport> {
        match self.protocol {
            Protocol::Veri => evaluate_veri(&self.queries, &self.gallery, rerank),
            Protocol::VehicleId => {
                if rerank.is_some() {
                    return Err(Error::InvalidArgument(
                        "re-ranking does not apply to the single-match protocol".into(),
                    ));
                }
                evaluate_vehicleid(&self.gallery, self.trials, self.seed)
            }
        }
    }
}

/// One included query's average precision.
#[derive(Debug, Clone, PartialEq)]
pub struct PerQueryAp {
    pub image_id: String,
    pub ap: f64,
}

/// Metrics for one gallery-sampling trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialMetrics {
    pub map: f64,
    pub cmc1: f64,
    pub cmc5: f64,
}

/// Protocol output: mAP, the CMC curve, per-query diagnostics and, for the
/// trial-based protocol, per-trial values.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub map: f64,
    pub cmc: Vec<f64>,
    pub num_queries: usize,
    pub trials: u32,
    pub seed: u64,
    pub rerank: Option<RerankParams>,
    pub per_query_ap: Vec<PerQueryAp>,
    pub per_trial: Vec<TrialMetrics>,
}

impl EvalReport {
    /// CMC at rank `k` (1-based); the curve saturates past its stored length.
    pub fn cmc_at_rank(&self, k: usize) -> f64 {
        assert!(k >= 1, "cmc rank is 1-based");
        let idx = k.min(self.cmc.len());
        self.cmc[idx - 1]
    }

    /// Key=value header plus bracketed machine-readable blocks. Stable
    /// formatting: identical inputs yield byte-identical text.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("protocol={}\n", self.protocol));
        out.push_str(&format!("map={:.6}\n", self.map));
        out.push_str(&format!("cmc1={:.6}\n", self.cmc_at_rank(1)));
        out.push_str(&format!("cmc5={:.6}\n", self.cmc_at_rank(5)));
        out.push_str(&format!("num_queries={}\n", self.num_queries));
        out.push_str(&format!("trials={}\n", self.trials));
        out.push_str(&format!("seed={}\n", self.seed));
        match &self.rerank {
            Some(p) => out.push_str(&format!(
                "rerank=k1={} k2={} lambda_rr={:.6}\n",
                p.k1, p.k2, p.lambda
            )),
            None => out.push_str("rerank=none\n"),
        }
        out.push_str("[cmc]\n");
        for (i, v) in self.cmc.iter().enumerate() {
            out.push_str(&format!("{} {:.6}\n", i + 1, v));
        }
        if !self.per_trial.is_empty() {
            out.push_str("[per_trial]\n");
            for (i, t) in self.per_trial.iter().enumerate() {
                out.push_str(&format!(
                    "{} cmc1={:.6} cmc5={:.6} map={:.6}\n",
                    i + 1,
                    t.cmc1,
                    t.cmc5,
                    t.map
                ));
            }
        }
        if !self.per_query_ap.is_empty() {
            out.push_str("[per_query_ap]\n");
            for q in &self.per_query_ap {
                out.push_str(&format!("{} {:.6}\n", q.image_id, q.ap));
            }
        }
        out
    }
}

fn check_features(records: &[EmbeddingRecord], what: &str) -> Result<usize> {
    let first = records
        .first()
        .ok_or_else(|| Error::DegenerateInput(format!("empty {what} set")))?;
    let dim = first.feature.len();
    if dim == 0 {
        return Err(Error::DegenerateInput(format!(
            "{what} record `{}` has an empty feature",
            first.image_id
        )));
    }
    for r in records {
        if r.feature.len() != dim {
            return Err(Error::dim(
                format!("{what} record `{}` feature", r.image_id),
                dim,
                r.feature.len(),
            ));
        }
    }
    Ok(dim)
}

fn check_unique_ids(records: &[EmbeddingRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.image_id.as_str()) {
            return Err(Error::DuplicateId(r.image_id.clone()));
        }
    }
    Ok(())
}

/// Cross-camera retrieval protocol: every probe searches the full test set
/// minus its own-camera instances, ranked by cosine similarity or, when
/// `rerank` is given, by the jointly re-ranked distances.
pub fn evaluate_veri(
    queries: &[EmbeddingRecord],
    gallery: &[EmbeddingRecord],
    rerank: Option<&RerankParams>,
) -> Result<EvalReport> {
    let qdim = check_features(queries, "query")?;
    let gdim = check_features(gallery, "gallery")?;
    if qdim != gdim {
        return Err(Error::dim("query/gallery features", gdim, qdim));
    }
    check_unique_ids(gallery)?;

    let reranked = match rerank {
        Some(params) => {
            let features: Vec<Vec<f64>> = queries
                .iter()
                .chain(gallery)
                .map(|r| r.feature.clone())
                .collect();
            let joint = cosine_distance_matrix(&features)?;
            Some(rerank_distances(&joint, queries.len(), params)?)
        }
        None => None,
    };

    let per_query: Vec<Option<(PerQueryAp, Vec<bool>)>> = queries
        .par_iter()
        .enumerate()
        .map(|(qi, query)| -> Result<Option<(PerQueryAp, Vec<bool>)>> {
            let mask = veri_gallery_mask(query, gallery);
            if !mask.iter().any(|&m| m) {
                return Ok(None);
            }
            let order: Vec<usize> = match &reranked {
                Some(dist) => {
                    let mut kept: Vec<usize> =
                        (0..gallery.len()).filter(|&i| mask[i]).collect();
                    kept.sort_by(|&a, &b| {
                        dist.get(qi, a)
                            .partial_cmp(&dist.get(qi, b))
                            .expect("finite distances")
                            .then_with(|| gallery[a].image_id.cmp(&gallery[b].image_id))
                    });
                    kept
                }
                None => rank_gallery(query, gallery, &mask)?
                    .into_iter()
                    .map(|m| m.index)
                    .collect(),
            };
            let relevance: Vec<bool> = order
                .iter()
                .map(|&i| gallery[i].identity == query.identity)
                .collect();
            Ok(average_precision(&relevance).map(|ap| {
                (
                    PerQueryAp {
                        image_id: query.image_id.clone(),
                        ap,
                    },
                    relevance,
                )
            }))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut per_query_ap = Vec::new();
    let mut relevance_lists = Vec::new();
    for entry in per_query.into_iter().flatten() {
        per_query_ap.push(entry.0);
        relevance_lists.push(entry.1);
    }
    if per_query_ap.is_empty() {
        return Err(Error::DegenerateInput(
            "no query has a relevant gallery item after masking".into(),
        ));
    }

    let map = per_query_ap.iter().map(|q| q.ap).sum::<f64>() / per_query_ap.len() as f64;
    let cmc_len = gallery.len().clamp(5, MAX_CMC_LEN);
    let cmc = (1..=cmc_len)
        .map(|k| cmc_at(&relevance_lists, k))
        .collect::<Result<Vec<_>>>()?;

    Ok(EvalReport {
        protocol: Protocol::Veri,
        map,
        cmc,
        num_queries: per_query_ap.len(),
        trials: 1,
        seed: 0,
        rerank: rerank.copied(),
        per_query_ap,
        per_trial: Vec::new(),
    })
}

/// One sampled trial of the single-match protocol: gallery indices (one per
/// identity) and per-query outcomes against that gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleIdTrial {
    pub gallery: Vec<usize>,
    pub queries: Vec<QueryOutcome>,
}

/// Outcome for one query in a sampled trial. `first_relevant_rank` is
/// 1-based; with a single true match, AP equals its reciprocal.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub record: usize,
    pub first_relevant_rank: usize,
    pub ap: f64,
    pub relevance: Vec<bool>,
}

/// Derives per-trial seeds from the master seed, all drawn up front.
pub fn vehicleid_trial_seeds(seed: u64, trials: u32) -> Vec<u64> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    (0..trials).map(|_| master.random()).collect()
}

/// Runs the sampled-gallery trials: per trial, one uniformly drawn image per
/// identity forms the gallery and every remaining image queries it.
/// Identities with a single image contribute a gallery entry and no queries.
pub fn vehicleid_trials(
    records: &[EmbeddingRecord],
    trials: u32,
    seed: u64,
) -> Result<Vec<VehicleIdTrial>> {
    check_features(records, "test")?;
    check_unique_ids(records)?;
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }

    // Identity -> record indices, both levels deterministically ordered.
    let mut by_identity: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_identity.entry(r.identity).or_default().push(i);
    }
    for members in by_identity.values_mut() {
        members.sort_by(|&a, &b| records[a].image_id.cmp(&records[b].image_id));
    }
    let num_queries: usize = by_identity.values().map(|m| m.len() - 1).sum();
    if num_queries == 0 {
        return Err(Error::DegenerateInput(
            "every identity has a single image; no queries can be formed".into(),
        ));
    }

    let trial_seeds = vehicleid_trial_seeds(seed, trials);
    trial_seeds
        .par_iter()
        .map(|&trial_seed| -> Result<VehicleIdTrial> {
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
            let mut gallery_indices = Vec::with_capacity(by_identity.len());
            let mut query_indices = Vec::with_capacity(num_queries);
            for members in by_identity.values() {
                let pick = rng.random_range(0..members.len());
                gallery_indices.push(members[pick]);
                for (i, &m) in members.iter().enumerate() {
                    if i != pick {
                        query_indices.push(m);
                    }
                }
            }

            let gallery: Vec<&EmbeddingRecord> =
                gallery_indices.iter().map(|&i| &records[i]).collect();
            let queries = query_indices
                .iter()
                .map(|&qi| -> Result<QueryOutcome> {
                    let query = &records[qi];
                    let mut order: Vec<usize> = (0..gallery.len()).collect();
                    let scores = gallery
                        .iter()
                        .map(|g| cosine_similarity(&query.feature, &g.feature))
                        .collect::<Result<Vec<_>>>()?;
                    order.sort_by(|&a, &b| {
                        scores[b]
                            .partial_cmp(&scores[a])
                            .expect("finite similarity scores")
                            .then_with(|| gallery[a].image_id.cmp(&gallery[b].image_id))
                    });
                    let relevance: Vec<bool> = order
                        .iter()
                        .map(|&i| gallery[i].identity == query.identity)
                        .collect();
                    let rank = relevance
                        .iter()
                        .position(|&r| r)
                        .expect("sampled gallery always contains the query identity")
                        + 1;
                    Ok(QueryOutcome {
                        record: qi,
                        first_relevant_rank: rank,
                        ap: 1.0 / rank as f64,
                        relevance,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(VehicleIdTrial {
                gallery: gallery_indices,
                queries,
            })
        })
        .collect()
}

/// Trial-averaged single-match evaluation: CMC and mAP averaged over the
/// sampled galleries.
pub fn evaluate_vehicleid(records: &[EmbeddingRecord], trials: u32, seed: u64) -> Result<EvalReport> {
    let runs = vehicleid_trials(records, trials, seed)?;
    let gallery_size = runs[0].gallery.len();
    let cmc_len = gallery_size.clamp(5, MAX_CMC_LEN);

    let mut per_trial = Vec::with_capacity(runs.len());
    let mut cmc_sum = vec![0.0; cmc_len];
    let mut map_sum = 0.0;
    for run in &runs {
        let lists: Vec<Vec<bool>> = run.queries.iter().map(|q| q.relevance.clone()).collect();
        let map = run.queries.iter().map(|q| q.ap).sum::<f64>() / run.queries.len() as f64;
        let curve = (1..=cmc_len)
            .map(|k| cmc_at(&lists, k))
            .collect::<Result<Vec<_>>>()?;
        for (acc, v) in cmc_sum.iter_mut().zip(&curve) {
            *acc += v;
        }
        map_sum += map;
        per_trial.push(TrialMetrics {
            map,
            cmc1: curve[0],
            cmc5: curve[4.min(cmc_len - 1)],
        });
    }
    let n = runs.len() as f64;
    let cmc: Vec<f64> = cmc_sum.into_iter().map(|v| v / n).collect();

    Ok(EvalReport {
        protocol: Protocol::VehicleId,
        map: map_sum / n,
        cmc,
        num_queries: runs[0].queries.len(),
        trials,
        seed,
        rerank: None,
        per_query_ap: Vec::new(),
        per_trial,
    })
}

/// Per-image key-point evaluation data: predicted and ground-truth
/// coordinates on the native grid, with per-key-point visibility.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointEval {
    pub predicted: Vec<[f64; 2]>,
    pub ground_truth: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

impl KeypointEval {
    pub fn new(
        predicted: Vec<[f64; 2]>,
        ground_truth: Vec<[f64; 2]>,
        visible: Vec<bool>,
    ) -> Result<Self> {
        if predicted.len() != ground_truth.len() || predicted.len() != visible.len() {
            return Err(Error::dim(
                "key-point triple",
                ground_truth.len(),
                predicted.len().min(visible.len()),
            ));
        }
        Ok(KeypointEval {
            predicted,
            ground_truth,
            visible,
        })
    }

    fn visible_distances(&self) -> impl Iterator<Item = f64> + '_ {
        self.predicted
            .iter()
            .zip(&self.ground_truth)
            .zip(&self.visible)
            .filter(|(_, &v)| v)
            .map(|((p, g), _)| {
                let dx = p[0] - g[0];
                let dy = p[1] - g[1];
                (dx * dx + dy * dy).sqrt()
            })
    }
}

/// Mean Euclidean distance in native-grid pixels over all visible key-points,
/// pooled across images.
pub fn keypoint_mse(images: &[KeypointEval]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for img in images {
        for d in img.visible_distances() {
            sum += d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::DegenerateInput("no visible key-points".into()));
    }
    Ok(sum / count as f64)
}

/// Mean squared Euclidean distance variant (units of pixels squared).
pub fn keypoint_mse_squared(images: &[KeypointEval]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for img in images {
        for d in img.visible_distances() {
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::DegenerateInput("no visible key-points".into()));
    }
    Ok(sum / count as f64)
}

/// Fraction of images whose visible key-point error, averaged per image and
/// rescaled from the native grid to the threshold grid, falls below `r0`.
pub fn keypoint_precision(images: &[KeypointEval], r0: f64) -> Result<f64> {
    if !r0.is_finite() || r0 <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "r0 must be positive, got {r0}"
        )));
    }
    if images.is_empty() {
        return Err(Error::DegenerateInput("no images to evaluate".into()));
    }
    let scale = THRESHOLD_MAP_EXTENT / NATIVE_MAP_EXTENT;
    let mut correct = 0usize;
    for (i, img) in images.iter().enumerate() {
        let mut sum = 0.0;
        let mut count = 0usize;
        for d in img.visible_distances() {
            sum += d;
            count += 1;
        }
        if count == 0 {
            return Err(Error::DegenerateInput(format!(
                "image {i} has no visible key-points"
            )));
        }
        if sum / count as f64 * scale < r0 {
            correct += 1;
        }
    }
    Ok(correct as f64 / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn record(id: &str, identity: i64, camera: i64, feature: Vec<f64>) -> EmbeddingRecord {
        EmbeddingRecord {
            image_id: id.to_string(),
            identity,
            camera,
            feature,
            orientation_likelihood: None,
        }
    }

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.1 {
                return v.iter().map(|x| x / norm).collect();
            }
        }
    }

    #[test]
    fn gallery_mask_examples() {
        let query = record("q", 5, 3, vec![1.0]);
        let gallery = vec![
            record("a", 5, 3, vec![1.0]),
            record("b", 5, 7, vec![1.0]),
            record("c", 6, 3, vec![1.0]),
        ];
        assert_eq!(veri_gallery_mask(&query, &gallery), vec![false, true, true]);

        let disjoint = vec![record("d", 1, 1, vec![1.0]), record("e", 2, 2, vec![1.0])];
        assert_eq!(veri_gallery_mask(&query, &disjoint), vec![true, true]);

        let all_junk = vec![record("f", 5, 3, vec![1.0]), record("g", 5, 3, vec![1.0])];
        assert_eq!(veri_gallery_mask(&query, &all_junk), vec![false, false]);

        // The probe image itself is masked even across cameras.
        let with_self = vec![record("q", 5, 9, vec![1.0])];
        assert_eq!(veri_gallery_mask(&query, &with_self), vec![false]);
    }

    #[test]
    fn average_precision_hand_cases() {
        assert_eq!(average_precision(&[true, false, false]), Some(1.0));
        let ap = average_precision(&[true, false, true, false]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        let ap = average_precision(&[false, true, false, true, false]).unwrap();
        assert!((ap - 0.5).abs() < 1e-12);
        assert_eq!(average_precision(&[false, false]), None);
    }

    #[test]
    fn cmc_examples() {
        let all_first = vec![vec![true, false], vec![true, true]];
        assert_eq!(cmc_at(&all_first, 1).unwrap(), 1.0);

        let third = vec![vec![false, false, true, false, false]];
        assert_eq!(cmc_at(&third, 1).unwrap(), 0.0);
        assert_eq!(cmc_at(&third, 5).unwrap(), 1.0);

        assert!(cmc_at(&third, 0).is_err());
    }

    #[test]
    fn cmc_matches_brute_force_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let lists: Vec<Vec<bool>> = (0..100)
            .map(|_| (0..20).map(|_| rng.random_range(0..5) == 0).collect())
            .collect();
        for k in [1usize, 3, 5, 10, 20] {
            let got = cmc_at(&lists, k).unwrap();
            let included: Vec<&Vec<bool>> =
                lists.iter().filter(|l| l.contains(&true)).collect();
            let hits = included
                .iter()
                .filter(|l| l[..k.min(l.len())].contains(&true))
                .count();
            assert_eq!(got, hits as f64 / included.len() as f64);
        }
    }

    #[test]
    fn veri_perfectly_separable_identities() {
        // Three identities on orthogonal axes, identical within identity.
        let mut queries = Vec::new();
        let mut gallery = Vec::new();
        for id in 0..3i64 {
            let mut f = vec![0.0; 3];
            f[id as usize] = 1.0;
            queries.push(record(&format!("q{id}"), id, 0, f.clone()));
            for cam in 1..=2 {
                gallery.push(record(&format!("g{id}_{cam}"), id, cam, f.clone()));
            }
        }
        let report = evaluate_veri(&queries, &gallery, None).unwrap();
        assert_eq!(report.map, 1.0);
        assert_eq!(report.cmc_at_rank(1), 1.0);
        assert_eq!(report.num_queries, 3);
    }

    #[test]
    fn veri_report_matches_brute_force_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2030);
        let gallery: Vec<EmbeddingRecord> = (0..30)
            .map(|i| {
                record(
                    &format!("g{i:02}"),
                    rng.random_range(0..5),
                    rng.random_range(0..3),
                    random_unit(&mut rng, 8),
                )
            })
            .collect();
        let queries: Vec<EmbeddingRecord> = (0..10)
            .map(|i| {
                record(
                    &format!("q{i:02}"),
                    rng.random_range(0..5),
                    rng.random_range(0..3),
                    random_unit(&mut rng, 8),
                )
            })
            .collect();
        let report = evaluate_veri(&queries, &gallery, None).unwrap();

        // Independent reference straight from the protocol definition.
        let mut aps = Vec::new();
        let mut lists = Vec::new();
        for q in &queries {
            let mut scored: Vec<(usize, f64)> = gallery
                .iter()
                .enumerate()
                .filter(|(_, g)| {
                    !((g.identity == q.identity && g.camera == q.camera)
                        || g.image_id == q.image_id)
                })
                .map(|(i, g)| {
                    let dot: f64 = q.feature.iter().zip(&g.feature).map(|(a, b)| a * b).sum();
                    let nq = q.feature.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let ng = g.feature.iter().map(|v| v * v).sum::<f64>().sqrt();
                    (i, (dot / (nq * ng)).clamp(-1.0, 1.0))
                })
                .collect();
            scored.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap()
                    .then_with(|| gallery[a.0].image_id.cmp(&gallery[b.0].image_id))
            });
            let rel: Vec<bool> = scored
                .iter()
                .map(|&(i, _)| gallery[i].identity == q.identity)
                .collect();
            let total = rel.iter().filter(|&&r| r).count();
            if total == 0 {
                continue;
            }
            let mut hits = 0;
            let mut sum = 0.0;
            for (pos, &r) in rel.iter().enumerate() {
                if r {
                    hits += 1;
                    sum += hits as f64 / (pos + 1) as f64;
                }
            }
            aps.push(sum / total as f64);
            lists.push(rel);
        }
        let expected_map = aps.iter().sum::<f64>() / aps.len() as f64;
        assert_eq!(report.map, expected_map);
        for k in [1usize, 5] {
            let hits = lists.iter().filter(|l| l[..k.min(l.len())].contains(&true)).count();
            assert_eq!(report.cmc_at_rank(k), hits as f64 / lists.len() as f64);
        }
    }

    #[test]
    fn veri_is_invariant_to_gallery_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        let gallery: Vec<EmbeddingRecord> = (0..20)
            .map(|i| {
                record(
                    &format!("g{i:02}"),
                    rng.random_range(0..4),
                    rng.random_range(0..2),
                    random_unit(&mut rng, 6),
                )
            })
            .collect();
        let queries: Vec<EmbeddingRecord> = (0..6)
            .map(|i| {
                record(
                    &format!("q{i}"),
                    rng.random_range(0..4),
                    rng.random_range(0..2),
                    random_unit(&mut rng, 6),
                )
            })
            .collect();
        let a = evaluate_veri(&queries, &gallery, None).unwrap();
        let mut shuffled = gallery.clone();
        shuffled.reverse();
        shuffled.swap(3, 11);
        let b = evaluate_veri(&queries, &shuffled, None).unwrap();
        assert_eq!(a.map, b.map);
        assert_eq!(a.cmc, b.cmc);
    }

    #[test]
    fn veri_random_features_land_near_prior_relevance_rate() {
        // Monte-Carlo sanity band: with random unit features the ranking is
        // uninformative and mAP concentrates near the mean relevance rate.
        let mut rng = ChaCha8Rng::seed_from_u64(314);
        let gallery: Vec<EmbeddingRecord> = (0..400)
            .map(|i| {
                record(
                    &format!("g{i:03}"),
                    rng.random_range(0..8),
                    rng.random_range(0..4),
                    random_unit(&mut rng, 16),
                )
            })
            .collect();
        let queries: Vec<EmbeddingRecord> = (0..60)
            .map(|i| {
                record(
                    &format!("q{i:03}"),
                    rng.random_range(0..8),
                    rng.random_range(0..4),
                    random_unit(&mut rng, 16),
                )
            })
            .collect();
        let report = evaluate_veri(&queries, &gallery, None).unwrap();

        let mut prior_sum = 0.0;
        let mut counted = 0usize;
        for q in &queries {
            let mask = veri_gallery_mask(q, &gallery);
            let kept = mask.iter().filter(|&&m| m).count();
            let rel = gallery
                .iter()
                .zip(&mask)
                .filter(|(g, &m)| m && g.identity == q.identity)
                .count();
            if rel > 0 {
                prior_sum += rel as f64 / kept as f64;
                counted += 1;
            }
        }
        let prior = prior_sum / counted as f64;
        assert!(
            (report.map - prior).abs() < 0.1,
            "map {} vs prior {prior}",
            report.map
        );
    }

    #[test]
    fn veri_rejects_empty_queries_and_duplicate_gallery_ids() {
        let gallery = vec![record("a", 1, 1, vec![1.0, 0.0])];
        assert!(evaluate_veri(&[], &gallery, None).is_err());
        let dup = vec![
            record("a", 1, 1, vec![1.0, 0.0]),
            record("a", 2, 1, vec![0.0, 1.0]),
        ];
        let q = vec![record("q", 1, 2, vec![1.0, 0.0])];
        assert!(matches!(
            evaluate_veri(&q, &dup, None),
            Err(Error::DuplicateId(_))
        ));
    }

    fn paired_identities(n_ids: usize, dim: usize) -> Vec<EmbeddingRecord> {
        // Two images per identity with identical features, orthogonal
        // across identities (requires dim >= n_ids).
        let mut records = Vec::new();
        for id in 0..n_ids {
            let mut f = vec![0.0; dim];
            f[id] = 1.0;
            records.push(record(&format!("i{id}_a"), id as i64, 0, f.clone()));
            records.push(record(&format!("i{id}_b"), id as i64, 1, f));
        }
        records
    }

    #[test]
    fn vehicleid_identical_pairs_are_perfect() {
        let records = paired_identities(6, 6);
        let report = evaluate_vehicleid(&records, 5, 42).unwrap();
        assert_eq!(report.cmc_at_rank(1), 1.0);
        assert_eq!(report.map, 1.0);
        assert_eq!(report.num_queries, 6);
        for t in &report.per_trial {
            assert_eq!(t.cmc1, 1.0);
        }
    }

    #[test]
    fn vehicleid_gallery_size_and_single_relevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9000);
        let mut records = Vec::new();
        for id in 0..7i64 {
            let n = rng.random_range(1..5);
            for j in 0..n {
                records.push(record(
                    &format!("v{id}_{j}"),
                    id,
                    0,
                    random_unit(&mut rng, 8),
                ));
            }
        }
        let trials = vehicleid_trials(&records, 6, 123).unwrap();
        for t in &trials {
            assert_eq!(t.gallery.len(), 7);
            for q in &t.queries {
                assert_eq!(q.relevance.iter().filter(|&&r| r).count(), 1);
                let rank = q.relevance.iter().position(|&r| r).unwrap() + 1;
                assert_eq!(q.first_relevant_rank, rank);
                assert_eq!(q.ap, 1.0 / rank as f64);
            }
        }
    }

    #[test]
    fn vehicleid_fixed_seed_reproduces_and_average_is_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(321);
        let mut records = Vec::new();
        for id in 0..5i64 {
            for j in 0..3 {
                records.push(record(
                    &format!("r{id}_{j}"),
                    id,
                    0,
                    random_unit(&mut rng, 10),
                ));
            }
        }
        let a = evaluate_vehicleid(&records, 10, 7).unwrap();
        let b = evaluate_vehicleid(&records, 10, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_text(), b.to_text());

        let mean_map = a.per_trial.iter().map(|t| t.map).sum::<f64>() / 10.0;
        let mean_cmc1 = a.per_trial.iter().map(|t| t.cmc1).sum::<f64>() / 10.0;
        assert_eq!(a.map, mean_map);
        assert_eq!(a.cmc_at_rank(1), mean_cmc1);

        let c = evaluate_vehicleid(&records, 10, 8).unwrap();
        assert_ne!(a.per_trial, c.per_trial);
    }

    #[test]
    fn vehicleid_rejects_degenerate_inputs() {
        assert!(evaluate_vehicleid(&[], 10, 0).is_err());
        let singles = vec![
            record("a", 1, 0, vec![1.0, 0.0]),
            record("b", 2, 0, vec![0.0, 1.0]),
        ];
        assert!(evaluate_vehicleid(&singles, 10, 0).is_err());
        let records = paired_identities(3, 3);
        assert!(evaluate_vehicleid(&records, 0, 0).is_err());
    }

    #[test]
    fn keypoint_metrics_exact_cases() {
        let perfect = KeypointEval::new(
            vec![[3.0, 4.0], [10.0, 10.0]],
            vec![[3.0, 4.0], [10.0, 10.0]],
            vec![true, true],
        )
        .unwrap();
        assert_eq!(keypoint_mse(std::slice::from_ref(&perfect)).unwrap(), 0.0);
        assert_eq!(keypoint_precision(&[perfect], 0.5).unwrap(), 1.0);

        // Single visible key-point offset by (3, 4): distance 5 natively.
        let offset = KeypointEval::new(
            vec![[13.0, 24.0], [0.0, 0.0]],
            vec![[10.0, 20.0], [50.0, 50.0]],
            vec![true, false],
        )
        .unwrap();
        assert_eq!(keypoint_mse(std::slice::from_ref(&offset)).unwrap(), 5.0);
        assert_eq!(keypoint_mse_squared(std::slice::from_ref(&offset)).unwrap(), 25.0);

        // Rescaled to the threshold grid: 5 * 48/56 = 4.2857...
        let scaled = 5.0f64 * 48.0 / 56.0;
        assert!((scaled - 4.285714285714286).abs() < 1e-12);
        assert_eq!(keypoint_precision(std::slice::from_ref(&offset), 3.0).unwrap(), 0.0);
        assert_eq!(keypoint_precision(&[offset], 5.0).unwrap(), 1.0);
    }

    #[test]
    fn keypoint_metrics_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2048);
        let images: Vec<KeypointEval> = (0..12)
            .map(|_| {
                let n = 20;
                let gt: Vec<[f64; 2]> = (0..n)
                    .map(|_| [rng.random_range(0.0..56.0), rng.random_range(0.0..56.0)])
                    .collect();
                let pred: Vec<[f64; 2]> = gt
                    .iter()
                    .map(|p| {
                        [
                            p[0] + rng.random_range(-3.0..3.0),
                            p[1] + rng.random_range(-3.0..3.0),
                        ]
                    })
                    .collect();
                let mut visible: Vec<bool> = (0..n).map(|_| rng.random_range(0..3) > 0).collect();
                visible[0] = true;
                KeypointEval::new(pred, gt, visible).unwrap()
            })
            .collect();

        let mut sum = 0.0;
        let mut count = 0;
        for img in &images {
            for k in 0..20 {
                if img.visible[k] {
                    let dx = img.predicted[k][0] - img.ground_truth[k][0];
                    let dy = img.predicted[k][1] - img.ground_truth[k][1];
                    sum += (dx * dx + dy * dy).sqrt();
                    count += 1;
                }
            }
        }
        assert_eq!(keypoint_mse(&images).unwrap(), sum / count as f64);

        for r0 in [1.0, 2.0, 3.0, 5.0] {
            let mut correct = 0;
            for img in &images {
                let mut s = 0.0;
                let mut c = 0;
                for k in 0..20 {
                    if img.visible[k] {
                        let dx = img.predicted[k][0] - img.ground_truth[k][0];
                        let dy = img.predicted[k][1] - img.ground_truth[k][1];
                        s += (dx * dx + dy * dy).sqrt();
                        c += 1;
                    }
                }
                if s / c as f64 * (48.0 / 56.0) < r0 {
                    correct += 1;
                }
            }
            assert_eq!(
                keypoint_precision(&images, r0).unwrap(),
                correct as f64 / images.len() as f64
            );
        }
    }

    #[test]
    fn keypoint_precision_monotone_in_r0() {
        let mut rng = ChaCha8Rng::seed_from_u64(606);
        let images: Vec<KeypointEval> = (0..10)
            .map(|_| {
                let gt: Vec<[f64; 2]> = (0..5)
                    .map(|_| [rng.random_range(0.0..56.0), rng.random_range(0.0..56.0)])
                    .collect();
                let pred: Vec<[f64; 2]> = gt
                    .iter()
                    .map(|p| [p[0] + rng.random_range(-6.0..6.0), p[1]])
                    .collect();
                KeypointEval::new(pred, gt, vec![true; 5]).unwrap()
            })
            .collect();
        let mut last = 0.0;
        for r0 in [0.5, 1.0, 2.0, 4.0, 8.0] {
            let p = keypoint_precision(&images, r0).unwrap();
            assert!(p >= last);
            last = p;
        }
    }

    #[test]
    fn keypoint_errors_on_empty_visibility() {
        let none = KeypointEval::new(vec![[0.0, 0.0]], vec![[1.0, 1.0]], vec![false]).unwrap();
        assert!(keypoint_mse(std::slice::from_ref(&none)).is_err());
        assert!(keypoint_precision(&[none], 3.0).is_err());
        assert!(KeypointEval::new(vec![[0.0, 0.0]], vec![], vec![true]).is_err());
    }

    #[test]
    fn query_spec_dispatches_to_the_right_protocol() {
        let records = paired_identities(4, 4);
        let spec = QuerySpec {
            protocol: Protocol::VehicleId,
            queries: Vec::new(),
            gallery: records.clone(),
            trials: 3,
            seed: 5,
        };
        let direct = evaluate_vehicleid(&records, 3, 5).unwrap();
        assert_eq!(spec.evaluate(None).unwrap(), direct);
        assert!(spec.evaluate(Some(&RerankParams::default())).is_err());

        let queries = vec![records[0].clone()];
        let spec = QuerySpec {
            protocol: Protocol::Veri,
            queries: queries.clone(),
            gallery: records.clone(),
            trials: 1,
            seed: 0,
        };
        assert_eq!(
            spec.evaluate(None).unwrap(),
            evaluate_veri(&queries, &records, None).unwrap()
        );
    }

    #[test]
    fn report_text_is_stable_and_complete() {
        let records = paired_identities(4, 4);
        let report = evaluate_vehicleid(&records, 3, 11).unwrap();
        let text = report.to_text();
        assert!(text.starts_with("protocol=vehicleid\n"));
        assert!(text.contains("map=1.000000\n"));
        assert!(text.contains("cmc1=1.000000\n"));
        assert!(text.contains("cmc5=1.000000\n"));
        assert!(text.contains("trials=3\n"));
        assert!(text.contains("seed=11\n"));
        assert!(text.contains("rerank=none\n"));
        assert!(text.contains("[per_trial]\n"));
    }
}
