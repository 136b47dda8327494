//! Distance-based anomaly scores.
//!
//! Three raw distances are supported:
//!
//! * DKNN: distance to the k-th nearest other row,
//! * SKNN: sum of distances to the 1st..k-th nearest other rows,
//! * k-means with a single cluster: distance to the column-mean prototype.
//!
//! Raw distances are min-max normalized to `[0, 100]` per scoring run and a
//! row is a troll when its score is strictly above the threshold.
//!
//! All neighbor searches are exact and brute force. A row is never its own
//! neighbor; duplicate rows are still neighbors of each other.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profile::{sample_indices, FeatureMatrix, FeatureRow, N_FEATURES};

pub const DEFAULT_THRESHOLD: f64 = 40.0;
pub const DEFAULT_K: usize = 5;
pub const HISTOGRAM_BUCKETS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScoreError {
    #[error("population of {n} rows is too small for k = {k}")]
    PopulationTooSmall { n: usize, k: usize },
    #[error("cannot score an empty population")]
    EmptyPopulation,
    #[error("k must be positive")]
    ZeroK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringMethod {
    Dknn,
    Sknn,
    Kmeans,
}

impl ScoringMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoringMethod::Dknn => "dknn",
            ScoringMethod::Sknn => "sknn",
            ScoringMethod::Kmeans => "kmeans",
        }
    }

    pub fn uses_k(self) -> bool {
        !matches!(self, ScoringMethod::Kmeans)
    }
}

impl fmt::Display for ScoringMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoringMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dknn" => Ok(ScoringMethod::Dknn),
            "sknn" => Ok(ScoringMethod::Sknn),
            "kmeans" => Ok(ScoringMethod::Kmeans),
            other => Err(format!(
                "unknown scoring method {other:?} (expected dknn, sknn or kmeans)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    pub method: ScoringMethod,
    /// Neighbor count for the kNN methods; ignored by k-means.
    pub k: usize,
    pub threshold: f64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig {
            method: ScoringMethod::Kmeans,
            k: DEFAULT_K,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Troll,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Troll => "troll",
        }
    }

    pub fn is_troll(self) -> bool {
        self == Label::Troll
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredUser {
    pub username: String,
    pub raw_distance: f64,
    pub anomaly_score: f64,
    pub label: Label,
}

#[inline]
pub fn euclidean(a: &FeatureRow, b: &FeatureRow) -> f64 {
    let mut s = 0.0;
    for i in 0..N_FEATURES {
        let d = a[i] - b[i];
        s += d * d;
    }
    s.sqrt()
}

#[derive(Clone, Copy)]
enum KnnReduce {
    KthDistance,
    SumToK,
}

/// Raw kNN distances of `queries` against `reference`.
///
/// `self_index(q)` names the reference row that is the query itself, which
/// is skipped.
fn knn_raw<F>(
    reference: &[FeatureRow],
    queries: &[FeatureRow],
    self_index: F,
    k: usize,
    reduce: KnnReduce,
) -> Vec<f64>
where
    F: Fn(usize) -> Option<usize> + Sync,
{
    queries
        .par_iter()
        .enumerate()
        .map_init(
            || Vec::with_capacity(reference.len()),
            |dists: &mut Vec<f64>, (qi, q)| {
                let skip = self_index(qi);
                dists.clear();
                dists.extend(
                    reference
                        .iter()
                        .enumerate()
                        .filter(|(ri, _)| Some(*ri) != skip)
                        .map(|(_, r)| euclidean(q, r)),
                );
                let (nearest, kth, _) = dists.select_nth_unstable_by(k - 1, f64::total_cmp);
                match reduce {
                    KnnReduce::KthDistance => *kth,
                    KnnReduce::SumToK => {
                        nearest.sort_unstable_by(f64::total_cmp);
                        nearest.iter().fold(0.0, |acc, d| acc + d) + *kth
                    }
                }
            },
        )
        .collect()
}

fn check_k(n: usize, k: usize) -> Result<(), ScoreError> {
    if k == 0 {
        return Err(ScoreError::ZeroK);
    }
    if n <= k {
        return Err(ScoreError::PopulationTooSmall { n, k });
    }
    Ok(())
}

/// Distance from each row to its k-th nearest other row.
pub fn dknn_distances(rows: &[FeatureRow], k: usize) -> Result<Vec<f64>, ScoreError> {
    check_k(rows.len(), k)?;
    Ok(knn_raw(rows, rows, Some, k, KnnReduce::KthDistance))
}

/// Sum of distances from each row to its k nearest other rows.
pub fn sknn_distances(rows: &[FeatureRow], k: usize) -> Result<Vec<f64>, ScoreError> {
    check_k(rows.len(), k)?;
    Ok(knn_raw(rows, rows, Some, k, KnnReduce::SumToK))
}

/// Column-wise mean of the rows.
pub fn centroid(rows: &[FeatureRow]) -> Result<FeatureRow, ScoreError> {
    if rows.is_empty() {
        return Err(ScoreError::EmptyPopulation);
    }
    let mut c = [0.0; N_FEATURES];
    for r in rows {
        for (ci, x) in c.iter_mut().zip(r) {
            *ci += x;
        }
    }
    let n = rows.len() as f64;
    for ci in &mut c {
        *ci /= n;
    }
    Ok(c)
}

/// Single-cluster k-means: the prototype and every row's distance to it.
///
/// Lloyd's algorithm with one cluster assigns every row to it and moves the
/// centroid to the column mean after the first step, so the mean is used
/// directly.
pub fn kmeans_distances(rows: &[FeatureRow]) -> Result<(FeatureRow, Vec<f64>), ScoreError> {
    let c = centroid(rows)?;
    let raw = rows.par_iter().map(|r| euclidean(r, &c)).collect();
    Ok((c, raw))
}

/// Min-max map onto [0, 100]. All-equal input maps to all zeros.
pub fn normalize_scores(raw: &[f64]) -> Vec<f64> {
    let (lo, hi) = min_max(raw);
    normalize_with_range(raw, lo, hi)
}

fn min_max(raw: &[f64]) -> (f64, f64) {
    raw.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        })
}

/// Map with a fixed range, clamping to [0, 100].
pub fn normalize_with_range(raw: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
        return vec![0.0; raw.len()];
    }
    let span = hi - lo;
    raw.iter()
        .map(|&x| (100.0 * (x - lo) / span).clamp(0.0, 100.0))
        .collect()
}

pub fn label_for(score: f64, threshold: f64) -> Label {
    if score > threshold {
        Label::Troll
    } else {
        Label::Normal
    }
}

pub fn normalize_and_label(usernames: &[String], raw: &[f64], threshold: f64) -> Vec<ScoredUser> {
    assert_eq!(usernames.len(), raw.len());
    let scores = normalize_scores(raw);
    label_scores(usernames, raw, &scores, threshold)
}

fn label_scores(
    usernames: &[String],
    raw: &[f64],
    scores: &[f64],
    threshold: f64,
) -> Vec<ScoredUser> {
    usernames
        .iter()
        .zip(raw)
        .zip(scores)
        .map(|((u, &r), &s)| ScoredUser {
            username: u.clone(),
            raw_distance: r,
            anomaly_score: s,
            label: label_for(s, threshold),
        })
        .collect()
}

/// Counts per unit-width bucket; a score of exactly 100 lands in the last one.
pub fn score_histogram(scores: impl IntoIterator<Item = f64>) -> [u64; HISTOGRAM_BUCKETS] {
    let mut h = [0u64; HISTOGRAM_BUCKETS];
    for s in scores {
        let b = (s.floor().max(0.0) as usize).min(HISTOGRAM_BUCKETS - 1);
        h[b] += 1;
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrollFeatureDistances {
    /// Mean |x_i - prototype_i| over troll rows, per feature.
    pub mean_abs_distance: FeatureRow,
    pub trolls: usize,
    /// Set when there were no trolls to average over.
    pub no_trolls: bool,
}

pub fn troll_feature_distances(
    rows: &[FeatureRow],
    labels: &[Label],
    prototype: &FeatureRow,
) -> TrollFeatureDistances {
    assert_eq!(rows.len(), labels.len());
    let mut sum = [0.0; N_FEATURES];
    let mut trolls = 0usize;
    for (r, l) in rows.iter().zip(labels) {
        if l.is_troll() {
            trolls += 1;
            for i in 0..N_FEATURES {
                sum[i] += (r[i] - prototype[i]).abs();
            }
        }
    }
    if trolls > 0 {
        for s in &mut sum {
            *s /= trolls as f64;
        }
    } else {
        log::warn!("no trolls labeled; per-feature distances are all zero");
    }
    TrollFeatureDistances {
        mean_abs_distance: sum,
        trolls,
        no_trolls: trolls == 0,
    }
}

/// Percent of rows whose `feature` (0-based) is strictly above `threshold`.
pub fn single_feature_label_rate(rows: &[FeatureRow], feature: usize, threshold: f64) -> f64 {
    single_feature_rate(rows, feature, threshold, true)
}

/// Like [`single_feature_label_rate`], optionally counting rows strictly below.
pub fn single_feature_rate(
    rows: &[FeatureRow],
    feature: usize,
    threshold: f64,
    above: bool,
) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let hits = rows
        .iter()
        .filter(|r| {
            if above {
                r[feature] > threshold
            } else {
                r[feature] < threshold
            }
        })
        .count();
    100.0 * hits as f64 / rows.len() as f64
}

/// Result of one scoring run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scoreboard {
    pub config: ScorerConfig,
    pub users: Vec<ScoredUser>,
    /// k-means prototype, when the method produces one.
    pub prototype: Option<FeatureRow>,
    /// Rows that defined the distance structure (the whole population
    /// unless it was subsampled).
    pub reference_size: usize,
}

impl Scoreboard {
    pub fn trolls(&self) -> usize {
        self.users.iter().filter(|u| u.label.is_troll()).count()
    }

    pub fn troll_percent(&self) -> f64 {
        if self.users.is_empty() {
            0.0
        } else {
            100.0 * self.trolls() as f64 / self.users.len() as f64
        }
    }

    pub fn labels(&self) -> Vec<Label> {
        self.users.iter().map(|u| u.label).collect()
    }

    pub fn histogram(&self) -> [u64; HISTOGRAM_BUCKETS] {
        score_histogram(self.users.iter().map(|u| u.anomaly_score))
    }

    pub fn summary(&self) -> ScoreSummary {
        ScoreSummary {
            method: self.config.method,
            k: self.config.method.uses_k().then_some(self.config.k),
            n: self.users.len(),
            trolls: self.trolls(),
            troll_percent: self.troll_percent(),
            histogram: self.histogram().to_vec(),
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["username", "raw_distance", "anomaly_score", "label"])?;
        for u in &self.users {
            wr.write_record([
                u.username.as_str(),
                &u.raw_distance.to_string(),
                &u.anomaly_score.to_string(),
                u.label.as_str(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub method: ScoringMethod,
    pub k: Option<usize>,
    pub n: usize,
    pub trolls: usize,
    pub troll_percent: f64,
    pub histogram: Vec<u64>,
}

/// Raw distances of every row under `config`, plus the prototype for k-means.
pub fn raw_distances(
    rows: &[FeatureRow],
    config: &ScorerConfig,
) -> Result<(Vec<f64>, Option<FeatureRow>), ScoreError> {
    match config.method {
        ScoringMethod::Dknn => Ok((dknn_distances(rows, config.k)?, None)),
        ScoringMethod::Sknn => Ok((sknn_distances(rows, config.k)?, None)),
        ScoringMethod::Kmeans => {
            let (c, raw) = kmeans_distances(rows)?;
            Ok((raw, Some(c)))
        }
    }
}

/// Score every row of `matrix` against the whole matrix.
pub fn score_matrix(
    matrix: &FeatureMatrix,
    config: &ScorerConfig,
) -> Result<Scoreboard, ScoreError> {
    let (raw, prototype) = raw_distances(&matrix.rows, config)?;
    Ok(Scoreboard {
        config: *config,
        users: normalize_and_label(&matrix.usernames, &raw, config.threshold),
        prototype,
        reference_size: matrix.len(),
    })
}

/// Score a population, subsampling the distance structure when it is large.
///
/// With at most `sample_size` rows this is [`score_matrix`]. Otherwise a
/// seeded sample defines the structure: k-means uses the sample's
/// prototype, the kNN methods draw neighbors from the sample only (a sampled
/// row still skips itself). The normalization range comes from the sampled
/// rows, so their scores equal those of scoring the sample alone; other rows
/// are mapped onto the same scale and clamped to [0, 100].
pub fn score_population(
    matrix: &FeatureMatrix,
    config: &ScorerConfig,
    sample_size: usize,
    seed: u64,
) -> Result<Scoreboard, ScoreError> {
    if matrix.len() <= sample_size {
        return score_matrix(matrix, config);
    }
    let picked = sample_indices(matrix.len(), sample_size, seed);
    let reference: Vec<FeatureRow> = picked.iter().map(|&i| matrix.rows[i]).collect();
    // Row index -> position in the sample.
    let mut position = vec![None; matrix.len()];
    for (p, &i) in picked.iter().enumerate() {
        position[i] = Some(p);
    }

    let (raw, prototype) = match config.method {
        ScoringMethod::Kmeans => {
            let c = centroid(&reference)?;
            let raw: Vec<f64> = matrix.rows.par_iter().map(|r| euclidean(r, &c)).collect();
            (raw, Some(c))
        }
        ScoringMethod::Dknn | ScoringMethod::Sknn => {
            check_k(reference.len(), config.k)?;
            let reduce = if config.method == ScoringMethod::Dknn {
                KnnReduce::KthDistance
            } else {
                KnnReduce::SumToK
            };
            (
                knn_raw(&reference, &matrix.rows, |q| position[q], config.k, reduce),
                None,
            )
        }
    };

    let sample_raw: Vec<f64> = picked.iter().map(|&i| raw[i]).collect();
    let (lo, hi) = min_max(&sample_raw);
    let scores = normalize_with_range(&raw, lo, hi);
    Ok(Scoreboard {
        config: *config,
        users: label_scores(&matrix.usernames, &raw, &scores, config.threshold),
        prototype,
        reference_size: reference.len(),
    })
}
