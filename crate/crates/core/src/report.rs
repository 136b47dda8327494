//! Evaluation bundle: score distributions per method, troll rates and
//! per-feature comparisons.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::profile::{FeatureMatrix, N_FEATURES};
use crate::scoring::{
    score_population, single_feature_rate, troll_feature_distances, ScoreError, ScoreSummary,
    ScorerConfig, ScoringMethod, TrollFeatureDistances,
};

pub const REPORT_KS: [usize; 4] = [1, 5, 50, 500];

/// Label a user when one feature crosses a cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRule {
    /// 1-based feature number.
    pub feature: usize,
    /// Troll when strictly above the cutoff, otherwise strictly below.
    pub above: bool,
    pub threshold: f64,
}

impl FeatureRule {
    pub fn describe(&self) -> String {
        format!(
            "f{} {} {}",
            self.feature,
            if self.above { ">" } else { "<" },
            self.threshold
        )
    }
}

/// One rule per feature, pointing in the troll direction.
pub fn default_rules() -> Vec<FeatureRule> {
    let table = [
        (false, 0.5),
        (false, 0.6),
        (false, 0.7),
        (true, 0.5),
        (false, 0.5),
        (true, 0.1),
        (true, 0.5),
        (true, 0.1),
        (true, 0.15),
        (true, 0.2),
    ];
    table
        .iter()
        .enumerate()
        .map(|(i, &(above, threshold))| FeatureRule {
            feature: i + 1,
            above,
            threshold,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleRate {
    pub rule: FeatureRule,
    pub description: String,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub n: usize,
    pub threshold: f64,
    pub runs: Vec<ScoreSummary>,
    pub single_feature: Vec<RuleRate>,
    pub kmeans_troll_distances: Option<TrollFeatureDistances>,
    pub warnings: Vec<String>,
}

/// Score `matrix` under every method and k in [`REPORT_KS`].
///
/// k values the population cannot support are skipped with a warning.
pub fn build_report(
    matrix: &FeatureMatrix,
    threshold: f64,
    rules: &[FeatureRule],
    sample_size: usize,
    seed: u64,
) -> Report {
    let mut runs = Vec::new();
    let mut warnings = Vec::new();
    let mut kmeans_troll_distances = None;

    let mut configs = vec![ScorerConfig {
        method: ScoringMethod::Kmeans,
        k: 1,
        threshold,
    }];
    for method in [ScoringMethod::Dknn, ScoringMethod::Sknn] {
        for k in REPORT_KS {
            configs.push(ScorerConfig {
                method,
                k,
                threshold,
            });
        }
    }
    for cfg in configs {
        match score_population(matrix, &cfg, sample_size, seed) {
            Ok(board) => {
                if let Some(proto) = &board.prototype {
                    let d = troll_feature_distances(&matrix.rows, &board.labels(), proto);
                    if d.no_trolls {
                        warnings.push(
                            "k-means labeled no trolls; per-feature distances are zero".to_string(),
                        );
                    }
                    kmeans_troll_distances = Some(d);
                }
                runs.push(board.summary());
            }
            Err(ScoreError::PopulationTooSmall { n, k }) => {
                let msg = format!("skipped {} k={k}: only {n} users", cfg.method);
                log::warn!("{msg}");
                warnings.push(msg);
            }
            Err(e) => {
                let msg = format!("skipped {}: {e}", cfg.method);
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }

    let single_feature = rules
        .iter()
        .map(|r| RuleRate {
            rule: *r,
            description: r.describe(),
            percent: single_feature_rate(&matrix.rows, r.feature - 1, r.threshold, r.above),
        })
        .collect();

    Report {
        n: matrix.len(),
        threshold,
        runs,
        single_feature,
        kmeans_troll_distances,
        warnings,
    }
}

impl Report {
    pub fn run(&self, method: ScoringMethod, k: Option<usize>) -> Option<&ScoreSummary> {
        self.runs
            .iter()
            .find(|r| r.method == method && (!method.uses_k() || r.k == k))
    }

    /// Writes `report.json`, `histograms.csv`, `single_feature.csv` and
    /// `troll_distances.csv` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(self).expect("report serializes"),
        )?;

        let mut h = csv::Writer::from_path(dir.join("histograms.csv"))?;
        h.write_record(["method", "k", "bucket", "count"])?;
        for run in &self.runs {
            let k = run.k.map(|k| k.to_string()).unwrap_or_default();
            for (b, c) in run.histogram.iter().enumerate() {
                h.write_record([run.method.as_str(), &k, &b.to_string(), &c.to_string()])?;
            }
        }
        h.flush()?;

        let mut s = csv::Writer::from_path(dir.join("single_feature.csv"))?;
        s.write_record(["feature", "direction", "threshold", "percent"])?;
        for r in &self.single_feature {
            s.write_record([
                format!("f{}", r.rule.feature),
                if r.rule.above { "above" } else { "below" }.to_string(),
                r.rule.threshold.to_string(),
                r.percent.to_string(),
            ])?;
        }
        s.flush()?;

        let mut t = csv::Writer::from_path(dir.join("troll_distances.csv"))?;
        t.write_record(["feature", "mean_abs_distance"])?;
        if let Some(d) = &self.kmeans_troll_distances {
            for i in 0..N_FEATURES {
                t.write_record([format!("f{}", i + 1), d.mean_abs_distance[i].to_string()])?;
            }
        }
        t.flush()?;
        Ok(())
    }
}
