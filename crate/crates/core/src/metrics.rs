//! Embedding-smoothness and swap-quality metrics.
//!
//! Everything here works on plain `f64` vectors so that reports do not
//! depend on the precision the networks were run in.

use std::collections::HashSet;
use std::path::Path;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{self, identity_errors, nuisance_errors, IdentityFactors, Image, NuisanceFactors};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Spherical linear interpolation between unit vectors.
pub fn slerp(a: &[f64], b: &[f64], r: f64) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::dim("slerp", &[a.len()], &[b.len()]));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Contract(format!("slerp ratio {r} outside [0, 1]")));
    }
    let theta = dot(a, b).clamp(-1.0, 1.0).acos();
    if theta > std::f64::consts::PI - 1e-6 {
        return Err(Error::DegenerateInterpolation { angle: theta });
    }
    if theta < 1e-6 {
        return Ok(normalized(
            a.iter().zip(b).map(|(x, y)| (1.0 - r) * x + r * y).collect(),
        ));
    }
    let s = theta.sin();
    let (wa, wb) = (((1.0 - r) * theta).sin() / s, (r * theta).sin() / s);
    Ok(normalized(a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect()))
}

/// Embedding with the id of the record it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub z: Vec<f64>,
    pub record: usize,
}

/// Index and Euclidean distance of the reference closest to `q` (exact scan;
/// ties go to the lowest record id so the result ignores reference order).
pub fn nearest(reference: &[Reference], q: &[f64]) -> Result<(usize, f64)> {
    if reference.is_empty() {
        return Err(Error::Contract("empty reference set".into()));
    }
    let mut best = (0, f64::INFINITY);
    for (i, r) in reference.iter().enumerate() {
        let d = distance(&r.z, q);
        if d < best.1 || (d == best.1 && r.record < reference[best.0].record) {
            best = (i, d);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessReport {
    pub ratio: f64,
    /// Mean of `‖slerp − z_C‖ / ‖z_A − z_B‖`.
    pub per_pair_mean: f64,
    /// Mean of `‖slerp − z_C‖` divided by the mean distance of random pairs.
    pub random_pair_mean: Option<f64>,
    pub per_pair: Vec<f64>,
    /// Unnormalized `‖slerp − z_C‖` per pair.
    pub gaps: Vec<f64>,
    pub skipped: usize,
}

/// Smoothness score: the gap between each Slerp point and the nearest valid
/// embedding in `reference`. `random_pair_norm`, when given, is the mean
/// distance of random embedding pairs used by the second normalization mode.
pub fn d_smooth(
    pairs: &[(Vec<f64>, Vec<f64>)],
    reference: &[Reference],
    r: f64,
    random_pair_norm: Option<f64>,
) -> Result<SmoothnessReport> {
    if reference.is_empty() {
        return Err(Error::Contract("d_smooth needs a non-empty reference set".into()));
    }
    let (mut per_pair, mut raw, mut skipped) = (Vec::new(), Vec::new(), 0);
    for (a, b) in pairs {
        let denom = distance(a, b);
        if denom == 0.0 {
            warn!("d_smooth: skipping a pair with identical endpoints");
            skipped += 1;
            continue;
        }
        let s = slerp(a, b, r)?;
        let (_, gap) = nearest(reference, &s)?;
        per_pair.push(gap / denom);
        raw.push(gap);
    }
    if per_pair.is_empty() {
        return Err(Error::Contract("d_smooth: every pair was degenerate".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(SmoothnessReport {
        ratio: r,
        per_pair_mean: mean(&per_pair),
        random_pair_mean: random_pair_norm.map(|n| mean(&raw) / n),
        per_pair,
        gaps: raw,
        skipped,
    })
}

/// Mean distance between `count` random pairs of distinct embeddings.
pub fn random_pair_mean_distance(embeddings: &[Vec<f64>], count: usize, rng: &mut impl Rng) -> Result<f64> {
    if embeddings.len() < 2 || count == 0 {
        return Err(Error::Contract("random pair normalization needs ≥ 2 embeddings".into()));
    }
    let mut total = 0.0;
    for _ in 0..count {
        let i = rng.gen_range(0..embeddings.len());
        let mut j = rng.gen_range(0..embeddings.len() - 1);
        if j >= i {
            j += 1;
        }
        total += distance(&embeddings[i], &embeddings[j]);
    }
    Ok(total / count as f64)
}

pub const RETRIEVAL_RATIOS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Number of distinct reference records retrieved along the interpolation.
pub fn unique_retrieval_count(a: &[f64], b: &[f64], reference: &[Reference], ratios: &[f64]) -> Result<usize> {
    let mut seen = HashSet::new();
    for &r in ratios {
        let (i, _) = nearest(reference, &slerp(a, b, r)?)?;
        seen.insert(reference[i].record);
    }
    Ok(seen.len())
}

/// The record ids retrieved at each ratio, in order.
pub fn retrieval_chain(
    a: &[f64],
    b: &[f64],
    reference: &[Reference],
    ratios: &[f64],
) -> Result<Vec<(f64, usize, f64)>> {
    ratios
        .iter()
        .map(|&r| {
            let (i, d) = nearest(reference, &slerp(a, b, r)?)?;
            Ok((r, reference[i].record, d))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    Identity,
    Attribute,
}

/// `d_src/(d_src + d_tgt)` for identity metrics, `d_tgt/(d_src + d_tgt)` for
/// attribute metrics; lower is better for both.
pub fn relative_distance(d_swap_src: f64, d_swap_tgt: f64, flavor: Flavor) -> Result<f64> {
    if d_swap_src < 0.0 || d_swap_tgt < 0.0 {
        return Err(Error::Contract("distances must be non-negative".into()));
    }
    let total = d_swap_src + d_swap_tgt;
    if total == 0.0 {
        return Err(Error::UndefinedRatio);
    }
    Ok(match flavor {
        Flavor::Identity => d_swap_src / total,
        Flavor::Attribute => d_swap_tgt / total,
    })
}

/// Probability that a same-identity score beats a different-identity score,
/// counting ties as one half. Computed by ranking in `O(n log n)`.
pub fn verification_auc(same: &[f64], diff: &[f64]) -> Result<f64> {
    if same.is_empty() || diff.is_empty() {
        return Err(Error::Contract("verification_auc needs non-empty score lists".into()));
    }
    let mut all: Vec<(f64, bool)> = same
        .iter()
        .map(|&s| (s, true))
        .chain(diff.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // midranks over tie groups
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += all[i..=j].iter().filter(|x| x.1).count() as f64 * mid;
        i = j + 1;
    }
    let (m, n) = (same.len() as f64, diff.len() as f64);
    Ok((rank_sum - m * (m + 1.0) / 2.0) / (m * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    LowerBetter,
    HigherBetter,
}

impl Direction {
    pub fn arrow(self) -> &'static str {
        match self {
            Direction::LowerBetter => "↓",
            Direction::HigherBetter => "↑",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub name: String,
    pub direction: Direction,
    pub values: Vec<f64>,
}

impl MetricRecord {
    pub fn new(name: &str, direction: Direction, values: Vec<f64>) -> Self {
        Self {
            name: name.to_string(),
            direction,
            values,
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        let n = self.values.len().max(1) as f64;
        (self.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallScore {
    pub scores: Vec<f64>,
    /// Metrics with zero spread across models; they contribute 0.
    pub flat_metrics: Vec<String>,
}

/// Per-model mean of z-scored metrics, with higher-is-better metrics
/// negated so that a lower overall score is better.
/// `table[k]` is `(name, direction, value per model)`.
pub fn overall_score(table: &[(String, Direction, Vec<f64>)]) -> Result<OverallScore> {
    let models = table.first().map(|t| t.2.len()).unwrap_or(0);
    if models < 2 {
        return Err(Error::Contract("overall_score needs at least 2 models".into()));
    }
    let mut scores = vec![0.0; models];
    let mut flat = Vec::new();
    for (name, dir, vals) in table {
        if vals.len() != models {
            return Err(Error::Contract(format!(
                "metric `{name}` has {} values for {models} models",
                vals.len()
            )));
        }
        let mean = vals.iter().sum::<f64>() / models as f64;
        let sd = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / models as f64).sqrt();
        if sd <= 1e-12 * mean.abs().max(1.0) {
            flat.push(name.clone());
            continue;
        }
        let sign = if *dir == Direction::HigherBetter { -1.0 } else { 1.0 };
        for (s, v) in scores.iter_mut().zip(vals) {
            *s += sign * (v - mean) / sd;
        }
    }
    let k = table.len() as f64;
    Ok(OverallScore {
        scores: scores.into_iter().map(|s| s / k).collect(),
        flat_metrics: flat,
    })
}

/// One generated swap with the ground truth of its inputs.
#[derive(Debug, Clone)]
pub struct SwapSample {
    pub swap: Image,
    pub source: IdentityFactors,
    pub target: IdentityFactors,
    pub source_nuisance: NuisanceFactors,
    pub target_nuisance: NuisanceFactors,
}

/// Mean identity-field error between an estimate and a factor set, as a
/// fraction of range, over the fields the estimate determines.
fn identity_gap(est: &synth::FactorEstimate, truth: &IdentityFactors) -> f64 {
    let e: Vec<f64> = identity_errors(est, truth).iter().flatten().copied().collect();
    e.iter().sum::<f64>() / e.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEvaluation {
    pub records: Vec<MetricRecord>,
    pub evaluated: usize,
    pub excluded: usize,
    pub exclusion_rate: f64,
}

impl ProbeEvaluation {
    pub fn mean(&self, name: &str) -> Option<f64> {
        self.records.iter().find(|r| r.name == name).map(|r| r.mean())
    }
}

/// Probe-based identity and attribute metrics of swap outputs. Identity
/// metrics compare the probed factors with the source identity; attribute
/// metrics compare the probed pose, expression and background with the
/// target's ground truth. `_R` variants divide by the summed distance to
/// source and target. Samples the probe cannot read are excluded; when
/// none is readable the evaluation carries no records.
pub fn swap_identity_probe_eval(samples: &[SwapSample]) -> Result<ProbeEvaluation> {
    if samples.is_empty() {
        return Err(Error::Contract("no swap samples to evaluate".into()));
    }
    let mut id_src = Vec::new();
    let mut id_rel = Vec::new();
    let (mut pose, mut expr, mut bg) = (Vec::new(), Vec::new(), Vec::new());
    let (mut pose_rel, mut expr_rel) = (Vec::new(), Vec::new());
    let mut excluded = 0;
    for s in samples {
        let res = synth::probe(&s.swap.clamped());
        let Some(est) = res.confident() else {
            excluded += 1;
            continue;
        };
        let d_src = identity_gap(est, &s.source);
        let d_tgt = identity_gap(est, &s.target);
        id_src.push(d_src);
        id_rel.push(relative_distance(d_src, d_tgt, Flavor::Identity).unwrap_or(0.5));
        let nu = nuisance_errors(est, &s.target_nuisance);
        let nu_src = nuisance_errors(est, &s.source_nuisance);
        let (p_t, e_t) = (nu[0].unwrap_or(1.0), nu[2].unwrap_or(1.0));
        let (p_s, e_s) = (nu_src[0].unwrap_or(1.0), nu_src[2].unwrap_or(1.0));
        pose.push(p_t);
        expr.push(e_t);
        bg.push(nu[3].unwrap_or(0.5));
        pose_rel.push(relative_distance(p_s, p_t, Flavor::Attribute).unwrap_or(0.5));
        expr_rel.push(relative_distance(e_s, e_t, Flavor::Attribute).unwrap_or(0.5));
    }
    let evaluated = samples.len() - excluded;
    if evaluated == 0 {
        return Ok(ProbeEvaluation {
            records: Vec::new(),
            evaluated,
            excluded,
            exclusion_rate: 1.0,
        });
    }
    Ok(ProbeEvaluation {
        records: vec![
            MetricRecord::new("identity_error", Direction::LowerBetter, id_src),
            MetricRecord::new("identity_error_R", Direction::LowerBetter, id_rel),
            MetricRecord::new("pose_error", Direction::LowerBetter, pose),
            MetricRecord::new("pose_error_R", Direction::LowerBetter, pose_rel),
            MetricRecord::new("expression_error", Direction::LowerBetter, expr),
            MetricRecord::new("expression_error_R", Direction::LowerBetter, expr_rel),
            MetricRecord::new("background_error", Direction::LowerBetter, bg),
        ],
        evaluated,
        excluded,
        exclusion_rate: excluded as f64 / samples.len() as f64,
    })
}

/// Named metric values for one or more models.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub models: Vec<String>,
    /// `records[m]` holds the metrics of `models[m]`.
    pub records: Vec<Vec<MetricRecord>>,
    pub overall: Option<OverallScore>,
    pub notes: Vec<String>,
}

impl MetricsReport {
    pub fn add_model(&mut self, name: &str, records: Vec<MetricRecord>) {
        self.models.push(name.to_string());
        self.records.push(records);
    }

    /// Fills `overall` from the metrics every model has, or leaves a note
    /// when there are fewer than two models.
    pub fn compute_overall(&mut self) -> Result<()> {
        if self.models.len() < 2 {
            self.overall = None;
            self.notes
                .push("overall score omitted: needs at least two models".into());
            return Ok(());
        }
        let names: Vec<(String, Direction)> = self.records[0].iter().map(|r| (r.name.clone(), r.direction)).collect();
        let mut table = Vec::new();
        for (name, dir) in names {
            let vals: Option<Vec<f64>> = self
                .records
                .iter()
                .map(|recs| recs.iter().find(|r| r.name == name).map(|r| r.mean()))
                .collect();
            if let Some(v) = vals {
                table.push((name, dir, v));
            }
        }
        self.overall = Some(overall_score(&table)?);
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, serde_json::to_vec_pretty(self)?)?)
    }

    /// One row per (model, metric): mean, std, count and direction arrow.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["model", "metric", "direction", "mean", "std", "count"])?;
        for (m, recs) in self.models.iter().zip(&self.records) {
            for r in recs {
                w.write_record([
                    m.as_str(),
                    r.name.as_str(),
                    r.direction.arrow(),
                    &format!("{:.9}", r.mean()),
                    &format!("{:.9}", r.std()),
                    &r.values.len().to_string(),
                ])?;
            }
        }
        if let Some(o) = &self.overall {
            for (m, s) in self.models.iter().zip(&o.scores) {
                w.write_record([
                    m.as_str(),
                    "overall",
                    Direction::LowerBetter.arrow(),
                    &format!("{s:.9}"),
                    "",
                    "",
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
