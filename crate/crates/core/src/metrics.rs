//! Goodness-of-fit metrics and flow diagnostics.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::flow::{Flow, FlowError};
use crate::points::PointSet;
use crate::rng::{stream_rng, Stream};
use crate::samplers::RunDiagnostics;
use crate::targets::{level_set_threshold, TargetError, TargetSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Distance substituted for coincident points in [`kl_knn`].
pub const KNN_JITTER: f64 = 1e-12;

/// `(1/n) Σ log p(xᵢ)` under the target density.
pub fn mean_log_likelihood(spec: &TargetSpec, samples: &PointSet) -> Result<f64> {
    if samples.is_empty() {
        return Err(MetricError::Input("no samples".into()));
    }
    let lp = spec.log_densities(samples)?;
    Ok(lp.iter().sum::<f64>() / lp.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KlEstimate {
    pub value: f64,
    /// Zero nearest-neighbour distances replaced by [`KNN_JITTER`].
    pub jittered: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance to the `k`-th nearest point of `set`, skipping index
/// `skip`.
fn kth_sq_distance(p: &[f64], set: &PointSet, k: usize, skip: Option<usize>) -> f64 {
    // Ascending list of the k smallest distances seen so far.
    let mut best: Vec<f64> = Vec::with_capacity(k + 1);
    for (j, q) in set.iter().enumerate() {
        if Some(j) == skip {
            continue;
        }
        let d = sq_dist(p, q);
        if best.len() < k || d < best[k - 1] {
            let pos = best.partition_point(|&b| b <= d);
            best.insert(pos, d);
            best.truncate(k);
        }
    }
    best[k - 1]
}

/// k-nearest-neighbour estimate of `KL(p ‖ q)` from samples:
///
/// ```text
/// (d/n) Σᵢ log(νᵢ / ρᵢ) + log(m / (n - 1))
/// ```
///
/// where `ρᵢ` is the distance from `xᵢ ∈ p` to its `k`-th neighbour in `p`
/// and `νᵢ` to its `k`-th neighbour in `q`.
pub fn kl_knn(p: &PointSet, q: &PointSet, k: usize) -> Result<KlEstimate> {
    if k == 0 {
        return Err(MetricError::Input("k_nn must be >= 1".into()));
    }
    if p.len() < k + 1 || q.len() < k + 1 {
        return Err(MetricError::Input(format!("both sample sets need at least {} points", k + 1)));
    }
    if p.dim() != q.dim() {
        return Err(MetricError::Input("sample sets differ in dimension".into()));
    }
    let (n, m, d) = (p.len() as f64, q.len() as f64, p.dim() as f64);
    let mut jittered = 0;
    let mut fix = |sq: f64| {
        if sq > 0.0 {
            sq.sqrt()
        } else {
            jittered += 1;
            KNN_JITTER
        }
    };
    let mut total = 0.0;
    for (i, x) in p.iter().enumerate() {
        let rho = fix(kth_sq_distance(x, p, k, Some(i)));
        let nu = fix(kth_sq_distance(x, q, k, None));
        total += (nu / rho).ln();
    }
    Ok(KlEstimate {
        value: d / n * total + (m / (n - 1.0)).ln(),
        jittered,
    })
}

fn quadrant_fractions(origin: &[f64], set: &PointSet) -> [f64; 4] {
    let mut counts = [0usize; 4];
    for p in set {
        let right = p[0] > origin[0];
        let up = p[1] > origin[1];
        counts[usize::from(right) * 2 + usize::from(up)] += 1;
    }
    let n = set.len() as f64;
    counts.map(|c| c as f64 / n)
}

fn check_2d(a: &PointSet, b: &PointSet) -> Result<()> {
    if a.dim() != 2 || b.dim() != 2 {
        return Err(MetricError::Input("two-dimensional samples required".into()));
    }
    if a.len() < 2 || b.len() < 2 {
        return Err(MetricError::Input("each sample needs at least 2 points".into()));
    }
    Ok(())
}

/// Two-sample Fasano–Franceschini statistic: the largest difference in
/// quadrant mass, over quadrants centred on every point of either sample.
pub fn ks_2d(a: &PointSet, b: &PointSet) -> Result<f64> {
    check_2d(a, b)?;
    let mut d: f64 = 0.0;
    for origin in a.iter().chain(b.iter()) {
        let fa = quadrant_fractions(origin, a);
        let fb = quadrant_fractions(origin, b);
        for q in 0..4 {
            d = d.max((fa[q] - fb[q]).abs());
        }
    }
    Ok(d)
}

/// Kolmogorov distribution tail `Q(λ) = 2 Σ (-1)^{j-1} exp(-2 j² λ²)`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=200 {
        let term = sign * (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn correlation(set: &PointSet) -> f64 {
    let c = set.covariance();
    let denom = (c[0] * c[3]).sqrt();
    if denom > 0.0 {
        c[1] / denom
    } else {
        0.0
    }
}

/// Approximate significance of a [`ks_2d`] value, using the effective size
/// `nm/(n+m)` and the mean correlation of the two samples.
pub fn ks_2d_pvalue(a: &PointSet, b: &PointSet, statistic: f64) -> Result<f64> {
    check_2d(a, b)?;
    let (n, m) = (a.len() as f64, b.len() as f64);
    let ne = (n * m / (n + m)).sqrt();
    let r = 0.5 * (correlation(a) + correlation(b));
    let lambda = ne * statistic / (1.0 + (1.0 - r * r).max(0.0).sqrt() * (0.25 - 0.75 / ne));
    Ok(kolmogorov_q(lambda))
}

/// Two-sample one-dimensional Kolmogorov–Smirnov statistic.
pub fn ks_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::Input("empty sample".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    Ok(d)
}

/// `c(α) sqrt((n+m)/(nm))`, the large-sample two-sample KS critical value at
/// level `alpha`, with `c(α) = sqrt(-ln(α/2) / 2)`.
pub fn ks_critical_value(alpha: f64, n: usize, m: usize) -> f64 {
    let c = (-(alpha / 2.0).ln() / 2.0).sqrt();
    c * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

/// Fraction of samples strictly below the level-set threshold of mass
/// `alpha`, estimated with `m` draws from the level stream of `seed`.
pub fn ood_fraction(spec: &TargetSpec, samples: &PointSet, alpha: f64, m: usize, seed: u64) -> Result<f64> {
    if samples.is_empty() {
        return Err(MetricError::Input("no samples".into()));
    }
    let t = level_set_threshold(spec, alpha, m, seed)?;
    ood_fraction_at(spec, samples, t)
}

/// Fraction of samples with `log p < threshold`.
pub fn ood_fraction_at(spec: &TargetSpec, samples: &PointSet, threshold: f64) -> Result<f64> {
    let lp = spec.log_densities(samples)?;
    Ok(lp.iter().filter(|&&v| v < threshold).count() as f64 / lp.len().max(1) as f64)
}

/// `‖J_f(z)‖_op` at `n_grid` evenly spaced points from `a` to `b` inclusive.
pub fn jacobian_explosion_profile<F: Flow + ?Sized>(flow: &F, a: &[f64], b: &[f64], n_grid: usize) -> Result<Vec<f64>> {
    if n_grid < 2 {
        return Err(MetricError::Input("n_grid must be >= 2".into()));
    }
    (0..n_grid)
        .map(|i| {
            let t = i as f64 / (n_grid - 1) as f64;
            let z: Vec<f64> = a.iter().zip(b).map(|(u, v)| u + t * (v - u)).collect();
            Ok(flow.jacobian(&z)?.op_norm())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExplosionReport {
    pub segment: Vec<f64>,
    pub segment_max: f64,
    pub neighbourhood_median: f64,
    pub ratio: f64,
}

/// Compares the operator norm along the latent segment between the
/// pre-images of two mode centres against its median over pre-images of
/// points drawn around those modes.
pub fn explosion_between_modes<F: Flow + ?Sized>(
    flow: &F,
    centre_a: &[f64],
    centre_b: &[f64],
    neighbourhood: &PointSet,
    n_grid: usize,
) -> Result<ExplosionReport> {
    let (za, _) = flow.inverse(centre_a)?;
    let (zb, _) = flow.inverse(centre_b)?;
    let segment = jacobian_explosion_profile(flow, &za, &zb, n_grid)?;
    let mut norms = neighbourhood
        .iter()
        .map(|x| Ok(flow.jacobian(&flow.inverse(x)?.0)?.op_norm()))
        .collect::<Result<Vec<f64>>>()?;
    if norms.is_empty() {
        return Err(MetricError::Input("empty neighbourhood".into()));
    }
    norms.sort_by(f64::total_cmp);
    let mid = norms.len() / 2;
    let median = if norms.len() % 2 == 1 {
        norms[mid]
    } else {
        0.5 * (norms[mid - 1] + norms[mid])
    };
    let segment_max = segment.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(ExplosionReport {
        segment,
        segment_max,
        neighbourhood_median: median,
        ratio: segment_max / median,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    LogLikelihood,
    Kl,
    Ks,
    Ood,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::LogLikelihood, Metric::Kl, Metric::Ks, Metric::Ood];

    pub fn needs_density(self) -> bool {
        matches!(self, Metric::LogLikelihood | Metric::Ood)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::LogLikelihood => "loglik",
            Metric::Kl => "kl",
            Metric::Ks => "ks",
            Metric::Ood => "ood",
        })
    }
}

impl FromStr for Metric {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| MetricError::Input(format!("unknown metric `{s}` (expected loglik, kl, ks or ood)")))
    }
}

/// Parses a comma-separated metric list; the empty string is the empty list.
pub fn parse_metric_list(s: &str) -> Result<Vec<Metric>> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub k_nn: usize,
    pub alpha: f64,
    /// Monte Carlo size for the level-set threshold.
    pub level_samples: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k_nn: 4,
            alpha: 0.975,
            level_samples: 100_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_log_likelihood: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_knn: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_jittered: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ks_stat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ks_pvalue: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ood_fraction: Option<f64>,
    pub n_samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<RunDiagnostics>,
}

/// Computes `metrics` for `samples`. KL and KS compare against fresh target
/// draws of equal size from the evaluation stream of `options.seed`; KL is
/// `KL(samples ‖ target)`.
pub fn evaluate(
    spec: &TargetSpec,
    samples: &PointSet,
    metrics: &[Metric],
    options: &EvalOptions,
    diagnostics: Option<RunDiagnostics>,
) -> Result<EvalReport> {
    if let Some(m) = metrics.iter().find(|m| m.needs_density()) {
        if !spec.has_density() {
            return Err(MetricError::Target(TargetError::DensityUnavailable(format!("{spec} (metric {m})"))));
        }
    }
    let mut report = EvalReport {
        mean_log_likelihood: None,
        kl_knn: None,
        kl_jittered: None,
        ks_stat: None,
        ks_pvalue: None,
        ood_fraction: None,
        n_samples: samples.len(),
        diagnostics,
    };
    let needs_reference = metrics.iter().any(|m| matches!(m, Metric::Kl | Metric::Ks));
    let reference = needs_reference.then(|| spec.sample_with(samples.len(), &mut stream_rng(options.seed, Stream::Eval)));
    for m in metrics {
        match m {
            Metric::LogLikelihood => report.mean_log_likelihood = Some(mean_log_likelihood(spec, samples)?),
            Metric::Kl => {
                let est = kl_knn(samples, reference.as_ref().expect("drawn"), options.k_nn)?;
                report.kl_knn = Some(est.value);
                report.kl_jittered = Some(est.jittered);
            }
            Metric::Ks => {
                let r = reference.as_ref().expect("drawn");
                let d = ks_2d(samples, r)?;
                report.ks_stat = Some(d);
                report.ks_pvalue = Some(ks_2d_pvalue(samples, r, d)?);
            }
            Metric::Ood => {
                report.ood_fraction = Some(ood_fraction(spec, samples, options.alpha, options.level_samples, options.seed)?)
            }
        }
    }
    Ok(report)
}
