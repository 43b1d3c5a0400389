//! Synthetic 2D target distributions.
//!
//! Target strings (used by the CLI and written to `run.cfg`):
//!
//! ```text
//! mixture:k=<int>[,r=<float>][,sigma=<float>]
//! twomoons[:noise=<float>]
//! ```

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::points::PointSet;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TargetError {
    #[error("density unavailable for target `{0}`: it is defined only through its sampler")]
    DensityUnavailable(String),
    #[error("invalid target spec `{spec}`: {reason}")]
    Parse { spec: String, reason: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, TargetError>;

/// `k` isotropic Gaussians with equal weights, means equally spaced on a
/// circle of radius `radius` starting at angle 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianMixtureTarget {
    pub k: usize,
    pub radius: f64,
    pub sigma: f64,
}

impl GaussianMixtureTarget {
    pub const DEFAULT_RADIUS: f64 = 4.0;
    pub const DEFAULT_SIGMA: f64 = 0.3;

    pub fn new(k: usize) -> Self {
        Self {
            k,
            radius: Self::DEFAULT_RADIUS,
            sigma: Self::DEFAULT_SIGMA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(TargetError::InvalidArgument("mixture needs k >= 1".into()));
        }
        if !(self.sigma > 0.0) || !self.radius.is_finite() || self.radius < 0.0 {
            return Err(TargetError::InvalidArgument("mixture needs sigma > 0 and finite r >= 0".into()));
        }
        Ok(())
    }

    pub fn means(&self) -> Vec<[f64; 2]> {
        (0..self.k)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / self.k as f64;
                [self.radius * a.cos(), self.radius * a.sin()]
            })
            .collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let s2 = self.sigma * self.sigma;
        let log_norm = -(self.k as f64).ln() - (2.0 * PI * s2).ln();
        let terms: Vec<f64> = self
            .means()
            .iter()
            .map(|m| {
                let d2 = (x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2);
                log_norm - d2 / (2.0 * s2)
            })
            .collect();
        log_sum_exp(&terms)
    }

    /// Draws `n` points and the component each came from.
    pub fn sample_labeled<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (PointSet, Vec<usize>) {
        let means = self.means();
        let mut points = PointSet::with_capacity(2, n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let c = rng.gen_range(0..self.k);
            let e0: f64 = rng.sample(StandardNormal);
            let e1: f64 = rng.sample(StandardNormal);
            points.push(&[means[c][0] + self.sigma * e0, means[c][1] + self.sigma * e1]);
            labels.push(c);
        }
        (points, labels)
    }
}

/// Two interleaved half circles with isotropic Gaussian noise.
///
/// The upper arc is `r (cos θ, sin θ)` and the lower arc is
/// `(r - r cos θ, r - r sin θ - offset)`, `θ ~ U(0, π)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoMoonsTarget {
    pub noise: f64,
    pub radius: f64,
    pub offset: f64,
}

impl Default for TwoMoonsTarget {
    fn default() -> Self {
        Self {
            noise: 0.05,
            radius: 1.0,
            offset: 0.5,
        }
    }
}

impl TwoMoonsTarget {
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> PointSet {
        let r = self.radius;
        let mut points = PointSet::with_capacity(2, n);
        for _ in 0..n {
            let upper: bool = rng.gen();
            let theta = rng.gen_range(0.0..PI);
            let (x, y) = if upper {
                (r * theta.cos(), r * theta.sin())
            } else {
                (r - r * theta.cos(), r - r * theta.sin() - self.offset)
            };
            let e0: f64 = rng.sample(StandardNormal);
            let e1: f64 = rng.sample(StandardNormal);
            points.push(&[x + self.noise * e0, y + self.noise * e1]);
        }
        points
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetSpec {
    Mixture(GaussianMixtureTarget),
    TwoMoons(TwoMoonsTarget),
}

impl TargetSpec {
    pub fn mixture(k: usize) -> Self {
        TargetSpec::Mixture(GaussianMixtureTarget::new(k))
    }

    pub fn has_density(&self) -> bool {
        matches!(self, TargetSpec::Mixture(_))
    }

    /// Draws `n` i.i.d. points from `rng`.
    pub fn sample_with<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> PointSet {
        match self {
            TargetSpec::Mixture(m) => m.sample_labeled(n, rng).0,
            TargetSpec::TwoMoons(t) => t.sample(n, rng),
        }
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        match self {
            TargetSpec::Mixture(m) => Ok(m.log_density(x)),
            TargetSpec::TwoMoons(_) => Err(TargetError::DensityUnavailable(self.to_string())),
        }
    }

    pub fn log_densities(&self, xs: &PointSet) -> Result<Vec<f64>> {
        xs.iter().map(|x| self.log_density(x)).collect()
    }
}

/// `n` i.i.d. draws from the data stream of `seed`.
pub fn sample_target(spec: &TargetSpec, n: usize, seed: u64) -> Result<PointSet> {
    if n == 0 {
        return Err(TargetError::InvalidArgument("sample count must be >= 1".into()));
    }
    Ok(spec.sample_with(n, &mut stream_rng(seed, Stream::Data)))
}

pub fn target_log_density(spec: &TargetSpec, x: &[f64]) -> Result<f64> {
    spec.log_density(x)
}

/// Log-density threshold `t` of the level set `{log p ≥ t}` holding mass
/// `alpha`, estimated as the empirical `1 - alpha` quantile of `log p` over
/// `m` fresh target draws.
pub fn level_set_threshold(spec: &TargetSpec, alpha: f64, m: usize, seed: u64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(TargetError::InvalidArgument(format!("alpha must be in (0, 1), got {alpha}")));
    }
    if m == 0 {
        return Err(TargetError::InvalidArgument("Monte Carlo size must be >= 1".into()));
    }
    if !spec.has_density() {
        return Err(TargetError::DensityUnavailable(spec.to_string()));
    }
    let draws = spec.sample_with(m, &mut stream_rng(seed, Stream::Level));
    let mut values = spec.log_densities(&draws)?;
    values.sort_by(f64::total_cmp);
    let idx = (((1.0 - alpha) * m as f64).floor() as usize).min(m - 1);
    Ok(values[idx])
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl fmt::Display for TargetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetSpec::Mixture(m) => write!(f, "mixture:k={},r={},sigma={}", m.k, m.radius, m.sigma),
            TargetSpec::TwoMoons(t) => write!(f, "twomoons:noise={}", t.noise),
        }
    }
}

impl FromStr for TargetSpec {
    type Err = TargetError;

    fn from_str(s: &str) -> Result<Self> {
        let err = |reason: String| TargetError::Parse {
            spec: s.to_string(),
            reason,
        };
        let (kind, rest) = match s.trim().split_once(':') {
            Some((k, r)) => (k, Some(r)),
            None => (s.trim(), None),
        };
        let pairs: Vec<(&str, &str)> = match rest {
            Some(r) => r
                .split(',')
                .map(|kv| kv.split_once('=').map(|(k, v)| (k.trim(), v.trim())))
                .collect::<Option<_>>()
                .ok_or_else(|| err("expected comma-separated key=value pairs".into()))?,
            None => Vec::new(),
        };
        let float = |k: &str, v: &str| v.parse::<f64>().map_err(|_| err(format!("`{k}` must be a number, got `{v}`")));
        match kind {
            "mixture" => {
                let mut m = GaussianMixtureTarget::new(0);
                let mut have_k = false;
                for (k, v) in pairs {
                    match k {
                        "k" => {
                            m.k = v.parse().map_err(|_| err(format!("`k` must be an integer, got `{v}`")))?;
                            have_k = true;
                        }
                        "r" => m.radius = float(k, v)?,
                        "sigma" => m.sigma = float(k, v)?,
                        other => return Err(err(format!("unknown mixture key `{other}`"))),
                    }
                }
                if !have_k {
                    return Err(err("mixture requires k=<int>".into()));
                }
                m.validate().map_err(|e| err(e.to_string()))?;
                Ok(TargetSpec::Mixture(m))
            }
            "twomoons" => {
                let mut t = TwoMoonsTarget::default();
                for (k, v) in pairs {
                    match k {
                        "noise" => t.noise = float(k, v)?,
                        other => return Err(err(format!("unknown twomoons key `{other}`"))),
                    }
                }
                if !(t.noise >= 0.0) {
                    return Err(err("noise must be >= 0".into()));
                }
                Ok(TargetSpec::TwoMoons(t))
            }
            other => Err(err(format!("unknown target kind `{other}`"))),
        }
    }
}
