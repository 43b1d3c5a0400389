//! Naive push-forward sampling and the latent-space MCMC sampler.
//!
//! The chain lives in the latent space and targets the pullback density
//! `q̃_Z(z) = q_Z(z) |J_f(z)|⁻¹`. Two kernels are mixed: a Riemannian MALA
//! kernel with metric `G(z) = J_fᵀ J_f`, chosen with probability `p`, and an
//! independent Metropolis–Hastings kernel proposing from `q_Z = N(0, I)`.
//!
//! With `G⁻¹ = J⁻¹ J⁻ᵀ` and the latent score `s̃ = ∇ₓ log q_X(f(z))`, the
//! exact proposal is
//!
//! ```text
//! z' = z + (ε²/2) J⁻¹ s̃ + ε J⁻¹ ξ,        ξ ~ N(0, I)
//! ```
//!
//! and the first-order variant pushes the noise through the flow instead:
//!
//! ```text
//! z' = f⁻¹(f(z) + ε ξ) + (ε²/2) J⁻¹ s̃
//! ```
//!
//! Both modes accept with the Gaussian density of the exact proposal.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{std_normal_log_density, Flow, FlowError, JacobianMatrix, HALF_LN_2PI};
use crate::points::PointSet;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("model output is not finite at the initial state: {0}")]
    Start(FlowError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

pub type Result<T> = std::result::Result<T, SamplerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalMode {
    #[default]
    Approx,
    Exact,
}

impl fmt::Display for ProposalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProposalMode::Approx => "approx",
            ProposalMode::Exact => "exact",
        })
    }
}

impl FromStr for ProposalMode {
    type Err = SamplerError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "approx" => Ok(ProposalMode::Approx),
            "exact" => Ok(ProposalMode::Exact),
            other => Err(SamplerError::Config(format!("unknown proposal mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub eps: f64,
    /// Probability of choosing the local kernel at each step.
    pub p: f64,
    pub n_samples: usize,
    pub burn_in: usize,
    /// Keep every `thin`-th state after burn-in.
    pub thin: usize,
    pub mode: ProposalMode,
    pub seed: u64,
    /// Tune `ε` toward [`TARGET_ACCEPTANCE`] during burn-in.
    pub adapt_step_size: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            eps: 0.1,
            p: 0.9,
            n_samples: 1000,
            burn_in: 1000,
            thin: 1,
            mode: ProposalMode::Approx,
            seed: 0,
            adapt_step_size: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(SamplerError::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(SamplerError::Config(format!("p must be in [0, 1], got {}", self.p)));
        }
        if self.n_samples == 0 || self.thin == 0 {
            return Err(SamplerError::Config("n_samples and thin must be >= 1".into()));
        }
        Ok(())
    }
}

/// Local-kernel acceptance rate aimed at by burn-in adaptation.
pub const TARGET_ACCEPTANCE: f64 = 0.57;

/// Latent point with everything the kernels need.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub z: Vec<f64>,
    pub x: Vec<f64>,
    pub log_det: f64,
    pub score: Vec<f64>,
    pub log_qtilde: f64,
    pub jacobian: JacobianMatrix,
}

impl ChainState {
    /// Fails when any cached quantity is non-finite.
    pub fn new<F: Flow + ?Sized>(flow: &F, z: &[f64]) -> std::result::Result<Self, FlowError> {
        let non_finite = |what: &str| FlowError::Invalid(format!("non-finite {what} at z = {z:?}"));
        if z.iter().any(|v| !v.is_finite()) {
            return Err(non_finite("latent point"));
        }
        let (x, log_det) = flow.forward(z)?;
        let jacobian = flow.jacobian(z)?;
        let score = flow.latent_score(z)?;
        let log_qtilde = std_normal_log_density(z) - log_det;
        if score.iter().any(|v| !v.is_finite()) {
            return Err(non_finite("latent score"));
        }
        if !log_qtilde.is_finite() {
            return Err(non_finite("log density"));
        }
        Ok(Self {
            z: z.to_vec(),
            x,
            log_det,
            score,
            log_qtilde,
            jacobian,
        })
    }
}

fn std_normal_vec<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Local proposal from `state` with noise `xi`. `None` when the candidate
/// is not finite.
pub fn rmmala_propose<F: Flow + ?Sized>(
    flow: &F,
    state: &ChainState,
    eps: f64,
    mode: ProposalMode,
    xi: &[f64],
) -> Option<ChainState> {
    let drift = state.jacobian.solve(&state.score)?;
    let half = 0.5 * eps * eps;
    let z: Vec<f64> = match mode {
        ProposalMode::Exact => {
            let noise = state.jacobian.solve(xi)?;
            (0..state.z.len())
                .map(|i| state.z[i] + half * drift[i] + eps * noise[i])
                .collect()
        }
        ProposalMode::Approx => {
            let moved: Vec<f64> = state.x.iter().zip(xi).map(|(x, n)| x + eps * n).collect();
            let (base, _) = flow.inverse(&moved).ok()?;
            base.iter().zip(&drift).map(|(b, d)| b + half * d).collect()
        }
    };
    ChainState::new(flow, &z).ok()
}

/// `log g(to | from)` for the exact proposal, i.e. the log-pdf of
/// `N(z + (ε²/2) J⁻¹ s̃, ε² J⁻¹ J⁻ᵀ)` at `to_z`.
pub fn rmmala_log_kernel(from: &ChainState, to_z: &[f64], eps: f64) -> f64 {
    let d = from.z.len();
    let step: Vec<f64> = to_z.iter().zip(&from.z).map(|(t, f)| t - f).collect();
    let mapped = from.jacobian.apply(&step);
    let half = 0.5 * eps * eps;
    let sq: f64 = mapped.iter().zip(&from.score).map(|(m, s)| (m - half * s).powi(2)).sum();
    from.log_det - sq / (2.0 * eps * eps) - d as f64 * (HALF_LN_2PI + eps.ln())
}

/// `min(0, log [q̃(to) g(from | to)] - log [q̃(from) g(to | from)])`, with
/// NaN mapped to `-∞`.
pub fn rmmala_log_acceptance(from: &ChainState, to: &ChainState, eps: f64) -> f64 {
    let r = to.log_qtilde + rmmala_log_kernel(to, &from.z, eps) - from.log_qtilde - rmmala_log_kernel(from, &to.z, eps);
    if r.is_nan() {
        f64::NEG_INFINITY
    } else {
        r.min(0.0)
    }
}

/// `min(0, log_det(from) - log_det(to))`.
pub fn imh_log_acceptance(from: &ChainState, to: &ChainState) -> f64 {
    let r = from.log_det - to.log_det;
    if r.is_nan() {
        f64::NEG_INFINITY
    } else {
        r.min(0.0)
    }
}

/// Result of one kernel application.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: ChainState,
    pub accepted: bool,
    /// False when the candidate could not be evaluated.
    pub valid: bool,
    pub log_alpha: f64,
}

fn metropolis<R: Rng + ?Sized>(current: &ChainState, candidate: Option<ChainState>, log_alpha: impl FnOnce(&ChainState) -> f64, rng: &mut R) -> Step {
    let u: f64 = rng.gen();
    match candidate {
        Some(c) => {
            let la = log_alpha(&c);
            if u.ln() < la {
                Step {
                    state: c,
                    accepted: true,
                    valid: true,
                    log_alpha: la,
                }
            } else {
                Step {
                    state: current.clone(),
                    accepted: false,
                    valid: true,
                    log_alpha: la,
                }
            }
        }
        None => Step {
            state: current.clone(),
            accepted: false,
            valid: false,
            log_alpha: f64::NEG_INFINITY,
        },
    }
}

/// One local step. Draws `ξ`, then the acceptance uniform.
pub fn rmmala_step<F: Flow + ?Sized, R: Rng + ?Sized>(flow: &F, state: &ChainState, eps: f64, mode: ProposalMode, rng: &mut R) -> Step {
    let xi = std_normal_vec(state.z.len(), rng);
    let candidate = rmmala_propose(flow, state, eps, mode, &xi);
    metropolis(state, candidate, |c| rmmala_log_acceptance(state, c, eps), rng)
}

/// One independence step with proposal `N(0, I)`.
pub fn imh_step<F: Flow + ?Sized, R: Rng + ?Sized>(flow: &F, state: &ChainState, rng: &mut R) -> Step {
    let z = std_normal_vec(state.z.len(), rng);
    let candidate = ChainState::new(flow, &z).ok();
    metropolis(state, candidate, |c| imh_log_acceptance(state, c), rng)
}

/// Kernel counts over the retained part of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    pub rmmala_proposed: u64,
    pub rmmala_accepted: u64,
    pub imh_proposed: u64,
    pub imh_accepted: u64,
    /// Proposals rejected because the candidate was not finite.
    pub invalid_proposals: u64,
    pub rmmala_acceptance_rate: Option<f64>,
    pub imh_acceptance_rate: Option<f64>,
    /// Step size used after burn-in, one per chain.
    pub step_sizes: Vec<f64>,
}

impl RunDiagnostics {
    fn finish(&mut self) {
        let rate = |a: u64, p: u64| (p > 0).then(|| a as f64 / p as f64);
        self.rmmala_acceptance_rate = rate(self.rmmala_accepted, self.rmmala_proposed);
        self.imh_acceptance_rate = rate(self.imh_accepted, self.imh_proposed);
    }

    /// Sums counts across chains, in order.
    pub fn merge(parts: &[RunDiagnostics]) -> Self {
        let mut out = RunDiagnostics::default();
        for d in parts {
            out.rmmala_proposed += d.rmmala_proposed;
            out.rmmala_accepted += d.rmmala_accepted;
            out.imh_proposed += d.imh_proposed;
            out.imh_accepted += d.imh_accepted;
            out.invalid_proposals += d.invalid_proposals;
            out.step_sizes.extend(&d.step_sizes);
        }
        out.finish();
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRun {
    pub latent: PointSet,
    pub samples: PointSet,
    pub diagnostics: Option<RunDiagnostics>,
}

/// `xᵢ = f(zᵢ)` with `zᵢ ~ N(0, I)` from the naive stream of `seed`.
pub fn naive_sample<F: Flow + ?Sized>(flow: &F, n: usize, seed: u64) -> Result<SampleRun> {
    let mut rng = stream_rng(seed, Stream::Naive);
    let d = flow.dim();
    let mut latent = PointSet::with_capacity(d, n);
    for _ in 0..n {
        latent.push(&std_normal_vec(d, &mut rng));
    }
    let samples = flow.forward_all(&latent)?;
    Ok(SampleRun {
        latent,
        samples,
        diagnostics: None,
    })
}

fn adaptation_gain(t: usize) -> f64 {
    (t as f64 + 10.0).powf(-0.6)
}

/// Runs chain `chain` of the sampler: `burn_in` discarded steps, then
/// `n_samples * thin` steps of which every `thin`-th state is kept.
pub fn nf_sails_chain<F: Flow + ?Sized>(flow: &F, config: &SamplerConfig, chain: u64) -> Result<SampleRun> {
    config.validate()?;
    let mut rng = stream_rng(config.seed, Stream::Chain(chain));
    let d = flow.dim();
    let z0 = std_normal_vec(d, &mut rng);
    let mut state = ChainState::new(flow, &z0).map_err(SamplerError::Start)?;
    let mut eps = config.eps;
    let mut diag = RunDiagnostics::default();
    let mut latent = PointSet::with_capacity(d, config.n_samples);
    let mut samples = PointSet::with_capacity(d, config.n_samples);
    for t in 0..config.burn_in + config.n_samples * config.thin {
        let retained = t >= config.burn_in;
        let kept = retained && (t - config.burn_in + 1) % config.thin == 0;
        let local = rng.gen::<f64>() < config.p;
        let step = if local {
            rmmala_step(flow, &state, eps, config.mode, &mut rng)
        } else {
            imh_step(flow, &state, &mut rng)
        };
        if retained {
            let (proposed, accepted) = if local {
                (&mut diag.rmmala_proposed, &mut diag.rmmala_accepted)
            } else {
                (&mut diag.imh_proposed, &mut diag.imh_accepted)
            };
            *proposed += 1;
            *accepted += u64::from(step.accepted);
            diag.invalid_proposals += u64::from(!step.valid);
        } else if local && config.adapt_step_size {
            let a = step.log_alpha.exp();
            eps *= (adaptation_gain(t) * (a - TARGET_ACCEPTANCE)).exp();
        }
        state = step.state;
        if kept {
            latent.push(&state.z);
            samples.push(&state.x);
        }
    }
    diag.step_sizes.push(eps);
    diag.finish();
    Ok(SampleRun {
        latent,
        samples,
        diagnostics: Some(diag),
    })
}

/// Single-chain sampler run.
pub fn nf_sails<F: Flow + ?Sized>(flow: &F, config: &SamplerConfig) -> Result<SampleRun> {
    nf_sails_chain(flow, config, 0)
}

/// Runs `chains` independent chains concurrently and concatenates them in
/// chain order. Chain `i` retains `n/chains` states, plus one when
/// `i < n % chains`.
pub fn nf_sails_chains<F: Flow + ?Sized>(flow: &F, config: &SamplerConfig, chains: usize) -> Result<SampleRun> {
    config.validate()?;
    if chains == 0 || chains > config.n_samples {
        return Err(SamplerError::Config(format!("chains must be in 1..={}", config.n_samples)));
    }
    let results: Vec<Result<SampleRun>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..chains)
            .map(|i| {
                let mut cfg = config.clone();
                cfg.n_samples = config.n_samples / chains + usize::from(i < config.n_samples % chains);
                scope.spawn(move || nf_sails_chain(flow, &cfg, i as u64))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("chain thread panicked")).collect()
    });
    let d = flow.dim();
    let mut latent = PointSet::with_capacity(d, config.n_samples);
    let mut samples = PointSet::with_capacity(d, config.n_samples);
    let mut diags = Vec::with_capacity(chains);
    for r in results {
        let r = r?;
        latent.extend(&r.latent);
        samples.extend(&r.samples);
        diags.extend(r.diagnostics);
    }
    Ok(SampleRun {
        latent,
        samples,
        diagnostics: Some(RunDiagnostics::merge(&diags)),
    })
}
