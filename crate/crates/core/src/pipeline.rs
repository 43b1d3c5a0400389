//! Train a flow, sample it naively and with the latent MCMC sampler, and
//! score both sample sets against the target.

use std::fmt::Write as _;

use thiserror::Error;

use crate::flow::FlowModel;
use crate::io::fmt_f64;
use crate::metrics::{evaluate, EvalOptions, EvalReport, Metric, MetricError};
use crate::samplers::{naive_sample, nf_sails, SamplerConfig, SamplerError};
use crate::targets::TargetSpec;
use crate::train::{train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Scores of both samplers on one trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub seed: u64,
    pub final_nll: Option<f64>,
    pub naive: EvalReport,
    pub sails: EvalReport,
}

impl Comparison {
    /// SAILS has lower KS, lower KL and higher mean log-likelihood.
    pub fn sails_wins(&self) -> bool {
        let (n, s) = (&self.naive, &self.sails);
        let lt = |a: Option<f64>, b: Option<f64>| matches!((a, b), (Some(a), Some(b)) if a < b);
        lt(s.ks_stat, n.ks_stat) && lt(s.kl_knn, n.kl_knn) && lt(n.mean_log_likelihood, s.mean_log_likelihood)
    }
}

/// Draws `sampler.n_samples` points each way and evaluates both sets.
pub fn compare_samplers(
    spec: &TargetSpec,
    model: &FlowModel,
    sampler: &SamplerConfig,
    metrics: &[Metric],
    eval: &EvalOptions,
) -> Result<(EvalReport, EvalReport)> {
    let naive = naive_sample(model, sampler.n_samples, sampler.seed)?;
    let sails = nf_sails(model, sampler)?;
    let naive_report = evaluate(spec, &naive.samples, metrics, eval, None)?;
    let sails_report = evaluate(spec, &sails.samples, metrics, eval, sails.diagnostics)?;
    Ok((naive_report, sails_report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReproConfig {
    pub target: TargetSpec,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalOptions,
    pub metrics: Vec<Metric>,
    /// Each seed drives training, sampling and evaluation of one repetition.
    pub seeds: Vec<u64>,
}

/// One repetition: train with `seed`, then compare samplers under `seed`.
pub fn repro_one(config: &ReproConfig, seed: u64) -> Result<Comparison> {
    let train_cfg = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let outcome = train(&config.target, &train_cfg)?;
    let final_nll = outcome.final_nll().ok();
    let sampler = SamplerConfig {
        seed,
        ..config.sampler.clone()
    };
    let eval = EvalOptions {
        seed,
        ..config.eval.clone()
    };
    let (naive, sails) = compare_samplers(&config.target, &outcome.model, &sampler, &config.metrics, &eval)?;
    Ok(Comparison {
        seed,
        final_nll,
        naive,
        sails,
    })
}

pub fn repro(config: &ReproConfig) -> Result<Vec<Comparison>> {
    config.seeds.iter().map(|&s| repro_one(config, s)).collect()
}

fn cell(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// `seed,method,loglik,kl,ks,ood` rows, naive before sails for each seed.
pub fn comparison_csv(rows: &[Comparison]) -> String {
    let mut out = String::from("seed,method,loglik,kl,ks,ood\n");
    for r in rows {
        for (method, rep) in [("naive", &r.naive), ("sails", &r.sails)] {
            let _ = writeln!(
                out,
                "{},{method},{},{},{},{}",
                r.seed,
                cell(rep.mean_log_likelihood),
                cell(rep.kl_knn),
                cell(rep.ks_stat),
                cell(rep.ood_fraction)
            );
        }
    }
    out
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.collect::<Option<_>>()?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Human-readable table of per-method averages over all rows.
pub fn comparison_table(rows: &[Comparison]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<8} {:>10} {:>8} {:>8} {:>8}", "method", "loglik", "kl", "ks", "ood");
    let pick = |f: fn(&Comparison) -> &EvalReport| {
        let reports: Vec<&EvalReport> = rows.iter().map(f).collect();
        [
            mean(reports.iter().map(|r| r.mean_log_likelihood)),
            mean(reports.iter().map(|r| r.kl_knn)),
            mean(reports.iter().map(|r| r.ks_stat)),
            mean(reports.iter().map(|r| r.ood_fraction)),
        ]
    };
    for (name, vals) in [("naive", pick(|c| &c.naive)), ("sails", pick(|c| &c.sails))] {
        let f = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |v| format!("{v:.p$}"));
        let _ = writeln!(
            out,
            "{name:<8} {:>10} {:>8} {:>8} {:>8}",
            f(vals[0], 3),
            f(vals[1], 3),
            f(vals[2], 3),
            f(vals[3], 3)
        );
    }
    let wins = rows.iter().filter(|r| r.sails_wins()).count();
    let _ = writeln!(out, "sails better on all of ks/kl/loglik: {wins}/{}", rows.len());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(ll: f64, kl: f64, ks: f64) -> EvalReport {
        EvalReport {
            mean_log_likelihood: Some(ll),
            kl_knn: Some(kl),
            ks_stat: Some(ks),
            n_samples: 10,
            ..Default::default()
        }
    }

    #[test]
    fn win_needs_all_three_metrics() {
        let mut c = Comparison {
            seed: 1,
            final_nll: None,
            naive: report(-3.0, 0.5, 0.2),
            sails: report(-2.0, 0.1, 0.1),
        };
        assert!(c.sails_wins());
        c.sails.ks_stat = Some(0.2);
        assert!(!c.sails_wins());
        c.sails.ks_stat = None;
        assert!(!c.sails_wins());
    }

    #[test]
    fn csv_and_table_layout() {
        let c = Comparison {
            seed: 7,
            final_nll: None,
            naive: report(-3.0, 0.5, 0.25),
            sails: report(-2.0, 0.125, 0.1),
        };
        let csv = comparison_csv(&[c.clone()]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "seed,method,loglik,kl,ks,ood");
        assert_eq!(lines[1], "7,naive,-3,0.5,0.25,");
        assert_eq!(lines[2], "7,sails,-2,0.125,0.10000000000000001,");
        let table = comparison_table(&[c]);
        assert!(table.contains("1/1"));
        assert!(table.lines().nth(1).unwrap().starts_with("naive"));
    }

    #[test]
    fn short_repro_run_is_deterministic() {
        let config = ReproConfig {
            target: TargetSpec::mixture(2),
            train: TrainConfig {
                epochs: 2,
                dataset_size: 200,
                batch_size: 100,
                ..Default::default()
            },
            sampler: SamplerConfig {
                n_samples: 100,
                burn_in: 20,
                ..Default::default()
            },
            eval: EvalOptions {
                level_samples: 2000,
                ..Default::default()
            },
            metrics: Metric::ALL.to_vec(),
            seeds: vec![3, 4],
        };
        let a = repro(&config).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].seed, 3);
        assert_eq!(a[1].sails.n_samples, 100);
        assert!(a[0].sails.diagnostics.is_some());
        assert!(a[0].naive.diagnostics.is_none());
        assert_eq!(a, repro(&config).unwrap());
    }
}
