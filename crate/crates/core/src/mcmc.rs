//! Posterior sampling of transport parameters by adaptive random-walk
//! Metropolis, plus chain diagnostics.
//!
//! The engine is generic over the target density and is reused by the
//! outcome models. Transport parameters are sampled on the log scale with
//! the Jacobian included, so positivity can never be violated by an accepted
//! draw. Proposal adaptation (empirical covariance plus a global scale tuned
//! toward the target acceptance rate) runs during burn-in only and is frozen
//! afterwards; the frozen proposal makes the post-burn-in kernel a fixed
//! Metropolis kernel.

use crate::error::{Error, Result};
use crate::rng::{stream, stream_rng};
use crate::transport::{TransportData, TransportParams, PARAM_NAMES};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::fmt::Write as _;
use std::path::Path;

// ---------------------------------------------------------------------------
// Priors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PriorFamily {
    HalfNormal { scale: f64 },
    Exponential { rate: f64 },
}

impl PriorFamily {
    pub fn log_density(&self, x: f64) -> f64 {
        if x < 0.0 || !x.is_finite() {
            return f64::NEG_INFINITY;
        }
        match *self {
            PriorFamily::HalfNormal { scale } => {
                let z = x / scale;
                (2.0f64).ln() - scale.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
                    - 0.5 * z * z
            }
            PriorFamily::Exponential { rate } => rate.ln() - rate * x,
        }
    }

    pub fn median(&self) -> f64 {
        match *self {
            // half-normal median = scale · Φ⁻¹(3/4)
            PriorFamily::HalfNormal { scale } => {
                scale * Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.75)
            }
            PriorFamily::Exponential { rate } => (2.0f64).ln() / rate,
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            PriorFamily::HalfNormal { scale } => {
                scale * (2.0 / std::f64::consts::PI).sqrt()
            }
            PriorFamily::Exponential { rate } => 1.0 / rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = match *self {
            PriorFamily::HalfNormal { scale } => scale,
            PriorFamily::Exponential { rate } => rate,
        };
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Validation(format!(
                "prior hyperparameter must be positive, got {v}"
            )));
        }
        Ok(())
    }
}

/// One prior per transport parameter, in [`PARAM_NAMES`] order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub per_param: [PriorFamily; 6],
}

impl Default for PriorSpec {
    /// Weakly informative defaults for rates of order one: half-normal on
    /// everything except the background level, which gets an exponential.
    fn default() -> Self {
        Self {
            per_param: [
                PriorFamily::HalfNormal { scale: 10.0 },
                PriorFamily::HalfNormal { scale: 10.0 },
                PriorFamily::HalfNormal { scale: 10.0 },
                PriorFamily::HalfNormal { scale: 10.0 },
                PriorFamily::HalfNormal { scale: 10.0 },
                PriorFamily::Exponential { rate: 0.5 },
            ],
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        for f in &self.per_param {
            f.validate()?;
        }
        Ok(())
    }

    pub fn medians(&self) -> [f64; 6] {
        let mut m = [0.0; 6];
        for (i, f) in self.per_param.iter().enumerate() {
            m[i] = f.median();
        }
        m
    }
}

pub fn log_prior(params: &TransportParams, spec: &PriorSpec) -> f64 {
    let x = params.to_array();
    let mut total = 0.0;
    for i in 0..6 {
        total += spec.per_param[i].log_density(x[i]);
    }
    total
}

// ---------------------------------------------------------------------------
// Generic adaptive Metropolis engine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub n_iter: usize,
    pub n_burn: usize,
    pub target_accept: f64,
    /// initial global proposal scale; 0 selects 2.38/sqrt(dim)
    pub init_step: f64,
    /// greedy uphill proposals taken before the chain proper, for start
    /// points far from the typical set; 0 starts the chain at `init`
    pub n_descent: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            n_iter: 4000,
            n_burn: 2000,
            target_accept: 0.234,
            init_step: 0.0,
            n_descent: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter <= self.n_burn {
            return Err(Error::Argument(format!(
                "n_iter ({}) must exceed n_burn ({})",
                self.n_iter, self.n_burn
            )));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Argument(format!(
                "target_accept must lie in (0,1), got {}",
                self.target_accept
            )));
        }
        Ok(())
    }
}

/// Output of one engine run. Draw vectors live in whatever space the target
/// was parameterized in; transformations are the caller's business.
#[derive(Debug, Clone)]
pub struct EngineRun {
    pub draws: Vec<Vec<f64>>,
    pub log_density: Vec<f64>,
    pub acceptance_rate: f64,
    /// full proposal covariance (row-major d×d) at the moment adaptation froze
    pub proposal_cov_at_freeze: Vec<f64>,
    /// the same matrix recomputed from live state at the end of the run;
    /// equality certifies that nothing adapted after burn-in
    pub proposal_cov_final: Vec<f64>,
}

struct RunningCov {
    count: usize,
    mean: Vec<f64>,
    scatter: Vec<f64>,
}

impl RunningCov {
    fn new(d: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; d],
            scatter: vec![0.0; d * d],
        }
    }

    fn update(&mut self, x: &[f64]) {
        let d = self.mean.len();
        self.count += 1;
        let n = self.count as f64;
        let dx: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        for i in 0..d {
            self.mean[i] += dx[i] / n;
        }
        for i in 0..d {
            let dx2_i = x[i] - self.mean[i];
            for j in 0..d {
                self.scatter[i * d + j] += dx[j] * dx2_i;
            }
        }
    }

    fn covariance(&self) -> Option<Vec<f64>> {
        if self.count < 2 {
            return None;
        }
        let denom = (self.count - 1) as f64;
        Some(self.scatter.iter().map(|s| s / denom).collect())
    }
}

fn proposal_covariance(shape: &[f64], d: usize, log_scale: f64) -> Vec<f64> {
    let s2 = (2.0 * log_scale).exp();
    let mut out = vec![0.0; d * d];
    for i in 0..d * d {
        out[i] = s2 * shape[i];
    }
    out
}

fn shape_cholesky(shape: &[f64], d: usize) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    DMatrix::from_row_slice(d, d, shape).cholesky()
}

/// Iterations at which the covariance accumulator restarts during burn-in.
/// Windows double in length so early transient history is discarded while
/// the final window, which sets the frozen shape, averages over at least
/// the last 40% of the burn phase.
fn covariance_reset_points(n_burn: usize, d: usize) -> Vec<usize> {
    let base = (n_burn / 20).max(100).max(4 * d + 20);
    let mut resets = Vec::new();
    let mut next = base;
    let mut len = base;
    while 5 * next <= 3 * n_burn {
        resets.push(next);
        next += len;
        len *= 2;
    }
    resets
}

/// Adaptive random-walk Metropolis on R^d. The target may return -inf for
/// out-of-support points; a non-finite value at the start point is an
/// initialization error.
pub fn adaptive_metropolis<F>(
    log_target: F,
    init: &[f64],
    config: &EngineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EngineRun>
where
    F: Fn(&[f64]) -> f64,
{
    config.validate()?;
    let d = init.len();
    assert!(d > 0, "empty parameter vector");
    let mut x = init.to_vec();
    let mut lp = log_target(&x);
    if !lp.is_finite() {
        return Err(Error::Initialization(format!(
            "log target is {lp} at the start point {init:?}; choose a different start"
        )));
    }

    // cycle through coarse-to-fine step sizes so the settling phase can both
    // cross plateaus and refine once near the mode
    const DESCENT_STEPS: [f64; 3] = [1.0, 0.3, 0.1];
    for k in 0..config.n_descent {
        let sd = DESCENT_STEPS[k % DESCENT_STEPS.len()];
        let proposal: Vec<f64> = x
            .iter()
            .map(|v| v + sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lp_new = log_target(&proposal);
        if lp_new > lp {
            x = proposal;
            lp = lp_new;
        }
    }

    let mut log_scale = if config.init_step > 0.0 {
        config.init_step.ln()
    } else {
        (2.38 / (d as f64).sqrt()).ln()
    };
    // proposal shape: identity until the history supports an estimate
    let mut shape: Vec<f64> = {
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            m[i * d + i] = 1.0;
        }
        m
    };
    let mut chol = shape_cholesky(&shape, d).expect("identity is positive definite");
    let mut hist = RunningCov::new(d);
    hist.update(&x);
    let resets = covariance_reset_points(config.n_burn, d);
    let mut next_reset = 0usize;

    let n_keep = config.n_iter - config.n_burn;
    let mut draws = Vec::with_capacity(n_keep);
    let mut log_density = Vec::with_capacity(n_keep);
    let mut accepted_post = 0usize;
    let mut cov_at_freeze = Vec::new();

    for t in 0..config.n_iter {
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let step = chol.l() * DVector::from_vec(z);
        let scale = log_scale.exp();
        let proposal: Vec<f64> = (0..d).map(|i| x[i] + scale * step[i]).collect();
        let lp_new = log_target(&proposal);
        let log_ratio = lp_new - lp;
        let alpha = if log_ratio >= 0.0 {
            1.0
        } else if lp_new == f64::NEG_INFINITY {
            0.0
        } else {
            log_ratio.exp()
        };
        let accept = alpha > 0.0 && rng.gen::<f64>() < alpha;
        if accept {
            x = proposal;
            lp = lp_new;
        }

        if t < config.n_burn {
            let gamma = (t as f64 + 1.0).powf(-0.7);
            log_scale += gamma * (alpha - config.target_accept);
            if next_reset < resets.len() && t == resets[next_reset] {
                hist = RunningCov::new(d);
                next_reset += 1;
            }
            hist.update(&x);
            if hist.count > 2 * d + 10 {
                if let Some(cov) = hist.covariance() {
                    // a zero-trace covariance means the chain has not moved
                    // yet; swapping it in would freeze the sampler at x
                    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
                    if trace > 0.0 {
                        let mut candidate = cov;
                        let jitter = 1e-10 * trace / d as f64;
                        for i in 0..d {
                            candidate[i * d + i] += jitter;
                        }
                        if let Some(c) = shape_cholesky(&candidate, d) {
                            shape = candidate;
                            chol = c;
                        }
                    }
                }
            }
            if t + 1 == config.n_burn {
                cov_at_freeze = proposal_covariance(&shape, d, log_scale);
            }
        } else {
            if accept {
                accepted_post += 1;
            }
            draws.push(x.clone());
            log_density.push(lp);
        }
    }
    if config.n_burn == 0 {
        cov_at_freeze = proposal_covariance(&shape, d, log_scale);
    }
    let cov_final = proposal_covariance(&shape, d, log_scale);

    Ok(EngineRun {
        draws,
        log_density,
        acceptance_rate: accepted_post as f64 / n_keep as f64,
        proposal_cov_at_freeze: cov_at_freeze,
        proposal_cov_final: cov_final,
    })
}

// ---------------------------------------------------------------------------
// Transport-parameter chains
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub n_iter: usize,
    pub n_burn: usize,
    pub seed: u64,
    pub n_chains: usize,
    pub target_accept: f64,
    /// replaces the likelihood with a constant so the sampler targets the
    /// prior; used for prior-recovery checks
    pub likelihood_off: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_iter: 4000,
            n_burn: 2000,
            seed: 0,
            n_chains: 2,
            target_accept: 0.234,
            likelihood_off: false,
        }
    }
}

/// Posterior draws from one chain, post-burn-in, back on the natural scale.
#[derive(Debug, Clone)]
pub struct Chain {
    pub draws: Vec<TransportParams>,
    pub log_posterior: Vec<f64>,
    pub acceptance_rate: f64,
    pub seed: u64,
    pub proposal_cov_at_freeze: Vec<f64>,
    pub proposal_cov_final: Vec<f64>,
}

fn transport_log_posterior(
    data: &TransportData,
    prior: &PriorSpec,
    likelihood_off: bool,
    log_params: &[f64],
) -> f64 {
    let mut natural = [0.0; 6];
    for i in 0..6 {
        natural[i] = log_params[i].exp();
    }
    let params = TransportParams::from_array(natural);
    let mut lp = log_prior(&params, prior);
    if !lp.is_finite() {
        return f64::NEG_INFINITY;
    }
    // Jacobian of x = exp(w)
    lp += log_params.iter().sum::<f64>();
    if !likelihood_off {
        match data.log_likelihood(&params) {
            Ok(ll) => lp += ll,
            Err(_) => return f64::NEG_INFINITY,
        }
    }
    if lp.is_nan() {
        f64::NEG_INFINITY
    } else {
        lp
    }
}

/// Runs one chain with the given chain index (seeds are derived from the
/// master seed and the index).
pub fn run_chain(
    data: &TransportData,
    prior: &PriorSpec,
    config: &McmcConfig,
    chain_index: usize,
) -> Result<Chain> {
    prior.validate()?;
    let medians = prior.medians();
    let init: Vec<f64> = medians.iter().map(|m| m.ln()).collect();
    let init_lp = transport_log_posterior(data, prior, config.likelihood_off, &init);
    if !init_lp.is_finite() {
        return Err(Error::Initialization(format!(
            "log posterior is {init_lp} at the prior medians {medians:?}; \
             rescale the priors or supply a different start point"
        )));
    }
    let engine = EngineConfig {
        n_iter: config.n_iter,
        n_burn: config.n_burn,
        target_accept: config.target_accept,
        init_step: 0.0,
        n_descent: 600,
    };
    let chain_seed = stream::MCMC_CHAIN_BASE + chain_index as u64;
    let mut rng = stream_rng(config.seed, chain_seed);
    // overdispersed starts: jitter each chain away from the shared medians
    // unless that lands outside the support
    let jittered: Vec<f64> = init
        .iter()
        .map(|v| v + 0.5 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let start = if transport_log_posterior(data, prior, config.likelihood_off, &jittered)
        .is_finite()
    {
        jittered
    } else {
        init
    };
    let run = adaptive_metropolis(
        |w| transport_log_posterior(data, prior, config.likelihood_off, w),
        &start,
        &engine,
        &mut rng,
    )?;
    let draws: Vec<TransportParams> = run
        .draws
        .iter()
        .map(|w| {
            let mut a = [0.0; 6];
            for i in 0..6 {
                a[i] = w[i].exp();
            }
            TransportParams::from_array(a)
        })
        .collect();
    Ok(Chain {
        draws,
        log_posterior: run.log_density,
        acceptance_rate: run.acceptance_rate,
        seed: config.seed,
        proposal_cov_at_freeze: run.proposal_cov_at_freeze,
        proposal_cov_final: run.proposal_cov_final,
    })
}

/// Runs `config.n_chains` chains in parallel.
pub fn run_chains(
    data: &TransportData,
    prior: &PriorSpec,
    config: &McmcConfig,
) -> Result<Vec<Chain>> {
    if config.n_chains == 0 {
        return Err(Error::Argument("n_chains must be at least 1".into()));
    }
    (0..config.n_chains)
        .into_par_iter()
        .map(|c| run_chain(data, prior, config, c))
        .collect()
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    /// effective sample size per parameter; NaN when the draws are degenerate
    pub ess: Vec<f64>,
    /// rank-normalized split R-hat per parameter; None with a single chain
    /// or degenerate draws
    pub rhat: Vec<Option<f64>>,
    pub accept: Vec<f64>,
    pub single_chain: bool,
    pub degenerate: Vec<bool>,
}

/// Blom-offset rank-normalization of pooled draws, preserving chain layout.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = chains.iter().map(|c| c.len()).sum();
    let mut indexed: Vec<(f64, usize)> = Vec::with_capacity(total);
    let mut offsets = Vec::with_capacity(chains.len());
    let mut offset = 0;
    for c in chains {
        offsets.push(offset);
        for (k, &v) in c.iter().enumerate() {
            indexed.push((v, offset + k));
        }
        offset += c.len();
    }
    indexed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut ranks = vec![0.0; total];
    let mut i = 0;
    while i < total {
        let mut j = i;
        while j + 1 < total && indexed[j + 1].0 == indexed[i].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for item in indexed.iter().take(j + 1).skip(i) {
            ranks[item.1] = avg_rank;
        }
        i = j + 1;
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let s = total as f64;
    let mut out = Vec::with_capacity(chains.len());
    for (ci, c) in chains.iter().enumerate() {
        let mut z = Vec::with_capacity(c.len());
        for k in 0..c.len() {
            let r = ranks[offsets[ci] + k];
            z.push(normal.inverse_cdf((r - 0.375) / (s + 0.25)));
        }
        out.push(z);
    }
    out
}

fn split_in_half(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Biased (divisor n) autocovariance at every lag.
fn autocovariance(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let m = mean(xs);
    let centered: Vec<f64> = xs.iter().map(|x| x - m).collect();
    (0..n)
        .map(|t| {
            let mut acc = 0.0;
            for k in 0..n - t {
                acc += centered[k] * centered[k + t];
            }
            acc / n as f64
        })
        .collect()
}

/// Split R-hat and Geyer initial-monotone ESS for one scalar series across
/// chains. Returns (ess, rhat, degenerate); rhat is None when only one split
/// pair exists or the series is constant.
pub fn scalar_diagnostics(chains: &[Vec<f64>]) -> (f64, Option<f64>, bool) {
    let split: Vec<Vec<f64>> = split_in_half(chains);
    let n = split.iter().map(|c| c.len()).min().unwrap_or(0);
    if n < 2 {
        return (f64::NAN, None, true);
    }
    let split: Vec<Vec<f64>> = split.iter().map(|c| c[..n].to_vec()).collect();
    let z = rank_normalize(&split);

    let m_chains = z.len();
    let w = z.iter().map(|c| sample_var(c)).sum::<f64>() / m_chains as f64;
    if !(w > 0.0) {
        return (f64::NAN, None, true);
    }
    let chain_means: Vec<f64> = z.iter().map(|c| mean(c)).collect();
    let var_means = if m_chains > 1 {
        sample_var(&chain_means)
    } else {
        0.0
    };
    let n_f = n as f64;
    let var_plus = (n_f - 1.0) / n_f * w + var_means;
    let rhat = if m_chains > 1 {
        Some((var_plus / w).sqrt())
    } else {
        None
    };

    // combined autocorrelations (Geyer initial monotone sequence)
    let acov: Vec<Vec<f64>> = z.iter().map(|c| autocovariance(c)).collect();
    let mut rho = Vec::with_capacity(n);
    for t in 0..n {
        let mean_acov = acov.iter().map(|a| a[t]).sum::<f64>() / m_chains as f64;
        rho.push(1.0 - (w - mean_acov) / var_plus);
    }
    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let pair = rho[t] + rho[t + 1];
        if pair <= 0.0 {
            break;
        }
        let capped = pair.min(prev_pair);
        tau += 2.0 * capped;
        prev_pair = capped;
        t += 2;
    }
    let tau = tau.max(1.0 / (m_chains as f64 * n_f));
    let ess = m_chains as f64 * n_f / tau;
    (ess, rhat, false)
}

/// Chain diagnostics over transport-parameter chains. Requires equal-length
/// post-burn-in chains.
pub fn diagnostics(chains: &[Chain]) -> Result<Diagnostics> {
    if chains.is_empty() {
        return Err(Error::Argument("diagnostics need at least one chain".into()));
    }
    let len = chains[0].draws.len();
    if len == 0 || chains.iter().any(|c| c.draws.len() != len) {
        return Err(Error::Argument(
            "diagnostics need equal-length nonempty chains".into(),
        ));
    }
    let single_chain = chains.len() == 1;
    let mut ess = Vec::with_capacity(6);
    let mut rhat = Vec::with_capacity(6);
    let mut degenerate = Vec::with_capacity(6);
    for p in 0..6 {
        let series: Vec<Vec<f64>> = chains
            .iter()
            .map(|c| c.draws.iter().map(|d| d.to_array()[p]).collect())
            .collect();
        let (e, r, dgn) = scalar_diagnostics(&series);
        ess.push(e);
        rhat.push(if single_chain { None } else { r });
        degenerate.push(dgn);
    }
    Ok(Diagnostics {
        ess,
        rhat,
        accept: chains.iter().map(|c| c.acceptance_rate).collect(),
        single_chain,
        degenerate,
    })
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// One row per draw: the six parameters then the log posterior.
pub fn format_draws_csv(draws: &[TransportParams], log_posterior: &[f64]) -> String {
    let mut out = String::new();
    out.push_str(&PARAM_NAMES.join(","));
    out.push_str(",log_posterior\n");
    for (d, lp) in draws.iter().zip(log_posterior) {
        let a = d.to_array();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            a[0], a[1], a[2], a[3], a[4], a[5], lp
        );
    }
    out
}

pub fn write_draws_csv(
    draws: &[TransportParams],
    log_posterior: &[f64],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path_str = path.as_ref().display().to_string();
    std::fs::write(path.as_ref(), format_draws_csv(draws, log_posterior))
        .map_err(|e| Error::io(&path_str, e))
}

pub fn read_draws_csv(path: impl AsRef<Path>) -> Result<(Vec<TransportParams>, Vec<f64>)> {
    let path_str = path.as_ref().display().to_string();
    let mut reader = csv::Reader::from_path(path.as_ref())
        .map_err(|e| Error::Validation(format!("cannot open draws file {path_str}: {e}")))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(&path_str, 1, e.to_string()))?
        .clone();
    let mut expected: Vec<&str> = PARAM_NAMES.to_vec();
    expected.push("log_posterior");
    let actual: Vec<&str> = headers.iter().collect();
    if actual != expected {
        return Err(Error::parse(
            &path_str,
            1,
            format!(
                "expected header `{}`, got `{}`",
                expected.join(","),
                actual.join(",")
            ),
        ));
    }
    let mut draws = Vec::new();
    let mut log_post = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let lineno = idx + 2;
        let record = record.map_err(|e| Error::parse(&path_str, lineno, e.to_string()))?;
        let mut vals = [0.0; 7];
        for (i, v) in vals.iter_mut().enumerate() {
            let raw = record.get(i).ok_or_else(|| {
                Error::parse(&path_str, lineno, format!("missing column {i}"))
            })?;
            *v = raw.parse().map_err(|_| {
                Error::parse(&path_str, lineno, format!("`{raw}` is not a number"))
            })?;
        }
        let params = TransportParams::from_array([
            vals[0], vals[1], vals[2], vals[3], vals[4], vals[5],
        ]);
        params.validate().map_err(|e| {
            Error::Validation(format!("{path_str} line {lineno}: {e}"))
        })?;
        draws.push(params);
        log_post.push(vals[6]);
    }
    if draws.is_empty() {
        return Err(Error::Validation(format!("{path_str} contains no draws")));
    }
    Ok((draws, log_post))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Field, RasterGrid};
    use crate::transport::CovarianceSettings;

    fn tiny_data() -> TransportData {
        let g = RasterGrid::new(4, 3, 1.0, 0.0, 0.0, -9999.0).unwrap();
        let wind_u = Field::constant(g.clone(), 0.3);
        let wind_v = Field::constant(g.clone(), -0.2);
        let mut sources = Field::zeros(g.clone());
        sources.values[5] = 4.0;
        let truth = TransportParams {
            diffusion: 1.0,
            advection: 0.8,
            oxidation: 0.5,
            deposition: 0.7,
            noise_var: 0.05,
            background: 1.0,
        };
        let ops = crate::transport::assemble_operators(&g, &wind_u, &wind_v, &truth)
            .unwrap()
            .factor()
            .unwrap();
        let observed = ops
            .sample_observation(&sources, &truth, &mut stream_rng(7, 7))
            .unwrap();
        TransportData::new(wind_u, wind_v, sources, observed, CovarianceSettings::default())
            .unwrap()
    }

    #[test]
    fn half_normal_log_density_at_zero() {
        let f = PriorFamily::HalfNormal { scale: 1.0 };
        let expect = (2.0 / (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((f.log_density(0.0) - expect).abs() < 1e-12);
        assert!((expect + 0.22579).abs() < 1e-4);
    }

    #[test]
    fn exponential_log_density_at_zero() {
        let f = PriorFamily::Exponential { rate: 2.0 };
        assert!((f.log_density(0.0) - (2.0f64).ln()).abs() < 1e-12);
        assert_eq!(f.log_density(-0.1), f64::NEG_INFINITY);
    }

    #[test]
    fn prior_densities_integrate_to_one() {
        // Simpson's rule on [0, 40·spread]
        for f in [
            PriorFamily::HalfNormal { scale: 1.7 },
            PriorFamily::Exponential { rate: 0.8 },
        ] {
            let upper = 40.0 * 1.7_f64.max(1.0 / 0.8);
            let n = 40_000;
            let h = upper / n as f64;
            let mut total = 0.0;
            for k in 0..=n {
                let x = k as f64 * h;
                let w = if k == 0 || k == n {
                    1.0
                } else if k % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                total += w * f.log_density(x).exp();
            }
            total *= h / 3.0;
            assert!((total - 1.0).abs() < 1e-6, "{f:?}: {total}");
        }
    }

    #[test]
    fn medians_match_quantile_definition() {
        let hn = PriorFamily::HalfNormal { scale: 2.5 };
        // P(X <= m) via the folded normal CDF: 2Φ(m/σ) − 1
        let normal = Normal::new(0.0, 1.0).unwrap();
        let p = 2.0 * normal.cdf(hn.median() / 2.5) - 1.0;
        assert!((p - 0.5).abs() < 1e-10);
        let ex = PriorFamily::Exponential { rate: 3.0 };
        let p = 1.0 - (-3.0 * ex.median()).exp();
        assert!((p - 0.5).abs() < 1e-12);
    }

    #[test]
    fn engine_recovers_lognormal_moments() {
        // target: x = exp(w), w ~ N(mu, S) sampled on the w scale
        let mu = [0.3, -0.5];
        let s = [[0.04, 0.02], [0.02, 0.16]];
        let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
        let inv = [
            [s[1][1] / det, -s[0][1] / det],
            [-s[1][0] / det, s[0][0] / det],
        ];
        let log_target = |w: &[f64]| {
            let d0 = w[0] - mu[0];
            let d1 = w[1] - mu[1];
            let quad = d0 * d0 * inv[0][0] + 2.0 * d0 * d1 * inv[0][1] + d1 * d1 * inv[1][1];
            -0.5 * quad
        };
        let config = EngineConfig {
            n_iter: 60_000,
            n_burn: 10_000,
            ..EngineConfig::default()
        };
        let mut rng = stream_rng(42, 1);
        let run = adaptive_metropolis(log_target, &[0.0, 0.0], &config, &mut rng).unwrap();
        let n = run.draws.len() as f64;
        let mean_x0 = run.draws.iter().map(|w| w[0].exp()).sum::<f64>() / n;
        let mean_x1 = run.draws.iter().map(|w| w[1].exp()).sum::<f64>() / n;
        let expect_x0 = (mu[0] + 0.5 * s[0][0]).exp();
        let expect_x1 = (mu[1] + 0.5 * s[1][1]).exp();
        assert!((mean_x0 - expect_x0).abs() / expect_x0 < 0.03, "{mean_x0} vs {expect_x0}");
        assert!((mean_x1 - expect_x1).abs() / expect_x1 < 0.03, "{mean_x1} vs {expect_x1}");
        assert!(run.acceptance_rate > 0.1 && run.acceptance_rate < 0.45);
    }

    #[test]
    fn reset_schedule_doubles_and_leaves_a_long_final_window() {
        let resets = covariance_reset_points(20_000, 6);
        assert_eq!(resets, vec![1000, 2000, 4000, 8000]);
        // the final window spans at least 40% of the burn phase
        assert!(20_000 - resets.last().unwrap() >= 8_000);
        for w in resets.windows(2) {
            assert!(w[1] > w[0]);
        }
        assert!(covariance_reset_points(150, 6).is_empty());
        assert!(covariance_reset_points(0, 6).is_empty());
    }

    #[test]
    fn windowed_adaptation_handles_a_narrow_ridge() {
        // a 2-d Gaussian with correlation 0.9995 and a 100:1 scale split;
        // identity-shaped proposals barely move along the long axis, so
        // recovering both marginal variances requires the learned shape
        let sd = [1.0f64, 100.0];
        let rho = 0.9995;
        let det = (sd[0] * sd[1]).powi(2) * (1.0 - rho * rho);
        let log_target = move |w: &[f64]| {
            let q = (w[0] * w[0] * sd[1] * sd[1] - 2.0 * rho * sd[0] * sd[1] * w[0] * w[1]
                + w[1] * w[1] * sd[0] * sd[0])
                / det;
            -0.5 * q
        };
        let config = EngineConfig {
            n_iter: 60_000,
            n_burn: 30_000,
            ..EngineConfig::default()
        };
        let mut rng = stream_rng(9, 1);
        let run = adaptive_metropolis(log_target, &[0.0, 0.0], &config, &mut rng).unwrap();
        for (i, &expect) in sd.iter().enumerate() {
            let series: Vec<f64> = run.draws.iter().map(|w| w[i]).collect();
            let got = sample_var(&series).sqrt();
            assert!(
                got > 0.5 * expect && got < 2.0 * expect,
                "axis {i}: sd {got} vs {expect}"
            );
        }
        let series: Vec<f64> = run.draws.iter().map(|w| w[1]).collect();
        let (ess, _, _) = scalar_diagnostics(&[series]);
        assert!(ess > 100.0, "long-axis ess {ess}");
    }

    #[test]
    fn descent_phase_reaches_a_distant_mode() {
        let log_target = |w: &[f64]| {
            let d0 = w[0] - 30.0;
            let d1 = w[1] + 25.0;
            -0.5 * (d0 * d0 + d1 * d1) / 0.01
        };
        let config = EngineConfig {
            n_iter: 4_000,
            n_burn: 2_000,
            n_descent: 600,
            ..EngineConfig::default()
        };
        let mut rng = stream_rng(17, 1);
        let run = adaptive_metropolis(log_target, &[0.0, 0.0], &config, &mut rng).unwrap();
        let n = run.draws.len() as f64;
        let m0 = run.draws.iter().map(|w| w[0]).sum::<f64>() / n;
        let m1 = run.draws.iter().map(|w| w[1]).sum::<f64>() / n;
        assert!((m0 - 30.0).abs() < 1.0, "mean {m0}");
        assert!((m1 + 25.0).abs() < 1.0, "mean {m1}");
    }

    #[test]
    fn adaptation_freezes_at_burn_in() {
        let data = tiny_data();
        let config = McmcConfig {
            n_iter: 600,
            n_burn: 300,
            seed: 3,
            ..McmcConfig::default()
        };
        let chain = run_chain(&data, &PriorSpec::default(), &config, 0).unwrap();
        assert_eq!(chain.proposal_cov_at_freeze, chain.proposal_cov_final);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let data = tiny_data();
        let config = McmcConfig {
            n_iter: 400,
            n_burn: 200,
            seed: 11,
            ..McmcConfig::default()
        };
        let a = run_chain(&data, &PriorSpec::default(), &config, 0).unwrap();
        let b = run_chain(&data, &PriorSpec::default(), &config, 0).unwrap();
        for (x, y) in a.draws.iter().zip(&b.draws) {
            assert_eq!(x.to_array(), y.to_array());
        }
        assert_eq!(a.log_posterior, b.log_posterior);
    }

    #[test]
    fn likelihood_off_reproduces_prior() {
        let data = tiny_data();
        let config = McmcConfig {
            n_iter: 12_000,
            n_burn: 2_000,
            seed: 5,
            likelihood_off: true,
            ..McmcConfig::default()
        };
        let prior = PriorSpec {
            per_param: [
                PriorFamily::HalfNormal { scale: 1.0 },
                PriorFamily::HalfNormal { scale: 1.0 },
                PriorFamily::HalfNormal { scale: 1.0 },
                PriorFamily::HalfNormal { scale: 1.0 },
                PriorFamily::HalfNormal { scale: 1.0 },
                PriorFamily::Exponential { rate: 1.0 },
            ],
        };
        let chain = run_chain(&data, &prior, &config, 0).unwrap();
        for d in &chain.draws {
            let a = d.to_array();
            assert!(a.iter().all(|&x| x > 0.0), "positivity violated: {a:?}");
        }
        let series: Vec<f64> = chain.draws.iter().map(|d| d.diffusion).collect();
        let (ess, _, _) = scalar_diagnostics(&[series.clone()]);
        let m = mean(&series);
        let sd = sample_var(&series).sqrt();
        let mc_se = sd / ess.sqrt();
        let prior_mean = prior.per_param[0].mean();
        assert!(
            (m - prior_mean).abs() < 3.0 * mc_se,
            "posterior mean {m} vs prior mean {prior_mean} (MC SE {mc_se}, ESS {ess})"
        );
    }

    #[test]
    fn degenerate_prior_start_is_initialization_error() {
        let data = tiny_data();
        let mut prior = PriorSpec::default();
        // absurd background prior: the median residual overflows the likelihood
        prior.per_param[5] = PriorFamily::Exponential { rate: 1e-305 };
        let config = McmcConfig {
            n_iter: 100,
            n_burn: 50,
            ..McmcConfig::default()
        };
        let err = run_chain(&data, &prior, &config, 0).unwrap_err();
        assert!(matches!(err, Error::Initialization(_)), "{err}");
    }

    #[test]
    fn iid_chains_have_rhat_near_one() {
        let mut chains = Vec::new();
        for c in 0..4 {
            let mut rng = stream_rng(100, c);
            let vals: Vec<f64> = (0..1000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            chains.push(vals);
        }
        let (ess, rhat, degenerate) = scalar_diagnostics(&chains);
        assert!(!degenerate);
        assert!(rhat.unwrap() < 1.01, "rhat {rhat:?}");
        assert!(ess > 2000.0, "ess {ess}");
    }

    #[test]
    fn ar1_chain_ess_matches_analytic_rate() {
        let rho: f64 = 0.9;
        let mut chains = Vec::new();
        for c in 0..2 {
            let mut rng = stream_rng(200, c);
            let mut x = 0.0;
            let innov_sd = (1.0 - rho * rho).sqrt();
            let vals: Vec<f64> = (0..4000)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    x = rho * x + innov_sd * z;
                    x
                })
                .collect();
            chains.push(vals);
        }
        let n_total = 8000.0;
        let expect = n_total * (1.0 - rho) / (1.0 + rho);
        let (ess, _, _) = scalar_diagnostics(&chains);
        assert!(
            (ess - expect).abs() / expect < 0.25,
            "ess {ess} vs analytic {expect}"
        );
    }

    #[test]
    fn constant_chains_flag_degenerate() {
        let chains = vec![vec![2.0; 100], vec![2.0; 100]];
        let (ess, rhat, degenerate) = scalar_diagnostics(&chains);
        assert!(degenerate);
        assert!(ess.is_nan());
        assert!(rhat.is_none());
    }

    #[test]
    fn single_chain_omits_rhat() {
        let data = tiny_data();
        let config = McmcConfig {
            n_iter: 300,
            n_burn: 100,
            seed: 9,
            likelihood_off: true,
            ..McmcConfig::default()
        };
        let chain = run_chain(&data, &PriorSpec::default(), &config, 0).unwrap();
        let diag = diagnostics(&[chain]).unwrap();
        assert!(diag.single_chain);
        assert!(diag.rhat.iter().all(|r| r.is_none()));
        assert_eq!(diag.accept.len(), 1);
        assert!(diag.accept[0] >= 0.0 && diag.accept[0] <= 1.0);
    }

    #[test]
    fn draws_csv_round_trips() {
        let draws = vec![
            TransportParams {
                diffusion: 1.25,
                advection: 0.5,
                oxidation: 0.125,
                deposition: 0.75,
                noise_var: 0.0625,
                background: 1.5,
            },
            TransportParams {
                diffusion: 0.3,
                advection: 1.7,
                oxidation: 0.9,
                deposition: 0.45,
                noise_var: 0.11,
                background: 0.0,
            },
        ];
        let lp = vec![-12.5, -13.75];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("draws.csv");
        write_draws_csv(&draws, &lp, &path).unwrap();
        let (back, lp_back) = read_draws_csv(&path).unwrap();
        assert_eq!(lp, lp_back);
        for (a, b) in draws.iter().zip(&back) {
            assert_eq!(a.to_array(), b.to_array());
        }
    }
}
