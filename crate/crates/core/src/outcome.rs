//! Count-outcome response surfaces: a parametric log-linear Poisson
//! regression and a log-linear BART ensemble, plus residual spatial
//! autocorrelation diagnostics.
//!
//! Both models target E(Y_i) = offset_i · f(x_i, z_i, g_i) with Y_i Poisson.
//! The GLM puts a linear form on log f; BART replaces it with a sum of trees
//! whose leaves act multiplicatively on the rate. Leaves carry a conjugate
//! Gamma prior, so tree moves integrate leaf values out in closed form and
//! the leaf full conditionals stay Gamma.

use crate::error::{Error, Result};
use crate::grid::RegionMap;
use crate::mcmc::{adaptive_metropolis, EngineConfig};
use crate::rng::{stream, stream_rng};
use rand::Rng;
use rand_distr::{Distribution, Gamma as GammaDist};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::{digamma, ln_gamma};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

// ---------------------------------------------------------------------------
// Outcome table
// ---------------------------------------------------------------------------

/// Per-region outcome data. Covariate columns are stored raw; the GLM keeps
/// its own standardized copies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTable {
    pub region_ids: Vec<u32>,
    pub y: Vec<u64>,
    pub offset: Vec<f64>,
    /// covariate columns, each of length n
    pub x: Vec<Vec<f64>>,
    pub z: Vec<bool>,
    pub g: Vec<f64>,
}

impl OutcomeTable {
    pub fn new(
        region_ids: Vec<u32>,
        y: Vec<u64>,
        offset: Vec<f64>,
        x: Vec<Vec<f64>>,
        z: Vec<bool>,
        g: Vec<f64>,
    ) -> Result<Self> {
        let n = region_ids.len();
        if y.len() != n || offset.len() != n || z.len() != n || g.len() != n {
            return Err(Error::Dimension(
                "outcome table columns have unequal lengths".into(),
            ));
        }
        for col in &x {
            if col.len() != n {
                return Err(Error::Dimension(
                    "covariate column length does not match region count".into(),
                ));
            }
            if let Some(v) = col.iter().find(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("non-finite covariate value {v}")));
            }
        }
        for (i, &o) in offset.iter().enumerate() {
            if !(o > 0.0) || !o.is_finite() {
                return Err(Error::Validation(format!(
                    "offset must be positive, got {o} for region {}",
                    region_ids[i]
                )));
            }
        }
        for (i, &gv) in g.iter().enumerate() {
            if !(0.0..=1.0).contains(&gv) {
                return Err(Error::Validation(format!(
                    "g must lie in [0,1], got {gv} for region {}",
                    region_ids[i]
                )));
            }
        }
        Ok(Self {
            region_ids,
            y,
            offset,
            x,
            z,
            g,
        })
    }

    pub fn n(&self) -> usize {
        self.region_ids.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.len()
    }

    /// Same table with the upwind exposure column replaced; used when
    /// refitting under a different interference imputation.
    pub fn with_g(&self, g: Vec<f64>) -> Result<Self> {
        Self::new(
            self.region_ids.clone(),
            self.y.clone(),
            self.offset.clone(),
            self.x.clone(),
            self.z.clone(),
            g,
        )
    }

    /// Covariate row for one region.
    pub fn x_row(&self, i: usize) -> Vec<f64> {
        self.x.iter().map(|col| col[i]).collect()
    }
}

pub fn format_outcome_csv(table: &OutcomeTable) -> String {
    let p = table.n_covariates();
    let mut out = String::from("region_id,y,offset,z,g");
    for k in 1..=p {
        let _ = write!(out, ",x{k}");
    }
    out.push('\n');
    for i in 0..table.n() {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            table.region_ids[i],
            table.y[i],
            table.offset[i],
            if table.z[i] { 1 } else { 0 },
            table.g[i]
        );
        for col in &table.x {
            let _ = write!(out, ",{}", col[i]);
        }
        out.push('\n');
    }
    out
}

pub fn write_outcome_csv(table: &OutcomeTable, path: impl AsRef<Path>) -> Result<()> {
    let path_str = path.as_ref().display().to_string();
    std::fs::write(path.as_ref(), format_outcome_csv(table)).map_err(|e| Error::io(&path_str, e))
}

pub fn read_outcome_csv(path: impl AsRef<Path>) -> Result<OutcomeTable> {
    let path_str = path.as_ref().display().to_string();
    let mut reader = csv::Reader::from_path(path.as_ref())
        .map_err(|e| Error::Validation(format!("cannot open outcome table {path_str}: {e}")))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(&path_str, 1, e.to_string()))?
        .clone();
    let actual: Vec<&str> = headers.iter().collect();
    if actual.len() < 5 || actual[..5] != ["region_id", "y", "offset", "z", "g"] {
        return Err(Error::parse(
            &path_str,
            1,
            format!(
                "expected header starting `region_id,y,offset,z,g`, got `{}`",
                actual.join(",")
            ),
        ));
    }
    let p = actual.len() - 5;
    for (k, name) in actual[5..].iter().enumerate() {
        let expected = format!("x{}", k + 1);
        if *name != expected {
            return Err(Error::parse(
                &path_str,
                1,
                format!("expected covariate column `{expected}`, got `{name}`"),
            ));
        }
    }
    let mut region_ids = Vec::new();
    let mut y = Vec::new();
    let mut offset = Vec::new();
    let mut x: Vec<Vec<f64>> = vec![Vec::new(); p];
    let mut z = Vec::new();
    let mut g = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let lineno = idx + 2;
        let record = record.map_err(|e| Error::parse(&path_str, lineno, e.to_string()))?;
        let get = |i: usize| -> Result<&str> {
            record
                .get(i)
                .ok_or_else(|| Error::parse(&path_str, lineno, format!("missing column {i}")))
        };
        region_ids.push(get(0)?.parse::<u32>().map_err(|_| {
            Error::parse(&path_str, lineno, format!("region_id `{}` is not an integer", record.get(0).unwrap_or("")))
        })?);
        let y_raw = get(1)?;
        let y_val: f64 = y_raw
            .parse()
            .map_err(|_| Error::parse(&path_str, lineno, format!("y `{y_raw}` is not a number")))?;
        if y_val < 0.0 || y_val.fract() != 0.0 {
            return Err(Error::Validation(format!(
                "{path_str} line {lineno}: y must be a nonnegative integer, got `{y_raw}`"
            )));
        }
        y.push(y_val as u64);
        offset.push(get(2)?.parse::<f64>().map_err(|_| {
            Error::parse(&path_str, lineno, "offset is not a number".to_string())
        })?);
        z.push(match get(3)? {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Validation(format!(
                    "{path_str} line {lineno}: z must be 0 or 1, got `{other}`"
                )))
            }
        });
        g.push(get(4)?.parse::<f64>().map_err(|_| {
            Error::parse(&path_str, lineno, "g is not a number".to_string())
        })?);
        for (k, col) in x.iter_mut().enumerate() {
            col.push(get(5 + k)?.parse::<f64>().map_err(|_| {
                Error::parse(&path_str, lineno, format!("x{} is not a number", k + 1))
            })?);
        }
    }
    OutcomeTable::new(region_ids, y, offset, x, z, g)
}

// ---------------------------------------------------------------------------
// Poisson GLM
// ---------------------------------------------------------------------------

/// One posterior draw of the parametric model
/// log f = beta[0] + Σ beta[k]·x̃_k + phi·z + gamma·g + psi·z·g,
/// with x̃ the standardized covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlmParams {
    pub beta: Vec<f64>,
    pub phi: f64,
    pub gamma: f64,
    pub psi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlmConfig {
    pub n_iter: usize,
    pub n_burn: usize,
    pub seed: u64,
    /// drop the z, g and z·g terms, leaving log f = beta[0] (+ covariates)
    pub intercept_only: bool,
    pub prior_sd: f64,
}

impl Default for GlmConfig {
    fn default() -> Self {
        Self {
            n_iter: 12000,
            n_burn: 6000,
            seed: 0,
            intercept_only: false,
            prior_sd: 10.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlmFit {
    pub draws: Vec<GlmParams>,
    pub log_posterior: Vec<f64>,
    pub acceptance_rate: f64,
    pub x_means: Vec<f64>,
    pub x_sds: Vec<f64>,
    pub x_ranges: Vec<(f64, f64)>,
    pub g_range: (f64, f64),
    pub intercept_only: bool,
}

fn column_names(p: usize, intercept_only: bool) -> Vec<String> {
    let mut names = vec!["intercept".to_string()];
    for k in 1..=p {
        names.push(format!("x{k}"));
    }
    if !intercept_only {
        names.push("z".into());
        names.push("g".into());
        names.push("z:g".into());
    }
    names
}

/// Adaptive-Metropolis fit of the Poisson regression with independent
/// normal(0, prior_sd²) priors on every coefficient.
pub fn fit_poisson_glm(table: &OutcomeTable, config: &GlmConfig) -> Result<GlmFit> {
    let n = table.n();
    if n == 0 {
        return Err(Error::Validation("outcome table is empty".into()));
    }
    let p = table.n_covariates();

    let mut x_means = Vec::with_capacity(p);
    let mut x_sds = Vec::with_capacity(p);
    let mut x_ranges = Vec::with_capacity(p);
    for col in &table.x {
        let m = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
        let sd = var.sqrt();
        x_means.push(m);
        x_sds.push(if sd > 0.0 { sd } else { 1.0 });
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        x_ranges.push((lo, hi));
    }
    let g_lo = table.g.iter().cloned().fold(f64::INFINITY, f64::min);
    let g_hi = table.g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    // design matrix rows: [1, x̃.., z, g, z·g]
    let d = if config.intercept_only { 1 + p } else { 1 + p + 3 };
    let mut design = vec![0.0; n * d];
    for i in 0..n {
        design[i * d] = 1.0;
        for k in 0..p {
            design[i * d + 1 + k] = (table.x[k][i] - x_means[k]) / x_sds[k];
        }
        if !config.intercept_only {
            let zf = if table.z[i] { 1.0 } else { 0.0 };
            design[i * d + 1 + p] = zf;
            design[i * d + 2 + p] = table.g[i];
            design[i * d + 3 + p] = zf * table.g[i];
        }
    }

    // rank check by modified Gram-Schmidt: a column whose residual after
    // projecting out the earlier independent columns vanishes is named
    let names = column_names(p, config.intercept_only);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut collinear = Vec::new();
    for k in 0..d {
        let mut col: Vec<f64> = (0..n).map(|i| design[i * d + k]).collect();
        let orig_norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        for q in &basis {
            let dot: f64 = col.iter().zip(q).map(|(a, b)| a * b).sum();
            for (c, b) in col.iter_mut().zip(q) {
                *c -= dot * b;
            }
        }
        let res_norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if res_norm <= 1e-8 * orig_norm.max(f64::MIN_POSITIVE) {
            collinear.push(names[k].clone());
        } else {
            for c in col.iter_mut() {
                *c /= res_norm;
            }
            basis.push(col);
        }
    }
    if !collinear.is_empty() {
        return Err(Error::Validation(format!(
            "design matrix is rank deficient; collinear columns: {}",
            collinear.join(", ")
        )));
    }

    let log_offsets: Vec<f64> = table.offset.iter().map(|o| o.ln()).collect();
    let y_f: Vec<f64> = table.y.iter().map(|&v| v as f64).collect();
    let ln_y_fact: f64 = table.y.iter().map(|&v| ln_gamma(v as f64 + 1.0)).sum();
    let prior_var = config.prior_sd * config.prior_sd;
    let log_target = |coef: &[f64]| -> f64 {
        let mut ll = -ln_y_fact;
        for i in 0..n {
            let mut eta = 0.0;
            for k in 0..d {
                eta += design[i * d + k] * coef[k];
            }
            ll += y_f[i] * (log_offsets[i] + eta) - table.offset[i] * eta.exp();
            if !ll.is_finite() {
                return f64::NEG_INFINITY;
            }
        }
        let prior: f64 = coef
            .iter()
            .map(|c| -0.5 * c * c / prior_var - 0.5 * (2.0 * std::f64::consts::PI * prior_var).ln())
            .sum();
        ll + prior
    };

    let total_y: f64 = y_f.iter().sum();
    let total_offset: f64 = table.offset.iter().sum();
    let mut init = vec![0.0; d];
    init[0] = ((total_y + 0.5) / total_offset).ln();

    // Fisher information for the intercept is about Σy, so start proposals
    // near that scale instead of the engine's unit-scale default
    let engine = EngineConfig {
        n_iter: config.n_iter,
        n_burn: config.n_burn,
        init_step: (1.0 / (total_y + 1.0).sqrt()).min(0.5),
        ..EngineConfig::default()
    };
    let mut rng = stream_rng(config.seed, stream::OUTCOME_FIT_BASE);
    let run = adaptive_metropolis(log_target, &init, &engine, &mut rng)?;

    let draws: Vec<GlmParams> = run
        .draws
        .iter()
        .map(|c| {
            if config.intercept_only {
                GlmParams {
                    beta: c.clone(),
                    phi: 0.0,
                    gamma: 0.0,
                    psi: 0.0,
                }
            } else {
                GlmParams {
                    beta: c[..1 + p].to_vec(),
                    phi: c[1 + p],
                    gamma: c[2 + p],
                    psi: c[3 + p],
                }
            }
        })
        .collect();

    Ok(GlmFit {
        draws,
        log_posterior: run.log_density,
        acceptance_rate: run.acceptance_rate,
        x_means,
        x_sds,
        x_ranges,
        g_range: (g_lo, g_hi),
        intercept_only: config.intercept_only,
    })
}

impl GlmFit {
    /// Rate f(x, z, g) for one draw, before the offset.
    pub fn rate_factor(&self, draw: &GlmParams, x: &[f64], z: bool, g: f64) -> f64 {
        let mut eta = draw.beta[0];
        for k in 0..self.x_means.len() {
            eta += draw.beta[k + 1] * (x[k] - self.x_means[k]) / self.x_sds[k];
        }
        if !self.intercept_only {
            let zf = if z { 1.0 } else { 0.0 };
            eta += draw.phi * zf + draw.gamma * g + draw.psi * zf * g;
        }
        eta.exp()
    }

    pub fn predict_rate(&self, draw: &GlmParams, x: &[f64], z: bool, g: f64, offset: f64) -> f64 {
        offset * self.rate_factor(draw, x, z, g)
    }

    pub fn extrapolates(&self, x: &[f64], g: f64) -> bool {
        if g < self.g_range.0 || g > self.g_range.1 {
            return true;
        }
        x.iter()
            .zip(&self.x_ranges)
            .any(|(v, (lo, hi))| v < lo || v > hi)
    }
}

// ---------------------------------------------------------------------------
// Log-linear BART
// ---------------------------------------------------------------------------

/// Polygamma function of order one. Recurrence pushes the argument above
/// six, then the asymptotic series applies.
pub fn trigamma(mut x: f64) -> f64 {
    assert!(x > 0.0, "trigamma needs a positive argument");
    let mut acc = 0.0;
    while x < 20.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + inv * (1.0 + 0.5 * inv + inv2 * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 / 42.0)))
}

/// Inverse of [`trigamma`] by bisection; trigamma is strictly decreasing.
pub fn inverse_trigamma(y: f64) -> f64 {
    assert!(y > 0.0, "inverse trigamma needs a positive value");
    let mut lo = 1e-8;
    let mut hi = 1.0;
    while trigamma(lo) < y {
        lo /= 8.0;
    }
    while trigamma(hi) > y {
        hi *= 8.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if trigamma(mid) > y {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Gamma(shape, rate) prior on multiplicative leaves, calibrated so that
/// log-leaf values have mean zero and variance scale²/m:
/// trigamma(shape) = scale²/m and rate = exp(digamma(shape)).
pub fn calibrate_leaf_prior(leaf_prior_scale: f64, m: usize) -> (f64, f64) {
    let var = leaf_prior_scale * leaf_prior_scale / m as f64;
    let shape = inverse_trigamma(var);
    let rate = digamma(shape).exp();
    (shape, rate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf { value: f64 },
    Split { feature: usize, cut: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    fn stump() -> Self {
        Self {
            nodes: vec![TreeNode::Leaf { value: 1.0 }],
        }
    }

    /// Leaf node index for a feature row; rule is `feature ≤ cut` goes left.
    pub fn leaf_index(&self, features: &[f64]) -> usize {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                TreeNode::Leaf { .. } => return idx,
                TreeNode::Split {
                    feature,
                    cut,
                    left,
                    right,
                } => {
                    idx = if features[*feature] <= *cut { *left } else { *right };
                }
            }
        }
    }

    pub fn leaf_value(&self, features: &[f64]) -> f64 {
        match &self.nodes[self.leaf_index(features)] {
            TreeNode::Leaf { value } => *value,
            TreeNode::Split { .. } => unreachable!(),
        }
    }

    fn leaves(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i], TreeNode::Leaf { .. }))
            .collect()
    }

    /// Internal nodes whose two children are both leaves; the only nodes a
    /// prune or change move may touch.
    fn prunable(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| match self.nodes[i] {
                TreeNode::Split { left, right, .. } => {
                    matches!(self.nodes[left], TreeNode::Leaf { .. })
                        && matches!(self.nodes[right], TreeNode::Leaf { .. })
                }
                TreeNode::Leaf { .. } => false,
            })
            .collect()
    }

    fn node_depth(&self, target: usize) -> usize {
        fn walk(tree: &Tree, idx: usize, target: usize, depth: usize) -> Option<usize> {
            if idx == target {
                return Some(depth);
            }
            match tree.nodes[idx] {
                TreeNode::Leaf { .. } => None,
                TreeNode::Split { left, right, .. } => walk(tree, left, target, depth + 1)
                    .or_else(|| walk(tree, right, target, depth + 1)),
            }
        }
        walk(self, 0, target, 0).expect("node not reachable from root")
    }

    pub fn max_depth(&self) -> usize {
        fn walk(tree: &Tree, idx: usize, depth: usize) -> usize {
            match tree.nodes[idx] {
                TreeNode::Leaf { .. } => depth,
                TreeNode::Split { left, right, .. } => {
                    walk(tree, left, depth + 1).max(walk(tree, right, depth + 1))
                }
            }
        }
        walk(self, 0, 0)
    }
}

/// One posterior draw of the whole forest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub trees: Vec<Tree>,
}

impl TreeEnsemble {
    pub fn log_rate_factor(&self, features: &[f64]) -> f64 {
        self.trees
            .iter()
            .map(|t| t.leaf_value(features).ln())
            .sum()
    }

    pub fn predict_rate(&self, x: &[f64], z: bool, g: f64, offset: f64) -> f64 {
        let features = feature_row(x, z, g);
        offset * self.log_rate_factor(&features).exp()
    }
}

pub fn feature_row(x: &[f64], z: bool, g: f64) -> Vec<f64> {
    let mut row = x.to_vec();
    row.push(if z { 1.0 } else { 0.0 });
    row.push(g);
    row
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BartConfig {
    pub m: usize,
    pub n_iter: usize,
    pub n_burn: usize,
    pub n_thin: usize,
    pub seed: u64,
    pub alpha: f64,
    pub beta_depth: f64,
    pub leaf_prior_scale: f64,
    pub p_grow: f64,
    pub p_prune: f64,
    pub p_change: f64,
}

impl Default for BartConfig {
    fn default() -> Self {
        Self {
            m: 200,
            n_iter: 3000,
            n_burn: 1500,
            n_thin: 1,
            seed: 0,
            alpha: 0.95,
            beta_depth: 2.0,
            leaf_prior_scale: 1.0,
            p_grow: 0.4,
            p_prune: 0.4,
            p_change: 0.2,
        }
    }
}

impl BartConfig {
    fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Argument("BART needs at least one tree".into()));
        }
        if self.n_iter <= self.n_burn {
            return Err(Error::Argument(format!(
                "n_iter ({}) must exceed n_burn ({})",
                self.n_iter, self.n_burn
            )));
        }
        if self.n_thin == 0 {
            return Err(Error::Argument("n_thin must be at least 1".into()));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("leaf_prior_scale", self.leaf_prior_scale),
        ] {
            if !(v > 0.0) {
                return Err(Error::Argument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.p_grow < 0.0 || self.p_prune < 0.0 || self.p_change < 0.0 {
            return Err(Error::Argument("move probabilities must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BartFit {
    pub draws: Vec<TreeEnsemble>,
    pub leaf_shape: f64,
    pub leaf_rate: f64,
    pub acceptance_rate: f64,
    pub feature_ranges: Vec<(f64, f64)>,
}

impl BartFit {
    pub fn predict_rate(&self, draw: usize, x: &[f64], z: bool, g: f64, offset: f64) -> f64 {
        self.draws[draw].predict_rate(x, z, g, offset)
    }

    pub fn extrapolates(&self, x: &[f64], z: bool, g: f64) -> bool {
        let row = feature_row(x, z, g);
        row.iter()
            .zip(&self.feature_ranges)
            .any(|(v, (lo, hi))| v < lo || v > hi)
    }
}

/// log marginal likelihood contribution of one leaf with the Gamma leaf
/// integrated out, dropping factors that do not depend on the tree.
fn leaf_log_marginal(a: f64, b: f64, y_sum: f64, o_sum: f64) -> f64 {
    a * b.ln() - ln_gamma(a) + ln_gamma(a + y_sum) - (a + y_sum) * (b + o_sum).ln()
}

fn p_split(depth: usize, alpha: f64, beta_depth: f64) -> f64 {
    alpha * (1.0 + depth as f64).powf(-beta_depth)
}

/// Normalized probabilities of (grow, prune, change) given what the tree
/// currently allows.
fn move_probs(tree: &Tree, cfg: &BartConfig) -> (f64, f64, f64) {
    let can_prune = !tree.prunable().is_empty();
    let pg = cfg.p_grow;
    let pp = if can_prune { cfg.p_prune } else { 0.0 };
    let pc = if can_prune { cfg.p_change } else { 0.0 };
    let total = pg + pp + pc;
    if total <= 0.0 {
        (0.0, 0.0, 0.0)
    } else {
        (pg / total, pp / total, pc / total)
    }
}

struct BartSampler<'a> {
    y: Vec<f64>,
    offset: &'a [f64],
    features: Vec<Vec<f64>>,
    cutpoints: Vec<Vec<f64>>,
    a: f64,
    b: f64,
    cfg: BartConfig,
    trees: Vec<Tree>,
    /// per-observation running Σ_t log leaf_t(i)
    log_fit: Vec<f64>,
    proposals: usize,
    accepted: usize,
}

struct LeafStats {
    /// node index -> (Σy, Σ weighted offset, member observation indices)
    by_leaf: BTreeMap<usize, (f64, f64, Vec<usize>)>,
    /// per-observation offset times the other trees' rate factor
    weight: Vec<f64>,
}

impl<'a> BartSampler<'a> {
    fn new(table: &'a OutcomeTable, cfg: BartConfig) -> Result<Self> {
        cfg.validate()?;
        let n = table.n();
        if n == 0 {
            return Err(Error::Validation("outcome table is empty".into()));
        }
        let features: Vec<Vec<f64>> = (0..n)
            .map(|i| feature_row(&table.x_row(i), table.z[i], table.g[i]))
            .collect();
        let d = features[0].len();
        let mut cutpoints = Vec::with_capacity(d);
        for k in 0..d {
            let mut vals: Vec<f64> = features.iter().map(|row| row[k]).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            vals.dedup();
            vals.pop();
            cutpoints.push(vals);
        }
        let (a, b) = calibrate_leaf_prior(cfg.leaf_prior_scale, cfg.m);
        Ok(Self {
            y: table.y.iter().map(|&v| v as f64).collect(),
            offset: &table.offset,
            features,
            cutpoints,
            a,
            b,
            cfg,
            trees: vec![Tree::stump(); cfg.m],
            log_fit: vec![0.0; n],
            proposals: 0,
            accepted: 0,
        })
    }

    fn leaf_stats(&self, t: usize) -> LeafStats {
        let tree = &self.trees[t];
        let n = self.y.len();
        let mut by_leaf: BTreeMap<usize, (f64, f64, Vec<usize>)> = BTreeMap::new();
        for leaf in tree.leaves() {
            by_leaf.insert(leaf, (0.0, 0.0, Vec::new()));
        }
        let mut weight = vec![0.0; n];
        for i in 0..n {
            let leaf = tree.leaf_index(&self.features[i]);
            let c = match tree.nodes[leaf] {
                TreeNode::Leaf { value } => value.ln(),
                TreeNode::Split { .. } => unreachable!(),
            };
            let w = self.offset[i] * (self.log_fit[i] - c).exp();
            weight[i] = w;
            let entry = by_leaf.get_mut(&leaf).unwrap();
            entry.0 += self.y[i];
            entry.1 += w;
            entry.2.push(i);
        }
        LeafStats { by_leaf, weight }
    }

    /// One structural MH move on tree `t`, then a conjugate redraw of all
    /// its leaf values. The other-trees contribution is captured before the
    /// move because a prune leaves a placeholder leaf value behind.
    fn update_tree(&mut self, t: usize, rng: &mut impl Rng) {
        let stats = self.leaf_stats(t);
        let other_log: Vec<f64> = (0..self.y.len())
            .map(|i| (stats.weight[i] / self.offset[i]).ln())
            .collect();
        let (pg, pp, pc) = move_probs(&self.trees[t], &self.cfg);
        if pg + pp + pc > 0.0 {
            let u: f64 = rng.gen();
            self.proposals += 1;
            let accepted = if u < pg {
                self.try_grow(t, &stats, rng)
            } else if u < pg + pp {
                self.try_prune(t, &stats, rng)
            } else {
                self.try_change(t, &stats, rng)
            };
            if accepted {
                self.accepted += 1;
            }
        }
        self.redraw_leaves(t, &other_log, rng);
    }

    fn try_grow(&mut self, t: usize, stats: &LeafStats, rng: &mut impl Rng) -> bool {
        let leaves = self.trees[t].leaves();
        let leaf = leaves[rng.gen_range(0..leaves.len())];
        let feature = rng.gen_range(0..self.cutpoints.len());
        if self.cutpoints[feature].is_empty() {
            return false;
        }
        let cut = self.cutpoints[feature][rng.gen_range(0..self.cutpoints[feature].len())];
        let log_ratio = match self.grow_log_ratio(t, stats, leaf, feature, cut) {
            Some(r) => r,
            None => return false,
        };
        if (rng.gen::<f64>()).ln() < log_ratio {
            self.apply_grow(t, leaf, feature, cut);
            true
        } else {
            false
        }
    }

    /// Log acceptance ratio of growing `leaf` with the given rule, or None
    /// when a child would be empty. Rule probabilities cancel between the
    /// tree prior and the proposal because rules are proposed from the
    /// prior's rule distribution.
    fn grow_log_ratio(
        &self,
        t: usize,
        stats: &LeafStats,
        leaf: usize,
        feature: usize,
        cut: f64,
    ) -> Option<f64> {
        let (y_all, o_all, members) = &stats.by_leaf[&leaf];
        let (mut y_l, mut o_l, mut n_l) = (0.0, 0.0, 0usize);
        for &i in members {
            if self.features[i][feature] <= cut {
                y_l += self.y[i];
                o_l += stats.weight[i];
                n_l += 1;
            }
        }
        if n_l == 0 || n_l == members.len() {
            return None;
        }
        let (y_r, o_r) = (y_all - y_l, o_all - o_l);

        let depth = self.trees[t].node_depth(leaf);
        let ps = p_split(depth, self.cfg.alpha, self.cfg.beta_depth);
        let ps_child = p_split(depth + 1, self.cfg.alpha, self.cfg.beta_depth);
        let log_prior =
            ps.ln() + 2.0 * (1.0 - ps_child).ln() - (1.0 - ps).ln();

        let (a, b) = (self.a, self.b);
        let log_marginal = leaf_log_marginal(a, b, y_l, o_l)
            + leaf_log_marginal(a, b, y_r, o_r)
            - leaf_log_marginal(a, b, *y_all, *o_all);

        let n_leaves = self.trees[t].leaves().len();
        let (pg, _, _) = move_probs(&self.trees[t], &self.cfg);
        let mut grown = self.trees[t].clone();
        apply_grow_to(&mut grown, leaf, feature, cut);
        let (_, pp_new, _) = move_probs(&grown, &self.cfg);
        let n_prunable_new = grown.prunable().len();
        let log_proposal = (pp_new / n_prunable_new as f64).ln()
            - (pg / n_leaves as f64).ln();

        Some(log_prior + log_marginal + log_proposal)
    }

    fn apply_grow(&mut self, t: usize, leaf: usize, feature: usize, cut: f64) {
        apply_grow_to(&mut self.trees[t], leaf, feature, cut);
    }

    fn try_prune(&mut self, t: usize, stats: &LeafStats, rng: &mut impl Rng) -> bool {
        let prunable = self.trees[t].prunable();
        if prunable.is_empty() {
            return false;
        }
        let node = prunable[rng.gen_range(0..prunable.len())];
        let log_ratio = self.prune_log_ratio(t, stats, node);
        if (rng.gen::<f64>()).ln() < log_ratio {
            self.apply_prune(t, node);
            true
        } else {
            false
        }
    }

    /// Log acceptance ratio for collapsing `node` (both children leaves).
    fn prune_log_ratio(&self, t: usize, stats: &LeafStats, node: usize) -> f64 {
        let tree = &self.trees[t];
        let (left, right) = match tree.nodes[node] {
            TreeNode::Split { left, right, .. } => (left, right),
            TreeNode::Leaf { .. } => unreachable!("prune target must be internal"),
        };
        let zero = (0.0, 0.0, Vec::new());
        let (y_l, o_l, _) = stats.by_leaf.get(&left).unwrap_or(&zero);
        let (y_r, o_r, _) = stats.by_leaf.get(&right).unwrap_or(&zero);
        let (y_all, o_all) = (y_l + y_r, o_l + o_r);

        let depth = tree.node_depth(node);
        let ps = p_split(depth, self.cfg.alpha, self.cfg.beta_depth);
        let ps_child = p_split(depth + 1, self.cfg.alpha, self.cfg.beta_depth);
        let log_prior =
            (1.0 - ps).ln() - ps.ln() - 2.0 * (1.0 - ps_child).ln();

        let (a, b) = (self.a, self.b);
        let log_marginal = leaf_log_marginal(a, b, y_all, o_all)
            - leaf_log_marginal(a, b, *y_l, *o_l)
            - leaf_log_marginal(a, b, *y_r, *o_r);

        let n_prunable = tree.prunable().len();
        let (_, pp, _) = move_probs(tree, &self.cfg);
        let mut pruned = tree.clone();
        apply_prune_to(&mut pruned, node);
        let (pg_new, _, _) = move_probs(&pruned, &self.cfg);
        let n_leaves_new = pruned.leaves().len();
        let log_proposal = (pg_new / n_leaves_new as f64).ln()
            - (pp / n_prunable as f64).ln();

        log_prior + log_marginal + log_proposal
    }

    fn apply_prune(&mut self, t: usize, node: usize) {
        apply_prune_to(&mut self.trees[t], node);
    }

    fn try_change(&mut self, t: usize, stats: &LeafStats, rng: &mut impl Rng) -> bool {
        let prunable = self.trees[t].prunable();
        if prunable.is_empty() {
            return false;
        }
        let node = prunable[rng.gen_range(0..prunable.len())];
        let feature = rng.gen_range(0..self.cutpoints.len());
        if self.cutpoints[feature].is_empty() {
            return false;
        }
        let cut = self.cutpoints[feature][rng.gen_range(0..self.cutpoints[feature].len())];

        let tree = &self.trees[t];
        let (left, right) = match tree.nodes[node] {
            TreeNode::Split { left, right, .. } => (left, right),
            TreeNode::Leaf { .. } => unreachable!(),
        };
        let zero = (0.0, 0.0, Vec::new());
        let (y_l0, o_l0, m_l) = stats.by_leaf.get(&left).unwrap_or(&zero);
        let (y_r0, o_r0, m_r) = stats.by_leaf.get(&right).unwrap_or(&zero);
        let members: Vec<usize> = m_l.iter().chain(m_r.iter()).copied().collect();
        let (mut y_l, mut o_l, mut n_l) = (0.0, 0.0, 0usize);
        for &i in &members {
            if self.features[i][feature] <= cut {
                y_l += self.y[i];
                o_l += stats.weight[i];
                n_l += 1;
            }
        }
        if n_l == 0 || n_l == members.len() {
            return false;
        }
        let (y_all, o_all) = (y_l0 + y_r0, o_l0 + o_r0);
        let (y_r, o_r) = (y_all - y_l, o_all - o_l);
        let (a, b) = (self.a, self.b);
        let log_ratio = leaf_log_marginal(a, b, y_l, o_l) + leaf_log_marginal(a, b, y_r, o_r)
            - leaf_log_marginal(a, b, *y_l0, *o_l0)
            - leaf_log_marginal(a, b, *y_r0, *o_r0);
        if (rng.gen::<f64>()).ln() < log_ratio {
            if let TreeNode::Split { feature: f, cut: c, .. } = &mut self.trees[t].nodes[node] {
                *f = feature;
                *c = cut;
            }
            true
        } else {
            false
        }
    }

    /// Gamma full-conditional redraw of every leaf of tree `t` under its
    /// current (possibly just-moved) structure, updating the running log fit.
    fn redraw_leaves(&mut self, t: usize, other_log: &[f64], rng: &mut impl Rng) {
        let n = self.y.len();
        let mut assignment = vec![0usize; n];
        let mut by_leaf: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
        for leaf in self.trees[t].leaves() {
            by_leaf.insert(leaf, (0.0, 0.0));
        }
        for i in 0..n {
            let leaf = self.trees[t].leaf_index(&self.features[i]);
            assignment[i] = leaf;
            let entry = by_leaf.get_mut(&leaf).unwrap();
            entry.0 += self.y[i];
            entry.1 += self.offset[i] * other_log[i].exp();
        }
        let mut new_log_value: BTreeMap<usize, f64> = BTreeMap::new();
        for (&leaf, &(y_sum, o_sum)) in &by_leaf {
            let shape = self.a + y_sum;
            let rate = self.b + o_sum;
            let gamma = GammaDist::new(shape, 1.0 / rate).expect("positive Gamma parameters");
            let value: f64 = gamma.sample(rng).max(1e-300);
            new_log_value.insert(leaf, value.ln());
            if let TreeNode::Leaf { value: v } = &mut self.trees[t].nodes[leaf] {
                *v = value;
            }
        }
        for i in 0..n {
            self.log_fit[i] = other_log[i] + new_log_value[&assignment[i]];
        }
    }

    fn refresh_log_fit(&mut self) {
        for i in 0..self.y.len() {
            self.log_fit[i] = self
                .trees
                .iter()
                .map(|tree| tree.leaf_value(&self.features[i]).ln())
                .sum();
        }
    }
}

fn apply_grow_to(tree: &mut Tree, leaf: usize, feature: usize, cut: f64) {
    let old_value = match tree.nodes[leaf] {
        TreeNode::Leaf { value } => value,
        TreeNode::Split { .. } => unreachable!("grow target must be a leaf"),
    };
    let left = tree.nodes.len();
    tree.nodes.push(TreeNode::Leaf { value: old_value });
    let right = tree.nodes.len();
    tree.nodes.push(TreeNode::Leaf { value: old_value });
    tree.nodes[leaf] = TreeNode::Split {
        feature,
        cut,
        left,
        right,
    };
}

fn apply_prune_to(tree: &mut Tree, node: usize) {
    let (left, right) = match tree.nodes[node] {
        TreeNode::Split { left, right, .. } => (left, right),
        TreeNode::Leaf { .. } => unreachable!("prune target must be internal"),
    };
    tree.nodes[node] = TreeNode::Leaf { value: 1.0 };
    // orphaned children are compacted out
    let mut keep: Vec<usize> = Vec::with_capacity(tree.nodes.len());
    let mut remap = vec![usize::MAX; tree.nodes.len()];
    for idx in 0..tree.nodes.len() {
        if idx != left && idx != right {
            remap[idx] = keep.len();
            keep.push(idx);
        }
    }
    let mut new_nodes = Vec::with_capacity(keep.len());
    for &idx in &keep {
        let node = tree.nodes[idx].clone();
        new_nodes.push(match node {
            TreeNode::Split {
                feature,
                cut,
                left,
                right,
            } => TreeNode::Split {
                feature,
                cut,
                left: remap[left],
                right: remap[right],
            },
            leaf => leaf,
        });
    }
    tree.nodes = new_nodes;
}

/// Backfitting MCMC for the log-linear forest.
pub fn fit_loglinear_bart(table: &OutcomeTable, config: &BartConfig) -> Result<BartFit> {
    let mut sampler = BartSampler::new(table, *config)?;
    let mut rng = stream_rng(config.seed, stream::OUTCOME_FIT_BASE + 1);
    let mut draws = Vec::new();
    for iter in 0..config.n_iter {
        for t in 0..config.m {
            sampler.update_tree(t, &mut rng);
        }
        sampler.refresh_log_fit();
        if iter >= config.n_burn && (iter - config.n_burn) % config.n_thin == 0 {
            draws.push(TreeEnsemble {
                trees: sampler.trees.clone(),
            });
        }
    }
    let d = sampler.features[0].len();
    let mut feature_ranges = Vec::with_capacity(d);
    for k in 0..d {
        let lo = sampler.features.iter().map(|r| r[k]).fold(f64::INFINITY, f64::min);
        let hi = sampler
            .features
            .iter()
            .map(|r| r[k])
            .fold(f64::NEG_INFINITY, f64::max);
        feature_ranges.push((lo, hi));
    }
    Ok(BartFit {
        draws,
        leaf_shape: sampler.a,
        leaf_rate: sampler.b,
        acceptance_rate: if sampler.proposals > 0 {
            sampler.accepted as f64 / sampler.proposals as f64
        } else {
            0.0
        },
        feature_ranges,
    })
}

// ---------------------------------------------------------------------------
// Unified prediction over either model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum OutcomeModel {
    Glm(GlmFit),
    Bart(BartFit),
}

impl OutcomeModel {
    pub fn n_draws(&self) -> usize {
        match self {
            OutcomeModel::Glm(f) => f.draws.len(),
            OutcomeModel::Bart(f) => f.draws.len(),
        }
    }

    pub fn predict_rate(&self, draw: usize, x: &[f64], z: bool, g: f64, offset: f64) -> f64 {
        match self {
            OutcomeModel::Glm(f) => f.predict_rate(&f.draws[draw], x, z, g, offset),
            OutcomeModel::Bart(f) => f.predict_rate(draw, x, z, g, offset),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OutcomeModel::Glm(_) => "glm",
            OutcomeModel::Bart(_) => "bart",
        }
    }
}

// ---------------------------------------------------------------------------
// Model persistence (JSON lines, one draw per line)
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    model: String,
    n_draws: usize,
}

pub fn format_model_jsonl(model: &OutcomeModel) -> String {
    let mut out = String::new();
    let header = ModelHeader {
        format: "windshed-outcome-v1".into(),
        model: model.name().into(),
        n_draws: model.n_draws(),
    };
    let mut push_line = |value: String| {
        out.push_str(&value);
        out.push('\n');
    };
    push_line(serde_json::to_string(&header).expect("header serializes"));
    match model {
        OutcomeModel::Glm(f) => {
            let meta = serde_json::json!({
                "x_means": f.x_means,
                "x_sds": f.x_sds,
                "x_ranges": f.x_ranges,
                "g_range": f.g_range,
                "intercept_only": f.intercept_only,
                "acceptance_rate": f.acceptance_rate,
            });
            push_line(meta.to_string());
            for (draw, lp) in f.draws.iter().zip(&f.log_posterior) {
                let line = serde_json::json!({ "draw": draw, "log_posterior": lp });
                push_line(line.to_string());
            }
        }
        OutcomeModel::Bart(f) => {
            let meta = serde_json::json!({
                "leaf_shape": f.leaf_shape,
                "leaf_rate": f.leaf_rate,
                "feature_ranges": f.feature_ranges,
                "acceptance_rate": f.acceptance_rate,
            });
            push_line(meta.to_string());
            for draw in &f.draws {
                push_line(serde_json::to_string(draw).expect("ensemble serializes"));
            }
        }
    }
    out
}

pub fn write_model_jsonl(model: &OutcomeModel, path: impl AsRef<Path>) -> Result<()> {
    let path_str = path.as_ref().display().to_string();
    std::fs::write(path.as_ref(), format_model_jsonl(model)).map_err(|e| Error::io(&path_str, e))
}

// ---------------------------------------------------------------------------
// Moran's I
// ---------------------------------------------------------------------------

/// Row-standardized neighbor weights over regions. Regions without
/// neighbors are dropped and reported.
#[derive(Debug, Clone)]
pub struct SpatialWeights {
    pub ids: Vec<u32>,
    /// per region: (neighbor index, weight), weights summing to one
    pub neighbors: Vec<Vec<(usize, f64)>>,
    pub dropped: Vec<u32>,
}

/// Queen adjacency: regions are neighbors when any two of their cells touch
/// in the 8-neighborhood.
pub fn queen_weights(region_map: &RegionMap) -> Result<SpatialWeights> {
    let g = &region_map.grid;
    let mut pairs: std::collections::BTreeSet<(u32, u32)> = std::collections::BTreeSet::new();
    for row in 0..g.nrows {
        for col in 0..g.ncols {
            let a = region_map.labels[g.index(row, col)];
            if a == 0 {
                continue;
            }
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (r2, c2) = (row as i64 + dr, col as i64 + dc);
                    if r2 < 0 || c2 < 0 || r2 >= g.nrows as i64 || c2 >= g.ncols as i64 {
                        continue;
                    }
                    let b = region_map.labels[g.index(r2 as usize, c2 as usize)];
                    if b != 0 && b != a {
                        pairs.insert((a.min(b), a.max(b)));
                    }
                }
            }
        }
    }
    let all_ids = region_map.region_ids();
    build_weights(&all_ids, |id| {
        pairs
            .iter()
            .filter_map(|&(a, b)| {
                if a == id {
                    Some(b)
                } else if b == id {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    })
}

/// k-nearest-centroid weights: each region's neighbors are the k regions
/// with closest centroids (ties broken by smaller id).
pub fn knn_weights(region_map: &RegionMap, k: usize) -> Result<SpatialWeights> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    let centroids = crate::grid::region_centroids(region_map);
    let ids: Vec<u32> = centroids.keys().copied().collect();
    build_weights(&ids, |id| {
        let (cx, cy) = centroids[&id];
        let mut others: Vec<(f64, u32)> = centroids
            .iter()
            .filter(|(&other, _)| other != id)
            .map(|(&other, &(x, y))| ((x - cx).powi(2) + (y - cy).powi(2), other))
            .collect();
        others.sort_by(|a, b| a.partial_cmp(b).unwrap());
        others.into_iter().take(k).map(|(_, other)| other).collect()
    })
}

fn build_weights(
    ids: &[u32],
    neighbor_ids: impl Fn(u32) -> Vec<u32>,
) -> Result<SpatialWeights> {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut raw: Vec<Vec<u32>> = Vec::new();
    for &id in ids {
        let nbrs = neighbor_ids(id);
        if nbrs.is_empty() {
            dropped.push(id);
        } else {
            kept.push(id);
            raw.push(nbrs);
        }
    }
    let index: BTreeMap<u32, usize> = kept.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut neighbors = Vec::with_capacity(kept.len());
    for nbrs in raw {
        let resolved: Vec<(usize, f64)> = nbrs
            .iter()
            .filter_map(|id| index.get(id).map(|&i| (i, 0.0)))
            .collect();
        if resolved.is_empty() {
            return Err(Error::Validation(
                "a region's only neighbors were dropped as islands".into(),
            ));
        }
        let w = 1.0 / resolved.len() as f64;
        neighbors.push(resolved.into_iter().map(|(i, _)| (i, w)).collect());
    }
    Ok(SpatialWeights {
        ids: kept,
        neighbors,
        dropped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoranResult {
    pub statistic: f64,
    pub expected: f64,
    pub z_score: f64,
    pub p_value: f64,
}

/// Moran's I with the analytic normal approximation under the randomization
/// assumption. `values` must align with `weights.ids`.
pub fn morans_i(values: &[f64], weights: &SpatialWeights) -> Result<MoranResult> {
    let n = weights.ids.len();
    if values.len() != n {
        return Err(Error::Dimension(format!(
            "{} residuals for {} weighted regions",
            values.len(),
            n
        )));
    }
    if n < 10 {
        return Err(Error::Argument(format!(
            "Moran's I needs at least 10 regions, got {n}"
        )));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let ss: f64 = dev.iter().map(|d| d * d).sum();
    if ss == 0.0 {
        return Err(Error::Validation("residuals are constant".into()));
    }

    let mut w_dense: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut s0 = 0.0;
    let mut cross = 0.0;
    for (i, nbrs) in weights.neighbors.iter().enumerate() {
        for &(j, w) in nbrs {
            w_dense.insert((i, j), w);
            s0 += w;
            cross += w * dev[i] * dev[j];
        }
    }
    let statistic = (n as f64 / s0) * (cross / ss);

    let mut s1 = 0.0;
    for (&(i, j), &w) in &w_dense {
        let w_t = w_dense.get(&(j, i)).copied().unwrap_or(0.0);
        s1 += (w + w_t) * (w + w_t);
    }
    s1 *= 0.5;
    let mut row_sums = vec![0.0; n];
    let mut col_sums = vec![0.0; n];
    for (&(i, j), &w) in &w_dense {
        row_sums[i] += w;
        col_sums[j] += w;
    }
    let s2: f64 = (0..n).map(|i| (row_sums[i] + col_sums[i]).powi(2)).sum();
    let n_f = n as f64;
    let b2 = n_f * dev.iter().map(|d| d.powi(4)).sum::<f64>() / (ss * ss);
    let expected = -1.0 / (n_f - 1.0);
    let var = (n_f * ((n_f * n_f - 3.0 * n_f + 3.0) * s1 - n_f * s2 + 3.0 * s0 * s0)
        - b2 * ((n_f * n_f - n_f) * s1 - 2.0 * n_f * s2 + 6.0 * s0 * s0))
        / ((n_f - 1.0) * (n_f - 2.0) * (n_f - 3.0) * s0 * s0)
        - expected * expected;
    if !(var > 0.0) {
        return Err(Error::Numerical(format!(
            "Moran variance {var} is not positive; weight structure too degenerate"
        )));
    }
    let z_score = (statistic - expected) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let p_value = 2.0 * (1.0 - normal.cdf(z_score.abs()));
    Ok(MoranResult {
        statistic,
        expected,
        z_score,
        p_value,
    })
}
