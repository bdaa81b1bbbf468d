//! Causal estimands on the dose-response surface, computed by g-computation
//! over posterior outcome draws, with modular cut inference across K
//! interference imputations pooled by Rubin's rules.
//!
//! The cut posterior factorizes the joint: upwind exposures are imputed from
//! the transport posterior alone, and the outcome model is refitted per
//! imputation, so outcome data never feed back into the transport fit.

use crate::error::{Error, Result};
use crate::exposure::{posterior_exposures, ExposureInputs, PosteriorExposures};
use crate::outcome::{
    fit_loglinear_bart, fit_poisson_glm, BartConfig, GlmConfig, OutcomeModel, OutcomeTable,
};
use crate::transport::TransportParams;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

// ---------------------------------------------------------------------------
// Estimand grid
// ---------------------------------------------------------------------------

/// Evaluation points for the dose-response surface. Both treatment arms are
/// always evaluated; `g_min` anchors the indirect-effect contrasts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandGrid {
    pub g_values: Vec<f64>,
    pub g_min: f64,
}

impl EstimandGrid {
    pub fn new(g_values: Vec<f64>, g_min: f64) -> Result<Self> {
        if g_values.is_empty() {
            return Err(Error::Argument("estimand grid needs at least one g value".into()));
        }
        for w in g_values.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::Argument(format!(
                    "g values must be strictly increasing, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        for &g in &g_values {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::Argument(format!("g value {g} outside [0,1]")));
            }
        }
        if !(0.0..=1.0).contains(&g_min) {
            return Err(Error::Argument(format!("g_min {g_min} outside [0,1]")));
        }
        if g_min > g_values[0] {
            return Err(Error::Argument(format!(
                "g_min {} exceeds the smallest g value {}",
                g_min, g_values[0]
            )));
        }
        Ok(Self { g_values, g_min })
    }

    /// Warnings for evaluation points outside the central 5th-95th
    /// percentile band of the observed mean exposures.
    pub fn check_support(&self, mean_g: &[f64]) -> Vec<String> {
        if mean_g.is_empty() {
            return vec!["no exposures available to check estimand support".into()];
        }
        let mut sorted = mean_g.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = percentile(&sorted, 0.05);
        let hi = percentile(&sorted, 0.95);
        let mut warnings = Vec::new();
        for &g in self.g_values.iter().chain(std::iter::once(&self.g_min)) {
            if g < lo || g > hi {
                warnings.push(format!(
                    "estimand point g={g} lies outside the central exposure band [{lo:.3}, {hi:.3}]"
                ));
            }
        }
        warnings
    }
}

/// Linear-interpolation percentile of an already sorted slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

// ---------------------------------------------------------------------------
// Per-draw estimands
// ---------------------------------------------------------------------------

/// Per-draw μ̂(z,g): mean over regions of the predicted rate per unit
/// offset with (z,g) substituted, reported per 1000 offset units.
pub fn dose_response(
    model: &OutcomeModel,
    table: &OutcomeTable,
    z: bool,
    g: f64,
) -> Result<Vec<f64>> {
    let n = table.n();
    if n == 0 {
        return Err(Error::Validation("outcome table is empty".into()));
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| table.x_row(i)).collect();
    Ok((0..model.n_draws())
        .map(|d| {
            let total: f64 = rows
                .iter()
                .map(|x| model.predict_rate(d, x, z, g, 1.0))
                .sum();
            1000.0 * total / n as f64
        })
        .collect())
}

/// Per-draw DE(g) = μ̂(1,g) − μ̂(0,g).
pub fn direct_effect(model: &OutcomeModel, table: &OutcomeTable, g: f64) -> Result<Vec<f64>> {
    let treated = dose_response(model, table, true, g)?;
    let control = dose_response(model, table, false, g)?;
    Ok(treated
        .iter()
        .zip(&control)
        .map(|(t, c)| t - c)
        .collect())
}

/// Per-draw IE(z,g) = μ̂(z,g) − μ̂(z,g_min).
pub fn indirect_effect(
    model: &OutcomeModel,
    table: &OutcomeTable,
    z: bool,
    g: f64,
    g_min: f64,
) -> Result<Vec<f64>> {
    if g < g_min {
        return Err(Error::Argument(format!(
            "indirect effect needs g ({g}) at or above the baseline g_min ({g_min})"
        )));
    }
    let at_g = dose_response(model, table, z, g)?;
    let at_min = dose_response(model, table, z, g_min)?;
    Ok(at_g.iter().zip(&at_min).map(|(a, b)| a - b).collect())
}

/// Empirical weights P̂(g) over the estimand grid: each region's mean
/// exposure is assigned to its nearest grid point.
pub fn exposure_weights(grid: &EstimandGrid, mean_g: &[f64]) -> Result<Vec<f64>> {
    if mean_g.is_empty() {
        return Err(Error::Argument("exposure weights need at least one region".into()));
    }
    let mut counts = vec![0usize; grid.g_values.len()];
    for &g in mean_g {
        let nearest = grid
            .g_values
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                (*a - g)
                    .abs()
                    .partial_cmp(&(*b - g).abs())
                    .unwrap()
            })
            .map(|(i, _)| i)
            .unwrap();
        counts[nearest] += 1;
    }
    let total = mean_g.len() as f64;
    Ok(counts.iter().map(|&c| c as f64 / total).collect())
}

/// Per-draw ADE = Σ_g DE(g) P̂(g).
pub fn average_direct_effect(
    model: &OutcomeModel,
    table: &OutcomeTable,
    grid: &EstimandGrid,
    weights: &[f64],
) -> Result<Vec<f64>> {
    weighted_average(grid, weights, |g| direct_effect(model, table, g))
}

/// Per-draw AIE(z) = Σ_g IE(z,g) P̂(g).
pub fn average_indirect_effect(
    model: &OutcomeModel,
    table: &OutcomeTable,
    grid: &EstimandGrid,
    weights: &[f64],
    z: bool,
) -> Result<Vec<f64>> {
    weighted_average(grid, weights, |g| {
        indirect_effect(model, table, z, g, grid.g_min)
    })
}

fn weighted_average(
    grid: &EstimandGrid,
    weights: &[f64],
    per_g: impl Fn(f64) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    if weights.len() != grid.g_values.len() {
        return Err(Error::Dimension(format!(
            "{} weights for {} grid points",
            weights.len(),
            grid.g_values.len()
        )));
    }
    let mut acc: Option<Vec<f64>> = None;
    for (&g, &w) in grid.g_values.iter().zip(weights) {
        let vals = per_g(g)?;
        match &mut acc {
            None => acc = Some(vals.iter().map(|v| v * w).collect()),
            Some(a) => {
                for (ai, vi) in a.iter_mut().zip(&vals) {
                    *ai += w * vi;
                }
            }
        }
    }
    acc.ok_or_else(|| Error::Argument("estimand grid is empty".into()))
}

// ---------------------------------------------------------------------------
// Rubin pooling
// ---------------------------------------------------------------------------

/// Pooled estimate across imputations with the within/between variance
/// decomposition. `plugin_only` marks K=1, where the between terms vanish.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub within_var: f64,
    pub between_var: f64,
    pub total_var: f64,
    pub between_share: f64,
    pub k: usize,
    pub plugin_only: bool,
}

/// Rubin's combining rules over K imputation draw sets: point = mean of the
/// per-imputation means, total variance = W + (1+1/K)B, credible interval
/// from the pooled draw cloud's percentiles.
pub fn pool_cut(imputations: &[Vec<f64>]) -> Result<(EffectEstimate, Vec<String>)> {
    let k = imputations.len();
    if k == 0 {
        return Err(Error::Argument("pooling needs at least one imputation".into()));
    }
    let mut warnings = Vec::new();
    for (i, draws) in imputations.iter().enumerate() {
        if draws.len() < 2 {
            return Err(Error::Argument(format!(
                "imputation {i} has {} draws; at least 2 are needed for a variance",
                draws.len()
            )));
        }
        if draws.len() < 50 {
            warnings.push(format!(
                "imputation {i} has only {} draws; pooled variances will be noisy",
                draws.len()
            ));
        }
        if let Some(v) = draws.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "imputation {i} contains a non-finite draw {v}"
            )));
        }
    }

    let q: Vec<f64> = imputations
        .iter()
        .map(|d| d.iter().sum::<f64>() / d.len() as f64)
        .collect();
    let u: Vec<f64> = imputations
        .iter()
        .zip(&q)
        .map(|(d, &m)| d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (d.len() - 1) as f64)
        .collect();
    let point = q.iter().sum::<f64>() / k as f64;
    let within_var = u.iter().sum::<f64>() / k as f64;
    let between_var = if k > 1 {
        q.iter().map(|&qi| (qi - point) * (qi - point)).sum::<f64>() / (k - 1) as f64
    } else {
        0.0
    };
    let total_var = within_var + (1.0 + 1.0 / k as f64) * between_var;
    let between_share = if total_var > 0.0 {
        (1.0 + 1.0 / k as f64) * between_var / total_var
    } else {
        0.0
    };

    let mut pooled: Vec<f64> = imputations.iter().flatten().copied().collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let ci_low = percentile(&pooled, 0.025);
    let ci_high = percentile(&pooled, 0.975);

    Ok((
        EffectEstimate {
            point,
            ci_low,
            ci_high,
            within_var,
            between_var,
            total_var,
            between_share,
            k,
            plugin_only: k == 1,
        },
        warnings,
    ))
}

// ---------------------------------------------------------------------------
// Plug-in vs cut pipelines
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OutcomeModelConfig {
    Glm(GlmConfig),
    Bart(BartConfig),
}

impl OutcomeModelConfig {
    pub fn model_name(&self) -> &'static str {
        match self {
            OutcomeModelConfig::Glm(_) => "glm",
            OutcomeModelConfig::Bart(_) => "bart",
        }
    }
}

pub fn fit_outcome_model(table: &OutcomeTable, config: &OutcomeModelConfig) -> Result<OutcomeModel> {
    match config {
        OutcomeModelConfig::Glm(c) => Ok(OutcomeModel::Glm(fit_poisson_glm(table, c)?)),
        OutcomeModelConfig::Bart(c) => Ok(OutcomeModel::Bart(fit_loglinear_bart(table, c)?)),
    }
}

/// SHA-256 of the canonical text rendering of the transport draws; recorded
/// when draws are produced and checked when they are consumed, so outcome
/// data demonstrably never alter them.
pub fn theta_digest(draws: &[TransportParams]) -> String {
    let mut hasher = Sha256::new();
    for draw in draws {
        let mut line = String::new();
        for (i, v) in draw.to_array().iter().enumerate() {
            if i > 0 {
                line.push(',');
            }
            let _ = write!(line, "{v}");
        }
        line.push('\n');
        hasher.update(line.as_bytes());
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        let _ = write!(out, "{byte:02x}");
    }
    out
}

/// Evenly spaced draw indices used as cut imputations.
pub fn thinned_indices(n_draws: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Argument("need at least one imputation".into()));
    }
    if k > n_draws {
        return Err(Error::Argument(format!(
            "{k} imputations requested but only {n_draws} posterior draws are available"
        )));
    }
    Ok((0..k).map(|i| i * n_draws / k).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    pub estimand: String,
    pub z: Option<bool>,
    pub g: Option<f64>,
    pub estimate: EffectEstimate,
    pub method: String,
    pub model: String,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub model: OutcomeModelConfig,
    pub k_imputations: usize,
    pub grid: EstimandGrid,
}

#[derive(Debug, Clone)]
pub struct PluginCutResult {
    pub plugin: Vec<EffectRow>,
    pub cut: Vec<EffectRow>,
    pub theta_digest: String,
    pub mean_g: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Replaces a table's exposure columns with one imputation, matching regions
/// by id.
pub fn table_with_assignment(
    table: &OutcomeTable,
    region_ids: &[u32],
    z: &[bool],
    g: &[f64],
) -> Result<OutcomeTable> {
    let by_id: BTreeMap<u32, (bool, f64)> = region_ids
        .iter()
        .zip(z.iter().zip(g.iter()))
        .map(|(&id, (&zi, &gi))| (id, (zi, gi)))
        .collect();
    let mut missing = Vec::new();
    let mut new_z = Vec::with_capacity(table.n());
    let mut new_g = Vec::with_capacity(table.n());
    for &id in &table.region_ids {
        match by_id.get(&id) {
            Some(&(zi, gi)) => {
                new_z.push(zi);
                new_g.push(gi);
            }
            None => missing.push(id),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingRegion(missing));
    }
    OutcomeTable::new(
        table.region_ids.clone(),
        table.y.clone(),
        table.offset.clone(),
        table.x.clone(),
        new_z,
        new_g,
    )
}

/// All standard estimand rows for one fitted model: DE(g) and IE(z,g) over
/// the grid plus ADE and AIE(z), pooled across the given imputation fits.
fn estimand_rows(
    fits: &[(OutcomeModel, OutcomeTable)],
    grid: &EstimandGrid,
    weights: &[f64],
    method: &str,
    model_name: &str,
    warnings: &mut Vec<String>,
) -> Result<Vec<EffectRow>> {
    let mut rows = Vec::new();
    let mut push = |estimand: &str,
                    z: Option<bool>,
                    g: Option<f64>,
                    per_imputation: Vec<Vec<f64>>,
                    warnings: &mut Vec<String>|
     -> Result<()> {
        let (estimate, mut w) = pool_cut(&per_imputation)?;
        warnings.append(&mut w);
        rows.push(EffectRow {
            estimand: estimand.to_string(),
            z,
            g,
            estimate,
            method: method.to_string(),
            model: model_name.to_string(),
        });
        Ok(())
    };

    for &g in &grid.g_values {
        let de: Vec<Vec<f64>> = fits
            .iter()
            .map(|(m, t)| direct_effect(m, t, g))
            .collect::<Result<_>>()?;
        push("DE", None, Some(g), de, warnings)?;
        for z in [false, true] {
            let ie: Vec<Vec<f64>> = fits
                .iter()
                .map(|(m, t)| indirect_effect(m, t, z, g, grid.g_min))
                .collect::<Result<_>>()?;
            push("IE", Some(z), Some(g), ie, warnings)?;
        }
    }
    let ade: Vec<Vec<f64>> = fits
        .iter()
        .map(|(m, t)| average_direct_effect(m, t, grid, weights))
        .collect::<Result<_>>()?;
    push("ADE", None, None, ade, warnings)?;
    for z in [false, true] {
        let aie: Vec<Vec<f64>> = fits
            .iter()
            .map(|(m, t)| average_indirect_effect(m, t, grid, weights, z))
            .collect::<Result<_>>()?;
        push("AIE", Some(z), None, aie, warnings)?;
    }
    Ok(rows)
}

/// Runs the plug-in pipeline (exposures at the posterior mean, one outcome
/// fit) and the cut pipeline (K imputations, K fits, Rubin pooling) on the
/// same inputs, estimand grid, and outcome-model seed.
pub fn plugin_vs_cut(
    theta_draws: &[TransportParams],
    inputs: &ExposureInputs,
    table: &OutcomeTable,
    config: &PipelineConfig,
) -> Result<PluginCutResult> {
    if theta_draws.is_empty() {
        return Err(Error::Argument("no transport posterior draws supplied".into()));
    }
    let digest = theta_digest(theta_draws);
    let scrubbed: Vec<bool> = inputs.facilities.iter().map(|f| f.scrubbed).collect();

    let indices = thinned_indices(theta_draws.len(), config.k_imputations)?;
    let selected: Vec<TransportParams> = indices.iter().map(|&i| theta_draws[i]).collect();
    let exposures: PosteriorExposures = posterior_exposures(&selected, inputs, &scrubbed)?;

    let mut warnings = config.grid.check_support(&exposures.mean_g);
    let weights = exposure_weights(&config.grid, &exposures.mean_g)?;

    // plug-in arm: posterior-mean parameters, one exposure set, one fit
    let mut mean_arr = [0.0; 6];
    for draw in theta_draws {
        for (acc, v) in mean_arr.iter_mut().zip(draw.to_array()) {
            *acc += v;
        }
    }
    for acc in mean_arr.iter_mut() {
        *acc /= theta_draws.len() as f64;
    }
    let theta_bar = TransportParams::from_array(mean_arr);
    let plugin_exposures = posterior_exposures(&[theta_bar], inputs, &scrubbed)?;
    let plugin_assignment = &plugin_exposures.per_draw[0].assignment;
    let plugin_table = table_with_assignment(
        table,
        &plugin_assignment.region_ids,
        &plugin_assignment.z,
        &plugin_assignment.g,
    )?;
    let plugin_fit = fit_outcome_model(&plugin_table, &config.model)?;
    let plugin_rows = estimand_rows(
        &[(plugin_fit, plugin_table)],
        &config.grid,
        &weights,
        "plugin",
        config.model.model_name(),
        &mut warnings,
    )?;

    // cut arm: one outcome fit per imputation, identical fit seed throughout
    let cut_fits: Vec<(OutcomeModel, OutcomeTable)> = exposures
        .per_draw
        .par_iter()
        .map(|draw| {
            let t = table_with_assignment(
                table,
                &draw.assignment.region_ids,
                &draw.assignment.z,
                &draw.assignment.g,
            )?;
            let fit = fit_outcome_model(&t, &config.model)?;
            Ok((fit, t))
        })
        .collect::<Result<_>>()?;
    let cut_rows = estimand_rows(
        &cut_fits,
        &config.grid,
        &weights,
        "cut",
        config.model.model_name(),
        &mut warnings,
    )?;

    Ok(PluginCutResult {
        plugin: plugin_rows,
        cut: cut_rows,
        theta_digest: digest,
        mean_g: exposures.mean_g,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Tidy CSV output
// ---------------------------------------------------------------------------

pub const EFFECTS_HEADER: &str =
    "estimand,z,g,point,ci_low,ci_high,within_var,between_var,between_share,method,model";

pub fn format_effects_csv(rows: &[EffectRow]) -> String {
    let mut out = String::from(EFFECTS_HEADER);
    out.push('\n');
    for row in rows {
        let z = row
            .z
            .map(|z| if z { "1".to_string() } else { "0".to_string() })
            .unwrap_or_default();
        let g = row.g.map(|g| format!("{g}")).unwrap_or_default();
        let e = &row.estimate;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            row.estimand,
            z,
            g,
            e.point,
            e.ci_low,
            e.ci_high,
            e.within_var,
            e.between_var,
            e.between_share,
            row.method,
            row.model
        );
    }
    out
}

pub fn write_effects_csv(rows: &[EffectRow], path: impl AsRef<Path>) -> Result<()> {
    let path_str = path.as_ref().display().to_string();
    std::fs::write(path.as_ref(), format_effects_csv(rows)).map_err(|e| Error::io(&path_str, e))
}
