//! Synthetic scenario generation for every pipeline stage, plus the
//! end-to-end replication study comparing plug-in and cut inference.
//!
//! Generators reuse the production code paths: transport fields come from
//! the same operator assembly and sampling routines the likelihood uses,
//! and exposures come from the same source-receptor machinery the estimator
//! consumes.

use crate::effects::{plugin_vs_cut, EffectRow, EstimandGrid, OutcomeModelConfig, PipelineConfig};
use crate::error::{Error, Result};
use crate::exposure::{posterior_exposures, ExposureAssignment, ExposureInputs};
use crate::grid::{rasterize_sources, Facility, Field, RasterGrid, RegionMap};
use crate::kv::KvConfig;
use crate::mcmc::{run_chains, McmcConfig, PriorSpec};
use crate::outcome::OutcomeTable;
use crate::rng::{stream, stream_rng};
use crate::transport::{assemble_operators, CovarianceSettings, TransportData, TransportParams};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

// ---------------------------------------------------------------------------
// Scenario specification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum WindPattern {
    Zero,
    Uniform { u: f64, v: f64 },
    /// solid-body rotation about the grid center, scaled so the fastest
    /// cell moves at `max_speed`
    Rotational { max_speed: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FacilityPlacement {
    UniformRandom {
        count: usize,
        scrubbed_fraction: f64,
        emission_min: f64,
        emission_max: f64,
    },
    Fixed(Vec<Facility>),
}

impl FacilityPlacement {
    pub fn count(&self) -> usize {
        match self {
            FacilityPlacement::UniformRandom { count, .. } => *count,
            FacilityPlacement::Fixed(list) => list.len(),
        }
    }
}

/// Named response surfaces in the upwind exposure, each mapping [0,1] into
/// [0,1]; used to build outcome models that are nonlinear in g.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SurfaceKind {
    Sigmoid,
    Quadratic,
    Step,
    Sine,
    Bump,
}

impl SurfaceKind {
    pub fn shape(&self, g: f64) -> f64 {
        match self {
            SurfaceKind::Sigmoid => 1.0 / (1.0 + (-12.0 * (g - 0.5)).exp()),
            SurfaceKind::Quadratic => 4.0 * (g - 0.5) * (g - 0.5),
            SurfaceKind::Step => f64::from(g > 0.5),
            SurfaceKind::Sine => 0.5 * (1.0 + (2.0 * std::f64::consts::PI * g).sin()),
            SurfaceKind::Bump => (-((g - 0.6) / 0.15).powi(2)).exp(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SurfaceKind::Sigmoid => "sigmoid",
            SurfaceKind::Quadratic => "quadratic",
            SurfaceKind::Step => "step",
            SurfaceKind::Sine => "sine",
            SurfaceKind::Bump => "bump",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "sigmoid" => Ok(SurfaceKind::Sigmoid),
            "quadratic" => Ok(SurfaceKind::Quadratic),
            "step" => Ok(SurfaceKind::Step),
            "sine" => Ok(SurfaceKind::Sine),
            "bump" => Ok(SurfaceKind::Bump),
            other => Err(Error::Argument(format!(
                "unknown surface `{other}` (expected sigmoid, quadratic, step, sine, or bump)"
            ))),
        }
    }

    pub fn all() -> [SurfaceKind; 5] {
        [
            SurfaceKind::Sigmoid,
            SurfaceKind::Quadratic,
            SurfaceKind::Step,
            SurfaceKind::Sine,
            SurfaceKind::Bump,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OutcomeDgp {
    Glm {
        intercept: f64,
        beta: Vec<f64>,
        phi: f64,
        gamma: f64,
        psi: f64,
    },
    Nonlinear {
        intercept: f64,
        beta: Vec<f64>,
        phi: f64,
        amplitude: f64,
        surface: SurfaceKind,
    },
}

impl OutcomeDgp {
    pub fn log_rate(&self, x: &[f64], z: bool, g: f64) -> f64 {
        let zf = f64::from(z);
        match self {
            OutcomeDgp::Glm {
                intercept,
                beta,
                phi,
                gamma,
                psi,
            } => {
                let lin: f64 = beta.iter().zip(x).map(|(b, v)| b * v).sum();
                intercept + lin + phi * zf + gamma * g + psi * zf * g
            }
            OutcomeDgp::Nonlinear {
                intercept,
                beta,
                phi,
                amplitude,
                surface,
            } => {
                let lin: f64 = beta.iter().zip(x).map(|(b, v)| b * v).sum();
                intercept + lin + phi * zf + amplitude * surface.shape(g)
            }
        }
    }

    pub fn beta(&self) -> &[f64] {
        match self {
            OutcomeDgp::Glm { beta, .. } => beta,
            OutcomeDgp::Nonlinear { beta, .. } => beta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OffsetConfig {
    pub log_mean: f64,
    pub log_sd: f64,
}

impl OffsetConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.log_mean.is_finite() || !self.log_sd.is_finite() || self.log_sd < 0.0 {
            return Err(Error::Validation(format!(
                "offset log-normal needs finite log_mean and nonnegative log_sd, got ({}, {})",
                self.log_mean, self.log_sd
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub ncols: usize,
    pub nrows: usize,
    pub cell_size: f64,
    pub wind: WindPattern,
    pub placement: FacilityPlacement,
    pub true_params: TransportParams,
    pub n_regions: usize,
    pub n_covariates: usize,
    pub dgp: OutcomeDgp,
    pub offsets: OffsetConfig,
    pub emission_scale: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.placement.count() < 2 {
            return Err(Error::Validation(format!(
                "scenario needs at least 2 facilities, got {}",
                self.placement.count()
            )));
        }
        if self.n_regions < 10 {
            return Err(Error::Validation(format!(
                "scenario needs at least 10 regions, got {}",
                self.n_regions
            )));
        }
        if self.n_regions > self.ncols * self.nrows {
            return Err(Error::Validation(format!(
                "{} regions cannot tessellate a {}x{} grid",
                self.n_regions, self.ncols, self.nrows
            )));
        }
        if self.dgp.beta().len() != self.n_covariates {
            return Err(Error::Validation(format!(
                "DGP has {} covariate coefficients for {} covariates",
                self.dgp.beta().len(),
                self.n_covariates
            )));
        }
        if !(self.emission_scale > 0.0) {
            return Err(Error::Validation(format!(
                "emission_scale must be positive, got {}",
                self.emission_scale
            )));
        }
        self.true_params.validate()?;
        self.offsets.validate()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut spec = self.clone();
        spec.seed = seed;
        spec
    }

    /// Reads a scenario from flat `section.key = value` configuration.
    /// Facility placement from config is always uniform-random; fixed lists
    /// are for programmatic use.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let wind = match kv.require("wind.pattern")? {
            "zero" => WindPattern::Zero,
            "uniform" => WindPattern::Uniform {
                u: kv.f64_or("wind.u", 0.0)?,
                v: kv.f64_or("wind.v", 0.0)?,
            },
            "rotational" => WindPattern::Rotational {
                max_speed: kv.f64_or("wind.max_speed", 1.0)?,
            },
            other => {
                return Err(Error::Argument(format!(
                    "unknown wind pattern `{other}` (expected zero, uniform, or rotational)"
                )))
            }
        };
        let placement = FacilityPlacement::UniformRandom {
            count: kv.usize_or("facilities.count", 4)?,
            scrubbed_fraction: kv.f64_or("facilities.scrubbed_fraction", 0.5)?,
            emission_min: kv.f64_or("facilities.emission_min", 20.0)?,
            emission_max: kv.f64_or("facilities.emission_max", 80.0)?,
        };
        let true_params = TransportParams {
            diffusion: kv.f64_or("transport.diffusion", 1.0)?,
            advection: kv.f64_or("transport.advection", 1.0)?,
            oxidation: kv.f64_or("transport.oxidation", 0.3)?,
            deposition: kv.f64_or("transport.deposition", 0.5)?,
            noise_var: kv.f64_or("transport.noise_var", 0.01)?,
            background: kv.f64_or("transport.background", 1.0)?,
        };
        let n_covariates = kv.usize_or("covariates.count", 0)?;
        let beta = match kv.get("dgp.beta") {
            Some(list) => parse_f64_list(list)?,
            None => vec![0.0; n_covariates],
        };
        let dgp = match kv.require("dgp.kind")? {
            "glm" => OutcomeDgp::Glm {
                intercept: kv.f64_or("dgp.intercept", -4.0)?,
                beta,
                phi: kv.f64_or("dgp.phi", 0.0)?,
                gamma: kv.f64_or("dgp.gamma", 0.0)?,
                psi: kv.f64_or("dgp.psi", 0.0)?,
            },
            "nonlinear" => OutcomeDgp::Nonlinear {
                intercept: kv.f64_or("dgp.intercept", -4.0)?,
                beta,
                phi: kv.f64_or("dgp.phi", 0.0)?,
                amplitude: kv.f64_or("dgp.amplitude", 1.0)?,
                surface: SurfaceKind::parse(kv.require("dgp.surface")?)?,
            },
            other => {
                return Err(Error::Argument(format!(
                    "unknown dgp kind `{other}` (expected glm or nonlinear)"
                )))
            }
        };
        let spec = Self {
            ncols: kv.usize_or("grid.ncols", 12)?,
            nrows: kv.usize_or("grid.nrows", 12)?,
            cell_size: kv.f64_or("grid.cell_size", 1.0)?,
            wind,
            placement,
            true_params,
            n_regions: kv.usize_or("regions.count", 30)?,
            n_covariates,
            dgp,
            offsets: OffsetConfig {
                log_mean: kv.f64_or("offsets.log_mean", 5.0)?,
                log_sd: kv.f64_or("offsets.log_sd", 0.5)?,
            },
            emission_scale: kv.f64_or("emission_scale", 1.0)?,
            seed: kv.u64_or("seed", 0)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

pub fn parse_f64_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|part| {
            let part = part.trim();
            part.parse::<f64>()
                .map_err(|_| Error::Argument(format!("`{part}` is not a number")))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Scenario realization
// ---------------------------------------------------------------------------

/// The fixed geometry of a scenario: everything except the stochastic
/// transport noise, covariates, and outcomes.
#[derive(Debug, Clone)]
pub struct ScenarioRealization {
    pub grid: RasterGrid,
    pub wind_u: Field,
    pub wind_v: Field,
    pub facilities: Vec<Facility>,
    pub region_map: RegionMap,
    pub sources: Field,
    pub emission_scale: f64,
}

impl ScenarioRealization {
    pub fn exposure_inputs(&self) -> ExposureInputs<'_> {
        ExposureInputs {
            grid: &self.grid,
            wind_u: &self.wind_u,
            wind_v: &self.wind_v,
            facilities: &self.facilities,
            region_map: &self.region_map,
            emission_scale: self.emission_scale,
        }
    }

    pub fn scrubbed(&self) -> Vec<bool> {
        self.facilities.iter().map(|f| f.scrubbed).collect()
    }
}

pub fn wind_fields(grid: &RasterGrid, pattern: &WindPattern) -> (Field, Field) {
    let n = grid.n_cells();
    match *pattern {
        WindPattern::Zero => (
            Field::zeros(grid.clone()),
            Field::zeros(grid.clone()),
        ),
        WindPattern::Uniform { u, v } => (
            Field::constant(grid.clone(), u),
            Field::constant(grid.clone(), v),
        ),
        WindPattern::Rotational { max_speed } => {
            let xc = grid.x_origin + 0.5 * grid.ncols as f64 * grid.cell_size;
            let yc = grid.y_origin + 0.5 * grid.nrows as f64 * grid.cell_size;
            let mut r_max: f64 = 0.0;
            let mut centers = Vec::with_capacity(n);
            for idx in 0..n {
                let (x, y) = grid.cell_center(idx);
                let r = ((x - xc).powi(2) + (y - yc).powi(2)).sqrt();
                r_max = r_max.max(r);
                centers.push((x, y));
            }
            let omega = if r_max > 0.0 { max_speed / r_max } else { 0.0 };
            let u: Vec<f64> = centers.iter().map(|&(_, y)| -omega * (y - yc)).collect();
            let v: Vec<f64> = centers.iter().map(|&(x, _)| omega * (x - xc)).collect();
            (
                Field::new(grid.clone(), u).expect("wind magnitudes are finite"),
                Field::new(grid.clone(), v).expect("wind magnitudes are finite"),
            )
        }
    }
}

/// Contiguous random tessellation by simultaneous breadth-first growth from
/// N seed cells (4-connectivity), labels 1..=N.
pub fn tessellate_regions(grid: &RasterGrid, n_regions: usize, seed: u64) -> Result<RegionMap> {
    let n_cells = grid.n_cells();
    if n_regions == 0 || n_regions > n_cells {
        return Err(Error::Argument(format!(
            "cannot place {n_regions} region seeds on {n_cells} cells"
        )));
    }
    let mut rng = stream_rng(seed, stream::REGION_TESSELLATION);
    let mut cells: Vec<usize> = (0..n_cells).collect();
    cells.shuffle(&mut rng);
    let mut labels = vec![0u32; n_cells];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (k, &cell) in cells.iter().take(n_regions).enumerate() {
        labels[cell] = (k + 1) as u32;
        queue.push_back(cell);
    }
    while let Some(cell) = queue.pop_front() {
        let label = labels[cell];
        let row = cell / grid.ncols;
        let col = cell % grid.ncols;
        let mut visit = |r: i64, c: i64| {
            if r < 0 || c < 0 || r >= grid.nrows as i64 || c >= grid.ncols as i64 {
                return;
            }
            let idx = r as usize * grid.ncols + c as usize;
            if labels[idx] == 0 {
                labels[idx] = label;
                queue.push_back(idx);
            }
        };
        visit(row as i64 - 1, col as i64);
        visit(row as i64 + 1, col as i64);
        visit(row as i64, col as i64 - 1);
        visit(row as i64, col as i64 + 1);
    }
    RegionMap::new(grid.clone(), labels)
}

fn place_facilities(grid: &RasterGrid, placement: &FacilityPlacement, seed: u64) -> Vec<Facility> {
    match placement {
        FacilityPlacement::Fixed(list) => list.clone(),
        FacilityPlacement::UniformRandom {
            count,
            scrubbed_fraction,
            emission_min,
            emission_max,
        } => {
            let mut rng = stream_rng(seed, stream::SCENARIO_LAYOUT);
            let width = grid.ncols as f64 * grid.cell_size;
            let height = grid.nrows as f64 * grid.cell_size;
            let n_scrubbed = (*count as f64 * scrubbed_fraction).round() as usize;
            let mut order: Vec<usize> = (0..*count).collect();
            order.shuffle(&mut rng);
            let mut scrubbed = vec![false; *count];
            for &j in order.iter().take(n_scrubbed) {
                scrubbed[j] = true;
            }
            (0..*count)
                .map(|j| Facility {
                    id: format!("f{:02}", j + 1),
                    x: grid.x_origin + rng.gen_range(0.0..width),
                    y: grid.y_origin + rng.gen_range(0.0..height),
                    so2_tons: rng.gen_range(*emission_min..*emission_max),
                    scrubbed: scrubbed[j],
                    heat_input: rng.gen_range(100.0..900.0),
                    operating_time: rng.gen_range(5000.0..8760.0),
                })
                .collect()
        }
    }
}

pub fn build_scenario(spec: &ScenarioSpec) -> Result<ScenarioRealization> {
    spec.validate()?;
    let grid = RasterGrid::new(spec.ncols, spec.nrows, spec.cell_size, 0.0, 0.0, -9999.0)?;
    let (wind_u, wind_v) = wind_fields(&grid, &spec.wind);
    let facilities = place_facilities(&grid, &spec.placement, spec.seed);
    let region_map = tessellate_regions(&grid, spec.n_regions, spec.seed)?;
    let sources = rasterize_sources(&facilities, &grid, spec.emission_scale)?;
    Ok(ScenarioRealization {
        grid,
        wind_u,
        wind_v,
        facilities,
        region_map,
        sources,
        emission_scale: spec.emission_scale,
    })
}

// ---------------------------------------------------------------------------
// Stage generators
// ---------------------------------------------------------------------------

/// One Gaussian realization of the observed sulfate surface under the true
/// parameters, through the production operator and sampling code.
pub fn sample_transport_field(
    realization: &ScenarioRealization,
    params: &TransportParams,
    seed: u64,
) -> Result<Field> {
    let ops = assemble_operators(
        &realization.grid,
        &realization.wind_u,
        &realization.wind_v,
        params,
    )?
    .factor()?;
    let mut rng = stream_rng(seed, stream::TRANSPORT_NOISE);
    ops.sample_observation(&realization.sources, params, &mut rng)
}

pub fn simulate_transport_field(spec: &ScenarioSpec) -> Result<Field> {
    let realization = build_scenario(spec)?;
    sample_transport_field(&realization, &spec.true_params, spec.seed)
}

/// Upwind exposures under the true transport parameters, used to generate
/// outcomes.
pub fn true_exposures(
    realization: &ScenarioRealization,
    params: &TransportParams,
) -> Result<ExposureAssignment> {
    let scrubbed = realization.scrubbed();
    let post = posterior_exposures(&[*params], &realization.exposure_inputs(), &scrubbed)?;
    Ok(post.per_draw[0].assignment.clone())
}

/// Covariates, offsets, and Poisson outcomes for one replicate, keyed by
/// the spec seed.
pub fn simulate_outcomes(
    spec: &ScenarioSpec,
    assignment: &ExposureAssignment,
) -> Result<OutcomeTable> {
    spec.validate()?;
    let n = assignment.region_ids.len();
    if n == 0 {
        return Err(Error::Validation("exposure assignment is empty".into()));
    }
    let mut cov_rng = stream_rng(spec.seed, stream::COVARIATES);
    let x: Vec<Vec<f64>> = (0..spec.n_covariates)
        .map(|_| (0..n).map(|_| cov_rng.sample(StandardNormal)).collect())
        .collect();
    let offsets: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = cov_rng.sample(StandardNormal);
            (spec.offsets.log_mean + spec.offsets.log_sd * z).exp()
        })
        .collect();

    let mut y_rng = stream_rng(spec.seed, stream::OUTCOME_DRAW);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let xi: Vec<f64> = x.iter().map(|col| col[i]).collect();
        let mu = offsets[i]
            * spec
                .dgp
                .log_rate(&xi, assignment.z[i], assignment.g[i])
                .exp();
        if !mu.is_finite() {
            return Err(Error::Validation(format!(
                "outcome rate overflowed for region {}",
                assignment.region_ids[i]
            )));
        }
        let draw = Poisson::new(mu.max(f64::MIN_POSITIVE))
            .map_err(|e| Error::Numerical(format!("Poisson rate {mu}: {e}")))?
            .sample(&mut y_rng);
        y.push(draw as u64);
    }
    OutcomeTable::new(
        assignment.region_ids.clone(),
        y,
        offsets,
        x,
        assignment.z.clone(),
        assignment.g.clone(),
    )
}

// ---------------------------------------------------------------------------
// True dose-response
// ---------------------------------------------------------------------------

/// Closed-form population μ(z,g) for the log-linear DGP with standard
/// normal covariates: 1000·exp(intercept + ½Σβ² + φz + γg + ψzg).
pub fn glm_true_dose_response(dgp: &OutcomeDgp, z: bool, g: f64) -> Result<f64> {
    match dgp {
        OutcomeDgp::Glm {
            intercept,
            beta,
            phi,
            gamma,
            psi,
        } => {
            let zf = f64::from(z);
            let quad: f64 = 0.5 * beta.iter().map(|b| b * b).sum::<f64>();
            Ok(1000.0 * (intercept + quad + phi * zf + gamma * g + psi * zf * g).exp())
        }
        OutcomeDgp::Nonlinear { .. } => Err(Error::Argument(
            "closed-form dose-response only exists for the log-linear DGP".into(),
        )),
    }
}

/// Monte Carlo population μ(z,g) over fresh standard normal covariates,
/// with its own oracle seed stream.
pub fn mc_dose_response(
    dgp: &OutcomeDgp,
    n_covariates: usize,
    z: bool,
    g: f64,
    n_samples: usize,
    seed: u64,
) -> f64 {
    let mut rng = stream_rng(seed, stream::TRUTH_ORACLE);
    let mut total = 0.0;
    let mut x = vec![0.0; n_covariates];
    for _ in 0..n_samples {
        for v in x.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        total += dgp.log_rate(&x, z, g).exp();
    }
    1000.0 * total / n_samples as f64
}

/// Population μ(z,g) for any DGP: closed form when available, otherwise the
/// fixed-size Monte Carlo oracle.
pub fn true_dose_response(spec: &ScenarioSpec, z: bool, g: f64, mc_samples: usize) -> f64 {
    match &spec.dgp {
        OutcomeDgp::Glm { .. } => glm_true_dose_response(&spec.dgp, z, g).expect("glm dgp"),
        OutcomeDgp::Nonlinear { .. } => {
            mc_dose_response(&spec.dgp, spec.n_covariates, z, g, mc_samples, spec.seed)
        }
    }
}

// ---------------------------------------------------------------------------
// Replication study
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ReplicationConfig {
    pub n_replicates: usize,
    pub k_imputations: usize,
    pub model: OutcomeModelConfig,
    pub mcmc: McmcConfig,
    pub grid: EstimandGrid,
    pub mc_truth_samples: usize,
}

/// Operating characteristics of one estimand under one method, aggregated
/// over replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingRow {
    pub estimand: String,
    pub z: Option<bool>,
    pub g: Option<f64>,
    pub method: String,
    pub model: String,
    pub truth: f64,
    pub bias: f64,
    pub rmse: f64,
    pub mean_ci_width: f64,
    pub coverage: f64,
    pub n_ok: usize,
    pub n_failed: usize,
}

fn estimand_key(row: &EffectRow) -> (String, Option<bool>, Option<u64>) {
    (row.estimand.clone(), row.z, row.g.map(f64::to_bits))
}

/// Truth for one estimand row; ADE/AIE rows have data-dependent weights and
/// get no oracle value.
fn row_truth(spec: &ScenarioSpec, grid: &EstimandGrid, row: &EffectRow, mc: usize) -> Option<f64> {
    let g = row.g?;
    match row.estimand.as_str() {
        "DE" => Some(
            true_dose_response(spec, true, g, mc) - true_dose_response(spec, false, g, mc),
        ),
        "IE" => {
            let z = row.z?;
            Some(
                true_dose_response(spec, z, g, mc)
                    - true_dose_response(spec, z, grid.g_min, mc),
            )
        }
        _ => None,
    }
}

/// Full pipeline for one replicate: transport realization, transport fit,
/// exposures, outcomes, both effect pipelines.
fn run_replicate(
    spec: &ScenarioSpec,
    realization: &ScenarioRealization,
    assignment: &ExposureAssignment,
    config: &ReplicationConfig,
    replicate: usize,
) -> Result<Vec<EffectRow>> {
    let rep_seed: u64 =
        stream_rng(spec.seed, stream::REPLICATE_BASE + replicate as u64).gen();
    let observed = sample_transport_field(realization, &spec.true_params, rep_seed)?;
    let data = TransportData::new(
        realization.wind_u.clone(),
        realization.wind_v.clone(),
        realization.sources.clone(),
        observed,
        CovarianceSettings::default(),
    )?;
    let mcmc = McmcConfig {
        seed: rep_seed,
        ..config.mcmc
    };
    let chains = run_chains(&data, &PriorSpec::default(), &mcmc)?;
    let theta_draws: Vec<TransportParams> =
        chains.iter().flat_map(|c| c.draws.iter().copied()).collect();

    let rep_spec = spec.with_seed(rep_seed);
    let table = simulate_outcomes(&rep_spec, assignment)?;

    let pipeline = PipelineConfig {
        model: config.model,
        k_imputations: config.k_imputations,
        grid: config.grid.clone(),
    };
    let result = plugin_vs_cut(&theta_draws, &realization.exposure_inputs(), &table, &pipeline)?;
    let mut rows = result.plugin;
    rows.extend(result.cut);
    Ok(rows)
}

pub fn run_replication_study(
    spec: &ScenarioSpec,
    config: &ReplicationConfig,
) -> Result<Vec<OperatingRow>> {
    if config.n_replicates < 20 {
        return Err(Error::Argument(format!(
            "replication study needs at least 20 replicates, got {}",
            config.n_replicates
        )));
    }
    spec.validate()?;
    let realization = build_scenario(spec)?;
    let assignment = true_exposures(&realization, &spec.true_params)?;

    let outcomes: Vec<Result<Vec<EffectRow>>> = (0..config.n_replicates)
        .into_par_iter()
        .map(|r| run_replicate(spec, &realization, &assignment, config, r))
        .collect();

    let mut per_estimand: Vec<((String, Option<bool>, Option<u64>), EffectRowStats)> = Vec::new();
    let mut n_failed = 0usize;
    for outcome in &outcomes {
        match outcome {
            Err(_) => n_failed += 1,
            Ok(rows) => {
                for row in rows {
                    let key = (estimand_key(row), row.method.clone());
                    let slot = per_estimand.iter_mut().find(|(k, s)| *k == key.0 && s.method == key.1);
                    let stats = match slot {
                        Some((_, s)) => s,
                        None => {
                            per_estimand.push((
                                key.0.clone(),
                                EffectRowStats {
                                    method: key.1.clone(),
                                    model: row.model.clone(),
                                    template: row.clone(),
                                    points: Vec::new(),
                                    widths: Vec::new(),
                                },
                            ));
                            &mut per_estimand.last_mut().unwrap().1
                        }
                    };
                    stats.points.push(row.estimate.point);
                    stats
                        .widths
                        .push(row.estimate.ci_high - row.estimate.ci_low);
                }
            }
        }
    }
    let n_ok = config.n_replicates - n_failed;
    if n_ok == 0 {
        return Err(Error::Numerical(
            "every replicate failed; no operating characteristics to report".into(),
        ));
    }

    let mut results = Vec::new();
    for (_, stats) in per_estimand.iter_mut() {
        let truth = match row_truth(spec, &config.grid, &stats.template, config.mc_truth_samples) {
            Some(t) => t,
            None => continue,
        };
        // coverage recounted against the oracle value
        let mut covered = 0usize;
        for outcome in outcomes.iter().flatten() {
            for row in outcome {
                if estimand_key(row) == estimand_key(&stats.template)
                    && row.method == stats.method
                    && row.estimate.ci_low <= truth
                    && truth <= row.estimate.ci_high
                {
                    covered += 1;
                }
            }
        }
        let k = stats.points.len() as f64;
        let bias = stats.points.iter().map(|p| p - truth).sum::<f64>() / k;
        let rmse = (stats.points.iter().map(|p| (p - truth) * (p - truth)).sum::<f64>() / k).sqrt();
        let mean_ci_width = stats.widths.iter().sum::<f64>() / k;
        results.push(OperatingRow {
            estimand: stats.template.estimand.clone(),
            z: stats.template.z,
            g: stats.template.g,
            method: stats.method.clone(),
            model: stats.model.clone(),
            truth,
            bias,
            rmse,
            mean_ci_width,
            coverage: covered as f64 / k,
            n_ok,
            n_failed,
        });
    }
    Ok(results)
}

struct EffectRowStats {
    method: String,
    model: String,
    template: EffectRow,
    points: Vec<f64>,
    widths: Vec<f64>,
}

pub const REPLICATION_HEADER: &str =
    "estimand,z,g,method,model,truth,bias,rmse,mean_ci_width,coverage,n_ok,n_failed";

pub fn format_replication_csv(rows: &[OperatingRow]) -> String {
    let mut out = String::from(REPLICATION_HEADER);
    out.push('\n');
    for row in rows {
        let z = row
            .z
            .map(|z| if z { "1".to_string() } else { "0".to_string() })
            .unwrap_or_default();
        let g = row.g.map(|g| format!("{g}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            row.estimand,
            z,
            g,
            row.method,
            row.model,
            row.truth,
            row.bias,
            row.rmse,
            row.mean_ci_width,
            row.coverage,
            row.n_ok,
            row.n_failed
        );
    }
    out
}

pub fn write_replication_csv(rows: &[OperatingRow], path: impl AsRef<Path>) -> Result<()> {
    let path_str = path.as_ref().display().to_string();
    std::fs::write(path.as_ref(), format_replication_csv(rows))
        .map_err(|e| Error::io(&path_str, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> ScenarioSpec {
        ScenarioSpec {
            ncols: 10,
            nrows: 10,
            cell_size: 1.0,
            wind: WindPattern::Uniform { u: 0.8, v: -0.3 },
            placement: FacilityPlacement::UniformRandom {
                count: 4,
                scrubbed_fraction: 0.5,
                emission_min: 20.0,
                emission_max: 80.0,
            },
            true_params: TransportParams {
                diffusion: 1.0,
                advection: 1.0,
                oxidation: 0.4,
                deposition: 0.6,
                noise_var: 0.01,
                background: 1.0,
            },
            n_regions: 12,
            n_covariates: 2,
            dgp: OutcomeDgp::Glm {
                intercept: -4.0,
                beta: vec![0.3, -0.2],
                phi: 0.4,
                gamma: -0.8,
                psi: 0.2,
            },
            offsets: OffsetConfig {
                log_mean: 5.0,
                log_sd: 0.4,
            },
            emission_scale: 1.0,
            seed: 11,
        }
    }

    #[test]
    fn tessellation_covers_grid_with_contiguous_regions() {
        let grid = RasterGrid::new(15, 12, 1.0, 0.0, 0.0, -9999.0).unwrap();
        let rm = tessellate_regions(&grid, 20, 3).unwrap();
        assert!(rm.labels.iter().all(|&l| l >= 1 && l <= 20));
        assert_eq!(rm.region_ids().len(), 20);
        // contiguity: flood fill from one cell of each region reaches all of it
        for region in 1..=20u32 {
            let cells: Vec<usize> = (0..grid.n_cells())
                .filter(|&i| rm.labels[i] == region)
                .collect();
            let mut seen = vec![false; grid.n_cells()];
            let mut queue = VecDeque::from([cells[0]]);
            seen[cells[0]] = true;
            let mut reached = 0;
            while let Some(cell) = queue.pop_front() {
                reached += 1;
                let (r, c) = (cell / 15, cell % 15);
                for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (r2, c2) = (r as i64 + dr, c as i64 + dc);
                    if r2 < 0 || c2 < 0 || r2 >= 12 || c2 >= 15 {
                        continue;
                    }
                    let idx = r2 as usize * 15 + c2 as usize;
                    if !seen[idx] && rm.labels[idx] == region {
                        seen[idx] = true;
                        queue.push_back(idx);
                    }
                }
            }
            assert_eq!(reached, cells.len(), "region {region} is disconnected");
        }
    }

    #[test]
    fn tessellation_is_seed_deterministic() {
        let grid = RasterGrid::new(9, 9, 1.0, 0.0, 0.0, -9999.0).unwrap();
        let a = tessellate_regions(&grid, 11, 5).unwrap();
        let b = tessellate_regions(&grid, 11, 5).unwrap();
        let c = tessellate_regions(&grid, 11, 6).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn wind_patterns_have_expected_structure() {
        let grid = RasterGrid::new(8, 8, 2.0, 0.0, 0.0, -9999.0).unwrap();
        let (u, v) = wind_fields(&grid, &WindPattern::Zero);
        assert!(u.values.iter().chain(&v.values).all(|&w| w == 0.0));

        let (u, v) = wind_fields(&grid, &WindPattern::Uniform { u: 1.5, v: -0.5 });
        assert!(u.values.iter().all(|&w| w == 1.5));
        assert!(v.values.iter().all(|&w| w == -0.5));

        let (u, v) = wind_fields(&grid, &WindPattern::Rotational { max_speed: 2.0 });
        let speed_max = u
            .values
            .iter()
            .zip(&v.values)
            .map(|(a, b)| (a * a + b * b).sqrt())
            .fold(0.0f64, f64::max);
        assert!((speed_max - 2.0).abs() < 1e-10, "max speed {speed_max}");
        // opposite corners rotate in opposite directions
        let i_sw = grid.index(7, 0);
        let i_ne = grid.index(0, 7);
        assert!(u.values[i_sw] * u.values[i_ne] < 0.0);
        assert!(v.values[i_sw] * v.values[i_ne] < 0.0);
    }

    #[test]
    fn scenario_build_is_deterministic() {
        let spec = small_spec();
        let a = build_scenario(&spec).unwrap();
        let b = build_scenario(&spec).unwrap();
        assert_eq!(a.facilities, b.facilities);
        assert_eq!(a.region_map.labels, b.region_map.labels);
        assert_eq!(a.sources.values, b.sources.values);
        let scrubbed = a.facilities.iter().filter(|f| f.scrubbed).count();
        assert_eq!(scrubbed, 2);
        for f in &a.facilities {
            assert!(a.grid.cell_at(f.x, f.y).is_some(), "facility {} off-grid", f.id);
        }
    }

    #[test]
    fn vanishing_noise_reproduces_the_steady_state_mean() {
        let mut spec = small_spec();
        spec.true_params.noise_var = 1e-12;
        let realization = build_scenario(&spec).unwrap();
        let observed =
            sample_transport_field(&realization, &spec.true_params, spec.seed).unwrap();
        let ops = assemble_operators(
            &realization.grid,
            &realization.wind_u,
            &realization.wind_v,
            &spec.true_params,
        )
        .unwrap()
        .factor()
        .unwrap();
        let mean = ops
            .steady_state_mean(&realization.sources, &spec.true_params)
            .unwrap();
        let max_dev = observed
            .values
            .iter()
            .zip(&mean.values)
            .map(|(o, m)| (o - (spec.true_params.background + m)).abs())
            .fold(0.0f64, f64::max);
        assert!(max_dev < 1e-4, "max deviation {max_dev}");
    }

    #[test]
    fn transport_field_sampling_is_reproducible() {
        let spec = small_spec();
        let a = simulate_transport_field(&spec).unwrap();
        let b = simulate_transport_field(&spec).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn sample_covariance_matches_dense_oracle_on_5x5() {
        let mut spec = small_spec();
        spec.ncols = 5;
        spec.nrows = 5;
        spec.n_regions = 10;
        // diffusion-dominated so every pair of cells is strongly correlated,
        // keeping the Monte Carlo relative error on off-diagonals small
        spec.wind = WindPattern::Uniform { u: 0.5, v: -0.2 };
        spec.true_params = TransportParams {
            diffusion: 8.0,
            advection: 1.0,
            oxidation: 0.1,
            deposition: 0.1,
            noise_var: 0.09,
            background: 1.0,
        };
        let realization = build_scenario(&spec).unwrap();
        let n = 25;

        let draws = 2000;
        let mut sums = vec![0.0; n];
        let mut fields = Vec::with_capacity(draws);
        for r in 0..draws {
            let f = sample_transport_field(&realization, &spec.true_params, 7000 + r as u64)
                .unwrap();
            for (s, v) in sums.iter_mut().zip(&f.values) {
                *s += v;
            }
            fields.push(f.values);
        }
        let means: Vec<f64> = sums.iter().map(|s| s / draws as f64).collect();
        let mut sample_cov = vec![0.0; n * n];
        for f in &fields {
            for i in 0..n {
                for j in 0..n {
                    sample_cov[i * n + j] += (f[i] - means[i]) * (f[j] - means[j]);
                }
            }
        }
        for v in sample_cov.iter_mut() {
            *v /= (draws - 1) as f64;
        }

        let pair = assemble_operators(
            &realization.grid,
            &realization.wind_u,
            &realization.wind_v,
            &spec.true_params,
        )
        .unwrap();
        let a_dense = pair.so4.to_dense();
        let gram = a_dense.transpose() * &a_dense;
        let sigma = gram
            .cholesky()
            .expect("normal matrix is positive definite")
            .inverse()
            * spec.true_params.noise_var;
        for i in 0..n {
            for j in 0..n {
                let truth = sigma[(i, j)];
                let got = sample_cov[i * n + j];
                assert!(
                    (got - truth).abs() <= 0.15 * truth.abs(),
                    "cov[{i},{j}] sample {got} vs dense {truth}"
                );
            }
        }
    }

    #[test]
    fn unit_rate_outcomes_have_unit_mean() {
        let mut spec = small_spec();
        spec.ncols = 50;
        spec.nrows = 50;
        spec.n_regions = 2000;
        spec.n_covariates = 0;
        spec.dgp = OutcomeDgp::Glm {
            intercept: 0.0,
            beta: vec![],
            phi: 0.0,
            gamma: 0.0,
            psi: 0.0,
        };
        let realization = build_scenario(&spec).unwrap();
        let assignment = true_exposures(&realization, &spec.true_params).unwrap();
        let table = simulate_outcomes(&spec, &assignment).unwrap();
        let ratios: Vec<f64> = table
            .y
            .iter()
            .zip(&table.offset)
            .map(|(&y, &o)| y as f64 / o)
            .collect();
        let n = ratios.len() as f64;
        let mean = ratios.iter().sum::<f64>() / n;
        let var = ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        assert!(
            (mean - 1.0).abs() < 3.0 * se,
            "mean ratio {mean} with se {se}"
        );
    }

    #[test]
    fn negative_exposure_coefficient_gives_negative_correlation() {
        let mut spec = small_spec();
        spec.n_covariates = 0;
        spec.dgp = OutcomeDgp::Glm {
            intercept: -2.0,
            beta: vec![],
            phi: 0.0,
            gamma: -2.0,
            psi: 0.0,
        };
        let n = 60;
        let assignment = ExposureAssignment {
            region_ids: (1..=n as u32).collect(),
            z: vec![false; n],
            g: (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
            key_assoc: vec![0; n],
            weighted_degree: vec![1.0; n],
        };
        let mut negative = 0;
        for rep in 0..20 {
            let rep_spec = spec.with_seed(400 + rep);
            let table = simulate_outcomes(&rep_spec, &assignment).unwrap();
            let ratios: Vec<f64> = table
                .y
                .iter()
                .zip(&table.offset)
                .map(|(&y, &o)| y as f64 / o)
                .collect();
            let gm = table.g.iter().sum::<f64>() / n as f64;
            let rm = ratios.iter().sum::<f64>() / n as f64;
            let cov: f64 = table
                .g
                .iter()
                .zip(&ratios)
                .map(|(g, r)| (g - gm) * (r - rm))
                .sum();
            if cov < 0.0 {
                negative += 1;
            }
        }
        assert_eq!(negative, 20, "only {negative}/20 replicates were negative");
    }

    #[test]
    fn overflowing_rate_names_the_region() {
        let mut spec = small_spec();
        spec.n_covariates = 0;
        spec.dgp = OutcomeDgp::Glm {
            intercept: 800.0,
            beta: vec![],
            phi: 0.0,
            gamma: 0.0,
            psi: 0.0,
        };
        let assignment = ExposureAssignment {
            region_ids: vec![31, 32],
            z: vec![false, true],
            g: vec![0.2, 0.4],
            key_assoc: vec![0, 0],
            weighted_degree: vec![1.0, 1.0],
        };
        let err = simulate_outcomes(&spec, &assignment).unwrap_err();
        assert!(matches!(err, Error::Validation(msg) if msg.contains("31")));
    }

    #[test]
    fn glm_truth_matches_its_monte_carlo_oracle() {
        let dgp = OutcomeDgp::Glm {
            intercept: -3.0,
            beta: vec![0.4, -0.3],
            phi: 0.5,
            gamma: -1.0,
            psi: 0.3,
        };
        for (z, g) in [(false, 0.2), (true, 0.7)] {
            let closed = glm_true_dose_response(&dgp, z, g).unwrap();
            let mc = mc_dose_response(&dgp, 2, z, g, 400_000, 99);
            assert!(
                (closed - mc).abs() / closed < 0.01,
                "closed {closed} vs mc {mc}"
            );
        }
    }

    #[test]
    fn surfaces_stay_in_unit_range_and_differ() {
        for surface in SurfaceKind::all() {
            for i in 0..=100 {
                let g = i as f64 / 100.0;
                let s = surface.shape(g);
                assert!((0.0..=1.0).contains(&s), "{}({g}) = {s}", surface.name());
            }
            assert_eq!(SurfaceKind::parse(surface.name()).unwrap(), surface);
        }
        assert!(SurfaceKind::parse("cubic").is_err());
        let step_mid: f64 = SurfaceKind::Step.shape(0.4);
        assert_eq!(step_mid, 0.0);
        assert_eq!(SurfaceKind::Step.shape(0.6), 1.0);
    }

    #[test]
    fn spec_round_trips_through_kv_config() {
        let text = "\
grid.ncols = 14
grid.nrows = 9
grid.cell_size = 2.0
wind.pattern = uniform
wind.u = 1.2
wind.v = -0.4
facilities.count = 5
facilities.scrubbed_fraction = 0.4
facilities.emission_min = 30.0
facilities.emission_max = 90.0
transport.diffusion = 1.5
transport.advection = 0.8
transport.oxidation = 0.35
transport.deposition = 0.55
transport.noise_var = 0.02
transport.background = 1.1
regions.count = 25
covariates.count = 2
dgp.kind = glm
dgp.intercept = -4.5
dgp.beta = 0.3, -0.2
dgp.phi = 0.4
dgp.gamma = -0.9
dgp.psi = 0.15
offsets.log_mean = 5.5
offsets.log_sd = 0.3
emission_scale = 1.0
seed = 77
";
        let kv = KvConfig::parse(text, "inline").unwrap();
        let spec = ScenarioSpec::from_kv(&kv).unwrap();
        assert_eq!(spec.ncols, 14);
        assert_eq!(spec.nrows, 9);
        assert_eq!(spec.wind, WindPattern::Uniform { u: 1.2, v: -0.4 });
        assert_eq!(spec.placement.count(), 5);
        assert_eq!(spec.n_regions, 25);
        match &spec.dgp {
            OutcomeDgp::Glm { beta, psi, .. } => {
                assert_eq!(beta, &vec![0.3, -0.2]);
                assert_eq!(*psi, 0.15);
            }
            other => panic!("wrong dgp {other:?}"),
        }
        assert_eq!(spec.seed, 77);
    }

    #[test]
    fn nonlinear_spec_parses_surface() {
        let text = "\
wind.pattern = zero
dgp.kind = nonlinear
dgp.surface = step
dgp.amplitude = -1.2
regions.count = 30
";
        let kv = KvConfig::parse(text, "inline").unwrap();
        let spec = ScenarioSpec::from_kv(&kv).unwrap();
        match spec.dgp {
            OutcomeDgp::Nonlinear {
                surface, amplitude, ..
            } => {
                assert_eq!(surface, SurfaceKind::Step);
                assert_eq!(amplitude, -1.2);
            }
            other => panic!("wrong dgp {other:?}"),
        }
    }

    #[test]
    fn replication_study_requires_twenty_replicates() {
        let spec = small_spec();
        let config = ReplicationConfig {
            n_replicates: 5,
            k_imputations: 2,
            model: OutcomeModelConfig::Glm(Default::default()),
            mcmc: McmcConfig::default(),
            grid: EstimandGrid::new(vec![0.3, 0.6], 0.2).unwrap(),
            mc_truth_samples: 1000,
        };
        let err = run_replication_study(&spec, &config).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

}
