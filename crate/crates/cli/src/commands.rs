//! Subcommand implementations. Each command reads a flat key-value config
//! (CLI flags already folded in), runs the corresponding library pipeline,
//! writes its artifacts atomically, and finishes with a run manifest.

use crate::manifest::ManifestBuilder;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use windshed::effects::{
    fit_outcome_model, format_effects_csv, plugin_vs_cut, thinned_indices, EstimandGrid,
    OutcomeModelConfig, PipelineConfig,
};
use windshed::error::{Error, Result};
use windshed::exposure::{
    format_exposure_summary_csv, format_exposures_csv, format_sr_matrix_csv, posterior_exposures,
    source_receptor_matrix, ExposureInputs,
};
use windshed::grid::{
    format_ascii_grid, format_facilities_csv, load_ascii_grid, load_facilities, Field, RegionMap,
};
use windshed::kv::KvConfig;
use windshed::mcmc::{diagnostics, format_draws_csv, read_draws_csv, run_chains, McmcConfig, PriorSpec};
use windshed::outcome::{
    format_model_jsonl, read_outcome_csv, BartConfig, GlmConfig, OutcomeModel, OutcomeTable,
};
use windshed::rng::stream;
use windshed::simulate::{
    build_scenario, format_replication_csv, parse_f64_list, run_replication_study,
    sample_transport_field, simulate_outcomes, true_exposures, ReplicationConfig, ScenarioSpec,
};
use windshed::transport::{
    CovarianceSettings, TransportData, TransportParams, PARAM_NAMES,
};

const RHAT_THRESHOLD: f64 = 1.05;

/// A failed run, carrying the process exit code: 1 for numeric or
/// convergence failures, 2 for input and usage errors.
#[derive(Debug)]
pub enum Failure {
    Core(Error),
    Convergence(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Convergence(_) => 1,
            Failure::Core(err) => match err {
                Error::Numerical(_)
                | Error::Initialization(_)
                | Error::DegenerateExposure(_) => 1,
                _ => 2,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(err) => write!(f, "{err}"),
            Failure::Convergence(msg) => write!(f, "convergence failure: {msg}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        Failure::Core(err)
    }
}

/// Effective configuration for one run: the config file with CLI overrides
/// applied, plus the resolved output directory and master seed.
pub struct RunContext {
    pub kv: KvConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
}

pub fn prepare(config: &Path, out: Option<&Path>, seed: Option<u64>) -> Result<RunContext> {
    let mut kv = KvConfig::load(&config.display().to_string())?;
    apply_overrides(&mut kv, out, seed);
    finish_context(kv)
}

fn apply_overrides(kv: &mut KvConfig, out: Option<&Path>, seed: Option<u64>) {
    if let Some(seed) = seed {
        kv.set("seed", seed);
    }
    if let Some(out) = out {
        kv.set("output.dir", out.display());
    }
}

fn finish_context(kv: KvConfig) -> Result<RunContext> {
    let out_dir = PathBuf::from(kv.get("output.dir").unwrap_or("."));
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| Error::io(&out_dir.display().to_string(), e))?;
    let seed = kv.u64_or("seed", 0)?;
    Ok(RunContext { kv, out_dir, seed })
}

fn manifest_for(command: &'static str, ctx: &RunContext) -> ManifestBuilder {
    ManifestBuilder::new(command, &ctx.out_dir, &ctx.kv.canonical_string(), ctx.seed)
}

fn load_grid_input(
    manifest: &mut ManifestBuilder,
    kv: &KvConfig,
    key: &str,
) -> Result<Field> {
    let path = kv.require(key)?.to_string();
    manifest.record_input(&path)?;
    load_ascii_grid(&path)
}

// ---------------------------------------------------------------------------
// fit-transport
// ---------------------------------------------------------------------------

pub fn fit_transport(ctx: &RunContext, allow_unconverged: bool) -> std::result::Result<(), Failure> {
    let kv = &ctx.kv;
    let mut manifest = manifest_for("fit-transport", ctx);

    let wind_u = load_grid_input(&mut manifest, kv, "input.wind_u")?;
    let wind_v = load_grid_input(&mut manifest, kv, "input.wind_v")?;
    let observed = load_grid_input(&mut manifest, kv, "input.observed")?;
    let sources = if let Some(path) = kv.get("input.sources") {
        let path = path.to_string();
        manifest.record_input(&path)?;
        load_ascii_grid(&path)?
    } else {
        let path = kv.require("input.facilities")?.to_string();
        manifest.record_input(&path)?;
        let facilities = load_facilities(&path, &wind_u.grid)?;
        let scale = kv.f64_or("emission_scale", 1.0)?;
        windshed::grid::rasterize_sources(&facilities, &wind_u.grid, scale)?
    };

    let cov_default = CovarianceSettings::default();
    let covariance = CovarianceSettings {
        nugget: kv.f64_or("covariance.nugget", cov_default.nugget)?,
        desk_scale_limit: kv.usize_or("covariance.max_dense_cells", cov_default.desk_scale_limit)?,
        ..cov_default
    };
    let data = TransportData::new(wind_u, wind_v, sources, observed, covariance)?;

    let mcmc_default = McmcConfig::default();
    let n_chains = kv.usize_or("mcmc.n_chains", 2)?;
    if n_chains < 2 {
        return Err(Error::Argument(format!(
            "fit-transport needs at least 2 chains for convergence diagnostics, got {n_chains}"
        ))
        .into());
    }
    let config = McmcConfig {
        n_iter: kv.usize_or("mcmc.n_iter", mcmc_default.n_iter)?,
        n_burn: kv.usize_or("mcmc.n_burn", mcmc_default.n_burn)?,
        n_chains,
        target_accept: kv.f64_or("mcmc.target_accept", mcmc_default.target_accept)?,
        seed: ctx.seed,
        likelihood_off: false,
    };
    manifest.record_stream("mcmc_chain_base", stream::MCMC_CHAIN_BASE);

    let chains = run_chains(&data, &PriorSpec::default(), &config)?;
    let diag = diagnostics(&chains)?;

    let mut draws = Vec::new();
    let mut log_post = Vec::new();
    for chain in &chains {
        draws.extend_from_slice(&chain.draws);
        log_post.extend_from_slice(&chain.log_posterior);
    }
    manifest.write_output(
        "transport_posterior.csv",
        format_draws_csv(&draws, &log_post).as_bytes(),
    )?;

    let mut offenders = Vec::new();
    let mut report = String::from("transport sampler diagnostics\n");
    let _ = writeln!(
        report,
        "chains: {}, kept draws per chain: {}",
        chains.len(),
        chains[0].draws.len()
    );
    let _ = writeln!(report, "\nparameter ess rhat");
    for (i, name) in PARAM_NAMES.iter().enumerate() {
        let rhat_text = match diag.rhat[i] {
            Some(r) => format!("{r:.4}"),
            None => "n/a".to_string(),
        };
        let _ = writeln!(report, "{name} {:.1} {rhat_text}", diag.ess[i]);
        match diag.rhat[i] {
            Some(r) if r > RHAT_THRESHOLD => {
                offenders.push(format!("{name} R-hat {r:.4}"));
            }
            None => offenders.push(format!("{name} degenerate draws")),
            _ => {}
        }
    }
    let _ = writeln!(report);
    for (i, accept) in diag.accept.iter().enumerate() {
        let _ = writeln!(report, "chain {i} acceptance {accept:.3}");
    }
    let verdict = if offenders.is_empty() {
        format!("\nall R-hat within threshold {RHAT_THRESHOLD}\n")
    } else {
        format!(
            "\nconvergence failure (threshold {RHAT_THRESHOLD}): {}\n",
            offenders.join("; ")
        )
    };
    report.push_str(&verdict);
    manifest.write_output("transport_diagnostics.txt", report.as_bytes())?;
    manifest.finish()?;

    if !offenders.is_empty() && !allow_unconverged {
        return Err(Failure::Convergence(format!(
            "{}; rerun with --allow-unconverged to keep the artifacts anyway",
            offenders.join("; ")
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// build-exposure
// ---------------------------------------------------------------------------

struct GeographyInputs {
    wind_u: Field,
    wind_v: Field,
    facilities: Vec<windshed::grid::Facility>,
    region_map: RegionMap,
    emission_scale: f64,
}

impl GeographyInputs {
    fn load(manifest: &mut ManifestBuilder, kv: &KvConfig) -> Result<Self> {
        let wind_u = load_grid_input(manifest, kv, "input.wind_u")?;
        let wind_v = load_grid_input(manifest, kv, "input.wind_v")?;
        let regions = load_grid_input(manifest, kv, "input.regions")?;
        let region_map = RegionMap::from_field(&regions)?;
        let facilities_path = kv.require("input.facilities")?.to_string();
        manifest.record_input(&facilities_path)?;
        let facilities = load_facilities(&facilities_path, &wind_u.grid)?;
        Ok(Self {
            wind_u,
            wind_v,
            facilities,
            region_map,
            emission_scale: kv.f64_or("emission_scale", 1.0)?,
        })
    }

    fn exposure_inputs(&self) -> ExposureInputs<'_> {
        ExposureInputs {
            grid: &self.wind_u.grid,
            wind_u: &self.wind_u,
            wind_v: &self.wind_v,
            facilities: &self.facilities,
            region_map: &self.region_map,
            emission_scale: self.emission_scale,
        }
    }

    fn scrubbed(&self) -> Vec<bool> {
        self.facilities.iter().map(|f| f.scrubbed).collect()
    }
}

fn posterior_mean(draws: &[TransportParams]) -> TransportParams {
    let mut acc = [0.0; 6];
    for draw in draws {
        for (a, v) in acc.iter_mut().zip(draw.to_array()) {
            *a += v;
        }
    }
    for a in acc.iter_mut() {
        *a /= draws.len() as f64;
    }
    TransportParams::from_array(acc)
}

pub fn build_exposure(ctx: &RunContext, draws_flag: Option<usize>) -> std::result::Result<(), Failure> {
    let kv = &ctx.kv;
    let mut manifest = manifest_for("build-exposure", ctx);

    let posterior_path = kv.require("input.posterior")?.to_string();
    manifest.record_input(&posterior_path)?;
    let (draws, _) = read_draws_csv(&posterior_path)?;
    let geo = GeographyInputs::load(&mut manifest, kv)?;
    let inputs = geo.exposure_inputs();
    let scrubbed = geo.scrubbed();

    let theta_bar = posterior_mean(&draws);
    let selected: Vec<TransportParams> = match draws_flag {
        None => vec![theta_bar],
        Some(k) => thinned_indices(draws.len(), k)?
            .into_iter()
            .map(|i| draws[i])
            .collect(),
    };
    let exposures = posterior_exposures(&selected, &inputs, &scrubbed)?;
    let sr_bar = source_receptor_matrix(&theta_bar, &inputs)?;

    manifest.write_output("sr_matrix.csv", format_sr_matrix_csv(&sr_bar).as_bytes())?;
    manifest.write_output("exposures.csv", format_exposures_csv(&exposures).as_bytes())?;
    manifest.write_output(
        "exposure_summary.csv",
        format_exposure_summary_csv(&exposures).as_bytes(),
    )?;
    manifest.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// fit-outcome
// ---------------------------------------------------------------------------

fn model_config(kv: &KvConfig, seed: u64) -> Result<OutcomeModelConfig> {
    match kv.get("outcome.model").unwrap_or("glm") {
        "glm" => {
            let d = GlmConfig::default();
            Ok(OutcomeModelConfig::Glm(GlmConfig {
                n_iter: kv.usize_or("glm.n_iter", d.n_iter)?,
                n_burn: kv.usize_or("glm.n_burn", d.n_burn)?,
                seed,
                intercept_only: kv.bool_or("glm.intercept_only", false)?,
                prior_sd: kv.f64_or("glm.prior_sd", d.prior_sd)?,
            }))
        }
        "bart" => {
            let d = BartConfig::default();
            Ok(OutcomeModelConfig::Bart(BartConfig {
                m: kv.usize_or("bart.m", d.m)?,
                n_iter: kv.usize_or("bart.n_iter", d.n_iter)?,
                n_burn: kv.usize_or("bart.n_burn", d.n_burn)?,
                n_thin: kv.usize_or("bart.n_thin", d.n_thin)?,
                seed,
                alpha: kv.f64_or("bart.alpha", d.alpha)?,
                beta_depth: kv.f64_or("bart.beta_depth", d.beta_depth)?,
                leaf_prior_scale: kv.f64_or("bart.leaf_scale", d.leaf_prior_scale)?,
                p_grow: kv.f64_or("bart.p_grow", d.p_grow)?,
                p_prune: kv.f64_or("bart.p_prune", d.p_prune)?,
                p_change: kv.f64_or("bart.p_change", d.p_change)?,
            }))
        }
        other => Err(Error::Argument(format!(
            "unknown outcome model `{other}` (expected glm or bart)"
        ))),
    }
}

/// Replaces a table's z and g columns with one exposure draw read from a
/// build-exposure CSV, joined on region id.
fn override_exposures(table: &OutcomeTable, path: &str, draw: usize) -> Result<OutcomeTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut assigned: std::collections::BTreeMap<u32, (bool, f64)> = std::collections::BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line.trim() != "region_id,draw,z,g" {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: 1,
                    msg: format!("expected header `region_id,draw,z,g`, got `{line}`"),
                });
            }
            continue;
        }
        let parse = |msg: String| Error::Parse {
            path: path.to_string(),
            line: lineno + 1,
            msg,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(parse(format!("expected 4 fields, got {}", fields.len())));
        }
        let region: u32 = fields[0]
            .parse()
            .map_err(|_| parse(format!("bad region id `{}`", fields[0])))?;
        let row_draw: usize = fields[1]
            .parse()
            .map_err(|_| parse(format!("bad draw index `{}`", fields[1])))?;
        if row_draw != draw {
            continue;
        }
        let z = match fields[2] {
            "0" => false,
            "1" => true,
            other => return Err(parse(format!("z must be 0 or 1, got `{other}`"))),
        };
        let g: f64 = fields[3]
            .parse()
            .map_err(|_| parse(format!("bad exposure `{}`", fields[3])))?;
        assigned.insert(region, (z, g));
    }
    let missing: Vec<u32> = table
        .region_ids
        .iter()
        .copied()
        .filter(|rid| !assigned.contains_key(rid))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingRegion(missing));
    }
    let (z, g): (Vec<bool>, Vec<f64>) = table
        .region_ids
        .iter()
        .map(|rid| assigned[rid])
        .unzip();
    OutcomeTable::new(
        table.region_ids.clone(),
        table.y.clone(),
        table.offset.clone(),
        table.x.clone(),
        z,
        g,
    )
}

pub fn fit_outcome(ctx: &RunContext) -> std::result::Result<(), Failure> {
    let kv = &ctx.kv;
    let mut manifest = manifest_for("fit-outcome", ctx);

    let outcomes_path = kv.require("input.outcomes")?.to_string();
    manifest.record_input(&outcomes_path)?;
    let mut table = read_outcome_csv(&outcomes_path)?;
    if let Some(exposures_path) = kv.get("input.exposures") {
        let exposures_path = exposures_path.to_string();
        manifest.record_input(&exposures_path)?;
        let draw = kv.usize_or("exposure.draw", 0)?;
        table = override_exposures(&table, &exposures_path, draw)?;
    }

    let config = model_config(kv, ctx.seed)?;
    manifest.record_stream("outcome_fit_base", stream::OUTCOME_FIT_BASE);
    let model = fit_outcome_model(&table, &config)?;
    manifest.write_output("outcome_model.jsonl", format_model_jsonl(&model).as_bytes())?;

    let acceptance = match &model {
        OutcomeModel::Glm(f) => f.acceptance_rate,
        OutcomeModel::Bart(f) => f.acceptance_rate,
    };
    let report = format!(
        "outcome model fit\nmodel: {}\nregions: {}\nkept draws: {}\nacceptance rate: {:.3}\n",
        model.name(),
        table.n(),
        model.n_draws(),
        acceptance
    );
    manifest.write_output("outcome_fit.txt", report.as_bytes())?;
    manifest.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// estimate-effects
// ---------------------------------------------------------------------------

fn estimand_grid(kv: &KvConfig) -> Result<EstimandGrid> {
    let g_values = match kv.get("effects.g_values") {
        Some(list) => parse_f64_list(list)?,
        None => vec![0.2, 0.4, 0.6],
    };
    let g_min = kv.f64_or("effects.g_min", 0.0)?;
    EstimandGrid::new(g_values, g_min)
}

pub fn estimate_effects(ctx: &RunContext) -> std::result::Result<(), Failure> {
    let kv = &ctx.kv;
    let mut manifest = manifest_for("estimate-effects", ctx);

    let posterior_path = kv.require("input.posterior")?.to_string();
    manifest.record_input(&posterior_path)?;
    let (draws, _) = read_draws_csv(&posterior_path)?;
    let outcomes_path = kv.require("input.outcomes")?.to_string();
    manifest.record_input(&outcomes_path)?;
    let table = read_outcome_csv(&outcomes_path)?;
    let geo = GeographyInputs::load(&mut manifest, kv)?;

    let config = PipelineConfig {
        model: model_config(kv, ctx.seed)?,
        k_imputations: kv.usize_or("effects.k_imputations", 250)?,
        grid: estimand_grid(kv)?,
    };
    manifest.record_stream("outcome_fit_base", stream::OUTCOME_FIT_BASE);

    let result = plugin_vs_cut(&draws, &geo.exposure_inputs(), &table, &config)?;
    let mut rows = result.plugin.clone();
    rows.extend(result.cut.iter().cloned());
    manifest.write_output("effects.csv", format_effects_csv(&rows).as_bytes())?;

    let mut report = String::from("between/within variance decomposition (cut method)\n");
    let _ = writeln!(
        report,
        "imputations: {}, transport draws consumed: {}",
        config.k_imputations,
        draws.len()
    );
    let _ = writeln!(report, "theta digest: {}", result.theta_digest);
    let _ = writeln!(report, "\nestimand z g within between between_share");
    for row in &result.cut {
        let z = row.z.map(|z| if z { "1" } else { "0" }).unwrap_or("");
        let g = row.g.map(|g| format!("{g}")).unwrap_or_default();
        let _ = writeln!(
            report,
            "{} {z} {g} {} {} {}",
            row.estimand,
            row.estimate.within_var,
            row.estimate.between_var,
            row.estimate.between_share
        );
    }
    if !result.warnings.is_empty() {
        let _ = writeln!(report, "\nwarnings:");
        for warning in &result.warnings {
            let _ = writeln!(report, "- {warning}");
        }
    }
    manifest.write_output("variance_report.txt", report.as_bytes())?;
    manifest.finish()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

const DEFAULT_SUITE: [(&str, &str); 5] = [
    ("base", include_str!("../../../scenarios/default_base.cfg")),
    ("null", include_str!("../../../scenarios/default_null.cfg")),
    ("noisy", include_str!("../../../scenarios/default_noisy.cfg")),
    ("interaction", include_str!("../../../scenarios/default_interaction.cfg")),
    ("sparse", include_str!("../../../scenarios/default_sparse.cfg")),
];

fn replication_config(kv: &KvConfig, spec: &ScenarioSpec) -> Result<ReplicationConfig> {
    let mcmc_default = McmcConfig::default();
    Ok(ReplicationConfig {
        n_replicates: kv.usize_or("study.replicates", 50)?,
        k_imputations: kv.usize_or("study.imputations", 25)?,
        model: model_config(kv, spec.seed)?,
        mcmc: McmcConfig {
            n_iter: kv.usize_or("mcmc.n_iter", mcmc_default.n_iter)?,
            n_burn: kv.usize_or("mcmc.n_burn", mcmc_default.n_burn)?,
            n_chains: kv.usize_or("mcmc.n_chains", 2)?,
            target_accept: kv.f64_or("mcmc.target_accept", mcmc_default.target_accept)?,
            seed: spec.seed,
            likelihood_off: false,
        },
        grid: EstimandGrid::new(
            match kv.get("study.g_values") {
                Some(list) => parse_f64_list(list)?,
                None => vec![0.2, 0.4, 0.6],
            },
            kv.f64_or("study.g_min", 0.0)?,
        )?,
        mc_truth_samples: kv.usize_or("study.mc_truth_samples", 10_000_000)?,
    })
}

/// Realizes a scenario into pipeline input files: grids, facilities, one
/// observed field, and an outcome table at the true exposures.
pub fn simulate_scenario(
    scenario: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
) -> std::result::Result<(), Failure> {
    let mut kv = KvConfig::load(&scenario.display().to_string())?;
    apply_overrides(&mut kv, out, seed);
    if let Some(seed) = seed {
        kv.set("seed", seed);
    }
    let ctx = finish_context(kv)?;
    let mut manifest = manifest_for("simulate", &ctx);
    manifest.record_input(&scenario.display().to_string())?;
    manifest.record_stream("transport_noise", stream::TRANSPORT_NOISE);
    manifest.record_stream("scenario_layout", stream::SCENARIO_LAYOUT);
    manifest.record_stream("region_tessellation", stream::REGION_TESSELLATION);
    manifest.record_stream("covariates", stream::COVARIATES);
    manifest.record_stream("outcome_draw", stream::OUTCOME_DRAW);

    let spec = ScenarioSpec::from_kv(&ctx.kv)?;
    let realization = build_scenario(&spec)?;
    let observed = sample_transport_field(&realization, &spec.true_params, spec.seed)?;
    let assignment = true_exposures(&realization, &spec.true_params)?;
    let table = simulate_outcomes(&spec, &assignment)?;

    manifest.write_output("wind_u.asc", format_ascii_grid(&realization.wind_u).as_bytes())?;
    manifest.write_output("wind_v.asc", format_ascii_grid(&realization.wind_v).as_bytes())?;
    manifest.write_output("sources.asc", format_ascii_grid(&realization.sources).as_bytes())?;
    let labels = Field::new(
        realization.grid.clone(),
        realization.region_map.labels.iter().map(|&l| l as f64).collect(),
    )?;
    manifest.write_output("regions.asc", format_ascii_grid(&labels).as_bytes())?;
    manifest.write_output("observed.asc", format_ascii_grid(&observed).as_bytes())?;
    manifest.write_output(
        "facilities.csv",
        format_facilities_csv(&realization.facilities).as_bytes(),
    )?;
    manifest.write_output(
        "outcomes.csv",
        windshed::outcome::format_outcome_csv(&table).as_bytes(),
    )?;

    let mut truth = String::from("parameter,value\n");
    for (name, value) in PARAM_NAMES.iter().zip(spec.true_params.to_array()) {
        let _ = writeln!(truth, "{name},{value}");
    }
    manifest.write_output("true_params.csv", truth.as_bytes())?;
    manifest.finish()?;
    Ok(())
}

/// Runs the bundled replication suite and writes the combined operating
/// characteristics table.
pub fn simulate_suite(
    name: &str,
    out: Option<&Path>,
    seed: Option<u64>,
    replicates: Option<usize>,
    imputations: Option<usize>,
) -> std::result::Result<(), Failure> {
    if name != "default" {
        return Err(Error::Argument(format!(
            "unknown suite `{name}` (only `default` is bundled)"
        ))
        .into());
    }
    let out_dir = out.unwrap_or_else(|| Path::new(".")).to_path_buf();
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| Error::io(&out_dir.display().to_string(), e))?;

    let mut effective = KvConfig::new();
    effective.set("suite", name);
    if let Some(r) = replicates {
        effective.set("study.replicates", r);
    }
    if let Some(k) = imputations {
        effective.set("study.imputations", k);
    }
    if let Some(s) = seed {
        effective.set("seed", s);
    }
    let mut manifest = ManifestBuilder::new(
        "simulate",
        &out_dir,
        &effective.canonical_string(),
        seed.unwrap_or(0),
    );

    let mut csv = String::from("scenario,");
    csv.push_str(windshed::simulate::REPLICATION_HEADER);
    csv.push('\n');
    for (idx, (scenario_name, text)) in DEFAULT_SUITE.iter().enumerate() {
        manifest.record_bundled_input(scenario_name, text);
        let mut kv = KvConfig::parse(text, scenario_name)?;
        if let Some(r) = replicates {
            kv.set("study.replicates", r);
        }
        if let Some(k) = imputations {
            kv.set("study.imputations", k);
        }
        if let Some(s) = seed {
            kv.set("seed", s.wrapping_add(idx as u64));
        }
        let spec = ScenarioSpec::from_kv(&kv)?;
        let config = replication_config(&kv, &spec)?;
        let rows = run_replication_study(&spec, &config)?;
        let table = format_replication_csv(&rows);
        for line in table.lines().skip(1) {
            let _ = writeln!(csv, "{scenario_name},{line}");
        }
    }
    manifest.write_output("replication_default.csv", csv.as_bytes())?;
    manifest.finish()?;
    Ok(())
}
