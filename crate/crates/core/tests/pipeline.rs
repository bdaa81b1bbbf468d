//! End-to-end checks that the simulation, exposure, outcome, and effects
//! stages compose the way the estimators assume.

use windshed::effects::{plugin_vs_cut, EstimandGrid, OutcomeModelConfig, PipelineConfig};
use windshed::mcmc::McmcConfig;
use windshed::outcome::{BartConfig, GlmConfig};
use windshed::simulate::{
    build_scenario, format_replication_csv, run_replication_study, simulate_outcomes,
    true_exposures, FacilityPlacement, OffsetConfig, OutcomeDgp, ReplicationConfig, ScenarioSpec,
    WindPattern,
};
use windshed::transport::TransportParams;

fn pipeline_spec() -> ScenarioSpec {
    ScenarioSpec {
        ncols: 9,
        nrows: 9,
        cell_size: 1.0,
        wind: WindPattern::Uniform { u: 0.7, v: -0.2 },
        placement: FacilityPlacement::UniformRandom {
            count: 4,
            scrubbed_fraction: 0.5,
            emission_min: 30.0,
            emission_max: 70.0,
        },
        true_params: TransportParams {
            diffusion: 1.2,
            advection: 1.0,
            oxidation: 0.3,
            deposition: 0.5,
            noise_var: 0.01,
            background: 1.0,
        },
        n_regions: 16,
        n_covariates: 1,
        dgp: OutcomeDgp::Glm {
            intercept: -3.5,
            beta: vec![0.2],
            phi: 0.3,
            gamma: -0.8,
            psi: 0.1,
        },
        offsets: OffsetConfig {
            log_mean: 6.0,
            log_sd: 0.3,
        },
        emission_scale: 1.0,
        seed: 21,
    }
}

fn point_mass_invariant(model: OutcomeModelConfig) {
    let spec = pipeline_spec();
    let realization = build_scenario(&spec).unwrap();
    let assignment = true_exposures(&realization, &spec.true_params).unwrap();
    let table = simulate_outcomes(&spec, &assignment).unwrap();

    let theta_draws = vec![spec.true_params; 6];
    let config = PipelineConfig {
        model,
        k_imputations: 3,
        grid: EstimandGrid::new(vec![0.3, 0.5], 0.1).unwrap(),
    };
    let result = plugin_vs_cut(
        &theta_draws,
        &realization.exposure_inputs(),
        &table,
        &config,
    )
    .unwrap();

    assert_eq!(result.plugin.len(), result.cut.len());
    for (p, c) in result.plugin.iter().zip(&result.cut) {
        assert_eq!(p.estimand, c.estimand);
        assert_eq!((p.z, p.g), (c.z, c.g));
        // identical imputations leave only mean-roundoff noise in the
        // between-imputation variance
        let var_scale = p.estimate.point.powi(2).max(1.0);
        assert!(
            c.estimate.between_var <= 1e-24 * var_scale,
            "{} has between-variance {}",
            c.estimand,
            c.estimate.between_var
        );
        let scale = p.estimate.point.abs().max(1.0);
        assert!(
            (p.estimate.point - c.estimate.point).abs() <= 1e-9 * scale,
            "{}: plugin {} vs cut {}",
            p.estimand,
            p.estimate.point,
            c.estimate.point
        );
        // the pooled percentile lands on a different interpolation position
        // than the single-fit percentile, so endpoints can differ by up to
        // one gap between adjacent tail draws
        let width = (p.estimate.ci_high - p.estimate.ci_low).abs().max(1e-12);
        assert!(
            (p.estimate.ci_low - c.estimate.ci_low).abs() <= 0.10 * width
                && (p.estimate.ci_high - c.estimate.ci_high).abs() <= 0.10 * width,
            "{}: interval [{}, {}] vs [{}, {}]",
            p.estimand,
            p.estimate.ci_low,
            p.estimate.ci_high,
            c.estimate.ci_low,
            c.estimate.ci_high
        );
    }
}

#[test]
fn point_mass_posterior_makes_plugin_and_cut_coincide_glm() {
    point_mass_invariant(OutcomeModelConfig::Glm(GlmConfig {
        n_iter: 8000,
        n_burn: 2000,
        ..GlmConfig::default()
    }));
}

#[test]
fn point_mass_posterior_makes_plugin_and_cut_coincide_bart() {
    point_mass_invariant(OutcomeModelConfig::Bart(BartConfig {
        m: 10,
        n_iter: 300,
        n_burn: 150,
        ..BartConfig::default()
    }));
}

#[test]
fn replication_study_is_deterministic_and_well_formed() {
    let spec = pipeline_spec();
    let config = ReplicationConfig {
        n_replicates: 20,
        k_imputations: 2,
        model: OutcomeModelConfig::Glm(GlmConfig {
            n_iter: 2000,
            n_burn: 1000,
            ..GlmConfig::default()
        }),
        mcmc: McmcConfig {
            n_iter: 600,
            n_burn: 300,
            n_chains: 2,
            ..McmcConfig::default()
        },
        grid: EstimandGrid::new(vec![0.3, 0.6], 0.1).unwrap(),
        mc_truth_samples: 10_000,
    };

    let rows = run_replication_study(&spec, &config).unwrap();
    assert!(!rows.is_empty());
    let methods: std::collections::BTreeSet<&str> =
        rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(
        methods,
        ["cut", "plugin"].into_iter().collect(),
        "both methods present"
    );
    for row in &rows {
        assert!(row.truth.is_finite());
        assert!(row.bias.is_finite());
        assert!(row.rmse >= 0.0);
        assert!(row.mean_ci_width >= 0.0);
        assert!((0.0..=1.0).contains(&row.coverage), "coverage {}", row.coverage);
        assert_eq!(row.n_ok + row.n_failed, 20);
        assert!(row.g.is_some(), "only pointwise estimands carry a truth");
    }
    // DE rows exist per grid point and IE rows per (z, grid point)
    let n_de = rows.iter().filter(|r| r.estimand == "DE").count();
    let n_ie = rows.iter().filter(|r| r.estimand == "IE").count();
    assert_eq!(n_de, 2 * 2);
    assert_eq!(n_ie, 2 * 2 * 2);

    let again = run_replication_study(&spec, &config).unwrap();
    assert_eq!(
        format_replication_csv(&rows),
        format_replication_csv(&again),
        "study is bit-reproducible"
    );
}
