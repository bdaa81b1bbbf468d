//! Release gate for the command line pipelines: reproducibility of every
//! subcommand under a fixed master seed, and operating characteristics of
//! the bundled replication suite.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_windshed")
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Copies every file in `dir` into a fresh sibling snapshot directory.
fn snapshot(dir: &Path) -> PathBuf {
    let snap = dir.with_extension("snap");
    std::fs::create_dir_all(&snap).unwrap();
    for entry in std::fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        if entry.file_type().unwrap().is_file() {
            std::fs::copy(entry.path(), snap.join(entry.file_name())).unwrap();
        }
    }
    snap
}

/// Manifest bytes with the wall-clock fields removed; everything else,
/// including every content digest, must match across reruns.
fn strip_timestamps(text: &str) -> String {
    text.lines()
        .filter(|l| !l.contains("started_unix") && !l.contains("finished_unix"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn assert_rerun_identical(dir: &Path, snap: &Path, stage: &str) {
    let list = |d: &Path| -> BTreeMap<String, Vec<u8>> {
        std::fs::read_dir(d)
            .unwrap()
            .filter_map(|e| {
                let e = e.unwrap();
                e.file_type().unwrap().is_file().then(|| {
                    (
                        e.file_name().to_string_lossy().into_owned(),
                        std::fs::read(e.path()).unwrap(),
                    )
                })
            })
            .collect()
    };
    let now = list(dir);
    let before = list(snap);
    assert_eq!(
        now.keys().collect::<Vec<_>>(),
        before.keys().collect::<Vec<_>>(),
        "{stage}: rerun changed the set of output files"
    );
    for (name, bytes) in &now {
        if name.ends_with(".manifest.json") {
            let a = strip_timestamps(std::str::from_utf8(bytes).unwrap());
            let b = strip_timestamps(std::str::from_utf8(&before[name]).unwrap());
            assert_eq!(a, b, "{stage}: manifest {name} differs beyond timestamps");
        } else {
            assert_eq!(
                bytes, &before[name],
                "{stage}: {name} is not byte-identical across reruns"
            );
        }
    }
}

/// Runs one subcommand twice with identical arguments and checks that the
/// second run reproduces every artifact byte for byte.
fn run_twice_and_compare(args: &[&str], out_dir: &Path, stage: &str) {
    let out = run(args);
    assert_ok(&out, stage);
    let snap = snapshot(out_dir);
    let out = run(args);
    assert_ok(&out, stage);
    assert_rerun_identical(out_dir, &snap, stage);
}

#[test]
fn criterion_10_every_pipeline_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let write = |name: &str, text: &str| -> PathBuf {
        let path = root.join(name);
        std::fs::write(&path, text).unwrap();
        path
    };

    let sim_dir = root.join("sim");
    run_twice_and_compare(
        &[
            "simulate",
            "--scenario",
            scenario("desk12.cfg").to_str().unwrap(),
            "--out",
            sim_dir.to_str().unwrap(),
        ],
        &sim_dir,
        "simulate",
    );

    let fit_dir = root.join("fit");
    let fit_cfg = write(
        "fit.cfg",
        &format!(
            "input.wind_u = {d}/wind_u.asc\n\
             input.wind_v = {d}/wind_v.asc\n\
             input.sources = {d}/sources.asc\n\
             input.observed = {d}/observed.asc\n\
             mcmc.n_iter = 5000\n\
             mcmc.n_burn = 2500\n\
             mcmc.n_chains = 2\n\
             output.dir = {o}\n\
             seed = 7\n",
            d = sim_dir.display(),
            o = fit_dir.display()
        ),
    );
    run_twice_and_compare(
        &[
            "fit-transport",
            "--config",
            fit_cfg.to_str().unwrap(),
            "--allow-unconverged",
        ],
        &fit_dir,
        "fit-transport",
    );

    let exp_dir = root.join("exp");
    let geography = format!(
        "input.wind_u = {d}/wind_u.asc\n\
         input.wind_v = {d}/wind_v.asc\n\
         input.regions = {d}/regions.asc\n\
         input.facilities = {d}/facilities.csv\n\
         emission_scale = 2.0\n",
        d = sim_dir.display()
    );
    let exp_cfg = write(
        "exp.cfg",
        &format!(
            "input.posterior = {p}/transport_posterior.csv\n{geography}output.dir = {o}\nseed = 7\n",
            p = fit_dir.display(),
            o = exp_dir.display()
        ),
    );
    run_twice_and_compare(
        &[
            "build-exposure",
            "--config",
            exp_cfg.to_str().unwrap(),
            "--draws",
            "10",
        ],
        &exp_dir,
        "build-exposure",
    );

    let outcome_dir = root.join("outcome");
    let outcome_cfg = write(
        "outcome.cfg",
        &format!(
            "input.outcomes = {d}/outcomes.csv\n\
             input.exposures = {e}/exposures.csv\n\
             exposure.draw = 0\n\
             outcome.model = glm\n\
             glm.n_iter = 2000\n\
             glm.n_burn = 1000\n\
             output.dir = {o}\n\
             seed = 7\n",
            d = sim_dir.display(),
            e = exp_dir.display(),
            o = outcome_dir.display()
        ),
    );
    run_twice_and_compare(
        &["fit-outcome", "--config", outcome_cfg.to_str().unwrap()],
        &outcome_dir,
        "fit-outcome",
    );

    let eff_dir = root.join("eff");
    let eff_cfg = write(
        "eff.cfg",
        &format!(
            "input.posterior = {p}/transport_posterior.csv\n\
             input.outcomes = {d}/outcomes.csv\n\
             {geography}\
             outcome.model = glm\n\
             glm.n_iter = 2000\n\
             glm.n_burn = 1000\n\
             effects.k_imputations = 8\n\
             effects.g_values = 0.3, 0.6\n\
             effects.g_min = 0.1\n\
             output.dir = {o}\n\
             seed = 7\n",
            p = fit_dir.display(),
            d = sim_dir.display(),
            o = eff_dir.display()
        ),
    );
    run_twice_and_compare(
        &["estimate-effects", "--config", eff_cfg.to_str().unwrap()],
        &eff_dir,
        "estimate-effects",
    );

    println!(
        "PASS criterion 10: simulate, fit-transport, build-exposure, fit-outcome, and \
         estimate-effects each reproduce every artifact byte for byte under a fixed seed"
    );
}

#[derive(Debug, Clone)]
struct SuiteRow {
    scenario: String,
    estimand_key: String,
    method: String,
    bias: f64,
    rmse: f64,
    width: f64,
    coverage: f64,
    n_ok: usize,
    n_failed: usize,
}

fn parse_suite_csv(text: &str) -> Vec<SuiteRow> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            assert_eq!(
                line,
                "scenario,estimand,z,g,method,model,truth,bias,rmse,mean_ci_width,coverage,n_ok,n_failed"
            );
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        rows.push(SuiteRow {
            scenario: f[0].to_string(),
            estimand_key: format!("{},{},{}", f[1], f[2], f[3]),
            method: f[4].to_string(),
            bias: f[7].parse().unwrap(),
            rmse: f[8].parse().unwrap(),
            width: f[9].parse().unwrap(),
            coverage: f[10].parse().unwrap(),
            n_ok: f[11].parse().unwrap(),
            n_failed: f[12].parse().unwrap(),
        });
    }
    rows
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_07_cut_inference_beats_plugin_on_the_default_suite() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("suite");
    let out = run(&[
        "simulate",
        "--suite",
        "default",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out, "simulate --suite default");
    let csv = std::fs::read_to_string(out_dir.join("replication_default.csv")).unwrap();
    let rows = parse_suite_csv(&csv);
    assert!(!rows.is_empty());
    for row in &rows {
        assert!(
            row.n_ok >= 48 && row.n_failed <= 2,
            "{}/{}: only {} of {} replicates usable",
            row.scenario,
            row.estimand_key,
            row.n_ok,
            row.n_ok + row.n_failed
        );
    }

    // (a) both methods estimate the same estimands without systematic
    // divergence: the bias gap stays within 4 standard errors
    let mut pairs = 0usize;
    for plugin in rows.iter().filter(|r| r.method == "plugin") {
        let cut = rows
            .iter()
            .find(|r| {
                r.method == "cut"
                    && r.scenario == plugin.scenario
                    && r.estimand_key == plugin.estimand_key
            })
            .unwrap_or_else(|| panic!("no cut row for {}/{}", plugin.scenario, plugin.estimand_key));
        let se = |r: &SuiteRow| ((r.rmse * r.rmse - r.bias * r.bias).max(0.0) / r.n_ok as f64).sqrt();
        let gap = (plugin.bias - cut.bias).abs();
        let scale = (se(plugin).powi(2) + se(cut).powi(2)).sqrt().max(1e-12);
        assert!(
            gap <= 4.0 * scale,
            "{}/{}: plugin bias {} vs cut bias {} ({}x SE)",
            plugin.scenario,
            plugin.estimand_key,
            plugin.bias,
            cut.bias,
            gap / scale
        );
        pairs += 1;
    }
    assert!(pairs >= 5, "expected estimand rows in every scenario");

    // (b) propagating exposure uncertainty never costs coverage overall,
    // and the plug-in shortcut is strictly worse somewhere
    let cover = |method: &str| {
        mean(rows.iter().filter(|r| r.method == method).map(|r| r.coverage))
    };
    let plugin_cover = cover("plugin");
    let cut_cover = cover("cut");
    assert!(
        cut_cover >= plugin_cover,
        "mean cut coverage {cut_cover:.3} below plugin {plugin_cover:.3}"
    );
    let mut strictly_worse = Vec::new();
    let scenarios: std::collections::BTreeSet<String> =
        rows.iter().map(|r| r.scenario.clone()).collect();
    for s in &scenarios {
        let in_scenario = |method: &str| {
            mean(
                rows.iter()
                    .filter(|r| &r.scenario == s && r.method == method)
                    .map(|r| r.coverage),
            )
        };
        if in_scenario("plugin") < in_scenario("cut") {
            strictly_worse.push(s.clone());
        }
    }
    assert!(
        !strictly_worse.is_empty(),
        "plug-in coverage should fall below cut coverage in at least one scenario"
    );

    // (c) the coverage gain comes from honest, wider intervals
    let width = |method: &str| {
        mean(rows.iter().filter(|r| r.method == method).map(|r| r.width))
    };
    let plugin_width = width("plugin");
    let cut_width = width("cut");
    assert!(
        cut_width >= plugin_width,
        "mean cut width {cut_width:.4} below plugin {plugin_width:.4}"
    );

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 7200.0, "criterion 7: took {elapsed:.0} s");
    println!(
        "PASS criterion 7: bias gaps within 4 SE on all {pairs} estimand rows; mean coverage \
         cut {cut_cover:.3} >= plugin {plugin_cover:.3}, plugin strictly lower in {:?}; mean \
         width cut {cut_width:.4} >= plugin {plugin_width:.4}; {elapsed:.0} s",
        strictly_worse
    );
}
