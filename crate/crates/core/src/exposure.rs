//! Source-receptor structure and treatment construction.
//!
//! A fitted transport model turns the facility layout into a bipartite
//! network: entry (i, j) of the source-receptor matrix is the steady-state
//! concentration region i receives per 1000 tons emitted at facility j,
//! excluding background. From that network each region gets a direct
//! treatment `z` (scrubber status of its nearest facility) and an upwind
//! exposure `g` (the T-weighted share of scrubbed facilities among all
//! non-key facilities). Repeating the construction per posterior draw of the
//! transport parameters propagates interference uncertainty downstream.

use crate::error::{Error, Result};
use crate::grid::{
    region_cell_weights, region_centroids, Facility, Field, RasterGrid, RegionMap,
};
use crate::transport::{assemble_operators, TransportParams};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Region-by-facility response matrix in concentration units per 1000 tons
/// of annual emissions. Row order follows `region_ids` (ascending), column
/// order follows `facility_ids` (input facility order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SRMatrix {
    pub region_ids: Vec<u32>,
    pub facility_ids: Vec<String>,
    /// row-major, n_regions × n_facilities
    pub values: Vec<f64>,
    /// max relative deviation of T·(emissions/1000) from the combined-field
    /// solve, recorded at construction
    pub linearity_certificate: f64,
}

impl SRMatrix {
    pub fn n_regions(&self) -> usize {
        self.region_ids.len()
    }

    pub fn n_facilities(&self) -> usize {
        self.facility_ids.len()
    }

    #[inline]
    pub fn get(&self, region: usize, facility: usize) -> f64 {
        self.values[region * self.facility_ids.len() + facility]
    }
}

/// Per-region treatment variables derived from one SR matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureAssignment {
    pub region_ids: Vec<u32>,
    /// scrubber status of the key-associated facility
    pub z: Vec<bool>,
    /// weighted share of scrubbed facilities among non-key facilities
    pub g: Vec<f64>,
    /// index (into the facility list) of the key-associated facility
    pub key_assoc: Vec<usize>,
    /// Σ_{j≠key} T_ij, the upwind weighted degree
    pub weighted_degree: Vec<f64>,
}

/// Static geometry shared by every per-draw exposure computation.
#[derive(Debug, Clone, Copy)]
pub struct ExposureInputs<'a> {
    pub grid: &'a RasterGrid,
    pub wind_u: &'a Field,
    pub wind_v: &'a Field,
    pub facilities: &'a [Facility],
    pub region_map: &'a RegionMap,
    pub emission_scale: f64,
}

/// Builds the SR matrix for one parameter draw: one operator factorization,
/// then one pair of solves per facility plus one combined solve for the
/// linearity certificate.
pub fn source_receptor_matrix(
    params: &TransportParams,
    inputs: &ExposureInputs,
) -> Result<SRMatrix> {
    if inputs.facilities.is_empty() {
        return Err(Error::Argument("no facilities supplied".into()));
    }
    let grid = inputs.grid;
    let weights = region_cell_weights(inputs.region_map);
    if weights.is_empty() {
        return Err(Error::Validation("region map labels no cells".into()));
    }
    let region_ids: Vec<u32> = weights.keys().copied().collect();
    let ops = assemble_operators(grid, inputs.wind_u, inputs.wind_v, params)?.factor()?;

    let n = region_ids.len();
    let j_count = inputs.facilities.len();
    let mut values = vec![0.0; n * j_count];
    let unit_emission = 1000.0 * inputs.emission_scale;
    for (j, fac) in inputs.facilities.iter().enumerate() {
        let cell = grid.cell_at(fac.x, fac.y).ok_or_else(|| {
            Error::Validation(format!("facility `{}` is off-grid", fac.id))
        })?;
        let mut sources = Field::zeros(grid.clone());
        sources.values[cell] = unit_emission;
        let response = ops.steady_state_mean(&sources, params)?;
        let floor = -1e-10 * response.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (i, id) in region_ids.iter().enumerate() {
            let mut avg = 0.0;
            for &(cell, w) in &weights[id] {
                avg += w * response.values[cell];
            }
            if avg < 0.0 {
                if avg < floor {
                    return Err(Error::Numerical(format!(
                        "negative source-receptor entry {avg:e} for region {id}, \
                         facility `{}`",
                        fac.id
                    )));
                }
                avg = 0.0;
            }
            values[i * j_count + j] = avg;
        }
    }

    // superposition check: the combined emission field must reproduce
    // T · (emissions / 1000)
    let combined = crate::grid::rasterize_sources(inputs.facilities, grid, inputs.emission_scale)?;
    let combined_response = ops.steady_state_mean(&combined, params)?;
    let mut certificate = 0.0f64;
    for (i, id) in region_ids.iter().enumerate() {
        let mut avg = 0.0;
        for &(cell, w) in &weights[id] {
            avg += w * combined_response.values[cell];
        }
        let mut predicted = 0.0;
        for (j, fac) in inputs.facilities.iter().enumerate() {
            predicted += values[i * j_count + j] * fac.so2_tons / 1000.0;
        }
        let scale = avg.abs().max(predicted.abs()).max(1e-300);
        certificate = certificate.max((predicted - avg).abs() / scale);
    }

    Ok(SRMatrix {
        region_ids,
        facility_ids: inputs.facilities.iter().map(|f| f.id.clone()).collect(),
        values,
        linearity_certificate: certificate,
    })
}

/// Nearest facility to each region's centroid (unweighted mean of member
/// cell centers). Distance ties break toward the lexicographically smallest
/// facility id, so the result is independent of file order.
pub fn key_associated(facilities: &[Facility], region_map: &RegionMap) -> Result<Vec<usize>> {
    if facilities.is_empty() {
        return Err(Error::Argument("key association needs at least one facility".into()));
    }
    let centroids = region_centroids(region_map);
    if centroids.is_empty() {
        return Err(Error::Validation("region map labels no cells".into()));
    }
    let mut out = Vec::with_capacity(centroids.len());
    for (_, &(cx, cy)) in centroids.iter() {
        let mut best = 0usize;
        let mut best_d2 = f64::INFINITY;
        for (j, fac) in facilities.iter().enumerate() {
            let d2 = (fac.x - cx).powi(2) + (fac.y - cy).powi(2);
            let closer = d2 < best_d2
                || (d2 == best_d2 && fac.id < facilities[best].id);
            if closer {
                best = j;
                best_d2 = d2;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Direct treatment and upwind exposure per region given scrubber statuses.
pub fn exposure_levels(
    sr: &SRMatrix,
    scrubbed: &[bool],
    key_assoc: &[usize],
) -> Result<ExposureAssignment> {
    let n = sr.n_regions();
    let j_count = sr.n_facilities();
    if scrubbed.len() != j_count {
        return Err(Error::Dimension(format!(
            "scrubbed vector has {} entries for {} facilities",
            scrubbed.len(),
            j_count
        )));
    }
    if key_assoc.len() != n {
        return Err(Error::Dimension(format!(
            "key association has {} entries for {} regions",
            key_assoc.len(),
            n
        )));
    }
    let mut z = Vec::with_capacity(n);
    let mut g = Vec::with_capacity(n);
    let mut degree = Vec::with_capacity(n);
    let mut degenerate = Vec::new();
    for i in 0..n {
        let key = key_assoc[i];
        z.push(scrubbed[key]);
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..j_count {
            if j == key {
                continue;
            }
            let t = sr.get(i, j);
            den += t;
            if scrubbed[j] {
                num += t;
            }
        }
        if den <= 0.0 {
            degenerate.push(sr.region_ids[i]);
            g.push(f64::NAN);
        } else {
            g.push((num / den).clamp(0.0, 1.0));
        }
        degree.push(den);
    }
    if !degenerate.is_empty() {
        return Err(Error::DegenerateExposure(degenerate));
    }
    Ok(ExposureAssignment {
        region_ids: sr.region_ids.clone(),
        z,
        g,
        key_assoc: key_assoc.to_vec(),
        weighted_degree: degree,
    })
}

/// SR matrix and exposure assignment for one transport-parameter draw.
#[derive(Debug, Clone)]
pub struct DrawExposure {
    pub sr: SRMatrix,
    pub assignment: ExposureAssignment,
}

/// Exposures across a set of posterior draws, with per-region summaries of
/// the upwind exposure. `z` and the key association are geometric and do not
/// vary across draws.
#[derive(Debug, Clone)]
pub struct PosteriorExposures {
    pub region_ids: Vec<u32>,
    pub per_draw: Vec<DrawExposure>,
    pub mean_g: Vec<f64>,
    pub sd_g: Vec<f64>,
}

pub fn posterior_exposures(
    draws: &[TransportParams],
    inputs: &ExposureInputs,
    scrubbed: &[bool],
) -> Result<PosteriorExposures> {
    if draws.is_empty() {
        return Err(Error::Argument("posterior exposures need at least one draw".into()));
    }
    let key_assoc = key_associated(inputs.facilities, inputs.region_map)?;
    let per_draw: Vec<DrawExposure> = draws
        .par_iter()
        .enumerate()
        .map(|(k, params)| {
            let sr = source_receptor_matrix(params, inputs)
                .map_err(|e| Error::Validation(format!("draw {k}: {e}")))?;
            let assignment = exposure_levels(&sr, scrubbed, &key_assoc)
                .map_err(|e| match e {
                    Error::DegenerateExposure(ids) => Error::DegenerateExposure(ids),
                    other => Error::Validation(format!("draw {k}: {other}")),
                })?;
            Ok(DrawExposure { sr, assignment })
        })
        .collect::<Result<_>>()?;

    let region_ids = per_draw[0].sr.region_ids.clone();
    let n = region_ids.len();
    let k_count = per_draw.len();
    let mut mean_g = vec![0.0; n];
    for d in &per_draw {
        for i in 0..n {
            mean_g[i] += d.assignment.g[i];
        }
    }
    for m in &mut mean_g {
        *m /= k_count as f64;
    }
    let mut sd_g = vec![0.0; n];
    if k_count > 1 {
        for d in &per_draw {
            for i in 0..n {
                let dev = d.assignment.g[i] - mean_g[i];
                sd_g[i] += dev * dev;
            }
        }
        for s in &mut sd_g {
            *s = (*s / (k_count as f64 - 1.0)).sqrt();
        }
    }
    Ok(PosteriorExposures {
        region_ids,
        per_draw,
        mean_g,
        sd_g,
    })
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Long-format SR matrix: one row per (region, facility) pair.
pub fn format_sr_matrix_csv(sr: &SRMatrix) -> String {
    let mut out = String::from("region_id,facility_id,value\n");
    for (i, rid) in sr.region_ids.iter().enumerate() {
        for (j, fid) in sr.facility_ids.iter().enumerate() {
            let _ = writeln!(out, "{rid},{fid},{}", sr.get(i, j));
        }
    }
    out
}

pub fn write_sr_matrix_csv(sr: &SRMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path_str = path.as_ref().display().to_string();
    std::fs::write(path.as_ref(), format_sr_matrix_csv(sr)).map_err(|e| Error::io(&path_str, e))
}

/// Per-draw exposures: one row per (region, draw).
pub fn format_exposures_csv(exposures: &PosteriorExposures) -> String {
    let mut out = String::from("region_id,draw,z,g\n");
    for (k, d) in exposures.per_draw.iter().enumerate() {
        for (i, rid) in d.assignment.region_ids.iter().enumerate() {
            let _ = writeln!(
                out,
                "{rid},{k},{},{}",
                if d.assignment.z[i] { 1 } else { 0 },
                d.assignment.g[i]
            );
        }
    }
    out
}

pub fn write_exposures_csv(exposures: &PosteriorExposures, path: impl AsRef<Path>) -> Result<()> {
    let path_str = path.as_ref().display().to_string();
    std::fs::write(path.as_ref(), format_exposures_csv(exposures))
        .map_err(|e| Error::io(&path_str, e))
}

/// Posterior summary per region: mean and SD of g, plus the fixed z.
pub fn format_exposure_summary_csv(exposures: &PosteriorExposures) -> String {
    let mut out = String::from("region_id,z,g_mean,g_sd\n");
    let z = &exposures.per_draw[0].assignment.z;
    for (i, rid) in exposures.region_ids.iter().enumerate() {
        let _ = writeln!(
            out,
            "{rid},{},{},{}",
            if z[i] { 1 } else { 0 },
            exposures.mean_g[i],
            exposures.sd_g[i]
        );
    }
    out
}

pub fn write_exposure_summary_csv(
    exposures: &PosteriorExposures,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path_str = path.as_ref().display().to_string();
    std::fs::write(path.as_ref(), format_exposure_summary_csv(exposures))
        .map_err(|e| Error::io(&path_str, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn facility(id: &str, x: f64, y: f64, tons: f64, scrubbed: bool) -> Facility {
        Facility {
            id: id.into(),
            x,
            y,
            so2_tons: tons,
            scrubbed,
            heat_input: 100.0,
            operating_time: 0.9,
        }
    }

    fn params() -> TransportParams {
        TransportParams {
            diffusion: 1.1,
            advection: 0.7,
            oxidation: 0.5,
            deposition: 0.8,
            noise_var: 0.03,
            background: 1.0,
        }
    }

    /// 7x7 grid, two regions in opposite corners, two facilities.
    fn layout() -> (RasterGrid, Field, Field, Vec<Facility>, RegionMap) {
        let g = RasterGrid::new(7, 7, 1.0, 0.0, 0.0, -9999.0).unwrap();
        let mut rng = stream_rng(17, 0);
        let u: Vec<f64> = (0..49).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let v: Vec<f64> = (0..49).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let wind_u = Field::new(g.clone(), u).unwrap();
        let wind_v = Field::new(g.clone(), v).unwrap();
        let facilities = vec![
            facility("p1", 1.5, 1.5, 800.0, true),
            facility("p2", 5.5, 5.5, 1200.0, false),
            facility("p3", 3.5, 1.5, 400.0, false),
        ];
        let mut labels = vec![0u32; 49];
        for (row, col, id) in [
            (1usize, 4usize, 1u32),
            (1, 5, 1),
            (2, 4, 1),
            (5, 1, 2),
            (5, 2, 2),
            (4, 1, 2),
            (4, 2, 2),
        ] {
            labels[g.index(row, col)] = id;
        }
        let rm = RegionMap::new(g.clone(), labels).unwrap();
        (g, wind_u, wind_v, facilities, rm)
    }

    #[test]
    fn sr_matrix_is_nonnegative_with_tight_linearity_certificate() {
        let (g, u, v, facilities, rm) = layout();
        let inputs = ExposureInputs {
            grid: &g,
            wind_u: &u,
            wind_v: &v,
            facilities: &facilities,
            region_map: &rm,
            emission_scale: 1e-3,
        };
        let sr = source_receptor_matrix(&params(), &inputs).unwrap();
        assert_eq!(sr.n_regions(), 2);
        assert_eq!(sr.n_facilities(), 3);
        assert!(sr.values.iter().all(|&v| v >= 0.0));
        assert!(
            sr.linearity_certificate < 1e-8,
            "certificate {}",
            sr.linearity_certificate
        );
    }

    #[test]
    fn zero_emitter_does_not_change_other_columns() {
        let (g, u, v, mut facilities, rm) = layout();
        facilities.push(facility("p4", 2.5, 4.5, 0.0, true));
        let inputs = ExposureInputs {
            grid: &g,
            wind_u: &u,
            wind_v: &v,
            facilities: &facilities,
            region_map: &rm,
            emission_scale: 1e-3,
        };
        let with = source_receptor_matrix(&params(), &inputs).unwrap();
        let trimmed = &facilities[..3];
        let inputs2 = ExposureInputs {
            facilities: trimmed,
            ..inputs
        };
        let without = source_receptor_matrix(&params(), &inputs2).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(with.get(i, j), without.get(i, j));
            }
        }
    }

    #[test]
    fn mirror_symmetric_layout_gives_symmetric_sr() {
        let g = RasterGrid::new(7, 7, 1.0, 0.0, 0.0, -9999.0).unwrap();
        let wind_u = Field::zeros(g.clone());
        let wind_v = Field::zeros(g.clone());
        // facilities and single-cell regions mirrored through the center row
        let facilities = vec![
            facility("a", 1.5, 5.5, 500.0, false),
            facility("b", 1.5, 1.5, 500.0, false),
        ];
        let mut labels = vec![0u32; 49];
        labels[g.index(1, 5)] = 1;
        labels[g.index(5, 5)] = 2;
        let rm = RegionMap::new(g.clone(), labels).unwrap();
        let inputs = ExposureInputs {
            grid: &g,
            wind_u: &wind_u,
            wind_v: &wind_v,
            facilities: &facilities,
            region_map: &rm,
            emission_scale: 1e-3,
        };
        let sr = source_receptor_matrix(&params(), &inputs).unwrap();
        assert!((sr.get(0, 0) - sr.get(1, 1)).abs() < 1e-10);
        assert!((sr.get(0, 1) - sr.get(1, 0)).abs() < 1e-10);
    }

    #[test]
    fn single_facility_is_everyones_key() {
        let (_, _, _, _, rm) = layout();
        let facilities = vec![facility("only", 3.5, 3.5, 100.0, true)];
        let keys = key_associated(&facilities, &rm).unwrap();
        assert!(keys.iter().all(|&k| k == 0));
    }

    #[test]
    fn equidistant_tie_breaks_to_smaller_id() {
        let g = RasterGrid::new(3, 1, 1.0, 0.0, 0.0, -9999.0).unwrap();
        let mut labels = vec![0u32; 3];
        labels[1] = 1;
        let rm = RegionMap::new(g.clone(), labels).unwrap();
        // both facilities exactly 1.0 from the middle cell center
        let facilities = vec![
            facility("b", 2.5, 0.5, 10.0, false),
            facility("a", 0.5, 0.5, 10.0, true),
        ];
        let keys = key_associated(&facilities, &rm).unwrap();
        assert_eq!(facilities[keys[0]].id, "a");
    }

    #[test]
    fn key_association_matches_brute_force_on_random_layouts() {
        let g = RasterGrid::new(10, 8, 2.0, -4.0, 3.0, -9999.0).unwrap();
        for trial in 0..50u64 {
            let mut rng = stream_rng(400 + trial, 0);
            let mut labels = vec![0u32; g.n_cells()];
            for (idx, l) in labels.iter_mut().enumerate() {
                *l = (idx as u32 % 7) + 1;
            }
            labels.shuffle(&mut rng);
            let rm = RegionMap::new(g.clone(), labels).unwrap();
            let facilities: Vec<Facility> = (0..5)
                .map(|j| {
                    facility(
                        &format!("f{j}"),
                        rng.gen_range(-4.0..16.0),
                        rng.gen_range(3.0..19.0),
                        100.0,
                        j % 2 == 0,
                    )
                })
                .collect();
            let keys = key_associated(&facilities, &rm).unwrap();
            let centroids = region_centroids(&rm);
            for (r, (_, &(cx, cy))) in centroids.iter().enumerate() {
                let mut best = usize::MAX;
                let mut best_key: Option<(f64, &str)> = None;
                for (j, f) in facilities.iter().enumerate() {
                    let d2 = (f.x - cx).powi(2) + (f.y - cy).powi(2);
                    let candidate = (d2, f.id.as_str());
                    let better = match best_key {
                        None => true,
                        Some((bd, bid)) => d2 < bd || (d2 == bd && f.id.as_str() < bid),
                    };
                    if better {
                        best_key = Some(candidate);
                        best = j;
                    }
                }
                assert_eq!(keys[r], best, "trial {trial} region {r}");
            }
        }
    }

    fn manual_sr(values: Vec<f64>, n: usize, j: usize) -> SRMatrix {
        SRMatrix {
            region_ids: (1..=n as u32).collect(),
            facility_ids: (0..j).map(|k| format!("f{k}")).collect(),
            values,
            linearity_certificate: 0.0,
        }
    }

    #[test]
    fn all_or_none_scrubbed_hit_exact_bounds() {
        let sr = manual_sr(vec![1.0, 2.0, 6.0, 0.5, 3.0, 1.5], 2, 3);
        let keys = vec![0, 1];
        let all = exposure_levels(&sr, &[true, true, true], &keys).unwrap();
        assert_eq!(all.g, vec![1.0, 1.0]);
        let none = exposure_levels(&sr, &[false, false, false], &keys).unwrap();
        assert_eq!(none.g, vec![0.0, 0.0]);
        assert_eq!(all.z, vec![true, true]);
        assert_eq!(none.z, vec![false, false]);
    }

    #[test]
    fn hand_worked_exposure_value() {
        // one region, three facilities, key is the first; the other two
        // carry weights 2 and 6 and only the weight-2 facility is scrubbed
        let sr = manual_sr(vec![5.0, 2.0, 6.0], 1, 3);
        let out = exposure_levels(&sr, &[false, true, false], &[0]).unwrap();
        assert_eq!(out.g, vec![0.25]);
        assert_eq!(out.weighted_degree, vec![8.0]);
    }

    #[test]
    fn exposure_is_scale_free_per_row() {
        let mut rng = stream_rng(500, 0);
        let values: Vec<f64> = (0..12).map(|_| rng.gen_range(0.1..5.0)).collect();
        let sr = manual_sr(values.clone(), 3, 4);
        let scrubbed = [true, false, true, false];
        let keys = vec![2, 0, 3];
        let base = exposure_levels(&sr, &scrubbed, &keys).unwrap();
        let scaled_values: Vec<f64> = values
            .iter()
            .enumerate()
            .map(|(idx, v)| if idx / 4 == 1 { v * 37.5 } else { *v })
            .collect();
        let sr2 = manual_sr(scaled_values, 3, 4);
        let scaled = exposure_levels(&sr2, &scrubbed, &keys).unwrap();
        for i in 0..3 {
            assert!((base.g[i] - scaled.g[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn scrubbing_a_non_key_facility_never_lowers_g() {
        let mut rng = stream_rng(600, 0);
        for _ in 0..20 {
            let values: Vec<f64> = (0..15).map(|_| rng.gen_range(0.0..4.0) + 0.01).collect();
            let sr = manual_sr(values, 3, 5);
            let keys = vec![rng.gen_range(0..5), rng.gen_range(0..5), rng.gen_range(0..5)];
            let mut scrubbed = [false; 5];
            for s in &mut scrubbed {
                *s = rng.gen_bool(0.4);
            }
            let unscrubbed: Vec<usize> = (0..5).filter(|&j| !scrubbed[j]).collect();
            if unscrubbed.is_empty() {
                continue;
            }
            let flip = unscrubbed[rng.gen_range(0..unscrubbed.len())];
            let before = exposure_levels(&sr, &scrubbed, &keys).unwrap();
            let mut scrubbed_after = scrubbed;
            scrubbed_after[flip] = true;
            let after = exposure_levels(&sr, &scrubbed_after, &keys).unwrap();
            for i in 0..3 {
                if keys[i] == flip {
                    continue;
                }
                assert!(after.g[i] >= before.g[i] - 1e-15, "region {i}");
            }
        }
    }

    #[test]
    fn lone_facility_makes_exposure_degenerate() {
        let sr = manual_sr(vec![3.0, 4.0], 2, 1);
        let err = exposure_levels(&sr, &[true], &[0, 0]).unwrap_err();
        match err {
            Error::DegenerateExposure(ids) => assert_eq!(ids, vec![1, 2]),
            other => panic!("expected degenerate exposure, got {other}"),
        }
    }

    #[test]
    fn identical_draws_have_zero_posterior_sd() {
        let (g, u, v, facilities, rm) = layout();
        let inputs = ExposureInputs {
            grid: &g,
            wind_u: &u,
            wind_v: &v,
            facilities: &facilities,
            region_map: &rm,
            emission_scale: 1e-3,
        };
        let scrubbed: Vec<bool> = facilities.iter().map(|f| f.scrubbed).collect();
        let draws = vec![params(); 3];
        let post = posterior_exposures(&draws, &inputs, &scrubbed).unwrap();
        assert_eq!(post.per_draw.len(), 3);
        assert!(post.sd_g.iter().all(|&s| s == 0.0));
        // z is geometric and identical across draws
        for d in &post.per_draw {
            assert_eq!(d.assignment.z, post.per_draw[0].assignment.z);
        }
    }

    #[test]
    fn varying_draws_give_positive_sd_but_fixed_z() {
        let (g, u, v, facilities, rm) = layout();
        let inputs = ExposureInputs {
            grid: &g,
            wind_u: &u,
            wind_v: &v,
            facilities: &facilities,
            region_map: &rm,
            emission_scale: 1e-3,
        };
        let scrubbed: Vec<bool> = facilities.iter().map(|f| f.scrubbed).collect();
        let mut p2 = params();
        p2.diffusion = 3.0;
        p2.advection = 0.2;
        let draws = vec![params(), p2];
        let post = posterior_exposures(&draws, &inputs, &scrubbed).unwrap();
        assert!(post.sd_g.iter().any(|&s| s > 0.0));
        assert_eq!(
            post.per_draw[0].assignment.z,
            post.per_draw[1].assignment.z
        );
    }

    #[test]
    fn facility_order_does_not_change_z() {
        let (g, u, v, facilities, rm) = layout();
        let scrubbed: Vec<bool> = facilities.iter().map(|f| f.scrubbed).collect();
        let inputs = ExposureInputs {
            grid: &g,
            wind_u: &u,
            wind_v: &v,
            facilities: &facilities,
            region_map: &rm,
            emission_scale: 1e-3,
        };
        let sr = source_receptor_matrix(&params(), &inputs).unwrap();
        let keys = key_associated(&facilities, &rm).unwrap();
        let base = exposure_levels(&sr, &scrubbed, &keys).unwrap();

        let perm = [2usize, 0, 1];
        let facilities2: Vec<Facility> = perm.iter().map(|&j| facilities[j].clone()).collect();
        let scrubbed2: Vec<bool> = facilities2.iter().map(|f| f.scrubbed).collect();
        let inputs2 = ExposureInputs {
            facilities: &facilities2,
            ..inputs
        };
        let sr2 = source_receptor_matrix(&params(), &inputs2).unwrap();
        let keys2 = key_associated(&facilities2, &rm).unwrap();
        let permuted = exposure_levels(&sr2, &scrubbed2, &keys2).unwrap();
        assert_eq!(base.z, permuted.z);
        for i in 0..base.g.len() {
            assert!((base.g[i] - permuted.g[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_outputs_are_well_formed() {
        let (g, u, v, facilities, rm) = layout();
        let inputs = ExposureInputs {
            grid: &g,
            wind_u: &u,
            wind_v: &v,
            facilities: &facilities,
            region_map: &rm,
            emission_scale: 1e-3,
        };
        let scrubbed: Vec<bool> = facilities.iter().map(|f| f.scrubbed).collect();
        let post = posterior_exposures(&[params()], &inputs, &scrubbed).unwrap();
        let sr_csv = format_sr_matrix_csv(&post.per_draw[0].sr);
        assert!(sr_csv.starts_with("region_id,facility_id,value\n"));
        assert_eq!(sr_csv.lines().count(), 1 + 2 * 3);
        let exp_csv = format_exposures_csv(&post);
        assert!(exp_csv.starts_with("region_id,draw,z,g\n"));
        assert_eq!(exp_csv.lines().count(), 1 + 2);
        let summary = format_exposure_summary_csv(&post);
        assert!(summary.starts_with("region_id,z,g_mean,g_sd\n"));
    }
}
