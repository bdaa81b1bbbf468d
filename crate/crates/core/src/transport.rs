//! Advection-diffusion transport: discrete operators, steady-state pollutant
//! fields, and the Gaussian likelihood of the observed sulfate surface.
//!
//! Two coupled species move on the grid. SO2 is emitted by point sources,
//! drifts and diffuses, and oxidizes into SO4 at a constant rate; SO4 drifts
//! and diffuses the same way and is lost to deposition. Both operators share
//! the discretization: 5-point central Laplacian, donor-cell upwind advection
//! in conservative form with face velocities averaged from the adjacent cell
//! winds, reflecting (zero diffusive flux) boundaries with advective outflow
//! through boundary faces and no inflow. The result is a column diagonally
//! dominant M-matrix, so banded LU without pivoting is exact-structure and
//! stable, and every column sums to the removal rate plus boundary outflow.

use crate::error::{Error, Result};
use crate::grid::{Field, RasterGrid};
use crate::linalg::{lyapunov_covariance, BandedCholesky, BandedLu, BandedMatrix};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const PARAM_NAMES: [&str; 6] = [
    "diffusion",
    "advection",
    "oxidation",
    "deposition",
    "noise_var",
    "background",
];

/// Physical parameters of the transport and observation model. Rates are per
/// year with lengths in km; `advection` is a dimensionless multiplier on the
/// supplied wind field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportParams {
    /// diffusion coefficient (km²/yr)
    pub diffusion: f64,
    /// wind multiplier (dimensionless)
    pub advection: f64,
    /// SO2 -> SO4 conversion rate (1/yr)
    pub oxidation: f64,
    /// SO4 removal rate (1/yr)
    pub deposition: f64,
    /// process-noise variance of the observed field
    pub noise_var: f64,
    /// spatially constant sulfate level not attributable to modeled sources
    pub background: f64,
}

impl TransportParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("diffusion", self.diffusion),
            ("advection", self.advection),
            ("oxidation", self.oxidation),
            ("deposition", self.deposition),
            ("noise_var", self.noise_var),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!(
                    "{name} must be strictly positive, got {v}"
                )));
            }
        }
        if !(self.background >= 0.0) || !self.background.is_finite() {
            return Err(Error::Validation(format!(
                "background must be nonnegative, got {}",
                self.background
            )));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.diffusion,
            self.advection,
            self.oxidation,
            self.deposition,
            self.noise_var,
            self.background,
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            diffusion: a[0],
            advection: a[1],
            oxidation: a[2],
            deposition: a[3],
            noise_var: a[4],
            background: a[5],
        }
    }
}

/// Covariance family for the observed-field likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovarianceModel {
    /// Simultaneous autoregression: precision Q = (1/noise_var)·AᵀA with A
    /// the SO4 operator. Sparse, exact log-determinants, the default.
    Sar,
    /// Stationary covariance of the continuous-time process, solving
    /// A·Σ + Σ·Aᵀ = noise_var·I. Dense; desk-scale validation only.
    Lyapunov,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSettings {
    pub model: CovarianceModel,
    /// measurement nugget variance added to the diagonal; > 0 forces the
    /// dense likelihood path
    pub nugget: f64,
    /// cell-count ceiling for dense covariance paths
    pub desk_scale_limit: usize,
}

impl Default for CovarianceSettings {
    fn default() -> Self {
        Self {
            model: CovarianceModel::Sar,
            nugget: 0.0,
            desk_scale_limit: 400,
        }
    }
}

/// Assembled SO2 and SO4 operators on one grid. Row i of either matrix gives
/// the net removal stencil of cell i; off-diagonals are nonpositive.
#[derive(Debug, Clone)]
pub struct OperatorPair {
    pub grid: RasterGrid,
    pub so2: BandedMatrix,
    pub so4: BandedMatrix,
}

fn stencil_bandwidth(grid: &RasterGrid) -> usize {
    if grid.nrows > 1 {
        grid.ncols
    } else if grid.ncols > 1 {
        1
    } else {
        0
    }
}

/// Adds one face's donor-cell flux. `flux` is the signed face velocity over
/// cell size, positive when flowing from `p` toward `q`.
fn upwind_face(m: &mut BandedMatrix, p: usize, q: usize, flux: f64) {
    if flux > 0.0 {
        m.add(p, p, flux);
        m.add(q, p, -flux);
    } else if flux < 0.0 {
        m.add(q, q, -flux);
        m.add(p, q, flux);
    }
}

pub fn assemble_operators(
    grid: &RasterGrid,
    wind_u: &Field,
    wind_v: &Field,
    params: &TransportParams,
) -> Result<OperatorPair> {
    params.validate()?;
    if !(grid.cell_size > 0.0) {
        return Err(Error::Validation(format!(
            "cannot assemble operators with cell_size {}",
            grid.cell_size
        )));
    }
    if !wind_u.grid.same_lattice(grid) || !wind_v.grid.same_lattice(grid) {
        return Err(Error::Dimension(
            "wind fields are not aligned to the grid".into(),
        ));
    }
    for i in 0..grid.n_cells() {
        if wind_u.is_nodata(i) || wind_v.is_nodata(i) {
            return Err(Error::Validation(format!(
                "wind field has NODATA at cell {i}; wind must cover the whole grid"
            )));
        }
    }

    let n = grid.n_cells();
    let kb = stencil_bandwidth(grid);
    let mut base = BandedMatrix::zeros(n, kb, kb);
    let h = grid.cell_size;
    let inv_h = 1.0 / h;
    let inv_h2 = inv_h * inv_h;
    let th1 = params.diffusion;
    let th2 = params.advection;

    for row in 0..grid.nrows {
        for col in 0..grid.ncols {
            let p = grid.index(row, col);

            let mut neighbors = [usize::MAX; 4];
            let mut k = 0;
            if col > 0 {
                neighbors[k] = grid.index(row, col - 1);
                k += 1;
            }
            if col + 1 < grid.ncols {
                neighbors[k] = grid.index(row, col + 1);
                k += 1;
            }
            if row > 0 {
                neighbors[k] = grid.index(row - 1, col);
                k += 1;
            }
            if row + 1 < grid.nrows {
                neighbors[k] = grid.index(row + 1, col);
                k += 1;
            }
            for &q in &neighbors[..k] {
                base.add(p, q, -th1 * inv_h2);
                base.add(p, p, th1 * inv_h2);
            }

            let u_p = th2 * wind_u.values[p];
            let v_p = th2 * wind_v.values[p];

            // east face (interior faces visited once, from their west cell)
            if col + 1 < grid.ncols {
                let q = grid.index(row, col + 1);
                let w = 0.5 * (u_p + th2 * wind_u.values[q]);
                upwind_face(&mut base, p, q, w * inv_h);
            } else if u_p > 0.0 {
                base.add(p, p, u_p * inv_h);
            }
            // west boundary face, outward normal -x
            if col == 0 && u_p < 0.0 {
                base.add(p, p, -u_p * inv_h);
            }
            // north face (row - 1 lies to the north)
            if row > 0 {
                let q = grid.index(row - 1, col);
                let w = 0.5 * (v_p + th2 * wind_v.values[q]);
                upwind_face(&mut base, p, q, w * inv_h);
            } else if v_p > 0.0 {
                base.add(p, p, v_p * inv_h);
            }
            // south boundary face, outward normal -y
            if row + 1 == grid.nrows && v_p < 0.0 {
                base.add(p, p, -v_p * inv_h);
            }
        }
    }

    let mut so2 = base.clone();
    let mut so4 = base;
    for p in 0..n {
        so2.add(p, p, params.oxidation);
        so4.add(p, p, params.deposition);
    }
    Ok(OperatorPair {
        grid: grid.clone(),
        so2,
        so4,
    })
}

/// Operator pair with banded LU factorizations attached. Immutable once
/// built; safe to share across threads for parallel solves.
#[derive(Debug, Clone)]
pub struct FactoredOps {
    pub pair: OperatorPair,
    so2_lu: BandedLu,
    so4_lu: BandedLu,
}

impl OperatorPair {
    pub fn factor(self) -> Result<FactoredOps> {
        let so2_lu = BandedLu::factor(&self.so2)?;
        let so4_lu = BandedLu::factor(&self.so4)?;
        Ok(FactoredOps {
            pair: self,
            so2_lu,
            so4_lu,
        })
    }
}

impl FactoredOps {
    /// Expected SO4 surface from the given sources, excluding background:
    /// solve the SO2 balance, convert by the oxidation rate, solve the SO4
    /// balance.
    pub fn steady_state_mean(&self, sources: &Field, params: &TransportParams) -> Result<Field> {
        if !sources.grid.same_lattice(&self.pair.grid) {
            return Err(Error::Dimension(
                "source field is not aligned to the operator grid".into(),
            ));
        }
        let so2 = self.so2_lu.solve(&sources.values);
        let forcing: Vec<f64> = so2.iter().map(|v| params.oxidation * v).collect();
        let so4 = self.so4_lu.solve(&forcing);
        Field::new(self.pair.grid.clone(), so4)
    }

    /// SO2 and SO4 steady states together, for mass-balance accounting.
    pub fn steady_state_pair(
        &self,
        sources: &Field,
        params: &TransportParams,
    ) -> Result<(Field, Field)> {
        if !sources.grid.same_lattice(&self.pair.grid) {
            return Err(Error::Dimension(
                "source field is not aligned to the operator grid".into(),
            ));
        }
        let so2 = self.so2_lu.solve(&sources.values);
        let forcing: Vec<f64> = so2.iter().map(|v| params.oxidation * v).collect();
        let so4 = self.so4_lu.solve(&forcing);
        Ok((
            Field::new(self.pair.grid.clone(), so2)?,
            Field::new(self.pair.grid.clone(), so4)?,
        ))
    }

    /// Applies the SAR precision Q = (1/noise_var)·AᵀA.
    pub fn sar_precision_apply(&self, params: &TransportParams, v: &[f64]) -> Vec<f64> {
        let av = self.pair.so4.matvec(v);
        let mut atav = self.pair.so4.matvec_transpose(&av);
        for x in &mut atav {
            *x /= params.noise_var;
        }
        atav
    }

    /// log|Q| for the SAR precision over the full grid.
    pub fn log_det_precision(&self, params: &TransportParams) -> f64 {
        let n = self.pair.grid.n_cells() as f64;
        2.0 * self.so4_lu.log_abs_det() - n * params.noise_var.ln()
    }

    /// Draws one observed surface: mean plus SAR noise, using
    /// noise = sqrt(noise_var)·A⁻¹z with z standard normal.
    pub fn sample_observation(
        &self,
        sources: &Field,
        params: &TransportParams,
        rng: &mut impl Rng,
    ) -> Result<Field> {
        let mean = self.steady_state_mean(sources, params)?;
        let n = self.pair.grid.n_cells();
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let noise = self.so4_lu.solve(&z);
        let sd = params.noise_var.sqrt();
        let values: Vec<f64> = mean
            .values
            .iter()
            .zip(&noise)
            .map(|(m, e)| params.background + m + sd * e)
            .collect();
        Field::new(self.pair.grid.clone(), values)
    }
}

/// Everything the likelihood needs besides the parameters: grid, winds,
/// emission-scaled sources, the observed surface, and covariance settings.
/// NODATA cells in `observed` are excluded by conditioning; the returned
/// value is then the conditional likelihood given the masked cells sitting
/// at their model mean, not the marginal over them.
#[derive(Debug, Clone)]
pub struct TransportData {
    pub grid: RasterGrid,
    pub wind_u: Field,
    pub wind_v: Field,
    pub sources: Field,
    pub observed: Field,
    pub covariance: CovarianceSettings,
    observed_cells: Vec<usize>,
}

impl TransportData {
    pub fn new(
        wind_u: Field,
        wind_v: Field,
        sources: Field,
        observed: Field,
        covariance: CovarianceSettings,
    ) -> Result<Self> {
        let grid = observed.grid.clone();
        for (name, f) in [("wind_u", &wind_u), ("wind_v", &wind_v), ("sources", &sources)] {
            if !f.grid.same_lattice(&grid) {
                return Err(Error::Dimension(format!(
                    "{name} is not on the same lattice as the observed field"
                )));
            }
        }
        let observed_cells: Vec<usize> =
            (0..grid.n_cells()).filter(|&i| !observed.is_nodata(i)).collect();
        if observed_cells.is_empty() {
            return Err(Error::Validation(
                "observed field is entirely NODATA; nothing to fit".into(),
            ));
        }
        Ok(Self {
            grid,
            wind_u,
            wind_v,
            sources,
            observed,
            covariance,
            observed_cells,
        })
    }

    pub fn n_observed(&self) -> usize {
        self.observed_cells.len()
    }

    pub fn observed_cells(&self) -> &[usize] {
        &self.observed_cells
    }

    pub fn assemble(&self, params: &TransportParams) -> Result<FactoredOps> {
        assemble_operators(&self.grid, &self.wind_u, &self.wind_v, params)?.factor()
    }

    pub fn steady_state(&self, params: &TransportParams) -> Result<Field> {
        self.assemble(params)?.steady_state_mean(&self.sources, params)
    }

    /// Full-constant Gaussian log-likelihood of the observed surface.
    pub fn log_likelihood(&self, params: &TransportParams) -> Result<f64> {
        params.validate()?;
        let ops = self.assemble(params)?;
        let mean = ops.steady_state_mean(&self.sources, params)?;

        let dense_needed =
            self.covariance.model == CovarianceModel::Lyapunov || self.covariance.nugget > 0.0;
        if dense_needed {
            return self.dense_log_likelihood(&ops, &mean, params);
        }

        let n = self.grid.n_cells();
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        if self.observed_cells.len() == n {
            let residual: Vec<f64> = (0..n)
                .map(|i| self.observed.values[i] - params.background - mean.values[i])
                .collect();
            let ar = ops.pair.so4.matvec(&residual);
            let quad = ar.iter().map(|x| x * x).sum::<f64>() / params.noise_var;
            let log_det_q = ops.log_det_precision(params);
            Ok(0.5 * log_det_q - 0.5 * quad - 0.5 * n as f64 * ln_2pi)
        } else {
            let keep = &self.observed_cells;
            let residual: Vec<f64> = keep
                .iter()
                .map(|&i| self.observed.values[i] - params.background - mean.values[i])
                .collect();
            let normal = ops.pair.so4.normal_matrix();
            let sub = normal.select(keep);
            let chol = BandedCholesky::factor(&sub)?;
            let n_obs = keep.len() as f64;
            let log_det_q = chol.log_det() - n_obs * params.noise_var.ln();
            let lt_r = chol.lower_transpose_apply(&residual);
            let quad = lt_r.iter().map(|x| x * x).sum::<f64>() / params.noise_var;
            Ok(0.5 * log_det_q - 0.5 * quad - 0.5 * n_obs * ln_2pi)
        }
    }

    /// Dense covariance path: Lyapunov model or nonzero nugget. Restricted
    /// to small grids; masked cells are marginalized exactly here because
    /// the covariance itself is available.
    fn dense_log_likelihood(
        &self,
        ops: &FactoredOps,
        mean: &Field,
        params: &TransportParams,
    ) -> Result<f64> {
        let n = self.grid.n_cells();
        if n > self.covariance.desk_scale_limit {
            return Err(Error::Validation(format!(
                "dense covariance path needs n <= {}, grid has {n} cells \
                 (use the sparse default for production grids)",
                self.covariance.desk_scale_limit
            )));
        }
        let a = ops.pair.so4.to_dense();
        let mut sigma = match self.covariance.model {
            CovarianceModel::Lyapunov => lyapunov_covariance(&a, params.noise_var)?,
            CovarianceModel::Sar => {
                let gram = a.transpose() * &a;
                let chol = gram.cholesky().ok_or_else(|| {
                    Error::Numerical("dense Gram matrix is not positive definite".into())
                })?;
                chol.inverse() * params.noise_var
            }
        };
        for i in 0..n {
            sigma[(i, i)] += self.covariance.nugget;
        }
        let keep = &self.observed_cells;
        let m = keep.len();
        let mut sigma_oo = DMatrix::zeros(m, m);
        for (p, &i) in keep.iter().enumerate() {
            for (q, &j) in keep.iter().enumerate() {
                sigma_oo[(p, q)] = sigma[(i, j)];
            }
        }
        let residual = nalgebra::DVector::from_iterator(
            m,
            keep.iter()
                .map(|&i| self.observed.values[i] - params.background - mean.values[i]),
        );
        let chol = sigma_oo
            .cholesky()
            .ok_or_else(|| Error::Numerical("observed-cell covariance not positive definite".into()))?;
        let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let alpha = chol.solve(&residual);
        let quad = residual.dot(&alpha);
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        Ok(-0.5 * (m as f64 * ln_2pi + log_det + quad))
    }
}
