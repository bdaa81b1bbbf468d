//! Raster data model, ESRI ASCII grid IO, facility and region geometry.
//!
//! Everything downstream lives on one regular lattice: scalar fields (observed
//! sulfate, wind components), emission sources rasterized from facility point
//! locations, and region membership as an integer label raster. Types are
//! immutable after load and safe to share across threads.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

/// Regular spatial lattice. `x_origin`/`y_origin` are the lower-left corner,
/// in km on a planar projection supplied by the user. Values are stored
/// row-major from the top-left cell, matching the ESRI ASCII row order.
///
/// Grids as small as 1x1 are permitted so that degenerate cases (single-cell
/// likelihoods, 1-D stencil lines) stay testable; operator stencils only
/// develop interior structure once a dimension reaches 3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterGrid {
    pub ncols: usize,
    pub nrows: usize,
    pub cell_size: f64,
    pub x_origin: f64,
    pub y_origin: f64,
    pub nodata_value: f64,
}

impl RasterGrid {
    pub fn new(
        ncols: usize,
        nrows: usize,
        cell_size: f64,
        x_origin: f64,
        y_origin: f64,
        nodata_value: f64,
    ) -> Result<Self> {
        if ncols == 0 || nrows == 0 {
            return Err(Error::Validation("grid dimensions must be positive".into()));
        }
        if !(cell_size > 0.0) {
            return Err(Error::Validation(format!(
                "cell_size must be > 0, got {cell_size}"
            )));
        }
        Ok(Self {
            ncols,
            nrows,
            cell_size,
            x_origin,
            y_origin,
            nodata_value,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.ncols * self.nrows
    }

    /// Flat index for (row, col), row 0 at the top.
    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.nrows && col < self.ncols);
        row * self.ncols + col
    }

    #[inline]
    pub fn row_col(&self, index: usize) -> (usize, usize) {
        (index / self.ncols, index % self.ncols)
    }

    /// Center coordinates of a cell.
    pub fn cell_center(&self, index: usize) -> (f64, f64) {
        let (row, col) = self.row_col(index);
        let x = self.x_origin + (col as f64 + 0.5) * self.cell_size;
        // row 0 is the top row
        let y = self.y_origin + (self.nrows as f64 - row as f64 - 0.5) * self.cell_size;
        (x, y)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_origin
            && x < self.x_origin + self.ncols as f64 * self.cell_size
            && y >= self.y_origin
            && y < self.y_origin + self.nrows as f64 * self.cell_size
    }

    /// Cell containing the point, or None when off-grid.
    pub fn cell_at(&self, x: f64, y: f64) -> Option<usize> {
        if !self.contains(x, y) {
            return None;
        }
        let col = ((x - self.x_origin) / self.cell_size) as usize;
        let row_from_bottom = ((y - self.y_origin) / self.cell_size) as usize;
        let col = col.min(self.ncols - 1);
        let row_from_bottom = row_from_bottom.min(self.nrows - 1);
        Some(self.index(self.nrows - 1 - row_from_bottom, col))
    }

    /// Grids are compatible when they describe the same lattice.
    pub fn same_lattice(&self, other: &RasterGrid) -> bool {
        self.ncols == other.ncols
            && self.nrows == other.nrows
            && self.cell_size == other.cell_size
            && self.x_origin == other.x_origin
            && self.y_origin == other.y_origin
    }
}

/// Scalar field on a [`RasterGrid`]. Cells equal to the grid's NODATA value
/// are treated as missing; all other values must be finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub grid: RasterGrid,
    pub values: Vec<f64>,
}

impl Field {
    pub fn new(grid: RasterGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_cells() {
            return Err(Error::Dimension(format!(
                "field has {} values for a {}x{} grid ({} cells)",
                values.len(),
                grid.nrows,
                grid.ncols,
                grid.n_cells()
            )));
        }
        for (i, v) in values.iter().enumerate() {
            if *v != grid.nodata_value && !v.is_finite() {
                return Err(Error::Validation(format!(
                    "non-finite value {v} at cell {i}"
                )));
            }
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: RasterGrid, value: f64) -> Self {
        let n = grid.n_cells();
        Self {
            grid,
            values: vec![value; n],
        }
    }

    pub fn zeros(grid: RasterGrid) -> Self {
        Self::constant(grid, 0.0)
    }

    #[inline]
    pub fn is_nodata(&self, index: usize) -> bool {
        self.values[index] == self.grid.nodata_value
    }

    pub fn nodata_count(&self) -> usize {
        (0..self.values.len()).filter(|&i| self.is_nodata(i)).count()
    }
}

/// Point-source facility. `scrubbed` is the binary intervention status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Facility {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub so2_tons: f64,
    pub scrubbed: bool,
    pub heat_input: f64,
    pub operating_time: f64,
}

/// Integer region labels per cell; 0 marks cells outside the study area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMap {
    pub grid: RasterGrid,
    pub labels: Vec<u32>,
}

impl RegionMap {
    pub fn new(grid: RasterGrid, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != grid.n_cells() {
            return Err(Error::Dimension(format!(
                "label raster has {} entries for {} cells",
                labels.len(),
                grid.n_cells()
            )));
        }
        Ok(Self { grid, labels })
    }

    /// Region ids present in the raster, ascending, excluding 0.
    pub fn region_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Loads a label raster from an ASCII grid; values must be nonnegative
    /// integers (NODATA maps to label 0).
    pub fn from_field(field: &Field) -> Result<Self> {
        let mut labels = Vec::with_capacity(field.values.len());
        for (i, &v) in field.values.iter().enumerate() {
            if field.is_nodata(i) {
                labels.push(0);
                continue;
            }
            if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                return Err(Error::Validation(format!(
                    "region label {v} at cell {i} is not a nonnegative integer"
                )));
            }
            labels.push(v as u32);
        }
        Self::new(field.grid.clone(), labels)
    }
}

// ---------------------------------------------------------------------------
// ESRI ASCII grid IO
// ---------------------------------------------------------------------------

fn parse_header_line<'a>(
    path: &str,
    lineno: usize,
    line: Option<&'a str>,
    key: &str,
) -> Result<&'a str> {
    let line = line.ok_or_else(|| Error::parse(path, lineno, format!("missing `{key}` header line")))?;
    let mut parts = line.split_whitespace();
    let name = parts
        .next()
        .ok_or_else(|| Error::parse(path, lineno, format!("empty line, expected `{key}`")))?;
    if !name.eq_ignore_ascii_case(key) {
        return Err(Error::parse(
            path,
            lineno,
            format!("expected header `{key}`, got `{name}`"),
        ));
    }
    parts
        .next()
        .ok_or_else(|| Error::parse(path, lineno, format!("header `{key}` has no value")))
}

/// Reads an ESRI ASCII grid: six header lines (ncols, nrows, xllcorner,
/// yllcorner, cellsize, NODATA_value) followed by `nrows` rows of values,
/// top row first.
pub fn load_ascii_grid(path: impl AsRef<Path>) -> Result<Field> {
    let path_str = path.as_ref().display().to_string();
    let mut text = String::new();
    std::fs::File::open(path.as_ref())
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(&path_str, e))?;
    parse_ascii_grid(&text, &path_str)
}

pub fn parse_ascii_grid(text: &str, origin: &str) -> Result<Field> {
    let mut lines = text.lines();
    let ncols: usize = {
        let v = parse_header_line(origin, 1, lines.next(), "ncols")?;
        v.parse()
            .map_err(|_| Error::parse(origin, 1, format!("ncols `{v}` is not an integer")))?
    };
    let nrows: usize = {
        let v = parse_header_line(origin, 2, lines.next(), "nrows")?;
        v.parse()
            .map_err(|_| Error::parse(origin, 2, format!("nrows `{v}` is not an integer")))?
    };
    let real = |lineno: usize, key: &str, line: Option<&str>| -> Result<f64> {
        let v = parse_header_line(origin, lineno, line, key)?;
        v.parse()
            .map_err(|_| Error::parse(origin, lineno, format!("{key} `{v}` is not a number")))
    };
    let x_origin = real(3, "xllcorner", lines.next())?;
    let y_origin = real(4, "yllcorner", lines.next())?;
    let cell_size = real(5, "cellsize", lines.next())?;
    let nodata = real(6, "NODATA_value", lines.next())?;

    let grid = RasterGrid::new(ncols, nrows, cell_size, x_origin, y_origin, nodata)?;

    let mut values = Vec::with_capacity(grid.n_cells());
    let mut row_count = 0usize;
    for (offset, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = 7 + offset;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| Error::parse(origin, lineno, format!("`{tok}` is not a number")))
            })
            .collect::<Result<_>>()?;
        if row.len() != ncols {
            return Err(Error::Dimension(format!(
                "{origin} line {lineno}: row has {} entries, header says ncols={ncols}",
                row.len()
            )));
        }
        values.extend_from_slice(&row);
        row_count += 1;
    }
    if row_count != nrows {
        return Err(Error::Dimension(format!(
            "{origin}: found {row_count} data rows, header says nrows={nrows}"
        )));
    }
    Field::new(grid, values)
}

/// Canonical text form of a field. Values use Rust's shortest round-trip
/// float formatting, so load -> write -> load is the identity and files whose
/// values carry at most ~17 significant digits survive byte-for-byte.
pub fn format_ascii_grid(field: &Field) -> String {
    let g = &field.grid;
    let mut out = String::new();
    let _ = writeln!(out, "ncols {}", g.ncols);
    let _ = writeln!(out, "nrows {}", g.nrows);
    let _ = writeln!(out, "xllcorner {}", g.x_origin);
    let _ = writeln!(out, "yllcorner {}", g.y_origin);
    let _ = writeln!(out, "cellsize {}", g.cell_size);
    let _ = writeln!(out, "NODATA_value {}", g.nodata_value);
    for row in 0..g.nrows {
        for col in 0..g.ncols {
            if col > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{}", field.values[g.index(row, col)]);
        }
        out.push('\n');
    }
    out
}

pub fn write_ascii_grid(field: &Field, path: impl AsRef<Path>) -> Result<()> {
    let path_str = path.as_ref().display().to_string();
    std::fs::write(path.as_ref(), format_ascii_grid(field)).map_err(|e| Error::io(&path_str, e))
}

// ---------------------------------------------------------------------------
// Facilities
// ---------------------------------------------------------------------------

const FACILITY_HEADER: [&str; 7] = [
    "id",
    "x",
    "y",
    "so2_tons",
    "scrubbed",
    "heat_input",
    "operating_time",
];

/// Reads the facility table, preserving file order. Facilities must sit
/// inside the grid extent and carry nonnegative emissions.
pub fn load_facilities(path: impl AsRef<Path>, grid: &RasterGrid) -> Result<Vec<Facility>> {
    let path_str = path.as_ref().display().to_string();
    let mut reader = csv::Reader::from_path(path.as_ref()).map_err(|e| {
        Error::Validation(format!("cannot open facilities file {path_str}: {e}"))
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(&path_str, 1, e.to_string()))?
        .clone();
    let expected: Vec<&str> = FACILITY_HEADER.to_vec();
    let actual: Vec<&str> = headers.iter().collect();
    if actual != expected {
        return Err(Error::parse(
            &path_str,
            1,
            format!("expected header `{}`, got `{}`", expected.join(","), actual.join(",")),
        ));
    }
    let mut facilities = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let lineno = idx + 2;
        let record = record.map_err(|e| Error::parse(&path_str, lineno, e.to_string()))?;
        let field = |i: usize| -> Result<&str> {
            record
                .get(i)
                .ok_or_else(|| Error::parse(&path_str, lineno, format!("missing column {}", FACILITY_HEADER[i])))
        };
        let num = |i: usize| -> Result<f64> {
            let raw = field(i)?;
            raw.parse::<f64>().map_err(|_| {
                Error::parse(&path_str, lineno, format!("{} `{raw}` is not a number", FACILITY_HEADER[i]))
            })
        };
        let id = field(0)?.to_string();
        let x = num(1)?;
        let y = num(2)?;
        let so2_tons = num(3)?;
        let scrubbed = match field(4)? {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Validation(format!(
                    "{path_str} line {lineno}: scrubbed must be 0 or 1, got `{other}`"
                )))
            }
        };
        let heat_input = num(5)?;
        let operating_time = num(6)?;
        if so2_tons < 0.0 {
            return Err(Error::Validation(format!(
                "facility `{id}` has negative so2_tons {so2_tons}"
            )));
        }
        if heat_input < 0.0 || operating_time < 0.0 {
            return Err(Error::Validation(format!(
                "facility `{id}` has negative heat_input or operating_time"
            )));
        }
        if !grid.contains(x, y) {
            return Err(Error::Validation(format!(
                "facility `{id}` at ({x}, {y}) lies outside the grid extent"
            )));
        }
        facilities.push(Facility {
            id,
            x,
            y,
            so2_tons,
            scrubbed,
            heat_input,
            operating_time,
        });
    }
    Ok(facilities)
}

pub fn format_facilities_csv(facilities: &[Facility]) -> String {
    let mut out = String::new();
    out.push_str(&FACILITY_HEADER.join(","));
    out.push('\n');
    for f in facilities {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            f.id,
            f.x,
            f.y,
            f.so2_tons,
            if f.scrubbed { 1 } else { 0 },
            f.heat_input,
            f.operating_time
        );
    }
    out
}

pub fn write_facilities(facilities: &[Facility], path: impl AsRef<Path>) -> Result<()> {
    let path_str = path.as_ref().display().to_string();
    std::fs::write(path.as_ref(), format_facilities_csv(facilities))
        .map_err(|e| Error::io(&path_str, e))
}

/// Deposits `so2_tons * emission_scale` into each facility's containing cell;
/// facilities sharing a cell sum. The result is the source term for the
/// transport operators.
pub fn rasterize_sources(
    facilities: &[Facility],
    grid: &RasterGrid,
    emission_scale: f64,
) -> Result<Field> {
    let mut field = Field::zeros(grid.clone());
    for f in facilities {
        let cell = grid.cell_at(f.x, f.y).ok_or_else(|| {
            Error::Validation(format!("facility `{}` at ({}, {}) is off-grid", f.id, f.x, f.y))
        })?;
        field.values[cell] += f.so2_tons * emission_scale;
    }
    Ok(field)
}

/// Per-region membership weights: uniform over a region's cells, summing to
/// one. Keys ascend by region id.
pub fn region_cell_weights(region_map: &RegionMap) -> BTreeMap<u32, Vec<(usize, f64)>> {
    let mut cells: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (idx, &label) in region_map.labels.iter().enumerate() {
        if label != 0 {
            cells.entry(label).or_default().push(idx);
        }
    }
    cells
        .into_iter()
        .map(|(id, members)| {
            let w = 1.0 / members.len() as f64;
            (id, members.into_iter().map(|c| (c, w)).collect())
        })
        .collect()
}

/// Same as [`region_cell_weights`] but checked against a caller-supplied id
/// list; any id without labeled cells is a missing-region error.
pub fn region_cell_weights_for(
    region_map: &RegionMap,
    required_ids: &[u32],
) -> Result<BTreeMap<u32, Vec<(usize, f64)>>> {
    let weights = region_cell_weights(region_map);
    let missing: Vec<u32> = required_ids
        .iter()
        .copied()
        .filter(|id| !weights.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingRegion(missing));
    }
    Ok(weights)
}

/// Unweighted mean of member cell centers, per region.
pub fn region_centroids(region_map: &RegionMap) -> BTreeMap<u32, (f64, f64)> {
    let mut sums: BTreeMap<u32, (f64, f64, usize)> = BTreeMap::new();
    for (idx, &label) in region_map.labels.iter().enumerate() {
        if label == 0 {
            continue;
        }
        let (x, y) = region_map.grid.cell_center(idx);
        let entry = sums.entry(label).or_insert((0.0, 0.0, 0));
        entry.0 += x;
        entry.1 += y;
        entry.2 += 1;
    }
    sums.into_iter()
        .map(|(id, (sx, sy, n))| (id, (sx / n as f64, sy / n as f64)))
        .collect()
}
