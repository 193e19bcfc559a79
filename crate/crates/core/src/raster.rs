//! Raster data model, ESRI ASCII grid I/O, block aggregation, statistics
//! and PNG rendering.
//!
//! Grids are immutable once built; every transformation returns a new grid.
//! Cells are stored row-major with row 0 the northernmost row (the first data
//! row of an ASCII grid file). The origin is the lower-left corner.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};

/// Georeferenced 2-D raster with NODATA support. Values have f64 semantics.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    n_rows: usize,
    n_cols: usize,
    cell_size: f64,
    origin_easting: f64,
    origin_northing: f64,
    nodata_value: f64,
    cells: Vec<f64>,
}

/// Mean and population standard deviation over valid (non-NODATA) cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridStats {
    pub mean: f64,
    pub sd: f64,
    pub valid_count: usize,
}

impl Grid {
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        cell_size: f64,
        origin_easting: f64,
        origin_northing: f64,
        nodata_value: f64,
        cells: Vec<f64>,
    ) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 {
            return Err(CoreError::InvalidArgument(
                "grid dimensions must be >= 1".into(),
            ));
        }
        if !(cell_size > 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "cell_size must be > 0, got {cell_size}"
            )));
        }
        if cells.len() != n_rows * n_cols {
            return Err(CoreError::InvalidArgument(format!(
                "expected {} cells, got {}",
                n_rows * n_cols,
                cells.len()
            )));
        }
        for (i, &v) in cells.iter().enumerate() {
            if !v.is_finite() && v.to_bits() != nodata_value.to_bits() {
                return Err(CoreError::InvalidArgument(format!(
                    "cell {i} is {v}, neither finite nor the NODATA value"
                )));
            }
        }
        Ok(Grid {
            n_rows,
            n_cols,
            cell_size,
            origin_easting,
            origin_northing,
            nodata_value,
            cells,
        })
    }

    /// New grid with the same georeferencing, filled with NODATA.
    pub fn like(&self) -> Grid {
        Grid {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            cell_size: self.cell_size,
            origin_easting: self.origin_easting,
            origin_northing: self.origin_northing,
            nodata_value: self.nodata_value,
            cells: vec![self.nodata_value; self.n_rows * self.n_cols],
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }
    pub fn n_cols(&self) -> usize {
        self.n_cols
    }
    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }
    pub fn origin_easting(&self) -> f64 {
        self.origin_easting
    }
    pub fn origin_northing(&self) -> f64 {
        self.origin_northing
    }
    pub fn nodata_value(&self) -> f64 {
        self.nodata_value
    }
    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    /// Raw cell value (may be NODATA). Row 0 is the northernmost row.
    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.cells[row * self.n_cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.cells[row * self.n_cols + col] = v;
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        v.to_bits() == self.nodata_value.to_bits()
    }

    /// Valid cell value, or None for NODATA.
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let v = self.value(row, col);
        if self.is_nodata(v) {
            None
        } else {
            Some(v)
        }
    }

    /// Cell containing a point: floor((coord − origin) / cell_size).
    /// Points on a boundary resolve to the higher-index cell in that
    /// convention. Returns None outside the grid.
    pub fn cell_at(&self, easting: f64, northing: f64) -> Option<(usize, usize)> {
        let col = ((easting - self.origin_easting) / self.cell_size).floor();
        let row_s = ((northing - self.origin_northing) / self.cell_size).floor();
        if col < 0.0 || row_s < 0.0 || col >= self.n_cols as f64 || row_s >= self.n_rows as f64 {
            return None;
        }
        // row_s counts from the southern edge; storage counts from the north
        Some((self.n_rows - 1 - row_s as usize, col as usize))
    }

    /// Center coordinates of a cell.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let e = self.origin_easting + (col as f64 + 0.5) * self.cell_size;
        let n = self.origin_northing + ((self.n_rows - 1 - row) as f64 + 0.5) * self.cell_size;
        (e, n)
    }

    /// True when two grids cover the same cells (dims, cell size, origin).
    pub fn same_georeference(&self, other: &Grid) -> bool {
        self.n_rows == other.n_rows
            && self.n_cols == other.n_cols
            && self.cell_size == other.cell_size
            && self.origin_easting == other.origin_easting
            && self.origin_northing == other.origin_northing
    }

    /// SHA-256 over header fields and cell bytes; used for provenance
    /// manifests.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.n_rows.to_le_bytes());
        h.update(self.n_cols.to_le_bytes());
        h.update(self.cell_size.to_le_bytes());
        h.update(self.origin_easting.to_le_bytes());
        h.update(self.origin_northing.to_le_bytes());
        h.update(self.nodata_value.to_le_bytes());
        for v in &self.cells {
            h.update(v.to_le_bytes());
        }
        hex_string(&h.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Parses an ESRI ASCII grid. Header keys (case-insensitive, any order):
/// ncols, nrows, xllcorner, yllcorner, cellsize, nodata_value. The first data
/// row is the northernmost. A missing nodata_value defaults to -9999.
pub fn read_ascii_grid<R: BufRead>(reader: R) -> Result<Grid> {
    let mut ncols: Option<usize> = None;
    let mut nrows: Option<usize> = None;
    let mut xll: Option<f64> = None;
    let mut yll: Option<f64> = None;
    let mut cell: Option<f64> = None;
    let mut nodata: Option<f64> = None;
    let mut cells: Vec<f64> = Vec::new();
    let mut in_data = false;

    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| CoreError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let mut tokens = line.split_whitespace().peekable();
        let Some(&first) = tokens.peek() else {
            continue;
        };
        if !in_data && first.chars().next().is_some_and(|c| c.is_ascii_alphabetic()) {
            let key = tokens.next().unwrap().to_ascii_lowercase();
            let val = tokens.next().ok_or_else(|| CoreError::Parse {
                line: lineno,
                message: format!("header key '{key}' has no value"),
            })?;
            if tokens.next().is_some() {
                return Err(CoreError::Parse {
                    line: lineno,
                    message: format!("trailing tokens after header key '{key}'"),
                });
            }
            let parse_f = |v: &str| {
                v.parse::<f64>().map_err(|_| CoreError::Parse {
                    line: lineno,
                    message: format!("non-numeric value '{v}' for header key '{key}'"),
                })
            };
            match key.as_str() {
                "ncols" => {
                    ncols = Some(parse_f(val)? as usize);
                }
                "nrows" => {
                    nrows = Some(parse_f(val)? as usize);
                }
                "xllcorner" => xll = Some(parse_f(val)?),
                "yllcorner" => yll = Some(parse_f(val)?),
                "cellsize" => cell = Some(parse_f(val)?),
                "nodata_value" => nodata = Some(parse_f(val)?),
                other => {
                    return Err(CoreError::Parse {
                        line: lineno,
                        message: format!("unknown header key '{other}'"),
                    });
                }
            }
            continue;
        }
        in_data = true;
        let expected = match (ncols, nrows) {
            (Some(c), Some(r)) => c * r,
            _ => {
                return Err(CoreError::Parse {
                    line: lineno,
                    message: "data before ncols/nrows header".into(),
                });
            }
        };
        for tok in tokens {
            let v: f64 = tok.parse().map_err(|_| CoreError::Parse {
                line: lineno,
                message: format!("non-numeric data token '{tok}'"),
            })?;
            cells.push(v);
            if cells.len() > expected {
                return Err(CoreError::Parse {
                    line: lineno,
                    message: format!("more than {expected} data values"),
                });
            }
        }
    }

    let missing = |what: &str| CoreError::Parse {
        line: 0,
        message: format!("missing header key '{what}'"),
    };
    let ncols = ncols.ok_or_else(|| missing("ncols"))?;
    let nrows = nrows.ok_or_else(|| missing("nrows"))?;
    let xll = xll.ok_or_else(|| missing("xllcorner"))?;
    let yll = yll.ok_or_else(|| missing("yllcorner"))?;
    let cell = cell.ok_or_else(|| missing("cellsize"))?;
    let nodata = nodata.unwrap_or(-9999.0);
    if cells.len() != ncols * nrows {
        return Err(CoreError::Parse {
            line: 0,
            message: format!("expected {} data values, found {}", ncols * nrows, cells.len()),
        });
    }
    Grid::new(nrows, ncols, cell, xll, yll, nodata, cells)
}

pub fn read_ascii_grid_file(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    read_ascii_grid(std::io::BufReader::new(f))
}

/// Writes an ESRI ASCII grid, northernmost row first. Values are printed with
/// Rust's shortest round-trip f64 formatting, so read∘write is bit-exact.
pub fn write_ascii_grid<W: Write>(grid: &Grid, mut w: W) -> std::io::Result<()> {
    writeln!(w, "ncols {}", grid.n_cols)?;
    writeln!(w, "nrows {}", grid.n_rows)?;
    writeln!(w, "xllcorner {}", grid.origin_easting)?;
    writeln!(w, "yllcorner {}", grid.origin_northing)?;
    writeln!(w, "cellsize {}", grid.cell_size)?;
    writeln!(w, "NODATA_value {}", grid.nodata_value)?;
    let mut line = String::new();
    for row in 0..grid.n_rows {
        line.clear();
        for col in 0..grid.n_cols {
            if col > 0 {
                line.push(' ');
            }
            let _ = write!(line, "{}", grid.value(row, col));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn write_ascii_grid_file(grid: &Grid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut buf = std::io::BufWriter::new(f);
    write_ascii_grid(grid, &mut buf).map_err(|e| CoreError::io(path, e))
}

/// Coarsens a grid by `factor`: each output cell is the mean of the valid
/// cells in its factor×factor block, NODATA when the whole block is NODATA.
/// Output dims are floor(n/factor); blocks anchor at the lower-left corner so
/// the origin is unchanged (leftover cells are trimmed from the north and
/// east edges). The cell size is multiplied by `factor`.
pub fn block_aggregate(grid: &Grid, factor: usize) -> Result<Grid> {
    if factor == 0 {
        return Err(CoreError::InvalidArgument(
            "aggregation factor must be >= 1".into(),
        ));
    }
    if factor == 1 {
        return Ok(grid.clone());
    }
    let out_rows = grid.n_rows / factor;
    let out_cols = grid.n_cols / factor;
    if out_rows == 0 || out_cols == 0 {
        return Err(CoreError::InvalidArgument(format!(
            "factor {factor} larger than grid {}x{}",
            grid.n_rows, grid.n_cols
        )));
    }
    let row_offset = grid.n_rows - out_rows * factor; // trim from the north
    let mut cells = Vec::with_capacity(out_rows * out_cols);
    for orow in 0..out_rows {
        for ocol in 0..out_cols {
            let mut sum = 0.0;
            let mut count = 0usize;
            for dr in 0..factor {
                for dc in 0..factor {
                    if let Some(v) = grid.get(row_offset + orow * factor + dr, ocol * factor + dc)
                    {
                        sum += v;
                        count += 1;
                    }
                }
            }
            cells.push(if count == 0 {
                grid.nodata_value
            } else {
                sum / count as f64
            });
        }
    }
    Grid::new(
        out_rows,
        out_cols,
        grid.cell_size * factor as f64,
        grid.origin_easting,
        grid.origin_northing,
        grid.nodata_value,
        cells,
    )
}

/// Mean and population SD over valid cells (Welford's recurrence).
pub fn grid_stats(grid: &Grid) -> Result<GridStats> {
    let mut count = 0usize;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for &v in &grid.cells {
        if grid.is_nodata(v) {
            continue;
        }
        count += 1;
        let delta = v - mean;
        mean += delta / count as f64;
        m2 += delta * (v - mean);
    }
    if count == 0 {
        return Err(CoreError::InvalidArgument(
            "grid has no valid cells".into(),
        ));
    }
    Ok(GridStats {
        mean,
        sd: (m2 / count as f64).sqrt(),
        valid_count: count,
    })
}

/// Piecewise-linear RGB ramp with fixed stops; deterministic by construction.
#[derive(Debug, Clone)]
pub struct ColorRamp {
    stops: Vec<[u8; 3]>,
}

impl ColorRamp {
    pub fn new(stops: Vec<[u8; 3]>) -> Self {
        assert!(stops.len() >= 2, "a ramp needs at least two stops");
        ColorRamp { stops }
    }

    /// Perceptually-uniform default (viridis stops).
    pub fn viridis() -> Self {
        ColorRamp::new(vec![
            [68, 1, 84],
            [72, 40, 120],
            [62, 74, 137],
            [49, 104, 142],
            [38, 130, 142],
            [31, 158, 137],
            [53, 183, 121],
            [109, 205, 89],
            [180, 222, 44],
            [253, 231, 37],
        ])
    }

    /// Color for t in [0, 1]; clamped outside.
    pub fn sample(&self, t: f64) -> [u8; 3] {
        let t = t.clamp(0.0, 1.0);
        let segments = (self.stops.len() - 1) as f64;
        let pos = t * segments;
        let i = (pos.floor() as usize).min(self.stops.len() - 2);
        let frac = pos - i as f64;
        let a = self.stops[i];
        let b = self.stops[i + 1];
        let mut out = [0u8; 3];
        for ch in 0..3 {
            out[ch] = (a[ch] as f64 + (b[ch] as f64 - a[ch] as f64) * frac).round() as u8;
        }
        out
    }
}

/// Renders valid cells onto the ramp (linear in [min, max] of valid cells);
/// NODATA cells are transparent. Output is deterministic for fixed input.
pub fn render_png(grid: &Grid, ramp: &ColorRamp, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in &grid.cells {
        if !grid.is_nodata(v) {
            min = min.min(v);
            max = max.max(v);
        }
    }
    let span = max - min;
    let mut img = image::RgbaImage::new(grid.n_cols as u32, grid.n_rows as u32);
    for row in 0..grid.n_rows {
        for col in 0..grid.n_cols {
            let px = match grid.get(row, col) {
                None => [0, 0, 0, 0],
                Some(v) => {
                    let t = if span > 0.0 { (v - min) / span } else { 0.0 };
                    let [r, g, b] = ramp.sample(t);
                    [r, g, b, 255]
                }
            };
            img.put_pixel(col as u32, row as u32, image::Rgba(px));
        }
    }
    img.save(path)
        .map_err(|e| CoreError::format(path, format!("png encode failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_1x1(v: f64) -> Grid {
        Grid::new(1, 1, 500.0, 0.0, 0.0, -9999.0, vec![v]).unwrap()
    }

    #[test]
    fn minimal_file_parses() {
        let text = "ncols 1\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 500\nNODATA_value -9999\n7.5\n";
        let g = read_ascii_grid(text.as_bytes()).unwrap();
        assert_eq!(g.cells(), &[7.5]);
        assert_eq!(g.cell_size(), 500.0);
    }

    #[test]
    fn value_count_mismatch_is_an_error() {
        let text = "ncols 1\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 500\nNODATA_value -9999\n7.5 7.5\n";
        let err = read_ascii_grid(text.as_bytes()).unwrap_err();
        assert!(matches!(err, CoreError::Parse { .. }), "{err}");
    }

    #[test]
    fn non_numeric_token_names_line() {
        let text = "ncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1.0 oops\n";
        match read_ascii_grid(text.as_bytes()).unwrap_err() {
            CoreError::Parse { line, .. } => assert_eq!(line, 7),
            e => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let g = Grid::new(
            2,
            2,
            100.0,
            1000.0,
            2000.0,
            -9999.0,
            vec![1.25, -9999.0, std::f64::consts::PI, 4.0],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_ascii_grid(&g, &mut buf).unwrap();
        let g2 = read_ascii_grid(buf.as_slice()).unwrap();
        assert_eq!(g, g2);
    }

    #[test]
    fn write_format_contract() {
        let g = Grid::new(2, 2, 1.0, 0.0, 0.0, -9999.0, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        write_ascii_grid(&g, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let data_lines: Vec<&str> = text.lines().skip(6).collect();
        // northernmost row (row 0) first
        assert_eq!(data_lines, vec!["1 2", "3 4"]);
    }

    #[test]
    fn nodata_written_literally() {
        let g = grid_1x1(-9999.0);
        let mut buf = Vec::new();
        write_ascii_grid(&g, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().ends_with("-9999\n"));
    }

    #[test]
    fn aggregate_identity_and_mean() {
        let g = Grid::new(2, 2, 1.0, 0.0, 0.0, -9999.0, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(block_aggregate(&g, 1).unwrap(), g);
        let a = block_aggregate(&g, 2).unwrap();
        assert_eq!(a.cells(), &[2.5]);
        assert_eq!(a.cell_size(), 2.0);
        assert_eq!(a.origin_easting(), 0.0);
    }

    #[test]
    fn aggregate_ignores_nodata() {
        let g = Grid::new(2, 2, 1.0, 0.0, 0.0, -9999.0, vec![1.0, -9999.0, 3.0, -9999.0]).unwrap();
        assert_eq!(block_aggregate(&g, 2).unwrap().cells(), &[2.0]);
    }

    #[test]
    fn aggregate_all_nodata_block_stays_nodata() {
        let g = Grid::new(2, 2, 1.0, 0.0, 0.0, -9999.0, vec![-9999.0; 4]).unwrap();
        assert_eq!(block_aggregate(&g, 2).unwrap().cells(), &[-9999.0]);
    }

    #[test]
    fn aggregate_factor_zero_rejected() {
        let g = grid_1x1(1.0);
        assert!(block_aggregate(&g, 0).is_err());
    }

    #[test]
    fn stats_trivial_cases() {
        let g = Grid::new(1, 3, 1.0, 0.0, 0.0, -9999.0, vec![5.0, 5.0, 5.0]).unwrap();
        let s = grid_stats(&g).unwrap();
        assert_eq!(s.mean, 5.0);
        assert_eq!(s.sd, 0.0);
        assert_eq!(s.valid_count, 3);

        let g = Grid::new(1, 2, 1.0, 0.0, 0.0, -9999.0, vec![0.0, 2.0]).unwrap();
        let s = grid_stats(&g).unwrap();
        assert_eq!(s.mean, 1.0);
        assert_eq!(s.sd, 1.0); // population SD
    }

    #[test]
    fn stats_all_nodata_rejected() {
        let g = grid_1x1(-9999.0);
        assert!(grid_stats(&g).is_err());
    }

    #[test]
    fn cell_lookup_and_center() {
        let g = Grid::new(2, 2, 10.0, 100.0, 200.0, -9999.0, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // lower-left cell is stored row 1, col 0
        assert_eq!(g.cell_at(105.0, 205.0), Some((1, 0)));
        // boundary resolves by floor
        assert_eq!(g.cell_at(110.0, 210.0), Some((0, 1)));
        assert_eq!(g.cell_at(99.0, 205.0), None);
        assert_eq!(g.cell_center(1, 0), (105.0, 205.0));
    }

    #[test]
    fn ramp_endpoints() {
        let ramp = ColorRamp::viridis();
        assert_eq!(ramp.sample(0.0), [68, 1, 84]);
        assert_eq!(ramp.sample(1.0), [253, 231, 37]);
    }
}
