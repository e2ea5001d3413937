//! Regular raster grids (DEM, roughness, masks) with ESRI ASCII I/O.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Result, WindError};

/// Row-major raster grid. Row 0 is the northernmost row, matching the
/// ESRI ASCII layout. Missing cells are stored as NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct DemGrid {
    /// Easting of the lower-left corner (m).
    pub xll: f64,
    /// Northing of the lower-left corner (m).
    pub yll: f64,
    /// Cell size (m), square cells.
    pub cell: f64,
    pub nrows: usize,
    pub ncols: usize,
    /// Value written for missing cells on output.
    pub nodata: f64,
    values: Vec<f64>,
}

impl DemGrid {
    pub fn new(xll: f64, yll: f64, cell: f64, nrows: usize, ncols: usize) -> Self {
        assert!(cell > 0.0, "cell size must be positive");
        DemGrid {
            xll,
            yll,
            cell,
            nrows,
            ncols,
            nodata: -9999.0,
            values: vec![f64::NAN; nrows * ncols],
        }
    }

    pub fn constant(xll: f64, yll: f64, cell: f64, nrows: usize, ncols: usize, v: f64) -> Self {
        let mut g = Self::new(xll, yll, cell, nrows, ncols);
        g.values.fill(v);
        g
    }

    /// A grid with the same geometry, all cells missing.
    pub fn like(other: &DemGrid) -> Self {
        let mut g = Self::new(other.xll, other.yll, other.cell, other.nrows, other.ncols);
        g.nodata = other.nodata;
        g
    }

    pub fn same_geometry(&self, other: &DemGrid) -> bool {
        self.xll == other.xll
            && self.yll == other.yll
            && self.cell == other.cell
            && self.nrows == other.nrows
            && self.ncols == other.ncols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let v = self.values[row * self.ncols + col];
        if v.is_nan() {
            None
        } else {
            Some(v)
        }
    }

    #[inline]
    pub fn raw(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.ncols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.values[row * self.ncols + col] = v;
    }

    #[inline]
    pub fn set_nodata(&mut self, row: usize, col: usize) {
        self.values[row * self.ncols + col] = f64::NAN;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Easting/northing of the centre of cell (row, col).
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let x = self.xll + (col as f64 + 0.5) * self.cell;
        let y = self.yll + ((self.nrows - 1 - row) as f64 + 0.5) * self.cell;
        (x, y)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.xll
            && x < self.xll + self.ncols as f64 * self.cell
            && y >= self.yll
            && y < self.yll + self.nrows as f64 * self.cell
    }

    /// Cell containing the point, or an extent error.
    pub fn cell_at(&self, x: f64, y: f64) -> Result<(usize, usize)> {
        if !self.contains(x, y) {
            return Err(WindError::Extent(x, y));
        }
        let col = ((x - self.xll) / self.cell) as usize;
        let row_from_bottom = ((y - self.yll) / self.cell) as usize;
        let col = col.min(self.ncols - 1);
        let row = self.nrows - 1 - row_from_bottom.min(self.nrows - 1);
        Ok((row, col))
    }

    /// Bilinear interpolation at (easting, northing) between cell centres.
    /// Points within the half-cell border are clamped to the edge lattice.
    /// Missing cells make the result missing.
    pub fn sample(&self, x: f64, y: f64) -> Result<f64> {
        if !self.contains(x, y) {
            return Err(WindError::Extent(x, y));
        }
        // fractional lattice coordinates, (0,0) = centre of lower-left cell
        let gx = (x - self.xll) / self.cell - 0.5;
        let gy = (y - self.yll) / self.cell - 0.5;
        let gx = gx.clamp(0.0, (self.ncols - 1) as f64);
        let gy = gy.clamp(0.0, (self.nrows - 1) as f64);
        let c0 = (gx.floor() as usize).min(self.ncols - 1);
        let b0 = (gy.floor() as usize).min(self.nrows - 1);
        let c1 = (c0 + 1).min(self.ncols - 1);
        let b1 = (b0 + 1).min(self.nrows - 1);
        let fx = gx - c0 as f64;
        let fy = gy - b0 as f64;
        let r0 = self.nrows - 1 - b0;
        let r1 = self.nrows - 1 - b1;
        let v00 = self.raw(r0, c0);
        let v10 = self.raw(r0, c1);
        let v01 = self.raw(r1, c0);
        let v11 = self.raw(r1, c1);
        let v = v00 * (1.0 - fx) * (1.0 - fy)
            + v10 * fx * (1.0 - fy)
            + v01 * (1.0 - fx) * fy
            + v11 * fx * fy;
        if v.is_nan() {
            Err(WindError::Numeric(format!(
                "missing cell in interpolation stencil at ({x}, {y})"
            )))
        } else {
            Ok(v)
        }
    }

    pub fn read_ascii(path: &Path) -> Result<DemGrid> {
        let text = fs::read_to_string(path)?;
        Self::parse_ascii(&text)
    }

    pub fn parse_ascii(text: &str) -> Result<DemGrid> {
        let mut ncols = None;
        let mut nrows = None;
        let mut xll = None;
        let mut yll = None;
        let mut cell = None;
        let mut nodata = -9999.0;
        let mut lines = text.lines().peekable();
        while let Some(line) = lines.peek() {
            let mut parts = line.split_whitespace();
            let key = match parts.next() {
                Some(k) => k.to_ascii_lowercase(),
                None => {
                    lines.next();
                    continue;
                }
            };
            let is_header = matches!(
                key.as_str(),
                "ncols" | "nrows" | "xllcorner" | "yllcorner" | "cellsize" | "nodata_value"
            );
            if !is_header {
                break;
            }
            let val: f64 = parts
                .next()
                .ok_or_else(|| WindError::Schema(format!("header line without value: {line}")))?
                .parse()
                .map_err(|_| WindError::Schema(format!("bad header value: {line}")))?;
            match key.as_str() {
                "ncols" => ncols = Some(val as usize),
                "nrows" => nrows = Some(val as usize),
                "xllcorner" => xll = Some(val),
                "yllcorner" => yll = Some(val),
                "cellsize" => cell = Some(val),
                "nodata_value" => nodata = val,
                _ => unreachable!(),
            }
            lines.next();
        }
        let (ncols, nrows, xll, yll, cell) = match (ncols, nrows, xll, yll, cell) {
            (Some(a), Some(b), Some(c), Some(d), Some(e)) => (a, b, c, d, e),
            _ => return Err(WindError::Schema("incomplete ESRI ASCII header".into())),
        };
        if cell <= 0.0 {
            return Err(WindError::Schema("cellsize must be positive".into()));
        }
        let mut g = DemGrid::new(xll, yll, cell, nrows, ncols);
        g.nodata = nodata;
        let mut idx = 0usize;
        for line in lines {
            for tok in line.split_whitespace() {
                if idx >= nrows * ncols {
                    return Err(WindError::Schema("too many grid values".into()));
                }
                let v: f64 = tok
                    .parse()
                    .map_err(|_| WindError::Schema(format!("bad grid value: {tok}")))?;
                g.values[idx] = if v == nodata { f64::NAN } else { v };
                idx += 1;
            }
        }
        if idx != nrows * ncols {
            return Err(WindError::Schema(format!(
                "expected {} grid values, got {idx}",
                nrows * ncols
            )));
        }
        Ok(g)
    }

    pub fn write_ascii(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ascii())?;
        Ok(())
    }

    pub fn to_ascii(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "ncols {}", self.ncols);
        let _ = writeln!(s, "nrows {}", self.nrows);
        let _ = writeln!(s, "xllcorner {}", self.xll);
        let _ = writeln!(s, "yllcorner {}", self.yll);
        let _ = writeln!(s, "cellsize {}", self.cell);
        let _ = writeln!(s, "NODATA_value {}", self.nodata);
        for r in 0..self.nrows {
            for c in 0..self.ncols {
                if c > 0 {
                    s.push(' ');
                }
                let v = self.raw(r, c);
                if v.is_nan() {
                    let _ = write!(s, "{}", self.nodata);
                } else {
                    let _ = write!(s, "{v}");
                }
            }
            s.push('\n');
        }
        s
    }
}
