//! Periodic grids and the fields sampled on them.

use std::fmt::Write as _;

use crate::error::{Result, TransportError};

/// Uniform periodic mesh of the unit square with `n` nodes per side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid2D {
    n: usize,
}

impl Grid2D {
    /// `n` must be a power of two and at least 8.
    pub fn new(n: usize) -> Result<Self> {
        if n < 8 || !n.is_power_of_two() {
            return Err(TransportError::Parameter(format!(
                "grid size must be a power of two >= 8, got {n}"
            )));
        }
        Ok(Self { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn len(&self) -> usize {
        self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub(crate) fn index(&self, i: isize, j: isize) -> usize {
        let n = self.n as isize;
        (i.rem_euclid(n) * n + j.rem_euclid(n)) as usize
    }

    /// Node coordinates `(i·h, j·h)`.
    pub fn node(&self, i: usize, j: usize) -> [f64; 2] {
        let h = self.spacing();
        [i as f64 * h, j as f64 * h]
    }
}

/// Bilinear interpolation of row-major nodal data with periodic wrap.
pub(crate) fn bilinear(grid: Grid2D, values: &[f64], p: [f64; 2]) -> f64 {
    let n = grid.n() as f64;
    let fx = p[0].rem_euclid(1.0) * n;
    let fy = p[1].rem_euclid(1.0) * n;
    let i0 = fx.floor();
    let j0 = fy.floor();
    let a = fx - i0;
    let b = fy - j0;
    let (i0, j0) = (i0 as isize, j0 as isize);
    let v00 = values[grid.index(i0, j0)];
    let v10 = values[grid.index(i0 + 1, j0)];
    let v01 = values[grid.index(i0, j0 + 1)];
    let v11 = values[grid.index(i0 + 1, j0 + 1)];
    // Difference form reproduces constant data exactly.
    v00 + a * (v10 - v00) + b * (v01 - v00) + a * b * (v11 - v10 - v01 + v00)
}

/// Scalar samples `u(x)` on the nodes of a [`Grid2D`]; row `i` is the fixed-`x` index.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField2D {
    grid: Grid2D,
    values: Vec<f64>,
}

impl ScalarField2D {
    pub fn new(grid: Grid2D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(TransportError::Parameter(format!(
                "field needs {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(TransportError::Parameter(format!(
                "non-finite field value at flat index {k}"
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Grid2D, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.len()],
        }
    }

    /// Samples `f(x, y)` at every node.
    pub fn from_fn(grid: Grid2D, f: impl Fn(f64, f64) -> f64) -> Self {
        let n = grid.n();
        let mut values = Vec::with_capacity(grid.len());
        for i in 0..n {
            for j in 0..n {
                let [x, y] = grid.node(i, j);
                values.push(f(x, y));
            }
        }
        Self { grid, values }
    }

    pub fn grid(&self) -> Grid2D {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn from_raw(grid: Grid2D, values: Vec<f64>) -> Self {
        Self { grid, values }
    }

    /// Periodic node lookup; indices wrap in both directions.
    pub fn at(&self, i: isize, j: isize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    pub fn interpolate(&self, p: [f64; 2]) -> f64 {
        bilinear(self.grid, &self.values, p)
    }

    /// Bilinear prolongation onto a finer grid, so the refined field describes
    /// the same continuous function.
    pub fn refined(&self, fine: Grid2D) -> Result<Self> {
        check_refinement(self.grid, fine)?;
        Ok(Self::from_fn(fine, |x, y| self.interpolate([x, y])))
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn max_abs_diff(&self, other: &ScalarField2D) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// CSV dump: a `# n=<n> sigma=<σ>` header, then one row per `x` index.
    pub fn to_csv(&self, sigma: f64) -> String {
        let n = self.grid.n();
        let mut out = String::with_capacity(n * n * 24);
        let _ = writeln!(out, "# n={n} sigma={sigma}");
        for row in self.values.chunks(n) {
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{v:e}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`ScalarField2D::to_csv`] output, returning the field and the recorded σ.
    pub fn from_csv(text: &str) -> Result<(Self, f64)> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| TransportError::Format("empty file".into()))?;
        let header = header
            .strip_prefix("# ")
            .ok_or_else(|| TransportError::Format("missing '# ' header".into()))?;
        let mut n = None;
        let mut sigma = None;
        for tok in header.split_whitespace() {
            match tok.split_once('=') {
                Some(("n", v)) => n = v.parse::<usize>().ok(),
                Some(("sigma", v)) => sigma = v.parse::<f64>().ok(),
                _ => {
                    return Err(TransportError::Format(format!(
                        "unexpected header token '{tok}'"
                    )))
                }
            }
        }
        let n = n.ok_or_else(|| TransportError::Format("header lacks n".into()))?;
        let sigma = sigma.ok_or_else(|| TransportError::Format("header lacks sigma".into()))?;
        let grid = Grid2D::new(n)?;
        let mut values = Vec::with_capacity(grid.len());
        for (row, line) in lines.enumerate() {
            let before = values.len();
            for cell in line.split(',') {
                let v = cell
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| TransportError::Format(format!("row {row}: {e}")))?;
                values.push(v);
            }
            if values.len() - before != n {
                return Err(TransportError::Format(format!(
                    "row {row} has {} values, want {n}",
                    values.len() - before
                )));
            }
        }
        Ok((Self::new(grid, values)?, sigma))
    }
}

/// Time-constant drift `F̄(x)` with two components per node.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    grid: Grid2D,
    vx: Vec<f64>,
    vy: Vec<f64>,
}

impl VelocityField {
    pub fn new(grid: Grid2D, vx: Vec<f64>, vy: Vec<f64>) -> Result<Self> {
        if vx.len() != grid.len() || vy.len() != grid.len() {
            return Err(TransportError::Parameter(
                "velocity component length does not match grid".into(),
            ));
        }
        if vx.iter().chain(&vy).any(|v| !v.is_finite()) {
            return Err(TransportError::Parameter(
                "non-finite velocity component".into(),
            ));
        }
        Ok(Self { grid, vx, vy })
    }

    pub fn zero(grid: Grid2D) -> Self {
        Self::constant(grid, [0.0, 0.0])
    }

    pub fn constant(grid: Grid2D, c: [f64; 2]) -> Self {
        Self {
            grid,
            vx: vec![c[0]; grid.len()],
            vy: vec![c[1]; grid.len()],
        }
    }

    pub fn grid(&self) -> Grid2D {
        self.grid
    }

    pub fn vx(&self) -> &[f64] {
        &self.vx
    }

    pub fn vy(&self) -> &[f64] {
        &self.vy
    }

    pub fn is_zero(&self) -> bool {
        self.vx.iter().chain(&self.vy).all(|&v| v == 0.0)
    }

    pub fn interpolate(&self, p: [f64; 2]) -> [f64; 2] {
        [
            bilinear(self.grid, &self.vx, p),
            bilinear(self.grid, &self.vy, p),
        ]
    }

    /// Bilinear prolongation onto a finer grid.
    pub fn refined(&self, fine: Grid2D) -> Result<Self> {
        check_refinement(self.grid, fine)?;
        let sample = |values: &[f64]| {
            ScalarField2D::from_fn(fine, |x, y| bilinear(self.grid, values, [x, y])).values
        };
        Ok(Self {
            grid: fine,
            vx: sample(&self.vx),
            vy: sample(&self.vy),
        })
    }
}

fn check_refinement(coarse: Grid2D, fine: Grid2D) -> Result<()> {
    if fine.n() < coarse.n() {
        return Err(TransportError::Parameter(format!(
            "cannot refine n={} onto coarser n={}",
            coarse.n(),
            fine.n()
        )));
    }
    Ok(())
}
