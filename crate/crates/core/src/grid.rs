//! Uniform periodic grids, sampled fields, the `δ` and `N` operators and
//! Hölder-type norms.
//!
//! Points are `x_i = i/m` for `i = 0..=m` with `x_m` identified with `x_0`.
//! Norms use the flat distance `|x_j - x_i|` on `[0,1]`, never the
//! wrap-around distance. Vector and matrix values are measured in the
//! Euclidean (Frobenius) norm.

use std::io::{Read, Write};

use crate::error::{invalid, mismatch, Error, Result};
use crate::fit::{linear_fit, LinearFit};

/// Uniform periodic grid on `[0,1]` with `m` cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SpatialGrid {
    m: usize,
}

impl SpatialGrid {
    pub fn new(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(invalid(format!("grid needs m >= 2, got {m}")));
        }
        Ok(Self { m })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn h(&self) -> f64 {
        1.0 / self.m as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 / self.m as f64
    }

    /// Number of stored nodes, `m + 1`.
    pub fn nodes(&self) -> usize {
        self.m + 1
    }
}

fn norm(v: &[f64]) -> f64 {
    if v.len() == 1 {
        v[0].abs()
    } else {
        v.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == 1 {
        (a[0] - b[0]).abs()
    } else {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }
}

/// An `R^dim`-valued function sampled on the `m + 1` nodes of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    grid: SpatialGrid,
    dim: usize,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: SpatialGrid, dim: usize) -> Self {
        Self { grid, dim, values: vec![0.0; grid.nodes() * dim] }
    }

    /// Samples `f` at `x_0..x_{m-1}` and closes periodically.
    pub fn from_fn(grid: SpatialGrid, dim: usize, mut f: impl FnMut(f64, &mut [f64])) -> Self {
        let mut field = Self::zeros(grid, dim);
        for i in 0..grid.m() {
            let x = grid.x(i);
            f(x, &mut field.values[i * dim..(i + 1) * dim]);
        }
        field.close();
        field
    }

    pub fn scalar_fn(grid: SpatialGrid, f: impl Fn(f64) -> f64) -> Self {
        Self::from_fn(grid, 1, |x, out| out[0] = f(x))
    }

    /// Builds a field from the `m * dim` values at `x_0..x_{m-1}`.
    pub fn from_periodic(grid: SpatialGrid, dim: usize, mut nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() != grid.m() * dim {
            return Err(mismatch(format!("expected {} periodic values, got {}", grid.m() * dim, nodes.len())));
        }
        nodes.extend_from_within(0..dim);
        let field = Self { grid, dim, values: nodes };
        field.check_finite()?;
        Ok(field)
    }

    /// Builds a field from all `(m + 1) * dim` values; the last node must
    /// repeat the first.
    pub fn from_values(grid: SpatialGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.nodes() * dim {
            return Err(mismatch(format!("expected {} values, got {}", grid.nodes() * dim, values.len())));
        }
        let m = grid.m();
        if values[..dim] != values[m * dim..] {
            return Err(invalid("periodic closure violated: values[m] != values[0]"));
        }
        let field = Self { grid, dim, values };
        field.check_finite()?;
        Ok(field)
    }

    fn check_finite(&self) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(invalid("field contains non-finite values"))
        }
    }

    /// Copies node 0 onto node m.
    pub(crate) fn close(&mut self) {
        let (d, m) = (self.dim, self.grid.m());
        self.values.copy_within(0..d, m * d);
    }

    pub fn grid(&self) -> SpatialGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the `m * dim` periodic values; node `m` is restored
    /// from node 0 when the guard is dropped.
    pub fn periodic_mut(&mut self) -> PeriodicMut<'_> {
        PeriodicMut { field: self }
    }

    /// Value at node `i` (all components).
    pub fn at(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Component `c` at node `i`.
    pub fn get(&self, i: usize, c: usize) -> f64 {
        self.values[i * self.dim + c]
    }

    /// Component `c` at all `m + 1` nodes.
    pub fn component(&self, c: usize) -> Vec<f64> {
        self.values.iter().skip(c).step_by(self.dim).copied().collect()
    }

    pub fn sup_norm(&self) -> f64 {
        (0..self.grid.m()).map(|i| norm(self.at(i))).fold(0.0, f64::max)
    }

    pub fn map(&self, out_dim: usize, mut f: impl FnMut(&[f64], &mut [f64])) -> Field {
        let mut out = Field::zeros(self.grid, out_dim);
        for i in 0..self.grid.m() {
            f(self.at(i), &mut out.values[i * out_dim..(i + 1) * out_dim]);
        }
        out.close();
        out
    }

    pub fn scaled(&self, c: f64) -> Field {
        Field { grid: self.grid, dim: self.dim, values: self.values.iter().map(|v| c * v).collect() }
    }

    pub fn add(&self, other: &Field) -> Result<Field> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.zip(other, |a, b| a - b)
    }

    fn zip(&self, other: &Field, f: impl Fn(f64, f64) -> f64) -> Result<Field> {
        if self.grid != other.grid || self.dim != other.dim {
            return Err(mismatch("fields live on different grids or dims"));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| f(*a, *b)).collect();
        Ok(Field { grid: self.grid, dim: self.dim, values })
    }

    /// Restriction to the coarse grid with `m / factor` cells.
    pub fn restrict(&self, factor: usize) -> Result<Field> {
        let m = self.grid.m();
        if factor == 0 || !m.is_multiple_of(factor) {
            return Err(invalid(format!("factor {factor} does not divide m = {m}")));
        }
        let coarse = SpatialGrid::new(m / factor)?;
        let mut values = Vec::with_capacity(coarse.nodes() * self.dim);
        for i in 0..coarse.nodes() {
            values.extend_from_slice(self.at(i * factor));
        }
        Ok(Field { grid: coarse, dim: self.dim, values })
    }

    /// Writes the CSV layout `x,c0,...,c{n-1}`, one row per node.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["x".to_string()];
        header.extend((0..self.dim).map(|c| format!("c{c}")));
        wr.write_record(&header)?;
        for i in 0..self.grid.nodes() {
            let mut row = vec![format!("{}", self.grid.x(i))];
            row.extend(self.at(i).iter().map(|v| format!("{v:e}")));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Field> {
        let mut rd = csv::Reader::from_reader(r);
        let dim = rd.headers()?.len().saturating_sub(1);
        if dim == 0 {
            return Err(Error::Format("field CSV needs at least one component column".into()));
        }
        let mut values = Vec::new();
        let mut rows = 0usize;
        for rec in rd.records() {
            let rec = rec?;
            for c in 0..dim {
                let v: f64 = rec[c + 1].parse().map_err(|e| Error::Format(format!("row {rows}: {e}")))?;
                values.push(v);
            }
            rows += 1;
        }
        let grid = SpatialGrid::new(rows.saturating_sub(1))?;
        Field::from_values(grid, dim, values)
    }
}

/// Guard returned by [`Field::periodic_mut`].
pub struct PeriodicMut<'a> {
    field: &'a mut Field,
}

impl std::ops::Deref for PeriodicMut<'_> {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        let n = self.field.grid.m() * self.field.dim;
        &self.field.values[..n]
    }
}

impl std::ops::DerefMut for PeriodicMut<'_> {
    fn deref_mut(&mut self) -> &mut [f64] {
        let n = self.field.grid.m() * self.field.dim;
        &mut self.field.values[..n]
    }
}

impl Drop for PeriodicMut<'_> {
    fn drop(&mut self) {
        self.field.close();
    }
}

/// Values on ordered node pairs `(i, j)`, `0 <= i <= j <= m`, zero on the
/// diagonal. Each value is a `rows x cols` matrix stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoPointField {
    grid: SpatialGrid,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl TwoPointField {
    pub fn zeros(grid: SpatialGrid, rows: usize, cols: usize) -> Self {
        let n = grid.nodes();
        Self { grid, rows, cols, values: vec![0.0; n * (n + 1) / 2 * rows * cols] }
    }

    /// Fills every off-diagonal pair from `f(i, j, out)`.
    pub fn from_fn(grid: SpatialGrid, rows: usize, cols: usize, mut f: impl FnMut(usize, usize, &mut [f64])) -> Self {
        let mut r = Self::zeros(grid, rows, cols);
        let d = rows * cols;
        for i in 0..grid.nodes() {
            for j in i + 1..grid.nodes() {
                let k = r.index(i, j);
                f(i, j, &mut r.values[k * d..(k + 1) * d]);
            }
        }
        r
    }

    fn index(&self, i: usize, j: usize) -> usize {
        // Row i starts after sum_{r<i} (n - r) entries.
        let n = self.grid.nodes();
        i * n - i * i.saturating_sub(1) / 2 + (j - i)
    }

    pub fn grid(&self) -> SpatialGrid {
        self.grid
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }

    /// Value at `(i, j)`; requires `i <= j`.
    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        assert!(i <= j && j <= self.grid.m(), "pair ({i}, {j}) out of range");
        let d = self.dim();
        let k = self.index(i, j);
        &self.values[k * d..(k + 1) * d]
    }

    pub fn set(&mut self, i: usize, j: usize, v: &[f64]) {
        assert!(i < j && j <= self.grid.m(), "pair ({i}, {j}) out of range or diagonal");
        let d = self.dim();
        let k = self.index(i, j);
        self.values[k * d..(k + 1) * d].copy_from_slice(v);
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.chunks(self.dim()).map(norm).fold(0.0, f64::max)
    }

    /// Writes the CSV layout `i,j,value...` over the upper triangle.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["i".to_string(), "j".to_string()];
        if self.dim() == 1 {
            header.push("value".into());
        } else {
            for r in 0..self.rows {
                for c in 0..self.cols {
                    header.push(format!("value[{r}][{c}]"));
                }
            }
        }
        wr.write_record(&header)?;
        for i in 0..self.grid.nodes() {
            for j in i..self.grid.nodes() {
                let mut row = vec![i.to_string(), j.to_string()];
                row.extend(self.at(i, j).iter().map(|v| format!("{v:e}")));
                wr.write_record(&row)?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

/// `δf(i, j) = f(j) - f(i)`.
pub fn delta(f: &Field) -> TwoPointField {
    let d = f.dim();
    TwoPointField::from_fn(f.grid(), d, 1, |i, j, out| {
        for c in 0..d {
            out[c] = f.get(j, c) - f.get(i, c);
        }
    })
}

/// View of `N R(i,j,k) = R(i,k) - R(i,j) - R(j,k)` for `i <= j <= k`.
pub struct NOperator<'a> {
    r: &'a TwoPointField,
}

/// The `N` operator applied to a two-point field.
pub fn n_operator(r: &TwoPointField) -> NOperator<'_> {
    NOperator { r }
}

impl NOperator<'_> {
    pub fn at(&self, i: usize, j: usize, k: usize) -> Vec<f64> {
        assert!(i <= j && j <= k, "triple must be ordered");
        let (a, b, c) = (self.r.at(i, k), self.r.at(i, j), self.r.at(j, k));
        a.iter().zip(b).zip(c).map(|((a, b), c)| a - b - c).collect()
    }

    /// Largest norm over all ordered triples.
    pub fn sup(&self) -> f64 {
        let n = self.r.grid().nodes();
        let mut best = 0.0f64;
        for i in 0..n {
            for j in i..n {
                for k in j..n {
                    best = best.max(norm(&self.at(i, j, k)));
                }
            }
        }
        best
    }
}

/// Which node pairs a grid norm inspects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSampling {
    /// Every pair of grid points.
    #[default]
    All,
    /// Every base point, but only lags in `{0, 1, 2, 4, ...}` grid steps.
    Dyadic,
}

fn lags(max: usize, sampling: PairSampling) -> Vec<usize> {
    match sampling {
        PairSampling::All => (1..=max).collect(),
        PairSampling::Dyadic => {
            let mut v = Vec::new();
            let mut d = 1;
            while d <= max {
                v.push(d);
                d *= 2;
            }
            if v.last() != Some(&max) && max > 0 {
                v.push(max);
            }
            v
        }
    }
}

fn check_exponent(a: f64, hi: f64, what: &str) -> Result<()> {
    if a > 0.0 && a <= hi {
        Ok(())
    } else {
        Err(invalid(format!("{what} = {a} outside (0, {hi}]")))
    }
}

/// `max_{i<j} |f(j) - f(i)| / (x_j - x_i)^α`.
pub fn holder_seminorm(f: &Field, alpha: f64) -> Result<f64> {
    holder_seminorm_with(f, alpha, PairSampling::All)
}

pub fn holder_seminorm_with(f: &Field, alpha: f64, sampling: PairSampling) -> Result<f64> {
    check_exponent(alpha, 1.0, "alpha")?;
    let g = f.grid();
    let mut best = 0.0f64;
    for d in lags(g.m(), sampling) {
        let w = (d as f64 * g.h()).powf(-alpha);
        for i in 0..=g.m() - d {
            best = best.max(diff_norm(f.at(i + d), f.at(i)) * w);
        }
    }
    Ok(best)
}

/// `max_{i<j} |R(i,j)| / (x_j - x_i)^γ`.
pub fn two_point_norm(r: &TwoPointField, gamma: f64) -> Result<f64> {
    two_point_norm_with(r, gamma, PairSampling::All)
}

pub fn two_point_norm_with(r: &TwoPointField, gamma: f64, sampling: PairSampling) -> Result<f64> {
    check_exponent(gamma, 2.0, "gamma")?;
    let g = r.grid();
    let mut best = 0.0f64;
    for d in lags(g.m(), sampling) {
        let w = (d as f64 * g.h()).powf(-gamma);
        for i in 0..=g.m() - d {
            best = best.max(norm(r.at(i, i + d)) * w);
        }
    }
    Ok(best)
}

/// Two-point norm of a lazily evaluated two-point quantity.
pub(crate) fn two_point_norm_fn(
    grid: SpatialGrid,
    gamma: f64,
    sampling: PairSampling,
    mut value: impl FnMut(usize, usize) -> f64,
) -> f64 {
    let mut best = 0.0f64;
    for d in lags(grid.m(), sampling) {
        let w = (d as f64 * grid.h()).powf(-gamma);
        for i in 0..=grid.m() - d {
            best = best.max(value(i, i + d) * w);
        }
    }
    best
}

/// Fields at times `t_0 = 0 < t_1 < ... < t_L` with uniform step.
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceTimeField {
    dt: f64,
    slices: Vec<Field>,
}

impl SpaceTimeField {
    pub fn new(dt: f64, slices: Vec<Field>) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(invalid("time step must be positive"));
        }
        let first = slices.first().ok_or_else(|| invalid("need at least one slice"))?;
        let (grid, dim) = (first.grid(), first.dim());
        if slices.iter().any(|s| s.grid() != grid || s.dim() != dim) {
            return Err(mismatch("slices differ in grid or dim"));
        }
        Ok(Self { dt, slices })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of steps `L` (one less than the number of slices).
    pub fn steps(&self) -> usize {
        self.slices.len() - 1
    }

    pub fn time(&self, l: usize) -> f64 {
        l as f64 * self.dt
    }

    pub fn slice(&self, l: usize) -> &Field {
        &self.slices[l]
    }

    pub fn slices(&self) -> &[Field] {
        &self.slices
    }

    pub fn last(&self) -> &Field {
        self.slices.last().expect("nonempty")
    }

    pub fn grid(&self) -> SpatialGrid {
        self.slices[0].grid()
    }

    pub fn dim(&self) -> usize {
        self.slices[0].dim()
    }

    pub fn sup_norm(&self) -> f64 {
        self.slices.iter().map(Field::sup_norm).fold(0.0, f64::max)
    }

    pub fn sub(&self, other: &SpaceTimeField) -> Result<SpaceTimeField> {
        if self.slices.len() != other.slices.len() {
            return Err(mismatch("different numbers of time slices"));
        }
        let slices = self.slices.iter().zip(&other.slices).map(|(a, b)| a.sub(b)).collect::<Result<Vec<_>>>()?;
        SpaceTimeField::new(self.dt, slices)
    }

    /// Keeps every `stride`-th slice (and always the last one when it falls
    /// on the stride).
    pub fn thinned(&self, stride: usize) -> Result<SpaceTimeField> {
        if stride == 0 || !self.steps().is_multiple_of(stride) {
            return Err(invalid(format!("stride {stride} does not divide L = {}", self.steps())));
        }
        let slices = self.slices.iter().step_by(stride).cloned().collect();
        SpaceTimeField::new(self.dt * stride as f64, slices)
    }
}

/// Parabolic Hölder norm over all space-time grid pairs:
/// `max |u(s,x) - u(t,y)| / (|x-y|^α + |s-t|^{α/2}) + ‖u‖₀`.
pub fn parabolic_holder(u: &SpaceTimeField, alpha: f64) -> Result<f64> {
    parabolic_holder_with(u, alpha, PairSampling::All)
}

pub fn parabolic_holder_with(u: &SpaceTimeField, alpha: f64, sampling: PairSampling) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("alpha = {alpha} outside (0,1)")));
    }
    if u.steps() == 0 {
        return Err(invalid("parabolic norm needs at least two time slices"));
    }
    Ok(parabolic_ratio(u.slices(), u.dt(), alpha, sampling) + u.sup_norm())
}

/// Largest parabolic increment ratio among the given slices.
pub(crate) fn parabolic_ratio(slices: &[Field], dt: f64, alpha: f64, sampling: PairSampling) -> f64 {
    let big_l = slices.len() - 1;
    let mut best = 0.0f64;
    let mut time_lags = vec![0usize];
    time_lags.extend(lags(big_l, sampling));
    for &tl in &time_lags {
        for l in tl..=big_l {
            best = best.max(ratio_between(&slices[l - tl], &slices[l], tl as f64 * dt, alpha, sampling));
        }
    }
    best
}

/// Largest ratio between two slices separated in time by `tau`.
pub(crate) fn ratio_between(a: &Field, b: &Field, tau: f64, alpha: f64, sampling: PairSampling) -> f64 {
    let g = a.grid();
    let m = g.m();
    let tpart = tau.powf(alpha / 2.0);
    let mut best = 0.0f64;
    if tau > 0.0 {
        for i in 0..=m {
            best = best.max(diff_norm(a.at(i), b.at(i)) / tpart);
        }
    }
    for d in lags(m, sampling) {
        let w = 1.0 / ((d as f64 * g.h()).powf(alpha) + tpart);
        for i in 0..=m - d {
            let x = diff_norm(a.at(i), b.at(i + d));
            let y = if tau > 0.0 { diff_norm(a.at(i + d), b.at(i)) } else { 0.0 };
            best = best.max(x.max(y) * w);
        }
    }
    best
}

/// Window of dyadic lags `2^{-k}`, `k_min <= k <= k_max`, for exponent fits.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DyadicWindow {
    pub k_min: u32,
    pub k_max: u32,
}

impl Default for DyadicWindow {
    fn default() -> Self {
        Self { k_min: 2, k_max: 8 }
    }
}

/// Fitted Hölder exponent with the quality of the log-log fit.
#[derive(Clone, Debug, PartialEq)]
pub struct HolderEstimate {
    pub exponent: f64,
    pub residual: f64,
    pub fit: LinearFit,
}

/// Fits `log max|f(x+2^{-k}) - f(x)|` against `log 2^{-k}`.
pub fn holder_exponent_estimate(f: &Field, window: DyadicWindow) -> Result<HolderEstimate> {
    let m = f.grid().m();
    if !m.is_power_of_two() || m < 64 {
        return Err(invalid(format!("m = {m} must be a power of two >= 64")));
    }
    let kmax_grid = m.trailing_zeros();
    if window.k_min > window.k_max || window.k_max > kmax_grid {
        return Err(invalid(format!("window [{}, {}] not inside [0, {kmax_grid}]", window.k_min, window.k_max)));
    }
    let lag_steps: Vec<usize> = (window.k_min..=window.k_max).map(|k| m >> k).collect();
    let incs: Vec<f64> =
        lag_steps.iter().map(|&d| (0..=m - d).map(|i| diff_norm(f.at(i + d), f.at(i))).fold(0.0, f64::max)).collect();
    let scales: Vec<f64> = lag_steps.iter().map(|&d| d as f64 / m as f64).collect();
    increment_exponent(&scales, &incs)
}

/// Log-log slope of maximal increments against their scales.
pub fn increment_exponent(scales: &[f64], increments: &[f64]) -> Result<HolderEstimate> {
    if increments.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::UndefinedExponent("vanishing increments at some lag".into()));
    }
    let xs: Vec<f64> = scales.iter().map(|s| s.ln()).collect();
    let ys: Vec<f64> = increments.iter().map(|v| v.ln()).collect();
    let fit = linear_fit(&xs, &ys)?;
    Ok(HolderEstimate { exponent: fit.slope, residual: fit.rms_residual, fit })
}

/// Result of the Garsia-Rodemich-Rumsey check with `Θ(u) = u^p` and
/// `ψ(r) = r^{α + 2/p}`.
#[derive(Clone, Debug)]
pub struct GrrBound {
    pub u: f64,
    pub c: f64,
    pub bound: TwoPointField,
    pub violated: bool,
}

/// Evaluates both sides of the GRR inequality on the grid.
///
/// `U = ∫∫ (|R(x,y)| / ψ(|x-y|/4))^p` by the trapezoid rule, `C` is the
/// smallest constant satisfying the three-point hypothesis on grid triples,
/// and the bound is `16 (U^{1/p} + C^{1/p}) (α + 2/p)/α |x-y|^α`.
pub fn grr_bound(r: &TwoPointField, p: u32, alpha: f64) -> Result<GrrBound> {
    if p < 2 {
        return Err(invalid(format!("p = {p} must be at least 2")));
    }
    let pf = p as f64;
    let e = alpha + 2.0 / pf;
    if !(alpha > 0.0) || e >= 1.0 {
        return Err(invalid(format!("need alpha > 0 and alpha + 2/p < 1, got {e}")));
    }
    let g = r.grid();
    let n = g.nodes();
    let h = g.h();
    let psi = |d: f64| (d / 4.0).powf(e);

    // Trapezoid over [0,1]^2; the integrand is symmetric and zero on the diagonal.
    let mut u = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let w = if (i == 0 || i == n - 1) as u8 + (j == 0 || j == n - 1) as u8 == 0 {
                1.0
            } else if i == 0 && j == n - 1 {
                0.25
            } else {
                0.5
            };
            let d = (j - i) as f64 * h;
            u += 2.0 * w * (norm(r.at(i, j)) / psi(d)).powf(pf);
        }
    }
    u *= h * h;

    // M(i,j) = max |N R(a,b,c)| over i <= a <= b <= c <= j, built by interval growth.
    let nop = n_operator(r);
    let mut c: f64 = 0.0;
    let mut prev = vec![0.0f64; n];
    for len in 2..n {
        let mut cur = vec![0.0f64; n];
        for i in 0..n - len {
            let j = i + len;
            let mut best = prev[i].max(prev[i + 1]);
            for v in i + 1..j {
                best = best.max(norm(&nop.at(i, v, j)));
            }
            cur[i] = best;
            let d = len as f64 * h;
            c = c.max((best / psi(d)).powf(pf) * d * d);
        }
        prev = cur;
    }

    let factor = 16.0 * (u.powf(1.0 / pf) + c.powf(1.0 / pf)) * e / alpha;
    let bound = TwoPointField::from_fn(g, 1, 1, |i, j, out| {
        out[0] = factor * ((j - i) as f64 * h).powf(alpha);
    });
    let mut violated = false;
    for i in 0..n {
        for j in i + 1..n {
            if norm(r.at(i, j)) > 1.05 * bound.at(i, j)[0] {
                violated = true;
            }
        }
    }
    Ok(GrrBound { u, c, bound, violated })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(m: usize) -> SpatialGrid {
        SpatialGrid::new(m).unwrap()
    }

    fn tent(x: f64) -> f64 {
        x.min(1.0 - x)
    }

    #[test]
    fn grid_rejects_single_cell() {
        assert!(SpatialGrid::new(1).is_err());
        assert_eq!(grid(8).h(), 0.125);
        assert_eq!(grid(8).nodes(), 9);
    }

    #[test]
    fn periodic_closure_is_exact() {
        let f = Field::scalar_fn(grid(7), |x| (2.0 * std::f64::consts::PI * x).sin() + x);
        assert_eq!(f.get(7, 0), f.get(0, 0));
        assert!(Field::from_values(grid(2), 1, vec![0.0, 1.0, 2.0]).is_err());
        assert!(Field::from_periodic(grid(2), 1, vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn delta_examples() {
        let c = Field::scalar_fn(grid(8), |_| 3.5);
        assert_eq!(delta(&c).sup_norm(), 0.0);
        let id = Field::scalar_fn(grid(4), |x| x);
        assert_eq!(delta(&id).at(0, 2)[0], 0.5);
        let s = Field::scalar_fn(grid(8), |x| (2.0 * std::f64::consts::PI * x).sin());
        assert!((delta(&s).at(0, 2)[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn n_operator_examples() {
        let f = Field::scalar_fn(grid(16), |x| (5.0 * x).exp() * x.cos());
        assert!(n_operator(&delta(&f)).sup() < 1e-12);
        let zero = TwoPointField::zeros(grid(8), 1, 1);
        assert_eq!(n_operator(&zero).sup(), 0.0);
        let g = grid(10);
        let sq = TwoPointField::from_fn(g, 1, 1, |i, j, out| out[0] = (g.x(j) - g.x(i)).powi(2));
        for (i, j, k) in [(0, 3, 7), (2, 2, 9), (1, 5, 10)] {
            let want = 2.0 * (g.x(j) - g.x(i)) * (g.x(k) - g.x(j));
            assert!((n_operator(&sq).at(i, j, k)[0] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn holder_seminorm_examples() {
        assert_eq!(holder_seminorm(&Field::scalar_fn(grid(8), |_| 2.0), 0.5).unwrap(), 0.0);
        let t = Field::scalar_fn(grid(64), tent);
        assert!((holder_seminorm(&t, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(holder_seminorm(&t, 0.0).is_err());
        assert!(holder_seminorm(&t, 1.5).is_err());
    }

    #[test]
    fn identity_increments_as_two_point_field() {
        let g = grid(32);
        let id = TwoPointField::from_fn(g, 1, 1, |i, j, out| out[0] = g.x(j) - g.x(i));
        assert!((two_point_norm(&id, 1.0).unwrap() - 1.0).abs() < 1e-12);
        // (y - x)^{1/2} is largest on the full interval
        assert!((two_point_norm(&id, 0.5).unwrap() - 1.0).abs() < 1e-12);
        let sq = TwoPointField::from_fn(g, 1, 1, |i, j, out| out[0] = (g.x(j) - g.x(i)).powi(2));
        assert!((two_point_norm(&sq, 2.0).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(two_point_norm(&TwoPointField::zeros(g, 1, 1), 1.0).unwrap(), 0.0);
        assert!(two_point_norm(&sq, 2.5).is_err());
    }

    #[test]
    fn two_point_norm_of_delta_matches_seminorm() {
        let f = Field::from_fn(grid(40), 2, |x, out| {
            out[0] = (3.0 * x).sin();
            out[1] = tent(x);
        });
        for a in [0.3, 0.5, 1.0] {
            assert_eq!(two_point_norm(&delta(&f), a).unwrap(), holder_seminorm(&f, a).unwrap());
            assert_eq!(
                two_point_norm_with(&delta(&f), a, PairSampling::Dyadic).unwrap(),
                holder_seminorm_with(&f, a, PairSampling::Dyadic).unwrap()
            );
        }
    }

    fn brute_parabolic(u: &SpaceTimeField, alpha: f64) -> f64 {
        let g = u.grid();
        let mut best = 0.0f64;
        for l1 in 0..=u.steps() {
            for l2 in 0..=u.steps() {
                for i in 0..=g.m() {
                    for j in 0..=g.m() {
                        let dx = (g.x(i) - g.x(j)).abs();
                        let dt = (u.time(l1) - u.time(l2)).abs();
                        if dx == 0.0 && dt == 0.0 {
                            continue;
                        }
                        let num = (u.slice(l1).get(i, 0) - u.slice(l2).get(j, 0)).abs();
                        best = best.max(num / (dx.powf(alpha) + dt.powf(alpha / 2.0)));
                    }
                }
            }
        }
        best + u.sup_norm()
    }

    #[test]
    fn parabolic_examples() {
        let g = grid(16);
        let c = SpaceTimeField::new(0.1, vec![Field::scalar_fn(g, |_| -1.5); 4]).unwrap();
        assert!((parabolic_holder(&c, 0.4).unwrap() - 1.5).abs() < 1e-15);

        let (dt, steps) = (0.05, 10);
        let big_t = dt * steps as f64;
        let slices = (0..=steps).map(|l| Field::scalar_fn(g, |_| l as f64 * dt)).collect();
        let u = SpaceTimeField::new(dt, slices).unwrap();
        let alpha = 0.4;
        let want = big_t.powf(1.0 - alpha / 2.0) + big_t;
        assert!((parabolic_holder(&u, alpha).unwrap() - want).abs() < 1e-12);

        let slices = (0..=3).map(|l| Field::scalar_fn(g, |x| tent(x) * (1.0 + l as f64))).collect();
        let w = SpaceTimeField::new(0.01, slices).unwrap();
        let got = parabolic_holder(&w, 0.5).unwrap();
        assert!((got - brute_parabolic(&w, 0.5)).abs() < 1e-12);
        assert!(parabolic_holder(&w, 1.0).is_err());
        let single = SpaceTimeField::new(0.01, vec![Field::zeros(g, 1)]).unwrap();
        assert!(parabolic_holder(&single, 0.5).is_err());
    }

    #[test]
    fn exponent_estimate_examples() {
        let t = Field::scalar_fn(grid(1024), tent);
        let e = holder_exponent_estimate(&t, DyadicWindow::default()).unwrap();
        assert!((e.exponent - 1.0).abs() < 0.01);
        let c = Field::scalar_fn(grid(1024), |_| 1.0);
        assert!(matches!(holder_exponent_estimate(&c, DyadicWindow::default()), Err(Error::UndefinedExponent(_))));
        assert!(holder_exponent_estimate(&Field::scalar_fn(grid(100), tent), DyadicWindow::default()).is_err());
    }

    #[test]
    fn grr_examples() {
        let zero = grr_bound(&TwoPointField::zeros(grid(32), 1, 1), 8, 0.3).unwrap();
        assert_eq!(zero.u, 0.0);
        assert_eq!(zero.bound.sup_norm(), 0.0);
        assert!(!zero.violated);
        for m in [64, 256] {
            let f = Field::scalar_fn(grid(m), |x| (2.0 * std::f64::consts::PI * x).sin());
            let b = grr_bound(&delta(&f), 8, 0.3).unwrap();
            assert!(!b.violated);
            assert!(b.u > 0.0);
        }
        assert!(grr_bound(&zero.bound, 1, 0.3).is_err());
        assert!(grr_bound(&zero.bound, 4, 0.6).is_err());
    }

    #[test]
    fn field_csv_round_trip() {
        let f = Field::from_fn(grid(9), 2, |x, out| {
            out[0] = x.exp();
            out[1] = 1.0 / 3.0 + x;
        });
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x,c0,c1"));
        assert_eq!(Field::read_csv(&buf[..]).unwrap(), f);
    }

    #[test]
    fn restrict_keeps_nodes() {
        let f = Field::scalar_fn(grid(16), |x| x * x);
        let r = f.restrict(4).unwrap();
        assert_eq!(r.grid().m(), 4);
        assert_eq!(r.get(1, 0), f.get(4, 0));
        assert!(f.restrict(3).is_err());
    }
}
