//! Rough paths over the spatial grid, controlled paths and the compensated
//! (Gubinelli) rough integral.
//!
//! A [`RoughPath`] stores the base path and one `n x n` iterated integral
//! per cell. Pair values are produced by Chen composition from prefix sums,
//! so `N𝕏 = δX ⊗ δX` holds on every triple up to rounding.

use std::sync::Arc;

use crate::error::{invalid, mismatch, Error, Result};
use crate::grid::{holder_seminorm, two_point_norm_fn, Field, PairSampling, SpatialGrid, TwoPointField};
use crate::models::SmoothMap;

fn outer_add(a: &[f64], b: &[f64], scale: f64, out: &mut [f64]) {
    let q = b.len();
    for (r, ar) in a.iter().enumerate() {
        for (c, bc) in b.iter().enumerate() {
            out[r * q + c] += scale * ar * bc;
        }
    }
}

fn frob(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
enum Level2 {
    /// Per-cell values with prefix caches for Chen composition.
    Cells { cells: Vec<f64>, cell_prefix: Vec<f64>, cross_prefix: Vec<f64> },
    /// An explicit table of pair values, read back verbatim.
    Pairs(TwoPointField),
}

/// A path `X` with prescribed second-level increments `𝕏`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoughPath {
    base: Field,
    level2: Level2,
}

impl RoughPath {
    /// Builds a path from per-cell iterated integrals (`m` blocks of `n x n`).
    pub fn from_cells(base: Field, cells: Vec<f64>) -> Result<Self> {
        let (m, n) = (base.grid().m(), base.dim());
        if cells.len() != m * n * n {
            return Err(mismatch(format!("expected {} cell entries, got {}", m * n * n, cells.len())));
        }
        let nn = n * n;
        let mut cell_prefix = vec![0.0; (m + 1) * nn];
        let mut cross_prefix = vec![0.0; (m + 1) * nn];
        let mut dx = vec![0.0; n];
        for k in 0..m {
            let (xk, xk1) = (base.at(k), base.at(k + 1));
            for c in 0..n {
                dx[c] = xk1[c] - xk[c];
            }
            let (done, rest) = cell_prefix.split_at_mut((k + 1) * nn);
            for e in 0..nn {
                rest[e] = done[k * nn + e] + cells[k * nn + e];
            }
            let (done, rest) = cross_prefix.split_at_mut((k + 1) * nn);
            rest[..nn].copy_from_slice(&done[k * nn..]);
            outer_add(xk, &dx, 1.0, &mut rest[..nn]);
        }
        Ok(Self { base, level2: Level2::Cells { cells, cell_prefix, cross_prefix } })
    }

    /// Builds a path whose pair values are read from an explicit table.
    pub fn from_pairs(base: Field, pairs: TwoPointField) -> Result<Self> {
        let n = base.dim();
        if pairs.grid() != base.grid() || pairs.shape() != (n, n) {
            return Err(mismatch("pair table does not match the base path"));
        }
        Ok(Self { base, level2: Level2::Pairs(pairs) })
    }

    pub fn base(&self) -> &Field {
        &self.base
    }

    pub fn grid(&self) -> SpatialGrid {
        self.base.grid()
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// Iterated integral over cell `k`, i.e. `𝕏(x_k, x_{k+1})`.
    pub fn cell(&self, k: usize) -> Vec<f64> {
        match &self.level2 {
            Level2::Cells { cells, .. } => {
                let nn = self.dim() * self.dim();
                cells[k * nn..(k + 1) * nn].to_vec()
            }
            Level2::Pairs(p) => p.at(k, k + 1).to_vec(),
        }
    }

    /// Cell values as one contiguous `m * n * n` array.
    pub fn cells(&self) -> Vec<f64> {
        match &self.level2 {
            Level2::Cells { cells, .. } => cells.clone(),
            Level2::Pairs(_) => (0..self.grid().m()).flat_map(|k| self.cell(k)).collect(),
        }
    }

    /// `𝕏(x_i, x_j)` written into `out` (`n x n`, row-major).
    pub fn query_into(&self, i: usize, j: usize, out: &mut [f64]) {
        match &self.level2 {
            Level2::Pairs(p) => out.copy_from_slice(p.at(i, j)),
            Level2::Cells { cells, .. } if j == i + 1 => {
                let nn = out.len();
                out.copy_from_slice(&cells[i * nn..j * nn]);
            }
            Level2::Cells { cell_prefix, cross_prefix, .. } => {
                let n = self.dim();
                let nn = n * n;
                for e in 0..nn {
                    out[e] = (cell_prefix[j * nn + e] - cell_prefix[i * nn + e])
                        + (cross_prefix[j * nn + e] - cross_prefix[i * nn + e]);
                }
                let (xi, xj) = (self.base.at(i), self.base.at(j));
                for r in 0..n {
                    for c in 0..n {
                        out[r * n + c] -= xi[r] * (xj[c] - xi[c]);
                    }
                }
            }
        }
    }

    /// Restriction to the grid with `m / factor` cells; coarse cells are
    /// Chen compositions of the fine ones.
    pub fn restrict(&self, factor: usize) -> Result<RoughPath> {
        let coarse = self.base.restrict(factor)?;
        let n = self.dim();
        let mut cells = vec![0.0; coarse.grid().m() * n * n];
        for (k, chunk) in cells.chunks_mut(n * n).enumerate() {
            self.query_into(k * factor, (k + 1) * factor, chunk);
        }
        RoughPath::from_cells(coarse, cells)
    }

    /// Largest deviation of `Sym 𝕏` from `½ δX ⊗ δX` over cells (pairs for
    /// explicit tables).
    pub fn symmetric_defect(&self) -> f64 {
        let n = self.dim();
        let m = self.grid().m();
        let mut buf = vec![0.0; n * n];
        let mut worst: f64 = 0.0;
        let mut check = |i: usize, j: usize, buf: &mut [f64]| {
            self.query_into(i, j, buf);
            let (xi, xj) = (self.base.at(i), self.base.at(j));
            let mut d: f64 = 0.0;
            for r in 0..n {
                for c in 0..n {
                    let sym = 0.5 * (buf[r * n + c] + buf[c * n + r]);
                    let target = 0.5 * (xj[r] - xi[r]) * (xj[c] - xi[c]);
                    d = d.max((sym - target).abs());
                }
            }
            worst = worst.max(d);
        };
        match &self.level2 {
            Level2::Cells { .. } => (0..m).for_each(|k| check(k, k + 1, &mut buf)),
            Level2::Pairs(_) => {
                for i in 0..=m {
                    for j in i + 1..=m {
                        check(i, j, &mut buf);
                    }
                }
            }
        }
        worst
    }

    /// `2α`-type two-point norm of `𝕏`.
    pub fn level2_norm(&self, gamma: f64, sampling: PairSampling) -> f64 {
        let nn = self.dim() * self.dim();
        let mut buf = vec![0.0; nn];
        two_point_norm_fn(self.grid(), gamma, sampling, |i, j| {
            self.query_into(i, j, &mut buf);
            frob(&buf)
        })
    }

    /// Dense table of all pair values.
    pub fn to_pairs(&self) -> TwoPointField {
        let n = self.dim();
        TwoPointField::from_fn(self.grid(), n, n, |i, j, out| self.query_into(i, j, out))
    }

    /// Writes the base rows (`x,c0,...`) followed by the cell rows
    /// (`i,XX[r][c],...`).
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        self.base.write_csv(&mut w)?;
        let n = self.dim();
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["i".to_string()];
        for r in 0..n {
            for c in 0..n {
                header.push(format!("XX[{r}][{c}]"));
            }
        }
        wr.write_record(&header)?;
        for k in 0..self.grid().m() {
            let mut row = vec![k.to_string()];
            row.extend(self.cell(k).iter().map(|v| format!("{v:e}")));
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Canonical lift of the piecewise-linear interpolant: each cell carries
/// `½ δX ⊗ δX`.
pub fn lift_piecewise_linear(f: &Field) -> RoughPath {
    let (m, n) = (f.grid().m(), f.dim());
    let mut cells = vec![0.0; m * n * n];
    let mut dx = vec![0.0; n];
    for k in 0..m {
        for c in 0..n {
            dx[c] = f.get(k + 1, c) - f.get(k, c);
        }
        outer_add(&dx, &dx, 0.5, &mut cells[k * n * n..(k + 1) * n * n]);
    }
    RoughPath::from_cells(f.clone(), cells).expect("cell layout is consistent")
}

/// `𝕏(x_i, x_j)` by Chen composition.
pub fn chen_query(rp: &RoughPath, i: usize, j: usize) -> Result<Vec<f64>> {
    if i > j || j > rp.grid().m() {
        return Err(invalid(format!("pair ({i}, {j}) not ordered inside the grid")));
    }
    let mut out = vec![0.0; rp.dim() * rp.dim()];
    rp.query_into(i, j, &mut out);
    Ok(out)
}

/// Largest `‖N𝕏(i,j,k) - δX(i,j) ⊗ δX(j,k)‖` over sampled triples.
///
/// Every triple is visited for `m <= 256`; larger grids use a strided
/// sub-lattice plus all consecutive triples.
pub fn chen_residual(rp: &RoughPath) -> f64 {
    let m = rp.grid().m();
    let n = rp.dim();
    let nn = n * n;
    let (mut a, mut b, mut c) = (vec![0.0; nn], vec![0.0; nn], vec![0.0; nn]);
    let mut worst: f64 = 0.0;
    let mut eval = |i: usize, j: usize, k: usize| {
        rp.query_into(i, k, &mut a);
        rp.query_into(i, j, &mut b);
        rp.query_into(j, k, &mut c);
        let (xi, xj, xk) = (rp.base.at(i), rp.base.at(j), rp.base.at(k));
        let mut s = 0.0;
        for r in 0..n {
            for q in 0..n {
                let e = r * n + q;
                let d = a[e] - b[e] - c[e] - (xj[r] - xi[r]) * (xk[q] - xj[q]);
                s += d * d;
            }
        }
        worst = worst.max(s.sqrt());
    };
    let stride = m.div_ceil(256).max(1);
    let pts: Vec<usize> = (0..=m).step_by(stride).chain(std::iter::once(m)).collect();
    for (ii, &i) in pts.iter().enumerate() {
        for (jj, &j) in pts.iter().enumerate().skip(ii + 1) {
            for &k in pts.iter().skip(jj + 1) {
                if i < j && j < k {
                    eval(i, j, k);
                }
            }
        }
    }
    if stride > 1 {
        for i in 0..m.saturating_sub(1) {
            eval(i, i + 1, i + 2);
        }
    }
    worst
}

/// Adds `(x_j - x_i)·a` to every pair, i.e. `h·a` to every cell.
pub fn modify_levy_area(rp: &RoughPath, a: &[f64]) -> Result<RoughPath> {
    let n = rp.dim();
    if a.len() != n * n {
        return Err(mismatch(format!("area modifier must have {} entries", n * n)));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(invalid("area modifier must be finite"));
    }
    match &rp.level2 {
        Level2::Cells { cells, .. } => {
            let grid = rp.grid();
            let mut cells = cells.clone();
            for (k, cell) in cells.chunks_mut(n * n).enumerate() {
                let w = grid.x(k + 1) - grid.x(k);
                for (e, v) in cell.iter_mut().enumerate() {
                    *v += w * a[e];
                }
            }
            RoughPath::from_cells(rp.base.clone(), cells)
        }
        Level2::Pairs(p) => {
            let grid = rp.grid();
            let table = TwoPointField::from_fn(grid, n, n, |i, j, out| {
                let w = grid.x(j) - grid.x(i);
                for (e, v) in out.iter_mut().enumerate() {
                    *v = p.at(i, j)[e] + w * a[e];
                }
            });
            RoughPath::from_pairs(rp.base.clone(), table)
        }
    }
}

/// A path `Y` controlled by a rough path `X`: `δY(x,y) = Y'(x) δX(x,y) + R_Y(x,y)`.
#[derive(Clone, Debug)]
pub struct ControlledPath {
    y: Field,
    yprime: Field,
    reference: Arc<RoughPath>,
}

/// Pairs `(Y, Y')` with a reference path, checking dimensions.
pub fn make_controlled(y: Field, yprime: Field, rp: Arc<RoughPath>) -> Result<ControlledPath> {
    let n = rp.dim();
    if y.grid() != rp.grid() || yprime.grid() != rp.grid() {
        return Err(mismatch("controlled path and reference live on different grids"));
    }
    if yprime.dim() != y.dim() * n {
        return Err(mismatch(format!("derivative has dim {}, expected {} x {}", yprime.dim(), y.dim(), n)));
    }
    Ok(ControlledPath { y, yprime, reference: rp })
}

impl ControlledPath {
    pub fn y(&self) -> &Field {
        &self.y
    }

    pub fn yprime(&self) -> &Field {
        &self.yprime
    }

    pub fn reference(&self) -> &Arc<RoughPath> {
        &self.reference
    }

    fn remainder_at(&self, i: usize, j: usize, out: &mut [f64]) {
        let p = self.y.dim();
        let n = self.reference.dim();
        let x = self.reference.base();
        let (yi, yj, d) = (self.y.at(i), self.y.at(j), self.yprime.at(i));
        for r in 0..p {
            let mut v = yj[r] - yi[r];
            for c in 0..n {
                v -= d[r * n + c] * (x.get(j, c) - x.get(i, c));
            }
            out[r] = v;
        }
    }

    /// `R_Y(i,j) = δY(i,j) - Y'(x_i) δX(i,j)`.
    pub fn remainder(&self) -> TwoPointField {
        TwoPointField::from_fn(self.y.grid(), self.y.dim(), 1, |i, j, out| self.remainder_at(i, j, out))
    }

    /// `|R_Y|_γ` without materialising the two-point field.
    pub fn remainder_norm(&self, gamma: f64, sampling: PairSampling) -> f64 {
        let mut buf = vec![0.0; self.y.dim()];
        two_point_norm_fn(self.y.grid(), gamma, sampling, |i, j| {
            self.remainder_at(i, j, &mut buf);
            frob(&buf)
        })
    }

    /// `‖Y‖₀ + |Y'|₀ + |Y'|_α + |R_Y|_{2α}` on the grid.
    pub fn controlled_norm(&self, alpha: f64, sampling: PairSampling) -> Result<f64> {
        Ok(self.y.sup_norm()
            + self.yprime.sup_norm()
            + crate::grid::holder_seminorm_with(&self.yprime, alpha, sampling)?
            + self.remainder_norm(2.0 * alpha, sampling))
    }

    /// `c·Y` with derivative `c·Y'`.
    pub fn scaled(&self, c: f64) -> ControlledPath {
        ControlledPath { y: self.y.scaled(c), yprime: self.yprime.scaled(c), reference: self.reference.clone() }
    }
}

fn same_reference(a: &ControlledPath, b: &ControlledPath) -> bool {
    Arc::ptr_eq(&a.reference, &b.reference) || *a.reference == *b.reference
}

/// `Y = g(Ψ + w)` with `Y' = Dg(Ψ + w) Ψ'`.
pub fn compose_smooth(g: &dyn SmoothMap, psi: &ControlledPath, w: &Field) -> Result<ControlledPath> {
    let d = psi.y.dim();
    if g.input_dim() != d || w.dim() != d || w.grid() != psi.y.grid() {
        return Err(mismatch("g, Ψ and w do not share a dimension and grid"));
    }
    let (p, n) = (g.output_dim(), psi.reference.dim());
    let grid = psi.y.grid();
    let mut y = Field::zeros(grid, p);
    let mut yp = Field::zeros(grid, p * n);
    let mut arg = vec![0.0; d];
    let mut jac = vec![0.0; p * d];
    {
        let mut yv = y.periodic_mut();
        let mut ypv = yp.periodic_mut();
        for i in 0..grid.m() {
            for c in 0..d {
                arg[c] = psi.y.get(i, c) + w.get(i, c);
            }
            g.eval(&arg, &mut yv[i * p..(i + 1) * p]);
            g.jacobian(&arg, &mut jac);
            let dpsi = psi.yprime.at(i);
            let out = &mut ypv[i * p * n..(i + 1) * p * n];
            for r in 0..p {
                for c in 0..n {
                    out[r * n + c] = (0..d).map(|k| jac[r * d + k] * dpsi[k * n + c]).sum();
                }
            }
        }
    }
    make_controlled(y, yp, psi.reference.clone())
}

/// Right side of the composition estimate
/// `|Dg|₀|w|_{2α} + |D²g|₀|Ψ|_α² + |Dg|₀|R_Ψ|_{2α}`, with the derivative
/// sizes measured on the realised range of `Ψ + w`.
pub fn composition_bound(g: &dyn SmoothMap, psi: &ControlledPath, w: &Field, alpha: f64) -> Result<f64> {
    let d = psi.y.dim();
    let grid = psi.y.grid();
    let mut arg = vec![0.0; d];
    let mut jac = vec![0.0; g.output_dim() * d];
    let (mut dg, mut d2g): (f64, f64) = (0.0, 0.0);
    for i in 0..grid.m() {
        for c in 0..d {
            arg[c] = psi.y.get(i, c) + w.get(i, c);
        }
        g.jacobian(&arg, &mut jac);
        dg = dg.max(frob(&jac));
        d2g = d2g.max(g.second_derivative_norm(&arg));
    }
    let psi_a = holder_seminorm(&psi.y, alpha)?;
    Ok(dg * holder_seminorm(w, 2.0 * alpha)?
        + d2g * psi_a * psi_a
        + dg * psi.remainder_norm(2.0 * alpha, PairSampling::All))
}

/// Output of [`rough_integral`]: the `p x q` matrix `∫ Y ⊗ dZ`.
#[derive(Clone, Debug)]
pub struct RoughIntegralResult {
    pub total: Vec<f64>,
    pub partials: TwoPointField,
    pub q_remainder: TwoPointField,
}

/// Per-cell compensated terms `Y(x_k) ⊗ δZ_k + Y'(x_k) 𝕏_k Z'(x_k)ᵀ`
/// accumulated into prefix sums (length `(m + 1) p q`).
fn compensated_prefix(y: &ControlledPath, z: &ControlledPath, compensate: bool) -> Vec<f64> {
    let (p, q, n) = (y.y.dim(), z.y.dim(), y.reference.dim());
    let m = y.y.grid().m();
    let pq = p * q;
    let mut prefix = vec![0.0; (m + 1) * pq];
    let mut cell = vec![0.0; n * n];
    let mut dz = vec![0.0; q];
    let mut ycell = vec![0.0; p * n];
    for k in 0..m {
        let (head, tail) = prefix.split_at_mut((k + 1) * pq);
        let acc = &mut tail[..pq];
        acc.copy_from_slice(&head[k * pq..]);
        for c in 0..q {
            dz[c] = z.y.get(k + 1, c) - z.y.get(k, c);
        }
        outer_add(y.y.at(k), &dz, 1.0, acc);
        if compensate {
            y.reference.query_into(k, k + 1, &mut cell);
            let (yp, zp) = (y.yprime.at(k), z.yprime.at(k));
            // ycell = Y' 𝕏  (p x n)
            for r in 0..p {
                for c in 0..n {
                    ycell[r * n + c] = (0..n).map(|l| yp[r * n + l] * cell[l * n + c]).sum();
                }
            }
            for r in 0..p {
                for c in 0..q {
                    acc[r * q + c] += (0..n).map(|l| ycell[r * n + l] * zp[c * n + l]).sum::<f64>();
                }
            }
        }
    }
    prefix
}

fn check_pair(y: &ControlledPath, z: &ControlledPath) -> Result<()> {
    if !same_reference(y, z) {
        return Err(Error::ReferenceMismatch);
    }
    Ok(())
}

/// Compensated Riemann sum at the grid's own partition, with all interval
/// partials and the remainder `Q`.
pub fn rough_integral(y: &ControlledPath, z: &ControlledPath) -> Result<RoughIntegralResult> {
    check_pair(y, z)?;
    let (p, q, n) = (y.y.dim(), z.y.dim(), y.reference.dim());
    let pq = p * q;
    let m = y.y.grid().m();
    let prefix = compensated_prefix(y, z, true);
    let grid = y.y.grid();
    let partials = TwoPointField::from_fn(grid, p, q, |i, j, out| {
        for e in 0..pq {
            out[e] = prefix[j * pq + e] - prefix[i * pq + e];
        }
    });
    let mut xx = vec![0.0; n * n];
    let mut yx = vec![0.0; p * n];
    let mut dz = vec![0.0; q];
    let q_remainder = TwoPointField::from_fn(grid, p, q, |i, j, out| {
        out.copy_from_slice(partials.at(i, j));
        for c in 0..q {
            dz[c] = z.y.get(j, c) - z.y.get(i, c);
        }
        outer_add(y.y.at(i), &dz, -1.0, out);
        y.reference.query_into(i, j, &mut xx);
        let (yp, zp) = (y.yprime.at(i), z.yprime.at(i));
        for r in 0..p {
            for c in 0..n {
                yx[r * n + c] = (0..n).map(|l| yp[r * n + l] * xx[l * n + c]).sum();
            }
        }
        for r in 0..p {
            for c in 0..q {
                out[r * q + c] -= (0..n).map(|l| yx[r * n + l] * zp[c * n + l]).sum::<f64>();
            }
        }
    });
    Ok(RoughIntegralResult { total: prefix[m * pq..].to_vec(), partials, q_remainder })
}

/// Only the full-interval compensated sum (linear cost).
pub fn rough_integral_total(y: &ControlledPath, z: &ControlledPath) -> Result<Vec<f64>> {
    check_pair(y, z)?;
    let pq = y.y.dim() * z.y.dim();
    let prefix = compensated_prefix(y, z, true);
    Ok(prefix[prefix.len() - pq..].to_vec())
}

/// The uncompensated left-point sum `Σ Y(x_k) ⊗ δZ_k`.
pub fn riemann_sum(y: &ControlledPath, z: &ControlledPath) -> Result<Vec<f64>> {
    check_pair(y, z)?;
    let pq = y.y.dim() * z.y.dim();
    let prefix = compensated_prefix(y, z, false);
    Ok(prefix[prefix.len() - pq..].to_vec())
}

/// A profile `f` on the real line with its `|f|_{1,1}` size.
pub struct KernelProfile<'a> {
    pub f: &'a dyn Fn(f64) -> f64,
    pub norm_11: f64,
}

/// Value of `∫₀¹ f(λx) Y dZ` and the ratio `|value| / (|f|_{1,1} λ^{-α})`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedIntegral {
    pub value: Vec<f64>,
    pub ratio: f64,
}

/// Folds `f(λ·)` into `Y` (the derivative of `f` goes to the remainder) and
/// integrates against `Z`.
pub fn kernel_weighted_rough_integral(
    profile: &KernelProfile<'_>,
    lambda: f64,
    alpha: f64,
    y: &ControlledPath,
    z: &ControlledPath,
) -> Result<WeightedIntegral> {
    if !(lambda >= 1.0) {
        return Err(invalid(format!("lambda = {lambda} must be at least 1")));
    }
    let grid = y.y.grid();
    let weights: Vec<f64> = (0..grid.nodes()).map(|i| (profile.f)(lambda * grid.x(i))).collect();
    let w = weight_controlled(&weights, y);
    let value = rough_integral_total(&w, z)?;
    let ratio = frob(&value) / (profile.norm_11 * lambda.powf(-alpha));
    Ok(WeightedIntegral { value, ratio })
}

/// `f·Y` with derivative `f·Y'` for nodal weights `f`. Only nodes
/// `0..m` enter the integrals, so node `m` keeps the periodic closure.
pub fn weight_controlled(weights: &[f64], y: &ControlledPath) -> ControlledPath {
    let p = y.y.dim();
    let pn = y.yprime.dim();
    let mut wy = y.y.clone();
    let mut wyp = y.yprime.clone();
    {
        let mut a = wy.periodic_mut();
        for (i, v) in a.iter_mut().enumerate() {
            *v *= weights[i / p];
        }
    }
    {
        let mut b = wyp.periodic_mut();
        for (i, v) in b.iter_mut().enumerate() {
            *v *= weights[i / pn];
        }
    }
    ControlledPath { y: wy, yprime: wyp, reference: y.reference.clone() }
}

/// `|∫(∫ f dλ) Y dZ - ∫(∫ f Y dZ) dλ|` with the trapezoid rule on `lambdas`.
pub fn fubini_check(
    f: &dyn Fn(f64, f64) -> f64,
    lambdas: &[f64],
    y: &ControlledPath,
    z: &ControlledPath,
) -> Result<f64> {
    if lambdas.len() < 2 {
        return Err(invalid("need at least two λ nodes"));
    }
    check_pair(y, z)?;
    let grid = y.y.grid();
    let tw: Vec<f64> = (0..lambdas.len())
        .map(|k| {
            let left = if k > 0 { lambdas[k] - lambdas[k - 1] } else { 0.0 };
            let right = if k + 1 < lambdas.len() { lambdas[k + 1] - lambdas[k] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect();
    let integrated: Vec<f64> =
        (0..grid.nodes()).map(|i| lambdas.iter().zip(&tw).map(|(l, w)| w * f(*l, grid.x(i))).sum()).collect();
    let lhs = rough_integral_total(&weight_controlled(&integrated, y), z)?;
    let mut rhs = vec![0.0; lhs.len()];
    for (l, w) in lambdas.iter().zip(&tw) {
        let weights: Vec<f64> = (0..grid.nodes()).map(|i| f(*l, grid.x(i))).collect();
        let part = rough_integral_total(&weight_controlled(&weights, y), z)?;
        for (r, v) in rhs.iter_mut().zip(part) {
            *r += w * v;
        }
    }
    Ok(lhs.iter().zip(&rhs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::delta;
    use crate::models::{Identity, ScalarMap};
    use crate::noise::sample_holder_path;
    use std::f64::consts::PI;

    fn grid(m: usize) -> SpatialGrid {
        SpatialGrid::new(m).unwrap()
    }

    fn rough_sample(m: usize, dim: usize, seed: u64) -> Arc<RoughPath> {
        let x = sample_holder_path(grid(m), dim, 0.45, seed, 1.0).unwrap();
        Arc::new(lift_piecewise_linear(&x))
    }

    fn identity_derivative(g: SpatialGrid, n: usize) -> Field {
        Field::from_fn(g, n * n, |_, out| {
            for i in 0..n {
                out[i * n + i] = 1.0;
            }
        })
    }

    #[test]
    fn lift_of_constant_is_zero() {
        let rp = lift_piecewise_linear(&Field::from_fn(grid(8), 2, |_, o| o.fill(0.3)));
        assert!(rp.cells().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_lift_is_half_square() {
        let rp = rough_sample(64, 1, 3);
        let x = rp.base();
        for (i, j) in [(0, 64), (5, 40), (10, 11)] {
            let got = chen_query(&rp, i, j).unwrap()[0];
            let d = x.get(j, 0) - x.get(i, 0);
            assert!((got - 0.5 * d * d).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_integral_of_smooth_path() {
        // (s, s²) traversed on the first half of a tent loop of length 1
        let m = 2048;
        let f = Field::from_fn(grid(m), 2, |x, o| {
            let s = 2.0 * x.min(1.0 - x);
            o[0] = s;
            o[1] = s * s;
        });
        let rp = lift_piecewise_linear(&f);
        let v = chen_query(&rp, 0, m / 2).unwrap();
        assert!((v[1] - 2.0 / 3.0).abs() < 2e-3);
    }

    #[test]
    fn chen_query_trivial_pairs() {
        let rp = rough_sample(32, 2, 1);
        assert!(chen_query(&rp, 4, 4).unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(chen_query(&rp, 7, 8).unwrap(), rp.cell(7));
        assert!(chen_query(&rp, 5, 4).is_err());
        assert!(chen_query(&rp, 0, 33).is_err());
    }

    #[test]
    fn chen_query_matches_refined_lift() {
        let path = |x: f64, o: &mut [f64]| {
            let s = 2.0 * x.min(1.0 - x);
            o[0] = s;
            o[1] = s * s;
        };
        let coarse = lift_piecewise_linear(&Field::from_fn(grid(64), 2, path));
        let fine = lift_piecewise_linear(&Field::from_fn(grid(4096), 2, path));
        let mut worst: f64 = 0.0;
        for i in (0..=64).step_by(4) {
            for j in (i..=64).step_by(4) {
                let a = chen_query(&coarse, i, j).unwrap();
                let b = chen_query(&fine, 64 * i, 64 * j).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    worst = worst.max((x - y).abs());
                }
            }
        }
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn chen_residual_examples() {
        let rp = rough_sample(128, 2, 5);
        let scale = 1.0 + rp.base().sup_norm().powi(2);
        assert!(chen_residual(&rp) <= 1e-12 * scale);
        let zero = lift_piecewise_linear(&Field::zeros(grid(16), 2));
        assert_eq!(chen_residual(&zero), 0.0);

        let small = rough_sample(32, 1, 2);
        let mut table = small.to_pairs();
        let v = table.at(3, 4)[0] + 1.0;
        table.set(3, 4, &[v]);
        let broken = RoughPath::from_pairs(small.base().clone(), table).unwrap();
        assert!(chen_residual(&broken) >= 0.999);
    }

    #[test]
    fn restriction_composes_cells() {
        let rp = rough_sample(64, 2, 9);
        let c = rp.restrict(8).unwrap();
        assert_eq!(c.grid().m(), 8);
        let a = chen_query(&c, 1, 5).unwrap();
        let b = chen_query(&rp, 8, 40).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn controlled_path_remainders() {
        let rp = rough_sample(48, 2, 7);
        let g = rp.grid();
        let same = make_controlled(rp.base().clone(), identity_derivative(g, 2), rp.clone()).unwrap();
        assert!(same.remainder().sup_norm() < 1e-15);
        let y = Field::scalar_fn(g, |x| (2.0 * PI * x).cos());
        let flat = make_controlled(y.clone(), Field::zeros(g, 2), rp.clone()).unwrap();
        assert_eq!(flat.remainder(), delta(&y));
        assert!(make_controlled(y, Field::zeros(g, 1), rp).is_err());
    }

    #[test]
    fn compose_smooth_examples() {
        let rp = rough_sample(64, 1, 11);
        let g = rp.grid();
        let psi = make_controlled(rp.base().clone(), identity_derivative(g, 1), rp.clone()).unwrap();
        let zero = Field::zeros(g, 1);

        let same = compose_smooth(&Identity(1), &psi, &zero).unwrap();
        assert_eq!(same.y(), psi.y());
        assert_eq!(same.yprime(), psi.yprime());

        let constant = ScalarMap { f: |_| 2.5, df: |_| 0.0, d2f: |_| 0.0 };
        let c = compose_smooth(&constant, &psi, &zero).unwrap();
        assert!(c.y().values().iter().all(|&v| v == 2.5));
        assert_eq!(c.yprime().sup_norm(), 0.0);
        assert_eq!(c.remainder().sup_norm(), 0.0);

        let square = ScalarMap { f: |u: f64| u * u, df: |u: f64| 2.0 * u, d2f: |_| 2.0 };
        let sq = compose_smooth(&square, &psi, &zero).unwrap();
        let alpha = 0.4;
        let xa = holder_seminorm(rp.base(), alpha).unwrap();
        assert!(sq.remainder_norm(2.0 * alpha, PairSampling::All) <= 2.0 * xa * xa * 1.05);
        let bound = composition_bound(&square, &psi, &zero, alpha).unwrap();
        assert!(sq.remainder_norm(2.0 * alpha, PairSampling::All) <= bound * 1.05);

        assert!(compose_smooth(&Identity(2), &psi, &zero).is_err());
    }

    fn lifted_controlled(rp: &Arc<RoughPath>) -> ControlledPath {
        let g = rp.grid();
        let n = rp.dim();
        make_controlled(rp.base().clone(), identity_derivative(g, n), rp.clone()).unwrap()
    }

    #[test]
    fn constant_integrand_telescopes() {
        let rp = rough_sample(32, 1, 4);
        let z = lifted_controlled(&rp);
        let y = make_controlled(Field::scalar_fn(rp.grid(), |_| 1.75), Field::zeros(rp.grid(), 1), rp.clone()).unwrap();
        let r = rough_integral(&y, &z).unwrap();
        for j in [1, 9, 20, 32] {
            let want = 1.75 * (rp.base().get(j, 0) - rp.base().get(0, 0));
            assert!((r.partials.at(0, j)[0] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn geometric_integral_of_path_against_itself() {
        let rp = rough_sample(128, 1, 8);
        let x = lifted_controlled(&rp);
        let r = rough_integral(&x, &x).unwrap();
        let b = rp.base();
        for j in [1, 17, 64, 127, 128] {
            let want = 0.5 * (b.get(j, 0).powi(2) - b.get(0, 0).powi(2));
            assert!((r.partials.at(0, j)[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn partials_are_additive_and_cells_have_no_remainder() {
        let rp = rough_sample(40, 2, 12);
        let x = lifted_controlled(&rp);
        let r = rough_integral(&x, &x).unwrap();
        for (i, j, k) in [(0, 10, 40), (3, 4, 29), (7, 20, 21)] {
            for e in 0..4 {
                let s = r.partials.at(i, j)[e] + r.partials.at(j, k)[e];
                assert!((r.partials.at(i, k)[e] - s).abs() < 1e-13);
            }
        }
        for k in 0..40 {
            assert!(r.q_remainder.at(k, k + 1).iter().all(|v| v.abs() < 1e-15));
        }
        assert_eq!(rough_integral_total(&x, &x).unwrap(), r.total);
    }

    #[test]
    fn integral_is_bilinear() {
        let rp = rough_sample(64, 1, 13);
        let g = rp.grid();
        let x = lifted_controlled(&rp);
        let y1 = make_controlled(
            Field::scalar_fn(g, |t| (2.0 * PI * t).sin()),
            Field::scalar_fn(g, |t| t.cos()),
            rp.clone(),
        )
        .unwrap();
        let y2 = make_controlled(rp.base().clone(), Field::scalar_fn(g, |_| 1.0), rp.clone()).unwrap();
        let a = -1.3;
        let combo = make_controlled(
            y1.y().scaled(a).add(y2.y()).unwrap(),
            y1.yprime().scaled(a).add(y2.yprime()).unwrap(),
            rp.clone(),
        )
        .unwrap();
        let lhs = rough_integral_total(&combo, &x).unwrap()[0];
        let rhs = a * rough_integral_total(&y1, &x).unwrap()[0] + rough_integral_total(&y2, &x).unwrap()[0];
        assert!((lhs - rhs).abs() < 1e-13);
    }

    #[test]
    fn mismatched_references_are_rejected() {
        let a = lifted_controlled(&rough_sample(32, 1, 1));
        let b = lifted_controlled(&rough_sample(32, 1, 2));
        assert!(matches!(rough_integral(&a, &b), Err(Error::ReferenceMismatch)));
    }

    #[test]
    fn integral_is_stable_under_path_perturbation() {
        let g = grid(256);
        let base = sample_holder_path(g, 1, 0.45, 21, 1.0).unwrap();
        let bump = Field::scalar_fn(g, |x| (2.0 * PI * x).cos() + 0.3 * (6.0 * PI * x).sin());
        let integral = |s: f64| {
            let rp = Arc::new(lift_piecewise_linear(&base.add(&bump.scaled(s)).unwrap()));
            let w = Field::scalar_fn(g, |x| (2.0 * PI * x).sin());
            let y = make_controlled(w, Field::zeros(g, 1), rp.clone()).unwrap();
            rough_integral_total(&y, &lifted_controlled(&rp)).unwrap()[0]
        };
        let i0 = integral(0.0);
        for s in [1e-3, 1e-4] {
            let ratio = (integral(2.0 * s) - i0).abs() / (integral(s) - i0).abs();
            assert!((1.5..=2.5).contains(&ratio), "{ratio}");
        }
    }

    #[test]
    fn kernel_weighted_examples() {
        let rp = rough_sample(128, 1, 6);
        let x = lifted_controlled(&rp);
        let one = |_: f64| 1.0;
        let profile = KernelProfile { f: &one, norm_11: 1.0 };
        let w = kernel_weighted_rough_integral(&profile, 1.0, 0.4, &x, &x).unwrap();
        assert_eq!(w.value, rough_integral_total(&x, &x).unwrap());
        assert!(kernel_weighted_rough_integral(&profile, 0.5, 0.4, &x, &x).is_err());
    }

    #[test]
    fn fubini_examples() {
        let rp = rough_sample(64, 1, 14);
        let x = lifted_controlled(&rp);
        let lambdas: Vec<f64> = (0..=10).map(|k| k as f64 * 0.1).collect();
        assert_eq!(fubini_check(&|_, _| 0.0, &lambdas, &x, &x).unwrap(), 0.0);
        assert!(fubini_check(&|_, y| (2.0 * PI * y).cos(), &lambdas, &x, &x).unwrap() < 1e-13);
        assert!(fubini_check(&|l, y| l * (2.0 * PI * y).sin(), &lambdas, &x, &x).unwrap() <= 1e-10);
        assert!(fubini_check(&|l, _| l, &[0.5], &x, &x).is_err());
    }

    #[test]
    fn levy_area_modification() {
        let rp = rough_sample(64, 2, 15);
        assert_eq!(modify_levy_area(&rp, &[0.0; 4]).unwrap(), *rp);
        let a = [0.0, 1.0, -1.0, 0.0];
        let md = modify_levy_area(&rp, &a).unwrap();
        let scale = 1.0 + rp.base().sup_norm().powi(2);
        assert!(chen_residual(&md) <= 1e-12 * scale);
        assert!(modify_levy_area(&rp, &[1.0; 3]).is_err());
        assert!(modify_levy_area(&rp, &[f64::INFINITY, 0.0, 0.0, 0.0]).is_err());

        let scalar = rough_sample(32, 1, 16);
        let shifted = modify_levy_area(&scalar, &[1.0]).unwrap();
        let g = scalar.grid();
        for (i, j) in [(0, 32), (4, 9), (11, 12)] {
            let d = scalar.base().get(j, 0) - scalar.base().get(i, 0);
            let sym = chen_query(&shifted, i, j).unwrap()[0] - 0.5 * d * d;
            assert!((sym - (g.x(j) - g.x(i))).abs() < 1e-13);
        }
        assert!((shifted.symmetric_defect() - g.h()).abs() < 1e-15);
    }

    #[test]
    fn area_modification_shifts_integral_by_riemann_sum() {
        let rp = rough_sample(128, 2, 17);
        let g = rp.grid();
        let a = [0.2, 1.0, -1.0, 0.5];
        let md = Arc::new(modify_levy_area(&rp, &a).unwrap());
        let yp = Field::from_fn(g, 4, |x, o| {
            o.copy_from_slice(&[(2.0 * PI * x).cos(), 0.3, x.sin(), 1.0]);
        });
        let zp = Field::from_fn(g, 4, |x, o| {
            o.copy_from_slice(&[1.0, (2.0 * PI * x).sin(), 0.0, 0.7]);
        });
        let y = Field::from_fn(g, 2, |x, o| o.copy_from_slice(&[x.cos(), 0.1]));
        let z = Field::from_fn(g, 2, |x, o| o.copy_from_slice(&[(2.0 * PI * x).sin(), 0.4]));
        let total = |r: &Arc<RoughPath>| {
            let yc = make_controlled(y.clone(), yp.clone(), r.clone()).unwrap();
            let zc = make_controlled(z.clone(), zp.clone(), r.clone()).unwrap();
            rough_integral_total(&yc, &zc).unwrap()
        };
        let (before, after) = (total(&rp), total(&md));
        let mut want = [0.0; 4];
        for k in 0..g.m() {
            let (ypk, zpk) = (yp.at(k), zp.at(k));
            for r in 0..2 {
                for c in 0..2 {
                    let mut s = 0.0;
                    for l in 0..2 {
                        for q in 0..2 {
                            s += ypk[r * 2 + l] * a[l * 2 + q] * zpk[c * 2 + q];
                        }
                    }
                    want[r * 2 + c] += s * g.h();
                }
            }
        }
        for e in 0..4 {
            assert!((after[e] - before[e] - want[e]).abs() < 1e-12);
        }
    }

    #[test]
    fn rough_path_csv_layout() {
        let rp = rough_sample(4, 2, 18);
        let mut buf = Vec::new();
        rp.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("i,XX[0][0],XX[0][1],XX[1][0],XX[1][1]"));
        assert_eq!(text.lines().count(), 1 + 5 + 1 + 4);
    }
}
