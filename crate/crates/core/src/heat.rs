//! The periodic heat kernel `p̂_t` in its Fourier and reflection forms, the
//! heat semigroup on fields, the kernel scaling split and quadratures for
//! the classical kernel integral bounds.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fit::{loglog_fit, LinearFit};
use crate::grid::Field;
use crate::spectral::Spectral;

/// Truncation parameters for the two kernel representations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatKernelConfig {
    pub k_max: usize,
    pub image_max: usize,
    pub t_switch: f64,
}

impl Default for HeatKernelConfig {
    fn default() -> Self {
        Self { k_max: 256, image_max: 4, t_switch: 1.0 / (4.0 * PI * PI) }
    }
}

impl HeatKernelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_max < 64 || self.image_max < 3 || !(self.t_switch > 0.0) {
            return Err(invalid("need k_max >= 64, image_max >= 3 and t_switch > 0"));
        }
        Ok(())
    }
}

const TAIL: f64 = 1e-16;

/// `(p̂, ∂ₓp̂, ∂ₓ²p̂)` from `1 + 2 Σ_k e^{-(2πk)²t} cos(2πkx)`.
pub fn fourier_kernel(t: f64, x: f64, k_max: usize) -> [f64; 3] {
    let (x, sign) = fold(x);
    let mut out = [1.0, 0.0, 0.0];
    for k in 1..=k_max {
        let w = 2.0 * PI * k as f64;
        let e = (-w * w * t).exp();
        if e < TAIL {
            break;
        }
        let (s, c) = (w * x).sin_cos();
        out[0] += 2.0 * e * c;
        out[1] -= 2.0 * e * w * s;
        out[2] -= 2.0 * e * w * w * c;
    }
    out[1] *= sign;
    out
}

/// Reduces `x` to `|x - round(x)|` and the sign of the odd derivative.
fn fold(x: f64) -> (f64, f64) {
    let r = x - x.round();
    (r.abs(), if r < 0.0 { -1.0 } else { 1.0 })
}

/// `(p̂, ∂ₓp̂, ∂ₓ²p̂)` from `Σ_j p_t(x - j)` with the Gaussian
/// `p_t(x) = (4πt)^{-1/2} exp(-x²/4t)`.
pub fn reflection_kernel(t: f64, x: f64, image_max: usize) -> [f64; 3] {
    let (x, sign) = fold(x);
    let norm = 1.0 / (4.0 * PI * t).sqrt();
    let mut out = [0.0; 3];
    let j = image_max as i64;
    for k in -j..=j {
        let y = x - k as f64;
        let g = norm * (-y * y / (4.0 * t)).exp();
        out[0] += g;
        out[1] += -y / (2.0 * t) * g;
        out[2] += (y * y / (4.0 * t * t) - 1.0 / (2.0 * t)) * g;
    }
    out[1] *= sign;
    out
}

/// Kernel and its first two spatial derivatives, switching representation
/// at `t_switch`.
pub fn heat_kernel_derivs(cfg: &HeatKernelConfig, t: f64, x: f64) -> Result<[f64; 3]> {
    if !(t > 0.0) {
        return Err(invalid(format!("heat kernel needs t > 0, got {t}")));
    }
    Ok(if t < cfg.t_switch { reflection_kernel(t, x, cfg.image_max) } else { fourier_kernel(t, x, cfg.k_max) })
}

/// `p̂_t(x)`.
pub fn heat_kernel(cfg: &HeatKernelConfig, t: f64, x: f64) -> Result<f64> {
    Ok(heat_kernel_derivs(cfg, t, x)?[0])
}

/// `∂ₓ p̂_t(x)`.
pub fn heat_kernel_dx(cfg: &HeatKernelConfig, t: f64, x: f64) -> Result<f64> {
    Ok(heat_kernel_derivs(cfg, t, x)?[1])
}

fn kernel_unchecked(cfg: &HeatKernelConfig, t: f64, x: f64) -> f64 {
    if t < cfg.t_switch {
        reflection_kernel(t, x, cfg.image_max)[0]
    } else {
        fourier_kernel(t, x, cfg.k_max)[0]
    }
}

/// `S(t)f` by spectral multiplication.
pub fn semigroup_apply(t: f64, f: &Field) -> Result<Field> {
    if !(t >= 0.0) {
        return Err(invalid(format!("semigroup time must be nonnegative, got {t}")));
    }
    if t == 0.0 {
        return Ok(f.clone());
    }
    Ok(Spectral::new(f.grid().m()).heat(t, f))
}

/// Rescaled profiles with `p̂_t(x) = t^{-1/2} f_t(x/√t)` and
/// `∂ₓp̂_t(x) = t^{-1} g_t(x/√t)`, sampled over one period.
#[derive(Clone, Debug)]
pub struct ScalingSplit {
    pub t: f64,
    pub xi: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub f_norm_11: f64,
    pub g_norm_11: f64,
}

impl ScalingSplit {
    /// `f_t(ξ)` evaluated directly.
    pub fn f_at(&self, cfg: &HeatKernelConfig, xi: f64) -> f64 {
        self.t.sqrt() * kernel_unchecked(cfg, self.t, xi * self.t.sqrt())
    }
}

/// Samples `f_t`, `g_t` on `ξ ∈ [-1/(2√t), 1/(2√t)]` with `per_unit`
/// points per unit length and estimates `|·|_{1,1}` as the sum over unit
/// windows `[k, k+1]` of `sup(|f| + |f'|)`.
pub fn kernel_scaling_split(cfg: &HeatKernelConfig, t: f64, per_unit: usize) -> Result<ScalingSplit> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(invalid(format!("scaling split needs t in (0,1], got {t}")));
    }
    let st = t.sqrt();
    let half = 0.5 / st;
    let count = ((2.0 * half) * per_unit as f64).ceil() as usize + 1;
    let mut xi = Vec::with_capacity(count);
    let (mut f, mut fp, mut g, mut gp) = (vec![], vec![], vec![], vec![]);
    for i in 0..count {
        let s = -half + 2.0 * half * i as f64 / (count - 1) as f64;
        let d = heat_kernel_derivs(cfg, t, s * st)?;
        xi.push(s);
        f.push(st * d[0]);
        fp.push(t * d[1]);
        g.push(t * d[1]);
        gp.push(t * st * d[2]);
    }
    let f_norm_11 = norm_11(&xi, &f, &fp);
    let g_norm_11 = norm_11(&xi, &g, &gp);
    Ok(ScalingSplit { t, xi, f, g, f_norm_11, g_norm_11 })
}

/// `Σ_k sup_{[k,k+1]} (|f| + |f'|)` over sampled points.
pub fn norm_11(xi: &[f64], f: &[f64], fp: &[f64]) -> f64 {
    let mut total = 0.0;
    let lo = xi.first().copied().unwrap_or(0.0).floor() as i64;
    let hi = xi.last().copied().unwrap_or(0.0).ceil() as i64;
    for k in lo..hi {
        let (a, b) = (k as f64, k as f64 + 1.0);
        let sup = xi
            .iter()
            .zip(f.iter().zip(fp))
            .filter(|(x, _)| **x >= a && **x <= b)
            .map(|(_, (v, d))| v.abs() + d.abs())
            .fold(0.0, f64::max);
        total += sup;
    }
    total
}

/// The four kernel integral bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundId {
    /// `∫₀ᵗ∫(p̂_{t-s}(x-z) - p̂_{t-s}(y-z))² ≤ C|x-y|`.
    SR1,
    /// Temporal regularity, `≤ C (t-s)^{1/2}`.
    TR,
    /// Time-weighted spatial bound, `≤ C|x-y|^{1+2α}`.
    I1,
    /// Space-weighted spatial bound, `≤ C|x-y|^{1+2α}`.
    I2,
}

impl BoundId {
    pub fn name(&self) -> &'static str {
        match self {
            BoundId::SR1 => "SR1",
            BoundId::TR => "TR",
            BoundId::I1 => "I1",
            BoundId::I2 => "I2",
        }
    }

    /// Power of the scale on the right-hand side.
    pub fn power(&self, alpha: f64) -> f64 {
        match self {
            BoundId::SR1 => 1.0,
            BoundId::TR => 0.5,
            BoundId::I1 | BoundId::I2 => 1.0 + 2.0 * alpha,
        }
    }
}

/// Resolution of the product quadrature.
///
/// Time is split into dyadic bands `[t 2^{-k-1}, t 2^{-k}]`; space is
/// restricted to windows of half-width `window · √τ` around the kernel
/// centres once those windows are shorter than the period.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureConfig {
    /// Gauss panels per dyadic time band.
    pub panels_per_band: usize,
    /// Bands below the smallest natural scale of the integrand.
    pub extra_bands: u32,
    /// Half-width of the spatial windows in units of `√τ`.
    pub window: f64,
    /// Gauss panels per window segment.
    pub panels_per_segment: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self { panels_per_band: 2, extra_bands: 24, window: 10.0, panels_per_segment: 12 }
    }
}

/// One rung of a bound check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundRow {
    pub scale: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

/// Result of [`kernel_bound_check`].
#[derive(Clone, Debug)]
pub struct BoundReport {
    pub bound: BoundId,
    pub rows: Vec<BoundRow>,
    pub worst_ratio: f64,
    pub fit: Option<LinearFit>,
}

impl BoundReport {
    /// CSV rows `bound_id,scale,lhs,rhs,ratio`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["bound_id", "scale", "lhs", "rhs", "ratio"])?;
        for r in &self.rows {
            wr.write_record([
                self.bound.name().to_string(),
                format!("{:e}", r.scale),
                format!("{:e}", r.lhs),
                format!("{:e}", r.rhs),
                format!("{:e}", r.ratio),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

const GL_NODES: [f64; 8] = [
    -0.960_289_856_497_536_3,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL_WEIGHTS: [f64; 8] = [
    0.101_228_536_290_376_26,
    0.222_381_034_453_374_47,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362,
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_47,
    0.101_228_536_290_376_26,
];

/// Composite 8-point Gauss-Legendre over `[a, b]` with `panels` panels.
fn gauss_legendre(a: f64, b: f64, panels: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
    let w = (b - a) / panels as f64;
    let mut s = 0.0;
    for p in 0..panels {
        let c = a + (p as f64 + 0.5) * w;
        for (x, wt) in GL_NODES.iter().zip(GL_WEIGHTS) {
            s += wt * f(c + 0.5 * w * x);
        }
    }
    0.5 * w * s
}

/// `∫₀^T F(τ) dτ` over dyadic bands down to `floor · 2^{-extra}`; the
/// remaining piece near `τ = 0` is dropped.
fn dyadic_time_integral(horizon: f64, floor: f64, q: &QuadratureConfig, mut f: impl FnMut(f64) -> f64) -> f64 {
    let floor = floor.min(horizon);
    let bands = (horizon / floor).log2().ceil().max(0.0) as u32 + q.extra_bands;
    let mut total = 0.0;
    let mut hi = horizon;
    for _ in 0..bands {
        let lo = 0.5 * hi;
        total += gauss_legendre(lo, hi, q.panels_per_band, &mut f);
        hi = lo;
    }
    total
}

/// `∫ F(z) dz` over one period for an integrand built from kernels of
/// times in `[tau_lo, tau_hi]` centred at `centres`. Cut points are graded
/// geometrically from `window·√tau_lo` to `window·√tau_hi` around each centre.
fn spatial_integral(
    tau_lo: f64,
    tau_hi: f64,
    centres: &[f64],
    q: &QuadratureConfig,
    mut f: impl FnMut(f64) -> f64,
) -> f64 {
    let (r_lo, r_hi) = (q.window * tau_lo.sqrt(), q.window * tau_hi.sqrt());
    let c0 = centres[0];
    let (lo, hi, segs) = if r_hi >= 0.25 {
        (c0 - 0.5, c0 + 0.5, vec![(c0 - 0.5, c0 + 0.5)])
    } else {
        let mut sorted = centres.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut segs: Vec<(f64, f64)> = Vec::new();
        for c in sorted {
            match segs.last_mut() {
                Some(last) if c - r_hi <= last.1 => last.1 = last.1.max(c + r_hi),
                _ => segs.push((c - r_hi, c + r_hi)),
            }
        }
        (f64::NEG_INFINITY, f64::INFINITY, segs)
    };
    let mut pts: Vec<f64> = Vec::new();
    for &c in centres {
        pts.push(c);
        let mut r = r_lo;
        while r < r_hi.min(0.5) {
            pts.push(c - r);
            pts.push(c + r);
            r *= 2.0;
        }
    }
    let mut total = 0.0;
    for (a, b) in segs {
        let mut cuts: Vec<f64> = pts.iter().copied().filter(|z| *z > a && *z < b && *z > lo && *z < hi).collect();
        cuts.push(a);
        cuts.push(b);
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        for w in cuts.windows(2) {
            total += gauss_legendre(w[0], w[1], q.panels_per_segment, &mut f);
        }
    }
    total
}

/// Evaluates the left side of `bound` across `scales` and fits its exponent.
///
/// For `SR1`, `I1`, `I2` the scales are `|x - y|` with `x = 1/2`,
/// `y = 1/2 + scale` and horizon `t`; for `TR` they are `t - s` at fixed `t`.
pub fn kernel_bound_check(
    cfg: &HeatKernelConfig,
    bound: BoundId,
    alpha: f64,
    t: f64,
    scales: &[f64],
    quad: &QuadratureConfig,
) -> Result<BoundReport> {
    cfg.validate()?;
    if matches!(bound, BoundId::I1 | BoundId::I2) && !(alpha > 1.0 / 3.0 && alpha < 0.5) {
        return Err(invalid(format!("alpha = {alpha} outside (1/3, 1/2)")));
    }
    if !(t > 0.0) {
        return Err(invalid("horizon must be positive"));
    }
    let mut rows = Vec::with_capacity(scales.len());
    for &d in scales {
        let lhs = bound_lhs(cfg, bound, alpha, t, d, quad)?;
        let rhs = d.powf(bound.power(alpha));
        rows.push(BoundRow { scale: d, lhs, rhs, ratio: if rhs > 0.0 { lhs / rhs } else { 0.0 } });
    }
    let worst_ratio = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let positive: Vec<&BoundRow> = rows.iter().filter(|r| r.scale > 0.0 && r.lhs > 0.0).collect();
    let fit = if positive.len() >= 2 {
        let xs: Vec<f64> = positive.iter().map(|r| r.scale).collect();
        let ys: Vec<f64> = positive.iter().map(|r| r.lhs).collect();
        Some(loglog_fit(&xs, &ys)?)
    } else {
        None
    };
    Ok(BoundReport { bound, rows, worst_ratio, fit })
}

/// Left-hand side of a single bound at scale `d`.
pub fn bound_lhs(
    cfg: &HeatKernelConfig,
    bound: BoundId,
    alpha: f64,
    t: f64,
    d: f64,
    quad: &QuadratureConfig,
) -> Result<f64> {
    if !(0.0..=0.5).contains(&d) {
        return Err(invalid(format!("scale {d} outside [0, 1/2]")));
    }
    if d == 0.0 {
        return Ok(0.0);
    }
    let x = 0.5;
    let kern = |tau: f64, z: f64| kernel_unchecked(cfg, tau, z);
    let value = match bound {
        BoundId::SR1 | BoundId::I1 | BoundId::I2 => {
            let y = x + d;
            dyadic_time_integral(t, d * d, quad, |tau| {
                let space = spatial_integral(tau, tau, &[x, y], quad, |z| {
                    let diff = kern(tau, y - z) - kern(tau, x - z);
                    let w = match bound {
                        BoundId::I2 => (x - z).abs().powf(2.0 * alpha),
                        _ => 1.0,
                    };
                    diff * diff * w
                });
                match bound {
                    BoundId::I1 => space * tau.powf(alpha),
                    _ => space,
                }
            })
        }
        BoundId::TR => {
            if d > t {
                return Err(invalid("temporal scale exceeds the horizon"));
            }
            let s = t - d;
            let first = dyadic_time_integral(s, d, quad, |r| {
                spatial_integral(r, r + d, &[x], quad, |z| {
                    let diff = kern(r + d, x - z) - kern(r, x - z);
                    diff * diff
                })
            });
            let second = dyadic_time_integral(d, d, quad, |r| {
                spatial_integral(r, r, &[x], quad, |z| {
                    let v = kern(r, x - z);
                    v * v
                })
            });
            first + second
        }
    };
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{holder_seminorm, SpatialGrid};
    use crate::noise::sample_holder_path;

    fn cfg() -> HeatKernelConfig {
        HeatKernelConfig::default()
    }

    fn grid(m: usize) -> SpatialGrid {
        SpatialGrid::new(m).unwrap()
    }

    #[test]
    fn kernel_has_unit_mass() {
        let m = 1024;
        for t in [1e-3, 0.01, 0.05, 0.1, 1.0] {
            let mass: f64 =
                (0..m).map(|i| heat_kernel(&cfg(), t, i as f64 / m as f64).unwrap()).sum::<f64>() / m as f64;
            assert!((mass - 1.0).abs() < 1e-10, "t = {t}: {mass}");
        }
    }

    #[test]
    fn kernel_is_symmetric() {
        for t in [0.003, 0.2] {
            for x in [0.125, 0.375, 0.3125, 0.0625] {
                let p = heat_kernel(&cfg(), t, x).unwrap();
                assert_eq!(p, heat_kernel(&cfg(), t, 1.0 - x).unwrap());
                assert_eq!(p, heat_kernel(&cfg(), t, -x).unwrap());
                assert_eq!(heat_kernel_dx(&cfg(), t, x).unwrap(), -heat_kernel_dx(&cfg(), t, -x).unwrap());
            }
        }
    }

    #[test]
    fn representations_agree() {
        let f = fourier_kernel(0.1, 0.3, 256);
        let r = reflection_kernel(0.1, 0.3, 4);
        for (a, b) in f.iter().zip(&r) {
            assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
        }
        let (f, r) = (fourier_kernel(0.02, 0.41, 256), reflection_kernel(0.02, 0.41, 4));
        assert!((f[0] - r[0]).abs() < 1e-12);
    }

    #[test]
    fn kernel_is_positive_and_rejects_nonpositive_time() {
        for t in [1e-4, 0.01, 0.03, 0.5, 2.0] {
            for k in 0..=20 {
                assert!(heat_kernel(&cfg(), t, k as f64 / 20.0).unwrap() > 0.0);
            }
        }
        assert!(heat_kernel(&cfg(), 0.0, 0.1).is_err());
        assert!(HeatKernelConfig { k_max: 10, ..cfg() }.validate().is_err());
    }

    #[test]
    fn semigroup_examples() {
        let g = grid(64);
        let f = Field::scalar_fn(g, |x| (x * 7.0).sin() * (2.0 * PI * x).cos());
        assert_eq!(semigroup_apply(0.0, &f).unwrap(), f);
        let c = Field::scalar_fn(g, |_| 0.75);
        let sc = semigroup_apply(0.3, &c).unwrap();
        assert!(sc.values().iter().all(|v| (v - 0.75).abs() < 1e-15));
        let s3 = Field::scalar_fn(g, |x| (6.0 * PI * x).sin());
        let out = semigroup_apply(0.01, &s3).unwrap();
        let decay = (-(6.0 * PI).powi(2) * 0.01).exp();
        for i in 0..=64 {
            assert!((out.get(i, 0) - decay * s3.get(i, 0)).abs() < 1e-12);
        }
        assert!(semigroup_apply(-1.0, &f).is_err());
    }

    #[test]
    fn semigroup_matches_kernel_convolution() {
        let m = 256;
        let g = grid(m);
        let f = Field::scalar_fn(g, |x| (2.0 * PI * x).cos() + 0.3 * (4.0 * PI * x).sin());
        let t = 0.004;
        let out = semigroup_apply(t, &f).unwrap();
        for i in [0, 31, 100] {
            let conv: f64 =
                (0..m).map(|j| heat_kernel(&cfg(), t, g.x(i) - g.x(j)).unwrap() * f.get(j, 0)).sum::<f64>() / m as f64;
            assert!((conv - out.get(i, 0)).abs() < 1e-10);
        }
    }

    #[test]
    fn semigroup_laws() {
        let g = grid(128);
        let f = sample_holder_path(g, 1, 0.4, 3, 1.0).unwrap().add(&Field::scalar_fn(g, |_| 0.2)).unwrap();
        let mean = |h: &Field| h.component(0)[..128].iter().sum::<f64>() / 128.0;
        for t in [1e-4, 0.01, 0.3] {
            let s = semigroup_apply(t, &f).unwrap();
            assert!((mean(&s) - mean(&f)).abs() < 1e-12);
            assert!(s.sup_norm() <= f.sup_norm());
        }
        let a = semigroup_apply(0.01, &semigroup_apply(0.02, &f).unwrap()).unwrap();
        let b = semigroup_apply(0.03, &f).unwrap();
        assert!(a.sub(&b).unwrap().sup_norm() < 1e-10);
    }

    #[test]
    fn smoothing_rate() {
        let m = 1024;
        let g = grid(m);
        let beta = 0.4;
        let f = sample_holder_path(g, 1, beta, 5, 1.0).unwrap();
        let mut sp = Spectral::new(m);
        let ts: Vec<f64> = (6..=12).map(|k| 2f64.powi(-k)).collect();
        let sizes: Vec<f64> = ts
            .iter()
            .map(|&t| {
                let s = sp.heat(t, &f);
                sp.derivative(&s).sup_norm()
            })
            .collect();
        let fit = loglog_fit(&ts, &sizes).unwrap();
        assert!(fit.slope >= (beta - 1.0) / 2.0 - 0.1, "{}", fit.slope);
        assert!(holder_seminorm(&f, beta).unwrap().is_finite());
    }

    #[test]
    fn scaling_split_reconstructs_kernel() {
        for t in [1.0, 0.1, 2f64.powi(-8)] {
            let s = kernel_scaling_split(&cfg(), t, 64).unwrap();
            for x in [0.0, 0.01, 0.2, 0.45] {
                let rebuilt = t.powf(-0.5) * s.f_at(&cfg(), x / t.sqrt());
                assert!((rebuilt - heat_kernel(&cfg(), t, x).unwrap()).abs() < 1e-10 * (1.0 + rebuilt));
            }
        }
        let one = kernel_scaling_split(&cfg(), 1.0, 64).unwrap();
        for (xi, f) in one.xi.iter().zip(&one.f) {
            assert_eq!(*f, heat_kernel(&cfg(), 1.0, *xi).unwrap());
        }
        assert!(kernel_scaling_split(&cfg(), 1.5, 64).is_err());
    }

    #[test]
    fn scaling_split_norms_stay_bounded() {
        let sizes: Vec<f64> = (0..=12)
            .map(|k| {
                let s = kernel_scaling_split(&cfg(), 2f64.powi(-k), 64).unwrap();
                s.f_norm_11 + s.g_norm_11
            })
            .collect();
        let (lo, hi) = sizes.iter().fold((f64::MAX, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
        assert!(hi.is_finite());
        assert!(hi / lo <= 4.0, "{lo} .. {hi}");
    }

    /// `∫₀ᵗ (2p̂_{2τ}(0) - 2p̂_{2τ}(d)) dτ` in closed form, using
    /// `Σ (1 - cos 2πkd)/k² = π²(d - d²)`.
    fn sr1_exact(t: f64, d: f64) -> f64 {
        let tail: f64 = (1..200)
            .map(|k| {
                let k = k as f64;
                (1.0 - (2.0 * PI * k * d).cos()) * (-8.0 * PI * PI * k * k * t).exp() / (k * k)
            })
            .sum();
        0.5 * (d - d * d) - tail / (2.0 * PI * PI)
    }

    #[test]
    fn sr1_matches_closed_form() {
        let q = QuadratureConfig::default();
        for (t, d) in [(0.5, 0.125), (0.5, 2f64.powi(-8)), (0.01, 0.05)] {
            let got = bound_lhs(&cfg(), BoundId::SR1, 0.4, t, d, &q).unwrap();
            let want = sr1_exact(t, d);
            assert!(((got - want) / want).abs() < 1e-3, "t={t} d={d}: {got} vs {want}");
        }
    }

    #[test]
    fn bounds_vanish_on_the_diagonal() {
        let q = QuadratureConfig::default();
        for b in [BoundId::SR1, BoundId::I1, BoundId::I2] {
            assert_eq!(bound_lhs(&cfg(), b, 0.4, 0.5, 0.0, &q).unwrap(), 0.0);
        }
    }

    #[test]
    fn sr1_exponent() {
        let scales: Vec<f64> = (3..=8).map(|k| 2f64.powi(-k)).collect();
        let r = kernel_bound_check(&cfg(), BoundId::SR1, 0.4, 0.5, &scales, &QuadratureConfig::default()).unwrap();
        let slope = r.fit.unwrap().slope;
        assert!((slope - 1.0).abs() <= 0.1, "{slope}");
    }

    #[test]
    fn i1_exponent() {
        let scales: Vec<f64> = (10..=16).map(|k| 2f64.powi(-k)).collect();
        let r = kernel_bound_check(&cfg(), BoundId::I1, 0.4, 0.25, &scales, &QuadratureConfig::default()).unwrap();
        let slope = r.fit.unwrap().slope;
        assert!((slope - 1.8).abs() <= 0.1, "{slope}");
        assert!(kernel_bound_check(&cfg(), BoundId::I1, 0.3, 0.25, &scales, &QuadratureConfig::default()).is_err());
    }
}
