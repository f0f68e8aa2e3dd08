//! The linear stochastic convolution `X`, its spatial lifts, general
//! convolutions `Ψ^θ` viewed as `X`-controlled paths, and stopping monitors.

use std::f64::consts::{PI, SQRT_2};
use std::sync::Arc;

use rustfft::num_complex::Complex64;

use crate::error::{invalid, mismatch, Error, Result};
use crate::grid::{
    holder_seminorm_with, ratio_between, Field, PairSampling, SpaceTimeField, SpatialGrid, TwoPointField,
};
use crate::noise::{mollify, spectral_normals, NoiseIncrement, NoiseSource, NoiseSpec};
use crate::roughcore::{lift_piecewise_linear, make_controlled, ControlledPath, RoughPath};
use crate::spectral::{heat_multiplier, Spectral};

/// How `X` is simulated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XMode {
    /// Mild Euler steps `X ← S(δt)(X + ΔW)` on the shared cell noise.
    Coupled,
    /// Exact Ornstein-Uhlenbeck updates per Fourier mode.
    Spectral,
}

/// Knobs for [`simulate_x_with`].
#[derive(Clone, Debug, PartialEq)]
pub struct SimOptions {
    /// Keep every `retain_stride`-th slice (must divide the step count).
    pub retain_stride: usize,
    /// Nodes whose values are recorded at every step.
    pub probes: Vec<usize>,
    /// Mollify each increment at this width (coupled mode only).
    pub eps: Option<f64>,
    /// First step; `X` starts from zero there.
    pub start_step: usize,
    /// Number of steps, defaulting to the rest of the horizon.
    pub steps: Option<usize>,
    /// Lift retained slices.
    pub lift: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { retain_stride: 1, probes: Vec::new(), eps: None, start_step: 0, steps: None, lift: true }
    }
}

/// `X` at the retained times together with the lift of every retained slice.
#[derive(Clone, Debug)]
pub struct GaussianField {
    field: SpaceTimeField,
    lifts: Vec<Arc<RoughPath>>,
    probes: Vec<(usize, Vec<f64>)>,
    start_step: usize,
    stride: usize,
    eps: Option<f64>,
}

impl GaussianField {
    /// The identically zero field over `steps` steps, with trivial lifts.
    /// Used when no noise enters, so no increments are drawn.
    pub fn zero(grid: SpatialGrid, n: usize, dt: f64, steps: usize, start_step: usize) -> Result<Self> {
        let zero = Field::zeros(grid, n);
        let lift = Arc::new(lift_piecewise_linear(&zero));
        let field = SpaceTimeField::new(dt, vec![zero; steps + 1])?;
        Ok(Self { field, lifts: vec![lift; steps + 1], probes: Vec::new(), start_step, stride: 1, eps: None })
    }

    pub fn field(&self) -> &SpaceTimeField {
        &self.field
    }

    pub fn slice(&self, l: usize) -> &Field {
        self.field.slice(l)
    }

    /// Lift of retained slice `l`; empty when lifting was switched off.
    pub fn lift(&self, l: usize) -> Option<&Arc<RoughPath>> {
        self.lifts.get(l)
    }

    pub fn lifts(&self) -> &[Arc<RoughPath>] {
        &self.lifts
    }

    /// Probe series `(node, values)` with `values[l * n + c]` at step `l`.
    pub fn probes(&self) -> &[(usize, Vec<f64>)] {
        &self.probes
    }

    pub fn start_step(&self) -> usize {
        self.start_step
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn eps(&self) -> Option<f64> {
        self.eps
    }
}

/// Applies `S(δt)` spectrally with cached multipliers.
pub(crate) struct MildStepper {
    spectral: Spectral,
    mult: Vec<f64>,
}

impl MildStepper {
    pub(crate) fn new(m: usize, dt: f64) -> Self {
        Self { spectral: Spectral::new(m), mult: (0..m).map(|q| heat_multiplier(m, q, dt)).collect() }
    }

    /// `S(δt)(state + forcing)` where `forcing` holds `m x dim` cell values.
    pub(crate) fn step(&mut self, state: &Field, forcing: &[f64]) -> Field {
        let (m, d) = (state.grid().m(), state.dim());
        let mut sum = state.clone();
        {
            let mut v = sum.periodic_mut();
            for (a, f) in v.iter_mut().zip(&forcing[..m * d]) {
                *a += f;
            }
        }
        let mult = &self.mult;
        self.spectral.apply(&sum, |q| Complex64::new(mult[q], 0.0))
    }
}

fn lift_all(slices: &[Field]) -> Vec<Arc<RoughPath>> {
    slices.iter().map(|s| Arc::new(lift_piecewise_linear(s))).collect()
}

fn step_range(spec: &NoiseSpec, opts: &SimOptions) -> Result<(usize, usize)> {
    let total = spec.steps();
    let start = opts.start_step;
    let steps = opts.steps.unwrap_or(total.saturating_sub(start));
    if steps == 0 || start + steps > total {
        return Err(invalid(format!("steps {start}..{} outside 0..{total}", start + steps)));
    }
    if opts.retain_stride == 0 || !steps.is_multiple_of(opts.retain_stride) {
        return Err(invalid(format!("stride {} does not divide {steps} steps", opts.retain_stride)));
    }
    if let Some(&p) = opts.probes.iter().find(|&&p| p > spec.m) {
        return Err(Error::OutOfRange(format!("probe node {p} beyond m = {}", spec.m)));
    }
    Ok((start, steps))
}

/// Increment of step `step`, mollified when `eps` is set.
pub(crate) fn forcing_increment(source: &NoiseSource, step: usize, eps: Option<f64>) -> Result<NoiseIncrement> {
    let inc = source.increment(step)?;
    match eps {
        Some(e) => mollify(&inc, e),
        None => Ok(inc),
    }
}

/// `X` for the full horizon with every slice retained and lifted.
pub fn simulate_x(spec: &NoiseSpec, mode: XMode) -> Result<GaussianField> {
    let source = NoiseSource::generated(*spec)?;
    simulate_x_with(&source, mode, &SimOptions::default())
}

/// `X` with explicit retention, probes, mollification and restart.
pub fn simulate_x_with(source: &NoiseSource, mode: XMode, opts: &SimOptions) -> Result<GaussianField> {
    let spec = *source.spec();
    let (start, steps) = step_range(&spec, opts)?;
    let (slices, probes) = match mode {
        XMode::Coupled => coupled(source, opts, start, steps)?,
        XMode::Spectral => {
            if opts.eps.is_some() {
                return Err(invalid("mollification is only available in coupled mode"));
            }
            spectral(&spec, opts, start, steps)
        }
    };
    let lifts = if opts.lift { lift_all(&slices) } else { Vec::new() };
    let field = SpaceTimeField::new(spec.dt * opts.retain_stride as f64, slices)?;
    Ok(GaussianField { field, lifts, probes, start_step: start, stride: opts.retain_stride, eps: opts.eps })
}

type Simulated = (Vec<Field>, Vec<(usize, Vec<f64>)>);

fn record_probes(probes: &mut [(usize, Vec<f64>)], f: &Field) {
    for (node, series) in probes.iter_mut() {
        series.extend_from_slice(f.at(*node));
    }
}

fn coupled(source: &NoiseSource, opts: &SimOptions, start: usize, steps: usize) -> Result<Simulated> {
    let spec = source.spec();
    let grid = spec.grid();
    let mut stepper = MildStepper::new(spec.m, spec.dt);
    let mut x = Field::zeros(grid, spec.n);
    let mut slices = vec![x.clone()];
    let mut probes: Vec<(usize, Vec<f64>)> = opts.probes.iter().map(|&p| (p, Vec::new())).collect();
    record_probes(&mut probes, &x);
    for l in 0..steps {
        let inc = forcing_increment(source, start + l, opts.eps)?;
        x = stepper.step(&x, &inc.values);
        record_probes(&mut probes, &x);
        if (l + 1) % opts.retain_stride == 0 {
            slices.push(x.clone());
        }
    }
    Ok((slices, probes))
}

/// Number of resolved Fourier modes `k = 1..=kmax` on `m` cells.
fn spectral_kmax(m: usize) -> usize {
    (m - 1) / 2
}

fn spectral(spec: &NoiseSpec, opts: &SimOptions, start: usize, steps: usize) -> Simulated {
    let (m, n) = (spec.m, spec.n);
    let grid = spec.grid();
    let kmax = spectral_kmax(m);
    let per = 1 + 2 * kmax;
    let mut dec = vec![0.0; kmax + 1];
    let mut sd = vec![0.0; kmax + 1];
    for k in 1..=kmax {
        let lam = (2.0 * PI * k as f64).powi(2);
        dec[k] = (-lam * spec.dt).exp();
        sd[k] = (-(-2.0 * lam * spec.dt).exp_m1() / (2.0 * lam)).sqrt();
    }
    let sd0 = spec.dt.sqrt();
    let mut coeff = vec![0.0; n * per];
    let mut z = vec![0.0; n * per];

    let tables: Vec<(Vec<f64>, Vec<f64>)> = opts
        .probes
        .iter()
        .map(|&p| {
            let x = grid.x(p);
            (0..=kmax)
                .map(|k| {
                    let (s, c) = (2.0 * PI * k as f64 * x).sin_cos();
                    (SQRT_2 * c, SQRT_2 * s)
                })
                .unzip()
        })
        .collect();
    let mut probes: Vec<(usize, Vec<f64>)> = opts.probes.iter().map(|&p| (p, Vec::new())).collect();
    let probe_values = |coeff: &[f64], probes: &mut [(usize, Vec<f64>)]| {
        for ((_, series), (ct, st)) in probes.iter_mut().zip(&tables) {
            for c in 0..n {
                let a = &coeff[c * per..(c + 1) * per];
                let mut v = a[0];
                for k in 1..=kmax {
                    v += a[2 * k - 1] * ct[k] + a[2 * k] * st[k];
                }
                series.push(v);
            }
        }
    };

    let mut sp = Spectral::new(m);
    let mut buf = vec![Complex64::new(0.0, 0.0); m];
    let mut assemble = |coeff: &[f64]| -> Field {
        let mut out = Field::zeros(grid, n);
        {
            let mut vals = out.periodic_mut();
            for c in 0..n {
                let a = &coeff[c * per..(c + 1) * per];
                buf.fill(Complex64::new(0.0, 0.0));
                buf[0] = Complex64::new(m as f64 * a[0], 0.0);
                for k in 1..=kmax {
                    let z = Complex64::new(a[2 * k - 1], -a[2 * k]) * (m as f64 / SQRT_2);
                    buf[k] = z;
                    buf[m - k] = z.conj();
                }
                sp.inverse(&mut buf);
                for i in 0..m {
                    vals[i * n + c] = buf[i].re;
                }
            }
        }
        out
    };

    let mut slices = vec![Field::zeros(grid, n)];
    probe_values(&coeff, &mut probes);
    for l in 0..steps {
        spectral_normals(spec.seed, (start + l) as u64, &mut z);
        for c in 0..n {
            let a = &mut coeff[c * per..(c + 1) * per];
            let zc = &z[c * per..(c + 1) * per];
            a[0] += sd0 * zc[0];
            for k in 1..=kmax {
                a[2 * k - 1] = dec[k] * a[2 * k - 1] + sd[k] * zc[2 * k - 1];
                a[2 * k] = dec[k] * a[2 * k] + sd[k] * zc[2 * k];
            }
        }
        probe_values(&coeff, &mut probes);
        if (l + 1) % opts.retain_stride == 0 {
            slices.push(assemble(&coeff));
        }
    }
    (slices, probes)
}

/// `Ψ^θ` with the values of `θ` it was driven by and the reference `X`.
#[derive(Clone, Debug)]
pub struct ControlledConvolution {
    psi: SpaceTimeField,
    thetavals: SpaceTimeField,
    reference: Arc<GaussianField>,
}

impl ControlledConvolution {
    /// Reassembles a convolution from stored parts.
    pub fn from_parts(psi: SpaceTimeField, thetavals: SpaceTimeField, reference: Arc<GaussianField>) -> Result<Self> {
        let n = psi.dim();
        if thetavals.dim() != n * n || thetavals.steps() != psi.steps() || reference.field().steps() != psi.steps() {
            return Err(mismatch("Ψ, θ and X differ in shape"));
        }
        Ok(Self { psi, thetavals, reference })
    }

    pub fn psi(&self) -> &SpaceTimeField {
        &self.psi
    }

    pub fn thetavals(&self) -> &SpaceTimeField {
        &self.thetavals
    }

    pub fn reference(&self) -> &Arc<GaussianField> {
        &self.reference
    }

    /// `(Ψ(t_l), θ(t_l))` as a path controlled by the lift of `X(t_l)`.
    pub fn controlled(&self, l: usize) -> Result<ControlledPath> {
        let lift = self.reference.lift(l).ok_or_else(|| Error::Missing(format!("no lift of X at slice {l}")))?;
        make_controlled(self.psi.slice(l).clone(), self.thetavals.slice(l).clone(), lift.clone())
    }

    /// `R^θ(t_l)`.
    pub fn remainder(&self, l: usize) -> Result<TwoPointField> {
        Ok(self.controlled(l)?.remainder())
    }

    pub fn remainder_norm(&self, l: usize, gamma: f64, sampling: PairSampling) -> Result<f64> {
        Ok(self.controlled(l)?.remainder_norm(gamma, sampling))
    }

    pub fn with_psi(&self, psi: SpaceTimeField) -> Result<ControlledConvolution> {
        if psi.steps() != self.psi.steps() || psi.grid() != self.psi.grid() || psi.dim() != self.psi.dim() {
            return Err(mismatch("replacement Ψ differs in shape"));
        }
        Ok(Self { psi, thetavals: self.thetavals.clone(), reference: self.reference.clone() })
    }
}

/// `R(i,j) = δΨ(i,j) - θ(x_i) δX(i,j)`.
pub fn remainder(psi: &Field, theta_t: &Field, x_t: &Field) -> Result<TwoPointField> {
    let lift = Arc::new(lift_piecewise_linear(x_t));
    Ok(make_controlled(psi.clone(), theta_t.clone(), lift)?.remainder())
}

/// `Ψ(t+δt) = S(δt)(Ψ(t) + θ(t)ΔW)` on the increments that drove `x`.
pub fn stoch_conv(
    theta: &SpaceTimeField,
    source: &NoiseSource,
    x: Arc<GaussianField>,
) -> Result<ControlledConvolution> {
    if x.eps().is_some() {
        return Err(invalid("reference X is mollified; use stoch_conv_mollified"));
    }
    convolve(theta, source, x, None)
}

/// As [`stoch_conv`] with every increment mollified at width `eps`; `x`
/// must be the matching `X_ε`.
pub fn stoch_conv_mollified(
    theta: &SpaceTimeField,
    source: &NoiseSource,
    eps: f64,
    x: Arc<GaussianField>,
) -> Result<ControlledConvolution> {
    if x.eps() != Some(eps) {
        return Err(invalid(format!("reference X has eps {:?}, expected {eps}", x.eps())));
    }
    convolve(theta, source, x, Some(eps))
}

fn convolve(
    theta: &SpaceTimeField,
    source: &NoiseSource,
    x: Arc<GaussianField>,
    eps: Option<f64>,
) -> Result<ControlledConvolution> {
    let spec = source.spec();
    let n = spec.n;
    let grid = spec.grid();
    let xf = x.field();
    if x.stride() != 1 {
        return Err(invalid("reference X must retain every step"));
    }
    if theta.grid() != grid || xf.grid() != grid {
        return Err(mismatch("θ, X and the noise live on different grids"));
    }
    if theta.dim() != n * n || theta.steps() != xf.steps() {
        return Err(mismatch(format!(
            "θ has dim {} and {} steps, expected {} and {}",
            theta.dim(),
            theta.steps(),
            n * n,
            xf.steps()
        )));
    }
    let m = grid.m();
    let start = x.start_step();
    let mut slices = Vec::with_capacity(theta.steps() + 1);
    let mut psi = Field::zeros(grid, n);
    slices.push(psi.clone());
    if theta.slices()[..theta.steps()].iter().all(|s| s.values().iter().all(|v| *v == 0.0)) {
        slices.resize(theta.steps() + 1, psi);
    } else {
        let mut stepper = MildStepper::new(m, spec.dt);
        let mut forcing = vec![0.0; m * n];
        for l in 0..theta.steps() {
            let inc = forcing_increment(source, start + l, eps)?;
            let th = theta.slice(l);
            for i in 0..m {
                let t = th.at(i);
                for r in 0..n {
                    let mut s = 0.0;
                    for c in 0..n {
                        s += t[r * n + c] * inc.at(i, c);
                    }
                    forcing[i * n + r] = s;
                }
            }
            psi = stepper.step(&psi, &forcing);
            slices.push(psi.clone());
        }
    }
    Ok(ControlledConvolution { psi: SpaceTimeField::new(spec.dt, slices)?, thetavals: theta.clone(), reference: x })
}

/// Stopping thresholds `K₁, K₂, K₃`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Thresholds {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
}

/// Running suprema of the three monitored quantities and the first
/// exceedance time.
#[derive(Clone, Debug, PartialEq)]
pub struct StoppingMonitor {
    pub thresholds: Thresholds,
    pub alpha: f64,
    pub sampling: PairSampling,
    /// `sup_s` parabolic increment ratio of `X` plus `sup_s |𝕏(s)|_{2α}`.
    pub sup_x: f64,
    pub sup_ratio: f64,
    pub sup_area: f64,
    /// `sup_s |Ψ(s)|_{C^α}`.
    pub sup_psi: f64,
    /// `sup_s |R(s)|_{2α}`.
    pub sup_r: f64,
    pub triggered_at: Option<f64>,
    last_time: Option<f64>,
}

/// Data of one time slice for [`monitor_update`].
pub struct MonitorSlice<'a> {
    pub time: f64,
    /// Retained index into `x`.
    pub index: usize,
    pub x: &'a GaussianField,
    pub psi: Option<&'a ControlledConvolution>,
}

impl StoppingMonitor {
    pub fn new(thresholds: Thresholds, alpha: f64, sampling: PairSampling) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 0.5) {
            return Err(invalid(format!("alpha = {alpha} outside (0, 1/2)")));
        }
        if [thresholds.k1, thresholds.k2, thresholds.k3].iter().any(|k| !(*k >= 0.0)) {
            return Err(invalid("thresholds must be nonnegative"));
        }
        Ok(Self {
            thresholds,
            alpha,
            sampling,
            sup_x: 0.0,
            sup_ratio: 0.0,
            sup_area: 0.0,
            sup_psi: 0.0,
            sup_r: 0.0,
            triggered_at: None,
            last_time: None,
        })
    }

    pub fn triggered(&self) -> bool {
        self.triggered_at.is_some()
    }
}

/// Folds one slice into the running suprema.
pub fn monitor_update(mut mon: StoppingMonitor, slice: &MonitorSlice<'_>) -> Result<StoppingMonitor> {
    if let Some(last) = mon.last_time {
        if !(slice.time > last) {
            return Err(invalid(format!("slice at t = {} arrives after t = {last}", slice.time)));
        }
    }
    mon.last_time = Some(slice.time);
    let (alpha, sampling) = (mon.alpha, mon.sampling);
    let xf = slice.x.field();
    let l = slice.index;
    let cur = xf.slice(l);
    let mut ratio = ratio_between(cur, cur, 0.0, alpha, sampling);
    let mut d = 1;
    while d <= l {
        ratio = ratio.max(ratio_between(xf.slice(l - d), cur, d as f64 * xf.dt(), alpha, sampling));
        d *= 2;
    }
    if l > 0 && (d / 2) != l {
        ratio = ratio.max(ratio_between(xf.slice(0), cur, l as f64 * xf.dt(), alpha, sampling));
    }
    mon.sup_ratio = mon.sup_ratio.max(ratio);
    if let Some(lift) = slice.x.lift(l) {
        mon.sup_area = mon.sup_area.max(lift.level2_norm(2.0 * alpha, sampling));
    }
    mon.sup_x = mon.sup_ratio + mon.sup_area;
    if let Some(psi) = slice.psi {
        let p = psi.psi().slice(l);
        mon.sup_psi = mon.sup_psi.max(p.sup_norm() + holder_seminorm_with(p, alpha, sampling)?);
        mon.sup_r = mon.sup_r.max(psi.remainder_norm(l, 2.0 * alpha, sampling)?);
    }
    let th = mon.thresholds;
    if mon.triggered_at.is_none() && (mon.sup_x > th.k1 || mon.sup_psi > th.k2 || mon.sup_r > th.k3) {
        mon.triggered_at = Some(slice.time);
    }
    Ok(mon)
}

/// Restarted field plus the propagated initial slice,
/// `X^{t₀}(t) + S(t - t₀) X(t₀)`, for comparison with the unrestarted `X`.
pub fn restart_sum(restarted: &GaussianField, initial: &Field, l: usize) -> Result<Field> {
    let f = restarted.field();
    if initial.grid() != f.grid() {
        return Err(mismatch("initial slice on another grid"));
    }
    let mut sp = Spectral::new(f.grid().m());
    sp.heat(f.time(l), initial).add(f.slice(l))
}

/// Grid helper shared with tests: `m` resolved modes of the spectral mode.
pub fn spectral_mode_count(grid: SpatialGrid) -> usize {
    spectral_kmax(grid.m())
}
