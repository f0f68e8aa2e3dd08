//! The two-level fixed point for `du = (Δu + g(u)∂ₓu) dt + θ(u) dW`.
//!
//! The solution is split as `u = U + Ψ + v` with `U(t) = S(t)u₀`, the
//! stochastic convolution `Ψ = Ψ^{θ(u)}` and a remainder `v` that is `C¹` in
//! space. The inner map `G` produces `v` from `Ψ`; the outer Picard map
//! rebuilds `Ψ` from `θ(u)` on a frozen noise realisation.
//!
//! `v` is advanced in Fourier space with an exponential integrator: on each
//! step the forcing is frozen at the left endpoint and integrated exactly
//! against `e^{-λ(t-s)}`. The rough part `∫ p_{t-s}(x-y) g(u) d_yΨ` enters
//! the forcing as a density whose cell values are the compensated terms
//! `g(u_j)δΨ_j + Y'_j 𝕏_j Ψ'_jᵀ`, divided by `h`.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Error, Result};
use crate::grid::{holder_seminorm_with, parabolic_holder_with, Field, PairSampling, SpaceTimeField, SpatialGrid};
use crate::models::{GFlat, GModel, ThetaModel};
use crate::noise::{sample_holder_path, NoiseSource, NoiseSpec};
use crate::roughcore::{
    compose_smooth, make_controlled, modify_levy_area, rough_integral_total, weight_controlled, ControlledPath,
    RoughPath,
};
use crate::spectral::{derivative_multiplier, laplace_eigenvalue, phi1, Spectral};
use crate::stochconv::{
    forcing_increment, monitor_update, simulate_x_with, stoch_conv, stoch_conv_mollified, ControlledConvolution,
    GaussianField, MonitorSlice, SimOptions, StoppingMonitor, Thresholds, XMode,
};

/// Initial data `u₀`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialData {
    Zero,
    Constant {
        value: f64,
    },
    /// `amplitude · sin(2πkx + c)` in component `c`.
    Fourier {
        amplitude: f64,
        k: u32,
    },
    /// A random `β`-Hölder path.
    Holder {
        beta: f64,
        amplitude: f64,
        seed: u64,
    },
    /// Explicit node values `0..m`, `m x n` row-major.
    Values {
        values: Vec<f64>,
    },
}

impl InitialData {
    pub fn build(&self, grid: SpatialGrid, n: usize) -> Result<Field> {
        match self {
            InitialData::Zero => Ok(Field::zeros(grid, n)),
            InitialData::Constant { value } => Ok(Field::from_fn(grid, n, |_, o| o.fill(*value))),
            InitialData::Fourier { amplitude, k } => Ok(Field::from_fn(grid, n, |x, o| {
                for (c, v) in o.iter_mut().enumerate() {
                    *v = amplitude * (2.0 * std::f64::consts::PI * *k as f64 * x + c as f64).sin();
                }
            })),
            InitialData::Holder { beta, amplitude, seed } => sample_holder_path(grid, n, *beta, *seed, *amplitude),
            InitialData::Values { values } => Field::from_periodic(grid, n, values.clone()),
        }
    }
}

/// Stopping and cutoff levels `K₁..K₅`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Cutoffs {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    /// Overrides `K₅ = C·K₄ + K₂ + K₃`.
    pub k5: Option<f64>,
    pub c: f64,
    /// Apply `χ_{K₂}` to `Ψ`; the monitors run either way.
    pub enabled: bool,
}

impl Default for Cutoffs {
    fn default() -> Self {
        Self { k1: 10.0, k2: 10.0, k3: 10.0, k4: 10.0, k5: None, c: 1.0, enabled: true }
    }
}

impl Cutoffs {
    pub fn k5(&self) -> f64 {
        self.k5.unwrap_or(self.c * self.k4 + self.k2 + self.k3)
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds { k1: self.k1, k2: self.k2, k3: self.k3 }
    }
}

/// Everything that determines one solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub n: usize,
    pub g: GModel,
    pub theta: ThetaModel,
    pub u0: InitialData,
    pub alpha: f64,
    pub beta: f64,
    pub m: usize,
    pub dt: f64,
    pub horizon: f64,
    pub cutoffs: Cutoffs,
    /// Inner Picard tolerance in the grid `C¹` norm.
    pub picard_tol: f64,
    pub max_iters: usize,
    /// Outer Picard tolerance in the grid parabolic norm.
    pub outer_tol: f64,
    pub max_outer: usize,
    pub seed: u64,
    pub eps: Option<f64>,
    /// `a` in `𝕏 ↦ 𝕏 + (y - x)a`, `n x n` row-major.
    pub area_modifier: Option<Vec<f64>>,
    /// Adds the reaction forcing `Σ ∂_l g_{ik}(u) (θ a θᵀ)_{lk}` for this `a`.
    pub reaction_correction: Option<Vec<f64>>,
    /// Initial number of subintervals.
    pub chunks: usize,
    pub max_steps: usize,
    pub sampling: PairSampling,
    /// Noise replay file read instead of generating increments.
    pub replay: Option<String>,
    /// Retained slices dumped as CSV are every `dump_every`-th (0: final only).
    pub dump_every: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            n: 1,
            g: GModel::Sin,
            theta: ThetaModel::InvSqrt,
            u0: InitialData::Holder { beta: 0.45, amplitude: 0.5, seed: 7 },
            alpha: 0.4,
            beta: 0.45,
            m: 256,
            dt: 1e-4,
            horizon: 0.1,
            cutoffs: Cutoffs::default(),
            picard_tol: 1e-9,
            max_iters: 60,
            outer_tol: 1e-7,
            max_outer: 30,
            seed: 0,
            eps: None,
            area_modifier: None,
            reaction_correction: None,
            chunks: 1,
            max_steps: 4096,
            sampling: PairSampling::Dyadic,
            replay: None,
            dump_every: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let third = 1.0 / 3.0;
        if !(self.alpha > third && self.alpha < self.beta && self.beta < 0.5) {
            return Err(invalid(format!("need 1/3 < alpha < beta < 1/2, got {} and {}", self.alpha, self.beta)));
        }
        if self.n == 0 || self.m < 4 {
            return Err(invalid(format!("n = {}, m = {} too small", self.n, self.m)));
        }
        if let Some(d) = self.g.required_dim().filter(|d| *d != self.n) {
            return Err(mismatch(format!("g needs n = {d}, config has n = {}", self.n)));
        }
        if matches!(self.theta, ThetaModel::SinBump { .. }) && self.n != 1 {
            return Err(mismatch("sin_bump theta is scalar"));
        }
        let spec = self.noise_spec()?;
        if spec.steps() > self.max_steps {
            return Err(invalid(format!("{} steps exceed the cap {}", spec.steps(), self.max_steps)));
        }
        let c = &self.cutoffs;
        if [c.k1, c.k2, c.k3, c.k4, c.k5()].iter().any(|k| !(*k > 0.0)) {
            return Err(invalid("cutoff levels must be positive"));
        }
        for a in [&self.area_modifier, &self.reaction_correction].into_iter().flatten() {
            if a.len() != self.n * self.n {
                return Err(mismatch(format!("modifier needs {} entries", self.n * self.n)));
            }
        }
        if let Some(e) = self.eps {
            if !(e > 0.0) {
                return Err(invalid(format!("eps = {e} must be positive")));
            }
        }
        if !(self.picard_tol > 0.0 && self.outer_tol > 0.0) || self.max_iters == 0 || self.max_outer == 0 {
            return Err(invalid("tolerances and iteration caps must be positive"));
        }
        if self.chunks == 0 || self.chunks > spec.steps() {
            return Err(invalid(format!("chunks = {} outside 1..={}", self.chunks, spec.steps())));
        }
        Ok(())
    }

    pub fn noise_spec(&self) -> Result<NoiseSpec> {
        NoiseSpec::new(self.n, self.m, self.dt, self.seed, self.horizon)
    }

    pub fn grid(&self) -> Result<SpatialGrid> {
        SpatialGrid::new(self.m)
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }
}

/// `χ_K(x) = 1` for `x ≤ K`, `(K/x)(2 - K/x)` beyond.
pub fn cutoff_chi(x: f64, k: f64) -> Result<f64> {
    if !(k > 0.0) {
        return Err(invalid(format!("cutoff level {k} must be positive")));
    }
    if x <= k {
        return Ok(1.0);
    }
    let s = k / x;
    Ok(s * (2.0 - s))
}

/// `v` and its spectral derivative at every step, plus the Picard history.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerState {
    pub v: SpaceTimeField,
    pub dv: SpaceTimeField,
    pub history: Vec<f64>,
    pub diagnostics: SweepDiagnostics,
}

impl InnerState {
    pub fn zeros(grid: SpatialGrid, n: usize, dt: f64, steps: usize) -> Result<Self> {
        let z = SpaceTimeField::new(dt, vec![Field::zeros(grid, n); steps + 1])?;
        Ok(Self { v: z.clone(), dv: z, history: Vec::new(), diagnostics: SweepDiagnostics::default() })
    }

    /// `sup_t (‖v‖₀ + ‖∂ₓv‖₀)`.
    pub fn c1_norm(&self) -> f64 {
        self.v.slices().iter().zip(self.dv.slices()).map(|(a, b)| a.sup_norm() + b.sup_norm()).fold(0.0, f64::max)
    }

    /// `sup_t (‖v - w‖₀ + ‖∂ₓv - ∂ₓw‖₀)`.
    pub fn c1_distance(&self, other: &InnerState) -> Result<f64> {
        let mut best = 0.0f64;
        for l in 0..=self.v.steps() {
            let a = self.v.slice(l).sub(other.v.slice(l))?.sup_norm();
            let b = self.dv.slice(l).sub(other.dv.slice(l))?.sup_norm();
            best = best.max(a + b);
        }
        Ok(best)
    }
}

/// `L¹` sizes of the forcing pieces accumulated over one sweep.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepDiagnostics {
    pub smooth: f64,
    pub first_order: f64,
    pub area: f64,
}

impl SweepDiagnostics {
    /// Share of the compensation term in the rough forcing.
    pub fn area_share(&self) -> f64 {
        let total = self.first_order + self.area;
        if total > 0.0 {
            self.area / total
        } else {
            0.0
        }
    }
}

/// Slice data read by the inner map.
struct GContext<'a> {
    cfg: &'a SolverConfig,
    big_u: &'a SpaceTimeField,
    du: Vec<Field>,
    psi: &'a SpaceTimeField,
    theta: &'a SpaceTimeField,
    chi: Vec<f64>,
    /// Per slice: `m` cells of `n x n` iterated integrals (possibly modified).
    cells: Vec<Vec<f64>>,
    rough: bool,
}

fn cutoff_factors(psi: &ControlledConvolution, cfg: &SolverConfig) -> Result<Vec<f64>> {
    let steps = psi.psi().steps();
    if !cfg.cutoffs.enabled {
        return Ok(vec![1.0; steps + 1]);
    }
    (0..=steps)
        .map(|l| cutoff_chi(psi.controlled(l)?.controlled_norm(cfg.alpha, cfg.sampling)?, cfg.cutoffs.k2))
        .collect()
}

fn modified_lift(lift: &RoughPath, cfg: &SolverConfig) -> Result<RoughPath> {
    match &cfg.area_modifier {
        Some(a) => modify_levy_area(lift, a),
        None => Ok(lift.clone()),
    }
}

impl<'a> GContext<'a> {
    fn new(psi: &'a ControlledConvolution, big_u: &'a SpaceTimeField, cfg: &'a SolverConfig) -> Result<Self> {
        let p = psi.psi();
        if big_u.steps() != p.steps() || big_u.grid() != p.grid() || big_u.dim() != p.dim() {
            return Err(mismatch("U and Ψ differ in shape"));
        }
        let mut sp = Spectral::new(p.grid().m());
        let du = big_u.slices().iter().map(|s| sp.derivative(s)).collect();
        let theta = psi.thetavals();
        let rough = !theta.slices().iter().all(|s| s.values().iter().all(|v| *v == 0.0));
        let (chi, cells) = if rough {
            let chi = cutoff_factors(psi, cfg)?;
            let x = psi.reference();
            let cells = (0..=p.steps())
                .map(|l| {
                    let lift = x.lift(l).ok_or_else(|| Error::Missing(format!("no lift of X at slice {l}")))?;
                    match &cfg.area_modifier {
                        Some(a) => Ok(modify_levy_area(lift, a)?.cells()),
                        None => Ok(lift.cells()),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            (chi, cells)
        } else {
            (vec![1.0; p.steps() + 1], Vec::new())
        };
        Ok(Self { cfg, big_u, du, psi: p, theta, chi, cells, rough })
    }

    fn steps(&self) -> usize {
        self.psi.steps()
    }

    /// `U + χΨ + v` at slice `l`.
    fn u_at(&self, l: usize, v: &Field) -> Field {
        let (m, n) = (v.grid().m(), v.dim());
        let chi = self.chi[l];
        let (bu, ps) = (self.big_u.slice(l), self.psi.slice(l));
        let vals: Vec<f64> = (0..m * n).map(|e| (bu.values()[e] + chi * ps.values()[e]) + v.values()[e]).collect();
        Field::from_periodic(v.grid(), n, vals).expect("shape")
    }
}

/// `θ a θᵀ` contracted with `∂g`: `f_i = Σ_{k,l} ∂_l g_{ik}(u) (θ a θᵀ)_{lk}`.
pub fn reaction_forcing(g: &GModel, theta: &[f64], a: &[f64], u: &[f64]) -> Vec<f64> {
    let n = u.len();
    let mut jac = vec![0.0; n * n * n];
    g.jacobian(u, &mut jac);
    let mut ta = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            ta[r * n + c] =
                (0..n).map(|p| (0..n).map(|q| theta[r * n + p] * a[p * n + q] * theta[c * n + q]).sum::<f64>()).sum();
        }
    }
    (0..n)
        .map(|i| {
            let mut s = 0.0;
            for k in 0..n {
                for l in 0..n {
                    s += jac[(i * n + k) * n + l] * ta[l * n + k];
                }
            }
            s
        })
        .collect()
}

/// One application of `G`: the forcing is evaluated along `u = U + χΨ + v_in`.
fn sweep(ctx: &GContext<'_>, v_in: &InnerState) -> Result<InnerState> {
    let cfg = ctx.cfg;
    let grid = ctx.psi.grid();
    let (m, n) = (grid.m(), ctx.psi.dim());
    let (h, dt) = (grid.h(), ctx.psi.dt());
    let steps = ctx.steps();
    if v_in.v.steps() != steps || v_in.v.grid() != grid || v_in.v.dim() != n {
        return Err(mismatch("inner state differs in shape from Ψ"));
    }
    let mut out = InnerState::zeros(grid, n, dt, steps)?;
    if cfg.g.is_zero() {
        return Ok(out);
    }
    let mut sp = Spectral::new(m);
    let decay: Vec<f64> = (0..m).map(|q| (-laplace_eigenvalue(m, q) * dt).exp()).collect();
    let weight: Vec<f64> = (0..m).map(|q| phi1(laplace_eigenvalue(m, q), dt)).collect();
    let dmult: Vec<Complex64> = (0..m).map(|q| derivative_multiplier(m, q)).collect();
    let mut dhat = vec![Complex64::new(0.0, 0.0); m * n];
    let mut buf = vec![Complex64::new(0.0, 0.0); m];
    let mut forcing = vec![0.0; m * n];
    let (mut gm, mut jac) = (vec![0.0; n * n], vec![0.0; n * n * n]);
    let mut yp = vec![0.0; n * n * n];
    let mut thk = vec![0.0; n * n];
    let mut diag = SweepDiagnostics::default();
    let mut vs = Vec::with_capacity(steps + 1);
    let mut dvs = Vec::with_capacity(steps + 1);
    vs.push(Field::zeros(grid, n));
    dvs.push(Field::zeros(grid, n));

    for l in 0..steps {
        let vl = v_in.v.slice(l);
        let dvl = v_in.dv.slice(l);
        let u = ctx.u_at(l, vl);
        let (dul, psl, thl) = (&ctx.du[l], ctx.psi.slice(l), ctx.theta.slice(l));
        let chi = ctx.chi[l];
        forcing.fill(0.0);
        for j in 0..m {
            let uj = u.at(j);
            cfg.g.eval(uj, &mut gm);
            for i in 0..n {
                let s: f64 = (0..n).map(|k| gm[i * n + k] * (dvl.get(j, k) + dul.get(j, k))).sum();
                forcing[j * n + i] = s;
                diag.smooth += s.abs() * h * dt;
            }
            if !ctx.rough {
                continue;
            }
            cfg.g.jacobian(uj, &mut jac);
            for e in 0..n * n {
                thk[e] = chi * thl.at(j)[e];
            }
            // Y'_{(ik), p} = Σ_q ∂_q g_{ik} θK_{q p}
            for ik in 0..n * n {
                for p in 0..n {
                    yp[ik * n + p] = (0..n).map(|q| jac[ik * n + q] * thk[q * n + p]).sum();
                }
            }
            let cell = &ctx.cells[l][j * n * n..(j + 1) * n * n];
            for i in 0..n {
                let mut first = 0.0;
                let mut area = 0.0;
                for k in 0..n {
                    first += gm[i * n + k] * chi * (psl.get(j + 1, k) - psl.get(j, k));
                    for p in 0..n {
                        for q in 0..n {
                            area += yp[(i * n + k) * n + p] * cell[p * n + q] * thk[k * n + q];
                        }
                    }
                }
                forcing[j * n + i] += (first + area) / h;
                diag.first_order += first.abs() * dt;
                diag.area += area.abs() * dt;
            }
            if let Some(a) = &cfg.reaction_correction {
                let f = reaction_forcing(&cfg.g, &thk, a, uj);
                for i in 0..n {
                    forcing[j * n + i] += f[i];
                }
            }
        }
        let mut v_next = Field::zeros(grid, n);
        let mut dv_next = Field::zeros(grid, n);
        {
            let mut vv = v_next.periodic_mut();
            let mut dd = dv_next.periodic_mut();
            for c in 0..n {
                for j in 0..m {
                    buf[j] = Complex64::new(forcing[j * n + c], 0.0);
                }
                sp.forward(&mut buf);
                let d = &mut dhat[c * m..(c + 1) * m];
                for q in 0..m {
                    d[q] = d[q] * decay[q] + buf[q] * weight[q];
                    buf[q] = d[q] + Complex64::i() * dmult[q] * d[q];
                }
                sp.inverse(&mut buf);
                for j in 0..m {
                    vv[j * n + c] = buf[j].re;
                    dd[j * n + c] = buf[j].im;
                }
            }
        }
        vs.push(v_next);
        dvs.push(dv_next);
    }
    out.v = SpaceTimeField::new(dt, vs)?;
    out.dv = SpaceTimeField::new(dt, dvs)?;
    out.diagnostics = diag;
    Ok(out)
}

/// `G_T(v)` for `v` on the same time grid as `psi`.
pub fn apply_g(
    v: &InnerState,
    psi: &ControlledConvolution,
    big_u: &SpaceTimeField,
    cfg: &SolverConfig,
) -> Result<InnerState> {
    let ctx = GContext::new(psi, big_u, cfg)?;
    sweep(&ctx, v)
}

fn fixed_point_in(ctx: &GContext<'_>) -> Result<InnerState> {
    let cfg = ctx.cfg;
    let grid = ctx.psi.grid();
    let mut v = InnerState::zeros(grid, ctx.psi.dim(), ctx.psi.dt(), ctx.steps())?;
    let mut history = Vec::new();
    for _ in 0..cfg.max_iters {
        let next = sweep(ctx, &v)?;
        let r = next.c1_distance(&v)?;
        history.push(r);
        v = next;
        if !r.is_finite() {
            break;
        }
        if r <= cfg.picard_tol {
            v.history = history;
            return Ok(v);
        }
    }
    Err(Error::NonConvergence { history })
}

/// Picard iteration of `G` from `v = 0`.
pub fn inner_fixed_point(
    psi: &ControlledConvolution,
    big_u: &SpaceTimeField,
    cfg: &SolverConfig,
) -> Result<InnerState> {
    let ctx = GContext::new(psi, big_u, cfg)?;
    fixed_point_in(&ctx)
}

/// Iteration counts of one subinterval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkIterations {
    pub start_step: usize,
    pub steps: usize,
    pub outer: usize,
    pub inner: Vec<usize>,
    pub outer_history: Vec<f64>,
}

/// The solution with all parts of its decomposition.
#[derive(Clone, Debug)]
pub struct SolutionBundle {
    pub config: SolverConfig,
    pub u: SpaceTimeField,
    /// `S(t - t₀)u(t₀)` on each subinterval.
    pub big_u: SpaceTimeField,
    /// Reference `X`, restarted at every subinterval start.
    pub x: SpaceTimeField,
    /// Lift used as reference for `u` at each slice (modified when configured).
    pub lifts: Vec<Arc<RoughPath>>,
    pub psi: SpaceTimeField,
    /// `θ` values that drove `Ψ`.
    pub thetavals: SpaceTimeField,
    /// Gubinelli derivative `χθ` of `u` at each slice.
    pub derivative: SpaceTimeField,
    pub v: InnerState,
    pub monitor: StoppingMonitor,
    pub iterations: Vec<ChunkIterations>,
    /// Outer residual histories, concatenated.
    pub residuals: Vec<f64>,
    /// First time a stopping threshold (including `K₄` for `u`) is exceeded.
    pub triggered_at: Option<f64>,
    /// Slices `0..=valid_steps` precede any trigger.
    pub valid_steps: usize,
    pub sup_u: f64,
    pub diagnostics: SweepDiagnostics,
    pub noise: Option<NoiseSource>,
}

struct ChunkResult {
    u: Vec<Field>,
    big_u: Vec<Field>,
    x: Arc<GaussianField>,
    lifts: Vec<Arc<RoughPath>>,
    psi: Vec<Field>,
    theta: Vec<Field>,
    derivative: Vec<Field>,
    v: InnerState,
    iterations: ChunkIterations,
}

fn semigroup_slices(u_start: &Field, dt: f64, steps: usize) -> Vec<Field> {
    let mut sp = Spectral::new(u_start.grid().m());
    (0..=steps).map(|l| sp.heat(l as f64 * dt, u_start)).collect()
}

fn theta_field(theta: &ThetaModel, u: &[Field], n: usize, dt: f64) -> Result<SpaceTimeField> {
    let slices = u.iter().map(|f| f.map(n * n, |x, out| theta.eval(x, out))).collect();
    SpaceTimeField::new(dt, slices)
}

fn build_psi(
    cfg: &SolverConfig,
    theta: &SpaceTimeField,
    source: Option<&NoiseSource>,
    x: &Arc<GaussianField>,
) -> Result<ControlledConvolution> {
    match (source, cfg.eps) {
        (Some(src), Some(e)) => stoch_conv_mollified(theta, src, e, x.clone()),
        (Some(src), None) => stoch_conv(theta, src, x.clone()),
        (None, _) => {
            let zero_source = NoiseSource::generated(cfg.noise_spec()?)?;
            stoch_conv(theta, &zero_source, x.clone())
        }
    }
}

fn solve_chunk(
    cfg: &SolverConfig,
    source: Option<&NoiseSource>,
    u_start: &Field,
    start: usize,
    steps: usize,
) -> Result<ChunkResult> {
    let grid = u_start.grid();
    let n = cfg.n;
    let dt = cfg.dt;
    let big_u_slices = semigroup_slices(u_start, dt, steps);
    let big_u = SpaceTimeField::new(dt, big_u_slices)?;
    let x = Arc::new(match source {
        Some(src) => simulate_x_with(
            src,
            XMode::Coupled,
            &SimOptions { start_step: start, steps: Some(steps), eps: cfg.eps, ..SimOptions::default() },
        )?,
        None => GaussianField::zero(grid, n, dt, steps, start)?,
    });
    let theta_const = source.is_none() || matches!(cfg.theta, ThetaModel::Constant { .. });
    let mut u_prev: Vec<Field> = big_u.slices().to_vec();
    let mut outer_history = Vec::new();
    let mut inner_counts = Vec::new();
    let mut last = None;
    for _ in 0..cfg.max_outer {
        let theta = if source.is_none() {
            SpaceTimeField::new(dt, vec![Field::zeros(grid, n * n); steps + 1])?
        } else {
            theta_field(&cfg.theta, &u_prev, n, dt)?
        };
        let psi = build_psi(cfg, &theta, source, &x)?;
        let ctx = GContext::new(&psi, &big_u, cfg)?;
        let v = fixed_point_in(&ctx)?;
        inner_counts.push(v.history.len());
        let chi = ctx.chi.clone();
        drop(ctx);
        let u: Vec<Field> = (0..=steps)
            .map(|l| {
                let (a, b, c) = (big_u.slice(l), psi.psi().slice(l), v.v.slice(l));
                a.add(b).and_then(|ab| ab.add(c))
            })
            .collect::<Result<_>>()?;
        let diff = if theta_const {
            0.0
        } else {
            let d: Vec<Field> = u.iter().zip(&u_prev).map(|(a, b)| a.sub(b)).collect::<Result<_>>()?;
            let d = SpaceTimeField::new(dt, d)?;
            // The sup norm bounds the parabolic norm from below; the full
            // norm is only needed once the bound is within tolerance.
            let lower = d.sup_norm();
            if lower > cfg.outer_tol {
                lower
            } else {
                parabolic_holder_with(&d, cfg.alpha, cfg.sampling)?
            }
        };
        outer_history.push(diff);
        let done = diff <= cfg.outer_tol || !diff.is_finite();
        u_prev = u;
        last = Some((psi, v, chi));
        if done {
            break;
        }
    }
    let converged = outer_history.last().map(|d| *d <= cfg.outer_tol).unwrap_or(false);
    if !converged {
        return Err(Error::NonConvergence { history: outer_history });
    }
    let (psi, v, chi) = last.expect("at least one outer iteration");
    let lifts = (0..=steps)
        .map(|l| {
            let lift = x.lift(l).ok_or_else(|| Error::Missing(format!("no lift at slice {l}")))?;
            Ok(match &cfg.area_modifier {
                Some(_) => Arc::new(modified_lift(lift, cfg)?),
                None => lift.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let derivative = (0..=steps).map(|l| psi.thetavals().slice(l).scaled(chi[l])).collect();
    Ok(ChunkResult {
        u: u_prev,
        big_u: big_u.slices().to_vec(),
        x: x.clone(),
        lifts,
        psi: psi.psi().slices().to_vec(),
        theta: psi.thetavals().slices().to_vec(),
        derivative,
        v,
        iterations: ChunkIterations {
            start_step: start,
            steps,
            outer: outer_history.len(),
            inner: inner_counts,
            outer_history,
        },
    })
}

fn noise_source(cfg: &SolverConfig) -> Result<Option<NoiseSource>> {
    if cfg.theta.is_zero() {
        return Ok(None);
    }
    match &cfg.replay {
        Some(path) => {
            let src = NoiseSource::load(Path::new(path))?;
            let s = src.spec();
            if s.n != cfg.n || s.m != cfg.m || s.dt != cfg.dt || s.steps() < cfg.steps() {
                return Err(mismatch("replay file does not match the configuration"));
            }
            Ok(Some(src))
        }
        None => Ok(Some(NoiseSource::generated(cfg.noise_spec()?)?)),
    }
}

/// Pathwise Picard iteration on the whole horizon without subdivision.
pub fn outer_picard(cfg: &SolverConfig) -> Result<SolutionBundle> {
    solve_with_chunks(cfg, false)
}

/// Global solve: subintervals are halved whenever an inner or outer fixed
/// point fails to converge.
pub fn solve(cfg: &SolverConfig) -> Result<SolutionBundle> {
    solve_with_chunks(cfg, true)
}

/// [`solve`] with mollified noise; `cfg.eps` must be set.
pub fn solve_mollified(cfg: &SolverConfig) -> Result<SolutionBundle> {
    if cfg.eps.is_none() {
        return Err(invalid("solve_mollified needs eps"));
    }
    solve(cfg)
}

fn solve_with_chunks(cfg: &SolverConfig, split: bool) -> Result<SolutionBundle> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let n = cfg.n;
    let total = cfg.steps();
    let source = noise_source(cfg)?;
    let u0 = cfg.u0.build(grid, n)?;
    let mut chunk_len = if split { total.div_ceil(cfg.chunks) } else { total };

    let mut u = vec![u0.clone()];
    let (mut big_u, mut xs, mut psi, mut theta, mut deriv) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut vs, mut dvs) = (Vec::new(), Vec::new());
    let mut lifts = Vec::new();
    let mut iterations = Vec::new();
    let mut residuals = Vec::new();
    let mut diagnostics = SweepDiagnostics::default();
    let mut monitor = StoppingMonitor::new(cfg.cutoffs.thresholds(), cfg.alpha, cfg.sampling)?;
    let mut sup_u = 0.0f64;
    let mut k4_hit: Option<f64> = None;

    let mut start = 0;
    while start < total {
        let len = chunk_len.min(total - start);
        let u_start = u.last().expect("nonempty").clone();
        let chunk = match solve_chunk(cfg, source.as_ref(), &u_start, start, len) {
            Ok(c) => c,
            Err(Error::NonConvergence { history }) => {
                if !split || len == 1 {
                    return Err(Error::NonConvergence { history });
                }
                chunk_len = len / 2;
                continue;
            }
            Err(e) => return Err(e),
        };
        let first = if start == 0 { 0 } else { 1 };
        if start == 0 {
            big_u.push(chunk.big_u[0].clone());
            xs.push(chunk.x.slice(0).clone());
            psi.push(chunk.psi[0].clone());
            theta.push(chunk.theta[0].clone());
            deriv.push(chunk.derivative[0].clone());
            vs.push(chunk.v.v.slice(0).clone());
            dvs.push(chunk.v.dv.slice(0).clone());
            lifts.push(chunk.lifts[0].clone());
        }
        let chunk_psi = SpaceTimeField::new(cfg.dt, chunk.psi.clone())?;
        let chunk_theta = SpaceTimeField::new(cfg.dt, chunk.theta.clone())?;
        let conv = ControlledConvolution::from_parts(chunk_psi, chunk_theta, chunk.x.clone())?;
        for l in first..=len {
            let t = (start + l) as f64 * cfg.dt;
            monitor = monitor_update(monitor, &MonitorSlice { time: t, index: l, x: &chunk.x, psi: Some(&conv) })?;
            let ul = &chunk.u[l];
            sup_u = sup_u.max(ul.sup_norm() + holder_seminorm_with(ul, cfg.alpha, cfg.sampling)?);
            if k4_hit.is_none() && sup_u > cfg.cutoffs.k4 {
                k4_hit = Some(t);
            }
            if l > 0 {
                u.push(ul.clone());
                big_u.push(chunk.big_u[l].clone());
                xs.push(chunk.x.slice(l).clone());
                psi.push(chunk.psi[l].clone());
                theta.push(chunk.theta[l].clone());
                deriv.push(chunk.derivative[l].clone());
                vs.push(chunk.v.v.slice(l).clone());
                dvs.push(chunk.v.dv.slice(l).clone());
                lifts.push(chunk.lifts[l].clone());
            }
        }
        let d = chunk.v.diagnostics;
        diagnostics.smooth += d.smooth;
        diagnostics.first_order += d.first_order;
        diagnostics.area += d.area;
        residuals.extend_from_slice(&chunk.iterations.outer_history);
        iterations.push(chunk.iterations);
        start += len;
    }

    let dt = cfg.dt;
    let triggered_at = match (monitor.triggered_at, k4_hit) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    };
    let valid_steps = match triggered_at {
        Some(t) => ((t / dt).round() as usize).saturating_sub(1),
        None => total,
    };
    Ok(SolutionBundle {
        config: cfg.clone(),
        u: SpaceTimeField::new(dt, u)?,
        big_u: SpaceTimeField::new(dt, big_u)?,
        x: SpaceTimeField::new(dt, xs)?,
        lifts,
        psi: SpaceTimeField::new(dt, psi)?,
        thetavals: SpaceTimeField::new(dt, theta)?,
        derivative: SpaceTimeField::new(dt, deriv)?,
        v: InnerState {
            v: SpaceTimeField::new(dt, vs)?,
            dv: SpaceTimeField::new(dt, dvs)?,
            history: iterations.iter().flat_map(|c| c.inner.iter().map(|k| *k as f64)).collect(),
            diagnostics,
        },
        monitor,
        iterations,
        residuals,
        triggered_at,
        valid_steps,
        sup_u,
        diagnostics,
        noise: source,
    })
}

/// Smooth periodic test functions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFn {
    Constant,
    Cos {
        k: u32,
    },
    Sin {
        k: u32,
    },
    /// `1 + cos(2πx)`.
    OnePlusCos,
}

impl TestFn {
    /// `(φ, φ', φ'')` at `x`.
    pub fn eval(&self, x: f64) -> (f64, f64, f64) {
        let tau = 2.0 * std::f64::consts::PI;
        match *self {
            TestFn::Constant => (1.0, 0.0, 0.0),
            TestFn::Cos { k } => {
                let w = tau * k as f64;
                ((w * x).cos(), -w * (w * x).sin(), -w * w * (w * x).cos())
            }
            TestFn::Sin { k } => {
                let w = tau * k as f64;
                ((w * x).sin(), w * (w * x).cos(), -w * w * (w * x).sin())
            }
            TestFn::OnePlusCos => (1.0 + (tau * x).cos(), -tau * (tau * x).sin(), -tau * tau * (tau * x).cos()),
        }
    }
}

/// Defect of the weak formulation for one test function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakResidual {
    pub test_fn: TestFn,
    /// `‖⟨φ,u(T)⟩ - ⟨φ,u₀⟩ - ∫⟨Δφ,u⟩ - ∫∫φ g(u)dₓu - Σ⟨φθ(u),ΔW⟩‖`.
    pub defect: f64,
    /// Sum of the sizes of the individual terms.
    pub scale: f64,
}

impl WeakResidual {
    pub fn relative(&self) -> f64 {
        if self.scale > 0.0 {
            self.defect / self.scale
        } else {
            self.defect
        }
    }
}

fn pairing(phi: &[f64], f: &Field, h: f64) -> Vec<f64> {
    let (m, n) = (f.grid().m(), f.dim());
    (0..n).map(|c| h * (0..m).map(|j| phi[j] * f.get(j, c)).sum::<f64>()).collect()
}

fn vnorm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// `∫ φ g(u) dₓu` as a rough integral against the slice's reference lift.
pub fn rough_nonlinearity(
    g: &GModel,
    u: &Field,
    derivative: &Field,
    lift: Arc<RoughPath>,
    phi: &[f64],
) -> Result<Vec<f64>> {
    let n = u.dim();
    let z = make_controlled(u.clone(), derivative.clone(), lift)?;
    let y = compose_smooth(&GFlat { model: g, n }, &z, &Field::zeros(u.grid(), n))?;
    let total = rough_integral_total(&weight_controlled(phi, &y), &z)?;
    Ok((0..n).map(|i| (0..n).map(|k| total[(i * n + k) * n + k]).sum()).collect())
}

/// Assembles every term of the weak formulation from a finished bundle.
pub fn weak_form_residual(bundle: &SolutionBundle, testfns: &[TestFn]) -> Result<Vec<WeakResidual>> {
    let cfg = &bundle.config;
    let u = &bundle.u;
    let grid = u.grid();
    let (m, n) = (grid.m(), u.dim());
    let (h, dt) = (grid.h(), u.dt());
    let steps = u.steps();
    let noisy = !cfg.theta.is_zero();
    let source = match (&bundle.noise, noisy) {
        (Some(s), _) => Some(s),
        (None, true) => return Err(Error::Missing("bundle carries no noise".into())),
        (None, false) => None,
    };
    let increments = match source {
        Some(src) => (0..steps).map(|l| forcing_increment(src, l, cfg.eps)).collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    testfns
        .iter()
        .map(|tf| {
            let vals: Vec<(f64, f64, f64)> = (0..=m).map(|j| tf.eval(grid.x(j))).collect();
            let phi: Vec<f64> = vals.iter().map(|v| v.0).collect();
            let lap: Vec<f64> = vals.iter().map(|v| v.2).collect();
            let end = pairing(&phi, u.last(), h);
            let start = pairing(&phi, u.slice(0), h);
            let mut linear = vec![0.0; n];
            let mut nonlinear = vec![0.0; n];
            let mut martingale = vec![0.0; n];
            let mut reaction = vec![0.0; n];
            for l in 0..steps {
                let ul = u.slice(l);
                for (a, b) in linear.iter_mut().zip(pairing(&lap, ul, h)) {
                    *a += dt * b;
                }
                if !cfg.g.is_zero() {
                    let r = rough_nonlinearity(&cfg.g, ul, bundle.derivative.slice(l), bundle.lifts[l].clone(), &phi)?;
                    for (a, b) in nonlinear.iter_mut().zip(r) {
                        *a += dt * b;
                    }
                    if let Some(a) = &cfg.reaction_correction {
                        let d = bundle.derivative.slice(l);
                        for j in 0..m {
                            let f = reaction_forcing(&cfg.g, d.at(j), a, ul.at(j));
                            for i in 0..n {
                                reaction[i] += dt * h * phi[j] * f[i];
                            }
                        }
                    }
                }
                if let Some(inc) = increments.get(l) {
                    let th = bundle.thetavals.slice(l);
                    for j in 0..m {
                        let t = th.at(j);
                        for i in 0..n {
                            let s: f64 = (0..n).map(|k| t[i * n + k] * inc.at(j, k)).sum();
                            martingale[i] += h * phi[j] * s;
                        }
                    }
                }
            }
            let defect: Vec<f64> =
                (0..n).map(|i| end[i] - start[i] - linear[i] - nonlinear[i] - martingale[i] - reaction[i]).collect();
            let scale = vnorm(&end)
                + vnorm(&start)
                + vnorm(&linear)
                + vnorm(&nonlinear)
                + vnorm(&martingale)
                + vnorm(&reaction);
            Ok(WeakResidual { test_fn: *tf, defect: vnorm(&defect), scale })
        })
        .collect()
}

/// Paired runs of [`correction_experiment`].
#[derive(Clone, Debug)]
pub struct CorrectionReport {
    pub canonical: SolutionBundle,
    pub modified: SolutionBundle,
    pub corrected: SolutionBundle,
    /// `‖B - C‖` in the grid parabolic norm.
    pub b_minus_c: f64,
    /// `‖B - A‖` in the grid parabolic norm.
    pub b_minus_a: f64,
    /// All three runs agree bit for bit.
    pub identical: bool,
}

impl CorrectionReport {
    /// `‖B - C‖ / ‖B - A‖`, or `None` when `B = A` exactly.
    pub fn ratio(&self) -> Option<f64> {
        if self.b_minus_a > 0.0 {
            Some(self.b_minus_c / self.b_minus_a)
        } else {
            None
        }
    }
}

/// (A) canonical lift, (B) lift modified by `a`, (C) canonical lift plus
/// the reaction forcing for `a`, all on the same noise.
pub fn correction_experiment(cfg: &SolverConfig, a: &[f64]) -> Result<CorrectionReport> {
    let mut base = cfg.clone();
    base.area_modifier = None;
    base.reaction_correction = None;
    let mut modified = base.clone();
    modified.area_modifier = Some(a.to_vec());
    let mut corrected = base.clone();
    corrected.reaction_correction = Some(a.to_vec());
    let ra = solve(&base)?;
    let rb = solve(&modified)?;
    let rc = solve(&corrected)?;
    let dist = |x: &SolutionBundle, y: &SolutionBundle| -> Result<f64> {
        parabolic_holder_with(&x.u.sub(&y.u)?, cfg.alpha, cfg.sampling)
    };
    let b_minus_c = dist(&rb, &rc)?;
    let b_minus_a = dist(&rb, &ra)?;
    let identical = ra.u == rb.u && rb.u == rc.u;
    Ok(CorrectionReport { canonical: ra, modified: rb, corrected: rc, b_minus_c, b_minus_a, identical })
}

/// Both sides of `∫φ g(u) dₓu = -∫∂ₓφ G(u) dx` on one slice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub rough: f64,
    pub primitive: f64,
    pub discrepancy: f64,
    /// `∫|∂ₓφ G(u)| dx`.
    pub scale: f64,
}

/// Checks the integration-by-parts identity for a geometric lift.
pub fn gradient_consistency(u: &ControlledPath, g: &GModel, phi: TestFn) -> Result<GradientReport> {
    let defect = u.reference().symmetric_defect();
    let size = 1.0 + u.reference().base().sup_norm().powi(2);
    if defect > 1e-10 * size {
        return Err(Error::NonGeometric(defect));
    }
    gradient_sides_unchecked(u, g, phi)
}

/// The two sides of [`gradient_consistency`] without the geometricity check.
pub fn gradient_sides_unchecked(u: &ControlledPath, g: &GModel, phi: TestFn) -> Result<GradientReport> {
    if u.y().dim() != 1 {
        return Err(mismatch("the gradient identity is implemented for n = 1"));
    }
    let grid = u.y().grid();
    let (m, h) = (grid.m(), grid.h());
    let vals: Vec<(f64, f64, f64)> = (0..=m).map(|j| phi.eval(grid.x(j))).collect();
    let phis: Vec<f64> = vals.iter().map(|v| v.0).collect();
    let rough = rough_nonlinearity(g, u.y(), u.yprime(), u.reference().clone(), &phis)?[0];
    let mut primitive = 0.0;
    let mut scale = 0.0;
    for j in 0..m {
        let big_g = g.primitive(u.y().get(j, 0)).ok_or_else(|| invalid("g has no primitive in this model"))?;
        primitive -= h * vals[j].1 * big_g;
        scale += h * (vals[j].1 * big_g).abs();
    }
    Ok(GradientReport { rough, primitive, discrepancy: (rough - primitive).abs(), scale })
}

/// Summary persisted as JSON next to the field dumps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleSummary {
    pub m: usize,
    pub n: usize,
    pub dt: f64,
    pub horizon: f64,
    pub steps: usize,
    pub sup_u: f64,
    pub sup_norm: f64,
    pub parabolic_norm: f64,
    pub monitor_sup_x: f64,
    pub monitor_sup_psi: f64,
    pub monitor_sup_r: f64,
    pub triggered_at: Option<f64>,
    pub valid_steps: usize,
    pub iterations: Vec<ChunkIterations>,
    pub residuals: Vec<f64>,
    pub area_share: f64,
    pub noise_draws: u64,
}

impl SolutionBundle {
    pub fn summary(&self) -> Result<BundleSummary> {
        Ok(BundleSummary {
            m: self.config.m,
            n: self.config.n,
            dt: self.config.dt,
            horizon: self.config.horizon,
            steps: self.u.steps(),
            sup_u: self.sup_u,
            sup_norm: self.u.sup_norm(),
            parabolic_norm: parabolic_holder_with(&self.u, self.config.alpha, self.config.sampling)?,
            monitor_sup_x: self.monitor.sup_x,
            monitor_sup_psi: self.monitor.sup_psi,
            monitor_sup_r: self.monitor.sup_r,
            triggered_at: self.triggered_at,
            valid_steps: self.valid_steps,
            iterations: self.iterations.clone(),
            residuals: self.residuals.clone(),
            area_share: self.diagnostics.area_share(),
            noise_draws: self.noise.as_ref().map(NoiseSource::draws).unwrap_or(0),
        })
    }

    /// Writes `config.toml`, `noise.bin` (when noise is present), `u_<step>.csv`
    /// dumps and `summary.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), self.config.to_toml()?)?;
        if let Some(src) = &self.noise {
            src.save(&dir.join("noise.bin"))?;
        }
        let steps = self.u.steps();
        let mut dumps = vec![steps];
        if self.config.dump_every > 0 {
            dumps = (0..=steps).step_by(self.config.dump_every).collect();
            if dumps.last() != Some(&steps) {
                dumps.push(steps);
            }
        }
        for l in dumps {
            let f = std::fs::File::create(dir.join(format!("u_{l:06}.csv")))?;
            self.u.slice(l).write_csv(std::io::BufWriter::new(f))?;
        }
        let mut f = std::fs::File::create(dir.join("summary.json"))?;
        serde_json::to_writer_pretty(&mut f, &self.summary()?)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roughcore::lift_piecewise_linear;
    use crate::stochconv::simulate_x;

    fn small(g: GModel, theta: ThetaModel) -> SolverConfig {
        SolverConfig { g, theta, m: 64, dt: 1e-4, horizon: 0.01, ..SolverConfig::default() }
    }

    fn fd_burgers(u0: &[f64], t_end: f64, dt: f64) -> Vec<f64> {
        let m = u0.len();
        let h = 1.0 / m as f64;
        let rhs = |u: &[f64]| -> Vec<f64> {
            (0..m)
                .map(|i| {
                    let (l, r) = (u[(i + m - 1) % m], u[(i + 1) % m]);
                    (r - 2.0 * u[i] + l) / (h * h) + u[i] * (r - l) / (2.0 * h)
                })
                .collect()
        };
        let mut u = u0.to_vec();
        for _ in 0..(t_end / dt).round() as usize {
            let stage = |base: &[f64], k: &[f64], c: f64| -> Vec<f64> {
                base.iter().zip(k).map(|(x, k)| x + c * dt * k).collect()
            };
            let k1 = rhs(&u);
            let k2 = rhs(&stage(&u, &k1, 0.5));
            let k3 = rhs(&stage(&u, &k2, 0.5));
            let k4 = rhs(&stage(&u, &k3, 1.0));
            for i in 0..m {
                u[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        u
    }

    /// `Ψ`, `U` for `cfg` with `θ` evaluated along `U`.
    fn frozen_parts(cfg: &SolverConfig) -> (ControlledConvolution, SpaceTimeField) {
        let src = NoiseSource::generated(cfg.noise_spec().unwrap()).unwrap();
        let x = Arc::new(simulate_x_with(&src, XMode::Coupled, &SimOptions::default()).unwrap());
        let u0 = cfg.u0.build(cfg.grid().unwrap(), cfg.n).unwrap();
        let big_u = SpaceTimeField::new(cfg.dt, semigroup_slices(&u0, cfg.dt, cfg.steps())).unwrap();
        let theta = theta_field(&cfg.theta, big_u.slices(), cfg.n, cfg.dt).unwrap();
        (stoch_conv(&theta, &src, x).unwrap(), big_u)
    }

    fn max_diff(a: &SpaceTimeField, b: &SpaceTimeField) -> f64 {
        a.sub(b).unwrap().sup_norm()
    }

    #[test]
    fn cutoff_examples() {
        assert_eq!(cutoff_chi(5.0, 10.0).unwrap(), 1.0);
        assert_eq!(cutoff_chi(10.0, 10.0).unwrap(), 1.0);
        assert!((cutoff_chi(20.0, 10.0).unwrap() - 0.75).abs() < 1e-15);
        let mut last = 0.0;
        for x in [20.0, 1e2, 1e4, 1e8] {
            let y = x * cutoff_chi(x, 10.0).unwrap();
            assert!(y < 20.0 && y > last);
            last = y;
        }
        assert!(20.0 - last < 1e-5);
        assert!(cutoff_chi(1.0, 0.0).is_err());
        assert!(cutoff_chi(1.0, -1.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let bad = [
            SolverConfig { alpha: 0.3, ..SolverConfig::default() },
            SolverConfig { beta: 0.5, ..SolverConfig::default() },
            SolverConfig { n: 2, ..SolverConfig::default() },
            SolverConfig { eps: Some(0.0), ..SolverConfig::default() },
            SolverConfig { chunks: 0, ..SolverConfig::default() },
            SolverConfig { area_modifier: Some(vec![1.0, 2.0]), ..SolverConfig::default() },
            SolverConfig { max_steps: 10, ..SolverConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        let mut c = SolverConfig::default();
        c.cutoffs.k2 = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = SolverConfig {
            n: 2,
            g: GModel::PureArea,
            theta: ThetaModel::Constant { c: 0.5 },
            eps: Some(0.125),
            area_modifier: Some(vec![0.0, 1.0, -1.0, 0.0]),
            ..SolverConfig::default()
        };
        assert_eq!(SolverConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        assert_eq!(SolverConfig::from_toml("m = 128\n").unwrap().m, 128);
        assert!(SolverConfig::from_toml("m = \"x\"").is_err());
    }

    #[test]
    fn zero_g_has_trivial_inner_map() {
        let cfg = small(GModel::Zero, ThetaModel::InvSqrt);
        let (psi, big_u) = frozen_parts(&cfg);
        let n = cfg.n;
        let mut v = InnerState::zeros(cfg.grid().unwrap(), n, cfg.dt, cfg.steps()).unwrap();
        v.v = big_u.clone();
        let out = apply_g(&v, &psi, &big_u, &cfg).unwrap();
        assert_eq!(out.c1_norm(), 0.0);
        let fp = inner_fixed_point(&psi, &big_u, &cfg).unwrap();
        assert_eq!(fp.history, vec![0.0]);
    }

    #[test]
    fn heat_only_solutions() {
        let cfg =
            SolverConfig { u0: InitialData::Fourier { amplitude: 1.0, k: 2 }, ..small(GModel::Zero, ThetaModel::Zero) };
        let b = solve(&cfg).unwrap();
        assert!(b.noise.is_none());
        let mut sp = Spectral::new(cfg.m);
        for l in [0, 7, cfg.steps()] {
            let want = sp.heat(l as f64 * cfg.dt, b.u.slice(0));
            assert!(b.u.slice(l).sub(&want).unwrap().sup_norm() < 1e-12);
        }
        let zero = SolverConfig { u0: InitialData::Zero, ..SolverConfig::default() };
        let zero = SolverConfig { theta: ThetaModel::Zero, ..zero };
        let b = solve(&SolverConfig { m: 64, horizon: 0.01, ..zero }).unwrap();
        assert_eq!(b.u.sup_norm(), 0.0);
    }

    #[test]
    fn additive_noise_without_drift_is_u_plus_x() {
        let cfg = small(GModel::Zero, ThetaModel::Constant { c: 1.0 });
        let b = solve(&cfg).unwrap();
        let x = simulate_x(&cfg.noise_spec().unwrap(), XMode::Coupled).unwrap();
        let lhs = b.u.sub(&b.big_u).unwrap();
        assert!(max_diff(&lhs, x.field()) < 1e-12);
        assert!(b.v.c1_norm() == 0.0);
    }

    #[test]
    fn deterministic_burgers_matches_finite_differences() {
        let cfg = SolverConfig {
            g: GModel::Linear { c: 1.0 },
            theta: ThetaModel::Zero,
            u0: InitialData::Fourier { amplitude: 1.0, k: 1 },
            m: 256,
            dt: 1e-4,
            horizon: 0.1,
            ..SolverConfig::default()
        };
        let b = solve(&cfg).unwrap();
        let u0: Vec<f64> = (0..cfg.m).map(|j| b.u.slice(0).get(j, 0)).collect();
        let fd = fd_burgers(&u0, cfg.horizon, 1e-6);
        let err = (0..cfg.m).map(|j| (b.u.last().get(j, 0) - fd[j]).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn inner_residuals_decay_geometrically() {
        let cfg = small(GModel::Sin, ThetaModel::InvSqrt);
        let (psi, big_u) = frozen_parts(&cfg);
        let fp = inner_fixed_point(&psi, &big_u, &cfg).unwrap();
        let h = &fp.history;
        assert!(h.len() >= 3 && *h.last().unwrap() <= cfg.picard_tol);
        let ratios: Vec<f64> = h.windows(2).filter(|w| w[0] > 1e-14).map(|w| w[1] / w[0]).collect();
        assert!(ratios.iter().all(|r| *r < 0.5), "{ratios:?}");
    }

    #[test]
    fn fixed_point_identity() {
        let cfg = SolverConfig { picard_tol: 1e-14, ..small(GModel::Sin, ThetaModel::InvSqrt) };
        let (psi, big_u) = frozen_parts(&cfg);
        let fp = inner_fixed_point(&psi, &big_u, &cfg).unwrap();
        let again = apply_g(&fp, &psi, &big_u, &cfg).unwrap();
        assert!(again.c1_distance(&fp).unwrap() < 1e-12);
    }

    #[test]
    fn nonconvergence_reports_history() {
        let cfg = SolverConfig { max_iters: 2, ..small(GModel::Sin, ThetaModel::InvSqrt) };
        let (psi, big_u) = frozen_parts(&cfg);
        match inner_fixed_point(&psi, &big_u, &cfg) {
            Err(Error::NonConvergence { history }) => assert_eq!(history.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn solve_is_deterministic() {
        let cfg = small(GModel::Sin, ThetaModel::InvSqrt);
        let (a, b) = (solve(&cfg).unwrap(), solve(&cfg).unwrap());
        assert_eq!(a.u, b.u);
        assert_eq!(a.residuals, b.residuals);
        let c = solve(&SolverConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.u, c.u);
    }

    #[test]
    fn slack_cutoffs_are_transparent() {
        let cfg = small(GModel::Sin, ThetaModel::InvSqrt);
        let mut off = cfg.clone();
        off.cutoffs.enabled = false;
        let (a, b) = (solve(&cfg).unwrap(), solve(&off).unwrap());
        assert!(a.triggered_at.is_none());
        assert_eq!(a.u, b.u);
    }

    #[test]
    fn zero_modifier_changes_nothing() {
        let cfg = small(GModel::Sin, ThetaModel::InvSqrt);
        let r = correction_experiment(&cfg, &[0.0]).unwrap();
        assert!(r.identical);
        assert_eq!(r.ratio(), None);
    }

    #[test]
    fn reaction_forcing_examples() {
        let f = reaction_forcing(&GModel::Linear { c: 2.0 }, &[3.0], &[0.5], &[0.7]);
        assert!((f[0] - 9.0).abs() < 1e-15);
        let id = [1.0, 0.0, 0.0, 1.0];
        let f = reaction_forcing(&GModel::PureArea, &id, &[0.0, 1.0, -1.0, 0.0], &[0.3, -0.2]);
        assert_eq!(f, vec![-2.0, -2.0]);
        let f = reaction_forcing(&GModel::PureArea, &id, &[1.0, 0.0, 0.0, 1.0], &[0.3, -0.2]);
        assert_eq!(f, vec![0.0, 0.0]);
    }

    #[test]
    fn gradient_identity_on_smooth_and_constant_paths() {
        let grid = SpatialGrid::new(256).unwrap();
        let y = Field::from_fn(grid, 1, |x, o| o[0] = 0.3 * (2.0 * std::f64::consts::PI * x).sin());
        let lift = Arc::new(lift_piecewise_linear(&y));
        let one = Field::from_fn(grid, 1, |_, o| o[0] = 1.0);
        let u = make_controlled(y.clone(), one.clone(), lift).unwrap();
        for g in [GModel::Linear { c: 1.0 }, GModel::Sin] {
            let r = gradient_consistency(&u, &g, TestFn::OnePlusCos).unwrap();
            assert!(r.discrepancy < 1e-3 * r.scale.max(1e-3), "{r:?}");
        }
        let c = Field::from_fn(grid, 1, |_, o| o[0] = 0.4);
        let flat = make_controlled(c.clone(), Field::zeros(grid, 1), Arc::new(lift_piecewise_linear(&c))).unwrap();
        let r = gradient_consistency(&flat, &GModel::Sin, TestFn::Cos { k: 2 }).unwrap();
        assert!(r.rough.abs() < 1e-15 && r.primitive.abs() < 1e-15);
    }

    #[test]
    fn gradient_rejects_non_geometric_lifts() {
        let grid = SpatialGrid::new(64).unwrap();
        let y = Field::from_fn(grid, 1, |x, o| o[0] = (2.0 * std::f64::consts::PI * x).cos());
        let lift = lift_piecewise_linear(&y);
        let bad = Arc::new(modify_levy_area(&lift, &[0.5]).unwrap());
        let one = Field::from_fn(grid, 1, |_, o| o[0] = 1.0);
        let u = make_controlled(y, one, bad).unwrap();
        assert!(matches!(gradient_consistency(&u, &GModel::Sin, TestFn::Constant), Err(Error::NonGeometric(_))));
        assert!(gradient_sides_unchecked(&u, &GModel::Sin, TestFn::Constant).is_ok());
    }

    #[test]
    fn tiny_mollifier_reproduces_the_solution() {
        let cfg = small(GModel::Sin, ThetaModel::InvSqrt);
        let plain = solve(&cfg).unwrap();
        let h = 1.0 / cfg.m as f64;
        let moll = solve_mollified(&SolverConfig { eps: Some(0.4 * h), ..cfg.clone() }).unwrap();
        assert!(max_diff(&plain.u, &moll.u) < 1e-10);
        assert!(solve_mollified(&cfg).is_err());
        let heat = small(GModel::Sin, ThetaModel::Zero);
        let a = solve(&heat).unwrap();
        let b = solve_mollified(&SolverConfig { eps: Some(0.1), ..heat }).unwrap();
        assert_eq!(a.u, b.u);
    }

    #[test]
    fn chunking_barely_moves_the_solution() {
        let cfg = SolverConfig { m: 128, horizon: 0.02, ..SolverConfig::default() };
        let two = solve(&SolverConfig { chunks: 2, ..cfg.clone() }).unwrap();
        let four = solve(&SolverConfig { chunks: 4, ..cfg }).unwrap();
        assert_eq!(two.iterations.len(), 2);
        assert_eq!(four.iterations.len(), 4);
        let d = max_diff(&two.u, &four.u);
        assert!(d < 5e-3, "{d}");
    }

    #[test]
    fn weak_form_of_heat_flow() {
        let cfg =
            SolverConfig { u0: InitialData::Fourier { amplitude: 1.0, k: 1 }, ..small(GModel::Zero, ThetaModel::Zero) };
        let b = solve(&cfg).unwrap();
        let r = weak_form_residual(&b, &[TestFn::Constant, TestFn::Sin { k: 1 }, TestFn::Cos { k: 3 }]).unwrap();
        assert!(r[0].defect < 1e-12);
        assert!(r[1].relative() < 1e-2, "{:?}", r[1]);
        assert!(r[2].defect < 1e-12);
    }

    #[test]
    fn summary_and_save() {
        let cfg = SolverConfig { dump_every: 50, ..small(GModel::Sin, ThetaModel::InvSqrt) };
        let b = solve(&cfg).unwrap();
        let s = b.summary().unwrap();
        assert_eq!(s.steps, 100);
        assert!(s.noise_draws > 0);
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        for f in ["config.toml", "noise.bin", "summary.json", "u_000000.csv", "u_000050.csv", "u_000100.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let back = SolverConfig::from_toml(&std::fs::read_to_string(dir.path().join("config.toml")).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
