//! Experiment orchestration: configuration files, seed ensembles, report
//! rows with their provenance, and CSV/JSON emission.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::fit::{iqr, loglog_fit, median, LinearFit};
use crate::grid::{
    holder_exponent_estimate, increment_exponent, parabolic_holder_with, DyadicWindow, Field, SpaceTimeField,
    SpatialGrid,
};
use crate::heat::{kernel_bound_check, BoundId, HeatKernelConfig, QuadratureConfig};
use crate::models::{GModel, ThetaModel};
use crate::noise::{NoiseSource, NoiseSpec};
use crate::roughcore::{
    chen_residual, lift_piecewise_linear, make_controlled, modify_levy_area, rough_integral, ControlledPath,
};
use crate::solver::{
    correction_experiment, gradient_consistency, solve, solve_mollified, SolutionBundle, SolverConfig, TestFn,
};
use crate::stochconv::{simulate_x_with, stoch_conv, SimOptions, XMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Simulate,
    Convergence,
    Rates,
    Correction,
    Gradient,
    Validate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateKind {
    RoughIntegralOrder,
    RemainderScaling,
    KernelBounds,
    HolderExponents,
}

impl RateKind {
    pub fn name(&self) -> &'static str {
        match self {
            RateKind::RoughIntegralOrder => "rough_integral_order",
            RateKind::RemainderScaling => "remainder_scaling",
            RateKind::KernelBounds => "kernel_bounds",
            RateKind::HolderExponents => "holder_exponents",
        }
    }
}

impl std::str::FromStr for RateKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rough_integral_order" => Ok(RateKind::RoughIntegralOrder),
            "remainder_scaling" => Ok(RateKind::RemainderScaling),
            "kernel_bounds" => Ok(RateKind::KernelBounds),
            "holder_exponents" => Ok(RateKind::HolderExponents),
            other => Err(invalid(format!("unknown rate study {other:?}"))),
        }
    }
}

/// Grids of the rate studies that do not run the solver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateSettings {
    pub holder_m: usize,
    pub holder_dt: f64,
    pub holder_horizon: f64,
    pub holder_probes: usize,
    pub holder_window: DyadicWindow,
    /// Temporal lags are `δt·2^j` for `j < holder_time_lags`.
    pub holder_time_lags: u32,
    pub holder_band: [f64; 2],
    pub holder_time_band: [f64; 2],
    /// Fraction of seeds that must land in each band.
    pub holder_fraction: f64,
    pub remainder_m: usize,
    pub remainder_dt: f64,
    pub remainder_horizon: f64,
    /// Lags `2^j` cells for `j < remainder_lags`.
    pub remainder_lags: u32,
    pub remainder_min_slope: f64,
    pub kernel_horizon: f64,
    /// Spatial scales `2^{-k}` for `k` in this range.
    pub kernel_space: [u32; 2],
    /// Temporal scales `2^{-k}` for `k` in this range.
    pub kernel_time: [u32; 2],
    pub slope_tolerance: f64,
}

impl Default for RateSettings {
    fn default() -> Self {
        Self {
            holder_m: 1 << 14,
            holder_dt: 1e-5,
            holder_horizon: 0.1,
            holder_probes: 16,
            holder_window: DyadicWindow { k_min: 7, k_max: 13 },
            holder_time_lags: 7,
            holder_band: [0.42, 0.50],
            holder_time_band: [0.20, 0.28],
            holder_fraction: 0.8,
            remainder_m: 512,
            remainder_dt: 1e-4,
            remainder_horizon: 0.1,
            remainder_lags: 7,
            remainder_min_slope: 0.75,
            kernel_horizon: 0.25,
            kernel_space: [10, 16],
            kernel_time: [6, 12],
            slope_tolerance: 0.1,
        }
    }
}

/// One experiment: which study, its ensemble and ladders, and the solver
/// configuration it starts from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub id: String,
    pub kind: ExperimentKind,
    pub rate: RateKind,
    pub ensemble: usize,
    pub seed_base: u64,
    /// Mollification widths, strictly decreasing.
    pub eps_ladder: Vec<f64>,
    /// Grid sizes, strictly increasing powers of two.
    pub m_ladder: Vec<usize>,
    pub out_dir: String,
    /// Area modifier `a` (row-major `n x n`) of the correction study.
    pub area: Vec<f64>,
    /// Largest admissible `‖B - C‖ / ‖B - A‖`.
    pub max_ratio: f64,
    /// Largest admissible gradient discrepancy relative to its term scale.
    pub max_relative: f64,
    pub solver: SolverConfig,
    pub rates: RateSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            id: "experiment".into(),
            kind: ExperimentKind::Simulate,
            rate: RateKind::RoughIntegralOrder,
            ensemble: 1,
            seed_base: 0,
            eps_ladder: vec![0.125, 0.0625, 0.03125, 0.015625],
            m_ladder: vec![128, 256, 512, 1024],
            out_dir: "out".into(),
            area: vec![1.0],
            max_ratio: 0.1,
            max_relative: 1e-2,
            solver: SolverConfig::default(),
            rates: RateSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble == 0 {
            return Err(invalid("ensemble must be at least 1"));
        }
        if self.eps_ladder.is_empty() || self.m_ladder.is_empty() {
            return Err(invalid("ladders must be nonempty"));
        }
        if self.eps_ladder.windows(2).any(|w| !(w[1] < w[0])) || self.eps_ladder.iter().any(|e| !(*e > 0.0)) {
            return Err(invalid("eps ladder must be positive and strictly decreasing"));
        }
        if self.m_ladder.windows(2).any(|w| w[1] <= w[0]) || self.m_ladder.iter().any(|m| !m.is_power_of_two()) {
            return Err(invalid("m ladder must be strictly increasing powers of two"));
        }
        self.solver.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// First 16 hex digits of the SHA-256 of the echoed configuration.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.ensemble as u64).map(|k| self.seed_base + k).collect()
    }

    fn seed_range(&self) -> (u64, u64) {
        (self.seed_base, self.seed_base + self.ensemble as u64 - 1)
    }

    fn solver_for(&self, seed: u64) -> SolverConfig {
        SolverConfig { seed, ..self.solver.clone() }
    }
}

/// One line of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    /// Ordered `(key, value)` parameters; always includes `m`, `dt` and
    /// `config_hash`.
    pub params: Vec<(String, String)>,
    pub metric: String,
    pub value: f64,
    /// Ensemble IQR, a fit's standard error, or zero.
    pub dispersion: f64,
    pub seed_lo: u64,
    pub seed_hi: u64,
}

impl ReportRow {
    pub fn param(&self, key: &str) -> Option<&str> {
        self.params.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// A pass/fail outcome attached to a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub id: String,
    pub config_hash: String,
    pub rows: Vec<ReportRow>,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

struct Builder<'a> {
    cfg: &'a ExperimentConfig,
    hash: String,
    seeds: (u64, u64),
    rows: Vec<ReportRow>,
    checks: Vec<Check>,
}

impl<'a> Builder<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Result<Self> {
        Ok(Self { cfg, hash: cfg.hash()?, seeds: cfg.seed_range(), rows: Vec::new(), checks: Vec::new() })
    }

    fn row(&mut self, grid: (usize, f64), extra: &[(&str, String)], metric: &str, value: f64, dispersion: f64) {
        let mut params = vec![("m".to_string(), grid.0.to_string()), ("dt".to_string(), grid.1.to_string())];
        params.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
        params.push(("config_hash".into(), self.hash.clone()));
        self.rows.push(ReportRow {
            experiment: self.cfg.id.clone(),
            params,
            metric: metric.into(),
            value,
            dispersion,
            seed_lo: self.seeds.0,
            seed_hi: self.seeds.1,
        });
    }

    fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), passed, detail: detail.into() });
    }

    fn finish(self) -> Report {
        Report { id: self.cfg.id.clone(), config_hash: self.hash, rows: self.rows, checks: self.checks }
    }
}

/// Runs `job` for every seed in parallel; results come back in seed order.
pub fn ensemble<T, F>(cfg: &ExperimentConfig, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    cfg.seeds().into_par_iter().map(job).collect()
}

fn median_iqr(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (median(values), iqr(values))
    }
}

fn in_band(v: f64, lo: f64, hi: f64) -> bool {
    v >= lo && v <= hi
}

/// Dispatches on `cfg.kind`.
pub fn run(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    match cfg.kind {
        ExperimentKind::Simulate => run_simulate(cfg, None),
        ExperimentKind::Convergence => run_convergence(cfg),
        ExperimentKind::Rates => run_rate_study(cfg, cfg.rate),
        ExperimentKind::Correction => run_correction(cfg),
        ExperimentKind::Gradient => run_gradient(cfg),
        ExperimentKind::Validate => run_validate(cfg),
    }
}

fn fixed_point_defect(b: &SolutionBundle) -> Result<f64> {
    let mut worst = 0.0f64;
    for l in 0..=b.u.steps() {
        let rest = b.u.slice(l).sub(b.big_u.slice(l))?.sub(b.v.v.slice(l))?;
        let d = rest.sub(b.psi.slice(l))?.sup_norm();
        worst = worst.max(d);
    }
    Ok(worst)
}

/// Solves once per seed; bundles are saved under `out/seed_<s>` when `out`
/// is given.
pub fn run_simulate(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Report> {
    let results = ensemble(cfg, |seed| solve(&cfg.solver_for(seed)));
    let mut b = Builder::new(cfg)?;
    let grid = (cfg.solver.m, cfg.solver.dt);
    for (seed, res) in cfg.seeds().into_iter().zip(results) {
        let bundle = res?;
        if let Some(dir) = out {
            bundle.save(&dir.join(format!("seed_{seed}")))?;
        }
        let s = bundle.summary()?;
        let sd = [("seed", seed.to_string())];
        b.row(grid, &sd, "sup_norm", s.sup_norm, 0.0);
        b.row(grid, &sd, "parabolic_norm", s.parabolic_norm, 0.0);
        b.row(grid, &sd, "sup_u", s.sup_u, 0.0);
        b.row(grid, &sd, "outer_iterations", bundle.iterations.iter().map(|c| c.outer).sum::<usize>() as f64, 0.0);
        b.row(grid, &sd, "chunks", bundle.iterations.len() as f64, 0.0);
        b.row(grid, &sd, "triggered_at", s.triggered_at.unwrap_or(-1.0), 0.0);
        let defect = fixed_point_defect(&bundle)?;
        b.row(grid, &sd, "fixed_point_defect", defect, 0.0);
        b.check(
            format!("seed {seed}: fixed-point identity"),
            defect <= 1e-12,
            format!("max |u - U - Ψ - v| = {defect:.3e}"),
        );
        b.check(
            format!("seed {seed}: no monitor trigger"),
            s.triggered_at.is_none(),
            format!("triggered_at = {:?}", s.triggered_at),
        );
    }
    Ok(b.finish())
}

/// `‖u - u_ε‖` in the grid parabolic norm for every `ε` of the ladder.
pub fn run_convergence(cfg: &ExperimentConfig) -> Result<Report> {
    let h = 1.0 / cfg.solver.m as f64;
    if let Some(e) = cfg.eps_ladder.iter().find(|e| **e < 2.0 * h || **e > 0.25) {
        return Err(invalid(format!("eps = {e} outside [2h, 1/4]")));
    }
    let per_seed: Vec<Result<Vec<f64>>> = ensemble(cfg, |seed| {
        let base = cfg.solver_for(seed);
        let reference = solve(&SolverConfig { eps: None, ..base.clone() })?;
        cfg.eps_ladder
            .iter()
            .map(|&eps| {
                let moll = solve_mollified(&SolverConfig { eps: Some(eps), ..base.clone() })?;
                parabolic_holder_with(&reference.u.sub(&moll.u)?, base.alpha, base.sampling)
            })
            .collect()
    });
    let mut b = Builder::new(cfg)?;
    let grid = (cfg.solver.m, cfg.solver.dt);
    let mut ok: Vec<Vec<f64>> = Vec::new();
    let mut failures = 0;
    for r in per_seed {
        match r {
            Ok(v) => ok.push(v),
            Err(_) => failures += 1,
        }
    }
    b.row(grid, &[], "failures", failures as f64, 0.0);
    let mut medians = Vec::new();
    for (k, eps) in cfg.eps_ladder.iter().enumerate() {
        let vals: Vec<f64> = ok.iter().map(|v| v[k]).collect();
        let (med, spread) = median_iqr(&vals);
        b.row(grid, &[("eps", eps.to_string())], "parabolic_diff", med, spread);
        medians.push(med);
    }
    if cfg.solver.theta.is_zero() {
        let worst = ok.iter().flatten().fold(0.0f64, |a, v| a.max(*v));
        b.check("noise-free differences vanish", worst <= 1e-10, format!("max difference {worst:.3e}"));
    } else {
        let decreasing = !ok.is_empty() && medians.windows(2).all(|w| w[1] < w[0]);
        b.check("median difference strictly decreasing in eps", decreasing, format!("medians {medians:?}"));
    }
    b.check("no failed seeds", failures == 0, format!("{failures} of {} seeds failed", cfg.ensemble));
    Ok(b.finish())
}

/// `(compensated, uncompensated)` errors of `∫₀^{1/2} e^{Z} dZ` for the
/// tent map `Z`, which equals `x` on `[0, 1/2]`.
pub fn rough_integral_errors(m: usize) -> Result<(f64, f64)> {
    if m < 4 || !m.is_multiple_of(2) {
        return Err(invalid("m must be even and at least 4"));
    }
    let grid = SpatialGrid::new(m)?;
    let z = Field::scalar_fn(grid, |x| if x <= 0.5 { x } else { 1.0 - x });
    let lift = Arc::new(lift_piecewise_linear(&z));
    let ones = Field::scalar_fn(grid, |_| 1.0);
    let zc = make_controlled(z.clone(), ones, lift.clone())?;
    let ey = z.map(1, |v, out| out[0] = v[0].exp());
    let yc = make_controlled(ey.clone(), ey, lift)?;
    let exact = 0.5f64.exp() - 1.0;
    let half = m / 2;
    let compensated = rough_integral(&yc, &zc)?.partials.at(0, half)[0];
    let left = left_sum(&yc, &zc, half);
    Ok(((compensated - exact).abs(), (left - exact).abs()))
}

fn left_sum(y: &ControlledPath, z: &ControlledPath, upto: usize) -> f64 {
    (0..upto).map(|k| y.y().get(k, 0) * (z.y().get(k + 1, 0) - z.y().get(k, 0))).sum()
}

/// `log max_{|x-y| = lag} |R^θ(x,y)|` slope at the final slice for `θ`
/// evaluated along `X` itself.
pub fn remainder_slope(settings: &RateSettings, theta: &ThetaModel, seed: u64) -> Result<LinearFit> {
    let spec = NoiseSpec::new(1, settings.remainder_m, settings.remainder_dt, seed, settings.remainder_horizon)?;
    let src = NoiseSource::generated(spec)?;
    let x = Arc::new(simulate_x_with(&src, XMode::Coupled, &SimOptions::default())?);
    let slices = x.field().slices().iter().map(|f| f.map(1, |u, o| theta.eval(u, o))).collect();
    let thetavals = SpaceTimeField::new(spec.dt, slices)?;
    let conv = stoch_conv(&thetavals, &src, x.clone())?;
    let r = conv.remainder(x.field().steps())?;
    let m = spec.m;
    let lags: Vec<usize> = (0..settings.remainder_lags).map(|j| 1usize << j).filter(|d| *d < m).collect();
    let maxes: Vec<f64> =
        lags.iter().map(|&d| (0..=m - d).map(|i| r.at(i, i + d)[0].abs()).fold(0.0, f64::max)).collect();
    let scales: Vec<f64> = lags.iter().map(|&d| d as f64 / m as f64).collect();
    loglog_fit(&scales, &maxes)
}

/// Spatial and temporal Hölder exponent estimates of `X` for one seed.
pub fn holder_exponents(settings: &RateSettings, seed: u64) -> Result<(f64, f64)> {
    let spec = NoiseSpec::new(1, settings.holder_m, settings.holder_dt, seed, settings.holder_horizon)?;
    let m = spec.m;
    let probes: Vec<usize> = (0..settings.holder_probes).map(|i| i * m / settings.holder_probes).collect();
    let opts = SimOptions { retain_stride: spec.steps(), probes, lift: false, ..SimOptions::default() };
    let src = NoiseSource::generated(spec)?;
    let x = simulate_x_with(&src, XMode::Spectral, &opts)?;
    let spatial = holder_exponent_estimate(x.field().last(), settings.holder_window)?.exponent;
    let lags: Vec<usize> = (0..settings.holder_time_lags).map(|j| 1usize << j).collect();
    let incs: Vec<f64> = lags
        .iter()
        .map(|&d| {
            x.probes().iter().flat_map(|(_, s)| s.windows(d + 1).map(move |w| (w[d] - w[0]).abs())).fold(0.0, f64::max)
        })
        .collect();
    let scales: Vec<f64> = lags.iter().map(|&d| d as f64 * spec.dt).collect();
    let temporal = increment_exponent(&scales, &incs)?.exponent;
    Ok((spatial, temporal))
}

fn slope_check(b: &mut Builder<'_>, name: &str, fit: &LinearFit, target: f64, tol: f64) {
    b.check(
        format!("{name} slope {target} ± {tol}"),
        (fit.slope - target).abs() <= tol,
        format!("fitted {:.4} (stderr {:.2e})", fit.slope, fit.slope_stderr),
    );
}

pub fn run_rate_study(cfg: &ExperimentConfig, kind: RateKind) -> Result<Report> {
    let mut b = Builder::new(cfg)?;
    let st = &cfg.rates;
    let tol = st.slope_tolerance;
    let kname = ("study", kind.name().to_string());
    match kind {
        RateKind::RoughIntegralOrder => {
            let mut comp = Vec::new();
            let mut left = Vec::new();
            for &m in &cfg.m_ladder {
                let (c, l) = rough_integral_errors(m)?;
                b.row((m, 0.0), std::slice::from_ref(&kname), "compensated_error", c, 0.0);
                b.row((m, 0.0), std::slice::from_ref(&kname), "riemann_error", l, 0.0);
                comp.push(c);
                left.push(l);
            }
            let ms: Vec<f64> = cfg.m_ladder.iter().map(|m| *m as f64).collect();
            let fc = loglog_fit(&ms, &comp)?;
            let fl = loglog_fit(&ms, &left)?;
            let m_hi = *cfg.m_ladder.last().expect("nonempty");
            b.row((m_hi, 0.0), std::slice::from_ref(&kname), "compensated_slope", fc.slope, fc.slope_stderr);
            b.row((m_hi, 0.0), &[kname], "riemann_slope", fl.slope, fl.slope_stderr);
            slope_check(&mut b, "compensated sum", &fc, -2.0, 0.2);
            slope_check(&mut b, "uncompensated sum", &fl, -1.0, 0.2);
        }
        RateKind::RemainderScaling => {
            let theta = match cfg.solver.theta {
                ThetaModel::Zero => ThetaModel::SinBump { c: 1.0 },
                ref t => t.clone(),
            };
            let fits = ensemble(cfg, |seed| remainder_slope(st, &theta, seed));
            let slopes = fits.into_iter().map(|f| f.map(|f| f.slope)).collect::<Result<Vec<_>>>()?;
            let grid = (st.remainder_m, st.remainder_dt);
            let (med, spread) = median_iqr(&slopes);
            b.row(grid, std::slice::from_ref(&kname), "remainder_slope_median", med, spread);
            let worst = slopes.iter().copied().fold(f64::INFINITY, f64::min);
            b.row(grid, &[kname], "remainder_slope_min", worst, 0.0);
            b.check(
                format!("remainder slope >= {} for every seed", st.remainder_min_slope),
                worst >= st.remainder_min_slope,
                format!("min {worst:.3}, median {med:.3}"),
            );
        }
        RateKind::KernelBounds => {
            let kcfg = HeatKernelConfig::default();
            let quad = QuadratureConfig::default();
            let alpha = cfg.solver.alpha;
            let ladder = |r: [u32; 2]| -> Vec<f64> { (r[0]..=r[1]).map(|k| 0.5f64.powi(k as i32)).collect() };
            for bound in [BoundId::SR1, BoundId::TR, BoundId::I1, BoundId::I2] {
                let scales = if bound == BoundId::TR { ladder(st.kernel_time) } else { ladder(st.kernel_space) };
                let rep = kernel_bound_check(&kcfg, bound, alpha, st.kernel_horizon, &scales, &quad)?;
                let fit = rep.fit.ok_or_else(|| Error::UndefinedExponent(format!("{} fit", bound.name())))?;
                let extra = [kname.clone(), ("bound", bound.name().to_string())];
                for r in &rep.rows {
                    let e2 = [extra[0].clone(), extra[1].clone(), ("scale", r.scale.to_string())];
                    b.row((0, 0.0), &e2, "lhs", r.lhs, 0.0);
                }
                b.row((0, 0.0), &extra, "slope", fit.slope, fit.slope_stderr);
                slope_check(&mut b, bound.name(), &fit, bound.power(alpha), tol);
            }
        }
        RateKind::HolderExponents => {
            let ests = ensemble(cfg, |seed| holder_exponents(st, seed)).into_iter().collect::<Result<Vec<_>>>()?;
            let grid = (st.holder_m, st.holder_dt);
            let sp: Vec<f64> = ests.iter().map(|e| e.0).collect();
            let tp: Vec<f64> = ests.iter().map(|e| e.1).collect();
            let (ms, is) = median_iqr(&sp);
            let (mt, it) = median_iqr(&tp);
            b.row(grid, std::slice::from_ref(&kname), "spatial_exponent", ms, is);
            b.row(grid, &[kname], "temporal_exponent", mt, it);
            let need = (st.holder_fraction * cfg.ensemble as f64).ceil() as usize;
            let hs = sp.iter().filter(|v| in_band(**v, st.holder_band[0], st.holder_band[1])).count();
            let ht = tp.iter().filter(|v| in_band(**v, st.holder_time_band[0], st.holder_time_band[1])).count();
            b.check(
                format!("spatial exponent in {:?} for >= {need} seeds", st.holder_band),
                hs >= need,
                format!("{hs} of {}", cfg.ensemble),
            );
            b.check(
                format!("temporal exponent in {:?} for >= {need} seeds", st.holder_time_band),
                ht >= need,
                format!("{ht} of {}", cfg.ensemble),
            );
        }
    }
    Ok(b.finish())
}

/// Paired canonical / modified / corrected runs per seed.
pub fn run_correction(cfg: &ExperimentConfig) -> Result<Report> {
    let n = cfg.solver.n;
    if cfg.area.len() != n * n {
        return Err(invalid(format!("area modifier needs {} entries", n * n)));
    }
    let reports = ensemble(cfg, |seed| correction_experiment(&cfg.solver_for(seed), &cfg.area));
    let mut b = Builder::new(cfg)?;
    let grid = (cfg.solver.m, cfg.solver.dt);
    let mut ratios = Vec::new();
    let (mut bc, mut ba) = (Vec::new(), Vec::new());
    let mut all_identical = true;
    for r in reports {
        let r = r?;
        all_identical &= r.identical;
        bc.push(r.b_minus_c);
        ba.push(r.b_minus_a);
        if let Some(q) = r.ratio() {
            ratios.push(q);
        }
    }
    let (m1, s1) = median_iqr(&bc);
    let (m2, s2) = median_iqr(&ba);
    b.row(grid, &[], "b_minus_c", m1, s1);
    b.row(grid, &[], "b_minus_a", m2, s2);
    if cfg.area.iter().all(|a| *a == 0.0) {
        b.row(grid, &[], "exact_match", if all_identical { 1.0 } else { 0.0 }, 0.0);
        b.check("a = 0 gives identical runs", all_identical, "");
    } else {
        let (mr, sr) = median_iqr(&ratios);
        b.row(grid, &[], "ratio", mr, sr);
        let worst = ratios.iter().copied().fold(0.0, f64::max);
        b.check(
            format!("ratio <= {} for every seed", cfg.max_ratio),
            ratios.len() == cfg.ensemble && worst <= cfg.max_ratio,
            format!("worst {worst:.3e} over {} seeds", ratios.len()),
        );
    }
    Ok(b.finish())
}

/// Gradient discrepancy of one `X` slice restricted to every grid of the
/// ladder: `(discrepancy, scale)` per rung.
pub fn gradient_ladder(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<(f64, f64)>> {
    let m_max = *cfg.m_ladder.last().expect("nonempty");
    let s = &cfg.solver;
    let spec = NoiseSpec::new(1, m_max, s.dt, seed, s.horizon)?;
    let src = NoiseSource::generated(spec)?;
    let opts = SimOptions { retain_stride: spec.steps(), lift: false, ..SimOptions::default() };
    let x = simulate_x_with(&src, XMode::Coupled, &opts)?;
    let fine = x.field().last();
    cfg.m_ladder
        .iter()
        .map(|&m| {
            let u = fine.restrict(m_max / m)?;
            let lift = Arc::new(lift_piecewise_linear(&u));
            let ones = Field::scalar_fn(u.grid(), |_| 1.0);
            let path = make_controlled(u, ones, lift)?;
            let rep = gradient_consistency(&path, &s.g, TestFn::OnePlusCos)?;
            Ok((rep.discrepancy, rep.scale))
        })
        .collect()
}

pub fn run_gradient(cfg: &ExperimentConfig) -> Result<Report> {
    if cfg.solver.g.primitive(0.0).is_none() {
        return Err(invalid("the gradient study needs g with a primitive"));
    }
    let per_seed = ensemble(cfg, |seed| gradient_ladder(cfg, seed)).into_iter().collect::<Result<Vec<_>>>()?;
    let mut b = Builder::new(cfg)?;
    let alpha = cfg.solver.alpha;
    let ms: Vec<f64> = cfg.m_ladder.iter().map(|m| *m as f64).collect();
    let bound = -(3.0 * alpha - 1.0) + 0.2;
    let mut slopes = Vec::new();
    let mut finals = Vec::new();
    for (k, &m) in cfg.m_ladder.iter().enumerate() {
        let d: Vec<f64> = per_seed.iter().map(|v| v[k].0).collect();
        let (md, sd) = median_iqr(&d);
        b.row((m, cfg.solver.dt), &[], "discrepancy", md, sd);
    }
    for v in &per_seed {
        let d: Vec<f64> = v.iter().map(|r| r.0).collect();
        if d.iter().all(|x| *x > 0.0) && d.len() >= 2 {
            slopes.push(loglog_fit(&ms, &d)?.slope);
        } else {
            slopes.push(f64::NEG_INFINITY);
        }
        let (last_d, last_s) = *v.last().expect("nonempty");
        finals.push(if last_s > 0.0 { last_d / last_s } else { last_d });
    }
    let m_hi = *cfg.m_ladder.last().expect("nonempty");
    let (ms_, ss) = median_iqr(&slopes);
    b.row((m_hi, cfg.solver.dt), &[], "slope", ms_, ss);
    let (mf, sf) = median_iqr(&finals);
    b.row((m_hi, cfg.solver.dt), &[], "relative_discrepancy", mf, sf);
    let worst_slope = slopes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let worst_final = finals.iter().copied().fold(0.0, f64::max);
    b.check(
        format!("slope <= {bound:.2} for every seed"),
        worst_slope <= bound && worst_slope < 0.0,
        format!("largest slope {worst_slope:.3}"),
    );
    b.check(
        format!("final discrepancy <= {} of term scale", cfg.max_relative),
        worst_final <= cfg.max_relative,
        format!("largest {worst_final:.3e}"),
    );
    Ok(b.finish())
}

/// Small-scale invariant suite: Chen relation, geometric identity,
/// fixed-point identity, determinism and the noise-free reduction.
pub fn run_validate(cfg: &ExperimentConfig) -> Result<Report> {
    let mut b = Builder::new(cfg)?;
    let s = SolverConfig { m: 64, dt: 1e-3, horizon: 0.02, seed: cfg.seed_base, ..cfg.solver.clone() };
    let grid = (s.m, s.dt);

    let spec = NoiseSpec::new(s.n, s.m, s.dt, s.seed, s.horizon)?;
    let x = simulate_x_with(&NoiseSource::generated(spec)?, XMode::Coupled, &SimOptions::default())?;
    let mut chen = 0.0f64;
    for lift in x.lifts() {
        let size = 1.0 + lift.base().sup_norm().powi(2);
        chen = chen.max(chen_residual(lift) / size);
        if s.n == 1 {
            chen = chen.max(chen_residual(&modify_levy_area(lift, &[1.0])?) / size);
        }
    }
    b.row(grid, &[], "chen_residual", chen, 0.0);
    b.check("Chen relation", chen <= 1e-12, format!("{chen:.3e}"));

    let bundle = solve(&s)?;
    let again = solve(&s)?;
    let same = bundle.u == again.u && bundle.residuals == again.residuals;
    b.row(grid, &[], "deterministic", if same { 1.0 } else { 0.0 }, 0.0);
    b.check("determinism", same, "");
    let defect = fixed_point_defect(&bundle)?;
    b.row(grid, &[], "fixed_point_defect", defect, 0.0);
    b.check("fixed-point identity", defect <= 1e-12, format!("{defect:.3e}"));

    let quiet = SolverConfig { theta: ThetaModel::Zero, g: GModel::Zero, ..s.clone() };
    let q = solve(&quiet)?;
    let mut heat = 0.0f64;
    let u0 = quiet.u0.build(quiet.grid()?, quiet.n)?;
    for l in 0..=q.u.steps() {
        let exact = crate::heat::semigroup_apply(l as f64 * quiet.dt, &u0)?;
        heat = heat.max(q.u.slice(l).sub(&exact)?.sup_norm());
    }
    b.row(grid, &[], "heat_reduction", heat, 0.0);
    b.check("θ ≡ 0, g ≡ 0 reduces to the heat semigroup", heat <= 1e-12, format!("{heat:.3e}"));
    b.check("noise-free run draws no noise", q.noise.as_ref().map(NoiseSource::draws).unwrap_or(0) == 0, "");
    Ok(b.finish())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(invalid(format!("unknown format {other:?}"))),
        }
    }
}

/// Parameter keys in order of first appearance.
fn param_keys(rows: &[ReportRow]) -> Vec<String> {
    let mut keys: Vec<String> = Vec::new();
    for r in rows {
        for (k, _) in &r.params {
            if !keys.contains(k) {
                keys.push(k.clone());
            }
        }
    }
    keys
}

pub fn write_csv<W: Write>(rows: &[ReportRow], w: W) -> Result<()> {
    if rows.is_empty() {
        return Err(invalid("report is empty"));
    }
    let keys = param_keys(rows);
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["experiment".to_string()];
    header.extend(keys.iter().cloned());
    header.extend(["metric", "value", "dispersion", "seed_lo", "seed_hi"].map(String::from));
    wr.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.experiment.clone()];
        rec.extend(keys.iter().map(|k| r.param(k).unwrap_or("").to_string()));
        rec.push(r.metric.clone());
        rec.push(format!("{:e}", r.value));
        rec.push(format!("{:e}", r.dispersion));
        rec.push(r.seed_lo.to_string());
        rec.push(r.seed_hi.to_string());
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

/// Inverse of [`write_csv`]; empty parameter cells are dropped.
pub fn read_csv<R: Read>(r: R) -> Result<Vec<ReportRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(String::from).collect();
    let nh = header.len();
    if nh < 6 || header[0] != "experiment" || header[nh - 5] != "metric" {
        return Err(Error::Format("unexpected report header".into()));
    }
    let keys = &header[1..nh - 5];
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{s:?}: {e}")));
    let int = |s: &str| s.parse::<u64>().map_err(|e| Error::Format(format!("{s:?}: {e}")));
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let params = keys
            .iter()
            .enumerate()
            .filter(|(i, _)| !rec[i + 1].is_empty())
            .map(|(i, k)| (k.clone(), rec[i + 1].to_string()))
            .collect();
        rows.push(ReportRow {
            experiment: rec[0].to_string(),
            params,
            metric: rec[nh - 5].to_string(),
            value: num(&rec[nh - 4])?,
            dispersion: num(&rec[nh - 3])?,
            seed_lo: int(&rec[nh - 2])?,
            seed_hi: int(&rec[nh - 1])?,
        });
    }
    Ok(rows)
}

/// Writes `report.csv` plus `checks.csv`, or `report.json`, into `dir`,
/// together with the echoed configuration.
pub fn emit(report: &Report, cfg: &ExperimentConfig, format: Format, dir: &Path) -> Result<Vec<PathBuf>> {
    if report.rows.is_empty() {
        return Err(invalid("report is empty"));
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let echo = dir.join("experiment.toml");
    std::fs::write(&echo, cfg.to_toml()?)?;
    written.push(echo);
    match format {
        Format::Csv => {
            let path = dir.join("report.csv");
            write_csv(&report.rows, std::fs::File::create(&path)?)?;
            written.push(path);
            let path = dir.join("checks.csv");
            let mut wr = csv::Writer::from_path(&path)?;
            wr.write_record(["check", "passed", "detail"])?;
            for c in &report.checks {
                wr.write_record([c.name.as_str(), if c.passed { "true" } else { "false" }, c.detail.as_str()])?;
            }
            wr.flush()?;
            written.push(path);
        }
        Format::Json => {
            let path = dir.join("report.json");
            let mut f = std::fs::File::create(&path)?;
            serde_json::to_writer_pretty(&mut f, report)?;
            f.write_all(b"\n")?;
            written.push(path);
        }
    }
    Ok(written)
}

pub fn read_json<R: Read>(r: R) -> Result<Report> {
    Ok(serde_json::from_reader(r)?)
}
