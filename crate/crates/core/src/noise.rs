//! Seeded space-time white noise on the grid, spatial mollification,
//! covariance estimation and two-dimensional ρ-variation.
//!
//! Increments are cell averages `(1/h)∫_cell (W(t+δt) - W(t))`, so each entry
//! is `N(0, δt·m)`. Variates come from a ChaCha8 stream keyed by the seed,
//! with the step index selecting the stream and the variate index selecting
//! the word position: any `(seed, step, cell, component)` can be evaluated on
//! its own and agrees with block generation.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Error, Result};
use crate::grid::{Field, SpatialGrid};

/// Parameters of one noise realisation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub n: usize,
    pub m: usize,
    pub dt: f64,
    pub seed: u64,
    pub horizon: f64,
}

impl NoiseSpec {
    pub fn new(n: usize, m: usize, dt: f64, seed: u64, horizon: f64) -> Result<Self> {
        let spec = Self { n, m, dt, seed, horizon };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m < 2 || !(self.dt > 0.0) || !(self.horizon >= self.dt) {
            return Err(invalid(format!("invalid noise spec {self:?}")));
        }
        let steps = self.horizon / self.dt;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return Err(invalid(format!("horizon {} is not a multiple of dt {}", self.horizon, self.dt)));
        }
        Ok(())
    }

    /// Number of steps `L = T/δt`.
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn grid(&self) -> SpatialGrid {
        SpatialGrid::new(self.m).expect("validated")
    }
}

/// Cell-averaged increment over `[t_step, t_step + δt]`, `m x n` values
/// ordered cell-major.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseIncrement {
    pub step: usize,
    pub m: usize,
    pub n: usize,
    pub values: Vec<f64>,
}

impl NoiseIncrement {
    pub fn at(&self, cell: usize, comp: usize) -> f64 {
        self.values[cell * self.n + comp]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn scaled(&self, c: f64) -> NoiseIncrement {
        NoiseIncrement { values: self.values.iter().map(|v| c * v).collect(), ..self.clone() }
    }
}

fn unit_open(word: u64) -> f64 {
    ((word >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn unit_closed_open(word: u64) -> f64 {
    (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn box_muller(a: u64, b: u64) -> (f64, f64) {
    let r = (-2.0 * unit_open(a).ln()).sqrt();
    let (s, c) = (2.0 * PI * unit_closed_open(b)).sin_cos();
    (r * c, r * s)
}

const SPECTRAL_DOMAIN: u64 = 1 << 63;
const HOLDER_DOMAIN: u64 = 1 << 62;

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard normal variate `index` of stream `(seed, step)`.
pub fn standard_variate(seed: u64, step: u64, index: u64) -> f64 {
    let mut rng = stream(seed, step);
    rng.set_word_pos(u128::from(index / 2) * 4);
    let (a, b) = (rng.next_u64(), rng.next_u64());
    let (z0, z1) = box_muller(a, b);
    if index.is_multiple_of(2) {
        z0
    } else {
        z1
    }
}

/// Fills `out` with standard normal variates `0..out.len()` of stream
/// `(seed, step)`.
pub fn standard_block(seed: u64, step: u64, out: &mut [f64]) {
    let mut rng = stream(seed, step);
    for pair in out.chunks_mut(2) {
        let (a, b) = (rng.next_u64(), rng.next_u64());
        let (z0, z1) = box_muller(a, b);
        pair[0] = z0;
        if pair.len() > 1 {
            pair[1] = z1;
        }
    }
}

/// Standard normals for the spectral simulation of `X`, keyed by
/// `(seed, step)` on a stream family disjoint from the cell noise.
pub fn spectral_normals(seed: u64, step: u64, out: &mut [f64]) {
    let mut rng = stream(seed, SPECTRAL_DOMAIN | step);
    for v in out.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
}

/// One increment of the cell noise.
pub fn sample_increments(spec: &NoiseSpec, step: usize) -> Result<NoiseIncrement> {
    spec.validate()?;
    if step >= spec.steps() {
        return Err(Error::OutOfRange(format!("step {step} beyond L = {}", spec.steps())));
    }
    let mut values = vec![0.0; spec.m * spec.n];
    standard_block(spec.seed, step as u64, &mut values);
    let s = (spec.dt * spec.m as f64).sqrt();
    for v in values.iter_mut() {
        *v *= s;
    }
    Ok(NoiseIncrement { step, m: spec.m, n: spec.n, values })
}

/// A noise realisation that is either generated on demand or replayed.
#[derive(Debug)]
pub struct NoiseSource {
    spec: NoiseSpec,
    replay: Option<Vec<f64>>,
    draws: AtomicU64,
}

impl Clone for NoiseSource {
    fn clone(&self) -> Self {
        Self { spec: self.spec, replay: self.replay.clone(), draws: AtomicU64::new(self.draws.load(Ordering::Relaxed)) }
    }
}

impl NoiseSource {
    pub fn generated(spec: NoiseSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, replay: None, draws: AtomicU64::new(0) })
    }

    pub fn spec(&self) -> &NoiseSpec {
        &self.spec
    }

    /// Increments handed out so far (generated or replayed).
    pub fn draws(&self) -> u64 {
        self.draws.load(Ordering::Relaxed)
    }

    pub fn increment(&self, step: usize) -> Result<NoiseIncrement> {
        self.draws.fetch_add(1, Ordering::Relaxed);
        match &self.replay {
            None => sample_increments(&self.spec, step),
            Some(data) => {
                if step >= self.spec.steps() {
                    return Err(Error::OutOfRange(format!("step {step} beyond replay length")));
                }
                let len = self.spec.m * self.spec.n;
                Ok(NoiseIncrement {
                    step,
                    m: self.spec.m,
                    n: self.spec.n,
                    values: data[step * len..(step + 1) * len].to_vec(),
                })
            }
        }
    }

    /// Writes the replay format: `seed: u64, n: u64, m: u64, dt: f64, T: f64`
    /// (little endian), then every increment in step-major order.
    pub fn write_replay<W: Write>(&self, mut w: W) -> Result<()> {
        let s = &self.spec;
        w.write_all(&s.seed.to_le_bytes())?;
        w.write_all(&(s.n as u64).to_le_bytes())?;
        w.write_all(&(s.m as u64).to_le_bytes())?;
        w.write_all(&s.dt.to_le_bytes())?;
        w.write_all(&s.horizon.to_le_bytes())?;
        for step in 0..s.steps() {
            let inc = match &self.replay {
                Some(_) => self.increment(step)?,
                None => sample_increments(s, step)?,
            };
            for v in inc.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_replay(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_replay<R: Read>(mut r: R) -> Result<Self> {
        let mut b8 = [0u8; 8];
        let mut u = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let seed = u(&mut r)?;
        let n = u(&mut r)? as usize;
        let m = u(&mut r)? as usize;
        let dt = f64::from_bits(u(&mut r)?);
        let horizon = f64::from_bits(u(&mut r)?);
        let spec = NoiseSpec::new(n, m, dt, seed, horizon)?;
        let count = spec.steps() * m * n;
        let mut bytes = Vec::with_capacity(count * 8);
        r.read_to_end(&mut bytes)?;
        if bytes.len() != count * 8 {
            return Err(Error::Format(format!("replay payload has {} bytes, expected {}", bytes.len(), count * 8)));
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Self { spec, replay: Some(data), draws: AtomicU64::new(0) })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_replay(std::io::BufReader::new(f))
    }
}

/// `η(x) = c exp(-1/(1-x²))` on `(-1,1)` with unit mass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mollifier {
    pub eps: f64,
}

/// `∫_{-1}^{1} exp(-1/(1-x²)) dx`.
const BUMP_MASS: f64 = 0.443_993_816_168_079_3;

impl Mollifier {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(invalid(format!("mollifier width must be positive, got {eps}")));
        }
        Ok(Self { eps })
    }

    /// Unit-mass profile `η`.
    pub fn profile(x: f64) -> f64 {
        if x.abs() >= 1.0 {
            0.0
        } else {
            (-1.0 / (1.0 - x * x)).exp() / BUMP_MASS
        }
    }

    /// `η_ε(x) = ε^{-1} η(x/ε)`.
    pub fn density(&self, x: f64) -> f64 {
        Self::profile(x / self.eps) / self.eps
    }

    /// Discrete kernel at offsets `-J..=J` cells, renormalised to sum 1.
    pub fn weights(&self, m: usize) -> Vec<f64> {
        let h = 1.0 / m as f64;
        let reach = ((self.eps / h).ceil() as usize).min(m / 2);
        let mut w: Vec<f64> = (0..=2 * reach).map(|j| self.density((j as f64 - reach as f64) * h)).collect();
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            for v in w.iter_mut() {
                *v /= total;
            }
        } else {
            w = vec![1.0];
        }
        w
    }
}

fn convolve_periodic(values: &[f64], m: usize, n: usize, w: &[f64]) -> Vec<f64> {
    if w.len() == 1 {
        return values.iter().map(|v| w[0] * v).collect();
    }
    let reach = (w.len() - 1) / 2;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for (j, wj) in w.iter().enumerate() {
            let src = (i + m + reach - j) % m;
            for c in 0..n {
                out[i * n + c] += wj * values[src * n + c];
            }
        }
    }
    out
}

/// Periodic convolution of the cell values with the sampled `η_ε`.
pub fn mollify(inc: &NoiseIncrement, eps: f64) -> Result<NoiseIncrement> {
    let w = Mollifier::new(eps)?.weights(inc.m);
    Ok(NoiseIncrement { values: convolve_periodic(&inc.values, inc.m, inc.n, &w), ..inc.clone() })
}

/// The same convolution applied to a field.
pub fn mollify_field(f: &Field, eps: f64) -> Result<Field> {
    let m = f.grid().m();
    let w = Mollifier::new(eps)?.weights(m);
    let vals = convolve_periodic(&f.values()[..m * f.dim()], m, f.dim(), &w);
    Field::from_periodic(f.grid(), f.dim(), vals)
}

/// `ρ`-variation of a two-variable function sampled on a rectangle grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RhoVariation {
    pub value: f64,
    /// `true` for `ρ = 1` (exact over grid partitions); `false` marks the
    /// dyadic-ladder lower bound used for `ρ > 1`.
    pub exact: bool,
}

/// `values` holds `K(x_i, y_j)` row-major with `(nx + 1) x (ny + 1)` entries.
pub fn rho_variation(values: &[f64], nx: usize, ny: usize, rho: f64) -> Result<RhoVariation> {
    if !(rho >= 1.0) {
        return Err(invalid(format!("rho = {rho} must be at least 1")));
    }
    if nx == 0 || ny == 0 || values.len() != (nx + 1) * (ny + 1) {
        return Err(mismatch("sample array does not match the rectangle grid"));
    }
    let k = |i: usize, j: usize| values[i * (ny + 1) + j];
    let sum_at = |sx: usize, sy: usize| -> f64 {
        let mut s = 0.0;
        let mut i = 0;
        while i < nx {
            let i2 = (i + sx).min(nx);
            let mut j = 0;
            while j < ny {
                let j2 = (j + sy).min(ny);
                let inc = k(i2, j2) - k(i2, j) - k(i, j2) + k(i, j);
                s += inc.abs().powf(rho);
                j = j2;
            }
            i = i2;
        }
        s.powf(1.0 / rho)
    };
    if rho == 1.0 {
        return Ok(RhoVariation { value: sum_at(1, 1), exact: true });
    }
    let mut best: f64 = 0.0;
    let (mut sx, mut sy) = (1usize, 1usize);
    loop {
        best = best.max(sum_at(sx, sy));
        if sx >= nx && sy >= ny {
            break;
        }
        sx = (sx * 2).min(nx);
        sy = (sy * 2).min(ny);
    }
    Ok(RhoVariation { value: best, exact: false })
}

/// `K¹(x) = ½|x| - ½x² - 1/12`.
///
/// Note that the cosine series `Σ_{k≥1} (2πk)^{-2} cos(2πkx)` equals
/// `x²/4 - |x|/4 + 1/24 = -K¹(x)/2`; the covariance target below uses the
/// series, which is what the simulated field realises.
pub fn k1_closed_form(x: f64) -> f64 {
    0.5 * x.abs() - 0.5 * x * x - 1.0 / 12.0
}

/// `K_t(x) = Σ_{k=1}^{k_max} (2πk)^{-2} (1 - e^{-2(2πk)²t}) cos(2πkx)`.
pub fn k_t_mode_sum(t: f64, x: f64, k_max: usize) -> f64 {
    (1..=k_max)
        .map(|k| {
            let w = 2.0 * PI * k as f64;
            let lam = w * w;
            (1.0 - (-2.0 * lam * t).exp()) / lam * (w * x).cos()
        })
        .sum()
}

/// `E[X(t,x) X(t,y)] = t + K_t(x - y)` truncated at `k_max`.
pub fn covariance_target(t: f64, x: f64, k_max: usize) -> f64 {
    t + k_t_mode_sum(t, x, k_max)
}

/// Empirical second moments of one component across an ensemble.
#[derive(Clone, Debug)]
pub struct EmpiricalCovariance {
    pub samples: usize,
    pub nodes: usize,
    /// `K̂(x_i, x_j)`, `nodes x nodes`, row-major.
    pub khat: Vec<f64>,
    /// Standard error of each diagonal entry.
    pub diag_stderr: Vec<f64>,
}

impl EmpiricalCovariance {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.khat[i * self.nodes + j]
    }
}

pub fn covariance_estimate(samples: &[Field], component: usize) -> Result<EmpiricalCovariance> {
    if samples.len() < 100 {
        return Err(invalid(format!("need at least 100 samples, got {}", samples.len())));
    }
    let grid = samples[0].grid();
    if samples.iter().any(|s| s.grid() != grid || component >= s.dim()) {
        return Err(mismatch("samples differ in grid or lack the component"));
    }
    let nodes = grid.nodes();
    let count = samples.len() as f64;
    let mut khat = vec![0.0; nodes * nodes];
    let mut fourth = vec![0.0; nodes];
    for s in samples {
        let v = s.component(component);
        for i in 0..nodes {
            for j in 0..nodes {
                khat[i * nodes + j] += v[i] * v[j];
            }
            fourth[i] += v[i].powi(4);
        }
    }
    for v in khat.iter_mut() {
        *v /= count;
    }
    let diag_stderr = (0..nodes)
        .map(|i| {
            let m2 = khat[i * nodes + i];
            ((fourth[i] / count - m2 * m2).max(0.0) / (count - 1.0)).sqrt()
        })
        .collect();
    Ok(EmpiricalCovariance { samples: samples.len(), nodes, khat, diag_stderr })
}

/// A random `β`-Hölder periodic path: `Σ_k (2πk)^{-(β+1/2)} (a_k √2 cos + b_k √2 sin)`
/// with standard Gaussian coefficients, scaled by `amplitude`.
pub fn sample_holder_path(grid: SpatialGrid, dim: usize, beta: f64, seed: u64, amplitude: f64) -> Result<Field> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(invalid(format!("beta = {beta} outside (0,1)")));
    }
    let m = grid.m();
    let kmax = m / 2;
    let mut coeffs = vec![0.0; 2 * kmax * dim];
    standard_block(seed, HOLDER_DOMAIN, &mut coeffs);
    let field = Field::from_fn(grid, dim, |x, out| {
        for (c, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in 1..kmax {
                let w = 2.0 * PI * k as f64;
                let decay = w.powf(-(beta + 0.5));
                let (sn, cs) = (w * x).sin_cos();
                let base = 2 * (k * dim + c);
                s += decay * std::f64::consts::SQRT_2 * (coeffs[base] * cs + coeffs[base + 1] * sn);
            }
            *o = amplitude * s;
        }
    });
    Ok(field)
}
