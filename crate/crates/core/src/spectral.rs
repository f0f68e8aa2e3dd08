//! Discrete Fourier helpers on the periodic grid.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::grid::Field;

/// Planned forward/inverse transforms of length `m` with scratch space.
pub struct Spectral {
    m: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
    buf: Vec<Complex64>,
}

impl Spectral {
    pub fn new(m: usize) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(m);
        let inv = planner.plan_fft_inverse(m);
        let len = fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len());
        Self { m, fwd, inv, scratch: vec![Complex64::new(0.0, 0.0); len], buf: vec![Complex64::new(0.0, 0.0); m] }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Signed wavenumber of DFT index `q`.
    pub fn wavenumber(&self, q: usize) -> i64 {
        wavenumber(self.m, q)
    }

    /// Unnormalised forward transform in place.
    pub fn forward(&mut self, data: &mut [Complex64]) {
        self.fwd.process_with_scratch(data, &mut self.scratch);
    }

    /// Inverse transform in place, normalised so that it undoes [`forward`](Self::forward).
    pub fn inverse(&mut self, data: &mut [Complex64]) {
        self.inv.process_with_scratch(data, &mut self.scratch);
        let s = 1.0 / self.m as f64;
        for z in data.iter_mut() {
            *z *= s;
        }
    }

    /// Applies the Fourier multiplier `mult(q)` to every component of `f`.
    pub fn apply(&mut self, f: &Field, mut mult: impl FnMut(usize) -> Complex64) -> Field {
        let (m, d) = (self.m, f.dim());
        assert_eq!(f.grid().m(), m, "field and transform sizes differ");
        let mut out = Field::zeros(f.grid(), d);
        let mut buf = std::mem::take(&mut self.buf);
        {
            let mut vals = out.periodic_mut();
            for c in 0..d {
                for i in 0..m {
                    buf[i] = Complex64::new(f.get(i, c), 0.0);
                }
                self.forward(&mut buf);
                for (q, z) in buf.iter_mut().enumerate() {
                    *z *= mult(q);
                }
                self.inverse(&mut buf);
                for i in 0..m {
                    vals[i * d + c] = buf[i].re;
                }
            }
        }
        self.buf = buf;
        out
    }

    /// Heat semigroup `S(t)`: mode `k` is multiplied by `exp(-(2πk)² t)`.
    pub fn heat(&mut self, t: f64, f: &Field) -> Field {
        if t == 0.0 {
            return f.clone();
        }
        let m = self.m;
        self.apply(f, |q| Complex64::new(heat_multiplier(m, q, t), 0.0))
    }

    /// Spectral derivative; the Nyquist mode is dropped.
    pub fn derivative(&mut self, f: &Field) -> Field {
        let m = self.m;
        self.apply(f, |q| derivative_multiplier(m, q))
    }
}

pub fn wavenumber(m: usize, q: usize) -> i64 {
    if q <= m / 2 {
        q as i64
    } else {
        q as i64 - m as i64
    }
}

/// Eigenvalue `(2πk)²` of `-Δ` for DFT index `q`.
pub fn laplace_eigenvalue(m: usize, q: usize) -> f64 {
    let k = 2.0 * PI * wavenumber(m, q) as f64;
    k * k
}

pub fn heat_multiplier(m: usize, q: usize, t: f64) -> f64 {
    (-laplace_eigenvalue(m, q) * t).exp()
}

/// `∫₀^τ exp(-λ s) ds`, evaluated stably for small `λτ`.
pub fn phi1(lambda: f64, tau: f64) -> f64 {
    let z = lambda * tau;
    if z < 1e-8 {
        tau * (1.0 - 0.5 * z)
    } else {
        -(-z).exp_m1() / lambda
    }
}

pub fn derivative_multiplier(m: usize, q: usize) -> Complex64 {
    if m.is_multiple_of(2) && q == m / 2 {
        Complex64::new(0.0, 0.0)
    } else {
        Complex64::new(0.0, 2.0 * PI * wavenumber(m, q) as f64)
    }
}
