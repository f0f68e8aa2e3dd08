//! Smooth nonlinearities `g` and noise coefficients `θ` used by the solver.
//!
//! Both map `R^n` to `n x n` matrices (row-major). Every model carries an
//! analytic Jacobian; no automatic differentiation is involved.

use serde::{Deserialize, Serialize};

/// A smooth map `R^input -> R^output` with analytic first derivative.
pub trait SmoothMap {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval(&self, x: &[f64], out: &mut [f64]);
    /// Jacobian, `output x input`, row-major.
    fn jacobian(&self, x: &[f64], out: &mut [f64]);
    /// Frobenius norm of the second derivative at `x`.
    fn second_derivative_norm(&self, x: &[f64]) -> f64;
}

/// Closure-backed scalar map `R -> R`.
pub struct ScalarMap<F, D, D2>
where
    F: Fn(f64) -> f64,
    D: Fn(f64) -> f64,
    D2: Fn(f64) -> f64,
{
    pub f: F,
    pub df: D,
    pub d2f: D2,
}

impl<F, D, D2> SmoothMap for ScalarMap<F, D, D2>
where
    F: Fn(f64) -> f64,
    D: Fn(f64) -> f64,
    D2: Fn(f64) -> f64,
{
    fn input_dim(&self) -> usize {
        1
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        out[0] = (self.f)(x[0]);
    }
    fn jacobian(&self, x: &[f64], out: &mut [f64]) {
        out[0] = (self.df)(x[0]);
    }
    fn second_derivative_norm(&self, x: &[f64]) -> f64 {
        (self.d2f)(x[0]).abs()
    }
}

/// Identity on `R^n`.
pub struct Identity(pub usize);

impl SmoothMap for Identity {
    fn input_dim(&self) -> usize {
        self.0
    }
    fn output_dim(&self) -> usize {
        self.0
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }
    fn jacobian(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for i in 0..self.0 {
            out[i * self.0 + i] = 1.0;
        }
    }
    fn second_derivative_norm(&self, _x: &[f64]) -> f64 {
        0.0
    }
}

/// Nonlinearity `g: R^n -> R^{n x n}` in `g(u)∂ₓu`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GModel {
    /// `g ≡ 0`.
    Zero,
    /// `g(u) = c·u` (scalar Burgers, `n = 1`).
    Linear { c: f64 },
    /// `g(u) = sin(u)` (`n = 1`).
    Sin,
    /// `g(u) = [[u₂, -u₁], [u₂, -u₁]]` (`n = 2`).
    PureArea,
    /// `g(u) = diag(sin(u_i))`.
    DiagSin,
}

/// Noise coefficient `θ: R^n -> R^{n x n}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThetaModel {
    /// `θ ≡ 0`.
    Zero,
    /// `θ ≡ c·I`.
    Constant { c: f64 },
    /// `θ(u) = (1 + |u|²)^{-1/2} I`.
    InvSqrt,
    /// `θ(u) = c (1 + sin(u_1)/2) I`, bounded, positive, Lipschitz.
    SinBump { c: f64 },
}

impl GModel {
    /// Whether the model is identically zero.
    pub fn is_zero(&self) -> bool {
        matches!(self, GModel::Zero) || matches!(self, GModel::Linear { c } if *c == 0.0)
    }

    /// Dimension required by the model, if fixed.
    pub fn required_dim(&self) -> Option<usize> {
        match self {
            GModel::Linear { .. } | GModel::Sin => Some(1),
            GModel::PureArea => Some(2),
            GModel::Zero | GModel::DiagSin => None,
        }
    }

    /// `g(u)`, `n x n` row-major.
    pub fn eval(&self, u: &[f64], out: &mut [f64]) {
        let n = u.len();
        out.fill(0.0);
        match self {
            GModel::Zero => {}
            GModel::Linear { c } => out[0] = c * u[0],
            GModel::Sin => out[0] = u[0].sin(),
            GModel::PureArea => {
                out[0] = u[1];
                out[1] = -u[0];
                out[2] = u[1];
                out[3] = -u[0];
            }
            GModel::DiagSin => {
                for i in 0..n {
                    out[i * n + i] = u[i].sin();
                }
            }
        }
    }

    /// `∂g_{ik}/∂u_l` stored at `((i * n + k) * n + l)`.
    pub fn jacobian(&self, u: &[f64], out: &mut [f64]) {
        let n = u.len();
        out.fill(0.0);
        match self {
            GModel::Zero => {}
            GModel::Linear { c } => out[0] = *c,
            GModel::Sin => out[0] = u[0].cos(),
            GModel::PureArea => {
                // g_00 = u1, g_01 = -u0, g_10 = u1, g_11 = -u0
                out[1] = 1.0;
                out[2] = -1.0;
                out[5] = 1.0;
                out[6] = -1.0;
            }
            GModel::DiagSin => {
                for i in 0..n {
                    out[(i * n + i) * n + i] = u[i].cos();
                }
            }
        }
    }

    /// Frobenius norm of `D²g(u)`.
    pub fn second_derivative_norm(&self, u: &[f64]) -> f64 {
        match self {
            GModel::Zero | GModel::Linear { .. } | GModel::PureArea => 0.0,
            GModel::Sin => u[0].sin().abs(),
            GModel::DiagSin => u.iter().map(|v| v.sin() * v.sin()).sum::<f64>().sqrt(),
        }
    }

    /// A primitive `G` with `∇G = g` when `g` is a gradient (`n = 1` models).
    pub fn primitive(&self, u: f64) -> Option<f64> {
        match self {
            GModel::Zero => Some(0.0),
            GModel::Linear { c } => Some(0.5 * c * u * u),
            GModel::Sin => Some(-u.cos()),
            _ => None,
        }
    }
}

impl ThetaModel {
    pub fn is_zero(&self) -> bool {
        matches!(self, ThetaModel::Zero) || matches!(self, ThetaModel::Constant { c } if *c == 0.0)
    }

    /// `θ(u)`, `n x n` row-major.
    pub fn eval(&self, u: &[f64], out: &mut [f64]) {
        let n = u.len();
        out.fill(0.0);
        let s = match self {
            ThetaModel::Zero => 0.0,
            ThetaModel::Constant { c } => *c,
            ThetaModel::InvSqrt => 1.0 / (1.0 + u.iter().map(|v| v * v).sum::<f64>()).sqrt(),
            ThetaModel::SinBump { c } => c * (1.0 + 0.5 * u[0].sin()),
        };
        for i in 0..n {
            out[i * n + i] = s;
        }
    }

    /// `∂θ_{ik}/∂u_l` stored at `((i * n + k) * n + l)`.
    pub fn jacobian(&self, u: &[f64], out: &mut [f64]) {
        let n = u.len();
        out.fill(0.0);
        let mut grad = vec![0.0; n];
        match self {
            ThetaModel::Zero | ThetaModel::Constant { .. } => return,
            ThetaModel::InvSqrt => {
                let r2 = 1.0 + u.iter().map(|v| v * v).sum::<f64>();
                let f = -r2.powf(-1.5);
                for l in 0..n {
                    grad[l] = f * u[l];
                }
            }
            ThetaModel::SinBump { c } => grad[0] = 0.5 * c * u[0].cos(),
        }
        for i in 0..n {
            for l in 0..n {
                out[(i * n + i) * n + l] = grad[l];
            }
        }
    }
}

/// The scalar restriction of a [`GModel`] as a [`SmoothMap`] (`n = 1`).
pub struct GScalar<'a>(pub &'a GModel);

impl SmoothMap for GScalar<'_> {
    fn input_dim(&self) -> usize {
        1
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        self.0.eval(x, out);
    }
    fn jacobian(&self, x: &[f64], out: &mut [f64]) {
        self.0.jacobian(x, out);
    }
    fn second_derivative_norm(&self, x: &[f64]) -> f64 {
        self.0.second_derivative_norm(x)
    }
}

/// `g` viewed as a map `R^n -> R^{n·n}` (flattened matrix).
pub struct GFlat<'a> {
    pub model: &'a GModel,
    pub n: usize,
}

impl SmoothMap for GFlat<'_> {
    fn input_dim(&self) -> usize {
        self.n
    }
    fn output_dim(&self) -> usize {
        self.n * self.n
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        self.model.eval(x, out);
    }
    fn jacobian(&self, x: &[f64], out: &mut [f64]) {
        self.model.jacobian(x, out);
    }
    fn second_derivative_norm(&self, x: &[f64]) -> f64 {
        self.model.second_derivative_norm(x)
    }
}
