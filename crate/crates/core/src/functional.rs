//! Cylindrical functionals `F(t, y, m) = f(t, y, m(φ_1), ..., m(φ_J))`.
//!
//! For this family every derivative on the measure argument has a closed form:
//!
//! * `δF/δm(t,y,m)(x) = Σ_j ∂_{z_j} f(t,y,z) φ_j(x)` (chain-rule representative,
//!   no extra additive constant),
//! * `D_m F(t,y,m,x) = Σ_j ∂_{z_j} f φ_j'(x)`,
//! * `∂_x D_m F = Σ_j ∂_{z_j} f φ_j''(x)`,
//! * `D²_m F(x, x') = Σ_{j,k} ∂²_{z_j z_k} f φ_j'(x) φ_k'(x')ᵀ`,
//!
//! with `z = (m(φ_1), ..., m(φ_J))`. The derivatives of `f` and of the `φ_j` are
//! supplied, and [`CylindricalFunctional::validate_derivatives`] checks them
//! against central finite differences.

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;

/// Growth class of a test function `φ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Growth {
    Bounded,
    Linear,
    Quadratic,
}

type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type FillFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// `φ: R^d -> R` with gradient and Hessian.
#[derive(Clone)]
pub struct TestFunction {
    name: String,
    dim: usize,
    value: ScalarFn,
    grad: FillFn,
    hess: FillFn,
    growth: Growth,
    /// `L` such that `|φ'(x)| ≤ L (1 + |x|)`.
    derivative_growth: f64,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("growth", &self.growth)
            .finish()
    }
}

impl TestFunction {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        growth: Growth,
        derivative_growth: f64,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        hess: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            dim,
            value: Arc::new(value),
            grad: Arc::new(grad),
            hess: Arc::new(hess),
            growth,
            derivative_growth,
        }
    }

    /// `x ↦ x_j`.
    pub fn coordinate(dim: usize, j: usize) -> Self {
        assert!(j < dim);
        Self::new(
            format!("x_{}", j + 1),
            dim,
            Growth::Linear,
            1.0,
            move |x| x[j],
            move |_x, g| {
                g.fill(0.0);
                g[j] = 1.0;
            },
            |_x, h| h.fill(0.0),
        )
    }

    /// `x ↦ |x|²`.
    pub fn squared_norm(dim: usize) -> Self {
        Self::new(
            "|x|^2",
            dim,
            Growth::Quadratic,
            2.0,
            |x| x.iter().map(|v| v * v).sum(),
            |x, g| g.iter_mut().zip(x).for_each(|(g, x)| *g = 2.0 * x),
            move |_x, h| {
                h.fill(0.0);
                for j in 0..dim {
                    h[j * dim + j] = 2.0;
                }
            },
        )
    }

    /// `x ↦ s((x_j - c)/h)` with the logistic sigmoid `s`.
    pub fn sigmoid(dim: usize, j: usize, center: f64, width: f64) -> Self {
        assert!(j < dim && width > 0.0);
        let s = move |x: &[f64]| 1.0 / (1.0 + (-(x[j] - center) / width).exp());
        Self::new(
            format!("sigmoid((x_{}-{center})/{width})", j + 1),
            dim,
            Growth::Bounded,
            0.25 / width,
            s,
            move |x, g| {
                let v = s(x);
                g.fill(0.0);
                g[j] = v * (1.0 - v) / width;
            },
            move |x, h| {
                let v = s(x);
                h.fill(0.0);
                h[j * dim + j] = v * (1.0 - v) * (1.0 - 2.0 * v) / (width * width);
            },
        )
    }

    /// `x ↦ sin(w x_j)`.
    pub fn sine(dim: usize, j: usize, w: f64) -> Self {
        Self::new(
            format!("sin({w} x_{})", j + 1),
            dim,
            Growth::Bounded,
            w.abs(),
            move |x| (w * x[j]).sin(),
            move |x, g| {
                g.fill(0.0);
                g[j] = w * (w * x[j]).cos();
            },
            move |x, h| {
                h.fill(0.0);
                h[j * dim + j] = -w * w * (w * x[j]).sin();
            },
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn growth(&self) -> Growth {
        self.growth
    }

    pub fn derivative_growth(&self) -> f64 {
        self.derivative_growth
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    pub fn grad(&self, x: &[f64], out: &mut [f64]) {
        (self.grad)(x, out)
    }

    pub fn hess(&self, x: &[f64], out: &mut [f64]) {
        (self.hess)(x, out)
    }
}

/// The outer map `f(t, y, z)` with its supplied derivatives.
pub trait OuterMap: Send + Sync + fmt::Debug {
    /// Number `J` of measure moments `z`.
    fn arity(&self) -> usize;
    fn depends_on_y(&self) -> bool;
    fn value(&self, t: f64, y: &[f64], z: &[f64]) -> f64;
    fn d_t(&self, t: f64, y: &[f64], z: &[f64]) -> f64;
    fn grad_y(&self, t: f64, y: &[f64], z: &[f64], out: &mut [f64]);
    fn grad_z(&self, t: f64, y: &[f64], z: &[f64], out: &mut [f64]);
    /// Row-major `J x J`.
    fn hess_z(&self, t: f64, y: &[f64], z: &[f64], out: &mut [f64]);
}

/// `coeff · t^t_pow · Π y_l^{y_pows[l]} · Π z_j^{z_pows[j]}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Monomial {
    pub coeff: f64,
    pub t_pow: u32,
    pub y_pows: Vec<u32>,
    pub z_pows: Vec<u32>,
}

impl Monomial {
    pub fn new(coeff: f64, t_pow: u32, y_pows: Vec<u32>, z_pows: Vec<u32>) -> Self {
        Self {
            coeff,
            t_pow,
            y_pows,
            z_pows,
        }
    }

    fn factor(base: f64, pow: u32, deriv: u32) -> f64 {
        if deriv > pow {
            return 0.0;
        }
        let falling: f64 = (0..deriv).map(|i| (pow - i) as f64).product();
        falling * base.powi((pow - deriv) as i32)
    }

    /// Mixed derivative of orders `dt` in `t`, `dy` in `y`, `dz` in `z`.
    fn eval(&self, t: f64, y: &[f64], z: &[f64], dt: u32, dy: &[u32], dz: &[u32]) -> f64 {
        if self.y_pows.is_empty() && dy.iter().any(|&o| o > 0) {
            return 0.0;
        }
        let mut v = self.coeff * Self::factor(t, self.t_pow, dt);
        for (l, &p) in self.y_pows.iter().enumerate() {
            v *= Self::factor(y[l], p, dy.get(l).copied().unwrap_or(0));
        }
        for (j, &p) in self.z_pows.iter().enumerate() {
            v *= Self::factor(z[j], p, dz.get(j).copied().unwrap_or(0));
        }
        v
    }
}

/// Polynomial outer map, a sum of [`Monomial`]s.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialMap {
    arity: usize,
    y_dim: usize,
    terms: Vec<Monomial>,
}

impl PolynomialMap {
    pub fn new(arity: usize, y_dim: usize, terms: Vec<Monomial>) -> Result<Self> {
        for m in &terms {
            if m.z_pows.len() != arity || (!m.y_pows.is_empty() && m.y_pows.len() != y_dim) {
                return Err(Error::invalid("terms", format!("monomial {m:?} does not match arity {arity}, y_dim {y_dim}")));
            }
        }
        Ok(Self { arity, y_dim, terms })
    }

    fn unit(n: usize, i: usize, order: u32) -> Vec<u32> {
        let mut v = vec![0; n];
        v[i] = order;
        v
    }

    fn sum(&self, t: f64, y: &[f64], z: &[f64], dt: u32, dy: &[u32], dz: &[u32]) -> f64 {
        self.terms.iter().map(|m| m.eval(t, y, z, dt, dy, dz)).sum()
    }
}

impl OuterMap for PolynomialMap {
    fn arity(&self) -> usize {
        self.arity
    }

    fn depends_on_y(&self) -> bool {
        self.terms.iter().any(|m| m.y_pows.iter().any(|&p| p > 0))
    }

    fn value(&self, t: f64, y: &[f64], z: &[f64]) -> f64 {
        self.sum(t, y, z, 0, &[], &[])
    }

    fn d_t(&self, t: f64, y: &[f64], z: &[f64]) -> f64 {
        self.sum(t, y, z, 1, &[], &[])
    }

    fn grad_y(&self, t: f64, y: &[f64], z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        if !self.depends_on_y() {
            return;
        }
        for (l, o) in out.iter_mut().enumerate().take(self.y_dim) {
            *o = self.sum(t, y, z, 0, &Self::unit(self.y_dim, l, 1), &[]);
        }
    }

    fn grad_z(&self, t: f64, y: &[f64], z: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.sum(t, y, z, 0, &[], &Self::unit(self.arity, j, 1));
        }
    }

    fn hess_z(&self, t: f64, y: &[f64], z: &[f64], out: &mut [f64]) {
        let n = self.arity;
        for j in 0..n {
            for k in 0..n {
                let mut dz = vec![0; n];
                dz[j] += 1;
                dz[k] += 1;
                out[j * n + k] = self.sum(t, y, z, 0, &[], &dz);
            }
        }
    }
}

/// Wraps an outer map and scales its supplied `∇_z f`, leaving the value
/// untouched. Only useful as a negative control for derivative validation.
#[derive(Debug, Clone)]
pub struct ScaledGradient<M> {
    pub inner: M,
    pub scale: f64,
}

impl<M: OuterMap> OuterMap for ScaledGradient<M> {
    fn arity(&self) -> usize {
        self.inner.arity()
    }
    fn depends_on_y(&self) -> bool {
        self.inner.depends_on_y()
    }
    fn value(&self, t: f64, y: &[f64], z: &[f64]) -> f64 {
        self.inner.value(t, y, z)
    }
    fn d_t(&self, t: f64, y: &[f64], z: &[f64]) -> f64 {
        self.inner.d_t(t, y, z)
    }
    fn grad_y(&self, t: f64, y: &[f64], z: &[f64], out: &mut [f64]) {
        self.inner.grad_y(t, y, z, out)
    }
    fn grad_z(&self, t: f64, y: &[f64], z: &[f64], out: &mut [f64]) {
        self.inner.grad_z(t, y, z, out);
        out.iter_mut().for_each(|v| *v *= self.scale);
    }
    fn hess_z(&self, t: f64, y: &[f64], z: &[f64], out: &mut [f64]) {
        self.inner.hess_z(t, y, z, out)
    }
}

/// Second-order data at `(t, y, μ, x, x')`.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondDerivatives {
    pub d_t: f64,
    /// `∂_x D_m F(x)`, row-major `d x d`.
    pub dx_dm: Vec<f64>,
    /// `D²_m F(x, x')`, row-major `d x d`, entry `(a, b)` pairs `x_a` with `x'_b`.
    pub d2_m: Vec<f64>,
}

/// Maximum absolute deviation between supplied derivatives and central differences.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DerivativeReport {
    pub test_grad: f64,
    pub test_hess: f64,
    pub outer_t: f64,
    pub outer_y: f64,
    pub outer_z: f64,
    pub outer_zz: f64,
}

impl DerivativeReport {
    pub fn worst(&self) -> f64 {
        [self.test_grad, self.test_hess, self.outer_t, self.outer_y, self.outer_z, self.outer_zz]
            .into_iter()
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.worst() < tol
    }
}

/// Central-difference step used by the validators.
pub const FD_STEP: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// `F(t, y, m) = f(t, y, m(φ_1), ..., m(φ_J))` on `R^d`.
#[derive(Clone)]
pub struct CylindricalFunctional {
    name: String,
    dim: usize,
    outer: Arc<dyn OuterMap>,
    tests: Vec<TestFunction>,
}

impl fmt::Debug for CylindricalFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CylindricalFunctional")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("outer", &self.outer)
            .field("tests", &self.tests)
            .finish()
    }
}

impl CylindricalFunctional {
    pub fn new(name: impl Into<String>, dim: usize, outer: Arc<dyn OuterMap>, tests: Vec<TestFunction>) -> Result<Self> {
        if tests.is_empty() {
            return Err(Error::invalid("tests", "a cylindrical functional needs at least one test function"));
        }
        if outer.arity() != tests.len() {
            return Err(Error::DimensionMismatch {
                expected: tests.len(),
                got: outer.arity(),
                context: "outer map arity",
            });
        }
        if let Some(t) = tests.iter().find(|t| t.dim != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: t.dim,
                context: "test function dimension",
            });
        }
        Ok(Self {
            name: name.into(),
            dim,
            outer,
            tests,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn arity(&self) -> usize {
        self.tests.len()
    }

    pub fn tests(&self) -> &[TestFunction] {
        &self.tests
    }

    pub fn outer(&self) -> &dyn OuterMap {
        self.outer.as_ref()
    }

    pub fn depends_on_y(&self) -> bool {
        self.outer.depends_on_y()
    }

    /// `z(μ) = (μ(φ_1), ..., μ(φ_J))`.
    pub fn moments(&self, mu: &EmpiricalMeasure) -> Result<Vec<f64>> {
        self.check_measure(mu)?;
        self.tests.iter().map(|phi| mu.integrate(|x| phi.value(x))).collect()
    }

    fn check_measure(&self, mu: &EmpiricalMeasure) -> Result<()> {
        if mu.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: mu.dim(),
                context: "measure dimension",
            });
        }
        Ok(())
    }

    fn finite(&self, v: f64, context: &'static str, t: f64, y: &[f64]) -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                context,
                t,
                x: y.to_vec(),
            })
        }
    }

    pub fn eval_at(&self, t: f64, y: &[f64], z: &[f64]) -> f64 {
        self.outer.value(t, y, z)
    }

    pub fn eval(&self, t: f64, y: &[f64], mu: &EmpiricalMeasure) -> Result<f64> {
        let z = self.moments(mu)?;
        self.finite(self.outer.value(t, y, &z), "F", t, y)
    }

    pub fn d_y(&self, t: f64, y: &[f64], mu: &EmpiricalMeasure) -> Result<Vec<f64>> {
        let z = self.moments(mu)?;
        let mut g = vec![0.0; self.dim];
        self.outer.grad_y(t, y, &z, &mut g);
        for &v in &g {
            self.finite(v, "D_y F", t, y)?;
        }
        Ok(g)
    }

    pub fn grad_z_at(&self, t: f64, y: &[f64], z: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.arity()];
        self.outer.grad_z(t, y, z, &mut g);
        g
    }

    /// `δF/δm` at moments `z`, given `∇_z f(t, y, z)` as `fz`.
    pub fn linear_derivative_with(&self, fz: &[f64], x: &[f64]) -> f64 {
        self.tests.iter().zip(fz).map(|(phi, c)| c * phi.value(x)).sum()
    }

    /// `D_m F` at moments `z`, given `∇_z f(t, y, z)` as `fz`; `out` has length `d`.
    pub fn lions_derivative_with(&self, fz: &[f64], x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let mut stack = [0.0; 16];
        let mut heap = Vec::new();
        let g: &mut [f64] = if self.dim <= stack.len() {
            &mut stack[..self.dim]
        } else {
            heap.resize(self.dim, 0.0);
            &mut heap
        };
        for (phi, c) in self.tests.iter().zip(fz) {
            phi.grad(x, g);
            for (o, gi) in out.iter_mut().zip(g.iter()) {
                *o += c * gi;
            }
        }
    }

    pub fn linear_derivative(&self, t: f64, y: &[f64], mu: &EmpiricalMeasure, x: &[f64]) -> Result<f64> {
        let z = self.moments(mu)?;
        let fz = self.grad_z_at(t, y, &z);
        self.finite(self.linear_derivative_with(&fz, x), "δF/δm", t, x)
    }

    pub fn lions_derivative(&self, t: f64, y: &[f64], mu: &EmpiricalMeasure, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.moments(mu)?;
        let fz = self.grad_z_at(t, y, &z);
        let mut out = vec![0.0; self.dim];
        self.lions_derivative_with(&fz, x, &mut out);
        for &v in &out {
            self.finite(v, "D_m F", t, x)?;
        }
        Ok(out)
    }

    pub fn second_derivatives(
        &self,
        t: f64,
        y: &[f64],
        mu: &EmpiricalMeasure,
        x: &[f64],
        x_prime: &[f64],
    ) -> Result<SecondDerivatives> {
        let d = self.dim;
        let j = self.arity();
        let z = self.moments(mu)?;
        let fz = self.grad_z_at(t, y, &z);
        let mut fzz = vec![0.0; j * j];
        self.outer.hess_z(t, y, &z, &mut fzz);

        let mut dx_dm = vec![0.0; d * d];
        let mut h = vec![0.0; d * d];
        for (phi, c) in self.tests.iter().zip(&fz) {
            phi.hess(x, &mut h);
            dx_dm.iter_mut().zip(&h).for_each(|(o, v)| *o += c * v);
        }
        let grads = |p: &[f64]| -> Vec<Vec<f64>> {
            self.tests
                .iter()
                .map(|phi| {
                    let mut g = vec![0.0; d];
                    phi.grad(p, &mut g);
                    g
                })
                .collect()
        };
        let gx = grads(x);
        let gxp = grads(x_prime);
        let mut d2_m = vec![0.0; d * d];
        for a in 0..j {
            for b in 0..j {
                let c = fzz[a * j + b];
                if c == 0.0 {
                    continue;
                }
                for r in 0..d {
                    for s in 0..d {
                        d2_m[r * d + s] += c * gx[a][r] * gxp[b][s];
                    }
                }
            }
        }
        let out = SecondDerivatives {
            d_t: self.outer.d_t(t, y, &z),
            dx_dm,
            d2_m,
        };
        if std::iter::once(out.d_t).chain(out.dx_dm.iter().copied()).chain(out.d2_m.iter().copied()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "second derivatives",
                t,
                x: x.to_vec(),
            });
        }
        Ok(out)
    }

    /// `C` with `|D_m F(t, y, μ, x)| ≤ C (1 + |x|)` for all `x`, at the given `(t, y, μ)`.
    pub fn growth_constant(&self, t: f64, y: &[f64], z: &[f64]) -> Result<f64> {
        let fz = self.grad_z_at(t, y, z);
        let c: f64 = self
            .tests
            .iter()
            .zip(&fz)
            .map(|(phi, c)| c.abs() * phi.derivative_growth)
            .sum();
        if c.is_finite() {
            Ok(c)
        } else {
            Err(Error::GrowthCertificate(format!(
                "|∇_z f| is not finite at t = {t}, z = {z:?} for `{}`",
                self.name
            )))
        }
    }

    /// Compare every supplied derivative with central differences at `samples`
    /// random points drawn from `rng` (points in `[-2, 2]^d`, `t ∈ [0, 1]`).
    pub fn validate_derivatives<R: Rng + ?Sized>(&self, rng: &mut R, samples: usize) -> DerivativeReport {
        let d = self.dim;
        let j = self.arity();
        let h = FD_STEP;
        let mut rep = DerivativeReport::default();
        let mut g = vec![0.0; d];
        let mut gp = vec![0.0; d];
        let mut gm = vec![0.0; d];
        let mut hs = vec![0.0; d * d];
        for _ in 0..samples {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            for phi in &self.tests {
                phi.grad(&x, &mut g);
                phi.hess(&x, &mut hs);
                for a in 0..d {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[a] += h;
                    xm[a] -= h;
                    let fd = (phi.value(&xp) - phi.value(&xm)) / (2.0 * h);
                    rep.test_grad = rep.test_grad.max(rel_err(g[a], fd));
                    phi.grad(&xp, &mut gp);
                    phi.grad(&xm, &mut gm);
                    for b in 0..d {
                        let fd2 = (gp[b] - gm[b]) / (2.0 * h);
                        rep.test_hess = rep.test_hess.max(rel_err(hs[b * d + a], fd2));
                    }
                }
            }

            let t: f64 = rng.random_range(0.0..1.0);
            let y: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let z: Vec<f64> = (0..j).map(|_| rng.random_range(-2.0..2.0)).collect();
            let f = |t: f64, y: &[f64], z: &[f64]| self.outer.value(t, y, z);

            let fd_t = (f(t + h, &y, &z) - f(t - h, &y, &z)) / (2.0 * h);
            rep.outer_t = rep.outer_t.max(rel_err(self.outer.d_t(t, &y, &z), fd_t));

            let mut gy = vec![0.0; d];
            self.outer.grad_y(t, &y, &z, &mut gy);
            for a in 0..d {
                let (mut yp, mut ym) = (y.clone(), y.clone());
                yp[a] += h;
                ym[a] -= h;
                let fd = (f(t, &yp, &z) - f(t, &ym, &z)) / (2.0 * h);
                rep.outer_y = rep.outer_y.max(rel_err(gy[a], fd));
            }

            let gz = self.grad_z_at(t, &y, &z);
            let mut hz = vec![0.0; j * j];
            self.outer.hess_z(t, &y, &z, &mut hz);
            for a in 0..j {
                let (mut zp, mut zm) = (z.clone(), z.clone());
                zp[a] += h;
                zm[a] -= h;
                let fd = (f(t, &y, &zp) - f(t, &y, &zm)) / (2.0 * h);
                rep.outer_z = rep.outer_z.max(rel_err(gz[a], fd));
                let gzp = self.grad_z_at(t, &y, &zp);
                let gzm = self.grad_z_at(t, &y, &zm);
                for b in 0..j {
                    let fd2 = (gzp[b] - gzm[b]) / (2.0 * h);
                    rep.outer_zz = rep.outer_zz.max(rel_err(hz[b * j + a], fd2));
                }
            }
        }
        rep
    }

    /// `|D_m F(x) - ∇_x δF/δm(x)|_∞` with the gradient taken by central differences.
    pub fn lions_consistency(&self, t: f64, y: &[f64], mu: &EmpiricalMeasure, x: &[f64]) -> Result<f64> {
        let z = self.moments(mu)?;
        let fz = self.grad_z_at(t, y, &z);
        let mut dm = vec![0.0; self.dim];
        self.lions_derivative_with(&fz, x, &mut dm);
        let mut worst: f64 = 0.0;
        for a in 0..self.dim {
            let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
            xp[a] += FD_STEP;
            xm[a] -= FD_STEP;
            let fd = (self.linear_derivative_with(&fz, &xp) - self.linear_derivative_with(&fz, &xm)) / (2.0 * FD_STEP);
            worst = worst.max((dm[a] - fd).abs());
        }
        Ok(worst)
    }
}

/// Residual of the linear-derivative identity
/// `F(ν) - F(μ) = ∫_0^1 (ν - μ)(δF/δm(μ + s(ν - μ), ·)) ds`,
/// with the `s`-integral by the midpoint rule on `quad_steps` panels and the
/// signed pairing evaluated atom by atom.
pub fn flat_derivative_check(
    functional: &CylindricalFunctional,
    t: f64,
    y: &[f64],
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    quad_steps: usize,
) -> Result<f64> {
    if quad_steps == 0 {
        return Err(Error::invalid("quad_steps", "must be at least 1"));
    }
    if mu.len() != nu.len() {
        return Err(Error::AtomCountMismatch {
            left: mu.len(),
            right: nu.len(),
        });
    }
    let z_mu = functional.moments(mu)?;
    let z_nu = functional.moments(nu)?;
    let lhs = functional.outer.value(t, y, &z_nu) - functional.outer.value(t, y, &z_mu);
    let n = mu.len() as f64;
    let mut integral = 0.0;
    let mut z = vec![0.0; z_mu.len()];
    for q in 0..quad_steps {
        let s = (q as f64 + 0.5) / quad_steps as f64;
        // moments are affine along the mixture μ + s(ν - μ)
        for ((zi, a), b) in z.iter_mut().zip(&z_mu).zip(&z_nu) {
            *zi = a + s * (b - a);
        }
        let fz = functional.grad_z_at(t, y, &z);
        let mut pairing = 0.0;
        for (xn, xm) in nu.atoms().zip(mu.atoms()) {
            pairing += functional.linear_derivative_with(&fz, xn) - functional.linear_derivative_with(&fz, xm);
        }
        integral += pairing / n;
    }
    integral /= quad_steps as f64;
    let residual = (lhs - integral).abs();
    if residual.is_finite() {
        Ok(residual)
    } else {
        Err(Error::NonFinite {
            context: "flat derivative residual",
            t,
            x: y.to_vec(),
        })
    }
}

/// Names accepted by [`builtin`].
pub const BUILTIN_NAMES: &[&str] = &["mean", "second_moment", "mean_squared", "smooth_cdf", "ty_mix", "broken_gradient"];

fn poly(arity: usize, dim: usize, terms: Vec<Monomial>) -> Arc<dyn OuterMap> {
    Arc::new(PolynomialMap::new(arity, dim, terms).expect("builtin monomials are well formed"))
}

/// Identity outer map `f(z) = z`.
pub fn identity_outer(dim: usize) -> PolynomialMap {
    PolynomialMap::new(1, dim, vec![Monomial::new(1.0, 0, vec![], vec![1])]).expect("well formed")
}

/// Registry of named functionals on `R^d`:
///
/// | name | `F(t, y, m)` |
/// |---|---|
/// | `mean` | `m(x_1)` |
/// | `second_moment` | `m(|x|²)` |
/// | `mean_squared` | `(m(x_1))²` |
/// | `smooth_cdf` `[c, h]` | `m(s((x_1 - c)/h))`, logistic `s` |
/// | `ty_mix` | `t + y_1 m(x_1)` |
/// | `broken_gradient` | `(m(x_1))²` with `∇_z f` supplied 1.5x too large |
pub fn builtin(name: &str, params: &[f64], dim: usize) -> Result<CylindricalFunctional> {
    if dim == 0 {
        return Err(Error::invalid("dim", "must be at least 1"));
    }
    let expect = |n: usize| -> Result<()> {
        if params.len() == n {
            Ok(())
        } else {
            Err(Error::invalid("params", format!("`{name}` takes {n} parameter(s), got {}", params.len())))
        }
    };
    let x1 = || TestFunction::coordinate(dim, 0);
    let square = || poly(1, dim, vec![Monomial::new(1.0, 0, vec![], vec![2])]);
    match name {
        "mean" => {
            expect(0)?;
            CylindricalFunctional::new(name, dim, Arc::new(identity_outer(dim)), vec![x1()])
        }
        "second_moment" => {
            expect(0)?;
            CylindricalFunctional::new(name, dim, Arc::new(identity_outer(dim)), vec![TestFunction::squared_norm(dim)])
        }
        "mean_squared" => {
            expect(0)?;
            CylindricalFunctional::new(name, dim, square(), vec![x1()])
        }
        "smooth_cdf" => {
            expect(2)?;
            let (c, h) = (params[0], params[1]);
            if !(h.is_finite() && h > 0.0 && c.is_finite()) {
                return Err(Error::invalid("params", format!("smooth_cdf needs finite c and h > 0, got c = {c}, h = {h}")));
            }
            CylindricalFunctional::new(name, dim, Arc::new(identity_outer(dim)), vec![TestFunction::sigmoid(dim, 0, c, h)])
        }
        "ty_mix" => {
            expect(0)?;
            let mut y1 = vec![0; dim];
            y1[0] = 1;
            let outer = poly(
                1,
                dim,
                vec![
                    Monomial::new(1.0, 1, vec![], vec![0]),
                    Monomial::new(1.0, 0, y1, vec![1]),
                ],
            );
            CylindricalFunctional::new(name, dim, outer, vec![x1()])
        }
        "broken_gradient" => {
            expect(0)?;
            let inner = PolynomialMap::new(1, dim, vec![Monomial::new(1.0, 0, vec![], vec![2])])?;
            CylindricalFunctional::new(name, dim, Arc::new(ScaledGradient { inner, scale: 1.5 }), vec![x1()])
        }
        other => Err(Error::invalid("functional", format!("unknown functional `{other}`; known: {}", BUILTIN_NAMES.join(", ")))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RngKey, Role};
    use proptest::prelude::*;

    fn m(a: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::from_scalars(a).unwrap()
    }

    fn f(name: &str) -> CylindricalFunctional {
        builtin(name, &[], 1).unwrap()
    }

    #[test]
    fn eval_examples() {
        let mu = m(&[0.0, 2.0]);
        assert_eq!(f("mean").eval(0.0, &[0.0], &mu).unwrap(), 1.0);
        assert_eq!(f("mean_squared").eval(0.0, &[0.0], &mu).unwrap(), 1.0);
        // t + y + m(x²)
        let outer = poly(
            1,
            1,
            vec![
                Monomial::new(1.0, 1, vec![0], vec![0]),
                Monomial::new(1.0, 0, vec![1], vec![0]),
                Monomial::new(1.0, 0, vec![0], vec![1]),
            ],
        );
        let g = CylindricalFunctional::new("t+y+m(x^2)", 1, outer, vec![TestFunction::squared_norm(1)]).unwrap();
        assert_eq!(g.eval(0.5, &[1.0], &mu).unwrap(), 3.5);
    }

    #[test]
    fn d_y_examples() {
        let outer = poly(1, 1, vec![Monomial::new(1.0, 0, vec![2], vec![1])]);
        let g = CylindricalFunctional::new("y^2 m(x)", 1, outer, vec![TestFunction::coordinate(1, 0)]).unwrap();
        assert_eq!(g.d_y(0.0, &[3.0], &m(&[1.0])).unwrap(), vec![6.0]);
        assert_eq!(f("mean").d_y(0.0, &[3.0], &m(&[1.0])).unwrap(), vec![0.0]);
    }

    #[test]
    fn linear_and_lions_examples() {
        let mu = m(&[0.0, 2.0]);
        assert_eq!(f("mean").linear_derivative(0.0, &[0.0], &mu, &[7.0]).unwrap(), 7.0);
        assert_eq!(f("mean_squared").linear_derivative(0.0, &[0.0], &mu, &[5.0]).unwrap(), 10.0);
        let constant = CylindricalFunctional::new(
            "const",
            1,
            poly(1, 1, vec![Monomial::new(3.0, 0, vec![], vec![0])]),
            vec![TestFunction::coordinate(1, 0)],
        )
        .unwrap();
        assert_eq!(constant.linear_derivative(0.0, &[0.0], &mu, &[5.0]).unwrap(), 0.0);

        assert_eq!(f("second_moment").lions_derivative(0.0, &[0.0], &mu, &[3.0]).unwrap(), vec![6.0]);
        assert_eq!(f("mean_squared").lions_derivative(0.0, &[0.0], &mu, &[-4.0]).unwrap(), vec![2.0]);
        assert_eq!(f("mean").lions_derivative(0.0, &[0.0], &mu, &[9.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn second_derivative_examples() {
        let mu = m(&[0.0, 2.0]);
        let s = f("second_moment").second_derivatives(0.3, &[0.0], &mu, &[1.0], &[-2.0]).unwrap();
        assert_eq!((s.d_t, s.dx_dm.clone(), s.d2_m.clone()), (0.0, vec![2.0], vec![0.0]));
        let s = f("mean_squared").second_derivatives(0.3, &[0.0], &mu, &[1.0], &[-2.0]).unwrap();
        assert_eq!((s.d_t, s.dx_dm.clone(), s.d2_m.clone()), (0.0, vec![0.0], vec![2.0]));
        let s = f("ty_mix").second_derivatives(0.3, &[2.0], &mu, &[1.0], &[-2.0]).unwrap();
        assert_eq!(s.d_t, 1.0);
    }

    /// Second-order cross-check: the flat derivative of `x ↦ δF/δm(m)(x)` in the
    /// measure direction reproduces `D²_m F` for `(m(x))²` by differencing twice.
    #[test]
    fn mean_squared_d2m_by_double_flat_difference() {
        let g = f("mean_squared");
        let mu = m(&[0.0, 2.0, -1.0, 3.0]);
        let nu = m(&[1.0, -2.0, 0.5, 0.0]);
        let h = 1e-4;
        // δF/δm along μ + h(ν - μ), then FD in x at two points
        let mix = |s: f64| {
            let zm = g.moments(&mu).unwrap();
            let zn = g.moments(&nu).unwrap();
            vec![zm[0] + s * (zn[0] - zm[0])]
        };
        let dm_at = |z: &[f64], x: f64| {
            let fz = g.grad_z_at(0.0, &[0.0], z);
            let mut out = [0.0];
            g.lions_derivative_with(&fz, &[x], &mut out);
            out[0]
        };
        let dir = g.moments(&nu).unwrap()[0] - g.moments(&mu).unwrap()[0];
        let dd = (dm_at(&mix(h), 0.7) - dm_at(&mix(-h), 0.7)) / (2.0 * h);
        // directional derivative = ∫ D²_m(x, x') d(ν - μ)(x') with φ'(x') = 1 ⇒ D²_m · 0 ... via δ/δm:
        // d/ds D_mF(μ_s, x) = ∫ δ/δm[D_mF](x, x') (ν-μ)(dx') = 2 · (ν-μ)(x')
        assert!((dd - 2.0 * dir).abs() < 1e-8);
        let s = g.second_derivatives(0.0, &[0.0], &mu, &[0.7], &[0.1]).unwrap();
        assert_eq!(s.d2_m, vec![2.0]);
    }

    #[test]
    fn flat_check_examples() {
        let mu = m(&[0.0, 2.0, 1.0]);
        let nu = m(&[-1.0, 4.0, 0.5]);
        for q in [1, 2, 7] {
            assert!(flat_derivative_check(&f("mean"), 0.0, &[0.0], &mu, &nu, q).unwrap() < 1e-12);
        }
        assert!(flat_derivative_check(&f("mean_squared"), 0.0, &[0.0], &mu, &nu, 64).unwrap() < 1e-8);
        assert_eq!(flat_derivative_check(&f("mean_squared"), 0.0, &[0.0], &mu, &mu, 3).unwrap(), 0.0);
        assert!(flat_derivative_check(&f("mean"), 0.0, &[0.0], &mu, &nu, 0).is_err());
        assert!(flat_derivative_check(&f("mean"), 0.0, &[0.0], &mu, &m(&[1.0]), 4).is_err());
    }

    #[test]
    fn broken_gradient_is_detected() {
        let mut rng = RngKey::new(5).stream_for(0, 0, Role::Auxiliary(0));
        assert!(f("mean_squared").validate_derivatives(&mut rng, 50).passes(1e-6));
        assert!(!f("broken_gradient").validate_derivatives(&mut rng, 50).passes(1e-6));
        let mu = m(&[0.0, 2.0, 1.0]);
        let nu = m(&[-1.0, 4.0, 0.5]);
        assert!(flat_derivative_check(&f("broken_gradient"), 0.0, &[0.0], &mu, &nu, 256).unwrap() > 1e-3);
    }

    #[test]
    fn registry_errors() {
        assert!(builtin("nope", &[], 1).is_err());
        assert!(builtin("smooth_cdf", &[0.0], 1).is_err());
        assert!(builtin("smooth_cdf", &[0.0, -1.0], 1).is_err());
        assert!(builtin("mean", &[1.0], 1).is_err());
        for name in BUILTIN_NAMES {
            let params: &[f64] = if *name == "smooth_cdf" { &[0.0, 0.5] } else { &[] };
            assert!(builtin(name, params, 2).is_ok(), "{name}");
        }
    }

    #[test]
    fn supplied_test_function_derivatives_are_consistent() {
        let mut rng = RngKey::new(6).stream_for(0, 0, Role::Auxiliary(0));
        for name in ["mean", "second_moment", "mean_squared", "ty_mix"] {
            for dim in [1, 3] {
                let g = builtin(name, &[], dim).unwrap();
                assert!(g.validate_derivatives(&mut rng, 20).passes(1e-6), "{name} d={dim}");
            }
        }
        let g = builtin("smooth_cdf", &[0.3, 0.7], 2).unwrap();
        assert!(g.validate_derivatives(&mut rng, 20).passes(1e-6));
        let s = CylindricalFunctional::new("sine", 2, Arc::new(identity_outer(2)), vec![TestFunction::sine(2, 1, 1.3)]).unwrap();
        assert!(s.validate_derivatives(&mut rng, 20).passes(1e-6));
    }

    /// Random cylindrical functional: a cubic polynomial outer map in `(t, y, z)`
    /// over a random mix of test functions on `R`.
    fn random_functional(seed: u64) -> CylindricalFunctional {
        use rand::Rng;
        let mut rng = RngKey::new(seed).stream_for(0, 0, Role::Auxiliary(1));
        let arity = rng.random_range(1..=3usize);
        let tests: Vec<TestFunction> = (0..arity)
            .map(|_| match rng.random_range(0..4) {
                0 => TestFunction::coordinate(1, 0),
                1 => TestFunction::squared_norm(1),
                2 => TestFunction::sigmoid(1, 0, rng.random_range(-1.0..1.0), rng.random_range(0.3..2.0)),
                _ => TestFunction::sine(1, 0, rng.random_range(0.5..2.0)),
            })
            .collect();
        let terms = (0..4)
            .map(|_| {
                Monomial::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0..2),
                    vec![rng.random_range(0..3)],
                    (0..arity).map(|_| rng.random_range(0..3)).collect(),
                )
            })
            .collect();
        CylindricalFunctional::new("random", 1, poly(arity, 1, terms), tests).unwrap()
    }

    fn random_cloud(seed: u64, n: usize) -> EmpiricalMeasure {
        use rand::Rng;
        let mut rng = RngKey::new(seed).stream_for(1, 0, Role::Auxiliary(2));
        m(&(0..n).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn flat_residual_decays_quadratically(seed in any::<u64>(), n in 1usize..=32) {
            let g = random_functional(seed);
            let mu = random_cloud(seed, n);
            let nu = random_cloud(seed ^ 0xabcdef, n);
            let r8 = flat_derivative_check(&g, 0.4, &[0.3], &mu, &nu, 8).unwrap();
            let r64 = flat_derivative_check(&g, 0.4, &[0.3], &mu, &nu, 64).unwrap();
            // midpoint rule error is O(h²): 8x more panels gives ~64x smaller error
            prop_assert!(r64 <= r8 / 40.0 + 1e-12, "r8 = {r8}, r64 = {r64}");
        }

        #[test]
        fn lions_is_gradient_of_linear_derivative(seed in any::<u64>(), x in -3.0f64..3.0) {
            let g = random_functional(seed);
            let mu = random_cloud(seed, 9);
            prop_assert!(g.lions_consistency(0.2, &[0.5], &mu, &[x]).unwrap() < 1e-6);
        }

        #[test]
        fn growth_certificate_bounds_lions_derivative(seed in any::<u64>(), x in -50.0f64..50.0) {
            let g = random_functional(seed);
            let mu = random_cloud(seed, 9);
            let z = g.moments(&mu).unwrap();
            let c = g.growth_constant(0.2, &[0.5], &z).unwrap();
            let dm = g.lions_derivative(0.2, &[0.5], &mu, &[x]).unwrap();
            prop_assert!(dm[0].abs() <= c * (1.0 + x.abs()) * (1.0 + 1e-12) + 1e-12);
        }
    }
}
