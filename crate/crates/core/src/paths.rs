//! Time grids, grid-aligned sample paths and Euler construction of continuous
//! semimartingales `X = x0 + A + M + C` with `A = ∫a ds`, `M = ∫σ dW` and
//! `C = ∫σ° dW°`.

use std::io::{self, Write};
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{standard_normal, RngKey, StreamLabel};

/// Uniform discretization of `[0, T]` into `K` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid("horizon", format!("must be positive and finite, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::invalid("steps", "must be at least 1"));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Node `t_k`; the last node is exactly `T`.
    pub fn node(&self, k: usize) -> f64 {
        debug_assert!(k <= self.steps);
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.node(k)).collect()
    }

    /// Number of steps spanned by `eps`, if `eps` is a positive integer multiple of the step.
    pub fn steps_for(&self, eps: f64) -> Option<usize> {
        let ratio = eps / self.dt();
        let k = ratio.round();
        if k >= 1.0 && (ratio - k).abs() <= 1e-9 * ratio.max(1.0) {
            Some(k as usize)
        } else {
            None
        }
    }
}

/// `make_grid(T, K)`.
pub fn make_grid(horizon: f64, steps: usize) -> Result<TimeGrid> {
    TimeGrid::new(horizon, steps)
}

/// Values of a `d`-dimensional path at the `K + 1` nodes of a grid, stored node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl SamplePath {
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim", "must be at least 1"));
        }
        if values.len() != grid.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: grid.len() * dim,
                got: values.len(),
                context: "path values",
            });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "path value",
                t: grid.node(k / dim),
                x: values[(k / dim) * dim..(k / dim + 1) * dim].to_vec(),
            });
        }
        Ok(Self { grid, dim, values })
    }

    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Self {
            grid,
            dim,
            values: vec![0.0; grid.len() * dim],
        }
    }

    pub fn from_fn(grid: TimeGrid, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            grid,
            dim: 1,
            values: grid.nodes().into_iter().map(&mut f).collect(),
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    /// Scalar value at node `k` of a one-dimensional path.
    pub fn at(&self, k: usize) -> f64 {
        debug_assert_eq!(self.dim, 1);
        self.values[k]
    }

    pub fn last(&self) -> &[f64] {
        self.point(self.grid.steps())
    }

    pub fn increment(&self, k: usize, out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.values[(k + 1) * self.dim + j] - self.values[k * self.dim + j];
        }
    }

    /// The one-dimensional path of coordinate `j`.
    pub fn coordinate(&self, j: usize) -> SamplePath {
        assert!(j < self.dim, "coordinate {j} out of range for dimension {}", self.dim);
        SamplePath {
            grid: self.grid,
            dim: 1,
            values: self.values.iter().skip(j).step_by(self.dim).copied().collect(),
        }
    }

    /// `Σ c_i P_i` over paths on a common grid and of common dimension.
    pub fn linear_combination(terms: &[(f64, &SamplePath)]) -> Result<SamplePath> {
        let (_, first) = terms
            .first()
            .ok_or_else(|| Error::invalid("terms", "empty linear combination"))?;
        let mut values = vec![0.0; first.values.len()];
        for (c, p) in terms {
            if p.grid != first.grid {
                return Err(Error::GridMismatch);
            }
            if p.dim != first.dim {
                return Err(Error::DimensionMismatch {
                    expected: first.dim,
                    got: p.dim,
                    context: "linear combination",
                });
            }
            for (v, x) in values.iter_mut().zip(&p.values) {
                *v += c * x;
            }
        }
        Ok(SamplePath {
            grid: first.grid,
            dim: first.dim,
            values,
        })
    }

    /// The path minus its initial value.
    pub fn started_at_zero(&self) -> SamplePath {
        let x0 = self.point(0).to_vec();
        let values = self
            .values
            .chunks_exact(self.dim)
            .flat_map(|p| p.iter().zip(&x0).map(|(a, b)| a - b).collect::<Vec<_>>())
            .collect();
        SamplePath {
            grid: self.grid,
            dim: self.dim,
            values,
        }
    }

    /// CSV with header `t,x_1,...,x_d`, one row per node.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "t")?;
        for j in 1..=self.dim {
            write!(w, ",x_{j}")?;
        }
        writeln!(w)?;
        for k in 0..self.grid.len() {
            write!(w, "{}", self.grid.node(k))?;
            for v in self.point(k) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Fill a `d`-dimensional Brownian path from `rng`, coordinate-major within each step.
pub fn brownian_from_rng<R: Rng + ?Sized>(grid: TimeGrid, dim: usize, rng: &mut R) -> SamplePath {
    let sd = grid.dt().sqrt();
    let mut values = vec![0.0; grid.len() * dim];
    for k in 0..grid.steps() {
        for j in 0..dim {
            values[(k + 1) * dim + j] = values[k * dim + j] + sd * standard_normal(rng);
        }
    }
    SamplePath { grid, dim, values }
}

/// `sample_brownian(grid, d, key)`: a standard Brownian path started at 0.
pub fn sample_brownian(grid: TimeGrid, dim: usize, key: &RngKey, label: StreamLabel) -> SamplePath {
    let mut rng = key.stream(label);
    brownian_from_rng(grid, dim, &mut rng)
}

/// Law of the initial condition.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    Dirac(Vec<f64>),
    /// Independent coordinates `N(mean_j, std²)`.
    Gaussian { mean: Vec<f64>, std: f64 },
    /// Independent coordinates uniform on `[low, high)`.
    Uniform { low: f64, high: f64, dim: usize },
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Dirac(c) => c.len(),
            InitialLaw::Gaussian { mean, .. } => mean.len(),
            InitialLaw::Uniform { dim, .. } => *dim,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match self {
            InitialLaw::Dirac(c) => out.copy_from_slice(c),
            InitialLaw::Gaussian { mean, std } => {
                for (o, m) in out.iter_mut().zip(mean) {
                    *o = m + std * standard_normal(rng);
                }
            }
            InitialLaw::Uniform { low, high, .. } => {
                for o in out.iter_mut() {
                    *o = rng.random_range(*low..*high);
                }
            }
        }
    }

    /// First moment, coordinate-wise.
    pub fn mean(&self) -> Vec<f64> {
        match self {
            InitialLaw::Dirac(c) => c.clone(),
            InitialLaw::Gaussian { mean, .. } => mean.clone(),
            InitialLaw::Uniform { low, high, dim } => vec![0.5 * (low + high); *dim],
        }
    }
}

pub type VectorField = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// Row-major `d x d` matrix field.
pub type MatrixField = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Coefficients of `dX = a(t,X)dt + σ(t,X)dW + σ°(t,X)dW°`.
///
/// A coefficient left as `None` is identically zero, and the corresponding
/// driver is not even sampled by particle schemes. The coefficients must be
/// bounded and Lipschitz in `x` uniformly in `t`; when `bound` is set every
/// evaluation is checked against it.
#[derive(Clone)]
pub struct SemimartingaleSpec {
    dim: usize,
    pub initial: InitialLaw,
    pub drift: Option<VectorField>,
    pub vol: Option<MatrixField>,
    pub common_vol: Option<MatrixField>,
    pub bound: Option<f64>,
}

impl std::fmt::Debug for SemimartingaleSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SemimartingaleSpec")
            .field("dim", &self.dim)
            .field("initial", &self.initial)
            .field("drift", &self.drift.is_some())
            .field("vol", &self.vol.is_some())
            .field("common_vol", &self.common_vol.is_some())
            .field("bound", &self.bound)
            .finish()
    }
}

fn scaled_identity(dim: usize, s: f64) -> MatrixField {
    Arc::new(move |_t, _x, out: &mut [f64]| {
        out.fill(0.0);
        for j in 0..dim {
            out[j * dim + j] = s;
        }
    })
}

impl SemimartingaleSpec {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            initial: InitialLaw::Dirac(vec![0.0; dim]),
            drift: None,
            vol: None,
            common_vol: None,
            bound: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn with_initial(mut self, law: InitialLaw) -> Self {
        assert_eq!(law.dim(), self.dim, "initial law dimension");
        self.initial = law;
        self
    }

    pub fn with_drift(mut self, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift = Some(Arc::new(f));
        self
    }

    pub fn with_constant_drift(self, a: Vec<f64>) -> Self {
        assert_eq!(a.len(), self.dim);
        self.with_drift(move |_t, _x, out| out.copy_from_slice(&a))
    }

    pub fn with_vol(mut self, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.vol = Some(Arc::new(f));
        self
    }

    pub fn with_scalar_vol(mut self, s: f64) -> Self {
        self.vol = Some(scaled_identity(self.dim, s));
        self
    }

    pub fn with_common_vol(mut self, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.common_vol = Some(Arc::new(f));
        self
    }

    pub fn with_scalar_common_vol(mut self, s: f64) -> Self {
        self.common_vol = Some(scaled_identity(self.dim, s));
        self
    }

    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound = Some(bound);
        self
    }

    pub fn eval_drift(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        eval_field(self.drift.as_ref(), "drift", self.bound, t, x, out)
    }

    pub fn eval_vol(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        eval_field(self.vol.as_ref(), "vol", self.bound, t, x, out)
    }

    pub fn eval_common_vol(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        eval_field(self.common_vol.as_ref(), "common_vol", self.bound, t, x, out)
    }
}

pub(crate) fn eval_field(
    field: Option<&VectorField>,
    name: &'static str,
    bound: Option<f64>,
    t: f64,
    x: &[f64],
    out: &mut [f64],
) -> Result<()> {
    match field {
        None => out.fill(0.0),
        Some(f) => f(t, x, out),
    }
    check_values(name, bound, t, x, out)
}

pub(crate) fn check_values(name: &'static str, bound: Option<f64>, t: f64, x: &[f64], out: &[f64]) -> Result<()> {
    for &v in out.iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: name,
                t,
                x: x.to_vec(),
            });
        }
        if let Some(b) = bound {
            if v.abs() > b {
                return Err(Error::BoundExceeded {
                    name,
                    value: v,
                    bound: b,
                    t,
                    x: x.to_vec(),
                });
            }
        }
    }
    Ok(())
}

/// `y += m * v` for a row-major `d x d` matrix.
#[inline]
pub(crate) fn mat_vec_add(m: &[f64], v: &[f64], y: &mut [f64]) {
    let d = v.len();
    for (r, yr) in y.iter_mut().enumerate() {
        let row = &m[r * d..(r + 1) * d];
        *yr += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// The Euler path and its additive parts.
#[derive(Debug, Clone, PartialEq)]
pub struct Semimartingale {
    pub x: SamplePath,
    /// `A = ∫ a(s, X_s) ds`
    pub drift_part: SamplePath,
    /// `M = ∫ σ(s, X_s) dW_s`
    pub martingale_part: SamplePath,
    /// `C = ∫ σ°(s, X_s) dW°_s`
    pub common_part: SamplePath,
}

impl Semimartingale {
    /// Full local-martingale part `M + C`.
    pub fn local_martingale(&self) -> SamplePath {
        SamplePath::linear_combination(&[(1.0, &self.martingale_part), (1.0, &self.common_part)])
            .expect("parts share grid and dimension")
    }
}

/// Left-point Euler construction of `X = x0 + A + M + C` driven by `w` and `w_common`.
pub fn build_semimartingale(
    spec: &SemimartingaleSpec,
    grid: TimeGrid,
    w: &SamplePath,
    w_common: &SamplePath,
    x0: &[f64],
) -> Result<Semimartingale> {
    let d = spec.dim;
    if *w.grid() != grid || *w_common.grid() != grid {
        return Err(Error::GridMismatch);
    }
    for (p, ctx) in [(w.dim(), "idiosyncratic driver"), (w_common.dim(), "common driver"), (x0.len(), "x0")] {
        if p != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: p,
                context: ctx,
            });
        }
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "x0",
            t: 0.0,
            x: x0.to_vec(),
        });
    }
    let n = grid.len() * d;
    let mut x = vec![0.0; n];
    let mut a_part = vec![0.0; n];
    let mut m_part = vec![0.0; n];
    let mut c_part = vec![0.0; n];
    x[..d].copy_from_slice(x0);

    let dt = grid.dt();
    let mut a = vec![0.0; d];
    let mut s = vec![0.0; d * d];
    let mut dw = vec![0.0; d];
    let mut da = vec![0.0; d];
    let mut dm = vec![0.0; d];
    let mut dc = vec![0.0; d];
    for k in 0..grid.steps() {
        let t = grid.node(k);
        let xk = &x[k * d..(k + 1) * d];
        spec.eval_drift(t, xk, &mut a)?;
        for (o, ai) in da.iter_mut().zip(&a) {
            *o = ai * dt;
        }
        dm.fill(0.0);
        if spec.vol.is_some() {
            spec.eval_vol(t, xk, &mut s)?;
            w.increment(k, &mut dw);
            mat_vec_add(&s, &dw, &mut dm);
        }
        dc.fill(0.0);
        if spec.common_vol.is_some() {
            spec.eval_common_vol(t, xk, &mut s)?;
            w_common.increment(k, &mut dw);
            mat_vec_add(&s, &dw, &mut dc);
        }
        for j in 0..d {
            let (cur, next) = (k * d + j, (k + 1) * d + j);
            a_part[next] = a_part[cur] + da[j];
            m_part[next] = m_part[cur] + dm[j];
            c_part[next] = c_part[cur] + dc[j];
            x[next] = x[cur] + da[j] + dm[j] + dc[j];
        }
    }
    Ok(Semimartingale {
        x: SamplePath::new(grid, d, x)?,
        drift_part: SamplePath::new(grid, d, a_part)?,
        martingale_part: SamplePath::new(grid, d, m_part)?,
        common_part: SamplePath::new(grid, d, c_part)?,
    })
}
