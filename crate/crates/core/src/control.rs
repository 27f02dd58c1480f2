//! McKean-Vlasov control with common noise.
//!
//! The controlled particle system is
//! `X_{k+1} = X_k + σ ΔW^i + σ_0 (ΔW° + û(t_k, ρ_k) Δ)` with `ρ_k` the
//! empirical law at step `k`, and the reward of a run is
//! `Σ_k L(t_k, ρ_k, û_k) Δ + g(ρ_K)`. Rewards are maximized.
//!
//! Vectors pair with `σ_0` as matrix-on-vector: the drift is `σ_0(t,x,μ) û`
//! and `q = μ(σ_0(t,·,μ) p(μ,·))` is the `μ`-average of `σ_0 p`, entering the
//! Hamiltonian as `u · q`.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::functional::{CylindricalFunctional, Monomial, PolynomialMap, TestFunction};
use crate::measure::EmpiricalMeasure;
use crate::particle::{simulate_ensemble_with, Dynamics, EnsembleOptions, LawField, ParticleEnsemble, UniformCoefficients};
use crate::paths::{check_values, mat_vec_add, InitialLaw, TimeGrid};
use crate::rng::RngKey;
use crate::stats::{mean_ci95, median};

/// Default number of grid points per control coordinate.
pub const DEFAULT_U_GRID_POINTS: usize = 33;
/// Largest number of control words the brute-force baseline enumerates.
pub const ENUMERATION_LIMIT: u128 = 100_000;

/// `(t, μ) ↦ value`.
pub type LawScalar = Arc<dyn Fn(f64, &EmpiricalMeasure) -> f64 + Send + Sync>;
/// `μ ↦ value`.
pub type TerminalCost = Arc<dyn Fn(&EmpiricalMeasure) -> f64 + Send + Sync>;
/// `(t, μ, u) ↦ value`.
pub type GeneralCost = Arc<dyn Fn(f64, &EmpiricalMeasure, &[f64]) -> f64 + Send + Sync>;

/// Running reward `L(t, μ, u)`.
#[derive(Clone)]
pub enum RunningCost {
    /// `c(t, μ) - κ/2 |u|²`, `κ ≥ 0`, with `c ≡ 0` when `base` is `None`.
    /// The Hamiltonian is then maximized in closed form.
    Quadratic { kappa: f64, base: Option<LawScalar> },
    /// Anything else, maximized by grid search over the control grid.
    General(GeneralCost),
}

impl fmt::Debug for RunningCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunningCost::Quadratic { kappa, base } => f
                .debug_struct("Quadratic")
                .field("kappa", kappa)
                .field("base", &base.is_some())
                .finish(),
            RunningCost::General(_) => f.write_str("General(..)"),
        }
    }
}

impl RunningCost {
    pub fn value(&self, t: f64, mu: &EmpiricalMeasure, u: &[f64]) -> f64 {
        match self {
            RunningCost::Quadratic { kappa, base } => {
                base.as_ref().map_or(0.0, |c| c(t, mu)) - 0.5 * kappa * u.iter().map(|v| v * v).sum::<f64>()
            }
            RunningCost::General(l) => l(t, mu, u),
        }
    }
}

/// Box `U = Π [low_j, high_j]` with an equally spaced search grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlBox {
    low: Vec<f64>,
    high: Vec<f64>,
    grid_points: usize,
}

impl ControlBox {
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        if low.is_empty() || low.len() != high.len() {
            return Err(Error::invalid("U", "box bounds must be non-empty and of equal length"));
        }
        for (l, h) in low.iter().zip(&high) {
            if !(l.is_finite() && h.is_finite() && l <= h) {
                return Err(Error::invalid("U", format!("need finite low ≤ high, got [{l}, {h}]")));
            }
        }
        Ok(Self {
            low,
            high,
            grid_points: DEFAULT_U_GRID_POINTS,
        })
    }

    /// `[-r, r]^d`.
    pub fn symmetric(dim: usize, r: f64) -> Result<Self> {
        Self::new(vec![-r; dim], vec![r; dim])
    }

    pub fn with_grid_points(mut self, points: usize) -> Result<Self> {
        if points == 0 {
            return Err(Error::invalid("U grid", "needs at least one point per coordinate"));
        }
        self.grid_points = points;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn low(&self) -> &[f64] {
        &self.low
    }

    pub fn high(&self) -> &[f64] {
        &self.high
    }

    pub fn grid_points(&self) -> usize {
        self.grid_points
    }

    /// `ū = max_{u ∈ U} |u|`.
    pub fn max_norm(&self) -> f64 {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(l, h)| l.abs().max(h.abs()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Clip into the box; returns whether anything moved.
    pub fn clip(&self, u: &mut [f64]) -> bool {
        let mut moved = false;
        for ((v, l), h) in u.iter_mut().zip(&self.low).zip(&self.high) {
            let c = v.clamp(*l, *h);
            moved |= c != *v;
            *v = c;
        }
        moved
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.iter().zip(&self.low).zip(&self.high).all(|((v, l), h)| l <= v && v <= h)
    }

    /// Grid values of coordinate `j`, ascending.
    pub fn axis(&self, j: usize) -> Vec<f64> {
        let (l, h) = (self.low[j], self.high[j]);
        let p = self.grid_points;
        if p == 1 {
            return vec![0.5 * (l + h)];
        }
        (0..p)
            .map(|i| if i == p - 1 { h } else { l + (h - l) * i as f64 / (p - 1) as f64 })
            .collect()
    }

    /// Every grid point, in lexicographic order.
    pub fn grid(&self) -> Vec<Vec<f64>> {
        let axes: Vec<Vec<f64>> = (0..self.dim()).map(|j| self.axis(j)).collect();
        let mut out = vec![Vec::new()];
        for axis in &axes {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    axis.iter().map(move |&v| {
                        let mut p = prefix.clone();
                        p.push(v);
                        p
                    })
                })
                .collect();
        }
        out
    }
}

/// Data of the control problem.
#[derive(Clone)]
pub struct ControlProblemSpec {
    pub horizon: f64,
    dim: usize,
    /// `σ(t, x, μ)`, row-major `d x d`; `None` is zero.
    pub sigma: Option<Volatility>,
    /// `σ_0(t, x, μ)`, row-major `d x d`; `None` is zero.
    pub sigma0: Option<Volatility>,
    pub control: ControlBox,
    pub running: RunningCost,
    pub terminal: TerminalCost,
    pub initial: InitialLaw,
    /// Declared bound on every coefficient entry, checked at each evaluation.
    pub bound: Option<f64>,
}

impl fmt::Debug for ControlProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlProblemSpec")
            .field("horizon", &self.horizon)
            .field("dim", &self.dim)
            .field("sigma", &self.sigma.is_some())
            .field("sigma0", &self.sigma0.is_some())
            .field("control", &self.control)
            .field("running", &self.running)
            .field("initial", &self.initial)
            .field("bound", &self.bound)
            .finish()
    }
}

/// A volatility coefficient, row-major `d x d`.
#[derive(Clone)]
pub enum Volatility {
    /// The same matrix at every `(t, x, μ)`.
    Constant(Vec<f64>),
    Field(LawField),
}

impl Volatility {
    fn constant(&self) -> Option<&[f64]> {
        match self {
            Volatility::Constant(m) => Some(m),
            Volatility::Field(_) => None,
        }
    }
}

fn scaled_identity(dim: usize, s: f64) -> Volatility {
    let mut m = vec![0.0; dim * dim];
    for j in 0..dim {
        m[j * dim + j] = s;
    }
    Volatility::Constant(m)
}

impl ControlProblemSpec {
    pub fn new(
        horizon: f64,
        control: ControlBox,
        running: RunningCost,
        terminal: TerminalCost,
        initial: InitialLaw,
    ) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid("horizon", format!("must be positive and finite, got {horizon}")));
        }
        let dim = control.dim();
        if initial.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: initial.dim(),
                context: "initial law",
            });
        }
        if let RunningCost::Quadratic { kappa, .. } = &running {
            if !(kappa.is_finite() && *kappa >= 0.0) {
                return Err(Error::invalid("kappa", format!("must be finite and non-negative, got {kappa}")));
            }
        }
        Ok(Self {
            horizon,
            dim,
            sigma: None,
            sigma0: None,
            control,
            running,
            terminal,
            initial,
            bound: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn with_sigma(mut self, f: impl Fn(f64, &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync + 'static) -> Self {
        self.sigma = Some(Volatility::Field(Arc::new(f)));
        self
    }

    pub fn with_scalar_sigma(mut self, s: f64) -> Self {
        self.sigma = Some(scaled_identity(self.dim, s));
        self
    }

    pub fn with_sigma0(mut self, f: impl Fn(f64, &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync + 'static) -> Self {
        self.sigma0 = Some(Volatility::Field(Arc::new(f)));
        self
    }

    pub fn with_scalar_sigma0(mut self, s: f64) -> Self {
        self.sigma0 = Some(scaled_identity(self.dim, s));
        self
    }

    pub fn with_bound(mut self, b: f64) -> Self {
        self.bound = Some(b);
        self
    }

    fn eval(&self, field: &Option<Volatility>, name: &'static str, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) -> Result<()> {
        match field {
            None => out.fill(0.0),
            Some(Volatility::Constant(m)) => out.copy_from_slice(m),
            Some(Volatility::Field(f)) => f(t, x, mu, out),
        }
        check_values(name, self.bound, t, x, out)
    }

    pub fn eval_sigma(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) -> Result<()> {
        self.eval(&self.sigma, "sigma", t, x, mu, out)
    }

    pub fn eval_sigma0(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure, out: &mut [f64]) -> Result<()> {
        self.eval(&self.sigma0, "sigma0", t, x, mu, out)
    }

    pub fn running_cost(&self, t: f64, mu: &EmpiricalMeasure, u: &[f64]) -> Result<f64> {
        let v = self.running.value(t, mu, u);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                context: "running cost",
                t,
                x: u.to_vec(),
            })
        }
    }

    pub fn terminal_cost(&self, mu: &EmpiricalMeasure) -> Result<f64> {
        let v = (self.terminal)(mu);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                context: "terminal cost",
                t: self.horizon,
                x: vec![],
            })
        }
    }

    /// Uniform grid on `[0, T]` with `steps` steps.
    pub fn grid(&self, steps: usize) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, steps)
    }
}

/// The closed-form instance `σ = σ_0 = 1`, `L = -u²/2`, `g(μ) = μ(x)`,
/// `U = [-1, 1]`, `m_0 = δ_0` in one dimension, with horizon `T`. Its value is
/// `V(t, μ) = μ(x) + (T - t)/2`, `D_m V ≡ 1` and the optimal feedback is `û ≡ 1`.
pub fn lq_instance(horizon: f64) -> Result<ControlProblemSpec> {
    Ok(ControlProblemSpec::new(
        horizon,
        ControlBox::symmetric(1, 1.0)?,
        RunningCost::Quadratic { kappa: 1.0, base: None },
        Arc::new(|mu: &EmpiricalMeasure| mu.raw().iter().sum::<f64>() / mu.len() as f64),
        InitialLaw::Dirac(vec![0.0]),
    )?
    .with_scalar_sigma(1.0)
    .with_scalar_sigma0(1.0)
    .with_bound(1.0))
}

/// `q = μ(σ_0(t, ·, μ) p(μ, ·))`.
pub fn drift_pairing(
    spec: &ControlProblemSpec,
    t: f64,
    mu: &EmpiricalMeasure,
    p: &dyn Fn(&[f64], &mut [f64]) -> Result<()>,
) -> Result<Vec<f64>> {
    let d = spec.dim;
    if mu.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: mu.dim(),
            context: "measure",
        });
    }
    let mut q = vec![0.0; d];
    let mut pv = vec![0.0; d];
    let mut s = vec![0.0; d * d];
    for x in mu.atoms() {
        p(x, &mut pv)?;
        if pv.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "adjoint p",
                t,
                x: x.to_vec(),
            });
        }
        spec.eval_sigma0(t, x, mu, &mut s)?;
        mat_vec_add(&s, &pv, &mut q);
    }
    q.iter_mut().for_each(|v| *v /= mu.len() as f64);
    Ok(q)
}

/// `sup_{u ∈ U} L(t, μ, u) + u · q` and its maximizer.
///
/// For a quadratic reward the maximizer is `q/κ` clipped coordinate-wise into
/// the box (for `κ = 0`, the corner selected by the signs of `q`, lower end on
/// ties). Otherwise the control grid is searched in lexicographic order and
/// the first maximizer is kept.
pub fn hamiltonian_at(spec: &ControlProblemSpec, t: f64, mu: &EmpiricalMeasure, q: &[f64]) -> Result<(f64, Vec<f64>)> {
    match &spec.running {
        RunningCost::Quadratic { kappa, .. } => {
            let u: Vec<f64> = q
                .iter()
                .enumerate()
                .map(|(j, &qj)| {
                    let (l, h) = (spec.control.low[j], spec.control.high[j]);
                    if *kappa > 0.0 {
                        (qj / kappa).clamp(l, h)
                    } else if qj > 0.0 {
                        h
                    } else {
                        l
                    }
                })
                .collect();
            let h = spec.running_cost(t, mu, &u)? + dot(&u, q);
            Ok((h, u))
        }
        RunningCost::General(_) => {
            let grid = spec.control.grid();
            let mut best: Option<(f64, Vec<f64>)> = None;
            for u in grid {
                let v = spec.running_cost(t, mu, &u)? + dot(&u, q);
                if best.as_ref().is_none_or(|(b, _)| v > *b) {
                    best = Some((v, u));
                }
            }
            best.ok_or_else(|| Error::invalid("U grid", "empty control grid"))
        }
    }
}

/// `H(t, μ, p)` and `û`, with `q` computed by [`drift_pairing`].
pub fn hamiltonian(
    spec: &ControlProblemSpec,
    t: f64,
    mu: &EmpiricalMeasure,
    p: &dyn Fn(&[f64], &mut [f64]) -> Result<()>,
) -> Result<(f64, Vec<f64>)> {
    let q = drift_pairing(spec, t, mu, p)?;
    hamiltonian_at(spec, t, mu, &q)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

type PolicyRule = Arc<dyn Fn(f64, &EmpiricalMeasure, &mut [f64]) -> Result<()> + Send + Sync>;

/// `û(t, μ)`; outputs outside `U` are clipped during rollouts and counted.
#[derive(Clone)]
pub struct FeedbackPolicy {
    pub name: String,
    rule: PolicyRule,
}

impl fmt::Debug for FeedbackPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeedbackPolicy").field("name", &self.name).finish()
    }
}

impl FeedbackPolicy {
    pub fn new(name: impl Into<String>, rule: impl Fn(f64, &EmpiricalMeasure, &mut [f64]) -> Result<()> + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            rule: Arc::new(rule),
        }
    }

    pub fn constant(u: Vec<f64>) -> Self {
        Self::new(format!("constant{u:?}"), move |_t, _m, out| {
            out.copy_from_slice(&u);
            Ok(())
        })
    }

    /// Piecewise-constant open-loop control: `word[p]` on `[pT/P, (p+1)T/P)`.
    pub fn open_loop(horizon: f64, word: Vec<Vec<f64>>) -> Self {
        let pieces = word.len();
        Self::new(format!("open_loop{word:?}"), move |t, _m, out| {
            let p = ((t / horizon * pieces as f64).floor() as usize).min(pieces - 1);
            out.copy_from_slice(&word[p]);
            Ok(())
        })
    }

    /// The Hamiltonian maximizer with `p = D_m V(t, ·, ·)`.
    pub fn from_value_model(spec: &ControlProblemSpec, vm: &ValueModel) -> Self {
        let spec = spec.clone();
        let vm = vm.clone();
        Self::new(format!("argmax H(D_m {})", vm.name), move |t, mu, out| {
            let field = vm.lions_field(t, mu)?;
            let (_, u) = hamiltonian(&spec, t, mu, &|x, p| field.eval(x, p))?;
            out.copy_from_slice(&u);
            Ok(())
        })
    }

    pub fn apply(&self, t: f64, mu: &EmpiricalMeasure, out: &mut [f64]) -> Result<()> {
        (self.rule)(t, mu, out)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "feedback policy",
                t,
                x: out.to_vec(),
            });
        }
        Ok(())
    }
}

/// Value model `V(t, μ)` with its Lions derivative, as a cylindrical functional
/// without `y`-dependence.
#[derive(Debug, Clone)]
pub struct ValueModel {
    pub name: String,
    pub functional: CylindricalFunctional,
    /// Declared bound on `|D_m V|`.
    pub lions_bound: f64,
}

impl ValueModel {
    pub fn new(name: impl Into<String>, functional: CylindricalFunctional, lions_bound: f64) -> Result<Self> {
        if functional.depends_on_y() {
            return Err(Error::Unsupported("a value model cannot depend on y".into()));
        }
        Ok(Self {
            name: name.into(),
            functional,
            lions_bound,
        })
    }

    /// `V(t, μ) = μ(x) + rate (T - t)`.
    pub fn affine(name: &str, horizon: f64, rate: f64, with_mean: bool) -> Result<Self> {
        let terms = vec![
            Monomial::new(if with_mean { 1.0 } else { 0.0 }, 0, vec![], vec![1]),
            Monomial::new(rate * horizon, 0, vec![], vec![0]),
            Monomial::new(-rate, 1, vec![], vec![0]),
        ];
        let f = CylindricalFunctional::new(name, 1, Arc::new(PolynomialMap::new(1, 1, terms)?), vec![TestFunction::coordinate(1, 0)])?;
        Self::new(name, f, 1.0)
    }

    pub fn value(&self, t: f64, mu: &EmpiricalMeasure) -> Result<f64> {
        let y = vec![0.0; self.functional.dim()];
        self.functional.eval(t, &y, mu)
    }

    pub fn lions(&self, t: f64, mu: &EmpiricalMeasure, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.lions_field(t, mu)?.eval(x, out)
    }

    /// `D_m V(t, μ, ·)` with the moments of `μ` computed once.
    pub fn lions_field(&self, t: f64, mu: &EmpiricalMeasure) -> Result<LionsField<'_>> {
        let y = vec![0.0; self.functional.dim()];
        let z = self.functional.moments(mu)?;
        Ok(LionsField {
            vm: self,
            t,
            fz: self.functional.grad_z_at(t, &y, &z),
        })
    }
}

/// `x ↦ D_m V(t, μ, x)` for fixed `(t, μ)`.
#[derive(Debug, Clone)]
pub struct LionsField<'a> {
    vm: &'a ValueModel,
    t: f64,
    fz: Vec<f64>,
}

impl LionsField<'_> {
    pub fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.vm.functional.lions_derivative_with(&self.fz, x, out);
        check_values("D_m V", Some(self.vm.lions_bound), self.t, x, out)
    }
}

/// Registry of value models for the closed-form instance with horizon `T`:
/// `lq` is `μ(x) + (T - t)/2`, `lq_zero_gradient` is `(T - t)/2` (so `D_m V ≡ 0`).
pub fn value_model(name: &str, horizon: f64) -> Result<ValueModel> {
    match name {
        "lq" => ValueModel::affine(name, horizon, 0.5, true),
        "lq_zero_gradient" => ValueModel::affine(name, horizon, 0.5, false),
        other => Err(Error::invalid("value_model", format!("unknown value model `{other}`; known: lq, lq_zero_gradient"))),
    }
}

/// Per-step data of a controlled run.
#[derive(Debug, Clone)]
pub struct ControlStep {
    pub law: EmpiricalMeasure,
    pub u: Vec<f64>,
    pub clipped: bool,
    /// `σ_0 u` when `σ_0` is constant.
    drift: Option<Vec<f64>>,
}

/// Particle dynamics of the control problem. Without a policy the common path
/// carries no control drift (the reference measure under which `X°` is a
/// Brownian motion).
pub struct ControlledDynamics<'a> {
    pub spec: &'a ControlProblemSpec,
    pub policy: Option<&'a FeedbackPolicy>,
}

impl Dynamics for ControlledDynamics<'_> {
    type Step = ControlStep;

    fn dim(&self) -> usize {
        self.spec.dim
    }
    fn initial_law(&self) -> &InitialLaw {
        &self.spec.initial
    }
    fn uses_law(&self) -> bool {
        true
    }
    fn has_drift(&self) -> bool {
        self.policy.is_some() && self.spec.sigma0.is_some()
    }
    fn has_vol(&self) -> bool {
        self.spec.sigma.is_some()
    }
    fn has_common_vol(&self) -> bool {
        self.spec.sigma0.is_some()
    }
    fn prepare(&self, _k: usize, t: f64, law: Option<&EmpiricalMeasure>) -> Result<ControlStep> {
        let law = law.expect("controlled dynamics read the step law").clone();
        let mut u = vec![0.0; self.spec.dim];
        let mut clipped = false;
        if let Some(p) = self.policy {
            p.apply(t, &law, &mut u)?;
            clipped = self.spec.control.clip(&mut u);
        }
        let drift = match self.spec.sigma0.as_ref().and_then(Volatility::constant) {
            Some(m) => {
                check_values("sigma0", self.spec.bound, t, &u, m)?;
                let mut v = vec![0.0; self.spec.dim];
                mat_vec_add(m, &u, &mut v);
                Some(v)
            }
            None => None,
        };
        Ok(ControlStep { law, u, clipped, drift })
    }
    fn drift(&self, step: &ControlStep, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        if let Some(v) = &step.drift {
            out.copy_from_slice(v);
            return Ok(());
        }
        let d = self.spec.dim;
        let mut stack = [0.0; 16];
        let mut heap = Vec::new();
        let s: &mut [f64] = if d * d <= stack.len() {
            &mut stack[..d * d]
        } else {
            heap.resize(d * d, 0.0);
            &mut heap
        };
        self.spec.eval_sigma0(t, x, &step.law, s)?;
        out.fill(0.0);
        mat_vec_add(s, &step.u, out);
        Ok(())
    }
    fn vol(&self, step: &ControlStep, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.spec.eval_sigma(t, x, &step.law, out)
    }
    fn common_vol(&self, step: &ControlStep, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.spec.eval_sigma0(t, x, &step.law, out)
    }
    fn uniform(&self, step: &ControlStep, t: f64) -> Result<Option<UniformCoefficients>> {
        let d = self.spec.dim;
        let fixed = |v: &Option<Volatility>| match v {
            None => Some(vec![0.0; d * d]),
            Some(v) => v.constant().map(<[f64]>::to_vec),
        };
        let (Some(vol), Some(common_vol)) = (fixed(&self.spec.sigma), fixed(&self.spec.sigma0)) else {
            return Ok(None);
        };
        check_values("sigma", self.spec.bound, t, &step.u, &vol)?;
        let drift = step.drift.clone().unwrap_or_else(|| vec![0.0; d]);
        Ok(Some(UniformCoefficients { drift, vol, common_vol }))
    }
}

/// Simulation size shared by the Monte Carlo procedures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarlo {
    pub steps: usize,
    pub particles: usize,
    pub replications: u32,
    pub antithetic: bool,
}

impl MonteCarlo {
    fn check(&self) -> Result<()> {
        if self.particles < 2 {
            return Err(Error::invalid("particles", format!("need N ≥ 2, got {}", self.particles)));
        }
        if self.replications < 2 {
            return Err(Error::invalid("replications", format!("need R ≥ 2, got {}", self.replications)));
        }
        Ok(())
    }

    fn options(&self) -> EnsembleOptions {
        EnsembleOptions {
            store_idiosyncratic: false,
            antithetic: self.antithetic,
        }
    }

    /// `Δ^{1/2} + N^{-1/2}` for horizon `T`.
    pub fn error_scale(&self, horizon: f64) -> f64 {
        (horizon / self.steps as f64).sqrt() + 1.0 / (self.particles as f64).sqrt()
    }

    /// `2 (Δ + N^{-1/2})` for horizon `T`.
    pub fn bias_budget(&self, horizon: f64) -> f64 {
        2.0 * (horizon / self.steps as f64 + 1.0 / (self.particles as f64).sqrt())
    }
}

fn run(spec: &ControlProblemSpec, policy: Option<&FeedbackPolicy>, mc: &MonteCarlo, key: &RngKey, rep: u32) -> Result<(ParticleEnsemble, Vec<ControlStep>)> {
    let grid = spec.grid(mc.steps)?;
    simulate_ensemble_with(&ControlledDynamics { spec, policy }, grid, mc.particles, key, rep, mc.options())
}

/// Estimated reward of a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutReport {
    pub policy: String,
    pub mean: f64,
    /// `1.96 · stderr`.
    pub ci: f64,
    pub rewards: Vec<f64>,
    /// Steps at which the policy left `U` and was clipped.
    pub clipped_steps: u64,
}

/// Reward `Σ_k L(t_k, ρ_k, û_k) Δ + g(ρ_K)` of one replication.
fn reward(spec: &ControlProblemSpec, ens: &ParticleEnsemble, steps: &[ControlStep]) -> Result<f64> {
    let grid = ens.grid();
    let dt = grid.dt();
    let mut total = 0.0;
    for (k, s) in steps.iter().enumerate() {
        total += spec.running_cost(grid.node(k), &s.law, &s.u)? * dt;
    }
    Ok(total + spec.terminal_cost(&ens.conditional_law(grid.steps()))?)
}

pub fn rollout_feedback(spec: &ControlProblemSpec, policy: &FeedbackPolicy, mc: &MonteCarlo, key: &RngKey) -> Result<RolloutReport> {
    mc.check()?;
    let per_rep: Vec<(f64, u64)> = (0..mc.replications)
        .into_par_iter()
        .map(|r| {
            let (ens, steps) = run(spec, Some(policy), mc, key, r)?;
            let clipped = steps.iter().filter(|s| s.clipped).count() as u64;
            Ok((reward(spec, &ens, &steps)?, clipped))
        })
        .collect::<Result<_>>()?;
    let rewards: Vec<f64> = per_rep.iter().map(|p| p.0).collect();
    let (mean, ci) = mean_ci95(&rewards);
    Ok(RolloutReport {
        policy: policy.name.clone(),
        mean,
        ci,
        rewards,
        clipped_steps: per_rep.iter().map(|p| p.1).sum(),
    })
}

/// Outcome of the open-loop enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceReport {
    pub best_word: Vec<Vec<f64>>,
    pub best_mean: f64,
    pub best_ci: f64,
    /// `(word, mean reward)` in enumeration order.
    pub evaluated: Vec<(Vec<Vec<f64>>, f64)>,
}

/// Enumerate every piecewise-constant deterministic control word with
/// `pieces` pieces over `control_grid`, in lexicographic order of grid
/// indices, and keep the first best one.
pub fn bruteforce_openloop(
    spec: &ControlProblemSpec,
    control_grid: &[Vec<f64>],
    pieces: usize,
    mc: &MonteCarlo,
    key: &RngKey,
) -> Result<BruteForceReport> {
    if control_grid.is_empty() || pieces == 0 {
        return Err(Error::invalid("brute force", "needs a non-empty control grid and at least one piece"));
    }
    if let Some(u) = control_grid.iter().find(|u| u.len() != spec.dim || !spec.control.contains(u)) {
        return Err(Error::invalid("brute force", format!("grid point {u:?} is not in U")));
    }
    let g = control_grid.len() as u128;
    let words = (0..pieces).try_fold(1u128, |acc, _| acc.checked_mul(g)).unwrap_or(u128::MAX);
    if words > ENUMERATION_LIMIT {
        return Err(Error::EnumerationGuard {
            words,
            limit: ENUMERATION_LIMIT,
        });
    }
    let word_of = |mut idx: usize| -> Vec<Vec<f64>> {
        let mut w = vec![Vec::new(); pieces];
        for p in (0..pieces).rev() {
            w[p] = control_grid[idx % control_grid.len()].clone();
            idx /= control_grid.len();
        }
        w
    };
    let results: Vec<(Vec<Vec<f64>>, RolloutReport)> = (0..words as usize)
        .into_par_iter()
        .map(|i| {
            let word = word_of(i);
            let policy = FeedbackPolicy::open_loop(spec.horizon, word.clone());
            Ok((word, rollout_feedback(spec, &policy, mc, key)?))
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, (_, rep)) in results.iter().enumerate() {
        if rep.mean > results[best].1.mean {
            best = i;
        }
    }
    Ok(BruteForceReport {
        best_word: results[best].0.clone(),
        best_mean: results[best].1.mean,
        best_ci: results[best].1.ci,
        evaluated: results.iter().map(|(w, r)| (w.clone(), r.mean)).collect(),
    })
}

type CertificateField = Arc<dyn Fn(f64, &EmpiricalMeasure, &[f64], &mut [f64]) -> Result<()> + Send + Sync>;

#[derive(Clone)]
enum Phi {
    Constant(Vec<f64>),
    Model(Arc<ValueModel>),
    Field(CertificateField),
}

/// Pair `(v_0, φ)` of the dual problems. `φ(t, μ, x)` may depend on time;
/// with `time_frozen` it is always evaluated at `t = 0`.
#[derive(Clone)]
pub struct DualCertificate {
    pub v0: f64,
    phi: Phi,
    pub bound: f64,
    pub time_frozen: bool,
}

impl fmt::Debug for DualCertificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DualCertificate")
            .field("v0", &self.v0)
            .field("bound", &self.bound)
            .field("time_frozen", &self.time_frozen)
            .finish()
    }
}

impl DualCertificate {
    pub fn new(
        v0: f64,
        bound: f64,
        phi: impl Fn(f64, &EmpiricalMeasure, &[f64], &mut [f64]) -> Result<()> + Send + Sync + 'static,
    ) -> Self {
        Self {
            v0,
            phi: Phi::Field(Arc::new(phi)),
            bound,
            time_frozen: false,
        }
    }

    pub fn constant(v0: f64, phi: Vec<f64>) -> Self {
        Self {
            v0,
            bound: phi.iter().fold(0.0f64, |a, v| a.max(v.abs())),
            phi: Phi::Constant(phi),
            time_frozen: false,
        }
    }

    /// `(V(0, m_0), D_m V)`.
    pub fn from_value_model(vm: &ValueModel, m0: &EmpiricalMeasure) -> Result<Self> {
        let v0 = vm.value(0.0, m0)?;
        Ok(Self {
            v0,
            bound: vm.lions_bound,
            phi: Phi::Model(Arc::new(vm.clone())),
            time_frozen: false,
        })
    }

    pub fn frozen(mut self, frozen: bool) -> Self {
        self.time_frozen = frozen;
        self
    }

    pub fn eval(&self, t: f64, mu: &EmpiricalMeasure, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.with_field(t, mu, |field| field(x, out))
    }

    /// Run `body` with `x ↦ φ(t, μ, x)`, preparing per-measure data once.
    fn with_field<R>(&self, t: f64, mu: &EmpiricalMeasure, body: impl FnOnce(&dyn Fn(&[f64], &mut [f64]) -> Result<()>) -> Result<R>) -> Result<R> {
        let t = if self.time_frozen { 0.0 } else { t };
        let checked = |x: &[f64], out: &mut [f64]| check_values("certificate φ", Some(self.bound), t, x, out);
        match &self.phi {
            Phi::Constant(c) => body(&|x, out| {
                out.copy_from_slice(c);
                checked(x, out)
            }),
            Phi::Model(vm) => {
                let field = vm.lions_field(t, mu)?;
                body(&|x, out| {
                    field.eval(x, out)?;
                    checked(x, out)
                })
            }
            Phi::Field(f) => body(&|x, out| {
                f(t, mu, x, out)?;
                checked(x, out)
            }),
        }
    }
}

/// Pathwise residuals `v_0 + Σ ρ_k(σ_0 φ) ΔX⁰ - g(ρ_K) - Σ H(t_k, ρ_k, φ) Δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualityReport {
    pub residuals: Vec<f64>,
    pub min: f64,
    pub median: f64,
    pub tol: f64,
    /// Fraction of paths with residual `≥ -tol`.
    pub fraction_ok: f64,
    /// The inequality failed on at least one path.
    pub rejected: bool,
}

/// Residuals of a certificate along paths of the reference measure, under
/// which the common path `X⁰` is a driftless Brownian motion.
pub fn duality_residual(spec: &ControlProblemSpec, cert: &DualCertificate, mc: &MonteCarlo, key: &RngKey, tol: f64) -> Result<DualityReport> {
    mc.check()?;
    let d = spec.dim;
    let residuals: Vec<f64> = (0..mc.replications)
        .into_par_iter()
        .map(|r| {
            let (ens, steps) = run(spec, None, mc, key, r)?;
            let grid = *ens.grid();
            let dt = grid.dt();
            let mut dx0 = vec![0.0; d];
            let mut stoch = 0.0;
            let mut ham = 0.0;
            for (k, s) in steps.iter().enumerate() {
                let t = grid.node(k);
                let q = cert.with_field(t, &s.law, |phi| drift_pairing(spec, t, &s.law, phi))?;
                let (h, _) = hamiltonian_at(spec, t, &s.law, &q)?;
                ens.common().increment(k, &mut dx0);
                stoch += dot(&q, &dx0);
                ham += h * dt;
            }
            let g = spec.terminal_cost(&ens.conditional_law(grid.steps()))?;
            Ok(cert.v0 + stoch - g - ham)
        })
        .collect::<Result<_>>()?;
    let min = residuals.iter().copied().fold(f64::INFINITY, f64::min);
    let ok = residuals.iter().filter(|&&r| r >= -tol).count();
    let fraction_ok = ok as f64 / residuals.len() as f64;
    Ok(DualityReport {
        median: median(&residuals),
        min,
        tol,
        fraction_ok,
        rejected: ok < residuals.len(),
        residuals,
    })
}

/// Inverse likelihood ratios `exp(-Σ ν ΔX⁰ + ½ Σ |ν|² Δ)` of a feedback control
/// along reference paths, against the bound `exp(T ū²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GirsanovReport {
    pub bound: f64,
    pub mean: f64,
    pub ci: f64,
    pub within_bound: bool,
}

pub fn girsanov_check(spec: &ControlProblemSpec, policy: &FeedbackPolicy, mc: &MonteCarlo, key: &RngKey) -> Result<GirsanovReport> {
    mc.check()?;
    let d = spec.dim;
    let samples: Vec<f64> = (0..mc.replications)
        .into_par_iter()
        .map(|r| {
            let (ens, steps) = run(spec, None, mc, key, r)?;
            let grid = *ens.grid();
            let mut dx0 = vec![0.0; d];
            let mut u = vec![0.0; d];
            let mut log = 0.0;
            for (k, s) in steps.iter().enumerate() {
                policy.apply(grid.node(k), &s.law, &mut u)?;
                spec.control.clip(&mut u);
                ens.common().increment(k, &mut dx0);
                log += -dot(&u, &dx0) + 0.5 * dot(&u, &u) * grid.dt();
            }
            Ok(log.exp())
        })
        .collect::<Result<_>>()?;
    let bound = (spec.horizon * spec.control.max_norm().powi(2)).exp();
    let (mean, ci) = mean_ci95(&samples);
    Ok(GirsanovReport {
        bound,
        mean,
        ci,
        within_bound: mean - ci <= bound,
    })
}

/// Settings of [`verify_value`].
#[derive(Debug, Clone, PartialEq)]
pub struct VerifySettings {
    pub mc: MonteCarlo,
    pub brute_grid: Vec<Vec<f64>>,
    pub brute_pieces: usize,
    /// Inequality tolerance for the duality residuals.
    pub tol: f64,
    /// Allowed `|median residual|`.
    pub residual_median_bound: f64,
    /// Allowed `|J_feedback - V(0, m_0)| - CI`.
    pub bias_budget: f64,
    pub time_frozen_certificate: bool,
}

impl VerifySettings {
    /// Tolerances from the simulation size: `tol = Δ^{1/2} + N^{-1/2}`,
    /// median bound `3 (Δ^{1/2} + N^{-1/2})`, bias budget `2 (Δ + N^{-1/2})`.
    pub fn with_defaults(spec: &ControlProblemSpec, mc: MonteCarlo, brute_grid: Vec<Vec<f64>>, brute_pieces: usize) -> Self {
        let scale = mc.error_scale(spec.horizon);
        Self {
            tol: scale,
            residual_median_bound: 3.0 * scale,
            bias_budget: mc.bias_budget(spec.horizon),
            mc,
            brute_grid,
            brute_pieces,
            time_frozen_certificate: false,
        }
    }
}

/// Everything [`verify_value`] measured, with its pass flags.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub v0: f64,
    pub feedback: RolloutReport,
    pub brute: BruteForceReport,
    pub duality: DualityReport,
    pub girsanov: GirsanovReport,
    pub value_matches_feedback: bool,
    pub brute_not_better: bool,
    pub residual_inequality_holds: bool,
    pub residual_median_small: bool,
    pub pass: bool,
    /// Controls the comparison actually sampled: the synthesized feedback and
    /// every deterministic open-loop word. Progressively measurable controls
    /// outside this set are not checked.
    pub sampled_controls: Vec<String>,
}

/// Check a value model against the control problem: synthesize `û` from
/// `D_m V`, roll it out, compare with the open-loop enumeration, and evaluate
/// the pathwise duality residuals of `(V(0, m_0), D_m V)`.
pub fn verify_value(spec: &ControlProblemSpec, vm: &ValueModel, settings: &VerifySettings, key: &RngKey) -> Result<VerifyReport> {
    settings.mc.check()?;
    let grid = spec.grid(settings.mc.steps)?;
    let (ens0, _) = simulate_ensemble_with(
        &ControlledDynamics { spec, policy: None },
        TimeGrid::new(grid.horizon(), 1)?,
        settings.mc.particles,
        key,
        0,
        settings.mc.options(),
    )?;
    let m0 = ens0.conditional_law(0);
    let v0 = vm.value(0.0, &m0)?;

    let policy = FeedbackPolicy::from_value_model(spec, vm);
    let feedback = rollout_feedback(spec, &policy, &settings.mc, key)?;
    let brute = bruteforce_openloop(spec, &settings.brute_grid, settings.brute_pieces, &settings.mc, key)?;
    let cert = DualCertificate::from_value_model(vm, &m0)?.frozen(settings.time_frozen_certificate);
    let duality = duality_residual(spec, &cert, &settings.mc, key, settings.tol)?;
    let girsanov = girsanov_check(spec, &policy, &settings.mc, key)?;

    let value_matches_feedback = (feedback.mean - v0).abs() <= feedback.ci + settings.bias_budget;
    let brute_not_better = brute.best_mean <= feedback.mean + feedback.ci;
    let residual_inequality_holds = !duality.rejected;
    let residual_median_small = duality.median.abs() <= settings.residual_median_bound;
    let pass = value_matches_feedback && brute_not_better && residual_inequality_holds && residual_median_small;
    let mut sampled_controls = vec![policy.name.clone()];
    sampled_controls.extend(brute.evaluated.iter().map(|(w, _)| format!("open_loop{w:?}")));
    Ok(VerifyReport {
        v0,
        feedback,
        brute,
        duality,
        girsanov,
        value_matches_feedback,
        brute_not_better,
        residual_inequality_holds,
        residual_median_small,
        pass,
        sampled_controls,
    })
}
