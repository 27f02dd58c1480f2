//! ε-regularized covariation and ladder-based orthogonality verdicts.
//!
//! The regularized bracket of two scalar paths is
//! `[X, Y]^ε_t = (1/ε) ∫_0^t (X_{r+ε} - X_r)(Y_{r+ε} - Y_r) dr`,
//! discretized on the grid with `ε = kΔ` by the left-point Riemann sum
//! `(Δ/ε) Σ_{i<j} (X_{i+k} - X_i)(Y_{i+k} - Y_i)` at node `t_j`, for
//! `t_j + ε ≤ T`.
//!
//! Convergence as `ε → 0` is judged on a finite, strictly decreasing ladder of
//! `ε` values: for each labelled pair the statistic
//! `sup_t |[X, Y]^ε_t - reference_t|` is computed per replication and its
//! median must be non-increasing along the ladder (up to a tolerance factor)
//! and end below a threshold `θ`.

use std::io::{self, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::paths::{SamplePath, TimeGrid};
use crate::stats::{median, quantile};

/// Default final-ε threshold `θ`.
pub const DEFAULT_THETA: f64 = 0.05;
/// Default tolerated growth factor between consecutive ladder medians.
pub const DEFAULT_MONOTONE_FACTOR: f64 = 1.1;
/// Medians at or below this level count as zero in the monotonicity check,
/// so exactly vanishing statistics are not failed on rounding noise.
pub const MONOTONE_NOISE_FLOOR: f64 = 1e-12;

/// Running estimate `[X, Y]^ε` at the nodes `t_0, ..., t_{K-k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct QCovEstimate {
    pub grid: TimeGrid,
    pub shift: usize,
    pub values: Vec<f64>,
}

impl QCovEstimate {
    pub fn eps(&self) -> f64 {
        self.shift as f64 * self.grid.dt()
    }

    /// Last node index at which the estimate is defined.
    pub fn last_node(&self) -> usize {
        self.values.len() - 1
    }
}

fn check_pair(x: &SamplePath, y: &SamplePath, shift: usize) -> Result<()> {
    if x.grid() != y.grid() {
        return Err(Error::GridMismatch);
    }
    for p in [x, y] {
        if p.dim() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: p.dim(),
                context: "covariation needs scalar paths; take a coordinate first",
            });
        }
    }
    if shift == 0 || shift >= x.grid().steps() {
        return Err(Error::invalid(
            "shift",
            format!("ε = kΔ needs 1 ≤ k < K = {}, got k = {shift}", x.grid().steps()),
        ));
    }
    Ok(())
}

/// `[X, Y]^ε` with `ε = shift · Δ`.
pub fn qcov(x: &SamplePath, y: &SamplePath, shift: usize) -> Result<QCovEstimate> {
    check_pair(x, y, shift)?;
    let grid = *x.grid();
    let (xv, yv) = (x.values(), y.values());
    let last = grid.steps() - shift;
    let scale = 1.0 / shift as f64;
    let mut values = Vec::with_capacity(last + 1);
    let mut acc = 0.0;
    values.push(0.0);
    for i in 0..last {
        acc += (xv[i + shift] - xv[i]) * (yv[i + shift] - yv[i]);
        values.push(acc * scale);
    }
    Ok(QCovEstimate {
        grid,
        shift,
        values,
    })
}

/// `sup_{t_j ≤ T-ε} |[X, Y]^ε_{t_j} - reference_j|`, without storing the estimate.
/// A missing reference means the reference path `0`.
pub fn qcov_sup_error(x: &SamplePath, y: &SamplePath, shift: usize, reference: Option<&[f64]>) -> Result<f64> {
    check_pair(x, y, shift)?;
    if let Some(r) = reference {
        if r.len() != x.grid().len() {
            return Err(Error::DimensionMismatch {
                expected: x.grid().len(),
                got: r.len(),
                context: "reference path",
            });
        }
    }
    let (xv, yv) = (x.values(), y.values());
    let last = x.grid().steps() - shift;
    let scale = 1.0 / shift as f64;
    let at = |j: usize| reference.map_or(0.0, |r| r[j]);
    let mut worst = at(0).abs();
    let mut acc = 0.0;
    for i in 0..last {
        acc += (xv[i + shift] - xv[i]) * (yv[i + shift] - yv[i]);
        worst = worst.max((acc * scale - at(i + 1)).abs());
    }
    Ok(worst)
}

/// Strictly decreasing ladder of shifts `k_1 > k_2 > ...` on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsLadder {
    grid: TimeGrid,
    shifts: Vec<usize>,
}

impl EpsLadder {
    pub fn new(grid: TimeGrid, shifts: Vec<usize>) -> Result<Self> {
        if shifts.is_empty() {
            return Err(Error::invalid("ladder", "needs at least one ε"));
        }
        if shifts.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("ladder", format!("ε values must be strictly decreasing, got shifts {shifts:?}")));
        }
        if shifts[0] >= grid.steps() || *shifts.last().unwrap() == 0 {
            return Err(Error::invalid("ladder", format!("every ε = kΔ needs 1 ≤ k < {}", grid.steps())));
        }
        Ok(Self { grid, shifts })
    }

    /// From explicit `ε` values, each of which must be a grid multiple.
    pub fn from_eps(grid: TimeGrid, eps: &[f64]) -> Result<Self> {
        let shifts = eps
            .iter()
            .map(|&e| {
                grid.steps_for(e)
                    .ok_or_else(|| Error::invalid("ladder", format!("ε = {e} is not a positive multiple of Δ = {}", grid.dt())))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(grid, shifts)
    }

    /// `ε ∈ {2^-from, ..., 2^-to} · T`.
    pub fn dyadic(grid: TimeGrid, from: u32, to: u32) -> Result<Self> {
        if from > to {
            return Err(Error::invalid("ladder", format!("dyadic exponents must satisfy from ≤ to, got {from} > {to}")));
        }
        let eps: Vec<f64> = (from..=to).map(|e| grid.horizon() * 0.5f64.powi(e as i32)).collect();
        Self::from_eps(grid, &eps)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn shifts(&self) -> &[usize] {
        &self.shifts
    }

    pub fn eps(&self) -> Vec<f64> {
        self.shifts.iter().map(|&k| k as f64 * self.grid.dt()).collect()
    }

    pub fn len(&self) -> usize {
        self.shifts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shifts.is_empty()
    }
}

/// A labelled pair `(X, Y)` whose bracket is compared with `reference`
/// (`None` meaning the zero path).
#[derive(Debug, Clone)]
pub struct CovariationPair {
    pub label: String,
    pub x: SamplePath,
    pub y: SamplePath,
    pub reference: Option<Vec<f64>>,
}

impl CovariationPair {
    pub fn orthogonal(label: impl Into<String>, x: SamplePath, y: SamplePath) -> Self {
        Self {
            label: label.into(),
            x,
            y,
            reference: None,
        }
    }

    pub fn with_reference(label: impl Into<String>, x: SamplePath, y: SamplePath, reference: Vec<f64>) -> Self {
        Self {
            label: label.into(),
            x,
            y,
            reference: Some(reference),
        }
    }
}

/// One line of a convergence report.
#[derive(Debug, Clone, PartialEq)]
pub struct LadderRow {
    pub eps: f64,
    pub label: String,
    pub median: f64,
    pub q90: f64,
}

/// Per-label, per-ε replication statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub eps: Vec<f64>,
    pub labels: Vec<String>,
    /// `stats[label][rung][replication]`
    pub stats: Vec<Vec<Vec<f64>>>,
}

/// Outcome of a ladder verdict.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub pass: bool,
    /// Largest smallest-ε median over labels.
    pub worst_stat: f64,
}

impl ConvergenceReport {
    pub fn replications(&self) -> usize {
        self.stats.first().and_then(|l| l.first()).map_or(0, Vec::len)
    }

    pub fn medians(&self, label: usize) -> Vec<f64> {
        self.stats[label].iter().map(|s| median(s)).collect()
    }

    pub fn rows(&self) -> Vec<LadderRow> {
        let mut rows = Vec::new();
        for (l, label) in self.labels.iter().enumerate() {
            for (r, &eps) in self.eps.iter().enumerate() {
                let s = &self.stats[l][r];
                rows.push(LadderRow {
                    eps,
                    label: label.clone(),
                    median: median(s),
                    q90: quantile(s, 0.9),
                });
            }
        }
        rows
    }

    /// PASS iff for every label the medians are non-increasing along the
    /// ladder up to `factor` (or below [`MONOTONE_NOISE_FLOOR`]) and the last
    /// median is at most `theta`.
    pub fn verdict(&self, theta: f64, factor: f64) -> Verdict {
        let mut pass = true;
        let mut worst: f64 = 0.0;
        for l in 0..self.labels.len() {
            let m = self.medians(l);
            let last = *m.last().expect("non-empty ladder");
            worst = worst.max(last);
            pass &= last <= theta;
            pass &= m.windows(2).all(|w| w[1] <= factor * w[0] || w[1] <= MONOTONE_NOISE_FLOOR);
        }
        Verdict {
            pass,
            worst_stat: worst,
        }
    }

    /// CSV with header `epsilon,N_label,median,q90`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "epsilon,N_label,median,q90")?;
        for row in self.rows() {
            writeln!(w, "{:?},{},{:?},{:?}", row.eps, row.label, row.median, row.q90)?;
        }
        Ok(())
    }
}

/// Fan out `replications` calls of `generate` (in parallel, each keyed by its
/// replication index) and evaluate every returned pair on every ladder rung.
///
/// All replications must return the same labels in the same order. Paths are
/// dropped as soon as their statistics are computed.
pub fn convergence_report<G>(replications: u32, ladder: &EpsLadder, generate: G) -> Result<ConvergenceReport>
where
    G: Fn(u32) -> Result<Vec<CovariationPair>> + Sync,
{
    if replications == 0 {
        return Err(Error::invalid("replications", "must be at least 1"));
    }
    let per_rep: Vec<(Vec<String>, Vec<Vec<f64>>)> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let pairs = generate(r)?;
            let mut labels = Vec::with_capacity(pairs.len());
            let mut stats = Vec::with_capacity(pairs.len());
            for p in &pairs {
                if p.x.grid() != ladder.grid() {
                    return Err(Error::GridMismatch);
                }
                let row = ladder
                    .shifts()
                    .iter()
                    .map(|&k| qcov_sup_error(&p.x, &p.y, k, p.reference.as_deref()))
                    .collect::<Result<Vec<_>>>()?;
                labels.push(p.label.clone());
                stats.push(row);
            }
            Ok((labels, stats))
        })
        .collect::<Result<_>>()?;

    let labels = per_rep[0].0.clone();
    if labels.is_empty() {
        return Err(Error::invalid("battery", "no covariation pairs to evaluate"));
    }
    if let Some((l, _)) = per_rep.iter().find(|(l, _)| *l != labels) {
        return Err(Error::invalid(
            "battery",
            format!("replications disagree on pair labels: {labels:?} vs {l:?}"),
        ));
    }
    let mut stats = vec![vec![Vec::with_capacity(replications as usize); ladder.len()]; labels.len()];
    for (_, rep) in &per_rep {
        for (l, row) in rep.iter().enumerate() {
            for (r, &v) in row.iter().enumerate() {
                stats[l][r].push(v);
            }
        }
    }
    Ok(ConvergenceReport {
        eps: ladder.eps(),
        labels,
        stats,
    })
}

/// Thresholds for [`orthogonality_test`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerdictRule {
    pub theta: f64,
    pub factor: f64,
}

impl Default for VerdictRule {
    fn default() -> Self {
        Self {
            theta: DEFAULT_THETA,
            factor: DEFAULT_MONOTONE_FACTOR,
        }
    }
}

/// A candidate orthogonal path with its martingale battery, for one replication.
#[derive(Debug, Clone)]
pub struct OrthogonalityCase {
    pub candidate: SamplePath,
    pub battery: Vec<(String, SamplePath)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalityOutcome {
    pub report: ConvergenceReport,
    pub verdict: Verdict,
}

/// Test `[A, N] = 0` for every battery member `N` along the ladder.
pub fn orthogonality_test<G>(replications: u32, ladder: &EpsLadder, rule: VerdictRule, generate: G) -> Result<OrthogonalityOutcome>
where
    G: Fn(u32) -> Result<OrthogonalityCase> + Sync,
{
    let report = convergence_report(replications, ladder, |r| {
        let case = generate(r)?;
        if case.battery.is_empty() {
            return Err(Error::invalid("battery", "orthogonality needs at least one test martingale"));
        }
        Ok(case
            .battery
            .into_iter()
            .map(|(label, n)| CovariationPair::orthogonal(label, case.candidate.clone(), n))
            .collect())
    })?;
    let verdict = report.verdict(rule.theta, rule.factor);
    Ok(OrthogonalityOutcome { report, verdict })
}

/// A path `Y` with claimed martingale part `M^Y` and a battery, for one replication.
#[derive(Debug, Clone)]
pub struct WeakDirichletCase {
    pub y: SamplePath,
    pub martingale_part: SamplePath,
    pub battery: Vec<(String, SamplePath)>,
}

/// `Y` is weak Dirichlet with martingale part `M^Y` iff `A^Y = Y - Y_0 - M^Y`
/// passes [`orthogonality_test`].
pub fn weak_dirichlet_check<G>(replications: u32, ladder: &EpsLadder, rule: VerdictRule, generate: G) -> Result<OrthogonalityOutcome>
where
    G: Fn(u32) -> Result<WeakDirichletCase> + Sync,
{
    orthogonality_test(replications, ladder, rule, |r| {
        let case = generate(r)?;
        let y0 = case.y.started_at_zero();
        let candidate = SamplePath::linear_combination(&[(1.0, &y0), (-1.0, &case.martingale_part)])?;
        Ok(OrthogonalityCase {
            candidate,
            battery: case.battery,
        })
    })
}
