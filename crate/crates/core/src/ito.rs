//! Numerical C¹-Itô decomposition along a conditional law flow.
//!
//! For a cylindrical functional `F`, an observed semimartingale `Y` with known
//! local-martingale part `M^Y`, and a particle ensemble standing for `m_t`,
//!
//! `F(t, Y_t, m_t) = F(0, Y_0, m_0) + ∫ D_y F dM^Y + ∫ E°[D_m F(s, ·, m_s, X_s) σ°_s](Y_s) dW°_s + Γ_t`,
//!
//! with both integrals as left-point sums and `Γ` defined by subtraction, so the
//! identity holds exactly at every node. `Γ` should be an orthogonal process;
//! [`gamma_orthogonality`] tests that along an ε-ladder. For functionals with
//! second derivatives, [`c2_gamma_oracle`] gives `Γ` in closed form through the
//! generator, as an independent cross-check.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::functional::CylindricalFunctional;
use crate::paths::{build_semimartingale, sample_brownian, SamplePath, Semimartingale, SemimartingaleSpec, TimeGrid};
use crate::particle::{simulate_ensemble_on, Dynamics, EnsembleOptions, ParticleEnsemble, common_noise};
use crate::regularization::{orthogonality_test, EpsLadder, OrthogonalityCase, OrthogonalityOutcome, VerdictRule};
use crate::rng::{RngKey, Role, StreamLabel};

/// `F`-path with its two stochastic integrals and the residual `Γ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ItoDecomposition {
    pub grid: TimeGrid,
    pub f: Vec<f64>,
    pub i_y: Vec<f64>,
    pub i_common: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl ItoDecomposition {
    /// `max_k |F_k - F_0 - I_Y,k - I°_k - Γ_k|`.
    pub fn identity_residual(&self) -> f64 {
        (0..self.f.len())
            .map(|k| (self.f[k] - self.f[0] - self.i_y[k] - self.i_common[k] - self.gamma[k]).abs())
            .fold(0.0, f64::max)
    }

    pub fn gamma_path(&self) -> SamplePath {
        SamplePath::new(self.grid, 1, self.gamma.clone()).expect("Γ is finite")
    }

    pub fn sup_abs_gamma(&self) -> f64 {
        self.gamma.iter().fold(0.0, |a, g| a.max(g.abs()))
    }

    /// CSV with header `t,F,I_Y,I_common,Gamma`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,F,I_Y,I_common,Gamma")?;
        for k in 0..self.f.len() {
            writeln!(
                w,
                "{:?},{:?},{:?},{:?},{:?}",
                self.grid.node(k),
                self.f[k],
                self.i_y[k],
                self.i_common[k],
                self.gamma[k]
            )?;
        }
        Ok(())
    }
}

/// Switches for [`assemble_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssembleOptions {
    /// Multiplies every increment of the common-noise integral. `1` is the
    /// honest decomposition; anything else is a deliberately broken one.
    pub common_scale: f64,
}

impl Default for AssembleOptions {
    fn default() -> Self {
        Self { common_scale: 1.0 }
    }
}

/// Moments `z = (m(φ_1), ..., m(φ_J))` of the ensemble at node `k`, summed in particle order.
fn moments(f: &CylindricalFunctional, ens: &ParticleEnsemble, k: usize) -> Result<Vec<f64>> {
    let n = ens.len();
    let mut z = vec![0.0; f.arity()];
    for i in 0..n {
        let x = ens.state(k, i);
        for (zj, phi) in z.iter_mut().zip(f.tests()) {
            *zj += phi.value(x);
        }
    }
    z.iter_mut().for_each(|v| *v /= n as f64);
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "functional moments",
            t: ens.grid().node(k),
            x: z,
        });
    }
    Ok(z)
}

fn check_inputs(f: &CylindricalFunctional, y: &Semimartingale, ens: &ParticleEnsemble) -> Result<()> {
    if *y.x.grid() != *ens.grid() {
        return Err(Error::GridMismatch);
    }
    for (got, ctx) in [(y.x.dim(), "observed process"), (ens.dim(), "ensemble")] {
        if got != f.dim() {
            return Err(Error::DimensionMismatch {
                expected: f.dim(),
                got,
                context: ctx,
            });
        }
    }
    Ok(())
}

/// [`assemble_with`] with default options.
pub fn assemble<D: Dynamics>(
    f: &CylindricalFunctional,
    y: &Semimartingale,
    ens: &ParticleEnsemble,
    dynamics: &D,
    steps: &[D::Step],
) -> Result<ItoDecomposition> {
    assemble_with(f, y, ens, dynamics, steps, AssembleOptions::default())
}

/// Left-point assembly of the decomposition. `dynamics`/`steps` supply `σ°`
/// at the particle positions (the per-step contexts returned by the
/// simulation).
pub fn assemble_with<D: Dynamics>(
    f: &CylindricalFunctional,
    y: &Semimartingale,
    ens: &ParticleEnsemble,
    dynamics: &D,
    steps: &[D::Step],
    options: AssembleOptions,
) -> Result<ItoDecomposition> {
    check_inputs(f, y, ens)?;
    let grid = *ens.grid();
    if steps.len() != grid.steps() {
        return Err(Error::DimensionMismatch {
            expected: grid.steps(),
            got: steps.len(),
            context: "per-step contexts",
        });
    }
    let d = f.dim();
    let n = ens.len();
    let len = grid.len();
    let m_y = y.local_martingale();

    let mut fv = Vec::with_capacity(len);
    let mut i_y = vec![0.0; len];
    let mut i_c = vec![0.0; len];
    let mut gy = vec![0.0; d];
    let mut dm = vec![0.0; d];
    let mut sig = vec![0.0; d * d];
    let mut kernel = vec![0.0; d];
    let mut dmy = vec![0.0; d];
    let mut dwc = vec![0.0; d];

    for k in 0..len {
        let t = grid.node(k);
        let yk = y.x.point(k);
        let z = moments(f, ens, k)?;
        let value = f.eval_at(t, yk, &z);
        if !value.is_finite() {
            return Err(Error::NonFinite { context: "F", t, x: yk.to_vec() });
        }
        fv.push(value);
        if k == grid.steps() {
            break;
        }

        let growth = f.growth_constant(t, yk, &z)?;
        let fz = f.grad_z_at(t, yk, &z);

        f.outer().grad_y(t, yk, &z, &mut gy);
        m_y.increment(k, &mut dmy);
        let dy: f64 = gy.iter().zip(&dmy).map(|(a, b)| a * b).sum();

        kernel.fill(0.0);
        if dynamics.has_common_vol() {
            for i in 0..n {
                let x = ens.state(k, i);
                f.lions_derivative_with(&fz, x, &mut dm);
                let xnorm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dm_norm = dm.iter().map(|v| v * v).sum::<f64>().sqrt();
                if dm_norm > growth * (1.0 + xnorm) * (1.0 + 1e-9) + 1e-12 {
                    return Err(Error::GrowthCertificate(format!(
                        "|D_m F| = {dm_norm} exceeds {growth}·(1 + |x|) at t = {t}, x = {x:?}"
                    )));
                }
                dynamics.common_vol(&steps[k], t, x, &mut sig)?;
                // row vector D_m F times σ°
                for b in 0..d {
                    kernel[b] += (0..d).map(|a| dm[a] * sig[a * d + b]).sum::<f64>();
                }
            }
            kernel.iter_mut().for_each(|v| *v /= n as f64);
        }
        ens.common().increment(k, &mut dwc);
        let dc: f64 = kernel.iter().zip(&dwc).map(|(a, b)| a * b).sum();

        i_y[k + 1] = i_y[k] + dy;
        i_c[k + 1] = i_c[k] + options.common_scale * dc;
        if !(i_y[k + 1].is_finite() && i_c[k + 1].is_finite()) {
            return Err(Error::NonFinite {
                context: "stochastic integral",
                t,
                x: yk.to_vec(),
            });
        }
    }
    let gamma = (0..len).map(|k| fv[k] - fv[0] - i_y[k] - i_c[k]).collect();
    Ok(ItoDecomposition {
        grid,
        f: fv,
        i_y,
        i_common: i_c,
        gamma,
    })
}

/// `Γ_t = ∫_0^t [∂_t F + m_s(D_m F · a) + ½ m_s(tr(∂_x D_m F (σσᵀ + σ°σ°ᵀ)))
/// + ½ m_s⊗m_s(D²_m F(x, x') : σ°(x) σ°(x')ᵀ)] ds` as a left-point sum, for
/// functionals that do not depend on `y`. The last term pairs entry `(a, b)` of
/// `D²_m F(x, x')` with entry `(a, b)` of `σ°(x) σ°(x')ᵀ`.
pub fn c2_gamma_oracle<D: Dynamics>(
    f: &CylindricalFunctional,
    ens: &ParticleEnsemble,
    dynamics: &D,
    steps: &[D::Step],
) -> Result<SamplePath> {
    if f.depends_on_y() {
        return Err(Error::Unsupported(format!(
            "the generator oracle needs a functional without y-dependence, `{}` depends on y",
            f.name()
        )));
    }
    let grid = *ens.grid();
    if ens.dim() != f.dim() {
        return Err(Error::DimensionMismatch {
            expected: f.dim(),
            got: ens.dim(),
            context: "ensemble",
        });
    }
    if steps.len() != grid.steps() {
        return Err(Error::DimensionMismatch {
            expected: grid.steps(),
            got: steps.len(),
            context: "per-step contexts",
        });
    }
    let d = f.dim();
    let j = f.arity();
    let n = ens.len() as f64;
    let y = vec![0.0; d];
    let dt = grid.dt();

    let mut gamma = vec![0.0; grid.len()];
    let mut a = vec![0.0; d];
    let mut sig = vec![0.0; d * d];
    let mut sig0 = vec![0.0; d * d];
    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    let mut fzz = vec![0.0; j * j];
    for k in 0..grid.steps() {
        let t = grid.node(k);
        let z = moments(f, ens, k)?;
        let fz = f.grad_z_at(t, &y, &z);
        f.outer().hess_z(t, &y, &z, &mut fzz);
        let step = &steps[k];

        let mut drift_term = 0.0;
        let mut diffusion_term = 0.0;
        // c_j = m(σ°ᵀ φ_j')
        let mut c = vec![0.0; j * d];
        for i in 0..ens.len() {
            let x = ens.state(k, i);
            if dynamics.has_drift() {
                dynamics.drift(step, t, x, &mut a)?;
            } else {
                a.fill(0.0);
            }
            if dynamics.has_vol() {
                dynamics.vol(step, t, x, &mut sig)?;
            } else {
                sig.fill(0.0);
            }
            if dynamics.has_common_vol() {
                dynamics.common_vol(step, t, x, &mut sig0)?;
            } else {
                sig0.fill(0.0);
            }
            for (jj, phi) in f.tests().iter().enumerate() {
                phi.grad(x, &mut grad);
                phi.hess(x, &mut hess);
                drift_term += fz[jj] * grad.iter().zip(&a).map(|(g, v)| g * v).sum::<f64>();
                let mut tr = 0.0;
                for r in 0..d {
                    for s in 0..d {
                        // (σσᵀ + σ°σ°ᵀ)_{sr}
                        let cov: f64 = (0..d).map(|q| sig[s * d + q] * sig[r * d + q] + sig0[s * d + q] * sig0[r * d + q]).sum();
                        tr += hess[r * d + s] * cov;
                    }
                }
                diffusion_term += fz[jj] * tr;
                for q in 0..d {
                    c[jj * d + q] += (0..d).map(|r| sig0[r * d + q] * grad[r]).sum::<f64>();
                }
            }
        }
        drift_term /= n;
        diffusion_term /= n;
        c.iter_mut().for_each(|v| *v /= n);
        let mut cross = 0.0;
        for p in 0..j {
            for q in 0..j {
                let h = fzz[p * j + q];
                if h != 0.0 {
                    cross += h * (0..d).map(|r| c[p * d + r] * c[q * d + r]).sum::<f64>();
                }
            }
        }
        let integrand = f.outer().d_t(t, &y, &z) + drift_term + 0.5 * diffusion_term + 0.5 * cross;
        if !integrand.is_finite() {
            return Err(Error::NonFinite {
                context: "generator integrand",
                t,
                x: z,
            });
        }
        gamma[k + 1] = gamma[k] + integrand * dt;
    }
    SamplePath::new(grid, 1, gamma)
}

/// Decompositions of one replication with their orthogonality battery.
pub struct GammaCase {
    pub decomposition: ItoDecomposition,
    pub battery: Vec<(String, SamplePath)>,
}

/// Orthogonality of `Γ` against the battery, over `replications` independent runs.
pub fn gamma_orthogonality<G>(replications: u32, ladder: &EpsLadder, rule: VerdictRule, generate: G) -> Result<OrthogonalityOutcome>
where
    G: Fn(u32) -> Result<GammaCase> + Sync,
{
    orthogonality_test(replications, ladder, rule, |r| {
        let case = generate(r)?;
        Ok(OrthogonalityCase {
            candidate: case.decomposition.gamma_path(),
            battery: case.battery,
        })
    })
}

/// A complete C¹-Itô experiment: particles `X` under `x_spec`, an observed `Y`
/// under `y_spec` sharing the same common noise, and a functional `F`.
#[derive(Debug, Clone)]
pub struct ItoScenario {
    pub functional: CylindricalFunctional,
    pub x_spec: SemimartingaleSpec,
    /// `None` means `Y ≡ y0`.
    pub y_spec: Option<SemimartingaleSpec>,
    pub y0: Vec<f64>,
    pub grid: TimeGrid,
    pub particles: usize,
    pub assemble: AssembleOptions,
}

/// One replication of an [`ItoScenario`].
#[derive(Debug, Clone)]
pub struct ItoRun {
    pub decomposition: ItoDecomposition,
    /// `W^Y` (coordinates) followed by `W°` (coordinates).
    pub battery: Vec<(String, SamplePath)>,
    /// Generator oracle, when `F` has no `y`-dependence.
    pub oracle: Option<SamplePath>,
}

impl ItoScenario {
    pub fn run(&self, key: &RngKey, replication: u32) -> Result<ItoRun> {
        let d = self.functional.dim();
        if self.x_spec.dim() != d || self.y0.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: if self.x_spec.dim() != d { self.x_spec.dim() } else { self.y0.len() },
                context: "scenario dimension",
            });
        }
        let common = common_noise(self.grid, d, key, replication);
        let w_y = sample_brownian(self.grid, d, key, StreamLabel::new(replication, 0, Role::Observed));
        let y = match &self.y_spec {
            Some(spec) => build_semimartingale(spec, self.grid, &w_y, &common, &self.y0)?,
            None => build_semimartingale(&SemimartingaleSpec::new(d), self.grid, &w_y, &common, &self.y0)?,
        };
        let (ens, steps) = simulate_ensemble_on(&self.x_spec, common.clone(), self.particles, key, replication, EnsembleOptions::default())?;
        let decomposition = assemble_with(&self.functional, &y, &ens, &self.x_spec, &steps, self.assemble)?;
        let oracle = if self.functional.depends_on_y() {
            None
        } else {
            Some(c2_gamma_oracle(&self.functional, &ens, &self.x_spec, &steps)?)
        };
        let mut battery = Vec::with_capacity(2 * d);
        for (name, path) in [("W", &w_y), ("W_common", &common)] {
            for c in 0..d {
                let label = if d == 1 { name.to_string() } else { format!("{name}_{}", c + 1) };
                battery.push((label, path.coordinate(c)));
            }
        }
        Ok(ItoRun {
            decomposition,
            battery,
            oracle,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functional::{builtin, identity_outer, Monomial, PolynomialMap, TestFunction};
    use crate::paths::{make_grid, InitialLaw};
    use crate::particle::simulate_ensemble_with;
    use std::sync::Arc;

    fn key() -> RngKey {
        RngKey::new(77)
    }

    fn scenario(name: &str, x_spec: SemimartingaleSpec, k: usize, n: usize) -> ItoScenario {
        ItoScenario {
            functional: builtin(name, &[], 1).unwrap(),
            x_spec,
            y_spec: None,
            y0: vec![0.0],
            grid: make_grid(1.0, k).unwrap(),
            particles: n,
            assemble: AssembleOptions::default(),
        }
    }

    fn gaussian_start() -> InitialLaw {
        InitialLaw::Gaussian { mean: vec![0.3], std: 0.5 }
    }

    #[test]
    fn mean_under_pure_common_noise() {
        let spec = SemimartingaleSpec::new(1).with_initial(gaussian_start()).with_scalar_common_vol(1.0);
        let run = scenario("mean", spec, 256, 200).run(&key(), 0).unwrap();
        let dec = &run.decomposition;
        assert!(dec.identity_residual() < 1e-12);
        assert!(dec.sup_abs_gamma() < 1e-12, "{}", dec.sup_abs_gamma());
        let w0 = &run.battery[1].1;
        for k in 0..dec.f.len() {
            assert!((dec.i_common[k] - w0.at(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_under_idiosyncratic_noise() {
        let spec = SemimartingaleSpec::new(1).with_initial(gaussian_start()).with_scalar_vol(1.0);
        let n = 4000;
        let run = scenario("mean", spec, 64, n).run(&key(), 1).unwrap();
        let dec = &run.decomposition;
        assert!(dec.i_common.iter().all(|&v| v == 0.0));
        // Γ_t = mean of the idiosyncratic endpoints, a CLT-size quantity
        assert!(dec.sup_abs_gamma() < 4.0 / (n as f64).sqrt(), "{}", dec.sup_abs_gamma());
    }

    #[test]
    fn product_functional_matches_ito_product_rule() {
        let d = 1;
        let mut y1 = vec![0; d];
        y1[0] = 1;
        let outer = PolynomialMap::new(1, d, vec![Monomial::new(1.0, 0, y1, vec![1])]).unwrap();
        let f = CylindricalFunctional::new("y m(x)", d, Arc::new(outer), vec![TestFunction::coordinate(d, 0)]).unwrap();
        let sc = ItoScenario {
            functional: f,
            x_spec: SemimartingaleSpec::new(1).with_initial(gaussian_start()).with_scalar_common_vol(1.0),
            y_spec: Some(SemimartingaleSpec::new(1).with_scalar_vol(1.0)),
            y0: vec![0.0],
            grid: make_grid(1.0, 512).unwrap(),
            particles: 300,
            assemble: AssembleOptions::default(),
        };
        let run = sc.run(&key(), 2).unwrap();
        let dec = &run.decomposition;
        let w = &run.battery[0].1;
        let wc = &run.battery[1].1;
        // F_k = W_k (x̄_0 + W°_k); read x̄_0 off the node where |W_k| is largest
        let kmax = (0..=512).max_by(|&a, &b| w.at(a).abs().total_cmp(&w.at(b).abs())).unwrap();
        let ens_mean0 = dec.f[kmax] / w.at(kmax) - wc.at(kmax);
        let mut iy = 0.0;
        let mut ic = 0.0;
        for k in 0..512 {
            iy += (ens_mean0 + wc.at(k)) * (w.at(k + 1) - w.at(k));
            ic += w.at(k) * (wc.at(k + 1) - wc.at(k));
            assert!((dec.i_y[k + 1] - iy).abs() < 1e-9);
            assert!((dec.i_common[k + 1] - ic).abs() < 1e-9);
        }
        // Γ is the discrete bracket Σ ΔW ΔW°, of order √Δ
        assert!(dec.sup_abs_gamma() < 0.2, "{}", dec.sup_abs_gamma());
    }

    #[test]
    fn oracle_examples() {
        let common = SemimartingaleSpec::new(1).with_initial(gaussian_start()).with_scalar_common_vol(1.0);
        let idio = SemimartingaleSpec::new(1).with_initial(gaussian_start()).with_scalar_vol(1.0);
        for (name, spec) in [("second_moment", &common), ("mean_squared", &common), ("second_moment", &idio)] {
            let run = scenario(name, spec.clone(), 256, 50).run(&key(), 3).unwrap();
            let oracle = run.oracle.unwrap();
            for k in 0..=256 {
                assert!((oracle.at(k) - k as f64 / 256.0).abs() < 1e-12, "{name} at {k}");
            }
        }
    }

    #[test]
    fn oracle_cross_term_matches_pairwise_integral() {
        // non-trivial σ° so that the m⊗m term is not a perfect square of constants
        let spec = SemimartingaleSpec::new(1)
            .with_initial(InitialLaw::Uniform { low: -1.0, high: 1.0, dim: 1 })
            .with_common_vol(|_t, x, out| out[0] = 1.0 + 0.5 * x[0].sin());
        let grid = make_grid(1.0, 4).unwrap();
        let (ens, steps) = simulate_ensemble_with(&spec, grid, 30, &key(), 0, EnsembleOptions::default()).unwrap();
        let f = builtin("mean_squared", &[], 1).unwrap();
        let oracle = c2_gamma_oracle(&f, &ens, &spec, &steps).unwrap();
        let mut expected = 0.0;
        for k in 0..4 {
            let law = ens.conditional_law(k);
            let t = grid.node(k);
            let pair = law
                .integrate_pair(|x, xp| {
                    let s = f.second_derivatives(t, &[0.0], &law, x, xp).unwrap();
                    s.d2_m[0] * (1.0 + 0.5 * x[0].sin()) * (1.0 + 0.5 * xp[0].sin())
                })
                .unwrap();
            expected += 0.5 * pair * grid.dt();
            assert!((oracle.at(k + 1) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_rejects_y_dependence() {
        let spec = SemimartingaleSpec::new(1).with_scalar_common_vol(1.0);
        let grid = make_grid(1.0, 4).unwrap();
        let (ens, steps) = simulate_ensemble_with(&spec, grid, 4, &key(), 0, EnsembleOptions::default()).unwrap();
        let f = builtin("ty_mix", &[], 1).unwrap();
        assert!(matches!(c2_gamma_oracle(&f, &ens, &spec, &steps), Err(Error::Unsupported(_))));
    }

    #[test]
    fn constant_functional_has_zero_decomposition() {
        let outer = PolynomialMap::new(1, 1, vec![Monomial::new(2.0, 0, vec![], vec![0])]).unwrap();
        let f = CylindricalFunctional::new("const", 1, Arc::new(outer), vec![TestFunction::coordinate(1, 0)]).unwrap();
        let mut sc = scenario("mean", SemimartingaleSpec::new(1).with_scalar_common_vol(1.0), 64, 8);
        sc.functional = f;
        let dec = sc.run(&key(), 0).unwrap().decomposition;
        assert!(dec.gamma.iter().chain(&dec.i_common).chain(&dec.i_y).all(|&v| v == 0.0));
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let spec = SemimartingaleSpec::new(1).with_scalar_common_vol(1.0);
        let g1 = make_grid(1.0, 8).unwrap();
        let g2 = make_grid(1.0, 16).unwrap();
        let (ens, steps) = simulate_ensemble_with(&spec, g1, 4, &key(), 0, EnsembleOptions::default()).unwrap();
        let z = SamplePath::zeros(g2, 1);
        let y = build_semimartingale(&SemimartingaleSpec::new(1), g2, &z, &z, &[0.0]).unwrap();
        let f = CylindricalFunctional::new("m", 1, Arc::new(identity_outer(1)), vec![TestFunction::coordinate(1, 0)]).unwrap();
        assert_eq!(assemble(&f, &y, &ens, &spec, &steps), Err(Error::GridMismatch));
    }
}
