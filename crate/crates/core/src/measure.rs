//! Equal-weight atom clouds in `P_2(R^d)`.

use std::io::{self, Write};

use crate::error::{Error, Result};

/// Default atom cap for exact assignment in dimension `d > 1`.
pub const DEFAULT_ASSIGNMENT_CAP: usize = 64;

/// `(1/N) Σ δ_{x_i}`, atoms stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    atoms: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, atoms: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim", "must be at least 1"));
        }
        if atoms.is_empty() || atoms.len() % dim != 0 {
            return Err(Error::invalid(
                "atoms",
                format!("need a positive multiple of dim = {dim} coordinates, got {}", atoms.len()),
            ));
        }
        if let Some(i) = atoms.iter().position(|a| !a.is_finite()) {
            return Err(Error::NonFinite {
                context: "atom",
                t: f64::NAN,
                x: atoms[(i / dim) * dim..(i / dim + 1) * dim].to_vec(),
            });
        }
        Ok(Self { dim, atoms })
    }

    /// One-dimensional cloud from scalar atoms.
    pub fn from_scalars(atoms: &[f64]) -> Result<Self> {
        Self::new(1, atoms.to_vec())
    }

    pub fn dirac(point: &[f64]) -> Result<Self> {
        Self::new(point.len(), point.to_vec())
    }

    pub(crate) fn from_trusted(dim: usize, atoms: Vec<f64>) -> Self {
        debug_assert!(dim > 0 && !atoms.is_empty() && atoms.len() % dim == 0);
        Self { dim, atoms }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.atoms.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.dim..(i + 1) * self.dim]
    }

    pub fn atoms(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.atoms.chunks_exact(self.dim)
    }

    pub fn raw(&self) -> &[f64] {
        &self.atoms
    }

    /// The cloud translated by `v`.
    pub fn shifted(&self, v: &[f64]) -> Self {
        assert_eq!(v.len(), self.dim);
        let atoms = self
            .atoms
            .chunks_exact(self.dim)
            .flat_map(|a| a.iter().zip(v).map(|(x, s)| x + s).collect::<Vec<_>>())
            .collect();
        Self { dim: self.dim, atoms }
    }

    /// `μ(φ) = (1/N) Σ φ(x_i)`.
    pub fn integrate(&self, phi: impl Fn(&[f64]) -> f64) -> Result<f64> {
        let mut acc = 0.0;
        for x in self.atoms() {
            let v = phi(x);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "integrand",
                    t: f64::NAN,
                    x: x.to_vec(),
                });
            }
            acc += v;
        }
        Ok(acc / self.len() as f64)
    }

    /// Vector-valued `μ(φ)` for `φ: R^d -> R^p` writing into its second argument.
    pub fn integrate_vec(&self, p: usize, phi: impl Fn(&[f64], &mut [f64])) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; p];
        let mut buf = vec![0.0; p];
        for x in self.atoms() {
            phi(x, &mut buf);
            for (a, &b) in acc.iter_mut().zip(&buf) {
                if !b.is_finite() {
                    return Err(Error::NonFinite {
                        context: "integrand",
                        t: f64::NAN,
                        x: x.to_vec(),
                    });
                }
                *a += b;
            }
        }
        let n = self.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }

    /// `μ⊗μ(ψ) = (1/N²) Σ_i Σ_j ψ(x_i, x_j)`, diagonal included.
    pub fn integrate_pair(&self, psi: impl Fn(&[f64], &[f64]) -> f64) -> Result<f64> {
        let mut acc = 0.0;
        for x in self.atoms() {
            for y in self.atoms() {
                let v = psi(x, y);
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        context: "pair integrand",
                        t: f64::NAN,
                        x: x.iter().chain(y).copied().collect(),
                    });
                }
                acc += v;
            }
        }
        let n = self.len() as f64;
        Ok(acc / (n * n))
    }

    /// Atom list as CSV `x_1,...,x_d`, one row per atom.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let header: Vec<String> = (1..=self.dim).map(|j| format!("x_{j}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for a in self.atoms() {
            let row: Vec<String> = a.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `W_2` with the default assignment cap.
pub fn wasserstein2(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    wasserstein2_with_cap(mu, nu, DEFAULT_ASSIGNMENT_CAP)
}

/// `W_2` between equal-size clouds: sorted-quantile pairing in `d = 1`,
/// exact optimal assignment for `d > 1` and `N ≤ cap`.
pub fn wasserstein2_with_cap(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, cap: usize) -> Result<f64> {
    check_pair(mu, nu)?;
    if mu.dim == 1 {
        let mut a = mu.atoms.clone();
        let mut b = nu.atoms.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let cost: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        return Ok((cost / a.len() as f64).sqrt());
    }
    if mu.len() > cap {
        return Err(Error::AssignmentCapExceeded {
            atoms: mu.len(),
            dim: mu.dim,
            cap,
        });
    }
    wasserstein2_assignment(mu, nu)
}

/// `W_2` through the optimal assignment problem, in any dimension and without a cap.
pub fn wasserstein2_assignment(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    check_pair(mu, nu)?;
    let n = mu.len();
    let cost: Vec<f64> = mu
        .atoms()
        .flat_map(|a| nu.atoms().map(move |b| sq_dist(a, b)))
        .collect();
    let (total, _) = min_cost_assignment(&cost, n);
    Ok((total.max(0.0) / n as f64).sqrt())
}

fn check_pair(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<()> {
    if mu.len() != nu.len() {
        return Err(Error::AtomCountMismatch {
            left: mu.len(),
            right: nu.len(),
        });
    }
    if mu.dim != nu.dim {
        return Err(Error::DimensionMismatch {
            expected: mu.dim,
            got: nu.dim,
            context: "wasserstein2",
        });
    }
    Ok(())
}

/// Hungarian method with potentials on a dense row-major `n x n` cost matrix.
/// Returns the minimal total cost and `row -> column` assignment.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> (f64, Vec<usize>) {
    assert_eq!(cost.len(), n * n);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    let total = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    (total, assignment)
}

/// `(W_2(m_{t_k}, m_{t_{k+1}}))_k` along a flow of equal-size clouds.
pub fn flow_continuity_profile(flow: &[EmpiricalMeasure]) -> Result<Vec<f64>> {
    flow.windows(2).map(|w| wasserstein2(&w[0], &w[1])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(atoms: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::from_scalars(atoms).unwrap()
    }

    #[test]
    fn pairings() {
        let mu = m(&[0.0, 2.0]);
        assert_eq!(mu.integrate(|x| x[0]).unwrap(), 1.0);
        assert_eq!(mu.integrate(|x| x[0] * x[0]).unwrap(), 2.0);
        let c = EmpiricalMeasure::dirac(&[1.5, -2.0]).unwrap();
        assert_eq!(c.integrate(|x| x[0] * x[1]).unwrap(), -3.0);
        assert_eq!(mu.integrate_pair(|x, y| x[0] * y[0]).unwrap(), 1.0);
        assert_eq!(mu.integrate_pair(|_, _| 1.0).unwrap(), 1.0);
        assert_eq!(c.integrate_pair(|x, y| x[0] - 2.0 * y[1]).unwrap(), 5.5);
        assert_eq!(mu.integrate_vec(2, |x, o| { o[0] = x[0]; o[1] = 1.0 }).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn non_finite_integrand_aborts() {
        let mu = m(&[0.0, 1.0]);
        assert!(mu.integrate(|x| 1.0 / x[0]).is_err());
        assert!(EmpiricalMeasure::from_scalars(&[f64::NAN]).is_err());
        assert!(EmpiricalMeasure::from_scalars(&[]).is_err());
    }

    #[test]
    fn w2_examples() {
        assert_eq!(wasserstein2(&m(&[0.0]), &m(&[1.0])).unwrap(), 1.0);
        assert_eq!(wasserstein2(&m(&[0.0, 1.0]), &m(&[1.0, 2.0])).unwrap(), 1.0);
        assert!((wasserstein2(&m(&[0.0, 1.0]), &m(&[0.0, 3.0])).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(matches!(
            wasserstein2(&m(&[0.0]), &m(&[0.0, 1.0])),
            Err(Error::AtomCountMismatch { .. })
        ));
    }

    /// Exhaustive search over all couplings by permutation, the independent
    /// oracle for both W2 routes.
    fn brute_force_w2(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
        fn permute(k: usize, perm: &mut Vec<usize>, best: &mut f64, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) {
            let n = perm.len();
            if k == n {
                let c: f64 = (0..n).map(|i| sq_dist(mu.atom(i), nu.atom(perm[i]))).sum();
                *best = best.min(c);
                return;
            }
            for i in k..n {
                perm.swap(k, i);
                permute(k + 1, perm, best, mu, nu);
                perm.swap(k, i);
            }
        }
        let mut perm: Vec<usize> = (0..mu.len()).collect();
        let mut best = f64::INFINITY;
        permute(0, &mut perm, &mut best, mu, nu);
        (best / mu.len() as f64).sqrt()
    }

    #[test]
    fn w2_d2_cap() {
        let big = EmpiricalMeasure::new(2, vec![0.0; 2 * 65]).unwrap();
        assert!(matches!(
            wasserstein2(&big, &big),
            Err(Error::AssignmentCapExceeded { atoms: 65, .. })
        ));
        let ok = EmpiricalMeasure::new(2, vec![0.0; 2 * 64]).unwrap();
        assert_eq!(wasserstein2(&ok, &ok).unwrap(), 0.0);
    }

    #[test]
    fn flow_profiles() {
        let flow = vec![m(&[0.0, 1.0]); 4];
        assert_eq!(flow_continuity_profile(&flow).unwrap(), vec![0.0; 3]);
        let path = [0.0, 0.3, -0.2, 0.9];
        let flow: Vec<_> = path.iter().map(|&p| m(&[p])).collect();
        let prof = flow_continuity_profile(&flow).unwrap();
        for (k, w) in prof.iter().enumerate() {
            assert!((w - (path[k + 1] - path[k]).abs()).abs() < 1e-15);
        }
    }

    fn cloud(dim: usize, n: usize) -> impl Strategy<Value = EmpiricalMeasure> {
        prop::collection::vec(-5.0f64..5.0, dim * n).prop_map(move |a| EmpiricalMeasure::new(dim, a).unwrap())
    }

    proptest! {
        #[test]
        fn w2_matches_exhaustive_search((mu, nu) in (1usize..4, 1usize..6).prop_flat_map(|(d, n)| (cloud(d, n), cloud(d, n)))) {
            let brute = brute_force_w2(&mu, &nu);
            prop_assert!((wasserstein2_assignment(&mu, &nu).unwrap() - brute).abs() < 1e-10);
            prop_assert!((wasserstein2(&mu, &nu).unwrap() - brute).abs() < 1e-10);
        }

        #[test]
        fn w2_sorting_agrees_with_assignment(n in 1usize..64, pair in (cloud(1, 64), cloud(1, 64))) {
            let mu = EmpiricalMeasure::from_scalars(&pair.0.raw()[..n]).unwrap();
            let nu = EmpiricalMeasure::from_scalars(&pair.1.raw()[..n]).unwrap();
            let a = wasserstein2(&mu, &nu).unwrap();
            let b = wasserstein2_assignment(&mu, &nu).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn w2_metric_axioms((a, b, c) in (cloud(2, 7), cloud(2, 7), cloud(2, 7))) {
            let ab = wasserstein2(&a, &b).unwrap();
            let ba = wasserstein2(&b, &a).unwrap();
            let bc = wasserstein2(&b, &c).unwrap();
            let ac = wasserstein2(&a, &c).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ac <= ab + bc + 1e-10);
            prop_assert_eq!(wasserstein2(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn w2_zero_iff_sorted_atoms_coincide(a in prop::collection::vec(-3.0f64..3.0, 1..20), swap in any::<prop::sample::Index>()) {
            let mu = EmpiricalMeasure::from_scalars(&a).unwrap();
            let mut b = a.clone();
            let i = swap.index(b.len());
            b.swap(0, i);
            prop_assert_eq!(wasserstein2(&mu, &EmpiricalMeasure::from_scalars(&b).unwrap()).unwrap(), 0.0);
            b[i] += 0.5;
            prop_assert!(wasserstein2(&mu, &EmpiricalMeasure::from_scalars(&b).unwrap()).unwrap() > 0.0);
        }

        #[test]
        fn w2_of_translation_is_norm((mu, v) in (cloud(1, 30), prop::collection::vec(-4.0f64..4.0, 1))) {
            let w = wasserstein2(&mu, &mu.shifted(&v)).unwrap();
            prop_assert!((w - v[0].abs()).abs() < 1e-12);
        }

        #[test]
        fn w2_of_translation_is_norm_2d((mu, v) in (cloud(2, 12), prop::collection::vec(-4.0f64..4.0, 2))) {
            let w = wasserstein2(&mu, &mu.shifted(&v)).unwrap();
            let norm = (v[0] * v[0] + v[1] * v[1]).sqrt();
            prop_assert!((w - norm).abs() < 1e-10);
        }
    }
}
