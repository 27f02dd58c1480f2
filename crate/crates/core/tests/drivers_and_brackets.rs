use measureflow_core::paths::{build_semimartingale, make_grid, sample_brownian, InitialLaw, SemimartingaleSpec};
use measureflow_core::regularization::{convergence_report, CovariationPair, EpsLadder};
use measureflow_core::rng::{RngKey, Role, StreamLabel};

#[test]
fn single_increment_variance_matches_step() {
    let grid = make_grid(0.5, 1).unwrap();
    let key = RngKey::new(2024);
    let reps = 1_000_000u32;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for r in 0..reps {
        let w = sample_brownian(grid, 1, &key, StreamLabel::new(r, 0, Role::Idiosyncratic));
        let dw = w.at(1);
        sum += dw;
        sum_sq += dw * dw;
    }
    let n = reps as f64;
    let var = sum_sq / n - (sum / n).powi(2);
    assert!((var / 0.5 - 1.0).abs() < 0.01, "variance {var}");
}

#[test]
fn distinct_labels_are_uncorrelated() {
    let grid = make_grid(1.0, 1).unwrap();
    let key = RngKey::new(99);
    let reps = 1_000_000u32;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for r in 0..reps {
        let a = sample_brownian(grid, 1, &key, StreamLabel::new(r, 0, Role::Idiosyncratic)).at(1);
        let b = sample_brownian(grid, 1, &key, StreamLabel::new(r, 1, Role::Idiosyncratic)).at(1);
        sa += a;
        sb += b;
        saa += a * a;
        sbb += b * b;
        sab += a * b;
    }
    let n = reps as f64;
    let cov = sab / n - sa * sb / (n * n);
    let corr = cov / ((saa / n - (sa / n).powi(2)) * (sbb / n - (sb / n).powi(2))).sqrt();
    assert!(corr.abs() < 0.01, "correlation {corr}");
}

#[test]
fn common_and_idiosyncratic_roles_differ() {
    let grid = make_grid(1.0, 8).unwrap();
    let key = RngKey::new(5);
    let a = sample_brownian(grid, 1, &key, StreamLabel::new(0, 0, Role::Common));
    let b = sample_brownian(grid, 1, &key, StreamLabel::new(0, 0, Role::Idiosyncratic));
    assert_ne!(a.values(), b.values());
}

/// `[X]^ε` of a state-dependent semimartingale against the left-point Riemann
/// sum of `σ² + σ°²` along the same path.
#[test]
fn semimartingale_bracket_matches_integrated_variance() {
    let grid = make_grid(1.0, 1 << 12).unwrap();
    let ladder = EpsLadder::dyadic(grid, 4, 8).unwrap();
    let key = RngKey::new(17);
    let sig = |x: f64| 0.35 + 0.15 * x.sin();
    let sig0 = 0.3;
    let spec = SemimartingaleSpec::new(1)
        .with_drift(|_t, x, out| out[0] = -0.5 * x[0])
        .with_vol(move |_t, x, out| out[0] = sig(x[0]))
        .with_scalar_common_vol(sig0);
    let report = convergence_report(64, &ladder, |r| {
        let w = sample_brownian(grid, 1, &key, StreamLabel::new(r, 0, Role::Observed));
        let wc = sample_brownian(grid, 1, &key, StreamLabel::new(r, 0, Role::Common));
        let x0 = InitialLaw::Dirac(vec![0.2]).mean();
        let sm = build_semimartingale(&spec, grid, &w, &wc, &x0)?;
        let mut reference = vec![0.0; grid.len()];
        for k in 0..grid.steps() {
            reference[k + 1] = reference[k] + (sig(sm.x.at(k)).powi(2) + sig0 * sig0) * grid.dt();
        }
        Ok(vec![CovariationPair::with_reference("[X]", sm.x.clone(), sm.x, reference)])
    })
    .unwrap();
    let medians = report.medians(0);
    let last = *medians.last().unwrap();
    assert!(last <= 0.05, "median sup error at the smallest ε: {last}, ladder {medians:?}");
    assert!(medians.windows(2).all(|w| w[1] <= 1.1 * w[0]), "{medians:?}");
}
