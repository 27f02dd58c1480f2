//! Named coefficient registry and scenario presets.
//!
//! | name       | params        | value                 | bound         |
//! |------------|---------------|-----------------------|---------------|
//! | `zero`     | none          | `0`                   | `0`           |
//! | `constant` | `c`           | `c`                   | `|c|`         |
//! | `tanh`     | `a, b`        | `a tanh(b x)`         | `|a|`         |
//! | `sin`      | `a, b, c`     | `a + b sin(c x)`      | `|a| + |b|`   |
//! | `linear`   | `a, b`        | `a + b x`             | unbounded     |
//!
//! `linear` exists so configurations can name it, and is always rejected:
//! the Itô and control machinery needs bounded coefficients. Parameters must
//! be finite with absolute value at most [`PARAM_LIMIT`].

use std::sync::Arc;

use measureflow_core::functional::{builtin, CylindricalFunctional};
use measureflow_core::paths::{InitialLaw, SemimartingaleSpec};

use crate::config::{Coefficients, InitialConfig, Selection};
use crate::CliError;

pub const PARAM_LIMIT: f64 = 1e3;
pub const COEFFICIENT_NAMES: &[&str] = &["zero", "constant", "tanh", "sin", "linear"];
pub const PRESETS: &[&str] = &["commonnoise", "idiosyncratic", "mixed", "custom"];

/// A scalar coefficient `x ↦ value` with its sup bound.
#[derive(Clone)]
pub struct Coefficient {
    pub name: String,
    pub bound: f64,
    pub eval: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl std::fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Coefficient").field("name", &self.name).field("bound", &self.bound).finish()
    }
}

fn check_params(sel: &Selection, arity: usize) -> Result<(), CliError> {
    if sel.params.len() != arity {
        return Err(CliError::Config(format!(
            "coefficient `{}` takes {arity} parameter(s), got {}",
            sel.name,
            sel.params.len()
        )));
    }
    if let Some(p) = sel.params.iter().find(|p| !(p.is_finite() && p.abs() <= PARAM_LIMIT)) {
        return Err(CliError::Config(format!(
            "coefficient `{}` parameter {p} is outside [-{PARAM_LIMIT}, {PARAM_LIMIT}]",
            sel.name
        )));
    }
    Ok(())
}

pub fn coefficient(sel: &Selection) -> Result<Coefficient, CliError> {
    let p = &sel.params;
    let (bound, eval): (f64, Arc<dyn Fn(f64) -> f64 + Send + Sync>) = match sel.name.as_str() {
        "zero" => {
            check_params(sel, 0)?;
            (0.0, Arc::new(|_| 0.0))
        }
        "constant" => {
            check_params(sel, 1)?;
            let c = p[0];
            (c.abs(), Arc::new(move |_| c))
        }
        "tanh" => {
            check_params(sel, 2)?;
            let (a, b) = (p[0], p[1]);
            (a.abs(), Arc::new(move |x: f64| a * (b * x).tanh()))
        }
        "sin" => {
            check_params(sel, 3)?;
            let (a, b, c) = (p[0], p[1], p[2]);
            (a.abs() + b.abs(), Arc::new(move |x: f64| a + b * (c * x).sin()))
        }
        "linear" => {
            check_params(sel, 2)?;
            return Err(CliError::Config("coefficient `linear` is unbounded and not admissible".into()));
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown coefficient `{other}`; known: {}",
                COEFFICIENT_NAMES.join(", ")
            )))
        }
    };
    Ok(Coefficient {
        name: sel.name.clone(),
        bound,
        eval,
    })
}

pub fn initial_law(cfg: &InitialConfig) -> Result<InitialLaw, CliError> {
    let finite = |v: f64| v.is_finite() && v.abs() <= PARAM_LIMIT;
    match *cfg {
        InitialConfig::Dirac { point } if finite(point) => Ok(InitialLaw::Dirac(vec![point])),
        InitialConfig::Gaussian { mean, std } if finite(mean) && finite(std) && std >= 0.0 => Ok(InitialLaw::Gaussian { mean: vec![mean], std }),
        InitialConfig::Uniform { low, high } if finite(low) && finite(high) && low <= high => Ok(InitialLaw::Uniform { low, high, dim: 1 }),
        ref other => Err(CliError::Config(format!("invalid initial law {other:?}"))),
    }
}

/// Default initial law of the presets: `N(0.5, 0.3²)`.
pub fn default_initial() -> InitialLaw {
    InitialLaw::Gaussian { mean: vec![0.5], std: 0.3 }
}

/// Scalar semimartingale from registry coefficients.
pub fn semimartingale(coefs: &Coefficients) -> Result<SemimartingaleSpec, CliError> {
    let get = |s: &Option<Selection>| s.as_ref().map(coefficient).transpose();
    let (drift, vol, common) = (get(&coefs.drift)?, get(&coefs.vol)?, get(&coefs.common_vol)?);
    let initial = coefs.initial.as_ref().map(initial_law).transpose()?.unwrap_or_else(default_initial);
    let mut spec = SemimartingaleSpec::new(1).with_initial(initial);
    let mut bound: f64 = 0.0;
    if let Some(c) = drift {
        bound = bound.max(c.bound);
        spec = spec.with_drift(move |_t, x, out| out[0] = (c.eval)(x[0]));
    }
    if let Some(c) = vol {
        bound = bound.max(c.bound);
        spec = spec.with_vol(move |_t, x, out| out[0] = (c.eval)(x[0]));
    }
    if let Some(c) = common {
        bound = bound.max(c.bound);
        spec = spec.with_common_vol(move |_t, x, out| out[0] = (c.eval)(x[0]));
    }
    Ok(spec.with_bound(bound))
}

/// Coefficients of a named preset, or the configured ones for `custom`.
pub fn preset(name: &str, custom: Option<&Coefficients>) -> Result<Coefficients, CliError> {
    let unit = || Some(Selection::new("constant", &[1.0]));
    let initial = custom.and_then(|c| c.initial.clone());
    let base = Coefficients {
        drift: None,
        vol: None,
        common_vol: None,
        initial,
    };
    match name {
        "commonnoise" => Ok(Coefficients { common_vol: unit(), ..base }),
        "idiosyncratic" => Ok(Coefficients { vol: unit(), ..base }),
        "mixed" => Ok(Coefficients {
            vol: unit(),
            common_vol: unit(),
            ..base
        }),
        "custom" => custom
            .cloned()
            .ok_or_else(|| CliError::Config("preset `custom` needs a [coefficients] section".into())),
        other => Err(CliError::Config(format!("unknown preset `{other}`; known: {}", PRESETS.join(", ")))),
    }
}

/// `"<functional>/<preset>"`, with parameters from the `[functional]` section
/// when it names the same functional.
pub fn split_scenario<'a>(scenario: &'a str, functional: Option<&Selection>) -> Result<(Selection, &'a str), CliError> {
    let (f, p) = scenario
        .split_once('/')
        .ok_or_else(|| CliError::Config(format!("scenario `{scenario}` must look like <functional>/<preset>")))?;
    let sel = match functional {
        Some(s) if s.name == f => s.clone(),
        Some(s) => {
            return Err(CliError::Config(format!(
                "[functional] names `{}` but the scenario uses `{f}`",
                s.name
            )))
        }
        None => Selection::new(f, &[]),
    };
    Ok((sel, p))
}

pub fn functional(sel: &Selection) -> Result<CylindricalFunctional, CliError> {
    builtin(&sel.name, &sel.params, 1).map_err(CliError::from)
}
