//! Utility functions, prospect-theory utility pairs and probability
//! distortions, together with sampled checks of the standing assumptions
//! (monotone, bounded above, unbounded dissatisfaction of large losses).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum PreferenceError {
    #[error("unknown {kind} family `{family}`")]
    UnknownFamily { kind: &'static str, family: String },
    #[error("family `{family}`: unknown parameter `{param}`")]
    UnknownParam { family: String, param: String },
    #[error("family `{family}`: invalid parameter {param} = {value} ({reason})")]
    InvalidParam { family: String, param: &'static str, value: f64, reason: &'static str },
    #[error("{which} must vanish at 0, got {value}")]
    NonzeroOrigin { which: &'static str, value: f64 },
    #[error("preference spec of kind `{kind}` is missing `{field}`")]
    MissingField { kind: &'static str, field: &'static str },
}

/// JSON leaf `{"family": ..., "params": {...}}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub family: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl FamilySpec {
    pub fn new(family: &str, params: &[(&str, f64)]) -> Self {
        Self { family: family.to_string(), params: params.iter().map(|&(k, v)| (k.to_string(), v)).collect() }
    }
}

/// Preference file contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceSpec {
    pub kind: PreferenceKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utility: Option<FamilySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_plus: Option<FamilySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_minus: Option<FamilySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_plus: Option<FamilySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_minus: Option<FamilySpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreferenceKind {
    Eu,
    Cpt,
}

/// Parameterised utility families.
#[derive(Clone, Debug, PartialEq)]
pub enum UtilityFamily<T> {
    /// `1 - exp(-lambda x)`.
    CaraCapped { lambda: T },
    /// Concave capped exponential on gains, convex power on losses:
    /// `1 - exp(-lambda x)` for `x >= 0`, `-alpha (-x)^mu` for `x < 0`.
    SShapedCapped { lambda: T, alpha: T, mu: T },
    /// `1 - exp(-x)` on gains, `-ln(1 - x)` on losses.
    LogLoss,
    /// `1 - exp(-x)` on gains, `a (exp(x) - 1)` on losses; bounded below by `-a`.
    BoundedBelow { a: T },
    /// `min(x, cap)`.
    CappedLinear { cap: T },
    /// `scale * x`.
    Linear { scale: T },
    /// `sign(x) scale |x|^exponent`.
    Power { scale: T, exponent: T },
    /// `tanh(x)`; odd and bounded on both sides.
    Tanh,
    /// Prospect-theory composite: `u_plus(x)` on gains, `-u_minus(-x)` on losses.
    Composite { gains: Box<UtilityFunction<T>>, losses: Box<UtilityFunction<T>> },
}

/// A non-decreasing continuous utility with its family parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct UtilityFunction<T> {
    family: UtilityFamily<T>,
}

fn param(family: &str, params: &BTreeMap<String, f64>, allowed: &[(&'static str, f64)]) -> Result<Vec<f64>, PreferenceError> {
    if let Some(k) = params.keys().find(|k| !allowed.iter().any(|(a, _)| a == k)) {
        return Err(PreferenceError::UnknownParam { family: family.to_string(), param: k.clone() });
    }
    Ok(allowed.iter().map(|(k, default)| params.get(*k).copied().unwrap_or(*default)).collect())
}

fn positive(family: &str, name: &'static str, v: f64) -> Result<(), PreferenceError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(PreferenceError::InvalidParam { family: family.to_string(), param: name, value: v, reason: "must be positive" })
    }
}

/// Builds one of the built-in utility families from its name and parameters.
pub fn make_builtin_utility<T: Scalar>(family: &str, params: &BTreeMap<String, f64>) -> Result<UtilityFunction<T>, PreferenceError> {
    let fam = match family {
        "cara_capped" => {
            let p = param(family, params, &[("lambda", 1.0)])?;
            positive(family, "lambda", p[0])?;
            UtilityFamily::CaraCapped { lambda: T::lit(p[0]) }
        }
        "s_shaped_capped" => {
            let p = param(family, params, &[("lambda", 1.0), ("alpha", 2.0), ("mu", 0.5)])?;
            positive(family, "lambda", p[0])?;
            positive(family, "alpha", p[1])?;
            positive(family, "mu", p[2])?;
            if p[2] > 1.0 {
                return Err(PreferenceError::InvalidParam {
                    family: family.to_string(),
                    param: "mu",
                    value: p[2],
                    reason: "loss exponent must lie in (0, 1] for convexity on losses",
                });
            }
            UtilityFamily::SShapedCapped { lambda: T::lit(p[0]), alpha: T::lit(p[1]), mu: T::lit(p[2]) }
        }
        "log_loss" => {
            param(family, params, &[])?;
            UtilityFamily::LogLoss
        }
        "bounded_below" => {
            let p = param(family, params, &[("a", 0.5)])?;
            positive(family, "a", p[0])?;
            UtilityFamily::BoundedBelow { a: T::lit(p[0]) }
        }
        "capped_linear" => {
            let p = param(family, params, &[("cap", 1.0)])?;
            if !p[0].is_finite() {
                return Err(PreferenceError::InvalidParam { family: family.into(), param: "cap", value: p[0], reason: "must be finite" });
            }
            UtilityFamily::CappedLinear { cap: T::lit(p[0]) }
        }
        "linear" => {
            let p = param(family, params, &[("scale", 1.0)])?;
            positive(family, "scale", p[0])?;
            UtilityFamily::Linear { scale: T::lit(p[0]) }
        }
        "power" => {
            let p = param(family, params, &[("scale", 1.0), ("exponent", 1.0)])?;
            positive(family, "scale", p[0])?;
            positive(family, "exponent", p[1])?;
            UtilityFamily::Power { scale: T::lit(p[0]), exponent: T::lit(p[1]) }
        }
        "tanh" => {
            param(family, params, &[])?;
            UtilityFamily::Tanh
        }
        _ => return Err(PreferenceError::UnknownFamily { kind: "utility", family: family.to_string() }),
    };
    Ok(UtilityFunction { family: fam })
}

impl<T: Scalar> UtilityFunction<T> {
    pub fn from_spec(spec: &FamilySpec) -> Result<Self, PreferenceError> {
        make_builtin_utility(&spec.family, &spec.params)
    }

    pub fn cara(lambda: T) -> Self {
        Self { family: UtilityFamily::CaraCapped { lambda } }
    }

    pub fn family(&self) -> &UtilityFamily<T> {
        &self.family
    }

    pub fn name(&self) -> &'static str {
        match self.family {
            UtilityFamily::CaraCapped { .. } => "cara_capped",
            UtilityFamily::SShapedCapped { .. } => "s_shaped_capped",
            UtilityFamily::LogLoss => "log_loss",
            UtilityFamily::BoundedBelow { .. } => "bounded_below",
            UtilityFamily::CappedLinear { .. } => "capped_linear",
            UtilityFamily::Linear { .. } => "linear",
            UtilityFamily::Power { .. } => "power",
            UtilityFamily::Tanh => "tanh",
            UtilityFamily::Composite { .. } => "composite",
        }
    }

    pub fn eval(&self, x: T) -> T {
        let one = T::one();
        let zero = T::zero();
        match &self.family {
            UtilityFamily::CaraCapped { lambda } => one - (-*lambda * x).exp(),
            UtilityFamily::SShapedCapped { lambda, alpha, mu } => {
                if x >= zero {
                    one - (-*lambda * x).exp()
                } else {
                    -*alpha * (-x).powf(*mu)
                }
            }
            UtilityFamily::LogLoss => {
                if x >= zero {
                    one - (-x).exp()
                } else {
                    -(one - x).ln()
                }
            }
            UtilityFamily::BoundedBelow { a } => {
                if x >= zero {
                    one - (-x).exp()
                } else {
                    *a * x.exp_m1()
                }
            }
            UtilityFamily::CappedLinear { cap } => x.min(*cap),
            UtilityFamily::Linear { scale } => *scale * x,
            UtilityFamily::Power { scale, exponent } => {
                if x >= zero {
                    *scale * x.powf(*exponent)
                } else {
                    -*scale * (-x).powf(*exponent)
                }
            }
            UtilityFamily::Tanh => x.tanh(),
            UtilityFamily::Composite { gains, losses } => {
                if x >= zero {
                    gains.eval(x)
                } else {
                    -losses.eval(-x)
                }
            }
        }
    }

    /// Declared upper bound `C`, or `None` when the family is unbounded above.
    pub fn upper_bound(&self) -> Option<T> {
        match &self.family {
            UtilityFamily::CaraCapped { .. }
            | UtilityFamily::SShapedCapped { .. }
            | UtilityFamily::LogLoss
            | UtilityFamily::BoundedBelow { .. }
            | UtilityFamily::Tanh => Some(T::one()),
            UtilityFamily::CappedLinear { cap } => Some(*cap),
            UtilityFamily::Linear { .. } | UtilityFamily::Power { .. } => None,
            UtilityFamily::Composite { gains, .. } => gains.upper_bound().map(|c| c.max(T::zero())),
        }
    }

    /// Sampled certificate of `u(x) -> -inf` as `x -> -inf`:
    /// `u(-10^k) <= -k` for `k = 2..=6`. Heuristic, since the limit is not
    /// finitely checkable.
    pub fn diverges_at_minus_infinity(&self) -> bool {
        (2..=6).all(|k| self.eval(-T::lit(10f64.powi(k))) <= -T::lit(k as f64))
    }

    /// Sampled certificate of `u(x) -> +inf`: `u(10^k) >= k` for `k = 2..=6`.
    pub fn diverges_at_plus_infinity(&self) -> bool {
        (2..=6).all(|k| self.eval(T::lit(10f64.powi(k))) >= T::lit(k as f64))
    }

    /// Value of the divergence flag recorded for this utility.
    pub fn limma(&self) -> bool {
        self.diverges_at_minus_infinity()
    }

    /// Grid check of monotonicity and of the declared upper bound; returns the
    /// violations found.
    pub fn check_on_grid(&self, lo: T, hi: T, points: usize) -> Vec<String> {
        let mut issues = Vec::new();
        let step = (hi - lo) / T::lit((points - 1) as f64);
        let tol = T::lit(1e-12);
        let c = self.upper_bound();
        let mut prev: Option<(T, T)> = None;
        for i in 0..points {
            let x = lo + step * T::lit(i as f64);
            let u = self.eval(x);
            if u.is_nan() {
                issues.push(format!("u({x}) is NaN"));
                continue;
            }
            if let Some((px, pu)) = prev {
                if pu > u + tol {
                    issues.push(format!("decreasing between {px} and {x}"));
                }
            }
            if let Some(c) = c {
                if u > c + tol {
                    issues.push(format!("u({x}) = {u} exceeds bound {c}"));
                }
            }
            prev = Some((x, u));
        }
        issues
    }
}

/// Probability distortion families.
#[derive(Clone, Debug, PartialEq)]
pub enum DistortionFamily<T> {
    Identity,
    /// `p^gamma`.
    Power { gamma: T },
    /// Inverse-S weighting `p^g / (p^g + (1-p)^g)^(1/g)`.
    KtInverseS { gamma: T },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistortionFunction<T> {
    family: DistortionFamily<T>,
}

/// Smallest exponent for which the inverse-S family stays monotone.
const KT_MIN_GAMMA: f64 = 0.28;

pub fn make_builtin_distortion<T: Scalar>(family: &str, params: &BTreeMap<String, f64>) -> Result<DistortionFunction<T>, PreferenceError> {
    let fam = match family {
        "identity" => {
            param(family, params, &[])?;
            DistortionFamily::Identity
        }
        "power" => {
            let p = param(family, params, &[("gamma", 1.0)])?;
            positive(family, "gamma", p[0])?;
            DistortionFamily::Power { gamma: T::lit(p[0]) }
        }
        "kt_inverse_s" => {
            let p = param(family, params, &[("gamma", 0.65)])?;
            if !(KT_MIN_GAMMA..=1.0).contains(&p[0]) {
                return Err(PreferenceError::InvalidParam {
                    family: family.into(),
                    param: "gamma",
                    value: p[0],
                    reason: "must lie in [0.28, 1] for monotonicity",
                });
            }
            DistortionFamily::KtInverseS { gamma: T::lit(p[0]) }
        }
        _ => return Err(PreferenceError::UnknownFamily { kind: "distortion", family: family.to_string() }),
    };
    Ok(DistortionFunction { family: fam })
}

impl<T: Scalar> DistortionFunction<T> {
    pub fn from_spec(spec: &FamilySpec) -> Result<Self, PreferenceError> {
        make_builtin_distortion(&spec.family, &spec.params)
    }

    pub fn identity() -> Self {
        Self { family: DistortionFamily::Identity }
    }

    pub fn power(gamma: T) -> Self {
        Self { family: DistortionFamily::Power { gamma } }
    }

    pub fn family(&self) -> &DistortionFamily<T> {
        &self.family
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.family, DistortionFamily::Identity)
    }

    pub fn eval(&self, p: T) -> T {
        let p = p.max(T::zero()).min(T::one());
        match &self.family {
            DistortionFamily::Identity => p,
            DistortionFamily::Power { gamma } => p.powf(*gamma),
            DistortionFamily::KtInverseS { gamma } => {
                if p == T::zero() || p == T::one() {
                    return p;
                }
                let a = p.powf(*gamma);
                a / (a + (T::one() - p).powf(*gamma)).powf(T::one() / *gamma)
            }
        }
    }

    /// Checks `w(0) = 0`, `w(1) = 1`, monotonicity and a continuity modulus
    /// on a uniform grid.
    pub fn check_on_grid(&self, points: usize) -> Vec<String> {
        let mut issues = Vec::new();
        let tol = T::lit(1e-12);
        if self.eval(T::zero()).abs() > tol {
            issues.push("w(0) != 0".to_string());
        }
        if (self.eval(T::one()) - T::one()).abs() > tol {
            issues.push("w(1) != 1".to_string());
        }
        let n = T::lit((points - 1) as f64);
        let mut prev = T::zero();
        for i in 1..points {
            let w = self.eval(T::lit(i as f64) / n);
            if w + tol < prev {
                issues.push(format!("decreasing at grid point {i}"));
            }
            if w - prev > T::lit(0.1) {
                issues.push(format!("jump of {} at grid point {i}", w - prev));
            }
            prev = w;
        }
        issues
    }
}

/// Number of bisection steps used by [`inverse_distortion`].
pub const INVERSE_BISECTION_STEPS: usize = 60;

/// Right-continuous inverse `max{p in [0,1] : w(p) <= q}`, by bisection.
pub fn inverse_distortion<T: Scalar>(w: &DistortionFunction<T>, q: T) -> T {
    if w.eval(T::one()) <= q {
        return T::one();
    }
    let (mut lo, mut hi) = (T::zero(), T::one());
    let half = T::lit(0.5);
    for _ in 0..INVERSE_BISECTION_STEPS {
        let mid = (lo + hi) * half;
        if w.eval(mid) <= q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Prospect-theory preferences: gain and loss utilities on the half line,
/// each with its own probability distortion.
#[derive(Clone, Debug, PartialEq)]
pub struct CptPreference<T> {
    pub u_plus: UtilityFunction<T>,
    pub u_minus: UtilityFunction<T>,
    pub w_plus: DistortionFunction<T>,
    pub w_minus: DistortionFunction<T>,
}

impl<T: Scalar> CptPreference<T> {
    /// Requires `u_plus(0) = u_minus(0) = 0`; the asymptotic hypotheses are
    /// reported separately by [`CptPreference::hypothesis_issues`].
    pub fn new(
        u_plus: UtilityFunction<T>,
        u_minus: UtilityFunction<T>,
        w_plus: DistortionFunction<T>,
        w_minus: DistortionFunction<T>,
    ) -> Result<Self, PreferenceError> {
        let tol = T::lit(1e-12);
        let up = u_plus.eval(T::zero());
        if up.abs() > tol {
            return Err(PreferenceError::NonzeroOrigin { which: "u_plus", value: up.to_f64_lossy() });
        }
        let um = u_minus.eval(T::zero());
        if um.abs() > tol {
            return Err(PreferenceError::NonzeroOrigin { which: "u_minus", value: um.to_f64_lossy() });
        }
        Ok(Self { u_plus, u_minus, w_plus, w_minus })
    }

    /// Upper bound of the gain utility, if any.
    pub fn gain_bound(&self) -> Option<T> {
        self.u_plus.upper_bound()
    }

    /// `u_plus` bounded above and `u_minus` diverging (sampled).
    pub fn hypothesis_issues(&self) -> Vec<String> {
        let mut issues = Vec::new();
        if self.u_plus.upper_bound().is_none() {
            issues.push(format!("u_plus ({}) is not bounded above", self.u_plus.name()));
        }
        if !self.u_minus.diverges_at_plus_infinity() {
            issues.push(format!("u_minus ({}) does not diverge at infinity", self.u_minus.name()));
        }
        issues
    }

    /// `u(x) = u_plus(x)` for `x >= 0`, `-u_minus(-x)` for `x < 0`.
    pub fn composite_utility(&self) -> UtilityFunction<T> {
        UtilityFunction {
            family: UtilityFamily::Composite { gains: Box::new(self.u_plus.clone()), losses: Box::new(self.u_minus.clone()) },
        }
    }

    pub fn has_identity_distortions(&self) -> bool {
        self.w_plus.is_identity() && self.w_minus.is_identity()
    }
}

/// Either plain expected utility or prospect-theory preferences.
#[derive(Clone, Debug, PartialEq)]
pub enum Preference<T> {
    Eu(UtilityFunction<T>),
    Cpt(CptPreference<T>),
}

impl<T: Scalar> Preference<T> {
    pub fn from_spec(spec: &PreferenceSpec) -> Result<Self, PreferenceError> {
        match spec.kind {
            PreferenceKind::Eu => {
                let u = spec.utility.as_ref().ok_or(PreferenceError::MissingField { kind: "eu", field: "utility" })?;
                Ok(Preference::Eu(UtilityFunction::from_spec(u)?))
            }
            PreferenceKind::Cpt => {
                let get = |f: &Option<FamilySpec>, field| f.clone().ok_or(PreferenceError::MissingField { kind: "cpt", field });
                let identity = FamilySpec::new("identity", &[]);
                Ok(Preference::Cpt(CptPreference::new(
                    UtilityFunction::from_spec(&get(&spec.u_plus, "u_plus")?)?,
                    UtilityFunction::from_spec(&get(&spec.u_minus, "u_minus")?)?,
                    DistortionFunction::from_spec(spec.w_plus.as_ref().unwrap_or(&identity))?,
                    DistortionFunction::from_spec(spec.w_minus.as_ref().unwrap_or(&identity))?,
                )?))
            }
        }
    }
}

impl<T: Scalar> fmt::Display for UtilityFunction<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
