//! Validated intermediate representation of a structural equation model.
//!
//! The IR stores the measurement structure (loadings), the structural
//! structure (regressions among latents), covariance declarations among
//! error terms / exogenous latents, intercept parameters, and the scaling
//! indicator chosen for every latent. Fixed and free parameters are carried
//! as [`ParamValue`]; free parameters are addressed by canonical labels such
//! as `eta1=~y2`, `eta2~eta1`, `y2~~y3` and `y1~~y1`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A model parameter: either fixed to a numeric value or free under a
/// canonical label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ParamValue {
    Fixed(f64),
    Free(String),
}

impl ParamValue {
    pub fn is_fixed_to(&self, v: f64) -> bool {
        matches!(self, ParamValue::Fixed(x) if *x == v)
    }

    pub fn label(&self) -> Option<&str> {
        match self {
            ParamValue::Free(s) => Some(s),
            ParamValue::Fixed(_) => None,
        }
    }
}

/// `latent =~ indicator` edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Loading {
    pub latent: String,
    pub indicator: String,
    pub param: ParamValue,
}

/// `outcome ~ predictor` edge. Outcomes are always latent; predictors may be
/// latent or observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub outcome: String,
    pub predictor: String,
    pub param: ParamValue,
}

/// `a ~~ b` edge between the error terms of `a` and `b` (a variance when
/// `a == b`). Exogenous latents' "errors" are the latents themselves, so a
/// covariance between exogenous latents is a factor covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariance {
    pub a: String,
    pub b: String,
    pub param: ParamValue,
}

/// Intercept parameter of one variable. Scaling indicators are fixed to zero;
/// everything else is free. Intercepts ride along for completeness; all
/// analyses here are covariance-structure analyses and estimate constants
/// per equation instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intercept {
    pub variable: String,
    pub param: ParamValue,
}

/// Classification of a free parameter, used when drawing generic values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Coefficient,
    Variance,
    Covariance,
}

/// Parsed and validated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelIR {
    pub latents: Vec<String>,
    pub observed: Vec<String>,
    pub loadings: Vec<Loading>,
    pub regressions: Vec<Regression>,
    pub covariances: Vec<Covariance>,
    pub intercepts: Vec<Intercept>,
    /// latent -> its scaling indicator (loading fixed to 1, intercept 0).
    pub scaling: BTreeMap<String, String>,
}

/// Canonical label for the covariance/variance parameter of the pair (a, b).
pub fn covariance_label(a: &str, b: &str) -> String {
    if a <= b {
        format!("{a}~~{b}")
    } else {
        format!("{b}~~{a}")
    }
}

impl ModelIR {
    pub fn is_latent(&self, name: &str) -> bool {
        self.latents.iter().any(|l| l == name)
    }

    pub fn is_observed(&self, name: &str) -> bool {
        self.observed.iter().any(|o| o == name)
    }

    pub fn is_declared(&self, name: &str) -> bool {
        self.is_latent(name) || self.is_observed(name)
    }

    pub fn indicators_of(&self, latent: &str) -> Vec<&Loading> {
        self.loadings.iter().filter(|l| l.latent == latent).collect()
    }

    pub fn loadings_of_indicator(&self, indicator: &str) -> Vec<&Loading> {
        self.loadings.iter().filter(|l| l.indicator == indicator).collect()
    }

    pub fn regressions_of(&self, outcome: &str) -> Vec<&Regression> {
        self.regressions.iter().filter(|r| r.outcome == outcome).collect()
    }

    pub fn scaling_indicator(&self, latent: &str) -> Option<&str> {
        self.scaling.get(latent).map(|s| s.as_str())
    }

    /// Explicit covariance declaration for the unordered pair, if any.
    pub fn covariance_between(&self, a: &str, b: &str) -> Option<&Covariance> {
        self.covariances.iter().find(|c| {
            (c.a == a && c.b == b) || (c.a == b && c.b == a)
        })
    }

    /// Variance parameter of a variable's error term: the explicit `v ~~ v`
    /// declaration if present, otherwise an implicit free parameter.
    pub fn variance_param(&self, variable: &str) -> ParamValue {
        match self.covariance_between(variable, variable) {
            Some(c) => c.param.clone(),
            None => ParamValue::Free(covariance_label(variable, variable)),
        }
    }

    /// All free covariance-structure parameters (loadings, regressions,
    /// covariances, variances; intercepts excluded) with their kinds,
    /// keyed by canonical label.
    pub fn free_parameters(&self) -> BTreeMap<String, ParamKind> {
        let mut out = BTreeMap::new();
        for l in &self.loadings {
            if let Some(name) = l.param.label() {
                out.insert(name.to_string(), ParamKind::Coefficient);
            }
        }
        for r in &self.regressions {
            if let Some(name) = r.param.label() {
                out.insert(name.to_string(), ParamKind::Coefficient);
            }
        }
        for c in &self.covariances {
            if let Some(name) = c.param.label() {
                let kind = if c.a == c.b { ParamKind::Variance } else { ParamKind::Covariance };
                out.insert(name.to_string(), kind);
            }
        }
        for v in self.latents.iter().chain(self.observed.iter()) {
            if let Some(name) = self.variance_param(v).label() {
                out.insert(name.to_string(), ParamKind::Variance);
            }
        }
        out
    }

    /// Structural validity checks shared by the parser and programmatic
    /// construction (e.g. deserialized IRs).
    pub fn validate(&self) -> Result<()> {
        for l in &self.latents {
            let inds = self.indicators_of(l);
            if inds.is_empty() {
                return Err(Error::NoIndicators { latent: l.clone() });
            }
            let scaling = self.scaling.get(l).ok_or_else(|| Error::NoScalingIndicator {
                latent: l.clone(),
            })?;
            let scaling_loading = inds
                .iter()
                .find(|ld| &ld.indicator == scaling)
                .ok_or_else(|| Error::NoScalingIndicator { latent: l.clone() })?;
            if !scaling_loading.param.is_fixed_to(1.0) {
                return Err(Error::NoScalingIndicator { latent: l.clone() });
            }
            if self.loadings_of_indicator(scaling).len() != 1 {
                return Err(Error::CrossLoadedScalingIndicator {
                    latent: l.clone(),
                    indicator: scaling.clone(),
                });
            }
        }

        let mut seen = BTreeSet::new();
        for l in &self.loadings {
            if !self.is_latent(&l.latent) || !self.is_observed(&l.indicator) {
                return Err(Error::UnknownVariable { name: l.latent.clone(), line: 0 });
            }
            if !seen.insert(format!("{}=~{}", l.latent, l.indicator)) {
                return Err(Error::DuplicateEdge {
                    edge: format!("{}=~{}", l.latent, l.indicator),
                    line: 0,
                });
            }
        }
        for r in &self.regressions {
            if !self.is_latent(&r.outcome) || !self.is_declared(&r.predictor) {
                return Err(Error::UnknownVariable { name: r.outcome.clone(), line: 0 });
            }
            if !seen.insert(format!("{}~{}", r.outcome, r.predictor)) {
                return Err(Error::DuplicateEdge {
                    edge: format!("{}~{}", r.outcome, r.predictor),
                    line: 0,
                });
            }
        }
        for c in &self.covariances {
            if !self.is_declared(&c.a) || !self.is_declared(&c.b) {
                return Err(Error::UnknownVariable { name: c.a.clone(), line: 0 });
            }
            if !seen.insert(covariance_label(&c.a, &c.b)) {
                return Err(Error::DuplicateEdge {
                    edge: covariance_label(&c.a, &c.b),
                    line: 0,
                });
            }
        }
        Ok(())
    }

    /// Canonical model-syntax rendering. Fixed parameters print with a
    /// `value*` prefix, so reparsing the output reconstructs this IR exactly.
    pub fn to_syntax(&self) -> String {
        let mut out = String::new();
        for latent in &self.latents {
            let terms: Vec<String> = self
                .indicators_of(latent)
                .iter()
                .map(|l| render_term(&l.param, &l.indicator))
                .collect();
            out.push_str(&format!("{latent} =~ {}\n", terms.join(" + ")));
        }
        for r in &self.regressions {
            out.push_str(&format!("{} ~ {}\n", r.outcome, render_term(&r.param, &r.predictor)));
        }
        for c in &self.covariances {
            out.push_str(&format!("{} ~~ {}\n", c.a, render_term(&c.param, &c.b)));
        }
        out
    }

    /// Canonical JSON rendering (object keys sorted) for golden tests.
    pub fn canonical_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string_pretty(&value)?)
    }
}

fn render_term(param: &ParamValue, var: &str) -> String {
    match param {
        ParamValue::Fixed(v) => format!("{v}*{var}"),
        ParamValue::Free(_) => var.to_string(),
    }
}
