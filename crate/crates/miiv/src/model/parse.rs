//! Line-oriented parser for the model syntax.
//!
//! Grammar, one statement per line, `#` starts a comment:
//!
//! ```text
//! latent =~ term + term + ...     measurement (loadings)
//! latent ~  term + term + ...     structural regression
//! var    ~~ term                  (co)variance between error terms
//! term   := [value*] name
//! ```
//!
//! Every variable must be introduced by a `=~` statement, latents on the
//! left, indicators on the right; `~` and `~~` may only reference names
//! already introduced. The scaling indicator of each latent is the first
//! indicator explicitly fixed to 1, or the first indicator with a free
//! loading, which is then fixed to 1.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ir::{
    covariance_label, Covariance, Intercept, Loading, ModelIR, ParamValue, Regression,
};

/// Parse model-syntax text into a validated [`ModelIR`].
pub fn parse_model(text: &str) -> Result<ModelIR> {
    let mut statements = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let code = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        if code.trim().is_empty() {
            continue;
        }
        statements.push(parse_statement(code, line_no)?);
    }

    build_ir(statements)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Measure,    // =~
    Regress,    // ~
    Covary,     // ~~
}

#[derive(Debug)]
struct Statement {
    op: Op,
    lhs: String,
    rhs: Vec<Term>,
    line: usize,
}

#[derive(Debug)]
struct Term {
    fixed: Option<f64>,
    name: String,
    column: usize,
}

fn parse_statement(code: &str, line: usize) -> Result<Statement> {
    let (op, op_pos, op_len) = find_operator(code, line)?;
    let lhs_src = &code[..op_pos];
    let rhs_src = &code[op_pos + op_len..];

    let lhs = lhs_src.trim();
    if lhs.is_empty() || !is_identifier(lhs) {
        return Err(syntax(line, column_of(code, lhs_src, lhs), format!("expected a variable name before the operator, found `{lhs}`")));
    }

    let mut rhs = Vec::new();
    let rhs_offset = op_pos + op_len;
    for piece in split_terms(rhs_src) {
        let (start, text) = piece;
        let term_src = text.trim();
        let column = rhs_offset + start + leading_ws(text) + 1;
        if term_src.is_empty() {
            return Err(syntax(line, column, "empty term".to_string()));
        }
        let term = match term_src.split_once('*') {
            Some((value, name)) => {
                let value = value.trim();
                let name = name.trim();
                let fixed: f64 = value.parse().map_err(|_| {
                    syntax(line, column, format!("`{value}` is not a numeric parameter value"))
                })?;
                if !fixed.is_finite() {
                    return Err(syntax(line, column, format!("fixed value `{value}` must be finite")));
                }
                if !is_identifier(name) {
                    return Err(syntax(line, column, format!("`{name}` is not a valid variable name")));
                }
                Term { fixed: Some(fixed), name: name.to_string(), column }
            }
            None => {
                if !is_identifier(term_src) {
                    return Err(syntax(line, column, format!("`{term_src}` is not a valid variable name")));
                }
                Term { fixed: None, name: term_src.to_string(), column }
            }
        };
        rhs.push(term);
    }
    if rhs.is_empty() {
        return Err(syntax(line, code.len() + 1, "statement has no right-hand side".to_string()));
    }
    if op == Op::Covary && rhs.len() != 1 {
        return Err(syntax(line, rhs[1].column, "`~~` takes a single right-hand term".to_string()));
    }

    Ok(Statement { op, lhs: lhs.to_string(), rhs, line })
}

/// Locate the statement operator; `=~` before `~~` before `~`.
fn find_operator(code: &str, line: usize) -> Result<(Op, usize, usize)> {
    if let Some(p) = code.find("=~") {
        return Ok((Op::Measure, p, 2));
    }
    if let Some(p) = code.find("~~") {
        return Ok((Op::Covary, p, 2));
    }
    if let Some(p) = code.find('~') {
        return Ok((Op::Regress, p, 1));
    }
    Err(syntax(line, 1, "expected one of `=~`, `~`, `~~`".to_string()))
}

fn split_terms(src: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, ch) in src.char_indices() {
        if ch == '+' {
            out.push((start, &src[start..i]));
            start = i + 1;
        }
    }
    out.push((start, &src[start..]));
    out
}

fn leading_ws(s: &str) -> usize {
    s.len() - s.trim_start().len()
}

fn column_of(code: &str, section: &str, token: &str) -> usize {
    let base = section.as_ptr() as usize - code.as_ptr() as usize;
    base + section.find(token).unwrap_or(0) + 1
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn syntax(line: usize, column: usize, message: String) -> Error {
    Error::Syntax { line, column, message }
}

fn build_ir(statements: Vec<Statement>) -> Result<ModelIR> {
    let mut latents: Vec<String> = Vec::new();
    let mut observed: Vec<String> = Vec::new();

    // First pass: measurement statements introduce all variables.
    for st in statements.iter().filter(|s| s.op == Op::Measure) {
        if observed.iter().any(|o| o == &st.lhs) {
            return Err(syntax(
                st.line,
                1,
                format!("`{}` is already an indicator and cannot also be a latent variable", st.lhs),
            ));
        }
        if !latents.contains(&st.lhs) {
            latents.push(st.lhs.clone());
        }
        for t in &st.rhs {
            if latents.contains(&t.name) {
                return Err(syntax(
                    st.line,
                    t.column,
                    format!("`{}` is a latent variable and cannot also be an indicator", t.name),
                ));
            }
            if !observed.iter().any(|o| o == &t.name) {
                observed.push(t.name.clone());
            }
        }
    }

    let declared = |name: &str| latents.contains(&name.to_string()) || observed.iter().any(|o| o == name);

    // Loadings, with duplicate detection.
    let mut loadings: Vec<Loading> = Vec::new();
    for st in statements.iter().filter(|s| s.op == Op::Measure) {
        for t in &st.rhs {
            if loadings.iter().any(|l| l.latent == st.lhs && l.indicator == t.name) {
                return Err(Error::DuplicateEdge {
                    edge: format!("{}=~{}", st.lhs, t.name),
                    line: st.line,
                });
            }
            let param = match t.fixed {
                Some(v) => ParamValue::Fixed(v),
                None => ParamValue::Free(format!("{}=~{}", st.lhs, t.name)),
            };
            loadings.push(Loading { latent: st.lhs.clone(), indicator: t.name.clone(), param });
        }
    }

    // Scaling indicators: first loading fixed exactly to 1, else the first
    // free loading is fixed to 1.
    let mut scaling = BTreeMap::new();
    for latent in &latents {
        let chosen = loadings
            .iter()
            .position(|l| l.latent == *latent && l.param.is_fixed_to(1.0))
            .or_else(|| {
                loadings
                    .iter()
                    .position(|l| l.latent == *latent && matches!(l.param, ParamValue::Free(_)))
            });
        match chosen {
            Some(idx) => {
                loadings[idx].param = ParamValue::Fixed(1.0);
                scaling.insert(latent.clone(), loadings[idx].indicator.clone());
            }
            None => return Err(Error::NoScalingIndicator { latent: latent.clone() }),
        }
    }

    // Regressions: outcomes must be latent, predictors declared.
    let mut regressions: Vec<Regression> = Vec::new();
    for st in statements.iter().filter(|s| s.op == Op::Regress) {
        if !latents.contains(&st.lhs) {
            if declared(&st.lhs) {
                return Err(syntax(
                    st.line,
                    1,
                    format!("regression outcome `{}` must be a latent variable", st.lhs),
                ));
            }
            return Err(Error::UnknownVariable { name: st.lhs.clone(), line: st.line });
        }
        for t in &st.rhs {
            if !declared(&t.name) {
                return Err(Error::UnknownVariable { name: t.name.clone(), line: st.line });
            }
            if t.name == st.lhs {
                return Err(syntax(st.line, t.column, format!("`{}` cannot predict itself", st.lhs)));
            }
            if regressions.iter().any(|r| r.outcome == st.lhs && r.predictor == t.name) {
                return Err(Error::DuplicateEdge {
                    edge: format!("{}~{}", st.lhs, t.name),
                    line: st.line,
                });
            }
            let param = match t.fixed {
                Some(v) => ParamValue::Fixed(v),
                None => ParamValue::Free(format!("{}~{}", st.lhs, t.name)),
            };
            regressions.push(Regression { outcome: st.lhs.clone(), predictor: t.name.clone(), param });
        }
    }

    // Covariances (variances when both sides agree).
    let mut covariances: Vec<Covariance> = Vec::new();
    for st in statements.iter().filter(|s| s.op == Op::Covary) {
        let t = &st.rhs[0];
        if !declared(&st.lhs) {
            return Err(Error::UnknownVariable { name: st.lhs.clone(), line: st.line });
        }
        if !declared(&t.name) {
            return Err(Error::UnknownVariable { name: t.name.clone(), line: st.line });
        }
        if covariances
            .iter()
            .any(|c| covariance_label(&c.a, &c.b) == covariance_label(&st.lhs, &t.name))
        {
            return Err(Error::DuplicateEdge {
                edge: covariance_label(&st.lhs, &t.name),
                line: st.line,
            });
        }
        let param = match t.fixed {
            Some(v) => ParamValue::Fixed(v),
            None => ParamValue::Free(covariance_label(&st.lhs, &t.name)),
        };
        covariances.push(Covariance { a: st.lhs.clone(), b: t.name.clone(), param });
    }

    // Intercepts: zero for scaling indicators, free otherwise.
    let scaling_set: Vec<&String> = scaling.values().collect();
    let mut intercepts = Vec::new();
    for v in latents.iter().chain(observed.iter()) {
        let param = if scaling_set.contains(&v) {
            ParamValue::Fixed(0.0)
        } else {
            ParamValue::Free(format!("{v}~1"))
        };
        intercepts.push(Intercept { variable: v.clone(), param });
    }

    let ir = ModelIR {
        latents,
        observed,
        loadings,
        regressions,
        covariances,
        intercepts,
        scaling,
    };
    ir.validate()?;
    Ok(ir)
}
