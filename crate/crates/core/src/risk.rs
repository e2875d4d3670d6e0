//! Bounded losses, on- and off-policy risks, and the blind-spot gap.
//!
//! For a loss `ℓ` with `‖ℓ‖_∞ ≤ L_max` the gap between the on-policy risk
//! `E_P[ℓ]` and the off-policy risk `E_Q[ℓ]` never exceeds
//! `2 · L_max · TV(P, Q)`, and the sign loss `ℓ* = L_max · sign(P − Q)`
//! attains it. For the nonnegative class `[0, L_max]` the indicator
//! `L_max · 1[P > Q]` attains only `L_max · TV`, so the factor-2 bound is
//! valid there but not tight. Both classes are first-class here.

use std::fmt;

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus_io::{check_equal_marginal, MarginalMismatch};
use crate::measure::{self, JointLaw, Label, MeasureError, IDENTITY_TOL, INPUT_TOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiskError {
    #[error("loss bounds are inverted or not finite: [{lower}, {upper}]")]
    InvalidBounds { lower: f64, upper: f64 },
    #[error("loss value {value} at ({prompt}, {response}) lies outside [{lower}, {upper}]")]
    OutOfBounds {
        prompt: Label,
        response: Label,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("loss table has {got} values for a {rows}x{cols} alphabet")]
    TableShape { got: usize, rows: usize, cols: usize },
    #[error("loss table is missing cell ({prompt}, {response})")]
    MissingCell { prompt: Label, response: Label },
    #[error("loss table lists cell ({prompt}, {response}) twice")]
    DuplicateCell { prompt: Label, response: Label },
    #[error("loss does not cover ({prompt}, {response}), which carries positive mass")]
    Uncovered { prompt: Label, response: Label },
    #[error("prompt marginals differ beyond tolerance at {} prompt(s)", .0.len())]
    UnequalMarginals(Vec<MarginalMismatch>),
    #[error("L_max must be positive and finite, got {0}")]
    NonPositiveLMax(f64),
    #[error("joint and per-prompt gap routes disagree: {flat} vs {per_prompt}")]
    IdentityViolation { flat: f64, per_prompt: f64 },
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Which sup-norm class a loss belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossClass {
    /// `0 ≤ ℓ ≤ L_max`.
    Nonnegative,
    /// `‖ℓ‖_∞ ≤ L_max`.
    Signed,
}

impl fmt::Display for LossClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossClass::Nonnegative => "nonnegative",
            LossClass::Signed => "signed",
        })
    }
}

/// Dense loss table over prompt × response with declared bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundedLoss {
    prompts: IndexSet<Label>,
    responses: IndexSet<Label>,
    // row-major: prompts outer, responses inner
    values: Vec<f64>,
    lower: f64,
    upper: f64,
}

impl BoundedLoss {
    pub fn new(
        prompts: Vec<Label>,
        responses: Vec<Label>,
        values: Vec<f64>,
        lower: f64,
        upper: f64,
    ) -> Result<Self, RiskError> {
        if !(lower.is_finite() && upper.is_finite() && lower <= upper) {
            return Err(RiskError::InvalidBounds { lower, upper });
        }
        let prompts = unique(prompts)?;
        let responses = unique(responses)?;
        if values.len() != prompts.len() * responses.len() {
            return Err(RiskError::TableShape {
                got: values.len(),
                rows: prompts.len(),
                cols: responses.len(),
            });
        }
        let loss = BoundedLoss {
            prompts,
            responses,
            values,
            lower,
            upper,
        };
        for (x, y, v) in loss.cells() {
            if !(v >= lower && v <= upper) {
                return Err(RiskError::OutOfBounds {
                    prompt: x.clone(),
                    response: y.clone(),
                    value: v,
                    lower,
                    upper,
                });
            }
        }
        Ok(loss)
    }

    pub fn from_fn<F>(
        prompts: Vec<Label>,
        responses: Vec<Label>,
        lower: f64,
        upper: f64,
        mut f: F,
    ) -> Result<Self, RiskError>
    where
        F: FnMut(&Label, &Label) -> f64,
    {
        let mut values = Vec::with_capacity(prompts.len() * responses.len());
        for x in &prompts {
            for y in &responses {
                values.push(f(x, y));
            }
        }
        BoundedLoss::new(prompts, responses, values, lower, upper)
    }

    /// Builds a dense table from explicit cells. Alphabets are taken in
    /// first-appearance order and every combination must be listed once.
    pub fn from_cells<I>(cells: I, lower: f64, upper: f64) -> Result<Self, RiskError>
    where
        I: IntoIterator<Item = (Label, Label, f64)>,
    {
        let cells: Vec<_> = cells.into_iter().collect();
        let prompts: IndexSet<Label> = cells.iter().map(|c| c.0.clone()).collect();
        let responses: IndexSet<Label> = cells.iter().map(|c| c.1.clone()).collect();
        let mut values = vec![None; prompts.len() * responses.len()];
        for (x, y, v) in cells {
            let i = prompts.get_index_of(&x).unwrap() * responses.len() + responses.get_index_of(&y).unwrap();
            if values[i].replace(v).is_some() {
                return Err(RiskError::DuplicateCell { prompt: x, response: y });
            }
        }
        let mut dense = Vec::with_capacity(values.len());
        for (i, v) in values.into_iter().enumerate() {
            match v {
                Some(v) => dense.push(v),
                None => {
                    return Err(RiskError::MissingCell {
                        prompt: prompts[i / responses.len()].clone(),
                        response: responses[i % responses.len()].clone(),
                    })
                }
            }
        }
        BoundedLoss::new(
            prompts.into_iter().collect(),
            responses.into_iter().collect(),
            dense,
            lower,
            upper,
        )
    }

    /// Constant loss with bounds `[min(c, 0), max(c, 0)]`.
    pub fn constant(prompts: Vec<Label>, responses: Vec<Label>, c: f64) -> Result<Self, RiskError> {
        BoundedLoss::from_fn(prompts, responses, c.min(0.0), c.max(0.0), |_, _| c)
    }

    pub fn value(&self, prompt: &str, response: &str) -> Option<f64> {
        let i = self.prompts.get_index_of(prompt)?;
        let j = self.responses.get_index_of(response)?;
        Some(self.values[i * self.responses.len() + j])
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn class(&self) -> LossClass {
        if self.lower >= 0.0 {
            LossClass::Nonnegative
        } else {
            LossClass::Signed
        }
    }

    /// `upper` for the nonnegative class, `max(|lower|, |upper|)` otherwise.
    pub fn l_max(&self) -> f64 {
        match self.class() {
            LossClass::Nonnegative => self.upper,
            LossClass::Signed => self.lower.abs().max(self.upper.abs()),
        }
    }

    pub fn prompts(&self) -> &IndexSet<Label> {
        &self.prompts
    }

    pub fn responses(&self) -> &IndexSet<Label> {
        &self.responses
    }

    pub fn cells(&self) -> impl Iterator<Item = (&Label, &Label, f64)> + '_ {
        let width = self.responses.len();
        self.values
            .iter()
            .enumerate()
            .map(move |(i, v)| (&self.prompts[i / width], &self.responses[i % width], *v))
    }

    /// True when every positive-mass cell of `j` has a value.
    pub fn covers(&self, j: &JointLaw) -> bool {
        j.cells()
            .all(|(x, y, m)| m == 0.0 || self.value(x.as_str(), y.as_str()).is_some())
    }

    /// Adds `c` to every cell and to both bounds.
    pub fn shifted(&self, c: f64) -> Result<Self, RiskError> {
        BoundedLoss::new(
            self.prompts.iter().cloned().collect(),
            self.responses.iter().cloned().collect(),
            self.values.iter().map(|v| v + c).collect(),
            self.lower + c,
            self.upper + c,
        )
    }
}

fn unique(labels: Vec<Label>) -> Result<IndexSet<Label>, RiskError> {
    let mut set = IndexSet::with_capacity(labels.len());
    for l in labels {
        if !set.insert(l.clone()) {
            return Err(MeasureError::DuplicateLabel(l).into());
        }
    }
    Ok(set)
}

/// Tolerance for a two-route identity whose terms scale with `magnitude`.
pub(crate) fn identity_tol(magnitude: f64) -> f64 {
    IDENTITY_TOL * magnitude.abs().max(1.0)
}

/// `Σ_{x,y} j(x, y) · ℓ(x, y)`, clamped to the loss bounds.
pub fn risk(j: &JointLaw, loss: &BoundedLoss) -> Result<f64, RiskError> {
    let mut acc = 0.0;
    for (x, y, m) in j.cells() {
        if m == 0.0 {
            continue;
        }
        let v = loss.value(x.as_str(), y.as_str()).ok_or_else(|| RiskError::Uncovered {
            prompt: x.clone(),
            response: y.clone(),
        })?;
        acc += m * v;
    }
    Ok(acc.clamp(loss.lower, loss.upper))
}

/// Per-prompt conditional risk `E_{y∼k(·|x)}[ℓ(x, y)]`.
fn conditional_risk(j: &JointLaw, x: &Label, loss: &BoundedLoss) -> Result<f64, RiskError> {
    let row = j.kernel().row(x.as_str()).expect("row exists for supported prompt");
    let mut acc = 0.0;
    for (y, k) in row.iter() {
        if k == 0.0 {
            continue;
        }
        let v = loss.value(x.as_str(), y.as_str()).ok_or_else(|| RiskError::Uncovered {
            prompt: x.clone(),
            response: y.clone(),
        })?;
        acc += k * v;
    }
    Ok(acc)
}

/// Both routes to the fixed-loss gap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapRoutes {
    /// `|E_P ℓ − E_Q ℓ|` over the joint laws.
    pub flat: f64,
    /// `|E_{x∼rho}[E_pi ℓ − E_q ℓ]|`.
    pub per_prompt: f64,
}

pub fn blind_spot_routes(p: &JointLaw, q: &JointLaw, loss: &BoundedLoss) -> Result<GapRoutes, RiskError> {
    let check = check_equal_marginal(p, q, INPUT_TOL);
    if !check.passed {
        return Err(RiskError::UnequalMarginals(check.offenders));
    }
    let flat = (risk(p, loss)? - risk(q, loss)?).abs();
    let mut acc = 0.0;
    for (x, rx) in p.prompt_marginal().iter() {
        if rx == 0.0 {
            continue;
        }
        acc += rx * (conditional_risk(p, x, loss)? - conditional_risk(q, x, loss)?);
    }
    Ok(GapRoutes {
        flat,
        per_prompt: acc.abs(),
    })
}

/// `|R_gen − R_disc|` for a fixed loss. Requires equal prompt marginals and
/// checks the joint route against the per-prompt decomposition.
pub fn blind_spot_gap(p: &JointLaw, q: &JointLaw, loss: &BoundedLoss) -> Result<f64, RiskError> {
    let routes = blind_spot_routes(p, q, loss)?;
    if (routes.flat - routes.per_prompt).abs() > identity_tol(loss.l_max()) {
        return Err(RiskError::IdentityViolation {
            flat: routes.flat,
            per_prompt: routes.per_prompt,
        });
    }
    Ok(routes.flat)
}

fn check_l_max(l_max: f64) -> Result<(), RiskError> {
    if l_max > 0.0 && l_max.is_finite() {
        Ok(())
    } else {
        Err(RiskError::NonPositiveLMax(l_max))
    }
}

/// `2 · L_max · TV(P, Q)`.
pub fn tv_bound(p: &JointLaw, q: &JointLaw, l_max: f64) -> Result<f64, RiskError> {
    check_l_max(l_max)?;
    Ok(2.0 * l_max * measure::tv_joint(p, q)?)
}

/// Supremum of the gap over `‖ℓ‖_∞ ≤ L_max`, which equals
/// `2 · L_max · TV(P, Q)` and is zero exactly when `P = Q`.
/// Unlike [`blind_spot_gap`] this does not require equal prompt marginals.
pub fn worst_case_gap(p: &JointLaw, q: &JointLaw, l_max: f64) -> Result<f64, RiskError> {
    tv_bound(p, q, l_max)
}

/// Loss attaining the worst-case gap within `cls`.
///
/// Signed: `+L_max` where `P ≥ Q`, `−L_max` where `P < Q` (ties carry no
/// signed mass, so they go to `+L_max`). Nonnegative: `L_max · 1[P > Q]`.
/// The table spans the union of both prompt supports and the shared
/// response alphabet.
pub fn witness_loss(p: &JointLaw, q: &JointLaw, l_max: f64, cls: LossClass) -> Result<BoundedLoss, RiskError> {
    check_l_max(l_max)?;
    measure::check_same_responses(p, q)?;
    let mut prompts: IndexSet<Label> = p.prompt_marginal().support().cloned().collect();
    prompts.extend(q.prompt_marginal().support().cloned());
    let responses: Vec<Label> = p.response_alphabet().iter().cloned().collect();
    let (lower, neg) = match cls {
        LossClass::Signed => (-l_max, -l_max),
        LossClass::Nonnegative => (0.0, 0.0),
    };
    BoundedLoss::from_fn(prompts.into_iter().collect(), responses, lower, l_max, |x, y| {
        let (pm, qm) = (p.mass(x.as_str(), y.as_str()), q.mass(x.as_str(), y.as_str()));
        match cls {
            LossClass::Signed if pm >= qm => l_max,
            LossClass::Nonnegative if pm > qm => l_max,
            _ => neg,
        }
    })
}

/// `E_P[ℓ] − E_Q[ℓ]`, the signed gap a loss achieves.
pub fn achieved_gap(p: &JointLaw, q: &JointLaw, loss: &BoundedLoss) -> Result<f64, RiskError> {
    Ok(risk(p, loss)? - risk(q, loss)?)
}

/// Risks, gap and TV bound for one loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub r_gen: f64,
    pub r_disc: f64,
    pub gap: f64,
    pub tv: f64,
    pub l_max: f64,
    pub loss_class: LossClass,
    pub bound: f64,
    pub bound_satisfied: bool,
    pub slack: f64,
}

pub fn audit(p: &JointLaw, q: &JointLaw, loss: &BoundedLoss) -> Result<GapReport, RiskError> {
    let gap = blind_spot_gap(p, q, loss)?;
    let r_gen = risk(p, loss)?;
    let r_disc = risk(q, loss)?;
    let tv = measure::tv_joint(p, q)?;
    let l_max = loss.l_max();
    // an all-zero loss has L_max = 0 and a trivially zero bound
    let bound = if l_max > 0.0 { tv_bound(p, q, l_max)? } else { 0.0 };
    let slack = bound - gap;
    Ok(GapReport {
        r_gen,
        r_disc,
        gap,
        tv,
        l_max,
        loss_class: loss.class(),
        bound,
        bound_satisfied: slack >= -identity_tol(l_max),
        slack,
    })
}
