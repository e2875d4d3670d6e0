//! Exact probability objects over finite, ordered alphabets.
//!
//! Everything here is a plain immutable value. Supports are ordered, so
//! iteration order (and therefore sampling and serialization) is
//! deterministic. The reference measure on responses is counting measure,
//! which makes kernel row weights the response densities directly.

use std::borrow::Borrow;
use std::fmt;

use indexmap::{IndexMap, IndexSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::risk::{self, BoundedLoss, RiskError};

/// Tolerance for validating user-supplied probability data.
pub const INPUT_TOL: f64 = 1e-9;

/// Tolerance for identities between two independently computed routes.
pub const IDENTITY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("labels must be non-empty")]
    EmptyLabel,
    #[error("duplicate label `{0}`")]
    DuplicateLabel(Label),
    #[error("{labels} labels but {weights} weights")]
    LengthMismatch { labels: usize, weights: usize },
    #[error("weight for `{label}` is negative ({weight})")]
    NegativeWeight { label: Label, weight: f64 },
    #[error("weight for `{label}` is not finite")]
    NonFiniteWeight { label: Label },
    #[error("distribution has zero total mass")]
    ZeroTotalMass,
    #[error("weights sum to {sum}, which is not within {tol:e} of 1")]
    NotNormalized { sum: f64, tol: f64 },
    #[error("distribution is empty")]
    EmptyDistribution,
    #[error("kernel row for `{prompt}` uses response `{response}` outside the kernel alphabet")]
    RowOutsideAlphabet { prompt: Label, response: Label },
    #[error("duplicate kernel row for prompt `{0}`")]
    DuplicateRow(Label),
    #[error("kernel has no row for prompt `{0}`")]
    MissingRow(Label),
    #[error("alphabet extension drops response `{0}`")]
    AlphabetShrink(Label),
    #[error("response alphabets differ: `{0}` is present in only one law")]
    AlphabetMismatch(Label),
    #[error("joint law total mass {0} is not within tolerance of 1")]
    JointNotNormalized(f64),
    #[error("flat TV {flat} and conditional TV {conditional} disagree beyond {tol:e}")]
    IdentityViolation { flat: f64, conditional: f64, tol: f64 },
    #[error("test function bounds [{lower}, {upper}] exceed [-1, 1]")]
    TestFunctionBounds { lower: f64, upper: f64 },
    #[error(transparent)]
    Risk(#[from] Box<RiskError>),
}

/// Opaque, non-empty symbol naming a prompt or a response.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Label(String);

impl Label {
    pub fn new(id: impl Into<String>) -> Result<Self, MeasureError> {
        let id = id.into();
        if id.is_empty() {
            return Err(MeasureError::EmptyLabel);
        }
        Ok(Label(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Label {
    type Error = MeasureError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Label::new(value)
    }
}

impl From<Label> for String {
    fn from(label: Label) -> Self {
        label.0
    }
}

impl Borrow<str> for Label {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Builds a label list, rejecting empty strings.
pub fn labels<I, S>(ids: I) -> Result<Vec<Label>, MeasureError>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    ids.into_iter().map(Label::new).collect()
}

/// How [`Distribution::new`] treats weights that do not sum to one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Normalization {
    /// Weights must already sum to 1 within [`INPUT_TOL`]; they are kept verbatim.
    #[default]
    Strict,
    /// Weights are scaled by their total.
    Renormalize,
}

/// Probability vector over an ordered, duplicate-free label list.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution {
    weights: IndexMap<Label, f64>,
}

impl Distribution {
    pub fn new(labels: Vec<Label>, weights: Vec<f64>, policy: Normalization) -> Result<Self, MeasureError> {
        if labels.len() != weights.len() {
            return Err(MeasureError::LengthMismatch {
                labels: labels.len(),
                weights: weights.len(),
            });
        }
        if labels.is_empty() {
            return Err(MeasureError::EmptyDistribution);
        }
        let mut map = IndexMap::with_capacity(labels.len());
        for (label, weight) in labels.into_iter().zip(weights) {
            if !weight.is_finite() {
                return Err(MeasureError::NonFiniteWeight { label });
            }
            if weight < 0.0 {
                return Err(MeasureError::NegativeWeight { label, weight });
            }
            if map.contains_key(&label) {
                return Err(MeasureError::DuplicateLabel(label));
            }
            map.insert(label, weight);
        }
        let sum: f64 = map.values().sum();
        if sum <= 0.0 {
            return Err(MeasureError::ZeroTotalMass);
        }
        match policy {
            Normalization::Strict => {
                if (sum - 1.0).abs() > INPUT_TOL {
                    return Err(MeasureError::NotNormalized { sum, tol: INPUT_TOL });
                }
            }
            Normalization::Renormalize => {
                for w in map.values_mut() {
                    *w /= sum;
                }
            }
        }
        Ok(Distribution { weights: map })
    }

    pub fn from_pairs<I, S>(pairs: I, policy: Normalization) -> Result<Self, MeasureError>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let (ls, ws): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        Distribution::new(labels(ls)?, ws, policy)
    }

    pub fn point_mass(label: Label) -> Self {
        let mut weights = IndexMap::with_capacity(1);
        weights.insert(label, 1.0);
        Distribution { weights }
    }

    pub fn uniform(labels: Vec<Label>) -> Result<Self, MeasureError> {
        let n = labels.len();
        Distribution::new(labels, vec![1.0; n], Normalization::Renormalize)
    }

    /// Weight of `label`; labels outside the support read as zero.
    pub fn weight(&self, label: &str) -> f64 {
        self.weights.get(label).copied().unwrap_or(0.0)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.weights.contains_key(label)
    }

    pub fn support(&self) -> impl ExactSizeIterator<Item = &Label> + '_ {
        self.weights.keys()
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (&Label, f64)> + '_ {
        self.weights.iter().map(|(l, w)| (l, *w))
    }

    pub fn weights(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        self.weights.values().copied()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.values().sum()
    }

    /// Re-expresses the distribution over `alphabet`, padding with zeros.
    /// Fails if a label with positive weight would be dropped.
    pub fn over_alphabet(&self, alphabet: &IndexSet<Label>) -> Result<Self, MeasureError> {
        if let Some((label, _)) = self.weights.iter().find(|(l, w)| **w > 0.0 && !alphabet.contains(*l)) {
            return Err(MeasureError::AlphabetShrink(label.clone()));
        }
        let weights = alphabet.iter().map(|l| (l.clone(), self.weight(l.as_str()))).collect();
        Ok(Distribution { weights })
    }

    /// Same support and bitwise-identical weights, ignoring order.
    pub(crate) fn same_weights(&self, other: &Distribution) -> bool {
        self.len() == other.len()
            && self
                .weights
                .iter()
                .all(|(l, w)| other.weights.get(l).is_some_and(|v| v == w))
    }
}

/// Markov kernel: one response distribution per prompt, all over a shared
/// response alphabet.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    alphabet: IndexSet<Label>,
    rows: IndexMap<Label, Distribution>,
}

impl Kernel {
    /// Rows may omit responses (read as zero) but may not use responses
    /// outside `alphabet`. Stored rows are padded to the full alphabet.
    pub fn new(alphabet: Vec<Label>, rows: Vec<(Label, Distribution)>) -> Result<Self, MeasureError> {
        let mut set = IndexSet::with_capacity(alphabet.len());
        for label in alphabet {
            if !set.insert(label.clone()) {
                return Err(MeasureError::DuplicateLabel(label));
            }
        }
        let mut stored = IndexMap::with_capacity(rows.len());
        for (prompt, row) in rows {
            if stored.contains_key(&prompt) {
                return Err(MeasureError::DuplicateRow(prompt));
            }
            if let Some(response) = row.support().find(|l| !set.contains(*l)) {
                return Err(MeasureError::RowOutsideAlphabet {
                    prompt,
                    response: response.clone(),
                });
            }
            let padded = row.over_alphabet(&set)?;
            stored.insert(prompt, padded);
        }
        Ok(Kernel {
            alphabet: set,
            rows: stored,
        })
    }

    /// Kernel whose alphabet is the first-appearance union of the row supports.
    pub fn from_rows(rows: Vec<(Label, Distribution)>) -> Result<Self, MeasureError> {
        let mut alphabet = IndexSet::new();
        for (_, row) in &rows {
            alphabet.extend(row.support().cloned());
        }
        Kernel::new(alphabet.into_iter().collect(), rows)
    }

    /// Same rows over a larger alphabet (new responses get zero weight).
    pub fn with_alphabet(&self, alphabet: &[Label]) -> Result<Self, MeasureError> {
        Kernel::new(
            alphabet.to_vec(),
            self.rows.iter().map(|(p, r)| (p.clone(), r.clone())).collect(),
        )
    }

    pub fn alphabet(&self) -> &IndexSet<Label> {
        &self.alphabet
    }

    pub fn row(&self, prompt: &str) -> Option<&Distribution> {
        self.rows.get(prompt)
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = (&Label, &Distribution)> + '_ {
        self.rows.iter()
    }

    pub fn prompts(&self) -> impl ExactSizeIterator<Item = &Label> + '_ {
        self.rows.keys()
    }

    /// `k(y | x)`, zero when either label is unknown.
    pub fn prob(&self, prompt: &str, response: &str) -> f64 {
        self.rows.get(prompt).map_or(0.0, |row| row.weight(response))
    }
}

/// Which behavior produced a joint law.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// The model's own deployment behavior.
    OnPolicy,
    /// A fixed corpus-induced behavior.
    OffPolicy,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::OnPolicy => "on_policy",
            Regime::OffPolicy => "off_policy",
        })
    }
}

/// Joint law `rho(x) · k(y | x)` over prompts and responses.
#[derive(Clone, Debug, PartialEq)]
pub struct JointLaw {
    prompt_marginal: Distribution,
    kernel: Kernel,
    regime: Regime,
}

/// Pairs a prompt marginal with a kernel. Every prompt in `rho`'s support
/// must have a kernel row; extra rows are kept but carry no mass.
pub fn joint(rho: Distribution, kernel: Kernel, regime: Regime) -> Result<JointLaw, MeasureError> {
    if let Some(missing) = rho.support().find(|x| kernel.row(x.as_str()).is_none()) {
        return Err(MeasureError::MissingRow(missing.clone()));
    }
    let law = JointLaw {
        prompt_marginal: rho,
        kernel,
        regime,
    };
    let total = law.total_mass();
    if (total - 1.0).abs() > INPUT_TOL {
        return Err(MeasureError::JointNotNormalized(total));
    }
    Ok(law)
}

impl JointLaw {
    pub fn prompt_marginal(&self) -> &Distribution {
        &self.prompt_marginal
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn response_alphabet(&self) -> &IndexSet<Label> {
        self.kernel.alphabet()
    }

    pub fn mass(&self, prompt: &str, response: &str) -> f64 {
        self.prompt_marginal.weight(prompt) * self.kernel.prob(prompt, response)
    }

    /// All cells over marginal support × response alphabet, in order.
    pub fn cells(&self) -> impl Iterator<Item = (&Label, &Label, f64)> + '_ {
        self.prompt_marginal.iter().flat_map(move |(x, rx)| {
            let row = self
                .kernel
                .row(x.as_str())
                .expect("joint construction guarantees a row per prompt");
            row.iter().map(move |(y, k)| (x, y, rx * k))
        })
    }

    pub fn total_mass(&self) -> f64 {
        self.cells().map(|(_, _, m)| m).sum()
    }
}

/// The prompt marginal of a joint law. By construction this is exactly the
/// `rho` the law was built from.
pub fn marginal_prompt(j: &JointLaw) -> Distribution {
    j.prompt_marginal.clone()
}

/// `½ Σ_y |p(y) − q(y)|` over the union of supports.
pub fn tv_distributions(p: &Distribution, q: &Distribution) -> f64 {
    let mut l1 = 0.0;
    for (label, w) in p.iter() {
        l1 += (w - q.weight(label.as_str())).abs();
    }
    for (label, w) in q.iter() {
        if !p.contains(label.as_str()) {
            l1 += w;
        }
    }
    (0.5 * l1).min(1.0)
}

/// Both routes to the TV between two joint laws.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TvRoutes {
    /// Half-L1 over all `(x, y)` cells.
    pub flat: f64,
    /// `E_{x∼rho}[TV(pi(·|x), q(·|x))]`, only when the prompt marginals coincide.
    pub conditional: Option<f64>,
}

pub fn tv_joint_routes(p: &JointLaw, q: &JointLaw) -> Result<TvRoutes, MeasureError> {
    check_same_responses(p, q)?;
    let mut prompts: IndexSet<&Label> = p.prompt_marginal.support().collect();
    prompts.extend(q.prompt_marginal.support());

    let mut l1 = 0.0;
    for x in &prompts {
        for y in p.response_alphabet() {
            l1 += (p.mass(x.as_str(), y.as_str()) - q.mass(x.as_str(), y.as_str())).abs();
        }
    }
    let flat = (0.5 * l1).min(1.0);

    let conditional = if p.prompt_marginal.same_weights(&q.prompt_marginal) {
        let mut acc = 0.0;
        for (x, rx) in p.prompt_marginal.iter() {
            let pi = p.kernel.row(x.as_str()).expect("row exists");
            let qx = q.kernel.row(x.as_str()).expect("row exists");
            acc += rx * tv_distributions(pi, qx);
        }
        Some(acc)
    } else {
        None
    };
    Ok(TvRoutes { flat, conditional })
}

/// Total variation between two joint laws.
///
/// When the prompt marginals coincide the conditional decomposition is
/// computed as well and must agree with the flat half-L1 within
/// [`IDENTITY_TOL`].
pub fn tv_joint(p: &JointLaw, q: &JointLaw) -> Result<f64, MeasureError> {
    let routes = tv_joint_routes(p, q)?;
    if let Some(conditional) = routes.conditional {
        if (routes.flat - conditional).abs() > IDENTITY_TOL {
            return Err(MeasureError::IdentityViolation {
                flat: routes.flat,
                conditional,
                tol: IDENTITY_TOL,
            });
        }
    }
    Ok(routes.flat)
}

/// `E_P[f] − E_Q[f]` for a test function with `‖f‖_∞ ≤ 1`.
pub fn tv_variational_gap(p: &JointLaw, q: &JointLaw, f: &BoundedLoss) -> Result<f64, MeasureError> {
    if f.lower() < -1.0 || f.upper() > 1.0 {
        return Err(MeasureError::TestFunctionBounds {
            lower: f.lower(),
            upper: f.upper(),
        });
    }
    check_same_responses(p, q)?;
    let ep = risk::risk(p, f).map_err(Box::new)?;
    let eq = risk::risk(q, f).map_err(Box::new)?;
    Ok(ep - eq)
}

/// Re-expresses both laws over the union of their response alphabets, `P`'s
/// responses first. Masses are unchanged.
pub fn align_response_alphabets(p: &JointLaw, q: &JointLaw) -> Result<(JointLaw, JointLaw), MeasureError> {
    let mut union = p.response_alphabet().clone();
    union.extend(q.response_alphabet().iter().cloned());
    let union: Vec<Label> = union.into_iter().collect();
    let widen = |j: &JointLaw| {
        joint(
            j.prompt_marginal().clone(),
            j.kernel().with_alphabet(&union)?,
            j.regime(),
        )
    };
    Ok((widen(p)?, widen(q)?))
}

pub(crate) fn check_same_responses(p: &JointLaw, q: &JointLaw) -> Result<(), MeasureError> {
    let (a, b) = (p.response_alphabet(), q.response_alphabet());
    if let Some(y) = a.iter().find(|y| !b.contains(*y)) {
        return Err(MeasureError::AlphabetMismatch(y.clone()));
    }
    if let Some(y) = b.iter().find(|y| !a.contains(*y)) {
        return Err(MeasureError::AlphabetMismatch(y.clone()));
    }
    Ok(())
}
