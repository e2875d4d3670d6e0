//! Synthetic policies whose interpretive behavior is visible on-policy but
//! hidden from a corpus audit.
//!
//! Responses are the four behavior modes themselves, so a kernel row is a
//! mode mix. A corpus kernel is derived from a policy by suppressing some
//! modes and renormalizing, which models a fixed candidate pool that
//! under-represents those behaviors.

use std::collections::BTreeMap;
use std::fmt;

use indexmap::{IndexMap, IndexSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimation::{self, Categorical, EstimationError, KernelSampler, SampleSet, SAMPLE_BLOCK};
use crate::measure::{self, joint, Distribution, JointLaw, Kernel, Label, MeasureError, Normalization, Regime};
use crate::risk::{self, BoundedLoss, GapReport, LossClass, RiskError};

use rayon::prelude::*;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("prompt_count must be at least 1")]
    NoPrompts,
    #[error("{class} mode probabilities must be non-negative and sum to 1, got {values:?}")]
    InvalidProbabilities { class: &'static str, values: [f64; 4] },
    #[error("ambiguity flag for unknown prompt `{0}`")]
    UnknownPrompt(String),
    #[error("suppression for {mode} must lie in [0, 1], got {value}")]
    SuppressionOutOfRange { mode: BehaviorMode, value: f64 },
    #[error("suppression removes all mass from the row for `{0}`")]
    ZeroRowMass(Label),
    #[error("response `{0}` is not a behavior-mode label")]
    NotAModeLabel(Label),
    #[error("loss specification is invalid: {0}")]
    InvalidLoss(String),
    #[error("turns must be at least 1")]
    ZeroTurns,
    #[error("at least one trajectory is required")]
    ZeroTrajectories,
    #[error("no kernel row for reachable prompt `{0}`")]
    MissingRow(Label),
    #[error("context map has no transition for ({prompt}, {response})")]
    MissingTransition { prompt: Label, response: Label },
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
}

/// How a response applies the governing principles to a prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorMode {
    Clarify,
    DirectAnswer,
    Refuse,
    ConstrainedAlternative,
}

impl BehaviorMode {
    pub const ALL: [BehaviorMode; 4] = [
        BehaviorMode::Clarify,
        BehaviorMode::DirectAnswer,
        BehaviorMode::Refuse,
        BehaviorMode::ConstrainedAlternative,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BehaviorMode::Clarify => "clarify",
            BehaviorMode::DirectAnswer => "direct_answer",
            BehaviorMode::Refuse => "refuse",
            BehaviorMode::ConstrainedAlternative => "constrained_alternative",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        BehaviorMode::ALL.into_iter().find(|m| m.as_str() == s)
    }

    /// The response label that stands for this mode.
    pub fn label(self) -> Label {
        Label::new(self.as_str()).expect("mode names are non-empty")
    }

    fn alphabet() -> Vec<Label> {
        BehaviorMode::ALL.iter().map(|m| m.label()).collect()
    }
}

impl fmt::Display for BehaviorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Probability of each behavior mode for one class of prompts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeMix {
    pub clarify: f64,
    pub direct_answer: f64,
    pub refuse: f64,
    pub constrained_alternative: f64,
}

impl ModeMix {
    pub fn get(&self, mode: BehaviorMode) -> f64 {
        match mode {
            BehaviorMode::Clarify => self.clarify,
            BehaviorMode::DirectAnswer => self.direct_answer,
            BehaviorMode::Refuse => self.refuse,
            BehaviorMode::ConstrainedAlternative => self.constrained_alternative,
        }
    }

    fn values(&self) -> [f64; 4] {
        BehaviorMode::ALL.map(|m| self.get(m))
    }

    fn to_distribution(self, class: &'static str) -> Result<Distribution, ScenarioError> {
        let values = self.values();
        Distribution::new(BehaviorMode::alphabet(), values.to_vec(), Normalization::Strict)
            .map_err(|_| ScenarioError::InvalidProbabilities { class, values })
    }
}

/// Prompt population and per-class mode mixes for a synthetic policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Prompts are labeled `p0 .. p{prompt_count-1}`.
    pub prompt_count: usize,
    pub ambiguous_modes: ModeMix,
    pub clear_modes: ModeMix,
    /// Prompts not listed are clear.
    #[serde(default)]
    pub ambiguity_flags: IndexMap<String, bool>,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    /// Eight prompts, half of them ambiguous. On ambiguous prompts the
    /// policy answers directly 70% of the time and clarifies 15%.
    fn default() -> Self {
        ScenarioConfig {
            prompt_count: 8,
            ambiguous_modes: ModeMix {
                clarify: 0.15,
                direct_answer: 0.7,
                refuse: 0.1,
                constrained_alternative: 0.05,
            },
            clear_modes: ModeMix {
                clarify: 0.05,
                direct_answer: 0.85,
                refuse: 0.05,
                constrained_alternative: 0.05,
            },
            ambiguity_flags: (0..4).map(|i| (format!("p{i}"), true)).collect(),
            seed: 17,
        }
    }
}

impl ScenarioConfig {
    pub fn prompts(&self) -> Vec<Label> {
        (0..self.prompt_count)
            .map(|i| Label::new(format!("p{i}")).expect("non-empty"))
            .collect()
    }

    pub fn is_ambiguous(&self, prompt: &str) -> bool {
        self.ambiguity_flags.get(prompt).copied().unwrap_or(false)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.prompt_count == 0 {
            return Err(ScenarioError::NoPrompts);
        }
        self.ambiguous_modes.to_distribution("ambiguous")?;
        self.clear_modes.to_distribution("clear")?;
        let prompts: IndexSet<Label> = self.prompts().into_iter().collect();
        if let Some(unknown) = self.ambiguity_flags.keys().find(|k| !prompts.contains(k.as_str())) {
            return Err(ScenarioError::UnknownPrompt(unknown.clone()));
        }
        Ok(())
    }

    /// Uniform prompt marginal shared by the policy and its corpus.
    pub fn prompt_marginal(&self) -> Result<Distribution, ScenarioError> {
        self.validate()?;
        Ok(Distribution::uniform(self.prompts())?)
    }

    /// Fraction of prompts flagged ambiguous.
    pub fn ambiguous_share(&self) -> f64 {
        let n = self.prompts().iter().filter(|p| self.is_ambiguous(p.as_str())).count();
        n as f64 / self.prompt_count as f64
    }
}

/// Policy kernel whose rows are the configured mode mixes, copied exactly.
pub fn interpretive_policy(cfg: &ScenarioConfig) -> Result<Kernel, ScenarioError> {
    cfg.validate()?;
    let ambiguous = cfg.ambiguous_modes.to_distribution("ambiguous")?;
    let clear = cfg.clear_modes.to_distribution("clear")?;
    let rows = cfg
        .prompts()
        .into_iter()
        .map(|x| {
            let row = if cfg.is_ambiguous(x.as_str()) {
                &ambiguous
            } else {
                &clear
            };
            (x, row.clone())
        })
        .collect();
    Ok(Kernel::new(BehaviorMode::alphabet(), rows)?)
}

/// Per-mode suppression factors in `[0, 1]`; unlisted modes are kept whole.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Suppression(pub BTreeMap<BehaviorMode, f64>);

impl Suppression {
    pub fn none() -> Self {
        Suppression::default()
    }

    pub fn of(mode: BehaviorMode, factor: f64) -> Self {
        Suppression(BTreeMap::from([(mode, factor)]))
    }

    pub fn factor(&self, mode: BehaviorMode) -> f64 {
        self.0.get(&mode).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        for (&mode, &value) in &self.0 {
            if !(0.0..=1.0).contains(&value) {
                return Err(ScenarioError::SuppressionOutOfRange { mode, value });
            }
        }
        Ok(())
    }
}

/// Scales each mode's mass by `1 − suppression[mode]` and renormalizes each
/// row. Rows where no positive-mass mode is suppressed are returned as is.
pub fn corpus_kernel_variant(k: &Kernel, suppression: &Suppression) -> Result<Kernel, ScenarioError> {
    suppression.validate()?;
    let mut modes = Vec::with_capacity(k.alphabet().len());
    for y in k.alphabet() {
        modes.push(BehaviorMode::from_label(y.as_str()).ok_or_else(|| ScenarioError::NotAModeLabel(y.clone()))?);
    }
    let mut rows = Vec::with_capacity(k.rows().len());
    for (x, row) in k.rows() {
        let untouched = row
            .weights()
            .zip(&modes)
            .all(|(w, m)| w == 0.0 || suppression.factor(*m) == 0.0);
        if untouched {
            rows.push((x.clone(), row.clone()));
            continue;
        }
        let scaled: Vec<f64> = row
            .weights()
            .zip(&modes)
            .map(|(w, m)| w * (1.0 - suppression.factor(*m)))
            .collect();
        let d = Distribution::new(row.support().cloned().collect(), scaled, Normalization::Renormalize).map_err(
            |e| match e {
                MeasureError::ZeroTotalMass => ScenarioError::ZeroRowMass(x.clone()),
                other => other.into(),
            },
        )?;
        rows.push((x.clone(), d));
    }
    Ok(Kernel::new(k.alphabet().iter().cloned().collect(), rows)?)
}

/// Loss of `l_max` on the listed modes, per prompt class, and 0 elsewhere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub l_max: f64,
    #[serde(default)]
    pub ambiguous: Vec<BehaviorMode>,
    #[serde(default)]
    pub clear: Vec<BehaviorMode>,
}

impl Default for LossSpec {
    /// Penalizes answering an ambiguous prompt without clarifying.
    fn default() -> Self {
        LossSpec {
            l_max: 1.0,
            ambiguous: vec![BehaviorMode::DirectAnswer],
            clear: vec![],
        }
    }
}

impl LossSpec {
    pub fn to_loss(&self, cfg: &ScenarioConfig) -> Result<BoundedLoss, ScenarioError> {
        if !(self.l_max > 0.0 && self.l_max.is_finite()) {
            return Err(ScenarioError::InvalidLoss(format!(
                "l_max must be positive and finite, got {}",
                self.l_max
            )));
        }
        if self.ambiguous.is_empty() && self.clear.is_empty() {
            return Err(ScenarioError::InvalidLoss("no mode is penalized".into()));
        }
        Ok(BoundedLoss::from_fn(
            cfg.prompts(),
            BehaviorMode::alphabet(),
            0.0,
            self.l_max,
            |x, y| {
                let mode = BehaviorMode::from_label(y.as_str()).expect("mode alphabet");
                let penalized = if cfg.is_ambiguous(x.as_str()) {
                    &self.ambiguous
                } else {
                    &self.clear
                };
                if penalized.contains(&mode) {
                    self.l_max
                } else {
                    0.0
                }
            },
        )?)
    }
}

/// Relative gap `r_gen − r_disc` (as a fraction of `l_max`) that a demo
/// must reach to count as a clear blind spot. A presentation threshold, not
/// a property of the bound.
pub const HEADLINE_GAP_FRACTION: f64 = 0.25;

/// Headline numbers that go with a demo's [`GapReport`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DemoNarrative {
    pub ambiguous_share: f64,
    /// `r_gen − r_disc`, signed.
    pub risk_difference: f64,
    /// The corpus audit reports less risk than deployment incurs.
    pub underestimates: bool,
    pub headline_fraction: f64,
    pub headline_met: bool,
    /// Joint mass of each mode under the policy.
    pub on_policy_mode_mass: BTreeMap<BehaviorMode, f64>,
    /// Joint mass of each mode under the corpus.
    pub off_policy_mode_mass: BTreeMap<BehaviorMode, f64>,
    pub worst_case_gap: f64,
    /// Gap attained by the signed witness (equals the worst case).
    pub signed_witness_gap: f64,
    /// Gap attained by the nonnegative witness (`L_max · TV`).
    pub nonnegative_witness_gap: f64,
}

/// Everything a blind-spot demo computes.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoOutcome {
    pub on_policy: JointLaw,
    pub off_policy: JointLaw,
    pub loss: BoundedLoss,
    pub report: GapReport,
    pub narrative: DemoNarrative,
    pub signed_witness: BoundedLoss,
    pub nonnegative_witness: BoundedLoss,
}

fn mode_mass(j: &JointLaw) -> BTreeMap<BehaviorMode, f64> {
    let mut out: BTreeMap<BehaviorMode, f64> = BehaviorMode::ALL.iter().map(|m| (*m, 0.0)).collect();
    for (_, y, m) in j.cells() {
        if let Some(mode) = BehaviorMode::from_label(y.as_str()) {
            *out.entry(mode).or_default() += m;
        }
    }
    out
}

/// Builds the policy and its suppressed corpus over the same prompts and
/// audits the given loss on both, exactly.
pub fn blind_spot_demo(
    cfg: &ScenarioConfig,
    suppression: &Suppression,
    loss_spec: &LossSpec,
) -> Result<DemoOutcome, ScenarioError> {
    let rho = cfg.prompt_marginal()?;
    let policy = interpretive_policy(cfg)?;
    let corpus = corpus_kernel_variant(&policy, suppression)?;
    let loss = loss_spec.to_loss(cfg)?;
    let p = joint(rho.clone(), policy, Regime::OnPolicy)?;
    let q = joint(rho, corpus, Regime::OffPolicy)?;
    let report = risk::audit(&p, &q, &loss)?;
    let l_max = loss_spec.l_max;
    let signed_witness = risk::witness_loss(&p, &q, l_max, LossClass::Signed)?;
    let nonnegative_witness = risk::witness_loss(&p, &q, l_max, LossClass::Nonnegative)?;
    let risk_difference = report.r_gen - report.r_disc;
    let narrative = DemoNarrative {
        ambiguous_share: cfg.ambiguous_share(),
        risk_difference,
        underestimates: report.r_disc < report.r_gen,
        headline_fraction: HEADLINE_GAP_FRACTION,
        headline_met: risk_difference >= HEADLINE_GAP_FRACTION * l_max,
        on_policy_mode_mass: mode_mass(&p),
        off_policy_mode_mass: mode_mass(&q),
        worst_case_gap: risk::worst_case_gap(&p, &q, l_max)?,
        signed_witness_gap: risk::achieved_gap(&p, &q, &signed_witness)?,
        nonnegative_witness_gap: risk::achieved_gap(&p, &q, &nonnegative_witness)?,
    };
    Ok(DemoOutcome {
        on_policy: p,
        off_policy: q,
        loss,
        report,
        narrative,
        signed_witness,
        nonnegative_witness,
    })
}

/// A complete demo: scenario, suppression, loss, and an optional sampled check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoConfig {
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub suppression: Suppression,
    #[serde(default)]
    pub loss: LossSpec,
    /// Draws per law for the sampled section; omitted means exact only.
    #[serde(default)]
    pub samples: Option<usize>,
}

impl Default for DemoConfig {
    /// The corpus keeps 5% of plain direct answers.
    fn default() -> Self {
        DemoConfig {
            scenario: ScenarioConfig::default(),
            suppression: Suppression::of(BehaviorMode::DirectAnswer, 0.95),
            loss: LossSpec::default(),
            samples: Some(20_000),
        }
    }
}

impl DemoConfig {
    pub fn run(&self) -> Result<DemoOutcome, ScenarioError> {
        blind_spot_demo(&self.scenario, &self.suppression, &self.loss)
    }
}

/// Deterministic dialogue context: `(prompt, response) ↦ next prompt`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContextMap {
    transitions: IndexMap<(Label, Label), Label>,
}

impl ContextMap {
    pub fn new() -> Self {
        ContextMap::default()
    }

    pub fn insert(&mut self, prompt: Label, response: Label, next: Label) {
        self.transitions.insert((prompt, response), next);
    }

    /// Every `(prompt, response)` pair leads to `target`.
    pub fn absorbing(prompts: &[Label], responses: &[Label], target: Label) -> Self {
        let mut map = ContextMap::new();
        for x in prompts {
            for y in responses {
                map.insert(x.clone(), y.clone(), target.clone());
            }
        }
        map
    }

    pub fn next(&self, prompt: &Label, response: &Label) -> Option<&Label> {
        // IndexMap lookups need an owned key pair
        self.transitions.get(&(prompt.clone(), response.clone()))
    }
}

/// One multi-turn rollout: the `(prompt, response)` at each turn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trajectory {
    pub steps: Vec<(Label, Label)>,
}

/// Checks that every reachable positive-mass cell has a row and, before
/// the last turn, a transition.
fn check_chain(k: &Kernel, initial: &Distribution, turns: usize, context: &ContextMap) -> Result<(), ScenarioError> {
    let mut frontier: IndexSet<Label> = initial
        .iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|(x, _)| x.clone())
        .collect();
    let mut seen: IndexSet<(Label, usize)> = IndexSet::new();
    for t in 0..turns {
        let mut next = IndexSet::new();
        for x in &frontier {
            if !seen.insert((x.clone(), t.min(1))) && t > 0 {
                continue;
            }
            let row = k.row(x.as_str()).ok_or_else(|| ScenarioError::MissingRow(x.clone()))?;
            if t + 1 == turns {
                continue;
            }
            for (y, w) in row.iter() {
                if w > 0.0 {
                    let to = context.next(x, y).ok_or_else(|| ScenarioError::MissingTransition {
                        prompt: x.clone(),
                        response: y.clone(),
                    })?;
                    next.insert(to.clone());
                }
            }
        }
        if t + 1 < turns {
            frontier = next;
        }
    }
    Ok(())
}

/// `n` trajectories of `turns` steps. Turn 1 draws `x ∼ initial`; each
/// later prompt is the context successor of the previous turn's cell.
/// Trajectory blocks use the same substreams as [`estimation::sample_joint`],
/// so a single-turn rollout reproduces it draw for draw.
pub fn multiturn_rollout(
    k: &Kernel,
    initial: &Distribution,
    turns: usize,
    context: &ContextMap,
    n: usize,
    seed: u64,
) -> Result<Vec<Trajectory>, ScenarioError> {
    if turns == 0 {
        return Err(ScenarioError::ZeroTurns);
    }
    if n == 0 {
        return Err(ScenarioError::ZeroTrajectories);
    }
    check_chain(k, initial, turns, context)?;
    let prompts = Categorical::new(initial);
    let responses = KernelSampler::new(k);
    let blocks = n.div_ceil(SAMPLE_BLOCK);
    Ok((0..blocks)
        .into_par_iter()
        .flat_map_iter(|b| {
            let mut rng = estimation::substream(seed, b as u64);
            let len = SAMPLE_BLOCK.min(n - b * SAMPLE_BLOCK);
            let (prompts, responses) = (&prompts, &responses);
            (0..len).map(move |_| {
                let mut x = prompts.sample(&mut rng);
                let mut steps = Vec::with_capacity(turns);
                for t in 0..turns {
                    let y = responses.sample(x.as_str(), &mut rng).expect("checked chain");
                    steps.push((x.clone(), y.clone()));
                    if t + 1 < turns {
                        x = context.next(x, y).expect("checked chain");
                    }
                }
                Trajectory { steps }
            })
        })
        .collect())
}

/// Exact prompt marginal at each turn, propagated through the chain.
pub fn turn_prompt_marginals(
    k: &Kernel,
    initial: &Distribution,
    turns: usize,
    context: &ContextMap,
) -> Result<Vec<Distribution>, ScenarioError> {
    if turns == 0 {
        return Err(ScenarioError::ZeroTurns);
    }
    check_chain(k, initial, turns, context)?;
    let mut out = vec![initial.clone()];
    for _ in 1..turns {
        let current = out.last().expect("non-empty");
        let mut next: IndexMap<Label, f64> = IndexMap::new();
        for (x, wx) in current.iter() {
            if wx == 0.0 {
                continue;
            }
            let row = k.row(x.as_str()).expect("checked chain");
            for (y, wy) in row.iter() {
                if wy > 0.0 {
                    let to = context.next(x, y).expect("checked chain");
                    *next.entry(to.clone()).or_insert(0.0) += wx * wy;
                }
            }
        }
        let (ls, ws) = next.into_iter().unzip();
        out.push(Distribution::new(ls, ws, Normalization::Strict)?);
    }
    Ok(out)
}

/// Exact TV between the turn-`t` joints of two policies started from the
/// same prompt law, for every turn.
pub fn exact_turn_tv(
    policy: &Kernel,
    corpus: &Kernel,
    initial: &Distribution,
    turns: usize,
    context: &ContextMap,
) -> Result<Vec<f64>, ScenarioError> {
    let mut alphabet: IndexSet<Label> = policy.alphabet().clone();
    alphabet.extend(corpus.alphabet().iter().cloned());
    let alphabet: Vec<Label> = alphabet.into_iter().collect();
    let (kp, kq) = (policy.with_alphabet(&alphabet)?, corpus.with_alphabet(&alphabet)?);
    let mp = turn_prompt_marginals(&kp, initial, turns, context)?;
    let mq = turn_prompt_marginals(&kq, initial, turns, context)?;
    mp.into_iter()
        .zip(mq)
        .map(|(a, b)| {
            let p = joint(a, kp.clone(), Regime::OnPolicy)?;
            let q = joint(b, kq.clone(), Regime::OffPolicy)?;
            Ok(measure::tv_joint(&p, &q)?)
        })
        .collect()
}

/// The turn-`turn` cells of a set of trajectories (0-based turn index).
pub fn turn_samples(trajectories: &[Trajectory], turn: usize, seed: u64, regime: Regime) -> SampleSet {
    SampleSet::from_records(
        trajectories.iter().filter_map(|t| t.steps.get(turn).cloned()).collect(),
        seed,
        regime,
    )
}

/// Plug-in TV between the empirical turn joints of two rollout sets, per turn.
pub fn empirical_turn_tv(p: &[Trajectory], q: &[Trajectory], turns: usize) -> Vec<f64> {
    (0..turns)
        .map(|t| {
            estimation::plug_in_value(
                &turn_samples(p, t, 0, Regime::OnPolicy),
                &turn_samples(q, t, 0, Regime::OffPolicy),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::sample_joint;

    fn mix(c: f64, d: f64, r: f64, a: f64) -> ModeMix {
        ModeMix {
            clarify: c,
            direct_answer: d,
            refuse: r,
            constrained_alternative: a,
        }
    }

    fn all_ambiguous(n: usize, m: ModeMix) -> ScenarioConfig {
        ScenarioConfig {
            prompt_count: n,
            ambiguous_modes: m,
            clear_modes: mix(0.0, 1.0, 0.0, 0.0),
            ambiguity_flags: (0..n).map(|i| (format!("p{i}"), true)).collect(),
            seed: 1,
        }
    }

    #[test]
    fn policy_rows_copy_mode_mix() {
        let cfg = all_ambiguous(3, mix(0.3, 0.5, 0.1, 0.1));
        let k = interpretive_policy(&cfg).unwrap();
        for x in cfg.prompts() {
            let row = k.row(x.as_str()).unwrap();
            assert_eq!(row.weight("clarify"), 0.3);
            assert_eq!(row.weight("direct_answer"), 0.5);
            assert_eq!(row.weight("refuse"), 0.1);
            assert_eq!(row.weight("constrained_alternative"), 0.1);
        }
        let det = interpretive_policy(&all_ambiguous(2, mix(1.0, 0.0, 0.0, 0.0))).unwrap();
        assert!(det.rows().all(|(_, r)| r.weight("clarify") == 1.0));
    }

    #[test]
    fn config_validation() {
        let bad = all_ambiguous(2, mix(0.5, 0.6, 0.0, 0.0));
        assert!(matches!(
            interpretive_policy(&bad),
            Err(ScenarioError::InvalidProbabilities { .. })
        ));
        let none = ScenarioConfig {
            prompt_count: 0,
            ..ScenarioConfig::default()
        };
        assert_eq!(none.validate(), Err(ScenarioError::NoPrompts));
        let mut stray = ScenarioConfig::default();
        stray.ambiguity_flags.insert("p99".into(), true);
        assert_eq!(stray.validate(), Err(ScenarioError::UnknownPrompt("p99".into())));
    }

    #[test]
    fn rollout_reproduces_mode_frequencies() {
        let cfg = all_ambiguous(1, mix(0.3, 0.5, 0.1, 0.1));
        let k = interpretive_policy(&cfg).unwrap();
        let j = joint(cfg.prompt_marginal().unwrap(), k, Regime::OnPolicy).unwrap();
        let s = sample_joint(&j, 100_000, 5).unwrap();
        for mode in BehaviorMode::ALL {
            let freq = s.records().iter().filter(|(_, y)| y.as_str() == mode.as_str()).count() as f64 / 1e5;
            assert!((freq - cfg.ambiguous_modes.get(mode)).abs() < 0.01, "{mode}: {freq}");
        }
    }

    #[test]
    fn suppression_examples() {
        let cfg = all_ambiguous(2, mix(0.3, 0.5, 0.1, 0.1));
        let k = interpretive_policy(&cfg).unwrap();
        assert_eq!(corpus_kernel_variant(&k, &Suppression::none()).unwrap(), k);

        let q = corpus_kernel_variant(&k, &Suppression::of(BehaviorMode::Clarify, 1.0)).unwrap();
        let row = q.row("p0").unwrap();
        assert_eq!(row.weight("clarify"), 0.0);
        // renormalization oracle: (0.5, 0.1, 0.1) / 0.7
        assert!((row.weight("direct_answer") - 0.5 / 0.7).abs() < 1e-15);
        assert!((row.weight("refuse") - 0.1 / 0.7).abs() < 1e-15);
        assert!((row.weight("constrained_alternative") - 0.1 / 0.7).abs() < 1e-15);

        let no_clarify = interpretive_policy(&all_ambiguous(1, mix(0.0, 0.8, 0.1, 0.1))).unwrap();
        let same = corpus_kernel_variant(&no_clarify, &Suppression::of(BehaviorMode::Clarify, 0.6)).unwrap();
        assert_eq!(same, no_clarify);
    }

    #[test]
    fn suppression_errors() {
        let k = interpretive_policy(&all_ambiguous(1, mix(0.0, 1.0, 0.0, 0.0))).unwrap();
        assert!(matches!(
            corpus_kernel_variant(&k, &Suppression::of(BehaviorMode::Refuse, 1.5)),
            Err(ScenarioError::SuppressionOutOfRange { .. })
        ));
        assert!(matches!(
            corpus_kernel_variant(&k, &Suppression::of(BehaviorMode::DirectAnswer, 1.0)),
            Err(ScenarioError::ZeroRowMass(_))
        ));
        let plain = Kernel::from_rows(vec![(
            Label::new("x").unwrap(),
            Distribution::point_mass(Label::new("text").unwrap()),
        )])
        .unwrap();
        assert!(matches!(
            corpus_kernel_variant(&plain, &Suppression::none()),
            Err(ScenarioError::NotAModeLabel(_))
        ));
    }

    #[test]
    fn zero_suppression_demo_has_no_gap() {
        let out = blind_spot_demo(&ScenarioConfig::default(), &Suppression::none(), &LossSpec::default()).unwrap();
        assert_eq!(out.report.gap, 0.0);
        assert_eq!(out.report.tv, 0.0);
        assert!(!out.narrative.headline_met);
    }

    #[test]
    fn clarify_suppression_gap_closed_form() {
        // loss l_max on every non-clarify response to ambiguous prompts;
        // corpus drops clarification entirely. Gap = P(ambiguous, clarify) · l_max.
        let cfg = ScenarioConfig {
            ambiguous_modes: mix(0.4, 0.4, 0.1, 0.1),
            ..ScenarioConfig::default()
        };
        let spec = LossSpec {
            l_max: 2.0,
            ambiguous: vec![
                BehaviorMode::DirectAnswer,
                BehaviorMode::Refuse,
                BehaviorMode::ConstrainedAlternative,
            ],
            clear: vec![],
        };
        let out = blind_spot_demo(&cfg, &Suppression::of(BehaviorMode::Clarify, 1.0), &spec).unwrap();
        let expected = cfg.ambiguous_share() * 0.4 * 2.0;
        assert!(
            (out.report.gap - expected).abs() < 1e-12,
            "{} vs {expected}",
            out.report.gap
        );
        assert!(out.report.bound_satisfied);
        // here the corpus overstates risk
        assert!(!out.narrative.underestimates);
    }

    #[test]
    fn default_demo_is_a_blind_spot() {
        let cfg = ScenarioConfig::default();
        let supp = Suppression::of(BehaviorMode::DirectAnswer, 0.95);
        let out = blind_spot_demo(&cfg, &supp, &LossSpec::default()).unwrap();
        // hand oracle: r_gen = 0.5·0.7; corpus direct share on ambiguous = 0.035 / 0.335
        let r_gen = 0.5 * 0.7;
        let r_disc = 0.5 * (0.7 * 0.05) / (0.15 + 0.7 * 0.05 + 0.1 + 0.05);
        assert!((out.report.r_gen - r_gen).abs() < 1e-12);
        assert!((out.report.r_disc - r_disc).abs() < 1e-12);
        assert!(out.narrative.headline_met);
        assert!(out.narrative.underestimates);
        assert!(out.report.r_disc <= 0.1);
        assert!(out.report.bound_satisfied);
        assert!((out.narrative.signed_witness_gap - out.narrative.worst_case_gap).abs() < 1e-12);
        assert!((out.narrative.nonnegative_witness_gap - out.report.tv).abs() < 1e-12);
    }

    #[test]
    fn demo_gap_monotone_in_penalized_suppression() {
        let cfg = ScenarioConfig::default();
        let spec = LossSpec::default();
        let mut last = -1.0;
        for i in 0..=20 {
            let s = i as f64 / 20.0;
            let gap = blind_spot_demo(&cfg, &Suppression::of(BehaviorMode::DirectAnswer, s), &spec)
                .unwrap()
                .report
                .gap;
            assert!(gap >= last - 1e-12, "gap fell from {last} to {gap} at s = {s}");
            last = gap;
        }
    }

    fn two_turn_chain() -> (Kernel, Kernel, Distribution, ContextMap) {
        let q0 = Label::new("q0").unwrap();
        let clarified = Label::new("q0_clarified").unwrap();
        let followup = Label::new("q0_followup").unwrap();
        let second = mix(0.0, 0.8, 0.1, 0.1).to_distribution("t").unwrap();
        let policy = Kernel::new(
            BehaviorMode::alphabet(),
            vec![
                (q0.clone(), mix(0.4, 0.5, 0.1, 0.0).to_distribution("t").unwrap()),
                (clarified.clone(), mix(0.0, 1.0, 0.0, 0.0).to_distribution("t").unwrap()),
                (followup.clone(), second),
            ],
        )
        .unwrap();
        let corpus = corpus_kernel_variant(&policy, &Suppression::of(BehaviorMode::Clarify, 1.0)).unwrap();
        let mut ctx = ContextMap::new();
        for mode in BehaviorMode::ALL {
            let to = if mode == BehaviorMode::Clarify {
                &clarified
            } else {
                &followup
            };
            ctx.insert(q0.clone(), mode.label(), to.clone());
            for x in [&clarified, &followup] {
                ctx.insert(x.clone(), mode.label(), x.clone());
            }
        }
        (policy, corpus, Distribution::point_mass(q0), ctx)
    }

    /// Enumerates every path of the chain with its probability.
    fn enumerate_paths(k: &Kernel, x0: &Label, turns: usize, ctx: &ContextMap) -> Vec<(Vec<(Label, Label)>, f64)> {
        let mut paths = vec![(vec![], 1.0, x0.clone())];
        for t in 0..turns {
            let mut next = vec![];
            for (path, p, x) in paths {
                for (y, w) in k.row(x.as_str()).unwrap().iter() {
                    if w == 0.0 {
                        continue;
                    }
                    let mut path = path.clone();
                    path.push((x.clone(), y.clone()));
                    let nx = if t + 1 < turns {
                        ctx.next(&x, y).unwrap().clone()
                    } else {
                        x.clone()
                    };
                    next.push((path, p * w, nx));
                }
            }
            paths = next;
        }
        paths.into_iter().map(|(path, p, _)| (path, p)).collect()
    }

    #[test]
    fn second_turn_marginal_matches_enumeration() {
        let (policy, corpus, init, ctx) = two_turn_chain();
        let tv = exact_turn_tv(&policy, &corpus, &init, 2, &ctx).unwrap();

        // oracle: turn-2 prompt marginals from path enumeration
        let marg = |k: &Kernel| {
            let mut m: IndexMap<String, f64> = IndexMap::new();
            for (path, p) in enumerate_paths(k, &Label::new("q0").unwrap(), 2, &ctx) {
                *m.entry(path[1].0.to_string()).or_default() += p;
            }
            m
        };
        let (mp, mq) = (marg(&policy), marg(&corpus));
        let keys: IndexSet<&String> = mp.keys().chain(mq.keys()).collect();
        let prompt_tv: f64 = 0.5
            * keys
                .iter()
                .map(|k| (mp.get(*k).unwrap_or(&0.0) - mq.get(*k).unwrap_or(&0.0)).abs())
                .sum::<f64>();
        assert!((prompt_tv - 0.4).abs() < 1e-12);

        let exact_p = turn_prompt_marginals(&policy, &init, 2, &ctx).unwrap();
        assert!((exact_p[1].weight("q0_clarified") - mp["q0_clarified"]).abs() < 1e-15);

        // turn-1 joint TV is the row TV at q0
        let row_tv = measure::tv_distributions(policy.row("q0").unwrap(), corpus.row("q0").unwrap());
        assert!((tv[0] - row_tv).abs() < 1e-12);
        // turn-2 joints: oracle enumerates the (x2, y2) cells directly
        let cells = |k: &Kernel| {
            let mut m: IndexMap<(String, String), f64> = IndexMap::new();
            for (path, p) in enumerate_paths(k, &Label::new("q0").unwrap(), 2, &ctx) {
                *m.entry((path[1].0.to_string(), path[1].1.to_string())).or_default() += p;
            }
            m
        };
        let (cp, cq) = (cells(&policy), cells(&corpus));
        let keys: IndexSet<&(String, String)> = cp.keys().chain(cq.keys()).collect();
        let joint_tv: f64 = 0.5
            * keys
                .iter()
                .map(|k| (cp.get(*k).unwrap_or(&0.0) - cq.get(*k).unwrap_or(&0.0)).abs())
                .sum::<f64>();
        assert!((tv[1] - joint_tv).abs() < 1e-12, "{} vs {joint_tv}", tv[1]);

        let p = multiturn_rollout(&policy, &init, 2, &ctx, 50_000, 3).unwrap();
        let q = multiturn_rollout(&corpus, &init, 2, &ctx, 50_000, 4).unwrap();
        let est = empirical_turn_tv(&p, &q, 2);
        assert!((est[1] - tv[1]).abs() < 0.02, "{est:?} vs {tv:?}");
    }

    #[test]
    fn single_turn_rollout_is_sample_joint() {
        let cfg = ScenarioConfig::default();
        let k = interpretive_policy(&cfg).unwrap();
        let rho = cfg.prompt_marginal().unwrap();
        let trajs = multiturn_rollout(&k, &rho, 1, &ContextMap::new(), 5000, 9).unwrap();
        let s = sample_joint(&joint(rho, k, Regime::OnPolicy).unwrap(), 5000, 9).unwrap();
        let flat: Vec<_> = trajs.into_iter().map(|t| t.steps[0].clone()).collect();
        assert_eq!(flat, s.records());
    }

    #[test]
    fn absorbing_context_is_stationary() {
        let cfg = all_ambiguous(1, mix(0.3, 0.5, 0.1, 0.1));
        let k = interpretive_policy(&cfg).unwrap();
        let p0 = Label::new("p0").unwrap();
        let ctx = ContextMap::absorbing(std::slice::from_ref(&p0), &BehaviorMode::alphabet(), p0.clone());
        let marg = turn_prompt_marginals(&k, &Distribution::point_mass(p0.clone()), 5, &ctx).unwrap();
        assert!(marg.iter().all(|m| m.weight("p0") == 1.0));
        let trajs = multiturn_rollout(&k, &Distribution::point_mass(p0), 4, &ctx, 40_000, 2).unwrap();
        for t in 0..4 {
            let clar = trajs.iter().filter(|tr| tr.steps[t].1.as_str() == "clarify").count() as f64 / 40_000.0;
            assert!((clar - 0.3).abs() < 0.015, "turn {t}: {clar}");
        }
    }

    #[test]
    fn rollout_errors_and_determinism() {
        let (policy, _, init, ctx) = two_turn_chain();
        assert_eq!(
            multiturn_rollout(&policy, &init, 0, &ctx, 1, 0),
            Err(ScenarioError::ZeroTurns)
        );
        assert!(matches!(
            multiturn_rollout(&policy, &init, 2, &ContextMap::new(), 10, 0),
            Err(ScenarioError::MissingTransition { .. })
        ));
        let a = multiturn_rollout(&policy, &init, 3, &ctx, 1000, 8).unwrap();
        assert_eq!(a, multiturn_rollout(&policy, &init, 3, &ctx, 1000, 8).unwrap());
    }
}
