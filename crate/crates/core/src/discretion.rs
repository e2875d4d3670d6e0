//! Principle judges over preference pairs and the discretion metrics built
//! on them.
//!
//! Each judge returns a verdict on a pair. A pair is *consensus* when at
//! least one judge expresses a preference and all expressed preferences
//! agree, *conflict* when two judges prefer opposite candidates, and
//! *indifference* when every judge abstains. Abstention is how a judge says
//! the principle is not relevant to the pair.
//!
//! Judges are deterministic rules over structured candidate features. A
//! candidate text may start with a behavior-mode tag such as `[clarify]`
//! and may carry flag tokens such as `#harmful`; the remaining words form
//! the body whose length the length rule compares.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::measure::{Label, MeasureError};
use crate::scenario::BehaviorMode;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiscretionError {
    #[error("candidates must differ (both are `{0}`)")]
    IdenticalCandidates(Label),
    #[error("at least one judge is required")]
    NoJudges,
    #[error("duplicate judge name `{0}`")]
    DuplicateJudge(String),
    #[error("unknown judge `{name}`; available: {}", .available.join(", "))]
    UnknownJudge { name: String, available: Vec<String> },
    #[error("invalid judge rules: {0}")]
    InvalidRules(String),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Which candidate the final label picked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Choice {
    #[serde(rename = "a")]
    A,
    #[serde(rename = "b")]
    B,
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Choice::A => "a",
            Choice::B => "b",
        })
    }
}

/// One labeled comparison between two candidate responses to a prompt.
///
/// Field order is the canonical serialization order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PreferencePair {
    pub prompt: Label,
    pub candidate_a: Label,
    pub candidate_b: Label,
    pub chosen: Choice,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub annotator_id: Option<String>,
}

impl PreferencePair {
    pub fn new(
        prompt: Label,
        candidate_a: Label,
        candidate_b: Label,
        chosen: Choice,
        annotator_id: Option<String>,
    ) -> Result<Self, DiscretionError> {
        if candidate_a == candidate_b {
            return Err(DiscretionError::IdenticalCandidates(candidate_a));
        }
        Ok(PreferencePair {
            prompt,
            candidate_a,
            candidate_b,
            chosen,
            annotator_id,
        })
    }

    pub fn candidate(&self, side: Choice) -> &Label {
        match side {
            Choice::A => &self.candidate_a,
            Choice::B => &self.candidate_b,
        }
    }

    pub fn chosen_response(&self) -> &Label {
        self.candidate(self.chosen)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    PrefersA,
    PrefersB,
    NoPreference,
}

impl Verdict {
    fn side(self) -> Option<Choice> {
        match self {
            Verdict::PrefersA => Some(Choice::A),
            Verdict::PrefersB => Some(Choice::B),
            Verdict::NoPreference => None,
        }
    }

    fn from_ordering(ord: std::cmp::Ordering) -> Self {
        match ord {
            std::cmp::Ordering::Greater => Verdict::PrefersA,
            std::cmp::Ordering::Less => Verdict::PrefersB,
            std::cmp::Ordering::Equal => Verdict::NoPreference,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Consensus,
    Conflict,
    Indifference,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Consensus => "consensus",
            Category::Conflict => "conflict",
            Category::Indifference => "indifference",
        })
    }
}

/// Structured view of a candidate text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateFeatures {
    pub mode: Option<BehaviorMode>,
    pub flags: BTreeSet<String>,
    /// Word count of the body, excluding the mode tag and flags.
    pub length: usize,
}

impl CandidateFeatures {
    pub fn of(text: &str) -> Self {
        let mut words = text.split_whitespace().peekable();
        let mode = words
            .peek()
            .and_then(|w| w.strip_prefix('[')?.strip_suffix(']'))
            .and_then(BehaviorMode::from_label);
        if mode.is_some() {
            words.next();
        }
        let mut flags = BTreeSet::new();
        let mut length = 0;
        for w in words {
            match w.strip_prefix('#') {
                Some(flag) if !flag.is_empty() => {
                    flags.insert(flag.to_owned());
                }
                _ => length += 1,
            }
        }
        CandidateFeatures { mode, flags, length }
    }
}

/// A principle, operationalized as a deterministic verdict on a pair.
pub trait PrincipleJudge {
    fn name(&self) -> &str;
    fn verdict(&self, pair: &PreferencePair) -> Verdict;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthPreference {
    Longer,
    Shorter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagPreference {
    With,
    Without,
}

/// Rule kinds available to [`RuleJudge`]; also the schema of rule files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rule {
    /// Prefers the longer (or shorter) body; abstains on equal length.
    Length { prefer: LengthPreference },
    /// Prefers the mode listed earlier; abstains when either candidate is
    /// untagged or unranked, or both share a rank.
    ModeRank { ranking: Vec<BehaviorMode> },
    /// Prefers the candidate with (or without) `flag`; abstains when both
    /// or neither carry it.
    Flag { flag: String, prefer: FlagPreference },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleJudge {
    pub name: String,
    #[serde(flatten)]
    pub rule: Rule,
}

impl PrincipleJudge for RuleJudge {
    fn name(&self) -> &str {
        &self.name
    }

    fn verdict(&self, pair: &PreferencePair) -> Verdict {
        let a = CandidateFeatures::of(pair.candidate_a.as_str());
        let b = CandidateFeatures::of(pair.candidate_b.as_str());
        match &self.rule {
            Rule::Length { prefer } => {
                let ord = a.length.cmp(&b.length);
                Verdict::from_ordering(match prefer {
                    LengthPreference::Longer => ord,
                    LengthPreference::Shorter => ord.reverse(),
                })
            }
            Rule::ModeRank { ranking } => {
                let rank = |f: &CandidateFeatures| f.mode.and_then(|m| ranking.iter().position(|r| *r == m));
                match (rank(&a), rank(&b)) {
                    // lower position is better
                    (Some(ra), Some(rb)) => Verdict::from_ordering(rb.cmp(&ra)),
                    _ => Verdict::NoPreference,
                }
            }
            Rule::Flag { flag, prefer } => {
                let (fa, fb) = (a.flags.contains(flag), b.flags.contains(flag));
                match (fa == fb, prefer) {
                    (true, _) => Verdict::NoPreference,
                    (false, FlagPreference::With) if fa => Verdict::PrefersA,
                    (false, FlagPreference::With) => Verdict::PrefersB,
                    (false, FlagPreference::Without) if fa => Verdict::PrefersB,
                    (false, FlagPreference::Without) => Verdict::PrefersA,
                }
            }
        }
    }
}

/// Built-in judges: `length` (longer body), `helpfulness` (mode ranking
/// direct answer > constrained alternative > clarify > refuse) and
/// `harm-avoidance` (prefers candidates without `#harmful`).
pub fn builtin_judges() -> Vec<RuleJudge> {
    vec![
        RuleJudge {
            name: "length".into(),
            rule: Rule::Length {
                prefer: LengthPreference::Longer,
            },
        },
        RuleJudge {
            name: "helpfulness".into(),
            rule: Rule::ModeRank {
                ranking: vec![
                    BehaviorMode::DirectAnswer,
                    BehaviorMode::ConstrainedAlternative,
                    BehaviorMode::Clarify,
                    BehaviorMode::Refuse,
                ],
            },
        },
        RuleJudge {
            name: "harm-avoidance".into(),
            rule: Rule::Flag {
                flag: "harmful".into(),
                prefer: FlagPreference::Without,
            },
        },
    ]
}

/// Parses a JSON array of [`RuleJudge`] definitions.
pub fn parse_rule_judges(json: &str) -> Result<Vec<RuleJudge>, DiscretionError> {
    serde_json::from_str(json).map_err(|e| DiscretionError::InvalidRules(e.to_string()))
}

/// Selects judges by name from `library`, in the requested order.
pub fn select_judges(library: &[RuleJudge], names: &[&str]) -> Result<Vec<RuleJudge>, DiscretionError> {
    names
        .iter()
        .map(|name| {
            library
                .iter()
                .find(|j| j.name == *name)
                .cloned()
                .ok_or_else(|| DiscretionError::UnknownJudge {
                    name: (*name).to_owned(),
                    available: library.iter().map(|j| j.name.clone()).collect(),
                })
        })
        .collect()
}

/// Non-empty judge list with unique names.
pub struct JudgeSet {
    judges: Vec<Box<dyn PrincipleJudge + Send + Sync>>,
}

impl fmt::Debug for JudgeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}

impl JudgeSet {
    pub fn new(judges: Vec<Box<dyn PrincipleJudge + Send + Sync>>) -> Result<Self, DiscretionError> {
        if judges.is_empty() {
            return Err(DiscretionError::NoJudges);
        }
        let mut seen = BTreeSet::new();
        for j in &judges {
            if !seen.insert(j.name().to_owned()) {
                return Err(DiscretionError::DuplicateJudge(j.name().to_owned()));
            }
        }
        Ok(JudgeSet { judges })
    }

    pub fn from_rules(rules: Vec<RuleJudge>) -> Result<Self, DiscretionError> {
        JudgeSet::new(
            rules
                .into_iter()
                .map(|r| Box::new(r) as Box<dyn PrincipleJudge + Send + Sync>)
                .collect(),
        )
    }

    pub fn names(&self) -> impl Iterator<Item = &str> + '_ {
        self.judges.iter().map(|j| j.name())
    }

    pub fn len(&self) -> usize {
        self.judges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.judges.is_empty()
    }

    pub fn verdicts(&self, pair: &PreferencePair) -> Vec<Verdict> {
        self.judges.iter().map(|j| j.verdict(pair)).collect()
    }
}

/// Category plus, for consensus pairs, the side the judges agree on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Classification {
    pub category: Category,
    pub consensus_side: Option<Choice>,
}

pub fn classify_verdicts(verdicts: &[Verdict]) -> Classification {
    let mut side = None;
    for v in verdicts.iter().filter_map(|v| v.side()) {
        match side {
            None => side = Some(v),
            Some(s) if s != v => {
                return Classification {
                    category: Category::Conflict,
                    consensus_side: None,
                }
            }
            Some(_) => {}
        }
    }
    match side {
        Some(s) => Classification {
            category: Category::Consensus,
            consensus_side: Some(s),
        },
        None => Classification {
            category: Category::Indifference,
            consensus_side: None,
        },
    }
}

pub fn classify_pair(pair: &PreferencePair, judges: &JudgeSet) -> Category {
    classify_verdicts(&judges.verdicts(pair)).category
}

/// Exact count ratio `hits / total`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rate {
    pub hits: u64,
    pub total: u64,
}

impl Rate {
    pub fn value(&self) -> f64 {
        self.hits as f64 / self.total as f64
    }

    fn of(hits: u64, total: u64) -> Option<Rate> {
        (total > 0).then_some(Rate { hits, total })
    }
}

impl Serialize for Rate {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut s = serializer.serialize_struct("Rate", 3)?;
        s.serialize_field("hits", &self.hits)?;
        s.serialize_field("total", &self.total)?;
        s.serialize_field("value", &self.value())?;
        s.end()
    }
}

/// Pairwise principle supremacy. Entry `(i, j)` is the share of pairs on
/// which judges `i` and `j` prefer opposite candidates and the label sides
/// with `i`; `None` where the two never disagree (including the diagonal).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SupremacyMatrix {
    pub judges: Vec<String>,
    pub entries: Vec<Vec<Option<Rate>>>,
}

impl SupremacyMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<Rate> {
        self.entries[i][j]
    }
}

pub fn supremacy_matrix(pairs: &[PreferencePair], judges: &JudgeSet) -> SupremacyMatrix {
    let k = judges.len();
    let mut wins = vec![vec![0u64; k]; k];
    let mut disputes = vec![vec![0u64; k]; k];
    for pair in pairs {
        let sides: Vec<Option<Choice>> = judges.verdicts(pair).into_iter().map(Verdict::side).collect();
        for i in 0..k {
            for j in 0..k {
                if let (Some(si), Some(sj)) = (sides[i], sides[j]) {
                    if si != sj {
                        disputes[i][j] += 1;
                        if pair.chosen == si {
                            wins[i][j] += 1;
                        }
                    }
                }
            }
        }
    }
    SupremacyMatrix {
        judges: judges.names().map(str::to_owned).collect(),
        entries: (0..k)
            .map(|i| (0..k).map(|j| Rate::of(wins[i][j], disputes[i][j])).collect())
            .collect(),
    }
}

/// Share of consensus pairs whose label contradicts the consensus side;
/// `None` when there are no consensus pairs.
pub fn arbitrariness_rate(pairs: &[PreferencePair], judges: &JudgeSet) -> Option<Rate> {
    let mut consensus = 0;
    let mut against = 0;
    for pair in pairs {
        if let Some(side) = classify_verdicts(&judges.verdicts(pair)).consensus_side {
            consensus += 1;
            if pair.chosen != side {
                against += 1;
            }
        }
    }
    Rate::of(against, consensus)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CategorySummary {
    pub total: u64,
    pub consensus: u64,
    pub conflict: u64,
    pub indifference: u64,
    /// `(conflict + indifference) / total`: pairs the principles leave open.
    pub discretionary_share: Option<Rate>,
    pub arbitrariness: Option<Rate>,
}

impl CategorySummary {
    pub fn count(&self, category: Category) -> u64 {
        match category {
            Category::Consensus => self.consensus,
            Category::Conflict => self.conflict,
            Category::Indifference => self.indifference,
        }
    }
}

pub fn category_summary(pairs: &[PreferencePair], judges: &JudgeSet) -> CategorySummary {
    let mut counts = [0u64; 3];
    let mut against = 0;
    for pair in pairs {
        let c = classify_verdicts(&judges.verdicts(pair));
        counts[c.category as usize] += 1;
        if c.consensus_side.is_some_and(|s| s != pair.chosen) {
            against += 1;
        }
    }
    let [consensus, conflict, indifference] = counts;
    let total = pairs.len() as u64;
    CategorySummary {
        total,
        consensus,
        conflict,
        indifference,
        discretionary_share: Rate::of(conflict + indifference, total),
        arbitrariness: Rate::of(against, consensus),
    }
}
