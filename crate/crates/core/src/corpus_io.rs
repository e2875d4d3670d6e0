//! Line-oriented file formats and corpus-induced off-policy laws.
//!
//! Corpus files are UTF-8 JSON Lines, one preference pair per line, with
//! keys `prompt`, `candidate_a`, `candidate_b`, `chosen` (`"a"` or `"b"`)
//! and optional `annotator_id`. [`serialize_corpus`] writes exactly that key
//! order in compact form; this is the canonical representation.
//!
//! Distributions, kernels, losses and sample sets use the same one-object-
//! per-line convention (see the `read_*` / `write_*` pairs). Floats are
//! written in shortest round-trip decimal form.

use std::fmt;
use std::io::{self, BufRead, Write};

use indexmap::{IndexMap, IndexSet};
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::discretion::{Choice, DiscretionError, PreferencePair};
use crate::estimation::SampleSet;
use crate::measure::{joint, Distribution, JointLaw, Kernel, Label, MeasureError, Normalization, Regime};
use crate::risk::{BoundedLoss, RiskError};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: missing required field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: field `{field}` appears more than once")]
    DuplicateField { line: usize, field: String },
    #[error("line {line}: unknown field `{field}`")]
    UnknownField { line: usize, field: String },
    #[error("line {line}: field `{field}` {message}")]
    InvalidField {
        line: usize,
        field: &'static str,
        message: String,
    },
    #[error("line {line}: {source}")]
    InvalidRecord { line: usize, source: DiscretionError },
    #[error("line {line}: {source}")]
    InvalidLaw { line: usize, source: MeasureError },
    #[error("line {line}: duplicate entry for {key}")]
    DuplicateEntry { line: usize, key: String },
    #[error("input has no entries")]
    Empty,
    #[error("corpus is empty; an off-policy kernel needs at least one record")]
    EmptyCorpus,
    #[error("prompt `{0}` is in the audit marginal but has no corpus records")]
    MissingPrompt(Label),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Risk(#[from] RiskError),
}

const PAIR_FIELDS: [&str; 5] = ["prompt", "candidate_a", "candidate_b", "chosen", "annotator_id"];

/// JSON object with every key/value kept in order, duplicates included.
struct RawObject(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for RawObject {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct ObjectVisitor;

        impl<'de> Visitor<'de> for ObjectVisitor {
            type Value = RawObject;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<RawObject, A::Error> {
                let mut entries = Vec::new();
                while let Some(key) = map.next_key::<String>()? {
                    entries.push((key, map.next_value::<Value>()?));
                }
                Ok(RawObject(entries))
            }
        }

        deserializer.deserialize_map(ObjectVisitor)
    }
}

fn parse_pair(line: usize, text: &str) -> Result<PreferencePair, CorpusError> {
    let RawObject(entries) = serde_json::from_str(text).map_err(|e| CorpusError::Malformed {
        line,
        message: e.to_string(),
    })?;
    let mut slots: [Option<String>; 5] = Default::default();
    for (key, value) in entries {
        let Some(i) = PAIR_FIELDS.iter().position(|f| *f == key) else {
            return Err(CorpusError::UnknownField { line, field: key });
        };
        if slots[i].is_some() {
            return Err(CorpusError::DuplicateField { line, field: key });
        }
        match value {
            Value::String(s) => slots[i] = Some(s),
            other => {
                return Err(CorpusError::InvalidField {
                    line,
                    field: PAIR_FIELDS[i],
                    message: format!("must be a string, got {other}"),
                })
            }
        }
    }
    let [prompt, a, b, chosen, annotator_id] = slots;
    let label = |slot: Option<String>, field: &'static str| -> Result<Label, CorpusError> {
        let s = slot.ok_or(CorpusError::MissingField { line, field })?;
        Label::new(s).map_err(|_| CorpusError::InvalidField {
            line,
            field,
            message: "must be non-empty".into(),
        })
    };
    let prompt = label(prompt, "prompt")?;
    let candidate_a = label(a, "candidate_a")?;
    let candidate_b = label(b, "candidate_b")?;
    let chosen = match chosen.as_deref() {
        None => return Err(CorpusError::MissingField { line, field: "chosen" }),
        Some("a") => Choice::A,
        Some("b") => Choice::B,
        Some(other) => {
            return Err(CorpusError::InvalidField {
                line,
                field: "chosen",
                message: format!("must be \"a\" or \"b\", got {other:?}"),
            })
        }
    };
    PreferencePair::new(prompt, candidate_a, candidate_b, chosen, annotator_id)
        .map_err(|source| CorpusError::InvalidRecord { line, source })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CorpusMetadata {
    pub source: String,
    pub version: String,
}

/// Parsed preference corpus with a per-prompt index.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceCorpus {
    records: Vec<PreferencePair>,
    line_numbers: Vec<usize>,
    prompt_index: IndexMap<Label, Vec<usize>>,
    pub metadata: CorpusMetadata,
}

impl PreferenceCorpus {
    /// Corpus from in-memory records; line numbers are 1-based positions.
    pub fn new(records: Vec<PreferencePair>, metadata: CorpusMetadata) -> Self {
        let lines = (1..=records.len()).collect();
        Self::with_lines(records, lines, metadata)
    }

    fn with_lines(records: Vec<PreferencePair>, line_numbers: Vec<usize>, metadata: CorpusMetadata) -> Self {
        let mut prompt_index: IndexMap<Label, Vec<usize>> = IndexMap::new();
        for (i, r) in records.iter().enumerate() {
            prompt_index.entry(r.prompt.clone()).or_default().push(i);
        }
        PreferenceCorpus {
            records,
            line_numbers,
            prompt_index,
            metadata,
        }
    }

    pub fn records(&self) -> &[PreferencePair] {
        &self.records
    }

    /// Source line of record `i`.
    pub fn line_of(&self, i: usize) -> usize {
        self.line_numbers[i]
    }

    pub fn prompts(&self) -> impl Iterator<Item = &Label> + '_ {
        self.prompt_index.keys()
    }

    pub fn records_for(&self, prompt: &str) -> impl Iterator<Item = &PreferencePair> + '_ {
        self.prompt_index
            .get(prompt)
            .into_iter()
            .flatten()
            .map(|&i| &self.records[i])
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Streams JSON Lines into a corpus. Blank lines are skipped; every other
/// line must be one valid record.
pub fn parse_corpus<R: BufRead>(reader: R) -> Result<PreferenceCorpus, CorpusError> {
    let mut records = Vec::new();
    let mut lines = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_pair(i + 1, &line)?);
        lines.push(i + 1);
    }
    Ok(PreferenceCorpus::with_lines(records, lines, CorpusMetadata::default()))
}

pub fn parse_corpus_str(text: &str) -> Result<PreferenceCorpus, CorpusError> {
    parse_corpus(text.as_bytes())
}

pub fn write_corpus<W: Write>(mut w: W, corpus: &PreferenceCorpus) -> io::Result<()> {
    for r in corpus.records() {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Canonical text form: one compact record per line, keys in schema order.
pub fn serialize_corpus(corpus: &PreferenceCorpus) -> String {
    let mut buf = Vec::new();
    write_corpus(&mut buf, corpus).expect("writing to memory");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

/// How a corpus induces the off-policy kernel `q(· | x)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusMode {
    /// Each pair contributes both candidates with equal weight.
    #[default]
    BothCandidates,
    /// Each pair contributes only its chosen candidate.
    ChosenOnly,
}

impl fmt::Display for CorpusMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorpusMode::BothCandidates => "both_candidates",
            CorpusMode::ChosenOnly => "chosen_only",
        })
    }
}

/// Off-policy joint built from a corpus, with the prompts it skipped.
#[derive(Clone, Debug, PartialEq)]
pub struct OffPolicyJoint {
    pub joint: JointLaw,
    pub mode: CorpusMode,
    /// Corpus prompts outside `rho`'s support; they do not enter the audit.
    pub ignored_prompts: Vec<Label>,
}

/// Builds `Q = rho ⊗ q` where `q(· | x)` is the empirical distribution of
/// candidate responses recorded at `x`. The prompt marginal is `rho` itself.
pub fn corpus_to_offpolicy(
    corpus: &PreferenceCorpus,
    rho: &Distribution,
    mode: CorpusMode,
) -> Result<OffPolicyJoint, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let ignored_prompts: Vec<Label> = corpus
        .prompts()
        .filter(|x| !rho.contains(x.as_str()))
        .cloned()
        .collect();
    for x in &ignored_prompts {
        log::warn!("corpus prompt `{x}` is outside the audit marginal and is ignored");
    }

    let mut alphabet: IndexSet<Label> = IndexSet::new();
    let mut counts: Vec<(Label, IndexMap<Label, u64>)> = Vec::with_capacity(rho.len());
    for x in rho.support() {
        let mut row: IndexMap<Label, u64> = IndexMap::new();
        for pair in corpus.records_for(x.as_str()) {
            alphabet.insert(pair.candidate_a.clone());
            alphabet.insert(pair.candidate_b.clone());
            let picked: &[&Label] = match mode {
                CorpusMode::BothCandidates => &[&pair.candidate_a, &pair.candidate_b],
                CorpusMode::ChosenOnly => &[pair.chosen_response()],
            };
            for y in picked {
                *row.entry((*y).clone()).or_default() += 1;
            }
        }
        if row.is_empty() {
            return Err(CorpusError::MissingPrompt(x.clone()));
        }
        counts.push((x.clone(), row));
    }

    let rows = counts
        .into_iter()
        .map(|(x, row)| {
            let (ls, ws): (Vec<_>, Vec<_>) = row.into_iter().map(|(y, c)| (y, c as f64)).unzip();
            Ok((x, Distribution::new(ls, ws, Normalization::Renormalize)?))
        })
        .collect::<Result<Vec<_>, MeasureError>>()?;
    let kernel = Kernel::new(alphabet.into_iter().collect(), rows)?;
    Ok(OffPolicyJoint {
        joint: joint(rho.clone(), kernel, Regime::OffPolicy)?,
        mode,
        ignored_prompts,
    })
}

/// One prompt whose marginal weight differs between two laws.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginalMismatch {
    pub prompt: Label,
    /// `None` when the prompt is absent from the first law's support.
    pub p_weight: Option<f64>,
    /// `None` when the prompt is absent from the second law's support.
    pub q_weight: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginalCheck {
    pub passed: bool,
    pub offenders: Vec<MarginalMismatch>,
}

/// Checks that two joints share their prompt marginal: same support, and
/// per-prompt weights within `tol`. Every offending prompt is listed.
pub fn check_equal_marginal(p: &JointLaw, q: &JointLaw, tol: f64) -> MarginalCheck {
    let (mp, mq) = (p.prompt_marginal(), q.prompt_marginal());
    let mut offenders = Vec::new();
    for (x, wp) in mp.iter() {
        if !mq.contains(x.as_str()) {
            offenders.push(MarginalMismatch {
                prompt: x.clone(),
                p_weight: Some(wp),
                q_weight: None,
            });
        } else {
            let wq = mq.weight(x.as_str());
            if (wp - wq).abs() > tol {
                offenders.push(MarginalMismatch {
                    prompt: x.clone(),
                    p_weight: Some(wp),
                    q_weight: Some(wq),
                });
            }
        }
    }
    for (x, wq) in mq.iter() {
        if !mp.contains(x.as_str()) {
            offenders.push(MarginalMismatch {
                prompt: x.clone(),
                p_weight: None,
                q_weight: Some(wq),
            });
        }
    }
    MarginalCheck {
        passed: offenders.is_empty(),
        offenders,
    }
}

// ── law files ──────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightLine {
    label: Label,
    weight: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelLine {
    prompt: Label,
    response: Label,
    weight: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundsLine {
    lower: f64,
    upper: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LossLine {
    prompt: Label,
    response: Label,
    value: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleHeader {
    seed: u64,
    regime: Regime,
    n: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleLine {
    prompt: Label,
    response: Label,
}

/// Non-blank lines with their 1-based numbers, each parsed as `T`.
fn json_lines<R: BufRead, T: for<'de> Deserialize<'de>>(reader: R) -> Result<Vec<(usize, T)>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

fn write_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> io::Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")
}

/// One `{"label", "weight"}` object per line; weights must sum to 1.
pub fn read_distribution<R: BufRead>(reader: R) -> Result<Distribution, CorpusError> {
    let lines: Vec<(usize, WeightLine)> = json_lines(reader)?;
    if lines.is_empty() {
        return Err(CorpusError::Empty);
    }
    let last = lines.last().map_or(0, |l| l.0);
    let (ls, ws) = lines.into_iter().map(|(_, l)| (l.label, l.weight)).unzip();
    Distribution::new(ls, ws, Normalization::Strict).map_err(|source| CorpusError::InvalidLaw { line: last, source })
}

pub fn write_distribution<W: Write>(mut w: W, d: &Distribution) -> io::Result<()> {
    for (label, weight) in d.iter() {
        write_line(
            &mut w,
            &WeightLine {
                label: label.clone(),
                weight,
            },
        )?;
    }
    Ok(())
}

/// One `{"prompt", "response", "weight"}` object per line. Rows and the
/// response alphabet follow first appearance; each row must sum to 1.
pub fn read_kernel<R: BufRead>(reader: R) -> Result<Kernel, CorpusError> {
    let lines: Vec<(usize, KernelLine)> = json_lines(reader)?;
    if lines.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut alphabet: IndexSet<Label> = IndexSet::new();
    let mut rows: IndexMap<Label, (usize, Vec<Label>, Vec<f64>)> = IndexMap::new();
    for (line, l) in lines {
        alphabet.insert(l.response.clone());
        let row = rows.entry(l.prompt.clone()).or_insert((line, Vec::new(), Vec::new()));
        if row.1.contains(&l.response) {
            return Err(CorpusError::DuplicateEntry {
                line,
                key: format!("({}, {})", l.prompt, l.response),
            });
        }
        row.0 = line;
        row.1.push(l.response);
        row.2.push(l.weight);
    }
    let rows = rows
        .into_iter()
        .map(|(x, (line, ls, ws))| {
            Distribution::new(ls, ws, Normalization::Strict)
                .map(|d| (x, d))
                .map_err(|source| CorpusError::InvalidLaw { line, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Kernel::new(alphabet.into_iter().collect(), rows)?)
}

pub fn write_kernel<W: Write>(mut w: W, k: &Kernel) -> io::Result<()> {
    for (prompt, row) in k.rows() {
        for (response, weight) in row.iter() {
            write_line(
                &mut w,
                &KernelLine {
                    prompt: prompt.clone(),
                    response: response.clone(),
                    weight,
                },
            )?;
        }
    }
    Ok(())
}

/// A `{"lower", "upper"}` header line, then one
/// `{"prompt", "response", "value"}` object per cell of a dense table.
pub fn read_loss<R: BufRead>(reader: R) -> Result<BoundedLoss, CorpusError> {
    let mut lines = reader
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()));
    let (header_no, header) = lines.next().ok_or(CorpusError::Empty)?;
    let bounds: BoundsLine = serde_json::from_str(&header?).map_err(|e| CorpusError::Malformed {
        line: header_no + 1,
        message: format!("expected bounds header: {e}"),
    })?;
    let mut cells = Vec::new();
    for (i, line) in lines {
        let l: LossLine = serde_json::from_str(&line?).map_err(|e| CorpusError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        cells.push((l.prompt, l.response, l.value));
    }
    Ok(BoundedLoss::from_cells(cells, bounds.lower, bounds.upper)?)
}

pub fn write_loss<W: Write>(mut w: W, loss: &BoundedLoss) -> io::Result<()> {
    write_line(
        &mut w,
        &BoundsLine {
            lower: loss.lower(),
            upper: loss.upper(),
        },
    )?;
    for (prompt, response, value) in loss.cells() {
        write_line(
            &mut w,
            &LossLine {
                prompt: prompt.clone(),
                response: response.clone(),
                value,
            },
        )?;
    }
    Ok(())
}

/// A `{"seed", "regime", "n"}` header line, then one `{"prompt", "response"}`
/// object per draw.
pub fn read_sample_set<R: BufRead>(reader: R) -> Result<SampleSet, CorpusError> {
    let lines: Vec<(usize, Value)> = json_lines(reader)?;
    let mut lines = lines.into_iter();
    let (header_no, header) = lines.next().ok_or(CorpusError::Empty)?;
    let header: SampleHeader = serde_json::from_value(header).map_err(|e| CorpusError::Malformed {
        line: header_no,
        message: format!("expected sample header: {e}"),
    })?;
    let mut records = Vec::with_capacity(header.n);
    let mut last = header_no;
    for (line, value) in lines {
        let r: SampleLine = serde_json::from_value(value).map_err(|e| CorpusError::Malformed {
            line,
            message: e.to_string(),
        })?;
        records.push((r.prompt, r.response));
        last = line;
    }
    if records.len() != header.n {
        return Err(CorpusError::Malformed {
            line: last,
            message: format!("header declares {} records, found {}", header.n, records.len()),
        });
    }
    Ok(SampleSet::from_records(records, header.seed, header.regime))
}

pub fn write_sample_set<W: Write>(mut w: W, s: &SampleSet) -> io::Result<()> {
    write_line(
        &mut w,
        &SampleHeader {
            seed: s.seed(),
            regime: s.regime(),
            n: s.len(),
        },
    )?;
    for (prompt, response) in s.records() {
        write_line(
            &mut w,
            &SampleLine {
                prompt: prompt.clone(),
                response: response.clone(),
            },
        )?;
    }
    Ok(())
}
