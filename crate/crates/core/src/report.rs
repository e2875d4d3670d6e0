//! Deterministic audit reports in a text and a structured (JSON) form.
//!
//! Every report opens with a provenance header naming the schema, the
//! command, how `Q` was built, the loss class, the seed and the numeric
//! tolerance used for identity checks. Output depends only on the inputs,
//! so two runs with the same seed are byte-identical.

use std::fmt::Write as _;

use serde::Serialize;

use crate::discretion::{Category, CategorySummary, SupremacyMatrix, Verdict};
use crate::estimation::{self, Estimate, SampledAudit};
use crate::measure::IDENTITY_TOL;
use crate::risk::{BoundedLoss, GapReport, LossClass};
use crate::scenario::{DemoConfig, DemoNarrative, DemoOutcome, ScenarioError};

pub const SCHEMA: &str = "blindspot-report/1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReportFormat {
    #[default]
    Text,
    Structured,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Provenance {
    pub schema: &'static str,
    pub command: String,
    /// How the off-policy law was obtained, e.g. `chosen_only`.
    pub q_mode: Option<String>,
    pub loss_class: Option<LossClass>,
    pub seed: Option<u64>,
    pub tolerance: f64,
}

impl Provenance {
    pub fn new(command: impl Into<String>, tolerance: f64) -> Self {
        Provenance {
            schema: SCHEMA,
            command: command.into(),
            q_mode: None,
            loss_class: None,
            seed: None,
            tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossCell {
    pub prompt: String,
    pub response: String,
    pub value: f64,
}

/// A loss written out cell by cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossTable {
    pub lower: f64,
    pub upper: f64,
    pub cells: Vec<LossCell>,
}

impl From<&BoundedLoss> for LossTable {
    fn from(loss: &BoundedLoss) -> Self {
        LossTable {
            lower: loss.lower(),
            upper: loss.upper(),
            cells: loss
                .cells()
                .map(|(x, y, v)| LossCell {
                    prompt: x.to_string(),
                    response: y.to_string(),
                    value: v,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DemoReport {
    pub config: DemoConfig,
    pub exact: GapReport,
    pub narrative: DemoNarrative,
    pub signed_witness: LossTable,
    pub nonnegative_witness: LossTable,
    pub sampled: Option<SampledAudit>,
}

impl DemoReport {
    pub fn new(config: DemoConfig, outcome: &DemoOutcome, sampled: Option<SampledAudit>) -> Self {
        DemoReport {
            config,
            exact: outcome.report.clone(),
            narrative: outcome.narrative.clone(),
            signed_witness: (&outcome.signed_witness).into(),
            nonnegative_witness: (&outcome.nonnegative_witness).into(),
            sampled,
        }
    }
}

/// Runs a demo, plus its sampled section when `config.samples` is set, and
/// wraps the result in a report. The sampled section draws with the
/// scenario seed.
pub fn demo_report(config: DemoConfig, confidence: f64) -> Result<Report, ScenarioError> {
    let outcome = config.run()?;
    let seed = config.scenario.seed;
    let sampled = match config.samples {
        Some(n) => Some(estimation::sampled_audit(
            &outcome.on_policy,
            &outcome.off_policy,
            &outcome.loss,
            n,
            seed,
            confidence,
        )?),
        None => None,
    };
    let mut prov = Provenance::new("demo", IDENTITY_TOL);
    prov.q_mode = Some("suppressed_policy".into());
    prov.loss_class = Some(outcome.loss.class());
    prov.seed = Some(seed);
    Ok(Report::new(
        prov,
        ReportBody::Demo(Box::new(DemoReport::new(config, &outcome, sampled))),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairOutcome {
    pub line: usize,
    pub prompt: String,
    pub category: Category,
    pub verdicts: Vec<Verdict>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassifyReport {
    pub judges: Vec<String>,
    pub summary: CategorySummary,
    pub supremacy: SupremacyMatrix,
    pub pairs: Vec<PairOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReportBody {
    ExactAudit(GapReport),
    SampledAudit(SampledAudit),
    Demo(Box<DemoReport>),
    Classify(ClassifyReport),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub provenance: Provenance,
    pub result: ReportBody,
}

/// Shortest decimal that round-trips to `x`.
fn num(x: f64) -> String {
    format!("{x}")
}

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map_or_else(|| "-".to_string(), |v| v.to_string())
}

fn class_name(c: LossClass) -> &'static str {
    match c {
        LossClass::Nonnegative => "nonnegative",
        LossClass::Signed => "signed",
    }
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

struct Table(String);

impl Table {
    fn row(&mut self, key: &str, value: impl AsRef<str>) {
        writeln!(self.0, "{key:<24}{}", value.as_ref()).expect("writing to a String");
    }

    fn blank(&mut self) {
        self.0.push('\n');
    }

    fn heading(&mut self, title: &str) {
        writeln!(self.0, "[{title}]").expect("writing to a String");
    }
}

fn estimate(e: &Estimate) -> String {
    format!("{}  [{}, {}]", num(e.value), num(e.ci_low), num(e.ci_high))
}

fn exact_rows(t: &mut Table, r: &GapReport) {
    t.row("r_gen", num(r.r_gen));
    t.row("r_disc", num(r.r_disc));
    t.row("gap", num(r.gap));
    t.row("tv", num(r.tv));
    t.row("l_max", num(r.l_max));
    t.row("loss_class", class_name(r.loss_class));
    t.row("bound", num(r.bound));
    t.row("bound_satisfied", yes_no(r.bound_satisfied));
    t.row("slack", num(r.slack));
}

fn sampled_rows(t: &mut Table, s: &SampledAudit) {
    t.row("n", s.r_gen.n.to_string());
    t.row("confidence", format!("{}", s.r_gen.confidence));
    t.row("seed_p", s.seed_p.to_string());
    t.row("seed_q", s.seed_q.to_string());
    t.row("r_gen", estimate(&s.r_gen));
    t.row("r_disc", estimate(&s.r_disc));
    t.row(
        "risk_difference",
        format!(
            "{}  [{}, {}]",
            num(s.risk_difference),
            num(s.risk_difference_ci.0),
            num(s.risk_difference_ci.1)
        ),
    );
    t.row("tv_plug_in", estimate(&s.tv_plug_in));
    t.row("tv_estimator", "plug-in with percentile bootstrap (added estimator)");
    t.row("bound_plug_in", num(s.bound_plug_in));
}

fn verdict_char(v: Verdict) -> char {
    match v {
        Verdict::PrefersA => 'a',
        Verdict::PrefersB => 'b',
        Verdict::NoPreference => '-',
    }
}

fn category_name(c: Category) -> &'static str {
    match c {
        Category::Consensus => "consensus",
        Category::Conflict => "conflict",
        Category::Indifference => "indifference",
    }
}

impl Report {
    pub fn new(provenance: Provenance, result: ReportBody) -> Self {
        Report { provenance, result }
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Text => self.to_text(),
            ReportFormat::Structured => self.to_json(),
        }
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    pub fn to_text(&self) -> String {
        let mut t = Table(String::new());
        let p = &self.provenance;
        t.row("schema", p.schema);
        t.row("command", &p.command);
        t.row("q_mode", opt(p.q_mode.as_deref()));
        t.row("loss_class", opt(p.loss_class.map(class_name)));
        t.row("seed", opt(p.seed));
        t.row("tolerance", format!("{:e}", p.tolerance));
        t.blank();
        match &self.result {
            ReportBody::ExactAudit(r) => {
                t.heading("exact audit");
                exact_rows(&mut t, r);
            }
            ReportBody::SampledAudit(s) => {
                t.heading("sampled audit");
                sampled_rows(&mut t, s);
            }
            ReportBody::Demo(d) => demo_text(&mut t, d),
            ReportBody::Classify(c) => classify_text(&mut t, c),
        }
        t.0
    }
}

fn demo_text(t: &mut Table, d: &DemoReport) {
    let n = &d.narrative;
    t.heading("scenario");
    t.row("prompts", d.config.scenario.prompt_count.to_string());
    t.row("ambiguous_share", num(n.ambiguous_share));
    for (mode, s) in &d.config.suppression.0 {
        t.row(&format!("suppress {mode}"), num(*s));
    }
    t.blank();
    t.heading("mode mass (policy / corpus)");
    for (mode, m) in &n.on_policy_mode_mass {
        let q = n.off_policy_mode_mass.get(mode).copied().unwrap_or(0.0);
        t.row(mode.as_str(), format!("{}  {}", num(*m), num(q)));
    }
    t.blank();
    t.heading("exact audit");
    exact_rows(t, &d.exact);
    t.blank();
    t.heading("summary");
    t.row("risk_difference", num(n.risk_difference));
    t.row("corpus_underestimates", yes_no(n.underestimates));
    t.row("headline_threshold", num(n.headline_fraction * d.exact.l_max));
    t.row("headline_met", yes_no(n.headline_met));
    t.row("worst_case_gap", num(n.worst_case_gap));
    t.row("signed_witness_gap", num(n.signed_witness_gap));
    t.row("nonnegative_witness_gap", num(n.nonnegative_witness_gap));
    for (title, w) in [
        ("signed witness", &d.signed_witness),
        ("nonnegative witness", &d.nonnegative_witness),
    ] {
        t.blank();
        t.heading(title);
        witness_rows(t, w);
    }
    if let Some(s) = &d.sampled {
        t.blank();
        t.heading("sampled audit");
        sampled_rows(t, s);
    }
}

/// One line per prompt listing `response=value` for nonzero cells.
fn witness_rows(t: &mut Table, w: &LossTable) {
    let mut prompts: Vec<&str> = Vec::new();
    for c in &w.cells {
        if !prompts.contains(&c.prompt.as_str()) {
            prompts.push(&c.prompt);
        }
    }
    for x in prompts {
        let cells: Vec<String> = w
            .cells
            .iter()
            .filter(|c| c.prompt == x && c.value != 0.0)
            .map(|c| format!("{}={}", c.response, num(c.value)))
            .collect();
        t.row(
            x,
            if cells.is_empty() {
                "0".to_string()
            } else {
                cells.join(" ")
            },
        );
    }
}

fn classify_text(t: &mut Table, c: &ClassifyReport) {
    let s = &c.summary;
    let rate = |r: Option<crate::discretion::Rate>| {
        r.map_or_else(
            || "-".to_string(),
            |r| format!("{}/{} = {}", r.hits, r.total, num(r.value())),
        )
    };
    t.heading("judges");
    t.row("names", c.judges.join(", "));
    t.blank();
    t.heading("partition");
    t.row("total", s.total.to_string());
    t.row("consensus", s.consensus.to_string());
    t.row("conflict", s.conflict.to_string());
    t.row("indifference", s.indifference.to_string());
    t.row("discretionary_share", rate(s.discretionary_share));
    t.row("arbitrariness", rate(s.arbitrariness));
    t.blank();
    t.heading("supremacy (row beats column)");
    for (i, name) in c.supremacy.judges.iter().enumerate() {
        let cells: Vec<String> = (0..c.supremacy.judges.len())
            .map(|j| {
                c.supremacy
                    .get(i, j)
                    .map_or_else(|| "-".to_string(), |r| format!("{}/{}", r.hits, r.total))
            })
            .collect();
        t.row(name, cells.join("  "));
    }
    t.blank();
    t.heading("pairs");
    for p in &c.pairs {
        let v: String = p.verdicts.iter().map(|v| verdict_char(*v)).collect();
        t.row(
            &format!("line {}", p.line),
            format!("{:<13}{}  {}", category_name(p.category), v, p.prompt),
        );
    }
}
