//! Sample-based counterparts of the exact quantities.
//!
//! # Randomness
//!
//! All draws come from ChaCha8 seeded with [`SeedableRng::seed_from_u64`].
//! Independent substreams are the ChaCha stream ids of that seed: stream `b`
//! of seed `s` is `ChaCha8Rng::seed_from_u64(s)` followed by
//! `set_stream(b)`. Sampling splits its work into blocks of
//! [`SAMPLE_BLOCK`] draws and gives block `b` stream `b`, so results are
//! identical whether blocks run sequentially or in parallel.

use indexmap::IndexMap;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Binomial;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::measure::{Distribution, JointLaw, Kernel, Label, MeasureError, Normalization, Regime};
use crate::risk::BoundedLoss;

/// Draws per independent substream.
pub const SAMPLE_BLOCK: usize = 4096;

/// Default number of bootstrap resamples for [`plug_in_tv`].
pub const DEFAULT_RESAMPLES: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("sample size must be at least 1")]
    ZeroSamples,
    #[error("sample set is empty")]
    EmptySample,
    #[error("confidence must lie strictly between 0 and 1, got {0}")]
    InvalidConfidence(f64),
    #[error("loss does not cover sampled cell ({prompt}, {response})")]
    Uncovered { prompt: Label, response: Label },
    #[error("sampled label `{0}` is outside the given alphabet")]
    UnknownLabel(Label),
    #[error("prompt `{0}` has no observations")]
    NoObservations(Label),
    #[error("kernel has no row for prompt `{0}`")]
    MissingRow(Label),
    #[error("bootstrap needs at least one resample")]
    NoResamples,
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// The ChaCha8 substream `stream` of `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Observed `(prompt, response)` draws plus the seed and regime that made them.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    records: Vec<(Label, Label)>,
    seed: u64,
    regime: Regime,
}

impl SampleSet {
    pub fn from_records(records: Vec<(Label, Label)>, seed: u64, regime: Regime) -> Self {
        SampleSet { records, seed, regime }
    }

    pub fn records(&self) -> &[(Label, Label)] {
        &self.records
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Cell counts in first-appearance order.
    pub fn counts(&self) -> IndexMap<(&Label, &Label), u64> {
        let mut counts = IndexMap::new();
        for (x, y) in &self.records {
            *counts.entry((x, y)).or_insert(0) += 1;
        }
        counts
    }
}

/// Point estimate with a confidence interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    pub confidence: f64,
}

impl Estimate {
    pub fn half_width(&self) -> f64 {
        0.5 * (self.ci_high - self.ci_low)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.ci_low <= x && x <= self.ci_high
    }
}

/// Categorical sampler over an ordered distribution.
pub(crate) struct Categorical<'a> {
    labels: Vec<&'a Label>,
    index: WeightedIndex<f64>,
}

impl<'a> Categorical<'a> {
    pub(crate) fn new(d: &'a Distribution) -> Self {
        let labels = d.support().collect();
        let index = WeightedIndex::new(d.weights()).expect("valid distributions have positive mass");
        Categorical { labels, index }
    }

    pub(crate) fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &'a Label {
        self.labels[self.index.sample(rng)]
    }
}

/// Per-prompt response samplers for a kernel.
pub(crate) struct KernelSampler<'a> {
    rows: IndexMap<&'a str, Categorical<'a>>,
}

impl<'a> KernelSampler<'a> {
    pub(crate) fn new(k: &'a Kernel) -> Self {
        KernelSampler {
            rows: k.rows().map(|(x, row)| (x.as_str(), Categorical::new(row))).collect(),
        }
    }

    pub(crate) fn sample<R: Rng + ?Sized>(&self, prompt: &str, rng: &mut R) -> Option<&'a Label> {
        Some(self.rows.get(prompt)?.sample(rng))
    }
}

/// `n` ancestral draws `x ∼ rho`, `y ∼ k(· | x)`.
pub fn sample_joint(j: &JointLaw, n: usize, seed: u64) -> Result<SampleSet, EstimationError> {
    if n == 0 {
        return Err(EstimationError::ZeroSamples);
    }
    let prompts = Categorical::new(j.prompt_marginal());
    let responses = KernelSampler::new(j.kernel());
    let blocks = n.div_ceil(SAMPLE_BLOCK);
    let records: Vec<(Label, Label)> = (0..blocks)
        .into_par_iter()
        .flat_map_iter(|b| {
            let mut rng = substream(seed, b as u64);
            let len = SAMPLE_BLOCK.min(n - b * SAMPLE_BLOCK);
            let (prompts, responses) = (&prompts, &responses);
            (0..len).map(move |_| {
                let x = prompts.sample(&mut rng);
                let y = responses
                    .sample(x.as_str(), &mut rng)
                    .expect("joint laws carry a row for every supported prompt");
                (x.clone(), y.clone())
            })
        })
        .collect();
    Ok(SampleSet::from_records(records, seed, j.regime()))
}

/// Hoeffding half-width `range · √(ln(2/δ) / 2n)` with `δ = 1 − confidence`.
pub fn hoeffding_half_width(range: f64, n: usize, confidence: f64) -> f64 {
    let delta = 1.0 - confidence;
    range * ((2.0 / delta).ln() / (2.0 * n as f64)).sqrt()
}

fn check_confidence(confidence: f64) -> Result<(), EstimationError> {
    if confidence > 0.0 && confidence < 1.0 {
        Ok(())
    } else {
        Err(EstimationError::InvalidConfidence(confidence))
    }
}

/// Sample mean of the loss with a two-sided Hoeffding interval.
pub fn mc_risk(s: &SampleSet, loss: &BoundedLoss, confidence: f64) -> Result<Estimate, EstimationError> {
    if s.is_empty() {
        return Err(EstimationError::EmptySample);
    }
    check_confidence(confidence)?;
    // Neumaier-compensated sum; the mean is then pinned to the observed range
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in s.records() {
        let v = loss
            .value(x.as_str(), y.as_str())
            .ok_or_else(|| EstimationError::Uncovered {
                prompt: x.clone(),
                response: y.clone(),
            })?;
        let t = sum + v;
        comp += if sum.abs() >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let n = s.len();
    let value = ((sum + comp) / n as f64).clamp(lo, hi);
    let hw = hoeffding_half_width(loss.upper() - loss.lower(), n, confidence);
    Ok(Estimate {
        value,
        ci_low: value - hw,
        ci_high: value + hw,
        n,
        confidence,
    })
}

/// What [`empirical_kernel`] does with prompts that were never sampled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MissingPrompts {
    /// Leave them out of the kernel.
    #[default]
    Drop,
    /// Fail with [`EstimationError::NoObservations`].
    Strict,
}

/// Row `x` is the conditional frequency of responses observed with `x`.
pub fn empirical_kernel(
    s: &SampleSet,
    prompt_alphabet: &[Label],
    response_alphabet: &[Label],
    missing: MissingPrompts,
) -> Result<Kernel, EstimationError> {
    let mut counts: IndexMap<&Label, IndexMap<&Label, u64>> =
        prompt_alphabet.iter().map(|x| (x, IndexMap::new())).collect();
    for (x, y) in s.records() {
        if !response_alphabet.contains(y) {
            return Err(EstimationError::UnknownLabel(y.clone()));
        }
        let row = counts
            .get_mut(x)
            .ok_or_else(|| EstimationError::UnknownLabel(x.clone()))?;
        *row.entry(y).or_insert(0) += 1;
    }
    let mut rows = Vec::new();
    for (x, row) in counts {
        if row.is_empty() {
            match missing {
                MissingPrompts::Drop => continue,
                MissingPrompts::Strict => return Err(EstimationError::NoObservations(x.clone())),
            }
        }
        let (ls, ws): (Vec<_>, Vec<_>) = row.into_iter().map(|(y, c)| (y.clone(), c as f64)).unzip();
        rows.push((x.clone(), Distribution::new(ls, ws, Normalization::Renormalize)?));
    }
    Ok(Kernel::new(response_alphabet.to_vec(), rows)?)
}

/// Bootstrap settings for [`plug_in_tv`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub confidence: f64,
    /// Defaults to a mix of the two sample seeds.
    pub seed: Option<u64>,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            resamples: DEFAULT_RESAMPLES,
            confidence: 0.95,
            seed: None,
        }
    }
}

fn mix_seeds(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a combined word
    let mut z = a ^ b.rotate_left(32) ^ 0x9E37_79B9_7F4A_7C15;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn half_l1(p: &[f64], q: &[f64]) -> f64 {
    let l1: f64 = p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum();
    (0.5 * l1).min(1.0)
}

/// Multinomial resample of `n` draws from `probs` via conditional binomials.
fn multinomial<R: Rng + ?Sized>(rng: &mut R, n: u64, probs: &[f64], out: &mut [f64]) {
    let mut left = n;
    let mut mass = 1.0;
    for (i, &p) in probs.iter().enumerate() {
        if left == 0 || i + 1 == probs.len() {
            out[i] = left as f64;
            left = 0;
            continue;
        }
        let c = if p <= 0.0 {
            0
        } else {
            let ratio = (p / mass).clamp(0.0, 1.0);
            Binomial::new(left, ratio).expect("ratio in [0, 1]").sample(rng)
        };
        out[i] = c as f64;
        left -= c;
        mass -= p;
    }
}

/// Empirical cell frequencies of both sets over the union of observed cells.
fn frequencies(sp: &SampleSet, sq: &SampleSet) -> (Vec<f64>, Vec<f64>) {
    let (cp, cq) = (sp.counts(), sq.counts());
    let mut cells: IndexMap<(&Label, &Label), ()> = cp.keys().map(|k| (*k, ())).collect();
    cells.extend(cq.keys().map(|k| (*k, ())));
    let freq = |c: &IndexMap<(&Label, &Label), u64>, n: usize| -> Vec<f64> {
        cells
            .keys()
            .map(|k| c.get(k).copied().unwrap_or(0) as f64 / n as f64)
            .collect()
    };
    (freq(&cp, sp.len()), freq(&cq, sq.len()))
}

/// Plug-in TV point estimate alone; 0 if either set is empty.
pub fn plug_in_value(sp: &SampleSet, sq: &SampleSet) -> f64 {
    if sp.is_empty() || sq.is_empty() {
        return 0.0;
    }
    let (fp, fq) = frequencies(sp, sq);
    half_l1(&fp, &fq)
}

/// Half-L1 distance between the empirical joint frequencies of two sample
/// sets, with a percentile bootstrap interval.
///
/// The plug-in value is biased upward at small `n`. The interval is widened
/// to include the point estimate when the bootstrap distribution lies
/// entirely on one side of it, which happens exactly in that regime.
/// `n` is the smaller of the two sample sizes.
pub fn plug_in_tv(sp: &SampleSet, sq: &SampleSet, cfg: &BootstrapConfig) -> Result<Estimate, EstimationError> {
    if sp.is_empty() || sq.is_empty() {
        return Err(EstimationError::EmptySample);
    }
    check_confidence(cfg.confidence)?;
    if cfg.resamples == 0 {
        return Err(EstimationError::NoResamples);
    }
    let (fp, fq) = frequencies(sp, sq);
    let (np, nq) = (sp.len() as f64, sq.len() as f64);
    let value = half_l1(&fp, &fq);

    let seed = cfg.seed.unwrap_or_else(|| mix_seeds(sp.seed(), sq.seed()));
    let mut stats: Vec<f64> = (0..cfg.resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, b as u64);
            let mut bp = vec![0.0; fp.len()];
            let mut bq = vec![0.0; fq.len()];
            multinomial(&mut rng, sp.len() as u64, &fp, &mut bp);
            multinomial(&mut rng, sq.len() as u64, &fq, &mut bq);
            bp.iter_mut().for_each(|c| *c /= np);
            bq.iter_mut().for_each(|c| *c /= nq);
            half_l1(&bp, &bq)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let alpha = 1.0 - cfg.confidence;
    let rank = |q: f64| stats[((q * stats.len() as f64).ceil() as usize).clamp(1, stats.len()) - 1];
    let (lo, hi) = (rank(alpha / 2.0), rank(1.0 - alpha / 2.0));
    Ok(Estimate {
        value,
        ci_low: lo.min(value),
        ci_high: hi.max(value),
        n: sp.len().min(sq.len()),
        confidence: cfg.confidence,
    })
}

/// Sampled counterparts of a [`crate::GapReport`].
///
/// `risk_difference` is `r_gen − r_disc`, signed. Its interval combines the
/// two Hoeffding intervals, so it holds with probability at least
/// `1 − 2(1 − confidence)`. The plug-in TV is an added estimator with no
/// finite-sample guarantee.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampledAudit {
    pub r_gen: Estimate,
    pub r_disc: Estimate,
    pub risk_difference: f64,
    pub risk_difference_ci: (f64, f64),
    pub tv_plug_in: Estimate,
    pub l_max: f64,
    /// `2 · L_max` times the plug-in TV.
    pub bound_plug_in: f64,
    pub seed_p: u64,
    pub seed_q: u64,
}

/// Draws `n` cells from each law and estimates risks and TV. `P` uses
/// `seed`; `Q` uses a seed derived from it.
pub fn sampled_audit(
    p: &JointLaw,
    q: &JointLaw,
    loss: &BoundedLoss,
    n: usize,
    seed: u64,
    confidence: f64,
) -> Result<SampledAudit, EstimationError> {
    check_confidence(confidence)?;
    let seed_q = mix_seeds(seed, 1);
    let sp = sample_joint(p, n, seed)?;
    let sq = sample_joint(q, n, seed_q)?;
    let r_gen = mc_risk(&sp, loss, confidence)?;
    let r_disc = mc_risk(&sq, loss, confidence)?;
    let tv = plug_in_tv(
        &sp,
        &sq,
        &BootstrapConfig {
            confidence,
            ..BootstrapConfig::default()
        },
    )?;
    let l_max = loss.l_max();
    Ok(SampledAudit {
        risk_difference: r_gen.value - r_disc.value,
        risk_difference_ci: (r_gen.ci_low - r_disc.ci_high, r_gen.ci_high - r_disc.ci_low),
        r_gen,
        r_disc,
        bound_plug_in: 2.0 * l_max * tv.value,
        tv_plug_in: tv,
        l_max,
        seed_p: seed,
        seed_q,
    })
}
