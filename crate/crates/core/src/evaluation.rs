//! Trade-off curves, conditional attribute breakdowns, top-k utility accuracy
//! and retrained-attacker robustness.

use std::collections::BTreeSet;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mix_seed, Dataset};
use crate::error::{Error, Result};
use crate::models::{clone_final_layer, Classifier, SanitizerModel};
use crate::nn::Tensor;
use crate::objectives::DEFAULT_EPSILON;
use crate::training::{argmax, fit_head_on_features, posteriors};

const EVAL_BATCH: usize = 128;

/// Classifier posteriors on raw and sanitized versions of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriors {
    pub num_subjects: usize,
    pub utility_raw: Vec<f32>,
    pub utility_san: Vec<f32>,
    pub privacy_raw: Vec<f32>,
    pub privacy_san: Vec<f32>,
    pub utility_labels: Vec<usize>,
    pub privacy_labels: Vec<u8>,
}

impl Posteriors {
    pub fn len(&self) -> usize {
        self.utility_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utility_labels.is_empty()
    }

    pub fn utility_kl(&self) -> Vec<f64> {
        let k = self.num_subjects;
        self.utility_raw
            .chunks_exact(k)
            .zip(self.utility_san.chunks_exact(k))
            .map(|(p, q)| kl_rows(p, q))
            .collect()
    }

    pub fn privacy_kl(&self, prior: [f64; 2]) -> Vec<f64> {
        self.privacy_san.chunks_exact(2).map(|q| kl_prior(prior, q))
            .collect()
    }

    pub fn privacy_accuracy(&self) -> f64 {
        let hits = self
            .privacy_san
            .chunks_exact(2)
            .zip(&self.privacy_labels)
            .filter(|(row, &y)| argmax(row) == y as usize)
            .count();
        hits as f64 / self.len() as f64
    }

    /// Top-k accuracy of the sanitized utility posteriors with random tie-breaking.
    pub fn topk(&self, k: usize, seed: u64) -> Result<f64> {
        topk_from_rows(&self.utility_san, self.num_subjects, &self.utility_labels, k, seed)
    }
}

fn kl_rows(p: &[f32], q: &[f32]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi != 0.0)
        .map(|(&pi, &qi)| {
            let (pi, qi) = (pi as f64, qi as f64);
            pi * ((pi + DEFAULT_EPSILON) / (qi + DEFAULT_EPSILON)).ln()
        })
        .sum()
}

fn kl_prior(prior: [f64; 2], q: &[f32]) -> f64 {
    prior
        .iter()
        .zip(q)
        .filter(|(pi, _)| **pi != 0.0)
        .map(|(&pi, &qi)| pi * ((pi + DEFAULT_EPSILON) / (qi as f64 + DEFAULT_EPSILON)).ln())
        .sum()
}

/// Whether `label` lands in the top `k` of `row`; ties broken uniformly at random.
fn topk_hit(row: &[f32], label: usize, k: usize, rng: &mut impl Rng) -> bool {
    let target = row[label];
    let greater = row.iter().filter(|&&v| v > target).count();
    let ties = row.iter().filter(|&&v| v == target).count() - 1;
    if greater >= k {
        false
    } else if greater + ties < k {
        true
    } else {
        // label takes a uniformly random slot among the tied block
        rng.gen_range(0..=ties) < k - greater
    }
}

pub fn topk_from_rows(rows: &[f32], classes: usize, labels: &[usize], k: usize, seed: u64) -> Result<f64> {
    if k == 0 || k > classes {
        return Err(Error::domain(format!("k = {k} outside [1, {classes}]")));
    }
    if labels.is_empty() {
        return Err(Error::domain("top-k accuracy of an empty set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hits = rows
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &y)| topk_hit(row, y, k, &mut rng))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Sanitize every sample of `data` (or pass it through when `sanitizer` is
/// `None`) and collect both classifiers' posteriors.
pub fn collect_posteriors(
    sanitizer: Option<&SanitizerModel>,
    utility_base: &Classifier,
    utility: &Classifier,
    privacy: &Classifier,
    prior: [f64; 2],
    data: &Dataset,
    seed: u64,
) -> Result<Posteriors> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Posteriors {
        num_subjects: utility.num_classes,
        utility_raw: posteriors(utility_base, data, EVAL_BATCH)?,
        utility_san: Vec::with_capacity(data.len() * utility.num_classes),
        privacy_raw: posteriors(privacy, data, EVAL_BATCH)?,
        privacy_san: Vec::with_capacity(data.len() * 2),
        utility_labels: data.samples.iter().map(|s| s.utility_label).collect(),
        privacy_labels: data.samples.iter().map(|s| s.privacy_label).collect(),
    };
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let x = match sanitizer {
            Some(s) => s.sanitize_batch(data, chunk, prior, &mut rng)?,
            None => data.batch(chunk),
        };
        out.utility_san.extend(utility.forward(&x)?);
        out.privacy_san.extend(privacy.forward(&x)?);
    }
    Ok(out)
}

/// Sanitized images of `data`, in order.
pub fn sanitize_all(sanitizer: &SanitizerModel, data: &Dataset, prior: [f64; 2], seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut samples = data.samples.clone();
    for chunk in idx.chunks(EVAL_BATCH) {
        let s = sanitizer.sanitize_batch(data, chunk, prior, &mut rng)?;
        for (j, &i) in chunk.iter().enumerate() {
            samples[i].image = s.item(j).to_vec();
        }
    }
    Ok(Dataset {
        image_shape: data.image_shape,
        samples,
    })
}

/// One row of a trade-off table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    /// `None` for the raw-data row.
    pub alpha: Option<f64>,
    pub utility_kl: f64,
    pub privacy_kl: f64,
    /// `(k, accuracy)` pairs on `S(x)`.
    pub topk: Vec<(usize, f64)>,
    pub privacy_accuracy: f64,
    pub samples: usize,
}

impl TradeoffRow {
    pub fn topk_accuracy(&self, k: usize) -> Option<f64> {
        self.topk.iter().find(|(kk, _)| *kk == k).map(|(_, a)| *a)
    }

    fn from_posteriors(alpha: Option<f64>, p: &Posteriors, prior: [f64; 2], ks: &[usize], seed: u64) -> Result<Self> {
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        Ok(Self {
            alpha,
            utility_kl: mean(p.utility_kl()),
            privacy_kl: mean(p.privacy_kl(prior)),
            topk: ks
                .iter()
                .map(|&k| p.topk(k, seed).map(|a| (k, a)))
                .collect::<Result<_>>()?,
            privacy_accuracy: p.privacy_accuracy(),
            samples: p.len(),
        })
    }
}

/// Utility/privacy trade-off over an α sweep, in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffReport {
    pub architecture: String,
    pub mode: String,
    pub units: String,
    pub prior: [f64; 2],
    pub raw: TradeoffRow,
    pub rows: Vec<TradeoffRow>,
}

impl TradeoffReport {
    pub fn row(&self, alpha: f64) -> Option<&TradeoffRow> {
        self.rows.iter().find(|r| r.alpha == Some(alpha))
    }
}

/// A trained sweep cell: the sanitizer for one α plus the classifiers it
/// should be judged by (the adversarial privacy head, the co-trained utility).
#[derive(Debug, Clone, Copy)]
pub struct EvalCell<'a> {
    pub alpha: f64,
    pub sanitizer: &'a SanitizerModel,
    pub utility: &'a Classifier,
    pub privacy: &'a Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub topk: Vec<usize>,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            topk: vec![1, 3],
            seed: 2718,
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_tradeoff(
    architecture: &str,
    mode: &str,
    cells: &[EvalCell<'_>],
    utility: &Classifier,
    privacy: &Classifier,
    prior: [f64; 2],
    test: &Dataset,
    alphas: &[f64],
    opts: &EvalOptions,
) -> Result<TradeoffReport> {
    let raw_post = collect_posteriors(None, utility, utility, privacy, prior, test, opts.seed)?;
    let raw = TradeoffRow::from_posteriors(None, &raw_post, prior, &opts.topk, opts.seed)?;
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let cell = cells
            .iter()
            .find(|c| c.alpha == alpha)
            .ok_or_else(|| Error::config(format!("no trained sanitizer for alpha {alpha}")))?;
        let post = collect_posteriors(
            Some(cell.sanitizer),
            utility,
            cell.utility,
            cell.privacy,
            prior,
            test,
            mix_seed(opts.seed, alpha.to_bits()),
        )?;
        rows.push(TradeoffRow::from_posteriors(Some(alpha), &post, prior, &opts.topk, opts.seed)?);
    }
    Ok(TradeoffReport {
        architecture: architecture.into(),
        mode: mode.into(),
        units: "nats".into(),
        prior,
        raw,
        rows,
    })
}

/// Fraction of `test` whose true subject is in the top `k` utility posteriors
/// on sanitized images.
pub fn topk_accuracy(
    utility: &Classifier,
    sanitizer: Option<&SanitizerModel>,
    prior: [f64; 2],
    test: &Dataset,
    k: usize,
    seed: u64,
) -> Result<f64> {
    if k == 0 || k > utility.num_classes {
        return Err(Error::domain(format!("k = {k} outside [1, {}]", utility.num_classes)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..test.len()).collect();
    let mut rows = Vec::with_capacity(test.len() * utility.num_classes);
    for chunk in idx.chunks(EVAL_BATCH) {
        let x: Tensor = match sanitizer {
            Some(s) => s.sanitize_batch(test, chunk, prior, &mut rng)?,
            None => test.batch(chunk),
        };
        rows.extend(utility.forward(&x)?);
    }
    let labels: Vec<usize> = test.samples.iter().map(|s| s.utility_label).collect();
    topk_from_rows(&rows, utility.num_classes, &labels, k, mix_seed(seed, 1))
}

/// Linear-interpolation quantile (`q` in `[0, 1]`) of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty slice");
    let mut v = values.to_vec();
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, lo_val, upper) = v.select_nth_unstable_by(lo, |a, b| a.total_cmp(b));
    let lo_val = *lo_val;
    if frac == 0.0 || upper.is_empty() {
        return lo_val;
    }
    let hi_val = upper.iter().copied().fold(f64::INFINITY, f64::min);
    lo_val + frac * (hi_val - lo_val)
}

/// Box-plot summary of one group with 1.5·IQR whiskers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSummary {
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

impl BoxSummary {
    pub fn from_values(values: &[f64]) -> Self {
        let q1 = quantile(values, 0.25);
        let median = quantile(values, 0.5);
        let q3 = quantile(values, 0.75);
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let inside = values.iter().copied().filter(|v| (lo_fence..=hi_fence).contains(v));
        // whiskers never retreat inside the box when interpolated quartiles
        // sit beyond the last in-fence observation
        let whisker_low = inside.clone().fold(f64::INFINITY, f64::min).min(q1);
        let whisker_high = inside.fold(f64::NEG_INFINITY, f64::max).max(q3);
        let outliers = values
            .iter()
            .copied()
            .filter(|v| !(lo_fence..=hi_fence).contains(v))
            .collect();
        Self {
            count: values.len(),
            median,
            q1,
            q3,
            whisker_low,
            whisker_high,
            outliers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBreakdown {
    pub true_attribute: u8,
    pub summary: BoxSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Distribution of the class-1 privacy posterior on sanitized images, split
/// by true attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalBreakdown {
    /// `None` for raw data.
    pub alpha: Option<f64>,
    pub prior_class1: f64,
    pub groups: Vec<GroupBreakdown>,
}

impl ConditionalBreakdown {
    pub fn group(&self, attribute: u8) -> Option<&GroupBreakdown> {
        self.groups.iter().find(|g| g.true_attribute == attribute)
    }

    /// Build from class-1 posteriors and matching true labels.
    pub fn from_scores(alpha: Option<f64>, prior: [f64; 2], scores: &[f64], labels: &[u8]) -> Self {
        let groups = [0u8, 1]
            .into_iter()
            .filter_map(|a| {
                let vals: Vec<f64> = scores
                    .iter()
                    .zip(labels)
                    .filter(|(_, &l)| l == a)
                    .map(|(s, _)| *s)
                    .collect();
                if vals.is_empty() {
                    return None;
                }
                let warning = (vals.len() < 5).then(|| {
                    let msg = format!("attribute {a} group has only {} samples", vals.len());
                    warn!("{msg}");
                    msg
                });
                Some(GroupBreakdown {
                    true_attribute: a,
                    summary: BoxSummary::from_values(&vals),
                    warning,
                })
            })
            .collect();
        Self {
            alpha,
            prior_class1: prior[1],
            groups,
        }
    }
}

pub fn conditional_breakdown(
    sanitizer: Option<&SanitizerModel>,
    privacy: &Classifier,
    prior: [f64; 2],
    test: &Dataset,
    alpha: Option<f64>,
    seed: u64,
) -> Result<ConditionalBreakdown> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..test.len()).collect();
    let mut scores = Vec::with_capacity(test.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let x = match sanitizer {
            Some(s) => s.sanitize_batch(test, chunk, prior, &mut rng)?,
            None => test.batch(chunk),
        };
        scores.extend(privacy.forward(&x)?.chunks_exact(2).map(|r| r[1] as f64));
    }
    let labels: Vec<u8> = test.samples.iter().map(|s| s.privacy_label).collect();
    Ok(ConditionalBreakdown::from_scores(alpha, prior, &scores, &labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackBudget {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for AttackBudget {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 32,
            lr: 2e-3,
            seed: 4242,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub attacker: Classifier,
    pub privacy_kl_after: f64,
    pub accuracy_after: f64,
    /// Accuracy of the attacked privacy classifier itself on the same sanitized test data.
    pub accuracy_before: f64,
    pub privacy_kl_before: f64,
}

fn backbone_features(model: &Classifier, data: &Dataset) -> Result<Vec<f32>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len() * model.head.in_dim);
    for chunk in idx.chunks(EVAL_BATCH) {
        out.extend(model.forward_trace(&data.batch(chunk))?.features);
    }
    Ok(out)
}

/// Retrain a fresh privacy head (frozen backbone) on sanitized training data
/// with true labels, then measure what it recovers on sanitized test data.
pub fn attack_retrain(
    sanitizer: &SanitizerModel,
    privacy: &Classifier,
    prior: [f64; 2],
    train: &Dataset,
    test: &Dataset,
    budget: &AttackBudget,
) -> Result<AttackOutcome> {
    let mut attacker = clone_final_layer(privacy, mix_seed(budget.seed, 0xa77));
    let san_train = sanitize_all(sanitizer, train, prior, mix_seed(budget.seed, 1))?;
    let san_test = sanitize_all(sanitizer, test, prior, mix_seed(budget.seed, 2))?;
    let features = backbone_features(&attacker, &san_train)?;
    let labels: Vec<usize> = train.samples.iter().map(|s| s.privacy_label as usize).collect();
    fit_head_on_features(
        &mut attacker,
        &features,
        &labels,
        budget.epochs,
        budget.batch_size,
        budget.lr,
        mix_seed(budget.seed, 3),
    )?;
    let score = |m: &Classifier| -> Result<(f64, f64)> {
        let p = collect_posteriors(None, m, m, m, prior, &san_test, 0)?;
        let acc = p
            .privacy_raw
            .chunks_exact(2)
            .zip(&p.privacy_labels)
            .filter(|(r, &y)| argmax(r) == y as usize)
            .count() as f64
            / p.len() as f64;
        let kl = p.privacy_raw.chunks_exact(2).map(|q| kl_prior(prior, q)).sum::<f64>() / p.len() as f64;
        Ok((acc, kl))
    };
    let (accuracy_after, privacy_kl_after) = score(&attacker)?;
    let (accuracy_before, privacy_kl_before) = score(privacy)?;
    Ok(AttackOutcome {
        attacker,
        privacy_kl_after,
        accuracy_after,
        accuracy_before,
        privacy_kl_before,
    })
}

/// Alpha lists must be sorted, unique and inside `[0, 1]`.
pub fn validate_alphas(alphas: &[f64]) -> Result<()> {
    if alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::config("alpha values must lie in [0, 1]"));
    }
    if alphas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("alpha list must be strictly increasing"));
    }
    let unique: BTreeSet<u64> = alphas.iter().map(|a| a.to_bits()).collect();
    debug_assert_eq!(unique.len(), alphas.len());
    Ok(())
}
