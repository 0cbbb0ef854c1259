//! Plug-and-play, adversarial and collaborative trainers.
//!
//! All trainers are single-threaded and fully determined by their seeds.

use std::fmt;
use std::io::{BufRead, Write};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mix_seed, Dataset};
use crate::error::{Error, Result};
use crate::models::{Classifier, SanitizerModel, Stage, UnetS};
use crate::nn::layers::softmax_backward;
use crate::nn::{Adam, Tensor};
use crate::objectives::{
    cross_entropy_with_logit_grad, privacy_loss_batch, sanitization_loss_batch, LossConfig, DEFAULT_EPSILON,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    PlugAndPlay,
    Adversarial,
    Collaborative,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::PlugAndPlay => "plug_and_play",
            TrainMode::Adversarial => "adversarial",
            TrainMode::Collaborative => "collaborative",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub sanitizer: f32,
    /// Privacy head in adversarial mode.
    pub privacy: f32,
    /// Utility head (or whole utility network) in collaborative mode.
    pub utility: f32,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            sanitizer: 1e-3,
            privacy: 1e-3,
            utility: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rates: LearningRates,
    /// Epochs per turn in adversarial alternation.
    pub alternation_period: usize,
    pub seed: u64,
    /// Collaborative mode fine-tunes the whole utility network instead of its head.
    #[serde(default)]
    pub utility_full_finetune: bool,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::PlugAndPlay,
            alpha: 0.5,
            epochs: 6,
            batch_size: 32,
            learning_rates: LearningRates::default(),
            alternation_period: 1,
            seed: 1,
            utility_full_finetune: false,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        if self.alternation_period < 1 {
            return Err(Error::config("alternation_period must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        let lr = self.learning_rates;
        // a zero utility rate freezes the utility head in collaborative mode
        if !(lr.sanitizer > 0.0) || !(lr.privacy > 0.0) || !(lr.utility >= 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 32,
            lr: 2e-3,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Sanitizer,
    Privacy,
    Utility,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Sanitizer => "sanitizer",
            Component::Privacy => "privacy",
            Component::Utility => "utility",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "sanitizer" => Some(Component::Sanitizer),
            "privacy" => Some(Component::Privacy),
            "utility" => Some(Component::Utility),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub loss_s: f64,
    pub loss_p: Option<f64>,
    pub active: Component,
}

/// Per-iteration loss history, append-only.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    fn push(&mut self, epoch: usize, loss_s: f64, loss_p: Option<f64>, active: Component) {
        let iteration = self.records.last().map_or(0, |r| r.iteration + 1);
        self.records.push(LogRecord {
            iteration,
            epoch,
            loss_s,
            loss_p,
            active,
        });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Active component of each epoch, in order.
    pub fn epoch_components(&self) -> Vec<Component> {
        let mut out: Vec<Component> = Vec::new();
        let mut last_epoch = None;
        for r in &self.records {
            if last_epoch != Some(r.epoch) {
                out.push(r.active);
                last_epoch = Some(r.epoch);
            }
        }
        out
    }

    pub fn loss_s(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss_s).collect()
    }

    pub fn loss_p(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.loss_p).collect()
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "iteration,loss_s,loss_p,active_component,epoch")?;
        for r in &self.records {
            let lp = r.loss_p.map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{},{}", r.iteration, r.loss_s, lp, r.active.name(), r.epoch)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut log = TrainLog::default();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if n == 0 || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::format("train_log", format!("malformed line {}", n + 1));
            if f.len() != 5 {
                return Err(bad());
            }
            log.records.push(LogRecord {
                iteration: f[0].parse().map_err(|_| bad())?,
                loss_s: f[1].parse().map_err(|_| bad())?,
                loss_p: if f[2].is_empty() { None } else { Some(f[2].parse().map_err(|_| bad())?) },
                active: Component::parse(f[3]).ok_or_else(bad)?,
                epoch: f[4].parse().map_err(|_| bad())?,
            });
        }
        Ok(log)
    }
}

fn diverged(message: String, log: &TrainLog) -> Error {
    Error::Training {
        message,
        log: Box::new(log.clone()),
    }
}

fn shuffled_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Posteriors of `model` on every sample, `[n, classes]` flattened.
pub fn posteriors(model: &Classifier, data: &Dataset, batch_size: usize) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(data.len() * model.num_classes);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        out.extend(model.forward(&data.batch(chunk))?);
    }
    Ok(out)
}

/// Train `model` with cross-entropy on `labels`. When `head_only` is set the
/// backbone is left untouched.
pub fn fit_classifier(
    model: &mut Classifier,
    data: &Dataset,
    labels: &[usize],
    epochs: usize,
    batch_size: usize,
    lr: f32,
    head_only: bool,
    seed: u64,
) -> Result<TrainLog> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(lr);
    let mut grads = model.grad_buffer();
    let mut log = TrainLog::default();
    for epoch in 0..epochs {
        for batch in shuffled_batches(data.len(), batch_size, &mut rng) {
            let x = data.batch(&batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let trace = model.forward_trace(&x)?;
            let (loss, dlogits) = cross_entropy_with_logit_grad(&trace.probs, &y, model.num_classes);
            log.push(epoch, loss, None, Component::Utility);
            if !loss.is_finite() {
                return Err(diverged(format!("classifier loss became {loss} at epoch {epoch}"), &log));
            }
            grads.clear();
            model.backward(&trace, &dlogits, Some(&mut grads), !head_only, false);
            if head_only {
                opt.step(model.head_params_mut(), grads.head());
            } else {
                opt.step(model.all_params_mut(), grads.all());
            }
        }
    }
    Ok(log)
}

/// Train a cross-entropy head on fixed backbone features (`[n, HIDDEN_UNITS]`).
pub(crate) fn fit_head_on_features(
    model: &mut Classifier,
    features: &[f32],
    labels: &[usize],
    epochs: usize,
    batch_size: usize,
    lr: f32,
    seed: u64,
) -> Result<()> {
    let dim = model.head.in_dim;
    let n = labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(lr);
    let mut g = model.head.grad_buffer();
    for epoch in 0..epochs {
        for batch in shuffled_batches(n, batch_size, &mut rng) {
            let mut x = Vec::with_capacity(batch.len() * dim);
            for &i in &batch {
                x.extend_from_slice(&features[i * dim..(i + 1) * dim]);
            }
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let logits = model.head.forward(&x, batch.len());
            let probs = crate::nn::layers::softmax_rows(&logits, model.num_classes);
            let (loss, dlogits) = cross_entropy_with_logit_grad(&probs, &y, model.num_classes);
            if !loss.is_finite() {
                return Err(diverged(format!("head loss became {loss} at epoch {epoch}"), &TrainLog::default()));
            }
            g.clear();
            model.head.backward(&x, &dlogits, batch.len(), Some(&mut g), false);
            opt.step(model.head_params_mut(), vec![&g.weight, &g.bias]);
        }
    }
    Ok(())
}

/// Training-set accuracies reached during pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub utility_train_accuracy: f64,
    pub privacy_train_accuracy: f64,
}

/// Train utility (subject) and privacy (attribute) classifiers on raw data.
pub fn pretrain_classifiers(
    train: &Dataset,
    num_subjects: usize,
    cfg: &PretrainConfig,
) -> Result<(Classifier, Classifier, PretrainSummary)> {
    if train.is_empty() {
        return Err(Error::domain("cannot pretrain on an empty dataset"));
    }
    let shape = train.image_shape;
    let mut utility = Classifier::new(shape, num_subjects, mix_seed(cfg.seed, 1));
    let mut privacy = Classifier::new(shape, 2, mix_seed(cfg.seed, 2));
    let u_labels: Vec<usize> = train.samples.iter().map(|s| s.utility_label).collect();
    let p_labels: Vec<usize> = train.samples.iter().map(|s| s.privacy_label as usize).collect();
    fit_classifier(&mut utility, train, &u_labels, cfg.epochs, cfg.batch_size, cfg.lr, false, mix_seed(cfg.seed, 3))?;
    fit_classifier(&mut privacy, train, &p_labels, cfg.epochs, cfg.batch_size, cfg.lr, false, mix_seed(cfg.seed, 4))?;
    let acc = |m: &Classifier, labels: &[usize]| -> Result<f64> {
        let p = posteriors(m, train, 128)?;
        let hits = p
            .chunks_exact(m.num_classes)
            .zip(labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
        Ok(hits as f64 / labels.len() as f64)
    };
    let summary = PretrainSummary {
        utility_train_accuracy: acc(&utility, &u_labels)?,
        privacy_train_accuracy: acc(&privacy, &p_labels)?,
    };
    info!(
        "pretrained classifiers: utility train acc {:.3}, privacy train acc {:.3}",
        summary.utility_train_accuracy, summary.privacy_train_accuracy
    );
    utility.frozen_backbone = true;
    privacy.frozen_backbone = true;
    Ok((utility, privacy, summary))
}

pub fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn take_rows(all: &[f32], idx: &[usize], width: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        out.extend_from_slice(&all[i * width..(i + 1) * width]);
    }
    out
}

fn add_into(acc: &mut Option<Tensor>, t: Option<Tensor>) {
    match (acc.as_mut(), t) {
        (Some(a), Some(t)) => a.add_assign(&t),
        (None, Some(t)) => *acc = Some(t),
        _ => {}
    }
}

/// Shared state for sanitizer epochs.
struct SanitizerStep<'a> {
    cfg: &'a TrainConfig,
    prior: [f64; 2],
    data: &'a Dataset,
    /// Frozen `P(u|x)` of the original utility classifier.
    u_raw: Vec<f32>,
    opt: Adam,
    rng: ChaCha8Rng,
}

impl<'a> SanitizerStep<'a> {
    fn new(cfg: &'a TrainConfig, prior: [f64; 2], data: &'a Dataset, utility: &Classifier) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::domain("cannot train on an empty dataset"));
        }
        Ok(Self {
            cfg,
            prior,
            data,
            u_raw: posteriors(utility, data, 128)?,
            opt: Adam::new(cfg.learning_rates.sanitizer),
            rng: ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x5a)),
        })
    }

    /// One epoch of sanitizer updates. `collab` carries the utility optimizer
    /// when the utility classifier co-trains on sanitized data.
    fn epoch(
        &mut self,
        epoch: usize,
        sanitizer: &mut SanitizerModel,
        utility: &mut Classifier,
        privacy: &Classifier,
        mut collab: Option<&mut Adam>,
        log: &mut TrainLog,
    ) -> Result<()> {
        let k = utility.num_classes;
        let loss_cfg = self.cfg.loss_config();
        let batches = shuffled_batches(self.data.len(), self.cfg.batch_size, &mut self.rng);
        let mut ugrads = utility.grad_buffer();
        for batch in batches {
            let x_in = sanitizer.stage_input(self.data, &batch, self.prior, &mut self.rng)?;
            let unet = sanitizer
                .unet()
                .ok_or_else(|| Error::config("sanitizer has no trainable stage"))?;
            let trace = unet.forward_trace(&x_in)?;
            let s = &trace.output;
            let tu = utility.forward_trace(s)?;
            let tp = privacy.forward_trace(s)?;
            let u_raw = take_rows(&self.u_raw, &batch, k);
            let terms = sanitization_loss_batch(&u_raw, &tu.probs, k, self.prior, &tp.probs, &loss_cfg)?;
            let loss_p = if self.cfg.mode == TrainMode::Adversarial {
                let raw = privacy.forward(&self.data.batch(&batch))?;
                let labels: Vec<u8> = batch.iter().map(|&i| self.data.samples[i].privacy_label).collect();
                Some(privacy_loss_batch(&labels, &raw, &tp.probs, self.cfg.epsilon)?.loss)
            } else {
                None
            };
            log.push(epoch, terms.loss, loss_p, Component::Sanitizer);
            if !terms.loss.is_finite() {
                return Err(diverged(format!("sanitization loss became {} at epoch {epoch}", terms.loss), log));
            }
            let mut ds: Option<Tensor> = None;
            if loss_cfg.alpha < 1.0 {
                let dl = softmax_backward(&tu.probs, &terms.grad_u_san, k);
                add_into(&mut ds, utility.backward(&tu, &dl, None, false, true));
            }
            if loss_cfg.alpha > 0.0 {
                let dl = softmax_backward(&tp.probs, &terms.grad_p_san, 2);
                add_into(&mut ds, privacy.backward(&tp, &dl, None, false, true));
            }
            if let Some(uopt) = collab.as_deref_mut() {
                let labels: Vec<usize> = batch.iter().map(|&i| self.data.samples[i].utility_label).collect();
                let (_, dl) = cross_entropy_with_logit_grad(&tu.probs, &labels, k);
                ugrads.clear();
                utility.backward(&tu, &dl, Some(&mut ugrads), self.cfg.utility_full_finetune, false);
                if self.cfg.learning_rates.utility > 0.0 {
                    if self.cfg.utility_full_finetune {
                        uopt.step(utility.all_params_mut(), ugrads.all());
                    } else {
                        uopt.step(utility.head_params_mut(), ugrads.head());
                    }
                }
            }
            let Some(ds) = ds else { continue };
            let unet = sanitizer.unet().expect("checked above");
            let mut g = unet.grad_buffer();
            unet.backward(&trace, &ds, &mut g, false);
            let unet = sanitizer.unet_mut().expect("checked above");
            self.opt.step(unet.params_mut(), g.all());
        }
        Ok(())
    }
}

fn require_trainable(sanitizer: &SanitizerModel) -> Result<&UnetS> {
    match &sanitizer.stage {
        Stage::Unet(u) => Ok(u),
        Stage::Identity => Err(Error::config("identity sanitizer has nothing to train")),
    }
}

/// Train only the sanitizer against frozen classifiers.
pub fn train_plug_and_play(
    mut sanitizer: SanitizerModel,
    utility: &Classifier,
    privacy: &Classifier,
    prior: [f64; 2],
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(SanitizerModel, TrainLog)> {
    require_trainable(&sanitizer)?;
    let mut step = SanitizerStep::new(cfg, prior, data, utility)?;
    // the step API takes the utility mutably for the collaborative case only
    let mut utility = utility.clone();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        step.epoch(epoch, &mut sanitizer, &mut utility, privacy, None, &mut log)?;
        debug!("plug-and-play epoch {epoch}: loss_s {:.4}", log.records.last().map_or(0.0, |r| r.loss_s));
    }
    Ok((sanitizer, log))
}

/// Alternate sanitizer epochs (sanitization loss against the current privacy head) with
/// privacy-head epochs (BCE on raw plus sanitized data).
pub fn train_adversarial(
    mut sanitizer: SanitizerModel,
    utility: &Classifier,
    mut privacy: Classifier,
    prior: [f64; 2],
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(SanitizerModel, Classifier, TrainLog)> {
    require_trainable(&sanitizer)?;
    let mut step = SanitizerStep::new(cfg, prior, data, utility)?;
    let mut utility_view = utility.clone();
    let mut popt = Adam::new(cfg.learning_rates.privacy);
    let mut prng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x9a));
    let mut log = TrainLog::default();
    let k = utility.num_classes;
    let loss_cfg = cfg.loss_config();
    for epoch in 0..cfg.epochs {
        let sanitizer_turn = (epoch / cfg.alternation_period) % 2 == 0;
        if sanitizer_turn {
            step.epoch(epoch, &mut sanitizer, &mut utility_view, &privacy, None, &mut log)?;
            continue;
        }
        let mut grads = privacy.grad_buffer();
        for batch in shuffled_batches(data.len(), cfg.batch_size, &mut prng) {
            let x = data.batch(&batch);
            let s = sanitizer.sanitize_batch(data, &batch, prior, &mut prng)?;
            let t_raw = privacy.forward_trace(&x)?;
            let t_san = privacy.forward_trace(&s)?;
            let labels: Vec<u8> = batch.iter().map(|&i| data.samples[i].privacy_label).collect();
            let pb = privacy_loss_batch(&labels, &t_raw.probs, &t_san.probs, cfg.epsilon)?;
            let u_san = utility.forward(&s)?;
            let u_raw = take_rows(&step.u_raw, &batch, k);
            let ls = sanitization_loss_batch(&u_raw, &u_san, k, prior, &t_san.probs, &loss_cfg)?.loss;
            log.push(epoch, ls, Some(pb.loss), Component::Privacy);
            if !pb.loss.is_finite() {
                return Err(diverged(format!("privacy loss became {} at epoch {epoch}", pb.loss), &log));
            }
            grads.clear();
            let dl_raw = softmax_backward(&t_raw.probs, &pb.grad_p_raw, 2);
            privacy.backward(&t_raw, &dl_raw, Some(&mut grads), false, false);
            let dl_san = softmax_backward(&t_san.probs, &pb.grad_p_san, 2);
            privacy.backward(&t_san, &dl_san, Some(&mut grads), false, false);
            popt.step(privacy.head_params_mut(), grads.head());
        }
        debug!("adversarial epoch {epoch} (privacy): loss_p {:?}", log.records.last().and_then(|r| r.loss_p));
    }
    Ok((sanitizer, privacy, log))
}

/// Train the sanitizer while the utility classifier adapts to sanitized data
/// in the same optimization step.
pub fn train_collaborative(
    mut sanitizer: SanitizerModel,
    utility: Classifier,
    privacy: &Classifier,
    prior: [f64; 2],
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(SanitizerModel, Classifier, TrainLog)> {
    require_trainable(&sanitizer)?;
    let mut step = SanitizerStep::new(cfg, prior, data, &utility)?;
    let mut utility = utility;
    let mut uopt = Adam::new(cfg.learning_rates.utility);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        step.epoch(epoch, &mut sanitizer, &mut utility, privacy, Some(&mut uopt), &mut log)?;
    }
    Ok((sanitizer, utility, log))
}

/// Outcome of [`train`]: the trained sanitizer plus whichever classifier the
/// mode updated.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub sanitizer: SanitizerModel,
    pub utility: Classifier,
    pub privacy: Classifier,
    pub log: TrainLog,
}

/// Dispatch on `cfg.mode`.
pub fn train(
    sanitizer: SanitizerModel,
    utility: &Classifier,
    privacy: &Classifier,
    prior: [f64; 2],
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    match cfg.mode {
        TrainMode::PlugAndPlay => {
            let (sanitizer, log) = train_plug_and_play(sanitizer, utility, privacy, prior, data, cfg)?;
            Ok(TrainOutcome {
                sanitizer,
                utility: utility.clone(),
                privacy: privacy.clone(),
                log,
            })
        }
        TrainMode::Adversarial => {
            let (sanitizer, privacy, log) = train_adversarial(sanitizer, utility, privacy.clone(), prior, data, cfg)?;
            Ok(TrainOutcome {
                sanitizer,
                utility: utility.clone(),
                privacy,
                log,
            })
        }
        TrainMode::Collaborative => {
            let (sanitizer, utility, log) = train_collaborative(sanitizer, utility.clone(), privacy, prior, data, cfg)?;
            Ok(TrainOutcome {
                sanitizer,
                utility,
                privacy: privacy.clone(),
                log,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec, Renderer};
    use crate::models::SanitizerKind;

    fn tiny() -> (DatasetSpec, Dataset) {
        let spec = DatasetSpec {
            image_shape: (3, 16, 16),
            train_size: 64,
            test_size: 16,
            ..DatasetSpec::default()
        };
        let (train, _) = generate_dataset(&spec).unwrap();
        (spec, train)
    }

    fn quick_cfg(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            alpha: 0.5,
            epochs: 4,
            batch_size: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epoch_pretraining_returns_initial_models() {
        let (spec, train) = tiny();
        let cfg = PretrainConfig {
            epochs: 0,
            ..PretrainConfig::default()
        };
        let (u, p, _) = pretrain_classifiers(&train, spec.num_subjects, &cfg).unwrap();
        let mut fresh = Classifier::new(spec.image_shape, 16, mix_seed(cfg.seed, 1));
        fresh.frozen_backbone = true;
        assert_eq!(u, fresh);
        assert_eq!(p.num_classes, 2);
    }

    #[test]
    fn adversarial_log_alternates_with_period() {
        let (spec, train) = tiny();
        let renderer = Renderer::new(&spec).unwrap();
        let (u, p, _) = pretrain_classifiers(&train, 16, &PretrainConfig { epochs: 1, ..Default::default() }).unwrap();
        for period in [1, 2] {
            let cfg = TrainConfig {
                alternation_period: period,
                epochs: 4,
                ..quick_cfg(TrainMode::Adversarial)
            };
            let s = SanitizerModel::new(SanitizerKind::Deterministic, &renderer, 3);
            let before = u.param_hash();
            let p_backbone = p.backbone_hash();
            let (_, p2, log) = train_adversarial(s, &u, p.clone(), spec.prior, &train, &cfg).unwrap();
            let comps = log.epoch_components();
            let expected: Vec<Component> = (0..4)
                .map(|e| if (e / period) % 2 == 0 { Component::Sanitizer } else { Component::Privacy })
                .collect();
            assert_eq!(comps, expected);
            assert_eq!(u.param_hash(), before);
            assert_eq!(p2.backbone_hash(), p_backbone);
            assert_ne!(p2.param_hash(), p.param_hash());
            assert!(log.records.windows(2).all(|w| w[0].iteration < w[1].iteration));
            assert!(log.records.iter().all(|r| r.loss_p.is_some()));
        }
    }

    #[test]
    fn plug_and_play_is_reproducible() {
        let (spec, train) = tiny();
        let renderer = Renderer::new(&spec).unwrap();
        let (u, p, _) = pretrain_classifiers(&train, 16, &PretrainConfig { epochs: 1, ..Default::default() }).unwrap();
        let cfg = quick_cfg(TrainMode::PlugAndPlay);
        let run = || {
            let s = SanitizerModel::new(SanitizerKind::Stochastic, &renderer, 5);
            train_plug_and_play(s, &u, &p, spec.prior, &train, &cfg).unwrap()
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a.param_hash(), b.param_hash());
        assert_eq!(la, lb);
    }

    #[test]
    fn collaborative_with_zero_utility_rate_matches_plug_and_play() {
        let (spec, train) = tiny();
        let renderer = Renderer::new(&spec).unwrap();
        let (u, p, _) = pretrain_classifiers(&train, 16, &PretrainConfig { epochs: 1, ..Default::default() }).unwrap();
        let mut cfg = quick_cfg(TrainMode::Collaborative);
        cfg.learning_rates.utility = 0.0;
        let s = SanitizerModel::new(SanitizerKind::Deterministic, &renderer, 5);
        let (sc, uc, lc) = train_collaborative(s.clone(), u.clone(), &p, spec.prior, &train, &cfg).unwrap();
        assert_eq!(uc.param_hash(), u.param_hash());
        let cfg_pp = TrainConfig {
            mode: TrainMode::PlugAndPlay,
            ..cfg
        };
        let (sp, lp) = train_plug_and_play(s, &u, &p, spec.prior, &train, &cfg_pp).unwrap();
        assert_eq!(sc.param_hash(), sp.param_hash());
        assert_eq!(lc.loss_s(), lp.loss_s());
    }

    #[test]
    fn collaborative_updates_only_the_utility_head() {
        let (spec, train) = tiny();
        let renderer = Renderer::new(&spec).unwrap();
        let (u, p, _) = pretrain_classifiers(&train, 16, &PretrainConfig { epochs: 1, ..Default::default() }).unwrap();
        let s = SanitizerModel::new(SanitizerKind::Deterministic, &renderer, 5);
        let (_, u2, _) = train_collaborative(s, u.clone(), &p, spec.prior, &train, &quick_cfg(TrainMode::Collaborative)).unwrap();
        assert_eq!(u2.backbone_hash(), u.backbone_hash());
        assert_ne!(u2.param_hash(), u.param_hash());
    }

    #[test]
    fn identity_sanitizer_cannot_train() {
        let (spec, train) = tiny();
        let renderer = Renderer::new(&spec).unwrap();
        let (u, p, _) = pretrain_classifiers(&train, 16, &PretrainConfig { epochs: 0, ..Default::default() }).unwrap();
        let s = SanitizerModel::stochastic(Stage::Identity, spec.image_shape, Some(renderer));
        assert!(matches!(
            train_plug_and_play(s, &u, &p, spec.prior, &train, &quick_cfg(TrainMode::PlugAndPlay)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.alternation_period = 0;
        assert!(cfg.validate().is_err());
        cfg.alternation_period = 1;
        cfg.alpha = -0.1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn train_log_csv_roundtrip() {
        let mut log = TrainLog::default();
        log.push(0, 0.5, None, Component::Sanitizer);
        log.push(1, 0.25, Some(1.5), Component::Privacy);
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("iteration,loss_s,loss_p,active_component,epoch\n"));
        assert_eq!(TrainLog::read_csv(buf.as_slice()).unwrap(), log);
    }
}
