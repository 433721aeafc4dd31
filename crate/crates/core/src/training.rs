//! CE/MM training in alternation or interpolation mode, with dev-set loss
//! tracking and best-checkpoint selection.
//!
//! Each step selects a batch, computes the cross-entropy gradient (mean
//! log-likelihood gradient over observed pairs, an ascent direction) and,
//! when the step calls for it, a moment-matching gradient (a descent
//! direction on the moment loss, estimated by the configured strategy from J
//! samples per source). Alternation applies one or the other in fixed-length
//! blocks starting with CE; interpolation applies
//! `grad_ce + lambda * (-grad_mm)` in a single update. Every `eval_every`
//! steps the dev set is scored with a fixed evaluation seed and the
//! checkpoint with the lowest sampled dev moment loss is retained.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::ParallelCorpus;
use crate::error::{Error, Result};
use crate::estimators::{ce_gradient, run_estimator, EstimatorConfig, Strategy};
use crate::features::FeatureSet;
use crate::rng::{seeded_rng, sub_seed, SeededRng};
use crate::seqmodel::{GradientVector, Sequence, TabularModel};

const STREAM_BATCH: u64 = 1;
const STREAM_MM: u64 = 2;
const STREAM_EVAL: u64 = 3;

/// How CE and MM updates are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Fixed-length CE blocks alternate with MM blocks, starting with CE.
    Alternation,
    /// Every step applies `grad_ce + lambda * grad_mm` (signs reconciled so
    /// both descend their losses).
    Interpolation,
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Interpolation weight on the MM gradient.
    pub lambda: f64,
    /// Samples per MM estimate.
    pub j: usize,
    /// Disjoint model-average samples (simplistic strategy only).
    pub k: usize,
    pub strategy: Strategy,
    pub max_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// CE block length in alternation mode; 0 means MM-only.
    pub ce_steps: usize,
    /// MM block length in alternation mode; 0 means CE-only.
    pub mm_steps: usize,
    pub eval_every: usize,
    /// Samples per dev source when approximating the dev moment loss.
    pub dev_samples: usize,
    /// Length-ratio hyperparameter used when a caller builds the default
    /// feature set from this config.
    pub beta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Interpolation,
            lambda: 0.5,
            j: 5,
            k: 2,
            strategy: Strategy::Jackknife,
            max_steps: 2000,
            batch_size: 16,
            learning_rate: 0.05,
            ce_steps: 100,
            mm_steps: 100,
            eval_every: 50,
            dev_samples: 32,
            beta: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps < 1 || self.batch_size < 1 {
            return Err(Error::InvalidParameter(
                "max_steps and batch_size must be at least 1".into(),
            ));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidParameter("lambda must be non-negative".into()));
        }
        if !self.learning_rate.is_finite() {
            return Err(Error::InvalidParameter("learning rate must be finite".into()));
        }
        if self.eval_every < 1 {
            return Err(Error::InvalidParameter("eval_every must be at least 1".into()));
        }
        if self.dev_samples < 1 {
            return Err(Error::InvalidParameter("dev_samples must be at least 1".into()));
        }
        if self.mode == TrainMode::Alternation && self.ce_steps + self.mm_steps == 0 {
            return Err(Error::InvalidParameter(
                "alternation needs a non-empty block schedule".into(),
            ));
        }
        if self.uses_mm() {
            self.estimator_config().validate()?;
        }
        Ok(())
    }

    fn estimator_config(&self) -> EstimatorConfig {
        EstimatorConfig {
            strategy: self.strategy,
            j: self.j,
            k: self.k,
            seed: self.seed,
        }
    }

    /// Whether any step of this configuration can invoke the MM machinery.
    fn uses_mm(&self) -> bool {
        match self.mode {
            TrainMode::Alternation => self.mm_steps > 0,
            TrainMode::Interpolation => self.lambda > 0.0,
        }
    }

    fn is_mm_step(&self, step: usize) -> bool {
        match self.mode {
            TrainMode::Interpolation => self.lambda > 0.0,
            TrainMode::Alternation => {
                if self.mm_steps == 0 {
                    false
                } else if self.ce_steps == 0 {
                    true
                } else {
                    (step - 1) % (self.ce_steps + self.mm_steps) >= self.ce_steps
                }
            }
        }
    }
}

/// The evaluation stream seed used for the dev metric, fixed across a run so
/// successive evaluations are comparable.
pub fn eval_seed_for(config_seed: u64) -> u64 {
    sub_seed(config_seed, STREAM_EVAL)
}

/// Which update produced the step preceding a metrics record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepMode {
    /// Recorded before any update.
    Init,
    Ce,
    Mm,
    Interpolation,
}

/// One evaluation snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Mean per-sequence negative log-likelihood over dev (x, reference)
    /// pairs.
    pub ce_loss: f64,
    /// Sampled dev moment loss.
    pub mm_loss_dev: f64,
    /// Mean sampled moment gap per feature coordinate over dev sources.
    pub mean_moment_gap: Vec<f64>,
    /// Fraction of dev sources whose greedy decode equals a reference.
    pub exact_match: f64,
    pub mode: StepMode,
    /// Cumulative count of sequences drawn by MM estimators.
    pub mm_samples: u64,
    /// Seconds since the run started; excluded from serialized streams so
    /// reruns are byte-identical.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

/// A model snapshot tagged with its evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: TabularModel,
    pub step: usize,
    pub mm_loss_dev: f64,
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: TabularModel,
    pub best: Checkpoint,
    pub metrics: Vec<MetricsRecord>,
}

/// Full dev-set evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DevReport {
    pub mm_loss: f64,
    pub mean_moment_gap: Vec<f64>,
    pub ce_loss: f64,
    pub exact_match: f64,
}

/// Scores the dev set: for each source, the feature average of `s` ancestral
/// samples is compared against the empirical reference average. Per-source
/// sample streams derive from `(seed, example index)`, so the result is
/// deterministic and independent of evaluation order.
pub fn evaluate_dev(
    model: &TabularModel,
    fs: &FeatureSet,
    dev: &ParallelCorpus,
    s: usize,
    seed: u64,
) -> Result<DevReport> {
    if dev.is_empty() {
        return Err(Error::EmptyInput("dev corpus is empty".into()));
    }
    if s < 1 {
        return Err(Error::InvalidParameter("need at least 1 dev sample".into()));
    }
    let n = dev.len() as f64;
    let mut mm_loss = 0.0;
    let mut mean_gap = vec![0.0; fs.dim()];
    let mut nll = 0.0;
    let mut pair_count = 0usize;
    let mut exact_hits = 0usize;

    for (idx, ex) in dev.examples.iter().enumerate() {
        let mut rng = seeded_rng(sub_seed(seed, idx as u64));
        let mut phi_hat = fs.evaluate(&ex.source, &model.sample(&ex.source, &mut rng))?;
        for i in 1..s {
            let phi = fs.evaluate(&ex.source, &model.sample(&ex.source, &mut rng))?;
            phi_hat.mean_update(&phi, i + 1);
        }
        let phi_bar = fs.empirical_average(&ex.source, &ex.references)?;
        let gap = phi_hat.sub(&phi_bar);
        mm_loss += gap.norm_sq();
        for (m, g) in mean_gap.iter_mut().zip(gap.values()) {
            *m += g / n;
        }
        for r in &ex.references {
            nll -= model.log_prob(&ex.source, r)?;
            pair_count += 1;
        }
        let decoded = model.greedy_decode(&ex.source);
        if ex.references.iter().any(|r| *r == decoded) {
            exact_hits += 1;
        }
    }
    Ok(DevReport {
        mm_loss: mm_loss / n,
        mean_moment_gap: mean_gap,
        ce_loss: nll / pair_count as f64,
        exact_match: exact_hits as f64 / n,
    })
}

/// Sampled approximation of the dev moment loss (the quantity tracked for
/// checkpoint selection).
pub fn dev_mm_loss(
    model: &TabularModel,
    fs: &FeatureSet,
    dev: &ParallelCorpus,
    s: usize,
    seed: u64,
) -> Result<f64> {
    Ok(evaluate_dev(model, fs, dev, s, seed)?.mm_loss)
}

/// Coordinate-wise `grad_ce + lambda * grad_mm`. Both inputs must already
/// share one sign convention (the trainer negates the MM loss gradient
/// before combining).
pub fn interpolate(
    grad_ce: &GradientVector,
    grad_mm: &GradientVector,
    lambda: f64,
) -> Result<GradientVector> {
    if grad_ce.len() != grad_mm.len() {
        return Err(Error::ShapeMismatch {
            expected: grad_ce.len(),
            actual: grad_mm.len(),
        });
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidParameter("lambda must be non-negative".into()));
    }
    let mut out = grad_ce.clone();
    out.add_scaled(grad_mm, lambda)?;
    Ok(out)
}

struct EpochBatches {
    pending: std::vec::IntoIter<Vec<usize>>,
}

impl EpochBatches {
    fn new() -> Self {
        EpochBatches {
            pending: Vec::new().into_iter(),
        }
    }

    fn next(&mut self, corpus: &ParallelCorpus, batch_size: usize, rng: &mut SeededRng) -> Vec<usize> {
        loop {
            if let Some(batch) = self.pending.next() {
                return batch;
            }
            self.pending = crate::data::batches(corpus, batch_size, rng);
        }
    }
}

/// Runs the training loop on a (typically CE-pretrained) model.
///
/// Deterministic given `(config, corpora)`: batch order, MM sampling, and
/// evaluation each own a stream derived from `config.seed`. Configurations
/// that never take an MM step leave the MM stream untouched, so a
/// `lambda = 0` interpolation run reproduces a pure-CE run bit for bit.
pub fn train(
    config: &TrainConfig,
    model: TabularModel,
    fs: &FeatureSet,
    train_corpus: &ParallelCorpus,
    dev_corpus: &ParallelCorpus,
) -> Result<TrainOutput> {
    config.validate()?;
    if train_corpus.is_empty() || dev_corpus.is_empty() {
        return Err(Error::EmptyInput("training and dev corpora must be non-empty".into()));
    }

    let mut model = model;
    let mut rng_batch = seeded_rng(sub_seed(config.seed, STREAM_BATCH));
    let mut rng_mm = seeded_rng(sub_seed(config.seed, STREAM_MM));
    let eval_seed = eval_seed_for(config.seed);
    let estimator_cfg = config.estimator_config();

    let started = Instant::now();
    let mut metrics = Vec::new();
    let mut mm_samples: u64 = 0;
    let mut batcher = EpochBatches::new();

    let record = |model: &TabularModel,
                  step: usize,
                  mode: StepMode,
                  mm_samples: u64,
                  started: &Instant|
     -> Result<MetricsRecord> {
        let dev = evaluate_dev(model, fs, dev_corpus, config.dev_samples, eval_seed)?;
        Ok(MetricsRecord {
            step,
            ce_loss: dev.ce_loss,
            mm_loss_dev: dev.mm_loss,
            mean_moment_gap: dev.mean_moment_gap,
            exact_match: dev.exact_match,
            mode,
            mm_samples,
            wall_clock_s: started.elapsed().as_secs_f64(),
        })
    };

    let initial = record(&model, 0, StepMode::Init, 0, &started)?;
    let mut best = Checkpoint {
        model: model.clone(),
        step: 0,
        mm_loss_dev: initial.mm_loss_dev,
    };
    metrics.push(initial);

    for step in 1..=config.max_steps {
        let batch = batcher.next(train_corpus, config.batch_size, &mut rng_batch);
        let mm_step = config.is_mm_step(step);

        let mode = match config.mode {
            TrainMode::Alternation if mm_step => {
                let grad_mm = batch_mm_gradient(
                    &model,
                    fs,
                    train_corpus,
                    &batch,
                    &estimator_cfg,
                    &mut rng_mm,
                    &mut mm_samples,
                )?;
                model.apply_update(&grad_mm, -config.learning_rate)?;
                StepMode::Mm
            }
            TrainMode::Alternation => {
                let grad_ce = batch_ce_gradient(&model, train_corpus, &batch)?;
                model.apply_update(&grad_ce, config.learning_rate)?;
                StepMode::Ce
            }
            TrainMode::Interpolation => {
                let grad_ce = batch_ce_gradient(&model, train_corpus, &batch)?;
                if mm_step {
                    let grad_mm = batch_mm_gradient(
                        &model,
                        fs,
                        train_corpus,
                        &batch,
                        &estimator_cfg,
                        &mut rng_mm,
                        &mut mm_samples,
                    )?;
                    let combined = interpolate(&grad_ce, &grad_mm.scaled(-1.0), config.lambda)?;
                    model.apply_update(&combined, config.learning_rate)?;
                    StepMode::Interpolation
                } else {
                    model.apply_update(&grad_ce, config.learning_rate)?;
                    StepMode::Ce
                }
            }
        };

        if step % config.eval_every == 0 || step == config.max_steps {
            let rec = record(&model, step, mode, mm_samples, &started)?;
            if rec.mm_loss_dev < best.mm_loss_dev {
                best = Checkpoint {
                    model: model.clone(),
                    step,
                    mm_loss_dev: rec.mm_loss_dev,
                };
            }
            metrics.push(rec);
        }
    }

    Ok(TrainOutput {
        model,
        best,
        metrics,
    })
}

fn batch_ce_gradient(
    model: &TabularModel,
    corpus: &ParallelCorpus,
    batch: &[usize],
) -> Result<GradientVector> {
    let pairs: Vec<(&Sequence, &Sequence)> = batch
        .iter()
        .flat_map(|&i| {
            let ex = &corpus.examples[i];
            ex.references.iter().map(move |r| (&ex.source, r))
        })
        .collect();
    ce_gradient(model, &pairs)
}

fn batch_mm_gradient(
    model: &TabularModel,
    fs: &FeatureSet,
    corpus: &ParallelCorpus,
    batch: &[usize],
    cfg: &EstimatorConfig,
    rng: &mut SeededRng,
    mm_samples: &mut u64,
) -> Result<GradientVector> {
    let mut acc = GradientVector::zeros(model.param_count());
    let weight = 1.0 / batch.len() as f64;
    for &i in batch {
        let ex = &corpus.examples[i];
        let g = run_estimator(model, fs, &ex.source, &ex.references, cfg, rng)?;
        acc.add_scaled(&g, weight)?;
        *mm_samples += cfg.samples_per_call() as u64;
    }
    Ok(acc)
}
