//! Moment-matching loss and gradient estimators, plus cross-entropy and
//! policy-gradient baselines.
//!
//! The moment-matching loss for one instance is the squared distance between
//! the model's expected feature vector and the empirical feature average,
//! `||phi_hat - phi_bar||^2`. Its gradient expands, via the log-derivative
//! trick, into an expectation over sampled sequences weighted by the
//! multiplicative score `<phi_hat - phi_bar, phi(y) - phi_bar>`:
//!
//! ```text
//! grad = 2 * E_y[ <phi_hat - phi_bar, phi(y) - phi_bar> * grad log p(y|x) ]
//! ```
//!
//! Three stochastic estimators of this expectation are provided. The
//! `simplistic` one uses two disjoint sample sets (unbiased, wasteful); the
//! `economical` one reuses a single set for both roles (biased: at J = 1 its
//! score is `||phi(y) - phi_bar||^2 >= 0`, so every sample is discouraged);
//! the leave-one-out `jackknife` one reuses a single set while staying
//! unbiased. The factor 2 and the 1/J average are kept everywhere so each
//! estimator's expectation equals the exact gradient with no rescaling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureSet, FeatureVector};
use crate::rng::{seeded_rng, SeededRng};
use crate::seqmodel::{GradientVector, Sequence, TabularModel};

/// One training instance: a source and its (non-empty) reference set.
pub type Instance<'a> = (&'a Sequence, &'a [Sequence]);

/// Which gradient estimator to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Exact,
    Simplistic,
    Economical,
    Jackknife,
}

/// Estimator selection plus its sample counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub strategy: Strategy,
    /// Sample count for the outer expectation.
    pub j: usize,
    /// Sample count for the disjoint model-average set (simplistic only).
    pub k: usize,
    /// Seed for a config-owned sampling stream.
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            strategy: Strategy::Jackknife,
            j: 5,
            k: 2,
            seed: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            Strategy::Jackknife if self.j < 2 => Err(Error::InvalidParameter(
                "jackknife requires at least 2 samples".into(),
            )),
            Strategy::Simplistic if self.j < 1 || self.k < 1 => Err(Error::InvalidParameter(
                "simplistic requires j >= 1 and k >= 1".into(),
            )),
            Strategy::Economical if self.j < 1 => Err(Error::InvalidParameter(
                "economical requires at least 1 sample".into(),
            )),
            _ => Ok(()),
        }
    }

    /// The sampling stream owned by this configuration.
    pub fn rng(&self) -> SeededRng {
        seeded_rng(self.seed)
    }

    /// Number of sequences one estimator call draws from the model.
    pub fn samples_per_call(&self) -> usize {
        match self.strategy {
            Strategy::Exact => 0,
            Strategy::Simplistic => self.k + self.j,
            Strategy::Economical | Strategy::Jackknife => self.j,
        }
    }
}

/// A deterministic reward that, unlike the multiplicative score, never reads
/// the model parameters.
pub trait RewardFn: Send + Sync {
    fn reward(&self, x: &Sequence, y: &Sequence) -> f64;
}

impl<F> RewardFn for F
where
    F: Fn(&Sequence, &Sequence) -> f64 + Send + Sync,
{
    fn reward(&self, x: &Sequence, y: &Sequence) -> f64 {
        self(x, y)
    }
}

/// The moment gap of one instance: model average, empirical average, and
/// their difference.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentGap {
    pub phi_hat: FeatureVector,
    pub phi_bar: FeatureVector,
    pub delta: FeatureVector,
}

impl MomentGap {
    /// Exact gap via support enumeration.
    pub fn exact(
        model: &TabularModel,
        fs: &FeatureSet,
        x: &Sequence,
        refs: &[Sequence],
    ) -> Result<Self> {
        let phi_hat = model_average_exact(model, fs, x)?;
        let phi_bar = fs.empirical_average(x, refs)?;
        let delta = phi_hat.sub(&phi_bar);
        Ok(MomentGap {
            phi_hat,
            phi_bar,
            delta,
        })
    }
}

/// Expected feature vector under the model distribution, by enumeration.
pub fn model_average_exact(
    model: &TabularModel,
    fs: &FeatureSet,
    x: &Sequence,
) -> Result<FeatureVector> {
    let mut acc = vec![0.0; fs.dim()];
    for (y, p) in model.enumerate_support(x)? {
        let phi = fs.evaluate(x, &y)?;
        for (a, v) in acc.iter_mut().zip(phi.values()) {
            *a += p * v;
        }
    }
    Ok(FeatureVector::new(acc))
}

/// Mean squared moment gap over a batch: `(1/N) sum_n ||delta_n||^2`.
pub fn mm_loss_exact(model: &TabularModel, fs: &FeatureSet, batch: &[Instance]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("mm loss needs a non-empty batch".into()));
    }
    let mut total = 0.0;
    for (x, refs) in batch {
        let gap = MomentGap::exact(model, fs, x, refs)?;
        total += gap.delta.norm_sq();
    }
    Ok(total / batch.len() as f64)
}

/// The scalar weight attached to one sampled sequence's log-probability
/// gradient: `<phi_hat - phi_bar, phi_y - phi_bar>`. Through `phi_hat` it
/// depends on the model parameters, which is what separates it from an RL
/// reward.
pub fn multiplicative_score(
    phi_hat: &FeatureVector,
    phi_bar: &FeatureVector,
    phi_y: &FeatureVector,
) -> Result<f64> {
    if phi_hat.dim() != phi_bar.dim() {
        return Err(Error::ShapeMismatch {
            expected: phi_hat.dim(),
            actual: phi_bar.dim(),
        });
    }
    if phi_y.dim() != phi_bar.dim() {
        return Err(Error::ShapeMismatch {
            expected: phi_bar.dim(),
            actual: phi_y.dim(),
        });
    }
    let mut score = 0.0;
    for i in 0..phi_hat.dim() {
        score += (phi_hat.values()[i] - phi_bar.values()[i])
            * (phi_y.values()[i] - phi_bar.values()[i]);
    }
    Ok(score)
}

/// Exact loss gradient for one instance, including the factor 2:
/// `2 * sum_y p(y|x) * score(y) * grad log p(y|x)`.
pub fn mm_gradient_instance_exact(
    model: &TabularModel,
    fs: &FeatureSet,
    x: &Sequence,
    refs: &[Sequence],
) -> Result<GradientVector> {
    let gap = MomentGap::exact(model, fs, x, refs)?;
    let mut acc = GradientVector::zeros(model.param_count());
    for (y, p) in model.enumerate_support(x)? {
        let phi_y = fs.evaluate(x, &y)?;
        let score = multiplicative_score(&gap.phi_hat, &gap.phi_bar, &phi_y)?;
        let weight = 2.0 * p * score;
        if weight != 0.0 {
            let g = model.grad_log_prob(x, &y)?;
            acc.add_scaled(&g, weight)?;
        }
    }
    Ok(acc)
}

/// Exact loss gradient averaged over a batch.
pub fn mm_gradient_exact(
    model: &TabularModel,
    fs: &FeatureSet,
    batch: &[Instance],
) -> Result<GradientVector> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("mm gradient needs a non-empty batch".into()));
    }
    let mut acc = GradientVector::zeros(model.param_count());
    let weight = 1.0 / batch.len() as f64;
    for (x, refs) in batch {
        let g = mm_gradient_instance_exact(model, fs, x, refs)?;
        acc.add_scaled(&g, weight)?;
    }
    Ok(acc)
}

/// Leave-one-out mean: the average of all vectors except `leave_out`.
pub fn jackknife_average(features: &[FeatureVector], leave_out: usize) -> Result<FeatureVector> {
    if features.len() < 2 {
        return Err(Error::InvalidParameter(
            "jackknife average requires at least 2 vectors".into(),
        ));
    }
    if leave_out >= features.len() {
        return Err(Error::InvalidParameter(format!(
            "leave-out index {leave_out} out of range for {} vectors",
            features.len()
        )));
    }
    let mut mean: Option<FeatureVector> = None;
    let mut n = 0;
    for (i, f) in features.iter().enumerate() {
        if i == leave_out {
            continue;
        }
        n += 1;
        match &mut mean {
            None => mean = Some(f.clone()),
            Some(m) => m.mean_update(f, n),
        }
    }
    Ok(mean.expect("at least one vector remains"))
}

/// Unbiased leave-one-out gradient estimator. Draws J i.i.d. samples and
/// weights each sample's log-probability gradient by the multiplicative
/// score built from the mean of the other J-1 samples; its expectation over
/// draws equals [`mm_gradient_instance_exact`].
pub fn mm_gradient_jackknife<R: Rng + ?Sized>(
    model: &TabularModel,
    fs: &FeatureSet,
    x: &Sequence,
    refs: &[Sequence],
    j: usize,
    rng: &mut R,
) -> Result<GradientVector> {
    if j < 2 {
        return Err(Error::InvalidParameter(
            "jackknife requires at least 2 samples".into(),
        ));
    }
    let phi_bar = fs.empirical_average(x, refs)?;
    let samples: Vec<Sequence> = (0..j).map(|_| model.sample(x, rng)).collect();
    let phis: Vec<FeatureVector> = samples
        .iter()
        .map(|y| fs.evaluate(x, y))
        .collect::<Result<_>>()?;
    let mut acc = GradientVector::zeros(model.param_count());
    let outer = 2.0 / j as f64;
    for (idx, y) in samples.iter().enumerate() {
        let loo = jackknife_average(&phis, idx)?;
        let score = multiplicative_score(&loo, &phi_bar, &phis[idx])?;
        if score != 0.0 {
            let g = model.grad_log_prob(x, y)?;
            acc.add_scaled(&g, outer * score)?;
        }
    }
    Ok(acc)
}

/// Unbiased two-sample-set estimator: the model average comes from K fresh
/// samples, the outer expectation from J further independent samples.
pub fn mm_gradient_simplistic<R: Rng + ?Sized>(
    model: &TabularModel,
    fs: &FeatureSet,
    x: &Sequence,
    refs: &[Sequence],
    j: usize,
    k: usize,
    rng: &mut R,
) -> Result<GradientVector> {
    if j < 1 || k < 1 {
        return Err(Error::InvalidParameter(
            "simplistic requires j >= 1 and k >= 1".into(),
        ));
    }
    let phi_bar = fs.empirical_average(x, refs)?;

    let mut phi_hat = FeatureVector::zeros(fs.dim());
    for i in 0..k {
        let y = model.sample(x, rng);
        let phi = fs.evaluate(x, &y)?;
        if i == 0 {
            phi_hat = phi;
        } else {
            phi_hat.mean_update(&phi, i + 1);
        }
    }

    let mut acc = GradientVector::zeros(model.param_count());
    let outer = 2.0 / j as f64;
    for _ in 0..j {
        let y = model.sample(x, rng);
        let phi_y = fs.evaluate(x, &y)?;
        let score = multiplicative_score(&phi_hat, &phi_bar, &phi_y)?;
        if score != 0.0 {
            let g = model.grad_log_prob(x, &y)?;
            acc.add_scaled(&g, outer * score)?;
        }
    }
    Ok(acc)
}

/// Biased single-set estimator, implemented deliberately to exhibit the
/// bias: the full-sample mean (including the current sample) serves as the
/// model average in every term. At J = 1 each term's score reduces to
/// `||phi(y) - phi_bar||^2 >= 0`.
pub fn mm_gradient_economical<R: Rng + ?Sized>(
    model: &TabularModel,
    fs: &FeatureSet,
    x: &Sequence,
    refs: &[Sequence],
    j: usize,
    rng: &mut R,
) -> Result<GradientVector> {
    if j < 1 {
        return Err(Error::InvalidParameter(
            "economical requires at least 1 sample".into(),
        ));
    }
    let phi_bar = fs.empirical_average(x, refs)?;
    let samples: Vec<Sequence> = (0..j).map(|_| model.sample(x, rng)).collect();
    let phis: Vec<FeatureVector> = samples
        .iter()
        .map(|y| fs.evaluate(x, y))
        .collect::<Result<_>>()?;

    let mut phi_hat = phis[0].clone();
    for (i, phi) in phis.iter().enumerate().skip(1) {
        phi_hat.mean_update(phi, i + 1);
    }

    let mut acc = GradientVector::zeros(model.param_count());
    let outer = 2.0 / j as f64;
    for (idx, y) in samples.iter().enumerate() {
        let score = multiplicative_score(&phi_hat, &phi_bar, &phis[idx])?;
        if score != 0.0 {
            let g = model.grad_log_prob(x, y)?;
            acc.add_scaled(&g, outer * score)?;
        }
    }
    Ok(acc)
}

/// Mean log-likelihood gradient over observed pairs (ascent direction).
pub fn ce_gradient(model: &TabularModel, batch: &[(&Sequence, &Sequence)]) -> Result<GradientVector> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("ce gradient needs a non-empty batch".into()));
    }
    let mut acc = GradientVector::zeros(model.param_count());
    let weight = 1.0 / batch.len() as f64;
    for (x, y) in batch {
        let g = model.grad_log_prob(x, y)?;
        acc.add_scaled(&g, weight)?;
    }
    Ok(acc)
}

/// Policy-gradient estimator `(1/J) sum_j R(y_j) grad log p(y_j|x)` with
/// samples drawn from the model. The reward never depends on the parameters.
pub fn rl_pg_gradient<R: Rng + ?Sized>(
    model: &TabularModel,
    reward: &dyn RewardFn,
    x: &Sequence,
    j: usize,
    rng: &mut R,
) -> Result<GradientVector> {
    if j < 1 {
        return Err(Error::InvalidParameter(
            "policy gradient requires at least 1 sample".into(),
        ));
    }
    let mut acc = GradientVector::zeros(model.param_count());
    let weight = 1.0 / j as f64;
    for _ in 0..j {
        let y = model.sample(x, rng);
        let r = reward.reward(x, &y);
        if r != 0.0 {
            let g = model.grad_log_prob(x, &y)?;
            acc.add_scaled(&g, weight * r)?;
        }
    }
    Ok(acc)
}

/// Exact expectation of the policy gradient, by enumeration:
/// `sum_y p(y|x) R(y) grad log p(y|x)`.
pub fn rl_pg_gradient_exact(
    model: &TabularModel,
    reward: &dyn RewardFn,
    x: &Sequence,
) -> Result<GradientVector> {
    let mut acc = GradientVector::zeros(model.param_count());
    for (y, p) in model.enumerate_support(x)? {
        let r = reward.reward(x, &y);
        if r != 0.0 && p != 0.0 {
            let g = model.grad_log_prob(x, &y)?;
            acc.add_scaled(&g, p * r)?;
        }
    }
    Ok(acc)
}

/// Runs the estimator selected by `cfg` on one instance.
pub fn run_estimator<R: Rng + ?Sized>(
    model: &TabularModel,
    fs: &FeatureSet,
    x: &Sequence,
    refs: &[Sequence],
    cfg: &EstimatorConfig,
    rng: &mut R,
) -> Result<GradientVector> {
    cfg.validate()?;
    match cfg.strategy {
        Strategy::Exact => mm_gradient_instance_exact(model, fs, x, refs),
        Strategy::Simplistic => mm_gradient_simplistic(model, fs, x, refs, cfg.j, cfg.k, rng),
        Strategy::Economical => mm_gradient_economical(model, fs, x, refs, cfg.j, rng),
        Strategy::Jackknife => mm_gradient_jackknife(model, fs, x, refs, cfg.j, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{ConstantFeature, FeatureSet, LengthRatio, TargetLength};
    use crate::instances::{random_instance, standard_tiny_instance};
    use crate::rng::seeded_rng;
    use crate::seqmodel::{TabularModel, Vocabulary};
    use crate::verification::{finite_difference_gradient, max_relative_error, RunningStats};

    fn seq(ids: &[usize]) -> Sequence {
        Sequence::new(ids.to_vec())
    }

    fn length_features() -> FeatureSet {
        let mut fs = FeatureSet::new();
        fs.push(TargetLength);
        fs
    }

    fn constant_features(value: f64) -> FeatureSet {
        let mut fs = FeatureSet::new();
        fs.push(ConstantFeature { value });
        fs
    }

    /// Unconditional model over {a} + eos with max_len 1: support {"", "a"}.
    fn coin_model() -> TabularModel {
        let v = Vocabulary::with_eos(&["a"]).unwrap();
        TabularModel::new(v.clone(), v, 1, 1).unwrap()
    }

    #[test]
    fn model_average_of_deterministic_model() {
        let inst = standard_tiny_instance();
        let mut model = inst.model.clone();
        let y = seq(&[0, 1]);
        model.make_deterministic(&inst.source, &y).unwrap();
        let avg = model_average_exact(&model, &inst.features, &inst.source).unwrap();
        let phi = inst.features.evaluate(&inst.source, &y).unwrap();
        for (a, b) in avg.values().iter().zip(phi.values()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn model_average_uniform_two_atoms() {
        // support {"", "a"} with equal mass; target length is 0 or 1
        let model = coin_model();
        let avg = model_average_exact(&model, &length_features(), &Sequence::empty()).unwrap();
        assert!((avg.values()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn model_average_matches_monte_carlo() {
        let inst = standard_tiny_instance();
        let exact = model_average_exact(&inst.model, &inst.features, &inst.source).unwrap();
        let mut rng = seeded_rng(4242);
        let mut stats: Vec<RunningStats> = vec![RunningStats::new(); exact.dim()];
        let n = 1_000_000;
        for _ in 0..n {
            let y = inst.model.sample(&inst.source, &mut rng);
            let phi = inst.features.evaluate(&inst.source, &y).unwrap();
            for (s, v) in stats.iter_mut().zip(phi.values()) {
                s.push(*v);
            }
        }
        for (i, s) in stats.iter().enumerate() {
            let z = (s.mean() - exact.values()[i]) / s.standard_error().max(1e-12);
            assert!(z.abs() < 4.0, "coordinate {i}: z = {z}");
        }
    }

    #[test]
    fn mm_loss_zero_for_constant_feature() {
        let inst = standard_tiny_instance();
        let fs = constant_features(3.0);
        let batch = [(&inst.source, inst.references.as_slice())];
        assert_eq!(mm_loss_exact(&inst.model, &fs, &batch).unwrap(), 0.0);
    }

    #[test]
    fn mm_loss_is_squared_gap_norm() {
        // Engineer delta = [0.3, -0.4]: coin model has E|y| = 0.5 and the
        // single reference "a" has |y| = 1, so scaled length features give
        // delta = (0.5 - 1) * scale.
        let model = coin_model();
        let mut fs = FeatureSet::new();
        fs.push_scaled(TargetLength, -0.6);
        fs.push_scaled(TargetLength, 0.8);
        let x = Sequence::empty();
        let refs = [seq(&[0])];
        let batch = [(&x, refs.as_slice())];
        let loss = mm_loss_exact(&model, &fs, &batch).unwrap();
        assert!((loss - 0.25).abs() < 1e-12);
    }

    #[test]
    fn mm_loss_zero_when_mode_matches_reference() {
        let inst = standard_tiny_instance();
        let mut model = inst.model.clone();
        model
            .make_deterministic(&inst.source, &inst.references[0])
            .unwrap();
        let batch = [(&inst.source, inst.references.as_slice())];
        let loss = mm_loss_exact(&model, &inst.features, &batch).unwrap();
        assert!(loss < 1e-9);
    }

    #[test]
    fn multiplicative_score_cases() {
        let hat = FeatureVector::new(vec![0.7]);
        let bar = FeatureVector::new(vec![0.5]);
        let y = FeatureVector::new(vec![1.0]);
        assert!((multiplicative_score(&hat, &bar, &y).unwrap() - 0.1).abs() < 1e-12);

        assert_eq!(multiplicative_score(&bar, &bar, &y).unwrap(), 0.0);

        // J = 1 economical degenerate case: phi_hat == phi_y
        let s = multiplicative_score(&y, &bar, &y).unwrap();
        assert!((s - 0.25).abs() < 1e-12);
        assert!(s > 0.0);

        let short = FeatureVector::new(vec![1.0, 2.0]);
        assert!(matches!(
            multiplicative_score(&short, &bar, &y),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn exact_gradient_zero_for_constant_feature() {
        let inst = standard_tiny_instance();
        let fs = constant_features(1.5);
        let g = mm_gradient_instance_exact(&inst.model, &fs, &inst.source, &inst.references)
            .unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn exact_gradient_zero_when_moments_match() {
        // coin model, length feature, references averaging to E|y| = 0.5
        let model = coin_model();
        let fs = length_features();
        let x = Sequence::empty();
        let refs = [seq(&[]), seq(&[0])];
        let g = mm_gradient_instance_exact(&model, &fs, &x, &refs).unwrap();
        assert!(g.max_abs() < 1e-10);
    }

    #[test]
    fn exact_gradient_matches_finite_differences() {
        for seed in 0..3u64 {
            let inst = random_instance(seed);
            let batch = [(&inst.source, inst.references.as_slice())];
            let grad = mm_gradient_exact(&inst.model, &inst.features, &batch).unwrap();
            let params = inst.model.params().to_vec();
            let fd = finite_difference_gradient(
                |p| {
                    let mut m = inst.model.clone();
                    m.set_params(p).unwrap();
                    mm_loss_exact(&m, &inst.features, &batch)
                },
                &params,
                1e-5,
            )
            .unwrap();
            let err = max_relative_error(grad.values(), &fd);
            assert!(err <= 1e-5, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn jackknife_average_cases() {
        let f = |v: f64| FeatureVector::new(vec![v]);
        let xs = [f(1.0), f(2.0), f(4.0)];
        assert_eq!(jackknife_average(&xs, 0).unwrap().values(), &[3.0]);

        let pair = [f(1.0), f(7.0)];
        assert_eq!(jackknife_average(&pair, 0).unwrap().values(), &[7.0]);
        assert_eq!(jackknife_average(&pair, 1).unwrap().values(), &[1.0]);

        let same = [f(2.5), f(2.5), f(2.5)];
        assert_eq!(jackknife_average(&same, 1).unwrap().values(), &[2.5]);

        assert!(jackknife_average(&pair[..1], 0).is_err());
        assert!(jackknife_average(&xs, 3).is_err());
    }

    #[test]
    fn jackknife_gradient_zero_for_constant_feature() {
        let inst = standard_tiny_instance();
        let fs = constant_features(2.0);
        let g = mm_gradient_jackknife(
            &inst.model,
            &fs,
            &inst.source,
            &inst.references,
            3,
            &mut seeded_rng(1),
        )
        .unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn jackknife_gradient_zero_when_samples_equal_reference() {
        let inst = standard_tiny_instance();
        let mut model = inst.model.clone();
        model
            .make_deterministic(&inst.source, &inst.references[0])
            .unwrap();
        let g = mm_gradient_jackknife(
            &model,
            &inst.features,
            &inst.source,
            &inst.references,
            2,
            &mut seeded_rng(5),
        )
        .unwrap();
        // phi(y_j) - phi_bar = 0 for both samples, so every term vanishes
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn jackknife_requires_two_samples() {
        let inst = standard_tiny_instance();
        assert!(mm_gradient_jackknife(
            &inst.model,
            &inst.features,
            &inst.source,
            &inst.references,
            1,
            &mut seeded_rng(0),
        )
        .is_err());
    }

    #[test]
    fn simplistic_gradient_trivial_cases() {
        let inst = standard_tiny_instance();
        let fs = constant_features(0.7);
        let g = mm_gradient_simplistic(
            &inst.model,
            &fs,
            &inst.source,
            &inst.references,
            1,
            1,
            &mut seeded_rng(2),
        )
        .unwrap();
        assert_eq!(g.max_abs(), 0.0);

        let mut model = inst.model.clone();
        model
            .make_deterministic(&inst.source, &inst.references[0])
            .unwrap();
        let g = mm_gradient_simplistic(
            &model,
            &inst.features,
            &inst.source,
            &inst.references,
            1,
            1,
            &mut seeded_rng(3),
        )
        .unwrap();
        assert!(g.max_abs() < 1e-10);
    }

    #[test]
    fn economical_score_identity_at_j1() {
        let inst = crate::instances::designed_unmatched_instance();
        let phi_bar = inst
            .features
            .empirical_average(&inst.source, &inst.references)
            .unwrap();
        let mut rng = seeded_rng(11);
        for _ in 0..200 {
            let y = inst.model.sample(&inst.source, &mut rng);
            let phi_y = inst.features.evaluate(&inst.source, &y).unwrap();
            let score = multiplicative_score(&phi_y, &phi_bar, &phi_y).unwrap();
            let norm = phi_y.sub(&phi_bar).norm_sq();
            assert_eq!(score.to_bits(), norm.to_bits());
            if phi_y != phi_bar {
                assert!(score > 0.0);
            } else {
                assert_eq!(score, 0.0);
            }
        }
    }

    #[test]
    fn economical_expectation_differs_from_exact_gradient() {
        // enumerate E[economical estimate] at J = 1 and compare with the
        // true gradient; the designed instance keeps them far apart
        let inst = crate::instances::designed_unmatched_instance();
        let phi_bar = inst
            .features
            .empirical_average(&inst.source, &inst.references)
            .unwrap();
        let mut expectation = GradientVector::zeros(inst.model.param_count());
        for (y, p) in inst.model.enumerate_support(&inst.source).unwrap() {
            let phi_y = inst.features.evaluate(&inst.source, &y).unwrap();
            let score = phi_y.sub(&phi_bar).norm_sq();
            if score != 0.0 {
                let g = inst.model.grad_log_prob(&inst.source, &y).unwrap();
                expectation.add_scaled(&g, 2.0 * p * score).unwrap();
            }
        }
        let exact =
            mm_gradient_instance_exact(&inst.model, &inst.features, &inst.source, &inst.references)
                .unwrap();
        let gap: f64 = expectation
            .values()
            .iter()
            .zip(exact.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(gap > 1e-2, "expected a visible bias, gap = {gap}");
    }

    #[test]
    fn ce_gradient_single_pair_softmax_identity() {
        let model = coin_model();
        let x = Sequence::empty();
        let y = seq(&[0]);
        let g = ce_gradient(&model, &[(&x, &y)]).unwrap();
        let nonzero: Vec<f64> = g.values().iter().copied().filter(|v| *v != 0.0).collect();
        assert_eq!(nonzero.len(), 2);
        assert!((nonzero[0] - 0.5).abs() < 1e-12);
        assert!((nonzero[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn ce_gradient_near_zero_on_fitted_model() {
        let inst = standard_tiny_instance();
        let mut model = inst.model.clone();
        model
            .make_deterministic(&inst.source, &inst.references[0])
            .unwrap();
        let g = ce_gradient(&model, &[(&inst.source, &inst.references[0])]).unwrap();
        assert!(g.max_abs() < 1e-6);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        for seed in 0..3u64 {
            let inst = random_instance(100 + seed);
            let mut rng = seeded_rng(seed);
            let y1 = inst.model.sample(&inst.source, &mut rng);
            let y2 = inst.model.sample(&inst.source, &mut rng);
            let batch = [(&inst.source, &y1), (&inst.source, &y2)];
            let grad = ce_gradient(&inst.model, &batch).unwrap();
            let params = inst.model.params().to_vec();
            let fd = finite_difference_gradient(
                |p| {
                    let mut m = inst.model.clone();
                    m.set_params(p).unwrap();
                    let mut total = 0.0;
                    for (x, y) in &batch {
                        total += m.log_prob(x, y)?;
                    }
                    Ok(total / batch.len() as f64)
                },
                &params,
                1e-5,
            )
            .unwrap();
            let err = max_relative_error(grad.values(), &fd);
            assert!(err <= 1e-6, "seed {seed}: relative error {err}");
        }
    }

    #[test]
    fn rl_gradient_zero_reward() {
        let inst = standard_tiny_instance();
        let zero = |_: &Sequence, _: &Sequence| 0.0;
        let g = rl_pg_gradient(&inst.model, &zero, &inst.source, 8, &mut seeded_rng(9)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn rl_exact_constant_reward_is_zero_mean() {
        let inst = standard_tiny_instance();
        let one = |_: &Sequence, _: &Sequence| 1.0;
        let g = rl_pg_gradient_exact(&inst.model, &one, &inst.source).unwrap();
        assert!(g.max_abs() < 1e-8);
    }

    #[test]
    fn rl_monte_carlo_matches_enumeration() {
        let inst = standard_tiny_instance();
        let length = |_: &Sequence, y: &Sequence| y.len() as f64;
        let exact = rl_pg_gradient_exact(&inst.model, &length, &inst.source).unwrap();

        let replicates = 50_000;
        let mut stats = vec![RunningStats::new(); exact.len()];
        for r in 0..replicates {
            let mut rng = seeded_rng(crate::rng::sub_seed(777, r));
            let g = rl_pg_gradient(&inst.model, &length, &inst.source, 2, &mut rng).unwrap();
            for (s, v) in stats.iter_mut().zip(g.values()) {
                s.push(*v);
            }
        }
        for (i, s) in stats.iter().enumerate() {
            let se = s.standard_error();
            if se == 0.0 {
                assert_eq!(s.mean(), exact.values()[i]);
            } else {
                let z = (s.mean() - exact.values()[i]) / se;
                assert!(z.abs() < 4.5, "coordinate {i}: z = {z}");
            }
        }
    }

    #[test]
    fn scale_equivariance_of_loss_and_gradient() {
        let inst = random_instance(4);
        let batch = [(&inst.source, inst.references.as_slice())];
        let base_loss = mm_loss_exact(&inst.model, &inst.features, &batch).unwrap();
        let base_grad = mm_gradient_exact(&inst.model, &inst.features, &batch).unwrap();
        for c in [0.5, 2.0, 3.0] {
            let scaled = inst.features.rescaled(c);
            let loss = mm_loss_exact(&inst.model, &scaled, &batch).unwrap();
            let grad = mm_gradient_exact(&inst.model, &scaled, &batch).unwrap();
            assert!((loss - c * c * base_loss).abs() <= 1e-9 * base_loss.max(1.0));
            for (a, b) in grad.values().iter().zip(base_grad.values()) {
                assert!((a - c * c * b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn exact_gradient_step_descends_loss() {
        for seed in 0..20u64 {
            let inst = random_instance(200 + seed);
            let batch = [(&inst.source, inst.references.as_slice())];
            let before = mm_loss_exact(&inst.model, &inst.features, &batch).unwrap();
            let grad = mm_gradient_exact(&inst.model, &inst.features, &batch).unwrap();
            let mut model = inst.model.clone();
            model.apply_update(&grad, -1e-2).unwrap();
            let after = mm_loss_exact(&model, &inst.features, &batch).unwrap();
            assert!(
                after <= before + 1e-12,
                "seed {seed}: loss rose {before} -> {after}"
            );
        }
    }

    #[test]
    fn run_estimator_dispatch_and_validation() {
        let inst = standard_tiny_instance();
        let mut rng = seeded_rng(0);
        let exact_cfg = EstimatorConfig {
            strategy: Strategy::Exact,
            ..EstimatorConfig::default()
        };
        let via_dispatch = run_estimator(
            &inst.model,
            &inst.features,
            &inst.source,
            &inst.references,
            &exact_cfg,
            &mut rng,
        )
        .unwrap();
        let direct =
            mm_gradient_instance_exact(&inst.model, &inst.features, &inst.source, &inst.references)
                .unwrap();
        assert_eq!(via_dispatch, direct);

        let bad = EstimatorConfig {
            strategy: Strategy::Jackknife,
            j: 1,
            ..EstimatorConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(bad.samples_per_call(), 1);
        assert_eq!(exact_cfg.samples_per_call(), 0);
        assert_eq!(
            EstimatorConfig {
                strategy: Strategy::Simplistic,
                j: 3,
                k: 2,
                seed: 0
            }
            .samples_per_call(),
            5
        );
    }
}
