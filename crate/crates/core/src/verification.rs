//! Independent numerical oracles: central finite differences, Monte Carlo
//! unbiasedness reports, leave-one-out estimator checks, and sampler
//! frequency tests.
//!
//! Replicated computations derive one sub-seed per replicate index, so
//! results are identical regardless of worker count or scheduling. Partial
//! statistics are merged in fixed chunk order.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::estimators::{mm_gradient_instance_exact, run_estimator, EstimatorConfig, Strategy};
use crate::features::{FeatureSet, FeatureVector};
use crate::rng::{seeded_rng, sub_seed};
use crate::seqmodel::{Sequence, TabularModel};

/// Fewest replicates accepted by [`estimator_bias_report`]; below this the
/// z-scores are too noisy to be conclusive.
pub const MIN_REPLICATES: usize = 10_000;

/// Replicate count at which the statistical pass rule is calibrated.
pub const DEFAULT_REPLICATES: usize = 200_000;

const CHUNK: usize = 1024;

/// Welford accumulator for a stream of scalars.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct RunningStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        RunningStats::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Merges another accumulator into this one (Chan's parallel update).
    pub fn merge(&mut self, other: &RunningStats) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n1 = self.n as f64;
        let n2 = other.n as f64;
        let n = n1 + n2;
        let delta = other.mean - self.mean;
        self.mean += delta * n2 / n;
        self.m2 += other.m2 + delta * delta * n1 * n2 / n;
        self.n += other.n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn standard_error(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

/// Central finite differences of a scalar loss:
/// `(loss(p + h e_i) - loss(p - h e_i)) / (2h)` per coordinate.
pub fn finite_difference_gradient<F>(mut loss: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidParameter("step size h must be positive".into()));
    }
    let mut grad = Vec::with_capacity(params.len());
    let mut point = params.to_vec();
    for i in 0..params.len() {
        point[i] = params[i] + h;
        let plus = loss(&point)?;
        point[i] = params[i] - h;
        let minus = loss(&point)?;
        point[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss at perturbed coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest coordinate-wise relative error, with a unit floor on the
/// denominator: `max_i |a_i - b_i| / max(1, |a_i|, |b_i|)`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "vector length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Per-coordinate Monte Carlo summary of an estimator against an exact
/// reference.
///
/// `z_scores[i] = (means[i] - exact[i]) / std_errors[i]`; coordinates with
/// zero standard error get z = 0 when the mean equals the reference exactly
/// and an infinite z otherwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasReport {
    pub means: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub exact: Vec<f64>,
    pub z_scores: Vec<f64>,
    pub replicates: usize,
    pub max_abs_z: f64,
    pub fraction_within_4: f64,
}

impl BiasReport {
    /// Builds the report from per-coordinate accumulators and the reference.
    pub fn from_stats(stats: &[RunningStats], exact: &[f64], replicates: usize) -> Self {
        assert_eq!(stats.len(), exact.len(), "dimension mismatch");
        let means: Vec<f64> = stats.iter().map(RunningStats::mean).collect();
        let std_errors: Vec<f64> = stats.iter().map(RunningStats::standard_error).collect();
        let z_scores: Vec<f64> = means
            .iter()
            .zip(&std_errors)
            .zip(exact)
            .map(|((m, se), e)| {
                if *se > 0.0 {
                    (m - e) / se
                } else if m == e {
                    0.0
                } else {
                    f64::INFINITY * (m - e).signum()
                }
            })
            .collect();
        let max_abs_z = z_scores.iter().map(|z| z.abs()).fold(0.0, f64::max);
        let within = z_scores.iter().filter(|z| z.abs() <= 4.0).count();
        let fraction_within_4 = if z_scores.is_empty() {
            1.0
        } else {
            within as f64 / z_scores.len() as f64
        };
        BiasReport {
            means,
            std_errors,
            exact: exact.to_vec(),
            z_scores,
            replicates,
            max_abs_z,
            fraction_within_4,
        }
    }

    /// Statistical pass rule for unbiased estimators, calibrated at
    /// [`DEFAULT_REPLICATES`]: at least 99% of coordinates within |z| <= 4
    /// and no coordinate beyond |z| = 6.
    pub fn passes_unbiasedness_rule(&self) -> bool {
        self.fraction_within_4 >= 0.99 && self.max_abs_z <= 6.0
    }

    /// True when every coordinate reproduced the reference with zero
    /// variance (the exact strategy wrapped as an estimator).
    pub fn is_exact_match(&self) -> bool {
        self.std_errors.iter().all(|se| *se == 0.0)
            && self.means.iter().zip(&self.exact).all(|(m, e)| m == e)
    }
}

/// Runs per-replicate vectors through chunked, order-stable Welford
/// accumulation. `f(replicate_index)` must be pure given the index.
fn replicate_stats<F>(replicates: usize, dim: usize, f: F) -> Result<Vec<RunningStats>>
where
    F: Fn(usize) -> Result<Vec<f64>> + Sync,
{
    let chunks = replicates.div_ceil(CHUNK);
    let partials: Vec<Vec<RunningStats>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(replicates);
            let mut acc = vec![RunningStats::new(); dim];
            for r in lo..hi {
                let v = f(r)?;
                debug_assert_eq!(v.len(), dim);
                for (s, x) in acc.iter_mut().zip(v) {
                    s.push(x);
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut merged = vec![RunningStats::new(); dim];
    for part in partials {
        for (m, p) in merged.iter_mut().zip(&part) {
            m.merge(p);
        }
    }
    Ok(merged)
}

/// Replicates the configured estimator and reports per-coordinate z-scores
/// against the exact per-instance gradient (factor 2 included).
///
/// Replicate `r` runs with the sub-seed derived from `(seed, r)`, so the
/// report is independent of thread count.
pub fn estimator_bias_report(
    model: &TabularModel,
    fs: &FeatureSet,
    x: &Sequence,
    refs: &[Sequence],
    cfg: &EstimatorConfig,
    replicates: usize,
    seed: u64,
) -> Result<BiasReport> {
    cfg.validate()?;
    if replicates < MIN_REPLICATES {
        return Err(Error::InvalidParameter(format!(
            "inconclusive: {replicates} replicates is below the minimum of {MIN_REPLICATES}"
        )));
    }
    let exact = mm_gradient_instance_exact(model, fs, x, refs)?;
    let dim = exact.len();

    let stats = if cfg.strategy == Strategy::Exact {
        // the estimator ignores its random stream; replicate the value cheaply
        let value = exact.values().to_vec();
        replicate_stats(replicates, dim, |_| Ok(value.clone()))?
    } else {
        replicate_stats(replicates, dim, |r| {
            let mut rng = seeded_rng(sub_seed(seed, r as u64));
            let g = run_estimator(model, fs, x, refs, cfg, &mut rng)?;
            Ok(g.values().to_vec())
        })?
    };
    Ok(BiasReport::from_stats(&stats, exact.values(), replicates))
}

/// Any deterministic vector-valued function of a sequence.
pub trait ZetaFn: Send + Sync {
    fn eval(&self, y: &Sequence) -> Vec<f64>;
}

impl<F> ZetaFn for F
where
    F: Fn(&Sequence) -> Vec<f64> + Send + Sync,
{
    fn eval(&self, y: &Sequence) -> Vec<f64> {
        self(y)
    }
}

/// Exact value of `A = E_y[ <phi_hat, phi(y)> zeta(y) ]` with
/// `phi_hat = E_y[phi(y)]`, by enumeration over the unconditional support
/// (empty source). Raw features, no centering.
pub fn lemma1_reference(
    model: &TabularModel,
    fs: &FeatureSet,
    zeta: &dyn ZetaFn,
) -> Result<Vec<f64>> {
    let x = Sequence::empty();
    let support = model.enumerate_support(&x)?;
    let mut phi_hat = vec![0.0; fs.dim()];
    let mut phis = Vec::with_capacity(support.len());
    for (y, p) in &support {
        let phi = fs.evaluate(&x, y)?;
        for (a, v) in phi_hat.iter_mut().zip(phi.values()) {
            *a += p * v;
        }
        phis.push(phi);
    }
    let phi_hat = FeatureVector::new(phi_hat);
    let dim = zeta.eval(&support[0].0).len();
    let mut a = vec![0.0; dim];
    for ((y, p), phi) in support.iter().zip(&phis) {
        let inner = phi_hat.dot(phi);
        let z = zeta.eval(y);
        if z.len() != dim {
            return Err(Error::ShapeMismatch {
                expected: dim,
                actual: z.len(),
            });
        }
        for (acc, zv) in a.iter_mut().zip(z) {
            *acc += p * inner * zv;
        }
    }
    Ok(a)
}

/// Monte Carlo check of the leave-one-out unbiasedness identity: the
/// replicate mean of
/// `B = (1/J) sum_i <phi_loo(-i), phi(y_i)> zeta(y_i)`
/// over J i.i.d. draws is compared with the enumerated `A` of
/// [`lemma1_reference`]. Raw features, unconditional model.
pub fn lemma1_check(
    model: &TabularModel,
    fs: &FeatureSet,
    zeta: &dyn ZetaFn,
    j: usize,
    replicates: usize,
    seed: u64,
) -> Result<BiasReport> {
    if j < 2 {
        return Err(Error::InvalidParameter(
            "the leave-one-out identity requires at least 2 samples".into(),
        ));
    }
    if replicates == 0 {
        return Err(Error::InvalidParameter("need at least 1 replicate".into()));
    }
    let exact = lemma1_reference(model, fs, zeta)?;
    let dim = exact.len();
    let x = Sequence::empty();

    let stats = replicate_stats(replicates, dim, |r| {
        let mut rng = seeded_rng(sub_seed(seed, r as u64));
        let samples: Vec<Sequence> = (0..j).map(|_| model.sample(&x, &mut rng)).collect();
        let phis: Vec<FeatureVector> = samples
            .iter()
            .map(|y| fs.evaluate(&x, y))
            .collect::<Result<_>>()?;
        let mut b = vec![0.0; dim];
        for (i, y) in samples.iter().enumerate() {
            let loo = crate::estimators::jackknife_average(&phis, i)?;
            let inner = loo.dot(&phis[i]);
            let z = zeta.eval(y);
            debug_assert_eq!(z.len(), dim);
            for (acc, zv) in b.iter_mut().zip(z) {
                *acc += inner * zv / j as f64;
            }
        }
        Ok(b)
    })?;
    Ok(BiasReport::from_stats(&stats, &exact, replicates))
}

/// Empirical-vs-exact distribution comparison for the ancestral sampler.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrequencyReport {
    /// Total variation distance between empirical frequencies and
    /// enumerated probabilities.
    pub tv_distance: f64,
    /// Pearson chi-square statistic over pooled buckets.
    pub chi_square: f64,
    /// Degrees of freedom after pooling.
    pub degrees_of_freedom: usize,
    /// Upper-tail p-value of the chi-square statistic.
    pub p_value: f64,
    /// Bucket count after pooling (atoms with expected count < 5 share one).
    pub buckets: usize,
    pub n_samples: usize,
}

/// Draws `n_samples` sequences and compares their frequencies to the
/// enumerated distribution. Support atoms with expected count below 5 are
/// pooled into a single chi-square bucket.
pub fn sampler_frequency_check(
    model: &TabularModel,
    x: &Sequence,
    n_samples: usize,
    seed: u64,
) -> Result<FrequencyReport> {
    if n_samples < 10_000 {
        return Err(Error::InvalidParameter(
            "frequency check needs at least 10000 samples".into(),
        ));
    }
    let support = model.enumerate_support(x)?;
    let index: HashMap<&Sequence, usize> =
        support.iter().enumerate().map(|(i, (s, _))| (s, i)).collect();
    let mut counts = vec![0u64; support.len()];
    let mut rng = seeded_rng(seed);
    for _ in 0..n_samples {
        let y = model.sample(x, &mut rng);
        match index.get(&y) {
            Some(&i) => counts[i] += 1,
            None => {
                return Err(Error::InvalidSequence(
                    "sampler produced a sequence outside the enumerated support".into(),
                ))
            }
        }
    }

    let n = n_samples as f64;
    let tv_distance = 0.5
        * support
            .iter()
            .zip(&counts)
            .map(|((_, p), &c)| (c as f64 / n - p).abs())
            .sum::<f64>();

    let mut chi_square = 0.0;
    let mut buckets = 0usize;
    let mut pooled_expected = 0.0;
    let mut pooled_observed = 0u64;
    for ((_, p), &c) in support.iter().zip(&counts) {
        let expected = n * p;
        if expected < 5.0 {
            pooled_expected += expected;
            pooled_observed += c;
        } else {
            let d = c as f64 - expected;
            chi_square += d * d / expected;
            buckets += 1;
        }
    }
    if pooled_expected > 0.0 || pooled_observed > 0 {
        if pooled_expected > 0.0 {
            let d = pooled_observed as f64 - pooled_expected;
            chi_square += d * d / pooled_expected;
            buckets += 1;
        } else {
            chi_square = f64::INFINITY;
            buckets += 1;
        }
    }

    let degrees_of_freedom = buckets.saturating_sub(1);
    let p_value = if degrees_of_freedom == 0 {
        1.0
    } else if !chi_square.is_finite() {
        0.0
    } else {
        let dist = ChiSquared::new(degrees_of_freedom as f64)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        1.0 - dist.cdf(chi_square)
    };

    Ok(FrequencyReport {
        tv_distance,
        chi_square,
        degrees_of_freedom,
        p_value,
        buckets,
        n_samples,
    })
}
