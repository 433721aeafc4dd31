//! Prior-knowledge feature functions over (source, target) sequence pairs.
//!
//! A [`FeatureSet`] concatenates scaled components into one m-dimensional
//! vector. Components are pure functions of the pair: the built-in ones are
//! a bounded source/target length ratio, a raw target length, sparse lexical
//! dictionary indicators, and a constant probe.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::BufRead;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqmodel::{Sequence, Vocabulary};

/// An m-dimensional real feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        FeatureVector { values }
    }

    pub fn zeros(dim: usize) -> Self {
        FeatureVector {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Coordinate-wise difference; panics on dimension mismatch.
    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.dim(), other.dim(), "feature dimension mismatch");
        FeatureVector {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        assert_eq!(self.dim(), other.dim(), "feature dimension mismatch");
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        FeatureVector {
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// Running-mean update: `self += (x - self) / n` with `n` the count
    /// including `x`. Folding identical vectors reproduces them bit for bit.
    pub fn mean_update(&mut self, x: &Self, n: usize) {
        assert_eq!(self.dim(), x.dim(), "feature dimension mismatch");
        let n = n as f64;
        for (m, v) in self.values.iter_mut().zip(&x.values) {
            *m += (v - *m) / n;
        }
    }
}

/// A deterministic, side-effect-free feature component.
///
/// Implementations must return the same output for the same `(x, y)` pair on
/// every call; the estimators rely on that when reusing feature values across
/// sampled sequences.
pub trait FeatureFn: fmt::Debug + Send + Sync {
    /// Number of coordinates this component produces.
    fn dim(&self) -> usize;

    /// Writes the component's coordinates into `out` (`out.len() == dim()`).
    fn eval(&self, x: &Sequence, y: &Sequence, out: &mut [f64]) -> Result<()>;
}

/// Bounded ratio between the scaled source length and the target length:
/// `beta*|x| / |y|` when `beta*|x| < |y|`, else `|y| / (beta*|x|)`. The
/// result lies in `(0, 1]`; an empty target scores 0.
pub fn length_ratio(x: &Sequence, y: &Sequence, beta: f64) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::InvalidParameter(
            "length_ratio requires a non-empty source".into(),
        ));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidParameter("beta must be positive".into()));
    }
    if y.is_empty() {
        return Ok(0.0);
    }
    let bx = beta * x.len() as f64;
    let ylen = y.len() as f64;
    Ok(if bx < ylen { bx / ylen } else { ylen / bx })
}

/// Length-ratio feature component with hyperparameter `beta`.
#[derive(Debug, Clone, Copy)]
pub struct LengthRatio {
    beta: f64,
}

impl LengthRatio {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0) {
            return Err(Error::InvalidParameter("beta must be positive".into()));
        }
        Ok(LengthRatio { beta })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

impl FeatureFn for LengthRatio {
    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, x: &Sequence, y: &Sequence, out: &mut [f64]) -> Result<()> {
        out[0] = length_ratio(x, y, self.beta)?;
        Ok(())
    }
}

/// Raw target length `|y|`.
#[derive(Debug, Clone, Copy)]
pub struct TargetLength;

impl FeatureFn for TargetLength {
    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, _x: &Sequence, y: &Sequence, out: &mut [f64]) -> Result<()> {
        out[0] = y.len() as f64;
        Ok(())
    }
}

/// Constant feature, useful as a zero-gradient probe.
#[derive(Debug, Clone, Copy)]
pub struct ConstantFeature {
    pub value: f64,
}

impl FeatureFn for ConstantFeature {
    fn dim(&self) -> usize {
        1
    }

    fn eval(&self, _x: &Sequence, _y: &Sequence, out: &mut [f64]) -> Result<()> {
        out[0] = self.value;
        Ok(())
    }
}

/// One word-to-word translation dictionary entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexDictEntry {
    pub source: String,
    pub target: String,
    pub probability: f64,
}

/// A thresholded word-to-word lexical translation dictionary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexicalDictionary {
    entries: Vec<LexDictEntry>,
    threshold: f64,
}

impl LexicalDictionary {
    pub fn entries(&self) -> &[LexDictEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }
}

/// Loads a dictionary from lines of the form `src_word tgt_word probability`.
///
/// Entries with probability below `threshold` are discarded. Duplicate
/// `(src, tgt)` pairs keep the higher probability at the first-seen position;
/// blank lines are skipped.
pub fn load_lex_dictionary<R: BufRead>(reader: R, threshold: f64) -> Result<LexicalDictionary> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidParameter(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    let mut entries: Vec<LexDictEntry> = Vec::new();
    let mut index: HashMap<(String, String), usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 'src tgt prob', found {} fields", fields.len()),
            });
        }
        let probability: f64 = fields[2].parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("cannot parse probability '{}'", fields[2]),
        })?;
        if !(0.0..=1.0).contains(&probability) {
            return Err(Error::Parse {
                line: lineno,
                message: format!("probability {probability} outside [0, 1]"),
            });
        }
        let key = (fields[0].to_string(), fields[1].to_string());
        match index.get(&key) {
            Some(&pos) => {
                if probability > entries[pos].probability {
                    entries[pos].probability = probability;
                }
            }
            None => {
                index.insert(key.clone(), entries.len());
                entries.push(LexDictEntry {
                    source: key.0,
                    target: key.1,
                    probability,
                });
            }
        }
    }
    entries.retain(|e| e.probability >= threshold);
    Ok(LexicalDictionary { entries, threshold })
}

/// Convenience wrapper over [`load_lex_dictionary`] for in-memory text.
pub fn parse_lex_dictionary(text: &str, threshold: f64) -> Result<LexicalDictionary> {
    load_lex_dictionary(std::io::Cursor::new(text), threshold)
}

/// Sparse indicator features, one coordinate per dictionary entry: 1 when the
/// source word occurs in `x` and the target word occurs in `y`, else 0.
///
/// Dictionary words are resolved against the vocabularies once at
/// construction; out-of-vocabulary entries keep their coordinate (permanently
/// zero) so the feature dimension is stable across datasets.
#[derive(Debug, Clone)]
pub struct LexicalIndicators {
    pairs: Vec<Option<(usize, usize)>>,
}

impl LexicalIndicators {
    pub fn new(dict: &LexicalDictionary, vocab_src: &Vocabulary, vocab_tgt: &Vocabulary) -> Self {
        let pairs = dict
            .entries()
            .iter()
            .map(|e| {
                match (vocab_src.id_of(&e.source), vocab_tgt.id_of(&e.target)) {
                    (Some(s), Some(t)) => Some((s, t)),
                    _ => None,
                }
            })
            .collect();
        LexicalIndicators { pairs }
    }
}

impl FeatureFn for LexicalIndicators {
    fn dim(&self) -> usize {
        self.pairs.len()
    }

    fn eval(&self, x: &Sequence, y: &Sequence, out: &mut [f64]) -> Result<()> {
        let x_ids: BTreeSet<usize> = x.ids().iter().copied().collect();
        let y_ids: BTreeSet<usize> = y.ids().iter().copied().collect();
        for (slot, pair) in out.iter_mut().zip(&self.pairs) {
            *slot = match pair {
                Some((s, t)) if x_ids.contains(s) && y_ids.contains(t) => 1.0,
                _ => 0.0,
            };
        }
        Ok(())
    }
}

/// Evaluates the dictionary indicators for one pair without building a
/// [`FeatureSet`].
pub fn lexical_dict_features(
    dict: &LexicalDictionary,
    vocab_src: &Vocabulary,
    vocab_tgt: &Vocabulary,
    x: &Sequence,
    y: &Sequence,
) -> FeatureVector {
    let component = LexicalIndicators::new(dict, vocab_src, vocab_tgt);
    let mut out = vec![0.0; component.dim()];
    component
        .eval(x, y, &mut out)
        .expect("lexical indicators cannot fail");
    FeatureVector::new(out)
}

#[derive(Clone)]
struct ScaledFeature {
    component: Arc<dyn FeatureFn>,
    scale: f64,
}

/// An ordered list of scaled feature components, evaluated by concatenation.
#[derive(Clone, Default)]
pub struct FeatureSet {
    components: Vec<ScaledFeature>,
    dim: usize,
}

impl fmt::Debug for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureSet")
            .field("dim", &self.dim)
            .field(
                "components",
                &self
                    .components
                    .iter()
                    .map(|c| (&c.component, c.scale))
                    .collect::<Vec<_>>(),
            )
            .finish()
    }
}

impl FeatureSet {
    pub fn new() -> Self {
        FeatureSet::default()
    }

    pub fn push(&mut self, component: impl FeatureFn + 'static) {
        self.push_scaled(component, 1.0);
    }

    pub fn push_scaled(&mut self, component: impl FeatureFn + 'static, scale: f64) {
        self.push_arc(Arc::new(component), scale);
    }

    pub fn push_arc(&mut self, component: Arc<dyn FeatureFn>, scale: f64) {
        self.dim += component.dim();
        self.components.push(ScaledFeature { component, scale });
    }

    /// Total feature dimension m.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// A copy of this set with every component scale multiplied by `factor`.
    pub fn rescaled(&self, factor: f64) -> Self {
        FeatureSet {
            components: self
                .components
                .iter()
                .map(|c| ScaledFeature {
                    component: Arc::clone(&c.component),
                    scale: c.scale * factor,
                })
                .collect(),
            dim: self.dim,
        }
    }

    /// Concatenated, scaled component outputs for one pair.
    pub fn evaluate(&self, x: &Sequence, y: &Sequence) -> Result<FeatureVector> {
        let mut out = vec![0.0; self.dim];
        let mut offset = 0;
        for c in &self.components {
            let d = c.component.dim();
            c.component.eval(x, y, &mut out[offset..offset + d])?;
            for v in &mut out[offset..offset + d] {
                *v *= c.scale;
            }
            offset += d;
        }
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("feature vector".into()));
        }
        Ok(FeatureVector::new(out))
    }

    /// Arithmetic mean of [`FeatureSet::evaluate`] over the references. With
    /// one reference this equals the single evaluation exactly.
    pub fn empirical_average(&self, x: &Sequence, refs: &[Sequence]) -> Result<FeatureVector> {
        if refs.is_empty() {
            return Err(Error::EmptyInput("empirical average needs references".into()));
        }
        let mut mean = self.evaluate(x, &refs[0])?;
        for (i, r) in refs.iter().enumerate().skip(1) {
            let phi = self.evaluate(x, r)?;
            mean.mean_update(&phi, i + 1);
        }
        Ok(mean)
    }
}
