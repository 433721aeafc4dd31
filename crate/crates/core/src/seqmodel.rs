//! Tabular autoregressive conditional sequence model with exact enumeration.
//!
//! Sequences are generated token by token. At step `t` the next-token
//! distribution is a softmax over a logit row selected by a source anchor
//! (the source token at position `min(t, |x|-1)`, or a dedicated null anchor
//! when the source is empty) and the last `context_order` target tokens.
//! Generation stops when the end marker is emitted; the end marker is forced
//! at length `max_len`, so the output distribution has finite support and
//! sums to one exactly. Every expectation over the output space is therefore
//! computable by brute force, which is what the oracles in this crate rely
//! on.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on the support size accepted by [`TabularModel::enumerate_support`].
pub const DEFAULT_ENUMERATION_CAP: usize = 1_000_000;

/// Logit offset used for effectively deterministic rows (`+SAT` on the
/// selected token, `-SAT` elsewhere leaves off-mode mass below 1e-13).
pub const SATURATION_LOGIT: f64 = 30.0;

const MAX_PARAM_COUNT: usize = 100_000_000;

/// Token inventory with a distinguished end-of-sequence marker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    eos_id: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from the full token list and the end marker index.
    pub fn new(tokens: Vec<String>, eos_id: usize) -> Result<Self> {
        let vocab = Vocabulary { tokens, eos_id };
        vocab.validate()?;
        Ok(vocab)
    }

    /// Builds a vocabulary from content tokens, appending `</s>` as the end
    /// marker.
    pub fn with_eos(content: &[&str]) -> Result<Self> {
        let mut tokens: Vec<String> = content.iter().map(|t| t.to_string()).collect();
        tokens.push(Self::EOS_MARKER.to_string());
        let eos_id = tokens.len() - 1;
        Self::new(tokens, eos_id)
    }

    /// The conventional end-marker spelling used by [`Vocabulary::with_eos`].
    pub const EOS_MARKER: &'static str = "</s>";

    pub(crate) fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::InvalidParameter(
                "vocabulary must contain at least the end marker".into(),
            ));
        }
        if self.eos_id >= self.tokens.len() {
            return Err(Error::InvalidParameter(format!(
                "eos_id {} out of range for {} tokens",
                self.eos_id,
                self.tokens.len()
            )));
        }
        for (i, tok) in self.tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::InvalidToken(format!("token {i} is empty")));
            }
            if self.tokens[..i].contains(tok) {
                return Err(Error::InvalidToken(format!("duplicate token '{tok}'")));
            }
        }
        Ok(())
    }

    /// Total token count, including the end marker.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos_id(&self) -> usize {
        self.eos_id
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    /// Number of content (non-eos) tokens.
    pub fn content_count(&self) -> usize {
        self.tokens.len() - 1
    }

    /// All valid content token ids, in increasing order.
    pub fn content_ids(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.tokens.len()).filter(move |&id| id != self.eos_id)
    }

    pub fn is_valid_content_id(&self, id: usize) -> bool {
        id < self.tokens.len() && id != self.eos_id
    }

    /// Parses a whitespace-tokenized line into a content sequence.
    pub fn parse_sequence(&self, line: &str) -> Result<Sequence> {
        let mut ids = Vec::new();
        for tok in line.split_whitespace() {
            let id = self
                .id_of(tok)
                .ok_or_else(|| Error::InvalidToken(format!("unknown token '{tok}'")))?;
            if id == self.eos_id {
                return Err(Error::InvalidToken(format!(
                    "end marker '{tok}' is not allowed inside a sequence"
                )));
            }
            ids.push(id);
        }
        Ok(Sequence::new(ids))
    }

    /// Renders a sequence back to space-separated tokens.
    pub fn render(&self, seq: &Sequence) -> String {
        seq.ids()
            .iter()
            .map(|&id| self.tokens[id].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A target or source sequence of content token ids. The end marker is
/// implicit and never stored; the empty sequence is legal (the model emitted
/// the end marker immediately).
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sequence {
    ids: Vec<usize>,
}

impl Sequence {
    pub fn new(ids: Vec<usize>) -> Self {
        Sequence { ids }
    }

    pub fn empty() -> Self {
        Sequence { ids: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }
}

impl From<Vec<usize>> for Sequence {
    fn from(ids: Vec<usize>) -> Self {
        Sequence::new(ids)
    }
}

/// A flat real vector with one entry per model logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    values: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        GradientVector {
            values: vec![0.0; len],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        GradientVector { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `self += factor * other`, shape-checked.
    pub fn add_scaled(&mut self, other: &Self, factor: f64) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch {
                expected: self.len(),
                actual: other.len(),
            });
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.scale(factor);
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Conditional distribution over target sequences, parameterized by a logit
/// table indexed by (source anchor, recent target context, next token).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularModel {
    vocab_src: Vocabulary,
    vocab_tgt: Vocabulary,
    context_order: usize,
    max_len: usize,
    enumeration_cap: usize,
    logits: Vec<f64>,
}

impl TabularModel {
    /// Builds a zero-logit (uniform) model.
    pub fn new(
        vocab_src: Vocabulary,
        vocab_tgt: Vocabulary,
        context_order: usize,
        max_len: usize,
    ) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::InvalidParameter("max_len must be at least 1".into()));
        }
        let n_anchors = vocab_src.len() + 1;
        let symbols = vocab_tgt.len() + 1;
        let order = u32::try_from(context_order)
            .map_err(|_| Error::InvalidParameter("context_order too large".into()))?;
        let n_contexts = symbols
            .checked_pow(order)
            .ok_or_else(|| Error::InvalidParameter("context table overflows".into()))?;
        let params = n_anchors
            .checked_mul(n_contexts)
            .and_then(|r| r.checked_mul(vocab_tgt.len()))
            .filter(|&p| p <= MAX_PARAM_COUNT)
            .ok_or_else(|| Error::InvalidParameter("parameter table too large".into()))?;
        Ok(TabularModel {
            vocab_src,
            vocab_tgt,
            context_order,
            max_len,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
            logits: vec![0.0; params],
        })
    }

    pub fn with_enumeration_cap(mut self, cap: usize) -> Self {
        self.enumeration_cap = cap;
        self
    }

    pub fn vocab_src(&self) -> &Vocabulary {
        &self.vocab_src
    }

    pub fn vocab_tgt(&self) -> &Vocabulary {
        &self.vocab_tgt
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn context_order(&self) -> usize {
        self.context_order
    }

    pub fn enumeration_cap(&self) -> usize {
        self.enumeration_cap
    }

    pub fn param_count(&self) -> usize {
        self.logits.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.logits
    }

    /// Overwrites the logit table with the given flat vector.
    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.logits.len() {
            return Err(Error::ShapeMismatch {
                expected: self.logits.len(),
                actual: params.len(),
            });
        }
        if !params.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        self.logits.copy_from_slice(params);
        Ok(())
    }

    /// Fills the logit table with uniform draws from `[-scale, scale)`.
    pub fn randomize_logits<R: Rng + ?Sized>(&mut self, scale: f64, rng: &mut R) {
        if scale == 0.0 {
            self.logits.fill(0.0);
            return;
        }
        for l in &mut self.logits {
            *l = rng.gen_range(-scale..scale);
        }
    }

    /// Saturates the logit table so that the model deterministically emits
    /// `y` given `x` (every off-path row prefers the end marker).
    ///
    /// Errors if the path visits the same row with two different required
    /// emissions, which happens when a repeated context would have to both
    /// continue and stop.
    pub fn make_deterministic(&mut self, x: &Sequence, y: &Sequence) -> Result<()> {
        self.validate_source(x)?;
        self.validate_target(y)?;
        let v = self.vocab_tgt.len();
        let eos = self.vocab_tgt.eos_id();

        let steps = y.len() + usize::from(y.len() < self.max_len);
        let mut required: Vec<(usize, usize)> = Vec::with_capacity(steps);
        for t in 0..steps {
            let row = self.step_row_start(x, y.ids(), t);
            let emit = if t < y.len() { y.ids()[t] } else { eos };
            if let Some(&(_, prev)) = required.iter().find(|&&(r, _)| r == row) {
                if prev != emit {
                    return Err(Error::InvalidSequence(
                        "sequence revisits a context with a conflicting emission".into(),
                    ));
                }
            } else {
                required.push((row, emit));
            }
        }

        for row in 0..self.logits.len() / v {
            self.saturate_row(row * v, eos);
        }
        for (row, emit) in required {
            self.saturate_row(row, emit);
        }
        Ok(())
    }

    fn saturate_row(&mut self, row_start: usize, token: usize) {
        let v = self.vocab_tgt.len();
        for (i, l) in self.logits[row_start..row_start + v].iter_mut().enumerate() {
            *l = if i == token {
                SATURATION_LOGIT
            } else {
                -SATURATION_LOGIT
            };
        }
    }

    fn n_contexts(&self) -> usize {
        (self.vocab_tgt.len() + 1).pow(self.context_order as u32)
    }

    fn anchor_at(&self, x: &Sequence, t: usize) -> usize {
        if x.is_empty() {
            self.vocab_src.len()
        } else {
            x.ids()[t.min(x.len() - 1)]
        }
    }

    fn context_index(&self, prefix: &[usize], t: usize) -> usize {
        let symbols = self.vocab_tgt.len() + 1;
        let mut idx = 0;
        for offset in (1..=self.context_order).rev() {
            let sym = if t >= offset { prefix[t - offset] + 1 } else { 0 };
            idx = idx * symbols + sym;
        }
        idx
    }

    fn step_row_start(&self, x: &Sequence, prefix: &[usize], t: usize) -> usize {
        let anchor = self.anchor_at(x, t);
        let ctx = self.context_index(prefix, t);
        (anchor * self.n_contexts() + ctx) * self.vocab_tgt.len()
    }

    fn log_softmax_into(&self, row_start: usize, out: &mut Vec<f64>) {
        let v = self.vocab_tgt.len();
        let row = &self.logits[row_start..row_start + v];
        let mut max = f64::NEG_INFINITY;
        for &l in row {
            max = max.max(l);
        }
        let mut z = 0.0;
        for &l in row {
            z += (l - max).exp();
        }
        let lse = max + z.ln();
        out.clear();
        out.extend(row.iter().map(|l| l - lse));
    }

    fn validate_source(&self, x: &Sequence) -> Result<()> {
        for &id in x.ids() {
            if !self.vocab_src.is_valid_content_id(id) {
                return Err(Error::InvalidToken(format!(
                    "source id {id} invalid for vocabulary of {} tokens",
                    self.vocab_src.len()
                )));
            }
        }
        Ok(())
    }

    fn validate_target(&self, y: &Sequence) -> Result<()> {
        if y.len() > self.max_len {
            return Err(Error::InvalidSequence(format!(
                "target length {} exceeds max_len {}",
                y.len(),
                self.max_len
            )));
        }
        for &id in y.ids() {
            if !self.vocab_tgt.is_valid_content_id(id) {
                return Err(Error::InvalidToken(format!(
                    "target id {id} invalid for vocabulary of {} tokens",
                    self.vocab_tgt.len()
                )));
            }
        }
        Ok(())
    }

    /// Log-probability of emitting `y` (and then the end marker) given `x`.
    pub fn log_prob(&self, x: &Sequence, y: &Sequence) -> Result<f64> {
        self.validate_source(x)?;
        self.validate_target(y)?;
        let mut lp = 0.0;
        let mut ls = Vec::new();
        for t in 0..y.len() {
            self.log_softmax_into(self.step_row_start(x, y.ids(), t), &mut ls);
            lp += ls[y.ids()[t]];
        }
        if y.len() < self.max_len {
            self.log_softmax_into(self.step_row_start(x, y.ids(), y.len()), &mut ls);
            lp += ls[self.vocab_tgt.eos_id()];
        }
        Ok(lp)
    }

    /// Analytic gradient of [`TabularModel::log_prob`] with respect to every
    /// logit: `1[v emitted] - softmax_v` on each visited row, zero elsewhere.
    /// The forced end-marker step at `max_len` contributes nothing.
    pub fn grad_log_prob(&self, x: &Sequence, y: &Sequence) -> Result<GradientVector> {
        self.validate_source(x)?;
        self.validate_target(y)?;
        let v = self.vocab_tgt.len();
        let eos = self.vocab_tgt.eos_id();
        let mut grad = GradientVector::zeros(self.param_count());
        let mut ls = Vec::new();
        let steps = y.len() + usize::from(y.len() < self.max_len);
        for t in 0..steps {
            let row = self.step_row_start(x, y.ids(), t);
            let emitted = if t < y.len() { y.ids()[t] } else { eos };
            self.log_softmax_into(row, &mut ls);
            let g = grad.values_mut();
            for (i, &l) in ls.iter().enumerate().take(v) {
                g[row + i] += f64::from(i == emitted) - l.exp();
            }
        }
        Ok(grad)
    }

    /// Draws a sequence by ancestral sampling at temperature 1.
    pub fn sample<R: Rng + ?Sized>(&self, x: &Sequence, rng: &mut R) -> Sequence {
        self.validate_source(x)
            .expect("source sequence invalid for this model");
        let eos = self.vocab_tgt.eos_id();
        let mut ids = Vec::new();
        let mut ls = Vec::new();
        for t in 0..self.max_len {
            let row = self.step_row_start(x, &ids, t);
            self.log_softmax_into(row, &mut ls);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = ls.len() - 1;
            for (i, &l) in ls.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    pick = i;
                    break;
                }
            }
            if pick == eos {
                break;
            }
            ids.push(pick);
        }
        Sequence::new(ids)
    }

    /// Deterministic argmax decoding (ties resolved toward the lowest id).
    pub fn greedy_decode(&self, x: &Sequence) -> Sequence {
        self.validate_source(x)
            .expect("source sequence invalid for this model");
        let eos = self.vocab_tgt.eos_id();
        let mut ids = Vec::new();
        let mut ls = Vec::new();
        for t in 0..self.max_len {
            let row = self.step_row_start(x, &ids, t);
            self.log_softmax_into(row, &mut ls);
            let mut pick = 0;
            for (i, &l) in ls.iter().enumerate() {
                if l > ls[pick] {
                    pick = i;
                }
            }
            if pick == eos {
                break;
            }
            ids.push(pick);
        }
        Sequence::new(ids)
    }

    /// Number of sequences of length `0..=max_len` (saturating).
    pub fn support_size(&self) -> usize {
        let c = self.vocab_tgt.content_count();
        let mut total = 0usize;
        let mut level = 1usize;
        for _ in 0..=self.max_len {
            total = total.saturating_add(level);
            level = level.saturating_mul(c);
        }
        total
    }

    /// Lists every sequence in the support with its exact probability.
    ///
    /// Probabilities follow the same accumulation path as
    /// [`TabularModel::log_prob`], so `exp(log_prob(y))` equals the listed
    /// value bit for bit.
    pub fn enumerate_support(&self, x: &Sequence) -> Result<Vec<(Sequence, f64)>> {
        self.validate_source(x)?;
        let size = self.support_size();
        if size > self.enumeration_cap {
            return Err(Error::EnumerationTooLarge {
                size,
                cap: self.enumeration_cap,
            });
        }
        let mut out = Vec::with_capacity(size);
        let mut prefix = Vec::new();
        self.enumerate_rec(x, &mut prefix, 0.0, &mut out);
        Ok(out)
    }

    fn enumerate_rec(
        &self,
        x: &Sequence,
        prefix: &mut Vec<usize>,
        lp: f64,
        out: &mut Vec<(Sequence, f64)>,
    ) {
        let t = prefix.len();
        if t == self.max_len {
            out.push((Sequence::new(prefix.clone()), lp.exp()));
            return;
        }
        let row = self.step_row_start(x, prefix, t);
        let mut ls = Vec::new();
        self.log_softmax_into(row, &mut ls);
        out.push((
            Sequence::new(prefix.clone()),
            (lp + ls[self.vocab_tgt.eos_id()]).exp(),
        ));
        for v in self.vocab_tgt.content_ids().collect::<Vec<_>>() {
            prefix.push(v);
            self.enumerate_rec(x, prefix, lp + ls[v], out);
            prefix.pop();
        }
    }

    /// Gradient-ascent step: `logits += lr * grad`. Callers negate the
    /// gradient (or the learning rate) for minimized objectives.
    pub fn apply_update(&mut self, grad: &GradientVector, lr: f64) -> Result<()> {
        if grad.len() != self.logits.len() {
            return Err(Error::ShapeMismatch {
                expected: self.logits.len(),
                actual: grad.len(),
            });
        }
        if !lr.is_finite() {
            return Err(Error::InvalidParameter("learning rate must be finite".into()));
        }
        for (l, g) in self.logits.iter_mut().zip(grad.values()) {
            *l += lr * g;
        }
        Ok(())
    }

    /// Writes the model as structured text; round-trips bit-exactly.
    pub fn write_checkpoint<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`TabularModel::write_checkpoint`].
    pub fn read_checkpoint<R: Read>(reader: R) -> Result<Self> {
        let model: TabularModel = serde_json::from_reader(reader)?;
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        self.vocab_src.validate()?;
        self.vocab_tgt.validate()?;
        if self.max_len == 0 {
            return Err(Error::InvalidParameter("max_len must be at least 1".into()));
        }
        let expected = (self.vocab_src.len() + 1) * self.n_contexts() * self.vocab_tgt.len();
        if self.logits.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: self.logits.len(),
            });
        }
        if !self.logits.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }
}
