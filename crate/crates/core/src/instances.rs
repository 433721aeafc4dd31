//! Fixed reference instances shared by the verification commands and the
//! test suites.
//!
//! All instances use a 3-content-token target vocabulary plus end marker,
//! max length 3, and first-order context, which keeps the support small
//! enough for instant enumeration while exercising every code path.

use crate::features::{FeatureSet, LengthRatio, LexicalIndicators, TargetLength};
use crate::features::parse_lex_dictionary;
use crate::rng::{seeded_rng, sub_seed};
use crate::seqmodel::{Sequence, TabularModel, Vocabulary};

/// A model, feature set, and conditioning instance ready for estimation.
#[derive(Debug, Clone)]
pub struct VerificationInstance {
    pub model: TabularModel,
    pub features: FeatureSet,
    pub source: Sequence,
    pub references: Vec<Sequence>,
}

fn toy_vocabs() -> (Vocabulary, Vocabulary) {
    (
        Vocabulary::with_eos(&["s0", "s1", "s2"]).expect("static vocabulary"),
        Vocabulary::with_eos(&["a", "b", "c"]).expect("static vocabulary"),
    )
}

fn toy_features(vocab_src: &Vocabulary, vocab_tgt: &Vocabulary) -> FeatureSet {
    let dict = parse_lex_dictionary("s0 a 0.9\ns1 b 0.7\n", 0.5).expect("static dictionary");
    let mut fs = FeatureSet::new();
    fs.push(LengthRatio::new(1.0).expect("positive beta"));
    fs.push_scaled(TargetLength, 0.5);
    fs.push(LexicalIndicators::new(&dict, vocab_src, vocab_tgt));
    fs
}

/// The fixed tiny instance used by the verification command defaults:
/// seeded random logits, source "s0 s1", single reference "a b", and a
/// 4-dimensional feature set (length ratio, scaled length, two dictionary
/// indicators).
pub fn standard_tiny_instance() -> VerificationInstance {
    let (vs, vt) = toy_vocabs();
    let mut model = TabularModel::new(vs.clone(), vt.clone(), 1, 3).expect("static dims");
    model.randomize_logits(0.8, &mut seeded_rng(42));
    let features = toy_features(&vs, &vt);
    VerificationInstance {
        model,
        features,
        source: Sequence::new(vec![0, 1]),
        references: vec![Sequence::new(vec![0, 1])],
    }
}

/// A per-seed randomized instance for repeated gradient checking: random
/// logits, random source of length 1-2, and 1-2 random references.
pub fn random_instance(seed: u64) -> VerificationInstance {
    use rand::Rng;
    let (vs, vt) = toy_vocabs();
    let mut model = TabularModel::new(vs.clone(), vt.clone(), 1, 3).expect("static dims");
    let mut rng = seeded_rng(sub_seed(seed, 0x1757));
    model.randomize_logits(0.8, &mut rng);
    let src_len = rng.gen_range(1..=2);
    let source = Sequence::new((0..src_len).map(|_| rng.gen_range(0..3)).collect());
    let n_refs = rng.gen_range(1..=2);
    let references = (0..n_refs)
        .map(|_| {
            let len = rng.gen_range(1..=3);
            Sequence::new((0..len).map(|_| rng.gen_range(0..3)).collect())
        })
        .collect();
    VerificationInstance {
        model,
        features: toy_features(&vs, &vt),
        source,
        references,
    }
}

/// The pinned instance for the bias demonstration: every row strongly
/// prefers continuing over stopping, so the model's expected target length
/// sits far above the single length-1 reference; the feature is the scalar
/// target length. At J = 1 the economical estimator's score is then almost
/// surely strictly positive.
pub fn designed_unmatched_instance() -> VerificationInstance {
    let (vs, vt) = toy_vocabs();
    let mut model = TabularModel::new(vs.clone(), vt.clone(), 1, 3).expect("static dims");
    let eos = vt.eos_id();
    let v = vt.len();
    let mut params = model.params().to_vec();
    for row in 0..params.len() / v {
        for t in 0..v {
            params[row * v + t] = if t == eos { -0.8 } else { 0.8 };
        }
    }
    model.set_params(&params).expect("shape preserved");
    let mut features = FeatureSet::new();
    features.push(TargetLength);
    VerificationInstance {
        model,
        features,
        source: Sequence::new(vec![0]),
        references: vec![Sequence::new(vec![0])],
    }
}

/// Unconditional model and raw length feature for leave-one-out identity
/// checks: seeded random logits, empty source, no centering.
pub fn lemma1_instance() -> (TabularModel, FeatureSet) {
    let (vs, vt) = toy_vocabs();
    let mut model = TabularModel::new(vs, vt, 1, 3).expect("static dims");
    model.randomize_logits(0.8, &mut seeded_rng(1234));
    let mut fs = FeatureSet::new();
    fs.push(TargetLength);
    (model, fs)
}
