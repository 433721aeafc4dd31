//! Parallel corpus loading, synthetic task generation, and batching.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqmodel::{Sequence, Vocabulary};

/// One training example: a source with at least one reference translation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub source: Sequence,
    pub references: Vec<Sequence>,
}

impl Example {
    /// Borrow as the (source, references) view consumed by the estimators.
    pub fn instance(&self) -> (&Sequence, &[Sequence]) {
        (&self.source, &self.references)
    }
}

/// A loaded parallel corpus with its vocabularies.
#[derive(Debug, Clone)]
pub struct ParallelCorpus {
    pub examples: Vec<Example>,
    pub vocab_src: Vocabulary,
    pub vocab_tgt: Vocabulary,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Longest reference length in the corpus.
    pub fn max_target_len(&self) -> usize {
        self.examples
            .iter()
            .flat_map(|e| e.references.iter().map(Sequence::len))
            .max()
            .unwrap_or(0)
    }

    /// Serializes back to (source text, target text); the source line is
    /// repeated for each reference of a multi-reference example, so a loaded
    /// corpus reproduces its original token streams.
    pub fn to_text(&self) -> (String, String) {
        let mut src = String::new();
        let mut tgt = String::new();
        for ex in &self.examples {
            for r in &ex.references {
                src.push_str(&self.vocab_src.render(&ex.source));
                src.push('\n');
                tgt.push_str(&self.vocab_tgt.render(r));
                tgt.push('\n');
            }
        }
        (src, tgt)
    }
}

fn build_vocab(lines: &[Vec<&str>]) -> Result<Vocabulary> {
    let mut tokens: Vec<String> = Vec::new();
    for line in lines {
        for tok in line {
            if *tok == Vocabulary::EOS_MARKER {
                return Err(Error::InvalidToken(format!(
                    "reserved end marker '{}' appears in the data",
                    Vocabulary::EOS_MARKER
                )));
            }
            if !tokens.iter().any(|t| t == tok) {
                tokens.push(tok.to_string());
            }
        }
    }
    tokens.push(Vocabulary::EOS_MARKER.to_string());
    let eos_id = tokens.len() - 1;
    Vocabulary::new(tokens, eos_id)
}

/// Loads whitespace-tokenized parallel text. Vocabularies are built from the
/// observed tokens in first-occurrence order; consecutive duplicate source
/// lines are merged into one multi-reference example.
pub fn load_parallel_corpus(src_text: &str, tgt_text: &str) -> Result<ParallelCorpus> {
    let src_lines: Vec<Vec<&str>> = src_text.lines().map(|l| l.split_whitespace().collect()).collect();
    let tgt_lines: Vec<Vec<&str>> = tgt_text.lines().map(|l| l.split_whitespace().collect()).collect();
    if src_lines.is_empty() || tgt_lines.is_empty() {
        return Err(Error::EmptyInput("parallel corpus files are empty".into()));
    }
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::LineCountMismatch {
            source_lines: src_lines.len(),
            target_lines: tgt_lines.len(),
        });
    }
    let vocab_src = build_vocab(&src_lines)?;
    let vocab_tgt = build_vocab(&tgt_lines)?;

    let to_seq = |line: &[&str], vocab: &Vocabulary| {
        Sequence::new(
            line.iter()
                .map(|t| vocab.id_of(t).expect("token was added to the vocabulary"))
                .collect(),
        )
    };

    let mut examples: Vec<Example> = Vec::new();
    for (src, tgt) in src_lines.iter().zip(&tgt_lines) {
        let source = to_seq(src, &vocab_src);
        let reference = to_seq(tgt, &vocab_tgt);
        match examples.last_mut() {
            Some(last) if last.source == source => last.references.push(reference),
            _ => examples.push(Example {
                source,
                references: vec![reference],
            }),
        }
    }
    Ok(ParallelCorpus {
        examples,
        vocab_src,
        vocab_tgt,
    })
}

/// The synthetic task family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Target equals the source.
    Copy,
    /// Target token i is a fixed mapping of source token i.
    TokenMap,
    /// Target is the first `ceil(ratio * |x|)` tokens of a cyclic pattern.
    LengthControl,
}

/// Deterministic generator description for a synthetic parallel corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub kind: SyntheticKind,
    /// Content token counts (the end marker is added on top).
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    /// Source lengths are drawn uniformly from `min_src_len..=max_src_len`.
    pub min_src_len: usize,
    pub max_src_len: usize,
    /// Number of examples.
    pub size: usize,
    /// Content-id mapping for `TokenMap`; identity-mod-target-size when
    /// absent.
    pub mapping: Option<Vec<usize>>,
    /// Target/source length ratio for `LengthControl`.
    pub ratio: f64,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    fn validate(&self) -> Result<()> {
        if self.src_vocab_size == 0 || self.tgt_vocab_size == 0 {
            return Err(Error::InvalidParameter("vocabulary sizes must be positive".into()));
        }
        if self.size == 0 {
            return Err(Error::InvalidParameter("corpus size must be positive".into()));
        }
        if self.min_src_len == 0 || self.min_src_len > self.max_src_len {
            return Err(Error::InvalidParameter(
                "need 1 <= min_src_len <= max_src_len".into(),
            ));
        }
        if self.kind == SyntheticKind::LengthControl && !(self.ratio > 0.0) {
            return Err(Error::InvalidParameter("ratio must be positive".into()));
        }
        if self.kind == SyntheticKind::Copy && self.tgt_vocab_size != self.src_vocab_size {
            return Err(Error::InvalidParameter(
                "copy task requires equal vocabulary sizes".into(),
            ));
        }
        if let Some(map) = &self.mapping {
            if map.len() != self.src_vocab_size {
                return Err(Error::InvalidParameter(format!(
                    "mapping has {} entries for {} source tokens",
                    map.len(),
                    self.src_vocab_size
                )));
            }
            if map.iter().any(|&t| t >= self.tgt_vocab_size) {
                return Err(Error::InvalidParameter(
                    "mapping points outside the target vocabulary".into(),
                ));
            }
        }
        Ok(())
    }
}

fn numbered_vocab(prefix: &str, count: usize) -> Vocabulary {
    let tokens: Vec<String> = (0..count).map(|i| format!("{prefix}{i}")).collect();
    let refs: Vec<&str> = tokens.iter().map(String::as_str).collect();
    Vocabulary::with_eos(&refs).expect("generated tokens are distinct")
}

/// Generates a synthetic corpus, bit-reproducible per seed.
pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<ParallelCorpus> {
    spec.validate()?;
    let vocab_src = numbered_vocab("s", spec.src_vocab_size);
    let vocab_tgt = match spec.kind {
        SyntheticKind::Copy => vocab_src.clone(),
        _ => numbered_vocab("t", spec.tgt_vocab_size),
    };
    let mut rng = crate::rng::seeded_rng(spec.seed);
    let mut examples = Vec::with_capacity(spec.size);
    for _ in 0..spec.size {
        let len = rng.gen_range(spec.min_src_len..=spec.max_src_len);
        let source: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.src_vocab_size)).collect();
        let target: Vec<usize> = match spec.kind {
            SyntheticKind::Copy => source.clone(),
            SyntheticKind::TokenMap => source
                .iter()
                .map(|&s| match &spec.mapping {
                    Some(map) => map[s],
                    None => s % spec.tgt_vocab_size,
                })
                .collect(),
            SyntheticKind::LengthControl => {
                let tgt_len = (spec.ratio * len as f64).ceil() as usize;
                (0..tgt_len).map(|i| i % spec.tgt_vocab_size).collect()
            }
        };
        examples.push(Example {
            source: Sequence::new(source),
            references: vec![Sequence::new(target)],
        });
    }
    Ok(ParallelCorpus {
        examples,
        vocab_src,
        vocab_tgt,
    })
}

/// One epoch of shuffled batches, as index lists into `corpus.examples`.
/// Every example appears exactly once; the final short batch is emitted.
pub fn batches<R: Rng + ?Sized>(
    corpus: &ParallelCorpus,
    batch_size: usize,
    rng: &mut R,
) -> std::vec::IntoIter<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|c| c.to_vec())
        .collect::<Vec<_>>()
        .into_iter()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use proptest::prelude::*;

    #[test]
    fn load_builds_vocab_and_dims() {
        let corpus = load_parallel_corpus("a b\n", "x y z\n").unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus.examples[0].source.len(), 2);
        assert_eq!(corpus.examples[0].references[0].len(), 3);
        assert_eq!(corpus.vocab_src.content_count(), 2);
        assert_eq!(corpus.vocab_tgt.content_count(), 3);
    }

    #[test]
    fn consecutive_duplicate_sources_merge() {
        let corpus = load_parallel_corpus("a b\na b\nc\n", "x\ny\nz\n").unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.examples[0].references.len(), 2);
        assert_eq!(corpus.examples[1].references.len(), 1);
    }

    #[test]
    fn non_adjacent_duplicates_stay_separate() {
        let corpus = load_parallel_corpus("a\nb\na\n", "x\ny\nz\n").unwrap();
        assert_eq!(corpus.len(), 3);
    }

    #[test]
    fn line_count_mismatch_names_both_counts() {
        let err = load_parallel_corpus("a\nb\nc\n", "x\ny\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('2'), "message: {msg}");
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(load_parallel_corpus("", "").is_err());
    }

    #[test]
    fn reserved_marker_is_rejected() {
        assert!(load_parallel_corpus("a </s>\n", "x q\n").is_err());
    }

    #[test]
    fn round_trip_reproduces_token_streams() {
        let src = "a b\na b\nc a\n";
        let tgt = "x\ny x\nz\n";
        let corpus = load_parallel_corpus(src, tgt).unwrap();
        let (s, t) = corpus.to_text();
        assert_eq!(s, src);
        assert_eq!(t, tgt);
    }

    proptest! {
        #[test]
        fn round_trip_property(
            lines in proptest::collection::vec(
                (proptest::collection::vec(0usize..4, 1..4),
                 proptest::collection::vec(0usize..4, 1..4)),
                1..12,
            )
        ) {
            let words = ["alpha", "beta", "gamma", "delta"];
            let src: String = lines
                .iter()
                .map(|(s, _)| s.iter().map(|&i| words[i]).collect::<Vec<_>>().join(" ") + "\n")
                .collect();
            let tgt: String = lines
                .iter()
                .map(|(_, t)| t.iter().map(|&i| words[i]).collect::<Vec<_>>().join(" ") + "\n")
                .collect();
            let corpus = load_parallel_corpus(&src, &tgt).unwrap();
            let (s, t) = corpus.to_text();
            prop_assert_eq!(s, src);
            prop_assert_eq!(t, tgt);
        }
    }

    fn spec(kind: SyntheticKind) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            kind,
            src_vocab_size: 3,
            tgt_vocab_size: 3,
            min_src_len: 1,
            max_src_len: 4,
            size: 20,
            mapping: None,
            ratio: 2.0,
            seed: 5,
        }
    }

    #[test]
    fn copy_task_copies() {
        let corpus = generate_synthetic(&spec(SyntheticKind::Copy)).unwrap();
        for ex in &corpus.examples {
            assert_eq!(ex.references[0], ex.source);
        }
        assert_eq!(corpus.vocab_src, corpus.vocab_tgt);
    }

    #[test]
    fn token_map_applies_mapping() {
        let mut s = spec(SyntheticKind::TokenMap);
        s.mapping = Some(vec![2, 0, 1]);
        let corpus = generate_synthetic(&s).unwrap();
        for ex in &corpus.examples {
            assert_eq!(ex.references[0].len(), ex.source.len());
            for (src, tgt) in ex.source.ids().iter().zip(ex.references[0].ids()) {
                assert_eq!(*tgt, [2, 0, 1][*src]);
            }
        }
    }

    #[test]
    fn length_control_lengths() {
        let corpus = generate_synthetic(&spec(SyntheticKind::LengthControl)).unwrap();
        for ex in &corpus.examples {
            assert_eq!(ex.references[0].len(), 2 * ex.source.len());
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate_synthetic(&spec(SyntheticKind::LengthControl)).unwrap();
        let b = generate_synthetic(&spec(SyntheticKind::LengthControl)).unwrap();
        assert_eq!(a.examples, b.examples);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(SyntheticKind::Copy);
        s.tgt_vocab_size = 4;
        assert!(generate_synthetic(&s).is_err());

        let mut s = spec(SyntheticKind::TokenMap);
        s.mapping = Some(vec![0, 1]); // wrong length
        assert!(generate_synthetic(&s).is_err());

        let mut s = spec(SyntheticKind::LengthControl);
        s.ratio = 0.0;
        assert!(generate_synthetic(&s).is_err());

        let mut s = spec(SyntheticKind::Copy);
        s.min_src_len = 0;
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn batch_sizes_and_reproducibility() {
        let corpus = generate_synthetic(&SyntheticTaskSpec {
            size: 5,
            ..spec(SyntheticKind::Copy)
        })
        .unwrap();
        let sizes: Vec<usize> = batches(&corpus, 2, &mut seeded_rng(1))
            .map(|b| b.len())
            .collect();
        assert_eq!(sizes, vec![2, 2, 1]);

        let single: Vec<Vec<usize>> = batches(&corpus, 10, &mut seeded_rng(1)).collect();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].len(), 5);

        let a: Vec<Vec<usize>> = batches(&corpus, 2, &mut seeded_rng(9)).collect();
        let b: Vec<Vec<usize>> = batches(&corpus, 2, &mut seeded_rng(9)).collect();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn one_epoch_covers_the_corpus(n in 1usize..20, batch in 1usize..7, seed in 0u64..50) {
            let corpus = generate_synthetic(&SyntheticTaskSpec {
                size: n,
                ..spec(SyntheticKind::Copy)
            })
            .unwrap();
            let mut seen: Vec<usize> = batches(&corpus, batch, &mut seeded_rng(seed))
                .flatten()
                .collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn token_map_preserves_length(seed in 0u64..30) {
            let corpus = generate_synthetic(&SyntheticTaskSpec {
                seed,
                ..spec(SyntheticKind::TokenMap)
            })
            .unwrap();
            for ex in &corpus.examples {
                prop_assert_eq!(ex.references[0].len(), ex.source.len());
            }
        }
    }
}
