//! Word error rate and greedy-decoding evaluation over manifest sets.

use std::path::Path;

use serde::Serialize;

use crate::frontend::{load_utterance, ManifestEntry};
use crate::trainer::{encode_for_inference, ModelConfig};
use crate::transducer::greedy_decode;
use crate::nn::ParamStore;
use crate::{Error, Result};

/// Character-level toy vocabulary: blank = 0, space = 1, then 'a'..'z'.
/// Detokenization is plain concatenation, so the space token delimits words
/// and WER is computed over words.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
}

pub const BLANK_TOKEN: &str = "<blank>";

impl Vocab {
    pub fn toy() -> Self {
        let mut tokens = vec![BLANK_TOKEN.to_string(), " ".to_string()];
        tokens.extend(('a'..='z').map(|c| c.to_string()));
        Vocab { tokens }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Concatenate the surface forms of non-blank token ids.
    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self
                .tokens
                .get(id as usize)
                .ok_or_else(|| Error::BadInput(format!("token id {id} outside vocabulary")))?;
            if id != 0 {
                out.push_str(tok);
            }
        }
        Ok(out)
    }

    /// Inverse of detokenize for the toy character vocabulary.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| {
                let s = c.to_string();
                self.tokens
                    .iter()
                    .position(|t| *t == s)
                    .filter(|&p| p != 0)
                    .map(|p| p as u32)
                    .ok_or_else(|| Error::BadInput(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct WerCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub num_ref_words: usize,
}

impl WerCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn rate(&self) -> f64 {
        self.errors() as f64 / self.num_ref_words.max(1) as f64
    }

    pub fn accumulate(&mut self, other: &WerCounts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.num_ref_words += other.num_ref_words;
    }
}

/// Word-level edit distance between reference and hypothesis with the
/// standard unit costs. Ties in the backtrace prefer substitution over
/// deletion over insertion.
pub fn wer<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> WerCounts {
    let r = reference.len();
    let h = hypothesis.len();
    // d[i][j] = edit distance between reference[..i] and hypothesis[..j].
    let mut d = vec![vec![0usize; h + 1]; r + 1];
    for i in 0..=r {
        d[i][0] = i;
    }
    for j in 0..=h {
        d[0][j] = j;
    }
    for i in 1..=r {
        for j in 1..=h {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            let sub = d[i - 1][j - 1] + if same { 0 } else { 1 };
            let del = d[i - 1][j] + 1;
            let ins = d[i][j - 1] + 1;
            d[i][j] = sub.min(del).min(ins);
        }
    }
    let mut counts = WerCounts {
        num_ref_words: r,
        ..WerCounts::default()
    };
    let (mut i, mut j) = (r, h);
    while i > 0 || j > 0 {
        let same = i > 0 && j > 0 && reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
        if same && d[i][j] == d[i - 1][j - 1] {
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + 1 {
            counts.substitutions += 1;
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_string()).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct SetReport {
    pub name: String,
    pub num_utterances: usize,
    #[serde(flatten)]
    pub counts: WerCounts,
    pub wer: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub sets: Vec<SetReport>,
    /// Pooled over all sets, i.e. weighted by each set's reference word count.
    pub overall_wer: f64,
    pub overall_num_ref_words: usize,
}

pub struct Decoder<'a> {
    pub params: &'a ParamStore,
    pub model: &'a ModelConfig,
    /// `Some((chunk_size, left_chunks))` decodes with the streaming mask.
    pub chunk: Option<(usize, usize)>,
    pub max_symbols_per_frame: usize,
}

impl Decoder<'_> {
    pub fn decode_features(&self, feats: &ndarray::Array2<f64>) -> Result<Vec<u32>> {
        let c = encode_for_inference(self.params, self.model, feats, self.chunk)?;
        greedy_decode(self.params, &self.model.transducer, &c, self.max_symbols_per_frame)
    }
}

/// Decode every utterance of every named set and score WER against the
/// manifest transcripts. Errors on utterances without a transcript.
pub fn evaluate(
    decoder: &Decoder,
    sets: &[(String, Vec<ManifestEntry>)],
    base_dir: &Path,
    vocab: &Vocab,
) -> Result<EvalReport> {
    let mut reports = Vec::new();
    let mut overall = WerCounts::default();
    for (name, entries) in sets {
        let mut counts = WerCounts::default();
        for entry in entries {
            let reference = entry.transcript.as_ref().ok_or_else(|| {
                Error::BadInput(format!("utterance {} has no transcript to score", entry.id))
            })?;
            let utt = load_utterance(entry, base_dir)?;
            let hyp_ids = decoder.decode_features(&utt.features)?;
            let ref_text = vocab.detokenize(reference)?;
            let hyp_text = vocab.detokenize(&hyp_ids)?;
            counts.accumulate(&wer(&words(&ref_text), &words(&hyp_text)));
        }
        overall.accumulate(&counts);
        reports.push(SetReport {
            name: name.clone(),
            num_utterances: entries.len(),
            wer: counts.rate(),
            counts,
        });
    }
    Ok(EvalReport {
        sets: reports,
        overall_wer: overall.rate(),
        overall_num_ref_words: overall.num_ref_words,
    })
}

/// Brute-force minimum edit distance by exhaustive recursion; oracle for
/// the DP in `wer`. Exponential, for tests on short word sequences only.
pub fn edit_distance_bruteforce(reference: &[&str], hypothesis: &[&str]) -> usize {
    match (reference.split_first(), hypothesis.split_first()) {
        (None, None) => 0,
        (None, Some(_)) => hypothesis.len(),
        (Some(_), None) => reference.len(),
        (Some((r0, rrest)), Some((h0, hrest))) => {
            let sub = edit_distance_bruteforce(rrest, hrest) + usize::from(r0 != h0);
            let del = edit_distance_bruteforce(rrest, hypothesis) + 1;
            let ins = edit_distance_bruteforce(reference, hrest) + 1;
            sub.min(del).min(ins)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vocab_roundtrip() {
        let v = Vocab::toy();
        assert_eq!(v.size(), 28);
        let ids = v.tokenize("the cat").unwrap();
        assert_eq!(v.detokenize(&ids).unwrap(), "the cat");
        assert!(v.tokenize("Ω").is_err());
        // Blank is dropped on detokenization.
        assert_eq!(v.detokenize(&[0, 2, 0, 3]).unwrap(), "ab");
    }

    #[test]
    fn wer_hand_cases() {
        let r: Vec<&str> = "the quick brown fox".split(' ').collect();
        assert_eq!(wer(&r, &r).errors(), 0);
        let h: Vec<&str> = "the quack brown".split(' ').collect();
        let c = wer(&r, &h);
        assert_eq!(
            (c.substitutions, c.deletions, c.insertions, c.num_ref_words),
            (1, 1, 0, 4)
        );
        assert!((c.rate() - 0.5).abs() < 1e-15);
        // Empty reference: every hypothesis word is an insertion; rate guards
        // against division by zero.
        let empty: Vec<&str> = vec![];
        let c = wer(&empty, &h);
        assert_eq!(c.insertions, 3);
        assert_eq!(c.rate(), 3.0);
        // Empty hypothesis: all deletions.
        let c = wer(&r, &empty);
        assert_eq!(c.deletions, 4);
    }

    #[test]
    fn tie_break_prefers_substitution() {
        // "a" -> "b" can be (del + ins) or one substitution; both have paths
        // in the DP but substitution has lower cost so it always wins. For a
        // genuine tie, "a b" -> "b" has distance 1 achievable only via one
        // deletion here, while "a" -> "a x" forces an insertion.
        let c = wer(&["a"], &["b"]);
        assert_eq!((c.substitutions, c.deletions, c.insertions), (1, 0, 0));
        let c = wer(&["a", "b"], &["b"]);
        assert_eq!(c.errors(), 1);
        assert_eq!(c.deletions, 1);
        let c = wer(&["a"], &["a", "x"]);
        assert_eq!((c.substitutions, c.deletions, c.insertions), (0, 0, 1));
    }

    #[test]
    fn dp_matches_bruteforce_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let lexicon = ["a", "b", "c", "d"];
        for _ in 0..300 {
            let rl = rng.gen_range(0..6);
            let hl = rng.gen_range(0..6);
            let r: Vec<&str> = (0..rl).map(|_| lexicon[rng.gen_range(0..4)]).collect();
            let h: Vec<&str> = (0..hl).map(|_| lexicon[rng.gen_range(0..4)]).collect();
            let c = wer(&r, &h);
            assert_eq!(c.errors(), edit_distance_bruteforce(&r, &h), "{r:?} vs {h:?}");
        }
    }

    #[test]
    fn counts_pool_by_word_count() {
        let mut total = WerCounts::default();
        total.accumulate(&wer(&["a", "b"], &["a", "c"])); // 1 error / 2 words
        total.accumulate(&wer(&["x"; 8], &["x"; 8])); // 0 errors / 8 words
        assert!((total.rate() - 0.1).abs() < 1e-15);
    }
}
