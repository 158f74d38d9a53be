//! Deterministic synthetic speech-like corpora for examples and
//! overfitting tests. Each token is rendered as a fixed 80-bank pattern
//! held for eight frames, so after the encoder's 8x time downsampling one
//! latent frame lines up with one transcript token.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::eval::Vocab;
use crate::frontend::{
    write_features, write_manifest, ManifestEntry, SampleRateTag, NUM_MEL_BANKS,
};
use crate::Result;

pub const FRAMES_PER_TOKEN: usize = 8;

/// Small lexicon over the toy character vocabulary.
pub const LEXICON: [&str; 8] = ["ab", "ba", "cab", "ad", "bad", "dab", "ca", "da"];

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub num_labeled: usize,
    pub num_unlabeled: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Uniform per-frame noise amplitude added to the token patterns.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_labeled: 20,
            num_unlabeled: 20,
            min_words: 1,
            max_words: 2,
            noise: 0.05,
            seed: 1234,
        }
    }
}

/// The fixed 80-bank pattern for one token, independent of any corpus seed.
pub fn token_pattern(token: u32) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x70ce + token as u64);
    (0..NUM_MEL_BANKS).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

/// Render a transcript into a `[8U x 80]` feature matrix with additive
/// uniform noise.
pub fn features_for_transcript(
    tokens: &[u32],
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let t = tokens.len() * FRAMES_PER_TOKEN;
    let mut feats = Array2::zeros((t, NUM_MEL_BANKS));
    for (u, &tok) in tokens.iter().enumerate() {
        let pattern = token_pattern(tok);
        for f in 0..FRAMES_PER_TOKEN {
            for b in 0..NUM_MEL_BANKS {
                feats[[u * FRAMES_PER_TOKEN + f, b]] =
                    pattern[b] + rng.gen_range(-noise..=noise);
            }
        }
    }
    feats
}

/// Draw a transcript of `min_words..=max_words` lexicon words joined by the
/// space token.
pub fn sample_transcript(cfg: &SynthConfig, vocab: &Vocab, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let n = rng.gen_range(cfg.min_words..=cfg.max_words);
    let text = (0..n)
        .map(|_| LEXICON[rng.gen_range(0..LEXICON.len())])
        .collect::<Vec<_>>()
        .join(" ");
    vocab.tokenize(&text).expect("lexicon words are in the vocabulary")
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub labeled_manifest: PathBuf,
    pub unlabeled_manifest: PathBuf,
    pub labeled: Vec<ManifestEntry>,
    pub unlabeled: Vec<ManifestEntry>,
}

/// Write feature files plus labeled/unlabeled JSONL manifests under `dir`.
pub fn generate_corpus(dir: &Path, cfg: &SynthConfig, vocab: &Vocab) -> Result<SynthCorpus> {
    let feat_dir = dir.join("features");
    std::fs::create_dir_all(&feat_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut labeled = Vec::with_capacity(cfg.num_labeled);
    for i in 0..cfg.num_labeled {
        let tokens = sample_transcript(cfg, vocab, &mut rng);
        let feats = features_for_transcript(&tokens, cfg.noise, &mut rng);
        let rel = PathBuf::from(format!("features/lab{i:03}.feat"));
        write_features(&dir.join(&rel), &feats)?;
        labeled.push(ManifestEntry {
            id: format!("lab{i:03}"),
            feature_path: Some(rel),
            audio_path: None,
            transcript: Some(tokens),
            sample_rate_tag: SampleRateTag::R16k,
            num_frames: feats.nrows(),
        });
    }
    let mut unlabeled = Vec::with_capacity(cfg.num_unlabeled);
    for i in 0..cfg.num_unlabeled {
        let tokens = sample_transcript(cfg, vocab, &mut rng);
        let feats = features_for_transcript(&tokens, cfg.noise, &mut rng);
        let rel = PathBuf::from(format!("features/unl{i:03}.feat"));
        write_features(&dir.join(&rel), &feats)?;
        unlabeled.push(ManifestEntry {
            id: format!("unl{i:03}"),
            feature_path: Some(rel),
            audio_path: None,
            transcript: None,
            sample_rate_tag: SampleRateTag::R16k,
            num_frames: feats.nrows(),
        });
    }
    let labeled_manifest = dir.join("labeled.jsonl");
    let unlabeled_manifest = dir.join("unlabeled.jsonl");
    write_manifest(&labeled_manifest, &labeled)?;
    write_manifest(&unlabeled_manifest, &unlabeled)?;
    Ok(SynthCorpus {
        labeled_manifest,
        unlabeled_manifest,
        labeled,
        unlabeled,
    })
}
