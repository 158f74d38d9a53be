//! Span masking for contrastive pretraining and chunk-wise attention masks
//! for streaming.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, VarId};
use crate::{Error, Result};

/// Masked time indices M_T over a downsampled sequence of length `t_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanMask {
    indices: Vec<usize>,
    t_len: usize,
}

impl SpanMask {
    pub fn new(mut indices: Vec<usize>, t_len: usize) -> Self {
        indices.sort_unstable();
        indices.dedup();
        assert!(indices.iter().all(|&i| i < t_len));
        SpanMask { indices, t_len }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, t: usize) -> bool {
        self.indices.binary_search(&t).is_ok()
    }
}

/// Boolean T' x T' visibility matrix for self-attention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    visible: Array2<bool>,
}

impl AttentionMask {
    pub fn full(t_len: usize) -> Self {
        AttentionMask {
            visible: Array2::from_elem((t_len, t_len), true),
        }
    }

    pub fn from_matrix(visible: Array2<bool>) -> Self {
        assert_eq!(visible.nrows(), visible.ncols());
        AttentionMask { visible }
    }

    pub fn visible(&self) -> &Array2<bool> {
        &self.visible
    }

    pub fn t_len(&self) -> usize {
        self.visible.nrows()
    }

    pub fn is_visible(&self, t: usize, tau: usize) -> bool {
        self.visible[[t, tau]]
    }
}

/// Sample start indices independently with probability `p`; each start masks
/// the next `span` frames (clipped at the end, overlaps merged). An empty
/// draw forces one random span so the contrastive loss stays defined.
pub fn sample_span_mask(
    t_len: usize,
    p: f64,
    span: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SpanMask> {
    if t_len == 0 {
        return Err(Error::BadInput("cannot mask an empty sequence".into()));
    }
    assert!(p > 0.0 && p < 1.0, "mask probability must be in (0, 1)");
    assert!(span >= 1);
    let mut masked = vec![false; t_len];
    let mut any = false;
    for i in 0..t_len {
        if rng.gen::<f64>() < p {
            any = true;
            for j in i..(i + span).min(t_len) {
                masked[j] = true;
            }
        }
    }
    if !any {
        let start = rng.gen_range(0..t_len);
        for j in start..(start + span).min(t_len) {
            masked[j] = true;
        }
    }
    let indices = masked
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    Ok(SpanMask::new(indices, t_len))
}

/// Replace masked rows of the latent with the learned mask vector node.
pub fn apply_feature_mask(
    tape: &mut Tape,
    latent: VarId,
    mask: &SpanMask,
    mask_vector: VarId,
) -> VarId {
    if mask.is_empty() {
        return latent;
    }
    tape.replace_rows(latent, mask.indices().to_vec(), mask_vector)
}

/// Chunk-wise visibility: frame `t` sees frame `tau` iff `tau`'s chunk lies
/// within the `left_chunks` previous chunks or `t`'s own chunk.
pub fn chunk_attention_mask(
    t_len: usize,
    chunk_size: usize,
    left_chunks: usize,
) -> Result<AttentionMask> {
    if t_len == 0 {
        return Err(Error::BadInput("empty sequence has no attention mask".into()));
    }
    assert!(chunk_size >= 1);
    let visible = Array2::from_shape_fn((t_len, t_len), |(t, tau)| {
        let ct = t / chunk_size;
        let ctau = tau / chunk_size;
        ctau <= ct && ct - ctau <= left_chunks
    });
    Ok(AttentionMask { visible })
}
