//! Convolutional feature encoder (8x time downsampling) plus a pre-norm
//! Transformer context network with relative-position self-attention.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, VarId};
use crate::masking::{apply_feature_mask, AttentionMask, SpanMask};
use crate::nn::{
    self, concat_cols, conv3x3_same, flatten_time_major, init_uniform, layer_norm, linear,
    max_pool_time, slice_cols, zeros2, Binding, ParamStore,
};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    /// Output channels of the two convolutional blocks.
    pub conv_channels: (usize, usize),
    pub num_layers: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub max_relative_distance: usize,
}

impl EncoderConfig {
    /// Hyperparameters at production scale: 18 layers, d_model 512,
    /// feed-forward 2048, 8 heads, conv channels 64/128.
    pub fn full_scale() -> Self {
        EncoderConfig {
            conv_channels: (64, 128),
            num_layers: 18,
            d_model: 512,
            ffn_dim: 2048,
            num_heads: 8,
            max_relative_distance: 64,
        }
    }

    pub fn toy() -> Self {
        EncoderConfig {
            conv_channels: (4, 8),
            num_layers: 2,
            d_model: 64,
            ffn_dim: 128,
            num_heads: 4,
            max_relative_distance: 64,
        }
    }

    pub fn head_dim(&self) -> usize {
        assert_eq!(self.d_model % self.num_heads, 0, "d_model must divide into heads");
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Downsampled length after the two pooling stages (strides 2 then 4).
pub fn downsample_length(t: usize) -> usize {
    (t / 2) / 4
}

/// Register all encoder parameters under the `enc/` prefix.
pub fn init_params(params: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &EncoderConfig, input_dim: usize) {
    let (c1, c2) = cfg.conv_channels;
    let conv = |params: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize| {
        params.insert(&format!("enc/{name}/w"), init_uniform(rng, (cout, cin * 9), cin * 9));
        params.insert(&format!("enc/{name}/b"), zeros2((1, cout)));
        params.insert(&format!("enc/{name}_ln/g"), Array2::ones((1, cout)).into_dyn());
        params.insert(&format!("enc/{name}_ln/b"), zeros2((1, cout)));
    };
    conv(params, rng, "conv1a", 1, c1);
    conv(params, rng, "conv1b", c1, c1);
    conv(params, rng, "conv2a", c1, c2);
    conv(params, rng, "conv2b", c2, c2);
    let flat = c2 * input_dim;
    params.insert("enc/proj/w", init_uniform(rng, (flat, cfg.d_model), flat));
    params.insert("enc/proj/b", zeros2((1, cfg.d_model)));
    params.insert("enc/mask_vec", init_uniform(rng, (1, cfg.d_model), cfg.d_model));
    let dh = cfg.head_dim();
    for l in 0..cfg.num_layers {
        let p = |s: &str| format!("enc/l{l}/{s}");
        params.insert(&p("ln1/g"), Array2::ones((1, cfg.d_model)).into_dyn());
        params.insert(&p("ln1/b"), zeros2((1, cfg.d_model)));
        for w in ["wq", "wk", "wv"] {
            params.insert(&p(&format!("attn/{w}")), init_uniform(rng, (cfg.d_model, cfg.d_model), cfg.d_model));
        }
        for b in ["bq", "bk", "bv"] {
            params.insert(&p(&format!("attn/{b}")), zeros2((1, cfg.d_model)));
        }
        // Residual output projections start at zero so a fresh stack is the
        // identity map.
        params.insert(&p("attn/wo"), zeros2((cfg.d_model, cfg.d_model)));
        params.insert(&p("attn/bo"), zeros2((1, cfg.d_model)));
        params.insert(
            &p("attn/rel"),
            init_uniform(rng, (2 * cfg.max_relative_distance + 1, dh), dh),
        );
        params.insert(&p("ln2/g"), Array2::ones((1, cfg.d_model)).into_dyn());
        params.insert(&p("ln2/b"), zeros2((1, cfg.d_model)));
        params.insert(&p("ffn/w1"), init_uniform(rng, (cfg.d_model, cfg.ffn_dim), cfg.d_model));
        params.insert(&p("ffn/b1"), zeros2((1, cfg.ffn_dim)));
        params.insert(&p("ffn/w2"), zeros2((cfg.ffn_dim, cfg.d_model)));
        params.insert(&p("ffn/b2"), zeros2((1, cfg.d_model)));
    }
}

/// Clamped-offset index matrix into a relative-position table with
/// `2 * max_dist + 1` entries.
fn relative_index(t_len: usize, max_dist: usize) -> Array2<usize> {
    Array2::from_shape_fn((t_len, t_len), |(t, tau)| {
        let off = tau as i64 - t as i64;
        (off.clamp(-(max_dist as i64), max_dist as i64) + max_dist as i64) as usize
    })
}

/// Single-head attention with additive relative-position key bias:
/// weights = softmax over visible tau of q_t . (k_tau + p[tau - t]),
/// output_t = sum_tau weights * v_tau. Returns (weights, output).
pub fn relative_attention(
    tape: &mut Tape,
    q: VarId,
    k: VarId,
    v: VarId,
    rel_table: VarId,
    mask: &AttentionMask,
) -> Result<(VarId, VarId)> {
    let t_len = tape.value2(q).nrows();
    if mask.t_len() != t_len {
        return Err(Error::BadInput("mask length differs from sequence length".into()));
    }
    for t in 0..t_len {
        if !(0..t_len).any(|tau| mask.is_visible(t, tau)) {
            return Err(Error::BadInput(format!("attention row {t} has no visible position")));
        }
    }
    let max_dist = (tape.value2(rel_table).nrows() - 1) / 2;
    let kt = transpose(tape, k);
    let content = tape.matmul(q, kt);
    let rel_t = transpose(tape, rel_table);
    let per_offset = tape.matmul(q, rel_t);
    let rel_scores = tape.gather_cols_per_row(per_offset, relative_index(t_len, max_dist));
    let scores = tape.add(content, rel_scores);
    let weights = tape.masked_softmax_rows(scores, mask.visible().clone());
    let out = tape.matmul(weights, v);
    Ok((weights, out))
}

fn transpose(tape: &mut Tape, x: VarId) -> VarId {
    let v = tape.value2(x).t().to_owned();
    tape.custom(
        v.into_dyn(),
        vec![x],
        Box::new(|g, _, _| {
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            vec![g2.t().to_owned().into_dyn()]
        }),
    )
}

/// One pre-norm Transformer block: x + Attn(LN(x)) then + FFN(LN(.)).
pub fn transformer_block(
    tape: &mut Tape,
    binding: &Binding,
    cfg: &EncoderConfig,
    layer: usize,
    x: VarId,
    mask: &AttentionMask,
) -> Result<VarId> {
    let p = |s: &str| format!("enc/l{layer}/{s}");
    let dh = cfg.head_dim();
    let xn = layer_norm(tape, x, binding.id(&p("ln1/g")), binding.id(&p("ln1/b")));
    let q = linear(tape, xn, binding.id(&p("attn/wq")), binding.id(&p("attn/bq")));
    let k = linear(tape, xn, binding.id(&p("attn/wk")), binding.id(&p("attn/bk")));
    let v = linear(tape, xn, binding.id(&p("attn/wv")), binding.id(&p("attn/bv")));
    let rel = binding.id(&p("attn/rel"));
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = slice_cols(tape, q, h * dh, dh);
        let kh = slice_cols(tape, k, h * dh, dh);
        let vh = slice_cols(tape, v, h * dh, dh);
        let (_, oh) = relative_attention(tape, qh, kh, vh, rel, mask)?;
        heads.push(oh);
    }
    let cat = concat_cols(tape, &heads);
    let attn_out = linear(tape, cat, binding.id(&p("attn/wo")), binding.id(&p("attn/bo")));
    let x = tape.add(x, attn_out);
    let xn2 = layer_norm(tape, x, binding.id(&p("ln2/g")), binding.id(&p("ln2/b")));
    let h1 = linear(tape, xn2, binding.id(&p("ffn/w1")), binding.id(&p("ffn/b1")));
    let h1 = tape.relu(h1);
    let h2 = linear(tape, h1, binding.id(&p("ffn/w2")), binding.id(&p("ffn/b2")));
    Ok(tape.add(x, h2))
}

/// Convolutional front-end plus the post-pool linear projection: `[T x 80]`
/// features to a `[T' x d_model]` latent, T' = floor(floor(T/2)/4).
pub fn conv_encode(
    tape: &mut Tape,
    binding: &Binding,
    cfg: &EncoderConfig,
    features: &Array2<f64>,
) -> Result<VarId> {
    let t_in = features.nrows();
    if downsample_length(t_in) == 0 {
        return Err(Error::BadInput(format!(
            "{t_in} frames leave nothing after 8x downsampling"
        )));
    }
    let f_len = features.ncols();
    let x = tape.leaf(
        features
            .clone()
            .into_shape((1, t_in, f_len))
            .unwrap()
            .into_dyn(),
    );
    let conv_ln_relu = |tape: &mut Tape, x: VarId, name: &str, t_len: usize| {
        let y = conv3x3_same(
            tape,
            x,
            binding.id(&format!("enc/{name}/w")),
            binding.id(&format!("enc/{name}/b")),
        );
        let rows = nn::channels_to_rows(tape, y);
        let rows = layer_norm(
            tape,
            rows,
            binding.id(&format!("enc/{name}_ln/g")),
            binding.id(&format!("enc/{name}_ln/b")),
        );
        let y = nn::rows_to_channels(tape, rows, t_len, f_len);
        tape.relu(y)
    };
    let x = conv_ln_relu(tape, x, "conv1a", t_in);
    let x = conv_ln_relu(tape, x, "conv1b", t_in);
    let x = max_pool_time(tape, x, 2);
    let t2 = t_in / 2;
    let x = conv_ln_relu(tape, x, "conv2a", t2);
    let x = conv_ln_relu(tape, x, "conv2b", t2);
    let x = max_pool_time(tape, x, 4);
    let flat = flatten_time_major(tape, x);
    let latent = linear(tape, flat, binding.id("enc/proj/w"), binding.id("enc/proj/b"));
    debug_assert_eq!(tape.value2(latent).ncols(), cfg.d_model);
    Ok(latent)
}

/// Run the Transformer context network on a `[T' x d_model]` latent.
pub fn context_forward(
    tape: &mut Tape,
    binding: &Binding,
    cfg: &EncoderConfig,
    mut x: VarId,
    mask: &AttentionMask,
) -> Result<VarId> {
    for l in 0..cfg.num_layers {
        x = transformer_block(tape, binding, cfg, l, x, mask)?;
    }
    Ok(x)
}

/// Full encoder pass. Returns the pre-masking latent (contrastive targets
/// are projected from it) and the context output `c`.
pub fn encode(
    tape: &mut Tape,
    binding: &Binding,
    cfg: &EncoderConfig,
    features: &Array2<f64>,
    mask: &AttentionMask,
    feature_mask: Option<&SpanMask>,
) -> Result<(VarId, VarId)> {
    let latent = conv_encode(tape, binding, cfg, features)?;
    let t_len = tape.value2(latent).nrows();
    if mask.t_len() != t_len {
        return Err(Error::BadInput(format!(
            "attention mask is {} frames but latent is {t_len}",
            mask.t_len()
        )));
    }
    let masked = match feature_mask {
        Some(sm) => {
            if sm.indices().iter().any(|&i| i >= t_len) {
                return Err(Error::BadInput("span mask index out of range".into()));
            }
            apply_feature_mask(tape, latent, sm, binding.id("enc/mask_vec"))
        }
        None => latent,
    };
    let c = context_forward(tape, binding, cfg, masked, mask)?;
    Ok((latent, c))
}
