//! Prediction network, joint network, exact transducer loss over the
//! alignment lattice, a brute-force path-enumeration oracle and greedy
//! decoding.

use ndarray::{Array2, Array3, ArrayD, Ix2, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, VarId};
use crate::nn::{
    init_lstm, init_uniform, layer_norm, linear, lstm_forward, pad_top_zero, zeros2, Binding,
    ParamStore,
};
use crate::{Error, Result};

/// Output id reserved for the blank symbol.
pub const BLANK: u32 = 0;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TransducerConfig {
    pub num_blocks: usize,
    pub lstm_cell: usize,
    pub proj_dim: usize,
    pub embed_dim: usize,
    pub joint_dim: usize,
    pub vocab_size: usize,
}

impl TransducerConfig {
    /// Production-scale sizes: 2 LSTM blocks with 1024 cells projected to
    /// 640, joint dimension 640.
    pub fn full_scale(vocab_size: usize) -> Self {
        TransducerConfig {
            num_blocks: 2,
            lstm_cell: 1024,
            proj_dim: 640,
            embed_dim: 640,
            joint_dim: 640,
            vocab_size,
        }
    }

    pub fn toy(vocab_size: usize) -> Self {
        TransducerConfig {
            num_blocks: 2,
            lstm_cell: 64,
            proj_dim: 64,
            embed_dim: 64,
            joint_dim: 64,
            vocab_size,
        }
    }
}

/// Register prediction and joint network parameters.
pub fn init_params(
    params: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    cfg: &TransducerConfig,
    d_model: usize,
) {
    params.insert(
        "pred/embed",
        init_uniform(rng, (cfg.vocab_size, cfg.embed_dim), cfg.embed_dim),
    );
    let mut in_dim = cfg.embed_dim;
    for b in 0..cfg.num_blocks {
        init_lstm(params, rng, &format!("pred/b{b}/lstm"), in_dim, cfg.lstm_cell);
        params.insert(
            &format!("pred/b{b}/proj/w"),
            init_uniform(rng, (cfg.lstm_cell, cfg.proj_dim), cfg.lstm_cell),
        );
        params.insert(&format!("pred/b{b}/proj/b"), zeros2((1, cfg.proj_dim)));
        params.insert(
            &format!("pred/b{b}/ln/g"),
            Array2::ones((1, cfg.proj_dim)).into_dyn(),
        );
        params.insert(&format!("pred/b{b}/ln/b"), zeros2((1, cfg.proj_dim)));
        in_dim = cfg.proj_dim;
    }
    params.insert("joint/enc_w", init_uniform(rng, (d_model, cfg.joint_dim), d_model));
    params.insert("joint/enc_b", zeros2((1, cfg.joint_dim)));
    params.insert("joint/pred_w", init_uniform(rng, (cfg.proj_dim, cfg.joint_dim), cfg.proj_dim));
    params.insert("joint/pred_b", zeros2((1, cfg.joint_dim)));
    params.insert("joint/out_w", init_uniform(rng, (cfg.joint_dim, cfg.vocab_size), cfg.joint_dim));
    params.insert("joint/out_b", zeros2((1, cfg.vocab_size)));
}

/// Label-history encoder: `[U+1 x proj_dim]`, row 0 is the start state and
/// row u conditions on the first u tokens of the prefix.
pub fn prediction_forward(
    tape: &mut Tape,
    binding: &Binding,
    cfg: &TransducerConfig,
    y_prefix: &[u32],
) -> Result<VarId> {
    if y_prefix.contains(&BLANK) {
        return Err(Error::BadInput("blank in prediction-network prefix".into()));
    }
    if let Some(&bad) = y_prefix.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::BadInput(format!("token {bad} outside vocabulary")));
    }
    let embed = binding.id("pred/embed");
    let mut x = if y_prefix.is_empty() {
        tape.leaf2(Array2::zeros((1, cfg.embed_dim)))
    } else {
        let g = tape.gather_rows(embed, y_prefix.iter().map(|&t| t as usize).collect());
        pad_top_zero(tape, g)
    };
    for b in 0..cfg.num_blocks {
        let h = lstm_forward(tape, binding, &format!("pred/b{b}/lstm"), x, cfg.lstm_cell);
        let p = linear(
            tape,
            h,
            binding.id(&format!("pred/b{b}/proj/w")),
            binding.id(&format!("pred/b{b}/proj/b")),
        );
        x = layer_norm(
            tape,
            p,
            binding.id(&format!("pred/b{b}/ln/g")),
            binding.id(&format!("pred/b{b}/ln/b")),
        );
    }
    Ok(x)
}

/// Log-posterior tensor over the alignment lattice, stored row-major as
/// `[(T' * (U+1)) x V]` with row `t * (U+1) + u`.
#[derive(Clone, Copy, Debug)]
pub struct LatticeLogits {
    pub var: VarId,
    pub t_len: usize,
    pub u_plus_1: usize,
    pub vocab: usize,
}

impl LatticeLogits {
    pub fn to_array3(&self, tape: &Tape) -> Array3<f64> {
        tape.value2(self.var)
            .to_owned()
            .into_shape((self.t_len, self.u_plus_1, self.vocab))
            .unwrap()
    }
}

/// Joint network: z_{t,u} = linear_V(tanh(W_c c_t + W_h h_u)), normalized to
/// log-probabilities over the vocabulary.
pub fn joint(tape: &mut Tape, binding: &Binding, c: VarId, h: VarId) -> LatticeLogits {
    let t_len = tape.value2(c).nrows();
    let u_plus_1 = tape.value2(h).nrows();
    let ce = linear(tape, c, binding.id("joint/enc_w"), binding.id("joint/enc_b"));
    let he = linear(tape, h, binding.id("joint/pred_w"), binding.id("joint/pred_b"));
    let comb = tape.joint_combine(ce, he);
    let comb = tape.tanh(comb);
    let logits = linear(tape, comb, binding.id("joint/out_w"), binding.id("joint/out_b"));
    let logp = tape.log_softmax_rows(logits);
    let vocab = tape.value2(logp).ncols();
    LatticeLogits {
        var: logp,
        t_len,
        u_plus_1,
        vocab,
    }
}

fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Forward lattice recursion. Returns the alpha table `[T' x (U+1)]`.
fn alpha_table(logp: &Array3<f64>, y: &[u32]) -> Array2<f64> {
    let (t_len, u_plus_1, _) = logp.dim();
    let u_len = y.len();
    assert_eq!(u_plus_1, u_len + 1);
    let blank = BLANK as usize;
    let mut alpha = Array2::from_elem((t_len, u_plus_1), f64::NEG_INFINITY);
    alpha[[0, 0]] = 0.0;
    for t in 0..t_len {
        for u in 0..=u_len {
            if t == 0 && u == 0 {
                continue;
            }
            let mut v = f64::NEG_INFINITY;
            if t > 0 {
                v = logaddexp(v, alpha[[t - 1, u]] + logp[[t - 1, u, blank]]);
            }
            if u > 0 {
                v = logaddexp(v, alpha[[t, u - 1]] + logp[[t, u - 1, y[u - 1] as usize]]);
            }
            alpha[[t, u]] = v;
        }
    }
    alpha
}

/// Backward lattice recursion: beta(t, u) is the log-probability of
/// completing the alignment from state (t, u), including the final blank.
fn beta_table(logp: &Array3<f64>, y: &[u32]) -> Array2<f64> {
    let (t_len, u_plus_1, _) = logp.dim();
    let u_len = y.len();
    let blank = BLANK as usize;
    let mut beta = Array2::from_elem((t_len, u_plus_1), f64::NEG_INFINITY);
    beta[[t_len - 1, u_len]] = logp[[t_len - 1, u_len, blank]];
    for t in (0..t_len).rev() {
        for u in (0..=u_len).rev() {
            if t == t_len - 1 && u == u_len {
                continue;
            }
            let mut v = f64::NEG_INFINITY;
            if t + 1 < t_len {
                v = logaddexp(v, logp[[t, u, blank]] + beta[[t + 1, u]]);
            }
            if u < u_len {
                v = logaddexp(v, logp[[t, u, y[u] as usize]] + beta[[t, u + 1]]);
            }
            beta[[t, u]] = v;
        }
    }
    beta
}

/// Exact negative log-likelihood over all monotonic alignments, with its
/// analytic gradient w.r.t. the `[T' x (U+1) x V]` log-posterior tensor
/// (occupancy form: minus the posterior use-probability of each arc).
pub fn loss_and_grad(logp: &Array3<f64>, y: &[u32]) -> Result<(f64, Array3<f64>)> {
    let (t_len, u_plus_1, vocab) = logp.dim();
    if t_len == 0 {
        return Err(Error::BadInput("transducer loss needs at least one frame".into()));
    }
    if u_plus_1 != y.len() + 1 {
        return Err(Error::BadInput(format!(
            "lattice has {u_plus_1} label rows but transcript length is {}",
            y.len()
        )));
    }
    if y.iter().any(|&t| t == BLANK || t as usize >= vocab) {
        return Err(Error::BadInput("transcript token out of range".into()));
    }
    let u_len = y.len();
    let blank = BLANK as usize;
    let alpha = alpha_table(logp, y);
    let beta = beta_table(logp, y);
    let total = beta[[0, 0]];
    let loss = -total;
    let mut grad = Array3::<f64>::zeros((t_len, u_plus_1, vocab));
    for t in 0..t_len {
        for u in 0..=u_len {
            // Blank arc (t, u) -> (t+1, u); from the top-right node it exits
            // the lattice.
            let after = if t + 1 < t_len {
                beta[[t + 1, u]]
            } else if u == u_len {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            let occ = (alpha[[t, u]] + logp[[t, u, blank]] + after - total).exp();
            grad[[t, u, blank]] -= occ;
            // Label arc (t, u) -> (t, u+1).
            if u < u_len {
                let occ =
                    (alpha[[t, u]] + logp[[t, u, y[u] as usize]] + beta[[t, u + 1]] - total).exp();
                grad[[t, u, y[u] as usize]] -= occ;
            }
        }
    }
    Ok((loss, grad))
}

/// Tape node for the transducer loss on top of a joint-network output.
pub fn transducer_loss(tape: &mut Tape, lattice: &LatticeLogits, y: &[u32]) -> Result<VarId> {
    let logp = lattice.to_array3(tape);
    let (loss, _) = loss_and_grad(&logp, y)?;
    let y_owned = y.to_vec();
    let (t_len, u_plus_1, vocab) = logp.dim();
    Ok(tape.custom(
        ArrayD::from_elem(IxDyn(&[]), loss),
        vec![lattice.var],
        Box::new(move |g, p, _| {
            let gscale = g.iter().copied().next().unwrap();
            let logp = p[0]
                .view()
                .into_dimensionality::<Ix2>()
                .unwrap()
                .to_owned()
                .into_shape((t_len, u_plus_1, vocab))
                .unwrap();
            let (_, grad) = loss_and_grad(&logp, &y_owned).unwrap();
            let flat = grad
                .into_shape((t_len * u_plus_1, vocab))
                .unwrap()
                .mapv(|v| v * gscale);
            vec![flat.into_dyn()]
        }),
    ))
}

/// Alpha/beta consistency probe used by property tests: log-sum-exp of
/// alpha + beta along the anti-diagonal t + u = n.
pub fn antidiagonal_total(logp: &Array3<f64>, y: &[u32], n: usize) -> f64 {
    let alpha = alpha_table(logp, y);
    let beta = beta_table(logp, y);
    let (t_len, u_plus_1) = alpha.dim();
    let mut acc = f64::NEG_INFINITY;
    for t in 0..t_len {
        if n >= t && n - t < u_plus_1 {
            acc = logaddexp(acc, alpha[[t, n - t]] + beta[[t, n - t]]);
        }
    }
    acc
}

/// Enumerates every monotonic lattice path explicitly; usable only for
/// T' + U <= 12.
pub fn transducer_loss_bruteforce(logp: &Array3<f64>, y: &[u32]) -> Result<f64> {
    let (t_len, u_plus_1, _) = logp.dim();
    if u_plus_1 != y.len() + 1 {
        return Err(Error::BadInput("transcript length mismatch".into()));
    }
    if t_len + y.len() > 12 {
        return Err(Error::BadInput(format!(
            "enumeration bound exceeded: T'+U = {}",
            t_len + y.len()
        )));
    }
    let blank = BLANK as usize;
    let u_len = y.len();
    fn walk(
        logp: &Array3<f64>,
        y: &[u32],
        t: usize,
        u: usize,
        acc: f64,
        t_len: usize,
        u_len: usize,
        blank: usize,
        total: &mut f64,
    ) {
        if t == t_len - 1 && u == u_len {
            *total += (acc + logp[[t, u, blank]]).exp();
            return;
        }
        if t + 1 < t_len {
            walk(logp, y, t + 1, u, acc + logp[[t, u, blank]], t_len, u_len, blank, total);
        }
        if u < u_len {
            walk(
                logp,
                y,
                t,
                u + 1,
                acc + logp[[t, u, y[u] as usize]],
                t_len,
                u_len,
                blank,
                total,
            );
        }
    }
    let mut total = 0.0;
    walk(logp, y, 0, 0, 0.0, t_len, u_len, blank, &mut total);
    Ok(-total.ln())
}

/// Number of monotonic alignment paths. The final arc from the top-right
/// lattice node is always blank, so the count is C(T' - 1 + U, U).
pub fn path_count(t_len: usize, u_len: usize) -> u64 {
    let n = (t_len - 1 + u_len) as u64;
    let k = u_len as u64;
    let mut c = 1u64;
    for i in 0..k {
        c = c * (n - i) / (i + 1);
    }
    c
}

/// Frame-synchronous greedy decoding: at each frame take the argmax token of
/// the joint output, advancing the prediction state on non-blank emissions.
pub fn greedy_decode(
    params: &ParamStore,
    cfg: &TransducerConfig,
    c: &Array2<f64>,
    max_symbols_per_frame: usize,
) -> Result<Vec<u32>> {
    let mut hyp: Vec<u32> = Vec::new();
    for t in 0..c.nrows() {
        let mut emitted = 0;
        loop {
            let mut tape = Tape::new();
            let binding = params.bind(&mut tape);
            let h = prediction_forward(&mut tape, &binding, cfg, &hyp)?;
            let h_last = tape.slice_row(h, hyp.len());
            let c_t = tape.leaf2(c.row(t).to_owned().insert_axis(ndarray::Axis(0)));
            let lattice = joint(&mut tape, &binding, c_t, h_last);
            let logp = tape.value2(lattice.var);
            let best = logp
                .row(0)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0 as u32;
            if best == BLANK || emitted >= max_symbols_per_frame {
                break;
            }
            hyp.push(best);
            emitted += 1;
        }
    }
    Ok(hyp)
}
