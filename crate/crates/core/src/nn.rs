//! Parameter storage and neural-network building blocks on top of the tape.

use std::collections::HashMap;

use ndarray::{Array2, Array3, ArrayD, Ix2, Ix3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, VarId};

/// Named parameter tensors in a stable insertion order. The order fixes the
/// optimizer update sequence and the checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, ArrayD<f64>)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        &self.entries[self.index[name]].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        let i = self.index[name];
        &mut self.entries[i].1
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Bind every parameter as a tape leaf for one forward/backward pass.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let mut ids = HashMap::new();
        for (name, value) in &self.entries {
            ids.insert(name.clone(), tape.leaf(value.clone()));
        }
        Binding { ids }
    }
}

/// Map from parameter name to its leaf on a particular tape.
pub struct Binding {
    ids: HashMap<String, VarId>,
}

impl Binding {
    pub fn id(&self, name: &str) -> VarId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Gradients per parameter name after `tape.backward`; parameters the
    /// loss does not touch get zeros.
    pub fn grads(
        &self,
        params: &ParamStore,
        grads: &[Option<ArrayD<f64>>],
    ) -> Vec<(String, ArrayD<f64>)> {
        params
            .iter()
            .map(|(name, value)| {
                let g = grads[self.id(name)]
                    .clone()
                    .unwrap_or_else(|| ArrayD::zeros(value.raw_dim()));
                (name.to_string(), g)
            })
            .collect()
    }
}

/// Uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn init_uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), fan_in: usize) -> ArrayD<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn(shape, |_| rng.gen_range(-bound..bound)).into_dyn()
}

pub fn zeros2(shape: (usize, usize)) -> ArrayD<f64> {
    Array2::<f64>::zeros(shape).into_dyn()
}

/// x @ W + b with W `[in x out]` and b `[1 x out]`.
pub fn linear(tape: &mut Tape, x: VarId, w: VarId, b: VarId) -> VarId {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

/// Layer normalization over the last axis with learned gain and bias rows.
pub fn layer_norm(tape: &mut Tape, x: VarId, gain: VarId, bias: VarId) -> VarId {
    let n = tape.normalize_rows(x, 1e-5);
    let n = tape.mul_row(n, gain);
    tape.add_row(n, bias)
}

fn as3(a: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    a.view().into_dimensionality::<Ix3>().unwrap()
}

/// 3x3 "same" convolution over a `[C_in x T x F]` tensor.
/// Weights are `[C_out x C_in*9]` (kernel unrolled row-major), bias `[1 x C_out]`.
pub fn conv3x3_same(tape: &mut Tape, x: VarId, w: VarId, b: VarId) -> VarId {
    let xv = as3(tape.value(x)).to_owned();
    let wv = tape
        .value(w)
        .view()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .to_owned();
    let bv = tape
        .value(b)
        .view()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .to_owned();
    let (cin, t_len, f_len) = xv.dim();
    let cout = wv.nrows();
    assert_eq!(wv.ncols(), cin * 9);

    let conv = |xv: &Array3<f64>, wv: &Array2<f64>, bv: &Array2<f64>| {
        let mut out = Array3::<f64>::zeros((cout, t_len, f_len));
        for co in 0..cout {
            for t in 0..t_len {
                for f in 0..f_len {
                    let mut acc = bv[[0, co]];
                    for ci in 0..cin {
                        for (kt, dt) in (-1i64..=1).enumerate() {
                            let tt = t as i64 + dt;
                            if tt < 0 || tt >= t_len as i64 {
                                continue;
                            }
                            for (kf, df) in (-1i64..=1).enumerate() {
                                let ff = f as i64 + df;
                                if ff < 0 || ff >= f_len as i64 {
                                    continue;
                                }
                                acc += xv[[ci, tt as usize, ff as usize]]
                                    * wv[[co, ci * 9 + kt * 3 + kf]];
                            }
                        }
                    }
                    out[[co, t, f]] = acc;
                }
            }
        }
        out
    };

    let out = conv(&xv, &wv, &bv);
    tape.custom(
        out.into_dyn(),
        vec![x, w, b],
        Box::new(move |g, p, _| {
            let g3 = as3(g);
            let xv = as3(p[0]);
            let wv = p[1].view().into_dimensionality::<Ix2>().unwrap();
            let mut gx = Array3::<f64>::zeros((cin, t_len, f_len));
            let mut gw = Array2::<f64>::zeros((cout, cin * 9));
            let mut gb = Array2::<f64>::zeros((1, cout));
            for co in 0..cout {
                for t in 0..t_len {
                    for f in 0..f_len {
                        let go = g3[[co, t, f]];
                        gb[[0, co]] += go;
                        for ci in 0..cin {
                            for (kt, dt) in (-1i64..=1).enumerate() {
                                let tt = t as i64 + dt;
                                if tt < 0 || tt >= t_len as i64 {
                                    continue;
                                }
                                for (kf, df) in (-1i64..=1).enumerate() {
                                    let ff = f as i64 + df;
                                    if ff < 0 || ff >= f_len as i64 {
                                        continue;
                                    }
                                    let k = ci * 9 + kt * 3 + kf;
                                    gx[[ci, tt as usize, ff as usize]] += go * wv[[co, k]];
                                    gw[[co, k]] += go * xv[[ci, tt as usize, ff as usize]];
                                }
                            }
                        }
                    }
                }
            }
            vec![gx.into_dyn(), gw.into_dyn(), gb.into_dyn()]
        }),
    )
}

/// Max pooling along the time axis of a `[C x T x F]` tensor with kernel ==
/// stride and floor semantics.
pub fn max_pool_time(tape: &mut Tape, x: VarId, stride: usize) -> VarId {
    let xv = as3(tape.value(x)).to_owned();
    let (c, t_len, f_len) = xv.dim();
    let t_out = t_len / stride;
    let mut out = Array3::<f64>::zeros((c, t_out, f_len));
    let mut arg = Array3::<usize>::zeros((c, t_out, f_len));
    for ci in 0..c {
        for to in 0..t_out {
            for f in 0..f_len {
                let mut best = f64::NEG_INFINITY;
                let mut bi = 0;
                for k in 0..stride {
                    let v = xv[[ci, to * stride + k, f]];
                    if v > best {
                        best = v;
                        bi = to * stride + k;
                    }
                }
                out[[ci, to, f]] = best;
                arg[[ci, to, f]] = bi;
            }
        }
    }
    tape.custom(
        out.into_dyn(),
        vec![x],
        Box::new(move |g, _, _| {
            let g3 = as3(g);
            let mut gx = Array3::<f64>::zeros((c, t_len, f_len));
            for ci in 0..c {
                for to in 0..t_out {
                    for f in 0..f_len {
                        gx[[ci, arg[[ci, to, f]], f]] += g3[[ci, to, f]];
                    }
                }
            }
            vec![gx.into_dyn()]
        }),
    )
}

/// Reorder `[C x T x F]` to a `[T x C*F]` matrix (channel-major columns).
pub fn flatten_time_major(tape: &mut Tape, x: VarId) -> VarId {
    let xv = as3(tape.value(x)).to_owned();
    let (c, t_len, f_len) = xv.dim();
    let mut out = Array2::<f64>::zeros((t_len, c * f_len));
    for t in 0..t_len {
        for ci in 0..c {
            for f in 0..f_len {
                out[[t, ci * f_len + f]] = xv[[ci, t, f]];
            }
        }
    }
    tape.custom(
        out.into_dyn(),
        vec![x],
        Box::new(move |g, _, _| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut gx = Array3::<f64>::zeros((c, t_len, f_len));
            for t in 0..t_len {
                for ci in 0..c {
                    for f in 0..f_len {
                        gx[[ci, t, f]] = g2[[t, ci * f_len + f]];
                    }
                }
            }
            vec![gx.into_dyn()]
        }),
    )
}

/// Parameter names for one LSTM layer under `prefix`.
pub fn init_lstm(
    params: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    input_dim: usize,
    cell_dim: usize,
) {
    // Gate order: input, forget, cell candidate, output.
    params.insert(
        &format!("{prefix}/wx"),
        init_uniform(rng, (input_dim, 4 * cell_dim), input_dim),
    );
    params.insert(
        &format!("{prefix}/wh"),
        init_uniform(rng, (cell_dim, 4 * cell_dim), cell_dim),
    );
    params.insert(&format!("{prefix}/b"), zeros2((1, 4 * cell_dim)));
}

/// Uni-directional LSTM over the rows of `x` (`[n x input_dim]`), returning
/// the hidden state sequence `[n x cell_dim]`. Initial state is zero.
pub fn lstm_forward(
    tape: &mut Tape,
    binding: &Binding,
    prefix: &str,
    x: VarId,
    cell_dim: usize,
) -> VarId {
    let wx = binding.id(&format!("{prefix}/wx"));
    let wh = binding.id(&format!("{prefix}/wh"));
    let b = binding.id(&format!("{prefix}/b"));
    let n = tape.value2(x).nrows();
    let mut h_prev = tape.leaf2(Array2::zeros((1, cell_dim)));
    let mut c_prev = tape.leaf2(Array2::zeros((1, cell_dim)));
    let mut hs = Vec::with_capacity(n);
    for step in 0..n {
        let xt = tape.slice_row(x, step);
        let gx = tape.matmul(xt, wx);
        let gh = tape.matmul(h_prev, wh);
        let gates = tape.add(gx, gh);
        let gates = tape.add_row(gates, b);
        let gi = slice_cols(tape, gates, 0, cell_dim);
        let gf = slice_cols(tape, gates, cell_dim, cell_dim);
        let gc = slice_cols(tape, gates, 2 * cell_dim, cell_dim);
        let go = slice_cols(tape, gates, 3 * cell_dim, cell_dim);
        let i = tape.sigmoid(gi);
        let f = tape.sigmoid(gf);
        let cand = tape.tanh(gc);
        let o = tape.sigmoid(go);
        let fc = tape.mul(f, c_prev);
        let ic = tape.mul(i, cand);
        let c_new = tape.add(fc, ic);
        let ct = tape.tanh(c_new);
        let h_new = tape.mul(o, ct);
        h_prev = h_new;
        c_prev = c_new;
        hs.push(h_new);
    }
    tape.concat_rows(&hs)
}

/// Prepend a constant zero row to a rank-2 node (the prediction network's
/// start state uses a zero embedding).
pub fn pad_top_zero(tape: &mut Tape, x: VarId) -> VarId {
    let xv = tape.value2(x).to_owned();
    let (n, d) = xv.dim();
    let mut out = Array2::<f64>::zeros((n + 1, d));
    out.slice_mut(ndarray::s![1.., ..]).assign(&xv);
    tape.custom(
        out.into_dyn(),
        vec![x],
        Box::new(move |g, _, _| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            vec![g2.slice(ndarray::s![1.., ..]).to_owned().into_dyn()]
        }),
    )
}

/// Concatenate rank-2 nodes with equal row counts along the column axis.
pub fn concat_cols(tape: &mut Tape, parts: &[VarId]) -> VarId {
    assert!(!parts.is_empty());
    let widths: Vec<usize> = parts.iter().map(|&p| tape.value2(p).ncols()).collect();
    let n = tape.value2(parts[0]).nrows();
    let total: usize = widths.iter().sum();
    let mut out = Array2::<f64>::zeros((n, total));
    let mut col = 0;
    for (&p, &w) in parts.iter().zip(&widths) {
        out.slice_mut(ndarray::s![.., col..col + w])
            .assign(&tape.value2(p));
        col += w;
    }
    tape.custom(
        out.into_dyn(),
        parts.to_vec(),
        Box::new(move |g, _, _| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut grads = Vec::with_capacity(widths.len());
            let mut col = 0;
            for &w in &widths {
                grads.push(g2.slice(ndarray::s![.., col..col + w]).to_owned().into_dyn());
                col += w;
            }
            grads
        }),
    )
}

/// View a `[C x T x F]` tensor as `[T*F x C]` rows so channel-axis layer
/// norm can reuse the row-wise primitives.
pub fn channels_to_rows(tape: &mut Tape, x: VarId) -> VarId {
    let xv = as3(tape.value(x)).to_owned();
    let (c, t_len, f_len) = xv.dim();
    let mut out = Array2::<f64>::zeros((t_len * f_len, c));
    for ci in 0..c {
        for t in 0..t_len {
            for f in 0..f_len {
                out[[t * f_len + f, ci]] = xv[[ci, t, f]];
            }
        }
    }
    tape.custom(
        out.into_dyn(),
        vec![x],
        Box::new(move |g, _, _| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut gx = Array3::<f64>::zeros((c, t_len, f_len));
            for ci in 0..c {
                for t in 0..t_len {
                    for f in 0..f_len {
                        gx[[ci, t, f]] = g2[[t * f_len + f, ci]];
                    }
                }
            }
            vec![gx.into_dyn()]
        }),
    )
}

/// Inverse of [`channels_to_rows`].
pub fn rows_to_channels(tape: &mut Tape, x: VarId, t_len: usize, f_len: usize) -> VarId {
    let xv = tape.value2(x).to_owned();
    let c = xv.ncols();
    assert_eq!(xv.nrows(), t_len * f_len);
    let mut out = Array3::<f64>::zeros((c, t_len, f_len));
    for ci in 0..c {
        for t in 0..t_len {
            for f in 0..f_len {
                out[[ci, t, f]] = xv[[t * f_len + f, ci]];
            }
        }
    }
    tape.custom(
        out.into_dyn(),
        vec![x],
        Box::new(move |g, _, _| {
            let g3 = as3(g);
            let mut gx = Array2::<f64>::zeros((t_len * f_len, c));
            for ci in 0..c {
                for t in 0..t_len {
                    for f in 0..f_len {
                        gx[[t * f_len + f, ci]] = g3[[ci, t, f]];
                    }
                }
            }
            vec![gx.into_dyn()]
        }),
    )
}

/// Columns `[start, start+len)` of a rank-2 node.
pub fn slice_cols(tape: &mut Tape, x: VarId, start: usize, len: usize) -> VarId {
    let xv = tape.value2(x).to_owned();
    let (n, d) = xv.dim();
    let out = xv.slice(ndarray::s![.., start..start + len]).to_owned();
    tape.custom(
        out.into_dyn(),
        vec![x],
        Box::new(move |g, _, _| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut gx = Array2::<f64>::zeros((n, d));
            gx.slice_mut(ndarray::s![.., start..start + len]).assign(&g2);
            vec![gx.into_dyn()]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;

    fn fd_check_params(
        params: &ParamStore,
        forward: impl Fn(&mut Tape, &Binding) -> VarId,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape);
        let root = forward(&mut tape, &binding);
        let grads = tape.backward(root);
        let analytic = binding.grads(params, &grads);
        let eps = 1e-6;
        for (name, g) in &analytic {
            let base = params.get(name).clone();
            for (lin, &gv) in g.iter().enumerate() {
                let eval = |delta: f64| {
                    let mut p2 = params.clone();
                    let arr = p2.get_mut(name);
                    arr.as_slice_mut().unwrap()[lin] = base.as_slice().unwrap()[lin] + delta;
                    let mut t = Tape::new();
                    let b = p2.bind(&mut t);
                    let r = forward(&mut t, &b);
                    t.scalar(r)
                };
                let num = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let denom = num.abs().max(gv.abs()).max(1e-6);
                assert!(
                    (num - gv).abs() / denom < tol,
                    "{name}[{lin}]: numeric {num} analytic {gv}"
                );
            }
        }
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut params = ParamStore::new();
        init_lstm(&mut params, &mut rng, "lstm", 3, 4);
        let x0 = Array2::from_shape_fn((5, 3), |_| rng.gen_range(-0.5..0.5));
        fd_check_params(
            &params,
            move |tape, binding| {
                let x = tape.leaf2(x0.clone());
                let h = lstm_forward(tape, binding, "lstm", x, 4);
                let s = tape.tanh(h);
                tape.sum_all(s)
            },
            1e-4,
        );
    }

    #[test]
    fn conv_and_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = ParamStore::new();
        params.insert("w", init_uniform(&mut rng, (3, 2 * 9), 18));
        params.insert("b", init_uniform(&mut rng, (1, 3), 3));
        let x0 =
            ndarray::Array3::from_shape_fn((2, 6, 4), |_| rng.gen_range(-0.5..0.5)).into_dyn();
        fd_check_params(
            &params,
            move |tape, binding| {
                let x = tape.leaf(x0.clone());
                let y = conv3x3_same(tape, x, binding.id("w"), binding.id("b"));
                let y = tape.relu(y);
                let y = max_pool_time(tape, y, 2);
                let y = flatten_time_major(tape, y);
                let s = tape.tanh(y);
                tape.sum_all(s)
            },
            1e-4,
        );
    }

    #[test]
    fn lstm_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamStore::new();
        init_lstm(&mut params, &mut rng, "l", 3, 4);
        let x0 = Array2::from_shape_fn((6, 3), |_| rng.gen_range(-0.5..0.5));
        let run = |x: Array2<f64>| {
            let mut t = Tape::new();
            let b = params.bind(&mut t);
            let xi = t.leaf2(x);
            let h = lstm_forward(&mut t, &b, "l", xi, 4);
            t.value2(h).to_owned()
        };
        let h0 = run(x0.clone());
        let mut x1 = x0.clone();
        x1[[4, 1]] += 1.0;
        let h1 = run(x1);
        for step in 0..4 {
            assert_eq!(h0.row(step), h1.row(step), "row {step} changed");
        }
        assert_ne!(h0.row(4), h1.row(4));
    }

    #[test]
    fn param_store_order_is_stable() {
        let mut p = ParamStore::new();
        p.insert("b", zeros2((1, 2)));
        p.insert("a", zeros2((1, 2)));
        let names: Vec<_> = p.names().collect();
        assert_eq!(names, vec!["b", "a"]);
    }
}
