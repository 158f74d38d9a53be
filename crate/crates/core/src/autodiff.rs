//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Tape`] records each primitive operation as a node holding its value,
//! its parent node ids and a backward closure. Calling [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients. All model forward
//! passes in this crate are expressed as tape operations, so analytic
//! gradients come from this module; structured losses (the transducer
//! lattice, the contrastive objective) plug in as custom nodes with
//! hand-derived backward rules.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, IxDyn};

/// Index of a node on the tape.
pub type VarId = usize;

type BackFn = Box<dyn Fn(&ArrayD<f64>, &[&ArrayD<f64>], &ArrayD<f64>) -> Vec<ArrayD<f64>>>;

#[derive(Default)]
pub struct Tape {
    vals: Vec<ArrayD<f64>>,
    parents: Vec<Vec<VarId>>,
    backs: Vec<Option<BackFn>>,
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected a rank-2 tensor")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, id: VarId) -> &ArrayD<f64> {
        &self.vals[id]
    }

    /// Value of a rank-2 node.
    pub fn value2(&self, id: VarId) -> ndarray::ArrayView2<'_, f64> {
        as2(&self.vals[id])
    }

    /// Value of a scalar (0-d) node.
    pub fn scalar(&self, id: VarId) -> f64 {
        self.vals[id].iter().copied().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, parents: Vec<VarId>, back: Option<BackFn>) -> VarId {
        self.vals.push(value);
        self.parents.push(parents);
        self.backs.push(back);
        self.vals.len() - 1
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> VarId {
        self.push(value, vec![], None)
    }

    pub fn leaf2(&mut self, value: Array2<f64>) -> VarId {
        self.leaf(value.into_dyn())
    }

    pub fn scalar_leaf(&mut self, v: f64) -> VarId {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Custom node: caller supplies value, parents and the backward rule.
    pub fn custom(&mut self, value: ArrayD<f64>, parents: Vec<VarId>, back: BackFn) -> VarId {
        self.push(value, parents, Some(back))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let v = &self.vals[a] + &self.vals[b];
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let v = &self.vals[a] - &self.vals[b];
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.mapv(|x| -x)])),
        )
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = &self.vals[a] * &self.vals[b];
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, p, _| vec![g * p[1], g * p[0]])),
        )
    }

    pub fn scale(&mut self, a: VarId, s: f64) -> VarId {
        let v = self.vals[a].mapv(|x| x * s);
        self.push(v, vec![a], Some(Box::new(move |g, _, _| vec![g.mapv(|x| x * s)])))
    }

    /// Matrix product of two rank-2 nodes.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = as2(&self.vals[a]).dot(&as2(&self.vals[b]));
        self.push(
            v.into_dyn(),
            vec![a, b],
            Some(Box::new(|g, p, _| {
                let g = as2(g);
                let (pa, pb) = (as2(p[0]), as2(p[1]));
                vec![g.dot(&pb.t()).into_dyn(), pa.t().dot(&g).into_dyn()]
            })),
        )
    }

    /// Add a `[1 x d]` row vector to every row of a `[n x d]` matrix.
    pub fn add_row(&mut self, a: VarId, row: VarId) -> VarId {
        let v = &as2(&self.vals[a]) + &as2(&self.vals[row]);
        self.push(
            v.into_dyn(),
            vec![a, row],
            Some(Box::new(|g, _, _| {
                let g2 = as2(g);
                let rg = g2.sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![g.clone(), rg.into_dyn()]
            })),
        )
    }

    /// Multiply every row of a `[n x d]` matrix by a `[1 x d]` row vector.
    pub fn mul_row(&mut self, a: VarId, row: VarId) -> VarId {
        let v = &as2(&self.vals[a]) * &as2(&self.vals[row]);
        self.push(
            v.into_dyn(),
            vec![a, row],
            Some(Box::new(|g, p, _| {
                let g2 = as2(g);
                let a2 = as2(p[0]);
                let r2 = as2(p[1]);
                let ga = &g2 * &r2;
                let gr = (&g2 * &a2).sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![ga.into_dyn(), gr.into_dyn()]
            })),
        )
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let v = self.vals[a].mapv(f64::tanh);
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, _, out| vec![g * &out.mapv(|y| 1.0 - y * y)])),
        )
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let v = self.vals[a].mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, _, out| vec![g * &out.mapv(|y| y * (1.0 - y))])),
        )
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let v = self.vals[a].mapv(|x| x.max(0.0));
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, p, _| {
                vec![g * &p[0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 })]
            })),
        )
    }

    /// Row-wise normalization to zero mean and unit variance over the last
    /// axis of a rank-2 node. Affine gain/bias are applied separately with
    /// `mul_row`/`add_row`.
    pub fn normalize_rows(&mut self, a: VarId, eps: f64) -> VarId {
        let x = as2(&self.vals[a]);
        let d = x.ncols() as f64;
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        self.push(
            out.into_dyn(),
            vec![a],
            Some(Box::new(move |g, p, _| {
                let x = as2(p[0]);
                let g2 = as2(g);
                let d = x.ncols() as f64;
                let mut gx = Array2::<f64>::zeros(x.raw_dim());
                for (i, row) in x.rows().into_iter().enumerate() {
                    let mean = row.sum() / d;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Array1<f64> = row.mapv(|v| (v - mean) * inv);
                    let grow = g2.row(i);
                    let gsum = grow.sum();
                    let gdot = grow
                        .iter()
                        .zip(xhat.iter())
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                    for j in 0..x.ncols() {
                        gx[[i, j]] = inv * (grow[j] - gsum / d - xhat[j] * gdot / d);
                    }
                }
                vec![gx.into_dyn()]
            })),
        )
    }

    /// Row-wise log-softmax of a rank-2 node.
    pub fn log_softmax_rows(&mut self, a: VarId) -> VarId {
        let x = as2(&self.vals[a]);
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        self.push(
            out.into_dyn(),
            vec![a],
            Some(Box::new(|g, _, out| {
                let g2 = as2(g);
                let o2 = as2(out);
                let mut gx = g2.to_owned();
                for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
                    let gsum = g2.row(i).sum();
                    for (j, v) in row.iter_mut().enumerate() {
                        *v -= o2[[i, j]].exp() * gsum;
                    }
                }
                vec![gx.into_dyn()]
            })),
        )
    }

    /// Row-wise softmax over visible entries only; masked entries get weight
    /// exactly zero. `visible[i][j]` controls entry `(i, j)`.
    pub fn masked_softmax_rows(&mut self, a: VarId, visible: Array2<bool>) -> VarId {
        let x = as2(&self.vals[a]);
        let mut out = Array2::<f64>::zeros(x.raw_dim());
        for (i, row) in x.rows().into_iter().enumerate() {
            let m = row
                .iter()
                .zip(visible.row(i))
                .filter(|(_, &v)| v)
                .map(|(x, _)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, v) in row.iter().enumerate() {
                if visible[[i, j]] {
                    let e = (v - m).exp();
                    out[[i, j]] = e;
                    z += e;
                }
            }
            for j in 0..x.ncols() {
                out[[i, j]] /= z;
            }
        }
        self.push(
            out.into_dyn(),
            vec![a],
            Some(Box::new(move |g, _, out| {
                let g2 = as2(g);
                let o2 = as2(out);
                let mut gx = Array2::<f64>::zeros(o2.raw_dim());
                for i in 0..o2.nrows() {
                    let dot: f64 = (0..o2.ncols()).map(|j| g2[[i, j]] * o2[[i, j]]).sum();
                    for j in 0..o2.ncols() {
                        if visible[[i, j]] {
                            gx[[i, j]] = o2[[i, j]] * (g2[[i, j]] - dot);
                        }
                    }
                }
                vec![gx.into_dyn()]
            })),
        )
    }

    /// Select rows of a rank-2 node by index (with repetition allowed).
    pub fn gather_rows(&mut self, a: VarId, idx: Vec<usize>) -> VarId {
        let x = as2(&self.vals[a]);
        let mut out = Array2::<f64>::zeros((idx.len(), x.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&x.row(i));
        }
        self.push(
            out.into_dyn(),
            vec![a],
            Some(Box::new(move |g, p, _| {
                let g2 = as2(g);
                let mut gx = Array2::<f64>::zeros(as2(p[0]).raw_dim());
                for (r, &i) in idx.iter().enumerate() {
                    let mut dst = gx.row_mut(i);
                    dst += &g2.row(r);
                }
                vec![gx.into_dyn()]
            })),
        )
    }

    /// For each row `i`, pick column `idx[i][j]` of `a` to form entry `(i, j)`.
    /// Used to spread per-offset relative-position scores onto the `[T x T]`
    /// score matrix.
    pub fn gather_cols_per_row(&mut self, a: VarId, idx: Array2<usize>) -> VarId {
        let x = as2(&self.vals[a]);
        let mut out = Array2::<f64>::zeros(idx.raw_dim());
        for i in 0..idx.nrows() {
            for j in 0..idx.ncols() {
                out[[i, j]] = x[[i, idx[[i, j]]]];
            }
        }
        self.push(
            out.into_dyn(),
            vec![a],
            Some(Box::new(move |g, p, _| {
                let g2 = as2(g);
                let mut gx = Array2::<f64>::zeros(as2(p[0]).raw_dim());
                for i in 0..idx.nrows() {
                    for j in 0..idx.ncols() {
                        gx[[i, idx[[i, j]]]] += g2[[i, j]];
                    }
                }
                vec![gx.into_dyn()]
            })),
        )
    }

    /// Replace the rows listed in `indices` with the (single-row) node `row`.
    pub fn replace_rows(&mut self, a: VarId, indices: Vec<usize>, row: VarId) -> VarId {
        let x = as2(&self.vals[a]);
        let r = as2(&self.vals[row]);
        let mut out = x.to_owned();
        for &i in &indices {
            out.row_mut(i).assign(&r.row(0));
        }
        self.push(
            out.into_dyn(),
            vec![a, row],
            Some(Box::new(move |g, p, _| {
                let g2 = as2(g);
                let mut gx = g2.to_owned();
                let mut gr = Array2::<f64>::zeros(as2(p[1]).raw_dim());
                for &i in &indices {
                    let mut acc = gr.row_mut(0);
                    acc += &g2.row(i);
                    gx.row_mut(i).fill(0.0);
                }
                vec![gx.into_dyn(), gr.into_dyn()]
            })),
        )
    }

    /// Stack single-row nodes into one `[n x d]` matrix.
    pub fn concat_rows(&mut self, rows: &[VarId]) -> VarId {
        assert!(!rows.is_empty());
        let d = as2(&self.vals[rows[0]]).ncols();
        let mut out = Array2::<f64>::zeros((rows.len(), d));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&as2(&self.vals[r]).row(0));
        }
        self.push(
            out.into_dyn(),
            rows.to_vec(),
            Some(Box::new(|g, p, _| {
                let g2 = as2(g);
                (0..p.len())
                    .map(|i| g2.row(i).to_owned().insert_axis(Axis(0)).into_dyn())
                    .collect()
            })),
        )
    }

    /// One row of a rank-2 node as a `[1 x d]` node.
    pub fn slice_row(&mut self, a: VarId, i: usize) -> VarId {
        let x = as2(&self.vals[a]);
        let out = x.row(i).to_owned().insert_axis(Axis(0));
        self.push(
            out.into_dyn(),
            vec![a],
            Some(Box::new(move |g, p, _| {
                let mut gx = Array2::<f64>::zeros(as2(p[0]).raw_dim());
                gx.row_mut(i).assign(&as2(g).row(0));
                vec![gx.into_dyn()]
            })),
        )
    }

    /// Sum of all elements as a scalar node.
    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let s = self.vals[a].sum();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            vec![a],
            Some(Box::new(|g, p, _| {
                let gv = g.iter().copied().next().unwrap();
                vec![ArrayD::from_elem(p[0].raw_dim(), gv)]
            })),
        )
    }

    /// Combine per-frame and per-label joint inputs: out[t*nu + u] = c[t] + h[u].
    pub fn joint_combine(&mut self, c: VarId, h: VarId) -> VarId {
        let cv = as2(&self.vals[c]);
        let hv = as2(&self.vals[h]);
        assert_eq!(cv.ncols(), hv.ncols());
        let (t_len, nu, d) = (cv.nrows(), hv.nrows(), cv.ncols());
        let mut out = Array2::<f64>::zeros((t_len * nu, d));
        for t in 0..t_len {
            for u in 0..nu {
                let mut row = out.row_mut(t * nu + u);
                row.assign(&cv.row(t));
                row += &hv.row(u);
            }
        }
        self.push(
            out.into_dyn(),
            vec![c, h],
            Some(Box::new(move |g, _, _| {
                let g2 = as2(g);
                let mut gc = Array2::<f64>::zeros((t_len, d));
                let mut gh = Array2::<f64>::zeros((nu, d));
                for t in 0..t_len {
                    for u in 0..nu {
                        let row = g2.row(t * nu + u);
                        let mut rc = gc.row_mut(t);
                        rc += &row;
                        let mut rh = gh.row_mut(u);
                        rh += &row;
                    }
                }
                vec![gc.into_dyn(), gh.into_dyn()]
            })),
        )
    }

    /// Run backward from a scalar root; returns per-node gradients (None for
    /// nodes the root does not depend on).
    pub fn backward(&self, root: VarId) -> Vec<Option<ArrayD<f64>>> {
        assert_eq!(self.vals[root].len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.vals.len()];
        grads[root] = Some(ArrayD::from_elem(self.vals[root].raw_dim(), 1.0));
        for id in (0..=root).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(back) = &self.backs[id] {
                let pvals: Vec<&ArrayD<f64>> =
                    self.parents[id].iter().map(|&p| &self.vals[p]).collect();
                let pgrads = back(&g, &pvals, &self.vals[id]);
                assert_eq!(pgrads.len(), self.parents[id].len());
                for (&p, pg) in self.parents[id].iter().zip(pgrads) {
                    match &mut grads[p] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` against analytic gradients for one
    /// leaf of a rebuilt tape.
    fn check_grad<F>(build: F, leaf_shape: (usize, usize), seed: u64)
    where
        F: Fn(&mut Tape, VarId) -> VarId,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Array2::from_shape_fn(leaf_shape, |_| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let leaf = tape.leaf2(x0.clone());
        let root = build(&mut tape, leaf);
        let grads = tape.backward(root);
        let analytic = grads[leaf].as_ref().unwrap().clone();

        let eps = 1e-6;
        for i in 0..leaf_shape.0 {
            for j in 0..leaf_shape.1 {
                let eval = |v: f64| {
                    let mut xp = x0.clone();
                    xp[[i, j]] = v;
                    let mut t = Tape::new();
                    let l = t.leaf2(xp);
                    let r = build(&mut t, l);
                    t.scalar(r)
                };
                let num = (eval(x0[[i, j]] + eps) - eval(x0[[i, j]] - eps)) / (2.0 * eps);
                let ana = analytic[[i, j]];
                let denom = num.abs().max(ana.abs()).max(1e-6);
                assert!(
                    (num - ana).abs() / denom < 1e-5,
                    "grad mismatch at ({i},{j}): numeric {num} analytic {ana}"
                );
            }
        }
    }

    #[test]
    fn matmul_tanh_grad() {
        check_grad(
            |t, x| {
                let w = t.leaf2(arr2(&[[0.3, -0.2], [0.5, 0.1], [-0.4, 0.7]]));
                let y = t.matmul(x, w);
                let y = t.tanh(y);
                t.sum_all(y)
            },
            (2, 3),
            1,
        );
    }

    #[test]
    fn normalize_rows_grad() {
        check_grad(
            |t, x| {
                let n = t.normalize_rows(x, 1e-5);
                let n = t.sigmoid(n);
                t.sum_all(n)
            },
            (3, 4),
            2,
        );
    }

    #[test]
    fn log_softmax_grad() {
        check_grad(
            |t, x| {
                let s = t.log_softmax_rows(x);
                let w = t.leaf2(Array2::from_shape_fn((2, 3), |(i, j)| {
                    ((i * 3 + j) as f64).sin()
                }));
                let p = t.mul(s, w);
                t.sum_all(p)
            },
            (2, 3),
            3,
        );
    }

    #[test]
    fn masked_softmax_grad_and_zeros() {
        let visible = arr2(&[
            [true, true, false],
            [true, false, true],
            [false, true, true],
        ]);
        let mut tape = Tape::new();
        let x = tape.leaf2(arr2(&[[0.1, 0.9, 5.0], [0.3, 9.0, -0.2], [4.0, 0.5, 0.7]]));
        let sm = tape.masked_softmax_rows(x, visible.clone());
        let out = tape.value2(sm);
        for i in 0..3 {
            let mut s = 0.0;
            for j in 0..3 {
                if !visible[[i, j]] {
                    assert_eq!(out[[i, j]], 0.0);
                }
                s += out[[i, j]];
            }
            assert!((s - 1.0).abs() < 1e-12);
        }
        let vis = visible.clone();
        check_grad(
            move |t, x| {
                let s = t.masked_softmax_rows(x, vis.clone());
                let w = t.leaf2(Array2::from_shape_fn((3, 3), |(i, j)| {
                    ((i + 2 * j) as f64).cos()
                }));
                let p = t.mul(s, w);
                t.sum_all(p)
            },
            (3, 3),
            4,
        );
    }

    #[test]
    fn gather_replace_concat_grads() {
        check_grad(
            |t, x| {
                let g = t.gather_rows(x, vec![2, 0, 2, 1]);
                let s = t.tanh(g);
                t.sum_all(s)
            },
            (3, 2),
            5,
        );
        check_grad(
            |t, x| {
                let row = t.leaf2(arr2(&[[0.4, -0.6]]));
                let r = t.replace_rows(x, vec![1, 3], row);
                let s = t.sigmoid(r);
                t.sum_all(s)
            },
            (4, 2),
            6,
        );
        check_grad(
            |t, x| {
                let r0 = t.slice_row(x, 0);
                let r1 = t.slice_row(x, 2);
                let c = t.concat_rows(&[r1, r0, r1]);
                let s = t.tanh(c);
                t.sum_all(s)
            },
            (3, 2),
            7,
        );
    }

    #[test]
    fn joint_combine_grad() {
        check_grad(
            |t, x| {
                let h = t.leaf2(arr2(&[[0.2, -0.1], [0.7, 0.3], [-0.5, 0.9]]));
                let j = t.joint_combine(x, h);
                let s = t.tanh(j);
                t.sum_all(s)
            },
            (2, 2),
            8,
        );
    }

    #[test]
    fn gather_cols_per_row_grad() {
        let idx = arr2(&[[0usize, 2, 1], [1, 1, 0]]);
        check_grad(
            move |t, x| {
                let g = t.gather_cols_per_row(x, idx.clone());
                let s = t.tanh(g);
                t.sum_all(s)
            },
            (2, 3),
            9,
        );
    }

    #[test]
    fn row_broadcast_grads() {
        check_grad(
            |t, x| {
                let row = t.leaf2(arr2(&[[0.1, -0.9, 0.4]]));
                let a = t.add_row(x, row);
                let gain = t.leaf2(arr2(&[[1.3, 0.2, -0.7]]));
                let m = t.mul_row(a, gain);
                let s = t.tanh(m);
                t.sum_all(s)
            },
            (4, 3),
            10,
        );
    }

    #[test]
    fn determinism() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let x = Array2::from_shape_fn((5, 5), |_| rng.gen_range(-1.0..1.0));
            let mut t = Tape::new();
            let l = t.leaf2(x);
            let n = t.normalize_rows(l, 1e-5);
            let s = t.log_softmax_rows(n);
            let r = t.sum_all(s);
            let g = t.backward(r);
            (t.scalar(r), g[l].clone().unwrap())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(ga, gb);
    }
}
