//! Contrastive pretraining objective: linear target projection, distractor
//! sampling and the InfoNCE-style loss over masked positions.

use ndarray::{Array2, ArrayD, Ix2, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, VarId};
use crate::masking::SpanMask;
use crate::nn::{init_uniform, linear, zeros2, Binding, ParamStore};
use crate::{Error, Result};

const NORM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ContrastiveConfig {
    /// Number of distractors per masked position.
    pub num_negatives: usize,
    pub temperature: f64,
    pub target_dim: usize,
    /// Restrict the distractor pool to masked timesteps (off by default;
    /// the pool is all other timesteps in the utterance).
    pub negatives_from_masked_only: bool,
}

impl ContrastiveConfig {
    pub fn with_dims(target_dim: usize) -> Self {
        ContrastiveConfig {
            num_negatives: 100,
            temperature: 1.0,
            target_dim,
            negatives_from_masked_only: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_negatives == 0 {
            return Err(Error::Config("num_negatives must be >= 1".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        Ok(())
    }
}

pub fn init_params(
    params: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    d_model: usize,
    target_dim: usize,
) {
    params.insert("ctr/proj/w", init_uniform(rng, (d_model, target_dim), d_model));
    params.insert("ctr/proj/b", zeros2((1, target_dim)));
}

/// Per-frame linear projection of the pre-masking latent to target space.
pub fn project_targets(tape: &mut Tape, binding: &Binding, latent: VarId) -> VarId {
    linear(tape, latent, binding.id("ctr/proj/w"), binding.id("ctr/proj/b"))
}

/// K indices drawn uniformly with replacement from `[0, t_len) \ {t}`.
pub fn sample_distractors(
    t: usize,
    t_len: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    sample_distractors_from_pool(t, &(0..t_len).collect::<Vec<_>>(), k, rng)
}

fn sample_distractors_from_pool(
    t: usize,
    pool: &[usize],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let candidates: Vec<usize> = pool.iter().copied().filter(|&i| i != t).collect();
    if candidates.is_empty() {
        return Err(Error::BadInput(format!(
            "no distractor candidates for position {t}"
        )));
    }
    Ok((0..k)
        .map(|_| candidates[rng.gen_range(0..candidates.len())])
        .collect())
}

/// Distractor lists for every masked position, in mask order.
pub fn sample_all_distractors(
    mask: &SpanMask,
    cfg: &ContrastiveConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let pool: Vec<usize> = if cfg.negatives_from_masked_only {
        mask.indices().to_vec()
    } else {
        (0..mask.t_len()).collect()
    };
    mask.indices()
        .iter()
        .map(|&t| sample_distractors_from_pool(t, &pool, cfg.num_negatives, rng))
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    (dot / (na * nb), na, nb)
}

/// L_c = -sum over masked t of log softmax of sim(c_t, q_t) against the
/// candidate set {q_t} plus K distractors, sim = cosine over temperature.
/// Adds a scalar node with the exact analytic gradient w.r.t. `c` and `q`.
pub fn contrastive_loss(
    tape: &mut Tape,
    c: VarId,
    q: VarId,
    mask: &SpanMask,
    distractors: &[Vec<usize>],
    temperature: f64,
) -> Result<VarId> {
    if mask.is_empty() {
        return Err(Error::BadInput("contrastive loss needs a nonempty mask".into()));
    }
    assert_eq!(mask.len(), distractors.len());
    let cv = tape.value2(c).to_owned();
    let qv = tape.value2(q).to_owned();
    if cv.dim() != qv.dim() {
        return Err(Error::BadInput(format!(
            "context {:?} and targets {:?} are not aligned",
            cv.dim(),
            qv.dim()
        )));
    }
    let positions = mask.indices().to_vec();
    let dist: Vec<Vec<usize>> = distractors.to_vec();

    let eval = |cv: &Array2<f64>, qv: &Array2<f64>| -> f64 {
        let mut loss = 0.0;
        for (mi, &t) in positions.iter().enumerate() {
            let ct = cv.row(t);
            let cand: Vec<usize> = std::iter::once(t).chain(dist[mi].iter().copied()).collect();
            let sims: Vec<f64> = cand
                .iter()
                .map(|&j| cosine(ct.as_slice().unwrap(), qv.row(j).as_slice().unwrap()).0 / temperature)
                .collect();
            let m = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + sims.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
            loss -= sims[0] - lse;
        }
        loss
    };
    let loss = eval(&cv, &qv);

    let positions_b = positions.clone();
    let dist_b = dist.clone();
    Ok(tape.custom(
        ArrayD::from_elem(IxDyn(&[]), loss),
        vec![c, q],
        Box::new(move |g, p, _| {
            let gscale = g.iter().copied().next().unwrap();
            let cv = p[0].view().into_dimensionality::<Ix2>().unwrap();
            let qv = p[1].view().into_dimensionality::<Ix2>().unwrap();
            let d = cv.ncols();
            let mut gc = Array2::<f64>::zeros(cv.raw_dim());
            let mut gq = Array2::<f64>::zeros(qv.raw_dim());
            for (mi, &t) in positions_b.iter().enumerate() {
                let a = cv.row(t);
                let a_slice = a.as_slice().unwrap();
                let cand: Vec<usize> =
                    std::iter::once(t).chain(dist_b[mi].iter().copied()).collect();
                let mut sims = Vec::with_capacity(cand.len());
                let mut geom = Vec::with_capacity(cand.len());
                for &j in &cand {
                    let b = qv.row(j);
                    let (s, na, nb) = cosine(a_slice, b.as_slice().unwrap());
                    sims.push(s / temperature);
                    geom.push((s, na, nb));
                }
                let m = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = sims.iter().map(|s| (s - m).exp()).sum();
                for (ci, &j) in cand.iter().enumerate() {
                    let softmax = (sims[ci] - m).exp() / z;
                    // dL/ds_ci, with s in similarity units (pre-temperature).
                    let gs = gscale * (softmax - if ci == 0 { 1.0 } else { 0.0 }) / temperature;
                    let (s, na, nb) = geom[ci];
                    let b = qv.row(j);
                    let na_raw = a_slice.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb_raw = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                    for i in 0..d {
                        let mut da = b[i] / (na * nb);
                        if na_raw > NORM_EPS {
                            da -= s * a_slice[i] / (na * na);
                        }
                        gc[[t, i]] += gs * da;
                        let mut db = a_slice[i] / (na * nb);
                        if nb_raw > NORM_EPS {
                            db -= s * b[i] / (nb * nb);
                        }
                        gq[[j, i]] += gs * db;
                    }
                }
            }
            vec![gc.into_dyn(), gq.into_dyn()]
        }),
    ))
}
