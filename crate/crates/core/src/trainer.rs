//! Multitask pretraining and streaming fine-tuning: loss combination,
//! alternating batch scheduling, the warmup/inverse-sqrt learning-rate
//! schedule, Adam updates, checkpointing and metrics logging.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, VarId};
use crate::contrastive::{self, sample_all_distractors, ContrastiveConfig};
use crate::encoder::{self, downsample_length, EncoderConfig};
use crate::frontend::{Batch, BatchOrigin};
use crate::masking::{chunk_attention_mask, sample_span_mask, AttentionMask};
use crate::nn::ParamStore;
use crate::transducer::{self, TransducerConfig};
use crate::{Error, Result};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MaskingConfig {
    pub mask_prob: f64,
    pub mask_span: usize,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            mask_prob: 0.065,
            mask_span: 10,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub transducer: TransducerConfig,
    pub contrastive: ContrastiveConfig,
    pub masking: MaskingConfig,
}

impl ModelConfig {
    pub fn toy(vocab_size: usize) -> Self {
        let encoder = EncoderConfig::toy();
        let contrastive = ContrastiveConfig::with_dims(encoder.d_model);
        ModelConfig {
            transducer: TransducerConfig::toy(vocab_size),
            contrastive,
            encoder,
            masking: MaskingConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.contrastive.validate()?;
        if self.contrastive.target_dim != self.encoder.d_model {
            return Err(Error::Config(
                "contrastive target_dim must equal encoder d_model (cosine similarity needs \
                 aligned spaces)"
                    .into(),
            ));
        }
        Ok(())
    }

    /// All model parameters, deterministically initialized from `seed`.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        encoder::init_params(&mut params, &mut rng, &self.encoder, crate::frontend::NUM_MEL_BANKS);
        contrastive::init_params(
            &mut params,
            &mut rng,
            self.encoder.d_model,
            self.contrastive.target_dim,
        );
        transducer::init_params(&mut params, &mut rng, &self.transducer, self.encoder.d_model);
        params
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ScheduleConfig {
    /// Learning-rate factor k (pretrain 5, fine-tune 6).
    pub k: f64,
    pub warmup: usize,
    pub total_steps: usize,
    pub d_model: usize,
}

impl ScheduleConfig {
    pub fn pretrain_full_scale() -> Self {
        ScheduleConfig {
            k: 5.0,
            warmup: 25000,
            total_steps: 420_000,
            d_model: 512,
        }
    }
}

/// lrate = k * d_model^-0.5 * min(n^-0.5, n * warmup^-1.5).
pub fn lr_at_step(n: usize, cfg: &ScheduleConfig) -> Result<f64> {
    if n == 0 {
        return Err(Error::BadInput("schedule step starts at 1".into()));
    }
    let n = n as f64;
    let w = cfg.warmup as f64;
    Ok(cfg.k * (cfg.d_model as f64).powf(-0.5) * (n.powf(-0.5)).min(n * w.powf(-1.5)))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
}

impl LossWeights {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(LossWeights { alpha })
    }
}

/// How one optimization step interprets a batch.
#[derive(Clone, Copy, Debug)]
pub enum StepMode {
    /// Eq.-style multitask loss with full-context attention.
    Pretrain { alpha: f64 },
    /// Transducer loss only under a chunk-wise streaming mask.
    Finetune {
        chunk_size: usize,
        left_chunks: usize,
    },
}

#[derive(Clone, Debug, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub origin: BatchOrigin,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_trans: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_contrastive: Option<f64>,
    pub lr: f64,
    pub wall_ms: f64,
}

/// The checkpointable whole: parameters, Adam moments, step counter, RNG
/// state and config snapshot.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam_m: ParamStore,
    pub adam_v: ParamStore,
    /// Completed optimizer steps; the schedule is evaluated at step + 1.
    pub step: usize,
    pub rng: ChaCha8Rng,
    pub seed: u64,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub weights: LossWeights,
    pub grad_clip: f64,
}

impl TrainState {
    pub fn new(
        model: ModelConfig,
        schedule: ScheduleConfig,
        weights: LossWeights,
        seed: u64,
    ) -> Result<Self> {
        model.validate()?;
        let params = model.init_params(seed);
        let zeros_like = |p: &ParamStore| {
            let mut z = ParamStore::new();
            for (name, v) in p.iter() {
                z.insert(name, ArrayD::zeros(v.raw_dim()));
            }
            z
        };
        Ok(TrainState {
            adam_m: zeros_like(&params),
            adam_v: zeros_like(&params),
            params,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed)),
            seed,
            model,
            schedule,
            weights,
            grad_clip: 5.0,
        })
    }

    /// Carry pretrained parameters into a fresh fine-tuning state: weights
    /// are kept, optimizer moments and the step counter reset.
    pub fn for_finetuning(&self, schedule: ScheduleConfig, seed: u64) -> Result<Self> {
        let mut fresh = TrainState::new(self.model.clone(), schedule, self.weights, seed)?;
        fresh.params = self.params.clone();
        Ok(fresh)
    }
}

struct UtteranceLoss {
    node: VarId,
    trans: Option<f64>,
    contrastive: Option<f64>,
}

fn utterance_loss(
    tape: &mut Tape,
    binding: &crate::nn::Binding,
    cfg: &ModelConfig,
    feats: &Array2<f64>,
    transcript: Option<&[u32]>,
    mode: StepMode,
    rng: &mut ChaCha8Rng,
) -> Result<UtteranceLoss> {
    let t_latent = downsample_length(feats.nrows());
    if t_latent == 0 {
        return Err(Error::BadInput("utterance too short for the encoder".into()));
    }
    match mode {
        StepMode::Finetune {
            chunk_size,
            left_chunks,
        } => {
            let y = transcript
                .ok_or_else(|| Error::BadInput("fine-tuning needs labeled batches".into()))?;
            let mask = chunk_attention_mask(t_latent, chunk_size, left_chunks)?;
            let (_, c) = encoder::encode(tape, binding, &cfg.encoder, feats, &mask, None)?;
            let h = transducer::prediction_forward(tape, binding, &cfg.transducer, y)?;
            let lattice = transducer::joint(tape, binding, c, h);
            let node = transducer::transducer_loss(tape, &lattice, y)?;
            Ok(UtteranceLoss {
                trans: Some(tape.scalar(node)),
                node,
                contrastive: None,
            })
        }
        StepMode::Pretrain { alpha } => {
            let full = AttentionMask::full(t_latent);
            // Transducer branch on the unmasked features (skipped entirely at
            // alpha == 0, including its parameter reads).
            let trans_node = match transcript {
                Some(y) if alpha > 0.0 => {
                    let (_, c) = encoder::encode(tape, binding, &cfg.encoder, feats, &full, None)?;
                    let h = transducer::prediction_forward(tape, binding, &cfg.transducer, y)?;
                    let lattice = transducer::joint(tape, binding, c, h);
                    Some(transducer::transducer_loss(tape, &lattice, y)?)
                }
                _ => None,
            };
            // Contrastive branch on the span-masked pass (skipped, with its
            // RNG draws, when a labeled batch has alpha == 1).
            let want_contrastive = transcript.is_none() || alpha < 1.0;
            let ctr_node = if want_contrastive {
                let span = sample_span_mask(t_latent, cfg.masking.mask_prob, cfg.masking.mask_span, rng)?;
                let distractors = sample_all_distractors(&span, &cfg.contrastive, rng)?;
                let (latent, c) =
                    encoder::encode(tape, binding, &cfg.encoder, feats, &full, Some(&span))?;
                let q = contrastive::project_targets(tape, binding, latent);
                Some(contrastive::contrastive_loss(
                    tape,
                    c,
                    q,
                    &span,
                    &distractors,
                    cfg.contrastive.temperature,
                )?)
            } else {
                None
            };
            let node = match (trans_node, ctr_node) {
                (Some(t), Some(c)) => {
                    let ts = tape.scale(t, alpha);
                    let cs = tape.scale(c, 1.0 - alpha);
                    tape.add(ts, cs)
                }
                (Some(t), None) => t,
                (None, Some(c)) => c,
                (None, None) => unreachable!("one loss branch is always active"),
            };
            Ok(UtteranceLoss {
                node,
                trans: trans_node.map(|n| tape.scalar(n)),
                contrastive: ctr_node.map(|n| tape.scalar(n)),
            })
        }
    }
}

pub struct BatchLoss {
    pub loss: f64,
    pub loss_trans: Option<f64>,
    pub loss_contrastive: Option<f64>,
    pub grads: Vec<(String, ArrayD<f64>)>,
}

/// Mean loss over the batch and its gradients w.r.t. every parameter.
pub fn batch_loss_and_grads(
    params: &ParamStore,
    cfg: &ModelConfig,
    batch: &Batch,
    mode: StepMode,
    rng: &mut ChaCha8Rng,
) -> Result<BatchLoss> {
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape);
    let mut nodes = Vec::with_capacity(batch.len());
    let mut trans_sum = None;
    let mut ctr_sum = None;
    for i in 0..batch.len() {
        let feats = batch.utterance_features(i);
        let transcript = batch.transcripts.as_ref().map(|t| t[i].as_slice());
        let ul = utterance_loss(&mut tape, &binding, cfg, &feats, transcript, mode, rng)?;
        if let Some(t) = ul.trans {
            *trans_sum.get_or_insert(0.0) += t;
        }
        if let Some(c) = ul.contrastive {
            *ctr_sum.get_or_insert(0.0) += c;
        }
        nodes.push(ul.node);
    }
    let mut total = nodes[0];
    for &n in &nodes[1..] {
        total = tape.add(total, n);
    }
    let mean = tape.scale(total, 1.0 / batch.len() as f64);
    let loss = tape.scalar(mean);
    if !loss.is_finite() {
        return Err(Error::Diverged(format!(
            "non-finite loss on batch [{}]",
            batch.ids.join(",")
        )));
    }
    let grads = tape.backward(mean);
    Ok(BatchLoss {
        loss,
        loss_trans: trans_sum.map(|s| s / batch.len() as f64),
        loss_contrastive: ctr_sum.map(|s| s / batch.len() as f64),
        grads: binding.grads(params, &grads),
    })
}

fn apply_update(state: &mut TrainState, grads: &[(String, ArrayD<f64>)], lr: f64) {
    // Global-norm clipping at state.grad_clip.
    let sq: f64 = grads.iter().map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>()).sum();
    let norm = sq.sqrt();
    let scale = if norm > state.grad_clip {
        state.grad_clip / norm
    } else {
        1.0
    };
    let n = (state.step + 1) as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(n);
    let bc2 = 1.0 - ADAM_BETA2.powf(n);
    for (name, g) in grads {
        let g = g.mapv(|v| v * scale);
        let m = state.adam_m.get_mut(name);
        *m = m.mapv(|v| v * ADAM_BETA1) + &g.mapv(|v| v * (1.0 - ADAM_BETA1));
        let m = m.clone();
        let v = state.adam_v.get_mut(name);
        *v = v.mapv(|x| x * ADAM_BETA2) + &g.mapv(|x| x * x * (1.0 - ADAM_BETA2));
        let v = v.clone();
        let p = state.params.get_mut(name);
        ndarray::Zip::from(p)
            .and(&m)
            .and(&v)
            .for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            });
    }
    state.step += 1;
}

fn run_step(state: &mut TrainState, batch: &Batch, mode: StepMode) -> Result<StepMetrics> {
    let start = Instant::now();
    let lr = lr_at_step(state.step + 1, &state.schedule)?;
    let mut rng = state.rng.clone();
    let bl = batch_loss_and_grads(&state.params, &state.model, batch, mode, &mut rng)?;
    state.rng = rng;
    apply_update(state, &bl.grads, lr);
    Ok(StepMetrics {
        step: state.step,
        origin: batch.origin,
        loss: bl.loss,
        loss_trans: bl.loss_trans,
        loss_contrastive: bl.loss_contrastive,
        lr,
        wall_ms: start.elapsed().as_secs_f64() * 1000.0,
    })
}

/// One multitask pretraining step (full-context attention).
pub fn pretrain_step(state: &mut TrainState, batch: &Batch) -> Result<StepMetrics> {
    if batch.origin == BatchOrigin::Labeled && batch.transcripts.is_none() {
        return Err(Error::BadInput("labeled batch without transcripts".into()));
    }
    let alpha = state.weights.alpha;
    run_step(state, batch, StepMode::Pretrain { alpha })
}

/// One streaming fine-tuning step (transducer loss only).
pub fn finetune_step(
    state: &mut TrainState,
    batch: &Batch,
    chunk_size: usize,
    left_chunks: usize,
) -> Result<StepMetrics> {
    if batch.origin != BatchOrigin::Labeled {
        return Err(Error::BadInput("fine-tuning rejects unlabeled batches".into()));
    }
    run_step(
        state,
        batch,
        StepMode::Finetune {
            chunk_size,
            left_chunks,
        },
    )
}

/// Validation loss (no update, no training-RNG consumption). Span masks for
/// the contrastive part are drawn from a fixed per-call seed.
pub fn validation_loss(state: &TrainState, batches: &[Batch], mode: StepMode) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(state.seed ^ 0x7a11d);
    let mut total = 0.0;
    let mut n = 0usize;
    for b in batches {
        let bl = batch_loss_and_grads(&state.params, &state.model, b, mode, &mut rng)?;
        total += bl.loss * b.len() as f64;
        n += b.len();
    }
    Ok(total / n.max(1) as f64)
}

/// Strictly alternating labeled/unlabeled batch stream. Each origin cycles
/// independently with a per-epoch permutation derived from the seed, so the
/// stream is a pure function of (seed, step) and survives checkpoint resume.
pub struct AlternatingSampler {
    labeled: Vec<Batch>,
    unlabeled: Vec<Batch>,
    seed: u64,
}

impl AlternatingSampler {
    pub fn new(labeled: Vec<Batch>, unlabeled: Vec<Batch>, seed: u64) -> Result<Self> {
        if labeled.is_empty() {
            return Err(Error::BadInput(
                "pretraining needs a nonempty labeled stream".into(),
            ));
        }
        if unlabeled.is_empty() {
            return Err(Error::BadInput(
                "pretraining needs a nonempty unlabeled stream".into(),
            ));
        }
        Ok(AlternatingSampler {
            labeled,
            unlabeled,
            seed,
        })
    }

    fn pick(pool: &[Batch], consumed: usize, seed: u64, salt: u64) -> &Batch {
        let epoch = consumed / pool.len();
        let pos = consumed % pool.len();
        let mut order: Vec<usize> = (0..pool.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15) ^ (epoch as u64) << 1);
        order.shuffle(&mut rng);
        &pool[order[pos]]
    }

    /// Batch for optimizer step `step` (0-based): labeled on even steps.
    pub fn batch_at(&self, step: usize) -> &Batch {
        if step % 2 == 0 {
            Self::pick(&self.labeled, step / 2, self.seed, 1)
        } else {
            Self::pick(&self.unlabeled, step / 2, self.seed, 2)
        }
    }
}

/// Labeled-only cyclic stream with per-epoch shuffling, for fine-tuning.
pub struct LabeledSampler {
    batches: Vec<Batch>,
    seed: u64,
}

impl LabeledSampler {
    pub fn new(batches: Vec<Batch>, seed: u64) -> Result<Self> {
        if batches.is_empty() {
            return Err(Error::BadInput("no labeled batches".into()));
        }
        Ok(LabeledSampler { batches, seed })
    }

    pub fn batch_at(&self, step: usize) -> &Batch {
        AlternatingSampler::pick(&self.batches, step, self.seed, 3)
    }
}

const CKPT_MAGIC: &[u8; 4] = b"TTCK";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    step: usize,
    seed: u64,
    rng_seed: [u8; 32],
    rng_word_pos: u64,
    model: ModelConfig,
    schedule: ScheduleConfig,
    alpha: f64,
    grad_clip: f64,
}

fn write_tensor_group(w: &mut impl Write, prefix: &str, store: &ParamStore) -> Result<()> {
    for (name, v) in store.iter() {
        let full = format!("{prefix}/{name}");
        w.write_u32::<LittleEndian>(full.len() as u32)?;
        w.write_all(full.as_bytes())?;
        w.write_u32::<LittleEndian>(v.ndim() as u32)?;
        for &d in v.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &x in v.iter() {
            w.write_f64::<LittleEndian>(x)?;
        }
    }
    Ok(())
}

/// Single-file binary checkpoint: versioned header, JSON metadata, then
/// named f64 tensors for parameters and both Adam moments.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_u32::<LittleEndian>(CKPT_VERSION)?;
    let meta = CheckpointMeta {
        step: state.step,
        seed: state.seed,
        rng_seed: state.rng.get_seed(),
        rng_word_pos: state.rng.get_word_pos() as u64,
        model: state.model.clone(),
        schedule: state.schedule.clone(),
        alpha: state.weights.alpha,
        grad_clip: state.grad_clip,
    };
    let meta_bytes = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.write_u64::<LittleEndian>(meta_bytes.len() as u64)?;
    w.write_all(&meta_bytes)?;
    let count = 3 * state.params.len();
    w.write_u64::<LittleEndian>(count as u64)?;
    write_tensor_group(&mut w, "param", &state.params)?;
    write_tensor_group(&mut w, "adam_m", &state.adam_m)?;
    write_tensor_group(&mut w, "adam_v", &state.adam_v)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CKPT_VERSION})"
        )));
    }
    let meta_len = r.read_u64::<LittleEndian>()? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&meta_bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let count = r.read_u64::<LittleEndian>()? as usize;
    let mut params = ParamStore::new();
    let mut adam_m = ParamStore::new();
    let mut adam_v = ParamStore::new();
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>()? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let full = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        let ndim = r.read_u32::<LittleEndian>()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u64::<LittleEndian>()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.read_f64::<LittleEndian>()?);
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let (group, name) = full
            .split_once('/')
            .ok_or_else(|| Error::Checkpoint(format!("malformed tensor name {full}")))?;
        match group {
            "param" => params.insert(name, arr),
            "adam_m" => adam_m.insert(name, arr),
            "adam_v" => adam_v.insert(name, arr),
            other => return Err(Error::Checkpoint(format!("unknown tensor group {other}"))),
        }
    }
    if params.len() != adam_m.len() || params.len() != adam_v.len() {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    let mut rng = ChaCha8Rng::from_seed(meta.rng_seed);
    rng.set_word_pos(meta.rng_word_pos as u128);
    Ok(TrainState {
        params,
        adam_m,
        adam_v,
        step: meta.step,
        rng,
        seed: meta.seed,
        model: meta.model,
        schedule: meta.schedule,
        weights: LossWeights { alpha: meta.alpha },
        grad_clip: meta.grad_clip,
    })
}

/// Encode one utterance for inference: full context, or streaming when
/// `chunk` is `Some((chunk_size, left_chunks))`.
pub fn encode_for_inference(
    params: &ParamStore,
    cfg: &ModelConfig,
    feats: &Array2<f64>,
    chunk: Option<(usize, usize)>,
) -> Result<Array2<f64>> {
    let t_latent = downsample_length(feats.nrows());
    if t_latent == 0 {
        return Err(Error::BadInput("utterance too short for the encoder".into()));
    }
    let mask = match chunk {
        Some((cs, lc)) => chunk_attention_mask(t_latent, cs, lc)?,
        None => AttentionMask::full(t_latent),
    };
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape);
    let (_, c) = encoder::encode(&mut tape, &binding, &cfg.encoder, feats, &mask, None)?;
    Ok(tape.value2(c).to_owned())
}
