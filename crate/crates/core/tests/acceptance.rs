//! Acceptance gate: one test per release criterion, each printing a single
//! PASS line with its measured numbers. Tolerances are pinned in the
//! assertions, not computed from the results.

use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ttasr::autodiff::Tape;
use ttasr::contrastive::{self, sample_all_distractors, ContrastiveConfig};
use ttasr::encoder::{self, downsample_length, EncoderConfig};
use ttasr::eval::{edit_distance_bruteforce, evaluate, wer, Decoder, Vocab};
use ttasr::frontend::{
    filter_long, load_utterance, make_batches, upconvert_8k, band_cutoff_index, Batch,
    BatchOrigin, SampleRateTag, Utterance, MAX_FRAMES, NUM_MEL_BANKS,
};
use ttasr::masking::{chunk_attention_mask, AttentionMask, SpanMask};
use ttasr::nn::ParamStore;
use ttasr::synth::{generate_corpus, SynthConfig};
use ttasr::trainer::{
    batch_loss_and_grads, finetune_step, load_checkpoint, lr_at_step, pretrain_step,
    save_checkpoint, AlternatingSampler, LabeledSampler, LossWeights, MaskingConfig,
    ModelConfig, ScheduleConfig, StepMode, TrainState,
};
use ttasr::transducer::{
    self, transducer_loss_bruteforce, TransducerConfig,
};

/// 1-block model small enough for exhaustive finite differences.
fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            conv_channels: (2, 2),
            num_layers: 1,
            d_model: 8,
            ffn_dim: 12,
            num_heads: 2,
            max_relative_distance: 4,
        },
        transducer: TransducerConfig {
            num_blocks: 1,
            lstm_cell: 6,
            proj_dim: 6,
            embed_dim: 4,
            joint_dim: 6,
            vocab_size: 5,
        },
        contrastive: ContrastiveConfig {
            num_negatives: 2,
            ..ContrastiveConfig::with_dims(8)
        },
        masking: MaskingConfig {
            mask_prob: 0.3,
            mask_span: 1,
        },
    }
}

/// Slightly larger model used for the end-to-end training criteria.
fn overfit_model(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            conv_channels: (2, 4),
            num_layers: 2,
            d_model: 32,
            ffn_dim: 64,
            num_heads: 2,
            max_relative_distance: 16,
        },
        transducer: TransducerConfig {
            num_blocks: 1,
            lstm_cell: 32,
            proj_dim: 32,
            embed_dim: 16,
            joint_dim: 32,
            vocab_size,
        },
        contrastive: ContrastiveConfig {
            num_negatives: 20,
            ..ContrastiveConfig::with_dims(32)
        },
        masking: MaskingConfig::default(),
    }
}

fn random_batch(seed: u64, n: usize, t: usize, labeled: bool, vocab: usize) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let utts: Vec<Utterance> = (0..n)
        .map(|i| Utterance {
            id: format!("u{i}"),
            features: Array2::from_shape_fn((t, NUM_MEL_BANKS), |_| rng.gen_range(-1.0..1.0)),
            transcript: labeled.then(|| {
                (0..3).map(|_| rng.gen_range(1..vocab as u32)).collect()
            }),
            sample_rate_tag: SampleRateTag::R16k,
        })
        .collect();
    let refs: Vec<&Utterance> = utts.iter().collect();
    let origin = if labeled {
        BatchOrigin::Labeled
    } else {
        BatchOrigin::Unlabeled
    };
    Batch::from_utterances(&refs, origin).unwrap()
}

#[test]
fn oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let t = rng.gen_range(1..=6);
        let u = rng.gen_range(0..=4);
        let v = rng.gen_range(2..=4);
        let logits = Array3::from_shape_fn((t, u + 1, v), |_| rng.gen_range(-3.0..3.0));
        // Normalize to log-probabilities per (t, u) slot.
        let mut logp = logits.clone();
        for ti in 0..t {
            for ui in 0..=u {
                let row: Vec<f64> = (0..v).map(|k| logits[[ti, ui, k]]).collect();
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                for k in 0..v {
                    logp[[ti, ui, k]] -= z;
                }
            }
        }
        let y: Vec<u32> = (0..u).map(|_| rng.gen_range(1..v as u32)).collect();
        let exact = transducer::loss_and_grad(&logp, &y).unwrap().0;
        let brute = transducer_loss_bruteforce(&logp, &y).unwrap();
        let rel = (exact - brute).abs() / brute.abs().max(1e-300);
        worst = worst.max(rel);
        assert!(rel <= 1e-9, "relative gap {rel} at T'={t} U={u} V={v}");
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "oracle comparison took {elapsed:.1} s");
    println!(
        "ACCEPTANCE oracle-equivalence: PASS (200 instances, worst rel {worst:.2e}, {elapsed:.2} s)"
    );
}

fn loss_under(params: &ParamStore, cfg: &ModelConfig, batch: &Batch, rng_seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    batch_loss_and_grads(params, cfg, batch, StepMode::Pretrain { alpha: 0.5 }, &mut rng)
        .unwrap()
        .loss
}

#[test]
fn gradient_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);

    // (a) Transducer loss w.r.t. logits.
    let (t, u, v) = (3, 2, 4);
    let mut logp = Array3::from_shape_fn((t, u + 1, v), |_| rng.gen_range(-2.0..0.0));
    // log-normalize
    for ti in 0..t {
        for ui in 0..=u {
            let row: Vec<f64> = (0..v).map(|k| logp[[ti, ui, k]]).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for k in 0..v {
                logp[[ti, ui, k]] -= z;
            }
        }
    }
    let y = vec![1u32, 3];
    let (_, grad) = transducer::loss_and_grad(&logp, &y).unwrap();
    let h = 1e-6;
    let mut worst_a: f64 = 0.0;
    for idx in 0..logp.len() {
        let mut plus = logp.clone();
        let mut minus = logp.clone();
        *plus.iter_mut().nth(idx).unwrap() += h;
        *minus.iter_mut().nth(idx).unwrap() -= h;
        let num = (transducer::loss_and_grad(&plus, &y).unwrap().0
            - transducer::loss_and_grad(&minus, &y).unwrap().0)
            / (2.0 * h);
        let ana = grad.iter().nth(idx).copied().unwrap();
        let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-5);
        worst_a = worst_a.max(rel);
    }
    assert!(worst_a <= 1e-4, "transducer logits gradient off by {worst_a:.2e}");

    // (b) Contrastive loss w.r.t. c and q.
    let tp = 5;
    let d = 6;
    let c0 = Array2::from_shape_fn((tp, d), |_| rng.gen_range(-1.0..1.0));
    let q0 = Array2::from_shape_fn((tp, d), |_| rng.gen_range(-1.0..1.0));
    let span = SpanMask::new(vec![1, 3], tp);
    let cfg = ContrastiveConfig {
        num_negatives: 2,
        ..ContrastiveConfig::with_dims(d)
    };
    let mut drng = ChaCha8Rng::seed_from_u64(5);
    let distractors = sample_all_distractors(&span, &cfg, &mut drng).unwrap();
    let eval_ctr = |c: &Array2<f64>, q: &Array2<f64>| -> (f64, Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let cid = tape.leaf(c.clone().into_dyn());
        let qid = tape.leaf(q.clone().into_dyn());
        let loss = contrastive::contrastive_loss(&mut tape, cid, qid, &span, &distractors, 1.0)
            .unwrap();
        let val = tape.scalar(loss);
        let grads = tape.backward(loss);
        let gc = grads[cid].as_ref().unwrap().iter().cloned().collect();
        let gq = grads[qid].as_ref().unwrap().iter().cloned().collect();
        (val, gc, gq)
    };
    let (_, gc, gq) = eval_ctr(&c0, &q0);
    let mut worst_b: f64 = 0.0;
    for idx in 0..c0.len() {
        for which in 0..2 {
            let mut cp = c0.clone();
            let mut cm = c0.clone();
            let mut qp = q0.clone();
            let mut qm = q0.clone();
            let (ana, pl, mi) = if which == 0 {
                *cp.iter_mut().nth(idx).unwrap() += h;
                *cm.iter_mut().nth(idx).unwrap() -= h;
                (gc[idx], eval_ctr(&cp, &q0).0, eval_ctr(&cm, &q0).0)
            } else {
                *qp.iter_mut().nth(idx).unwrap() += h;
                *qm.iter_mut().nth(idx).unwrap() -= h;
                (gq[idx], eval_ctr(&c0, &qp).0, eval_ctr(&c0, &qm).0)
            };
            let num = (pl - mi) / (2.0 * h);
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-5);
            worst_b = worst_b.max(rel);
        }
    }
    assert!(worst_b <= 1e-4, "contrastive gradient off by {worst_b:.2e}");

    // (c) Full combined loss w.r.t. every parameter of a 1-block toy model.
    let cfg = tiny_model();
    let params = cfg.init_params(9);
    let batch = random_batch(4, 1, 16, true, cfg.transducer.vocab_size);
    let mut srng = ChaCha8Rng::seed_from_u64(31);
    let bl = batch_loss_and_grads(&params, &cfg, &batch, StepMode::Pretrain { alpha: 0.5 }, &mut srng)
        .unwrap();
    let mut worst_c: f64 = 0.0;
    let mut checked = 0usize;
    for (name, g) in &bl.grads {
        for idx in 0..g.len() {
            let ana = g.iter().nth(idx).copied().unwrap();
            let mut plus = params.clone();
            *plus.get_mut(name).iter_mut().nth(idx).unwrap() += h;
            let mut minus = params.clone();
            *minus.get_mut(name).iter_mut().nth(idx).unwrap() -= h;
            let num =
                (loss_under(&plus, &cfg, &batch, 31) - loss_under(&minus, &cfg, &batch, 31))
                    / (2.0 * h);
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-5);
            assert!(rel <= 1e-4, "{name}[{idx}]: analytic {ana:.3e} vs numeric {num:.3e}");
            worst_c = worst_c.max(rel);
            checked += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "gradient suite took {elapsed:.1} s");
    println!(
        "ACCEPTANCE gradient-suite: PASS (logits {worst_a:.1e}, contrastive {worst_b:.1e}, \
         full model {worst_c:.1e} over {checked} entries, {elapsed:.1} s)"
    );
}

#[test]
fn analytic_spot_values() {
    // Similarity ties: every candidate identical, so each masked step
    // contributes exactly ln(K + 1).
    let tp = 6;
    let d = 4;
    let c = Array2::from_elem((tp, d), 0.7);
    let q = Array2::from_elem((tp, d), 0.7);
    let span = SpanMask::new(vec![0, 2, 4], tp);
    let k = 100;
    let distractors: Vec<Vec<usize>> = span
        .indices()
        .iter()
        .map(|&t| (0..k).map(|j| (t + 1 + j % (tp - 1)) % tp).collect())
        .collect();
    let mut tape = Tape::new();
    let cid = tape.leaf(c.into_dyn());
    let qid = tape.leaf(q.into_dyn());
    let loss = contrastive::contrastive_loss(&mut tape, cid, qid, &span, &distractors, 1.0)
        .unwrap();
    let got = tape.scalar(loss);
    let mut expected = 0.0;
    for _ in 0..span.len() {
        expected += ((k + 1) as f64).ln();
    }
    assert_eq!(got, expected, "tie loss {got} != |M_T| ln(K+1) = {expected}");

    // T' = 1, U = 1 uniform transducer lattice: single path, two arcs of
    // probability 1/2 each.
    let logp = Array3::from_elem((1, 2, 2), (0.5f64).ln());
    let single = transducer::loss_and_grad(&logp, &[1]).unwrap().0;
    assert!((single - 2.0 * (2.0f64).ln()).abs() <= 1e-12);

    // Learning-rate peak at the warmup corner.
    let sched = ScheduleConfig {
        k: 5.0,
        warmup: 25000,
        total_steps: 420_000,
        d_model: 512,
    };
    let peak = lr_at_step(25000, &sched).unwrap();
    assert!((peak - 1.3976e-3).abs() <= 1e-7);
    println!(
        "ACCEPTANCE analytic-spot-values: PASS (ties {got:.6} exact, 2ln2 gap {:.1e}, \
         peak lr {peak:.6e})",
        (single - 2.0 * (2.0f64).ln()).abs()
    );
}

/// c for one utterance under the given mask, on a fixed 2-block encoder.
fn encode_streaming(
    params: &ParamStore,
    cfg: &EncoderConfig,
    feats: &Array2<f64>,
    mask: &AttentionMask,
) -> Array2<f64> {
    let mut tape = Tape::new();
    let binding = params.bind(&mut tape);
    let (_, c) = encoder::encode(&mut tape, &binding, cfg, feats, mask, None).unwrap();
    tape.value2(c).to_owned()
}

#[test]
fn streaming_causality() {
    let cfg = EncoderConfig {
        conv_channels: (2, 3),
        num_layers: 2,
        d_model: 16,
        ffn_dim: 24,
        num_heads: 2,
        max_relative_distance: 8,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let mut params = ParamStore::new();
    encoder::init_params(&mut params, &mut rng, &cfg, NUM_MEL_BANKS);
    // Fresh blocks are identity (zeroed output projections); perturb them so
    // the attention path actually carries signal.
    for (name, v) in params.clone().iter() {
        if name.ends_with("attn/wo") || name.ends_with("ffn/w2") {
            *params.get_mut(name) = v.mapv(|_| rng.gen_range(-0.2..0.2));
        }
    }
    let t_in = 160; // T' = 20, five chunks of 4
    let (chunk, left) = (4usize, 1usize);
    let t_latent = downsample_length(t_in);
    let mask = chunk_attention_mask(t_latent, chunk, left).unwrap();
    let full = AttentionMask::full(t_latent);
    let feats = Array2::from_shape_fn((t_in, NUM_MEL_BANKS), |_| rng.gen_range(-1.0..1.0));
    let base_stream = encode_streaming(&params, &cfg, &feats, &mask);
    let base_full = encode_streaming(&params, &cfg, &feats, &full);
    let mut full_changed = 0usize;
    for trial in 0..100 {
        let t = rng.gen_range(0..t_latent - 8); // keep a future region to hit
        let chunk_end = (t / chunk + 1) * chunk;
        // Input frames beyond the receptive field of every latent frame the
        // streaming mask lets c_t see (latent i reaches inputs <= 8 i + 13).
        let j_min = 8 * chunk_end + 14;
        assert!(j_min < t_in, "trial {trial}: no safe frame to perturb");
        let j = rng.gen_range(j_min..t_in);
        let mut bumped = feats.clone();
        for b in 0..NUM_MEL_BANKS {
            bumped[[j, b]] += rng.gen_range(0.5..1.5);
        }
        let stream = encode_streaming(&params, &cfg, &bumped, &mask);
        for dcol in 0..cfg.d_model {
            assert_eq!(
                stream[[t, dcol]].to_bits(),
                base_stream[[t, dcol]].to_bits(),
                "trial {trial}: c_{t} moved after perturbing future frame {j}"
            );
        }
        let fullc = encode_streaming(&params, &cfg, &bumped, &full);
        if (0..cfg.d_model).any(|dcol| fullc[[t, dcol]] != base_full[[t, dcol]]) {
            full_changed += 1;
        }
    }
    assert!(
        full_changed >= 95,
        "full-context encoder ignored future perturbations in {} of 100 trials",
        100 - full_changed
    );
    println!(
        "ACCEPTANCE streaming-causality: PASS (100 trials exact-zero under chunk mask, \
         {full_changed}/100 changed under full context)"
    );
}

#[test]
fn receptive_field_growth() {
    // Measure, per added transformer layer, how far left the dependency span
    // of a fixed output frame extends, directly on the latent sequence.
    let (chunk, left) = (4usize, 1usize);
    let t_latent = 24;
    let d_model = 16;
    let mask = chunk_attention_mask(t_latent, chunk, left).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let latent0 = Array2::from_shape_fn((t_latent, d_model), |_| rng.gen_range(-1.0..1.0));
    let t_probe = t_latent - 1;
    let mut spans = Vec::new();
    for layers in 1..=3usize {
        let cfg = EncoderConfig {
            conv_channels: (2, 2),
            num_layers: layers,
            d_model,
            ffn_dim: 24,
            num_heads: 2,
            max_relative_distance: 8,
        };
        let mut lrng = ChaCha8Rng::seed_from_u64(9);
        let mut params = ParamStore::new();
        encoder::init_params(&mut params, &mut lrng, &cfg, NUM_MEL_BANKS);
        for (name, v) in params.clone().iter() {
            if name.ends_with("attn/wo") || name.ends_with("ffn/w2") {
                *params.get_mut(name) = v.mapv(|_| lrng.gen_range(-0.3..0.3));
            }
        }
        let forward = |latent: &Array2<f64>| -> Array2<f64> {
            let mut tape = Tape::new();
            let binding = params.bind(&mut tape);
            let lid = tape.leaf(latent.clone().into_dyn());
            let out = encoder::context_forward(&mut tape, &binding, &cfg, lid, &mask).unwrap();
            tape.value2(out).to_owned()
        };
        let base = forward(&latent0);
        let mut leftmost = t_probe;
        for tau in 0..t_latent {
            let mut bumped = latent0.clone();
            for dcol in 0..d_model {
                bumped[[tau, dcol]] += 0.7;
            }
            let out = forward(&bumped);
            if (0..d_model).any(|dc| out[[t_probe, dc]] != base[[t_probe, dc]]) {
                leftmost = tau;
                break;
            }
        }
        spans.push(t_probe - leftmost);
    }
    // Per extra layer the span may grow by at most left_chunks * chunk_size
    // latent frames.
    for w in spans.windows(2) {
        assert!(
            w[1] as i64 - w[0] as i64 <= (left * chunk) as i64,
            "span grew {} -> {} in one layer (budget {})",
            w[0],
            w[1],
            left * chunk
        );
    }
    println!(
        "ACCEPTANCE receptive-field-growth: PASS (left spans per depth {spans:?}, \
         growth <= {} per layer)",
        left * chunk
    );
}

#[test]
fn degenerate_loss_weights() {
    let cfg = tiny_model();
    let params = cfg.init_params(21);
    let labeled = random_batch(6, 2, 24, true, cfg.transducer.vocab_size);
    let t_latent = downsample_length(24);

    // alpha = 1 vs a pure fine-tune-style transducer step with full context.
    let mut r1 = ChaCha8Rng::seed_from_u64(50);
    let a1 = batch_loss_and_grads(&params, &cfg, &labeled, StepMode::Pretrain { alpha: 1.0 }, &mut r1)
        .unwrap();
    let mut r2 = ChaCha8Rng::seed_from_u64(50);
    let ft = batch_loss_and_grads(
        &params,
        &cfg,
        &labeled,
        StepMode::Finetune {
            chunk_size: t_latent, // a single chunk covering everything
            left_chunks: 0,
        },
        &mut r2,
    )
    .unwrap();
    assert_eq!(a1.loss.to_bits(), ft.loss.to_bits());
    for ((na, ga), (nb, gb)) in a1.grads.iter().zip(&ft.grads) {
        assert_eq!(na, nb);
        for (x, y) in ga.iter().zip(gb.iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "alpha=1 gradient differs at {na}");
        }
    }

    // alpha = 0 vs contrastive-only on the same utterances stripped of labels.
    let unlabeled = Batch {
        features: labeled.features.clone(),
        lengths: labeled.lengths.clone(),
        ids: labeled.ids.clone(),
        transcripts: None,
        origin: BatchOrigin::Unlabeled,
    };
    let mut r3 = ChaCha8Rng::seed_from_u64(51);
    let a0 = batch_loss_and_grads(&params, &cfg, &labeled, StepMode::Pretrain { alpha: 0.0 }, &mut r3)
        .unwrap();
    let mut r4 = ChaCha8Rng::seed_from_u64(51);
    let co = batch_loss_and_grads(
        &params,
        &cfg,
        &unlabeled,
        StepMode::Pretrain { alpha: 0.0 },
        &mut r4,
    )
    .unwrap();
    assert_eq!(a0.loss.to_bits(), co.loss.to_bits());
    for ((na, ga), (nb, gb)) in a0.grads.iter().zip(&co.grads) {
        assert_eq!(na, nb);
        for (x, y) in ga.iter().zip(gb.iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "alpha=0 gradient differs at {na}");
        }
    }
    println!(
        "ACCEPTANCE eq7-degenerate-equivalence: PASS (alpha=1 bit-equal to transducer-only, \
         alpha=0 bit-equal to contrastive-only)"
    );
}

fn steps_to_wer_threshold(
    mut state: TrainState,
    sampler: &LabeledSampler,
    corpus: &[ttasr::frontend::ManifestEntry],
    dir: &std::path::Path,
    vocab: &Vocab,
    max_steps: usize,
) -> Option<(usize, f64)> {
    let check_every = 20;
    loop {
        if state.step >= max_steps {
            return None;
        }
        let step = state.step;
        finetune_step(&mut state, sampler.batch_at(step), 4, 1).unwrap();
        if state.step % check_every == 0 {
            let decoder = Decoder {
                params: &state.params,
                model: &state.model,
                chunk: Some((4, 1)),
                max_symbols_per_frame: 4,
            };
            let report = evaluate(
                &decoder,
                &[("train".to_string(), corpus.to_vec())],
                dir,
                vocab,
            )
            .unwrap();
            if report.overall_wer <= 0.05 {
                return Some((state.step, report.overall_wer));
            }
        }
    }
}

#[test]
fn end_to_end_overfit() {
    let start = Instant::now();
    let vocab = Vocab::toy();
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(
        dir.path(),
        &SynthConfig {
            num_labeled: 20,
            num_unlabeled: 20,
            ..SynthConfig::default()
        },
        &vocab,
    )
    .unwrap();
    let load = |entries: &[ttasr::frontend::ManifestEntry]| -> Vec<Utterance> {
        entries
            .iter()
            .map(|e| load_utterance(e, dir.path()).unwrap())
            .collect()
    };
    let labeled = make_batches(&load(&corpus.labeled), 1200, BatchOrigin::Labeled, 1).unwrap();
    let unlabeled =
        make_batches(&load(&corpus.unlabeled), 1200, BatchOrigin::Unlabeled, 2).unwrap();
    let model = overfit_model(vocab.size());
    let schedule = ScheduleConfig {
        k: 0.5,
        warmup: 300,
        total_steps: 2000,
        d_model: model.encoder.d_model,
    };
    let sampler = LabeledSampler::new(labeled.clone(), 5).unwrap();

    // Random initialization.
    let fresh = TrainState::new(model.clone(), schedule.clone(), LossWeights::new(1.0).unwrap(), 5)
        .unwrap();
    let (random_steps, random_wer) =
        steps_to_wer_threshold(fresh, &sampler, &corpus.labeled, dir.path(), &vocab, 2000)
            .expect("random init never reached WER <= 5% within 2000 steps");
    let random_elapsed = start.elapsed().as_secs_f64();
    assert!(
        random_elapsed < 900.0,
        "random-init fine-tuning took {random_elapsed:.0} s"
    );

    // 1000-step multitask pretraining, then the identical fine-tuning run.
    let alt = AlternatingSampler::new(labeled, unlabeled, 6).unwrap();
    let mut pre = TrainState::new(
        model.clone(),
        ScheduleConfig {
            k: 0.5,
            warmup: 400,
            total_steps: 1000,
            d_model: model.encoder.d_model,
        },
        // Weight the transducer branch heavily so the pretrained basin is
        // close to the fine-tuning task; the contrastive branch still runs on
        // every batch.
        LossWeights::new(0.9).unwrap(),
        6,
    )
    .unwrap();
    for step in 0..1000 {
        pretrain_step(&mut pre, alt.batch_at(step)).unwrap();
    }
    let warm = pre.for_finetuning(schedule, 5).unwrap();
    let (warm_steps, warm_wer) =
        steps_to_wer_threshold(warm, &sampler, &corpus.labeled, dir.path(), &vocab, 2000)
            .expect("pretrained init never reached WER <= 5% within 2000 steps");
    assert!(
        warm_steps < random_steps,
        "pretrained init needed {warm_steps} steps vs {random_steps} from random init"
    );
    println!(
        "ACCEPTANCE end-to-end-overfit: PASS (random init WER {random_wer:.3} at step \
         {random_steps} in {random_elapsed:.0} s; pretrained init WER {warm_wer:.3} at step \
         {warm_steps}; total {:.0} s)",
        start.elapsed().as_secs_f64()
    );
}

#[test]
fn determinism_and_checkpointing() {
    let cfg = tiny_model();
    let sched = ScheduleConfig {
        k: 1.0,
        warmup: 50,
        total_steps: 100,
        d_model: cfg.encoder.d_model,
    };
    let batches: Vec<Batch> = (0..3)
        .map(|i| random_batch(60 + i, 2, 24, true, cfg.transducer.vocab_size))
        .collect();
    let run = |steps: usize| -> TrainState {
        let mut s =
            TrainState::new(cfg.clone(), sched.clone(), LossWeights::new(0.5).unwrap(), 13)
                .unwrap();
        for i in 0..steps {
            pretrain_step(&mut s, &batches[i % batches.len()]).unwrap();
        }
        s
    };
    // Fixed-seed reruns are bit-identical.
    let a = run(6);
    let b = run(6);
    assert_eq!(a.params, b.params);
    assert_eq!(a.adam_m, b.adam_m);

    // Save at step 3, resume, and match the uninterrupted run for 10 steps.
    let mut interrupted = run(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("resume.ckpt");
    save_checkpoint(&interrupted, &path).unwrap();
    let mut resumed = load_checkpoint(&path).unwrap();
    for i in 3..13 {
        let b = &batches[i % batches.len()];
        let mi = pretrain_step(&mut interrupted, b).unwrap();
        let mr = pretrain_step(&mut resumed, b).unwrap();
        assert_eq!(mi.loss.to_bits(), mr.loss.to_bits(), "resume diverged at step {i}");
    }
    assert_eq!(interrupted.params, resumed.params);
    assert_eq!(interrupted.adam_m, resumed.adam_m);
    assert_eq!(interrupted.adam_v, resumed.adam_v);
    println!(
        "ACCEPTANCE determinism-and-checkpointing: PASS (rerun bit-identical, 10 post-resume \
         steps bitwise equal)"
    );
}

#[test]
fn frontend_criteria() {
    // Upconversion: every bank at or above the cutoff index holds the log
    // energy floor in every frame.
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let narrow = Array2::from_shape_fn((12, NUM_MEL_BANKS), |_| rng.gen_range(-5.0..5.0));
    let up = upconvert_8k(&narrow).unwrap();
    let cutoff = band_cutoff_index();
    let floor = (1e-10f64).ln();
    for t in 0..up.nrows() {
        for b in cutoff..NUM_MEL_BANKS {
            assert_eq!(up[[t, b]], floor, "bank {b} of frame {t} not floored");
        }
        for b in 0..cutoff {
            assert_eq!(up[[t, b]], narrow[[t, b]], "low bank {b} was modified");
        }
    }

    // Length filter: exactly the utterances with T > 3000 frames disappear.
    let mk = |id: &str, t: usize| Utterance {
        id: id.into(),
        features: Array2::zeros((t, NUM_MEL_BANKS)),
        transcript: None,
        sample_rate_tag: SampleRateTag::R16k,
    };
    let utts = vec![
        mk("short", 100),
        mk("edge", MAX_FRAMES),
        mk("over", MAX_FRAMES + 1),
        mk("long", 5000),
    ];
    let kept = filter_long(utts);
    let ids: Vec<&str> = kept.iter().map(|u| u.id.as_str()).collect();
    assert_eq!(ids, vec!["short", "edge"]);
    println!(
        "ACCEPTANCE frontend: PASS (banks >= {cutoff} floored after upconvert_8k, length \
         filter keeps exactly T <= {MAX_FRAMES})"
    );
}

#[test]
fn wer_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let lexicon = ["a", "b", "c", "d", "e"];
    for trial in 0..1000 {
        let rl = rng.gen_range(0..=5);
        let hl = rng.gen_range(0..=5);
        let r: Vec<&str> = (0..rl).map(|_| lexicon[rng.gen_range(0..lexicon.len())]).collect();
        let h: Vec<&str> = (0..hl).map(|_| lexicon[rng.gen_range(0..lexicon.len())]).collect();
        let counts = wer(&r, &h);
        let oracle = edit_distance_bruteforce(&r, &h);
        assert_eq!(counts.errors(), oracle, "trial {trial}: {r:?} vs {h:?}");
    }
    println!("ACCEPTANCE wer-oracle: PASS (1000 random pairs match brute force)");
}
