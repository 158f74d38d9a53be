//! Finite-difference verification of the multitask loss gradients on a
//! tiny randomly initialized model.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ttasr::contrastive::ContrastiveConfig;
use ttasr::encoder::EncoderConfig;
use ttasr::frontend::{Batch, BatchOrigin, SampleRateTag, Utterance, NUM_MEL_BANKS};
use ttasr::nn::ParamStore;
use ttasr::trainer::{batch_loss_and_grads, MaskingConfig, ModelConfig, StepMode};
use ttasr::transducer::TransducerConfig;

fn batch() -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let utt = Utterance {
        id: "g0".into(),
        features: Array2::from_shape_fn((32, NUM_MEL_BANKS), |_| rng.gen_range(-1.0..1.0)),
        transcript: Some(vec![1, 2, 1]),
        sample_rate_tag: SampleRateTag::R16k,
    };
    Batch::from_utterances(&[&utt], BatchOrigin::Labeled).unwrap()
}

fn loss_of(params: &ParamStore, cfg: &ModelConfig, b: &Batch) -> f64 {
    // Fixed RNG seed so every evaluation draws the same span mask and
    // distractors; only the parameter perturbation changes the loss.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    batch_loss_and_grads(params, cfg, b, StepMode::Pretrain { alpha: 0.5 }, &mut rng)
        .unwrap()
        .loss
}

fn main() {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            conv_channels: (2, 2),
            num_layers: 1,
            d_model: 8,
            ffn_dim: 12,
            num_heads: 2,
            max_relative_distance: 8,
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
            num_negatives: 3,
            ..ContrastiveConfig::with_dims(8)
        },
        masking: MaskingConfig {
            mask_prob: 0.2,
            mask_span: 2,
        },
    };
    let params = cfg.init_params(42);
    let b = batch();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let bl = batch_loss_and_grads(&params, &cfg, &b, StepMode::Pretrain { alpha: 0.5 }, &mut rng)
        .unwrap();
    println!(
        "loss {:.6} (transducer {:.6}, contrastive {:.6})",
        bl.loss,
        bl.loss_trans.unwrap(),
        bl.loss_contrastive.unwrap()
    );

    let h = 1e-6;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let mut probe = ChaCha8Rng::seed_from_u64(5);
    for (name, g) in &bl.grads {
        // Spot-check up to two random entries per parameter tensor.
        for _ in 0..2usize.min(g.len()) {
            let flat = probe.gen_range(0..g.len());
            let analytic = g.iter().nth(flat).copied().unwrap();
            let mut plus = params.clone();
            *plus.get_mut(name).iter_mut().nth(flat).unwrap() += h;
            let mut minus = params.clone();
            *minus.get_mut(name).iter_mut().nth(flat).unwrap() -= h;
            let numeric = (loss_of(&plus, &cfg, &b) - loss_of(&minus, &cfg, &b)) / (2.0 * h);
            // Floor the denominator at 1e-5: central differences on a loss of
            // O(1) carry ~1e-9 of cancellation noise, which would dominate the
            // ratio for near-zero gradients.
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5);
            if rel > worst {
                worst = rel;
                println!("  {name}[{flat}]: analytic {analytic:+.3e} numeric {numeric:+.3e} rel {rel:.2e}");
            }
            checked += 1;
        }
    }
    println!("checked {checked} entries, worst relative error {worst:.2e}");
    assert!(worst <= 1e-4, "gradient check failed");
}
