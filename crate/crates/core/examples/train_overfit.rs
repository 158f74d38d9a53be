//! Overfit a small model on a deterministic synthetic corpus: multitask
//! pretraining on alternating labeled/unlabeled batches, then streaming
//! fine-tuning, printing the loss trajectory.

use ttasr::eval::Vocab;
use ttasr::frontend::{filter_long, load_utterance, make_batches, BatchOrigin};
use ttasr::synth::{generate_corpus, SynthConfig};
use ttasr::trainer::{
    finetune_step, pretrain_step, save_checkpoint, AlternatingSampler, LabeledSampler,
    LossWeights, ModelConfig, ScheduleConfig, TrainState,
};

fn main() {
    let vocab = Vocab::toy();
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(
        dir.path(),
        &SynthConfig {
            num_labeled: 8,
            num_unlabeled: 8,
            ..SynthConfig::default()
        },
        &vocab,
    )
    .unwrap();

    let load = |entries: &[ttasr::frontend::ManifestEntry]| {
        filter_long(
            entries
                .iter()
                .map(|e| load_utterance(e, dir.path()).unwrap())
                .collect(),
        )
    };
    let labeled = make_batches(&load(&corpus.labeled), 2048, BatchOrigin::Labeled, 1).unwrap();
    let unlabeled =
        make_batches(&load(&corpus.unlabeled), 2048, BatchOrigin::Unlabeled, 2).unwrap();
    let sampler = AlternatingSampler::new(labeled.clone(), unlabeled, 7).unwrap();

    let model = ModelConfig::toy(vocab.size());
    let schedule = ScheduleConfig {
        k: 5.0,
        warmup: 100,
        total_steps: 200,
        d_model: model.encoder.d_model,
    };
    let mut state =
        TrainState::new(model, schedule.clone(), LossWeights::new(0.5).unwrap(), 7).unwrap();

    println!("pretraining (alpha = 0.5):");
    for step in 0..60 {
        let m = pretrain_step(&mut state, sampler.batch_at(step)).unwrap();
        if m.step % 10 == 0 {
            println!(
                "  step {:3}  {:?}  loss {:.4}  lr {:.2e}",
                m.step, m.origin, m.loss, m.lr
            );
        }
    }
    let ckpt = dir.path().join("pretrained.ckpt");
    save_checkpoint(&state, &ckpt).unwrap();

    println!("fine-tuning (streaming, chunk 4 with 1 left chunk):");
    let mut ft = state
        .for_finetuning(ScheduleConfig { k: 6.0, ..schedule }, 8)
        .unwrap();
    let ft_sampler = LabeledSampler::new(labeled, 8).unwrap();
    for step in 0..60 {
        let m = finetune_step(&mut ft, ft_sampler.batch_at(step), 4, 1).unwrap();
        if m.step % 10 == 0 {
            println!("  step {:3}  loss {:.4}  lr {:.2e}", m.step, m.loss, m.lr);
        }
    }
    println!("done; pretraining checkpoint at {}", ckpt.display());
}
