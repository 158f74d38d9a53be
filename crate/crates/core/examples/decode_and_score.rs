//! Train briefly on a tiny synthetic corpus, then greedy-decode it and
//! score word error rate.

use ttasr::eval::{evaluate, Decoder, Vocab};
use ttasr::frontend::{filter_long, load_utterance, make_batches, BatchOrigin};
use ttasr::synth::{generate_corpus, SynthConfig};
use ttasr::trainer::{
    finetune_step, LabeledSampler, LossWeights, ModelConfig, ScheduleConfig, TrainState,
};

fn main() {
    let vocab = Vocab::toy();
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(
        dir.path(),
        &SynthConfig {
            num_labeled: 6,
            num_unlabeled: 1,
            max_words: 1,
            ..SynthConfig::default()
        },
        &vocab,
    )
    .unwrap();
    let utts: Vec<_> = corpus
        .labeled
        .iter()
        .map(|e| load_utterance(e, dir.path()).unwrap())
        .collect();
    let batches = make_batches(&filter_long(utts), 2048, BatchOrigin::Labeled, 1).unwrap();
    let sampler = LabeledSampler::new(batches, 3).unwrap();

    let model = ModelConfig::toy(vocab.size());
    let schedule = ScheduleConfig {
        k: 6.0,
        warmup: 80,
        total_steps: 400,
        d_model: model.encoder.d_model,
    };
    let mut state =
        TrainState::new(model, schedule, LossWeights::new(1.0).unwrap(), 3).unwrap();
    for step in 0..300 {
        let m = finetune_step(&mut state, sampler.batch_at(step), 4, 1).unwrap();
        if m.step % 50 == 0 {
            println!("step {:3}  loss {:.4}", m.step, m.loss);
        }
    }

    let decoder = Decoder {
        params: &state.params,
        model: &state.model,
        chunk: Some((4, 1)),
        max_symbols_per_frame: 4,
    };
    for entry in corpus.labeled.iter().take(4) {
        let utt = load_utterance(entry, dir.path()).unwrap();
        let hyp = decoder.decode_features(&utt.features).unwrap();
        println!(
            "{}: ref {:?} hyp {:?}",
            entry.id,
            vocab.detokenize(entry.transcript.as_ref().unwrap()).unwrap(),
            vocab.detokenize(&hyp).unwrap()
        );
    }
    let report = evaluate(
        &decoder,
        &[("train".to_string(), corpus.labeled.clone())],
        dir.path(),
        &vocab,
    )
    .unwrap();
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
}
