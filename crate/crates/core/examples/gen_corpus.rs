//! Write a synthetic corpus (feature files plus labeled/unlabeled JSONL
//! manifests) to the directory given as the first argument. The output is
//! ready for the `ttasr pretrain` / `finetune` / `eval` subcommands.

use ttasr::eval::Vocab;
use ttasr::synth::{generate_corpus, SynthConfig};

fn main() {
    let dir = std::path::PathBuf::from(
        std::env::args().nth(1).expect("usage: gen_corpus <output-dir>"),
    );
    std::fs::create_dir_all(&dir).unwrap();
    let vocab = Vocab::toy();
    let corpus = generate_corpus(&dir, &SynthConfig::default(), &vocab).unwrap();
    println!(
        "wrote {} labeled and {} unlabeled utterances under {}",
        corpus.labeled.len(),
        corpus.unlabeled.len(),
        dir.display()
    );
}
