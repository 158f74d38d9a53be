//! Log-Mel feature extraction on a synthetic tone, plus the 8 kHz
//! upconversion path that zero-fills the banks above 4 kHz.

use ndarray::Array2;
use ttasr::frontend::{band_cutoff_index, log_mel, upconvert_8k};

fn main() {
    // One second of a 1 kHz tone at 16 kHz.
    let samples: Vec<f64> = (0..16000)
        .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 16000.0).sin())
        .collect();
    let feats = log_mel(&samples, 16000).unwrap();
    println!("frames: {}, banks: {}", feats.nrows(), feats.ncols());

    let frame = feats.row(0);
    let peak = frame
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0;
    println!("most energetic bank for a 1 kHz tone: {peak}");

    // Narrowband data keeps the same 80-bank layout; everything above the
    // 4 kHz cutoff holds the log energy floor.
    let cutoff = band_cutoff_index();
    println!("4 kHz cutoff bank: {cutoff}");
    let narrow: Array2<f64> = feats.slice(ndarray::s![0..5, ..]).to_owned();
    let up = upconvert_8k(&narrow).unwrap();
    let floor = up[[0, cutoff]];
    println!(
        "bank {} of the upconverted frame holds the floor value {:.3}",
        cutoff, floor
    );
    assert!(up
        .slice(ndarray::s![.., cutoff..])
        .iter()
        .all(|&v| v == floor));
}
