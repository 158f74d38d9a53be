//! Span masks for contrastive pretraining and the chunk-wise streaming
//! attention mask, printed as 0/1 grids.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ttasr::masking::{chunk_attention_mask, sample_span_mask};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t = 48;
    let span = sample_span_mask(t, 0.065, 10, &mut rng).unwrap();
    let row: String = (0..t)
        .map(|i| if span.contains(i) { 'M' } else { '.' })
        .collect();
    println!("span mask over {t} frames (p = 0.065, span 10):");
    println!("{row}");
    println!("masked {} of {} frames\n", span.len(), t);

    println!("streaming attention, chunk 4 with 1 left chunk (16 frames):");
    let mask = chunk_attention_mask(16, 4, 1).unwrap();
    for t in 0..16 {
        let row: String = (0..16)
            .map(|tau| if mask.is_visible(t, tau) { '1' } else { '0' })
            .collect();
        println!("{row}");
    }
}
