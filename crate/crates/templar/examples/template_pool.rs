//! Build a template pool from Viterbi segmentations of unpaired text, then
//! sample templates from it.
//!
//!     cargo run --example template_pool

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use templar::corpus::{UnpairedExample, Vocab};
use templar::nhsmm::train_nhsmm;
use templar::synth::{self, SynthConfig};
use templar::templates::{build_pool, sample_template};
use templar::trainer::{LogSink, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = synth::synthesize(
        &SynthConfig { k: 3, d_max: 3, v: 15, n_unpaired: 300, n_paired: 0, ..SynthConfig::default() },
        7,
    )?;
    let vocab = Vocab::build(corpus.unpaired.iter().map(|(t, _)| t.as_str()), 100)?;
    let examples: Vec<UnpairedExample> = corpus
        .unpaired
        .iter()
        .map(|(text, spans)| {
            Ok(UnpairedExample { text: vocab.encode(text)?, spans: spans.clone() })
        })
        .collect::<templar::Result<_>>()?;
    let config = TrainConfig {
        seed: 7,
        k: 3,
        d_max: 3,
        d1: 12,
        d2: 12,
        d3: 12,
        lr_hsmm: 5e-3,
        hsmm_epochs: 4,
        hsmm_batch: 16,
        ..TrainConfig::default()
    };
    let hsmm = train_nhsmm(&examples, vocab.size(), &config, &mut LogSink::silent())?;

    let pool = build_pool(&hsmm, &examples)?;
    println!(
        "pool holds {} distinct state chains over {} segmented sentences",
        pool.chains().len(),
        pool.occurrences()
    );
    let mut by_count: Vec<_> = pool.chains().to_vec();
    by_count.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    println!("\nmost frequent chains:");
    for (chain, count) in by_count.iter().take(5) {
        println!("  {chain:?}  x{count}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    println!("\nsampled templates (state, duration):");
    for _ in 0..4 {
        let t = sample_template(&pool, &hsmm, &mut rng)?;
        println!("  {:?}  -> {} tokens", t.entries, t.total_len());
    }
    Ok(())
}
