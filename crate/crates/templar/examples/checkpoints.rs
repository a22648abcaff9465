//! Persist a full model bundle to the versioned binary format and prove the
//! reload generates bit-identically.
//!
//!     cargo run --example checkpoints

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use templar::checkpoint::{load_arrays, load_checkpoint, save_checkpoint, ModelBundle};
use templar::corpus::{UnpairedExample, Vocab};
use templar::generator::{generate_beam, GeneratorParams};
use templar::nhsmm::train_nhsmm;
use templar::synth::{self, SynthConfig};
use templar::templates::{build_pool, sample_template};
use templar::trainer::{LogSink, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = synth::synthesize(
        &SynthConfig { k: 3, d_max: 3, v: 15, n_unpaired: 100, n_paired: 0, ..SynthConfig::default() },
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
        hsmm_epochs: 2,
        ..TrainConfig::default()
    };
    let mut log = LogSink::silent();
    let hsmm = train_nhsmm(&examples, vocab.size(), &config, &mut log)?;
    let pool = build_pool(&hsmm, &examples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let generator = GeneratorParams::from_hsmm(&hsmm, &mut rng)?;

    let bundle = ModelBundle {
        hsmm,
        generator: Some(generator),
        discriminator: None,
        pool: Some(pool),
        vocab: (0..vocab.size()).map(|i| vocab.token(i as u32).to_string()).collect(),
        seed: config.seed,
        config,
    };
    let path = std::env::temp_dir().join("templar-checkpoint-example.ckpt");
    save_checkpoint(&bundle, &path)?;
    println!("saved {} bytes to {}", std::fs::metadata(&path)?.len(), path.display());

    // The low-level layer exposes every named array in the file.
    let (arrays, _meta) = load_arrays(&path)?;
    println!("\nstored arrays:");
    for (name, shape, data) in arrays.iter().take(6) {
        println!("  {name:<24} {shape:?} ({} values)", data.len());
    }
    println!("  ... {} arrays total", arrays.len());

    // Round trip and generate from both bundles.
    let reloaded = load_checkpoint(&path)?;
    assert_eq!(reloaded, bundle);
    let message = vocab.encode("w01 w05 w03")?;
    let mut rng_a = ChaCha8Rng::seed_from_u64(3);
    let mut rng_b = ChaCha8Rng::seed_from_u64(3);
    let ta = sample_template(bundle.pool.as_ref().unwrap(), &bundle.hsmm, &mut rng_a)?;
    let tb = sample_template(reloaded.pool.as_ref().unwrap(), &reloaded.hsmm, &mut rng_b)?;
    let a = generate_beam(bundle.generator.as_ref().unwrap(), &message, &ta, 2)?;
    let b = generate_beam(reloaded.generator.as_ref().unwrap(), &message, &tb, 2)?;
    assert_eq!(a, b);
    println!("\nreloaded bundle equals the original and generates bit-identically");
    Ok(())
}
