//! Adversarial fine-tuning: alternate policy-gradient generator updates,
//! rewarded by Monte Carlo rollouts through the discriminator, with
//! discriminator updates on fresh generations, then compare the
//! discriminator's verdict on human and generated responses.
//!
//!     cargo run --example adversarial

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use templar::corpus::{PairedExample, UnpairedExample, Vocab};
use templar::discriminator::{self, DiscriminatorParams};
use templar::generator::{generate_beam, GeneratorParams};
use templar::nhsmm::train_nhsmm;
use templar::synth::{self, SynthConfig};
use templar::templates::{build_pool, sample_template, TemplatePool};
use templar::trainer::{self, LogSink, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = synth::synthesize(
        &SynthConfig { k: 3, d_max: 3, v: 15, n_unpaired: 300, n_paired: 200, ..SynthConfig::default() },
        7,
    )?;
    let texts = corpus
        .unpaired
        .iter()
        .map(|(t, _)| t.as_str())
        .chain(corpus.paired.iter().flat_map(|(m, r, _)| [m.as_str(), r.as_str()]));
    let vocab = Vocab::build(texts, 100)?;
    let unpaired: Vec<UnpairedExample> = corpus
        .unpaired
        .iter()
        .map(|(text, spans)| {
            Ok(UnpairedExample { text: vocab.encode(text)?, spans: spans.clone() })
        })
        .collect::<templar::Result<_>>()?;
    let paired: Vec<PairedExample> = corpus
        .paired
        .iter()
        .map(|(m, r, spans)| {
            Ok(PairedExample {
                message: vocab.encode(m)?,
                response: vocab.encode(r)?,
                response_spans: spans.clone(),
            })
        })
        .collect::<templar::Result<_>>()?;

    let config = TrainConfig {
        seed: 7,
        k: 3,
        d_max: 3,
        d1: 32,
        d2: 32,
        d3: 32,
        lr_hsmm: 5e-3,
        lr_generator: 1e-3,
        lr_discriminator: 3e-3,
        hsmm_epochs: 3,
        pretrain_epochs: 10,
        pretrain_batch: 16,
        disc_pretrain_epochs: 3,
        disc_batch: 8,
        adv_epochs: 3,
        adv_iters_per_epoch: 8,
        d_steps: 2,
        n_rollouts: 2,
        top_k: 8,
        beam_width: 3,
        conv_windows: vec![1, 2],
        n_filters: 12,
        h_d: 24,
        patience: 50,
        ..TrainConfig::default()
    };
    let mut log = LogSink::silent();
    let hsmm = train_nhsmm(&unpaired, vocab.size(), &config, &mut log)?;
    let pool = build_pool(&hsmm, &unpaired)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let gen0 = GeneratorParams::from_hsmm(&hsmm, &mut rng)?;
    let gen = trainer::pretrain_generator(&gen0, &hsmm, &paired, &config, &mut log)?;
    let disc0 = DiscriminatorParams::new_seeded(
        vocab.size(),
        config.d3,
        config.h_d,
        &config.conv_windows,
        config.n_filters,
        &mut rng,
    )?;
    let disc = trainer::pretrain_discriminator(&disc0, &gen, &hsmm, &pool, &paired, &config, &mut log)?;

    // Mean discriminator scores on human and beam-generated responses.
    let judge = |gen: &GeneratorParams,
                 disc: &DiscriminatorParams,
                 pool: &TemplatePool|
     -> templar::Result<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (mut human, mut fake) = (0.0, 0.0);
        for ex in &paired {
            let template = sample_template(pool, &hsmm, &mut rng)?;
            let response = generate_beam(gen, &ex.message, &template, config.beam_width)?;
            human += discriminator::score(disc, &ex.message, &ex.response)?;
            fake += discriminator::score(disc, &ex.message, &response)?;
        }
        let n = paired.len() as f64;
        Ok((human / n, fake / n))
    };
    let (human, fake) = judge(&gen, &disc, &pool)?;
    println!("after pretraining:        D(human) {human:.3}   D(generated) {fake:.3}");

    let (gen, disc) = trainer::adversarial_train(
        &gen,
        &disc,
        &hsmm,
        &pool,
        &paired,
        &config,
        &mut log,
        |epoch, _, _| {
            println!("  adversarial epoch {epoch} done");
            Ok(())
        },
    )?;
    let (human, fake) = judge(&gen, &disc, &pool)?;
    println!("after adversarial tuning: D(human) {human:.3}   D(generated) {fake:.3}");
    Ok(())
}
