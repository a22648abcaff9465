//! Pretrain the template-conditioned generator on paired data with teacher
//! forcing, then decode responses with template-constrained beam search.
//!
//!     cargo run --example pretrain_generate

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use templar::corpus::{PairedExample, UnpairedExample, Vocab};
use templar::generator::{generate_beam, GeneratorParams};
use templar::nhsmm::train_nhsmm;
use templar::synth::{self, SynthConfig};
use templar::templates::{build_pool, sample_template};
use templar::trainer::{self, LogSink, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // The paired half of the synthetic corpus is a copy task: the response
    // repeats the message, so a working generator is easy to eyeball.
    let corpus = synth::synthesize(
        &SynthConfig { k: 3, d_max: 3, v: 15, n_unpaired: 300, n_paired: 300, ..SynthConfig::default() },
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
        d1: 48,
        d2: 48,
        d3: 48,
        lr_hsmm: 5e-3,
        lr_generator: 5e-3,
        hsmm_epochs: 3,
        hsmm_batch: 16,
        pretrain_epochs: 20,
        pretrain_batch: 16,
        beam_width: 3,
        ..TrainConfig::default()
    };
    let mut log = LogSink::silent();
    let hsmm = train_nhsmm(&unpaired, vocab.size(), &config, &mut log)?;
    let pool = build_pool(&hsmm, &unpaired)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let gen0 = GeneratorParams::from_hsmm(&hsmm, &mut rng)?;
    let gen = trainer::pretrain_generator(&gen0, &hsmm, &paired, &config, &mut log)?;

    let templates = trainer::infer_templates(&hsmm, &paired)?;
    let triples: Vec<_> = paired
        .iter()
        .zip(&templates)
        .map(|(ex, t)| (&ex.message, t, &ex.response))
        .collect();
    let refs: Vec<_> = paired.iter().map(|ex| &ex.response).collect();
    println!(
        "perplexity {:.2} after pretraining (unigram baseline {:.2})",
        trainer::generator_perplexity(&gen, &triples)?,
        trainer::unigram_perplexity(&refs, vocab.size())?
    );

    println!("\nbeam-search responses under pool-sampled templates:");
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for ex in paired.iter().take(4) {
        let template = sample_template(&pool, &hsmm, &mut rng)?;
        let response = generate_beam(&gen, &ex.message, &template, config.beam_width)?;
        println!("  message  {}", vocab.decode(&ex.message));
        println!("  template {:?}", template.entries);
        println!("  response {}\n", vocab.decode(&response));
    }
    Ok(())
}
