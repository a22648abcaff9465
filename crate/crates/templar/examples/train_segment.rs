//! Train the neural segment model on unpaired text and decode segmentations
//! with the constrained Viterbi pass.
//!
//!     cargo run --example train_segment

use templar::corpus::{UnpairedExample, Vocab};
use templar::nhsmm::{self, train_nhsmm};
use templar::synth::{self, SynthConfig};
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
        hsmm_epochs: 6,
        hsmm_batch: 16,
        ..TrainConfig::default()
    };
    let mean_nll = |p: &templar::nhsmm::HsmmParams| -> templar::Result<f64> {
        let mut total = 0.0;
        for ex in &examples {
            total -= nhsmm::backward_marginal_loglik(p, &ex.text, &ex.spans)?;
        }
        Ok(total / examples.len() as f64)
    };

    println!("training {} sentences, {} word types ...", examples.len(), vocab.size());
    let hsmm = train_nhsmm(&examples, vocab.size(), &config, &mut LogSink::silent())?;
    println!("mean NLL after {} epochs: {:.3} nats/sentence", config.hsmm_epochs, mean_nll(&hsmm)?);

    println!("\nViterbi segmentations (tokens bracketed per segment, state as suffix):");
    for ex in examples.iter().take(5) {
        let segs = nhsmm::viterbi_segment(&hsmm, &ex.text, &ex.spans)?;
        let words: Vec<&str> = ex.text.iter().map(|&id| vocab.token(id)).collect();
        let mut rendered = Vec::new();
        let mut pos = 0;
        for (state, dur) in segs {
            rendered.push(format!("[{}]_{}", words[pos..pos + dur].join(" "), state));
            pos += dur;
        }
        println!("  {}", rendered.join(" "));
    }
    Ok(())
}
