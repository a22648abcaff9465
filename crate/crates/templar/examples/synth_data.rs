//! Generate a synthetic corpus from a known segment-structured model and
//! write the four data files the training pipeline consumes.
//!
//!     cargo run --example synth_data

use templar::synth::{self, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = SynthConfig {
        k: 3,
        d_max: 3,
        v: 15,
        n_unpaired: 200,
        n_paired: 50,
        ..SynthConfig::default()
    };
    let corpus = synth::synthesize(&config, 42)?;

    println!("generating model: {} states, durations 1..={}, {} word types", corpus.truth.k, corpus.truth.d_max, corpus.truth.v);
    println!("\nfirst unpaired sentences with their true segmentations:");
    for ((text, spans), segs) in corpus.unpaired.iter().zip(&corpus.unpaired_segs).take(5) {
        let words: Vec<&str> = text.split_whitespace().collect();
        let mut rendered = Vec::new();
        let mut pos = 0;
        for &(state, dur) in segs {
            rendered.push(format!("[{}]_{}", words[pos..pos + dur].join(" "), state));
            pos += dur;
        }
        let note = if spans.is_empty() { String::new() } else { format!("   protected {spans:?}") };
        println!("  {}{note}", rendered.join(" "));
    }

    let dir = std::env::temp_dir().join("templar-synth-example");
    std::fs::create_dir_all(&dir)?;
    synth::write_files(&corpus, &dir)?;
    println!("\nwrote to {}:", dir.display());
    for name in ["unpaired.jsonl", "paired.jsonl", "truth.json", "vectors.txt"] {
        let len = std::fs::metadata(dir.join(name))?.len();
        println!("  {name:<16} {len:>7} bytes");
    }
    Ok(())
}
