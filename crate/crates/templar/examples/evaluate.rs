//! Score hypotheses against references with the full metric suite: BLEU-1,
//! ROUGE-L, and the three embedding similarities.
//!
//!     cargo run --example evaluate

use templar::metrics::{bleu1, embedding_scores, evaluate_corpus, rouge_l, WordVectors};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Word-overlap metrics work on any token type.
    let hyp = ["the", "cat", "sat", "down"];
    let reference = ["the", "cat", "sat", "on", "the", "mat"];
    println!("BLEU-1  {:.4}", bleu1(&hyp, &[&reference]));
    println!("ROUGE-L {:.4}", rouge_l(&hyp, &reference));

    // Embedding metrics need word vectors; any missing token just drops out
    // of the sentence representation.
    let mut wv = WordVectors::new(3);
    wv.insert("the", vec![0.1, 0.2, 0.3])?;
    wv.insert("cat", vec![0.9, 0.1, 0.0])?;
    wv.insert("dog", vec![0.8, 0.3, 0.1])?;
    wv.insert("sat", vec![0.0, 0.5, 0.5])?;
    wv.insert("mat", vec![0.2, 0.2, 0.9])?;
    let sent = |words: &[&str]| -> Vec<String> { words.iter().map(|w| w.to_string()).collect() };
    let (avg, ext, greedy) =
        embedding_scores(&sent(&["the", "cat", "sat"]), &sent(&["the", "dog", "sat"]), &wv)?;
    println!("embedding average {avg:.4}  extrema {ext:.4}  greedy {greedy:.4}");

    // Corpus-level report over aligned pairs.
    let hyps = vec![sent(&["the", "cat", "sat"]), sent(&["the", "dog"])];
    let refs = vec![sent(&["the", "cat", "sat", "mat"]), sent(&["the", "cat"])];
    let report = evaluate_corpus(&hyps, &refs, &wv)?;
    println!("\ncorpus of {} pairs:", report.n_examples);
    println!("  bleu1   {:.4}", report.bleu1);
    println!("  rouge_l {:.4}", report.rouge_l);
    println!("  average {:.4}", report.average);
    println!("  extrema {:.4}", report.extrema);
    println!("  greedy  {:.4}", report.greedy);
    Ok(())
}
