//! Synthetic corpora from an explicit ground-truth segment process.
//!
//! A classical hidden semi-Markov model with literal probability tables acts
//! as the generating distribution: recovery experiments can then score
//! held-out sentences against the exact truth and compare inferred cuts to
//! the boundaries recorded at sampling time. The module also emits copy-task
//! message/response pairs and a small word-vector file, so the whole pipeline
//! (segmentation, pretraining, adversarial fine-tuning, evaluation) runs end
//! to end without any external data.
//!
//! The truth model deliberately avoids the neural parameterization: its
//! marginal likelihood is a separate forward dynamic program over plain
//! tables, so it can serve as an independent oracle for the learned model.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ProtectedSpans, RawPaired, RawUnpaired, TokenSeq};
use crate::error::{Error, Result};
use crate::math::logsumexp;
use crate::nhsmm::Segmentation;

/// A classical HSMM with explicit tables: categorical initial-state and
/// transition distributions (zero diagonal), uniform durations over
/// `1..=d_max`, and per-state categorical token emissions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthHsmm {
    pub k: usize,
    pub d_max: usize,
    pub v: usize,
    /// Initial state probabilities, length `k`.
    pub init: Vec<f64>,
    /// Row-major `k × k` transition probabilities; diagonal entries are zero.
    pub trans: Vec<f64>,
    /// Row-major `k × v` per-state token probabilities.
    pub emit: Vec<f64>,
}

/// Softmax of `gain`-scaled uniform draws: a random categorical distribution
/// whose peakedness grows with `gain`. Indices in `skip` get probability 0.
fn random_categorical<R: Rng>(n: usize, gain: f64, skip: Option<usize>, rng: &mut R) -> Vec<f64> {
    let logits: Vec<f64> = (0..n)
        .map(|i| {
            if Some(i) == skip {
                f64::NEG_INFINITY
            } else {
                gain * rng.gen_range(-1.0..=1.0)
            }
        })
        .collect();
    let z = logsumexp(&logits);
    logits.iter().map(|&l| (l - z).exp()).collect()
}

/// Walk the cumulative distribution with one uniform draw. Falls back to the
/// last positive-probability index if rounding leaves the draw unconsumed.
fn pick<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last = i;
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

impl GroundTruthHsmm {
    /// Draw random tables. `gain` controls how peaked the categorical
    /// distributions are (0 gives uniform rows; ~2 gives clearly distinct
    /// states that a learner can recover at desk scale).
    pub fn new_random<R: Rng>(
        k: usize,
        d_max: usize,
        v: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<GroundTruthHsmm> {
        if k < 2 {
            return Err(Error::InvalidConfig(format!(
                "ground-truth model needs k ≥ 2 (zero-diagonal transitions), got {k}"
            )));
        }
        if d_max < 1 {
            return Err(Error::InvalidConfig("d_max must be ≥ 1".to_string()));
        }
        if v < 2 {
            return Err(Error::InvalidConfig(format!("vocabulary must have ≥ 2 tokens, got {v}")));
        }
        if !gain.is_finite() || gain < 0.0 {
            return Err(Error::InvalidConfig(format!("gain must be finite and ≥ 0, got {gain}")));
        }
        let init = random_categorical(k, gain, None, rng);
        let mut trans = Vec::with_capacity(k * k);
        for i in 0..k {
            trans.extend(random_categorical(k, gain, Some(i), rng));
        }
        let mut emit = Vec::with_capacity(k * v);
        for _ in 0..k {
            emit.extend(random_categorical(v, gain, None, rng));
        }
        Ok(GroundTruthHsmm { k, d_max, v, init, trans, emit })
    }

    /// Uniform tables: equiprobable states, transitions, and tokens. The
    /// degenerate model whose marginals are computable by hand.
    pub fn uniform(k: usize, d_max: usize, v: usize) -> Result<GroundTruthHsmm> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        GroundTruthHsmm::new_random(k, d_max, v, 0.0, &mut rng)
    }

    /// Sample one sentence: a uniform segment count in
    /// `min_segments..=max_segments`, then states, durations, and tokens from
    /// the tables. Returns the token sequence and its true segmentation.
    pub fn sample_sentence<R: Rng>(
        &self,
        min_segments: usize,
        max_segments: usize,
        rng: &mut R,
    ) -> (TokenSeq, Segmentation) {
        let m = rng.gen_range(min_segments..=max_segments);
        let mut tokens = Vec::new();
        let mut segs = Vec::with_capacity(m);
        let mut prev: Option<usize> = None;
        for _ in 0..m {
            let state = match prev {
                None => pick(&self.init, rng),
                Some(i) => pick(&self.trans[i * self.k..(i + 1) * self.k], rng),
            };
            let dur = rng.gen_range(1..=self.d_max);
            for _ in 0..dur {
                let tok = pick(&self.emit[state * self.v..(state + 1) * self.v], rng);
                tokens.push(tok as u32);
            }
            segs.push((state, dur));
            prev = Some(state);
        }
        (tokens, segs)
    }

    /// Exact log marginal mass of `seq`: the sum over every segmentation with
    /// total duration `seq.len()` of initial × transition × duration ×
    /// emission probabilities. Forward log-space dynamic program, independent
    /// of the neural model's likelihood code.
    pub fn marginal_loglik(&self, seq: &TokenSeq) -> Result<f64> {
        if seq.is_empty() {
            return Err(Error::EmptySentence);
        }
        for &tok in seq {
            if tok as usize >= self.v {
                return Err(Error::TokenOutOfRange { id: tok, vocab: self.v });
            }
        }
        let n = seq.len();
        let log_dur = -(self.d_max as f64).ln();
        // alpha[t * k + j]: log mass of segmentations covering seq[..t] whose
        // final segment is in state j (t in 1..=n).
        let mut alpha = vec![f64::NEG_INFINITY; (n + 1) * self.k];
        for t in 1..=n {
            for j in 0..self.k {
                let mut terms = Vec::new();
                for d in 1..=self.d_max.min(t) {
                    let start = t - d;
                    let mut log_emit = 0.0;
                    for &tok in &seq[start..t] {
                        log_emit += self.emit[j * self.v + tok as usize].ln();
                    }
                    let log_in = if start == 0 {
                        self.init[j].ln()
                    } else {
                        let prevs: Vec<f64> = (0..self.k)
                            .filter(|&i| i != j)
                            .map(|i| alpha[start * self.k + i] + self.trans[i * self.k + j].ln())
                            .collect();
                        logsumexp(&prevs)
                    };
                    terms.push(log_in + log_dur + log_emit);
                }
                alpha[t * self.k + j] = logsumexp(&terms);
            }
        }
        Ok(logsumexp(&alpha[n * self.k..]))
    }

    /// Mean per-sentence negative log marginal over a corpus.
    pub fn mean_nll(&self, corpus: &[TokenSeq]) -> Result<f64> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut total = 0.0;
        for seq in corpus {
            total -= self.marginal_loglik(seq)?;
        }
        Ok(total / corpus.len() as f64)
    }
}

/// Internal cut positions of a segmentation: the cumulative duration after
/// each segment except the last. A sentence split as `[0,2) [2,3)` cuts at 2.
pub fn cut_positions(segs: &Segmentation) -> Vec<usize> {
    let mut cuts = Vec::new();
    let mut pos = 0;
    for &(_, dur) in &segs[..segs.len().saturating_sub(1)] {
        pos += dur;
        cuts.push(pos);
    }
    cuts
}

/// Micro-averaged boundary F1: cut positions are pooled over all sentences,
/// and precision/recall count exact position matches. Both sides having no
/// cuts anywhere counts as perfect agreement.
pub fn boundary_f1(predicted: &[Vec<usize>], reference: &[Vec<usize>]) -> f64 {
    assert_eq!(predicted.len(), reference.len(), "sentence count mismatch");
    let mut tp = 0usize;
    let mut n_pred = 0usize;
    let mut n_ref = 0usize;
    for (p, r) in predicted.iter().zip(reference) {
        n_pred += p.len();
        n_ref += r.len();
        tp += p.iter().filter(|c| r.contains(c)).count();
    }
    if n_pred == 0 && n_ref == 0 {
        return 1.0;
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / n_pred as f64;
    let recall = tp as f64 / n_ref as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Cut positions of a uniformly random segmentation of a length-`len`
/// sentence with durations in `1..=d_max`: the chance-level baseline for
/// boundary F1.
pub fn random_cuts<R: Rng>(len: usize, d_max: usize, rng: &mut R) -> Vec<usize> {
    let mut cuts = Vec::new();
    let mut pos = 0;
    while pos < len {
        pos += rng.gen_range(1..=d_max.min(len - pos));
        if pos < len {
            cuts.push(pos);
        }
    }
    cuts
}

/// Shape of a synthetic corpus. Defaults match the desk-scale recovery
/// experiment: 3 states, durations up to 3, 20 word types, 2000 unpaired
/// sentences, and 500 copy-task pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub k: usize,
    pub d_max: usize,
    pub v: usize,
    pub n_unpaired: usize,
    pub n_paired: usize,
    /// Segment count per sentence is uniform in `min_segments..=max_segments`.
    pub min_segments: usize,
    pub max_segments: usize,
    /// Fraction of sentences given one protected span (aligned with a true
    /// segment, so the truth never cuts inside it).
    pub span_fraction: f64,
    /// Dimension of the emitted word vectors.
    pub vector_dim: usize,
    /// Peakedness of the random tables; see [`GroundTruthHsmm::new_random`].
    pub gain: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            k: 3,
            d_max: 3,
            v: 20,
            n_unpaired: 2000,
            n_paired: 500,
            min_segments: 2,
            max_segments: 4,
            span_fraction: 0.2,
            vector_dim: 8,
            gain: 2.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_segments < 1 || self.min_segments > self.max_segments {
            return Err(Error::InvalidConfig(format!(
                "segment count range {}..={} is empty or starts at zero",
                self.min_segments, self.max_segments
            )));
        }
        if !(0.0..=1.0).contains(&self.span_fraction) {
            return Err(Error::InvalidConfig(format!(
                "span_fraction must be in [0,1], got {}",
                self.span_fraction
            )));
        }
        if self.vector_dim == 0 {
            return Err(Error::InvalidConfig("vector_dim must be ≥ 1".to_string()));
        }
        Ok(())
    }
}

/// A fully materialized synthetic corpus: the generating model, surface-form
/// records ready for the JSONL loaders, the true segmentation of every
/// unpaired sentence, and word vectors for every word type.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub truth: GroundTruthHsmm,
    pub unpaired: Vec<RawUnpaired>,
    pub unpaired_segs: Vec<Segmentation>,
    pub paired: Vec<RawPaired>,
    pub vectors: Vec<(String, Vec<f64>)>,
}

/// Surface form of truth-model token `i`.
pub fn word(i: usize) -> String {
    format!("w{i:02}")
}

fn render(tokens: &TokenSeq) -> String {
    tokens.iter().map(|&t| word(t as usize)).collect::<Vec<_>>().join(" ")
}

/// With probability `fraction`, protect one multi-token true segment of the
/// sentence (chosen uniformly among candidates). Spans aligned this way are
/// always satisfiable: the truth keeps them intact by construction.
fn maybe_span<R: Rng>(segs: &Segmentation, fraction: f64, rng: &mut R) -> ProtectedSpans {
    if !(rng.gen::<f64>() < fraction) {
        return Vec::new();
    }
    let mut candidates = Vec::new();
    let mut pos = 0;
    for &(_, dur) in segs {
        if dur >= 2 {
            candidates.push((pos, pos + dur));
        }
        pos += dur;
    }
    if candidates.is_empty() {
        return Vec::new();
    }
    vec![candidates[rng.gen_range(0..candidates.len())]]
}

/// Sample a full synthetic corpus. Equal seeds give equal corpora down to the
/// last bit; everything is drawn from one seeded stream in a fixed order
/// (tables, then vectors, then unpaired sentences, then pairs).
pub fn synthesize(config: &SynthConfig, seed: u64) -> Result<SynthCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = GroundTruthHsmm::new_random(config.k, config.d_max, config.v, config.gain, &mut rng)?;

    let vectors: Vec<(String, Vec<f64>)> = (0..config.v)
        .map(|i| {
            let vec = (0..config.vector_dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            (word(i), vec)
        })
        .collect();

    let mut unpaired = Vec::with_capacity(config.n_unpaired);
    let mut unpaired_segs = Vec::with_capacity(config.n_unpaired);
    for _ in 0..config.n_unpaired {
        let (tokens, segs) = truth.sample_sentence(config.min_segments, config.max_segments, &mut rng);
        let spans = maybe_span(&segs, config.span_fraction, &mut rng);
        unpaired.push((render(&tokens), spans));
        unpaired_segs.push(segs);
    }

    let mut paired = Vec::with_capacity(config.n_paired);
    for _ in 0..config.n_paired {
        let (tokens, segs) = truth.sample_sentence(config.min_segments, config.max_segments, &mut rng);
        let spans = maybe_span(&segs, config.span_fraction, &mut rng);
        let text = render(&tokens);
        paired.push((text.clone(), text, spans));
    }

    Ok(SynthCorpus { truth, unpaired, unpaired_segs, paired, vectors })
}

#[derive(Serialize)]
struct UnpairedRecord<'a> {
    text: &'a str,
    spans: &'a [(usize, usize)],
}

#[derive(Serialize)]
struct PairedRecord<'a> {
    message: &'a str,
    response: &'a str,
    response_spans: &'a [(usize, usize)],
}

/// The persisted ground truth: the tables plus the true segmentation of each
/// unpaired sentence, enough to rerun recovery scoring from files alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub model: GroundTruthHsmm,
    pub unpaired_segmentations: Vec<Segmentation>,
}

/// Write `unpaired.jsonl`, `paired.jsonl`, `truth.json`, and `vectors.txt`
/// under `dir` (created if missing). Output bytes depend only on the corpus.
pub fn write_files(corpus: &SynthCorpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let write = |name: &str, body: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(path.display().to_string(), e))
    };

    let mut unpaired = String::new();
    for (text, spans) in &corpus.unpaired {
        let rec = UnpairedRecord { text, spans };
        unpaired.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        unpaired.push('\n');
    }
    write("unpaired.jsonl", unpaired)?;

    let mut paired = String::new();
    for (message, response, spans) in &corpus.paired {
        let rec = PairedRecord { message, response, response_spans: spans };
        paired.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        paired.push('\n');
    }
    write("paired.jsonl", paired)?;

    let truth = TruthFile {
        model: corpus.truth.clone(),
        unpaired_segmentations: corpus.unpaired_segs.clone(),
    };
    write("truth.json", serde_json::to_string_pretty(&truth).expect("truth serializes"))?;

    let dim = corpus.vectors.first().map_or(0, |(_, v)| v.len());
    let mut vectors = format!("{} {}\n", corpus.vectors.len(), dim);
    for (token, vec) in &corpus.vectors {
        vectors.push_str(token);
        for x in vec {
            vectors.push_str(&format!(" {x:.6}"));
        }
        vectors.push('\n');
    }
    write("vectors.txt", vectors)
}
