//! Automatic evaluation: BLEU-1 (clipped unigram precision with brevity
//! penalty), ROUGE-L (LCS F-measure, β = 1), and three embedding-based
//! scores (Average, Extrema, Greedy) over pretrained word vectors.
//!
//! Sentence scores combine into corpus scores by plain arithmetic mean.

use std::collections::HashMap;
use std::fs;
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// BLEU-1: clipped unigram precision times the brevity penalty against the
/// closest reference length (ties broken toward the shorter reference).
/// An empty hypothesis (or an empty reference list) scores 0.
pub fn bleu1<T: Eq + Hash>(hypothesis: &[T], references: &[&[T]]) -> f64 {
    if hypothesis.is_empty() || references.is_empty() {
        return 0.0;
    }
    // Per-token clip limit: the maximum count across references.
    let mut limit: HashMap<&T, usize> = HashMap::new();
    for reference in references {
        let mut counts: HashMap<&T, usize> = HashMap::new();
        for tok in reference.iter() {
            *counts.entry(tok).or_insert(0) += 1;
        }
        for (tok, c) in counts {
            let slot = limit.entry(tok).or_insert(0);
            *slot = (*slot).max(c);
        }
    }
    let mut hyp_counts: HashMap<&T, usize> = HashMap::new();
    for tok in hypothesis {
        *hyp_counts.entry(tok).or_insert(0) += 1;
    }
    let clipped: usize = hyp_counts
        .iter()
        .map(|(tok, &c)| c.min(limit.get(*tok).copied().unwrap_or(0)))
        .sum();
    let c = hypothesis.len();
    let precision = clipped as f64 / c as f64;

    let r = references
        .iter()
        .map(|reference| reference.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("non-empty reference list");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    precision * bp
}

/// ROUGE-L: the balanced F-measure of the longest common subsequence,
/// `2PR / (P + R)` with `P = LCS/|hyp|`, `R = LCS/|ref|`. Zero when either
/// side is empty or the LCS is empty.
pub fn rouge_l<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> f64 {
    if hypothesis.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let n = hypothesis.len();
    let m = reference.len();
    // Classic LCS table with a rolling row.
    let mut prev = vec![0usize; m + 1];
    let mut row = vec![0usize; m + 1];
    for i in 1..=n {
        for j in 1..=m {
            row[j] = if hypothesis[i - 1] == reference[j - 1] {
                prev[j - 1] + 1
            } else {
                prev[j].max(row[j - 1])
            };
        }
        std::mem::swap(&mut prev, &mut row);
    }
    let lcs = prev[m];
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / n as f64;
    let r = lcs as f64 / m as f64;
    2.0 * p * r / (p + r)
}

/// Pretrained word vectors: a fixed dimension and a token → vector map.
/// Out-of-vocabulary tokens resolve to the zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVectors {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl WordVectors {
    pub fn new(dim: usize) -> Self {
        WordVectors { dim, vectors: HashMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Insert one token's vector. Dimension mismatches are config errors.
    pub fn insert(&mut self, token: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::InvalidConfig(format!(
                "vector of dimension {} in a {}-dimensional vector table",
                vector.len(),
                self.dim
            )));
        }
        self.vectors.insert(token.into(), vector);
        Ok(())
    }

    /// The vector for a token, or `None` for out-of-vocabulary tokens.
    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(|v| v.as_slice())
    }

    /// Load the text format: one token per line followed by `dim` decimal
    /// floats, all space-separated. An optional first line holding exactly
    /// two integers ("count dim") is skipped.
    pub fn load(path: &Path) -> Result<WordVectors> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut dim: Option<usize> = None;
        let mut vectors = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if i == 0 && fields.len() == 2 {
                if let (Ok(_), Ok(_)) =
                    (fields[0].parse::<usize>(), fields[1].parse::<usize>())
                {
                    continue;
                }
            }
            if fields.len() < 2 {
                return Err(Error::parse(line_no, "expected a token and at least one float"));
            }
            let token = fields[0].to_string();
            let mut vector = Vec::with_capacity(fields.len() - 1);
            for f in &fields[1..] {
                let x: f64 = f
                    .parse()
                    .map_err(|_| Error::parse(line_no, format!("bad float {f:?}")))?;
                vector.push(x);
            }
            match dim {
                None => dim = Some(vector.len()),
                Some(d) if d != vector.len() => {
                    return Err(Error::parse(
                        line_no,
                        format!("vector of dimension {} in a {d}-dimensional file", vector.len()),
                    ));
                }
                Some(_) => {}
            }
            vectors.insert(token, vector);
        }
        let dim = dim.ok_or(Error::EmptyCorpus)?;
        Ok(WordVectors { dim, vectors })
    }
}

/// Map a sentence to per-token vectors (zero for OOV) and the count of
/// in-vocabulary tokens.
fn sentence_vectors(tokens: &[String], v: &WordVectors) -> (Vec<Vec<f64>>, usize) {
    let mut out = Vec::with_capacity(tokens.len());
    let mut known = 0usize;
    for tok in tokens {
        match v.get(tok) {
            Some(vec) => {
                known += 1;
                out.push(vec.to_vec());
            }
            None => out.push(vec![0.0; v.dim()]),
        }
    }
    (out, known)
}

fn mean_vector(vectors: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v.iter()) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= vectors.len() as f64;
    }
    mean
}

/// Per-dimension extreme value: the entry of largest absolute value across
/// the sentence, sign preserved; ties keep the earliest token's entry.
fn extrema_vector(vectors: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut ext = vec![0.0; dim];
    let mut best = vec![-1.0; dim];
    for v in vectors {
        for d in 0..dim {
            if v[d].abs() > best[d] {
                best[d] = v[d].abs();
                ext[d] = v[d];
            }
        }
    }
    ext
}

/// Mean over `from` tokens of the best cosine match among `to` tokens.
fn greedy_direction(from: &[Vec<f64>], to: &[Vec<f64>]) -> f64 {
    let total: f64 = from
        .iter()
        .map(|f| {
            to.iter().map(|t| math::cosine(f, t)).fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    total / from.len() as f64
}

/// The three embedding scores (average, extrema, greedy), each in [−1, 1].
/// A side whose every token is out of vocabulary has no defined score.
pub fn embedding_scores(
    hypothesis: &[String],
    reference: &[String],
    vectors: &WordVectors,
) -> Result<(f64, f64, f64)> {
    if hypothesis.is_empty() || reference.is_empty() {
        return Err(Error::EmptySentence);
    }
    let (hv, h_known) = sentence_vectors(hypothesis, vectors);
    let (rv, r_known) = sentence_vectors(reference, vectors);
    if h_known == 0 || r_known == 0 {
        return Err(Error::MetricUndefined(
            "every token on one side is out of vocabulary".into(),
        ));
    }
    let dim = vectors.dim();
    let average = math::cosine(&mean_vector(&hv, dim), &mean_vector(&rv, dim));
    let extrema = math::cosine(&extrema_vector(&hv, dim), &extrema_vector(&rv, dim));
    let greedy = 0.5 * (greedy_direction(&hv, &rv) + greedy_direction(&rv, &hv));
    Ok((average, extrema, greedy))
}

/// Corpus-level evaluation report; every score is the arithmetic mean of
/// sentence-level scores. Pairs whose embedding scores are undefined (all
/// tokens OOV on a side) are excluded from the embedding means only, and
/// counted in `embedding_skipped`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub rouge_l: f64,
    pub average: f64,
    pub extrema: f64,
    pub greedy: f64,
    pub n_examples: usize,
    pub embedding_skipped: usize,
}

/// Evaluate aligned hypothesis/reference pairs. Both slices must be the same
/// non-zero length; every embedding pair undefined is an error.
pub fn evaluate_corpus(
    hypotheses: &[Vec<String>],
    references: &[Vec<String>],
    vectors: &WordVectors,
) -> Result<EvalReport> {
    if hypotheses.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if hypotheses.len() != references.len() {
        return Err(Error::InvalidConfig(format!(
            "{} hypotheses against {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let n = hypotheses.len();
    let mut bleu_sum = 0.0;
    let mut rouge_sum = 0.0;
    let mut avg_sum = 0.0;
    let mut ext_sum = 0.0;
    let mut gre_sum = 0.0;
    let mut defined = 0usize;
    for (hyp, rf) in hypotheses.iter().zip(references.iter()) {
        bleu_sum += bleu1(hyp, &[rf.as_slice()]);
        rouge_sum += rouge_l(hyp, rf);
        match embedding_scores(hyp, rf, vectors) {
            Ok((a, e, g)) => {
                avg_sum += a;
                ext_sum += e;
                gre_sum += g;
                defined += 1;
            }
            Err(Error::MetricUndefined(_)) => {}
            Err(other) => return Err(other),
        }
    }
    if defined == 0 {
        return Err(Error::MetricUndefined(
            "embedding scores undefined for every pair".into(),
        ));
    }
    Ok(EvalReport {
        bleu1: bleu_sum / n as f64,
        rouge_l: rouge_sum / n as f64,
        average: avg_sum / defined as f64,
        extrema: ext_sum / defined as f64,
        greedy: gre_sum / defined as f64,
        n_examples: n,
        embedding_skipped: n - defined,
    })
}
