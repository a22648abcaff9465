//! Neural hidden semi-Markov model over token sequences.
//!
//! States carry embeddings; transitions are a softmax over embedding dot
//! products plus a learned bias with the diagonal fixed at `-inf` (no
//! self-transitions, hence `K >= 2`). Durations are uniform on `{1..D}`.
//! Each segment's tokens are emitted by a gated recurrent cell whose hidden
//! state restarts per segment, gated per state, and projected to the
//! vocabulary.
//!
//! The exact marginal likelihood is computed by the backward algorithm in
//! log space; the best segmentation by a constrained Viterbi pass. Both
//! respect protected spans: no segment boundary may fall strictly inside a
//! protected token range.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ProtectedSpans, TokenSeq, UnpairedExample, SEGSTART};
use crate::error::{Error, Result};
use crate::math::{self, Mat};
use crate::optim::Adam;
use crate::rnn::{GruCell, GruVars};
use crate::tape::{Grads, Tape, Var};
use crate::trainer::{LogSink, TrainConfig};

/// All trainable quantities of the segment model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HsmmParams {
    /// State count; at least 2 because self-transitions are disabled.
    pub k: usize,
    /// Maximum segment duration `D`.
    pub d_max: usize,
    pub d1: usize,
    pub d2: usize,
    pub d3: usize,
    /// Vocabulary size `V`.
    pub vocab: usize,
    /// `K x d1` state embeddings.
    pub state_embeddings: Mat,
    /// `K x K` transition bias; diagonal fixed at `-inf`, never updated.
    pub transition_bias: Mat,
    /// Length-`K` logits of the initial-state distribution.
    pub init_logits: Vec<f64>,
    /// `K x d2` per-state output gates.
    pub gates: Mat,
    /// Segment emission recurrence; input `[state_emb; prev_word_emb]`.
    pub emission_cell: GruCell,
    /// `V x d3` word embeddings.
    pub word_embeddings: Mat,
    /// `V x d2` output projection.
    pub out_w: Mat,
    /// Length-`V` output bias.
    pub out_b: Vec<f64>,
}

impl HsmmParams {
    /// Random initialization on the f32 grid. Initial-state logits start at
    /// zero (uniform); the transition-bias diagonal is `-inf` from the start.
    pub fn new_seeded<R: Rng>(
        k: usize,
        d_max: usize,
        d1: usize,
        d2: usize,
        d3: usize,
        vocab: usize,
        rng: &mut R,
    ) -> Self {
        assert!(k >= 2, "need K >= 2 with self-transitions disabled");
        assert!(d_max >= 1);
        let scale = 0.1;
        let mut transition_bias =
            Mat::from_vec(k, k, math::uniform_init(rng, k * k, scale));
        for i in 0..k {
            transition_bias.set(i, i, f64::NEG_INFINITY);
        }
        HsmmParams {
            k,
            d_max,
            d1,
            d2,
            d3,
            vocab,
            state_embeddings: Mat::from_vec(k, d1, math::uniform_init(rng, k * d1, scale)),
            transition_bias,
            init_logits: vec![0.0; k],
            gates: Mat::from_vec(k, d2, math::uniform_init(rng, k * d2, scale)),
            emission_cell: GruCell::new_seeded(d1 + d3, d2, rng),
            word_embeddings: Mat::from_vec(vocab, d3, math::uniform_init(rng, vocab * d3, scale)),
            out_w: Mat::from_vec(vocab, d2, math::uniform_init(rng, vocab * d2, scale)),
            out_b: vec![0.0; vocab],
        }
    }

    /// Same shapes, all zeros (transition diagonal too): a gradient bucket.
    pub fn zeros_like(&self) -> Self {
        HsmmParams {
            k: self.k,
            d_max: self.d_max,
            d1: self.d1,
            d2: self.d2,
            d3: self.d3,
            vocab: self.vocab,
            state_embeddings: Mat::zeros(self.k, self.d1),
            transition_bias: Mat::zeros(self.k, self.k),
            init_logits: vec![0.0; self.k],
            gates: Mat::zeros(self.k, self.d2),
            emission_cell: GruCell::zeros(self.d1 + self.d3, self.d2),
            word_embeddings: Mat::zeros(self.vocab, self.d3),
            out_w: Mat::zeros(self.vocab, self.d2),
            out_b: vec![0.0; self.vocab],
        }
    }

    /// Named views of every array, with shapes — the persistence order.
    pub fn arrays(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        vec![
            ("hsmm.state_embeddings", vec![self.k, self.d1], &self.state_embeddings.data),
            ("hsmm.transition_bias", vec![self.k, self.k], &self.transition_bias.data),
            ("hsmm.init_logits", vec![self.k], &self.init_logits),
            ("hsmm.gates", vec![self.k, self.d2], &self.gates.data),
            ("hsmm.emission.w_ih", vec![3 * self.d2, self.d1 + self.d3], &self.emission_cell.w_ih.data),
            ("hsmm.emission.w_hh", vec![3 * self.d2, self.d2], &self.emission_cell.w_hh.data),
            ("hsmm.emission.b_ih", vec![3 * self.d2], &self.emission_cell.b_ih),
            ("hsmm.emission.b_hh", vec![3 * self.d2], &self.emission_cell.b_hh),
            ("hsmm.word_embeddings", vec![self.vocab, self.d3], &self.word_embeddings.data),
            ("hsmm.out_w", vec![self.vocab, self.d2], &self.out_w.data),
            ("hsmm.out_b", vec![self.vocab], &self.out_b),
        ]
    }

    /// Mutable views in the same order as [`HsmmParams::arrays`].
    pub fn arrays_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("hsmm.state_embeddings", &mut self.state_embeddings.data),
            ("hsmm.transition_bias", &mut self.transition_bias.data),
            ("hsmm.init_logits", &mut self.init_logits),
            ("hsmm.gates", &mut self.gates.data),
            ("hsmm.emission.w_ih", &mut self.emission_cell.w_ih.data),
            ("hsmm.emission.w_hh", &mut self.emission_cell.w_hh.data),
            ("hsmm.emission.b_ih", &mut self.emission_cell.b_ih),
            ("hsmm.emission.b_hh", &mut self.emission_cell.b_hh),
            ("hsmm.word_embeddings", &mut self.word_embeddings.data),
            ("hsmm.out_w", &mut self.out_w.data),
            ("hsmm.out_b", &mut self.out_b),
        ]
    }
}

/// A complete segmentation: `(state, duration)` per segment, durations
/// summing to the sequence length, adjacent states distinct.
pub type Segmentation = Vec<(usize, usize)>;

/// Row-stochastic `K x K` transition matrix; diagonal exactly zero.
pub fn transition_matrix(p: &HsmmParams) -> Mat {
    let mut out = Mat::zeros(p.k, p.k);
    for i in 0..p.k {
        let scores = transition_scores_row(p, i);
        let probs = math::softmax(&scores);
        out.row_mut(i).copy_from_slice(&probs);
    }
    out
}

/// Score row `i`: `e_j . e_i + b_{i,j}` over destination states `j`.
fn transition_scores_row(p: &HsmmParams, i: usize) -> Vec<f64> {
    let ei = p.state_embeddings.row(i);
    (0..p.k)
        .map(|j| math::dot(p.state_embeddings.row(j), ei) + p.transition_bias.get(i, j))
        .collect()
}

/// Log transition matrix (row-wise log-softmax of the scores).
fn log_transition(p: &HsmmParams) -> Mat {
    let mut out = Mat::zeros(p.k, p.k);
    for i in 0..p.k {
        let scores = transition_scores_row(p, i);
        out.row_mut(i).copy_from_slice(&math::log_softmax(&scores));
    }
    out
}

/// Cumulative per-prefix emission log-probabilities for one segment.
///
/// Runs the emission cell from a zero hidden state over `tokens`, feeding
/// `[state_emb; prev_word_emb]` per position with the segment-start surrogate
/// as the first previous word. Entry `d-1` of the result is
/// `log P(tokens[..d] | state, duration d)`.
///
/// Toy vocabularies smaller than the reserved-id range have no segment-start
/// row; the first previous-word input is then the zero vector. Real
/// vocabularies always contain the reserved tokens.
fn emission_chain(p: &HsmmParams, state: usize, tokens: &[u32]) -> Vec<f64> {
    let mut o = vec![0.0; p.d2];
    let mut prev: u32 = SEGSTART;
    let gate = p.gates.row(state);
    let e_state = p.state_embeddings.row(state);
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(tokens.len());
    let mut x = vec![0.0; p.d1 + p.d3];
    x[..p.d1].copy_from_slice(e_state);
    for &tok in tokens {
        if (prev as usize) < p.vocab {
            x[p.d1..].copy_from_slice(p.word_embeddings.row(prev as usize));
        } else {
            x[p.d1..].fill(0.0);
        }
        o = p.emission_cell.step(&o, &x);
        let v: Vec<f64> = gate.iter().zip(&o).map(|(g, h)| g * h).collect();
        let logits = p.out_w.affine(&v, &p.out_b);
        let lp = math::log_softmax(&logits)[tok as usize];
        acc += lp;
        out.push(acc);
        prev = tok;
    }
    out
}

/// `log P(tokens | state, duration = len(tokens))` for one segment.
pub fn emission_segment_logprob(p: &HsmmParams, state: usize, tokens: &[u32]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::EmptySentence);
    }
    if tokens.len() > p.d_max {
        return Err(Error::DurationOverflow { len: tokens.len(), max: p.d_max });
    }
    Ok(*emission_chain(p, state, tokens).last().unwrap())
}

/// `emis[t][j][d-1] = log P(seq[t..t+d] | state j, duration d)` for every
/// admissible start `t` and `d <= min(D, S - t)`.
fn emission_table(p: &HsmmParams, seq: &[u32]) -> Vec<Vec<Vec<f64>>> {
    let s = seq.len();
    (0..s)
        .map(|t| {
            let upto = p.d_max.min(s - t);
            (0..p.k).map(|j| emission_chain(p, j, &seq[t..t + upto])).collect()
        })
        .collect()
}

/// Admissible-cut mask: `allowed[c]` says a boundary between tokens `c-1` and
/// `c` is permitted. A cut `c` is forbidden iff some protected span `[a, b)`
/// has `a < c < b`. Spans longer than `d_max` cannot be kept intact by any
/// segmentation, so they are demoted to unprotected with a warning.
pub fn boundary_mask(spans: &ProtectedSpans, s: usize, d_max: usize) -> Vec<bool> {
    let mut allowed = vec![true; s + 1];
    for &(a, b) in spans {
        if b - a > d_max {
            log::warn!(
                "protected span [{a},{b}) longer than max duration {d_max}; demoted to unprotected"
            );
            continue;
        }
        for c in allowed.iter_mut().take(b).skip(a + 1) {
            *c = false;
        }
    }
    allowed
}

/// Exact marginal log-likelihood over all admissible segmentations, by the
/// backward recursion in log space.
pub fn backward_marginal_loglik(
    p: &HsmmParams,
    seq: &TokenSeq,
    spans: &ProtectedSpans,
) -> Result<f64> {
    if seq.is_empty() {
        return Err(Error::EmptySentence);
    }
    let s = seq.len();
    let allowed = boundary_mask(spans, s, p.d_max);
    let emis = emission_table(p, seq);
    let log_a = log_transition(p);
    let log_init = math::log_softmax(&p.init_logits);
    let log_dur = -(p.d_max as f64).ln();

    // beta[t][i]: mass of suffix after boundary t given previous state i.
    // beta_star[t][j]: same but with the next segment's state fixed to j.
    let mut beta = vec![vec![f64::NEG_INFINITY; p.k]; s + 1];
    let mut beta_star = vec![vec![f64::NEG_INFINITY; p.k]; s];
    beta[s] = vec![0.0; p.k];
    for t in (0..s).rev() {
        if !allowed[t] {
            continue; // never reachable as a segment start
        }
        for j in 0..p.k {
            let mut terms = Vec::with_capacity(p.d_max);
            for d in 1..=p.d_max.min(s - t) {
                if !allowed[t + d] {
                    continue;
                }
                // Order of addition mirrors the taped twin exactly so both
                // paths produce bit-identical likelihoods.
                let body = emis[t][j][d - 1] + log_dur;
                terms.push(if t + d == s { body } else { beta[t + d][j] + body });
            }
            beta_star[t][j] = math::logsumexp(&terms);
        }
        if t > 0 {
            for i in 0..p.k {
                let row = log_a.row(i);
                let terms: Vec<f64> =
                    (0..p.k).map(|j| beta_star[t][j] + row[j]).collect();
                beta[t][i] = math::logsumexp(&terms);
            }
        }
    }

    let terms: Vec<f64> = (0..p.k).map(|j| beta_star[0][j] + log_init[j]).collect();
    let ll = math::logsumexp(&terms);
    if ll == f64::NEG_INFINITY {
        return Err(Error::InfeasibleConstraints);
    }
    if !ll.is_finite() {
        return Err(Error::Numerical(format!("marginal log-likelihood is {ll}")));
    }
    Ok(ll)
}

/// Highest-joint-probability segmentation under the same constraints.
///
/// Ties break toward the longer earliest segment, then the smaller state
/// index — realized by scanning candidates in `(duration desc, state asc)`
/// order with a strict improvement test, which makes the preference
/// inductive over suffixes.
pub fn viterbi_segment(
    p: &HsmmParams,
    seq: &TokenSeq,
    spans: &ProtectedSpans,
) -> Result<Segmentation> {
    if seq.is_empty() {
        return Err(Error::EmptySentence);
    }
    let s = seq.len();
    let allowed = boundary_mask(spans, s, p.d_max);
    let emis = emission_table(p, seq);
    let log_a = log_transition(p);
    let log_init = math::log_softmax(&p.init_logits);
    let log_dur = -(p.d_max as f64).ln();

    // best[t][i]: best suffix score from boundary t with previous state i;
    // back[t][i]: the (duration, state) that attains it.
    let mut best = vec![vec![f64::NEG_INFINITY; p.k]; s + 1];
    let mut back = vec![vec![(0usize, 0usize); p.k]; s + 1];
    best[s] = vec![0.0; p.k];
    for t in (1..s).rev() {
        if !allowed[t] {
            continue;
        }
        for i in 0..p.k {
            let row = log_a.row(i);
            let mut top = f64::NEG_INFINITY;
            let mut arg = (0usize, 0usize);
            for d in (1..=p.d_max.min(s - t)).rev() {
                if !allowed[t + d] {
                    continue;
                }
                for j in 0..p.k {
                    if j == i {
                        continue;
                    }
                    let tail = best[t + d][j];
                    if tail == f64::NEG_INFINITY {
                        continue;
                    }
                    let cand = row[j] + log_dur + emis[t][j][d - 1] + tail;
                    if cand > top {
                        top = cand;
                        arg = (d, j);
                    }
                }
            }
            best[t][i] = top;
            back[t][i] = arg;
        }
    }

    // First segment: no previous state, initial distribution instead.
    let mut top = f64::NEG_INFINITY;
    let mut arg = (0usize, 0usize);
    for d in (1..=p.d_max.min(s)).rev() {
        if !allowed[d] {
            continue;
        }
        for j in 0..p.k {
            let tail = best[d][j];
            if tail == f64::NEG_INFINITY {
                continue;
            }
            let cand = log_init[j] + log_dur + emis[0][j][d - 1] + tail;
            if cand > top {
                top = cand;
                arg = (d, j);
            }
        }
    }
    if top == f64::NEG_INFINITY {
        return Err(Error::InfeasibleConstraints);
    }

    let mut segs = Vec::new();
    let (mut d, mut j) = arg;
    let mut t = 0usize;
    loop {
        segs.push((j, d));
        t += d;
        if t == s {
            break;
        }
        let (nd, nj) = back[t][j];
        d = nd;
        j = nj;
    }
    debug_assert_eq!(segs.iter().map(|&(_, l)| l).sum::<usize>(), s);
    Ok(segs)
}

/// Joint log-probability of a given segmentation of `seq`: initial state,
/// transitions, uniform durations, and segment emissions.
pub fn score_segmentation(p: &HsmmParams, seq: &TokenSeq, segs: &Segmentation) -> Result<f64> {
    let total: usize = segs.iter().map(|&(_, l)| l).sum();
    if total != seq.len() {
        return Err(Error::TemplateMismatch { len: seq.len(), total });
    }
    let log_a = log_transition(p);
    let log_init = math::log_softmax(&p.init_logits);
    let log_dur = -(p.d_max as f64).ln();
    let mut ll = 0.0;
    let mut t = 0usize;
    let mut prev: Option<usize> = None;
    for &(state, len) in segs {
        ll += match prev {
            None => log_init[state],
            Some(i) => log_a.get(i, state),
        };
        ll += log_dur;
        ll += emission_segment_logprob(p, state, &seq[t..t + len])?;
        t += len;
        prev = Some(state);
    }
    Ok(ll)
}

/// Tape handles for all model parameters.
pub struct HsmmVars {
    pub state_embeddings: Var,
    pub transition_bias: Var,
    pub init_logits: Var,
    pub gates: Var,
    pub emission: GruVars,
    pub word_embeddings: Var,
    pub out_w: Var,
    pub out_b: Var,
}

impl HsmmVars {
    pub fn leaf(tape: &mut Tape, p: &HsmmParams) -> Self {
        HsmmVars {
            state_embeddings: tape.leaf(p.state_embeddings.clone()),
            transition_bias: tape.leaf(p.transition_bias.clone()),
            init_logits: tape.leaf_vector(&p.init_logits),
            gates: tape.leaf(p.gates.clone()),
            emission: GruVars::leaf(tape, &p.emission_cell),
            word_embeddings: tape.leaf(p.word_embeddings.clone()),
            out_w: tape.leaf(p.out_w.clone()),
            out_b: tape.leaf_vector(&p.out_b),
        }
    }

    /// Accumulate this tape's gradients into a zeroed parameter bucket.
    pub fn add_grads_into(&self, grads: &Grads, acc: &mut HsmmParams, scale: f64) {
        let pairs: Vec<(Var, &mut [f64])> = vec![
            (self.state_embeddings, &mut acc.state_embeddings.data),
            (self.transition_bias, &mut acc.transition_bias.data),
            (self.init_logits, &mut acc.init_logits),
            (self.gates, &mut acc.gates.data),
            (self.emission.w_ih, &mut acc.emission_cell.w_ih.data),
            (self.emission.w_hh, &mut acc.emission_cell.w_hh.data),
            (self.emission.b_ih, &mut acc.emission_cell.b_ih),
            (self.emission.b_hh, &mut acc.emission_cell.b_hh),
            (self.word_embeddings, &mut acc.word_embeddings.data),
            (self.out_w, &mut acc.out_w.data),
            (self.out_b, &mut acc.out_b),
        ];
        for (var, slot) in pairs {
            if let Some(g) = grads.get(var) {
                for (o, x) in slot.iter_mut().zip(&g.data) {
                    *o += scale * x;
                }
            }
        }
    }
}

/// Taped twin of [`emission_chain`]: cumulative log-probabilities per prefix.
fn emission_chain_tape(
    tape: &mut Tape,
    vars: &HsmmVars,
    p: &HsmmParams,
    state: usize,
    tokens: &[u32],
) -> Vec<Var> {
    let e_state = tape.row(vars.state_embeddings, state);
    let gate = tape.row(vars.gates, state);
    let mut o = tape.leaf(Mat::vector(vec![0.0; p.d2]));
    let mut prev: u32 = SEGSTART;
    let mut acc: Option<Var> = None;
    let mut out = Vec::with_capacity(tokens.len());
    for &tok in tokens {
        let e_prev = if (prev as usize) < p.vocab {
            tape.row(vars.word_embeddings, prev as usize)
        } else {
            tape.leaf(Mat::vector(vec![0.0; p.d3]))
        };
        let x = tape.concat(&[e_state, e_prev]);
        o = vars.emission.step(tape, o, x);
        let v = tape.mul(gate, o);
        let logits = tape.affine(vars.out_w, v, vars.out_b);
        let ls = tape.log_softmax(logits);
        let lp = tape.index(ls, tok as usize);
        acc = Some(match acc {
            None => lp,
            Some(a) => tape.add(a, lp),
        });
        out.push(acc.unwrap());
        prev = tok;
    }
    out
}

/// Taped twin of [`backward_marginal_loglik`]; see there for the recursion.
/// Computes the same floating-point operations in the same order, so values
/// agree exactly with the plain implementation.
pub fn loglik_tape(
    tape: &mut Tape,
    vars: &HsmmVars,
    p: &HsmmParams,
    seq: &TokenSeq,
    spans: &ProtectedSpans,
) -> Result<Var> {
    if seq.is_empty() {
        return Err(Error::EmptySentence);
    }
    let s = seq.len();
    let allowed = boundary_mask(spans, s, p.d_max);
    let log_dur = -(p.d_max as f64).ln();

    let gram = tape.matmul_nt(vars.state_embeddings, vars.state_embeddings);
    let scores = tape.add(gram, vars.transition_bias);
    let log_a = tape.log_softmax_rows(scores);
    let log_a_rows: Vec<Var> = (0..p.k).map(|i| tape.row(log_a, i)).collect();
    let log_init = tape.log_softmax(vars.init_logits);

    // emis[t][j][d-1] as tape scalars.
    let emis: Vec<Vec<Vec<Var>>> = (0..s)
        .map(|t| {
            let upto = p.d_max.min(s - t);
            (0..p.k)
                .map(|j| emission_chain_tape(tape, vars, p, j, &seq[t..t + upto]))
                .collect()
        })
        .collect();

    let ninf = tape.leaf_scalar(f64::NEG_INFINITY);
    let mut beta: Vec<Vec<Var>> = vec![vec![ninf; p.k]; s + 1];
    let mut beta_star: Vec<Vec<Var>> = vec![vec![ninf; p.k]; s];
    let zero = tape.leaf_scalar(0.0);
    beta[s] = vec![zero; p.k];
    for t in (0..s).rev() {
        if !allowed[t] {
            continue;
        }
        for j in 0..p.k {
            let mut terms = Vec::with_capacity(p.d_max);
            for d in 1..=p.d_max.min(s - t) {
                if !allowed[t + d] {
                    continue;
                }
                let e = emis[t][j][d - 1];
                let shifted = tape.affine_scalar(e, 1.0, log_dur);
                let term = if t + d == s {
                    shifted
                } else {
                    tape.add(beta[t + d][j], shifted)
                };
                terms.push(term);
            }
            beta_star[t][j] = if terms.is_empty() {
                ninf
            } else {
                let stacked = tape.concat(&terms);
                tape.logsumexp(stacked)
            };
        }
        if t > 0 {
            for i in 0..p.k {
                let bstar = tape.concat(&beta_star[t]);
                let sum = tape.add(bstar, log_a_rows[i]);
                beta[t][i] = tape.logsumexp(sum);
            }
        }
    }

    let bstar0 = tape.concat(&beta_star[0]);
    let with_init = tape.add(bstar0, log_init);
    let ll = tape.logsumexp(with_init);
    let v = tape.value(ll).item();
    if v == f64::NEG_INFINITY {
        return Err(Error::InfeasibleConstraints);
    }
    if !v.is_finite() {
        return Err(Error::Numerical(format!("marginal log-likelihood is {v}")));
    }
    Ok(ll)
}

/// Mean negative log-likelihood over a batch together with its gradient.
/// The transition-bias diagonal always receives exactly zero gradient.
pub fn nll_gradient(p: &HsmmParams, batch: &[UnpairedExample]) -> Result<(f64, HsmmParams)> {
    if batch.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut acc = p.zeros_like();
    let mut total = 0.0;
    let scale = -1.0 / batch.len() as f64;
    for ex in batch {
        let mut tape = Tape::new();
        let vars = HsmmVars::leaf(&mut tape, p);
        let ll = loglik_tape(&mut tape, &vars, p, &ex.text, &ex.spans)?;
        total += scale * tape.value(ll).item();
        let grads = tape.backward(ll);
        vars.add_grads_into(&grads, &mut acc, scale);
    }
    if !total.is_finite() {
        return Err(Error::Numerical(format!("batch NLL is {total}")));
    }
    for i in 0..p.k {
        acc.transition_bias.set(i, i, 0.0);
    }
    let bad = acc.arrays().iter().any(|(_, _, a)| a.iter().any(|x| !x.is_finite()));
    if bad {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    Ok((total, acc))
}

/// Mean per-token perplexity of a corpus under the marginal likelihood.
pub fn corpus_perplexity(p: &HsmmParams, corpus: &[UnpairedExample]) -> Result<f64> {
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for ex in corpus {
        nll -= backward_marginal_loglik(p, &ex.text, &ex.spans)?;
        tokens += ex.text.len();
    }
    Ok((nll / tokens.max(1) as f64).exp())
}

/// Deterministic train/validation split: every `stride`-th example (derived
/// from `val_fraction`) goes to validation. A corpus too small to populate
/// the validation side validates on the training set instead.
pub fn split_validation<T: Clone>(items: &[T], val_fraction: f64) -> (Vec<T>, Vec<T>) {
    if val_fraction <= 0.0 {
        return (items.to_vec(), items.to_vec());
    }
    let stride = (1.0 / val_fraction).round().max(2.0) as usize;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, it) in items.iter().enumerate() {
        if i % stride == stride - 1 {
            val.push(it.clone());
        } else {
            train.push(it.clone());
        }
    }
    if val.is_empty() || train.is_empty() {
        return (items.to_vec(), items.to_vec());
    }
    (train, val)
}

/// Maximum-likelihood training on unpaired data with Adam and early stopping
/// on validation perplexity. Returns the best-validation parameters; with
/// `hsmm_epochs = 0` the seeded initialization is returned unchanged.
pub fn train_nhsmm(
    corpus: &[UnpairedExample],
    vocab_size: usize,
    config: &TrainConfig,
    log: &mut LogSink,
) -> Result<HsmmParams> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    config.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = HsmmParams::new_seeded(
        config.k, config.d_max, config.d1, config.d2, config.d3, vocab_size, &mut rng,
    );
    if config.hsmm_epochs == 0 {
        return Ok(params);
    }

    let (train, val) = split_validation(corpus, config.val_fraction);
    let mut opt = Adam::new(config.lr_hsmm);
    let mut best = params.clone();
    let mut best_ppl = f64::INFINITY;
    let mut stale = 0usize;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.hsmm_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.hsmm_batch.max(1)) {
            let batch: Vec<UnpairedExample> =
                chunk.iter().map(|&i| train[i].clone()).collect();
            let (loss, grads) = nll_gradient(&params, &batch)?;
            epoch_loss += loss;
            batches += 1;
            apply_hsmm_step(&mut opt, &mut params, &grads);
        }
        let ppl = corpus_perplexity(&params, &val)?;
        log.event(serde_json::json!({
            "phase": "train-hsmm",
            "epoch": epoch,
            "mean_batch_nll": epoch_loss / batches.max(1) as f64,
            "val_perplexity": ppl,
        }));
        if ppl < best_ppl * (1.0 - config.rel_tol) {
            best_ppl = ppl;
            best = params.clone();
            stale = 0;
        } else {
            if ppl < best_ppl {
                best_ppl = ppl;
                best = params.clone();
            }
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok(best)
}

/// One Adam step over all arrays; gradient and parameter orders align.
pub fn apply_hsmm_step(opt: &mut Adam, params: &mut HsmmParams, grads: &HsmmParams) {
    let gvecs: Vec<Vec<f64>> =
        grads.arrays().iter().map(|(_, _, a)| a.to_vec()).collect();
    let mut pairs: Vec<(&str, &mut [f64], &[f64])> = Vec::new();
    for ((name, slot), g) in params.arrays_mut().into_iter().zip(gvecs.iter()) {
        pairs.push((name, slot, g));
    }
    opt.step(&mut pairs);
}
