//! Template-conditioned encoder-decoder: encode the message with a gated
//! recurrence, drive the decoder with the template's gated emission vectors,
//! attend over the encoded message, and emit one token per template position.
//! Supports beam search, truncated-softmax rollouts, and teacher-forced
//! scoring with gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSeq, BOS};
use crate::error::{Error, Result};
use crate::math::{self, Mat};
use crate::nhsmm::HsmmParams;
use crate::rnn::{GruCell, GruVars};
use crate::tape::{Grads, Tape, Var};
use crate::templates::Template;

/// Full generator parameter bundle. The state and word embeddings are shared
/// with the segment model and frozen: they are serialized and used in the
/// forward pass but never receive gradient updates. The emission machinery
/// (`emission_cell`, `gates`) starts as a copy of the segment model's and is
/// fine-tuned freely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub d1: usize,
    pub d2: usize,
    pub d3: usize,
    pub vocab: usize,
    /// Message encoder; input `d3`, hidden `d2`, `h_0 = 0`.
    pub encoder_cell: GruCell,
    /// Response decoder; input `d2` (the gated emission vector), hidden `d2`.
    pub decoder_cell: GruCell,
    /// Attention score `v . tanh(W s_t + U h_i + b)`.
    pub attn_w: Mat,
    pub attn_u: Mat,
    pub attn_b: Vec<f64>,
    pub attn_v: Vec<f64>,
    /// Output projection over `[s_t; c_t]`.
    pub out_w: Mat,
    pub out_b: Vec<f64>,
    /// Fine-tunable copy of the segment model's emission recurrence.
    pub emission_cell: GruCell,
    /// Fine-tunable copy of the per-state output gates.
    pub gates: Mat,
    /// Frozen `K x d1` state embeddings.
    pub state_embeddings: Mat,
    /// Frozen `V x d3` word embeddings.
    pub word_embeddings: Mat,
}

/// Array names that must stay bit-identical across generator training.
pub const FROZEN_ARRAYS: [&str; 2] = ["gen.state_embeddings", "gen.word_embeddings"];

impl GeneratorParams {
    /// Seed a generator around a trained segment model: emission machinery
    /// copied for fine-tuning, embeddings shared and frozen, everything else
    /// fresh. Requires a real vocabulary (reserved ids present) so that BOS
    /// can be embedded.
    pub fn from_hsmm<R: Rng>(hsmm: &HsmmParams, rng: &mut R) -> Result<Self> {
        if hsmm.vocab < 4 {
            return Err(Error::InvalidConfig(format!(
                "generator needs the reserved token block (vocab >= 4), got V = {}",
                hsmm.vocab
            )));
        }
        let (d1, d2, d3, v) = (hsmm.d1, hsmm.d2, hsmm.d3, hsmm.vocab);
        let scale = 0.1;
        Ok(GeneratorParams {
            d1,
            d2,
            d3,
            vocab: v,
            encoder_cell: GruCell::new_seeded(d3, d2, rng),
            decoder_cell: GruCell::new_seeded(d2, d2, rng),
            attn_w: Mat::from_vec(d2, d2, math::uniform_init(rng, d2 * d2, scale)),
            attn_u: Mat::from_vec(d2, d2, math::uniform_init(rng, d2 * d2, scale)),
            attn_b: vec![0.0; d2],
            attn_v: math::uniform_init(rng, d2, scale),
            out_w: Mat::from_vec(v, 2 * d2, math::uniform_init(rng, v * 2 * d2, scale)),
            out_b: vec![0.0; v],
            emission_cell: hsmm.emission_cell.clone(),
            gates: hsmm.gates.clone(),
            state_embeddings: hsmm.state_embeddings.clone(),
            word_embeddings: hsmm.word_embeddings.clone(),
        })
    }

    /// Every array, frozen ones included, in persistence order.
    pub fn arrays(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let d2 = self.d2;
        vec![
            ("gen.encoder.w_ih", vec![3 * d2, self.d3], &self.encoder_cell.w_ih.data),
            ("gen.encoder.w_hh", vec![3 * d2, d2], &self.encoder_cell.w_hh.data),
            ("gen.encoder.b_ih", vec![3 * d2], &self.encoder_cell.b_ih),
            ("gen.encoder.b_hh", vec![3 * d2], &self.encoder_cell.b_hh),
            ("gen.decoder.w_ih", vec![3 * d2, d2], &self.decoder_cell.w_ih.data),
            ("gen.decoder.w_hh", vec![3 * d2, d2], &self.decoder_cell.w_hh.data),
            ("gen.decoder.b_ih", vec![3 * d2], &self.decoder_cell.b_ih),
            ("gen.decoder.b_hh", vec![3 * d2], &self.decoder_cell.b_hh),
            ("gen.attn_w", vec![d2, d2], &self.attn_w.data),
            ("gen.attn_u", vec![d2, d2], &self.attn_u.data),
            ("gen.attn_b", vec![d2], &self.attn_b),
            ("gen.attn_v", vec![d2], &self.attn_v),
            ("gen.out_w", vec![self.vocab, 2 * d2], &self.out_w.data),
            ("gen.out_b", vec![self.vocab], &self.out_b),
            ("gen.emission.w_ih", vec![3 * d2, self.d1 + self.d3], &self.emission_cell.w_ih.data),
            ("gen.emission.w_hh", vec![3 * d2, d2], &self.emission_cell.w_hh.data),
            ("gen.emission.b_ih", vec![3 * d2], &self.emission_cell.b_ih),
            ("gen.emission.b_hh", vec![3 * d2], &self.emission_cell.b_hh),
            ("gen.gates", vec![self.gates.rows, d2], &self.gates.data),
            ("gen.state_embeddings", vec![self.state_embeddings.rows, self.d1], &self.state_embeddings.data),
            ("gen.word_embeddings", vec![self.vocab, self.d3], &self.word_embeddings.data),
        ]
    }

    pub fn arrays_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("gen.encoder.w_ih", &mut self.encoder_cell.w_ih.data),
            ("gen.encoder.w_hh", &mut self.encoder_cell.w_hh.data),
            ("gen.encoder.b_ih", &mut self.encoder_cell.b_ih),
            ("gen.encoder.b_hh", &mut self.encoder_cell.b_hh),
            ("gen.decoder.w_ih", &mut self.decoder_cell.w_ih.data),
            ("gen.decoder.w_hh", &mut self.decoder_cell.w_hh.data),
            ("gen.decoder.b_ih", &mut self.decoder_cell.b_ih),
            ("gen.decoder.b_hh", &mut self.decoder_cell.b_hh),
            ("gen.attn_w", &mut self.attn_w.data),
            ("gen.attn_u", &mut self.attn_u.data),
            ("gen.attn_b", &mut self.attn_b),
            ("gen.attn_v", &mut self.attn_v),
            ("gen.out_w", &mut self.out_w.data),
            ("gen.out_b", &mut self.out_b),
            ("gen.emission.w_ih", &mut self.emission_cell.w_ih.data),
            ("gen.emission.w_hh", &mut self.emission_cell.w_hh.data),
            ("gen.emission.b_ih", &mut self.emission_cell.b_ih),
            ("gen.emission.b_hh", &mut self.emission_cell.b_hh),
            ("gen.gates", &mut self.gates.data),
            ("gen.state_embeddings", &mut self.state_embeddings.data),
            ("gen.word_embeddings", &mut self.word_embeddings.data),
        ]
    }

    /// Same shapes, all zeros: a gradient bucket.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, slot) in z.arrays_mut() {
            for x in slot.iter_mut() {
                *x = 0.0;
            }
        }
        z
    }
}

fn check_tokens(seq: &[u32], vocab: usize) -> Result<()> {
    for &t in seq {
        if t as usize >= vocab {
            return Err(Error::TokenOutOfRange { id: t, vocab });
        }
    }
    Ok(())
}

/// `(segment index, 1-based offset, state)` for each linear position.
fn positions(template: &Template) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::with_capacity(template.total_len());
    for (m, &(z, l)) in template.entries.iter().enumerate() {
        for k in 1..=l {
            out.push((m, k, z));
        }
    }
    out
}

/// Encode the message left to right; one hidden vector per token, `h_0 = 0`.
pub fn encode_message(p: &GeneratorParams, message: &TokenSeq) -> Result<Vec<Vec<f64>>> {
    if message.is_empty() {
        return Err(Error::EmptySentence);
    }
    check_tokens(message, p.vocab)?;
    let mut h = vec![0.0; p.d2];
    let mut out = Vec::with_capacity(message.len());
    for &tok in message {
        h = p.encoder_cell.step(&h, p.word_embeddings.row(tok as usize));
        out.push(h.clone());
    }
    Ok(out)
}

/// Attention over the encoded message for one decoder state: scores
/// `v . tanh(W s_t + U h_i + b)`, softmax weights, and their convex
/// combination of the hidden vectors.
pub fn attention_context(
    p: &GeneratorParams,
    s_t: &[f64],
    h_x: &[Vec<f64>],
) -> (Vec<f64>, Vec<f64>) {
    assert!(!h_x.is_empty(), "attention needs at least one encoder state");
    let ws = p.attn_w.matvec(s_t);
    let mut scores = Vec::with_capacity(h_x.len());
    for h_i in h_x {
        let mut pre = p.attn_u.matvec(h_i);
        for (t, b) in pre.iter_mut().zip(&p.attn_b) {
            *t += b;
        }
        let th: Vec<f64> = ws.iter().zip(&pre).map(|(a, b)| (a + b).tanh()).collect();
        scores.push(math::dot(&p.attn_v, &th));
    }
    let alpha = math::softmax(&scores);
    let mut c = vec![0.0; p.d2];
    for (a, h_i) in alpha.iter().zip(h_x) {
        for (cj, hj) in c.iter_mut().zip(h_i) {
            *cj += a * hj;
        }
    }
    (c, alpha)
}

/// One decode step's pre-softmax logits plus the updated decoder and segment
/// hidden states. Shared by scoring, sampling, and search so every caller
/// computes bit-identical values.
fn step_logits(
    p: &GeneratorParams,
    s_prev: &[f64],
    template: &Template,
    m: usize,
    k: usize,
    prev_token: u32,
    o_prev: &[f64],
    h_x: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let total = template.total_len();
    if m >= template.entries.len() || k == 0 || k > template.entries[m].1 {
        let pos = template.entries[..m.min(template.entries.len())]
            .iter()
            .map(|&(_, l)| l)
            .sum::<usize>()
            + k;
        return Err(Error::TemplateExhausted { pos, total });
    }
    if prev_token as usize >= p.vocab {
        return Err(Error::TokenOutOfRange { id: prev_token, vocab: p.vocab });
    }
    let z = template.entries[m].0;
    let mut x = p.state_embeddings.row(z).to_vec();
    x.extend_from_slice(p.word_embeddings.row(prev_token as usize));
    let o_k = p.emission_cell.step(o_prev, &x);
    let v: Vec<f64> = p.gates.row(z).iter().zip(&o_k).map(|(g, o)| g * o).collect();
    let s_t = p.decoder_cell.step(s_prev, &v);
    let (c, _alpha) = attention_context(p, &s_t, h_x);
    let mut cat = s_t.clone();
    cat.extend_from_slice(&c);
    let logits = p.out_w.affine(&cat, &p.out_b);
    Ok((logits, s_t, o_k))
}

/// One teacher-driven decode step: the token distribution at template
/// position `(m, k)` (segment index, 1-based offset), plus the updated
/// decoder state and segment hidden state. The computation order is the
/// model's: gated emission vector, then decoder state, then attention with
/// the new state, then the output softmax.
pub fn decode_step(
    p: &GeneratorParams,
    s_prev: &[f64],
    template: &Template,
    m: usize,
    k: usize,
    prev_token: u32,
    o_prev: &[f64],
    h_x: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (logits, s_t, o_k) = step_logits(p, s_prev, template, m, k, prev_token, o_prev, h_x)?;
    Ok((math::softmax(&logits), s_t, o_k))
}

struct BeamEntry {
    tokens: TokenSeq,
    score: f64,
    s: Vec<f64>,
    o: Vec<f64>,
}

/// Beam-search decode. The output length is exactly the template's total
/// length; the first decoder input is BOS; score ties are broken toward the
/// lexicographically smaller token sequence, i.e. the smaller token id at the
/// first divergence.
pub fn generate_beam(
    p: &GeneratorParams,
    message: &TokenSeq,
    template: &Template,
    beam_width: usize,
) -> Result<TokenSeq> {
    if beam_width == 0 {
        return Err(Error::InvalidConfig("beam_width must be at least 1".into()));
    }
    let h_x = encode_message(p, message)?;
    let s0 = h_x.last().expect("non-empty message").clone();
    let mut beam = vec![BeamEntry {
        tokens: Vec::new(),
        score: 0.0,
        s: s0,
        o: vec![0.0; p.d2],
    }];
    let zeros = vec![0.0; p.d2];
    for &(m, k, _z) in &positions(template) {
        let mut cands: Vec<(f64, TokenSeq, usize)> = Vec::new();
        let mut stepped: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(beam.len());
        for entry in &beam {
            let prev = entry.tokens.last().copied().unwrap_or(BOS);
            let o_prev = if k == 1 { &zeros } else { &entry.o };
            let (logits, s_t, o_k) =
                step_logits(p, &entry.s, template, m, k, prev, o_prev, &h_x)?;
            let logdist = math::log_softmax(&logits);
            let parent = stepped.len();
            stepped.push((s_t, o_k));
            for (tok, &lp) in logdist.iter().enumerate() {
                let mut seq = entry.tokens.clone();
                seq.push(tok as u32);
                cands.push((entry.score + lp, seq, parent));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        cands.truncate(beam_width);
        beam = cands
            .into_iter()
            .map(|(score, tokens, parent)| BeamEntry {
                tokens,
                score,
                s: stepped[parent].0.clone(),
                o: stepped[parent].1.clone(),
            })
            .collect();
    }
    Ok(beam.remove(0).tokens)
}

/// Complete a (possibly empty) prefix by sampling each remaining position
/// from the renormalized top-`top_k` truncation of the step distribution.
/// The prefix is consumed teacher-forced so the recurrent states match it.
pub fn sample_rollout<R: Rng>(
    p: &GeneratorParams,
    message: &TokenSeq,
    template: &Template,
    prefix: &TokenSeq,
    top_k: usize,
    rng: &mut R,
) -> Result<TokenSeq> {
    if top_k == 0 {
        return Err(Error::InvalidConfig("top_k must be at least 1".into()));
    }
    let total = template.total_len();
    if prefix.len() > total {
        return Err(Error::TemplateMismatch { len: prefix.len(), total });
    }
    check_tokens(prefix, p.vocab)?;
    let h_x = encode_message(p, message)?;
    let mut s = h_x.last().expect("non-empty message").clone();
    let mut o = vec![0.0; p.d2];
    let zeros = vec![0.0; p.d2];
    let mut out = prefix.clone();
    for (t, &(m, k, _z)) in positions(template).iter().enumerate() {
        let prev = if t == 0 { BOS } else { out[t - 1] };
        let o_prev = if k == 1 { &zeros } else { &o };
        let (dist, s_t, o_k) = decode_step(p, &s, template, m, k, prev, o_prev, &h_x)?;
        s = s_t;
        o = o_k;
        if t < prefix.len() {
            continue;
        }
        // Deterministic truncation: probability descending, token id ascending.
        let mut order: Vec<usize> = (0..dist.len()).collect();
        order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
        order.truncate(top_k.min(dist.len()));
        let mass: f64 = order.iter().map(|&i| dist[i]).sum();
        // Drawing u in [0, mass) over the kept tokens equals drawing from the
        // renormalized truncated distribution.
        let u = rng.gen::<f64>() * mass;
        let mut acc = 0.0;
        let mut pick = *order.last().expect("top_k >= 1");
        for &i in &order {
            acc += dist[i];
            if u < acc {
                pick = i;
                break;
            }
        }
        out.push(pick as u32);
    }
    Ok(out)
}

/// Teacher-forced log-probability of `response` under the template.
pub fn sequence_logprob(
    p: &GeneratorParams,
    message: &TokenSeq,
    template: &Template,
    response: &TokenSeq,
) -> Result<f64> {
    let total = template.total_len();
    if response.len() != total {
        return Err(Error::TemplateMismatch { len: response.len(), total });
    }
    check_tokens(response, p.vocab)?;
    let h_x = encode_message(p, message)?;
    let mut s = h_x.last().expect("non-empty message").clone();
    let mut o = vec![0.0; p.d2];
    let zeros = vec![0.0; p.d2];
    let mut logprob = 0.0;
    for (t, &(m, k, _z)) in positions(template).iter().enumerate() {
        let prev = if t == 0 { BOS } else { response[t - 1] };
        let o_prev = if k == 1 { &zeros } else { &o };
        let (logits, s_t, o_k) = step_logits(p, &s, template, m, k, prev, o_prev, &h_x)?;
        let logdist = math::log_softmax(&logits);
        logprob += logdist[response[t] as usize];
        s = s_t;
        o = o_k;
    }
    Ok(logprob)
}

/// Leaf handles for every generator array on a tape. The frozen embeddings
/// are leaves too — their gradients are simply never applied.
pub struct GenVars {
    pub encoder: GruVars,
    pub decoder: GruVars,
    pub attn_w: Var,
    pub attn_u: Var,
    pub attn_b: Var,
    pub attn_v: Var,
    pub out_w: Var,
    pub out_b: Var,
    pub emission: GruVars,
    pub gates: Var,
    pub state_embeddings: Var,
    pub word_embeddings: Var,
}

impl GenVars {
    pub fn leaf(tape: &mut Tape, p: &GeneratorParams) -> Self {
        GenVars {
            encoder: GruVars::leaf(tape, &p.encoder_cell),
            decoder: GruVars::leaf(tape, &p.decoder_cell),
            attn_w: tape.leaf(p.attn_w.clone()),
            attn_u: tape.leaf(p.attn_u.clone()),
            attn_b: tape.leaf_vector(&p.attn_b),
            attn_v: tape.leaf_vector(&p.attn_v),
            out_w: tape.leaf(p.out_w.clone()),
            out_b: tape.leaf_vector(&p.out_b),
            emission: GruVars::leaf(tape, &p.emission_cell),
            gates: tape.leaf(p.gates.clone()),
            state_embeddings: tape.leaf(p.state_embeddings.clone()),
            word_embeddings: tape.leaf(p.word_embeddings.clone()),
        }
    }

    /// Accumulate `scale` times the recorded gradients into a bundle, leaving
    /// the frozen embedding arrays untouched (zero).
    pub fn add_grads_into(&self, grads: &Grads, acc: &mut GeneratorParams, scale: f64) {
        let pairs: Vec<(Var, &mut [f64])> = vec![
            (self.encoder.w_ih, &mut acc.encoder_cell.w_ih.data),
            (self.encoder.w_hh, &mut acc.encoder_cell.w_hh.data),
            (self.encoder.b_ih, &mut acc.encoder_cell.b_ih),
            (self.encoder.b_hh, &mut acc.encoder_cell.b_hh),
            (self.decoder.w_ih, &mut acc.decoder_cell.w_ih.data),
            (self.decoder.w_hh, &mut acc.decoder_cell.w_hh.data),
            (self.decoder.b_ih, &mut acc.decoder_cell.b_ih),
            (self.decoder.b_hh, &mut acc.decoder_cell.b_hh),
            (self.attn_w, &mut acc.attn_w.data),
            (self.attn_u, &mut acc.attn_u.data),
            (self.attn_b, &mut acc.attn_b),
            (self.attn_v, &mut acc.attn_v),
            (self.out_w, &mut acc.out_w.data),
            (self.out_b, &mut acc.out_b),
            (self.emission.w_ih, &mut acc.emission_cell.w_ih.data),
            (self.emission.w_hh, &mut acc.emission_cell.w_hh.data),
            (self.emission.b_ih, &mut acc.emission_cell.b_ih),
            (self.emission.b_hh, &mut acc.emission_cell.b_hh),
            (self.gates, &mut acc.gates.data),
        ];
        for (var, slot) in pairs {
            if let Some(g) = grads.get(var) {
                for (a, x) in slot.iter_mut().zip(&g.data) {
                    *a += scale * x;
                }
            }
        }
    }
}

/// Taped twin of `sequence_logprob`: teacher-forced per-step log-values,
/// optionally weighted per step, summed into one scalar node. With no
/// weights the value is bit-identical to the plain score.
pub fn sequence_logprob_tape(
    tape: &mut Tape,
    g: &GenVars,
    p: &GeneratorParams,
    message: &TokenSeq,
    template: &Template,
    response: &TokenSeq,
    weights: Option<&[f64]>,
) -> Result<Var> {
    let total = template.total_len();
    if response.len() != total {
        return Err(Error::TemplateMismatch { len: response.len(), total });
    }
    if let Some(w) = weights {
        if w.len() != total {
            return Err(Error::TemplateMismatch { len: w.len(), total });
        }
    }
    check_tokens(response, p.vocab)?;
    if message.is_empty() {
        return Err(Error::EmptySentence);
    }
    check_tokens(message, p.vocab)?;

    // Encoder pass.
    let mut h = tape.leaf_vector(&vec![0.0; p.d2]);
    let mut h_x = Vec::with_capacity(message.len());
    for &tok in message {
        let x = tape.row(g.word_embeddings, tok as usize);
        h = g.encoder.step(tape, h, x);
        h_x.push(h);
    }
    // Per-position attention keys `U h_i + b`, shared across steps.
    let ub: Vec<Var> = h_x
        .iter()
        .map(|&hi| {
            let uh = tape.matvec(g.attn_u, hi);
            tape.add(uh, g.attn_b)
        })
        .collect();

    let mut s = *h_x.last().expect("non-empty message");
    let zeros = tape.leaf_vector(&vec![0.0; p.d2]);
    let mut o = zeros;
    let mut steps = Vec::with_capacity(total);
    for (t, &(m, k, z)) in positions(template).iter().enumerate() {
        let _ = m;
        let prev = if t == 0 { BOS } else { response[t - 1] };
        let o_prev = if k == 1 { zeros } else { o };
        let se = tape.row(g.state_embeddings, z);
        let we = tape.row(g.word_embeddings, prev as usize);
        let x = tape.concat(&[se, we]);
        o = g.emission.step(tape, o_prev, x);
        let gz = tape.row(g.gates, z);
        let v = tape.mul(gz, o);
        s = g.decoder.step(tape, s, v);
        let ws = tape.matvec(g.attn_w, s);
        let scores: Vec<Var> = ub
            .iter()
            .map(|&ub_i| {
                let pre = tape.add(ws, ub_i);
                let th = tape.tanh(pre);
                tape.dot(g.attn_v, th)
            })
            .collect();
        let score_vec = tape.concat(&scores);
        let alpha = tape.softmax(score_vec);
        let c = tape.lincomb(alpha, &h_x);
        let cat = tape.concat(&[s, c]);
        let logits = tape.affine(g.out_w, cat, g.out_b);
        let logdist = tape.log_softmax(logits);
        let lp = tape.index(logdist, response[t] as usize);
        steps.push(match weights {
            Some(w) => tape.scale(lp, w[t]),
            None => lp,
        });
    }
    Ok(tape.sum_many(&steps))
}

/// One Adam step on every non-frozen generator array. The frozen embeddings
/// are never handed to the optimizer, so they stay bit-identical.
pub fn apply_gen_step(
    opt: &mut crate::optim::Adam,
    params: &mut GeneratorParams,
    grads: &GeneratorParams,
) {
    let gvecs: Vec<(&'static str, Vec<f64>)> = grads
        .arrays()
        .iter()
        .filter(|(name, _, _)| !FROZEN_ARRAYS.contains(name))
        .map(|(name, _, g)| (*name, g.to_vec()))
        .collect();
    let mut slots = params.arrays_mut();
    let mut pairs: Vec<(&str, &mut [f64], &[f64])> = Vec::new();
    let mut gi = 0usize;
    for (name, slot) in slots.iter_mut() {
        if FROZEN_ARRAYS.contains(name) {
            continue;
        }
        debug_assert_eq!(*name, gvecs[gi].0);
        pairs.push((name, slot, &gvecs[gi].1));
        gi += 1;
    }
    opt.step(&mut pairs);
}

/// Mean teacher-forced negative log-likelihood over a batch and its gradient
/// with respect to every non-frozen generator array.
pub fn mle_gradient(
    p: &GeneratorParams,
    batch: &[(&TokenSeq, &Template, &TokenSeq)],
) -> Result<(f64, GeneratorParams)> {
    if batch.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut acc = p.zeros_like();
    let mut total = 0.0;
    let scale = -1.0 / batch.len() as f64;
    for (message, template, response) in batch {
        let mut tape = Tape::new();
        let vars = GenVars::leaf(&mut tape, p);
        let lp = sequence_logprob_tape(&mut tape, &vars, p, message, template, response, None)?;
        let value = tape.value(lp).item();
        if !value.is_finite() {
            return Err(Error::Numerical(format!("non-finite sequence log-probability {value}")));
        }
        total -= value;
        let grads = tape.backward(lp);
        vars.add_grads_into(&grads, &mut acc, scale);
    }
    let loss = total / batch.len() as f64;
    for (name, slot) in acc.arrays_mut() {
        if FROZEN_ARRAYS.contains(&name) {
            continue;
        }
        if slot.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient in {name}")));
        }
    }
    Ok((loss, acc))
}
