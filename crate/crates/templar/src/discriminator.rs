//! Convolutional discriminator: embeds message and response separately, runs
//! windowed filters with max-over-time pooling on each, and scores the pair
//! with a two-layer feed-forward head. The score feeds policy-gradient
//! rewards, so it is clamped away from 0 and 1 before any logarithm.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSeq, PAD};
use crate::error::{Error, Result};
use crate::math::{self, Mat};
use crate::tape::{Grads, Tape, Var};

/// Clamp bounds for the sigmoid output.
pub const SCORE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorParams {
    pub d3: usize,
    pub vocab: usize,
    pub h_d: usize,
    /// Convolution window sizes, strictly increasing.
    pub windows: Vec<usize>,
    pub n_filters: usize,
    /// Independent trainable embeddings; the PAD row is fixed at zero so
    /// padding cannot raise any pooled activation above baseline.
    pub word_embeddings: Mat,
    /// Per window: `n_filters x (w * d3)` filters and their biases, separate
    /// sets for the message and the response side.
    pub msg_filters: Vec<Mat>,
    pub msg_filter_bias: Vec<Vec<f64>>,
    pub resp_filters: Vec<Mat>,
    pub resp_filter_bias: Vec<Vec<f64>>,
    /// Two-layer scorer over the concatenated pooled features.
    pub hidden_w: Mat,
    pub hidden_b: Vec<f64>,
    pub out_w: Vec<f64>,
    /// Length-1 for uniform array plumbing.
    pub out_b: Vec<f64>,
}

impl DiscriminatorParams {
    pub fn new_seeded<R: Rng>(
        vocab: usize,
        d3: usize,
        h_d: usize,
        windows: &[usize],
        n_filters: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if windows.is_empty() || windows.windows(2).any(|w| w[1] <= w[0]) || windows[0] == 0 {
            return Err(Error::InvalidConfig(
                "conv windows must be non-empty, positive, strictly increasing".into(),
            ));
        }
        if vocab == 0 || d3 == 0 || h_d == 0 || n_filters == 0 {
            return Err(Error::InvalidConfig("discriminator dimensions must be positive".into()));
        }
        let scale = 0.1;
        let mut word_embeddings = Mat::from_vec(vocab, d3, math::uniform_init(rng, vocab * d3, scale));
        for x in word_embeddings.row_mut(PAD as usize) {
            *x = 0.0;
        }
        let conv = |rng: &mut R| -> (Vec<Mat>, Vec<Vec<f64>>) {
            let mut filters = Vec::new();
            let mut biases = Vec::new();
            for &w in windows {
                filters.push(Mat::from_vec(
                    n_filters,
                    w * d3,
                    math::uniform_init(rng, n_filters * w * d3, scale),
                ));
                biases.push(vec![0.0; n_filters]);
            }
            (filters, biases)
        };
        let (msg_filters, msg_filter_bias) = conv(rng);
        let (resp_filters, resp_filter_bias) = conv(rng);
        let feat = 2 * windows.len() * n_filters;
        Ok(DiscriminatorParams {
            d3,
            vocab,
            h_d,
            windows: windows.to_vec(),
            n_filters,
            word_embeddings,
            msg_filters,
            msg_filter_bias,
            resp_filters,
            resp_filter_bias,
            hidden_w: Mat::from_vec(h_d, feat, math::uniform_init(rng, h_d * feat, scale)),
            hidden_b: vec![0.0; h_d],
            out_w: math::uniform_init(rng, h_d, scale),
            out_b: vec![0.0],
        })
    }

    pub fn arrays(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = vec![(
            "disc.word_embeddings".into(),
            vec![self.vocab, self.d3],
            &self.word_embeddings.data,
        )];
        for (i, &w) in self.windows.iter().enumerate() {
            out.push((
                format!("disc.msg_conv{w}.w"),
                vec![self.n_filters, w * self.d3],
                &self.msg_filters[i].data,
            ));
            out.push((format!("disc.msg_conv{w}.b"), vec![self.n_filters], &self.msg_filter_bias[i]));
        }
        for (i, &w) in self.windows.iter().enumerate() {
            out.push((
                format!("disc.resp_conv{w}.w"),
                vec![self.n_filters, w * self.d3],
                &self.resp_filters[i].data,
            ));
            out.push((format!("disc.resp_conv{w}.b"), vec![self.n_filters], &self.resp_filter_bias[i]));
        }
        out.push((
            "disc.hidden_w".into(),
            vec![self.h_d, self.hidden_w.cols],
            &self.hidden_w.data,
        ));
        out.push(("disc.hidden_b".into(), vec![self.h_d], &self.hidden_b));
        out.push(("disc.out_w".into(), vec![self.h_d], &self.out_w));
        out.push(("disc.out_b".into(), vec![1], &self.out_b));
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let windows = self.windows.clone();
        let mut out: Vec<(String, &mut [f64])> =
            vec![("disc.word_embeddings".into(), &mut self.word_embeddings.data[..])];
        for (&w, (f, b)) in windows
            .iter()
            .zip(self.msg_filters.iter_mut().zip(self.msg_filter_bias.iter_mut()))
        {
            out.push((format!("disc.msg_conv{w}.w"), &mut f.data[..]));
            out.push((format!("disc.msg_conv{w}.b"), &mut b[..]));
        }
        for (&w, (f, b)) in windows
            .iter()
            .zip(self.resp_filters.iter_mut().zip(self.resp_filter_bias.iter_mut()))
        {
            out.push((format!("disc.resp_conv{w}.w"), &mut f.data[..]));
            out.push((format!("disc.resp_conv{w}.b"), &mut b[..]));
        }
        out.push(("disc.hidden_w".into(), &mut self.hidden_w.data[..]));
        out.push(("disc.hidden_b".into(), &mut self.hidden_b[..]));
        out.push(("disc.out_w".into(), &mut self.out_w[..]));
        out.push(("disc.out_b".into(), &mut self.out_b[..]));
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, slot) in z.arrays_mut() {
            for x in slot.iter_mut() {
                *x = 0.0;
            }
        }
        z
    }

    fn max_window(&self) -> usize {
        *self.windows.last().expect("validated non-empty windows")
    }
}

fn padded(seq: &TokenSeq, min_len: usize, vocab: usize) -> Result<TokenSeq> {
    if seq.is_empty() {
        return Err(Error::EmptySentence);
    }
    for &t in seq {
        if t as usize >= vocab {
            return Err(Error::TokenOutOfRange { id: t, vocab });
        }
    }
    let mut out = seq.clone();
    while out.len() < min_len {
        out.push(PAD);
    }
    Ok(out)
}

/// Pooled convolution features for one side: for each window size, ReLU
/// filter activations at every start position, max-pooled per filter.
fn side_features(
    p: &DiscriminatorParams,
    filters: &[Mat],
    biases: &[Vec<f64>],
    toks: &TokenSeq,
) -> Vec<f64> {
    let mut feats = Vec::with_capacity(p.windows.len() * p.n_filters);
    for ((&w, fw), fb) in p.windows.iter().zip(filters).zip(biases) {
        let mut pooled: Option<Vec<f64>> = None;
        for q in 0..=(toks.len() - w) {
            let mut x = Vec::with_capacity(w * p.d3);
            for &tok in &toks[q..q + w] {
                x.extend_from_slice(p.word_embeddings.row(tok as usize));
            }
            let mut act = fw.affine(&x, fb);
            for a in act.iter_mut() {
                *a = a.max(0.0);
            }
            pooled = Some(match pooled {
                None => act,
                Some(mut best) => {
                    for (b, a) in best.iter_mut().zip(&act) {
                        if *a > *b {
                            *b = *a;
                        }
                    }
                    best
                }
            });
        }
        feats.extend(pooled.expect("padding guarantees at least one window position"));
    }
    feats
}

/// Probability that the (message, response) pair is human, in
/// `[SCORE_EPS, 1 - SCORE_EPS]`.
pub fn score(p: &DiscriminatorParams, message: &TokenSeq, response: &TokenSeq) -> Result<f64> {
    let m = padded(message, p.max_window(), p.vocab)?;
    let r = padded(response, p.max_window(), p.vocab)?;
    let mut feats = side_features(p, &p.msg_filters, &p.msg_filter_bias, &m);
    feats.extend(side_features(p, &p.resp_filters, &p.resp_filter_bias, &r));
    let mut hidden = p.hidden_w.affine(&feats, &p.hidden_b);
    for h in hidden.iter_mut() {
        *h = h.max(0.0);
    }
    let logit = math::dot(&p.out_w, &hidden) + p.out_b[0];
    Ok(math::sigmoid(logit).clamp(SCORE_EPS, 1.0 - SCORE_EPS))
}

/// Leaf handles for every discriminator array on a tape.
pub struct DiscVars {
    pub word_embeddings: Var,
    pub msg_filters: Vec<Var>,
    pub msg_filter_bias: Vec<Var>,
    pub resp_filters: Vec<Var>,
    pub resp_filter_bias: Vec<Var>,
    pub hidden_w: Var,
    pub hidden_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

impl DiscVars {
    pub fn leaf(tape: &mut Tape, p: &DiscriminatorParams) -> Self {
        DiscVars {
            word_embeddings: tape.leaf(p.word_embeddings.clone()),
            msg_filters: p.msg_filters.iter().map(|f| tape.leaf(f.clone())).collect(),
            msg_filter_bias: p.msg_filter_bias.iter().map(|b| tape.leaf_vector(b)).collect(),
            resp_filters: p.resp_filters.iter().map(|f| tape.leaf(f.clone())).collect(),
            resp_filter_bias: p.resp_filter_bias.iter().map(|b| tape.leaf_vector(b)).collect(),
            hidden_w: tape.leaf(p.hidden_w.clone()),
            hidden_b: tape.leaf_vector(&p.hidden_b),
            out_w: tape.leaf_vector(&p.out_w),
            out_b: tape.leaf_vector(&p.out_b),
        }
    }

    /// Accumulate `scale` times the recorded gradients, masking the PAD
    /// embedding row so it stays exactly zero forever.
    pub fn add_grads_into(&self, grads: &Grads, acc: &mut DiscriminatorParams, scale: f64) {
        let vars: Vec<Var> = std::iter::once(self.word_embeddings)
            .chain(
                self.msg_filters
                    .iter()
                    .zip(&self.msg_filter_bias)
                    .flat_map(|(&f, &b)| [f, b]),
            )
            .chain(
                self.resp_filters
                    .iter()
                    .zip(&self.resp_filter_bias)
                    .flat_map(|(&f, &b)| [f, b]),
            )
            .chain([self.hidden_w, self.hidden_b, self.out_w, self.out_b])
            .collect();
        for (var, (_, slot)) in vars.into_iter().zip(acc.arrays_mut()) {
            if let Some(g) = grads.get(var) {
                for (a, x) in slot.iter_mut().zip(&g.data) {
                    *a += scale * x;
                }
            }
        }
        for x in &mut acc.word_embeddings.data[..acc.d3] {
            *x = 0.0;
        }
    }
}

fn side_features_tape(
    tape: &mut Tape,
    p: &DiscriminatorParams,
    emb: Var,
    filters: &[Var],
    biases: &[Var],
    toks: &TokenSeq,
) -> Vec<Var> {
    let mut feats = Vec::with_capacity(p.windows.len());
    for ((&w, &fw), &fb) in p.windows.iter().zip(filters).zip(biases) {
        let mut acts = Vec::new();
        for q in 0..=(toks.len() - w) {
            let rows: Vec<Var> = toks[q..q + w]
                .iter()
                .map(|&tok| tape.row(emb, tok as usize))
                .collect();
            let x = tape.concat(&rows);
            let aff = tape.affine(fw, x, fb);
            acts.push(tape.relu(aff));
        }
        feats.push(tape.max_many(&acts));
    }
    feats
}

/// Taped twin of `score`; same clamped probability, differentiable.
pub fn score_tape(
    tape: &mut Tape,
    v: &DiscVars,
    p: &DiscriminatorParams,
    message: &TokenSeq,
    response: &TokenSeq,
) -> Result<Var> {
    let m = padded(message, p.max_window(), p.vocab)?;
    let r = padded(response, p.max_window(), p.vocab)?;
    let mut feats =
        side_features_tape(tape, p, v.word_embeddings, &v.msg_filters, &v.msg_filter_bias, &m);
    feats.extend(side_features_tape(
        tape,
        p,
        v.word_embeddings,
        &v.resp_filters,
        &v.resp_filter_bias,
        &r,
    ));
    let full = tape.concat(&feats);
    let aff = tape.affine(v.hidden_w, full, v.hidden_b);
    let hidden = tape.relu(aff);
    let dot = tape.dot(v.out_w, hidden);
    let bias = tape.index(v.out_b, 0);
    let logit = tape.add(dot, bias);
    let prob = tape.sigmoid(logit);
    Ok(tape.clamp(prob, SCORE_EPS, 1.0 - SCORE_EPS))
}

/// One Adam step on every discriminator array from an accumulated gradient
/// bundle. The PAD embedding row receives zero gradient by construction, so
/// it stays exactly zero.
pub fn apply_disc_step(
    opt: &mut crate::optim::Adam,
    params: &mut DiscriminatorParams,
    grads: &DiscriminatorParams,
) {
    let names: Vec<String> = grads.arrays().iter().map(|(n, _, _)| n.clone()).collect();
    let gvecs: Vec<Vec<f64>> = grads.arrays().iter().map(|(_, _, g)| g.to_vec()).collect();
    let mut pairs: Vec<(&str, &mut [f64], &[f64])> = Vec::new();
    for ((name, (_, slot)), g) in names.iter().zip(params.arrays_mut()).zip(gvecs.iter()) {
        pairs.push((name.as_str(), slot, g));
    }
    opt.step(&mut pairs);
}

/// `-Σ [ln D(X, Y) + ln(1 - D(X, Ŷ))]` over the batch (a sum, not a mean).
pub fn disc_loss(
    p: &DiscriminatorParams,
    batch: &[(TokenSeq, TokenSeq, TokenSeq)],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut total = 0.0;
    for (msg, human, generated) in batch {
        total += score(p, msg, human)?.ln();
        total += (-score(p, msg, generated)? + 1.0).ln();
    }
    let loss = -total;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite discriminator loss {loss}")));
    }
    Ok(loss)
}

/// Loss and gradient for one batch. The gradient excludes everything but the
/// discriminator's own arrays by construction (generated responses enter as
/// fixed token sequences).
pub fn disc_loss_grad(
    p: &DiscriminatorParams,
    batch: &[(TokenSeq, TokenSeq, TokenSeq)],
) -> Result<(f64, DiscriminatorParams)> {
    if batch.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut acc = p.zeros_like();
    let mut total = 0.0;
    for (msg, human, generated) in batch {
        let mut tape = Tape::new();
        let vars = DiscVars::leaf(&mut tape, p);
        let pos = score_tape(&mut tape, &vars, p, msg, human)?;
        let neg = score_tape(&mut tape, &vars, p, msg, generated)?;
        let ln_pos = tape.ln(pos);
        let neg1m = tape.affine_scalar(neg, -1.0, 1.0);
        let ln_neg = tape.ln(neg1m);
        let term = tape.add(ln_pos, ln_neg);
        total += tape.value(term).item();
        let grads = tape.backward(term);
        vars.add_grads_into(&grads, &mut acc, -1.0);
    }
    let loss = -total;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite discriminator loss {loss}")));
    }
    for (name, slot) in acc.arrays_mut() {
        if slot.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient in {name}")));
        }
    }
    Ok((loss, acc))
}
