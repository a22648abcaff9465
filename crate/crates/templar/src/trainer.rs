//! Training orchestration: configuration, structured logs, generator and
//! discriminator pretraining, Monte-Carlo rewards, policy-gradient updates,
//! and the alternating adversarial loop.
//!
//! Every stage draws randomness from a `ChaCha8Rng` seeded with the config
//! seed on a stage-specific stream (segment model 0, generator pretraining 1,
//! discriminator pretraining 2, adversarial loop 3), so stages are
//! individually reproducible and do not perturb one another.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{PairedExample, TokenSeq};
use crate::discriminator::{
    apply_disc_step, disc_loss_grad, score, DiscriminatorParams,
};
use crate::error::{Error, Result};
use crate::generator::{
    apply_gen_step, generate_beam, mle_gradient, sample_rollout, sequence_logprob,
    sequence_logprob_tape, GenVars, GeneratorParams,
};
use crate::nhsmm::{split_validation, HsmmParams};
use crate::optim::Adam;
use crate::tape::Tape;
use crate::templates::{infer_template, sample_template, Template, TemplatePool};

/// Every knob of the training pipeline. Defaults are desk-scale dimensions
/// with the full-scale reference constants for everything that has one: learning rates
/// 1e-3 / 1e-5 / 1e-3 (segment model / generator / discriminator), 5
/// Monte-Carlo rollouts, top-50 sampling, windows {1,2,3} with 128 filters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Hidden state count K (≥ 2).
    pub k: usize,
    /// Maximum segment duration D.
    pub d_max: usize,
    /// State-embedding width.
    pub d1: usize,
    /// Recurrent hidden width.
    pub d2: usize,
    /// Word-embedding width.
    pub d3: usize,
    pub vocab_max_size: usize,
    pub lr_hsmm: f64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub hsmm_epochs: usize,
    pub hsmm_batch: usize,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub disc_pretrain_epochs: usize,
    pub disc_batch: usize,
    /// Adversarial epochs; a checkpoint is written after each.
    pub adv_epochs: usize,
    /// Alternation rounds per adversarial epoch.
    pub adv_iters_per_epoch: usize,
    pub g_steps: usize,
    pub d_steps: usize,
    /// Monte-Carlo rollouts per reward estimate (N).
    pub n_rollouts: usize,
    /// Top-k truncation for sampling rollouts.
    pub top_k: usize,
    pub beam_width: usize,
    /// Convolution window sizes for the discriminator.
    pub conv_windows: Vec<usize>,
    /// Filters per window size.
    pub n_filters: usize,
    /// Discriminator scorer hidden width.
    pub h_d: usize,
    /// Early stopping: epochs without sufficient improvement tolerated.
    pub patience: usize,
    /// Early stopping: relative improvement threshold.
    pub rel_tol: f64,
    /// Fraction of examples held out for validation (deterministic split).
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            k: 10,
            d_max: 4,
            d1: 64,
            d2: 64,
            d3: 64,
            vocab_max_size: 20000,
            lr_hsmm: 1e-3,
            lr_generator: 1e-5,
            lr_discriminator: 1e-3,
            hsmm_epochs: 10,
            hsmm_batch: 8,
            pretrain_epochs: 20,
            pretrain_batch: 8,
            disc_pretrain_epochs: 1,
            disc_batch: 8,
            adv_epochs: 5,
            adv_iters_per_epoch: 20,
            g_steps: 1,
            d_steps: 5,
            n_rollouts: 5,
            top_k: 50,
            beam_width: 5,
            conv_windows: vec![1, 2, 3],
            n_filters: 128,
            h_d: 128,
            patience: 3,
            rel_tol: 1e-3,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    /// Check every invariant the pipeline assumes. `top_k ≤ V` is checked at
    /// the point of use, where the vocabulary is known.
    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 9] = [
            ("k", self.k),
            ("d_max", self.d_max),
            ("d1", self.d1),
            ("d2", self.d2),
            ("d3", self.d3),
            ("vocab_max_size", self.vocab_max_size),
            ("n_rollouts", self.n_rollouts),
            ("top_k", self.top_k),
            ("beam_width", self.beam_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.k < 2 {
            return Err(Error::InvalidConfig(
                "k must be at least 2 (self-transitions are disabled)".into(),
            ));
        }
        for (name, v) in
            [("lr_hsmm", self.lr_hsmm), ("lr_generator", self.lr_generator), ("lr_discriminator", self.lr_discriminator)]
        {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.conv_windows.is_empty() || self.conv_windows.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("conv_windows must be non-empty, positive".into()));
        }
        if self.n_filters == 0 || self.h_d == 0 {
            return Err(Error::InvalidConfig("n_filters and h_d must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig("val_fraction must lie in [0, 0.5]".into()));
        }
        if !(self.rel_tol >= 0.0 && self.rel_tol.is_finite()) {
            return Err(Error::InvalidConfig("rel_tol must be non-negative".into()));
        }
        Ok(())
    }
}

/// Newline-delimited JSON event log. Every event gains a `wall_clock_s`
/// field; a silent sink drops events, which keeps library tests quiet.
pub struct LogSink {
    out: Option<Box<dyn Write + Send>>,
    start: Instant,
}

impl LogSink {
    pub fn stderr() -> Self {
        LogSink { out: Some(Box::new(std::io::stderr())), start: Instant::now() }
    }

    pub fn silent() -> Self {
        LogSink { out: None, start: Instant::now() }
    }

    pub fn writer(w: Box<dyn Write + Send>) -> Self {
        LogSink { out: Some(w), start: Instant::now() }
    }

    /// Emit one event object as a single JSON line.
    pub fn event(&mut self, mut value: serde_json::Value) {
        if let Some(out) = self.out.as_mut() {
            if let Some(map) = value.as_object_mut() {
                map.insert(
                    "wall_clock_s".to_string(),
                    serde_json::json!(self.start.elapsed().as_secs_f64()),
                );
            }
            let _ = writeln!(out, "{value}");
        }
    }
}

/// Early-stopping bookkeeping shared by the training loops: an epoch counts
/// as stale unless it improves the best validation perplexity by `rel_tol`
/// relatively; `patience` stale epochs in a row stop the loop.
struct Stopper {
    best: f64,
    stale: usize,
    rel_tol: f64,
    patience: usize,
}

impl Stopper {
    fn new(rel_tol: f64, patience: usize) -> Self {
        Stopper { best: f64::INFINITY, stale: 0, rel_tol, patience }
    }

    /// Record one epoch's validation perplexity. Returns `(improved, stop)`:
    /// `improved` means this is the best value seen so far (keep a snapshot),
    /// `stop` means patience is exhausted.
    fn observe(&mut self, ppl: f64) -> (bool, bool) {
        if ppl < self.best * (1.0 - self.rel_tol) {
            self.best = ppl;
            self.stale = 0;
            return (true, false);
        }
        let improved = ppl < self.best;
        if improved {
            self.best = ppl;
        }
        self.stale += 1;
        (improved, self.stale >= self.patience)
    }
}

/// Laplace add-one unigram perplexity of a token-sequence collection — the
/// baseline a trained generator is expected to beat. Each token is scored
/// `(count + 1) / (total + vocab)`.
pub fn unigram_perplexity(seqs: &[&TokenSeq], vocab: usize) -> Result<f64> {
    if vocab == 0 {
        return Err(Error::InvalidConfig("vocab must be positive".into()));
    }
    let mut counts = vec![0usize; vocab];
    let mut total = 0usize;
    for seq in seqs {
        for &t in seq.iter() {
            if t as usize >= vocab {
                return Err(Error::TokenOutOfRange { id: t, vocab });
            }
            counts[t as usize] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }
    let denom = (total + vocab) as f64;
    let mut nll = 0.0;
    for seq in seqs {
        for &t in seq.iter() {
            nll -= ((counts[t as usize] + 1) as f64 / denom).ln();
        }
    }
    Ok((nll / total as f64).exp())
}

/// Per-token perplexity of teacher-forced generation over a set of
/// (message, template, response) triples: `exp(-Σ log P / Σ |Y|)`.
pub fn generator_perplexity(
    gen: &GeneratorParams,
    examples: &[(&TokenSeq, &Template, &TokenSeq)],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut logprob = 0.0;
    let mut tokens = 0usize;
    for (message, template, response) in examples {
        logprob += sequence_logprob(gen, message, template, response)?;
        tokens += response.len();
    }
    Ok((-logprob / tokens.max(1) as f64).exp())
}

/// Viterbi-infer the template realized by every paired response. A failure
/// (typically `InfeasibleConstraints`) is annotated with the example index.
pub fn infer_templates(
    hsmm: &HsmmParams,
    paired: &[PairedExample],
) -> Result<Vec<Template>> {
    paired
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            infer_template(hsmm, &ex.response, &ex.response_spans)
                .map_err(|e| Error::context(format!("example {i}"), e))
        })
        .collect()
}

fn triples<'a>(
    paired: &'a [PairedExample],
    templates: &'a [Template],
    idx: &[usize],
) -> Vec<(&'a TokenSeq, &'a Template, &'a TokenSeq)> {
    idx.iter().map(|&i| (&paired[i].message, &templates[i], &paired[i].response)).collect()
}

/// Teacher-forced generator pretraining: maximizes the mean log-likelihood of
/// paired responses under templates Viterbi-inferred from the segment-model
/// snapshot, with Adam at the generator rate and early stopping on validation
/// perplexity. Returns the best-validation parameters; `pretrain_epochs = 0`
/// returns the input unchanged.
pub fn pretrain_generator(
    gen: &GeneratorParams,
    hsmm: &HsmmParams,
    paired: &[PairedExample],
    config: &TrainConfig,
    log: &mut LogSink,
) -> Result<GeneratorParams> {
    if paired.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    config.validate()?;
    let templates = infer_templates(hsmm, paired)?;
    let mut params = gen.clone();
    if config.pretrain_epochs == 0 {
        return Ok(params);
    }

    let idx: Vec<usize> = (0..paired.len()).collect();
    let (train_idx, val_idx) = split_validation(&idx, config.val_fraction);
    let val = triples(paired, &templates, &val_idx);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut opt = Adam::new(config.lr_generator);
    let mut best = params.clone();
    let mut stopper = Stopper::new(config.rel_tol, config.patience);

    let mut order = train_idx;
    for epoch in 1..=config.pretrain_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.pretrain_batch.max(1)) {
            let batch = triples(paired, &templates, chunk);
            let (loss, grads) = mle_gradient(&params, &batch)?;
            apply_gen_step(&mut opt, &mut params, &grads);
            epoch_loss += loss;
            batches += 1;
        }
        let ppl = generator_perplexity(&params, &val)?;
        log.event(serde_json::json!({
            "phase": "pretrain",
            "epoch": epoch,
            "mean_batch_nll": epoch_loss / batches.max(1) as f64,
            "val_perplexity": ppl,
        }));
        let (improved, stop) = stopper.observe(ppl);
        if improved {
            best = params.clone();
        }
        if stop {
            break;
        }
    }
    Ok(best)
}

/// Discriminator pretraining: human responses as positives against samples
/// from the (pretrained) generator as negatives, for `disc_pretrain_epochs`
/// epochs (default 1). Templates for the negatives are drawn from the pool.
pub fn pretrain_discriminator(
    disc: &DiscriminatorParams,
    gen: &GeneratorParams,
    hsmm: &HsmmParams,
    pool: &TemplatePool,
    paired: &[PairedExample],
    config: &TrainConfig,
    log: &mut LogSink,
) -> Result<DiscriminatorParams> {
    if paired.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    config.validate()?;
    let mut params = disc.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let mut opt = Adam::new(config.lr_discriminator);
    let mut order: Vec<usize> = (0..paired.len()).collect();
    for epoch in 1..=config.disc_pretrain_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.disc_batch.max(1)) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let template = sample_template(pool, hsmm, &mut rng)?;
                let fake = sample_rollout(
                    gen,
                    &paired[i].message,
                    &template,
                    &Vec::new(),
                    config.top_k,
                    &mut rng,
                )?;
                batch.push((paired[i].message.clone(), paired[i].response.clone(), fake));
            }
            let (loss, grads) = disc_loss_grad(&params, &batch)?;
            apply_disc_step(&mut opt, &mut params, &grads);
            epoch_loss += loss;
            batches += 1;
        }
        log.event(serde_json::json!({
            "phase": "pretrain-disc",
            "epoch": epoch,
            "mean_batch_loss": epoch_loss / batches.max(1) as f64,
        }));
    }
    Ok(params)
}

/// Monte-Carlo reward of a partial response: the prefix is completed `n`
/// times by top-k sampling and the mean discriminator score is returned. A
/// full-length prefix needs no sampling — the reward is its direct score.
/// Always lies in the open interval (0, 1).
pub fn mc_reward<R: Rng>(
    disc: &DiscriminatorParams,
    gen: &GeneratorParams,
    message: &TokenSeq,
    template: &Template,
    prefix: &TokenSeq,
    n: usize,
    top_k: usize,
    rng: &mut R,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidConfig("rollout count must be at least 1".into()));
    }
    if prefix.len() == template.total_len() {
        return score(disc, message, prefix);
    }
    let mut total = 0.0;
    for _ in 0..n {
        let completed = sample_rollout(gen, message, template, prefix, top_k, rng)?;
        total += score(disc, message, &completed)?;
    }
    Ok(total / n as f64)
}

/// The policy gradient for a fixed response and per-step rewards, as a
/// bundle aligned with the generator's arrays: `-Σ_t R_t ∇ log P(ŷ_t | ...)`
/// (negated so that a descent step ascends the reward-weighted likelihood).
/// Frozen embedding slots stay zero.
pub fn policy_gradient(
    gen: &GeneratorParams,
    message: &TokenSeq,
    template: &Template,
    response: &TokenSeq,
    rewards: &[f64],
) -> Result<GeneratorParams> {
    let mut tape = Tape::new();
    let vars = GenVars::leaf(&mut tape, gen);
    let node =
        sequence_logprob_tape(&mut tape, &vars, gen, message, template, response, Some(rewards))?;
    let value = tape.value(node).item();
    if !value.is_finite() {
        return Err(Error::Numerical(format!("non-finite weighted log-probability {value}")));
    }
    let grads = tape.backward(node);
    let mut acc = gen.zeros_like();
    vars.add_grads_into(&grads, &mut acc, -1.0);
    for (name, slot) in acc.arrays_mut() {
        if slot.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite policy gradient in {name}")));
        }
    }
    Ok(acc)
}

/// Apply one Adam step of the policy gradient for the given rewards.
pub fn policy_gradient_update(
    gen: &GeneratorParams,
    opt: &mut Adam,
    message: &TokenSeq,
    template: &Template,
    response: &TokenSeq,
    rewards: &[f64],
) -> Result<GeneratorParams> {
    let grads = policy_gradient(gen, message, template, response, rewards)?;
    let mut params = gen.clone();
    apply_gen_step(opt, &mut params, &grads);
    Ok(params)
}

/// One adversarial generator update: decode Ŷ by beam search, estimate a
/// Monte-Carlo reward for every prefix ŷ_{1:t}, and take one Adam step along
/// the reward-weighted log-likelihood gradient. Returns the updated
/// parameters and the mean per-step reward.
#[allow(clippy::too_many_arguments)]
pub fn policy_gradient_step<R: Rng>(
    gen: &GeneratorParams,
    disc: &DiscriminatorParams,
    opt: &mut Adam,
    message: &TokenSeq,
    template: &Template,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(GeneratorParams, f64)> {
    let response = generate_beam(gen, message, template, config.beam_width)?;
    let mut rewards = Vec::with_capacity(response.len());
    for t in 1..=response.len() {
        let prefix: TokenSeq = response[..t].to_vec();
        rewards.push(mc_reward(
            disc,
            gen,
            message,
            template,
            &prefix,
            config.n_rollouts,
            config.top_k,
            rng,
        )?);
    }
    let mean_reward = rewards.iter().sum::<f64>() / rewards.len().max(1) as f64;
    let updated = policy_gradient_update(gen, opt, message, template, &response, &rewards)?;
    Ok((updated, mean_reward))
}

/// The alternating adversarial loop: each of `adv_iters_per_epoch` iterations
/// runs `g_steps` policy-gradient updates with pool-sampled templates, then
/// `d_steps` discriminator updates pairing human responses against top-k
/// sampled generations. `on_epoch` is called after every epoch (the
/// checkpoint hook); early stopping watches validation perplexity under
/// Viterbi-inferred templates. The two optimizers are independent.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_train(
    gen: &GeneratorParams,
    disc: &DiscriminatorParams,
    hsmm: &HsmmParams,
    pool: &TemplatePool,
    paired: &[PairedExample],
    config: &TrainConfig,
    log: &mut LogSink,
    mut on_epoch: impl FnMut(usize, &GeneratorParams, &DiscriminatorParams) -> Result<()>,
) -> Result<(GeneratorParams, DiscriminatorParams)> {
    if paired.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if pool.occurrences() == 0 {
        return Err(Error::EmptyPool);
    }
    config.validate()?;
    let templates = infer_templates(hsmm, paired)?;
    let idx: Vec<usize> = (0..paired.len()).collect();
    let (train_idx, val_idx) = split_validation(&idx, config.val_fraction);
    let val = triples(paired, &templates, &val_idx);

    let mut g = gen.clone();
    let mut d = disc.clone();
    let mut g_opt = Adam::new(config.lr_generator);
    let mut d_opt = Adam::new(config.lr_discriminator);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(3);
    let mut stopper = Stopper::new(config.rel_tol, config.patience);

    for epoch in 1..=config.adv_epochs {
        let mut reward_sum = 0.0;
        let mut reward_n = 0usize;
        let mut d_loss_sum = 0.0;
        let mut d_loss_n = 0usize;
        for iter in 1..=config.adv_iters_per_epoch {
            for gs in 1..=config.g_steps {
                let i = train_idx[rng.gen_range(0..train_idx.len())];
                let template = sample_template(pool, hsmm, &mut rng)?;
                let (updated, mean_reward) = policy_gradient_step(
                    &g,
                    &d,
                    &mut g_opt,
                    &paired[i].message,
                    &template,
                    config,
                    &mut rng,
                )
                .map_err(|e| {
                    Error::context(format!("epoch {epoch} iteration {iter} g-step {gs}"), e)
                })?;
                g = updated;
                reward_sum += mean_reward;
                reward_n += 1;
            }
            for ds in 1..=config.d_steps {
                let mut batch = Vec::with_capacity(config.disc_batch.max(1));
                for _ in 0..config.disc_batch.max(1) {
                    let i = train_idx[rng.gen_range(0..train_idx.len())];
                    let template = sample_template(pool, hsmm, &mut rng)?;
                    let fake = sample_rollout(
                        &g,
                        &paired[i].message,
                        &template,
                        &Vec::new(),
                        config.top_k,
                        &mut rng,
                    )?;
                    batch.push((paired[i].message.clone(), paired[i].response.clone(), fake));
                }
                let (loss, grads) = disc_loss_grad(&d, &batch).map_err(|e| {
                    Error::context(format!("epoch {epoch} iteration {iter} d-step {ds}"), e)
                })?;
                apply_disc_step(&mut d_opt, &mut d, &grads);
                d_loss_sum += loss;
                d_loss_n += 1;
            }
        }
        let ppl = generator_perplexity(&g, &val)?;
        log.event(serde_json::json!({
            "phase": "adversarial",
            "epoch": epoch,
            "mean_reward": reward_sum / reward_n.max(1) as f64,
            "mean_disc_loss": d_loss_sum / d_loss_n.max(1) as f64,
            "val_perplexity": ppl,
        }));
        on_epoch(epoch, &g, &d)
            .map_err(|e| Error::context(format!("epoch {epoch} checkpoint"), e))?;
        let (_, stop) = stopper.observe(ppl);
        if stop {
            break;
        }
    }
    Ok((g, d))
}
