//! Shared test oracles, deliberately written as independent straight-line
//! code: their own recurrence loops, their own naive softmax, their own
//! enumeration over segmentations. They never call the library's DP or tape.

#![allow(dead_code)]

use templar::corpus::SEGSTART;
use templar::nhsmm::HsmmParams;

/// All `(state, duration)` chains that partition a length-`s` sequence with
/// durations in `1..=d_max` and adjacent-distinct states among `0..k`.
pub fn enumerate_segmentations(s: usize, k: usize, d_max: usize) -> Vec<Vec<(usize, usize)>> {
    fn rec(
        remaining: usize,
        k: usize,
        d_max: usize,
        prev: Option<usize>,
        cur: &mut Vec<(usize, usize)>,
        out: &mut Vec<Vec<(usize, usize)>>,
    ) {
        if remaining == 0 {
            out.push(cur.clone());
            return;
        }
        for d in 1..=d_max.min(remaining) {
            for z in 0..k {
                if Some(z) == prev {
                    continue;
                }
                cur.push((z, d));
                rec(remaining - d, k, d_max, Some(z), cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(s, k, d_max, None, &mut Vec::new(), &mut out);
    out
}

/// Cut positions of a segmentation, excluding 0 and S.
pub fn internal_boundaries(segs: &[(usize, usize)]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut t = 0usize;
    for &(_, d) in &segs[..segs.len().saturating_sub(1)] {
        t += d;
        out.push(t);
    }
    out
}

/// Span admissibility exactly as documented: a cut `c` is forbidden iff some
/// span `[a, b)` with `b - a <= d_max` has `a < c < b`.
pub fn segmentation_respects_spans(
    segs: &[(usize, usize)],
    spans: &[(usize, usize)],
    d_max: usize,
) -> bool {
    let cuts = internal_boundaries(segs);
    for &(a, b) in spans {
        if b - a > d_max {
            continue; // demoted
        }
        for &c in &cuts {
            if a < c && c < b {
                return false;
            }
        }
    }
    true
}

fn naive_softmax(xs: &[f64]) -> Vec<f64> {
    let exps: Vec<f64> = xs.iter().map(|&x| x.exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Straight-line recomputation of one segment's emission log-probability:
/// explicit gate arithmetic, naive softmax, no shared code with the library
/// beyond reading raw parameter arrays.
pub fn oracle_emission_logprob(p: &HsmmParams, state: usize, tokens: &[u32]) -> f64 {
    let hd = p.d2;
    let mut h = vec![0.0; hd];
    let mut prev = SEGSTART;
    let mut total = 0.0;
    for &tok in tokens {
        let mut x = Vec::with_capacity(p.d1 + p.d3);
        for t in 0..p.d1 {
            x.push(p.state_embeddings.get(state, t));
        }
        if (prev as usize) < p.vocab {
            for t in 0..p.d3 {
                x.push(p.word_embeddings.get(prev as usize, t));
            }
        } else {
            x.extend(std::iter::repeat(0.0).take(p.d3));
        }
        let mut h_new = vec![0.0; hd];
        for u in 0..hd {
            let mut gi_r = p.emission_cell.b_ih[u];
            let mut gi_z = p.emission_cell.b_ih[hd + u];
            let mut gi_n = p.emission_cell.b_ih[2 * hd + u];
            for (t, &xv) in x.iter().enumerate() {
                gi_r += p.emission_cell.w_ih.get(u, t) * xv;
                gi_z += p.emission_cell.w_ih.get(hd + u, t) * xv;
                gi_n += p.emission_cell.w_ih.get(2 * hd + u, t) * xv;
            }
            let mut gh_r = p.emission_cell.b_hh[u];
            let mut gh_z = p.emission_cell.b_hh[hd + u];
            let mut gh_n = p.emission_cell.b_hh[2 * hd + u];
            for (t, &hv) in h.iter().enumerate() {
                gh_r += p.emission_cell.w_hh.get(u, t) * hv;
                gh_z += p.emission_cell.w_hh.get(hd + u, t) * hv;
                gh_n += p.emission_cell.w_hh.get(2 * hd + u, t) * hv;
            }
            let r = logistic(gi_r + gh_r);
            let z = logistic(gi_z + gh_z);
            let n = (gi_n + r * gh_n).tanh();
            h_new[u] = (1.0 - z) * n + z * h[u];
        }
        h = h_new;
        let v: Vec<f64> = (0..hd).map(|u| p.gates.get(state, u) * h[u]).collect();
        let logits: Vec<f64> = (0..p.vocab)
            .map(|w| {
                let mut acc = p.out_b[w];
                for (u, &vv) in v.iter().enumerate() {
                    acc += p.out_w.get(w, u) * vv;
                }
                acc
            })
            .collect();
        total += naive_softmax(&logits)[tok as usize].ln();
        prev = tok;
    }
    total
}

/// Initial-state probabilities by naive softmax.
pub fn oracle_init_probs(p: &HsmmParams) -> Vec<f64> {
    naive_softmax(&p.init_logits)
}

/// Transition probabilities by naive softmax of recomputed scores (the
/// `-inf` diagonal contributes exp = 0).
pub fn oracle_transition_probs(p: &HsmmParams) -> Vec<Vec<f64>> {
    (0..p.k)
        .map(|i| {
            let scores: Vec<f64> = (0..p.k)
                .map(|j| {
                    let mut dot = 0.0;
                    for t in 0..p.d1 {
                        dot += p.state_embeddings.get(j, t) * p.state_embeddings.get(i, t);
                    }
                    dot + p.transition_bias.get(i, j)
                })
                .collect();
            naive_softmax(&scores)
        })
        .collect()
}

/// Joint log-probability of one segmentation: init, transitions, uniform
/// durations, emissions — all recomputed here.
pub fn oracle_joint_logprob(p: &HsmmParams, seq: &[u32], segs: &[(usize, usize)]) -> f64 {
    let init = oracle_init_probs(p);
    let trans = oracle_transition_probs(p);
    let mut ll = 0.0;
    let mut t = 0usize;
    let mut prev: Option<usize> = None;
    for &(z, d) in segs {
        ll += match prev {
            None => init[z].ln(),
            Some(i) => trans[i][z].ln(),
        };
        ll += -(p.d_max as f64).ln();
        ll += oracle_emission_logprob(p, z, &seq[t..t + d]);
        t += d;
        prev = Some(z);
    }
    ll
}

/// Brute-force marginal over all admissible segmentations, in plain space.
pub fn oracle_marginal(p: &HsmmParams, seq: &[u32], spans: &[(usize, usize)]) -> f64 {
    enumerate_segmentations(seq.len(), p.k, p.d_max)
        .into_iter()
        .filter(|segs| segmentation_respects_spans(segs, spans, p.d_max))
        .map(|segs| oracle_joint_logprob(p, seq, &segs).exp())
        .sum()
}

/// Preference order used by the documented tie-break: lexicographic over
/// segments, longer duration first, then smaller state.
pub fn preferred(a: &[(usize, usize)], b: &[(usize, usize)]) -> std::cmp::Ordering {
    for (sa, sb) in a.iter().zip(b.iter()) {
        match sb.1.cmp(&sa.1) {
            std::cmp::Ordering::Equal => {}
            ord => return ord,
        }
        match sa.0.cmp(&sb.0) {
            std::cmp::Ordering::Equal => {}
            ord => return ord,
        }
    }
    a.len().cmp(&b.len())
}

/// Enumerated argmax with the documented tie-break: among segmentations whose
/// joint log-probability is within `tie_eps` of the best, the most preferred.
pub fn oracle_viterbi(
    p: &HsmmParams,
    seq: &[u32],
    spans: &[(usize, usize)],
    tie_eps: f64,
) -> Vec<(usize, usize)> {
    let mut scored: Vec<(f64, Vec<(usize, usize)>)> = enumerate_segmentations(seq.len(), p.k, p.d_max)
        .into_iter()
        .filter(|segs| segmentation_respects_spans(segs, spans, p.d_max))
        .map(|segs| (oracle_joint_logprob(p, seq, &segs), segs))
        .collect();
    let best = scored.iter().map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
    scored.retain(|(s, _)| *s >= best - tie_eps);
    scored.sort_by(|a, b| preferred(&a.1, &b.1));
    scored.remove(0).1
}

/// Relative error with a floor that keeps near-zero coordinates meaningful:
/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Pearson chi-square statistic for observed counts against expected
/// probabilities.
pub fn chi_square(observed: &[usize], expected_probs: &[f64]) -> f64 {
    let n: usize = observed.iter().sum();
    observed
        .iter()
        .zip(expected_probs)
        .map(|(&o, &pe)| {
            let e = pe * n as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum()
}

/// Overwrite every finite entry of a parameter bundle with fresh uniform
/// noise on the f32 grid; structural `-inf` entries are preserved.
pub fn randomize_hsmm<R: rand::Rng>(p: &mut HsmmParams, rng: &mut R, scale: f64) {
    for (_, slot) in p.arrays_mut() {
        for x in slot.iter_mut() {
            if x.is_finite() {
                *x = (rng.gen_range(-scale..=scale) as f32) as f64;
            }
        }
    }
}
