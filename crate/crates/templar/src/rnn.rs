//! Gated recurrent unit used by every sequence model in the crate.
//!
//! Gate layout follows the common `[reset; update; candidate]` stacking: the
//! input and hidden weight matrices have `3 * hidden` rows. The same cell has
//! two execution paths — a plain `f64` step for inference-only code and a
//! taped step for training — kept in lockstep by tests.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::math::{self, Mat};
use crate::tape::{Tape, Var};

/// GRU parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GruCell {
    pub input: usize,
    pub hidden: usize,
    /// `3H x I` input weights, rows stacked `[reset; update; candidate]`.
    pub w_ih: Mat,
    /// `3H x H` hidden weights, same stacking.
    pub w_hh: Mat,
    pub b_ih: Vec<f64>,
    pub b_hh: Vec<f64>,
}

impl GruCell {
    /// Uniform init in `±1/sqrt(hidden)`, pre-snapped to the f32 grid.
    pub fn new_seeded<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (hidden as f64).sqrt();
        GruCell {
            input,
            hidden,
            w_ih: Mat::from_vec(3 * hidden, input, math::uniform_init(rng, 3 * hidden * input, scale)),
            w_hh: Mat::from_vec(3 * hidden, hidden, math::uniform_init(rng, 3 * hidden * hidden, scale)),
            b_ih: math::uniform_init(rng, 3 * hidden, scale),
            b_hh: math::uniform_init(rng, 3 * hidden, scale),
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruCell {
            input,
            hidden,
            w_ih: Mat::zeros(3 * hidden, input),
            w_hh: Mat::zeros(3 * hidden, hidden),
            b_ih: vec![0.0; 3 * hidden],
            b_hh: vec![0.0; 3 * hidden],
        }
    }

    /// One recurrence step: `h' = (1 - z) ⊙ n + z ⊙ h`.
    pub fn step(&self, h: &[f64], x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(h.len(), self.hidden);
        debug_assert_eq!(x.len(), self.input);
        let hd = self.hidden;
        let gi = self.w_ih.affine(x, &self.b_ih);
        let gh = self.w_hh.affine(h, &self.b_hh);
        let mut out = vec![0.0; hd];
        for k in 0..hd {
            let r = math::sigmoid(gi[k] + gh[k]);
            let z = math::sigmoid(gi[hd + k] + gh[hd + k]);
            let n = (gi[2 * hd + k] + r * gh[2 * hd + k]).tanh();
            out[k] = (1.0 - z) * n + z * h[k];
        }
        out
    }
}

/// Tape handles for one GRU's parameters.
#[derive(Copy, Clone)]
pub struct GruVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
    pub hidden: usize,
}

impl GruVars {
    /// Register `cell`'s parameters as tape leaves.
    pub fn leaf(tape: &mut Tape, cell: &GruCell) -> Self {
        GruVars {
            w_ih: tape.leaf(cell.w_ih.clone()),
            w_hh: tape.leaf(cell.w_hh.clone()),
            b_ih: tape.leaf_vector(&cell.b_ih),
            b_hh: tape.leaf_vector(&cell.b_hh),
            hidden: cell.hidden,
        }
    }

    /// Taped twin of [`GruCell::step`].
    pub fn step(&self, tape: &mut Tape, h: Var, x: Var) -> Var {
        let hd = self.hidden;
        let gi = tape.affine(self.w_ih, x, self.b_ih);
        let gh = tape.affine(self.w_hh, h, self.b_hh);
        let gi_r = tape.slice(gi, 0, hd);
        let gh_r = tape.slice(gh, 0, hd);
        let gi_z = tape.slice(gi, hd, hd);
        let gh_z = tape.slice(gh, hd, hd);
        let gi_n = tape.slice(gi, 2 * hd, hd);
        let gh_n = tape.slice(gh, 2 * hd, hd);

        let r_pre = tape.add(gi_r, gh_r);
        let r = tape.sigmoid(r_pre);
        let z_pre = tape.add(gi_z, gh_z);
        let z = tape.sigmoid(z_pre);
        let rgh = tape.mul(r, gh_n);
        let n_pre = tape.add(gi_n, rgh);
        let n = tape.tanh(n_pre);

        let one_minus_z = tape.affine_scalar(z, -1.0, 1.0);
        let a = tape.mul(one_minus_z, n);
        let b = tape.mul(z, h);
        tape.add(a, b)
    }
}
