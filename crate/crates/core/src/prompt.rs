//! Multi-modal prompt blocks.
//!
//! A block turns backbone tokens `H` and the previous prompts `P` into new
//! prompts:
//!
//! ```text
//! A_rgb = Conv_down_h(H)            A_p = Conv_down_p(P)
//! A_e   = A_rgb ⊙ (λ · softmax_spatial(A_rgb))
//! P'    = Conv_up(A_e + A_p)
//! ```
//!
//! The spatial softmax ("fovea") runs per channel, separately over the
//! template grid and the search grid. The first block consumes the RGB tokens
//! and the fused depth/thermal tokens.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Conv1x1, Graph, ParamId, ParamStore};
use crate::tokenizer::TokenSet;

pub const DEFAULT_REDUCTION: usize = 4;
pub const DEFAULT_LAMBDA: f64 = 1.0;

/// Per-channel spatial softmax over `[start, end)` columns, per region.
fn region_softmax(tape: &mut Tape, a: Var, n_template: usize) -> Var {
    let n = tape.shape(a).1;
    let mut parts = Vec::with_capacity(2);
    for (start, end) in [(0, n_template), (n_template, n)] {
        if start < end {
            let region = tape.slice_cols(a, start, end);
            parts.push(tape.softmax_rows(region));
        }
    }
    if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_cols(&parts)
    }
}

/// Records the fovea enhancement `A ⊙ (λ · softmax(A))`.
pub fn fovea_on(tape: &mut Tape, a: Var, lambda: Var, n_template: usize) -> Var {
    let weights = region_softmax(tape, a, n_template);
    let weights = tape.scale_by(weights, lambda);
    tape.mul(a, weights)
}

/// Fovea weights `λ · softmax` of a `C × n` token matrix whose first
/// `n_template` columns form the template region.
pub fn fovea_weights(a: &Array2<f64>, lambda: f64, n_template: usize) -> Array2<f64> {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let w = region_softmax(&mut tape, av, n_template.min(a.ncols()));
    tape.value(w) * lambda
}

/// Enhanced tokens `A ⊙ fovea_weights(A)`.
pub fn fovea(a: &Array2<f64>, lambda: f64, n_template: usize) -> Array2<f64> {
    a * &fovea_weights(a, lambda, n_template)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptBlockParams {
    pub conv_down_h: Conv1x1,
    pub conv_down_p: Conv1x1,
    pub conv_up: Conv1x1,
    pub lambda: f64,
    pub layer_index: usize,
}

impl PromptBlockParams {
    /// Registers `prompt.<layer>.*`. `reduction` must divide `channels`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        layer_index: usize,
        channels: usize,
        reduction: usize,
        lambda: f64,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Argument(format!(
                "reduction ratio {reduction} does not divide {channels} channels"
            )));
        }
        if !(lambda > 0.0) {
            return Err(Error::Argument(format!("lambda must be positive, got {lambda}")));
        }
        let inner = channels / reduction;
        let group = format!("prompt.{layer_index}");
        let std = (1.0 / channels as f64).sqrt();
        let conv_down_h = Conv1x1::new(store, rng, &format!("{group}.down_h"), &group, channels, inner, std, true);
        let conv_down_p = Conv1x1::new(store, rng, &format!("{group}.down_p"), &group, channels, inner, std, true);
        let conv_up = Conv1x1::new(store, rng, &format!("{group}.up"), &group, inner, channels, 0.01, true);
        Ok(Self {
            conv_down_h,
            conv_down_p,
            conv_up,
            lambda,
            layer_index,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.conv_down_h.weight,
            self.conv_down_h.bias,
            self.conv_down_p.weight,
            self.conv_down_p.bias,
            self.conv_up.weight,
            self.conv_up.bias,
        ]
    }

    /// Records the block with an explicit `λ` node.
    pub fn apply_with_lambda(&self, g: &mut Graph<'_>, h_prev: Var, p_prev: Var, lambda: Var, n_template: usize) -> Var {
        let a_rgb = self.conv_down_h.apply(g, h_prev);
        let a_p = self.conv_down_p.apply(g, p_prev);
        let enhanced = fovea_on(&mut g.tape, a_rgb, lambda, n_template);
        let sum = g.tape.add(enhanced, a_p);
        self.conv_up.apply(g, sum)
    }

    pub fn apply_on(&self, g: &mut Graph<'_>, h_prev: Var, p_prev: Var, n_template: usize) -> Var {
        let lambda = g.tape.scalar_constant(self.lambda);
        self.apply_with_lambda(g, h_prev, p_prev, lambda, n_template)
    }
}

/// Next prompts from backbone tokens `H^{l-1}` and prompts `P^{l-1}`.
pub fn prompt_block(
    store: &ParamStore,
    params: &PromptBlockParams,
    h_prev: &TokenSet,
    p_prev: &TokenSet,
) -> Result<TokenSet> {
    if !h_prev.same_layout(p_prev) {
        return Err(Error::shape(
            "prompt block input",
            format!("{:?}", h_prev.tokens.dim()),
            format!("{:?}", p_prev.tokens.dim()),
        ));
    }
    let c = params.conv_down_h.in_channels(store);
    if h_prev.channels() != c {
        return Err(Error::shape("token channels", c, h_prev.channels()));
    }
    let mut g = Graph::inference(store);
    let h = g.tape.constant(h_prev.tokens.clone());
    let p = g.tape.constant(p_prev.tokens.clone());
    let out = params.apply_on(&mut g, h, p, h_prev.n_template);
    TokenSet::new(g.tape.value(out).clone(), h_prev.modality, h_prev.n_template, h_prev.n_search)
}

/// First prompts `P^0` from the RGB tokens and the fused depth/thermal tokens.
pub fn initial_prompt(
    store: &ParamStore,
    params: &PromptBlockParams,
    t_rgb: &TokenSet,
    t_dtir: &TokenSet,
) -> Result<TokenSet> {
    prompt_block(store, params, t_rgb, t_dtir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_map_gives_lambda_over_n() {
        let a = Array2::from_elem((3, 5), 0.7);
        let w = fovea_weights(&a, 2.5, 0);
        assert!(w.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn two_position_example() {
        let a = array![[0.0, 3f64.ln()]];
        let w = fovea_weights(&a, 2.0, 0);
        assert!((w[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((w[[0, 1]] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn regions_are_normalized_separately() {
        let a = array![[1.0, 2.0, -1.0, 0.5, 4.0]];
        let w = fovea_weights(&a, 3.0, 2);
        assert!((w[[0, 0]] + w[[0, 1]] - 3.0).abs() < 1e-12);
        assert!((w[[0, 2]] + w[[0, 3]] + w[[0, 4]] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_lambda_zeroes_output() {
        let a = array![[1.0, -2.0], [0.3, 0.4]];
        assert!(fovea(&a, 0.0, 1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_reduction_rejected() {
        let mut store = ParamStore::new();
        let mut rng = rand::rng();
        assert!(PromptBlockParams::new(&mut store, &mut rng, 0, 10, 4, 1.0).is_err());
        assert!(PromptBlockParams::new(&mut store, &mut rng, 0, 8, 4, 0.0).is_err());
    }
}
