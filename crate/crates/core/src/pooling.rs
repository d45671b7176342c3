//! Attention pooling: a reduction (spatial average), a reduction-equivariant
//! mapping (per-channel scaling by a category column) and a pool of category
//! parameters `theta[K x C]`.
//!
//! The selector scores every category with the linear logit
//! `z_c = sum_k avg(x)_k * theta[k, c]` and keeps the argmax. The map for the
//! winner is either collapsed over channels (a class activation map, `[1 x H
//! x W]`) or kept full rank (`[K x H x W]`). Selection is piecewise constant,
//! so gradients flow only through the winning branch.

use alloc::format;

use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamSet};
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};

/// Winning category and its lead over the runner-up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selection {
    pub category: usize,
    /// `score[winner] - max(other scores)`; infinite with one category.
    pub margin: f64,
}

/// Argmax with ties broken to the lowest index.
pub fn select_category(scores: &[f64]) -> usize {
    select(scores).category
}

pub fn select(scores: &[f64]) -> Selection {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    let runner_up = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    Selection {
        category: best,
        margin: scores.get(best).copied().unwrap_or(0.0) - runner_up,
    }
}

/// Category logits `theta^T avg(x) + score_bias`.
pub fn category_scores(tape: &mut Tape, x: Var, theta: Var, score_bias: Option<Var>) -> Result<Var> {
    let avg = tape.spatial_average(x)?;
    let z = tape.matvec(theta, avg, true)?;
    match score_bias {
        None => Ok(z),
        Some(b) => {
            if tape.shape(b) != tape.shape(z) {
                return Err(Error::BadShape {
                    op: "category_scores",
                    expected: format!("score bias of shape {}", tape.shape(z)),
                    got: tape.shape(b),
                });
            }
            tape.add(z, b)
        }
    }
}

fn select_on_tape(tape: &mut Tape, scores: Var) -> Selection {
    let sel = select(tape.value(scores).data());
    tape.note_kink(sel.margin);
    sel
}

/// Class activation map of the winning category: `[1 x H x W]`.
pub fn attention_map(tape: &mut Tape, x: Var, theta: Var) -> Result<(Var, Selection)> {
    let scores = category_scores(tape, x, theta, None)?;
    let sel = select_on_tape(tape, scores);
    let scaled = tape.scale_channels_by_column(x, theta, sel.category)?;
    Ok((tape.channel_sum(scaled)?, sel))
}

/// Full-rank variant: the per-channel scaled tensor of the winner, `[K x H x
/// W]`, with the winner picked from scores shifted by `score_bias`.
pub fn attention_map_fullrank(
    tape: &mut Tape,
    c: Var,
    theta: Var,
    score_bias: Option<Var>,
) -> Result<(Var, Selection)> {
    let scores = category_scores(tape, c, theta, score_bias)?;
    let sel = select_on_tape(tape, scores);
    Ok((tape.scale_channels_by_column(c, theta, sel.category)?, sel))
}

/// Instance-specific score bias `w_o (theta^T avg(attended))`.
pub fn instance_bias(tape: &mut Tape, attended: Var, theta: Var, w_o: Var) -> Result<Var> {
    let avg = tape.spatial_average(attended)?;
    let z = tape.matvec(theta, avg, true)?;
    tape.matvec(w_o, z, false)
}

/// A category parameter pool `theta[K x C]` stored in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolingModel {
    pub theta: ParamId,
    pub depth: usize,
    pub categories: usize,
}

impl PoolingModel {
    /// Registers `theta` initialized uniformly in `[-1/sqrt(K), 1/sqrt(K)]`.
    pub fn new(
        name: &str,
        depth: usize,
        categories: usize,
        params: &mut ParamSet,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if categories < 2 {
            return Err(Error::InvalidConfig(format!(
                "pooling needs at least 2 categories, got {categories}"
            )));
        }
        let bound = 1.0 / crate::math::sqrt(depth as f64);
        let theta = params.add_uniform(name, &[depth, categories], bound, rng)?;
        Ok(PoolingModel {
            theta,
            depth,
            categories,
        })
    }

    pub fn scores(&self, tape: &mut Tape, bind: &Binding, x: Var, bias: Option<Var>) -> Result<Var> {
        category_scores(tape, x, bind.var(self.theta), bias)
    }

    pub fn attention_map(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<(Var, Selection)> {
        attention_map(tape, x, bind.var(self.theta))
    }

    pub fn attention_map_fullrank(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        c: Var,
        bias: Option<Var>,
    ) -> Result<(Var, Selection)> {
        attention_map_fullrank(tape, c, bind.var(self.theta), bias)
    }
}

/// The `w_o[C x C]` regression that turns attended input into a score bias
/// for a [`PoolingModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BiasController {
    pub w_o: ParamId,
}

impl BiasController {
    pub fn new(name: &str, categories: usize, params: &mut ParamSet, rng: &mut SplitMix64) -> Result<Self> {
        let bound = 1.0 / crate::math::sqrt(categories as f64);
        let w_o = params.add_uniform(name, &[categories, categories], bound, rng)?;
        Ok(BiasController { w_o })
    }

    pub fn instance_bias(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        attended: Var,
        pool: &PoolingModel,
    ) -> Result<Var> {
        instance_bias(tape, attended, bind.var(pool.theta), bind.var(self.w_o))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    #[test]
    fn argmax_basics_and_ties() {
        assert_eq!(select_category(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(select_category(&[0.5, 0.5]), 0);
        let s = select(&[0.1, 0.9, 0.3]);
        assert!((s.margin - 0.6).abs() < 1e-15);
    }

    #[test]
    fn zero_input_scores_equal_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 2, 2]).unwrap());
        let th = tape.constant(Tensor::full(&[3, 4], 0.7).unwrap());
        let z = category_scores(&mut tape, x, th, None).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
        let b = tape.constant(Tensor::new(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let z = category_scores(&mut tape, x, th, Some(b)).unwrap();
        assert_eq!(tape.value(z).data(), &[1.0, -2.0, 0.5, 3.0]);
    }

    #[test]
    fn wrong_bias_length_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 2, 2]).unwrap());
        let th = tape.constant(Tensor::zeros(&[3, 4]).unwrap());
        let b = tape.constant(Tensor::zeros(&[3]).unwrap());
        assert!(category_scores(&mut tape, x, th, Some(b)).is_err());
    }

    #[test]
    fn single_channel_unit_theta_returns_input() {
        let mut tape = Tape::new();
        let xt = Tensor::new(&[1, 2, 3], vec![0.1, 0.2, -0.3, 0.4, 0.5, 0.6]).unwrap();
        let x = tape.constant(xt.clone());
        let th = tape.constant(Tensor::full(&[1, 3], 1.0).unwrap());
        let (nu, _) = attention_map(&mut tape, x, th).unwrap();
        assert_eq!(tape.value(nu).data(), xt.data());
    }

    #[test]
    fn channel_constant_input_gives_flat_map() {
        let mut tape = Tape::new();
        let mut d = vec![0.0; 3 * 9];
        for (k, v) in [0.4, -1.2, 2.0].iter().enumerate() {
            d[k * 9..(k + 1) * 9].fill(*v);
        }
        let x = tape.constant(Tensor::new(&[3, 3, 3], d).unwrap());
        let th = tape.constant(Tensor::new(&[3, 2], vec![0.3, -0.2, 0.9, 0.1, -0.5, 0.7]).unwrap());
        let (nu, _) = attention_map(&mut tape, x, th).unwrap();
        let v = tape.value(nu).data();
        assert!(v.iter().all(|&a| a == v[0]));
    }

    #[test]
    fn fullrank_identity_column_and_zero_memory() {
        let mut tape = Tape::new();
        let ct = Tensor::new(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = tape.constant(ct.clone());
        // column 1 wins (all ones vs all zeros) and scales by one
        let th = tape.constant(Tensor::new(&[2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
        let (nu, sel) = attention_map_fullrank(&mut tape, c, th, None).unwrap();
        assert_eq!(sel.category, 1);
        assert_eq!(tape.value(nu), &ct);

        let z = tape.constant(Tensor::zeros(&[2, 1, 2]).unwrap());
        let b = tape.constant(Tensor::new(&[2], vec![0.0, -1.0]).unwrap());
        let (nu, sel) = attention_map_fullrank(&mut tape, z, th, Some(b)).unwrap();
        assert_eq!(sel.category, 0);
        assert!(tape.value(nu).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_bias_with_zero_and_identity_regression() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 1, 2], vec![1.0, 3.0, -2.0, 0.0]).unwrap());
        let th = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let w0 = tape.constant(Tensor::zeros(&[2, 2]).unwrap());
        let b = instance_bias(&mut tape, x, th, w0).unwrap();
        assert_eq!(tape.value(b).data(), &[0.0, 0.0]);
        let eye = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = instance_bias(&mut tape, x, th, eye).unwrap();
        let raw = category_scores(&mut tape, x, th, None).unwrap();
        assert_eq!(tape.value(b).data(), tape.value(raw).data());
    }

    #[test]
    fn pooling_model_rejects_single_category() {
        let mut ps = ParamSet::new();
        let mut rng = SplitMix64::new(1);
        assert!(PoolingModel::new("p", 4, 1, &mut ps, &mut rng).is_err());
    }
}
