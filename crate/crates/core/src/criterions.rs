//! Training criterions: `(model, batch) -> summed token loss`.

use std::fmt;

use crate::data::{MiniBatch, PAD};
use crate::error::{Error, Result};
use crate::model::{ForwardCtx, Model};
use crate::numerics::{Tape, Var};
use crate::registry::{Criterions, KeySpec, Plugin, Registry};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriterionOutput {
    /// Scalar loss node, summed over non-pad target tokens.
    pub loss: Var,
    pub loss_value: f32,
    pub ntokens: usize,
    /// Summed negative log-likelihood of the gold tokens.
    pub nll: f64,
    /// Gold tokens that are also the argmax.
    pub correct: usize,
}

/// A loss with full access to the model.
pub trait Criterion: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    fn compute(
        &self,
        model: &dyn Model,
        params: &[f32],
        batch: &MiniBatch,
        tape: &mut Tape,
        ctx: &ForwardCtx,
    ) -> Result<CriterionOutput>;
}

/// Label-smoothed token loss from logits already on `tape`.
///
/// Per non-pad position the loss is `(1 - eps) * nll + eps * mean_v(-log p_v)`;
/// with `eps == 0` only the gold entries carry weight.
pub fn smoothed_token_loss(tape: &mut Tape, logits: Var, targets: &[u32], epsilon: f32) -> Result<CriterionOutput> {
    let v = tape.value(logits).cols();
    if tape.value(logits).rows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} targets",
            tape.value(logits).rows(),
            targets.len()
        )));
    }
    let lprobs = tape.log_softmax(logits)?;
    let smooth = -epsilon / v as f32;
    let gold = -(1.0 - epsilon);
    let mut weights = vec![0.0f32; targets.len() * v];
    let mut ntokens = 0;
    let mut nll = 0.0f64;
    let mut correct = 0;
    let lp = tape.value(lprobs).data();
    for (r, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        let t = t as usize;
        if t >= v {
            return Err(Error::Bounds { index: t, len: v });
        }
        ntokens += 1;
        let row = &lp[r * v..(r + 1) * v];
        nll -= f64::from(row[t]);
        let argmax = row
            .iter()
            .enumerate()
            .fold(0, |best, (i, &x)| if x > row[best] { i } else { best });
        correct += usize::from(argmax == t);
        let w = &mut weights[r * v..(r + 1) * v];
        if epsilon != 0.0 {
            w.fill(smooth);
            w[t] = gold + smooth;
        } else {
            w[t] = gold;
        }
    }
    let loss = tape.weighted_sum(lprobs, weights)?;
    Ok(CriterionOutput {
        loss,
        loss_value: tape.value(loss).data()[0],
        ntokens,
        nll,
        correct,
    })
}

#[derive(Clone, Debug, Default)]
pub struct CrossEntropy;

impl Criterion for CrossEntropy {
    fn name(&self) -> &str {
        "cross_entropy"
    }

    fn compute(
        &self,
        model: &dyn Model,
        params: &[f32],
        batch: &MiniBatch,
        tape: &mut Tape,
        ctx: &ForwardCtx,
    ) -> Result<CriterionOutput> {
        let logits = model.forward_train(params, tape, batch, ctx)?;
        smoothed_token_loss(tape, logits, &batch.target_output, 0.0)
    }
}

#[derive(Clone, Debug)]
pub struct LabelSmoothedCrossEntropy {
    pub epsilon: f32,
}

impl LabelSmoothedCrossEntropy {
    pub fn new(epsilon: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::ConfigValue {
                key: "label_smoothing".into(),
                message: format!("{epsilon} outside [0, 1)"),
            });
        }
        Ok(Self { epsilon })
    }
}

impl Criterion for LabelSmoothedCrossEntropy {
    fn name(&self) -> &str {
        "label_smoothed_cross_entropy"
    }

    fn compute(
        &self,
        model: &dyn Model,
        params: &[f32],
        batch: &MiniBatch,
        tape: &mut Tape,
        ctx: &ForwardCtx,
    ) -> Result<CriterionOutput> {
        let logits = model.forward_train(params, tape, batch, ctx)?;
        smoothed_token_loss(tape, logits, &batch.target_output, self.epsilon)
    }
}

pub fn register_builtins(registry: &mut Registry) -> Result<()> {
    registry.register::<Criterions>(
        "cross_entropy",
        Plugin::new("seqforge", vec![], |_, _| {
            Ok(Box::new(CrossEntropy) as Box<dyn Criterion>)
        }),
    )?;
    registry.register::<Criterions>(
        "label_smoothed_cross_entropy",
        Plugin::new(
            "seqforge",
            vec![KeySpec::new(
                "label_smoothing",
                0.1,
                "smoothing mass spread over the vocabulary",
            )],
            |c, _| {
                let eps = c.get_real("label_smoothing")? as f32;
                Ok(Box::new(LabelSmoothedCrossEntropy::new(eps)?) as Box<dyn Criterion>)
            },
        ),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{DType, Tensor};

    fn loss_for(logits: Vec<f32>, v: usize, targets: &[u32], eps: f32) -> CriterionOutput {
        let mut tape = Tape::new(DType::F32);
        let rows = logits.len() / v;
        let x = tape.constant(Tensor::new(vec![rows, v], logits).unwrap());
        smoothed_token_loss(&mut tape, x, targets, eps).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let out = loss_for(vec![0.0; 4], 4, &[2], 0.0);
        assert!((out.loss_value - 4f32.ln()).abs() < 1e-6);
        assert_eq!(out.ntokens, 1);
        for eps in [0.1, 0.5, 0.9] {
            let out = loss_for(vec![0.0; 4], 4, &[2], eps);
            assert!((out.loss_value - 4f32.ln()).abs() < 1e-6, "eps {eps}");
        }
    }

    #[test]
    fn saturated_gold_has_tiny_loss() {
        let out = loss_for(vec![0.0, 0.0, 1e4, 0.0], 4, &[2], 0.0);
        assert!(out.loss_value < 1e-3);
        assert_eq!(out.correct, 1);
    }

    #[test]
    fn pad_positions_are_ignored() {
        let out = loss_for(vec![0.0; 8], 4, &[2, PAD], 0.0);
        assert_eq!(out.ntokens, 1);
        assert!((out.loss_value - 4f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn zero_smoothing_is_bitwise_cross_entropy() {
        let logits = vec![0.3, -1.2, 2.5, 0.7, 0.1, 0.0, -0.4, 1.9];
        let a = loss_for(logits.clone(), 4, &[1, 3], 0.0);
        let b = LabelSmoothedCrossEntropy::new(0.0).unwrap();
        let mut tape = Tape::new(DType::F32);
        let x = tape.constant(Tensor::new(vec![2, 4], logits).unwrap());
        let c = smoothed_token_loss(&mut tape, x, &[1, 3], b.epsilon).unwrap();
        assert_eq!(a.loss_value.to_bits(), c.loss_value.to_bits());
    }

    #[test]
    fn hand_computed_smoothing() {
        // p = [1/4, 1/4, 1/2]; nll = ln 2; mean(-log p) = 5 ln 2 / 3
        let expected = (0.9 + 0.1 * 5.0 / 3.0) * 2f64.ln();
        let out = loss_for(vec![0.0, 0.0, 2f32.ln()], 3, &[2], 0.1);
        assert!((f64::from(out.loss_value) - expected).abs() < 1e-6);
    }
}
