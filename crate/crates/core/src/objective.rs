//! Per-sentence training objective: encoder forward pass, gold NLL, optional
//! KD term, λ interpolation, and backpropagation into parameter gradients.

use crate::encoder::{backward, forward, ModelParams, OutputHead};
use crate::error::{Error, Result};
use crate::kbest::viterbi;
use crate::lattice::{nll_and_grad, LabelSequence, Lattice, LatticeGrad};
use crate::losses::{interpolated_loss, kd_loss_and_grad, token_nll_and_grad, InterpolationState, KdLossKind, KdTarget};
use crate::matrix::Matrix;

/// KD part of an objective: the loss kind and this sentence's teacher target.
#[derive(Debug, Clone, Copy)]
pub struct Distillation<'a> {
    pub kind: KdLossKind,
    pub target: &'a KdTarget,
}

/// Loss components of one sentence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SentenceLoss {
    pub total: f64,
    pub nll: f64,
    /// `None` when the KD term was skipped (no distillation or λ = 0).
    pub kd: Option<f64>,
}

fn check_head(kind: KdLossKind, head: OutputHead) -> Result<()> {
    match (kind, head) {
        (KdLossKind::Token | KdLossKind::Emission, _) | (_, OutputHead::Crf) => Ok(()),
        (k, OutputHead::Softmax) => Err(Error::contract(alloc::format!(
            "{} distillation needs a CRF output head",
            k.name()
        ))),
    }
}

fn gold_loss(head: OutputHead, lattice: &Lattice, gold: &LabelSequence) -> Result<(f64, LatticeGrad)> {
    match head {
        OutputHead::Crf => nll_and_grad(lattice, gold),
        OutputHead::Softmax => token_nll_and_grad(lattice, gold),
    }
}

/// Evaluates `λ·L_KD + (1−λ)·L_NLL` on one sentence and adds its parameter
/// gradient to `grads`. With `kd = None` (or λ = 0) the KD term is not
/// evaluated and the loss is the gold loss exactly.
pub fn sentence_loss_and_grad(
    params: &ModelParams,
    tokens: &[u32],
    dropout: Option<&Matrix>,
    gold: &LabelSequence,
    kd: Option<Distillation<'_>>,
    state: InterpolationState,
    grads: &mut ModelParams,
) -> Result<SentenceLoss> {
    let (emissions, trace) = forward(params, tokens, dropout)?;
    let lattice = params.lattice(emissions)?;
    let (nll, mut g) = gold_loss(params.head, &lattice, gold)?;
    let lambda = state.lambda();
    let kd_term = match kd {
        Some(d) if lambda > 0.0 => {
            check_head(d.kind, params.head)?;
            Some(kd_loss_and_grad(d.kind, d.target, &lattice)?)
        }
        _ => None,
    };
    let (total, kd_value) = match kd_term {
        Some((kd_loss, kd_grad)) => {
            g.scale(1.0 - lambda);
            g.add_scaled(&kd_grad, lambda);
            (interpolated_loss(kd_loss, nll, state), Some(kd_loss))
        }
        None => (nll, None),
    };
    backward(params, &trace, &g.emissions, grads)?;
    if params.head == OutputHead::Crf {
        let t = g.transition_total();
        grads
            .transitions
            .iter_mut()
            .zip(t.as_slice())
            .for_each(|(a, b)| *a += b);
    }
    Ok(SentenceLoss {
        total,
        nll,
        kd: kd_value,
    })
}

/// Loss only, without gradients.
pub fn sentence_loss(
    params: &ModelParams,
    tokens: &[u32],
    gold: &LabelSequence,
    kd: Option<Distillation<'_>>,
    state: InterpolationState,
) -> Result<SentenceLoss> {
    let mut scratch = params.zeros_like();
    sentence_loss_and_grad(params, tokens, None, gold, kd, state, &mut scratch)
}

/// The model's lattice for one sentence.
pub fn sentence_lattice(params: &ModelParams, tokens: &[u32]) -> Result<Lattice> {
    let (emissions, _) = forward(params, tokens, None)?;
    params.lattice(emissions)
}

/// Best labeling: Viterbi for CRF heads, per-token argmax for softmax heads.
pub fn decode(params: &ModelParams, tokens: &[u32]) -> Result<LabelSequence> {
    let lattice = sentence_lattice(params, tokens)?;
    Ok(match params.head {
        OutputHead::Crf => viterbi(&lattice),
        OutputHead::Softmax => {
            let e = lattice.emissions();
            LabelSequence(
                (0..e.rows())
                    .map(|i| {
                        let row = e.row(i);
                        let mut best = 0;
                        for (j, &x) in row.iter().enumerate() {
                            if x > row[best] {
                                best = j;
                            }
                        }
                        best
                    })
                    .collect(),
            )
        }
    })
}
