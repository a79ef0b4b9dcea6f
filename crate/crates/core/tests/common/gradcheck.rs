//! Central finite-difference checks, end-to-end through the encoder.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use structkd_core::objective::{sentence_loss, sentence_loss_and_grad, Distillation};
use structkd_core::{
    kbest_viterbi, losses, posteriors, InterpolationState, KdLossKind, KdTarget, LabelSequence,
    Lattice, Matrix, ModelDims, ModelParams, OutputHead,
};

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Magnitude below which the relative bound is taken against this floor.
pub const FLOOR: f64 = 1e-3;

pub fn within(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= REL_TOL * analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares `analytic` to central differences of `f` at `x`; returns the
/// worst violation ratio (≤ 1 passes).
pub fn check_vector(x: &mut [f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + STEP;
        let up = f(x);
        x[i] = orig - STEP;
        let down = f(x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let bound = REL_TOL * analytic[i].abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max((analytic[i] - numeric).abs() / bound);
    }
    worst
}

pub fn tiny_dims() -> ModelDims {
    ModelDims {
        vocab: 5,
        emb_dim: 3,
        hidden: 2,
        num_labels: 2,
    }
}

fn flatten(p: &ModelParams) -> Vec<f64> {
    let mut v = Vec::new();
    p.visit(|_, t| v.extend_from_slice(t));
    v
}

fn unflatten(p: &mut ModelParams, flat: &[f64]) {
    let mut i = 0;
    p.visit_mut(|_, t| {
        t.copy_from_slice(&flat[i..i + t.len()]);
        i += t.len();
    });
}

/// Teacher target for `kind` from a random teacher lattice of length `n`.
pub fn random_target(rng: &mut ChaCha8Rng, kind: KdLossKind, n: usize, v: usize) -> KdTarget {
    let em: Vec<f64> = (0..n * v).map(|_| rng.random_range(-2.0..2.0)).collect();
    let tr: Vec<f64> = (0..(v + 1) * v).map(|_| rng.random_range(-2.0..2.0)).collect();
    let teacher = Lattice::new(
        Matrix::from_vec(n, v, em).unwrap(),
        Matrix::from_vec(v + 1, v, tr).unwrap(),
    )
    .unwrap();
    let kbest = kind.k().map(|k| kbest_viterbi(&teacher, k).unwrap());
    let distributions = match kind {
        KdLossKind::Token | KdLossKind::Emission => Some(
            structkd_core::PosteriorMatrix::new(losses::emission_probs(&teacher)).unwrap(),
        ),
        KdLossKind::Posterior | KdLossKind::PosTopWK { .. } => Some(posteriors(&teacher)),
        _ => None,
    };
    KdTarget {
        kbest,
        distributions,
    }
}

pub const ALL_KINDS: [KdLossKind; 6] = [
    KdLossKind::Token,
    KdLossKind::Emission,
    KdLossKind::TopK { k: 3 },
    KdLossKind::TopWK { k: 3 },
    KdLossKind::Posterior,
    KdLossKind::PosTopWK { k: 3 },
];

/// End-to-end check of every parameter for one objective; returns the worst
/// violation ratio. `kind = None` is the pure gold NLL.
pub fn end_to_end(seed: u64, kind: Option<KdLossKind>, lambda: f64) -> f64 {
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let head = if kind == Some(KdLossKind::Token) {
        OutputHead::Softmax
    } else {
        OutputHead::Crf
    };
    let dims = tiny_dims();
    let mut params = ModelParams::init(dims, head, seed).unwrap();
    // widen the weights so gradients are not all tiny
    params.visit_mut(|_, t| t.iter_mut().for_each(|x| *x *= 5.0));
    assert!(params.num_params() <= 200);
    let n = rng.random_range(2..=4);
    let tokens: Vec<u32> = (0..n).map(|_| rng.random_range(0..dims.vocab as u32)).collect();
    let gold = LabelSequence((0..n).map(|_| rng.random_range(0..dims.num_labels)).collect());
    let target = kind.map(|k| random_target(&mut rng, k, n, dims.num_labels));
    let state = InterpolationState::new(lambda, 0.0).unwrap();

    let mut grads = params.zeros_like();
    let empty = KdTarget {
        kbest: None,
        distributions: None,
    };
    let tref = target.as_ref().unwrap_or(&empty);
    let kd = kind.map(|k| Distillation { kind: k, target: tref });
    sentence_loss_and_grad(&params, &tokens, None, &gold, kd, state, &mut grads).unwrap();
    let analytic = flatten(&grads);
    let mut x = flatten(&params);
    let mut probe = params.clone();
    check_vector(&mut x, &analytic, |flat| {
        unflatten(&mut probe, flat);
        sentence_loss(&probe, &tokens, &gold, kd, state).unwrap().total
    })
}
