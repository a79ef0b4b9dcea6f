//! Training objectives: token/emission-level baselines, the structure-level
//! Top-K, weighted Top-K and posterior distillation losses, and the λ
//! interpolation with the gold negative log-likelihood.
//!
//! Each loss has a plain evaluator and a `*_grad` twin returning the gradient
//! with respect to the student's lattice scores, which the encoder turns into
//! parameter gradients.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kbest::KBestList;
use crate::lattice::{
    add_sequence_counts, posteriors, weighted_nll_and_grad, LabelSequence, Lattice, LatticeGrad,
    Marginals, PosteriorMatrix,
};
use crate::math::{exp, floored_ln, ln, log_add, log_sum_exp, PROB_FLOOR};
use crate::matrix::Matrix;

/// Which distillation objective a student trains against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdLossKind {
    /// Token-level cross-entropy for softmax-headed models.
    Token,
    /// Cross-entropy between softmax-normalized emission scores.
    Emission,
    /// Unweighted mean NLL of the teacher's k best sequences.
    TopK { k: usize },
    /// NLL of the teacher's k best sequences weighted by renormalized
    /// teacher probability.
    TopWK { k: usize },
    /// Cross-entropy between teacher and student token posteriors.
    Posterior,
    /// Mean of `TopWK` and `Posterior`.
    PosTopWK { k: usize },
}

impl KdLossKind {
    /// Builds a kind from its name (`token`, `emission`, `topk`, `topwk`,
    /// `posterior`, `pos_topwk`). `k` must be given iff the variant uses it.
    pub fn from_name(name: &str, k: Option<usize>) -> Result<Self> {
        let kind = match (name, k) {
            ("token", None) => KdLossKind::Token,
            ("emission", None) => KdLossKind::Emission,
            ("posterior", None) => KdLossKind::Posterior,
            ("topk", Some(k)) => KdLossKind::TopK { k },
            ("topwk", Some(k)) => KdLossKind::TopWK { k },
            ("pos_topwk", Some(k)) => KdLossKind::PosTopWK { k },
            ("token" | "emission" | "posterior", Some(_)) => {
                return Err(Error::contract(format!("KD loss {name} does not take k")))
            }
            ("topk" | "topwk" | "pos_topwk", None) => {
                return Err(Error::contract(format!("KD loss {name} requires k")))
            }
            _ => return Err(Error::contract(format!("unknown KD loss {name:?}"))),
        };
        if kind.k() == Some(0) {
            return Err(Error::contract("k must be at least 1"));
        }
        Ok(kind)
    }

    pub fn name(&self) -> &'static str {
        match self {
            KdLossKind::Token => "token",
            KdLossKind::Emission => "emission",
            KdLossKind::TopK { .. } => "topk",
            KdLossKind::TopWK { .. } => "topwk",
            KdLossKind::Posterior => "posterior",
            KdLossKind::PosTopWK { .. } => "pos_topwk",
        }
    }

    pub fn k(&self) -> Option<usize> {
        match *self {
            KdLossKind::TopK { k } | KdLossKind::TopWK { k } | KdLossKind::PosTopWK { k } => Some(k),
            _ => None,
        }
    }

    pub fn needs_kbest(&self) -> bool {
        self.k().is_some()
    }

    /// True when the teacher target includes token distributions (posteriors
    /// or emission softmax).
    pub fn needs_token_distributions(&self) -> bool {
        !matches!(self, KdLossKind::TopK { .. } | KdLossKind::TopWK { .. })
    }
}

/// λ and its per-epoch annealing rate τ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpolationState {
    lambda: f64,
    tau: f64,
}

impl InterpolationState {
    pub fn new(lambda: f64, tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::contract(format!("lambda {lambda} outside [0,1]")));
        }
        if !tau.is_finite() || tau < 0.0 {
            return Err(Error::contract(format!("tau {tau} must be finite and >= 0")));
        }
        Ok(InterpolationState { lambda, tau })
    }

    /// λ = 1, as at the start of distillation.
    pub fn initial(tau: f64) -> Result<Self> {
        Self::new(1.0, tau)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// `λ ← λ − τ` when that stays positive, otherwise `λ ← 0`.
    pub fn anneal(self) -> Self {
        let next = self.lambda - self.tau;
        InterpolationState {
            lambda: if next > 0.0 { next } else { 0.0 },
            tau: self.tau,
        }
    }
}

pub fn anneal_lambda(state: InterpolationState) -> InterpolationState {
    state.anneal()
}

/// `λ·kd + (1−λ)·nll`.
pub fn interpolated_loss(kd: f64, nll: f64, state: InterpolationState) -> f64 {
    let l = state.lambda;
    l * kd + (1.0 - l) * nll
}

fn check_same_shape(what: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            what,
            expected: a.rows() * a.cols(),
            got: b.rows() * b.cols(),
        });
    }
    Ok(())
}

fn cross_entropy(teacher: &Matrix, student: &Matrix) -> f64 {
    let mut loss = 0.0;
    for (&t, &s) in teacher.as_slice().iter().zip(student.as_slice()) {
        if t != 0.0 {
            loss -= t * floored_ln(s);
        }
    }
    loss
}

/// `−Σ_i Σ_j p_t(y_i=j) ln p_s(y_i=j)` over two row-stochastic matrices.
pub fn token_kd_loss(teacher_probs: &Matrix, student_probs: &Matrix) -> Result<f64> {
    check_same_shape("token distributions", teacher_probs, student_probs)?;
    Ok(cross_entropy(teacher_probs, student_probs))
}

fn check_compatible(teacher: &Lattice, student: &Lattice) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::ShapeMismatch {
            what: "lattice length",
            expected: teacher.len(),
            got: student.len(),
        });
    }
    if teacher.num_labels() != student.num_labels() {
        return Err(Error::ShapeMismatch {
            what: "label count",
            expected: teacher.num_labels(),
            got: student.num_labels(),
        });
    }
    Ok(())
}

/// Softmax of each emission row, transitions ignored.
pub fn emission_probs(lattice: &Lattice) -> Matrix {
    lattice.emissions().softmax_rows()
}

/// Token cross-entropy between the emission softmaxes of two lattices.
pub fn emission_kd_loss(teacher: &Lattice, student: &Lattice) -> Result<f64> {
    check_compatible(teacher, student)?;
    token_kd_loss(&emission_probs(teacher), &emission_probs(student))
}

/// Emission (or token) KD against precomputed teacher token distributions,
/// with the gradient on the student's emissions.
pub fn emission_kd_grad(teacher_probs: &Matrix, student: &Lattice) -> Result<(f64, LatticeGrad)> {
    let probs = emission_probs(student);
    check_same_shape("token distributions", teacher_probs, &probs)?;
    let loss = cross_entropy(teacher_probs, &probs);
    let mut grad = student.zero_grad();
    for i in 0..probs.rows() {
        let mass: f64 = teacher_probs.row(i).iter().sum();
        for j in 0..probs.cols() {
            grad.emissions
                .set(i, j, mass * probs.get(i, j) - teacher_probs.get(i, j));
        }
    }
    Ok((loss, grad))
}

fn check_kbest(teacher: &KBestList, student: &Lattice) -> Result<()> {
    if teacher.is_empty() {
        return Err(Error::contract("empty teacher k-best list"));
    }
    teacher
        .iter()
        .try_for_each(|e| student.check_sequence(&e.labels))
}

/// `−(1/k) Σ_{ŷ∈𝒯} ln p_s(ŷ|x)`.
pub fn topk_kd_loss(teacher: &KBestList, student: &Lattice) -> Result<f64> {
    Ok(topk_kd_grad(teacher, student)?.0)
}

pub fn topk_kd_grad(teacher: &KBestList, student: &Lattice) -> Result<(f64, LatticeGrad)> {
    check_kbest(teacher, student)?;
    let w = 1.0 / teacher.len() as f64;
    let targets: Vec<(&LabelSequence, f64)> = teacher.iter().map(|e| (&e.labels, w)).collect();
    weighted_nll_and_grad(student, &targets)
}

/// `−Σ_{y∈𝒯} p′_t(y|x) ln p_s(y|x)` with the list's renormalized weights.
pub fn topwk_kd_loss(teacher: &KBestList, student: &Lattice) -> Result<f64> {
    Ok(topwk_kd_grad(teacher, student)?.0)
}

pub fn topwk_kd_grad(teacher: &KBestList, student: &Lattice) -> Result<(f64, LatticeGrad)> {
    check_kbest(teacher, student)?;
    let targets: Vec<(&LabelSequence, f64)> =
        teacher.iter().map(|e| (&e.labels, e.weight)).collect();
    weighted_nll_and_grad(student, &targets)
}

/// `−Σ_i Σ_j q_t(y_i=j|x) ln q_s(y_i=j|x)`.
pub fn posterior_kd_loss(teacher: &PosteriorMatrix, student: &PosteriorMatrix) -> Result<f64> {
    token_kd_loss(teacher.matrix(), student.matrix())
}

/// Posterior KD against a student lattice, with the exact gradient.
///
/// With `R(y) = Σ_k q_t(y_k)/q_s(y_k)` the gradient is
/// `(Σ q_t)·E[φ] − E[φ·R]`; the second expectation is computed by a
/// first-order expectation-semiring forward-backward pass in log-space.
pub fn posterior_kd_grad(
    teacher: &PosteriorMatrix,
    student: &Lattice,
) -> Result<(f64, LatticeGrad)> {
    let (n, v) = (student.len(), student.num_labels());
    if teacher.len() != n || teacher.num_labels() != v {
        return Err(Error::ShapeMismatch {
            what: "posterior matrix",
            expected: n * v,
            got: teacher.len() * teacher.num_labels(),
        });
    }
    let m = Marginals::compute(student);
    let q = m.unary();
    let t = teacher.matrix();
    let loss = cross_entropy(t, &q);

    // ln r_k(j) = ln q_t - ln max(q_s, floor)
    let mut log_r = Matrix::zeros(n, v);
    for k in 0..n {
        for j in 0..v {
            let tv = t.get(k, j);
            let val = if tv > 0.0 {
                ln(tv) - ln(q.get(k, j).max(PROB_FLOOR))
            } else {
                f64::NEG_INFINITY
            };
            log_r.set(k, j, val);
        }
    }

    let (alpha, beta, log_z) = (&m.alpha, &m.beta, m.log_z);
    let mut alpha_r = Matrix::filled(n, v, f64::NEG_INFINITY);
    for y in 0..v {
        alpha_r.set(0, y, alpha.get(0, y) + log_r.get(0, y));
    }
    for k in 1..n {
        for y in 0..v {
            let carried =
                log_sum_exp((0..v).map(|p| alpha_r.get(k - 1, p) + student.score(k, p, y)));
            alpha_r.set(k, y, log_add(carried, alpha.get(k, y) + log_r.get(k, y)));
        }
    }
    let mut beta_r = Matrix::filled(n, v, f64::NEG_INFINITY);
    for k in (0..n - 1).rev() {
        for p in 0..v {
            let val = log_sum_exp((0..v).map(|y| {
                student.score(k + 1, p, y)
                    + log_add(beta_r.get(k + 1, y), log_r.get(k + 1, y) + beta.get(k + 1, y))
            }));
            beta_r.set(k, p, val);
        }
    }

    let total_mass: f64 = t.as_slice().iter().sum();
    let mut grad = student.zero_grad();
    m.add_expected_counts(student, total_mass, &mut grad);
    for k in 0..n {
        for y in 0..v {
            let u = exp(
                log_add(
                    alpha_r.get(k, y) + beta.get(k, y),
                    alpha.get(k, y) + beta_r.get(k, y),
                ) - log_z,
            );
            grad.emissions.add_at(k, y, -u);
            if k == 0 {
                grad.add_edge(0, v, y, -u);
            }
        }
    }
    for k in 1..n {
        for a in 0..v {
            for b in 0..v {
                let suffix = log_add(log_r.get(k, b) + beta.get(k, b), beta_r.get(k, b));
                let inner = log_add(
                    alpha_r.get(k - 1, a) + beta.get(k, b),
                    alpha.get(k - 1, a) + suffix,
                );
                let pw = exp(student.score(k, a, b) + inner - log_z);
                grad.add_edge(k, a, b, -pw);
            }
        }
    }
    Ok((loss, grad))
}

/// Mean of the weighted Top-K and posterior losses.
pub fn pos_topwk_loss(
    teacher_kbest: &KBestList,
    teacher_post: &PosteriorMatrix,
    student: &Lattice,
) -> Result<f64> {
    let topwk = topwk_kd_loss(teacher_kbest, student)?;
    let post = posterior_kd_loss(teacher_post, &posteriors(student))?;
    Ok(0.5 * (topwk + post))
}

pub fn pos_topwk_grad(
    teacher_kbest: &KBestList,
    teacher_post: &PosteriorMatrix,
    student: &Lattice,
) -> Result<(f64, LatticeGrad)> {
    let (a, mut ga) = topwk_kd_grad(teacher_kbest, student)?;
    let (b, gb) = posterior_kd_grad(teacher_post, student)?;
    ga.add_scaled(&gb, 1.0);
    ga.scale(0.5);
    Ok((0.5 * (a + b), ga))
}

/// Teacher pseudo-targets for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct KdTarget {
    pub kbest: Option<KBestList>,
    /// Token posteriors for `Posterior`/`PosTopWK`; emission softmax
    /// distributions for `Token`/`Emission`.
    pub distributions: Option<PosteriorMatrix>,
}

/// Dispatches to the loss selected by `kind`.
pub fn kd_loss_and_grad(
    kind: KdLossKind,
    target: &KdTarget,
    student: &Lattice,
) -> Result<(f64, LatticeGrad)> {
    let kbest = || {
        target
            .kbest
            .as_ref()
            .ok_or_else(|| Error::contract(format!("{} KD needs a k-best target", kind.name())))
    };
    let dists = || {
        target.distributions.as_ref().ok_or_else(|| {
            Error::contract(format!("{} KD needs token distributions", kind.name()))
        })
    };
    match kind {
        KdLossKind::Token | KdLossKind::Emission => emission_kd_grad(dists()?.matrix(), student),
        KdLossKind::TopK { .. } => topk_kd_grad(kbest()?, student),
        KdLossKind::TopWK { .. } => topwk_kd_grad(kbest()?, student),
        KdLossKind::Posterior => posterior_kd_grad(dists()?, student),
        KdLossKind::PosTopWK { .. } => pos_topwk_grad(kbest()?, dists()?, student),
    }
}

/// Token-level NLL for softmax-headed models: `−Σ_i ln softmax(e_i)[y_i]`,
/// with gradient on the emissions only.
pub fn token_nll_and_grad(student: &Lattice, gold: &LabelSequence) -> Result<(f64, LatticeGrad)> {
    student.check_sequence(gold)?;
    let probs = emission_probs(student);
    let mut grad = student.zero_grad();
    let mut loss = 0.0;
    for (i, &y) in gold.as_slice().iter().enumerate() {
        loss -= floored_ln(probs.get(i, y));
        grad.emissions.row_mut(i).copy_from_slice(probs.row(i));
    }
    // the gold indicator
    let mut ind = student.zero_grad();
    add_sequence_counts(student, gold.as_slice(), 1.0, &mut ind);
    grad.emissions
        .as_mut_slice()
        .iter_mut()
        .zip(ind.emissions.as_slice())
        .for_each(|(g, i)| *g -= i);
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kbest::kbest_viterbi;
    use crate::lattice::fixtures::*;
    use crate::lattice::sequence_log_prob;
    use alloc::vec;
    use std::f64::consts::LN_2;

    fn uniform_lattice(n: usize, v: usize) -> Lattice {
        Lattice::new(Matrix::zeros(n, v), Matrix::zeros(v + 1, v)).unwrap()
    }

    fn entropy(row: &[f64]) -> f64 {
        -row.iter().map(|p| p * ln(*p)).sum::<f64>()
    }

    #[test]
    fn token_kd_examples() {
        let u = Matrix::filled(3, 2, 0.5);
        assert!((token_kd_loss(&u, &u).unwrap() - 3.0 * LN_2).abs() < 1e-12);
        let oh = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(token_kd_loss(&oh, &oh).unwrap(), 0.0);
        let t = Matrix::from_rows(&[vec![0.57, 0.43], vec![0.44, 0.56]]).unwrap();
        let s = Matrix::filled(2, 2, 0.5);
        assert!((token_kd_loss(&t, &s).unwrap() - 2.0 * LN_2).abs() < 1e-12);
        assert!(token_kd_loss(&t, &u).is_err());
    }

    #[test]
    fn token_kd_floors_zero_student_mass() {
        let t = Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let s = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let l = token_kd_loss(&t, &s).unwrap();
        assert!((l - (-0.5 * ln(1e-12))).abs() < 1e-9);
    }

    #[test]
    fn emission_kd_examples() {
        let mut e = Matrix::zeros(3, 2);
        for i in 0..3 {
            e.set(i, i % 2, 50.0);
        }
        let l = Lattice::new(e, Matrix::zeros(3, 2)).unwrap();
        assert!(emission_kd_loss(&l, &l).unwrap() < 1e-9);
        let u = uniform_lattice(4, 3);
        assert!((emission_kd_loss(&u, &u).unwrap() - 4.0 * ln(3.0)).abs() < 1e-12);
        assert!(emission_kd_loss(&u, &uniform_lattice(3, 3)).is_err());
    }

    #[test]
    fn emission_kd_matches_scalar_evaluation() {
        let te = [[0.3, -1.2], [2.0, 0.5], [-0.7, -0.1]];
        let se = [[1.1, 0.4], [-0.3, 0.9], [0.0, 2.2]];
        let mut expected = 0.0;
        for i in 0..3 {
            let zt = libm::exp(te[i][0]) + libm::exp(te[i][1]);
            let zs = libm::exp(se[i][0]) + libm::exp(se[i][1]);
            for j in 0..2 {
                expected -= libm::exp(te[i][j]) / zt * libm::log(libm::exp(se[i][j]) / zs);
            }
        }
        let mk = |e: [[f64; 2]; 3]| {
            let rows: Vec<Vec<f64>> = e.iter().map(|r| r.to_vec()).collect();
            Lattice::new(Matrix::from_rows(&rows).unwrap(), Matrix::zeros(3, 2)).unwrap()
        };
        let got = emission_kd_loss(&mk(te), &mk(se)).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn topk_on_worked_example() {
        let l = worked_example();
        let top2 = kbest_viterbi(&l, 2).unwrap();
        let got = topk_kd_loss(&top2, &l).unwrap();
        let expected = -(ln(8.0 / 18.958_333_333_333_332) + ln(6.0 / 18.958_333_333_333_332)) / 2.0;
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 1.0074).abs() < 1e-3);
    }

    #[test]
    fn topk_single_and_uniform() {
        let l = worked_example();
        let top1 = kbest_viterbi(&l, 1).unwrap();
        let p = sequence_log_prob(&l, &top1.entries()[0].labels).unwrap();
        assert!((topk_kd_loss(&top1, &l).unwrap() + p).abs() < 1e-12);
        assert!((topwk_kd_loss(&top1, &l).unwrap() + p).abs() < 1e-12);
        let u = uniform_lattice(3, 2);
        let any = kbest_viterbi(&l, 3).unwrap();
        assert!((topk_kd_loss(&any, &u).unwrap() - ln(8.0)).abs() < 1e-12);
    }

    #[test]
    fn topwk_on_worked_example() {
        let l = worked_example();
        let top2 = kbest_viterbi(&l, 2).unwrap();
        let got = topwk_kd_loss(&top2, &l).unwrap();
        assert!((got - 0.9867).abs() < 1e-3);
        // exact weights are 8/14 and 6/14
        assert!((got - 0.986_094_363_688_217_8).abs() < 1e-12);
    }

    #[test]
    fn topwk_full_support_self_is_entropy() {
        let l = worked_example();
        let all = kbest_viterbi(&l, 8).unwrap();
        let h: f64 = -all.iter().map(|e| e.weight * ln(e.weight)).sum::<f64>();
        assert!((topwk_kd_loss(&all, &l).unwrap() - h).abs() < 1e-12);
    }

    #[test]
    fn posterior_kd_examples() {
        let q = posteriors(&worked_example());
        let h: f64 = (0..3).map(|k| entropy(q.matrix().row(k))).sum();
        let got = posterior_kd_loss(&q, &q).unwrap();
        assert!((got - h).abs() < 1e-12);
        // exact entropy sum of the worked example's posteriors
        assert!((got - 2.059_246_260_272_708).abs() < 1e-12);
        let oh = PosteriorMatrix::new(Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(posterior_kd_loss(&oh, &oh).unwrap(), 0.0);
        let su = posteriors(&uniform_lattice(3, 2));
        assert!((posterior_kd_loss(&q, &su).unwrap() - 3.0 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn pos_topwk_is_the_mean() {
        let l = worked_example();
        let top2 = kbest_viterbi(&l, 2).unwrap();
        let q = posteriors(&l);
        let got = pos_topwk_loss(&top2, &q, &l).unwrap();
        let expected =
            0.5 * (topwk_kd_loss(&top2, &l).unwrap() + posterior_kd_loss(&q, &q).unwrap());
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 1.522_670_311_980_463).abs() < 1e-12);
    }

    #[test]
    fn interpolation_and_annealing() {
        let s = InterpolationState::new(1.0, 0.5).unwrap();
        assert_eq!(interpolated_loss(2.0, 4.0, s), 2.0);
        let s0 = InterpolationState::new(0.0, 0.5).unwrap();
        assert_eq!(interpolated_loss(2.0, 4.0, s0), 4.0);
        let half = InterpolationState::new(0.5, 0.0).unwrap();
        assert_eq!(interpolated_loss(2.0, 4.0, half), 3.0);

        let a = s.anneal();
        assert_eq!(a.lambda(), 0.5);
        assert_eq!(a.anneal().lambda(), 0.0);
        assert_eq!(a.anneal().anneal().lambda(), 0.0);
        assert_eq!(InterpolationState::initial(1.0).unwrap().anneal().lambda(), 0.0);
        assert_eq!(half.anneal().lambda(), 0.5);
        assert!(InterpolationState::new(1.5, 0.1).is_err());
        assert!(InterpolationState::new(0.5, -0.1).is_err());
    }

    #[test]
    fn kind_parsing() {
        assert_eq!(
            KdLossKind::from_name("topwk", Some(3)).unwrap(),
            KdLossKind::TopWK { k: 3 }
        );
        assert!(KdLossKind::from_name("topwk", None).is_err());
        assert!(KdLossKind::from_name("posterior", Some(2)).is_err());
        assert!(KdLossKind::from_name("topk", Some(0)).is_err());
        assert!(KdLossKind::from_name("bogus", None).is_err());
    }

    #[test]
    fn dispatch_reports_missing_targets() {
        let l = worked_example();
        let empty = KdTarget {
            kbest: None,
            distributions: None,
        };
        assert!(kd_loss_and_grad(KdLossKind::Posterior, &empty, &l).is_err());
        assert!(kd_loss_and_grad(KdLossKind::TopK { k: 2 }, &empty, &l).is_err());
    }
}
