//! Linear-chain CRF lattices and exact log-space inference over them.
//!
//! A lattice of length `n` over `V` labels holds an `n × V` emission matrix
//! and a `(V+1) × V` transition table whose last row is the start symbol.
//! The log-potential of entering label `cur` at position `pos` from `prev` is
//! `emissions[pos][cur] + transitions[prev][cur]`.
//!
//! Lattices may also carry one transition table per position. Trained models
//! never produce those, but hand-specified potential tables (such as a worked
//! example with different pairwise factors at each step) need them.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{exp, ln, log_sum_exp};
use crate::matrix::Matrix;

/// Left context of a potential: the start symbol or a predictable label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prev {
    Start,
    Label(usize),
}

/// One labeling of a sentence, as label indices.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LabelSequence(pub Vec<usize>);

impl LabelSequence {
    pub fn new(labels: Vec<usize>) -> Self {
        LabelSequence(labels)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for LabelSequence {
    fn from(v: Vec<usize>) -> Self {
        LabelSequence(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Transitions {
    Shared(Matrix),
    PerPosition(Vec<Matrix>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    emissions: Matrix,
    transitions: Transitions,
}

fn check_finite(what: &'static str, xs: &[f64]) -> Result<()> {
    if let Some(x) = xs.iter().find(|x| !x.is_finite()) {
        return Err(Error::contract(format!("{what} contains non-finite score {x}")));
    }
    Ok(())
}

fn check_transition_shape(t: &Matrix, labels: usize) -> Result<()> {
    if t.rows() != labels + 1 || t.cols() != labels {
        return Err(Error::ShapeMismatch {
            what: "transition table (rows*cols)",
            expected: (labels + 1) * labels,
            got: t.rows() * t.cols(),
        });
    }
    check_finite("transitions", t.as_slice())
}

impl Lattice {
    /// Lattice with one transition table shared by every position.
    pub fn new(emissions: Matrix, transitions: Matrix) -> Result<Self> {
        Self::check_emissions(&emissions)?;
        check_transition_shape(&transitions, emissions.cols())?;
        Ok(Lattice {
            emissions,
            transitions: Transitions::Shared(transitions),
        })
    }

    /// Lattice with a separate `(V+1) × V` transition table per position.
    /// At position 0 only the start row is read; elsewhere only label rows.
    pub fn with_position_transitions(emissions: Matrix, transitions: Vec<Matrix>) -> Result<Self> {
        Self::check_emissions(&emissions)?;
        if transitions.len() != emissions.rows() {
            return Err(Error::ShapeMismatch {
                what: "per-position transition tables",
                expected: emissions.rows(),
                got: transitions.len(),
            });
        }
        for t in &transitions {
            check_transition_shape(t, emissions.cols())?;
        }
        Ok(Lattice {
            emissions,
            transitions: Transitions::PerPosition(transitions),
        })
    }

    /// Builds a lattice from raw (non-log) potentials `ψ(prev, cur)` per
    /// position, each table `(V+1) × V` with the start row last. Emissions are
    /// zero. Potentials must be strictly positive.
    pub fn from_raw_potentials(potentials: &[Matrix]) -> Result<Self> {
        let first = potentials
            .first()
            .ok_or_else(|| Error::contract("lattice needs at least one position"))?;
        let labels = first.cols();
        let mut tables = Vec::with_capacity(potentials.len());
        for p in potentials {
            if let Some(x) = p.as_slice().iter().find(|&&x| !x.is_finite() || x <= 0.0) {
                return Err(Error::contract(format!("potential {x} is not strictly positive")));
            }
            let logs: Vec<f64> = p.as_slice().iter().map(|&x| ln(x)).collect();
            tables.push(Matrix::from_vec(p.rows(), p.cols(), logs)?);
        }
        Self::with_position_transitions(Matrix::zeros(potentials.len(), labels), tables)
    }

    fn check_emissions(emissions: &Matrix) -> Result<()> {
        if emissions.rows() == 0 {
            return Err(Error::contract("lattice needs at least one position"));
        }
        if emissions.cols() == 0 {
            return Err(Error::contract("lattice needs at least one label"));
        }
        check_finite("emissions", emissions.as_slice())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.emissions.rows()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn num_labels(&self) -> usize {
        self.emissions.cols()
    }

    pub fn emissions(&self) -> &Matrix {
        &self.emissions
    }

    /// The shared transition table, if this lattice has one.
    pub fn shared_transitions(&self) -> Option<&Matrix> {
        match &self.transitions {
            Transitions::Shared(t) => Some(t),
            Transitions::PerPosition(_) => None,
        }
    }

    /// Copy of this lattice with `delta` added to every emission at `pos`.
    pub fn shift_emissions(&self, pos: usize, delta: f64) -> Lattice {
        let mut out = self.clone();
        for x in out.emissions.row_mut(pos) {
            *x += delta;
        }
        out
    }

    #[inline]
    fn table(&self, pos: usize) -> &Matrix {
        match &self.transitions {
            Transitions::Shared(t) => t,
            Transitions::PerPosition(ts) => &ts[pos],
        }
    }

    /// Log-potential with `prev` given as a raw row index (`num_labels()` is
    /// the start row). No bounds checks beyond slice indexing.
    #[inline]
    pub(crate) fn score(&self, pos: usize, prev: usize, cur: usize) -> f64 {
        self.emissions.get(pos, cur) + self.table(pos).get(prev, cur)
    }

    /// `ln ψ(prev, cur, r_pos)`.
    pub fn log_potential(&self, prev: Prev, cur: usize, pos: usize) -> Result<f64> {
        let v = self.num_labels();
        if pos >= self.len() {
            return Err(Error::IndexOutOfRange {
                what: "position",
                index: pos,
                limit: self.len(),
            });
        }
        if cur >= v {
            return Err(Error::IndexOutOfRange {
                what: "label",
                index: cur,
                limit: v,
            });
        }
        let row = match (prev, pos) {
            (Prev::Start, 0) => v,
            (Prev::Start, _) => {
                return Err(Error::contract(format!("start symbol used at position {pos}")))
            }
            (Prev::Label(_), 0) => {
                return Err(Error::contract("position 0 is always entered from start"))
            }
            (Prev::Label(p), _) if p >= v => {
                return Err(Error::IndexOutOfRange {
                    what: "label",
                    index: p,
                    limit: v,
                })
            }
            (Prev::Label(p), _) => p,
        };
        Ok(self.score(pos, row, cur))
    }

    pub fn check_sequence(&self, y: &LabelSequence) -> Result<()> {
        if y.len() != self.len() {
            return Err(Error::contract(format!(
                "label sequence length {} does not match lattice length {}",
                y.len(),
                self.len()
            )));
        }
        if let Some(&bad) = y.0.iter().find(|&&l| l >= self.num_labels()) {
            return Err(Error::IndexOutOfRange {
                what: "label",
                index: bad,
                limit: self.num_labels(),
            });
        }
        Ok(())
    }

    /// Unnormalized log score `Σ_i ln ψ(y_{i-1}, y_i, r_i)`, accumulated left
    /// to right.
    pub fn sequence_score(&self, y: &LabelSequence) -> Result<f64> {
        self.check_sequence(y)?;
        Ok(self.sequence_score_unchecked(y.as_slice()))
    }

    pub(crate) fn sequence_score_unchecked(&self, y: &[usize]) -> f64 {
        let mut prev = self.num_labels();
        let mut s = 0.0;
        for (pos, &cur) in y.iter().enumerate() {
            s += self.score(pos, prev, cur);
            prev = cur;
        }
        s
    }

    pub(crate) fn zero_grad(&self) -> LatticeGrad {
        let v = self.num_labels();
        let tables = match &self.transitions {
            Transitions::Shared(_) => 1,
            Transitions::PerPosition(ts) => ts.len(),
        };
        LatticeGrad {
            emissions: Matrix::zeros(self.len(), v),
            transitions: vec![Matrix::zeros(v + 1, v); tables],
        }
    }
}

/// Gradient of a scalar objective with respect to a lattice's log-scores.
///
/// `transitions` mirrors the lattice layout: one table when transitions are
/// shared, one per position otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeGrad {
    pub emissions: Matrix,
    pub transitions: Vec<Matrix>,
}

impl LatticeGrad {
    #[inline]
    fn slot(&self, pos: usize) -> usize {
        if self.transitions.len() == 1 {
            0
        } else {
            pos
        }
    }

    #[inline]
    pub(crate) fn add_edge(&mut self, pos: usize, prev: usize, cur: usize, v: f64) {
        let s = self.slot(pos);
        self.transitions[s].add_at(prev, cur, v);
    }

    /// `self += scale * other`; shapes must agree.
    pub fn add_scaled(&mut self, other: &LatticeGrad, scale: f64) {
        for (a, b) in self
            .emissions
            .as_mut_slice()
            .iter_mut()
            .zip(other.emissions.as_slice())
        {
            *a += scale * b;
        }
        for (ta, tb) in self.transitions.iter_mut().zip(&other.transitions) {
            for (a, b) in ta.as_mut_slice().iter_mut().zip(tb.as_slice()) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.emissions.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        for t in &mut self.transitions {
            t.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        }
    }

    /// The shared transition gradient (sum over all tables).
    pub fn transition_total(&self) -> Matrix {
        let mut out = self.transitions[0].clone();
        for t in &self.transitions[1..] {
            for (a, b) in out.as_mut_slice().iter_mut().zip(t.as_slice()) {
                *a += b;
            }
        }
        out
    }
}

/// Per-token marginal label distributions; every row sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix(Matrix);

impl PosteriorMatrix {
    pub const ROW_TOLERANCE: f64 = 1e-9;

    pub fn new(probs: Matrix) -> Result<Self> {
        for r in 0..probs.rows() {
            let row = probs.row(r);
            if let Some(p) = row.iter().find(|&&p| !(-1e-12..=1.0 + 1e-12).contains(&p)) {
                return Err(Error::contract(format!("row {r} has entry {p} outside [0,1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > Self::ROW_TOLERANCE {
                return Err(Error::contract(format!("row {r} sums to {s}, not 1")));
            }
        }
        Ok(PosteriorMatrix(probs))
    }

    pub(crate) fn new_unchecked(probs: Matrix) -> Self {
        PosteriorMatrix(probs)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn num_labels(&self) -> usize {
        self.0.cols()
    }

    pub fn get(&self, pos: usize, label: usize) -> f64 {
        self.0.get(pos, label)
    }
}

/// `ln α(y_k)` for every position and label; α at `k` includes the potential
/// at `k`.
pub fn forward_scores(lattice: &Lattice) -> Matrix {
    let (n, v) = (lattice.len(), lattice.num_labels());
    let mut alpha = Matrix::zeros(n, v);
    for y in 0..v {
        alpha.set(0, y, lattice.score(0, v, y));
    }
    let mut buf = vec![0.0; v];
    for k in 1..n {
        for y in 0..v {
            for (p, b) in buf.iter_mut().enumerate() {
                *b = alpha.get(k - 1, p) + lattice.score(k, p, y);
            }
            alpha.set(k, y, log_sum_exp(buf.iter().copied()));
        }
    }
    alpha
}

/// `ln β(y_k)`: suffix sums starting at `k+1`, excluding the emission at `k`.
/// The final row is exactly zero.
pub fn backward_scores(lattice: &Lattice) -> Matrix {
    let (n, v) = (lattice.len(), lattice.num_labels());
    let mut beta = Matrix::zeros(n, v);
    let mut buf = vec![0.0; v];
    for k in (0..n - 1).rev() {
        for p in 0..v {
            for (y, b) in buf.iter_mut().enumerate() {
                *b = lattice.score(k + 1, p, y) + beta.get(k + 1, y);
            }
            beta.set(k, p, log_sum_exp(buf.iter().copied()));
        }
    }
    beta
}

fn log_partition_from_alpha(alpha: &Matrix) -> f64 {
    log_sum_exp(alpha.row(alpha.rows() - 1).iter().copied())
}

/// `ln 𝒵` via the forward recursion.
pub fn log_partition(lattice: &Lattice) -> f64 {
    log_partition_from_alpha(&forward_scores(lattice))
}

/// `ln p(y | x)`.
pub fn sequence_log_prob(lattice: &Lattice, y: &LabelSequence) -> Result<f64> {
    Ok(lattice.sequence_score(y)? - log_partition(lattice))
}

/// Forward/backward tables together with `ln 𝒵`.
#[derive(Debug, Clone)]
pub(crate) struct Marginals {
    pub alpha: Matrix,
    pub beta: Matrix,
    pub log_z: f64,
}

impl Marginals {
    pub fn compute(lattice: &Lattice) -> Self {
        let alpha = forward_scores(lattice);
        let beta = backward_scores(lattice);
        let log_z = log_partition_from_alpha(&alpha);
        Marginals { alpha, beta, log_z }
    }

    pub fn unary(&self) -> Matrix {
        let (n, v) = (self.alpha.rows(), self.alpha.cols());
        let mut q = Matrix::zeros(n, v);
        for k in 0..n {
            for y in 0..v {
                q.set(k, y, exp(self.alpha.get(k, y) + self.beta.get(k, y) - self.log_z));
            }
        }
        q
    }

    /// Adds `scale · E[φ]` to `grad`, where φ are the emission and transition
    /// indicator features.
    pub fn add_expected_counts(&self, lattice: &Lattice, scale: f64, grad: &mut LatticeGrad) {
        let (n, v) = (lattice.len(), lattice.num_labels());
        for k in 0..n {
            for y in 0..v {
                let q = exp(self.alpha.get(k, y) + self.beta.get(k, y) - self.log_z);
                grad.emissions.add_at(k, y, scale * q);
                if k == 0 {
                    grad.add_edge(0, v, y, scale * q);
                }
            }
        }
        for k in 1..n {
            for p in 0..v {
                let a = self.alpha.get(k - 1, p);
                for y in 0..v {
                    let xi = exp(a + lattice.score(k, p, y) + self.beta.get(k, y) - self.log_z);
                    grad.add_edge(k, p, y, scale * xi);
                }
            }
        }
    }
}

/// Adds `scale · φ(y)` to `grad`.
pub(crate) fn add_sequence_counts(lattice: &Lattice, y: &[usize], scale: f64, grad: &mut LatticeGrad) {
    let mut prev = lattice.num_labels();
    for (k, &cur) in y.iter().enumerate() {
        grad.emissions.add_at(k, cur, scale);
        grad.add_edge(k, prev, cur, scale);
        prev = cur;
    }
}

/// Token marginals `q(y_k | x) = α(y_k) β(y_k) / 𝒵`.
pub fn posteriors(lattice: &Lattice) -> PosteriorMatrix {
    PosteriorMatrix::new_unchecked(Marginals::compute(lattice).unary())
}

/// Negative log-likelihood of `gold` and its gradient with respect to the
/// lattice scores (expected feature counts minus gold counts).
pub fn nll_and_grad(lattice: &Lattice, gold: &LabelSequence) -> Result<(f64, LatticeGrad)> {
    weighted_nll_and_grad(lattice, &[(gold, 1.0)])
}

/// `−Σ_j w_j ln p(y_j | x)` with gradient `(Σ_j w_j) E[φ] − Σ_j w_j φ(y_j)`.
pub fn weighted_nll_and_grad(
    lattice: &Lattice,
    targets: &[(&LabelSequence, f64)],
) -> Result<(f64, LatticeGrad)> {
    for (y, _) in targets {
        lattice.check_sequence(y)?;
    }
    let m = Marginals::compute(lattice);
    let mut grad = lattice.zero_grad();
    let mut loss = 0.0;
    let mut total = 0.0;
    for &(y, w) in targets {
        loss += w * (m.log_z - lattice.sequence_score_unchecked(y.as_slice()));
        add_sequence_counts(lattice, y.as_slice(), -w, &mut grad);
        total += w;
    }
    m.add_expected_counts(lattice, total, &mut grad);
    Ok((loss, grad))
}
