//! Embedding lookup → bidirectional LSTM → linear emission projection, with
//! hand-written backpropagation through time.
//!
//! Gate layout inside every LSTM weight block is `[input, forget, cell,
//! output]`, each `hidden` rows tall.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::lattice::Lattice;
use crate::math::{sigmoid, tanh};
use crate::matrix::Matrix;

/// Token id every out-of-vocabulary token maps to.
pub const UNK_ID: u32 = 0;

/// Half-width of the uniform initialization interval.
pub const INIT_RANGE: f64 = 0.1;

/// How emissions are turned into a distribution over labelings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputHead {
    /// Linear-chain CRF over emissions + transitions.
    Crf,
    /// Independent per-token softmax over emissions; transitions unused.
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub emb_dim: usize,
    /// Hidden size per direction.
    pub hidden: usize,
    pub num_labels: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.emb_dim == 0 || self.hidden == 0 || self.num_labels == 0 {
            return Err(Error::contract("model dimensions must all be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `4h × d_emb`
    pub w_input: Vec<f64>,
    /// `4h × h`
    pub w_hidden: Vec<f64>,
    /// `4h`
    pub bias: Vec<f64>,
}

impl LstmParams {
    fn zeros(emb: usize, h: usize) -> Self {
        LstmParams {
            w_input: vec![0.0; 4 * h * emb],
            w_hidden: vec![0.0; 4 * h * h],
            bias: vec![0.0; 4 * h],
        }
    }
}

/// Everything trained by SGD. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub head: OutputHead,
    /// `vocab × d_emb`
    pub embeddings: Vec<f64>,
    pub forward: LstmParams,
    pub backward: LstmParams,
    /// `V × 2h`; emission of label `y` is row `y` dotted with `[h_fwd; h_bwd]`.
    pub projection: Vec<f64>,
    /// `(V+1) × V`, start row last.
    pub transitions: Vec<f64>,
    pub seed: u64,
    /// Skip embedding updates (precomputed vectors).
    pub freeze_embeddings: bool,
}

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    -INIT_RANGE + 2.0 * INIT_RANGE * u
}

impl ModelParams {
    pub fn zeros(dims: ModelDims, head: OutputHead) -> Self {
        let (v, h) = (dims.num_labels, dims.hidden);
        ModelParams {
            dims,
            head,
            embeddings: vec![0.0; dims.vocab * dims.emb_dim],
            forward: LstmParams::zeros(dims.emb_dim, h),
            backward: LstmParams::zeros(dims.emb_dim, h),
            projection: vec![0.0; v * 2 * h],
            transitions: vec![0.0; (v + 1) * v],
            seed: 0,
            freeze_embeddings: false,
        }
    }

    /// Uniform(−0.1, 0.1) initialization from `seed`, forget-gate biases 1.
    pub fn init(dims: ModelDims, head: OutputHead, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut p = Self::zeros(dims, head);
        p.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.visit_mut(|_, t| t.iter_mut().for_each(|x| *x = uniform(&mut rng)));
        let h = dims.hidden;
        for lstm in [&mut p.forward, &mut p.backward] {
            lstm.bias[h..2 * h].iter_mut().for_each(|b| *b = 1.0);
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(self.dims, self.head);
        z.seed = self.seed;
        z.freeze_embeddings = self.freeze_embeddings;
        z
    }

    /// Visits every tensor (including `transitions`, last) in canonical order.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(&'static str, &'a [f64])) {
        f("embeddings", &self.embeddings);
        f("lstm_fwd.w_input", &self.forward.w_input);
        f("lstm_fwd.w_hidden", &self.forward.w_hidden);
        f("lstm_fwd.bias", &self.forward.bias);
        f("lstm_bwd.w_input", &self.backward.w_input);
        f("lstm_bwd.w_hidden", &self.backward.w_hidden);
        f("lstm_bwd.bias", &self.backward.bias);
        f("projection", &self.projection);
        f("transitions", &self.transitions);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&'static str, &mut [f64])) {
        f("embeddings", &mut self.embeddings);
        f("lstm_fwd.w_input", &mut self.forward.w_input);
        f("lstm_fwd.w_hidden", &mut self.forward.w_hidden);
        f("lstm_fwd.bias", &mut self.forward.bias);
        f("lstm_bwd.w_input", &mut self.backward.w_input);
        f("lstm_bwd.w_hidden", &mut self.backward.w_hidden);
        f("lstm_bwd.bias", &mut self.backward.bias);
        f("projection", &mut self.projection);
        f("transitions", &mut self.transitions);
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        Some(match name {
            "embeddings" => &mut self.embeddings,
            "lstm_fwd.w_input" => &mut self.forward.w_input,
            "lstm_fwd.w_hidden" => &mut self.forward.w_hidden,
            "lstm_fwd.bias" => &mut self.forward.bias,
            "lstm_bwd.w_input" => &mut self.backward.w_input,
            "lstm_bwd.w_hidden" => &mut self.backward.w_hidden,
            "lstm_bwd.bias" => &mut self.backward.bias,
            "projection" => &mut self.projection,
            "transitions" => &mut self.transitions,
            _ => return None,
        })
    }

    /// Expected `(rows, cols)` of a named tensor.
    pub fn tensor_shape(&self, name: &str) -> Option<(usize, usize)> {
        let d = self.dims;
        let (e, h, v) = (d.emb_dim, d.hidden, d.num_labels);
        Some(match name {
            "embeddings" => (d.vocab, e),
            "lstm_fwd.w_input" | "lstm_bwd.w_input" => (4 * h, e),
            "lstm_fwd.w_hidden" | "lstm_bwd.w_hidden" => (4 * h, h),
            "lstm_fwd.bias" | "lstm_bwd.bias" => (4 * h, 1),
            "projection" => (v, 2 * h),
            "transitions" => (v + 1, v),
            _ => return None,
        })
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.len());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, t| ok &= t.iter().all(|x| x.is_finite()));
        ok
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        let mut src: Vec<&[f64]> = Vec::with_capacity(9);
        other.visit(|_, t| src.push(t));
        let mut i = 0;
        self.visit_mut(|_, t| {
            for (a, b) in t.iter_mut().zip(src[i]) {
                *a += scale * b;
            }
            i += 1;
        });
    }

    pub fn scale(&mut self, s: f64) {
        self.visit_mut(|_, t| t.iter_mut().for_each(|x| *x *= s));
    }

    pub fn squared_norm(&self) -> f64 {
        let mut n = 0.0;
        self.visit(|_, t| n += t.iter().map(|x| x * x).sum::<f64>());
        n
    }

    pub fn transition_matrix(&self) -> Matrix {
        let v = self.dims.num_labels;
        Matrix::from_vec(v + 1, v, self.transitions.clone()).expect("transition shape")
    }

    /// CRF lattice over `emissions` with this model's transitions.
    pub fn lattice(&self, emissions: Matrix) -> Result<Lattice> {
        Lattice::new(emissions, self.transition_matrix())
    }

    /// Dimension consistency of every tensor.
    pub fn check_shapes(&self) -> Result<()> {
        self.dims.validate()?;
        let mut bad = None;
        self.visit(|name, t| {
            let (r, c) = self.tensor_shape(name).expect("known tensor");
            if t.len() != r * c && bad.is_none() {
                bad = Some(Error::ShapeMismatch {
                    what: name,
                    expected: r * c,
                    got: t.len(),
                });
            }
        });
        bad.map_or(Ok(()), Err)
    }
}

/// One tokenized sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<u32>,
    pub language: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenBatch {
    pub sentences: Vec<Sentence>,
}

impl TokenBatch {
    pub fn new(sentences: Vec<Sentence>) -> Self {
        TokenBatch { sentences }
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.sentences.iter().map(|s| s.tokens.len()).collect()
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(|s| s.tokens.len()).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.sentences.is_empty() {
            return Err(Error::contract("batch must not be empty"));
        }
        if self.sentences.iter().any(|s| s.tokens.is_empty()) {
            return Err(Error::contract("sentences must have at least one token"));
        }
        Ok(())
    }
}

/// Cached activations of one direction at one step.
#[derive(Debug, Clone)]
struct Step {
    input: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// post-activation gates `[i, f, g, o]`
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

/// Forward-pass record for one sentence, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct SentenceTrace {
    tokens: Vec<usize>,
    dropout: Option<Matrix>,
    fwd: Vec<Step>,
    /// indexed by token position, not processing order
    bwd: Vec<Step>,
    reprs: Matrix,
}

fn lstm_step(p: &LstmParams, h: usize, input: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Step, Vec<f64>, Vec<f64>) {
    let e = input.len();
    let mut gates = p.bias.clone();
    for (r, z) in gates.iter_mut().enumerate() {
        let wi = &p.w_input[r * e..(r + 1) * e];
        let wh = &p.w_hidden[r * h..(r + 1) * h];
        *z += wi.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
            + wh.iter().zip(h_prev).map(|(a, b)| a * b).sum::<f64>();
    }
    for (r, z) in gates.iter_mut().enumerate() {
        *z = if (2 * h..3 * h).contains(&r) {
            tanh(*z)
        } else {
            sigmoid(*z)
        };
    }
    let mut c = vec![0.0; h];
    let mut tanh_c = vec![0.0; h];
    let mut hn = vec![0.0; h];
    for j in 0..h {
        let (i, f, g, o) = (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
        c[j] = f * c_prev[j] + i * g;
        tanh_c[j] = tanh(c[j]);
        hn[j] = o * tanh_c[j];
    }
    let step = Step {
        input: input.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        gates,
        tanh_c,
    };
    (step, hn, c)
}

/// Runs the encoder over one sentence. `dropout`, when given, is an
/// `n × d_emb` multiplicative mask on the embeddings.
pub fn forward(
    params: &ModelParams,
    tokens: &[u32],
    dropout: Option<&Matrix>,
) -> Result<(Matrix, SentenceTrace)> {
    let d = params.dims;
    let (n, e, h, v) = (tokens.len(), d.emb_dim, d.hidden, d.num_labels);
    if n == 0 {
        return Err(Error::contract("sentence must have at least one token"));
    }
    if let Some(m) = dropout {
        if m.rows() != n || m.cols() != e {
            return Err(Error::ShapeMismatch {
                what: "dropout mask",
                expected: n * e,
                got: m.rows() * m.cols(),
            });
        }
    }
    let ids: Vec<usize> = tokens
        .iter()
        .map(|&t| if (t as usize) < d.vocab { t as usize } else { UNK_ID as usize })
        .collect();
    let inputs: Vec<Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(pos, &id)| {
            let mut x = params.embeddings[id * e..(id + 1) * e].to_vec();
            if let Some(m) = dropout {
                x.iter_mut().zip(m.row(pos)).for_each(|(a, b)| *a *= b);
            }
            x
        })
        .collect();

    let mut reprs = Matrix::zeros(n, 2 * h);
    let mut fwd = Vec::with_capacity(n);
    let (mut hs, mut cs) = (vec![0.0; h], vec![0.0; h]);
    for (pos, x) in inputs.iter().enumerate() {
        let (step, hn, cn) = lstm_step(&params.forward, h, x, &hs, &cs);
        reprs.row_mut(pos)[..h].copy_from_slice(&hn);
        fwd.push(step);
        hs = hn;
        cs = cn;
    }
    let mut bwd: Vec<Option<Step>> = vec![None; n];
    let (mut hs, mut cs) = (vec![0.0; h], vec![0.0; h]);
    for pos in (0..n).rev() {
        let (step, hn, cn) = lstm_step(&params.backward, h, &inputs[pos], &hs, &cs);
        reprs.row_mut(pos)[h..].copy_from_slice(&hn);
        bwd[pos] = Some(step);
        hs = hn;
        cs = cn;
    }

    let mut emissions = Matrix::zeros(n, v);
    for pos in 0..n {
        let r = reprs.row(pos);
        for y in 0..v {
            let w = &params.projection[y * 2 * h..(y + 1) * 2 * h];
            emissions.set(pos, y, w.iter().zip(r).map(|(a, b)| a * b).sum());
        }
    }
    let trace = SentenceTrace {
        tokens: ids,
        dropout: dropout.cloned(),
        fwd,
        bwd: bwd.into_iter().map(|s| s.expect("filled")).collect(),
        reprs,
    };
    Ok((emissions, trace))
}

/// Backpropagates one direction. `steps` must be in processing order and
/// `d_out[i]` is the upstream gradient on the hidden output of `steps[i]`.
fn lstm_backward(
    p: &LstmParams,
    g: &mut LstmParams,
    h: usize,
    steps: &[&Step],
    d_out: &[&[f64]],
    d_inputs: &mut [Vec<f64>],
) {
    let e = steps.first().map_or(0, |s| s.input.len());
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut dz = vec![0.0; 4 * h];
    for idx in (0..steps.len()).rev() {
        let s = steps[idx];
        for j in 0..h {
            let (i, f, gg, o) = (s.gates[j], s.gates[h + j], s.gates[2 * h + j], s.gates[3 * h + j]);
            let dh = d_out[idx][j] + dh_next[j];
            let tc = s.tanh_c[j];
            let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
            dz[j] = dc * gg * i * (1.0 - i);
            dz[h + j] = dc * s.c_prev[j] * f * (1.0 - f);
            dz[2 * h + j] = dc * i * (1.0 - gg * gg);
            dz[3 * h + j] = dh * tc * o * (1.0 - o);
            dc_next[j] = dc * f;
        }
        dh_next.iter_mut().for_each(|x| *x = 0.0);
        let dx = &mut d_inputs[idx];
        for (r, &dzr) in dz.iter().enumerate() {
            if dzr == 0.0 {
                continue;
            }
            g.bias[r] += dzr;
            let wi = &p.w_input[r * e..(r + 1) * e];
            let gwi = &mut g.w_input[r * e..(r + 1) * e];
            for c in 0..e {
                gwi[c] += dzr * s.input[c];
                dx[c] += dzr * wi[c];
            }
            let wh = &p.w_hidden[r * h..(r + 1) * h];
            let gwh = &mut g.w_hidden[r * h..(r + 1) * h];
            for c in 0..h {
                gwh[c] += dzr * s.h_prev[c];
                dh_next[c] += dzr * wh[c];
            }
        }
    }
}

/// Accumulates into `grads` the parameter gradients implied by upstream
/// gradients on this sentence's emissions.
pub fn backward(
    params: &ModelParams,
    trace: &SentenceTrace,
    d_emissions: &Matrix,
    grads: &mut ModelParams,
) -> Result<()> {
    let d = params.dims;
    let (n, e, h, v) = (trace.tokens.len(), d.emb_dim, d.hidden, d.num_labels);
    if d_emissions.rows() != n || d_emissions.cols() != v {
        return Err(Error::ShapeMismatch {
            what: "emission gradient",
            expected: n * v,
            got: d_emissions.rows() * d_emissions.cols(),
        });
    }
    let mut d_reprs = Matrix::zeros(n, 2 * h);
    for pos in 0..n {
        let r = trace.reprs.row(pos);
        for y in 0..v {
            let de = d_emissions.get(pos, y);
            if de == 0.0 {
                continue;
            }
            let w = &params.projection[y * 2 * h..(y + 1) * 2 * h];
            let gw = &mut grads.projection[y * 2 * h..(y + 1) * 2 * h];
            let dr = d_reprs.row_mut(pos);
            for k in 0..2 * h {
                gw[k] += de * r[k];
                dr[k] += de * w[k];
            }
        }
    }

    // d_inputs indexed by token position
    let mut d_inputs = vec![vec![0.0; e]; n];
    let fwd_steps: Vec<&Step> = trace.fwd.iter().collect();
    let fwd_out: Vec<&[f64]> = (0..n).map(|p| &d_reprs.row(p)[..h]).collect();
    lstm_backward(&params.forward, &mut grads.forward, h, &fwd_steps, &fwd_out, &mut d_inputs);

    let bwd_steps: Vec<&Step> = trace.bwd.iter().rev().collect();
    let bwd_out: Vec<&[f64]> = (0..n).rev().map(|p| &d_reprs.row(p)[h..]).collect();
    let mut d_bwd_inputs = vec![vec![0.0; e]; n];
    lstm_backward(&params.backward, &mut grads.backward, h, &bwd_steps, &bwd_out, &mut d_bwd_inputs);
    for (idx, dx) in d_bwd_inputs.into_iter().enumerate() {
        let pos = n - 1 - idx;
        d_inputs[pos].iter_mut().zip(dx).for_each(|(a, b)| *a += b);
    }

    for (pos, (&id, dx)) in trace.tokens.iter().zip(&d_inputs).enumerate() {
        let ge = &mut grads.embeddings[id * e..(id + 1) * e];
        match &trace.dropout {
            Some(m) => ge
                .iter_mut()
                .zip(dx)
                .zip(m.row(pos))
                .for_each(|((a, b), mask)| *a += b * mask),
            None => ge.iter_mut().zip(dx).for_each(|(a, b)| *a += b),
        }
    }
    Ok(())
}

/// Emission matrices (`n × V`) for every sentence of the batch.
pub fn encode(params: &ModelParams, batch: &TokenBatch) -> Result<Vec<Matrix>> {
    batch.validate()?;
    batch
        .sentences
        .iter()
        .map(|s| forward(params, &s.tokens, None).map(|(em, _)| em))
        .collect()
}

/// Parameter gradients for upstream gradients on each sentence's emissions
/// and on the shared transition table.
pub fn backprop(
    params: &ModelParams,
    batch: &TokenBatch,
    emission_grads: &[Matrix],
    transition_grads: &Matrix,
) -> Result<ModelParams> {
    batch.validate()?;
    if emission_grads.len() != batch.sentences.len() {
        return Err(Error::ShapeMismatch {
            what: "emission gradients per batch",
            expected: batch.sentences.len(),
            got: emission_grads.len(),
        });
    }
    let v = params.dims.num_labels;
    if transition_grads.rows() != v + 1 || transition_grads.cols() != v {
        return Err(Error::ShapeMismatch {
            what: "transition gradient",
            expected: (v + 1) * v,
            got: transition_grads.rows() * transition_grads.cols(),
        });
    }
    let mut grads = params.zeros_like();
    for (s, de) in batch.sentences.iter().zip(emission_grads) {
        let (_, trace) = forward(params, &s.tokens, None)?;
        backward(params, &trace, de, &mut grads)?;
    }
    grads
        .transitions
        .iter_mut()
        .zip(transition_grads.as_slice())
        .for_each(|(a, b)| *a += b);
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::nll_and_grad;
    use crate::LabelSequence;

    fn tiny() -> ModelParams {
        ModelParams::init(
            ModelDims {
                vocab: 5,
                emb_dim: 3,
                hidden: 2,
                num_labels: 2,
            },
            OutputHead::Crf,
            7,
        )
        .unwrap()
    }

    fn sentence(tokens: &[u32]) -> Sentence {
        Sentence {
            tokens: tokens.to_vec(),
            language: "xx".into(),
        }
    }

    #[test]
    fn tiny_model_is_small() {
        assert!(tiny().num_params() <= 200);
        tiny().check_shapes().unwrap();
    }

    #[test]
    fn zero_projection_gives_zero_emissions() {
        let mut p = tiny();
        p.projection.iter_mut().for_each(|x| *x = 0.0);
        p.transitions.iter_mut().for_each(|x| *x = 0.0);
        let em = encode(&p, &TokenBatch::new(vec![sentence(&[1, 2, 3, 4])])).unwrap();
        assert!(em[0].as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_token_shape() {
        let em = encode(&tiny(), &TokenBatch::new(vec![sentence(&[3])])).unwrap();
        assert_eq!((em[0].rows(), em[0].cols()), (1, 2));
    }

    #[test]
    fn deterministic_and_unk_mapping() {
        let b = TokenBatch::new(vec![sentence(&[1, 2, 99])]);
        let a = encode(&tiny(), &b).unwrap();
        let c = encode(&tiny(), &b).unwrap();
        assert_eq!(a, c);
        let unk = encode(&tiny(), &TokenBatch::new(vec![sentence(&[1, 2, 0])])).unwrap();
        assert_eq!(a, unk);
    }

    #[test]
    fn empty_batch_is_rejected() {
        assert!(encode(&tiny(), &TokenBatch::default()).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p = tiny();
        let b = TokenBatch::new(vec![sentence(&[1, 2, 3])]);
        let g = backprop(&p, &b, &[Matrix::zeros(3, 2)], &Matrix::zeros(3, 2)).unwrap();
        assert_eq!(g.squared_norm(), 0.0);
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let p = tiny();
        let b = TokenBatch::new(vec![sentence(&[1, 4, 2])]);
        let gold = LabelSequence(vec![1, 0, 1]);
        let loss = |p: &ModelParams| {
            let em = encode(p, &b).unwrap().remove(0);
            nll_and_grad(&p.lattice(em).unwrap(), &gold).unwrap().0
        };
        let em = encode(&p, &b).unwrap().remove(0);
        let (_, lg) = nll_and_grad(&p.lattice(em).unwrap(), &gold).unwrap();
        let g = backprop(&p, &b, core::slice::from_ref(&lg.emissions), &lg.transition_total()).unwrap();

        let mut analytic = Vec::new();
        g.visit(|_, t| analytic.extend_from_slice(t));
        let step = 1e-5;
        let mut k = 0;
        let mut probe = p.clone();
        let names: Vec<&str> = {
            let mut v = Vec::new();
            p.visit(|n, _| v.push(n));
            v
        };
        for name in names {
            let len = probe.tensor_mut(name).unwrap().len();
            for i in 0..len {
                let orig = probe.tensor_mut(name).unwrap()[i];
                probe.tensor_mut(name).unwrap()[i] = orig + step;
                let up = loss(&probe);
                probe.tensor_mut(name).unwrap()[i] = orig - step;
                let down = loss(&probe);
                probe.tensor_mut(name).unwrap()[i] = orig;
                let numeric = (up - down) / (2.0 * step);
                let a = analytic[k];
                let tol = 1e-4 * a.abs().max(numeric.abs()).max(1e-3);
                assert!((a - numeric).abs() <= tol, "{name}[{i}]: {a} vs {numeric}");
                k += 1;
            }
        }
    }
}
