//! Exhaustive-enumeration oracle for small linear-chain lattices.
//!
//! Works from raw score tables, independent of the crate's recursions.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use structkd_core::{Lattice, Matrix};

#[derive(Debug, Clone)]
pub struct Brute {
    pub n: usize,
    pub v: usize,
    /// emissions[pos][label]
    pub em: Vec<Vec<f64>>,
    /// trans[prev][cur], prev == v is the start row
    pub trans: Vec<Vec<f64>>,
}

pub fn random_pair(rng: &mut ChaCha8Rng, n: usize, v: usize, scale: f64) -> (Lattice, Brute) {
    let em: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..v).map(|_| rng.random_range(-scale..scale)).collect())
        .collect();
    let trans: Vec<Vec<f64>> = (0..=v)
        .map(|_| (0..v).map(|_| rng.random_range(-scale..scale)).collect())
        .collect();
    let lattice = Lattice::new(
        Matrix::from_rows(&em).unwrap(),
        Matrix::from_rows(&trans).unwrap(),
    )
    .unwrap();
    (lattice, Brute { n, v, em, trans })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

impl Brute {
    pub fn sequences(&self) -> Vec<Vec<usize>> {
        let total = self.v.pow(self.n as u32);
        (0..total)
            .map(|mut code| {
                (0..self.n)
                    .map(|_| {
                        let y = code % self.v;
                        code /= self.v;
                        y
                    })
                    .collect()
            })
            .collect()
    }

    /// Left-to-right accumulated log score.
    pub fn score(&self, y: &[usize]) -> f64 {
        let mut prev = self.v;
        let mut s = 0.0;
        for (i, &c) in y.iter().enumerate() {
            s += self.em[i][c] + self.trans[prev][c];
            prev = c;
        }
        s
    }

    pub fn log_z(&self) -> f64 {
        let scores: Vec<f64> = self.sequences().iter().map(|y| self.score(y)).collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
    }

    pub fn prob(&self, y: &[usize]) -> f64 {
        (self.score(y) - self.log_z()).exp()
    }

    pub fn marginals(&self) -> Vec<Vec<f64>> {
        let lz = self.log_z();
        let mut q = vec![vec![0.0; self.v]; self.n];
        for y in self.sequences() {
            let p = (self.score(&y) - lz).exp();
            for (k, &l) in y.iter().enumerate() {
                q[k][l] += p;
            }
        }
        q
    }

    /// α(y_k) by summing over all prefixes ending in y at k.
    pub fn alpha(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.v]; self.n];
        for k in 0..self.n {
            let sub = Brute {
                n: k + 1,
                v: self.v,
                em: self.em[..=k].to_vec(),
                trans: self.trans.clone(),
            };
            for y in sub.sequences() {
                out[k][y[k]] += sub.score(&y).exp();
            }
        }
        out
    }

    /// β(y_k) by summing over all suffixes after k.
    pub fn beta(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.v]; self.n];
        for k in 0..self.n {
            for y in 0..self.v {
                if k == self.n - 1 {
                    out[k][y] = 1.0;
                    continue;
                }
                let rest = self.n - 1 - k;
                let total = self.v.pow(rest as u32);
                for mut code in 0..total {
                    let mut prev = y;
                    let mut s = 0.0;
                    for i in k + 1..self.n {
                        let c = code % self.v;
                        code /= self.v;
                        s += self.em[i][c] + self.trans[prev][c];
                        prev = c;
                    }
                    out[k][y] += s.exp();
                }
            }
        }
        out
    }

    /// All sequences sorted by score (descending), ties by the lower label at
    /// the latest differing position.
    pub fn ranked(&self) -> Vec<(Vec<usize>, f64)> {
        let mut all: Vec<(Vec<usize>, f64)> = self
            .sequences()
            .into_iter()
            .map(|y| {
                let s = self.score(&y);
                (y, s)
            })
            .collect();
        all.sort_by(|a, b| {
            b.1.total_cmp(&a.1).then_with(|| {
                let ra: Vec<usize> = a.0.iter().rev().copied().collect();
                let rb: Vec<usize> = b.0.iter().rev().copied().collect();
                ra.cmp(&rb)
            })
        });
        all
    }

    /// −Σ_y p_t(y) ln p_s(y) with `self` as the student.
    pub fn structural_cross_entropy(&self, teacher: &Brute) -> f64 {
        let (lzt, lzs) = (teacher.log_z(), self.log_z());
        self.sequences()
            .iter()
            .map(|y| -(teacher.score(y) - lzt).exp() * (self.score(y) - lzs))
            .sum()
    }
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300) || (a - b).abs() < 1e-300
}
