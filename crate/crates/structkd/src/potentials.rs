//! Raw (non-log) potential tables and the lattice inspection report.
//!
//! File format (TOML):
//!
//! ```toml
//! labels = ["F", "T"]
//!
//! [[position]]        # first token: start potentials only
//! start = [1, 1]
//!
//! [[position]]        # one row per previous label
//! F = [2, "1/2"]
//! T = ["1/2", 2]
//! ```
//!
//! Entries are numbers or `"a/b"` fractions.

use std::fmt::Write as _;

use structkd_core::{
    backward_scores, forward_scores, kbest_viterbi, log_partition, posteriors, sequence_log_prob, LabelSequence,
    Lattice, Matrix,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct PotentialTable {
    pub labels: Vec<String>,
    pub lattice: Lattice,
}

fn number(v: &toml::Value) -> Result<f64> {
    let x = match v {
        toml::Value::Integer(i) => *i as f64,
        toml::Value::Float(f) => *f,
        toml::Value::String(s) => match s.split_once('/') {
            Some((a, b)) => {
                let a: f64 = a.trim().parse().map_err(|_| Error::Config(format!("bad fraction {s:?}")))?;
                let b: f64 = b.trim().parse().map_err(|_| Error::Config(format!("bad fraction {s:?}")))?;
                a / b
            }
            None => s.trim().parse().map_err(|_| Error::Config(format!("bad number {s:?}")))?,
        },
        other => return Err(Error::Config(format!("expected a number, found {other}"))),
    };
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::Config(format!("potentials must be positive and finite, found {x}")));
    }
    Ok(x)
}

fn row(table: &toml::Table, key: &str, v: usize) -> Result<Vec<f64>> {
    let arr = table
        .get(key)
        .and_then(toml::Value::as_array)
        .ok_or_else(|| Error::Config(format!("missing row {key:?}")))?;
    if arr.len() != v {
        return Err(Error::Config(format!("row {key:?} has {} entries, expected {v}", arr.len())));
    }
    arr.iter().map(number).collect()
}

pub fn parse_potentials(text: &str) -> Result<PotentialTable> {
    let root: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let labels: Vec<String> = root
        .get("labels")
        .and_then(toml::Value::as_array)
        .ok_or_else(|| Error::Config("missing labels".into()))?
        .iter()
        .map(|l| l.as_str().map(String::from).ok_or_else(|| Error::Config("labels must be strings".into())))
        .collect::<Result<_>>()?;
    let v = labels.len();
    let positions = root
        .get("position")
        .and_then(toml::Value::as_array)
        .filter(|p| !p.is_empty())
        .ok_or_else(|| Error::Config("missing [[position]] tables".into()))?;
    let mut mats = Vec::with_capacity(positions.len());
    for (k, p) in positions.iter().enumerate() {
        let t = p
            .as_table()
            .ok_or_else(|| Error::Config("position entries must be tables".into()))?;
        let keys: Vec<&str> = if k == 0 {
            vec!["start"]
        } else {
            labels.iter().map(String::as_str).collect()
        };
        if t.len() != keys.len() {
            return Err(Error::Config(format!("position {}: expected rows {keys:?}", k + 1)));
        }
        let mut m = Matrix::filled(v + 1, v, 1.0);
        for (i, key) in keys.iter().enumerate() {
            let r = if k == 0 { v } else { i };
            m.row_mut(r).copy_from_slice(&row(t, key, v)?);
        }
        mats.push(m);
    }
    let lattice = Lattice::from_raw_potentials(&mats)?;
    Ok(PotentialTable { labels, lattice })
}

/// Everything printed by the inspector, in probability (not log) space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeReport {
    pub labels: Vec<String>,
    /// All label sequences, first position most significant.
    pub sequences: Vec<(LabelSequence, f64)>,
    pub top: Vec<(LabelSequence, f64)>,
    /// `alpha[label][position]`
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub partition: f64,
}

/// Sequences are enumerated exhaustively, so keep lattices small.
pub const MAX_ENUMERATED: usize = 1 << 16;

pub fn inspect(table: &PotentialTable, k: usize) -> Result<LatticeReport> {
    let l = &table.lattice;
    let (n, v) = (l.len(), l.num_labels());
    let total = (v as f64).powi(n as i32);
    if total > MAX_ENUMERATED as f64 {
        return Err(Error::Config(format!("{v}^{n} sequences is too many to list")));
    }
    let mut sequences = Vec::with_capacity(total as usize);
    for mut code in 0..total as usize {
        let mut y = vec![0; n];
        for slot in y.iter_mut().rev() {
            *slot = code % v;
            code /= v;
        }
        let y = LabelSequence(y);
        let p = sequence_log_prob(l, &y)?.exp();
        sequences.push((y, p));
    }
    let top = kbest_viterbi(l, k)?
        .iter()
        .map(|e| (e.labels.clone(), e.weight))
        .collect();
    let by_label = |m: &Matrix, f: fn(f64) -> f64| -> Vec<Vec<f64>> {
        (0..v).map(|y| (0..n).map(|k| f(m.get(k, y))).collect()).collect()
    };
    Ok(LatticeReport {
        labels: table.labels.clone(),
        sequences,
        top,
        alpha: by_label(&forward_scores(l), f64::exp),
        beta: by_label(&backward_scores(l), f64::exp),
        q: by_label(posteriors(l).matrix(), |x| x),
        partition: log_partition(l).exp(),
    })
}

/// Fixed-point text with ties rounded away from zero (`8.125` → `8.13`).
/// Values within 1e-9 relative of a tie count as ties, so log-space round-off
/// does not flip the printed digit.
pub fn fixed(x: f64, digits: usize) -> String {
    let scale = 10f64.powi(digits as i32);
    let y = x * scale;
    let frac = y.abs().fract();
    let r = if (frac - 0.5).abs() <= 1e-9 * y.abs().max(1.0) {
        y.signum() * (y.abs().trunc() + 1.0)
    } else {
        y.round()
    };
    format!("{:.digits$}", r / scale)
}

impl LatticeReport {
    fn names(&self, y: &LabelSequence) -> String {
        y.0.iter()
            .map(|&i| format!("{:<4}", self.labels[i]))
            .collect::<String>()
    }

    /// Sequence probabilities to three decimals, everything else to two.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let n = self.alpha.first().map_or(0, Vec::len);
        let header: String = (1..=n).map(|k| format!("{:<4}", format!("y{k}"))).collect();
        writeln!(s, "label sequence probabilities").unwrap();
        writeln!(s, "{header}  prob").unwrap();
        for (y, p) in &self.sequences {
            writeln!(s, "{}  {}", self.names(y), fixed(*p, 3)).unwrap();
        }
        writeln!(s).unwrap();
        writeln!(s, "top-{}", self.top.len()).unwrap();
        writeln!(s, "{header}  weight").unwrap();
        for (y, w) in &self.top {
            writeln!(s, "{}  {}", self.names(y), fixed(*w, 2)).unwrap();
        }
        writeln!(s).unwrap();
        let width = self
            .labels
            .iter()
            .map(|l| l.len())
            .max()
            .unwrap_or(1)
            + 14;
        let cols: String = (1..=n).map(|k| format!("{:>8}", format!("k={k}"))).collect();
        writeln!(s, "{:<width$}{cols}", "").unwrap();
        for (name, rows) in [("alpha", &self.alpha), ("beta", &self.beta), ("q", &self.q)] {
            for (label, r) in self.labels.iter().zip(rows.iter()) {
                let tag = if name == "q" {
                    format!("q(y_k={label}|x)")
                } else {
                    format!("{name}(y_k={label})")
                };
                let vals: String = r.iter().map(|&x| format!("{:>8}", fixed(x, 2))).collect();
                writeln!(s, "{tag:<width$}{vals}").unwrap();
            }
        }
        writeln!(s).unwrap();
        writeln!(s, "Z = {:.4}", self.partition).unwrap();
        s
    }
}
