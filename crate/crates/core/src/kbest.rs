//! Viterbi and exact k-best Viterbi decoding.
//!
//! Equal-score paths are ordered by the lower label index at the latest
//! position where they differ. Both decoders accumulate path scores left to
//! right exactly like [`Lattice::sequence_score`], so ties are detected
//! bitwise and the order agrees with exhaustive enumeration.

use alloc::collections::BinaryHeap;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{Error, Result};
use crate::lattice::{LabelSequence, Lattice};
use crate::math::{exp, log_sum_exp};

/// One entry of a k-best list.
#[derive(Debug, Clone, PartialEq)]
pub struct KBestEntry {
    pub labels: LabelSequence,
    /// Unnormalized log score of the sequence.
    pub log_score: f64,
    /// `p(y|x)` renormalized over the list.
    pub weight: f64,
}

/// Distinct label sequences in non-increasing score order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KBestList {
    entries: Vec<KBestEntry>,
}

impl KBestList {
    pub const WEIGHT_TOLERANCE: f64 = 1e-9;

    /// Builds a list from scored sequences, filling the renormalized weights.
    /// Sequences must already be distinct and sorted by non-increasing score.
    pub fn from_scored(scored: Vec<(LabelSequence, f64)>) -> Result<Self> {
        if scored.is_empty() {
            return Err(Error::contract("k-best list must not be empty"));
        }
        if scored.windows(2).any(|w| w[1].1 > w[0].1) {
            return Err(Error::contract("k-best scores must be non-increasing"));
        }
        let lse = log_sum_exp(scored.iter().map(|(_, s)| *s));
        let entries = scored
            .into_iter()
            .map(|(labels, log_score)| KBestEntry {
                labels,
                log_score,
                weight: exp(log_score - lse),
            })
            .collect();
        let list = KBestList { entries };
        list.check_distinct()?;
        Ok(list)
    }

    /// Rebuilds a list from label sequences and stored weights, as read back
    /// from a teacher cache. Log scores are set to `ln weight`.
    pub fn from_weighted(weighted: Vec<(LabelSequence, f64)>) -> Result<Self> {
        if weighted.is_empty() {
            return Err(Error::contract("k-best list must not be empty"));
        }
        let total: f64 = weighted.iter().map(|(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::contract(alloc::format!("k-best weights sum to {total}")));
        }
        if weighted.iter().any(|(_, w)| !(*w > 0.0 && *w <= 1.0)) {
            return Err(Error::contract("k-best weights must lie in (0, 1]"));
        }
        if weighted.windows(2).any(|w| w[1].1 > w[0].1) {
            return Err(Error::contract("k-best weights must be non-increasing"));
        }
        let entries = weighted
            .into_iter()
            .map(|(labels, weight)| KBestEntry {
                labels,
                log_score: crate::math::ln(weight),
                weight,
            })
            .collect();
        let list = KBestList { entries };
        list.check_distinct()?;
        Ok(list)
    }

    fn check_distinct(&self) -> Result<()> {
        let mut seqs: Vec<&LabelSequence> = self.entries.iter().map(|e| &e.labels).collect();
        seqs.sort();
        if seqs.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::contract("k-best sequences must be distinct"));
        }
        Ok(())
    }

    pub fn entries(&self) -> &[KBestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &KBestEntry> {
        self.entries.iter()
    }
}

/// Most probable label sequence.
pub fn viterbi(lattice: &Lattice) -> LabelSequence {
    let (n, v) = (lattice.len(), lattice.num_labels());
    let mut best: Vec<f64> = (0..v).map(|y| lattice.score(0, v, y)).collect();
    let mut back = vec![0usize; n * v];
    let mut next = vec![0.0; v];
    for k in 1..n {
        for y in 0..v {
            let mut arg = 0;
            let mut top = best[0] + lattice.score(k, 0, y);
            for (p, &b) in best.iter().enumerate().skip(1) {
                let s = b + lattice.score(k, p, y);
                if s > top {
                    top = s;
                    arg = p;
                }
            }
            next[y] = top;
            back[k * v + y] = arg;
        }
        core::mem::swap(&mut best, &mut next);
    }
    let mut y = 0;
    for (c, &b) in best.iter().enumerate().skip(1) {
        if b > best[y] {
            y = c;
        }
    }
    let mut out = vec![0; n];
    out[n - 1] = y;
    for k in (1..n).rev() {
        y = back[k * v + y];
        out[k - 1] = y;
    }
    LabelSequence(out)
}

#[derive(Clone, Copy)]
struct Hyp {
    score: f64,
    prev_label: usize,
    prev_rank: usize,
}

/// Heap item for the lazy merge. Larger means better: higher score, then lower
/// predecessor label, then lower predecessor rank.
struct Candidate {
    score: f64,
    prev_label: usize,
    prev_rank: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.prev_label.cmp(&self.prev_label))
            .then_with(|| other.prev_rank.cmp(&self.prev_rank))
    }
}

/// The `k` highest-scoring distinct label sequences (all of them when
/// `k ≥ Vⁿ`), with weights renormalized over the returned list.
pub fn kbest_viterbi(lattice: &Lattice, k: usize) -> Result<KBestList> {
    if k == 0 {
        return Err(Error::contract("k must be at least 1"));
    }
    let (n, v) = (lattice.len(), lattice.num_labels());
    // hyps[pos][label]: up to k best prefixes ending in `label` at `pos`
    let mut hyps: Vec<Vec<Vec<Hyp>>> = Vec::with_capacity(n);
    hyps.push(
        (0..v)
            .map(|y| {
                vec![Hyp {
                    score: lattice.score(0, v, y),
                    prev_label: v,
                    prev_rank: 0,
                }]
            })
            .collect(),
    );
    let mut heap = BinaryHeap::with_capacity(v);
    for pos in 1..n {
        let prev = &hyps[pos - 1];
        let mut column = Vec::with_capacity(v);
        for y in 0..v {
            heap.clear();
            for (p, list) in prev.iter().enumerate() {
                heap.push(Candidate {
                    score: list[0].score + lattice.score(pos, p, y),
                    prev_label: p,
                    prev_rank: 0,
                });
            }
            let mut out = Vec::with_capacity(k);
            while out.len() < k {
                let Some(c) = heap.pop() else { break };
                out.push(Hyp {
                    score: c.score,
                    prev_label: c.prev_label,
                    prev_rank: c.prev_rank,
                });
                let r = c.prev_rank + 1;
                if let Some(h) = prev[c.prev_label].get(r) {
                    heap.push(Candidate {
                        score: h.score + lattice.score(pos, c.prev_label, y),
                        prev_label: c.prev_label,
                        prev_rank: r,
                    });
                }
            }
            column.push(out);
        }
        hyps.push(column);
    }

    // merge the final column; the "predecessor" here is the final label itself
    let last = &hyps[n - 1];
    heap.clear();
    for (y, list) in last.iter().enumerate() {
        heap.push(Candidate {
            score: list[0].score,
            prev_label: y,
            prev_rank: 0,
        });
    }
    let mut scored = Vec::with_capacity(k);
    while scored.len() < k {
        let Some(c) = heap.pop() else { break };
        let mut labels = vec![0; n];
        let (mut y, mut r) = (c.prev_label, c.prev_rank);
        for pos in (0..n).rev() {
            labels[pos] = y;
            let h = hyps[pos][y][r];
            y = h.prev_label;
            r = h.prev_rank;
        }
        scored.push((LabelSequence(labels), c.score));
        let r = c.prev_rank + 1;
        if let Some(h) = last[c.prev_label].get(r) {
            heap.push(Candidate {
                score: h.score,
                prev_label: c.prev_label,
                prev_rank: r,
            });
        }
    }
    KBestList::from_scored(scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::fixtures::*;
    use crate::lattice::sequence_log_prob;
    use crate::matrix::Matrix;

    #[test]
    fn viterbi_of_worked_example() {
        assert_eq!(viterbi(&worked_example()).0, [T, T, F]);
    }

    #[test]
    fn viterbi_ties_pick_label_zero() {
        let l = Lattice::new(Matrix::zeros(4, 3), Matrix::zeros(4, 3)).unwrap();
        assert_eq!(viterbi(&l).0, [0, 0, 0, 0]);
    }

    #[test]
    fn top2_of_worked_example() {
        let list = kbest_viterbi(&worked_example(), 2).unwrap();
        let e = list.entries();
        assert_eq!(e[0].labels.0, [T, T, F]);
        assert_eq!(e[1].labels.0, [F, F, T]);
        assert!((e[0].weight - 0.57).abs() < 0.005);
        assert!((e[1].weight - 0.43).abs() < 0.005);
    }

    #[test]
    fn full_list_weights_are_sequence_probs() {
        let l = worked_example();
        let list = kbest_viterbi(&l, 8).unwrap();
        assert_eq!(list.len(), 8);
        for e in list.iter() {
            let p = exp(sequence_log_prob(&l, &e.labels).unwrap());
            assert!((e.weight - p).abs() < 1e-12);
        }
        // asking for more than exist returns everything
        assert_eq!(kbest_viterbi(&l, 100).unwrap().len(), 8);
    }

    #[test]
    fn k1_is_viterbi() {
        let l = worked_example();
        let list = kbest_viterbi(&l, 1).unwrap();
        assert_eq!(list.entries()[0].labels, viterbi(&l));
        assert_eq!(list.entries()[0].weight, 1.0);
    }

    #[test]
    fn k0_is_rejected() {
        assert!(matches!(kbest_viterbi(&worked_example(), 0), Err(Error::Contract(_))));
    }

    #[test]
    fn tied_lattice_orders_by_latest_position() {
        let l = Lattice::new(Matrix::zeros(2, 2), Matrix::zeros(3, 2)).unwrap();
        let got: Vec<Vec<usize>> = kbest_viterbi(&l, 4)
            .unwrap()
            .iter()
            .map(|e| e.labels.0.clone())
            .collect();
        assert_eq!(got, [[0, 0], [1, 0], [0, 1], [1, 1]]);
    }

    #[test]
    fn from_weighted_validates() {
        let a = LabelSequence(vec![0, 1]);
        let b = LabelSequence(vec![1, 1]);
        assert!(KBestList::from_weighted(vec![(a.clone(), 0.6), (b.clone(), 0.4)]).is_ok());
        assert!(KBestList::from_weighted(vec![(a.clone(), 0.6), (b, 0.3)]).is_err());
        assert!(KBestList::from_weighted(vec![(a.clone(), 0.5), (a, 0.5)]).is_err());
    }
}
