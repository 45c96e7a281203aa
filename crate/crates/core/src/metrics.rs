//! Target ranks, top-k error rates and mean reciprocal rank.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `1 + #{k : s_k > s_c} + #{k < c : s_k = s_c}`, by a single scan.
pub fn rank_of_target(scores: &[f64], target: usize) -> Result<usize> {
    if target >= scores.len() {
        return Err(Error::Data(format!("target {target} out of range for {} scores", scores.len())));
    }
    let sc = scores[target];
    if sc.is_nan() {
        return Err(Error::Data("NaN in scores".into()));
    }
    let mut rank = 1;
    for (k, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            return Err(Error::Data("NaN in scores".into()));
        }
        if s > sc || (s == sc && k < target) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Aggregated metrics; serializes as `{"n": .., "mrr": .., "topk": {"1": ..}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub mrr: f64,
    pub topk: BTreeMap<usize, f64>,
}

impl MetricsReport {
    pub fn top(&self, k: usize) -> Option<f64> {
        self.topk.get(&k).copied()
    }
}

/// Running sums so partial results from several workers can be merged.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RankAccumulator {
    n: usize,
    reciprocal_sum: f64,
    misses: BTreeMap<usize, usize>,
}

impl RankAccumulator {
    pub fn new(k_set: &[usize]) -> Self {
        RankAccumulator { n: 0, reciprocal_sum: 0.0, misses: k_set.iter().map(|&k| (k, 0)).collect() }
    }

    pub fn push(&mut self, rank: usize) -> Result<()> {
        if rank == 0 {
            return Err(Error::Data("ranks start at 1".into()));
        }
        self.n += 1;
        self.reciprocal_sum += 1.0 / rank as f64;
        for (&k, m) in self.misses.iter_mut() {
            if rank > k {
                *m += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &RankAccumulator) {
        self.n += other.n;
        self.reciprocal_sum += other.reciprocal_sum;
        for (k, m) in &other.misses {
            *self.misses.entry(*k).or_insert(0) += m;
        }
    }

    pub fn finish(&self) -> Result<MetricsReport> {
        if self.n == 0 {
            return Err(Error::Data("no examples to aggregate".into()));
        }
        let n = self.n as f64;
        Ok(MetricsReport {
            n: self.n,
            mrr: self.reciprocal_sum / n,
            topk: self.misses.iter().map(|(&k, &m)| (k, m as f64 / n)).collect(),
        })
    }
}

/// `error(k) = mean(rank > k)`, `mrr = mean(1 / rank)`.
pub fn aggregate<I: IntoIterator<Item = usize>>(ranks: I, k_set: &[usize]) -> Result<MetricsReport> {
    let mut acc = RankAccumulator::new(k_set);
    for r in ranks {
        acc.push(r)?;
    }
    acc.finish()
}

/// Scores every example with the same frequency vector.
pub fn constant_baseline(freqs: &[u64], targets: &[usize], k_set: &[usize]) -> Result<MetricsReport> {
    let scores: Vec<f64> = freqs.iter().map(|&f| f as f64).collect();
    // The ranking never changes, so compute it once.
    let mut order: Vec<usize> = (0..freqs.len()).collect();
    order.sort_by(|&a, &b| freqs[b].cmp(&freqs[a]).then(a.cmp(&b)));
    let mut rank_of = vec![0; freqs.len()];
    for (r, &c) in order.iter().enumerate() {
        rank_of[c] = r + 1;
    }
    debug_assert!(freqs.is_empty() || rank_of_target(&scores, order[0]).ok() == Some(1));
    let ranks = targets
        .iter()
        .map(|&c| rank_of.get(c).copied().ok_or_else(|| Error::Data(format!("target {c} outside the vocabulary"))))
        .collect::<Result<Vec<_>>>()?;
    aggregate(ranks, k_set)
}

/// Parses `1,5,10` into a sorted, deduplicated list of positive integers.
pub fn parse_k_set(s: &str) -> Result<Vec<usize>> {
    let mut ks = s
        .split(',')
        .map(|t| {
            let t = t.trim();
            match t.parse::<usize>() {
                Ok(k) if k >= 1 => Ok(k),
                _ => Err(Error::Config(format!("bad k `{t}` in k set"))),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    ks.sort_unstable();
    ks.dedup();
    Ok(ks)
}
