//! Two-level hierarchical softmax: `p(c | h) = p(cluster(c) | h) p(c | cluster(c), h)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::Matrix;
use crate::losses::log_softmax_parts;

/// A partition of the classes into clusters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clusters {
    members: Vec<Vec<usize>>,
    cluster_of: Vec<usize>,
    position: Vec<usize>,
}

impl Clusters {
    /// Validates that `members` partitions `0..D`.
    pub fn from_members(members: Vec<Vec<usize>>) -> Result<Self> {
        let n: usize = members.iter().map(Vec::len).sum();
        let mut cluster_of = vec![usize::MAX; n];
        let mut position = vec![0; n];
        for (j, m) in members.iter().enumerate() {
            if m.is_empty() {
                return Err(Error::Config(format!("cluster {j} is empty")));
            }
            for (p, &c) in m.iter().enumerate() {
                if c >= n || cluster_of[c] != usize::MAX {
                    return Err(Error::Config(format!("class {c} is out of range or assigned twice")));
                }
                cluster_of[c] = j;
                position[c] = p;
            }
        }
        Ok(Clusters { members, cluster_of, position })
    }

    pub fn n_clusters(&self) -> usize {
        self.members.len()
    }

    pub fn n_classes(&self) -> usize {
        self.cluster_of.len()
    }

    pub fn members(&self, j: usize) -> &[usize] {
        &self.members[j]
    }

    pub fn all_members(&self) -> &[Vec<usize>] {
        &self.members
    }

    pub fn cluster_of(&self, c: usize) -> usize {
        self.cluster_of[c]
    }

    pub fn position(&self, c: usize) -> usize {
        self.position[c]
    }

    pub fn max_cluster_size(&self) -> usize {
        self.members.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// `ceil(sqrt(D))`
pub fn default_cluster_count(n_classes: usize) -> usize {
    let mut m = (n_classes as f64).sqrt().ceil() as usize;
    while m > 1 && (m - 1) * (m - 1) >= n_classes {
        m -= 1;
    }
    while m * m < n_classes {
        m += 1;
    }
    m.max(1)
}

/// Sorts classes by descending frequency (ties by index) and cuts the order
/// into `m` contiguous groups whose sizes differ by at most one, larger
/// groups first.
pub fn build_frequency_clusters(freqs: &[u64], m: usize) -> Result<Clusters> {
    let n = freqs.len();
    if m < 1 || m > n {
        return Err(Error::Config(format!("cluster count must be in [1, {n}], got {m}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| freqs[b].cmp(&freqs[a]).then(a.cmp(&b)));
    let (base, extra) = (n / m, n % m);
    let mut members = Vec::with_capacity(m);
    let mut start = 0;
    for j in 0..m {
        let size = base + usize::from(j < extra);
        members.push(order[start..start + size].to_vec());
        start += size;
    }
    Clusters::from_members(members)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HsmHead {
    clusters: Clusters,
    w_cluster: Matrix,
    w_word: Vec<Matrix>,
}

/// Gradient of one example, restricted to the parameters it touches.
#[derive(Clone, Debug, PartialEq)]
pub struct HsmGrad {
    pub h: Vec<f64>,
    pub cluster: usize,
    /// `dL / d(W_cluster h)`
    pub g_cluster: Vec<f64>,
    /// `dL / d(W_word[cluster] h)`
    pub g_word: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HsmStep {
    pub value: f64,
    pub input_grad: Vec<f64>,
    pub grad: HsmGrad,
}

impl HsmHead {
    pub fn new(clusters: Clusters, dim: usize, init_scale: f64, seed: u64) -> Result<Self> {
        if !(init_scale > 0.0 && init_scale.is_finite()) {
            return Err(Error::Parameter(format!("init_scale must be > 0, got {init_scale}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_cluster = Matrix::uniform(&mut rng, clusters.n_clusters(), dim, init_scale);
        let w_word = clusters
            .all_members()
            .iter()
            .map(|m| Matrix::uniform(&mut rng, m.len(), dim, init_scale))
            .collect();
        Self::from_parts(clusters, w_cluster, w_word)
    }

    pub fn from_parts(clusters: Clusters, w_cluster: Matrix, w_word: Vec<Matrix>) -> Result<Self> {
        let dim = w_cluster.cols();
        if clusters.n_classes() < 2 || dim < 1 {
            return Err(dim_err("hierarchical softmax needs D >= 2 and d >= 1"));
        }
        if w_cluster.rows() != clusters.n_clusters() || w_word.len() != clusters.n_clusters() {
            return Err(dim_err("cluster matrix does not match the cluster count"));
        }
        for (j, w) in w_word.iter().enumerate() {
            if w.rows() != clusters.members(j).len() || w.cols() != dim {
                return Err(dim_err(format!("word matrix of cluster {j} has the wrong shape")));
            }
        }
        Ok(HsmHead { clusters, w_cluster, w_word })
    }

    pub fn clusters(&self) -> &Clusters {
        &self.clusters
    }

    pub fn w_cluster(&self) -> &Matrix {
        &self.w_cluster
    }

    pub fn w_word(&self) -> &[Matrix] {
        &self.w_word
    }

    pub fn n_classes(&self) -> usize {
        self.clusters.n_classes()
    }

    pub fn dim(&self) -> usize {
        self.w_cluster.cols()
    }

    fn check(&self, h: &[f64], target: Option<usize>) -> Result<()> {
        if h.len() != self.dim() {
            return Err(dim_err(format!("hidden vector has length {}, head expects {}", h.len(), self.dim())));
        }
        if let Some(c) = target {
            if c >= self.n_classes() {
                return Err(dim_err(format!("target {c} out of range for {} classes", self.n_classes())));
            }
        }
        Ok(())
    }

    /// Value, input gradient and parameter gradient at the current weights.
    pub fn eval(&self, h: &[f64], target: usize) -> Result<HsmStep> {
        self.check(h, Some(target))?;
        let j = self.clusters.cluster_of(target);
        let pos = self.clusters.position(target);
        let top = self.w_cluster.matvec(h);
        let (lse_top, mut g_cluster) = log_softmax_parts(&top);
        let word = self.w_word[j].matvec(h);
        let (lse_word, mut g_word) = log_softmax_parts(&word);
        let value = (lse_top - top[j]) + (lse_word - word[pos]);
        g_cluster[j] -= 1.0;
        g_word[pos] -= 1.0;
        let mut input_grad = self.w_cluster.matvec_t(&g_cluster);
        let wg = self.w_word[j].matvec_t(&g_word);
        for (a, b) in input_grad.iter_mut().zip(&wg) {
            *a += b;
        }
        Ok(HsmStep { value, input_grad, grad: HsmGrad { h: h.to_vec(), cluster: j, g_cluster, g_word } })
    }

    pub fn apply(&mut self, grad: &HsmGrad, eta: f64) -> Result<()> {
        self.check(&grad.h, None)?;
        if eta != 0.0 {
            self.w_cluster.rank1_update(-eta, &grad.g_cluster, &grad.h);
            self.w_word[grad.cluster].rank1_update(-eta, &grad.g_word, &grad.h);
        }
        Ok(())
    }

    /// One SGD step touching `W_cluster` and the target's cluster only.
    pub fn step(&mut self, h: &[f64], target: usize, eta: f64) -> Result<(f64, Vec<f64>)> {
        let st = self.eval(h, target)?;
        self.apply(&st.grad, eta)?;
        Ok((st.value, st.input_grad))
    }

    /// `log p(c | h)` for every class; O(D d).
    pub fn log_probs(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.check(h, None)?;
        let top = self.w_cluster.matvec(h);
        let (lse_top, _) = log_softmax_parts(&top);
        let mut out = vec![0.0; self.n_classes()];
        for (j, members) in self.clusters.all_members().iter().enumerate() {
            let word = self.w_word[j].matvec(h);
            let (lse_word, _) = log_softmax_parts(&word);
            let lp_cluster = top[j] - lse_top;
            for (&c, w) in members.iter().zip(&word) {
                out[c] = lp_cluster + (w - lse_word);
            }
        }
        Ok(out)
    }

    pub fn full_distribution(&self, h: &[f64]) -> Result<Vec<f64>> {
        Ok(self.log_probs(h)?.into_iter().map(f64::exp).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::gradcheck::relative_error;
    use crate::losses::{dense_eval, LossKind};
    use rand::Rng;

    #[test]
    fn cluster_count_is_ceil_sqrt() {
        assert_eq!(default_cluster_count(1), 1);
        assert_eq!(default_cluster_count(2), 2);
        assert_eq!(default_cluster_count(9), 3);
        assert_eq!(default_cluster_count(10), 4);
        assert_eq!(default_cluster_count(200_000), 448);
    }

    #[test]
    fn frequency_clusters_hand_example() {
        let cl = build_frequency_clusters(&[5, 4, 3, 2, 1], 2).unwrap();
        assert_eq!(cl.all_members(), &[vec![0, 1, 2], vec![3, 4]]);
        let cl = build_frequency_clusters(&[1, 5, 5, 0], 2).unwrap();
        assert_eq!(cl.all_members(), &[vec![1, 2], vec![0, 3]]);
    }

    #[test]
    fn extreme_cluster_counts() {
        let f = [3, 1, 4, 1, 5, 9];
        let one = build_frequency_clusters(&f, 1).unwrap();
        assert_eq!(one.n_clusters(), 1);
        assert_eq!(one.members(0).len(), 6);
        let all = build_frequency_clusters(&f, 6).unwrap();
        assert!(all.all_members().iter().all(|m| m.len() == 1));
        assert!(build_frequency_clusters(&f, 0).is_err());
        assert!(build_frequency_clusters(&f, 7).is_err());
    }

    #[test]
    fn sizes_differ_by_at_most_one() {
        let f: Vec<u64> = (0..103).map(|i| (i * 7919 % 31) as u64).collect();
        for m in 1..=103 {
            let cl = build_frequency_clusters(&f, m).unwrap();
            let sizes: Vec<usize> = cl.all_members().iter().map(Vec::len).collect();
            assert_eq!(sizes.iter().sum::<usize>(), 103);
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn single_cluster_is_flat_softmax() {
        let cl = build_frequency_clusters(&[1; 12], 1).unwrap();
        let head = HsmHead::new(cl, 5, 0.8, 3).unwrap();
        let h = [0.3, -0.1, 0.9, 0.2, -0.7];
        let flat = head.w_word()[0].matvec(&h);
        for c in [0, 5, 11] {
            let v = head.eval(&h, c).unwrap().value;
            let expect = dense_eval(LossKind::LogSoftmax, &flat, head.clusters().position(c), None).unwrap().value;
            assert!((v - expect).abs() <= 1e-10);
        }
        let (_, soft) = log_softmax_parts(&flat);
        let p = head.full_distribution(&h).unwrap();
        for c in 0..12 {
            assert!((p[c] - soft[head.clusters().position(c)]).abs() < 1e-12);
        }
    }

    #[test]
    fn distribution_sums_to_one() {
        let f: Vec<u64> = (0..50).map(|i| 100 - i).collect();
        let head = HsmHead::new(build_frequency_clusters(&f, 8).unwrap(), 6, 2.0, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let h: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let s: f64 = head.full_distribution(&h).unwrap().iter().sum();
            assert!((s - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn value_is_minus_log_of_distribution() {
        let f: Vec<u64> = (0..30).collect();
        let head = HsmHead::new(build_frequency_clusters(&f, 5).unwrap(), 4, 1.0, 2).unwrap();
        let h = [0.4, -0.3, 0.8, 0.1];
        let p = head.full_distribution(&h).unwrap();
        for c in 0..30 {
            assert!((head.eval(&h, c).unwrap().value + p[c].ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_class_lies_in_a_dominant_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..40 {
            let n = rng.random_range(2..=50);
            let f: Vec<u64> = (0..n).map(|_| rng.random_range(0..100)).collect();
            let m = rng.random_range(1..=n);
            let head = HsmHead::new(build_frequency_clusters(&f, m).unwrap(), 3, 1.5, trial).unwrap();
            let h: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let p = head.full_distribution(&h).unwrap();
            let best = (0..n).fold(0, |b, c| if p[c] > p[b] { c } else { b });
            let (_, p_top) = log_softmax_parts(&head.w_cluster().matvec(&h));
            let peak: Vec<f64> = (0..m)
                .map(|j| {
                    let (_, pw) = log_softmax_parts(&head.w_word()[j].matvec(&h));
                    p_top[j] * pw.iter().copied().fold(0.0, f64::max)
                })
                .collect();
            let j = head.clusters().cluster_of(best);
            assert!(peak.iter().all(|&v| v <= peak[j] * (1.0 + 1e-12)));
            assert!((peak[j] - p[best]).abs() <= 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let f: Vec<u64> = (0..20).rev().collect();
        let head = HsmHead::new(build_frequency_clusters(&f, 4).unwrap(), 3, 0.7, 8).unwrap();
        let h = [0.6, -0.9, 0.35];
        let target = 13;
        let st = head.eval(&h, target).unwrap();
        let eps = 1e-5;
        let j = st.grad.cluster;
        let mut worst: f64 = 0.0;
        for r in 0..head.clusters().n_clusters() {
            for k in 0..3 {
                let analytic = st.grad.g_cluster[r] * h[k];
                let mut plus = head.clone();
                plus.w_cluster.set(r, k, head.w_cluster.get(r, k) + eps);
                let mut minus = head.clone();
                minus.w_cluster.set(r, k, head.w_cluster.get(r, k) - eps);
                let fd = (plus.eval(&h, target).unwrap().value - minus.eval(&h, target).unwrap().value) / (2.0 * eps);
                worst = worst.max(relative_error(analytic, fd));
            }
        }
        for r in 0..head.clusters().members(j).len() {
            for k in 0..3 {
                let analytic = st.grad.g_word[r] * h[k];
                let mut plus = head.clone();
                plus.w_word[j].set(r, k, head.w_word[j].get(r, k) + eps);
                let mut minus = head.clone();
                minus.w_word[j].set(r, k, head.w_word[j].get(r, k) - eps);
                let fd = (plus.eval(&h, target).unwrap().value - minus.eval(&h, target).unwrap().value) / (2.0 * eps);
                worst = worst.max(relative_error(analytic, fd));
            }
        }
        assert!(worst <= 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn step_touches_only_target_cluster() {
        let f: Vec<u64> = (0..16).collect();
        let mut head = HsmHead::new(build_frequency_clusters(&f, 4).unwrap(), 3, 0.5, 1).unwrap();
        let before = head.clone();
        head.step(&[1.0, 0.5, -0.5], 0, 0.1).unwrap();
        let j = head.clusters().cluster_of(0);
        for r in 0..4 {
            assert_eq!(head.w_word()[r] == before.w_word()[r], r != j);
        }
        assert_ne!(head.w_cluster(), before.w_cluster());
    }
}
