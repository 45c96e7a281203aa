//! Output layer `o = W h` whose spherical-loss training step costs O(d^2),
//! independent of the number of classes `D`.
//!
//! `W` (`D x d`) is never stored. Instead the layer keeps
//!
//! ```text
//! W = (V + 1 w^T) U        V: D x d row store, w: shared row offset, U: d x d
//! ```
//!
//! together with `U^-1`, `vbar = V_eff^T 1` and `G = V_eff^T V_eff`, where
//! `V_eff = V + 1 w^T`. A dense SGD step for a spherical loss is
//!
//! ```text
//! W <- W - eta (alpha 1 + 2 beta W h + gamma e_c) h^T
//! ```
//!
//! The `2 beta W h h^T` part is a right multiplication of `W` by
//! `I - kappa h h^T` (`kappa = 2 eta beta`) and is folded into `U`, with
//! Sherman-Morrison keeping `U^-1` current. The remaining two terms become
//! a single-row change of `V` (target class) and a change of the shared
//! offset `w` (all-ones term), each O(d). `vbar` and `G` follow by rank-1/2
//! corrections.
//!
//! A [`FactoredLayer`] is single-writer: forward, update and refactorize
//! need exclusive access; `full_scores` and `materialize` only read.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::{axpy, dot, max_abs, norm_sq, Matrix};
use crate::losses::{SphericalGrad, SphericalStats};

/// `|1 - kappa |h|^2|` at or below this is refused as singular.
pub const SINGULAR_GUARD: f64 = 1e-8;

static NEXT_LAYER_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactoredConfig {
    /// Refactorize after this many updates; `0` disables the periodic trigger.
    pub refactor_period: usize,
    /// Refactorize when the condition estimate of `U` exceeds this.
    pub cond_limit: f64,
}

impl Default for FactoredConfig {
    fn default() -> Self {
        FactoredConfig { refactor_period: 512, cond_limit: 1e6 }
    }
}

/// Drift of the maintained quantities against fresh recomputation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Integrity {
    /// `max |U U^-1 - I|`
    pub uinv_drift: f64,
    /// `max |vbar - vbar'| / max |vbar'|`
    pub vbar_drift: f64,
    /// `max |G - G'| / max |G'|`
    pub g_drift: f64,
    /// See [`FactoredLayer::cond_estimate`].
    pub cond_estimate: f64,
}

/// Everything a backward pass and an update need from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub h: Vec<f64>,
    /// `U h`
    pub h_hat: Vec<f64>,
    pub stats: SphericalStats,
    pub target: usize,
    /// Effective row of the target class, `V[c] + w`.
    pub v_c_eff: Vec<f64>,
    layer_id: u64,
    version: u64,
}

#[derive(Clone, Debug)]
pub struct FactoredLayer {
    n_classes: usize,
    dim: usize,
    v_store: Matrix,
    omega: Vec<f64>,
    u: Matrix,
    u_inv: Matrix,
    v_bar: Vec<f64>,
    gram: Matrix,
    step_count: u64,
    since_refactor: usize,
    refactor_count: u64,
    config: FactoredConfig,
    id: u64,
    /// Bumped on every mutation; caches remember the version they saw.
    version: u64,
}

impl FactoredLayer {
    /// Uniform `[-init_scale, init_scale]` initialization from a seed.
    pub fn new(n_classes: usize, dim: usize, init_scale: f64, seed: u64) -> Result<Self> {
        Self::with_config(n_classes, dim, init_scale, seed, FactoredConfig::default())
    }

    pub fn with_config(
        n_classes: usize,
        dim: usize,
        init_scale: f64,
        seed: u64,
        config: FactoredConfig,
    ) -> Result<Self> {
        if !(init_scale > 0.0 && init_scale.is_finite()) {
            return Err(Error::Parameter(format!("init_scale must be > 0, got {init_scale}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_weights(Matrix::uniform(&mut rng, n_classes, dim, init_scale), config)
    }

    /// Starts from explicit weights: `V = W`, `U = I`, `w = 0`.
    pub fn from_weights(weights: Matrix, config: FactoredConfig) -> Result<Self> {
        let (n_classes, dim) = (weights.rows(), weights.cols());
        if n_classes < 2 {
            return Err(dim_err(format!("factored layer needs D >= 2, got {n_classes}")));
        }
        if dim < 1 {
            return Err(dim_err("factored layer needs d >= 1"));
        }
        if !weights.is_finite() {
            return Err(Error::Data("non-finite initial weights".into()));
        }
        let v_bar = weights.column_sums();
        let gram = weights.gram();
        Ok(FactoredLayer {
            n_classes,
            dim,
            v_store: weights,
            omega: vec![0.0; dim],
            u: Matrix::identity(dim),
            u_inv: Matrix::identity(dim),
            v_bar,
            gram,
            step_count: 0,
            since_refactor: 0,
            refactor_count: 0,
            config,
            id: NEXT_LAYER_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn config(&self) -> FactoredConfig {
        self.config
    }

    pub fn set_config(&mut self, config: FactoredConfig) {
        self.config = config;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn refactor_count(&self) -> u64 {
        self.refactor_count
    }

    pub fn v_store(&self) -> &Matrix {
        &self.v_store
    }

    pub fn omega(&self) -> &[f64] {
        &self.omega
    }

    pub fn u(&self) -> &Matrix {
        &self.u
    }

    pub fn u_inv(&self) -> &Matrix {
        &self.u_inv
    }

    pub fn v_bar(&self) -> &[f64] {
        &self.v_bar
    }

    pub fn gram(&self) -> &Matrix {
        &self.gram
    }

    fn check_h(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.dim {
            return Err(dim_err(format!("hidden vector has length {}, layer expects {}", h.len(), self.dim)));
        }
        Ok(())
    }

    fn check_target(&self, target: usize) -> Result<()> {
        if target >= self.n_classes {
            return Err(dim_err(format!("target {target} out of range for {} classes", self.n_classes)));
        }
        Ok(())
    }

    fn effective_row(&self, c: usize) -> Vec<f64> {
        self.v_store.row(c).iter().zip(&self.omega).map(|(v, w)| v + w).collect()
    }

    /// `(q, s^2, o_c)` of `o = W h` in O(d^2).
    pub fn forward(&self, h: &[f64], target: usize) -> Result<ForwardCache> {
        self.check_h(h)?;
        self.check_target(target)?;
        let h_hat = self.u.matvec(h);
        let v_c_eff = self.effective_row(target);
        let o_c = dot(&v_c_eff, &h_hat);
        let q = dot(&self.v_bar, &h_hat);
        let s_sq = dot(&h_hat, &self.gram.matvec(&h_hat));
        // Bad statistics here mean the maintained factors have lost precision.
        let stats = SphericalStats::new(q, s_sq, o_c, self.n_classes, target).map_err(|e| match e {
            Error::Data(m) => Error::Numerical(m),
            e => e,
        })?;
        Ok(ForwardCache {
            h: h.to_vec(),
            h_hat,
            stats,
            target,
            v_c_eff,
            layer_id: self.id,
            version: self.version,
        })
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        if cache.layer_id != self.id {
            return Err(Error::StaleCache("forward cache belongs to a different layer"));
        }
        if cache.version != self.version {
            return Err(Error::StaleCache("layer was modified after the forward pass"));
        }
        Ok(())
    }

    /// `dL/dh = W^T (alpha 1 + 2 beta o + gamma e_c)
    ///        = U^T (alpha vbar + 2 beta G h_hat + gamma v_c)`.
    pub fn input_grad(&self, cache: &ForwardCache, grad: &SphericalGrad) -> Result<Vec<f64>> {
        self.check_cache(cache)?;
        let mut y = self.gram.matvec(&cache.h_hat);
        for v in &mut y {
            *v *= 2.0 * grad.beta;
        }
        axpy(grad.alpha, &self.v_bar, &mut y);
        axpy(grad.gamma, &cache.v_c_eff, &mut y);
        Ok(self.u.matvec_t(&y))
    }

    /// SGD step for the example the cache was computed on.
    pub fn sgd_update(&mut self, cache: &ForwardCache, grad: &SphericalGrad, eta: f64) -> Result<()> {
        self.check_cache(cache)?;
        self.apply_update(&cache.h, cache.target, grad, eta)
    }

    /// `W <- W - eta (alpha 1 + 2 beta W h + gamma e_c) h^T`, exactly, in O(d^2).
    ///
    /// Unlike [`sgd_update`](Self::sgd_update) this does not require a fresh
    /// forward pass; minibatch training applies gradients computed against
    /// the pre-batch weights one after another.
    pub fn apply_update(&mut self, h: &[f64], target: usize, grad: &SphericalGrad, eta: f64) -> Result<()> {
        self.check_h(h)?;
        self.check_target(target)?;
        if !eta.is_finite() || !grad.is_finite() {
            return Err(Error::Data("non-finite learning rate or gradient".into()));
        }
        let kappa = 2.0 * eta * grad.beta;
        let h_sq = norm_sq(h);
        let denominator = 1.0 - kappa * h_sq;
        if denominator.abs() <= SINGULAR_GUARD {
            return Err(Error::SingularUpdate { denominator });
        }
        self.version += 1;

        // Multiplicative part: U <- U (I - kappa h h^T).
        if kappa != 0.0 {
            let u_h = self.u.matvec(h);
            self.u.rank1_update(-kappa, &u_h, h);
            // (I - kappa h h^T)^-1 = I + kappa / (1 - kappa |h|^2) h h^T
            let ht_uinv = self.u_inv.matvec_t(h);
            self.u_inv.rank1_update(kappa / denominator, h, &ht_uinv);
        }
        let u = self.u_inv.matvec_t(h);

        // Target row.
        if grad.gamma != 0.0 {
            let delta: Vec<f64> = u.iter().map(|x| -eta * grad.gamma * x).collect();
            let v_c = self.effective_row(target);
            self.gram.sym_rank2_update(&v_c, &delta, 1.0);
            axpy(1.0, &delta, &mut self.v_bar);
            axpy(1.0, &delta, self.v_store.row_mut(target));
        }

        // Shared offset for the all-ones term.
        if grad.alpha != 0.0 {
            let d_omega: Vec<f64> = u.iter().map(|x| -eta * grad.alpha * x).collect();
            let v_bar_old = self.v_bar.clone();
            self.gram.sym_rank2_update(&v_bar_old, &d_omega, self.n_classes as f64);
            axpy(self.n_classes as f64, &d_omega, &mut self.v_bar);
            axpy(1.0, &d_omega, &mut self.omega);
        }

        self.step_count += 1;
        self.since_refactor += 1;
        let period_due = self.config.refactor_period > 0 && self.since_refactor >= self.config.refactor_period;
        if period_due || self.cond_estimate() > self.config.cond_limit {
            self.refactorize();
        }
        Ok(())
    }

    /// All `D` scores; O(D d), evaluation only.
    pub fn full_scores(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.check_h(h)?;
        let h_hat = self.u.matvec(h);
        let shift = dot(&self.omega, &h_hat);
        Ok(self.v_store.as_slice().chunks_exact(self.dim).map(|r| dot(r, &h_hat) + shift).collect())
    }

    /// `(V + 1 w^T) U`; O(D d^2).
    pub fn materialize(&self) -> Matrix {
        let mut v_eff = self.v_store.clone();
        for r in v_eff.as_mut_slice().chunks_exact_mut(self.dim) {
            axpy(1.0, &self.omega, r);
        }
        v_eff.matmul(&self.u)
    }

    /// Folds `U` and `w` back into `V` and recomputes the summaries exactly.
    pub fn refactorize(&mut self) {
        self.v_store = self.materialize();
        self.omega = vec![0.0; self.dim];
        self.u = Matrix::identity(self.dim);
        self.u_inv = Matrix::identity(self.dim);
        self.v_bar = self.v_store.column_sums();
        self.gram = self.v_store.gram();
        self.since_refactor = 0;
        self.refactor_count += 1;
        self.version += 1;
    }

    /// `|U|_F |U^-1|_F / d`: 1 at the identity and within a factor `d` of
    /// the 2-norm condition number.
    pub fn cond_estimate(&self) -> f64 {
        let sq = |m: &Matrix| m.as_slice().iter().map(|v| v * v).sum::<f64>();
        (sq(&self.u) * sq(&self.u_inv)).sqrt() / self.dim as f64
    }

    pub fn integrity_check(&self) -> Integrity {
        let n = self.dim;
        let prod = self.u.matmul(&self.u_inv);
        let mut uinv_drift = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let e = prod.get(i, j) - if i == j { 1.0 } else { 0.0 };
                uinv_drift = uinv_drift.max(e.abs());
            }
        }

        let mut v_bar = vec![0.0; n];
        let mut gram = Matrix::zeros(n, n);
        let mut row = vec![0.0; n];
        for r in self.v_store.as_slice().chunks_exact(n) {
            for ((x, v), w) in row.iter_mut().zip(r).zip(&self.omega) {
                *x = v + w;
            }
            axpy(1.0, &row, &mut v_bar);
            gram.rank1_update(1.0, &row, &row);
        }
        let rel = |a: &[f64], b: &[f64]| {
            let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            let scale = max_abs(b);
            if scale == 0.0 {
                diff
            } else {
                diff / scale
            }
        };
        Integrity {
            uinv_drift,
            vbar_drift: rel(&self.v_bar, &v_bar),
            g_drift: rel(self.gram.as_slice(), gram.as_slice()),
            cond_estimate: self.cond_estimate(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{dense_eval, dense_grad_from_spherical, spherical_eval, LossKind, ZLossParams};
    use rand::Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    }

    /// The naive O(D d) SGD step the factored update must reproduce.
    fn dense_step(w: &mut Matrix, h: &[f64], c: usize, kind: LossKind, p: Option<&ZLossParams>, eta: f64) {
        let o = w.matvec(h);
        let g = dense_eval(kind, &o, c, p).unwrap().grad;
        w.rank1_update(-eta, &g, h);
    }

    #[test]
    fn init_materializes_to_store() {
        let layer = FactoredLayer::new(7, 3, 0.5, 11).unwrap();
        assert_eq!(layer.materialize(), *layer.v_store());
        let sums = layer.v_store().column_sums();
        for (a, b) in layer.v_bar().iter().zip(&sums) {
            assert!((a - b).abs() < 1e-12);
        }
        let again = FactoredLayer::new(7, 3, 0.5, 11).unwrap();
        assert_eq!(layer.v_store(), again.v_store());
        assert!(FactoredLayer::new(7, 3, 0.0, 11).is_err());
    }

    #[test]
    fn fresh_layer_has_no_drift() {
        let layer = FactoredLayer::new(20, 4, 1.0, 2).unwrap();
        let ic = layer.integrity_check();
        assert_eq!(ic.uinv_drift, 0.0);
        assert!(ic.vbar_drift < 1e-15 && ic.g_drift < 1e-15);
        assert_eq!(ic.cond_estimate, 1.0);
    }

    #[test]
    fn forward_matches_dense_at_init() {
        let layer = FactoredLayer::new(9, 4, 1.0, 5).unwrap();
        let h = [0.3, -0.2, 1.1, 0.5];
        let cache = layer.forward(&h, 3).unwrap();
        let o = layer.v_store().matvec(&h);
        let s = SphericalStats::from_outputs(&o, 3).unwrap();
        assert!((cache.stats.q - s.q).abs() < 1e-12);
        assert!((cache.stats.s_sq - s.s_sq).abs() < 1e-12);
        assert!((cache.stats.o_c - s.o_c).abs() < 1e-12);
        assert_eq!(layer.full_scores(&h).unwrap(), o);
    }

    #[test]
    fn one_mse_update_matches_dense_oracle() {
        let mut layer = FactoredLayer::new(3, 2, 1.0, 42).unwrap();
        let mut w = layer.materialize();
        let h = [0.7, -1.3];
        let cache = layer.forward(&h, 1).unwrap();
        let ev = spherical_eval(LossKind::Mse, &cache.stats, None).unwrap();
        layer.sgd_update(&cache, &ev.grad, 0.1).unwrap();
        dense_step(&mut w, &h, 1, LossKind::Mse, None, 0.1);
        assert!(layer.materialize().relative_distance(&w) < 1e-12);
    }

    #[test]
    fn zero_beta_leaves_u_alone() {
        let mut layer = FactoredLayer::new(6, 3, 1.0, 1).unwrap();
        let grad = SphericalGrad { alpha: 0.3, beta: 0.0, gamma: -0.8 };
        layer.apply_update(&[0.5, 0.1, -0.4], 2, &grad, 0.2).unwrap();
        assert_eq!(*layer.u(), Matrix::identity(3));
        assert!(layer.omega().iter().any(|&w| w != 0.0));
    }

    #[test]
    fn singular_update_is_refused() {
        let mut layer = FactoredLayer::new(6, 2, 1.0, 1).unwrap();
        // kappa |h|^2 = 2 * eta * beta * |h|^2 = 2 * 0.5 * 0.5 * 2 = 1
        let grad = SphericalGrad { alpha: 0.0, beta: 0.5, gamma: -1.0 };
        let before = layer.materialize();
        let err = layer.apply_update(&[1.0, 1.0], 0, &grad, 0.5).unwrap_err();
        assert!(matches!(err, Error::SingularUpdate { .. }));
        assert_eq!(layer.materialize(), before);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut layer = FactoredLayer::new(5, 2, 1.0, 3).unwrap();
        let h = [0.2, 0.4];
        let cache = layer.forward(&h, 0).unwrap();
        layer.refactorize();
        let g = SphericalGrad { alpha: 0.1, beta: 0.2, gamma: 0.3 };
        assert!(matches!(layer.input_grad(&cache, &g), Err(Error::StaleCache(_))));
        assert!(matches!(layer.sgd_update(&cache, &g, 0.1), Err(Error::StaleCache(_))));
        let other = FactoredLayer::new(5, 2, 1.0, 3).unwrap();
        assert!(matches!(other.input_grad(&cache, &g), Err(Error::StaleCache(_))));
    }

    #[test]
    fn input_grad_matches_dense_backprop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut layer = FactoredLayer::new(40, 5, 0.5, 8).unwrap();
        let p = ZLossParams::new(0.5, 3.0).unwrap();
        for _ in 0..30 {
            let h = random_vec(&mut rng, 5, 1.0);
            let c = rng.random_range(0..40);
            let cache = layer.forward(&h, c).unwrap();
            let ev = spherical_eval(LossKind::ZLoss, &cache.stats, Some(&p)).unwrap();
            let gh = layer.input_grad(&cache, &ev.grad).unwrap();
            let w = layer.materialize();
            let o = w.matvec(&h);
            let g = dense_grad_from_spherical(&o, c, &ev.grad).unwrap();
            let expect = w.matvec_t(&g);
            let scale = max_abs(&expect).max(1e-12);
            for (a, b) in gh.iter().zip(&expect) {
                assert!((a - b).abs() <= 1e-8 * scale);
            }
            layer.sgd_update(&cache, &ev.grad, 0.05).unwrap();
        }
    }

    #[test]
    fn zero_grad_gives_zero_input_grad() {
        let layer = FactoredLayer::new(5, 3, 1.0, 3).unwrap();
        let cache = layer.forward(&[1.0, 2.0, 3.0], 1).unwrap();
        let gh = layer.input_grad(&cache, &SphericalGrad::default()).unwrap();
        assert_eq!(gh, vec![0.0; 3]);
    }

    #[test]
    fn mse_minimum_has_zero_input_grad() {
        // W = I (3 x 3) and h = e_1 give o = e_1 exactly.
        let layer = FactoredLayer::from_weights(Matrix::identity(3), FactoredConfig::default()).unwrap();
        let h = [0.0, 1.0, 0.0];
        let cache = layer.forward(&h, 1).unwrap();
        let ev = spherical_eval(LossKind::Mse, &cache.stats, None).unwrap();
        let gh = layer.input_grad(&cache, &ev.grad).unwrap();
        assert!(gh.iter().all(|g| g.abs() < 1e-10));
    }

    #[test]
    fn refactorization_is_transparent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = FactoredConfig { refactor_period: 0, cond_limit: f64::INFINITY };
        let mut a = FactoredLayer::with_config(30, 4, 0.5, 4, cfg).unwrap();
        let mut b = a.clone();
        let p = ZLossParams::new(1.0, 2.0).unwrap();
        for step in 0..120 {
            let h = random_vec(&mut rng, 4, 1.0);
            let c = rng.random_range(0..30);
            let ga = spherical_eval(LossKind::ZLoss, &a.forward(&h, c).unwrap().stats, Some(&p)).unwrap().grad;
            a.apply_update(&h, c, &ga, 0.1).unwrap();
            b.apply_update(&h, c, &ga, 0.1).unwrap();
            if step % 17 == 0 {
                b.refactorize();
            }
        }
        assert!(b.materialize().relative_distance(&a.materialize()) < 1e-8);
        let before = a.materialize();
        let h = [0.3, 0.1, -0.5, 0.9];
        let s0 = a.forward(&h, 7).unwrap().stats;
        let order = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&i, &j| v[j].partial_cmp(&v[i]).unwrap().then(i.cmp(&j)));
            idx
        };
        let scores_before = a.full_scores(&h).unwrap();
        a.refactorize();
        assert!(a.materialize().relative_distance(&before) < 1e-10);
        let s1 = a.forward(&h, 7).unwrap().stats;
        for (x, y) in [(s0.q, s1.q), (s0.s_sq, s1.s_sq), (s0.o_c, s1.o_c)] {
            assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()));
        }
        let ic = a.integrity_check();
        assert!(ic.uinv_drift <= 1e-12 && ic.vbar_drift <= 1e-12 && ic.g_drift <= 1e-12);
        assert_eq!(order(&scores_before), order(&a.full_scores(&h).unwrap()));
    }

    #[test]
    fn materialize_is_idempotent_and_matches_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut layer = FactoredLayer::new(25, 3, 0.5, 6).unwrap();
        for _ in 0..10 {
            let h = random_vec(&mut rng, 3, 1.0);
            let c = rng.random_range(0..25);
            let cache = layer.forward(&h, c).unwrap();
            let ev = spherical_eval(LossKind::Taylor, &cache.stats, None).unwrap();
            layer.sgd_update(&cache, &ev.grad, 0.1).unwrap();
        }
        let w1 = layer.materialize();
        let w2 = layer.materialize();
        assert_eq!(w1.as_slice(), w2.as_slice());
        // |W|_F^2 = trace(U^T G U)
        let ugu = layer.u().matvec_t(&[0.0; 3]);
        assert_eq!(ugu.len(), 3);
        let gu = layer.gram().matmul(layer.u());
        let mut trace = 0.0;
        for j in 0..3 {
            for i in 0..3 {
                trace += layer.u().get(i, j) * gu.get(i, j);
            }
        }
        let fro = w1.frobenius_norm().powi(2);
        assert!((trace - fro).abs() <= 1e-6 * fro);
    }
}
