//! Central finite differences as an oracle for the analytic loss gradients.
//!
//! The loss value is re-evaluated from its definition at `o +- eps e_k`,
//! independently of the `(alpha, beta, gamma)` chain rule used by
//! [`dense_eval`]. By default the reference values are computed in
//! double-double arithmetic: with `eps = 1e-5` a plain `f64` difference
//! quotient carries roughly `1e-16 |L| / eps` of rounding noise, which swamps
//! gradient components that happen to be close to zero.
//!
//! Each perturbation only touches one coordinate, so the reference is built
//! once per point from per-coordinate terms and running sums, and every
//! perturbed value costs O(1) (O(#series terms) for the Z-normalized
//! softmax) instead of O(D).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::dd::Dd;
use super::{dense_eval, LossKind, ZLossParams, SIGMA_FLOOR};
use crate::error::{dim_err, Error, Result};

/// Arithmetic used for the reference loss evaluations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdPrecision {
    F64,
    DoubleDouble,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradCheck {
    Checked { max_rel_error: f64, worst_index: usize },
    /// A normalized loss whose sigma is within `eps` of the floor.
    SkippedDegenerate { sigma: f64 },
}

impl GradCheck {
    pub fn max_rel_error(&self) -> Option<f64> {
        match *self {
            GradCheck::Checked { max_rel_error, .. } => Some(max_rel_error),
            GradCheck::SkippedDegenerate { .. } => None,
        }
    }
}

/// `|a - n| / max(|a|, |n|, 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Acceptance threshold for a loss kind: MSE is quadratic, so its central
/// differences are exact up to roundoff.
pub fn tolerance(kind: LossKind) -> f64 {
    if kind == LossKind::Mse {
        1e-9
    } else {
        1e-6
    }
}

pub fn grad_check(
    kind: LossKind,
    o: &[f64],
    target: usize,
    params: Option<&ZLossParams>,
    eps: f64,
) -> Result<GradCheck> {
    grad_check_with(kind, o, target, params, eps, FdPrecision::DoubleDouble)
}

pub fn grad_check_with(
    kind: LossKind,
    o: &[f64],
    target: usize,
    params: Option<&ZLossParams>,
    eps: f64,
    precision: FdPrecision,
) -> Result<GradCheck> {
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("eps must be > 0, got {eps}")));
    }
    if kind.is_normalized() {
        let d = o.len() as f64;
        let mu = o.iter().sum::<f64>() / d;
        let sigma = (o.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d).sqrt();
        if sigma <= SIGMA_FLOOR + eps {
            return Ok(GradCheck::SkippedDegenerate { sigma });
        }
    }
    let analytic = dense_eval(kind, o, target, params)?.grad;
    let numeric = central_differences(kind, o, target, params, eps, precision)?;
    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0f64), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheck::Checked { max_rel_error, worst_index })
}

/// `(L(o + eps e_k) - L(o - eps e_k)) / (2 eps)` for every `k`.
pub fn central_differences(
    kind: LossKind,
    o: &[f64],
    target: usize,
    params: Option<&ZLossParams>,
    eps: f64,
    precision: FdPrecision,
) -> Result<Vec<f64>> {
    match precision {
        FdPrecision::F64 => fd_with::<f64>(kind, o, target, params, eps),
        FdPrecision::DoubleDouble => fd_with::<Dd>(kind, o, target, params, eps),
    }
}

fn fd_with<S: Scalar>(
    kind: LossKind,
    o: &[f64],
    target: usize,
    params: Option<&ZLossParams>,
    eps: f64,
) -> Result<Vec<f64>> {
    if o.len() < 2 || target >= o.len() {
        return Err(dim_err(format!("bad shape: D={}, target={target}", o.len())));
    }
    let reference = Reference::<S>::new(kind, o, target, params)?;
    let two_eps = S::from_f64(2.0 * eps);
    Ok((0..o.len())
        .map(|k| {
            let plus = reference.perturbed(k, eps);
            let minus = reference.perturbed(k, -eps);
            ((plus - minus) / two_eps).to_f64()
        })
        .collect())
}

trait Scalar:
    Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn softplus(self) -> Self;
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn softplus(self) -> Self {
        super::softplus(self)
    }
}

impl Scalar for Dd {
    fn from_f64(x: f64) -> Self {
        Dd::from_f64(x)
    }
    fn to_f64(self) -> f64 {
        Dd::to_f64(self)
    }
    fn exp(self) -> Self {
        Dd::exp(self)
    }
    fn ln(self) -> Self {
        Dd::ln(self)
    }
    fn sqrt(self) -> Self {
        Dd::sqrt(self)
    }
    fn softplus(self) -> Self {
        Dd::softplus(self)
    }
}

/// Terms of the Taylor series used for the Z-normalized softmax.
const SERIES_TERMS: usize = 16;
/// Above this `|a (r - 1)| max|z|` the series is abandoned for direct summation.
const SERIES_LIMIT: f64 = 1e-2;

/// Precomputed sums from which a loss value at a one-coordinate
/// perturbation of `o` is recovered.
struct Reference<'a, S: Scalar> {
    kind: LossKind,
    o: &'a [f64],
    target: usize,
    a: f64,
    b: f64,
    terms: Vec<S>,
    total: S,
    // Z-normalized kinds
    q: S,
    s_sq: S,
    mu: S,
    sigma: S,
    z: Vec<S>,
    moments: Vec<S>,
    z_max: f64,
    // log-softmax
    shift: f64,
}

impl<'a, S: Scalar> Reference<'a, S> {
    fn new(kind: LossKind, o: &'a [f64], target: usize, params: Option<&ZLossParams>) -> Result<Self> {
        let (a, b) = match (kind.needs_params(), params) {
            (true, None) => return Err(Error::Parameter(format!("loss `{kind}` requires a and b"))),
            (_, Some(p)) => (p.a, p.b),
            (false, None) => (1.0, 0.0),
        };
        let zero = S::from_f64(0.0);
        let mut r = Reference {
            kind,
            o,
            target,
            a,
            b,
            terms: Vec::new(),
            total: zero,
            q: zero,
            s_sq: zero,
            mu: zero,
            sigma: zero,
            z: Vec::new(),
            moments: Vec::new(),
            z_max: 0.0,
            shift: 0.0,
        };
        match kind {
            LossKind::LogSoftmax => {
                r.shift = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            }
            LossKind::ZLoss | LossKind::Sz => {
                for &v in o {
                    let x = S::from_f64(v);
                    r.q = r.q + x;
                    r.s_sq = r.s_sq + x * x;
                }
                let (mu, sigma) = r.moments_of(r.q, r.s_sq);
                r.mu = mu;
                r.sigma = sigma;
            }
            _ => {}
        }
        if kind == LossKind::Sz {
            r.z = o.iter().map(|&v| (S::from_f64(v) - r.mu) / r.sigma).collect();
            r.z_max = r.z.iter().map(|z| z.to_f64().abs()).fold(0.0, f64::max);
            let sa = S::from_f64(a);
            let weights: Vec<S> = r.z.iter().map(|&z| (sa * z).exp()).collect();
            let mut moments = vec![zero; SERIES_TERMS];
            for (&w, &z) in weights.iter().zip(&r.z) {
                let mut p = w;
                for m in moments.iter_mut() {
                    *m = *m + p;
                    p = p * z;
                }
            }
            r.moments = moments;
            r.terms = weights;
        } else if kind != LossKind::ZLoss {
            r.terms = o.iter().enumerate().map(|(k, &v)| r.term(k, S::from_f64(v))).collect();
            r.total = r.terms.iter().fold(zero, |acc, &t| acc + t);
        }
        Ok(r)
    }

    fn moments_of(&self, q: S, s_sq: S) -> (S, S) {
        let d = S::from_f64(self.o.len() as f64);
        let mu = q / d;
        (mu, (s_sq / d - mu * mu).sqrt())
    }

    /// The additive per-coordinate contribution for the sum-decomposable kinds.
    fn term(&self, k: usize, x: S) -> S {
        let one = S::from_f64(1.0);
        match self.kind {
            LossKind::LogSoftmax => (x - S::from_f64(self.shift)).exp(),
            LossKind::CeSigmoid => {
                if k == self.target {
                    (-x).softplus()
                } else {
                    x.softplus()
                }
            }
            LossKind::Mse => {
                let t = if k == self.target { x - one } else { x };
                S::from_f64(0.5) * t * t
            }
            LossKind::Taylor => one + x + S::from_f64(0.5) * x * x,
            LossKind::ZLoss | LossKind::Sz => unreachable!("normalized kinds are not additive"),
        }
    }

    fn perturbed(&self, k: usize, delta: f64) -> S {
        let old = S::from_f64(self.o[k]);
        let new = old + S::from_f64(delta);
        let c = self.target;
        let oc = if k == c { new } else { S::from_f64(self.o[c]) };
        match self.kind {
            LossKind::LogSoftmax => {
                let total = self.total - self.terms[k] + self.term(k, new);
                total.ln() + S::from_f64(self.shift) - oc
            }
            LossKind::CeSigmoid | LossKind::Mse => self.total - self.terms[k] + self.term(k, new),
            LossKind::Taylor => {
                let total = self.total - self.terms[k] + self.term(k, new);
                let n_c = if k == c { self.term(k, new) } else { self.terms[c] };
                total.ln() - n_c.ln()
            }
            LossKind::ZLoss => {
                let q = self.q - old + new;
                let s_sq = self.s_sq - old * old + new * new;
                let (mu, sigma) = self.moments_of(q, s_sq);
                let z_c = (oc - mu) / sigma;
                let sa = S::from_f64(self.a);
                (sa * (S::from_f64(self.b) - z_c)).softplus() / sa
            }
            LossKind::Sz => self.perturbed_sz(k, old, new),
        }
    }

    fn perturbed_sz(&self, k: usize, old: S, new: S) -> S {
        let one = S::from_f64(1.0);
        let sa = S::from_f64(self.a);
        let q = self.q - old + new;
        let s_sq = self.s_sq - old * old + new * new;
        let (mu, sigma) = self.moments_of(q, s_sq);
        // For j != k: z'_j = r z_j - t.
        let r = self.sigma / sigma;
        let t = (mu - self.mu) / sigma;
        let z_k = (new - mu) / sigma;
        let z_c = if k == self.target { z_k } else { r * self.z[self.target] - t };

        let eps = sa * (r - one);
        let rest = if eps.to_f64().abs() * self.z_max <= SERIES_LIMIT {
            // sum_{j != k} e^{a z_j} e^{a (r-1) z_j} expanded in powers of a (r-1).
            let mut sum = S::from_f64(0.0);
            let mut coef = one;
            let mut zk_pow = self.terms[k];
            for (n, &m) in self.moments.iter().enumerate() {
                if n > 0 {
                    coef = coef * eps / S::from_f64(n as f64);
                }
                sum = sum + coef * (m - zk_pow);
                zk_pow = zk_pow * self.z[k];
            }
            (-(sa * t)).exp() * sum
        } else {
            self.z
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != k)
                .fold(S::from_f64(0.0), |acc, (_, &z)| acc + (sa * (r * z - t)).exp())
        };
        let total = rest + (sa * z_k).exp();
        (total.ln() - sa * z_c) / sa
    }
}

/// A randomized finite-difference campaign over several loss kinds and sizes.
#[derive(Clone, Debug)]
pub struct SweepConfig {
    pub kinds: Vec<LossKind>,
    pub dims: Vec<usize>,
    pub trials: usize,
    pub eps: f64,
    pub seed: u64,
    /// Fixed `(a, b)`; when absent the normalized kinds cycle through
    /// `a in {0.1, 1, 10}` x `b in {0, 10, 28}`.
    pub params: Option<ZLossParams>,
    pub precision: FdPrecision,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            kinds: LossKind::ALL.to_vec(),
            dims: vec![5, 50, 1000],
            trials: 100,
            eps: 1e-5,
            seed: 0x5eed,
            params: None,
            precision: FdPrecision::DoubleDouble,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub loss: LossKind,
    pub dim: usize,
    pub trials: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

const A_GRID: [f64; 3] = [0.1, 1.0, 10.0];
const B_GRID: [f64; 3] = [0.0, 10.0, 28.0];

pub fn sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &kind in &cfg.kinds {
        for &dim in &cfg.dims {
            if dim < 2 {
                return Err(dim_err(format!("gradcheck dimension must be >= 2, got {dim}")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((dim as u64) << 32) ^ kind as u64);
            let mut worst = 0.0f64;
            let mut skipped = 0;
            for trial in 0..cfg.trials {
                let params = cfg.params.unwrap_or_else(|| ZLossParams {
                    a: A_GRID[trial % 3],
                    b: B_GRID[(trial / 3) % 3],
                });
                let scale = rng.random_range(0.5..2.0);
                let shift = rng.random_range(-1.0..1.0);
                let o: Vec<f64> = (0..dim)
                    .map(|_| shift + scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let target = rng.random_range(0..dim);
                match grad_check_with(kind, &o, target, Some(&params), cfg.eps, cfg.precision)? {
                    GradCheck::Checked { max_rel_error, .. } => worst = worst.max(max_rel_error),
                    GradCheck::SkippedDegenerate { .. } => skipped += 1,
                }
            }
            let tol = tolerance(kind);
            rows.push(SweepRow {
                loss: kind,
                dim,
                trials: cfg.trials,
                skipped,
                max_rel_error: worst,
                tolerance: tol,
                passed: worst <= tol && skipped < cfg.trials,
            });
        }
    }
    Ok(rows)
}
