//! Classification losses over a pre-activation vector `o` and a target `c`.
//!
//! The spherical kinds ([`LossKind::ZLoss`], [`LossKind::Mse`],
//! [`LossKind::Taylor`]) only ever look at `(sum o, sum o^2, o_c)`, packed in
//! [`SphericalStats`]. Their partial derivatives with respect to those three
//! numbers, [`SphericalGrad`], are all the factored output layer needs to
//! apply an exact update without materializing `o`.
//!
//! The dense-only kinds (log-softmax, cross-entropy-sigmoid and the
//! Z-normalized softmax) need the full vector.

mod dd;
pub mod gradcheck;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Standard deviations below this are treated as zero.
pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    LogSoftmax,
    CeSigmoid,
    /// Z-normalized log-softmax, `-(1/a) log softmax_c(a z)`.
    Sz,
    ZLoss,
    Mse,
    Taylor,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [
        LossKind::LogSoftmax,
        LossKind::CeSigmoid,
        LossKind::Sz,
        LossKind::ZLoss,
        LossKind::Mse,
        LossKind::Taylor,
    ];

    pub fn is_spherical(self) -> bool {
        matches!(self, LossKind::ZLoss | LossKind::Mse | LossKind::Taylor)
    }

    /// Whether the loss is invariant to `o -> alpha*o + beta` (and so
    /// undefined when `o` is constant).
    pub fn is_normalized(self) -> bool {
        matches!(self, LossKind::ZLoss | LossKind::Sz)
    }

    pub fn needs_params(self) -> bool {
        self.is_normalized()
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::LogSoftmax => "logsoftmax",
            LossKind::CeSigmoid => "ce",
            LossKind::Sz => "sz",
            LossKind::ZLoss => "zloss",
            LossKind::Mse => "mse",
            LossKind::Taylor => "taylor",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "logsoftmax" | "softmax" => LossKind::LogSoftmax,
            "ce" | "ce_sigmoid" | "ce-sigmoid" => LossKind::CeSigmoid,
            "sz" => LossKind::Sz,
            "zloss" | "z" => LossKind::ZLoss,
            "mse" => LossKind::Mse,
            "taylor" => LossKind::Taylor,
            other => return Err(Error::Config(format!("unknown loss kind `{other}`"))),
        })
    }
}

/// Softness `a` and shift `b` of the Z-loss. The Z-normalized softmax only
/// uses `a`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZLossParams {
    pub a: f64,
    pub b: f64,
}

impl ZLossParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::Parameter(format!("Z-loss scale a must be > 0, got {a}")));
        }
        if !b.is_finite() {
            return Err(Error::Parameter(format!("Z-loss shift b must be finite, got {b}")));
        }
        Ok(ZLossParams { a, b })
    }
}

/// A loss kind together with whatever hyperparameters it needs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Loss {
    pub kind: LossKind,
    pub params: Option<ZLossParams>,
}

impl Loss {
    pub fn new(kind: LossKind, params: Option<ZLossParams>) -> Result<Self> {
        if kind.needs_params() && params.is_none() {
            return Err(Error::Parameter(format!("loss `{kind}` requires a and b")));
        }
        if let Some(p) = params {
            ZLossParams::new(p.a, p.b)?;
        }
        Ok(Loss { kind, params })
    }

    pub fn zloss(a: f64, b: f64) -> Result<Self> {
        Self::new(LossKind::ZLoss, Some(ZLossParams::new(a, b)?))
    }

    pub fn plain(kind: LossKind) -> Result<Self> {
        Self::new(kind, None)
    }

    pub fn spherical_eval(&self, stats: &SphericalStats) -> Result<SphericalEval> {
        spherical_eval(self.kind, stats, self.params.as_ref())
    }

    pub fn dense_eval(&self, o: &[f64], target: usize) -> Result<DenseEval> {
        dense_eval(self.kind, o, target, self.params.as_ref())
    }
}

/// The summary of an output vector that spherical losses consume.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphericalStats {
    /// `sum_k o_k`
    pub q: f64,
    /// `sum_k o_k^2`
    pub s_sq: f64,
    pub o_c: f64,
    pub dim: usize,
    pub target: usize,
}

impl SphericalStats {
    pub fn new(q: f64, s_sq: f64, o_c: f64, dim: usize, target: usize) -> Result<Self> {
        if dim < 2 {
            return Err(dim_err(format!("need at least 2 classes, got {dim}")));
        }
        if target >= dim {
            return Err(dim_err(format!("target {target} out of range for {dim} classes")));
        }
        if !(q.is_finite() && s_sq.is_finite() && o_c.is_finite()) {
            return Err(Error::Data("non-finite spherical statistics".into()));
        }
        // Cauchy-Schwarz, with room for roundoff in incrementally maintained sums.
        let lower = q * q / dim as f64;
        if s_sq < lower - 1e-9 * (lower.abs() + s_sq.abs() + 1e-300) {
            return Err(Error::Data(format!(
                "inconsistent statistics: sum o^2 = {s_sq} < (sum o)^2/D = {lower}"
            )));
        }
        Ok(SphericalStats { q, s_sq, o_c, dim, target })
    }

    pub fn from_outputs(o: &[f64], target: usize) -> Result<Self> {
        if target >= o.len() {
            return Err(dim_err(format!("target {target} out of range for {} classes", o.len())));
        }
        let q = o.iter().sum();
        let s_sq = o.iter().map(|v| v * v).sum();
        Self::new(q, s_sq, o[target], o.len(), target)
    }

    /// Mean and (unfloored) standard deviation of the underlying vector.
    pub fn moments(&self) -> (f64, f64) {
        let d = self.dim as f64;
        let mu = self.q / d;
        let var = (self.s_sq / d - mu * mu).max(0.0);
        (mu, var.sqrt())
    }
}

/// Partials of a spherical loss with respect to `(q, s^2, o_c)`.
///
/// The dense gradient is `dL/do_k = alpha + 2 beta o_k + gamma [k == c]`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SphericalGrad {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl SphericalGrad {
    pub fn is_finite(&self) -> bool {
        self.alpha.is_finite() && self.beta.is_finite() && self.gamma.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphericalEval {
    pub value: f64,
    pub grad: SphericalGrad,
    /// The standard deviation was clamped to [`SIGMA_FLOOR`].
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseEval {
    pub value: f64,
    pub grad: Vec<f64>,
    pub degenerate: bool,
}

/// Per-example standardization `z = (o - mu) / sigma`.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardized {
    pub z: Vec<f64>,
    pub mu: f64,
    pub sigma: f64,
    pub degenerate: bool,
}

pub fn standardize(o: &[f64], sigma_floor: f64) -> Result<Standardized> {
    if o.len() < 2 {
        return Err(dim_err(format!("standardize needs at least 2 outputs, got {}", o.len())));
    }
    if !(sigma_floor > 0.0) {
        return Err(Error::Parameter(format!("sigma floor must be > 0, got {sigma_floor}")));
    }
    let d = o.len() as f64;
    let mu = o.iter().sum::<f64>() / d;
    let var = o.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
    let raw = var.sqrt();
    let degenerate = !(raw >= sigma_floor);
    let sigma = if degenerate { sigma_floor } else { raw };
    let z = o.iter().map(|v| (v - mu) / sigma).collect();
    Ok(Standardized { z, mu, sigma, degenerate })
}

/// `log(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Value of the Z-loss as a function of the standardized target score.
#[inline]
pub fn zloss_of_zc(z_c: f64, params: &ZLossParams) -> f64 {
    softplus(params.a * (params.b - z_c)) / params.a
}

pub fn spherical_eval(
    kind: LossKind,
    stats: &SphericalStats,
    params: Option<&ZLossParams>,
) -> Result<SphericalEval> {
    let d = stats.dim as f64;
    match kind {
        LossKind::ZLoss => {
            let p = params.ok_or_else(|| Error::Parameter("zloss requires a and b".into()))?;
            let mu = stats.q / d;
            let raw = (stats.s_sq / d - mu * mu).max(0.0).sqrt();
            let degenerate = !(raw >= SIGMA_FLOOR);
            let sigma = if degenerate { SIGMA_FLOOR } else { raw };
            let z_c = (stats.o_c - mu) / sigma;
            let value = zloss_of_zc(z_c, p);
            let g_z = -sigmoid(p.a * (p.b - z_c));
            let grad = if degenerate {
                // sigma is a constant here, so only the mean moves z_c.
                SphericalGrad { alpha: -g_z / (d * sigma), beta: 0.0, gamma: g_z / sigma }
            } else {
                SphericalGrad {
                    alpha: g_z / (d * sigma) * (z_c * mu / sigma - 1.0),
                    beta: -g_z * z_c / (2.0 * d * sigma * sigma),
                    gamma: g_z / sigma,
                }
            };
            Ok(SphericalEval { value, grad, degenerate })
        }
        LossKind::Mse => Ok(SphericalEval {
            value: 0.5 * (stats.s_sq - 2.0 * stats.o_c + 1.0),
            grad: SphericalGrad { alpha: 0.0, beta: 0.5, gamma: -1.0 },
            degenerate: false,
        }),
        LossKind::Taylor => {
            // Both are strictly positive: 1 + x + x^2/2 >= 1/2.
            let z = d + stats.q + 0.5 * stats.s_sq;
            let n_c = 1.0 + stats.o_c + 0.5 * stats.o_c * stats.o_c;
            Ok(SphericalEval {
                value: z.ln() - n_c.ln(),
                grad: SphericalGrad {
                    alpha: 1.0 / z,
                    beta: 0.5 / z,
                    gamma: -(1.0 + stats.o_c) / n_c,
                },
                degenerate: false,
            })
        }
        other => Err(Error::Config(format!(
            "loss `{other}` is not in the spherical family and needs the full output vector"
        ))),
    }
}

pub fn dense_grad_from_spherical(o: &[f64], target: usize, grad: &SphericalGrad) -> Result<Vec<f64>> {
    if target >= o.len() {
        return Err(dim_err(format!("target {target} out of range for {} classes", o.len())));
    }
    let mut g: Vec<f64> = o.iter().map(|&ok| grad.alpha + 2.0 * grad.beta * ok).collect();
    g[target] += grad.gamma;
    Ok(g)
}

/// Loss value and full gradient with respect to `o`.
pub fn dense_eval(
    kind: LossKind,
    o: &[f64],
    target: usize,
    params: Option<&ZLossParams>,
) -> Result<DenseEval> {
    if o.len() < 2 {
        return Err(dim_err(format!("need at least 2 outputs, got {}", o.len())));
    }
    if target >= o.len() {
        return Err(dim_err(format!("target {target} out of range for {} classes", o.len())));
    }
    match kind {
        LossKind::ZLoss | LossKind::Mse | LossKind::Taylor => {
            let stats = SphericalStats::from_outputs(o, target)?;
            let ev = spherical_eval(kind, &stats, params)?;
            let grad = dense_grad_from_spherical(o, target, &ev.grad)?;
            Ok(DenseEval { value: ev.value, grad, degenerate: ev.degenerate })
        }
        LossKind::LogSoftmax => {
            let (lse, mut p) = log_softmax_parts(o);
            let value = lse - o[target];
            p[target] -= 1.0;
            Ok(DenseEval { value, grad: p, degenerate: false })
        }
        LossKind::CeSigmoid => {
            let mut value = 0.0;
            let grad = o
                .iter()
                .enumerate()
                .map(|(k, &ok)| {
                    if k == target {
                        value += softplus(-ok);
                        -sigmoid(-ok)
                    } else {
                        value += softplus(ok);
                        sigmoid(ok)
                    }
                })
                .collect();
            Ok(DenseEval { value, grad, degenerate: false })
        }
        LossKind::Sz => {
            let p = params.ok_or_else(|| Error::Parameter("sz requires a".into()))?;
            let st = standardize(o, SIGMA_FLOOR)?;
            let scaled: Vec<f64> = st.z.iter().map(|z| p.a * z).collect();
            let (lse, mut soft) = log_softmax_parts(&scaled);
            let value = (lse - scaled[target]) / p.a;
            // dL/dz = softmax(a z) - e_c; it sums to zero.
            soft[target] -= 1.0;
            let dz = soft;
            let d = o.len() as f64;
            let grad = if st.degenerate {
                dz.iter().map(|g| g / st.sigma).collect()
            } else {
                let proj = dz.iter().zip(&st.z).map(|(g, z)| g * z).sum::<f64>() / d;
                let mean = dz.iter().sum::<f64>() / d;
                dz.iter()
                    .zip(&st.z)
                    .map(|(g, z)| (g - mean - z * proj) / st.sigma)
                    .collect()
            };
            Ok(DenseEval { value, grad, degenerate: st.degenerate })
        }
    }
}

/// `(logsumexp(x), softmax(x))` with the max-subtraction trick.
pub fn log_softmax_parts(x: &[f64]) -> (f64, Vec<f64>) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    for v in &mut e {
        *v /= s;
    }
    (m + s.ln(), e)
}
