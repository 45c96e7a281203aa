//! Output heads behind one interface: dense `W h`, the factored layer and
//! the two-level hierarchical softmax.
//!
//! Training goes through [`OutputHead::prepare`] (forward, loss, input
//! gradient, no mutation) and [`OutputHead::apply`] (the weight update).
//! Splitting the two lets a minibatch compute every example against the
//! pre-batch weights and then apply the updates one by one.

pub mod dense;
pub mod hsm;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factored::{FactoredConfig, FactoredLayer};
use crate::losses::{Loss, LossKind, SphericalGrad};

pub use dense::{DenseHead, DenseStep};
pub use hsm::{build_frequency_clusters, default_cluster_count, Clusters, HsmGrad, HsmHead};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Dense,
    Factored,
    Hsm,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Dense, HeadKind::Factored, HeadKind::Hsm];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Dense => "dense",
            HeadKind::Factored => "factored",
            HeadKind::Hsm => "hsm",
        }
    }

    /// Rejects head/loss pairs that cannot be trained.
    pub fn check_loss(self, loss: &Loss) -> Result<()> {
        match self {
            HeadKind::Dense => Ok(()),
            HeadKind::Factored if loss.kind.is_spherical() => Ok(()),
            HeadKind::Factored => Err(Error::Config(format!(
                "loss `{}` is not spherical and cannot train the factored head (use zloss, mse or taylor)",
                loss.kind
            ))),
            HeadKind::Hsm if loss.kind == LossKind::LogSoftmax => Ok(()),
            HeadKind::Hsm => Err(Error::Config(format!(
                "the hsm head trains its own hierarchical log-softmax; got loss `{}`",
                loss.kind
            ))),
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown head `{s}` (expected dense, factored or hsm)")))
    }
}

#[derive(Clone, Debug)]
enum Pending {
    Dense { h: Vec<f64>, grad: Vec<f64> },
    Factored { h: Vec<f64>, target: usize, grad: SphericalGrad },
    Hsm(HsmGrad),
}

/// Result of a forward/backward pass through a head, holding the update
/// it implies until [`OutputHead::apply`] consumes it.
#[derive(Clone, Debug)]
pub struct HeadStep {
    pub value: f64,
    pub input_grad: Vec<f64>,
    pub degenerate: bool,
    pending: Pending,
}

#[derive(Clone, Debug)]
pub enum OutputHead {
    Dense(DenseHead),
    Factored(FactoredLayer),
    Hsm(HsmHead),
}

/// How to build a head.
#[derive(Clone, Debug)]
pub struct HeadSpec<'a> {
    pub kind: HeadKind,
    pub n_classes: usize,
    pub dim: usize,
    pub init_scale: f64,
    pub seed: u64,
    /// Class frequencies for clustering; uniform when absent.
    pub freqs: Option<&'a [u64]>,
    /// Cluster count; `ceil(sqrt(D))` when absent.
    pub n_clusters: Option<usize>,
    pub factored: FactoredConfig,
}

impl OutputHead {
    pub fn build(spec: &HeadSpec<'_>) -> Result<Self> {
        Ok(match spec.kind {
            HeadKind::Dense => OutputHead::Dense(DenseHead::new(spec.n_classes, spec.dim, spec.init_scale, spec.seed)?),
            HeadKind::Factored => OutputHead::Factored(FactoredLayer::with_config(
                spec.n_classes,
                spec.dim,
                spec.init_scale,
                spec.seed,
                spec.factored,
            )?),
            HeadKind::Hsm => {
                let uniform;
                let freqs = match spec.freqs {
                    Some(f) => f,
                    None => {
                        uniform = vec![1u64; spec.n_classes];
                        &uniform
                    }
                };
                if freqs.len() != spec.n_classes {
                    return Err(Error::Config(format!(
                        "{} frequencies for {} classes",
                        freqs.len(),
                        spec.n_classes
                    )));
                }
                let m = spec.n_clusters.unwrap_or_else(|| default_cluster_count(spec.n_classes));
                let clusters = build_frequency_clusters(freqs, m)?;
                OutputHead::Hsm(HsmHead::new(clusters, spec.dim, spec.init_scale, spec.seed)?)
            }
        })
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            OutputHead::Dense(_) => HeadKind::Dense,
            OutputHead::Factored(_) => HeadKind::Factored,
            OutputHead::Hsm(_) => HeadKind::Hsm,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            OutputHead::Dense(h) => h.n_classes(),
            OutputHead::Factored(h) => h.n_classes(),
            OutputHead::Hsm(h) => h.n_classes(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            OutputHead::Dense(h) => h.dim(),
            OutputHead::Factored(h) => h.dim(),
            OutputHead::Hsm(h) => h.dim(),
        }
    }

    /// Loss, `dL/dh` and the pending update at the current weights.
    pub fn prepare(&self, h: &[f64], target: usize, loss: &Loss) -> Result<HeadStep> {
        self.kind().check_loss(loss)?;
        match self {
            OutputHead::Dense(head) => {
                let st = head.eval(h, target, loss)?;
                Ok(HeadStep {
                    value: st.value,
                    input_grad: st.input_grad,
                    degenerate: st.degenerate,
                    pending: Pending::Dense { h: h.to_vec(), grad: st.grad },
                })
            }
            OutputHead::Factored(layer) => {
                let cache = layer.forward(h, target)?;
                let ev = loss.spherical_eval(&cache.stats)?;
                let input_grad = layer.input_grad(&cache, &ev.grad)?;
                Ok(HeadStep {
                    value: ev.value,
                    input_grad,
                    degenerate: ev.degenerate,
                    pending: Pending::Factored { h: cache.h, target, grad: ev.grad },
                })
            }
            OutputHead::Hsm(head) => {
                let st = head.eval(h, target)?;
                Ok(HeadStep { value: st.value, input_grad: st.input_grad, degenerate: false, pending: Pending::Hsm(st.grad) })
            }
        }
    }

    /// Applies the update held by `step` with learning rate `eta`.
    ///
    /// A factored update that would make `U` singular refactorizes the layer
    /// and reports [`Error::SingularUpdate`]; the weights are left unchanged.
    pub fn apply(&mut self, step: &HeadStep, eta: f64) -> Result<()> {
        match (self, &step.pending) {
            (OutputHead::Dense(head), Pending::Dense { h, grad }) => head.apply(h, grad, eta),
            (OutputHead::Factored(layer), Pending::Factored { h, target, grad }) => {
                match layer.apply_update(h, *target, grad, eta) {
                    Err(e @ Error::SingularUpdate { .. }) => {
                        layer.refactorize();
                        Err(e)
                    }
                    r => r,
                }
            }
            (OutputHead::Hsm(head), Pending::Hsm(g)) => head.apply(g, eta),
            _ => Err(Error::StaleCache("head step was prepared by a different head kind")),
        }
    }

    /// Ranking scores for every class: raw outputs for dense and factored
    /// heads, log-probabilities for the hierarchical softmax.
    pub fn scores(&self, h: &[f64]) -> Result<Vec<f64>> {
        match self {
            OutputHead::Dense(head) => head.scores(h),
            OutputHead::Factored(layer) => layer.full_scores(h),
            OutputHead::Hsm(head) => head.log_probs(h),
        }
    }

    /// Brings a factored head into canonical form; no-op for the others.
    pub fn refactorize(&mut self) {
        if let OutputHead::Factored(layer) = self {
            layer.refactorize();
        }
    }
}
