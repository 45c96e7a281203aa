use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::linalg::Matrix;
use crate::losses::Loss;

/// Plain `o = W h` output layer; O(D d) per example.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseHead {
    w: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseStep {
    pub value: f64,
    /// `dL/do`
    pub grad: Vec<f64>,
    /// `W^T dL/do`, taken before any update.
    pub input_grad: Vec<f64>,
    pub degenerate: bool,
}

impl DenseHead {
    /// Same initialization as [`FactoredLayer::new`](crate::factored::FactoredLayer::new)
    /// for equal arguments.
    pub fn new(n_classes: usize, dim: usize, init_scale: f64, seed: u64) -> Result<Self> {
        if !(init_scale > 0.0 && init_scale.is_finite()) {
            return Err(Error::Parameter(format!("init_scale must be > 0, got {init_scale}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_weights(Matrix::uniform(&mut rng, n_classes, dim, init_scale))
    }

    pub fn from_weights(w: Matrix) -> Result<Self> {
        if w.rows() < 2 || w.cols() < 1 {
            return Err(dim_err(format!("dense head needs D >= 2 and d >= 1, got {}x{}", w.rows(), w.cols())));
        }
        Ok(DenseHead { w })
    }

    pub fn weights(&self) -> &Matrix {
        &self.w
    }

    pub fn n_classes(&self) -> usize {
        self.w.rows()
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }

    pub fn scores(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.dim() {
            return Err(dim_err(format!("hidden vector has length {}, head expects {}", h.len(), self.dim())));
        }
        Ok(self.w.matvec(h))
    }

    /// Loss and gradients at the current weights; no update.
    pub fn eval(&self, h: &[f64], target: usize, loss: &Loss) -> Result<DenseStep> {
        let o = self.scores(h)?;
        let ev = loss.dense_eval(&o, target)?;
        let input_grad = self.w.matvec_t(&ev.grad);
        Ok(DenseStep { value: ev.value, grad: ev.grad, input_grad, degenerate: ev.degenerate })
    }

    /// `W <- W - eta g h^T`
    pub fn apply(&mut self, h: &[f64], grad: &[f64], eta: f64) -> Result<()> {
        if h.len() != self.dim() || grad.len() != self.n_classes() {
            return Err(dim_err("dense update shape mismatch"));
        }
        if eta != 0.0 {
            self.w.rank1_update(-eta, grad, h);
        }
        Ok(())
    }

    /// One SGD step; returns the loss value and `dL/dh` before the update.
    pub fn step(&mut self, h: &[f64], target: usize, loss: &Loss, eta: f64) -> Result<(f64, Vec<f64>)> {
        let st = self.eval(h, target, loss)?;
        self.apply(h, &st.grad, eta)?;
        Ok((st.value, st.input_grad))
    }
}
