//! Feed-forward n-gram language model: concatenated context embeddings, a
//! stack of fully connected layers and an output head.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factored::FactoredConfig;
use crate::heads::{HeadKind, HeadSpec, OutputHead};
use crate::linalg::{axpy, Matrix};
use crate::losses::Loss;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            _ => Err(Error::Config(format!("unknown activation `{s}` (expected tanh or relu)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub emb_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub activation: Activation,
    pub head: HeadKind,
    pub loss: Loss,
    pub seed: u64,
    pub init_scale: f64,
    /// Appends a constant 1 to the last hidden layer, giving the head a bias.
    pub output_bias: bool,
    /// Hierarchical softmax cluster count; `ceil(sqrt(D))` when absent.
    pub n_clusters: Option<usize>,
    pub factored: FactoredConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!("vocabulary size must be >= 2, got {}", self.vocab_size)));
        }
        if self.context_len < 1 || self.emb_dim < 1 {
            return Err(Error::Config("context length and embedding size must be >= 1".into()));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config(format!("init_scale must be > 0, got {}", self.init_scale)));
        }
        self.head.check_loss(&self.loss)
    }

    /// Width of the last hidden layer, before the optional bias feature.
    pub fn hidden_dim(&self) -> usize {
        self.hidden_sizes.last().copied().unwrap_or(self.context_len * self.emb_dim)
    }

    /// Input width of the output head.
    pub fn head_dim(&self) -> usize {
        self.hidden_dim() + usize::from(self.output_bias)
    }

    pub(crate) fn head_seed(&self) -> u64 {
        self.seed ^ 0x6865_6164_0000_0000
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// Activations of one forward pass through the embedding and hidden layers.
#[derive(Clone, Debug)]
pub struct HiddenCache {
    pub context: Vec<u32>,
    /// `xs[0]` is the embedding concatenation, `xs[l + 1]` the output of layer `l`.
    xs: Vec<Vec<f64>>,
    /// Input of the output head.
    pub h: Vec<f64>,
    version: u64,
}

/// Gradient sums over a minibatch; embedding rows are kept sparse.
#[derive(Clone, Debug)]
pub struct HiddenGrads {
    layers: Vec<Layer>,
    emb: BTreeMap<u32, Vec<f64>>,
}

impl HiddenGrads {
    pub fn layer(&self, l: usize) -> &Layer {
        &self.layers[l]
    }

    pub fn embedding_row(&self, id: u32) -> Option<&[f64]> {
        self.emb.get(&id).map(Vec::as_slice)
    }

    pub fn touched_rows(&self) -> impl Iterator<Item = u32> + '_ {
        self.emb.keys().copied()
    }

    pub fn clear(&mut self) {
        for l in &mut self.layers {
            l.w.as_mut_slice().fill(0.0);
            l.b.fill(0.0);
        }
        self.emb.clear();
    }
}

#[derive(Clone, Debug)]
pub struct NgramModel {
    config: ModelConfig,
    embeddings: Matrix,
    layers: Vec<Layer>,
    head: OutputHead,
    version: u64,
}

impl NgramModel {
    /// `freqs` feeds the hierarchical softmax clustering.
    pub fn new(config: ModelConfig, freqs: Option<&[u64]>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let embeddings = Matrix::uniform(&mut rng, config.vocab_size, config.emb_dim, config.init_scale);
        let mut layers = Vec::with_capacity(config.hidden_sizes.len());
        let mut fan_in = config.context_len * config.emb_dim;
        for &out in &config.hidden_sizes {
            let scale = config.init_scale / (fan_in as f64).sqrt();
            let w = Matrix::uniform(&mut rng, out, fan_in, scale);
            layers.push(Layer { w, b: vec![0.0; out] });
            fan_in = out;
        }
        let head_dim = config.head_dim();
        let head = OutputHead::build(&HeadSpec {
            kind: config.head,
            n_classes: config.vocab_size,
            dim: head_dim,
            init_scale: config.init_scale / (head_dim as f64).sqrt(),
            seed: config.head_seed(),
            freqs,
            n_clusters: config.n_clusters,
            factored: config.factored,
        })?;
        Ok(NgramModel { config, embeddings, layers, head, version: 0 })
    }

    /// Reassembles a model from stored parameters.
    pub fn from_parts(config: ModelConfig, embeddings: Matrix, layers: Vec<Layer>, head: OutputHead) -> Result<Self> {
        config.validate()?;
        if embeddings.rows() != config.vocab_size || embeddings.cols() != config.emb_dim {
            return Err(Error::Data("embedding matrix does not match the configuration".into()));
        }
        if layers.len() != config.hidden_sizes.len() {
            return Err(Error::Data("layer count does not match the configuration".into()));
        }
        let mut fan_in = config.context_len * config.emb_dim;
        for (l, &out) in layers.iter().zip(&config.hidden_sizes) {
            if l.w.rows() != out || l.w.cols() != fan_in || l.b.len() != out {
                return Err(Error::Data("hidden layer shape does not match the configuration".into()));
            }
            fan_in = out;
        }
        if head.kind() != config.head || head.n_classes() != config.vocab_size || head.dim() != config.head_dim() {
            return Err(Error::Data("output head does not match the configuration".into()));
        }
        Ok(NgramModel { config, embeddings, layers, head, version: 0 })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn head(&self) -> &OutputHead {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut OutputHead {
        &mut self.head
    }

    pub fn loss(&self) -> &Loss {
        &self.config.loss
    }

    pub fn forward_hidden(&self, context: &[u32]) -> Result<HiddenCache> {
        if context.len() != self.config.context_len {
            return Err(Error::Data(format!(
                "context has {} ids, model expects {}",
                context.len(),
                self.config.context_len
            )));
        }
        let mut x = Vec::with_capacity(self.config.context_len * self.config.emb_dim);
        for &id in context {
            if id as usize >= self.config.vocab_size {
                return Err(Error::Data(format!("id {id} out of range for vocabulary of size {}", self.config.vocab_size)));
            }
            x.extend_from_slice(self.embeddings.row(id as usize));
        }
        let mut xs = Vec::with_capacity(self.layers.len() + 1);
        xs.push(x);
        for layer in &self.layers {
            let mut a = layer.w.matvec(xs.last().expect("non-empty"));
            for (v, b) in a.iter_mut().zip(&layer.b) {
                *v = self.config.activation.apply(*v + b);
            }
            xs.push(a);
        }
        let mut h = xs.last().expect("non-empty").clone();
        if self.config.output_bias {
            h.push(1.0);
        }
        Ok(HiddenCache { context: context.to_vec(), xs, h, version: self.version })
    }

    pub fn zero_grads(&self) -> HiddenGrads {
        HiddenGrads {
            layers: self
                .layers
                .iter()
                .map(|l| Layer { w: Matrix::zeros(l.w.rows(), l.w.cols()), b: vec![0.0; l.b.len()] })
                .collect(),
            emb: BTreeMap::new(),
        }
    }

    /// Adds the gradient of one example, given `dL/dh`, to `grads`.
    pub fn accumulate(&self, cache: &HiddenCache, g_h: &[f64], grads: &mut HiddenGrads) -> Result<()> {
        if cache.version != self.version {
            return Err(Error::StaleCache("model was updated after the forward pass"));
        }
        if g_h.len() != cache.h.len() {
            return Err(Error::Data(format!("gradient has length {}, hidden output {}", g_h.len(), cache.h.len())));
        }
        let mut g = g_h[..self.config.hidden_dim()].to_vec();
        for l in (0..self.layers.len()).rev() {
            let y = &cache.xs[l + 1];
            for (gi, yi) in g.iter_mut().zip(y) {
                *gi *= self.config.activation.derivative_from_output(*yi);
            }
            let gl = &mut grads.layers[l];
            gl.w.rank1_update(1.0, &g, &cache.xs[l]);
            axpy(1.0, &g, &mut gl.b);
            g = self.layers[l].w.matvec_t(&g);
        }
        let e = self.config.emb_dim;
        for (i, &id) in cache.context.iter().enumerate() {
            let row = grads.emb.entry(id).or_insert_with(|| vec![0.0; e]);
            axpy(1.0, &g[i * e..(i + 1) * e], row);
        }
        Ok(())
    }

    /// `theta <- theta - eta * grads`; only accumulated embedding rows move.
    pub fn apply_grads(&mut self, grads: &HiddenGrads, eta: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            axpy(-eta, g.w.as_slice(), layer.w.as_mut_slice());
            axpy(-eta, &g.b, &mut layer.b);
        }
        for (&id, g) in &grads.emb {
            axpy(-eta, g, self.embeddings.row_mut(id as usize));
        }
        self.version += 1;
    }

    /// Single-example SGD step of the embedding and hidden layers.
    pub fn backward_step(&mut self, cache: &HiddenCache, g_h: &[f64], eta: f64) -> Result<()> {
        let mut grads = self.zero_grads();
        self.accumulate(cache, g_h, &mut grads)?;
        self.apply_grads(&grads, eta);
        Ok(())
    }

    /// Ranking scores of every class for one context.
    pub fn scores(&self, context: &[u32]) -> Result<Vec<f64>> {
        let cache = self.forward_hidden(context)?;
        self.head.scores(&cache.h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::gradcheck::relative_error;
    use crate::losses::LossKind;

    fn config(head: HeadKind, loss: Loss) -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            context_len: 3,
            emb_dim: 4,
            hidden_sizes: vec![6, 5],
            activation: Activation::Tanh,
            head,
            loss,
            seed: 7,
            init_scale: 0.8,
            output_bias: false,
            n_clusters: None,
            factored: FactoredConfig::default(),
        }
    }

    fn logsoftmax() -> Loss {
        Loss::plain(LossKind::LogSoftmax).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_h() {
        let mut m = NgramModel::new(config(HeadKind::Dense, logsoftmax()), None).unwrap();
        for l in &mut m.layers {
            l.w.as_mut_slice().fill(0.0);
        }
        let c = m.forward_hidden(&[1, 2, 3]).unwrap();
        assert!(c.h.iter().all(|&v| v == 0.0));
        assert_eq!(c.h.len(), 5);
    }

    #[test]
    fn deterministic_and_shaped() {
        let a = NgramModel::new(config(HeadKind::Dense, logsoftmax()), None).unwrap();
        let b = NgramModel::new(config(HeadKind::Dense, logsoftmax()), None).unwrap();
        assert_eq!(a.forward_hidden(&[0, 4, 9]).unwrap().h, b.forward_hidden(&[0, 4, 9]).unwrap().h);
        let mut cfg = config(HeadKind::Dense, logsoftmax());
        cfg.output_bias = true;
        let m = NgramModel::new(cfg, None).unwrap();
        let h = m.forward_hidden(&[0, 4, 9]).unwrap().h;
        assert_eq!((h.len(), h[5]), (6, 1.0));
        assert!(matches!(a.forward_hidden(&[0, 4, 11]), Err(Error::Data(_))));
    }

    #[test]
    fn factored_with_logsoftmax_is_rejected() {
        let err = NgramModel::new(config(HeadKind::Factored, logsoftmax()), None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn sparse_embedding_update() {
        let mut m = NgramModel::new(config(HeadKind::Dense, logsoftmax()), None).unwrap();
        let before = m.embeddings().clone();
        let cache = m.forward_hidden(&[2, 5, 2]).unwrap();
        let st = m.head().prepare(&cache.h, 1, &logsoftmax()).unwrap();
        m.backward_step(&cache, &st.input_grad, 0.5).unwrap();
        for r in 0..11 {
            assert_eq!(m.embeddings().row(r) == before.row(r), r != 2 && r != 5, "row {r}");
        }
        assert!(matches!(m.backward_step(&cache, &st.input_grad, 0.5), Err(Error::StaleCache(_))));
    }

    #[test]
    fn zero_gradient_leaves_hidden_weights() {
        let mut m = NgramModel::new(config(HeadKind::Dense, logsoftmax()), None).unwrap();
        let before = m.layers().to_vec();
        let cache = m.forward_hidden(&[1, 1, 1]).unwrap();
        m.backward_step(&cache, &[0.0; 5], 0.3).unwrap();
        assert_eq!(m.layers(), &before[..]);
    }

    fn loss_at(m: &NgramModel, ctx: &[u32], c: usize) -> f64 {
        let cache = m.forward_hidden(ctx).unwrap();
        m.head().prepare(&cache.h, c, m.loss()).unwrap().value
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        for act in [Activation::Tanh, Activation::Relu] {
            for (head, loss) in [(HeadKind::Dense, logsoftmax()), (HeadKind::Factored, Loss::zloss(1.0, 2.0).unwrap())] {
                let mut cfg = config(head, loss);
                cfg.activation = act;
                cfg.output_bias = true;
                let m = NgramModel::new(cfg, None).unwrap();
                let ctx = [3, 8, 3];
                let c = 6;
                let cache = m.forward_hidden(&ctx).unwrap();
                let st = m.head().prepare(&cache.h, c, m.loss()).unwrap();
                let mut grads = m.zero_grads();
                m.accumulate(&cache, &st.input_grad, &mut grads).unwrap();
                let eps = 1e-6;
                let mut checks: Vec<(f64, f64)> = Vec::new();
                for j in 0..4 {
                    let mut p = m.clone();
                    let v = p.embeddings.get(3, j);
                    p.embeddings.set(3, j, v + eps);
                    let up = loss_at(&p, &ctx, c);
                    p.embeddings.set(3, j, v - eps);
                    let down = loss_at(&p, &ctx, c);
                    checks.push((grads.embedding_row(3).unwrap()[j], (up - down) / (2.0 * eps)));
                }
                for (l, i, k) in [(0, 2, 7), (1, 4, 0), (1, 0, 5)] {
                    let mut p = m.clone();
                    let v = p.layers[l].w.get(i, k);
                    p.layers[l].w.set(i, k, v + eps);
                    let up = loss_at(&p, &ctx, c);
                    p.layers[l].w.set(i, k, v - eps);
                    let down = loss_at(&p, &ctx, c);
                    checks.push((grads.layer(l).w.get(i, k), (up - down) / (2.0 * eps)));
                }
                for (a, n) in checks {
                    // Relu kinks and tiny components are compared absolutely.
                    let ok = relative_error(a, n) <= 1e-5 || (a - n).abs() <= 1e-9;
                    assert!(ok, "{act} {head}: analytic {a} vs numeric {n}");
                }
            }
        }
    }
}
