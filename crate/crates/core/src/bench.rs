//! Per-example training cost of each head as the class count grows.
//!
//! The output-only timing feeds synthetic Gaussian hidden vectors and
//! uniform targets straight into a head. The total timing trains a small
//! n-gram model on random contexts, so it also includes the embedding and
//! hidden layers.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::corpus::NgramDataset;
use crate::error::{Error, Result};
use crate::factored::FactoredConfig;
use crate::heads::{HeadKind, HeadSpec, HeadStep, OutputHead};
use crate::losses::{Loss, LossKind};
use crate::model::{Activation, ModelConfig, NgramModel};
use crate::train::train_batch;

pub const CSV_COLUMNS: [&str; 9] = [
    "head",
    "loss",
    "D",
    "d",
    "batch",
    "steps",
    "sec_per_1k_examples_output_only",
    "sec_per_1k_examples_total",
    "extrapolated_epoch_seconds",
];

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub heads: Vec<HeadKind>,
    /// Loss of the dense and factored heads; the hierarchical softmax always
    /// uses its own log-softmax.
    pub loss: Loss,
    pub d_list: Vec<usize>,
    pub d: usize,
    pub batch: usize,
    /// Minibatches per timing run.
    pub steps: usize,
    /// Timing runs per cell; the median is reported.
    pub repeats: usize,
    pub seed: u64,
    pub eta: f64,
    /// Training examples per epoch used for extrapolation.
    pub epoch_examples: f64,
    /// Skip the whole-model timing.
    pub output_only: bool,
    pub context_len: usize,
    pub emb_dim: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            heads: HeadKind::ALL.to_vec(),
            loss: Loss::zloss(0.1, 10.0).expect("valid parameters"),
            d_list: vec![20_000, 200_000],
            d: 512,
            batch: 250,
            steps: 2000,
            repeats: 3,
            seed: 0,
            eta: 0.01,
            epoch_examples: 150e6,
            output_only: false,
            context_len: 6,
            emb_dim: 32,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() || self.d_list.is_empty() {
            return Err(Error::Config("bench needs at least one head and one D".into()));
        }
        if self.d_list.iter().any(|&n| n < 2) || self.d < 1 || self.batch < 1 || self.steps < 1 || self.repeats < 1 {
            return Err(Error::Config("bench sizes must be positive (D >= 2)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub head: HeadKind,
    pub loss: LossKind,
    #[serde(rename = "D")]
    pub n_classes: usize,
    pub d: usize,
    pub batch: usize,
    pub steps: usize,
    pub sec_per_1k_examples_output_only: f64,
    pub sec_per_1k_examples_total: Option<f64>,
    pub extrapolated_epoch_seconds: Option<f64>,
}

/// The loss a head is timed with.
pub fn head_loss(kind: HeadKind, loss: &Loss) -> Loss {
    match kind {
        HeadKind::Hsm => Loss::plain(LossKind::LogSoftmax).expect("no parameters needed"),
        _ => *loss,
    }
}

/// Refactorizing every `max(512, D)` steps keeps its amortized cost O(d^2).
pub fn bench_factored_config(n_classes: usize) -> FactoredConfig {
    FactoredConfig { refactor_period: n_classes.max(512), ..FactoredConfig::default() }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median seconds per example of head-only training.
#[allow(clippy::too_many_arguments)]
pub fn time_output_layer(
    kind: HeadKind,
    loss: &Loss,
    n_classes: usize,
    d: usize,
    batch: usize,
    steps: usize,
    repeats: usize,
    eta: f64,
    seed: u64,
) -> Result<f64> {
    let loss = head_loss(kind, loss);
    kind.check_loss(&loss)?;
    let mut head = OutputHead::build(&HeadSpec {
        kind,
        n_classes,
        dim: d,
        init_scale: 1.0 / (d as f64).sqrt(),
        seed,
        freqs: None,
        n_clusters: None,
        factored: bench_factored_config(n_classes),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbe7c);
    // A fixed pool keeps random number generation out of the timed loop.
    let pool = batch.clamp(1, 1024);
    let hs: Vec<Vec<f64>> = (0..pool)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt()).collect())
        .collect();
    let targets: Vec<usize> = (0..batch * steps).map(|_| rng.random_range(0..n_classes)).collect();
    let step_eta = eta / batch as f64;

    let run = |head: &mut OutputHead| -> Result<f64> {
        let t0 = Instant::now();
        let mut pending: Vec<HeadStep> = Vec::with_capacity(batch);
        for s in 0..steps {
            pending.clear();
            for i in 0..batch {
                let idx = s * batch + i;
                pending.push(head.prepare(&hs[idx % pool], targets[idx], &loss)?);
            }
            for st in &pending {
                head.apply(st, step_eta)?;
            }
        }
        Ok(t0.elapsed().as_secs_f64() / (batch * steps) as f64)
    };
    // One untimed warm-up run.
    run(&mut head)?;
    let times = (0..repeats).map(|_| run(&mut head)).collect::<Result<Vec<_>>>()?;
    Ok(median(times))
}

/// Median seconds per example of whole-model training.
pub fn time_total(kind: HeadKind, cfg: &BenchConfig, n_classes: usize) -> Result<f64> {
    let loss = head_loss(kind, &cfg.loss);
    let model_cfg = ModelConfig {
        vocab_size: n_classes,
        context_len: cfg.context_len,
        emb_dim: cfg.emb_dim,
        hidden_sizes: vec![cfg.d],
        activation: Activation::Tanh,
        head: kind,
        loss,
        seed: cfg.seed,
        init_scale: 1.0,
        output_bias: false,
        n_clusters: None,
        factored: bench_factored_config(n_classes),
    };
    let mut model = NgramModel::new(model_cfg, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0070_74a1);
    let n = cfg.batch * cfg.steps;
    let contexts: Vec<u32> = (0..n * cfg.context_len).map(|_| rng.random_range(0..n_classes as u32)).collect();
    let targets: Vec<u32> = (0..n).map(|_| rng.random_range(0..n_classes as u32)).collect();
    let data = NgramDataset::new(cfg.context_len, contexts, targets)?;
    let mut grads = model.zero_grads();
    let batches: Vec<Vec<usize>> = (0..cfg.steps).map(|s| (s * cfg.batch..(s + 1) * cfg.batch).collect()).collect();
    let mut run = |model: &mut NgramModel| -> Result<f64> {
        let t0 = Instant::now();
        for b in &batches {
            train_batch(model, &data, b, cfg.eta, &mut grads)?;
        }
        Ok(t0.elapsed().as_secs_f64() / n as f64)
    };
    run(&mut model)?;
    let times = (0..cfg.repeats).map(|_| run(&mut model)).collect::<Result<Vec<_>>>()?;
    Ok(median(times))
}

pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &kind in &cfg.heads {
        let loss = head_loss(kind, &cfg.loss);
        kind.check_loss(&loss)?;
        for &n in &cfg.d_list {
            let out = time_output_layer(kind, &cfg.loss, n, cfg.d, cfg.batch, cfg.steps, cfg.repeats, cfg.eta, cfg.seed)?;
            let total = if cfg.output_only { None } else { Some(time_total(kind, cfg, n)?) };
            rows.push(BenchRow {
                head: kind,
                loss: loss.kind,
                n_classes: n,
                d: cfg.d,
                batch: cfg.batch,
                steps: cfg.steps,
                sec_per_1k_examples_output_only: out * 1000.0,
                sec_per_1k_examples_total: total.map(|t| t * 1000.0),
                extrapolated_epoch_seconds: Some(total.unwrap_or(out) * cfg.epoch_examples),
            });
        }
    }
    Ok(rows)
}

pub fn write_csv<W: Write>(rows: &[BenchRow], mut w: W) -> Result<()> {
    writeln!(w, "{}", CSV_COLUMNS.join(","))?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6e}")).unwrap_or_default();
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{:.6e},{},{}",
            r.head,
            r.loss,
            r.n_classes,
            r.d,
            r.batch,
            r.steps,
            r.sec_per_1k_examples_output_only,
            opt(r.sec_per_1k_examples_total),
            opt(r.extrapolated_epoch_seconds),
        )?;
    }
    w.flush()?;
    Ok(())
}
