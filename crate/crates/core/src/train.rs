//! Minibatch SGD training with plateau learning-rate decay, and evaluation.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{batch_stream, NgramDataset};
use crate::error::{Error, Result};
use crate::heads::HeadStep;
use crate::metrics::{rank_of_target, MetricsReport, RankAccumulator};
use crate::model::{HiddenGrads, NgramModel};

/// Caps the number of evaluation threads.
pub const EVAL_WORKERS_ENV: &str = "ZLOSS_NUM_EVAL_WORKERS";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlateauMetric {
    #[default]
    Top1,
    Top5,
    Mrr,
}

impl PlateauMetric {
    fn k(self) -> Option<usize> {
        match self {
            PlateauMetric::Top1 => Some(1),
            PlateauMetric::Top5 => Some(5),
            PlateauMetric::Mrr => None,
        }
    }

    fn higher_is_better(self) -> bool {
        self == PlateauMetric::Mrr
    }

    pub fn read(self, report: &MetricsReport) -> f64 {
        match self.k() {
            Some(k) => report.top(k).unwrap_or(f64::NAN),
            None => report.mrr,
        }
    }
}

impl fmt::Display for PlateauMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlateauMetric::Top1 => "top1",
            PlateauMetric::Top5 => "top5",
            PlateauMetric::Mrr => "mrr",
        })
    }
}

impl FromStr for PlateauMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top1" => Ok(PlateauMetric::Top1),
            "top5" => Ok(PlateauMetric::Top5),
            "mrr" => Ok(PlateauMetric::Mrr),
            _ => Err(Error::Config(format!("unknown plateau metric `{s}` (expected top1, top5 or mrr)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta0: f64,
    pub batch_size: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub max_epochs: usize,
    /// Evaluate after this many training examples; `0` means once per epoch.
    pub eval_every: usize,
    pub metric_for_plateau: PlateauMetric,
    pub k_set: Vec<usize>,
    /// Shuffles each epoch with `seed + epoch`; `None` keeps corpus order.
    pub shuffle_seed: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta0: 0.1,
            batch_size: 250,
            plateau_patience: 2,
            plateau_factor: 0.5,
            max_epochs: 10,
            eval_every: 0,
            metric_for_plateau: PlateauMetric::Top1,
            k_set: vec![1, 5, 10, 20, 50, 100],
            shuffle_seed: Some(0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(Error::Config(format!("eta0 must be > 0, got {}", self.eta0)));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!("plateau factor must be in (0, 1), got {}", self.plateau_factor)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.plateau_patience < 1 {
            return Err(Error::Config("plateau patience must be >= 1".into()));
        }
        if self.k_set.is_empty() || self.k_set.contains(&0) {
            return Err(Error::Config("k set must contain positive values".into()));
        }
        Ok(())
    }

    /// The k set plus whatever the plateau metric needs, sorted.
    pub fn eval_k_set(&self) -> Vec<usize> {
        let mut ks = self.k_set.clone();
        ks.extend(self.metric_for_plateau.k());
        ks.sort_unstable();
        ks.dedup();
        ks
    }
}

/// Multiplies the learning rate by `factor` after `patience` consecutive
/// evaluations without improvement. The first evaluation sets the baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    eta: f64,
    factor: f64,
    patience: usize,
    higher_is_better: bool,
    best: Option<f64>,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(eta0: f64, factor: f64, patience: usize, metric: PlateauMetric) -> Self {
        PlateauSchedule {
            eta: eta0,
            factor,
            patience,
            higher_is_better: metric.higher_is_better(),
            best: None,
            stale: 0,
        }
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Records an evaluation and returns the learning rate to use next.
    pub fn observe(&mut self, value: f64) -> f64 {
        let improved = match self.best {
            None => true,
            Some(b) if self.higher_is_better => value > b,
            Some(b) => value < b,
        };
        if improved {
            self.best = Some(value);
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.eta *= self.factor;
                self.stale = 0;
            }
        }
        self.eta
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub examples_seen: u64,
    pub epoch: usize,
    pub wall_seconds: f64,
    /// Learning rate used for the examples before this evaluation.
    pub eta: f64,
    /// Mean training loss since the previous evaluation.
    pub train_loss: Option<f64>,
    /// Examples skipped since the start because the Z-normalization was degenerate.
    pub skipped_degenerate: u64,
    pub valid: MetricsReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EvalRecord>,
    pub skipped_degenerate: u64,
    pub final_eta: f64,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn last(&self) -> Option<&EvalRecord> {
        self.records.last()
    }
}

/// Trains `model` in place, evaluating on `valid` on schedule and after the
/// last epoch; `on_eval` sees each record as it is produced.
pub fn train(
    model: &mut NgramModel,
    train_data: &NgramDataset,
    valid: &NgramDataset,
    cfg: &TrainConfig,
    mut on_eval: impl FnMut(&EvalRecord) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    let n_classes = model.config().vocab_size;
    train_data.check_ids(n_classes)?;
    valid.check_ids(n_classes)?;
    let k_set = cfg.eval_k_set();
    check_k_set(&k_set, n_classes)?;
    for ds in [train_data, valid] {
        if ds.context_len() != model.config().context_len {
            return Err(Error::Data(format!(
                "dataset context length {} does not match the model's {}",
                ds.context_len(),
                model.config().context_len
            )));
        }
    }

    let mut progress = Progress {
        start: Instant::now(),
        schedule: PlateauSchedule::new(cfg.eta0, cfg.plateau_factor, cfg.plateau_patience, cfg.metric_for_plateau),
        metric: cfg.metric_for_plateau,
        loss_sum: 0.0,
        loss_n: 0,
        skipped: 0,
        seen: 0,
    };
    let mut log = TrainLog::default();
    let mut next_eval = cfg.eval_every as u64;
    let mut grads = model.zero_grads();

    for epoch in 0..cfg.max_epochs {
        let seed = cfg.shuffle_seed.map(|s| s.wrapping_add(epoch as u64));
        for batch in batch_stream(train_data.len(), cfg.batch_size, seed)? {
            let out = train_batch(model, train_data, &batch, progress.schedule.eta(), &mut grads)?;
            progress.loss_sum += out.loss_sum;
            progress.loss_n += out.trained as u64;
            progress.skipped += out.skipped as u64;
            progress.seen += batch.len() as u64;

            if cfg.eval_every > 0 && progress.seen >= next_eval {
                while next_eval <= progress.seen {
                    next_eval += cfg.eval_every as u64;
                }
                let rec = progress.evaluate(model, valid, &k_set, epoch)?;
                on_eval(&rec)?;
                log.records.push(rec);
            }
        }
        let evaluated_here = log.last().is_some_and(|r| r.examples_seen == progress.seen);
        if (cfg.eval_every == 0 || epoch + 1 == cfg.max_epochs) && !evaluated_here {
            let rec = progress.evaluate(model, valid, &k_set, epoch)?;
            on_eval(&rec)?;
            log.records.push(rec);
        }
    }
    log.skipped_degenerate = progress.skipped;
    log.final_eta = progress.schedule.eta();
    Ok(log)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchOutcome {
    pub trained: usize,
    pub skipped: usize,
    pub loss_sum: f64,
}

/// One minibatch step.
///
/// Every example is run against the weights as they were before the batch.
/// The head then applies the per-example updates one after another with
/// step `eta / K`, and the hidden layers take one step along the batch mean
/// gradient. Examples whose Z-normalization is degenerate are skipped.
pub fn train_batch(
    model: &mut NgramModel,
    data: &NgramDataset,
    batch: &[usize],
    eta: f64,
    grads: &mut HiddenGrads,
) -> Result<BatchOutcome> {
    let step_eta = eta / batch.len().max(1) as f64;
    let loss = *model.loss();
    grads.clear();
    let mut out = BatchOutcome::default();
    let mut steps: Vec<HeadStep> = Vec::with_capacity(batch.len());
    for &i in batch {
        let cache = model.forward_hidden(data.context(i))?;
        let step = model.head().prepare(&cache.h, data.target(i), &loss)?;
        if step.degenerate {
            out.skipped += 1;
            continue;
        }
        if !step.value.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at example {i}; lower the learning rate")));
        }
        out.loss_sum += step.value;
        out.trained += 1;
        model.accumulate(&cache, &step.input_grad, grads)?;
        steps.push(step);
    }
    for step in &steps {
        model.head_mut().apply(step, step_eta)?;
    }
    model.apply_grads(grads, step_eta);
    Ok(out)
}

struct Progress {
    start: Instant,
    schedule: PlateauSchedule,
    metric: PlateauMetric,
    loss_sum: f64,
    loss_n: u64,
    skipped: u64,
    seen: u64,
}

impl Progress {
    fn evaluate(&mut self, model: &NgramModel, valid: &NgramDataset, k_set: &[usize], epoch: usize) -> Result<EvalRecord> {
        let report = evaluate(model, valid, k_set)?;
        let eta = self.schedule.eta();
        self.schedule.observe(self.metric.read(&report));
        let train_loss = (self.loss_n > 0).then(|| self.loss_sum / self.loss_n as f64);
        self.loss_sum = 0.0;
        self.loss_n = 0;
        Ok(EvalRecord {
            examples_seen: self.seen,
            epoch,
            wall_seconds: self.start.elapsed().as_secs_f64(),
            eta,
            train_loss,
            skipped_degenerate: self.skipped,
            valid: report,
        })
    }
}

/// Threads used by [`evaluate`]: the environment cap if set, otherwise the
/// machine's parallelism.
pub fn eval_workers() -> usize {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var(EVAL_WORKERS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(n) if n >= 1 => n,
        _ => available,
    }
}

pub fn check_k_set(k_set: &[usize], n_classes: usize) -> Result<()> {
    if k_set.is_empty() {
        return Err(Error::Config("k set is empty".into()));
    }
    if let Some(&k) = k_set.iter().find(|&&k| k == 0 || k >= n_classes) {
        return Err(Error::Config(format!("k = {k} must lie in [1, {}) for {n_classes} classes", n_classes)));
    }
    Ok(())
}

/// Ranks of the targets of `data`, in dataset order.
pub fn target_ranks(model: &NgramModel, data: &NgramDataset) -> Result<Vec<usize>> {
    let workers = eval_workers().min(data.len()).max(1);
    let chunk = data.len().div_ceil(workers);
    let rank_range = |lo: usize, hi: usize| -> Result<Vec<usize>> {
        (lo..hi)
            .map(|i| {
                let scores = model.scores(data.context(i))?;
                rank_of_target(&scores, data.target(i))
            })
            .collect()
    };
    if workers == 1 {
        return rank_range(0, data.len());
    }
    let parts: Vec<Result<Vec<usize>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let lo = (w * chunk).min(data.len());
                let hi = ((w + 1) * chunk).min(data.len());
                s.spawn(move || rank_range(lo, hi))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut ranks = Vec::with_capacity(data.len());
    for p in parts {
        ranks.extend(p?);
    }
    Ok(ranks)
}

/// Top-k error rates and MRR of `model` on `data`.
pub fn evaluate(model: &NgramModel, data: &NgramDataset, k_set: &[usize]) -> Result<MetricsReport> {
    check_k_set(k_set, model.config().vocab_size)?;
    data.check_ids(model.config().vocab_size)?;
    let mut acc = RankAccumulator::new(k_set);
    for r in target_ranks(model, data)? {
        acc.push(r)?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn never_improving_halves_every_patience_evals() {
        let mut s = PlateauSchedule::new(1.0, 0.5, 2, PlateauMetric::Top1);
        let etas: Vec<f64> = (0..7).map(|_| s.observe(0.9)).collect();
        assert_eq!(etas, vec![1.0, 1.0, 0.5, 0.5, 0.25, 0.25, 0.125]);
    }

    #[test]
    fn improvement_resets_the_counter() {
        let mut s = PlateauSchedule::new(1.0, 0.5, 2, PlateauMetric::Mrr);
        for v in [0.1, 0.1, 0.2, 0.2, 0.3] {
            s.observe(v);
        }
        assert_eq!(s.eta(), 1.0);
        s.observe(0.3);
        s.observe(0.29);
        assert_eq!(s.eta(), 0.5);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { eta0: 0.0, ..Default::default() },
            TrainConfig { plateau_factor: 1.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        let cfg = TrainConfig { k_set: vec![10, 1], metric_for_plateau: PlateauMetric::Top5, ..Default::default() };
        assert_eq!(cfg.eval_k_set(), vec![1, 5, 10]);
        assert!(check_k_set(&[1, 20], 20).is_err());
        assert!(check_k_set(&[1, 19], 20).is_ok());
    }
}
