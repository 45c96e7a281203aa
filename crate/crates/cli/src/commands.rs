use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use zloss_core::bench::{run_bench, write_csv, BenchConfig};
use zloss_core::checkpoint::{load_model, save_model};
use zloss_core::corpus::{build_vocab_from_path, encode_ngrams_from_path, NgramDataset, Vocab, VocabConfig};
use zloss_core::factored::FactoredConfig;
use zloss_core::heads::HeadKind;
use zloss_core::losses::gradcheck::{sweep, FdPrecision, SweepConfig};
use zloss_core::losses::{Loss, LossKind, ZLossParams};
use zloss_core::metrics::{constant_baseline, MetricsReport};
use zloss_core::model::{ModelConfig, NgramModel};
use zloss_core::train::{check_k_set, evaluate, train, TrainConfig};
use zloss_core::{Error, Result};

use crate::settings::Settings;
use crate::{BenchArgs, BuildVocabArgs, Command, Common, EvalArgs, GradcheckArgs, TrainArgs};

pub fn run(command: Command) -> Result<u8> {
    match command {
        Command::BuildVocab(a) => build_vocab(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Gradcheck(a) => gradcheck_cmd(&a),
        Command::Bench(a) => bench_cmd(&a),
    }
}

/// Defaults, then preset, then config file, then the given flags.
fn layered(common: &Common, flags: &[(&str, &Option<String>)]) -> Result<Settings> {
    let mut s = Settings::defaults();
    if let Some(p) = &common.preset {
        s.apply_preset(p)?;
    }
    if let Some(path) = &common.config {
        s.apply_file(Path::new(path))?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            s.set(key, v.clone())?;
        }
    }
    Ok(s)
}

fn loss_from(s: &Settings) -> Result<Loss> {
    let kind: LossKind = s.require::<String>("loss")?.parse()?;
    let params = if kind.needs_params() {
        Some(ZLossParams::new(s.require("a")?, s.require("b")?)?)
    } else {
        None
    };
    Loss::new(kind, params)
}

fn vocab_config(s: &Settings) -> Result<VocabConfig> {
    Ok(VocabConfig { max_size: s.get("max_vocab")?, min_count: s.require("min_count")?, ..VocabConfig::default() })
}

fn is_cache(path: &Path) -> Result<bool> {
    let mut magic = [0u8; 4];
    let mut f = File::open(path)?;
    Ok(f.read(&mut magic)? == 4 && &magic == b"ZLNG")
}

/// A text corpus, or a binary n-gram cache written by `build-vocab`.
fn load_dataset(path: &Path, vocab: &Vocab, context: usize) -> Result<NgramDataset> {
    let ds = if is_cache(path)? {
        let ds = NgramDataset::load_cache(path)?;
        if ds.context_len() != context {
            return Err(Error::Data(format!(
                "cache {} has context {}, expected {context}",
                path.display(),
                ds.context_len()
            )));
        }
        ds
    } else {
        encode_ngrams_from_path(path, vocab, context + 1)?
    };
    ds.check_ids(vocab.len())?;
    Ok(ds)
}

fn write_json_line<W: Write>(mut w: W, report: &MetricsReport) -> Result<()> {
    serde_json::to_writer(&mut w, report)?;
    writeln!(w)?;
    Ok(())
}

fn build_vocab(a: &BuildVocabArgs) -> Result<u8> {
    let s = layered(
        &a.common,
        &[("train", &a.train), ("out", &a.out), ("max_vocab", &a.max_vocab), ("min_count", &a.min_count), ("context", &a.context)],
    )?;
    let out: PathBuf = s.require::<String>("out")?.into();
    let train_path = s.require_input("train")?;
    let vocab = build_vocab_from_path(&train_path, &vocab_config(&s)?)?;
    vocab.save(&out)?;
    eprintln!("wrote {} words to {}", vocab.len(), out.display());
    if let Some(cache) = &a.cache_out {
        let context: usize = s.require("context")?;
        let ds = encode_ngrams_from_path(&train_path, &vocab, context + 1)?;
        ds.save_cache(Path::new(cache))?;
        eprintln!("wrote {} examples to {cache}", ds.len());
    }
    Ok(0)
}

fn model_config(s: &Settings, vocab_size: usize) -> Result<ModelConfig> {
    let cfg = ModelConfig {
        vocab_size,
        context_len: s.require("context")?,
        emb_dim: s.require("emb_dim")?,
        hidden_sizes: s.list("hidden")?,
        activation: s.require::<String>("activation")?.parse()?,
        head: s.require::<String>("head")?.parse()?,
        loss: loss_from(s)?,
        seed: s.require("seed")?,
        init_scale: s.require("init_scale")?,
        output_bias: s.flag("bias")?,
        n_clusters: s.get("clusters")?,
        factored: FactoredConfig { refactor_period: s.require("refactor_period")?, cond_limit: s.require("cond_limit")? },
    };
    Ok(cfg)
}

fn train_config(s: &Settings) -> Result<TrainConfig> {
    let seed: u64 = s.require("seed")?;
    let mut k_set: Vec<usize> = s.list("kset")?;
    k_set.sort_unstable();
    k_set.dedup();
    let cfg = TrainConfig {
        eta0: s.require("eta")?,
        batch_size: s.require("batch")?,
        plateau_patience: s.require("patience")?,
        plateau_factor: s.require("factor")?,
        max_epochs: s.require("epochs")?,
        eval_every: s.require("eval_every")?,
        metric_for_plateau: s.require::<String>("plateau_metric")?.parse()?,
        k_set,
        shuffle_seed: s.flag("shuffle")?.then_some(seed),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: &TrainArgs) -> Result<u8> {
    let m = &a.model;
    let bias = m.bias.then(|| "true".to_string());
    let s = layered(
        &a.common,
        &[
            ("loss", &m.loss),
            ("head", &m.head),
            ("a", &m.a),
            ("b", &m.b),
            ("context", &m.context),
            ("emb_dim", &m.emb_dim),
            ("hidden", &m.hidden),
            ("activation", &m.activation),
            ("init_scale", &m.init_scale),
            ("bias", &bias),
            ("clusters", &m.clusters),
            ("refactor_period", &m.refactor_period),
            ("cond_limit", &m.cond_limit),
            ("seed", &m.seed),
            ("train", &a.train),
            ("valid", &a.valid),
            ("test", &a.test),
            ("vocab", &a.vocab),
            ("out", &a.out),
            ("batch", &a.batch),
            ("eta", &a.eta),
            ("epochs", &a.epochs),
            ("kset", &a.kset),
            ("patience", &a.patience),
            ("factor", &a.factor),
            ("plateau_metric", &a.plateau_metric),
            ("eval_every", &a.eval_every),
            ("shuffle", &a.shuffle),
            ("max_vocab", &a.max_vocab),
            ("min_count", &a.min_count),
        ],
    )?;
    let Some(spec) = &a.sweep else {
        let out: PathBuf = s.require::<String>("out")?.into();
        train_run(&s, &out)?;
        return Ok(0);
    };
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("sweep must look like key=v1,v2; got `{spec}`")))?;
    let key = key.trim().replace('-', "_");
    if matches!(key.as_str(), "out" | "train" | "valid" | "test" | "vocab") {
        return Err(Error::Config(format!("cannot sweep over `{key}`")));
    }
    let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(Error::Config("sweep has no values".into()));
    }
    let root: PathBuf = s.require::<String>("out")?.into();
    // Validate every point before spending time on any of them.
    let mut runs = Vec::with_capacity(values.len());
    for v in &values {
        let mut point = s.clone();
        point.set(&key, v.to_string())?;
        check_run_settings(&point)?;
        runs.push((root.join(format!("{key}={v}")), point));
    }
    for (dir, point) in runs {
        train_run(&point, &dir)?;
    }
    Ok(0)
}

/// Everything that can be checked before reading any data.
fn check_run_settings(s: &Settings) -> Result<()> {
    let loss = loss_from(s)?;
    s.require::<String>("head")?.parse::<HeadKind>()?.check_loss(&loss)?;
    model_config(s, 2)?;
    train_config(s)?;
    s.require::<String>("out")?;
    s.require_input("train")?;
    s.require_input("valid")?;
    s.input_path("test")?;
    s.input_path("vocab")?;
    Ok(())
}

fn train_run(s: &Settings, out: &Path) -> Result<MetricsReport> {
    check_run_settings(s)?;
    let tcfg = train_config(s)?;
    let train_path = s.require_input("train")?;
    let valid_path = s.require_input("valid")?;

    let vocab = match s.input_path("vocab")? {
        Some(p) => Vocab::load(&p)?,
        None => build_vocab_from_path(&train_path, &vocab_config(s)?)?,
    };
    let mcfg = model_config(s, vocab.len())?;
    mcfg.validate()?;
    check_k_set(&tcfg.eval_k_set(), vocab.len())?;
    let train_data = load_dataset(&train_path, &vocab, mcfg.context_len)?;
    let valid = load_dataset(&valid_path, &vocab, mcfg.context_len)?;
    let test = s.input_path("test")?.map(|p| load_dataset(&p, &vocab, mcfg.context_len)).transpose()?;

    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), s.snapshot())?;
    vocab.save(&out.join("vocab.txt"))?;
    let mut model = NgramModel::new(mcfg, Some(vocab.counts()))?;
    eprintln!(
        "{}: {} train / {} valid examples, D = {}, head {} with {}",
        out.display(),
        train_data.len(),
        valid.len(),
        vocab.len(),
        model.config().head,
        model.config().loss.kind
    );
    let mut log_file = BufWriter::new(File::create(out.join("train_log.jsonl"))?);
    let log = train(&mut model, &train_data, &valid, &tcfg, |rec| {
        serde_json::to_writer(&mut log_file, rec)?;
        writeln!(log_file)?;
        log_file.flush()?;
        let top1 = rec.valid.top(1).map(|e| format!("{e:.4}")).unwrap_or_default();
        eprintln!(
            "epoch {} examples {} eta {:.4e} loss {} valid top1 {top1} mrr {:.4}",
            rec.epoch,
            rec.examples_seen,
            rec.eta,
            rec.train_loss.map(|l| format!("{l:.4}")).unwrap_or_else(|| "-".into()),
            rec.valid.mrr
        );
        Ok(())
    })?;
    if log.skipped_degenerate > 0 {
        eprintln!("skipped {} examples with degenerate outputs", log.skipped_degenerate);
    }
    model.head_mut().refactorize();
    save_model(&model, &out.join("model.ckpt"))?;
    let report = match &test {
        Some(t) => evaluate(&model, t, &tcfg.k_set)?,
        None => evaluate(&model, &valid, &tcfg.k_set)?,
    };
    write_json_line(File::create(out.join("report.json"))?, &report)?;
    write_json_line(io::stdout().lock(), &report)?;
    Ok(report)
}

fn eval_cmd(a: &EvalArgs) -> Result<u8> {
    let s = layered(
        &a.common,
        &[("checkpoint", &a.checkpoint), ("data", &a.data), ("vocab", &a.vocab), ("kset", &a.kset), ("out", &a.out)],
    )?;
    let mut k_set: Vec<usize> = s.list("kset")?;
    k_set.sort_unstable();
    k_set.dedup();
    let report = match a.baseline.as_deref() {
        Some("constant") => {
            let vocab = Vocab::load(&s.require_input("vocab")?)?;
            check_k_set(&k_set, vocab.len())?;
            let data = s.require_input("data")?;
            let ds = load_dataset(&data, &vocab, 1)?;
            let targets: Vec<usize> = ds.targets().iter().map(|&t| t as usize).collect();
            constant_baseline(vocab.counts(), &targets, &k_set)?
        }
        Some(other) => return Err(Error::Config(format!("unknown baseline `{other}` (expected constant)"))),
        None => {
            let ckpt = s.require_input("checkpoint")?;
            let vocab_path = s.require_input("vocab")?;
            let data = s.require_input("data")?;
            let model = load_model(&ckpt)?;
            let vocab = Vocab::load(&vocab_path)?;
            if vocab.len() != model.config().vocab_size {
                return Err(Error::Data(format!(
                    "vocabulary has {} words but the model expects {}",
                    vocab.len(),
                    model.config().vocab_size
                )));
            }
            check_k_set(&k_set, vocab.len())?;
            let ds = load_dataset(&data, &vocab, model.config().context_len)?;
            evaluate(&model, &ds, &k_set)?
        }
    };
    if let Some(out) = s.raw("out").filter(|o| !o.is_empty()) {
        write_json_line(File::create(out)?, &report)?;
    }
    write_json_line(io::stdout().lock(), &report)?;
    Ok(0)
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Result<u8> {
    let s = layered(
        &a.common,
        &[
            ("loss", &a.loss),
            ("dims", &a.dims),
            ("trials", &a.trials),
            ("a", &a.a),
            ("b", &a.b),
            ("eps", &a.eps),
            ("seed", &a.seed),
            ("precision", &a.precision),
        ],
    )?;
    let loss_spec: String = s.require("loss")?;
    let kinds: Vec<LossKind> = if loss_spec == "all" || !s.is_explicit("loss") {
        LossKind::ALL.to_vec()
    } else {
        s.list::<String>("loss")?.iter().map(|k| k.parse()).collect::<Result<_>>()?
    };
    let params = if s.is_explicit("a") || s.is_explicit("b") {
        Some(ZLossParams::new(s.require("a")?, s.require("b")?)?)
    } else {
        None
    };
    let precision = match s.require::<String>("precision")?.as_str() {
        "dd" => FdPrecision::DoubleDouble,
        "f64" => FdPrecision::F64,
        p => return Err(Error::Config(format!("unknown precision `{p}` (expected dd or f64)"))),
    };
    let cfg = SweepConfig {
        kinds,
        dims: s.list("dims")?,
        trials: s.require("trials")?,
        eps: s.require("eps")?,
        seed: s.require("seed")?,
        params,
        precision,
    };
    if cfg.dims.is_empty() || cfg.trials == 0 || !(cfg.eps > 0.0) {
        return Err(Error::Config("gradcheck needs dims, trials >= 1 and eps > 0".into()));
    }
    let rows = sweep(&cfg)?;
    let mut out = io::stdout().lock();
    writeln!(out, "loss,D,trials,skipped,max_rel_error,tolerance,result")?;
    for r in &rows {
        writeln!(
            out,
            "{},{},{},{},{:.3e},{:.0e},{}",
            r.loss,
            r.dim,
            r.trials,
            r.skipped,
            r.max_rel_error,
            r.tolerance,
            if r.passed { "PASS" } else { "FAIL" }
        )?;
    }
    Ok(if rows.iter().all(|r| r.passed) { 0 } else { 3 })
}

fn bench_cmd(a: &BenchArgs) -> Result<u8> {
    let s = layered(
        &a.common,
        &[
            ("dlist", &a.dlist),
            ("d", &a.d),
            ("steps", &a.steps),
            ("batch", &a.batch),
            ("heads", &a.heads),
            ("loss", &a.loss),
            ("a", &a.a),
            ("b", &a.b),
            ("eta", &a.eta),
            ("repeats", &a.repeats),
            ("seed", &a.seed),
            ("epoch_examples", &a.epoch_examples),
            ("out", &a.out),
        ],
    )?;
    let heads = s.list::<String>("heads")?.iter().map(|h| h.parse()).collect::<Result<Vec<HeadKind>>>()?;
    let cfg = BenchConfig {
        heads,
        loss: loss_from(&s)?,
        d_list: s.list("dlist")?,
        d: s.require("d")?,
        batch: s.require("batch")?,
        steps: s.require("steps")?,
        repeats: s.require("repeats")?,
        seed: s.require("seed")?,
        eta: s.require("eta")?,
        epoch_examples: s.require("epoch_examples")?,
        output_only: a.output_only,
        ..BenchConfig::default()
    };
    let rows = run_bench(&cfg)?;
    match s.raw("out").filter(|o| !o.is_empty()) {
        Some(path) => {
            write_csv(&rows, BufWriter::new(File::create(path)?))?;
            eprintln!("wrote {} rows to {path}", rows.len());
        }
        None => write_csv(&rows, io::stdout().lock())?,
    }
    Ok(0)
}
