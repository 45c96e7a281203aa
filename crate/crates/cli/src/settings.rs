//! Layered `key = value` settings: built-in defaults, then a preset, then a
//! config file, then command-line flags. Later layers win.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use zloss_core::{Error, Result};

/// Every key a config file or flag may set.
pub const KEYS: &[(&str, &str)] = &[
    ("loss", "zloss, mse, taylor, logsoftmax, ce or sz"),
    ("head", "dense, factored or hsm"),
    ("a", "Z-loss softness"),
    ("b", "Z-loss shift"),
    ("context", "context words per example (n - 1)"),
    ("batch", "minibatch size"),
    ("eta", "initial learning rate"),
    ("epochs", "training epochs"),
    ("kset", "comma-separated k values for top-k error"),
    ("seed", "seed for initialization and shuffling"),
    ("emb_dim", "embedding size"),
    ("hidden", "comma-separated hidden layer sizes"),
    ("activation", "tanh or relu"),
    ("init_scale", "initialization scale"),
    ("bias", "append a constant feature for an output bias (true/false)"),
    ("clusters", "hierarchical softmax cluster count (default ceil(sqrt(D)))"),
    ("refactor_period", "factored head refactorization period, 0 = never"),
    ("cond_limit", "refactorize when the factor's condition estimate exceeds this"),
    ("patience", "evaluations without improvement before decaying eta"),
    ("factor", "learning-rate decay factor"),
    ("plateau_metric", "top1, top5 or mrr"),
    ("eval_every", "training examples between evaluations, 0 = once per epoch"),
    ("shuffle", "shuffle training examples each epoch (true/false)"),
    ("max_vocab", "keep at most this many words"),
    ("min_count", "drop words seen fewer times"),
    ("train", "training corpus"),
    ("valid", "validation corpus"),
    ("test", "test corpus"),
    ("data", "corpus to evaluate"),
    ("vocab", "vocabulary file"),
    ("checkpoint", "model checkpoint"),
    ("out", "output file or directory"),
    ("dlist", "bench: comma-separated class counts"),
    ("d", "bench: hidden size"),
    ("steps", "bench: minibatches per timing run"),
    ("repeats", "bench: timing runs per cell"),
    ("heads", "bench: comma-separated heads"),
    ("epoch_examples", "bench: examples per epoch for extrapolation"),
    ("dims", "gradcheck: comma-separated output sizes"),
    ("trials", "gradcheck: random trials per size"),
    ("eps", "gradcheck: finite-difference step"),
    ("precision", "gradcheck: dd or f64"),
];

/// Built-in defaults.
const DEFAULTS: &[(&str, &str)] = &[
    ("loss", "zloss"),
    ("head", "factored"),
    ("a", "0.1"),
    ("b", "28"),
    ("context", "6"),
    ("batch", "250"),
    ("eta", "0.1"),
    ("epochs", "10"),
    ("kset", "1,5,10,20,50,100"),
    ("seed", "0"),
    ("emb_dim", "64"),
    ("hidden", "256"),
    ("activation", "tanh"),
    ("init_scale", "1"),
    ("bias", "false"),
    ("refactor_period", "512"),
    ("cond_limit", "1e6"),
    ("patience", "2"),
    ("factor", "0.5"),
    ("plateau_metric", "top1"),
    ("eval_every", "0"),
    ("shuffle", "true"),
    ("min_count", "1"),
    ("dlist", "20000,200000"),
    ("d", "512"),
    ("steps", "2000"),
    ("repeats", "3"),
    ("heads", "dense,factored,hsm"),
    ("epoch_examples", "150e6"),
    ("dims", "5,50,1000"),
    ("trials", "100"),
    ("eps", "1e-5"),
    ("precision", "dd"),
];

pub const PRESETS: &[(&str, &[(&str, &str)])] = &[("fig1", &[("loss", "zloss"), ("a", "0.1"), ("b", "10"), ("max_vocab", "1000")])];

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

fn check_key(key: &str) -> Result<()> {
    if KEYS.iter().any(|(k, _)| *k == key) {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown setting `{key}`")))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    map: BTreeMap<String, String>,
    /// Keys set by a preset, file or flag rather than the defaults.
    explicit: BTreeSet<String>,
}

impl Settings {
    pub fn defaults() -> Self {
        Settings {
            map: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            explicit: BTreeSet::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        let key = normalize(key);
        check_key(&key)?;
        self.explicit.insert(key.clone());
        self.map.insert(key, value.into());
        Ok(())
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let (_, values) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?;
        for (k, v) in values.iter() {
            self.set(k, *v)?;
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected `key = value`", n + 1)))?;
            self.set(k, v.trim()).map_err(|e| Error::Config(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read config file {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None | Some("") => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`"))),
        }
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| Error::Config(format!("missing required setting `{key}`")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        match self.raw(key) {
            None | Some("") => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|t| t.trim().parse().map_err(|_| Error::Config(format!("invalid entry `{t}` in `{key}`"))))
                .collect(),
        }
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            None | Some("") | Some("false") | Some("0") | Some("no") => Ok(false),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some(v) => Err(Error::Config(format!("invalid boolean `{v}` for `{key}`"))),
        }
    }

    /// An input path that must exist.
    pub fn input_path(&self, key: &str) -> Result<Option<PathBuf>> {
        match self.raw(key) {
            None | Some("") => Ok(None),
            Some(p) => {
                let path = PathBuf::from(p);
                if path.exists() {
                    Ok(Some(path))
                } else {
                    Err(Error::Data(format!("{key} path {} does not exist", path.display())))
                }
            }
        }
    }

    pub fn require_input(&self, key: &str) -> Result<PathBuf> {
        self.input_path(key)?.ok_or_else(|| Error::Config(format!("missing required path `--{}`", key.replace('_', "-"))))
    }

    /// The effective settings as a config file.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.map {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
