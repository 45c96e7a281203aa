use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const WORDS: [&str; 10] = ["the", "cat", "sat", "on", "mat", "dog", "ran", "a", "big", "red"];

fn zloss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zloss")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Small deterministic corpus with some structure: each word is usually
/// followed by the next one in `WORDS`.
fn corpus(dir: &Path, name: &str, lines: usize, seed: usize) -> String {
    let mut text = String::new();
    let mut state = seed;
    for _ in 0..lines {
        let mut w = state % WORDS.len();
        let mut line = Vec::new();
        for _ in 0..8 {
            line.push(WORDS[w]);
            state = state.wrapping_mul(1103515245).wrapping_add(12345) % (1 << 31);
            w = if state % 5 == 0 { state / 7 % WORDS.len() } else { (w + 1) % WORDS.len() };
        }
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

struct Fixture {
    dir: TempDir,
    train: String,
    valid: String,
    test: String,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let train = corpus(dir.path(), "train.txt", 200, 1);
        let valid = corpus(dir.path(), "valid.txt", 30, 2);
        let test = corpus(dir.path(), "test.txt", 30, 3);
        Fixture { dir, train, valid, test }
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_str().unwrap().to_string()
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let out = self.path(out);
        let mut args = vec![
            "train", "--train", &self.train, "--valid", &self.valid, "--test", &self.test, "--out", &out,
            "--context", "2", "--emb-dim", "6", "--hidden", "12", "--epochs", "2", "--batch", "8", "--kset", "1,5",
        ];
        args.extend_from_slice(extra);
        zloss(&args)
    }
}

#[test]
fn unknown_flag_exits_with_usage_error() {
    assert_eq!(code(&zloss(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&zloss(&["frobnicate"])), 1);
    assert_eq!(code(&zloss(&["--help"])), 0);
}

#[test]
fn factored_head_with_log_softmax_is_a_config_error() {
    let f = Fixture::new();
    let out = f.train("run", &["--head", "factored", "--loss", "logsoftmax"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("not spherical"));
    assert!(!Path::new(&f.path("run")).exists());
}

#[test]
fn missing_corpus_is_a_data_error() {
    let f = Fixture::new();
    let missing = f.path("missing.txt");
    let out = zloss(&["train", "--train", &missing, "--valid", &f.valid, "--out", &f.path("run")]);
    assert_eq!(code(&out), 2);
    let out = zloss(&["build-vocab", "--train", &missing, "--out", &f.path("v.txt")]);
    assert_eq!(code(&out), 2);
}

#[test]
fn bad_values_are_config_errors() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("r1", &["--batch", "lots"])), 1);
    assert_eq!(code(&f.train("r2", &["--loss", "hinge"])), 1);
    assert_eq!(code(&f.train("r3", &["--kset", "1,500"])), 1);
    assert_eq!(code(&f.train("r4", &["--a", "-1"])), 1);
}

#[test]
fn build_vocab_train_eval_round_trip() {
    let f = Fixture::new();
    let vocab = f.path("vocab.txt");
    let cache = f.path("train.bin");
    let out = zloss(&["build-vocab", "--train", &f.train, "--out", &vocab, "--cache-out", &cache, "--context", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let header = fs::read_to_string(&vocab).unwrap();
    assert!(header.starts_with("12\t<unk>\t<s>"), "{header}");

    let run = f.path("run");
    let out = zloss(&[
        "train", "--train", &cache, "--valid", &f.valid, "--test", &f.test, "--vocab", &vocab, "--out", &run,
        "--context", "2", "--emb-dim", "6", "--hidden", "12", "--epochs", "2", "--batch", "8", "--kset", "1,5",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["config.txt", "vocab.txt", "train_log.jsonl", "model.ckpt", "report.json"] {
        assert!(Path::new(&run).join(file).exists(), "{file}");
    }
    let log = fs::read_to_string(Path::new(&run).join("train_log.jsonl")).unwrap();
    assert!(log.lines().count() >= 2);
    for line in log.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["valid"]["topk"]["1"].is_number());
    }
    let report: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(report["n"], 240);

    let ckpt = Path::new(&run).join("model.ckpt");
    let out = zloss(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--vocab", &vocab, "--data", &f.test, "--kset", "1,5"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let again: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(again, report);

    let out = zloss(&["eval", "--baseline", "constant", "--vocab", &vocab, "--data", &f.test, "--kset", "1,5"]);
    assert_eq!(code(&out), 0);
    let base: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(base["n"], 240);
}

#[test]
fn eval_rejects_a_mismatched_vocabulary() {
    let f = Fixture::new();
    assert_eq!(code(&f.train("run", &[])), 0);
    let small = f.path("small.txt");
    fs::write(&small, "2\t<unk>\t<s>\n<unk>\t0\n<s>\t0\n").unwrap();
    let ckpt = f.path("run/model.ckpt");
    let out = zloss(&["eval", "--checkpoint", &ckpt, "--vocab", &small, "--data", &f.test, "--kset", "1"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn reruns_are_deterministic() {
    let f = Fixture::new();
    for head in ["dense", "factored", "hsm"] {
        let loss = if head == "hsm" { "logsoftmax" } else { "zloss" };
        let a = f.train(&format!("{head}1"), &["--head", head, "--loss", loss]);
        let b = f.train(&format!("{head}2"), &["--head", head, "--loss", loss]);
        assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
        assert_eq!(stdout(&a), stdout(&b), "{head}");
        let ca = fs::read(f.path(&format!("{head}1/model.ckpt"))).unwrap();
        let cb = fs::read(f.path(&format!("{head}2/model.ckpt"))).unwrap();
        assert_eq!(ca, cb, "{head}");
    }
}

#[test]
fn config_file_and_preset_precedence() {
    let f = Fixture::new();
    let cfg = f.path("run.cfg");
    fs::write(&cfg, "# test config\nb = 5\nbatch = 4\nemb_dim = 3\n").unwrap();
    let out = f.train("run", &["--preset", "fig1", "--config", &cfg]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let snap = fs::read_to_string(f.path("run/config.txt")).unwrap();
    // Preset, then file, then flags.
    assert!(snap.contains("a = 0.1\n"));
    assert!(snap.contains("b = 5\n"));
    assert!(snap.contains("max_vocab = 1000\n"));
    assert!(snap.contains("batch = 8\n"));
    assert!(snap.contains("emb_dim = 6\n"));

    fs::write(&cfg, "colour = red\n").unwrap();
    assert_eq!(code(&f.train("bad", &["--config", &cfg])), 1);
    assert_eq!(code(&f.train("bad", &["--preset", "fig9"])), 1);
}

#[test]
fn sweep_writes_one_run_per_value() {
    let f = Fixture::new();
    let out = f.train("sweep", &["--sweep", "a=0.1,0.4"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for v in ["a=0.1", "a=0.4"] {
        let snap = fs::read_to_string(Path::new(&f.path("sweep")).join(v).join("config.txt")).unwrap();
        assert!(snap.contains(&format!("a = {}\n", &v[2..])));
    }
    assert_eq!(code(&f.train("sweep2", &["--sweep", "a=0.1,-3"])), 1);
    assert!(!Path::new(&f.path("sweep2")).exists());
}

#[test]
fn gradcheck_reports_every_loss() {
    let out = zloss(&["gradcheck", "--dims", "4,9", "--trials", "2"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| r.ends_with(",PASS")));
    let out = zloss(&["gradcheck", "--loss", "zloss", "--dims", "5", "--trials", "1", "--a", "1", "--b", "0"]);
    assert_eq!(code(&out), 0);
    assert_eq!(code(&zloss(&["gradcheck", "--precision", "quad"])), 1);
}

#[test]
fn bench_prints_csv() {
    let out = zloss(&["bench", "--dlist", "30,60", "--d", "4", "--steps", "2", "--batch", "3", "--repeats", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "head,loss,D,d,batch,steps,sec_per_1k_examples_output_only,sec_per_1k_examples_total,extrapolated_epoch_seconds"
    );
    assert_eq!(lines.count(), 6);
    let out = zloss(&["bench", "--heads", "factored", "--loss", "logsoftmax", "--dlist", "30"]);
    assert_eq!(code(&out), 1);
}
