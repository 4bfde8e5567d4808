//! End-to-end runs of the `hero` binary on tiny corpora.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "\
d = 8
cross_layers = 1
cross_heads = 2
temporal_layers = 1
temporal_heads = 2
decoder_layers = 1
max_frames = 16
max_tokens = 16
ffn_multiplier = 2
dropout = 0.1
conv_kernel = 3
batch_size = 2
lr = 0.001
finetune_lr = 0.001
";

fn hero(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hero")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = hero(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// A 4-clip corpus of 12-second clips plus a tiny-model config file.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Self { dir };
        ok(&[
            "gen-data", "--out", f.s("corpus.jsonl"), "--clips", "4", "--seconds", "12", "--vocab", "30",
            "--feature-dim", "4", "--topics", "8", "--seed", "3",
        ]);
        fs::write(f.p("run.toml"), TINY).unwrap();
        f
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> &'static str {
        Box::leak(self.p(name).to_string_lossy().into_owned().into_boxed_str())
    }

    fn pretrain(&self, extra: &[&str]) -> Output {
        let mut args = vec![
            "pretrain", "--config", self.s("run.toml"), "--corpus", self.s("corpus.jsonl"), "--checkpoint-dir",
            self.s("ckpt"),
        ];
        args.extend_from_slice(extra);
        hero(&args)
    }
}

fn loss_lines(log: &Path) -> Vec<String> {
    fs::read_to_string(log).unwrap().lines().filter(|l| !l.starts_with('#')).map(String::from).collect()
}

#[test]
fn gen_data_summarizes_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a/corpus.jsonl");
    let b = dir.path().join("b/corpus.jsonl");
    for p in [&a, &b] {
        let out = ok(&["gen-data", "--clips", "8", "--seconds", "60", "--fps", "0.6667", "--seed", "1", "--out", p.to_str().unwrap()]);
        assert!(out.contains("8 clips") && out.contains("N_v=40"), "{out}");
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(dir.path().join("a/corpus.vocab.txt").exists());
}

#[test]
fn bad_flags_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.jsonl");
    assert_eq!(code(&hero(&["gen-data", "--fps", "0", "--out", out.to_str().unwrap()])), 1);
    assert_eq!(code(&hero(&["gen-data"])), 1);
    assert_eq!(code(&hero(&["no-such-command"])), 1);
    assert_eq!(code(&hero(&["--help"])), 0);
}

#[test]
fn missing_corpus_names_the_path() {
    let f = Fixture::new();
    let out = hero(&["pretrain", "--corpus", f.s("absent.jsonl"), "--steps", "1"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.jsonl"));
}

#[test]
fn resumed_pretraining_continues_the_same_trajectory() {
    let f = Fixture::new();
    let full = f.pretrain(&["--steps", "6", "--checkpoint-every", "3", "--log", f.s("full.log")]);
    assert!(full.status.success(), "{}", String::from_utf8_lossy(&full.stderr));
    let again = f.pretrain(&["--steps", "6", "--checkpoint-every", "3", "--log", f.s("again.log")]);
    assert!(again.status.success());
    assert_eq!(loss_lines(&f.p("full.log")), loss_lines(&f.p("again.log")));

    let resumed = f.pretrain(&["--steps", "6", "--resume", f.s("ckpt/step-000003.ckpt"), "--log", f.s("resumed.log")]);
    assert!(resumed.status.success(), "{}", String::from_utf8_lossy(&resumed.stderr));
    let full = loss_lines(&f.p("full.log"));
    let tail = loss_lines(&f.p("resumed.log"));
    assert_eq!(tail.len(), 3);
    for (a, b) in full[3..].iter().zip(&tail) {
        let la: f64 = a.split(',').nth(2).unwrap().parse().unwrap();
        let lb: f64 = b.split(',').nth(2).unwrap().parse().unwrap();
        assert!((la - lb).abs() <= 1e-10, "{a} vs {b}");
    }
}

#[test]
fn task_list_restricts_the_scheduler() {
    let f = Fixture::new();
    assert!(f.pretrain(&["--steps", "4", "--tasks", "mlm", "--log", f.s("mlm.log")]).status.success());
    let lines = loss_lines(&f.p("mlm.log"));
    assert_eq!(lines.len(), 4);
    for l in lines {
        let fields: Vec<&str> = l.split(',').collect();
        assert_eq!(fields.len(), 5, "{l}");
        assert_eq!(fields[1], "mlm");
    }
    assert_eq!(code(&f.pretrain(&["--steps", "1", "--tasks", "mlm,xyz"])), 1);
}

#[test]
fn flags_beat_the_config_file_and_the_config_is_echoed() {
    let f = Fixture::new();
    fs::write(f.p("seeded.toml"), format!("{TINY}seed = 5\n")).unwrap();
    let run = |extra: &[&str], log: &str| {
        let mut args = vec![
            "pretrain", "--config", f.s("seeded.toml"), "--corpus", f.s("corpus.jsonl"), "--steps", "1",
            "--checkpoint-dir", f.s("ck"), "--log", f.s(log),
        ];
        args.extend_from_slice(extra);
        assert!(hero(&args).status.success());
        fs::read_to_string(f.p(log)).unwrap()
    };
    let from_file = run(&[], "a.log");
    assert!(from_file.contains("# seed = 5"));
    assert!(from_file.lines().last().unwrap().ends_with(",5"));
    let from_flag = run(&["--seed", "7"], "b.log");
    assert!(from_flag.contains("# seed = 7"));
    assert!(from_flag.contains("# d = 8"));
    assert!(from_flag.contains("# lr = 0.001"));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let f = Fixture::new();
    fs::write(f.p("bad.toml"), "sede = 1\n").unwrap();
    let out = hero(&["pretrain", "--config", f.s("bad.toml"), "--corpus", f.s("corpus.jsonl")]);
    assert_eq!(code(&out), 1);
}

#[test]
fn numeric_blowup_exits_with_code_three() {
    let f = Fixture::new();
    let out = f.pretrain(&["--steps", "20", "--lr", "1e300", "--log", f.s("nan.log")]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step"));
}

#[test]
fn finetune_then_eval_is_deterministic() {
    let f = Fixture::new();
    ok(&["gen-tasks", "--corpus", f.s("corpus.jsonl"), "--task", "qa", "--out", f.s("qa.jsonl"), "--per-clip", "1"]);
    ok(&[
        "finetune", "--config", f.s("run.toml"), "--task", "qa", "--data", f.s("qa.jsonl"), "--from-scratch",
        "--steps", "3", "--lambda", "0.5", "--out", f.s("qa.ckpt"), "--log", f.s("ft.log"),
    ]);
    let log = fs::read_to_string(f.p("ft.log")).unwrap();
    assert!(log.contains("# qa_lambda = 0.5"));
    let eval = ["eval", "--checkpoint", f.s("qa.ckpt"), "--task", "qa", "--data", f.s("qa.jsonl")];
    let a = ok(&eval);
    assert!(a.contains("\"accuracy\""), "{a}");
    assert_eq!(a, ok(&eval));
}

#[test]
fn retrieval_eval_reports_thresholds_and_nms_mode() {
    let f = Fixture::new();
    ok(&["pretrain", "--config", f.s("run.toml"), "--corpus", f.s("corpus.jsonl"), "--steps", "2", "--checkpoint-dir", f.s("ck"), "--log", f.s("p.log")]);
    ok(&["gen-tasks", "--corpus", f.s("corpus.jsonl"), "--task", "retrieval", "--out", f.s("ret/ret.jsonl")]);
    ok(&[
        "finetune", "--config", f.s("run.toml"), "--task", "retrieval", "--data", f.s("ret/ret.jsonl"), "--init",
        f.s("ck/last.ckpt"), "--steps", "2", "--out", f.s("ret.ckpt"), "--log", f.s("ft.log"),
    ]);
    let base = ["eval", "--checkpoint", f.s("ret.ckpt"), "--task", "retrieval", "--data", f.s("ret/ret.jsonl")];
    let on = ok(&base);
    for key in ["video_r@1", "moment_r@10", "video_moment_r@100", "\"tiou\": \"0.7\"", "\"nms\": \"0.5\""] {
        assert!(on.contains(key), "{key} missing from {on}");
    }
    let mut off_args = base.to_vec();
    off_args.extend(["--nms", "off", "--k", "1,5", "--out", f.s("report.json")]);
    let off = ok(&off_args);
    assert!(off.contains("\"nms\": \"off\"") && off.contains("video_moment_r@5"), "{off}");
    assert!(fs::read_to_string(f.p("report.json")).unwrap().contains("video_moment_r@5"));
    assert_eq!(code(&hero(&[&base[..], &["--nms", "maybe"]].concat())), 1);
}

#[test]
fn finetune_input_errors_map_to_exit_codes() {
    let f = Fixture::new();
    ok(&["gen-tasks", "--corpus", f.s("corpus.jsonl"), "--task", "nli", "--out", f.s("nli.jsonl")]);
    let out = hero(&["finetune", "--task", "qa", "--data", f.s("nli.jsonl"), "--from-scratch", "--steps", "1"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("record at line 2"), "{}", String::from_utf8_lossy(&out.stderr));
    let out = hero(&["finetune", "--task", "nli", "--data", f.s("nli.jsonl"), "--steps", "1"]);
    assert_eq!(code(&out), 1);
    let out = hero(&["finetune", "--task", "dance", "--data", f.s("nli.jsonl"), "--from-scratch"]);
    assert_eq!(code(&out), 1);
    let out = hero(&["eval", "--checkpoint", f.s("none.ckpt"), "--task", "nli", "--data", f.s("nli.jsonl")]);
    assert_eq!(code(&out), 2);
}

fn grids(text: &str) -> Vec<(String, Vec<Vec<f64>>)> {
    text.split("\n\n")
        .filter(|b| !b.trim().is_empty())
        .map(|b| {
            let mut lines = b.lines();
            let head = lines.next().unwrap().to_string();
            let rows = lines.map(|l| l.split(' ').map(|x| x.parse().unwrap()).collect()).collect();
            (head, rows)
        })
        .collect()
}

#[test]
fn attention_dump_is_row_stochastic_square_and_deterministic() {
    let f = Fixture::new();
    ok(&["pretrain", "--config", f.s("run.toml"), "--corpus", f.s("corpus.jsonl"), "--steps", "1", "--checkpoint-dir", f.s("ck"), "--log", f.s("p.log")]);
    let args = |out: &'static str| {
        ["inspect-attention", "--checkpoint", f.s("ck/last.ckpt"), "--corpus", f.s("corpus.jsonl"), "--clip", "clip0000", "--out", out]
    };
    ok(&args(f.s("a.txt")));
    ok(&args(f.s("b.txt")));
    let a = fs::read_to_string(f.p("a.txt")).unwrap();
    assert_eq!(a, fs::read_to_string(f.p("b.txt")).unwrap());
    let gs = grids(&a);
    assert!(!gs.is_empty());
    for (head, rows) in gs {
        let words: Vec<&str> = head.split(' ').collect();
        let at = |k: &str| words[words.iter().position(|w| *w == k).unwrap() + 1].to_string();
        let size = at("frames").parse::<usize>().unwrap() + at("tokens").parse::<usize>().unwrap();
        assert_eq!(at("shape"), format!("{size}x{size}"));
        assert_eq!(rows.len(), size);
        for r in rows {
            assert_eq!(r.len(), size);
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6, "{head}");
        }
    }
    let mut missing = args(f.s("c.txt"));
    missing[6] = "nope";
    assert_eq!(code(&hero(&missing)), 1);
}
