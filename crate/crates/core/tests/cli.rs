use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fusmae::checkpoint::Checkpoint;
use fusmae::runconfig::RunConfig;
use fusmae::train::{parse_trace_csv, trace_csv, Trainer};
use fusmae::Dataset;

const SMALL: &str = "\
model.height=8
model.width=8
model.patch=4
model.depth=2
model.dim=16
model.dec_dim=8
model.dec_depth=1
data.height=8
data.width=8
probe.epochs=10
finetune.epochs=1
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fusmae"));
    c.env_remove("FUSMAE_OUT");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Workspace with the small config and two datasets.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("small.cfg"), SMALL).unwrap();
    ok(p, &["gen-data", "--n", "24", "--seed", "3", "--out", "tr.fmds", "--config", "small.cfg"]);
    ok(p, &["gen-data", "--n", "12", "--seed", "4", "--out", "te.fmds", "--config", "small.cfg"]);
    dir
}

fn pretrain(p: &Path, out: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec![
        "pretrain", "--data", "tr.fmds", "--steps", "8", "--batch-size", "4", "--seed", "1", "--config",
        "small.cfg", "--out", out,
    ];
    args.extend_from_slice(extra);
    ok(p, &args);
    p.join(out)
}

#[test]
fn gen_data_is_reproducible_and_validates_n() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let a = ok(p, &["gen-data", "--n", "6", "--seed", "7", "--out", "a/x.fmds"]);
    let b = ok(p, &["gen-data", "--n", "6", "--seed", "7", "--out", "b/x.fmds"]);
    let sum = |s: &str| s.lines().find(|l| l.starts_with("sha256=")).unwrap().to_string();
    assert_eq!(sum(&a), sum(&b));
    assert!(p.join("a/x.fmds.manifest").exists());
    assert_eq!(run(p, &["gen-data", "--n", "0", "--out", "z.fmds"]).status.code(), Some(2));
    let bad = run(p, &["gen-data", "--n", "3", "--out", "z.fmds", "--set", "data.classes=1"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn pretrain_writes_artifacts_and_is_reproducible() {
    let ws = workspace();
    let p = ws.path();
    let a = pretrain(p, "a", &[]);
    let b = pretrain(p, "b", &[]);
    for f in ["ck.fmck", "loss.csv", "run.cfg"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read(a.join("loss.csv")).unwrap(), fs::read(b.join("loss.csv")).unwrap());
    assert_eq!(fs::read(a.join("ck.fmck")).unwrap(), fs::read(b.join("ck.fmck")).unwrap());
    let trace = parse_trace_csv(&fs::read_to_string(a.join("loss.csv")).unwrap()).unwrap();
    assert_eq!(trace.len(), 8);
    let cfg = RunConfig::load(&a.join("run.cfg")).unwrap();
    assert_eq!(cfg.train.steps, 8);
    assert_eq!(cfg.model.dim, 16);
    assert_eq!(cfg.run["command"], "pretrain");
}

#[test]
fn variants_have_different_parameter_tables() {
    let ws = workspace();
    let p = ws.path();
    let names = |d: PathBuf| -> Vec<String> {
        Checkpoint::load(&d.join("ck.fmck")).unwrap().params.into_iter().map(|(n, _)| n).collect()
    };
    let xad = names(pretrain(p, "xad", &["--variant", "xad"]));
    let xaed = names(pretrain(p, "xaed", &["--variant", "xaed"]));
    assert_ne!(xad, xaed);
    assert!(xaed.iter().any(|n| n.starts_with("encoder.xattn.")));
    assert!(!xad.iter().any(|n| n.starts_with("encoder.xattn.")));
}

#[test]
fn resume_reproduces_the_uninterrupted_trace() {
    let ws = workspace();
    let p = ws.path();
    let full = pretrain(p, "full", &[]);

    // An interrupted run: the first 3 steps with the same resolved config.
    let cfg = RunConfig::load(&full.join("run.cfg")).unwrap();
    let data = Dataset::load(&p.join("tr.fmds")).unwrap();
    let mut t = Trainer::new(&cfg.model, &cfg.train).unwrap();
    let head: Vec<_> = (0..3).map(|_| t.train_step(&data).unwrap()).collect();
    let part = p.join("part");
    fs::create_dir_all(&part).unwrap();
    t.checkpoint().save(&part.join("ck.fmck")).unwrap();
    fs::write(part.join("loss.csv"), trace_csv(&head)).unwrap();

    ok(p, &["pretrain", "--data", "tr.fmds", "--resume", "part/ck.fmck"]);
    assert_eq!(fs::read(part.join("loss.csv")).unwrap(), fs::read(full.join("loss.csv")).unwrap());
    assert_eq!(fs::read(part.join("ck.fmck")).unwrap(), fs::read(full.join("ck.fmck")).unwrap());
}

#[test]
fn divergence_exits_with_code_3() {
    let ws = workspace();
    let out = run(
        ws.path(),
        &["pretrain", "--data", "tr.fmds", "--steps", "8", "--batch-size", "4", "--lr", "1e30", "--config", "small.cfg", "--out", "d"],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn output_root_comes_from_the_environment() {
    let ws = workspace();
    let p = ws.path();
    let root = p.join("root");
    let out = bin()
        .current_dir(p)
        .env("FUSMAE_OUT", &root)
        .args(["pretrain", "--data", "tr.fmds", "--steps", "4", "--batch-size", "4", "--config", "small.cfg", "--strategy", "consistent"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(root.join("pretrain-xaed-consistent-s1/ck.fmck").exists());
}

#[test]
fn probe_and_finetune_reports() {
    let ws = workspace();
    let p = ws.path();
    pretrain(p, "r", &[]);
    let args = |modality: &str, task: &str, out: &str| -> Vec<String> {
        ["--ckpt", "r/ck.fmck", "--train", "tr.fmds", "--test", "te.fmds", "--config", "small.cfg"]
            .iter()
            .map(|s| s.to_string())
            .chain(["--modality", modality, "--task", task, "--out", out].iter().map(|s| s.to_string()))
            .collect()
    };
    let probe = |a: Vec<String>| {
        let mut v = vec!["probe".to_string()];
        v.extend(a);
        ok(p, &v.iter().map(String::as_str).collect::<Vec<_>>())
    };
    let a = probe(args("s1s2", "multilabel", "p1"));
    let b = probe(args("s1s2", "multilabel", "p2"));
    assert_eq!(a, b);
    assert!(a.contains("map="));
    assert_eq!(fs::read(p.join("p1/metrics.csv")).unwrap(), fs::read(p.join("p2/metrics.csv")).unwrap());
    let s2 = probe(args("s2", "single", "p3"));
    assert!(s2.contains("top1=") && s2.contains("f1="));
    assert_ne!(s2, a);
    let csv = fs::read_to_string(p.join("p3/metrics.csv")).unwrap();
    assert!(csv.starts_with("task,n,map,top1,top3,precision,recall,f1\nsingle,12,"));

    let mut ft = vec!["finetune".to_string()];
    ft.extend(args("s1", "multilabel", "f1"));
    let out = ok(p, &ft.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out.contains("map="));
    assert!(p.join("f1/report.txt").exists() && p.join("f1/run.cfg").exists());

    let bad = run(p, &["probe", "--ckpt", "r/ck.fmck", "--train", "tr.fmds", "--test", "te.fmds", "--modality", "s3"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn checkpoint_dataset_mismatch_is_a_config_error() {
    let ws = workspace();
    let p = ws.path();
    pretrain(p, "r", &[]);
    ok(p, &["gen-data", "--n", "4", "--out", "big.fmds"]);
    let out = run(p, &["probe", "--ckpt", "r/ck.fmck", "--train", "big.fmds", "--test", "big.fmds"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn attention_exports_are_normalized() {
    let ws = workspace();
    let p = ws.path();
    pretrain(p, "r", &["--variant", "xaed"]);
    ok(p, &["inspect-attention", "--ckpt", "r/ck.fmck", "--data", "te.fmds", "--index", "2", "--out", "att"]);
    let att = p.join("att");
    let mut csvs = 0;
    for entry in fs::read_dir(&att).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        if name == "block_diag.csv" || !name.ends_with(".csv") {
            continue;
        }
        csvs += 1;
        let text = fs::read_to_string(&path).unwrap();
        let rows: Vec<Vec<f64>> = text.lines().map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
        // 4 patches per modality: cross-attention is 4x4, the first
        // self-attention block sees 4 + 4 + CLS tokens.
        let expect = if name.starts_with("encoder_xattn") { 4 } else { 9 };
        assert_eq!((rows.len(), rows[0].len()), (expect, expect), "{name}");
        for r in rows {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-5, "{name}");
        }
        assert!(att.join(name.replace(".csv", ".pgm")).exists());
    }
    // Two cross-attention directions and one self-attention block, 4 heads each.
    assert_eq!(csvs, 12);
    let scores = fs::read_to_string(att.join("block_diag.csv")).unwrap();
    assert_eq!(scores.lines().count(), 1 + 4);
    let out = run(p, &["inspect-attention", "--ckpt", "r/ck.fmck", "--data", "te.fmds", "--index", "50"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grad_check_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(ok(p, &["grad-check"]).contains("all gradient checks passed"));
    ok(p, &["grad-check", "--dtype", "f32", "--tol", "1e-3"]);
    let out = run(p, &["grad-check", "--inject-fault", "gelu"]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("FAIL") && text.contains("'gelu'"));
    assert_eq!(run(p, &["grad-check", "--dtype", "f16"]).status.code(), Some(2));
}

#[test]
fn bench_emits_comparison_table() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("small.cfg"), SMALL).unwrap();
    ok(
        p,
        &["bench", "--out", "b", "--n", "16", "--steps", "4", "--probe-n", "16", "--test-n", "8", "--config", "small.cfg", "--set", "train.batch_size=4"],
    );
    let csv = fs::read_to_string(p.join("b/bench.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "model,s1_map,s2_map,s1s2_map,final_loss");
    assert_eq!(rows.len(), 1 + 4);
    assert!(p.join("b/pretrain-xad/ck.fmck").exists());
}
