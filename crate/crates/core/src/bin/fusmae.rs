use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fusmae::checkpoint::Checkpoint;
use fusmae::config::{ModalityCondition, Task, Variant};
use fusmae::data::Dataset;
use fusmae::gradsuite::{run_suite, SuiteOptions};
use fusmae::metrics::{MetricsReport, METRICS_CSV_HEADER};
use fusmae::model::{AttentionReport, FusMae};
use fusmae::probe::{finetune, probe_model};
use fusmae::runconfig::{output_root, RunConfig};
use fusmae::train::{parse_trace_csv, smoothed_endpoints, trace_csv, TraceRow, Trainer};
use fusmae::{DType, Error};

/// Cross-attention multimodal masked autoencoder on synthetic SAR/optical pairs.
#[derive(Parser)]
#[command(name = "fusmae", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Default)]
struct Overrides {
    /// key=value config file (flags take precedence over it)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic paired dataset and its manifest
    GenData {
        /// Number of sample pairs
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        /// Dataset seed
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Dataset file to write (manifest goes next to it)
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Masked-autoencoder pretraining
    Pretrain {
        /// Dataset written by gen-data
        #[arg(long)]
        data: PathBuf,
        /// xaed, xad or early_concat
        #[arg(long)]
        variant: Option<String>,
        /// independent or consistent
        #[arg(long)]
        strategy: Option<String>,
        /// Optimizer steps; warmup is a tenth of them
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Save a checkpoint every N steps
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Continue from this checkpoint (its config wins)
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run directory [default: $FUSMAE_OUT/pretrain-<variant>-<strategy>-s<seed>]
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Linear probe on frozen encoder features
    Probe {
        #[command(flatten)]
        e: EvalArgs,
    },
    /// Fine-tune the encoder with a linear head
    Finetune {
        #[command(flatten)]
        e: EvalArgs,
        /// Fine-tuning epochs
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Dump attention maps and within-modality attention mass
    InspectAttention {
        /// Checkpoint written by pretrain
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Sample index within the dataset
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Directory for the CSV/PGM dumps
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks at the minimal config
    GradCheck {
        /// f64 or f32
        #[arg(long, default_value = "f64")]
        dtype: String,
        /// Relative-error tolerance [default: 1e-4 for f64, 1e-3 for f32]
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// gen-data, pretrain every variant, probe every modality condition
    Bench {
        /// Output directory
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pretraining pairs
        #[arg(long, default_value_t = 2048)]
        n: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Probe training pairs
        #[arg(long, default_value_t = 1024)]
        probe_n: usize,
        /// Probe test pairs
        #[arg(long, default_value_t = 512)]
        test_n: usize,
        #[command(flatten)]
        o: Overrides,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by pretrain
    #[arg(long)]
    ckpt: PathBuf,
    /// Labelled training split
    #[arg(long)]
    train: PathBuf,
    /// Held-out split used for the report
    #[arg(long)]
    test: PathBuf,
    /// s1, s2 or s1s2
    #[arg(long, default_value = "s1s2")]
    modality: String,
    /// multilabel or single
    #[arg(long, default_value = "multilabel")]
    task: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    o: Overrides,
}

type CmdResult = Result<ExitCode, Error>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData { n, seed, out, o } => gen_data(n as usize, seed, &out, &o),
        Cmd::Pretrain {
            data,
            variant,
            strategy,
            steps,
            seed,
            lr,
            batch_size,
            checkpoint_every,
            resume,
            out,
            o,
        } => {
            let mut kv = BTreeMap::new();
            put(&mut kv, "model.variant", variant);
            put(&mut kv, "model.strategy", strategy);
            put(&mut kv, "train.steps", steps);
            put(&mut kv, "train.seed", seed);
            put(&mut kv, "train.base_lr", lr);
            put(&mut kv, "train.batch_size", batch_size);
            put(&mut kv, "train.checkpoint_every", checkpoint_every);
            if let Some(s) = steps {
                // Keep warmup at a tenth of the run unless set explicitly.
                kv.insert("train.warmup_steps".into(), (s / 10).to_string());
            }
            pretrain(&data, resume.as_deref(), out, &o, kv)
        }
        Cmd::Probe { e } => evaluate(e, None, false),
        Cmd::Finetune { e, epochs } => evaluate(e, epochs, true),
        Cmd::InspectAttention { ckpt, data, index, out } => inspect_attention(&ckpt, &data, index, out),
        Cmd::GradCheck { dtype, tol, inject_fault } => grad_check(&dtype, tol, inject_fault),
        Cmd::Bench {
            out,
            n,
            steps,
            seed,
            probe_n,
            test_n,
            o,
        } => bench(out, n, steps, seed, probe_n, test_n, &o),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Diverged { .. } | Error::NonFinite { .. } => 3,
                _ => 2,
            })
        }
    }
}

fn put<T: ToString>(kv: &mut BTreeMap<String, String>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        kv.insert(key.into(), v.to_string());
    }
}

fn resolve(o: &Overrides, mut flags: BTreeMap<String, String>) -> Result<RunConfig, Error> {
    let mut kv = BTreeMap::new();
    for s in &o.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{s}'")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    // Dedicated flags beat generic --set entries.
    kv.append(&mut flags);
    RunConfig::resolve(o.config.as_deref(), &kv)
}

fn gen_data(n: usize, seed: u64, out: &Path, o: &Overrides) -> CmdResult {
    let cfg = resolve(o, BTreeMap::new())?;
    let data = Dataset::generate(&cfg.data, n, seed)?;
    let (manifest, sum) = data.save(out, seed)?;
    println!("wrote {} ({} samples)", out.display(), n);
    println!("manifest {}", manifest.display());
    println!("sha256={sum}");
    Ok(ExitCode::SUCCESS)
}

fn pretrain(
    data_path: &Path,
    resume: Option<&Path>,
    out: Option<PathBuf>,
    o: &Overrides,
    flags: BTreeMap<String, String>,
) -> CmdResult {
    let data = Dataset::load(data_path)?;
    let (mut trainer, mut trace, mut cfg) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let trainer = Trainer::from_checkpoint(&ck)?;
            let prior = path.with_file_name("loss.csv");
            let trace: Vec<TraceRow> = match fs::read_to_string(&prior) {
                Ok(text) => parse_trace_csv(&text)?.into_iter().filter(|r| r.step < ck.step).collect(),
                Err(_) => Vec::new(),
            };
            if trace.len() != ck.step {
                eprintln!("warning: {} has {} of {} earlier trace rows", prior.display(), trace.len(), ck.step);
            }
            let cfg = RunConfig {
                model: ck.model.clone(),
                train: ck.train.clone(),
                ..resolve(o, BTreeMap::new())?
            };
            (trainer, trace, cfg)
        }
        None => {
            let cfg = resolve(o, flags)?;
            (Trainer::new(&cfg.model, &cfg.train)?, Vec::new(), cfg)
        }
    };
    let dir = match (out, resume) {
        (Some(d), _) => d,
        (None, Some(r)) => r.parent().map(Path::to_path_buf).unwrap_or_default(),
        (None, None) => output_root().join(format!(
            "pretrain-{}-{}-s{}",
            cfg.model.variant, cfg.model.strategy, cfg.train.seed
        )),
    };
    fs::create_dir_all(&dir)?;
    cfg.run.insert("command".into(), "pretrain".into());
    cfg.run.insert("data".into(), data_path.display().to_string());
    cfg.write(&dir)?;
    let ck_path = dir.join("ck.fmck");
    let csv_path = dir.join("loss.csv");
    let every = trainer.train.checkpoint_every;
    let total = trainer.train.steps;
    while trainer.step < total {
        let row = match trainer.train_step(&data) {
            Ok(r) => r,
            Err(e) => {
                fs::write(&csv_path, trace_csv(&trace))?;
                return Err(e);
            }
        };
        trace.push(row);
        if row.step % 25 == 0 || trainer.step == total {
            eprintln!("step {:>5}  lr {:.3e}  loss {:.5}", row.step, row.lr, row.loss);
        }
        if every > 0 && trainer.step % every == 0 && trainer.step < total {
            trainer.checkpoint().save(&ck_path)?;
            fs::write(&csv_path, trace_csv(&trace))?;
        }
    }
    trainer.checkpoint().save(&ck_path)?;
    fs::write(&csv_path, trace_csv(&trace))?;
    println!("checkpoint {}", ck_path.display());
    println!("loss trace {}", csv_path.display());
    if let Some((a, b)) = smoothed_endpoints(&trace, 20.min(trace.len())) {
        println!("smoothed loss {a:.5} -> {b:.5} (ratio {:.3})", b / a);
    }
    Ok(ExitCode::SUCCESS)
}

fn check_data(model: &FusMae<f32>, data: &Dataset, what: &str) -> Result<(), Error> {
    let (c, d) = (model.config(), &data.config);
    if (c.height, c.width, c.c1, c.c2) != (d.height, d.width, d.c1, d.c2) {
        return Err(Error::Config(format!(
            "{what} dataset ({}x{}, {}+{} channels) does not fit the checkpoint ({}x{}, {}+{})",
            d.height, d.width, d.c1, d.c2, c.height, c.width, c.c1, c.c2
        )));
    }
    Ok(())
}

fn evaluate(e: EvalArgs, epochs: Option<usize>, tune: bool) -> CmdResult {
    let section = if tune { "finetune" } else { "probe" };
    let mut flags = BTreeMap::new();
    put(&mut flags, &format!("{section}.seed"), e.seed);
    put(&mut flags, &format!("{section}.epochs"), epochs);
    let mut cfg = resolve(&e.o, flags)?;
    let cond: ModalityCondition = e.modality.parse()?;
    let task: Task = e.task.parse()?;
    let ck = Checkpoint::load(&e.ckpt)?;
    let model = ck.restore_model()?;
    let train = Dataset::load(&e.train)?;
    let test = Dataset::load(&e.test)?;
    check_data(&model, &train, "training")?;
    check_data(&model, &test, "test")?;
    if train.config.classes != test.config.classes {
        return Err(Error::Config("training and test splits have different class counts".into()));
    }
    let report = if tune {
        let out = finetune(&model, &train, &test, task, cond, &cfg.finetune)?;
        for (i, l) in out.epoch_loss.iter().enumerate() {
            eprintln!("epoch {i:>3}  loss {l:.5}");
        }
        out.report
    } else {
        let out = probe_model(&model, &train, &test, task, cond, &cfg.probe)?;
        for w in &out.warnings {
            eprintln!("warning: {w}");
        }
        out.report
    };
    for c in report.excluded_classes() {
        eprintln!("warning: class {c} has no positive in the test split; excluded from mAP");
    }
    let dir = e.out.unwrap_or_else(|| {
        e.ckpt
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("{section}-{task}-{cond}"))
    });
    cfg.model = ck.model.clone();
    cfg.train = ck.train.clone();
    cfg.run.insert("command".into(), section.into());
    cfg.run.insert("ckpt".into(), e.ckpt.display().to_string());
    cfg.run.insert("train".into(), e.train.display().to_string());
    cfg.run.insert("test".into(), e.test.display().to_string());
    cfg.run.insert("modality".into(), cond.to_string());
    cfg.run.insert("task".into(), task.to_string());
    write_report(&dir, &report, &cfg)?;
    print!("{}", report.to_text());
    Ok(ExitCode::SUCCESS)
}

fn write_report(dir: &Path, report: &MetricsReport, cfg: &RunConfig) -> Result<(), Error> {
    cfg.write(dir)?;
    fs::write(dir.join("report.txt"), report.to_text())?;
    fs::write(dir.join("metrics.csv"), format!("{METRICS_CSV_HEADER}\n{}\n", report.csv_row()))?;
    Ok(())
}

/// Plain (ASCII) PGM, each map scaled so its largest weight is white.
fn pgm(rows: usize, cols: usize, weights: &[f64]) -> String {
    let max = weights.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut out = format!("P2\n{cols} {rows}\n255\n");
    for r in 0..rows {
        let line: Vec<String> = weights[r * cols..(r + 1) * cols]
            .iter()
            .map(|w| ((w / max * 255.0).round() as u8).to_string())
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

fn inspect_attention(ckpt: &Path, data_path: &Path, index: usize, out: Option<PathBuf>) -> CmdResult {
    let ck = Checkpoint::load(ckpt)?;
    let model = ck.restore_model()?;
    let data = Dataset::load(data_path)?;
    check_data(&model, &data, "")?;
    let sample = data
        .samples
        .get(index)
        .ok_or_else(|| Error::Invalid(format!("sample index {index} out of range (dataset has {})", data.len())))?;
    let report = model.attention_maps(&sample.i1, &sample.i2)?;
    let dir = out.unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join(format!("attention-{index}")));
    fs::create_dir_all(&dir)?;
    let mut n = 0;
    for m in &report.maps {
        if !(m.label.starts_with("encoder.xattn") || m.label == AttentionReport::FIRST_SELF_ATTENTION) {
            continue;
        }
        let stem = format!("{}_h{}", m.label.replace('.', "_"), m.head);
        let mut csv = String::new();
        for r in 0..m.rows {
            let row: Vec<String> = m.row(r).iter().map(|w| format!("{w:.8}")).collect();
            let _ = writeln!(csv, "{}", row.join(","));
        }
        fs::write(dir.join(format!("{stem}.csv")), csv)?;
        fs::write(dir.join(format!("{stem}.pgm")), pgm(m.rows, m.cols, &m.weights))?;
        println!("{stem}: {}x{}", m.rows, m.cols);
        n += 1;
    }
    let mut scores = String::from("head,within_modality_mass,uniform_baseline\n");
    match (report.within_modality_mass(), report.uniform_within_mass()) {
        (Some(mass), Some(base)) => {
            for (h, w) in mass.iter().enumerate() {
                let _ = writeln!(scores, "{h},{w:.6},{base:.6}");
                println!("head {h}: within-modality mass {w:.4} (uniform {base:.4})");
            }
        }
        _ => println!("early_concat tokens mix both modalities; no within-modality score"),
    }
    fs::write(dir.join("block_diag.csv"), scores)?;
    println!("wrote {n} maps to {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn grad_check(dtype: &str, tol: Option<f64>, fault: Option<String>) -> CmdResult {
    let dtype = match dtype {
        "f64" => DType::F64,
        "f32" => DType::F32,
        other => return Err(Error::Config(format!("unknown dtype '{other}' (expected f64 or f32)"))),
    };
    let mut opts = SuiteOptions::for_dtype(dtype);
    if let Some(t) = tol {
        opts.tol = t;
    }
    // The fault name must outlive every tape; one leak per process is fine.
    opts.fault = fault.map(|f| &*Box::leak(f.into_boxed_str()));
    let report = run_suite(&opts)?;
    for l in report.lines() {
        println!("{l}");
    }
    if report.passed() {
        println!("all gradient checks passed (tol {:e}, {dtype:?})", report.tol);
        Ok(ExitCode::SUCCESS)
    } else {
        if let Some(f) = opts.fault {
            println!("sign fault injected into the backward rule of '{f}'");
        }
        println!("gradient check FAILED (tol {:e})", report.tol);
        Ok(ExitCode::from(1))
    }
}

fn bench(
    out: Option<PathBuf>,
    n: usize,
    steps: Option<usize>,
    seed: u64,
    probe_n: usize,
    test_n: usize,
    o: &Overrides,
) -> CmdResult {
    let dir = out.unwrap_or_else(|| output_root().join("bench"));
    let mut flags = BTreeMap::new();
    put(&mut flags, "train.seed", Some(seed));
    if let Some(s) = steps {
        flags.insert("train.steps".into(), s.to_string());
        flags.insert("train.warmup_steps".into(), (s / 10).to_string());
    }
    let base = resolve(o, flags)?;
    let pre = Dataset::generate(&base.data, n, 7)?;
    let train = Dataset::generate(&base.data, probe_n, 11)?;
    let test = Dataset::generate(&base.data, test_n, 12)?;
    pre.save(&dir.join("pretrain.fmds"), 7)?;
    train.save(&dir.join("probe_train.fmds"), 11)?;
    test.save(&dir.join("probe_test.fmds"), 12)?;

    let conds = [ModalityCondition::S1, ModalityCondition::S2, ModalityCondition::S1S2];
    let mut csv = String::from(
        "# desk-scale synthetic benchmark; values are not comparable to published numbers\n\
         model,s1_map,s2_map,s1s2_map,final_loss\n",
    );
    let mut row = |name: &str, model: &FusMae<f32>, loss: Option<f64>| -> Result<(), Error> {
        let mut cells = vec![name.to_string()];
        for c in conds {
            let r = probe_model(model, &train, &test, Task::Multilabel, c, &base.probe)?;
            cells.push(format!("{:.4}", r.report.map));
        }
        cells.push(loss.map(|l| format!("{l:.5}")).unwrap_or_default());
        println!("{}", cells.join(","));
        csv.push_str(&cells.join(","));
        csv.push('\n');
        Ok(())
    };
    for variant in [Variant::EarlyConcat, Variant::Xad, Variant::Xaed] {
        let mut cfg = base.clone();
        cfg.model.variant = variant;
        let mut trainer = Trainer::new(&cfg.model, &cfg.train)?;
        if variant == Variant::Xaed {
            row("random_init_xaed", &trainer.model, None)?;
        }
        let trace = trainer.run(&pre, |_, r| {
            if r.step % 50 == 0 {
                eprintln!("{variant} step {:>4} loss {:.5}", r.step, r.loss);
            }
            Ok(())
        })?;
        let run_dir = dir.join(format!("pretrain-{variant}"));
        fs::create_dir_all(&run_dir)?;
        trainer.checkpoint().save(&run_dir.join("ck.fmck"))?;
        fs::write(run_dir.join("loss.csv"), trace_csv(&trace))?;
        cfg.write(&run_dir)?;
        let last = smoothed_endpoints(&trace, 20.min(trace.len())).map(|(_, b)| b);
        row(&format!("pretrained_{variant}"), &trainer.model, last)?;
    }
    fs::write(dir.join("bench.csv"), &csv)?;
    println!("wrote {}", dir.join("bench.csv").display());
    Ok(ExitCode::SUCCESS)
}
