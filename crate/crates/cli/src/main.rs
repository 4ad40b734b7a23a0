use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use ota::config::RunConfig;
use ota::distill::OtaOrder;
use ota::runner::{BaselineBackbone, BaselineMethod, DistillTeacher, Provenances, Runner};
use ota::synth::{shapes_dataset, Domain};
use ota::data::save_dataset;
use ota::{Real, SeededRng};

#[derive(Parser)]
#[command(name = "ota", version, about = "Config-driven transfer runs: IRF, DIGG and distillation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run config; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set irf.stage3.steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Data {
    Original,
    Rerep,
}

impl Data {
    fn name(self) -> &'static str {
        match self {
            Data::Original => "original",
            Data::Rerep => "rerep",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Init {
    Random,
    Pretrained,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Order {
    IrfThenDigg,
    DiggThenIrf,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Method {
    LinearProbe,
    Finetune,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Net {
    Teacher,
    Student,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Teacher {
    Pretrained,
    Irf,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Dom {
    A,
    B,
}

#[derive(Subcommand)]
enum Command {
    /// Train the tokenizer, latent transformer and teacher on upstream data.
    Prime,
    /// Sample few-shot data and re-represent it.
    Assemble {
        /// Class-stratified few-shot sampling.
        #[arg(long)]
        stratified: bool,
    },
    /// Train a head on the frozen teacher.
    Deliver {
        #[arg(long, value_enum)]
        delivering_data: Option<Data>,
    },
    /// Full fine-tune of the delivered model.
    Calibrate {
        #[arg(long, value_enum)]
        calibration_data: Option<Data>,
    },
    /// Assemble, deliver and calibrate in one run.
    Irf {
        #[arg(long, value_enum)]
        delivering_data: Option<Data>,
        #[arg(long, value_enum)]
        calibration_data: Option<Data>,
    },
    /// Linear-probe or fine-tune baseline on the few-shot data.
    Baseline {
        #[arg(long, value_enum, default_value = "finetune")]
        method: Method,
        #[arg(long, value_enum, default_value = "student")]
        backbone: Net,
        #[arg(long, value_enum)]
        student_init: Option<Init>,
    },
    /// Generate the pseudo-image corpus.
    Digg,
    /// Distill the teacher into the student on the pseudo corpus.
    Distill {
        #[arg(long, value_enum, default_value = "irf")]
        teacher: Teacher,
        #[arg(long, value_enum)]
        student_init: Option<Init>,
    },
    /// Fine-tune a distilled student on the few-shot data.
    Finetune {
        #[arg(long, value_enum, default_value = "irf")]
        teacher: Teacher,
        #[arg(long, value_enum)]
        student_init: Option<Init>,
    },
    /// Full pipeline in the given order.
    Ota {
        #[arg(long, value_enum)]
        order: Order,
        #[arg(long, value_enum)]
        student_init: Option<Init>,
    },
    /// FD between two feature files, or the upstream/downstream/re-represented trio.
    Fdscore {
        #[arg(long, requires = "b")]
        a: Option<PathBuf>,
        #[arg(long, requires = "a")]
        b: Option<PathBuf>,
    },
    /// Top-1 of a task checkpoint on a labeled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Rebuild tables and figures from stored reports.
    Report,
    /// Write a synthetic shapes dataset.
    Synth {
        #[arg(long, value_enum)]
        domain: Dom,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Record id prefix and RNG stream name.
        #[arg(long)]
        prefix: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn flag_overrides(cmd: &Command) -> Vec<String> {
    let mut v = Vec::new();
    let init = |v: &mut Vec<String>, i: &Option<Init>| {
        if let Some(i) = i {
            let s = match i {
                Init::Random => "random",
                Init::Pretrained => "pretrained",
            };
            v.push(format!("backbone.student_init=\"{s}\""));
        }
    };
    match cmd {
        Command::Assemble { stratified: true } => v.push("data.stratified=true".into()),
        Command::Deliver { delivering_data: Some(d) } => v.push(format!("irf.delivering_data=\"{}\"", d.name())),
        Command::Calibrate { calibration_data: Some(d) } => v.push(format!("irf.calibration_data=\"{}\"", d.name())),
        Command::Irf { delivering_data, calibration_data } => {
            if let Some(d) = delivering_data {
                v.push(format!("irf.delivering_data=\"{}\"", d.name()));
            }
            if let Some(d) = calibration_data {
                v.push(format!("irf.calibration_data=\"{}\"", d.name()));
            }
        }
        Command::Baseline { student_init, .. }
        | Command::Distill { student_init, .. }
        | Command::Finetune { student_init, .. }
        | Command::Ota { student_init, .. } => init(&mut v, student_init),
        _ => {}
    }
    v
}

fn load_config(g: &Global, flags: &[String]) -> Result<(RunConfig, Provenances)> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut overrides = Vec::new();
    for s in g.set.iter().chain(flags) {
        cfg.set(s).with_context(|| format!("applying override '{s}'"))?;
        overrides.push(s.clone());
    }
    Ok((
        cfg,
        Provenances {
            config_file: g.config.clone(),
            overrides,
        },
    ))
}

fn print(v: serde_json::Value) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&v).unwrap());
}

fn dir(p: &Path) -> serde_json::Value {
    json!({ "dir": p })
}

fn run(cli: Cli) -> Result<()> {
    if cli.global.jobs == Some(0) {
        bail!("--jobs must be at least 1");
    }
    if let Command::Synth { domain, count, size, out, prefix, seed } = &cli.command {
        let (domain, name) = match domain {
            Dom::A => (Domain::A, "a"),
            Dom::B => (Domain::B, "b"),
        };
        let prefix = prefix.clone().unwrap_or_else(|| name.to_string());
        let d = shapes_dataset::<Real>(domain, *count, *size, &prefix, &SeededRng::new(*seed, "synth"))?;
        set_jobs(cli.global.jobs)?;
        save_dataset(&d, out)?;
        print(json!({ "dir": out, "records": d.len() }));
        return Ok(());
    }
    let (cfg, sources) = load_config(&cli.global, &flag_overrides(&cli.command))?;
    set_jobs(cli.global.jobs.or((cfg.jobs > 0).then_some(cfg.jobs)))?;
    let r = Runner::new(cfg, sources);
    match cli.command {
        Command::Prime => print(dir(&r.prime()?)),
        Command::Assemble { .. } => print(dir(&r.assemble()?)),
        Command::Deliver { .. } => print(dir(&r.deliver()?)),
        Command::Calibrate { .. } => print(dir(&r.calibrate()?)),
        Command::Irf { .. } => print(dir(&r.irf()?)),
        Command::Baseline { method, backbone, .. } => {
            let m = match method {
                Method::LinearProbe => BaselineMethod::LinearProbe,
                Method::Finetune => BaselineMethod::Finetune,
            };
            let b = match backbone {
                Net::Teacher => BaselineBackbone::Teacher,
                Net::Student => BaselineBackbone::Student,
            };
            print(dir(&r.baseline(m, b)?))
        }
        Command::Digg => print(dir(&r.digg()?)),
        Command::Distill { teacher, .. } => print(dir(&r.distill(teacher_of(teacher))?)),
        Command::Finetune { teacher, .. } => print(dir(&r.finetune(teacher_of(teacher))?)),
        Command::Ota { order, .. } => {
            let o = match order {
                Order::IrfThenDigg => OtaOrder::IrfThenDigg,
                Order::DiggThenIrf => OtaOrder::DiggThenIrf,
            };
            let (d, report) = r.ota(o)?;
            print(json!({ "dir": d, "report": report }))
        }
        Command::Fdscore { a: Some(a), b: Some(b) } => {
            let (d, fd) = r.fd_files(&a, &b)?;
            print(json!({ "dir": d, "fd": fd.value, "degenerate": fd.degenerate }))
        }
        Command::Fdscore { .. } => {
            let (d, t) = r.fdscore()?;
            print(json!({
                "dir": d,
                "extractor_id": t.extractor_id,
                "fd_original": t.original.value,
                "fd_rerepresented": t.rerepresented.value,
            }))
        }
        Command::Eval { checkpoint, data } => {
            let (d, top1) = r.eval(&checkpoint, &data)?;
            print(json!({ "dir": d, "top1": top1 }))
        }
        Command::Report => print(json!({ "written": r.report()? })),
        Command::Synth { .. } => unreachable!(),
    }
    Ok(())
}

fn set_jobs(n: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn teacher_of(t: Teacher) -> DistillTeacher {
    match t {
        Teacher::Pretrained => DistillTeacher::Pretrained,
        Teacher::Irf => DistillTeacher::Irf,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
