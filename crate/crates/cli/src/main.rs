//! `redact`: train, redact, evaluate and attack toy conditional generators.

mod config;
mod fail;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use redact_core::attack::attack_success_rate;
use redact_core::closedform::{redact_affine_generator, LabelRedactionPlan};
use redact_core::experiment::{
    attack_outcome, attack_rows, distill_any, faithfulness_rows, frozen_intact, hex_digest,
    load_generator, loss_rows, phase_seed, quality_rows, run_experiment_with, save_generator,
    summarize_distill, ExperimentConfig, RunReport, TeacherSummary, ATTACK_HEADER, ATTACK_NOTICE,
    FAITHFULNESS_HEADER, LOSS_HEADER, QUALITY_HEADER, REPORT_SCHEMA,
};
use redact_core::jsonfmt::{self, fmt_f64, write_csv};
use redact_core::metrics::{evaluate, faithfulness_trials, SUBSTITUTION_NOTICES};
use redact_core::nn::param_digest;
use redact_core::rng::rng;
use redact_core::toy::{train_generator, ConditionalGenerator};

use config::ConfigArgs;
use fail::{Fail, ResultExt};

#[derive(Parser, Debug)]
#[command(
    name = "redact",
    version,
    about = "Redact conditionals from toy conditional generators"
)]
struct Cli {
    /// Worker threads for independent variants. Results do not depend on it.
    #[arg(long, global = true, env = "REDACT_THREADS", default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct OutArgs {
    /// Output directory. Defaults to the config's `output_dir`, then `runs/<name>`.
    #[arg(long, short, env = "REDACT_OUTPUT_DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample the synthetic task to CSV.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Samples per conditional.
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
    /// Train the teacher generator.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Closed-form label redaction of an affine single-stage checkpoint.
    RedactExact {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON or TOML file with `labels`, `redact` and `reference` integer lists.
        #[arg(long)]
        plan: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Distill a redacted conditioner from a teacher checkpoint.
    Distill {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Redaction metrics of a student against its teacher.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Square attack on the redacted conditionals of a checkpoint.
    Attack {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Summarize a report, optionally re-running its echoed config.
    Report {
        path: PathBuf,
        /// Re-run the echoed config and compare every numeric field.
        #[arg(long)]
        verify: bool,
    },
    /// Full pipeline: train, redact, evaluate, attack.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Print the resolved config as TOML and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Run the mnist-analog preset.
    Demo {
        #[command(flatten)]
        out: OutArgs,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn out_dir(out: &OutArgs, cfg_dir: Option<&Path>, name: &str) -> Result<PathBuf, Fail> {
    let dir = out
        .out
        .clone()
        .or_else(|| cfg_dir.map(Path::to_path_buf))
        .unwrap_or_else(|| Path::new("runs").join(name));
    std::fs::create_dir_all(&dir)
        .map_err(|e| Fail::phase(format!("output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

fn exp_dir(out: &OutArgs, cfg: &ExperimentConfig) -> Result<PathBuf, Fail> {
    out_dir(out, cfg.output_dir.as_deref(), &cfg.name)
}

fn load_ckpt(path: &Path) -> Result<ConditionalGenerator, Fail> {
    load_generator(path).map_err(|e| Fail::config(format!("{}: {e}", path.display())))
}

/// Inserts `key` into `dir/report.json`, creating a report skeleton if needed.
fn merge_report(
    dir: &Path,
    cfg: Option<&ExperimentConfig>,
    key: &str,
    value: serde_json::Value,
) -> Result<(), Fail> {
    let path = dir.join("report.json");
    let mut report = match std::fs::read_to_string(&path) {
        Ok(text) => match serde_json::from_str::<serde_json::Value>(&text) {
            Ok(serde_json::Value::Object(m)) => m,
            _ => {
                return Err(Fail::phase(format!(
                    "{} is not a JSON object",
                    path.display()
                )))
            }
        },
        Err(_) => {
            let mut m = serde_json::Map::new();
            m.insert("schema".into(), REPORT_SCHEMA.into());
            m.insert("tool_version".into(), env!("CARGO_PKG_VERSION").into());
            m.insert(
                "notices".into(),
                SUBSTITUTION_NOTICES
                    .iter()
                    .map(|s| serde_json::Value::from(*s))
                    .collect(),
            );
            m
        }
    };
    if let Some(cfg) = cfg {
        report.insert(
            "config".into(),
            serde_json::to_value(cfg).map_err(|e| Fail::phase(e.to_string()))?,
        );
    }
    report.insert(key.into(), value);
    let text = jsonfmt::to_string_pretty(&report).phase()?;
    std::fs::write(&path, text).map_err(|e| Fail::phase(format!("{}: {e}", path.display())))
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<serde_json::Value, Fail> {
    serde_json::to_value(v).map_err(|e| Fail::phase(e.to_string()))
}

fn gen_data(cfg: &ConfigArgs, out: &OutArgs, n: usize) -> Result<(), Fail> {
    let cfg = cfg.load()?;
    let task = cfg.task().config()?;
    let dir = exp_dir(out, &cfg)?;
    let mut r = rng(phase_seed(cfg.seed, "data"));
    let d = task.output_dim();
    let mut rows = Vec::new();
    for c in task.conditionals() {
        let x = task.sample(&c, n, &mut r).phase()?;
        for i in 0..n {
            let mut row = vec![task.describe(&c)];
            row.extend((0..d).map(|j| fmt_f64(x.get(i, j))));
            rows.push(row);
        }
    }
    let names: Vec<String> = std::iter::once("conditional".to_string())
        .chain((0..d).map(|j| format!("x{j}")))
        .collect();
    let header: Vec<&str> = names.iter().map(String::as_str).collect();
    let path = dir.join("data.csv");
    write_csv(&path, &header, &rows).phase()?;
    println!("wrote {} samples to {}", rows.len(), path.display());
    Ok(())
}

fn train(cfg: &ConfigArgs, out: &OutArgs) -> Result<(), Fail> {
    let cfg = cfg.load()?;
    let task = cfg.task().config()?;
    let dir = exp_dir(out, &cfg)?;
    let arch = cfg.model.arch(&task).config()?;
    let seed = phase_seed(cfg.seed, "model");
    let mut g = ConditionalGenerator::build(&arch, seed).phase()?;
    let tr = train_generator(&mut g, &task, &cfg.train).phase()?;
    let path = dir.join("teacher.ckpt.json");
    save_generator(&g, seed, cfg.train.steps, &path).phase()?;
    write_csv(
        &dir.join("train_loss.csv"),
        &LOSS_HEADER,
        &loss_rows(&tr.trace),
    )
    .phase()?;
    let summary = TeacherSummary {
        initial_loss: tr.trace.first().map_or(f64::NAN, |t| t.1),
        final_loss: tr.trace.last().map_or(f64::NAN, |t| t.1),
        digest: hex_digest(param_digest(&g, "")),
    };
    merge_report(&dir, Some(&cfg), "teacher", to_value(&summary)?)?;
    println!(
        "trained {} steps, loss {:.4} -> {:.4}; checkpoint {}",
        cfg.train.steps,
        summary.initial_loss,
        summary.final_loss,
        path.display()
    );
    Ok(())
}

fn read_plan(path: &Path) -> Result<LabelRedactionPlan, Fail> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Fail::config(format!("{}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| Fail::config(format!("{}: {e}", path.display())))
}

fn redact_exact(checkpoint: &Path, plan: &Path, out: &OutArgs) -> Result<(), Fail> {
    let teacher = load_ckpt(checkpoint)?;
    let plan = read_plan(plan)?;
    let dir = out_dir(out, None, "redact-exact")?;
    let (g, cert) = redact_affine_generator(&teacher, &plan).phase()?;
    let path = dir.join("redacted.ckpt.json");
    save_generator(&g, 0, 0, &path).phase()?;
    merge_report(&dir, None, "certificate", to_value(&cert)?)?;
    println!(
        "preservation error {:.3e}, projection error {:.3e}; checkpoint {}",
        cert.preservation_error,
        cert.projection_error,
        path.display()
    );
    Ok(())
}

fn distill(cfg: &ConfigArgs, checkpoint: &Path, out: &OutArgs) -> Result<(), Fail> {
    let cfg = cfg.load()?;
    let dc = cfg
        .distill
        .clone()
        .ok_or_else(|| Fail::config("the config has no [distill] section"))?;
    let task = cfg.task().config()?;
    let spec = cfg.spec(&task).config()?;
    let teacher = load_ckpt(checkpoint)?;
    dc.validate(teacher.topology()).config()?;
    let dir = exp_dir(out, &cfg)?;
    let (g, r) = distill_any(&teacher, &spec, &task, &dc).phase()?;
    let path = dir.join("distilled.ckpt.json");
    save_generator(&g, phase_seed(cfg.seed, "model"), dc.steps, &path).phase()?;
    write_csv(
        &dir.join("distill_loss.csv"),
        &LOSS_HEADER,
        &loss_rows(&r.trace),
    )
    .phase()?;
    let mut summary = to_value(&summarize_distill(&r, dc.steps))?;
    summary["frozen_intact"] = frozen_intact(&teacher, &g).into();
    summary["digest"] = hex_digest(param_digest(&g, "")).into();
    merge_report(&dir, Some(&cfg), "distill", summary)?;
    for c in &r.conditioners {
        println!(
            "conditioner {}: loss {:.4e} -> {:.4e}",
            c.index, c.initial_loss, c.final_loss
        );
    }
    println!("checkpoint {}", path.display());
    Ok(())
}

fn eval(cfg: &ConfigArgs, student: &Path, teacher: &Path, out: &OutArgs) -> Result<(), Fail> {
    let cfg = cfg.load()?;
    let task = cfg.task().config()?;
    let spec = cfg.spec(&task).config()?;
    let (s, t) = (load_ckpt(student)?, load_ckpt(teacher)?);
    let dir = exp_dir(out, &cfg)?;
    let e = &cfg.eval;
    let m = evaluate(&s, &t, &task, &spec, e).phase()?;
    let trials = faithfulness_trials(&s, &t, &task, &spec, e.trials, e.seed).phase()?;
    write_csv(
        &dir.join("faithfulness.csv"),
        &FAITHFULNESS_HEADER,
        &faithfulness_rows(&task, &trials),
    )
    .phase()?;
    write_csv(
        &dir.join("quality.csv"),
        &QUALITY_HEADER,
        &quality_rows(&m.quality),
    )
    .phase()?;
    merge_report(&dir, Some(&cfg), "metrics", to_value(&m)?)?;
    println!(
        "faithfulness {:.3}  r_precision {:.3}  c_vs_chat {:.3}  quality {:.4} (teacher {:.4})",
        m.faithfulness, m.r_precision, m.c_vs_chat, m.quality_mean, m.teacher_quality_mean
    );
    Ok(())
}

fn attack(cfg: &ConfigArgs, checkpoint: &Path, out: &OutArgs) -> Result<(), Fail> {
    let cfg = cfg.load()?;
    let a = cfg
        .attack
        .clone()
        .ok_or_else(|| Fail::config("the config has no [attack] section"))?;
    let task = cfg.task().config()?;
    let spec = cfg.spec(&task).config()?;
    let g = load_ckpt(checkpoint)?;
    let dir = exp_dir(out, &cfg)?;
    let s = attack_success_rate(&g, &task, &spec, &a.config(), a.attacks).phase()?;
    write_csv(
        &dir.join("attack_traces.csv"),
        &ATTACK_HEADER,
        &attack_rows("model", &s),
    )
    .phase()?;
    let mut value = to_value(&attack_outcome(&s))?;
    value["notice"] = ATTACK_NOTICE.into();
    merge_report(&dir, Some(&cfg), "attack", value)?;
    println!(
        "attack success rate {:.3} over {} attacks",
        s.rate, s.attacks
    );
    Ok(())
}

fn print_summary(r: &RunReport) {
    println!("experiment {} (seed {})", r.config.name, r.config.seed);
    if let Some(t) = &r.teacher {
        println!(
            "  teacher loss {:.4} -> {:.4}",
            t.initial_loss, t.final_loss
        );
    }
    if let Some(a) = &r.teacher_attack {
        println!("  teacher attack success {:.3}", a.rate);
    }
    for v in &r.variants {
        let mut line = format!("  {:<24}", v.name);
        if let Some(c) = &v.certificate {
            line += &format!(" cert {:.1e}", c.max_error());
        }
        if let Some(m) = &v.metrics {
            line += &format!(
                " faith {:.3} rprec {:.3} cvc {:.3} mmd2 {:.4}/{:.4}",
                m.faithfulness, m.r_precision, m.c_vs_chat, m.quality_mean, m.teacher_quality_mean
            );
        }
        if let Some(a) = &v.attack {
            line += &format!(" attack {:.3}", a.rate);
        }
        if !v.frozen_intact {
            line += " FROZEN-CHANGED";
        }
        println!("{line}");
    }
    if let Some(f) = &r.failure {
        println!("  FAILED in {}: {}", f.phase, f.message);
    }
}

fn run(cfg: ExperimentConfig, out: &OutArgs, threads: usize) -> Result<(), Fail> {
    let dir = exp_dir(out, &cfg)?;
    let r = run_experiment_with(&cfg, Some(&dir), threads).phase()?;
    print_summary(&r);
    println!("report {}", dir.join("report.json").display());
    match r.failure {
        Some(f) => Err(Fail::phase(format!("{}: {}", f.phase, f.message))),
        None => Ok(()),
    }
}

fn report(path: &Path, verify: bool, threads: usize) -> Result<(), Fail> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Fail::config(format!("{}: {e}", path.display())))?;
    let r = match RunReport::from_json(&text) {
        Ok(r) => r,
        Err(e) => {
            let v: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Fail::config(format!("{}: {e}", path.display())))?;
            let keys: Vec<&str> = v
                .as_object()
                .map(|m| m.keys().map(String::as_str).collect())
                .unwrap_or_default();
            if verify {
                return Err(Fail::config(format!(
                    "only full run reports can be verified: {e}"
                )));
            }
            println!("partial report with sections: {}", keys.join(", "));
            return Ok(());
        }
    };
    print_summary(&r);
    if verify {
        let again = run_experiment_with(&r.config, None, threads).phase()?;
        if again.without_timing() != r.without_timing() {
            return Err(Fail::phase(
                "re-running the echoed config gave a different report",
            ));
        }
        println!("reproduced: identical");
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Fail> {
    let threads = cli.threads.max(1);
    match cli.command {
        Command::GenData { cfg, out, n } => gen_data(&cfg, &out, n),
        Command::Train { cfg, out } => train(&cfg, &out),
        Command::RedactExact {
            checkpoint,
            plan,
            out,
        } => redact_exact(&checkpoint, &plan, &out),
        Command::Distill {
            cfg,
            checkpoint,
            out,
        } => distill(&cfg, &checkpoint, &out),
        Command::Eval {
            cfg,
            student,
            teacher,
            out,
        } => eval(&cfg, &student, &teacher, &out),
        Command::Attack {
            cfg,
            checkpoint,
            out,
        } => attack(&cfg, &checkpoint, &out),
        Command::Report { path, verify } => report(&path, verify, threads),
        Command::Run {
            cfg,
            out,
            print_config,
        } => {
            let c = cfg.load()?;
            if print_config {
                print!("{}", c.to_toml_string().config()?);
                return Ok(());
            }
            run(c, &out, threads)
        }
        Command::Demo { out, set } => {
            let cfg = ConfigArgs {
                set,
                ..ConfigArgs::with_preset("mnist-analog")
            };
            run(cfg.load()?, &out, threads)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("redact: {f}");
            ExitCode::from(f.code())
        }
    }
}
