use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{phase_seed, ExperimentConfig, Method};
use super::plot::plot_panels;
use crate::attack::{attack_success_rate, AttackSummary};
use crate::closedform::{redact_affine_generator, RedactionCertificate};
use crate::error::{Error, Result};
use crate::jsonfmt::{self, fmt_f64, write_csv};
use crate::metrics::{
    evaluate, faithfulness_trials, quality_mmd, EvalReport, FaithfulnessTrial, Sampler,
    SUBSTITUTION_NOTICES,
};
use crate::nn::{param_digest, Checkpoint, Metadata, Parameterized};
use crate::redistill::{
    distill_conditioner, distill_parallel, distill_sequential, DistillConfig, DistillReport,
    RedactionSpec, Schedule,
};
use crate::toy::{train_generator, ConditionalGenerator, SyntheticTask, Topology};

pub const REPORT_SCHEMA: &str = "1";

pub const ATTACK_NOTICE: &str =
    "attack success is judged on the best conditional found during the search, not on the final one";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockLoss {
    pub index: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub steps: usize,
    pub final_batch_loss: Option<f64>,
    pub conditioners: Vec<BlockLoss>,
    pub weights: Vec<f64>,
    pub lambdas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub rate: f64,
    pub attacks: usize,
    pub successes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub name: String,
    pub method: Method,
    #[serde(default)]
    pub schedule: Option<Schedule>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub certificate: Option<RedactionCertificate>,
    #[serde(default)]
    pub distill: Option<DistillSummary>,
    /// Main network and every frozen parameter equal the teacher's bit for bit.
    pub frozen_intact: bool,
    pub digest: String,
    #[serde(default)]
    pub metrics: Option<EvalReport>,
    #[serde(default)]
    pub attack: Option<AttackOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub phase: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub tool_version: String,
    pub config: ExperimentConfig,
    #[serde(default)]
    pub failure: Option<Failure>,
    #[serde(default)]
    pub teacher: Option<TeacherSummary>,
    #[serde(default)]
    pub teacher_attack: Option<AttackOutcome>,
    pub variants: Vec<VariantReport>,
    pub notices: Vec<String>,
    /// Wall-clock seconds per phase. Not reproducible.
    pub timing: BTreeMap<String, f64>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        jsonfmt::to_string_pretty(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.schema != REPORT_SCHEMA {
            return Err(Error::Config {
                field: "schema".into(),
                msg: format!("unsupported report schema {:?}", r.schema),
            });
        }
        Ok(r)
    }

    /// The report without wall-clock fields, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self {
            timing: BTreeMap::new(),
            ..self.clone()
        }
    }

    pub fn ok(&self) -> bool {
        self.failure.is_none()
    }
}

pub fn hex_digest(x: u64) -> String {
    format!("{x:016x}")
}

/// True when every `main.*` parameter and every parameter frozen in
/// `student` equals the teacher's value.
pub fn frozen_intact(teacher: &ConditionalGenerator, student: &ConditionalGenerator) -> bool {
    let t = teacher.param_values();
    let frozen = student.frozen_names();
    student.param_values().iter().all(|(name, v)| {
        if !(name.starts_with(crate::toy::MAIN_PREFIX) || frozen.contains(name)) {
            return true;
        }
        t.get(name).is_some_and(|tv| {
            tv.shape() == v.shape()
                && tv
                    .data()
                    .iter()
                    .zip(v.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits())
        })
    })
}

/// Distills with the method matching the generator topology.
pub fn distill_any(
    teacher: &ConditionalGenerator,
    spec: &RedactionSpec,
    task: &SyntheticTask,
    cfg: &DistillConfig,
) -> Result<(ConditionalGenerator, DistillReport)> {
    let conds = task.conditionals();
    match teacher.topology() {
        Topology::Single => distill_conditioner(teacher, spec, &conds, cfg),
        Topology::Cascaded => distill_sequential(teacher, spec, &conds, cfg),
        Topology::Residual => distill_parallel(teacher, spec, &conds, cfg),
    }
}

pub fn summarize_distill(r: &DistillReport, steps: usize) -> DistillSummary {
    DistillSummary {
        steps,
        final_batch_loss: r.trace.last().map(|t| t.1),
        conditioners: r
            .conditioners
            .iter()
            .map(|c| BlockLoss {
                index: c.index,
                initial_loss: c.initial_loss,
                final_loss: c.final_loss,
            })
            .collect(),
        weights: r.weights.clone(),
        lambdas: r.lambdas.clone(),
    }
}

pub fn attack_outcome(s: &AttackSummary) -> AttackOutcome {
    AttackOutcome {
        rate: s.rate,
        attacks: s.attacks,
        successes: s.results.iter().filter(|a| a.success).count(),
    }
}

/// Maps `f` over `items` on up to `threads` scoped threads, keeping order.
/// Returns the first error in item order.
pub fn par_map<T: Sync, U: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<U> + Sync,
) -> Result<Vec<U>> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Vec<Result<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    parts.into_iter().flatten().collect()
}

pub const LOSS_HEADER: [&str; 2] = ["step", "loss"];
pub const FAITHFULNESS_HEADER: [&str; 5] = [
    "trial",
    "conditional",
    "dist_to_reference",
    "dist_to_original",
    "success",
];
pub const QUALITY_HEADER: [&str; 2] = ["conditional", "mmd2"];
pub const ATTACK_HEADER: [&str; 5] = ["model", "attack", "iteration", "corr", "best_corr"];

pub fn loss_rows(trace: &[(usize, f64)]) -> Vec<Vec<String>> {
    trace
        .iter()
        .map(|(s, l)| vec![s.to_string(), fmt_f64(*l)])
        .collect()
}

pub fn faithfulness_rows(task: &SyntheticTask, trials: &[FaithfulnessTrial]) -> Vec<Vec<String>> {
    trials
        .iter()
        .enumerate()
        .map(|(i, t)| {
            vec![
                i.to_string(),
                task.describe(&t.conditional),
                fmt_f64(t.to_reference),
                fmt_f64(t.to_original),
                t.success.to_string(),
            ]
        })
        .collect()
}

pub fn quality_rows(quality: &BTreeMap<String, f64>) -> Vec<Vec<String>> {
    quality
        .iter()
        .map(|(c, q)| vec![c.clone(), fmt_f64(*q)])
        .collect()
}

pub fn attack_rows(model: &str, s: &AttackSummary) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (k, r) in s.results.iter().enumerate() {
        for (it, (t, b)) in r.trace.iter().zip(&r.best_trace).enumerate() {
            rows.push(vec![
                model.to_string(),
                k.to_string(),
                it.to_string(),
                fmt_f64(*t),
                fmt_f64(*b),
            ]);
        }
    }
    rows
}

struct Variant {
    report: VariantReport,
    model: ConditionalGenerator,
    trace: Vec<(usize, f64)>,
}

struct Writer {
    dir: Option<PathBuf>,
}

impl Writer {
    fn path(&self, file: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(file))
    }

    fn csv(&self, file: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        match self.path(file) {
            Some(p) => write_csv(&p, header, rows),
            None => Ok(()),
        }
    }

    fn text(&self, file: &str, body: &str) -> Result<()> {
        if let Some(p) = self.path(file) {
            std::fs::write(p, body)?;
        }
        Ok(())
    }

    fn checkpoint(
        &self,
        file: &str,
        g: &ConditionalGenerator,
        seed: u64,
        step: usize,
    ) -> Result<()> {
        if let Some(p) = self.path(file) {
            save_generator(g, seed, step, &p)?;
        }
        Ok(())
    }
}

/// Writes a generator checkpoint with its architecture.
pub fn save_generator(g: &ConditionalGenerator, seed: u64, step: usize, path: &Path) -> Result<()> {
    let meta = Metadata {
        seed,
        topology: g.topology().tag().into(),
        step,
    };
    Checkpoint::capture(g, meta, serde_json::to_value(&g.arch)?).save(path)
}

/// Rebuilds a generator from a checkpoint written by [`save_generator`].
pub fn load_generator(path: &Path) -> Result<ConditionalGenerator> {
    let ck = Checkpoint::load(path)?;
    let arch = serde_json::from_value(ck.architecture.clone())?;
    let mut g = ConditionalGenerator::build(&arch, ck.metadata.seed)?;
    ck.restore_into(&mut g)?;
    Ok(g)
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    task: SyntheticTask,
    spec: RedactionSpec,
    out: Writer,
    threads: usize,
    report: RunReport,
}

impl Runner<'_> {
    fn timed<T>(&mut self, phase: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let r = f(self);
        *self.report.timing.entry(phase.into()).or_default() += t.elapsed().as_secs_f64();
        r.inspect_err(|e| {
            self.report.failure = Some(Failure {
                phase: phase.into(),
                message: e.to_string(),
            });
        })
    }

    fn train(&mut self) -> Result<ConditionalGenerator> {
        let arch = self.cfg.model.arch(&self.task)?;
        let model_seed = phase_seed(self.cfg.seed, "model");
        let mut g = ConditionalGenerator::build(&arch, model_seed)?;
        let tr = train_generator(&mut g, &self.task, &self.cfg.train)?;
        self.out
            .checkpoint("teacher.ckpt.json", &g, model_seed, self.cfg.train.steps)?;
        self.out
            .csv("train_loss.csv", &LOSS_HEADER, &loss_rows(&tr.trace))?;
        self.report.teacher = Some(TeacherSummary {
            initial_loss: tr.trace.first().map_or(f64::NAN, |t| t.1),
            final_loss: tr.trace.last().map_or(f64::NAN, |t| t.1),
            digest: hex_digest(param_digest(&g, "")),
        });
        Ok(g)
    }

    fn redact(&mut self, teacher: &ConditionalGenerator) -> Result<Vec<Variant>> {
        let mut out = Vec::new();
        match self.cfg.redaction.method {
            Method::ClosedForm => {
                let plan = self.cfg.plan(&self.task)?;
                let (model, cert) = redact_affine_generator(teacher, &plan)?;
                out.push(Variant {
                    report: VariantReport {
                        name: "closed-form".into(),
                        method: Method::ClosedForm,
                        schedule: None,
                        lambda: None,
                        certificate: Some(cert),
                        distill: None,
                        frozen_intact: frozen_intact(teacher, &model),
                        digest: hex_digest(param_digest(&model, "")),
                        metrics: None,
                        attack: None,
                    },
                    model,
                    trace: Vec::new(),
                });
            }
            Method::Distill => {
                let base = self
                    .cfg
                    .distill
                    .clone()
                    .ok_or_else(|| Error::config("distill", "missing"))?;
                let mut runs: Vec<(String, DistillConfig)> = Vec::new();
                if self.cfg.sweep_schedules.is_empty() {
                    runs.push(("distilled".into(), base.clone()));
                } else {
                    for s in &self.cfg.sweep_schedules {
                        runs.push((
                            format!("distilled-{}", s.tag()),
                            DistillConfig {
                                schedule: *s,
                                ..base.clone()
                            },
                        ));
                    }
                }
                if self.cfg.attack.as_ref().is_some_and(|a| a.ablation) {
                    runs.push((
                        "ablation-lambda0".into(),
                        DistillConfig {
                            lambda: 0.0,
                            anneal: None,
                            ..base.clone()
                        },
                    ));
                }
                let (spec, task) = (&self.spec, &self.task);
                let trained = par_map(&runs, self.threads, |(_, dc)| {
                    distill_any(teacher, spec, task, dc)
                })?;
                for ((name, dc), (model, r)) in runs.into_iter().zip(trained) {
                    out.push(Variant {
                        report: VariantReport {
                            name,
                            method: Method::Distill,
                            schedule: (teacher.topology() == Topology::Residual)
                                .then_some(dc.schedule),
                            lambda: Some(dc.lambda),
                            certificate: None,
                            distill: Some(summarize_distill(&r, dc.steps)),
                            frozen_intact: frozen_intact(teacher, &model),
                            digest: hex_digest(param_digest(&model, "")),
                            metrics: None,
                            attack: None,
                        },
                        model,
                        trace: r.trace,
                    });
                }
            }
        }
        for v in &out {
            let file = format!("{}.ckpt.json", v.report.name);
            self.out.checkpoint(
                &file,
                &v.model,
                phase_seed(self.cfg.seed, "model"),
                v.trace.len(),
            )?;
            self.out.csv(
                &format!("distill_loss_{}.csv", v.report.name),
                &LOSS_HEADER,
                &loss_rows(&v.trace),
            )?;
        }
        Ok(out)
    }

    fn evaluate(&mut self, teacher: &ConditionalGenerator, variants: &mut [Variant]) -> Result<()> {
        let e = &self.cfg.eval;
        let (spec, task) = (&self.spec, &self.task);
        let results = par_map(variants, self.threads, |v| {
            let m: EvalReport = evaluate(&v.model, teacher, task, spec, e)?;
            let trials = faithfulness_trials(&v.model, teacher, task, spec, e.trials, e.seed)?;
            Ok((m, trials))
        })?;
        for (v, (m, trials)) in variants.iter_mut().zip(results) {
            let name = &v.report.name;
            self.out.csv(
                &format!("faithfulness_{name}.csv"),
                &FAITHFULNESS_HEADER,
                &faithfulness_rows(&self.task, &trials),
            )?;
            self.out.csv(
                &format!("quality_{name}.csv"),
                &QUALITY_HEADER,
                &quality_rows(&m.quality),
            )?;
            v.report.metrics = Some(m);
        }
        let (valid, _) = self.spec.partition(&self.task.conditionals());
        let q = quality_mmd(teacher, &self.task, &valid, e.quality_samples, e.seed)?;
        let q: BTreeMap<String, f64> = q.iter().map(|(c, v)| (self.task.describe(c), *v)).collect();
        self.out
            .csv("quality_teacher.csv", &QUALITY_HEADER, &quality_rows(&q))
    }

    fn attack(&mut self, teacher: &ConditionalGenerator, variants: &mut [Variant]) -> Result<()> {
        let Some(a) = self.cfg.attack.clone() else {
            return Ok(());
        };
        let cfg = a.config();
        let mut models: Vec<(&str, &ConditionalGenerator)> = vec![("teacher", teacher)];
        models.extend(variants.iter().map(|v| (v.report.name.as_str(), &v.model)));
        let (spec, task) = (&self.spec, &self.task);
        let summaries = par_map(&models, self.threads, |(_, m)| {
            attack_success_rate(*m, task, spec, &cfg, a.attacks)
        })?;
        let rows: Vec<Vec<String>> = models
            .iter()
            .zip(&summaries)
            .flat_map(|((name, _), s)| attack_rows(name, s))
            .collect();
        self.report.teacher_attack = Some(attack_outcome(&summaries[0]));
        for (v, s) in variants.iter_mut().zip(&summaries[1..]) {
            v.report.attack = Some(attack_outcome(s));
        }
        self.report.notices.push(ATTACK_NOTICE.into());
        self.out.csv("attack_traces.csv", &ATTACK_HEADER, &rows)
    }

    fn plot(&mut self, teacher: &ConditionalGenerator, variants: &[Variant]) -> Result<()> {
        if !self.cfg.plot {
            return Ok(());
        }
        let mut panels: Vec<(&str, &dyn Sampler)> = vec![("teacher", teacher)];
        for v in variants {
            panels.push((&v.report.name, &v.model));
        }
        let svg = plot_panels(
            &panels,
            &self.task,
            &self.task.conditionals(),
            40,
            phase_seed(self.cfg.seed, "plot"),
        )?;
        self.out.text("samples.svg", &svg)
    }

    fn phases(&mut self) -> Result<()> {
        let teacher = self.timed("train", |r| r.train())?;
        let mut variants = self.timed("redact", |r| r.redact(&teacher))?;
        let result = (|| {
            self.timed("eval", |r| r.evaluate(&teacher, &mut variants))?;
            self.timed("attack", |r| r.attack(&teacher, &mut variants))?;
            self.timed("plot", |r| r.plot(&teacher, &variants))
        })();
        self.report.variants = variants.into_iter().map(|v| v.report).collect();
        result
    }
}

/// Runs every phase of `cfg`. Config errors are returned as `Err`; a failing
/// phase yields a partial report with `failure` set. When `out` is given,
/// checkpoints, CSV tables, the plot and `report.json` are written there.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunReport> {
    run_experiment_with(cfg, out, 1)
}

/// [`run_experiment`] with independent variants spread over `threads`
/// threads. The report does not depend on `threads`.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    threads: usize,
) -> Result<RunReport> {
    cfg.validate()?;
    let task = cfg.task()?;
    let spec = cfg.spec(&task)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let mut runner = Runner {
        cfg,
        task,
        spec,
        out: Writer {
            dir: out.map(Path::to_path_buf),
        },
        threads,
        report: RunReport {
            schema: REPORT_SCHEMA.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: cfg.clone(),
            failure: None,
            teacher: None,
            teacher_attack: None,
            variants: Vec::new(),
            notices: SUBSTITUTION_NOTICES.iter().map(|s| s.to_string()).collect(),
            timing: BTreeMap::new(),
        },
    };
    let _ = runner.phases();
    let report = runner.report;
    runner.out.text("report.json", &report.to_json()?)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::preset;

    fn tiny_closed_form() -> ExperimentConfig {
        let mut cfg = preset("mnist-analog").unwrap();
        cfg.train.steps = 20;
        cfg.eval.trials = 40;
        cfg.eval.quality_samples = 10;
        cfg.attack.as_mut().unwrap().attacks = 4;
        cfg
    }

    #[test]
    fn closed_form_run_writes_everything() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_closed_form();
        let r = run_experiment(&cfg, Some(dir.path())).unwrap();
        assert!(r.ok(), "{:?}", r.failure);
        let v = &r.variants[0];
        assert!(v.certificate.unwrap().max_error() <= 1e-9);
        assert_eq!(v.metrics.as_ref().unwrap().faithfulness, 1.0);
        assert!(v.frozen_intact);
        for f in [
            "report.json",
            "teacher.ckpt.json",
            "closed-form.ckpt.json",
            "train_loss.csv",
            "faithfulness_closed-form.csv",
            "quality_closed-form.csv",
            "quality_teacher.csv",
            "attack_traces.csv",
            "samples.svg",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let csv = std::fs::read_to_string(dir.path().join("faithfulness_closed-form.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 40);
        let back =
            RunReport::from_json(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
                .unwrap();
        assert_eq!(back.without_timing(), r.without_timing());
        let student = load_generator(&dir.path().join("closed-form.ckpt.json")).unwrap();
        assert_eq!(hex_digest(param_digest(&student, "")), v.digest);
    }

    #[test]
    fn thread_count_does_not_change_the_report() {
        let mut cfg = preset("residual-voice").unwrap();
        cfg.train.steps = 10;
        cfg.distill.as_mut().unwrap().steps = 10;
        cfg.eval.trials = 20;
        cfg.eval.mismatches = 5;
        cfg.eval.quality_samples = 8;
        cfg.plot = false;
        let a = run_experiment_with(&cfg, None, 1).unwrap();
        let b = run_experiment_with(&cfg, None, 3).unwrap();
        assert!(a.ok(), "{:?}", a.failure);
        assert_eq!(a.variants.len(), Schedule::ALL.len());
        assert_eq!(a.without_timing(), b.without_timing());
        assert!(a.variants.iter().all(|v| v.frozen_intact));
    }

    #[test]
    fn par_map_keeps_order_and_reports_the_first_error() {
        let items: Vec<usize> = (0..10).collect();
        assert_eq!(
            par_map(&items, 4, |x| Ok(x * 2)).unwrap(),
            (0..10).map(|x| x * 2).collect::<Vec<_>>()
        );
        let e = par_map(&items, 3, |&x| {
            if x % 4 == 3 {
                Err(Error::EmptyBatch(if x == 3 { "first" } else { "later" }))
            } else {
                Ok(x)
            }
        });
        assert!(matches!(e, Err(Error::EmptyBatch("first"))));
    }

    #[test]
    fn phase_failure_gives_a_partial_report() {
        let mut cfg = tiny_closed_form();
        cfg.train.lr = 1e300;
        let r = run_experiment(&cfg, None).unwrap();
        let f = r.failure.expect("training must fail");
        assert_eq!(f.phase, "train");
        assert!(r.variants.is_empty());
    }

    #[test]
    fn config_errors_are_errors() {
        let mut cfg = tiny_closed_form();
        cfg.eval.trials = 0;
        assert!(matches!(
            run_experiment(&cfg, None),
            Err(Error::Config { .. })
        ));
    }
}
