use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{loss_terms, Metric};
use super::schedule::{lambda_at, layer_schedules, Schedule};
use super::spec::RedactionSpec;
use crate::conditional::Conditional;
use crate::error::{Error, Result};
use crate::nn::{Adam, CondBatch, Conditioner, ConditionerSpec, Ctx, Optimizer, Sgd};
use crate::rng::{derive_seed, rng, SeededRng};
use crate::tensor::{NodeId, Tensor};
use crate::toy::{cond_prefix, ConditionalGenerator, Topology};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudentInit {
    /// Start from a copy of the teacher's conditioner.
    Teacher,
    /// Start from freshly initialized weights.
    Fresh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anneal {
    pub min: f64,
    pub max: f64,
}

fn yes() -> bool {
    true
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Sgd
}

fn default_init() -> StudentInit {
    StudentInit::Teacher
}

fn default_schedule() -> Schedule {
    Schedule::Uniform
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub lambda: f64,
    #[serde(default)]
    pub anneal: Option<Anneal>,
    pub metric: Metric,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub beta: f64,
    /// Dilation cycle `n'`; defaults to the generator's own cycle.
    #[serde(default)]
    pub cycle: Option<usize>,
    pub steps: usize,
    /// Conditionals drawn from each of the valid and redacted sets per step.
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "yes")]
    pub freeze_variance: bool,
    #[serde(default = "yes")]
    pub freeze_upsample: bool,
    #[serde(default = "default_init")]
    pub init: StudentInit,
    /// Hidden width of a zero-initialized capacity prefix for the first
    /// conditioner of a cascaded generator.
    #[serde(default)]
    pub capacity_prefix: Option<usize>,
    /// Replace each block conditioner's output layer by a gated rewriter.
    #[serde(default)]
    pub rewriter: bool,
    /// Latents per conditional when evaluating stage-2 losses.
    #[serde(default = "default_eval_latents")]
    pub eval_latents: usize,
}

fn default_eval_latents() -> usize {
    8
}

impl DistillConfig {
    pub fn new(metric: Metric, steps: usize, batch: usize, lr: f64, seed: u64) -> Self {
        Self {
            lambda: 1.0,
            anneal: None,
            metric,
            schedule: Schedule::Uniform,
            alpha: 0.0,
            beta: 0.0,
            cycle: None,
            steps,
            batch,
            lr,
            seed,
            optimizer: OptimizerKind::Sgd,
            freeze_variance: true,
            freeze_upsample: true,
            init: StudentInit::Teacher,
            capacity_prefix: None,
            rewriter: false,
            eval_latents: default_eval_latents(),
        }
    }

    pub fn validate(&self, topology: Topology) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(
                "distill.lambda",
                "must be finite and nonnegative",
            ));
        }
        if let Some(a) = self.anneal {
            if !(a.min >= 0.0 && a.min <= a.max && a.max.is_finite()) {
                return Err(Error::config("distill.anneal", "need 0 <= min <= max"));
            }
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::config(
                "distill.alpha",
                "alpha and beta must be nonnegative",
            ));
        }
        if self.schedule != Schedule::Uniform && topology != Topology::Residual {
            return Err(Error::config(
                "distill.schedule",
                "non-uniform schedules need a residual generator",
            ));
        }
        if self.batch == 0 {
            return Err(Error::config("distill.batch", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("distill.lr", "must be positive"));
        }
        if self.eval_latents == 0 {
            return Err(Error::config("distill.eval_latents", "must be positive"));
        }
        Ok(())
    }

    fn lambda_at_step(&self, step: usize) -> Result<f64> {
        match self.anneal {
            Some(a) => lambda_at(step, self.steps.max(1), a.min, a.max),
            None => Ok(self.lambda),
        }
    }

    fn optimizer(&self) -> Box<dyn Optimizer> {
        match self.optimizer {
            OptimizerKind::Sgd => Box::new(Sgd { lr: self.lr }),
            OptimizerKind::Adam => Box::new(Adam::new(self.lr)),
        }
    }
}

/// Loss history of one distilled conditioner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionerTrace {
    pub index: usize,
    /// Full-set loss (base lambda) before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// `(step, unweighted loss)` on the sampled batches.
    pub trace: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    /// `(step, total weighted loss)`; stages of a sequential run are
    /// concatenated.
    pub trace: Vec<(usize, f64)>,
    pub conditioners: Vec<ConditionerTrace>,
    pub weights: Vec<f64>,
    pub lambdas: Vec<f64>,
}

/// Stage-2 inputs observed during sequential distillation.
#[derive(Clone, Debug)]
pub struct Stage2Probe {
    pub step: usize,
    pub conds: Vec<Conditional>,
    pub latents: Tensor,
    /// Stage-1 outputs fed to the student's second conditioner.
    pub aux: Tensor,
}

fn draw(list: &[Conditional], n: usize, r: &mut SeededRng) -> Vec<Conditional> {
    (0..n)
        .map(|_| list[r.random_range(0..list.len())].clone())
        .collect()
}

/// Teacher conditioner, student generator and the sets it is trained on.
struct Setup {
    student: ConditionalGenerator,
    valid: Vec<Conditional>,
    redacted: Vec<Conditional>,
}

fn conditionals_of(g: &ConditionalGenerator) -> Result<Vec<Conditional>> {
    match &g.conditioners[0] {
        Conditioner::Affine(a) => Ok((0..a.labels()).map(Conditional::label).collect()),
        _ => Err(Error::InvalidArgument(
            "training conditionals are required for this generator".into(),
        )),
    }
}

fn prepare(
    teacher: &ConditionalGenerator,
    spec: &RedactionSpec,
    train: &[Conditional],
    cfg: &DistillConfig,
) -> Result<Setup> {
    cfg.validate(teacher.topology())?;
    let train = if train.is_empty() {
        conditionals_of(teacher)?
    } else {
        train.to_vec()
    };
    let (valid, redacted) = spec.partition(&train);
    if valid.is_empty() {
        return Err(Error::EmptyBatch("valid conditionals"));
    }
    let mut student = teacher.clone();
    if cfg.init == StudentInit::Fresh {
        for (i, spec_i) in teacher.arch.conditioners.iter().enumerate() {
            let mut r = rng(derive_seed(cfg.seed, &format!("student/{i}")));
            student.conditioners[i] =
                Conditioner::build(spec_i, &format!("cond{i}"), teacher.arch.embed_dim, &mut r)?;
        }
    }
    let mut r = rng(derive_seed(cfg.seed, "student/capacity"));
    if let Some(h) = cfg.capacity_prefix {
        if teacher.topology() != Topology::Cascaded {
            return Err(Error::config(
                "distill.capacity_prefix",
                "only cascaded generators take a capacity prefix",
            ));
        }
        student.conditioners[0].attach_prefix(h, &mut r)?;
        if let ConditionerSpec::Seq { prefix_hidden, .. } = &mut student.arch.conditioners[0] {
            *prefix_hidden = Some(h);
        }
    }
    if cfg.rewriter {
        if teacher.topology() != Topology::Residual {
            return Err(Error::config(
                "distill.rewriter",
                "only residual generators take rewriters",
            ));
        }
        for (i, h) in student.conditioners.iter_mut().enumerate() {
            h.attach_rewriter(&mut r)?;
            if let ConditionerSpec::Block { rewriter, .. } = &mut student.arch.conditioners[i] {
                *rewriter = true;
            }
        }
    }
    for h in &mut student.conditioners {
        h.apply_frozen_policy(cfg.freeze_variance, cfg.freeze_upsample);
    }
    Ok(Setup {
        student,
        valid,
        redacted,
    })
}

/// Teacher targets per conditional for conditioners that ignore `z`.
struct TargetCache {
    rows: Vec<HashMap<Conditional, Vec<f64>>>,
}

impl TargetCache {
    fn new(
        teacher: &ConditionalGenerator,
        student: &ConditionalGenerator,
        idxs: &[usize],
        conds: &[Conditional],
    ) -> Result<Self> {
        let batch = teacher.encode(conds)?;
        let mut rows = Vec::new();
        for &i in idxs {
            // The teacher copy follows the student's frozen policy so that
            // both sides produce the same kind of representation.
            let mut h = teacher.conditioners[i].clone();
            if let (Conditioner::Seq(t), Conditioner::Seq(s)) = (&mut h, &student.conditioners[i]) {
                if let (Some(th), Some(sh)) = (&mut t.head, &s.head) {
                    th.freeze_variance = sh.freeze_variance;
                }
            }
            let mut ctx = Ctx::inference();
            let out = h.distill_forward(&mut ctx, &batch, None)?;
            let v = ctx.value(out);
            let map = conds
                .iter()
                .enumerate()
                .map(|(r, c)| (c.clone(), v.row(r).to_vec()))
                .collect();
            rows.push(map);
        }
        Ok(Self { rows })
    }

    fn targets(&self, slot: usize, conds: &[Conditional]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = conds
            .iter()
            .map(|c| {
                self.rows[slot]
                    .get(c)
                    .cloned()
                    .ok_or_else(|| Error::InvalidConditional(format!("no cached target for {c}")))
            })
            .collect::<Result<_>>()?;
        Tensor::from_rows(&rows)
    }
}

fn references(spec: &RedactionSpec, conds: &[Conditional]) -> Result<Vec<Conditional>> {
    conds.iter().map(|c| spec.reference(c)).collect()
}

/// Full-set loss of each static conditioner at the base lambda.
#[allow(clippy::too_many_arguments)]
fn static_full_losses(
    student: &ConditionalGenerator,
    cache: &TargetCache,
    idxs: &[usize],
    setup_valid: &[Conditional],
    setup_redacted: &[Conditional],
    spec: &RedactionSpec,
    lambdas: &[f64],
    metric: Metric,
) -> Result<Vec<f64>> {
    let vb = student.encode(setup_valid)?;
    let refs = references(spec, setup_redacted)?;
    let rb = if setup_redacted.is_empty() {
        None
    } else {
        Some(student.encode(setup_redacted)?)
    };
    let mut out = Vec::new();
    for (slot, &i) in idxs.iter().enumerate() {
        let mut ctx = Ctx::inference();
        let tv = cache.targets(slot, setup_valid)?;
        let sv = student.conditioners[i].distill_forward(&mut ctx, &vb, None)?;
        let red = match &rb {
            Some(rb) => {
                let tr = cache.targets(slot, &refs)?;
                let sr = student.conditioners[i].distill_forward(&mut ctx, rb, None)?;
                Some((sr, tr))
            }
            None => None,
        };
        let (loss, _, _) = loss_terms(
            &mut ctx,
            Some((sv, &tv)),
            red.as_ref().map(|(n, t)| (*n, t)),
            lambdas[slot],
            metric,
        )?;
        out.push(ctx.value(loss).item());
    }
    Ok(out)
}

fn schedules(
    g: &ConditionalGenerator,
    idxs: &[usize],
    cfg: &DistillConfig,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if g.topology() == Topology::Residual {
        let cycle = cfg.cycle.unwrap_or(g.arch.cycle);
        layer_schedules(idxs.len(), cycle, cfg.schedule, cfg.alpha, cfg.beta, lambda)
    } else {
        Ok((vec![1.0; idxs.len()], vec![lambda; idxs.len()]))
    }
}

/// Jointly distills the conditioners `idxs`, none of which reads `z`.
fn distill_static(
    teacher: &ConditionalGenerator,
    setup: &mut Setup,
    spec: &RedactionSpec,
    cfg: &DistillConfig,
    idxs: &[usize],
    stream: &str,
    report: &mut DistillReport,
) -> Result<()> {
    let mut all = setup.valid.clone();
    all.extend(references(spec, &setup.redacted)?);
    all.sort();
    all.dedup();
    let cache = TargetCache::new(teacher, &setup.student, idxs, &all)?;
    let (w0, l0) = schedules(teacher, idxs, cfg, cfg.lambda)?;
    let initial = static_full_losses(
        &setup.student,
        &cache,
        idxs,
        &setup.valid,
        &setup.redacted,
        spec,
        &l0,
        cfg.metric,
    )?;
    let prefixes: Vec<String> = idxs.iter().map(|&i| cond_prefix(i)).collect();
    let prefix_refs: Vec<&str> = prefixes.iter().map(String::as_str).collect();
    let mut traces: Vec<Vec<(usize, f64)>> = vec![Vec::with_capacity(cfg.steps); idxs.len()];
    let mut r = rng(derive_seed(cfg.seed, stream));
    let mut opt = cfg.optimizer();
    let offset = report.trace.len();
    for step in 0..cfg.steps {
        let lambda = cfg.lambda_at_step(step)?;
        let (w, l) = schedules(teacher, idxs, cfg, lambda)?;
        let cv = draw(&setup.valid, cfg.batch, &mut r);
        let cr = if setup.redacted.is_empty() {
            Vec::new()
        } else {
            draw(&setup.redacted, cfg.batch, &mut r)
        };
        let vb = setup.student.encode(&cv)?;
        let refs = references(spec, &cr)?;
        let rb = if cr.is_empty() {
            None
        } else {
            Some(setup.student.encode(&cr)?)
        };
        let mut ctx = Ctx::training(&prefix_refs);
        let mut total: Option<NodeId> = None;
        for (slot, &i) in idxs.iter().enumerate() {
            let tv = cache.targets(slot, &cv)?;
            let h = &setup.student.conditioners[i];
            let sv = h.distill_forward(&mut ctx, &vb, None)?;
            let red = match &rb {
                Some(rb) => Some((
                    h.distill_forward(&mut ctx, rb, None)?,
                    cache.targets(slot, &refs)?,
                )),
                None => None,
            };
            let (li, v, rv) = loss_terms(
                &mut ctx,
                Some((sv, &tv)),
                red.as_ref().map(|(n, t)| (*n, t)),
                l[slot],
                cfg.metric,
            )?;
            traces[slot].push((offset + step, v + l[slot] * rv));
            let weighted = ctx.graph.scale(li, w[slot])?;
            total = Some(match total {
                Some(t) => ctx.graph.add(t, weighted)?,
                None => weighted,
            });
        }
        let total = total.ok_or(Error::EmptyBatch("conditioners to distill"))?;
        let value = ctx.value(total).item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                msg: format!("loss {value}"),
            });
        }
        report.trace.push((offset + step, value));
        ctx.graph.backward(total)?;
        opt.step(&mut setup.student, &ctx)
            .map_err(|e| Error::Divergence {
                step,
                msg: e.to_string(),
            })?;
    }
    let fin = static_full_losses(
        &setup.student,
        &cache,
        idxs,
        &setup.valid,
        &setup.redacted,
        spec,
        &l0,
        cfg.metric,
    )?;
    for (slot, &i) in idxs.iter().enumerate() {
        report.conditioners.push(ConditionerTrace {
            index: i,
            initial_loss: initial[slot],
            final_loss: fin[slot],
            trace: std::mem::take(&mut traces[slot]),
        });
    }
    report.weights = w0;
    report.lambdas = l0;
    Ok(())
}

fn empty_report() -> DistillReport {
    DistillReport {
        trace: Vec::new(),
        conditioners: Vec::new(),
        weights: Vec::new(),
        lambdas: Vec::new(),
    }
}

/// Distills the conditioner of a single-stage generator. The main network is
/// left untouched. `train` lists the training conditionals; an empty slice
/// uses every label of an affine conditioner.
pub fn distill_conditioner(
    teacher: &ConditionalGenerator,
    spec: &RedactionSpec,
    train: &[Conditional],
    cfg: &DistillConfig,
) -> Result<(ConditionalGenerator, DistillReport)> {
    if teacher.topology() != Topology::Single {
        return Err(Error::InvalidArgument(
            "distill_conditioner needs a single-stage generator".into(),
        ));
    }
    let mut setup = prepare(teacher, spec, train, cfg)?;
    let mut report = empty_report();
    distill_static(
        teacher,
        &mut setup,
        spec,
        cfg,
        &[0],
        "distill/single",
        &mut report,
    )?;
    Ok((setup.student, report))
}

/// Jointly distills every block conditioner of a residual generator with
/// per-block weights and coefficients from the configured schedule.
pub fn distill_parallel(
    teacher: &ConditionalGenerator,
    spec: &RedactionSpec,
    train: &[Conditional],
    cfg: &DistillConfig,
) -> Result<(ConditionalGenerator, DistillReport)> {
    if teacher.topology() != Topology::Residual {
        return Err(Error::InvalidArgument(
            "distill_parallel needs a residual generator".into(),
        ));
    }
    let mut setup = prepare(teacher, spec, train, cfg)?;
    let idxs: Vec<usize> = (0..teacher.conditioners.len()).collect();
    let mut report = empty_report();
    distill_static(
        teacher,
        &mut setup,
        spec,
        cfg,
        &idxs,
        "distill/parallel",
        &mut report,
    )?;
    Ok((setup.student, report))
}

fn stage1_value(g: &ConditionalGenerator, z: &Tensor, batch: &CondBatch) -> Result<Tensor> {
    let mut ctx = Ctx::inference();
    let out = g.stage1(&mut ctx, z, batch)?;
    Ok(ctx.value(out).clone())
}

struct Stage2Batch {
    valid: CondBatch,
    redacted: Option<CondBatch>,
    aux_valid: Tensor,
    aux_redacted: Option<Tensor>,
    target_valid: Tensor,
    target_redacted: Option<Tensor>,
    conds: Vec<Conditional>,
    latents: Option<Tensor>,
}

/// Student inputs `G1'(z|c)` and teacher targets `H2(v_w(c), G1'(z|c))`,
/// `H2(v_w(c_hat), G1'(z|c_hat))`.
fn stage2_batch(
    teacher: &ConditionalGenerator,
    student: &ConditionalGenerator,
    spec: &RedactionSpec,
    cv: &[Conditional],
    zv: &Tensor,
    cr: &[Conditional],
    zr: Option<&Tensor>,
) -> Result<Stage2Batch> {
    let vb = student.encode(cv)?;
    let aux_valid = stage1_value(student, zv, &vb)?;
    let target_valid = teacher.conditioners[1].represent(&vb, Some(&aux_valid))?;
    let (redacted, aux_redacted, target_redacted, latents) = match zr {
        Some(zr) if !cr.is_empty() => {
            let rb = student.encode(cr)?;
            let hb = student.encode(&references(spec, cr)?)?;
            let aux = stage1_value(student, zr, &rb)?;
            let aux_hat = stage1_value(student, zr, &hb)?;
            let target = teacher.conditioners[1].represent(&hb, Some(&aux_hat))?;
            (Some(rb), Some(aux), Some(target), Some(zr.clone()))
        }
        _ => (None, None, None, None),
    };
    Ok(Stage2Batch {
        valid: vb,
        redacted,
        aux_valid,
        aux_redacted,
        target_valid,
        target_redacted,
        conds: cr.to_vec(),
        latents,
    })
}

fn stage2_loss(
    student: &ConditionalGenerator,
    b: &Stage2Batch,
    ctx: &mut Ctx,
    lambda: f64,
    metric: Metric,
) -> Result<(NodeId, f64, f64)> {
    let h = &student.conditioners[1];
    let av = ctx.input(b.aux_valid.clone());
    let sv = h.forward(ctx, &b.valid, Some(av))?;
    let red = match (&b.redacted, &b.aux_redacted, &b.target_redacted) {
        (Some(rb), Some(ar), Some(tr)) => {
            let a = ctx.input(ar.clone());
            Some((h.forward(ctx, rb, Some(a))?, tr))
        }
        _ => None,
    };
    loss_terms(ctx, Some((sv, &b.target_valid)), red, lambda, metric)
}

fn repeat_each(conds: &[Conditional], n: usize) -> Vec<Conditional> {
    conds
        .iter()
        .flat_map(|c| std::iter::repeat_n(c.clone(), n))
        .collect()
}

/// Sequential distillation of a cascaded generator: the first conditioner is
/// distilled to completion, then the second one is distilled on inputs
/// produced by the already distilled first stage.
pub fn distill_sequential(
    teacher: &ConditionalGenerator,
    spec: &RedactionSpec,
    train: &[Conditional],
    cfg: &DistillConfig,
) -> Result<(ConditionalGenerator, DistillReport)> {
    distill_sequential_probed(teacher, spec, train, cfg, &mut |_| {})
}

/// [`distill_sequential`] reporting every stage-2 redacted batch to `probe`.
pub fn distill_sequential_probed(
    teacher: &ConditionalGenerator,
    spec: &RedactionSpec,
    train: &[Conditional],
    cfg: &DistillConfig,
    probe: &mut dyn FnMut(&Stage2Probe),
) -> Result<(ConditionalGenerator, DistillReport)> {
    if teacher.topology() != Topology::Cascaded {
        return Err(Error::InvalidArgument(
            "distill_sequential needs a cascaded generator".into(),
        ));
    }
    let mut setup = prepare(teacher, spec, train, cfg)?;
    let mut report = empty_report();
    distill_static(
        teacher,
        &mut setup,
        spec,
        cfg,
        &[0],
        "distill/stage1",
        &mut report,
    )?;

    // Stage 2 on the finished first stage.
    let latent = teacher.latent_dim();
    let mut er = rng(derive_seed(cfg.seed, "distill/stage2/eval"));
    let ev = repeat_each(&setup.valid, cfg.eval_latents);
    let er_conds = repeat_each(&setup.redacted, cfg.eval_latents);
    let zv_eval = crate::rng::normal_tensor(&mut er, &[ev.len(), latent], 1.0);
    let zr_eval = crate::rng::normal_tensor(&mut er, &[er_conds.len().max(1), latent], 1.0);
    let eval_loss = |student: &ConditionalGenerator| -> Result<f64> {
        let zr = if er_conds.is_empty() {
            None
        } else {
            Some(&zr_eval)
        };
        let b = stage2_batch(teacher, student, spec, &ev, &zv_eval, &er_conds, zr)?;
        let mut ctx = Ctx::inference();
        let (loss, _, _) = stage2_loss(student, &b, &mut ctx, cfg.lambda, cfg.metric)?;
        Ok(ctx.value(loss).item())
    };
    let initial = eval_loss(&setup.student)?;
    let mut r = rng(derive_seed(cfg.seed, "distill/stage2"));
    let mut opt = cfg.optimizer();
    let offset = report.trace.len();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let lambda = cfg.lambda_at_step(step)?;
        let cv = draw(&setup.valid, cfg.batch, &mut r);
        let zv = crate::rng::normal_tensor(&mut r, &[cfg.batch, latent], 1.0);
        let (cr, zr) = if setup.redacted.is_empty() {
            (Vec::new(), None)
        } else {
            let cr = draw(&setup.redacted, cfg.batch, &mut r);
            (
                cr,
                Some(crate::rng::normal_tensor(&mut r, &[cfg.batch, latent], 1.0)),
            )
        };
        let b = stage2_batch(teacher, &setup.student, spec, &cv, &zv, &cr, zr.as_ref())?;
        if let (Some(aux), Some(z)) = (&b.aux_redacted, &b.latents) {
            probe(&Stage2Probe {
                step,
                conds: b.conds.clone(),
                latents: z.clone(),
                aux: aux.clone(),
            });
        }
        let mut ctx = Ctx::training(&["cond1."]);
        let (loss, v, rv) = stage2_loss(&setup.student, &b, &mut ctx, lambda, cfg.metric)?;
        let value = ctx.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                step,
                msg: format!("loss {value}"),
            });
        }
        trace.push((offset + step, v + lambda * rv));
        report.trace.push((offset + step, value));
        ctx.graph.backward(loss)?;
        opt.step(&mut setup.student, &ctx)
            .map_err(|e| Error::Divergence {
                step,
                msg: e.to_string(),
            })?;
    }
    let fin = eval_loss(&setup.student)?;
    report.conditioners.push(ConditionerTrace {
        index: 1,
        initial_loss: initial,
        final_loss: fin,
        trace,
    });
    Ok((setup.student, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closedform::{redact_labels, LabelRedactionPlan};
    use crate::nn::{param_digest, ConditionerSpec, Parameterized};
    use crate::toy::{GeneratorArch, SyntheticTask, MAIN_PREFIX};

    fn affine_teacher(k: usize, seed: u64) -> ConditionalGenerator {
        let task = SyntheticTask::kgon(k).unwrap();
        ConditionalGenerator::build(&GeneratorArch::affine_single(&task, 4, vec![8]), seed).unwrap()
    }

    fn map_of(g: &ConditionalGenerator) -> (Tensor, Tensor) {
        match &g.conditioners[0] {
            Conditioner::Affine(a) => (a.map.value.clone(), a.embedding.value.clone()),
            _ => unreachable!(),
        }
    }

    #[test]
    fn affine_distillation_approaches_closed_form() {
        let g = affine_teacher(4, 1);
        let plan = LabelRedactionPlan::new(4, &[(1, 3)]).unwrap();
        let spec = RedactionSpec::from_plan(&plan);
        let (m, v) = map_of(&g);
        let exact = redact_labels(&m, &v, &plan).unwrap();
        let mut cfg = DistillConfig::new(Metric::L2Squared, 600, 4, 0.2, 3);
        cfg.lambda = 1.0;
        let (student, report) = distill_conditioner(&g, &spec, &[], &cfg).unwrap();
        let (m2, _) = map_of(&student);
        assert!(
            m2.max_abs_diff(&exact) < 1e-3,
            "{}",
            m2.max_abs_diff(&exact)
        );
        assert!(report.conditioners[0].final_loss < report.conditioners[0].initial_loss);
        assert_eq!(
            param_digest(&g, MAIN_PREFIX),
            param_digest(&student, MAIN_PREFIX)
        );
    }

    #[test]
    fn empty_set_imitates_teacher() {
        let task = SyntheticTask::token_attr(2).unwrap();
        let arch = GeneratorArch::single(
            &task,
            ConditionerSpec::Mlp {
                hidden: vec![8],
                rep_dim: 3,
            },
            vec![8],
        );
        let g = ConditionalGenerator::build(&arch, 4).unwrap();
        let mut cfg = DistillConfig::new(Metric::L2Squared, 200, 8, 0.1, 5);
        cfg.init = StudentInit::Fresh;
        cfg.optimizer = OptimizerKind::Adam;
        cfg.lr = 0.01;
        let (_, report) =
            distill_conditioner(&g, &RedactionSpec::empty(), &task.conditionals(), &cfg).unwrap();
        let t = &report.conditioners[0];
        assert!(
            t.final_loss < 0.2 * t.initial_loss,
            "{} -> {}",
            t.initial_loss,
            t.final_loss
        );
    }

    #[test]
    fn distillation_is_deterministic() {
        let g = affine_teacher(5, 2);
        let spec = RedactionSpec::new(&[(0, 2)]).unwrap();
        let cfg = DistillConfig::new(Metric::L1, 30, 3, 0.05, 9);
        let a = distill_conditioner(&g, &spec, &[], &cfg).unwrap();
        let b = distill_conditioner(&g, &spec, &[], &cfg).unwrap();
        assert_eq!(a.0.param_values(), b.0.param_values());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn wrong_topology_is_rejected() {
        let g = affine_teacher(3, 0);
        let spec = RedactionSpec::new(&[(0, 1)]).unwrap();
        let cfg = DistillConfig::new(Metric::L1, 1, 1, 0.1, 0);
        assert!(distill_parallel(&g, &spec, &[], &cfg).is_err());
        assert!(distill_sequential(&g, &spec, &[], &cfg).is_err());
        let mut bad = cfg.clone();
        bad.schedule = Schedule::WOrder;
        assert!(matches!(
            distill_conditioner(&g, &spec, &[], &bad),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn sequential_stage_two_sees_distilled_stage_one() {
        let task = SyntheticTask::token_attr(4).unwrap();
        let g =
            ConditionalGenerator::build(&GeneratorArch::cascaded(&task, 6, vec![12]).unwrap(), 3)
                .unwrap();
        let spec = RedactionSpec::from_names(&task, &["blue".into()], &["red".into()]).unwrap();
        let cfg = DistillConfig::new(Metric::L2Squared, 40, 6, 0.1, 1);
        let mut seen = Vec::new();
        let (student, report) =
            distill_sequential_probed(&g, &spec, &task.conditionals(), &cfg, &mut |p| {
                seen.push(p.clone())
            })
            .unwrap();
        assert_eq!(seen.len(), 40);
        assert_eq!(report.conditioners.len(), 2);
        for p in &seen {
            let batch = student.encode(&p.conds).unwrap();
            let student_x1 = stage1_value(&student, &p.latents, &batch).unwrap();
            let teacher_x1 = stage1_value(&g, &p.latents, &batch).unwrap();
            assert_eq!(p.aux, student_x1);
            assert!(p.aux.max_abs_diff(&teacher_x1) > 0.0);
        }
        assert_eq!(
            param_digest(&g, MAIN_PREFIX),
            param_digest(&student, MAIN_PREFIX)
        );
        let h1_variance = |m: &ConditionalGenerator| match &m.conditioners[0] {
            Conditioner::Seq(s) => s.head.as_ref().unwrap().scale.clone(),
            _ => unreachable!(),
        };
        assert_eq!(
            h1_variance(&g).weight.value,
            h1_variance(&student).weight.value
        );
    }

    #[test]
    fn sequential_with_empty_set_reproduces_teacher() {
        let task = SyntheticTask::token_attr(4).unwrap();
        let g =
            ConditionalGenerator::build(&GeneratorArch::cascaded(&task, 6, vec![12]).unwrap(), 3)
                .unwrap();
        let cfg = DistillConfig::new(Metric::L2Squared, 20, 6, 0.1, 1);
        let (student, _) =
            distill_sequential(&g, &RedactionSpec::empty(), &task.conditionals(), &cfg).unwrap();
        let conds: Vec<Conditional> = (0..50)
            .map(|i| task.conditionals()[i % 15].clone())
            .collect();
        let z = g.sample_latent(50, &mut rng(77));
        let a = g.generate(&conds, &z).unwrap();
        let b = student.generate(&conds, &z).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-3);
    }

    #[test]
    fn parallel_schedules_are_live_and_upsampling_frozen() {
        let task = SyntheticTask::token_attr(2).unwrap();
        let arch = GeneratorArch::residual(&task, 6, 6, 3, 6, 6);
        let g = ConditionalGenerator::build(&arch, 8).unwrap();
        let spec = RedactionSpec::from_names(&task, &["white".into()], &["black".into()]).unwrap();
        let mut cfg = DistillConfig::new(Metric::L1, 60, 6, 0.05, 2);
        let (uniform, report) = distill_parallel(&g, &spec, &task.conditionals(), &cfg).unwrap();
        assert_eq!(report.conditioners.len(), 6);
        for t in &report.conditioners {
            assert!(
                t.final_loss < t.initial_loss,
                "block {}: {} -> {}",
                t.index,
                t.initial_loss,
                t.final_loss
            );
        }
        cfg.schedule = Schedule::WOrder;
        cfg.alpha = 0.02;
        let (ordered, _) = distill_parallel(&g, &spec, &task.conditionals(), &cfg).unwrap();
        assert_ne!(uniform.param_values(), ordered.param_values());
        for (a, b) in g.conditioners.iter().zip(&ordered.conditioners) {
            let (Conditioner::Block(a), Conditioner::Block(b)) = (a, b) else {
                unreachable!()
            };
            assert_eq!(a.upsample, b.upsample.clone().tap_unfreeze());
        }
        assert_eq!(
            param_digest(&g, MAIN_PREFIX),
            param_digest(&ordered, MAIN_PREFIX)
        );
    }

    trait TapUnfreeze {
        fn tap_unfreeze(self) -> Self;
    }

    impl TapUnfreeze for crate::nn::DenseLayer {
        fn tap_unfreeze(mut self) -> Self {
            self.set_frozen(false);
            self
        }
    }
}
