//! Redaction metrics, a per-conditional sample quality score and the
//! guidance score recovery identity.

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditional::Conditional;
use crate::error::{Error, Result};
use crate::redistill::RedactionSpec;
use crate::rng::{derive_index, derive_seed, normal_tensor, rng, SeededRng};
use crate::tensor::Tensor;
use crate::toy::{median_bandwidth, mmd2, ConditionalGenerator, SyntheticTask};

/// Anything that maps `(z, c)` rows to samples.
pub trait Sampler {
    fn latent_dim(&self) -> usize;
    fn generate(&self, conds: &[Conditional], z: &Tensor) -> Result<Tensor>;
}

impl Sampler for ConditionalGenerator {
    fn latent_dim(&self) -> usize {
        ConditionalGenerator::latent_dim(self)
    }

    fn generate(&self, conds: &[Conditional], z: &Tensor) -> Result<Tensor> {
        ConditionalGenerator::generate(self, conds, z)
    }
}

/// Notices attached to every report that uses these metrics.
pub const SUBSTITUTION_NOTICES: [&str; 3] = [
    "faithfulness distances are Euclidean distances in output space instead of image feature space",
    "corr(x, c) is the negative Euclidean distance from x to the analytic mean of c instead of an encoder similarity",
    "sample quality is a per-conditional kernel MMD^2 against fresh data instead of an Inception or speech score",
];

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `-||x - mu(c)||`.
pub fn corr(x: &[f64], c: &Conditional, task: &SyntheticTask) -> Result<f64> {
    let mu = task.mean(c)?;
    if x.len() != mu.len() {
        return Err(Error::InvalidArgument(format!(
            "sample has dimension {}, task outputs {}",
            x.len(),
            mu.len()
        )));
    }
    Ok(-distance(x, &mu))
}

fn redacted_set(task: &SyntheticTask, spec: &RedactionSpec) -> Result<Vec<Conditional>> {
    let (_, redacted) = spec.partition(&task.conditionals());
    if redacted.is_empty() {
        return Err(Error::EmptyBatch("redacted conditionals"));
    }
    Ok(redacted)
}

/// `n` conditionals drawn uniformly from `set` and one latent row each.
fn trials(
    set: &[Conditional],
    n: usize,
    latent: usize,
    r: &mut SeededRng,
) -> Result<(Vec<Conditional>, Tensor)> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "trial count must be positive".into(),
        ));
    }
    let conds: Vec<Conditional> = (0..n)
        .map(|_| set[r.random_range(0..set.len())].clone())
        .collect();
    let z = normal_tensor(r, &[n, latent], 1.0);
    Ok((conds, z))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessTrial {
    pub conditional: Conditional,
    /// `dist(G'(z|c), G(z|c_hat))`.
    pub to_reference: f64,
    /// `dist(G'(z|c), G(z|c))`.
    pub to_original: f64,
    pub success: bool,
}

pub fn faithfulness_trials(
    student: &dyn Sampler,
    teacher: &dyn Sampler,
    task: &SyntheticTask,
    spec: &RedactionSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<FaithfulnessTrial>> {
    let set = redacted_set(task, spec)?;
    let mut r = rng(derive_seed(seed, "faithfulness"));
    let (conds, z) = trials(&set, n, teacher.latent_dim(), &mut r)?;
    let hats: Vec<Conditional> = conds
        .iter()
        .map(|c| spec.reference(c))
        .collect::<Result<_>>()?;
    let x = student.generate(&conds, &z)?;
    let reference = teacher.generate(&hats, &z)?;
    let original = teacher.generate(&conds, &z)?;
    Ok(conds
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let to_reference = distance(x.row(i), reference.row(i));
            let to_original = distance(x.row(i), original.row(i));
            FaithfulnessTrial {
                conditional: c,
                to_reference,
                to_original,
                success: to_reference < to_original,
            }
        })
        .collect())
}

fn fraction(successes: usize, n: usize) -> f64 {
    successes as f64 / n as f64
}

/// Fraction of trials where `G'(z|c)` is strictly closer to `G(z|c_hat)`
/// than to `G(z|c)`, with `c` uniform over the redacted set.
pub fn faithfulness(
    student: &dyn Sampler,
    teacher: &dyn Sampler,
    task: &SyntheticTask,
    spec: &RedactionSpec,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let t = faithfulness_trials(student, teacher, task, spec, n, seed)?;
    Ok(fraction(t.iter().filter(|t| t.success).count(), n))
}

/// Fraction of trials where `corr(G'(z|c), c_hat)` beats the best of `m`
/// mismatched conditionals drawn without replacement from everything except
/// `c` and `c_hat`.
pub fn r_precision(
    student: &dyn Sampler,
    task: &SyntheticTask,
    spec: &RedactionSpec,
    n: usize,
    m: usize,
    seed: u64,
) -> Result<f64> {
    if m == 0 {
        return Err(Error::InvalidArgument(
            "mismatch count must be positive".into(),
        ));
    }
    let set = redacted_set(task, spec)?;
    let all = task.conditionals();
    let mut r = rng(derive_seed(seed, "r-precision"));
    let (conds, z) = trials(&set, n, student.latent_dim(), &mut r)?;
    let x = student.generate(&conds, &z)?;
    let mut wins = 0;
    for (i, c) in conds.iter().enumerate() {
        let hat = spec.reference(c)?;
        let pool: Vec<&Conditional> = all.iter().filter(|o| **o != *c && **o != hat).collect();
        if pool.is_empty() {
            return Err(Error::InvalidArgument(
                "no mismatched conditionals available".into(),
            ));
        }
        let target = corr(x.row(i), &hat, task)?;
        let mut best = f64::NEG_INFINITY;
        for j in sample_indices(&mut r, pool.len(), m.min(pool.len())) {
            best = best.max(corr(x.row(i), pool[j], task)?);
        }
        if target > best {
            wins += 1;
        }
    }
    Ok(fraction(wins, n))
}

/// Fraction of trials where `corr(G'(z|c), c_hat) > corr(G'(z|c), c)`.
pub fn c_vs_chat(
    student: &dyn Sampler,
    task: &SyntheticTask,
    spec: &RedactionSpec,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let set = redacted_set(task, spec)?;
    let mut r = rng(derive_seed(seed, "c-vs-chat"));
    let (conds, z) = trials(&set, n, student.latent_dim(), &mut r)?;
    let x = student.generate(&conds, &z)?;
    let mut wins = 0;
    for (i, c) in conds.iter().enumerate() {
        if corr(x.row(i), &spec.reference(c)?, task)? > corr(x.row(i), c, task)? {
            wins += 1;
        }
    }
    Ok(fraction(wins, n))
}

/// Biased `MMD^2` between `n` generated and `n` fresh data samples for each
/// conditional, with the median-heuristic bandwidth of the data sample.
pub fn quality_mmd(
    model: &dyn Sampler,
    task: &SyntheticTask,
    conds: &[Conditional],
    n: usize,
    seed: u64,
) -> Result<BTreeMap<Conditional, f64>> {
    if conds.is_empty() {
        return Err(Error::EmptyBatch("quality conditionals"));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(
            "quality needs at least two samples".into(),
        ));
    }
    let base = derive_seed(seed, "quality");
    let mut out = BTreeMap::new();
    for (k, c) in conds.iter().enumerate() {
        let mut r = rng(derive_index(base, k as u64));
        let z = normal_tensor(&mut r, &[n, model.latent_dim()], 1.0);
        let x = model.generate(&vec![c.clone(); n], &z)?;
        let data = task.sample(c, n, &mut r)?;
        out.insert(c.clone(), mmd2(&x, &data, median_bandwidth(&data))?);
    }
    Ok(out)
}

/// Recovers the undistilled conditional score from the unconditional score
/// and a score distilled with negative guidance of strength `eta`:
/// `((1 + eta) * eps_uncond - eps_cond) / eta`.
pub fn recover_original_score(
    eps_uncond: &[f64],
    eps_cond_distilled: &[f64],
    eta: f64,
) -> Result<Vec<f64>> {
    if eta == 0.0 || !eta.is_finite() {
        return Err(Error::InvalidArgument(
            "eta must be finite and nonzero".into(),
        ));
    }
    if eps_uncond.len() != eps_cond_distilled.len() {
        return Err(Error::InvalidArgument(
            "score vectors differ in length".into(),
        ));
    }
    Ok(eps_uncond
        .iter()
        .zip(eps_cond_distilled)
        .map(|(u, c)| ((1.0 + eta) * u - c) / eta)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub trials: usize,
    pub mismatches: usize,
    pub quality_samples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trials: 500,
            mismatches: 100,
            quality_samples: 200,
            seed: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub faithfulness: f64,
    pub r_precision: f64,
    pub c_vs_chat: f64,
    /// `MMD^2` of the edited model per valid conditional, keyed by its text.
    pub quality: BTreeMap<String, f64>,
    pub quality_mean: f64,
    /// The same for the unedited model.
    pub teacher_quality: BTreeMap<String, f64>,
    pub teacher_quality_mean: f64,
    pub trials: usize,
    pub mismatches: usize,
    pub quality_samples: usize,
    pub seed: u64,
}

fn describe_all(
    task: &SyntheticTask,
    m: BTreeMap<Conditional, f64>,
) -> (BTreeMap<String, f64>, f64) {
    let mean = m.values().sum::<f64>() / m.len() as f64;
    (
        m.into_iter().map(|(c, v)| (task.describe(&c), v)).collect(),
        mean,
    )
}

/// All metrics for an edited model against its teacher.
pub fn evaluate(
    student: &dyn Sampler,
    teacher: &dyn Sampler,
    task: &SyntheticTask,
    spec: &RedactionSpec,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let (valid, _) = spec.partition(&task.conditionals());
    let (quality, quality_mean) = describe_all(
        task,
        quality_mmd(student, task, &valid, cfg.quality_samples, cfg.seed)?,
    );
    let (teacher_quality, teacher_quality_mean) = describe_all(
        task,
        quality_mmd(teacher, task, &valid, cfg.quality_samples, cfg.seed)?,
    );
    Ok(EvalReport {
        faithfulness: faithfulness(student, teacher, task, spec, cfg.trials, cfg.seed)?,
        r_precision: r_precision(student, task, spec, cfg.trials, cfg.mismatches, cfg.seed)?,
        c_vs_chat: c_vs_chat(student, task, spec, cfg.trials, cfg.seed)?,
        quality,
        quality_mean,
        teacher_quality,
        teacher_quality_mean,
        trials: cfg.trials,
        mismatches: cfg.mismatches,
        quality_samples: cfg.quality_samples,
        seed: cfg.seed,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Returns `mu(c) + sigma * z` restricted to the task dimension, i.e.
    /// exact data draws.
    pub(crate) struct DataSampler(pub SyntheticTask);

    impl Sampler for DataSampler {
        fn latent_dim(&self) -> usize {
            4
        }
        fn generate(&self, conds: &[Conditional], z: &Tensor) -> Result<Tensor> {
            let rows = conds
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let mu = self.0.mean(c)?;
                    Ok(mu
                        .iter()
                        .enumerate()
                        .map(|(j, m)| m + self.0.sigma() * z.get(i, j))
                        .collect())
                })
                .collect::<Result<Vec<Vec<f64>>>>()?;
            Tensor::from_rows(&rows)
        }
    }

    /// Outputs `mu(map(c))` exactly.
    struct MeanSampler<F: Fn(&Conditional) -> Conditional>(SyntheticTask, F);

    impl<F: Fn(&Conditional) -> Conditional> Sampler for MeanSampler<F> {
        fn latent_dim(&self) -> usize {
            2
        }
        fn generate(&self, conds: &[Conditional], _z: &Tensor) -> Result<Tensor> {
            let rows = conds
                .iter()
                .map(|c| self.0.mean(&(self.1)(c)))
                .collect::<Result<Vec<_>>>()?;
            Tensor::from_rows(&rows)
        }
    }

    struct Constant(Vec<f64>);

    impl Sampler for Constant {
        fn latent_dim(&self) -> usize {
            1
        }
        fn generate(&self, conds: &[Conditional], _z: &Tensor) -> Result<Tensor> {
            Tensor::from_rows(&vec![self.0.clone(); conds.len()])
        }
    }

    fn blue_to_red(task: &SyntheticTask) -> RedactionSpec {
        RedactionSpec::from_names(task, &["blue".into()], &["red".into()]).unwrap()
    }

    #[test]
    fn corr_is_maximal_at_the_mean() {
        let task = SyntheticTask::token_attr(4).unwrap();
        for c in task.conditionals() {
            let mu = task.mean(&c).unwrap();
            assert_eq!(corr(&mu, &c, &task).unwrap(), 0.0);
            for o in task.conditionals().iter().filter(|o| **o != c) {
                assert!(corr(&mu, o, &task).unwrap() < 0.0);
            }
        }
        assert!(corr(&[0.0; 3], &task.conditionals()[0], &task).is_err());
        assert!(corr(&[0.0; 4], &Conditional(vec![5, 0]), &task).is_err());
    }

    #[test]
    fn corr_ordering_matches_distance_table() {
        let task = SyntheticTask::token_attr(2).unwrap();
        let conds = task.conditionals();
        assert_eq!(conds.len(), 15);
        let x = [0.3, -0.2];
        let table: Vec<f64> = conds
            .iter()
            .map(|c| {
                let mu = task.mean(c).unwrap();
                ((x[0] - mu[0]).powi(2) + (x[1] - mu[1]).powi(2)).sqrt()
            })
            .collect();
        for i in 0..15 {
            for j in 0..15 {
                let ci = corr(&x, &conds[i], &task).unwrap();
                let cj = corr(&x, &conds[j], &task).unwrap();
                assert_eq!(ci > cj, table[i] < table[j]);
            }
        }
    }

    #[test]
    fn unedited_model_scores_zero_and_exact_projection_scores_one() {
        let task = SyntheticTask::token_attr(4).unwrap();
        let spec = blue_to_red(&task);
        let teacher = MeanSampler(task.clone(), |c: &Conditional| c.clone());
        let s = spec.clone();
        let exact = MeanSampler(task.clone(), move |c: &Conditional| {
            if s.contains(c) {
                s.reference(c).unwrap()
            } else {
                c.clone()
            }
        });
        assert_eq!(
            faithfulness(&teacher, &teacher, &task, &spec, 100, 1).unwrap(),
            0.0
        );
        assert_eq!(
            faithfulness(&exact, &teacher, &task, &spec, 100, 1).unwrap(),
            1.0
        );
        assert_eq!(c_vs_chat(&teacher, &task, &spec, 100, 1).unwrap(), 0.0);
        assert_eq!(c_vs_chat(&exact, &task, &spec, 100, 1).unwrap(), 1.0);
        assert_eq!(r_precision(&exact, &task, &spec, 100, 100, 1).unwrap(), 1.0);
    }

    #[test]
    fn equidistant_output_fails_r_precision() {
        let task = SyntheticTask::kgon(6).unwrap();
        let spec = RedactionSpec::new(&[(0, 3)]).unwrap();
        assert_eq!(
            r_precision(&Constant(vec![0.0, 0.0]), &task, &spec, 50, 4, 2).unwrap(),
            0.0
        );
        let tiny = SyntheticTask::kgon(2).unwrap();
        let spec = RedactionSpec::new(&[(0, 1)]).unwrap();
        assert!(r_precision(&Constant(vec![0.0, 0.0]), &tiny, &spec, 5, 1, 0).is_err());
    }

    #[test]
    fn metrics_need_a_redacted_set_and_trials() {
        let task = SyntheticTask::kgon(4).unwrap();
        let m = Constant(vec![0.0, 0.0]);
        assert!(faithfulness(&m, &m, &task, &RedactionSpec::empty(), 10, 0).is_err());
        let spec = RedactionSpec::new(&[(0, 1)]).unwrap();
        assert!(c_vs_chat(&m, &task, &spec, 0, 0).is_err());
    }

    #[test]
    fn metrics_are_deterministic() {
        let task = SyntheticTask::token_attr(4).unwrap();
        let spec = blue_to_red(&task);
        let d = DataSampler(task.clone());
        let a = evaluate(
            &d,
            &d,
            &task,
            &spec,
            &EvalConfig {
                trials: 50,
                mismatches: 5,
                quality_samples: 20,
                seed: 3,
            },
        )
        .unwrap();
        let b = evaluate(
            &d,
            &d,
            &task,
            &spec,
            &EvalConfig {
                trials: 50,
                mismatches: 5,
                quality_samples: 20,
                seed: 3,
            },
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.quality.len(), 12);
        for f in [a.faithfulness, a.r_precision, a.c_vs_chat] {
            assert!((0.0..=1.0).contains(&f));
        }
    }

    fn permutation_null(
        task: &SyntheticTask,
        c: &Conditional,
        n: usize,
        reps: usize,
        seed: u64,
    ) -> Vec<f64> {
        let mut r = rng(seed);
        let mut null: Vec<f64> = (0..reps)
            .map(|_| {
                let a = task.sample(c, n, &mut r).unwrap();
                let b = task.sample(c, n, &mut r).unwrap();
                mmd2(&a, &b, median_bandwidth(&b)).unwrap()
            })
            .collect();
        null.sort_by(f64::total_cmp);
        null
    }

    #[test]
    fn perfect_sampler_sits_inside_the_null() {
        // Exceedances of the 99th null percentile over many seeds stay at
        // the nominal rate; P(Binomial(60, 0.01) >= 5) is about 3e-3.
        let task = SyntheticTask::kgon(5).unwrap();
        let conds = task.conditionals();
        for c in &conds[..2] {
            let null = permutation_null(&task, c, 60, 400, 99);
            let cut = null[395];
            let hits = (0..60)
                .filter(|&s| {
                    quality_mmd(
                        &DataSampler(task.clone()),
                        &task,
                        std::slice::from_ref(c),
                        60,
                        s,
                    )
                    .unwrap()[c]
                        > cut
                })
                .count();
            assert!(hits < 5, "{c}: {hits}");
        }
    }

    #[test]
    fn constant_sampler_is_far_above_the_null() {
        let task = SyntheticTask::kgon(5).unwrap();
        let conds = task.conditionals();
        let q = quality_mmd(&Constant(vec![0.0, 0.0]), &task, &conds, 60, 4).unwrap();
        for c in &conds {
            let null = permutation_null(&task, c, 60, 200, 98);
            assert!(q[c] > 10.0 * null[199]);
        }
    }

    #[test]
    fn score_recovery_identity() {
        let mut r = rng(5);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            for eta in [0.1, 0.7, 1.0, 5.0] {
                let star_u = normal_tensor(&mut r, &[1, 16], 1.0).into_data();
                let star_c = normal_tensor(&mut r, &[1, 16], 1.0).into_data();
                let distilled: Vec<f64> = star_u
                    .iter()
                    .zip(&star_c)
                    .map(|(u, c)| u - eta * (c - u))
                    .collect();
                let back = recover_original_score(&star_u, &distilled, eta).unwrap();
                for (a, b) in back.iter().zip(&star_c) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        assert!(worst <= 1e-12, "{worst}");
        let u = [0.3, -1.0];
        for (a, b) in recover_original_score(&u, &u, 0.7).unwrap().iter().zip(u) {
            assert!((a - b).abs() <= 1e-15);
        }
        assert!(recover_original_score(&u, &u, 0.0).is_err());
        assert!(recover_original_score(&u, &[1.0], 1.0).is_err());
    }
}
