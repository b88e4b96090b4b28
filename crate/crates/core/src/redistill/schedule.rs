use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear annealing `lambda_min + (lambda_max - lambda_min) * step / total`.
pub fn lambda_at(step: usize, total_steps: usize, lambda_min: f64, lambda_max: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidArgument("annealing over zero steps".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond {total_steps}"
        )));
    }
    if step == total_steps {
        return Ok(lambda_max);
    }
    Ok(lambda_min + (lambda_max - lambda_min) * step as f64 / total_steps as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Uniform,
    WOrder,
    LambdaOrder,
    WDilation,
    LambdaDilation,
}

impl Schedule {
    pub const ALL: [Schedule; 5] = [
        Schedule::Uniform,
        Schedule::WOrder,
        Schedule::LambdaOrder,
        Schedule::WDilation,
        Schedule::LambdaDilation,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Schedule::Uniform => "uniform",
            Schedule::WOrder => "w-order",
            Schedule::LambdaOrder => "lambda-order",
            Schedule::WDilation => "w-dilation",
            Schedule::LambdaDilation => "lambda-dilation",
        }
    }
}

/// Per-block weights `w_1..w_n` and coefficients `lambda_1..lambda_n`.
///
/// Order schedules offset by `i - (n + 1) / 2`, dilation schedules by
/// `(i mod n') - (n' + 1) / 6`, with `i` counted from 1.
pub fn layer_schedules(
    n: usize,
    cycle: usize,
    schedule: Schedule,
    alpha: f64,
    beta: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("schedule over zero blocks".into()));
    }
    let dilation = matches!(schedule, Schedule::WDilation | Schedule::LambdaDilation);
    if dilation && cycle == 0 {
        return Err(Error::InvalidArgument(
            "dilation schedule needs a cycle length".into(),
        ));
    }
    let order = |i: usize| i as f64 - (n as f64 + 1.0) / 2.0;
    let dil = |i: usize| (i % cycle.max(1)) as f64 - (cycle as f64 + 1.0) / 6.0;
    let base_w = 1.0 / n as f64;
    let mut w = vec![base_w; n];
    let mut l = vec![lambda; n];
    for i in 1..=n {
        match schedule {
            Schedule::Uniform => {}
            Schedule::WOrder => w[i - 1] = base_w + alpha * order(i),
            Schedule::LambdaOrder => l[i - 1] = lambda + beta * order(i),
            Schedule::WDilation => w[i - 1] = base_w + alpha * dil(i),
            Schedule::LambdaDilation => l[i - 1] = lambda + beta * dil(i),
        }
    }
    if let Some((i, x)) = w.iter().enumerate().find(|(_, x)| **x <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "weight w_{} = {x} is not positive; use a smaller alpha",
            i + 1
        )));
    }
    if let Some((i, x)) = l.iter().enumerate().find(|(_, x)| **x <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "coefficient lambda_{} = {x} is not positive; use a smaller beta",
            i + 1
        )));
    }
    Ok((w, l))
}
