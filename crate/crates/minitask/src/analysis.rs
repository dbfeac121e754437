//! Evaluation metrics, the one-tailed mean-difference test behind the
//! label-masking study, and the sweep scaffolding that turns per-run dev
//! accuracies into a lower-triangular p-value matrix.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Fraction of exact matches.
pub fn accuracy(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "accuracy over {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (n-1 denominator).
fn sample_var(xs: &[f64], m: f64) -> f64 {
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Sample Pearson correlation. Constant inputs have no defined correlation
/// and are rejected.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Contract(format!(
            "pearson needs two equal-length samples of >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (mx, my) = (mean(x), mean(y));
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx).powi(2);
        vy += (b - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Contract(
            "correlation of a constant sample is undefined".into(),
        ));
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TTestKind {
    /// Unequal-variance test with Welch-Satterthwaite degrees of freedom.
    Welch,
    /// Classic pooled-variance test, df = n_a + n_b - 2.
    Pooled,
}

/// One-tailed p-value for H1: mean(a) > mean(b), Welch variant.
///
/// Small p means a's mean credibly exceeds b's. Equal sample means give
/// exactly 0.5, and p(a,b) + p(b,a) = 1 exactly: both directions reduce to
/// the same regularized incomplete beta value, combined as x and 1-x.
pub fn one_tailed_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    one_tailed_t_test_with(a, b, TTestKind::Welch)
}

pub fn one_tailed_t_test_with(a: &[f64], b: &[f64], kind: TTestKind) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Contract(format!(
            "t-test needs >= 2 values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    if ma == mb {
        return Ok(0.5);
    }
    let (va, vb) = (sample_var(a, ma), sample_var(b, mb));
    let (se2, df) = match kind {
        TTestKind::Welch => {
            let (fa, fb) = (va / na, vb / nb);
            let se2 = fa + fb;
            if se2 == 0.0 {
                // Both samples constant with different means: certainty.
                return Ok(if ma > mb { 0.0 } else { 1.0 });
            }
            let df = se2 * se2 / (fa * fa / (na - 1.0) + fb * fb / (nb - 1.0));
            (se2, df)
        }
        TTestKind::Pooled => {
            let df = na + nb - 2.0;
            let sp2 = ((na - 1.0) * va + (nb - 1.0) * vb) / df;
            let se2 = sp2 * (1.0 / na + 1.0 / nb);
            if se2 == 0.0 {
                return Ok(if ma > mb { 0.0 } else { 1.0 });
            }
            (se2, df)
        }
    };
    let t = (ma - mb) / se2.sqrt();
    Ok(upper_tail(t, df))
}

/// P(T >= t) for Student's t with `df` degrees of freedom, written so that
/// upper_tail(t, df) + upper_tail(-t, df) == 1 holds bitwise: the two
/// calls share the identical beta_reg value.
fn upper_tail(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    let half = 0.5 * statrs::function::beta::beta_reg(df / 2.0, 0.5, x);
    if t >= 0.0 {
        half
    } else {
        1.0 - half
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
}

/// One metric observation in the per-epoch JSONL stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task: String,
    pub split: Split,
    pub metric: String,
    pub value: f64,
}

/// Aggregated dev accuracies of all runs at one masking fraction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub lambda: f64,
    /// Per-epoch dev accuracies, all seeds pooled in run order.
    pub accuracies: Vec<f64>,
    pub max: f64,
    pub min: f64,
    pub mean: f64,
}

impl SweepResult {
    pub fn from_accuracies(lambda: f64, accuracies: Vec<f64>) -> Result<SweepResult> {
        if accuracies.is_empty() {
            return Err(Error::Contract(format!(
                "no accuracies recorded for lambda {lambda}"
            )));
        }
        let max = accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = accuracies.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = mean(&accuracies);
        Ok(SweepResult {
            lambda,
            accuracies,
            max,
            min,
            mean,
        })
    }
}

/// Lower-triangular p-value matrix over ascending masking fractions. Row r
/// holds r+1 entries; entry (r, c) for c < r tests whether accuracy
/// dropped from lambda_c to lambda_r (H1: mean(run c) > mean(run r)), and
/// the diagonal is each run against itself, exactly 0.5.
pub fn p_value_matrix(results: &[SweepResult]) -> Result<Vec<Vec<f64>>> {
    let mut matrix = Vec::with_capacity(results.len());
    for (r, row_res) in results.iter().enumerate() {
        let mut row = Vec::with_capacity(r + 1);
        for col_res in results.iter().take(r + 1) {
            row.push(one_tailed_t_test(&col_res.accuracies, &row_res.accuracies)?);
        }
        matrix.push(row);
    }
    Ok(matrix)
}

/// Trains one run per (lambda, seed) with `runner` and aggregates the
/// per-epoch dev accuracies. `runner(lambda, seed)` must be deterministic
/// in its arguments; runs are independent, so under the `parallel` feature
/// they execute on the rayon pool (aggregation order stays fixed).
/// Seed for (lambda index i, repeat r) is base_seed + i + 10000 * r.
pub fn run_sweep<F>(
    lambdas: &[f64],
    n_seeds: usize,
    base_seed: u64,
    runner: F,
) -> Result<(Vec<SweepResult>, Vec<Vec<f64>>)>
where
    F: Fn(f64, u64) -> Result<Vec<f64>> + Sync,
{
    if lambdas.is_empty() || n_seeds == 0 {
        return Err(Error::Config("sweep needs >= 1 lambda and >= 1 seed".into()));
    }
    for pair in lambdas.windows(2) {
        if pair[0] >= pair[1] {
            return Err(Error::Config(format!(
                "lambdas must be strictly ascending, got {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    if lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(Error::Config("lambdas must lie in [0, 1]".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..lambdas.len())
        .flat_map(|i| (0..n_seeds).map(move |r| (i, base_seed + i as u64 + 10_000 * r as u64)))
        .collect();

    #[cfg(feature = "parallel")]
    let outcomes: Vec<Result<Vec<f64>>> = {
        use rayon::prelude::*;
        jobs.par_iter()
            .map(|&(i, seed)| runner(lambdas[i], seed))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let outcomes: Vec<Result<Vec<f64>>> = jobs
        .iter()
        .map(|&(i, seed)| runner(lambdas[i], seed))
        .collect();

    let mut per_lambda: Vec<Vec<f64>> = vec![Vec::new(); lambdas.len()];
    for ((i, _), outcome) in jobs.iter().zip(outcomes) {
        per_lambda[*i].extend(outcome?);
    }
    let results: Vec<SweepResult> = lambdas
        .iter()
        .zip(per_lambda)
        .map(|(&l, accs)| SweepResult::from_accuracies(l, accs))
        .collect::<Result<_>>()?;
    let matrix = p_value_matrix(&results)?;
    Ok((results, matrix))
}
