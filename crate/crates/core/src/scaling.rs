//! Data-aware scaling law with repetition decay:
//!
//! `y_k = a * n_1^{b_1} * prod_{j=2..k} (n_j / n_{j-1})^{b_j} + d`, with
//! `b_j = b * delta^{j-1}` and `n_j` the cumulative number of samples seen
//! after epoch `j`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use argmin::core::{CostFunction, Executor, State, TerminationReason, TerminationStatus};
use argmin::solver::neldermead::NelderMead;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_sig9, parse_field, read_csv_rows};

pub const MIN_OBSERVATIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[default]
    Error,
    Accuracy,
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "error" => Ok(MetricKind::Error),
            "accuracy" => Ok(MetricKind::Accuracy),
            other => Err(Error::InvalidParameter(format!("unknown metric kind `{other}`"))),
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::Error => "error",
            MetricKind::Accuracy => "accuracy",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub epoch: u32,
    pub samples_seen: f64,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub kind: MetricKind,
    pub observations: Vec<Observation>,
}

impl TrainingCurve {
    pub fn new(kind: MetricKind, observations: Vec<Observation>) -> Result<Self> {
        for (i, o) in observations.iter().enumerate() {
            if o.epoch == 0 {
                return Err(Error::InvalidParameter("epochs start at 1".into()));
            }
            if !(o.samples_seen > 0.0 && o.samples_seen.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "samples_seen must be positive, got {}",
                    o.samples_seen
                )));
            }
            if !o.metric.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "non-finite metric at epoch {}",
                    o.epoch
                )));
            }
            if i > 0 {
                let prev = observations[i - 1];
                if o.epoch <= prev.epoch {
                    return Err(Error::InvalidParameter("epochs must be strictly increasing".into()));
                }
                if o.samples_seen < prev.samples_seen {
                    return Err(Error::InvalidParameter("samples_seen must be non-decreasing".into()));
                }
            }
        }
        Ok(Self { kind, observations })
    }

    pub fn read_csv(path: &Path, kind: MetricKind) -> Result<Self> {
        let mut obs = Vec::new();
        for row in read_csv_rows(path, &["epoch", "samples_seen", "metric"])? {
            obs.push(Observation {
                epoch: parse_field(path, &row[0], "epoch")?,
                samples_seen: parse_field(path, &row[1], "samples_seen")?,
                metric: parse_field(path, &row[2], "metric")?,
            });
        }
        Self::new(kind, obs)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,samples_seen,metric\n");
        for o in &self.observations {
            out.push_str(&format!(
                "{},{},{}\n",
                o.epoch,
                fmt_sig9(o.samples_seen),
                fmt_sig9(o.metric)
            ));
        }
        out
    }

    pub fn samples_seen(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.samples_seen).collect()
    }

    /// Metric values as errors (accuracy is converted to `1 - accuracy`).
    pub fn errors(&self) -> Vec<f64> {
        self.observations
            .iter()
            .map(|o| match self.kind {
                MetricKind::Error => o.metric,
                MetricKind::Accuracy => 1.0 - o.metric,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub a: f64,
    pub b: f64,
    pub delta: f64,
    pub d: f64,
}

/// Cumulative log-exponent `ln n_1 + sum_j delta^{j-1} ln(n_j/n_{j-1})`
/// (without the factor `b`) for every prefix. Equal consecutive counts
/// contribute nothing.
fn log_exponents(delta: f64, n: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(n.len());
    let mut acc = 0.0;
    let mut weight = 1.0;
    for (j, &nj) in n.iter().enumerate() {
        if j == 0 {
            acc = nj.ln();
        } else {
            weight *= delta;
            if nj != n[j - 1] {
                acc += weight * (nj / n[j - 1]).ln();
            }
        }
        out.push(acc);
    }
    out
}

fn check_counts(n: &[f64]) -> Result<()> {
    for (j, &v) in n.iter().enumerate() {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "samples seen must be positive, got {v}"
            )));
        }
        if j > 0 && v < n[j - 1] {
            return Err(Error::InvalidParameter("samples seen must be non-decreasing".into()));
        }
    }
    Ok(())
}

fn predict_unchecked(p: &ScalingParams, n: &[f64]) -> Vec<f64> {
    if p.b == 0.0 {
        return vec![p.a + p.d; n.len()];
    }
    log_exponents(p.delta, n)
        .into_iter()
        .map(|s| p.a * (p.b * s).exp() + p.d)
        .collect()
}

/// Evaluates the law at cumulative sample counts `n`.
pub fn predict(p: &ScalingParams, n: &[f64]) -> Result<Vec<f64>> {
    check_counts(n)?;
    let y = predict_unchecked(p, n);
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("prediction overflows for {p:?}")));
    }
    Ok(y)
}

fn sse(p: &ScalingParams, n: &[f64], y: &[f64]) -> f64 {
    predict_unchecked(p, n)
        .iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// `-1 / log2(delta)` for `delta` in (0, 1); repetition half-life in epochs.
pub fn tau(delta: f64) -> Option<f64> {
    (delta > 0.0 && delta < 1.0).then(|| -1.0 / delta.log2())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub a: f64,
    pub b: f64,
    pub delta: f64,
    pub d: f64,
    pub tau: Option<f64>,
    pub sse: f64,
    pub converged: bool,
    pub n_observations: usize,
    pub start_index: usize,
    pub notes: String,
}

impl ScalingFit {
    pub fn params(&self) -> ScalingParams {
        ScalingParams {
            a: self.a,
            b: self.b,
            delta: self.delta,
            d: self.d,
        }
    }
}

/// Starting point for `b` and `delta`; `a` and `d` are seeded from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitPoint {
    pub b: f64,
    pub delta: f64,
}

pub fn default_init_grid() -> Vec<InitPoint> {
    let mut grid = Vec::with_capacity(9);
    for b in [-0.3, 0.0, 0.1] {
        for delta in [0.5, 1.5, 3.0] {
            grid.push(InitPoint { b, delta });
        }
    }
    grid
}

const PENALTY: f64 = 1e6;
const BLOWUP: f64 = 1e30;

/// Optimizer coordinates are `(ln a, b, ln delta, d)`, which keeps `a` and
/// `delta` positive; `d` outside `[0, 1]` is penalized quadratically.
struct Objective<'a> {
    n: &'a [f64],
    y: &'a [f64],
}

fn unpack(x: &[f64]) -> ScalingParams {
    ScalingParams {
        a: x[0].exp(),
        b: x[1],
        delta: x[2].exp(),
        d: x[3],
    }
}

impl Objective<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        let p = unpack(x);
        let violation = (-p.d).max(0.0) + (p.d - 1.0).max(0.0);
        let v = sse(&p, self.n, self.y) + PENALTY * violation * violation;
        if v.is_finite() {
            v
        } else {
            BLOWUP
        }
    }
}

impl CostFunction for Objective<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.value(x))
    }
}

const STEPS: [f64; 4] = [0.3, 0.05, 0.2, 0.02];
const MAX_ITERS: u64 = 4000;
const MAX_RESTARTS: usize = 12;

struct StartResult {
    x: Vec<f64>,
    cost: f64,
    converged: bool,
}

fn run_simplex(obj: &Objective<'_>, x0: &[f64], scale: f64) -> Option<(Vec<f64>, f64, bool)> {
    let mut simplex = vec![x0.to_vec()];
    for (i, step) in STEPS.iter().enumerate() {
        let mut v = x0.to_vec();
        v[i] += step * scale;
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex).with_sd_tolerance(1e-20).ok()?;
    let problem = Objective { n: obj.n, y: obj.y };
    let res = Executor::new(problem, solver)
        .configure(|s| s.max_iters(MAX_ITERS))
        .run()
        .ok()?;
    let state = res.state();
    let x = state.get_best_param()?.clone();
    let cost = state.get_best_cost();
    let converged = matches!(
        state.get_termination_status(),
        TerminationStatus::Terminated(TerminationReason::SolverConverged)
    );
    Some((x, cost, converged))
}

/// One multi-start branch: repeated simplex restarts around the incumbent
/// until the cost stops improving.
fn fit_from(obj: &Objective<'_>, x0: Vec<f64>) -> Option<StartResult> {
    let mut best = StartResult {
        cost: obj.value(&x0),
        x: x0,
        converged: false,
    };
    let mut scale = 1.0;
    for _ in 0..MAX_RESTARTS {
        let (x, cost, converged) = run_simplex(obj, &best.x, scale)?;
        let improved = cost < best.cost;
        let gain = best.cost - cost;
        if improved {
            best.x = x;
            best.cost = cost;
        }
        best.converged = converged;
        if !improved || gain <= 1e-14 * (1.0 + best.cost) && scale < 1.0 {
            break;
        }
        scale = (scale * 0.5).max(1e-3);
    }
    Some(best)
}

/// Fits the law by multi-start Nelder-Mead. The result does not depend on
/// the rayon pool size: ties in sse go to the lower start index.
pub fn fit_scaling(curve: &TrainingCurve, init_grid: &[InitPoint]) -> Result<ScalingFit> {
    let n_obs = curve.observations.len();
    if n_obs < MIN_OBSERVATIONS {
        return Err(Error::InvalidParameter(format!(
            "at least {MIN_OBSERVATIONS} observations are needed, got {n_obs}"
        )));
    }
    if init_grid.is_empty() {
        return Err(Error::InvalidParameter("empty initialization grid".into()));
    }
    if init_grid
        .iter()
        .any(|p| p.delta.is_nan() || p.delta <= 0.0 || !p.b.is_finite())
    {
        return Err(Error::InvalidParameter(
            "init points need finite b and delta > 0".into(),
        ));
    }
    let n = curve.samples_seen();
    check_counts(&n)?;
    let y = curve.errors();
    let obj = Objective { n: &n, y: &y };

    let y_min = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let d0 = (0.5 * y_min).clamp(0.0, 1.0);
    let results: Vec<Option<StartResult>> = init_grid
        .par_iter()
        .map(|p| {
            let lead = (y[0] - d0).max(1e-6);
            let a0 = lead / (p.b * n[0].ln()).exp();
            let x0 = vec![a0.ln(), p.b, p.delta.ln(), d0];
            fit_from(&obj, x0)
        })
        .collect();

    let mut best: Option<(usize, StartResult)> = None;
    for (i, r) in results.into_iter().enumerate() {
        let Some(r) = r else { continue };
        if !r.cost.is_finite() || r.cost >= BLOWUP {
            continue;
        }
        if best.as_ref().is_none_or(|(_, b)| r.cost < b.cost) {
            best = Some((i, r));
        }
    }
    let (start_index, best) = best.ok_or_else(|| Error::FitFailure("every start diverged".into()))?;
    let p = unpack(&best.x);
    let fit_sse = sse(&p, &n, &y);
    if !fit_sse.is_finite() {
        return Err(Error::FitFailure("best fit has a non-finite residual".into()));
    }
    let mut notes = Vec::new();
    if curve.kind == MetricKind::Accuracy {
        notes.push("accuracy converted to error = 1 - accuracy".to_string());
    }
    let tau = tau(p.delta);
    if tau.is_none() {
        notes.push(format!(
            "delta = {} is not below 1, so the half-life form delta = (1/2)^(1/tau) has no solution; tau omitted",
            fmt_sig9(p.delta)
        ));
    }
    Ok(ScalingFit {
        a: p.a,
        b: p.b,
        delta: p.delta,
        d: p.d,
        tau,
        sse: fit_sse,
        converged: best.converged,
        n_observations: n_obs,
        start_index,
        notes: notes.join("; "),
    })
}

/// Builds a noise-free error curve from `p` at `n_k = subset_size * k`.
pub fn synthetic_curve(p: &ScalingParams, subset_size: f64, epochs: u32) -> Result<TrainingCurve> {
    let n: Vec<f64> = (1..=epochs).map(|k| subset_size * f64::from(k)).collect();
    let y = predict(p, &n)?;
    let obs = (1..=epochs)
        .zip(n.iter().zip(&y))
        .map(|(k, (&n, &y))| Observation {
            epoch: k,
            samples_seen: n,
            metric: y,
        })
        .collect();
    TrainingCurve::new(MetricKind::Error, obs)
}
