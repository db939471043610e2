//! Per-sample importance scores computed from stored trajectories.
//!
//! All scores are non-negative reals, one per sample, stored in a
//! [`ScoreTable`] together with the configuration that produced them and the
//! checksum of the source trajectory manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::io::{fmt_sig9, parse_field, read_csv_rows, write_atomic};
use crate::trajstore::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMethod {
    El2n,
    El2nSl,
    Forgetting,
    DynUnc,
    Cad,
    /// Scores read from a bare CSV with no sidecar.
    Imported,
}

impl fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMethod::El2n => "el2n",
            ScoreMethod::El2nSl => "el2n_sl",
            ScoreMethod::Forgetting => "forgetting",
            ScoreMethod::DynUnc => "dyn_unc",
            ScoreMethod::Cad => "cad",
            ScoreMethod::Imported => "imported",
        })
    }
}

impl FromStr for ScoreMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "el2n" => Ok(ScoreMethod::El2n),
            "el2n_sl" => Ok(ScoreMethod::El2nSl),
            "forgetting" => Ok(ScoreMethod::Forgetting),
            "dyn_unc" => Ok(ScoreMethod::DynUnc),
            "cad" => Ok(ScoreMethod::Cad),
            "imported" => Ok(ScoreMethod::Imported),
            _ => Err(Error::InvalidParameter(format!("unknown score method `{s}`"))),
        }
    }
}

/// One score per sample, in trajectory order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub method: ScoreMethod,
    pub config: BTreeMap<String, Value>,
    pub sample_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub source_manifest_checksum: String,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    method: ScoreMethod,
    config: BTreeMap<String, Value>,
    source_manifest_checksum: String,
    num_samples: usize,
}

impl ScoreTable {
    fn build(method: ScoreMethod, config: BTreeMap<String, Value>, traj: &Trajectory, scores: Vec<f64>) -> Self {
        debug_assert!(scores.iter().all(|s| s.is_finite() && *s >= 0.0));
        Self {
            method,
            config,
            sample_ids: traj.sample_ids().to_vec(),
            scores,
            source_manifest_checksum: traj.manifest_checksum(),
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.sample_ids
            .iter()
            .map(String::as_str)
            .zip(self.scores.iter().copied())
    }

    pub fn to_map(&self) -> BTreeMap<&str, f64> {
        self.iter().collect()
    }

    /// `sample_id,score` rows with LF endings and 9 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,score\n");
        for (id, s) in self.iter() {
            out.push_str(id);
            out.push(',');
            out.push_str(&fmt_sig9(s));
            out.push('\n');
        }
        out
    }

    pub fn sidecar_path(csv_path: &Path) -> PathBuf {
        csv_path.with_extension("json")
    }

    fn sidecar_json(&self) -> String {
        let sidecar = Sidecar {
            method: self.method,
            config: self.config.clone(),
            source_manifest_checksum: self.source_manifest_checksum.clone(),
            num_samples: self.len(),
        };
        let mut s = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        s.push('\n');
        s
    }

    /// Writes the CSV and its JSON sidecar (same stem, `.json`).
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        write_atomic(csv_path, self.to_csv().as_bytes())?;
        write_atomic(&Self::sidecar_path(csv_path), self.sidecar_json().as_bytes())
    }

    /// Reads a score CSV. Method and config come from the sidecar when one
    /// exists; otherwise the table is marked [`ScoreMethod::Imported`].
    pub fn read(csv_path: &Path) -> Result<Self> {
        let rows = read_csv_rows(csv_path, &["sample_id", "score"])?;
        let mut sample_ids = Vec::with_capacity(rows.len());
        let mut scores = Vec::with_capacity(rows.len());
        let mut seen = std::collections::HashSet::new();
        for row in rows {
            let s: f64 = parse_field(csv_path, &row[1], "score")?;
            if !s.is_finite() || s < 0.0 {
                return Err(Error::csv(
                    csv_path,
                    format!("score {s} for {} is not finite and >= 0", row[0]),
                ));
            }
            if !seen.insert(row[0].clone()) {
                return Err(Error::csv(csv_path, format!("duplicate sample id {}", row[0])));
            }
            sample_ids.push(row[0].clone());
            scores.push(s);
        }
        let sidecar_path = Self::sidecar_path(csv_path);
        let (method, config, checksum) = match std::fs::read_to_string(&sidecar_path) {
            Ok(text) => {
                let sc: Sidecar = serde_json::from_str(&text).map_err(|e| Error::csv(&sidecar_path, e))?;
                (sc.method, sc.config, sc.source_manifest_checksum)
            }
            Err(_) => (ScoreMethod::Imported, BTreeMap::new(), String::new()),
        };
        Ok(Self {
            method,
            config,
            sample_ids,
            scores,
            source_manifest_checksum: checksum,
        })
    }
}

/// Inclusive epoch range `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochRange {
    pub start: usize,
    pub end: usize,
}

impl EpochRange {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn full(traj: &Trajectory) -> Self {
        Self::new(0, traj.epochs() - 1)
    }

    fn check(&self, epochs: usize) -> Result<()> {
        if self.start > self.end || self.end >= epochs {
            return Err(Error::EmptyRange {
                start: self.start,
                end: self.end,
            });
        }
        Ok(())
    }

    fn len(&self) -> usize {
        self.end - self.start + 1
    }
}

/// Base series fed into the CAD windowing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CadBase {
    #[default]
    El2n,
    TargetProb,
}

impl FromStr for CadBase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "el2n" => Ok(CadBase::El2n),
            "target-prob" | "target_prob" => Ok(CadBase::TargetProb),
            _ => Err(Error::InvalidParameter(format!("unknown CAD base `{s}`"))),
        }
    }
}

/// Window parameters for CAD-Prune.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreParams {
    /// Softmax temperature `T`.
    pub temperature: f64,
    /// Uncertainty window length `J` in epochs.
    pub window: usize,
    /// Number `W` of trailing windows averaged.
    pub width: usize,
    /// Compute-matched epoch budget `K`.
    pub budget: usize,
}

impl ScoreParams {
    pub fn validate(&self, epochs: usize) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "T must be positive, got {}",
                self.temperature
            )));
        }
        if self.window < 2 {
            return Err(Error::InvalidParameter(format!("J must be >= 2, got {}", self.window)));
        }
        if self.width < 1 {
            return Err(Error::InvalidParameter("W must be >= 1".into()));
        }
        if self.budget > epochs {
            return Err(Error::InvalidParameter(format!(
                "K = {} exceeds the {epochs} stored epochs",
                self.budget
            )));
        }
        if self.budget < self.window + self.width {
            return Err(Error::InvalidParameter(format!(
                "K - J - W must be >= 0 (K={}, J={}, W={})",
                self.budget, self.window, self.width
            )));
        }
        Ok(())
    }
}

fn l2_distance<A, B>(a: &[A], b: &[B]) -> f64
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.into() - y.into();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// `||p - onehot(y)||_2` for one sample at one epoch.
pub fn el2n_at(traj: &Trajectory, epoch: usize, sample: usize) -> f64 {
    let y = traj.label(sample) as usize;
    traj.row(epoch, sample)
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let d = f64::from(p) - if k == y { 1.0 } else { 0.0 };
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Per-epoch EL2N series of one sample over epochs `[0, epochs)`.
pub fn el2n_series(traj: &Trajectory, sample: usize, epochs: usize) -> Vec<f64> {
    (0..epochs).map(|e| el2n_at(traj, e, sample)).collect()
}

fn per_sample<F>(traj: &Trajectory, f: F) -> Vec<f64>
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    (0..traj.samples()).into_par_iter().map(f).collect()
}

/// Mean of `||p - onehot(y)||_2` over the epoch range.
pub fn el2n(traj: &Trajectory, range: EpochRange) -> Result<ScoreTable> {
    range.check(traj.epochs())?;
    let scores = per_sample(traj, |n| {
        (range.start..=range.end).map(|e| el2n_at(traj, e, n)).sum::<f64>() / range.len() as f64
    });
    let config = BTreeMap::from([
        ("epoch_start".to_string(), json!(range.start)),
        ("epoch_end".to_string(), json!(range.end)),
    ]);
    Ok(ScoreTable::build(ScoreMethod::El2n, config, traj, scores))
}

/// Soft-label EL2N: `(1/T) * mean ||p - q||_2` with `q` the fixed teacher row.
pub fn el2n_sl(traj: &Trajectory, temperature: f64, range: EpochRange) -> Result<ScoreTable> {
    if traj.teacher().is_none() {
        return Err(Error::MissingTeacher);
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "T must be positive, got {temperature}"
        )));
    }
    range.check(traj.epochs())?;
    let scores = per_sample(traj, |n| {
        let q = traj.teacher_row(n).expect("teacher present");
        let mean = (range.start..=range.end)
            .map(|e| l2_distance(traj.row(e, n), q))
            .sum::<f64>()
            / range.len() as f64;
        mean / temperature
    });
    let config = BTreeMap::from([
        ("T".to_string(), json!(temperature)),
        ("epoch_start".to_string(), json!(range.start)),
        ("epoch_end".to_string(), json!(range.end)),
    ]);
    Ok(ScoreTable::build(ScoreMethod::El2nSl, config, traj, scores))
}

/// Analytic and finite-difference logit gradients of the temperature-`T`
/// loss `KL(q || softmax(f / T))`, evaluated at `f = T * ln p`.
#[derive(Debug, Clone, PartialEq)]
pub struct KlGradients {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl KlGradients {
    pub fn max_abs_deviation(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max)
    }

    /// Max deviation divided by the largest analytic component.
    pub fn max_rel_deviation(&self) -> f64 {
        let scale = self.analytic.iter().map(|a| a.abs()).fold(0.0, f64::max);
        if scale == 0.0 {
            self.max_abs_deviation()
        } else {
            self.max_abs_deviation() / scale
        }
    }
}

const FD_STEP: f64 = 1e-5;

fn kl_loss(logits: &[f64], q: &[f64], temperature: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|f| f / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + scaled.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    q.iter()
        .zip(&scaled)
        .filter(|(qk, _)| **qk > 0.0)
        .map(|(qk, s)| qk * (qk.ln() - (s - log_z)))
        .sum()
}

fn check_distribution(v: &[f64], name: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidParameter(format!(
            "{name} has negative or non-finite entries"
        )));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > crate::trajstore::NORMALIZATION_TOLERANCE {
        return Err(Error::InvalidParameter(format!("{name} sums to {sum}, not 1")));
    }
    Ok(())
}

/// Central-difference gradient check of the KL logit gradient identity.
pub fn kl_gradients(p: &[f64], q: &[f64], temperature: f64) -> Result<KlGradients> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "p has {} classes, q has {}",
            p.len(),
            q.len()
        )));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "T must be positive, got {temperature}"
        )));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    if let Some(k) = p.iter().position(|&pk| pk == 0.0) {
        return Err(Error::Domain(format!("p[{k}] = 0 has no logit")));
    }
    let logits: Vec<f64> = p.iter().map(|pk| temperature * pk.ln()).collect();
    let analytic = p.iter().zip(q).map(|(pk, qk)| (pk - qk) / temperature).collect();
    let numeric = (0..p.len())
        .map(|k| {
            let mut plus = logits.clone();
            let mut minus = logits.clone();
            plus[k] += FD_STEP;
            minus[k] -= FD_STEP;
            (kl_loss(&plus, q, temperature) - kl_loss(&minus, q, temperature)) / (2.0 * FD_STEP)
        })
        .collect();
    Ok(KlGradients { analytic, numeric })
}

/// Max absolute deviation between the finite-difference KL logit gradient
/// and `(p - q) / T`.
pub fn kl_gradient_check(p: &[f64], q: &[f64], temperature: f64) -> Result<f64> {
    Ok(kl_gradients(p, q, temperature)?.max_abs_deviation())
}

fn argmax(row: &[f32]) -> usize {
    // First index wins on ties.
    row.iter()
        .enumerate()
        .fold(
            (0, f32::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0
}

/// Forgetting events from a per-epoch correctness sequence. Never-correct
/// sequences score their length.
pub fn forgetting_events(correct: &[bool]) -> usize {
    if !correct.iter().any(|&c| c) {
        return correct.len();
    }
    correct.windows(2).filter(|w| w[0] && !w[1]).count()
}

/// Number of learned-then-forgotten transitions per sample.
pub fn forgetting(traj: &Trajectory) -> Result<ScoreTable> {
    if traj.epochs() < 2 {
        return Err(Error::InvalidParameter("forgetting needs at least 2 epochs".into()));
    }
    let scores = per_sample(traj, |n| {
        let y = traj.label(n) as usize;
        let correct: Vec<bool> = (0..traj.epochs()).map(|e| argmax(traj.row(e, n)) == y).collect();
        forgetting_events(&correct) as f64
    });
    Ok(ScoreTable::build(
        ScoreMethod::Forgetting,
        BTreeMap::new(),
        traj,
        scores,
    ))
}

fn sample_std(window: &[f64]) -> f64 {
    // Deviations are taken from the first element, so adding a constant to
    // the series leaves every intermediate value unchanged.
    let origin = window[0];
    let j = window.len() as f64;
    let mean = window.iter().map(|s| s - origin).sum::<f64>() / j;
    let ss: f64 = window.iter().map(|s| (s - origin - mean).powi(2)).sum();
    (ss / (j - 1.0)).sqrt()
}

/// `U_k` for every full window `[k, k + J)`: sample standard deviation with
/// denominator `J - 1`. Returns `K - J + 1` values.
pub fn uncertainty_series(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window < 2 {
        return Err(Error::InvalidParameter(format!("J must be >= 2, got {window}")));
    }
    if series.len() < window {
        return Err(Error::InvalidParameter(format!(
            "series of length {} is shorter than J = {window}",
            series.len()
        )));
    }
    Ok(series.windows(window).map(sample_std).collect())
}

/// CAD over a base series: mean of `U_k` for `k` in `[K-J-W, K-J)`, using
/// only the first `K` values of `series`.
pub fn cad_from_series(series: &[f64], window: usize, width: usize, budget: usize) -> Result<f64> {
    if budget > series.len() {
        return Err(Error::InvalidParameter(format!(
            "K = {budget} exceeds series length {}",
            series.len()
        )));
    }
    if width < 1 || budget < window + width {
        return Err(Error::InvalidParameter(format!(
            "K - J - W must be >= 0 with W >= 1 (K={budget}, J={window}, W={width})"
        )));
    }
    let u = uncertainty_series(&series[..budget], window)?;
    let first = budget - window - width;
    Ok(u[first..first + width].iter().sum::<f64>() / width as f64)
}

/// Dyn-Unc: mean of all `U_k` over the whole target-probability series.
pub fn dyn_unc(traj: &Trajectory, window: usize) -> Result<ScoreTable> {
    if window < 2 {
        return Err(Error::InvalidParameter(format!("J must be >= 2, got {window}")));
    }
    if traj.epochs() < window {
        return Err(Error::InvalidParameter(format!(
            "Dyn-Unc needs E >= J (E={}, J={window})",
            traj.epochs()
        )));
    }
    let scores = per_sample(traj, |n| {
        let u = uncertainty_series(&traj.target_series(n), window).expect("window checked");
        u.iter().sum::<f64>() / u.len() as f64
    });
    let config = BTreeMap::from([("J".to_string(), json!(window))]);
    Ok(ScoreTable::build(ScoreMethod::DynUnc, config, traj, scores))
}

/// CAD-Prune over the first `K` epochs of the trajectory.
pub fn cad_prune(traj: &Trajectory, params: &ScoreParams, base: CadBase) -> Result<ScoreTable> {
    params.validate(traj.epochs())?;
    let ScoreParams {
        window, width, budget, ..
    } = *params;
    let scores = per_sample(traj, |n| {
        let series = match base {
            CadBase::El2n => el2n_series(traj, n, budget),
            CadBase::TargetProb => traj.target_series(n),
        };
        cad_from_series(&series, window, width, budget).expect("params validated")
    });
    let config = BTreeMap::from([
        ("J".to_string(), json!(window)),
        ("W".to_string(), json!(width)),
        ("K".to_string(), json!(budget)),
        ("base".to_string(), json!(base)),
    ]);
    Ok(ScoreTable::build(ScoreMethod::Cad, config, traj, scores))
}
