//! Seeded synthetic trajectories for desk-scale experiments.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_trajectory, Trajectory};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Every epoch repeats the same probabilities.
    Constant,
    /// A designated tenth of the samples is only learned in the final third
    /// of training; a fifth oscillates early and is then learned for good.
    LateLearner,
    /// Per-class logits follow independent random walks.
    RandomWalk,
    /// Fixed teacher soft labels with every prediction at a near-constant
    /// L2 distance from its teacher row.
    SlClustered,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Constant => "constant",
            Scenario::LateLearner => "late-learner",
            Scenario::RandomWalk => "random-walk",
            Scenario::SlClustered => "sl-clustered",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Scenario::Constant),
            "late-learner" => Ok(Scenario::LateLearner),
            "random-walk" => Ok(Scenario::RandomWalk),
            "sl-clustered" => Ok(Scenario::SlClustered),
            other => Err(Error::InvalidParameter(format!("unknown scenario `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub epochs: usize,
    pub samples: usize,
    pub classes: usize,
    pub seed: u64,
    pub scenario: Scenario,
}

#[derive(Clone, Copy, PartialEq)]
enum Role {
    Late,
    EarlyOscillator,
    Steady,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.samples == 0 || self.classes == 0 {
            return Err(Error::InvalidParameter("synthetic E, N, C must all be >= 1".into()));
        }
        Ok(())
    }

    fn roles(&self) -> Vec<Role> {
        let mut order: Vec<usize> = (0..self.samples).collect();
        // Independent stream so the designation does not depend on E or C.
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6c61_7465_6c65_6172);
        order.shuffle(&mut rng);
        let late = self.samples.div_ceil(10);
        let early = self.samples.div_ceil(5).min(self.samples - late);
        let mut roles = vec![Role::Steady; self.samples];
        for &n in &order[..late] {
            roles[n] = Role::Late;
        }
        for &n in &order[late..late + early] {
            roles[n] = Role::EarlyOscillator;
        }
        roles
    }
}

/// Indices of the designated late-learner samples (ascending). Empty unless
/// the scenario is [`Scenario::LateLearner`].
pub fn late_learners(spec: &SyntheticSpec) -> Vec<usize> {
    if spec.scenario != Scenario::LateLearner {
        return Vec::new();
    }
    spec.roles()
        .iter()
        .enumerate()
        .filter(|(_, r)| **r == Role::Late)
        .map(|(n, _)| n)
        .collect()
}

/// Spreads `1 - target` over the non-target classes in proportion to `weights`.
fn row_with_target(classes: usize, label: usize, target: f64, weights: &[f64]) -> Vec<f64> {
    if classes == 1 {
        return vec![1.0];
    }
    let rest: f64 = weights
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != label)
        .map(|(_, w)| w)
        .sum();
    (0..classes)
        .map(|k| {
            if k == label {
                target
            } else {
                (1.0 - target) * weights[k] / rest
            }
        })
        .collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn zero_sum_unit(rng: &mut ChaCha8Rng, classes: usize) -> Vec<f64> {
    if classes == 1 {
        return vec![0.0];
    }
    loop {
        let g: Vec<f64> = (0..classes).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mean = g.iter().sum::<f64>() / classes as f64;
        let centered: Vec<f64> = g.iter().map(|v| v - mean).collect();
        let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return centered.into_iter().map(|v| v / norm).collect();
        }
    }
}

/// Generates the trajectory for `spec`. Pure in `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Trajectory> {
    spec.validate()?;
    let (e_count, n_count, c_count) = (spec.epochs, spec.samples, spec.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels: Vec<u32> = (0..n_count).map(|n| (n % c_count) as u32).collect();
    let ids: Vec<String> = (0..n_count).map(|n| format!("s{n:06}")).collect();

    // Rows per sample, then transposed into the epoch-major layout.
    let mut per_sample: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_count);
    let mut teacher = None;

    match spec.scenario {
        Scenario::Constant => {
            for _ in 0..n_count {
                let logits: Vec<f64> = (0..c_count).map(|_| rng.random_range(-2.0..2.0)).collect();
                per_sample.push(vec![softmax(&logits); e_count]);
            }
        }
        Scenario::LateLearner => {
            let roles = spec.roles();
            let rise_start = 2 * e_count / 3;
            let early_end = e_count / 3;
            for n in 0..n_count {
                let label = labels[n] as usize;
                let weights: Vec<f64> = (0..c_count).map(|_| 0.5 + rng.random::<f64>()).collect();
                let level = rng.random_range(0.3..0.95);
                let series: Vec<f64> = (0..e_count)
                    .map(|e| match roles[n] {
                        Role::Late if e < rise_start => 0.04 + 0.12 * (e % 2) as f64 + rng.random_range(-0.01..0.01),
                        Role::Late => 0.2 + 0.75 * (e - rise_start + 1) as f64 / (e_count - rise_start) as f64,
                        Role::EarlyOscillator if e < early_end => {
                            if e % 2 == 0 {
                                0.15
                            } else {
                                0.85
                            }
                        }
                        Role::EarlyOscillator => 0.95,
                        Role::Steady => level,
                    })
                    .collect();
                per_sample.push(
                    series
                        .into_iter()
                        .map(|t| row_with_target(c_count, label, t, &weights))
                        .collect(),
                );
            }
        }
        Scenario::RandomWalk => {
            for _ in 0..n_count {
                let mut logits: Vec<f64> = (0..c_count).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mut rows = Vec::with_capacity(e_count);
                for _ in 0..e_count {
                    rows.push(softmax(&logits));
                    for z in logits.iter_mut() {
                        *z += rng.random_range(-0.5..0.5);
                    }
                }
                per_sample.push(rows);
            }
        }
        Scenario::SlClustered => {
            let radius = 0.1 / c_count as f64;
            let mut teacher_rows = Vec::with_capacity(n_count * c_count);
            for &label in &labels {
                let label = label as usize;
                let w: Vec<f64> = (0..c_count).map(|_| 0.5 + rng.random::<f64>()).collect();
                let w_total: f64 = w.iter().sum();
                let q: Vec<f64> = (0..c_count)
                    .map(|k| 0.4 * f64::from(u8::from(k == label)) + 0.6 * w[k] / w_total)
                    .collect();
                let rows = (0..e_count)
                    .map(|_| {
                        let r = radius * (1.0 + rng.random_range(-0.05..0.05));
                        let d = zero_sum_unit(&mut rng, c_count);
                        q.iter().zip(&d).map(|(qk, dk)| qk + r * dk).collect()
                    })
                    .collect();
                teacher_rows.extend(q.iter().map(|&v| v as f32));
                per_sample.push(rows);
            }
            teacher = Some(teacher_rows);
        }
    }

    let mut probs = Vec::with_capacity(e_count * n_count * c_count);
    for e in 0..e_count {
        for rows in &per_sample {
            probs.extend(rows[e].iter().map(|&p| p as f32));
        }
    }
    let lr = (0..e_count)
        .map(|e| (0.05 * (1.0 + (PI * e as f64 / e_count as f64).cos())) as f32)
        .collect();
    Trajectory::new(e_count, n_count, c_count, probs, labels, teacher, Some(lr), ids)
}

/// Generates `spec` and writes it as a store under `dir`.
pub fn write_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<PathBuf> {
    let traj = generate_synthetic(spec)?;
    write_trajectory(&traj, dir)
}
