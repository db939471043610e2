//! Distillation loss objectives evaluated on exported artifacts: trajectory
//! matching, BatchNorm statistic matching, feature (distribution) matching
//! and gradient matching.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Denominator guard for the trajectory-matching ratio.
pub const TM_EPSILON: f64 = 1e-12;

/// Flattened model parameters at one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub tag: i64,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn new(tag: i64, values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "parameter vector {tag} has non-finite entries"
            )));
        }
        Ok(Self { tag, values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Reads a raw little-endian f32 file.
    pub fn read_f32(path: &Path, tag: i64) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::ShapeMismatch {
                file: path.display().to_string(),
                expected: (bytes.len() / 4 * 4) as u64,
                actual: bytes.len() as u64,
            });
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Self::new(tag, values)
    }

    pub fn write_f32(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        write_atomic(path, &bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamIndexEntry {
    pub tag: i64,
    pub file: String,
    pub dim: usize,
}

/// JSON index of `theta_<tag>.bin` files living next to it.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamIndex {
    pub vectors: Vec<ParamIndexEntry>,
}

impl ParamIndex {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
    }

    /// Loads the vector with `tag`, resolving its file relative to `index_path`.
    pub fn load(&self, index_path: &Path, tag: i64) -> Result<ParamVector> {
        let entry = self
            .vectors
            .iter()
            .find(|e| e.tag == tag)
            .ok_or_else(|| Error::TagMismatch(format!("no parameter vector with tag {tag}")))?;
        let base = index_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let v = ParamVector::read_f32(&base.join(&entry.file), tag)?;
        if v.dim() != entry.dim {
            return Err(Error::DimensionMismatch(format!(
                "{} holds {} values, index says {}",
                entry.file,
                v.dim(),
                entry.dim
            )));
        }
        Ok(v)
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `||theta_hat - theta_tM||^2 / ||theta_t - theta_tM||^2`.
pub fn tm_loss(theta_t: &ParamVector, theta_tm: &ParamVector, theta_hat: &ParamVector) -> Result<f64> {
    if theta_t.dim() != theta_tm.dim() || theta_t.dim() != theta_hat.dim() {
        return Err(Error::DimensionMismatch(format!(
            "tm vectors have dims {}, {}, {}",
            theta_t.dim(),
            theta_tm.dim(),
            theta_hat.dim()
        )));
    }
    let denominator = squared_distance(&theta_t.values, &theta_tm.values);
    if denominator < TM_EPSILON {
        return Err(Error::DegenerateTrajectory { denominator });
    }
    Ok(squared_distance(&theta_hat.values, &theta_tm.values) / denominator)
}

/// Mean of [`tm_loss`] over aligned expert pairs and student endpoints.
pub fn tm_loss_averaged(experts: &[(ParamVector, ParamVector)], students: &[ParamVector]) -> Result<f64> {
    if experts.is_empty() {
        return Err(Error::InvalidParameter("no expert pairs supplied".into()));
    }
    if experts.len() != students.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} expert pairs but {} student endpoints",
            experts.len(),
            students.len()
        )));
    }
    let mut total = 0.0;
    for ((start, target), student) in experts.iter().zip(students) {
        total += tm_loss(start, target, student)?;
    }
    Ok(total / experts.len() as f64)
}

/// Batch statistics of one BatchNorm layer next to the teacher's running
/// statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStat {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layers: Vec<LayerStat>,
}

impl LayerStats {
    pub fn validate(&self) -> Result<()> {
        for (l, layer) in self.layers.iter().enumerate() {
            let d = layer.mean.len();
            if layer.var.len() != d || layer.running_mean.len() != d || layer.running_var.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "layer {l}: statistic vectors differ in length"
                )));
            }
            let all = layer
                .mean
                .iter()
                .chain(&layer.var)
                .chain(&layer.running_mean)
                .chain(&layer.running_var);
            if all.clone().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!("layer {l}: non-finite statistic")));
            }
            if layer.var.iter().chain(&layer.running_var).any(|v| *v < 0.0) {
                return Err(Error::InvalidParameter(format!("layer {l}: negative variance")));
            }
        }
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Whether per-layer distances are plain or squared L2 norms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormKind {
    #[default]
    L2,
    SquaredL2,
}

/// `sum_l ||mu_l - RM_l|| + lambda_var * sum_l ||var_l - RV_l||` with plain
/// L2 norms. `lambda_var = 1` gives the SRe2L objective.
pub fn bn_matching_loss(stats: &LayerStats, lambda_var: f64) -> Result<f64> {
    bn_matching_loss_with(stats, lambda_var, NormKind::L2)
}

pub fn bn_matching_loss_with(stats: &LayerStats, lambda_var: f64, norm: NormKind) -> Result<f64> {
    stats.validate()?;
    let dist = |a: &[f64], b: &[f64]| {
        let sq = squared_distance(a, b);
        match norm {
            NormKind::L2 => sq.sqrt(),
            NormKind::SquaredL2 => sq,
        }
    };
    let mean_term: f64 = stats.layers.iter().map(|l| dist(&l.mean, &l.running_mean)).sum();
    let var_term: f64 = stats.layers.iter().map(|l| dist(&l.var, &l.running_var)).sum();
    Ok(mean_term + lambda_var * var_term)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Real,
    Synthetic,
}

/// Embeddings of one batch under one feature extractor `model` and one
/// augmentation draw `augmentation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBatch {
    pub side: Side,
    pub augmentation: String,
    #[serde(default = "default_model_tag")]
    pub model: String,
    pub embeddings: Vec<Vec<f64>>,
}

fn default_model_tag() -> String {
    "0".into()
}

impl FeatureBatch {
    fn mean_embedding(&self) -> Result<Vec<f64>> {
        let first = self.embeddings.first().ok_or_else(|| {
            Error::InvalidParameter(format!(
                "empty {:?} batch for ({}, {})",
                self.side, self.model, self.augmentation
            ))
        })?;
        let d = first.len();
        let mut mean = vec![0.0; d];
        for row in &self.embeddings {
            if row.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "ragged embeddings in batch {}",
                    self.augmentation
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter("non-finite embedding".into()));
            }
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = self.embeddings.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Ok(mean)
    }
}

fn keyed(batches: &[FeatureBatch], side: Side) -> Result<BTreeMap<(String, String), &FeatureBatch>> {
    let mut out = BTreeMap::new();
    for b in batches {
        if b.side != side {
            return Err(Error::TagMismatch(format!(
                "batch ({}, {}) is marked {:?}, expected {side:?}",
                b.model, b.augmentation, b.side
            )));
        }
        if out.insert((b.model.clone(), b.augmentation.clone()), b).is_some() {
            return Err(Error::TagMismatch(format!(
                "duplicate ({}, {}) batch",
                b.model, b.augmentation
            )));
        }
    }
    Ok(out)
}

/// Mean over `(model, augmentation)` tags of the squared distance between
/// the real and synthetic mean embeddings.
pub fn dm_loss(real: &[FeatureBatch], synthetic: &[FeatureBatch]) -> Result<f64> {
    let real = keyed(real, Side::Real)?;
    let synthetic = keyed(synthetic, Side::Synthetic)?;
    if real.is_empty() {
        return Err(Error::InvalidParameter("no feature batches supplied".into()));
    }
    if real.keys().ne(synthetic.keys()) {
        return Err(Error::TagMismatch(
            "real and synthetic (model, augmentation) tags differ".into(),
        ));
    }
    let mut total = 0.0;
    for (key, r) in &real {
        let rm = r.mean_embedding()?;
        let sm = synthetic[key].mean_embedding()?;
        if rm.len() != sm.len() {
            return Err(Error::DimensionMismatch(format!(
                "embedding dims {} vs {} for {key:?}",
                rm.len(),
                sm.len()
            )));
        }
        total += squared_distance(&rm, &sm);
    }
    Ok(total / real.len() as f64)
}

/// Per-layer flattened gradients from one side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradVector {
    pub side: Side,
    pub layers: Vec<Vec<f64>>,
}

/// Layerwise cosine distance `sum_l (1 - cos(g_real_l, g_syn_l))`, averaged
/// over aligned gradient pairs.
pub fn dc_loss(real: &[GradVector], synthetic: &[GradVector]) -> Result<f64> {
    if real.is_empty() {
        return Err(Error::InvalidParameter("no gradients supplied".into()));
    }
    if real.len() != synthetic.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} real vs {} synthetic gradient sets",
            real.len(),
            synthetic.len()
        )));
    }
    let mut total = 0.0;
    for (r, s) in real.iter().zip(synthetic) {
        if r.side != Side::Real || s.side != Side::Synthetic {
            return Err(Error::TagMismatch("gradient sides are swapped or mislabeled".into()));
        }
        if r.layers.len() != s.layers.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} real layers vs {} synthetic layers",
                r.layers.len(),
                s.layers.len()
            )));
        }
        for (l, (gr, gs)) in r.layers.iter().zip(&s.layers).enumerate() {
            if gr.len() != gs.len() {
                return Err(Error::DimensionMismatch(format!(
                    "layer {l}: {} vs {} entries",
                    gr.len(),
                    gs.len()
                )));
            }
            let nr = gr.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ns = gs.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nr == 0.0 || ns == 0.0 || !nr.is_finite() || !ns.is_finite() {
                return Err(Error::ZeroNorm { layer: l });
            }
            let dot: f64 = gr.iter().zip(gs).map(|(a, b)| a * b).sum();
            let cos = (dot / (nr * ns)).clamp(-1.0, 1.0);
            total += 1.0 - cos;
        }
    }
    Ok(total / real.len() as f64)
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidParameter(format!("{}: {e}", path.display())))
}

pub fn read_feature_batches(path: &Path) -> Result<Vec<FeatureBatch>> {
    read_json(path)
}

pub fn read_grad_vectors(path: &Path) -> Result<Vec<GradVector>> {
    read_json(path)
}

/// Groups experts and students by tag for averaged TM evaluation.
pub fn tm_from_index(index_path: &Path, triples: &[(i64, i64, i64)]) -> Result<f64> {
    let index = ParamIndex::read(index_path)?;
    let mut cache: HashMap<i64, ParamVector> = HashMap::new();
    let mut get = |tag: i64| -> Result<ParamVector> {
        if let Some(v) = cache.get(&tag) {
            return Ok(v.clone());
        }
        let v = index.load(index_path, tag)?;
        cache.insert(tag, v.clone());
        Ok(v)
    };
    let mut experts = Vec::with_capacity(triples.len());
    let mut students = Vec::with_capacity(triples.len());
    for &(start, target, student) in triples {
        experts.push((get(start)?, get(target)?));
        students.push(get(student)?);
    }
    tm_loss_averaged(&experts, &students)
}
