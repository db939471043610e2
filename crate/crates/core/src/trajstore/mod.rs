//! On-disk store for per-sample prediction trajectories.
//!
//! A store is a directory holding `manifest.json` plus raw little-endian
//! arrays. Probabilities are laid out row-major as `[epoch][sample][class]`
//! so one epoch is a contiguous slab.

mod synthetic;

pub use synthetic::{generate_synthetic, late_learners, write_synthetic, Scenario, SyntheticSpec};

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const FORMAT_VERSION: u32 = 1;
pub const NORMALIZATION_TOLERANCE: f64 = 1e-4;

pub const MANIFEST_FILE: &str = "manifest.json";
const PROBS_FILE: &str = "probs.bin";
const LABELS_FILE: &str = "labels.bin";
const TEACHER_FILE: &str = "teacher.bin";
const LR_FILE: &str = "lr.bin";
const IDS_FILE: &str = "ids.txt";

/// 64-bit FNV-1a over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

pub fn fnv1a64_hex(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a64(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFiles {
    pub probs: String,
    pub labels: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<String>,
    pub ids: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryManifest {
    pub format_version: u32,
    #[serde(rename = "E")]
    pub epochs: usize,
    #[serde(rename = "N")]
    pub samples: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    pub endianness: String,
    pub dtype: String,
    pub has_teacher: bool,
    pub files: ManifestFiles,
    /// File key (`probs`, `labels`, ...) to FNV-1a 64 hex digest.
    pub checksums: BTreeMap<String, String>,
}

/// Per-sample, per-epoch class probabilities with labels and optional
/// teacher soft labels and learning-rate schedule. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    epochs: usize,
    samples: usize,
    classes: usize,
    probs: Vec<f32>,
    labels: Vec<u32>,
    teacher: Option<Vec<f32>>,
    lr: Option<Vec<f32>>,
    sample_ids: Vec<String>,
    index_of: HashMap<String, usize>,
}

fn check_row(row: &[f32], epoch: Option<usize>, sample: usize) -> Result<()> {
    if let Some(bad) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidTensor(format!(
            "probability {bad} outside [0, 1] at epoch {epoch:?}, sample {sample}"
        )));
    }
    let sum: f64 = row.iter().map(|&p| f64::from(p)).sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(Error::Normalization { epoch, sample, sum });
    }
    Ok(())
}

impl Trajectory {
    /// Builds a trajectory and checks every invariant of the store format.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        epochs: usize,
        samples: usize,
        classes: usize,
        probs: Vec<f32>,
        labels: Vec<u32>,
        teacher: Option<Vec<f32>>,
        lr: Option<Vec<f32>>,
        sample_ids: Vec<String>,
    ) -> Result<Self> {
        if epochs == 0 || samples == 0 || classes == 0 {
            return Err(Error::InvalidTensor(format!(
                "E, N, C must be positive (got {epochs}, {samples}, {classes})"
            )));
        }
        if probs.len() != epochs * samples * classes {
            return Err(Error::InvalidTensor(format!(
                "probs has {} entries, expected {}",
                probs.len(),
                epochs * samples * classes
            )));
        }
        if labels.len() != samples || sample_ids.len() != samples {
            return Err(Error::InvalidTensor(format!(
                "{} labels and {} ids for {samples} samples",
                labels.len(),
                sample_ids.len()
            )));
        }
        if let Some((n, &y)) = labels.iter().enumerate().find(|(_, &y)| y as usize >= classes) {
            return Err(Error::InvalidTensor(format!(
                "label {y} of sample {n} is not < C={classes}"
            )));
        }
        let mut index_of = HashMap::with_capacity(samples);
        for (n, id) in sample_ids.iter().enumerate() {
            if id.is_empty() || id.contains([',', '\n', '\r']) {
                return Err(Error::InvalidTensor(format!(
                    "sample id {id:?} is empty or contains a separator"
                )));
            }
            if index_of.insert(id.clone(), n).is_some() {
                return Err(Error::InvalidTensor(format!("duplicate sample id {id}")));
            }
        }
        for (i, row) in probs.chunks_exact(classes).enumerate() {
            check_row(row, Some(i / samples), i % samples)?;
        }
        if let Some(t) = &teacher {
            if t.len() != samples * classes {
                return Err(Error::InvalidTensor(format!(
                    "teacher has {} entries, expected {}",
                    t.len(),
                    samples * classes
                )));
            }
            for (n, row) in t.chunks_exact(classes).enumerate() {
                check_row(row, None, n)?;
            }
        }
        if let Some(lr) = &lr {
            if lr.len() != epochs {
                return Err(Error::InvalidTensor(format!(
                    "lr has {} entries, expected {epochs}",
                    lr.len()
                )));
            }
            if lr.iter().any(|r| !r.is_finite() || *r < 0.0) {
                return Err(Error::InvalidTensor(
                    "learning rates must be finite and non-negative".into(),
                ));
            }
        }
        Ok(Self {
            epochs,
            samples,
            classes,
            probs,
            labels,
            teacher,
            lr,
            sample_ids,
            index_of,
        })
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    /// Probability vector of `sample` at `epoch`.
    pub fn row(&self, epoch: usize, sample: usize) -> &[f32] {
        let start = (epoch * self.samples + sample) * self.classes;
        &self.probs[start..start + self.classes]
    }

    /// Contiguous slab of all samples at one epoch.
    pub fn epoch_slab(&self, epoch: usize) -> &[f32] {
        let len = self.samples * self.classes;
        &self.probs[epoch * len..(epoch + 1) * len]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, sample: usize) -> u32 {
        self.labels[sample]
    }

    pub fn teacher(&self) -> Option<&[f32]> {
        self.teacher.as_deref()
    }

    pub fn teacher_row(&self, sample: usize) -> Option<&[f32]> {
        self.teacher
            .as_ref()
            .map(|t| &t[sample * self.classes..(sample + 1) * self.classes])
    }

    pub fn lr_schedule(&self) -> Option<&[f32]> {
        self.lr.as_deref()
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn index_of(&self, sample_id: &str) -> Option<usize> {
        self.index_of.get(sample_id).copied()
    }

    pub fn class_of(&self, sample_id: &str) -> Option<u32> {
        self.index_of(sample_id).map(|n| self.labels[n])
    }

    /// Sample indices grouped by class, each group in store order.
    pub fn samples_by_class(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (n, &y) in self.labels.iter().enumerate() {
            out.entry(y).or_default().push(n);
        }
        out
    }

    /// Target-class probability of `sample` over all epochs.
    pub fn target_series(&self, sample: usize) -> Vec<f64> {
        let y = self.labels[sample] as usize;
        (0..self.epochs).map(|e| f64::from(self.row(e, sample)[y])).collect()
    }

    fn encoded_files(&self) -> Vec<(&'static str, &'static str, Vec<u8>)> {
        let mut files = vec![
            ("probs", PROBS_FILE, f32_bytes(&self.probs)),
            (
                "labels",
                LABELS_FILE,
                self.labels.iter().flat_map(|l| l.to_le_bytes()).collect(),
            ),
        ];
        if let Some(t) = &self.teacher {
            files.push(("teacher", TEACHER_FILE, f32_bytes(t)));
        }
        if let Some(lr) = &self.lr {
            files.push(("lr", LR_FILE, f32_bytes(lr)));
        }
        let mut ids = String::new();
        for id in &self.sample_ids {
            ids.push_str(id);
            ids.push('\n');
        }
        files.push(("ids", IDS_FILE, ids.into_bytes()));
        files
    }

    fn manifest_for(&self, files: &[(&'static str, &'static str, Vec<u8>)]) -> TrajectoryManifest {
        TrajectoryManifest {
            format_version: FORMAT_VERSION,
            epochs: self.epochs,
            samples: self.samples,
            classes: self.classes,
            endianness: "little".into(),
            dtype: "float32".into(),
            has_teacher: self.teacher.is_some(),
            files: ManifestFiles {
                probs: PROBS_FILE.into(),
                labels: LABELS_FILE.into(),
                teacher: self.teacher.as_ref().map(|_| TEACHER_FILE.into()),
                lr: self.lr.as_ref().map(|_| LR_FILE.into()),
                ids: IDS_FILE.into(),
            },
            checksums: files
                .iter()
                .map(|(key, _, bytes)| (key.to_string(), fnv1a64_hex(bytes)))
                .collect(),
        }
    }

    /// The manifest this trajectory serializes to.
    pub fn manifest(&self) -> TrajectoryManifest {
        self.manifest_for(&self.encoded_files())
    }

    /// FNV-1a digest of the canonical `manifest.json` bytes. Identifies the
    /// exact data a score table was computed from.
    pub fn manifest_checksum(&self) -> String {
        fnv1a64_hex(&manifest_bytes(&self.manifest()))
    }
}

fn manifest_bytes(m: &TrajectoryManifest) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(m).expect("manifest serializes");
    bytes.push(b'\n');
    bytes
}

fn f32_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Writes `traj` as a store under `dir`, creating it if needed. Data files
/// are written first and the manifest last, each via temp-and-rename.
pub fn write_trajectory(traj: &Trajectory, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = traj.encoded_files();
    for (_, name, bytes) in &files {
        write_atomic(&dir.join(name), bytes)?;
    }
    let manifest = traj.manifest_for(&files);
    write_atomic(&dir.join(MANIFEST_FILE), &manifest_bytes(&manifest))?;
    Ok(dir.to_path_buf())
}

pub fn read_manifest(dir: &Path) -> Result<TrajectoryManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: TrajectoryManifest = serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    if manifest.endianness != "little" {
        return Err(Error::Manifest(format!(
            "endianness must be \"little\", got {:?}",
            manifest.endianness
        )));
    }
    if manifest.dtype != "float32" {
        return Err(Error::Manifest(format!(
            "dtype must be \"float32\", got {:?}",
            manifest.dtype
        )));
    }
    if manifest.has_teacher != manifest.files.teacher.is_some() {
        return Err(Error::Manifest("has_teacher disagrees with files.teacher".into()));
    }
    Ok(manifest)
}

/// Reads one referenced file, checking its byte length before its checksum
/// so truncation is reported as a shape problem.
fn read_checked(
    dir: &Path,
    manifest: &TrajectoryManifest,
    key: &str,
    name: &str,
    expected_len: Option<u64>,
) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if let Some(expected) = expected_len {
        if bytes.len() as u64 != expected {
            return Err(Error::ShapeMismatch {
                file: name.to_string(),
                expected,
                actual: bytes.len() as u64,
            });
        }
    }
    let expected = manifest
        .checksums
        .get(key)
        .ok_or_else(|| Error::Manifest(format!("no checksum for `{key}`")))?;
    let actual = fnv1a64_hex(&bytes);
    if !expected.eq_ignore_ascii_case(&actual) {
        return Err(Error::ChecksumMismatch {
            file: name.to_string(),
            expected: expected.clone(),
            actual,
        });
    }
    Ok(bytes)
}

/// Loads and fully validates a trajectory store.
pub fn load_trajectory(dir: &Path) -> Result<Trajectory> {
    let m = read_manifest(dir)?;
    let (e, n, c) = (m.epochs as u64, m.samples as u64, m.classes as u64);
    let probs = read_checked(dir, &m, "probs", &m.files.probs, Some(e * n * c * 4))?;
    let labels = read_checked(dir, &m, "labels", &m.files.labels, Some(n * 4))?;
    let teacher = match &m.files.teacher {
        Some(name) => Some(decode_f32(&read_checked(dir, &m, "teacher", name, Some(n * c * 4))?)),
        None => None,
    };
    let lr = match &m.files.lr {
        Some(name) => Some(decode_f32(&read_checked(dir, &m, "lr", name, Some(e * 4))?)),
        None => None,
    };
    let ids_raw = read_checked(dir, &m, "ids", &m.files.ids, None)?;
    let ids_text =
        String::from_utf8(ids_raw).map_err(|_| Error::InvalidTensor(format!("{} is not UTF-8", m.files.ids)))?;
    if !ids_text.is_empty() && !ids_text.ends_with('\n') {
        return Err(Error::InvalidTensor(format!("{} must be LF-terminated", m.files.ids)));
    }
    let ids: Vec<String> = ids_text.lines().map(str::to_string).collect();
    if ids.len() != m.samples {
        return Err(Error::ShapeMismatch {
            file: m.files.ids.clone(),
            expected: n,
            actual: ids.len() as u64,
        });
    }
    let labels = labels
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Trajectory::new(
        m.epochs,
        m.samples,
        m.classes,
        decode_f32(&probs),
        labels,
        teacher,
        lr,
        ids,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Trajectory {
        Trajectory::new(1, 1, 2, vec![0.5, 0.5], vec![0], None, None, vec!["a".into()]).unwrap()
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn smallest_store_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        write_trajectory(&tiny(), dir.path()).unwrap();
        let t = load_trajectory(dir.path()).unwrap();
        assert_eq!((t.epochs(), t.samples(), t.classes()), (1, 1, 2));
        assert_eq!(t.row(0, 0), &[0.5, 0.5]);
        assert_eq!(t.label(0), 0);
        assert_eq!(t.class_of("a"), Some(0));
    }

    #[test]
    fn manifest_has_exact_keys() {
        let dir = tempfile::tempdir().unwrap();
        write_trajectory(&tiny(), dir.path()).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        let mut expected = vec![
            "format_version",
            "E",
            "N",
            "C",
            "endianness",
            "dtype",
            "has_teacher",
            "files",
            "checksums",
        ];
        expected.sort();
        let mut keys = keys;
        keys.sort();
        assert_eq!(keys, expected);
    }

    #[test]
    fn short_probs_file_is_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        write_trajectory(&tiny(), dir.path()).unwrap();
        let p = dir.path().join(PROBS_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_trajectory(dir.path()), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn flipped_byte_is_checksum_error() {
        let dir = tempfile::tempdir().unwrap();
        write_trajectory(&tiny(), dir.path()).unwrap();
        let p = dir.path().join(LABELS_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes[3] ^= 0x01;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            load_trajectory(dir.path()),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_trajectory(&tiny(), dir.path()).unwrap();
        fs::remove_file(dir.path().join(IDS_FILE)).unwrap();
        assert!(matches!(load_trajectory(dir.path()), Err(Error::MissingFile(_))));
    }

    #[test]
    fn denormalized_row_is_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        write_trajectory(&tiny(), dir.path()).unwrap();
        // Rewrite probs with a bad row and a matching checksum.
        let bad = f32_bytes(&[0.5, 0.4]);
        fs::write(dir.path().join(PROBS_FILE), &bad).unwrap();
        let mut m = read_manifest(dir.path()).unwrap();
        m.checksums.insert("probs".into(), fnv1a64_hex(&bad));
        fs::write(dir.path().join(MANIFEST_FILE), manifest_bytes(&m)).unwrap();
        assert!(matches!(load_trajectory(dir.path()), Err(Error::Normalization { .. })));
    }

    #[test]
    fn tolerance_edge() {
        let ok = Trajectory::new(1, 1, 2, vec![0.50004, 0.5], vec![0], None, None, vec!["a".into()]);
        assert!(ok.is_ok());
        let bad = Trajectory::new(1, 1, 2, vec![0.5002, 0.5], vec![0], None, None, vec!["a".into()]);
        assert!(matches!(bad, Err(Error::Normalization { .. })));
    }

    #[test]
    fn rejects_bad_labels_and_duplicate_ids() {
        let r = Trajectory::new(1, 1, 2, vec![0.5, 0.5], vec![2], None, None, vec!["a".into()]);
        assert!(matches!(r, Err(Error::InvalidTensor(_))));
        let r = Trajectory::new(
            1,
            2,
            1,
            vec![1.0, 1.0],
            vec![0, 0],
            None,
            None,
            vec!["a".into(), "a".into()],
        );
        assert!(matches!(r, Err(Error::InvalidTensor(_))));
    }

    #[test]
    fn teacher_rows_are_checked() {
        let r = Trajectory::new(
            1,
            1,
            2,
            vec![0.5, 0.5],
            vec![0],
            Some(vec![0.9, 0.3]),
            None,
            vec!["a".into()],
        );
        assert!(matches!(r, Err(Error::Normalization { epoch: None, .. })));
    }
}
