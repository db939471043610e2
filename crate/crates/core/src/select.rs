//! Class-balanced subset selection and Pareto-frontier marking.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_sig9, parse_field, read_csv_rows, write_atomic};
use crate::scores::ScoreTable;
use crate::trajstore::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortOrder {
    #[default]
    Ascending,
    Descending,
}

impl FromStr for SortOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ascending" | "asc" => Ok(SortOrder::Ascending),
            "descending" | "desc" => Ok(SortOrder::Descending),
            _ => Err(Error::InvalidParameter(format!("unknown order `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_method: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_checksum: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start_quantile: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window_offset: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order: Option<SortOrder>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Class-balanced selection. Entries are grouped by ascending class; within
/// a class they keep selection order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSpec {
    pub sample_ids: Vec<String>,
    pub classes: Vec<u32>,
    pub ipc: usize,
    pub provenance: Provenance,
    pub class_histogram: BTreeMap<u32, usize>,
}

impl SubsetSpec {
    fn from_groups(groups: Vec<(u32, Vec<String>)>, ipc: usize, provenance: Provenance) -> Self {
        let mut sample_ids = Vec::new();
        let mut classes = Vec::new();
        let mut class_histogram = BTreeMap::new();
        for (class, ids) in groups {
            class_histogram.insert(class, ids.len());
            classes.extend(std::iter::repeat_n(class, ids.len()));
            sample_ids.extend(ids);
        }
        let spec = Self {
            sample_ids,
            classes,
            ipc,
            provenance,
            class_histogram,
        };
        debug_assert!(spec.check().is_ok());
        spec
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn contains(&self, sample_id: &str) -> bool {
        self.sample_ids.iter().any(|s| s == sample_id)
    }

    /// Sample ids of one class, in selection order.
    pub fn class_members(&self, class: u32) -> Vec<&str> {
        self.sample_ids
            .iter()
            .zip(&self.classes)
            .filter(|(_, c)| **c == class)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    /// Exact class balance and unique ids.
    pub fn check(&self) -> Result<()> {
        if self.sample_ids.len() != self.classes.len() {
            return Err(Error::InvalidParameter(
                "subset ids and classes differ in length".into(),
            ));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.sample_ids.iter().find(|s| !seen.insert(s.as_str())) {
            return Err(Error::InvalidParameter(format!("duplicate id {dup} in subset")));
        }
        let mut hist: BTreeMap<u32, usize> = BTreeMap::new();
        for c in &self.classes {
            *hist.entry(*c).or_default() += 1;
        }
        if hist != self.class_histogram || hist.values().any(|&n| n != self.ipc) {
            return Err(Error::InvalidParameter(format!(
                "subset is not balanced at ipc {}: {hist:?}",
                self.ipc
            )));
        }
        Ok(())
    }

    /// `sample_id,class` rows, LF endings.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,class\n");
        for (id, c) in self.sample_ids.iter().zip(&self.classes) {
            out.push_str(&format!("{id},{c}\n"));
        }
        out
    }

    /// Writes the CSV plus a provenance JSON sidecar with the same stem.
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        write_atomic(csv_path, self.to_csv().as_bytes())?;
        let sidecar = serde_json::json!({
            "ipc": self.ipc,
            "provenance": self.provenance,
            "class_histogram": self.class_histogram,
        });
        let mut text = serde_json::to_string_pretty(&sidecar).expect("provenance serializes");
        text.push('\n');
        write_atomic(&csv_path.with_extension("json"), text.as_bytes())
    }

    /// Reads a subset CSV; provenance is taken from the sidecar if present.
    pub fn read(csv_path: &Path) -> Result<Self> {
        let rows = read_csv_rows(csv_path, &["sample_id", "class"])?;
        let mut groups: BTreeMap<u32, Vec<String>> = BTreeMap::new();
        for row in rows {
            let class: u32 = parse_field(csv_path, &row[1], "class")?;
            groups.entry(class).or_default().push(row[0].clone());
        }
        let ipc = groups.values().map(Vec::len).next().unwrap_or(0);
        let provenance = std::fs::read_to_string(csv_path.with_extension("json"))
            .ok()
            .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
            .and_then(|v| serde_json::from_value(v["provenance"].clone()).ok())
            .unwrap_or_else(|| Provenance {
                method: "imported".into(),
                ..Provenance::default()
            });
        let mut sample_ids = Vec::new();
        let mut classes = Vec::new();
        let mut class_histogram = BTreeMap::new();
        for (class, ids) in groups {
            class_histogram.insert(class, ids.len());
            classes.extend(std::iter::repeat_n(class, ids.len()));
            sample_ids.extend(ids);
        }
        let spec = Self {
            sample_ids,
            classes,
            ipc,
            provenance,
            class_histogram,
        };
        spec.check().map_err(|e| Error::csv(csv_path, e))?;
        Ok(spec)
    }
}

fn check_ipc(traj: &Trajectory, ipc: usize) -> Result<BTreeMap<u32, Vec<usize>>> {
    if ipc == 0 {
        return Err(Error::InvalidParameter("ipc must be >= 1".into()));
    }
    let by_class = traj.samples_by_class();
    for (&class, members) in &by_class {
        if members.len() < ipc {
            return Err(Error::InsufficientSamples {
                class,
                available: members.len(),
                required: ipc,
            });
        }
    }
    Ok(by_class)
}

/// Uniform per-class sampling without replacement. One seeded stream is
/// consumed class by class in ascending class order.
pub fn select_random(traj: &Trajectory, ipc: usize, seed: u64) -> Result<SubsetSpec> {
    let by_class = check_ipc(traj, ipc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = by_class
        .into_iter()
        .map(|(class, members)| {
            let mut picked: Vec<usize> = index::sample(&mut rng, members.len(), ipc).into_vec();
            picked.sort_unstable();
            let ids = picked
                .into_iter()
                .map(|i| traj.sample_ids()[members[i]].clone())
                .collect();
            (class, ids)
        })
        .collect();
    Ok(SubsetSpec::from_groups(
        groups,
        ipc,
        Provenance {
            method: "random".into(),
            seed: Some(seed),
            ..Provenance::default()
        },
    ))
}

/// Per-class members sorted by score in `order`, ties by sample id ascending.
fn ranked_classes(
    scores: &ScoreTable,
    traj: &Trajectory,
    order: SortOrder,
) -> Result<BTreeMap<u32, Vec<(String, f64)>>> {
    let lookup = scores.to_map();
    let mut out: BTreeMap<u32, Vec<(String, f64)>> = BTreeMap::new();
    for (class, members) in traj.samples_by_class() {
        let mut ranked = members
            .into_iter()
            .map(|n| {
                let id = &traj.sample_ids()[n];
                lookup
                    .get(id.as_str())
                    .map(|&s| (id.clone(), s))
                    .ok_or_else(|| Error::MissingScore(id.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        ranked.sort_by(|a, b| {
            let by_score = match order {
                SortOrder::Ascending => a.1.total_cmp(&b.1),
                SortOrder::Descending => b.1.total_cmp(&a.1),
            };
            by_score.then_with(|| a.0.cmp(&b.0))
        });
        out.insert(class, ranked);
    }
    Ok(out)
}

fn window_start(class_size: usize, ipc: usize, quantile: f64) -> usize {
    ((quantile * (class_size - ipc) as f64).floor() as usize).min(class_size - ipc)
}

/// Contiguous run of `ipc` samples per class starting at
/// `floor(q * (class_size - ipc))` in score order.
pub fn select_window(
    scores: &ScoreTable,
    traj: &Trajectory,
    ipc: usize,
    start_quantile: f64,
    order: SortOrder,
) -> Result<SubsetSpec> {
    if !(0.0..=1.0).contains(&start_quantile) {
        return Err(Error::WindowOutOfRange(format!(
            "start quantile {start_quantile} outside [0, 1]"
        )));
    }
    if ipc == 0 {
        return Err(Error::InvalidParameter("ipc must be >= 1".into()));
    }
    let ranked = ranked_classes(scores, traj, order)?;
    let mut groups = Vec::with_capacity(ranked.len());
    for (class, members) in ranked {
        if members.len() < ipc {
            return Err(Error::WindowOutOfRange(format!(
                "class {class} has {} samples, window needs {ipc}",
                members.len()
            )));
        }
        let start = window_start(members.len(), ipc, start_quantile);
        groups.push((
            class,
            members[start..start + ipc].iter().map(|(id, _)| id.clone()).collect(),
        ));
    }
    Ok(SubsetSpec::from_groups(
        groups,
        ipc,
        Provenance {
            method: "window".into(),
            score_method: Some(scores.method.to_string()),
            score_checksum: Some(scores.source_manifest_checksum.clone()),
            start_quantile: Some(start_quantile),
            order: Some(order),
            ..Provenance::default()
        },
    ))
}

/// Number of window offsets `0, stride, 2*stride, ... <= class_size - ipc`.
pub fn window_count(class_size: usize, ipc: usize, stride: usize) -> usize {
    (class_size - ipc) / stride + 1
}

/// Every ascending-score window at offsets that are multiples of `stride`.
/// Window `i` uses offset `i * stride` in every class; when class sizes
/// differ, only offsets valid in all classes are emitted.
pub fn sliding_window_enumerate(
    scores: &ScoreTable,
    traj: &Trajectory,
    ipc: usize,
    stride: usize,
) -> Result<Vec<SubsetSpec>> {
    if stride == 0 {
        return Err(Error::InvalidParameter("stride must be >= 1".into()));
    }
    if ipc == 0 {
        return Err(Error::InvalidParameter("ipc must be >= 1".into()));
    }
    let ranked = ranked_classes(scores, traj, SortOrder::Ascending)?;
    let mut count = usize::MAX;
    for (class, members) in &ranked {
        if members.len() < ipc {
            return Err(Error::WindowOutOfRange(format!(
                "class {class} has {} samples, window needs {ipc}",
                members.len()
            )));
        }
        count = count.min(window_count(members.len(), ipc, stride));
    }
    Ok((0..count)
        .map(|i| {
            let offset = i * stride;
            let groups = ranked
                .iter()
                .map(|(class, members)| {
                    (
                        *class,
                        members[offset..offset + ipc].iter().map(|(id, _)| id.clone()).collect(),
                    )
                })
                .collect();
            SubsetSpec::from_groups(
                groups,
                ipc,
                Provenance {
                    method: "sliding_window".into(),
                    score_method: Some(scores.method.to_string()),
                    score_checksum: Some(scores.source_manifest_checksum.clone()),
                    window_offset: Some(offset),
                    order: Some(SortOrder::Ascending),
                    ..Provenance::default()
                },
            )
        })
        .collect())
}

/// Default sweep stride: the smallest class size divided by 20, rounded up.
pub fn default_stride(traj: &Trajectory) -> usize {
    let smallest = traj.samples_by_class().values().map(Vec::len).min().unwrap_or(1);
    smallest.div_ceil(20).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub ipc: usize,
    pub fraction: f64,
    pub accuracy: f64,
    pub is_frontier: bool,
}

/// Marks, for each ipc, the highest-accuracy point (ties: smallest fraction,
/// then first occurrence). Returns every point, in input order.
pub fn pareto_frontier(points: &[(usize, f64, f64)]) -> Result<Vec<ParetoPoint>> {
    if points.is_empty() {
        return Err(Error::InvalidParameter(
            "pareto analysis needs at least one point".into(),
        ));
    }
    for &(ipc, f, acc) in points {
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::InvalidParameter(format!(
                "accuracy {acc} at ipc {ipc} outside [0, 1]"
            )));
        }
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "fraction {f} at ipc {ipc} outside (0, 1]"
            )));
        }
    }
    let mut best: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, &(ipc, f, acc)) in points.iter().enumerate() {
        let replace = match best.get(&ipc) {
            None => true,
            Some(&j) => {
                let (_, bf, bacc) = points[j];
                match acc.total_cmp(&bacc) {
                    Ordering::Greater => true,
                    Ordering::Equal => f < bf,
                    Ordering::Less => false,
                }
            }
        };
        if replace {
            best.insert(ipc, i);
        }
    }
    let winners: HashSet<usize> = best.into_values().collect();
    Ok(points
        .iter()
        .enumerate()
        .map(|(i, &(ipc, fraction, accuracy))| ParetoPoint {
            ipc,
            fraction,
            accuracy,
            is_frontier: winners.contains(&i),
        })
        .collect())
}

pub fn pareto_csv(points: &[ParetoPoint]) -> String {
    let mut out = String::from("ipc,f,accuracy,is_frontier\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.ipc,
            fmt_sig9(p.fraction),
            fmt_sig9(p.accuracy),
            p.is_frontier
        ));
    }
    out
}

/// Reads `ipc,f,accuracy` rows.
pub fn read_pareto_points(path: &Path) -> Result<Vec<(usize, f64, f64)>> {
    read_csv_rows(path, &["ipc", "f", "accuracy"])?
        .into_iter()
        .map(|row| {
            Ok((
                parse_field(path, &row[0], "ipc")?,
                parse_field(path, &row[1], "f")?,
                parse_field(path, &row[2], "accuracy")?,
            ))
        })
        .collect()
}
