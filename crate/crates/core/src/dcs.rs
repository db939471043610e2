//! Rank correlation between distillation losses and generalization errors,
//! with an optional subset-size adjustment, plus the reusable error table.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_sig9, parse_field, read_csv_rows, write_atomic};

/// Average (mid) ranks, 1-based: tied values share the mean of their
/// positions.
pub fn midranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Pearson correlation. Errors on fewer than 3 points or a constant side.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} values", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::TooFewRecords { n });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite value in correlation input".into()));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let scale = x.iter().chain(y).fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
    let tiny = 1e-24 * scale * scale * n as f64;
    if sxx <= tiny || syy <= tiny {
        return Err(Error::UndefinedCorrelation("one side is constant".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with midrank tie handling.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::TooFewRecords { n: x.len() });
    }
    pearson(&midranks(x), &midranks(y))
}

/// Residuals of the OLS fit `y ~ 1 + x`, or `None` when `x` is constant.
fn ols_residuals(y: &[f64], x: &[f64]) -> Option<Vec<f64>> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Some(x.iter().zip(y).map(|(a, b)| b - my - slope * (a - mx)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcsRecord {
    pub subset_id: String,
    pub gen_error: f64,
    pub distill_loss: f64,
    pub subset_size: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcsRecordSet {
    pub objective: String,
    pub records: Vec<DcsRecord>,
}

impl DcsRecordSet {
    pub fn new(objective: impl Into<String>, records: Vec<DcsRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.subset_id.as_str()) {
                return Err(Error::InvalidParameter(format!("duplicate subset id {}", r.subset_id)));
            }
            if !(0.0..=1.0).contains(&r.gen_error) {
                return Err(Error::InvalidParameter(format!(
                    "gen_error {} for {} is outside [0, 1]",
                    r.gen_error, r.subset_id
                )));
            }
            if !r.distill_loss.is_finite() {
                return Err(Error::InvalidParameter(format!("non-finite loss for {}", r.subset_id)));
            }
            if r.subset_size == 0 {
                return Err(Error::InvalidParameter(format!("subset {} has size 0", r.subset_id)));
            }
        }
        Ok(Self {
            objective: objective.into(),
            records,
        })
    }

    /// Joins an error table with per-subset losses on `subset_id`. Subsets
    /// present on only one side are an error.
    pub fn join(objective: &str, errors: &ErrorTable, losses: &BTreeMap<String, f64>) -> Result<Self> {
        let missing: Vec<&str> = losses
            .keys()
            .filter(|id| !errors.entries.contains_key(*id))
            .chain(errors.entries.keys().filter(|id| !losses.contains_key(*id)))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(Error::TagMismatch(format!(
                "subsets present in only one of errors/losses: {}",
                missing.join(", ")
            )));
        }
        let records = errors
            .entries
            .iter()
            .map(|(id, e)| DcsRecord {
                subset_id: id.clone(),
                gen_error: e.gen_error,
                distill_loss: losses[id],
                subset_size: e.subset_size,
            })
            .collect();
        Self::new(objective, records)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DcsReport {
    pub objective: String,
    pub n: usize,
    pub rho_raw: f64,
    pub rho_adjusted: Option<f64>,
    pub notes: String,
}

/// DCS of one objective. With `adjust_size`, errors and losses are each
/// rank-residualized on subset size and correlated.
pub fn dcs(records: &DcsRecordSet, adjust_size: bool) -> Result<DcsReport> {
    let errors: Vec<f64> = records.records.iter().map(|r| r.gen_error).collect();
    let losses: Vec<f64> = records.records.iter().map(|r| r.distill_loss).collect();
    let rho_raw = spearman(&errors, &losses)?;
    let mut notes = String::from("spearman with midranks");
    let mut rho_adjusted = None;
    if adjust_size {
        let sizes: Vec<f64> = records.records.iter().map(|r| r.subset_size as f64).collect();
        let rs = midranks(&sizes);
        match (
            ols_residuals(&midranks(&errors), &rs),
            ols_residuals(&midranks(&losses), &rs),
        ) {
            (Some(re), Some(rl)) => {
                rho_adjusted = Some(pearson(&re, &rl)?);
                notes.push_str("; size-adjusted by rank residualization");
            }
            _ => notes.push_str("; size adjustment skipped: all subset sizes are equal"),
        }
    }
    Ok(DcsReport {
        objective: records.objective.clone(),
        n: records.records.len(),
        rho_raw,
        rho_adjusted,
        notes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorEntry {
    pub gen_error: f64,
    pub subset_size: u64,
}

/// Lookup table of measured generalization errors keyed by subset id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ErrorTable {
    pub entries: BTreeMap<String, ErrorEntry>,
}

pub const ERROR_TABLE_HEADER: [&str; 3] = ["subset_id", "gen_error", "subset_size"];
pub const LOSSES_HEADER: [&str; 2] = ["subset_id", "distill_loss"];

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains([',', '\n', '\r', '"']) {
        return Err(Error::InvalidParameter(format!("invalid subset id `{id}`")));
    }
    Ok(())
}

impl ErrorTable {
    /// Loads `path`; a missing file is an empty table.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let mut table = Self::default();
        for row in read_csv_rows(path, &ERROR_TABLE_HEADER)? {
            let gen_error: f64 = parse_field(path, &row[1], "gen_error")?;
            let subset_size: u64 = parse_field(path, &row[2], "subset_size")?;
            if table.entries.contains_key(&row[0]) {
                return Err(Error::csv(path, format!("duplicate subset id {}", row[0])));
            }
            table.insert(&row[0], gen_error, subset_size)?;
        }
        Ok(table)
    }

    /// Idempotent insert. Re-inserting an id with a different size is a
    /// conflict; a different error for the same size replaces the value.
    pub fn insert(&mut self, subset_id: &str, gen_error: f64, subset_size: u64) -> Result<()> {
        check_id(subset_id)?;
        if !(0.0..=1.0).contains(&gen_error) {
            return Err(Error::InvalidParameter(format!(
                "gen_error {gen_error} is outside [0, 1]"
            )));
        }
        if subset_size == 0 {
            return Err(Error::InvalidParameter("subset_size must be positive".into()));
        }
        if let Some(existing) = self.entries.get(subset_id) {
            if existing.subset_size != subset_size {
                return Err(Error::SizeConflict {
                    subset_id: subset_id.into(),
                    existing: existing.subset_size,
                    new: subset_size,
                });
            }
        }
        self.entries
            .insert(subset_id.into(), ErrorEntry { gen_error, subset_size });
        Ok(())
    }

    pub fn get(&self, subset_id: &str) -> Option<ErrorEntry> {
        self.entries.get(subset_id).copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = ERROR_TABLE_HEADER.join(",");
        out.push('\n');
        for (id, e) in &self.entries {
            out.push_str(&format!("{id},{},{}\n", fmt_sig9(e.gen_error), e.subset_size));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Load, upsert and persist in one step.
pub fn error_table_upsert(path: &Path, subset_id: &str, gen_error: f64, subset_size: u64) -> Result<ErrorTable> {
    let mut table = ErrorTable::load(path)?;
    table.insert(subset_id, gen_error, subset_size)?;
    table.save(path)?;
    Ok(table)
}

/// Reads a `subset_id,distill_loss` CSV.
pub fn read_losses(path: &Path) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for row in read_csv_rows(path, &LOSSES_HEADER)? {
        let loss: f64 = parse_field(path, &row[1], "distill_loss")?;
        if !loss.is_finite() {
            return Err(Error::csv(path, format!("non-finite loss for {}", row[0])));
        }
        if out.insert(row[0].clone(), loss).is_some() {
            return Err(Error::csv(path, format!("duplicate subset id {}", row[0])));
        }
    }
    Ok(out)
}

pub fn losses_csv(losses: &BTreeMap<String, f64>) -> String {
    let mut out = LOSSES_HEADER.join(",");
    out.push('\n');
    for (id, l) in losses {
        out.push_str(&format!("{id},{}\n", fmt_sig9(*l)));
    }
    out
}
