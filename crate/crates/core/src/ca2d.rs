//! Patch-stitched distilled image sets: random-resized-crop candidates per
//! selected image, pluggable patch scoring, top-patch selection and f x f
//! grid stitching.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use image::imageops::{self, FilterType};
use image::{ImageFormat, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{parse_field, read_csv_rows, write_atomic};
use crate::scores::{cad_prune, CadBase, ScoreParams};
use crate::select::{select_window, SortOrder, SubsetSpec};
use crate::trajstore::{fnv1a64, Trajectory};

pub const MIN_PATCH: u32 = 8;
pub const MANIFEST_FILE: &str = "distilled.json";
const CROP_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn area(&self) -> u64 {
        u64::from(self.w) * u64::from(self.h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropParams {
    pub scale: (f64, f64),
    pub aspect: (f64, f64),
}

impl Default for CropParams {
    fn default() -> Self {
        Self {
            scale: (0.08, 1.0),
            aspect: (3.0 / 4.0, 4.0 / 3.0),
        }
    }
}

impl CropParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "scale range ({lo}, {hi}) must lie in (0, 1]"
            )));
        }
        let (lo, hi) = self.aspect;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidParameter(format!("aspect range ({lo}, {hi}) is invalid")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchCandidate {
    pub sample_id: String,
    pub patch_index: usize,
    pub rect: Rect,
    pub score: f64,
    /// Seed of the stream the rectangle was drawn from.
    pub seed: u64,
}

/// Seed for the crop stream of one image.
pub fn crop_seed(seed: u64, sample_id: &str) -> u64 {
    seed ^ fnv1a64(sample_id.as_bytes())
}

/// Random-resized-crop rectangles for one `width x height` image. Identical
/// rectangles are dropped, so fewer than `num_candidates` may come back.
pub fn generate_candidates(
    sample_id: &str,
    width: u32,
    height: u32,
    num_candidates: usize,
    crop: &CropParams,
    seed: u64,
) -> Result<Vec<PatchCandidate>> {
    crop.validate()?;
    if num_candidates == 0 {
        return Err(Error::InvalidParameter("num_candidates must be >= 1".into()));
    }
    if width < MIN_PATCH || height < MIN_PATCH {
        return Err(Error::ImpossibleCrop(format!(
            "{sample_id} is {width}x{height}, smaller than the {MIN_PATCH}px minimum patch"
        )));
    }
    let lineage = crop_seed(seed, sample_id);
    let mut rng = ChaCha8Rng::seed_from_u64(lineage);
    let area = f64::from(width) * f64::from(height);
    let (log_lo, log_hi) = (crop.aspect.0.ln(), crop.aspect.1.ln());
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for _ in 0..num_candidates {
        let mut rect = None;
        let (mut w, mut h) = (width, height);
        for _ in 0..CROP_ATTEMPTS {
            let target = area * uniform(&mut rng, crop.scale.0, crop.scale.1);
            let ratio = uniform(&mut rng, log_lo, log_hi).exp();
            w = (target * ratio).sqrt().round() as u32;
            h = (target / ratio).sqrt().round() as u32;
            if (MIN_PATCH..=width).contains(&w) && (MIN_PATCH..=height).contains(&h) {
                rect = Some((w, h));
                break;
            }
        }
        let (w, h) = rect.unwrap_or((w.clamp(MIN_PATCH, width), h.clamp(MIN_PATCH, height)));
        let x = rng.random_range(0..=width - w);
        let y = rng.random_range(0..=height - h);
        let rect = Rect { x, y, w, h };
        if seen.insert(rect) {
            out.push(PatchCandidate {
                sample_id: sample_id.to_string(),
                patch_index: out.len(),
                rect,
                score: 0.0,
                seed: lineage,
            });
        }
    }
    Ok(out)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// How candidate patches get their scores.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PatchScorer {
    /// CSV `sample_id,patch_index,score` covering every candidate.
    FileScores(PathBuf),
    /// Variance of the 3x3 Laplacian of the grayscale patch.
    Sharpness,
    /// Shell command: candidates on stdin as `sample_id,patch_index,x,y,w,h`,
    /// one score per line on stdout.
    ExternalCommand(String),
}

impl PatchScorer {
    pub fn describe(&self) -> String {
        match self {
            PatchScorer::FileScores(p) => format!("file_scores:{}", p.display()),
            PatchScorer::Sharpness => "sharpness".into(),
            PatchScorer::ExternalCommand(c) => format!("external_command:{c}"),
        }
    }
}

fn luma(p: &Rgb<u8>) -> f64 {
    0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])
}

/// Population variance of the valid 3x3 Laplacian response over `rect`.
pub fn laplacian_variance(img: &RgbImage, rect: Rect) -> f64 {
    let (w, h) = (rect.w as usize, rect.h as usize);
    if w < 3 || h < 3 {
        return 0.0;
    }
    let gray: Vec<f64> = (0..h)
        .flat_map(|yy| (0..w).map(move |xx| (xx, yy)))
        .map(|(xx, yy)| luma(img.get_pixel(rect.x + xx as u32, rect.y + yy as u32)))
        .collect();
    let at = |xx: usize, yy: usize| gray[yy * w + xx];
    let mut responses = Vec::with_capacity((w - 2) * (h - 2));
    for yy in 1..h - 1 {
        for xx in 1..w - 1 {
            responses.push(at(xx - 1, yy) + at(xx + 1, yy) + at(xx, yy - 1) + at(xx, yy + 1) - 4.0 * at(xx, yy));
        }
    }
    let n = responses.len() as f64;
    let mean = responses.iter().sum::<f64>() / n;
    responses.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n
}

fn read_file_scores(path: &Path) -> Result<HashMap<(String, usize), f64>> {
    let mut out = HashMap::new();
    for row in read_csv_rows(path, &["sample_id", "patch_index", "score"])? {
        let idx: usize = parse_field(path, &row[1], "patch_index")?;
        let score: f64 = parse_field(path, &row[2], "score")?;
        if !score.is_finite() {
            return Err(Error::csv(path, format!("non-finite score for ({}, {idx})", row[0])));
        }
        out.insert((row[0].clone(), idx), score);
    }
    Ok(out)
}

fn run_external(command: &str, candidates: &[PatchCandidate]) -> Result<Vec<f64>> {
    let mut input = String::new();
    for c in candidates {
        let r = c.rect;
        input.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.sample_id, c.patch_index, r.x, r.y, r.w, r.h
        ));
    }
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(command)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| Error::Scorer(format!("cannot start `{command}`: {e}")))?;
    let mut stdin = child.stdin.take().expect("stdin is piped");
    let writer = std::thread::spawn(move || {
        // a scorer that exits without reading everything closes the pipe early
        let _ = stdin.write_all(input.as_bytes());
    });
    let output = child
        .wait_with_output()
        .map_err(|e| Error::Scorer(format!("`{command}` failed: {e}")))?;
    let _ = writer.join();
    if !output.status.success() {
        return Err(Error::Scorer(format!("`{command}` exited with {}", output.status)));
    }
    let text = String::from_utf8(output.stdout).map_err(|_| Error::Scorer("scorer output is not UTF-8".into()))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != candidates.len() {
        return Err(Error::Scorer(format!(
            "scorer returned {} scores for {} candidates",
            lines.len(),
            candidates.len()
        )));
    }
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| match l.trim().parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(Error::Scorer(format!("line {}: `{l}` is not a finite score", i + 1))),
        })
        .collect()
}

/// Fills in `score` on every candidate. `images` is only consulted by the
/// sharpness scorer.
pub fn score_patches(
    candidates: &mut [PatchCandidate],
    scorer: &PatchScorer,
    images: &BTreeMap<String, RgbImage>,
) -> Result<()> {
    match scorer {
        PatchScorer::Sharpness => {
            let scores: Result<Vec<f64>> = candidates
                .par_iter()
                .map(|c| {
                    let img = images
                        .get(&c.sample_id)
                        .ok_or_else(|| Error::Scorer(format!("no pixels loaded for {}", c.sample_id)))?;
                    Ok(laplacian_variance(img, c.rect))
                })
                .collect();
            for (c, s) in candidates.iter_mut().zip(scores?) {
                c.score = s;
            }
        }
        PatchScorer::FileScores(path) => {
            let table = read_file_scores(path)?;
            for c in candidates.iter_mut() {
                c.score = *table.get(&(c.sample_id.clone(), c.patch_index)).ok_or_else(|| {
                    Error::Scorer(format!(
                        "{} has no score for ({}, {})",
                        path.display(),
                        c.sample_id,
                        c.patch_index
                    ))
                })?;
            }
        }
        PatchScorer::ExternalCommand(cmd) => {
            let scores = run_external(cmd, candidates)?;
            for (c, s) in candidates.iter_mut().zip(scores) {
                c.score = s;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistilledImage {
    pub class: u32,
    pub index: usize,
    pub file: String,
    /// Row-major grid cells.
    pub patches: Vec<PatchCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistilledImageSet {
    pub factor: u32,
    pub resolution: u32,
    pub ipc: usize,
    pub images: Vec<DistilledImage>,
}

pub fn output_name(class: u32, index: usize) -> String {
    format!("class_{class}_ipc_{index}.png")
}

fn check_geometry(factor: u32, resolution: u32, ipc: usize) -> Result<()> {
    if factor == 0 || ipc == 0 {
        return Err(Error::InvalidParameter("factor and ipc must be >= 1".into()));
    }
    if resolution == 0 || !resolution.is_multiple_of(factor) {
        return Err(Error::InvalidParameter(format!(
            "resolution {resolution} is not a positive multiple of factor {factor}"
        )));
    }
    Ok(())
}

/// Keeps the best patch per image and packs the `ipc * f^2` best images of
/// each class into grids, best at the top-left.
pub fn assemble(
    subset: &SubsetSpec,
    candidates: &[PatchCandidate],
    factor: u32,
    resolution: u32,
    ipc: usize,
) -> Result<DistilledImageSet> {
    check_geometry(factor, resolution, ipc)?;
    let class_of: HashMap<&str, u32> = subset
        .sample_ids
        .iter()
        .map(String::as_str)
        .zip(subset.classes.iter().copied())
        .collect();
    let mut top: BTreeMap<&str, &PatchCandidate> = BTreeMap::new();
    for c in candidates {
        if !class_of.contains_key(c.sample_id.as_str()) {
            return Err(Error::InvalidParameter(format!(
                "candidate source {} is not in the subset",
                c.sample_id
            )));
        }
        if !c.score.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "non-finite score on ({}, {})",
                c.sample_id, c.patch_index
            )));
        }
        let better = match top.get(c.sample_id.as_str()) {
            None => true,
            Some(best) => c.score > best.score || (c.score == best.score && c.patch_index < best.patch_index),
        };
        if better {
            top.insert(c.sample_id.as_str(), c);
        }
    }
    let mut by_class: BTreeMap<u32, Vec<&PatchCandidate>> =
        subset.class_histogram.keys().map(|&c| (c, Vec::new())).collect();
    for (id, best) in top {
        by_class.entry(class_of[id]).or_default().push(best);
    }
    let per_image = (factor * factor) as usize;
    let needed = ipc * per_image;
    let mut images = Vec::new();
    for (class, mut ranked) in by_class {
        if ranked.len() < needed {
            return Err(Error::InsufficientSamples {
                class,
                available: ranked.len(),
                required: needed,
            });
        }
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.sample_id.cmp(&b.sample_id)));
        for (g, group) in ranked[..needed].chunks(per_image).enumerate() {
            images.push(DistilledImage {
                class,
                index: g,
                file: output_name(class, g),
                patches: group.iter().map(|p| (*p).clone()).collect(),
            });
        }
    }
    Ok(DistilledImageSet {
        factor,
        resolution,
        ipc,
        images,
    })
}

/// Stitches one distilled image from its source pixels.
pub fn stitch(
    image: &DistilledImage,
    factor: u32,
    resolution: u32,
    sources: &BTreeMap<String, RgbImage>,
) -> Result<RgbImage> {
    let cell = resolution / factor;
    let mut canvas = RgbImage::new(resolution, resolution);
    for (i, patch) in image.patches.iter().enumerate() {
        let src = sources
            .get(&patch.sample_id)
            .ok_or_else(|| Error::UnresolvedSamples(vec![patch.sample_id.clone()]))?;
        let r = patch.rect;
        if r.x + r.w > src.width() || r.y + r.h > src.height() {
            return Err(Error::ImpossibleCrop(format!(
                "patch {r:?} exceeds {}",
                patch.sample_id
            )));
        }
        let crop = imageops::crop_imm(src, r.x, r.y, r.w, r.h).to_image();
        let resized = imageops::resize(&crop, cell, cell, FilterType::Triangle);
        let (row, col) = (i as u32 / factor, i as u32 % factor);
        imageops::replace(&mut canvas, &resized, i64::from(col * cell), i64::from(row * cell));
    }
    Ok(canvas)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut bytes = Cursor::new(Vec::new());
    img.write_to(&mut bytes, ImageFormat::Png).map_err(|e| Error::Image {
        path: PathBuf::from("<memory>"),
        message: e.to_string(),
    })?;
    Ok(bytes.into_inner())
}

/// Source image path for `sample_id` in `dir`, trying png, jpg, jpeg.
pub fn resolve_image(dir: &Path, sample_id: &str) -> Option<PathBuf> {
    ["png", "jpg", "jpeg", "PNG", "JPG", "JPEG"]
        .iter()
        .map(|ext| dir.join(format!("{sample_id}.{ext}")))
        .find(|p| p.is_file())
}

/// Loads the subset's images as RGB. Every unresolvable id is reported in
/// one error.
pub fn load_images(dir: &Path, sample_ids: &[String]) -> Result<BTreeMap<String, RgbImage>> {
    let mut missing = Vec::new();
    let mut paths = Vec::new();
    for id in sample_ids {
        match resolve_image(dir, id) {
            Some(p) => paths.push((id.clone(), p)),
            None => missing.push(id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::UnresolvedSamples(missing));
    }
    paths
        .into_par_iter()
        .map(|(id, p)| {
            let img = image::open(&p).map_err(|e| Error::Image {
                path: p.clone(),
                message: e.to_string(),
            })?;
            Ok((id, img.to_rgb8()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ca2dConfig {
    pub cad: ScoreParams,
    pub cad_base: CadBase,
    pub ipc: usize,
    pub factor: u32,
    pub resolution: u32,
    pub num_candidates: usize,
    pub crop: CropParams,
    pub seed: u64,
    pub start_quantile: f64,
    pub order: SortOrder,
}

impl Ca2dConfig {
    pub fn new(cad: ScoreParams, ipc: usize, factor: u32, resolution: u32, seed: u64) -> Self {
        Self {
            cad,
            cad_base: CadBase::El2n,
            ipc,
            factor,
            resolution,
            num_candidates: 16,
            crop: CropParams::default(),
            seed,
            start_quantile: 0.0,
            order: SortOrder::Descending,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_geometry(self.factor, self.resolution, self.ipc)?;
        self.crop.validate()?;
        if self.num_candidates == 0 {
            return Err(Error::InvalidParameter("num_candidates must be >= 1".into()));
        }
        Ok(())
    }

    pub fn per_class(&self) -> usize {
        self.ipc * (self.factor * self.factor) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillManifest {
    pub config: Ca2dConfig,
    pub scorer: String,
    pub subset: SubsetSpec,
    pub set: DistilledImageSet,
}

/// Generates, scores and assembles patches for an existing subset and writes
/// the PNGs plus a provenance manifest into `out_dir`.
pub fn distill_subset(
    subset: &SubsetSpec,
    image_dir: &Path,
    cfg: &Ca2dConfig,
    scorer: &PatchScorer,
    out_dir: &Path,
) -> Result<DistilledImageSet> {
    cfg.validate()?;
    let images = load_images(image_dir, &subset.sample_ids)?;
    let mut candidates = Vec::new();
    for id in &subset.sample_ids {
        let img = &images[id];
        candidates.extend(generate_candidates(
            id,
            img.width(),
            img.height(),
            cfg.num_candidates,
            &cfg.crop,
            cfg.seed,
        )?);
    }
    score_patches(&mut candidates, scorer, &images)?;
    let set = assemble(subset, &candidates, cfg.factor, cfg.resolution, cfg.ipc)?;
    let encoded: Result<Vec<(String, Vec<u8>)>> = set
        .images
        .par_iter()
        .map(|di| {
            Ok((
                di.file.clone(),
                encode_png(&stitch(di, set.factor, set.resolution, &images)?)?,
            ))
        })
        .collect();
    for (file, bytes) in encoded? {
        write_atomic(&out_dir.join(file), &bytes)?;
    }
    let manifest = DistillManifest {
        config: cfg.clone(),
        scorer: scorer.describe(),
        subset: subset.clone(),
        set: set.clone(),
    };
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    write_atomic(&out_dir.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(set)
}

/// CAD-Prune scores, the top window of `ipc * f^2` per class, then patch
/// assembly. Returns the subset alongside the image set.
pub fn ca2d_pipeline(
    traj: &Trajectory,
    image_dir: &Path,
    cfg: &Ca2dConfig,
    scorer: &PatchScorer,
    out_dir: &Path,
) -> Result<(SubsetSpec, DistilledImageSet)> {
    cfg.validate()?;
    let missing: Vec<String> = traj
        .sample_ids()
        .iter()
        .filter(|id| resolve_image(image_dir, id).is_none())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::UnresolvedSamples(missing));
    }
    let scores = cad_prune(traj, &cfg.cad, cfg.cad_base)?;
    let subset = select_window(&scores, traj, cfg.per_class(), cfg.start_quantile, cfg.order)?;
    let set = distill_subset(&subset, image_dir, cfg, scorer, out_dir)?;
    Ok((subset, set))
}

/// Writes one small textured PNG per sample of `traj` into `dir`: a class
/// tint with a per-sample checker pattern of random period and contrast.
pub fn write_toy_images(traj: &Trajectory, dir: &Path, size: u32, seed: u64) -> Result<()> {
    if size < MIN_PATCH {
        return Err(Error::InvalidParameter(format!(
            "toy images must be at least {MIN_PATCH}px"
        )));
    }
    let classes = traj.classes().max(1) as f64;
    let jobs: Vec<(String, u32)> = traj
        .sample_ids()
        .iter()
        .cloned()
        .zip(traj.labels().iter().copied())
        .collect();
    let encoded: Result<Vec<(String, Vec<u8>)>> = jobs
        .into_par_iter()
        .map(|(id, label)| {
            let mut rng = ChaCha8Rng::seed_from_u64(crop_seed(seed, &id));
            let hue = f64::from(label) / classes;
            let base = [
                (255.0 * (0.5 + 0.4 * (std::f64::consts::TAU * hue).cos())) as i32,
                (255.0 * (0.5 + 0.4 * (std::f64::consts::TAU * (hue + 1.0 / 3.0)).cos())) as i32,
                (255.0 * (0.5 + 0.4 * (std::f64::consts::TAU * (hue + 2.0 / 3.0)).cos())) as i32,
            ];
            let period = rng.random_range(1..=6u32);
            let contrast: i32 = rng.random_range(0..48);
            let (ox, oy) = (rng.random_range(0..size), rng.random_range(0..size));
            let img = RgbImage::from_fn(size, size, |x, y| {
                let on = ((x + ox) / period + (y + oy) / period) % 2 == 0;
                let delta = if on { contrast } else { -contrast };
                Rgb(base.map(|c| (c + delta).clamp(0, 255) as u8))
            });
            Ok((id, encode_png(&img)?))
        })
        .collect();
    for (id, bytes) in encoded? {
        write_atomic(&dir.join(format!("{id}.png")), &bytes)?;
    }
    Ok(())
}
