//! Training-data construction: seeded degradation recipes, the 50/50
//! downsample-or-degrade split, overlapping patch extraction and the
//! line-delimited dataset manifest.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::imaging::{self, downsample, file_stem, gaussian_blur, list_images, Image};
use crate::rng::{derive_seed, seeded_rng};
use crate::{Error, Result};

/// Closed real interval `[lo, hi]`, written as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval(pub f64, pub f64);

impl Interval {
    pub fn point(v: f64) -> Self {
        Interval(v, v)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.1 > self.0 {
            rng.random_range(self.0..=self.1)
        } else {
            self.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpOrder {
    /// Blur, then noise, then JPEG.
    #[default]
    Fixed,
    /// A seeded permutation of the three operators per image.
    Shuffled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DegradeOp {
    Blur,
    Noise,
    Jpeg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationRecipe {
    /// Gaussian blur standard deviation in pixels; 0 disables blur.
    pub blur_sigma: Interval,
    /// Additive Gaussian noise standard deviation on the `[0, 1]` scale.
    pub noise_sigma: Interval,
    /// JPEG quality range within `[10, 95]`; absent disables compression.
    pub jpeg_quality: Option<(u8, u8)>,
    /// 4 for synthetic (downsample then degrade), 1 for wild (native scale).
    pub resize_factor: u32,
    #[serde(default)]
    pub op_order: OpOrder,
    #[serde(default)]
    pub seed: u64,
}

impl DegradationRecipe {
    pub fn synthetic_default() -> Self {
        Self {
            blur_sigma: Interval(0.2, 1.2),
            noise_sigma: Interval(0.0, 0.03),
            jpeg_quality: Some((50, 95)),
            resize_factor: 4,
            op_order: OpOrder::Fixed,
            seed: 0,
        }
    }

    pub fn wild_default() -> Self {
        Self {
            blur_sigma: Interval(0.3, 2.0),
            noise_sigma: Interval(0.0, 0.05),
            jpeg_quality: Some((30, 90)),
            resize_factor: 1,
            op_order: OpOrder::Shuffled,
            seed: 1,
        }
    }

    /// Zero blur, zero noise, JPEG at quality 95.
    pub fn near_identity(resize_factor: u32) -> Self {
        Self {
            blur_sigma: Interval::point(0.0),
            noise_sigma: Interval::point(0.0),
            jpeg_quality: Some((95, 95)),
            resize_factor,
            op_order: OpOrder::Fixed,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        for (name, iv) in [("blur_sigma", self.blur_sigma), ("noise_sigma", self.noise_sigma)] {
            if !(iv.0.is_finite() && iv.1.is_finite() && 0.0 <= iv.0 && iv.0 <= iv.1) {
                return bad(format!("{name} interval [{}, {}] invalid", iv.0, iv.1));
            }
        }
        if let Some((lo, hi)) = self.jpeg_quality {
            if !(10 <= lo && lo <= hi && hi <= 95) {
                return bad(format!("jpeg_quality [{lo}, {hi}] must lie within [10, 95]"));
            }
        }
        if self.resize_factor != 1 && self.resize_factor != 4 {
            return bad(format!("resize_factor must be 1 or 4, got {}", self.resize_factor));
        }
        Ok(())
    }
}

fn jpeg_round_trip(img: &Image, quality: u8) -> Result<Image> {
    let rgb = img.to_rgb8();
    let mut buf = Vec::new();
    image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality).encode_image(&rgb)?;
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)?.to_rgb8();
    Ok(Image::from_rgb8(&decoded))
}

fn add_noise(img: &Image, sigma: f64, rng: &mut ChaCha8Rng) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    let mut out = img.clone();
    for v in out.data_mut() {
        *v += normal.sample(rng) as f32;
    }
    out
}

/// Blur, noise and JPEG in recipe order, then clamp to `[0, 1]`.
/// All random draws happen up front in a fixed order, so the op order only
/// changes composition, never the sampled parameters.
fn degrade_ops(img: &Image, recipe: &DegradationRecipe, rng: &mut ChaCha8Rng) -> Result<Image> {
    let blur = recipe.blur_sigma.sample(rng);
    let noise = recipe.noise_sigma.sample(rng);
    let quality = recipe
        .jpeg_quality
        .map(|(lo, hi)| rng.random_range(lo..=hi));
    let mut ops = [DegradeOp::Blur, DegradeOp::Noise, DegradeOp::Jpeg];
    if recipe.op_order == OpOrder::Shuffled {
        ops.shuffle(rng);
    }
    let mut cur = img.clone();
    for op in ops {
        cur = match op {
            DegradeOp::Blur => gaussian_blur(&cur, blur),
            DegradeOp::Noise => add_noise(&cur, noise, rng),
            DegradeOp::Jpeg => match quality {
                Some(q) => jpeg_round_trip(&cur.clone().clamp01(), q)?,
                None => cur,
            },
        };
    }
    Ok(cur.clamp01())
}

fn recipe_rng(recipe: &DegradationRecipe, seed: u64) -> ChaCha8Rng {
    seeded_rng(recipe.seed, &["degrade", &seed.to_string()])
}

/// Synthetic degradation: 4× bicubic downsampling followed by the recipe ops.
pub fn synth_degrade(hr: &Image, recipe: &DegradationRecipe, seed: u64) -> Result<Image> {
    recipe.validate()?;
    if recipe.resize_factor != 4 {
        return Err(Error::InvalidConfig("synthetic recipe needs resize_factor = 4".into()));
    }
    if hr.is_empty() {
        return Err(Error::InvalidInput("empty image".into()));
    }
    let lr = downsample(hr, 4)?;
    degrade_ops(&lr, recipe, &mut recipe_rng(recipe, seed))
}

/// Wild degradation at native resolution.
pub fn wild_degrade(hr: &Image, recipe: &DegradationRecipe, seed: u64) -> Result<Image> {
    recipe.validate()?;
    if recipe.resize_factor != 1 {
        return Err(Error::InvalidConfig("wild recipe needs resize_factor = 1".into()));
    }
    if hr.is_empty() {
        return Err(Error::InvalidInput("empty image".into()));
    }
    degrade_ops(hr, recipe, &mut recipe_rng(recipe, seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// LSDIR image, plain 4× bicubic downsampling.
    DownsampleOnly,
    /// LSDIR image, downsampling followed by synthetic degradation.
    Degrade,
    /// Crop of an existing HR/LR training pair.
    SyntheticPair,
    /// HR patch degraded at native scale.
    WildDegraded,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::DownsampleOnly => "downsample_only",
            Branch::Degrade => "degrade",
            Branch::SyntheticPair => "synthetic_pair",
            Branch::WildDegraded => "wild_degraded",
        }
    }
}

/// Downsample-or-degrade decision for one LSDIR image, with probability 1/2
/// each. Depends only on `(seed, image_id)`.
pub fn mix_branch(image_id: &str, seed: u64) -> Branch {
    let mut rng = seeded_rng(seed, &["mix_branch", image_id]);
    if rng.random_bool(0.5) {
        Branch::DownsampleOnly
    } else {
        Branch::Degrade
    }
}

/// Window offsets along one axis: the stride grid, with a final window
/// snapped to the far edge when the grid does not reach it.
pub fn grid_offsets(len: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if patch == 0 || stride == 0 {
        return Err(Error::InvalidConfig("patch and stride must be positive".into()));
    }
    if len < patch {
        return Err(Error::InvalidInput(format!("extent {len} smaller than patch {patch}")));
    }
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|o| o + patch <= len).collect();
    let last = len - patch;
    if *out.last().unwrap() != last {
        out.push(last);
    }
    Ok(out)
}

/// A co-located HR/LR crop.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// (row, col) of the HR window.
    pub hr_offset: (usize, usize),
    pub hr: Image,
    pub lr: Image,
}

/// Overlapping `patch × patch` HR windows with their `(patch/4)²` LR windows
/// at `hr_offset / 4`. Patch and stride must be multiples of 4 so every LR
/// window is pixel-aligned.
pub fn crop_overlapping_patches(hr: &Image, lr: &Image, patch: usize, stride: usize) -> Result<Vec<Patch>> {
    if patch == 0 || patch % 4 != 0 {
        return Err(Error::InvalidConfig(format!("patch {patch} must be a positive multiple of 4")));
    }
    if stride == 0 || stride % 4 != 0 {
        return Err(Error::InvalidConfig(format!("stride {stride} must be a positive multiple of 4")));
    }
    if lr.width() * 4 != hr.width() || lr.height() * 4 != hr.height() {
        return Err(Error::InvalidInput(format!(
            "misaligned pair: HR {}x{} vs LR {}x{}",
            hr.width(),
            hr.height(),
            lr.width(),
            lr.height()
        )));
    }
    let rows = grid_offsets(hr.height(), patch, stride)?;
    let cols = grid_offsets(hr.width(), patch, stride)?;
    let q = patch / 4;
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            out.push(Patch {
                hr_offset: (r, c),
                hr: hr.crop(c, r, patch, patch)?,
                lr: lr.crop(c / 4, r / 4, q, q)?,
            });
        }
    }
    Ok(out)
}

/// In-memory training pair.
#[derive(Debug, Clone)]
pub struct PatchRecord {
    pub source_image_id: String,
    pub hr_patch: Image,
    pub lr_patch: Image,
    pub hr_offset: (usize, usize),
    pub branch: Branch,
}

/// One manifest line; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub source_image_id: String,
    pub hr_path: PathBuf,
    pub lr_path: PathBuf,
    pub hr_offset: (usize, usize),
    pub branch: Branch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub global_seed: u64,
    pub patch_size: usize,
    pub component_counts: BTreeMap<Branch, usize>,
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ManifestLine {
    Header(ManifestHeader),
    Record(ManifestRecord),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn count(&self, branch: Branch) -> usize {
        self.header.component_counts.get(&branch).copied().unwrap_or(0)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        serde_json::to_writer(&mut buf, &ManifestLine::Header(self.header.clone()))?;
        buf.push(b'\n');
        for r in &self.records {
            serde_json::to_writer(&mut buf, &ManifestLine::Record(r.clone()))?;
            buf.push(b'\n');
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut header = None;
        let mut records = Vec::new();
        for line in std::io::BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<ManifestLine>(&line)? {
                ManifestLine::Header(h) => header = Some(h),
                ManifestLine::Record(r) => records.push(r),
            }
        }
        let header = header.ok_or_else(|| Error::InvalidInput(format!("{}: no manifest header", path.display())))?;
        let manifest = Self { header, records };
        let total: usize = manifest.header.component_counts.values().sum();
        if total != manifest.records.len() {
            return Err(Error::InvalidInput(format!(
                "{}: component counts sum to {total} but {} records are listed",
                path.display(),
                manifest.records.len()
            )));
        }
        Ok(manifest)
    }

    /// Load every pair, resolving paths against `root` (the manifest directory).
    pub fn load_records(&self, root: &Path) -> Result<Vec<PatchRecord>> {
        self.records
            .iter()
            .map(|r| {
                Ok(PatchRecord {
                    source_image_id: r.source_image_id.clone(),
                    hr_patch: Image::load(&root.join(&r.hr_path))?,
                    lr_patch: Image::load(&root.join(&r.lr_path))?,
                    hr_offset: r.hr_offset,
                    branch: r.branch,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub lsdir_dir: Option<PathBuf>,
    /// Directory with `hr/` and `lr/` subdirectories matched by file stem.
    pub ugc_pairs_dir: Option<PathBuf>,
    pub ugc_hr_dir: Option<PathBuf>,
    pub patch_size: usize,
    /// Defaults to half the patch size.
    pub stride: Option<usize>,
    pub synthetic_recipe: DegradationRecipe,
    pub wild_recipe: DegradationRecipe,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            lsdir_dir: None,
            ugc_pairs_dir: None,
            ugc_hr_dir: None,
            patch_size: 128,
            stride: None,
            synthetic_recipe: DegradationRecipe::synthetic_default(),
            wild_recipe: DegradationRecipe::wild_default(),
        }
    }
}

impl DatasetConfig {
    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(self.patch_size / 2)
    }
}

fn existing_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::EmptyDirectory(dir.to_path_buf()))
    }
}

/// Trim to the largest top-left region whose sides are multiples of 4.
fn trim4(img: Image) -> Result<Image> {
    let (w, h) = (img.width() / 4 * 4, img.height() / 4 * 4);
    if w == img.width() && h == img.height() {
        Ok(img)
    } else {
        img.crop(0, 0, w, h)
    }
}

struct Writer<'a> {
    out_dir: &'a Path,
    records: Vec<ManifestRecord>,
    counts: BTreeMap<Branch, usize>,
}

impl Writer<'_> {
    fn push(&mut self, id: &str, branch: Branch, offset: (usize, usize), hr: &Image, lr: &Image) -> Result<()> {
        let stem = format!("{id}_{}_{}", offset.0, offset.1);
        let rel_hr = PathBuf::from("patches").join(branch.as_str()).join(format!("{stem}_hr.png"));
        let rel_lr = PathBuf::from("patches").join(branch.as_str()).join(format!("{stem}_lr.png"));
        hr.save(&self.out_dir.join(&rel_hr))?;
        lr.save(&self.out_dir.join(&rel_lr))?;
        self.records.push(ManifestRecord {
            source_image_id: id.to_string(),
            hr_path: rel_hr,
            lr_path: rel_lr,
            hr_offset: offset,
            branch,
        });
        *self.counts.entry(branch).or_insert(0) += 1;
        Ok(())
    }
}

fn load_or_skip(path: &Path, skipped: &mut Vec<String>) -> Option<Image> {
    match Image::load(path) {
        Ok(img) => Some(img),
        Err(e) => {
            log::warn!("skipping undecodable image {}: {e}", path.display());
            skipped.push(path.display().to_string());
            None
        }
    }
}

/// Build the three-component training set into `out_dir`: patch PNGs under
/// `patches/<branch>/` and `manifest.jsonl`. Every random choice is seeded
/// per image from `(global_seed, component, image id)`.
pub fn assemble_training_set(cfg: &DatasetConfig, global_seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.synthetic_recipe.validate()?;
    cfg.wild_recipe.validate()?;
    if cfg.synthetic_recipe.resize_factor != 4 || cfg.wild_recipe.resize_factor != 1 {
        return Err(Error::InvalidConfig(
            "synthetic recipe needs resize_factor 4 and wild recipe resize_factor 1".into(),
        ));
    }
    let patch = cfg.patch_size;
    let stride = cfg.stride();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut w = Writer {
        out_dir,
        records: Vec::new(),
        counts: BTreeMap::new(),
    };
    let mut skipped = Vec::new();

    if let Some(dir) = &cfg.lsdir_dir {
        existing_dir(dir)?;
        w.counts.entry(Branch::DownsampleOnly).or_insert(0);
        w.counts.entry(Branch::Degrade).or_insert(0);
        for path in list_images(dir)? {
            let id = file_stem(&path);
            let Some(hr) = load_or_skip(&path, &mut skipped) else { continue };
            let hr = trim4(hr)?;
            if hr.width() < patch || hr.height() < patch {
                log::warn!("skipping {id}: smaller than patch size {patch}");
                skipped.push(path.display().to_string());
                continue;
            }
            let branch = mix_branch(&id, global_seed);
            let lr = match branch {
                Branch::DownsampleOnly => downsample(&hr, 4)?,
                _ => synth_degrade(&hr, &cfg.synthetic_recipe, derive_seed(global_seed, &["lsdir", &id]))?,
            };
            for p in crop_overlapping_patches(&hr, &lr, patch, stride)? {
                w.push(&id, branch, p.hr_offset, &p.hr, &p.lr)?;
            }
        }
    }

    if let Some(dir) = &cfg.ugc_pairs_dir {
        existing_dir(dir)?;
        let (hr_dir, lr_dir) = (dir.join("hr"), dir.join("lr"));
        existing_dir(&hr_dir)?;
        existing_dir(&lr_dir)?;
        w.counts.entry(Branch::SyntheticPair).or_insert(0);
        let lr_by_stem: BTreeMap<String, PathBuf> =
            list_images(&lr_dir)?.into_iter().map(|p| (file_stem(&p), p)).collect();
        for path in list_images(&hr_dir)? {
            let id = file_stem(&path);
            let Some(lr_path) = lr_by_stem.get(&id) else {
                log::warn!("skipping {id}: no LR counterpart");
                skipped.push(path.display().to_string());
                continue;
            };
            let Some(hr) = load_or_skip(&path, &mut skipped) else { continue };
            let Some(lr) = load_or_skip(lr_path, &mut skipped) else { continue };
            let (lw, lh) = (lr.width().min(hr.width() / 4), lr.height().min(hr.height() / 4));
            let hr = hr.crop(0, 0, lw * 4, lh * 4)?;
            let lr = lr.crop(0, 0, lw, lh)?;
            if hr.width() < patch || hr.height() < patch {
                log::warn!("skipping pair {id}: smaller than patch size {patch}");
                skipped.push(path.display().to_string());
                continue;
            }
            for p in crop_overlapping_patches(&hr, &lr, patch, stride)? {
                w.push(&id, Branch::SyntheticPair, p.hr_offset, &p.hr, &p.lr)?;
            }
        }
    }

    if let Some(dir) = &cfg.ugc_hr_dir {
        existing_dir(dir)?;
        w.counts.entry(Branch::WildDegraded).or_insert(0);
        for path in list_images(dir)? {
            let id = file_stem(&path);
            let Some(hr) = load_or_skip(&path, &mut skipped) else { continue };
            if hr.width() < patch || hr.height() < patch {
                log::warn!("skipping {id}: smaller than patch size {patch}");
                skipped.push(path.display().to_string());
                continue;
            }
            let rows = grid_offsets(hr.height(), patch, stride)?;
            let cols = grid_offsets(hr.width(), patch, stride)?;
            for &r in &rows {
                for &c in &cols {
                    let hp = hr.crop(c, r, patch, patch)?;
                    let seed = derive_seed(global_seed, &["wild", &id, &r.to_string(), &c.to_string()]);
                    let lp = wild_degrade(&hp, &cfg.wild_recipe, seed)?;
                    w.push(&id, Branch::WildDegraded, (r, c), &hp, &lp)?;
                }
            }
        }
    }

    if w.records.is_empty() {
        return Err(Error::EmptyDirectory(out_dir.to_path_buf()));
    }
    for (branch, n) in &w.counts {
        log::info!("component {}: {n} patches", branch.as_str());
    }
    let manifest = DatasetManifest {
        header: ManifestHeader {
            global_seed,
            patch_size: patch,
            component_counts: w.counts,
            skipped,
        },
        records: w.records,
    };
    manifest.write(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

pub use imaging::resize_bicubic;
