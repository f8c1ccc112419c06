//! Full-reference metrics, pluggable no-reference metrics, challenge scores
//! and the per-image metric CSV format.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::imaging::Image;
use crate::semantic::SemanticExtractor;
use crate::{Error, Result};

/// Column order of every metric CSV (results, score cards, injection files).
pub const CSV_HEADER: [&str; 12] = [
    "image_id",
    "psnr",
    "ssim",
    "lpips",
    "musiq",
    "maniqa",
    "clipiqa",
    "nrqm",
    "hyperiqa",
    "wild_score",
    "synthetic_score",
    "combined_score",
];

/// PSNR in dB for images in `[0, 1]`; identical images give `+inf`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_size(b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode Gaussian filtering of one `h × w` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11-tap Gaussian window (σ = 1.5),
/// computed per channel on `[0, 1]` data and averaged.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_size(b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "image {w}x{h} smaller than the {SSIM_WINDOW}-pixel SSIM window"
        )));
    }
    let k = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = (0..w * h).map(|i| a.data()[i * 3 + c] as f64).collect();
        let pb: Vec<f64> = (0..w * h).map(|i| b.data()[i * 3 + c] as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
        let mu_a = filter_valid(&pa, w, h, &k);
        let mu_b = filter_valid(&pb, w, h, &k);
        let e_aa = filter_valid(&prod(&pa, &pa), w, h, &k);
        let e_bb = filter_valid(&prod(&pb, &pb), w, h, &k);
        let e_ab = filter_valid(&prod(&pa, &pb), w, h, &k);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            sum += num / den;
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / 3.0)
}

/// `0.1·MUSIQ + 10·ManIQA + 10·CLIPIQA`.
pub fn wild_score(musiq: f64, maniqa: f64, clipiqa: f64) -> f64 {
    0.1 * musiq + 10.0 * maniqa + 10.0 * clipiqa
}

/// `PSNR + 10·SSIM − 10·LPIPS`.
pub fn synthetic_score(psnr: f64, ssim: f64, lpips: f64) -> f64 {
    psnr + 10.0 * ssim - 10.0 * lpips
}

/// Full-reference perceptual distance.
pub trait PerceptualMetric: Send + Sync {
    fn distance(&self, a: &Image, b: &Image) -> Result<f64>;
}

/// Stand-in perceptual distance: mean squared difference of channel-unit-
/// normalized features at every scale of the frozen semantic extractor,
/// averaged over scales.
pub struct FeaturePerceptual<'a> {
    extractor: &'a SemanticExtractor,
    dtype: DType,
}

impl<'a> FeaturePerceptual<'a> {
    pub fn new(extractor: &'a SemanticExtractor, dtype: DType) -> Self {
        Self { extractor, dtype }
    }

    fn normalized_features(&self, img: &Image) -> Result<Vec<Tensor>> {
        let x = img.to_tensor(self.dtype)?;
        self.extractor
            .stages(&x)?
            .into_iter()
            .map(|f| {
                let f = f.to_dtype(DType::F64)?;
                let norm = (f.sqr()?.sum_keepdim(1)? + 1e-10)?.sqrt()?;
                Ok(f.broadcast_div(&norm)?)
            })
            .collect()
    }
}

impl PerceptualMetric for FeaturePerceptual<'_> {
    fn distance(&self, a: &Image, b: &Image) -> Result<f64> {
        a.ensure_same_size(b)?;
        if a == b {
            return Ok(0.0);
        }
        let fa = self.normalized_features(a)?;
        let fb = self.normalized_features(b)?;
        let mut total = 0.0;
        for (x, y) in fa.iter().zip(&fb) {
            // Sum over channels, mean over positions.
            let (_, _, h, w) = x.dims4()?;
            let d = (x - y)?.sqr()?.sum_all()?.to_scalar::<f64>()? / (h * w) as f64;
            total += d;
        }
        Ok(total / fa.len() as f64)
    }
}

/// Evaluate an optional perceptual metric; failures become an absent value.
pub fn perceptual_distance(a: &Image, b: &Image, plugin: Option<&dyn PerceptualMetric>) -> Option<f64> {
    let p = plugin?;
    match p.distance(a, b) {
        Ok(d) => Some(d),
        Err(e) => {
            log::warn!("perceptual metric failed: {e}");
            None
        }
    }
}

/// No-reference quality scores.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NrScores {
    pub musiq: Option<f64>,
    pub maniqa: Option<f64>,
    pub clipiqa: Option<f64>,
    pub nrqm: Option<f64>,
    pub hyperiqa: Option<f64>,
}

/// Source of no-reference scores for an image.
pub trait NrMetric: Send + Sync {
    fn scores(&self, image_id: &str, image: &Image) -> Result<NrScores>;
}

/// Deterministic pseudo-scores derived from a hash of the 8-bit image, in
/// each metric's usual range. For exercising the scoring pipeline only.
pub struct HashStubNr;

impl NrMetric for HashStubNr {
    fn scores(&self, _image_id: &str, image: &Image) -> Result<NrScores> {
        let mut hasher = Sha256::new();
        hasher.update((image.width() as u64).to_le_bytes());
        hasher.update((image.height() as u64).to_le_bytes());
        hasher.update(image.to_rgb8().as_raw());
        let digest = hasher.finalize();
        let unit = |i: usize| {
            let b: [u8; 4] = digest[i * 4..i * 4 + 4].try_into().unwrap();
            u32::from_le_bytes(b) as f64 / u32::MAX as f64
        };
        Ok(NrScores {
            musiq: Some(20.0 + 60.0 * unit(0)),
            maniqa: Some(unit(1)),
            clipiqa: Some(unit(2)),
            nrqm: Some(10.0 * unit(3)),
            hyperiqa: Some(unit(4)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricSource {
    #[default]
    Computed,
    Injected,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub image_id: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub lpips: Option<f64>,
    pub musiq: Option<f64>,
    pub maniqa: Option<f64>,
    pub clipiqa: Option<f64>,
    pub nrqm: Option<f64>,
    pub hyperiqa: Option<f64>,
    pub source: MetricSource,
}

impl MetricReport {
    pub fn new(image_id: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            ..Default::default()
        }
    }

    pub fn set_nr(&mut self, s: NrScores) {
        self.musiq = s.musiq;
        self.maniqa = s.maniqa;
        self.clipiqa = s.clipiqa;
        self.nrqm = s.nrqm;
        self.hyperiqa = s.hyperiqa;
    }

    pub fn wild_score(&self) -> Option<f64> {
        Some(wild_score(self.musiq?, self.maniqa?, self.clipiqa?))
    }

    /// Absent when any component is missing or PSNR is the infinite sentinel.
    pub fn synthetic_score(&self) -> Option<f64> {
        let p = self.psnr?;
        if !p.is_finite() {
            log::warn!("{}: infinite PSNR, synthetic score left absent", self.image_id);
            return None;
        }
        Some(synthetic_score(p, self.ssim?, self.lpips?))
    }

    /// `synthetic_score + wild_score`, absent if either is.
    pub fn combined_score(&self) -> Option<f64> {
        Some(self.synthetic_score()? + self.wild_score()?)
    }

    /// Overlay every present field of `inj`, marking the report injected.
    pub fn apply_injection(&mut self, inj: &MetricReport) {
        let mut any = false;
        for (dst, src) in self.fields_mut().into_iter().zip(inj.fields()) {
            if src.is_some() {
                *dst = src;
                any = true;
            }
        }
        if any {
            self.source = MetricSource::Injected;
        }
    }

    fn fields(&self) -> [Option<f64>; 8] {
        [
            self.psnr,
            self.ssim,
            self.lpips,
            self.musiq,
            self.maniqa,
            self.clipiqa,
            self.nrqm,
            self.hyperiqa,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Option<f64>; 8] {
        [
            &mut self.psnr,
            &mut self.ssim,
            &mut self.lpips,
            &mut self.musiq,
            &mut self.maniqa,
            &mut self.clipiqa,
            &mut self.nrqm,
            &mut self.hyperiqa,
        ]
    }

    /// CSV cells in [`CSV_HEADER`] order.
    pub fn csv_cells(&self) -> Vec<String> {
        let mut out = vec![self.image_id.clone()];
        out.extend(self.fields().iter().map(|v| fmt_cell(*v)));
        out.push(fmt_cell(self.wild_score()));
        out.push(fmt_cell(self.synthetic_score()));
        out.push(fmt_cell(self.combined_score()));
        out
    }
}

/// Shortest round-trip formatting; `inf` for the PSNR sentinel, empty if absent.
pub fn fmt_cell(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(x) if x == f64::INFINITY => "inf".into(),
        Some(x) => format!("{x}"),
    }
}

pub fn parse_cell(s: &str) -> Result<Option<f64>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    if s == "inf" {
        return Ok(Some(f64::INFINITY));
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|e| Error::InvalidInput(format!("bad metric value {s:?}: {e}")))
}

/// Full-reference and no-reference metrics for one SR image.
pub fn evaluate(
    image_id: &str,
    sr: &Image,
    reference: Option<&Image>,
    perceptual: Option<&dyn PerceptualMetric>,
    nr: Option<&dyn NrMetric>,
) -> Result<MetricReport> {
    let mut r = MetricReport::new(image_id);
    if let Some(hr) = reference {
        r.psnr = Some(psnr(sr, hr)?);
        r.ssim = Some(ssim(sr, hr)?);
        r.lpips = perceptual_distance(sr, hr, perceptual);
    }
    if let Some(m) = nr {
        match m.scores(image_id, sr) {
            Ok(s) => r.set_nr(s),
            Err(e) => log::warn!("{image_id}: no-reference metrics failed: {e}"),
        }
    }
    Ok(r)
}

/// Externally computed metric rows keyed by `image_id`, read from a CSV with
/// the standard header. Score columns in the file are ignored; scores are
/// always recomputed from components.
#[derive(Debug, Clone, Default)]
pub struct MetricInjection {
    rows: BTreeMap<String, MetricReport>,
}

impl MetricInjection {
    pub fn from_reader(r: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let id_col = col("image_id")
            .ok_or_else(|| Error::InvalidInput("injection file lacks an image_id column".into()))?;
        let metric_cols: Vec<Option<usize>> = CSV_HEADER[1..9].iter().map(|n| col(n)).collect();
        let mut rows = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            let id = rec.get(id_col).unwrap_or_default().to_string();
            let mut report = MetricReport::new(id.clone());
            report.source = MetricSource::Injected;
            let vals: Vec<Option<f64>> = metric_cols
                .iter()
                .map(|c| match c {
                    Some(i) => parse_cell(rec.get(*i).unwrap_or_default()),
                    None => Ok(None),
                })
                .collect::<Result<_>>()?;
            for (dst, v) in report.fields_mut().into_iter().zip(vals) {
                *dst = v;
            }
            rows.insert(id, report);
        }
        Ok(Self { rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(f)
    }

    pub fn get(&self, key: &str) -> Option<&MetricReport> {
        self.rows.get(key)
    }

    /// First match among `keys`, in order.
    pub fn lookup(&self, keys: &[&str]) -> Option<&MetricReport> {
        keys.iter().find_map(|k| self.rows.get(*k))
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.rows.keys()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Means over present values; infinite PSNRs are excluded and counted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Aggregate {
    /// Per-metric means, as a report with id `mean`.
    pub means: MetricReport,
    /// Mean of per-image scores (canonical).
    pub wild_score: Option<f64>,
    pub synthetic_score: Option<f64>,
    pub combined_score: Option<f64>,
    /// Scores of the metric means.
    pub wild_score_of_means: Option<f64>,
    pub synthetic_score_of_means: Option<f64>,
    pub combined_score_of_means: Option<f64>,
    pub psnr_inf_excluded: usize,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

pub fn aggregate(label: &str, reports: &[MetricReport]) -> Aggregate {
    let psnr_inf_excluded = reports
        .iter()
        .filter(|r| r.psnr == Some(f64::INFINITY))
        .count();
    let mut means = MetricReport::new(label);
    means.psnr = mean_of(reports.iter().map(|r| r.psnr.filter(|p| p.is_finite())));
    let pick: [fn(&MetricReport) -> Option<f64>; 7] = [
        |r| r.ssim,
        |r| r.lpips,
        |r| r.musiq,
        |r| r.maniqa,
        |r| r.clipiqa,
        |r| r.nrqm,
        |r| r.hyperiqa,
    ];
    let vals: Vec<Option<f64>> = pick.iter().map(|f| mean_of(reports.iter().map(f))).collect();
    means.ssim = vals[0];
    means.lpips = vals[1];
    means.musiq = vals[2];
    means.maniqa = vals[3];
    means.clipiqa = vals[4];
    means.nrqm = vals[5];
    means.hyperiqa = vals[6];
    if reports.iter().any(|r| r.source == MetricSource::Injected) {
        means.source = MetricSource::Injected;
    }
    Aggregate {
        wild_score: mean_of(reports.iter().map(MetricReport::wild_score)),
        synthetic_score: mean_of(reports.iter().map(MetricReport::synthetic_score)),
        combined_score: mean_of(reports.iter().map(MetricReport::combined_score)),
        wild_score_of_means: means.wild_score(),
        synthetic_score_of_means: means.synthetic_score(),
        combined_score_of_means: means.combined_score(),
        means,
        psnr_inf_excluded,
    }
}

impl Aggregate {
    /// CSV cells: metric means, then the canonical per-image-mean scores.
    pub fn csv_cells(&self) -> Vec<String> {
        let mut cells = self.means.csv_cells();
        let n = cells.len();
        cells[n - 3] = fmt_cell(self.wild_score);
        cells[n - 2] = fmt_cell(self.synthetic_score);
        cells[n - 1] = fmt_cell(self.combined_score);
        cells
    }

    /// Same layout with scores computed from the metric means.
    pub fn score_of_means_cells(&self, label: &str) -> Vec<String> {
        let mut cells = self.means.csv_cells();
        cells[0] = label.to_string();
        cells
    }
}

/// Write per-image rows followed by a canonical `mean` row and a
/// `score_of_means` row.
pub fn write_score_card(w: impl Write, reports: &[MetricReport]) -> Result<Aggregate> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(CSV_HEADER)?;
    for r in reports {
        wtr.write_record(r.csv_cells())?;
    }
    let agg = aggregate("mean", reports);
    wtr.write_record(agg.csv_cells())?;
    wtr.write_record(agg.score_of_means_cells("score_of_means"))?;
    wtr.flush().map_err(|e| Error::io("score card", e))?;
    Ok(agg)
}
