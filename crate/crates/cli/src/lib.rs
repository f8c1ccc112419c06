//! Command implementations behind the `semsr` binary: dataset build,
//! training, inference, sampler sweeps and scoring.

pub mod grid;
pub mod manifest;
pub mod plot;

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use semsr::config::RunConfig;
use semsr::degradation::{assemble_training_set, Branch, DatasetManifest};
use semsr::imaging::{file_stem, list_images, Image};
use semsr::metrics::{
    aggregate, evaluate, fmt_cell, write_score_card, Aggregate, FeaturePerceptual, HashStubNr, MetricInjection,
    MetricReport, NrMetric, PerceptualMetric, CSV_HEADER,
};
use semsr::params::ParamStore;
use semsr::pipeline::Models;
use semsr::sampler::{sample_one, Preset, SamplerConfig};
use semsr::semantic::SemanticExtractor;
use semsr::train::run_training;
use serde_json::json;

use crate::grid::{GridPoint, SweepGrid};
use crate::manifest::RunManifest;
use crate::plot::{line_plot, Series};

/// Run configuration from an optional file plus command-line seed.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.sampler.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Sampler settings for a run: the preset's guidance, start point and
/// prompts, with step count, seed and switches from the config's sampler
/// block. Without a preset the sampler block is used as is.
pub fn effective_sampler(cfg: &RunConfig, preset: Option<Preset>) -> SamplerConfig {
    match preset {
        None => cfg.sampler.clone(),
        Some(p) => {
            let s = &cfg.sampler;
            SamplerConfig {
                num_steps: s.num_steps,
                seed: s.seed,
                start_timestep: s.start_timestep,
                use_control: s.use_control,
                use_semantic: s.use_semantic,
                max_input_side: s.max_input_side,
                ..SamplerConfig::preset(p)
            }
        }
    }
}

pub fn cmd_build_dataset(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    let manifest = assemble_training_set(&cfg.dataset, cfg.seed, out)?;
    for b in [Branch::DownsampleOnly, Branch::Degrade, Branch::SyntheticPair, Branch::WildDegraded] {
        let n = manifest.records.iter().filter(|r| r.branch == b).count();
        let logged = manifest.count(b);
        log::info!("component {}: {n} patches", b.as_str());
        if n != logged {
            bail!("manifest header counts {logged} {} patches but holds {n}", b.as_str());
        }
    }
    let mut m = RunManifest::new("build-dataset", cfg).input("out", out);
    m.items.push(json!({ "component_counts": manifest.header.component_counts, "skipped": manifest.header.skipped }));
    m.write(out)?;
    Ok(manifest)
}

pub fn cmd_train(cfg: &RunConfig, manifest_path: &Path, out: &Path, resume: Option<&Path>) -> Result<PathBuf> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let pairs = manifest.load_records(root)?;
    log::info!("training on {} pairs from {}", pairs.len(), manifest_path.display());
    let outcome = run_training(cfg, &pairs, out, resume)?;
    for (g, c) in &outcome.frozen_checksums {
        log::info!("frozen {} checksum verified: {c}", g.as_str());
    }
    let points: Vec<(f64, f64)> = outcome.finetune_losses.iter().map(|&(s, l)| (s as f64, l)).collect();
    if let Err(e) = line_plot(
        &out.join("loss.svg"),
        "training loss",
        "step",
        "loss",
        &[Series { label: "fine-tune".into(), points }],
        None,
    ) {
        log::warn!("loss plot skipped: {e}");
    }
    let mut m = RunManifest::new("train", cfg).input("manifest", manifest_path);
    if let Some(r) = resume {
        m = m.input("resume", r);
    }
    m.items.push(json!({
        "checkpoint": outcome.checkpoint,
        "loss_log": outcome.loss_log,
        "final_step": outcome.finetune_losses.last().map(|l| l.0 + 1),
        "frozen_checksums": outcome.frozen_checksums.iter().map(|(g, c)| (g.as_str(), c.clone())).collect::<BTreeMap<_, _>>(),
    }));
    m.write(out)?;
    Ok(outcome.checkpoint)
}

/// Readable images in `dir` keyed by file stem; unreadable files are logged
/// and skipped.
pub fn load_images(dir: &Path) -> Result<Vec<(String, PathBuf, Image)>> {
    let mut out = Vec::new();
    for path in list_images(dir)? {
        match Image::load(&path) {
            Ok(img) => out.push((file_stem(&path), path, img)),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    Ok(out)
}

fn stem_index(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    Ok(list_images(dir)?.into_iter().map(|p| (file_stem(&p), p)).collect())
}

pub fn cmd_infer(checkpoint: &Path, input: &Path, out: &Path, cfg: &RunConfig, preset: Option<Preset>) -> Result<usize> {
    let (models, _) = Models::load(checkpoint)?;
    let sampler = effective_sampler(cfg, preset);
    let images = load_images(input)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut m = RunManifest::new("infer", cfg).input("checkpoint", checkpoint).input("input", input);
    m.seeds.insert("sampler".into(), sampler.seed);
    let mut written = 0;
    for (i, (id, path, lr)) in images.iter().enumerate() {
        let sr = match sample_one(&models, lr, &sampler, i) {
            Ok(sr) => sr,
            Err(e) => {
                log::warn!("{}: {e}", path.display());
                continue;
            }
        };
        let dst = out.join(format!("{id}.png"));
        sr.save(&dst)?;
        written += 1;
        m.items.push(json!({
            "image_id": id,
            "input": path,
            "output": dst,
            "index": i,
            "sampler": sampler,
        }));
    }
    m.write(out)?;
    Ok(written)
}

/// Inputs of a sweep. Without a checkpoint the sweep runs in replay mode:
/// every row comes from the metric injection file.
#[derive(Debug, Clone, Default)]
pub struct SweepArgs {
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub grid: PathBuf,
    pub inject: Option<PathBuf>,
    pub out: PathBuf,
    pub preset: Option<Preset>,
    pub workers: usize,
    pub nr_stub: bool,
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub point: String,
    pub report: MetricReport,
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct PointResult {
    pub point: GridPoint,
    pub sampler: SamplerConfig,
    pub rows: Vec<SweepRow>,
    pub aggregate: Aggregate,
}

pub const RESULTS_FILE: &str = "results.csv";
pub const AGGREGATES_FILE: &str = "aggregates.csv";

/// Image ids named by an injection file, with any `<point>/` prefix removed.
fn injected_ids(inj: &MetricInjection) -> Vec<String> {
    let mut ids: Vec<String> = inj
        .ids()
        .map(|k| k.rsplit('/').next().unwrap_or(k).to_string())
        .collect();
    ids.sort();
    ids.dedup();
    ids
}

fn overlay(report: &mut MetricReport, inj: Option<&MetricInjection>, point_key: &str) -> bool {
    let Some(inj) = inj else { return false };
    let scoped = format!("{point_key}/{}", report.image_id);
    match inj.lookup(&[&scoped, &report.image_id]) {
        Some(row) => {
            report.apply_injection(row);
            true
        }
        None => false,
    }
}

struct LiveInputs<'a> {
    models: &'a Models,
    lrs: &'a [(String, PathBuf, Image)],
    refs: &'a BTreeMap<String, Image>,
    nr_stub: bool,
    out: &'a Path,
}

fn run_point_live(live: &LiveInputs, point: &GridPoint, sampler: &SamplerConfig, inj: Option<&MetricInjection>) -> Vec<SweepRow> {
    let key = point.key();
    let dir = live.out.join("sr").join(point.slug());
    let perceptual = FeaturePerceptual::new(&live.models.extractor, live.models.store.dtype());
    let stub = HashStubNr;
    let nr: Option<&dyn NrMetric> = if live.nr_stub { Some(&stub) } else { None };
    live.lrs
        .iter()
        .enumerate()
        .map(|(i, (id, _, lr))| {
            let result = sample_one(live.models, lr, sampler, i).map_err(anyhow::Error::from).and_then(|sr| {
                sr.save(&dir.join(format!("{id}.png")))?;
                Ok(evaluate(id, &sr, live.refs.get(id), Some(&perceptual as &dyn PerceptualMetric), nr)?)
            });
            match result {
                Ok(mut report) => {
                    overlay(&mut report, inj, &key);
                    SweepRow { point: key.clone(), report, status: "ok".into() }
                }
                Err(e) => {
                    log::warn!("grid point {key}, image {id}: {e:#}");
                    SweepRow {
                        point: key.clone(),
                        report: MetricReport::new(id.clone()),
                        status: format!("failed: {e}"),
                    }
                }
            }
        })
        .collect()
}

fn run_point_replay(ids: &[String], point: &GridPoint, inj: &MetricInjection) -> Vec<SweepRow> {
    let key = point.key();
    ids.iter()
        .map(|id| {
            let mut report = MetricReport::new(id.clone());
            let status = if overlay(&mut report, Some(inj), &key) { "replayed" } else { "missing" };
            SweepRow { point: key.clone(), report, status: status.into() }
        })
        .collect()
}

/// Run every grid point over every image. Writes `results.csv` (one row per
/// point and image, then one `mean` row per point), `aggregates.csv`, a
/// score plot per axis and a run manifest.
pub fn cmd_sweep(cfg: &RunConfig, args: &SweepArgs) -> Result<Vec<PointResult>> {
    let grid = SweepGrid::load(&args.grid)?;
    let preset = args.preset.unwrap_or(grid.preset);
    let base = effective_sampler(cfg, Some(preset));
    let inj = args.inject.as_deref().map(MetricInjection::load).transpose()?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let points = grid.points();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.workers.max(1)).build()?;

    let per_point: Vec<(GridPoint, SamplerConfig, Vec<SweepRow>)> = match &args.checkpoint {
        Some(ckpt) => {
            let input = args.input.as_deref().context("a live sweep needs an input directory")?;
            let (models, _) = Models::load(ckpt)?;
            let lrs = load_images(input)?;
            if lrs.is_empty() {
                bail!("no readable images in {}", input.display());
            }
            let mut refs = BTreeMap::new();
            if let Some(dir) = &args.reference {
                for (id, path, img) in load_images(dir)? {
                    log::debug!("reference {id}: {}", path.display());
                    refs.insert(id, img);
                }
            }
            let live = LiveInputs { models: &models, lrs: &lrs, refs: &refs, nr_stub: args.nr_stub, out: &args.out };
            pool.install(|| {
                points
                    .par_iter()
                    .map(|p| {
                        let s = grid.sampler_config(&base, p);
                        let rows = match s.validate(&models.schedule) {
                            Ok(()) => run_point_live(&live, p, &s, inj.as_ref()),
                            Err(e) => {
                                log::warn!("grid point {} rejected: {e}", p.key());
                                lrs.iter()
                                    .map(|(id, _, _)| SweepRow {
                                        point: p.key(),
                                        report: MetricReport::new(id.clone()),
                                        status: format!("failed: {e}"),
                                    })
                                    .collect()
                            }
                        };
                        (*p, s, rows)
                    })
                    .collect()
            })
        }
        None => {
            let inj = inj.as_ref().context("replay mode (no checkpoint) needs --inject-metrics")?;
            let ids = match &args.input {
                Some(dir) => stem_index(dir)?.into_keys().collect(),
                None => injected_ids(inj),
            };
            pool.install(|| {
                points
                    .par_iter()
                    .map(|p| (*p, grid.sampler_config(&base, p), run_point_replay(&ids, p, inj)))
                    .collect()
            })
        }
    };

    let results: Vec<PointResult> = per_point
        .into_iter()
        .map(|(point, sampler, rows)| {
            let reports: Vec<MetricReport> = rows.iter().filter(|r| r.status != "missing" && !r.status.starts_with("failed")).map(|r| r.report.clone()).collect();
            let aggregate = aggregate("mean", &reports);
            PointResult { point, sampler, rows, aggregate }
        })
        .collect();

    write_results(&args.out.join(RESULTS_FILE), &results)?;
    write_aggregates(&args.out.join(AGGREGATES_FILE), &grid, &results)?;
    plot_axes(&args.out, &grid, &results);

    let mut m = RunManifest::new("sweep", cfg).input("grid", &args.grid).input("out", &args.out);
    for (k, v) in [("checkpoint", &args.checkpoint), ("input", &args.input), ("reference", &args.reference), ("inject_metrics", &args.inject)] {
        if let Some(v) = v {
            m = m.input(k, v);
        }
    }
    m.items.push(json!({ "grid": grid, "preset": preset.as_str(), "workers": args.workers }));
    for r in &results {
        m.items.push(json!({ "point": r.point.key(), "sampler": r.sampler }));
    }
    m.write(&args.out)?;
    Ok(results)
}

fn write_results(path: &Path, results: &[PointResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["point"];
    header.extend(CSV_HEADER);
    header.push("status");
    w.write_record(&header)?;
    for r in results {
        for row in &r.rows {
            let mut cells = vec![row.point.clone()];
            cells.extend(row.report.csv_cells());
            cells.push(row.status.clone());
            w.write_record(&cells)?;
        }
        let mut cells = vec![r.point.key()];
        cells.extend(r.aggregate.csv_cells());
        cells.push("aggregate".into());
        w.write_record(&cells)?;
    }
    w.flush()?;
    Ok(())
}

impl PointResult {
    fn aggregate_count(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.status != "missing" && !r.status.starts_with("failed"))
            .count()
    }
}

fn write_aggregates(path: &Path, grid: &SweepGrid, results: &[PointResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let axes = grid.active_axes();
    let mut header: Vec<String> = vec!["point".into()];
    header.extend(axes.iter().map(|a| a.to_string()));
    header.extend(
        [
            "images",
            "wild_score",
            "synthetic_score",
            "combined_score",
            "wild_score_of_means",
            "synthetic_score_of_means",
            "combined_score_of_means",
            "psnr_inf_excluded",
        ]
        .map(String::from),
    );
    w.write_record(&header)?;
    for r in results {
        let a = &r.aggregate;
        let mut cells = vec![r.point.key()];
        cells.extend(axes.iter().map(|ax| r.point.axis_value(ax).unwrap_or_default()));
        cells.push(r.aggregate_count().to_string());
        for v in [
            a.wild_score,
            a.synthetic_score,
            a.combined_score,
            a.wild_score_of_means,
            a.synthetic_score_of_means,
            a.combined_score_of_means,
        ] {
            cells.push(fmt_cell(v));
        }
        cells.push(a.psnr_inf_excluded.to_string());
        w.write_record(&cells)?;
    }
    w.flush()?;
    Ok(())
}

/// One `score_vs_<axis>.svg` per active axis: each score averaged over the
/// points sharing an axis value.
fn plot_axes(out: &Path, grid: &SweepGrid, results: &[PointResult]) {
    for axis in grid.active_axes() {
        let mut values: Vec<String> = Vec::new();
        for r in results {
            if let Some(v) = r.point.axis_value(axis) {
                if !values.contains(&v) {
                    values.push(v);
                }
            }
        }
        let numeric = axis == "guidance_scale";
        let x_of = |i: usize, v: &str| if numeric { v.parse().unwrap_or(i as f64) } else { i as f64 };
        let picks: [(&str, fn(&Aggregate) -> Option<f64>); 3] = [
            ("wild", |a| a.wild_score),
            ("synthetic", |a| a.synthetic_score),
            ("combined", |a| a.combined_score),
        ];
        let series: Vec<Series> = picks
            .iter()
            .map(|(label, pick)| Series {
                label: label.to_string(),
                points: values
                    .iter()
                    .enumerate()
                    .filter_map(|(i, v)| {
                        let ys: Vec<f64> = results
                            .iter()
                            .filter(|r| r.point.axis_value(axis).as_deref() == Some(v))
                            .filter_map(|r| pick(&r.aggregate))
                            .collect();
                        (!ys.is_empty()).then(|| (x_of(i, v), ys.iter().sum::<f64>() / ys.len() as f64))
                    })
                    .collect(),
            })
            .filter(|s| !s.points.is_empty())
            .collect();
        if series.is_empty() {
            log::warn!("no scores to plot against {axis}");
            continue;
        }
        let path = out.join(format!("score_vs_{axis}.svg"));
        let labels = (!numeric).then_some(values.as_slice());
        if let Err(e) = line_plot(&path, &format!("score vs {axis}"), axis, "score", &series, labels) {
            log::warn!("plot {} failed: {e}", path.display());
        }
    }
}

/// Inputs of a scoring run. With no SR directory the score card is built
/// from the injection file alone.
#[derive(Debug, Clone, Default)]
pub struct ScoreArgs {
    pub sr: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub inject: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    pub nr_stub: bool,
}

pub const SCORE_CARD_FILE: &str = "score_card.csv";

pub fn cmd_score(cfg: &RunConfig, args: &ScoreArgs) -> Result<(Vec<MetricReport>, Aggregate)> {
    let inj = args.inject.as_deref().map(MetricInjection::load).transpose()?;
    let mut reports = Vec::new();
    match &args.sr {
        Some(sr_dir) => {
            // The perceptual stand-in needs an extractor: the checkpoint's when
            // given, otherwise a seeded one from the run config.
            let (_models, extractor, dtype) = match &args.checkpoint {
                Some(p) => {
                    let (m, _) = Models::load(p)?;
                    let (e, d) = (m.extractor.clone(), m.store.dtype());
                    (Some(m), e, d)
                }
                None => {
                    let store = ParamStore::new(cfg.dtype(), cfg.seed);
                    (None, SemanticExtractor::new(&store, &cfg.extractor)?, cfg.dtype())
                }
            };
            let perceptual = FeaturePerceptual::new(&extractor, dtype);
            let stub = HashStubNr;
            let nr: Option<&dyn NrMetric> = if args.nr_stub { Some(&stub) } else { None };
            let refs = args.reference.as_deref().map(stem_index).transpose()?;
            for (id, path, sr) in load_images(sr_dir)? {
                let reference = match &refs {
                    None => None,
                    Some(idx) => match idx.get(&id) {
                        None => {
                            log::warn!("{}: no reference image named {id}, skipped", path.display());
                            continue;
                        }
                        Some(rp) => match Image::load(rp) {
                            Ok(img) => Some(img),
                            Err(e) => {
                                log::warn!("{}: unreadable reference, skipped: {e}", rp.display());
                                continue;
                            }
                        },
                    },
                };
                let mut r = match evaluate(&id, &sr, reference.as_ref(), Some(&perceptual as &dyn PerceptualMetric), nr) {
                    Ok(r) => r,
                    Err(e) => {
                        log::warn!("{}: {e}, skipped", path.display());
                        continue;
                    }
                };
                if let Some(inj) = &inj {
                    if let Some(row) = inj.get(&id) {
                        r.apply_injection(row);
                    }
                }
                reports.push(r);
            }
            if let Some(idx) = &refs {
                let seen: Vec<&str> = reports.iter().map(|r| r.image_id.as_str()).collect();
                for id in idx.keys().filter(|k| !seen.contains(&k.as_str())) {
                    log::warn!("reference {id} has no SR counterpart, skipped");
                }
            }
        }
        None => {
            let inj = inj.as_ref().context("scoring without an SR directory needs --inject-metrics")?;
            for id in inj.ids() {
                let mut r = MetricReport::new(id.clone());
                r.apply_injection(inj.get(id).expect("id listed by the injection"));
                reports.push(r);
            }
        }
    }
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let card = args.out.join(SCORE_CARD_FILE);
    let agg = write_score_card(File::create(&card).with_context(|| format!("creating {}", card.display()))?, &reports)?;
    let mut m = RunManifest::new("score", cfg).input("out", &args.out);
    for (k, v) in [("sr", &args.sr), ("reference", &args.reference), ("inject_metrics", &args.inject), ("checkpoint", &args.checkpoint)] {
        if let Some(v) = v {
            m = m.input(k, v);
        }
    }
    m.items.push(json!({ "images": reports.len(), "nr_stub": args.nr_stub }));
    m.write(&args.out)?;
    Ok((reports, agg))
}

/// Machine-readable error line: `{"error": ..., "kind": ...}`.
pub fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<semsr::Error>())
        .map(|e| e.kind())
        .unwrap_or("other");
    json!({ "error": format!("{err:#}"), "kind": kind }).to_string()
}
