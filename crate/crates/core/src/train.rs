//! Training stages: autoencoder, unconditional backbone pretraining, and
//! fine-tuning of the control branch and cross-attention on LR/HR pairs.
//!
//! Every random draw in a step comes from an RNG keyed by `(seed, stage,
//! step)`, so a run resumed from a checkpoint follows the same trajectory as
//! an uninterrupted one.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{OptimizerConfig, RunConfig};
use crate::degradation::PatchRecord;
use crate::denoiser::{trainable_parameters, ConditioningBundle, Denoiser, WithoutControl, TRAINABLE_GROUPS};
use crate::diffusion::training_loss;
use crate::imaging::{images_to_tensor, upsample, Image};
use crate::params::{Adam, Checkpoint, ParamGroup};
use crate::pipeline::Models;
use crate::prompt::tag_image;
use crate::rng::{randn, seeded_rng};
use crate::semantic::SemanticEmbedding;
use crate::tensor::{scalar_f64, LatentTensor};
use crate::{Error, Result};

/// Groups that must not change while fine-tuning.
pub const FROZEN_GROUPS: [ParamGroup; 3] = [ParamGroup::Autoencoder, ParamGroup::Extractor, ParamGroup::Backbone];

fn step_rng(seed: u64, stage: &str, step: usize) -> ChaCha8Rng {
    seeded_rng(seed, &[stage, &step.to_string()])
}

fn batch_indices(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

fn cat_latents(items: &[&LatentTensor]) -> Result<LatentTensor> {
    let ts: Vec<&Tensor> = items.iter().map(|l| l.tensor()).collect();
    LatentTensor::latent(Tensor::cat(&ts, 0)?)
}

/// Train the VAE on HR images, then fit the latent scale to unit variance.
/// Returns the per-step total loss.
pub fn train_autoencoder(
    models: &Models,
    images: &[Image],
    steps: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::InvalidInput("no images for autoencoder training".into()));
    }
    let store = &models.store;
    let dtype = store.dtype();
    store.set_trainable(&[ParamGroup::Autoencoder]);
    let params = store.params_in(&[ParamGroup::Autoencoder]);
    let mut adam = Adam::new(lr);
    let mut losses = Vec::with_capacity(steps);
    let f = models.autoencoder.config().factor;
    let lc = models.autoencoder.config().latent_channels;
    for step in 0..steps {
        let mut rng = step_rng(seed, "autoencoder", step);
        let idx = batch_indices(&mut rng, images.len(), batch);
        let picked: Vec<Image> = idx.iter().map(|&i| images[i].clone()).collect();
        let x = images_to_tensor(&picked, dtype)?;
        let (_, _, h, w) = x.dims4()?;
        let noise = randn(&mut rng, &[batch, lc, h / f, w / f], dtype)?;
        let loss = models.autoencoder.loss(&x, &noise)?;
        let value = scalar_f64(&loss.total)?;
        if !value.is_finite() {
            store.set_trainable(&[]);
            return Err(Error::NonFinite("autoencoder loss"));
        }
        let grads = loss.total.backward()?;
        adam.step(store, &params, &grads)?;
        losses.push(value);
    }
    store.set_trainable(&[]);
    fit_latent_scale(models, images)?;
    Ok(losses)
}

/// Set the latent scale to the reciprocal standard deviation of the
/// unscaled posterior means over `images`.
pub fn fit_latent_scale(models: &Models, images: &[Image]) -> Result<f64> {
    let dtype = models.store.dtype();
    let mut values = Vec::new();
    for chunk in images.chunks(8) {
        let (mean, _) = models.autoencoder.encode_dist(&images_to_tensor(chunk, dtype)?)?;
        values.extend(crate::tensor::flat_f64(&mean)?);
    }
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
    models.autoencoder.set_latent_scale(scale)?;
    Ok(scale)
}

/// Unconditional noise-prediction training of the backbone on clean latents.
/// Afterwards the backbone is frozen and the control branch is initialized
/// as a copy of the backbone encoder.
pub fn pretrain_backbone(
    models: &Models,
    latents: &[LatentTensor],
    steps: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if latents.is_empty() {
        return Err(Error::InvalidInput("no latents for backbone pretraining".into()));
    }
    let store = &models.store;
    store.set_trainable(&[ParamGroup::Backbone]);
    let params = store.params_in(&[ParamGroup::Backbone]);
    let model = WithoutControl(&models.denoiser);
    let empty = ConditioningBundle::empty();
    let mut adam = Adam::new(lr);
    let mut losses = Vec::with_capacity(steps);
    let t_len = models.schedule.len();
    for step in 0..steps {
        let mut rng = step_rng(seed, "backbone", step);
        let idx = batch_indices(&mut rng, latents.len(), batch);
        let x0 = cat_latents(&idx.iter().map(|&i| &latents[i]).collect::<Vec<_>>())?;
        let ts: Vec<usize> = (0..batch).map(|_| rng.random_range(0..t_len)).collect();
        let noise = LatentTensor::latent(randn(&mut rng, x0.dims(), x0.dtype())?)?;
        let loss = training_loss(&model, &x0, &empty, &ts, &noise, &models.schedule)?;
        losses.push(scalar_f64(&loss)?);
        let grads = loss.backward()?;
        adam.step(store, &params, &grads)?;
    }
    store.set_trainable(&[]);
    Denoiser::init_control_from_backbone(store)?;
    Ok(losses)
}

/// Cached conditioning for one training pair.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub hr_latent: LatentTensor,
    pub lr_latent: LatentTensor,
    pub semantic: SemanticEmbedding,
    pub tags: Vec<String>,
}

/// Encode HR and bicubic-upsampled LR patches, extract semantic tokens from
/// the LR patch, and tag it.
pub fn prepare_pairs(models: &Models, pairs: &[PatchRecord]) -> Result<Vec<PreparedPair>> {
    let dtype = models.store.dtype();
    pairs
        .iter()
        .map(|p| {
            // Wild pairs keep the LR patch at HR size.
            let up = if p.lr_patch.width() == p.hr_patch.width() {
                p.lr_patch.clone()
            } else {
                upsample(&p.lr_patch, 4)?.clamp01()
            };
            p.hr_patch.ensure_same_size(&up)?;
            Ok(PreparedPair {
                hr_latent: models.autoencoder.encode(&images_to_tensor(std::slice::from_ref(&p.hr_patch), dtype)?)?,
                lr_latent: models.autoencoder.encode(&images_to_tensor(&[up], dtype)?)?,
                semantic: models
                    .extractor
                    .embed(&images_to_tensor(std::slice::from_ref(&p.lr_patch), dtype)?)?,
                tags: tag_image(&p.lr_patch),
            })
        })
        .collect()
}

/// Optimizer state and loss history of the fine-tuning stage.
#[derive(Debug, Clone)]
pub struct FinetuneState {
    pub step: usize,
    pub adam: Adam,
    pub losses: Vec<(usize, f64)>,
}

impl FinetuneState {
    pub fn new(lr: f64) -> Self {
        Self {
            step: 0,
            adam: Adam::new(lr),
            losses: Vec::new(),
        }
    }
}

/// One fine-tuning step's batch, built from the step RNG.
fn finetune_batch(
    models: &Models,
    data: &[PreparedPair],
    opt: &OptimizerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(LatentTensor, ConditioningBundle, Vec<usize>, LatentTensor)> {
    let idx = batch_indices(rng, data.len(), opt.batch_size);
    let x0 = cat_latents(&idx.iter().map(|&i| &data[i].hr_latent).collect::<Vec<_>>())?;
    let lr = cat_latents(&idx.iter().map(|&i| &data[i].lr_latent).collect::<Vec<_>>())?;
    let semantic = SemanticEmbedding::cat(&idx.iter().map(|&i| &data[i].semantic).collect::<Vec<_>>())?;
    let drop_prompt = rng.random_bool(opt.prompt_dropout);
    let prompt = if drop_prompt {
        None
    } else {
        let tags: Vec<Vec<String>> = idx.iter().map(|&i| data[i].tags.clone()).collect();
        models.prompts.encode(&tags, models.store.dtype())?
    };
    let t_len = models.schedule.len();
    let ts: Vec<usize> = (0..idx.len()).map(|_| rng.random_range(0..t_len)).collect();
    let noise = LatentTensor::latent(randn(rng, x0.dims(), x0.dtype())?)?;
    Ok((x0, ConditioningBundle::new(Some(lr), prompt, Some(semantic)), ts, noise))
}

/// Run fine-tuning steps `state.step .. until`. Only the control branch and
/// the cross-attention blocks are updated; frozen checksums are verified at
/// the start and end. `on_step` sees `(step, loss)` after every update.
pub fn finetune(
    models: &Models,
    data: &[PreparedPair],
    opt: &OptimizerConfig,
    seed: u64,
    state: &mut FinetuneState,
    until: usize,
    mut on_step: impl FnMut(&FinetuneState) -> Result<()>,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidInput("no training pairs".into()));
    }
    let store = &models.store;
    let before = frozen_checksums(models)?;
    for (g, c) in &before {
        log::info!("frozen checksum {g} at start: {c}");
    }
    store.set_trainable(&TRAINABLE_GROUPS);
    let params = trainable_parameters(store);
    let result: Result<()> = (|| {
        while state.step < until {
            let mut rng = step_rng(seed, "finetune", state.step);
            let (x0, cond, ts, noise) = finetune_batch(models, data, opt, &mut rng)?;
            let loss = training_loss(&models.denoiser, &x0, &cond, &ts, &noise, &models.schedule)?;
            let value = scalar_f64(&loss)?;
            let grads = loss.backward()?;
            state.adam.step(store, &params, &grads)?;
            state.losses.push((state.step, value));
            state.step += 1;
            on_step(state)?;
        }
        Ok(())
    })();
    store.set_trainable(&[]);
    result?;
    verify_frozen(models, &before)
}

pub fn frozen_checksums(models: &Models) -> Result<BTreeMap<ParamGroup, String>> {
    crate::params::group_checksums(&models.store, &FROZEN_GROUPS)
}

/// Compare current frozen-group checksums with `before`.
pub fn verify_frozen(models: &Models, before: &BTreeMap<ParamGroup, String>) -> Result<()> {
    let after = frozen_checksums(models)?;
    for (g, b) in before {
        let a = &after[g];
        log::info!("frozen checksum {g} at end: {a}");
        if a != b {
            return Err(Error::FrozenViolation {
                group: g.to_string(),
                before: b.clone(),
                after: a.clone(),
            });
        }
    }
    Ok(())
}

/// Outputs of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub autoencoder_losses: Vec<f64>,
    pub backbone_losses: Vec<f64>,
    pub finetune_losses: Vec<(usize, f64)>,
    pub frozen_checksums: BTreeMap<ParamGroup, String>,
}

pub const STAGE_KEY: &str = "stage";
pub const STEP_KEY: &str = "finetune_step";

fn write_loss_log(path: &Path, losses: &[(usize, f64)]) -> Result<()> {
    let mut buf = String::from("step,loss\n");
    for (s, l) in losses {
        buf.push_str(&format!("{s},{l}\n"));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Read a `step,loss` log written by [`run_training`].
pub fn read_loss_log(path: &Path) -> Result<Vec<(usize, f64)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.records()
        .map(|r| {
            let r = r?;
            let step = r[0]
                .parse()
                .map_err(|e| Error::InvalidInput(format!("bad step in loss log: {e}")))?;
            let loss = r[1]
                .parse()
                .map_err(|e| Error::InvalidInput(format!("bad loss in loss log: {e}")))?;
            Ok((step, loss))
        })
        .collect()
}

fn save_finetune(models: &Models, path: &Path, state: &FinetuneState, seed: u64) -> Result<()> {
    let mut extra = BTreeMap::new();
    extra.insert(STAGE_KEY.to_string(), "finetune".to_string());
    extra.insert(STEP_KEY.to_string(), state.step.to_string());
    extra.insert("seed".to_string(), seed.to_string());
    models.save(path, &extra, Some(&state.adam))
}

/// Full pipeline from training pairs to a checkpoint in `out_dir`
/// (`model.safetensors` and `loss.csv`). With `resume`, the models, optimizer
/// state and loss history are restored and fine-tuning continues from the
/// stored step.
pub fn run_training(
    cfg: &RunConfig,
    pairs: &[PatchRecord],
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_path = out_dir.join("model.safetensors");
    let loss_path = out_dir.join("loss.csv");
    let opt = &cfg.optimizer;
    let (models, mut state, ae_losses, bb_losses) = match resume {
        Some(path) => {
            let (models, ckpt) = Models::load(path)?;
            if models.config != cfg.model() {
                return Err(Error::InvalidConfig("checkpoint architecture differs from the run config".into()));
            }
            let state = resume_state(&ckpt, opt.lr, path)?;
            (models, state, Vec::new(), Vec::new())
        }
        None => {
            let models = Models::new(&cfg.model(), cfg.dtype(), cfg.seed)?;
            let hr: Vec<Image> = pairs.iter().map(|p| p.hr_patch.clone()).collect();
            let ae = train_autoencoder(&models, &hr, opt.autoencoder_steps, opt.autoencoder_lr, opt.batch_size, cfg.seed)?;
            log::info!(
                "autoencoder: {} steps, final loss {:?}, latent scale {}",
                ae.len(),
                ae.last(),
                models.autoencoder.latent_scale()
            );
            let dtype = models.store.dtype();
            let latents = hr
                .iter()
                .map(|h| models.autoencoder.encode(&images_to_tensor(std::slice::from_ref(h), dtype)?))
                .collect::<Result<Vec<_>>>()?;
            let bb = pretrain_backbone(&models, &latents, opt.backbone_steps, opt.backbone_lr, opt.batch_size, cfg.seed)?;
            log::info!("backbone: {} steps, final loss {:?}", bb.len(), bb.last());
            (models, FinetuneState::new(opt.lr), ae, bb)
        }
    };
    let data = prepare_pairs(&models, pairs)?;
    let checksums = frozen_checksums(&models)?;
    let every = opt.checkpoint_every;
    finetune(&models, &data, opt, cfg.seed, &mut state, opt.steps, |s| {
        if s.step % 100 == 0 {
            log::info!("step {} loss {:.5}", s.step, s.losses.last().map(|l| l.1).unwrap_or(f64::NAN));
        }
        if every > 0 && s.step % every == 0 && s.step < opt.steps {
            save_finetune(&models, &ckpt_path, s, cfg.seed)?;
            write_loss_log(&loss_path, &s.losses)?;
        }
        Ok(())
    })?;
    save_finetune(&models, &ckpt_path, &state, cfg.seed)?;
    write_loss_log(&loss_path, &state.losses)?;
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        loss_log: loss_path,
        autoencoder_losses: ae_losses,
        backbone_losses: bb_losses,
        finetune_losses: state.losses,
        frozen_checksums: checksums,
    })
}

fn resume_state(ckpt: &Checkpoint, lr: f64, path: &Path) -> Result<FinetuneState> {
    let step: usize = ckpt
        .metadata
        .get(STEP_KEY)
        .ok_or_else(|| Error::Checkpoint(format!("{}: not a fine-tuning checkpoint", path.display())))?
        .parse()
        .map_err(|e| Error::Checkpoint(format!("bad {STEP_KEY}: {e}")))?;
    let mut adam = Adam::new(lr);
    adam.read_state(ckpt)?;
    let losses = match path.parent().map(|d| d.join("loss.csv")) {
        Some(p) if p.exists() => read_loss_log(&p)?.into_iter().filter(|(s, _)| *s < step).collect(),
        _ => Vec::new(),
    };
    Ok(FinetuneState { step, adam, losses })
}

/// Mean of the first and last `window` losses.
pub fn leading_trailing_means(losses: &[f64], window: usize) -> Option<(f64, f64)> {
    if losses.len() < window || window == 0 {
        return None;
    }
    let lead = losses[..window].iter().sum::<f64>() / window as f64;
    let trail = losses[losses.len() - window..].iter().sum::<f64>() / window as f64;
    Some((lead, trail))
}
