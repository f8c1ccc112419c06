//! Backprop gradients against central finite differences, in f64.

use candle_core::{DType, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semsr::autoencoder::{Autoencoder, AutoencoderConfig};
use semsr::denoiser::{ConditioningBundle, Denoiser, DenoiserConfig, TRAINABLE_GROUPS};
use semsr::diffusion::{training_loss, NoiseSchedule};
use semsr::params::{ParamGroup, ParamStore};
use semsr::rng::randn;
use semsr::semantic::SemanticEmbedding;
use semsr::tensor::LatentTensor;

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn tiny_denoiser() -> DenoiserConfig {
    DenoiserConfig {
        latent_channels: 2,
        widths: vec![4, 4],
        temb_dim: 4,
        attn_levels: vec![1],
        prompt_dim: 4,
        semantic_dim: 4,
        control_branch: true,
    }
}

/// Overwrite every parameter in `groups` with small Gaussian values so no
/// gradient is trivially zero.
fn randomize(store: &ParamStore, groups: &[ParamGroup], seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, var) in store.params_in(groups) {
        let t = (randn(&mut rng, var.dims(), DType::F64).unwrap() * std).unwrap();
        store.restore(&name, &t).unwrap();
    }
}

/// Relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` over every element of `params`.
fn check(params: &[(String, Var)], loss: impl Fn() -> Tensor) -> f64 {
    let grads = loss().backward().unwrap();
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (name, var) in params {
        let g = grads
            .get(var.as_tensor())
            .unwrap_or_else(|| panic!("no gradient for {name}"))
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for i in 0..base.len() {
            let mut v = base.clone();
            v[i] = base[i] + H;
            var.set(&Tensor::from_vec(v.clone(), var.dims(), var.device()).unwrap()).unwrap();
            let up = loss().to_scalar::<f64>().unwrap();
            v[i] = base[i] - H;
            var.set(&Tensor::from_vec(v, var.dims(), var.device()).unwrap()).unwrap();
            let down = loss().to_scalar::<f64>().unwrap();
            let numeric = (up - down) / (2.0 * H);
            diff += (g[i] - numeric).powi(2);
            na += g[i] * g[i];
            nn += numeric * numeric;
        }
        var.set(&Tensor::from_vec(base, var.dims(), var.device()).unwrap()).unwrap();
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt())
}

#[test]
fn training_loss_gradients() {
    let store = ParamStore::new(DType::F64, 11);
    let cfg = tiny_denoiser();
    let den = Denoiser::new(&store, &cfg).unwrap();
    Denoiser::init_control_from_backbone(&store).unwrap();
    // The backbone output conv starts at zero; give every group real values.
    randomize(&store, &[ParamGroup::Backbone, ParamGroup::Control, ParamGroup::Attention], 12, 0.3);
    store.set_trainable(&TRAINABLE_GROUPS);
    let params = store.params_in(&TRAINABLE_GROUPS);
    let total: usize = store.numel_in(&[ParamGroup::Backbone, ParamGroup::Control, ParamGroup::Attention]);
    assert!(total <= 5000, "tiny config has {total} parameters");

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x0 = LatentTensor::latent(randn(&mut rng, &[2, 2, 4, 4], DType::F64).unwrap()).unwrap();
    let noise = LatentTensor::latent(randn(&mut rng, &[2, 2, 4, 4], DType::F64).unwrap()).unwrap();
    let lr = LatentTensor::latent(randn(&mut rng, &[2, 2, 4, 4], DType::F64).unwrap()).unwrap();
    let prompt = randn(&mut rng, &[2, 3, 4], DType::F64).unwrap();
    let sem = SemanticEmbedding::new(randn(&mut rng, &[2, 4, 4], DType::F64).unwrap(), 2, 2).unwrap();
    let cond = ConditioningBundle::new(Some(lr), Some(prompt), Some(sem));
    let sched = NoiseSchedule::linear(100, 1e-3, 0.05).unwrap();
    let ts = [17, 80];
    let rel = check(&params, || training_loss(&den, &x0, &cond, &ts, &noise, &sched).unwrap());
    assert!(rel < TOL, "relative gradient error {rel}");
}

#[test]
fn vae_loss_gradients() {
    let store = ParamStore::new(DType::F64, 21);
    let cfg = AutoencoderConfig {
        base_width: 4,
        latent_channels: 1,
        factor: 2,
        kl_weight: 0.1,
        ..Default::default()
    };
    let ae = Autoencoder::new(&store, &cfg).unwrap();
    randomize(&store, &[ParamGroup::Autoencoder], 22, 0.3);
    store.set_trainable(&[ParamGroup::Autoencoder]);
    let params = store.params_in(&[ParamGroup::Autoencoder]);
    let total = store.numel_in(&[ParamGroup::Autoencoder]);
    assert!(total <= 5000, "tiny autoencoder has {total} parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let images = randn(&mut rng, &[1, 3, 8, 8], DType::F64).unwrap().affine(0.2, 0.5).unwrap();
    let noise = randn(&mut rng, &[1, 1, 4, 4], DType::F64).unwrap();
    let rel = check(&params, || ae.loss(&images, &noise).unwrap().total);
    assert!(rel < TOL, "relative gradient error {rel}");
}
