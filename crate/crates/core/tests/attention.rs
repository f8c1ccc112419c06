use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semsr::denoiser::CrossAttention;
use semsr::nn::attention;
use semsr::params::{ParamGroup, ParamStore};
use semsr::rng::randn;

fn t3(v: &[f64], shape: (usize, usize, usize)) -> Tensor {
    Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
}

#[test]
fn two_token_hand_oracle() {
    // Scores 0 and ln 3 give weights 1/4 and 3/4; values 0 and 1 give 0.75.
    let ln3 = 3f64.ln();
    let q = t3(&[1.0], (1, 1, 1));
    let k = t3(&[0.0, ln3], (1, 2, 1));
    let v = t3(&[0.0, 1.0], (1, 2, 1));
    let (out, w) = attention(&q, &k, &v).unwrap();
    let w = w.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    assert!((w[0] - 0.25).abs() < 1e-9 && (w[1] - 0.75).abs() < 1e-9, "{w:?}");
    let out = out.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0];
    assert!((out - 0.75).abs() < 1e-9);
}

fn set(store: &ParamStore, name: &str, v: &[f64], shape: &[usize]) {
    let t = Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap();
    store.restore(name, &t).unwrap();
}

#[test]
fn cross_attention_module_hand_oracle() {
    let ln3 = 3f64.ln();
    let store = ParamStore::new(DType::F64, 0);
    let ca = CrossAttention::new(&store.builder("ca", ParamGroup::Attention), 1, 1).unwrap();
    set(&store, "ca.q.weight", &[1.0], &[1, 1]);
    set(&store, "ca.k.weight", &[1.0], &[1, 1]);
    set(&store, "ca.v.weight", &[1.0 / ln3], &[1, 1]);
    set(&store, "ca.o.weight", &[1.0], &[1, 1]);
    let x = Tensor::from_vec(vec![1.0f64], (1, 1, 1, 1), &Device::Cpu).unwrap();
    let ctx = t3(&[0.0, ln3], (1, 2, 1));
    let (out, w) = ca.attend(&x, &ctx, None).unwrap();
    let w = w.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    assert!((w[0] - 0.25).abs() < 1e-9 && (w[1] - 0.75).abs() < 1e-9);
    let out = out.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0];
    assert!((out - 0.75).abs() < 1e-9);
    // Residual form adds the input back.
    let res = ca.forward(&x, Some(&ctx), None).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()[0];
    assert!((res - 1.75).abs() < 1e-9);
}

#[test]
fn zero_initialized_output_is_identity() {
    let store = ParamStore::new(DType::F64, 3);
    let ca = CrossAttention::new(&store.builder("ca", ParamGroup::Attention), 4, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = randn(&mut rng, &[2, 4, 3, 3], DType::F64).unwrap();
    let ctx = randn(&mut rng, &[2, 5, 3], DType::F64).unwrap();
    let y = ca.forward(&x, Some(&ctx), None).unwrap();
    let d = (y - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
    assert_eq!(d, 0.0);
}

fn randomized(seed: u64) -> (ParamStore, CrossAttention) {
    let store = ParamStore::new(DType::F64, seed);
    let ca = CrossAttention::new(&store.builder("ca", ParamGroup::Attention), 4, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    store.restore("ca.o.weight", &randn(&mut rng, &[4, 4], DType::F64).unwrap()).unwrap();
    (store, ca)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rows_sum_to_one_and_keys_permute(seed in 0u64..1000, n in 2usize..7) {
        let (_store, ca) = randomized(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let x = randn(&mut rng, &[1, 4, 2, 3], DType::F64).unwrap();
        let ctx = randn(&mut rng, &[1, n, 3], DType::F64).unwrap();
        let (out, w) = ca.attend(&x, &ctx, None).unwrap();
        for row in w.squeeze(0).unwrap().to_vec2::<f64>().unwrap() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
        // Reverse the token order: output unchanged, weights permuted.
        let idx = Tensor::from_vec((0..n as u32).rev().collect::<Vec<_>>(), n, &Device::Cpu).unwrap();
        let ctx_p = ctx.index_select(&idx, 1).unwrap();
        let (out_p, w_p) = ca.attend(&x, &ctx_p, None).unwrap();
        let d = (out - out_p).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        prop_assert!(d <= 1e-6);
        let w_back = w_p.index_select(&idx, 2).unwrap();
        let dw = (w - w_back).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        prop_assert!(dw <= 1e-6);
    }
}
