#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use hns_gnn::data::Mask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn tensor(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Mask {
    Mask::from_shape_fn((h, w), |_| rng.random_bool(p) as u8)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Relative-error floor for near-zero gradient entries.
const REL_FLOOR: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;

/// Largest relative error between the autograd gradient of `f` with respect
/// to each of `inputs` and a central finite-difference estimate.
pub fn grad_check(inputs: &[Tensor], f: impl Fn(&[Tensor]) -> Tensor) -> f64 {
    let vars: Vec<Var> = inputs.iter().map(|t| Var::from_tensor(t).unwrap()).collect();
    let tracked: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = f(&tracked).backward().unwrap();
    let mut worst = 0.0f64;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(var.as_tensor())
            .map(values)
            .unwrap_or_else(|| vec![0.0; var.elem_count()]);
        let base = values(&inputs[k]);
        for j in 0..base.len() {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[j] += delta;
                let mut args: Vec<Tensor> = inputs.to_vec();
                args[k] = Tensor::from_vec(v, inputs[k].dims(), &Device::Cpu).unwrap();
                scalar(&f(&args))
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            let denom = analytic[j].abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((analytic[j] - numeric).abs() / denom);
        }
    }
    worst
}

/// Contract an output with a fixed random tensor to obtain a scalar whose
/// gradient exercises every output entry.
pub fn project(out: &Tensor, probe: &Tensor) -> Tensor {
    (out * probe).unwrap().sum_all().unwrap()
}
