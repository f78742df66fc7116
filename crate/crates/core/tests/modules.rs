mod common;

use candle_core::{DType, Device, Tensor};
use common::*;
use hns_gnn::attention::ElementAttention;
use hns_gnn::border_head::BorderHead;
use hns_gnn::encoder::Encoder;
use hns_gnn::model::{Model, ModelConfig, Variant};
use hns_gnn::nn::{Conv2d, Linear, Mode, NormKind, ParamBuilder};
use hns_gnn::structure_gnn::{flatten_nodes, fuse_streams, unflatten_nodes, CoAttention, LatentGraph};
use proptest::prelude::*;
use rand::Rng;

fn linear(w: &[f64], input: usize, output: usize) -> Linear {
    Linear::from_tensors(tensor(w, &[input, output]), None)
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

#[test]
fn co_attention_two_nodes_by_hand() {
    // q = x_b, k = 0.5 x_b, v = 2 x_r, d = 1.
    let att = CoAttention {
        query: linear(&[1.0], 1, 1),
        key: linear(&[0.5], 1, 1),
        value: linear(&[2.0], 1, 1),
    };
    let xb = tensor(&[1.0, 2.0], &[1, 2, 1]);
    let xr = tensor(&[3.0, -1.0], &[1, 2, 1]);
    let out = values(&att.forward(&xb, &xr).unwrap());
    let (v0, v1) = (6.0, -2.0);
    let w0 = softmax(&[1.0 * 0.5, 1.0 * 1.0]);
    let w1 = softmax(&[2.0 * 0.5, 2.0 * 1.0]);
    let expected = [w0[0] * v0 + w0[1] * v1, w1[0] * v0 + w1[1] * v1];
    assert!(max_abs_diff(&out, &expected) < 1e-12, "{out:?} vs {expected:?}");
}

#[test]
fn co_attention_singleton_returns_value_row() {
    let mut b = ParamBuilder::new(3, DType::F64);
    let att = CoAttention::new(&mut b, "a", 3, 2, 4, 5).unwrap();
    let mut r = rng(1);
    let xb = randn(&mut r, &[1, 1, 3]);
    let xr = randn(&mut r, &[1, 1, 2]);
    assert_eq!(values(&att.weights(&xb).unwrap()), vec![1.0]);
    assert_eq!(
        values(&att.forward(&xb, &xr).unwrap()),
        values(&att.value.forward(&xr).unwrap())
    );
}

type Mat = Vec<Vec<f64>>;

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| (0..m).map(|j| (0..k).map(|t| a[i][t] * b[t][j]).sum()).collect())
        .collect()
}

fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

fn mat(r: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| r.random_range(-1.0..1.0)).collect()).collect()
}

fn flat(a: &Mat) -> Vec<f64> {
    a.iter().flatten().copied().collect()
}

#[test]
fn latent_graph_matches_dense_matrix_oracle() {
    let (n, cb, cr, d1, d2, cv) = (4, 2, 3, 3, 2, 2);
    for mean_pool in [false, true] {
        let mut r = rng(7);
        let (phi, psi, rep) = (mat(&mut r, cb, d1), mat(&mut r, cr, d2), mat(&mut r, cr, d1));
        let (a_g, w_r, w_out) = (mat(&mut r, d1, d1), mat(&mut r, d2, d2), mat(&mut r, d2, cv));
        let bias: Vec<f64> = (0..cv).map(|_| r.random_range(-1.0..1.0)).collect();
        let (xb, xr) = (mat(&mut r, n, cb), mat(&mut r, n, cr));

        let g = LatentGraph {
            border_proj: linear(&flat(&phi), cb, d1),
            road_proj: linear(&flat(&psi), cr, d2),
            reproject: linear(&flat(&rep), cr, d1),
            adjacency: tensor(&flat(&a_g), &[d1, d1]),
            weight: tensor(&flat(&w_r), &[d2, d2]),
            output: Linear::from_tensors(tensor(&flat(&w_out), &[d2, cv]), Some(tensor(&bias, &[cv]))),
            mean_pool,
        };
        let got = values(&g.forward(&tensor(&flat(&xb), &[1, n, cb]), &tensor(&flat(&xr), &[1, n, cr])).unwrap());

        let scale = if mean_pool { 1.0 / n as f64 } else { 1.0 };
        let x_f: Mat = matmul(&transpose(&matmul(&xb, &phi)), &matmul(&xr, &psi))
            .into_iter()
            .map(|row| row.into_iter().map(|v| v * scale).collect())
            .collect();
        let identity_minus_a: Mat = (0..d1)
            .map(|i| (0..d1).map(|j| (i == j) as u8 as f64 - a_g[i][j]).collect())
            .collect();
        let x_l = matmul(&matmul(&identity_minus_a, &x_f), &w_r);
        let mut expected = matmul(&matmul(&matmul(&xr, &rep), &x_l), &w_out);
        for row in &mut expected {
            for (v, b) in row.iter_mut().zip(&bias) {
                *v += b;
            }
        }
        assert!(max_abs_diff(&got, &flat(&expected)) < 1e-12, "mean_pool={mean_pool}");
    }
}

#[test]
fn latent_graph_degenerates_to_identity_smoothing() {
    let mut b = ParamBuilder::new(5, DType::F64);
    let mut g = LatentGraph::new(&mut b, "g", 3, 3, 4, 3, 3, false).unwrap();
    g.adjacency = Tensor::zeros((4, 4), DType::F64, &Device::Cpu).unwrap();
    g.weight = Tensor::eye(3, DType::F64, &Device::Cpu).unwrap();
    let mut r = rng(2);
    let x_f = randn(&mut r, &[1, 4, 3]);
    assert_eq!(values(&g.reason(&x_f).unwrap()), values(&x_f));
}

#[test]
fn latent_graph_zero_border_gives_bias_only() {
    let mut b = ParamBuilder::new(5, DType::F64);
    let g = LatentGraph::new(&mut b, "g", 3, 2, 4, 3, 2, true).unwrap();
    let mut r = rng(3);
    let xb = Tensor::zeros((1, 5, 3), DType::F64, &Device::Cpu).unwrap();
    let xr = randn(&mut r, &[1, 5, 2]);
    assert!(values(&g.project(&xb, &xr).unwrap()).iter().all(|&v| v == 0.0));
    let bias = values(g.output.bias.as_ref().unwrap());
    for row in values(&g.forward(&xb, &xr).unwrap()).chunks(2) {
        assert_eq!(row, bias.as_slice());
    }
}

#[test]
fn fuse_streams_is_elementwise_sum() {
    let mut r = rng(4);
    let up = randn(&mut r, &[1, 6, 3]);
    let low = randn(&mut r, &[1, 6, 3]);
    let fused = fuse_streams(&up, &low, 2, 3).unwrap();
    assert_eq!(fused.dims(), &[1, 3, 2, 3]);
    let back = values(&flatten_nodes(&fused).unwrap());
    let expected: Vec<f64> = values(&up).iter().zip(values(&low)).map(|(a, b)| a + b).collect();
    assert_eq!(back, expected);

    let zero = up.zeros_like().unwrap();
    assert_eq!(values(&fuse_streams(&up, &zero, 2, 3).unwrap()), values(&unflatten_nodes(&up, 2, 3).unwrap()));
    let cancelled = fuse_streams(&up, &up.neg().unwrap(), 2, 3).unwrap();
    assert!(values(&cancelled).iter().all(|&v| v == 0.0));
}

/// 4×4 input with hand-set 1×1 gate and transform, recomputed per pixel.
#[test]
fn element_attention_matches_pixel_oracle() {
    let (cg, ce) = (2, 2);
    let gate_w = [0.3, -0.7, 0.5, 0.2];
    let gate_b = 0.1;
    let w_e = [[0.9, -0.4], [0.25, 1.1]]; // w_e[out][in]
    let ea = ElementAttention::from_parts(
        Conv2d::from_tensors(tensor(&gate_w, &[1, cg + ce, 1, 1]), Some(tensor(&[gate_b], &[1])), 1),
        Conv2d::from_tensors(tensor(&[w_e[0][0], w_e[0][1], w_e[1][0], w_e[1][1]], &[2, 2, 1, 1]), None, 1),
    );
    let mut r = rng(9);
    let guide = randn(&mut r, &[1, cg, 4, 4]);
    let x_e = randn(&mut r, &[1, ce, 4, 4]);
    let got = values(&ea.forward(&guide, &x_e).unwrap());
    let (g, e) = (values(&guide), values(&x_e));
    let at = |v: &[f64], c: usize, p: usize| v[c * 16 + p];
    let mut expected = vec![0.0; 2 * 16];
    for p in 0..16 {
        let logit = gate_b
            + gate_w[0] * at(&g, 0, p)
            + gate_w[1] * at(&g, 1, p)
            + gate_w[2] * at(&e, 0, p)
            + gate_w[3] * at(&e, 1, p);
        let alpha = 1.0 / (1.0 + (-logit).exp());
        let gated = [at(&e, 0, p) * (1.0 + alpha), at(&e, 1, p) * (1.0 + alpha)];
        for o in 0..2 {
            expected[o * 16 + p] = w_e[o][0] * gated[0] + w_e[o][1] * gated[1];
        }
    }
    assert!(max_abs_diff(&got, &expected) < 1e-12);
}

#[test]
fn element_attention_gate_extremes() {
    let mut b = ParamBuilder::new(11, DType::F64);
    let ea = ElementAttention::new(&mut b, "ea", 3, 2).unwrap();
    let mut r = rng(10);
    let x_e = randn(&mut r, &[1, 2, 5, 5]);
    let plain = values(&ea.transform.forward(&x_e).unwrap());
    let zero = Tensor::zeros((1, 1, 5, 5), DType::F64, &Device::Cpu).unwrap();
    let one = Tensor::ones((1, 1, 5, 5), DType::F64, &Device::Cpu).unwrap();
    let with_zero = values(&ea.gate_and_transform(&x_e, &zero).unwrap());
    let with_one = values(&ea.gate_and_transform(&x_e, &one).unwrap());
    assert!(max_abs_diff(&with_zero, &plain) < 1e-6);
    let doubled: Vec<f64> = plain.iter().map(|v| 2.0 * v).collect();
    assert!(max_abs_diff(&with_one, &doubled) < 1e-6);
}

#[test]
fn border_head_matches_stepwise_composition() {
    let mut b = ParamBuilder::new(12, DType::F64);
    let head = BorderHead::new(&mut b, "h", 3, 4).unwrap();
    let mut r = rng(11);
    let x = randn(&mut r, &[1, 3, 8, 8]);
    let out = head.detect_border(&x).unwrap();
    let w1 = head.conv1.weight.clone();
    let b1 = head.conv1.bias.clone().unwrap();
    let w2 = head.conv2.weight.clone();
    let b2 = head.conv2.bias.clone().unwrap();
    let h1 = x
        .conv2d(&w1, 1, 1, 1, 1)
        .unwrap()
        .broadcast_add(&b1.reshape((1, 4, 1, 1)).unwrap())
        .unwrap()
        .relu()
        .unwrap();
    let logits = h1
        .conv2d(&w2, 1, 1, 1, 1)
        .unwrap()
        .broadcast_add(&b2.reshape((1, 1, 1, 1)).unwrap())
        .unwrap();
    let expected: Vec<f64> = values(&logits).iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
    assert!(max_abs_diff(&values(&out.prob), &expected) < 1e-6);
    assert_eq!(values(&out.feature), values(&h1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_rows_are_stochastic(n in 1usize..=24, cb in 1usize..=4, d in 1usize..=4, seed in 0u64..1000) {
        let mut b = ParamBuilder::new(seed, DType::F64);
        let att = CoAttention::new(&mut b, "a", cb, 2, d, 2).unwrap();
        let mut r = rng(seed);
        let xb = (randn(&mut r, &[1, n, cb]) * 3.0).unwrap();
        let w = values(&att.weights(&xb).unwrap());
        for row in w.chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn co_attention_is_permutation_equivariant(n in 1usize..=16, seed in 0u64..1000) {
        let mut b = ParamBuilder::new(seed, DType::F64);
        let att = CoAttention::new(&mut b, "a", 3, 2, 4, 3).unwrap();
        let mut r = rng(seed);
        let xb = randn(&mut r, &[1, n, 3]);
        let xr = randn(&mut r, &[1, n, 2]);
        let mut perm: Vec<u32> = (0..n as u32).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let idx = Tensor::from_vec(perm.clone(), n, &Device::Cpu).unwrap();
        let out = att.forward(&xb, &xr).unwrap();
        let permuted_out = att
            .forward(&xb.index_select(&idx, 1).unwrap(), &xr.index_select(&idx, 1).unwrap())
            .unwrap();
        let expected = values(&out.index_select(&idx, 1).unwrap());
        prop_assert!(max_abs_diff(&values(&permuted_out), &expected) <= 1e-12);
    }

    #[test]
    fn flatten_round_trips(c in 1usize..5, h in 1usize..7, w in 1usize..7, seed in 0u64..100) {
        let mut r = rng(seed);
        let x = randn(&mut r, &[2, c, h, w]);
        let nodes = flatten_nodes(&x).unwrap();
        prop_assert_eq!(nodes.dims(), &[2, h * w, c]);
        prop_assert_eq!(values(&unflatten_nodes(&nodes, h, w).unwrap()), values(&x));
    }

    #[test]
    fn encoder_shape_contract(hm in 1usize..=3, wm in 1usize..=3) {
        let (h, w) = (32 * hm, 32 * wm);
        let mut b = ParamBuilder::new(0, DType::F32);
        let enc = Encoder::new(&mut b, "enc", [4, 8, 8, 16], 1, NormKind::Batch).unwrap();
        let x = Tensor::zeros((1, 3, h, w), DType::F32, &Device::Cpu).unwrap();
        let out = enc.encode(&x, Mode::Eval).unwrap();
        let mut prev = 0;
        for (i, stride) in [4usize, 8, 16, 32].iter().enumerate() {
            let dims = out.levels[i].dims();
            prop_assert_eq!(&dims[2..], &[h / stride, w / stride]);
            prop_assert!(dims[1] >= prev);
            prev = dims[1];
        }
    }

    #[test]
    fn element_attention_is_affine_in_features_for_fixed_gate(a in -3.0f64..3.0, seed in 0u64..500) {
        let mut b = ParamBuilder::new(seed, DType::F64);
        let ea = ElementAttention::new(&mut b, "ea", 2, 3).unwrap();
        let mut r = rng(seed);
        let guide = randn(&mut r, &[1, 2, 4, 5]);
        let x_e = randn(&mut r, &[1, 3, 4, 5]);
        let alpha = ea.attention_map(&guide, &x_e).unwrap().detach();
        let scaled = values(&ea.gate_and_transform(&(&x_e * a).unwrap(), &alpha).unwrap());
        let expected: Vec<f64> = values(&ea.gate_and_transform(&x_e, &alpha).unwrap()).iter().map(|v| a * v).collect();
        prop_assert!(max_abs_diff(&scaled, &expected) <= 1e-12);
    }

    #[test]
    fn gate_scales_magnitude_between_one_and_two(seed in 0u64..500) {
        let mut b = ParamBuilder::new(seed, DType::F64);
        let gate = ElementAttention::new(&mut b, "ea", 2, 2).unwrap().gate;
        let identity = Conv2d::from_tensors(tensor(&[1.0, 0.0, 0.0, 1.0], &[2, 2, 1, 1]), None, 1);
        let ea = ElementAttention::from_parts(gate, identity);
        let mut r = rng(seed);
        let guide = (randn(&mut r, &[1, 2, 3, 3]) * 4.0).unwrap();
        let x_e = (randn(&mut r, &[1, 2, 3, 3]) * 4.0).unwrap();
        let gated = values(&ea.forward(&guide, &x_e).unwrap());
        for (g, x) in gated.iter().zip(values(&x_e)) {
            prop_assert!(g * x >= 0.0);
            prop_assert!(g.abs() >= x.abs() - 1e-12 && g.abs() <= 2.0 * x.abs() + 1e-12);
        }
    }
}

#[test]
fn model_outputs_are_probabilities_with_one_border_per_level() {
    for variant in Variant::ALL {
        let model = Model::build(&ModelConfig::desk(variant), 2, DType::F32).unwrap();
        let mut r = rng(variant as u64);
        let calls = if variant == Variant::Full { 100 } else { 5 };
        for i in 0..calls {
            let mode = if i % 2 == 0 { Mode::Eval } else { Mode::Train };
            let x = match (mode, i % 10) {
                (Mode::Eval, 0) => Tensor::zeros((1, 3, 32, 32), DType::F64, &Device::Cpu).unwrap(),
                (Mode::Eval, 4) => Tensor::ones((1, 3, 32, 32), DType::F64, &Device::Cpu).unwrap(),
                (Mode::Eval, _) => uniform(&mut r, &[1, 3, 32, 32], 0.0, 1.0),
                (Mode::Train, _) => uniform(&mut r, &[2, 3, 32, 32], 0.0, 1.0),
            };
            let x = x.to_dtype(DType::F32).unwrap();
            let bundle = model.forward(&x, mode).unwrap();
            let levels: Vec<usize> = bundle.borders.iter().map(|l| l.level).collect();
            assert_eq!(levels, model.config().gnn_levels);
            let mut all = values(&bundle.road);
            for l in &bundle.borders {
                all.extend(values(&l.prob));
            }
            let bad: Vec<&f64> = all.iter().filter(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))).take(3).collect();
            assert!(bad.is_empty(), "{variant} call {i}: {bad:?}");
        }
    }
}

#[test]
fn batch_norm_rejects_a_single_value_per_channel_in_training() {
    let model = Model::build(&ModelConfig::desk(Variant::Bu), 0, DType::F32).unwrap();
    let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
    let err = model.forward(&x, Mode::Train).unwrap_err();
    assert!(err.is_validation(), "{err}");
    assert!(model.forward(&x, Mode::Eval).is_ok());
}
