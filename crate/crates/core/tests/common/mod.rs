//! Helpers and independent oracles shared by the integration tests.
#![allow(dead_code)]

use layerfed::data::{gen_synthetic, partition_heterogeneous, ClientShard, Dataset, PartitionConfig, SyntheticConfig};
use layerfed::nn::{Activation, Matrix, ModelParams, ModelSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut impl Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_params(spec: &ModelSpec, rng: &mut impl Rng, scale: f64) -> ModelParams {
    ModelParams {
        layers: spec
            .param_lens()
            .into_iter()
            .map(|n| random_vec(rng, n, scale))
            .collect(),
    }
}

/// Small synthetic federation: `n` clients, two labels each.
pub fn small_shards(n: usize, seed: u64) -> Vec<ClientShard> {
    let ds = gen_synthetic(&SyntheticConfig::new(2, 40, 6, 4), seed).unwrap();
    partition_heterogeneous(&ds, &partition_cfg(n, 2, seed)).unwrap()
}

pub fn partition_cfg(n: usize, s: usize, seed: u64) -> PartitionConfig {
    PartitionConfig {
        num_clients: n,
        labels_per_client: s,
        lognormal_sigma: 0.5,
        seed,
        train_ratio: 0.75,
        random_factor: true,
    }
}

pub fn dataset(rows: usize, dim: usize, classes: usize, rng: &mut impl Rng) -> Dataset {
    let x = random_vec(rng, rows * dim, 1.0);
    let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    Dataset::new(Matrix::new(rows, dim, x).unwrap(), labels, classes).unwrap()
}

/// Forward pass written neuron by neuron, straight from the layer definition.
pub fn forward_oracle(spec: &ModelSpec, params: &ModelParams, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    for (layer, p) in spec.layers().iter().zip(&params.layers) {
        let mut next = vec![0.0; layer.fan_out];
        for (j, out) in next.iter_mut().enumerate() {
            let mut z = p[layer.fan_out * layer.fan_in + j];
            for (i, &ai) in a.iter().enumerate() {
                z += p[j * layer.fan_in + i] * ai;
            }
            *out = match layer.activation {
                Activation::Relu => z.max(0.0),
                Activation::Identity => z,
            };
        }
        a = next;
    }
    a
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Direct evaluation of the similarity-weighted recombination of one block:
/// returns the row-major N×N weights and the fused blocks.
pub fn fuse_oracle(blocks: &[Vec<f64>], alpha_t: f64, sigma: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = blocks.len();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        let mut off = 0.0;
        for j in 0..n {
            if i != j {
                let z = alpha_t / sigma * (-sq_dist(&blocks[i], &blocks[j]) / sigma).exp();
                w[i * n + j] = z;
                off += z;
            }
        }
        w[i * n + i] = 1.0 - off;
    }
    let fused = (0..n)
        .map(|i| {
            (0..blocks[i].len())
                .map(|k| (0..n).map(|j| w[i * n + j] * blocks[j][k]).sum())
                .collect()
        })
        .collect();
    (w, fused)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn params_max_diff(a: &ModelParams, b: &ModelParams) -> f64 {
    a.layers
        .iter()
        .zip(&b.layers)
        .map(|(x, y)| max_abs_diff(x, y))
        .fold(0.0, f64::max)
}

/// Worst relative error between the analytic gradient of `f` and central
/// differences with step `h`. The denominator is floored at 1e-4 so
/// near-zero components are compared absolutely.
pub fn gradcheck(params: &ModelParams, h: f64, f: impl Fn(&ModelParams) -> (f64, ModelParams)) -> f64 {
    let (_, analytic) = f(params);
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for l in 0..params.layers.len() {
        for k in 0..params.layers[l].len() {
            let v = params.layers[l][k];
            probe.layers[l][k] = v + h;
            let up = f(&probe).0;
            probe.layers[l][k] = v - h;
            let down = f(&probe).0;
            probe.layers[l][k] = v;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.layers[l][k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    worst
}

/// One randomized gradient-check configuration (depth ≤ 3, widths ≤ 8).
/// Returns the worst relative errors of the data loss and of the penalty.
pub fn gradcheck_case(seed: u64) -> (f64, f64) {
    use layerfed::nn::loss_and_grad;
    use layerfed::runtime::{penalty_value_and_grad, ClientState, LayerPenalty, PenaltySpec};
    use std::collections::BTreeMap;

    let mut r = rng(seed);
    let depth = r.random_range(1..=3);
    let mut widths: Vec<usize> = (0..=depth).map(|_| r.random_range(1..=8)).collect();
    widths[depth] = r.random_range(2..=8);
    let spec = ModelSpec::mlp(&widths, r.random_range(0..depth)).unwrap();
    let params = random_params(&spec, &mut r, 1.0);
    let data = dataset(r.random_range(1..=6), widths[0], widths[depth], &mut r);
    let batch = data.as_batch().unwrap();

    let data_err = gradcheck(&params, 1e-5, |p| loss_and_grad(&spec, p, &batch, None).unwrap());

    let penalties = (0..depth)
        .map(|_| {
            let coef = r.random_range(0.01..2.0);
            if r.random_bool(0.5) {
                LayerPenalty::Personalized { coef }
            } else {
                LayerPenalty::Generic { coef }
            }
        })
        .collect();
    let pspec = PenaltySpec::new(penalties).unwrap();
    let target = random_params(&spec, &mut r, 1.0);
    let global: BTreeMap<usize, Vec<f64>> = random_params(&spec, &mut r, 1.0)
        .layers
        .into_iter()
        .enumerate()
        .map(|(i, v)| (i + 1, v))
        .collect();
    let state = ClientState {
        client_id: 0,
        shard: ClientShard {
            client_id: 0,
            train: data.clone(),
            test: data,
            label_set: vec![],
            train_indices: vec![],
            test_indices: vec![],
        },
        params: params.clone(),
        personalized_target: Some(target),
        global_layers: global,
    };
    let penalty_err = gradcheck(&params, 1e-5, |p| penalty_value_and_grad(p, &state, &pspec).unwrap());
    (data_err, penalty_err)
}
