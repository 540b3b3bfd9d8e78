//! Server-side layer fusion.
//!
//! Every layer is fused on its own. Layers `1..=r` use the personalized rule:
//! client `n` receives `Σ_m ω_{n,m} ν_m` where the off-diagonal weights come
//! from a negative-exponential map of pairwise squared distances and the
//! self-weight takes up the rest of the row. Layers `r+1..=L` use the generic
//! rule: one coordinate-wise mean shared by every client.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{layer_distance_sq, ModelParams, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Personalized,
    Generic,
}

/// Strategy per layer, split at threshold `r`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionPlan {
    threshold: usize,
    tags: Vec<Strategy>,
}

impl FusionPlan {
    pub fn new(depth: usize, threshold: usize) -> Result<Self> {
        if threshold > depth {
            return Err(Error::ThresholdOutOfRange { r: threshold, depth });
        }
        let tags = (1..=depth)
            .map(|l| {
                if l <= threshold {
                    Strategy::Personalized
                } else {
                    Strategy::Generic
                }
            })
            .collect();
        Ok(Self { threshold, tags })
    }

    pub fn depth(&self) -> usize {
        self.tags.len()
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }

    pub fn tags(&self) -> &[Strategy] {
        &self.tags
    }

    /// Strategy of 1-based layer `l`.
    pub fn strategy(&self, l: usize) -> Strategy {
        self.tags[l - 1]
    }
}

/// Builds a plan for `spec`. Without an explicit `r`, the feature layers are
/// personalized and the decision layers generic.
pub fn make_plan(spec: &ModelSpec, r: Option<usize>) -> Result<FusionPlan> {
    FusionPlan::new(spec.depth(), r.unwrap_or_else(|| spec.feature_depth()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityParams {
    /// Convergence coefficient scaling the cross-client weights.
    pub alpha_t: f64,
    /// Bandwidth of `A(x) = 1 − e^{−x/σ}`.
    pub sigma: f64,
    /// Personalized penalty coefficient.
    pub lambda: f64,
    /// Generic penalty coefficient.
    pub mu: f64,
}

impl Default for SimilarityParams {
    fn default() -> Self {
        Self {
            alpha_t: 1e4,
            sigma: 1e6,
            lambda: 1.0,
            mu: 0.001,
        }
    }
}

impl SimilarityParams {
    /// All four coefficients strictly positive.
    pub fn validate(&self) -> Result<()> {
        self.validate_fusion()?;
        for (name, v) in [("lambda", self.lambda), ("mu", self.mu)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidSimilarity(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Only the coefficients personalized fusion reads.
    pub fn validate_fusion(&self) -> Result<()> {
        for (name, v) in [("alpha_t", self.alpha_t), ("sigma", self.sigma)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidSimilarity(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `ζ = α_t · A′(dist_sq) = α_t/σ · e^{−dist_sq/σ}`.
pub fn similarity_weight(dist_sq: f64, p: &SimilarityParams) -> f64 {
    p.alpha_t / p.sigma * (-dist_sq / p.sigma).exp()
}

/// Per-layer `N×N` fusion weights; entry `(n, m)` is the weight client `n`
/// puts on client `m`'s layer.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    clients: usize,
    layers: Vec<Vec<f64>>,
}

impl WeightMatrix {
    pub fn clients(&self) -> usize {
        self.clients
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Weight at 1-based layer `l`, row `n`, column `m` (0-based clients).
    pub fn get(&self, l: usize, n: usize, m: usize) -> f64 {
        self.layers[l - 1][n * self.clients + m]
    }

    pub fn row(&self, l: usize, n: usize) -> &[f64] {
        &self.layers[l - 1][n * self.clients..(n + 1) * self.clients]
    }

    /// CSV rows `round,layer,n,m,weight` (no header).
    pub fn write_csv_rows(&self, round: usize, out: &mut String) {
        for (l, w) in self.layers.iter().enumerate() {
            for n in 0..self.clients {
                for m in 0..self.clients {
                    let _ = writeln!(out, "{round},{},{n},{m},{}", l + 1, w[n * self.clients + m]);
                }
            }
        }
    }
}

pub const WEIGHTS_CSV_HEADER: &str = "round,layer,n,m,weight";

/// One round of client models as received by the server.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundUploads {
    clients: Vec<ModelParams>,
}

impl RoundUploads {
    pub fn new(clients: Vec<ModelParams>) -> Result<Self> {
        if clients.len() < 2 {
            return Err(Error::TooFewClients {
                needed: 2,
                got: clients.len(),
            });
        }
        let first = &clients[0];
        for c in &clients[1..] {
            if c.depth() != first.depth() {
                return Err(Error::InvalidSpec(format!(
                    "upload depth {} differs from {}",
                    c.depth(),
                    first.depth()
                )));
            }
            for (l, (a, b)) in c.layers.iter().zip(&first.layers).enumerate() {
                if a.len() != b.len() {
                    return Err(Error::ShapeMismatch {
                        layer: l + 1,
                        expected: b.len(),
                        found: a.len(),
                    });
                }
            }
        }
        Ok(Self { clients })
    }

    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn clients(&self) -> &[ModelParams] {
        &self.clients
    }

    /// Column view of 1-based layer `l` across clients.
    pub fn layer(&self, l: usize) -> Vec<&[f64]> {
        self.clients.iter().map(|c| c.layers[l - 1].as_slice()).collect()
    }

    pub fn into_inner(self) -> Vec<ModelParams> {
        self.clients
    }
}

fn check_lengths(snapshots: &[&[f64]]) -> Result<usize> {
    let len = snapshots.first().map_or(0, |s| s.len());
    for s in snapshots {
        if s.len() != len {
            return Err(Error::LengthMismatch {
                left: len,
                right: s.len(),
            });
        }
    }
    Ok(len)
}

/// Similarity-weighted fusion of one layer.
///
/// Returns the fused vector for every client and the row-major `N×N` weight
/// matrix. Fails with [`Error::NonContractiveWeights`] if any self-weight
/// would be `≤ 0`.
pub fn personalized_fuse_layer(snapshots: &[&[f64]], p: &SimilarityParams) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let n = snapshots.len();
    if n < 2 {
        return Err(Error::TooFewClients { needed: 2, got: n });
    }
    check_lengths(snapshots)?;

    // Each pair is measured once so ω_{n,m} and ω_{m,n} are bit-identical.
    let mut weights = vec![0.0; n * n];
    for a in 0..n {
        for b in a + 1..n {
            let zeta = similarity_weight(layer_distance_sq(snapshots[a], snapshots[b])?, p);
            weights[a * n + b] = zeta;
            weights[b * n + a] = zeta;
        }
    }
    for a in 0..n {
        let off: f64 = (0..n).filter(|&m| m != a).map(|m| weights[a * n + m]).sum();
        let self_weight = 1.0 - off;
        if self_weight <= 0.0 {
            return Err(Error::NonContractiveWeights {
                client: a,
                off_diagonal_sum: off,
                self_weight,
            });
        }
        weights[a * n + a] = self_weight;
    }

    // ν_n + Σ_{m≠n} ω_{n,m}(ν_m − ν_n): the same combination as Σ_m ω_{n,m} ν_m,
    // but identical inputs map to themselves exactly.
    let fused = (0..n)
        .into_par_iter()
        .map(|a| {
            let own = snapshots[a];
            let mut out = own.to_vec();
            for (m, other) in snapshots.iter().enumerate() {
                if m == a {
                    continue;
                }
                let w = weights[a * n + m];
                for ((o, &x), &y) in out.iter_mut().zip(*other).zip(own) {
                    *o += w * (x - y);
                }
            }
            out
        })
        .collect();
    Ok((fused, weights))
}

/// Coordinate-wise mean of one layer across clients.
pub fn generic_fuse_layer(snapshots: &[&[f64]]) -> Result<Vec<f64>> {
    if snapshots.is_empty() {
        return Err(Error::TooFewClients { needed: 1, got: 0 });
    }
    let len = check_lengths(snapshots)?;
    let mut sum = vec![0.0; len];
    for s in snapshots {
        for (acc, v) in sum.iter_mut().zip(*s) {
            *acc += v;
        }
    }
    let inv = snapshots.len() as f64;
    Ok(sum.into_iter().map(|v| v / inv).collect())
}

/// Output of one server fusion step.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedRound {
    /// Recombined model for each client.
    pub per_client: Vec<ModelParams>,
    /// Shared vectors of the generic layers, keyed by 1-based layer.
    pub global_layers: BTreeMap<usize, Vec<f64>>,
    pub weights: WeightMatrix,
}

/// Fuses every layer according to `plan` and recombines per-client models.
pub fn fuse_round(uploads: &RoundUploads, plan: &FusionPlan, p: &SimilarityParams) -> Result<FusedRound> {
    let n = uploads.len();
    let depth = uploads.clients()[0].depth();
    if depth != plan.depth() {
        return Err(Error::InvalidSpec(format!(
            "plan depth {} but uploads have {depth} layers",
            plan.depth()
        )));
    }
    if plan.threshold() > 0 {
        p.validate_fusion()?;
    }

    let mut per_client: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(depth); n];
    let mut global_layers = BTreeMap::new();
    let mut layer_weights = Vec::with_capacity(depth);
    for l in 1..=depth {
        let column = uploads.layer(l);
        match plan.strategy(l) {
            Strategy::Personalized => {
                let (fused, w) = personalized_fuse_layer(&column, p).map_err(|e| e.at_layer(l))?;
                for (dst, v) in per_client.iter_mut().zip(fused) {
                    dst.push(v);
                }
                layer_weights.push(w);
            }
            Strategy::Generic => {
                let mean = generic_fuse_layer(&column).map_err(|e| e.at_layer(l))?;
                for dst in per_client.iter_mut() {
                    dst.push(mean.clone());
                }
                global_layers.insert(l, mean);
                layer_weights.push(vec![1.0 / n as f64; n * n]);
            }
        }
    }
    Ok(FusedRound {
        per_client: per_client.into_iter().map(|layers| ModelParams { layers }).collect(),
        global_layers,
        weights: WeightMatrix {
            clients: n,
            layers: layer_weights,
        },
    })
}

/// Whole-model fusion: every upload is flattened into a single block, fused
/// personalized, and split back into layers. The weight matrix has one layer.
pub fn fuse_whole_model(uploads: &RoundUploads, p: &SimilarityParams) -> Result<FusedRound> {
    let lens = uploads.clients()[0].layer_lens();
    let flat = RoundUploads::new(
        uploads
            .clients()
            .iter()
            .map(|c| ModelParams {
                layers: vec![c.concat()],
            })
            .collect(),
    )?;
    let fused = fuse_round(&flat, &FusionPlan::new(1, 1)?, p)?;
    let per_client = fused
        .per_client
        .iter()
        .map(|c| ModelParams::split(&c.layers[0], &lens))
        .collect::<Result<Vec<_>>>()?;
    Ok(FusedRound {
        per_client,
        global_layers: BTreeMap::new(),
        weights: fused.weights,
    })
}
