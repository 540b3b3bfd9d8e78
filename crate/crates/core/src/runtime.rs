//! Round orchestration: penalized local training, upload, server fusion,
//! redistribution and evaluation.
//!
//! The four methods are configurations of one engine:
//!
//! | method  | fusion                         | penalty                          | next start  |
//! |---------|--------------------------------|----------------------------------|-------------|
//! | fedavg  | mean on every layer            | none                             | fused model |
//! | fedprox | mean on every layer            | `μ/2‖ν−ν_global‖²`               | fused model |
//! | fedamp  | similarity, whole model        | `λ/(2α_t)‖ν−ν_n^t‖²`             | own model   |
//! | pfedcfr | similarity `l≤r`, mean `l>r`   | per layer, matching the fusion   | own model on `l≤r`, shared layers on `l>r` |

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::fusion::{
    fuse_round, fuse_whole_model, make_plan, FusionPlan, RoundUploads, SimilarityParams, Strategy, WeightMatrix,
};
use crate::nn::{
    apply_sgd, argmax, cross_entropy, init_model, loss_and_grad, predict, Gradient, ModelParams, ModelSpec, PenaltyFn,
};
use crate::seed::{derive_seed, SeedStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    FedAvg,
    FedProx,
    FedAmp,
    PFedCfr,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::FedAvg, Method::FedProx, Method::FedAmp, Method::PFedCfr];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::FedAvg => "fedavg",
            Method::FedProx => "fedprox",
            Method::FedAmp => "fedamp",
            Method::PFedCfr => "pfedcfr",
        }
    }

    /// Personalized methods keep a per-client model between rounds.
    pub fn is_personalized(self) -> bool {
        matches!(self, Method::FedAmp | Method::PFedCfr)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            Error::InvalidMethod(format!(
                "unknown method `{s}` (expected fedavg, fedprox, fedamp or pfedcfr)"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodConfig {
    pub method: Method,
    pub similarity: SimilarityParams,
    /// Personalized-layer threshold for pfedcfr; `None` means the model's
    /// feature depth. Ignored by the other methods.
    pub threshold: Option<usize>,
    /// Local epochs per round.
    pub local_steps: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub rounds: usize,
    pub seed: u64,
    /// Also overwrite the personalized layers with the fused targets after
    /// each round instead of only pulling toward them.
    pub overwrite_personalized: bool,
}

impl MethodConfig {
    /// Defaults: α_t=1e4, σ=1e6, λ=1, μ=0.001, η=0.005, 10 local epochs,
    /// batch 32, 100 rounds.
    pub fn new(method: Method) -> Self {
        Self {
            method,
            similarity: SimilarityParams::default(),
            threshold: None,
            local_steps: 10,
            batch_size: 32,
            eta: 0.005,
            rounds: 100,
            seed: 0,
            overwrite_personalized: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.local_steps == 0 {
            return Err(Error::InvalidMethod("local_steps must be >= 1".into()));
        }
        if self.rounds == 0 {
            return Err(Error::InvalidMethod("rounds must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidMethod("batch_size must be >= 1".into()));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidMethod(format!("eta must be >= 0, got {}", self.eta)));
        }
        let p = &self.similarity;
        match self.method {
            Method::FedAvg => {}
            Method::FedProx => non_negative("mu", p.mu)?,
            Method::FedAmp => {
                p.validate_fusion()?;
                non_negative("lambda", p.lambda)?;
            }
            Method::PFedCfr => {
                p.validate_fusion()?;
                non_negative("lambda", p.lambda)?;
                non_negative("mu", p.mu)?;
            }
        }
        Ok(())
    }

    /// The server plan this method fuses with. fedamp's plan is over the
    /// single concatenated block.
    pub fn plan(&self, model: &ModelSpec) -> Result<FusionPlan> {
        match self.method {
            Method::FedAvg | Method::FedProx => FusionPlan::new(model.depth(), 0),
            Method::FedAmp => FusionPlan::new(1, 1),
            Method::PFedCfr => make_plan(model, self.threshold),
        }
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidMethod(format!("{name} must be >= 0, got {v}")))
    }
}

/// Proximal term applied to one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerPenalty {
    /// `coef·‖ν_l − ν^t_{n,l}‖²` toward the client's fused target.
    Personalized { coef: f64 },
    /// `coef·‖ν_l − ν^t_{global,l}‖²` toward the shared layer.
    Generic { coef: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltySpec {
    layers: Vec<LayerPenalty>,
}

impl PenaltySpec {
    pub fn new(layers: Vec<LayerPenalty>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            let (LayerPenalty::Personalized { coef } | LayerPenalty::Generic { coef }) = *l;
            if !(coef >= 0.0 && coef.is_finite()) {
                return Err(Error::InvalidMethod(format!(
                    "penalty coefficient {coef} at layer {} must be >= 0",
                    i + 1
                )));
            }
        }
        Ok(Self { layers })
    }

    /// λ/(2α_t) on personalized layers, μ/2 on generic ones.
    pub fn from_plan(plan: &FusionPlan, p: &SimilarityParams) -> Self {
        let layers = plan
            .tags()
            .iter()
            .map(|tag| match tag {
                Strategy::Personalized => LayerPenalty::Personalized {
                    coef: p.lambda / (2.0 * p.alpha_t),
                },
                Strategy::Generic => LayerPenalty::Generic { coef: p.mu / 2.0 },
            })
            .collect();
        Self { layers }
    }

    /// The penalty `method` trains with on `model`, or `None` for fedavg.
    pub fn for_method(method: Method, model: &ModelSpec, plan: &FusionPlan, p: &SimilarityParams) -> Option<Self> {
        match method {
            Method::FedAvg => None,
            // The whole-model term equals the sum of per-layer terms.
            Method::FedAmp => Some(Self::from_plan(&FusionPlan::new(model.depth(), model.depth()).ok()?, p)),
            Method::FedProx | Method::PFedCfr => Some(Self::from_plan(plan, p)),
        }
    }

    pub fn layers(&self) -> &[LayerPenalty] {
        &self.layers
    }
}

/// A simulated participant.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub shard: ClientShard,
    pub params: ModelParams,
    /// Output of personalized fusion for this client (all layers; only the
    /// personalized ones are read).
    pub personalized_target: Option<ModelParams>,
    /// Shared generic layers, keyed by 1-based layer.
    pub global_layers: BTreeMap<usize, Vec<f64>>,
}

/// Value and gradient of the proximal terms for the client's current targets.
pub fn penalty_value_and_grad(
    params: &ModelParams,
    state: &ClientState,
    spec: &PenaltySpec,
) -> Result<(f64, Gradient)> {
    if spec.layers.len() != params.depth() {
        return Err(Error::InvalidMethod(format!(
            "penalty covers {} layers, params have {}",
            spec.layers.len(),
            params.depth()
        )));
    }
    let mut value = 0.0;
    let mut grad = ModelParams::zeros_like(params);
    for (i, (penalty, values)) in spec.layers.iter().zip(&params.layers).enumerate() {
        let layer = i + 1;
        let (coef, target) = match *penalty {
            LayerPenalty::Personalized { coef } => (
                coef,
                state
                    .personalized_target
                    .as_ref()
                    .and_then(|t| t.layers.get(i))
                    .ok_or(Error::MissingTarget { layer })?,
            ),
            LayerPenalty::Generic { coef } => (
                coef,
                state.global_layers.get(&layer).ok_or(Error::MissingTarget { layer })?,
            ),
        };
        if target.len() != values.len() {
            return Err(Error::ShapeMismatch {
                layer,
                expected: values.len(),
                found: target.len(),
            });
        }
        let mut dist = 0.0;
        for ((g, &v), &t) in grad.layers[i].iter_mut().zip(values).zip(target) {
            let d = v - t;
            dist += d * d;
            *g = 2.0 * coef * d;
        }
        value += coef * dist;
    }
    Ok((value, grad))
}

fn train_epochs(
    model: &ModelSpec,
    state: &ClientState,
    penalty: Option<&PenaltySpec>,
    cfg: &MethodConfig,
    round: usize,
    with_data_loss: bool,
) -> Result<ModelParams> {
    let train = &state.shard.train;
    let mut params = state.params.clone();
    // Shuffles depend only on (seed, round): equal-sized shards see the same
    // order, which keeps the run equivariant under client relabeling.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SeedStream::Shuffle, round as u64));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let penalty_fn = penalty.map(|spec| move |p: &ModelParams| penalty_value_and_grad(p, state, spec));
    let hook: Option<&PenaltyFn<'_>> = penalty_fn.as_ref().map(|f| f as &PenaltyFn<'_>);
    let mut step = 0;
    for _ in 0..cfg.local_steps {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (loss, grad) = if with_data_loss {
                let batch = train.batch(chunk)?;
                loss_and_grad(model, &params, &batch, hook)
            } else {
                match hook {
                    Some(f) => f(&params),
                    None => Ok((0.0, ModelParams::zeros_like(&params))),
                }
            }
            .map_err(|e| match e {
                Error::NonFiniteLoss { value } => Error::TrainingDiverged {
                    client: state.client_id,
                    round,
                    step,
                    value,
                },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    client: state.client_id,
                    round,
                    step,
                    value: loss,
                });
            }
            apply_sgd(&mut params, &grad, cfg.eta);
            step += 1;
        }
    }
    Ok(params)
}

/// `local_steps` epochs of mini-batch SGD on data loss plus penalty.
pub fn local_train(
    model: &ModelSpec,
    state: &ClientState,
    penalty: Option<&PenaltySpec>,
    cfg: &MethodConfig,
    round: usize,
) -> Result<ModelParams> {
    if state.shard.train.is_empty() {
        return Err(Error::InvalidPartition(format!(
            "client {} has no training data",
            state.client_id
        )));
    }
    train_epochs(model, state, penalty, cfg, round, true)
}

/// Mean cross-entropy and argmax accuracy (ties to the lowest class).
pub fn evaluate(model: &ModelSpec, params: &ModelParams, test: &Dataset) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::InvalidDataset("evaluation set is empty".into()));
    }
    const CHUNK: usize = 1024;
    let mut loss = 0.0;
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..test.len()).collect();
    for chunk in indices.chunks(CHUNK) {
        let sub = test.select(chunk);
        let logits = predict(model, params, sub.inputs())?;
        for (b, &y) in sub.labels().iter().enumerate() {
            let z = logits.row(b);
            loss += cross_entropy(z, y);
            if argmax(z) == y {
                correct += 1;
            }
        }
    }
    let n = test.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientMetrics {
    pub client_id: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub clients: Vec<ClientMetrics>,
    pub mean_accuracy: f64,
    /// Population standard deviation across clients.
    pub std_accuracy: f64,
    pub mean_test_loss: f64,
    pub mean_train_loss: f64,
    pub wall_ms: f64,
}

impl RoundMetrics {
    fn from_clients(round: usize, clients: Vec<ClientMetrics>, wall_ms: f64) -> Self {
        let acc: Vec<f64> = clients.iter().map(|c| c.test_accuracy).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&acc);
        let n = clients.len() as f64;
        Self {
            round,
            mean_test_loss: clients.iter().map(|c| c.test_loss).sum::<f64>() / n,
            mean_train_loss: clients.iter().map(|c| c.train_loss).sum::<f64>() / n,
            clients,
            mean_accuracy,
            std_accuracy,
            wall_ms,
        }
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Everything produced by one round.
#[derive(Debug, Clone)]
pub struct RoundReport {
    pub metrics: RoundMetrics,
    pub weights: WeightMatrix,
    /// The models clients uploaded this round.
    pub uploads: Vec<ModelParams>,
}

/// A running simulation: model, method, server plan and client states.
#[derive(Debug, Clone)]
pub struct Federation {
    model: ModelSpec,
    cfg: MethodConfig,
    plan: FusionPlan,
    penalty: Option<PenaltySpec>,
    clients: Vec<ClientState>,
    round: usize,
}

impl Federation {
    /// Every client starts from the same initial model, which also serves as
    /// the first round's penalty target.
    pub fn new(model: ModelSpec, cfg: MethodConfig, shards: Vec<ClientShard>) -> Result<Self> {
        let init = init_model(&model, derive_seed(cfg.seed, SeedStream::Init, 0));
        let global_layers: BTreeMap<usize, Vec<f64>> = init
            .layers
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, v)| (i + 1, v))
            .collect();
        let clients = shards
            .into_iter()
            .map(|shard| ClientState {
                client_id: shard.client_id,
                shard,
                params: init.clone(),
                personalized_target: cfg.method.is_personalized().then(|| init.clone()),
                global_layers: global_layers.clone(),
            })
            .collect();
        Self::with_clients(model, cfg, clients)
    }

    pub fn with_clients(model: ModelSpec, cfg: MethodConfig, clients: Vec<ClientState>) -> Result<Self> {
        cfg.validate()?;
        if clients.len() < 2 {
            return Err(Error::TooFewClients {
                needed: 2,
                got: clients.len(),
            });
        }
        for c in &clients {
            model.check_params(&c.params)?;
            if c.shard.train.is_empty() || c.shard.test.is_empty() {
                return Err(Error::InvalidPartition(format!(
                    "client {} needs non-empty train and test sets (train {}, test {})",
                    c.client_id,
                    c.shard.train.len(),
                    c.shard.test.len()
                )));
            }
            if c.shard.train.dim() != model.input_dim() {
                return Err(Error::ShapeMismatch {
                    layer: 1,
                    expected: model.input_dim(),
                    found: c.shard.train.dim(),
                });
            }
        }
        let plan = cfg.plan(&model)?;
        let penalty = PenaltySpec::for_method(cfg.method, &model, &plan, &cfg.similarity);
        Ok(Self {
            model,
            cfg,
            plan,
            penalty,
            clients,
            round: 0,
        })
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn config(&self) -> &MethodConfig {
        &self.cfg
    }

    pub fn plan(&self) -> &FusionPlan {
        &self.plan
    }

    pub fn penalty(&self) -> Option<&PenaltySpec> {
        self.penalty.as_ref()
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    /// Rounds completed so far.
    pub fn round(&self) -> usize {
        self.round
    }

    /// Train every client on its current targets, fuse the uploads, install
    /// the results and evaluate.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let t = self.round + 1;
        let start = Instant::now();
        let model = &self.model;
        let cfg = &self.cfg;
        let penalty = self.penalty.as_ref();

        let trained: Vec<ModelParams> = self
            .clients
            .par_iter()
            .map(|c| local_train(model, c, penalty, cfg, t))
            .collect::<Result<_>>()?;

        let uploads = RoundUploads::new(trained)?;
        let fused = match cfg.method {
            Method::FedAmp => fuse_whole_model(&uploads, &cfg.similarity)?,
            _ => fuse_round(&uploads, &self.plan, &cfg.similarity)?,
        };
        let uploads = uploads.into_inner();

        for ((client, own), target) in self.clients.iter_mut().zip(&uploads).zip(&fused.per_client) {
            match cfg.method {
                Method::FedAvg | Method::FedProx => {
                    client.params = target.clone();
                    client.personalized_target = None;
                }
                Method::FedAmp => {
                    client.params = if cfg.overwrite_personalized {
                        target.clone()
                    } else {
                        own.clone()
                    };
                    client.personalized_target = Some(target.clone());
                }
                Method::PFedCfr => {
                    let mut next = own.clone();
                    for l in 1..=self.plan.depth() {
                        let shared = self.plan.strategy(l) == Strategy::Generic;
                        if shared || cfg.overwrite_personalized {
                            next.layers[l - 1].clone_from(&target.layers[l - 1]);
                        }
                    }
                    client.params = next;
                    client.personalized_target = Some(target.clone());
                }
            }
            client.global_layers = fused.global_layers.clone();
        }

        let clients = self
            .clients
            .par_iter()
            .map(|c| {
                let (train_loss, _) = evaluate(model, &c.params, &c.shard.train)?;
                let (test_loss, test_accuracy) = evaluate(model, &c.params, &c.shard.test)?;
                Ok(ClientMetrics {
                    client_id: c.client_id,
                    train_loss,
                    test_loss,
                    test_accuracy,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        self.round = t;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(RoundReport {
            metrics: RoundMetrics::from_clients(t, clients, wall_ms),
            weights: fused.weights,
            uploads,
        })
    }

    /// Runs the remaining configured rounds, handing each report to `on_round`.
    pub fn run<F>(&mut self, mut on_round: F) -> Result<Vec<RoundMetrics>>
    where
        F: FnMut(&RoundReport) -> Result<()>,
    {
        let mut out = Vec::with_capacity(self.cfg.rounds);
        while self.round < self.cfg.rounds {
            let report = self.run_round()?;
            on_round(&report)?;
            out.push(report.metrics);
        }
        Ok(out)
    }
}

/// Full simulation of `cfg.rounds` rounds.
pub fn run_experiment(model: ModelSpec, shards: Vec<ClientShard>, cfg: MethodConfig) -> Result<Vec<RoundMetrics>> {
    Federation::new(model, cfg, shards)?.run(|_| Ok(()))
}

/// Mean and std of the per-round mean accuracy over the last `window` rounds.
pub fn final_accuracy(metrics: &[RoundMetrics], window: usize) -> (f64, f64) {
    let start = metrics.len().saturating_sub(window);
    let per_round: Vec<f64> = metrics[start..].iter().map(|m| m.mean_accuracy).collect();
    mean_std(&per_round)
}
