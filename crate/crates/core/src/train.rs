//! Full-batch training for both model variants, with best-on-validation model
//! selection.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::decoder::score_pairs;
use crate::encoder::{encode, Encoded, GraphIndex, Noise};
use crate::error::{Error, Result};
use crate::eval::rank_metrics;
use crate::flows::apply_flows;
use crate::graph::{EdgeSplit, Graph};
use crate::model::{Bound, Mode, ModelConfig, ModelParams};
use crate::objectives::{independence_on_tape, kl_on_tape, recon_of_embedding, LossReport};
use crate::optim::{AdamConfig, OptimState};
use crate::tensor::Tensor;

/// Offset separating the model's random stream from the edge-split stream
/// when both derive from one seed.
pub const MODEL_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub channels: usize,
    pub channel_dim: usize,
    pub layers: usize,
    pub iterations: usize,
    pub flow_steps: usize,
    pub factor_decoder: bool,
    pub lambda: f64,
    pub lr: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Validation metrics are computed every this many epochs (and at the
    /// last epoch).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Dga,
            channels: 4,
            channel_dim: 16,
            layers: 1,
            iterations: 3,
            flow_steps: 1,
            factor_decoder: true,
            lambda: 0.01,
            lr: 0.01,
            dropout: 0.0,
            epochs: 3000,
            seed: 0,
            eval_every: 10,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], with a one-line description.
pub const TRAIN_KEYS: &[(&str, &str)] = &[
    ("mode", "DGA or DVGA"),
    ("channels", "number of channels K"),
    ("channel_dim", "width of each channel"),
    ("layers", "stacked disentangle layers"),
    ("iterations", "assignment iterations per layer"),
    (
        "flow_steps",
        "coupling steps per channel (DVGA only; 0 disables flows)",
    ),
    (
        "factor_decoder",
        "use the factor-similarity map in the decoder",
    ),
    ("lambda", "weight of the independence loss"),
    ("lr", "Adam learning rate"),
    ("dropout", "input dropout rate of every layer"),
    ("epochs", "training epochs"),
    ("seed", "seed for splitting, initialization and sampling"),
    ("eval_every", "epochs between validation evaluations"),
];

/// Hyperparameter ranges explored when tuning; values outside them are legal
/// but reported by [`TrainConfig::search_space_notes`].
pub mod search_space {
    pub const CHANNELS: (usize, usize) = (2, 10);
    pub const ITERATIONS: (usize, usize) = (1, 10);
    pub const LAYERS: (usize, usize) = (1, 6);
    pub const LAMBDA: (f64, f64) = (1e-5, 1.0);
    pub const FLOW_STEPS: (usize, usize) = (1, 5);
    pub const LR: (f64, f64) = (1e-3, 1.0);
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse::<T>()
        .map_err(|e| format!("{key}: cannot parse '{value}': {e}"))
}

impl TrainConfig {
    /// Sets one key from its text form. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "mode" => self.mode = value.trim().parse().map_err(|e: Error| e.to_string())?,
            "channels" => self.channels = parse(key, value)?,
            "channel_dim" => self.channel_dim = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "flow_steps" => self.flow_steps = parse(key, value)?,
            "factor_decoder" => self.factor_decoder = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "mode" => self.mode.to_string(),
            "channels" => self.channels.to_string(),
            "channel_dim" => self.channel_dim.to_string(),
            "layers" => self.layers.to_string(),
            "iterations" => self.iterations.to_string(),
            "flow_steps" => self.flow_steps.to_string(),
            "factor_decoder" => self.factor_decoder.to_string(),
            "lambda" => self.lambda.to_string(),
            "lr" => self.lr.to_string(),
            "dropout" => self.dropout.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "eval_every" => self.eval_every.to_string(),
            _ => return None,
        })
    }

    /// All violated constraints, or empty.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.channels == 0 {
            out.push("channels must be at least 1".into());
        }
        if self.channel_dim == 0 {
            out.push("channel_dim must be at least 1".into());
        }
        if self.layers == 0 {
            out.push("layers must be at least 1".into());
        }
        if self.iterations == 0 {
            out.push("iterations must be at least 1".into());
        }
        if self.mode == Mode::Dvga && self.flow_steps > 0 && self.channel_dim < 2 {
            out.push("flows need channel_dim >= 2".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            out.push(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            out.push(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            out.push(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.eval_every == 0 {
            out.push("eval_every must be at least 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    /// Settings outside the usual tuning ranges (informational).
    pub fn search_space_notes(&self) -> Vec<String> {
        use search_space::*;
        let mut notes = Vec::new();
        let mut check = |name: &str, v: f64, (lo, hi): (f64, f64)| {
            if v < lo || v > hi {
                notes.push(format!("{name}={v} outside tuning range [{lo}, {hi}]"));
            }
        };
        let u = |(a, b): (usize, usize)| (a as f64, b as f64);
        check("channels", self.channels as f64, u(CHANNELS));
        check("iterations", self.iterations as f64, u(ITERATIONS));
        check("layers", self.layers as f64, u(LAYERS));
        if self.lambda > 0.0 {
            check("lambda", self.lambda, LAMBDA);
        }
        if self.mode == Mode::Dvga && self.flow_steps > 0 {
            check("flow_steps", self.flow_steps as f64, u(FLOW_STEPS));
        }
        check("lr", self.lr, LR);
        notes
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            mode: self.mode,
            input_dim,
            channels: self.channels,
            channel_dim: self.channel_dim,
            layers: self.layers,
            iterations: self.iterations,
            flow_steps: if self.mode == Mode::Dvga {
                self.flow_steps
            } else {
                0
            },
            factor_decoder: self.factor_decoder,
        }
    }
}

/// Configuration-level ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    /// No independence regularizer (`λ = 0`).
    WithoutIndep,
    /// No flows (`M = 0`).
    WithoutFlow,
    /// A single channel (`K = 1`); channel width is kept.
    WithoutDisen,
}

impl Ablation {
    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut out = cfg.clone();
        match self {
            Ablation::WithoutIndep => out.lambda = 0.0,
            Ablation::WithoutFlow => out.flow_steps = 0,
            Ablation::WithoutDisen => out.channels = 1,
        }
        out
    }
}

/// Tensors shared by every epoch of one run.
pub struct TrainData {
    pub x: Arc<Tensor>,
    pub graph: GraphIndex,
    pub target: Arc<Tensor>,
    pub edges: usize,
}

impl TrainData {
    /// Features, edge index and reconstruction target of `g`.
    pub fn new(g: &Graph) -> Self {
        Self {
            x: Arc::new(g.features.clone()),
            graph: GraphIndex::new(g),
            target: Arc::new(g.adjacency()),
            edges: g.num_edges(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.n
    }
}

/// Variables of one recorded forward pass.
pub struct Forward {
    pub total: Var,
    pub recon: Var,
    pub kl: Option<Var>,
    pub indep: Var,
    pub encoded: Encoded,
    /// Embedding after flows (the decoder input).
    pub z: Var,
}

impl Forward {
    pub fn report(&self, tape: &Tape, lambda: f64) -> LossReport {
        LossReport {
            recon: tape.value(self.recon).item(),
            kl: self.kl.map_or(0.0, |k| tape.value(k).item()),
            indep: tape.value(self.indep).item(),
            total: tape.value(self.total).item(),
            lambda,
        }
    }
}

/// Records the full objective on `tape`. `noise` of `None` evaluates the
/// test-time model (mean embedding, no dropout).
pub fn forward(
    tape: &mut Tape,
    bound: &Bound<'_>,
    data: &TrainData,
    lambda: f64,
    noise: Option<Noise<'_>>,
) -> Result<Forward> {
    let cfg = bound.config().clone();
    let x = tape.constant_shared(data.x.clone());
    let encoded = encode(tape, bound, x, &data.graph, noise)?;
    let (z, logdet) = apply_flows(tape, bound, encoded.z)?;
    let recon = recon_of_embedding(
        tape,
        z,
        cfg.channels,
        cfg.factor_decoder,
        data.target.clone(),
        data.edges,
    )?;
    let n = data.num_nodes() as f64;
    let kl = match (encoded.mu, encoded.logvar) {
        (Some(mu), Some(lv)) => {
            let raw = match logdet {
                None => kl_on_tape(tape, mu, lv, None)?,
                Some(ld) => {
                    let eps = match &encoded.eps {
                        Some(e) => e.clone(),
                        None => Tensor::zeros(tape.shape(mu).0, tape.shape(mu).1),
                    };
                    kl_on_tape(tape, mu, lv, Some((&eps, z, ld)))?
                }
            };
            Some(tape.affine(raw, 1.0 / (n * n), 0.0)?)
        }
        _ => None,
    };
    let indep = independence_on_tape(tape, bound, encoded.first_projection)?;
    let weighted = tape.affine(indep, lambda, 0.0)?;
    let mut total = tape.add(recon, weighted)?;
    if let Some(k) = kl {
        total = tape.add(total, k)?;
    }
    Ok(Forward {
        total,
        recon,
        kl,
        indep,
        encoded,
        z,
    })
}

/// Test-time embedding (flows applied to the mean in variational mode).
pub fn embed(params: &ModelParams, x: &Tensor, graph: &GraphIndex) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let enc = encode(&mut tape, &bound, xv, graph, None)?;
    let (z, _) = apply_flows(&mut tape, &bound, enc.z)?;
    Ok(tape.value(z).clone())
}

/// Embedding of the nodes of `g` using its own edges and features.
pub fn embed_graph(params: &ModelParams, g: &Graph) -> Result<Tensor> {
    embed(params, &g.features, &GraphIndex::new(g))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub val_auc: f64,
    pub val_ap: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    /// One entry per epoch, in order.
    pub losses: Vec<LossReport>,
    pub evals: Vec<EvalRecord>,
    /// Epoch (1-based) of the returned parameters; `None` means the final
    /// parameters were kept because no validation pairs exist.
    pub best_epoch: Option<usize>,
    pub best_val_auc: Option<f64>,
}

pub struct TrainOutcome {
    /// Parameters with the highest validation AUC.
    pub params: ModelParams,
    /// Parameters after the last epoch.
    pub last: ModelParams,
    pub history: RunHistory,
}

fn check_report(r: &LossReport, epoch: usize) -> Result<()> {
    for (name, v) in [("recon", r.recon), ("kl", r.kl), ("indep", r.indep)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss at epoch {epoch}")));
        }
    }
    Ok(())
}

/// One optimizer step. Returns the loss components before the update.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut OptimState,
    data: &TrainData,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let noise = Noise {
        rng,
        dropout: cfg.dropout,
    };
    let fwd = forward(&mut tape, &bound, data, cfg.lambda, Some(noise))?;
    let report = fwd.report(&tape, cfg.lambda);
    let mut grads = tape.backward(fwd.total)?;
    let g: Vec<Tensor> = bound
        .vars
        .iter()
        .map(|&v| grads.take(v).expect("every parameter receives a gradient"))
        .collect();
    drop(bound);
    opt.step(&mut params.tensors, &g)?;
    Ok(report)
}

/// Validation AUC and AP of `params` on `split`.
pub fn validate(params: &ModelParams, data: &TrainData, split: &EdgeSplit) -> Result<(f64, f64)> {
    let z = embed(params, &data.x, &data.graph)?;
    let c = &params.config;
    let pos = score_pairs(&z, c.channels, c.factor_decoder, &split.val_pos)?;
    let neg = score_pairs(&z, c.channels, c.factor_decoder, &split.val_neg)?;
    rank_metrics(&pos, &neg)
}

/// Trains on `split.train` for `cfg.epochs` epochs.
pub fn train(split: &EdgeSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(split, cfg, |_, _| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    split: &EdgeSplit,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &LossReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = TrainData::new(&split.train);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ MODEL_STREAM);
    let mut params = ModelParams::init(cfg.model_config(data.x.cols()), &mut rng)?;
    let mut opt = OptimState::new(AdamConfig::with_lr(cfg.lr), &params.tensors);
    let mut history = RunHistory::default();
    let can_validate = !split.val_pos.is_empty() && !split.val_neg.is_empty();
    let mut best: Option<ModelParams> = None;

    for epoch in 1..=cfg.epochs {
        let report = train_step(&mut params, &mut opt, &data, cfg, &mut rng)?;
        check_report(&report, epoch)?;
        on_epoch(epoch, &report);
        history.losses.push(report);
        if can_validate && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
            let (val_auc, val_ap) = validate(&params, &data, split)?;
            history.evals.push(EvalRecord {
                epoch,
                val_auc,
                val_ap,
            });
            if history.best_val_auc.is_none_or(|b| val_auc > b) {
                history.best_val_auc = Some(val_auc);
                history.best_epoch = Some(epoch);
                best = Some(params.clone());
            }
        }
    }
    Ok(TrainOutcome {
        params: best.unwrap_or_else(|| params.clone()),
        last: params,
        history,
    })
}

/// Variational training; `cfg.mode` must be `DVGA`.
pub fn train_dvga(split: &EdgeSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.mode != Mode::Dvga {
        return Err(Error::Config("train_dvga needs mode = DVGA".into()));
    }
    train(split, cfg)
}

/// Deterministic training; `cfg.mode` must be `DGA`.
pub fn train_dga(split: &EdgeSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.mode != Mode::Dga {
        return Err(Error::Config("train_dga needs mode = DGA".into()));
    }
    train(split, cfg)
}
