//! Model hyperparameters and the named parameter store shared by the encoder,
//! flows and discriminator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Deterministic auto-encoder.
    Dga,
    /// Variational auto-encoder with per-channel flows.
    Dvga,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Dga => "DGA",
            Mode::Dvga => "DVGA",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dga" => Ok(Mode::Dga),
            "dvga" => Ok(Mode::Dvga),
            _ => Err(Error::Config(format!(
                "unknown mode '{s}' (expected DGA or DVGA)"
            ))),
        }
    }
}

/// Architecture of one model instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    pub input_dim: usize,
    /// Number of channels `K`.
    pub channels: usize,
    /// Width `Δd` of every channel.
    pub channel_dim: usize,
    /// Stacked disentangle layers `L`.
    pub layers: usize,
    /// Assignment iterations `T` per layer.
    pub iterations: usize,
    /// Coupling steps `M` per channel (variational mode only).
    pub flow_steps: usize,
    /// When false the decoder drops the factor-similarity map and scores
    /// pairs by inner product alone.
    pub factor_decoder: bool,
}

impl ModelConfig {
    pub fn dim(&self) -> usize {
        self.channels * self.channel_dim
    }

    /// Coordinates passed through unchanged by each coupling step.
    pub fn flow_split(&self) -> usize {
        self.channel_dim / 2
    }

    /// Coupling steps actually applied (none in deterministic mode).
    pub fn active_flow_steps(&self) -> usize {
        match self.mode {
            Mode::Dga => 0,
            Mode::Dvga => self.flow_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.input_dim == 0 {
            problems.push("input dimension must be positive".to_string());
        }
        if self.channels == 0 {
            problems.push("channels must be at least 1".to_string());
        }
        if self.channel_dim == 0 {
            problems.push("channel_dim must be at least 1".to_string());
        }
        if self.layers == 0 {
            problems.push("layers must be at least 1".to_string());
        }
        if self.iterations == 0 {
            problems.push("iterations must be at least 1".to_string());
        }
        if self.active_flow_steps() > 0 && self.channel_dim < 2 {
            problems.push("flows need channel_dim >= 2".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Parameter indices of a two-layer perceptron.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerIdx {
    /// `f_in x d`; column block `k` is the channel-`k` projection.
    pub w: usize,
    pub b: usize,
    pub alpha_raw: usize,
    pub beta_raw: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadIdx {
    pub mu_w: usize,
    pub mu_b: usize,
    pub logvar_w: usize,
    pub logvar_b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CouplingIdx {
    pub s: MlpIdx,
    pub t: MlpIdx,
}

/// Where each logical parameter lives in [`ModelParams::tensors`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub layers: Vec<LayerIdx>,
    /// Per-channel variational heads, present in variational mode.
    pub heads: Vec<HeadIdx>,
    /// `flows[k][m]` is coupling step `m` of channel `k`.
    pub flows: Vec<Vec<CouplingIdx>>,
    pub disc: MlpIdx,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    pub layout: Layout,
}

enum Init {
    Glorot,
    Zeros,
}

struct Builder<'r> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl Builder<'_> {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        let t = match (init, self.rng.as_deref_mut()) {
            (Init::Glorot, Some(rng)) => glorot(rows, cols, rng),
            _ => Tensor::zeros(rows, cols),
        };
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn mlp(&mut self, prefix: &str, dims: (usize, usize, usize), last: Init) -> MlpIdx {
        let (i, h, o) = dims;
        MlpIdx {
            w1: self.add(format!("{prefix}.w1"), i, h, Init::Glorot),
            b1: self.add(format!("{prefix}.b1"), 1, h, Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), h, o, last),
            b2: self.add(format!("{prefix}.b2"), 1, o, Init::Zeros),
        }
    }
}

/// Uniform on `[-a, a]` with `a = sqrt(6 / (rows + cols))`.
pub fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let a = (6.0 / (rows + cols).max(1) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-a..=a))
}

impl ModelParams {
    /// Fresh parameters: Glorot weights, zero biases, `α = β = 0.5`, flows
    /// starting at the identity and a discriminator starting uniform.
    pub fn init(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::build(config, Some(rng))
    }

    fn build(config: ModelConfig, rng: Option<&mut ChaCha8Rng>) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng,
        };
        let d = config.dim();
        let w = config.channel_dim;
        let k = config.channels;

        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let fan_in = if l == 0 { config.input_dim } else { d };
            // Each channel block is drawn with its own fan-out.
            let wi = b.add(format!("layer{l}.w"), fan_in, d, Init::Zeros);
            if let Some(rng) = b.rng.as_deref_mut() {
                let blocks: Vec<Tensor> = (0..k).map(|_| glorot(fan_in, w, rng)).collect();
                let refs: Vec<&Tensor> = blocks.iter().collect();
                b.tensors[wi] = Tensor::concat_cols(&refs)?;
            }
            layers.push(LayerIdx {
                w: wi,
                b: b.add(format!("layer{l}.b"), 1, d, Init::Zeros),
                alpha_raw: b.add(format!("layer{l}.alpha_raw"), 1, 1, Init::Zeros),
                beta_raw: b.add(format!("layer{l}.beta_raw"), 1, 1, Init::Zeros),
            });
        }

        let mut heads = Vec::new();
        if config.mode == Mode::Dvga {
            for c in 0..k {
                heads.push(HeadIdx {
                    mu_w: b.add(format!("head{c}.mu.w"), w, w, Init::Glorot),
                    mu_b: b.add(format!("head{c}.mu.b"), 1, w, Init::Zeros),
                    logvar_w: b.add(format!("head{c}.logvar.w"), w, w, Init::Glorot),
                    logvar_b: b.add(format!("head{c}.logvar.b"), 1, w, Init::Zeros),
                });
            }
        }

        let steps = config.active_flow_steps();
        let split = config.flow_split();
        let mut flows = Vec::new();
        if steps > 0 {
            for c in 0..k {
                let mut per = Vec::with_capacity(steps);
                for m in 0..steps {
                    let dims = (split, w, w - split);
                    per.push(CouplingIdx {
                        s: b.mlp(&format!("flow{c}.{m}.s"), dims, Init::Zeros),
                        t: b.mlp(&format!("flow{c}.{m}.t"), dims, Init::Zeros),
                    });
                }
                flows.push(per);
            }
        }

        let disc = b.mlp("disc", (w, 2 * k, k), Init::Zeros);

        Ok(Self {
            config,
            names: b.names,
            tensors: b.tensors,
            layout: Layout {
                layers,
                heads,
                flows,
                disc,
            },
        })
    }

    /// Rebuilds a parameter set from named tensors, checking that names and
    /// shapes match what `config` requires.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut shell = Self::build(config, None)?;
        if named.len() != shell.names.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, configuration needs {}",
                named.len(),
                shell.names.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != shell.names[i] {
                return Err(Error::Checkpoint(format!(
                    "tensor {i} is '{name}', expected '{}'",
                    shell.names[i]
                )));
            }
            if t.shape() != shell.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "'{name}' has shape {:?}, expected {:?}",
                    t.shape(),
                    shell.tensors[i].shape()
                )));
            }
            shell.tensors[i] = t;
        }
        Ok(shell)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Records every tensor as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound<'_> {
        let vars = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        Bound { params: self, vars }
    }

    /// Records every tensor as a constant (no gradients needed).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        Bound { params: self, vars }
    }
}

/// Parameters recorded on a tape, in the same order as
/// [`ModelParams::tensors`].
pub struct Bound<'p> {
    pub params: &'p ModelParams,
    pub vars: Vec<Var>,
}

impl Bound<'_> {
    #[inline]
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn layout(&self) -> &Layout {
        &self.params.layout
    }
}

/// Two-layer perceptron `act(x W1 + b1) W2 + b2` recorded on `tape`.
pub(crate) fn mlp_on_tape(
    tape: &mut Tape,
    bound: &Bound<'_>,
    idx: MlpIdx,
    x: Var,
    act: fn(&mut Tape, Var) -> Result<Var>,
) -> Result<Var> {
    let h = tape.matmul(x, bound.var(idx.w1))?;
    let h = tape.add(h, bound.var(idx.b1))?;
    let h = act(tape, h)?;
    let o = tape.matmul(h, bound.var(idx.w2))?;
    tape.add(o, bound.var(idx.b2))
}
