//! Desk-scale decoder-only transformer: pre-norm attention and gated MLP
//! blocks on a residual stream, rotary position embeddings, RMS norm, no
//! biases anywhere. The no-bias property is what makes zero-residual
//! block insertion exactly output-preserving.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const ROPE_BASE: f64 = 10000.0;

/// Roles of the nine tensors of one block, in canonical order.
pub const BLOCK_ROLES: [&str; 9] = [
    "attn_norm_gain",
    "wq",
    "wk",
    "wv",
    "wo",
    "mlp_norm_gain",
    "wgate",
    "wup",
    "wdown",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub norm_eps: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// A config every model-level operation accepts. Expansion planning
    /// additionally requires an even layer count of at least 4; that
    /// stricter check lives with the plan builder, since surgery itself
    /// produces odd layer counts.
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(invalid("n_layers", "must be at least 1"));
        }
        if self.d_model == 0 {
            return Err(invalid("d_model", "must be positive"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(invalid("n_heads", "must divide d_model"));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(invalid("n_heads", "head dim must be even for rotary pairs"));
        }
        if self.d_ff == 0 {
            return Err(invalid("d_ff", "must be positive"));
        }
        if self.vocab_size < 2 {
            return Err(invalid("vocab_size", "must be at least 2"));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(invalid("vocab_size", "must fit in a u32 token id"));
        }
        if self.max_seq_len == 0 {
            return Err(invalid("max_seq_len", "must be positive"));
        }
        if !(self.norm_eps > 0.0) {
            return Err(invalid("norm_eps", "must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

fn invalid(field: &'static str, reason: &str) -> Error {
    Error::InvalidConfig {
        field,
        reason: reason.to_string(),
    }
}

/// Name and shape of every tensor implied by a config, in canonical
/// order: embed, blocks shallow to deep, final_norm, head.
pub fn tensor_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let ff = config.d_ff;
    let v = config.vocab_size;
    let mut specs = Vec::with_capacity(3 + 9 * config.n_layers);
    specs.push(("embed".to_string(), vec![v, d]));
    for i in 0..config.n_layers {
        for role in BLOCK_ROLES {
            let shape = match role {
                "attn_norm_gain" | "mlp_norm_gain" => vec![d],
                "wq" | "wk" | "wv" | "wo" => vec![d, d],
                "wgate" | "wup" => vec![d, ff],
                "wdown" => vec![ff, d],
                _ => unreachable!(),
            };
            specs.push((format!("block.{i}.{role}"), shape));
        }
    }
    specs.push(("final_norm".to_string(), vec![d]));
    specs.push(("head".to_string(), vec![d, v]));
    specs
}

/// Parameters in one block, from the config dims alone.
pub fn params_per_block(config: &ModelConfig) -> u64 {
    let d = config.d_model as u64;
    let ff = config.d_ff as u64;
    4 * d * d + 3 * d * ff + 2 * d
}

/// Total parameter count from the config dims alone (no allocation).
pub fn params_total(config: &ModelConfig) -> u64 {
    let d = config.d_model as u64;
    let v = config.vocab_size as u64;
    2 * v * d + d + config.n_layers as u64 * params_per_block(config)
}

/// Deterministic seeded initialization: norm gains are ones, weights are
/// N(0, 0.02^2), and the residual output projections (wo, wdown) are
/// scaled down by 1/sqrt(2 * n_layers). Each tensor draws from its own
/// name-derived stream, so checkpoints are reproducible tensor by tensor.
pub fn init_model(config: &ModelConfig) -> Result<Checkpoint> {
    config.validate()?;
    let out_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
    let mut ckpt = Checkpoint::empty(config.clone());
    for (name, shape) in tensor_specs(config) {
        let tensor = if name.ends_with("norm_gain") || name == "final_norm" {
            Tensor::from_vec(&shape, vec![1.0; shape.iter().product()])?
        } else {
            let std = if name.ends_with(".wo") || name.ends_with(".wdown") {
                0.02 * out_scale
            } else {
                0.02
            };
            let mut rng = Rng::derive(config.seed, &name);
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|_| (rng.gaussian() * std) as f32).collect();
            Tensor::from_vec(&shape, data)?
        };
        ckpt.insert(name, tensor)?;
    }
    ckpt.validate()?;
    Ok(ckpt)
}

/// Leaf handles for one block's tensors inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub attn_norm_gain: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub mlp_norm_gain: Var,
    pub wgate: Var,
    pub wup: Var,
    pub wdown: Var,
}

/// One residual block on the graph:
/// `x + attn(rms(x)) + mlp(rms(x + attn(rms(x))))`.
pub fn block_graph<F: Scalar>(
    g: &mut Graph<F>,
    x: Var,
    b: &BlockVars,
    n_heads: usize,
    eps: f64,
) -> Result<Var> {
    let normed = g.rms_norm(x, b.attn_norm_gain, eps)?;
    let q = g.matmul(normed, b.wq)?;
    let k = g.matmul(normed, b.wk)?;
    let v = g.matmul(normed, b.wv)?;
    let q = g.rope(q, n_heads, ROPE_BASE)?;
    let k = g.rope(k, n_heads, ROPE_BASE)?;
    let scores = g.attn_scores(q, k, n_heads)?;
    let probs = g.causal_softmax(scores)?;
    let mixed = g.attn_mix(probs, v, n_heads)?;
    let attn_out = g.matmul(mixed, b.wo)?;
    let x = g.add(x, attn_out)?;

    let normed2 = g.rms_norm(x, b.mlp_norm_gain, eps)?;
    let gate = g.matmul(normed2, b.wgate)?;
    let gate = g.silu(gate)?;
    let up = g.matmul(normed2, b.wup)?;
    let h = g.mul(gate, up)?;
    let mlp_out = g.matmul(h, b.wdown)?;
    g.add(x, mlp_out)
}

fn block_leaves<F: Scalar>(
    g: &mut Graph<F>,
    ckpt: &Checkpoint,
    i: usize,
    trainable: &dyn Fn(&str) -> bool,
    leaves: &mut Vec<(String, Var)>,
) -> Result<BlockVars> {
    let mut leaf = |role: &str| -> Result<Var> {
        let name = format!("block.{i}.{role}");
        let t = ckpt.tensor(&name)?;
        let req = trainable(&name);
        let var = g.leaf(t.cast::<F>(), req);
        leaves.push((name, var));
        Ok(var)
    };
    Ok(BlockVars {
        attn_norm_gain: leaf("attn_norm_gain")?,
        wq: leaf("wq")?,
        wk: leaf("wk")?,
        wv: leaf("wv")?,
        wo: leaf("wo")?,
        mlp_norm_gain: leaf("mlp_norm_gain")?,
        wgate: leaf("wgate")?,
        wup: leaf("wup")?,
        wdown: leaf("wdown")?,
    })
}

/// Residual-stream capture: activations at every block boundary,
/// `boundaries[0]` is the embedding output (input of block 0) and
/// `boundaries[L]` the output of the last block.
#[derive(Debug, Clone)]
pub struct ResidualTrace {
    pub boundaries: Vec<Tensor>,
}

impl ResidualTrace {
    pub fn len(&self) -> usize {
        self.boundaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boundaries.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[tokens, vocab]` logits.
    pub logits: Tensor,
    pub trace: Option<ResidualTrace>,
}

/// Apply one block of `ckpt` to activations `x` (`[tokens, d_model]`).
pub fn block_apply(ckpt: &Checkpoint, i: usize, x: &Tensor) -> Result<Tensor> {
    let cfg = ckpt.config();
    if i >= cfg.n_layers {
        return Err(Error::LayerOutOfRange {
            index: i,
            n_layers: cfg.n_layers,
        });
    }
    if x.shape().len() != 2 || x.shape()[1] != cfg.d_model {
        return Err(Error::ShapeMismatch {
            op: "block_apply",
            lhs: x.shape().to_vec(),
            rhs: vec![cfg.d_model],
        });
    }
    if x.shape()[0] > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: x.shape()[0],
            max: cfg.max_seq_len,
        });
    }
    let mut g: Graph<f32> = Graph::new();
    let xv = g.leaf(x.clone(), false);
    let mut leaves = Vec::new();
    let b = block_leaves(&mut g, ckpt, i, &|_| false, &mut leaves)?;
    let out = block_graph(&mut g, xv, &b, cfg.n_heads, cfg.norm_eps)?;
    Ok(g.value(out).clone())
}

/// Full forward pass. With `capture` set, every residual boundary is
/// recorded; re-running a captured block on `boundaries[i]` reproduces
/// `boundaries[i+1]` bit for bit because both paths run the same graph
/// ops on the same values.
pub fn forward(ckpt: &Checkpoint, tokens: &[u32], capture: bool) -> Result<ForwardOutput> {
    let cfg = ckpt.config();
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    let mut g: Graph<f32> = Graph::new();
    let built = build_forward::<f32>(&mut g, ckpt, tokens, &|_| false, capture)?;
    Ok(ForwardOutput {
        logits: g.value(built.logits).clone(),
        trace: built.trace.map(|vars| ResidualTrace {
            boundaries: vars.iter().map(|&v| g.value(v).clone()).collect(),
        }),
    })
}

pub struct BuiltForward {
    pub logits: Var,
    pub trace: Option<Vec<Var>>,
    pub leaves: Vec<(String, Var)>,
}

/// Shared graph construction for forward, training and the f64 gradient
/// check: embedding, every block, final norm, head.
pub fn build_forward<F: Scalar>(
    g: &mut Graph<F>,
    ckpt: &Checkpoint,
    tokens: &[u32],
    trainable: &dyn Fn(&str) -> bool,
    capture: bool,
) -> Result<BuiltForward> {
    let cfg = ckpt.config();
    let mut leaves = Vec::new();

    let embed_t = ckpt.tensor("embed")?;
    let embed = g.leaf(embed_t.cast::<F>(), trainable("embed"));
    leaves.push(("embed".to_string(), embed));

    let mut x = g.embed(embed, tokens)?;
    let mut trace = if capture { Some(vec![x]) } else { None };

    for i in 0..cfg.n_layers {
        let b = block_leaves(g, ckpt, i, trainable, &mut leaves)?;
        x = block_graph(g, x, &b, cfg.n_heads, cfg.norm_eps)?;
        if let Some(t) = trace.as_mut() {
            t.push(x);
        }
    }

    let fng = g.leaf(ckpt.tensor("final_norm")?.cast::<F>(), trainable("final_norm"));
    leaves.push(("final_norm".to_string(), fng));
    let head_t = g.leaf(ckpt.tensor("head")?.cast::<F>(), trainable("head"));
    leaves.push(("head".to_string(), head_t));

    let normed = g.rms_norm(x, fng, cfg.norm_eps)?;
    let logits = g.matmul(normed, head_t)?;
    Ok(BuiltForward {
        logits,
        trace,
        leaves,
    })
}

pub struct LossGraph<F: Scalar> {
    pub graph: Graph<F>,
    pub loss: Var,
    /// Leaf vars for every checkpoint tensor, in insertion order.
    pub leaves: Vec<(String, Var)>,
    /// Number of predicted positions (sequence length minus one).
    pub n_positions: usize,
}

/// Next-token cross-entropy graph over one sequence: inputs are
/// `tokens[..n-1]`, targets `tokens[1..]`, loss is the summed nats.
pub fn loss_graph<F: Scalar>(
    ckpt: &Checkpoint,
    tokens: &[u32],
    trainable: &dyn Fn(&str) -> bool,
) -> Result<LossGraph<F>> {
    if tokens.len() < 2 {
        return Err(Error::ShapeMismatch {
            op: "loss_graph",
            lhs: vec![tokens.len()],
            rhs: vec![2],
        });
    }
    let cfg = ckpt.config();
    let inputs = &tokens[..tokens.len() - 1];
    let targets = &tokens[1..];
    if inputs.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: inputs.len(),
            max: cfg.max_seq_len,
        });
    }
    let mut g: Graph<F> = Graph::new();
    let built = build_forward(&mut g, ckpt, inputs, trainable, false)?;
    let loss = g.cross_entropy_sum(built.logits, targets)?;
    Ok(LossGraph {
        graph: g,
        loss,
        leaves: built.leaves,
        n_positions: targets.len(),
    })
}

/// Greedy (argmax, ties to the lowest id) or temperature sampling.
/// Deterministic for a fixed seed.
pub fn generate(
    ckpt: &Checkpoint,
    prompt: &[u32],
    n_new: usize,
    temperature: Option<f64>,
    seed: u64,
) -> Result<Vec<u32>> {
    let cfg = ckpt.config();
    let mut tokens = prompt.to_vec();
    let mut rng = Rng::new(seed);
    for _ in 0..n_new {
        if tokens.len() >= cfg.max_seq_len {
            break;
        }
        let out = forward(ckpt, &tokens, false)?;
        if out.logits.shape()[0] == 0 {
            break;
        }
        let last = out.logits.row(out.logits.shape()[0] - 1);
        let next = match temperature {
            None => {
                let mut best = 0usize;
                for (i, &v) in last.iter().enumerate() {
                    if v > last[best] {
                        best = i;
                    }
                }
                best as u32
            }
            Some(temp) => {
                let scaled: Vec<f64> = last.iter().map(|&v| v as f64 / temp).collect();
                let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scaled.iter().map(|&v| (v - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                let mut dart = rng.next_f64() * z;
                let mut pick = exps.len() - 1;
                for (i, &e) in exps.iter().enumerate() {
                    if dart < e {
                        pick = i;
                        break;
                    }
                    dart -= e;
                }
                pick as u32
            }
        };
        tokens.push(next);
    }
    Ok(tokens)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub total: u64,
    pub trainable: u64,
}

/// Exact split of parameter counts by freeze mask; with no mask every
/// parameter counts as trainable.
pub fn count_params(
    ckpt: &Checkpoint,
    mask: Option<&crate::checkpoint::FreezeMask>,
) -> ParamCounts {
    let mut total = 0u64;
    let mut trainable = 0u64;
    for (name, tensor) in ckpt.iter() {
        let n = tensor.len() as u64;
        total += n;
        let is_trainable = mask.map(|m| m.is_trainable(name)).unwrap_or(true);
        if is_trainable {
            trainable += n;
        }
    }
    ParamCounts { total, trainable }
}
