//! Pre-norm ViT encoder over a token sequence.

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{softmax_in_place, Tape, Tensor, Var};
use crate::tokenizer::TokenSequence;

pub const INIT_STD: f64 = 0.02;
/// Std of a standard normal truncated to `[-2, 2]`.
const TRUNC2_STD: f64 = 0.879_625_661_034;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Cls,
    Gap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_width: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    /// Token count `N`, excluding the CLS slot.
    pub tokens: usize,
    pub d_in: usize,
    pub num_classes: usize,
    pub use_pos_enc: bool,
    pub aggregation: Aggregation,
    /// Multiplier applied to token values before the embedding; `1/255`
    /// for raw 8-bit inputs.
    pub input_scale: f64,
}

impl ModelConfig {
    /// Default encoder size for the given token geometry.
    pub fn new(tokens: usize, d_in: usize, num_classes: usize) -> Self {
        Self {
            d_model: 256,
            layers: 6,
            heads: 8,
            mlp_width: 512,
            dropout: 0.1,
            ln_eps: 1e-5,
            tokens,
            d_in,
            num_classes,
            use_pos_enc: true,
            aggregation: Aggregation::Cls,
            input_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.d_model", self.d_model),
            ("model.layers", self.layers),
            ("model.heads", self.heads),
            ("model.mlp_width", self.mlp_width),
            ("model.tokens", self.tokens),
            ("model.d_in", self.d_in),
            ("model.num_classes", self.num_classes),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(
                "model.heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.heads),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", format!("{} outside [0, 1)", self.dropout)));
        }
        if !(self.ln_eps >= 0.0) || !self.input_scale.is_finite() {
            return Err(Error::config("model.ln_eps", "must be non-negative and finite"));
        }
        Ok(())
    }

    /// Sequence length seen by the blocks, including the CLS slot.
    pub fn seq_len(&self) -> usize {
        match self.aggregation {
            Aggregation::Cls => self.tokens + 1,
            Aggregation::Gap => self.tokens,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitKind {
    Normal,
    Zeros,
    Ones,
}

/// Names, shapes and initializers of every parameter, in storage order.
fn layout(c: &ModelConfig) -> Vec<(String, Vec<usize>, InitKind)> {
    use InitKind::*;
    let (d, m) = (c.d_model, c.mlp_width);
    let mut out = vec![
        ("embed.weight".to_string(), vec![c.d_in, d], Normal),
        ("embed.bias".to_string(), vec![d], Zeros),
    ];
    if c.use_pos_enc {
        out.push(("pos_embed".into(), vec![c.seq_len(), d], Normal));
    }
    if c.aggregation == Aggregation::Cls {
        out.push(("cls_token".into(), vec![d], Normal));
    }
    for l in 0..c.layers {
        let p = |s: &str| format!("blocks.{l}.{s}");
        out.extend([
            (p("ln1.gain"), vec![d], Ones),
            (p("ln1.bias"), vec![d], Zeros),
            (p("attn.qkv.weight"), vec![d, 3 * d], Normal),
            (p("attn.qkv.bias"), vec![3 * d], Zeros),
            (p("attn.out.weight"), vec![d, d], Normal),
            (p("attn.out.bias"), vec![d], Zeros),
            (p("ln2.gain"), vec![d], Ones),
            (p("ln2.bias"), vec![d], Zeros),
            (p("mlp.fc1.weight"), vec![d, m], Normal),
            (p("mlp.fc1.bias"), vec![m], Zeros),
            (p("mlp.fc2.weight"), vec![m, d], Normal),
            (p("mlp.fc2.bias"), vec![d], Zeros),
        ]);
    }
    out.extend([
        ("final_ln.gain".to_string(), vec![d], Ones),
        ("final_ln.bias".to_string(), vec![d], Zeros),
        ("head.weight".to_string(), vec![d, c.num_classes], Normal),
        ("head.bias".to_string(), vec![c.num_classes], Zeros),
    ]);
    out
}

/// Named parameter tensors of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Weights, positional embedding and CLS token draw from a normal
    /// truncated at two standard deviations and widened so the draws have
    /// std `INIT_STD`; biases and LN shifts start at 0 and LN gains at 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_std(config, seed, INIT_STD)
    }

    pub fn init_with_std(config: &ModelConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let base = std / TRUNC2_STD;
        let normal = Normal::new(0.0, base).map_err(|e| Error::config("model.init_std", e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, kind) in layout(config) {
            let numel: usize = shape.iter().product();
            let data = match kind {
                InitKind::Zeros => vec![0.0; numel],
                InitKind::Ones => vec![1.0; numel],
                InitKind::Normal => (0..numel)
                    .map(|_| loop {
                        let v = normal.sample(&mut rng);
                        if v.abs() <= 2.0 * base {
                            break v;
                        }
                    })
                    .collect(),
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(Self { config: config.clone(), names, tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn census(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on `tape`, tracking gradients when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.leaf(t.clone()) })
            .collect()
    }

    /// Checks that no parameter holds NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.names.iter().zip(&self.tensors) {
            if !t.is_finite() {
                return Err(Error::NonFinite { context: format!("parameter {name}") });
            }
        }
        Ok(())
    }
}

/// Stacks token sequences into a scaled `[B, N, D_in]` input tensor.
pub fn stack_tokens(batch: &[TokenSequence], config: &ModelConfig) -> Result<Tensor> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let mut data = Vec::with_capacity(batch.len() * config.tokens * config.d_in);
    for seq in batch {
        if seq.n != config.tokens || seq.d_in != config.d_in {
            return Err(Error::config(
                "model.tokens",
                format!(
                    "token shape ({}, {}) does not match model ({}, {})",
                    seq.n, seq.d_in, config.tokens, config.d_in
                ),
            ));
        }
        data.extend(seq.data.iter().map(|v| v * config.input_scale));
    }
    Tensor::new(vec![batch.len(), config.tokens, config.d_in], data)
}

/// Result of one forward pass.
pub struct Forward {
    /// `[B, C]`.
    pub logits: Var,
    /// Post-softmax attention weights `[B, H, T, T]`, one per layer, before
    /// dropout.
    pub attention: Vec<Var>,
}

struct Cursor<'a> {
    vars: &'a [Var],
    next: usize,
}

impl Cursor<'_> {
    fn take(&mut self) -> Var {
        let v = self.vars[self.next];
        self.next += 1;
        v
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Runs the encoder on `x` (`[B, N, D_in]`, already scaled) with parameters
/// bound by [`ModelParams::bind`]. `rngs` holds one dropout stream per
/// sample and is ignored outside training.
pub fn forward_on_tape<R: rand::Rng>(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &[Var],
    x: Var,
    training: bool,
    rngs: &mut [R],
) -> Result<Forward> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[1] != config.tokens || shape[2] != config.d_in {
        return Err(Error::config(
            "model.tokens",
            format!("input shape {shape:?} does not match ({}, {})", config.tokens, config.d_in),
        ));
    }
    let b = shape[0];
    let (d, h, dh, t) = (config.d_model, config.heads, config.head_dim(), config.seq_len());
    let p = config.dropout;
    let mut cur = Cursor { vars: params, next: 0 };

    let (we, be) = (cur.take(), cur.take());
    let mut z = linear(tape, x, we, be)?;
    let pos = config.use_pos_enc.then(|| cur.take());
    if config.aggregation == Aggregation::Cls {
        let cls = cur.take();
        z = tape.prepend(z, cls)?;
    }
    if let Some(pos) = pos {
        z = tape.add(z, pos)?;
    }

    let mut attention = Vec::with_capacity(config.layers);
    for _ in 0..config.layers {
        let (g1, b1) = (cur.take(), cur.take());
        let (wqkv, bqkv) = (cur.take(), cur.take());
        let (wo, bo) = (cur.take(), cur.take());
        let (g2, b2) = (cur.take(), cur.take());
        let (w1, bias1) = (cur.take(), cur.take());
        let (w2, bias2) = (cur.take(), cur.take());

        let hn = tape.layer_norm(z, g1, b1, config.ln_eps)?;
        let qkv = linear(tape, hn, wqkv, bqkv)?;
        let qkv = tape.reshape(qkv, &[b, t, 3, h, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let q = tape.select(qkv, 0, 0)?;
        let k = tape.select(qkv, 0, 1)?;
        let v = tape.select(qkv, 0, 2)?;
        let kt = tape.permute(k, &[0, 1, 3, 2])?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax(scores);
        attention.push(attn);
        let attn = tape.dropout(attn, p, training, rngs)?;
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, t, d])?;
        let out = linear(tape, ctx, wo, bo)?;
        z = tape.add(z, out)?;

        let hn = tape.layer_norm(z, g2, b2, config.ln_eps)?;
        let hid = linear(tape, hn, w1, bias1)?;
        let hid = tape.gelu(hid);
        let hid = tape.dropout(hid, p, training, rngs)?;
        let out = linear(tape, hid, w2, bias2)?;
        let out = tape.dropout(out, p, training, rngs)?;
        z = tape.add(z, out)?;
    }

    let (gf, bf) = (cur.take(), cur.take());
    let z = tape.layer_norm(z, gf, bf, config.ln_eps)?;
    let y = match config.aggregation {
        Aggregation::Cls => tape.select(z, 1, 0)?,
        Aggregation::Gap => tape.mean_axis(z, 1)?,
    };
    let (wh, bh) = (cur.take(), cur.take());
    let logits = linear(tape, y, wh, bh)?;
    debug_assert_eq!(cur.next, params.len());
    Ok(Forward { logits, attention })
}

/// Eval-mode logits `[B, C]` for a batch of token sequences.
pub fn logits(params: &ModelParams, batch: &[TokenSequence]) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let x = tape.leaf(stack_tokens(batch, &params.config)?);
    let out = forward_on_tape::<ChaCha8Rng>(&mut tape, &params.config, &vars, x, false, &mut [])?;
    let c = params.config.num_classes;
    Ok(tape.value(out.logits).data().chunks_exact(c).map(<[f64]>::to_vec).collect())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f64>,
}

/// Eval-mode class probabilities and argmax for each sequence.
pub fn predict(params: &ModelParams, batch: &[TokenSequence]) -> Result<Vec<Prediction>> {
    Ok(logits(params, batch)?
        .into_iter()
        .map(|mut row| {
            softmax_in_place(&mut row);
            Prediction { class: argmax(&row), probabilities: row }
        })
        .collect())
}
