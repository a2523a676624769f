//! AdamW training loop with seeded shuffling and best-epoch selection.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, PixelIndex};
use crate::error::{Error, Result};
use crate::model::{forward_on_tape, predict, stack_tokens, ModelConfig, ModelParams};
use crate::numeric::{Tape, Tensor};
use crate::sampler::{extract, SamplerConfig};
use crate::tokenizer::{tokenize, TokenMode, TokenSequence};

/// Batch size used for evaluation passes.
pub const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |field: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(field, format!("{v} outside [0, 1)")))
            }
        };
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be finite and non-negative"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be finite and non-negative"));
        }
        unit("train.beta1", self.beta1)?;
        unit("train.beta2", self.beta2)?;
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// Mixes `tag` into `seed` (splitmix64 finalizer) to derive independent streams.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHUFFLE_TAG: u64 = 1;
const DROPOUT_TAG: u64 = 2;

/// Dropout stream of one training sample in one epoch. Depends only on the
/// sample's index in the training set, not on batch composition.
pub fn dropout_rng(seed: u64, epoch: usize, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, DROPOUT_TAG));
    rng.set_stream(((epoch as u64) << 32) | sample as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamWState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
pub fn adamw_step(
    names: &[String],
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamWState,
    cfg: &TrainConfig,
    batch: usize,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Usage(format!(
            "adamw: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.len() != params[i].numel() {
            return Err(Error::Shape { op: "adamw", lhs: params[i].shape().to_vec(), rhs: vec![g.len()] });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: format!("gradient of {} at batch {batch}", names[i]) });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.adam_eps) + cfg.weight_decay * *w);
        }
    }
    Ok(())
}

/// Labeled pixels of one population together with how to turn them into
/// token sequences.
pub struct PixelSet<'a> {
    pub dataset: &'a Dataset,
    pub pixels: Vec<PixelIndex>,
    pub sampler: SamplerConfig,
    pub mode: TokenMode,
}

impl PixelSet<'_> {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn sequence(&self, i: usize) -> Result<TokenSequence> {
        let sample = extract(&self.pixels[i], &self.dataset.series, &self.dataset.mask, &self.sampler)?;
        Ok(tokenize(&sample, self.mode))
    }

    pub fn labels(&self) -> Vec<usize> {
        self.pixels.iter().map(|p| p.label).collect()
    }
}

/// Eval-mode predicted class of every pixel in `set`.
pub fn predict_set(params: &ModelParams, set: &PixelSet) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(set.len());
    for start in (0..set.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(set.len());
        let batch = (start..end).map(|i| set.sequence(i)).collect::<Result<Vec<_>>>()?;
        out.extend(predict(params, &batch)?.into_iter().map(|p| p.class));
    }
    Ok(out)
}

pub fn accuracy_on(params: &ModelParams, set: &PixelSet) -> Result<f64> {
    let preds = predict_set(params, set)?;
    let correct = preds.iter().zip(&set.pixels).filter(|(p, px)| **p == px.label).count();
    Ok(correct as f64 / set.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// `None` when no epoch ran and the initial model is kept.
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: f64,
    pub optimizer_steps: u64,
    /// Excluded from the JSON so reports of identical runs compare equal.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub params: ModelParams,
    pub report: TrainReport,
}

/// Mean cross-entropy of one training batch, with gradients applied through
/// AdamW. `indices` are positions in `set`.
#[allow(clippy::too_many_arguments)]
fn train_batch(
    params: &mut ModelParams,
    state: &mut AdamWState,
    set: &PixelSet,
    indices: &[usize],
    epoch: usize,
    batch: usize,
    cfg: &TrainConfig,
) -> Result<f64> {
    let seqs = indices.iter().map(|&i| set.sequence(i)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = indices.iter().map(|&i| set.pixels[i].label).collect();
    let mut rngs: Vec<ChaCha8Rng> = indices.iter().map(|&i| dropout_rng(cfg.seed, epoch, i)).collect();

    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let x = tape.leaf(stack_tokens(&seqs, &params.config)?);
    let out = forward_on_tape(&mut tape, &params.config, &vars, x, true, &mut rngs)?;
    let loss_var = tape.cross_entropy(out.logits, &labels)?;
    let loss = tape.value(loss_var).data()[0];
    if !loss.is_finite() {
        return Err(Error::NonFinite { context: format!("loss at epoch {epoch}, batch {batch}") });
    }
    tape.backward(loss_var)?;
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(&params.tensors)
        .map(|(&v, t)| tape.take_grad(v).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    drop(tape);
    adamw_step(&params.names, &mut params.tensors, &grads, state, cfg, batch)?;
    Ok(loss)
}

/// Trains from a fresh initialization seeded by `cfg.seed` and returns the
/// parameters of the epoch with the highest validation accuracy (earliest
/// on ties).
pub fn train(train_set: &PixelSet, val_set: &PixelSet, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let started = Instant::now();
    let mut params = ModelParams::init(model, cfg.seed)?;
    let mut state = AdamWState::new(&params.tensors);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_TAG));

    let mut best = params.clone();
    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: None,
        best_val_accuracy: if cfg.epochs == 0 { accuracy_on(&params, val_set)? } else { f64::NEG_INFINITY },
        optimizer_steps: 0,
        wall_time_secs: 0.0,
    };

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (batch, indices) in order.chunks(cfg.batch_size).enumerate() {
            let loss = train_batch(&mut params, &mut state, train_set, indices, epoch, batch, cfg)?;
            loss_sum += loss * indices.len() as f64;
        }
        report.optimizer_steps = state.t;
        let val_accuracy = accuracy_on(&params, val_set)?;
        report.epochs.push(EpochStats { epoch, train_loss: loss_sum / train_set.len() as f64, val_accuracy });
        if val_accuracy > report.best_val_accuracy {
            report.best_val_accuracy = val_accuracy;
            report.best_epoch = Some(epoch);
            best = params.clone();
        }
    }
    best.check_finite()?;
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(TrainOutcome { params: best, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_setup(p0: f64) -> (Vec<String>, Vec<Tensor>, AdamWState) {
        let params = vec![Tensor::new(vec![1], vec![p0]).unwrap()];
        let state = AdamWState::new(&params);
        (vec!["p".into()], params, state)
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let (names, mut params, mut state) = scalar_setup(2.0);
        let cfg = TrainConfig { lr: 0.1, weight_decay: 0.01, ..TrainConfig::default() };
        adamw_step(&names, &mut params, &[vec![0.0]], &mut state, &cfg, 0).unwrap();
        assert_eq!(params[0].data()[0], 2.0 - 0.1 * 0.01 * 2.0);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (names, mut params, mut state) = scalar_setup(1.0);
        let cfg = TrainConfig { lr: 0.05, weight_decay: 0.0, ..TrainConfig::default() };
        adamw_step(&names, &mut params, &[vec![1.0]], &mut state, &cfg, 0).unwrap();
        let expected = 1.0 - 0.05 * (1.0 / (1.0 + 1e-8));
        assert!((params[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn quadratic_moves_toward_minimum() {
        let (names, mut params, mut state) = scalar_setup(0.0);
        let cfg = TrainConfig { lr: 0.1, weight_decay: 0.0, ..TrainConfig::default() };
        // independent scalar simulation of the same update rule
        let (mut p, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let mut prev = 0.0;
        for step in 1..=10 {
            let g = 2.0 * (params[0].data()[0] - 3.0);
            adamw_step(&names, &mut params, &[vec![g]], &mut state, &cfg, step).unwrap();
            let gs = 2.0 * (p - 3.0);
            m = 0.9 * m + 0.1 * gs;
            v = 0.999 * v + 0.001 * gs * gs;
            p -= 0.1 * (m / (1.0 - 0.9f64.powi(step as i32))) / ((v / (1.0 - 0.999f64.powi(step as i32))).sqrt() + 1e-8);
            let now = params[0].data()[0];
            assert!(now > prev && now < 3.0);
            assert!((now - p).abs() < 1e-12);
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter_and_batch() {
        let (names, mut params, mut state) = scalar_setup(0.0);
        let err = adamw_step(&names, &mut params, &[vec![f64::NAN]], &mut state, &TrainConfig::default(), 17)
            .unwrap_err()
            .to_string();
        assert!(err.contains("gradient of p") && err.contains("batch 17"), "{err}");
        assert_eq!(state.t, 0);
    }

    #[test]
    fn dropout_streams_differ_by_sample_and_epoch() {
        use rand::Rng;
        let draw = |e, s| dropout_rng(5, e, s).random::<u64>();
        assert_eq!(draw(0, 0), draw(0, 0));
        assert_ne!(draw(0, 0), draw(0, 1));
        assert_ne!(draw(0, 0), draw(1, 0));
    }
}
