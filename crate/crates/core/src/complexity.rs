//! Closed-form parameter and inference-FLOP counts.
//!
//! FLOP conventions match the counters inside the numeric primitives: a
//! `p x q` by `q x r` matmul costs `2pqr`, elementwise add/scale and
//! reductions 1 per element, layer norm 8, softmax 5 and GELU 10 per
//! element. Dropout and data movement are free.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Aggregation, ModelConfig};
use crate::numeric::cost;
use crate::sampler::WindowSpec;
use crate::tokenizer::{token_shape, TokenMode};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    /// One sample's eval-mode forward pass.
    pub flops: u64,
    pub breakdown: Vec<ComponentCost>,
}

impl CostReport {
    /// Sums breakdown entries whose name ends with `suffix`.
    pub fn component_flops(&self, suffix: &str) -> u64 {
        self.breakdown.iter().filter(|c| c.name.ends_with(suffix)).map(|c| c.flops).sum()
    }
}

fn u(v: usize) -> u64 {
    v as u64
}

/// Per-component parameter and FLOP counts of `config`.
pub fn cost_report(config: &ModelConfig) -> Result<CostReport> {
    config.validate()?;
    let n = u(config.tokens);
    let t = u(config.seq_len());
    let d = u(config.d_model);
    let d_in = u(config.d_in);
    let h = u(config.heads);
    let dh = u(config.head_dim());
    let m = u(config.mlp_width);
    let c = u(config.num_classes);
    let ln = cost::LAYER_NORM * t * d;

    let mut parts = vec![ComponentCost {
        name: "embedding".into(),
        params: d_in * d + d,
        flops: cost::matmul(config.tokens, config.d_in, config.d_model) + cost::ADD * n * d,
    }];
    if config.aggregation == Aggregation::Cls {
        parts.push(ComponentCost { name: "cls_token".into(), params: d, flops: 0 });
    }
    if config.use_pos_enc {
        parts.push(ComponentCost { name: "pos_enc".into(), params: t * d, flops: cost::ADD * t * d });
    }
    for l in 0..config.layers {
        let scores = h * 2 * t * dh * t;
        let attn_flops = 2 * t * d * 3 * d
            + cost::ADD * 3 * t * d
            + scores
            + cost::SCALE * h * t * t
            + cost::SOFTMAX * h * t * t
            + h * 2 * t * t * dh
            + 2 * t * d * d
            + cost::ADD * t * d
            + cost::ADD * t * d;
        let mlp_flops = 2 * t * d * m + cost::ADD * t * m + cost::GELU * t * m + 2 * t * m * d + cost::ADD * t * d + cost::ADD * t * d;
        parts.extend([
            ComponentCost { name: format!("blocks.{l}.ln1"), params: 2 * d, flops: ln },
            ComponentCost { name: format!("blocks.{l}.attn"), params: 3 * d * d + 3 * d + d * d + d, flops: attn_flops },
            ComponentCost { name: format!("blocks.{l}.ln2"), params: 2 * d, flops: ln },
            ComponentCost { name: format!("blocks.{l}.mlp"), params: d * m + m + m * d + d, flops: mlp_flops },
        ]);
    }
    parts.push(ComponentCost { name: "final_ln".into(), params: 2 * d, flops: ln });
    let pool = match config.aggregation {
        Aggregation::Cls => 0,
        Aggregation::Gap => cost::REDUCE * t * d,
    };
    parts.push(ComponentCost { name: "aggregation".into(), params: 0, flops: pool });
    parts.push(ComponentCost {
        name: "head".into(),
        params: d * c + c,
        flops: cost::matmul(1, config.d_model, config.num_classes) + cost::ADD * c,
    });

    Ok(CostReport {
        params: parts.iter().map(|p| p.params).sum(),
        flops: parts.iter().map(|p| p.flops).sum(),
        breakdown: parts,
    })
}

pub fn count_params(config: &ModelConfig) -> Result<u64> {
    Ok(cost_report(config)?.params)
}

pub fn count_flops(config: &ModelConfig) -> Result<u64> {
    Ok(cost_report(config)?.flops)
}

/// Model config for a series of `timestamps` frames cut with `window` and
/// tokenized with `mode`, keeping every encoder setting of `base`.
pub fn config_for(base: &ModelConfig, timestamps: usize, window: WindowSpec, mode: TokenMode) -> ModelConfig {
    let (tokens, d_in) = token_shape(timestamps, window, mode);
    ModelConfig { tokens, d_in, ..base.clone() }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    /// Square window sides at fixed series length.
    K(Vec<usize>),
    /// Series lengths at fixed window.
    M(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub m: usize,
    pub k: usize,
    pub tokenization: TokenMode,
    pub tokens: usize,
    pub d_in: usize,
    pub params: u64,
    pub flops: u64,
    /// Whether params and flops are both at least those of the previous row.
    pub non_decreasing: Option<bool>,
    pub report: CostReport,
}

/// Cost of `base` at each point of `sweep`. Under a k sweep `window` is
/// replaced by square windows; under an M sweep `timestamps` varies.
pub fn scaling_report(
    base: &ModelConfig,
    timestamps: usize,
    window: WindowSpec,
    mode: TokenMode,
    sweep: &Sweep,
) -> Result<Vec<ScalingRow>> {
    let points: Vec<(usize, WindowSpec)> = match sweep {
        Sweep::K(ks) => ks.iter().map(|&k| WindowSpec::square(k).map(|w| (timestamps, w))).collect::<Result<_>>()?,
        Sweep::M(ms) => ms.iter().map(|&m| (m, window)).collect(),
    };
    if points.is_empty() {
        return Err(Error::config("cost.sweep", "sweep must not be empty"));
    }
    if let Some((m, _)) = points.iter().find(|(m, _)| *m == 0) {
        return Err(Error::config("cost.M", format!("series length {m} must be positive")));
    }
    let mut rows: Vec<ScalingRow> = Vec::with_capacity(points.len());
    for (m, w) in points {
        let cfg = config_for(base, m, w, mode);
        let report = cost_report(&cfg)?;
        let non_decreasing = rows.last().map(|prev| report.params >= prev.params && report.flops >= prev.flops);
        rows.push(ScalingRow {
            m,
            k: w.k,
            tokenization: mode,
            tokens: cfg.tokens,
            d_in: cfg.d_in,
            params: report.params,
            flops: report.flops,
            non_decreasing,
            report,
        });
    }
    Ok(rows)
}
