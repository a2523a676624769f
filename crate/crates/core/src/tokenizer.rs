//! Flattening of a sample volume into a token sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{temporal_offset, Arrangement, Sample, WindowSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMode {
    /// One token per timestamp holding the whole window (`N = M`).
    Temporal,
    /// One token per window position holding its whole series (`N = |window|`).
    Spatial,
}

/// Row-major `n x d_in` token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub n: usize,
    pub d_in: usize,
    pub mode: TokenMode,
    pub data: Vec<f64>,
}

impl TokenSequence {
    pub fn token(&self, i: usize) -> &[f64] {
        &self.data[i * self.d_in..(i + 1) * self.d_in]
    }
}

/// `(N, D_in)` for a series of `timestamps` frames under `window`.
pub fn token_shape(timestamps: usize, window: WindowSpec, mode: TokenMode) -> (usize, usize) {
    let positions = window.positions();
    match mode {
        TokenMode::Temporal => (timestamps, positions * 3),
        TokenMode::Spatial => (positions, timestamps * 3),
    }
}

/// Temporal tokens are position-major: token `t` is
/// `[R, G, B of position 0, R, G, B of position 1, ...]` at timestamp `t`.
/// Spatial token `j` is position `j`'s temporal vector as arranged by the
/// sampler.
pub fn tokenize(sample: &Sample, mode: TokenMode) -> TokenSequence {
    let (m, p) = (sample.timestamps, sample.positions);
    match mode {
        TokenMode::Spatial => TokenSequence { n: p, d_in: 3 * m, mode, data: sample.values.clone() },
        TokenMode::Temporal => {
            let mut data = Vec::with_capacity(m * p * 3);
            for t in 0..m {
                for pos in 0..p {
                    for ch in 0..3 {
                        data.push(sample.value(t, pos, ch));
                    }
                }
            }
            TokenSequence { n: m, d_in: 3 * p, mode, data }
        }
    }
}

/// Inverse of [`tokenize`]: recovers the sample's position-major values.
pub fn detokenize(tokens: &TokenSequence, timestamps: usize, arrangement: Arrangement) -> Result<Vec<f64>> {
    if timestamps == 0 || tokens.data.len() != tokens.n * tokens.d_in || tokens.data.len() % (3 * timestamps) != 0 {
        return Err(Error::Shape {
            op: "detokenize",
            lhs: vec![tokens.n, tokens.d_in],
            rhs: vec![timestamps, 3],
        });
    }
    let positions = tokens.data.len() / (3 * timestamps);
    match tokens.mode {
        TokenMode::Spatial => Ok(tokens.data.clone()),
        TokenMode::Temporal => {
            let mut values = vec![0.0; tokens.data.len()];
            for t in 0..timestamps {
                for pos in 0..positions {
                    for ch in 0..3 {
                        let dst = pos * 3 * timestamps + temporal_offset(arrangement, timestamps, t, ch);
                        values[dst] = tokens.data[t * tokens.d_in + pos * 3 + ch];
                    }
                }
            }
            Ok(values)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{PixelIndex, PixelSplit};
    use crate::sampler::Normalization;

    fn sentinel_sample(m: usize, window: WindowSpec, arrangement: Arrangement) -> Sample {
        let p = window.positions();
        Sample {
            timestamps: m,
            positions: p,
            arrangement,
            normalization: Normalization::Raw,
            values: (0..m * p * 3).map(|v| v as f64).collect(),
            label: 0,
            origin: PixelIndex { x: 0, y: 0, label: 0, split: PixelSplit::Train },
        }
    }

    #[test]
    fn default_design_shapes() {
        let w = WindowSpec::square(3).unwrap();
        assert_eq!(token_shape(13, w, TokenMode::Temporal), (13, 27));
        assert_eq!(token_shape(13, w, TokenMode::Spatial), (9, 39));
        assert_eq!(token_shape(2, WindowSpec::single(), TokenMode::Temporal), (2, 3));
    }

    #[test]
    fn temporal_is_regrouped_spatial() {
        for arrangement in [Arrangement::Rgbrgb, Arrangement::Rrggbb] {
            let s = sentinel_sample(4, WindowSpec::cross(), arrangement);
            let temporal = tokenize(&s, TokenMode::Temporal);
            let spatial = tokenize(&s, TokenMode::Spatial);
            for t in 0..4 {
                for pos in 0..5 {
                    for ch in 0..3 {
                        let tv = temporal.token(t)[pos * 3 + ch];
                        let sv = spatial.token(pos)[temporal_offset(arrangement, 4, t, ch)];
                        assert_eq!(tv, sv);
                    }
                }
            }
        }
    }

    #[test]
    fn detokenize_inverts() {
        let s = sentinel_sample(3, WindowSpec::square(3).unwrap(), Arrangement::Rrggbb);
        for mode in [TokenMode::Temporal, TokenMode::Spatial] {
            let tokens = tokenize(&s, mode);
            assert_eq!(detokenize(&tokens, 3, Arrangement::Rrggbb).unwrap(), s.values);
        }
    }
}
