//! A small deterministic decoder-only transformer and the logit-lens readout.
//!
//! The architecture is the usual pre-LN stack: token plus learned position
//! embeddings, then `num_layers` blocks of `x += attn(ln1(x))` and
//! `x += mlp(ln2(x))`, then a final layer norm and an LM head tied to the
//! token embedding. Because the final norm sits directly before the head,
//! projecting the last block's residual state through `final_norm` and the
//! head ([`ToyLm::lens_project`]) reproduces the model's output logits
//! exactly. Layer `l` in this module always means the residual state after
//! block `l` (1-based); the embedding output is not a layer.
//!
//! Everything is `f64` and every forward pass is a pure function of the
//! parameters and the token sequence.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Standard deviation of every initialized weight matrix.
pub const INIT_SCALE: f64 = 0.02;

#[derive(Debug, Error, PartialEq)]
pub enum ToyLmError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("expected a vector of dimension {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid choice tokens: {0}")]
    InvalidChoices(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyLmConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub layernorm_epsilon: f64,
    pub init_seed: u64,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            model_dim: 32,
            num_layers: 4,
            num_heads: 2,
            max_seq_len: 32,
            layernorm_epsilon: 1e-5,
            init_seed: 0,
        }
    }
}

impl ToyLmConfig {
    pub fn validate(&self) -> Result<(), ToyLmError> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("model_dim", self.model_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ToyLmError::InvalidConfig(format!(
                    "{name} must be positive"
                )));
            }
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(ToyLmError::InvalidConfig(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !(self.layernorm_epsilon >= 0.0 && self.layernorm_epsilon.is_finite()) {
            return Err(ToyLmError::InvalidConfig(format!(
                "layernorm_epsilon {} must be finite and non-negative",
                self.layernorm_epsilon
            )));
        }
        Ok(())
    }
}

/// Learned affine layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNorm {
    fn identity(dim: usize) -> Self {
        Self {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn apply(&self, x: ArrayView1<'_, f64>, eps: f64) -> Array1<f64> {
        layer_norm(x, &self.gain, &self.bias, eps)
    }

    fn apply_rows(&self, x: &Array2<f64>, eps: f64) -> Array2<f64> {
        let mut out = x.clone();
        for (mut row, src) in out.rows_mut().into_iter().zip(x.rows()) {
            row.assign(&self.apply(src, eps));
        }
        out
    }
}

/// `(x − mean) / sqrt(var + eps) * gain + bias`, with the biased variance.
pub fn layer_norm(
    x: ArrayView1<'_, f64>,
    gain: &Array1<f64>,
    bias: &Array1<f64>,
    eps: f64,
) -> Array1<f64> {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    let centered = x.mapv(|v| v - mean);
    // A constant input has zero variance; with eps = 0 it normalizes to zero.
    let normed = if denom > 0.0 {
        centered / denom
    } else {
        centered
    };
    normed * gain + bias
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln_attn: LayerNorm,
    w_query: Array2<f64>,
    w_key: Array2<f64>,
    w_value: Array2<f64>,
    w_out: Array2<f64>,
    ln_mlp: LayerNorm,
    w_up: Array2<f64>,
    b_up: Array1<f64>,
    w_down: Array2<f64>,
    b_down: Array1<f64>,
}

/// The toy model. Immutable after construction; share it freely across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm {
    config: ToyLmConfig,
    token_embedding: Array2<f64>,
    position_embedding: Array2<f64>,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
}

/// Answer options as vocabulary entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceSpec {
    choice_token_ids: Vec<usize>,
}

impl ChoiceSpec {
    pub fn new(choice_token_ids: Vec<usize>, vocab_size: usize) -> Result<Self, ToyLmError> {
        if choice_token_ids.len() < 2 {
            return Err(ToyLmError::InvalidChoices(
                "need at least two choices".into(),
            ));
        }
        for (i, &t) in choice_token_ids.iter().enumerate() {
            if t >= vocab_size {
                return Err(ToyLmError::TokenOutOfRange {
                    token: t,
                    vocab: vocab_size,
                });
            }
            if choice_token_ids[..i].contains(&t) {
                return Err(ToyLmError::InvalidChoices(format!(
                    "token {t} listed twice"
                )));
            }
        }
        Ok(Self { choice_token_ids })
    }

    pub fn token_ids(&self) -> &[usize] {
        &self.choice_token_ids
    }

    pub fn len(&self) -> usize {
        self.choice_token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.choice_token_ids.is_empty()
    }
}

/// Builds a model with `N(0, 0.02²)` weights drawn from `cfg.init_seed`.
///
/// Layer norms start at gain 1 / bias 0 and MLP biases at 0. The draw order
/// is fixed (token embedding, positions, then each block's query, key, value,
/// output, up and down projections), so a seed pins every parameter bit.
pub fn init_toy_model(cfg: &ToyLmConfig) -> Result<ToyLm, ToyLmError> {
    cfg.validate()?;
    let mut rng = rng::seeded(cfg.init_seed);
    let normal = Normal::new(0.0, INIT_SCALE).expect("valid normal");
    let mut draw =
        |rows: usize, cols: usize| Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng));
    let d = cfg.model_dim;
    let hidden = 4 * d;
    let token_embedding = draw(cfg.vocab_size, d);
    let position_embedding = draw(cfg.max_seq_len, d);
    let blocks = (0..cfg.num_layers)
        .map(|_| Block {
            ln_attn: LayerNorm::identity(d),
            w_query: draw(d, d),
            w_key: draw(d, d),
            w_value: draw(d, d),
            w_out: draw(d, d),
            ln_mlp: LayerNorm::identity(d),
            w_up: draw(d, hidden),
            b_up: Array1::zeros(hidden),
            w_down: draw(hidden, d),
            b_down: Array1::zeros(d),
        })
        .collect();
    Ok(ToyLm {
        config: cfg.clone(),
        token_embedding,
        position_embedding,
        blocks,
        final_norm: LayerNorm::identity(d),
    })
}

fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x.powi(3))).tanh())
}

impl ToyLm {
    pub fn config(&self) -> &ToyLmConfig {
        &self.config
    }

    pub fn final_norm(&self) -> &LayerNorm {
        &self.final_norm
    }

    /// Mutable access for experiments that perturb the final norm.
    pub fn final_norm_mut(&mut self) -> &mut LayerNorm {
        &mut self.final_norm
    }

    /// The LM head, `d × V`. Tied: it is the transposed token embedding.
    pub fn lm_head(&self) -> Array2<f64> {
        self.token_embedding.t().to_owned()
    }

    pub fn all_finite(&self) -> bool {
        let mats = [&self.token_embedding, &self.position_embedding];
        let blocks_finite = self.blocks.iter().all(|b| {
            [
                &b.w_query, &b.w_key, &b.w_value, &b.w_out, &b.w_up, &b.w_down,
            ]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()))
                && [
                    &b.b_up,
                    &b.b_down,
                    &b.ln_attn.gain,
                    &b.ln_attn.bias,
                    &b.ln_mlp.gain,
                    &b.ln_mlp.bias,
                ]
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()))
        });
        mats.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && blocks_finite
            && self
                .final_norm
                .gain
                .iter()
                .chain(&self.final_norm.bias)
                .all(|v| v.is_finite())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), ToyLmError> {
        if tokens.is_empty() {
            return Err(ToyLmError::EmptySequence);
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(ToyLmError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&token) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(ToyLmError::TokenOutOfRange {
                token,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn attention(&self, block: &Block, x: &Array2<f64>) -> Array2<f64> {
        let eps = self.config.layernorm_epsilon;
        let normed = block.ln_attn.apply_rows(x, eps);
        let q = normed.dot(&block.w_query);
        let k = normed.dot(&block.w_key);
        let v = normed.dot(&block.w_value);
        let seq = x.nrows();
        let head_dim = self.config.model_dim / self.config.num_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut mixed = Array2::<f64>::zeros((seq, self.config.model_dim));
        for h in 0..self.config.num_heads {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            let (qh, kh, vh) = (q.slice(cols), k.slice(cols), v.slice(cols));
            for i in 0..seq {
                // Causal: position i attends to 0..=i only.
                let scores: Vec<f64> = (0..=i).map(|j| qh.row(i).dot(&kh.row(j)) * scale).collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut out = mixed.slice_mut(s![i, h * head_dim..(h + 1) * head_dim]);
                for (j, w) in weights.iter().enumerate() {
                    out.scaled_add(w / total, &vh.row(j));
                }
            }
        }
        mixed.dot(&block.w_out)
    }

    fn mlp(&self, block: &Block, x: &Array2<f64>) -> Array2<f64> {
        let normed = block.ln_mlp.apply_rows(x, self.config.layernorm_epsilon);
        let up = (normed.dot(&block.w_up) + &block.b_up).mapv(gelu);
        up.dot(&block.w_down) + &block.b_down
    }

    /// Residual streams of every position after each block: `L` matrices of `T × d`.
    fn forward_all(&self, tokens: &[usize]) -> Result<Vec<Array2<f64>>, ToyLmError> {
        self.check_tokens(tokens)?;
        let mut x = self.token_embedding.select(Axis(0), tokens)
            + self.position_embedding.slice(s![..tokens.len(), ..]);
        let mut states = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = &x + &self.attention(block, &x);
            x = &x + &self.mlp(block, &x);
            states.push(x.clone());
        }
        Ok(states)
    }

    /// Hidden state of the last position after each of the `L` blocks.
    pub fn forward_last_token(&self, tokens: &[usize]) -> Result<Vec<Array1<f64>>, ToyLmError> {
        let last = tokens.len().saturating_sub(1);
        Ok(self
            .forward_all(tokens)?
            .into_iter()
            .map(|x| x.row(last).to_owned())
            .collect())
    }

    /// Logit-lens projection: final layer norm, then the LM head.
    pub fn lens_project(&self, hidden: ArrayView1<'_, f64>) -> Result<Array1<f64>, ToyLmError> {
        if hidden.len() != self.config.model_dim {
            return Err(ToyLmError::DimensionMismatch {
                expected: self.config.model_dim,
                found: hidden.len(),
            });
        }
        let normed = self.final_norm.apply(hidden, self.config.layernorm_epsilon);
        Ok(self.token_embedding.dot(&normed))
    }

    /// The model's own next-token logits at the last position.
    pub fn output_logits(&self, tokens: &[usize]) -> Result<Array1<f64>, ToyLmError> {
        let states = self.forward_all(tokens)?;
        let top = states.last().expect("config guarantees at least one block");
        let normed = self.final_norm.apply_rows(
            &top.slice(s![tokens.len() - 1.., ..]).to_owned(),
            self.config.layernorm_epsilon,
        );
        Ok(normed.dot(&self.lm_head()).row(0).to_owned())
    }
}

/// Softmax over the logits of the choice tokens only.
pub fn choice_probs(
    logits: ArrayView1<'_, f64>,
    spec: &ChoiceSpec,
) -> Result<Vec<f64>, ToyLmError> {
    if let Some(&token) = spec.token_ids().iter().find(|&&t| t >= logits.len()) {
        return Err(ToyLmError::TokenOutOfRange {
            token,
            vocab: logits.len(),
        });
    }
    let gathered: Vec<f64> = spec.token_ids().iter().map(|&t| logits[t]).collect();
    Ok(softmax(&gathered))
}

/// Numerically stable softmax.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// The `L × K` matrix of lens choice distributions for one input.
pub fn extract_features(
    model: &ToyLm,
    tokens: &[usize],
    spec: &ChoiceSpec,
) -> Result<Vec<Vec<f64>>, ToyLmError> {
    model
        .forward_last_token(tokens)?
        .iter()
        .map(|h| choice_probs(model.lens_project(h.view())?.view(), spec))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small() -> ToyLm {
        init_toy_model(&ToyLmConfig {
            init_seed: 11,
            ..ToyLmConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn same_seed_same_model_different_seed_differs() {
        let cfg = ToyLmConfig::default();
        let a = init_toy_model(&cfg).unwrap();
        let b = init_toy_model(&cfg).unwrap();
        assert_eq!(a, b);
        let c = init_toy_model(&ToyLmConfig {
            init_seed: 1,
            ..cfg
        })
        .unwrap();
        assert_ne!(a, c);
        assert!(a.all_finite());
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ToyLmConfig {
            model_dim: 33,
            num_heads: 2,
            ..ToyLmConfig::default()
        };
        assert!(matches!(
            init_toy_model(&cfg),
            Err(ToyLmError::InvalidConfig(_))
        ));
        let cfg = ToyLmConfig {
            num_layers: 0,
            ..ToyLmConfig::default()
        };
        assert!(matches!(
            init_toy_model(&cfg),
            Err(ToyLmError::InvalidConfig(_))
        ));
    }

    #[test]
    fn forward_shapes_and_errors() {
        let m = small();
        let states = m.forward_last_token(&[1, 2, 3]).unwrap();
        assert_eq!(states.len(), 4);
        assert!(states.iter().all(|h| h.len() == 32));
        assert_eq!(m.forward_last_token(&[]), Err(ToyLmError::EmptySequence));
        assert_eq!(
            m.forward_last_token(&[64]),
            Err(ToyLmError::TokenOutOfRange {
                token: 64,
                vocab: 64
            })
        );
        assert_eq!(
            m.forward_last_token(&[0; 33]),
            Err(ToyLmError::SequenceTooLong { len: 33, max: 32 })
        );
    }

    #[test]
    fn appending_tokens_leaves_earlier_positions_alone() {
        let m = small();
        let prefix = [5, 9, 17, 3];
        let alone = m.forward_all(&prefix).unwrap();
        let extended = m.forward_all(&[5, 9, 17, 3, 40, 2]).unwrap();
        for (a, b) in alone.iter().zip(&extended) {
            assert_eq!(a.view(), b.slice(s![..prefix.len(), ..]));
        }
    }

    #[test]
    fn constant_vector_projects_to_zero() {
        let m = small();
        let h = Array1::from_elem(32, 3.25);
        let logits = m.lens_project(h.view()).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        assert_eq!(
            m.lens_project(Array1::zeros(5).view()),
            Err(ToyLmError::DimensionMismatch {
                expected: 32,
                found: 5
            })
        );
    }

    #[test]
    fn two_dim_hand_case() {
        let cfg = ToyLmConfig {
            vocab_size: 3,
            model_dim: 2,
            num_heads: 1,
            num_layers: 1,
            max_seq_len: 4,
            layernorm_epsilon: 0.0,
            init_seed: 5,
        };
        let m = init_toy_model(&cfg).unwrap();
        let logits = m.lens_project(array![1.0, 3.0].view()).unwrap();
        // mean 2, biased variance 1: normalized (-1, 1)
        let head = m.lm_head();
        for v in 0..3 {
            assert_eq!(logits[v], -head[[0, v]] + head[[1, v]]);
        }
    }

    #[test]
    fn choice_softmax_closed_forms() {
        let spec = ChoiceSpec::new(vec![0, 2], 3).unwrap();
        let p = choice_probs(array![0.0, 7.0, 0.0].view(), &spec).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let p = choice_probs(array![2f64.ln(), -1.0, 0.0].view(), &spec).unwrap();
        approx::assert_abs_diff_eq!(p[0], 2.0 / 3.0, epsilon = 1e-15);
        approx::assert_abs_diff_eq!(p[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn choice_spec_validation() {
        assert!(ChoiceSpec::new(vec![1, 1], 4).is_err());
        assert!(ChoiceSpec::new(vec![1], 4).is_err());
        assert_eq!(
            ChoiceSpec::new(vec![1, 4], 4),
            Err(ToyLmError::TokenOutOfRange { token: 4, vocab: 4 })
        );
    }

    #[test]
    fn final_lens_row_is_output_distribution() {
        let m = small();
        let spec = ChoiceSpec::new(vec![3, 8, 21], 64).unwrap();
        let tokens = [4, 8, 15, 16, 23, 42];
        let rows = extract_features(&m, &tokens, &spec).unwrap();
        assert_eq!(rows.len(), 4);
        let direct = choice_probs(m.output_logits(&tokens).unwrap().view(), &spec).unwrap();
        for (a, b) in rows.last().unwrap().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
