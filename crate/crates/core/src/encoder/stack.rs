use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EncoderError;
use crate::numerics::{Matrix, Scalar, Tape, Var};

const INIT_STD: f64 = 0.02;
const LAYER_NORM_EPS: f64 = 1e-5;
/// Norms at or below this are rejected when normalizing the [CLS] row.
pub const DEFAULT_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_model: usize,
    /// Width of queries, keys and values. Single head, so it must equal `d_model`.
    pub d_k: usize,
    pub layers: usize,
    pub max_len: usize,
    /// FFN hidden width is `ffn_mult * d_model`.
    pub ffn_mult: usize,
    /// Divide attention logits by √d_k.
    pub scaled: bool,
    /// Bare attention per layer: no layer norm, FFN or residuals.
    pub minimal: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d_model: 32, d_k: 32, layers: 2, max_len: 32, ffn_mult: 4, scaled: true, minimal: false }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let fail = |m: &str| Err(EncoderError::Config(m.to_string()));
        if self.d_model == 0 || self.max_len == 0 || self.ffn_mult == 0 {
            return fail("d_model, max_len and ffn_mult must be positive");
        }
        if self.d_k != self.d_model {
            return fail("single-head attention requires d_k == d_model");
        }
        Ok(())
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_mult * self.d_model
    }
}

/// Query, key and value projections (d_model × d_k each).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
}

/// Pre-norm block: `x + attn(LN(x))`, then `x + W2·relu(W1·LN(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub attention: AttentionParams<T>,
    pub ln1_scale: Matrix<T>,
    pub ln1_shift: Matrix<T>,
    pub ln2_scale: Matrix<T>,
    pub ln2_shift: Matrix<T>,
    pub ffn_w1: Matrix<T>,
    pub ffn_w2: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStack<T> {
    pub config: EncoderConfig,
    pub layers: Vec<EncoderLayer<T>>,
}

/// Tape handles for one layer, in [`EncoderLayer::params`] order.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub attention: AttentionVars,
    pub ln1_scale: Var,
    pub ln1_shift: Var,
    pub ln2_scale: Var,
    pub ln2_shift: Var,
    pub ffn_w1: Var,
    pub ffn_w2: Var,
}

/// Result of a forward pass recorded on a tape.
#[derive(Clone, Debug)]
pub struct EncodeTrace {
    /// Unit-norm [CLS] row (1 × d_model).
    pub embedding: Var,
    /// Attention weight matrix of every layer, in order.
    pub attention: Vec<Var>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn init<R: Rng + ?Sized>(d_model: usize, d_k: usize, rng: &mut R) -> Self {
        Self {
            w_q: Matrix::random_normal(d_model, d_k, INIT_STD, rng),
            w_k: Matrix::random_normal(d_model, d_k, INIT_STD, rng),
            w_v: Matrix::random_normal(d_model, d_k, INIT_STD, rng),
        }
    }

    pub fn register(&self, tape: &mut Tape<T>, track: bool) -> AttentionVars {
        let mut add = |m: &Matrix<T>| if track { tape.param(m.clone()) } else { tape.constant(m.clone()) };
        AttentionVars { w_q: add(&self.w_q), w_k: add(&self.w_k), w_v: add(&self.w_v) }
    }
}

impl<T: Scalar> EncoderLayer<T> {
    /// N(0, 0.02²) weights, unit scales, zero shifts.
    pub fn init<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Self {
        let d = config.d_model;
        Self {
            attention: AttentionParams::init(d, config.d_k, rng),
            ln1_scale: Matrix::ones(1, d),
            ln1_shift: Matrix::zeros(1, d),
            ln2_scale: Matrix::ones(1, d),
            ln2_shift: Matrix::zeros(1, d),
            ffn_w1: Matrix::random_normal(d, config.ffn_width(), INIT_STD, rng),
            ffn_w2: Matrix::random_normal(config.ffn_width(), d, INIT_STD, rng),
        }
    }

    /// Fixed parameter order shared by checkpoints, optimizers and aggregation.
    pub fn params(&self) -> [&Matrix<T>; 9] {
        [
            &self.attention.w_q,
            &self.attention.w_k,
            &self.attention.w_v,
            &self.ln1_scale,
            &self.ln1_shift,
            &self.ln2_scale,
            &self.ln2_shift,
            &self.ffn_w1,
            &self.ffn_w2,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Matrix<T>; 9] {
        [
            &mut self.attention.w_q,
            &mut self.attention.w_k,
            &mut self.attention.w_v,
            &mut self.ln1_scale,
            &mut self.ln1_shift,
            &mut self.ln2_scale,
            &mut self.ln2_shift,
            &mut self.ffn_w1,
            &mut self.ffn_w2,
        ]
    }

    pub fn register(&self, tape: &mut Tape<T>, track: bool) -> LayerVars {
        let attention = self.attention.register(tape, track);
        let mut add = |m: &Matrix<T>| if track { tape.param(m.clone()) } else { tape.constant(m.clone()) };
        LayerVars {
            attention,
            ln1_scale: add(&self.ln1_scale),
            ln1_shift: add(&self.ln1_shift),
            ln2_scale: add(&self.ln2_scale),
            ln2_shift: add(&self.ln2_shift),
            ffn_w1: add(&self.ffn_w1),
            ffn_w2: add(&self.ffn_w2),
        }
    }
}

impl LayerVars {
    pub fn all(&self) -> [Var; 9] {
        [
            self.attention.w_q,
            self.attention.w_k,
            self.attention.w_v,
            self.ln1_scale,
            self.ln1_shift,
            self.ln2_scale,
            self.ln2_shift,
            self.ffn_w1,
            self.ffn_w2,
        ]
    }
}

/// Single-head self-attention on a tape. Returns the context rows (n × d_k)
/// and the attention weights (n × n).
pub fn attention_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &AttentionVars,
    scaled: bool,
) -> Result<(Var, Var), EncoderError> {
    let q = tape.matmul(x, p.w_q)?;
    let k = tape.matmul(x, p.w_k)?;
    let v = tape.matmul(x, p.w_v)?;
    let kt = tape.transpose(k)?;
    let mut logits = tape.matmul(q, kt)?;
    if scaled {
        let d_k = tape.value(p.w_q).cols();
        logits = tape.scale(logits, T::one() / T::from_usize(d_k).expect("d_k").sqrt())?;
    }
    let alpha = tape.softmax_rows(logits)?;
    let out = tape.matmul(alpha, v)?;
    Ok((out, alpha))
}

fn layer_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, scale: Var, shift: Var) -> Result<Var, EncoderError> {
    let z = tape.standardize_rows(x, T::lit(LAYER_NORM_EPS))?;
    let z = tape.mul_row(z, scale)?;
    Ok(tape.add_row(z, shift)?)
}

impl<T: Scalar> EncoderStack<T> {
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self, EncoderError> {
        config.validate()?;
        let layers = (0..config.layers).map(|_| EncoderLayer::init(&config, rng)).collect();
        Ok(Self { config, layers })
    }

    pub fn register(&self, tape: &mut Tape<T>, track: bool) -> Vec<LayerVars> {
        self.layers.iter().map(|l| l.register(tape, track)).collect()
    }

    /// Runs every layer on `x` (n × d_model, row 0 = [CLS]) and normalizes the
    /// final [CLS] row.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, vars: &[LayerVars], x: Var) -> Result<EncodeTrace, EncoderError> {
        let (n, d) = tape.value(x).shape();
        if n == 0 {
            return Err(EncoderError::EmptySequence);
        }
        if d != self.config.d_model {
            return Err(EncoderError::Config(format!("input width {d} != d_model {}", self.config.d_model)));
        }
        let mut h = x;
        let mut attention = Vec::with_capacity(vars.len());
        for lv in vars {
            if self.config.minimal {
                let (out, alpha) = attention_on_tape(tape, h, &lv.attention, self.config.scaled)?;
                attention.push(alpha);
                h = out;
                continue;
            }
            let normed = layer_norm(tape, h, lv.ln1_scale, lv.ln1_shift)?;
            let (ctx, alpha) = attention_on_tape(tape, normed, &lv.attention, self.config.scaled)?;
            attention.push(alpha);
            h = tape.add(h, ctx)?;
            let normed = layer_norm(tape, h, lv.ln2_scale, lv.ln2_shift)?;
            let hidden = tape.matmul(normed, lv.ffn_w1)?;
            let hidden = tape.relu(hidden)?;
            let ffn = tape.matmul(hidden, lv.ffn_w2)?;
            h = tape.add(h, ffn)?;
        }
        let cls = tape.gather_rows(h, &[0])?;
        let embedding = tape.l2_normalize(cls, T::lit(DEFAULT_NORM_EPS))?;
        Ok(EncodeTrace { embedding, attention })
    }

    /// Inference forward pass. Returns the unit-norm [CLS] vector and the
    /// attention weights of each layer.
    pub fn encode_with_attention(&self, x: &Matrix<T>) -> Result<(Matrix<T>, Vec<Matrix<T>>), EncoderError> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let input = tape.constant(x.clone());
        let trace = self.forward_on_tape(&mut tape, &vars, input)?;
        let weights = trace.attention.iter().map(|&a| tape.value(a).clone()).collect();
        Ok((tape.value(trace.embedding).clone(), weights))
    }

    pub fn encode(&self, x: &Matrix<T>) -> Result<Matrix<T>, EncoderError> {
        Ok(self.encode_with_attention(x)?.0)
    }

    pub fn params(&self) -> Vec<&Matrix<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Self-attention without a tape (inference helper): `(h, α)`.
pub fn attention<T: Scalar>(
    x: &Matrix<T>,
    p: &AttentionParams<T>,
    scaled: bool,
) -> Result<(Matrix<T>, Matrix<T>), EncoderError> {
    if x.rows() == 0 {
        return Err(EncoderError::EmptySequence);
    }
    let mut tape = Tape::new();
    let vars = p.register(&mut tape, false);
    let input = tape.constant(x.clone());
    let (out, alpha) = attention_on_tape(&mut tape, input, &vars, scaled)?;
    Ok((tape.value(out).clone(), tape.value(alpha).clone()))
}
