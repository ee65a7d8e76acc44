//! Small causal decoder transformer over multimodal token sequences.
//!
//! Pre-norm residual blocks, learned positional embeddings, 4× feed-forward
//! expansion with squared-ReLU, tied input/output embeddings. The forward
//! pass accepts
//! an arbitrary additive attention mask and can export the attention map
//! averaged over heads within each layer and then over layers.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{CoreError, Result};
use crate::masking::MaskMatrix;
use crate::num::Scalar;
use crate::rng::CounterRng;
use crate::seq::{SegmentLayout, Sequence};
use crate::tensor::Tensor;

pub const INIT_SCALE: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(CoreError::Config(format!(
                "vocab_size {} < 4 (reserved specials)",
                self.vocab_size
            )));
        }
        if self.n_heads == 0 || self.d_model == 0 || self.n_layers == 0 || self.max_seq_len == 0 {
            return Err(CoreError::Config("all dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(CoreError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }

    /// Desk-scale teacher: 4 layers, d=64, 4 heads.
    pub fn desk_teacher(vocab_size: usize, seed: u64) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            max_seq_len: 128,
            seed,
        }
    }

    /// Desk-scale student: 2 layers, d=32, 2 heads.
    pub fn desk_student(vocab_size: usize, seed: u64) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            max_seq_len: 128,
            seed,
        }
    }

    /// Closed-form parameter count for this architecture. The unembedding
    /// shares the token-embedding matrix.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 12 * d * d + 13 * d;
        self.vocab_size * d          // token embedding (tied with output)
            + self.max_seq_len * d   // positional embedding
            + self.n_layers * per_layer
            + 2 * d // final layer norm
    }
}

#[derive(Debug, Clone)]
pub struct Layer<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub tok_embed: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub layers: Vec<Layer<T>>,
    pub final_gain: Tensor<T>,
    pub final_bias: Tensor<T>,
}

impl<T: Scalar> Model<T> {
    /// Seeded initialization: scaled normal (scale 0.02) for weight matrices
    /// and embeddings, ones for norm gains, zeros for biases. Each tensor
    /// draws from its own counter stream, so parameters are a pure function
    /// of (config, seed).
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let root = CounterRng::new(config.seed, 0x6d6f64656c); // "model"
        let mut stream = 0u64;
        let mut randn = |shape: Vec<usize>| {
            stream += 1;
            let mut rng = root.derive(stream);
            Tensor::randn(shape, INIT_SCALE, &mut rng)
        };
        let d = config.d_model;
        let f = config.ffn_dim();
        let mut layers = Vec::with_capacity(config.n_layers);
        let tok_embed = randn(vec![config.vocab_size, d]);
        let pos_embed = randn(vec![config.max_seq_len, d]);
        for _ in 0..config.n_layers {
            layers.push(Layer {
                ln1_gain: Tensor::full(vec![d], T::one()),
                ln1_bias: Tensor::zeros(vec![d]),
                wq: randn(vec![d, d]),
                bq: Tensor::zeros(vec![d]),
                wk: randn(vec![d, d]),
                bk: Tensor::zeros(vec![d]),
                wv: randn(vec![d, d]),
                bv: Tensor::zeros(vec![d]),
                wo: randn(vec![d, d]),
                bo: Tensor::zeros(vec![d]),
                ln2_gain: Tensor::full(vec![d], T::one()),
                ln2_bias: Tensor::zeros(vec![d]),
                w1: randn(vec![d, f]),
                b1: Tensor::zeros(vec![f]),
                w2: randn(vec![f, d]),
                b2: Tensor::zeros(vec![d]),
            });
        }
        let final_gain = Tensor::full(vec![d], T::one());
        let final_bias = Tensor::zeros(vec![d]);
        Ok(Model {
            config,
            tok_embed,
            pos_embed,
            layers,
            final_gain,
            final_bias,
        })
    }

    /// Parameters in canonical order. `forward_pass` leafs variables in this
    /// same order, and the optimizer state is positional, so the order is a
    /// stable contract.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::with_capacity(2 + self.layers.len() * 16 + 2);
        out.push(("tok_embed".to_string(), &self.tok_embed)); // also the unembedding (tied)
        out.push(("pos_embed".to_string(), &self.pos_embed));
        for (l, layer) in self.layers.iter().enumerate() {
            let fields: [(&str, &Tensor<T>); 16] = [
                ("ln1_gain", &layer.ln1_gain),
                ("ln1_bias", &layer.ln1_bias),
                ("wq", &layer.wq),
                ("bq", &layer.bq),
                ("wk", &layer.wk),
                ("bk", &layer.bk),
                ("wv", &layer.wv),
                ("bv", &layer.bv),
                ("wo", &layer.wo),
                ("bo", &layer.bo),
                ("ln2_gain", &layer.ln2_gain),
                ("ln2_bias", &layer.ln2_bias),
                ("w1", &layer.w1),
                ("b1", &layer.b1),
                ("w2", &layer.w2),
                ("b2", &layer.b2),
            ];
            for (name, t) in fields {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out.push(("final_gain".to_string(), &self.final_gain));
        out.push(("final_bias".to_string(), &self.final_bias));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::with_capacity(2 + self.layers.len() * 16 + 2);
        out.push(("tok_embed".to_string(), &mut self.tok_embed));
        out.push(("pos_embed".to_string(), &mut self.pos_embed));
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let fields: [(&str, &mut Tensor<T>); 16] = [
                ("ln1_gain", &mut layer.ln1_gain),
                ("ln1_bias", &mut layer.ln1_bias),
                ("wq", &mut layer.wq),
                ("bq", &mut layer.bq),
                ("wk", &mut layer.wk),
                ("bk", &mut layer.bk),
                ("wv", &mut layer.wv),
                ("bv", &mut layer.bv),
                ("wo", &mut layer.wo),
                ("bo", &mut layer.bo),
                ("ln2_gain", &mut layer.ln2_gain),
                ("ln2_bias", &mut layer.ln2_bias),
                ("w1", &mut layer.w1),
                ("b1", &mut layer.b1),
                ("w2", &mut layer.w2),
                ("b2", &mut layer.b2),
            ];
            for (name, t) in fields {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out.push(("final_gain".to_string(), &mut self.final_gain));
        out.push(("final_bias".to_string(), &mut self.final_bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Logits (and optionally the layer/head-averaged attention map) of one
/// forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    pub attention_avg: Option<Tensor<T>>,
}

/// A forward pass together with its tape, for building losses on top.
pub struct ForwardPass<T> {
    pub tape: Tape<T>,
    pub logits: Var,
    pub attention_avg: Option<Tensor<T>>,
    /// Leaf variables aligned with `Model::named_params` order; present only
    /// when the pass records gradients.
    pub param_vars: Vec<Var>,
}

/// Full forward pass. `record_grad` builds the tape for backward;
/// `capture_attention` accumulates post-softmax attention averaged over all
/// layers and heads. The mask must cover the sequence and leave every
/// position able to attend to itself.
pub fn forward_pass<T: Scalar>(
    model: &Model<T>,
    seq: &Sequence,
    mask: &MaskMatrix,
    capture_attention: bool,
    record_grad: bool,
) -> Result<ForwardPass<T>> {
    let n = seq.len();
    if n == 0 {
        return Err(CoreError::Precondition("empty sequence".into()));
    }
    if n > model.config.max_seq_len {
        return Err(CoreError::Capacity(format!(
            "sequence length {n} exceeds max_seq_len {}",
            model.config.max_seq_len
        )));
    }
    if mask.size() != n {
        return Err(CoreError::Dimension {
            context: "attention mask".into(),
            left: vec![mask.size(), mask.size()],
            right: vec![n, n],
        });
    }
    for i in 0..n {
        if mask.is_blocked(i, i) {
            return Err(CoreError::Precondition(format!(
                "mask blocks position {i} from attending to itself"
            )));
        }
    }
    if let Some(&bad) = seq
        .token_ids
        .iter()
        .find(|&&t| t as usize >= model.config.vocab_size)
    {
        return Err(CoreError::Range(format!(
            "token id {bad} out of vocab {}",
            model.config.vocab_size
        )));
    }

    let cfg = &model.config;
    let mut tape: Tape<T> = Tape::new(record_grad);

    // leaf parameters in canonical order
    let named = model.named_params();
    let param_vars: Vec<Var> = named
        .iter()
        .map(|(_, t)| tape.leaf((*t).clone(), record_grad))
        .collect();
    // canonical index helpers
    let tok = param_vars[0];
    let pos = param_vars[1];
    let layer_var = |l: usize, field: usize| param_vars[2 + l * 16 + field];
    let final_gain = param_vars[2 + cfg.n_layers * 16];
    let final_bias = param_vars[2 + cfg.n_layers * 16 + 1];

    let ids: Vec<usize> = seq.token_ids.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..n).collect();
    let tok_x = tape.gather(tok, &ids)?;
    let pos_x = tape.select_rows(pos, &positions)?;
    let mut x = tape.add(tok_x, pos_x)?;

    let blocked = mask.blocked_flags();
    let eps = T::of(LN_EPS);
    let dh = cfg.head_dim();
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut attn_accum: Option<Vec<T>> = if capture_attention {
        Some(vec![T::zero(); n * n])
    } else {
        None
    };

    const LN1_G: usize = 0;
    const LN1_B: usize = 1;
    const WQ: usize = 2;
    const BQ: usize = 3;
    const WK: usize = 4;
    const BK: usize = 5;
    const WV: usize = 6;
    const BV: usize = 7;
    const WO: usize = 8;
    const BO: usize = 9;
    const LN2_G: usize = 10;
    const LN2_B: usize = 11;
    const W1: usize = 12;
    const B1: usize = 13;
    const W2: usize = 14;
    const B2: usize = 15;

    for l in 0..cfg.n_layers {
        let h = tape.layer_norm(x, layer_var(l, LN1_G), layer_var(l, LN1_B), eps)?;
        let q = tape.matmul(h, layer_var(l, WQ))?;
        let q = tape.add_row(q, layer_var(l, BQ))?;
        let k = tape.matmul(h, layer_var(l, WK))?;
        let k = tape.add_row(k, layer_var(l, BK))?;
        let v = tape.matmul(h, layer_var(l, WV))?;
        let v = tape.add_row(v, layer_var(l, BV))?;

        let mut head_ctx = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let (s, e) = (hd * dh, (hd + 1) * dh);
            let qh = tape.slice_cols(q, s, e)?;
            let kh = tape.slice_cols(k, s, e)?;
            let vh = tape.slice_cols(v, s, e)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let probs = tape.softmax_rows(scores, Some(Rc::clone(&blocked)))?;
            if let Some(acc) = attn_accum.as_mut() {
                for (a, &p) in acc.iter_mut().zip(tape.value(probs).data()) {
                    *a += p;
                }
            }
            head_ctx.push(tape.matmul(probs, vh)?);
        }
        let ctx = tape.concat_cols(&head_ctx)?;
        let attn_out = tape.matmul(ctx, layer_var(l, WO))?;
        let attn_out = tape.add_row(attn_out, layer_var(l, BO))?;
        x = tape.add(x, attn_out)?;

        let h2 = tape.layer_norm(x, layer_var(l, LN2_G), layer_var(l, LN2_B), eps)?;
        let f1 = tape.matmul(h2, layer_var(l, W1))?;
        let f1 = tape.add_row(f1, layer_var(l, B1))?;
        let act = tape.squared_relu(f1);
        let f2 = tape.matmul(act, layer_var(l, W2))?;
        let f2 = tape.add_row(f2, layer_var(l, B2))?;
        x = tape.add(x, f2)?;
    }

    let xf = tape.layer_norm(x, final_gain, final_bias, eps)?;
    let logits = tape.matmul_nt(xf, tok)?;

    let attention_avg = attn_accum.map(|acc| {
        let denom = T::of((cfg.n_layers * cfg.n_heads) as f64);
        let data = acc.into_iter().map(|v| v / denom).collect();
        Tensor::new(vec![n, n], data).expect("square")
    });

    Ok(ForwardPass {
        tape,
        logits,
        attention_avg,
        param_vars: if record_grad { param_vars } else { Vec::new() },
    })
}

/// No-grad forward returning plain values.
pub fn forward<T: Scalar>(
    model: &Model<T>,
    seq: &Sequence,
    mask: &MaskMatrix,
    capture_attention: bool,
) -> Result<ForwardOutput<T>> {
    let pass = forward_pass(model, seq, mask, capture_attention, false)?;
    Ok(ForwardOutput {
        logits: pass.tape.value(pass.logits).clone(),
        attention_avg: pass.attention_avg,
    })
}

/// Restriction of the averaged attention map to response rows × response
/// columns: row n, columns < n hold the attention over the textual prefixes.
pub fn extract_response_attention<T: Scalar>(
    output: &ForwardOutput<T>,
    layout: &SegmentLayout,
) -> Result<Tensor<T>> {
    let Some(avg) = &output.attention_avg else {
        return Err(CoreError::Precondition(
            "attention_avg was not captured".into(),
        ));
    };
    layout.validate(avg.rows(), true)?;
    let (rs, re) = layout.response;
    let n = re - rs;
    let mut out = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..n {
            out.data_mut()[i * n + j] = avg.at(rs + i, rs + j);
        }
    }
    Ok(out)
}

/// Greedy decoding under the causal mask until `stop_token` or `max_new`.
/// Returns only the generated tokens (including the stop token if reached).
pub fn generate<T: Scalar>(
    model: &Model<T>,
    prompt: &Sequence,
    max_new: usize,
    stop_token: Option<u32>,
) -> Result<Vec<u32>> {
    if prompt.len() + max_new > model.config.max_seq_len {
        return Err(CoreError::Capacity(format!(
            "prompt {} + max_new {max_new} exceeds max_seq_len {}",
            prompt.len(),
            model.config.max_seq_len
        )));
    }
    let mut tokens = prompt.token_ids.clone();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let n = tokens.len();
        let layout = SegmentLayout::new(n, 0, 0);
        let seq = Sequence {
            token_ids: tokens.clone(),
            layout,
        };
        let mask = MaskMatrix::causal(n);
        let pass = forward_pass(model, &seq, &mask, false, false)?;
        let logits = pass.tape.value(pass.logits);
        let last = logits.row(n - 1);
        let mut best = 0usize;
        for (j, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = j;
            }
        }
        let tok = best as u32;
        tokens.push(tok);
        out.push(tok);
        if Some(tok) == stop_token {
            break;
        }
    }
    Ok(out)
}
