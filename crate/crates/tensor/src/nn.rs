//! Transformer building blocks on top of [`Tape`].
//!
//! Parameters are addressed by dotted names under a caller-chosen prefix,
//! e.g. `scene.frozen.layer0.attn.wq`.

use rand::Rng;

use crate::{ParamKind, ParamStore, Result, Tape, Tensor, TensorError, Var};

pub const LN_EPS: f64 = 1e-5;

/// `x · w (+ b)`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

/// Additive mask with `-inf` strictly above the diagonal.
pub fn causal_mask(len: usize) -> Tensor {
    let mut m = Tensor::zeros(&[len, len]);
    for i in 0..len {
        for j in i + 1..len {
            m.data_mut()[i * len + j] = f64::NEG_INFINITY;
        }
    }
    m
}

/// Scaled dot-product attention `softmax(q kᵀ / √d_k) v` for one head.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
    let d_k = tape.shape(q)[1];
    if tape.shape(k)[1] != d_k {
        return Err(TensorError::Shape {
            op: "attention",
            lhs: tape.shape(q).to_vec(),
            rhs: tape.shape(k).to_vec(),
        });
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let mut scores = tape.scale(scores, 1.0 / (d_k as f64).sqrt());
    if let Some(m) = mask {
        scores = tape.add(scores, m)?;
    }
    let weights = tape.softmax(scores, 1)?;
    tape.matmul(weights, v)
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

impl AttentionWeights {
    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            wq: tape.param(store, &format!("{prefix}.wq"))?,
            wk: tape.param(store, &format!("{prefix}.wk"))?,
            wv: tape.param(store, &format!("{prefix}.wv"))?,
            wo: tape.param(store, &format!("{prefix}.wo"))?,
        })
    }

    /// `wk`/`wv` map from `d_kv` (the memory width) to `d_model`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        d_kv: usize,
        kind: ParamKind,
        rng: &mut R,
    ) {
        store.init_linear(format!("{prefix}.wq"), d_model, d_model, 1.0, kind, rng);
        store.init_linear(format!("{prefix}.wk"), d_kv, d_model, 1.0, kind, rng);
        store.init_linear(format!("{prefix}.wv"), d_kv, d_model, 1.0, kind, rng);
        store.init_linear(format!("{prefix}.wo"), d_model, d_model, 0.5, kind, rng);
    }
}

/// Multi-head attention of `queries` over `memory`. Each head applies
/// [`attention`] to its `d_model / n_heads` column slice; heads are
/// concatenated and mixed by `wo`.
pub fn multi_head_attention(
    tape: &mut Tape,
    queries: Var,
    memory: Var,
    w: &AttentionWeights,
    n_heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let q = tape.matmul(queries, w.wq)?;
    let k = tape.matmul(memory, w.wk)?;
    let v = tape.matmul(memory, w.wv)?;
    let d_model = tape.shape(q)[1];
    if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
        return Err(TensorError::Invalid {
            op: "multi_head_attention",
            msg: format!("d_model {d_model} not divisible by {n_heads} heads"),
        });
    }
    let d_k = d_model / n_heads;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * d_k, d_k)?;
        let kh = tape.slice_cols(k, h * d_k, d_k)?;
        let vh = tape.slice_cols(v, h * d_k, d_k)?;
        heads.push(attention(tape, qh, kh, vh, mask)?);
    }
    let ctx = if n_heads == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    tape.matmul(ctx, w.wo)
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormWeights {
    pub gain: Var,
    pub bias: Var,
}

impl LayerNormWeights {
    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            gain: tape.param(store, &format!("{prefix}.g"))?,
            bias: tape.param(store, &format!("{prefix}.b"))?,
        })
    }

    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, kind: ParamKind) {
        let kind = match kind {
            ParamKind::Trainable { .. } => ParamKind::Trainable { decay: false },
            k => k,
        };
        store.insert(format!("{prefix}.g"), Tensor::full(&[d], 1.0), kind);
        store.insert(format!("{prefix}.b"), Tensor::zeros(&[d]), kind);
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gain, self.bias, LN_EPS)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardWeights {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FeedForwardWeights {
    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: tape.param(store, &format!("{prefix}.w1"))?,
            b1: tape.param(store, &format!("{prefix}.b1"))?,
            w2: tape.param(store, &format!("{prefix}.w2"))?,
            b2: tape.param(store, &format!("{prefix}.b2"))?,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        kind: ParamKind,
        rng: &mut R,
    ) {
        let bias_kind = match kind {
            ParamKind::Trainable { .. } => ParamKind::Trainable { decay: false },
            k => k,
        };
        store.init_linear(format!("{prefix}.w1"), d_in, d_hidden, 1.0, kind, rng);
        store.insert(format!("{prefix}.b1"), Tensor::zeros(&[d_hidden]), bias_kind);
        store.init_linear(format!("{prefix}.w2"), d_hidden, d_out, 0.5, kind, rng);
        store.insert(format!("{prefix}.b2"), Tensor::zeros(&[d_out]), bias_kind);
    }

    /// `gelu(x w1 + b1) w2 + b2`.
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = linear(tape, x, self.w1, Some(self.b1))?;
        let h = tape.gelu(h);
        linear(tape, h, self.w2, Some(self.b2))
    }
}

/// Pre-norm encoder block: `x + attn(ln1(x))`, then `x + ffn(ln2(x))`.
#[derive(Debug, Clone, Copy)]
pub struct EncoderBlock {
    pub ln1: LayerNormWeights,
    pub attn: AttentionWeights,
    pub ln2: LayerNormWeights,
    pub ffn: FeedForwardWeights,
}

impl EncoderBlock {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        kind: ParamKind,
        rng: &mut R,
    ) {
        LayerNormWeights::init(store, &format!("{prefix}.ln1"), d_model, kind);
        AttentionWeights::init(store, &format!("{prefix}.attn"), d_model, d_model, kind, rng);
        LayerNormWeights::init(store, &format!("{prefix}.ln2"), d_model, kind);
        FeedForwardWeights::init(
            store,
            &format!("{prefix}.ffn"),
            d_model,
            4 * d_model,
            d_model,
            kind,
            rng,
        );
    }

    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            ln1: LayerNormWeights::bind(tape, store, &format!("{prefix}.ln1"))?,
            attn: AttentionWeights::bind(tape, store, &format!("{prefix}.attn"))?,
            ln2: LayerNormWeights::bind(tape, store, &format!("{prefix}.ln2"))?,
            ffn: FeedForwardWeights::bind(tape, store, &format!("{prefix}.ffn"))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, n_heads: usize, mask: Option<Var>) -> Result<Var> {
        let h = self.ln1.apply(tape, x)?;
        let a = multi_head_attention(tape, h, h, &self.attn, n_heads, mask)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.apply(tape, x)?;
        let f = self.ffn.apply(tape, h)?;
        tape.add(x, f)
    }
}
