//! Projection heads into the shared space, cosine similarity and the
//! InfoNCE contrastive loss with a learnable log-temperature.

use rand::Rng;

use crate::tensor::nn::FeedForwardWeights;
use crate::tensor::{ParamKind, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 100.0;
/// Projected vectors with an L2 norm below this are rejected.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentConfig {
    pub d_scene: usize,
    pub d_text: usize,
    pub d_hidden: usize,
    pub d_shared: usize,
    pub symmetric: bool,
}

pub fn init_params<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &AlignmentConfig, rng: &mut R) {
    let k = ParamKind::Trainable { decay: true };
    FeedForwardWeights::init(store, "align.head_v", cfg.d_scene, cfg.d_hidden, cfg.d_shared, k, rng);
    FeedForwardWeights::init(store, "align.head_t", cfg.d_text, cfg.d_hidden, cfg.d_shared, k, rng);
    store.insert_trainable("align.log_tau", Tensor::new(&[1], vec![TAU_INIT.ln()]).unwrap(), false);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Scene,
    Text,
}

impl Head {
    fn prefix(self) -> &'static str {
        match self {
            Head::Scene => "align.head_v",
            Head::Text => "align.head_t",
        }
    }
}

/// Applies a head to `[n, d]` rows and L2-normalizes each projected row.
pub fn project_and_normalize(tape: &mut Tape, store: &ParamStore, head: Head, x: Var) -> Result<Var> {
    let w = FeedForwardWeights::bind(tape, store, head.prefix())?;
    let y = w.apply(tape, x)?;
    normalize_checked(tape, y)
}

/// Row-wise L2 normalization that refuses (near-)zero rows.
pub fn normalize_checked(tape: &mut Tape, y: Var) -> Result<Var> {
    let d = tape.shape(y)[tape.shape(y).len() - 1];
    for (i, row) in tape.data(y).chunks(d).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm >= MIN_NORM) {
            return Err(Error::Degenerate(format!("projected row {i} has norm {norm:e}")));
        }
    }
    Ok(tape.l2_normalize_rows(y))
}

/// `exp(clamp(log τ))` as a `[1]` node.
pub fn temperature(tape: &mut Tape, log_tau: Var) -> Var {
    let c = tape.clamp(log_tau, TAU_MIN.ln(), TAU_MAX.ln());
    tape.exp(c)
}

/// Mean over scenes `i` of `-log softmax_j(s_i·t_j / τ)[i]`. With
/// `symmetric`, the text→scene direction is averaged in.
pub fn info_nce(tape: &mut Tape, scene: Var, text: Var, tau: Var, symmetric: bool) -> Result<Var> {
    let n = tape.shape(scene)[0];
    if n == 0 {
        return Err(Error::Argument("InfoNCE needs at least one pair".into()));
    }
    if tape.shape(text)[0] != n {
        return Err(Error::Argument(format!(
            "{n} scene rows but {} text rows",
            tape.shape(text)[0]
        )));
    }
    let tt = tape.transpose(text)?;
    let sims = tape.matmul(scene, tt)?;
    let log_t = tape.log(tau);
    let neg = tape.scale(log_t, -1.0);
    let inv_tau = tape.exp(neg);
    let logits = tape.mul_scalar(sims, inv_tau)?;
    let diag: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    let row = {
        let ls = tape.log_softmax(logits, 1)?;
        let d = tape.pick(ls, &diag)?;
        tape.mean(d)
    };
    let total = if symmetric {
        let ls = tape.log_softmax(logits, 0)?;
        let d = tape.pick(ls, &diag)?;
        let col = tape.mean(d);
        let both = tape.add(row, col)?;
        tape.scale(both, 0.5)
    } else {
        row
    };
    Ok(tape.scale(total, -1.0))
}

/// Dot product of two unit vectors.
pub fn similarity(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// InfoNCE on plain unit-vector rows and a fixed τ.
pub fn info_nce_value(scene: &[Vec<f64>], text: &[Vec<f64>], tau: f64, symmetric: bool) -> Result<f64> {
    if scene.is_empty() {
        return Err(Error::Argument("InfoNCE needs at least one pair".into()));
    }
    let mut t = Tape::inference();
    let s = t.constant(&Tensor::from_rows(scene)?);
    let x = t.constant(&Tensor::from_rows(text)?);
    let tau = t.constant(&Tensor::scalar(tau));
    let l = info_nce(&mut t, s, x, tau, symmetric)?;
    Ok(t.item(l))
}
