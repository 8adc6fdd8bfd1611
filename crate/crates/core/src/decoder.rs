//! Autoregressive caption decoder: causal self-attention over the prefix,
//! cross-attention into the scene token grid, the captioning cross-entropy
//! and decoding strategies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::nn::{self, AttentionWeights, FeedForwardWeights, LayerNormWeights};
use crate::tensor::{ParamKind, ParamStore, Tape, Tensor, Var};
use crate::text_encoder::{BOS, CLS, EOS, PAD};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    /// Width of the scene token grid.
    pub d_memory: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Longest sequence including `<bos>` and `<eos>`.
    pub max_len: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "decoder d_model {} is not n_heads·d_k for n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossReduction {
    Mean,
    Sum,
}

impl std::str::FromStr for LossReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(LossReduction::Mean),
            "sum" => Ok(LossReduction::Sum),
            other => Err(Error::Config(format!("loss_reduction must be `mean` or `sum`, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for LossReduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossReduction::Mean => "mean",
            LossReduction::Sum => "sum",
        })
    }
}

pub fn init_params<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &DecoderConfig, rng: &mut R) {
    let k = ParamKind::Trainable { decay: true };
    let d = cfg.d_model;
    store.insert_trainable("dec.embed", Tensor::randn(&[cfg.vocab_size, d], 1.0, rng), false);
    store.insert_trainable("dec.pos", Tensor::randn(&[cfg.max_len, d], 0.1, rng), false);
    for i in 0..cfg.n_layers {
        let p = format!("dec.layer{i}");
        LayerNormWeights::init(store, &format!("{p}.ln1"), d, k);
        AttentionWeights::init(store, &format!("{p}.self_attn"), d, d, k, rng);
        LayerNormWeights::init(store, &format!("{p}.ln2"), d, k);
        AttentionWeights::init(store, &format!("{p}.cross_attn"), d, cfg.d_memory, k, rng);
        LayerNormWeights::init(store, &format!("{p}.ln3"), d, k);
        FeedForwardWeights::init(store, &format!("{p}.ffn"), d, 4 * d, d, k, rng);
    }
    LayerNormWeights::init(store, "dec.ln_f", d, k);
    store.init_linear("dec.out_proj", d, cfg.vocab_size, 1.0, k, rng);
    store.insert_trainable("dec.out_b", Tensor::zeros(&[cfg.vocab_size]), false);
}

/// Multi-head `softmax(Q Kᵀ / √d_k) V` of decoder states over scene tokens.
pub fn cross_attention(tape: &mut Tape, queries: Var, grid: Var, w: &AttentionWeights, n_heads: usize) -> Result<Var> {
    Ok(nn::multi_head_attention(tape, queries, grid, w, n_heads, None)?)
}

/// Logits `[L, V]` for every prefix position; row `t` predicts token `t+1`.
pub fn decoder_forward(tape: &mut Tape, store: &ParamStore, cfg: &DecoderConfig, prefix: &[usize], grid: Var) -> Result<Var> {
    let len = prefix.len();
    if len == 0 || len >= cfg.max_len {
        return Err(Error::Length(format!("prefix length {len} must be in 1..{}", cfg.max_len)));
    }
    if let Some(&bad) = prefix.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::Encoding(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    let embed = tape.param(store, "dec.embed")?;
    let pos = tape.param(store, "dec.pos")?;
    let x = tape.gather_rows(embed, prefix)?;
    let p = tape.slice_rows(pos, 0, len)?;
    let mut x = tape.add(x, p)?;
    let mask = tape.constant(&nn::causal_mask(len));
    for i in 0..cfg.n_layers {
        let pre = format!("dec.layer{i}");
        let ln1 = LayerNormWeights::bind(tape, store, &format!("{pre}.ln1"))?;
        let sa = AttentionWeights::bind(tape, store, &format!("{pre}.self_attn"))?;
        let ln2 = LayerNormWeights::bind(tape, store, &format!("{pre}.ln2"))?;
        let ca = AttentionWeights::bind(tape, store, &format!("{pre}.cross_attn"))?;
        let ln3 = LayerNormWeights::bind(tape, store, &format!("{pre}.ln3"))?;
        let ffn = FeedForwardWeights::bind(tape, store, &format!("{pre}.ffn"))?;

        let h = ln1.apply(tape, x)?;
        let a = nn::multi_head_attention(tape, h, h, &sa, cfg.n_heads, Some(mask))?;
        x = tape.add(x, a)?;
        let h = ln2.apply(tape, x)?;
        let c = cross_attention(tape, h, grid, &ca, cfg.n_heads)?;
        x = tape.add(x, c)?;
        let h = ln3.apply(tape, x)?;
        let f = ffn.apply(tape, h)?;
        x = tape.add(x, f)?;
    }
    let ln_f = LayerNormWeights::bind(tape, store, "dec.ln_f")?;
    let h = ln_f.apply(tape, x)?;
    let w = tape.param(store, "dec.out_proj")?;
    let b = tape.param(store, "dec.out_b")?;
    Ok(nn::linear(tape, h, w, Some(b))?)
}

/// Teacher-forcing input `[<bos>, y…]` and target `[y…, <eos>]`.
pub fn shift_targets(ids: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let input = std::iter::once(BOS).chain(ids.iter().copied()).collect();
    let target = ids.iter().copied().chain(std::iter::once(EOS)).collect();
    (input, target)
}

/// Cross-entropy of `targets` under `logits` rows, skipping `<pad>`.
pub fn caption_loss(tape: &mut Tape, logits: Var, targets: &[usize], reduction: LossReduction) -> Result<Var> {
    let (rows, v) = (tape.shape(logits)[0], tape.shape(logits)[1]);
    if targets.len() > rows {
        return Err(Error::Length(format!("{} targets for {rows} logit rows", targets.len())));
    }
    let idx: Vec<usize> = targets
        .iter()
        .enumerate()
        .filter(|(_, &y)| y != PAD)
        .map(|(t, &y)| t * v + y)
        .collect();
    if idx.is_empty() {
        return Err(Error::Argument("target has no non-pad positions".into()));
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
        return Err(Error::Encoding(format!("target id {bad} outside vocabulary of {v}")));
    }
    let ls = tape.log_softmax(logits, 1)?;
    let picked = tape.pick(ls, &idx)?;
    let nll = match reduction {
        LossReduction::Mean => tape.mean(picked),
        LossReduction::Sum => tape.sum(picked),
    };
    Ok(tape.scale(nll, -1.0))
}

/// Loss of one caption given the scene grid, on a fresh or shared tape.
pub fn caption_loss_for(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &DecoderConfig,
    ids: &[usize],
    grid: Var,
    reduction: LossReduction,
) -> Result<Var> {
    let (input, target) = shift_targets(ids);
    let logits = decoder_forward(tape, store, cfg, &input, grid)?;
    caption_loss(tape, logits, &target, reduction)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeStrategy {
    Greedy,
    Beam { width: usize },
    Stochastic { temperature: f64, top_k: usize, seed: u64 },
    Nucleus { temperature: f64, top_p: f64, seed: u64 },
}

impl DecodeStrategy {
    pub const DEFAULT_TEMPERATURE: f64 = 1.0;
    pub const DEFAULT_TOP_K: usize = 20;

    pub fn stochastic(seed: u64) -> Self {
        DecodeStrategy::Stochastic {
            temperature: Self::DEFAULT_TEMPERATURE,
            top_k: Self::DEFAULT_TOP_K,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            DecodeStrategy::Greedy => true,
            DecodeStrategy::Beam { width } => width >= 1,
            DecodeStrategy::Stochastic { temperature, top_k, .. } => temperature > 0.0 && top_k >= 1,
            DecodeStrategy::Nucleus { temperature, top_p, .. } => temperature > 0.0 && top_p > 0.0 && top_p <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Argument(format!("invalid decode parameters {self:?}")))
        }
    }
}

/// Decoded token ids (no specials) and the model log-probability of each
/// emitted token, including the final `<eos>` when one was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub ids: Vec<usize>,
    pub logprobs: Vec<f64>,
}

impl Generation {
    pub fn total_logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

/// Per-candidate RNG: one ChaCha stream per `(seed, index)`.
pub fn candidate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn next_token_log_probs(store: &ParamStore, cfg: &DecoderConfig, grid: &Tensor, prefix: &[usize]) -> Result<Vec<f64>> {
    let mut tape = Tape::inference();
    let g = tape.constant(grid);
    let logits = decoder_forward(&mut tape, store, cfg, prefix, g)?;
    let v = cfg.vocab_size;
    let last = tape.slice_rows(logits, prefix.len() - 1, 1)?;
    let mut row = tape.data(last).to_vec();
    // Tokens that can never be a target.
    for s in [PAD, BOS, CLS] {
        if s < v {
            row[s] = f64::NEG_INFINITY;
        }
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    Ok(row.into_iter().map(|x| x - lse).collect())
}

/// Indices sorted by descending score, lower index first on ties.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn sample_from<R: Rng>(logp: &[f64], keep: &[usize], temperature: f64, rng: &mut R) -> usize {
    let scaled: Vec<f64> = keep.iter().map(|&i| logp[i] / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (j, wj) in w.iter().enumerate() {
        if u < *wj {
            return keep[j];
        }
        u -= wj;
    }
    keep[w.iter().rposition(|&x| x > 0.0).unwrap_or(0)]
}

/// Generates one caption from `<bos>` until `<eos>` or `max_len`.
///
/// Sampling strategies draw from the stream [`candidate_rng`]`(seed, stream)`.
pub fn decode(store: &ParamStore, cfg: &DecoderConfig, grid: &Tensor, strategy: DecodeStrategy, stream: u64) -> Result<Generation> {
    strategy.validate()?;
    if let DecodeStrategy::Beam { width } = strategy {
        return beam_search(store, cfg, grid, width);
    }
    let mut rng = match strategy {
        DecodeStrategy::Stochastic { seed, .. } | DecodeStrategy::Nucleus { seed, .. } => Some(candidate_rng(seed, stream)),
        _ => None,
    };
    let mut prefix = vec![BOS];
    let mut logprobs = Vec::new();
    while prefix.len() < cfg.max_len {
        let logp = next_token_log_probs(store, cfg, grid, &prefix)?;
        let order = ranked(&logp);
        let tok = match strategy {
            DecodeStrategy::Stochastic { temperature, top_k, .. } => {
                let keep = &order[..top_k.min(order.len())];
                sample_from(&logp, keep, temperature, rng.as_mut().unwrap())
            }
            DecodeStrategy::Nucleus { temperature, top_p, .. } => {
                let mut mass = 0.0;
                let mut n = 0;
                for &i in &order {
                    n += 1;
                    mass += logp[i].exp();
                    if mass >= top_p {
                        break;
                    }
                }
                sample_from(&logp, &order[..n], temperature, rng.as_mut().unwrap())
            }
            _ => order[0],
        };
        logprobs.push(logp[tok]);
        if tok == EOS {
            break;
        }
        prefix.push(tok);
    }
    Ok(Generation {
        ids: prefix[1..].to_vec(),
        logprobs,
    })
}

fn beam_search(store: &ParamStore, cfg: &DecoderConfig, grid: &Tensor, width: usize) -> Result<Generation> {
    struct Beam {
        prefix: Vec<usize>,
        logprobs: Vec<f64>,
        score: f64,
        done: bool,
    }
    let mut beams = vec![Beam {
        prefix: vec![BOS],
        logprobs: vec![],
        score: 0.0,
        done: false,
    }];
    while beams.iter().any(|b| !b.done) {
        let mut next = Vec::new();
        for b in beams {
            if b.done || b.prefix.len() >= cfg.max_len {
                next.push(Beam { done: true, ..b });
                continue;
            }
            let logp = next_token_log_probs(store, cfg, grid, &b.prefix)?;
            for &tok in ranked(&logp).iter().take(width) {
                let mut prefix = b.prefix.clone();
                let mut lps = b.logprobs.clone();
                lps.push(logp[tok]);
                let done = tok == EOS;
                if !done {
                    prefix.push(tok);
                }
                next.push(Beam {
                    prefix,
                    logprobs: lps,
                    score: b.score + logp[tok],
                    done,
                });
            }
        }
        // Stable sort keeps expansion order on equal scores.
        next.sort_by(|a, b| b.score.total_cmp(&a.score));
        next.truncate(width);
        beams = next;
    }
    let best = beams.into_iter().next().expect("beam width ≥ 1");
    Ok(Generation {
        ids: best.prefix[1..].to_vec(),
        logprobs: best.logprobs,
    })
}
