//! Word-level vocabulary and the frozen bidirectional text transformer.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::nn::EncoderBlock;
use crate::tensor::{ParamKind, ParamStore, Tape, Tensor, Var};
use crate::text::tokenize;
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const CLS: usize = 3;
pub const UNK: usize = 4;
pub const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<cls>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    /// Non-special tokens; token `tokens[i]` has id `i + 5`.
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Ids by descending count, then token, for tokens seen at least
    /// `min_count` times.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Argument("vocabulary corpus is empty".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for tok in tokenize(line.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t).collect())
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) || SPECIALS.contains(&t.as_str()) {
                return Err(Error::Data(format!("invalid vocabulary token {t:?} on line {}", i + 1)));
            }
            if ids.insert(t.clone(), i + SPECIALS.len()).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len() + SPECIALS.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        if id < SPECIALS.len() {
            Some(SPECIALS[id])
        } else {
            self.tokens.get(id - SPECIALS.len()).map(String::as_str)
        }
    }

    pub fn encode(&self, text: &str) -> CaptionSequence {
        CaptionSequence {
            ids: tokenize(text).iter().map(|t| self.id(t)).collect(),
            text: text.to_string(),
        }
    }

    /// Space-joined rendering, skipping pad/bos/eos/cls.
    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS | CLS))
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Token ids of one caption (specials excluded) and the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionSequence {
    pub ids: Vec<usize>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub d_text: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub freeze_seed: u64,
}

pub fn init_params<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &TextEncoderConfig, rng: &mut R) {
    store.insert_trainable("text.embed", Tensor::randn(&[cfg.vocab_size, cfg.d_text], 1.0, rng), false);
    let mut frozen_rng = ChaCha8Rng::seed_from_u64(cfg.freeze_seed);
    for i in 0..cfg.n_layers {
        EncoderBlock::init(store, &format!("text.frozen.layer{i}"), cfg.d_text, ParamKind::Frozen, &mut frozen_rng);
    }
}

/// `[len, d]` sinusoidal position table.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, d]);
    for pos in 0..len {
        for i in 0..d {
            let freq = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / freq;
            t.data_mut()[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

/// `<cls>` + ids through the frozen blocks; returns the `<cls>` row `[1, D_t]`.
pub fn encode_text(tape: &mut Tape, store: &ParamStore, cfg: &TextEncoderConfig, ids: &[usize]) -> Result<Var> {
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::Encoding(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    let seq: Vec<usize> = std::iter::once(CLS).chain(ids.iter().copied()).collect();
    let embed = tape.param(store, "text.embed")?;
    let x = tape.gather_rows(embed, &seq)?;
    let pe = tape.constant(&sinusoidal_positions(seq.len(), cfg.d_text));
    let mut x = tape.add(x, pe)?;
    for i in 0..cfg.n_layers {
        let blk = EncoderBlock::bind(tape, store, &format!("text.frozen.layer{i}"))?;
        x = blk.forward(tape, x, cfg.n_heads, None)?;
    }
    Ok(tape.slice_rows(x, 0, 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_then_token_ordering() {
        let v = Vocabulary::build(&["a a b"], 1).unwrap();
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("b"), 6);
        let v = Vocabulary::build(&["a a b"], 2).unwrap();
        assert_eq!(v.id("b"), UNK);
        assert!(Vocabulary::build::<&str>(&[], 1).is_err());
    }

    #[test]
    fn ties_break_alphabetically() {
        let v = Vocabulary::build(&["zeta alpha", "Alpha zeta mid"], 1).unwrap();
        assert_eq!(v.token(5), Some("alpha"));
        assert_eq!(v.token(6), Some("zeta"));
        assert_eq!(v.token(7), Some("mid"));
    }

    #[test]
    fn render_normalizes_whitespace() {
        let v = Vocabulary::build(&["The chair."], 1).unwrap();
        let c = v.encode("  The   chair. ");
        assert_eq!(v.render(&c.ids), "the chair .");
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocabulary::build(&["red chair near a red table"], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }

    fn setup(n_layers: usize) -> (TextEncoderConfig, ParamStore) {
        let cfg = TextEncoderConfig {
            vocab_size: 9,
            d_text: 4,
            n_layers,
            n_heads: 2,
            freeze_seed: 1,
        };
        let mut s = ParamStore::new();
        init_params(&mut s, &cfg, &mut ChaCha8Rng::seed_from_u64(2));
        (cfg, s)
    }

    #[test]
    fn zero_layers_is_cls_embedding_plus_position() {
        let (cfg, s) = setup(0);
        let mut t = Tape::inference();
        let f = encode_text(&mut t, &s, &cfg, &[5, 6]).unwrap();
        let cls = s.get("text.embed").unwrap().row(CLS);
        let expect: Vec<f64> = cls.iter().zip([0.0, 1.0, 0.0, 1.0]).map(|(a, b)| a + b).collect();
        assert_eq!(t.data(f), expect.as_slice());
    }

    #[test]
    fn bidirectional_witness_and_unknown_id() {
        let (cfg, s) = setup(2);
        let mut t = Tape::inference();
        let a = encode_text(&mut t, &s, &cfg, &[5, 6]).unwrap();
        let b = encode_text(&mut t, &s, &cfg, &[5, 7]).unwrap();
        assert_ne!(t.data(a), t.data(b));
        assert!(matches!(encode_text(&mut t, &s, &cfg, &[9]), Err(Error::Encoding(_))));
    }

    #[test]
    fn only_embedding_table_gets_gradient() {
        let (cfg, s) = setup(2);
        let mut t = Tape::new();
        let f = encode_text(&mut t, &s, &cfg, &[5, 6, 7]).unwrap();
        let l = t.sum(f);
        let g = t.backward(l).unwrap();
        for (name, var) in t.bound_params() {
            assert_eq!(g.get(var).is_some(), name == "text.embed", "{name}");
        }
    }
}
