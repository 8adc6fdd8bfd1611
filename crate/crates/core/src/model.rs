//! The full captioner: architecture config, vocabulary and parameters,
//! plus on-disk layout (`model.ckpt`, `vocab.txt`, `model.cfg` side by side).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{self, AlignmentConfig, Head};
use crate::decoder::{self, DecoderConfig};
use crate::pointcloud::PointCloud;
use crate::scene_encoder::{self, Pooling, SceneEncoderConfig};
use crate::tensor::{Checkpoint, ParamStore, Tape, Tensor};
use crate::text_encoder::{self, TextEncoderConfig, Vocabulary};
use crate::{Error, Result};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const MODEL_CONFIG_FILE: &str = "model.cfg";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub m_patches: usize,
    pub k_neighbors: usize,
    pub d_patch_hidden: usize,
    pub d_patch: usize,
    pub d_model: usize,
    pub m_task: usize,
    pub n_heads: usize,
    pub scene_layers: usize,
    pub text_layers: usize,
    pub decoder_layers: usize,
    pub d_shared: usize,
    pub d_align_hidden: usize,
    pub max_len: usize,
    pub pooling: Pooling,
    pub symmetric: bool,
    pub init_seed: u64,
    pub freeze_seed: u64,
    pub fps_seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            feature_dim: 3,
            m_patches: 64,
            k_neighbors: 16,
            d_patch_hidden: 64,
            d_patch: 64,
            d_model: 64,
            m_task: 4,
            n_heads: 4,
            scene_layers: 2,
            text_layers: 2,
            decoder_layers: 2,
            d_shared: 64,
            d_align_hidden: 64,
            max_len: 24,
            pooling: Pooling::MeanTask,
            symmetric: false,
            init_seed: 0,
            freeze_seed: 1234,
            fps_seed: 0,
        }
    }
}

macro_rules! kv_fields {
    ($($field:ident),* $(,)?) => {
        const KV_KEYS: &[&str] = &[$(stringify!($field),)* "pooling", "symmetric"];

        impl ModelConfig {
            pub fn to_kv(&self) -> BTreeMap<String, String> {
                let mut m = BTreeMap::new();
                $(m.insert(stringify!($field).to_string(), self.$field.to_string());)*
                m.insert("pooling".into(), match self.pooling {
                    Pooling::MeanTask => "mean_task".into(),
                    Pooling::FirstTask => "first_task".into(),
                });
                m.insert("symmetric".into(), self.symmetric.to_string());
                m
            }

            /// Overrides defaults with the given entries; unknown keys are errors.
            pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
                let mut c = Self::default();
                for (k, v) in kv {
                    let bad = || Error::Config(format!("invalid value `{v}` for key `{k}`"));
                    match k.as_str() {
                        $(stringify!($field) => c.$field = v.parse().map_err(|_| bad())?,)*
                        "pooling" => c.pooling = v.parse()?,
                        "symmetric" => c.symmetric = v.parse().map_err(|_| bad())?,
                        _ => return Err(Error::Config(format!("unknown key `{k}`"))),
                    }
                }
                Ok(c)
            }
        }
    };
}

kv_fields!(
    feature_dim, m_patches, k_neighbors, d_patch_hidden, d_patch, d_model, m_task, n_heads,
    scene_layers, text_layers, decoder_layers, d_shared, d_align_hidden, max_len, init_seed,
    freeze_seed, fps_seed,
);

impl ModelConfig {
    pub fn is_key(key: &str) -> bool {
        KV_KEYS.contains(&key)
    }

    pub fn scene(&self) -> SceneEncoderConfig {
        SceneEncoderConfig {
            feature_dim: self.feature_dim,
            m_patches: self.m_patches,
            k_neighbors: self.k_neighbors,
            d_hidden: self.d_patch_hidden,
            d_patch: self.d_patch,
            d_model: self.d_model,
            m_task: self.m_task,
            n_layers: self.scene_layers,
            n_heads: self.n_heads,
            freeze_seed: self.freeze_seed,
            fps_seed: self.fps_seed,
            pooling: self.pooling,
        }
    }

    pub fn text(&self, vocab_size: usize) -> TextEncoderConfig {
        TextEncoderConfig {
            vocab_size,
            d_text: self.d_model,
            n_layers: self.text_layers,
            n_heads: self.n_heads,
            // Distinct stream from the scene tower.
            freeze_seed: self.freeze_seed.wrapping_add(1),
        }
    }

    pub fn alignment(&self) -> AlignmentConfig {
        AlignmentConfig {
            d_scene: self.d_model,
            d_text: self.d_model,
            d_hidden: self.d_align_hidden,
            d_shared: self.d_shared,
            symmetric: self.symmetric,
        }
    }

    pub fn decoder(&self, vocab_size: usize) -> DecoderConfig {
        DecoderConfig {
            vocab_size,
            d_model: self.d_model,
            d_memory: self.d_model,
            n_layers: self.decoder_layers,
            n_heads: self.n_heads,
            max_len: self.max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene().validate()?;
        self.decoder(6).validate()?;
        if self.d_shared == 0 {
            return Err(Error::Config("d_shared must be positive".into()));
        }
        Ok(())
    }
}

/// Renders `key = value` lines in key order.
pub fn render_kv(kv: &BTreeMap<String, String>) -> String {
    kv.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Parses `key = value` lines; `#` starts a comment; duplicate keys are errors.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("duplicate key `{k}`")));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
}

impl Model {
    /// Trainable weights from `init_seed`; frozen towers from `freeze_seed`.
    pub fn new(config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let v = vocab.len();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        scene_encoder::init_params(&mut store, &config.scene(), &mut rng);
        text_encoder::init_params(&mut store, &config.text(v), &mut rng);
        alignment::init_params(&mut store, &config.alignment(), &mut rng);
        decoder::init_params(&mut store, &config.decoder(v), &mut rng);
        Ok(Self { config, vocab, store })
    }

    pub fn scene_config(&self) -> SceneEncoderConfig {
        self.config.scene()
    }

    pub fn text_config(&self) -> TextEncoderConfig {
        self.config.text(self.vocab.len())
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        self.config.decoder(self.vocab.len())
    }

    /// Scene token grid plus its unit vector in the shared space.
    pub fn embed_scene(&self, cloud: &PointCloud) -> Result<(Tensor, Vec<f64>)> {
        let cfg = self.scene_config();
        let patches = scene_encoder::tokenize_scene(cloud, &cfg)?;
        let mut tape = Tape::inference();
        let v = scene_encoder::encode_scene(&mut tape, &self.store, &cfg, &patches)?;
        let u = alignment::project_and_normalize(&mut tape, &self.store, Head::Scene, v.f_enc)?;
        Ok((tape.value(v.grid), tape.data(u).to_vec()))
    }

    /// Unit vector of a text in the shared space.
    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let ids = self.vocab.encode(text).ids;
        let mut tape = Tape::inference();
        let f = text_encoder::encode_text(&mut tape, &self.store, &self.text_config(), &ids)?;
        let u = alignment::project_and_normalize(&mut tape, &self.store, Head::Text, f)?;
        Ok(tape.data(u).to_vec())
    }

    pub fn checksum(&self) -> u64 {
        self.store.checksum()
    }

    /// Writes the checkpoint, vocabulary and architecture into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ckpt = dir.join(CHECKPOINT_FILE);
        Checkpoint::from_store(&self.store).save(&ckpt)?;
        let vocab = dir.join(VOCAB_FILE);
        self.vocab.save(&vocab)?;
        let cfg = dir.join(MODEL_CONFIG_FILE);
        std::fs::write(&cfg, render_kv(&self.config.to_kv())).map_err(|e| Error::io(&cfg, e))?;
        Ok(vec![ckpt, vocab, cfg])
    }

    /// Loads a checkpoint; vocabulary and architecture are read from the
    /// checkpoint's directory.
    pub fn load(checkpoint: &Path) -> Result<Self> {
        let dir = checkpoint.parent().unwrap_or(Path::new("."));
        let cfg_path = dir.join(MODEL_CONFIG_FILE);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config = ModelConfig::from_kv(&parse_kv(&text)?)?;
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let mut model = Self::new(config, vocab)?;
        Checkpoint::load(checkpoint)?.apply_to(&mut model.store)?;
        Ok(model)
    }
}
