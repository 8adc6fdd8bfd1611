//! Point-patch tokenizer, learnable task tokens and a frozen transformer
//! producing the global scene embedding and the token grid the decoder
//! attends to.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pointcloud::{farthest_point_sample, knn_group, PatchSet, PointCloud};
use crate::tensor::nn::{EncoderBlock, FeedForwardWeights};
use crate::tensor::{ParamKind, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// How the global vector is read off the encoder output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    MeanTask,
    FirstTask,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_task" => Ok(Pooling::MeanTask),
            "first_task" => Ok(Pooling::FirstTask),
            other => Err(Error::Config(format!("unknown pooling `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneEncoderConfig {
    pub feature_dim: usize,
    pub m_patches: usize,
    pub k_neighbors: usize,
    /// Hidden width of the point-wise MLP.
    pub d_hidden: usize,
    pub d_patch: usize,
    pub d_model: usize,
    pub m_task: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub freeze_seed: u64,
    /// Fallback first-center seed when a cloud carries no `seed_hint`.
    pub fps_seed: u64,
    pub pooling: Pooling,
}

impl SceneEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.m_task == 0 {
            return Err(Error::Config("m_task must be at least 1".into()));
        }
        if self.m_patches == 0 || self.k_neighbors == 0 {
            return Err(Error::Config("m_patches and k_neighbors must be positive".into()));
        }
        Ok(())
    }

    pub fn point_width(&self) -> usize {
        3 + self.feature_dim
    }
}

pub fn init_params<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &SceneEncoderConfig, rng: &mut R) {
    let trainable = ParamKind::Trainable { decay: true };
    FeedForwardWeights::init(
        store,
        "scene.patch_mlp",
        cfg.point_width(),
        cfg.d_hidden,
        cfg.d_patch,
        trainable,
        rng,
    );
    if cfg.d_patch != cfg.d_model {
        store.init_linear("scene.proj", cfg.d_patch, cfg.d_model, 1.0, trainable, rng);
    }
    store.insert_trainable(
        "scene.task_tokens",
        Tensor::randn(&[cfg.m_task, cfg.d_model], 1.0, rng),
        false,
    );
    let mut frozen_rng = ChaCha8Rng::seed_from_u64(cfg.freeze_seed);
    for i in 0..cfg.n_layers {
        EncoderBlock::init(
            store,
            &format!("scene.frozen.layer{i}"),
            cfg.d_model,
            ParamKind::Frozen,
            &mut frozen_rng,
        );
    }
}

/// FPS then kNN grouping. The first center comes from the cloud's
/// `seed_hint`, else `cfg.fps_seed`.
pub fn tokenize_scene(cloud: &PointCloud, cfg: &SceneEncoderConfig) -> Result<PatchSet> {
    if cloud.feature_dim() != cfg.feature_dim {
        return Err(Error::Data(format!(
            "scene has {} feature columns, model expects {}",
            cloud.feature_dim(),
            cfg.feature_dim
        )));
    }
    let centers = farthest_point_sample(cloud, cfg.m_patches, Some(cloud.seed_hint.unwrap_or(cfg.fps_seed)))?;
    Ok(knn_group(cloud, &centers, cfg.k_neighbors)?)
}

/// Point-wise MLP over every point of every patch, max-pooled over the
/// `K` points of each patch: `[M, D_p]`.
pub fn encode_patches(tape: &mut Tape, store: &ParamStore, patches: &PatchSet) -> Result<Var> {
    let rows = patches.m_patches * patches.k_neighbors;
    let pts = Tensor::new(&[rows, patches.width], patches.patch_points.clone())?;
    let x = tape.constant(&pts);
    let mlp = FeedForwardWeights::bind(tape, store, "scene.patch_mlp")?;
    let h = mlp.apply(tape, x)?;
    Ok(tape.max_pool_groups(h, patches.k_neighbors)?)
}

/// Task tokens first, then point tokens in patch order. Point tokens go
/// through `proj` when their width differs from the task tokens'.
pub fn assemble_sequence(tape: &mut Tape, point_tokens: Var, task_tokens: Var, proj: Option<Var>) -> Result<Var> {
    let d = tape.shape(task_tokens)[1];
    let points = match proj {
        Some(p) => tape.matmul(point_tokens, p)?,
        None => point_tokens,
    };
    if tape.shape(points)[1] != d {
        return Err(Error::Config(format!(
            "point tokens have width {} but task tokens {d}, and no projection is configured",
            tape.shape(points)[1]
        )));
    }
    Ok(tape.concat_rows(&[task_tokens, points])?)
}

/// Tape handles for one encoded scene.
#[derive(Debug, Clone, Copy)]
pub struct SceneVars {
    /// `[1, D]`.
    pub f_enc: Var,
    /// `[m_t + M, D]`.
    pub grid: Var,
}

pub fn encode_scene(tape: &mut Tape, store: &ParamStore, cfg: &SceneEncoderConfig, patches: &PatchSet) -> Result<SceneVars> {
    let points = encode_patches(tape, store, patches)?;
    let task = tape.param(store, "scene.task_tokens")?;
    let proj = if store.contains("scene.proj") {
        Some(tape.param(store, "scene.proj")?)
    } else {
        None
    };
    let mut x = assemble_sequence(tape, points, task, proj)?;
    for i in 0..cfg.n_layers {
        let blk = EncoderBlock::bind(tape, store, &format!("scene.frozen.layer{i}"))?;
        x = blk.forward(tape, x, cfg.n_heads, None)?;
    }
    let f_enc = match cfg.pooling {
        Pooling::MeanTask => {
            let t = tape.slice_rows(x, 0, cfg.m_task)?;
            tape.mean_rows(t)?
        }
        Pooling::FirstTask => tape.slice_rows(x, 0, 1)?,
    };
    Ok(SceneVars { f_enc, grid: x })
}

/// Plain-value scene embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEmbedding {
    pub vector: Vec<f64>,
    /// `[m_t + M, D]`.
    pub token_grid: Tensor,
}

/// Inference-only encode of a raw cloud.
pub fn embed_scene(cloud: &PointCloud, cfg: &SceneEncoderConfig, store: &ParamStore) -> Result<SceneEmbedding> {
    let patches = tokenize_scene(cloud, cfg)?;
    let mut tape = Tape::inference();
    let v = encode_scene(&mut tape, store, cfg, &patches)?;
    let vector = tape.data(v.f_enc).to_vec();
    if vector.iter().any(|x| !x.is_finite()) {
        return Err(Error::Degenerate("scene embedding is not finite".into()));
    }
    Ok(SceneEmbedding {
        vector,
        token_grid: tape.value(v.grid),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d_patch: usize, n_layers: usize) -> SceneEncoderConfig {
        SceneEncoderConfig {
            feature_dim: 1,
            m_patches: 3,
            k_neighbors: 2,
            d_hidden: 8,
            d_patch,
            d_model: 4,
            m_task: 2,
            n_layers,
            n_heads: 2,
            freeze_seed: 7,
            fps_seed: 0,
            pooling: Pooling::MeanTask,
        }
    }

    fn cloud() -> PointCloud {
        let coords = (0..8).map(|i| [i as f64 * 0.3, (i % 3) as f64, (i * i % 5) as f64 * 0.1]).collect();
        PointCloud::new(coords, (0..8).map(|i| i as f64 / 8.0).collect(), 1).unwrap()
    }

    fn store(c: &SceneEncoderConfig) -> ParamStore {
        let mut s = ParamStore::new();
        init_params(&mut s, c, &mut ChaCha8Rng::seed_from_u64(3));
        s
    }

    #[test]
    fn sequence_puts_task_tokens_first() {
        let c = cfg(4, 0);
        let s = store(&c);
        let p = tokenize_scene(&cloud(), &c).unwrap();
        let mut t = Tape::new();
        let pts = encode_patches(&mut t, &s, &p).unwrap();
        let task = t.param(&s, "scene.task_tokens").unwrap();
        let seq = assemble_sequence(&mut t, pts, task, None).unwrap();
        assert_eq!(t.shape(seq), &[5, 4]);
        assert_eq!(&t.data(seq)[..8], s.get("scene.task_tokens").unwrap().data());
        assert_eq!(&t.data(seq)[8..], t.data(pts));
    }

    #[test]
    fn width_mismatch_without_projection_is_config_error() {
        let c = cfg(6, 0);
        let s = store(&c);
        let p = tokenize_scene(&cloud(), &c).unwrap();
        let mut t = Tape::new();
        let pts = encode_patches(&mut t, &s, &p).unwrap();
        let task = t.param(&s, "scene.task_tokens").unwrap();
        assert!(matches!(assemble_sequence(&mut t, pts, task, None), Err(Error::Config(_))));
    }

    #[test]
    fn zero_layers_pools_raw_task_tokens() {
        let c = cfg(6, 0);
        let s = store(&c);
        let e = embed_scene(&cloud(), &c, &s).unwrap();
        let tt = s.get("scene.task_tokens").unwrap();
        for j in 0..4 {
            assert_eq!(e.vector[j], (tt.row(0)[j] + tt.row(1)[j]) / 2.0);
        }
    }

    #[test]
    fn identical_patches_give_identical_tokens() {
        let c = cfg(4, 0);
        let s = store(&c);
        let mut p = tokenize_scene(&cloud(), &c).unwrap();
        let stride = p.k_neighbors * p.width;
        let first = p.patch(0).to_vec();
        p.patch_points[stride..2 * stride].copy_from_slice(&first);
        let mut t = Tape::inference();
        let tok = encode_patches(&mut t, &s, &p).unwrap();
        assert_eq!(t.data(tok)[..4], t.data(tok)[4..8]);
    }

    #[test]
    fn frozen_weights_get_no_gradient() {
        let c = cfg(6, 2);
        let s = store(&c);
        let p = tokenize_scene(&cloud(), &c).unwrap();
        let mut t = Tape::new();
        let v = encode_scene(&mut t, &s, &c, &p).unwrap();
        let l = t.sum(v.f_enc);
        let g = t.backward(l).unwrap();
        for (name, var) in t.bound_params() {
            let has = g.get(var).is_some();
            assert_eq!(has, !name.starts_with("scene.frozen."), "{name}");
        }
        assert_eq!(t.shape(v.grid), &[5, 4]);
    }

    #[test]
    fn determinism() {
        let c = cfg(6, 2);
        let s = store(&c);
        assert_eq!(embed_scene(&cloud(), &c, &s).unwrap(), embed_scene(&cloud(), &c, &s).unwrap());
    }
}
