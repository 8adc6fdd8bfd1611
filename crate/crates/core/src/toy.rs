//! Synthetic desk-scale scenes: colored boxes on a floor, with one caption
//! per scene. Used by tests, the acceptance suite and `scenecap toy`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::LossReduction;
use crate::model::ModelConfig;
use crate::pointcloud::{save_scene, Aabb, AnnotatedObject, PointCloud};
use crate::scene_encoder::Pooling;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

pub const COLORS: &[(&str, [f64; 3])] = &[
    ("red", [0.9, 0.1, 0.1]),
    ("blue", [0.1, 0.2, 0.9]),
    ("green", [0.1, 0.8, 0.2]),
    ("yellow", [0.9, 0.9, 0.1]),
    ("white", [0.95, 0.95, 0.95]),
    ("black", [0.05, 0.05, 0.05]),
];

/// Category name and full box size.
pub const CATEGORIES: &[(&str, [f64; 3])] = &[
    ("chair", [0.5, 0.5, 0.9]),
    ("table", [1.2, 0.8, 0.75]),
    ("lamp", [0.3, 0.3, 1.5]),
    ("sofa", [1.8, 0.8, 0.8]),
    ("bed", [2.0, 1.5, 0.5]),
    ("shelf", [0.9, 0.35, 1.8]),
    ("desk", [1.4, 0.7, 0.75]),
    ("cabinet", [0.8, 0.5, 1.2]),
];

pub const RELATIONS: &[&str] = &["beside", "near", "behind"];

const FLOOR_COLOR: [f64; 3] = [0.5, 0.5, 0.5];
pub const TOY_POINTS: usize = 256;

/// `(color, category)` indices for the two objects of each training scene,
/// and the relation joining them.
const LAYOUTS: [((usize, usize), (usize, usize), usize); 8] = [
    ((0, 0), (1, 1), 0),
    ((2, 2), (4, 3), 1),
    ((3, 4), (5, 5), 2),
    ((1, 6), (0, 7), 0),
    ((4, 0), (2, 4), 1),
    ((5, 3), (3, 1), 2),
    ((0, 5), (2, 6), 1),
    ((1, 2), (4, 7), 0),
];

#[derive(Debug, Clone)]
pub struct ToyItem {
    pub cloud: PointCloud,
    pub caption: String,
}

#[derive(Debug, Clone, Copy)]
struct ObjSpec {
    color: usize,
    category: usize,
    center: [f64; 3],
}

fn caption_for(a: ObjSpec, b: ObjSpec, relation: usize) -> String {
    format!(
        "a {} {} {} a {} {}",
        COLORS[a.color].0, CATEGORIES[a.category].0, RELATIONS[relation], COLORS[b.color].0, CATEGORIES[b.category].0
    )
}

/// Points split between a floor slab and the objects' boxes.
fn build_cloud(objects: &[ObjSpec], caption: &str, n_points: usize, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let floor = n_points / 4;
    let per_obj = (n_points - floor) / objects.len();
    let mut coords = Vec::with_capacity(n_points);
    let mut feats = Vec::with_capacity(n_points * 3);
    while coords.len() < n_points {
        let k = coords.len();
        let (center, size, color) = if k < floor || per_obj == 0 {
            ([0.0, 0.0, -0.05], [6.0, 6.0, 0.1], FLOOR_COLOR)
        } else {
            let o = objects[((k - floor) / per_obj).min(objects.len() - 1)];
            (o.center, CATEGORIES[o.category].1, COLORS[o.color].1)
        };
        coords.push(std::array::from_fn(|i| center[i] + (rng.gen::<f64>() - 0.5) * size[i]));
        feats.extend(color.iter().map(|c| c + (rng.gen::<f64>() - 0.5) * 0.05));
    }
    let annotated = objects
        .iter()
        .enumerate()
        .map(|(i, o)| {
            Ok(AnnotatedObject {
                id: i as u64,
                aabb: Aabb::new(o.center, CATEGORIES[o.category].1)?,
                labels: [COLORS[o.color].0, CATEGORIES[o.category].0].iter().map(|s| s.to_string()).collect(),
                reference_captions: if i == 0 { vec![caption.to_string()] } else { vec![] },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PointCloud::new(coords, feats, 3)?.with_objects(annotated))
}

fn layout_objects(layout: ((usize, usize), (usize, usize), usize)) -> [ObjSpec; 2] {
    let ((ca, ka), (cb, kb), rel) = layout;
    let h = |k: usize| CATEGORIES[k].1[2] / 2.0;
    let dy = if rel == 2 { 1.6 } else { 0.0 };
    let dx = if rel == 1 { 1.2 } else { 1.8 };
    [
        ObjSpec { color: ca, category: ka, center: [-dx / 2.0, 0.0, h(ka)] },
        ObjSpec { color: cb, category: kb, center: [dx / 2.0, dy, h(kb)] },
    ]
}

/// The eight training pairs. `sample_seed` only changes which points are
/// drawn inside each box; layouts and captions are fixed.
pub fn toy_dataset(sample_seed: u64) -> Result<Vec<ToyItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    LAYOUTS
        .iter()
        .map(|&layout| {
            let objs = layout_objects(layout);
            let caption = caption_for(objs[0], objs[1], layout.2);
            let cloud = build_cloud(&objs, &caption, TOY_POINTS, &mut rng)?;
            Ok(ToyItem { cloud, caption })
        })
        .collect()
}

/// `replicas` independent point resamplings of the eight layouts, for
/// models that have to generalize to unseen samplings.
pub fn toy_replicated(replicas: u64) -> Result<Vec<ToyItem>> {
    let mut out = Vec::new();
    for r in 0..replicas {
        out.extend(toy_dataset(1 + r)?);
    }
    Ok(out)
}

/// Same layouts and captions as training, resampled points.
pub fn toy_eval_set() -> Result<Vec<ToyItem>> {
    toy_dataset(0xE7A1)
}

/// A random two-object scene with a caption in the toy grammar.
pub fn random_scene(seed: u64) -> Result<ToyItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kinds: Vec<usize> = (0..CATEGORIES.len()).collect();
    kinds.shuffle(&mut rng);
    let layout = (
        (rng.gen_range(0..COLORS.len()), kinds[0]),
        (rng.gen_range(0..COLORS.len()), kinds[1]),
        rng.gen_range(0..RELATIONS.len()),
    );
    let objs = layout_objects(layout);
    let caption = caption_for(objs[0], objs[1], layout.2);
    let cloud = build_cloud(&objs, &caption, TOY_POINTS, &mut rng)?;
    Ok(ToyItem { cloud, caption })
}

/// Descriptor bank built from scene vocabularies: one `color category`
/// phrase per annotated object, deduplicated, in first-seen order.
pub fn descriptor_bank<'a>(clouds: impl IntoIterator<Item = &'a PointCloud>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for c in clouds {
        for o in &c.objects {
            let color = o.labels.iter().find(|l| COLORS.iter().any(|(n, _)| n == *l));
            let cat = o.labels.iter().find(|l| CATEGORIES.iter().any(|(n, _)| n == *l));
            if let (Some(c), Some(k)) = (color, cat) {
                let phrase = format!("{c} {k}");
                if seen.insert(phrase.clone()) {
                    out.push(phrase);
                }
            }
        }
    }
    out
}

pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 3,
        m_patches: 16,
        k_neighbors: 8,
        d_patch_hidden: 32,
        d_patch: 32,
        d_model: 32,
        m_task: 2,
        n_heads: 4,
        scene_layers: 1,
        text_layers: 1,
        decoder_layers: 1,
        d_shared: 32,
        d_align_hidden: 32,
        max_len: 12,
        pooling: Pooling::MeanTask,
        symmetric: false,
        init_seed: 7,
        freeze_seed: 1234,
        fps_seed: 0,
    }
}

pub fn toy_train_config() -> TrainConfig {
    TrainConfig {
        lambda: 1.0,
        batch_size: 4,
        epochs: 300,
        lr: 1e-3,
        seed: 7,
        loss_reduction: LossReduction::Mean,
        checkpoint_every: 0,
        min_count: 1,
        weight_decay: 0.01,
        model: toy_model_config(),
    }
}

/// Writes scenes plus `pairs.jsonl` for `scenecap train`.
pub fn write_data_dir(items: &[ToyItem], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut lines = String::new();
    for (i, it) in items.iter().enumerate() {
        let name = format!("scene{i:03}.json");
        let p = dir.join(&name);
        save_scene(&it.cloud, &p)?;
        written.push(p);
        lines.push_str(&serde_json::json!({"scene": name, "caption": it.caption}).to_string());
        lines.push('\n');
    }
    let pairs = dir.join(crate::trainer::PAIRS_FILE);
    std::fs::write(&pairs, lines).map_err(|e| Error::io(&pairs, e))?;
    written.push(pairs);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_distinct_captions() {
        let d = toy_dataset(1).unwrap();
        assert_eq!(d.len(), 8);
        let caps: BTreeSet<&str> = d.iter().map(|i| i.caption.as_str()).collect();
        assert_eq!(caps.len(), 8);
        assert!(d.iter().all(|i| i.cloud.n_points() == TOY_POINTS));
        assert_eq!(d[0].caption, "a red chair beside a blue table");
    }

    #[test]
    fn evidence_covers_caption() {
        for it in toy_dataset(2).unwrap() {
            let vocab = it.cloud.evidence_vocab();
            for w in crate::text::words(&it.caption) {
                assert!(vocab.contains(&w), "{w}");
            }
        }
    }

    #[test]
    fn bank_phrases() {
        let d = toy_dataset(1).unwrap();
        let bank = descriptor_bank(d.iter().map(|i| &i.cloud));
        assert_eq!(bank[0], "red chair");
        assert_eq!(bank.len(), 16);
    }
}
