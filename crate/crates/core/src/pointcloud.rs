//! Raw scenes, farthest point sampling, kNN grouping and scene files.
//!
//! Two on-disk forms are accepted:
//!
//! * binary: `"PCV2"`, `u16` version 1, `u32 N`, `u32 F`, then `N·(3+F)`
//!   little-endian `f32`, row-major with xyz first; carries no annotations;
//! * JSON: `{"points": [[x,y,z,f…]…], "feature_dim": F, "objects": [{"id",
//!   "box": [cx,cy,cz,sx,sy,sz], "labels": […], "captions": […]}]}`.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BINARY_MAGIC: &[u8; 4] = b"PCV2";
pub const BINARY_VERSION: u16 = 1;
const BINARY_HEADER: usize = 4 + 2 + 4 + 4;

#[derive(Debug, Error)]
pub enum PointCloudError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("format error at byte {offset}: {msg}")]
    Binary { offset: usize, msg: String },
    #[error("format error at record {record}: {msg}")]
    Record { record: usize, msg: String },
    #[error("malformed scene JSON: {0}")]
    Json(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, PointCloudError>;

/// Axis-aligned box as center and full side lengths, in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub center: [f64; 3],
    pub size: [f64; 3],
}

impl Aabb {
    pub fn new(center: [f64; 3], size: [f64; 3]) -> Result<Self> {
        if size.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || center.iter().any(|c| !c.is_finite()) {
            return Err(PointCloudError::Argument(format!(
                "box needs finite center and positive sizes, got {center:?} {size:?}"
            )));
        }
        Ok(Self { center, size })
    }

    pub fn from_array(b: [f64; 6]) -> Result<Self> {
        Self::new([b[0], b[1], b[2]], [b[3], b[4], b[5]])
    }

    pub fn to_array(self) -> [f64; 6] {
        let (c, s) = (self.center, self.size);
        [c[0], c[1], c[2], s[0], s[1], s[2]]
    }

    pub fn min(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.center[i] - self.size[i] / 2.0)
    }

    pub fn max(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.center[i] + self.size[i] / 2.0)
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedObject {
    pub id: u64,
    pub aabb: Aabb,
    pub labels: BTreeSet<String>,
    pub reference_captions: Vec<String>,
}

/// `N` points with xyz coordinates and `F` opaque feature columns.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    coords: Vec<[f64; 3]>,
    features: Vec<f64>,
    feature_dim: usize,
    pub objects: Vec<AnnotatedObject>,
    pub seed_hint: Option<u64>,
}

impl PointCloud {
    pub fn new(coords: Vec<[f64; 3]>, features: Vec<f64>, feature_dim: usize) -> Result<Self> {
        if coords.is_empty() {
            return Err(PointCloudError::Argument("point cloud is empty".into()));
        }
        if features.len() != coords.len() * feature_dim {
            return Err(PointCloudError::Argument(format!(
                "{} feature values for {} points × {feature_dim}",
                features.len(),
                coords.len()
            )));
        }
        for (i, c) in coords.iter().enumerate() {
            if c.iter().any(|v| !v.is_finite()) {
                return Err(PointCloudError::Record {
                    record: i,
                    msg: "non-finite coordinate".into(),
                });
            }
            if features[i * feature_dim..(i + 1) * feature_dim]
                .iter()
                .any(|v| !v.is_finite())
            {
                return Err(PointCloudError::Record {
                    record: i,
                    msg: "non-finite feature".into(),
                });
            }
        }
        Ok(Self {
            coords,
            features,
            feature_dim,
            objects: Vec::new(),
            seed_hint: None,
        })
    }

    pub fn with_objects(mut self, objects: Vec<AnnotatedObject>) -> Self {
        self.objects = objects;
        self
    }

    pub fn n_points(&self) -> usize {
        self.coords.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Returns the cloud with its points reordered so that new index `i`
    /// holds old point `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.n_points()];
        if order.len() != self.n_points() || order.iter().any(|&i| i >= seen.len() || std::mem::replace(&mut seen[i], true)) {
            return Err(PointCloudError::Argument("order is not a permutation".into()));
        }
        let coords = order.iter().map(|&i| self.coords[i]).collect();
        let features = order.iter().flat_map(|&i| self.features(i).to_vec()).collect();
        let mut out = Self::new(coords, features, self.feature_dim)?;
        out.objects = self.objects.clone();
        out.seed_hint = self.seed_hint;
        Ok(out)
    }

    /// Union of object labels and reference-caption words; the evidence a
    /// caption of this scene may draw on.
    pub fn evidence_vocab(&self) -> BTreeSet<String> {
        let mut vocab = BTreeSet::new();
        for o in &self.objects {
            vocab.extend(o.labels.iter().cloned());
            for c in &o.reference_captions {
                vocab.extend(crate::text::words(c));
            }
        }
        vocab
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

/// Farthest point sampling with a random first center.
///
/// The first index is drawn uniformly from a ChaCha stream keyed by `seed`,
/// falling back to the cloud's `seed_hint`, then to 0.
pub fn farthest_point_sample(cloud: &PointCloud, m: usize, seed: Option<u64>) -> Result<Vec<usize>> {
    let seed = seed.or(cloud.seed_hint).unwrap_or(0);
    let first = ChaCha8Rng::seed_from_u64(seed).gen_range(0..cloud.n_points());
    farthest_point_sample_from(cloud, m, first)
}

/// Farthest point sampling starting from a fixed first center. Each later
/// center maximises its minimum distance to the chosen set; ties go to the
/// lowest index.
pub fn farthest_point_sample_from(cloud: &PointCloud, m: usize, first: usize) -> Result<Vec<usize>> {
    let n = cloud.n_points();
    if m == 0 || m > n {
        return Err(PointCloudError::Argument(format!(
            "cannot sample {m} centers from {n} points"
        )));
    }
    if first >= n {
        return Err(PointCloudError::Argument(format!("first index {first} ≥ {n}")));
    }
    let pts = cloud.coords();
    let mut chosen = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut next = first;
    for _ in 0..m {
        chosen.push(next);
        taken[next] = true;
        let c = pts[next];
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            min_d[i] = min_d[i].min(dist2(&pts[i], &c));
            if best.is_none_or(|b| min_d[i] > min_d[b]) {
                best = Some(i);
            }
        }
        match best {
            Some(b) => next = b,
            None => break,
        }
    }
    Ok(chosen)
}

/// `M` patches of `K` points each, xyz recentred on the patch center.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub m_patches: usize,
    pub k_neighbors: usize,
    /// Row width, `3 + F`.
    pub width: usize,
    pub center_indices: Vec<usize>,
    /// `M × K` cloud indices, nearest first.
    pub neighbor_indices: Vec<usize>,
    /// `M × K × (3+F)` values.
    pub patch_points: Vec<f64>,
}

impl PatchSet {
    pub fn patch(&self, i: usize) -> &[f64] {
        let stride = self.k_neighbors * self.width;
        &self.patch_points[i * stride..(i + 1) * stride]
    }
}

/// Groups the `k` nearest points (Euclidean on xyz) around each center.
/// The center is always its own first neighbour; remaining ties break by
/// lowest index.
pub fn knn_group(cloud: &PointCloud, centers: &[usize], k: usize) -> Result<PatchSet> {
    let n = cloud.n_points();
    if k == 0 || k > n {
        return Err(PointCloudError::Argument(format!(
            "cannot gather {k} neighbours from {n} points"
        )));
    }
    if let Some(&bad) = centers.iter().find(|&&c| c >= n) {
        return Err(PointCloudError::Argument(format!("center {bad} ≥ {n}")));
    }
    let f = cloud.feature_dim();
    let width = 3 + f;
    let pts = cloud.coords();
    let mut neighbor_indices = Vec::with_capacity(centers.len() * k);
    let mut patch_points = Vec::with_capacity(centers.len() * k * width);
    for &c in centers {
        let origin = pts[c];
        let mut order: Vec<(bool, f64, usize)> = (0..n)
            .map(|i| (i != c, dist2(&pts[i], &origin), i))
            .collect();
        order.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
        for &(_, _, i) in order.iter().take(k) {
            neighbor_indices.push(i);
            for (axis, o) in origin.iter().enumerate() {
                patch_points.push(pts[i][axis] - o);
            }
            patch_points.extend_from_slice(cloud.features(i));
        }
    }
    Ok(PatchSet {
        m_patches: centers.len(),
        k_neighbors: k,
        width,
        center_indices: centers.to_vec(),
        neighbor_indices,
        patch_points,
    })
}

// ---- scene files ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct JsonObject {
    id: u64,
    #[serde(rename = "box")]
    bbox: [f64; 6],
    labels: Vec<String>,
    captions: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct JsonScene {
    points: Vec<Vec<f64>>,
    feature_dim: usize,
    objects: Vec<JsonObject>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed_hint: Option<u64>,
}

pub fn decode_binary(buf: &[u8]) -> Result<PointCloud> {
    let bin = |offset: usize, msg: &str| PointCloudError::Binary {
        offset,
        msg: msg.to_string(),
    };
    if buf.len() < 4 || &buf[..4] != BINARY_MAGIC {
        return Err(bin(0, "bad magic, expected PCV2"));
    }
    if buf.len() < BINARY_HEADER {
        return Err(bin(buf.len(), "truncated header"));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != BINARY_VERSION {
        return Err(bin(4, &format!("unsupported version {version}")));
    }
    let n = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(buf[10..14].try_into().unwrap()) as usize;
    let width = 3 + f;
    let row_bytes = width * 4;
    let body = &buf[BINARY_HEADER..];
    let rows_present = body.len() / row_bytes;
    if rows_present < n {
        return Err(PointCloudError::Record {
            record: rows_present,
            msg: format!(
                "truncated: header declares {n} rows, row {rows_present} incomplete (byte {})",
                BINARY_HEADER + rows_present * row_bytes
            ),
        });
    }
    if body.len() != n * row_bytes {
        return Err(bin(BINARY_HEADER + n * row_bytes, "trailing bytes after last row"));
    }
    let mut coords = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * f);
    for (r, row) in body.chunks_exact(row_bytes).enumerate() {
        let vals: Vec<f64> = row
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        if vals[..3].iter().any(|v| !v.is_finite()) {
            return Err(PointCloudError::Record {
                record: r,
                msg: format!("non-finite coordinate at byte {}", BINARY_HEADER + r * row_bytes),
            });
        }
        coords.push([vals[0], vals[1], vals[2]]);
        features.extend_from_slice(&vals[3..]);
    }
    PointCloud::new(coords, features, f)
}

pub fn encode_binary(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(BINARY_HEADER + cloud.n_points() * (3 + cloud.feature_dim()) * 4);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    out.extend_from_slice(&(cloud.n_points() as u32).to_le_bytes());
    out.extend_from_slice(&(cloud.feature_dim() as u32).to_le_bytes());
    for i in 0..cloud.n_points() {
        for v in cloud.coords[i].iter().chain(cloud.features(i)) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_json(text: &str) -> Result<PointCloud> {
    let scene: JsonScene = serde_json::from_str(text).map_err(|e| PointCloudError::Json(e.to_string()))?;
    let width = 3 + scene.feature_dim;
    let mut coords = Vec::with_capacity(scene.points.len());
    let mut features = Vec::with_capacity(scene.points.len() * scene.feature_dim);
    for (r, p) in scene.points.iter().enumerate() {
        if p.len() != width {
            return Err(PointCloudError::Record {
                record: r,
                msg: format!("expected {width} values, found {}", p.len()),
            });
        }
        coords.push([p[0], p[1], p[2]]);
        features.extend_from_slice(&p[3..]);
    }
    let mut cloud = PointCloud::new(coords, features, scene.feature_dim)?;
    for (i, o) in scene.objects.into_iter().enumerate() {
        let aabb = Aabb::from_array(o.bbox).map_err(|e| PointCloudError::Record {
            record: i,
            msg: format!("object {}: {e}", o.id),
        })?;
        cloud.objects.push(AnnotatedObject {
            id: o.id,
            aabb,
            labels: o.labels.iter().map(|l| l.to_lowercase()).collect(),
            reference_captions: o.captions,
        });
    }
    cloud.seed_hint = scene.seed_hint;
    Ok(cloud)
}

pub fn encode_json(cloud: &PointCloud) -> String {
    let scene = JsonScene {
        points: (0..cloud.n_points())
            .map(|i| cloud.coords[i].iter().chain(cloud.features(i)).copied().collect())
            .collect(),
        feature_dim: cloud.feature_dim,
        objects: cloud
            .objects
            .iter()
            .map(|o| JsonObject {
                id: o.id,
                bbox: o.aabb.to_array(),
                labels: o.labels.iter().cloned().collect(),
                captions: o.reference_captions.clone(),
            })
            .collect(),
        seed_hint: cloud.seed_hint,
    };
    serde_json::to_string(&scene).expect("scene serialises")
}

/// Reads a scene, sniffing the binary magic and otherwise parsing JSON.
pub fn load_scene(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path).map_err(|source| PointCloudError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.starts_with(BINARY_MAGIC) {
        return decode_binary(&bytes);
    }
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| PointCloudError::Binary {
            offset: e.valid_up_to(),
            msg: "neither PCV2 binary nor UTF-8 JSON".into(),
        })?;
    decode_json(text)
}

/// Writes JSON for `.json` paths and the binary form otherwise.
pub fn save_scene(cloud: &PointCloud, path: &Path) -> Result<()> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let bytes = if is_json {
        encode_json(cloud).into_bytes()
    } else {
        encode_binary(cloud)
    };
    std::fs::write(path, bytes).map_err(|source| PointCloudError::Io {
        path: path.display().to_string(),
        source,
    })
}
