//! Joint contrastive + captioning training, the step log, checkpointing and
//! the λ sweep harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::alignment::{self, Head};
use crate::decoder::{self, DecodeStrategy, LossReduction};
use crate::metrics::{self, CorpusItem};
use crate::model::{parse_kv, render_kv, Model, ModelConfig};
use crate::pointcloud::{load_scene, PatchSet, PointCloud};
use crate::scene_encoder::{self, SceneVars};
use crate::tensor::{AdamWConfig, Checkpoint, OptimizerState, Tape, Var};
use crate::text_encoder::{self, Vocabulary};
use crate::{Error, LossComponent, Result};

pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const VAL_PAIRS_FILE: &str = "val.jsonl";
pub const LOG_HEADER: &str = "step,l_con,l_cap,l_total,lr,wall_ms";
/// Learning rate stated by the reference recipe; kept for the record only.
pub const REFERENCE_LR: f64 = 0.1;
/// Epoch count of the reference recipe; not desk-reproducible.
pub const REFERENCE_EPOCHS: usize = 1080;

pub const REQUIRED_KEYS: &[&str] = &[
    "lambda",
    "batch_size",
    "epochs",
    "lr",
    "seed",
    "d_model",
    "n_layers",
    "m_task",
    "k_neighbors",
    "m_patches",
    "loss_reduction",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss_reduction: LossReduction,
    /// Epochs between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub min_count: usize,
    pub weight_decay: f64,
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be ≥ 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        self.model.validate()
    }

    /// Parses a config file body. Required keys must all be present;
    /// `n_layers` sets the scene and decoder depth; any model key may be
    /// given explicitly to override the derived value.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        for k in REQUIRED_KEYS {
            if !kv.contains_key(*k) {
                return Err(Error::Config(format!("missing key `{k}`")));
            }
        }
        fn get<T: std::str::FromStr>(kv: &BTreeMap<String, String>, k: &str) -> Result<T> {
            let v = &kv[k];
            v.parse().map_err(|_| Error::Config(format!("invalid value `{v}` for key `{k}`")))
        }
        let d_model: usize = get(&kv, "d_model")?;
        let n_layers: usize = get(&kv, "n_layers")?;
        let seed: u64 = get(&kv, "seed")?;
        let mut model_kv = BTreeMap::new();
        for (k, v) in [
            ("d_model", d_model.to_string()),
            ("d_patch", d_model.to_string()),
            ("d_patch_hidden", d_model.to_string()),
            ("d_shared", d_model.to_string()),
            ("d_align_hidden", d_model.to_string()),
            ("scene_layers", n_layers.to_string()),
            ("decoder_layers", n_layers.to_string()),
            ("init_seed", seed.to_string()),
        ] {
            model_kv.insert(k.to_string(), v);
        }
        let mut cfg = TrainConfig {
            lambda: get(&kv, "lambda")?,
            batch_size: get(&kv, "batch_size")?,
            epochs: get(&kv, "epochs")?,
            lr: get(&kv, "lr")?,
            seed,
            loss_reduction: kv["loss_reduction"].parse()?,
            checkpoint_every: 0,
            min_count: 1,
            weight_decay: AdamWConfig::default().weight_decay,
            model: ModelConfig::default(),
        };
        for (k, v) in &kv {
            match k.as_str() {
                "lambda" | "batch_size" | "epochs" | "lr" | "seed" | "loss_reduction" | "n_layers" => {}
                "checkpoint_every" => cfg.checkpoint_every = get(&kv, k)?,
                "min_count" => cfg.min_count = get(&kv, k)?,
                "weight_decay" => cfg.weight_decay = get(&kv, k)?,
                "reference_lr" => {
                    get::<f64>(&kv, k)?;
                }
                k if ModelConfig::is_key(k) => {
                    model_kv.insert(k.to_string(), v.clone());
                }
                other => return Err(Error::Config(format!("unknown key `{other}`"))),
            }
        }
        cfg.model = ModelConfig::from_kv(&model_kv)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Full snapshot in the config-file format; parses back to `self`.
    pub fn render(&self) -> String {
        let mut kv = self.model.to_kv();
        kv.remove("init_seed");
        kv.insert("n_layers".into(), self.model.scene_layers.to_string());
        kv.insert("lambda".into(), format!("{:?}", self.lambda));
        kv.insert("batch_size".into(), self.batch_size.to_string());
        kv.insert("epochs".into(), self.epochs.to_string());
        kv.insert("lr".into(), format!("{:?}", self.lr));
        kv.insert("seed".into(), self.seed.to_string());
        kv.insert("loss_reduction".into(), self.loss_reduction.to_string());
        kv.insert("checkpoint_every".into(), self.checkpoint_every.to_string());
        kv.insert("min_count".into(), self.min_count.to_string());
        kv.insert("weight_decay".into(), format!("{:?}", self.weight_decay));
        kv.insert("reference_lr".into(), format!("{REFERENCE_LR:?}"));
        if self.model.init_seed != self.seed {
            kv.insert("init_seed".into(), self.model.init_seed.to_string());
        }
        render_kv(&kv)
    }
}

/// One supervised pair, tokenized.
#[derive(Debug, Clone)]
pub struct Sample {
    pub patches: PatchSet,
    pub ids: Vec<usize>,
}

pub fn prepare(model: &Model, pairs: &[(PointCloud, String)]) -> Result<Vec<Sample>> {
    let cfg = model.scene_config();
    pairs
        .iter()
        .enumerate()
        .map(|(i, (cloud, caption))| {
            let ids = model.vocab.encode(caption).ids;
            if ids.is_empty() {
                return Err(Error::Data(format!("pair {i}: empty caption")));
            }
            if ids.len() + 1 >= model.config.max_len {
                return Err(Error::Data(format!(
                    "pair {i}: caption of {} tokens exceeds max_len {}",
                    ids.len(),
                    model.config.max_len
                )));
            }
            Ok(Sample {
                patches: scene_encoder::tokenize_scene(cloud, &cfg)?,
                ids,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub l_con: f64,
    pub l_cap: f64,
    pub l_total: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{},{:?},{:?},{:?},{:?},{:.3}", r.step, r.l_con, r.l_cap, r.l_total, r.lr, r.wall_ms);
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Graph nodes of one joint forward pass.
pub struct JointLoss {
    pub l_con: Var,
    /// Absent when λ = 0: the decoder branch is not built.
    pub l_cap: Option<Var>,
    pub l_total: Var,
}

fn encode_batch(tape: &mut Tape, model: &Model, batch: &[&Sample]) -> Result<(Vec<SceneVars>, Var)> {
    let scfg = model.scene_config();
    let tcfg = model.text_config();
    let mut scenes = Vec::with_capacity(batch.len());
    let mut f_s = Vec::with_capacity(batch.len());
    let mut f_t = Vec::with_capacity(batch.len());
    for s in batch {
        let v = scene_encoder::encode_scene(tape, &model.store, &scfg, &s.patches)?;
        f_s.push(v.f_enc);
        scenes.push(v);
        f_t.push(text_encoder::encode_text(tape, &model.store, &tcfg, &s.ids)?);
    }
    let fs = tape.concat_rows(&f_s)?;
    let ft = tape.concat_rows(&f_t)?;
    let su = alignment::project_and_normalize(tape, &model.store, Head::Scene, fs)?;
    let tu = alignment::project_and_normalize(tape, &model.store, Head::Text, ft)?;
    let log_tau = tape.param(&model.store, "align.log_tau")?;
    let tau = alignment::temperature(tape, log_tau);
    let l_con = alignment::info_nce(tape, su, tu, tau, model.config.symmetric)?;
    Ok((scenes, l_con))
}

fn caption_branch(tape: &mut Tape, model: &Model, batch: &[&Sample], scenes: &[SceneVars], reduction: LossReduction) -> Result<Var> {
    let dcfg = model.decoder_config();
    let mut parts = Vec::with_capacity(batch.len());
    for (s, v) in batch.iter().zip(scenes) {
        let l = decoder::caption_loss_for(tape, &model.store, &dcfg, &s.ids, v.grid, reduction)?;
        parts.push(tape.reshape(l, &[1, 1])?);
    }
    let all = tape.concat_rows(&parts)?;
    Ok(tape.mean(all))
}

/// `L_total = L_con + λ·L_cap`, with `L_cap` averaged over batch items.
pub fn joint_loss(tape: &mut Tape, model: &Model, batch: &[&Sample], lambda: f64, reduction: LossReduction) -> Result<JointLoss> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let (scenes, l_con) = encode_batch(tape, model, batch)?;
    if lambda == 0.0 {
        return Ok(JointLoss { l_con, l_cap: None, l_total: l_con });
    }
    let l_cap = caption_branch(tape, model, batch, &scenes, reduction)?;
    let weighted = tape.scale(l_cap, lambda);
    let l_total = tape.add(l_con, weighted)?;
    Ok(JointLoss { l_con, l_cap: Some(l_cap), l_total })
}

/// Captioning loss without gradients, for logging and validation.
pub fn caption_loss_value(model: &Model, batch: &[&Sample], reduction: LossReduction) -> Result<f64> {
    let mut tape = Tape::inference();
    let scfg = model.scene_config();
    let scenes = batch
        .iter()
        .map(|s| scene_encoder::encode_scene(&mut tape, &model.store, &scfg, &s.patches))
        .collect::<Result<Vec<_>>>()?;
    let l = caption_branch(&mut tape, model, batch, &scenes, reduction)?;
    Ok(tape.item(l))
}

pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
    step: u64,
    started: Instant,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamWConfig {
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        };
        let optimizer = OptimizerState::new(adam, config.lr, config.epochs);
        Ok(Self {
            config,
            optimizer,
            step: 0,
            started: Instant::now(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One optimizer update on `batch`. Only parameters reached by the
    /// graph are updated; frozen weights never are.
    pub fn train_step(&mut self, model: &mut Model, batch: &[&Sample]) -> Result<StepRecord> {
        let lambda = self.config.lambda;
        let reduction = self.config.loss_reduction;
        let mut tape = Tape::new();
        let j = joint_loss(&mut tape, model, batch, lambda, reduction)?;
        let l_con = tape.item(j.l_con);
        if !l_con.is_finite() {
            return Err(Error::NonFinite { step: self.step, component: LossComponent::Con });
        }
        let l_cap = match j.l_cap {
            Some(v) => tape.item(v),
            None => caption_loss_value(model, batch, reduction)?,
        };
        if !l_cap.is_finite() {
            return Err(Error::NonFinite { step: self.step, component: LossComponent::Cap });
        }
        let l_total = tape.item(j.l_total);
        let grads = tape.backward(j.l_total)?;
        model.store.zero_grads();
        let names = model.store.accumulate_grads(&tape, &grads);
        self.optimizer.step(&mut model.store, &names)?;
        let rec = StepRecord {
            step: self.step,
            l_con,
            l_cap,
            l_total,
            lr: self.optimizer.lr(),
            wall_ms: self.started.elapsed().as_secs_f64() * 1e3,
        };
        self.step += 1;
        Ok(rec)
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub log: TrainLog,
    /// Best validation `L_total` and the epoch it was reached.
    pub best_val: Option<(f64, usize)>,
    pub checkpoints: Vec<PathBuf>,
}

/// Validation `L_total` over the whole set as one batch.
pub fn validation_loss(model: &Model, samples: &[Sample], cfg: &TrainConfig) -> Result<f64> {
    let batch: Vec<&Sample> = samples.iter().collect();
    let mut tape = Tape::inference();
    let j = joint_loss(&mut tape, model, &batch, cfg.lambda, cfg.loss_reduction)?;
    Ok(tape.item(j.l_total))
}

/// Epoch loop with a seeded shuffle and the cosine schedule. Periodic and
/// best-validation checkpoints go to `out_dir` when given.
pub fn fit(
    model: &mut Model,
    train: &[Sample],
    val: Option<&[Sample]>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<FitOutcome> {
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let mut best_val = None;
    let mut checkpoints = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        trainer.optimizer.set_epoch(epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            log.records.push(trainer.train_step(model, &batch)?);
        }
        let Some(dir) = out_dir else { continue };
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            let p = dir.join(format!("checkpoint_epoch{:04}.ckpt", epoch + 1));
            Checkpoint::from_store(&model.store).save(&p)?;
            checkpoints.push(p);
        }
        if let Some(v) = val {
            let l = validation_loss(model, v, cfg)?;
            if best_val.is_none_or(|(b, _)| l < b) {
                best_val = Some((l, epoch + 1));
                let p = dir.join("best.ckpt");
                Checkpoint::from_store(&model.store).save(&p)?;
                if !checkpoints.contains(&p) {
                    checkpoints.push(p);
                }
            }
        }
    }
    Ok(FitOutcome { log, best_val, checkpoints })
}

#[derive(Deserialize)]
struct PairLine {
    scene: String,
    caption: String,
}

/// Reads `pairs.jsonl` (and `val.jsonl` if present) from a data directory.
/// Scene paths are relative to the directory.
pub fn load_pairs(dir: &Path, file: &str) -> Result<Vec<(PointCloud, String)>> {
    let path = dir.join(file);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: PairLine = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let cloud = load_scene(&dir.join(&p.scene))
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push((cloud, p.caption));
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{} has no pairs", path.display())));
    }
    Ok(out)
}

/// Builds the vocabulary from captions and a fresh model. The feature
/// width is taken from the data.
pub fn model_for_pairs(cfg: &TrainConfig, pairs: &[(PointCloud, String)]) -> Result<Model> {
    let captions: Vec<&str> = pairs.iter().map(|(_, c)| c.as_str()).collect();
    let vocab = Vocabulary::build(&captions, cfg.min_count)?;
    let mut mc = cfg.model.clone();
    mc.feature_dim = pairs[0].0.feature_dim();
    if pairs.iter().any(|(c, _)| c.feature_dim() != mc.feature_dim) {
        return Err(Error::Data("scenes disagree on feature_dim".into()));
    }
    Model::new(mc, vocab)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub cider: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub const HEADER: [&'static str; 5] = ["λ", "C@0.25", "B-4@0.25", "M@0.25", "R@0.25"];

    pub fn render(&self) -> String {
        let mut s = Self::HEADER.join(" | ");
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{} | {:.2} | {:.2} | {:.2} | {:.2}",
                r.lambda,
                r.cider * 100.0,
                r.bleu4 * 100.0,
                r.meteor * 100.0,
                r.rouge * 100.0
            );
        }
        s
    }
}

/// Trains and greedily captions `eval`, scoring with oracle boxes at IoU 0.25.
pub fn fit_and_evaluate(
    cfg: &TrainConfig,
    pairs: &[(PointCloud, String)],
    eval: &[(PointCloud, Vec<String>)],
) -> Result<(Model, metrics::MetricReport)> {
    let mut model = model_for_pairs(cfg, pairs)?;
    let samples = prepare(&model, pairs)?;
    fit(&mut model, &samples, None, cfg, None)?;
    let dcfg = model.decoder_config();
    let mut items = Vec::with_capacity(eval.len());
    for (cloud, refs) in eval {
        let (grid, _) = model.embed_scene(cloud)?;
        let g = decoder::decode(&model.store, &dcfg, &grid, DecodeStrategy::Greedy, 0)?;
        items.push(CorpusItem {
            candidate: model.vocab.render(&g.ids),
            references: refs.clone(),
            pred_box: None,
            gt_box: cloud.objects.first().map(|o| o.aabb),
            scene_vocab: Some(cloud.evidence_vocab()),
        });
    }
    let report = metrics::evaluate(&items, &[0.25], true)?;
    Ok((model, report))
}

/// One model per λ with a shared seed; metrics at IoU 0.25.
pub fn lambda_sweep(
    base: &TrainConfig,
    lambdas: &[f64],
    pairs: &[(PointCloud, String)],
    eval: &[(PointCloud, Vec<String>)],
) -> Result<SweepTable> {
    if lambdas.is_empty() {
        return Err(Error::Argument("λ list is empty".into()));
    }
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let cfg = TrainConfig { lambda, ..base.clone() };
        let (_, report) = fit_and_evaluate(&cfg, pairs, eval)?;
        let m = &report.thresholds[0];
        rows.push(SweepRow {
            lambda,
            cider: m.cider,
            bleu4: m.bleu4,
            meteor: m.meteor,
            rouge: m.rouge,
        });
    }
    Ok(SweepTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "lambda = 1.0\nbatch_size = 2\nepochs = 3\nlr = 0.001\nseed = 5\nd_model = 16\n\
        n_layers = 1\nm_task = 2\nk_neighbors = 4\nm_patches = 8\nloss_reduction = mean\n";

    #[test]
    fn parse_minimal_and_snapshot_round_trip() {
        let c = TrainConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.model.d_model, 16);
        assert_eq!(c.model.scene_layers, 1);
        assert_eq!(c.model.init_seed, 5);
        assert_eq!(TrainConfig::parse(&c.render()).unwrap(), c);
    }

    #[test]
    fn missing_and_unknown_keys_are_named() {
        let text = MINIMAL.replace("m_task = 2\n", "");
        assert!(matches!(TrainConfig::parse(&text), Err(Error::Config(m)) if m.contains("m_task")));
        let text = format!("{MINIMAL}warmup = 3\n");
        assert!(matches!(TrainConfig::parse(&text), Err(Error::Config(m)) if m.contains("warmup")));
        let text = MINIMAL.replace("lambda = 1.0", "lambda = -1");
        assert!(TrainConfig::parse(&text).is_err());
    }

    #[test]
    fn log_csv_header() {
        let log = TrainLog { records: vec![StepRecord { step: 0, l_con: 0.5, l_cap: 1.0, l_total: 1.5, lr: 1e-3, wall_ms: 2.0 }] };
        let csv = log.to_csv();
        assert!(csv.starts_with("step,l_con,l_cap,l_total,lr,wall_ms\n0,0.5,1.0,1.5,0.001,2.000"));
    }

    #[test]
    fn sweep_header_shape() {
        let t = SweepTable { rows: vec![SweepRow { lambda: 0.0, cider: 0.5, bleu4: 0.1, meteor: 0.2, rouge: 0.3 }] };
        let r = t.render();
        assert!(r.starts_with("λ | C@0.25 | B-4@0.25 | M@0.25 | R@0.25\n0 | 50.00"));
    }
}
