//! `scenecap`: train, caption, best-of-N search, evaluation and latency
//! benchmarking from the command line.
//!
//! Exit codes: 0 success, 1 internal, 2 config or argument error, 3 data
//! error, 4 numeric abort, 5 judge error. Standard output carries data;
//! diagnostics go to standard error.

mod manifest;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use scenecap::bench::{run_bench, BenchTable};
use scenecap::decoder::{decode, DecodeStrategy};
use scenecap::metrics::{self, DocFreq};
use scenecap::model::Model;
use scenecap::pointcloud::load_scene;
use scenecap::trainer::{fit, load_pairs, model_for_pairs, prepare, TrainConfig, PAIRS_FILE, VAL_PAIRS_FILE};
use scenecap::tts::{
    parse_bank, run_tts, DescriptorBank, HttpJudge, HttpJudgeConfig, Judge, JudgeStub, MockJudge, StubConfig, StubMode,
    TtsConfig, DEFAULT_BANK, DEFAULT_K_S, DEFAULT_N,
};
use scenecap::{toy, Error, Result};

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "scenecap", version, about = "3D scene captioning with inference-time best-of-N search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a data directory of scene/caption pairs.
    Train(TrainArgs),
    /// Caption one scene.
    Caption(CaptionArgs),
    /// Best-of-N caption search scored by a judge.
    Tts(TtsArgs),
    /// Score a caption corpus.
    Eval(EvalArgs),
    /// Latency of the search against greedy captioning.
    Bench(BenchArgs),
    /// Serve the offline judge stub.
    JudgeStub(StubArgs),
    /// Write the synthetic toy dataset and a matching training config.
    Toy(ToyArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyName {
    Greedy,
    Beam,
    Stochastic,
    Nucleus,
}

#[derive(Args)]
struct CaptionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, value_enum, default_value = "greedy")]
    strategy: StrategyName,
    /// Sampling seed; drawn at random and reported when omitted.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 4)]
    beam_width: usize,
    #[arg(long, default_value_t = DecodeStrategy::DEFAULT_TEMPERATURE)]
    temperature: f64,
    #[arg(long, default_value_t = DecodeStrategy::DEFAULT_TOP_K)]
    top_k: usize,
    #[arg(long, default_value_t = 0.9)]
    top_p: f64,
    /// Directory for the `caption.json` sidecar and the run manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum JudgeKind {
    Mock,
    Http,
}

#[derive(Args)]
struct JudgeArgs {
    #[arg(long, value_enum, default_value = "mock")]
    judge: JudgeKind,
    /// Judge base URL; requests go to `{endpoint}/judge`.
    #[arg(long, env = "JUDGE_ENDPOINT")]
    endpoint: Option<String>,
    #[arg(long, default_value_t = HttpJudgeConfig::DEFAULT_TIMEOUT_MS)]
    timeout_ms: u64,
    #[arg(long, default_value_t = HttpJudgeConfig::DEFAULT_RETRIES)]
    retries: u32,
    /// One judge request per candidate instead of one per scene.
    #[arg(long)]
    per_candidate: bool,
    /// Descriptor bank file, one phrase per line; the built-in bank otherwise.
    #[arg(long)]
    bank: Option<PathBuf>,
}

#[derive(Args)]
struct TtsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = DEFAULT_N)]
    n: usize,
    #[arg(long, default_value_t = DEFAULT_K_S)]
    ks: usize,
    #[command(flatten)]
    judge: JudgeArgs,
    /// Greedy pipeline total latency to compute the overhead ratio against.
    #[arg(long)]
    baseline_total_ms: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pick by consensus among the k best candidates instead of argmax.
    #[arg(long)]
    vote_k: Option<usize>,
    /// Fail instead of falling back to greedy when no candidate is scored.
    #[arg(long)]
    no_fallback: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Use ground-truth boxes as predictions.
    #[arg(long)]
    oracle_boxes: bool,
    #[arg(long, value_delimiter = ',', default_values_t = metrics::DEFAULT_THRESHOLDS)]
    iou: Vec<f64>,
    /// Precomputed CIDEr document frequencies instead of corpus-relative ones.
    #[arg(long)]
    idf: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Scene files or directories of scenes.
    #[arg(long, num_args = 1..)]
    scenes: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 8])]
    n: Vec<usize>,
    #[command(flatten)]
    judge: JudgeArgs,
    #[arg(long, default_value_t = DEFAULT_K_S)]
    ks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Recorded timings to tabulate instead of measuring.
    #[arg(long)]
    fixture: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StubArgs {
    /// 0 picks a free port.
    #[arg(long, default_value_t = 0)]
    port: u16,
    /// hashed, mock, wrong-count, out-of-range or canned:r0,r1,...
    #[arg(long, default_value = "hashed")]
    mode: String,
    #[arg(long, default_value_t = 0)]
    delay_ms: u64,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long)]
    out: PathBuf,
    /// Point resamplings of the eight training layouts.
    #[arg(long, default_value_t = 1)]
    replicas: u64,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::Data(_)
        | Error::Length(_)
        | Error::Encoding(_)
        | Error::PointCloud(_)
        | Error::Checkpoint(_)
        | Error::Io { .. } => 3,
        Error::NonFinite { .. } | Error::Degenerate(_) | Error::Tensor(_) | Error::Optimizer(_) => 4,
        Error::Protocol(_) | Error::Judge(_) => 5,
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, text: &str, manifest: &mut RunManifest) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))?;
    manifest.output(path);
    Ok(())
}

fn finish(manifest: RunManifest, dir: &Path) -> Result<()> {
    manifest.finish(dir).map(|_| ()).map_err(|e| io_err(dir, e))
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("json value serializes") + "\n"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Caption(a) => cmd_caption(a),
        Command::Tts(a) => cmd_tts(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::JudgeStub(a) => cmd_judge_stub(a),
        Command::Toy(a) => cmd_toy(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut m = RunManifest::start("train");
    let cfg = TrainConfig::load(&a.config)?;
    m.input(&a.config);
    m.input(&a.data.join(PAIRS_FILE));
    let pairs = load_pairs(&a.data, PAIRS_FILE)?;
    let val_path = a.data.join(VAL_PAIRS_FILE);
    let val_pairs = if val_path.exists() {
        m.input(&val_path);
        Some(load_pairs(&a.data, VAL_PAIRS_FILE)?)
    } else {
        None
    };
    let mut model = model_for_pairs(&cfg, &pairs)?;
    let train = prepare(&model, &pairs)?;
    let val = val_pairs.map(|v| prepare(&model, &v)).transpose()?;
    create_dir(&a.out)?;
    eprintln!("training on {} pairs for {} epochs", train.len(), cfg.epochs);
    let outcome = fit(&mut model, &train, val.as_deref(), &cfg, Some(&a.out))?;
    for p in model.save_dir(&a.out)? {
        m.output(&p);
    }
    for p in &outcome.checkpoints {
        m.output(p);
    }
    let log_path = a.out.join("train_log.csv");
    outcome.log.save(&log_path)?;
    m.output(&log_path);
    write_file(&a.out.join("train.cfg"), &cfg.render(), &mut m)?;
    m.seed("seed", cfg.seed);
    m.seed("init_seed", cfg.model.init_seed);
    m.seed("freeze_seed", cfg.model.freeze_seed);
    m.seed("fps_seed", cfg.model.fps_seed);
    let last = outcome.log.records.last().copied();
    let summary = json!({
        "checkpoint": a.out.join(scenecap::model::CHECKPOINT_FILE),
        "steps": outcome.log.records.len(),
        "final": last.map(|r| json!({"l_con": r.l_con, "l_cap": r.l_cap, "l_total": r.l_total})),
        "best_val": outcome.best_val.map(|(l, e)| json!({"l_total": l, "epoch": e})),
        "checksum": format!("{:016x}", model.checksum()),
    });
    m.config = json!({"train_config": cfg.render(), "result": summary.clone()});
    finish(m, &a.out)?;
    print!("{}", pretty(&summary));
    Ok(())
}

fn cmd_caption(a: CaptionArgs) -> Result<()> {
    let mut m = RunManifest::start("caption");
    let model = Model::load(&a.checkpoint)?;
    m.input(&a.checkpoint);
    let cloud = load_scene(&a.scene)?;
    m.input(&a.scene);
    let sampled = matches!(a.strategy, StrategyName::Stochastic | StrategyName::Nucleus);
    let seed = match (sampled, a.seed) {
        (true, Some(s)) => Some(s),
        (true, None) => {
            let s = rand::random::<u64>();
            eprintln!("seed: {s}");
            m.args.extend(["--seed".to_string(), s.to_string()]);
            Some(s)
        }
        (false, _) => None,
    };
    let strategy = match a.strategy {
        StrategyName::Greedy => DecodeStrategy::Greedy,
        StrategyName::Beam => DecodeStrategy::Beam { width: a.beam_width },
        StrategyName::Stochastic => {
            DecodeStrategy::Stochastic { temperature: a.temperature, top_k: a.top_k, seed: seed.unwrap() }
        }
        StrategyName::Nucleus => DecodeStrategy::Nucleus { temperature: a.temperature, top_p: a.top_p, seed: seed.unwrap() },
    };
    strategy.validate().map_err(|e| Error::Argument(e.to_string()))?;
    let (grid, _) = model.embed_scene(&cloud)?;
    let g = decode(&model.store, &model.decoder_config(), &grid, strategy, 0)?;
    let caption = model.vocab.render(&g.ids);
    println!("{caption}");
    if let Some(s) = seed {
        m.seed("sampling", s);
    }
    m.config = json!({"strategy": format!("{strategy:?}")});
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let tokens: Vec<&str> = g.ids.iter().filter_map(|&i| model.vocab.token(i)).collect();
        let sidecar = json!({
            "caption": caption,
            "ids": g.ids,
            "tokens": tokens,
            "logprobs": g.logprobs,
            "total_logprob": g.total_logprob(),
            "strategy": format!("{strategy:?}"),
            "seed": seed,
        });
        write_file(&dir.join("caption.json"), &pretty(&sidecar), &mut m)?;
        finish(m, dir)?;
    }
    Ok(())
}

fn load_bank(model: &Model, path: Option<&Path>, m: &mut RunManifest) -> Result<DescriptorBank> {
    let text = match path {
        Some(p) => {
            m.input(p);
            std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read bank {}: {e}", p.display())))?
        }
        None => DEFAULT_BANK.to_string(),
    };
    DescriptorBank::from_model(model, parse_bank(&text))
}

fn make_judge(a: &JudgeArgs) -> Result<Box<dyn Judge>> {
    match a.judge {
        JudgeKind::Mock => Ok(Box::new(MockJudge)),
        JudgeKind::Http => {
            let endpoint = a
                .endpoint
                .clone()
                .ok_or_else(|| Error::Config("--judge http needs --endpoint or JUDGE_ENDPOINT".into()))?;
            let cfg = HttpJudgeConfig {
                timeout_ms: a.timeout_ms,
                retries: a.retries,
                per_candidate: a.per_candidate,
                ..HttpJudgeConfig::new(endpoint)
            };
            Ok(Box::new(HttpJudge::new(cfg)?))
        }
    }
}

fn judge_snapshot(a: &JudgeArgs) -> serde_json::Value {
    json!({
        "judge": match a.judge { JudgeKind::Mock => "mock", JudgeKind::Http => "http" },
        "endpoint": a.endpoint,
        "timeout_ms": a.timeout_ms,
        "retries": a.retries,
        "per_candidate": a.per_candidate,
        "bank": a.bank,
    })
}

fn cmd_tts(a: TtsArgs) -> Result<()> {
    let mut m = RunManifest::start("tts");
    let model = Model::load(&a.checkpoint)?;
    m.input(&a.checkpoint);
    let cloud = load_scene(&a.scene)?;
    m.input(&a.scene);
    let bank = load_bank(&model, a.judge.bank.as_deref(), &mut m)?;
    let judge = make_judge(&a.judge)?;
    let cfg = TtsConfig {
        n: a.n,
        k_s: a.ks,
        seed: a.seed,
        vote_k: a.vote_k,
        fallback_greedy: !a.no_fallback,
        baseline_total_ms: a.baseline_total_ms,
        ..TtsConfig::default()
    };
    let before = model.checksum();
    let result = run_tts(&model, &cloud, &bank, judge.as_ref(), &cfg)?;
    if model.checksum() != before {
        return Err(Error::Argument("model parameters changed during search".into()));
    }
    if result.fallback {
        eprintln!("warning: no candidate could be scored; returned the greedy caption");
    }
    let report = pretty(&result.to_json());
    print!("{report}");
    m.seed("seed", a.seed);
    m.config = json!({
        "n": a.n, "ks": a.ks, "seed": a.seed, "vote_k": a.vote_k, "fallback_greedy": !a.no_fallback,
        "baseline_total_ms": a.baseline_total_ms, "judge": judge_snapshot(&a.judge),
        "checksum": format!("{before:016x}"),
    });
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_file(&dir.join("search_result.json"), &report, &mut m)?;
        finish(m, dir)?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut m = RunManifest::start("eval");
    let items = metrics::load_corpus(&a.corpus)?;
    m.input(&a.corpus);
    let idf = match &a.idf {
        Some(p) => {
            m.input(p);
            Some(DocFreq::load(p)?)
        }
        None => None,
    };
    if a.iou.iter().any(|k| !(0.0..=1.0).contains(k)) {
        return Err(Error::Argument(format!("IoU thresholds must lie in [0, 1], got {:?}", a.iou)));
    }
    let report = metrics::evaluate_with_idf(&items, &a.iou, a.oracle_boxes, idf.as_ref())?;
    let json_text = pretty(&report.to_json());
    match a.format {
        Format::Json => print!("{json_text}"),
        Format::Text => print!("{}", report.to_text()),
    }
    m.config = json!({"oracle_boxes": a.oracle_boxes, "iou": a.iou, "idf": a.idf});
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_file(&dir.join("report.json"), &json_text, &mut m)?;
        write_file(&dir.join("report.txt"), &report.to_text(), &mut m)?;
        finish(m, dir)?;
    }
    Ok(())
}

/// Files directly named plus every file inside named directories, sorted.
fn expand_scenes(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut inner: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| io_err(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && f.extension().is_some_and(|x| x != "jsonl"))
                .collect();
            inner.sort();
            out.extend(inner);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mut m = RunManifest::start("bench");
    let table = if let Some(fx) = &a.fixture {
        m.input(fx);
        let text = std::fs::read_to_string(fx).map_err(|e| Error::Data(format!("{}: {e}", fx.display())))?;
        BenchTable::from_fixture(&text)?
    } else {
        let ckpt = a
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Argument("bench needs --checkpoint or --fixture".into()))?;
        let model = Model::load(ckpt)?;
        m.input(ckpt);
        let files = expand_scenes(&a.scenes)?;
        let scenes = files
            .iter()
            .map(|f| {
                m.input(f);
                load_scene(f).map_err(Error::from)
            })
            .collect::<Result<Vec<_>>>()?;
        let bank = load_bank(&model, a.judge.bank.as_deref(), &mut m)?;
        let judge = make_judge(&a.judge)?;
        let base = TtsConfig { k_s: a.ks, seed: a.seed, ..TtsConfig::default() };
        run_bench(&model, &scenes, &a.n, &bank, judge.as_ref(), &base)?
    };
    let json_text = pretty(&table.to_json());
    match a.format {
        Format::Json => print!("{json_text}"),
        Format::Text => print!("{}", table.to_text()),
    }
    m.seed("seed", a.seed);
    m.config = json!({"n": a.n, "ks": a.ks, "seed": a.seed, "fixture": a.fixture, "judge": judge_snapshot(&a.judge)});
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_file(&dir.join("bench.json"), &json_text, &mut m)?;
        write_file(&dir.join("bench.txt"), &table.to_text(), &mut m)?;
        finish(m, dir)?;
    }
    Ok(())
}

fn cmd_judge_stub(a: StubArgs) -> Result<()> {
    let mode: StubMode = a.mode.parse()?;
    let stub = JudgeStub::spawn(StubConfig { mode, delay_ms: a.delay_ms }, a.port)?;
    println!("{}", stub.endpoint());
    let _ = std::io::stdout().flush();
    eprintln!("judge stub listening; stop with Ctrl-C");
    stub.wait();
    Ok(())
}

fn cmd_toy(a: ToyArgs) -> Result<()> {
    let mut m = RunManifest::start("toy");
    if a.replicas == 0 {
        return Err(Error::Argument("--replicas must be at least 1".into()));
    }
    let train = toy::toy_replicated(a.replicas)?;
    for p in toy::write_data_dir(&train, &a.out)? {
        m.output(&p);
    }
    for p in toy::write_data_dir(&toy::toy_eval_set()?, &a.out.join("eval"))? {
        m.output(&p);
    }
    let cfg = toy::toy_train_config();
    write_file(&a.out.join("train.cfg"), &cfg.render(), &mut m)?;
    m.seed("eval_sample_seed", 0xE7A1);
    m.config = json!({"replicas": a.replicas});
    finish(m, &a.out)?;
    println!("{}", a.out.display());
    Ok(())
}
