use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use ovseg::dataset::{read_jsonl, write_json, write_jsonl, Dataset, Vocabulary};
use ovseg::encoder::text::default_templates;
use ovseg::encoder::{EncoderConfig, EncoderState, VocabularyEmbeddings};
use ovseg::mining::{mine_dataset, training_pairs, CategorySource, MaskCategoryPair, MaskSource, MineOptions};
use ovseg::numerics::rng::derive_seed;
use ovseg::pipeline::{
    oracle_class_analysis, oracle_mask_analysis, segment, synth_generate, write_dataset, EncoderClassifier,
    IouAccumulator, OracleSample, ProposalPrediction, ProposalSet, SegmentOptions, SegmentationMap, SynthConfig,
};
use ovseg::tuning::{pretrain, train, PretrainConfig, TrainConfig, TrainMode};

use crate::manifest::RunManifest;
use crate::{
    Cli, Command, EvalArgs, MineArgs, OracleArgs, Preset, PretrainArgs, SegmentArgs, SynthArgs, TuneArgs, Which,
};

pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const PRED_DIR: &str = "pred";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_FILE: &str = "report.json";

/// Bad invocation detected before any work starts.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<ovseg::Error>() {
            if e.is_config_error() {
                return 2;
            }
        }
    }
    1
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(UsageError(format!("input {} does not exist", path.display())).into());
    }
    Ok(())
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let g = Globals { seed: cli.seed, jobs: cli.jobs };
    match cli.command {
        Command::Synth(a) => synth(g, a),
        Command::Pretrain(a) => pretrain_cmd(g, a),
        Command::Mine(a) => mine(g, a),
        Command::Tune(a) => tune(g, a),
        Command::Segment(a) => segment_cmd(g, a),
        Command::Eval(a) => eval(g, a),
        Command::Oracle(a) => oracle(g, a),
    }
}

#[derive(Debug, Clone, Copy)]
struct Globals {
    seed: u64,
    jobs: usize,
}

/// Loads a checkpoint, or initialises the default toy encoder from the seed.
fn encoder_or_fresh(path: Option<&Path>, seed: u64) -> Result<EncoderState<f32>> {
    match path {
        Some(p) => {
            require(p)?;
            EncoderState::load(p).with_context(|| format!("loading encoder {}", p.display()))
        }
        None => Ok(EncoderState::init(EncoderConfig::default(), derive_seed(seed, "encoder"))?),
    }
}

fn open_dataset(path: &Path) -> Result<Dataset> {
    require(path)?;
    Dataset::open(path).with_context(|| format!("opening dataset {}", path.display()))
}

fn synth(g: Globals, a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        count: a.count,
        side: a.side,
        min_shapes: a.min_shapes,
        max_shapes: a.max_shapes,
        jitter: a.jitter,
        captions_per_image: a.captions_per_image,
        clutter: a.clutter,
        embed_dim: (a.embed_dim > 0).then_some(a.embed_dim),
        embed_noise: a.embed_noise,
        seed: g.seed,
    };
    cfg.validate()?;
    let scenes = synth_generate(&cfg)?;
    write_dataset(&a.out, &cfg, &scenes)?;
    RunManifest::new("synth", g.seed, g.jobs, &cfg).write(&a.out)?;
    println!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}

fn pretrain_cmd(g: Globals, a: PretrainArgs) -> Result<()> {
    let cfg = PretrainConfig {
        images: a.images,
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        temperature: a.tau,
        seed: g.seed,
        jobs: g.jobs,
    };
    let out = pretrain::<f32>(EncoderConfig::default(), &cfg)?;
    out.state.save(&a.out)?;
    write_jsonl(&a.out.join(METRICS_FILE), &out.log)?;
    RunManifest::new("pretrain", g.seed, g.jobs, &cfg).write(&a.out)?;
    if let Some(last) = out.log.last() {
        println!("final loss {:.4}, top-1 {:.3}", last.loss, last.top1);
    }
    Ok(())
}

#[derive(Serialize)]
struct MineRun<'a> {
    data: &'a Path,
    encoder: Option<&'a Path>,
    options: MineOptions,
}

fn mine(g: Globals, a: MineArgs) -> Result<()> {
    let ds = open_dataset(&a.data)?;
    let state = encoder_or_fresh(a.encoder.as_deref(), g.seed)?;
    let opts = MineOptions {
        captions_per_image: a.captions_per_image,
        mask_source: if a.use_gt_masks { MaskSource::Gt } else { MaskSource::Proposals },
        category_source: if a.use_gt_classes { CategorySource::GtClasses } else { CategorySource::Captions },
        min_score: a.min_score,
        jobs: g.jobs,
    };
    let (pairs, stats) = mine_dataset(&ds, &state, &opts)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_jsonl(&a.out.join(PAIRS_FILE), &pairs)?;
    write_json(&a.out.join(STATS_FILE), &stats)?;
    let run = MineRun { data: &a.data, encoder: a.encoder.as_deref(), options: opts };
    RunManifest::new("mine", g.seed, g.jobs, run).write(&a.out)?;
    println!("{} pairs, {} unique nouns", stats.pairs, stats.unique_nouns);
    Ok(())
}

#[derive(Serialize)]
struct TuneRun<'a> {
    data: &'a Path,
    pairs: &'a Path,
    init: Option<&'a Path>,
    preset: &'static str,
    trained_groups: Vec<&'static str>,
    train: &'a TrainConfig,
}

fn tune(g: Globals, a: TuneArgs) -> Result<()> {
    let ds = open_dataset(&a.data)?;
    let pairs_path = if a.pairs.is_dir() { a.pairs.join(PAIRS_FILE) } else { a.pairs.clone() };
    require(&pairs_path)?;
    let mode: TrainMode = a.mode.parse()?;
    let preset = match a.preset {
        Preset::Paper => "paper",
        Preset::Desk => "desk",
    };
    let mut cfg = TrainConfig::preset(preset, mode)?;
    cfg.seed = g.seed;
    cfg.jobs = g.jobs;
    cfg.prompt_depth = a.prompt_depth;
    if let Some(e) = a.epochs {
        cfg.mpt.epochs = e;
        cfg.ft.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    let init = encoder_or_fresh(a.init.as_deref(), g.seed)?;

    let mined: Vec<MaskCategoryPair> = read_jsonl(&pairs_path)?;
    let crops = training_pairs(&ds, &mined, init.config.image_side, init.config.patch_size, false)?;
    let out = train(&crops, &cfg, init)?;
    out.state.save(&a.out.join(CHECKPOINT_DIR))?;
    write_jsonl(&a.out.join(METRICS_FILE), &out.log)?;

    let trained_groups = match mode {
        TrainMode::Mpt => vec!["prompts"],
        TrainMode::Ft => vec!["encoder"],
        _ => vec!["encoder", "prompts"],
    };
    let run = TuneRun {
        data: &a.data,
        pairs: &a.pairs,
        init: a.init.as_deref(),
        preset,
        trained_groups,
        train: &cfg,
    };
    RunManifest::new("tune", g.seed, g.jobs, run).write(&a.out)?;
    if let Some(last) = out.log.last() {
        println!("{mode}: final loss {:.4}, top-1 {:.3}", last.loss, last.top1);
    }
    Ok(())
}

#[derive(Serialize)]
struct SegmentRun<'a> {
    data: &'a Path,
    encoder: Option<&'a Path>,
    lambda: f64,
    applied_lambda: f64,
    tau: f64,
    keep_background: bool,
    min_confidence: Option<f64>,
    use_embeddings: bool,
}

#[derive(Serialize)]
struct ImagePredictions<'a> {
    image_id: &'a str,
    proposals: &'a [ProposalPrediction],
}

fn segment_cmd(g: Globals, a: SegmentArgs) -> Result<()> {
    let ds = open_dataset(&a.data)?;
    let state = encoder_or_fresh(a.encoder.as_deref(), g.seed)?;
    let opts = SegmentOptions {
        lambda: a.lambda,
        tau: a.tau,
        keep_background: a.keep_background,
        min_confidence: a.min_confidence,
        jobs: g.jobs,
    };
    opts.validate()?;
    let use_embeddings = ds.manifest().has_embeddings && !a.no_embeddings;
    let mut vocab = VocabularyEmbeddings::<f32>::build(&ds.vocab().names(), &default_templates(), state.config.dim)?;
    if use_embeddings {
        vocab = vocab.with_default_no_object()?;
    }

    let pred_dir = a.out.join(PRED_DIR);
    std::fs::create_dir_all(&pred_dir).with_context(|| format!("creating {}", pred_dir.display()))?;
    let mut rows = Vec::new();
    let mut degradations = BTreeSet::new();
    let mut applied = a.lambda;
    for id in ds.ids() {
        let image = ds.image(id)?;
        let mut set = ProposalSet::new(ds.proposals(id)?)?;
        if use_embeddings {
            if let Some(e) = ds.proposal_embeddings(id)? {
                set = set.with_embeddings(e)?;
            }
        }
        let out = segment(&image, &set, &vocab, &state, &opts).with_context(|| format!("segmenting {id}"))?;
        out.map.save_png(&pred_dir.join(format!("{id}.png")))?;
        degradations.extend(out.degradations);
        applied = applied.max(out.lambda);
        rows.push((id.clone(), out.predictions));
    }
    let lines: Vec<ImagePredictions> =
        rows.iter().map(|(id, p)| ImagePredictions { image_id: id, proposals: p }).collect();
    write_jsonl(&a.out.join(PREDICTIONS_FILE), &lines)?;
    ds.vocab().save(&a.out.join(ovseg::dataset::VOCAB_FILE))?;

    let run = SegmentRun {
        data: &a.data,
        encoder: a.encoder.as_deref(),
        lambda: a.lambda,
        applied_lambda: applied,
        tau: a.tau,
        keep_background: a.keep_background,
        min_confidence: a.min_confidence,
        use_embeddings,
    };
    let mut m = RunManifest::new("segment", g.seed, g.jobs, run);
    m.degradations = degradations.into_iter().collect();
    for d in &m.degradations {
        eprintln!("warning: {d}");
    }
    m.write(&a.out)?;
    println!("segmented {} images", ds.ids().len());
    Ok(())
}

/// Sorted stems of the PNG files in `dir`.
fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(s) = path.file_stem().and_then(|s| s.to_str()) {
                out.push(s.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Serialize)]
struct EvalRun<'a> {
    pred: &'a Path,
    gt: &'a Path,
    vocab: &'a Path,
    seen_list: Option<&'a Path>,
    images: usize,
}

fn eval(g: Globals, a: EvalArgs) -> Result<()> {
    for p in [&a.pred, &a.gt, &a.vocab] {
        require(p)?;
    }
    let mut vocab = Vocabulary::load(&a.vocab)?;
    if let Some(path) = &a.seen_list {
        require(path)?;
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let names: Vec<String> =
            text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
        vocab = vocab.with_seen_list(&names)?;
    }
    let ids = png_stems(&a.gt)?;
    if ids.is_empty() {
        return Err(usage(format!("no ground-truth maps in {}", a.gt.display())));
    }
    let mut acc = IouAccumulator::new(vocab.len());
    for id in &ids {
        let gt = SegmentationMap::load_png(&a.gt.join(format!("{id}.png")))?;
        let pred_path = a.pred.join(format!("{id}.png"));
        if !pred_path.exists() {
            anyhow::bail!("no prediction for {id}");
        }
        let pred = SegmentationMap::load_png(&pred_path)?;
        acc.add(&pred, &gt).with_context(|| format!("scoring {id}"))?;
    }
    let report = acc.report(&vocab)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(&a.out.join(REPORT_FILE), &report)?;
    let run = EvalRun { pred: &a.pred, gt: &a.gt, vocab: &a.vocab, seen_list: a.seen_list.as_deref(), images: ids.len() };
    RunManifest::new("eval", g.seed, g.jobs, run).write(&a.out)?;
    print_report(&report);
    Ok(())
}

fn print_report(r: &ovseg::pipeline::EvalReport) {
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "mIoU {:.4}  seen {}  unseen {}  pixel acc {:.4}",
        r.miou,
        opt(r.seen_miou),
        opt(r.unseen_miou),
        r.pixel_accuracy
    );
}

#[derive(Serialize)]
struct OracleRun<'a> {
    data: &'a Path,
    which: &'static str,
    encoder: Option<&'a Path>,
    tau: f64,
    keep_background: bool,
}

fn oracle(g: Globals, a: OracleArgs) -> Result<()> {
    let ds = open_dataset(&a.data)?;
    if !(a.tau > 0.0 && a.tau.is_finite()) {
        return Err(usage(format!("--tau must be positive, got {}", a.tau)));
    }
    let samples: Vec<OracleSample> =
        ds.ids().iter().map(|id| OracleSample::load(&ds, id)).collect::<ovseg::Result<_>>()?;
    let report = match a.which {
        Which::Mask => {
            let state = encoder_or_fresh(a.encoder.as_deref(), g.seed)?;
            let vocab =
                VocabularyEmbeddings::<f32>::build(&ds.vocab().names(), &default_templates(), state.config.dim)?;
            let classifier = EncoderClassifier {
                state: &state,
                vocab: &vocab,
                tau: a.tau,
                keep_background: a.keep_background,
                jobs: g.jobs,
            };
            oracle_mask_analysis(&samples, &classifier, ds.vocab())?
        }
        Which::Class => oracle_class_analysis(&samples, ds.vocab())?,
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(&a.out.join(REPORT_FILE), &report)?;
    let run = OracleRun {
        data: &a.data,
        which: match a.which {
            Which::Mask => "mask",
            Which::Class => "class",
        },
        encoder: a.encoder.as_deref(),
        tau: a.tau,
        keep_background: a.keep_background,
    };
    RunManifest::new("oracle", g.seed, g.jobs, run).write(&a.out)?;
    print_report(&report);
    Ok(())
}
