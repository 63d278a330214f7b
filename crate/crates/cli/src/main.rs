use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};

use gazesteer::ablation::{run_ablation, AblationGridSpec, Adaptation};
use gazesteer::checkpoint::Checkpoint;
use gazesteer::config::{KvConfig, CONFIG_ENV};
use gazesteer::data::{load_dataset, write_dataset, Corpus, FeatureSpec, Manifest};
use gazesteer::eval::evaluate;
use gazesteer::host::{ResamplerSharing, SeqInput};
use gazesteer::model::{Model, ModelConfig, ModelScale, Stage};
use gazesteer::scanpath::GazeScheme;
use gazesteer::synthvideo::FeatureMode;
use gazesteer::taskgen::{gen_dataset, split_by_video, Dataset, DatasetConfig, TaskMix};
use gazesteer::train::gradcheck::{grad_check, randomize_zero_init, GradCheckConfig, Probe};
use gazesteer::train::{run_stage, TrainConfig};

/// Every key a configuration file may set. Flags use the same names with
/// dashes.
const KNOWN_KEYS: &[&str] = &[
    "seed",
    "videos",
    "items_per_video",
    "tasks",
    "split_seed",
    "data",
    "out",
    "scheme",
    "backbone",
    "sharing",
    "scale",
    "lr",
    "weight_decay",
    "warmup_steps",
    "grad_accum",
    "epochs",
    "patience",
    "gaze_free",
    "split",
    "schemes",
    "backbones",
    "sharings",
    "adaptations",
    "replicates",
    "tolerance",
    "h",
    "max_coords",
];

#[derive(Parser, Debug)]
#[command(
    name = "gazesteer",
    version,
    about = "Gaze-steered resampler injection into a small decoder"
)]
struct Cli {
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset, its scanpaths and a manifest.
    GenData(GenDataArgs),
    /// Train stage 1 (resamplers) or stage 2 (resamplers + LoRA).
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Run the G x B x S x A ablation grid.
    Ablate(AblateArgs),
    /// Finite-difference gradient check on the tiny configuration.
    GradCheck(GradCheckArgs),
    /// Attach, evaluate, detach, evaluate and re-attach a checkpoint.
    AttachDemo(AttachDemoArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    videos: Option<usize>,
    #[arg(long)]
    items_per_video: Option<usize>,
    /// Task mix, e.g. `all`, `oi_hard` or `oi_hard:2,nfi`.
    #[arg(long)]
    tasks: Option<TaskMix>,
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct TrainKnobs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    grad_accum: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["1", "2"])]
    stage: String,
    /// Stage-1 checkpoint to continue from (stage 2).
    #[arg(long, conflicts_with = "from_scratch")]
    from_ckpt: Option<PathBuf>,
    /// Start stage 2 from freshly initialised weights.
    #[arg(long)]
    from_scratch: bool,
    #[arg(long)]
    scheme: Option<GazeScheme>,
    #[arg(long)]
    backbone: Option<FeatureMode>,
    #[arg(long)]
    sharing: Option<ResamplerSharing>,
    /// Model size preset: desk or compact.
    #[arg(long)]
    scale: Option<ModelScale>,
    #[arg(long)]
    seed: Option<u64>,
    /// Feed empty scanpaths (gaze-free control).
    #[arg(long)]
    gaze_free: bool,
    #[command(flatten)]
    knobs: TrainKnobs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    backbone: Option<FeatureMode>,
    #[arg(long)]
    gaze_free: bool,
    /// Print a JSON record instead of the table.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    schemes: Option<Vec<GazeScheme>>,
    #[arg(long, value_delimiter = ',')]
    backbones: Option<Vec<FeatureMode>>,
    #[arg(long, value_delimiter = ',')]
    sharings: Option<Vec<ResamplerSharing>>,
    #[arg(long, value_delimiter = ',')]
    adaptations: Option<Vec<Adaptation>>,
    #[arg(long)]
    scale: Option<ModelScale>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    knobs: TrainKnobs,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    /// Encoding to check; all three when omitted.
    #[arg(long)]
    scheme: Option<GazeScheme>,
    #[arg(long, value_parser = ["1", "2"], default_value = "2")]
    stage: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    max_coords: Option<usize>,
}

#[derive(Args, Debug)]
struct AttachDemoArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    backbone: Option<FeatureMode>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn usage_error(msg: &str) -> ! {
    Cli::command()
        .error(clap::error::ErrorKind::ArgumentConflict, msg)
        .exit()
}

fn run(cli: Cli) -> Result<()> {
    let kv = match &cli.config {
        Some(p) => KvConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => KvConfig::default(),
    };
    kv.check_known(KNOWN_KEYS)?;
    match cli.cmd {
        Command::GenData(a) => gen_data(&kv, a),
        Command::Train(a) => train(&kv, a),
        Command::Eval(a) => eval(&kv, a),
        Command::Ablate(a) => ablate(&kv, a),
        Command::GradCheck(a) => gradcheck(&kv, a),
        Command::AttachDemo(a) => attach_demo(&kv, a),
    }
}

fn required(kv: &KvConfig, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
    match flag.or(kv.get::<PathBuf>(key)?) {
        Some(p) => Ok(p),
        None => usage_error(&format!(
            "--{} is required (flag or `{key}` in the config file)",
            key.replace('_', "-")
        )),
    }
}

fn bool_flag(kv: &KvConfig, key: &str, flag: bool) -> Result<bool> {
    Ok(flag || kv.get::<bool>(key)?.unwrap_or(false))
}

fn gen_data(kv: &KvConfig, a: GenDataArgs) -> Result<()> {
    let out = required(kv, "out", a.out)?;
    let reference = ModelConfig::new(GazeScheme::CoordPe, ResamplerSharing::PerLayer);
    let cfg = DatasetConfig {
        seed: kv.resolve("seed", a.seed, 0)?,
        n_videos: kv.resolve("videos", a.videos, 40)?,
        items_per_video: kv.resolve("items_per_video", a.items_per_video, 40)?,
        mix: kv.resolve("tasks", a.tasks, TaskMix::uniform())?,
        ..DatasetConfig::default()
    };
    let split_seed = kv.resolve("split_seed", a.split_seed, cfg.seed)?;
    let dataset = gen_dataset(&cfg, reference.tokens_per_frame(), reference.host.vocab_size)?;
    let split = split_by_video(&dataset.items, [0.70, 0.15, 0.15], split_seed)?;
    let manifest = write_dataset(&out, &dataset, &split, split_seed)?;
    println!(
        "wrote {} items from {} videos ({}/{}/{} train/val/test) to {}",
        dataset.items.len(),
        dataset.scenes.len(),
        split.train.len(),
        split.val.len(),
        split.test.len(),
        out.display()
    );
    println!("manifest {}", manifest.hash);
    Ok(())
}

fn train_config(kv: &KvConfig, k: &TrainKnobs, seed: u64, gaze_free: bool) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        lr: kv.resolve("lr", k.lr, d.lr)?,
        weight_decay: kv.resolve("weight_decay", k.weight_decay, d.weight_decay)?,
        warmup_steps: kv.resolve("warmup_steps", k.warmup_steps, d.warmup_steps)?,
        grad_accum: kv.resolve("grad_accum", k.grad_accum, d.grad_accum)?,
        max_epochs: kv.resolve("epochs", k.epochs, d.max_epochs)?,
        patience: kv.resolve("patience", k.patience, d.patience)?,
        seed,
        gaze_free,
        ..d
    })
}

fn corpus_for(dataset: Dataset, cfg: &ModelConfig, mode: FeatureMode) -> Result<Corpus> {
    let spec = FeatureSpec::for_model(cfg, mode, dataset.cfg.seed);
    Ok(Corpus::build(dataset, spec)?)
}

fn train(kv: &KvConfig, a: TrainArgs) -> Result<()> {
    let stage = if a.stage == "1" { Stage::One } else { Stage::Two };
    if stage == Stage::Two && a.from_ckpt.is_none() && !a.from_scratch {
        usage_error("stage 2 needs a stage-1 checkpoint (--from-ckpt) or --from-scratch");
    }
    if stage == Stage::One && (a.from_ckpt.is_some() || a.from_scratch) {
        usage_error("--from-ckpt and --from-scratch only apply to stage 2");
    }
    let data = required(kv, "data", a.data)?;
    let out = required(kv, "out", a.out)?;
    let seed = kv.resolve("seed", a.seed, 0)?;
    let backbone = kv.resolve("backbone", a.backbone, FeatureMode::Temporal)?;
    let gaze_free = bool_flag(kv, "gaze_free", a.gaze_free)?;
    let cfg = train_config(kv, &a.knobs, seed, gaze_free)?;

    let mut model = match &a.from_ckpt {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            if ck.stage != Stage::One {
                bail!(
                    "{} is a stage-{} checkpoint; stage 2 continues from stage 1",
                    p.display(),
                    ck.stage
                );
            }
            if a.scheme.is_some_and(|s| s != ck.config.resampler.gaze.scheme)
                || a.sharing.is_some_and(|s| s != ck.config.sharing())
                || a.scale.is_some()
            {
                usage_error("--scheme/--sharing/--scale contradict or duplicate the checkpoint's configuration");
            }
            ck.into_model()?
        }
        None => {
            let scheme = kv.resolve("scheme", a.scheme, GazeScheme::CoordPe)?;
            let sharing = kv.resolve("sharing", a.sharing, ResamplerSharing::PerLayer)?;
            let scale = kv.resolve("scale", a.scale, ModelScale::Desk)?;
            Model::new(scale.config(scheme, sharing), seed)?
        }
    };

    let (dataset, manifest) = load_dataset(&data)?;
    let corpus = corpus_for(dataset, &model.cfg, backbone)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let log_path = out.join(format!("metrics_stage{}.jsonl", stage as u8));
    let mut log =
        BufWriter::new(fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let report = run_stage(&mut model, &corpus, &manifest.split, stage, &cfg, Some(&mut log))?;
    log.flush()?;

    let ck_path = out.join(format!("stage{}.ckpt", stage as u8));
    let seeds = BTreeMap::from([("model".to_string(), seed), ("data".to_string(), manifest.seed)]);
    let metrics = BTreeMap::from([
        ("best_val_accuracy".to_string(), report.best_val_accuracy),
        ("best_epoch".to_string(), report.best_epoch as f64),
        ("steps".to_string(), report.steps as f64),
    ]);
    Checkpoint::from_model(&model, seeds, metrics).save(&ck_path)?;
    println!(
        "stage {} best val {:.2}% at epoch {} ({} epochs, {} steps)",
        stage,
        100.0 * report.best_val_accuracy,
        report.best_epoch,
        report.epochs_run,
        report.steps
    );
    print!("{}", report.final_val.table());
    println!("checkpoint {}", ck_path.display());
    println!("metrics {}", log_path.display());
    Ok(())
}

fn load_eval_inputs(
    kv: &KvConfig,
    ckpt: &Path,
    data: Option<PathBuf>,
    backbone: Option<FeatureMode>,
) -> Result<(Model, Corpus, Manifest)> {
    let data = required(kv, "data", data)?;
    let backbone = kv.resolve("backbone", backbone, FeatureMode::Temporal)?;
    let model = Checkpoint::load(ckpt)
        .with_context(|| format!("loading {}", ckpt.display()))?
        .into_model()?;
    let (dataset, manifest) = load_dataset(&data)?;
    let corpus = corpus_for(dataset, &model.cfg, backbone)?;
    Ok((model, corpus, manifest))
}

fn eval(kv: &KvConfig, a: EvalArgs) -> Result<()> {
    let (model, corpus, manifest) = load_eval_inputs(kv, &a.ckpt, a.data, a.backbone)?;
    let split = kv.resolve("split", a.split, "test".to_string())?;
    let items = corpus.items_of(manifest.split.part(&split)?);
    let report = evaluate(&model, &corpus, &items, bool_flag(kv, "gaze_free", a.gaze_free)?)?;
    if a.json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        println!("split {split} ({} items)", report.items);
        print!("{}", report.table());
    }
    Ok(())
}

/// Axis options from the flag, else a comma list in the file, else all.
fn axis<T>(kv: &KvConfig, key: &str, flag: Option<Vec<T>>, all: &[T]) -> Result<Vec<T>>
where
    T: FromStr<Err = gazesteer::Error> + Clone,
{
    if let Some(v) = flag {
        return Ok(v);
    }
    match kv.get::<String>(key)? {
        Some(s) => s.split(',').map(|p| Ok(p.trim().parse()?)).collect(),
        None => Ok(all.to_vec()),
    }
}

fn ablate(kv: &KvConfig, a: AblateArgs) -> Result<()> {
    let data = required(kv, "data", a.data)?;
    let out = required(kv, "out", a.out)?;
    let spec = AblationGridSpec {
        schemes: axis(kv, "schemes", a.schemes, &GazeScheme::ALL)?,
        backbones: axis(kv, "backbones", a.backbones, &FeatureMode::ALL)?,
        sharing: axis(kv, "sharings", a.sharings, &ResamplerSharing::ALL)?,
        adaptation: axis(kv, "adaptations", a.adaptations, &Adaptation::ALL)?,
        scale: kv.resolve("scale", a.scale, ModelScale::Desk)?,
        base_seed: kv.resolve("seed", a.seed, 0)?,
        replicates: kv.resolve("replicates", a.replicates, 1)?,
    };
    let mut knobs = a.knobs.clone();
    knobs.epochs = Some(kv.resolve("epochs", knobs.epochs, 5)?);
    let cfg = train_config(kv, &knobs, spec.base_seed, false)?;
    let (dataset, manifest) = load_dataset(&data)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let total = spec.cells().len() * spec.replicates;
    let mut done = 0;
    let report = run_ablation(&spec, &dataset, &manifest.split, &manifest.hash, &cfg, |r| {
        done += 1;
        match (&r.error, r.mean_accuracy) {
            (Some(e), _) => eprintln!("[{done}/{total}] {} rep {} failed: {e}", r.cell, r.replicate),
            (None, Some(m)) => eprintln!("[{done}/{total}] {} rep {} test {:.1}%", r.cell, r.replicate, 100.0 * m),
            (None, None) => {}
        }
    })?;
    fs::write(out.join("ablation.jsonl"), report.to_jsonl()?)?;
    fs::write(out.join("ablation.txt"), report.table())?;
    print!("{}", report.table());
    Ok(())
}

fn gradcheck(kv: &KvConfig, a: GradCheckArgs) -> Result<()> {
    let d = GradCheckConfig::default();
    let seed = kv.resolve("seed", a.seed, 0)?;
    let cfg = GradCheckConfig {
        h: kv.resolve("h", a.h, d.h)?,
        max_coords: kv.resolve("max_coords", a.max_coords, d.max_coords)?,
        tolerance: kv.resolve("tolerance", a.tolerance, d.tolerance)?,
        seed,
        ..d
    };
    let stage = if a.stage == "1" { Stage::One } else { Stage::Two };
    let schemes = match a.scheme.or(kv.get("scheme")?) {
        Some(s) => vec![s],
        None => GazeScheme::ALL.to_vec(),
    };
    let mut failed = Vec::new();
    for scheme in schemes {
        let mut model = Model::new(ModelConfig::tiny(scheme), seed)?;
        model.set_stage(stage);
        randomize_zero_init(&mut model.store, 0.3, seed.wrapping_add(1))?;
        let probe = Probe::random(&model, 2, seed.wrapping_add(2))?;
        let frames = probe.frames();
        let seq = SeqInput {
            tokens: &probe.tokens,
            frames: &frames,
        };
        let report = grad_check(&model, &seq, probe.correct, &cfg)?;
        println!("{scheme} (stage {stage})");
        for t in &report.tensors {
            println!(
                "  {:<28} {:<17} {:>3} coords  max rel err {:.2e}",
                t.name, t.class, t.checked, t.max_rel_err
            );
        }
        if let Err(e) = report.check() {
            failed.push(format!("{scheme}: {e}"));
        }
    }
    if !failed.is_empty() {
        bail!("{}", failed.join("; "));
    }
    println!("all tensors below {:.0e}", cfg.tolerance);
    Ok(())
}

fn attach_demo(kv: &KvConfig, a: AttachDemoArgs) -> Result<()> {
    let (mut model, corpus, manifest) = load_eval_inputs(kv, &a.ckpt, a.data, a.backbone)?;
    let split = kv.resolve("split", a.split, "val".to_string())?;
    let items = corpus.items_of(manifest.split.part(&split)?);
    let logits = |m: &Model| -> Result<Vec<[f64; 4]>> {
        items
            .iter()
            .map(|item| {
                let frames = corpus.frames(item, false)?;
                let seq = SeqInput {
                    tokens: &item.prompt_tokens,
                    frames: &frames,
                };
                Ok(m.predict_logits(&seq)?)
            })
            .collect()
    };
    let attached = evaluate(&model, &corpus, &items, false)?;
    let before = logits(&model)?;
    model.detach()?;
    let detached = evaluate(&model, &corpus, &items, false)?;
    let base = logits(&model)?;
    model.attach()?;
    let after = logits(&model)?;
    let reattached = evaluate(&model, &corpus, &items, false)?;
    let same_bits = |x: &[[f64; 4]], y: &[[f64; 4]]| {
        x.iter()
            .flatten()
            .zip(y.iter().flatten())
            .all(|(a, b)| a.to_bits() == b.to_bits())
    };
    let gap = before
        .iter()
        .flatten()
        .zip(base.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("split {split} ({} items)", items.len());
    println!("attached    {:.2}%", 100.0 * attached.mean_accuracy);
    println!("detached    {:.2}%", 100.0 * detached.mean_accuracy);
    println!("re-attached {:.2}%", 100.0 * reattached.mean_accuracy);
    println!("max |attached - detached| answer logit {gap:.3e}");
    if !same_bits(&before, &after) {
        bail!("re-attached logits differ from the first attached pass");
    }
    println!("re-attached logits are bit-identical to the first pass");
    Ok(())
}
