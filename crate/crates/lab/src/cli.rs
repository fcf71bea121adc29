//! Command-line front end. Flags overlay an optional INI file, which overlays
//! the built-in defaults. The resolved configuration is echoed to stderr and
//! saved next to every output; CSV goes to stdout, logs to stderr.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use faster_core::aggregate::{AggregatorConfig, Method};
use faster_core::backbone::{output_sizes, BackboneConfig, Family};
use faster_core::flops::{aggregator_flops, backbone_flops, head_flops, schedule_flops, CostReport, ScheduleCosts};
use faster_core::gradcheck::{suite, SUITE_SEEDS};
use faster_core::optim::SgdConfig;
use faster_core::schedule::{ClipSchedule, PatternKind};
use faster_core::synth::{gen_task, Dataset, TaskKind, TaskSpec};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, Metadata};
use crate::config::Config;
use crate::dataset::{read_dataset, write_dataset};
use crate::error::{config_err, LabError, Result};
use crate::trainer::{
    evaluate_aggregator, evaluate_backbone, metrics_csv, train_aggregator, train_backbone, AggregatorModel, BackboneModel,
    Backbones, FeatureCache, Sampling, TrainOptions, TrainReport,
};

pub const THREADS_ENV: &str = "FASTER_LAB_THREADS";
pub const CONFIG_FILE: &str = "config.ini";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SWEEP_HEADER: &str = "pattern,frames,clips,gflops,top1";

#[derive(Debug, Parser)]
#[command(name = "faster-lab", version, about = "Mixed-cost video classification at desk scale")]
struct Cli {
    /// INI file overlaid on the defaults before any flag
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Set any configuration key, e.g. `--set train.lr=0.1` (repeatable)
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset file
    Gen(GenArgs),
    /// Train a backbone (stage one) or an aggregator on frozen backbones (stage two)
    Train(TrainArgs),
    /// Evaluate a backbone or aggregator checkpoint
    Eval(EvalArgs),
    /// Print the analytic cost of a backbone or a whole clip schedule
    Flops(FlopsArgs),
    /// Accuracy and cost over a grid of patterns and clip lengths
    Sweep(SweepArgs),
    /// Run the finite-difference gradient suite
    Gradcheck(GradcheckArgs),
}

/// Each field maps onto one configuration key.
macro_rules! flag_group {
    ($name:ident { $($field:ident => $key:literal),* $(,)? }) => {
        #[derive(Debug, Args)]
        struct $name {
            $(
                #[arg(long)]
                $field: Option<String>,
            )*
        }

        impl $name {
            fn overrides(&self) -> Vec<(&'static str, Option<&String>)> {
                vec![$(($key, self.$field.as_ref())),*]
            }
        }
    };
}

flag_group!(GenFlags {
    task => "data.task",
    n => "data.n",
    frames => "data.frames",
    resolution => "data.resolution",
    classes => "data.classes",
    noise => "data.noise",
    event_len => "data.event_len",
    slow_speed => "data.slow_speed",
    fast_speed => "data.fast_speed",
    dot_radius => "data.dot_radius",
    seed => "data.seed",
    out => "paths.out",
});

flag_group!(TrainFlags {
    stage => "train.stage",
    data => "paths.data",
    test_data => "paths.test_data",
    out => "paths.out",
    expensive => "paths.expensive",
    cheap => "paths.cheap",
    family => "model.family",
    method => "model.method",
    reduction => "model.reduction",
    gate_bias => "model.gate_bias",
    clip_len => "schedule.clip_len",
    clips => "schedule.clips",
    pattern => "schedule.pattern",
    preset => "schedule.preset",
    epochs => "train.epochs",
    batch_size => "train.batch_size",
    lr => "train.lr",
    momentum => "train.momentum",
    weight_decay => "train.weight_decay",
    seed => "train.seed",
    augment => "train.augment",
    sampling => "train.sampling",
    feature_cache => "train.feature_cache",
});

flag_group!(EvalFlags {
    checkpoint => "paths.checkpoint",
    data => "paths.data",
    out => "paths.out",
    expensive => "paths.expensive",
    cheap => "paths.cheap",
    clips => "schedule.clips",
    top_k => "eval.top_k",
});

flag_group!(FlopsFlags {
    backbone => "flops.backbone",
    scale => "flops.scale",
    resolution => "flops.resolution",
    frames => "flops.frames",
    clips => "flops.clips",
    pattern => "flops.pattern",
    method => "flops.method",
    expensive => "flops.expensive",
    cheap => "flops.cheap",
    reduction => "model.reduction",
});

flag_group!(SweepFlags {
    patterns => "sweep.patterns",
    frames => "sweep.frames",
    budget => "sweep.budget",
    data => "paths.data",
    test_data => "paths.test_data",
    checkpoint => "paths.checkpoint",
    expensive => "paths.expensive",
    cheap => "paths.cheap",
    out => "paths.out",
    method => "model.method",
    reduction => "model.reduction",
    gate_bias => "model.gate_bias",
    epochs => "train.epochs",
    batch_size => "train.batch_size",
    lr => "train.lr",
    seed => "train.seed",
    sampling => "train.sampling",
});

#[derive(Debug, Args)]
struct GenArgs {
    #[command(flatten)]
    flags: GenFlags,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    flags: EvalFlags,
}

#[derive(Debug, Args)]
struct FlopsArgs {
    #[command(flatten)]
    flags: FlopsFlags,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    flags: SweepFlags,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Run every case
    #[arg(long)]
    all: bool,
    /// Run one named case (repeatable)
    #[arg(long = "case")]
    cases: Vec<String>,
    /// Seeds per case
    #[arg(long, default_value_t = SUITE_SEEDS)]
    seeds: u64,
}

/// Parse `argv`, run the command and return the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    init_logging();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    let mut out = std::io::stdout().lock();
    match dispatch(cli, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::default().default_filter_or("info");
    let _ = env_logger::Builder::from_env(env)
        .target(env_logger::Target::Stderr)
        .format_timestamp(None)
        .try_init();
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| config_err(format!("{}='{}' is not a positive integer", THREADS_ENV, raw)))?;
    // A pool already built by an earlier call in this process is kept.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn resolve(file: Option<&Path>, set: &[String], overrides: Vec<(&'static str, Option<&String>)>) -> Result<Config> {
    let mut cfg = Config::default();
    if let Some(f) = file {
        cfg.overlay_file(f)?;
    }
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, v.as_str())?;
        }
    }
    for item in set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| config_err(format!("--set expects section.key=value, got '{}'", item)))?;
        cfg.set(k.trim(), v.trim())?;
    }
    apply_preset(&mut cfg)?;
    eprint!("# resolved configuration\n{}", cfg.dump());
    Ok(cfg)
}

/// Named schedules: `faster16` is L=16 with 1:7, `faster32` is L=32 with 1:1.
fn apply_preset(cfg: &mut Config) -> Result<()> {
    let preset: Option<String> = cfg.opt("schedule.preset")?;
    let (l, pattern) = match preset.as_deref() {
        None => return Ok(()),
        Some("faster16") => ("16", "1:7"),
        Some("faster32") => ("32", "1:1"),
        Some(other) => return Err(config_err(format!("unknown preset '{}' (faster16, faster32)", other))),
    };
    cfg.set("schedule.clip_len", l)?;
    cfg.set("schedule.pattern", pattern)
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let file = cli.config.as_deref();
    match cli.command {
        Command::Gen(a) => cmd_gen(&resolve(file, &cli.set, a.flags.overrides())?, out),
        Command::Train(a) => cmd_train(&resolve(file, &cli.set, a.flags.overrides())?, out),
        Command::Eval(a) => cmd_eval(&resolve(file, &cli.set, a.flags.overrides())?, out),
        Command::Flops(a) => cmd_flops(&resolve(file, &cli.set, a.flags.overrides())?, out),
        Command::Sweep(a) => cmd_sweep(&resolve(file, &cli.set, a.flags.overrides())?, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| LabError::io("<stdout>", e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| LabError::io(path, e))
}

/// `<file>.ini` beside a file output.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn task_spec(cfg: &Config) -> Result<TaskSpec> {
    let kind: TaskKind = cfg.get("data.task")?;
    let (frames, res) = (cfg.get("data.frames")?, cfg.get("data.resolution")?);
    let mut spec = match kind {
        TaskKind::Order => TaskSpec::order(frames, res),
        TaskKind::Speed => TaskSpec::speed(frames, res),
    };
    spec.num_classes = cfg.get("data.classes")?;
    spec.noise = cfg.get("data.noise")?;
    if kind == TaskKind::Order {
        spec.event_len = cfg.get("data.event_len")?;
    } else {
        spec.slow_speed = cfg.get("data.slow_speed")?;
        spec.fast_speed = cfg.get("data.fast_speed")?;
        spec.dot_radius = cfg.get("data.dot_radius")?;
    }
    Ok(spec)
}

fn cmd_gen(cfg: &Config, out: &mut dyn Write) -> Result<()> {
    let spec = task_spec(cfg)?;
    let n: usize = cfg.get("data.n")?;
    let path = cfg.path("paths.out")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.get("data.seed")?);
    let data = gen_task(&spec, n, &mut rng)?;
    write_dataset(&path, &data)?;
    write_file(&sibling(&path, ".ini"), &cfg.dump())?;
    info!("wrote {} {} videos to {}", n, spec.kind, path.display());
    let mut csv = String::from("class,count\n");
    for (k, c) in data.label_counts().iter().enumerate() {
        csv.push_str(&format!("{k},{c}\n"));
    }
    emit(out, &csv)
}

fn load_data(cfg: &Config, key: &str, classes: Option<usize>) -> Result<Dataset> {
    let path = cfg.path(key)?;
    let data = read_dataset(&path, classes)?;
    info!("{}: {} videos", path.display(), data.len());
    Ok(data)
}

fn train_options(cfg: &Config) -> Result<TrainOptions> {
    Ok(TrainOptions {
        epochs: cfg.get("train.epochs")?,
        batch_size: cfg.get("train.batch_size")?,
        lr: cfg.get("train.lr")?,
        sgd: SgdConfig {
            momentum: cfg.get("train.momentum")?,
            weight_decay: cfg.get("train.weight_decay")?,
        },
        seed: cfg.get("train.seed")?,
        augment: cfg.bool("train.augment")?,
    })
}

fn schedule(cfg: &Config) -> Result<ClipSchedule> {
    let kind: PatternKind = cfg.get("schedule.pattern")?;
    Ok(ClipSchedule::new(cfg.get("schedule.clip_len")?, cfg.get("schedule.clips")?, kind)?)
}

fn metadata(cfg: &Config, report: &TrainReport, seed: u64) -> Metadata {
    Metadata {
        kind: String::new(),
        epoch: report.records.iter().map(|r| r.epoch).max().unwrap_or(0),
        seed,
        rng_word_pos: report.rng_word_pos.to_string(),
        config_hash: cfg.hash(),
        attributes: Default::default(),
    }
}

/// Checkpoint, resolved config and metrics in one directory.
fn save_run(dir: &Path, ckpt: &Checkpoint, cfg: &Config, metrics: &str) -> Result<()> {
    ckpt.save(dir)?;
    write_file(&dir.join(CONFIG_FILE), &cfg.dump())?;
    write_file(&dir.join(METRICS_FILE), metrics)
}

fn cmd_train(cfg: &Config, out: &mut dyn Write) -> Result<()> {
    match cfg.raw("train.stage").trim() {
        "backbone" => train_backbone_stage(cfg, out),
        "aggregator" => train_aggregator_stage(cfg, out),
        other => Err(config_err(format!("unknown stage '{}' (backbone | aggregator)", other))),
    }
}

fn train_backbone_stage(cfg: &Config, out: &mut dyn Write) -> Result<()> {
    let dir = cfg.path("paths.out")?;
    let train = load_data(cfg, "paths.data", None)?;
    let classes = train.num_classes.max(cfg.get("data.classes")?);
    let test = match cfg.opt::<PathBuf>("paths.test_data")? {
        Some(_) => Some(load_data(cfg, "paths.test_data", Some(classes))?),
        None => None,
    };
    let res = train.samples.first().map(|s| s.height).ok_or_else(|| LabError::Data("training dataset is empty".into()))?;
    let family: Family = cfg.get("model.family")?;
    let mut bc = BackboneConfig::tiny(family, cfg.get("schedule.clip_len")?, classes);
    bc.resolution = res;
    let opts = train_options(cfg)?;
    let mut model = BackboneModel::init(bc, opts.seed)?;
    let report = train_backbone(&mut model, &train, &opts, test.as_ref())?;
    let metrics = metrics_csv(&report.records);
    save_run(&dir, &model.to_checkpoint(metadata(cfg, &report, opts.seed)), cfg, &metrics)?;
    info!("saved {} backbone to {}", family, dir.display());
    emit(out, &metrics)
}

fn load_backbone(path: &Path) -> Result<BackboneModel> {
    BackboneModel::from_checkpoint(&Checkpoint::load(path)?, path)
}

/// `none`, `memory`, or a directory holding a cache per split.
enum CacheMode {
    Off,
    Memory,
    Disk(PathBuf),
}

impl CacheMode {
    fn from_config(cfg: &Config) -> Result<Self> {
        Ok(match cfg.opt::<String>("train.feature_cache")? {
            None => CacheMode::Off,
            Some(s) if s == "memory" => CacheMode::Memory,
            Some(s) => CacheMode::Disk(PathBuf::from(s)),
        })
    }

    /// A cache is only reused for the same data file and backbones.
    fn open(&self, split: &str, stamp: &str) -> Result<Option<FeatureCache>> {
        match self {
            CacheMode::Off => Ok(None),
            CacheMode::Memory => Ok(Some(FeatureCache::default())),
            CacheMode::Disk(dir) => {
                let path = dir.join(split);
                if !path.join(crate::checkpoint::MANIFEST_FILE).exists() {
                    return Ok(Some(FeatureCache::default()));
                }
                let ckpt = Checkpoint::load(&path)?;
                if ckpt.metadata.attributes.get("stamp").map(String::as_str) != Some(stamp) {
                    warn!("{}: feature cache was built from other inputs; rebuilding", path.display());
                    return Ok(Some(FeatureCache::default()));
                }
                let cache = FeatureCache::from_checkpoint(&ckpt, &path)?;
                info!("{}: {} cached feature maps", path.display(), cache.len());
                Ok(Some(cache))
            }
        }
    }

    fn store(&self, split: &str, stamp: &str, cache: Option<&FeatureCache>) -> Result<()> {
        if let (CacheMode::Disk(dir), Some(cache)) = (self, cache) {
            let mut meta = Metadata::default();
            meta.attributes.insert("stamp".into(), stamp.into());
            cache.to_checkpoint(meta).save(&dir.join(split))?;
        }
        Ok(())
    }
}

fn cache_stamp(cfg: &Config, data_key: &str) -> String {
    ["paths.expensive", "paths.cheap", data_key, "schedule.clip_len"]
        .iter()
        .map(|k| cfg.raw(k).trim().to_string())
        .collect::<Vec<_>>()
        .join("|")
}

fn train_aggregator_stage(cfg: &Config, out: &mut dyn Write) -> Result<()> {
    let dir = cfg.path("paths.out")?;
    let (e_path, c_path) = (cfg.path("paths.expensive")?, cfg.path("paths.cheap")?);
    let expensive = load_backbone(&e_path)?;
    let cheap = load_backbone(&c_path)?;
    let bbs = Backbones {
        expensive: &expensive,
        cheap: &cheap,
    };
    let sched = schedule(cfg)?;
    let shape = bbs.feature_shape(sched.clip_len)?;
    let classes = expensive.config().num_classes;
    if cheap.config().num_classes != classes {
        return Err(LabError::Data("the two backbones were trained on different class counts".into()));
    }
    let train = load_data(cfg, "paths.data", Some(classes))?;
    let test = match cfg.opt::<PathBuf>("paths.test_data")? {
        Some(_) => Some(load_data(cfg, "paths.test_data", Some(classes))?),
        None => None,
    };
    let method: Method = cfg.get("model.method")?;
    let mut ac = AggregatorConfig::new(method, shape[3], classes);
    ac.reduction = cfg.get("model.reduction")?;
    ac.gate_bias = cfg.get("model.gate_bias")?;
    let opts = train_options(cfg)?;
    let sampling: Sampling = cfg.get("train.sampling")?;
    let mode = CacheMode::from_config(cfg)?;
    let (train_stamp, test_stamp) = (cache_stamp(cfg, "paths.data"), cache_stamp(cfg, "paths.test_data"));
    let mut train_cache = mode.open("train", &train_stamp)?;
    let mut test_cache = match test {
        Some(_) => mode.open("test", &test_stamp)?,
        None => None,
    };

    let mut model = AggregatorModel::init(ac, opts.seed)?;
    let report = train_aggregator(
        &mut model,
        &bbs,
        &train,
        &sched,
        &opts,
        sampling,
        train_cache.as_mut(),
        test.as_ref().map(|t| (t, test_cache.as_mut())),
    )?;
    mode.store("train", &train_stamp, train_cache.as_ref())?;
    mode.store("test", &test_stamp, test_cache.as_ref())?;

    let mut meta = metadata(cfg, &report, opts.seed);
    meta.attributes.extend([
        ("expensive".to_string(), e_path.display().to_string()),
        ("cheap".to_string(), c_path.display().to_string()),
        ("clip_len".to_string(), sched.clip_len.to_string()),
        ("clips".to_string(), sched.num_clips.to_string()),
        ("pattern".to_string(), sched.kind.to_string()),
    ]);
    let metrics = metrics_csv(&report.records);
    save_run(&dir, &model.to_checkpoint(meta), cfg, &metrics)?;
    info!("saved {} aggregator to {}", method, dir.display());
    emit(out, &metrics)
}

/// Backbone paths recorded in an aggregator checkpoint unless given explicitly.
fn aggregator_backbones(cfg: &Config, meta: &Metadata) -> Result<(BackboneModel, BackboneModel)> {
    let pick = |key: &str, attr: &str| -> Result<PathBuf> {
        match cfg.opt::<PathBuf>(key)? {
            Some(p) => Ok(p),
            None => Ok(PathBuf::from(meta.attr(attr)?)),
        }
    };
    Ok((load_backbone(&pick("paths.expensive", "expensive")?)?, load_backbone(&pick("paths.cheap", "cheap")?)?))
}

fn stored_schedule(meta: &Metadata) -> Result<ClipSchedule> {
    let bad = |k: &str| LabError::Data(format!("checkpoint metadata has a bad '{}'", k));
    let l = meta.attr("clip_len")?.parse().map_err(|_| bad("clip_len"))?;
    let n = meta.attr("clips")?.parse().map_err(|_| bad("clips"))?;
    let kind: PatternKind = meta.attr("pattern")?.parse()?;
    Ok(ClipSchedule::new(l, n, kind)?)
}

fn cmd_eval(cfg: &Config, out: &mut dyn Write) -> Result<()> {
    let path = cfg.path("paths.checkpoint")?;
    let ckpt = Checkpoint::load(&path)?;
    let k: usize = cfg.get("eval.top_k")?;
    if k == 0 {
        return Err(config_err("eval.top_k must be at least 1"));
    }
    let (loss, acc) = match ckpt.metadata.kind.as_str() {
        "backbone" => {
            let model = BackboneModel::from_checkpoint(&ckpt, &path)?;
            let data = load_data(cfg, "paths.data", Some(model.config().num_classes))?;
            evaluate_backbone(&model, &data, cfg.get("schedule.clips")?, k)?
        }
        "aggregator" => {
            let model = AggregatorModel::from_checkpoint(&ckpt, &path)?;
            let (e, c) = aggregator_backbones(cfg, &ckpt.metadata)?;
            let data = load_data(cfg, "paths.data", Some(model.aggregator.config().num_classes))?;
            let sched = stored_schedule(&ckpt.metadata)?;
            let bbs = Backbones {
                expensive: &e,
                cheap: &c,
            };
            evaluate_aggregator(&model, &bbs, &data, &sched, k, None)?
        }
        other => return Err(LabError::Data(format!("{}: cannot evaluate a '{}' checkpoint", path.display(), other))),
    };
    let metrics = format!(
        "epoch,split,loss,top{k}\n{},eval,{:.6},{:.6}\n",
        ckpt.metadata.epoch, loss, acc
    );
    let dir = cfg.opt::<PathBuf>("paths.out")?.unwrap_or_else(|| path.join("eval"));
    fs::create_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
    write_file(&dir.join(CONFIG_FILE), &cfg.dump())?;
    write_file(&dir.join(METRICS_FILE), &metrics)?;
    emit(out, &metrics)
}

fn cost_config(family: Family, scale: &str, frames: usize, resolution: usize, classes: usize) -> Result<BackboneConfig> {
    let mut c = match scale {
        "full" => BackboneConfig::full_spec(family, frames),
        "tiny" => BackboneConfig::tiny(family, frames, classes),
        other => return Err(config_err(format!("unknown scale '{}' (full | tiny)", other))),
    };
    c.resolution = resolution;
    Ok(c)
}

fn res5(config: &BackboneConfig) -> Result<[usize; 4]> {
    output_sizes(config)?
        .into_iter()
        .find(|(n, _)| n == "res5")
        .map(|(_, s)| s)
        .ok_or_else(|| LabError::Data("backbone table has no res5 row".into()))
}

/// Cost of a whole video from two backbone configurations.
fn video_cost(
    expensive: &BackboneConfig,
    cheap: &BackboneConfig,
    sched: &ClipSchedule,
    method: Method,
    reduction: usize,
) -> Result<CostReport> {
    let shape = res5(expensive)?;
    if res5(cheap)? != shape {
        return Err(config_err(format!(
            "backbones emit different feature maps ({:?} vs {:?})",
            shape,
            res5(cheap)?
        )));
    }
    let costs = ScheduleCosts {
        expensive: backbone_flops(expensive)?.total,
        cheap: backbone_flops(cheap)?.total,
        step: aggregator_flops(method, shape, reduction)?,
        head: head_flops(method, shape[3], expensive.num_classes),
    };
    info!(
        "per clip: expensive {}, cheap {}; per step {}",
        costs.expensive, costs.cheap, costs.step
    );
    Ok(schedule_flops(sched, &costs))
}

fn cmd_flops(cfg: &Config, out: &mut dyn Write) -> Result<()> {
    let scale = cfg.raw("flops.scale").trim().to_string();
    let frames: usize = cfg.get("flops.frames")?;
    let res: usize = cfg.get("flops.resolution")?;
    let classes: usize = cfg.get("data.classes")?;
    let pattern: Option<PatternKind> = cfg.opt("flops.pattern")?;
    let clips: Option<usize> = cfg.opt("flops.clips")?;
    let report = match (pattern, clips) {
        (None, None) => backbone_flops(&cost_config(cfg.get("flops.backbone")?, &scale, frames, res, classes)?)?,
        (Some(kind), Some(n)) => {
            let sched = ClipSchedule::new(frames, n, kind)?;
            let e = cost_config(cfg.get("flops.expensive")?, &scale, frames, res, classes)?;
            let c = cost_config(cfg.get("flops.cheap")?, &scale, frames, res, classes)?;
            video_cost(&e, &c, &sched, cfg.get("flops.method")?, cfg.get("model.reduction")?)?
        }
        (Some(_), None) => return Err(config_err("--pattern needs --clips")),
        (None, Some(_)) => return Err(config_err("--clips needs --pattern")),
    };
    info!("total {}", report.total);
    emit(out, &report.to_csv())
}

struct SweepRow {
    pattern: PatternKind,
    frames: usize,
    clips: usize,
    gflops: f64,
    top1: f64,
}

fn cmd_sweep(cfg: &Config, out: &mut dyn Write) -> Result<()> {
    let patterns: Vec<PatternKind> = cfg.list("sweep.patterns")?;
    let lengths: Vec<usize> = cfg.list("sweep.frames")?;
    let budget: usize = cfg.get("sweep.budget")?;
    if patterns.is_empty() || lengths.is_empty() {
        return Err(config_err("sweep needs at least one pattern and one clip length"));
    }
    let expensive = load_backbone(&cfg.path("paths.expensive")?)?;
    let cheap = load_backbone(&cfg.path("paths.cheap")?)?;
    let bbs = Backbones {
        expensive: &expensive,
        cheap: &cheap,
    };
    let classes = expensive.config().num_classes;
    let fixed = match cfg.opt::<PathBuf>("paths.checkpoint")? {
        Some(p) => Some(AggregatorModel::from_checkpoint(&Checkpoint::load(&p)?, &p)?),
        None => None,
    };
    let (train, test) = if fixed.is_some() {
        let key = if cfg.opt::<PathBuf>("paths.test_data")?.is_some() { "paths.test_data" } else { "paths.data" };
        (None, load_data(cfg, key, Some(classes))?)
    } else {
        (Some(load_data(cfg, "paths.data", Some(classes))?), load_data(cfg, "paths.test_data", Some(classes))?)
    };
    let method: Method = match &fixed {
        Some(m) => m.aggregator.method(),
        None => cfg.get("model.method")?,
    };
    let reduction: usize = cfg.get("model.reduction")?;

    let mut rows = Vec::new();
    for &l in &lengths {
        if l == 0 || budget % l != 0 {
            warn!("skipping L={}: budget {} is not a multiple", l, budget);
            continue;
        }
        let n = budget / l;
        let mut train_cache = FeatureCache::default();
        let mut test_cache = FeatureCache::default();
        for &kind in &patterns {
            let sched = match ClipSchedule::new(l, n, kind) {
                Ok(s) => s,
                Err(e) => {
                    warn!("skipping {} at L={} N={}: {}", kind, l, n, e);
                    continue;
                }
            };
            let e_cfg = *expensive.with_clip_len(l)?.config();
            let c_cfg = *cheap.with_clip_len(l)?.config();
            let cost = video_cost(&e_cfg, &c_cfg, &sched, method, reduction)?;
            let top1 = match (&fixed, &train) {
                (Some(model), _) => evaluate_aggregator(model, &bbs, &test, &sched, 1, Some(&mut test_cache))?.1,
                (None, Some(train)) => {
                    let shape = bbs.feature_shape(l)?;
                    let mut ac = AggregatorConfig::new(method, shape[3], classes);
                    ac.reduction = reduction;
                    ac.gate_bias = cfg.get("model.gate_bias")?;
                    let opts = train_options(cfg)?;
                    let mut model = AggregatorModel::init(ac, opts.seed)?;
                    let sampling: Sampling = cfg.get("train.sampling")?;
                    train_aggregator(&mut model, &bbs, train, &sched, &opts, sampling, Some(&mut train_cache), None)?;
                    evaluate_aggregator(&model, &bbs, &test, &sched, 1, Some(&mut test_cache))?.1
                }
                (None, None) => unreachable!("training data loaded when no checkpoint is given"),
            };
            info!("{} L={} N={}: {} top1 {:.3}", kind, l, n, cost.total, top1);
            rows.push(SweepRow {
                pattern: kind,
                frames: l,
                clips: n,
                gflops: cost.total.gflops(),
                top1,
            });
        }
    }
    rows.sort_by(|a, b| a.gflops.total_cmp(&b.gflops));
    let mut csv = format!("{SWEEP_HEADER}\n");
    for r in &rows {
        csv.push_str(&format!("{},{},{},{:.6},{:.6}\n", r.pattern, r.frames, r.clips, r.gflops, r.top1));
    }
    if let Some(path) = cfg.opt::<PathBuf>("paths.out")? {
        write_file(&path, &csv)?;
        write_file(&sibling(&path, ".ini"), &cfg.dump())?;
    }
    emit(out, &csv)
}

fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let cases = suite();
    let selected: Vec<_> = if args.all {
        cases
    } else if args.cases.is_empty() {
        return Err(config_err("gradcheck needs --all or at least one --case"));
    } else {
        let mut picked = Vec::new();
        for name in &args.cases {
            let case = cases.iter().find(|c| c.name == name).ok_or_else(|| {
                let names: Vec<_> = cases.iter().map(|c| c.name).collect();
                config_err(format!("unknown case '{}'; known: {}", name, names.join(", ")))
            })?;
            picked.push(*case);
        }
        picked
    };
    if args.seeds == 0 {
        return Err(config_err("--seeds must be at least 1"));
    }
    let mut csv = String::from("case,seed,checked,max_rel_error,tolerance,passed\n");
    let mut failed = Vec::new();
    for case in &selected {
        for seed in 0..args.seeds {
            let r = (case.run)(seed)?;
            csv.push_str(&format!(
                "{},{},{},{:.3e},{:.0e},{}\n",
                case.name, seed, r.checked, r.max_rel_error, r.tolerance, r.passed
            ));
            if !r.passed {
                failed.push(format!("{} seed {}", case.name, seed));
            }
        }
    }
    emit(out, &csv)?;
    if failed.is_empty() {
        info!("{} cases × {} seeds passed", selected.len(), args.seeds);
        Ok(())
    } else {
        Err(LabError::Numeric(format!("gradient check failed: {}", failed.join(", "))))
    }
}
