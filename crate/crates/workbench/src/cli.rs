//! `pvad` subcommands.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use pvad::dataset::synth::{synth_generate, write_dataset, SynthConfig};
use pvad::dataset::{load_manifest, split_dataset, DatasetSplit, FaultClass, IrImage, PlantId, PlantStatsTable};
use pvad::encoder::embed;
use pvad::evaluation::{evaluate, render_summary, select_model, SelectionCriterion};
use pvad::index::{build_index, compress_index, predict_batch};
use pvad::store::{read_embeddings, read_predictions, write_embeddings, write_predictions};
use pvad::trainer::{read_checkpoint, train, write_atomic, write_checkpoint, write_log, Objective, Sampling, TrainConfig};
use pvad::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "pvad", version, about = "Contrastive k-NN anomaly detection for thermal PV-module images")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-plant dataset (PNG frames + manifest).
    Synth {
        /// TOML generator config; the two-plant desk config when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute per-plant intensity statistics.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        subset: Subset,
        #[arg(long)]
        out: PathBuf,
    },
    /// Module-disjoint train/test split.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an encoder on labelled source images.
    Train(TrainArgs),
    /// Embed images with a trained checkpoint into an embedding store.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[command(flatten)]
        subset: Subset,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score target embeddings by k-NN voting against a source store.
    Predict {
        #[arg(long)]
        source_store: PathBuf,
        #[arg(long)]
        target_store: PathBuf,
        #[arg(long, default_value_t = pvad::index::DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = pvad::index::DEFAULT_DELTA)]
        delta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics report for labelled predictions.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value_t = pvad::index::DEFAULT_DELTA)]
        delta: f64,
        /// Write the full report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replace a source store by per-class k-means centroids.
    Compress {
        #[arg(long)]
        store: PathBuf,
        /// Total number of centroids.
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the labelling-triage HTTP service.
    Serve {
        /// Overrides the port of the bind address.
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, env = "PVAD_BIND", default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long, env = "PVAD_DATA_ROOT", default_value = ".")]
        data_root: PathBuf,
    },
}

/// Image selection shared by several subcommands.
#[derive(Debug, Args)]
struct Subset {
    /// Only images of this plant.
    #[arg(long)]
    plant: Option<u16>,
    /// Split file; with `--part`, only images of that part.
    #[arg(long, requires = "part")]
    split: Option<PathBuf>,
    #[arg(long, value_enum, requires = "split")]
    part: Option<Part>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Part {
    Train,
    Test,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    stats: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Source images: this plant only (default: every image selected by the split).
    #[arg(long)]
    source_plant: Option<u16>,
    /// Train on the train part of this split.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Labelled plant scored at every checkpoint for model selection.
    #[arg(long)]
    validation_plant: Option<u16>,
    /// TOML train config; otherwise the preset.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["desk", "paper"])]
    preset: Option<String>,
    #[arg(long)]
    objective: Option<Objective>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sampling: Option<Sampling>,
    /// Comma-separated fault classes to withhold, or `unknown` for Mp,Sh,Sp,Cm+,Cs+.
    #[arg(long)]
    leaveout: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut c = match (&self.config, &self.preset) {
            (Some(path), _) => TrainConfig::load(path)?,
            (None, Some(name)) => TrainConfig::preset(name)?,
            (None, None) => TrainConfig::default(),
        };
        if let Some(v) = self.objective {
            c.objective = v;
        }
        if let Some(v) = self.steps {
            c.total_steps = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.momentum {
            c.momentum = v;
        }
        if let Some(v) = self.weight_decay {
            c.weight_decay = v;
        }
        if let Some(v) = self.tau {
            c.tau = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.sampling {
            c.sampling = v;
        }
        if let Some(v) = &self.leaveout {
            c.leaveout = parse_leaveout(v)?;
        }
        if let Some(v) = self.checkpoint_every {
            c.checkpoint_every = v;
        }
        if let Some(v) = self.k {
            c.k = v;
        }
        c.validate()?;
        Ok(c)
    }
}

fn parse_leaveout(text: &str) -> Result<BTreeSet<FaultClass>> {
    if text.eq_ignore_ascii_case("unknown") {
        return Ok(FaultClass::LEAVEOUT.into_iter().collect());
    }
    text.split(',').filter(|s| !s.trim().is_empty()).map(|s| s.trim().parse().map_err(Error::InvalidConfig)).collect()
}

/// Parses `args` (program name first) and runs the subcommand.
/// Returns the process exit code: 0 success, 1 runtime error, 2 usage error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, kind: &'static str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(kind, path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format("JSON", path, e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn select(images: Vec<IrImage>, plant: Option<u16>, split: Option<(&Path, Part)>) -> Result<Vec<IrImage>> {
    let mut images: Vec<IrImage> = match plant {
        Some(p) => images.into_iter().filter(|i| i.plant_id == PlantId(p)).collect(),
        None => images,
    };
    if let Some((path, part)) = split {
        let split: DatasetSplit = read_json(path, "split")?;
        let ids: BTreeSet<_> = match part {
            Part::Train => split.train.into_iter().collect(),
            Part::Test => split.test.into_iter().collect(),
        };
        images.retain(|i| ids.contains(&i.image_id));
    }
    if images.is_empty() {
        return Err(Error::Empty("image selection"));
    }
    Ok(images)
}

impl Subset {
    fn apply(&self, images: Vec<IrImage>) -> Result<Vec<IrImage>> {
        select(images, self.plant, self.split.as_deref().zip(self.part))
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth { config, seed, out } => {
            let config = match config {
                Some(path) => SynthConfig::load(&path)?,
                None => SynthConfig::two_plant_desk(seed),
            };
            let images = synth_generate(&config)?;
            let records = write_dataset(&out, &images)?;
            println!("wrote {} images to {}", records.len(), out.display());
        }
        Command::Stats { manifest, subset, out } => {
            let images = subset.apply(load_manifest(&manifest)?)?;
            let table = PlantStatsTable::from_images(&images)?;
            write_json(&out, &table)?;
            for s in table.plants.values() {
                println!("plant {}: mean {:.4} std {:.4}", s.plant_id, s.mean, s.std);
            }
        }
        Command::Split { manifest, ratio, seed, out } => {
            let images = load_manifest(&manifest)?;
            let split = split_dataset(&images, ratio, seed)?;
            write_json(&out, &split)?;
            println!("train {} images, test {} images", split.train.len(), split.test.len());
        }
        Command::Train(args) => run_train(&args)?,
        Command::Embed { checkpoint, manifest, stats, subset, out } => {
            let checkpoint = read_checkpoint(&checkpoint)?;
            if checkpoint.header.train.objective != Objective::Contrastive {
                return Err(Error::InvalidConfig("only contrastive checkpoints produce embeddings".into()));
            }
            let stats: PlantStatsTable = read_json(&stats, "plant statistics")?;
            let images = subset.apply(load_manifest(&manifest)?)?;
            let embeddings = embed(&checkpoint.params, &images, &stats)?;
            write_embeddings(&out, &embeddings)?;
            println!("embedded {} images", embeddings.len());
        }
        Command::Predict { source_store, target_store, k, delta, out } => {
            let index = build_index(&read_embeddings(&source_store)?)?;
            let targets = read_embeddings(&target_store)?;
            let predictions = predict_batch(&index, &targets, k, delta)?;
            write_predictions(&out, &predictions)?;
            let flagged = predictions.iter().filter(|p| p.verdict.is_anomalous()).count();
            println!("{} predictions, {flagged} anomalous", predictions.len());
        }
        Command::Eval { predictions, delta, out } => {
            let report = evaluate(&read_predictions(&predictions)?, delta)?;
            if let Some(out) = out {
                write_json(&out, &report)?;
            }
            print!("{}", render_summary(&report));
        }
        Command::Compress { store, m, seed, out } => {
            let index = build_index(&read_embeddings(&store)?)?;
            let compressed = compress_index(&index, m, seed)?;
            write_embeddings(&out, &compressed.to_embeddings())?;
            println!("{} embeddings compressed to {} centroids", index.len(), compressed.len());
        }
        Command::Serve { port, bind, data_root } => {
            let addr = SocketAddr::new(bind.ip(), port.unwrap_or(bind.port()));
            crate::service::serve(addr, data_root)?;
        }
    }
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let config = args.config()?;
    let stats: PlantStatsTable = read_json(&args.stats, "plant statistics")?;
    let all = load_manifest(&args.manifest)?;
    let source = select(all.clone(), args.source_plant, args.split.as_deref().map(|p| (p, Part::Train)))?;
    let validation = match args.validation_plant {
        Some(p) => Some(select(all, Some(p), None)?),
        None => None,
    };
    create_dir(&args.out_dir)?;
    let mut text = config.to_toml_string();
    text.insert_str(0, "# resolved training configuration\n");
    write_atomic(&args.out_dir.join("config.toml"), text.as_bytes())?;

    let outcome = train(&config, &source, &stats, validation.as_deref(), |c| {
        write_checkpoint(&args.out_dir.join(format!("checkpoint-{:06}.tsck", c.step)), c)
    })?;
    write_checkpoint(&args.out_dir.join("final.tsck"), outcome.last())?;
    write_log(&args.out_dir.join("log.jsonl"), &outcome.log)?;
    println!("trained {} steps; checkpoints in {}", outcome.last().step, args.out_dir.display());
    if validation.is_some() {
        let points = outcome.validation_points();
        for (name, criterion) in [("auroc", SelectionCriterion::Auroc), ("ap", SelectionCriterion::Ap)] {
            if let Ok(step) = select_model(&points, criterion) {
                println!("best validation {name}: checkpoint-{step:06}.tsck");
            }
        }
    }
    Ok(())
}
