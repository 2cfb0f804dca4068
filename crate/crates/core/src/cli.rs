//! The `sea` command line: dataset generation, training, evaluation and
//! single-image prediction.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::data::{generate_synthetic, load_dataset, load_rgb, load_vocabularies, Split};
use crate::error::{Result, SeaError};
use crate::metrics::{evaluate_split, write_predictions, PredictionRecord};
use crate::trainer::{check_vocab, load_checkpoint, save_checkpoint, Trainer, BEST_CHECKPOINT};
use crate::viz::{heatmap_image, overlay, save_rgb, OVERLAY_ALPHA};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sea", version, about = "Affordance heatmaps and action/object captions from egocentric images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset described by the config's data.synthetic section.
    Generate(GenerateArgs),
    /// Train a model; checkpoints and reports go to a new run directory.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Caption one image and export its heatmap.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Run config (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides data.synthetic.seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides data.root (which itself falls back to SEA_DATA_ROOT).
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Parent of the run directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Replaces the data and metrics sections stored with the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Egocentric RGB image.
    #[arg(long)]
    pub image: PathBuf,
    /// Directory of exocentric images used as extra context.
    #[arg(long)]
    pub exo: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Number of (action, object) pairs to list.
    #[arg(long, default_value_t = 5)]
    pub top: usize,
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code; messages go to stdout and errors to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

/// A config file that cannot be read is a usage error, not a runtime one.
fn read_config(path: &Path) -> Result<RunConfig> {
    RunConfig::from_file(path).map_err(|e| match e {
        SeaError::Io { path, source } => SeaError::Config(format!("cannot read {}: {source}", path.display())),
        other => other,
    })
}

/// `<parent>/<timestamp>-<hash8>`, with a numeric suffix if it already exists.
pub fn create_run_dir(parent: &Path, cfg: &RunConfig) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let hash = cfg.hash();
    let base = format!("{stamp}-{}", &hash[..8]);
    let mut dir = parent.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = parent.join(format!("{base}-{n}"));
        n += 1;
    }
    fs::create_dir_all(&dir).map_err(|e| SeaError::io(&dir, e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| SeaError::io(path, e))
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.data.synthetic.seed = s;
    }
    let manifest = generate_synthetic(&cfg.data.synthetic, &a.out)?;
    println!("dataset: {}", a.out.display());
    println!("samples: {}", manifest.entries.len());
    println!("pairs: {}", manifest.pairs.len());
    println!("manifest hash: {}", manifest.annotations_sha256);
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = read_config(&a.config)?;
    if let Some(r) = &a.data_root {
        cfg.data.root = Some(r.clone());
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let root = cfg.data_root()?;
    let setting = cfg.data.setting;
    let vocab = load_vocabularies(&root, setting)?;
    let train = load_dataset(&root, setting, Split::Train, vocab.clone())?;
    let test = load_dataset(&root, setting, Split::Test, vocab.clone()).ok();
    let run_dir = create_run_dir(&a.out, &cfg)?;
    write_text(&run_dir.join("config.toml"), &cfg.to_toml_string()?)?;
    println!("run: {}", run_dir.display());

    let mut trainer = Trainer::new(cfg, vocab.0, vocab.1)?;
    let outcome = trainer.fit(&train, test.as_ref(), Some(&run_dir))?;
    let history = serde_json::to_string_pretty(&outcome.history).expect("history serializes");
    write_text(&run_dir.join("history.json"), &(history + "\n"))?;
    if let Some((epoch, report)) = outcome.evals.last() {
        report.write_json(&run_dir.join("report.json"))?;
        println!("eval after epoch {epoch}:");
        print!("{}", report.to_table());
    }
    println!("best checkpoint: {}", run_dir.join(BEST_CHECKPOINT).display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let trainer = load_checkpoint(&a.checkpoint)?;
    let mut cfg = trainer.config.clone();
    if let Some(p) = &a.config {
        let over = read_config(p)?;
        cfg.data = over.data;
        cfg.metrics = over.metrics;
    }
    if let Some(r) = &a.data_root {
        cfg.data.root = Some(r.clone());
    }
    cfg.metrics.validate()?;
    let root = cfg.data_root()?;
    let vocab = load_vocabularies(&root, cfg.data.setting)?;
    let ds = load_dataset(&root, cfg.data.setting, a.split.into(), vocab)?;
    check_vocab(&trainer.model, &ds)?;
    let eval = evaluate_split(&trainer.model, &ds.samples, &ds.actions, &ds.objects, &cfg.metrics)?;

    let run_dir = create_run_dir(&a.out, &cfg)?;
    let heat_dir = run_dir.join("heatmaps");
    fs::create_dir_all(&heat_dir).map_err(|e| SeaError::io(&heat_dir, e))?;
    let mut records = Vec::with_capacity(ds.samples.len());
    for (i, (s, p)) in ds.samples.iter().zip(&eval.predictions).enumerate() {
        let rel = format!("heatmaps/{i:05}.png");
        crate::data::save_png(
            &image::DynamicImage::ImageLuma8(p.heatmap.to_gray_image()),
            &run_dir.join(&rel),
        )?;
        records.push(PredictionRecord::new(&s.id, p, &ds.actions, &ds.objects, cfg.metrics.topk, &rel));
    }
    eval.report.write_json(&run_dir.join("report.json"))?;
    let table = eval.report.to_table();
    write_text(&run_dir.join("report.txt"), &table)?;
    write_predictions(&run_dir.join("predictions.jsonl"), &records)?;
    println!("run: {}", run_dir.display());
    print!("{table}");
    Ok(())
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| SeaError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(SeaError::Input(format!("no images in {}", dir.display())));
    }
    Ok(files)
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let trainer = load_checkpoint(&a.checkpoint)?;
    let model = &trainer.model;
    let ego = load_rgb(&a.image)?;
    let exo = match &a.exo {
        Some(dir) => image_files(dir)?.iter().map(|p| load_rgb(p)).collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    let p = model.predict(&ego, &exo)?;

    let run_dir = create_run_dir(&a.out, &trainer.config)?;
    let size = (ego.height() as usize, ego.width() as usize);
    save_rgb(&heatmap_image(&p.heatmap, size), &run_dir.join("heatmap.png"))?;
    save_rgb(&overlay(&ego, &p.heatmap, OVERLAY_ALPHA)?, &run_dir.join("overlay.png"))?;
    let pairs: Vec<serde_json::Value> = p
        .top_pairs(a.top)
        .into_iter()
        .map(|(ai, oi, prob)| {
            serde_json::json!({
                "action": model.actions.label(ai),
                "object": model.objects.label(oi),
                "prob": prob,
            })
        })
        .collect();
    let summary = serde_json::json!({
        "image": a.image,
        "caption": p.caption,
        "prompt": p.prompt,
        "exo_images": exo.len(),
        "top_pairs": pairs,
    });
    write_text(
        &run_dir.join("prediction.json"),
        &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"),
    )?;

    println!("caption: {}", p.caption);
    for (rank, (ai, oi, prob)) in p.top_pairs(a.top).into_iter().enumerate() {
        println!(
            "{}. {} {} {prob:.4}",
            rank + 1,
            model.actions.label(ai),
            model.objects.label(oi)
        );
    }
    println!("heatmap: {}", run_dir.join("heatmap.png").display());
    println!("overlay: {}", run_dir.join("overlay.png").display());
    Ok(())
}

/// Writes a checkpoint for `trainer` into a fresh run directory. Used by
/// tests and scripts that train in-process.
pub fn save_run(trainer: &Trainer, parent: &Path) -> Result<PathBuf> {
    let dir = create_run_dir(parent, &trainer.config)?;
    let path = dir.join(BEST_CHECKPOINT);
    save_checkpoint(&path, trainer, None)?;
    Ok(path)
}
