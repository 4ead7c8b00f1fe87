use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use capst::checkpoint::{self, Checkpoint};
use capst::config::RunConfig;
use capst::data::{self, DatasetManifest, ManifestEntry, SynthConfig, VideoSample};
use capst::error::ErrorKind;
use capst::eval::{self, EvalReport};
use capst::tensor::DType;
use capst::training::{Precision, Trainer};
use capst::{CapstModel, Error, Result, Scalar};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "capst", version, about = "Capsule attribution network: synthesis, training, evaluation and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic attribution corpus.
    Synth(SynthArgs),
    /// Train a model from a config file or preset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Rank classes for one directory of frames.
    Attribute(AttributeArgs),
    /// Finite-difference gradient check of a full model.
    Gradcheck(GradcheckArgs),
    /// Parameter and MAC ledger.
    Profile(ProfileArgs),
    /// Grad-CAM heatmap for one directory of frames.
    Gradcam(GradcamArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    videos_per_class: usize,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    #[arg(long, default_value_t = 112)]
    size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// Preset name (tiny, small, default) or path to a `key = value` file.
    #[arg(long, default_value = "default")]
    config: String,
    /// Override one key, e.g. `--set train.lr=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Write the report as `key = value` lines.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttributeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of frame files, read in file-name order.
    #[arg(long)]
    frames: PathBuf,
    /// Comma-separated class names.
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    /// Take class names from this manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "tiny")]
    config: String,
    #[arg(long, default_value_t = 2)]
    videos: usize,
    #[arg(long, default_value_t = 1e-6)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Print `key = value` lines instead of a table.
    #[arg(long)]
    kv: bool,
}

#[derive(Args)]
struct GradcamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    frames: PathBuf,
    /// Layer name, or `combined`; defaults to the last backbone conv.
    #[arg(long)]
    layer: Option<String>,
    /// Target class; defaults to the predicted one.
    #[arg(long)]
    class: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = std::env::var("CAPST_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("warning: thread pool: {e}");
    }
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => evaluate(a),
        Command::Attribute(a) => attribute(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Profile(a) => profile(a),
        Command::Gradcam(a) => gradcam(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            })
        }
    }
}

fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let mut cfg = SynthConfig {
        classes: a.classes,
        videos_per_class: a.videos_per_class,
        frames: a.frames,
        size: a.size,
        seed: a.seed,
        ..SynthConfig::default()
    };
    if let Some(v) = a.amplitude {
        cfg.amplitude = v;
    }
    if let Some(v) = a.noise {
        cfg.noise = v;
    }
    let manifest = data::synth_generate(&cfg, &a.out_dir)?;
    println!(
        "wrote {} videos ({} frames) to {}",
        manifest.len(),
        manifest.entries.iter().map(|e| e.frame_paths.len()).sum::<usize>(),
        a.out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = a.config.resolve()?;
    if let Some(m) = a.manifest {
        cfg.data.manifest = Some(m);
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(d) = a.out_dir {
        cfg.data.out_dir = d;
    }
    cfg.validate()?;
    match cfg.train.precision {
        Precision::F32 => run_train::<f32>(&cfg, a.resume.as_deref()),
        Precision::F64 => run_train::<f64>(&cfg, a.resume.as_deref()),
    }
}

fn run_train<T: Scalar>(cfg: &RunConfig, resume: Option<&Path>) -> Result<ExitCode> {
    let manifest_path = cfg
        .data
        .manifest
        .as_ref()
        .ok_or_else(|| Error::Config("data.manifest is not set (use --manifest or the config file)".into()))?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let (train_set, test_set) = match &cfg.data.test_manifest {
        Some(p) => (manifest, DatasetManifest::load(p)?),
        None => data::split(&manifest, cfg.data.train_fraction, manifest.split_seed)?,
    };
    let k = cfg.model.num_classes();
    if train_set.num_classes() > k {
        return Err(Error::Data(format!(
            "manifest has {} classes but the model has {k}",
            train_set.num_classes()
        )));
    }
    let out = &cfg.data.out_dir;
    fs::create_dir_all(out)?;
    let text = cfg.to_text();
    fs::write(out.join("config.txt"), &text)?;
    train_set.save(&out.join("train.csv"))?;
    test_set.save(&out.join("test.csv"))?;

    let n = cfg.model.num_frames();
    let size = cfg.model.input_size();
    let train_data = data::load_dataset(&train_set, n, size)?;
    let test_data = data::load_dataset(&test_set, n, size)?;

    let model = CapstModel::<T>::new(cfg.model.clone(), cfg.train.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    if let Some(p) = resume {
        trainer.restore(&checkpoint::load(p)?)?;
    }
    let ckpt = |e: usize| out.join(format!("epoch_{e:04}.ckpt"));
    if trainer.epoch == 0 {
        trainer.save(&ckpt(0), &text)?;
    }

    let mut log = fs::OpenOptions::new().create(true).append(true).open(out.join("log.csv"))?;
    writeln!(log, "# started {} at epoch {}", unix_time(), trainer.epoch)?;
    if trainer.epoch == 0 {
        writeln!(log, "epoch,loss,acc,seconds")?;
    }
    let every = cfg.train.checkpoint_every;
    let logs = trainer.train(&train_data, |l, t| {
        writeln!(log, "{},{},{},{:.3}", l.epoch, l.loss, l.accuracy, l.seconds)?;
        println!("epoch {:>4}  loss {:.6}  acc {:6.2}%  {:.1}s", l.epoch, l.loss, l.accuracy, l.seconds);
        if every > 0 && l.epoch % every == 0 {
            t.save(&ckpt(l.epoch), &text)?;
        }
        Ok(())
    })?;
    writeln!(log, "# finished {}", unix_time())?;
    if logs.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    trainer.save(&out.join("final.ckpt"), &text)?;

    if !test_data.is_empty() {
        let report = eval::evaluate(&trainer.model, &test_data, k)?;
        fs::write(out.join("test_report.txt"), report.to_kv())?;
        print!("{}", report.to_table(&class_names(&test_set.class_names, k)));
    }
    Ok(ExitCode::SUCCESS)
}

fn class_names(names: &[String], k: usize) -> Vec<String> {
    (0..k)
        .map(|i| names.get(i).cloned().unwrap_or_else(|| format!("class{i}")))
        .collect()
}

/// Model described by a checkpoint, in the precision it was stored in.
fn restore<T: Scalar>(ck: &Checkpoint) -> Result<CapstModel<T>> {
    let cfg = RunConfig::parse(&ck.config)?;
    let model = CapstModel::<T>::new(cfg.model, ck.seed)?;
    let mut trainer = Trainer::new(model, cfg.train)?;
    trainer.restore(ck)?;
    Ok(trainer.model)
}

fn evaluate(a: EvalArgs) -> Result<ExitCode> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let report = match ck.dtype {
        DType::F32 => eval_with::<f32>(&ck, &manifest)?,
        DType::F64 => eval_with::<f64>(&ck, &manifest)?,
    };
    print!("{}", report.to_table(&class_names(&manifest.class_names, report.num_classes())));
    if let Some(p) = a.out {
        fs::write(p, report.to_kv())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn eval_with<T: Scalar>(ck: &Checkpoint, manifest: &DatasetManifest) -> Result<EvalReport> {
    let model = restore::<T>(ck)?;
    let k = model.config.num_classes();
    if manifest.num_classes() != k {
        return Err(Error::Data(format!(
            "manifest has {} classes but the checkpoint has {k}",
            manifest.num_classes()
        )));
    }
    let samples = data::load_dataset(manifest, model.config.num_frames(), model.config.input_size())?;
    eval::evaluate(&model, &samples, k)
}

/// Frames of one directory, sampled to the model's frame count.
fn load_dir(dir: &Path, num_frames: usize, size: usize) -> Result<VideoSample> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("{} contains no frames", dir.display())));
    }
    if paths.len() < num_frames {
        eprintln!(
            "warning: {} has {} frames, fewer than {num_frames}; sampling cyclically",
            dir.display(),
            paths.len()
        );
    }
    let entry = ManifestEntry {
        video_id: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        label: 0,
        frame_paths: paths,
    };
    data::load_video(&entry, num_frames, size)
}

fn attribute(a: AttributeArgs) -> Result<ExitCode> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let (probs, k) = match ck.dtype {
        DType::F32 => attribute_with::<f32>(&ck, &a.frames)?,
        DType::F64 => attribute_with::<f64>(&ck, &a.frames)?,
    };
    let names = match (&a.manifest, a.classes.is_empty()) {
        (Some(m), _) => DatasetManifest::load(m)?.class_names,
        (None, false) => a.classes.clone(),
        (None, true) => Vec::new(),
    };
    let names = class_names(&names, k);
    let mut ranked: Vec<(usize, f64)> = probs.into_iter().enumerate().collect();
    ranked.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    for (i, p) in ranked {
        println!("{}\t{p:.6}", names[i]);
    }
    Ok(ExitCode::SUCCESS)
}

fn attribute_with<T: Scalar>(ck: &Checkpoint, dir: &Path) -> Result<(Vec<f64>, usize)> {
    let model = restore::<T>(ck)?;
    let s = load_dir(dir, model.config.num_frames(), model.config.input_size())?;
    let (x, _) = data::batch(&[&s])?;
    let probs = model.predict(&x.cast::<T>())?;
    let row: Vec<f64> = probs[0].iter().map(|v| v.to_f64()).collect();
    Ok((row, model.config.num_classes()))
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let cfg = RunConfig::load(&a.config)?;
    cfg.validate()?;
    let start = Instant::now();
    let report = capst::model::gradcheck_model(&cfg.model, cfg.train.seed, a.videos, a.epsilon, a.tolerance)?;
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!(
        "{verdict} max_relative_error={:e} parameters={} failures={} seconds={:.1}",
        report.max_relative_error,
        report.analytic.len(),
        report.failures.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(4) })
}

fn profile(a: ProfileArgs) -> Result<ExitCode> {
    let cfg = a.config.resolve()?;
    cfg.validate()?;
    let ledger = eval::profile(&cfg.model);
    if a.kv {
        print!("{}", ledger.to_kv());
    } else {
        print!("{}", ledger.to_table());
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcam(a: GradcamArgs) -> Result<ExitCode> {
    let ck = checkpoint::load(&a.checkpoint)?;
    let (pgm, class) = match ck.dtype {
        DType::F32 => gradcam_with::<f32>(&ck, &a)?,
        DType::F64 => gradcam_with::<f64>(&ck, &a)?,
    };
    fs::write(&a.out, pgm)?;
    println!("class {class} heatmap written to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn gradcam_with<T: Scalar>(ck: &Checkpoint, a: &GradcamArgs) -> Result<(Vec<u8>, usize)> {
    let model = restore::<T>(ck)?;
    let s = load_dir(&a.frames, model.config.num_frames(), model.config.input_size())?;
    let class = match a.class {
        Some(c) if c >= model.config.num_classes() => {
            return Err(Error::Config(format!(
                "class {c} out of range for {} classes",
                model.config.num_classes()
            )))
        }
        Some(c) => c,
        None => {
            let (x, _) = data::batch(&[&s])?;
            capst::fusion::argmax(&model.predict(&x.cast::<T>())?[0])
        }
    };
    let layer = match &a.layer {
        Some(l) => l.clone(),
        None => model
            .config
            .backbone
            .last_conv()
            .ok_or_else(|| Error::UnknownLayer("last backbone conv".into()))?,
    };
    let map = eval::gradcam(&model, &s, class, &layer)?;
    Ok((map.to_pgm(), class))
}
