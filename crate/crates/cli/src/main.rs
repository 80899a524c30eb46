use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dcmcs_core::ablation::{run_ablation, Arm};
use dcmcs_core::checkpoint::{checkpoint_precision, load_model, load_session, save_session};
use dcmcs_core::config::{LabelSource, TrainConfig};
use dcmcs_core::data::{
    generate_synthetic, import_csv, load_dataset, save_dataset, write_labels, write_matrix,
    MultiViewDataset, Precision, SyntheticSpec,
};
use dcmcs_core::model::Architecture;
use dcmcs_core::report::{unix_now, MetricsReport, RunManifest};
use dcmcs_core::trainer::{check_compatible, cluster, embed, EpochRecord, Session};
use dcmcs_tensor::Scalar;

#[derive(Parser)]
#[command(
    name = "dcmcs",
    version,
    about = "Deep contrastive multi-view clustering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset from a bundled recipe name or a recipe TOML.
    Generate(GenerateArgs),
    /// Pretrain and jointly train a model, then score it.
    Train(TrainArgs),
    /// Cluster a dataset with a trained checkpoint.
    Eval(EvalArgs),
    /// Train several loss/weighting variants over shared seeds and tabulate them.
    Ablate(AblateArgs),
    /// Convert per-view CSV files into the dataset directory format.
    ImportCsv(ImportArgs),
}

/// Flags shared by commands that build a training configuration.
#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set loss.tau2=0.2` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Arithmetic precision in bits (32 or 64).
    #[arg(long)]
    precision: Option<u32>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    joint_epochs: Option<usize>,
}

impl ConfigArgs {
    fn flag_overrides(&self) -> Vec<String> {
        let mut out = self.overrides.clone();
        if let Some(s) = self.seed {
            out.push(format!("seed={s}"));
        }
        if let Some(p) = self.precision {
            out.push(format!("precision={p}"));
        }
        if let Some(e) = self.pretrain_epochs {
            out.push(format!("pretrain_epochs={e}"));
        }
        if let Some(e) = self.joint_epochs {
            out.push(format!("joint_epochs={e}"));
        }
        out
    }

    fn resolve(&self) -> Result<TrainConfig> {
        let overrides = self.flag_overrides();
        let cfg = match &self.config {
            Some(path) => TrainConfig::load(path, &overrides)?,
            None => TrainConfig::from_toml_with_overrides("", &overrides)?,
        };
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Bundled recipe (`synthetic3d-like`, `imbalanced-views`) or a path to a
    /// recipe TOML.
    spec: String,
    #[arg(long)]
    out: PathBuf,
    /// Replace the recipe's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    precision: Option<u32>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Repeat the run recorded in a run manifest (config flags are rejected).
    #[arg(long, conflicts_with_all = ["config", "overrides", "seed", "precision", "pretrain_epochs", "joint_epochs", "resume"])]
    from_manifest: Option<PathBuf>,
    /// Continue from a checkpoint directory written by an earlier run.
    #[arg(long, conflicts_with_all = ["config", "overrides", "seed", "precision", "pretrain_epochs", "joint_epochs"])]
    resume: Option<PathBuf>,
    /// Also save a checkpoint every this many epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Replace the checkpoint's label source.
    #[arg(long, value_parser = parse_label_source)]
    label_source: Option<LabelSource>,
    /// Also write the fusion view's cluster probabilities and instance
    /// features in the dataset matrix encoding.
    #[arg(long)]
    export_features: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated arms; `+` combines variants within one arm.
    #[arg(long, value_delimiter = ',', default_value = "a,b,c,d,e")]
    arms: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct ImportArgs {
    /// One headerless CSV per view, in view order (repeatable).
    #[arg(long = "view", required = true)]
    views: Vec<PathBuf>,
    /// Labels file, one integer per line.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    clusters: usize,
    #[arg(long, default_value = "imported")]
    name: String,
    #[arg(long, default_value_t = 32)]
    precision: u32,
    #[arg(long)]
    out: PathBuf,
}

fn parse_label_source(s: &str) -> Result<LabelSource, String> {
    match s {
        "argmax" => Ok(LabelSource::Argmax),
        "kmeans-fused" => Ok(LabelSource::KmeansFused),
        "kmeans-instance" => Ok(LabelSource::KmeansInstance),
        _ => Err(format!(
            "unknown label source `{s}` (argmax, kmeans-fused, kmeans-instance)"
        )),
    }
}

fn precision(bits: u32) -> Result<Precision> {
    Precision::try_from(bits).map_err(anyhow::Error::msg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn generate(args: GenerateArgs) -> Result<()> {
    let mut spec = match SyntheticSpec::bundled(&args.spec) {
        Some(s) => s,
        None => {
            let path = Path::new(&args.spec);
            if !path.exists() {
                bail!(
                    "`{}` is neither a bundled recipe ({}) nor an existing file",
                    args.spec,
                    SyntheticSpec::BUNDLED.join(", ")
                );
            }
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(bits) = args.precision {
        spec.precision = precision(bits)?;
    }
    spec.validate()?;
    let ds = generate_synthetic(&spec)?;
    save_dataset(&ds, &args.out)?;
    let text = toml::to_string(&spec).context("serializing the recipe")?;
    write_file(&args.out.join("spec.toml"), &text)?;
    println!(
        "{}: {} samples, {} views {:?}, {} clusters, fingerprint {}",
        ds.name(),
        ds.n_samples(),
        ds.n_views(),
        ds.view_dims(),
        ds.n_clusters(),
        ds.fingerprint()
    );
    Ok(())
}

fn log_epoch(r: &EpochRecord) {
    let scores = r
        .scores
        .map(|s| format!("  acc {:.4} nmi {:.4} pur {:.4}", s.acc, s.nmi, s.pur))
        .unwrap_or_default();
    eprintln!(
        "epoch {:4} {:8} loss {:12.5} (con {:.4}, inst {:.4}, clu {:.4}){scores}",
        r.epoch,
        format!("{:?}", r.phase).to_lowercase(),
        r.loss.total,
        r.loss.l_con,
        r.loss.l_i,
        r.loss.l_c,
    );
}

fn write_outputs(
    out: &Path,
    ds: &MultiViewDataset,
    labels: &[usize],
    report: &MetricsReport,
) -> Result<()> {
    write_labels(&out.join("labels.txt"), labels)?;
    write_file(&out.join("metrics.json"), &report.to_json())?;
    match report.metrics {
        Some(s) => println!(
            "{}: acc {:.4}  nmi {:.4}  pur {:.4}",
            ds.name(),
            s.acc,
            s.nmi,
            s.pur
        ),
        None => println!(
            "{}: {} labels written (dataset has no ground truth)",
            ds.name(),
            labels.len()
        ),
    }
    Ok(())
}

fn run_training<T: Scalar>(
    mut session: Session<T>,
    ds: &MultiViewDataset,
    args: &TrainArgs,
    started: u64,
) -> Result<()> {
    let ckpt = args.out.join("checkpoint");
    let every = args.checkpoint_every.unwrap_or(0);
    loop {
        let Some(record) = session.run_epoch(ds)?.cloned() else {
            break;
        };
        if !args.quiet {
            log_epoch(&record);
        }
        if every > 0 && record.epoch % every == 0 {
            save_session(&session, &ckpt)?;
        }
    }
    save_session(&session, &ckpt)?;
    write_file(&args.out.join("epochs.jsonl"), &session.trace().to_jsonl())?;
    let cfg = session.config().clone();
    let result = session.result(ds)?;
    let manifest = RunManifest::new(ds, &cfg, started);
    write_file(&args.out.join("run_manifest.toml"), &manifest.to_toml())?;
    let report = MetricsReport::new(ds, &cfg, result.scores);
    write_outputs(&args.out, ds, &result.labels, &report)
}

fn train(args: TrainArgs) -> Result<()> {
    let started = unix_now();
    let ds = load_dataset(&args.data)?;
    if let Some(dir) = &args.resume {
        let precision = checkpoint_precision(dir)?;
        create_dir(&args.out)?;
        return match precision {
            Precision::F32 => {
                let s = load_session::<f32>(dir)?;
                check_compatible(s.model().architecture(), &ds)?;
                run_training(s, &ds, &args, started)
            }
            Precision::F64 => {
                let s = load_session::<f64>(dir)?;
                check_compatible(s.model().architecture(), &ds)?;
                run_training(s, &ds, &args, started)
            }
        };
    }
    let cfg = match &args.from_manifest {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let manifest = RunManifest::from_toml(&text)?;
            manifest.check_dataset(&ds)?;
            manifest.config
        }
        None => args.config.resolve()?,
    };
    let arch = Architecture::new(ds.view_dims(), ds.n_clusters(), cfg.model.clone())?;
    check_compatible(&arch, &ds)?;
    create_dir(&args.out)?;
    match cfg.precision {
        Precision::F32 => run_training(Session::<f32>::new(cfg, &ds)?, &ds, &args, started),
        Precision::F64 => run_training(Session::<f64>::new(cfg, &ds)?, &ds, &args, started),
    }
}

fn evaluate<T: Scalar>(args: &EvalArgs, ds: &MultiViewDataset) -> Result<()> {
    let (model, mut cfg) = load_model::<T>(&args.checkpoint)?;
    check_compatible(model.architecture(), ds)?;
    if let Some(source) = args.label_source {
        cfg.label_source = source;
    }
    create_dir(&args.out)?;
    let result = cluster(&model, ds, &cfg)?;
    let report = MetricsReport::new(ds, &cfg, result.scores);
    if args.export_features {
        let e = embed(&model, ds, cfg.eval_batch_size)?;
        let dir = args.out.join("features");
        create_dir(&dir)?;
        write_matrix(&dir.join("c_hat.bin"), &e.c_hat, cfg.precision)?;
        write_matrix(&dir.join("h_hat.bin"), &e.h_hat, cfg.precision)?;
        let index = format!(
            "precision = {}\n\n[c_hat]\nfile = \"c_hat.bin\"\nrows = {}\ncols = {}\n\n[h_hat]\nfile = \"h_hat.bin\"\nrows = {}\ncols = {}\n",
            u32::from(cfg.precision),
            e.c_hat.rows(),
            e.c_hat.cols(),
            e.h_hat.rows(),
            e.h_hat.cols()
        );
        write_file(&dir.join("features.toml"), &index)?;
    }
    write_outputs(&args.out, ds, &result.labels, &report)
}

fn eval(args: EvalArgs) -> Result<()> {
    let precision = checkpoint_precision(&args.checkpoint)?;
    let ds = load_dataset(&args.data)?;
    match precision {
        Precision::F32 => evaluate::<f32>(&args, &ds),
        Precision::F64 => evaluate::<f64>(&args, &ds),
    }
}

fn ablate(args: AblateArgs) -> Result<()> {
    let arms = args
        .arms
        .iter()
        .map(|a| Arm::parse(a.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    let base = args.config.resolve()?;
    for arm in &arms {
        arm.config(&base).validate()?;
    }
    let ds = load_dataset(&args.data)?;
    if ds.labels().is_none() {
        bail!("{}: ablation needs a labelled dataset", args.data.display());
    }
    let arch = Architecture::new(ds.view_dims(), ds.n_clusters(), base.model.clone())?;
    check_compatible(&arch, &ds)?;
    create_dir(&args.out)?;
    let report = run_ablation(&ds, &base, &arms, &args.seeds, |arm, seed, s| {
        eprintln!(
            "{arm} seed {seed}: acc {:.4} nmi {:.4} pur {:.4}",
            s.acc, s.nmi, s.pur
        );
    })?;
    write_file(&args.out.join("ablation.json"), &report.to_json())?;
    let table = report.render_table();
    write_file(&args.out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn import(args: ImportArgs) -> Result<()> {
    let ds = import_csv(
        &args.name,
        &args.views,
        args.labels.as_deref(),
        args.clusters,
        precision(args.precision)?,
    )?;
    save_dataset(&ds, &args.out)?;
    println!(
        "{}: {} samples, views {:?}, fingerprint {}",
        ds.name(),
        ds.n_samples(),
        ds.view_dims(),
        ds.fingerprint()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::ImportCsv(a) => import(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
