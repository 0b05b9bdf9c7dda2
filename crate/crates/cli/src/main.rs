use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use frontal_core::checkpoint::{checkpoint_name, latest_checkpoint, Checkpoint};
use frontal_core::data::{
    build_manifest, export_images, scan_real, DatasetManifest, Record, Source, Split, SynthOptions, POSES,
};
use frontal_core::eval::{self, Frontalizer, Oracle};
use frontal_core::train::{self, RunDir, TrainState};
use frontal_core::warp::read_flo;
use frontal_core::{viz, Config};

const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "frontal", version, about = "Flow-guided face frontalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic dataset and write its manifest.
    GenData(GenData),
    /// Train the identity embedder and pretrain both flow networks.
    PretrainFlow(PretrainFlow),
    /// Run end-to-end training, optionally from a checkpoint.
    Train(Train),
    /// Rank-1, verification and illumination metrics on the test split.
    Eval(Eval),
    /// Write triptychs, flow panels and attention grids.
    Visualize(Visualize),
}

#[derive(Args, Debug)]
struct GenData {
    /// Output directory; receives manifest.json.
    #[arg(long)]
    out: PathBuf,
    /// Number of identities (at least 2 for the train/test split).
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(2..))]
    identities: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image side in pixels (multiple of 4, at least 16).
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Illumination variants per identity and pose.
    #[arg(long, default_value_t = 4)]
    illum_per_pose: u32,
    /// Also write every view as PNG with mask and landmark files.
    #[arg(long, default_value_t = false)]
    export_images: bool,
}

#[derive(Args, Debug)]
struct Common {
    /// Config file (`key = value` lines); defaults apply otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest file, a directory holding manifest.json, or a real-data root.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PretrainFlow {
    #[command(flatten)]
    common: Common,
    /// Overrides `pretrain_epochs` from the config.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct Train {
    #[command(flatten)]
    common: Common,
    /// Start from this checkpoint instead of pretraining from scratch.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Overrides `total_steps` from the config; the warm-up becomes 10% of it.
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from the newest checkpoint under --out if there is one.
    #[arg(long, default_value_t = false)]
    resume: bool,
    /// Print a loss line every this many steps (0 disables).
    #[arg(long, default_value_t = 50)]
    log_every: u64,
}

#[derive(Args, Debug)]
struct Eval {
    /// Manifest file, a directory holding manifest.json, or a real-data root.
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint; its config and embedder are used.
    #[arg(long)]
    ckpt: PathBuf,
    /// Output directory for report.json and rank1.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Visualize {
    /// Config file; only `resolution` is used for real-data roots.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest file, a directory holding manifest.json, or a real-data root.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to visualize; without it the ground truth is shown.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Only test records at this pose.
    #[arg(long, allow_hyphen_values = true)]
    pose: Option<i32>,
    /// Number of records to render.
    #[arg(long, default_value_t = 4)]
    count: usize,
    /// Render a Middlebury .flo file instead of dataset samples.
    #[arg(long)]
    flow: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(Config::default()),
    }
}

fn load_data(path: &Path, resolution: usize) -> Result<DatasetManifest> {
    if path.is_file() {
        return Ok(DatasetManifest::load(path)?);
    }
    let inner = path.join(MANIFEST_FILE);
    if inner.is_file() {
        return Ok(DatasetManifest::load(&inner)?);
    }
    if path.is_dir() {
        return Ok(scan_real(path, resolution)?);
    }
    bail!("data not found: {}", path.display())
}

/// Config plus manifest, with the resolution taken from the data when no
/// config file was given.
fn setup(c: &Common) -> Result<(Config, DatasetManifest)> {
    let mut cfg = load_config(c.config.as_deref())?;
    let m = load_data(&c.data, cfg.resolution)?;
    if c.config.is_none() {
        cfg.resolution = m.resolution;
    }
    if cfg.resolution != m.resolution {
        bail!(
            "config resolution {} differs from data resolution {}",
            cfg.resolution,
            m.resolution
        );
    }
    Ok((cfg, m))
}

/// Records the effective config next to the run's outputs.
fn write_config(out: &Path, cfg: &Config) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let p = out.join("config.cfg");
    std::fs::write(&p, cfg.to_kv_string()).with_context(|| format!("writing {}", p.display()))
}

fn load_state(path: &Path, cfg: Option<Config>) -> Result<TrainState> {
    let c = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(TrainState::from_checkpoint(&c, cfg)?)
}

fn gen_data(a: GenData) -> Result<()> {
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let opts = SynthOptions {
        resolution: a.resolution,
        illum_per_pose: a.illum_per_pose,
    };
    let m = build_manifest(&a.out, a.identities as usize, &POSES, a.seed, opts)?;
    let path = a.out.join(MANIFEST_FILE);
    m.save(&path)?;
    if a.export_images {
        let files = export_images(&m, &a.out.join("images"))?;
        eprintln!("wrote {} image files", files.len());
    }
    println!("{}", path.display());
    Ok(())
}

fn pretrain_flow(a: PretrainFlow) -> Result<()> {
    let (mut cfg, m) = setup(&a.common)?;
    if let Some(e) = a.epochs {
        cfg.pretrain_epochs = e;
    }
    write_config(&a.common.out, &cfg)?;
    let (state, report) = train::initial_state(&cfg, &m)?;
    let dir = RunDir::create(&a.common.out)?;
    let path = dir.checkpoints().join(checkpoint_name(0));
    state.save(&path)?;
    let mut summary = serde_json::json!({
        "checkpoint": path,
        "landmark": report.landmark,
        "sampling": report.sampling,
        "smoothness": report.smoothness,
    });
    if matches!(m.source, Source::Synthetic) {
        let acc = train::flow_accuracy(&state.flow_f, &m, &m.records_in(Split::Test))?;
        summary["test_epe"] = acc.epe.into();
        summary["test_frontal_magnitude"] = acc.frontal_magnitude.into();
    }
    let report_path = dir.logs().join("pretrain.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&summary)?)
        .with_context(|| format!("writing {}", report_path.display()))?;
    println!("{}", path.display());
    Ok(())
}

fn train_cmd(a: Train) -> Result<()> {
    let (mut cfg, m) = setup(&a.common)?;
    if let Some(s) = a.steps {
        cfg = cfg.with_total_steps(s);
    }
    write_config(&a.common.out, &cfg)?;
    let every = a.log_every;
    let on_step = |s: u64, r: &frontal_core::losses::LossReport| {
        if every > 0 && s % every == 0 {
            eprintln!("{}", r.to_json_line(s));
        }
    };
    let out = match &a.ckpt {
        Some(ckpt) if !(a.resume && latest_checkpoint(&a.common.out.join("checkpoints")).is_some()) => {
            let mut state = load_state(ckpt, Some(cfg.clone()))?;
            let dir = RunDir::create(&a.common.out)?;
            train::run_training(&mut state, &m, &dir, cfg.total_steps, on_step)?;
            dir.checkpoints().join(checkpoint_name(state.step))
        }
        _ => train::train_full(&cfg, &m, &a.common.out, a.resume, on_step)?,
    };
    println!("{}", out.display());
    Ok(())
}

fn eval_cmd(a: Eval) -> Result<()> {
    let state = load_state(&a.ckpt, None)?;
    let m = load_data(&a.data, state.cfg.resolution)?;
    let report = eval::evaluate(&state, &m, &state.embedder)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let json = a.out.join("report.json");
    std::fs::write(&json, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", json.display()))?;
    let table = eval::format_table(&[("frontalized", &report.recognition), ("raw", &report.baseline)]);
    let table_path = a.out.join("rank1.txt");
    std::fs::write(&table_path, &table).with_context(|| format!("writing {}", table_path.display()))?;
    print!("{table}");
    match &report.verification {
        Some(v) => println!("verification ACC {:.2} AUC {:.2}", v.acc, 100.0 * v.auc),
        None => println!("verification skipped: fewer than 2 gallery identities"),
    }
    println!(
        "illumination L1(warped, profile) {:.4}  L1(synth, frontal) {:.4}",
        report.illumination.mean_warped_vs_profile(),
        report.illumination.mean_synth_vs_frontal()
    );
    Ok(())
}

fn visualize(a: Visualize) -> Result<()> {
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    if let Some(flo) = &a.flow {
        let f = read_flo(flo).with_context(|| format!("reading {}", flo.display()))?;
        let path = a.out.join("flow.png");
        viz::save_grid(&path, &[vec![viz::flow_panel(f.tensor())?]])?;
        println!("{}", path.display());
        return Ok(());
    }
    let Some(data) = &a.data else {
        bail!("--data or --flow is required");
    };
    let cfg = load_config(a.config.as_deref())?;
    let state = a.ckpt.as_deref().map(|p| load_state(p, None)).transpose()?;
    let res = state.as_ref().map_or(cfg.resolution, |s| s.cfg.resolution);
    let m = load_data(data, res)?;
    let records: Vec<Record> = m
        .records_in(frontal_core::data::Split::Test)
        .into_iter()
        .filter(|r| a.pose.is_none_or(|p| r.pose_deg == p))
        .take(a.count)
        .collect();
    if records.is_empty() {
        bail!("no test records match the selection");
    }
    let model: &dyn Frontalizer = match &state {
        Some(s) => s,
        None => &Oracle,
    };
    for f in eval::dump_qualitative(model, &m, &records, &a.out)? {
        println!("{}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::PretrainFlow(a) => pretrain_flow(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Visualize(a) => visualize(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
