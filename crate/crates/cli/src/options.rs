use std::path::{Path, PathBuf};

use clap::Args;
use mcddpm::config::RunConfig;

use crate::{CliError, CliResult, OUTPUT_ROOT_ENV};

/// Thresholds evaluated by `--theta-sweep`.
pub const THETA_SWEEP: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Args, Debug)]
pub struct OutputArgs {
    /// Output directory; relative paths resolve under the output root.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

/// Run configuration sources; later ones win: defaults, `--config`, `--set`, named flags.
#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set depth=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// full, no_bridge or no_conditioning.
    #[arg(long)]
    pub ablation: Option<String>,
    /// Weight of the bridge reconstruction loss.
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    /// Norm of losses and residual maps: 1 or 2.
    #[arg(long)]
    pub p: Option<u32>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Comma-separated `HxW` patch sizes.
    #[arg(long)]
    pub patch_sizes: Option<String>,
    #[arg(long)]
    pub t_test: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub val_every: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub repeats: Option<usize>,
}

impl ConfigArgs {
    pub fn build(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Argument(format!("cannot read config {}: {e}", path.display())))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Argument(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k, v)?;
        }
        let flags: [(&str, Option<String>); 13] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("ablation", self.ablation.clone()),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("p", self.p.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("max_epochs", self.max_epochs.map(|v| v.to_string())),
            ("patch_sizes", self.patch_sizes.clone()),
            ("t_test", self.t_test.map(|v| v.to_string())),
            ("theta", self.theta.map(|v| v.to_string())),
            ("val_every", self.val_every.map(|v| v.to_string())),
            ("checkpoint_every", self.checkpoint_every.map(|v| v.to_string())),
            ("repeats", self.repeats.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        Ok(cfg.finish()?)
    }
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    #[command(flatten)]
    pub output: OutputArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 24)]
    pub train: usize,
    #[arg(long, default_value_t = 4)]
    pub val: usize,
    #[arg(long, default_value_t = 6)]
    pub test: usize,
    /// In-plane size of the square slices.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Slices per volume.
    #[arg(long, default_value_t = 20)]
    pub depth: usize,
    /// Maximum number of anomalies per test volume; 0 makes the test split healthy.
    #[arg(long, default_value_t = 3)]
    pub anomalies: usize,
    /// Smallest anomaly radius in voxels.
    #[arg(long, default_value_t = 4.0)]
    pub min_radius: f32,
    /// Largest anomaly radius in voxels.
    #[arg(long, default_value_t = 7.0)]
    pub max_radius: f32,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory or manifest file.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Split to evaluate.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Comma-separated thresholds; defaults to the configured theta.
    #[arg(long, value_delimiter = ',', conflicts_with = "theta_sweep")]
    pub thetas: Vec<f64>,
    /// Evaluate thresholds 0.1 to 0.5.
    #[arg(long)]
    pub theta_sweep: bool,
    /// Name written to the report's dataset column; defaults to the data directory name.
    #[arg(long)]
    pub dataset_name: Option<String>,
    /// Write reconstructions, anomaly maps and segmentations per case.
    #[arg(long)]
    pub export_maps: bool,
    /// Write PGM images of one slice per case.
    #[arg(long)]
    pub heatmaps: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Raw volume with its `.hdr` sidecar.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

/// Resolves and creates the output directory.
pub fn prepare_output(args: &OutputArgs, configured: Option<&Path>, default_name: &str) -> CliResult<PathBuf> {
    let dir = match args.out.as_deref().or(configured) {
        Some(p) if p.is_absolute() => p.to_path_buf(),
        Some(p) => output_root().join(p),
        None => output_root().join("runs").join(default_name),
    };
    if dir.exists() {
        let non_empty = std::fs::read_dir(&dir)
            .map_err(|e| CliError::Argument(format!("cannot read output directory {}: {e}", dir.display())))?
            .next()
            .is_some();
        if non_empty && !args.force {
            return Err(CliError::Argument(format!("output directory {} is not empty; pass --force to reuse it", dir.display())));
        }
    }
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Argument(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

/// Manifest path from a dataset directory or file argument, falling back to the configured one.
pub fn manifest_path(data: Option<&Path>, configured: Option<&Path>) -> CliResult<PathBuf> {
    let p = data.or(configured).ok_or_else(|| CliError::Argument("no dataset given; pass --data".into()))?;
    Ok(if p.is_dir() { p.join(mcddpm::data::MANIFEST_FILE) } else { p.to_path_buf() })
}
