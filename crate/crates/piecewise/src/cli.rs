//! Command-line interface.
//!
//! Exit codes are a stable contract: 0 on success, 2 for configuration,
//! contract or I/O problems (including flag parsing, which clap also exits
//! 2 for), and 3 for runtime aborts such as non-finite losses.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::confidence::{batch_size_bound, self_consistent_batch_size};
use crate::config::{load_dataset, DataConfig, RunConfig, SubsetConfig};
use crate::data::{Dataset, Standardizer};
use crate::divergence::DivergenceKind;
use crate::error::{Error, Result};
use crate::eval::{
    clustering_accuracy, heatmap_grid, stability_stats, write_heatmap_csv, write_stability_csv,
};
use crate::model::{predict_eval, Checkpoint, ModelParams};
use crate::smoothness::margin_probe;
use crate::tensor::{set_force_serial, Tensor};
use crate::trainer::{train_from, TrainHistory};
use crate::transmission::{
    instance_transition, is_diagonal, label_transition, recurrent_class_count, SUPPORT_TOL,
};

#[derive(Debug, Parser)]
#[command(
    name = "piecewise",
    version,
    about = "Unsupervised training of confident, locally constant classifiers"
)]
pub struct Cli {
    /// Force single-threaded numeric kernels. Results are identical either
    /// way; this removes even the possibility of timing effects.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a JSON run configuration.
    Train(TrainArgs),
    /// Score a checkpoint's clusters against true labels.
    Eval(EvalArgs),
    /// Sample a 2-D model's probability, Fisher criterion and entropy on a
    /// grid.
    Heatmap(HeatmapArgs),
    /// Compute the label-completeness batch-size bound.
    BatchSize(BatchSizeArgs),
    /// Find the largest perturbation radius a model tolerates.
    ProbeMargin(ProbeMarginArgs),
    /// Inspect a checkpoint's label and instance transition matrices.
    Transmission(TransmissionArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Path to the JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Override the seed from the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Dataset selection shared by the evaluation-style commands. Exactly one
/// source must be given: --two-circles, --images with --labels, or --data.
#[derive(Debug, Args)]
pub struct DataOpts {
    /// Generate the synthetic two-circles set with this many points per
    /// class.
    #[arg(long, value_name = "N_PER_CLASS")]
    pub two_circles: Option<usize>,
    /// Noise level for --two-circles.
    #[arg(long, default_value_t = 0.1)]
    pub noise_sigma: f64,
    /// Generation seed for --two-circles.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    /// IDX image file (requires --labels).
    #[arg(long, requires = "labels")]
    pub images: Option<PathBuf>,
    /// IDX label file (requires --images).
    #[arg(long, requires = "images")]
    pub labels: Option<PathBuf>,
    /// Headered CSV file of features (and optionally a label column).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Name of the label column inside --data.
    #[arg(long)]
    pub label_column: Option<String>,
    /// Keep only these true classes, remapped to 0.. in the given order.
    #[arg(long, value_delimiter = ',')]
    pub subset_classes: Option<Vec<usize>>,
    /// Instances kept per class when --subset-classes is given.
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Seed for the per-class subsampling.
    #[arg(long, default_value_t = 0)]
    pub subset_seed: u64,
}

impl DataOpts {
    fn subset(&self) -> Result<Option<SubsetConfig>> {
        match (&self.subset_classes, self.per_class) {
            (Some(classes), Some(per_class)) => Ok(Some(SubsetConfig {
                classes: classes.clone(),
                per_class,
                seed: self.subset_seed,
            })),
            (None, None) => Ok(None),
            _ => Err(Error::config(
                "--subset-classes and --per-class must be given together".to_string(),
            )),
        }
    }

    fn to_config(&self) -> Result<DataConfig> {
        let sources =
            self.two_circles.is_some() as u8 + self.images.is_some() as u8 + self.data.is_some() as u8;
        if sources != 1 {
            return Err(Error::config(
                "give exactly one data source: --two-circles, --images/--labels, or --data"
                    .to_string(),
            ));
        }
        if let Some(n) = self.two_circles {
            if self.subset()?.is_some() {
                return Err(Error::config(
                    "--subset-classes does not apply to --two-circles".to_string(),
                ));
            }
            return Ok(DataConfig::TwoCircles {
                n_per_class: n,
                r_inner: 1.0,
                r_outer: 2.0,
                noise_sigma: self.noise_sigma,
                seed: self.data_seed,
                standardize: false,
            });
        }
        if let (Some(images), Some(labels)) = (&self.images, &self.labels) {
            return Ok(DataConfig::Idx {
                images: images.clone(),
                labels: labels.clone(),
                subset: self.subset()?,
                standardize: false,
            });
        }
        Ok(DataConfig::Csv {
            path: self.data.clone().expect("source arithmetic"),
            label_column: self.label_column.clone(),
            subset: self.subset()?,
            standardize: false,
        })
    }

    /// Loads the dataset and applies the checkpoint's standardizer, which
    /// was fitted on the training split.
    fn load_for(&self, standardizer: &Option<Standardizer>) -> Result<Dataset> {
        let (mut ds, _) = load_dataset(&self.to_config()?)?;
        if let Some(st) = standardizer {
            ds = st.apply(&ds);
        }
        Ok(ds)
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataOpts,
    /// Also write per-instance stability rows to this CSV file.
    #[arg(long)]
    pub stability: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Bounding box as xmin,xmax,ymin,ymax.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub bbox: Vec<f64>,
    /// Grid points per axis.
    #[arg(long, default_value_t = 100)]
    pub resolution: usize,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BatchSizeArgs {
    /// Smallest class prior probability.
    #[arg(long)]
    pub prior_min: f64,
    /// Number of batches drawn (sweeps over the set times batches per
    /// sweep; use 1 for a single batch).
    #[arg(long, default_value_t = 1.0)]
    pub sweeps: f64,
    /// Number of labels.
    #[arg(long)]
    pub classes: f64,
    /// Tolerated probability of any batch missing a label.
    #[arg(long, default_value_t = 1e-4)]
    pub epsilon: f64,
    /// Dataset size; when given, also reports the self-consistent bound
    /// where the batch count itself depends on the batch size.
    #[arg(long)]
    pub dataset_size: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ProbeMarginArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataOpts,
    /// Divergence threshold regarded as "unchanged".
    #[arg(long)]
    pub tau: f64,
    /// Increasing radii to test, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub rho_grid: Vec<f64>,
    /// Random directions per instance and radius.
    #[arg(long, default_value_t = 1000)]
    pub directions: usize,
    /// Divergence to probe with.
    #[arg(long, value_enum, default_value_t = DivergenceArg::SqHellinger)]
    pub divergence: DivergenceArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DivergenceArg {
    Kl,
    SqHellinger,
}

impl From<DivergenceArg> for DivergenceKind {
    fn from(v: DivergenceArg) -> DivergenceKind {
        match v {
            DivergenceArg::Kl => DivergenceKind::Kl,
            DivergenceArg::SqHellinger => DivergenceKind::SqHellinger,
        }
    }
}

#[derive(Debug, Args)]
pub struct TransmissionArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataOpts,
    /// Write the label transition matrix T here as CSV.
    #[arg(long)]
    pub out_t: Option<PathBuf>,
    /// Write the instance transition matrix S here as CSV.
    #[arg(long)]
    pub out_s: Option<PathBuf>,
}

/// Entry point used by `main`; parses `std::env::args`.
pub fn run() -> Result<()> {
    let cli = Cli::parse();
    if cli.deterministic {
        set_force_serial(true);
    }
    match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Heatmap(args) => cmd_heatmap(&args),
        Command::BatchSize(args) => cmd_batch_size(&args),
        Command::ProbeMargin(args) => cmd_probe_margin(&args),
        Command::Transmission(args) => cmd_transmission(&args),
    }
}

/// Maps an error to the exit-code contract: runtime aborts are 3,
/// everything else (config, contract, I/O, parsing) is 2.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::NonFinite { .. } | Error::TrainAbort(_) => 3,
        _ => 2,
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let (ds, standardizer) = load_dataset(&cfg.data)?;
    std::fs::create_dir_all(&cfg.out_dir)?;

    #[derive(Serialize)]
    struct Manifest<'a> {
        version: &'a str,
        config: &'a RunConfig,
        dataset: &'a str,
        instances: usize,
    }
    let manifest = serde_json::to_string_pretty(&Manifest {
        version: env!("CARGO_PKG_VERSION"),
        config: &cfg,
        dataset: &ds.name,
        instances: ds.len(),
    })?;
    std::fs::write(cfg.out_dir.join("manifest.json"), manifest + "\n")?;

    let params = crate::model::init(&cfg.model, cfg.train.seed)?;
    let out_dir = cfg.out_dir.clone();
    let every = cfg.checkpoint_every;
    let std_for_obs = standardizer.clone();
    let observer = move |epoch: usize, params: &ModelParams, _: &TrainHistory| {
        if let Some(k) = every {
            if (epoch + 1) % k == 0 {
                let ck = Checkpoint::new(params.clone(), std_for_obs.clone());
                let _ = ck.save(&out_dir.join(format!("checkpoint-epoch-{epoch}.json")));
            }
        }
        ControlFlow::Continue(())
    };
    let (params, history) = train_from(params, &ds, &cfg.train, observer)?;

    let checkpoint_path = cfg.out_dir.join("checkpoint.json");
    Checkpoint::new(params, standardizer).save(&checkpoint_path)?;
    history.write_steps_csv(BufWriter::new(File::create(cfg.out_dir.join("history.csv"))?))?;
    history.write_epochs_csv(BufWriter::new(File::create(cfg.out_dir.join("epochs.csv"))?))?;

    #[derive(Serialize)]
    struct TrainSummary {
        checkpoint: PathBuf,
        epochs_run: usize,
        steps_run: usize,
        final_confidence_loss: Option<f64>,
        final_total_loss: Option<f64>,
    }
    print_json(&TrainSummary {
        checkpoint: checkpoint_path,
        epochs_run: history.epochs.len(),
        steps_run: history.steps.len(),
        final_confidence_loss: history.steps.last().map(|s| s.confidence_loss),
        final_total_loss: history.steps.last().map(|s| s.total),
    })
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let ds = args.data.load_for(&ck.standardizer)?;
    let truth = ds.labels.clone().ok_or_else(|| {
        Error::contract("labels required: evaluation scores clusters against true labels")
    })?;
    let q = predict_eval(&ck.params, &ds.x)?;
    let assignment = clustering_accuracy(&q.predicted_labels(), &truth)?;

    let class_summaries = if args.stability.is_some() {
        let (reports, summaries) = stability_stats(&ck.params, &ds)?;
        let path = args.stability.as_ref().expect("checked above");
        write_stability_csv(&reports, BufWriter::new(File::create(path)?))?;
        Some(summaries)
    } else {
        None
    };

    #[derive(Serialize)]
    struct EvalSummary<'a> {
        accuracy: f64,
        permutation: &'a [usize],
        confusion: &'a [Vec<u64>],
        instances: usize,
        #[serde(skip_serializing_if = "Option::is_none")]
        class_summaries: Option<Vec<crate::eval::ClassSummary>>,
    }
    print_json(&EvalSummary {
        accuracy: assignment.accuracy,
        permutation: &assignment.permutation,
        confusion: &assignment.confusion,
        instances: ds.len(),
        class_summaries,
    })
}

fn cmd_heatmap(args: &HeatmapArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    if args.bbox.len() != 4 {
        return Err(Error::config(
            "--bbox needs four values: xmin,xmax,ymin,ymax".to_string(),
        ));
    }
    let bbox = (args.bbox[0], args.bbox[1], args.bbox[2], args.bbox[3]);
    let rows = heatmap_grid(&ck.params, bbox, args.resolution)?;
    write_heatmap_csv(&rows, BufWriter::new(File::create(&args.out)?))?;

    #[derive(Serialize)]
    struct HeatmapSummary<'a> {
        out: &'a Path,
        points: usize,
        resolution: usize,
    }
    print_json(&HeatmapSummary {
        out: &args.out,
        points: rows.len(),
        resolution: args.resolution,
    })
}

fn cmd_batch_size(args: &BatchSizeArgs) -> Result<()> {
    let bound = batch_size_bound(args.prior_min, args.sweeps * args.classes, args.epsilon)?;
    #[derive(Serialize)]
    struct BoundSummary {
        bound: u64,
        #[serde(skip_serializing_if = "Option::is_none")]
        self_consistent_bound: Option<u64>,
    }
    let self_consistent = match args.dataset_size {
        Some(size) => Some(self_consistent_batch_size(
            args.prior_min,
            args.sweeps,
            size,
            args.classes,
            args.epsilon,
        )?),
        None => None,
    };
    print_json(&BoundSummary {
        bound,
        self_consistent_bound: self_consistent,
    })
}

fn cmd_probe_margin(args: &ProbeMarginArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let ds = args.data.load_for(&ck.standardizer)?;
    let mut rng = ChaCha20Rng::seed_from_u64(args.seed);
    let margin = margin_probe(
        &ck.params,
        &ds.x,
        args.divergence.into(),
        args.tau,
        &args.rho_grid,
        args.directions,
        &mut rng,
    )?;
    #[derive(Serialize)]
    struct MarginSummary {
        margin: f64,
        tau: f64,
        instances: usize,
        directions: usize,
    }
    print_json(&MarginSummary {
        margin,
        tau: args.tau,
        instances: ds.len(),
        directions: args.directions,
    })
}

fn write_matrix_csv(t: &Tensor, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for i in 0..t.rows() {
        let line: Vec<String> = t.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_transmission(args: &TransmissionArgs) -> Result<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let ds = args.data.load_for(&ck.standardizer)?;
    let q = predict_eval(&ck.params, &ds.x)?;
    let t = label_transition(&q);
    let s = instance_transition(&q);
    if let Some(path) = &args.out_t {
        write_matrix_csv(&t, path)?;
    }
    if let Some(path) = &args.out_s {
        write_matrix_csv(&s, path)?;
    }
    #[derive(Serialize)]
    struct TransmissionSummary {
        diagonal: bool,
        recurrent_classes: usize,
        instances: usize,
        classes: usize,
    }
    print_json(&TransmissionSummary {
        diagonal: is_diagonal(&t, 1e-6),
        recurrent_classes: recurrent_class_count(&s, SUPPORT_TOL)?,
        instances: ds.len(),
        classes: t.rows(),
    })
}
