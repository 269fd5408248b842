mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use aqgroup::dataset::{load_dir, parse_timestamp, read_cities, Window};
use aqgroup::graph::{build_city_graph, DistanceMetric};
use aqgroup::model::Batch;
use aqgroup::synth::{generate, SynthConfig};
use aqgroup::train::{
    evaluate_split, export_grouping, median, run_once, sweep_csv, train, write_metrics_csv, AblationReport,
    EpochRecord, JsonLinesLog, MetricsTable, RunSummary, SplitKind, TrainObserver,
};
use aqgroup::{Model, PreparedData, Scalar, Variant};
use clap::{Args, Parser, Subcommand};
use config::{Precision, RunConfig};
use rayon::prelude::*;

/// Group-aware hierarchical graph forecaster for city air quality.
#[derive(Parser, Debug)]
#[command(name = "aqgroup", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic panel with planted groups.
    Synth {
        /// Number of cities.
        #[arg(long, value_parser = positive)]
        cities: usize,
        /// Number of planted groups.
        #[arg(long, value_parser = positive)]
        groups: usize,
        /// Number of hourly time steps.
        #[arg(long, value_parser = positive)]
        hours: usize,
        /// Generator seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for cities.csv, observations.csv, groups_true.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the thresholded city graph and write it as `city_graph.csv`.
    Graph {
        /// Directory containing cities.csv.
        #[arg(long)]
        data_dir: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Distance threshold (km, or degrees with euclidean-degrees).
        #[arg(long, default_value_t = 250.0)]
        radius: f64,
        /// Distance metric.
        #[arg(long, value_enum, default_value_t = Metric::Haversine)]
        distance: Metric,
    },
    /// Train one model per seed; writes checkpoint, JSONL log, and metrics.csv.
    Train(RunArgs),
    /// Evaluate a checkpoint on one split; writes metrics.csv.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory containing cities.csv and observations.csv.
        #[arg(long)]
        data_dir: PathBuf,
        /// Split to evaluate: train, validation (or val), test.
        #[arg(long, value_parser = parse_split, default_value = "test")]
        split: SplitKind,
        /// Window stride in hours; must match the training run.
        #[arg(long, default_value_t = 1, value_parser = positive)]
        step: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Forecast the hours after an anchor time; writes forecast.csv.
    Forecast {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory containing cities.csv and observations.csv.
        #[arg(long)]
        data_dir: PathBuf,
        /// Anchor timestamp (last observed hour), e.g. 2017-01-20T12:00:00Z.
        #[arg(long)]
        at: String,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train over a range of group counts; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Group counts as `lo..hi` (inclusive) or a comma list.
        #[arg(long, default_value = "10..18")]
        values: String,
        /// Number of configurations trained concurrently.
        #[arg(long, default_value_t = 1, value_parser = positive)]
        jobs: usize,
    },
    /// Train every variant under every seed; writes ablation.txt/json and metrics.csv.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated variants (default: all).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
        /// Number of runs trained concurrently.
        #[arg(long, default_value_t = 1, value_parser = positive)]
        jobs: usize,
    },
    /// Write the learned assignment as grouping.csv and grouping.geojson.
    ExportGrouping {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum Metric {
    Haversine,
    EuclideanDegrees,
}

/// Flags shared by the training commands; they override the config file.
#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory containing cities.csv and observations.csv.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Single seed (model init and shuffling); replaces the seed list.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Model variant: full, fga, kmeans, no_ce, no_loc.
    #[arg(long)]
    variant: Option<Variant>,
    /// Number of groups.
    #[arg(long, value_parser = positive)]
    groups: Option<usize>,
    /// Training epochs.
    #[arg(long, value_parser = positive)]
    epochs: Option<usize>,
    /// Mini-batch size.
    #[arg(long, value_parser = positive)]
    batch_size: Option<usize>,
    /// Window stride in hours.
    #[arg(long, value_parser = positive)]
    step: Option<usize>,
    /// Floating-point precision for training.
    #[arg(long, value_enum)]
    precision: Option<Precision>,
    /// Print one line per epoch to standard error.
    #[arg(long)]
    verbose: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = RunConfig::load(self.config.as_deref())?;
        if let Some(d) = &self.data_dir {
            c.data_dir = Some(d.clone());
        }
        if let Some(o) = &self.out {
            c.out = Some(o.clone());
        }
        if let Some(s) = self.seed {
            c.seeds = vec![s];
        }
        if let Some(s) = &self.seeds {
            c.seeds = s.clone();
        }
        if let Some(v) = self.variant {
            c.variant = v;
        }
        if let Some(g) = self.groups {
            c.model.n_groups = g;
        }
        if let Some(e) = self.epochs {
            c.train.epochs = e;
        }
        if let Some(b) = self.batch_size {
            c.train.batch_size = b;
        }
        if let Some(s) = self.step {
            c.window_step = s;
        }
        if let Some(p) = self.precision {
            c.precision = p;
        }
        ensure!(!c.seeds.is_empty(), "at least one seed is required");
        ensure!(c.window_step > 0, "window_step must be positive");
        c.train.validate()?;
        Ok(c)
    }
}

fn positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_split(s: &str) -> std::result::Result<SplitKind, String> {
    s.parse().map_err(|e: aqgroup::Error| e.to_string())
}

fn parse_values(s: &str) -> std::result::Result<Vec<usize>, String> {
    let values: Vec<usize> = if let Some((lo, hi)) = s.split_once("..") {
        let lo = positive(lo.trim())?;
        let hi = positive(hi.trim())?;
        if hi < lo {
            return Err(format!("empty range {s}"));
        }
        (lo..=hi).collect()
    } else {
        s.split(',').map(|v| positive(v.trim())).collect::<std::result::Result<_, _>>()?
    };
    Ok(values)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            cities,
            groups,
            hours,
            seed,
            out,
        } => {
            let data = generate(&SynthConfig::new(cities, groups, hours, seed))?;
            data.write_dir(&out)?;
            eprintln!("wrote {cities} cities x {hours} hours to {}", out.display());
            Ok(())
        }
        Command::Graph {
            data_dir,
            out,
            radius,
            distance,
        } => {
            let cities = read_cities(&data_dir.join("cities.csv"))?;
            let metric = match distance {
                Metric::Haversine => DistanceMetric::Haversine,
                Metric::EuclideanDegrees => DistanceMetric::EuclideanDegrees,
            };
            let locations: Vec<[f64; 2]> = cities.iter().map(|c| c.location()).collect();
            let graph = build_city_graph(&locations, radius, metric)?;
            std::fs::create_dir_all(&out)?;
            graph.write_csv(&out.join("city_graph.csv"))?;
            let isolated = (0..graph.n_nodes).filter(|&i| graph.incoming[i].is_empty()).count();
            eprintln!("{} cities, {} directed edges, {isolated} isolated", graph.n_nodes, graph.n_edges());
            Ok(())
        }
        Command::Train(args) => cmd_train(&args),
        Command::Eval {
            checkpoint,
            data_dir,
            split,
            step,
            out,
        } => {
            let model = Model::<f64>::load(&checkpoint, None)?;
            let data = prepare(&data_dir, model.config.tau_in, model.config.tau_out, step)?;
            ensure_matches(&model, &data)?;
            let table = evaluate_split(&model, &data, split)?;
            std::fs::create_dir_all(&out)?;
            write_metrics_csv(&out.join("metrics.csv"), std::slice::from_ref(&table))?;
            eprintln!("{split}: MAE {:.4} RMSE {:.4} over {} samples", table.overall_mae, table.overall_rmse, table.samples);
            Ok(())
        }
        Command::Forecast {
            checkpoint,
            data_dir,
            at,
            out,
        } => cmd_forecast(&checkpoint, &data_dir, &at, &out),
        Command::Sweep { run, values, jobs } => {
            let values = parse_values(&values).map_err(|e| anyhow::anyhow!("--values {values}: {e}"))?;
            cmd_sweep(&run, &values, jobs)
        }
        Command::Ablate { run, variants, jobs } => cmd_ablate(&run, &variants, jobs),
        Command::ExportGrouping { checkpoint, out } => {
            let model = Model::<f64>::load(&checkpoint, None)?;
            std::fs::create_dir_all(&out)?;
            export_grouping(&model, &out.join("grouping.csv"), &out.join("grouping.geojson"))?;
            eprintln!("exported {} cities into {} groups", model.n_cities(), model.config.n_groups);
            Ok(())
        }
    }
}

fn prepare(data_dir: &Path, tau_in: usize, tau_out: usize, step: usize) -> Result<PreparedData> {
    let (cities, panel) = load_dir(data_dir)?;
    Ok(PreparedData::new(cities, panel, tau_in, tau_out, step)?)
}

fn ensure_matches<T: Scalar>(model: &Model<T>, data: &PreparedData) -> Result<()> {
    if model.cities != data.cities {
        bail!(
            "checkpoint was trained on {} cities that differ from the {} in the data directory",
            model.n_cities(),
            data.cities.len()
        );
    }
    Ok(())
}

/// Writes every epoch to the JSONL log and optionally to stderr.
struct EpochLog<W: Write> {
    log: JsonLinesLog<W>,
    verbose: bool,
    label: String,
}

impl<T, W: Write> TrainObserver<T> for EpochLog<W> {
    fn after_epoch(&mut self, record: &EpochRecord, model: &Model<T>) {
        TrainObserver::<T>::after_epoch(&mut self.log, record, model);
        if self.verbose {
            let val = record.val_mae.map_or("-".to_string(), |v| format!("{v:.4}"));
            eprintln!(
                "{} epoch {:>4} train_mae {:.4} val_mae {val} max_grad_norm {:.3e}",
                self.label, record.epoch, record.train_mae, record.max_grad_norm
            );
        }
    }
}

struct TrainOutcome {
    tables: Vec<MetricsTable>,
}

fn train_one<T: Scalar>(cfg: &RunConfig, data: &PreparedData, seed: u64, dir: &Path, verbose: bool) -> Result<TrainOutcome> {
    let model_cfg = cfg.model.to_config(data.cities.len(), cfg.variant, seed);
    let mut model = Model::<T>::new(model_cfg, &data.cities)?;
    std::fs::create_dir_all(dir)?;
    let log_path = dir.join("train_log.jsonl");
    let mut observer = EpochLog {
        log: JsonLinesLog::new(BufWriter::new(File::create(&log_path)?)),
        verbose,
        label: format!("[{} seed {seed}]", cfg.variant),
    };
    let train_cfg = aqgroup::TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let report = train(&mut model, data, &train_cfg, &mut observer)?;
    if let Some(e) = observer.log.error {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    model.save(&dir.join("checkpoint.json"))?;
    let mut tables = Vec::new();
    for split in [SplitKind::Train, SplitKind::Validation, SplitKind::Test] {
        if !split.windows(&data.split).is_empty() {
            tables.push(evaluate_split(&model, data, split)?);
        }
    }
    eprintln!(
        "{} seed {seed}: best epoch {} (score {:.4})",
        cfg.variant, report.best_epoch, report.best_val_mae
    );
    Ok(TrainOutcome { tables })
}

fn cmd_train(args: &RunArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let out = cfg.out_dir()?.to_path_buf();
    let data = prepare(cfg.data_dir()?, cfg.model.tau_in, cfg.model.tau_out, cfg.window_step)?;
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.toml"), toml::to_string(&cfg)?)?;
    let mut tables = Vec::new();
    for &seed in &cfg.seeds {
        let dir = if cfg.seeds.len() == 1 {
            out.clone()
        } else {
            out.join(format!("seed_{seed}"))
        };
        let outcome = match cfg.precision {
            Precision::F32 => train_one::<f32>(&cfg, &data, seed, &dir, args.verbose)?,
            Precision::F64 => train_one::<f64>(&cfg, &data, seed, &dir, args.verbose)?,
        };
        tables.extend(outcome.tables);
    }
    write_metrics_csv(&out.join("metrics.csv"), &tables)?;
    for split in ["validation", "test"] {
        let maes: Vec<f64> = tables.iter().filter(|t| t.split == split).map(|t| t.overall_mae).collect();
        if !maes.is_empty() {
            let (mean, std) = mean_std(&maes);
            eprintln!("{split} MAE over {} seed(s): {mean:.4} ± {std:.4}", maes.len());
        }
    }
    Ok(())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn cmd_forecast(checkpoint: &Path, data_dir: &Path, at: &str, out: &Path) -> Result<()> {
    let model = Model::<f64>::load(checkpoint, None)?;
    let (cities, panel) = load_dir(data_dir)?;
    if model.cities != cities {
        bail!("checkpoint cities differ from {}", data_dir.join("cities.csv").display());
    }
    let anchor = parse_timestamp(at).map_err(anyhow::Error::msg)?;
    let (tau_in, tau_out) = (model.config.tau_in, model.config.tau_out);
    let hour = panel
        .hour_of(anchor)
        .with_context(|| format!("anchor {at} is outside the observed panel"))?;
    if hour + 1 < tau_in {
        bail!("anchor {at} has only {} hours of history; {tau_in} are required", hour + 1);
    }
    let window = Window {
        start: hour + 1 - tau_in,
        anchor_time: anchor,
    };
    let batch = Batch::<f64>::new(&panel, &[window], &model.normalization, tau_in, tau_out);
    let pred = model.predict(&batch)?;
    std::fs::create_dir_all(out)?;
    let mut w = BufWriter::new(File::create(out.join("forecast.csv"))?);
    writeln!(w, "city_id,horizon,aqi_pred")?;
    for (i, city) in cities.iter().enumerate() {
        for h in 0..tau_out {
            writeln!(w, "{},{},{:.6}", city.city_id, h + 1, pred[(i, h)])?;
        }
    }
    w.flush()?;
    eprintln!("forecast {} cities x {tau_out} hours after {at}", cities.len());
    Ok(())
}

/// Trains every `(variant, n_groups, seed)` on a pool of `jobs` threads;
/// results keep the input order.
fn run_grid(cfg: &RunConfig, data: &PreparedData, grid: &[(Variant, usize, u64)], jobs: usize) -> Result<Vec<RunSummary>> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    pool.install(|| {
        grid.par_iter()
            .map(|&(variant, groups, seed)| {
                let mut section = cfg.model.clone();
                section.n_groups = groups;
                let model_cfg = section.to_config(data.cities.len(), variant, seed);
                let train_cfg = aqgroup::TrainConfig {
                    seed,
                    ..cfg.train.clone()
                };
                let summary = match cfg.precision {
                    Precision::F32 => run_once::<f32>(data, model_cfg, &train_cfg)?.1,
                    Precision::F64 => run_once::<f64>(data, model_cfg, &train_cfg)?.1,
                };
                eprintln!("{variant} groups {groups} seed {seed}: val MAE {:.4}", summary.val_mae);
                Ok(summary)
            })
            .collect()
    })
}

fn cmd_sweep(args: &RunArgs, values: &[usize], jobs: usize) -> Result<()> {
    let cfg = args.resolve()?;
    let out = cfg.out_dir()?.to_path_buf();
    let data = prepare(cfg.data_dir()?, cfg.model.tau_in, cfg.model.tau_out, cfg.window_step)?;
    let grid: Vec<_> = values
        .iter()
        .flat_map(|&g| cfg.seeds.iter().map(move |&s| (cfg.variant, g, s)))
        .collect();
    let runs = run_grid(&cfg, &data, &grid, jobs)?;
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("sweep.csv"), sweep_csv(&runs))?;
    for &g in values {
        let maes: Vec<f64> = runs.iter().filter(|r| r.n_groups == g).map(|r| r.val_mae).collect();
        eprintln!("n_group {g}: median val MAE {:.4}", median(&maes));
    }
    Ok(())
}

fn cmd_ablate(args: &RunArgs, variants: &[Variant], jobs: usize) -> Result<()> {
    let cfg = args.resolve()?;
    let out = cfg.out_dir()?.to_path_buf();
    let data = prepare(cfg.data_dir()?, cfg.model.tau_in, cfg.model.tau_out, cfg.window_step)?;
    let variants: Vec<Variant> = if variants.is_empty() { Variant::ALL.to_vec() } else { variants.to_vec() };
    let grid: Vec<_> = variants
        .iter()
        .flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, cfg.model.n_groups, s)))
        .collect();
    let runs = run_grid(&cfg, &data, &grid, jobs)?;
    let report = AblationReport::from_summaries(&variants, &cfg.seeds, &runs);
    std::fs::create_dir_all(&out)?;
    let text = report.to_text();
    std::fs::write(out.join("ablation.txt"), &text)?;
    std::fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    let tables: Vec<MetricsTable> = runs.into_iter().map(|r| r.test).collect();
    write_metrics_csv(&out.join("metrics.csv"), &tables)?;
    eprint!("{text}");
    Ok(())
}
