use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use avdgp::config::{ModelConfig, Rule, Task};
use avdgp::data::{gen_toy_letters, load_csv, sample_prior_paths, to_csv, Dataset, Mask, PriorMode};
use avdgp::deepmodel::{cost_report, DgpModel};
use avdgp::experiment::{self, resolve_data_path};
use avdgp::trainer::{evaluate, Checkpoint};
use avdgp::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "avdgp", version, about = "Amortized variational deep Gaussian processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the "DGP" letters classification data as CSV (x1,x2,y).
    GenToy {
        #[arg(long, default_value_t = avdgp::data::DEFAULT_TOY_N)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Write an `x1,x2,y` header line.
        #[arg(long)]
        header: bool,
    },
    /// Train a model; writes checkpoints, the epoch log and the test score.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "avdgp-run")]
        out_dir: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the raw train/val/test splits as CSV.
        #[arg(long)]
        export_splits: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Score a checkpoint; prints (or writes) a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV in the layout of the training data (raw units).
        #[arg(long, conflicts_with = "split")]
        data: Option<PathBuf>,
        /// Rebuild a split of the checkpoint's own dataset instead.
        #[arg(long, value_enum)]
        split: Option<SplitName>,
        /// Predictive components; defaults to the config's `eval_samples`.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw paths from composed conventional and amortized GP priors.
    SamplePrior {
        /// JSON settings; flags below override individual fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Long-format path values: mode,seed,depth,path,x,f.
        #[arg(long)]
        out: PathBuf,
        /// Per-depth roughness statistic; printed when omitted.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Run a grid of configurations over several seeds and tabulate scores.
    Benchmark {
        #[arg(long, value_enum, default_value = "toy")]
        suite: Suite,
        /// Base config (required for the `rules` suite).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Total inducing points |M| per model (toy suite).
        #[arg(long = "M", value_delimiter = ',', default_values_t = vec![16, 32, 64, 128])]
        m: Vec<usize>,
        /// Layer counts (toy suite).
        #[arg(long = "L", value_delimiter = ',', default_values_t = vec![1, 2, 3, 4])]
        l: Vec<usize>,
        /// Rules compared by the `rules` suite.
        #[arg(long, value_delimiter = ',', default_values_t = vec!["AR1".to_string(), "AR2".into(), "AR2P".into()])]
        rules: Vec<String>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Override epochs of every cell.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the toy training-set size.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the per-layer time and memory counts of a configuration.
    Cost {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        /// Input dimension; read from the dataset when omitted.
        #[arg(long)]
        input_dim: Option<usize>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Conventional,
    Amortized,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    /// Error rate over |M| × L on the letters problem.
    Toy,
    /// One row per amortization rule on the base config's dataset.
    Rules,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) => 2,
        e if e.is_numeric() => 3,
        _ => 1,
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenToy { n, seed, out, header } => {
            let ds = gen_toy_letters(n, seed, &Mask::default_letters())?;
            write(&out, to_csv(&ds, None, header))
        }
        Command::Train { config, out_dir, seed, export_splits, quiet } => {
            train_cmd(&config, &out_dir, seed, export_splits, quiet)
        }
        Command::Eval { checkpoint, data, split, samples, out } => {
            eval_cmd(&checkpoint, data.as_deref(), split, samples, out.as_deref())
        }
        Command::SamplePrior { config, mode, depth, paths, seeds, out, stats } => {
            let mut settings = match config {
                Some(p) => PriorSettings::load(&p)?,
                None => PriorSettings::default(),
            };
            if let Some(m) = mode {
                settings.modes = match m {
                    ModeArg::Conventional => vec![PriorMode::Conventional],
                    ModeArg::Amortized => vec![PriorMode::Amortized],
                    ModeArg::Both => vec![PriorMode::Conventional, PriorMode::Amortized],
                };
            }
            settings.depth = depth.unwrap_or(settings.depth);
            settings.paths = paths.unwrap_or(settings.paths);
            if let Some(s) = seeds {
                settings.seeds = s;
            }
            sample_prior_cmd(&settings, &out, stats.as_deref())
        }
        Command::Benchmark { suite, config, m, l, rules, seeds, epochs, n, out } => {
            let cells = match suite {
                Suite::Toy => toy_cells(config.as_deref(), &m, &l)?,
                Suite::Rules => {
                    let path = config.ok_or_else(|| Error::Config("the rules suite needs --config".into()))?;
                    rule_cells(&ModelConfig::load(&path)?, &rules)?
                }
            };
            benchmark_cmd(cells, seeds, epochs, n, &out)
        }
        Command::Cost { config, batch, samples, input_dim, json } => cost_cmd(&config, batch, samples, input_dim, json),
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn train_cmd(config: &Path, out_dir: &Path, seed: Option<u64>, export_splits: bool, quiet: bool) -> Result<()> {
    let mut cfg = ModelConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    fs::create_dir_all(out_dir)?;
    if export_splits {
        let (train, test, val) = experiment::raw_splits(&cfg)?;
        for (name, ds) in [("train", &train), ("val", &val), ("test", &test)] {
            write(&out_dir.join(format!("{name}.csv")), to_csv(ds, cfg.label_column, cfg.header))?;
        }
    }
    let out = experiment::run(&cfg, |e| {
        if !quiet {
            let val = match (e.val_error_rate, e.val_nll) {
                (Some(err), Some(nll)) => format!(" val_nll {nll:.4} val_err {:.2}%", 100.0 * err),
                (None, Some(nll)) => format!(" val_nll {nll:.4} val_rmse {:.4}", e.val_rmse.unwrap_or(f64::NAN)),
                _ => String::new(),
            };
            eprintln!("epoch {:>4} loss {:.4}{val}", e.epoch, e.train_loss);
        }
    })?;
    out.checkpoint.save(&out_dir.join("model.ckpt"))?;
    if let Some(best) = &out.best {
        best.save(&out_dir.join("model.best.ckpt"))?;
    }
    write(&out_dir.join("epochs.csv"), experiment::epoch_log_csv(&out.outcome.log))?;
    let report = serde_json::to_string_pretty(&out.test)?;
    write(&out_dir.join("test.json"), format!("{report}\n"))?;
    if !quiet {
        println!("{report}");
    }
    Ok(())
}

fn eval_cmd(
    checkpoint: &Path,
    data: Option<&Path>,
    split: Option<SplitName>,
    samples: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = &ck.config;
    let raw = match data {
        Some(p) => load_csv(p, cfg.label_column, cfg.task, cfg.header)?,
        None => {
            let (train, test, val) = experiment::raw_splits(cfg)?;
            match split.unwrap_or(SplitName::Test) {
                SplitName::Train => train,
                SplitName::Val => val,
                SplitName::Test => test,
            }
        }
    };
    if raw.dim() != ck.input_dim {
        return Err(Error::Data(format!("data has {} inputs, checkpoint expects {}", raw.dim(), ck.input_dim)));
    }
    let ds = match &ck.standardizer {
        Some(s) => s.apply(&raw),
        None => raw,
    };
    let model = ck.model()?;
    let report = evaluate(&model, &ds, samples.unwrap_or(cfg.eval_samples), cfg.seed)?;
    let text = format!("{}\n", serde_json::to_string_pretty(&report)?);
    match out {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Settings of the prior-sampling demo.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorSettings {
    grid_min: f64,
    grid_max: f64,
    grid_points: usize,
    depth: usize,
    paths: usize,
    seeds: Vec<u64>,
    modes: Vec<PriorMode>,
    conventional_inducing: usize,
    amortized_inducing: usize,
}

impl Default for PriorSettings {
    fn default() -> Self {
        PriorSettings {
            grid_min: -3.0,
            grid_max: 3.0,
            grid_points: 200,
            depth: 6,
            paths: 5,
            seeds: (0..5).collect(),
            modes: vec![PriorMode::Conventional, PriorMode::Amortized],
            conventional_inducing: 128,
            amortized_inducing: 4,
        }
    }
}

impl PriorSettings {
    fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }
}

fn mode_name(m: PriorMode) -> &'static str {
    match m {
        PriorMode::Conventional => "conventional",
        PriorMode::Amortized => "amortized",
    }
}

fn sample_prior_cmd(s: &PriorSettings, out: &Path, stats: Option<&Path>) -> Result<()> {
    if s.grid_points < 2 || s.grid_max.partial_cmp(&s.grid_min) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Config("grid needs at least 2 points and grid_max > grid_min".into()));
    }
    let step = (s.grid_max - s.grid_min) / (s.grid_points - 1) as f64;
    let grid: Vec<f64> = (0..s.grid_points).map(|i| s.grid_min + step * i as f64).collect();
    let mut paths_csv = String::from("mode,seed,depth,path,x,f\n");
    let mut stats_csv = String::from("mode,seed,depth,statistic,ratio_to_depth1\n");
    for &mode in &s.modes {
        let m = match mode {
            PriorMode::Conventional => s.conventional_inducing,
            PriorMode::Amortized => s.amortized_inducing,
        };
        for &seed in &s.seeds {
            let p = sample_prior_paths(&grid, s.depth, mode, m, seed, s.paths)?;
            let name = mode_name(mode);
            for (l, layer) in p.paths.iter().enumerate() {
                for (j, path) in layer.iter().enumerate() {
                    for (x, f) in grid.iter().zip(path) {
                        paths_csv.push_str(&format!("{name},{seed},{},{j},{x},{f}\n", l + 1));
                    }
                }
            }
            for (l, st) in p.statistic.iter().enumerate() {
                stats_csv.push_str(&format!("{name},{seed},{},{st},{}\n", l + 1, st / p.statistic[0]));
            }
        }
    }
    write(out, paths_csv)?;
    match stats {
        Some(p) => write(p, stats_csv),
        None => {
            print!("{stats_csv}");
            Ok(())
        }
    }
}

/// One benchmark cell: a label and the config trained for every seed.
struct Cell {
    layers: usize,
    total_m: usize,
    rule: Rule,
    config: ModelConfig,
}

/// Per-layer shares of |M|: 1:1, 2:1:1, 4:2:1:1, ...; the first layer takes
/// any rounding remainder.
fn inducing_split(total: usize, layers: usize) -> Vec<usize> {
    let weights: Vec<usize> =
        (0..layers).map(|l| if l + 1 == layers { 1 } else { 1 << (layers - 2 - l).min(63) }).collect();
    let weights: Vec<usize> = if layers == 1 { vec![1] } else { weights };
    let sum: usize = weights.iter().sum();
    let mut m: Vec<usize> = weights.iter().map(|w| (total * w / sum).max(1)).collect();
    let used: usize = m.iter().sum();
    if used < total {
        m[0] += total - used;
    }
    m
}

const TOY_TEMPLATE: &str = r#"{"task":"binary","dataset":"toy","rule":"AR2P","layers":3,"dims":[2,2],
    "inducing":[32,16,16],"samples":8,"likelihood":"bernoulli_probit","inference_fn":"affine_mlp"}"#;

fn toy_cells(base: Option<&Path>, ms: &[usize], ls: &[usize]) -> Result<Vec<Cell>> {
    let base = match base {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::from_json(TOY_TEMPLATE)?,
    };
    let mut cells = Vec::new();
    for &l in ls {
        for &m in ms {
            if l == 0 || m < l {
                return Err(Error::Config(format!("cannot spread |M|={m} over {l} layers")));
            }
            let mut cfg = base.clone();
            cfg.layers = l;
            cfg.dims = vec![2; l - 1];
            cfg.inducing = inducing_split(m, l);
            cfg.validate()?;
            cells.push(Cell { layers: l, total_m: m, rule: cfg.rule, config: cfg });
        }
    }
    Ok(cells)
}

fn rule_cells(base: &ModelConfig, rules: &[String]) -> Result<Vec<Cell>> {
    rules
        .iter()
        .map(|r| {
            let mut cfg = base.clone();
            cfg.rule = r.parse()?;
            if !cfg.rule.is_amortized() {
                cfg.inference_fn = avdgp::config::InferenceFn::Global;
            } else if cfg.inference_fn == avdgp::config::InferenceFn::Global {
                cfg.inference_fn = avdgp::config::InferenceFn::AffineMlp;
            }
            cfg.validate()?;
            Ok(Cell { layers: cfg.layers, total_m: cfg.inducing.iter().sum(), rule: cfg.rule, config: cfg })
        })
        .collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn benchmark_cmd(cells: Vec<Cell>, seeds: u64, epochs: Option<usize>, n: Option<usize>, out: &Path) -> Result<()> {
    if seeds == 0 {
        return Err(Error::Config("--seeds must be positive".into()));
    }
    struct Row {
        cell: Cell,
        metrics: Vec<(&'static str, f64, f64)>,
    }
    let mut rows = Vec::new();
    for mut cell in cells {
        if let Some(e) = epochs {
            cell.config.epochs = e;
        }
        if let Some(n) = n {
            cell.config.toy_n = n;
        }
        let mut scores = Vec::new();
        for seed in 0..seeds {
            let mut cfg = cell.config.clone();
            cfg.seed = seed;
            let run = experiment::run(&cfg, |_| {})?;
            eprintln!(
                "L={} |M|={} rule={} seed={seed}: nll {:.4}",
                cell.layers,
                cell.total_m,
                cell.rule.name(),
                run.test.nll
            );
            scores.push(run.test);
        }
        let pick =
            |f: &dyn Fn(&avdgp::metrics::ScoreReport) -> f64| mean_std(&scores.iter().map(f).collect::<Vec<_>>());
        let mut metrics = Vec::new();
        if cell.config.task == Task::Binary {
            let (m, s) = pick(&|r| r.error_rate.unwrap_or(f64::NAN));
            metrics.push(("error_rate", m, s));
        } else {
            let (m, s) = pick(&|r| r.rmse);
            metrics.push(("rmse", m, s));
        }
        let (m, s) = pick(&|r| r.nll);
        metrics.push(("nll", m, s));
        let (m, s) = pick(&|r| r.crps);
        metrics.push(("crps", m, s));
        rows.push(Row { cell, metrics });
    }
    // rank 1 = lowest mean, per metric
    let mut text = String::from("layers,total_inducing,inducing,rule,metric,mean,std,seeds,rank,cell\n");
    for row in &rows {
        for (k, &(metric, mean, std)) in row.metrics.iter().enumerate() {
            let rank = 1 + rows.iter().filter(|o| o.metrics[k].1 < mean).count();
            let cell = if metric == "error_rate" {
                format!("{:.2}% ({:.2}%)", 100.0 * mean, 100.0 * std)
            } else {
                format!("{mean:.3} ({std:.3})")
            };
            let m: Vec<String> = row.cell.config.inducing.iter().map(|v| v.to_string()).collect();
            text.push_str(&format!(
                "{},{},{},{},{metric},{mean},{std},{seeds},{rank},{cell}\n",
                row.cell.layers,
                row.cell.total_m,
                m.join("/"),
                row.cell.rule.name()
            ));
        }
    }
    write(out, text)
}

fn input_dim_of(cfg: &ModelConfig) -> Result<usize> {
    if cfg.dataset == "toy" {
        return Ok(2);
    }
    let ds: Dataset = load_csv(&resolve_data_path(&cfg.dataset)?, cfg.label_column, cfg.task, cfg.header)?;
    Ok(ds.dim())
}

fn cost_cmd(
    config: &Path,
    batch: Option<usize>,
    samples: Option<usize>,
    input_dim: Option<usize>,
    json: bool,
) -> Result<()> {
    let cfg = ModelConfig::load(config)?;
    let d = match input_dim {
        Some(d) => d,
        None => input_dim_of(&cfg)?,
    };
    let m = cfg.inducing.iter().copied().max().unwrap_or(1);
    let placeholder = avdgp::adcore::Tensor::zeros(vec![m, d]);
    let model = DgpModel::from_config(&cfg, &placeholder)?;
    let report = cost_report(&model, batch.unwrap_or(cfg.batch), samples.unwrap_or(cfg.samples));
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    println!(
        "rule {}  (B = {}, S = {})",
        report.rule.name(),
        batch.unwrap_or(cfg.batch),
        samples.unwrap_or(cfg.samples)
    );
    println!(
        "{:>5} {:>14} {:>16} {:>10} {:>14} {:>12}",
        "layer", "gp_time", "amortizer_time", "multiplier", "time", "memory"
    );
    for c in &report.layers {
        println!(
            "{:>5} {:>14} {:>16} {:>10} {:>14} {:>12}",
            c.layer,
            c.gp_time,
            c.amortizer_time,
            c.multiplier,
            c.time(),
            c.memory
        );
    }
    println!("total time {}  memory {}", report.time, report.memory);
    println!("per batch time {}  memory {}", report.batch_time, report.batch_memory);
    Ok(())
}
