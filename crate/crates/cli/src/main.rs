use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::bail;
use clap::{Args, Parser, Subcommand};
use graft_core::calibration::CalibrationKind;
use graft_core::data::{generate_synthetic, load_csv, standardize, write_csv, NoiseDist, SurvivalDataset};
use graft_core::experiment::{
    noisy_dataset, run_ablation, run_benchmark, run_noise_sweep, ExperimentConfig, ResultsTable, IBS_GRID_POINTS,
};
use graft_core::gates::GateVariant;
use graft_core::imputer::{ImputationEntry, ImputationTable};
use graft_core::metrics::{c_index, ibs, EvalGrid};
use graft_core::model_io::ModelFile;
use graft_core::trainer::{train, ModelVariant};
use graft_core::GraftError;

#[derive(Parser)]
#[command(name = "graft", version, about = "Gated residual AFT survival model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a CSV and write a model file.
    Train(TrainArgs),
    /// Score a CSV with a saved model and report C-index and IBS.
    Evaluate(EvaluateArgs),
    /// Cross-validated benchmark of the configured model.
    Benchmark(ExperimentArgs),
    /// Model variants crossed with Gaussian noise multipliers.
    Ablation(ExperimentArgs),
    /// Gate mechanisms crossed with Student-t(2) noise multipliers.
    NoiseSweep(ExperimentArgs),
    /// Dump per-subject imputation neighbourhoods and supports as CSV.
    ImputeCheck(ImputeCheckArgs),
    /// Write a synthetic dataset as CSV.
    Synth(SynthArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Input CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Name of the time column.
    #[arg(long)]
    time_col: Option<String>,
    /// Name of the event-indicator column.
    #[arg(long)]
    event_col: Option<String>,
    /// JSON experiment configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<ModelVariant>,
    #[arg(long)]
    gate: Option<GateVariant>,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Model file written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "cox")]
    calibration: CalibrationKind,
    /// Write predicted survival curves (long format) to this CSV.
    #[arg(long)]
    curves: Option<PathBuf>,
    /// Write learned gates to this CSV.
    #[arg(long)]
    dump_gates: Option<PathBuf>,
    /// Write the metrics as JSON to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated base seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Number of cross-validation folds
    #[arg(long)]
    folds: Option<usize>,
    /// Comma-separated noise multipliers.
    #[arg(long, value_delimiter = ',')]
    multipliers: Option<Vec<usize>>,
    /// Comma-separated model variants (ablation).
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<ModelVariant>>,
    /// Comma-separated gate mechanisms (noise sweep).
    #[arg(long, value_delimiter = ',')]
    gates: Option<Vec<GateVariant>>,
    /// Label for the dataset column.
    #[arg(long)]
    dataset: Option<String>,
    /// Output directory for the CSV and JSON results.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ImputeCheckArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    k_events: Option<usize>,
    /// CSV to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    p: usize,
    #[arg(long, default_value_t = 3)]
    signal: usize,
    #[arg(long, default_value_t = 0.3)]
    censor: f64,
    /// Append k·p noise columns.
    #[arg(long, default_value_t = 0)]
    noise_k: usize,
    #[arg(long, default_value = "gaussian")]
    noise_dist: NoiseDist,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(args: &DataArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| GraftError::io(path, e))?;
            serde_json::from_str::<ExperimentConfig>(&text)
                .map_err(|e| GraftError::Config(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(d) = &args.data {
        cfg.data = Some(d.clone());
    }
    if let Some(c) = &args.time_col {
        cfg.time_col = c.clone();
    }
    if let Some(c) = &args.event_col {
        cfg.event_col = c.clone();
    }
    Ok(cfg)
}

fn load_data(cfg: &ExperimentConfig) -> anyhow::Result<SurvivalDataset> {
    let Some(path) = &cfg.data else {
        return Err(GraftError::Config("no input data: pass --data or set `data` in the config".into()).into());
    };
    Ok(load_csv(path, &cfg.time_col, &cfg.event_col)?)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| GraftError::io(path, e))?))
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.data)?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(v) = args.variant {
        cfg.train.variant = v;
    }
    if let Some(g) = args.gate {
        cfg.train.gate_variant = g;
    }
    let ds = load_data(&cfg)?;
    let model = train(&ds, &cfg.train)?;
    let meta = model.meta.clone();
    let file = ModelFile::fit(model, &ds)?;
    file.save(&args.out)?;
    println!(
        "trained {} epochs (best epoch {}, validation loss {:.6}); wrote {}",
        meta.epochs_run,
        meta.best_epoch,
        meta.best_val_loss,
        args.out.display()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.data)?;
    let file = ModelFile::load(&args.model)?;
    let ds = load_data(&cfg)?;
    if ds.feature_names != file.model.feature_names {
        return Err(GraftError::Schema(format!(
            "feature columns {:?} do not match the model's {:?}",
            ds.feature_names, file.model.feature_names
        ))
        .into());
    }
    let scores = file.model.predict_scores(&ds.features)?;
    let calib = file.calibration(args.calibration)?;
    let cens = file.censoring_km();
    let c = c_index(&scores, &ds.times, &ds.events)?;
    let grid = EvalGrid::standard(&ds.times, &cens, IBS_GRID_POINTS)?;
    let ibs_value = ibs(|i, t| calib.survival(scores[i], t), &ds.times, &ds.events, &grid, &cens)?;

    if let Some(path) = &args.curves {
        let mut w = csv::Writer::from_writer(create(path)?);
        w.write_record(["subject_id", "t", "S"])?;
        for (i, &s) in scores.iter().enumerate() {
            for &t in &grid.times {
                w.write_record([i.to_string(), t.to_string(), calib.survival(s, t).to_string()])?;
            }
        }
        w.flush()?;
    }
    if let Some(path) = &args.dump_gates {
        let mut w = csv::Writer::from_writer(create(path)?);
        w.write_record(["feature_name", "eta", "deterministic_gate"])?;
        let gates = file.model.deterministic_gates();
        for ((name, eta), g) in file.model.feature_names.iter().zip(&file.model.state.gates.eta).zip(gates) {
            w.write_record([name.clone(), eta.to_string(), g.to_string()])?;
        }
        w.flush()?;
    }
    let report = serde_json::json!({
        "n": ds.len(),
        "c_index": c,
        "ibs": ibs_value,
        "calibration": args.calibration,
        "grid_points": grid.times.len(),
    });
    let text = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => std::fs::write(path, text + "\n").map_err(|e| GraftError::io(path, e))?,
        None => println!("{text}"),
    }
    Ok(())
}

enum Protocol {
    Benchmark,
    Ablation,
    NoiseSweep,
}

fn cmd_experiment(args: ExperimentArgs, protocol: Protocol) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.data)?;
    if let Some(s) = args.seeds {
        cfg.seeds = s;
    }
    if let Some(f) = args.folds {
        cfg.folds = f;
    }
    if let Some(m) = args.multipliers {
        cfg.noise_multipliers = m;
    }
    if let Some(v) = args.variants {
        cfg.variants = v;
    }
    if let Some(g) = args.gates {
        cfg.gate_variants = g;
    }
    if let Some(d) = args.dataset {
        cfg.dataset = d;
    }
    if let Some(o) = args.out {
        cfg.out = Some(o);
    }
    cfg.validate()?;
    let ds = load_data(&cfg)?;
    let (table, stem): (ResultsTable, &str) = match protocol {
        Protocol::Benchmark => (run_benchmark(&ds, &cfg)?, "benchmark"),
        Protocol::Ablation => (run_ablation(&ds, &cfg)?, "ablation"),
        Protocol::NoiseSweep => (run_noise_sweep(&ds, &cfg)?, "noise_sweep"),
    };
    print!("{}", table.render_text());
    if let Some(dir) = &cfg.out {
        table.write_outputs(&cfg, dir, stem)?;
    }
    Ok(())
}

fn cmd_impute_check(args: ImputeCheckArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.data)?;
    if let Some(k) = args.k_events {
        cfg.train.k_events = k;
    }
    let ds = load_data(&cfg)?;
    let (std_ds, _) = standardize(&ds)?;
    let table = ImputationTable::build(&std_ds, cfg.train.k_events)?;
    let mut w = csv::Writer::from_writer(create(&args.out)?);
    w.write_record([
        "row",
        "time",
        "event",
        "kind",
        "neighborhood_size",
        "neighborhood_events",
        "radius",
        "total_mass",
        "support",
    ])?;
    for (i, entry) in table.entries.iter().enumerate() {
        let (kind, size, events, radius, mass, support) = match entry {
            ImputationEntry::Observed { .. } => ("observed", String::new(), String::new(), String::new(), String::new(), String::new()),
            ImputationEntry::Sampled { neighborhood, cdf } => (
                "sampled",
                neighborhood.indices.len().to_string(),
                neighborhood.n_events.to_string(),
                neighborhood.radius.to_string(),
                cdf.total_mass.to_string(),
                cdf.support.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(";"),
            ),
            ImputationEntry::Fallback { neighborhood, .. } => (
                "fallback",
                neighborhood.indices.len().to_string(),
                neighborhood.n_events.to_string(),
                neighborhood.radius.to_string(),
                "0".to_string(),
                String::new(),
            ),
        };
        w.write_record([
            i.to_string(),
            ds.times[i].to_string(),
            u8::from(ds.events[i]).to_string(),
            kind.to_string(),
            size,
            events,
            radius,
            mass,
            support,
        ])?;
    }
    w.flush()?;
    println!(
        "{} subjects, {} censored with fallback; wrote {}",
        ds.len(),
        table.n_fallback(),
        args.out.display()
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    if !(0.0..1.0).contains(&args.censor) {
        bail!(GraftError::Config("--censor must be in [0, 1)".into()));
    }
    let (ds, _) = generate_synthetic(args.n, args.p, args.signal, args.censor, args.seed)?;
    let ds = noisy_dataset(&ds, args.noise_k, args.noise_dist, args.seed)?;
    write_csv(&ds, create(&args.out)?, "time", "event")?;
    println!(
        "wrote {} rows, {} features, {} events to {}",
        ds.len(),
        ds.n_features(),
        ds.n_events(),
        args.out.display()
    );
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err
        .chain()
        .any(|e| e.downcast_ref::<GraftError>().is_some_and(GraftError::is_validation));
    if validation { 1 } else { 2 }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Benchmark(a) => cmd_experiment(a, Protocol::Benchmark),
        Command::Ablation(a) => cmd_experiment(a, Protocol::Ablation),
        Command::NoiseSweep(a) => cmd_experiment(a, Protocol::NoiseSweep),
        Command::ImputeCheck(a) => cmd_impute_check(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
