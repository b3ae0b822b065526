use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gramood_core::harness::{
    self, parse_layer_groups, parse_layers, parse_seeds, RunConfig, SweepAxis, DEFAULT_VALIDATION_FRACTION,
};
use gramood_core::ingest::synthetic::{generate_synthetic_benchmark, parse_layer_shapes, OodKind, SyntheticConfig};
use gramood_core::{Aggregation, ErrorClass, EvalResult, MetricKind, OodError, OrderSet, Result, StatVariant};

#[derive(Parser)]
#[command(name = "gramood", version, about = "Gram-matrix out-of-distribution detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train / ID test / OOD test benchmark.
    Gen(GenArgs),
    /// Split a file into validation and test partitions.
    Split(SplitArgs),
    /// Fit a class-conditional statistic table.
    Fit(FitArgs),
    /// Score a file against a table.
    Score(ScoreArgs),
    /// Compute detection metrics from two scores files.
    Eval(EvalArgs),
    /// Run the statistic x metric x aggregation grid.
    Ablate(AblateArgs),
    /// Evaluate one order or one layer group at a time.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Comma list of CxP shapes (channels x pixels).
    #[arg(long, default_value = "8x16,16x8,32x4")]
    layers: String,
    /// Training records per class.
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    /// ID test records per class (defaults to --per-class).
    #[arg(long)]
    test_per_class: Option<usize>,
    /// OOD records (defaults to classes x test-per-class).
    #[arg(long)]
    ood_count: Option<usize>,
    #[arg(long, default_value = "rademacher")]
    ood_kind: String,
    /// Mean offset of the shifted OOD kind.
    #[arg(long)]
    shift: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_VALIDATION_FRACTION)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct StatArgs {
    /// diag, offdiag, rowsum or full.
    #[arg(long, default_value = "rowsum")]
    stat: String,
    /// minmax or gaussian.
    #[arg(long, default_value = "minmax")]
    metric: String,
    /// e.g. 1-10 or 1,2,4.
    #[arg(long, default_value = "1-10")]
    orders: String,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    train: PathBuf,
    #[command(flatten)]
    stat: StatArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    table: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Validation file for the normalizer.
    #[arg(long)]
    va: Option<PathBuf>,
    /// norm or unnorm.
    #[arg(long, default_value = "norm")]
    agg: String,
    /// Comma list of layer indices to include.
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    id: PathBuf,
    #[arg(long)]
    ood: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    id_test: PathBuf,
    #[arg(long)]
    ood: PathBuf,
    /// e.g. 0-9 or 3,1,4.
    #[arg(long, default_value = "0-9")]
    seeds: String,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "1-10")]
    orders: String,
    #[arg(long)]
    out: PathBuf,
    /// Optional per-seed metrics CSV.
    #[arg(long)]
    raw_out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// order or layer.
    #[arg(long)]
    axis: String,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    stat: StatArgs,
    #[arg(long, default_value = "norm")]
    agg: String,
    /// Layers used by an order sweep.
    #[arg(long)]
    layers: Option<String>,
    /// Layer groups for a layer sweep, e.g. "early:0,1;late:2".
    #[arg(long)]
    groups: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

fn stat_choice(args: &StatArgs) -> Result<(StatVariant, MetricKind, OrderSet)> {
    Ok((args.stat.parse()?, args.metric.parse()?, args.orders.parse()?))
}

fn print_eval(r: &EvalResult) {
    println!("{}", EvalResult::CSV_HEADER);
    println!("{}", r.csv_row());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => {
            let mut cfg = SyntheticConfig::new(a.classes, parse_layer_shapes(&a.layers)?, a.per_class);
            if let Some(t) = a.test_per_class {
                cfg.test_per_class = t;
            }
            cfg.ood_count = a.ood_count.unwrap_or(cfg.num_classes * cfg.test_per_class);
            cfg.ood_kind = a.ood_kind.parse::<OodKind>()?;
            if let Some(shift) = a.shift {
                cfg.shift = shift;
            }
            cfg.seed = a.seed;
            let bench = generate_synthetic_benchmark(&cfg)?;
            let files = bench.write_to_dir(&a.out_dir)?;
            println!(
                "wrote {} ({} records), {} ({}), {} ({})",
                files.train.display(),
                bench.train.len(),
                files.id_test.display(),
                bench.id_test.len(),
                files.ood_test.display(),
                bench.ood_test.len()
            );
        }
        Command::Split(a) => {
            let (va, te) = harness::cmd_split(&a.input, a.fraction, a.seed, &a.out_dir)?;
            println!("validation: {va} records, test: {te} records");
        }
        Command::Fit(a) => {
            let (variant, metric, orders) = stat_choice(&a.stat)?;
            let table = harness::cmd_fit(&a.train, variant, metric, &orders, &a.out)?;
            for (c, n) in table.counts().iter().enumerate() {
                println!("class {c}: {n} records");
            }
        }
        Command::Score(a) => {
            let agg: Aggregation = a.agg.parse()?;
            let layers = a.layers.as_deref().map(parse_layers).transpose()?;
            let report = harness::cmd_score(&a.table, &a.data, a.va.as_deref(), agg, layers.as_deref(), Some(&a.out))?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!("scored {} records", report.scored.len());
        }
        Command::Eval(a) => {
            let r = harness::cmd_eval(&a.id, &a.ood, a.out.as_deref())?;
            print_eval(&r);
        }
        Command::Ablate(a) => {
            let orders: OrderSet = a.orders.parse()?;
            let seeds = parse_seeds(&a.data.seeds)?;
            let rows = harness::cmd_ablate(
                &a.data.train,
                &a.data.id_test,
                &a.data.ood,
                &orders,
                &seeds,
                &a.out,
                a.raw_out.as_deref(),
            )?;
            if rows.iter().any(|r| r.train_zero == Some(false)) {
                eprintln!("warning: a min/max table scored a training record above zero");
            }
            println!("wrote {} ablation rows to {}", rows.len(), a.out.display());
        }
        Command::Sweep(a) => {
            let axis: SweepAxis = a.axis.parse()?;
            let (variant, metric, orders) = stat_choice(&a.stat)?;
            let config = RunConfig {
                variant,
                metric,
                aggregation: a.agg.parse()?,
                orders,
                layers: a.layers.as_deref().map(parse_layers).transpose()?,
                seeds: parse_seeds(&a.data.seeds)?,
                validation_fraction: DEFAULT_VALIDATION_FRACTION,
            };
            let groups = a.groups.as_deref().map(parse_layer_groups).transpose()?;
            let rows = harness::cmd_sweep(
                axis,
                &a.data.train,
                &a.data.id_test,
                &a.data.ood,
                &config,
                groups.as_deref(),
                &a.out,
            )?;
            println!("wrote {} sweep rows to {}", rows.len(), a.out.display());
        }
    }
    Ok(())
}

fn exit_code(e: &OodError) -> u8 {
    match e.class() {
        ErrorClass::Usage => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
