use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sunet_core::analysis::{
    closed_form_report, closed_form_text, cost_report, ClosedFormRow, Family, FlopConvention, ParamConvention,
};
use sunet_core::autodiff::gradcheck::{finite_diff_check, GradCheckOptions};
use sunet_core::data::{load_dataset, save_dataset, split_dataset, synth_dataset, Sample, Split};
use sunet_core::metrics::{aggregate_runs, Averaging, RunMetrics};
use sunet_core::training::{evaluate, load_checkpoint, train, TrainConfig};
use sunet_core::{ArchConfig, ModelGraph, Shape4, Tensor4};

#[derive(Parser)]
#[command(
    name = "sunet",
    version,
    about = "SimpleUNet family: cost analysis, gradient checks, training and evaluation"
)]
struct Cli {
    /// Suppress the timestamped header line on stderr.
    #[arg(long, global = true)]
    no_banner: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and FLOP report for an architecture config.
    Analyze(AnalyzeArgs),
    /// Compare backpropagated gradients with central finite differences (64-bit).
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic segmentation dataset with a 7:1:2 split.
    SynthData(SynthArgs),
    /// Train a model and write the best-validation checkpoint.
    Train(TrainArgs),
    /// Score one or more checkpoints on a dataset split.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ParamsArg {
    Full,
    Optimizer,
    ConvWeights,
}

impl From<ParamsArg> for ParamConvention {
    fn from(p: ParamsArg) -> Self {
        match p {
            ParamsArg::Full => ParamConvention::Full,
            ParamsArg::Optimizer => ParamConvention::OptimizerVisible,
            ParamsArg::ConvWeights => ParamConvention::ConvWeights,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Vanilla,
    FeatureSelected,
    FixedSelect,
    Simpleunet,
    All,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Architecture config file.
    #[arg(long, required_unless_present = "closed_form")]
    config: Option<PathBuf>,
    /// Square input side used for FLOP counting.
    #[arg(long, default_value_t = 256)]
    input_size: usize,
    /// Comma-separated widths; reports totals per width.
    #[arg(long, value_delimiter = ',')]
    sweep: Vec<usize>,
    /// Comma-separated output.
    #[arg(long)]
    csv: bool,
    /// Parameter counting convention.
    #[arg(long, value_enum, default_value = "full")]
    params: ParamsArg,
    /// Closed-form cost constants of a family instead of a config report.
    #[arg(long, value_enum, conflicts_with = "config")]
    closed_form: Option<FamilyArg>,
    /// Kernel size for closed-form families.
    #[arg(long, default_value_t = 3)]
    kernel: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: PathBuf,
    /// Maximum relative error per parameter.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Square input side.
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Seed for weights, input and target.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Architecture config file.
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Training config file; defaults apply when omitted.
    #[arg(long)]
    train_cfg: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch CSV log; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Further checkpoints evaluated as independent runs.
    #[arg(long, value_delimiter = ',')]
    runs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Score from confusion counts pooled over the split instead of averaging per image.
    #[arg(long)]
    pooled: bool,
    /// Write `run,dsc,iou` rows, one per checkpoint in order, to this file.
    #[arg(long)]
    runs_csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if !cli.no_banner {
        eprintln!(
            "sunet {} {}",
            env!("CARGO_PKG_VERSION"),
            chrono::Local::now().format("%Y-%m-%dT%H:%M:%S%:z")
        );
    }
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("SUNET_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .with_context(|| format!("SUNET_THREADS must be a positive integer, got '{v}'"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn read_arch(path: &Path) -> Result<ArchConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ArchConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))
}

fn analyze(a: AnalyzeArgs) -> Result<ExitCode> {
    if let Some(family) = a.closed_form {
        let families: Vec<Family> = match family {
            FamilyArg::All => Family::ALL.to_vec(),
            FamilyArg::Vanilla => vec![Family::Vanilla],
            FamilyArg::FeatureSelected => vec![Family::FeatureSelected],
            FamilyArg::FixedSelect => vec![Family::FixedSelect],
            FamilyArg::Simpleunet => vec![Family::SimpleUnet],
        };
        let sweep = if a.sweep.is_empty() { vec![16, 32, 64] } else { a.sweep };
        let mut rows = Vec::new();
        for f in families {
            rows.extend(closed_form_report(f, &sweep, a.kernel)?);
        }
        print!(
            "{}",
            if a.csv {
                closed_form_csv(&rows)
            } else {
                closed_form_text(&rows)
            }
        );
        return Ok(ExitCode::SUCCESS);
    }

    let cfg = read_arch(a.config.as_deref().expect("clap enforces --config"))?;
    let input = Shape4::new(1, cfg.in_ch, a.input_size, a.input_size);
    let pc = ParamConvention::from(a.params);
    let fc = FlopConvention::CALIBRATED;
    if a.sweep.is_empty() {
        let model = ModelGraph::build(&cfg, 0)?;
        let report = cost_report(&model, input, pc, fc)?;
        print!("{}", if a.csv { report.to_csv() } else { report.to_text() });
        return Ok(ExitCode::SUCCESS);
    }
    let mut out = if a.csv {
        String::from("width,params,flops\n")
    } else {
        format!(
            "params: {pc}\nflops: {fc}\ninput: {input}\n{:>6}  {:>12}  {:>10}  {:>16}  {:>10}\n",
            "width", "params", "M", "flops", "GFLOPs"
        )
    };
    for &w in &a.sweep {
        let model = ModelGraph::build(&cfg.clone().with_width(w), 0)?;
        let r = cost_report(&model, input, pc, fc)?;
        if a.csv {
            let _ = writeln!(out, "{w},{},{}", r.total_params(), r.total_flops());
        } else {
            let _ = writeln!(
                out,
                "{w:>6}  {:>12}  {:>10.4}  {:>16}  {:>10.4}",
                r.total_params(),
                r.mparams(),
                r.total_flops(),
                r.gflops()
            );
        }
    }
    print!("{out}");
    Ok(ExitCode::SUCCESS)
}

fn closed_form_csv(rows: &[ClosedFormRow]) -> String {
    let mut s = String::from("family,constant,width,ratio,target,deviation,trend\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.family.name(),
            r.constant,
            r.width,
            r.ratio,
            r.target,
            r.deviation,
            if r.converging { "converging" } else { "diverging" }
        );
    }
    s
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let cfg = read_arch(&a.config)?;
    if a.batch == 0 {
        bail!("--batch must be at least 1");
    }
    let model: ModelGraph<f64> = ModelGraph::build_with(&cfg, a.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    rng.set_stream(2);
    let input = Tensor4::from_fn(Shape4::new(a.batch, cfg.in_ch, a.size, a.size), |_, _, _, _| {
        rng.random_range(0.0..1.0)
    });
    let target = Tensor4::from_fn(Shape4::new(a.batch, cfg.out_ch, a.size, a.size), |_, _, _, _| {
        if rng.random_bool(0.5) {
            1.0
        } else {
            0.0
        }
    });
    let opts = GradCheckOptions {
        eps: a.eps,
        tol: a.tol,
        ..GradCheckOptions::default()
    };
    let report = finite_diff_check(&model, &input, &target, &opts)?;
    print!("{}", report.to_text());
    Ok(if report.all_pass() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn synth_data(a: SynthArgs) -> Result<ExitCode> {
    let samples = synth_dataset(a.n, a.size, a.seed)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let manifest = split_dataset(&ids, a.seed)?;
    save_dataset(&a.out, &samples, &manifest)?;
    println!(
        "wrote {} samples of {}x{} to {} (train {}, val {}, test {})",
        samples.len(),
        a.size,
        a.size,
        a.out.display(),
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(a: TrainArgs) -> Result<ExitCode> {
    let arch = read_arch(&a.config)?;
    let mut cfg = match &a.train_cfg {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::parse(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => TrainConfig::default(),
    };
    cfg.checkpoint = Some(a.out.clone());
    let data = load_dataset(&a.data)?;
    let (train_set, val_set) = (data.split(Split::Train), data.split(Split::Val));
    let mut model = ModelGraph::build(&arch, cfg.seed)?;
    eprintln!("{}", cfg.describe());
    let outcome = train(&mut model, &train_set, &val_set, &cfg)?;
    let csv = outcome.to_csv();
    let log = a.log.unwrap_or_else(|| a.out.with_extension("csv"));
    fs::write(&log, &csv).with_context(|| format!("writing {}", log.display()))?;
    print!("{csv}");
    eprintln!(
        "best epoch {} with validation mDSC {:.4}; checkpoint {}",
        outcome.best_epoch,
        outcome.best_val_mdsc,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let data = load_dataset(&a.data)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let samples: Vec<&Sample> = data.split(split);
    if samples.is_empty() {
        bail!("the {split} split of {} is empty", a.data.display());
    }
    let mode = if a.pooled {
        Averaging::Pooled
    } else {
        Averaging::PerImage
    };
    let paths: Vec<PathBuf> = std::iter::once(a.ckpt).chain(a.runs).collect();
    let multi = paths.len() > 1;
    let mut out = String::from("image,dsc,iou\n");
    let mut runs_csv = String::from("run,dsc,iou\n");
    let mut runs = Vec::with_capacity(paths.len());
    for (k, path) in paths.iter().enumerate() {
        let model = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
        let (per_image, score) = evaluate(&model, &samples, mode)?;
        for (id, c) in &per_image {
            let m = RunMetrics::from_counts(c);
            let name = if multi { format!("run{k}/{id}") } else { id.clone() };
            let _ = writeln!(out, "{name},{:.6},{:.6}", m.dsc, m.iou);
        }
        let _ = writeln!(runs_csv, "{k},{},{}", score.dsc, score.iou);
        runs.push(score);
    }
    let agg = aggregate_runs(&runs)?;
    let _ = writeln!(out, "{agg}");
    print!("{out}");
    if let Some(p) = a.runs_csv {
        fs::write(&p, runs_csv).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}
