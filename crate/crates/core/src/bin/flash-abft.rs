use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use flash_abft::abft::{self, actual_checksum, compare, Category};
use flash_abft::campaign::{
    calibrate_tolerance, detection_vs_dimension_sweep, run_campaigns, synthetic_inputs,
    with_threads, Calibration, CampaignConfig, FaultCount, InputSource, SweepOptions,
};
use flash_abft::fault::{self, diff_outputs, FaultSpec, OutputDiff};
use flash_abft::io::{self, InputDigests, RunManifest};
use flash_abft::matrix::{Matrix, Role};
use flash_abft::numerics::{Format, PrecisionPolicy};
use flash_abft::schedule::run_block_schedule;

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Parser)]
#[command(name = "flash-abft", version, about = "FlashAttention-2 with an online attention checksum, plus fault-injection campaigns")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one attention head, optionally with the checksum.
    Attn(AttnArgs),
    /// Monte Carlo fault-injection campaigns.
    Campaign(CampaignArgs),
    /// Replay a list of faults and report the verdict.
    Inject(InjectArgs),
    /// Measure fault-free checksum noise and derive a tolerance.
    Calibrate(CalibrateArgs),
    /// Write synthetic inputs or convert CSV to the binary matrix format.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct KernelArgs {
    /// `bf16`, `fp64`, or `DATAPATH:ACCUM[:STATS]`.
    #[arg(long, default_value = "bf16")]
    policy: PrecisionPolicy,
    #[arg(long, default_value_t = 16)]
    block: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scale scores by 1/sqrt(d).
    #[arg(long)]
    scale: bool,
}

#[derive(Args)]
struct InputArgs {
    #[arg(long, requires_all = ["k", "v"])]
    q: Option<PathBuf>,
    #[arg(long, requires_all = ["q", "v"])]
    k: Option<PathBuf>,
    #[arg(long, requires_all = ["q", "k"])]
    v: Option<PathBuf>,
    /// Gaussian inputs with sequence length N and hidden dimension D.
    #[arg(long, num_args = 2, value_names = ["N", "D"], conflicts_with = "q", required_unless_present = "q")]
    synthetic: Option<Vec<usize>>,
    /// Query rows for synthetic inputs (default N).
    #[arg(long, requires = "synthetic")]
    num_queries: Option<usize>,
}

#[derive(Args)]
struct ToleranceArgs {
    /// Fixed absolute tolerance.
    #[arg(long, conflicts_with = "calibrate")]
    tolerance: Option<f64>,
    /// Calibrate the tolerance on fault-free runs (the default).
    #[arg(long)]
    calibrate: bool,
    #[arg(long, default_value_t = 200)]
    calibration_trials: usize,
}

#[derive(Args)]
struct AttnArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    kernel: KernelArgs,
    /// Run the fused checker and print a verdict.
    #[arg(long)]
    check: bool,
    #[command(flatten)]
    tol: ToleranceArgs,
    #[arg(long)]
    nan_aware: bool,
    /// Write the output matrix here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Json,
    Csv,
}

#[derive(Args)]
struct CampaignArgs {
    #[arg(long, default_value_t = 10_000)]
    campaigns: usize,
    /// Faults per campaign, N or MIN..MAX; 0 runs the fault-free control.
    #[arg(long, default_value = "1")]
    faults: FaultCount,
    #[arg(long, default_value_t = 256)]
    seq_len: usize,
    /// Query rows (default: seq-len).
    #[arg(long)]
    num_queries: Option<usize>,
    /// Hidden dimension; several values run a sweep.
    #[arg(long, value_delimiter = ',', default_value = "64")]
    dim: Vec<usize>,
    #[command(flatten)]
    kernel: KernelArgs,
    #[command(flatten)]
    tol: ToleranceArgs,
    #[arg(long)]
    nan_aware: bool,
    #[arg(long, value_enum, default_value = "json")]
    format: ReportFormat,
    /// Include one record per campaign.
    #[arg(long)]
    records: bool,
    /// Worker threads (default: all cores). Does not change results.
    #[arg(long)]
    threads: Option<usize>,
    /// Read inputs from matrix files instead of generating them.
    #[arg(long, requires_all = ["k", "v"])]
    q: Option<PathBuf>,
    #[arg(long, requires_all = ["q", "v"])]
    k: Option<PathBuf>,
    #[arg(long, requires_all = ["q", "k"])]
    v: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InjectArgs {
    /// JSON file holding one fault or a list of faults.
    #[arg(long)]
    fault_spec: PathBuf,
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    kernel: KernelArgs,
    #[command(flatten)]
    tol: ToleranceArgs,
    #[arg(long)]
    nan_aware: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long, default_value_t = 256)]
    seq_len: usize,
    #[arg(long)]
    num_queries: Option<usize>,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[command(flatten)]
    kernel: KernelArgs,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct GenDataArgs {
    /// Convert this headerless CSV into a matrix file (needs --out).
    #[arg(long, requires = "out", conflicts_with = "out_dir")]
    from_csv: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Element format of converted files.
    #[arg(long, default_value = "bf16")]
    format: Format,
    /// Write q.mat, k.mat and v.mat here, identical to the synthetic inputs
    /// used by `campaign` for the same seed and shape.
    #[arg(long, required_unless_present = "from_csv")]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    seq_len: usize,
    #[arg(long)]
    num_queries: Option<usize>,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[command(flatten)]
    kernel: KernelArgs,
}

enum Failure {
    Validation(String),
    Internal(String),
}

impl From<flash_abft::Error> for Failure {
    fn from(e: flash_abft::Error) -> Self {
        Failure::Validation(e.to_string())
    }
}

fn internal(context: &str) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Internal(format!("{context}: {e}"))
}

type CliResult = Result<(), Failure>;

fn base_config(nq: usize, n: usize, d: usize, k: &KernelArgs) -> CampaignConfig {
    CampaignConfig {
        num_campaigns: 1,
        seq_len: n,
        num_queries: nq,
        hidden_dim: d,
        block_size: k.block,
        precision: k.policy,
        scale_scores: k.scale,
        master_seed: k.seed,
        ..Default::default()
    }
}

/// Inputs plus a config whose shape matches them.
fn resolve_inputs(input: &InputArgs, k: &KernelArgs) -> Result<(CampaignConfig, Matrix, Matrix, Matrix), Failure> {
    if let (Some(qp), Some(kp), Some(vp)) = (&input.q, &input.k, &input.v) {
        let (q, _) = io::read_matrix(qp, Role::Q)?;
        let (km, _) = io::read_matrix(kp, Role::K)?;
        let (v, _) = io::read_matrix(vp, Role::V)?;
        let mut cfg = base_config(q.rows(), km.rows(), q.cols(), k);
        cfg.input_source = InputSource::File {
            q: qp.clone(),
            k: kp.clone(),
            v: vp.clone(),
        };
        cfg.kernel_config().validate_inputs(&q, &km, &v)?;
        return Ok((cfg, q, km, v));
    }
    let dims = input.synthetic.as_deref().unwrap_or_default();
    let (n, d) = (dims[0], dims[1]);
    let cfg = base_config(input.num_queries.unwrap_or(n), n, d, k);
    cfg.validate()?;
    let (q, km, v) = synthetic_inputs(&cfg);
    Ok((cfg, q, km, v))
}

fn resolve_tolerance(cfg: &CampaignConfig, tol: &ToleranceArgs) -> Result<(f64, Option<Calibration>), Failure> {
    match tol.tolerance {
        Some(t) => Ok((t, None)),
        None => {
            let cal = calibrate_tolerance(cfg, tol.calibration_trials)?;
            Ok((cal.tolerance, Some(cal)))
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(path) => fs::write(path, text).map_err(internal("cannot write report")),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(internal("cannot write to stdout")),
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct AttnSummary {
    manifest: RunManifest<CampaignConfig>,
    rows: usize,
    cols: usize,
    output_digest: String,
    check: Option<CheckSummary>,
}

#[derive(Serialize)]
struct CheckSummary {
    predicted: f64,
    actual: f64,
    abs_diff: f64,
    tolerance: f64,
    calibration: Option<Calibration>,
    flagged: bool,
    verdict: &'static str,
}

fn cmd_attn(args: AttnArgs) -> CliResult {
    let (mut cfg, q, k, v) = resolve_inputs(&args.input, &args.kernel)?;
    let kcfg = cfg.kernel_config();
    let (output, check) = if args.check {
        let (tolerance, calibration) = resolve_tolerance(&cfg, &args.tol)?;
        cfg.tolerance = tolerance;
        cfg.nan_aware = args.nan_aware;
        let run = abft::fused_kernel(&q, &k, &v, &kcfg, None)?;
        let actual = actual_checksum(&run.output);
        let flagged = compare(run.predicted, actual, tolerance, args.nan_aware);
        let summary = CheckSummary {
            predicted: run.predicted,
            actual,
            abs_diff: (run.predicted - actual).abs(),
            tolerance,
            calibration,
            flagged,
            verdict: if flagged { "fault detected" } else { "no fault" },
        };
        (run.output, Some(summary))
    } else {
        (run_block_schedule(&q, &k, &v, &kcfg, None)?, None)
    };
    if let Some(path) = &args.out {
        io::write_matrix(path, &output, cfg.precision.output_accum)?;
    }
    let summary = AttnSummary {
        manifest: RunManifest::new(cfg.clone(), cfg.master_seed, InputDigests::of(&q, &k, &v)),
        rows: output.rows(),
        cols: output.cols(),
        output_digest: io::matrix_digest(&output),
        check,
    };
    if args.json {
        return emit(None, &to_json(&summary));
    }
    let mut text = format!(
        "output: {}x{} sha256 {}\n",
        summary.rows, summary.cols, summary.output_digest
    );
    if let Some(c) = &summary.check {
        text += &format!(
            "predicted: {:e}\nactual: {:e}\nabs diff: {:e}\ntolerance: {:e}{}\nverdict: {}\n",
            c.predicted,
            c.actual,
            c.abs_diff,
            c.tolerance,
            if c.calibration.is_some() { " (calibrated)" } else { "" },
            c.verdict
        );
    }
    emit(None, &text)
}

fn cmd_campaign(args: CampaignArgs) -> CliResult {
    let file_inputs = match (&args.q, &args.k, &args.v) {
        (Some(q), Some(k), Some(v)) => Some((q.clone(), k.clone(), v.clone())),
        _ => None,
    };
    if file_inputs.is_some() && args.dim.len() > 1 {
        return Err(Failure::Validation("a dimension sweep needs synthetic inputs".into()));
    }
    let mut cfg = CampaignConfig {
        num_campaigns: args.campaigns,
        faults_per_campaign: args.faults,
        nan_aware: args.nan_aware,
        keep_records: args.records,
        ..base_config(
            args.num_queries.unwrap_or(args.seq_len),
            args.seq_len,
            args.dim[0],
            &args.kernel,
        )
    };
    let text = with_threads(args.threads, || -> Result<String, Failure> {
        if args.dim.len() > 1 {
            if let Some(t) = args.tol.tolerance {
                cfg.tolerance = t;
            }
            let options = SweepOptions {
                calibration_trials: args.tol.tolerance.is_none().then_some(args.tol.calibration_trials),
                require_decreasing_false_positive: false,
            };
            let sweep = detection_vs_dimension_sweep(&args.dim, &cfg, options)?;
            return Ok(match args.format {
                ReportFormat::Json => to_json(&sweep),
                ReportFormat::Csv => sweep.to_csv(),
            });
        }
        let (q, k, v) = match file_inputs {
            Some((qp, kp, vp)) => {
                let (q, _) = io::read_matrix(&qp, Role::Q)?;
                let (k, _) = io::read_matrix(&kp, Role::K)?;
                let (v, _) = io::read_matrix(&vp, Role::V)?;
                cfg.num_queries = q.rows();
                cfg.seq_len = k.rows();
                cfg.hidden_dim = q.cols();
                cfg.input_source = InputSource::File { q: qp, k: kp, v: vp };
                (q, k, v)
            }
            None => synthetic_inputs(&cfg),
        };
        cfg.validate()?;
        let (tolerance, calibration) = resolve_tolerance(&cfg, &args.tol)?;
        cfg.tolerance = tolerance;
        let mut report = run_campaigns(&cfg, &q, &k, &v)?;
        report.calibration = calibration;
        Ok(match args.format {
            ReportFormat::Json => report.to_json(),
            ReportFormat::Csv => report.to_csv(),
        })
    })??;
    emit(args.out.as_deref(), &text)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FaultList {
    Many(Vec<FaultSpec>),
    One(FaultSpec),
}

#[derive(Serialize)]
struct InjectSummary {
    faults: Vec<FaultSpec>,
    category: Category,
    verdict: &'static str,
    predicted: f64,
    actual: f64,
    abs_diff: f64,
    tolerance: f64,
    calibration: Option<Calibration>,
    diff: OutputDiff,
}

fn cmd_inject(args: InjectArgs) -> CliResult {
    let text = fs::read_to_string(&args.fault_spec).map_err(|e| {
        Failure::Validation(format!("cannot read {}: {e}", args.fault_spec.display()))
    })?;
    let faults = match serde_json::from_str::<FaultList>(&text) {
        Ok(FaultList::Many(v)) => v,
        Ok(FaultList::One(f)) => vec![f],
        Err(e) => return Err(Failure::Validation(format!("bad fault spec: {e}"))),
    };
    let (cfg, q, k, v) = resolve_inputs(&args.input, &args.kernel)?;
    let kcfg = cfg.kernel_config();
    for f in &faults {
        f.validate(&kcfg)?;
    }
    let (tolerance, calibration) = resolve_tolerance(&cfg, &args.tol)?;
    let golden = abft::fused_kernel(&q, &k, &v, &kcfg, None)?;
    let faulty = fault::run_with_faults(&q, &k, &v, &kcfg, &faults)?;
    let outcome = fault::evaluate(&golden.output, &faulty, tolerance, args.nan_aware);
    let category = outcome.verdict.category;
    let summary = InjectSummary {
        faults,
        category,
        verdict: category.label(),
        predicted: outcome.verdict.predicted,
        actual: outcome.verdict.actual,
        abs_diff: outcome.verdict.abs_diff,
        tolerance,
        calibration,
        diff: diff_outputs(&golden.output, &faulty.output),
    };
    if args.json {
        return emit(None, &to_json(&summary));
    }
    let d = &summary.diff;
    emit(
        None,
        &format!(
            "faults: {}\nverdict: {}\npredicted: {:e}\nactual: {:e}\nabs diff: {:e}\ntolerance: {:e}\n\
             differing elements: {} of {} in {} rows\nmax abs output diff: {:e}\n",
            summary.faults.len(),
            summary.verdict,
            summary.predicted,
            summary.actual,
            summary.abs_diff,
            summary.tolerance,
            d.differing_elements,
            d.elements,
            d.differing_rows,
            d.max_abs_diff
        ),
    )
}

fn cmd_calibrate(args: CalibrateArgs) -> CliResult {
    let cfg = base_config(args.num_queries.unwrap_or(args.seq_len), args.seq_len, args.dim, &args.kernel);
    cfg.validate()?;
    let cal = with_threads(args.threads, || calibrate_tolerance(&cfg, args.trials))??;
    emit(None, &to_json(&cal))
}

fn cmd_gen_data(args: GenDataArgs) -> CliResult {
    if let Some(csv) = &args.from_csv {
        let m = io::read_csv_matrix(csv, Role::Q, args.format)?;
        let out = args.out.as_ref().expect("clap requires --out");
        io::write_matrix(out, &m, args.format)?;
        return emit(None, &format!("{}x{} {} -> {}\n", m.rows(), m.cols(), args.format, out.display()));
    }
    let dir = args.out_dir.as_ref().expect("clap requires --out-dir");
    let cfg = base_config(args.num_queries.unwrap_or(args.seq_len), args.seq_len, args.dim, &args.kernel);
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(internal("cannot create output directory"))?;
    let (q, k, v) = synthetic_inputs(&cfg);
    let fmt = cfg.precision.datapath;
    for (name, m) in [("q.mat", &q), ("k.mat", &k), ("v.mat", &v)] {
        io::write_matrix(dir.join(name), m, fmt)?;
    }
    emit(None, &to_json(&InputDigests::of(&q, &k, &v)))
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Attn(a) => cmd_attn(a),
        Command::Campaign(a) => cmd_campaign(a),
        Command::Inject(a) => cmd_inject(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::GenData(a) => cmd_gen_data(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(Failure::Validation(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Ok(Err(Failure::Internal(msg))) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(EXIT_INTERNAL)
        }
        Err(_) => ExitCode::from(EXIT_INTERNAL),
    }
}
