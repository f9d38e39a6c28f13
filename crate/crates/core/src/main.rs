use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use retouch_core::alignment::check;
use retouch_core::dataset::{compute_stats, ground_truth_map, parse_dataset, rasterize_region};
use retouch_core::media::{read_float_grid, read_pnm, write_pnm, ImageBuffer};
use retouch_core::metrics::{evaluate_all, MetricReport};
use retouch_core::providers::http::{providers_from_env, HttpConfig, DEFAULT_TIMEOUT_MS};
use retouch_core::providers::mock::{mock_providers, SyntheticScene};
use retouch_core::providers::{ToolPolicy, ToolPreference};
use retouch_core::retouch::{run_loop, trace_to_report, LoopConfig, StopReason};
use retouch_core::saliency::{propose_masks, ProposalConfig, SaliencyMap, DEFAULT_KLD_EPSILON};
use retouch_core::text::{evaluate_reasoning, Diagnosis, ReferenceLabel};

/// Detect and repair generation artifacts, and evaluate the pieces.
#[derive(Parser)]
#[command(name = "retouch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the perceive/diagnose/inpaint loop on one image.
    RunLoop(RunLoopArgs),
    /// Score predicted saliency maps against annotation-derived ground truth (TSV).
    EvaluateSaliency(EvaluateSaliencyArgs),
    /// Score predicted diagnoses against reference labels (TSV).
    EvaluateReasoning {
        /// JSON-lines diagnoses: region_id, category, description, severity.
        predictions: PathBuf,
        /// JSON-lines references: region_id, category, description.
        truth: PathBuf,
    },
    /// Summarize an annotation dataset.
    DatasetStats {
        file: PathBuf,
        /// Print JSON instead of aligned text.
        #[arg(long)]
        json: bool,
    },
    /// Run the policy-gradient self-checks.
    GrpoCheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Render one region disc as a PGM mask.
    Rasterize {
        #[arg(long)]
        x: usize,
        #[arg(long)]
        y: usize,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        height: usize,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract region proposals from an FSAL1 saliency map (JSON lines).
    ProposeMasks {
        #[arg(long)]
        saliency: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long, default_value_t = 1)]
        dilation: usize,
        #[arg(long, default_value_t = 4)]
        min_area: usize,
        /// Also write each mask as `<id>.pgm` into this directory.
        #[arg(long)]
        mask_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Backends {
    Env,
}

#[derive(Clone, Copy, ValueEnum)]
enum PreferArg {
    Auto,
    MaskGuided,
    InstructionDriven,
}

#[derive(clap::Args)]
struct RunLoopArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, default_value_t = 3)]
    max_iter: usize,
    #[arg(long, default_value_t = 1)]
    dilation: usize,
    #[arg(long, default_value_t = 4)]
    min_area: usize,
    #[arg(long, value_enum, default_value_t = PreferArg::Auto)]
    prefer: PreferArg,
    #[arg(long, default_value_t = f64::INFINITY)]
    max_cost: f64,
    /// Use deterministic in-process providers.
    #[arg(long, conflicts_with = "backends", required_unless_present = "backends")]
    mock: bool,
    /// Use HTTP backends configured by RETOUCH_BACKEND_<ROLE>_URL.
    #[arg(long, value_enum)]
    backends: Option<Backends>,
    /// Hidden artifact field of the mock scene (FSAL1); all zeros when omitted.
    #[arg(long, requires = "mock")]
    mock_field: Option<PathBuf>,
    /// Per-edit decay of the mock field.
    #[arg(long, default_value_t = 0.5)]
    decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Final image; `<image>.retouched.pnm` when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the trace as JSON; per-iteration images go next to it.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, env = "RETOUCH_TIMEOUT_MS", default_value_t = DEFAULT_TIMEOUT_MS)]
    timeout_ms: u64,
}

#[derive(clap::Args)]
struct EvaluateSaliencyArgs {
    /// Reconciled JSON-lines annotation dataset.
    #[arg(long)]
    dataset: PathBuf,
    /// Directory holding `<image_id>.fsal` predictions.
    #[arg(long)]
    predictions: PathBuf,
    /// Gaussian blur applied to ground-truth discs; 0 disables it.
    #[arg(long, default_value_t = 0.0)]
    blur_sigma: f64,
    #[arg(long, default_value_t = DEFAULT_KLD_EPSILON)]
    epsilon: f64,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_saliency(path: &Path) -> Result<SaliencyMap> {
    let grid = read_float_grid(&read(path)?).with_context(|| format!("decoding {}", path.display()))?;
    SaliencyMap::from_grid(&grid).with_context(|| format!("loading {}", path.display()))
}

fn parse_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = String::from_utf8(read(path)?).with_context(|| format!("{} is not UTF-8", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run_loop_cmd(args: RunLoopArgs, out: &mut impl Write) -> Result<bool> {
    let image = read_pnm(&read(&args.image)?).with_context(|| format!("decoding {}", args.image.display()))?;
    let providers = if args.mock {
        let field = match &args.mock_field {
            Some(p) => read_saliency(p)?,
            None => SaliencyMap::zeros(image.width(), image.height()),
        };
        mock_providers(SyntheticScene::new(image.clone(), field, args.decay)?, args.seed).0
    } else {
        let cfg = HttpConfig {
            timeout: Duration::from_millis(args.timeout_ms),
            ..Default::default()
        };
        providers_from_env(|k| std::env::var(k).ok(), cfg)?
    };
    let cfg = LoopConfig {
        tau_s: args.tau,
        max_iterations: args.max_iter,
        dilation_radius: args.dilation,
        min_area: args.min_area,
        tool_policy: ToolPolicy {
            prefer: match args.prefer {
                PreferArg::Auto => ToolPreference::Auto,
                PreferArg::MaskGuided => ToolPreference::MaskGuided,
                PreferArg::InstructionDriven => ToolPreference::InstructionDriven,
            },
            max_cost: args.max_cost,
        },
        ..Default::default()
    };
    let trace = run_loop(&image, &args.prompt, &providers, &cfg)?;

    let final_path = args.out.clone().unwrap_or_else(|| with_suffix(&args.image, ".retouched.pnm"));
    write(&final_path, &write_pnm(&trace.final_image))?;
    if let Some(trace_path) = &args.trace {
        let step_path = |t: usize| with_suffix(trace_path, &format!(".t{t}.pnm"));
        for r in &trace.records {
            write(&step_path(r.t), &write_pnm(&r.image_after))?;
        }
        let json = trace.to_json(|t| match t {
            Some(t) => step_path(t).display().to_string(),
            None => final_path.display().to_string(),
        });
        write(trace_path, format!("{}\n", serde_json::to_string_pretty(&json)?).as_bytes())?;
    }
    writeln!(out, "{}", serde_json::to_string(&trace_to_report(&trace))?)?;
    if let Some(err) = &trace.error {
        eprintln!("provider error: {err}");
    }
    Ok(trace.stop_reason != StopReason::ProviderError)
}

fn evaluate_saliency_cmd(args: EvaluateSaliencyArgs, out: &mut impl Write) -> Result<()> {
    let records = parse_dataset(&read(&args.dataset)?)?;
    if records.is_empty() {
        bail!("empty dataset");
    }
    if args.blur_sigma.is_nan() || args.blur_sigma < 0.0 {
        bail!("blur sigma must be non-negative");
    }
    let fmt = |m: &MetricReport| format!("{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}", m.auc_judd, m.nss, m.cc, m.sim, m.kld);
    writeln!(out, "image\tauc_judd\tnss\tcc\tsim\tkld")?;
    let mut reports = Vec::with_capacity(records.len());
    for record in &records {
        let pred_path = args.predictions.join(format!("{}.fsal", record.image_id));
        let pred = read_saliency(&pred_path)?;
        let (truth, fix) = ground_truth_map(record, args.blur_sigma);
        let report = evaluate_all(&pred, &truth, &fix, args.epsilon)
            .with_context(|| format!("evaluating {}", record.image_id))?;
        writeln!(out, "{}\t{}", record.image_id, fmt(&report))?;
        reports.push(report);
    }
    writeln!(out, "mean\t{}", fmt(&MetricReport::mean(&reports)?))?;
    Ok(())
}

fn dispatch(command: Command, out: &mut impl Write) -> Result<bool> {
    match command {
        Command::RunLoop(args) => return run_loop_cmd(args, out),
        Command::EvaluateSaliency(args) => evaluate_saliency_cmd(args, out)?,
        Command::EvaluateReasoning { predictions, truth } => {
            let preds: Vec<Diagnosis> = parse_jsonl(&predictions)?;
            let refs: Vec<ReferenceLabel> = parse_jsonl(&truth)?;
            let r = evaluate_reasoning(&preds, &refs)?;
            writeln!(out, "accuracy\trouge_l\tmeteor_lite")?;
            writeln!(out, "{:.6}\t{:.6}\t{:.6}", r.accuracy, r.rouge_l, r.meteor_lite)?;
        }
        Command::DatasetStats { file, json } => {
            let stats = compute_stats(&parse_dataset(&read(&file)?)?)?;
            if json {
                writeln!(out, "{}", serde_json::to_string_pretty(&stats)?)?;
            } else {
                write!(out, "{}", stats.to_text())?;
            }
        }
        Command::GrpoCheck { seed } => {
            let results = check::run_all(seed);
            for r in &results {
                writeln!(out, "{}", r.line())?;
            }
            return Ok(results.iter().all(|r| r.passed));
        }
        Command::Rasterize { x, y, width, height, out: path } => {
            if x >= width || y >= height {
                bail!("center ({x}, {y}) outside {width}x{height} image");
            }
            let mask = rasterize_region((x, y), height, width);
            let pixels = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
            let bytes = write_pnm(&ImageBuffer::new(width, height, 1, pixels)?);
            match path {
                Some(p) => write(&p, &bytes)?,
                None => out.write_all(&bytes)?,
            }
        }
        Command::ProposeMasks { saliency, tau, dilation, min_area, mask_dir } => {
            let map = read_saliency(&saliency)?;
            let cfg = ProposalConfig { tau, dilation_radius: dilation, min_area };
            for (i, p) in propose_masks(&map, &cfg)?.iter().enumerate() {
                let id = format!("r{i}");
                let line = serde_json::json!({
                    "id": id,
                    "bbox": p.bbox,
                    "area": p.area,
                    "peak_saliency": p.peak_saliency,
                });
                writeln!(out, "{line}")?;
                if let Some(dir) = &mask_dir {
                    let pixels = p.mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
                    let img = ImageBuffer::new(map.width(), map.height(), 1, pixels)?;
                    write(&dir.join(format!("{id}.pgm")), &write_pnm(&img))?;
                }
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = dispatch(cli.command, &mut out);
    let _ = out.flush();
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
