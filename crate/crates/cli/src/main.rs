//! `ijepa`: pretraining, probing, ablation sweeps and diagnostics.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 numerical
//! failure (non-finite activations or gradients).

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use ijepa::ablation::{probe_dataset, run_ablation, AblationOptions, AblationTable};
use ijepa::backbone::Encoder;
use ijepa::checkpoint::Checkpoint;
use ijepa::config::{parse_config, ConfigFile};
use ijepa::evaluation::{
    check_dataset, collapse_report, extract_features, load_encoder, probe_encoder, CollapseReport, EncoderProbe,
    Representation,
};
use ijepa::gradcheck;
use ijepa::masking::{render_ascii, sample_masks, MaskRecord, MaskSpec, Strategy};
use ijepa::patch::{read_dataset, write_dataset};
use ijepa::training::{derive_seed, read_metrics};

/// Env var naming the directory under which runs go when `--out` is absent.
const RUN_ROOT_ENV: &str = "IJEPA_RUN_ROOT";

#[derive(Parser)]
#[command(
    name = "ijepa",
    version,
    about = "Image joint-embedding predictive pretraining at desk scale"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Run directory (default: $IJEPA_RUN_ROOT/pretrain-<time>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear-probe a frozen encoder from a checkpoint.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        /// Labeled dataset file (default: the synthetic probe set).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Config whose [probe] section to use.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Probe a freshly initialized encoder of the checkpoint's shape.
        #[arg(long)]
        random_init: bool,
        /// Also write the JSON result here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a one-axis ablation sweep.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cap the training steps of every point.
        #[arg(long)]
        max_steps: Option<u64>,
        /// Only run the first N grid values.
        #[arg(long)]
        limit_points: Option<usize>,
        /// Size of the synthetic probe set.
        #[arg(long)]
        probe_count: Option<usize>,
        /// Quick smoke run: 2 steps per point, 200 probe images.
        #[arg(long)]
        subset: bool,
    },
    /// Print sampled masks as JSON (stdout) and ASCII (stderr).
    SampleMasks {
        /// Grid size as ROWSxCOLS.
        #[arg(long, default_value = "14x14")]
        grid: String,
        #[arg(long, default_value = "multi-block")]
        strategy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Export CSV for plotting: a run's loss curve or an ablation's results.
    Report {
        /// Run directory containing metrics.jsonl.
        #[arg(long, conflicts_with = "ablation")]
        run: Option<PathBuf>,
        /// Ablation output directory containing results.json.
        #[arg(long)]
        ablation: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the encoder, predictor and loss gradients.
    Gradcheck {
        #[arg(long, default_value_t = 200)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Write the synthetic shapes corpus to a dataset file.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e
                .chain()
                .any(|c| c.downcast_ref::<ijepa::Error>().is_some_and(ijepa::Error::is_numerical));
            ExitCode::from(if numerical { 3 } else { 1 })
        }
    }
}

fn default_out(kind: &str) -> PathBuf {
    let root = std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    root.join(format!("{kind}-{secs}"))
}

fn load_config(path: &Path) -> Result<ConfigFile> {
    if !path.exists() {
        bail!("config file {} not found", path.display());
    }
    Ok(parse_config(path)?)
}

fn print_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    println!("{text}");
    if let Some(p) = out {
        fs::write(p, format!("{text}\n")).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ProbeReport {
    checkpoint: String,
    step: u64,
    random_init: bool,
    probe: EncoderProbe,
    collapse: CollapseSummary,
}

#[derive(Serialize)]
struct CollapseSummary {
    effective_rank: f64,
    mean_pairwise_cosine: f64,
    mean_std: f64,
}

impl From<CollapseReport> for CollapseSummary {
    fn from(r: CollapseReport) -> Self {
        Self {
            effective_rank: r.effective_rank,
            mean_pairwise_cosine: r.mean_pairwise_cosine,
            mean_std: r.mean_std,
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Pretrain { config, out, resume } => {
            let cfg = load_config(&config)?;
            let out = out.unwrap_or_else(|| default_out("pretrain"));
            let summary = ijepa::run::pretrain(&cfg, &out, resume.as_deref())
                .with_context(|| format!("pretraining into {}", out.display()))?;
            println!(
                "trained to step {} ({} skipped); final checkpoint {}",
                summary.final_step,
                summary.skipped,
                summary.final_checkpoint.display()
            );
        }
        Command::Probe {
            ckpt,
            data,
            config,
            random_init,
            out,
        } => {
            let probe_cfg = match &config {
                Some(p) => load_config(p)?.probe,
                None => ConfigFile::default().probe,
            };
            let checkpoint = Checkpoint::load(&ckpt)?;
            let (train, encoder, mut params) = load_encoder(&checkpoint)?;
            if random_init {
                params = Encoder::<f32>::init(train.model, derive_seed(train.seed, "encoder-init"))?.1;
            }
            let dataset = match &data {
                Some(p) => read_dataset(p)?,
                None => probe_dataset(&probe_cfg, train.model.image_size, None)?,
            };
            check_dataset(&encoder, &dataset)?;
            let probe = probe_encoder(&encoder, &params, &dataset, &probe_cfg)?;
            let feats = extract_features(&encoder, &params, &dataset.images, Representation::LastLayerAvgPool)?;
            let report = ProbeReport {
                checkpoint: ckpt.display().to_string(),
                step: checkpoint.step,
                random_init,
                probe,
                collapse: collapse_report(feats.view())?.into(),
            };
            print_json(&report, out.as_deref())?;
        }
        Command::Ablate {
            grid,
            out,
            max_steps,
            limit_points,
            probe_count,
            subset,
        } => {
            let cfg = load_config(&grid)?;
            if cfg.ablation.is_none() {
                bail!("{} has no [ablation] section", grid.display());
            }
            let opts = AblationOptions {
                max_steps: max_steps.or(subset.then_some(2)),
                limit_points,
                probe_count: probe_count.or(subset.then_some(200)),
            };
            let out = out.unwrap_or_else(|| default_out("ablate"));
            let table = run_ablation(&cfg, &out, &opts)?;
            print!("{}", table.render());
            let failed = table.rows.iter().filter(|r| r.status != "ok").count();
            if failed > 0 {
                eprintln!("{failed} of {} points failed", table.rows.len());
            }
        }
        Command::SampleMasks {
            grid,
            strategy,
            seed,
            count,
        } => {
            let (rows, cols) = parse_grid(&grid)?;
            let spec = MaskSpec {
                strategy: strategy.parse::<Strategy>()?,
                ..MaskSpec::default()
            };
            let samples = sample_masks(rows, cols, &spec, seed, count)?;
            #[derive(Serialize)]
            struct Out {
                grid: [usize; 2],
                strategy: String,
                seed: u64,
                samples: Vec<MaskRecord>,
            }
            let out = Out {
                grid: [rows, cols],
                strategy: spec.strategy.name().to_string(),
                seed,
                samples: samples.iter().map(|(c, t)| MaskRecord::new(c, t)).collect(),
            };
            println!("{}", serde_json::to_string_pretty(&out)?);
            let mut err = std::io::stderr().lock();
            for (i, (c, t)) in samples.iter().enumerate() {
                let _ = writeln!(err, "sample {i}: context {} patches", c.len());
                let _ = write!(err, "{}", render_ascii(c, t));
            }
        }
        Command::Report { run, ablation, out } => {
            let csv = match (run, ablation) {
                (Some(dir), None) => loss_csv(&dir)?,
                (None, Some(dir)) => ablation_csv(&dir)?,
                _ => bail!("give exactly one of --run or --ablation"),
            };
            match out {
                Some(p) => fs::write(&p, csv).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{csv}"),
            }
        }
        Command::Gradcheck { probes, seed, step } => {
            let problem = gradcheck::nano_problem(seed)?;
            let report = gradcheck::check(&problem, probes, step, seed.wrapping_add(1))?;
            println!(
                "probes {} (encoder {}, predictor {})",
                report.probes, report.encoder_probes, report.predictor_probes
            );
            println!("encoder max relative error   {:.3e}", report.encoder_max_rel_error);
            println!("predictor max relative error {:.3e}", report.predictor_max_rel_error);
            println!(
                "max relative error {:.3e} at {}",
                report.max_rel_error, report.worst_param
            );
        }
        Command::Synth { out, count, seed } => {
            let ds = ijepa::data::generate(&ijepa::data::SynthConfig {
                count,
                seed,
                ..Default::default()
            })?;
            write_dataset(&out, &ds)?;
            println!("wrote {count} images to {}", out.display());
        }
    }
    Ok(())
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("grid `{s}` is not ROWSxCOLS"))?;
    let r = r
        .trim()
        .parse()
        .with_context(|| format!("grid `{s}` is not ROWSxCOLS"))?;
    let c = c
        .trim()
        .parse()
        .with_context(|| format!("grid `{s}` is not ROWSxCOLS"))?;
    Ok((r, c))
}

fn loss_csv(dir: &Path) -> Result<String> {
    let metrics = read_metrics(&dir.join(ijepa::run::METRICS))?;
    let mut s = String::from("step,loss,lr,wd,ema_m,context_ratio,wall_ms\n");
    for m in metrics {
        let loss = m.loss.map_or(String::new(), |l| l.to_string());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            m.step, loss, m.lr, m.wd, m.ema_m, m.context_ratio, m.wall_ms
        );
    }
    Ok(s)
}

fn ablation_csv(dir: &Path) -> Result<String> {
    let path = dir.join("results.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let table: AblationTable = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let mut s =
        String::from("ablation,axis,value,status,steps,final_loss,top1,top1_low_shot,count_top1,effective_rank\n");
    for r in &table.rows {
        let _ = writeln!(
            s,
            "{},{},\"{}\",{},{},{},{},{},{},{}",
            table.name,
            table.axis,
            r.value,
            r.status,
            r.steps,
            opt(r.final_loss),
            opt(r.top1),
            opt(r.top1_low_shot),
            opt(r.count_top1),
            opt(r.effective_rank)
        );
    }
    Ok(s)
}
