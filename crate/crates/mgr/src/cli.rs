//! Command-line front end: `mgr <train|eval|diagnose>`.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration error, 3 data error,
//! 4 numerical abort, 5 file-format error. `MGR_THREADS` caps worker
//! parallelism; every file output lands under the `--out` directory.

use crate::ckpt::{fnv1a, Checkpoint};
use crate::config::{Precision, RunConfig};
use crate::data::CorpusDataset;
use crate::diagnostics::{
    self, AngularSite, DiagnosticsReport, MaSite, ProbeSet, ReportRow,
};
use crate::error::{MgrError, Result};
use crate::model::ModelParams;
use crate::optim::Optimizer;
use crate::tensor::Real;
use crate::train::{self, eval_loss, train_loop};
use std::io::Write as _;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_FORMAT: i32 = 5;

pub fn exit_code_for(err: &MgrError) -> i32 {
    match err {
        MgrError::Config(_) | MgrError::Wiring(_) | MgrError::Stage(_) | MgrError::Usage(_) => {
            EXIT_CONFIG
        }
        MgrError::Data(_) | MgrError::Io(_) => EXIT_DATA,
        MgrError::Numeric(_) => EXIT_NUMERIC,
        MgrError::Format(_) | MgrError::Shape(_) => EXIT_FORMAT,
    }
}

const USAGE: &str = "usage: mgr <train|eval|diagnose> [options]\n\
  mgr train    --config PATH [--out DIR] [--ckpt RESUME] [--override k=v ...]\n\
  mgr eval     --config PATH --ckpt PATH [--out DIR] [--override k=v ...]\n\
  mgr diagnose <metric> --config PATH [--ckpt PATH] [--out DIR] [options]\n\
\n\
diagnose metrics: angular [--stream N], massive [--site ffn_out|attn_out|stream],\n\
                  rms, gradrms, gates, prune, io [--n N --c C [--bytes B]]\n\
\n\
environment: MGR_THREADS caps worker parallelism (results do not depend on it)\n";

pub fn run(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("{msg}");
            eprint!("{USAGE}");
            EXIT_USAGE
        }
        Err(CliError::Failed(e)) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

enum CliError {
    Usage(String),
    Failed(MgrError),
}

impl From<MgrError> for CliError {
    fn from(e: MgrError) -> Self {
        CliError::Failed(e)
    }
}

struct Args {
    config: Option<PathBuf>,
    ckpt: Option<PathBuf>,
    out: PathBuf,
    overrides: Vec<String>,
    stream: Option<usize>,
    site: Option<String>,
    n: Option<usize>,
    c: Option<usize>,
    bytes: usize,
    positional: Vec<String>,
}

fn parse_args(args: &[String]) -> std::result::Result<Args, CliError> {
    let mut out = Args {
        config: None,
        ckpt: None,
        out: PathBuf::from("mgr-out"),
        overrides: Vec::new(),
        stream: None,
        site: None,
        n: None,
        c: None,
        bytes: 4,
        positional: Vec::new(),
    };
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let mut value = |flag: &str| -> std::result::Result<String, CliError> {
            it.next()
                .cloned()
                .ok_or_else(|| CliError::Usage(format!("{flag} needs a value")))
        };
        match a.as_str() {
            "--config" => out.config = Some(PathBuf::from(value("--config")?)),
            "--ckpt" => out.ckpt = Some(PathBuf::from(value("--ckpt")?)),
            "--out" => out.out = PathBuf::from(value("--out")?),
            "--override" => out.overrides.push(value("--override")?),
            "--stream" => {
                out.stream = Some(value("--stream")?.parse().map_err(|_| {
                    CliError::Usage("--stream needs an integer".into())
                })?)
            }
            "--site" => out.site = Some(value("--site")?),
            "--n" => {
                out.n = Some(value("--n")?.parse().map_err(|_| {
                    CliError::Usage("--n needs an integer".into())
                })?)
            }
            "--c" => {
                out.c = Some(value("--c")?.parse().map_err(|_| {
                    CliError::Usage("--c needs an integer".into())
                })?)
            }
            "--bytes" => {
                out.bytes = value("--bytes")?.parse().map_err(|_| {
                    CliError::Usage("--bytes needs an integer".into())
                })?
            }
            flag if flag.starts_with("--") => {
                return Err(CliError::Usage(format!("unknown flag '{flag}'")))
            }
            pos => out.positional.push(pos.to_string()),
        }
    }
    Ok(out)
}

fn dispatch(argv: &[String]) -> std::result::Result<(), CliError> {
    let Some(cmd) = argv.first() else {
        return Err(CliError::Usage("missing command".into()));
    };
    let args = parse_args(&argv[1..])?;
    match cmd.as_str() {
        "train" => cmd_train(&args),
        "eval" => cmd_eval(&args),
        "diagnose" => cmd_diagnose(&args),
        other => Err(CliError::Usage(format!("unknown command '{other}'"))),
    }
}

fn resolved_config(args: &Args) -> std::result::Result<RunConfig, CliError> {
    let path = args
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    Ok(cfg)
}

fn load_corpus(cfg: &RunConfig) -> Result<CorpusDataset> {
    CorpusDataset::load(Path::new(&cfg.corpus), cfg.split_fraction)
}

// ── train ────────────────────────────────────────────────────────────

fn cmd_train(args: &Args) -> std::result::Result<(), CliError> {
    let cfg = resolved_config(args)?;
    cfg.validate()?;
    std::fs::create_dir_all(&args.out).map_err(MgrError::from)?;
    let resolved = cfg.to_text();
    std::fs::write(args.out.join("resolved.cfg"), &resolved).map_err(MgrError::from)?;
    let ds = load_corpus(&cfg)?;
    let settings = cfg.train_settings();
    let resume = args.ckpt.as_deref();
    let outcome = match cfg.precision {
        Precision::Single => {
            train_loop::<f32>(&cfg.model, &cfg.optim, &settings, &ds, &args.out, resume, &resolved)?
        }
        Precision::Double => {
            train_loop::<f64>(&cfg.model, &cfg.optim, &settings, &ds, &args.out, resume, &resolved)?
        }
    };
    println!(
        "done: step {} train_ma {:.6} val_loss {:.6} val_ppl {:.4}",
        outcome.final_step, outcome.final_train_ma, outcome.final_val_loss, outcome.final_val_ppl
    );
    println!("metrics: {}", outcome.metrics_path.display());
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────

fn load_params<F: Real>(
    cfg: &RunConfig,
    ckpt: Option<&Path>,
) -> Result<(ModelParams<F>, u64, String)> {
    let mut params = ModelParams::<F>::init(&cfg.model, cfg.seed)?;
    match ckpt {
        Some(path) => {
            let ck = Checkpoint::<F>::load(path)?;
            let mut opt = Optimizer::<F>::new(cfg.optim.clone(), &params);
            train::restore_from_checkpoint(&ck, &mut params, &mut opt)?;
            let id = format!("{:016x}", fnv1a(&std::fs::read(path)?));
            Ok((params, ck.step, id))
        }
        None => Ok((params, 0, "init".to_string())),
    }
}

fn cmd_eval(args: &Args) -> std::result::Result<(), CliError> {
    let cfg = resolved_config(args)?;
    cfg.validate()?;
    let ckpt = args
        .ckpt
        .as_deref()
        .ok_or_else(|| CliError::Usage("eval requires --ckpt".into()))?;
    let ds = load_corpus(&cfg)?;
    let (loss, ppl, step) = match cfg.precision {
        Precision::Single => {
            let (params, step, _) = load_params::<f32>(&cfg, Some(ckpt))?;
            let (l, p) = eval_loss(
                &cfg.model,
                &params,
                &ds,
                cfg.eval_batches,
                cfg.batch_size,
                cfg.model.context_len,
                cfg.seed,
            )?;
            (l, p, step)
        }
        Precision::Double => {
            let (params, step, _) = load_params::<f64>(&cfg, Some(ckpt))?;
            let (l, p) = eval_loss(
                &cfg.model,
                &params,
                &ds,
                cfg.eval_batches,
                cfg.batch_size,
                cfg.model.context_len,
                cfg.seed,
            )?;
            (l, p, step)
        }
    };
    println!("val_loss = {loss}");
    println!("val_ppl = {ppl}");
    println!("step = {step}");
    std::fs::create_dir_all(&args.out).map_err(MgrError::from)?;
    let json = format!("{{\"loss\":{loss},\"ppl\":{ppl},\"step\":{step}}}");
    let path = args.out.join("eval.json");
    let mut f = std::fs::File::create(&path).map_err(MgrError::from)?;
    f.write_all(json.as_bytes()).map_err(MgrError::from)?;
    println!("report: {}", path.display());
    Ok(())
}

// ── diagnose ─────────────────────────────────────────────────────────

const METRICS: &[&str] = &["angular", "massive", "rms", "gradrms", "gates", "prune", "io"];

fn cmd_diagnose(args: &Args) -> std::result::Result<(), CliError> {
    let Some(metric) = args.positional.first().map(|s| s.as_str()) else {
        return Err(CliError::Usage(format!(
            "diagnose needs a metric: {}",
            METRICS.join(", ")
        )));
    };
    if !METRICS.contains(&metric) {
        return Err(CliError::Usage(format!(
            "unknown metric '{metric}'; valid metrics: {}",
            METRICS.join(", ")
        )));
    }

    // the I/O estimator is pure arithmetic and needs no model
    if metric == "io" {
        let (n, c) = match (args.n, args.c) {
            (Some(n), Some(c)) => (n, c),
            _ => return Err(CliError::Usage("diagnose io needs --n and --c".into())),
        };
        let est = diagnostics::fused_io_estimate(n, c, args.bytes);
        println!(
            "reads = {} elements ({} bytes), writes = {} elements ({} bytes)",
            est.read_elements, est.read_bytes, est.write_elements, est.write_bytes
        );
        let rows = diagnostics::io_estimate_rows(n, c, args.bytes);
        let report = DiagnosticsReport::new("none", "io", "io", rows)?;
        let (csv, _) = report.write_files(&args.out)?;
        println!("report: {}", csv.display());
        return Ok(());
    }

    let cfg = resolved_config(args)?;
    cfg.validate()?;
    match cfg.precision {
        Precision::Single => diagnose_with::<f32>(&cfg, metric, args),
        Precision::Double => diagnose_with::<f64>(&cfg, metric, args),
    }
}

fn diagnose_with<F: Real>(
    cfg: &RunConfig,
    metric: &str,
    args: &Args,
) -> std::result::Result<(), CliError> {
    let ds = load_corpus(cfg)?;
    let (params, _, ckpt_id) = load_params::<F>(cfg, args.ckpt.as_deref())?;
    let probe = ProbeSet::from_dataset(
        &ds,
        cfg.probe_samples,
        cfg.probe_batch,
        cfg.model.context_len,
        cfg.seed,
    )?;
    let rows: Vec<ReportRow> = match metric {
        "angular" => {
            let site = match args.stream {
                Some(i) => AngularSite::Stream(i),
                None => AngularSite::PooledH,
            };
            diagnostics::angular_heatmap(&cfg.model, &params, &probe, site)?
        }
        "massive" => {
            let site = MaSite::parse(args.site.as_deref().unwrap_or("ffn_out"))?;
            diagnostics::massive_activation_trace(&cfg.model, &params, &probe, site)?
        }
        "rms" => diagnostics::layer_rms_profile(&cfg.model, &params, &probe)?,
        "gradrms" => diagnostics::grad_rms_profile(&cfg.model, &params, &probe)?,
        "gates" => diagnostics::gate_statistics(&cfg.model, &params, &probe)?,
        "prune" => diagnostics::prune_sweep(&cfg.model, &params, &probe)?,
        _ => unreachable!("metric validated above"),
    };
    let report = DiagnosticsReport::new(&cfg.hash_hex(), &ckpt_id, metric, rows)?;
    let (csv, json) = report.write_files(&args.out)?;
    println!("report: {}", csv.display());
    println!("report: {}", json.display());
    Ok(())
}
