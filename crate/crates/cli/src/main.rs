//! `rwsa`: parameter and FLOP accounting, enhancement, toy training, metrics and the
//! invariant suite.

mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use rwsa_core::config::RunConfig;
use rwsa_core::dsp::wav::{read_wav, write_wav};
use rwsa_core::model::{count_params, load_weights, save_weights, RwsaMambaUNet};
use rwsa_core::objectives::{fit, FitOptions, MetricReport, TrainPair, Trainer};
use rwsa_core::tensor::ParamStore;
use rwsa_core::verify::run_suite;
use rwsa_core::Error;

use manifest::Manifest;

#[derive(Parser)]
#[command(name = "rwsa", version, about = "RWSA-MambaUNet speech enhancement")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Unique parameter counts per module, plus the tie table summary.
    CountParams {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Analytic forward-pass FLOPs for a clip of the given length.
    CountFlops {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        seconds: f64,
    },
    /// Enhances one 16 kHz mono WAV file.
    Enhance {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains on `*_clean.wav` / `*_noisy.wav` pairs and keeps the checkpoint with
    /// the best SI-SDR on those pairs.
    TrainToy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint interval in steps.
        #[arg(long, default_value_t = 50)]
        eval_every: usize,
    },
    /// SSNR and SI-SDR of estimates against references (files or directories).
    Metrics {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        est: PathBuf,
    },
    /// Runs the invariant suite against a configuration.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Failure that maps to a specific exit code.
#[derive(Debug)]
struct Exit {
    code: u8,
    msg: String,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Exit {}

fn exit(code: u8, msg: impl Into<String>) -> anyhow::Error {
    Exit { code, msg: msg.into() }.into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<Exit>() {
        return e.code;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config { .. } => 2,
                Error::Audio(_) => 3,
                Error::Weights(_) => 4,
                Error::AtStep { .. } | Error::NonFiniteLoss(_) => 1,
                _ => continue,
            };
        }
    }
    1
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn count_params_cmd(cfg: &RunConfig) -> Result<()> {
    let mut store = ParamStore::<f32>::new();
    RwsaMambaUNet::build(cfg.model, &mut store, cfg.train.seed)?;
    let counts = count_params(&store);
    let mut out = std::io::stdout().lock();
    writeln!(out, "{:<16} {:>12}", "module", "params")?;
    for (m, n) in &counts.per_module {
        writeln!(out, "{m:<16} {n:>12}")?;
    }
    writeln!(out, "{:<16} {:>12}", "total", counts.total)?;
    writeln!(out, "{:<16} {:>12.3}M", "", counts.total as f64 / 1e6)?;
    let ties = store.tie_table();
    writeln!(out, "tied sites: {}", ties.len())?;
    let mut per_canonical: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, c) in &ties {
        let unit = c.rsplit_once('.').map_or(c.as_str(), |(head, _)| head);
        *per_canonical.entry(unit).or_insert(0) += 1;
    }
    for (unit, n) in per_canonical {
        writeln!(out, "  {unit}: {n} tensors shared")?;
    }
    Ok(())
}

fn count_flops_cmd(cfg: &RunConfig, seconds: f64) -> Result<()> {
    let mut store = ParamStore::<f32>::new();
    let model = RwsaMambaUNet::build(cfg.model, &mut store, cfg.train.seed)?;
    let rep = model.count_flops(seconds).map_err(|e| exit(2, e.to_string()))?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "seconds\t{seconds}")?;
    for (m, f) in rep.by_module(1) {
        writeln!(out, "module\t{m}\t{f}")?;
    }
    for (k, f) in rep.by_kind() {
        writeln!(out, "kind\t{k:?}\t{f}")?;
    }
    writeln!(out, "total\t{}\t{:.3}G", rep.total(), rep.total() as f64 / 1e9)?;
    Ok(())
}

fn enhance_cmd(cfg: &RunConfig, config: Option<&Path>, weights: &Path, input: &Path, out: &Path) -> Result<()> {
    let noisy = read_wav(input)?;
    let mut store = ParamStore::<f32>::new();
    let model = RwsaMambaUNet::build(cfg.model, &mut store, cfg.train.seed)?;
    load_weights(weights, &cfg.model, &mut store)?;
    let enhanced = model.enhance(&store, &noisy)?;
    write_wav(out, &enhanced.audio).with_context(|| format!("writing {}", out.display()))?;
    let weight_bytes = fs::read(weights).with_context(|| format!("reading {}", weights.display()))?;
    Manifest::new(cfg, config, &command_line(), &weight_bytes).write(&manifest::path_for(out))?;
    Ok(())
}

/// `*_clean.wav` / `*_noisy.wav` pairs under `dir`, sorted by stem.
fn read_pairs(dir: &Path) -> Result<Vec<TrainPair>> {
    let entries = fs::read_dir(dir).map_err(|e| exit(3, format!("{}: {e}", dir.display())))?;
    let mut stems = Vec::new();
    for e in entries {
        let name = e?.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix("_clean.wav") {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(exit(3, format!("{}: no *_clean.wav / *_noisy.wav pairs", dir.display())));
    }
    stems
        .into_iter()
        .map(|s| {
            let noisy_path = dir.join(format!("{s}_noisy.wav"));
            if !noisy_path.exists() {
                return Err(exit(3, format!("{s}_clean.wav has no {s}_noisy.wav")));
            }
            let clean = read_wav(dir.join(format!("{s}_clean.wav")))?;
            let noisy = read_wav(&noisy_path)?;
            Ok(TrainPair::new(s, clean, noisy)?)
        })
        .collect()
}

fn train_toy_cmd(cfg: &RunConfig, config: Option<&Path>, data: &Path, steps: usize, out: &Path, eval_every: usize) -> Result<()> {
    if eval_every == 0 {
        return Err(exit(2, "--eval-every must be positive"));
    }
    let pairs = read_pairs(data)?;
    let mut store = ParamStore::<f32>::new();
    let model = RwsaMambaUNet::build(cfg.model, &mut store, cfg.train.seed)?;
    let mut trainer = Trainer::new(model, store, cfg.train.lr, cfg.loss);
    let opts = FitOptions { steps, batch: cfg.train.batch, segment: cfg.train.segment, eval_every, seed: cfg.train.seed };

    let log_path = out.with_extension("loss.csv");
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    writeln!(log, "step,loss_total,loss_time,loss_mag,loss_complex,loss_phase,loss_consistency")?;
    let mut write_err = None;
    let result = fit(&mut trainer, &pairs, opts, |step, v| {
        let row = format!("{step},{},{},{},{},{},{}", v[0], v[1], v[2], v[3], v[4], v[5]);
        if let Err(e) = writeln!(log, "{row}") {
            write_err.get_or_insert(e);
        }
        if step % 25 == 0 {
            eprintln!("step {step}: loss {:.4}", v[0]);
        }
    });
    log.flush()?;
    if let Some(e) = write_err {
        return Err(anyhow!(e).context(format!("writing {}", log_path.display())));
    }
    let (report, best) = result?;

    let bytes = save_weights(out, &cfg.model, &best).with_context(|| format!("writing {}", out.display()))?;
    let mut manifest = Manifest::new(cfg, config, &command_line(), &bytes);
    manifest.extra.push(("train.steps".into(), steps.to_string()));
    manifest.extra.push(("train.best_step".into(), report.best_step.to_string()));
    manifest.extra.push(("train.best_si_sdr_db".into(), format!("{:.4}", report.best_si_sdr)));
    manifest.extra.push(("train.noisy_si_sdr_db".into(), format!("{:.4}", report.noisy_si_sdr)));
    manifest.extra.push(("train.initial_loss".into(), report.initial_loss[0].to_string()));
    manifest.extra.push(("train.final_loss".into(), report.final_loss[0].to_string()));
    manifest.write(&manifest::path_for(out))?;
    eprintln!(
        "loss {:.4} -> {:.4}; best SI-SDR {:.2} dB at step {} (noisy {:.2} dB)",
        report.initial_loss[0], report.final_loss[0], report.best_si_sdr, report.best_step, report.noisy_si_sdr
    );
    Ok(())
}

/// `(label, reference, estimate)` triples: one for two files, or every `*.wav` in the
/// reference directory matched by name in the estimate directory.
fn metric_pairs(reference: &Path, est: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    if reference.is_file() && est.is_file() {
        return Ok(vec![(est.display().to_string(), reference.to_path_buf(), est.to_path_buf())]);
    }
    if !(reference.is_dir() && est.is_dir()) {
        return Err(exit(3, "--ref and --est must both be files or both be directories"));
    }
    let mut names: Vec<String> = fs::read_dir(reference)?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .filter(|n| n.ends_with(".wav"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(exit(3, format!("{}: no .wav files", reference.display())));
    }
    Ok(names.into_iter().map(|n| (n.clone(), reference.join(&n), est.join(&n))).collect())
}

fn metrics_cmd(reference: &Path, est: &Path) -> Result<()> {
    let mut report = MetricReport::default();
    let mut problems = Vec::new();
    for (label, r, e) in metric_pairs(reference, est)? {
        let scored = (|| -> Result<()> {
            let (rb, eb) = (read_wav(&r)?, read_wav(&e)?);
            if rb.len() != eb.len() {
                bail!("length mismatch: reference {} samples, estimate {}", rb.len(), eb.len());
            }
            report.push(label.clone(), &rb.samples, &eb.samples)?;
            Ok(())
        })();
        if let Err(err) = scored {
            problems.push(format!("{label}: {err:#}"));
        }
    }
    if !report.files.is_empty() {
        print!("{}", report.to_tsv());
    }
    if !problems.is_empty() {
        return Err(exit(3, format!("{} pair(s) skipped:\n  {}", problems.len(), problems.join("\n  "))));
    }
    Ok(())
}

fn verify_cmd(cfg: &RunConfig) -> Result<()> {
    let report = run_suite(&cfg.model);
    print!("{}", report.to_text());
    let failed: Vec<&str> = report.failures().iter().map(|r| r.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(exit(5, format!("invariant(s) violated: {}", failed.join(", "))));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::CountParams { config } => count_params_cmd(&load_config(config.as_deref())?),
        Command::CountFlops { config, seconds } => count_flops_cmd(&load_config(config.as_deref())?, seconds),
        Command::Enhance { config, weights, input, out } => {
            enhance_cmd(&load_config(config.as_deref())?, config.as_deref(), &weights, &input, &out)
        }
        Command::TrainToy { config, data, steps, out, eval_every } => {
            train_toy_cmd(&load_config(config.as_deref())?, config.as_deref(), &data, steps, &out, eval_every)
        }
        Command::Metrics { reference, est } => metrics_cmd(&reference, &est),
        Command::Verify { config } => verify_cmd(&load_config(config.as_deref())?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
