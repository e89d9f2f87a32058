//! Command-line front end. [`run`] parses arguments, executes one subcommand
//! and maps the outcome to an exit code: 0 on success, 1 on usage errors and
//! 2 on runtime failures.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use crate::calibration::{calibrate_with, CalibConfig};
use crate::checkpoint;
use crate::diffusion::data::eight_gaussian_reference_modes;
use crate::diffusion::{
    ddim_sample, ddpm_sample, ddpm_sample_respaced, toy_dataset, train_denoiser, Schedule, TrainConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{block_error_trace, quality_report, size_report, TraceMode, DEFAULT_PROJECTIONS};
use crate::model::{compress, CompressedModel, Method, ModelMeta, QuantConfig};
use crate::numerics::{Matrix, Rng};
use crate::pool::{ProjectionRule, DEFAULT_TAU};

#[derive(Parser, Debug)]
#[command(name = "dpq", version, about = "Product quantization of toy diffusion models")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, env = "DPQ_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Plain-text `key = value` file of defaults; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (0 uses every core).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a floating-point denoiser on a toy dataset.
    TrainToy {
        #[arg(long, default_value = "eight-gaussians")]
        dataset: String,
        #[arg(long, default_value_t = 8192)]
        n: usize,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        #[arg(long, default_value_t = 192)]
        hidden: usize,
        #[arg(long, default_value_t = 3)]
        depth: usize,
        /// Training curve CSV (`epoch,loss`).
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantize the hidden layers of a floating-point model.
    Quantize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        method: QuantMethod,
        /// Nominal bit width preset: 1, 2, 3, 4 map to d = 8, 4, 3, 2 with k = 256.
        #[arg(long, default_value_t = 2)]
        bits: u8,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f32,
        /// Lloyd iterations (defaults: 1000 for vq, 20 otherwise).
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long, value_enum, default_value_t = Rule::Nearest)]
        projection: Rule,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate the codebooks of a quantized model against the diffusion loss.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        /// The floating-point model the quantized one was made from.
        #[arg(long)]
        original: PathBuf,
        #[arg(long, default_value = "eight-gaussians")]
        dataset: String,
        #[arg(long, default_value_t = 2048)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 1)]
        reassign_every: usize,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        /// Skip activation-aware reassignment (codebook updates only).
        #[arg(long)]
        no_reassign: bool,
        /// Keep codebook values off the half-precision grid after updates.
        #[arg(long)]
        no_reround: bool,
        /// Per-step log CSV (`epoch,step,ddpm_loss,reassigned_fraction`).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw samples from a model.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = SamplerKind::Ddim)]
        sampler: SamplerKind,
        /// Sampling steps; ddpm with steps equal to the schedule length runs the full chain.
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 0.0)]
        eta: f64,
        #[arg(long, default_value_t = 4096)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two sample files (`x,y` CSV).
    Eval {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PROJECTIONS)]
        projections: usize,
        /// Also report per-mode coverage for a mixture dataset.
        #[arg(long)]
        modes: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer storage accounting of a checkpoint.
    Report {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer error between a floating and a quantized model along sampling trajectories.
    Trace {
        #[arg(long)]
        fp: PathBuf,
        #[arg(long)]
        q: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Free)]
        mode: Mode,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 512)]
        chains: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum QuantMethod {
    Uniform,
    Vq,
    Pq,
    Dpq,
}

impl From<QuantMethod> for Method {
    fn from(m: QuantMethod) -> Self {
        match m {
            QuantMethod::Uniform => Method::Uniform,
            QuantMethod::Vq => Method::Vq,
            QuantMethod::Pq => Method::Pq,
            QuantMethod::Dpq => Method::Dpq,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Rule {
    Nearest,
    ImportanceGap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Teacher,
    Free,
}

/// Failures split by exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(Error::Io(e))
    }
}

/// Reads `key = value` lines; `#` starts a comment.
fn read_config(path: &Path) -> std::result::Result<Vec<(String, String)>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected key = value", path.display(), no + 1))?;
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let a = a.to_string_lossy();
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Inserts config entries as flags right after the subcommand name, so any
/// flag given on the command line overrides them.
fn expand_config(argv: Vec<OsString>) -> std::result::Result<Vec<OsString>, String> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let entries = read_config(&path)?;
    let cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    let Some(pos) = argv
        .iter()
        .position(|a| names.iter().any(|n| a.to_string_lossy() == n.as_str()))
    else {
        return Ok(argv);
    };
    let sub = cmd
        .find_subcommand(argv[pos].to_string_lossy().as_ref())
        .expect("known subcommand");
    let mut flags = Vec::new();
    for (key, value) in entries {
        let takes_value = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
            .map(|a| a.get_action().takes_values());
        match takes_value {
            Some(false) => match value.as_str() {
                "true" | "1" | "yes" => flags.push(OsString::from(format!("--{key}"))),
                "false" | "0" | "no" => {}
                other => return Err(format!("config key '{key}' expects true or false, got '{other}'")),
            },
            // Unknown keys pass through so the parser rejects them.
            _ => {
                flags.push(OsString::from(format!("--{key}")));
                flags.push(OsString::from(value));
            }
        }
    }
    let mut out = argv[..=pos].to_vec();
    out.extend(flags);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

/// The run's resolved settings as a reproducible command line.
fn resolved_line(matches: &clap::ArgMatches) -> String {
    fn push(cmd: &clap::Command, m: &clap::ArgMatches, top: bool, parts: &mut Vec<String>) {
        for arg in cmd.get_arguments().filter(|a| top || !a.is_global_set()) {
            let (id, Some(long)) = (arg.get_id().as_str(), arg.get_long()) else {
                continue;
            };
            if id == "config" {
                continue;
            }
            if !arg.get_action().takes_values() {
                if m.get_flag(id) {
                    parts.push(format!("--{long}"));
                }
                continue;
            }
            if let Ok(Some(raw)) = m.try_get_raw(id) {
                for v in raw {
                    parts.push(format!("--{long}"));
                    parts.push(v.to_string_lossy().into_owned());
                }
            }
        }
    }
    let cmd = Cli::command();
    let mut parts = vec!["dpq".to_string()];
    push(&cmd, matches, true, &mut parts);
    if let Some((name, sub)) = matches.subcommand() {
        parts.push(name.to_string());
        push(cmd.find_subcommand(name).expect("parsed subcommand"), sub, false, &mut parts);
    }
    parts.join(" ")
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return 1;
        }
    };
    let matches = match Cli::command().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    crate::par::init_threads(cli.threads);
    eprintln!("resolved: {}", resolved_line(&matches));
    match execute(&cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("{}", Cli::command().render_usage());
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn points_csv(points: &Matrix<f32>) -> String {
    let mut out = String::from("x,y\n");
    for i in 0..points.rows() {
        let r = points.row(i);
        out.push_str(&format!("{},{}\n", r[0], r[1]));
    }
    out
}

/// Reads an `x,y` CSV into an `N x 2` matrix.
pub fn read_points(path: &Path) -> Result<Matrix<f32>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
        .clone();
    if headers.len() != 2 || &headers[0] != "x" || &headers[1] != "y" {
        return Err(Error::Format(format!("{}: expected header x,y", path.display())));
    }
    let mut data = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        for field in rec.iter() {
            let v: f32 = field
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("{}: row {}: bad number '{field}'", path.display(), i + 1)))?;
            data.push(v);
        }
    }
    let rows = data.len() / 2;
    Matrix::from_vec(rows, 2, data)
}

fn dataset_points(name: &str, n: usize, rng: &mut Rng) -> std::result::Result<Matrix<f32>, Failure> {
    toy_dataset(name, n, rng)
        .map(|d| d.points)
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn execute(cli: &Cli) -> std::result::Result<(), Failure> {
    let root = Rng::new(cli.seed);
    match &cli.command {
        Command::TrainToy {
            dataset,
            n,
            epochs,
            lr,
            batch,
            hidden,
            depth,
            curve,
            out,
        } => {
            if *hidden == 0 || *depth == 0 {
                return Err(Failure::Usage("--hidden and --depth must be positive".into()));
            }
            let data = dataset_points(dataset, *n, &mut root.fork(1))?;
            let s = Schedule::default();
            let cfg = TrainConfig {
                epochs: *epochs,
                lr: *lr,
                batch: *batch,
                hidden: *hidden,
                depth: *depth,
            };
            let (net, report) = train_denoiser(&data, &s, &cfg, &mut root.fork(2))?;
            if let Some(loss) = report.final_loss {
                eprintln!("final training loss {loss:.6}");
            }
            if let Some(path) = curve {
                fs::write(path, report.to_csv())?;
            }
            let model = CompressedModel {
                meta: ModelMeta::new(&s, cli.seed),
                net,
            };
            checkpoint::save(&model, out)?;
        }
        Command::Quantize {
            input,
            method,
            bits,
            d,
            k,
            tau,
            iters,
            projection,
            out,
        } => {
            let method = Method::from(*method);
            let mut cfg = if method == Method::Uniform {
                if !(1..=8).contains(bits) {
                    return Err(Failure::Usage(format!("uniform bits must be in 1..=8, got {bits}")));
                }
                QuantConfig {
                    bits: *bits,
                    ..QuantConfig::preset(method, 2).expect("preset")
                }
            } else {
                QuantConfig::preset(method, *bits).map_err(|e| Failure::Usage(e.to_string()))?
            };
            if let Some(d) = d {
                cfg.d = *d;
            }
            if let Some(k) = k {
                cfg.k = *k;
            }
            cfg.tau = *tau;
            cfg.iters = *iters;
            cfg.projection = match projection {
                Rule::Nearest => ProjectionRule::Nearest,
                Rule::ImportanceGap => ProjectionRule::ImportanceGap,
            };
            if !(1..=256).contains(&cfg.k) {
                return Err(Failure::Usage(format!("--k must be in 1..=256, got {}", cfg.k)));
            }
            let model = checkpoint::load(input)?;
            if method != Method::Uniform {
                let count = model.net.layers.len();
                for (l, layer) in model.net.layers.iter().enumerate() {
                    let n = layer.cols();
                    if l > 0 && l + 1 < count && (cfg.d == 0 || n % cfg.d != 0) {
                        return Err(Failure::Usage(format!(
                            "--d {} does not divide the width {n} of layer {l}",
                            cfg.d
                        )));
                    }
                }
            }
            let q = compress(&model, &cfg, &root.fork(3))?;
            checkpoint::save(&q, out)?;
        }
        Command::Calibrate {
            model,
            original,
            dataset,
            n,
            epochs,
            lr,
            reassign_every,
            batch,
            no_reassign,
            no_reround,
            log,
            out,
        } => {
            if *reassign_every == 0 {
                return Err(Failure::Usage("--reassign-every must be at least 1".into()));
            }
            let q = checkpoint::load(model)?;
            let fp = checkpoint::load(original)?;
            let data = dataset_points(dataset, *n, &mut root.fork(4))?;
            let s = q.meta.schedule()?;
            let cfg = CalibConfig {
                epochs: *epochs,
                lr: *lr,
                reassign_every: *reassign_every,
                batch: *batch,
                reround: !no_reround,
                reassign: !no_reassign,
                track_activation_loss: false,
            };
            let (calibrated, report) = calibrate_with(&q, &fp.net, &data, &s, &cfg, &mut root.fork(5), |_, _| Ok(()))?;
            for (e, l) in &report.epoch_loss {
                eprintln!("epoch {e}: mean loss {l:.6}");
            }
            if let Some(path) = log {
                fs::write(path, report.to_csv())?;
            }
            checkpoint::save(&calibrated, out)?;
        }
        Command::Sample {
            model,
            sampler,
            steps,
            eta,
            n,
            out,
        } => {
            let m = checkpoint::load(model)?;
            let s = m.meta.schedule()?;
            let net = m.net.dense()?;
            let rng = root.fork(6);
            let points = match sampler {
                SamplerKind::Ddpm if *steps == s.steps() => ddpm_sample(&net, &s, *n, &rng),
                SamplerKind::Ddpm => {
                    ddpm_sample_respaced(&net, &s, *steps, *n, &rng).map_err(|e| Failure::Usage(e.to_string()))?
                }
                SamplerKind::Ddim => {
                    ddim_sample(&net, &s, *steps, *eta, *n, &rng).map_err(|e| Failure::Usage(e.to_string()))?
                }
            };
            fs::write(out, points_csv(&points))?;
        }
        Command::Eval {
            samples,
            reference,
            projections,
            modes,
            out,
        } => {
            let a = read_points(samples)?;
            let b = read_points(reference)?;
            let reference_modes = match modes.as_deref() {
                None => None,
                Some("eight-gaussians") => Some(eight_gaussian_reference_modes()),
                Some(other) => return Err(Failure::Usage(format!("no reference modes for '{other}'"))),
            };
            let report = quality_report(
                &a,
                &b,
                reference_modes.as_ref().map(|(m, s)| (m.as_slice(), *s)),
                *projections,
                cli.seed,
            )?;
            write_text(out.as_deref(), &report.to_csv())?;
        }
        Command::Report { model, out } => {
            let m = checkpoint::load(model)?;
            let report = size_report(&m)?;
            if m.net.layers.iter().any(|l| l.weight.assignments().is_some()) {
                eprintln!("note: assignment bits count ceil(log2 k) per index; the file stores one byte each");
            }
            write_text(out.as_deref(), &report.to_csv())?;
        }
        Command::Trace {
            fp,
            q,
            mode,
            steps,
            chains,
            out,
        } => {
            let a = checkpoint::load(fp)?;
            let b = checkpoint::load(q)?;
            let s = a.meta.schedule()?;
            let mode = match mode {
                Mode::Teacher => TraceMode::Teacher,
                Mode::Free => TraceMode::Free,
            };
            let trace = block_error_trace(&a.net, &b.net, &s, mode, *steps, *chains, &root.fork(7))?;
            write_text(out.as_deref(), &trace.to_csv())?;
        }
    }
    Ok(())
}
