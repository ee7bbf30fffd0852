//! The `ofscil` command-line surface.
//!
//! Exit codes: 0 success, 1 stream violations or failed audit, 2 bad
//! configuration, 3 bad or missing data, 4 numeric failure.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::backbone::ModelParams;
use crate::config::{RunConfig, SEED_ENV};
use crate::data_io::{load_dataset, split_fscil, DataFormat, LabeledDataset};
use crate::error::{Error, Result};
use crate::explicit_memory::{precision_sweep, ExplicitMemory, QuantSpec};
use crate::harness::{
    ablation_matrix, coverage_audit, initial_state, reports_to_csv, run_protocol, synthetic_dataset, train_model,
    validate_stream, write_stream, AblationFlags, ProtocolOptions, SessionStream, StreamManifest,
};
use crate::io_util::write_file;
use crate::losses::Grid;
use crate::offline_training::{build_base_em, metalearn, project_all};
use crate::online_learner::{learn_class, ActivationMemory, CountingExtractor};

#[derive(Debug, Parser)]
#[command(name = "ofscil", version, about = "Online few-shot class-incremental learning")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Cap on worker threads (0 uses every core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain on the base session; writes `params` and `pretrain_history`.
    Pretrain,
    /// Metalearn `params`; writes `meta_params` and `meta_history`.
    Metalearn,
    /// Run the incremental protocol with `model`; writes `report`.
    Protocol {
        /// Finetune the FCR after every incremental session.
        #[arg(long)]
        finetune: bool,
    },
    /// Base-session accuracy per prototype width; writes `sweep_out`.
    Sweep,
    /// Train and evaluate every `ablation_rows` entry; writes `ablation_out`.
    Ablate,
    /// Check a stream manifest for protocol violations.
    Validate {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Add classes to the memories at `em` and `am` in a single pass.
    LearnClass {
        /// Dataset file holding the new samples.
        #[arg(long)]
        samples: PathBuf,
        /// Learn only rows with this label; default is every label in the file.
        #[arg(long)]
        class: Option<u32>,
    },
    /// Classify every row of a dataset file against `em`; writes `predictions`.
    Classify {
        #[arg(long)]
        input: PathBuf,
    },
    /// Write the resolved data stream as raw files plus a manifest.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective configuration.
    Config,
}

/// Exit code for an error, following the scheme in the module docs.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) | Error::ConflictingFlags(_) => 2,
        Error::NumericFailure(_) | Error::ZeroNorm => 4,
        _ => 3,
    }
}

/// Runs one command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    cfg.apply_seed_env(std::env::var(SEED_ENV).ok().as_deref())?;
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v)?;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(path: &Path) -> Result<LabeledDataset> {
    with_path(path, load_dataset(path, DataFormat::from_path(path)))
}

fn load_params(path: &Path) -> Result<ModelParams> {
    with_path(path, ModelParams::load(path))
}

fn save(path: &Path, bytes: &[u8]) -> Result<()> {
    with_path(path, write_file(path, bytes).map_err(Error::from))
}

/// The stream named by `manifest`, else split from `dataset`, else split
/// from the synthetic generator. The grid enables cutmix.
fn resolve_stream(cfg: &RunConfig) -> Result<(SessionStream, Option<Grid>)> {
    if let Some(m) = &cfg.manifest {
        let manifest = with_path(m, StreamManifest::load(m))?;
        for p in std::iter::once(&manifest.base).chain(&manifest.sessions).chain([&manifest.test]) {
            if !p.exists() {
                return Err(Error::Io(io::Error::new(
                    io::ErrorKind::NotFound,
                    format!("{}: no such file", p.display()),
                )));
            }
        }
        return Ok((manifest.load_stream()?, None));
    }
    let (ds, test, grid) = match &cfg.dataset {
        Some(path) => {
            let test = cfg.test_dataset.as_deref().map(load_data).transpose()?;
            (load_data(path)?, test, None)
        }
        None => (synthetic_dataset(&cfg.synthetic, cfg.seed)?, None, Some(cfg.synthetic.grid())),
    };
    let (stream, _) = split_fscil(&ds, test.as_ref(), &cfg.split, cfg.seed)?;
    Ok((stream, grid))
}

fn load_or_new_memories(cfg: &RunConfig, params: &ModelParams) -> Result<(ExplicitMemory, ActivationMemory)> {
    let em = if cfg.em.exists() {
        with_path(&cfg.em, ExplicitMemory::load(&cfg.em))?
    } else {
        ExplicitMemory::new(params.d_p(), cfg.quant.clone())?
    };
    let am = if cfg.am.exists() {
        with_path(&cfg.am, ActivationMemory::load(&cfg.am))?
    } else {
        ActivationMemory::new(params.d_a())
    };
    Ok((em, am))
}

fn execute(cli: Cli) -> Result<i32> {
    let cfg = resolve_config(&cli)?;
    if cfg.threads > 0 {
        // Fails only if a pool already exists in this process; keep it then.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    match cli.command {
        Command::Config => {
            print!("{}", cfg.dump());
            Ok(0)
        }
        Command::Validate { manifest } => {
            let path = manifest
                .or(cfg.manifest.clone())
                .ok_or_else(|| Error::InvalidConfig("validate needs --manifest or the manifest key".into()))?;
            let stream = with_path(&path, StreamManifest::load(&path))?.load_stream()?;
            let report = validate_stream(&stream);
            for v in &report.violations {
                println!("violation: {v}");
            }
            if report.is_ok() {
                println!("stream is valid: {} sessions", stream.num_sessions());
                Ok(0)
            } else {
                Ok(1)
            }
        }
        Command::Generate { out } => {
            let (stream, _) = resolve_stream(&cfg)?;
            let path = with_path(&out, write_stream(&stream, &out))?;
            println!("{}", path.display());
            Ok(0)
        }
        Command::Pretrain => {
            let (stream, grid) = resolve_stream(&cfg)?;
            let setup = cfg.training_setup(stream.base.input_dim(), grid);
            let flags = AblationFlags {
                ag: true,
                or: true,
                ..AblationFlags::default()
            };
            let model = train_model(&setup, &stream.base, flags)?;
            save(&cfg.params, &model.params.to_bytes())?;
            save(&cfg.pretrain_history, model.pretrain.to_csv().as_bytes())?;
            if let Some(last) = model.pretrain.epochs.last() {
                println!("pretrained {} epochs, final accuracy {:.4}", model.pretrain.epochs.len(), last.accuracy);
            }
            Ok(0)
        }
        Command::Metalearn => {
            let (stream, grid) = resolve_stream(&cfg)?;
            let mut params = load_params(&cfg.params)?;
            let setup = cfg.training_setup(stream.base.input_dim(), grid);
            let seed = initial_state(&setup, &stream.base)?.meta_seed;
            let history = metalearn(&mut params, &stream.base, &setup.meta, seed)?;
            save(&cfg.meta_params, &params.to_bytes())?;
            save(&cfg.meta_history, history.to_csv().as_bytes())?;
            println!("metalearned {} iterations", history.iterations.len());
            Ok(0)
        }
        Command::Protocol { finetune } => {
            let (stream, _) = resolve_stream(&cfg)?;
            let params = load_params(&cfg.model)?;
            let options = ProtocolOptions {
                finetune: (finetune || cfg.finetune).then(|| cfg.finetune_cfg.clone()),
                ..ProtocolOptions::default()
            };
            let run = run_protocol(&params, &stream, &cfg.quant, &options)?;
            save(&cfg.report, reports_to_csv(std::slice::from_ref(&run.report)).as_bytes())?;
            for s in &run.sessions {
                println!("session {}: accuracy {:.4}", s.session, s.accuracy);
            }
            let problems = coverage_audit(&stream, &run);
            for p in &problems {
                eprintln!("audit: {p}");
            }
            Ok(if problems.is_empty() { 0 } else { 1 })
        }
        Command::Sweep => {
            let (stream, _) = resolve_stream(&cfg)?;
            let params = load_params(&cfg.model)?;
            let full = QuantSpec {
                prototype_bits: cfg.quant.accum_bits,
                right_shift: None,
                ..cfg.quant.clone()
            };
            let (em, _) = build_base_em(&params, &stream.base, &full)?;
            let base: BTreeSet<u32> = stream.base.classes();
            let test = stream.test.filter_classes(&base);
            let queries: Vec<(Vec<f64>, u32)> =
                project_all(&params, &test)?.into_iter().zip(test.labels().iter().copied()).collect();
            let rows = precision_sweep(&em, &queries, &cfg.sweep_bits)?;
            let mut csv = String::from("bits,kb,accuracy\n");
            for r in &rows {
                writeln!(csv, "{},{:.3},{:.4}", r.bits, r.memory_bytes as f64 / 1000.0, r.accuracy).unwrap();
            }
            save(&cfg.sweep_out, csv.as_bytes())?;
            print!("{csv}");
            Ok(0)
        }
        Command::Ablate => {
            let (stream, grid) = resolve_stream(&cfg)?;
            let setup = cfg.training_setup(stream.base.input_dim(), grid);
            let rows = ablation_matrix(&stream, &setup, &cfg.ablation_rows)?;
            let reports: Vec<_> = rows.into_iter().map(|r| r.report).collect();
            let csv = reports_to_csv(&reports);
            save(&cfg.ablation_out, csv.as_bytes())?;
            print!("{csv}");
            Ok(0)
        }
        Command::LearnClass { samples, class } => {
            let params = load_params(&cfg.model)?;
            let data = load_data(&samples)?;
            let (mut em, mut am) = load_or_new_memories(&cfg, &params)?;
            let classes: Vec<u32> = match class {
                Some(c) => vec![c],
                None => data.classes().into_iter().collect(),
            };
            let counter = CountingExtractor::new(&params);
            for c in classes {
                counter.reset();
                let rows = data.samples_of(c);
                learn_class(&mut em, &mut am, &counter, &rows, c)?;
                println!("class {c}: {} samples, {} forward passes", rows.len(), counter.calls());
            }
            save(&cfg.em, &em.to_bytes())?;
            save(&cfg.am, &am.to_bytes())?;
            Ok(0)
        }
        Command::Classify { input } => {
            let params = load_params(&cfg.model)?;
            let em = with_path(&cfg.em, ExplicitMemory::load(&cfg.em))?;
            let data = load_data(&input)?;
            let feats = project_all(&params, &data)?;
            let mut csv = String::from("index,label,predicted\n");
            let mut hits = 0usize;
            for (i, (f, &y)) in feats.iter().zip(data.labels()).enumerate() {
                let p = em.classify(f)?.class_id;
                hits += usize::from(p == y);
                writeln!(csv, "{i},{y},{p}").unwrap();
            }
            save(&cfg.predictions, csv.as_bytes())?;
            println!("accuracy {:.4} over {} rows", hits as f64 / data.len().max(1) as f64, data.len());
            Ok(0)
        }
    }
}
