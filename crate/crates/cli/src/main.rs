//! `duq`: batch front end for data generation, training, evaluation,
//! baselines, gradient checks and report tables.

mod manifest;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use duq_core::elvm::{grad_check_suite, SUITE_STEP};
use duq_core::synth::{self, write_pgm, BenchConfig, Dataset, Split};
use duq_core::trainer::run::{CHECKPOINT_FILE, LOG_FILE};
use duq_core::trainer::{train, Method, TrainConfig, TrainOptions, TrainState};
use duq_core::{DuqError, Result};
use serde::de::DeserializeOwned;

use manifest::{beside, ManifestBuilder, MANIFEST_FILE};

const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(
    name = "duq",
    version,
    about = "Dense uncertainty estimation on a synthetic benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic benchmark.
    GenData {
        /// Benchmark config JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the full model or one of the ablations.
    Train {
        /// Overrides the config's method (full, base or dual-head).
        #[arg(long, value_enum)]
        method: Option<ModelArg>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Evaluate a checkpoint on one split, writing reports and uncertainty maps.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON report; a per-image CSV is written beside it.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        maps: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test-id")]
        split: SplitArg,
    },
    /// Train a sampling baseline.
    Baseline {
        #[arg(long, value_enum)]
        method: BaselineArg,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Finite-difference check of every layer kind and the full model.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Merge evaluation reports into one comparison table.
    Report {
        /// JSON reports or per-image CSVs written by `eval`.
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        /// Table CSV.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training config JSON; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelArg {
    Full,
    Base,
    DualHead,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BaselineArg {
    McDropout,
    DeepEnsemble,
    Gan,
    Cvae,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Val,
    TestId,
    TestOod,
}

impl From<ModelArg> for Method {
    fn from(m: ModelArg) -> Method {
        match m {
            ModelArg::Full => Method::Full,
            ModelArg::Base => Method::Base,
            ModelArg::DualHead => Method::DualHead,
        }
    }
}

impl From<BaselineArg> for Method {
    fn from(m: BaselineArg) -> Method {
        match m {
            BaselineArg::McDropout => Method::McDropout,
            BaselineArg::DeepEnsemble => Method::DeepEnsemble,
            BaselineArg::Gan => Method::Gan,
            BaselineArg::Cvae => Method::Cvae,
        }
    }
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Val => Split::Val,
            SplitArg::TestId => Split::TestId,
            SplitArg::TestOod => Split::TestOod,
        }
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| DuqError::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| DuqError::InvalidConfig(format!("{}: {e}", p.display())))
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DuqError::io(dir, e))
}

fn gen_data(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: BenchConfig = read_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let mut m = ManifestBuilder::new("gen-data");
    m.config(&cfg)?;
    m.seed(cfg.seed);
    let data = synth::generate_dataset(&cfg, out)?;
    m.artifact(out.join(synth::CONFIG_FILE));
    for split in Split::ALL {
        m.artifact(out.join(split.dir_name()));
    }
    m.write(&out.join(MANIFEST_FILE))?;
    println!(
        "wrote {} train, {} val, {} test-id, {} test-ood samples to {}",
        data.train.len(),
        data.val.len(),
        data.test_id.len(),
        data.test_ood.len(),
        out.display()
    );
    Ok(())
}

fn run_training(args: &TrainArgs, method: Option<Method>, name: &str) -> Result<()> {
    let mut cfg: TrainConfig = read_config(args.config.as_deref())?;
    if let Some(m) = method {
        cfg.method = m;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let data = synth::load_dataset(&args.data)?;
    let mut m = ManifestBuilder::new(name);
    m.config(&serde_json::json!({ "train": &cfg, "data": &args.data }))?;
    m.seed(cfg.seed);
    let outcome = train(
        &cfg,
        &data,
        &TrainOptions {
            out_dir: Some(args.out.clone()),
        },
    )?;
    m.artifact(args.out.join(CHECKPOINT_FILE));
    m.artifact(args.out.join(LOG_FILE));
    m.write(&args.out.join(MANIFEST_FILE))?;
    if let Some(r) = outcome.log.last() {
        println!(
            "{} trained {} epochs: val mae {:.4} f {:.4} ece {:.4}",
            cfg.method,
            r.epoch + 1,
            r.val_mae,
            r.val_f_beta,
            r.val_ece_d
        );
    }
    Ok(())
}

fn samples(data: &Dataset, split: Split) -> Result<&[duq_core::synth::SyntheticSample]> {
    let s = data.split(split);
    if s.is_empty() {
        return Err(DuqError::Usage(format!(
            "split {} is empty",
            split.dir_name()
        )));
    }
    Ok(s)
}

fn eval(
    ckpt: &Path,
    data_dir: &Path,
    report: &Path,
    maps: Option<&Path>,
    split: Split,
) -> Result<()> {
    let mut m = ManifestBuilder::new("eval");
    let state = TrainState::load(ckpt)?;
    let data = synth::load_dataset(data_dir)?;
    m.config(&serde_json::json!({
        "ckpt": ckpt,
        "data": data_dir,
        "split": split.dir_name(),
        "model": state.spec(),
    }))?;
    m.seed(state.config().seed);
    let out = state.evaluate(split.dir_name(), samples(&data, split)?)?;
    if let Some(dir) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    out.report.write_json(report)?;
    let csv = report.with_extension("csv");
    out.report.write_csv(&csv)?;
    m.artifact(report);
    m.artifact(&csv);
    if let Some(maps) = maps {
        let dir = maps.join(split.dir_name());
        create_dir(&dir)?;
        for img in &out.images {
            let stem = img.file.rsplit('/').next().unwrap_or(&img.file).to_string();
            for (kind, map) in [
                ("prediction", &img.prediction),
                ("aleatoric", &img.aleatoric),
                ("epistemic", &img.epistemic),
                ("predictive", &img.predictive),
            ] {
                synth::write_dmap(dir.join(format!("{stem}_{kind}.dmap")), map)?;
                write_pgm(dir.join(format!("{stem}_{kind}.pgm")), map)?;
            }
        }
        m.artifact(dir);
    }
    m.write(&beside(report))?;
    let a = &out.report.aggregate;
    println!(
        "{} on {}: mae {:.4} f {:.4} ece {:.4} pavpu {:.4} ({} images)",
        out.report.method, out.report.dataset, a.mae, a.f_beta, a.ece_d, a.pavpu, a.images
    );
    Ok(())
}

fn grad_check(seed: u64) -> Result<bool> {
    let suite = grad_check_suite(seed)?;
    let mut worst: f64 = 0.0;
    for e in &suite {
        let r = &e.report;
        println!(
            "{:<18} max rel err {:.3e}  probed {}  skipped kinks {}  unresolved {}  ({})",
            e.name, r.max_relative_error, r.probed, r.skipped_kinks, r.skipped_unresolved, r.worst
        );
        worst = worst.max(r.max_relative_error);
    }
    let ok = worst < GRAD_TOLERANCE;
    println!(
        "max relative error {worst:.3e} at h = {SUITE_STEP:e}: {}",
        if ok { "pass" } else { "FAIL" }
    );
    Ok(ok)
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("DUQ_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        DuqError::Usage(format!("DUQ_THREADS must be a positive integer, got '{v}'"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| DuqError::Internal(e.to_string()))
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    configure_threads()?;
    match cli.command {
        Command::GenData { config, out, seed } => gen_data(config.as_deref(), &out, seed)?,
        Command::Train { method, train } => {
            run_training(&train, method.map(Method::from), "train")?
        }
        Command::Baseline { method, train } => {
            run_training(&train, Some(method.into()), "baseline")?
        }
        Command::Eval {
            ckpt,
            data,
            report,
            maps,
            split,
        } => eval(&ckpt, &data, &report, maps.as_deref(), split.into())?,
        Command::GradCheck { seed } => {
            if !grad_check(seed)? {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Report { inputs, out } => {
            let mut m = ManifestBuilder::new("report");
            m.config(&serde_json::json!({ "inputs": &inputs }))?;
            let table = report::merge(&inputs)?;
            report::write_csv(&table, &out)?;
            print!("{}", report::render(&table));
            m.artifact(&out);
            m.write(&beside(&out))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                DuqError::Usage(_) | DuqError::InvalidConfig(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        super::Cli::command().debug_assert();
    }
}
